//! Deterministic heterogeneous shape-world datasets.
//!
//! Each sample is a grayscale grid containing 1-4 non-overlapping geometric
//! shapes (disk, ring, square, bar, triangle, cross), each shape class with
//! its own intensity band, plus per-client brightness offset and pixel
//! noise. A client only "knows" a subset of the shape classes: shapes
//! outside the subset are present in the image but labeled background in the
//! client-visible map. The hold-out client carries the union of all labels
//! and is never used for training.
//!
//! Generation is a pure function of the spec: the same spec always produces
//! byte-identical datasets, and two clients with the same seed and imaging
//! settings see identical images that differ only in their visible maps.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::Provenance;
use crate::seeds::{self, domain};

/// Number of distinct foreground shape classes available.
pub const NUM_SHAPE_KINDS: usize = 6;

/// Per-client data settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataSpec {
    pub name: String,
    /// Foreground labels (1-based) this client has annotations for.
    pub labels: Vec<u8>,
    pub samples: usize,
    /// Added to every pixel intensity, models scanner brightness shifts.
    pub intensity_offset: f64,
    /// Standard deviation of the Gaussian pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Full dataset roster: training clients plus the hold-out client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeWorldSpec {
    pub grid: (usize, usize),
    /// Number of foreground shape classes in the global label set.
    pub foreground_labels: u8,
    pub clients: Vec<ClientDataSpec>,
    pub holdout: ClientDataSpec,
}

impl ShapeWorldSpec {
    /// Global label count including background 0.
    pub fn num_global_labels(&self) -> u8 {
        self.foreground_labels + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        if h < 16 || w < 16 {
            return Err(Error::InvalidSpec(format!(
                "grid too small for the shape inventory, need at least 16x16, got {h}x{w}"
            )));
        }
        if self.foreground_labels == 0 || self.foreground_labels as usize > NUM_SHAPE_KINDS {
            return Err(Error::InvalidSpec(format!(
                "foreground_labels must be in 1..={NUM_SHAPE_KINDS}"
            )));
        }
        if self.clients.is_empty() {
            return Err(Error::InvalidSpec("no training clients".into()));
        }
        let mut union = std::collections::BTreeSet::new();
        for c in self.clients.iter().chain(std::iter::once(&self.holdout)) {
            if c.labels.is_empty() {
                return Err(Error::InvalidSpec(format!(
                    "client {} has an empty label subset",
                    c.name
                )));
            }
            if c.samples == 0 {
                return Err(Error::InvalidSpec(format!(
                    "client {} has no samples",
                    c.name
                )));
            }
            for &l in &c.labels {
                if l == 0 || l > self.foreground_labels {
                    return Err(Error::InvalidSpec(format!(
                        "client {}: label {l} outside 1..={}",
                        c.name, self.foreground_labels
                    )));
                }
            }
        }
        for c in &self.clients {
            union.extend(c.labels.iter().copied());
        }
        let full: std::collections::BTreeSet<u8> = (1..=self.foreground_labels).collect();
        if union != full {
            return Err(Error::InvalidSpec(
                "union of client label subsets must cover the full foreground set".into(),
            ));
        }
        let holdout: std::collections::BTreeSet<u8> = self.holdout.labels.iter().copied().collect();
        if holdout != full {
            return Err(Error::InvalidSpec(
                "hold-out client must carry the union of all labels".into(),
            ));
        }
        Ok(())
    }

    /// The default desk-scale roster: five training clients with skewed
    /// sample counts and partial label subsets, plus a hold-out client with
    /// every label.
    pub fn default_roster(grid: (usize, usize)) -> ShapeWorldSpec {
        let mk = |name: &str, labels: Vec<u8>, samples, offset, noise, seed| ClientDataSpec {
            name: name.to_string(),
            labels,
            samples,
            intensity_offset: offset,
            noise_sigma: noise,
            seed,
        };
        ShapeWorldSpec {
            grid,
            foreground_labels: 6,
            clients: vec![
                mk("alpha", vec![1, 2, 3, 4], 600, -0.06, 0.02, 101),
                mk("bravo", vec![5], 80, 0.04, 0.05, 102),
                mk("charlie", vec![4, 5, 6], 30, -0.08, 0.03, 103),
                mk("delta", vec![1, 6], 500, 0.03, 0.02, 104),
                mk("echo", vec![2, 3, 5, 6], 30, 0.08, 0.06, 105),
            ],
            holdout: mk("union", vec![1, 2, 3, 4, 5, 6], 100, 0.0, 0.03, 106),
        }
    }
}

/// One generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `[h][w]` intensities in [0, 1].
    pub image: Vec<f64>,
    /// `[h][w]` global labels for every shape present.
    pub full_labels: Vec<u8>,
    /// `[h][w]` labels with out-of-subset shapes masked to background.
    pub visible_labels: Vec<u8>,
    /// Shape instances actually placed, as (label, pixel count).
    pub placed: Vec<(u8, usize)>,
}

/// A client's dataset with its provenance tag.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub spec: ClientDataSpec,
    pub grid: (usize, usize),
    /// Global foreground label count (full maps may contain any of these).
    pub foreground_labels: u8,
    pub samples: Vec<SynthSample>,
    pub provenance: Provenance,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

const BACKGROUND_INTENSITY: f64 = 0.06;

/// Flat intensity assigned to a shape class before offset and noise.
fn class_intensity(label: u8) -> f64 {
    0.20 + 0.12 * label as f64
}

struct ShapeStamp {
    /// Offsets (dy, dx) from the anchor covered by the shape.
    pixels: Vec<(i64, i64)>,
}

fn stamp_disk(r: i64) -> ShapeStamp {
    let mut pixels = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                pixels.push((dy, dx));
            }
        }
    }
    ShapeStamp { pixels }
}

fn stamp_ring(r: i64) -> ShapeStamp {
    let inner = r - 2;
    let mut pixels = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = dy * dy + dx * dx;
            if d2 <= r * r && d2 > inner * inner {
                pixels.push((dy, dx));
            }
        }
    }
    ShapeStamp { pixels }
}

fn stamp_square(side: i64) -> ShapeStamp {
    let mut pixels = Vec::new();
    for dy in 0..side {
        for dx in 0..side {
            pixels.push((dy, dx));
        }
    }
    ShapeStamp { pixels }
}

fn stamp_bar(len: i64, horizontal: bool) -> ShapeStamp {
    let mut pixels = Vec::new();
    for t in 0..3 {
        for l in 0..len {
            pixels.push(if horizontal { (t, l) } else { (l, t) });
        }
    }
    ShapeStamp { pixels }
}

fn stamp_triangle(side: i64) -> ShapeStamp {
    let mut pixels = Vec::new();
    for dy in 0..side {
        for dx in 0..=dy {
            pixels.push((dy, dx));
        }
    }
    ShapeStamp { pixels }
}

fn stamp_cross(arm: i64) -> ShapeStamp {
    let mut pixels = Vec::new();
    for t in 0..2 {
        for l in -arm..=arm + 1 {
            pixels.push((t, l));
            if !pixels.contains(&(l, t)) {
                pixels.push((l, t));
            }
        }
    }
    ShapeStamp { pixels }
}

fn random_stamp(kind: u8, rng: &mut impl Rng) -> ShapeStamp {
    match kind {
        1 => stamp_disk(rng.random_range(3..=5)),
        2 => stamp_ring(rng.random_range(4..=6)),
        3 => stamp_square(rng.random_range(5..=8)),
        4 => stamp_bar(rng.random_range(6..=10), rng.random_bool(0.5)),
        5 => stamp_triangle(rng.random_range(6..=9)),
        6 => stamp_cross(rng.random_range(3..=4)),
        _ => unreachable!("shape kind out of range"),
    }
}

/// Generate one sample. Shape geometry and noise depend only on
/// `(client seed, imaging settings, sample index)`, never on the label
/// subset, so clients with equal seeds and settings see identical images.
fn generate_sample(
    grid: (usize, usize),
    foreground_labels: u8,
    client: &ClientDataSpec,
    index: usize,
) -> SynthSample {
    let (h, w) = grid;
    let mut rng = seeds::rng(client.seed, &[domain::DATA, index as u64]);
    let mut full = vec![0u8; h * w];
    // 1 to 4 shapes; occupancy includes a 1-pixel separation ring so that
    // instances of the same class stay disconnected.
    let mut occupied = vec![false; h * w];
    let want = rng.random_range(1..=4usize);
    let mut placed = Vec::new();
    for _ in 0..want {
        let label = rng.random_range(1..=foreground_labels);
        let stamp = random_stamp(label, &mut rng);
        let min_dy = stamp.pixels.iter().map(|p| p.0).min().unwrap();
        let max_dy = stamp.pixels.iter().map(|p| p.0).max().unwrap();
        let min_dx = stamp.pixels.iter().map(|p| p.1).min().unwrap();
        let max_dx = stamp.pixels.iter().map(|p| p.1).max().unwrap();
        for _try in 0..30 {
            let y = rng.random_range((-min_dy)..(h as i64 - max_dy));
            let x = rng.random_range((-min_dx)..(w as i64 - max_dx));
            let clear = stamp.pixels.iter().all(|&(dy, dx)| {
                let (py, px) = (y + dy, x + dx);
                !occupied[py as usize * w + px as usize]
            });
            if clear {
                for &(dy, dx) in &stamp.pixels {
                    let (py, px) = ((y + dy) as usize, (x + dx) as usize);
                    full[py * w + px] = label;
                    // block the shape and its 1-pixel neighbourhood
                    for ny in py.saturating_sub(1)..(py + 2).min(h) {
                        for nx in px.saturating_sub(1)..(px + 2).min(w) {
                            occupied[ny * w + nx] = true;
                        }
                    }
                }
                placed.push((label, stamp.pixels.len()));
                break;
            }
        }
    }
    let image: Vec<f64> = full
        .iter()
        .map(|&l| {
            let base = if l == 0 {
                BACKGROUND_INTENSITY
            } else {
                class_intensity(l)
            };
            let noise: f64 = StandardNormal.sample(&mut rng);
            (base + client.intensity_offset + client.noise_sigma * noise).clamp(0.0, 1.0)
        })
        .collect();
    let visible: Vec<u8> = full
        .iter()
        .map(|&l| if l == 0 || client.labels.contains(&l) { l } else { 0 })
        .collect();
    SynthSample {
        image,
        full_labels: full,
        visible_labels: visible,
        placed,
    }
}

/// Generate the dataset for one client of the roster.
/// `client_id` indexes training clients; `clients.len()` is the hold-out.
pub fn generate_client_dataset(spec: &ShapeWorldSpec, client_id: usize) -> Result<ClientDataset> {
    spec.validate()?;
    let (client, holdout) = if client_id < spec.clients.len() {
        (&spec.clients[client_id], false)
    } else if client_id == spec.clients.len() {
        (&spec.holdout, true)
    } else {
        return Err(Error::InvalidArgument(format!(
            "client id {client_id} out of range"
        )));
    };
    let samples = (0..client.samples)
        .map(|i| generate_sample(spec.grid, spec.foreground_labels, client, i))
        .collect();
    Ok(ClientDataset {
        spec: client.clone(),
        grid: spec.grid,
        foreground_labels: spec.foreground_labels,
        samples,
        provenance: Provenance {
            client_id,
            holdout,
        },
    })
}

/// Generate every dataset of the roster: training clients in order, then the
/// hold-out client last.
pub fn generate_all(spec: &ShapeWorldSpec) -> Result<Vec<ClientDataset>> {
    (0..=spec.clients.len())
        .map(|id| generate_client_dataset(spec, id))
        .collect()
}

/// Per-client label histogram (shape instances per label) and sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityRow {
    pub client: String,
    pub holdout: bool,
    pub samples: usize,
    /// `counts[l-1]` = number of shape instances with label `l`.
    pub label_counts: Vec<usize>,
}

/// Summarize the roster's heterogeneity: one row per client.
pub fn heterogeneity_profile(spec: &ShapeWorldSpec) -> Result<Vec<HeterogeneityRow>> {
    Ok(heterogeneity_from(&generate_all(spec)?, spec.foreground_labels))
}

/// Profile rows for datasets that are already generated.
pub fn heterogeneity_from(datasets: &[ClientDataset], foreground_labels: u8) -> Vec<HeterogeneityRow> {
    datasets
        .iter()
        .map(|ds| {
            let mut counts = vec![0usize; foreground_labels as usize];
            for s in &ds.samples {
                for &(label, _) in &s.placed {
                    counts[label as usize - 1] += 1;
                }
            }
            HeterogeneityRow {
                client: ds.spec.name.clone(),
                holdout: ds.provenance.holdout,
                samples: ds.samples.len(),
                label_counts: counts,
            }
        })
        .collect()
}

/// Count connected components (4-neighbourhood) per label in a label map.
/// Shapes are generated with a 1-pixel separation, so this recovers the
/// instance count independently of the generator's bookkeeping.
pub fn count_components(labels: &[u8], h: usize, w: usize, num_fg: u8) -> Vec<usize> {
    let mut counts = vec![0usize; num_fg as usize];
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    for start in 0..h * w {
        let l = labels[start];
        if l == 0 || seen[start] {
            continue;
        }
        counts[l as usize - 1] += 1;
        stack.push(start);
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if labels[q] == l && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
    }
    counts
}

// ---- binary persistence ----------------------------------------------------
//
// Layout (little-endian):
//   magic "FSW1" | version u32 | client_id u32 | holdout u8 |
//   n u32 | h u32 | w u32 | foreground_labels u8 |
//   per sample: image f32[h*w] | full u8[h*w] | visible u8[h*w]

const MAGIC: &[u8; 4] = b"FSW1";
const FORMAT_VERSION: u32 = 1;

pub fn write_dataset(ds: &ClientDataset, mut out: impl Write) -> Result<()> {
    let (h, w) = ds.grid;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(ds.provenance.client_id as u32).to_le_bytes())?;
    out.write_all(&[ds.provenance.holdout as u8])?;
    out.write_all(&(ds.samples.len() as u32).to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&[ds.foreground_labels])?;
    for s in &ds.samples {
        for &v in &s.image {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        out.write_all(&s.full_labels)?;
        out.write_all(&s.visible_labels)?;
    }
    Ok(())
}

/// Read back a persisted dataset. Instance bookkeeping (`placed`) is
/// reconstructed by component counting.
pub fn read_dataset(mut input: impl Read) -> Result<ClientDataset> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    input.read_exact(&mut u32buf)?;
    let client_id = u32::from_le_bytes(u32buf) as usize;
    let mut b = [0u8; 1];
    input.read_exact(&mut b)?;
    let holdout = b[0] != 0;
    input.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    input.read_exact(&mut u32buf)?;
    let h = u32::from_le_bytes(u32buf) as usize;
    input.read_exact(&mut u32buf)?;
    let w = u32::from_le_bytes(u32buf) as usize;
    input.read_exact(&mut b)?;
    let num_fg = b[0];
    let plane = h * w;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut image = vec![0.0f64; plane];
        let mut f32buf = [0u8; 4];
        for v in &mut image {
            input.read_exact(&mut f32buf)?;
            *v = f32::from_le_bytes(f32buf) as f64;
        }
        let mut full = vec![0u8; plane];
        input.read_exact(&mut full)?;
        let mut visible = vec![0u8; plane];
        input.read_exact(&mut visible)?;
        let placed = count_components(&full, h, w, num_fg.max(1))
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat((i as u8 + 1, 0)).take(c))
            .collect();
        samples.push(SynthSample {
            image,
            full_labels: full,
            visible_labels: visible,
            placed,
        });
    }
    Ok(ClientDataset {
        spec: ClientDataSpec {
            name: format!("client-{client_id}"),
            labels: (1..=num_fg).collect(),
            samples: n,
            intensity_offset: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        },
        grid: (h, w),
        foreground_labels: num_fg,
        samples,
        provenance: Provenance { client_id, holdout },
    })
}
