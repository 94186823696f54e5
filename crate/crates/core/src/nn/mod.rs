//! Flat-parameter segmentation models.
//!
//! A model is a shared backbone plus one segmentation head per client, all
//! parameters living in a single [`ParamVector`]. Two backbones are
//! provided: a small 2-D conv encoder-decoder (two pooling levels down, two
//! nearest-neighbour upsampling levels back up) and a fully connected MLP
//! used by unit tests and oracles. Heads map backbone features to the
//! client's label channels; channel 0 is always background.
//!
//! Forward and backward passes are exact and deterministic. The backward
//! pass differentiates the combined cross-entropy + soft-Dice loss with
//! respect to every parameter of the backbone and the selected head (other
//! heads receive zero gradient).

pub mod loss;
pub mod ops;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::seeds::{self, domain};

pub use loss::{ce_dice_loss, ce_dice_loss_and_grad, softmax, softmax_maps, LossValue, DICE_SMOOTH};
pub use ops::Activation;

/// Backbone architecture choice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneSpec {
    /// Conv encoder-decoder: 1 -> C -> 2C -> 2C -> C -> C feature channels,
    /// with 2x average pooling after the first two convs, 2x nearest
    /// upsampling before the last two, and additive skip connections at
    /// both resolutions (the bottleneck alone cannot carry shapes a few
    /// pixels wide). Requires the grid to be divisible by 4.
    Conv { channels: usize },
    /// Fully connected: the flattened image through `hidden` layers; heads
    /// map the last hidden layer to per-pixel logits.
    Mlp { hidden: Vec<usize> },
}

/// One segmentation head: `labels[c]` is the global label emitted by output
/// channel `c`. Channel 0 must be the background label 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub labels: Vec<u8>,
}

impl HeadSpec {
    pub fn new(labels: Vec<u8>) -> Self {
        HeadSpec { labels }
    }

    pub fn channels(&self) -> usize {
        self.labels.len()
    }

    /// Channel index for a global label, if this head covers it.
    pub fn channel_of(&self, global_label: u8) -> Option<usize> {
        self.labels.iter().position(|&l| l == global_label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input grid (height, width).
    pub grid: (usize, usize),
    pub backbone: BackboneSpec,
    pub heads: Vec<HeadSpec>,
    pub activation: Activation,
    /// Dropout rate used only by the MC-Dropout baseline sampler.
    pub dropout_rate: f64,
    /// Size of the global label space, background included.
    pub num_global_labels: u8,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        if h == 0 || w == 0 {
            return Err(Error::InvalidSpec("grid dimensions must be positive".into()));
        }
        match &self.backbone {
            BackboneSpec::Conv { channels } => {
                if *channels == 0 {
                    return Err(Error::InvalidSpec("conv backbone needs channels >= 1".into()));
                }
                if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
                    return Err(Error::InvalidSpec(format!(
                        "conv backbone needs a grid divisible by 4 and at least 8x8, got {h}x{w}"
                    )));
                }
            }
            BackboneSpec::Mlp { hidden } => {
                if hidden.is_empty() || hidden.iter().any(|&d| d == 0) {
                    return Err(Error::InvalidSpec(
                        "mlp backbone needs at least one non-empty hidden layer".into(),
                    ));
                }
            }
        }
        if self.heads.is_empty() {
            return Err(Error::InvalidSpec("at least one head required".into()));
        }
        for (i, head) in self.heads.iter().enumerate() {
            if head.labels.is_empty() {
                return Err(Error::InvalidSpec(format!("head {i} has no channels")));
            }
            if head.labels[0] != 0 {
                return Err(Error::InvalidSpec(format!(
                    "head {i}: channel 0 must be the background label"
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for &l in &head.labels {
                if l >= self.num_global_labels {
                    return Err(Error::InvalidSpec(format!(
                        "head {i}: label {l} outside the global label set"
                    )));
                }
                if !seen.insert(l) {
                    return Err(Error::InvalidSpec(format!(
                        "head {i}: duplicate label {l}"
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidSpec(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Where a batch came from; training paths refuse hold-out batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub client_id: usize,
    pub holdout: bool,
}

/// One mini-batch: grayscale images plus targets in the owning head's local
/// channel space.
#[derive(Debug, Clone)]
pub struct BatchTensor {
    /// `[n][h][w]` intensities in [0, 1].
    pub inputs: Vec<f64>,
    /// `[n][h][w]` local channel indices, each `< channels` of the head.
    pub targets: Vec<u8>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub provenance: Provenance,
}

impl BatchTensor {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Multiplicative dropout factors (0 or 1/(1-rate)) for every backbone
/// activation element of a forward pass.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub rate: f64,
    factors: Vec<f64>,
}

impl DropoutMask {
    pub fn keep_fraction(&self) -> f64 {
        if self.factors.is_empty() {
            return 1.0;
        }
        self.factors.iter().filter(|&&f| f != 0.0).count() as f64 / self.factors.len() as f64
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    w_off: usize,
    w_len: usize,
    b_off: usize,
    b_len: usize,
    fan_in: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvStage {
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
}

#[derive(Debug, Clone)]
enum Plan {
    Conv { stages: [ConvStage; 5] },
    Mlp { dims: Vec<usize> },
}

/// A validated model: spec plus the flat parameter layout.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    plan: Plan,
    backbone_segs: Vec<Segment>,
    head_segs: Vec<Segment>,
    param_len: usize,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Model> {
        spec.validate()?;
        let (h, w) = spec.grid;
        let plane = h * w;
        let mut off = 0usize;
        let push = |off: &mut usize, w_len: usize, b_len: usize, fan_in: usize| {
            let seg = Segment {
                w_off: *off,
                w_len,
                b_off: *off + w_len,
                b_len,
                fan_in,
            };
            *off += w_len + b_len;
            seg
        };

        let (plan, backbone_segs, feature_dim) = match &spec.backbone {
            BackboneSpec::Conv { channels } => {
                let c = *channels;
                let stages = [
                    ConvStage { in_c: 1, out_c: c, h, w },
                    ConvStage { in_c: c, out_c: 2 * c, h: h / 2, w: w / 2 },
                    ConvStage { in_c: 2 * c, out_c: 2 * c, h: h / 4, w: w / 4 },
                    ConvStage { in_c: 2 * c, out_c: c, h: h / 2, w: w / 2 },
                    ConvStage { in_c: c, out_c: c, h, w },
                ];
                let segs: Vec<Segment> = stages
                    .iter()
                    .map(|s| push(&mut off, s.out_c * s.in_c * 9, s.out_c, s.in_c * 9))
                    .collect();
                (Plan::Conv { stages }, segs, c)
            }
            BackboneSpec::Mlp { hidden } => {
                let mut dims = vec![plane];
                dims.extend_from_slice(hidden);
                let segs: Vec<Segment> = dims
                    .windows(2)
                    .map(|d| push(&mut off, d[1] * d[0], d[1], d[0]))
                    .collect();
                let feat = *dims.last().unwrap();
                (Plan::Mlp { dims }, segs, feat)
            }
        };

        let head_segs: Vec<Segment> = spec
            .heads
            .iter()
            .map(|head| {
                let c_head = head.channels();
                match plan {
                    Plan::Conv { .. } => push(&mut off, c_head * feature_dim, c_head, feature_dim),
                    Plan::Mlp { .. } => {
                        push(&mut off, c_head * plane * feature_dim, c_head * plane, feature_dim)
                    }
                }
            })
            .collect();

        Ok(Model {
            spec,
            plan,
            backbone_segs,
            head_segs,
            param_len: off,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn num_heads(&self) -> usize {
        self.spec.heads.len()
    }

    pub fn head(&self, id: usize) -> Result<&HeadSpec> {
        self.spec
            .heads
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no head with id {id}")))
    }

    /// Flat-parameter range owned by head `id` (weights and bias).
    pub fn head_param_range(&self, id: usize) -> Result<std::ops::Range<usize>> {
        let seg = self
            .head_segs
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no head with id {id}")))?;
        Ok(seg.w_off..seg.b_off + seg.b_len)
    }

    /// Parameters before the first head segment, shared by all clients.
    pub fn backbone_param_len(&self) -> usize {
        self.head_segs.first().map_or(self.param_len, |s| s.w_off)
    }

    /// He initialization: per-layer zero-mean Gaussian weights with variance
    /// `2 / fan_in`, zero biases. Deterministic for a given seed.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut theta = vec![0.0; self.param_len];
        let mut rng = seeds::rng(seed, &[domain::INIT]);
        for seg in self.backbone_segs.iter().chain(self.head_segs.iter()) {
            let std = (2.0 / seg.fan_in as f64).sqrt();
            for v in &mut theta[seg.w_off..seg.w_off + seg.w_len] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
            // biases stay exactly zero
        }
        ParamVector::from_vec(theta)
    }

    /// Total backbone activation elements per sample (the dropout domain).
    pub fn activation_elems_per_sample(&self) -> usize {
        match &self.plan {
            Plan::Conv { stages } => stages.iter().map(|s| s.out_c * s.h * s.w).sum(),
            Plan::Mlp { dims } => dims[1..].iter().sum(),
        }
    }

    /// Draw a fresh dropout mask for a batch of `n` samples.
    pub fn dropout_mask(&self, n: usize, rate: f64, seed: u64) -> Result<DropoutMask> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let len = n * self.activation_elems_per_sample();
        let scale = 1.0 / (1.0 - rate);
        let mut rng = seeds::rng(seed, &[domain::DROPOUT]);
        let factors = (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        Ok(DropoutMask { rate, factors })
    }

    fn check_theta(&self, theta: &ParamVector) -> Result<()> {
        theta.check_len(self.param_len)
    }

    fn check_batch(&self, batch: &BatchTensor) -> Result<()> {
        let (h, w) = self.spec.grid;
        if batch.h != h || batch.w != w {
            return Err(Error::DimensionMismatch {
                expected: h * w,
                got: batch.h * batch.w,
            });
        }
        if batch.inputs.len() != batch.n * h * w {
            return Err(Error::DimensionMismatch {
                expected: batch.n * h * w,
                got: batch.inputs.len(),
            });
        }
        if batch.targets.len() != batch.n * h * w {
            return Err(Error::DimensionMismatch {
                expected: batch.n * h * w,
                got: batch.targets.len(),
            });
        }
        Ok(())
    }

    /// Forward pass for one head on a full batch; returns logits shaped
    /// `[n][channels][h*w]`.
    pub fn forward(
        &self,
        theta: &ParamVector,
        batch: &BatchTensor,
        head: usize,
        mask: Option<&DropoutMask>,
    ) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        self.forward_inputs(theta, &batch.inputs, batch.n, head, mask)
    }

    /// Forward pass from raw image intensities (no targets needed).
    pub fn forward_inputs(
        &self,
        theta: &ParamVector,
        inputs: &[f64],
        n: usize,
        head: usize,
        mask: Option<&DropoutMask>,
    ) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        self.head(head)?;
        let cache = self.forward_backbone(theta, inputs, n, mask)?;
        let logits = self.head_logits(theta, cache.features(), n, head);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(logits)
    }

    /// Forward pass evaluating every head on a shared backbone computation.
    pub fn forward_all_heads(
        &self,
        theta: &ParamVector,
        inputs: &[f64],
        n: usize,
        mask: Option<&DropoutMask>,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_theta(theta)?;
        let cache = self.forward_backbone(theta, inputs, n, mask)?;
        Ok((0..self.num_heads())
            .map(|h| self.head_logits(theta, cache.features(), n, h))
            .collect())
    }

    /// Loss and gradient of the combined CE + soft-Dice loss with respect to
    /// every parameter. Gradient entries of unused heads are zero.
    pub fn backward(
        &self,
        theta: &ParamVector,
        batch: &BatchTensor,
        head: usize,
    ) -> Result<(LossValue, ParamVector)> {
        self.check_theta(theta)?;
        self.check_batch(batch)?;
        let head_spec = self.head(head)?;
        let c_head = head_spec.channels();
        let plane = batch.plane();
        let n = batch.n;

        let cache = self.forward_backbone(theta, &batch.inputs, n, None)?;
        let logits = self.head_logits(theta, cache.features(), n, head);
        let (loss, d_logits) =
            ce_dice_loss_and_grad(&logits, &batch.targets, n, c_head, plane)?;

        let mut grad = vec![0.0; self.param_len];
        let d_features = self.head_backward(theta, cache.features(), &d_logits, n, head, &mut grad);
        self.backbone_backward(theta, &cache, d_features, n, &mut grad)?;
        let grad = ParamVector::from_vec(grad);
        if !grad.all_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        Ok((loss, grad))
    }

    // ---- internals -------------------------------------------------------

    fn forward_backbone(
        &self,
        theta: &ParamVector,
        inputs: &[f64],
        n: usize,
        mask: Option<&DropoutMask>,
    ) -> Result<Cache> {
        let (h, w) = self.spec.grid;
        let plane = h * w;
        if inputs.len() != n * plane {
            return Err(Error::DimensionMismatch {
                expected: n * plane,
                got: inputs.len(),
            });
        }
        if let Some(m) = mask {
            let want = n * self.activation_elems_per_sample();
            if m.factors.len() != want {
                return Err(Error::DimensionMismatch {
                    expected: want,
                    got: m.factors.len(),
                });
            }
        }
        let th = theta.as_slice();
        let act = self.spec.activation;
        let mut cache = Cache {
            stage_inputs: Vec::new(),
            pre: Vec::new(),
            post: Vec::new(),
        };
        let mut mask_off = 0usize;
        match &self.plan {
            Plan::Conv { stages } => {
                let mut current = inputs.to_vec();
                for (i, (stage, seg)) in stages.iter().zip(&self.backbone_segs).enumerate() {
                    let out_len = n * stage.out_c * stage.h * stage.w;
                    let mut pre = vec![0.0; out_len];
                    ops::conv3x3_forward(
                        &current,
                        &mut pre,
                        &th[seg.w_off..seg.w_off + seg.w_len],
                        &th[seg.b_off..seg.b_off + seg.b_len],
                        n,
                        stage.in_c,
                        stage.out_c,
                        stage.h,
                        stage.w,
                    );
                    let mut post: Vec<f64> = pre.iter().map(|&a| act.apply(a)).collect();
                    if let Some(m) = mask {
                        for (p, f) in post.iter_mut().zip(&m.factors[mask_off..mask_off + out_len]) {
                            *p *= f;
                        }
                    }
                    mask_off += out_len;
                    // transitions: pool after stages 0 and 1; upsample after
                    // 2 and 3 with the matching encoder output added back in
                    let next = match i {
                        0 | 1 => {
                            let mut out =
                                vec![0.0; n * stage.out_c * (stage.h / 2) * (stage.w / 2)];
                            ops::avgpool2_forward(&post, &mut out, n * stage.out_c, stage.h, stage.w);
                            out
                        }
                        2 | 3 => {
                            let mut out =
                                vec![0.0; n * stage.out_c * (stage.h * 2) * (stage.w * 2)];
                            ops::upsample2_forward(&post, &mut out, n * stage.out_c, stage.h, stage.w);
                            let skip = &cache.post[3 - i]; // stage 2 <- z1, stage 3 <- z0
                            for (o, &s) in out.iter_mut().zip(skip.iter()) {
                                *o += s;
                            }
                            out
                        }
                        _ => Vec::new(),
                    };
                    cache.stage_inputs.push(std::mem::take(&mut current));
                    cache.pre.push(pre);
                    cache.post.push(post);
                    current = next;
                }
            }
            Plan::Mlp { dims } => {
                let mut current = inputs.to_vec();
                for (i, seg) in self.backbone_segs.iter().enumerate() {
                    let (in_d, out_d) = (dims[i], dims[i + 1]);
                    let mut pre = vec![0.0; n * out_d];
                    ops::dense_forward(
                        &current,
                        &mut pre,
                        &th[seg.w_off..seg.w_off + seg.w_len],
                        &th[seg.b_off..seg.b_off + seg.b_len],
                        n,
                        in_d,
                        out_d,
                    );
                    let mut post: Vec<f64> = pre.iter().map(|&a| act.apply(a)).collect();
                    if let Some(m) = mask {
                        for (p, f) in post
                            .iter_mut()
                            .zip(&m.factors[mask_off..mask_off + n * out_d])
                        {
                            *p *= f;
                        }
                    }
                    mask_off += n * out_d;
                    cache.stage_inputs.push(std::mem::take(&mut current));
                    cache.pre.push(pre);
                    current = post.clone();
                    cache.post.push(post);
                }
            }
        }
        Ok(cache)
    }

    fn head_logits(&self, theta: &ParamVector, features: &[f64], n: usize, head: usize) -> Vec<f64> {
        let th = theta.as_slice();
        let seg = &self.head_segs[head];
        let c_head = self.spec.heads[head].channels();
        let (h, w) = self.spec.grid;
        let plane = h * w;
        let mut logits = vec![0.0; n * c_head * plane];
        match &self.plan {
            Plan::Conv { stages } => {
                let feat_c = stages[4].out_c;
                ops::conv1x1_forward(
                    features,
                    &mut logits,
                    &th[seg.w_off..seg.w_off + seg.w_len],
                    &th[seg.b_off..seg.b_off + seg.b_len],
                    n,
                    feat_c,
                    c_head,
                    plane,
                );
            }
            Plan::Mlp { dims } => {
                let feat = *dims.last().unwrap();
                ops::dense_forward(
                    features,
                    &mut logits,
                    &th[seg.w_off..seg.w_off + seg.w_len],
                    &th[seg.b_off..seg.b_off + seg.b_len],
                    n,
                    feat,
                    c_head * plane,
                );
            }
        }
        logits
    }

    fn head_backward(
        &self,
        theta: &ParamVector,
        features: &[f64],
        d_logits: &[f64],
        n: usize,
        head: usize,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let th = theta.as_slice();
        let seg = &self.head_segs[head];
        let c_head = self.spec.heads[head].channels();
        let (h, w) = self.spec.grid;
        let plane = h * w;
        let mut d_features = vec![0.0; features.len()];
        let (gw, gb) = {
            let (left, right) = grad.split_at_mut(seg.b_off);
            (
                &mut left[seg.w_off..seg.w_off + seg.w_len],
                &mut right[..seg.b_len],
            )
        };
        match &self.plan {
            Plan::Conv { stages } => {
                let feat_c = stages[4].out_c;
                ops::conv1x1_backward(
                    features,
                    d_logits,
                    &th[seg.w_off..seg.w_off + seg.w_len],
                    &mut d_features,
                    gw,
                    gb,
                    n,
                    feat_c,
                    c_head,
                    plane,
                );
            }
            Plan::Mlp { dims } => {
                let feat = *dims.last().unwrap();
                ops::dense_backward(
                    features,
                    d_logits,
                    &th[seg.w_off..seg.w_off + seg.w_len],
                    Some(&mut d_features),
                    gw,
                    gb,
                    n,
                    feat,
                    c_head * plane,
                );
            }
        }
        d_features
    }

    fn backbone_backward(
        &self,
        theta: &ParamVector,
        cache: &Cache,
        d_features: Vec<f64>,
        n: usize,
        grad: &mut [f64],
    ) -> Result<()> {
        let th = theta.as_slice();
        let act = self.spec.activation;
        match &self.plan {
            Plan::Conv { stages } => {
                let mut d_post = d_features;
                // gradients flowing through the additive skips:
                // u2 = up(z3) + z0, u1 = up(z2) + z1
                let mut skip_to_z0: Option<Vec<f64>> = None;
                let mut skip_to_z1: Option<Vec<f64>> = None;
                for i in (0..5).rev() {
                    let stage = stages[i];
                    let seg = self.backbone_segs[i];
                    // through activation
                    let mut d_pre = d_post;
                    for (g, &a) in d_pre.iter_mut().zip(cache.pre[i].iter()) {
                        *g *= act.deriv(a);
                    }
                    let (gw, gb) = {
                        let (left, right) = grad.split_at_mut(seg.b_off);
                        (
                            &mut left[seg.w_off..seg.w_off + seg.w_len],
                            &mut right[..seg.b_len],
                        )
                    };
                    let mut d_input = if i > 0 {
                        Some(vec![0.0; cache.stage_inputs[i].len()])
                    } else {
                        None
                    };
                    ops::conv3x3_backward(
                        &cache.stage_inputs[i],
                        &d_pre,
                        &th[seg.w_off..seg.w_off + seg.w_len],
                        d_input.as_deref_mut(),
                        gw,
                        gb,
                        n,
                        stage.in_c,
                        stage.out_c,
                        stage.h,
                        stage.w,
                    );
                    if i == 0 {
                        break;
                    }
                    // invert the transition feeding this stage's input
                    let prev = stages[i - 1];
                    let d_input = d_input.unwrap();
                    let mut d_prev_post = vec![0.0; cache.post[i - 1].len()];
                    match i {
                        1 | 2 => ops::avgpool2_backward(
                            &d_input,
                            &mut d_prev_post,
                            n * prev.out_c,
                            prev.h,
                            prev.w,
                        ),
                        3 | 4 => ops::upsample2_backward(
                            &d_input,
                            &mut d_prev_post,
                            n * prev.out_c,
                            prev.h,
                            prev.w,
                        ),
                        _ => unreachable!(),
                    }
                    match i {
                        4 => skip_to_z0 = Some(d_input),
                        3 => skip_to_z1 = Some(d_input),
                        2 => {
                            let s = skip_to_z1.take().expect("skip gradient for z1");
                            for (d, v) in d_prev_post.iter_mut().zip(s) {
                                *d += v;
                            }
                        }
                        1 => {
                            let s = skip_to_z0.take().expect("skip gradient for z0");
                            for (d, v) in d_prev_post.iter_mut().zip(s) {
                                *d += v;
                            }
                        }
                        _ => unreachable!(),
                    }
                    d_post = d_prev_post;
                }
            }
            Plan::Mlp { dims } => {
                let mut d_post = d_features;
                for i in (0..self.backbone_segs.len()).rev() {
                    let seg = self.backbone_segs[i];
                    let (in_d, out_d) = (dims[i], dims[i + 1]);
                    let mut d_pre = d_post;
                    for (g, &a) in d_pre.iter_mut().zip(cache.pre[i].iter()) {
                        *g *= act.deriv(a);
                    }
                    let (gw, gb) = {
                        let (left, right) = grad.split_at_mut(seg.b_off);
                        (
                            &mut left[seg.w_off..seg.w_off + seg.w_len],
                            &mut right[..seg.b_len],
                        )
                    };
                    let mut d_input = if i > 0 {
                        Some(vec![0.0; cache.stage_inputs[i].len()])
                    } else {
                        None
                    };
                    ops::dense_backward(
                        &cache.stage_inputs[i],
                        &d_pre,
                        &th[seg.w_off..seg.w_off + seg.w_len],
                        d_input.as_deref_mut(),
                        gw,
                        gb,
                        n,
                        in_d,
                        out_d,
                    );
                    if i == 0 {
                        break;
                    }
                    d_post = d_input.unwrap();
                }
            }
        }
        Ok(())
    }
}

struct Cache {
    /// Input tensor to each backbone layer (after the preceding transition).
    stage_inputs: Vec<Vec<f64>>,
    /// Pre-activation outputs.
    pre: Vec<Vec<f64>>,
    /// Post-activation (and post-dropout) outputs.
    post: Vec<Vec<f64>>,
}

impl Cache {
    fn features(&self) -> &[f64] {
        self.post.last().expect("non-empty backbone")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_mlp_spec() -> ModelSpec {
        // 1x2 grid (2 inputs), one hidden layer of 2, a single-channel head:
        // the "2-2-2" hand fixture.
        ModelSpec {
            grid: (1, 2),
            backbone: BackboneSpec::Mlp { hidden: vec![2] },
            heads: vec![HeadSpec::new(vec![0])],
            activation: Activation::Relu,
            dropout_rate: 0.0,
            num_global_labels: 1,
        }
    }

    fn small_conv_spec() -> ModelSpec {
        ModelSpec {
            grid: (8, 8),
            backbone: BackboneSpec::Conv { channels: 2 },
            heads: vec![HeadSpec::new(vec![0, 1]), HeadSpec::new(vec![0, 2])],
            activation: Activation::Silu,
            dropout_rate: 0.2,
            num_global_labels: 3,
        }
    }

    fn batch_for(spec: &ModelSpec, n: usize, fill: f64) -> BatchTensor {
        let (h, w) = spec.grid;
        BatchTensor {
            inputs: vec![fill; n * h * w],
            targets: vec![0; n * h * w],
            n,
            h,
            w,
            provenance: Provenance { client_id: 0, holdout: false },
        }
    }

    #[test]
    fn param_layout_is_contiguous() {
        let model = Model::new(small_conv_spec()).unwrap();
        // conv stages: 1->2, 2->4, 4->4, 4->2, 2->2 with 3x3 kernels
        let backbone = (2 * 9 + 2) + (8 * 9 + 4) + (16 * 9 + 4) + (8 * 9 + 2) + (4 * 9 + 2);
        let heads = (2 * 2 + 2) + (2 * 2 + 2);
        assert_eq!(model.param_len(), backbone + heads);
        assert_eq!(model.backbone_param_len(), backbone);
        let r0 = model.head_param_range(0).unwrap();
        let r1 = model.head_param_range(1).unwrap();
        assert_eq!(r0.start, backbone);
        assert_eq!(r0.end, r1.start);
        assert_eq!(r1.end, model.param_len());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let model = Model::new(small_conv_spec()).unwrap();
        let a = model.init(9);
        let b = model.init(9);
        assert_eq!(a, b);
        let c = model.init(10);
        assert_ne!(a, c);
        // bias entries are exactly zero
        for seg in model.backbone_segs.iter().chain(model.head_segs.iter()) {
            for i in seg.b_off..seg.b_off + seg.b_len {
                assert_eq!(a[i], 0.0);
            }
        }
    }

    #[test]
    fn he_init_variance_matches_fan_in() {
        // one dense layer 200 -> 60: 12000 weights with variance 2/200 = 0.01
        let spec = ModelSpec {
            grid: (10, 20),
            backbone: BackboneSpec::Mlp { hidden: vec![60] },
            heads: vec![HeadSpec::new(vec![0])],
            activation: Activation::Relu,
            dropout_rate: 0.0,
            num_global_labels: 1,
        };
        let model = Model::new(spec).unwrap();
        let theta = model.init(1234);
        let seg = model.backbone_segs[0];
        assert_eq!(seg.w_len, 12_000);
        let ws = &theta.as_slice()[seg.w_off..seg.w_off + seg.w_len];
        let mean = ws.iter().sum::<f64>() / ws.len() as f64;
        let var = ws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ws.len() as f64;
        assert!((var - 0.01).abs() < 0.001, "var = {var}");
    }

    #[test]
    fn zero_theta_gives_zero_logits() {
        let model = Model::new(small_conv_spec()).unwrap();
        let theta = ParamVector::zeros(model.param_len());
        let batch = batch_for(model.spec(), 2, 0.7);
        let logits = model.forward(&theta, &batch, 0, None).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_batch_rows_get_identical_logits() {
        let model = Model::new(small_conv_spec()).unwrap();
        let theta = model.init(3);
        let batch = batch_for(model.spec(), 3, 0.4);
        let logits = model.forward(&theta, &batch, 1, None).unwrap();
        let per = logits.len() / 3;
        assert_eq!(&logits[..per], &logits[per..2 * per]);
        assert_eq!(&logits[..per], &logits[2 * per..]);
    }

    #[test]
    fn tiny_mlp_hand_forward() {
        // Dense 2->2 with W1 = [[0.5, -1.0], [1.0, 0.25]], b1 = [0.1, -0.2],
        // ReLU, head 2->2 (c=1, plane=2) with W2 = [[1.0, 2.0], [-1.0, 0.5]],
        // b2 = [0.05, 0.0]. Input (1, 1):
        //   pre1 = (0.5*1 - 1.0*1 + 0.1, 1.0*1 + 0.25*1 - 0.2) = (-0.4, 1.05)
        //   post = (0, 1.05)
        //   out  = (1.0*0 + 2.0*1.05 + 0.05, -1.0*0 + 0.5*1.05 + 0.0)
        //        = (2.15, 0.525)
        let model = Model::new(tiny_mlp_spec()).unwrap();
        assert_eq!(model.param_len(), 2 * 2 + 2 + 2 * 2 + 2);
        let theta = ParamVector::from_vec(vec![
            0.5, -1.0, 1.0, 0.25, // W1 rows
            0.1, -0.2, // b1
            1.0, 2.0, -1.0, 0.5, // head weights (2 outputs x 2 features)
            0.05, 0.0, // head bias
        ]);
        let batch = BatchTensor {
            inputs: vec![1.0, 1.0],
            targets: vec![0, 0],
            n: 1,
            h: 1,
            w: 2,
            provenance: Provenance { client_id: 0, holdout: false },
        };
        let logits = model.forward(&theta, &batch, 0, None).unwrap();
        assert!((logits[0] - 2.15).abs() < 1e-12);
        assert!((logits[1] - 0.525).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let model = Model::new(small_conv_spec()).unwrap();
        let theta = model.init(0);
        let mut batch = batch_for(model.spec(), 1, 0.0);
        batch.inputs.pop();
        assert!(model.forward(&theta, &batch, 0, None).is_err());
        let batch = batch_for(model.spec(), 1, 0.0);
        assert!(model.forward(&theta, &batch, 7, None).is_err());
        let short = ParamVector::zeros(3);
        assert!(model.forward(&short, &batch, 0, None).is_err());
    }

    #[test]
    fn backward_only_touches_used_head() {
        let model = Model::new(small_conv_spec()).unwrap();
        let theta = model.init(5);
        let mut batch = batch_for(model.spec(), 2, 0.3);
        batch.targets.iter_mut().enumerate().for_each(|(i, t)| {
            if i % 3 == 0 {
                *t = 1;
            }
        });
        let (_, grad) = model.backward(&theta, &batch, 0).unwrap();
        assert_eq!(grad.len(), model.param_len());
        let other = model.head_param_range(1).unwrap();
        assert!(grad.as_slice()[other].iter().all(|&g| g == 0.0));
        let own = model.head_param_range(0).unwrap();
        assert!(grad.as_slice()[own].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn duplicated_sample_leaves_parameter_gradient_unchanged() {
        let model = Model::new(small_conv_spec()).unwrap();
        let theta = model.init(7);
        let (h, w) = model.spec().grid;
        let mut single = batch_for(model.spec(), 1, 0.0);
        for (i, v) in single.inputs.iter_mut().enumerate() {
            *v = (i % 9) as f64 / 9.0;
        }
        for (i, t) in single.targets.iter_mut().enumerate() {
            *t = ((i / 7) % 2) as u8;
        }
        let mut doubled = BatchTensor {
            inputs: single.inputs.clone(),
            targets: single.targets.clone(),
            n: 2,
            h,
            w,
            provenance: single.provenance,
        };
        doubled.inputs.extend_from_slice(&single.inputs);
        doubled.targets.extend_from_slice(&single.targets);
        let (l1, g1) = model.backward(&theta, &single, 0).unwrap();
        let (l2, g2) = model.backward(&theta, &doubled, 0).unwrap();
        assert!((l1.total - l2.total).abs() < 1e-12);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected()  {
        let mut spec = small_conv_spec();
        spec.heads[0].labels = vec![0, 9];
        assert!(Model::new(spec).is_err());

        let mut spec = small_conv_spec();
        spec.heads[0].labels = vec![1, 0];
        assert!(Model::new(spec).is_err());

        let mut spec = small_conv_spec();
        spec.grid = (10, 10);
        assert!(Model::new(spec).is_err());

        let mut spec = tiny_mlp_spec();
        spec.backbone = BackboneSpec::Mlp { hidden: vec![] };
        assert!(Model::new(spec).is_err());

        let mut spec = small_conv_spec();
        spec.dropout_rate = 1.0;
        assert!(Model::new(spec).is_err());
    }

    #[test]
    fn dropout_rate_zero_mask_is_identity() {
        let model = Model::new(small_conv_spec()).unwrap();
        let theta = model.init(2);
        let batch = batch_for(model.spec(), 1, 0.6);
        let mask = model.dropout_mask(1, 0.0, 77).unwrap();
        let with = model.forward(&theta, &batch, 0, Some(&mask)).unwrap();
        let without = model.forward(&theta, &batch, 0, None).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn dropout_mask_deterministic_and_keeps_expected_fraction() {
        let model = Model::new(small_conv_spec()).unwrap();
        let a = model.dropout_mask(4, 0.5, 11).unwrap();
        let b = model.dropout_mask(4, 0.5, 11).unwrap();
        assert_eq!(a.factors, b.factors);
        // >= 1e4 draws across a few seeds
        let mut kept = 0usize;
        let mut total = 0usize;
        for seed in 0..20 {
            let m = model.dropout_mask(4, 0.5, seed).unwrap();
            kept += m.factors.iter().filter(|&&f| f != 0.0).count();
            total += m.factors.len();
        }
        assert!(total >= 10_000);
        let frac = kept as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.02, "keep fraction {frac}");
    }
}
