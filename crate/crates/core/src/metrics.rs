//! Evaluation metrics: Dice overlap, expected calibration error, and the
//! reliability-diagram rendering.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Dice overlap for one label: `2|P n T| / (|P| + |T|)`.
///
/// Returns `None` when the label is absent from both maps (excluded from
/// aggregation rather than scored 0 or 1).
pub fn dice(prediction: &[u8], target: &[u8], label: u8) -> Result<Option<f64>> {
    if prediction.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            got: prediction.len(),
        });
    }
    let mut p = 0usize;
    let mut t = 0usize;
    let mut both = 0usize;
    for (&pv, &tv) in prediction.iter().zip(target.iter()) {
        let in_p = pv == label;
        let in_t = tv == label;
        p += in_p as usize;
        t += in_t as usize;
        both += (in_p && in_t) as usize;
    }
    if p + t == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (p + t) as f64))
}

/// Per-label Dice scores with their mean over the labels present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// `(label, score)` for every label defined on this evaluation.
    pub per_label: Vec<(u8, f64)>,
    pub mean: f64,
}

/// Score a prediction against a target map over the given foreground labels,
/// skipping labels absent from both maps.
pub fn dice_report(prediction: &[u8], target: &[u8], labels: &[u8]) -> Result<DiceReport> {
    let mut per_label = Vec::new();
    for &l in labels {
        if let Some(score) = dice(prediction, target, l)? {
            per_label.push((l, score));
        }
    }
    let mean = if per_label.is_empty() {
        0.0
    } else {
        per_label.iter().map(|(_, s)| s).sum::<f64>() / per_label.len() as f64
    };
    Ok(DiceReport { per_label, mean })
}

/// One confidence bin of a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Equal-width binned calibration summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub total: usize,
}

/// Expected calibration error over equal-width, right-inclusive bins:
/// `ECE = sum_b (count_b / total) * |acc_b - conf_b|`.
pub fn ece(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<CalibrationReport> {
    if confidences.is_empty() {
        return Err(Error::Empty("confidences"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch {
            expected: confidences.len(),
            got: correct.len(),
        });
    }
    if num_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut conf_sum = vec![0.0; num_bins];
    let mut hit_sum = vec![0usize; num_bins];
    let mut counts = vec![0usize; num_bins];
    for (&c, &ok) in confidences.iter().zip(correct.iter()) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!(
                "confidence {c} outside [0, 1]"
            )));
        }
        // right-inclusive bins: (i/B, (i+1)/B], with 0.0 falling into bin 0
        let idx = ((c * num_bins as f64).ceil() as usize).saturating_sub(1).min(num_bins - 1);
        conf_sum[idx] += c;
        hit_sum[idx] += ok as usize;
        counts[idx] += 1;
    }
    let total = confidences.len();
    let mut bins = Vec::with_capacity(num_bins);
    let mut ece = 0.0;
    for b in 0..num_bins {
        let (mean_confidence, accuracy) = if counts[b] > 0 {
            (
                conf_sum[b] / counts[b] as f64,
                hit_sum[b] as f64 / counts[b] as f64,
            )
        } else {
            (0.0, 0.0)
        };
        if counts[b] > 0 {
            ece += counts[b] as f64 / total as f64 * (accuracy - mean_confidence).abs();
        }
        bins.push(CalibrationBin {
            mean_confidence,
            accuracy,
            count: counts[b],
        });
    }
    Ok(CalibrationReport { bins, ece, total })
}

/// Mean and population standard deviation of a slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Render a reliability diagram as a deterministic standalone SVG: one bar
/// per bin (accuracy over mean confidence position), the identity diagonal,
/// and the ECE annotation.
pub fn reliability_svg(report: &CalibrationReport, title: &str) -> String {
    let width = 420.0;
    let height = 420.0;
    let margin = 50.0;
    let plot = width - 2.0 * margin;
    let num_bins = report.bins.len().max(1);
    let bar_w = plot / num_bins as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(svg, "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "  <text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
        width / 2.0,
        title
    );
    // axes
    let _ = writeln!(
        svg,
        "  <line x1=\"{margin}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        height - margin,
        width - margin,
        height - margin
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{margin}\" y1=\"{margin}\" x2=\"{margin}\" y2=\"{:.1}\" stroke=\"black\"/>",
        height - margin
    );
    // bars
    for (i, bin) in report.bins.iter().enumerate() {
        let x = margin + i as f64 * bar_w;
        let bar_h = bin.accuracy * plot;
        let y = height - margin - bar_h;
        let _ = writeln!(
            svg,
            "  <rect class=\"bin\" x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"#4878cf\" stroke=\"#1f3b70\" stroke-width=\"0.5\"/>",
            x, y, bar_w, bar_h
        );
    }
    // identity diagonal
    let _ = writeln!(
        svg,
        "  <line class=\"diagonal\" x1=\"{margin}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{margin}\" stroke=\"#999999\" stroke-dasharray=\"4 3\"/>",
        height - margin,
        width - margin
    );
    // axis labels and the ECE annotation
    let _ = writeln!(
        svg,
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">confidence</text>",
        width / 2.0,
        height - 12.0
    );
    let _ = writeln!(
        svg,
        "  <text x=\"16\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">accuracy</text>",
        height / 2.0,
        height / 2.0
    );
    let _ = writeln!(
        svg,
        "  <text class=\"ece\" x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\">ECE = {:.6}</text>",
        margin + 8.0,
        margin + 16.0,
        report.ece
    );
    svg.push_str("</svg>\n");
    svg
}

/// Write the reliability diagram to disk.
pub fn write_reliability_svg(report: &CalibrationReport, title: &str, path: &Path) -> Result<()> {
    std::fs::write(path, reliability_svg(report, title))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_identical_and_disjoint() {
        let a = vec![0u8, 1, 1, 0];
        assert_eq!(dice(&a, &a, 1).unwrap(), Some(1.0));
        let b = vec![1u8, 0, 0, 1];
        assert_eq!(dice(&a, &b, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn dice_half_containment() {
        // |T| = 4, P c T with |P| = 2 -> 2*2 / (2+4) = 2/3
        let target = vec![1u8, 1, 1, 1, 0, 0];
        let pred = vec![1u8, 1, 0, 0, 0, 0];
        let d = dice(&pred, &target, 1).unwrap().unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dice_absent_from_both_is_excluded() {
        let a = vec![0u8, 0];
        assert_eq!(dice(&a, &a, 3).unwrap(), None);
        let report = dice_report(&a, &a, &[1, 2, 3]).unwrap();
        assert!(report.per_label.is_empty());
    }

    #[test]
    fn dice_is_symmetric() {
        let a = vec![0u8, 1, 1, 2, 0, 1];
        let b = vec![1u8, 1, 0, 2, 2, 1];
        for l in 0..3u8 {
            assert_eq!(dice(&a, &b, l).unwrap(), dice(&b, &a, l).unwrap());
        }
    }

    #[test]
    fn dice_shape_mismatch_errors() {
        assert!(dice(&[0u8], &[0u8, 1], 1).is_err());
    }

    #[test]
    fn erosion_never_increases_dice() {
        // removing true positives from P must not increase the score
        let target = vec![1u8; 8];
        let mut pred = vec![1u8; 8];
        let mut prev = dice(&pred, &target, 1).unwrap().unwrap();
        for i in 0..8 {
            pred[i] = 0;
            match dice(&pred, &target, 1).unwrap() {
                Some(d) => {
                    assert!(d <= prev + 1e-15);
                    prev = d;
                }
                None => break,
            }
        }
    }

    #[test]
    fn ece_sharp_predictor_extremes() {
        let conf = vec![1.0; 100];
        let all_right = vec![true; 100];
        let all_wrong = vec![false; 100];
        assert_eq!(ece(&conf, &all_right, 10).unwrap().ece, 0.0);
        assert_eq!(ece(&conf, &all_wrong, 10).unwrap().ece, 1.0);
    }

    #[test]
    fn ece_bins_partition_all_confidences() {
        let conf: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let correct = vec![true; conf.len()];
        let report = ece(&conf, &correct, 10).unwrap();
        assert_eq!(report.bins.iter().map(|b| b.count).sum::<usize>(), conf.len());
        // right-inclusive edges: 0.1 belongs to bin 0, 0.1000...1 to bin 1
        let edge = ece(&[0.1], &[true], 10).unwrap();
        assert_eq!(edge.bins[0].count, 1);
        let above = ece(&[0.100001], &[true], 10).unwrap();
        assert_eq!(above.bins[1].count, 1);
    }

    #[test]
    fn ece_rejects_bad_input() {
        assert!(ece(&[], &[], 10).is_err());
        assert!(ece(&[0.5], &[], 10).is_err());
        assert!(ece(&[1.5], &[true], 10).is_err());
    }

    #[test]
    fn svg_is_deterministic_and_structured() {
        let report = ece(
            &[0.05, 0.15, 0.95, 0.85, 0.75, 0.65],
            &[false, false, true, true, true, false],
            10,
        )
        .unwrap();
        let a = reliability_svg(&report, "test");
        let b = reliability_svg(&report, "test");
        assert_eq!(a, b);
        assert_eq!(a.matches("class=\"bin\"").count(), 10);
        assert!(a.contains("class=\"diagonal\""));
        // the annotation round-trips the ECE value at fixed precision
        let needle = format!("ECE = {:.6}", report.ece);
        assert!(a.contains(&needle));
        // empty bins render at zero height
        assert!(a.contains("height=\"0.000\""));
    }

    #[test]
    fn mean_std_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15);
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
