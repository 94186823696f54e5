//! Plot emission.
//!
//! Plots read nothing but the persisted results files: `summary.json` for
//! reliability diagrams and `heterogeneity.tsv` for the label-distribution
//! chart. Output is deterministic SVG.

use std::fmt::Write as _;
use std::path::Path;

use fiva_core::error::{Error, Result};
use fiva_core::metrics::reliability_svg;
use fiva_core::synthdata::HeterogeneityRow;

use crate::results::RunSummary;

/// Grouped bar chart of shape-instance counts per client and label, plus
/// sample counts, mirroring the dataset heterogeneity.
pub fn label_distribution_svg(rows: &[HeterogeneityRow]) -> String {
    let num_labels = rows.iter().map(|r| r.label_counts.len()).max().unwrap_or(0);
    let width = 640.0;
    let height = 360.0;
    let margin = 56.0;
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;
    let max_count = rows
        .iter()
        .flat_map(|r| r.label_counts.iter())
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;

    let palette = [
        "#4878cf", "#ee854a", "#6acc65", "#d65f5f", "#956cb4", "#8c613c",
    ];
    let group_w = plot_w / rows.len().max(1) as f64;
    let bar_w = group_w / (num_labels as f64 + 1.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(svg, "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "  <text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">Label distribution across clients</text>",
        width / 2.0
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{margin}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        height - margin,
        width - margin,
        height - margin
    );
    for (gi, row) in rows.iter().enumerate() {
        let gx = margin + gi as f64 * group_w;
        for (li, &count) in row.label_counts.iter().enumerate() {
            let bar_h = count as f64 / max_count * plot_h;
            let x = gx + li as f64 * bar_w + bar_w * 0.5;
            let y = height - margin - bar_h;
            let color = palette[li % palette.len()];
            let _ = writeln!(
                svg,
                "  <rect class=\"count\" x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{color}\"/>",
                x, y, bar_w * 0.9, bar_h
            );
        }
        let _ = writeln!(
            svg,
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}{}</text>",
            gx + group_w / 2.0,
            height - margin + 16.0,
            row.client,
            if row.holdout { " (hold-out)" } else { "" }
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">n={}</text>",
            gx + group_w / 2.0,
            height - margin + 30.0,
            row.samples
        );
    }
    for li in 0..num_labels {
        let color = palette[li % palette.len()];
        let x = margin + li as f64 * 80.0;
        let _ = writeln!(
            svg,
            "  <rect x=\"{:.1}\" y=\"34\" width=\"10\" height=\"10\" fill=\"{color}\"/><text x=\"{:.1}\" y=\"43\" font-family=\"sans-serif\" font-size=\"10\">label {}</text>",
            x,
            x + 14.0,
            li + 1
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn parse_heterogeneity_tsv(text: &str) -> Result<Vec<HeterogeneityRow>> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!("bad heterogeneity row: {line}")));
        }
        let parse_err = |e: std::num::ParseIntError| Error::Format(format!("{e}"));
        rows.push(HeterogeneityRow {
            client: fields[0].to_string(),
            holdout: fields[1] == "true",
            samples: fields[2].parse().map_err(parse_err)?,
            label_counts: fields[3..]
                .iter()
                .map(|f| f.parse().map_err(parse_err))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Emit every plot for a results directory: one reliability diagram per
/// evaluated client of the run's method, plus the label-distribution chart.
/// Fails without writing anything when the results are missing.
pub fn emit_plots(results_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let summary_path = results_dir.join("summary.json");
    if !summary_path.exists() {
        return Err(Error::Format(format!(
            "no summary.json under {}; run an experiment first",
            results_dir.display()
        )));
    }
    let summary = RunSummary::read_json(&summary_path)?;
    if summary.calibration.is_empty() && summary.heterogeneity.is_empty() {
        return Err(Error::Empty("summary holds no plottable results"));
    }
    let plots_dir = results_dir.join("plots");
    std::fs::create_dir_all(&plots_dir)?;
    let mut written = Vec::new();

    for cal in &summary.calibration {
        if cal.report.bins.is_empty() {
            continue;
        }
        let title = format!("{} on {}", summary.method, cal.client);
        let fname = format!(
            "reliability_{}_{}.svg",
            summary.method.replace(['+', ' '], "_"),
            cal.client
        );
        let path = plots_dir.join(fname);
        std::fs::write(&path, reliability_svg(&cal.report, &title))?;
        written.push(path);
    }

    // prefer the persisted table; fall back to the summary copy
    let het_path = results_dir.join("heterogeneity.tsv");
    let rows = if het_path.exists() {
        parse_heterogeneity_tsv(&std::fs::read_to_string(&het_path)?)?
    } else {
        summary.heterogeneity.clone()
    };
    if !rows.is_empty() {
        let path = plots_dir.join("label_distribution.svg");
        std::fs::write(&path, label_distribution_svg(&rows))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_distribution_has_one_bar_per_count() {
        let rows = vec![
            HeterogeneityRow {
                client: "a".into(),
                holdout: false,
                samples: 10,
                label_counts: vec![3, 0, 5],
            },
            HeterogeneityRow {
                client: "b".into(),
                holdout: true,
                samples: 4,
                label_counts: vec![1, 2, 2],
            },
        ];
        let svg = label_distribution_svg(&rows);
        assert_eq!(svg.matches("class=\"count\"").count(), 6);
        assert!(svg.contains("hold-out"));
        assert_eq!(label_distribution_svg(&rows), svg);
    }

    #[test]
    fn heterogeneity_tsv_round_trips() {
        let rows = vec![HeterogeneityRow {
            client: "alpha".into(),
            holdout: false,
            samples: 600,
            label_counts: vec![10, 20, 30],
        }];
        let text = crate::results::heterogeneity_tsv(&rows);
        let back = parse_heterogeneity_tsv(&text).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn missing_results_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(dir.path()).is_err());
    }
}
