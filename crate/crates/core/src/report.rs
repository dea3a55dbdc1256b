//! Human-readable renderings of a completed run: a markdown table, a CSV of
//! every summary metric and PNG heatmaps of the train-test matrices.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};
use crate::experiment::{primary_mode, read_json, ModeSummary, RESULTS_FILE, R_DSC};
use crate::metrics::{AccuracyMatrix, MetricKind, Summary};
use crate::trainer::Mode;

pub const REPORT_FILE: &str = "report.md";
pub const METRICS_CSV: &str = "metrics.csv";
/// Pixels per heatmap cell edge.
pub const CELL: usize = 24;

pub fn method_label(mode: Mode) -> &'static str {
    match mode {
        Mode::Incremental => "Ours (style replay + whitening)",
        Mode::SequentialFinetune => "Sequentially finetune",
        Mode::Individual => "Individually train",
        Mode::Joint => "Jointly train",
    }
}

fn cell(v: Option<f64>, scale: f64) -> String {
    v.map(|x| format!("{:.2}", x * scale)).unwrap_or_else(|| "-".into())
}

fn summary_cells(s: &Summary, scale: f64) -> String {
    [s.bwt, s.tl, s.il, s.ftu, s.fti].map(|v| cell(v, scale)).join(" | ")
}

fn render_markdown(summaries: &[ModeSummary]) -> String {
    let mut md = String::from("# Results\n\n");
    if let Some(first) = summaries.first() {
        md += &format!("Evaluated domains: {}\n\n", first.columns.join(", "));
    }
    md += "## DSC (%)\n\n| Method | BWT | TL | IL | FTU | FTI |\n|---|---|---|---|---|---|\n";
    for s in summaries {
        md += &format!("| {} | {} |\n", method_label(s.mode), summary_cells(&s.dsc.metrics, 100.0));
    }
    md += "\n## HD95 (pixels)\n\n| Method | BWT+ | TL | IL | FTU | FTI |\n|---|---|---|---|---|---|\n";
    for s in summaries {
        md += &format!("| {} | {} |\n", method_label(s.mode), summary_cells(&s.hd.metrics, 1.0));
    }
    for s in summaries {
        md += &format!(
            "\n### {} R (DSC %)\n\n| after step | {} |\n|---|{}\n",
            method_label(s.mode),
            s.columns.join(" | "),
            "---|".repeat(s.columns.len())
        );
        for (i, row) in s.dsc.r.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{:.2}", v * 100.0)).collect();
            md += &format!("| {} | {} |\n", i + 1, vals.join(" | "));
        }
        if !s.ratio.is_empty() {
            let r: Vec<String> = s.ratio.iter().map(|v| format!("{:.2}%", v * 100.0)).collect();
            md += &format!("\nSuppression ratio per step: {}\n", r.join(", "));
        }
    }
    md
}

fn render_csv(summaries: &[ModeSummary]) -> String {
    let mut csv = String::from("mode,metric,BWT,TL,IL,FTU,FTI\n");
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for s in summaries {
        for (name, m) in [("DSC", &s.dsc.metrics), ("HD95", &s.hd.metrics)] {
            csv += &format!("{},{name},{},{},{},{},{}\n", s.mode, f(m.bwt), f(m.tl), f(m.il), f(m.ftu), f(m.fti));
        }
    }
    csv
}

/// Maps `v` in [0, 1] onto a dark-blue to yellow ramp.
fn color(v: f64) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    [lerp(30.0, 250.0), lerp(20.0, 230.0), lerp(110.0, 40.0)]
}

/// RGB pixels of the square `T x T` part of `m`, one `CELL`-sized block per entry.
pub fn heatmap_pixels(m: &AccuracyMatrix) -> (usize, Vec<u8>) {
    let t = m.t;
    let max = m.r.iter().flat_map(|row| &row[..t]).fold(0.0f64, |a, &b| a.max(b));
    let norm = |v: f64| match m.kind {
        MetricKind::Dsc => v,
        MetricKind::Hd95 if max > 0.0 => v / max,
        MetricKind::Hd95 => 0.0,
    };
    let side = t * CELL;
    let mut px = vec![0u8; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let c = color(norm(m.r[y / CELL][x / CELL]));
            px[(y * side + x) * 3..][..3].copy_from_slice(&c);
        }
    }
    (side, px)
}

pub fn write_heatmap(m: &AccuracyMatrix, path: &Path) -> Result<()> {
    let (side, px) = heatmap_pixels(m);
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), side as u32, side as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Report(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&px).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// Writes `report.md`, `metrics.csv` and one heatmap per metric kind.
pub fn emit_report(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.join(R_DSC).exists() || !dir.join(RESULTS_FILE).exists() {
        return Err(Error::Report(format!("{} holds no completed run", dir.display())));
    }
    let summaries: Vec<ModeSummary> = read_json(&dir.join(RESULTS_FILE))?;
    let modes: Vec<Mode> = summaries.iter().map(|s| s.mode).collect();
    let primary = primary_mode(&modes)
        .and_then(|p| summaries.iter().find(|s| s.mode == p))
        .ok_or_else(|| Error::Report("run has no mode results".into()))?;
    let mut written = Vec::new();
    let md = dir.join(REPORT_FILE);
    fs::write(&md, render_markdown(&summaries)).at(&md)?;
    written.push(md);
    let csv = dir.join(METRICS_CSV);
    fs::write(&csv, render_csv(&summaries)).at(&csv)?;
    written.push(csv);
    for (m, name) in [(&primary.dsc, "R_heatmap_dsc.png"), (&primary.hd, "R_heatmap_hd.png")] {
        let path = dir.join(name);
        write_heatmap(m, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(mode: Mode) -> ModeSummary {
        let cols = vec!["A".to_string(), "B".to_string(), "D".to_string()];
        let r = vec![vec![0.9, 0.4, 0.3], vec![0.8, 0.85, 0.5]];
        let hd = vec![vec![3.0, 9.0, 12.0], vec![4.0, 2.5, 8.0]];
        ModeSummary {
            mode,
            columns: cols.clone(),
            dsc: AccuracyMatrix::new(MetricKind::Dsc, cols.clone(), r, None).unwrap(),
            hd: AccuracyMatrix::new(MetricKind::Hd95, cols.clone(), hd, None).unwrap(),
            ratio: vec![0.1],
        }
    }

    #[test]
    fn heatmap_has_one_cell_per_square_entry() {
        let s = summary(Mode::Incremental);
        let (side, px) = heatmap_pixels(&s.dsc);
        assert_eq!(side, 2 * CELL);
        assert_eq!(px.len(), side * side * 3);
        assert_eq!(px[..3], color(0.9));
        assert_eq!(px[((side - 1) * side + side - 1) * 3..][..3], color(0.85));
    }

    #[test]
    fn markdown_lists_every_method_in_percent() {
        let md = render_markdown(&[summary(Mode::Incremental), summary(Mode::SequentialFinetune)]);
        assert!(md.contains("| Ours (style replay + whitening) | 90.00 | 87.50 | 85.00 | 40.00 | - |"));
        assert!(md.contains("Sequentially finetune"));
        let csv = render_csv(&[summary(Mode::Joint)]);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn report_requires_a_completed_run() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(dir.path()), Err(Error::Report(_))));
    }
}
