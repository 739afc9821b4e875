//! TPR-versus-FDR plot of a threshold sweep as a standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lesions::SizeBin;
use crate::metrics::{CurveRow, OperatingReport, Rates};

const SIZE: f64 = 480.0;
const MARGIN: f64 = 50.0;

struct Trace {
    name: &'static str,
    colour: &'static str,
    rates: fn(&CurveRow) -> Rates,
    /// Whether the trace has anything to plot.
    populated: fn(&CurveRow) -> bool,
}

fn det_populated(r: &CurveRow, bin: Option<SizeBin>) -> bool {
    let d = &r.counts.detection;
    let b = match bin {
        None => &d.all,
        Some(b) => d.bin(b),
    };
    b.detected + b.missed + b.false_positive > 0
}

const TRACES: [Trace; 5] = [
    Trace {
        name: "voxel",
        colour: "#000000",
        rates: |r| r.voxel,
        populated: |r| {
            let v = &r.counts.voxel;
            v.tp + v.fp + v.fn_ > 0
        },
    },
    Trace {
        name: "lesion-all",
        colour: "#555555",
        rates: |r| r.det_all,
        populated: |r| det_populated(r, None),
    },
    Trace {
        name: "lesion-small",
        colour: "#1b9e77",
        rates: |r| r.det_small,
        populated: |r| det_populated(r, Some(SizeBin::Small)),
    },
    Trace {
        name: "lesion-medium",
        colour: "#d95f02",
        rates: |r| r.det_medium,
        populated: |r| det_populated(r, Some(SizeBin::Medium)),
    },
    Trace {
        name: "lesion-large",
        colour: "#7570b3",
        rates: |r| r.det_large,
        populated: |r| det_populated(r, Some(SizeBin::Large)),
    },
];

fn px(fdr: f64, tpr: f64) -> (f64, f64) {
    let span = SIZE - 2.0 * MARGIN;
    (MARGIN + fdr * span, SIZE - MARGIN - tpr * span)
}

fn row_at(rows: &[CurveRow], tau: f64) -> &CurveRow {
    rows.iter()
        .min_by(|a, b| (a.tau - tau).abs().total_cmp(&(b.tau - tau).abs()))
        .expect("non-empty rows")
}

/// `(fdr, tpr)` of the segmentation point on the voxel trace and of the
/// detection point on the all-lesion trace.
pub fn operating_points(rows: &[CurveRow], report: &OperatingReport) -> Result<((f64, f64), (f64, f64))> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seg = row_at(rows, report.tau_seg).voxel;
    let det = row_at(rows, report.tau_det).det_all;
    Ok(((seg.fdr, seg.tpr), (det.fdr, det.tpr)))
}

pub fn render(rows: &[CurveRow], report: &OperatingReport) -> Result<String> {
    let (seg, det) = operating_points(rows, report)?;
    let shown: Vec<&Trace> = TRACES.iter().filter(|t| rows.iter().any(|r| (t.populated)(r))).collect();
    let omitted: Vec<&str> = TRACES
        .iter()
        .filter(|t| !rows.iter().any(|r| (t.populated)(r)))
        .map(|t| t.name)
        .collect();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let mut title = format!(
        "TPR vs FDR; tau_seg={:.2} tau_det={:.2} gap={:.2} simultaneous_f1={:.4}",
        report.tau_seg, report.tau_det, report.gap, report.simultaneous_f1
    );
    if !omitted.is_empty() {
        let _ = write!(title, "; omitted empty traces: {}", omitted.join(", "));
    }
    let _ = writeln!(s, "<title>{title}</title>");
    let _ = writeln!(s, r##"<rect width="{SIZE}" height="{SIZE}" fill="#ffffff"/>"##);

    let (x0, y0) = px(0.0, 0.0);
    let (x1, y1) = px(1.0, 1.0);
    let _ = writeln!(
        s,
        r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#000000"/>"##,
        x1 - x0,
        y0 - y1
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let (x, _) = px(v, 0.0);
        let (_, y) = px(0.0, v);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{v:.2}</text>"#, y0 + 16.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}" font-size="11" text-anchor="end">{v:.2}</text>"#, x0 - 6.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">FDR</text>"#, SIZE / 2.0, SIZE - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">TPR</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );

    for (i, t) in shown.iter().enumerate() {
        let points: Vec<String> = rows
            .iter()
            .map(|r| {
                let rate = (t.rates)(r);
                let (x, y) = px(rate.fdr, rate.tpr);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-trace="{}" points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            t.name,
            points.join(" "),
            t.colour
        );
        let ly = MARGIN + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}" font-size="11" fill="{}">{}</text>"#,
            x1 - 90.0,
            t.colour,
            t.name
        );
    }

    let (sx, sy) = px(seg.0, seg.1);
    let (dx, dy) = px(det.0, det.1);
    let _ = writeln!(s, r##"<circle data-point="seg" cx="{sx:.2}" cy="{sy:.2}" r="5" fill="#d62728"/>"##);
    let _ = writeln!(s, r##"<circle data-point="det" cx="{dx:.2}" cy="{dy:.2}" r="5" fill="#1f77b4"/>"##);
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_svg(rows: &[CurveRow], report: &OperatingReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = render(rows, report)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pixel position of a rate point, exposed for reading plots back in tests.
pub fn pixel(fdr: f64, tpr: f64) -> (f64, f64) {
    px(fdr, tpr)
}
