//! Standalone SVG interval plots: min/max band over seeds, mean line and
//! target/tolerance guides, with the plotted numbers repeated in comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use calender::forecast::{THICKNESS_TOLERANCE, WIDTH_TOLERANCE};
use calender::mpdppo::Variant;

use crate::error::{io_error, Result};
use crate::grid::{RunRecord, Scenario};

const W: f64 = 760.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const GAP: f64 = 60.0;

/// Per-step min, mean and max across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub steps: Vec<usize>,
    pub min: Vec<f64>,
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Episodes that end early hold their last value to the longest trace.
pub fn band(records: &[&RunRecord], value: impl Fn(&crate::grid::TracePoint) -> f64) -> Option<Band> {
    let used: Vec<&&RunRecord> = records.iter().filter(|r| !r.trace.is_empty()).collect();
    let longest = used.iter().max_by_key(|r| r.trace.len())?;
    let steps: Vec<usize> = longest.trace.iter().map(|p| p.step).collect();
    let n = steps.len();
    let (mut min, mut mean, mut max) = (vec![f64::INFINITY; n], vec![0.0; n], vec![f64::NEG_INFINITY; n]);
    for r in &used {
        for i in 0..n {
            let v = value(&r.trace[i.min(r.trace.len() - 1)]);
            min[i] = min[i].min(v);
            max[i] = max[i].max(v);
            mean[i] += v / used.len() as f64;
        }
    }
    Some(Band {
        steps,
        min,
        mean,
        max,
        seeds: used.iter().map(|r| r.seed).collect(),
    })
}

struct Panel<'a> {
    label: &'a str,
    unit: &'a str,
    band: Band,
    target: f64,
    tolerance: f64,
}

fn panel(svg: &mut String, p: &Panel, top: f64) {
    let b = &p.band;
    let lo = b.min.iter().copied().fold(p.target - p.tolerance, f64::min);
    let hi = b.max.iter().copied().fold(p.target + p.tolerance, f64::max);
    let pad = ((hi - lo) * 0.05).max(1e-9);
    let (lo, hi) = (lo - pad, hi + pad);
    let x0 = *b.steps.first().unwrap_or(&0) as f64;
    let x1 = (*b.steps.last().unwrap_or(&1) as f64).max(x0 + 1.0);
    let plot_w = W - MARGIN_L - MARGIN_R;
    let sx = |s: usize| MARGIN_L + (s as f64 - x0) / (x1 - x0) * plot_w;
    let sy = |v: f64| top + (hi - v) / (hi - lo) * PANEL_H;
    let _ = writeln!(svg, "<g class=\"panel\" id=\"{}\">", p.label);
    let _ = writeln!(
        svg,
        "<rect x=\"{MARGIN_L}\" y=\"{top}\" width=\"{plot_w}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#444\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{MARGIN_L}\" y=\"{:.2}\" font-size=\"14\">{} ({})</text>",
        top - 8.0,
        p.label,
        p.unit
    );
    let mut pts = String::new();
    for (i, &s) in b.steps.iter().enumerate() {
        let _ = write!(pts, "{:.2},{:.2} ", sx(s), sy(b.max[i]));
    }
    for (i, &s) in b.steps.iter().enumerate().rev() {
        let _ = write!(pts, "{:.2},{:.2} ", sx(s), sy(b.min[i]));
    }
    let _ = writeln!(
        svg,
        "<polygon class=\"band\" data-seeds=\"{}\" points=\"{}\" fill=\"#4a7ab5\" fill-opacity=\"0.25\" stroke=\"none\"/>",
        b.seeds.len(),
        pts.trim_end()
    );
    let mut line = String::new();
    for (i, &s) in b.steps.iter().enumerate() {
        let _ = write!(line, "{:.2},{:.2} ", sx(s), sy(b.mean[i]));
    }
    let _ = writeln!(
        svg,
        "<polyline class=\"mean\" points=\"{}\" fill=\"none\" stroke=\"#1f3f73\" stroke-width=\"2\"/>",
        line.trim_end()
    );
    let hline = |svg: &mut String, class: &str, v: f64, style: &str| {
        let _ = writeln!(
            svg,
            "<line class=\"{class}\" x1=\"{MARGIN_L}\" x2=\"{:.2}\" y1=\"{y:.2}\" y2=\"{y:.2}\" {style}/>",
            MARGIN_L + plot_w,
            y = sy(v)
        );
    };
    hline(svg, "target", p.target, "stroke=\"#b03030\" stroke-width=\"1.5\"");
    for v in [p.target - p.tolerance, p.target + p.tolerance] {
        hline(svg, "tolerance", v, "stroke=\"#b03030\" stroke-dasharray=\"6 4\"");
    }
    for (v, y) in [(hi, top + 4.0), (p.target, sy(p.target) + 4.0), (lo, top + PANEL_H)] {
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{y:.2}\" font-size=\"11\" text-anchor=\"end\">{v:.3}</text>",
            MARGIN_L - 6.0
        );
    }
    for s in [x0 as usize, x1 as usize] {
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{s}</text>",
            sx(s),
            top + PANEL_H + 16.0
        );
    }
    let _ = writeln!(svg, "</g>");
}

fn data_comment(svg: &mut String, label: &str, b: &Band) {
    let _ = writeln!(svg, "<!-- {label}: step,min,mean,max");
    for i in 0..b.steps.len() {
        let _ = writeln!(svg, "{},{},{},{}", b.steps[i], b.min[i], b.mean[i], b.max[i]);
    }
    let _ = writeln!(svg, "-->");
}

/// SVG for one (variant, scenario); `None` when no record has a trace.
pub fn render(variant: Variant, scenario: &Scenario, records: &[&RunRecord]) -> Option<String> {
    let width = band(records, |p| p.width)?;
    let thickness = band(records, |p| p.thickness)?;
    let h = MARGIN_T + 2.0 * PANEL_H + GAP + 30.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{h}\" viewBox=\"0 0 {W} {h}\">"
    );
    let seeds: Vec<String> = width.seeds.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(svg, "<!-- variant {variant}, scenario {scenario}, seeds {} -->", seeds.join(" "));
    data_comment(&mut svg, "width", &width);
    data_comment(&mut svg, "thickness", &thickness);
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{MARGIN_L}\" y=\"18\" font-size=\"15\">{variant} {scenario}: greedy evaluation, {} seeds</text>",
        seeds.len()
    );
    panel(
        &mut svg,
        &Panel {
            label: "width",
            unit: "mm",
            band: width,
            target: scenario.width,
            tolerance: WIDTH_TOLERANCE,
        },
        MARGIN_T,
    );
    panel(
        &mut svg,
        &Panel {
            label: "thickness",
            unit: "mm",
            band: thickness,
            target: scenario.thickness,
            tolerance: THICKNESS_TOLERANCE,
        },
        MARGIN_T + PANEL_H + GAP,
    );
    let _ = writeln!(svg, "</svg>");
    Some(svg)
}

/// Writes `<dir>/<variant>__<scenario>.svg` for every group with traces.
pub fn write_plots(dir: &Path, records: &[RunRecord]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mut groups: BTreeMap<(Variant, (i64, i64, usize)), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.variant, r.scenario.sort_key())).or_default().push(r);
    }
    let mut written = Vec::new();
    for ((variant, _), mut rs) in groups {
        rs.sort_by_key(|r| r.seed);
        let scenario = rs[0].scenario;
        if let Some(svg) = render(variant, &scenario, &rs) {
            let path = dir.join(format!("{variant}__{scenario}.svg"));
            std::fs::write(&path, svg).map_err(io_error(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}
