//! Sweep charts as standalone SVG: per eval set, whole and boundary MSE
//! against segmentation count with one line per matte count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::ResultRow;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Reads a sweep table, naming the offending line on malformed input.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?
        .clone();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Csv(format!("{} row {line}: {e}", path.display())))?;
        let row: ResultRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| Error::Csv(format!("{} row {line}: {e}", path.display())))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Csv(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Round-ish upper bound for the y axis.
fn nice_max(v: f64) -> f64 {
    if v <= 0.0 || !v.is_finite() {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|&c| c >= v).unwrap_or(10.0 * mag)
}

/// One line chart; `series` maps matte count to (seg count, value) points.
pub fn line_chart_svg(title: &str, y_label: &str, seg_counts: &[usize], series: &BTreeMap<usize, Vec<(usize, f64)>>) -> String {
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let ymax = nice_max(series.values().flatten().map(|p| p.1).fold(0.0, f64::max));
    let xpos = |s: usize| {
        let i = seg_counts.iter().position(|&c| c == s).unwrap_or(0);
        if seg_counts.len() == 1 {
            LEFT + pw / 2.0
        } else {
            LEFT + pw * i as f64 / (seg_counts.len() - 1) as f64
        }
    };
    let ypos = |v: f64| TOP + ph * (1.0 - v / ymax);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, esc(title));
    for k in 0..=5 {
        let v = ymax * k as f64 / 5.0;
        let y = ypos(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            format_tick(v)
        );
    }
    for &c in seg_counts {
        let x = xpos(c);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{c}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 20.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">segmentation samples</text>"#,
        LEFT + pw / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(y_label)
    );
    for (k, (mat, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts = pts.clone();
        pts.sort_by_key(|p| p.0);
        let path: Vec<String> = pts.iter().map(|&(sg, v)| format!("{:.1},{:.1}", xpos(sg), ypos(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(sg, v) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, xpos(sg), ypos(v));
        }
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = W - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">matte {mat}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Writes two charts per eval set into `out_dir` and returns their paths.
pub fn plot_sweep(rows: &[ResultRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Csv("nothing to plot".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut by_set: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        by_set.entry(&r.eval_set).or_default().push(r);
    }
    let mut written = Vec::new();
    for (set, rs) in by_set {
        let mut seg_counts: Vec<usize> = rs.iter().map(|r| r.seg_n).collect();
        seg_counts.sort_unstable();
        seg_counts.dedup();
        let metrics: [(&str, &str, fn(&ResultRow) -> Option<f64>); 2] = [
            ("mse_whole", "whole-region MSE", |r| Some(r.mse_whole)),
            ("mse_boundary", "boundary-region MSE", |r| r.mse_boundary),
        ];
        for (key, label, get) in metrics {
            let mut series: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
            for r in &rs {
                let entry = series.entry(r.mat_n).or_default();
                if let Some(v) = get(r) {
                    entry.push((r.seg_n, v));
                }
            }
            let svg = line_chart_svg(&format!("{set}: {label}"), label, &seg_counts, &series);
            let path = out_dir.join(format!("{}_{key}.svg", file_stem(set)));
            fs::write(&path, svg)?;
            written.push(path);
        }
    }
    Ok(written)
}
