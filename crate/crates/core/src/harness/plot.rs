//! SVG line charts drawn from the CSV outputs of a run or refinement
//! directory. Nothing here feeds back into the solver.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn axis(v: f64, log: bool) -> Option<f64> {
    let v = if log { (v > 0.0).then(|| v.log10())? } else { v };
    v.is_finite().then_some(v)
}

fn range(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo <= 1e-300_f64.max(1e-12 * lo.abs()) {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let mapped: Vec<Vec<(f64, f64)>> = self
            .series
            .iter()
            .map(|s| {
                s.points
                    .iter()
                    .filter_map(|&(x, y)| Some((axis(x, self.log_x)?, axis(y, self.log_y)?)))
                    .collect()
            })
            .collect();
        let (x0, x1) = range(mapped.iter().flatten().map(|p| p.0));
        let (y0, y1) = range(mapped.iter().flatten().map(|p| p.1));
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
        let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
        let tick = |v: f64, log: bool| if log { format!("1e{v:.1}") } else { format!("{v:.3e}") };

        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            W / 2.0,
            escape(&self.title)
        );
        s += &format!(
            "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
            W - 2.0 * MARGIN,
            H - 2.0 * MARGIN
        );
        for (v, anchor, x, y) in [
            (x0, "start", MARGIN, H - MARGIN + 16.0),
            (x1, "end", W - MARGIN, H - MARGIN + 16.0),
        ] {
            s += &format!("<text x=\"{x}\" y=\"{y}\" text-anchor=\"{anchor}\">{}</text>\n", tick(v, self.log_x));
        }
        for (v, y) in [(y0, H - MARGIN), (y1, MARGIN + 10.0)] {
            s += &format!("<text x=\"{}\" y=\"{y}\" text-anchor=\"end\">{}</text>\n", MARGIN - 4.0, tick(v, self.log_y));
        }
        s += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            W / 2.0,
            H - 20.0,
            escape(&self.x_label)
        );
        s += &format!(
            "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
            H / 2.0,
            H / 2.0,
            escape(&self.y_label)
        );
        for (k, (series, pts)) in self.series.iter().zip(&mapped).enumerate() {
            let color = COLORS[k % COLORS.len()];
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            s += &format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                path.join(" ")
            );
            s += &format!(
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
                W - MARGIN + 4.0,
                MARGIN + 14.0 * (k as f64 + 1.0),
                escape(&series.label)
            );
        }
        s + "</svg>\n"
    }
}

/// Header and numeric columns of a CSV; `#` lines and empty cells are skipped.
fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let mut cols = vec![Vec::new(); header.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (col, v) in cols.iter_mut().zip(rec.iter()) {
            col.push(v.parse().unwrap_or(f64::NAN));
        }
    }
    Ok((header, cols))
}

fn column<'a>(header: &[String], cols: &'a [Vec<f64>], name: &str) -> Option<&'a [f64]> {
    header.iter().position(|h| h == name).map(|i| cols[i].as_slice())
}

fn series(label: &str, x: &[f64], y: &[f64]) -> Series {
    Series {
        label: label.to_string(),
        points: x.iter().copied().zip(y.iter().copied()).collect(),
    }
}

fn latest_snapshot(dir: &Path) -> Option<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("snapshots"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    files.pop()
}

/// Writes every chart the directory has data for and returns their paths.
pub fn plot_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut charts: Vec<(&str, Chart)> = Vec::new();
    let entropy = dir.join("entropy.csv");
    if entropy.exists() {
        let (h, c) = read_columns(&entropy)?;
        let t = column(&h, &c, "time").unwrap_or(&[]);
        if let Some(e) = column(&h, &c, "E") {
            charts.push((
                "entropy.svg",
                Chart {
                    title: "Lagged entropy".into(),
                    x_label: "t".into(),
                    y_label: "E".into(),
                    log_x: false,
                    log_y: false,
                    series: vec![series("E", t, e)],
                },
            ));
        }
        let mons = crate::model::MonitorRecord::NAMES
            .iter()
            .filter_map(|m| column(&h, &c, m).map(|y| series(m, t, y)))
            .collect::<Vec<_>>();
        if !mons.is_empty() {
            charts.push((
                "monitors.svg",
                Chart {
                    title: "Dissipation monitors".into(),
                    x_label: "t".into(),
                    y_label: "per-step value".into(),
                    log_x: false,
                    log_y: true,
                    series: mons,
                },
            ));
        }
    }
    if let Some(snap) = latest_snapshot(dir) {
        let (h, c) = read_columns(&snap)?;
        if !h.iter().any(|s| s == "y") {
            let x = column(&h, &c, "x").unwrap_or(&[]);
            let species = h.iter().filter(|s| s.starts_with("u_")).map(|s| series(s, x, column(&h, &c, s).unwrap_or(&[])));
            charts.push((
                "profile.svg",
                Chart {
                    title: format!("Composition, {}", snap.file_name().unwrap_or_default().to_string_lossy()),
                    x_label: "x".into(),
                    y_label: "fraction".into(),
                    log_x: false,
                    log_y: false,
                    series: species.collect(),
                },
            ));
        }
    }
    let refine = dir.join("refine.csv");
    if refine.exists() {
        let (h, c) = read_columns(&refine)?;
        if let (Some(t), Some(g)) = (column(&h, &c, "tau_fine"), column(&h, &c, "gap")) {
            charts.push((
                "refine.svg",
                Chart {
                    title: "Gap between successive step sizes".into(),
                    x_label: "tau".into(),
                    y_label: "L2(0,T;L2) gap".into(),
                    log_x: true,
                    log_y: true,
                    series: vec![series("gap", t, g)],
                },
            ));
        }
    }
    if charts.is_empty() {
        return Err(Error::domain(format!("{}: no entropy.csv, snapshots or refine.csv to plot", dir.display())));
    }
    let mut written = Vec::new();
    for (name, chart) in charts {
        let p = dir.join(name);
        fs::write(&p, chart.to_svg())?;
        written.push(p);
    }
    Ok(written)
}
