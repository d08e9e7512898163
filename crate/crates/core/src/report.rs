//! Report envelopes and artifact writers: JSON summaries, CSV tables and
//! small self-contained SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

/// Common wrapper for every machine-readable summary.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub config_hash: String,
    /// Identifiers of the checks that produced this report.
    pub checks: Vec<&'a str>,
    pub verdict: Option<&'a str>,
    pub result: &'a T,
}

impl<'a, T: Serialize> Envelope<'a, T> {
    pub fn new(command: &'a str, config_hash: String, checks: Vec<&'a str>, verdict: Option<&'a str>, result: &'a T) -> Self {
        Self { command, version: env!("CARGO_PKG_VERSION"), config_hash, checks, verdict, result }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub struct Artifacts {
    dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, body)?;
        self.written.push(p.clone());
        Ok(p)
    }

    /// CSV with a header row; every row must match the header width.
    pub fn csv(&mut self, name: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<PathBuf> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        self.written.push(p.clone());
        Ok(p)
    }
}

/// Shortest round-trip representation.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    s
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line plot of one or more series in log₂–log₁₀ coordinates; non-positive
/// values are skipped.
pub fn loglog_svg(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(_, v)| v.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.log2(), y.log10())).collect())
        .collect();
    let (x0, x1) = range(pts.iter().flatten().map(|p| p.0));
    let (y0, y1) = range(pts.iter().flatten().map(|p| p.1));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 15.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (v, lbl) in [(x0, x0), (x1, x1)] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">2^{lbl:.1}</text>"#, sx(v), H - PAD + 16.0);
    }
    for v in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">1e{v:.1}</text>"#, PAD - 4.0, sy(v) + 4.0);
    }
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    for (i, ((name, _), p)) in series.iter().zip(&pts).enumerate() {
        let c = colors[i % colors.len()];
        let d: Vec<String> = p.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, d.join(" "));
        for (x, y) in p {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, sx(*x), sy(*y));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{}</text>"#, W - PAD - 150.0, PAD + 16.0 * (i + 1) as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of `values[row][col]` on a diverging scale centred at zero;
/// rows are drawn bottom to top.
pub fn heatmap_svg(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], ys: &[f64], values: &[Vec<f64>]) -> String {
    let scale = values.iter().flatten().filter(|v| v.is_finite()).fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let (nr, nc) = (ys.len().max(1), xs.len().max(1));
    let cw = (W - 2.0 * PAD) / nc as f64;
    let ch = (H - 2.0 * PAD) / nr as f64;
    let mut s = svg_open(title);
    for (r, row) in values.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let a = (v / scale).clamp(-1.0, 1.0);
            let (red, green, blue) = if a >= 0.0 {
                (255.0 * (1.0 - a), 255.0 * (1.0 - a), 255.0)
            } else {
                (255.0, 255.0 * (1.0 + a), 255.0 * (1.0 + a))
            };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({},{},{})"><title>{}</title></rect>"#,
                PAD + c as f64 * cw,
                H - PAD - (r + 1) as f64 * ch,
                cw,
                ch,
                red as u8,
                green as u8,
                blue as u8,
                num(*v)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    if let (Some(a), Some(b)) = (xs.first(), xs.last()) {
        let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{a:.3}</text>"#, H - PAD + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{b:.3}</text>"#, W - PAD, H - PAD + 16.0);
    }
    if let (Some(a), Some(b)) = (ys.first(), ys.last()) {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{a:.3}</text>"#, PAD - 4.0, H - PAD);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{b:.3}</text>"#, PAD - 4.0, PAD + 12.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 15.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">blue ≥ 0, red &lt; 0, |max| = {}</text>"#,
        W - PAD,
        PAD - 8.0,
        num(scale)
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_and_deterministic() {
        let a = heatmap_svg("t", "u", "t", &[0.0, 1.0], &[0.0, 0.5], &[vec![1.0, -1.0], vec![0.0, 0.5]]);
        let b = heatmap_svg("t", "u", "t", &[0.0, 1.0], &[0.0, 0.5], &[vec![1.0, -1.0], vec![0.0, 0.5]]);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<rect").count(), 2 + 4);
        let l = loglog_svg("wz", "level", "dist", &[("sup", vec![(16.0, 1e-2), (32.0, 5e-3), (64.0, 0.0)])]);
        assert_eq!(l.matches("<circle").count(), 2);
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-17, 1e300] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn envelope_carries_hash_and_checks() {
        let body = vec![1, 2];
        let e = Envelope::new("sample", "abc".into(), vec!["determinism"], Some("PASS"), &body);
        let j: serde_json::Value = serde_json::from_str(&e.to_json().unwrap()).unwrap();
        assert_eq!(j["config_hash"], "abc");
        assert_eq!(j["checks"][0], "determinism");
        assert_eq!(j["result"][1], 2);
    }
}
