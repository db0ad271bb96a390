//! Figure data: placement scatter exports and bar charts, as CSV and SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::EnvConfig;
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::placement::{self, PlacementContext, Regime};
use crate::rng;

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub sample: u64,
    pub object: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone)]
pub struct Scatter {
    pub regime: Regime,
    pub objects: Vec<String>,
    pub points: Vec<ScatterPoint>,
    pub x_half_extent: f64,
    pub y_half_extent: f64,
}

/// Axis-aligned box `[min_x, min_y, max_x, max_y]`.
pub type BBox = [f64; 4];

pub fn boxes_overlap(a: &BBox, b: &BBox) -> bool {
    a[0] <= b[2] && b[0] <= a[2] && a[1] <= b[3] && b[1] <= a[3]
}

impl Scatter {
    /// Draws `n` placements; every sample is re-validated before export.
    pub fn sample(env: &EnvConfig, regime: Regime, n: u64, seed: u64) -> Result<Self> {
        let ctx = PlacementContext::new(&env.workspace, &env.objects);
        let mut points = Vec::with_capacity(n as usize * env.objects.len());
        for i in 0..n {
            let s = placement::sample_regime(&ctx, regime, rng::episode_seed(seed, i))?;
            placement::validate_sample(&ctx, &s)?;
            for (spec, p) in env.objects.iter().zip(&s.positions) {
                points.push(ScatterPoint { sample: i, object: spec.name.to_string(), x: p[0], y: p[1] });
            }
        }
        Ok(Self {
            regime,
            objects: env.objects.iter().map(|o| o.name.to_string()).collect(),
            points,
            x_half_extent: env.workspace.x_half_extent,
            y_half_extent: env.workspace.y_half_extent,
        })
    }

    pub fn bbox(&self, object: &str) -> Option<BBox> {
        self.points.iter().filter(|p| p.object == object).fold(None, |acc, p| {
            Some(match acc {
                None => [p.x, p.y, p.x, p.y],
                Some(b) => [b[0].min(p.x), b[1].min(p.y), b[2].max(p.x), b[3].max(p.y)],
            })
        })
    }

    pub fn bboxes(&self) -> Vec<BBox> {
        self.objects.iter().filter_map(|o| self.bbox(o)).collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("sample,object,x,y\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", p.sample, p.object, p.x, p.y);
        }
        out
    }

    pub fn svg(&self) -> String {
        let (w, h, pad) = (360.0, 480.0, 40.0);
        let sx = |x: f64| pad + (x + self.x_half_extent) / (2.0 * self.x_half_extent) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (y + self.y_half_extent) / (2.0 * self.y_half_extent) * (h - 2.0 * pad);
        let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        s.push_str("\n<style>\n");
        for (i, o) in self.objects.iter().enumerate() {
            let _ = writeln!(s, ".obj-{o} {{ fill: {}; fill-opacity: 0.6; }}", PALETTE[i % PALETTE.len()]);
        }
        s.push_str("</style>\n");
        let _ = writeln!(
            s,
            r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            w - 2.0 * pad,
            h - 2.0 * pad
        );
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, self.regime);
        for (x, anchor) in [(-self.x_half_extent, "start"), (self.x_half_extent, "end")] {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}" font-size="10">x={x:.3}</text>"#,
                sx(x),
                h - pad + 14.0
            );
        }
        for y in [-self.y_half_extent, self.y_half_extent] {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">y={y:.3}</text>"#,
                pad - 4.0,
                sy(y) + 4.0
            );
        }
        for p in &self.points {
            let _ = writeln!(s, r#"<circle class="obj-{}" cx="{:.2}" cy="{:.2}" r="2"/>"#, p.object, sx(p.x), sy(p.y));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let y = pad + 12.0 * i as f64 + 8.0;
            let _ = writeln!(s, r#"<circle class="obj-{o}" cx="{:.1}" cy="{y:.1}" r="4"/>"#, w - pad - 60.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10">{o}</text>"#, w - pad - 52.0, y + 3.0);
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `scatter_<regime>.csv` and `scatter_<regime>.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("scatter_{}.csv", self.regime)), self.csv())?;
        fs::write(dir.join(format!("scatter_{}.svg", self.regime)), self.svg())?;
        Ok(())
    }
}

pub fn scatter_export(env: &EnvConfig, regime: Regime, n: u64, seed: u64, dir: &Path) -> Result<Scatter> {
    let s = Scatter::sample(env, regime, n, seed)?;
    s.write(dir)?;
    Ok(s)
}

/// Grouped bars: one group per row label, one bar per series (success,
/// grasp-any, reach) with Wilson interval whiskers.
pub fn bar_svg(title: &str, rows: &[(String, &MetricsReport)]) -> String {
    let series = ["success", "grasp-any", "reach"];
    let group_w = 90.0;
    let (pad, plot_h) = (50.0, 240.0);
    let w = pad * 2.0 + group_w * rows.len().max(1) as f64;
    let h = plot_h + pad * 2.0 + 40.0;
    let y_of = |v: f64| pad + plot_h * (1.0 - v);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    s.push('\n');
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = y_of(tick);
        let _ = writeln!(s, r##"<line x1="{pad}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/>"##, w - pad);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{:.0}%</text>"#, pad - 4.0, y + 3.0, tick * 100.0);
    }
    for (g, (label, r)) in rows.iter().enumerate() {
        let x0 = pad + group_w * g as f64 + 10.0;
        for (k, rate) in [&r.success, &r.grasp_any, &r.reach].into_iter().enumerate() {
            let x = x0 + 22.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<rect class="{}" x="{x:.1}" y="{:.1}" width="18" height="{:.1}" fill="{}"/>"#,
                series[k],
                y_of(rate.rate),
                plot_h * rate.rate,
                PALETTE[k]
            );
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                x + 9.0,
                x + 9.0,
                y_of(rate.ci_low),
                y_of(rate.ci_high)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{label}</text>"#,
            x0 + 31.0,
            pad + plot_h + 14.0
        );
    }
    for (k, name) in series.iter().enumerate() {
        let x = pad + 80.0 * k as f64;
        let y = h - 16.0;
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[k]);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}" font-size="10">{name}</text>"#, x + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

/// One bar chart per policy, groups ordered like the report rows.
pub fn report_bars(reports: &[MetricsReport], dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut policies: Vec<&str> = reports.iter().map(|r| r.key.policy.as_str()).collect();
    policies.sort_unstable();
    policies.dedup();
    let mut files = Vec::new();
    for p in policies {
        let mut rows: Vec<&MetricsReport> = reports.iter().filter(|r| r.key.policy == p).collect();
        rows.sort_by_key(|r| (r.key.regime.ladder_rank(), r.key.object_count, r.key.dataset_size, r.key.phase));
        let labelled: Vec<(String, &MetricsReport)> = rows
            .into_iter()
            .map(|r| {
                let mut l = r.key.regime.to_string();
                if let Some(ph) = r.key.phase {
                    l = ph.name().to_string();
                }
                if r.key.object_count != 5 {
                    l.push_str(&format!(" k={}", r.key.object_count));
                }
                if let Some(n) = r.key.dataset_size {
                    l.push_str(&format!(" n={n}"));
                }
                (l, r)
            })
            .collect();
        let name = format!("bars_{}.svg", p.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_"));
        fs::write(dir.join(&name), bar_svg(p, &labelled))?;
        files.push(name);
    }
    Ok(files)
}
