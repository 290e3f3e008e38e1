//! Static SVG line charts drawn from the summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::tables::{EnsembleRow, HittingRow};

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 220.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

struct Axis {
    log: bool,
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if log {
            (lo, hi) = (lo.floor(), hi.ceil());
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        Self { log, lo, hi }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let step = ((self.hi - self.lo) / 8.0).ceil().max(1.0);
            let mut out = Vec::new();
            let mut e = self.lo;
            while e <= self.hi + 1e-9 {
                out.push((10f64.powf(e), format!("1e{}", e as i64)));
                e += step;
            }
            out
        } else {
            (0..=5)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 5.0;
                    (v, format!("{v:.3}"))
                })
                .collect()
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    fn usable(&self, p: &(f64, f64)) -> bool {
        p.0.is_finite()
            && p.1.is_finite()
            && (!self.log_x || p.0 > 0.0)
            && (!self.log_y || p.1 > 0.0)
    }

    pub fn to_svg(&self) -> String {
        let pts = || self.series.iter().flat_map(|s| s.points.iter()).filter(|p| self.usable(p));
        let xa = Axis::fit(pts().map(|p| p.0), self.log_x);
        let ya = Axis::fit(pts().map(|p| p.1), self.log_y);
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |v: f64| LEFT + xa.frac(v) * pw;
        let sy = |v: f64| TOP + (1.0 - ya.frac(v)) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        for (v, label) in xa.ticks() {
            let x = sx(v);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.1}" y1="{TOP}" x2="{x:.1}" y2="{:.1}" stroke="#e5e5e5"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"##,
                TOP + ph,
                TOP + ph + 18.0
            );
        }
        for (v, label) in ya.ticks() {
            let y = sy(v);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e5e5e5"/><text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .filter(|p| self.usable(p))
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            if !path.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    path.join(" ")
                );
            }
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let lx = WIDTH - RIGHT + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn per_cell(rows: &[EnsembleRow], y: impl Fn(&EnsembleRow) -> f64) -> Vec<Series> {
    let mut by: BTreeMap<usize, Series> = BTreeMap::new();
    for r in rows {
        by.entry(r.cell)
            .or_insert_with(|| Series {
                label: format!("m={} alpha={} {}", r.m, r.alpha, r.schedule),
                points: Vec::new(),
            })
            .points
            .push((r.n as f64, y(r)));
    }
    by.into_values().collect()
}

pub fn loss_chart(rows: &[EnsembleRow]) -> Chart {
    Chart {
        title: "Training loss at the averaged iterate".into(),
        x_label: "step n".into(),
        y_label: "mean g(x̄_n)".into(),
        log_x: true,
        log_y: true,
        series: per_cell(rows, |r| r.mean_loss),
    }
}

pub fn grad_chart(rows: &[EnsembleRow]) -> Chart {
    Chart {
        title: "Squared gradient norm at the averaged iterate".into(),
        x_label: "step n".into(),
        y_label: "mean ‖∇g(x̄_n)‖²".into(),
        log_x: true,
        log_y: true,
        series: per_cell(rows, |r| r.mean_grad_norm_sq),
    }
}

/// `partial_sum(n)` is `Σ_{i≤n} ε_i` for the cell's schedule.
pub fn ccdf_chart(rows: &[HittingRow], partial_sum: impl Fn(usize, u64) -> f64) -> Chart {
    let mut by: BTreeMap<(usize, u64), Vec<&HittingRow>> = BTreeMap::new();
    for r in rows {
        by.entry((r.cell, r.a0_spec.to_bits())).or_default().push(r);
    }
    let series = by
        .into_iter()
        .map(|((cell, _), rs)| {
            let mut taus: Vec<u64> = rs.iter().map(|r| r.tau).collect();
            taus.sort_unstable();
            let total = taus.len() as f64;
            let last = taus.last().copied().unwrap_or(1);
            let mut below = 0;
            let points = (1..=last)
                .map(|n| {
                    while below < taus.len() && taus[below] < n {
                        below += 1;
                    }
                    (partial_sum(cell, n), (taus.len() - below) as f64 / total)
                })
                .collect();
            Series {
                label: format!("m={} alpha={} a0={}", rs[0].m, rs[0].alpha, rs[0].a0_spec),
                points,
            }
        })
        .collect();
    Chart {
        title: "Tail of the hitting time".into(),
        x_label: "Σ ε_i up to n".into(),
        y_label: "P(τ ≥ n)".into(),
        log_x: false,
        log_y: true,
        series,
    }
}
