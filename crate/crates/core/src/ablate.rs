//! One-axis ablations: train one model per (value, seed), evaluate zero-shot
//! accuracy and retrieval precision, and write a tidy CSV plus an SVG chart
//! of the per-value seed means.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{class_prompts, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::loss::LossMode;
use crate::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    MaskRatio,
    PretrainFraction,
    Beta,
    LossMode,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask_ratio" => Ok(Axis::MaskRatio),
            "pretrain_fraction" => Ok(Axis::PretrainFraction),
            "beta" => Ok(Axis::Beta),
            "loss_mode" => Ok(Axis::LossMode),
            other => Err(Error::config(format!(
                "unknown ablation axis `{other}` (mask_ratio, pretrain_fraction, beta, loss_mode)"
            ))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::MaskRatio => "mask_ratio",
            Axis::PretrainFraction => "pretrain_fraction",
            Axis::Beta => "beta",
            Axis::LossMode => "loss_mode",
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::config(format!("{}: `{value}` is not a number", self.name())))
        };
        match self {
            Axis::MaskRatio => cfg.train.mask_ratio = num()?,
            Axis::PretrainFraction => cfg.train.pretrain_fraction = num()?,
            Axis::Beta => cfg.loss.beta = num()?,
            Axis::LossMode => cfg.loss.mode = value.parse::<LossMode>()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis_value: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub const FAILED: &str = "failed";

/// Metrics of one trained cell.
pub fn cell_metrics(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<(String, f64)>> {
    let outcome = train::train(cfg, ds)?;
    let model = outcome.checkpoint.model();
    let vocab = ds.vocabulary();
    let test = ds.split(Split::Test);
    let zs = eval::zero_shot_classify(&model, vocab, test, &class_prompts())?;
    let ret = eval::retrieval(&model, vocab, test, &cfg.eval.ks)?;
    let mut out = vec![("zero_shot_accuracy".to_string(), zs.accuracy.unwrap_or(f64::NAN))];
    for k in &cfg.eval.ks {
        let key = format!("P@{k}");
        out.push((key.clone(), ret.precision_at_k[&key]));
    }
    Ok(out)
}

/// Runs every (value, seed) cell. A failing cell is logged and recorded as
/// one `failed` row with a NaN value; the remaining cells still run.
pub fn ablate(base: &RunConfig, ds: &Dataset, axis: Axis, values: &[String], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one value and one seed"));
    }
    // Reject malformed values up front rather than as failed cells.
    for v in values {
        axis.apply(base, v)?;
    }
    let mut rows = Vec::new();
    for value in values {
        for &seed in seeds {
            let mut cfg = axis.apply(base, value)?;
            cfg.train.seed = seed;
            cfg.train.checkpoint = None;
            cfg.train.log = None;
            log::info!("ablation cell {}={value} seed {seed}", axis.name());
            match cell_metrics(&cfg, ds) {
                Ok(metrics) => rows.extend(metrics.into_iter().map(|(metric, v)| AblationRow {
                    axis_value: value.clone(),
                    metric,
                    value: v,
                    seed,
                })),
                Err(e) => {
                    log::error!("ablation cell {}={value} seed {seed} failed: {e}", axis.name());
                    rows.push(AblationRow {
                        axis_value: value.clone(),
                        metric: FAILED.into(),
                        value: f64::NAN,
                        seed,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::io(path))?;
    Ok(())
}

/// Seed means per `(metric, axis_value)`, values in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> (Vec<String>, Vec<(String, Vec<f64>)>) {
    let mut values: Vec<String> = Vec::new();
    let mut metrics: Vec<String> = Vec::new();
    for r in rows {
        if !values.contains(&r.axis_value) {
            values.push(r.axis_value.clone());
        }
        if r.metric != FAILED && !metrics.contains(&r.metric) {
            metrics.push(r.metric.clone());
        }
    }
    let series = metrics
        .into_iter()
        .map(|m| {
            let means = values
                .iter()
                .map(|v| {
                    let xs: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.metric == m && &r.axis_value == v && r.value.is_finite())
                        .map(|r| r.value)
                        .collect();
                    if xs.is_empty() {
                        f64::NAN
                    } else {
                        xs.iter().sum::<f64>() / xs.len() as f64
                    }
                })
                .collect();
            (m, means)
        })
        .collect();
    (values, series)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG line chart of seed-mean metric values (y in `[0, 1]`)
/// against the axis values, evenly spaced in the order given.
pub fn render_svg(axis: Axis, rows: &[AblationRow]) -> String {
    let (values, series) = summarize(rows);
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x_at = |i: usize| {
        if values.len() <= 1 {
            left + pw / 2.0
        } else {
            left + pw * i as f64 / (values.len() - 1) as f64
        }
    };
    let y_at = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let y = y_at(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="#333"/><line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="#333"/>"##,
        top + ph,
        top + ph,
        left + pw,
        top + ph
    );
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x_at(i),
            top + ph + 18.0,
            escape(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        axis.name()
    );
    for (n, (metric, means)) in series.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let points: Vec<String> = means
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_finite())
            .map(|(i, m)| format!("{:.2},{:.2}", x_at(i), y_at(*m)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for p in &points {
            let (x, y) = p.split_once(',').expect("point");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 16.0 * n as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            left + pw + 15.0,
            left + pw + 35.0,
            left + pw + 40.0,
            ly + 4.0,
            escape(metric)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &str, m: &str, x: f64, seed: u64) -> AblationRow {
        AblationRow {
            axis_value: v.into(),
            metric: m.into(),
            value: x,
            seed,
        }
    }

    #[test]
    fn axis_parsing_and_application() {
        let base = RunConfig::default();
        assert_eq!(Axis::from_str("beta").unwrap().apply(&base, "0.5").unwrap().loss.beta, 0.5);
        assert!(Axis::from_str("depth").is_err());
        assert!(Axis::MaskRatio.apply(&base, "1.0").is_err());
        assert!(Axis::LossMode.apply(&base, "hinge").is_err());
    }

    #[test]
    fn summary_averages_seeds_and_skips_failures() {
        let rows = vec![
            row("0.1", "acc", 0.5, 0),
            row("0.1", "acc", 0.7, 1),
            row("1.0", "acc", 0.9, 0),
            row("1.0", FAILED, f64::NAN, 1),
        ];
        let (values, series) = summarize(&rows);
        assert_eq!(values, vec!["0.1", "1.0"]);
        assert_eq!(series.len(), 1);
        assert!((series[0].1[0] - 0.6).abs() < 1e-12);
        assert_eq!(series[0].1[1], 0.9);
        let svg = render_svg(Axis::PretrainFraction, &rows);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("polyline"));
    }
}
