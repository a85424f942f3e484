//! Success rates, 8-bit distortion measures and the CSV/text report surface.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::whitebox::AttackResult;

/// Fraction of attempts whose adversarial image is classified as its target.
pub fn success_rate(results: &[AttackResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Domain("success rate of zero attempts".into()));
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// `255 · max_i |x'_i − x_i|`.
pub fn max_perturbation_8bit(x: &Tensor, adversarial: &Tensor) -> Result<f64> {
    Ok(255.0 * x.max_abs_diff(adversarial)?)
}

/// `255 · ‖x' − x‖₂`.
pub fn l2_distortion_8bit(x: &Tensor, adversarial: &Tensor) -> Result<f64> {
    x.expect_same_shape(adversarial)?;
    let sq: f64 = x
        .data()
        .iter()
        .zip(adversarial.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(255.0 * sq.sqrt())
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// One aggregated cell of an experiment (one grid point on one model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub temperature: f64,
    pub attack: String,
    pub epsilon_8bit: f64,
    pub sigma: f64,
    pub cells: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_max_pert_8bit: f64,
    pub mean_l2_8bit: f64,
    pub mean_iterations: f64,
    /// Median optimizer steps over successful cells; empty when none succeeded.
    pub median_iterations_success: Option<f64>,
    pub mean_queries: f64,
    /// Wall-clock seconds per cell. Left empty in reproducible runs.
    pub mean_wall_s: Option<f64>,
    pub median_wall_s: Option<f64>,
    pub seed: u64,
}

/// Identifies the model/attack a group of results came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RowLabel {
    pub model_id: String,
    pub temperature: f64,
    pub attack: String,
    pub epsilon_8bit: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl ReportRow {
    pub fn summarize(label: RowLabel, results: &[AttackResult], with_timing: bool) -> Result<Self> {
        let rate = success_rate(results)?;
        let collect = |f: fn(&AttackResult) -> f64| results.iter().map(f).collect::<Vec<_>>();
        let wall = collect(|r| r.wall_time_s);
        let success_iters: Vec<f64> = results
            .iter()
            .filter(|r| r.success)
            .map(|r| r.iterations_used as f64)
            .collect();
        Ok(ReportRow {
            model_id: label.model_id,
            temperature: label.temperature,
            attack: label.attack,
            epsilon_8bit: label.epsilon_8bit,
            sigma: label.sigma,
            cells: results.len(),
            successes: results.iter().filter(|r| r.success).count(),
            success_rate: rate,
            mean_max_pert_8bit: mean(&collect(|r| r.max_pert_8bit)).unwrap(),
            mean_l2_8bit: mean(&collect(|r| r.l2_distortion_8bit)).unwrap(),
            mean_iterations: mean(&collect(|r| r.iterations_used as f64)).unwrap(),
            median_iterations_success: median(&success_iters),
            mean_queries: mean(&collect(|r| r.queries as f64)).unwrap(),
            mean_wall_s: if with_timing { mean(&wall) } else { None },
            median_wall_s: if with_timing { median(&wall) } else { None },
            seed: label.seed,
        })
    }
}

pub const AVERAGING_NOTE: &str =
    "means are taken over all attempted (image, target) cells, successful or not; distortions in 8-bit units";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        Ok(ExperimentReport { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Fixed-width text rendering, one line per row.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# {AVERAGING_NOTE}").unwrap();
        writeln!(
            out,
            "{:<18} {:>7} {:<8} {:>6} {:>5} {:>6} {:>8} {:>9} {:>9} {:>8} {:>9} {:>10}",
            "model", "T", "attack", "eps", "sigma", "cells", "success", "max_pert", "l2", "iters", "med_iter", "med_wall_s"
        )
        .unwrap();
        for r in &self.rows {
            let opt = |v: Option<f64>, prec: usize| {
                v.map(|v| format!("{v:.prec$}")).unwrap_or_else(|| "-".into())
            };
            writeln!(
                out,
                "{:<18} {:>7} {:<8} {:>6} {:>5} {:>6} {:>8.3} {:>9.2} {:>9.2} {:>8.1} {:>9} {:>10}",
                r.model_id,
                r.temperature,
                r.attack,
                r.epsilon_8bit,
                r.sigma,
                r.cells,
                r.success_rate,
                r.mean_max_pert_8bit,
                r.mean_l2_8bit,
                r.mean_iterations,
                opt(r.median_iterations_success, 1),
                opt(r.median_wall_s, 4),
            )
            .unwrap();
        }
        out
    }
}

/// Targeted success of adversarials crafted at each source temperature,
/// replayed against each target temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<f64>,
    pub targets: Vec<f64>,
    /// `rates[s][t]`
    pub rates: Vec<Vec<f64>>,
    pub cells: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransferRow {
    source_temperature: f64,
    target_temperature: f64,
    cells: usize,
    success_rate: f64,
}

impl TransferMatrix {
    pub fn rate(&self, source: f64, target: f64) -> Option<f64> {
        let s = self.sources.iter().position(|&t| t == source)?;
        let t = self.targets.iter().position(|&t| t == target)?;
        Some(self.rates[s][t])
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (s, row) in self.sources.iter().zip(&self.rates) {
            for (t, &rate) in self.targets.iter().zip(row) {
                w.serialize(TransferRow {
                    source_temperature: *s,
                    target_temperature: *t,
                    cells: self.cells,
                    success_rate: rate,
                })?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<TransferRow>, _>>()?;
        let mut sources: Vec<f64> = Vec::new();
        let mut targets: Vec<f64> = Vec::new();
        for row in &rows {
            if !sources.contains(&row.source_temperature) {
                sources.push(row.source_temperature);
            }
            if !targets.contains(&row.target_temperature) {
                targets.push(row.target_temperature);
            }
        }
        let mut rates = vec![vec![f64::NAN; targets.len()]; sources.len()];
        for row in &rows {
            let s = sources.iter().position(|&v| v == row.source_temperature).unwrap();
            let t = targets.iter().position(|&v| v == row.target_temperature).unwrap();
            rates[s][t] = row.success_rate;
        }
        Ok(TransferMatrix {
            sources,
            targets,
            rates,
            cells: rows.first().map_or(0, |r| r.cells),
        })
    }

    /// Source temperatures down the side, target temperatures across the top.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# rows: crafted at T; columns: evaluated at T; {} cells per row", self.cells).unwrap();
        write!(out, "{:>8}", "").unwrap();
        for t in &self.targets {
            write!(out, " {:>7}", format!("T={t}")).unwrap();
        }
        out.push('\n');
        for (s, row) in self.sources.iter().zip(&self.rates) {
            write!(out, "{:>8}", format!("T={s}")).unwrap();
            for r in row {
                write!(out, " {r:>7.3}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}
