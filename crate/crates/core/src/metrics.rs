//! Evaluation quantities: Monte-Carlo spread, uncertainty over time,
//! coverage, correlations, trade-off ratios and regression scores.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract, Error, Result};

/// Mean and population standard deviation over `k` stochastic passes.
///
/// Pass `s` draws from its own stream (`seed`, stream `s`), so the result
/// does not depend on how passes are scheduled across threads.
pub fn epistemic_uncertainty<F>(k: usize, seed: u64, sample: F) -> Result<(Tensor, Tensor)>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Tensor> + Sync,
{
    if k < 2 {
        return Err(contract("epistemic uncertainty needs at least two samples"));
    }
    let draws = (0..k)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            sample(&mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    mc_moments(&draws)
}

/// Elementwise mean and population std of equally shaped draws.
pub fn mc_moments(draws: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let first = draws.first().ok_or_else(|| contract("no samples"))?;
    let n = first.numel();
    let mut mean = vec![0.0; n];
    for d in draws {
        if d.shape() != first.shape() {
            return Err(Error::Shape {
                op: "mc_moments",
                left: first.shape().to_vec(),
                right: d.shape().to_vec(),
            });
        }
        for (m, v) in mean.iter_mut().zip(d.data()) {
            *m += v;
        }
    }
    let k = draws.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    let mut var = vec![0.0; n];
    for d in draws {
        for ((s, v), m) in var.iter_mut().zip(d.data()).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var.into_iter().map(|s| (s / k).sqrt()).collect();
    Ok((
        Tensor::new(first.shape().to_vec(), mean)?,
        Tensor::new(first.shape().to_vec(), std)?,
    ))
}

/// Spread of window-level predictions for one entity: `windows` is
/// `(T/W)×|z|`, the result has one value per feature.
pub fn unc_over_time(windows: &Tensor) -> Result<Vec<f64>> {
    if windows.ndim() != 2 || windows.shape()[0] == 0 {
        return Err(contract("at least one complete window is required"));
    }
    let (_, std) = mc_moments(&split_rows(windows))?;
    Ok(std.into_data())
}

fn split_rows(t: &Tensor) -> Vec<Tensor> {
    let m = t.shape()[1];
    t.data().chunks(m).map(|r| Tensor::vector(r.to_vec())).collect()
}

/// Fraction of cells whose truth falls in `[μ − mσ, μ + mσ]`.
pub fn coverage_rate(z: &Tensor, mean: &Tensor, sigma: &Tensor, multiplier: f64) -> Result<f64> {
    if !(multiplier > 0.0) {
        return Err(contract("coverage multiplier must be positive"));
    }
    for t in [mean, sigma] {
        if t.shape() != z.shape() {
            return Err(Error::Shape {
                op: "coverage_rate",
                left: z.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    if z.numel() == 0 {
        return Err(contract("coverage over no cells"));
    }
    if sigma.data().iter().any(|s| *s < 0.0) {
        return Err(contract("negative uncertainty"));
    }
    let hits = z
        .data()
        .iter()
        .zip(mean.data())
        .zip(sigma.data())
        .filter(|((z, m), s)| (*z - *m).abs() <= multiplier * **s)
        .count();
    Ok(hits as f64 / z.numel() as f64)
}

/// Pearson correlation; `None` when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn columns(t: &Tensor) -> Vec<Vec<f64>> {
    let m = t.shape()[1];
    (0..m).map(|j| t.data().iter().skip(j).step_by(m).copied().collect()).collect()
}

/// Per-feature correlation across entities of two `N×|z|` uncertainty tables.
pub fn unc_epistemic_correlation(unc_time: &Tensor, epistemic: &Tensor) -> Result<Vec<Option<f64>>> {
    if unc_time.shape() != epistemic.shape() || unc_time.ndim() != 2 {
        return Err(Error::Shape {
            op: "unc_epistemic_correlation",
            left: unc_time.shape().to_vec(),
            right: epistemic.shape().to_vec(),
        });
    }
    if unc_time.shape()[0] < 2 {
        return Err(contract("correlation needs at least two entities"));
    }
    Ok(columns(unc_time)
        .iter()
        .zip(columns(epistemic))
        .map(|(a, b)| pearson(a, &b))
        .collect())
}

/// Relative uncertainty drop per relative MSE rise, for one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Tradeoff {
    Ratio(f64),
    /// MSE did not increase.
    Dominating,
}

pub fn tradeoff_ratio(unc_base: f64, unc_ubl: f64, mse_base: f64, mse_ubl: f64) -> Result<Tradeoff> {
    if !(unc_base > 0.0) || !(mse_base > 0.0) {
        return Err(contract("trade-off needs positive baseline uncertainty and MSE"));
    }
    let du = (unc_base - unc_ubl) / unc_base;
    let dm = (mse_ubl - mse_base) / mse_base;
    if dm <= 0.0 {
        return Ok(Tradeoff::Dominating);
    }
    Ok(Tradeoff::Ratio(du / dm))
}

fn check_pair(pred: &[f64], obs: &[f64]) -> Result<()> {
    if pred.len() != obs.len() || obs.is_empty() {
        return Err(Error::Shape {
            op: "regression_metric",
            left: vec![pred.len()],
            right: vec![obs.len()],
        });
    }
    Ok(())
}

pub fn mse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    Ok(pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum::<f64>() / obs.len() as f64)
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    mse(pred, obs).map(f64::sqrt)
}

/// Nash–Sutcliffe efficiency; `None` for constant observations.
pub fn nse(pred: &[f64], obs: &[f64]) -> Result<Option<f64>> {
    check_pair(pred, obs)?;
    if obs.len() < 2 {
        return Err(contract("nse needs at least two observations"));
    }
    let m = obs.iter().sum::<f64>() / obs.len() as f64;
    let den: f64 = obs.iter().map(|o| (o - m).powi(2)).sum();
    if den <= 0.0 {
        return Ok(None);
    }
    let num: f64 = obs.iter().zip(pred).map(|(o, p)| (o - p).powi(2)).sum();
    Ok(Some(1.0 - num / den))
}

/// Mean of the defined values, `None` when none are.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-feature NSE across entities of `N×|z|` predictions.
pub fn feature_nse(pred: &Tensor, obs: &Tensor) -> Result<Vec<Option<f64>>> {
    if pred.shape() != obs.shape() || pred.ndim() != 2 {
        return Err(Error::Shape {
            op: "feature_nse",
            left: pred.shape().to_vec(),
            right: obs.shape().to_vec(),
        });
    }
    columns(pred).iter().zip(columns(obs)).map(|(p, o)| nse(p, &o)).collect()
}

/// Per-feature MSE across entities.
pub fn feature_mse(pred: &Tensor, obs: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != obs.shape() || pred.ndim() != 2 {
        return Err(Error::Shape {
            op: "feature_mse",
            left: pred.shape().to_vec(),
            right: obs.shape().to_vec(),
        });
    }
    columns(pred).iter().zip(columns(obs)).map(|(p, o)| mse(p, &o)).collect()
}

/// Per-feature mean of a non-negative `N×|z|` table.
pub fn feature_mean(t: &Tensor) -> Vec<f64> {
    columns(t).iter().map(|c| c.iter().sum::<f64>() / c.len().max(1) as f64).collect()
}

/// All uncertainty outputs of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub feature_names: Vec<String>,
    pub entity_ids: Vec<String>,
    pub k_samples: usize,
    pub window: usize,
    pub truth: Tensor,
    pub mean_pred: Tensor,
    pub epistemic: Tensor,
    pub unc_time: Tensor,
    pub coverage: BTreeMap<String, f64>,
    pub corr: Vec<Option<f64>>,
    pub mean_epistemic: f64,
}

impl UncertaintyReport {
    pub fn validate(&self) -> Result<()> {
        let shape = [self.entity_ids.len(), self.feature_names.len()];
        for t in [&self.truth, &self.mean_pred, &self.epistemic, &self.unc_time] {
            if t.shape() != shape {
                return Err(Error::Shape {
                    op: "uncertainty_report",
                    left: shape.to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        if self.epistemic.data().iter().chain(self.unc_time.data()).any(|v| *v < 0.0) {
            return Err(contract("negative uncertainty in report"));
        }
        if self.coverage.values().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(contract("coverage outside [0, 1]"));
        }
        Ok(())
    }

    /// One row per entity and feature.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["entity", "feature", "truth", "mean_pred", "epistemic", "unc_time"])?;
        let m = self.feature_names.len();
        for (i, e) in self.entity_ids.iter().enumerate() {
            for (j, f) in self.feature_names.iter().enumerate() {
                let k = i * m + j;
                w.write_record([
                    e.clone(),
                    f.clone(),
                    self.truth.data()[k].to_string(),
                    self.mean_pred.data()[k].to_string(),
                    self.epistemic.data()[k].to_string(),
                    self.unc_time.data()[k].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
