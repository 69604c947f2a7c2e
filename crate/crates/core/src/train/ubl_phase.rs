use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::evaluate::evaluate_inverse;
use super::inverse::{fit_inverse, FitOptions, InverseRun, Penalty, RunHistory};
use crate::data::{EntityDataset, Span};
use crate::error::{Error, Result};
use crate::nn::InverseModel;
use crate::ubl::{penalty_from_uncertainty, tune_temperature, PenaltyWeights, UncertaintyMatrix};

/// Penalty artifact written next to a phase-2 checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyArtifact {
    pub feature_names: Vec<String>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub lambda1: f64,
    pub t_scale: f64,
    /// Validation inverse loss per candidate temperature.
    pub candidates: Vec<(f64, f64)>,
}

impl PenaltyArtifact {
    pub fn weights(&self) -> PenaltyWeights {
        PenaltyWeights {
            w: self.w.clone(),
            v: self.v.clone(),
            lambda1: self.lambda1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UblRun {
    pub model: InverseModel,
    pub history: RunHistory,
    pub penalty: PenaltyArtifact,
    pub seed: u64,
}

/// Penalty weights from the epistemic spread of `base` on the validation span.
pub fn validation_penalty(cfg: &TrainConfig, base: &InverseModel, ds: &EntityDataset, seed: u64) -> Result<PenaltyWeights> {
    let ev = evaluate_inverse(base, ds, Span::Val, cfg.unc_window, cfg.k_mc, seed)?;
    let u = UncertaintyMatrix::new(ev.report.epistemic, ds.static_names.clone())?;
    penalty_from_uncertainty(&u)
}

/// Fine-tunes a probabilistic model with the uncertainty penalty, once per
/// candidate temperature, and keeps the candidate with the lowest
/// validation inverse loss.
pub fn run_ubl(cfg: &TrainConfig, base: &InverseModel, ds: &EntityDataset, seed: u64) -> Result<UblRun> {
    if !base.config.placement.is_probabilistic() {
        return Err(Error::Config("uncertainty-based fine-tuning needs a probabilistic base checkpoint".into()));
    }
    let weights = validation_penalty(cfg, base, ds, seed)?;
    let choice = tune_temperature(&cfg.ubl_temperatures, |t| {
        let run = finetune(cfg, base, ds, seed, &weights.w, t)?;
        let loss = run.history.best().map(|e| e.val.inv_base).unwrap_or(f64::INFINITY);
        Ok((loss, run))
    })?;
    let InverseRun { model, history, .. } = choice.model;
    Ok(UblRun {
        model,
        history,
        penalty: PenaltyArtifact {
            feature_names: ds.static_names.clone(),
            w: weights.w,
            v: weights.v,
            lambda1: weights.lambda1,
            t_scale: choice.t_scale,
            candidates: choice.losses,
        },
        seed,
    })
}

/// Phase-2 training from `base` with fixed penalty weights.
pub fn finetune(cfg: &TrainConfig, base: &InverseModel, ds: &EntityDataset, seed: u64, w: &[f64], t_scale: f64) -> Result<InverseRun> {
    fit_inverse(
        cfg,
        ds,
        seed,
        FitOptions {
            start: Some(base.clone()),
            penalty: Some(Penalty { w: w.to_vec(), t_scale }),
            epochs: Some(cfg.ubl_epochs),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::config::Mode;
    use crate::train::inverse::{tests::tiny, train_inverse};

    #[test]
    fn deterministic_base_is_rejected() {
        let (cfg, ds) = tiny();
        let base = train_inverse(&TrainConfig { epochs: 1, ..cfg.clone() }, &ds, 0).unwrap();
        assert!(run_ubl(&cfg, &base.model, &ds, 0).unwrap_err().is_validation());
    }

    #[test]
    fn produces_simplex_weights_and_a_candidate() {
        let (cfg, ds) = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            ubl_epochs: 1,
            mode: Mode::Probabilistic,
            rho_init: -3.0,
            ubl_temperatures: vec![1.0, 5.0],
            ..cfg
        };
        let base = train_inverse(&cfg, &ds, 0).unwrap();
        let run = run_ubl(&cfg, &base.model, &ds, 0).unwrap();
        assert!((run.penalty.w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(cfg.ubl_temperatures.contains(&run.penalty.t_scale));
        assert_eq!(run.penalty.candidates.len(), 2);
        assert_ne!(run.model, base.model);
    }
}
