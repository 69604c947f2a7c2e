use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EntityDataset;
use crate::error::{Error, Result};
use crate::nn::{GateActivation, ModelConfig, Placement};
use crate::objectives::{ContrastiveForm, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Deterministic,
    #[default]
    Probabilistic,
    /// Fine-tuning with the uncertainty penalty; needs `ubl_source` and
    /// `ubl_penalty`.
    UblPhase2,
}

/// Every tunable of the pipeline. Loaded from a flat TOML file in which any
/// key may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub placement: Placement,
    pub hidden: usize,
    pub static_hidden: usize,
    pub gate: GateActivation,
    pub window: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub val_batches: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub k_mc: usize,
    pub unc_window: usize,
    pub lambda_rec: f64,
    pub lambda_cont: f64,
    pub lambda_inv: f64,
    pub tau: f64,
    pub t_scale: f64,
    pub contrastive: ContrastiveForm,
    pub prior_std: f64,
    pub rho_init: f64,
    pub kl_weight: f64,
    pub ubl_epochs: usize,
    pub ubl_temperatures: Vec<f64>,
    pub ubl_source: Option<String>,
    pub ubl_penalty: Option<String>,
    pub forward_hidden: usize,
    pub forward_window: usize,
    pub forward_warmup: usize,
    pub forward_epochs: usize,
    pub forward_batches_per_epoch: usize,
    pub forward_batch_size: usize,
    pub forward_learning_rate: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub noise_fractions: Vec<f64>,
    pub noise_stds: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Probabilistic,
            placement: Placement::Encoder,
            hidden: 64,
            static_hidden: 32,
            gate: GateActivation::Tanh,
            window: 365,
            batch_size: 16,
            epochs: 50,
            batches_per_epoch: 50,
            val_batches: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            patience: 10,
            seeds: vec![0, 1, 2, 3, 4],
            k_mc: 30,
            unc_window: 365,
            lambda_rec: 1.0,
            lambda_cont: 1.0,
            lambda_inv: 1.0,
            tau: 0.1,
            t_scale: 1.0,
            contrastive: ContrastiveForm::NtXent,
            prior_std: 1.0,
            rho_init: -5.0,
            kl_weight: 1e-3,
            ubl_epochs: 10,
            ubl_temperatures: vec![0.5, 1.0, 2.0, 5.0, 10.0],
            ubl_source: None,
            ubl_penalty: None,
            forward_hidden: 32,
            forward_window: 365,
            forward_warmup: 90,
            forward_epochs: 20,
            forward_batches_per_epoch: 20,
            forward_batch_size: 16,
            forward_learning_rate: 5e-3,
            train_frac: 0.6,
            val_frac: 0.15,
            noise_fractions: vec![0.01, 0.05, 0.2],
            noise_stds: vec![1.0, 5.0, 10.0],
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_rec: self.lambda_rec,
            lambda_cont: self.lambda_cont,
            lambda_inv: self.lambda_inv,
            tau: self.tau,
            t_scale: self.t_scale,
        }
    }

    /// Placement actually used: deterministic mode ignores `placement`.
    pub fn effective_placement(&self) -> Placement {
        match self.mode {
            Mode::Deterministic => Placement::Deterministic,
            _ => self.placement,
        }
    }

    pub fn model_config(&self, ds: &EntityDataset) -> ModelConfig {
        ModelConfig {
            channels: ds.channels(),
            hidden: self.hidden,
            static_hidden: self.static_hidden,
            n_static: ds.n_static(),
            placement: self.effective_placement(),
            gate: self.gate,
            prior_std: self.prior_std,
            rho_init: self.rho_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.loss_weights().validate()?;
        let positive = [
            ("hidden", self.hidden),
            ("static_hidden", self.static_hidden),
            ("window", self.window),
            ("batch_size", self.batch_size),
            ("batches_per_epoch", self.batches_per_epoch),
            ("val_batches", self.val_batches),
            ("unc_window", self.unc_window),
            ("forward_hidden", self.forward_hidden),
            ("forward_batches_per_epoch", self.forward_batches_per_epoch),
            ("forward_batch_size", self.forward_batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(&format!("{name} must be at least 1"));
        }
        if self.batch_size < 2 && self.lambda_cont > 0.0 {
            return bad("the contrastive loss needs batch_size >= 2");
        }
        if self.k_mc < 2 {
            return bad("k_mc must be at least 2");
        }
        if self.forward_window <= self.forward_warmup {
            return bad("forward_window must exceed forward_warmup");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        let rates = [self.learning_rate, self.forward_learning_rate, self.adam_eps, self.grad_clip, self.prior_std];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad("learning rates, adam_eps, grad_clip and prior_std must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) || !self.rho_init.is_finite() {
            return bad("kl_weight must be non-negative and rho_init finite");
        }
        if self.ubl_temperatures.is_empty() || self.ubl_temperatures.iter().any(|t| !(*t > 0.0)) {
            return bad("ubl_temperatures must be a non-empty list of positive values");
        }
        if self.noise_fractions.iter().any(|p| !(0.0..=1.0).contains(p)) || self.noise_stds.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise fractions must lie in [0, 1] and stds must be non-negative");
        }
        if !(self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac < 1.0) {
            return bad("train_frac and val_frac must be positive and sum below 1");
        }
        match self.mode {
            Mode::Deterministic => {}
            Mode::Probabilistic if self.placement == Placement::Deterministic => {
                return bad("probabilistic mode needs a probabilistic placement");
            }
            Mode::Probabilistic => {}
            Mode::UblPhase2 => {
                if self.ubl_source.is_none() || self.ubl_penalty.is_none() {
                    return bad("ubl_phase2 mode needs ubl_source and ubl_penalty");
                }
            }
        }
        Ok(())
    }
}
