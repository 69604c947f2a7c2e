use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::evaluate::evaluate_inverse;
use super::inverse::train_inverse;
use crate::data::{inject_noise, EntityDataset, NoiseSpec, Span};
use crate::error::{Error, Result};

/// Clean-test scores of a model trained with one noise setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub fraction: f64,
    pub std: f64,
    pub seed: u64,
    pub recon_mse: f64,
    pub static_mse: f64,
    pub epistemic_mean: f64,
    pub static_nse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub clean: SweepCell,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, fraction: f64, std: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.fraction == fraction && c.std == std)
    }
}

/// Trains on a copy of `ds` with noise `(fraction, std)` injected into the
/// training span, then scores on the clean test span.
pub fn sweep_cell(cfg: &TrainConfig, ds: &EntityDataset, fraction: f64, std: f64, seed: u64) -> Result<SweepCell> {
    let spec = NoiseSpec { fraction, std, seed };
    let (noisy, _) = inject_noise(ds, &spec, cfg.window)?;
    let run = train_inverse(cfg, &noisy, seed)?;
    let ev = evaluate_inverse(&run.model, ds, Span::Test, cfg.unc_window, cfg.k_mc, seed)?;
    Ok(SweepCell {
        fraction,
        std,
        seed,
        recon_mse: ev.metrics.recon_mse,
        static_mse: ev.metrics.static_mse,
        epistemic_mean: ev.metrics.epistemic_mean,
        static_nse: ev.metrics.static_nse,
    })
}

/// One training run per grid cell plus a clean baseline. Cells run in
/// parallel up to the configured thread cap.
pub fn robustness_sweep(cfg: &TrainConfig, ds: &EntityDataset, fractions: &[f64], stds: &[f64], seed: u64) -> Result<SweepResult> {
    if fractions.is_empty() || stds.is_empty() {
        return Err(Error::Config("sweep grids must not be empty".into()));
    }
    let mut grid = vec![(0.0, 0.0)];
    grid.extend(fractions.iter().flat_map(|p| stds.iter().map(move |s| (*p, *s))));
    let pool = super::thread_pool()?;
    let mut cells = pool.install(|| {
        grid.par_iter()
            .map(|&(p, s)| sweep_cell(cfg, ds, p, s, seed))
            .collect::<Result<Vec<_>>>()
    })?;
    let clean = cells.remove(0);
    Ok(SweepResult { clean, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::inverse::tests::tiny;

    #[test]
    fn zero_fraction_matches_clean_run() {
        let (cfg, ds) = tiny();
        let cfg = TrainConfig { epochs: 1, ..cfg };
        let res = robustness_sweep(&cfg, &ds, &[0.0, 0.5], &[3.0], 0).unwrap();
        assert_eq!(res.cells.len(), 2);
        let zero = res.cell(0.0, 3.0).unwrap();
        assert_eq!(zero.static_mse, res.clean.static_mse);
        assert_eq!(zero.recon_mse, res.clean.recon_mse);
        assert_ne!(res.cell(0.5, 3.0).unwrap().static_mse, res.clean.static_mse);
        assert!(robustness_sweep(&cfg, &ds, &[], &[1.0], 0).is_err());
    }
}
