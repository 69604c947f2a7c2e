//! Training pipelines: inverse model, uncertainty-penalized fine-tuning,
//! forward streamflow model and the robustness sweep.

mod adam;
mod checkpoint;
mod config;
mod evaluate;
mod forward;
mod inverse;
mod sweep;
mod ubl_phase;

pub use adam::Adam;
pub use checkpoint::{load_json, save_json, ForwardCheckpoint, InverseCheckpoint};
pub use config::{Mode, TrainConfig};
pub use evaluate::{evaluate_inverse, Evaluation, StaticMetrics};
pub use forward::{
    ensemble_nse, predict_test, reconstructed_statics, train_forward, train_forward_ensemble, ForwardModel, ForwardRun,
};
pub use inverse::{
    fit_inverse, train_inverse, validation_batches, validation_losses, EpochRecord, FitOptions, InverseRun, LossBreakdown,
    Penalty, RunHistory,
};
pub use sweep::{robustness_sweep, sweep_cell, SweepCell, SweepResult};
pub use ubl_phase::{finetune, run_ubl, validation_penalty, PenaltyArtifact, UblRun};

use crate::error::{Error, Result};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "INVERSE_BASIN_THREADS";

/// Worker pool sized by `INVERSE_BASIN_THREADS`, or the core count.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}
