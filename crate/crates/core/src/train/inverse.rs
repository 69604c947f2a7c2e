use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use crate::autodiff::{Bound, Tape, Var};
use crate::data::{sample_positive_pairs, EntityDataset, SequenceBatch, Span};
use crate::error::{Error, Result};
use crate::nn::{flatten_time_major, InverseModel, LayerNoise};
use crate::objectives::{
    contrastive_loss, free_energy, inverse_loss, penalized_inverse_loss, reconstruction_loss, total_loss, LossParts,
};

// RNG streams of one run, kept apart so that enabling weight noise does not
// shift the batch sequence.
const STREAM_DATA: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_VAL: u64 = 3;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Uncertainty penalty applied to the inverse loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub w: Vec<f64>,
    pub t_scale: f64,
}

/// Loss components averaged over the batches of one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Weighted task loss, before the KL term.
    pub total: f64,
    pub rec: f64,
    pub cont: f64,
    /// Inverse loss as trained (penalized during phase 2).
    pub inv: f64,
    /// Plain inverse loss.
    pub inv_base: f64,
    /// Weighted KL per batch as it enters the objective.
    pub kl: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &Self) {
        self.total += o.total;
        self.rec += o.rec;
        self.cont += o.cont;
        self.inv += o.inv;
        self.inv_base += o.inv_base;
        self.kl += o.kl;
    }

    fn scaled(mut self, c: f64) -> Self {
        for v in [&mut self.total, &mut self.rec, &mut self.cont, &mut self.inv, &mut self.inv_base, &mut self.kl] {
            *v *= c;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunHistory {
    /// Epoch 0 is the validation pass of the starting weights.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub diverged_at: Option<usize>,
}

impl RunHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epoch", "train_total", "train_rec", "train_cont", "train_inv", "train_inv_base", "train_kl", "val_total",
            "val_rec", "val_cont", "val_inv", "val_inv_base", "best", "wall_ms",
        ])?;
        for e in &self.epochs {
            let (t, v) = (&e.train, &e.val);
            let mut rec: Vec<String> = vec![e.epoch.to_string()];
            rec.extend([t.total, t.rec, t.cont, t.inv, t.inv_base, t.kl, v.total, v.rec, v.cont, v.inv, v.inv_base].map(|x| x.to_string()));
            rec.push((e.epoch == self.best_epoch).to_string());
            rec.push(e.wall_ms.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Result of one inverse-model fit: the best-validation weights.
#[derive(Debug, Clone)]
pub struct InverseRun {
    pub model: InverseModel,
    pub history: RunHistory,
    pub seed: u64,
}

/// Starting point and phase-specific settings of a fit.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub start: Option<InverseModel>,
    pub penalty: Option<Penalty>,
    /// Overrides `config.epochs`.
    pub epochs: Option<usize>,
}

struct StepVars {
    objective: Var,
    rec: Var,
    cont: Option<Var>,
    inv: Var,
    inv_base: Var,
    kl: Option<Var>,
}

/// Records every loss for one batch. `with_kl` adds the weighted complexity
/// cost to the objective.
fn record_batch(
    tape: &mut Tape,
    bound: &Bound,
    model: &InverseModel,
    batch: &SequenceBatch,
    noise: Option<&LayerNoise>,
    cfg: &TrainConfig,
    penalty: Option<&Penalty>,
    with_kl: bool,
) -> Result<StepVars> {
    let bm = model.bind(tape, bound)?;
    let window = batch.joined();
    let b = batch.len();
    let h = bm.encode(tape, &window, noise)?;
    let recon = bm.decode(tape, h, batch.window, noise)?;
    let target = tape.constant(flatten_time_major(&window)?);
    // both halves have equal length, so the joint mean is the pairwise average
    let rec = reconstruction_loss(tape, recon, target, recon, target)?;
    let cont = if cfg.lambda_cont > 0.0 {
        let h_a = tape.slice(h, 0, 0, b)?;
        let h_p = tape.slice(h, 0, b, 2 * b)?;
        Some(contrastive_loss(tape, h_a, h_p, cfg.tau, cfg.contrastive)?)
    } else {
        None
    };
    let z_hat = bm.static_head(tape, h, noise)?;
    let z = tape.constant(batch.joined_statics());
    let inv_base = inverse_loss(tape, z_hat, z)?;
    let inv = match penalty {
        Some(p) => penalized_inverse_loss(tape, z_hat, z, &p.w, p.t_scale)?,
        None => inv_base,
    };
    let cont_var = match cont {
        Some(c) => c,
        None => tape.constant(crate::autodiff::Tensor::scalar(0.0)),
    };
    let total = total_loss(tape, LossParts { rec, cont: cont_var, inv }, &cfg.loss_weights())?;
    let kl = match (with_kl, bm.kl(tape)?) {
        (true, Some(k)) => Some(tape.scale(k, cfg.kl_weight)?),
        _ => None,
    };
    let objective = free_energy(tape, kl, total, cfg.batches_per_epoch)?;
    Ok(StepVars {
        objective,
        rec,
        cont,
        inv,
        inv_base,
        kl,
    })
}

fn breakdown(tape: &Tape, v: &StepVars, cfg: &TrainConfig) -> LossBreakdown {
    let rec = tape.scalar(v.rec);
    let cont = v.cont.map(|c| tape.scalar(c)).unwrap_or(0.0);
    let inv = tape.scalar(v.inv);
    LossBreakdown {
        total: cfg.lambda_rec * rec + cfg.lambda_cont * cont + cfg.lambda_inv * inv,
        rec,
        cont,
        inv,
        inv_base: tape.scalar(v.inv_base),
        kl: v.kl.map(|k| tape.scalar(k) / cfg.batches_per_epoch as f64).unwrap_or(0.0),
    }
}

/// Mean-weight losses over fixed validation batches.
pub fn validation_losses(
    model: &InverseModel,
    batches: &[SequenceBatch],
    cfg: &TrainConfig,
    penalty: Option<&Penalty>,
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for batch in batches {
        let mut tape = Tape::new();
        let bound = tape.bind(&model.params);
        let v = record_batch(&mut tape, &bound, model, batch, None, cfg, penalty, false)?;
        acc.add(&breakdown(&tape, &v, cfg));
    }
    Ok(acc.scaled(1.0 / batches.len() as f64))
}

/// Fixed validation pairs for a seed.
pub fn validation_batches(cfg: &TrainConfig, ds: &EntityDataset, seed: u64) -> Result<Vec<SequenceBatch>> {
    let mut rng = stream(seed, STREAM_VAL);
    (0..cfg.val_batches)
        .map(|_| sample_positive_pairs(ds, Span::Val, cfg.window, cfg.batch_size, &mut rng))
        .collect()
}

/// Trains a fresh inverse model for `seed` in deterministic or
/// probabilistic mode.
pub fn train_inverse(cfg: &TrainConfig, ds: &EntityDataset, seed: u64) -> Result<InverseRun> {
    fit_inverse(cfg, ds, seed, FitOptions::default())
}

/// Minibatch training with early stopping on the mean-weight validation
/// loss. A non-finite loss stops training and keeps the best weights seen so
/// far; `history.diverged_at` records the epoch.
pub fn fit_inverse(cfg: &TrainConfig, ds: &EntityDataset, seed: u64, opts: FitOptions) -> Result<InverseRun> {
    cfg.validate()?;
    if ds.norm().is_none() {
        return Err(Error::Data("dataset must be split and normalized before training".into()));
    }
    let mut model = match opts.start {
        Some(m) => m,
        None => InverseModel::init(cfg.model_config(ds), &mut stream(seed, STREAM_INIT))?,
    };
    if model.config.n_static != ds.n_static() || model.config.channels != ds.channels() {
        return Err(Error::Contract("model does not match the dataset layout".into()));
    }
    let penalty = opts.penalty.as_ref();
    let epochs = opts.epochs.unwrap_or(cfg.epochs);
    let val = validation_batches(cfg, ds, seed)?;
    let mut data_rng = stream(seed, STREAM_DATA);
    let mut noise_rng = stream(seed, STREAM_NOISE);
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.grad_clip);

    let start_val = validation_losses(&model, &val, cfg, penalty)?;
    let mut history = RunHistory {
        epochs: vec![EpochRecord {
            epoch: 0,
            train: LossBreakdown::default(),
            val: start_val,
            wall_ms: 0,
        }],
        best_epoch: 0,
        diverged_at: None,
    };
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;

    'epochs: for epoch in 1..=epochs {
        let clock = Instant::now();
        let mut acc = LossBreakdown::default();
        for _ in 0..cfg.batches_per_epoch {
            let batch = sample_positive_pairs(ds, Span::Train, cfg.window, cfg.batch_size, &mut data_rng)?;
            let noise = model.sample_noise(&mut noise_rng);
            let mut tape = Tape::new();
            let bound = tape.bind(&model.params);
            let step = record_batch(&mut tape, &bound, &model, &batch, noise.as_ref(), cfg, penalty, true)
                .and_then(|v| {
                    let grads = tape.backward(v.objective)?;
                    Ok((breakdown(&tape, &v, cfg), grads))
                })
                .and_then(|(b, grads)| opt.step(&mut model.params, &grads).map(|_| b));
            match step {
                Ok(b) => acc.add(&b),
                Err(Error::NonFinite { op }) => {
                    log::warn!("seed {seed}: non-finite value in `{op}` at epoch {epoch}; keeping epoch {}", history.best_epoch);
                    history.diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let val_losses = match validation_losses(&model, &val, cfg, penalty) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                history.diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        };
        history.epochs.push(EpochRecord {
            epoch,
            train: acc.scaled(1.0 / cfg.batches_per_epoch as f64),
            val: val_losses,
            wall_ms: clock.elapsed().as_millis() as u64,
        });
        log::debug!("seed {seed} epoch {epoch}: val total {:.5}", val_losses.total);
        if val_losses.total < best_val {
            best_val = val_losses.total;
            best = model.clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(InverseRun {
        model: best,
        history,
        seed,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_and_normalize};
    use crate::train::config::Mode;

    pub(crate) fn tiny() -> (TrainConfig, EntityDataset) {
        let raw = generate_synthetic(6, 900, 1).unwrap();
        let ds = split_and_normalize(&raw, 540, 675).unwrap();
        let cfg = TrainConfig {
            mode: Mode::Deterministic,
            hidden: 6,
            static_hidden: 6,
            window: 40,
            batch_size: 4,
            epochs: 3,
            batches_per_epoch: 4,
            val_batches: 2,
            learning_rate: 1e-2,
            k_mc: 4,
            unc_window: 40,
            ..TrainConfig::default()
        };
        (cfg, ds)
    }

    #[test]
    fn reproducible_for_a_seed() {
        let (cfg, ds) = tiny();
        let a = train_inverse(&cfg, &ds, 3).unwrap();
        let b = train_inverse(&cfg, &ds, 3).unwrap();
        assert_eq!(a.model, b.model);
        let strip = |h: &RunHistory| h.epochs.iter().map(|e| (e.train, e.val)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        assert_ne!(a.model, train_inverse(&cfg, &ds, 4).unwrap().model);
    }

    #[test]
    fn best_epoch_has_lowest_validation_loss() {
        let (cfg, ds) = tiny();
        let run = train_inverse(&TrainConfig { epochs: 6, patience: 2, ..cfg.clone() }, &ds, 0).unwrap();
        let best = run.history.best().unwrap().val.total;
        assert!(run.history.epochs.iter().skip(1).all(|e| e.val.total >= best));
        let v = validation_losses(&run.model, &validation_batches(&cfg, &ds, 0).unwrap(), &cfg, None).unwrap();
        assert_eq!(v.total, best);
    }

    #[test]
    fn penalized_loss_dominates_plain_loss() {
        let (cfg, ds) = tiny();
        let opts = FitOptions {
            penalty: Some(Penalty { w: vec![0.1, 0.2, 0.3, 0.4], t_scale: 0.5 }),
            ..Default::default()
        };
        let run = fit_inverse(&cfg, &ds, 0, opts).unwrap();
        for e in run.history.epochs.iter().skip(1) {
            assert!(e.train.inv >= e.train.inv_base);
            assert!(e.val.inv >= e.val.inv_base);
        }
    }

    #[test]
    fn probabilistic_start_is_near_deterministic() {
        let (cfg, ds) = tiny();
        let det = train_inverse(&TrainConfig { epochs: 1, ..cfg.clone() }, &ds, 0).unwrap();
        let prob_cfg = TrainConfig { epochs: 1, mode: Mode::Probabilistic, kl_weight: 0.0, ..cfg };
        let prob = train_inverse(&prob_cfg, &ds, 0).unwrap();
        let (a, b) = (det.history.epochs[1].train.total, prob.history.epochs[1].train.total);
        assert!((a - b).abs() <= 0.05 * a, "{a} vs {b}");
    }

    #[test]
    fn unnormalized_data_is_rejected() {
        let (cfg, _) = tiny();
        let raw = generate_synthetic(3, 800, 0).unwrap();
        assert!(train_inverse(&cfg, &raw, 0).unwrap_err().is_validation());
    }
}
