use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use super::evaluate::evaluate_inverse;
use super::inverse::stream;
use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::data::{EntityDataset, Span};
use crate::error::{Error, Result};
use crate::metrics::{mean_defined, nse};
use crate::nn::{GateActivation, InverseModel, LstmParams, LstmVars};

const LSTM: &str = "fwd";
const HEAD_W: &str = "fwd_out.w";
const HEAD_B: &str = "fwd_out.b";
/// Steps per tape when running a whole series.
const CHUNK: usize = 365;

/// Single-layer LSTM mapping `[drivers; statics]` at each step to the
/// response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardModel {
    pub inputs: usize,
    pub hidden: usize,
    pub gate: GateActivation,
    pub params: ParamSet,
}

impl ForwardModel {
    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, gate: GateActivation, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        LstmParams::init(inputs, hidden, rng).insert_into(LSTM, &mut params);
        params.insert(HEAD_W.into(), crate::nn::xavier(1, hidden, rng));
        params.insert(HEAD_B.into(), Tensor::zeros(&[1]));
        Self {
            inputs,
            hidden,
            gate,
            params,
        }
    }

    /// Runs `steps` (each `(batch, inputs)`) from the given state; returns
    /// per-step predictions `(batch, 1)` and the final state.
    fn unroll(
        &self,
        tape: &mut Tape,
        steps: &[Tensor],
        h0: Tensor,
        c0: Tensor,
    ) -> Result<(Vec<Var>, Var, Var)> {
        let bound = tape.bind(&self.params);
        let lstm = LstmVars::bind(tape, &bound, LSTM, self.gate)?;
        let (w, b) = (bound[HEAD_W], bound[HEAD_B]);
        let mut h = tape.constant(h0);
        let mut c = tape.constant(c0);
        let mut hs = Vec::with_capacity(steps.len());
        for x in steps {
            let xv = tape.constant(x.clone());
            (h, c) = lstm.step(tape, Some(xv), h, c)?;
            hs.push(h);
        }
        let outs = hs.into_iter().map(|h| tape.linear(h, w, b)).collect::<Result<Vec<_>>>()?;
        Ok((outs, h, c))
    }
}

/// Step inputs for a batch of `(entity, start)` windows.
fn step_inputs(ds: &EntityDataset, statics: &Tensor, items: &[(usize, usize)], len: usize) -> Result<Vec<Tensor>> {
    let dx = ds.channels() - 1;
    let zc = statics.shape()[1];
    let drivers: Vec<Vec<f64>> = items.iter().map(|&(e, s)| ds.drivers(e, s..s + len)).collect();
    (0..len)
        .map(|t| {
            let mut row = Vec::with_capacity(items.len() * (dx + zc));
            for (k, &(e, _)) in items.iter().enumerate() {
                row.extend_from_slice(&drivers[k][t * dx..(t + 1) * dx]);
                row.extend_from_slice(&statics.data()[e * zc..(e + 1) * zc]);
            }
            Tensor::matrix(items.len(), dx + zc, row)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRun {
    pub model: ForwardModel,
    pub seed: u64,
    /// Test-span predictions per entity, normalized units.
    pub predictions: Vec<Vec<f64>>,
    pub per_entity_nse: Vec<Option<f64>>,
    pub average_nse: Option<f64>,
    pub train_loss: Vec<f64>,
}

/// Trains the forward model on the train span using `statics` (`N×|z|`)
/// for every entity and scores it on the test span.
pub fn train_forward(cfg: &TrainConfig, ds: &EntityDataset, statics: &Tensor, seed: u64) -> Result<ForwardRun> {
    cfg.validate()?;
    if statics.shape() != [ds.n_entities(), ds.n_static()] {
        return Err(Error::Data(format!(
            "statics for the forward model must be {}x{}, got {:?}",
            ds.n_entities(),
            ds.n_static(),
            statics.shape()
        )));
    }
    let train = ds.span(Span::Train)?;
    let len = cfg.forward_window;
    if train.len() < len {
        return Err(Error::Data(format!("train span of {} steps is shorter than forward_window", train.len())));
    }
    let mut model = ForwardModel::init(ds.channels() - 1 + ds.n_static(), cfg.forward_hidden, cfg.gate, &mut stream(seed, 12));
    let mut rng = stream(seed, 10);
    let mut opt = Adam::new(cfg.forward_learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.grad_clip);
    let b = cfg.forward_batch_size;
    let kept = len - cfg.forward_warmup;
    let mut train_loss = Vec::with_capacity(cfg.forward_epochs);
    for _ in 0..cfg.forward_epochs {
        let mut acc = 0.0;
        for _ in 0..cfg.forward_batches_per_epoch {
            let items: Vec<(usize, usize)> = (0..b)
                .map(|_| (rng.random_range(0..ds.n_entities()), rng.random_range(train.start..=train.end - len)))
                .collect();
            let steps = step_inputs(ds, statics, &items, len)?;
            let mut target = Vec::with_capacity(kept * b);
            for t in cfg.forward_warmup..len {
                for &(e, s) in &items {
                    target.extend(ds.response(e, s + t..s + t + 1));
                }
            }
            let mut tape = Tape::new();
            let (outs, _, _) = model.unroll(&mut tape, &steps, Tensor::zeros(&[b, model.hidden]), Tensor::zeros(&[b, model.hidden]))?;
            let pred = tape.concat(&outs[cfg.forward_warmup..], 0)?;
            let target = tape.constant(Tensor::matrix(kept * b, 1, target)?);
            let d = tape.sub(pred, target)?;
            let sq = tape.square(d)?;
            let loss = tape.mean(sq)?;
            acc += tape.scalar(loss);
            let grads = tape.backward(loss)?;
            opt.step(&mut model.params, &grads)?;
        }
        train_loss.push(acc / cfg.forward_batches_per_epoch as f64);
    }
    let predictions = predict_test(&model, ds, statics)?;
    let per_entity_nse = per_entity_test_nse(ds, &predictions)?;
    Ok(ForwardRun {
        model,
        seed,
        average_nse: mean_defined(&per_entity_nse),
        predictions,
        per_entity_nse,
        train_loss,
    })
}

/// One forward run per seed, in parallel up to the configured thread cap.
pub fn train_forward_ensemble(cfg: &TrainConfig, ds: &EntityDataset, statics: &Tensor, seeds: &[u64]) -> Result<Vec<ForwardRun>> {
    super::thread_pool()?.install(|| seeds.par_iter().map(|&s| train_forward(cfg, ds, statics, s)).collect())
}

/// Per-entity static estimates of `model` averaged over the test span, `N×|z|` in
/// normalized units.
pub fn reconstructed_statics(cfg: &TrainConfig, model: &InverseModel, ds: &EntityDataset, seed: u64) -> Result<Tensor> {
    Ok(evaluate_inverse(model, ds, Span::Test, cfg.unc_window, cfg.k_mc, seed)?.report.mean_pred)
}

/// Runs every entity from the start of the validation span to the end of
/// the series and returns the test-span predictions.
pub fn predict_test(model: &ForwardModel, ds: &EntityDataset, statics: &Tensor) -> Result<Vec<Vec<f64>>> {
    let start = ds.span(Span::Val)?.start;
    let test = ds.span(Span::Test)?;
    let n = ds.n_entities();
    let mut h = Tensor::zeros(&[n, model.hidden]);
    let mut c = Tensor::zeros(&[n, model.hidden]);
    let mut preds = vec![Vec::with_capacity(test.len()); n];
    let mut t = start;
    while t < ds.steps() {
        let len = CHUNK.min(ds.steps() - t);
        let items: Vec<(usize, usize)> = (0..n).map(|e| (e, t)).collect();
        let steps = step_inputs(ds, statics, &items, len)?;
        let mut tape = Tape::new();
        let (outs, hv, cv) = model.unroll(&mut tape, &steps, h, c)?;
        for (k, o) in outs.iter().enumerate() {
            if t + k >= test.start {
                for (e, p) in tape.value(*o).data().iter().enumerate() {
                    preds[e].push(*p);
                }
            }
        }
        h = tape.value(hv).clone();
        c = tape.value(cv).clone();
        t += len;
    }
    Ok(preds)
}

pub fn per_entity_test_nse(ds: &EntityDataset, predictions: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    let test = ds.span(Span::Test)?;
    predictions
        .iter()
        .enumerate()
        .map(|(e, p)| nse(p, &ds.response(e, test.clone())))
        .collect()
}

/// Mean per-entity NSE of the seed-averaged predictions.
pub fn ensemble_nse(ds: &EntityDataset, runs: &[ForwardRun]) -> Result<Option<f64>> {
    let first = runs.first().ok_or_else(|| Error::Contract("ensemble of zero runs".into()))?;
    let k = runs.len() as f64;
    let avg: Vec<Vec<f64>> = (0..first.predictions.len())
        .map(|e| {
            (0..first.predictions[e].len())
                .map(|t| runs.iter().map(|r| r.predictions[e][t]).sum::<f64>() / k)
                .collect()
        })
        .collect();
    Ok(mean_defined(&per_entity_test_nse(ds, &avg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::inverse::tests::tiny;

    fn fcfg() -> (TrainConfig, EntityDataset) {
        let (cfg, ds) = tiny();
        let cfg = TrainConfig {
            forward_hidden: 6,
            forward_window: 60,
            forward_warmup: 20,
            forward_epochs: 2,
            forward_batches_per_epoch: 3,
            forward_batch_size: 4,
            ..cfg
        };
        (cfg, ds)
    }

    #[test]
    fn identical_seeds_ensemble_equals_average() {
        let (cfg, ds) = fcfg();
        let run = train_forward(&cfg, &ds, &ds.statics_tensor(), 0).unwrap();
        let ens = ensemble_nse(&ds, &[run.clone(), run.clone()]).unwrap().unwrap();
        assert!((ens - run.average_nse.unwrap()).abs() < 1e-12);
        assert_eq!(run.predictions[0].len(), ds.span(Span::Test).unwrap().len());
        assert_eq!(run, train_forward(&cfg, &ds, &ds.statics_tensor(), 0).unwrap());
    }

    #[test]
    fn chunked_prediction_matches_one_tape() {
        let (cfg, ds) = fcfg();
        let statics = ds.statics_tensor();
        let model = ForwardModel::init(ds.channels() - 1 + ds.n_static(), 5, cfg.gate, &mut stream(1, 0));
        let chunked = predict_test(&model, &ds, &statics).unwrap();
        let start = ds.span(Span::Val).unwrap().start;
        let test_start = ds.span(Span::Test).unwrap().start;
        let len = ds.steps() - start;
        let items: Vec<(usize, usize)> = (0..ds.n_entities()).map(|e| (e, start)).collect();
        let steps = step_inputs(&ds, &statics, &items, len).unwrap();
        let mut tape = Tape::new();
        let n = ds.n_entities();
        let (outs, _, _) = model.unroll(&mut tape, &steps, Tensor::zeros(&[n, 5]), Tensor::zeros(&[n, 5])).unwrap();
        for (k, o) in outs.iter().enumerate().skip(test_start - start) {
            for e in 0..n {
                assert_eq!(tape.value(*o).data()[e], chunked[e][k - (test_start - start)]);
            }
        }
    }

    #[test]
    fn ensemble_keeps_seed_order() {
        let (cfg, ds) = fcfg();
        let runs = train_forward_ensemble(&cfg, &ds, &ds.statics_tensor(), &[3, 1]).unwrap();
        assert_eq!(runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![3, 1]);
        assert_eq!(runs[1], train_forward(&cfg, &ds, &ds.statics_tensor(), 1).unwrap());
    }

    #[test]
    fn wrong_statics_shape_is_rejected() {
        let (cfg, ds) = fcfg();
        assert!(train_forward(&cfg, &ds, &Tensor::zeros(&[2, 2]), 0).unwrap_err().is_validation());
    }
}
