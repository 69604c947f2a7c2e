use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{EntityDataset, Span};
use crate::error::{Error, Result};
use crate::metrics::{
    coverage_rate, epistemic_uncertainty, feature_mean, feature_mse, feature_nse, mean_defined, unc_epistemic_correlation,
    unc_over_time, UncertaintyReport,
};
use crate::nn::{flatten_time_major, InverseModel};

/// Sequences per tape during evaluation.
const CHUNK: usize = 32;

/// Headline static-reconstruction numbers of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticMetrics {
    pub static_mse: f64,
    pub static_nse: Option<f64>,
    pub epistemic_mean: f64,
    pub coverage_1sd: f64,
    pub coverage_2sd: f64,
    pub unc_time_mean: f64,
    pub corr_per_feature: Vec<Option<f64>>,
    pub recon_mse: f64,
    pub feature_mse: Vec<f64>,
    pub feature_nse: Vec<Option<f64>>,
    pub feature_epistemic: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: UncertaintyReport,
    pub metrics: StaticMetrics,
}

fn entity_means(windows: &Tensor, n: usize, per: usize) -> Tensor {
    let m = windows.shape()[1];
    let mut out = vec![0.0; n * m];
    for (r, row) in windows.data().chunks(m).enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[(r / per) * m + j] += v / per as f64;
        }
    }
    Tensor::new(vec![n, m], out).expect("consistent shape")
}

/// Scores a model on the tiled `window`-step sequences of `span`. Point
/// estimates use the mean weights; the spread comes from `k` weight draws.
pub fn evaluate_inverse(
    model: &InverseModel,
    ds: &EntityDataset,
    span: Span,
    window: usize,
    k: usize,
    seed: u64,
) -> Result<Evaluation> {
    if model.config.n_static != ds.n_static() || model.config.channels != ds.channels() {
        return Err(Error::Contract("model does not match the dataset layout".into()));
    }
    let starts = ds.tiled_starts(span, window)?;
    let per = starts.len();
    let n = ds.n_entities();
    let items: Vec<(usize, usize)> = (0..n).flat_map(|e| starts.iter().map(move |s| (e, *s))).collect();
    let zc = ds.n_static();

    let mut states = Vec::new();
    let mut point = Vec::new();
    let mut sq_err = 0.0;
    let mut cells = 0usize;
    for chunk in items.chunks(CHUNK) {
        let w = ds.windows(chunk, window)?;
        let mut tape = Tape::new();
        let bound = tape.bind(&model.params);
        let bm = model.bind(&mut tape, &bound)?;
        let s = bm.encode_states(&mut tape, &w)?;
        let h = bm.encode_head(&mut tape, s, None)?;
        let z = bm.static_head(&mut tape, h, None)?;
        let recon = bm.decode(&mut tape, h, window, None)?;
        let target = flatten_time_major(&w)?;
        for (a, b) in tape.value(recon).data().iter().zip(target.data()) {
            sq_err += (a - b).powi(2);
        }
        cells += target.numel();
        states.extend_from_slice(tape.value(s).data());
        point.extend_from_slice(tape.value(z).data());
    }
    let window_preds = Tensor::new(vec![items.len(), zc], point)?;
    let point = entity_means(&window_preds, n, per);
    let mut unc_time = Vec::with_capacity(n * zc);
    for e in 0..n {
        unc_time.extend(unc_over_time(&window_preds.rows(e * per, (e + 1) * per)?)?);
    }
    let unc_time = Tensor::new(vec![n, zc], unc_time)?;

    let states = Tensor::new(vec![items.len(), model.config.embedding()], states)?;
    let stochastic = model.config.placement.affects_statics();
    let (mc_mean, epistemic) = if stochastic {
        epistemic_uncertainty(k, seed, |rng| {
            let noise = model.sample_noise(rng);
            let mut tape = Tape::new();
            let bound = tape.bind(&model.params);
            let bm = model.bind(&mut tape, &bound)?;
            let s = tape.constant(states.clone());
            let h = bm.encode_head(&mut tape, s, noise.as_ref())?;
            let z = bm.static_head(&mut tape, h, noise.as_ref())?;
            Ok(entity_means(tape.value(z), n, per))
        })?
    } else {
        if k < 2 {
            return Err(Error::Contract("epistemic uncertainty needs at least two samples".into()));
        }
        (point.clone(), Tensor::zeros(&[n, zc]))
    };

    let truth = ds.statics_tensor();
    let coverage_1sd = coverage_rate(&truth, &mc_mean, &epistemic, 1.0)?;
    let coverage_2sd = coverage_rate(&truth, &mc_mean, &epistemic, 2.0)?;
    let corr = if n >= 2 {
        unc_epistemic_correlation(&unc_time, &epistemic)?
    } else {
        vec![None; zc]
    };
    let f_mse = feature_mse(&point, &truth)?;
    let f_nse = feature_nse(&point, &truth)?;
    let f_epi = feature_mean(&epistemic);
    let metrics = StaticMetrics {
        static_mse: f_mse.iter().sum::<f64>() / zc as f64,
        static_nse: mean_defined(&f_nse),
        epistemic_mean: epistemic.sum() / epistemic.numel() as f64,
        coverage_1sd,
        coverage_2sd,
        unc_time_mean: unc_time.sum() / unc_time.numel() as f64,
        corr_per_feature: corr.clone(),
        recon_mse: sq_err / cells as f64,
        feature_mse: f_mse,
        feature_nse: f_nse,
        feature_epistemic: f_epi,
    };
    let report = UncertaintyReport {
        feature_names: ds.static_names.clone(),
        entity_ids: ds.entity_ids.clone(),
        k_samples: if stochastic { k } else { 0 },
        window,
        truth,
        mean_pred: mc_mean,
        epistemic,
        unc_time,
        coverage: BTreeMap::from([("1".to_string(), coverage_1sd), ("2".to_string(), coverage_2sd)]),
        corr,
        mean_epistemic: metrics.epistemic_mean,
    };
    report.validate()?;
    Ok(Evaluation { report, metrics })
}
