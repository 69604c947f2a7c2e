//! Entity datasets: per-entity driver/response series plus static
//! attributes, temporal splits, normalization, positive-pair sampling and
//! training-noise injection.

mod io;
mod synthetic;

use std::ops::Range;

use chrono::NaiveDate;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use io::{load_csv, write_csv};
pub use synthetic::{generate_synthetic, seasonal_drivers, simulate_basin, SYNTHETIC_STATICS};

/// Day boundaries: train `[0, train_end)`, val `[train_end, val_end)`,
/// test `[val_end, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Span {
    Train,
    Val,
    Test,
}

/// Z-score statistics. Channel stats come from the train span of every
/// entity, static stats from all entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityDataset {
    pub entity_ids: Vec<String>,
    pub driver_names: Vec<String>,
    pub static_names: Vec<String>,
    pub start_date: NaiveDate,
    steps: usize,
    /// Per entity, row-major `T×C`; the response is the last channel.
    series: Vec<Vec<f64>>,
    /// Per entity, `|z|` values.
    statics: Vec<Vec<f64>>,
    split: Option<Split>,
    norm: Option<NormStats>,
}

impl EntityDataset {
    pub fn new(
        entity_ids: Vec<String>,
        driver_names: Vec<String>,
        static_names: Vec<String>,
        start_date: NaiveDate,
        series: Vec<Vec<f64>>,
        statics: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = entity_ids.len();
        if n == 0 || series.len() != n || statics.len() != n {
            return Err(Error::Data(format!(
                "inconsistent entity counts: {n} ids, {} series, {} static rows",
                series.len(),
                statics.len()
            )));
        }
        let c = driver_names.len() + 1;
        let steps = series[0].len() / c;
        if steps == 0 {
            return Err(Error::Data("series are empty".into()));
        }
        for (id, (s, z)) in entity_ids.iter().zip(series.iter().zip(&statics)) {
            if s.len() != steps * c {
                return Err(Error::Data(format!("entity `{id}` has a different series length")));
            }
            if z.len() != static_names.len() {
                return Err(Error::Data(format!("entity `{id}` has {} statics, expected {}", z.len(), static_names.len())));
            }
            if s.iter().chain(z).any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("entity `{id}` has non-finite values")));
            }
        }
        Ok(Self {
            entity_ids,
            driver_names,
            static_names,
            start_date,
            steps,
            series,
            statics,
            split: None,
            norm: None,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Drivers plus the response.
    pub fn channels(&self) -> usize {
        self.driver_names.len() + 1
    }

    pub fn n_static(&self) -> usize {
        self.static_names.len()
    }

    pub fn channel_names(&self) -> Vec<String> {
        let mut names = self.driver_names.clone();
        names.push("streamflow".into());
        names
    }

    pub fn split(&self) -> Option<Split> {
        self.split
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn series(&self, entity: usize) -> &[f64] {
        &self.series[entity]
    }

    pub fn statics(&self, entity: usize) -> &[f64] {
        &self.statics[entity]
    }

    /// All statics as `N×|z|`.
    pub fn statics_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_entities(), self.n_static()], self.statics.concat()).expect("validated shape")
    }

    pub fn span(&self, span: Span) -> Result<Range<usize>> {
        let s = self.split.ok_or_else(|| Error::Data("dataset has not been split".into()))?;
        Ok(match span {
            Span::Train => 0..s.train_end,
            Span::Val => s.train_end..s.val_end,
            Span::Test => s.val_end..self.steps,
        })
    }

    /// Response series of one entity over `range`.
    pub fn response(&self, entity: usize, range: Range<usize>) -> Vec<f64> {
        let c = self.channels();
        range.map(|t| self.series[entity][t * c + c - 1]).collect()
    }

    /// Drivers of one entity over `range`, row-major `len×Dx`.
    pub fn drivers(&self, entity: usize, range: Range<usize>) -> Vec<f64> {
        let c = self.channels();
        range.flat_map(|t| self.series[entity][t * c..t * c + c - 1].iter().copied()).collect()
    }

    /// Time-major `[len, B, C]` window tensor for `(entity, start)` items.
    pub fn windows(&self, items: &[(usize, usize)], len: usize) -> Result<Tensor> {
        let c = self.channels();
        let b = items.len();
        let mut data = vec![0.0; len * b * c];
        for (k, &(e, start)) in items.iter().enumerate() {
            if e >= self.n_entities() || start + len > self.steps {
                return Err(Error::Data(format!("window ({e}, {start}..{}) out of range", start + len)));
            }
            let src = &self.series[e][start * c..(start + len) * c];
            for t in 0..len {
                data[(t * b + k) * c..(t * b + k + 1) * c].copy_from_slice(&src[t * c..(t + 1) * c]);
            }
        }
        Tensor::new(vec![len, b, c], data)
    }

    /// Statics of the given entities as `B×|z|`.
    pub fn statics_of(&self, entities: &[usize]) -> Tensor {
        let data = entities.iter().flat_map(|e| self.statics[*e].iter().copied()).collect();
        Tensor::new(vec![entities.len(), self.n_static()], data).expect("validated shape")
    }

    /// Starts of the complete, non-overlapping `len` windows inside `span`.
    pub fn tiled_starts(&self, span: Span, len: usize) -> Result<Vec<usize>> {
        let r = self.span(span)?;
        if len == 0 || r.len() < len {
            return Err(Error::Data(format!("span {span:?} of {} steps holds no {len}-step window", r.len())));
        }
        Ok((0..r.len() / len).map(|k| r.start + k * len).collect())
    }

    /// Maps normalized statics back to raw units.
    pub fn denormalize_statics(&self, z: &Tensor) -> Tensor {
        match &self.norm {
            None => z.clone(),
            Some(n) => {
                let m = n.static_mean.len();
                let data = z
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * n.static_std[k % m] + n.static_mean[k % m])
                    .collect();
                Tensor::new(z.shape().to_vec(), data).expect("same shape")
            }
        }
    }

    fn raw_values(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        match &self.norm {
            None => (self.series.clone(), self.statics.clone()),
            Some(n) => {
                let c = self.channels();
                let series = self
                    .series
                    .iter()
                    .map(|s| s.iter().enumerate().map(|(k, v)| v * n.channel_std[k % c] + n.channel_mean[k % c]).collect())
                    .collect();
                let statics = self
                    .statics
                    .iter()
                    .map(|z| z.iter().enumerate().map(|(j, v)| v * n.static_std[j] + n.static_mean[j]).collect())
                    .collect();
                (series, statics)
            }
        }
    }
}

/// Boundaries from fractions of `T`, e.g. 0.6 / 0.15 for a 60/15/25 split.
pub fn split_by_fraction(steps: usize, train_frac: f64, val_frac: f64) -> Result<Split> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::Config("split fractions must be positive and sum below 1".into()));
    }
    let train_end = (steps as f64 * train_frac).round() as usize;
    let val_end = (steps as f64 * (train_frac + val_frac)).round() as usize;
    Ok(Split { train_end, val_end })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Splits the time axis and z-scores every channel with train-span
/// statistics and every static with statistics across entities.
pub fn split_and_normalize(ds: &EntityDataset, train_end: usize, val_end: usize) -> Result<EntityDataset> {
    if !(0 < train_end && train_end < val_end && val_end < ds.steps) {
        return Err(Error::Data(format!(
            "invalid split {train_end}/{val_end} for {} steps",
            ds.steps
        )));
    }
    let (series, statics) = ds.raw_values();
    let c = ds.channels();
    let names = ds.channel_names();
    let mut channel_mean = Vec::with_capacity(c);
    let mut channel_std = Vec::with_capacity(c);
    for ch in 0..c {
        let vals = series.iter().flat_map(|s| s[..train_end * c].iter().skip(ch).step_by(c).copied());
        let (m, s) = mean_std(vals);
        if !(s > 1e-12) {
            return Err(Error::Data(format!("channel `{}` has zero variance on the train span", names[ch])));
        }
        channel_mean.push(m);
        channel_std.push(s);
    }
    let zc = ds.n_static();
    let mut static_mean = Vec::with_capacity(zc);
    let mut static_std = Vec::with_capacity(zc);
    for j in 0..zc {
        let (m, s) = mean_std(statics.iter().map(|z| z[j]));
        if !(s > 1e-12) {
            return Err(Error::Data(format!("static `{}` has zero variance across entities", ds.static_names[j])));
        }
        static_mean.push(m);
        static_std.push(s);
    }
    let series = series
        .iter()
        .map(|s| s.iter().enumerate().map(|(k, v)| (v - channel_mean[k % c]) / channel_std[k % c]).collect())
        .collect();
    let statics = statics
        .iter()
        .map(|z| z.iter().enumerate().map(|(j, v)| (v - static_mean[j]) / static_std[j]).collect())
        .collect();
    Ok(EntityDataset {
        series,
        statics,
        split: Some(Split { train_end, val_end }),
        norm: Some(NormStats {
            channel_mean,
            channel_std,
            static_mean,
            static_std,
        }),
        ..ds.clone()
    })
}

/// Anchor/positive windows, time-major `[L, B, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub statics: Tensor,
    pub entities: Vec<usize>,
    pub anchor_starts: Vec<usize>,
    pub positive_starts: Vec<usize>,
    pub window: usize,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Anchors then positives along the batch axis, `[L, 2B, C]`.
    pub fn joined(&self) -> Tensor {
        let s = self.anchors.shape();
        let (l, b, c) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(2 * l * b * c);
        for t in 0..l {
            data.extend_from_slice(&self.anchors.data()[t * b * c..(t + 1) * b * c]);
            data.extend_from_slice(&self.positives.data()[t * b * c..(t + 1) * b * c]);
        }
        Tensor::new(vec![l, 2 * b, c], data).expect("matching shapes")
    }

    /// Statics repeated for anchors and positives, `2B×|z|`.
    pub fn joined_statics(&self) -> Tensor {
        let mut data = self.statics.data().to_vec();
        data.extend_from_slice(self.statics.data());
        Tensor::new(vec![2 * self.len(), self.statics.shape()[1]], data).expect("matching shapes")
    }
}

/// Draws `batch_size` pairs of non-overlapping `window`-step sequences, each
/// pair from one uniformly chosen entity. Every unordered non-overlapping
/// placement inside the span is equally likely; which one is the anchor is a
/// coin flip.
pub fn sample_positive_pairs<R: Rng + ?Sized>(
    ds: &EntityDataset,
    span: Span,
    window: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<SequenceBatch> {
    let r = ds.span(span)?;
    if window == 0 || r.len() < 2 * window {
        return Err(Error::Data(format!(
            "span {span:?} has {} steps, need at least {} for two windows",
            r.len(),
            2 * window
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    // slack = number of extra steps beyond two back-to-back windows
    let slack = r.len() - 2 * window;
    let total_pairs = (slack + 1) * (slack + 2) / 2;
    let mut entities = Vec::with_capacity(batch_size);
    let mut a_starts = Vec::with_capacity(batch_size);
    let mut p_starts = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let e = rng.random_range(0..ds.n_entities());
        // first window at offset f has (slack - f + 1) partners
        let mut k = rng.random_range(0..total_pairs);
        let mut f = 0;
        while k >= slack - f + 1 {
            k -= slack - f + 1;
            f += 1;
        }
        let g = f + window + k;
        let (a, p) = if rng.random_bool(0.5) { (f, g) } else { (g, f) };
        entities.push(e);
        a_starts.push(r.start + a);
        p_starts.push(r.start + p);
    }
    let items = |starts: &[usize]| entities.iter().copied().zip(starts.iter().copied()).collect::<Vec<_>>();
    Ok(SequenceBatch {
        anchors: ds.windows(&items(&a_starts), window)?,
        positives: ds.windows(&items(&p_starts), window)?,
        statics: ds.statics_of(&entities),
        entities,
        anchor_starts: a_starts,
        positive_starts: p_starts,
        window,
    })
}

/// Training-noise settings, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub fraction: f64,
    pub std: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) || !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(Error::Config("noise fraction must lie in [0, 1] and std must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of blocks perturbed out of `total`.
    pub fn perturbed_count(&self, total: usize) -> usize {
        (self.fraction * total as f64).round() as usize
    }
}

/// Corrupts a seeded subset of the fixed, non-overlapping `block`-step
/// training windows with i.i.d. Gaussian noise on every channel. Validation
/// and test spans are left alone. Returns the new dataset and the perturbed
/// `(entity, start)` blocks.
pub fn inject_noise(ds: &EntityDataset, spec: &NoiseSpec, block: usize) -> Result<(EntityDataset, Vec<(usize, usize)>)> {
    spec.validate()?;
    let starts = ds.tiled_starts(Span::Train, block)?;
    let blocks: Vec<(usize, usize)> = (0..ds.n_entities())
        .flat_map(|e| starts.iter().map(move |s| (e, *s)))
        .collect();
    let count = spec.perturbed_count(blocks.len());
    let mut out = ds.clone();
    if count == 0 || spec.std == 0.0 {
        return Ok((out, Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen: Vec<(usize, usize)> = index::sample(&mut rng, blocks.len(), count)
        .into_iter()
        .map(|k| blocks[k])
        .collect();
    chosen.sort_unstable();
    let normal = Normal::new(0.0, spec.std).map_err(|e| Error::Config(e.to_string()))?;
    let c = ds.channels();
    for &(e, start) in &chosen {
        for v in &mut out.series[e][start * c..(start + block) * c] {
            *v += normal.sample(&mut rng);
        }
    }
    Ok((out, chosen))
}
