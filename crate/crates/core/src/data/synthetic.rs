use std::f64::consts::PI;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::EntityDataset;
use crate::error::{Error, Result};

pub const SYNTHETIC_STATICS: [&str; 4] = ["runoff_coefficient", "recession_rate", "baseflow", "et_factor"];

/// Runs the bucket model for one basin. `z` is
/// `(runoff coefficient, recession rate, baseflow, ET factor)`.
pub fn simulate_basin(precip: &[f64], temp: &[f64], z: [f64; 4]) -> Result<Vec<f64>> {
    if precip.len() != temp.len() {
        return Err(Error::Data("precipitation and temperature lengths differ".into()));
    }
    let [runoff, recession, baseflow, et] = z;
    let mut storage = 0.0;
    Ok(precip
        .iter()
        .zip(temp)
        .map(|(p, t)| {
            let eff = (p - 0.1 * et * t.max(0.0)).max(0.0);
            let y = runoff * eff + recession * storage + baseflow;
            storage = (1.0 - recession) * storage + (1.0 - runoff) * eff;
            y
        })
        .collect())
}

/// Daily precipitation and temperature with an annual cycle. Rain peaks
/// scale with `amplitude`; `phase` shifts the temperature cycle.
pub fn seasonal_drivers<R: Rng + ?Sized>(steps: usize, amplitude: f64, phase: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let temp_noise = Normal::new(0.0, 0.5).expect("valid std");
    let mut precip = Vec::with_capacity(steps);
    let mut temp = Vec::with_capacity(steps);
    for t in 1..=steps {
        let season = 2.0 * PI * t as f64 / 365.0;
        let xi: f64 = StandardNormal.sample(rng);
        precip.push((amplitude * season.sin() + xi).max(0.0));
        temp.push(15.0 + 10.0 * (season - phase).sin() + temp_noise.sample(rng));
    }
    (precip, temp)
}

/// Synthetic basins driven by seasonal rain and temperature. Deterministic
/// for a given seed.
pub fn generate_synthetic(n_entities: usize, steps: usize, seed: u64) -> Result<EntityDataset> {
    if n_entities < 2 {
        return Err(Error::Config("synthetic data needs at least 2 entities".into()));
    }
    if steps < 730 {
        return Err(Error::Config("synthetic data needs at least 730 steps".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut series = Vec::with_capacity(n_entities);
    let mut statics = Vec::with_capacity(n_entities);
    for _ in 0..n_entities {
        let z = [
            rng.random_range(0.2..0.9),
            rng.random_range(0.05..0.5),
            rng.random_range(0.0..0.5),
            rng.random_range(0.0..0.3),
        ];
        let amplitude = rng.random_range(1.0..3.0);
        let phase = rng.random_range(-0.5..0.5);
        let (precip, temp) = seasonal_drivers(steps, amplitude, phase, &mut rng);
        let flow = simulate_basin(&precip, &temp, z)?;
        let mut s = Vec::with_capacity(steps * 3);
        for t in 0..steps {
            s.extend_from_slice(&[precip[t], temp[t], flow[t]]);
        }
        series.push(s);
        statics.push(z.to_vec());
    }
    EntityDataset::new(
        (0..n_entities).map(|i| format!("basin_{i:03}")).collect(),
        vec!["precipitation".into(), "temperature".into()],
        SYNTHETIC_STATICS.iter().map(|s| s.to_string()).collect(),
        NaiveDate::from_ymd_opt(1980, 1, 1).expect("valid date"),
        series,
        statics,
    )
}
