//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain function that the native tests
//! exercise directly.

use invbasin::autodiff::Tensor;
use invbasin::data::{seasonal_drivers, simulate_basin};
use invbasin::metrics::coverage_rate;
use invbasin::ubl::{penalty_from_uncertainty, UncertaintyMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

/// Precipitation followed by streamflow, `2·days` values in total.
pub fn hydrograph(z: [f64; 4], days: usize, seed: u64) -> Result<Vec<f64>, String> {
    if days == 0 || days > 20_000 {
        return Err("days must lie in 1..=20000".into());
    }
    if !(0.0..=1.0).contains(&z[0]) || !(0.0..=1.0).contains(&z[1]) || z[2] < 0.0 || z[3] < 0.0 {
        return Err("runoff and recession must lie in [0, 1]; baseflow and ET factor must be non-negative".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (precip, temp) = seasonal_drivers(days, 2.0, 0.0, &mut rng);
    let flow = simulate_basin(&precip, &temp, z).map_err(|e| e.to_string())?;
    Ok(precip.into_iter().chain(flow).collect())
}

/// Feature weights `w = v⊙v` from a row-major `rows × features` matrix of
/// per-entity uncertainties.
pub fn weights(sigma: Vec<f64>, features: usize) -> Result<Vec<f64>, String> {
    if features == 0 || sigma.is_empty() || sigma.len() % features != 0 {
        return Err("uncertainties must fill whole rows of `features` values".into());
    }
    let rows = sigma.len() / features;
    let t = Tensor::matrix(rows, features, sigma).map_err(|e| e.to_string())?;
    let names = (1..=features).map(|j| format!("z{j}")).collect();
    let u = UncertaintyMatrix::new(t, names).map_err(|e| e.to_string())?;
    Ok(penalty_from_uncertainty(&u).map_err(|e| e.to_string())?.w)
}

/// Coverage of `mean ± m·σ` for each multiplier when estimates carry
/// Gaussian error of std `error_std` and the reported σ is
/// `sigma_scale · error_std`.
pub fn coverage(cells: usize, error_std: f64, sigma_scale: f64, multipliers: &[f64], seed: u64) -> Result<Vec<f64>, String> {
    if cells == 0 || !(error_std > 0.0) || !(sigma_scale >= 0.0) {
        return Err("need at least one cell, a positive error std and a non-negative sigma scale".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..cells).map(|_| rng.sample(StandardNormal)).collect();
    let mean: Vec<f64> = z.iter().map(|v| v + error_std * rng.sample::<f64, _>(StandardNormal)).collect();
    let col = |v: Vec<f64>| Tensor::matrix(cells, 1, v).map_err(|e| e.to_string());
    let (z, mean, sigma) = (col(z)?, col(mean)?, col(vec![sigma_scale * error_std; cells])?);
    multipliers
        .iter()
        .map(|&m| coverage_rate(&z, &mean, &sigma, m).map_err(|e| e.to_string()))
        .collect()
}

#[wasm_bindgen]
pub fn synthetic_hydrograph(
    runoff_coefficient: f64,
    recession_rate: f64,
    baseflow: f64,
    et_factor: f64,
    days: usize,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    hydrograph([runoff_coefficient, recession_rate, baseflow, et_factor], days, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn penalty_weights(sigma: Vec<f64>, features: usize) -> Result<Vec<f64>, JsError> {
    weights(sigma, features).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn coverage_curve(cells: usize, error_std: f64, sigma_scale: f64, multipliers: Vec<f64>, seed: u32) -> Result<Vec<f64>, JsError> {
    coverage(cells, error_std, sigma_scale, &multipliers, seed.into()).map_err(|e| JsError::new(&e))
}
