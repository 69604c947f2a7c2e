//! Uncertainty-based learning: turn per-feature epistemic spread into a
//! penalty simplex and pick the penalty temperature on validation data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract, Error, Result};

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 10_000;
const POWER_SEED: u64 = 0x5eed;

/// Per-sample, per-feature epistemic standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMatrix {
    sigma: Tensor,
    feature_names: Vec<String>,
}

impl UncertaintyMatrix {
    pub fn new(sigma: Tensor, feature_names: Vec<String>) -> Result<Self> {
        if sigma.ndim() != 2 {
            return Err(contract("uncertainty matrix must be 2-D"));
        }
        if sigma.shape()[1] != feature_names.len() {
            return Err(Error::Shape {
                op: "uncertainty_matrix",
                left: sigma.shape().to_vec(),
                right: vec![feature_names.len()],
            });
        }
        if sigma.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(contract("uncertainty entries must be finite and non-negative"));
        }
        Ok(Self { sigma, feature_names })
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn rows(&self) -> usize {
        self.sigma.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.sigma.shape()[1]
    }
}

/// Penalty weights `w = v ⊙ v` built from the dominant eigenvector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub lambda1: f64,
}

/// `(1/N)·σᵀσ`, row-major `|z|×|z|`.
pub fn uncertainty_gram(u: &UncertaintyMatrix) -> Result<Tensor> {
    let (n, m) = (u.rows(), u.features());
    if n == 0 || m == 0 {
        return Err(contract("uncertainty matrix is empty"));
    }
    let s = u.sigma.data();
    let mut c = vec![0.0; m * m];
    for row in s.chunks(m) {
        for a in 0..m {
            for b in a..m {
                c[a * m + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..m {
        for b in a..m {
            let v = c[a * m + b] / n as f64;
            c[a * m + b] = v;
            c[b * m + a] = v;
        }
    }
    Tensor::matrix(m, m, c)
}

fn symmetric_size(c: &Tensor) -> Result<usize> {
    let s = c.shape();
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return Err(contract(format!("expected a non-empty square matrix, got {s:?}")));
    }
    let m = s[0];
    let d = c.data();
    let scale = c.max_abs().max(1.0);
    for a in 0..m {
        for b in 0..a {
            if (d[a * m + b] - d[b * m + a]).abs() > 1e-12 * scale {
                return Err(contract("matrix is not symmetric"));
            }
        }
    }
    Ok(m)
}

fn mat_vec(c: &[f64], v: &[f64]) -> Vec<f64> {
    c.chunks(v.len())
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn orient(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| **x != 0.0) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Dominant eigenpair of a symmetric PSD matrix by power iteration from a
/// fixed seeded start. The zero matrix yields `(0, e₁)`.
pub fn top_eigenvector(c: &Tensor) -> Result<(f64, Vec<f64>)> {
    let m = symmetric_size(c)?;
    let d = c.data();
    if d.iter().all(|x| *x == 0.0) {
        let mut e1 = vec![0.0; m];
        e1[0] = 1.0;
        return Ok((0.0, e1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    for _ in 0..POWER_MAX_ITER {
        let mut next = mat_vec(d, &v);
        let n = norm(&next);
        if n == 0.0 {
            // start was orthogonal to the range; restart along the largest diagonal
            let j = (0..m).max_by(|a, b| d[a * m + a].total_cmp(&d[b * m + b])).unwrap();
            next = vec![0.0; m];
            next[j] = 1.0;
        } else {
            next.iter_mut().for_each(|x| *x /= n);
        }
        orient(&mut next);
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < POWER_TOL {
            let cv = mat_vec(d, &v);
            let lambda = v.iter().zip(&cv).map(|(a, b)| a * b).sum();
            return Ok((lambda, v));
        }
    }
    Err(Error::NoConvergence { iterations: POWER_MAX_ITER })
}

/// `w_j = v_j²` for a unit vector `v`.
pub fn penalty_weights(v: &[f64], lambda1: f64) -> Result<PenaltyWeights> {
    let n = norm(v);
    if v.is_empty() || (n - 1.0).abs() > 1e-9 {
        return Err(contract(format!("eigenvector must have unit norm, got {n}")));
    }
    Ok(PenaltyWeights {
        w: v.iter().map(|x| x * x).collect(),
        v: v.to_vec(),
        lambda1,
    })
}

/// Gram, dominant eigenvector and squared projection in one call.
pub fn penalty_from_uncertainty(u: &UncertaintyMatrix) -> Result<PenaltyWeights> {
    let c = uncertainty_gram(u)?;
    let (lambda1, v) = top_eigenvector(&c)?;
    penalty_weights(&v, lambda1)
}

/// Outcome of a temperature search.
#[derive(Debug, Clone)]
pub struct TemperatureChoice<M> {
    pub t_scale: f64,
    /// Validation inverse loss for each candidate, in input order.
    pub losses: Vec<(f64, f64)>,
    pub model: M,
}

/// Runs `fit` once per candidate temperature and keeps the one with the
/// lowest validation inverse loss. Ties go to the larger temperature.
/// `fit` returns the validation loss together with the fitted model.
pub fn tune_temperature<M, F>(candidates: &[f64], mut fit: F) -> Result<TemperatureChoice<M>>
where
    F: FnMut(f64) -> Result<(f64, M)>,
{
    if candidates.is_empty() {
        return Err(Error::Config("temperature candidate list is empty".into()));
    }
    if candidates.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::Config("temperature candidates must be positive".into()));
    }
    let mut best: Option<(f64, f64, M)> = None;
    let mut losses = Vec::with_capacity(candidates.len());
    for &t in candidates {
        let (loss, model) = fit(t)?;
        losses.push((t, loss));
        let better = match &best {
            None => true,
            Some((bt, bl, _)) => loss < *bl || (loss == *bl && t > *bt),
        };
        if better {
            best = Some((t, loss, model));
        }
    }
    let (t_scale, _, model) = best.expect("at least one candidate");
    Ok(TemperatureChoice { t_scale, losses, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn names(m: usize) -> Vec<String> {
        (0..m).map(|j| format!("f{j}")).collect()
    }

    fn umat(n: usize, m: usize, data: Vec<f64>) -> UncertaintyMatrix {
        UncertaintyMatrix::new(Tensor::matrix(n, m, data).unwrap(), names(m)).unwrap()
    }

    /// Cyclic Jacobi rotations; returns all eigenvalues and eigenvectors (columns).
    fn jacobi(c: &[f64], m: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut a = c.to_vec();
        let mut v = vec![0.0; m * m];
        for i in 0..m {
            v[i * m + i] = 1.0;
        }
        for _sweep in 0..100 {
            let off: f64 = (0..m).flat_map(|p| (0..m).filter(move |q| *q != p).map(move |q| (p, q))).map(|(p, q)| a[p * m + q].powi(2)).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..m {
                for q in p + 1..m {
                    let apq = a[p * m + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let cs = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * cs;
                    for k in 0..m {
                        let (akp, akq) = (a[k * m + p], a[k * m + q]);
                        a[k * m + p] = cs * akp - sn * akq;
                        a[k * m + q] = sn * akp + cs * akq;
                    }
                    for k in 0..m {
                        let (apk, aqk) = (a[p * m + k], a[q * m + k]);
                        a[p * m + k] = cs * apk - sn * aqk;
                        a[q * m + k] = sn * apk + cs * aqk;
                    }
                    for k in 0..m {
                        let (vkp, vkq) = (v[k * m + p], v[k * m + q]);
                        v[k * m + p] = cs * vkp - sn * vkq;
                        v[k * m + q] = sn * vkp + cs * vkq;
                    }
                }
            }
        }
        let vals = (0..m).map(|i| a[i * m + i]).collect();
        let vecs = (0..m).map(|j| (0..m).map(|i| v[i * m + j]).collect()).collect();
        (vals, vecs)
    }

    fn random_psd(m: usize, rng: &mut impl Rng) -> Tensor {
        let b = Tensor::randn(&[m, m], rng);
        let d = b.data();
        let mut c = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                c[i * m + j] = (0..m).map(|k| d[k * m + i] * d[k * m + j]).sum();
            }
        }
        Tensor::matrix(m, m, c).unwrap()
    }

    #[test]
    fn gram_cases() {
        let c = uncertainty_gram(&umat(3, 3, vec![0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        for (k, v) in c.data().iter().enumerate() {
            if k == 4 {
                assert!((v - 14.0 / 3.0).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        let c = uncertainty_gram(&umat(3, 3, Tensor::eye(3).into_data())).unwrap();
        assert_eq!(c, Tensor::eye(3).map(|x| x / 3.0));
        assert!(uncertainty_gram(&umat(0, 2, vec![])).is_err());
    }

    #[test]
    fn gram_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::uniform(&[6, 4], 0.0, 2.0, &mut rng);
        let c = uncertainty_gram(&umat(6, 4, s.data().to_vec())).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let mut acc = 0.0;
                for i in 0..6 {
                    acc += s.data()[i * 4 + a] * s.data()[i * 4 + b];
                }
                assert!((c.data()[a * 4 + b] - acc / 6.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matrix_validation() {
        assert!(UncertaintyMatrix::new(Tensor::matrix(1, 2, vec![-1.0, 0.0]).unwrap(), names(2)).is_err());
        assert!(UncertaintyMatrix::new(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), names(3)).is_err());
    }

    #[test]
    fn eigen_diagonal_and_2x2() {
        let c = Tensor::matrix(3, 3, vec![4.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.25]).unwrap();
        let (l, v) = top_eigenvector(&c).unwrap();
        assert!((l - 4.0).abs() < 1e-9);
        assert!((v[0] - 1.0).abs() < 1e-9 && v[1].abs() < 1e-9 && v[2].abs() < 1e-9);

        let c = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (l, v) = top_eigenvector(&c).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((l - 3.0).abs() < 1e-9);
        assert!((v[0] - r).abs() < 1e-9 && (v[1] - r).abs() < 1e-9);
    }

    #[test]
    fn zero_matrix_convention() {
        let (l, v) = top_eigenvector(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(v, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn eigen_rejects_bad_input() {
        assert!(top_eigenvector(&Tensor::zeros(&[2, 3])).is_err());
        assert!(top_eigenvector(&Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn eigen_matches_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let c = random_psd(5, &mut rng);
            let (vals, vecs) = jacobi(c.data(), 5);
            let top = (0..5).max_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap();
            let (l, v) = top_eigenvector(&c).unwrap();
            assert!((l - vals[top]).abs() < 1e-8 * vals[top].max(1.0), "{l} vs {}", vals[top]);
            let dot: f64 = v.iter().zip(&vecs[top]).map(|(a, b)| a * b).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rayleigh_quotient_is_maximal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_psd(4, &mut rng);
        let (l, _) = top_eigenvector(&c).unwrap();
        for _ in 0..100 {
            let mut u: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let n = norm(&u);
            u.iter_mut().for_each(|x| *x /= n);
            let q: f64 = u.iter().zip(mat_vec(c.data(), &u)).map(|(a, b)| a * b).sum();
            assert!(l >= q - 1e-9);
        }
    }

    #[test]
    fn penalty_cases() {
        let p = penalty_weights(&[0.0, 1.0, 0.0], 1.0).unwrap();
        assert_eq!(p.w, vec![0.0, 1.0, 0.0]);
        let r = 1.0 / 2f64.sqrt();
        let p = penalty_weights(&[r, r], 1.0).unwrap();
        assert!((p.w[0] - 0.5).abs() < 1e-15 && (p.w[1] - 0.5).abs() < 1e-15);
        assert!(penalty_weights(&[1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn high_uncertainty_feature_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = Tensor::uniform(&[40, 3], 0.0, 0.1, &mut rng);
        for i in 0..40 {
            s.data_mut()[i * 3 + 1] += 1.0;
        }
        let p = penalty_from_uncertainty(&umat(40, 3, s.into_data())).unwrap();
        assert!(p.w[1] > 0.9);
    }

    #[test]
    fn tune_temperature_contract() {
        let one = tune_temperature(&[2.0], |t| Ok((1.0, t))).unwrap();
        assert_eq!(one.t_scale, 2.0);
        let pick = tune_temperature(&[0.5, 1.0, 2.0], |t| Ok(((t - 1.0).abs(), t))).unwrap();
        assert_eq!(pick.t_scale, 1.0);
        assert_eq!(pick.model, 1.0);
        let tie = tune_temperature(&[0.5, 5.0, 1.0], |t| Ok((0.3, t))).unwrap();
        assert_eq!(tie.t_scale, 5.0);
        assert!(tune_temperature::<f64, _>(&[], |t| Ok((0.0, t))).is_err());
        assert!(tune_temperature(&[0.0], |t| Ok((0.0, t))).is_err());
    }

    #[test]
    fn penalty_json_roundtrip() {
        let p = penalty_weights(&[0.6, 0.8], 2.5).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: PenaltyWeights = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
    }

    proptest! {
        #[test]
        fn weights_lie_on_the_simplex(seed in 0u64..1000, n in 1usize..8, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::uniform(&[n, m], 0.0, 3.0, &mut rng);
            let p = penalty_from_uncertainty(&umat(n, m, s.into_data())).unwrap();
            prop_assert!((p.w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.w.iter().all(|x| *x >= 0.0));
            prop_assert!((norm(&p.v) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn weights_invariant_to_scaling(seed in 0u64..1000, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::uniform(&[6, 3], 0.0, 1.0, &mut rng);
            let a = penalty_from_uncertainty(&umat(6, 3, s.data().to_vec())).unwrap();
            let b = penalty_from_uncertainty(&umat(6, 3, s.map(|x| x * c).into_data())).unwrap();
            for (x, y) in a.w.iter().zip(&b.w) {
                prop_assert!((x - y).abs() < 1e-7);
            }
        }
    }
}
