use rand::Rng;

use super::lstm::xavier;
use crate::autodiff::{softplus, Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Variational linear layer: a factorized Gaussian over every weight and
/// bias, with scale `softplus(rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BbbLinearParams {
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub rho_w: Tensor,
    pub rho_b: Tensor,
    pub prior_std: f64,
}

/// Standard-normal draws for one probabilistic layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    pub w: Tensor,
    pub b: Tensor,
}

impl LayerNoise {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            w: Tensor::zeros(&[out, inp]),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn sample<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[out, inp], rng),
            b: Tensor::randn(&[out], rng),
        }
    }
}

impl BbbLinearParams {
    pub fn init<R: Rng + ?Sized>(out: usize, inp: usize, rho_init: f64, prior_std: f64, rng: &mut R) -> Self {
        Self {
            mu_w: xavier(out, inp, rng),
            mu_b: Tensor::zeros(&[out]),
            rho_w: Tensor::full(&[out, inp], rho_init),
            rho_b: Tensor::full(&[out], rho_init),
            prior_std,
        }
    }

    pub fn insert_into(&self, prefix: &str, params: &mut ParamSet) {
        params.insert(format!("{prefix}.mu_w"), self.mu_w.clone());
        params.insert(format!("{prefix}.mu_b"), self.mu_b.clone());
        params.insert(format!("{prefix}.rho_w"), self.rho_w.clone());
        params.insert(format!("{prefix}.rho_b"), self.rho_b.clone());
    }

    pub fn extract(prefix: &str, params: &ParamSet, prior_std: f64) -> Result<Self> {
        let get = |k: &str| {
            params
                .get(&format!("{prefix}.{k}"))
                .cloned()
                .ok_or_else(|| contract(format!("missing parameter `{prefix}.{k}`")))
        };
        Ok(Self {
            mu_w: get("mu_w")?,
            mu_b: get("mu_b")?,
            rho_w: get("rho_w")?,
            rho_b: get("rho_b")?,
            prior_std,
        })
    }

    /// Point weights `mu + softplus(rho) * eps`.
    pub fn sample(&self, eps: &LayerNoise) -> Result<(Tensor, Tensor)> {
        let draw = |mu: &Tensor, rho: &Tensor, e: &Tensor| -> Result<Tensor> {
            if mu.shape() != e.shape() || mu.shape() != rho.shape() {
                return Err(Error::Shape {
                    op: "bbb_sample",
                    left: mu.shape().to_vec(),
                    right: e.shape().to_vec(),
                });
            }
            let data = mu
                .data()
                .iter()
                .zip(rho.data())
                .zip(e.data())
                .map(|((m, r), e)| m + softplus(*r) * e)
                .collect();
            Tensor::new(mu.shape().to_vec(), data)
        };
        Ok((
            draw(&self.mu_w, &self.rho_w, &eps.w)?,
            draw(&self.mu_b, &self.rho_b, &eps.b)?,
        ))
    }

    /// Closed-form KL from the posterior to the N(0, prior_std²) prior.
    pub fn kl(&self) -> Result<f64> {
        if !(self.prior_std > 0.0) {
            return Err(contract("prior_std must be positive"));
        }
        let p = self.prior_std;
        let term = |mu: f64, rho: f64| {
            let s = softplus(rho);
            (p / s).ln() + (s * s + mu * mu) / (2.0 * p * p) - 0.5
        };
        let w: f64 = self.mu_w.data().iter().zip(self.rho_w.data()).map(|(m, r)| term(*m, *r)).sum();
        let b: f64 = self.mu_b.data().iter().zip(self.rho_b.data()).map(|(m, r)| term(*m, *r)).sum();
        Ok(w + b)
    }
}

/// A linear layer bound to a tape, either point-weight or variational.
#[derive(Debug, Clone, Copy)]
pub enum LinearVars {
    Point { w: Var, b: Var },
    Bayes { mu_w: Var, mu_b: Var, rho_w: Var, rho_b: Var },
}

impl LinearVars {
    pub fn bind(bound: &Bound, prefix: &str, bayes: bool) -> Result<Self> {
        let get = |k: &str| {
            bound
                .get(&format!("{prefix}.{k}"))
                .copied()
                .ok_or_else(|| contract(format!("missing parameter `{prefix}.{k}`")))
        };
        Ok(if bayes {
            LinearVars::Bayes {
                mu_w: get("mu_w")?,
                mu_b: get("mu_b")?,
                rho_w: get("rho_w")?,
                rho_b: get("rho_b")?,
            }
        } else {
            LinearVars::Point {
                w: get("w")?,
                b: get("b")?,
            }
        })
    }

    /// Weights to use for one pass. A variational layer with `noise = None`
    /// uses its means (the ε = 0 pass).
    pub fn weights(&self, tape: &mut Tape, noise: Option<&LayerNoise>) -> Result<(Var, Var)> {
        match (*self, noise) {
            (LinearVars::Point { w, b }, _) => Ok((w, b)),
            (LinearVars::Bayes { mu_w, mu_b, .. }, None) => Ok((mu_w, mu_b)),
            (LinearVars::Bayes { mu_w, mu_b, rho_w, rho_b }, Some(eps)) => {
                let w = bbb_sample(tape, mu_w, rho_w, &eps.w)?;
                let b = bbb_sample(tape, mu_b, rho_b, &eps.b)?;
                Ok((w, b))
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, noise: Option<&LayerNoise>) -> Result<Var> {
        let (w, b) = self.weights(tape, noise)?;
        tape.linear(x, w, b)
    }

    pub fn kl(&self, tape: &mut Tape, prior_std: f64) -> Result<Option<Var>> {
        match *self {
            LinearVars::Point { .. } => Ok(None),
            LinearVars::Bayes { mu_w, mu_b, rho_w, rho_b } => {
                let kw = bbb_kl(tape, mu_w, rho_w, prior_std)?;
                let kb = bbb_kl(tape, mu_b, rho_b, prior_std)?;
                Ok(Some(tape.add(kw, kb)?))
            }
        }
    }
}

/// Reparameterized draw `mu + softplus(rho) ⊙ eps`, differentiable in `mu`
/// and `rho` with `eps` held fixed.
pub fn bbb_sample(tape: &mut Tape, mu: Var, rho: Var, eps: &Tensor) -> Result<Var> {
    if tape.shape(mu) != eps.shape() {
        return Err(Error::Shape {
            op: "bbb_sample",
            left: tape.shape(mu).to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    let scale = tape.softplus(rho)?;
    let e = tape.constant(eps.clone());
    let noise = tape.mul(scale, e)?;
    tape.add(mu, noise)
}

/// Summed KL[N(mu, softplus(rho)²) ‖ N(0, prior_std²)] on the tape.
pub fn bbb_kl(tape: &mut Tape, mu: Var, rho: Var, prior_std: f64) -> Result<Var> {
    if !(prior_std > 0.0) {
        return Err(contract("prior_std must be positive"));
    }
    let inv_var = 1.0 / (2.0 * prior_std * prior_std);
    let sigma = tape.softplus(rho)?;
    let log_sigma = tape.log(sigma)?;
    let s2 = tape.square(sigma)?;
    let m2 = tape.square(mu)?;
    let quad = tape.add(s2, m2)?;
    let quad = tape.scale(quad, inv_var)?;
    let t = tape.sub(quad, log_sigma)?;
    let t = tape.add_scalar(t, prior_std.ln() - 0.5)?;
    tape.sum(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, value_and_grad};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(mu: f64, rho: f64, prior: f64) -> BbbLinearParams {
        BbbLinearParams {
            mu_w: Tensor::full(&[2, 3], mu),
            mu_b: Tensor::full(&[2], mu),
            rho_w: Tensor::full(&[2, 3], rho),
            rho_b: Tensor::full(&[2], rho),
            prior_std: prior,
        }
    }

    /// rho with softplus(rho) == s
    fn rho_for(s: f64) -> f64 {
        s.exp_m1().ln()
    }

    #[test]
    fn zero_noise_returns_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BbbLinearParams::init(2, 3, -2.0, 1.0, &mut rng);
        let (w, b) = p.sample(&LayerNoise::zeros(2, 3)).unwrap();
        assert_eq!(w, p.mu_w);
        assert_eq!(b, p.mu_b);
    }

    #[test]
    fn unit_noise_adds_ln2() {
        let p = layer(0.25, 0.0, 1.0);
        let eps = LayerNoise {
            w: Tensor::full(&[2, 3], 1.0),
            b: Tensor::full(&[2], 1.0),
        };
        let (w, _) = p.sample(&eps).unwrap();
        assert!(w.data().iter().all(|v| (v - (0.25 + std::f64::consts::LN_2)).abs() < 1e-15));
    }

    #[test]
    fn sample_shape_mismatch() {
        let p = layer(0.0, 0.0, 1.0);
        assert!(p.sample(&LayerNoise::zeros(3, 2)).is_err());
    }

    #[test]
    fn kl_closed_form_cases() {
        assert!(layer(0.0, rho_for(1.0), 1.0).kl().unwrap().abs() < 1e-12);
        let k = layer(1.0, rho_for(1.0), 1.0).kl().unwrap();
        assert!((k - 0.5 * 8.0).abs() < 1e-12);
        assert!(layer(0.0, 0.0, 0.0).kl().is_err());
    }

    #[test]
    fn kl_on_tape_matches_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BbbLinearParams::init(3, 4, -1.0, 0.7, &mut rng);
        let mut params = ParamSet::new();
        p.insert_into("l", &mut params);
        let (v, _) = value_and_grad(
            |t, b| {
                let l = LinearVars::bind(b, "l", true)?;
                Ok(l.kl(t, 0.7)?.unwrap())
            },
            &params,
        )
        .unwrap();
        assert!((v - p.kl().unwrap()).abs() < 1e-10);
    }

    #[test]
    fn rho_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = BbbLinearParams::init(2, 3, -0.5, 1.0, &mut rng);
        let mut params = ParamSet::new();
        p.insert_into("l", &mut params);
        let eps = LayerNoise::sample(2, 3, &mut rng);
        let x = Tensor::randn(&[4, 3], &mut rng);
        let err = finite_diff_check(
            |t, b| {
                let l = LinearVars::bind(b, "l", true)?;
                let xv = t.constant(x.clone());
                let y = l.forward(t, xv, Some(&eps))?;
                let y = t.tanh(y)?;
                let sq = t.square(y)?;
                let data = t.sum(sq)?;
                let kl = l.kl(t, 1.0)?.unwrap();
                t.add(data, kl)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(mu in -3.0f64..3.0, rho in -6.0f64..3.0, prior in 0.05f64..4.0) {
            prop_assert!(layer(mu, rho, prior).kl().unwrap() >= -1e-12);
        }
    }

    #[test]
    fn kl_non_negative_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let prior = rng.random_range(0.05..3.0);
            let p = BbbLinearParams {
                mu_w: Tensor::randn(&[2, 2], &mut rng),
                mu_b: Tensor::randn(&[2], &mut rng),
                rho_w: Tensor::uniform(&[2, 2], -6.0, 3.0, &mut rng),
                rho_b: Tensor::uniform(&[2], -6.0, 3.0, &mut rng),
                prior_std: prior,
            };
            assert!(p.kl().unwrap() >= -1e-12);
        }
    }
}
