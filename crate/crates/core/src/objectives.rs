//! Scalar training objectives, all recorded on a [`Tape`] so they can be
//! differentiated.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Weights of the three task losses plus the two temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_cont: f64,
    pub lambda_inv: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Temperature dividing the uncertainty penalty.
    pub t_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_cont: 1.0,
            lambda_inv: 1.0,
            tau: 0.1,
            t_scale: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_rec, self.lambda_cont, self.lambda_inv];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) || !(self.t_scale > 0.0 && self.t_scale.is_finite()) {
            return Err(Error::Config("tau and t_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Form of the contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// `-log` softmax of the positive among all other embeddings (self excluded).
    #[default]
    NtXent,
    /// Plain similarity ratio with the self term kept in the denominator.
    /// It is a quantity to maximise; only useful for auditing.
    Verbatim,
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape {
            op,
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Mean squared reconstruction error over both members of every positive
/// pair. All sequences share one length, so the per-sequence average equals
/// the mean over all entries of each side.
pub fn reconstruction_loss(
    tape: &mut Tape,
    recon_a: Var,
    target_a: Var,
    recon_p: Var,
    target_p: Var,
) -> Result<Var> {
    same_shape(tape, "reconstruction_loss", recon_a, target_a)?;
    same_shape(tape, "reconstruction_loss", recon_p, target_p)?;
    if tape.value(target_a).numel() == 0 || tape.value(target_p).numel() == 0 {
        return Err(contract("reconstruction loss over an empty batch"));
    }
    let a = mse(tape, recon_a, target_a)?;
    let p = mse(tape, recon_p, target_p)?;
    let s = tape.add(a, p)?;
    tape.scale(s, 0.5)
}

/// Rows scaled to unit length; zero rows are a numeric error.
fn normalize_rows(tape: &mut Tape, z: Var) -> Result<Var> {
    let sq = tape.square(z)?;
    let norms2 = tape.row_sum(sq)?;
    if tape.value(norms2).data().iter().any(|v| *v <= 0.0) {
        return Err(Error::NonFinite { op: "cosine_similarity" });
    }
    let norms = tape.sqrt(norms2)?;
    let inv = tape.recip(norms)?;
    tape.row_scale(z, inv)
}

/// Knowledge-guided contrastive loss over `n` positive pairs.
///
/// Anchors and positives are stacked into `2n` embeddings. Each embedding's
/// term compares its positive partner against every other embedding, and the
/// result is averaged as `(1/2n) Σ_i l(a_i, p_i)`.
pub fn contrastive_loss(
    tape: &mut Tape,
    h_a: Var,
    h_p: Var,
    tau: f64,
    form: ContrastiveForm,
) -> Result<Var> {
    same_shape(tape, "contrastive_loss", h_a, h_p)?;
    let shape = tape.shape(h_a).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(contract("contrastive loss needs at least two positive pairs"));
    }
    if !(tau > 0.0) {
        return Err(contract("contrastive temperature must be positive"));
    }
    let n = shape[0];
    let m = 2 * n;
    let z = tape.concat(&[h_a, h_p], 0)?;
    let zn = normalize_rows(tape, z)?;
    let znt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, znt)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let e = tape.exp(logits)?;

    let mut pos_mask = vec![0.0; m * m];
    for k in 0..m {
        pos_mask[k * m + (k + n) % m] = 1.0;
    }
    let pos_mask = tape.constant(Tensor::matrix(m, m, pos_mask)?);
    let total = match form {
        ContrastiveForm::NtXent => {
            let mut others = vec![1.0; m * m];
            for k in 0..m {
                others[k * m + k] = 0.0;
            }
            let others = tape.constant(Tensor::matrix(m, m, others)?);
            let masked = tape.mul(e, others)?;
            let denom = tape.row_sum(masked)?;
            let log_denom = tape.log(denom)?;
            let pos = tape.mul(logits, pos_mask)?;
            let pos = tape.row_sum(pos)?;
            let terms = tape.sub(log_denom, pos)?;
            tape.sum(terms)?
        }
        ContrastiveForm::Verbatim => {
            let denom = tape.row_sum(e)?;
            let pos = tape.mul(e, pos_mask)?;
            let pos = tape.row_sum(pos)?;
            let ratio = tape.div(pos, denom)?;
            tape.sum(ratio)?
        }
    };
    tape.scale(total, 1.0 / m as f64)
}

/// `(1/N) Σ_i (1/|z|) Σ_j (z_ij − ẑ_ij)²`.
pub fn inverse_loss(tape: &mut Tape, z_hat: Var, z: Var) -> Result<Var> {
    same_shape(tape, "inverse_loss", z_hat, z)?;
    if tape.value(z).numel() == 0 {
        return Err(contract("inverse loss over an empty batch"));
    }
    mse(tape, z_hat, z)
}

/// Checks that `w` lies on the probability simplex within `1e-6`.
pub fn check_simplex(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.is_empty() || (sum - 1.0).abs() > 1e-6 || w.iter().any(|v| *v < -1e-6 || !v.is_finite()) {
        return Err(contract(format!("penalty weights are not on the simplex (sum {sum})")));
    }
    Ok(())
}

/// Inverse loss plus the uncertainty penalty
/// `(1/t)·(1/N) Σ_i (1/|z|) Σ_j w_j (z_ij − ẑ_ij)²`.
pub fn penalized_inverse_loss(
    tape: &mut Tape,
    z_hat: Var,
    z: Var,
    w: &[f64],
    t_scale: f64,
) -> Result<Var> {
    check_simplex(w)?;
    if !(t_scale > 0.0) {
        return Err(contract("t_scale must be positive"));
    }
    same_shape(tape, "penalized_inverse_loss", z_hat, z)?;
    if tape.shape(z).last() != Some(&w.len()) {
        return Err(Error::Shape {
            op: "penalized_inverse_loss",
            left: tape.shape(z).to_vec(),
            right: vec![w.len()],
        });
    }
    let base = inverse_loss(tape, z_hat, z)?;
    let d = tape.sub(z_hat, z)?;
    let sq = tape.square(d)?;
    let wv = tape.constant(Tensor::vector(w.to_vec()));
    let weighted = tape.mul(sq, wv)?;
    let penalty = tape.mean(weighted)?;
    let penalty = tape.scale(penalty, 1.0 / t_scale)?;
    tape.add(base, penalty)
}

/// The three task losses of one step. `inv` holds the penalized inverse
/// loss during uncertainty-penalized training.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub rec: Var,
    pub cont: Var,
    pub inv: Var,
}

/// `λ_rec·L_rec + λ_cont·L_cont + λ_inv·L_inv`.
pub fn total_loss(tape: &mut Tape, parts: LossParts, weights: &LossWeights) -> Result<Var> {
    let r = tape.scale(parts.rec, weights.lambda_rec)?;
    let c = tape.scale(parts.cont, weights.lambda_cont)?;
    let i = tape.scale(parts.inv, weights.lambda_inv)?;
    let rc = tape.add(r, c)?;
    tape.add(rc, i)
}

/// Variational free energy for one minibatch: the KL complexity cost spread
/// uniformly over `num_batches` plus the data term.
pub fn free_energy(tape: &mut Tape, kl: Option<Var>, nll: Var, num_batches: usize) -> Result<Var> {
    if num_batches == 0 {
        return Err(contract("num_batches must be at least 1"));
    }
    match kl {
        None => Ok(nll),
        Some(kl) => {
            let k = tape.scale(kl, 1.0 / num_batches as f64)?;
            tape.add(k, nll)
        }
    }
}

/// Cosine similarity of two vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NonFinite { op: "cosine_similarity" });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}
