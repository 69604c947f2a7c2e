use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Nonlinearity used for the candidate (`g`) gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    /// Standard LSTM candidate gate.
    #[default]
    Tanh,
    /// Logistic candidate gate, as some write-ups of the cell state it.
    Sigmoid,
}

/// Weights of one LSTM layer. Each gate matrix acts on `[input; hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_g: Tensor,
    pub w_o: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_g: Tensor,
    pub b_o: Tensor,
    pub hidden_size: usize,
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

pub(crate) fn xavier<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (out + inp).max(1) as f64).sqrt();
    Tensor::uniform(&[out, inp], -a, a, rng)
}

impl LstmParams {
    /// Xavier-uniform weights, zero biases except the forget gate (1.0).
    pub fn init<R: Rng + ?Sized>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let cols = input_size + hidden_size;
        let mut w = || xavier(hidden_size, cols, rng);
        let (w_i, w_f, w_g, w_o) = (w(), w(), w(), w());
        Self {
            w_i,
            w_f,
            w_g,
            w_o,
            b_i: Tensor::zeros(&[hidden_size]),
            b_f: Tensor::full(&[hidden_size], 1.0),
            b_g: Tensor::zeros(&[hidden_size]),
            b_o: Tensor::zeros(&[hidden_size]),
            hidden_size,
        }
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let w = Tensor::zeros(&[hidden_size, input_size + hidden_size]);
        let b = Tensor::zeros(&[hidden_size]);
        Self {
            w_i: w.clone(),
            w_f: w.clone(),
            w_g: w.clone(),
            w_o: w,
            b_i: b.clone(),
            b_f: b.clone(),
            b_g: b.clone(),
            b_o: b,
            hidden_size,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_i.shape()[1] - self.hidden_size
    }

    pub fn validate(&self) -> Result<()> {
        let expected = [self.hidden_size, self.w_i.shape().get(1).copied().unwrap_or(0)];
        for w in [&self.w_i, &self.w_f, &self.w_g, &self.w_o] {
            if w.shape() != expected || expected[1] < self.hidden_size {
                return Err(Error::Shape {
                    op: "lstm_params",
                    left: expected.to_vec(),
                    right: w.shape().to_vec(),
                });
            }
        }
        for b in [&self.b_i, &self.b_f, &self.b_g, &self.b_o] {
            if b.shape() != [self.hidden_size] {
                return Err(Error::Shape {
                    op: "lstm_params",
                    left: vec![self.hidden_size],
                    right: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn insert_into(&self, prefix: &str, params: &mut ParamSet) {
        let ws = [&self.w_i, &self.w_f, &self.w_g, &self.w_o];
        let bs = [&self.b_i, &self.b_f, &self.b_g, &self.b_o];
        for ((gate, w), b) in GATES.iter().zip(ws).zip(bs) {
            params.insert(format!("{prefix}.w_{gate}"), w.clone());
            params.insert(format!("{prefix}.b_{gate}"), b.clone());
        }
    }

    pub fn extract(prefix: &str, params: &ParamSet) -> Result<Self> {
        let get = |k: String| {
            params
                .get(&k)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("missing parameter `{k}`")))
        };
        let w_i = get(format!("{prefix}.w_i"))?;
        let hidden_size = w_i.shape()[0];
        let p = Self {
            w_i,
            w_f: get(format!("{prefix}.w_f"))?,
            w_g: get(format!("{prefix}.w_g"))?,
            w_o: get(format!("{prefix}.w_o"))?,
            b_i: get(format!("{prefix}.b_i"))?,
            b_f: get(format!("{prefix}.b_f"))?,
            b_g: get(format!("{prefix}.b_g"))?,
            b_o: get(format!("{prefix}.b_o"))?,
            hidden_size,
        };
        p.validate()?;
        Ok(p)
    }
}

/// An LSTM layer bound to a tape, with the four gates fused into one
/// `(input + hidden, 4·hidden)` matrix so each step needs a single matmul.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    weight: Var,
    bias: Var,
    pub input_size: usize,
    pub hidden_size: usize,
    pub gate: GateActivation,
}

impl LstmVars {
    pub fn bind(
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        gate: GateActivation,
    ) -> Result<Self> {
        let get = |k: String| {
            bound
                .get(&k)
                .copied()
                .ok_or_else(|| Error::Contract(format!("missing parameter `{k}`")))
        };
        let mut wts = Vec::with_capacity(4);
        let mut bs = Vec::with_capacity(4);
        for g in GATES {
            let w = get(format!("{prefix}.w_{g}"))?;
            wts.push(tape.transpose(w)?);
            bs.push(get(format!("{prefix}.b_{g}"))?);
        }
        let shape = tape.shape(wts[0]).to_vec();
        let hidden_size = shape[1];
        let weight = tape.concat(&wts, 1)?;
        let bias = tape.concat(&bs, 0)?;
        Ok(Self {
            weight,
            bias,
            input_size: shape[0] - hidden_size,
            hidden_size,
            gate,
        })
    }

    /// One cell update for a batch. `x` is `(batch, input)` or `None` when
    /// the layer has no step input.
    pub fn step(&self, tape: &mut Tape, x: Option<Var>, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let xh = match x {
            Some(x) => {
                if tape.shape(x).get(1) != Some(&self.input_size) {
                    return Err(Error::Shape {
                        op: "lstm_cell",
                        left: vec![self.input_size],
                        right: tape.shape(x).to_vec(),
                    });
                }
                tape.concat(&[x, h_prev], 1)?
            }
            None if self.input_size == 0 => h_prev,
            None => {
                return Err(Error::Shape {
                    op: "lstm_cell",
                    left: vec![self.input_size],
                    right: vec![0],
                })
            }
        };
        let pre = tape.matmul(xh, self.weight)?;
        let pre = tape.add(pre, self.bias)?;
        let h = self.hidden_size;
        let i = tape.slice(pre, 1, 0, h)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice(pre, 1, h, 2 * h)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice(pre, 1, 2 * h, 3 * h)?;
        let g = match self.gate {
            GateActivation::Tanh => tape.tanh(g)?,
            GateActivation::Sigmoid => tape.sigmoid(g)?,
        };
        let o = tape.slice(pre, 1, 3 * h, 4 * h)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c_prev)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> (Var, Var) {
        let h = tape.constant(Tensor::zeros(&[batch, self.hidden_size]));
        let c = tape.constant(Tensor::zeros(&[batch, self.hidden_size]));
        (h, c)
    }
}

/// Single-sample LSTM cell evaluated outside of any training graph.
pub fn lstm_cell(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmParams,
    gate: GateActivation,
) -> Result<(Vec<f64>, Vec<f64>)> {
    p.validate()?;
    if x.len() != p.input_size() || h_prev.len() != p.hidden_size || c_prev.len() != p.hidden_size {
        return Err(Error::Shape {
            op: "lstm_cell",
            left: vec![p.input_size(), p.hidden_size, p.hidden_size],
            right: vec![x.len(), h_prev.len(), c_prev.len()],
        });
    }
    let mut params = ParamSet::new();
    p.insert_into("cell", &mut params);
    let mut tape = Tape::new();
    let bound = tape.bind(&params);
    let vars = LstmVars::bind(&mut tape, &bound, "cell", gate)?;
    let n = p.hidden_size;
    let xv = (!x.is_empty()).then(|| tape.constant(Tensor::vector(x.to_vec()).reshape(vec![1, x.len()]).unwrap()));
    let hv = tape.constant(Tensor::matrix(1, n, h_prev.to_vec())?);
    let cv = tape.constant(Tensor::matrix(1, n, c_prev.to_vec())?);
    let (h, c) = vars.step(&mut tape, xv, hv, cv)?;
    Ok((tape.value(h).data().to_vec(), tape.value(c).data().to_vec()))
}
