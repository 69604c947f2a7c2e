use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::{BbbLinearParams, LayerNoise, LinearVars};
use super::lstm::{xavier, GateActivation, LstmParams, LstmVars};
use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Which linear layer carries a weight distribution. At most one does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Deterministic,
    /// Encoder output head (ReLU-linear after the bidirectional LSTM).
    #[default]
    Encoder,
    /// Projection from the embedding to the decoder's initial state.
    Decoder,
    StaticHead1,
    StaticHead2,
    /// Per-step output layer of the decoder.
    ReconHead,
}

impl Placement {
    pub fn layer(self) -> Option<&'static str> {
        match self {
            Placement::Deterministic => None,
            Placement::Encoder => Some(ENC_HEAD),
            Placement::Decoder => Some(DEC_INIT),
            Placement::StaticHead1 => Some(STATIC1),
            Placement::StaticHead2 => Some(STATIC2),
            Placement::ReconHead => Some(DEC_OUT),
        }
    }

    pub fn is_probabilistic(self) -> bool {
        self != Placement::Deterministic
    }

    /// Whether sampled weights change the static estimates.
    pub fn affects_statics(self) -> bool {
        matches!(
            self,
            Placement::Encoder | Placement::StaticHead1 | Placement::StaticHead2
        )
    }
}

pub const ENC_FWD: &str = "enc_fwd";
pub const ENC_BWD: &str = "enc_bwd";
pub const ENC_HEAD: &str = "enc_head";
pub const DEC_INIT: &str = "dec_init";
pub const DEC: &str = "dec";
pub const DEC_OUT: &str = "dec_out";
pub const STATIC1: &str = "static1";
pub const STATIC2: &str = "static2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Drivers plus the response channel.
    pub channels: usize,
    pub hidden: usize,
    pub static_hidden: usize,
    pub n_static: usize,
    pub placement: Placement,
    pub gate: GateActivation,
    pub prior_std: f64,
    pub rho_init: f64,
}

impl ModelConfig {
    /// Embedding width: forward and backward final states side by side.
    pub fn embedding(&self) -> usize {
        2 * self.hidden
    }

    /// (out, in) of every linear layer.
    fn linear_dims(&self) -> [(&'static str, usize, usize); 5] {
        let e = self.embedding();
        [
            (ENC_HEAD, e, e),
            (DEC_INIT, 2 * self.hidden, e),
            (DEC_OUT, self.channels, self.hidden),
            (STATIC1, self.static_hidden, e),
            (STATIC2, self.n_static, self.static_hidden),
        ]
    }

    pub fn noise_dims(&self) -> Option<(usize, usize)> {
        let layer = self.placement.layer()?;
        self.linear_dims()
            .iter()
            .find(|(n, _, _)| *n == layer)
            .map(|(_, o, i)| (*o, *i))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 || self.static_hidden == 0 || self.n_static == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(self.prior_std > 0.0) || !self.rho_init.is_finite() {
            return Err(Error::Config("prior_std must be positive and rho_init finite".into()));
        }
        Ok(())
    }
}

/// Bidirectional LSTM encoder, LSTM decoder and two-layer static head.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Model parameters registered on one tape.
pub struct BoundModel {
    enc_fwd: LstmVars,
    enc_bwd: LstmVars,
    dec: LstmVars,
    enc_head: LinearVars,
    dec_init: LinearVars,
    dec_out: LinearVars,
    static1: LinearVars,
    static2: LinearVars,
    placement: Placement,
    prior_std: f64,
    hidden: usize,
}

impl InverseModel {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let h = config.hidden;
        LstmParams::init(config.channels, h, rng).insert_into(ENC_FWD, &mut params);
        LstmParams::init(config.channels, h, rng).insert_into(ENC_BWD, &mut params);
        LstmParams::init(0, h, rng).insert_into(DEC, &mut params);
        let bayes = config.placement.layer();
        for (name, out, inp) in config.linear_dims() {
            if bayes == Some(name) {
                BbbLinearParams::init(out, inp, config.rho_init, config.prior_std, rng)
                    .insert_into(name, &mut params);
            } else {
                params.insert(format!("{name}.w"), xavier(out, inp, rng));
                params.insert(format!("{name}.b"), Tensor::zeros(&[out]));
            }
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking every expected tensor.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        if reference.params.len() != params.len() {
            return Err(contract("parameter set does not match the model layout"));
        }
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(contract(format!("parameter `{name}` missing or misshapen"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn bbb_params(&self) -> Option<BbbLinearParams> {
        let layer = self.config.placement.layer()?;
        BbbLinearParams::extract(layer, &self.params, self.config.prior_std).ok()
    }

    /// One standard-normal draw for the probabilistic layer, if any.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<LayerNoise> {
        let (out, inp) = self.config.noise_dims()?;
        Some(LayerNoise::sample(out, inp, rng))
    }

    pub fn bind(&self, tape: &mut Tape, bound: &Bound) -> Result<BoundModel> {
        let cfg = &self.config;
        let bayes = cfg.placement.layer();
        let lin = |name: &str| LinearVars::bind(bound, name, bayes == Some(name));
        Ok(BoundModel {
            enc_fwd: LstmVars::bind(tape, bound, ENC_FWD, cfg.gate)?,
            enc_bwd: LstmVars::bind(tape, bound, ENC_BWD, cfg.gate)?,
            dec: LstmVars::bind(tape, bound, DEC, cfg.gate)?,
            enc_head: lin(ENC_HEAD)?,
            dec_init: lin(DEC_INIT)?,
            dec_out: lin(DEC_OUT)?,
            static1: lin(STATIC1)?,
            static2: lin(STATIC2)?,
            placement: cfg.placement,
            prior_std: cfg.prior_std,
            hidden: cfg.hidden,
        })
    }
}

fn noise_for(placement: Placement, target: Placement, noise: Option<&LayerNoise>) -> Option<&LayerNoise> {
    if placement == target {
        noise
    } else {
        None
    }
}

/// Step inputs `(batch, channels)` for every time step of a time-major
/// `(T, batch, channels)` window.
fn step_inputs(tape: &mut Tape, window: &Tensor) -> Result<Vec<Var>> {
    if window.ndim() != 3 {
        return Err(Error::Shape {
            op: "encode_sequence",
            left: vec![0, 0, 0],
            right: window.shape().to_vec(),
        });
    }
    let (t, b, c) = (window.shape()[0], window.shape()[1], window.shape()[2]);
    if t == 0 || b == 0 {
        return Err(contract("encode_sequence needs a non-empty window"));
    }
    (0..t)
        .map(|k| {
            let step = window.rows(k, k + 1)?.reshape(vec![b, c])?;
            Ok(tape.constant(step))
        })
        .collect()
}

impl BoundModel {
    /// Final forward and backward LSTM states, `(batch, 2·hidden)`.
    pub fn encode_states(&self, tape: &mut Tape, window: &Tensor) -> Result<Var> {
        let inputs = step_inputs(tape, window)?;
        let batch = window.shape()[1];
        let (mut hf, mut cf) = self.enc_fwd.zero_state(tape, batch);
        for &x in &inputs {
            (hf, cf) = self.enc_fwd.step(tape, Some(x), hf, cf)?;
        }
        let (mut hb, mut cb) = self.enc_bwd.zero_state(tape, batch);
        for &x in inputs.iter().rev() {
            (hb, cb) = self.enc_bwd.step(tape, Some(x), hb, cb)?;
        }
        tape.concat(&[hf, hb], 1)
    }

    /// ReLU-linear head on the concatenated LSTM states.
    pub fn encode_head(&self, tape: &mut Tape, states: Var, noise: Option<&LayerNoise>) -> Result<Var> {
        let n = noise_for(self.placement, Placement::Encoder, noise);
        let z = self.enc_head.forward(tape, states, n)?;
        tape.relu(z)
    }

    /// Embedding `h` of a `(T, batch, channels)` window.
    pub fn encode(&self, tape: &mut Tape, window: &Tensor, noise: Option<&LayerNoise>) -> Result<Var> {
        let states = self.encode_states(tape, window)?;
        self.encode_head(tape, states, noise)
    }

    /// Reconstructs `T` steps from the embedding. The result is time-major,
    /// `(T·batch, channels)` with row `t·batch + i`.
    pub fn decode(&self, tape: &mut Tape, h: Var, steps: usize, noise: Option<&LayerNoise>) -> Result<Var> {
        if steps == 0 {
            return Err(contract("decode_sequence needs T >= 1"));
        }
        let init = self
            .dec_init
            .forward(tape, h, noise_for(self.placement, Placement::Decoder, noise))?;
        let hd = self.hidden;
        let mut hs = tape.slice(init, 1, 0, hd)?;
        let mut cs = tape.slice(init, 1, hd, 2 * hd)?;
        let mut outs = Vec::with_capacity(steps);
        for _ in 0..steps {
            (hs, cs) = self.dec.step(tape, None, hs, cs)?;
            outs.push(hs);
        }
        let stacked = tape.concat(&outs, 0)?;
        self.dec_out
            .forward(tape, stacked, noise_for(self.placement, Placement::ReconHead, noise))
    }

    /// `ẑ = Linear₂(ReLU(Linear₁(h)))`, `(batch, n_static)`.
    pub fn static_head(&self, tape: &mut Tape, h: Var, noise: Option<&LayerNoise>) -> Result<Var> {
        let a = self
            .static1
            .forward(tape, h, noise_for(self.placement, Placement::StaticHead1, noise))?;
        let a = tape.relu(a)?;
        self.static2
            .forward(tape, a, noise_for(self.placement, Placement::StaticHead2, noise))
    }

    /// KL of the probabilistic layer to its prior, if there is one.
    pub fn kl(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let layer = match self.placement {
            Placement::Deterministic => return Ok(None),
            Placement::Encoder => self.enc_head,
            Placement::Decoder => self.dec_init,
            Placement::StaticHead1 => self.static1,
            Placement::StaticHead2 => self.static2,
            Placement::ReconHead => self.dec_out,
        };
        layer.kl(tape, self.prior_std)
    }
}

/// Rearranges a time-major `(T, batch, C)` window into the `(T·batch, C)`
/// layout produced by [`BoundModel::decode`].
pub fn flatten_time_major(window: &Tensor) -> Result<Tensor> {
    let s = window.shape();
    window.clone().reshape(vec![s[0] * s[1], s[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, value_and_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(placement: Placement) -> ModelConfig {
        ModelConfig {
            channels: 3,
            hidden: 4,
            static_hidden: 5,
            n_static: 2,
            placement,
            gate: GateActivation::Tanh,
            prior_std: 1.0,
            rho_init: -3.0,
        }
    }

    fn window(rng: &mut ChaCha8Rng, t: usize, b: usize) -> Tensor {
        Tensor::randn(&[t, b, 3], rng)
    }

    fn zero_all(model: &mut InverseModel, prefix: &str) {
        for (k, v) in model.params.iter_mut() {
            if k.starts_with(prefix) {
                *v = Tensor::zeros(v.shape());
            }
        }
    }

    fn run<T>(model: &InverseModel, f: impl FnOnce(&mut Tape, &BoundModel) -> Result<T>) -> T {
        let mut tape = Tape::new();
        let bound = tape.bind(&model.params);
        let bm = model.bind(&mut tape, &bound).unwrap();
        f(&mut tape, &bm).unwrap()
    }

    #[test]
    fn exactly_one_layer_is_variational() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in [
            Placement::Encoder,
            Placement::Decoder,
            Placement::StaticHead1,
            Placement::StaticHead2,
            Placement::ReconHead,
        ] {
            let m = InverseModel::init(config(p), &mut rng).unwrap();
            let n = m.params.keys().filter(|k| k.ends_with(".rho_w")).count();
            assert_eq!(n, 1, "{p:?}");
            assert!(m.params.contains_key(&format!("{}.rho_w", p.layer().unwrap())));
        }
        let m = InverseModel::init(config(Placement::Deterministic), &mut rng).unwrap();
        assert!(m.params.keys().all(|k| !k.contains("rho")));
    }

    #[test]
    fn zero_encoder_gives_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = InverseModel::init(config(Placement::Deterministic), &mut rng).unwrap();
        zero_all(&mut m, "enc");
        let w = window(&mut rng, 6, 2);
        let h = run(&m, |t, bm| { let v = bm.encode(t, &w, None)?; Ok(t.value(v).clone()) });
        assert_eq!(h.shape(), &[2, 8]);
        assert!(h.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reversed_sequence_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = InverseModel::init(config(Placement::Deterministic), &mut rng).unwrap();
        let fwd: Vec<(String, Tensor)> = m
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("enc_fwd."))
            .map(|(k, v)| (k.replace("enc_fwd.", "enc_bwd."), v.clone()))
            .collect();
        m.params.extend(fwd);
        let w = window(&mut rng, 7, 1);
        let mut rev = Vec::new();
        for k in (0..7).rev() {
            rev.extend_from_slice(w.rows(k, k + 1).unwrap().data());
        }
        let wr = Tensor::new(vec![7, 1, 3], rev).unwrap();
        let a = run(&m, |t, bm| { let v = bm.encode_states(t, &w)?; Ok(t.value(v).clone()) });
        let b = run(&m, |t, bm| { let v = bm.encode_states(t, &wr)?; Ok(t.value(v).clone()) });
        let (a, b) = (a.data(), b.data());
        for k in 0..4 {
            assert!((a[k] - b[k + 4]).abs() < 1e-14);
            assert!((a[k + 4] - b[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_decoder_reconstructs_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = InverseModel::init(config(Placement::Deterministic), &mut rng).unwrap();
        zero_all(&mut m, "dec");
        let w = window(&mut rng, 5, 2);
        let s = run(&m, |t, bm| {
            let h = bm.encode(t, &w, None)?;
            { let v = bm.decode(t, h, 5, None)?; Ok(t.value(v).clone()) }
        });
        assert_eq!(s.shape(), &[10, 3]);
        assert!(s.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_decode_is_head_of_one_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = InverseModel::init(config(Placement::Deterministic), &mut rng).unwrap();
        let h = Tensor::uniform(&[1, 8], 0.0, 1.0, &mut rng);
        let out = run(&m, |t, bm| {
            let hv = t.constant(h.clone());
            { let v = bm.decode(t, hv, 1, None)?; Ok(t.value(v).clone()) }
        });
        // by hand: init = W h + b, one cell update without input, then head
        let p = &m.params;
        let mut init = vec![0.0; 8];
        for (o, slot) in init.iter_mut().enumerate() {
            *slot = p["dec_init.b"].data()[o]
                + (0..8).map(|i| p["dec_init.w"].data()[o * 8 + i] * h.data()[i]).sum::<f64>();
        }
        let lstm = LstmParams::extract("dec", p).unwrap();
        let (h1, _) = super::super::lstm::lstm_cell(&[], &init[..4], &init[4..], &lstm, GateActivation::Tanh).unwrap();
        for c in 0..3 {
            let y = p["dec_out.b"].data()[c] + (0..4).map(|i| p["dec_out.w"].data()[c * 4 + i] * h1[i]).sum::<f64>();
            assert!((y - out.data()[c]).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_static_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = InverseModel::init(config(Placement::Deterministic), &mut rng).unwrap();
        zero_all(&mut m, "static1");
        m.params.insert("static2.w".into(), Tensor::zeros(&[2, 5]));
        m.params.insert("static2.b".into(), Tensor::vector(vec![0.3, -0.7]));
        let w = window(&mut rng, 4, 3);
        let z = run(&m, |t, bm| {
            let h = bm.encode(t, &w, None)?;
            { let v = bm.static_head(t, h, None)?; Ok(t.value(v).clone()) }
        });
        for row in z.data().chunks(2) {
            assert_eq!(row, &[0.3, -0.7]);
        }
    }

    #[test]
    fn zero_noise_matches_mean_weight_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in [Placement::Encoder, Placement::StaticHead1, Placement::StaticHead2] {
            let m = InverseModel::init(config(p), &mut rng).unwrap();
            let w = window(&mut rng, 5, 2);
            let (o, i) = m.config.noise_dims().unwrap();
            let zero = LayerNoise::zeros(o, i);
            let fresh = m.sample_noise(&mut rng).unwrap();
            let pass = |noise: Option<&LayerNoise>| {
                run(&m, |t, bm| {
                    let h = bm.encode(t, &w, noise)?;
                    { let v = bm.static_head(t, h, noise)?; Ok(t.value(v).clone()) }
                })
            };
            assert_eq!(pass(None), pass(Some(&zero)));
            assert_ne!(pass(None), pass(Some(&fresh)));
        }
    }

    #[test]
    fn batch_items_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = InverseModel::init(config(Placement::Encoder), &mut rng).unwrap();
        let w = window(&mut rng, 6, 3);
        let single = |i: usize| {
            let mut d = Vec::new();
            for t in 0..6 {
                d.extend_from_slice(&w.data()[(t * 3 + i) * 3..(t * 3 + i + 1) * 3]);
            }
            Tensor::new(vec![6, 1, 3], d).unwrap()
        };
        let all = run(&m, |t, bm| { let v = bm.encode(t, &w, None)?; Ok(t.value(v).clone()) });
        for i in 0..3 {
            let one = run(&m, |t, bm| { let v = bm.encode(t, &single(i), None)?; Ok(t.value(v).clone()) });
            for (a, b) in one.data().iter().zip(&all.data()[i * 8..(i + 1) * 8]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn empty_window_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = InverseModel::init(config(Placement::Encoder), &mut rng).unwrap();
        let w = Tensor::zeros(&[0, 1, 3]);
        let mut tape = Tape::new();
        let bound = tape.bind(&m.params);
        let bm = m.bind(&mut tape, &bound).unwrap();
        assert!(bm.encode(&mut tape, &w, None).is_err());
        let h = tape.constant(Tensor::zeros(&[1, 8]));
        assert!(bm.decode(&mut tape, h, 0, None).is_err());
    }

    #[test]
    fn encoder_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig {
            channels: 3,
            hidden: 3,
            ..config(Placement::Encoder)
        };
        let m = InverseModel::init(cfg, &mut rng).unwrap();
        let w = window(&mut rng, 10, 2);
        let noise = m.sample_noise(&mut rng);
        let params: ParamSet = m
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("enc"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let rest = m.params.clone();
        let err = finite_diff_check(
            |t, b| {
                let mut all = b.clone();
                for (k, v) in &rest {
                    if !all.contains_key(k) {
                        all.insert(k.clone(), t.constant(v.clone()));
                    }
                }
                let bm = m.bind(t, &all)?;
                let h = bm.encode(t, &w, noise.as_ref())?;
                let sq = t.square(h)?;
                t.sum(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
        let (_, g) = value_and_grad(
            |t, b| {
                let bm = m.bind(t, b)?;
                let h = bm.encode(t, &w, noise.as_ref())?;
                t.sum(h)
            },
            &m.params,
        )
        .unwrap();
        assert!(g["enc_head.rho_w"].max_abs() > 0.0);
    }
}
