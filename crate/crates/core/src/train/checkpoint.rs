use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::forward::ForwardModel;
use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::nn::{InverseModel, ModelConfig};

/// Stored inverse model. Floats round-trip exactly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseCheckpoint {
    pub model: ModelConfig,
    pub params: ParamSet,
    pub seed: u64,
    pub best_epoch: usize,
}

impl InverseCheckpoint {
    pub fn new(model: &InverseModel, seed: u64, best_epoch: usize) -> Self {
        Self {
            model: model.config.clone(),
            params: model.params.clone(),
            seed,
            best_epoch,
        }
    }

    pub fn to_model(&self) -> Result<InverseModel> {
        InverseModel::from_params(self.model.clone(), self.params.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardCheckpoint {
    pub model: ForwardModel,
    pub seed: u64,
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{GateActivation, Placement};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(placement: Placement) -> ModelConfig {
        ModelConfig {
            channels: 3,
            hidden: 3,
            static_hidden: 4,
            n_static: 2,
            placement,
            gate: GateActivation::Tanh,
            prior_std: 1.0,
            rho_init: -5.0,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_load_is_bit_exact(seed in any::<u64>(), scale in -1e6f64..1e6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = InverseModel::init(config(Placement::StaticHead2), &mut rng).unwrap();
            for t in model.params.values_mut() {
                for v in t.data_mut() {
                    *v *= scale;
                }
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ckpt.json");
            save_json(&InverseCheckpoint::new(&model, seed, 3), &path).unwrap();
            let back: InverseCheckpoint = load_json(&path).unwrap();
            let restored = back.to_model().unwrap();
            for (name, t) in &model.params {
                let r = &restored.params[name];
                prop_assert!(t.data().iter().zip(r.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = InverseModel::init(config(Placement::Encoder), &mut rng).unwrap();
        let mut ck = InverseCheckpoint::new(&model, 0, 0);
        ck.model.placement = Placement::Decoder;
        assert!(ck.to_model().unwrap_err().is_validation());
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.json"), "{").unwrap();
        assert!(load_json::<InverseCheckpoint>(&dir.path().join("bad.json")).unwrap_err().is_validation());
    }
}
