//! JSON checkpoint format. Every real-valued array is stored as base64 of its
//! little-endian `f64` bytes together with its shape, so a round trip is
//! bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::distributions::FactorizedPrior;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::optim::{AdamW, ReduceOnPlateau};
use crate::prototypes::PrototypeStore;
use crate::trainer::{Checkpoint, Progress, TrainConfig};

pub const FORMAT: &str = "ordwae-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedArray {
    pub shape: [usize; 2],
    pub data: String,
}

impl EncodedArray {
    pub fn encode(a: &Array2<f64>) -> Self {
        let mut bytes = Vec::with_capacity(a.len() * 8);
        for v in a.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape: [a.nrows(), a.ncols()],
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self, what: &str) -> Result<Array2<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("{what}: invalid base64: {e}")))?;
        let [r, c] = self.shape;
        if bytes.len() != r * c * 8 {
            return Err(Error::Checkpoint(format!(
                "{what}: {} bytes do not fill shape {r} x {c}",
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        Array2::from_shape_vec((r, c), values)
            .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    #[serde(flatten)]
    array: EncodedArray,
}

#[derive(Debug, Serialize, Deserialize)]
struct PrototypeDoc {
    means: EncodedArray,
    counts: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerDoc {
    step: u64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<EncodedArray>,
    v: Vec<EncodedArray>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: Vec<NamedArray>,
    adaptive_s: EncodedArray,
    prototypes: PrototypeDoc,
    optimizer: OptimizerDoc,
    scheduler: ReduceOnPlateau,
    prior: Option<FactorizedPrior<f64>>,
    seed: u64,
    progress: Progress,
    best_val_qwk: Option<f64>,
    best_epoch: Option<usize>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let opt = &self.optimizer;
        let doc = CheckpointDoc {
            format: FORMAT.into(),
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            params: self
                .model
                .params
                .iter()
                .map(|(name, a)| NamedArray {
                    name: name.clone(),
                    array: EncodedArray::encode(a),
                })
                .collect(),
            adaptive_s: EncodedArray::encode(&self.model.s),
            prototypes: PrototypeDoc {
                means: EncodedArray::encode(&self.model.prototypes.means().to_owned()),
                counts: self.model.prototypes.counts().to_vec(),
            },
            optimizer: OptimizerDoc {
                step: opt.step,
                weight_decay: opt.weight_decay,
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                m: opt.m.iter().map(EncodedArray::encode).collect(),
                v: opt.v.iter().map(EncodedArray::encode).collect(),
            },
            scheduler: self.scheduler.clone(),
            prior: self.prior.clone(),
            seed: self.train_config.seed,
            progress: self.progress,
            best_val_qwk: self.best_val_qwk,
            best_epoch: self.best_epoch,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("malformed document: {e}")))?;
        if doc.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{}`",
                doc.format
            )));
        }
        if doc.seed != doc.train_config.seed {
            return Err(Error::Checkpoint(
                "seed disagrees with the training configuration".into(),
            ));
        }
        let params = doc
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), p.array.decode(&p.name)?)))
            .collect::<Result<Vec<_>>>()?;
        let decode_all = |v: &[EncodedArray], what: &str| -> Result<Vec<Array2<f64>>> {
            v.iter()
                .enumerate()
                .map(|(k, a)| a.decode(&format!("{what}[{k}]")))
                .collect()
        };
        let prototypes = PrototypeStore::from_parts(
            doc.prototypes.means.decode("prototypes")?,
            doc.prototypes.counts,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ck = Checkpoint {
            model: ModelState {
                config: doc.model_config,
                params,
                s: doc.adaptive_s.decode("adaptive_s")?,
                prototypes,
            },
            train_config: doc.train_config,
            optimizer: AdamW {
                beta1: doc.optimizer.beta1,
                beta2: doc.optimizer.beta2,
                eps: doc.optimizer.eps,
                weight_decay: doc.optimizer.weight_decay,
                m: decode_all(&doc.optimizer.m, "m")?,
                v: decode_all(&doc.optimizer.v, "v")?,
                step: doc.optimizer.step,
            },
            scheduler: doc.scheduler,
            prior: doc.prior,
            progress: doc.progress,
            best_val_qwk: doc.best_val_qwk,
            best_epoch: doc.best_epoch,
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::trainer::{train, Variant};

    #[test]
    fn array_round_trip_is_bit_exact() {
        let a = ndarray::array![[0.1, -0.0, f64::MIN_POSITIVE], [1e300, f64::NAN, 3.0]];
        let back = EncodedArray::encode(&a).decode("a").unwrap();
        assert!(a
            .iter()
            .zip(back.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn trained_checkpoint_round_trip() {
        let data = generate(&SynthConfig {
            num_classes: 3,
            samples_per_class: vec![30, 20, 20],
            input_dim: 6,
            ..SynthConfig::default()
        })
        .unwrap();
        let model = ModelConfig {
            input_dim: 6,
            hidden_dims: vec![8],
            latent_dim: 3,
            num_classes: 3,
            head_hidden: 4,
            variational: false,
        };
        let cfg = TrainConfig {
            variant: Variant::Full,
            epochs: 3,
            lr: 1e-3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &data, &model).unwrap();
        let back = Checkpoint::from_json(&out.last.to_json().unwrap()).unwrap();
        assert_eq!(back.model, out.last.model);
        assert_eq!(back.optimizer, out.last.optimizer);
        assert_eq!(back.scheduler, out.last.scheduler);
        assert_eq!(back.prior, out.last.prior);
        assert_eq!(back.train_config, out.last.train_config);
        assert_eq!(back, out.last);
        assert!(back.prior.is_some());
    }

    #[test]
    fn rejects_tampered_documents() {
        let cfg = TrainConfig::default();
        let ck = Checkpoint::initial(&cfg, &ModelConfig::default()).unwrap();
        let text = ck.to_json().unwrap();
        assert!(Checkpoint::from_json(&text.replace(FORMAT, "other/9")).is_err());
        assert!(Checkpoint::from_json(&text.replacen("enc.0.w", "enc.9.w", 1)).is_err());
        assert!(Checkpoint::from_json("{").is_err());
    }
}
