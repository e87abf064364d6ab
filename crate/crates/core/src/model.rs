//! MLP autoencoder with classification, asymmetric-dispersion and ordinal
//! regression heads on a shared latent code.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{contract, Error, Result};
use crate::losses::soft_clamp_sigma;
use crate::prototypes::PrototypeStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Encoder hidden widths, outermost first; the decoder mirrors them.
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub head_hidden: usize,
    /// Variational encoder producing a mean and log-variance.
    #[serde(default)]
    pub variational: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden_dims: vec![256, 128],
            latent_dim: 16,
            num_classes: 7,
            head_hidden: 64,
            variational: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::Config(format!(
                "latent_dim must be >= 2, got {}",
                self.latent_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.head_hidden == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("all layer widths must be positive".into()));
        }
        Ok(())
    }

    /// `(name, rows, cols)` of every parameter in a fixed order.
    pub fn parameter_layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut linear = |name: &str, fan_in: usize, fan_out: usize| {
            out.push((format!("{name}.w"), fan_in, fan_out));
            out.push((format!("{name}.b"), 1, fan_out));
        };
        let mut width = self.input_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            linear(&format!("enc.{i}"), width, h);
            width = h;
        }
        linear("enc.mean", width, self.latent_dim);
        if self.variational {
            linear("enc.logvar", width, self.latent_dim);
        }
        let mut width = self.latent_dim;
        for (i, &h) in self.hidden_dims.iter().rev().enumerate() {
            linear(&format!("dec.{i}"), width, h);
            width = h;
        }
        linear("dec.out", width, self.input_dim);
        for (head, outputs) in [("cls", self.num_classes), ("ag", 2), ("orm", 1)] {
            linear(&format!("{head}.0"), self.latent_dim, self.head_hidden);
            linear(&format!("{head}.1"), self.head_hidden, outputs);
        }
        out
    }
}

/// Named weights of a network, plus the learnable task log-variances and the
/// prototype store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Scalar> {
    pub config: ModelConfig,
    pub params: Vec<(String, Array2<T>)>,
    /// Adaptive log-variances for (CE, AG, ORM), `1 × 3`.
    pub s: Array2<T>,
    pub prototypes: PrototypeStore<T>,
}

impl<T: Scalar> ModelState<T> {
    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, rows, cols)| {
                let value = if name.ends_with(".w") {
                    let limit = (6.0 / (rows + cols) as f64).sqrt();
                    Array2::from_shape_simple_fn((rows, cols), || {
                        T::lit(rng.random_range(-limit..limit))
                    })
                } else {
                    Array2::zeros((rows, cols))
                };
                (name, value)
            })
            .collect();
        Ok(Self::with_params(config, params))
    }

    /// All weights and biases zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, r, c)| (name, Array2::zeros((r, c))))
            .collect();
        Ok(Self::with_params(config, params))
    }

    fn with_params(config: ModelConfig, params: Vec<(String, Array2<T>)>) -> Self {
        let prototypes = PrototypeStore::new(config.num_classes, config.latent_dim);
        Self {
            config,
            params,
            s: Array2::zeros((1, 3)),
            prototypes,
        }
    }

    /// Checks that parameter names and shapes follow the configured layout.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = self.config.parameter_layout();
        if layout.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len(),
                self.params.len()
            )));
        }
        for ((name, r, c), (got, value)) in layout.iter().zip(&self.params) {
            if name != got || value.dim() != (*r, *c) {
                return Err(Error::Checkpoint(format!(
                    "parameter {got} {:?} does not match layout entry {name} ({r}, {c})",
                    value.dim()
                )));
            }
        }
        if self.s.dim() != (1, 3) {
            return Err(Error::Checkpoint("adaptive weights must be 1 x 3".into()));
        }
        let protos = &self.prototypes;
        if protos.classes() != self.config.num_classes || protos.dim() != self.config.latent_dim {
            return Err(Error::Checkpoint(
                "prototype store shape does not match the model".into(),
            ));
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&Array2<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).sum()
    }

    /// Wraps every parameter in a fresh gradient-tracking node.
    pub fn bind(&self) -> BoundModel<T> {
        BoundModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(_, v)| Var::param(v.clone()))
                .collect(),
            s: Var::param(self.s.clone()),
            names: self.params.iter().map(|(n, _)| n.clone()).collect(),
        }
    }

    /// Binds caller-supplied nodes, one per entry of `params` in layout order,
    /// plus the adaptive log-variances `s`.
    pub fn bind_nodes(&self, params: Vec<Var<T>>, s: Var<T>) -> Result<BoundModel<T>> {
        if params.len() != self.params.len() {
            return contract(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                params.len()
            ));
        }
        for ((name, v), node) in self.params.iter().zip(&params) {
            if node.dims() != v.dim() {
                return contract(format!(
                    "node for {name} has shape {:?}, expected {:?}",
                    node.dims(),
                    v.dim()
                ));
            }
        }
        Ok(BoundModel {
            config: self.config.clone(),
            params,
            s,
            names: self.params.iter().map(|(n, _)| n.clone()).collect(),
        })
    }

    /// Same as [`bind`](Self::bind) but without gradient tracking.
    pub fn bind_frozen(&self) -> BoundModel<T> {
        BoundModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(_, v)| Var::constant(v.clone()))
                .collect(),
            s: Var::constant(self.s.clone()),
            names: self.params.iter().map(|(n, _)| n.clone()).collect(),
        }
    }
}

/// Latent code for a batch. In variational mode `z` is the reparameterized
/// draw (or the mean when no noise is supplied).
#[derive(Debug, Clone)]
pub struct Encoded<T: Scalar> {
    pub z: Var<T>,
    pub mean: Var<T>,
    pub logvar: Option<Var<T>>,
}

#[derive(Debug, Clone)]
pub struct HeadOutputs<T: Scalar> {
    /// `n × C`.
    pub logits: Var<T>,
    /// `n × 1`, in `[0.2, 5.0]`.
    pub sigma_l: Var<T>,
    pub sigma_r: Var<T>,
    /// `n × 1` unconstrained ordinal score.
    pub score: Var<T>,
}

#[derive(Debug, Clone)]
pub struct Forward<T: Scalar> {
    pub encoded: Encoded<T>,
    pub x_tilde: Var<T>,
    pub heads: HeadOutputs<T>,
}

/// Parameters of a [`ModelState`] bound into a computation graph.
pub struct BoundModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: Vec<Var<T>>,
    pub s: Var<T>,
    names: Vec<String>,
}

impl<T: Scalar> BoundModel<T> {
    fn get(&self, name: &str) -> &Var<T> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} missing from bound model"));
        &self.params[i]
    }

    fn linear(&self, name: &str, x: &Var<T>) -> Result<Var<T>> {
        x.matmul(self.get(&format!("{name}.w")))?
            .add(self.get(&format!("{name}.b")))
    }

    fn check_width(&self, x: &Var<T>, width: usize, op: &'static str) -> Result<()> {
        if x.dims().1 != width {
            return Err(Error::Shape {
                op,
                lhs: x.shape(),
                rhs: vec![width],
            });
        }
        Ok(())
    }

    /// `noise` (`n × d` standard normal draws) is used only in variational mode.
    pub fn encode(&self, x: &Var<T>, noise: Option<ArrayView2<'_, T>>) -> Result<Encoded<T>> {
        self.check_width(x, self.config.input_dim, "encode")?;
        let mut h = x.clone();
        for i in 0..self.config.hidden_dims.len() {
            h = self.linear(&format!("enc.{i}"), &h)?.tanh();
        }
        let mean = self.linear("enc.mean", &h)?;
        if !self.config.variational {
            return Ok(Encoded {
                z: mean.clone(),
                mean,
                logvar: None,
            });
        }
        let logvar = self.linear("enc.logvar", &h)?;
        let z = match noise {
            Some(eps) => {
                if eps.dim() != mean.dims() {
                    return Err(Error::Shape {
                        op: "reparameterize",
                        lhs: mean.shape(),
                        rhs: vec![eps.nrows(), eps.ncols()],
                    });
                }
                let std = logvar.mul_scalar(T::lit(0.5)).exp();
                mean.add(&std.mul(&Var::constant(eps.to_owned()))?)?
            }
            None => mean.clone(),
        };
        Ok(Encoded {
            z,
            mean,
            logvar: Some(logvar),
        })
    }

    /// Reconstruction in `[0, 1]` through a final logistic.
    pub fn decode(&self, z: &Var<T>) -> Result<Var<T>> {
        self.check_width(z, self.config.latent_dim, "decode")?;
        let mut h = z.clone();
        for i in 0..self.config.hidden_dims.len() {
            h = self.linear(&format!("dec.{i}"), &h)?.tanh();
        }
        Ok(self.linear("dec.out", &h)?.sigmoid())
    }

    fn head(&self, name: &str, z: &Var<T>) -> Result<Var<T>> {
        let h = self.linear(&format!("{name}.0"), z)?.tanh();
        self.linear(&format!("{name}.1"), &h)
    }

    pub fn heads(&self, z: &Var<T>) -> Result<HeadOutputs<T>> {
        self.check_width(z, self.config.latent_dim, "heads")?;
        let raw = self.head("ag", z)?;
        Ok(HeadOutputs {
            logits: self.head("cls", z)?,
            sigma_l: soft_clamp_sigma(&raw.columns(0, 1)?),
            sigma_r: soft_clamp_sigma(&raw.columns(1, 2)?),
            score: self.head("orm", z)?,
        })
    }

    pub fn forward(&self, x: &Var<T>, noise: Option<ArrayView2<'_, T>>) -> Result<Forward<T>> {
        let encoded = self.encode(x, noise)?;
        let x_tilde = self.decode(&encoded.z)?;
        let heads = self.heads(&encoded.z)?;
        Ok(Forward {
            encoded,
            x_tilde,
            heads,
        })
    }

    /// Current gradients, in parameter order.
    pub fn grads(&self) -> Vec<Array2<T>> {
        self.params.iter().map(Var::grad).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    #[default]
    Argmax,
    OrdinalRound,
}

/// Grade from a row of logits (first maximum wins) or from the rounded
/// ordinal score clamped to `[0, C−1]`.
pub fn predict<T: Scalar>(logits: &[T], score: T, mode: PredictMode) -> Result<usize> {
    let classes = logits.len();
    if classes == 0 {
        return contract("predict needs at least one logit");
    }
    Ok(match mode {
        PredictMode::Argmax => {
            let mut best = 0;
            for (j, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = j;
                }
            }
            best
        }
        PredictMode::OrdinalRound => {
            let r = score.round();
            if !(r > T::zero()) {
                0
            } else {
                r.to_usize().unwrap_or(usize::MAX).min(classes - 1)
            }
        }
    })
}

/// Predicted grades for every row of a forward pass.
pub fn predict_batch<T: Scalar>(heads: &HeadOutputs<T>, mode: PredictMode) -> Result<Vec<usize>> {
    let logits = heads.logits.value();
    let score = heads.score.value();
    logits
        .rows()
        .into_iter()
        .zip(score.column(0))
        .map(|(row, &s)| predict(&row.to_vec(), s, mode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{SIGMA_MAX, SIGMA_MIN};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_dims: vec![5, 4],
            latent_dim: 3,
            num_classes: 4,
            head_hidden: 3,
            variational: false,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Var<f64> {
        Var::constant(Array2::from_shape_simple_fn((n, d), || rng.random::<f64>()))
    }

    #[test]
    fn zero_weights_give_zero_latent() {
        let m = ModelState::<f64>::zeros(small()).unwrap().bind();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = m.encode(&batch(&mut rng, 3, 6), None).unwrap();
        assert_eq!(enc.z.dims(), (3, 3));
        assert!(enc.z.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let m = ModelState::<f64>::zeros(small()).unwrap().bind();
        assert!(m
            .encode(&Var::constant(Array2::zeros((2, 5))), None)
            .is_err());
        assert!(m.decode(&Var::constant(Array2::zeros((2, 4)))).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = ModelState::<f64>::init(small(), &mut rng).unwrap();
        let x = batch(&mut rng, 4, 6);
        let a = state.bind().encode(&x, None).unwrap().z.value().clone();
        let b = state.bind().encode(&x, None).unwrap().z.value().clone();
        assert_eq!(a, b);
    }

    #[test]
    fn outputs_have_expected_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = ModelState::<f64>::init(small(), &mut rng).unwrap();
        let z = Var::constant(Array2::from_shape_simple_fn((1000, 3), || {
            rng.random_range(-20.0..20.0)
        }));
        let m = state.bind();
        let x = m.decode(&z).unwrap();
        assert_eq!(x.dims(), (1000, 6));
        assert!(x.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let h = m.heads(&z).unwrap();
        assert_eq!(h.logits.dims(), (1000, 4));
        assert_eq!(h.score.dims(), (1000, 1));
        for s in [&h.sigma_l, &h.sigma_r] {
            assert!(s
                .value()
                .iter()
                .all(|&v| (SIGMA_MIN..=SIGMA_MAX).contains(&v)));
        }
    }

    #[test]
    fn variational_mode_reparameterizes() {
        let cfg = ModelConfig {
            variational: true,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = ModelState::<f64>::init(cfg, &mut rng).unwrap();
        let m = state.bind();
        let x = batch(&mut rng, 2, 6);
        let eps = Array2::from_elem((2, 3), 1.0);
        let enc = m.encode(&x, Some(eps.view())).unwrap();
        let lv = enc.logvar.as_ref().unwrap().value();
        let expected = enc.mean.value() + &lv.mapv(|v| (0.5 * v).exp());
        assert!((enc.z.value() - &expected).iter().all(|d| d.abs() < 1e-15));
        let det = m.encode(&x, None).unwrap();
        assert_eq!(det.z.value(), det.mean.value());
    }

    #[test]
    fn layout_matches_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = ModelState::<f64>::init(ModelConfig::default(), &mut rng).unwrap();
        state.validate().unwrap();
        assert!(state.param("enc.logvar.w").is_none());
        let w = state.param("enc.0.w").unwrap();
        let limit = (6.0f64 / (64.0 + 256.0)).sqrt();
        assert!(w.iter().all(|v| v.abs() <= limit));
        assert!(state.param("enc.0.b").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_modes() {
        assert_eq!(
            predict(&[0.1, 3.0, 0.2], 0.0, PredictMode::Argmax).unwrap(),
            1
        );
        let five = [0.0; 5];
        assert_eq!(predict(&five, 3.7, PredictMode::OrdinalRound).unwrap(), 4);
        assert_eq!(predict(&five, -1.2, PredictMode::OrdinalRound).unwrap(), 0);
        assert_eq!(predict(&five, 99.0, PredictMode::OrdinalRound).unwrap(), 4);
        assert_eq!(
            predict(&five, f64::NAN, PredictMode::OrdinalRound).unwrap(),
            0
        );
    }

    #[test]
    fn f32_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let state = ModelState::<f32>::init(small(), &mut rng).unwrap();
        let x = Var::constant(Array2::from_elem((2, 6), 0.5f32));
        let f = state.bind().forward(&x, None).unwrap();
        assert_eq!(f.x_tilde.dims(), (2, 6));
    }
}
