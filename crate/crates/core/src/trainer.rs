//! Training loop, evaluation, prior fitting and the ablation ladder.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::{Dataset, Split, SplitData};
use crate::distributions::{fit_aggd_per_coordinate, FactorizedPrior, PriorFit, DEFAULT_BETA};
use crate::divergences::{
    kl_diag_gaussian, kl_diag_gaussian_to, median_heuristic_kernel, mmd_sq, KernelSpec,
};
use crate::error::{contract, Error, Result};
use crate::losses::{
    ag_soft_loss, ce_loss, compose_total, maoc_loss, orm_loss, recon_loss, AdaptiveWeights,
    LossBreakdown, LossParts, DEFAULT_COMPACTNESS, DEFAULT_LAMBDA_MAOC, DEFAULT_LAMBDA_REG,
    DEFAULT_MARGIN, HUBER_TAU,
};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{predict_batch, Forward, ModelConfig, ModelState, PredictMode};
use crate::optim::{clip_global_norm, AdamW, ReduceOnPlateau};
use crate::prototypes::{PrototypeStore, DEFAULT_MOMENTUM};

/// Rungs of the ablation ladder. Each rung keeps everything the previous one
/// enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    VaeKl,
    VaeKlAs,
    WaeMmd,
    WaeMmdAs,
    AgSoft,
    Orm,
    Maoc,
    Full,
}

/// Latent regularizer selected by a variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegTarget {
    /// Pointwise KL to `N(0, I)`.
    KlStandard,
    /// Pointwise KL to the Gaussian with the fitted prior's moments.
    KlSurrogate,
    /// Aggregate MMD to `N(0, I)` samples.
    MmdStandard,
    /// Aggregate MMD to samples of the fitted asymmetric prior.
    MmdFitted,
}

impl Variant {
    pub const LADDER: [Variant; 8] = [
        Variant::VaeKl,
        Variant::VaeKlAs,
        Variant::WaeMmd,
        Variant::WaeMmdAs,
        Variant::AgSoft,
        Variant::Orm,
        Variant::Maoc,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VaeKl => "vae_kl",
            Variant::VaeKlAs => "vae_kl_as",
            Variant::WaeMmd => "wae_mmd",
            Variant::WaeMmdAs => "wae_mmd_as",
            Variant::AgSoft => "ag_soft",
            Variant::Orm => "orm",
            Variant::Maoc => "maoc",
            Variant::Full => "full",
        }
    }

    pub fn reg_target(self) -> RegTarget {
        match self {
            Variant::VaeKl => RegTarget::KlStandard,
            Variant::VaeKlAs => RegTarget::KlSurrogate,
            Variant::WaeMmd => RegTarget::MmdStandard,
            _ => RegTarget::MmdFitted,
        }
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Variant::VaeKl | Variant::VaeKlAs)
    }

    pub fn uses_fitted_prior(self) -> bool {
        matches!(
            self.reg_target(),
            RegTarget::KlSurrogate | RegTarget::MmdFitted
        )
    }

    pub fn uses_ag(self) -> bool {
        self >= Variant::AgSoft
    }

    pub fn uses_orm(self) -> bool {
        self >= Variant::Orm
    }

    pub fn uses_maoc(self) -> bool {
        self >= Variant::Maoc
    }

    pub fn adaptive_by_default(self) -> bool {
        self == Variant::Full
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s
            .trim()
            .trim_start_matches('+')
            .to_ascii_lowercase()
            .replace(['-', ' '], "_");
        let alias = match key.as_str() {
            "maoc_loss" => "maoc",
            other => other,
        };
        Variant::LADDER
            .into_iter()
            .find(|v| v.name() == alias)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorRefit {
    OnceAfterWarmup,
    #[default]
    PerEpoch,
}

/// Kernel used by the MMD regularizer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    /// Multiscale RBF at half, one and two times the batch median distance.
    #[default]
    MedianRbf,
    Fixed(KernelSpec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub lambda_reg: f64,
    pub lambda_maoc: f64,
    pub margin: f64,
    pub compactness: f64,
    /// `None` follows the variant (on for `full` only).
    pub adaptive_weights: Option<bool>,
    pub prototype_momentum: f64,
    pub prior_beta: f64,
    pub prior_refit: PriorRefit,
    pub kernel: KernelChoice,
    pub predict_mode: PredictMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 32,
            epochs: 100,
            grad_clip_norm: 1.0,
            scheduler_factor: 0.2,
            scheduler_patience: 7,
            lambda_reg: DEFAULT_LAMBDA_REG,
            lambda_maoc: DEFAULT_LAMBDA_MAOC,
            margin: DEFAULT_MARGIN,
            compactness: DEFAULT_COMPACTNESS,
            adaptive_weights: None,
            prototype_momentum: DEFAULT_MOMENTUM,
            prior_beta: DEFAULT_BETA,
            prior_refit: PriorRefit::PerEpoch,
            kernel: KernelChoice::MedianRbf,
            predict_mode: PredictMode::Argmax,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adaptive(&self) -> bool {
        self.adaptive_weights
            .unwrap_or(self.variant.adaptive_by_default())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("grad_clip_norm", self.grad_clip_norm)?;
        positive("prior_beta", self.prior_beta)?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return Err(Error::Config(format!(
                "scheduler_factor must lie in (0, 1), got {}",
                self.scheduler_factor
            )));
        }
        if !(0.0..1.0).contains(&self.prototype_momentum) {
            return Err(Error::Config(format!(
                "prototype_momentum must lie in [0, 1), got {}",
                self.prototype_momentum
            )));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!(
                "margin must lie in [0, 1), got {}",
                self.margin
            )));
        }
        if let KernelChoice::Fixed(k) = &self.kernel {
            k.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Model configuration with the encoder mode the variant needs.
    pub fn model_config_for(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            variational: self.variant.is_variational(),
            ..base.clone()
        }
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_STEP: u64 = 3;
const STREAM_EVAL: u64 = 4;

/// Independent 64-bit seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut x = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17);
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

/// Everything needed to evaluate a model or continue its training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState<f64>,
    pub train_config: TrainConfig,
    pub optimizer: AdamW<f64>,
    pub scheduler: ReduceOnPlateau,
    pub prior: Option<FactorizedPrior<f64>>,
    pub progress: Progress,
    pub best_val_qwk: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl Checkpoint {
    /// Freshly initialized weights for `cfg`.
    pub fn initial(cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = cfg.model_config_for(model_cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT, 0));
        let model = ModelState::init(model_cfg, &mut rng)?;
        let mut shapes: Vec<(usize, usize)> = model.params.iter().map(|(_, v)| v.dim()).collect();
        shapes.push(model.s.dim());
        Ok(Self {
            optimizer: AdamW::new(&shapes, cfg.weight_decay),
            scheduler: ReduceOnPlateau::new(cfg.lr, cfg.scheduler_factor, cfg.scheduler_patience)?,
            model,
            train_config: cfg.clone(),
            prior: None,
            progress: Progress::default(),
            best_val_qwk: None,
            best_epoch: None,
        })
    }

    /// Consistency of the stored pieces with each other.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config.validate()?;
        let expected = self.model.params.len() + 1;
        if self.optimizer.m.len() != expected || self.optimizer.v.len() != expected {
            return Err(Error::Checkpoint(format!(
                "optimizer state covers {} tensors, model has {expected}",
                self.optimizer.m.len()
            )));
        }
        let shapes = self
            .model
            .params
            .iter()
            .map(|(_, v)| v.dim())
            .chain([self.model.s.dim()]);
        for (k, dim) in shapes.enumerate() {
            if self.optimizer.m[k].dim() != dim || self.optimizer.v[k].dim() != dim {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment {k} has the wrong shape"
                )));
            }
        }
        if let Some(p) = &self.prior {
            if p.dim() != self.model.config.latent_dim {
                return Err(Error::Checkpoint(
                    "prior dimension does not match the latent size".into(),
                ));
            }
        }
        if self.model.config.variational != self.train_config.variant.is_variational() {
            return Err(Error::Checkpoint(
                "encoder mode does not match the variant".into(),
            ));
        }
        Ok(())
    }
}

/// Best and most recent checkpoints plus the per-epoch trace (a train and a
/// val report per epoch).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub trace: Vec<MetricsReport>,
}

fn check_split(model: &ModelConfig, data: &SplitData, name: &str) -> Result<()> {
    if data.input_dim() != model.input_dim {
        return contract(format!(
            "{name} split has {} features, model expects {}",
            data.input_dim(),
            model.input_dim
        ));
    }
    if data.num_classes != model.num_classes {
        return contract(format!(
            "{name} split has {} classes, model expects {}",
            data.num_classes, model.num_classes
        ));
    }
    Ok(())
}

fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Terms of the objective for one forward pass.
#[allow(clippy::too_many_arguments)]
fn loss_parts(
    cfg: &TrainConfig,
    fwd: &Forward<f64>,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    prior: Option<&FactorizedPrior<f64>>,
    prototypes: &PrototypeStore<f64>,
    reg_active: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts<f64>> {
    let variant = cfg.variant;
    let enc = &fwd.encoded;
    let reg = if !reg_active {
        None
    } else {
        let logvar = || {
            enc.logvar
                .as_ref()
                .ok_or_else(|| Error::Contract("KL regularizer needs a variational encoder".into()))
        };
        let fitted = || {
            prior.ok_or_else(|| {
                Error::Contract("fitted prior requested before the first fit".into())
            })
        };
        Some(match variant.reg_target() {
            RegTarget::KlStandard => kl_diag_gaussian(&enc.mean, logvar()?)?,
            RegTarget::KlSurrogate => {
                let p = fitted()?;
                let mean: Vec<f64> = p.coords.iter().map(|c| c.mean()).collect();
                let var: Vec<f64> = p.coords.iter().map(|c| c.variance()).collect();
                kl_diag_gaussian_to(&enc.mean, logvar()?, &mean, &var)?
            }
            target @ (RegTarget::MmdStandard | RegTarget::MmdFitted) => {
                let (n, d) = enc.z.dims();
                let samples = if target == RegTarget::MmdStandard {
                    FactorizedPrior::standard_gaussian(d).sample(n, rng)?
                } else {
                    fitted()?.sample(n, rng)?
                };
                let kernel = match &cfg.kernel {
                    KernelChoice::MedianRbf => {
                        median_heuristic_kernel(enc.z.value().view(), samples.view())
                    }
                    KernelChoice::Fixed(k) => k.clone(),
                };
                mmd_sq(&enc.z, samples.view(), &kernel)?
            }
        })
    };
    let maoc = if variant.uses_maoc() {
        Some(maoc_loss(&enc.z, labels, prototypes, cfg.margin, cfg.compactness)?.loss)
    } else {
        None
    };
    let heads = &fwd.heads;
    Ok(LossParts {
        recon: recon_loss(x, &fwd.x_tilde)?,
        reg,
        maoc,
        ce: Some(ce_loss(&heads.logits, labels)?),
        ag: if variant.uses_ag() {
            Some(ag_soft_loss(
                &heads.logits,
                labels,
                &heads.sigma_l,
                &heads.sigma_r,
            )?)
        } else {
            None
        },
        orm: if variant.uses_orm() {
            Some(orm_loss(&heads.score, labels, HUBER_TAU)?)
        } else {
            None
        },
    })
}

fn reg_active(ck: &Checkpoint) -> bool {
    !ck.train_config.variant.uses_fitted_prior() || ck.prior.is_some()
}

/// Result of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: LossBreakdown<f64>,
    pub predictions: Vec<usize>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Forward, backward, clip, update and prototype refresh on one batch.
pub fn train_step(ck: &mut Checkpoint, x: &Array2<f64>, labels: &[usize]) -> Result<StepReport> {
    let cfg = ck.train_config.clone();
    let (epoch, step) = (ck.progress.epoch, ck.progress.step);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_STEP, step as u64));
    let bound = ck.model.bind();
    let noise = cfg
        .variant
        .is_variational()
        .then(|| standard_normal(&mut rng, x.nrows(), ck.model.config.latent_dim));
    let fwd = bound.forward(&Var::constant(x.clone()), noise.as_ref().map(|n| n.view()))?;
    let active = reg_active(ck);
    let parts = loss_parts(
        &cfg,
        &fwd,
        x.view(),
        labels,
        ck.prior.as_ref(),
        &ck.model.prototypes,
        active,
        &mut rng,
    )?;
    let weights = if cfg.adaptive() {
        AdaptiveWeights::adaptive(bound.s.clone())
    } else {
        AdaptiveWeights::fixed()
    };
    let (total, loss) = compose_total(&parts, &weights, cfg.lambda_reg, cfg.lambda_maoc)?;
    if let Some(term) = loss.first_non_finite() {
        return Err(Error::NonFinite { term, epoch, step });
    }
    total.backward()?;
    let mut grads = bound.grads();
    grads.push(bound.s.grad());
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            term: "gradient",
            epoch,
            step,
        });
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
    let decay: Vec<bool> = ck
        .model
        .params
        .iter()
        .map(|(n, _)| n.ends_with(".w"))
        .chain([false])
        .collect();
    let lr = ck.scheduler.lr;
    let model = &mut ck.model;
    let mut params: Vec<&mut Array2<f64>> = model.params.iter_mut().map(|(_, v)| v).collect();
    params.push(&mut model.s);
    ck.optimizer.update(&mut params, &grads, &decay, lr)?;
    model.prototypes.update(
        fwd.encoded.mean.value().view(),
        labels,
        cfg.prototype_momentum,
    )?;
    ck.progress.step += 1;
    Ok(StepReport {
        loss,
        predictions: predict_batch(&fwd.heads, cfg.predict_mode)?,
        grad_norm,
    })
}

/// Encodes rows in batches without tracking gradients; returns the latent
/// means.
pub fn encode_all(
    model: &ModelState<f64>,
    x: ArrayView2<'_, f64>,
    batch: usize,
) -> Result<Array2<f64>> {
    let bound = model.bind_frozen();
    let mut out = Array2::zeros((x.nrows(), model.config.latent_dim));
    for start in (0..x.nrows()).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(x.nrows());
        let xb = Var::constant(x.slice(ndarray::s![start..end, ..]).to_owned());
        let enc = bound.encode(&xb, None)?;
        out.slice_mut(ndarray::s![start..end, ..])
            .assign(enc.mean.value());
    }
    Ok(out)
}

/// Fits the per-coordinate asymmetric prior to the latent means of `train`.
pub fn fit_prior(model: &ModelState<f64>, train: &SplitData, beta: f64) -> Result<PriorFit<f64>> {
    check_split(&model.config, train, "train")?;
    if train.len() < 2 {
        return contract(format!(
            "prior fit needs at least 2 training samples, got {}",
            train.len()
        ));
    }
    let z = encode_all(model, train.features.view(), 256)?;
    fit_aggd_per_coordinate(z.view(), beta)
}

/// Fits the prior for a checkpoint and stores it there.
pub fn fit_prior_stage(ck: &mut Checkpoint, train: &SplitData) -> Result<FactorizedPrior<f64>> {
    let fit = fit_prior(&ck.model, train, ck.train_config.prior_beta)?;
    ck.prior = Some(fit.prior.clone());
    Ok(fit.prior)
}

/// One deterministic pass over a split without touching the weights.
pub fn evaluate(ck: &Checkpoint, data: &SplitData, split: &str) -> Result<MetricsReport> {
    check_split(&ck.model.config, data, split)?;
    if data.is_empty() {
        return contract(format!("cannot evaluate an empty {split} split"));
    }
    let cfg = &ck.train_config;
    let bound = ck.model.bind_frozen();
    let mut confusion = ConfusionMatrix::new(data.num_classes);
    let mut sum = LossBreakdown::zeroed();
    let active = reg_active(ck);
    let weights = if cfg.adaptive() {
        AdaptiveWeights::adaptive(bound.s.clone())
    } else {
        AdaptiveWeights::fixed()
    };
    let batch = cfg.batch_size;
    let n = data.len();
    let mut start = 0;
    let mut index = 0u64;
    while start < n {
        let mut end = (start + batch).min(n);
        // Keep every batch at least two rows so the MMD estimate is defined.
        if n - end == 1 {
            end = n;
        }
        let idx: Vec<usize> = (start..end).collect();
        let (x, labels) = data.select(&idx);
        let fwd = bound.forward(&Var::constant(x.clone()), None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EVAL, index));
        let reg_ok = active
            && (labels.len() >= 2
                || !matches!(
                    cfg.variant.reg_target(),
                    RegTarget::MmdStandard | RegTarget::MmdFitted
                ));
        let parts = loss_parts(
            cfg,
            &fwd,
            x.view(),
            &labels,
            ck.prior.as_ref(),
            &ck.model.prototypes,
            reg_ok,
            &mut rng,
        )?;
        let (_, loss) = compose_total(&parts, &weights, cfg.lambda_reg, cfg.lambda_maoc)?;
        sum.accumulate(&loss, labels.len() as f64 / n as f64);
        for (&t, p) in labels
            .iter()
            .zip(predict_batch(&fwd.heads, cfg.predict_mode)?)
        {
            confusion.record(t, p)?;
        }
        start = end;
        index += 1;
    }
    MetricsReport::from_confusion(ck.progress.epoch, split, confusion, sum, ck.scheduler.lr)
}

/// Trains a fresh model for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, data: &Dataset, model_cfg: &ModelConfig) -> Result<TrainOutcome> {
    let start = Checkpoint::initial(cfg, model_cfg)?;
    run_epochs(start.clone(), start, data, &mut |_| Ok(()))
}

/// Same as [`train`], calling `on_epoch` after every completed epoch.
pub fn train_with(
    cfg: &TrainConfig,
    data: &Dataset,
    model_cfg: &ModelConfig,
    on_epoch: &mut dyn FnMut(&EpochEnd<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let start = Checkpoint::initial(cfg, model_cfg)?;
    run_epochs(start.clone(), start, data, on_epoch)
}

/// Continues training from `last` until `epochs` epochs are complete in total.
pub fn resume(
    mut last: Checkpoint,
    best: Checkpoint,
    data: &Dataset,
    epochs: usize,
) -> Result<TrainOutcome> {
    last.validate()?;
    last.train_config.epochs = epochs;
    run_epochs(last, best, data, &mut |_| Ok(()))
}

/// State handed to the per-epoch callback.
pub struct EpochEnd<'a> {
    pub last: &'a Checkpoint,
    pub best: &'a Checkpoint,
    pub train: &'a MetricsReport,
    pub val: &'a MetricsReport,
}

fn run_epochs(
    mut last: Checkpoint,
    mut best: Checkpoint,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochEnd<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let cfg = last.train_config.clone();
    cfg.validate()?;
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    check_split(&last.model.config, &train, "train")?;
    check_split(&last.model.config, &val, "val")?;
    if train.len() < 2 || val.is_empty() {
        return contract(format!(
            "training needs at least 2 train and 1 val sample, got {} and {}",
            train.len(),
            val.len()
        ));
    }
    let mut trace = Vec::new();
    for epoch in last.progress.epoch..cfg.epochs {
        if cfg.variant.uses_fitted_prior()
            && epoch >= 1
            && (cfg.prior_refit == PriorRefit::PerEpoch || last.prior.is_none())
        {
            let fit = fit_prior(&last.model, &train, cfg.prior_beta)?;
            last.prior = Some(fit.prior);
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            STREAM_SHUFFLE,
            epoch as u64,
        )));
        let mut sum = LossBreakdown::zeroed();
        let mut seen = 0usize;
        let mut confusion = ConfusionMatrix::new(train.num_classes);
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let (x, labels) = train.select(idx);
            let step = train_step(&mut last, &x, &labels)?;
            sum.accumulate(&step.loss, labels.len() as f64);
            seen += labels.len();
            for (&t, &p) in labels.iter().zip(&step.predictions) {
                confusion.record(t, p)?;
            }
        }
        let lr_used = last.scheduler.lr;
        let train_report = MetricsReport::from_confusion(
            epoch,
            "train",
            confusion,
            sum.scaled(1.0 / seen as f64),
            lr_used,
        )?;
        last.progress.epoch = epoch + 1;
        let mut val_report = evaluate(&last, &val, "val")?;
        val_report.epoch = epoch;
        val_report.lr = lr_used;
        if last.scheduler.observe(val_report.qwk) {
            log::info!(
                "epoch {epoch}: learning rate reduced to {:e}",
                last.scheduler.lr
            );
        }
        if last.best_val_qwk.is_none_or(|b| val_report.qwk > b) {
            last.best_val_qwk = Some(val_report.qwk);
            last.best_epoch = Some(epoch);
            best = last.clone();
        }
        log::debug!(
            "epoch {epoch}: train loss {:.4} val qwk {:.4} acc {:.4}",
            train_report.loss.total,
            val_report.qwk,
            val_report.acc
        );
        on_epoch(&EpochEnd {
            last: &last,
            best: &best,
            train: &train_report,
            val: &val_report,
        })?;
        trace.push(train_report);
        trace.push(val_report);
    }
    Ok(TrainOutcome { best, last, trace })
}

/// One trained run of the ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub test: MetricsReport,
    pub best_val_qwk: f64,
}

/// Runs for every (ladder entry, seed) pair, in ladder order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ladder: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub runs: Vec<Vec<AblationRun>>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl AblationTable {
    /// Median test (QWK, accuracy, macro-F1) of ladder row `row` over seeds.
    pub fn medians(&self, row: usize) -> (f64, f64, f64) {
        let runs = &self.runs[row];
        let pick = |f: fn(&AblationRun) -> f64| median(&mut runs.iter().map(f).collect::<Vec<_>>());
        (
            pick(|r| r.test.qwk),
            pick(|r| r.test.acc),
            pick(|r| r.test.macro_f1),
        )
    }

    /// One row per ladder entry with the median test metrics.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,qwk,acc,macro_f1,seeds\n");
        for (row, v) in self.ladder.iter().enumerate() {
            let (q, a, f) = self.medians(row);
            out.push_str(&format!("{v},{q},{a},{f},{}\n", self.seeds.len()));
        }
        out
    }

    /// One row per run.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("variant,seed,qwk,acc,macro_f1,best_val_qwk\n");
        for runs in &self.runs {
            for r in runs {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.variant, r.seed, r.test.qwk, r.test.acc, r.test.macro_f1, r.best_val_qwk
                ));
            }
        }
        out
    }
}

/// Trains `base` once per variant and seed on the same data and reports test
/// metrics of each best-validation checkpoint. Independent runs are spread
/// over up to `threads` workers; each run is single-threaded, so results do
/// not depend on the worker count.
pub fn run_ablation(
    base: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Dataset,
    ladder: &[Variant],
    seeds: &[u64],
    threads: usize,
) -> Result<AblationTable> {
    if ladder.len() < 2 {
        return contract(format!(
            "an ablation needs at least 2 variants, got {}",
            ladder.len()
        ));
    }
    if seeds.is_empty() {
        return contract("an ablation needs at least one seed");
    }
    let test = data.split(Split::Test);
    if test.is_empty() {
        return contract("an ablation needs a non-empty test split");
    }
    let jobs: Vec<(usize, usize)> = (0..ladder.len())
        .flat_map(|r| (0..seeds.len()).map(move |s| (r, s)))
        .collect();
    let run_one = |&(r, s): &(usize, usize)| -> Result<AblationRun> {
        let cfg = TrainConfig {
            variant: ladder[r],
            seed: seeds[s],
            ..base.clone()
        };
        let out = train(&cfg, data, model_cfg)?;
        Ok(AblationRun {
            variant: ladder[r],
            seed: seeds[s],
            test: evaluate(&out.best, &test, "test")?,
            best_val_qwk: out.best.best_val_qwk.unwrap_or(f64::NAN),
        })
    };
    let workers = threads.clamp(1, jobs.len());
    let results: Vec<Result<AblationRun>> = if workers == 1 {
        jobs.iter().map(run_one).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<AblationRun>>>> =
            jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if k >= jobs.len() {
                        break;
                    }
                    let r = run_one(&jobs[k]);
                    *slots[k].lock().expect("result slot poisoned") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .expect("result slot poisoned")
                    .expect("job finished")
            })
            .collect()
    };
    let mut runs: Vec<Vec<AblationRun>> = vec![Vec::new(); ladder.len()];
    for ((r, _), res) in jobs.iter().zip(results) {
        runs[*r].push(res?);
    }
    Ok(AblationTable {
        ladder: ladder.to_vec(),
        seeds: seeds.to_vec(),
        runs,
    })
}

/// Latent means of a split, for diagnostics.
pub fn latents(ck: &Checkpoint, data: &SplitData) -> Result<Array2<f64>> {
    check_split(&ck.model.config, data, "input")?;
    encode_all(&ck.model, data.features.view(), 256)
}

/// Mean latent per class over a split, `C × d`, for classes that occur.
pub fn class_means(z: ArrayView2<'_, f64>, labels: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((classes, z.ncols()));
    let mut counts = vec![0usize; classes];
    for (row, &y) in z.axis_iter(Axis(0)).zip(labels) {
        out.row_mut(y).scaled_add(1.0, &row);
        counts[y] += 1;
    }
    for (c, n) in counts.into_iter().enumerate() {
        if n > 0 {
            out.row_mut(c).mapv_inplace(|v| v / n as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    fn tiny_data() -> Dataset {
        generate(&SynthConfig {
            num_classes: 3,
            samples_per_class: vec![40, 25, 20],
            input_dim: 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_dim: 8,
            hidden_dims: vec![16, 8],
            latent_dim: 4,
            num_classes: 3,
            head_hidden: 8,
            variational: false,
        }
    }

    fn cfg(variant: Variant, epochs: usize) -> TrainConfig {
        TrainConfig {
            variant,
            epochs,
            lr: 3e-3,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::LADDER {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("+ag_soft".parse::<Variant>().unwrap(), Variant::AgSoft);
        assert!("resnet".parse::<Variant>().is_err());
    }

    #[test]
    fn ladder_is_cumulative() {
        assert!(!Variant::WaeMmdAs.uses_ag());
        assert!(Variant::AgSoft.uses_ag() && !Variant::AgSoft.uses_orm());
        assert!(Variant::Full.uses_maoc() && Variant::Full.uses_fitted_prior());
        assert!(Variant::Maoc.uses_orm() && !Variant::Maoc.adaptive_by_default());
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let c = cfg(Variant::Full, 0);
        let out = train(&c, &tiny_data(), &tiny_model()).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.best, Checkpoint::initial(&c, &tiny_model()).unwrap());
    }

    #[test]
    fn every_variant_trains_a_few_epochs() {
        let data = tiny_data();
        for v in Variant::LADDER {
            let out = train(&cfg(v, 3), &data, &tiny_model()).unwrap();
            assert_eq!(out.trace.len(), 6, "{v}");
            assert!(out.trace.iter().all(|r| r.loss.total.is_finite()), "{v}");
            if v.uses_fitted_prior() {
                assert!(out.last.prior.is_some());
                assert_eq!(
                    out.trace[0].loss.reg, 0.0,
                    "{v} warm-up epoch has no regularizer"
                );
                assert!(out.trace[2].loss.reg != 0.0, "{v}");
            }
        }
    }

    #[test]
    fn evaluate_is_pure() {
        let data = tiny_data();
        let out = train(&cfg(Variant::Maoc, 2), &data, &tiny_model()).unwrap();
        let val = data.split(Split::Val);
        let before = out.best.clone();
        let a = evaluate(&out.best, &val, "val").unwrap();
        let b = evaluate(&out.best, &val, "val").unwrap();
        assert_eq!(a, b);
        assert_eq!(before, out.best);
    }

    #[test]
    fn best_checkpoint_has_max_val_qwk() {
        let data = tiny_data();
        let out = train(&cfg(Variant::WaeMmd, 6), &data, &tiny_model()).unwrap();
        let best = out
            .trace
            .iter()
            .filter(|r| r.split == "val")
            .map(|r| r.qwk)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best.best_val_qwk, Some(best));
        let epoch = out.best.best_epoch.unwrap();
        assert_eq!(out.best.progress.epoch, epoch + 1);
    }

    #[test]
    fn rejects_mismatched_data() {
        let data = tiny_data();
        let mut m = tiny_model();
        m.input_dim = 9;
        assert!(train(&cfg(Variant::Full, 1), &data, &m).is_err());
    }

    #[test]
    fn non_finite_loss_names_term() {
        let data = tiny_data();
        let mut ck = Checkpoint::initial(&cfg(Variant::VaeKl, 1), &tiny_model()).unwrap();
        for (name, w) in ck.model.params.iter_mut() {
            if name == "enc.logvar.b" {
                w.fill(1e6);
            }
        }
        let train = data.split(Split::Train);
        let (x, y) = train.select(&(0..8).collect::<Vec<_>>());
        match train_step(&mut ck, &x, &y) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "recon"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn prior_fit_on_zero_encoder() {
        let data = tiny_data();
        let model = ModelState::<f64>::zeros(tiny_model()).unwrap();
        let fit = fit_prior(&model, &data.split(Split::Train), 1.2).unwrap();
        for c in &fit.prior.coords {
            assert_eq!(c.mu, 0.0);
            assert_eq!(c.alpha_l, crate::distributions::ALPHA_MIN);
            assert_eq!(c.alpha_r, crate::distributions::ALPHA_MIN);
        }
        let again = fit_prior(&model, &data.split(Split::Train), 1.2).unwrap();
        assert_eq!(fit.prior, again.prior);
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(7, STREAM_STEP, 0);
        assert_ne!(a, derive_seed(7, STREAM_STEP, 1));
        assert_ne!(a, derive_seed(7, STREAM_SHUFFLE, 0));
        assert_ne!(a, derive_seed(8, STREAM_STEP, 0));
        assert_eq!(a, derive_seed(7, STREAM_STEP, 0));
    }
}
