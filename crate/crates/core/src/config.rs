//! Flat `key = value` run configuration.
//!
//! Keys are field names of [`TrainConfig`], [`ModelConfig`] or
//! [`SynthConfig`], optionally qualified as `train.`, `model.` or `synth.`. An
//! unqualified key sets every section that has a field of that name. Lines
//! starting with `#` and trailing `# ...` comments are ignored.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::divergences::KernelSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PredictMode};
use crate::trainer::{KernelChoice, PriorRefit, TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    /// Fully qualified keys that were set explicitly, e.g. `model.input_dim`.
    pub explicit: BTreeSet<String>,
}

const TRAIN_KEYS: &[&str] = &[
    "variant",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "grad_clip_norm",
    "scheduler_factor",
    "scheduler_patience",
    "lambda_reg",
    "lambda_maoc",
    "margin",
    "compactness",
    "adaptive_weights",
    "prototype_momentum",
    "prior_beta",
    "prior_refit",
    "kernel",
    "predict_mode",
    "seed",
];
const MODEL_KEYS: &[&str] = &[
    "input_dim",
    "hidden_dims",
    "latent_dim",
    "num_classes",
    "head_hidden",
];
const SYNTH_KEYS: &[&str] = &[
    "num_classes",
    "samples_per_class",
    "input_dim",
    "severity_gap",
    "noise_sigma",
    "skew",
    "nuisance_dims",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean `{value}` for `{key}`"
        ))),
    }
}

/// `median_rbf`, `rbf:b1,b2,...` or `imq:c`.
pub fn parse_kernel(value: &str) -> Result<KernelChoice> {
    let (kind, args) = value.split_once(':').unwrap_or((value, ""));
    let choice = match kind.trim() {
        "median_rbf" | "median" => KernelChoice::MedianRbf,
        "rbf" => KernelChoice::Fixed(KernelSpec::rbf(parse_list("kernel", args)?)?),
        "imq" => KernelChoice::Fixed(KernelSpec::imq(parse("kernel", args.trim())?)?),
        _ => return Err(Error::Config(format!("unknown kernel `{value}`"))),
    };
    Ok(choice)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", k + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", k + 1, strip_prefix(&e))))?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::parse(&text)
    }

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = match key.split_once('.') {
            Some((s, f)) => (Some(s), f),
            None => (None, key),
        };
        let mut hit = false;
        let wants =
            |name: &str, keys: &[&str]| section.is_none_or(|s| s == name) && keys.contains(&field);
        if wants("train", TRAIN_KEYS) {
            self.set_train(field, value)?;
            self.explicit.insert(format!("train.{field}"));
            hit = true;
        }
        if wants("model", MODEL_KEYS) {
            self.set_model(field, value)?;
            self.explicit.insert(format!("model.{field}"));
            hit = true;
        }
        if wants("synth", SYNTH_KEYS) {
            self.set_synth(field, value)?;
            self.explicit.insert(format!("synth.{field}"));
            hit = true;
        }
        if !hit {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        Ok(())
    }

    pub fn is_explicit(&self, qualified: &str) -> bool {
        self.explicit.contains(qualified)
    }

    fn set_train(&mut self, field: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match field {
            "variant" => t.variant = v.parse::<Variant>()?,
            "lr" => t.lr = parse(field, v)?,
            "weight_decay" => t.weight_decay = parse(field, v)?,
            "batch_size" => t.batch_size = parse(field, v)?,
            "epochs" => t.epochs = parse(field, v)?,
            "grad_clip_norm" => t.grad_clip_norm = parse(field, v)?,
            "scheduler_factor" => t.scheduler_factor = parse(field, v)?,
            "scheduler_patience" => t.scheduler_patience = parse(field, v)?,
            "lambda_reg" => t.lambda_reg = parse(field, v)?,
            "lambda_maoc" => t.lambda_maoc = parse(field, v)?,
            "margin" => t.margin = parse(field, v)?,
            "compactness" => t.compactness = parse(field, v)?,
            "adaptive_weights" => {
                t.adaptive_weights = if v == "auto" {
                    None
                } else {
                    Some(parse_bool(field, v)?)
                }
            }
            "prototype_momentum" => t.prototype_momentum = parse(field, v)?,
            "prior_beta" => t.prior_beta = parse(field, v)?,
            "prior_refit" => {
                t.prior_refit = match v {
                    "per_epoch" => PriorRefit::PerEpoch,
                    "once_after_warmup" => PriorRefit::OnceAfterWarmup,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value `{v}` for `prior_refit`"
                        )))
                    }
                }
            }
            "kernel" => t.kernel = parse_kernel(v)?,
            "predict_mode" => {
                t.predict_mode = match v {
                    "argmax" => PredictMode::Argmax,
                    "ordinal_round" => PredictMode::OrdinalRound,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value `{v}` for `predict_mode`"
                        )))
                    }
                }
            }
            "seed" => t.seed = parse(field, v)?,
            _ => unreachable!("train key list out of sync"),
        }
        Ok(())
    }

    fn set_model(&mut self, field: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match field {
            "input_dim" => m.input_dim = parse(field, v)?,
            "hidden_dims" => m.hidden_dims = parse_list(field, v)?,
            "latent_dim" => m.latent_dim = parse(field, v)?,
            "num_classes" => m.num_classes = parse(field, v)?,
            "head_hidden" => m.head_hidden = parse(field, v)?,
            _ => unreachable!("model key list out of sync"),
        }
        Ok(())
    }

    fn set_synth(&mut self, field: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        match field {
            "num_classes" => s.num_classes = parse(field, v)?,
            "samples_per_class" => s.samples_per_class = parse_list(field, v)?,
            "input_dim" => s.input_dim = parse(field, v)?,
            "severity_gap" => s.severity_gap = parse(field, v)?,
            "noise_sigma" => s.noise_sigma = parse(field, v)?,
            "skew" => s.skew = parse(field, v)?,
            "nuisance_dims" => s.nuisance_dims = parse(field, v)?,
            "seed" => s.seed = parse(field, v)?,
            _ => unreachable!("synth key list out of sync"),
        }
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}
