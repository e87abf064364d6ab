//! Central finite-difference checks of reverse-mode gradients for every
//! differentiable op, loss and the full network objective.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::divergences::{kl_diag_gaussian, kl_diag_gaussian_to, mmd_sq, KernelSpec};
use crate::error::{Error, Result};
use crate::losses::{
    ag_soft_loss, ce_loss, compose_total, maoc_loss, orm_loss, recon_loss, soft_clamp_sigma,
    AdaptiveWeights, LossParts,
};
use crate::model::{ModelConfig, ModelState};
use crate::prototypes::PrototypeStore;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

pub type Objective = Box<dyn Fn(&[Var<f64>]) -> Result<Var<f64>>>;

/// Inputs and objective for one seeded trial. `probe` optionally restricts
/// which entries of each input are perturbed.
pub struct Trial {
    pub inputs: Vec<Array2<f64>>,
    pub objective: Objective,
    pub probe: Option<Vec<Vec<(usize, usize)>>>,
}

pub struct Case {
    pub name: &'static str,
    pub module: &'static str,
    pub tolerance: f64,
    pub make: fn(&mut ChaCha8Rng) -> Trial,
}

/// Worst relative error of a case over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub module: &'static str,
    pub tolerance: f64,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error between backpropagated and central-difference
/// gradients of `objective` at `inputs`.
pub fn max_relative_error(trial: &Trial) -> Result<f64> {
    let params: Vec<Var<f64>> = trial.inputs.iter().cloned().map(Var::param).collect();
    let out = (trial.objective)(&params)?;
    out.backward()?;
    let eval = |inputs: &[Array2<f64>]| -> Result<f64> {
        let vars: Vec<Var<f64>> = inputs.iter().cloned().map(Var::constant).collect();
        Ok((trial.objective)(&vars)?.item())
    };
    let mut worst = 0.0f64;
    let mut work = trial.inputs.clone();
    for k in 0..trial.inputs.len() {
        let analytic = params[k].grad();
        let entries: Vec<(usize, usize)> = match &trial.probe {
            Some(p) => p[k].clone(),
            None => {
                let (r, c) = trial.inputs[k].dim();
                (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).collect()
            }
        };
        for (i, j) in entries {
            let x0 = work[k][[i, j]];
            work[k][[i, j]] = x0 + STEP;
            let up = eval(&work)?;
            work[k][[i, j]] = x0 - STEP;
            let down = eval(&work)?;
            work[k][[i, j]] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(analytic[[i, j]], numeric);
            if !err.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite gradient comparison at input {k} ({i}, {j})"
                )));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub fn run_case(case: &Case, seeds: usize) -> Result<CheckResult> {
    let mut worst = (0.0f64, 0u64);
    for seed in 0..seeds as u64 {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ 0xC0FF_EE00);
        let trial = (case.make)(&mut rng);
        let err = max_relative_error(&trial)?;
        if err > worst.0 {
            worst = (err, seed);
        }
    }
    Ok(CheckResult {
        name: case.name,
        module: case.module,
        tolerance: case.tolerance,
        seeds,
        max_rel_error: worst.0,
        worst_seed: worst.1,
    })
}

/// Runs every case of `module` (all modules when `None`).
pub fn run_suite(module: Option<&str>, seeds: usize) -> Result<Vec<CheckResult>> {
    let selected: Vec<&Case> = CASES
        .iter()
        .filter(|c| module.is_none_or(|m| m == c.module))
        .collect();
    if selected.is_empty() {
        return Err(Error::Config(format!(
            "unknown gradcheck module `{}` (expected one of {})",
            module.unwrap_or(""),
            MODULES.join(", ")
        )));
    }
    selected.into_iter().map(|c| run_case(c, seeds)).collect()
}

pub const MODULES: [&str; 4] = ["autodiff", "losses", "divergences", "model"];

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(lo..hi))
}

/// Uniform draws kept at least `margin` away from `kink`.
fn away(
    rng: &mut ChaCha8Rng,
    r: usize,
    c: usize,
    lo: f64,
    hi: f64,
    kink: f64,
    margin: f64,
) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || loop {
        let v = rng.random_range(lo..hi);
        if (v - kink).abs() > margin {
            break v;
        }
    })
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Collapses any output to a scalar through a fixed random projection so the
/// full Jacobian is exercised.
fn project(v: &Var<f64>, w: &Array2<f64>) -> Result<Var<f64>> {
    Ok(v.mul(&Var::constant(w.clone()))?.sum())
}

macro_rules! unary_case {
    ($name:expr, $lo:expr, $hi:expr, $kink:expr, |$x:ident| $body:expr) => {
        Case {
            name: $name,
            module: "autodiff",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let x = away(rng, 3, 4, $lo, $hi, $kink, 1e-3);
                let w = uniform(rng, 3, 4, -1.0, 1.0);
                Trial {
                    inputs: vec![x],
                    objective: Box::new(move |v| {
                        let $x = &v[0];
                        project(&$body, &w)
                    }),
                    probe: None,
                }
            },
        }
    };
}

macro_rules! reduce_case {
    ($name:expr, $rows:expr, $cols:expr, $wr:expr, $wc:expr, |$x:ident| $body:expr) => {
        Case {
            name: $name,
            module: "autodiff",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let x = uniform(rng, $rows, $cols, -2.0, 2.0);
                let w = uniform(rng, $wr, $wc, -1.0, 1.0);
                Trial {
                    inputs: vec![x],
                    objective: Box::new(move |v| {
                        let $x = &v[0];
                        project(&$body?, &w)
                    }),
                    probe: None,
                }
            },
        }
    };
}

fn binary_case(
    rng: &mut ChaCha8Rng,
    rhs_shape: (usize, usize),
    op: fn(&Var<f64>, &Var<f64>) -> Result<Var<f64>>,
) -> Trial {
    let a = uniform(rng, 3, 4, -2.0, 2.0);
    let b = Array2::from_shape_simple_fn(rhs_shape, || {
        let m = rng.random_range(0.5..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let w = uniform(rng, 3, 4, -1.0, 1.0);
    Trial {
        inputs: vec![a, b],
        objective: Box::new(move |v| project(&op(&v[0], &v[1])?, &w)),
        probe: None,
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        hidden_dims: vec![10, 9],
        latent_dim: 8,
        num_classes: 4,
        head_hidden: 5,
        variational: false,
    }
}

/// Total objective of the network on a 4-sample batch, as a function of every
/// parameter matrix plus the adaptive log-variances.
fn network_trial(rng: &mut ChaCha8Rng, variational: bool) -> Trial {
    let cfg = ModelConfig {
        variational,
        ..small_model()
    };
    let state = ModelState::<f64>::init(cfg.clone(), rng).expect("valid config");
    let n = 4;
    let x = uniform(rng, n, cfg.input_dim, 0.0, 1.0);
    let y = labels(rng, n, cfg.num_classes);
    let noise = uniform(rng, n, cfg.latent_dim, -1.5, 1.5);
    let prior = uniform(rng, 6, cfg.latent_dim, -1.0, 1.0);
    let protos =
        PrototypeStore::from_means(uniform(rng, cfg.num_classes, cfg.latent_dim, -1.0, 1.0));
    let s = uniform(rng, 1, 3, -0.5, 0.5);
    let mut inputs: Vec<Array2<f64>> = state.params.iter().map(|(_, v)| v.clone()).collect();
    inputs.push(s);
    let probe = inputs
        .iter()
        .map(|a| {
            let (r, c) = a.dim();
            (0..6.min(r * c))
                .map(|_| (rng.random_range(0..r), rng.random_range(0..c)))
                .collect()
        })
        .collect();
    let kernel = KernelSpec::rbf(vec![0.5, 1.0, 2.0]).expect("positive bandwidths");
    let objective: Objective = Box::new(move |v| {
        let bound = state.bind_nodes(v[..v.len() - 1].to_vec(), v[v.len() - 1].clone())?;
        let fwd = bound.forward(&Var::constant(x.clone()), variational.then(|| noise.view()))?;
        let reg = if variational {
            kl_diag_gaussian(
                &fwd.encoded.mean,
                fwd.encoded.logvar.as_ref().expect("variational head"),
            )?
        } else {
            mmd_sq(&fwd.encoded.z, prior.view(), &kernel)?
        };
        let parts = LossParts {
            recon: recon_loss(x.view(), &fwd.x_tilde)?,
            reg: Some(reg),
            maoc: Some(maoc_loss(&fwd.encoded.z, &y, &protos, 0.1, 0.5)?.loss),
            ce: Some(ce_loss(&fwd.heads.logits, &y)?),
            ag: Some(ag_soft_loss(
                &fwd.heads.logits,
                &y,
                &fwd.heads.sigma_l,
                &fwd.heads.sigma_r,
            )?),
            orm: Some(orm_loss(&fwd.heads.score, &y, 1.0)?),
        };
        let (total, _) = compose_total(
            &parts,
            &AdaptiveWeights::adaptive(bound.s.clone()),
            0.1,
            0.05,
        )?;
        Ok(total)
    });
    Trial {
        inputs,
        objective,
        probe: Some(probe),
    }
}

pub static CASES: &[Case] = &[
    Case {
        name: "matmul",
        module: "autodiff",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let a = uniform(rng, 3, 4, -2.0, 2.0);
            let b = uniform(rng, 4, 2, -2.0, 2.0);
            let w = uniform(rng, 3, 2, -1.0, 1.0);
            Trial {
                inputs: vec![a, b],
                objective: Box::new(move |v| project(&v[0].matmul(&v[1])?, &w)),
                probe: None,
            }
        },
    },
    Case {
        name: "transpose_columns",
        module: "autodiff",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let a = uniform(rng, 3, 4, -2.0, 2.0);
            let w = uniform(rng, 4, 2, -1.0, 1.0);
            Trial {
                inputs: vec![a],
                objective: Box::new(move |v| project(&v[0].transpose().columns(1, 3)?, &w)),
                probe: None,
            }
        },
    },
    Case {
        name: "add_row_broadcast",
        module: "autodiff",
        tolerance: OP_TOLERANCE,
        make: |rng| binary_case(rng, (1, 4), |a, b| a.add(b)),
    },
    Case {
        name: "sub_column_broadcast",
        module: "autodiff",
        tolerance: OP_TOLERANCE,
        make: |rng| binary_case(rng, (3, 1), |a, b| a.sub(b)),
    },
    Case {
        name: "mul",
        module: "autodiff",
        tolerance: OP_TOLERANCE,
        make: |rng| binary_case(rng, (3, 4), |a, b| a.mul(b)),
    },
    Case {
        name: "div",
        module: "autodiff",
        tolerance: OP_TOLERANCE,
        make: |rng| binary_case(rng, (3, 4), |a, b| a.div(b)),
    },
    Case {
        name: "div_scalar_broadcast",
        module: "autodiff",
        tolerance: OP_TOLERANCE,
        make: |rng| binary_case(rng, (1, 1), |a, b| a.div(b)),
    },
    Case {
        name: "scalar_ops",
        module: "autodiff",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let a = uniform(rng, 3, 4, -2.0, 2.0);
            let w = uniform(rng, 3, 4, -1.0, 1.0);
            Trial {
                inputs: vec![a],
                objective: Box::new(move |v| {
                    project(&v[0].mul_scalar(1.7).add_scalar(-0.3).neg(), &w)
                }),
                probe: None,
            }
        },
    },
    unary_case!("exp", -2.0, 2.0, f64::INFINITY, |x| x.exp()),
    unary_case!("log", 0.1, 3.0, f64::INFINITY, |x| x.log()?),
    unary_case!("relu", -2.0, 2.0, 0.0, |x| x.relu()),
    unary_case!("tanh", -3.0, 3.0, f64::INFINITY, |x| x.tanh()),
    unary_case!("sigmoid", -6.0, 6.0, f64::INFINITY, |x| x.sigmoid()),
    unary_case!("square", -2.0, 2.0, f64::INFINITY, |x| x.square()),
    unary_case!("abs", -2.0, 2.0, 0.0, |x| x.abs()),
    unary_case!("max_scalar", -2.0, 2.0, 0.3, |x| x.max_scalar(0.3)),
    reduce_case!("sum", 3, 4, 1, 1, |x| Ok::<_, Error>(x.square().sum())),
    reduce_case!("sum_axis0", 3, 4, 1, 4, |x| x.square().sum_axis(0)),
    reduce_case!("sum_axis1", 3, 4, 3, 1, |x| x.square().sum_axis(1)),
    reduce_case!("mean", 3, 4, 1, 1, |x| x.square().mean()),
    reduce_case!("mean_axis1", 3, 4, 3, 1, |x| x.square().mean_axis(1)),
    reduce_case!("l2_norm_sq", 3, 4, 1, 1, |x| Ok::<_, Error>(x.l2_norm_sq())),
    reduce_case!("l2_norm_sq_axis1", 3, 4, 3, 1, |x| x.l2_norm_sq_axis(1)),
    reduce_case!("logsumexp", 3, 4, 1, 1, |x| x.logsumexp()),
    reduce_case!("logsumexp_axis1", 3, 4, 3, 1, |x| x.logsumexp_axis(1)),
    reduce_case!("log_softmax", 3, 4, 3, 4, |x| x.log_softmax()),
    Case {
        name: "ce_loss",
        module: "losses",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let logits = uniform(rng, 5, 4, -3.0, 3.0);
            let y = labels(rng, 5, 4);
            Trial {
                inputs: vec![logits],
                objective: Box::new(move |v| ce_loss(&v[0], &y)),
                probe: None,
            }
        },
    },
    Case {
        name: "ag_soft_loss",
        module: "losses",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let logits = uniform(rng, 5, 5, -3.0, 3.0);
            let raw = uniform(rng, 5, 2, -3.0, 3.0);
            let y = labels(rng, 5, 5);
            Trial {
                inputs: vec![logits, raw],
                objective: Box::new(move |v| {
                    let sl = soft_clamp_sigma(&v[1].columns(0, 1)?);
                    let sr = soft_clamp_sigma(&v[1].columns(1, 2)?);
                    ag_soft_loss(&v[0], &y, &sl, &sr)
                }),
                probe: None,
            }
        },
    },
    Case {
        name: "orm_loss",
        module: "losses",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let y = labels(rng, 6, 5);
            // Residuals stay clear of both Huber knees at +-1.
            let r = away(rng, 6, 1, -3.0, 3.0, 1.0, 1e-3).mapv(|v| {
                if (v + 1.0).abs() < 1e-3 {
                    v + 0.5
                } else {
                    v
                }
            });
            let score = Array2::from_shape_fn((6, 1), |(i, _)| y[i] as f64 + r[[i, 0]]);
            let y2 = y.clone();
            Trial {
                inputs: vec![score],
                objective: Box::new(move |v| orm_loss(&v[0], &y2, 1.0)),
                probe: None,
            }
        },
    },
    Case {
        name: "maoc_loss",
        module: "losses",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let z = uniform(rng, 6, 3, -2.0, 2.0);
            let protos = PrototypeStore::from_means(uniform(rng, 4, 3, -1.0, 1.0));
            let y = labels(rng, 6, 4);
            Trial {
                inputs: vec![z],
                objective: Box::new(move |v| Ok(maoc_loss(&v[0], &y, &protos, 0.1, 0.5)?.loss)),
                probe: None,
            }
        },
    },
    Case {
        name: "recon_loss",
        module: "losses",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let x = uniform(rng, 3, 5, 0.0, 1.0);
            let xt = uniform(rng, 3, 5, 0.0, 1.0);
            Trial {
                inputs: vec![xt],
                objective: Box::new(move |v| recon_loss(x.view(), &v[0])),
                probe: None,
            }
        },
    },
    Case {
        name: "compose_total_adaptive",
        module: "losses",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let mut inputs = vec![uniform(rng, 1, 3, -1.0, 1.0)];
            inputs.extend((0..6).map(|_| uniform(rng, 1, 1, 0.1, 3.0)));
            Trial {
                inputs,
                objective: Box::new(|v| {
                    let parts = LossParts {
                        recon: v[1].sum(),
                        reg: Some(v[2].sum()),
                        maoc: Some(v[3].sum()),
                        ce: Some(v[4].sum()),
                        ag: Some(v[5].sum()),
                        orm: Some(v[6].sum()),
                    };
                    Ok(
                        compose_total(&parts, &AdaptiveWeights::adaptive(v[0].clone()), 0.1, 0.05)?
                            .0,
                    )
                }),
                probe: None,
            }
        },
    },
    Case {
        name: "compose_total_fixed",
        module: "losses",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let inputs = (0..6).map(|_| uniform(rng, 1, 1, 0.1, 3.0)).collect();
            Trial {
                inputs,
                objective: Box::new(|v| {
                    let parts = LossParts {
                        recon: v[0].sum(),
                        reg: Some(v[1].sum()),
                        maoc: Some(v[2].sum()),
                        ce: Some(v[3].sum()),
                        ag: Some(v[4].sum()),
                        orm: Some(v[5].sum()),
                    };
                    Ok(compose_total(&parts, &AdaptiveWeights::fixed(), 0.1, 0.05)?.0)
                }),
                probe: None,
            }
        },
    },
    Case {
        name: "mmd_sq_rbf",
        module: "divergences",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let z = uniform(rng, 6, 3, -2.0, 2.0);
            let prior = uniform(rng, 7, 3, -2.0, 2.0);
            let k = KernelSpec::rbf(vec![0.5, 1.0, 2.0]).expect("positive bandwidths");
            Trial {
                inputs: vec![z],
                objective: Box::new(move |v| mmd_sq(&v[0], prior.view(), &k)),
                probe: None,
            }
        },
    },
    Case {
        name: "mmd_sq_imq",
        module: "divergences",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let z = uniform(rng, 6, 3, -2.0, 2.0);
            let prior = uniform(rng, 7, 3, -2.0, 2.0);
            let k = KernelSpec::imq(2.0 * 3.0).expect("positive scale");
            Trial {
                inputs: vec![z],
                objective: Box::new(move |v| mmd_sq(&v[0], prior.view(), &k)),
                probe: None,
            }
        },
    },
    Case {
        name: "kl_diag_gaussian",
        module: "divergences",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let mu = uniform(rng, 4, 3, -2.0, 2.0);
            let lv = uniform(rng, 4, 3, -2.0, 1.0);
            Trial {
                inputs: vec![mu, lv],
                objective: Box::new(|v| kl_diag_gaussian(&v[0], &v[1])),
                probe: None,
            }
        },
    },
    Case {
        name: "kl_diag_gaussian_to",
        module: "divergences",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let mu = uniform(rng, 4, 3, -2.0, 2.0);
            let lv = uniform(rng, 4, 3, -2.0, 1.0);
            let tm: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tv: Vec<f64> = (0..3).map(|_| rng.random_range(0.3..2.0)).collect();
            Trial {
                inputs: vec![mu, lv],
                objective: Box::new(move |v| kl_diag_gaussian_to(&v[0], &v[1], &tm, &tv)),
                probe: None,
            }
        },
    },
    Case {
        name: "decode_recon_wrt_z",
        module: "model",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let state = ModelState::<f64>::init(small_model(), rng).expect("valid config");
            let z = uniform(rng, 4, 8, -1.5, 1.5);
            let x = uniform(rng, 4, 6, 0.0, 1.0);
            Trial {
                inputs: vec![z],
                objective: Box::new(move |v| {
                    recon_loss(x.view(), &state.bind_frozen().decode(&v[0])?)
                }),
                probe: None,
            }
        },
    },
    Case {
        name: "heads_sigma_clamp",
        module: "model",
        tolerance: OP_TOLERANCE,
        make: |rng| {
            let raw = uniform(rng, 4, 2, -8.0, 8.0);
            let w = uniform(rng, 4, 1, -1.0, 1.0);
            Trial {
                inputs: vec![raw],
                objective: Box::new(move |v| {
                    let s = soft_clamp_sigma(&v[0].columns(0, 1)?)
                        .add(&soft_clamp_sigma(&v[0].columns(1, 2)?))?;
                    project(&s, &w)
                }),
                probe: None,
            }
        },
    },
    Case {
        name: "network_total_wae",
        module: "model",
        tolerance: NETWORK_TOLERANCE,
        make: |rng| network_trial(rng, false),
    },
    Case {
        name: "network_total_vae",
        module: "model",
        tolerance: NETWORK_TOLERANCE,
        make: |rng| network_trial(rng, true),
    },
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // exp(x) with a deliberately wrong backward: use detach so analytic = 0.
        let trial = Trial {
            inputs: vec![Array2::from_elem((1, 1), 0.5)],
            objective: Box::new(|v| v[0].detach().exp().sum().add(&v[0].sum())),
            probe: None,
        };
        assert!(max_relative_error(&trial).unwrap() > 0.1);
    }

    #[test]
    fn few_seeds_pass() {
        for r in run_suite(None, 3).unwrap() {
            assert!(r.passed(), "{} error {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn unknown_module_rejected() {
        assert!(run_suite(Some("nope"), 1).is_err());
    }
}
