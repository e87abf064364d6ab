//! Asymmetric generalized Gaussian (AGGD) prior and the two-sided discrete
//! label family used for soft ordinal targets.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Shape parameter used by the prior sampler unless configured otherwise.
pub const DEFAULT_BETA: f64 = 1.2;

/// Scale assigned to a side of a coordinate that has no spread to measure.
pub const ALPHA_MIN: f64 = 1e-3;

/// Additive epsilon in the denominator of the two-sided label kernel.
pub const LABEL_EPS: f64 = 1e-8;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` by the Lanczos approximation (g = 7, nine terms), with the
/// reflection formula below 1/2.
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let pi = T::lit(std::f64::consts::PI);
    if x < half {
        let s = (pi * x).sin().abs();
        return (pi / s).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::lit(LANCZOS_COEFFS[0]);
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += T::lit(c) / (x + T::from_usize_lossy(i));
    }
    let t = x + T::lit(LANCZOS_G) + half;
    half * (T::lit(2.0) * pi).ln() + (x + half) * t.ln() - t + acc.ln()
}

/// Parameters of one AGGD coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggdParams<T> {
    pub mu: T,
    pub beta: T,
    pub alpha_l: T,
    pub alpha_r: T,
}

impl<T: Scalar> AggdParams<T> {
    pub fn new(mu: T, beta: T, alpha_l: T, alpha_r: T) -> Result<Self> {
        let p = Self {
            mu,
            beta,
            alpha_l,
            alpha_r,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mu.is_finite()
            && [self.beta, self.alpha_l, self.alpha_r]
                .iter()
                .all(|v| v.is_finite() && *v > T::zero());
        if !ok {
            return contract(format!(
                "AGGD parameters must be finite with positive shape and scales: {self:?}"
            ));
        }
        Ok(())
    }

    /// `log β − log(α_ℓ + α_r) − log Γ(1/β)`: the log-density at the mode.
    pub fn log_normalizer(&self) -> T {
        self.beta.ln() - (self.alpha_l + self.alpha_r).ln() - ln_gamma(T::one() / self.beta)
    }

    pub fn log_pdf(&self, u: T) -> Result<T> {
        if !u.is_finite() {
            return contract(format!("AGGD density evaluated at non-finite point {u}"));
        }
        let alpha = if u < self.mu {
            self.alpha_l
        } else {
            self.alpha_r
        };
        let r = (u - self.mu).abs() / alpha;
        Ok(self.log_normalizer() - r.powf(self.beta))
    }

    pub fn pdf(&self, u: T) -> Result<T> {
        Ok(self.log_pdf(u)?.exp())
    }

    /// Probability of drawing from the left of `mu`.
    pub fn left_mass(&self) -> T {
        self.alpha_l / (self.alpha_l + self.alpha_r)
    }

    /// Mean, `μ + (α_r − α_ℓ) Γ(2/β) / Γ(1/β)`.
    pub fn mean(&self) -> T {
        let two = T::lit(2.0);
        let ratio = (ln_gamma(two / self.beta) - ln_gamma(T::one() / self.beta)).exp();
        self.mu + (self.alpha_r - self.alpha_l) * ratio
    }

    /// Variance from the second moment about the mode,
    /// `(α_ℓ³ + α_r³) Γ(3/β) / ((α_ℓ + α_r) Γ(1/β))`.
    pub fn variance(&self) -> T {
        let three = T::lit(3.0);
        let lg1 = ln_gamma(T::one() / self.beta);
        let second = (self.alpha_l.powi(3) + self.alpha_r.powi(3)) / (self.alpha_l + self.alpha_r)
            * (ln_gamma(three / self.beta) - lg1).exp();
        let offset = self.mean() - self.mu;
        second - offset * offset
    }

    /// Draws `n` i.i.d. samples: pick a side with probability proportional to
    /// its scale, then offset from `mu` by `α_side · G^{1/β}` with
    /// `G ~ Gamma(1/β, 1)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<T>> {
        if n == 0 {
            return contract("AGGD sampler asked for zero samples");
        }
        let mut out = Vec::with_capacity(n);
        self.sample_into(n, rng, &mut out)?;
        Ok(out)
    }

    fn sample_into<R: Rng + ?Sized>(&self, n: usize, rng: &mut R, out: &mut Vec<T>) -> Result<()> {
        self.validate()?;
        let beta = self.beta.to_f64_lossy();
        let gamma = Gamma::new(1.0 / beta, 1.0)
            .map_err(|e| Error::Contract(format!("gamma variate for beta={beta}: {e}")))?;
        let p_left = self.left_mass().to_f64_lossy();
        let inv_beta = 1.0 / beta;
        for _ in 0..n {
            let left = rng.random::<f64>() < p_left;
            let g: f64 = gamma.sample(rng);
            let magnitude = T::lit(g.powf(inv_beta));
            out.push(if left {
                self.mu - self.alpha_l * magnitude
            } else {
                self.mu + self.alpha_r * magnitude
            });
        }
        Ok(())
    }
}

/// A product of independent AGGD coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedPrior<T> {
    pub coords: Vec<AggdParams<T>>,
}

impl<T: Scalar> FactorizedPrior<T> {
    pub fn new(coords: Vec<AggdParams<T>>) -> Result<Self> {
        if coords.is_empty() {
            return contract("factorized prior needs at least one coordinate");
        }
        for c in &coords {
            c.validate()?;
        }
        Ok(Self { coords })
    }

    /// `N(0, I_d)`, expressed as β = 2 with both scales √2.
    pub fn standard_gaussian(dim: usize) -> Self {
        let a = T::lit(std::f64::consts::SQRT_2);
        Self {
            coords: vec![
                AggdParams {
                    mu: T::zero(),
                    beta: T::lit(2.0),
                    alpha_l: a,
                    alpha_r: a,
                };
                dim
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// `m × d` matrix of draws; coordinate `j` fills column `j`.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Array2<T>> {
        if m == 0 {
            return contract("prior sampler asked for zero samples");
        }
        let mut out = Array2::zeros((m, self.dim()));
        let mut column = Vec::with_capacity(m);
        for (j, c) in self.coords.iter().enumerate() {
            column.clear();
            c.sample_into(m, rng, &mut column)?;
            for (i, v) in column.iter().enumerate() {
                out[[i, j]] = *v;
            }
        }
        Ok(out)
    }

    pub fn log_pdf(&self, z: &[T]) -> Result<T> {
        if z.len() != self.dim() {
            return Err(Error::Shape {
                op: "prior log_pdf",
                lhs: vec![z.len()],
                rhs: vec![self.dim()],
            });
        }
        self.coords
            .iter()
            .zip(z)
            .try_fold(T::zero(), |acc, (c, &u)| Ok(acc + c.log_pdf(u)?))
    }
}

impl<T: Scalar + Serialize> FactorizedPrior<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl<T: Scalar + for<'de> Deserialize<'de>> FactorizedPrior<T> {
    pub fn from_json(text: &str) -> Result<Self> {
        let prior: Self = serde_json::from_str(text)?;
        Self::new(prior.coords)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// A coordinate side whose scale was floored to [`ALPHA_MIN`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegenerateSide {
    pub coord: usize,
    pub side: Side,
    /// Number of samples that fell on this side.
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct PriorFit<T> {
    pub prior: FactorizedPrior<T>,
    pub degenerate: Vec<DegenerateSide>,
}

/// Per-coordinate moment fit: mean location, and one-sided root-mean-square
/// deviations below (strictly) and at-or-above the mean as the two scales.
/// `beta` is not estimated.
pub fn fit_aggd_per_coordinate<T: Scalar>(
    latents: ArrayView2<'_, T>,
    beta: T,
) -> Result<PriorFit<T>> {
    let (n, d) = latents.dim();
    if n < 2 {
        return contract(format!("prior fit needs at least 2 samples, got {n}"));
    }
    if d == 0 {
        return contract("prior fit needs at least one coordinate");
    }
    let alpha_min = T::lit(ALPHA_MIN);
    let nf = T::from_usize_lossy(n);
    let mut coords = Vec::with_capacity(d);
    let mut degenerate = Vec::new();
    for (j, col) in latents.columns().into_iter().enumerate() {
        if let Some(bad) = col.iter().find(|v| !v.is_finite()) {
            return contract(format!(
                "prior fit: non-finite latent {bad} in coordinate {j}"
            ));
        }
        let rough = col.iter().fold(T::zero(), |a, &b| a + b) / nf;
        let mu = rough + col.iter().fold(T::zero(), |a, &b| a + (b - rough)) / nf;
        let (mut sl, mut nl, mut sr, mut nr) = (T::zero(), 0usize, T::zero(), 0usize);
        for &v in col.iter() {
            let dv = v - mu;
            if v < mu {
                sl += dv * dv;
                nl += 1;
            } else {
                sr += dv * dv;
                nr += 1;
            }
        }
        let mut side_scale = |sum: T, count: usize, side: Side| {
            let rms = if count > 0 {
                (sum / T::from_usize_lossy(count)).sqrt()
            } else {
                T::zero()
            };
            if rms < alpha_min {
                log::warn!("prior fit: coordinate {j} {side:?} side degenerate ({count} samples)");
                degenerate.push(DegenerateSide {
                    coord: j,
                    side,
                    count,
                });
                alpha_min
            } else {
                rms
            }
        };
        let alpha_l = side_scale(sl, nl, Side::Left);
        let alpha_r = side_scale(sr, nr, Side::Right);
        coords.push(AggdParams::new(mu, beta, alpha_l, alpha_r)?);
    }
    Ok(PriorFit {
        prior: FactorizedPrior { coords },
        degenerate,
    })
}

/// A probability vector over ordered grades `0..C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution<T>(Vec<T>);

impl<T: Scalar> LabelDistribution<T> {
    /// Validates nonnegativity and unit sum (within `1e-9`).
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return contract("label distribution over zero grades");
        }
        if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return contract("label distribution has negative or non-finite mass");
        }
        let total = probs.iter().fold(T::zero(), |a, &b| a + b);
        if (total - T::one()).abs() > T::lit(1e-9) {
            return contract(format!("label distribution sums to {total}, not 1"));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(k: usize, classes: usize) -> Result<Self> {
        if k >= classes {
            return contract(format!("grade {k} out of range for {classes} classes"));
        }
        let mut v = vec![T::zero(); classes];
        v[k] = T::one();
        Ok(Self(v))
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        if classes == 0 {
            return contract("label distribution over zero grades");
        }
        Ok(Self(vec![T::one() / T::from_usize_lossy(classes); classes]))
    }

    pub fn probs(&self) -> &[T] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    /// Inclusive prefix sums.
    pub fn cdf(&self) -> Vec<T> {
        self.0
            .iter()
            .scan(T::zero(), |acc, &p| {
                *acc += p;
                Some(*acc)
            })
            .collect()
    }
}

/// Two-sided Gaussian kernel on the grade line, normalized over `0..C`:
/// grades below `y` use `sigma_l`, grades above use `sigma_r` and `y` itself
/// uses `sigma_mid`.
pub fn two_sided_label_distribution<T: Scalar>(
    y: usize,
    sigma_l: T,
    sigma_r: T,
    sigma_mid: T,
    classes: usize,
    eps: T,
) -> Result<LabelDistribution<T>> {
    if classes < 2 {
        return contract(format!(
            "two-sided label distribution needs C >= 2, got {classes}"
        ));
    }
    if y >= classes {
        return contract(format!("grade {y} out of range for {classes} classes"));
    }
    for s in [sigma_l, sigma_r, sigma_mid] {
        if !(s.is_finite() && s > T::zero()) {
            return contract(format!(
                "label dispersion must be positive and finite, got {s}"
            ));
        }
    }
    let two = T::lit(2.0);
    let yf = T::from_usize_lossy(y);
    let mass: Vec<T> = (0..classes)
        .map(|j| {
            let sigma = match j.cmp(&y) {
                std::cmp::Ordering::Less => sigma_l,
                std::cmp::Ordering::Greater => sigma_r,
                std::cmp::Ordering::Equal => sigma_mid,
            };
            let gap = T::from_usize_lossy(j) - yf;
            (-(gap * gap) / (two * sigma * sigma + eps)).exp()
        })
        .collect();
    let total = mass.iter().fold(T::zero(), |a, &b| a + b);
    Ok(LabelDistribution(
        mass.into_iter().map(|m| m / total).collect(),
    ))
}
