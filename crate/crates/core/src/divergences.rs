//! Distribution distances: kernel MMD for latent/prior alignment, the
//! cumulative (CAD) and quadratic-form (QFD) ordinal divergences, and the
//! closed-form diagonal-Gaussian KL used by the VAE baselines.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::distributions::LabelDistribution;
use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Characteristic kernel used inside [`mmd_sq`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec<T> {
    /// Mean of Gaussian kernels `exp(-‖a−b‖²/(2σ²))` over the bandwidths.
    RbfMultiscale { bandwidths: Vec<T> },
    /// `c / (c + ‖a−b‖²)`.
    InverseMultiquadric { c: T },
}

impl<T: Scalar> KernelSpec<T> {
    pub fn rbf(bandwidths: Vec<T>) -> Result<Self> {
        let k = KernelSpec::RbfMultiscale { bandwidths };
        k.validate()?;
        Ok(k)
    }

    pub fn imq(c: T) -> Result<Self> {
        let k = KernelSpec::InverseMultiquadric { c };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &T| v.is_finite() && *v > T::zero();
        match self {
            KernelSpec::RbfMultiscale { bandwidths } => {
                if bandwidths.is_empty() || !bandwidths.iter().all(positive) {
                    return contract(format!(
                        "rbf kernel needs positive bandwidths, got {bandwidths:?}"
                    ));
                }
            }
            KernelSpec::InverseMultiquadric { c } => {
                if !positive(c) {
                    return contract(format!("imq kernel needs c > 0, got {c}"));
                }
            }
        }
        Ok(())
    }

    /// Kernel value from a squared distance.
    pub fn from_sq_dist(&self, d2: T) -> T {
        match self {
            KernelSpec::RbfMultiscale { bandwidths } => {
                let two = T::lit(2.0);
                let total = bandwidths
                    .iter()
                    .fold(T::zero(), |acc, &s| acc + (-d2 / (two * s * s)).exp());
                total / T::from_usize_lossy(bandwidths.len())
            }
            KernelSpec::InverseMultiquadric { c } => *c / (*c + d2),
        }
    }

    /// Elementwise kernel over a matrix of squared distances.
    pub fn apply(&self, sq_dists: &Var<T>) -> Result<Var<T>> {
        match self {
            KernelSpec::RbfMultiscale { bandwidths } => {
                let two = T::lit(2.0);
                let mut acc: Option<Var<T>> = None;
                for &s in bandwidths {
                    let term = sq_dists.mul_scalar(-T::one() / (two * s * s)).exp();
                    acc = Some(match acc {
                        Some(a) => a.add(&term)?,
                        None => term,
                    });
                }
                let acc =
                    acc.ok_or_else(|| Error::Contract("rbf kernel without bandwidths".into()))?;
                Ok(acc.mul_scalar(T::one() / T::from_usize_lossy(bandwidths.len())))
            }
            KernelSpec::InverseMultiquadric { c } => {
                Var::scalar_constant(*c).div(&sq_dists.add_scalar(*c))
            }
        }
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

pub fn kernel_eval<T: Scalar>(k: &KernelSpec<T>, a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "kernel_eval",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(k.from_sq_dist(sq_dist(a, b)))
}

/// Median of all pairwise Euclidean distances among the pooled rows.
/// Returns 1 when every pair coincides.
pub fn median_pairwise_distance<T: Scalar>(sets: &[ArrayView2<'_, T>]) -> T {
    let rows: Vec<Vec<T>> = sets
        .iter()
        .flat_map(|s| s.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            dists.push(sq_dist(&rows[i], &rows[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return T::one();
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = dists.len();
    let med = if n % 2 == 1 {
        dists[n / 2]
    } else {
        (dists[n / 2 - 1] + dists[n / 2]) * T::lit(0.5)
    };
    if med > T::zero() && med.is_finite() {
        med
    } else {
        T::one()
    }
}

/// Multiscale rbf at `{m/2, m, 2m}` with `m` the pooled median pairwise distance.
pub fn median_heuristic_kernel<T: Scalar>(
    z: ArrayView2<'_, T>,
    prior: ArrayView2<'_, T>,
) -> KernelSpec<T> {
    let m = median_pairwise_distance(&[z, prior]);
    KernelSpec::RbfMultiscale {
        bandwidths: vec![m * T::lit(0.5), m, m * T::lit(2.0)],
    }
}

/// `‖a_i − b_j‖²` for every row pair, as an `n × m` value.
pub fn pairwise_sq_dists<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if a.dims().1 != b.dims().1 {
        return Err(Error::Shape {
            op: "pairwise_sq_dists",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let na = a.l2_norm_sq_axis(if a.rank() == 2 { 1 } else { 0 })?;
    let nb = b
        .l2_norm_sq_axis(if b.rank() == 2 { 1 } else { 0 })?
        .transpose();
    let cross = a.matmul(&b.transpose())?.mul_scalar(T::lit(-2.0));
    Ok(na.add(&nb)?.add(&cross)?.max_scalar(T::zero()))
}

fn off_diagonal_mask<T: Scalar>(n: usize) -> Array2<T> {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { T::zero() } else { T::one() })
}

/// Squared MMD between encoder samples `z` (`n × d`, differentiable) and
/// prior samples (`m × d`, constant):
///
/// `1/(n(n−1)) Σ_{i≠j} k(z_i,z_j) + 1/(m(m−1)) Σ_{i≠j} k(p_i,p_j) − 2/(nm) Σ_{i,j} k(z_i,p_j)`.
pub fn mmd_sq<T: Scalar>(
    z: &Var<T>,
    prior: ArrayView2<'_, T>,
    k: &KernelSpec<T>,
) -> Result<Var<T>> {
    k.validate()?;
    let (n, d) = z.dims();
    let (m, dp) = prior.dim();
    if d != dp {
        return Err(Error::Shape {
            op: "mmd_sq",
            lhs: z.shape(),
            rhs: vec![m, dp],
        });
    }
    if n < 2 || m < 2 {
        return contract(format!(
            "mmd_sq needs at least two samples on each side, got n={n}, m={m}"
        ));
    }
    let nf = T::from_usize_lossy(n);
    let mf = T::from_usize_lossy(m);

    let k_zz = k.apply(&pairwise_sq_dists(z, z)?)?;
    let within_z = k_zz
        .mul(&Var::constant(off_diagonal_mask(n)))?
        .sum()
        .mul_scalar(T::one() / (nf * (nf - T::one())));

    let rows: Vec<Vec<T>> = prior.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut within_p = T::zero();
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            if i != j {
                within_p += k.from_sq_dist(sq_dist(a, b));
            }
        }
    }
    within_p /= mf * (mf - T::one());

    let p = Var::constant(prior.to_owned());
    let cross = k
        .apply(&pairwise_sq_dists(z, &p)?)?
        .sum()
        .mul_scalar(T::lit(-2.0) / (nf * mf));

    Ok(within_z.add(&cross)?.add_scalar(within_p))
}

fn check_same_support<T: Scalar>(
    a: &LabelDistribution<T>,
    b: &LabelDistribution<T>,
    op: &'static str,
) -> Result<()> {
    if a.classes() != b.classes() {
        return Err(Error::Shape {
            op,
            lhs: vec![a.classes()],
            rhs: vec![b.classes()],
        });
    }
    Ok(())
}

/// Cumulative absolute distance `Σ_k |F_d(k) − F_q(k)|`.
pub fn cad<T: Scalar>(d: &LabelDistribution<T>, q: &LabelDistribution<T>) -> Result<T> {
    check_same_support(d, q, "cad")?;
    Ok(d.cdf()
        .iter()
        .zip(q.cdf())
        .fold(T::zero(), |acc, (&a, b)| acc + (a - b).abs()))
}

/// How the grade-gap weight `ω(|i−j|)` grows with the gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapWeight {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradeKernelWeights {
    pub classes: usize,
    pub omega: GapWeight,
}

impl GradeKernelWeights {
    pub fn new(classes: usize, omega: GapWeight) -> Result<Self> {
        if classes == 0 {
            return contract("grade weights need at least one class");
        }
        Ok(Self { classes, omega })
    }

    /// `W_ij = ω(|i−j|)`.
    pub fn weights<T: Scalar>(&self) -> Array2<T> {
        Array2::from_shape_fn((self.classes, self.classes), |(i, j)| {
            let gap = T::from_usize_lossy(i.abs_diff(j));
            match self.omega {
                GapWeight::Linear => gap,
                GapWeight::Quadratic => gap * gap,
            }
        })
    }

    /// Graph Laplacian `L = Diag(W·1) − W`.
    pub fn laplacian<T: Scalar>(&self) -> Array2<T> {
        let w = self.weights::<T>();
        let mut l = w.mapv(|x| -x);
        for (i, row) in w.rows().into_iter().enumerate() {
            l[[i, i]] += row.sum();
        }
        l
    }
}

/// Quadratic-form distance `(d−q)ᵀ L (d−q)`.
pub fn qfd<T: Scalar>(
    d: &LabelDistribution<T>,
    q: &LabelDistribution<T>,
    g: &GradeKernelWeights,
) -> Result<T> {
    check_same_support(d, q, "qfd")?;
    if d.classes() != g.classes {
        return Err(Error::Shape {
            op: "qfd",
            lhs: vec![d.classes()],
            rhs: vec![g.classes],
        });
    }
    let v: Vec<T> = d
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&a, &b)| a - b)
        .collect();
    let l = g.laplacian::<T>();
    let mut total = T::zero();
    for i in 0..v.len() {
        for j in 0..v.len() {
            total += v[i] * l[[i, j]] * v[j];
        }
    }
    Ok(total)
}

fn check_moments<T: Scalar>(mu: &Var<T>, logvar: &Var<T>) -> Result<()> {
    if mu.dims() != logvar.dims() {
        return Err(Error::Shape {
            op: "kl_diag_gaussian",
            lhs: mu.shape(),
            rhs: logvar.shape(),
        });
    }
    Ok(())
}

/// `KL(N(μ, diag e^{logvar}) ‖ N(0, I))`, summed over coordinates and averaged
/// over rows.
pub fn kl_diag_gaussian<T: Scalar>(mu: &Var<T>, logvar: &Var<T>) -> Result<Var<T>> {
    check_moments(mu, logvar)?;
    let rows = T::from_usize_lossy(mu.dims().0);
    let terms = logvar
        .exp()
        .add(&mu.square())?
        .sub(logvar)?
        .add_scalar(-T::one());
    Ok(terms.sum().mul_scalar(T::lit(0.5) / rows))
}

/// KL against a diagonal Gaussian with per-coordinate `target_mean` and
/// `target_var`, summed over coordinates and averaged over rows.
pub fn kl_diag_gaussian_to<T: Scalar>(
    mu: &Var<T>,
    logvar: &Var<T>,
    target_mean: &[T],
    target_var: &[T],
) -> Result<Var<T>> {
    check_moments(mu, logvar)?;
    let d = mu.dims().1;
    if target_mean.len() != d || target_var.len() != d {
        return Err(Error::Shape {
            op: "kl_diag_gaussian_to",
            lhs: mu.shape(),
            rhs: vec![target_mean.len(), target_var.len()],
        });
    }
    if target_var
        .iter()
        .any(|v| !(v.is_finite() && *v > T::zero()))
    {
        return contract("KL target variances must be positive");
    }
    let rows = T::from_usize_lossy(mu.dims().0);
    let inv_var =
        Var::vector_constant(&target_var.iter().map(|&v| T::one() / v).collect::<Vec<_>>());
    let mean = Var::vector_constant(target_mean);
    let log_var_sum = target_var.iter().fold(T::zero(), |a, &v| a + v.ln());
    let terms = logvar
        .exp()
        .add(&mu.sub(&mean)?.square())?
        .mul(&inv_var)?
        .sub(logvar)?;
    let per_row_const = log_var_sum - T::from_usize_lossy(d);
    Ok(terms
        .sum()
        .add_scalar(per_row_const * rows)
        .mul_scalar(T::lit(0.5) / rows))
}
