//! Supervised and regularization losses, and their composition into the
//! training objective.
//!
//! All batch losses take rank-2 values with one row per sample (a rank-1 value
//! is a batch of one) and average over rows.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::distributions::LABEL_EPS;
use crate::error::{contract, Error, Result};
use crate::prototypes::PrototypeStore;
use crate::scalar::Scalar;

/// Huber transition point for the ordinal regression head.
pub const HUBER_TAU: f64 = 1.0;
/// Weights for (CE, AG, ORM) when adaptive weighting is off.
pub const FIXED_WEIGHTS: [f64; 3] = [1.0, 1.0, 0.5];
pub const SIGMA_MIN: f64 = 0.2;
pub const SIGMA_MAX: f64 = 5.0;
pub const DEFAULT_LAMBDA_REG: f64 = 0.1;
pub const DEFAULT_LAMBDA_MAOC: f64 = 0.05;
pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_COMPACTNESS: f64 = 0.5;

/// Maps raw log-dispersions into `[SIGMA_MIN, SIGMA_MAX]` with a shifted
/// logistic, `σ = σ_min + (σ_max − σ_min)·sigmoid(raw − ln 5)`. The shift puts
/// `raw = 0` at `σ = 1`; the logistic keeps a nonzero slope everywhere.
pub fn soft_clamp_sigma<T: Scalar>(raw: &Var<T>) -> Var<T> {
    let lo = T::lit(SIGMA_MIN);
    let hi = T::lit(SIGMA_MAX);
    // sigmoid(-shift) = (1 - lo) / (hi - lo)
    let shift = ((hi - T::one()) / (T::one() - lo)).ln();
    raw.add_scalar(-shift)
        .sigmoid()
        .mul_scalar(hi - lo)
        .add_scalar(lo)
}

fn check_labels<T: Scalar>(logits: &Var<T>, labels: &[usize], op: &'static str) -> Result<usize> {
    let (rows, classes) = logits.dims();
    if rows != labels.len() {
        return Err(Error::Shape {
            op,
            lhs: logits.shape(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return contract(format!(
            "{op}: grade {bad} out of range for {classes} classes"
        ));
    }
    Ok(classes)
}

fn label_mask<T: Scalar>(
    labels: &[usize],
    classes: usize,
    keep: impl Fn(usize, usize) -> bool,
) -> Array2<T> {
    Array2::from_shape_fn((labels.len(), classes), |(i, j)| {
        if keep(j, labels[i]) {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `−log softmax_y(ℓ)` averaged over rows.
pub fn ce_loss<T: Scalar>(logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    let classes = check_labels(logits, labels, "ce_loss")?;
    let one_hot = Var::constant(label_mask(labels, classes, |j, y| j == y));
    soft_ce(logits, &one_hot)
}

/// `−Σ_j target_j log softmax_j(ℓ)` averaged over rows.
fn soft_ce<T: Scalar>(logits: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    let rows = T::from_usize_lossy(logits.dims().0);
    Ok(logits
        .log_softmax()?
        .mul(target)?
        .sum()
        .mul_scalar(-T::one() / rows))
}

/// Differentiable two-sided soft target (`n × C`): row `i` is proportional to
/// `exp(−(j−y_i)² / (2σ_j² + ε))`, with `σ_j` the left, right or mid dispersion
/// depending on whether `j` is below, above or at `y_i`, and
/// `σ_mid = (σ_ℓ + σ_r)/2`.
pub fn ag_soft_target<T: Scalar>(
    labels: &[usize],
    sigma_l: &Var<T>,
    sigma_r: &Var<T>,
    classes: usize,
    eps: T,
) -> Result<Var<T>> {
    if classes < 2 {
        return contract(format!("soft target needs C >= 2, got {classes}"));
    }
    let n = labels.len();
    for s in [sigma_l, sigma_r] {
        if s.dims() != (n, 1) {
            return Err(Error::Shape {
                op: "ag_soft_target",
                lhs: s.shape(),
                rhs: vec![n, 1],
            });
        }
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return contract(format!(
            "ag_soft_target: grade {bad} out of range for {classes} classes"
        ));
    }
    let below = Var::constant(label_mask(labels, classes, |j, y| j < y));
    let above = Var::constant(label_mask(labels, classes, |j, y| j > y));
    let at = Var::constant(label_mask(labels, classes, |j, y| j == y));
    let neg_gap_sq = Var::constant(Array2::from_shape_fn((n, classes), |(i, j)| {
        let g = T::from_usize_lossy(j) - T::from_usize_lossy(labels[i]);
        -(g * g)
    }));
    let sigma_mid = sigma_l.add(sigma_r)?.mul_scalar(T::lit(0.5));
    let spread = sigma_l
        .square()
        .mul(&below)?
        .add(&sigma_r.square().mul(&above)?)?
        .add(&sigma_mid.square().mul(&at)?)?;
    let exponent = neg_gap_sq.div(&spread.mul_scalar(T::lit(2.0)).add_scalar(eps))?;
    exponent.log_softmax().map(|l| l.exp())
}

/// Soft cross-entropy against the two-sided target. Gradients reach the logits
/// and both dispersions (through the target).
pub fn ag_soft_loss<T: Scalar>(
    logits: &Var<T>,
    labels: &[usize],
    sigma_l: &Var<T>,
    sigma_r: &Var<T>,
) -> Result<Var<T>> {
    let classes = check_labels(logits, labels, "ag_soft_loss")?;
    let target = ag_soft_target(labels, sigma_l, sigma_r, classes, T::lit(LABEL_EPS))?;
    soft_ce(logits, &target)
}

/// Huber loss of `score − y`: `½r²` inside `|r| ≤ τ`, `τ(|r| − τ/2)` outside.
pub fn orm_loss<T: Scalar>(score: &Var<T>, labels: &[usize], tau: T) -> Result<Var<T>> {
    if !(tau > T::zero()) {
        return contract(format!("Huber threshold must be positive, got {tau}"));
    }
    let n = labels.len();
    if score.dims() != (n, 1) {
        return Err(Error::Shape {
            op: "orm_loss",
            lhs: score.shape(),
            rhs: vec![n, 1],
        });
    }
    let target = Array2::from_shape_fn((n, 1), |(i, _)| T::from_usize_lossy(labels[i]));
    let r = score.sub(&Var::constant(target))?;
    let inside = r
        .value()
        .mapv(|v| if v.abs() <= tau { T::one() } else { T::zero() });
    let outside = inside.mapv(|m| T::one() - m);
    let half = T::lit(0.5);
    let quadratic = r.square().mul_scalar(half).mul(&Var::constant(inside))?;
    let linear = r
        .abs()
        .add_scalar(-half * tau)
        .mul_scalar(tau)
        .mul(&Var::constant(outside))?;
    quadratic.add(&linear)?.mean()
}

/// Pieces of the margin-aware orthogonality and compactness loss.
#[derive(Debug, Clone)]
pub struct MaocTerms<T: Scalar> {
    pub loss: Var<T>,
    pub orthogonality: T,
    pub compactness: T,
    /// Ordered class pairs that entered the orthogonality mean.
    pub pairs: usize,
    /// Ordered pairs dropped because a prototype was missing or had zero norm.
    pub skipped_pairs: usize,
}

/// `mean_{c≠c'} max(0, μ̂_cᵀμ̂_c' − δ)² + γ · (1/n) Σ_i ‖z_i − μ_{y_i}‖²`.
///
/// Prototypes are constants, so only the compactness part carries gradient
/// (into `z`). Samples whose class prototype is not yet initialized contribute
/// zero to the compactness sum.
pub fn maoc_loss<T: Scalar>(
    z: &Var<T>,
    labels: &[usize],
    prototypes: &PrototypeStore<T>,
    delta: T,
    gamma_cmp: T,
) -> Result<MaocTerms<T>> {
    let (n, d) = z.dims();
    if n != labels.len() || d != prototypes.dim() {
        return Err(Error::Shape {
            op: "maoc_loss",
            lhs: z.shape(),
            rhs: vec![labels.len(), prototypes.dim()],
        });
    }
    if !(delta >= T::zero() && delta < T::one()) {
        return contract(format!("MAOC margin must lie in [0, 1), got {delta}"));
    }
    let classes = prototypes.classes();
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return contract(format!(
            "maoc_loss: grade {bad} out of range for {classes} classes"
        ));
    }

    let normalized: Vec<Option<Vec<T>>> = (0..classes)
        .map(|c| {
            if !prototypes.is_initialized(c) {
                return None;
            }
            let m = prototypes.mean(c);
            let norm = m.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            (norm > T::zero() && norm.is_finite()).then(|| m.iter().map(|&v| v / norm).collect())
        })
        .collect();
    let (mut total, mut pairs, mut skipped) = (T::zero(), 0usize, 0usize);
    for c in 0..classes {
        for c2 in 0..classes {
            if c == c2 {
                continue;
            }
            match (&normalized[c], &normalized[c2]) {
                (Some(a), Some(b)) => {
                    let cos = a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
                    let hinge = (cos - delta).max(T::zero());
                    total += hinge * hinge;
                    pairs += 1;
                }
                _ => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        log::warn!("maoc_loss: skipped {skipped} class pairs with missing or zero-norm prototypes");
    }
    let orthogonality = if pairs > 0 {
        total / T::from_usize_lossy(pairs)
    } else {
        T::zero()
    };

    let mut centers = Array2::<T>::zeros((n, d));
    let mut keep = Array2::<T>::zeros((n, 1));
    for (i, &y) in labels.iter().enumerate() {
        if prototypes.is_initialized(y) {
            centers.row_mut(i).assign(&prototypes.mean(y));
            keep[[i, 0]] = T::one();
        }
    }
    let compact = z
        .sub(&Var::constant(centers))?
        .square()
        .mul(&Var::constant(keep))?
        .sum()
        .mul_scalar(T::one() / T::from_usize_lossy(n));
    let compactness = compact.item();
    let loss = compact.mul_scalar(gamma_cmp).add_scalar(orthogonality);
    Ok(MaocTerms {
        loss,
        orthogonality,
        compactness,
        pairs,
        skipped_pairs: skipped,
    })
}

/// Mean squared error over all elements.
pub fn recon_loss<T: Scalar>(x: ArrayView2<'_, T>, x_tilde: &Var<T>) -> Result<Var<T>> {
    if x.dim() != x_tilde.dims() {
        return Err(Error::Shape {
            op: "recon_loss",
            lhs: vec![x.nrows(), x.ncols()],
            rhs: x_tilde.shape(),
        });
    }
    x_tilde.sub(&Var::constant(x.to_owned()))?.square().mean()
}

/// Weighting of the three supervised terms (CE, AG, ORM).
#[derive(Debug, Clone)]
pub struct AdaptiveWeights<T: Scalar> {
    /// Learnable log-variances, `1 × 3`.
    pub s: Var<T>,
    pub enabled: bool,
    pub fixed_weights: [T; 3],
}

impl<T: Scalar> AdaptiveWeights<T> {
    pub fn adaptive(s: Var<T>) -> Self {
        Self {
            s,
            enabled: true,
            fixed_weights: FIXED_WEIGHTS.map(T::lit),
        }
    }

    pub fn fixed() -> Self {
        Self {
            s: Var::constant(Array2::zeros((1, 3))),
            enabled: false,
            fixed_weights: FIXED_WEIGHTS.map(T::lit),
        }
    }
}

/// Loss terms for one batch. `None` marks a term switched off.
#[derive(Debug, Clone)]
pub struct LossParts<T: Scalar> {
    pub recon: Var<T>,
    pub reg: Option<Var<T>>,
    pub maoc: Option<Var<T>>,
    pub ce: Option<Var<T>>,
    pub ag: Option<Var<T>>,
    pub orm: Option<Var<T>>,
}

/// Scalar values of every term plus the weights that combined them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub recon: T,
    pub reg: T,
    pub maoc: T,
    pub ce: T,
    pub ag: T,
    pub orm: T,
    pub total: T,
    /// Multipliers applied to (CE, AG, ORM); `e^{−s_k}` when adaptive.
    pub weights_used: [T; 3],
    /// Additive `s_k` offsets (zero when fixed).
    pub offsets: [T; 3],
    pub lambda_reg: T,
    pub lambda_maoc: T,
}

impl<T: Scalar> LossBreakdown<T> {
    /// Recomputes the objective from its parts.
    pub fn recompose(&self) -> T {
        let sup = [self.ce, self.ag, self.orm];
        let mut total = self.recon + self.lambda_reg * self.reg + self.lambda_maoc * self.maoc;
        for k in 0..3 {
            total += self.weights_used[k] * sup[k] + self.offsets[k];
        }
        total
    }

    /// Name of the first non-finite term, checking parts before the total.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("reg", self.reg),
            ("maoc", self.maoc),
            ("ce", self.ce),
            ("ag", self.ag),
            ("orm", self.orm),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }

    /// Weighted running sum, for averaging breakdowns over batches.
    pub fn accumulate(&mut self, other: &Self, weight: T) {
        self.recon += other.recon * weight;
        self.reg += other.reg * weight;
        self.maoc += other.maoc * weight;
        self.ce += other.ce * weight;
        self.ag += other.ag * weight;
        self.orm += other.orm * weight;
        self.total += other.total * weight;
        for k in 0..3 {
            self.weights_used[k] += other.weights_used[k] * weight;
            self.offsets[k] += other.offsets[k] * weight;
        }
        self.lambda_reg = other.lambda_reg;
        self.lambda_maoc = other.lambda_maoc;
    }

    pub fn scaled(&self, factor: T) -> Self {
        let mut out = Self {
            lambda_reg: self.lambda_reg,
            lambda_maoc: self.lambda_maoc,
            ..Self::zeroed()
        };
        out.accumulate(self, factor);
        out
    }

    pub fn zeroed() -> Self {
        let z = T::zero();
        Self {
            recon: z,
            reg: z,
            maoc: z,
            ce: z,
            ag: z,
            orm: z,
            total: z,
            weights_used: [z; 3],
            offsets: [z; 3],
            lambda_reg: z,
            lambda_maoc: z,
        }
    }

    pub const CSV_HEADER: &'static str = "recon,reg,maoc,ce,ag,orm,total,w_ce,w_ag,w_orm";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.recon,
            self.reg,
            self.maoc,
            self.ce,
            self.ag,
            self.orm,
            self.total,
            self.weights_used[0],
            self.weights_used[1],
            self.weights_used[2]
        )
    }
}

/// `L_recon + λ_reg·L_reg + λ_maoc·L_maoc + Σ_k (e^{−s_k} L_k + s_k)` over the
/// active supervised terms, or `Σ_k w_k L_k` with fixed weights.
pub fn compose_total<T: Scalar>(
    parts: &LossParts<T>,
    weights: &AdaptiveWeights<T>,
    lambda_reg: T,
    lambda_maoc: T,
) -> Result<(Var<T>, LossBreakdown<T>)> {
    let value = |v: &Option<Var<T>>| v.as_ref().map_or(T::zero(), Var::item);
    let mut breakdown = LossBreakdown {
        recon: parts.recon.item(),
        reg: value(&parts.reg),
        maoc: value(&parts.maoc),
        ce: value(&parts.ce),
        ag: value(&parts.ag),
        orm: value(&parts.orm),
        lambda_reg,
        lambda_maoc,
        ..LossBreakdown::zeroed()
    };
    let mut total = parts.recon.clone();
    if let Some(reg) = &parts.reg {
        total = total.add(&reg.mul_scalar(lambda_reg))?;
    }
    if let Some(maoc) = &parts.maoc {
        total = total.add(&maoc.mul_scalar(lambda_maoc))?;
    }
    if weights.enabled && weights.s.dims() != (1, 3) {
        return Err(Error::Shape {
            op: "compose_total",
            lhs: weights.s.shape(),
            rhs: vec![1, 3],
        });
    }
    for (k, term) in [&parts.ce, &parts.ag, &parts.orm].into_iter().enumerate() {
        let Some(term) = term else { continue };
        if weights.enabled {
            let s_k = weights.s.columns(k, k + 1)?;
            let precision = s_k.neg().exp();
            total = total.add(&term.mul(&precision)?)?.add(&s_k)?;
            breakdown.weights_used[k] = precision.item();
            breakdown.offsets[k] = s_k.item();
        } else {
            let w = weights.fixed_weights[k];
            total = total.add(&term.mul_scalar(w))?;
            breakdown.weights_used[k] = w;
        }
    }
    breakdown.total = total.item();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::two_sided_label_distribution;
    use ndarray::array;

    fn col(v: &[f64]) -> Var<f64> {
        Var::param(Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap())
    }

    #[test]
    fn ce_uniform_logits() {
        let logits = Var::vector(&[0.0f64; 5]);
        for y in 0..5 {
            let v = ce_loss(&logits, &[y]).unwrap().item();
            assert!((v - 5f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn ce_confident_logits() {
        let logits = Var::vector(&[10.0f64, -10.0]);
        let v = ce_loss(&logits, &[0]).unwrap().item();
        let direct = (-20f64).exp().ln_1p();
        assert!((v - direct).abs() < 1e-15);
        assert!((v - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn ce_gradient_is_softmax_minus_one_hot() {
        let logits = Var::vector(&[0.3f64, -1.2, 2.0, 0.0]);
        ce_loss(&logits, &[1]).unwrap().backward().unwrap();
        let v = logits.value();
        let z: f64 = v.iter().map(|x| x.exp()).sum();
        for j in 0..4 {
            let expected = v[[0, j]].exp() / z - if j == 1 { 1.0 } else { 0.0 };
            assert!((logits.grad()[[0, j]] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let logits = Var::vector(&[0.0f64; 3]);
        assert!(ce_loss(&logits, &[3]).is_err());
        assert!(ce_loss(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn soft_clamp_range_and_centre() {
        let raw = Var::param(array![[-100.0f64], [0.0], [100.0]]);
        let s = soft_clamp_sigma(&raw);
        let v = s.value();
        assert!((v[[0, 0]] - SIGMA_MIN).abs() < 1e-6 && v[[0, 0]] >= SIGMA_MIN);
        assert!((v[[1, 0]] - 1.0).abs() < 1e-12);
        assert!((v[[2, 0]] - SIGMA_MAX).abs() < 1e-6 && v[[2, 0]] <= SIGMA_MAX);
        s.sum().backward().unwrap();
        assert!(raw.grad().iter().all(|&g| g.is_finite() && g > 0.0));
    }

    #[test]
    fn soft_target_matches_label_distribution() {
        let labels = [0usize, 2, 4];
        let sl = col(&[0.3, 1.1, 4.0]);
        let sr = col(&[2.5, 0.7, 0.2]);
        let t = ag_soft_target(&labels, &sl, &sr, 5, LABEL_EPS).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let (a, b) = (sl.value()[[i, 0]], sr.value()[[i, 0]]);
            let d = two_sided_label_distribution(y, a, b, 0.5 * (a + b), 5, LABEL_EPS).unwrap();
            for j in 0..5 {
                assert!((t.value()[[i, j]] - d.probs()[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn narrow_target_approaches_hard_ce() {
        let logits = Var::vector(&[0.4f64, -0.3, 1.2, 0.8, -1.0]);
        let sigma = col(&[SIGMA_MIN]);
        for y in 0..5 {
            let ag = ag_soft_loss(&logits, &[y], &sigma, &sigma).unwrap().item();
            let ce = ce_loss(&logits, &[y]).unwrap().item();
            assert!((ag - ce).abs() < 0.02, "{ag} vs {ce}");
        }
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Var::vector(&[0.0f64; 5]);
        let sigma = col(&[SIGMA_MAX]);
        let v = ag_soft_loss(&logits, &[2], &sigma, &sigma).unwrap().item();
        assert!((v - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn over_grading_is_cheaper_when_right_side_is_wider() {
        let (y, c) = (1usize, 5usize);
        let peaked = |at: usize| {
            let mut v = vec![0.0f64; c];
            v[at] = 3.0;
            Var::vector(&v)
        };
        let sl = col(&[0.2]);
        let sr = col(&[2.0]);
        let over = ag_soft_loss(&peaked(y + 1), &[y], &sl, &sr).unwrap().item();
        let under = ag_soft_loss(&peaked(y - 1), &[y], &sl, &sr).unwrap().item();
        assert!(over < under, "{over} vs {under}");
    }

    #[test]
    fn huber_branches() {
        assert_eq!(orm_loss(&col(&[2.0]), &[2], 1.0).unwrap().item(), 0.0);
        assert!((orm_loss(&col(&[2.5]), &[2], 1.0).unwrap().item() - 0.125).abs() < 1e-15);
        assert!((orm_loss(&col(&[4.0]), &[2], 1.0).unwrap().item() - 1.5).abs() < 1e-15);
        assert!((orm_loss(&col(&[0.0]), &[2], 1.0).unwrap().item() - 1.5).abs() < 1e-15);
        assert!(orm_loss(&col(&[0.0]), &[2], 0.0).is_err());
    }

    #[test]
    fn maoc_zero_for_orthogonal_prototypes_at_means() {
        let store = PrototypeStore::from_means(array![[1.0f64, 0.0], [0.0, 2.0]]);
        let z = Var::param(array![[1.0, 0.0], [0.0, 2.0]]);
        let t = maoc_loss(&z, &[0, 1], &store, 0.1, 0.5).unwrap();
        assert_eq!(t.loss.item(), 0.0);
        assert_eq!(t.pairs, 2);
    }

    #[test]
    fn maoc_identical_prototypes() {
        let store = PrototypeStore::from_means(array![[1.0f64, 1.0], [2.0, 2.0]]);
        let z = Var::param(array![[1.0, 1.0], [2.0, 2.0]]);
        let t = maoc_loss(&z, &[0, 1], &store, 0.1, 0.5).unwrap();
        assert!((t.loss.item() - 0.81).abs() < 1e-14);
    }

    #[test]
    fn maoc_compactness_only() {
        let store = PrototypeStore::from_means(array![[1.0f64, 0.0], [0.0, 1.0]]);
        let z = Var::param(array![[3.0, 0.0]]);
        let t = maoc_loss(&z, &[0], &store, 0.1, 0.5).unwrap();
        assert!((t.loss.item() - 2.0).abs() < 1e-14);
        t.loss.backward().unwrap();
        // d/dz 0.5·‖z − μ‖² = z − μ
        assert_eq!(z.grad(), array![[2.0, 0.0]]);
    }

    #[test]
    fn maoc_skips_zero_norm_prototypes() {
        let store = PrototypeStore::from_means(array![[0.0f64, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let z = Var::param(array![[1.0, 0.0]]);
        let t = maoc_loss(&z, &[1], &store, 0.1, 0.5).unwrap();
        assert_eq!(t.skipped_pairs, 4);
        assert_eq!(t.pairs, 2);
        assert!((t.orthogonality - 0.81).abs() < 1e-14);
    }

    #[test]
    fn maoc_orthogonality_scale_invariant() {
        let a = PrototypeStore::from_means(array![[1.0f64, 0.3], [0.2, 1.0], [0.7, 0.7]]);
        let b = PrototypeStore::from_means(array![[5.0f64, 1.5], [0.02, 0.1], [70.0, 70.0]]);
        let z = Var::param(array![[0.0, 0.0]]);
        let ta = maoc_loss(&z, &[0], &a, 0.1, 0.0).unwrap();
        let tb = maoc_loss(&z, &[0], &b, 0.1, 0.0).unwrap();
        assert!((ta.orthogonality - tb.orthogonality).abs() < 1e-14);
    }

    #[test]
    fn recon_examples() {
        let x = array![[0.0f64, 0.0]];
        let same = Var::param(x.clone());
        assert_eq!(recon_loss(x.view(), &same).unwrap().item(), 0.0);
        let xt = Var::param(array![[1.0, 1.0]]);
        let loss = recon_loss(x.view(), &xt).unwrap();
        assert_eq!(loss.item(), 1.0);
        loss.backward().unwrap();
        assert_eq!(xt.grad(), array![[1.0, 1.0]]);
        assert!(recon_loss(array![[0.0f64]].view(), &xt).is_err());
    }

    fn unit_parts() -> LossParts<f64> {
        LossParts {
            recon: Var::scalar_constant(0.0),
            reg: None,
            maoc: None,
            ce: Some(Var::scalar_constant(1.0)),
            ag: Some(Var::scalar_constant(1.0)),
            orm: Some(Var::scalar_constant(1.0)),
        }
    }

    #[test]
    fn compose_adaptive_at_zero() {
        let w = AdaptiveWeights::adaptive(Var::param(Array2::zeros((1, 3))));
        let (total, b) = compose_total(&unit_parts(), &w, 0.0, 0.0).unwrap();
        assert_eq!(total.item(), 3.0);
        assert_eq!(b.recompose(), b.total);
    }

    #[test]
    fn compose_fixed_weights() {
        let (total, b) =
            compose_total(&unit_parts(), &AdaptiveWeights::fixed(), 0.1, 0.05).unwrap();
        assert_eq!(total.item(), 2.5);
        assert_eq!(b.weights_used, [1.0, 1.0, 0.5]);
    }

    #[test]
    fn adaptive_stationary_at_log_loss() {
        let s = Var::param(array![[2f64.ln(), 0.0, 0.3]]);
        let mut parts = unit_parts();
        parts.ce = Some(Var::scalar_constant(2.0));
        let (total, _) =
            compose_total(&parts, &AdaptiveWeights::adaptive(s.clone()), 0.0, 0.0).unwrap();
        total.backward().unwrap();
        assert!(s.grad()[[0, 0]].abs() < 1e-15);
        assert!((s.grad()[[0, 1]] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn breakdown_recomposes_with_regularizers() {
        let parts = LossParts {
            recon: Var::scalar_constant(0.37),
            reg: Some(Var::scalar_constant(0.02)),
            maoc: Some(Var::scalar_constant(1.3)),
            ce: Some(Var::scalar_constant(1.1)),
            ag: Some(Var::scalar_constant(1.7)),
            orm: None,
        };
        let s = Var::param(array![[0.2f64, -0.4, 1.1]]);
        let (total, b) = compose_total(&parts, &AdaptiveWeights::adaptive(s), 0.1, 0.05).unwrap();
        assert!((b.recompose() - total.item()).abs() < 1e-12);
        assert_eq!(b.weights_used[2], 0.0);
        assert_eq!(b.offsets[2], 0.0);
    }

    #[test]
    fn first_non_finite_names_term() {
        let mut b = LossBreakdown::<f64>::zeroed();
        b.ag = f64::NAN;
        b.total = f64::NAN;
        assert_eq!(b.first_non_finite(), Some("ag"));
    }
}
