//! AdamW, global gradient-norm clipping and a reduce-on-plateau schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    /// Zero moments shaped like `shapes`.
    pub fn new(shapes: &[(usize, usize)], weight_decay: T) -> Self {
        Self {
            beta1: T::lit(BETA1),
            beta2: T::lit(BETA2),
            eps: T::lit(ADAM_EPS),
            weight_decay,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step: 0,
        }
    }

    /// One bias-corrected update of every parameter. Entries of `decay` pick
    /// which parameters receive weight decay.
    pub fn update(
        &mut self,
        params: &mut [&mut Array2<T>],
        grads: &[Array2<T>],
        decay: &[bool],
        lr: T,
    ) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != self.m.len()
            || decay.len() != self.m.len()
        {
            return contract(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for k in 0..params.len() {
            let p = &mut *params[k];
            if p.dim() != grads[k].dim() || p.dim() != self.m[k].dim() {
                return contract(format!(
                    "parameter {k} shape {:?} does not match its gradient",
                    p.dim()
                ));
            }
            if decay[k] {
                let shrink = T::one() - lr * self.weight_decay;
                p.mapv_inplace(|w| w * shrink);
            }
            ndarray::Zip::from(&mut *p)
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .and(&grads[k])
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

pub fn global_norm<T: Scalar>(grads: &[Array2<T>]) -> T {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .fold(T::zero(), |a, &g| a + g * g)
        .sqrt()
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Array2<T>], max_norm: T) -> T {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Multiplies the learning rate by `factor` once the monitored value (higher is
/// better) has not improved for more than `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub reductions: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return contract(format!("plateau factor must lie in (0, 1), got {factor}"));
        }
        if !(lr > 0.0) {
            return contract(format!("learning rate must be positive, got {lr}"));
        }
        Ok(Self {
            factor,
            patience,
            lr,
            best: None,
            bad_epochs: 0,
            reductions: 0,
        })
    }

    /// Records one epoch's value; returns true if the learning rate dropped.
    pub fn observe(&mut self, value: f64) -> bool {
        if self.best.is_none_or(|b| value > b) {
            self.best = Some(value);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            self.reductions += 1;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = array![[1.0f64, -2.0]];
        let g = array![[0.5, -3.0]];
        let mut opt = AdamW::new(&[(1, 2)], 0.0);
        opt.update(&mut [&mut p], &[g], &[true], 0.1).unwrap();
        // First bias-corrected step is lr · sign(g) up to eps.
        assert!((p[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let mut p = array![[2.0f64]];
        let mut opt = AdamW::new(&[(1, 1)], 0.5);
        opt.update(&mut [&mut p], &[array![[0.0]]], &[true], 0.1)
            .unwrap();
        assert!((p[[0, 0]] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        let mut q = array![[2.0f64]];
        let mut opt = AdamW::new(&[(1, 1)], 0.5);
        opt.update(&mut [&mut q], &[array![[0.0]]], &[false], 0.1)
            .unwrap();
        assert_eq!(q[[0, 0]], 2.0);
    }

    #[test]
    fn matches_reference_recursion() {
        let mut p = array![[0.3f64]];
        let mut opt = AdamW::new(&[(1, 1)], 0.01);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.3f64);
        for t in 1..=5 {
            let g = 2.0 * w - 1.0;
            let grad = array![[2.0 * p[[0, 0]] - 1.0]];
            opt.update(&mut [&mut p], &[grad], &[true], 0.05).unwrap();
            w *= 1.0 - 0.05 * 0.01;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((p[[0, 0]] - w).abs() < 1e-14);
        }
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let mut s = ReduceOnPlateau::new(1.0, 0.2, 2).unwrap();
        assert!(!s.observe(0.5));
        assert!(!s.observe(0.5));
        assert!(!s.observe(0.4));
        assert!(s.observe(0.5));
        assert!((s.lr - 0.2).abs() < 1e-15);
        assert!(!s.observe(0.6));
        assert_eq!(s.bad_epochs, 0);
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(values in prop::collection::vec(-1e3f64..1e3, 1..40), max in 0.01f64..10.0) {
            let n = values.len();
            let mut grads = vec![Array2::from_shape_vec((1, n), values).unwrap(), array![[3.0, -4.0]]];
            let before = global_norm(&grads);
            let reported = clip_global_norm(&mut grads, max);
            prop_assert_eq!(before, reported);
            prop_assert!(global_norm(&grads) <= max + 1e-9);
        }

        #[test]
        fn lr_never_increases(values in prop::collection::vec(0.0f64..1.0, 1..80), patience in 0usize..8) {
            let mut s = ReduceOnPlateau::new(1e-3, 0.2, patience).unwrap();
            let mut lr = s.lr;
            let mut since_improvement = 0usize;
            let mut best = f64::NEG_INFINITY;
            for v in values {
                if v > best { best = v; since_improvement = 0; } else { since_improvement += 1; }
                let reduced = s.observe(v);
                prop_assert!(s.lr <= lr);
                if reduced {
                    prop_assert!((s.lr - lr * 0.2).abs() < 1e-18);
                    prop_assert!(since_improvement > patience);
                }
                lr = s.lr;
            }
        }
    }
}
