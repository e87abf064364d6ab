//! Running per-class latent means used by the margin/compactness regularizer.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Default exponential-moving-average momentum.
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// `C × d` class means plus the number of samples folded into each.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore<T> {
    means: Array2<T>,
    counts: Vec<u64>,
}

impl<T: Scalar> PrototypeStore<T> {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            means: Array2::zeros((classes, dim)),
            counts: vec![0; classes],
        }
    }

    /// Builds a store with every class initialized to the given means.
    pub fn from_means(means: Array2<T>) -> Self {
        let counts = vec![1; means.nrows()];
        Self { means, counts }
    }

    pub fn from_parts(means: Array2<T>, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != means.nrows() {
            return Err(Error::Shape {
                op: "prototype store",
                lhs: vec![means.nrows(), means.ncols()],
                rhs: vec![counts.len()],
            });
        }
        Ok(Self { means, counts })
    }

    pub fn classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> ArrayView2<'_, T> {
        self.means.view()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.counts.get(class).is_some_and(|&c| c > 0)
    }

    pub fn mean(&self, class: usize) -> ArrayView1<'_, T> {
        self.means.row(class)
    }

    /// Folds a batch into the running means:
    /// `μ_c ← m·μ_c + (1−m)·mean_c(batch)` for every class present. A class seen
    /// for the first time takes the batch mean directly.
    pub fn update(&mut self, z: ArrayView2<'_, T>, labels: &[usize], momentum: T) -> Result<()> {
        if !(momentum >= T::zero() && momentum < T::one()) {
            return contract(format!(
                "prototype momentum must lie in [0, 1), got {momentum}"
            ));
        }
        if z.nrows() != labels.len() || z.ncols() != self.dim() {
            return Err(Error::Shape {
                op: "prototype update",
                lhs: vec![z.nrows(), z.ncols()],
                rhs: vec![labels.len(), self.dim()],
            });
        }
        let classes = self.classes();
        let mut sums = Array2::<T>::zeros((classes, self.dim()));
        let mut seen = vec![0u64; classes];
        for (row, &y) in z.rows().into_iter().zip(labels) {
            if y >= classes {
                return contract(format!("grade {y} out of range for {classes} classes"));
            }
            let mut acc = sums.row_mut(y);
            acc += &row;
            seen[y] += 1;
        }
        for c in 0..classes {
            if seen[c] == 0 {
                continue;
            }
            let batch_mean = sums.row(c).mapv(|v| v / T::from_u64(seen[c]).unwrap());
            let mut proto = self.means.row_mut(c);
            if self.counts[c] == 0 {
                proto.assign(&batch_mean);
            } else {
                proto.zip_mut_with(&batch_mean, |p, &b| {
                    *p = momentum * *p + (T::one() - momentum) * b
                });
            }
            self.counts[c] += seen[c];
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_momentum_takes_latest_batch_mean() {
        let mut s = PrototypeStore::<f64>::new(2, 2);
        s.update(array![[1.0, 1.0], [3.0, 5.0]].view(), &[0, 0], 0.0)
            .unwrap();
        assert_eq!(s.mean(0).to_vec(), vec![2.0, 3.0]);
        s.update(array![[-1.0, 0.0]].view(), &[0], 0.0).unwrap();
        assert_eq!(s.mean(0).to_vec(), vec![-1.0, 0.0]);
    }

    #[test]
    fn absent_class_unchanged() {
        let mut s = PrototypeStore::<f64>::new(3, 1);
        s.update(array![[1.0], [2.0]].view(), &[0, 1], 0.9).unwrap();
        let before = s.mean(1).to_vec();
        s.update(array![[7.0]].view(), &[0], 0.9).unwrap();
        assert_eq!(s.mean(1).to_vec(), before);
        assert!(!s.is_initialized(2));
    }

    #[test]
    fn constant_stream_converges_geometrically() {
        let mut s = PrototypeStore::<f64>::new(1, 2);
        s.update(array![[4.0, -4.0]].view(), &[0], 0.9).unwrap();
        let v = array![1.0, 0.5];
        let d0 = ((4.0f64 - 1.0).powi(2) + (-4.0f64 - 0.5).powi(2)).sqrt();
        for _ in 0..50 {
            s.update(v.view().insert_axis(ndarray::Axis(0)), &[0], 0.9)
                .unwrap();
        }
        let d = (&s.mean(0) - &v).mapv(|x| x * x).sum().sqrt();
        assert!(d < 0.9f64.powi(50) * d0 + 1e-12, "{d}");
    }

    #[test]
    fn rejects_bad_momentum_and_labels() {
        let mut s = PrototypeStore::<f64>::new(2, 1);
        assert!(s.update(array![[1.0]].view(), &[0], 1.0).is_err());
        assert!(s.update(array![[1.0]].view(), &[2], 0.5).is_err());
        assert!(s.update(array![[1.0, 2.0]].view(), &[0], 0.5).is_err());
    }
}
