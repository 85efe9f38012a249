//! Dense f64 matrices plus a tape-based reverse-mode autodiff engine.
//!
//! Everything trainable in this crate (cluster models, matrix factorization,
//! the tag discriminator) builds its forward pass on [`Tape`] and reads
//! gradients back from a single reverse sweep. Tensors are row-major and
//! two-dimensional; scalars are 1x1.

mod adam;
pub mod gradcheck;
mod tape;

pub use adam::{Adam, AdamConfig};
pub(crate) use tape::sigmoid;
pub use tape::{RowGroups, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{EcfError, Result};

/// Row-major dense matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds from row-major data; errors if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EcfError::ShapeMismatch {
                op: "from_vec",
                detail: format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Gaussian init with mean 0 and the given standard deviation.
    pub fn randn<R: Rng>(rows: usize, cols: usize, std_dev: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std_dev).expect("std_dev must be finite and non-negative");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Errors with the op name if any entry is NaN or infinite.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(EcfError::NonFinite { op })
        }
    }

    pub fn transposed(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Indices of the k largest values in a row, ties toward the lower index.
/// The result is sorted ascending by index. Panics if k > len.
pub fn topk_row_indices(row: &[f64], k: usize) -> Vec<usize> {
    assert!(k <= row.len(), "k={} exceeds row length {}", k, row.len());
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_unstable_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Binary top-k mask per row: exactly k ones, ties toward the lower index.
pub fn topk_binary_mask(scores: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 || k > scores.cols() {
        return Err(EcfError::Config(format!(
            "top-k width {} out of range 1..={}",
            k,
            scores.cols()
        )));
    }
    let mut mask = Tensor::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        for idx in topk_row_indices(scores.row(r), k) {
            mask.set(r, idx, 1.0);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        let t = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(1, 0), 3.0);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::randn(3, 4, 0.01, &mut ChaCha8Rng::seed_from_u64(7));
        let b = Tensor::randn(3, 4, 0.01, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn ensure_finite_flags_nan() {
        let mut t = Tensor::zeros(1, 3);
        assert!(t.ensure_finite("test").is_ok());
        t.set(0, 1, f64::NAN);
        assert!(matches!(
            t.ensure_finite("test"),
            Err(EcfError::NonFinite { op: "test" })
        ));
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        // Row [0.5, 0.9, 0.9, 0.1], k=2: the tied 0.9s win, both above 0.5.
        let m = topk_binary_mask(&Tensor::from_vec(1, 4, vec![0.5, 0.9, 0.9, 0.1]).unwrap(), 2).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
        // All-equal row: the first k indices are kept.
        let m = topk_binary_mask(&Tensor::filled(1, 4, 0.3), 2).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn topk_rejects_zero_and_oversized_k() {
        let t = Tensor::zeros(2, 3);
        assert!(topk_binary_mask(&t, 0).is_err());
        assert!(topk_binary_mask(&t, 4).is_err());
        assert!(topk_binary_mask(&t, 3).is_ok());
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.transposed().transposed(), t);
        assert_eq!(t.transposed().get(2, 1), 6.0);
    }
}
