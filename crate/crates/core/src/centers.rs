//! Learnable class prototypes in embedding space.

use crate::error::{check_len, Error, Result};
use crate::nss::NegativeAssignment;
use crate::numeric::{gaussian_vec, Rng};

/// Standard deviation of the initial center entries.
pub const CENTER_INIT_STD: f64 = 0.1;

/// `K x c_d` matrix of class centers with its optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    k: usize,
    dim: usize,
    pub values: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl ClassCenters {
    pub fn init(k: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::init_with_std(k, dim, CENTER_INIT_STD, rng)
    }

    pub fn init_with_std(k: usize, dim: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        if k < 2 || dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "centers need k >= 2 and d >= 1, got k={k}, d={dim}"
            )));
        }
        Ok(Self {
            k,
            dim,
            values: gaussian_vec(rng, k * dim, std),
            velocity: vec![0.0; k * dim],
        })
    }

    pub fn from_values(k: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if k < 2 || dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "centers need k >= 2 and d >= 1, got k={k}, d={dim}"
            )));
        }
        check_len("ClassCenters::from_values", k * dim, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class centers"));
        }
        Ok(Self {
            k,
            dim,
            values,
            velocity: vec![0.0; k * dim],
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row `class` (the positive prototype of that class).
    pub fn row(&self, class: usize) -> &[f64] {
        &self.values[class * self.dim..(class + 1) * self.dim]
    }

    #[inline]
    pub fn get(&self, class: usize, j: usize) -> f64 {
        self.values[class * self.dim + j]
    }

    pub fn positive_center(&self, label: usize) -> Result<&[f64]> {
        if label >= self.k {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.k,
            });
        }
        Ok(self.row(label))
    }
}

/// Scatter-adds per-sample gradients into a `K x c_d` matrix.
///
/// `d_positive[i][j]` lands on row `labels[i]`; `d_negative[i][j]` lands on
/// row `negatives.source(i, j)`, column `j`. Samples are visited in
/// ascending order, dimensions within a sample likewise.
pub fn accumulate_center_grads(
    k: usize,
    labels: &[usize],
    d_positive: &[Vec<f64>],
    d_negative: &[Vec<f64>],
    negatives: &NegativeAssignment,
) -> Result<Vec<f64>> {
    let dim = negatives.dim();
    check_len("center grads positive", labels.len(), d_positive.len())?;
    check_len("center grads negative", labels.len(), d_negative.len())?;
    check_len("center grads assignment", labels.len(), negatives.len())?;
    let mut out = vec![0.0; k * dim];
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        check_len("center grads row", dim, d_positive[i].len())?;
        check_len("center grads row", dim, d_negative[i].len())?;
        for j in 0..dim {
            out[label * dim + j] += d_positive[i][j];
            out[negatives.source(i, j) * dim + j] += d_negative[i][j];
        }
    }
    Ok(out)
}
