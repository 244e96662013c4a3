//! Energy split between the mean- and variance-deviation halves of an encoding.

use crate::encoding::EncodedVector;
use crate::error::{Error, Result};

const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySplit {
    /// Fraction of the squared norm in the mean-deviation half.
    pub e_mean: f64,
    /// Fraction in the variance-deviation half.
    pub e_cov: f64,
}

/// Squared norms of both halves of an l2-normalized vector.
pub fn energy_split(v: &EncodedVector) -> Result<EnergySplit> {
    let sq = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
    let e_mean = sq(v.mean_part());
    let e_cov = sq(v.variance_part());
    let norm = (e_mean + e_cov).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::invalid(format!(
            "energy split needs an l2-normalized vector, norm is {norm}"
        )));
    }
    Ok(EnergySplit { e_mean, e_cov })
}

/// Linear-kernel similarity (cosine similarity for l2-normalized inputs).
pub fn linear_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}
