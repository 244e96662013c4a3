//! PCA on the d x d sample covariance, without whitening.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::descriptors::DescriptorSet;
use crate::error::{Error, Result};
use crate::model_io::{read_len, ModelKind, PersistedModel};
use crate::wire;

const ORTHONORMAL_TOL: f64 = 1e-8;
const JACOBI_MAX_SWEEPS: usize = 100;

/// `floor(d / 2)`, the pipeline's default output dimension (at least 1).
pub fn half_dim(d: usize) -> usize {
    (d / 2).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// Row-major `in_dim x out_dim`; column `c` is the c-th principal direction.
    basis: Vec<f64>,
    /// Eigenvalues matching the basis columns, descending.
    variances: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl PcaModel {
    pub fn new(mean: Vec<f64>, basis: Vec<f64>, variances: Vec<f64>, out_dim: usize) -> Result<Self> {
        let in_dim = mean.len();
        if in_dim == 0 || out_dim == 0 || out_dim > in_dim {
            return Err(Error::InvariantViolation(format!(
                "PCA needs 1 <= out_dim <= in_dim, got {out_dim} and {in_dim}"
            )));
        }
        if basis.len() != in_dim * out_dim || variances.len() != out_dim {
            return Err(Error::InvariantViolation("PCA basis has the wrong shape".into()));
        }
        if mean.iter().chain(&basis).chain(&variances).any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite PCA parameter".into()));
        }
        let model = Self {
            mean,
            basis,
            variances,
            in_dim,
            out_dim,
        };
        for a in 0..out_dim {
            for b in a..out_dim {
                let dot: f64 = (0..in_dim).map(|i| model.basis_at(i, a) * model.basis_at(i, b)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                if (dot - target).abs() > ORTHONORMAL_TOL {
                    return Err(Error::InvariantViolation(format!(
                        "PCA basis columns {a} and {b} are not orthonormal (dot = {dot})"
                    )));
                }
            }
        }
        Ok(model)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Variance captured by each component.
    pub fn component_variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn basis_at(&self, row: usize, col: usize) -> f64 {
        self.basis[row * self.out_dim + col]
    }

    pub fn component(&self, col: usize) -> Vec<f64> {
        (0..self.in_dim).map(|i| self.basis_at(i, col)).collect()
    }

    fn project_row(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.in_dim {
            let c = x[i] - self.mean[i];
            let row = &self.basis[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, b) in out.iter_mut().zip(row) {
                *o += c * b;
            }
        }
    }
}

impl PersistedModel for PcaModel {
    const KIND: ModelKind = ModelKind::Pca;

    fn write_body<W: Write>(&self, w: &mut W) -> Result<()> {
        wire::write_len(w, self.in_dim)?;
        wire::write_len(w, self.out_dim)?;
        wire::write_f64s(w, &self.mean)?;
        wire::write_f64s(w, &self.basis)?;
        wire::write_f64s(w, &self.variances)?;
        Ok(())
    }

    fn read_body<R: Read>(r: &mut R) -> Result<Self> {
        let in_dim = read_len(r, "input dimension", 1 << 16)?;
        let out_dim = read_len(r, "output dimension", 1 << 16)?;
        let mean = wire::read_f64s(r, in_dim)?;
        let basis = wire::read_f64s(r, in_dim * out_dim)?;
        let variances = wire::read_f64s(r, out_dim)?;
        PcaModel::new(mean, basis, variances, out_dim)
    }
}

/// Fits the top `out_dim` principal directions of the sample covariance.
///
/// Each basis vector is sign-normalized so its largest-magnitude component
/// (first one on ties) is positive.
pub fn pca_fit(x: &DescriptorSet, out_dim: usize) -> Result<PcaModel> {
    let d = x.dim();
    if out_dim == 0 || out_dim > d {
        return Err(Error::invalid(format!(
            "PCA output dimension must be in 1..={d}, got {out_dim}"
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid(format!(
            "PCA needs at least 2 descriptors, got {}",
            x.len()
        )));
    }
    let mean = x.mean();
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in x.rows() {
        for (c, (v, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            for b in a..d {
                cov[a * d + b] += ca * centered[b];
            }
        }
    }
    let denom = (x.len() - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }

    let (eigenvalues, eigenvectors) = symmetric_eigen(&cov, d)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));

    let mut basis = vec![0.0; d * out_dim];
    let mut variances = Vec::with_capacity(out_dim);
    for (col, &e) in order.iter().take(out_dim).enumerate() {
        let mut v: Vec<f64> = (0..d).map(|i| eigenvectors[i * d + e]).collect();
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        v.iter_mut().for_each(|c| *c /= norm);
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, c)| if c.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        for i in 0..d {
            basis[i * out_dim + col] = v[i];
        }
        variances.push(eigenvalues[e].max(0.0));
    }
    PcaModel::new(mean, basis, variances, out_dim)
}

pub fn pca_project(model: &PcaModel, x: &DescriptorSet) -> Result<DescriptorSet> {
    if x.dim() != model.in_dim {
        return Err(Error::DimensionMismatch {
            expected: model.in_dim,
            found: x.dim(),
        });
    }
    let m = model.out_dim;
    let mut out = vec![0.0; x.len() * m];
    out.par_chunks_mut(m)
        .zip(x.as_slice().par_chunks(x.dim()))
        .for_each(|(o, row)| model.project_row(row, o));
    DescriptorSet::new(out, m)
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n x n` matrix.
/// Returns eigenvalues and row-major eigenvectors (column `k` pairs with value `k`).
pub(crate) fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum::<f64>()
            .sqrt();
        if off <= scale * 1e-15 {
            let values = (0..n).map(|i| a[i * n + i]).collect();
            return Ok((values, v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numeric("Jacobi eigensolver did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_line() {
        let rows: Vec<[f64; 2]> = (0..7).map(|i| [i as f64 - 1.0, i as f64 - 1.0]).collect();
        let x = DescriptorSet::from_rows(&rows, 2).unwrap();
        let m = pca_fit(&x, 1).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.basis_at(0, 0) - r).abs() < 1e-12 && (m.basis_at(1, 0) - r).abs() < 1e-12);
        let total: f64 = {
            let v = x.variance();
            (v[0] + v[1]) * 7.0 / 6.0
        };
        assert!((m.component_variances()[0] - total).abs() < 1e-12);
        let p = pca_project(&m, &x).unwrap();
        let pv = p.variance()[0] * 7.0 / 6.0;
        assert!((pv - total).abs() < 1e-12);
    }

    #[test]
    fn mean_projects_to_zero_and_empty_stays_empty() {
        let x = DescriptorSet::from_rows(&[[1.0, 2.0, 0.0], [3.0, -1.0, 4.0], [0.0, 0.0, 1.0]], 3).unwrap();
        let m = pca_fit(&x, 2).unwrap();
        let at_mean = DescriptorSet::from_rows(&[m.mean().to_vec()], 3).unwrap();
        let p = pca_project(&m, &at_mean).unwrap();
        assert!(p.row(0).iter().all(|v| v.abs() < 1e-15));
        let e = pca_project(&m, &DescriptorSet::empty(3).unwrap()).unwrap();
        assert_eq!((e.len(), e.dim()), (0, 2));
    }

    #[test]
    fn argument_errors() {
        let x = DescriptorSet::from_rows(&[[1.0, 2.0], [2.0, 3.0]], 2).unwrap();
        assert!(pca_fit(&x, 3).is_err());
        assert!(pca_fit(&x, 0).is_err());
        assert!(pca_fit(&DescriptorSet::from_rows(&[[1.0, 2.0]], 2).unwrap(), 1).is_err());
        let m = pca_fit(&x, 1).unwrap();
        assert!(pca_project(&m, &DescriptorSet::from_rows(&[[1.0]], 1).unwrap()).is_err());
    }

    #[test]
    fn sign_convention() {
        let rows = [[0.0, 0.0], [-1.0, -3.0], [1.0, 3.0], [-2.0, -6.1]];
        let m = pca_fit(&DescriptorSet::from_rows(&rows, 2).unwrap(), 2).unwrap();
        for c in 0..2 {
            let v = m.component(c);
            let big = if v[0].abs() >= v[1].abs() { v[0] } else { v[1] };
            assert!(big > 0.0);
        }
    }

    #[test]
    fn half_dim_rule() {
        assert_eq!(half_dim(426), 213);
        assert_eq!(half_dim(7), 3);
        assert_eq!(half_dim(1), 1);
    }

    #[test]
    fn rejects_non_orthonormal_basis() {
        assert!(PcaModel::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0], 1).is_err());
    }
}
