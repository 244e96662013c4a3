//! Diagonal-covariance Gaussian mixtures: EM training, posteriors and likelihood.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::clustering::{kmeans_assign, kmeans_fit, KMeansOptions};
use crate::descriptors::DescriptorSet;
use crate::error::{Error, Result};
use crate::model_io::{read_len, ModelKind, PersistedModel};
use crate::wire;

pub const DEFAULT_MIXTURE_SIZE: usize = 256;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Variance floor as a fraction of the global per-dimension variance.
pub const DEFAULT_VAR_FLOOR_RATIO: f64 = 1e-4;

const WEIGHT_SUM_TOL: f64 = 1e-10;
const MIN_WEIGHT: f64 = 1e-300;
const ABS_VAR_FLOOR: f64 = 1e-12;
const ESTEP_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    k2: usize,
    dim: usize,
}

impl GmmModel {
    /// Builds a model, checking weights sum to one, positivity and finiteness.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, dim: usize) -> Result<Self> {
        let k2 = weights.len();
        if k2 == 0 || dim == 0 {
            return Err(Error::InvariantViolation("empty mixture".into()));
        }
        if means.len() != k2 * dim || variances.len() != k2 * dim {
            return Err(Error::InvariantViolation(format!(
                "expected {k2} x {dim} means and variances"
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvariantViolation("mixture weights must be positive".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvariantViolation(format!(
                "mixture weights sum to {sum}, not 1"
            )));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite mean".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvariantViolation("variances must be positive".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
            k2,
            dim,
        })
    }

    pub fn k2(&self) -> usize {
        self.k2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    fn check_dim(&self, x: &DescriptorSet) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.dim(),
            });
        }
        Ok(())
    }

    /// Per-component constant: log pi_k - 0.5 * sum_j log(2 pi var_kj).
    fn log_norms(&self) -> Vec<f64> {
        (0..self.k2)
            .map(|k| {
                self.weights[k].ln()
                    - 0.5 * self.variance(k).iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>()
            })
            .collect()
    }

    /// Writes log(pi_k N(x; mu_k, var_k)) for every k into `out`; returns the maximum.
    fn joint_log_densities(&self, log_norms: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for k in 0..self.k2 {
            let mu = self.mean(k);
            let var = self.variance(k);
            let mut q = 0.0;
            for j in 0..self.dim {
                let d = x[j] - mu[j];
                q += d * d / var[j];
            }
            let l = log_norms[k] - 0.5 * q;
            out[k] = l;
            if l > max {
                max = l;
            }
        }
        max
    }

    /// log p(x) by log-sum-exp; `scratch` has length k2.
    fn log_density(&self, log_norms: &[f64], x: &[f64], scratch: &mut [f64]) -> f64 {
        let max = self.joint_log_densities(log_norms, x, scratch);
        max + scratch.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    /// Posterior row for one descriptor, written into `out` (length k2). Returns log p(x).
    pub(crate) fn posterior_row(&self, log_norms: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        let max = self.joint_log_densities(log_norms, x, out);
        let mut sum = 0.0;
        for q in out.iter_mut() {
            *q = (*q - max).exp();
            sum += *q;
        }
        for q in out.iter_mut() {
            *q /= sum;
        }
        max + sum.ln()
    }

    pub(crate) fn posterior_rows(&self, x: &DescriptorSet) -> (Vec<f64>, Vec<f64>) {
        let k2 = self.k2;
        let log_norms = self.log_norms();
        let mut q = vec![0.0; x.len() * k2];
        let mut ll = vec![0.0; x.len()];
        q.par_chunks_mut(k2 * ESTEP_CHUNK)
            .zip(ll.par_chunks_mut(ESTEP_CHUNK))
            .zip(x.as_slice().par_chunks(x.dim() * ESTEP_CHUNK))
            .for_each(|((qc, lc), xc)| {
                for ((qrow, l), row) in qc.chunks_exact_mut(k2).zip(lc.iter_mut()).zip(xc.chunks_exact(x.dim())) {
                    *l = self.posterior_row(&log_norms, row, qrow);
                }
            });
        (q, ll)
    }
}

impl PersistedModel for GmmModel {
    const KIND: ModelKind = ModelKind::Gmm;

    fn write_body<W: Write>(&self, w: &mut W) -> Result<()> {
        wire::write_len(w, self.k2)?;
        wire::write_len(w, self.dim)?;
        wire::write_f64s(w, &self.weights)?;
        wire::write_f64s(w, &self.means)?;
        wire::write_f64s(w, &self.variances)?;
        Ok(())
    }

    fn read_body<R: Read>(r: &mut R) -> Result<Self> {
        let k2 = read_len(r, "mixture size", 1 << 20)?;
        let dim = read_len(r, "dimension", 1 << 20)?;
        let weights = wire::read_f64s(r, k2)?;
        let means = wire::read_f64s(r, k2 * dim)?;
        let variances = wire::read_f64s(r, k2 * dim)?;
        GmmModel::new(weights, means, variances, dim)
    }
}

/// Posterior probabilities q_i(k), stored row-major N x K2.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    q: Vec<f64>,
    k2: usize,
}

impl Responsibilities {
    pub fn k2(&self) -> usize {
        self.k2
    }

    pub fn len(&self) -> usize {
        self.q.len() / self.k2
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.q[i * self.k2..(i + 1) * self.k2]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.q.chunks_exact(self.k2)
    }
}

pub fn gmm_posteriors(model: &GmmModel, x: &DescriptorSet) -> Result<Responsibilities> {
    model.check_dim(x)?;
    let (q, _) = model.posterior_rows(x);
    Ok(Responsibilities { q, k2: model.k2 })
}

/// Average log-likelihood per descriptor, (1/N) sum_i log sum_k pi_k N(x_i; mu_k, var_k).
pub fn gmm_log_likelihood(model: &GmmModel, x: &DescriptorSet) -> Result<f64> {
    model.check_dim(x)?;
    if x.is_empty() {
        return Err(Error::EmptyInput(
            "log-likelihood of an empty descriptor set is undefined".into(),
        ));
    }
    let log_norms = model.log_norms();
    let mut buf = vec![0.0; model.k2];
    let total: f64 = x
        .rows()
        .map(|row| model.log_density(&log_norms, row, &mut buf))
        .sum();
    Ok(total / x.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceFloor {
    /// Fraction of the per-dimension variance of the training data.
    Relative(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmOptions {
    pub k2: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative log-likelihood improvement falls below this.
    pub tol: f64,
    pub var_floor: VarianceFloor,
}

impl GmmOptions {
    pub fn new(k2: usize, seed: u64) -> Self {
        Self {
            k2,
            seed,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            var_floor: VarianceFloor::Relative(DEFAULT_VAR_FLOOR_RATIO),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Average log-likelihood of each successive parameter set, starting with
    /// the k-means initialization.
    pub log_likelihood_history: Vec<f64>,
    pub iterations: usize,
}

pub fn gmm_fit(x: &DescriptorSet, opts: &GmmOptions) -> Result<GmmModel> {
    gmm_fit_detailed(x, opts).map(|f| f.model)
}

/// EM from a k-means initialization.
pub fn gmm_fit_detailed(x: &DescriptorSet, opts: &GmmOptions) -> Result<GmmFit> {
    let k2 = opts.k2;
    let n = x.len();
    let dim = x.dim();
    if k2 == 0 {
        return Err(Error::invalid("mixture size must be at least 1"));
    }
    if n < k2 {
        return Err(Error::invalid(format!(
            "GMM training needs at least k2 = {k2} descriptors, got {n}"
        )));
    }
    let global_var = x.variance();
    if global_var.iter().all(|&v| v == 0.0) {
        return Err(Error::Numeric(
            "covariance collapse: all training descriptors are identical".into(),
        ));
    }
    let floor: Vec<f64> = match opts.var_floor {
        VarianceFloor::Relative(r) => global_var.iter().map(|v| (r * v).max(ABS_VAR_FLOOR)).collect(),
        VarianceFloor::Absolute(a) => vec![a.max(ABS_VAR_FLOOR); dim],
    };

    let mut model = kmeans_init(x, opts, &floor)?;
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let (q, ll) = model.posterior_rows(x);
        let avg = ll.iter().sum::<f64>() / n as f64;
        if !avg.is_finite() {
            return Err(Error::Numeric("log-likelihood is not finite".into()));
        }
        let prev = history.last().copied();
        history.push(avg);
        if let Some(prev) = prev {
            if (avg - prev) / prev.abs().max(f64::MIN_POSITIVE) < opts.tol {
                break;
            }
        }
        if iterations >= opts.max_iter {
            break;
        }
        model = m_step(x, &q, &model, &floor)?;
        iterations += 1;
    }
    Ok(GmmFit {
        model,
        log_likelihood_history: history,
        iterations,
    })
}

fn kmeans_init(x: &DescriptorSet, opts: &GmmOptions, floor: &[f64]) -> Result<GmmModel> {
    let k2 = opts.k2;
    let dim = x.dim();
    let codebook = kmeans_fit(x, &KMeansOptions::new(k2, opts.seed))?;
    let members = kmeans_assign(&codebook, x)?;
    let counts = members.counts();
    let means = codebook.centers().to_vec();
    let mut variances = vec![0.0; k2 * dim];
    for (row, &k) in x.rows().zip(members.assignments()) {
        for j in 0..dim {
            let d = row[j] - means[k * dim + j];
            variances[k * dim + j] += d * d;
        }
    }
    for k in 0..k2 {
        for j in 0..dim {
            let v = &mut variances[k * dim + j];
            *v = (*v / counts[k].max(1) as f64).max(floor[j]);
        }
    }
    let weights = normalized_weights(counts.iter().map(|&c| c as f64));
    GmmModel::new(weights, means, variances, dim)
}

fn normalized_weights(raw: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut w: Vec<f64> = raw.map(|v| v.max(MIN_WEIGHT)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn m_step(x: &DescriptorSet, q: &[f64], prev: &GmmModel, floor: &[f64]) -> Result<GmmModel> {
    let k2 = prev.k2;
    let dim = x.dim();
    let mut nk = vec![0.0; k2];
    let mut sums = vec![0.0; k2 * dim];
    for (row, qrow) in x.rows().zip(q.chunks_exact(k2)) {
        for k in 0..k2 {
            let w = qrow[k];
            if w == 0.0 {
                continue;
            }
            nk[k] += w;
            for j in 0..dim {
                sums[k * dim + j] += w * row[j];
            }
        }
    }
    let mut means = prev.means.clone();
    let mut live = vec![false; k2];
    for k in 0..k2 {
        // A starved component keeps its previous parameters.
        if nk[k] > f64::EPSILON {
            live[k] = true;
            for j in 0..dim {
                means[k * dim + j] = sums[k * dim + j] / nk[k];
            }
        }
    }
    let mut sq = vec![0.0; k2 * dim];
    for (row, qrow) in x.rows().zip(q.chunks_exact(k2)) {
        for k in 0..k2 {
            let w = qrow[k];
            if w == 0.0 || !live[k] {
                continue;
            }
            for j in 0..dim {
                let d = row[j] - means[k * dim + j];
                sq[k * dim + j] += w * d * d;
            }
        }
    }
    let mut variances = prev.variances.clone();
    for k in 0..k2 {
        if live[k] {
            for j in 0..dim {
                variances[k * dim + j] = (sq[k * dim + j] / nk[k]).max(floor[j]);
            }
        }
    }
    let n = x.len() as f64;
    let weights = normalized_weights(nk.iter().map(|v| v / n));
    GmmModel::new(weights, means, variances, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> GmmModel {
        GmmModel::new(
            vec![0.5, 0.5],
            vec![0.0, 0.0, 4.0, 4.0],
            vec![0.5, 4.0, 0.5, 1.0],
            2,
        )
        .unwrap()
    }

    #[test]
    fn model_validation() {
        assert!(GmmModel::new(vec![0.45, 0.45], vec![0.0; 2], vec![1.0; 2], 1)
            .unwrap_err()
            .to_string()
            .contains("invariant violation"));
        assert!(GmmModel::new(vec![1.0, 0.0], vec![0.0; 2], vec![1.0; 2], 1).is_err());
        assert!(GmmModel::new(vec![1.0], vec![0.0], vec![0.0], 1).is_err());
        assert!(GmmModel::new(vec![1.0], vec![0.0, 1.0], vec![1.0], 1).is_err());
    }

    #[test]
    fn single_component_posteriors_are_one() {
        let m = GmmModel::new(vec![1.0], vec![1.0, 2.0], vec![0.3, 7.0], 2).unwrap();
        let x = DescriptorSet::from_rows(&[[100.0, -50.0], [1.0, 2.0]], 2).unwrap();
        let q = gmm_posteriors(&m, &x).unwrap();
        assert!(q.rows().all(|r| r == [1.0]));
    }

    #[test]
    fn identical_components_split_evenly() {
        let m = GmmModel::new(vec![0.5, 0.5], vec![1.0, 1.0], vec![2.0, 2.0], 1).unwrap();
        let x = DescriptorSet::from_rows(&[[0.0], [30.0]], 1).unwrap();
        let q = gmm_posteriors(&m, &x).unwrap();
        assert!(q.rows().all(|r| r == [0.5, 0.5]));
    }

    #[test]
    fn far_points_stay_normalized() {
        let x = DescriptorSet::from_rows(&[[1e4, -1e4], [-300.0, 900.0]], 2).unwrap();
        let q = gmm_posteriors(&toy(), &x).unwrap();
        for r in q.rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn analytic_log_likelihood() {
        let m = GmmModel::new(vec![1.0], vec![3.0], vec![1.0 / (2.0 * PI)], 1).unwrap();
        let x = DescriptorSet::from_rows(&[[3.0]], 1).unwrap();
        assert!(gmm_log_likelihood(&m, &x).unwrap().abs() < 1e-14);
        assert!(gmm_log_likelihood(&m, &DescriptorSet::empty(1).unwrap()).is_err());
    }

    #[test]
    fn duplicate_point_shifts_average_arithmetically() {
        let m = toy();
        let rows = [[0.3, -1.0], [3.0, 5.0], [1.0, 1.0]];
        let x = DescriptorSet::from_rows(&rows, 2).unwrap();
        let base = gmm_log_likelihood(&m, &x).unwrap();
        let single = gmm_log_likelihood(&m, &DescriptorSet::from_rows(&rows[1..2], 2).unwrap()).unwrap();
        let mut more = rows.to_vec();
        more.push(rows[1]);
        let dup = gmm_log_likelihood(&m, &DescriptorSet::from_rows(&more, 2).unwrap()).unwrap();
        assert!((dup - (3.0 * base + single) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_component_fit_is_closed_form() {
        let rows = [[1.0, 10.0], [2.0, 10.5], [4.0, 9.0], [5.0, 11.0]];
        let x = DescriptorSet::from_rows(&rows, 2).unwrap();
        let m = gmm_fit(&x, &GmmOptions::new(1, 0)).unwrap();
        assert_eq!(m.weights(), &[1.0]);
        let mean = x.mean();
        let var = x.variance();
        for j in 0..2 {
            assert!((m.mean(0)[j] - mean[j]).abs() < 1e-12);
            assert!((m.variance(0)[j] - var[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_iterations_return_the_kmeans_initialization() {
        let rows: Vec<[f64; 1]> = [0.0, 0.2, 0.4, 5.0, 5.5, 6.0].iter().map(|&v| [v]).collect();
        let x = DescriptorSet::from_rows(&rows, 1).unwrap();
        let mut opts = GmmOptions::new(2, 4);
        opts.max_iter = 0;
        let fit = gmm_fit_detailed(&x, &opts).unwrap();
        assert_eq!(fit.iterations, 0);
        let floor: Vec<f64> = x.variance().iter().map(|v| v * 1e-4).collect();
        assert_eq!(fit.model, kmeans_init(&x, &opts, &floor).unwrap());
        let mut means = fit.model.means().to_vec();
        means.sort_by(f64::total_cmp);
        assert!((means[0] - 0.2).abs() < 1e-12 && (means[1] - 5.5).abs() < 1e-12);
        assert_eq!(fit.model.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn collapse_and_size_errors() {
        let x = DescriptorSet::from_rows(&[[2.0, 2.0]; 10], 2).unwrap();
        assert!(matches!(gmm_fit(&x, &GmmOptions::new(2, 0)), Err(Error::Numeric(_))));
        assert!(matches!(gmm_fit(&x, &GmmOptions::new(11, 0)), Err(Error::InvalidArgument(_))));
    }
}
