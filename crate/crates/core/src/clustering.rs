//! k-means codebooks and hard cluster assignment.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::descriptors::DescriptorSet;
use crate::error::{Error, Result};
use crate::model_io::{read_len, ModelKind, PersistedModel};
use crate::wire;

/// Points per rayon task in the assignment step.
const ASSIGN_CHUNK: usize = 1024;

pub const DEFAULT_CODEBOOK_SIZE: usize = 4000;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centers: Vec<f64>,
    k1: usize,
    dim: usize,
}

impl Codebook {
    pub fn new(centers: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || centers.is_empty() || centers.len() % dim != 0 {
            return Err(Error::InvariantViolation(format!(
                "codebook needs at least one center of dimension {dim}, got {} values",
                centers.len()
            )));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("codebook center is not finite".into()));
        }
        let k1 = centers.len() / dim;
        Ok(Self { centers, k1, dim })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut centers = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.as_ref().len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.as_ref().len(),
                });
            }
            centers.extend_from_slice(r.as_ref());
        }
        Self::new(centers, dim)
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Index of the nearest center and its squared distance. Ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.centers.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }
}

impl PersistedModel for Codebook {
    const KIND: ModelKind = ModelKind::Codebook;

    fn write_body<W: Write>(&self, w: &mut W) -> Result<()> {
        wire::write_len(w, self.k1)?;
        wire::write_len(w, self.dim)?;
        wire::write_f64s(w, &self.centers)?;
        Ok(())
    }

    fn read_body<R: Read>(r: &mut R) -> Result<Self> {
        let k1 = read_len(r, "codebook size", 1 << 24)?;
        let dim = read_len(r, "dimension", 1 << 20)?;
        let centers = wire::read_f64s(r, k1 * dim)?;
        Codebook::new(centers, dim)
    }
}

/// Cluster index per descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Memberships {
    assignments: Vec<usize>,
    k1: usize,
}

impl Memberships {
    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k1];
        for &a in &self.assignments {
            counts[a] += 1;
        }
        counts
    }

    /// Descriptor indices grouped by cluster, in ascending cluster order and ascending
    /// descriptor order within a cluster. Empty clusters are omitted.
    pub fn groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); self.k1];
        for (i, &a) in self.assignments.iter().enumerate() {
            buckets[a].push(i);
        }
        buckets
            .into_iter()
            .enumerate()
            .filter(|(_, members)| !members.is_empty())
            .collect()
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign_all(codebook: &Codebook, x: &DescriptorSet) -> Vec<(usize, f64)> {
    x.as_slice()
        .par_chunks(x.dim() * ASSIGN_CHUNK)
        .flat_map_iter(|chunk| chunk.chunks_exact(x.dim()).map(|row| codebook.nearest(row)))
        .collect()
}

pub fn kmeans_assign(codebook: &Codebook, x: &DescriptorSet) -> Result<Memberships> {
    if codebook.dim() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: x.dim(),
        });
    }
    Ok(Memberships {
        assignments: assign_all(codebook, x).into_iter().map(|(k, _)| k).collect(),
        k1: codebook.k1(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub k1: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tol: f64,
}

impl KMeansOptions {
    pub fn new(k1: usize, seed: u64) -> Self {
        Self {
            k1,
            seed,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Objective after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

pub fn kmeans_fit(x: &DescriptorSet, opts: &KMeansOptions) -> Result<Codebook> {
    kmeans_fit_detailed(x, opts).map(|fit| fit.codebook)
}

/// Lloyd's algorithm from k-means++ seeding.
pub fn kmeans_fit_detailed(x: &DescriptorSet, opts: &KMeansOptions) -> Result<KMeansFit> {
    let k1 = opts.k1;
    let n = x.len();
    let dim = x.dim();
    if k1 == 0 {
        return Err(Error::invalid("codebook size must be at least 1"));
    }
    if n < k1 {
        return Err(Error::invalid(format!(
            "k-means needs at least k1 = {k1} descriptors, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centers = kmeans_plus_plus(x, k1, &mut rng)?;

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut prev = f64::INFINITY;
    while iterations < opts.max_iter {
        let codebook = Codebook {
            centers,
            k1,
            dim,
        };
        let mut assigned = assign_all(&codebook, x);
        centers = codebook.centers;
        reseed_empty(&mut assigned, k1);
        let objective: f64 = assigned.iter().map(|(_, d)| d).sum();
        history.push(objective);

        let mut sums = vec![0.0; k1 * dim];
        let mut counts = vec![0usize; k1];
        for (row, &(k, _)) in x.rows().zip(&assigned) {
            counts[k] += 1;
            for (s, v) in sums[k * dim..(k + 1) * dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        for k in 0..k1 {
            let c = counts[k] as f64;
            for j in 0..dim {
                centers[k * dim + j] = sums[k * dim + j] / c;
            }
        }
        iterations += 1;

        if objective == 0.0 || (prev - objective) / objective < opts.tol {
            break;
        }
        prev = objective;
    }

    Ok(KMeansFit {
        codebook: Codebook::new(centers, dim)?,
        objective_history: history,
        iterations,
    })
}

/// Moves the farthest points (taken from clusters with more than one member)
/// into empty clusters, so every cluster keeps at least one point.
fn reseed_empty(assigned: &mut [(usize, f64)], k1: usize) {
    let mut counts = vec![0usize; k1];
    for &(k, _) in assigned.iter() {
        counts[k] += 1;
    }
    for empty in 0..k1 {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for (i, &(k, d)) in assigned.iter().enumerate() {
            if counts[k] > 1 && far.is_none_or(|f| d > assigned[f].1) {
                far = Some(i);
            }
        }
        // n >= k1 guarantees a donor exists.
        let i = far.expect("cluster with more than one member");
        counts[assigned[i].0] -= 1;
        counts[empty] += 1;
        assigned[i] = (empty, 0.0);
    }
}

fn kmeans_plus_plus(x: &DescriptorSet, k1: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = x.len();
    let dim = x.dim();
    let mut centers = Vec::with_capacity(k1 * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(x.row(first));
    let mut d2: Vec<f64> = x.rows().map(|r| sq_dist(r, x.row(first))).collect();

    for _ in 1..k1 {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Numeric(format!(
                "cannot seed {k1} distinct centers: too few distinct descriptors"
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let pick = pick.expect("positive total implies a candidate");
        let c = x.row(pick).to_vec();
        for (d, row) in d2.iter_mut().zip(x.rows()) {
            let nd = sq_dist(row, &c);
            if nd < *d {
                *d = nd;
            }
        }
        centers.extend_from_slice(&c);
    }
    Ok(centers)
}
