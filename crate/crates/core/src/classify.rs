//! One-vs-all linear SVMs trained by stochastic subgradient descent, and evaluation metrics.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model_io::{read_len, read_string, write_string, ModelKind, PersistedModel};
use crate::wire;

pub const DEFAULT_C: f64 = 100.0;
pub const DEFAULT_EPOCHS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    classes: Vec<String>,
    weights: Vec<f64>,
    biases: Vec<f64>,
    dim: usize,
    c: f64,
}

impl LinearModel {
    pub fn new(classes: Vec<String>, weights: Vec<f64>, biases: Vec<f64>, dim: usize, c: f64) -> Result<Self> {
        if classes.is_empty() || biases.len() != classes.len() || weights.len() != classes.len() * dim {
            return Err(Error::InvariantViolation(
                "linear model needs one weight vector and bias per class".into(),
            ));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) || !c.is_finite() {
            return Err(Error::InvariantViolation("non-finite linear model parameter".into()));
        }
        Ok(Self {
            classes,
            weights,
            biases,
            dim,
            c,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn weights(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn bias(&self, class: usize) -> f64 {
        self.biases[class]
    }

    pub fn scores(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        Ok((0..self.classes.len())
            .map(|k| dot(self.weights(k), v) + self.biases[k])
            .collect())
    }
}

impl PersistedModel for LinearModel {
    const KIND: ModelKind = ModelKind::Linear;

    fn write_body<W: Write>(&self, w: &mut W) -> Result<()> {
        wire::write_len(w, self.classes.len())?;
        wire::write_u64(w, self.dim as u64)?;
        wire::write_f64(w, self.c)?;
        for (k, label) in self.classes.iter().enumerate() {
            write_string(w, label)?;
            wire::write_f64(w, self.biases[k])?;
            wire::write_f64s(w, self.weights(k))?;
        }
        Ok(())
    }

    fn read_body<R: Read>(r: &mut R) -> Result<Self> {
        let n = read_len(r, "class count", 1 << 20)?;
        let dim = wire::read_u64(r)?;
        let dim = usize::try_from(dim)
            .ok()
            .filter(|&d| d <= 1 << 32)
            .ok_or_else(|| Error::Format("linear model dimension is implausibly large".into()))?;
        let c = wire::read_f64(r)?;
        let mut classes = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n * dim);
        for _ in 0..n {
            classes.push(read_string(r)?);
            biases.push(wire::read_f64(r)?);
            weights.extend(wire::read_f64s(r, dim)?);
        }
        LinearModel::new(classes, weights, biases, dim, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmOptions {
    /// Regularization constant; the per-example penalty is `lambda = 1 / (c n)`.
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl SvmOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            c: DEFAULT_C,
            epochs: DEFAULT_EPOCHS,
            seed,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seed for one class's binary problem, derived from the label so that it does
/// not depend on where the class sits in the vocabulary.
fn class_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

/// Regularized hinge objective `lambda/2 |w|^2 + mean(max(0, 1 - y (w.x + b)))`,
/// with the bias treated as an extra weight on a constant feature.
pub fn hinge_objective<V: AsRef<[f64]>>(w: &[f64], b: f64, xs: &[V], ys: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * (dot(w, w) + b * b);
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (1.0 - y * (dot(w, x.as_ref()) + b)).max(0.0))
        .sum();
    reg + loss / xs.len() as f64
}

/// Trained binary classifier plus the objective after each epoch (index 0 is the
/// all-zero starting point).
#[derive(Debug, Clone)]
pub struct BinaryFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub objective_history: Vec<f64>,
}

/// Pegasos-style projected stochastic subgradient descent on the L2-regularized hinge loss.
pub fn train_binary<V: AsRef<[f64]> + Sync>(xs: &[V], ys: &[f64], c: f64, epochs: usize, seed: u64) -> BinaryFit {
    let n = xs.len();
    let dim = xs.first().map_or(0, |x| x.as_ref().len());
    let lambda = 1.0 / (c * n as f64);
    let radius = 1.0 / lambda.sqrt();
    // w = scale * v, so the shrink step is O(1).
    let mut v = vec![0.0; dim];
    let mut vb = 0.0;
    let mut scale = 1.0;
    let mut sq_norm = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = vec![hinge_objective(&v, vb, xs, ys, lambda)];
    let mut t = 0u64;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = xs[i].as_ref();
            let y = ys[i];
            let margin = y * scale * (dot(&v, x) + vb);
            let shrink = 1.0 - eta * lambda;
            if shrink <= 0.0 {
                v.iter_mut().for_each(|z| *z = 0.0);
                vb = 0.0;
                scale = 1.0;
                sq_norm = 0.0;
            } else {
                scale *= shrink;
                sq_norm *= shrink * shrink;
            }
            if margin < 1.0 {
                let step = eta * y / scale;
                let mut cross = vb * step;
                for (vj, xj) in v.iter_mut().zip(x) {
                    cross += *vj * step * xj;
                    *vj += step * xj;
                }
                vb += step;
                let x_sq = dot(x, x) + 1.0;
                sq_norm += scale * scale * (2.0 * cross + step * step * x_sq);
            }
            let norm = sq_norm.max(0.0).sqrt();
            if norm > radius {
                scale *= radius / norm;
                sq_norm = radius * radius;
            }
            if scale < 1e-100 {
                v.iter_mut().for_each(|z| *z *= scale);
                vb *= scale;
                scale = 1.0;
            }
        }
        let w: Vec<f64> = v.iter().map(|z| z * scale).collect();
        history.push(hinge_objective(&w, vb * scale, xs, ys, lambda));
    }
    BinaryFit {
        weights: v.iter().map(|z| z * scale).collect(),
        bias: vb * scale,
        objective_history: history,
    }
}

/// One binary hinge-loss classifier per class, each against all other classes.
pub fn svm_train_ova<V: AsRef<[f64]> + Sync>(
    vectors: &[V],
    labels: &[usize],
    classes: &[String],
    opts: &SvmOptions,
) -> Result<LinearModel> {
    if classes.len() < 2 {
        return Err(Error::invalid("one-vs-all training needs at least 2 classes"));
    }
    if vectors.len() != labels.len() {
        return Err(Error::invalid("vector and label counts differ"));
    }
    if !(opts.c > 0.0) {
        return Err(Error::invalid("regularization constant must be positive"));
    }
    let dim = vectors
        .first()
        .map(|v| v.as_ref().len())
        .ok_or_else(|| Error::EmptyInput("no training vectors".into()))?;
    for v in vectors {
        if v.as_ref().len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.as_ref().len(),
            });
        }
    }
    let mut per_class = vec![0usize; classes.len()];
    for &l in labels {
        *per_class
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("label index {l} outside the vocabulary")))? += 1;
    }
    if let Some(k) = per_class.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {:?} has no training examples", classes[k])));
    }

    let fits: Vec<BinaryFit> = classes
        .par_iter()
        .enumerate()
        .map(|(k, label)| {
            let ys: Vec<f64> = labels.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
            train_binary(vectors, &ys, opts.c, opts.epochs, class_seed(opts.seed, label))
        })
        .collect();
    let mut weights = Vec::with_capacity(classes.len() * dim);
    let mut biases = Vec::with_capacity(classes.len());
    for f in fits {
        weights.extend(f.weights);
        biases.push(f.bias);
    }
    LinearModel::new(classes.to_vec(), weights, biases, dim, opts.c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub scores: Vec<f64>,
}

/// Argmax over class scores; ties go to the lowest class index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

pub fn svm_predict(model: &LinearModel, v: &[f64]) -> Result<Prediction> {
    let scores = model.scores(v)?;
    Ok(Prediction {
        label: argmax(&scores),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub classes: Vec<String>,
    pub accuracy: f64,
    /// `None` for classes without test items.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_class_accuracy: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub n_test: usize,
}

impl Metrics {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "test items: {}", self.n_test);
        let _ = writeln!(s, "accuracy: {:.6}", self.accuracy);
        let _ = writeln!(s, "mean per-class accuracy: {:.6}", self.mean_class_accuracy);
        let _ = writeln!(s, "mAP: {:.6}", self.map);
        for (k, name) in self.classes.iter().enumerate() {
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "class {name}: accuracy {} ap {}",
                fmt(self.per_class_accuracy[k]),
                fmt(self.per_class_ap[k])
            );
        }
        s
    }

    /// Long-format CSV: `metric,class,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,class,value\n");
        let _ = writeln!(s, "accuracy,,{}", self.accuracy);
        let _ = writeln!(s, "mean_class_accuracy,,{}", self.mean_class_accuracy);
        let _ = writeln!(s, "map,,{}", self.map);
        for (k, name) in self.classes.iter().enumerate() {
            let fmt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(s, "class_accuracy,{name},{}", fmt(self.per_class_accuracy[k]));
            let _ = writeln!(s, "class_ap,{name},{}", fmt(self.per_class_ap[k]));
        }
        s
    }
}

/// Average precision of one ranking: mean precision at each positive's rank.
/// `scores` are ranked descending; equal scores keep input order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Metrics from per-item class scores (`scores[i][k]`) and true labels.
pub fn evaluate_scores(scores: &[Vec<f64>], labels: &[usize], classes: &[String]) -> Result<Metrics> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("empty test split".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::invalid("score and label counts differ"));
    }
    let nc = classes.len();
    let mut correct = vec![0usize; nc];
    let mut total = vec![0usize; nc];
    let mut hits = 0usize;
    for (s, &l) in scores.iter().zip(labels) {
        if s.len() != nc || l >= nc {
            return Err(Error::DimensionMismatch {
                expected: nc,
                found: s.len(),
            });
        }
        total[l] += 1;
        if argmax(s) == l {
            correct[l] += 1;
            hits += 1;
        }
    }
    let per_class_accuracy: Vec<Option<f64>> = (0..nc)
        .map(|k| (total[k] > 0).then(|| correct[k] as f64 / total[k] as f64))
        .collect();
    let per_class_ap: Vec<Option<f64>> = (0..nc)
        .map(|k| {
            let col: Vec<f64> = scores.iter().map(|s| s[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            average_precision(&col, &pos)
        })
        .collect();
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(Metrics {
        classes: classes.to_vec(),
        accuracy: hits as f64 / scores.len() as f64,
        mean_class_accuracy: mean(&per_class_accuracy),
        map: mean(&per_class_ap),
        per_class_accuracy,
        per_class_ap,
        n_test: scores.len(),
    })
}

/// Scores every test vector with `model` and computes metrics.
pub fn evaluate<V: AsRef<[f64]>>(model: &LinearModel, vectors: &[V], labels: &[usize]) -> Result<Metrics> {
    let scores = vectors
        .iter()
        .map(|v| model.scores(v.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    evaluate_scores(&scores, labels, model.classes())
}
