//! Synthetic labeled corpora standing in for video datasets.
//!
//! Every class is a distribution over feature-cluster prototypes: a private
//! set owned by the class plus a pool shared by all classes. A synthetic video
//! draws a number of clusters, places each cluster center near a prototype
//! sampled from its class, and scatters a heavy-tailed number of descriptors
//! around each center.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{parse_manifest, Dataset, DatasetItem, LabeledCorpus, Split};
use crate::descriptors::{save_descriptors, DescriptorSet};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const SYNTH_RECIPE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub videos_per_class: usize,
    /// Leading fraction of each class's videos assigned to the training split.
    pub train_fraction: f64,
    pub dim: usize,
    pub private_prototypes: usize,
    pub shared_prototypes: usize,
    /// Probability that a video's cluster comes from the shared pool.
    pub shared_weight: f64,
    /// Standard deviation of prototype positions around the origin.
    pub prototype_scale: f64,
    /// Standard deviation of a video's cluster center around its prototype.
    pub center_jitter: f64,
    /// Standard deviation of descriptors around their cluster center.
    pub spread: f64,
    pub clusters_min: usize,
    pub clusters_max: usize,
    pub points_min: usize,
    pub points_max: usize,
    /// Pareto shape of the per-cluster descriptor count; smaller is heavier-tailed.
    pub points_tail: f64,
    /// Size multiplier for clusters drawn from the shared pool; above 1 the
    /// shared, non-discriminative clusters dominate the descriptor count.
    pub shared_size_factor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The standard desk-scale corpus: 5 classes x 60 videos with overlapping prototypes.
    fn default() -> Self {
        Self {
            classes: 5,
            videos_per_class: 60,
            train_fraction: 0.5,
            dim: 16,
            private_prototypes: 10,
            shared_prototypes: 16,
            shared_weight: 0.3,
            prototype_scale: 3.0,
            center_jitter: 0.75,
            spread: 1.0,
            clusters_min: 8,
            clusters_max: 16,
            points_min: 20,
            points_max: 400,
            points_tail: 1.2,
            shared_size_factor: 4.0,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "version",
    "classes",
    "videos_per_class",
    "train_fraction",
    "dim",
    "private_prototypes",
    "shared_prototypes",
    "shared_weight",
    "prototype_scale",
    "center_jitter",
    "spread",
    "clusters_min",
    "clusters_max",
    "points_min",
    "points_max",
    "points_tail",
    "shared_size_factor",
    "seed",
];

impl SynthConfig {
    /// Reads a versioned `key=value` recipe; absent keys keep their defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(KEYS)?;
        if let Some(v) = kv.parsed::<u32>("version")? {
            if v != SYNTH_RECIPE_VERSION {
                return Err(Error::VersionMismatch {
                    expected: SYNTH_RECIPE_VERSION,
                    found: v,
                });
            }
        }
        let mut c = Self::default();
        kv.apply("classes", &mut c.classes)?;
        kv.apply("videos_per_class", &mut c.videos_per_class)?;
        kv.apply("train_fraction", &mut c.train_fraction)?;
        kv.apply("dim", &mut c.dim)?;
        kv.apply("private_prototypes", &mut c.private_prototypes)?;
        kv.apply("shared_prototypes", &mut c.shared_prototypes)?;
        kv.apply("shared_weight", &mut c.shared_weight)?;
        kv.apply("prototype_scale", &mut c.prototype_scale)?;
        kv.apply("center_jitter", &mut c.center_jitter)?;
        kv.apply("spread", &mut c.spread)?;
        kv.apply("clusters_min", &mut c.clusters_min)?;
        kv.apply("clusters_max", &mut c.clusters_max)?;
        kv.apply("points_min", &mut c.points_min)?;
        kv.apply("points_max", &mut c.points_max)?;
        kv.apply("points_tail", &mut c.points_tail)?;
        kv.apply("shared_size_factor", &mut c.shared_size_factor)?;
        kv.apply("seed", &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "version={SYNTH_RECIPE_VERSION}\nclasses={}\nvideos_per_class={}\ntrain_fraction={}\ndim={}\n\
             private_prototypes={}\nshared_prototypes={}\nshared_weight={}\nprototype_scale={}\n\
             center_jitter={}\nspread={}\nclusters_min={}\nclusters_max={}\npoints_min={}\n\
             points_max={}\npoints_tail={}\nshared_size_factor={}\nseed={}\n",
            self.classes,
            self.videos_per_class,
            self.train_fraction,
            self.dim,
            self.private_prototypes,
            self.shared_prototypes,
            self.shared_weight,
            self.prototype_scale,
            self.center_jitter,
            self.spread,
            self.clusters_min,
            self.clusters_max,
            self.points_min,
            self.points_max,
            self.points_tail,
            self.shared_size_factor,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("invalid synthetic recipe: {m}")));
        if self.classes < 2 {
            return bad("at least 2 classes are required");
        }
        if self.videos_per_class < 2 {
            return bad("at least 2 videos per class are required");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        let n_train = self.train_count();
        if n_train == 0 || n_train == self.videos_per_class {
            return bad("train_fraction leaves a split empty");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.private_prototypes == 0 {
            return bad("every class needs at least one private prototype");
        }
        if !(0.0..=1.0).contains(&self.shared_weight) || (self.shared_weight > 0.0 && self.shared_prototypes == 0) {
            return bad("shared_weight must lie in [0, 1] and needs shared prototypes when positive");
        }
        if !(self.prototype_scale > 0.0 && self.spread > 0.0 && self.center_jitter >= 0.0) {
            return bad("scales must be positive");
        }
        if self.clusters_min == 0 || self.clusters_max < self.clusters_min {
            return bad("cluster count range is empty");
        }
        if self.points_min == 0
            || self.points_max < self.points_min
            || !(self.points_tail > 0.0)
            || !(self.shared_size_factor > 0.0)
        {
            return bad("point count range is invalid");
        }
        Ok(())
    }

    fn train_count(&self) -> usize {
        (self.videos_per_class as f64 * self.train_fraction).round() as usize
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class{c:02}")).collect()
    }

    /// Per-class distribution over prototype indices. Indices below
    /// `classes * private_prototypes` are private; the rest are shared.
    pub fn class_recipes(&self) -> Vec<Vec<(usize, f64)>> {
        let shared_base = self.classes * self.private_prototypes;
        (0..self.classes)
            .map(|c| {
                let mut r: Vec<(usize, f64)> = (0..self.private_prototypes)
                    .map(|p| (c * self.private_prototypes + p, (1.0 - self.shared_weight) / self.private_prototypes as f64))
                    .collect();
                if self.shared_weight > 0.0 {
                    r.extend(
                        (0..self.shared_prototypes)
                            .map(|p| (shared_base + p, self.shared_weight / self.shared_prototypes as f64)),
                    );
                }
                r
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    /// All prototypes, row-major `(classes * private + shared) x dim`.
    pub prototypes: Vec<f64>,
    pub dataset: Dataset,
    /// Generating prototype of every cluster in every video, parallel to `dataset.items`.
    pub cluster_prototypes: Vec<Vec<usize>>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates the corpus in memory. Values are rounded to `f32` so the
/// in-memory corpus equals what is written to disk.
pub fn synth_corpus(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim;
    let n_proto = config.classes * config.private_prototypes + config.shared_prototypes;
    let prototypes: Vec<f64> = (0..n_proto * dim)
        .map(|_| (config.prototype_scale * gauss(&mut rng)) as f32 as f64)
        .collect();
    let shared_base = config.classes * config.private_prototypes;
    let n_train = config.train_count();

    let mut items = Vec::with_capacity(config.classes * config.videos_per_class);
    let mut cluster_prototypes = Vec::with_capacity(items.capacity());
    for class in 0..config.classes {
        for video in 0..config.videos_per_class {
            let n_clusters = rng.random_range(config.clusters_min..=config.clusters_max);
            let mut data = Vec::new();
            let mut protos = Vec::with_capacity(n_clusters);
            for _ in 0..n_clusters {
                let shared = config.shared_weight > 0.0 && rng.random::<f64>() < config.shared_weight;
                let proto = if shared {
                    shared_base + rng.random_range(0..config.shared_prototypes)
                } else {
                    class * config.private_prototypes + rng.random_range(0..config.private_prototypes)
                };
                protos.push(proto);
                let center: Vec<f64> = prototypes[proto * dim..(proto + 1) * dim]
                    .iter()
                    .map(|p| p + config.center_jitter * gauss(&mut rng))
                    .collect();
                // Pareto-distributed size, truncated to [points_min, points_max].
                let u: f64 = 1.0 - rng.random::<f64>();
                let factor = if shared { config.shared_size_factor } else { 1.0 };
                let size = (factor * config.points_min as f64 * u.powf(-1.0 / config.points_tail))
                    .clamp(1.0, factor * config.points_max as f64) as usize;
                for _ in 0..size {
                    for c in &center {
                        data.push((c + config.spread * gauss(&mut rng)) as f32 as f64);
                    }
                }
            }
            items.push(DatasetItem {
                set: DescriptorSet::new(data, dim)?,
                label: class,
                split: if video < n_train { Split::Train } else { Split::Test },
            });
            cluster_prototypes.push(protos);
        }
    }
    Ok(SyntheticCorpus {
        config: config.clone(),
        prototypes,
        dataset: Dataset::new(items, config.class_names())?,
        cluster_prototypes,
    })
}

/// Writes descriptor files, `manifest.txt` and `recipe.txt` under `dir`.
pub fn write_synthetic_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<LabeledCorpus> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut manifest = String::new();
    let mut counters = vec![0usize; corpus.dataset.classes.len()];
    for it in &corpus.dataset.items {
        let class = &corpus.dataset.classes[it.label];
        let class_dir = dir.join(class);
        fs::create_dir_all(&class_dir).map_err(|e| Error::file(&class_dir, e))?;
        let name = format!("{class}/{class}_{:04}.fvds", counters[it.label]);
        counters[it.label] += 1;
        save_descriptors(&it.set, &dir.join(&name))?;
        manifest.push_str(&format!("{name},{class},{}\n", it.split));
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, &manifest).map_err(|e| Error::file(&manifest_path, e))?;
    let recipe_path = dir.join("recipe.txt");
    fs::write(&recipe_path, corpus.config.to_key_values()).map_err(|e| Error::file(&recipe_path, e))?;
    parse_manifest(&manifest, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            classes: 3,
            videos_per_class: 6,
            dim: 4,
            private_prototypes: 3,
            shared_prototypes: 4,
            clusters_min: 2,
            clusters_max: 4,
            points_max: 60,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synth_corpus(&small()).unwrap();
        let b = synth_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn shape_and_splits() {
        let cfg = small();
        let c = synth_corpus(&cfg).unwrap();
        assert_eq!(c.dataset.items.len(), 18);
        assert_eq!(c.dataset.split(Split::Train).count(), 9);
        for it in &c.dataset.items {
            assert_eq!(it.set.dim(), 4);
            assert!(it.set.len() >= cfg.clusters_min * cfg.points_min);
        }
    }

    #[test]
    fn disjoint_recipes_never_use_shared_prototypes() {
        let cfg = SynthConfig {
            shared_weight: 0.0,
            ..small()
        };
        let c = synth_corpus(&cfg).unwrap();
        for (it, protos) in c.dataset.items.iter().zip(&c.cluster_prototypes) {
            for &p in protos {
                assert_eq!(p / cfg.private_prototypes, it.label);
            }
        }
        for r in cfg.class_recipes() {
            assert!((r.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recipe_round_trip_and_validation() {
        let cfg = small();
        let kv = KeyValues::parse(&cfg.to_key_values()).unwrap();
        assert_eq!(SynthConfig::from_key_values(&kv).unwrap(), cfg);
        assert!(SynthConfig::from_key_values(&KeyValues::parse("classes=1").unwrap()).is_err());
        assert!(SynthConfig::from_key_values(&KeyValues::parse("version=2").unwrap()).is_err());
        assert!(SynthConfig::from_key_values(&KeyValues::parse("colour=red").unwrap()).is_err());
        assert!(SynthConfig { spread: 0.0, ..small() }.validate().is_err());
        assert!(SynthConfig { clusters_max: 1, ..small() }.validate().is_err());
    }
}
