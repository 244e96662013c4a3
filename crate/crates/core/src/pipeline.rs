//! End-to-end wiring: sample, fit PCA/codebook/GMM, encode, classify.

use rayon::prelude::*;

use crate::classify::{evaluate, svm_train_ova, LinearModel, Metrics, SvmOptions, DEFAULT_C, DEFAULT_EPOCHS};
use crate::clustering::{kmeans_fit, Codebook, KMeansOptions, DEFAULT_CODEBOOK_SIZE};
use crate::corpus::{Dataset, Split};
use crate::descriptors::DescriptorSet;
use crate::encoding::{fv_encode, hfv_encode, EncodedVector, HfvOptions, DEFAULT_POWER};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::gmm::{gmm_fit, GmmModel, GmmOptions, VarianceFloor, DEFAULT_MIXTURE_SIZE, DEFAULT_VAR_FLOOR_RATIO};
use crate::pca::{half_dim, pca_fit, pca_project, PcaModel};
use crate::sampling::sample_sets;

pub const DEFAULT_SAMPLE_COUNT: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fv,
    Hfv,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Fv => "fv",
            Mode::Hfv => "hfv",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fv" => Ok(Mode::Fv),
            "hfv" => Ok(Mode::Hfv),
            other => Err(Error::invalid(format!("unknown encoding mode {other:?}"))),
        }
    }
}

/// Independent seeds for each stage, derived from one pipeline seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub sample: u64,
    pub codebook: u64,
    pub gmm: u64,
    pub svm: u64,
}

impl StageSeeds {
    pub fn from_seed(seed: u64) -> Self {
        let mix = |salt: u64| {
            let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        };
        Self {
            sample: mix(1),
            codebook: mix(2),
            gmm: mix(3),
            svm: mix(4),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Descriptors sampled from the training split to fit PCA, codebook and GMM.
    pub sample_count: usize,
    pub use_pca: bool,
    /// PCA output dimension; `None` halves the input dimension.
    pub pca_dim: Option<usize>,
    pub k1: usize,
    pub k2: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    pub var_floor_ratio: f64,
    pub power: f64,
    pub hfv: HfvOptions,
    pub svm_c: f64,
    pub svm_epochs: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sample_count: DEFAULT_SAMPLE_COUNT,
            use_pca: true,
            pca_dim: None,
            k1: DEFAULT_CODEBOOK_SIZE,
            k2: DEFAULT_MIXTURE_SIZE,
            kmeans_max_iter: crate::clustering::DEFAULT_MAX_ITER,
            kmeans_tol: crate::clustering::DEFAULT_TOL,
            gmm_max_iter: crate::gmm::DEFAULT_MAX_ITER,
            gmm_tol: crate::gmm::DEFAULT_TOL,
            var_floor_ratio: DEFAULT_VAR_FLOOR_RATIO,
            power: DEFAULT_POWER,
            hfv: HfvOptions::default(),
            svm_c: DEFAULT_C,
            svm_epochs: DEFAULT_EPOCHS,
            seed: 0,
        }
    }
}

/// Keys understood by [`PipelineConfig::apply_key_values`].
pub const PIPELINE_KEYS: &[&str] = &[
    "sample_count",
    "use_pca",
    "pca_dim",
    "k1",
    "k2",
    "kmeans_max_iter",
    "kmeans_tol",
    "gmm_max_iter",
    "gmm_tol",
    "var_floor_ratio",
    "power",
    "normalize_local",
    "local_power",
    "count_normalization",
    "svm_c",
    "svm_epochs",
    "seed",
];

impl PipelineConfig {
    /// Overwrites every field named in `kv`, then validates the result.
    pub fn apply_key_values(&mut self, kv: &KeyValues) -> Result<()> {
        kv.check_known(PIPELINE_KEYS)?;
        kv.apply("sample_count", &mut self.sample_count)?;
        kv.apply("use_pca", &mut self.use_pca)?;
        if let Some(m) = kv.parsed::<usize>("pca_dim")? {
            self.pca_dim = Some(m);
        }
        kv.apply("k1", &mut self.k1)?;
        kv.apply("k2", &mut self.k2)?;
        kv.apply("kmeans_max_iter", &mut self.kmeans_max_iter)?;
        kv.apply("kmeans_tol", &mut self.kmeans_tol)?;
        kv.apply("gmm_max_iter", &mut self.gmm_max_iter)?;
        kv.apply("gmm_tol", &mut self.gmm_tol)?;
        kv.apply("var_floor_ratio", &mut self.var_floor_ratio)?;
        kv.apply("power", &mut self.power)?;
        kv.apply("normalize_local", &mut self.hfv.normalize_local)?;
        if let Some(p) = kv.parsed::<f64>("local_power")? {
            self.hfv.local_power = Some(p);
        }
        kv.apply("count_normalization", &mut self.hfv.count_normalization)?;
        kv.apply("svm_c", &mut self.svm_c)?;
        kv.apply("svm_epochs", &mut self.svm_epochs)?;
        kv.apply("seed", &mut self.seed)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 || self.k1 == 0 || self.k2 == 0 {
            return Err(Error::invalid("sample_count, k1 and k2 must be positive"));
        }
        if self.pca_dim == Some(0) {
            return Err(Error::invalid("pca_dim must be positive"));
        }
        if !(self.svm_c > 0.0) || self.svm_epochs == 0 {
            return Err(Error::invalid("svm_c and svm_epochs must be positive"));
        }
        if !(self.var_floor_ratio >= 0.0) {
            return Err(Error::invalid("var_floor_ratio must be non-negative"));
        }
        self.hfv_options().validate()
    }

    /// Sizes suited to the standard synthetic corpus: 20000 sampled
    /// descriptors, K1 = 32, K2 = 16.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            sample_count: 20_000,
            k1: 32,
            k2: 16,
            seed,
            ..Self::default()
        }
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::from_seed(self.seed)
    }

    pub fn kmeans_options(&self, k1: usize) -> KMeansOptions {
        KMeansOptions {
            k1,
            seed: self.seeds().codebook,
            max_iter: self.kmeans_max_iter,
            tol: self.kmeans_tol,
        }
    }

    pub fn gmm_options(&self) -> GmmOptions {
        GmmOptions {
            k2: self.k2,
            seed: self.seeds().gmm,
            max_iter: self.gmm_max_iter,
            tol: self.gmm_tol,
            var_floor: VarianceFloor::Relative(self.var_floor_ratio),
        }
    }

    pub fn svm_options(&self) -> SvmOptions {
        SvmOptions {
            c: self.svm_c,
            epochs: self.svm_epochs,
            seed: self.seeds().svm,
        }
    }

    /// HFV options with the final exponent taken from `power`.
    pub fn hfv_options(&self) -> HfvOptions {
        HfvOptions {
            power: self.power,
            ..self.hfv
        }
    }
}

/// Models shared by the FV and HFV paths. Codebook and GMM live in the
/// post-PCA feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub pca: Option<PcaModel>,
    pub gmm: GmmModel,
    pub codebook: Option<Codebook>,
}

impl Models {
    pub fn project(&self, x: &DescriptorSet) -> Result<DescriptorSet> {
        match &self.pca {
            Some(p) => pca_project(p, x),
            None => Ok(x.clone()),
        }
    }

    pub fn encode(&self, x: &DescriptorSet, mode: Mode, power: f64, hfv: &HfvOptions) -> Result<EncodedVector> {
        let projected = self.project(x)?;
        match mode {
            Mode::Fv => fv_encode(&self.gmm, &projected, power),
            Mode::Hfv => {
                let codebook = self
                    .codebook
                    .as_ref()
                    .ok_or_else(|| Error::invalid("HFV encoding needs a codebook"))?;
                hfv_encode(&self.gmm, codebook, &projected, &HfvOptions { power, ..*hfv })
            }
        }
    }
}

/// Fits PCA on `sample`, then the codebook (when `with_codebook`) and GMM on the projected sample.
pub fn train_models(sample: &DescriptorSet, cfg: &PipelineConfig, with_codebook: bool) -> Result<Models> {
    let pca = if cfg.use_pca {
        Some(pca_fit(sample, cfg.pca_dim.unwrap_or_else(|| half_dim(sample.dim())))?)
    } else {
        None
    };
    let projected = match &pca {
        Some(p) => pca_project(p, sample)?,
        None => sample.clone(),
    };
    let codebook = if with_codebook {
        Some(kmeans_fit(&projected, &cfg.kmeans_options(cfg.k1))?)
    } else {
        None
    };
    let gmm = gmm_fit(&projected, &cfg.gmm_options())?;
    Ok(Models { pca, gmm, codebook })
}

/// Seeded training sample drawn from the training split.
pub fn training_sample(data: &Dataset, cfg: &PipelineConfig) -> Result<DescriptorSet> {
    sample_sets(data.split(Split::Train).map(|it| &it.set), cfg.sample_count, cfg.seeds().sample)
}

/// Encodes every item in dataset order. Items are processed in parallel; the
/// output does not depend on the schedule.
pub fn encode_dataset(
    models: &Models,
    data: &Dataset,
    mode: Mode,
    power: f64,
    hfv: &HfvOptions,
) -> Result<Vec<EncodedVector>> {
    data.items
        .par_iter()
        .map(|it| models.encode(&it.set, mode, power, hfv))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub model: LinearModel,
    pub metrics: Metrics,
}

/// Trains one-vs-all SVMs on the training items and evaluates on the test items.
pub fn classify_encoded(data: &Dataset, encoded: &[EncodedVector], svm: &SvmOptions) -> Result<Evaluation> {
    if encoded.len() != data.items.len() {
        return Err(Error::invalid("one encoding per dataset item is required"));
    }
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (it, v) in data.items.iter().zip(encoded) {
        match it.split {
            Split::Train => {
                train_x.push(v.values());
                train_y.push(it.label);
            }
            Split::Test => {
                test_x.push(v.values());
                test_y.push(it.label);
            }
        }
    }
    if test_x.is_empty() {
        return Err(Error::EmptyInput("empty test split".into()));
    }
    let model = svm_train_ova(&train_x, &train_y, &data.classes, svm)?;
    let metrics = evaluate(&model, &test_x, &test_y)?;
    Ok(Evaluation { model, metrics })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub models: Models,
    pub encoded: Vec<EncodedVector>,
    pub evaluation: Evaluation,
}

/// Full pipeline for one encoding mode.
pub fn run_pipeline(data: &Dataset, cfg: &PipelineConfig, mode: Mode) -> Result<RunResult> {
    let sample = training_sample(data, cfg)?;
    let models = train_models(&sample, cfg, mode == Mode::Hfv)?;
    let encoded = encode_dataset(&models, data, mode, cfg.power, &cfg.hfv_options())?;
    let evaluation = classify_encoded(data, &encoded, &cfg.svm_options())?;
    Ok(RunResult {
        models,
        encoded,
        evaluation,
    })
}
