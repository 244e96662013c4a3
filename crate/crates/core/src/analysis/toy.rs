//! Two-Gaussian, three-cluster illustration of how FV and HFV distribute energy.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::energy::{energy_split, linear_similarity, EnergySplit};
use crate::clustering::Codebook;
use crate::descriptors::DescriptorSet;
use crate::encoding::{fv_encode, hfv_encode, local_fisher_vectors, EncodedVector, HfvOptions};
use crate::error::{Error, Result};
use crate::gmm::GmmModel;

/// Isotropic standard deviation of each toy feature cluster.
pub const TOY_CLUSTER_SPREAD: f64 = 0.3;
pub const TOY_CLUSTER_POINTS: usize = 200;

pub const TOY_GMM_MEANS: [[f64; 2]; 2] = [[0.0, 0.0], [4.0, 4.0]];
pub const TOY_GMM_VARIANCES: [[f64; 2]; 2] = [[0.5, 4.0], [0.5, 1.0]];
/// Blue (inside Gaussian 2), black (between both) and green (away from both).
pub const TOY_CLUSTER_CENTERS: [[f64; 2]; 3] = [[4.0, 4.5], [2.0, 2.5], [3.5, -0.5]];
pub const TOY_CLUSTER_NAMES: [&str; 3] = ["blue", "black", "green"];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub gmm_means: [[f64; 2]; 2],
    pub gmm_variances: [[f64; 2]; 2],
    pub gmm_weights: [f64; 2],
    pub cluster_centers: [[f64; 2]; 3],
    pub spread: f64,
    pub points_per_cluster: usize,
    pub seed: u64,
    pub hfv: HfvOptions,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            gmm_means: TOY_GMM_MEANS,
            gmm_variances: TOY_GMM_VARIANCES,
            gmm_weights: [0.5, 0.5],
            cluster_centers: TOY_CLUSTER_CENTERS,
            spread: TOY_CLUSTER_SPREAD,
            points_per_cluster: TOY_CLUSTER_POINTS,
            seed: 0,
            hfv: HfvOptions::default(),
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn gmm(&self) -> Result<GmmModel> {
        GmmModel::new(
            self.gmm_weights.to_vec(),
            self.gmm_means.concat(),
            self.gmm_variances.concat(),
            2,
        )
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::from_rows(&self.cluster_centers)
    }

    /// The three feature clusters, in `cluster_centers` order.
    pub fn clusters(&self) -> Result<Vec<DescriptorSet>> {
        if !(self.spread > 0.0) || self.points_per_cluster == 0 {
            return Err(Error::invalid("toy clusters need spread > 0 and at least one point"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.cluster_centers
            .iter()
            .map(|c| {
                let mut data = Vec::with_capacity(self.points_per_cluster * 2);
                for _ in 0..self.points_per_cluster {
                    for &cj in c {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        data.push(cj + self.spread * z);
                    }
                }
                DescriptorSet::new(data, 2)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    pub name: String,
    /// Squared components of the normalized vector.
    pub components: Vec<f64>,
    pub split: EnergySplit,
}

impl EnergyMap {
    fn of(name: &str, v: &EncodedVector) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            components: v.values().iter().map(|x| x * x).collect(),
            split: energy_split(v)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport {
    /// One map per feature cluster; local FVs are shown power+l2 normalized.
    pub lfv: Vec<EnergyMap>,
    pub hfv: EnergyMap,
    pub fv: EnergyMap,
    /// Linear-kernel similarity between the FV and the HFV.
    pub similarity: f64,
}

impl ToyReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for m in self.lfv.iter().chain([&self.hfv, &self.fv]) {
            let _ = writeln!(
                s,
                "{}: mean energy {:.6}, variance energy {:.6}",
                m.name, m.split.e_mean, m.split.e_cov
            );
        }
        let _ = writeln!(s, "fv-hfv similarity: {:.6}", self.similarity);
        s
    }

    /// One row per vector: `vector,c0..c{n-1},e_mean,e_cov`.
    pub fn to_csv(&self) -> String {
        let n = self.fv.components.len();
        let mut s = String::from("vector");
        for i in 0..n {
            let _ = write!(s, ",c{i}");
        }
        s.push_str(",e_mean,e_cov\n");
        for m in self.lfv.iter().chain([&self.hfv, &self.fv]) {
            s.push_str(&m.name);
            for c in &m.components {
                let _ = write!(s, ",{c}");
            }
            let _ = writeln!(s, ",{},{}", m.split.e_mean, m.split.e_cov);
        }
        s
    }
}

pub fn toy_example(config: &ToyConfig) -> Result<ToyReport> {
    config.hfv.validate()?;
    let gmm = config.gmm()?;
    let codebook = config.codebook()?;
    let clusters = config.clusters()?;
    let all = DescriptorSet::concat(&clusters)?;

    let fv = fv_encode(&gmm, &all, config.hfv.power)?;
    let hfv = hfv_encode(&gmm, &codebook, &all, &config.hfv)?;

    // Local FVs exactly as the encoder sums them, normalized for display.
    let display = HfvOptions {
        normalize_local: true,
        ..config.hfv
    };
    let lfv = local_fisher_vectors(&gmm, &codebook, &all, &display)?
        .iter()
        .map(|(k, v)| EnergyMap::of(TOY_CLUSTER_NAMES[*k], v))
        .collect::<Result<Vec<_>>>()?;

    Ok(ToyReport {
        lfv,
        similarity: linear_similarity(fv.values(), hfv.values())?,
        hfv: EnergyMap::of("hfv", &hfv)?,
        fv: EnergyMap::of("fv", &fv)?,
    })
}
