//! Improved Fisher Vector and Hyper-Fisher Vector encodings.
//!
//! Layout of every encoded vector: all mean-deviation blocks (Gaussian `k`
//! ascending, `d` values each) followed by all variance-deviation blocks in the
//! same order, `2 * K2 * d` values in total.
//!
//! For a descriptor set `X` of size `N` and a diagonal GMM with weights `pi_k`,
//! means `mu_k` and variances `var_k` (standard deviation `sd_k`):
//!
//! ```text
//! v_mu[k]  = 1 / (N sqrt(pi_k))   * sum_i q_i(k) (x_i - mu_k) / sd_k
//! v_var[k] = 1 / (N sqrt(2 pi_k)) * sum_i q_i(k) ((x_i - mu_k)^2 / var_k - 1)
//! ```
//!
//! The Hyper-Fisher Vector hard-assigns descriptors to a k-means codebook,
//! encodes every non-empty cluster as a local Fisher Vector, sums them and
//! normalizes the sum.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::clustering::{kmeans_assign, Codebook};
use crate::descriptors::DescriptorSet;
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::wire;

pub const ENCODED_MAGIC: &[u8; 4] = b"FVEN";
pub const ENCODED_VERSION: u32 = 1;
pub const DEFAULT_POWER: f64 = 0.5;

const FLAG_POWER: u8 = 1;
const FLAG_L2: u8 = 1 << 1;
const FLAG_HFV: u8 = 1 << 2;
const FLAG_NORMALIZE_LOCAL: u8 = 1 << 3;
const FLAG_GLOBAL_COUNT: u8 = 1 << 4;

/// Which normalizations have been applied to an encoded vector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Normalization {
    /// Effective exponent of all power normalizations applied so far.
    pub power: Option<f64>,
    pub l2: bool,
}

/// How each local Fisher Vector's `1/N` factor is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountNormalization {
    /// Divide by the cluster's own descriptor count.
    #[default]
    PerCluster,
    /// Divide by the total descriptor count of the set.
    Global,
}

impl std::str::FromStr for CountNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-cluster" => Ok(Self::PerCluster),
            "global" => Ok(Self::Global),
            other => Err(Error::invalid(format!("unknown count normalization {other:?}"))),
        }
    }
}

impl fmt::Display for CountNormalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerCluster => "per-cluster",
            Self::Global => "global",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Fv,
    Hfv {
        normalize_local: bool,
        count: CountNormalization,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector {
    values: Vec<f64>,
    k2: usize,
    dim: usize,
    pub normalization: Normalization,
    pub scheme: Scheme,
}

impl EncodedVector {
    pub fn new(values: Vec<f64>, k2: usize, dim: usize) -> Result<Self> {
        if values.len() != 2 * k2 * dim {
            return Err(Error::DimensionMismatch {
                expected: 2 * k2 * dim,
                found: values.len(),
            });
        }
        Ok(Self {
            values,
            k2,
            dim,
            normalization: Normalization::default(),
            scheme: Scheme::Fv,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn k2(&self) -> usize {
        self.k2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean-deviation half.
    pub fn mean_part(&self) -> &[f64] {
        &self.values[..self.k2 * self.dim]
    }

    /// Variance-deviation half.
    pub fn variance_part(&self) -> &[f64] {
        &self.values[self.k2 * self.dim..]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn add_assign(&mut self, other: &EncodedVector) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    fn flags(&self) -> u8 {
        let mut f = 0;
        if self.normalization.power.is_some() {
            f |= FLAG_POWER;
        }
        if self.normalization.l2 {
            f |= FLAG_L2;
        }
        if let Scheme::Hfv {
            normalize_local,
            count,
        } = self.scheme
        {
            f |= FLAG_HFV;
            if normalize_local {
                f |= FLAG_NORMALIZE_LOCAL;
            }
            if count == CountNormalization::Global {
                f |= FLAG_GLOBAL_COUNT;
            }
        }
        f
    }
}

fn check_power(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("power exponent must lie in (0, 1], got {p}")))
    }
}

fn check_inputs(model: &GmmModel, x: &DescriptorSet) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyInput("cannot encode an empty descriptor set".into()));
    }
    if x.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: x.dim(),
        });
    }
    Ok(())
}

/// Posteriors and per-Gaussian constants reused across local encodings of one set.
struct Statistics<'a> {
    model: &'a GmmModel,
    x: &'a DescriptorSet,
    q: Vec<f64>,
    inv_sd: Vec<f64>,
    inv_var: Vec<f64>,
}

impl<'a> Statistics<'a> {
    fn new(model: &'a GmmModel, x: &'a DescriptorSet) -> Self {
        let (q, _) = model.posterior_rows(x);
        Self {
            model,
            x,
            q,
            inv_sd: model.variances().iter().map(|v| 1.0 / v.sqrt()).collect(),
            inv_var: model.variances().iter().map(|v| 1.0 / v).collect(),
        }
    }

    /// Unnormalized Fisher Vector over the descriptors in `indices`, scaled by `1 / count`.
    fn encode(&self, indices: impl Iterator<Item = usize>, count: usize) -> EncodedVector {
        let k2 = self.model.k2();
        let d = self.model.dim();
        let half = k2 * d;
        let mut values = vec![0.0; 2 * half];
        for i in indices {
            let row = self.x.row(i);
            let qrow = &self.q[i * k2..(i + 1) * k2];
            for k in 0..k2 {
                let w = qrow[k];
                if w == 0.0 {
                    continue;
                }
                let mu = self.model.mean(k);
                for j in 0..d {
                    let diff = row[j] - mu[j];
                    values[k * d + j] += w * diff * self.inv_sd[k * d + j];
                    values[half + k * d + j] += w * (diff * diff * self.inv_var[k * d + j] - 1.0);
                }
            }
        }
        let n = count as f64;
        for k in 0..k2 {
            let pi = self.model.weights()[k];
            let mean_scale = 1.0 / (n * pi.sqrt());
            let var_scale = 1.0 / (n * (2.0 * pi).sqrt());
            for j in 0..d {
                values[k * d + j] *= mean_scale;
                values[half + k * d + j] *= var_scale;
            }
        }
        EncodedVector {
            values,
            k2,
            dim: d,
            normalization: Normalization::default(),
            scheme: Scheme::Fv,
        }
    }
}

/// Unnormalized improved Fisher Vector of `x`.
pub fn fv_encode_raw(model: &GmmModel, x: &DescriptorSet) -> Result<EncodedVector> {
    check_inputs(model, x)?;
    let stats = Statistics::new(model, x);
    Ok(stats.encode(0..x.len(), x.len()))
}

/// Signed power normalization `z -> sign(z) |z|^p`.
pub fn power_normalize(v: &EncodedVector, p: f64) -> Result<EncodedVector> {
    check_power(p)?;
    let mut out = v.clone();
    if p != 1.0 {
        for z in &mut out.values {
            *z = z.signum() * z.abs().powf(p);
        }
    }
    // signum(0.0) is 1.0, but |0|^p = 0 keeps zeros at zero.
    out.normalization.power = Some(v.normalization.power.unwrap_or(1.0) * p);
    Ok(out)
}

/// Scales to unit Euclidean norm; the zero vector maps to itself.
pub fn l2_normalize(v: &EncodedVector) -> EncodedVector {
    let mut out = v.clone();
    let norm = v.norm();
    if norm > 0.0 {
        out.values.iter_mut().for_each(|z| *z /= norm);
    }
    out.normalization.l2 = true;
    out
}

fn power_l2(v: &EncodedVector, p: f64) -> Result<EncodedVector> {
    Ok(l2_normalize(&power_normalize(v, p)?))
}

/// Power- then l2-normalized Fisher Vector.
pub fn fv_encode(model: &GmmModel, x: &DescriptorSet, p: f64) -> Result<EncodedVector> {
    check_power(p)?;
    power_l2(&fv_encode_raw(model, x)?, p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HfvOptions {
    /// Power+l2 normalize each local Fisher Vector before summation.
    pub normalize_local: bool,
    /// Exponent of the final power normalization.
    pub power: f64,
    /// Exponent for the local normalization; `None` shares `power`.
    pub local_power: Option<f64>,
    pub count_normalization: CountNormalization,
}

impl Default for HfvOptions {
    fn default() -> Self {
        Self {
            normalize_local: true,
            power: DEFAULT_POWER,
            local_power: None,
            count_normalization: CountNormalization::PerCluster,
        }
    }
}

impl HfvOptions {
    pub fn with_power(power: f64) -> Self {
        Self {
            power,
            ..Self::default()
        }
    }

    /// Options under which a single-cluster codebook reproduces [`fv_encode`].
    pub fn degenerate(power: f64) -> Self {
        Self {
            normalize_local: false,
            power,
            local_power: None,
            count_normalization: CountNormalization::PerCluster,
        }
    }

    pub fn local_power(&self) -> f64 {
        self.local_power.unwrap_or(self.power)
    }

    pub fn validate(&self) -> Result<()> {
        check_power(self.power)?;
        check_power(self.local_power())
    }
}

/// Local Fisher Vectors of every non-empty cluster, ascending cluster index,
/// after the optional local normalization.
pub fn local_fisher_vectors(
    model: &GmmModel,
    codebook: &Codebook,
    x: &DescriptorSet,
    opts: &HfvOptions,
) -> Result<Vec<(usize, EncodedVector)>> {
    opts.validate()?;
    check_inputs(model, x)?;
    if codebook.dim() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: x.dim(),
        });
    }
    let memberships = kmeans_assign(codebook, x)?;
    let stats = Statistics::new(model, x);
    let mut locals = Vec::new();
    for (cluster, members) in memberships.groups() {
        let count = match opts.count_normalization {
            CountNormalization::PerCluster => members.len(),
            CountNormalization::Global => x.len(),
        };
        let mut lfv = stats.encode(members.into_iter(), count);
        if opts.normalize_local {
            lfv = power_l2(&lfv, opts.local_power())?;
        }
        locals.push((cluster, lfv));
    }
    Ok(locals)
}

/// Sum of local Fisher Vectors before the final normalization.
pub fn hfv_encode_raw(
    model: &GmmModel,
    codebook: &Codebook,
    x: &DescriptorSet,
    opts: &HfvOptions,
) -> Result<EncodedVector> {
    let locals = local_fisher_vectors(model, codebook, x, opts)?;
    let mut sum = EncodedVector::new(vec![0.0; 2 * model.k2() * model.dim()], model.k2(), model.dim())?;
    for (_, lfv) in &locals {
        sum.add_assign(lfv);
    }
    sum.scheme = Scheme::Hfv {
        normalize_local: opts.normalize_local,
        count: opts.count_normalization,
    };
    Ok(sum)
}

/// Hyper-Fisher Vector: normalized sum of per-cluster local Fisher Vectors.
pub fn hfv_encode(
    model: &GmmModel,
    codebook: &Codebook,
    x: &DescriptorSet,
    opts: &HfvOptions,
) -> Result<EncodedVector> {
    power_l2(&hfv_encode_raw(model, codebook, x, opts)?, opts.power)
}

pub fn write_encoded<W: Write>(v: &EncodedVector, mut w: W) -> Result<()> {
    w.write_all(ENCODED_MAGIC)?;
    wire::write_u32(&mut w, ENCODED_VERSION)?;
    wire::write_len(&mut w, v.k2)?;
    wire::write_len(&mut w, v.dim)?;
    wire::write_f64(&mut w, v.normalization.power.unwrap_or(1.0))?;
    wire::write_u8(&mut w, v.flags())?;
    wire::write_f64s(&mut w, &v.values)?;
    w.flush()?;
    Ok(())
}

pub fn read_encoded<R: Read>(mut r: R) -> Result<EncodedVector> {
    let magic: [u8; 4] = wire::read_array(&mut r)?;
    if &magic != ENCODED_MAGIC {
        return Err(Error::Format("bad encoded-vector magic".into()));
    }
    let version = wire::read_u32(&mut r)?;
    if version != ENCODED_VERSION {
        return Err(Error::VersionMismatch {
            expected: ENCODED_VERSION,
            found: version,
        });
    }
    let k2 = wire::read_u32(&mut r)? as usize;
    let dim = wire::read_u32(&mut r)? as usize;
    let p = wire::read_f64(&mut r)?;
    let flags = wire::read_u8(&mut r)?;
    let len = 2usize
        .checked_mul(k2)
        .and_then(|v| v.checked_mul(dim))
        .filter(|&v| v <= 1 << 32)
        .ok_or_else(|| Error::Format("encoded vector size is implausibly large".into()))?;
    let values = wire::read_f64s(&mut r, len)?;
    wire::expect_eof(&mut r)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvariantViolation("non-finite encoded value".into()));
    }
    let mut v = EncodedVector::new(values, k2, dim)?;
    if flags & FLAG_POWER != 0 {
        check_power(p).map_err(|_| Error::Format(format!("bad power exponent {p}")))?;
        v.normalization.power = Some(p);
    }
    v.normalization.l2 = flags & FLAG_L2 != 0;
    if flags & FLAG_HFV != 0 {
        v.scheme = Scheme::Hfv {
            normalize_local: flags & FLAG_NORMALIZE_LOCAL != 0,
            count: if flags & FLAG_GLOBAL_COUNT != 0 {
                CountNormalization::Global
            } else {
                CountNormalization::PerCluster
            },
        };
    }
    Ok(v)
}

pub fn save_encoded(v: &EncodedVector, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    write_encoded(v, BufWriter::new(file))
}

pub fn load_encoded(path: &Path) -> Result<EncodedVector> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_encoded(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(values: &[f64]) -> EncodedVector {
        EncodedVector::new(values.to_vec(), 1, values.len() / 2).unwrap()
    }

    #[test]
    fn points_at_the_mean() {
        let model = GmmModel::new(vec![1.0], vec![1.5, -2.0, 0.0], vec![0.7, 2.0, 9.0], 3).unwrap();
        let x = DescriptorSet::from_rows(&[[1.5, -2.0, 0.0]; 5], 3).unwrap();
        let v = fv_encode_raw(&model, &x).unwrap();
        assert!(v.mean_part().iter().all(|&z| z == 0.0));
        let expected = -std::f64::consts::FRAC_1_SQRT_2;
        assert!(v.variance_part().iter().all(|z| (z - expected).abs() < 1e-15));
    }

    #[test]
    fn length_is_two_k_d() {
        let k2 = 256;
        let model = GmmModel::new(
            vec![1.0 / k2 as f64; k2],
            (0..2 * k2).map(|i| i as f64).collect(),
            vec![1.0; 2 * k2],
            2,
        )
        .unwrap();
        let x = DescriptorSet::from_rows(&[[0.5, 3.0]], 2).unwrap();
        assert_eq!(fv_encode_raw(&model, &x).unwrap().len(), 1024);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let model = GmmModel::new(vec![1.0], vec![0.0, 0.0], vec![1.0, 1.0], 2).unwrap();
        let err = fv_encode_raw(&model, &DescriptorSet::empty(2).unwrap()).unwrap_err();
        assert_eq!(err.to_string(), "cannot encode an empty descriptor set");
        assert!(fv_encode_raw(&model, &DescriptorSet::from_rows(&[[1.0]], 1).unwrap()).is_err());
    }

    #[test]
    fn power_normalization() {
        let v = power_normalize(&vector(&[4.0, -9.0]), 0.5).unwrap();
        assert_eq!(v.values(), &[2.0, -3.0]);
        let z = power_normalize(&vector(&[0.0, -0.0]), 0.2).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        let same = power_normalize(&vector(&[0.3, -7.0]), 1.0).unwrap();
        assert_eq!(same.values(), &[0.3, -7.0]);
        assert!(power_normalize(&vector(&[1.0, 1.0]), 0.0).is_err());
        assert!(power_normalize(&vector(&[1.0, 1.0]), 1.5).is_err());
    }

    #[test]
    fn l2_normalization() {
        let v = l2_normalize(&vector(&[3.0, 4.0]));
        assert_eq!(v.values(), &[0.6, 0.8]);
        let z = l2_normalize(&vector(&[0.0, 0.0]));
        assert_eq!(z.values(), &[0.0, 0.0]);
    }

    #[test]
    fn record_round_trip_carries_header() {
        let mut v = vector(&[0.25, -1.0, 3.5, 0.0]);
        v = power_normalize(&v, 0.3).unwrap();
        v = l2_normalize(&v);
        v.scheme = Scheme::Hfv {
            normalize_local: true,
            count: CountNormalization::Global,
        };
        let mut buf = Vec::new();
        write_encoded(&v, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FVEN");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[16..24].try_into().unwrap()), 0.3);
        assert_eq!(buf[24], FLAG_POWER | FLAG_L2 | FLAG_HFV | FLAG_NORMALIZE_LOCAL | FLAG_GLOBAL_COUNT);
        assert_eq!(read_encoded(buf.as_slice()).unwrap(), v);
        assert!(read_encoded(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn hfv_option_validation() {
        let model = GmmModel::new(vec![1.0], vec![0.0], vec![1.0], 1).unwrap();
        let cb = Codebook::from_rows(&[[0.0]]).unwrap();
        let x = DescriptorSet::from_rows(&[[1.0]], 1).unwrap();
        let mut opts = HfvOptions::default();
        opts.local_power = Some(0.0);
        assert!(hfv_encode(&model, &cb, &x, &opts).is_err());
        let cb2 = Codebook::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!(hfv_encode(&model, &cb2, &x, &HfvOptions::default()).is_err());
    }
}
