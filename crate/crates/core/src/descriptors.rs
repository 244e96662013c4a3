//! Descriptor sets and their file formats.
//!
//! The canonical on-disk layout is little-endian binary:
//!
//! ```text
//! "FVDS" | u32 version | u32 d | u64 N | N*d values, row-major
//! ```
//!
//! Version 1 stores `f32` values. Sets holding values that are not exactly
//! representable as `f32` (for instance after PCA projection) are written as
//! version 2 with `f64` values so that a save/load round trip is always
//! bit-exact. A plain CSV form (one row per line, `#` comments, optional
//! `# dim=<d>` directive for empty sets) is accepted for small fixtures.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::wire;

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"FVDS";
pub const DESCRIPTOR_VERSION_F32: u32 = 1;
pub const DESCRIPTOR_VERSION_F64: u32 = 2;

/// An `N x d` matrix of local feature vectors, stored row-major in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    data: Vec<f64>,
    n: usize,
    dim: usize,
}

impl DescriptorSet {
    /// Builds a set from row-major data, validating shape and finiteness.
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("descriptor dimension must be at least 1"));
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: data.len() % dim,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let n = data.len() / dim;
        Ok(Self { data, n, dim })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(Vec::new(), dim)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(data, dim)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            n: indices.len(),
            dim: self.dim,
        }
    }

    /// Concatenates sets of equal dimension.
    pub fn concat(sets: &[DescriptorSet]) -> Result<Self> {
        let dim = sets
            .first()
            .map(|s| s.dim)
            .ok_or_else(|| Error::EmptyInput("no descriptor sets to concatenate".into()))?;
        let mut data = Vec::new();
        for s in sets {
            if s.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: s.dim,
                });
            }
            data.extend_from_slice(&s.data);
        }
        let n = data.len() / dim;
        Ok(Self { data, n, dim })
    }

    /// Component-wise sample mean. Requires a non-empty set.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for row in self.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Population variance per dimension (divides by N).
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut var = vec![0.0; self.dim];
        for row in self.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let n = self.n.max(1) as f64;
        var.iter_mut().for_each(|s| *s /= n);
        var
    }

    fn f32_exact(&self) -> bool {
        self.data.iter().all(|&v| (v as f32) as f64 == v)
    }
}

/// Streaming reader over a binary descriptor file. Yields one row at a time.
pub struct DescriptorReader<R> {
    inner: R,
    dim: usize,
    remaining: u64,
    wide: bool,
    row: usize,
}

impl DescriptorReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        Self::new(BufReader::new(file))
    }
}

impl<R: Read> DescriptorReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let magic: [u8; 4] = wire::read_array(&mut inner)?;
        if &magic != DESCRIPTOR_MAGIC {
            return Err(Error::Format("bad descriptor magic".into()));
        }
        let version = wire::read_u32(&mut inner)?;
        let wide = match version {
            DESCRIPTOR_VERSION_F32 => false,
            DESCRIPTOR_VERSION_F64 => true,
            found => {
                return Err(Error::VersionMismatch {
                    expected: DESCRIPTOR_VERSION_F32,
                    found,
                })
            }
        };
        let dim = wire::read_u32(&mut inner)? as usize;
        if dim == 0 {
            return Err(Error::Format("descriptor header has d = 0".into()));
        }
        let remaining = wire::read_u64(&mut inner)?;
        Ok(Self {
            inner,
            dim,
            remaining,
            wide,
            row: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row count declared by the header.
    pub fn declared_len(&self) -> u64 {
        self.remaining + self.row as u64
    }

    /// Reads the next row into `out`; returns `false` once the header's N rows are consumed.
    pub fn next_row(&mut self, out: &mut Vec<f64>) -> Result<bool> {
        if self.remaining == 0 {
            return Ok(false);
        }
        out.clear();
        for col in 0..self.dim {
            let v = if self.wide {
                wire::read_f64(&mut self.inner)
            } else {
                wire::read_array::<_, 4>(&mut self.inner).map(|b| f32::from_le_bytes(b) as f64)
            }
            .map_err(|e| match e {
                Error::Format(_) => Error::Format(format!(
                    "payload shorter than header: row {} of {}",
                    self.row,
                    self.declared_len()
                )),
                e => e,
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row: self.row, col });
            }
            out.push(v);
        }
        self.remaining -= 1;
        self.row += 1;
        Ok(true)
    }

    fn finish(mut self) -> Result<()> {
        wire::expect_eof(&mut self.inner)
            .map_err(|_| Error::Format("payload longer than header declares".into()))
    }
}

pub fn read_descriptors<R: Read>(reader: R) -> Result<DescriptorSet> {
    let mut rd = DescriptorReader::new(reader)?;
    let dim = rd.dim;
    let mut data = Vec::with_capacity((rd.remaining as usize).min(1 << 24) * dim);
    let mut row = Vec::with_capacity(dim);
    while rd.next_row(&mut row)? {
        data.extend_from_slice(&row);
    }
    rd.finish()?;
    DescriptorSet::new(data, dim)
}

pub fn write_descriptors<W: Write>(set: &DescriptorSet, mut w: W) -> Result<()> {
    let wide = !set.f32_exact();
    w.write_all(DESCRIPTOR_MAGIC)?;
    wire::write_u32(
        &mut w,
        if wide {
            DESCRIPTOR_VERSION_F64
        } else {
            DESCRIPTOR_VERSION_F32
        },
    )?;
    wire::write_len(&mut w, set.dim)?;
    wire::write_u64(&mut w, set.n as u64)?;
    if wide {
        wire::write_f64s(&mut w, &set.data)?;
    } else {
        let mut buf = Vec::with_capacity(set.data.len() * 4);
        for &v in &set.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses the CSV fallback format.
pub fn parse_descriptor_csv(text: &str) -> Result<DescriptorSet> {
    let mut dim: Option<usize> = None;
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(d) = comment.trim().strip_prefix("dim=") {
                let d: usize = d
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("line {}: bad dim directive", lineno + 1)))?;
                if dim.is_some_and(|x| x != d) {
                    return Err(Error::DimensionMismatch {
                        expected: dim.unwrap(),
                        found: d,
                    });
                }
                dim = Some(d);
            }
            continue;
        }
        let before = data.len();
        for (col, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("line {}: cannot parse {:?}", lineno + 1, field.trim()))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row: rows, col });
            }
            data.push(v);
        }
        let width = data.len() - before;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: width,
                })
            }
            _ => {}
        }
        rows += 1;
    }
    let dim = dim.ok_or_else(|| Error::Format("empty CSV without a dim directive".into()))?;
    DescriptorSet::new(data, dim)
}

/// Loads a descriptor file, detecting binary (by magic) or CSV.
pub fn load_descriptors(path: &Path) -> Result<DescriptorSet> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    if bytes.starts_with(DESCRIPTOR_MAGIC) {
        read_descriptors(bytes.as_slice())
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Format("descriptor file is neither binary nor UTF-8 CSV".into()))?;
        parse_descriptor_csv(text)
    }
}

pub fn save_descriptors(set: &DescriptorSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    write_descriptors(set, BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(version: u32, d: u32, n: u64) -> Vec<u8> {
        let mut b = DESCRIPTOR_MAGIC.to_vec();
        b.extend_from_slice(&version.to_le_bytes());
        b.extend_from_slice(&d.to_le_bytes());
        b.extend_from_slice(&n.to_le_bytes());
        b
    }

    #[test]
    fn reads_small_binary_file() {
        let mut b = header(1, 2, 3);
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.5] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let set = read_descriptors(b.as_slice()).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.dim(), 2);
        assert_eq!(set.row(2), &[5.0, 6.5]);
    }

    #[test]
    fn empty_payload_keeps_dimension() {
        let set = read_descriptors(header(1, 7, 0).as_slice()).unwrap();
        assert_eq!(set.len(), 0);
        assert_eq!(set.dim(), 7);
    }

    #[test]
    fn rejects_nan_payload() {
        let mut b = header(1, 2, 1);
        b.extend_from_slice(&1.0f32.to_le_bytes());
        b.extend_from_slice(&f32::NAN.to_le_bytes());
        let err = read_descriptors(b.as_slice()).unwrap_err();
        assert!(err.to_string().contains("non-finite value"), "{err}");
    }

    #[test]
    fn rejects_short_and_long_payloads() {
        let mut b = header(1, 2, 2);
        b.extend_from_slice(&[0u8; 12]);
        assert!(matches!(read_descriptors(b.as_slice()), Err(Error::Format(_))));
        let mut b = header(1, 1, 1);
        b.extend_from_slice(&[0u8; 8]);
        assert!(matches!(read_descriptors(b.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_bad_header() {
        assert!(read_descriptors(&b"FVDX"[..]).is_err());
        assert!(matches!(
            read_descriptors(header(9, 2, 0).as_slice()),
            Err(Error::VersionMismatch { .. })
        ));
        assert!(read_descriptors(header(1, 0, 0).as_slice()).is_err());
        assert!(read_descriptors(&b"FVDS\x01\x00"[..]).is_err());
    }

    #[test]
    fn wide_values_round_trip_exactly() {
        let set = DescriptorSet::new(vec![0.1, 1.0 / 3.0, -2.5, 1e-300], 2).unwrap();
        let mut buf = Vec::new();
        write_descriptors(&set, &mut buf).unwrap();
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(read_descriptors(buf.as_slice()).unwrap(), set);

        let narrow = DescriptorSet::new(vec![0.5, -2.5], 2).unwrap();
        let mut buf = Vec::new();
        write_descriptors(&narrow, &mut buf).unwrap();
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(buf.len(), 20 + 8);
    }

    #[test]
    fn csv_parsing() {
        let set = parse_descriptor_csv("# fixture\n1,2\n3, 4\n\n5,6\n").unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.row(1), &[3.0, 4.0]);
        let empty = parse_descriptor_csv("# dim=4\n").unwrap();
        assert_eq!((empty.len(), empty.dim()), (0, 4));
        assert!(matches!(
            parse_descriptor_csv("1,2\n3\n"),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(parse_descriptor_csv("1,NaN\n").unwrap_err().to_string().contains("non-finite"));
        assert!(parse_descriptor_csv("1,x\n").is_err());
    }

    #[test]
    fn constructor_validates() {
        assert!(DescriptorSet::new(vec![1.0, 2.0, 3.0], 2).is_err());
        assert!(DescriptorSet::new(vec![1.0, f64::INFINITY], 2).is_err());
        assert!(DescriptorSet::new(vec![], 0).is_err());
        let s = DescriptorSet::from_rows(&[[1.0, 2.0], [3.0, 6.0]], 2).unwrap();
        assert_eq!(s.mean(), vec![2.0, 4.0]);
        assert_eq!(s.variance(), vec![1.0, 4.0]);
    }
}
