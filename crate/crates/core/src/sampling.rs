//! Seeded uniform reservoir sampling of descriptors across several sets.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::descriptors::{load_descriptors, DescriptorReader, DescriptorSet, DESCRIPTOR_MAGIC};
use crate::error::{Error, Result};

/// Algorithm R over a stream of rows. The kept rows are returned in stream order.
pub struct Reservoir {
    capacity: usize,
    dim: Option<usize>,
    kept: Vec<(u64, Vec<f64>)>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl Reservoir {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("sample size must be positive"));
        }
        Ok(Self {
            capacity,
            dim: None,
            kept: Vec::with_capacity(capacity.min(1 << 20)),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn offer(&mut self, row: &[f64]) -> Result<()> {
        match self.dim {
            None => self.dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: row.len(),
                })
            }
            _ => {}
        }
        let index = self.seen;
        self.seen += 1;
        if self.kept.len() < self.capacity {
            self.kept.push((index, row.to_vec()));
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.capacity {
                let slot = &mut self.kept[j as usize];
                slot.0 = index;
                slot.1.clear();
                slot.1.extend_from_slice(row);
            }
        }
        Ok(())
    }

    pub fn offer_set(&mut self, set: &DescriptorSet) -> Result<()> {
        if self.dim.is_some_and(|d| d != set.dim()) {
            return Err(Error::DimensionMismatch {
                expected: self.dim.unwrap(),
                found: set.dim(),
            });
        }
        self.dim = Some(set.dim());
        set.rows().try_for_each(|r| self.offer(r))
    }

    pub fn finish(mut self) -> Result<DescriptorSet> {
        let dim = self
            .dim
            .ok_or_else(|| Error::EmptyInput("no descriptors to sample from".into()))?;
        self.kept.sort_by_key(|(i, _)| *i);
        let mut data = Vec::with_capacity(self.kept.len() * dim);
        for (_, row) in self.kept {
            data.extend(row);
        }
        DescriptorSet::new(data, dim)
    }
}

/// Samples `count` descriptors uniformly from in-memory sets.
pub fn sample_sets<'a>(sets: impl IntoIterator<Item = &'a DescriptorSet>, count: usize, seed: u64) -> Result<DescriptorSet> {
    let mut r = Reservoir::new(count, seed)?;
    for s in sets {
        r.offer_set(s)?;
    }
    r.finish()
}

/// Samples `count` descriptors uniformly across descriptor files, streaming binary files row by row.
pub fn sample_files(paths: &[impl AsRef<Path>], count: usize, seed: u64) -> Result<DescriptorSet> {
    if paths.is_empty() {
        return Err(Error::invalid("no input files to sample from"));
    }
    let mut r = Reservoir::new(count, seed)?;
    for p in paths {
        let p = p.as_ref();
        let mut head = [0u8; 4];
        let is_binary = std::fs::File::open(p)
            .and_then(|mut f| std::io::Read::read(&mut f, &mut head))
            .map_err(|e| Error::file(p, e))?
            == 4
            && &head == DESCRIPTOR_MAGIC;
        if is_binary {
            let mut rd = DescriptorReader::open(p)?;
            if r.dim.is_some_and(|d| d != rd.dim()) {
                return Err(Error::DimensionMismatch {
                    expected: r.dim.unwrap(),
                    found: rd.dim(),
                });
            }
            r.dim = Some(rd.dim());
            let mut row = Vec::new();
            while rd.next_row(&mut row)? {
                r.offer(&row)?;
            }
        } else {
            r.offer_set(&load_descriptors(p)?)?;
        }
    }
    r.finish()
}
