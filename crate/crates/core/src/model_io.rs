//! Versioned binary container for fitted models.
//!
//! ```text
//! "FVMD" | u32 version | u8 kind | kind-specific body
//! ```
//!
//! Kinds: 1 codebook, 2 GMM, 3 PCA, 4 linear classifier. Bodies use explicit
//! u32/u64 sizes and little-endian f64 parameters. Every load re-checks the
//! model's invariants.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::wire;

pub const MODEL_MAGIC: &[u8; 4] = b"FVMD";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ModelKind {
    Codebook = 1,
    Gmm = 2,
    Pca = 3,
    Linear = 4,
}

/// A model that can be stored in the `FVMD` container.
pub trait PersistedModel: Sized {
    const KIND: ModelKind;

    fn write_body<W: Write>(&self, w: &mut W) -> Result<()>;

    /// Parses the body. Implementations must validate invariants.
    fn read_body<R: Read>(r: &mut R) -> Result<Self>;
}

pub fn write_model<M: PersistedModel, W: Write>(model: &M, mut w: W) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    wire::write_u32(&mut w, MODEL_VERSION)?;
    wire::write_u8(&mut w, M::KIND as u8)?;
    model.write_body(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_model<M: PersistedModel, R: Read>(mut r: R) -> Result<M> {
    let magic: [u8; 4] = wire::read_array(&mut r)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("bad model magic".into()));
    }
    let version = wire::read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_VERSION,
            found: version,
        });
    }
    let kind = wire::read_u8(&mut r)?;
    if kind != M::KIND as u8 {
        return Err(Error::KindMismatch {
            expected: M::KIND as u8,
            found: kind,
        });
    }
    let model = M::read_body(&mut r)?;
    wire::expect_eof(&mut r)?;
    Ok(model)
}

pub fn save_model<M: PersistedModel>(model: &M, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    write_model(model, BufWriter::new(file))
}

pub fn load_model<M: PersistedModel>(path: &Path) -> Result<M> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_model(BufReader::new(file))
}

pub(crate) fn read_len<R: Read>(r: &mut R, what: &str, max: usize) -> Result<usize> {
    let n = wire::read_u32(r)? as usize;
    if n > max {
        return Err(Error::Format(format!("{what} = {n} is implausibly large")));
    }
    Ok(n)
}

pub(crate) fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let n = read_len(r, "string length", 1 << 16)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated string".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Format("label is not UTF-8".into()))
}

pub(crate) fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    wire::write_len(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}
