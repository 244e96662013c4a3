//! Labeled corpora: the manifest format and an in-memory dataset view.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::descriptors::{load_descriptors, DescriptorSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusItem {
    /// Path as written in the manifest.
    pub reference: String,
    /// `reference` resolved against the manifest's directory.
    pub path: PathBuf,
    /// Index into [`LabeledCorpus::classes`].
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabeledCorpus {
    pub items: Vec<CorpusItem>,
    /// Label vocabulary in order of first appearance.
    pub classes: Vec<String>,
}

impl LabeledCorpus {
    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn split_items(&self, split: Split) -> impl Iterator<Item = &CorpusItem> {
        self.items.iter().filter(move |it| it.split == split)
    }

    /// Loads every referenced descriptor file.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut items = Vec::with_capacity(self.items.len());
        for it in &self.items {
            items.push(DatasetItem {
                set: load_descriptors(&it.path)?,
                label: it.label,
                split: it.split,
            });
        }
        Dataset::new(items, self.classes.clone())
    }

    pub fn write_manifest<W: Write>(&self, mut w: W) -> Result<()> {
        for it in &self.items {
            writeln!(w, "{},{},{}", it.reference, self.classes[it.label], it.split)?;
        }
        Ok(())
    }
}

/// Parses manifest text. References are resolved against `base` but not checked for existence.
pub fn parse_manifest(text: &str, base: &Path) -> Result<LabeledCorpus> {
    let mut corpus = LabeledCorpus::default();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [reference, label, split] = fields.as_slice() else {
            return Err(Error::Format(format!(
                "manifest line {}: expected <path>,<label>,<split>",
                lineno + 1
            )));
        };
        if reference.is_empty() || label.is_empty() {
            return Err(Error::Format(format!("manifest line {}: empty field", lineno + 1)));
        }
        let split: Split = split
            .parse()
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", lineno + 1)))?;
        if !seen.insert(reference.to_string()) {
            return Err(Error::Format(format!(
                "manifest line {}: duplicate item {reference:?}",
                lineno + 1
            )));
        }
        let label = match corpus.class_index(label) {
            Some(i) => i,
            None => {
                corpus.classes.push(label.to_string());
                corpus.classes.len() - 1
            }
        };
        corpus.items.push(CorpusItem {
            reference: reference.to_string(),
            path: base.join(reference),
            label,
            split,
        });
    }
    Ok(corpus)
}

/// Reads a manifest and checks that every referenced file exists.
pub fn load_labeled_corpus(manifest: &Path) -> Result<LabeledCorpus> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::file(manifest, e))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new(""));
    let corpus = parse_manifest(&text, base)?;
    for it in &corpus.items {
        if !it.path.is_file() {
            return Err(Error::file(
                &it.path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "referenced descriptor file is missing"),
            ));
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub set: DescriptorSet,
    pub label: usize,
    pub split: Split,
}

/// A labeled corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn new(items: Vec<DatasetItem>, classes: Vec<String>) -> Result<Self> {
        let dim = items.first().map(|it| it.set.dim());
        for it in &items {
            if it.label >= classes.len() {
                return Err(Error::InvariantViolation(format!(
                    "label index {} outside a {}-class vocabulary",
                    it.label,
                    classes.len()
                )));
            }
            if Some(it.set.dim()) != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim.unwrap_or(0),
                    found: it.set.dim(),
                });
            }
        }
        Ok(Self { items, classes })
    }

    pub fn dim(&self) -> Option<usize> {
        self.items.first().map(|it| it.set.dim())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |it| it.split == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_four_line_manifest() {
        let text = "a.fvds,run,train\nb.fvds,jump,train\n# comment\nc.fvds,run,test\nd.fvds,jump,test\n";
        let c = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(c.items.len(), 4);
        assert_eq!(c.classes, vec!["run", "jump"]);
        assert_eq!(c.items[2].label, 0);
        assert_eq!(c.items[3].path, Path::new("/data/d.fvds"));
        assert_eq!(c.split_items(Split::Test).count(), 2);
    }

    #[test]
    fn rejects_bad_lines() {
        let base = Path::new(".");
        assert!(parse_manifest("a,x,train\na,y,test\n", base)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
        assert!(parse_manifest("a,x,validation\n", base)
            .unwrap_err()
            .to_string()
            .contains("unknown split"));
        assert!(parse_manifest("a,x\n", base).is_err());
    }

    #[test]
    fn missing_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.txt");
        fs::write(&manifest, "nope.fvds,a,train\n").unwrap();
        assert!(matches!(load_labeled_corpus(&manifest), Err(Error::File { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let text = "x/1.fvds,b,train\nx/2.fvds,a,test\n";
        let c = parse_manifest(text, Path::new("")).unwrap();
        let mut out = Vec::new();
        c.write_manifest(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }
}
