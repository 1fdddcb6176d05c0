use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

/// Labelled image list; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parse `path<TAB>label` lines. Blank lines are skipped. With
    /// `num_classes` given, labels must lie below it.
    pub fn parse(text: &str, root: impl Into<PathBuf>, num_classes: Option<usize>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Format(format!("manifest line {lineno}: {msg}"));
            let (path, label) = line.split_once('\t').ok_or_else(|| bad("expected `path<TAB>label`".into()))?;
            let label: usize = label.trim().parse().map_err(|_| bad(format!("label `{label}` is not an index")))?;
            if let Some(k) = num_classes {
                if label >= k {
                    return Err(bad(format!("label {label} out of range for {k} classes")));
                }
            }
            if path.is_empty() {
                return Err(bad("empty path".into()));
            }
            if !seen.insert(path.to_string()) {
                return Err(bad(format!("duplicate path `{path}`")));
            }
            entries.push(ManifestEntry { path: PathBuf::from(path), label });
        }
        Ok(Manifest { root: root.into(), entries })
    }

    pub fn load(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, num_classes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{}\t{}\n", e.path.display(), e.label)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }
}
