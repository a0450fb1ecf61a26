use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{split_dataset, MixError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SourceKind {
    Fish,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Test,
    /// Assigned by [`Manifest::resolve_splits`].
    Auto,
}

impl FromStr for SourceKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fish" => Ok(Self::Fish),
            "background" => Ok(Self::Background),
            other => Err(format!("unknown source kind {other:?}")),
        }
    }
}

impl FromStr for SplitTag {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "auto" => Ok(Self::Auto),
            other => Err(format!("unknown split tag {other:?}")),
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fish => "fish",
            Self::Background => "background",
        })
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
            Self::Auto => "auto",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub kind: SourceKind,
    pub path: PathBuf,
    pub split: SplitTag,
}

/// Tab-separated `kind path split` records; `#` starts a comment, blank lines are skipped.
/// Relative paths resolve against `base`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| MixError::Manifest {
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [kind, path, split] = fields[..] else {
                return Err(err(format!(
                    "expected 3 tab-separated fields, found {}",
                    fields.len()
                )));
            };
            if path.is_empty() {
                return Err(err("empty path".into()));
            }
            let path = Path::new(path);
            entries.push(ManifestEntry {
                kind: kind.parse().map_err(err)?,
                path: if path.is_absolute() {
                    path.to_path_buf()
                } else {
                    base.join(path)
                },
                split: split.parse().map_err(err)?,
            });
        }
        Ok(Self { entries })
    }

    /// Replaces `auto` tags with a seeded train/test split drawn separately for each source kind.
    pub fn resolve_splits(&self, ratio: f64, seed: u64) -> Result<Self> {
        let mut out = self.clone();
        for kind in [SourceKind::Fish, SourceKind::Background] {
            let auto: Vec<usize> = (0..out.entries.len())
                .filter(|&i| out.entries[i].kind == kind && out.entries[i].split == SplitTag::Auto)
                .collect();
            if auto.is_empty() {
                continue;
            }
            let split = split_dataset(auto.len(), ratio, seed ^ kind as u64)?;
            for &j in &split.train_ids {
                out.entries[auto[j]].split = SplitTag::Train;
            }
            for &j in &split.test_ids {
                out.entries[auto[j]].split = SplitTag::Test;
            }
        }
        Ok(out)
    }

    pub fn has_auto(&self) -> bool {
        self.entries.iter().any(|e| e.split == SplitTag::Auto)
    }

    pub fn paths(&self, kind: SourceKind, split: SplitTag) -> Vec<&Path> {
        self.entries
            .iter()
            .filter(|e| e.kind == kind && e.split == split)
            .map(|e| e.path.as_path())
            .collect()
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{}\t{}\t{}", e.kind, e.path.display(), e.split)?;
        }
        Ok(())
    }
}
