//! Dataset directories: `manifest.tsv` lists `relative/path<TAB>split`
//! lines; `normalization.tsv` records each shape's center and scale.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use axform_core::data::Normalization;
use axform_core::PointCloud;

use crate::cloud_io::read_cloud;
use crate::error::{read_file, AppError, AppResult, FormatError};
use crate::report::fmt17;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const NORMALIZATION_FILE: &str = "normalization.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub split: Split,
}

impl ManifestEntry {
    /// First path component for nested paths, `all` otherwise.
    pub fn category(&self) -> &str {
        category_of(&self.path)
    }
}

pub fn category_of(path: &str) -> &str {
    match path.split_once('/') {
        Some((first, _)) => first,
        None => "all",
    }
}

/// Companion partial-observation file of a shape: `a/b.pcf` -> `a/b.partial.pcf`.
pub fn partial_path(path: &str) -> String {
    match path.rsplit_once('.') {
        Some((stem, ext)) if !stem.is_empty() && !ext.contains('/') => format!("{stem}.partial.{ext}"),
        _ => format!("{path}.partial"),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len() as u64;
            let l = line.trim_end_matches(['\n', '\r']);
            if l.trim().is_empty() || l.starts_with('#') {
                continue;
            }
            let (path, split) = l.split_once('\t').ok_or_else(|| FormatError::new(start, "expected path<TAB>split"))?;
            let split = Split::parse(split.trim())
                .ok_or_else(|| FormatError::new(start + path.len() as u64 + 1, format!("unknown split {split:?}")))?;
            if path.is_empty() || path.starts_with('/') || path.split('/').any(|c| c == "..") {
                return Err(FormatError::new(start, format!("path {path:?} must be relative and inside the dataset")));
            }
            if !seen.insert(path.to_string()) {
                return Err(FormatError::new(start, format!("{path} listed twice")));
            }
            entries.push(ManifestEntry { path: path.to_string(), split });
        }
        Ok(Manifest { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{}\t{}\n", e.path, e.split)).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

pub fn normalization_tsv(records: &[(String, Normalization)]) -> String {
    let mut s = String::from("# path\tcenter_x\tcenter_y\tcenter_z\tscale\n");
    for (path, r) in records {
        s.push_str(&format!("{path}\t{}\t{}\t{}\t{}\n", fmt17(r.center[0]), fmt17(r.center[1]), fmt17(r.center[2]), fmt17(r.scale)));
    }
    s
}

pub fn parse_normalization(text: &str) -> Result<Vec<(String, Normalization)>, FormatError> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        let l = line.trim_end_matches(['\n', '\r']);
        if l.trim().is_empty() || l.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 5 {
            return Err(FormatError::new(start, "expected path and four numbers"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| FormatError::new(start, format!("not a number: {s:?}")));
        out.push((f[0].to_string(), Normalization { center: [num(f[1])?, num(f[2])?, num(f[3])?], scale: num(f[4])? }));
    }
    Ok(out)
}

/// One loaded shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub entry: ManifestEntry,
    pub cloud: PointCloud,
    pub partial: Option<PointCloud>,
}

/// A dataset directory with every manifest entry loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads `dir/manifest.tsv` and every listed cloud, plus partial
    /// companions where present.
    pub fn load(dir: &Path) -> AppResult<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = String::from_utf8(read_file(&mpath)?).map_err(|e| {
            AppError::parse(&mpath, FormatError::new(e.utf8_error().valid_up_to() as u64, "invalid UTF-8"))
        })?;
        let manifest = Manifest::parse(&text).map_err(|e| AppError::parse(&mpath, e))?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for entry in manifest.entries {
            let path = dir.join(&entry.path);
            if !path.is_file() {
                return Err(AppError::invalid(&mpath, format!("listed file {} does not exist", entry.path)));
            }
            let cloud = read_cloud(&path)?;
            let ppath = dir.join(partial_path(&entry.path));
            let partial = if ppath.is_file() { Some(read_cloud(&ppath)?) } else { None };
            samples.push(Sample { entry, cloud, partial });
        }
        Ok(Dataset { root: dir.to_path_buf(), samples })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.entry.split == split).collect()
    }
}

/// Cloud files under `dir` (recursive), as sorted `/`-separated relative paths.
/// Partial companions are skipped.
pub fn list_clouds(dir: &Path) -> AppResult<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> AppResult<()> {
        for entry in fs::read_dir(dir).map_err(|e| AppError::io(dir, e))? {
            let entry = entry.map_err(|e| AppError::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if ["pcf", "xyz"].contains(&ext) && !name.contains(".partial.") {
                let rel = path.strip_prefix(root).unwrap();
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_errors() {
        let text = "plane/train/0000.pcf\ttrain\nplane/test/0000.pcf\ttest\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].category(), "plane");
        assert_eq!(m.to_text(), text);
        assert_eq!(Manifest::parse("a.pcf\tbogus\n").unwrap_err().offset, 6);
        assert!(Manifest::parse("a.pcf\ttrain\na.pcf\ttest\n").is_err());
        assert!(Manifest::parse("../a.pcf\ttrain\n").is_err());
    }

    #[test]
    fn partial_names() {
        assert_eq!(partial_path("plane/train/0001.pcf"), "plane/train/0001.partial.pcf");
        assert_eq!(category_of("x.pcf"), "all");
    }
}
