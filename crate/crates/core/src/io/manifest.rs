//! Dataset manifest parsing.
//!
//! One entry per line, five pipe-separated fields:
//!
//! ```text
//! image.png | 2,5 | hm2.f32r,hm5.f32r | saliency.f32r | gt.png
//! ```
//!
//! Saliency and ground truth may be `-`. Lines starting with `#` are
//! comments; a comment of the form `# classes: N` sets the class count
//! (default 21). Relative paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::{ClassId, DEFAULT_CLASS_COUNT};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    /// Image-level object classes, ascending, never containing background.
    pub labels: Vec<ClassId>,
    /// Heatmap paths aligned with `labels`.
    pub heatmaps: Vec<PathBuf>,
    pub saliency: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn is_single_class(&self) -> bool {
        self.labels.len() == 1
    }

    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        std::iter::once(&self.image)
            .chain(&self.heatmaps)
            .chain(&self.saliency)
            .chain(&self.ground_truth)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_count: usize,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.ground_truth.is_some())
    }

    /// Renders the manifest with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = format!("# classes: {}\n", self.class_count);
        for e in &self.entries {
            let labels: Vec<String> = e.labels.iter().map(|c| c.to_string()).collect();
            let heatmaps: Vec<String> = e.heatmaps.iter().map(|p| rel(p)).collect();
            let opt = |p: &Option<PathBuf>| p.as_deref().map_or_else(|| "-".to_string(), rel);
            writeln!(
                out,
                "{}|{}|{}|{}|{}",
                rel(&e.image),
                labels.join(","),
                heatmaps.join(","),
                opt(&e.saliency),
                opt(&e.ground_truth)
            )
            .expect("writing to a String");
        }
        out
    }
}

fn parse_class_directive(comment: &str) -> Option<&str> {
    comment
        .trim_start_matches('#')
        .trim()
        .strip_prefix("classes:")
        .map(str::trim)
}

/// Parses manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest> {
    let mut class_count = DEFAULT_CLASS_COUNT;
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if let Some(v) = parse_class_directive(line) {
                class_count = v
                    .parse()
                    .ok()
                    .filter(|&c| (2..=255).contains(&c))
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        message: format!("invalid class count {v:?}"),
                    })?;
            }
            continue;
        }
        raw.push((line_no, line));
    }

    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let mut entries = Vec::with_capacity(raw.len());
    for (line, text) in raw {
        let err = |message: String| Error::Parse { line, message };
        let fields: Vec<&str> = text.split('|').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        if fields[0].is_empty() {
            return Err(err("empty image path".into()));
        }
        if fields[1].is_empty() {
            return Err(err("empty label set".into()));
        }
        let mut labels = Vec::new();
        for tok in fields[1].split(',').map(str::trim) {
            let c: usize = tok
                .parse()
                .map_err(|_| err(format!("invalid class id {tok:?}")))?;
            if c == 0 || c >= class_count {
                return Err(err(format!("class id {c} outside 1..{}", class_count - 1)));
            }
            labels.push(c as ClassId);
        }
        let heatmaps: Vec<&str> = fields[2]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        if heatmaps.len() != labels.len() {
            return Err(err(format!(
                "{} heatmaps for {} labels",
                heatmaps.len(),
                labels.len()
            )));
        }
        if labels.iter().collect::<BTreeSet<_>>().len() != labels.len() {
            return Err(err("duplicate class id".into()));
        }
        // Keep heatmaps aligned while sorting labels.
        let mut pairs: Vec<(ClassId, PathBuf)> = labels
            .into_iter()
            .zip(heatmaps.into_iter().map(resolve))
            .collect();
        pairs.sort_by_key(|(c, _)| *c);
        let (labels, heatmaps) = pairs.into_iter().unzip();
        let optional = |s: &str| (s != "-" && !s.is_empty()).then(|| resolve(s));
        entries.push(ManifestEntry {
            image: resolve(fields[0]),
            labels,
            heatmaps,
            saliency: optional(fields[3]),
            ground_truth: optional(fields[4]),
        });
    }
    Ok(DatasetManifest {
        entries,
        class_count,
    })
}

/// Parses a manifest file and checks that every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = parse_manifest(&text, base)?;
    let missing: Vec<PathBuf> = manifest
        .entries
        .iter()
        .flat_map(ManifestEntry::paths)
        .filter(|p| !p.is_file())
        .cloned()
        .collect();
    if missing.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::MissingFiles(missing))
    }
}
