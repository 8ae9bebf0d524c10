//! In-memory training set: images with their image-level labels, heatmaps,
//! saliency and optional ground truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{self, DatasetManifest, ManifestEntry};
use crate::raster::{ensure_same_dims, ClassId, ImageRaster, LabelRaster, ScalarRaster};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetImage {
    /// File stem used for every per-image artifact.
    pub name: String,
    pub image: ImageRaster,
    pub labels: Vec<ClassId>,
    pub heatmaps: BTreeMap<ClassId, ScalarRaster>,
    pub saliency: Option<ScalarRaster>,
    pub ground_truth: Option<LabelRaster>,
}

impl DatasetImage {
    pub fn is_single_class(&self) -> bool {
        self.labels.len() == 1
    }

    fn validate(&self, class_count: usize) -> Result<()> {
        let dims = self.image.dims();
        for h in self.heatmaps.values() {
            ensure_same_dims(dims, h.dims())?;
        }
        if let Some(s) = &self.saliency {
            ensure_same_dims(dims, s.dims())?;
        }
        if let Some(gt) = &self.ground_truth {
            ensure_same_dims(dims, gt.dims())?;
            gt.validate(class_count)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<DatasetImage>,
    pub class_count: usize,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned())
}

impl Dataset {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut images = Vec::with_capacity(manifest.len());
        let mut seen = BTreeMap::new();
        for entry in &manifest.entries {
            let heatmaps = entry
                .labels
                .iter()
                .zip(&entry.heatmaps)
                .map(|(&c, p)| Ok((c, io::load_scalar_raster(p, true)?)))
                .collect::<Result<_>>()?;
            let mut name = stem(&entry.image);
            // Keep artifact names unique when stems collide.
            let n = seen.entry(name.clone()).or_insert(0usize);
            if *n > 0 {
                name = format!("{name}_{n}");
            }
            *n += 1;
            let img = DatasetImage {
                name,
                image: io::load_image(&entry.image)?,
                labels: entry.labels.clone(),
                heatmaps,
                saliency: entry
                    .saliency
                    .as_ref()
                    .map(|p| io::load_scalar_raster(p, true))
                    .transpose()?,
                ground_truth: entry
                    .ground_truth
                    .as_ref()
                    .map(io::load_labels)
                    .transpose()?,
            };
            img.validate(manifest.class_count)?;
            images.push(img);
        }
        Ok(Self {
            images,
            class_count: manifest.class_count,
        })
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        Self::from_manifest(&io::load_manifest(manifest_path)?)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.images.is_empty() && self.images.iter().all(|i| i.ground_truth.is_some())
    }

    /// Writes every raster under `dir` and returns the manifest, which is
    /// also saved as `dir/manifest.txt`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        let mut entries = Vec::with_capacity(self.len());
        for img in &self.images {
            let image = dir.join("images").join(format!("{}.png", img.name));
            io::save_image(&image, &img.image)?;
            let mut heatmaps = Vec::new();
            for (c, h) in &img.heatmaps {
                let p = dir.join("heatmaps").join(format!("{}_c{c}.f32r", img.name));
                io::save_scalar(&p, h)?;
                heatmaps.push(p);
            }
            let saliency = match &img.saliency {
                Some(s) => {
                    let p: PathBuf = dir.join("saliency").join(format!("{}.f32r", img.name));
                    io::save_scalar(&p, s)?;
                    Some(p)
                }
                None => None,
            };
            let ground_truth = match &img.ground_truth {
                Some(gt) => {
                    let p = dir.join("gt").join(format!("{}.png", img.name));
                    io::save_labels(&p, gt)?;
                    Some(p)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                image,
                labels: img.labels.clone(),
                heatmaps,
                saliency,
                ground_truth,
            });
        }
        let manifest = DatasetManifest {
            entries,
            class_count: self.class_count,
        };
        io::atomic_write(dir.join("manifest.txt"), manifest.to_text(dir).as_bytes())?;
        Ok(manifest)
    }
}
