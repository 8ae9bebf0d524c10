//! File formats: PNG rasters, F32R float rasters and dataset manifests.

pub mod f32r;
pub mod manifest;
pub mod png;

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::ScalarRaster;

pub use self::f32r::{read_f32r, save_scalar, write_f32r, F32Raster};
pub use self::manifest::{load_manifest, parse_manifest, DatasetManifest, ManifestEntry};
pub use self::png::{load_image, load_labels, save_image, save_labels};

/// Writes through a temporary sibling file and renames it into place.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads an F32R file, or an 8-bit gray PNG scaled by 1/255, by extension.
/// Probability rasters are clamped into `[0, 1]` and must be finite.
pub fn load_scalar_raster(path: impl AsRef<Path>, probability: bool) -> Result<ScalarRaster> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let raster = if is_png {
        png::load_gray_scalar(path)?
    } else {
        read_f32r(path)?.into_scalar()?
    };
    if probability {
        let (w, h) = raster.dims();
        ScalarRaster::probability(w, h, raster.data().to_vec())
    } else {
        Ok(raster)
    }
}
