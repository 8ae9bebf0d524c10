//! In-memory raster types shared by every stage of the pipeline.
//!
//! All rasters are row-major. Label rasters use the VOC convention: 0 is
//! background, 1.. are object classes and 255 marks pixels to ignore.

use crate::error::{Error, Result};

pub type ClassId = u8;

pub const BACKGROUND: ClassId = 0;
pub const IGNORE: ClassId = 255;
pub const DEFAULT_CLASS_COUNT: usize = 21;

fn check_dims(width: usize, height: usize, len: usize, per_pixel: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Format(format!(
            "raster dimensions must be positive, got {width}x{height}"
        )));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(per_pixel))
        .ok_or_else(|| Error::Format(format!("raster dimensions overflow: {width}x{height}")))?;
    if expected != len {
        return Err(Error::Format(format!(
            "expected {expected} samples for {width}x{height}x{per_pixel}, got {len}"
        )));
    }
    Ok(())
}

/// 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len(), 3)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, data).expect("filled raster has consistent size")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, idx: usize) -> [u8; 3] {
        let o = idx * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixel(y * self.width + x)
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }
}

/// Per-pixel class map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    width: usize,
    height: usize,
    data: Vec<ClassId>,
}

impl LabelRaster {
    pub fn new(width: usize, height: usize, data: Vec<ClassId>) -> Result<Self> {
        check_dims(width, height, data.len(), 1)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, class: ClassId) -> Self {
        Self::new(width, height, vec![class; width * height]).expect("consistent size")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[ClassId] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [ClassId] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> ClassId {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: ClassId) {
        self.data[y * self.width + x] = class;
    }

    /// Rejects ids in `[class_count, 255)`.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE && usize::from(v) >= class_count)
        {
            Some(v) => Err(Error::Format(format!(
                "label {v} out of range for {class_count} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Distinct non-ignore classes present, ascending.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[usize::from(v)] = true;
        }
        (0..255u8).filter(|&c| seen[usize::from(c)]).collect()
    }
}

/// Single-channel float raster: heatmaps, saliency and posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarRaster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ScalarRaster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height, data.len(), 1)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Like [`ScalarRaster::new`], but rejects NaN/Inf and clamps into `[0, 1]`.
    pub fn probability(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite probability value {v}")));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("consistent size")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

pub(crate) fn ensure_same_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

/// The PASCAL VOC color map: class `i` gets a color from the bit-interleaving
/// of its id.
pub fn voc_palette() -> [[u8; 3]; 256] {
    let mut palette = [[0u8; 3]; 256];
    for (i, entry) in palette.iter_mut().enumerate() {
        let mut id = i;
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        for j in 0..8 {
            r |= ((id & 1) as u8) << (7 - j);
            g |= (((id >> 1) & 1) as u8) << (7 - j);
            b |= (((id >> 2) & 1) as u8) << (7 - j);
            id >>= 3;
        }
        *entry = [r, g, b];
    }
    palette
}
