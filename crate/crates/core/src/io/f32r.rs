//! The F32R float raster container.
//!
//! Layout: `b"F32R"`, then little-endian `u32` width, height and channels,
//! then `width * height * channels` little-endian `f32` values, row-major
//! and channel-interleaved.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::ScalarRaster;

pub const MAGIC: &[u8; 4] = b"F32R";
const HEADER_LEN: usize = 16;

/// A decoded F32R payload with any channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct F32Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl F32Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Format("f32r: dimension overflow".into()))?;
        if expected != data.len() {
            return Err(Error::Format(format!(
                "f32r: {width}x{height}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let dim = |v: usize| {
            u32::try_from(v).map_err(|_| Error::Format(format!("f32r: dimension {v} too large")))
        };
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&dim(self.width)?.to_le_bytes());
        out.extend_from_slice(&dim(self.height)?.to_le_bytes());
        out.extend_from_slice(&dim(self.channels)?.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("f32r: bad magic".into()));
        }
        let field = |i: usize| {
            let o = 4 + i * 4;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4-byte slice")) as usize
        };
        let (width, height, channels) = (field(0), field(1), field(2));
        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format("f32r: dimension overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != count * 4 {
            return Err(Error::Format(format!(
                "f32r: header declares {count} values but payload has {} bytes",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn into_scalar(self) -> Result<ScalarRaster> {
        if self.channels != 1 {
            return Err(Error::Format(format!(
                "f32r: expected 1 channel, got {}",
                self.channels
            )));
        }
        ScalarRaster::new(self.width, self.height, self.data)
    }
}

impl From<&ScalarRaster> for F32Raster {
    fn from(r: &ScalarRaster) -> Self {
        Self {
            width: r.width(),
            height: r.height(),
            channels: 1,
            data: r.data().to_vec(),
        }
    }
}

pub fn read_f32r(path: impl AsRef<Path>) -> Result<F32Raster> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    F32Raster::decode(&bytes)
}

pub fn write_f32r(path: impl AsRef<Path>, raster: &F32Raster) -> Result<()> {
    super::atomic_write(path, &raster.encode()?)
}

pub fn save_scalar(path: impl AsRef<Path>, raster: &ScalarRaster) -> Result<()> {
    write_f32r(path, &F32Raster::from(raster))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(w: u32, h: u32, c: u32) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        for v in [w, h, c] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn decodes_two_values() {
        let mut b = header(2, 1, 1);
        b.extend_from_slice(&0.25f32.to_le_bytes());
        b.extend_from_slice(&1.0f32.to_le_bytes());
        let r = F32Raster::decode(&b).unwrap().into_scalar().unwrap();
        assert_eq!(r.dims(), (2, 1));
        assert_eq!(r.data(), &[0.25, 1.0]);
    }

    #[test]
    fn rejects_bad_magic_and_overflow() {
        let mut b = header(1, 1, 1);
        b[0] = b'X';
        b.extend_from_slice(&[0; 4]);
        assert!(F32Raster::decode(&b).is_err());

        let b = header(u32::MAX, u32::MAX, u32::MAX);
        assert!(matches!(F32Raster::decode(&b), Err(Error::Format(_))));

        let mut b = header(2, 2, 1);
        b.extend_from_slice(&[0; 12]);
        assert!(F32Raster::decode(&b).is_err());
    }

    #[test]
    fn encode_layout_is_bit_exact() {
        let r = F32Raster::new(1, 1, 2, vec![1.0, -2.5]).unwrap();
        let mut expected = header(1, 1, 2);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(r.encode().unwrap(), expected);
    }
}
