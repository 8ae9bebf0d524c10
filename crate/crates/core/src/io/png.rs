//! PNG encode/decode for images and label maps.

use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::raster::{voc_palette, ImageRaster, LabelRaster, ScalarRaster};

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    data: Vec<u8>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::Format(format!(
            "png: unsupported bit depth {:?}, expected 8",
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    let (width, height) = (info.width as usize, info.height as usize);
    let row = info.line_size;
    let samples = info.color_type.samples();
    // Drop any row padding so rows are tightly packed.
    let data = if row == width * samples {
        buf
    } else {
        buf.chunks_exact(row)
            .flat_map(|r| r[..width * samples].iter().copied())
            .collect()
    };
    Ok(Decoded {
        width,
        height,
        color: info.color_type,
        data,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageRaster> {
    let d = decode(bytes)?;
    let data = match d.color {
        ColorType::Rgb => d.data,
        ColorType::Rgba => d
            .data
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        ColorType::Grayscale => d.data.iter().flat_map(|&v| [v, v, v]).collect(),
        other => {
            return Err(Error::Format(format!(
                "png: color type {other:?} is not an RGB image"
            )))
        }
    };
    ImageRaster::new(d.width, d.height, data)
}

/// Raw class ids from an 8-bit gray or palette PNG. Palette indices are
/// returned as-is; colors are never consulted.
pub fn decode_labels(bytes: &[u8]) -> Result<LabelRaster> {
    let d = decode(bytes)?;
    match d.color {
        ColorType::Grayscale | ColorType::Indexed => LabelRaster::new(d.width, d.height, d.data),
        other => Err(Error::Format(format!(
            "png: color type {other:?} is not a label map"
        ))),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRaster> {
    decode_image(&read(path.as_ref())?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelRaster> {
    decode_labels(&read(path.as_ref())?)
}

/// Gray PNG scaled by 1/255.
pub fn load_gray_scalar(path: impl AsRef<Path>) -> Result<ScalarRaster> {
    let d = decode(&read(path.as_ref())?)?;
    if d.color != ColorType::Grayscale {
        return Err(Error::Format(format!(
            "png: expected grayscale for a scalar raster, got {:?}",
            d.color
        )));
    }
    let data = d.data.iter().map(|&v| f32::from(v) / 255.0).collect();
    ScalarRaster::new(d.width, d.height, data)
}

fn encode(
    width: usize,
    height: usize,
    color: ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let w = u32::try_from(width).map_err(|_| Error::Format("png: width too large".into()))?;
        let h = u32::try_from(height).map_err(|_| Error::Format("png: height too large".into()))?;
        let mut encoder = png::Encoder::new(&mut out, w, h);
        encoder.set_color(color);
        encoder.set_depth(BitDepth::Eight);
        if let Some(p) = palette {
            encoder.set_palette(p);
        }
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::Format(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn encode_image(image: &ImageRaster) -> Result<Vec<u8>> {
    encode(
        image.width(),
        image.height(),
        ColorType::Rgb,
        None,
        image.data(),
    )
}

/// Palette PNG using the VOC color map; pixel values are the raw class ids.
pub fn encode_labels(labels: &LabelRaster) -> Result<Vec<u8>> {
    let palette = voc_palette().iter().flatten().copied().collect();
    encode(
        labels.width(),
        labels.height(),
        ColorType::Indexed,
        Some(palette),
        labels.data(),
    )
}

pub fn encode_gray(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    encode(width, height, ColorType::Grayscale, None, data)
}

pub fn save_image(path: impl AsRef<Path>, image: &ImageRaster) -> Result<()> {
    super::atomic_write(path, &encode_image(image)?)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelRaster) -> Result<()> {
    super::atomic_write(path, &encode_labels(labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::IGNORE;

    #[test]
    fn red_image_decodes() {
        let img = ImageRaster::filled(2, 2, [255, 0, 0]);
        let back = decode_image(&encode_image(&img).unwrap()).unwrap();
        assert_eq!(back.len(), 4);
        assert!(back.pixels().all(|p| p == [255, 0, 0]));
    }

    #[test]
    fn labels_round_trip_through_palette() {
        let labels = LabelRaster::new(3, 2, vec![0, 1, 2, 20, IGNORE, 7]).unwrap();
        let bytes = encode_labels(&labels).unwrap();
        assert_eq!(decode_labels(&bytes).unwrap(), labels);
    }

    #[test]
    fn gray_labels_accepted() {
        let bytes = encode_gray(3, 1, &[0, 7, 255]).unwrap();
        let labels = decode_labels(&bytes).unwrap();
        assert_eq!(labels.data(), &[0, 7, IGNORE]);
    }

    #[test]
    fn rgb_is_not_a_label_map() {
        let bytes = encode_image(&ImageRaster::filled(1, 1, [1, 2, 3])).unwrap();
        assert!(matches!(decode_labels(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_bytes_are_format_errors() {
        let mut bytes = encode_image(&ImageRaster::filled(4, 4, [9, 9, 9])).unwrap();
        bytes.truncate(bytes.len() / 2);
        assert!(matches!(decode_image(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_image(b"not a png"), Err(Error::Format(_))));
    }
}
