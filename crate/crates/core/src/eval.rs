//! Confusion-matrix mIoU, overlays, and the per-iteration metrics table.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::raster::{ensure_same_dims, voc_palette, ImageRaster, LabelRaster, BACKGROUND, IGNORE};

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both predictions and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// `confusion[gt][pred]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
}

impl IouReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let c = confusion.len();
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = confusion[k][k];
                let fn_: u64 = confusion[k].iter().sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|g| confusion[g][k]).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let included: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if included.is_empty() {
            0.0
        } else {
            included.iter().sum::<f64>() / included.len() as f64
        };
        Self {
            per_class_iou,
            miou,
            confusion,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{c},{v:.6}"),
                None => writeln!(out, "{c},excluded"),
            }
            .expect("writing to a String");
        }
        writeln!(out, "mean,{:.6}", self.miou).expect("writing to a String");
        out
    }
}

/// Accumulates a confusion matrix over every pixel whose ground truth is not
/// IGNORE. Predicted IGNORE or out-of-range labels are a format error.
pub fn evaluate(
    predictions: &[LabelRaster],
    ground_truth: &[LabelRaster],
    class_count: usize,
) -> Result<IouReport> {
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != ground_truth.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} ground-truth masks",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut confusion = vec![vec![0u64; class_count]; class_count];
    for (pred, gt) in predictions.iter().zip(ground_truth) {
        ensure_same_dims(gt.dims(), pred.dims())?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (usize::from(p), usize::from(g));
            if p >= class_count || g >= class_count {
                return Err(Error::Format(format!(
                    "label {} outside {class_count} classes",
                    p.max(g)
                )));
            }
            confusion[g][p] += 1;
        }
    }
    Ok(IouReport::from_confusion(confusion))
}

/// Blends palette colors at alpha 0.5 with half-up rounding; background and
/// IGNORE pixels keep the image color.
pub fn render_overlay(image: &ImageRaster, mask: &LabelRaster) -> Result<ImageRaster> {
    ensure_same_dims(image.dims(), mask.dims())?;
    let palette = voc_palette();
    let mut out = image.clone();
    for (p, &class) in mask.data().iter().enumerate() {
        if class == BACKGROUND || class == IGNORE {
            continue;
        }
        let rgb = image.pixel(p);
        let color = palette[usize::from(class)];
        let blended = [0, 1, 2].map(|c| ((u16::from(rgb[c]) + u16::from(color[c]) + 1) >> 1) as u8);
        out.set(p % image.width(), p / image.width(), blended);
    }
    Ok(out)
}

pub const STAGES: [&str; 4] = ["seeds", "regionnet", "refined", "pixelnet"];

/// mIoU of each stage at one iteration; `refined` is present only at t=0.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub seeds: f64,
    pub regionnet: Option<f64>,
    pub refined: Option<f64>,
    pub pixelnet: f64,
}

/// True when each value is at least the previous one minus `tolerance`.
pub fn is_monotone(values: &[f64], tolerance: f64) -> bool {
    values.windows(2).all(|w| w[1] >= w[0] - tolerance)
}

/// CSV with header `iteration,stage,miou`, one row per recorded stage, and a
/// trailing comment flagging whether the pixelnet column is nondecreasing.
pub fn iteration_report(history: &[IterationMetrics]) -> String {
    let mut out = String::from("iteration,stage,miou\n");
    for m in history {
        let values = [Some(m.seeds), m.regionnet, m.refined, Some(m.pixelnet)];
        for (stage, value) in STAGES.iter().zip(values) {
            if let Some(v) = value {
                writeln!(out, "{},{stage},{v:.6}", m.iteration).expect("writing to a String");
            }
        }
    }
    let pixel: Vec<f64> = history.iter().map(|m| m.pixelnet).collect();
    writeln!(out, "# pixelnet_monotone={}", is_monotone(&pixel, 0.0)).expect("writing to a String");
    out
}
