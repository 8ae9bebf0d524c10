//! Pixel labeler: per-pixel features and a one-hidden-layer MLP trained on
//! refined object regions, used to predict full masks.

use std::collections::BTreeSet;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::lab_image;
use crate::crf::{self, CrfParams, LabelField};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{Mlp, Samples, Sgd};
use crate::raster::{ensure_same_dims, ClassId, ImageRaster, LabelRaster, BACKGROUND, IGNORE};
use crate::superpixel::SuperpixelMap;

pub const PIXEL_FEATURE_DIM: usize = 15;
const WINDOW_RADIUS: usize = 2;

/// Per-pixel features of one image, row-major, [`PIXEL_FEATURE_DIM`] per
/// pixel: Lab (scaled by 1/100, 1/128, 1/128), position in `[0, 1]^2`, 5x5
/// window Lab mean and stddev, superpixel mean Lab, and L gradient magnitude
/// scaled by 1/100. Windows are clipped at the image border.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl PixelFeatures {
    pub fn row(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * PIXEL_FEATURE_DIM..(pixel + 1) * PIXEL_FEATURE_DIM]
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn extract_pixel_features(image: &ImageRaster, sp: &SuperpixelMap) -> Result<PixelFeatures> {
    ensure_same_dims(sp.dims(), image.dims())?;
    let (w, h) = image.dims();
    let scale = [100.0, 128.0, 128.0];
    let lab: Vec<[f64; 3]> = lab_image(image.data())
        .into_iter()
        .map(|v| [v[0] / scale[0], v[1] / scale[1], v[2] / scale[2]])
        .collect();

    let mut region_mean = vec![[0.0; 3]; sp.region_count()];
    for (r, mean) in region_mean.iter_mut().enumerate() {
        let pixels = sp.region_pixels(r);
        for &p in pixels {
            for c in 0..3 {
                mean[c] += lab[p as usize][c];
            }
        }
        for v in mean.iter_mut() {
            *v /= pixels.len() as f64;
        }
    }

    let mut data = Vec::with_capacity(w * h * PIXEL_FEATURE_DIM);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            data.extend_from_slice(&lab[p]);
            data.push((x as f64 + 0.5) / w as f64);
            data.push((y as f64 + 0.5) / h as f64);

            let mut sum = [0.0; 3];
            let mut sq = [0.0; 3];
            let mut count = 0.0;
            for wy in y.saturating_sub(WINDOW_RADIUS)..(y + WINDOW_RADIUS + 1).min(h) {
                for wx in x.saturating_sub(WINDOW_RADIUS)..(x + WINDOW_RADIUS + 1).min(w) {
                    let v = lab[wy * w + wx];
                    for c in 0..3 {
                        sum[c] += v[c];
                        sq[c] += v[c] * v[c];
                    }
                    count += 1.0;
                }
            }
            let mean = sum.map(|s| s / count);
            data.extend_from_slice(&mean);
            for c in 0..3 {
                data.push((sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt());
            }

            data.extend_from_slice(&region_mean[sp.region_of(p)]);

            let l = |q: usize| lab[q][0];
            let gx = (l(y * w + (x + 1).min(w - 1)) - l(y * w + x.saturating_sub(1))) * 0.5;
            let gy = (l((y + 1).min(h - 1) * w + x) - l(y.saturating_sub(1) * w + x)) * 0.5;
            data.push(gx.hypot(gy));
        }
    }
    Ok(PixelFeatures {
        width: w,
        height: h,
        data,
    })
}

/// Mean of `-log p(label)` over every non-IGNORE pixel of `supervision`.
pub fn seg_loss(predictions: &LabelField, supervision: &LabelRaster) -> Result<f64> {
    ensure_same_dims(predictions.dims(), supervision.dims())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, &label) in supervision.data().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let prob = *predictions
            .row(p)
            .get(usize::from(label))
            .ok_or_else(|| Error::Config(format!("label {label} outside prediction classes")))?;
        sum -= prob.ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoLabeledPixels);
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default)]
pub struct PixelTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub batch_size: usize,
    /// Cap on sampled pixels per image per epoch.
    pub samples_per_image: usize,
    /// Use every labeled pixel in a single batch per epoch.
    pub full_batch: bool,
    pub weight_decay: f64,
}

impl Default for PixelTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.1,
            momentum: 0.9,
            hidden: 64,
            batch_size: 256,
            samples_per_image: 2000,
            full_batch: false,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelClassifierParams {
    pub model: Mlp,
}

impl PixelClassifierParams {
    pub fn class_count(&self) -> usize {
        self.model.classes()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_f32r(path, &self.model.to_f32r())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model = Mlp::from_f32r(&io::read_f32r(path)?)?;
        if model.input_dim() != PIXEL_FEATURE_DIM {
            return Err(Error::Format(format!(
                "pixel params expect {PIXEL_FEATURE_DIM} inputs, file has {}",
                model.input_dim()
            )));
        }
        Ok(Self { model })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Loss on the first epoch's pixel sample before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Per-image labeled pixel indices into one shared sample matrix, grouped
/// by class.
struct PixelPool {
    samples: Samples,
    per_image: Vec<Vec<Vec<usize>>>,
}

fn pixel_pool(
    features: &[PixelFeatures],
    supervision: &[LabelRaster],
    class_count: usize,
) -> Result<PixelPool> {
    let mut samples = Samples::new(PIXEL_FEATURE_DIM);
    let mut per_image = Vec::with_capacity(features.len());
    for (f, s) in features.iter().zip(supervision) {
        ensure_same_dims((f.width, f.height), s.dims())?;
        let mut by_class = vec![Vec::new(); class_count];
        for (p, &label) in s.data().iter().enumerate() {
            if label == IGNORE {
                continue;
            }
            let slot = by_class
                .get_mut(usize::from(label))
                .ok_or_else(|| Error::DegenerateData(format!("label {label} >= {class_count}")))?;
            slot.push(samples.len());
            samples.push(f.row(p), usize::from(label));
        }
        per_image.push(by_class);
    }
    Ok(PixelPool { samples, per_image })
}

/// Draws up to `cap` pixels from one image, each class getting a share
/// proportional to its labeled count (at least one).
fn stratified_sample(
    by_class: &[Vec<usize>],
    cap: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<usize>,
) {
    let total: usize = by_class.iter().map(Vec::len).sum();
    if total <= cap {
        by_class.iter().for_each(|c| out.extend(c));
        return;
    }
    for rows in by_class.iter().filter(|c| !c.is_empty()) {
        let quota = ((rows.len() * cap) as f64 / total as f64).round().max(1.0) as usize;
        out.extend(rows.choose_multiple(rng, quota.min(rows.len())));
    }
}

/// Minimizes the mean cross-entropy over labeled pixels. `required` lists
/// classes that must have at least one labeled pixel.
pub fn train_pixel_classifier(
    features: &[PixelFeatures],
    supervision: &[LabelRaster],
    required: &BTreeSet<ClassId>,
    class_count: usize,
    config: &PixelTrainConfig,
    rng_seed: u64,
) -> Result<(PixelClassifierParams, PixelTrainReport)> {
    if features.len() != supervision.len() {
        return Err(Error::Config(format!(
            "{} feature sets for {} supervision masks",
            features.len(),
            supervision.len()
        )));
    }
    let pool = pixel_pool(features, supervision, class_count)?;
    if pool.samples.is_empty() {
        return Err(Error::NoLabeledPixels);
    }
    if let Some(c) = required.iter().find(|&&c| {
        pool.per_image
            .iter()
            .all(|img| img[usize::from(c)].is_empty())
    }) {
        return Err(Error::DegenerateData(format!(
            "class {c} has no labeled pixels"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut model = Mlp::init(&[PIXEL_FEATURE_DIM, config.hidden, class_count], &mut rng);
    let mut sgd = Sgd::new(config.lr, config.momentum);
    let all: Vec<usize> = (0..pool.samples.len()).collect();

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut probe_rows: Option<Vec<usize>> = None;
    let mut initial_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let mut rows = if config.full_batch {
            all.clone()
        } else {
            let mut rows = Vec::new();
            for img in &pool.per_image {
                stratified_sample(img, config.samples_per_image, &mut rng, &mut rows);
            }
            rows
        };
        if probe_rows.is_none() {
            initial_loss = model.loss(&pool.samples, &rows, 0.0);
            probe_rows = Some(rows.clone());
        }
        let batch = if config.full_batch {
            rows.len()
        } else {
            rows.shuffle(&mut rng);
            config.batch_size.max(1)
        };
        let mut loss_sum = 0.0;
        for chunk in rows.chunks(batch) {
            let (loss, grad) = model.loss_and_gradient(&pool.samples, chunk, config.weight_decay);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(epoch));
            }
            loss_sum += loss * chunk.len() as f64;
            sgd.update(&mut model, &grad);
        }
        epoch_losses.push(loss_sum / rows.len() as f64);
    }
    if !model.is_finite() {
        return Err(Error::NonFiniteLoss(config.epochs));
    }
    let probe = probe_rows.unwrap_or(all);
    if initial_loss.is_nan() {
        initial_loss = model.loss(&pool.samples, &probe, 0.0);
    }
    let final_loss = model.loss(&pool.samples, &probe, 0.0);
    debug!(
        "pixel classifier: {} labeled pixels, loss {initial_loss:.4} -> {final_loss:.4}",
        pool.samples.len()
    );
    Ok((
        PixelClassifierParams { model },
        PixelTrainReport {
            epoch_losses,
            initial_loss,
            final_loss,
        },
    ))
}

/// Class posteriors for every pixel. When `allowed` is given, classes outside
/// it (background is always allowed) get probability zero and the rest are
/// renormalized.
pub fn predict_probabilities(
    features: &PixelFeatures,
    params: &PixelClassifierParams,
    allowed: Option<&[ClassId]>,
) -> LabelField {
    let classes = params.class_count();
    let keep: Vec<bool> = (0..classes)
        .map(|c| {
            allowed.is_none_or(|a| {
                c == usize::from(BACKGROUND) || a.iter().any(|&l| usize::from(l) == c)
            })
        })
        .collect();
    let mut data = Vec::with_capacity(features.len() * classes);
    for p in 0..features.len() {
        let mut probs = params.model.probabilities(features.row(p));
        for (v, &k) in probs.iter_mut().zip(&keep) {
            if !k {
                *v = 0.0;
            }
        }
        let sum: f64 = probs.iter().sum();
        data.extend(probs.iter().map(|v| v / sum));
    }
    LabelField::new(features.width, features.height, classes, data).expect("shape matches features")
}

/// Per-pixel argmax mask, optionally CRF-smoothed.
pub fn predict_mask(
    image: &ImageRaster,
    features: &PixelFeatures,
    params: &PixelClassifierParams,
    allowed: Option<&[ClassId]>,
    crf_params: Option<&CrfParams>,
) -> Result<LabelRaster> {
    ensure_same_dims(image.dims(), (features.width, features.height))?;
    let mut probs = predict_probabilities(features, params, allowed);
    if let Some(crf_params) = crf_params {
        let scaled = crf_params.for_image(features.width, features.height);
        probs = crf::mean_field(&probs, image, &scaled)?;
    }
    let data = probs.argmax().into_iter().map(|c| c as ClassId).collect();
    LabelRaster::new(features.width, features.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(probs: &[[f64; 2]]) -> LabelField {
        LabelField::new(probs.len(), 1, 2, probs.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn loss_of_half_probabilities_is_ln2() {
        let p = field(&[[0.5, 0.5]; 4]);
        let s = LabelRaster::new(4, 1, vec![0, 1, 1, 0]).unwrap();
        assert!((seg_loss(&p, &s).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let p = field(&[[1.0, 0.0], [0.0, 1.0], [0.3, 0.7]]);
        let s = LabelRaster::new(3, 1, vec![0, 1, IGNORE]).unwrap();
        assert_eq!(seg_loss(&p, &s).unwrap(), 0.0);
    }

    #[test]
    fn all_ignore_is_an_error() {
        let p = field(&[[0.5, 0.5]; 2]);
        let s = LabelRaster::filled(2, 1, IGNORE);
        assert!(matches!(seg_loss(&p, &s), Err(Error::NoLabeledPixels)));
        let img = ImageRaster::filled(2, 1, [9, 9, 9]);
        let sp = SuperpixelMap::from_labels(2, 1, &[0, 0]).unwrap();
        let f = extract_pixel_features(&img, &sp).unwrap();
        let r = train_pixel_classifier(
            &[f],
            &[s],
            &BTreeSet::new(),
            2,
            &PixelTrainConfig::default(),
            0,
        );
        assert!(matches!(r, Err(Error::NoLabeledPixels)));
    }

    #[test]
    fn feature_layout() {
        let img = ImageRaster::filled(5, 3, [255, 255, 255]);
        let sp = SuperpixelMap::from_labels(5, 3, &[0; 15]).unwrap();
        let f = extract_pixel_features(&img, &sp).unwrap();
        assert_eq!(f.data.len(), 15 * PIXEL_FEATURE_DIM);
        let row = f.row(7);
        assert!((row[0] - 1.0).abs() < 1e-4);
        assert_eq!((row[3], row[4]), (0.5, 0.5));
        assert!(row[8..11].iter().all(|&s| s.abs() < 1e-9));
        assert_eq!(row[14], 0.0);
        assert!(f.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_image_gives_constant_mask() {
        let img = ImageRaster::filled(6, 6, [40, 90, 10]);
        let sp = SuperpixelMap::from_labels(6, 6, &[0; 36]).unwrap();
        let f = extract_pixel_features(&img, &sp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = PixelClassifierParams {
            model: Mlp::init(&[PIXEL_FEATURE_DIM, 8, 4], &mut rng),
        };
        // Positions differ per pixel, so zero the position weights.
        let mut params = params;
        let w = params.model.layers_mut()[0].weights_mut();
        for row in w.chunks_exact_mut(PIXEL_FEATURE_DIM) {
            row[3] = 0.0;
            row[4] = 0.0;
        }
        let mask = predict_mask(&img, &f, &params, None, None).unwrap();
        assert!(mask.data().iter().all(|&c| c == mask.data()[0]));
    }

    #[test]
    fn restriction_removes_absent_classes() {
        let img = ImageRaster::filled(3, 1, [0, 0, 0]);
        let sp = SuperpixelMap::from_labels(3, 1, &[0, 0, 0]).unwrap();
        let f = extract_pixel_features(&img, &sp).unwrap();
        let mut model = Mlp::zeros(&[PIXEL_FEATURE_DIM, 4, 3]);
        model.layers_mut()[1].bias_mut()[2] = 5.0;
        let params = PixelClassifierParams { model };
        let free = predict_mask(&img, &f, &params, None, None).unwrap();
        assert!(free.data().iter().all(|&c| c == 2));
        let limited = predict_mask(&img, &f, &params, Some(&[1]), None).unwrap();
        assert!(limited.data().iter().all(|&c| c == 0));
    }
}
