//! Region classifier: hand-crafted superpixel features and a softmax
//! classifier trained on region seeds with summed cross-entropy.
//!
//! Predictions go through wrong-class removal: any region whose argmax is
//! not one of the image's labels (or background) is relabeled background.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use log::debug;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::color::lab_image;
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{self, Mlp, Samples};
use crate::raster::{ensure_same_dims, ClassId, ImageRaster, LabelRaster, BACKGROUND};
use crate::seeding::{RegionSeedSet, SeedSource};
use crate::superpixel::SuperpixelMap;

pub const COLOR_BINS: usize = 8;
pub const ORIENTATION_BINS: usize = 8;
pub const REGION_FEATURE_DIM: usize = 3 * COLOR_BINS + 3 + 2 + 1 + ORIENTATION_BINS + 1;

const LAB_OFFSET: usize = 3 * COLOR_BINS;
const CENTROID_OFFSET: usize = LAB_OFFSET + 3;
const AREA_OFFSET: usize = CENTROID_OFFSET + 2;
const GRADIENT_OFFSET: usize = AREA_OFFSET + 1;
const CONTRAST_OFFSET: usize = GRADIENT_OFFSET + ORIENTATION_BINS;

/// Layout: per-channel RGB histograms (3 x 8, each summing to 1), Lab mean
/// scaled by (1/100, 1/128, 1/128), centroid in `[0, 1]^2`, area fraction,
/// magnitude-weighted gradient orientation histogram (sums to 1, or all
/// zero for a flat region), and mean Lab contrast across the region
/// boundary scaled by 1/100.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionFeature(pub [f64; REGION_FEATURE_DIM]);

impl RegionFeature {
    pub fn color_histogram(&self, channel: usize) -> &[f64] {
        &self.0[channel * COLOR_BINS..(channel + 1) * COLOR_BINS]
    }

    pub fn lab_mean(&self) -> &[f64] {
        &self.0[LAB_OFFSET..LAB_OFFSET + 3]
    }

    pub fn centroid(&self) -> (f64, f64) {
        (self.0[CENTROID_OFFSET], self.0[CENTROID_OFFSET + 1])
    }

    pub fn area(&self) -> f64 {
        self.0[AREA_OFFSET]
    }

    pub fn gradient_histogram(&self) -> &[f64] {
        &self.0[GRADIENT_OFFSET..GRADIENT_OFFSET + ORIENTATION_BINS]
    }

    pub fn boundary_contrast(&self) -> f64 {
        self.0[CONTRAST_OFFSET]
    }
}

/// One feature vector per superpixel, in region-id order.
pub fn extract_features(image: &ImageRaster, sp: &SuperpixelMap) -> Result<Vec<RegionFeature>> {
    ensure_same_dims(sp.dims(), image.dims())?;
    let (w, h) = image.dims();
    let lab = lab_image(image.data());
    let ids = sp.region_ids();
    let total = (w * h) as f64;

    Ok((0..sp.region_count())
        .map(|r| {
            let pixels = sp.region_pixels(r);
            let n = pixels.len() as f64;
            let mut f = [0.0; REGION_FEATURE_DIM];

            let (mut sx, mut sy) = (0.0, 0.0);
            let mut lab_sum = [0.0; 3];
            for &p in pixels {
                let p = p as usize;
                let rgb = image.pixel(p);
                for c in 0..3 {
                    f[c * COLOR_BINS + usize::from(rgb[c]) * COLOR_BINS / 256] += 1.0;
                    lab_sum[c] += lab[p][c];
                }
                sx += (p % w) as f64 + 0.5;
                sy += (p / w) as f64 + 0.5;
            }
            for v in &mut f[..LAB_OFFSET] {
                *v /= n;
            }
            f[LAB_OFFSET] = lab_sum[0] / n / 100.0;
            f[LAB_OFFSET + 1] = lab_sum[1] / n / 128.0;
            f[LAB_OFFSET + 2] = lab_sum[2] / n / 128.0;
            f[CENTROID_OFFSET] = sx / n / w as f64;
            f[CENTROID_OFFSET + 1] = sy / n / h as f64;
            f[AREA_OFFSET] = n / total;

            // Central differences on L, using only pixels of the same region.
            let mut orient = [0.0; ORIENTATION_BINS];
            let mut boundary_sum = 0.0;
            let mut boundary_pairs = 0usize;
            for &p in pixels {
                let p = p as usize;
                let (x, y) = (p % w, p / w);
                let same = |q: usize| ids[q] as usize == r;
                let l_at = |q: usize| if same(q) { lab[q][0] } else { lab[p][0] };
                let left = if x > 0 { l_at(p - 1) } else { lab[p][0] };
                let right = if x + 1 < w { l_at(p + 1) } else { lab[p][0] };
                let up = if y > 0 { l_at(p - w) } else { lab[p][0] };
                let down = if y + 1 < h { l_at(p + w) } else { lab[p][0] };
                let (gx, gy) = ((right - left) * 0.5, (down - up) * 0.5);
                let mag = gx.hypot(gy);
                if mag > 0.0 {
                    let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                    let bin = ((theta / std::f64::consts::PI * ORIENTATION_BINS as f64) as usize)
                        .min(ORIENTATION_BINS - 1);
                    orient[bin] += mag;
                }
                let neighbors = [
                    (x > 0).then(|| p - 1),
                    (x + 1 < w).then(|| p + 1),
                    (y > 0).then(|| p - w),
                    (y + 1 < h).then(|| p + w),
                ];
                for q in neighbors.into_iter().flatten().filter(|&q| !same(q)) {
                    let d: f64 = (0..3).map(|c| (lab[p][c] - lab[q][c]).powi(2)).sum();
                    boundary_sum += d.sqrt();
                    boundary_pairs += 1;
                }
            }
            let mag_total: f64 = orient.iter().sum();
            if mag_total > 0.0 {
                for (dst, v) in f[GRADIENT_OFFSET..].iter_mut().zip(orient) {
                    *dst = v / mag_total;
                }
            }
            if boundary_pairs > 0 {
                f[CONTRAST_OFFSET] = boundary_sum / boundary_pairs as f64 / 100.0;
            }
            RegionFeature(f)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default)]
pub struct RegionTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Width of an optional tanh hidden layer.
    pub hidden: Option<usize>,
    /// Background samples per epoch are capped at this multiple of the
    /// largest object class; `None` trains on every background region.
    pub background_ratio: Option<f64>,
}

impl Default for RegionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.1,
            weight_decay: 1e-4,
            hidden: None,
            background_ratio: Some(3.0),
        }
    }
}

/// Trained region classifier parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionClassifierParams {
    pub model: Mlp,
}

impl RegionClassifierParams {
    pub fn class_count(&self) -> usize {
        self.model.classes()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_f32r(path, &self.model.to_f32r())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model = Mlp::from_f32r(&io::read_f32r(path)?)?;
        if model.input_dim() != REGION_FEATURE_DIM {
            return Err(Error::Format(format!(
                "region params expect {REGION_FEATURE_DIM} inputs, file has {}",
                model.input_dim()
            )));
        }
        Ok(Self { model })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Objective on each epoch's batch, before the update.
    pub epoch_losses: Vec<f64>,
    /// Mean cross-entropy on all labeled samples at initialization.
    pub initial_loss: f64,
    /// Mean cross-entropy on all labeled samples after training.
    pub final_loss: f64,
}

/// Gathers labeled regions of every image into one sample matrix.
pub fn region_samples(features: &[Vec<RegionFeature>], seeds: &[RegionSeedSet]) -> Samples {
    let mut samples = Samples::new(REGION_FEATURE_DIM);
    for (feats, seed) in features.iter().zip(seeds) {
        for (r, class) in seed.labeled() {
            samples.push(&feats[r].0, usize::from(class));
        }
    }
    samples
}

/// Summed cross-entropy `-sum log p(label | region)` over a batch.
pub fn region_loss(params: &RegionClassifierParams, samples: &Samples) -> f64 {
    (0..samples.len())
        .map(|i| {
            nn::cross_entropy_from_logits(&params.model.logits(samples.row(i)), samples.labels[i])
        })
        .sum()
}

/// Fits the region classifier by full-batch gradient descent on the mean of
/// the summed cross-entropy (same minimizer). `required` lists classes that
/// must have at least one labeled region.
pub fn train_region_classifier(
    features: &[Vec<RegionFeature>],
    seeds: &[RegionSeedSet],
    required: &BTreeSet<ClassId>,
    class_count: usize,
    config: &RegionTrainConfig,
    rng_seed: u64,
) -> Result<(RegionClassifierParams, TrainReport)> {
    if features.len() != seeds.len() {
        return Err(Error::Config(format!(
            "{} feature sets for {} seed sets",
            features.len(),
            seeds.len()
        )));
    }
    let samples = region_samples(features, seeds);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &c) in samples.labels.iter().enumerate() {
        by_class
            .get_mut(c)
            .ok_or_else(|| Error::DegenerateData(format!("seed class {c} >= {class_count}")))?
            .push(i);
    }
    if let Some(&c) = required
        .iter()
        .find(|&&c| by_class[usize::from(c)].is_empty())
    {
        return Err(Error::DegenerateData(format!(
            "class {c} has no labeled regions"
        )));
    }
    if samples.is_empty() {
        return Err(Error::DegenerateData("no labeled regions".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let dims = match config.hidden {
        Some(h) => vec![REGION_FEATURE_DIM, h, class_count],
        None => vec![REGION_FEATURE_DIM, class_count],
    };
    let mut model = Mlp::init(&dims, &mut rng);
    let all: Vec<usize> = (0..samples.len()).collect();
    let initial_loss = model.loss(&samples, &all, 0.0);

    let objects: Vec<usize> = by_class[1..].iter().flatten().copied().collect();
    let largest_object = by_class[1..].iter().map(Vec::len).max().unwrap_or(0);
    let background = &by_class[usize::from(BACKGROUND)];
    let bg_cap = config
        .background_ratio
        .map(|r| ((r * largest_object as f64).ceil() as usize).max(1))
        .filter(|&cap| cap < background.len());

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let rows: Vec<usize> = match bg_cap {
            Some(cap) => {
                let mut picked: Vec<usize> = sample(&mut rng, background.len(), cap)
                    .into_iter()
                    .map(|k| background[k])
                    .collect();
                picked.extend(&objects);
                picked.sort_unstable();
                picked
            }
            None => all.clone(),
        };
        let (loss, grad) = model.loss_and_gradient(&samples, &rows, config.weight_decay);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        epoch_losses.push(loss);
        model.step(&grad, config.lr);
    }
    if !model.is_finite() {
        return Err(Error::NonFiniteLoss(config.epochs));
    }
    let final_loss = model.loss(&samples, &all, 0.0);
    debug!(
        "region classifier: {} samples, loss {initial_loss:.4} -> {final_loss:.4}",
        samples.len()
    );
    Ok((
        RegionClassifierParams { model },
        TrainReport {
            epoch_losses,
            initial_loss,
            final_loss,
        },
    ))
}

/// Region labels and class posteriors for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRegionSet {
    pub labels: Vec<ClassId>,
    pub posteriors: Vec<Vec<f64>>,
}

impl ObjectRegionSet {
    pub fn render(&self, sp: &SuperpixelMap) -> LabelRaster {
        let data = sp
            .region_ids()
            .iter()
            .map(|&r| self.labels[r as usize])
            .collect();
        LabelRaster::new(sp.width(), sp.height(), data).expect("superpixel dims are valid")
    }

    pub fn as_seeds(&self) -> RegionSeedSet {
        RegionSeedSet {
            labels: self.labels.iter().map(|&c| Some(c)).collect(),
            source: SeedSource::FromMask,
        }
    }

    /// One line per region: `region label p_0 .. p_{C-1}`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (r, (label, post)) in self.labels.iter().zip(&self.posteriors).enumerate() {
            write!(out, "{r} {label}").expect("writing to a String");
            for p in post {
                write!(out, " {p:.6}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        let mut posteriors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let mut it = line.split_whitespace();
            if it.next().and_then(|r| r.parse::<usize>().ok()) != Some(labels.len()) {
                return Err(err("region ids must be consecutive".into()));
            }
            let label = it
                .next()
                .and_then(|l| l.parse::<ClassId>().ok())
                .ok_or_else(|| err("invalid label".into()))?;
            let post = it
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| err(format!("invalid posterior {v:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(label);
            posteriors.push(post);
        }
        Ok(Self { labels, posteriors })
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str, sp: &SuperpixelMap) -> Result<()> {
        let dir = dir.as_ref();
        io::atomic_write(dir.join(format!("{stem}.txt")), self.to_text().as_bytes())?;
        io::save_labels(dir.join(format!("{stem}.png")), &self.render(sp))
    }
}

/// Argmax of `posterior` (lower id on ties) after wrong-class removal.
pub fn filtered_argmax(posterior: &[f64], image_labels: &[ClassId]) -> ClassId {
    let mut best = 0;
    for (c, &p) in posterior.iter().enumerate() {
        if p > posterior[best] {
            best = c;
        }
    }
    let best = best as ClassId;
    if best == BACKGROUND || image_labels.contains(&best) {
        best
    } else {
        BACKGROUND
    }
}

pub fn predict_regions(
    features: &[RegionFeature],
    params: &RegionClassifierParams,
    image_labels: &[ClassId],
) -> ObjectRegionSet {
    let posteriors: Vec<Vec<f64>> = features
        .iter()
        .map(|f| params.model.probabilities(&f.0))
        .collect();
    let labels = posteriors
        .iter()
        .map(|p| filtered_argmax(p, image_labels))
        .collect();
    ObjectRegionSet { labels, posteriors }
}

/// Max relative error between analytic and central-difference gradients
/// (h = 1e-5) of the training objective on a small batch.
pub fn gradient_check(params: &RegionClassifierParams, batch: &Samples, weight_decay: f64) -> f64 {
    let rows: Vec<usize> = (0..batch.len()).collect();
    nn::gradient_check(&params.model, batch, &rows, weight_decay, 1e-5)
}
