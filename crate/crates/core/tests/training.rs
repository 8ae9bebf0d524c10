use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mcof::pixel::{self, PixelTrainConfig};
use mcof::raster::{ClassId, ImageRaster, LabelRaster, BACKGROUND};
use mcof::region::{self, RegionFeature, RegionTrainConfig, REGION_FEATURE_DIM};
use mcof::seeding::{RegionSeedSet, SeedSource};
use mcof::superpixel::{self, FhParams};

/// Box-Muller draw from N(0, 1).
fn normal(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// Two Gaussian blobs whose means differ by `gap` standard deviations along
/// the first feature, one image per blob.
fn blobs(per_class: usize, gap: f64, sigma: f64, seed: u64) -> (Vec<Vec<RegionFeature>>, Vec<RegionSeedSet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut seeds = Vec::new();
    for class in [BACKGROUND, 1] {
        let centre = if class == BACKGROUND { -gap / 2.0 } else { gap / 2.0 } * sigma;
        let feats = (0..per_class)
            .map(|_| {
                let mut f = [0.0; REGION_FEATURE_DIM];
                f.iter_mut().for_each(|v| *v = normal(&mut rng) * sigma);
                f[0] += centre;
                RegionFeature(f)
            })
            .collect();
        features.push(feats);
        seeds.push(RegionSeedSet {
            labels: vec![Some(class); per_class],
            source: SeedSource::Initial,
        });
    }
    (features, seeds)
}

fn required() -> BTreeSet<ClassId> {
    [BACKGROUND, 1].into()
}

#[test]
fn region_classifier_separates_distant_blobs() {
    let (features, seeds) = blobs(50, 10.0, 0.1, 1);
    // Certificate: the midpoint threshold on the first feature already splits the classes.
    for (feats, seed) in features.iter().zip(&seeds) {
        for (r, class) in seed.labeled() {
            assert_eq!(feats[r].0[0] > 0.0, class == 1);
        }
    }
    let config = RegionTrainConfig {
        epochs: 200,
        ..RegionTrainConfig::default()
    };
    let (params, report) =
        region::train_region_classifier(&features, &seeds, &required(), 2, &config, 7).unwrap();
    assert!(report.final_loss < report.initial_loss);
    for (feats, seed) in features.iter().zip(&seeds) {
        for (r, class) in seed.labeled() {
            let p = params.model.probabilities(&feats[r].0);
            assert_eq!(region::filtered_argmax(&p, &[1]), class);
        }
    }
}

#[test]
fn full_batch_region_loss_never_increases() {
    let (features, seeds) = blobs(40, 2.0, 0.3, 2);
    let config = RegionTrainConfig {
        epochs: 300,
        weight_decay: 0.0,
        background_ratio: None,
        ..RegionTrainConfig::default()
    };
    let (_, report) =
        region::train_region_classifier(&features, &seeds, &required(), 2, &config, 3).unwrap();
    for w in report.epoch_losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "loss rose {} -> {}", w[0], w[1]);
    }
}

fn two_colour_image() -> (ImageRaster, LabelRaster) {
    let (w, h) = (24, 24);
    let mut image = ImageRaster::filled(w, h, [30, 60, 200]);
    let mut labels = LabelRaster::filled(w, h, BACKGROUND);
    for y in 6..18 {
        for x in 6..18 {
            image.set(x, y, [220, 40, 30]);
            labels.set(x, y, 1);
        }
    }
    (image, labels)
}

#[test]
fn pixel_classifier_separates_two_colours() {
    let (image, labels) = two_colour_image();
    let sp = superpixel::segment(&image, &FhParams::small_image()).unwrap();
    let features = pixel::extract_pixel_features(&image, &sp).unwrap();
    let config = PixelTrainConfig {
        epochs: 300,
        ..PixelTrainConfig::default()
    };
    let (params, _) = pixel::train_pixel_classifier(
        std::slice::from_ref(&features),
        std::slice::from_ref(&labels),
        &required(),
        2,
        &config,
        11,
    )
    .unwrap();
    let mask = pixel::predict_mask(&image, &features, &params, Some(&[1]), None).unwrap();
    let correct = mask.data().iter().zip(labels.data()).filter(|(a, b)| a == b).count();
    assert!(correct as f64 >= 0.99 * labels.len() as f64, "{correct}/{}", labels.len());
}
