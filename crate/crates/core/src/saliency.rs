//! Bayesian fusion of a saliency prior with color likelihoods estimated from
//! mined object regions, then CRF binarization. Used to grow object regions
//! of single-class images into non-discriminative parts.

use crate::color::{lab_bin, lab_image};
use crate::crf::{self, CrfParams};
use crate::error::{Error, Result};
use crate::raster::{
    ensure_same_dims, ClassId, ImageRaster, LabelRaster, ScalarRaster, BACKGROUND, IGNORE,
};
use crate::region::ObjectRegionSet;
use crate::seeding::{seeds_from_mask, RegionSeedSet, SeedSource};
use crate::superpixel::SuperpixelMap;

pub const DEFAULT_BINS: usize = 8;
/// Added to every histogram bin before renormalizing.
pub const SMOOTHING: f64 = 1e-6;

/// Per-image color likelihoods `p(v | obj)` and `p(v | bg)` over Lab bins.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodModel {
    pub bins: usize,
    pub object: Vec<f64>,
    pub background: Vec<f64>,
}

impl LikelihoodModel {
    pub fn likelihoods(&self, rgb: [u8; 3]) -> (f64, f64) {
        let b = lab_bin(crate::color::rgb_to_lab(rgb), self.bins);
        (self.object[b], self.background[b])
    }
}

fn normalized(counts: Vec<f64>) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + SMOOTHING * counts.len() as f64;
    counts
        .into_iter()
        .map(|c| (c + SMOOTHING) / total)
        .collect()
}

/// Object pixels are those with a class id in `1..255`; IGNORE pixels are
/// skipped.
pub fn fit_likelihoods(
    image: &ImageRaster,
    object_mask: &LabelRaster,
    bins: usize,
) -> Result<LikelihoodModel> {
    ensure_same_dims(image.dims(), object_mask.dims())?;
    if bins == 0 {
        return Err(Error::Config("histogram bins must be positive".into()));
    }
    let size = bins * bins * bins;
    let mut object = vec![0.0; size];
    let mut background = vec![0.0; size];
    for (lab, &class) in lab_image(image.data()).into_iter().zip(object_mask.data()) {
        let b = lab_bin(lab, bins);
        match class {
            IGNORE => {}
            BACKGROUND => background[b] += 1.0,
            _ => object[b] += 1.0,
        }
    }
    if object.iter().sum::<f64>() == 0.0 || background.iter().sum::<f64>() == 0.0 {
        return Err(Error::EmptyPartition);
    }
    Ok(LikelihoodModel {
        bins,
        object: normalized(object),
        background: normalized(background),
    })
}

/// `s L_o / (s L_o + (1 - s) L_b)` for one pixel.
/// Equal likelihoods cancel exactly, so the prior is returned as is.
pub fn posterior(s: f64, l_obj: f64, l_bg: f64) -> f64 {
    if l_obj == l_bg {
        return s;
    }
    let num = s * l_obj;
    let den = num + (1.0 - s) * l_bg;
    if den > 0.0 {
        num / den
    } else {
        s
    }
}

pub fn bayes_posterior(
    saliency: &ScalarRaster,
    model: &LikelihoodModel,
    image: &ImageRaster,
) -> Result<ScalarRaster> {
    ensure_same_dims(image.dims(), saliency.dims())?;
    let data = image
        .pixels()
        .zip(saliency.data())
        .map(|(rgb, &s)| {
            let (lo, lb) = model.likelihoods(rgb);
            posterior(f64::from(s), lo, lb) as f32
        })
        .collect();
    ScalarRaster::probability(image.width(), image.height(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedObjectRegions {
    pub posterior: ScalarRaster,
    pub labels: RegionSeedSet,
}

impl RefinedObjectRegions {
    /// Passes object regions through unchanged, with an empty posterior.
    pub fn unrefined(object_regions: &ObjectRegionSet, width: usize, height: usize) -> Self {
        Self {
            posterior: ScalarRaster::filled(width, height, 0.0),
            labels: object_regions.as_seeds(),
        }
    }

    pub fn region_labels(&self) -> Vec<ClassId> {
        self.labels
            .labels
            .iter()
            .map(|l| l.unwrap_or(BACKGROUND))
            .collect()
    }
}

/// Refines the object regions of a single-class image. Regions already
/// labeled `class_id` stay foreground; other regions become `class_id` when
/// most of their pixels are foreground after binarization.
pub fn refine(
    image: &ImageRaster,
    sp: &SuperpixelMap,
    object_regions: &ObjectRegionSet,
    saliency: Option<&ScalarRaster>,
    image_labels: &[ClassId],
    bins: usize,
    crf_params: &CrfParams,
) -> Result<RefinedObjectRegions> {
    let &[class_id] = image_labels else {
        return Err(Error::MultiClassImage(image_labels.len()));
    };
    let saliency =
        saliency.ok_or_else(|| Error::MissingSaliency(format!("class {class_id} image")))?;
    ensure_same_dims(sp.dims(), image.dims())?;
    ensure_same_dims(image.dims(), saliency.dims())?;

    let (w, h) = image.dims();
    let object_mask = object_regions.render(sp);
    let model = fit_likelihoods(image, &object_mask, bins)?;
    let post = bayes_posterior(saliency, &model, image)?;
    let fg = crf::binarize(&post, image, &crf_params.for_image(w, h))?;
    let voted = seeds_from_mask(sp, &fg)?;

    let labels = object_regions
        .labels
        .iter()
        .zip(&voted.labels)
        .map(|(&original, &vote)| {
            if original == class_id || vote == Some(1) {
                Some(class_id)
            } else {
                Some(BACKGROUND)
            }
        })
        .collect();
    Ok(RefinedObjectRegions {
        posterior: post,
        labels: RegionSeedSet {
            labels,
            source: SeedSource::FromMask,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_identities() {
        assert_eq!(posterior(0.37, 0.2, 0.2), 0.37);
        assert_eq!(posterior(0.0, 0.9, 0.1), 0.0);
        assert_eq!(posterior(1.0, 0.1, 0.9), 1.0);
        assert!((posterior(0.5, 0.8, 0.2) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn single_bin_object_mass() {
        let mut img = ImageRaster::filled(4, 1, [10, 10, 10]);
        img.set(3, 0, [250, 250, 250]);
        let mask = LabelRaster::new(4, 1, vec![1, 1, 1, 0]).unwrap();
        let m = fit_likelihoods(&img, &mask, 8).unwrap();
        let b = lab_bin(crate::color::rgb_to_lab([10, 10, 10]), 8);
        assert!((m.object[b] - 1.0).abs() < 1e-3);
        assert!((m.object.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.object.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn identical_partitions_give_identical_histograms() {
        let data: Vec<u8> = (0..24).map(|i| (i * 37 % 256) as u8).collect();
        let mut doubled = data.clone();
        doubled.extend(&data);
        let img = ImageRaster::new(16, 1, doubled).unwrap();
        let mask = LabelRaster::new(16, 1, [[3u8; 8], [0u8; 8]].concat()).unwrap();
        let m = fit_likelihoods(&img, &mask, 8).unwrap();
        for (a, b) in m.object.iter().zip(&m.background) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_partition() {
        let img = ImageRaster::filled(2, 1, [0, 0, 0]);
        let mask = LabelRaster::filled(2, 1, 0);
        assert!(matches!(
            fit_likelihoods(&img, &mask, 8),
            Err(Error::EmptyPartition)
        ));
    }

    fn two_region_case() -> (ImageRaster, SuperpixelMap, ObjectRegionSet) {
        let mut img = ImageRaster::filled(8, 8, [200, 30, 30]);
        for y in 0..8 {
            for x in 4..8 {
                img.set(x, y, [20, 20, 180]);
            }
        }
        let ids: Vec<u32> = (0..64).map(|p| u32::from(p % 8 >= 4)).collect();
        let sp = SuperpixelMap::from_labels(8, 8, &ids).unwrap();
        let o = ObjectRegionSet {
            labels: vec![2, 0],
            posteriors: vec![vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]],
        };
        (img, sp, o)
    }

    #[test]
    fn zero_saliency_keeps_original_regions() {
        let (img, sp, o) = two_region_case();
        let s = ScalarRaster::filled(8, 8, 0.0);
        let r = refine(&img, &sp, &o, Some(&s), &[2], 8, &CrfParams::default()).unwrap();
        assert_eq!(r.region_labels(), vec![2, 0]);
    }

    #[test]
    fn refine_preconditions() {
        let (img, sp, o) = two_region_case();
        let s = ScalarRaster::filled(8, 8, 0.0);
        let crf = CrfParams::default();
        assert!(matches!(
            refine(&img, &sp, &o, Some(&s), &[1, 2], 8, &crf),
            Err(Error::MultiClassImage(2))
        ));
        assert!(matches!(
            refine(&img, &sp, &o, None, &[2], 8, &crf),
            Err(Error::MissingSaliency(_))
        ));
    }
}
