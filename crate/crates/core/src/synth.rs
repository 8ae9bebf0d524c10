//! Synthetic benchmark: textured backgrounds with two-part objects. Each
//! class has a small "part" with a distinctive color and a larger "body".
//! Heatmaps peak on the part with an optional weaker falloff around it, the
//! way class activation maps favor discriminative regions; saliency covers whole
//! objects, blurred and noisy.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetImage};
use crate::error::{Error, Result};
use crate::raster::{ClassId, ImageRaster, LabelRaster, ScalarRaster, BACKGROUND};

/// (part, body) colors for classes 1..=8.
const CLASS_COLORS: [([u8; 3], [u8; 3]); 8] = [
    ([240, 40, 40], [205, 105, 70]),
    ([30, 215, 60], [80, 165, 90]),
    ([40, 70, 240], [80, 110, 200]),
    ([245, 220, 30], [200, 180, 60]),
    ([235, 40, 225], [190, 80, 170]),
    ([30, 215, 225], [60, 170, 180]),
    ([250, 140, 20], [220, 140, 40]),
    ([140, 50, 235], [130, 90, 200]),
];

/// Gray level the body fades toward with full shading.
const FAR_GRAY: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub image_count: usize,
    pub width: usize,
    pub height: usize,
    /// Object classes, excluding background.
    pub object_classes: usize,
    /// Fraction of images holding two objects of different classes.
    pub multi_class_fraction: f64,
    /// Falloff scale in pixels of the weaker heat surrounding the part;
    /// 0 keeps all heat inside the part.
    pub heat_spread: f64,
    /// Amplitude of uniform saliency noise.
    pub saliency_noise: f64,
    /// Amplitude of per-pixel color noise.
    pub pixel_noise: f64,
    /// Amplitude of the blocky background texture.
    pub background_texture: f64,
    /// Bodies darken away from the part in this many bands.
    pub shade_bands: usize,
    /// Blend toward dark gray reached by the farthest band, in [0, 1].
    pub far_shade: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_count: 40,
            width: 64,
            height: 64,
            object_classes: 4,
            multi_class_fraction: 0.25,
            heat_spread: 0.0,
            saliency_noise: 0.1,
            pixel_noise: 6.0,
            background_texture: 20.0,
            shade_bands: 4,
            far_shade: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_count == 0 {
            return Err(Error::Config("image_count must be positive".into()));
        }
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config(
                "synthetic images must be at least 32x32".into(),
            ));
        }
        if !(1..=CLASS_COLORS.len()).contains(&self.object_classes) {
            return Err(Error::Config(format!(
                "object_classes must be in 1..={}",
                CLASS_COLORS.len()
            )));
        }
        if self.multi_class_fraction > 0.0 && self.object_classes < 2 {
            return Err(Error::Config(
                "multi-class images need two object classes".into(),
            ));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.heat_spread >= 0.0 && self.heat_spread.is_finite()) {
            return Err(Error::Config("heat_spread must be a finite non-negative number".into()));
        }
        if self.shade_bands == 0 {
            return Err(Error::Config("shade_bands must be positive".into()));
        }
        if [self.multi_class_fraction, self.saliency_noise, self.far_shade]
            .iter()
            .any(|&v| !unit(v))
        {
            return Err(Error::Config(
                "fractions and levels must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Geometry of one object: an elliptical body and a disk part on its rim.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectShape {
    pub class: ClassId,
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub part_center: (f64, f64),
    pub part_radius: f64,
}

impl ObjectShape {
    pub fn in_part(&self, x: f64, y: f64) -> bool {
        (x - self.part_center.0).hypot(y - self.part_center.1) <= self.part_radius
    }

    pub fn in_body(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.center.0) / self.radii.0;
        let dy = (y - self.center.1) / self.radii.1;
        dx * dx + dy * dy <= 1.0
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the part disk.
    pub fn part_bounds(&self) -> (f64, f64, f64, f64) {
        let (px, py) = self.part_center;
        let r = self.part_radius;
        (px - r, py - r, px + r, py + r)
    }

    /// Position along the axis from the part through the body center: 0 at
    /// the part, 1 on the far rim.
    pub fn depth(&self, x: f64, y: f64) -> f64 {
        let (ux, uy) = (self.center.0 - self.part_center.0, self.center.1 - self.part_center.1);
        let len = ux.hypot(uy).max(1e-9);
        let along = ((x - self.part_center.0) * ux + (y - self.part_center.1) * uy) / len;
        (along / (2.0 * len)).clamp(0.0, 1.0)
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let (x0, y0, x1, y1) = self.part_bounds();
        (
            x0.min(self.center.0 - self.radii.0),
            y0.min(self.center.1 - self.radii.1),
            x1.max(self.center.0 + self.radii.0),
            y1.max(self.center.1 + self.radii.1),
        )
    }
}

fn sample_shape(
    rng: &mut ChaCha8Rng,
    class: ClassId,
    w: usize,
    h: usize,
    scale: f64,
) -> ObjectShape {
    let rx = rng.gen_range(9.0..13.0) * scale;
    let ry = rng.gen_range(7.0..10.0) * scale;
    let part_radius = rng.gen_range(3.0..4.0) * scale;
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let reach_x = rx + part_radius + 1.0;
    let reach_y = ry + part_radius + 1.0;
    let cx = rng.gen_range(reach_x..(w as f64 - reach_x));
    let cy = rng.gen_range(reach_y..(h as f64 - reach_y));
    ObjectShape {
        class,
        center: (cx, cy),
        radii: (rx, ry),
        part_center: (cx + rx * angle.cos(), cy + ry * angle.sin()),
        part_radius,
    }
}

fn overlaps(a: &ObjectShape, b: &ObjectShape, margin: f64) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    ax0 - margin < bx1 && bx0 - margin < ax1 && ay0 - margin < by1 && by0 - margin < ay1
}

/// Mean filter with a `(2r+1)^2` window clipped at the border.
fn box_blur(data: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    sum += data[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = sum / n;
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Generates one image from its objects and per-image random texture.
pub fn render_image(
    spec: &SynthSpec,
    objects: &[ObjectShape],
    rng: &mut ChaCha8Rng,
) -> DatasetImage {
    let (w, h) = (spec.width, spec.height);
    let gray: f64 = rng.gen_range(70.0..150.0);
    let tint: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(-6.0..6.0));
    const BLOCK: usize = 8;
    let (bw, bh) = (w.div_ceil(BLOCK), h.div_ceil(BLOCK));
    let blocks: Vec<f64> = (0..bw * bh)
        .map(|_| rng.gen_range(-1.0..1.0) * spec.background_texture)
        .collect();

    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut gt = vec![BACKGROUND; w * h];
    let mut heat: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
    let mut object_mask = vec![0.0; w * h];
    for o in objects {
        heat.entry(o.class).or_insert_with(|| vec![0.0; w * h]);
    }

    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let noise: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0) * spec.pixel_noise);
            let mut color =
                [0, 1, 2].map(|c| gray + tint[c] + blocks[(y / BLOCK) * bw + x / BLOCK]);
            for o in objects {
                let (part, body) = CLASS_COLORS[usize::from(o.class) - 1];
                if o.in_part(fx, fy) {
                    // Fine checker of part and body color.
                    color = if (x + y) % 2 == 0 { part } else { body }.map(f64::from);
                    gt[p] = o.class;
                    object_mask[p] = 1.0;
                } else if o.in_body(fx, fy) {
                    let bands = spec.shade_bands;
                    let band = ((o.depth(fx, fy) * bands as f64) as usize).min(bands - 1);
                    let shade = if bands > 1 {
                        spec.far_shade * band as f64 / (bands - 1) as f64
                    } else {
                        0.0
                    };
                    color = body.map(|v| f64::from(v) * (1.0 - shade) + FAR_GRAY * shade);
                    gt[p] = o.class;
                    object_mask[p] = 1.0;
                }
            }
            for c in 0..3 {
                rgb.push(to_u8(color[c] + noise[c]));
            }
            for o in objects {
                let r = (fx - o.part_center.0).hypot(fy - o.part_center.1);
                let level = if r <= o.part_radius {
                    let d = r / o.part_radius;
                    0.75 + 0.25 * (-d * d).exp()
                } else if spec.heat_spread > 0.0 {
                    let d = (r - o.part_radius) / spec.heat_spread;
                    0.7 * (-0.5 * d * d).exp()
                } else {
                    0.0
                };
                let v = &mut heat.get_mut(&o.class).expect("inserted above")[p];
                *v = v.max(level);
            }
        }
    }

    let heatmaps = heat
        .into_iter()
        .map(|(c, v)| {
            let data = v.into_iter().map(|h| h as f32).collect();
            (c, ScalarRaster::probability(w, h, data).expect("heat is finite"))
        })
        .collect();

    let blurred = box_blur(&object_mask, w, h, 2);
    let saliency = blurred
        .iter()
        .map(|&m| {
            let n = rng.gen_range(-1.0..1.0) * spec.saliency_noise;
            (0.1 + 0.8 * m + n).clamp(0.0, 1.0) as f32
        })
        .collect();

    let mut labels: Vec<ClassId> = objects.iter().map(|o| o.class).collect();
    labels.sort_unstable();
    labels.dedup();
    DatasetImage {
        name: String::new(),
        image: ImageRaster::new(w, h, rgb).expect("sizes match"),
        labels,
        heatmaps,
        saliency: Some(ScalarRaster::probability(w, h, saliency).expect("saliency is finite")),
        ground_truth: Some(LabelRaster::new(w, h, gt).expect("sizes match")),
    }
}

/// Object layout for every image. Classes cycle so each appears equally
/// often as the primary object.
pub fn sample_layouts(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<ObjectShape>> {
    let classes = spec.object_classes as ClassId;
    // Shape sizes are tuned for 64x64 and scale with the shorter side.
    let unit = spec.width.min(spec.height) as f64 / 64.0;
    (0..spec.image_count)
        .map(|i| {
            let first = (i % spec.object_classes) as ClassId + 1;
            if !rng.gen_bool(spec.multi_class_fraction) {
                return vec![sample_shape(rng, first, spec.width, spec.height, unit)];
            }
            let second = (first - 1 + rng.gen_range(1..classes)) % classes + 1;
            let mut scale = 0.8;
            loop {
                let a = sample_shape(rng, first, spec.width, spec.height, scale * unit);
                let b = sample_shape(rng, second, spec.width, spec.height, scale * unit);
                if !overlaps(&a, &b, 2.0 * unit) {
                    return vec![a, b];
                }
                scale = (scale * 0.98).max(0.5);
            }
        })
        .collect()
}

pub fn generate(spec: &SynthSpec, rng_seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let layouts = sample_layouts(spec, &mut rng);
    let images = layouts
        .iter()
        .enumerate()
        .map(|(i, objects)| {
            let mut img = render_image(spec, objects, &mut rng);
            img.name = format!("synth_{i:03}");
            img
        })
        .collect();
    Ok(Dataset {
        images,
        class_count: spec.object_classes + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SynthSpec {
            image_count: 6,
            ..SynthSpec::default()
        };
        assert_eq!(generate(&spec, 11).unwrap(), generate(&spec, 11).unwrap());
        assert_ne!(generate(&spec, 11).unwrap(), generate(&spec, 12).unwrap());
    }

    #[test]
    fn labels_match_ground_truth() {
        let spec = SynthSpec {
            image_count: 12,
            multi_class_fraction: 0.5,
            ..SynthSpec::default()
        };
        for img in generate(&spec, 5).unwrap().images {
            let gt = img.ground_truth.as_ref().unwrap();
            let present: Vec<ClassId> = gt.classes().into_iter().filter(|&c| c != 0).collect();
            assert_eq!(present, img.labels);
            assert_eq!(img.heatmaps.keys().copied().collect::<Vec<_>>(), img.labels);
        }
    }

    #[test]
    fn small_and_narrow_images_fit() {
        for (width, height) in [(32, 32), (32, 80), (48, 36)] {
            let spec = SynthSpec {
                image_count: 10,
                width,
                height,
                multi_class_fraction: 0.5,
                ..SynthSpec::default()
            };
            for img in generate(&spec, 1).unwrap().images {
                let gt = img.ground_truth.unwrap();
                assert_eq!(gt.dims(), (width, height));
                assert!(gt.classes().len() == img.labels.len() + 1);
            }
        }
    }

    #[test]
    fn part_only_heat_stays_in_part_box() {
        let spec = SynthSpec {
            image_count: 1,
            object_classes: 1,
            multi_class_fraction: 0.0,
            ..SynthSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = sample_layouts(&spec, &mut rng);
        let shape = layout[0][0];
        let img = render_image(&spec, &layout[0], &mut rng);
        let heat = &img.heatmaps[&1];
        let (x0, y0, x1, y1) = shape.part_bounds();
        for y in 0..spec.height {
            for x in 0..spec.width {
                if heat.get(x, y) > 0.0 {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    assert!(fx >= x0 && fx <= x1 && fy >= y0 && fy <= y1);
                }
            }
        }
        assert!(heat.data().iter().any(|&v| v > 0.9));
    }
}
