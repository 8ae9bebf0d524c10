//! Initial object seeds from per-class heatmaps, and region seeds from
//! predicted masks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::raster::{ensure_same_dims, ClassId, LabelRaster, ScalarRaster, BACKGROUND, IGNORE};
use crate::superpixel::{average_raster_per_region, SuperpixelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedSource {
    Initial,
    FromMask,
}

/// Per-region class assignment. `None` marks an unlabeled region, which is
/// left out of region-model training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSeedSet {
    pub labels: Vec<Option<ClassId>>,
    pub source: SeedSource,
}

impl RegionSeedSet {
    pub fn labeled(&self) -> impl Iterator<Item = (usize, ClassId)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(r, l)| l.map(|c| (r, c)))
    }

    /// Unlabeled regions become `unlabeled` in the output raster.
    pub fn render(&self, sp: &SuperpixelMap, unlabeled: ClassId) -> LabelRaster {
        let data = sp
            .region_ids()
            .iter()
            .map(|&r| self.labels[r as usize].unwrap_or(unlabeled))
            .collect();
        LabelRaster::new(sp.width(), sp.height(), data).expect("superpixel map has valid dims")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (r, l) in self.labels.iter().enumerate() {
            match l {
                Some(c) => writeln!(out, "{r} {c}"),
                None => writeln!(out, "{r} -"),
            }
            .expect("writing to a String");
        }
        out
    }

    pub fn parse(text: &str, source: SeedSource) -> Result<Self> {
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let mut it = line.split_whitespace();
            let (Some(r), Some(l), None) = (it.next(), it.next(), it.next()) else {
                return Err(err(format!("expected `region label`, got {line:?}")));
            };
            if r.parse::<usize>().ok() != Some(labels.len()) {
                return Err(err(format!("expected region {}, got {r}", labels.len())));
            }
            labels.push(match l {
                "-" => None,
                _ => Some(
                    l.parse::<ClassId>()
                        .ok()
                        .filter(|&c| c != IGNORE)
                        .ok_or_else(|| err(format!("invalid label {l:?}")))?,
                ),
            });
        }
        Ok(Self { labels, source })
    }

    /// Writes `<stem>.txt` (region labels) and `<stem>.png` (rendered, with
    /// unlabeled regions as IGNORE).
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str, sp: &SuperpixelMap) -> Result<()> {
        let dir = dir.as_ref();
        io::atomic_write(dir.join(format!("{stem}.txt")), self.to_text().as_bytes())?;
        io::save_labels(dir.join(format!("{stem}.png")), &self.render(sp, IGNORE))
    }
}

/// Foreground threshold, either absolute or a fraction of the class's
/// largest region average.
#[derive(Clone, Copy, Debug, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FgThreshold {
    Absolute(f64),
    Relative(f64),
}

impl FgThreshold {
    fn value(self) -> f64 {
        match self {
            FgThreshold::Absolute(v) | FgThreshold::Relative(v) => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default)]
pub struct SeedParams {
    pub tau_fg: FgThreshold,
    /// Regions claimed by no class become background when every class
    /// average is at most this value.
    pub tau_bg: f64,
}

impl Default for SeedParams {
    fn default() -> Self {
        Self {
            tau_fg: FgThreshold::Relative(0.7),
            tau_bg: 0.3,
        }
    }
}

impl SeedParams {
    pub fn validate(&self) -> Result<()> {
        let fg = self.tau_fg.value();
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(fg) || !unit(self.tau_bg) || self.tau_bg >= fg {
            return Err(Error::Config(format!(
                "seed thresholds need 0 < tau_bg < tau_fg < 1, got tau_bg={} tau_fg={fg}",
                self.tau_bg
            )));
        }
        Ok(())
    }
}

/// Seeds from heatmaps: per class, a region is a candidate when its average
/// heat is a strict local maximum over adjacent regions or reaches the
/// foreground threshold. Conflicts go to the class with the highest average
/// (lower id on ties). Unclaimed regions become background when every class
/// average is at most `tau_bg`, else stay unlabeled.
///
/// `heatmaps` must hold exactly the image-level classes.
pub fn extract_seeds(
    sp: &SuperpixelMap,
    heatmaps: &BTreeMap<ClassId, ScalarRaster>,
    image_labels: &[ClassId],
    params: &SeedParams,
) -> Result<RegionSeedSet> {
    params.validate()?;
    for &c in image_labels {
        if !heatmaps.contains_key(&c) {
            return Err(Error::MissingHeatmap(c));
        }
    }
    if let Some(&extra) = heatmaps.keys().find(|c| !image_labels.contains(c)) {
        return Err(Error::Config(format!(
            "heatmap for class {extra} which is not an image label"
        )));
    }

    let n = sp.region_count();
    let mut best: Vec<Option<(ClassId, f64)>> = vec![None; n];
    let mut max_heat = vec![0.0f64; n];
    // BTreeMap iteration is ascending in class id, so `>` keeps the lower
    // id on ties.
    for (&class, heatmap) in heatmaps {
        if class == BACKGROUND || class == IGNORE {
            return Err(Error::Config(format!(
                "heatmap for non-object class {class}"
            )));
        }
        let avg = average_raster_per_region(sp, heatmap)?;
        let fg = match params.tau_fg {
            FgThreshold::Absolute(t) => t,
            FgThreshold::Relative(t) => t * avg.iter().copied().fold(0.0, f64::max),
        };
        for r in 0..n {
            max_heat[r] = max_heat[r].max(avg[r]);
            let local_max = sp.neighbors(r).iter().all(|&q| avg[r] > avg[q as usize]);
            // Zero heat is never evidence, even against a zero threshold.
            if avg[r] > 0.0 && (local_max || avg[r] >= fg) {
                match best[r] {
                    Some((_, h)) if h >= avg[r] => {}
                    _ => best[r] = Some((class, avg[r])),
                }
            }
        }
    }

    let labels = (0..n)
        .map(|r| match best[r] {
            Some((c, _)) => Some(c),
            None if max_heat[r] <= params.tau_bg => Some(BACKGROUND),
            None => None,
        })
        .collect();
    Ok(RegionSeedSet {
        labels,
        source: SeedSource::Initial,
    })
}

/// Majority class of `mask` within each region, ignoring IGNORE pixels.
/// Ties go to the lower class id; all-IGNORE regions stay unlabeled.
pub fn seeds_from_mask(sp: &SuperpixelMap, mask: &LabelRaster) -> Result<RegionSeedSet> {
    ensure_same_dims(sp.dims(), mask.dims())?;
    let data = mask.data();
    let labels = (0..sp.region_count())
        .map(|r| {
            let mut counts = [0u32; 256];
            for &p in sp.region_pixels(r) {
                counts[usize::from(data[p as usize])] += 1;
            }
            counts[usize::from(IGNORE)] = 0;
            let (class, &count) = counts
                .iter()
                .enumerate()
                .rev()
                .max_by_key(|(_, &n)| n)
                .expect("256 counters");
            (count > 0).then_some(class as ClassId)
        })
        .collect();
    Ok(RegionSeedSet {
        labels,
        source: SeedSource::FromMask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three 1-pixel-wide columns forming a 0–1–2 chain.
    fn chain3() -> SuperpixelMap {
        SuperpixelMap::from_labels(3, 1, &[0, 1, 2]).unwrap()
    }

    fn heat(values: &[f32]) -> ScalarRaster {
        ScalarRaster::new(values.len(), 1, values.to_vec()).unwrap()
    }

    fn maps(entries: &[(ClassId, &[f32])]) -> BTreeMap<ClassId, ScalarRaster> {
        entries.iter().map(|&(c, v)| (c, heat(v))).collect()
    }

    #[test]
    fn chain_example() {
        let params = SeedParams {
            tau_fg: FgThreshold::Absolute(0.5),
            tau_bg: 0.3,
        };
        let seeds =
            extract_seeds(&chain3(), &maps(&[(4, &[0.9, 0.2, 0.1])]), &[4], &params).unwrap();
        assert_eq!(seeds.labels, vec![Some(4), Some(0), Some(0)]);
    }

    #[test]
    fn middle_band_stays_unlabeled() {
        let params = SeedParams {
            tau_fg: FgThreshold::Absolute(0.8),
            tau_bg: 0.3,
        };
        let seeds =
            extract_seeds(&chain3(), &maps(&[(1, &[0.9, 0.5, 0.1])]), &[1], &params).unwrap();
        assert_eq!(seeds.labels, vec![Some(1), None, Some(0)]);
    }

    #[test]
    fn all_zero_heatmap_is_background() {
        let seeds = extract_seeds(
            &chain3(),
            &maps(&[(2, &[0.0, 0.0, 0.0])]),
            &[2],
            &SeedParams::default(),
        )
        .unwrap();
        assert_eq!(seeds.labels, vec![Some(0); 3]);
    }

    #[test]
    fn conflicts_go_to_highest_average() {
        let sp = SuperpixelMap::from_labels(2, 1, &[0, 1]).unwrap();
        let h = maps(&[(1, &[0.9, 0.1]), (2, &[0.8, 0.1])]);
        let seeds = extract_seeds(&sp, &h, &[1, 2], &SeedParams::default()).unwrap();
        assert_eq!(seeds.labels[0], Some(1));

        // Exact tie: lower class id wins.
        let h = maps(&[(3, &[0.6, 0.1]), (5, &[0.6, 0.1])]);
        let seeds = extract_seeds(&sp, &h, &[3, 5], &SeedParams::default()).unwrap();
        assert_eq!(seeds.labels[0], Some(3));
    }

    #[test]
    fn missing_heatmap_and_bad_dims() {
        let r = extract_seeds(
            &chain3(),
            &maps(&[(1, &[0.1, 0.2, 0.3])]),
            &[1, 2],
            &SeedParams::default(),
        );
        assert!(matches!(r, Err(Error::MissingHeatmap(2))));
        let r = extract_seeds(
            &chain3(),
            &maps(&[(1, &[0.1, 0.2])]),
            &[1],
            &SeedParams::default(),
        );
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn mask_majority() {
        let sp = SuperpixelMap::from_labels(5, 2, &[0; 10]).unwrap();
        let mask = LabelRaster::new(5, 2, vec![1, 1, 1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!(seeds_from_mask(&sp, &mask).unwrap().labels, vec![Some(1)]);

        let mask = LabelRaster::filled(5, 2, 3);
        assert_eq!(seeds_from_mask(&sp, &mask).unwrap().labels, vec![Some(3)]);

        let mask =
            LabelRaster::new(5, 2, vec![4, 4, 2, 2, IGNORE, 255, 255, 255, 255, 255]).unwrap();
        assert_eq!(seeds_from_mask(&sp, &mask).unwrap().labels, vec![Some(2)]);

        let mask = LabelRaster::filled(5, 2, IGNORE);
        assert_eq!(seeds_from_mask(&sp, &mask).unwrap().labels, vec![None]);
    }

    #[test]
    fn text_round_trip() {
        let s = RegionSeedSet {
            labels: vec![Some(0), None, Some(7)],
            source: SeedSource::Initial,
        };
        assert_eq!(s.to_text(), "0 0\n1 -\n2 7\n");
        assert_eq!(
            RegionSeedSet::parse(&s.to_text(), SeedSource::Initial).unwrap(),
            s
        );
        assert!(RegionSeedSet::parse("0 0\n2 1\n", SeedSource::Initial).is_err());
    }
}
