//! The iterative loop: seed superpixels, train the region classifier, predict
//! object regions, refine single-class images with saliency at t=0, train
//! the pixel classifier, predict masks, and derive the next seeds from them.
//!
//! The direct-iterative baseline shares iteration 0 and afterwards retrains
//! the pixel classifier on its own previous masks.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::CrfParams;
use crate::dataset::{Dataset, DatasetImage};
use crate::error::{Error, Result};
use crate::eval::{self, IterationMetrics};
use crate::io;
use crate::pixel::{self, PixelClassifierParams, PixelFeatures, PixelTrainConfig};
use crate::raster::{ClassId, LabelRaster, BACKGROUND, IGNORE};
use crate::region::{
    self, ObjectRegionSet, RegionClassifierParams, RegionFeature, RegionTrainConfig,
};
use crate::saliency::{self, RefinedObjectRegions, DEFAULT_BINS};
use crate::seeding::{self, RegionSeedSet, SeedParams};
use crate::superpixel::{self, FhParams, SuperpixelMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopMode {
    #[default]
    Mcof,
    Direct,
}

impl FromStr for LoopMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcof" => Ok(LoopMode::Mcof),
            "direct" => Ok(LoopMode::Direct),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?}, expected mcof or direct"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub max_iterations: usize,
    pub mode: LoopMode,
    pub use_saliency: bool,
    /// Stop once the fraction of pixels whose mask label changed between
    /// consecutive iterations drops below this value.
    pub early_stop: Option<f64>,
    /// Root seed; every stage draws from its own stream.
    pub seed: u64,
    pub histogram_bins: usize,
    /// CRF smoothing of pixel classifier output.
    pub pixel_crf: bool,
    pub superpixel: FhParams,
    pub seeding: SeedParams,
    pub region: RegionTrainConfig,
    pub pixel: PixelTrainConfig,
    pub crf: CrfParams,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            mode: LoopMode::Mcof,
            use_saliency: true,
            early_stop: None,
            seed: 0,
            histogram_bins: DEFAULT_BINS,
            pixel_crf: false,
            superpixel: FhParams::small_image(),
            seeding: SeedParams::default(),
            region: RegionTrainConfig::default(),
            pixel: PixelTrainConfig::default(),
            crf: CrfParams::default(),
        }
    }
}

impl LoopConfig {
    /// Parses TOML key/value text; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be >= 1".into()));
        }
        self.superpixel.validate()?;
        self.seeding.validate()?;
        self.crf.validate()
    }

    fn stage_seed(&self, iteration: usize, stage: Stage) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((iteration as u64) << 8 | stage as u64);
        rng.gen()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Seeds,
    TrainRegion,
    PredictRegion,
    Refine,
    TrainPixel,
    PredictPixel,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Seeds => "seeds",
            Stage::TrainRegion => "train-region",
            Stage::PredictRegion => "predict-region",
            Stage::Refine => "refine",
            Stage::TrainPixel => "train-pixel",
            Stage::PredictPixel => "predict-pixel",
        })
    }
}

/// Everything produced by one pass of the loop. Region-level artifacts are
/// absent for direct-iterative passes after the first.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationState {
    pub t: usize,
    pub seeds: Vec<RegionSeedSet>,
    pub object_regions: Option<Vec<ObjectRegionSet>>,
    pub refined: Option<Vec<RefinedObjectRegions>>,
    pub masks: Vec<LabelRaster>,
    pub region_params: Option<RegionClassifierParams>,
    pub pixel_params: PixelClassifierParams,
    /// Stages executed, in order.
    pub stages: Vec<Stage>,
    pub metrics: Option<IterationMetrics>,
}

/// Per-image inputs that stay fixed across iterations.
pub struct Prepared {
    pub superpixels: Vec<SuperpixelMap>,
    pub region_features: Vec<Vec<RegionFeature>>,
    pub pixel_features: Vec<PixelFeatures>,
}

pub fn prepare(dataset: &Dataset, config: &LoopConfig) -> Result<Prepared> {
    let per_image: Vec<(SuperpixelMap, Vec<RegionFeature>, PixelFeatures)> = dataset
        .images
        .par_iter()
        .map(|img| {
            let sp = superpixel::segment(&img.image, &config.superpixel)?;
            let rf = region::extract_features(&img.image, &sp)?;
            let pf = pixel::extract_pixel_features(&img.image, &sp)?;
            Ok((sp, rf, pf))
        })
        .collect::<Result<_>>()?;
    let mut prepared = Prepared {
        superpixels: Vec::with_capacity(per_image.len()),
        region_features: Vec::with_capacity(per_image.len()),
        pixel_features: Vec::with_capacity(per_image.len()),
    };
    for (sp, rf, pf) in per_image {
        prepared.superpixels.push(sp);
        prepared.region_features.push(rf);
        prepared.pixel_features.push(pf);
    }
    Ok(prepared)
}

/// Every image-level class plus background.
pub fn required_classes(dataset: &Dataset) -> BTreeSet<ClassId> {
    let mut set: BTreeSet<ClassId> = dataset
        .images
        .iter()
        .flat_map(|i| i.labels.iter().copied())
        .collect();
    set.insert(BACKGROUND);
    set
}

/// The first pass needs every class. Later passes train on the classes that
/// survived and log the ones that vanished from every image.
fn still_required(
    required: &BTreeSet<ClassId>,
    present: &BTreeSet<ClassId>,
    t: usize,
    what: &str,
) -> BTreeSet<ClassId> {
    if t == 0 {
        return required.clone();
    }
    let lost: Vec<_> = required.difference(present).collect();
    if !lost.is_empty() {
        warn!("t={t} classes {lost:?} are missing from every {what}");
    }
    required.intersection(present).copied().collect()
}

/// Renders region labels, drawing unlabeled regions as background.
fn render_seeds(seeds: &RegionSeedSet, sp: &SuperpixelMap) -> LabelRaster {
    seeds.render(sp, BACKGROUND)
}

fn miou(dataset: &Dataset, masks: &[LabelRaster]) -> Result<Option<f64>> {
    if !dataset.has_ground_truth() {
        return Ok(None);
    }
    let gt: Vec<LabelRaster> = dataset
        .images
        .iter()
        .map(|i| i.ground_truth.clone().expect("checked above"))
        .collect();
    Ok(Some(eval::evaluate(masks, &gt, dataset.class_count)?.miou))
}

fn initial_seeds(
    dataset: &Dataset,
    prep: &Prepared,
    params: &SeedParams,
) -> Result<Vec<RegionSeedSet>> {
    dataset
        .images
        .par_iter()
        .zip(&prep.superpixels)
        .map(|(img, sp)| seeding::extract_seeds(sp, &img.heatmaps, &img.labels, params))
        .collect()
}

fn refine_one(
    img: &DatasetImage,
    sp: &SuperpixelMap,
    o: &ObjectRegionSet,
    config: &LoopConfig,
) -> Result<RefinedObjectRegions> {
    let (w, h) = img.image.dims();
    if !config.use_saliency || !img.is_single_class() {
        return Ok(RefinedObjectRegions::unrefined(o, w, h));
    }
    match saliency::refine(
        &img.image,
        sp,
        o,
        img.saliency.as_ref(),
        &img.labels,
        config.histogram_bins,
        &config.crf,
    ) {
        Err(Error::EmptyPartition) => {
            warn!(
                "{}: object regions cover nothing or everything, refinement skipped",
                img.name
            );
            Ok(RefinedObjectRegions::unrefined(o, w, h))
        }
        other => other,
    }
}

fn lap(t: usize, stage: Stage, clock: &mut Instant) {
    debug!("t={t} {stage} took {:.2?}", clock.elapsed());
    *clock = Instant::now();
}

/// Runs one iteration given its seeds and, for direct passes after the
/// first, the previous masks used as pixel supervision.
fn run_iteration(
    dataset: &Dataset,
    prep: &Prepared,
    config: &LoopConfig,
    t: usize,
    seeds: Vec<RegionSeedSet>,
    previous_masks: Option<&[LabelRaster]>,
) -> Result<IterationState> {
    let required = required_classes(dataset);
    let classes = dataset.class_count;
    let mut stages = vec![Stage::Seeds];
    let direct = config.mode == LoopMode::Direct && t > 0;
    let mut clock = Instant::now();

    let (region_params, object_regions, refined, supervision) = if direct {
        let masks = previous_masks.expect("direct passes after the first have previous masks");
        (None, None, None, masks.to_vec())
    } else {
        stages.push(Stage::TrainRegion);
        let seeded = seeds.iter().flat_map(|s| s.labeled().map(|(_, c)| c)).collect();
        let (params, report) = region::train_region_classifier(
            &prep.region_features,
            &seeds,
            &still_required(&required, &seeded, t, "seeds"),
            classes,
            &config.region,
            config.stage_seed(t, Stage::TrainRegion),
        )?;
        lap(t, Stage::TrainRegion, &mut clock);
        info!(
            "t={t} region classifier loss {:.4} -> {:.4}",
            report.initial_loss, report.final_loss
        );
        stages.push(Stage::PredictRegion);
        let objects: Vec<ObjectRegionSet> = dataset
            .images
            .par_iter()
            .zip(&prep.region_features)
            .map(|(img, f)| region::predict_regions(f, &params, &img.labels))
            .collect();
        lap(t, Stage::PredictRegion, &mut clock);
        let refined: Vec<RefinedObjectRegions> = if t == 0 {
            stages.push(Stage::Refine);
            dataset
                .images
                .par_iter()
                .zip(&prep.superpixels)
                .zip(&objects)
                .map(|((img, sp), o)| refine_one(img, sp, o, config))
                .collect::<Result<Vec<_>>>()
                .inspect(|_| lap(t, Stage::Refine, &mut clock))?
        } else {
            dataset
                .images
                .iter()
                .zip(&objects)
                .map(|(img, o)| {
                    RefinedObjectRegions::unrefined(o, img.image.width(), img.image.height())
                })
                .collect()
        };
        let supervision = refined
            .iter()
            .zip(&prep.superpixels)
            .map(|(r, sp)| r.labels.render(sp, IGNORE))
            .collect();
        (Some(params), Some(objects), Some(refined), supervision)
    };

    stages.push(Stage::TrainPixel);
    let supervised = supervision
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .filter(|&c| c != IGNORE)
        .collect();
    let (pixel_params, report) = pixel::train_pixel_classifier(
        &prep.pixel_features,
        &supervision,
        &still_required(&required, &supervised, t, "supervision"),
        classes,
        &config.pixel,
        config.stage_seed(t, Stage::TrainPixel),
    )?;
    lap(t, Stage::TrainPixel, &mut clock);
    info!(
        "t={t} pixel classifier loss {:.4} -> {:.4}",
        report.initial_loss, report.final_loss
    );
    stages.push(Stage::PredictPixel);
    let crf = config.pixel_crf.then_some(&config.crf);
    let masks: Vec<LabelRaster> = dataset
        .images
        .par_iter()
        .zip(&prep.pixel_features)
        .map(|(img, f)| pixel::predict_mask(&img.image, f, &pixel_params, Some(&img.labels), crf))
        .collect::<Result<_>>()?;
    lap(t, Stage::PredictPixel, &mut clock);

    let metrics = match miou(dataset, &masks)? {
        Some(pixelnet) => {
            let rendered: Vec<LabelRaster> = seeds
                .iter()
                .zip(&prep.superpixels)
                .map(|(s, sp)| render_seeds(s, sp))
                .collect();
            let seeds_miou = miou(dataset, &rendered)?.expect("ground truth present");
            let regionnet = match &object_regions {
                Some(o) => {
                    let r: Vec<LabelRaster> = o
                        .iter()
                        .zip(&prep.superpixels)
                        .map(|(o, sp)| o.render(sp))
                        .collect();
                    miou(dataset, &r)?
                }
                None => None,
            };
            let refined_miou = match (&refined, t) {
                (Some(r), 0) => {
                    let r: Vec<LabelRaster> = r
                        .iter()
                        .zip(&prep.superpixels)
                        .map(|(r, sp)| render_seeds(&r.labels, sp))
                        .collect();
                    miou(dataset, &r)?
                }
                _ => None,
            };
            Some(IterationMetrics {
                iteration: t,
                seeds: seeds_miou,
                regionnet,
                refined: refined_miou,
                pixelnet,
            })
        }
        None => None,
    };
    if let Some(m) = &metrics {
        info!(
            "t={t} mIoU seeds {:.4} regionnet {:?} refined {:?} pixelnet {:.4}",
            m.seeds, m.regionnet, m.refined, m.pixelnet
        );
    }

    Ok(IterationState {
        t,
        seeds,
        object_regions,
        refined,
        masks,
        region_params,
        pixel_params,
        stages,
        metrics,
    })
}

fn mask_change(a: &[LabelRaster], b: &[LabelRaster]) -> f64 {
    let (mut changed, mut total) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        changed += x
            .data()
            .iter()
            .zip(y.data())
            .filter(|(p, q)| p != q)
            .count();
        total += x.len();
    }
    changed as f64 / total.max(1) as f64
}

fn check_inputs(dataset: &Dataset, config: &LoopConfig) -> Result<()> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.use_saliency {
        if let Some(img) = dataset
            .images
            .iter()
            .find(|i| i.is_single_class() && i.saliency.is_none())
        {
            return Err(Error::Config(format!(
                "saliency refinement is enabled but {} has no saliency map",
                img.name
            )));
        }
    }
    Ok(())
}

/// Hooks called after each iteration, e.g. to write checkpoints.
pub trait IterationSink {
    fn iteration_done(
        &mut self,
        dataset: &Dataset,
        prep: &Prepared,
        state: &IterationState,
    ) -> Result<()>;
}

impl IterationSink for () {
    fn iteration_done(&mut self, _: &Dataset, _: &Prepared, _: &IterationState) -> Result<()> {
        Ok(())
    }
}

/// Runs the loop in `config.mode` and returns the history of iterations.
pub fn run(
    dataset: &Dataset,
    config: &LoopConfig,
    sink: &mut dyn IterationSink,
) -> Result<Vec<IterationState>> {
    check_inputs(dataset, config)?;
    let prep = prepare(dataset, config)?;
    let mut history: Vec<IterationState> = Vec::with_capacity(config.max_iterations);
    for t in 0..config.max_iterations {
        let (seeds, previous) = match history.last() {
            None => (initial_seeds(dataset, &prep, &config.seeding)?, None),
            Some(prev) => {
                let seeds = prev
                    .masks
                    .par_iter()
                    .zip(&prep.superpixels)
                    .map(|(m, sp)| seeding::seeds_from_mask(sp, m))
                    .collect::<Result<_>>()?;
                (seeds, Some(prev.masks.as_slice()))
            }
        };
        let state = run_iteration(dataset, &prep, config, t, seeds, previous)?;
        sink.iteration_done(dataset, &prep, &state)?;
        let change = history.last().map(|p| mask_change(&p.masks, &state.masks));
        history.push(state);
        if let (Some(limit), Some(change)) = (config.early_stop, change) {
            if change < limit {
                info!(
                    "t={t} masks changed on {:.3}% of pixels, stopping",
                    change * 100.0
                );
                break;
            }
        }
    }
    Ok(history)
}

pub fn run_mcof(dataset: &Dataset, config: &LoopConfig) -> Result<Vec<IterationState>> {
    let config = LoopConfig {
        mode: LoopMode::Mcof,
        ..config.clone()
    };
    run(dataset, &config, &mut ())
}

pub fn run_direct_iterative(dataset: &Dataset, config: &LoopConfig) -> Result<Vec<IterationState>> {
    let config = LoopConfig {
        mode: LoopMode::Direct,
        ..config.clone()
    };
    run(dataset, &config, &mut ())
}

/// Counts labels outside the image's label set (plus background) across
/// every artifact of an iteration.
pub fn class_closure_violations(
    dataset: &Dataset,
    prep: &Prepared,
    state: &IterationState,
) -> usize {
    let mut bad = 0;
    for (i, img) in dataset.images.iter().enumerate() {
        let ok = |c: ClassId| c == BACKGROUND || img.labels.contains(&c);
        let region_bad =
            |labels: &mut dyn Iterator<Item = ClassId>| labels.filter(|&c| !ok(c)).count();
        bad += region_bad(&mut state.seeds[i].labels.iter().flatten().copied());
        if let Some(o) = &state.object_regions {
            bad += region_bad(&mut o[i].labels.iter().copied());
        }
        if let Some(r) = &state.refined {
            bad += region_bad(&mut r[i].labels.labels.iter().flatten().copied());
        }
        bad += state.masks[i].data().iter().filter(|&&c| !ok(c)).count();
        // Rendered rasters only repeat region labels, but check them too.
        bad += state.seeds[i]
            .render(&prep.superpixels[i], BACKGROUND)
            .data()
            .iter()
            .filter(|&&c| !ok(c))
            .count();
    }
    bad
}

/// Writes each iteration's artifacts under `out/iterN/` and the running
/// metrics table to `out/metrics.csv`.
pub struct CheckpointWriter {
    pub out: PathBuf,
    pub overlays: bool,
    metrics: Vec<IterationMetrics>,
}

impl CheckpointWriter {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            overlays: true,
            metrics: Vec::new(),
        }
    }

    pub fn iteration_dir(&self, t: usize) -> PathBuf {
        self.out.join(format!("iter{t}"))
    }
}

impl IterationSink for CheckpointWriter {
    fn iteration_done(
        &mut self,
        dataset: &Dataset,
        prep: &Prepared,
        state: &IterationState,
    ) -> Result<()> {
        let dir = self.iteration_dir(state.t);
        for (i, img) in dataset.images.iter().enumerate() {
            let sp = &prep.superpixels[i];
            state.seeds[i].save(dir.join("seeds"), &img.name, sp)?;
            if let Some(o) = &state.object_regions {
                o[i].save(dir.join("regions"), &img.name, sp)?;
            }
            if let Some(r) = &state.refined {
                let refined_dir = dir.join("refined");
                r[i].labels.save(&refined_dir, &img.name, sp)?;
                if state.t == 0 && is_refinable(img) {
                    io::save_scalar(
                        refined_dir.join(format!("{}_posterior.f32r", img.name)),
                        &r[i].posterior,
                    )?;
                }
            }
            io::save_labels(
                dir.join("masks").join(format!("{}.png", img.name)),
                &state.masks[i],
            )?;
            if self.overlays {
                let overlay = eval::render_overlay(&img.image, &state.masks[i])?;
                io::save_image(
                    dir.join("overlays").join(format!("{}.png", img.name)),
                    &overlay,
                )?;
            }
        }
        let params = dir.join("params");
        if let Some(p) = &state.region_params {
            p.save(params.join("region.f32r"))?;
        }
        state.pixel_params.save(params.join("pixel.f32r"))?;
        let stages: Vec<String> = state.stages.iter().map(ToString::to_string).collect();
        io::atomic_write(
            dir.join("stages.txt"),
            format!("{}\n", stages.join("\n")).as_bytes(),
        )?;

        match &state.metrics {
            Some(m) => {
                io::atomic_write(
                    dir.join("metrics.csv"),
                    eval::iteration_report(&[m.clone()]).as_bytes(),
                )?;
                self.metrics.push(m.clone());
                io::atomic_write(
                    self.out.join("metrics.csv"),
                    eval::iteration_report(&self.metrics).as_bytes(),
                )?;
            }
            None => {
                let text = "iteration,stage,miou\n# no ground truth: metrics unavailable\n";
                io::atomic_write(dir.join("metrics.csv"), text.as_bytes())?;
            }
        }
        Ok(())
    }
}

fn is_refinable(img: &DatasetImage) -> bool {
    img.is_single_class() && img.saliency.is_some()
}
