use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rayon::prelude::*;

use mcof::dataset::Dataset;
use mcof::eval;
use mcof::io;
use mcof::pipeline::{self, CheckpointWriter, LoopConfig, LoopMode};
use mcof::pixel::{self, PixelClassifierParams};
use mcof::raster::{LabelRaster, IGNORE};
use mcof::region::{self, RegionClassifierParams};
use mcof::saliency::{self, RefinedObjectRegions};
use mcof::seeding::{self, RegionSeedSet};
use mcof::superpixel::{self, SuperpixelMap};
use mcof::synth::{self, SynthSpec};
use mcof::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mcof",
    version,
    about = "Iterative weakly-supervised segmentation"
)]
struct Cli {
    /// Root random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// TOML file overriding loop and stage settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl DatasetArgs {
    fn load(&self, seed: u64) -> Result<(Dataset, LoopConfig)> {
        let mut config = match &self.config {
            Some(p) => LoopConfig::load(p)?,
            None => LoopConfig::default(),
        };
        config.seed = seed;
        Ok((Dataset::load(&self.manifest)?, config))
    }
}

#[derive(Args)]
struct CrfArgs {
    #[arg(long)]
    crf_iters: Option<usize>,
    #[arg(long)]
    crf_wsmooth: Option<f64>,
    #[arg(long)]
    crf_wappear: Option<f64>,
    #[arg(long)]
    crf_theta_alpha: Option<f64>,
    #[arg(long)]
    crf_theta_beta: Option<f64>,
    #[arg(long)]
    crf_theta_gamma: Option<f64>,
}

impl CrfArgs {
    fn apply(&self, config: &mut LoopConfig) {
        let crf = &mut config.crf;
        crf.iterations = self.crf_iters.unwrap_or(crf.iterations);
        crf.w_smooth = self.crf_wsmooth.unwrap_or(crf.w_smooth);
        crf.w_appear = self.crf_wappear.unwrap_or(crf.w_appear);
        crf.theta_alpha = self.crf_theta_alpha.unwrap_or(crf.theta_alpha);
        crf.theta_beta = self.crf_theta_beta.unwrap_or(crf.theta_beta);
        crf.theta_gamma = self.crf_theta_gamma.unwrap_or(crf.theta_gamma);
    }
}

#[derive(Subcommand)]
enum Command {
    /// Segment every image into superpixels.
    Superpixel {
        #[command(flatten)]
        data: DatasetArgs,
    },
    /// Seed superpixels from heatmaps.
    Seed {
        #[command(flatten)]
        data: DatasetArgs,
    },
    /// Train the region classifier on heatmap seeds, or on seeds voted from
    /// masks in `--masks`.
    TrainRegion {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Hidden layer width; 0 for a linear classifier.
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Predict object regions and refine single-class images with saliency.
    Refine {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        region_params: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
        #[command(flatten)]
        crf: CrfArgs,
    },
    /// Train the pixel classifier on label masks named after each image.
    TrainPixel {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        supervision: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Predict masks with a trained pixel classifier.
    Predict {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        pixel_params: PathBuf,
        /// Smooth predictions with the CRF.
        #[arg(long)]
        crf: bool,
    },
    /// Run the full iterative loop.
    Run {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<LoopMode>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        no_saliency: bool,
    },
    /// Score masks named after each image against the manifest ground truth.
    Eval {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        masks: PathBuf,
    },
    /// Generate the synthetic benchmark.
    Synth {
        /// TOML file with generator settings; the flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        /// Width and height in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        multi_class_fraction: Option<f64>,
    },
    /// Blend a label mask over an image.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<LoopMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn segment_all(dataset: &Dataset, config: &LoopConfig) -> Result<Vec<SuperpixelMap>> {
    dataset
        .images
        .par_iter()
        .map(|img| superpixel::segment(&img.image, &config.superpixel))
        .collect()
}

fn load_named_masks(dataset: &Dataset, dir: &Path) -> Result<Vec<LabelRaster>> {
    dataset
        .images
        .iter()
        .map(|img| io::load_labels(dir.join(format!("{}.png", img.name))))
        .collect()
}

fn execute(cli: Cli) -> Result<()> {
    let out = &cli.out;
    match cli.command {
        Command::Superpixel { data } => {
            let (dataset, config) = data.load(cli.seed)?;
            let dir = out.join("superpixels");
            for (img, sp) in dataset.images.iter().zip(segment_all(&dataset, &config)?) {
                sp.save(&dir, &img.name)?;
                info!("{}: {} superpixels", img.name, sp.region_count());
            }
        }
        Command::Seed { data } => {
            let (dataset, config) = data.load(cli.seed)?;
            let dir = out.join("seeds");
            for (img, sp) in dataset.images.iter().zip(segment_all(&dataset, &config)?) {
                let seeds =
                    seeding::extract_seeds(&sp, &img.heatmaps, &img.labels, &config.seeding)?;
                seeds.save(&dir, &img.name, &sp)?;
            }
        }
        Command::TrainRegion {
            data,
            masks,
            epochs,
            lr,
            hidden,
        } => {
            let (dataset, mut config) = data.load(cli.seed)?;
            config.region.epochs = epochs.unwrap_or(config.region.epochs);
            config.region.lr = lr.unwrap_or(config.region.lr);
            if let Some(h) = hidden {
                config.region.hidden = (h > 0).then_some(h);
            }
            let sps = segment_all(&dataset, &config)?;
            let features = dataset
                .images
                .iter()
                .zip(&sps)
                .map(|(img, sp)| region::extract_features(&img.image, sp))
                .collect::<Result<Vec<_>>>()?;
            let seeds: Vec<RegionSeedSet> = match &masks {
                Some(dir) => load_named_masks(&dataset, dir)?
                    .iter()
                    .zip(&sps)
                    .map(|(m, sp)| seeding::seeds_from_mask(sp, m))
                    .collect::<Result<_>>()?,
                None => dataset
                    .images
                    .iter()
                    .zip(&sps)
                    .map(|(img, sp)| {
                        seeding::extract_seeds(sp, &img.heatmaps, &img.labels, &config.seeding)
                    })
                    .collect::<Result<_>>()?,
            };
            let (params, report) = region::train_region_classifier(
                &features,
                &seeds,
                &pipeline::required_classes(&dataset),
                dataset.class_count,
                &config.region,
                cli.seed,
            )?;
            params.save(out.join("params").join("region.f32r"))?;
            println!(
                "loss {:.6} -> {:.6}",
                report.initial_loss, report.final_loss
            );
        }
        Command::Refine {
            data,
            region_params,
            bins,
            crf,
        } => {
            let (dataset, mut config) = data.load(cli.seed)?;
            crf.apply(&mut config);
            config.crf.validate()?;
            let bins = bins.unwrap_or(config.histogram_bins);
            let params = RegionClassifierParams::load(region_params)?;
            let sps = segment_all(&dataset, &config)?;
            for (img, sp) in dataset.images.iter().zip(&sps) {
                let features = region::extract_features(&img.image, sp)?;
                let objects = region::predict_regions(&features, &params, &img.labels);
                objects.save(out.join("regions"), &img.name, sp)?;
                let refined = if img.is_single_class() {
                    let r = saliency::refine(
                        &img.image,
                        sp,
                        &objects,
                        img.saliency.as_ref(),
                        &img.labels,
                        bins,
                        &config.crf,
                    );
                    match r {
                        Err(Error::EmptyPartition) => {
                            RefinedObjectRegions::unrefined(&objects, sp.width(), sp.height())
                        }
                        other => {
                            let r = other?;
                            io::save_scalar(
                                out.join("refined")
                                    .join(format!("{}_posterior.f32r", img.name)),
                                &r.posterior,
                            )?;
                            r
                        }
                    }
                } else {
                    RefinedObjectRegions::unrefined(&objects, sp.width(), sp.height())
                };
                refined.labels.save(out.join("refined"), &img.name, sp)?;
            }
        }
        Command::TrainPixel {
            data,
            supervision,
            epochs,
            lr,
        } => {
            let (dataset, mut config) = data.load(cli.seed)?;
            config.pixel.epochs = epochs.unwrap_or(config.pixel.epochs);
            config.pixel.lr = lr.unwrap_or(config.pixel.lr);
            let sps = segment_all(&dataset, &config)?;
            let features = dataset
                .images
                .iter()
                .zip(&sps)
                .map(|(img, sp)| pixel::extract_pixel_features(&img.image, sp))
                .collect::<Result<Vec<_>>>()?;
            let masks = load_named_masks(&dataset, &supervision)?;
            let (params, report) = pixel::train_pixel_classifier(
                &features,
                &masks,
                &pipeline::required_classes(&dataset),
                dataset.class_count,
                &config.pixel,
                cli.seed,
            )?;
            params.save(out.join("params").join("pixel.f32r"))?;
            println!(
                "loss {:.6} -> {:.6}",
                report.initial_loss, report.final_loss
            );
        }
        Command::Predict {
            data,
            pixel_params,
            crf,
        } => {
            let (dataset, config) = data.load(cli.seed)?;
            let params = PixelClassifierParams::load(pixel_params)?;
            let sps = segment_all(&dataset, &config)?;
            for (img, sp) in dataset.images.iter().zip(&sps) {
                let features = pixel::extract_pixel_features(&img.image, sp)?;
                let crf_params = crf.then_some(&config.crf);
                let mask = pixel::predict_mask(
                    &img.image,
                    &features,
                    &params,
                    Some(&img.labels),
                    crf_params,
                )?;
                io::save_labels(out.join("masks").join(format!("{}.png", img.name)), &mask)?;
            }
        }
        Command::Run {
            data,
            mode,
            iters,
            no_saliency,
        } => {
            let (dataset, mut config) = data.load(cli.seed)?;
            config.mode = mode.unwrap_or(config.mode);
            config.max_iterations = iters.unwrap_or(config.max_iterations);
            config.use_saliency &= !no_saliency;
            let mut writer = CheckpointWriter::new(out);
            let history = pipeline::run(&dataset, &config, &mut writer)?;
            for m in history.iter().filter_map(|s| s.metrics.as_ref()) {
                println!("iteration {}: pixelnet mIoU {:.4}", m.iteration, m.pixelnet);
            }
            if !dataset.has_ground_truth() {
                error!("no ground truth in the manifest; metrics were not computed");
            }
        }
        Command::Eval { data, masks } => {
            let (dataset, _) = data.load(cli.seed)?;
            if !dataset.has_ground_truth() {
                return Err(Error::Config(
                    "manifest has no ground truth for every image".into(),
                ));
            }
            let predictions = load_named_masks(&dataset, &masks)?;
            let gt: Vec<LabelRaster> = dataset
                .images
                .iter()
                .map(|i| i.ground_truth.clone().expect("checked above"))
                .collect();
            let report = eval::evaluate(&predictions, &gt, dataset.class_count)?;
            let text = report.to_text();
            io::atomic_write(out.join("eval.csv"), text.as_bytes())?;
            print!("{text}");
        }
        Command::Synth {
            spec,
            count,
            size,
            classes,
            multi_class_fraction,
        } => {
            let mut spec = match spec {
                Some(path) => SynthSpec::load(path)?,
                None => SynthSpec::default(),
            };
            spec.image_count = count.unwrap_or(spec.image_count);
            spec.width = size.unwrap_or(spec.width);
            spec.height = size.unwrap_or(spec.height);
            spec.object_classes = classes.unwrap_or(spec.object_classes);
            spec.multi_class_fraction = multi_class_fraction.unwrap_or(spec.multi_class_fraction);
            synth::generate(&spec, cli.seed)?.write(out)?;
            println!("{}", out.join("manifest.txt").display());
        }
        Command::Overlay {
            image,
            mask,
            output,
        } => {
            let image = io::load_image(image)?;
            let mask = io::load_labels(mask)?;
            if mask.data().contains(&IGNORE) {
                info!("ignore pixels are drawn transparent");
            }
            io::save_image(output, &eval::render_overlay(&image, &mask)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        error!("thread pool: {e}");
        return ExitCode::from(1);
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
