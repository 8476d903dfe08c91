//! `ddf`: data generation, training, evaluation, domain-distance diagnostics,
//! heatmap export and the desk-scale reproduction sweep.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ddf_core::detector::checkpoint::Checkpoint;
use ddf_core::detector::{DetectorModel, ModelError};
use ddf_core::eval::{domain_distance, evaluate_detection, export_feature_heatmap, Level};
use ddf_core::reproduce::{
    desk_train_config, measure, Benchmark, Summary, HEADLINE_PRESETS, TEST_SEED_SALT,
};
use ddf_core::synth_data::{
    generate_dataset, load_dataset, load_image, write_dataset, DataError, Domain,
    DomainShiftParams, ImageSample, SceneConfig,
};
use ddf_core::train::{load_domains, run_training, TrainConfig, TrainError, FINAL_CHECKPOINT};
use ddf_core::Scalar;
use manifest::{beside_file, write_atomic, RunManifest, MANIFEST_NAME};

#[derive(Debug, Parser)]
#[command(
    name = "ddf",
    version,
    about = "Domain-disentangling detector: train, adapt, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Stream {
    Sha,
    Pri,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DomainFilter {
    Source,
    Target,
    All,
}

#[derive(Debug, clap::Args)]
struct DataArgs {
    #[arg(long, default_value_t = 500)]
    n_source: usize,
    #[arg(long, default_value_t = 500)]
    n_target: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fog blend weight toward gray
    #[arg(long, default_value_t = 0.5)]
    fog: f32,
    /// Gaussian pixel noise standard deviation
    #[arg(long, default_value_t = 0.05)]
    noise: f32,
    /// Box-blur radius in pixels
    #[arg(long, default_value_t = 1)]
    blur: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    brightness: f32,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a detector; presets are applied in order on top of the base config
    Train {
        /// Dataset holding the labeled source images
        #[arg(long)]
        source: PathBuf,
        /// Dataset holding the target images (annotations are ignored); defaults to --source
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with training and model settings
        #[arg(long, conflicts_with = "desk")]
        config: Option<PathBuf>,
        /// Start from the desk-scale settings instead of the defaults
        #[arg(long)]
        desk: bool,
        #[arg(long = "preset")]
        presets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Checkpoint to continue from
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
    /// mAP@0.5 of a checkpoint on a labeled dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DomainFilter::All)]
        domain: DomainFilter,
    },
    /// PAD and EMD between source and target features
    Distance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        level: Level,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Channel-mean heatmap of shared or private features over an image
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        stream: Stream,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the benchmark, train no-da/baseline/ddf, evaluate and summarise
    Reproduce {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// TOML base config; defaults to the desk-scale settings
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long = "preset")]
        presets: Vec<String>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
}

/// A bad flag value or an inconsistent combination of flags.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some()
            || c.downcast_ref::<TrainError>()
                .is_some_and(TrainError::is_config)
            || matches!(c.downcast_ref::<DataError>(), Some(DataError::Config(_)))
            || matches!(c.downcast_ref::<ModelError>(), Some(ModelError::Config(_)))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, data } => gen_data(&out, &data),
        Command::Train {
            source,
            target,
            out,
            config,
            desk,
            presets,
            seed,
            iters,
            resume,
            precision,
        } => {
            let mut cfg = base_config(config.as_deref(), desk)?;
            resolve(&mut cfg, &presets, seed, iters)?;
            let target = target.unwrap_or_else(|| source.clone());
            train(&cfg, &source, &target, &out, resume.as_deref(), precision)
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            domain,
        } => eval(&checkpoint, &dataset, &out, domain),
        Command::Distance {
            checkpoint,
            source,
            target,
            level,
            out,
            seed,
        } => distance(&checkpoint, &source, &target, level, &out, seed),
        Command::ExportFeatures {
            checkpoint,
            image,
            stream,
            out,
        } => export(&checkpoint, &image, stream, &out),
        Command::Reproduce {
            seed,
            out,
            config,
            iters,
            presets,
            precision,
        } => {
            let mut cfg = match config {
                Some(p) => read_config(&p)?,
                None => desk_train_config(),
            };
            if let Some(n) = iters {
                cfg.total_iters = n;
            }
            cfg.seed = seed;
            cfg.validate()?;
            let presets = if presets.is_empty() {
                HEADLINE_PRESETS.map(String::from).to_vec()
            } else {
                presets
            };
            for p in &presets {
                cfg.clone().apply_preset(p)?;
            }
            reproduce(&cfg, &presets, seed, &out, precision)
        }
    }
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    TrainConfig::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
}

fn base_config(path: Option<&Path>, desk: bool) -> Result<TrainConfig> {
    match path {
        Some(p) => read_config(p),
        None if desk => Ok(desk_train_config()),
        None => Ok(TrainConfig::default()),
    }
}

fn resolve(
    cfg: &mut TrainConfig,
    presets: &[String],
    seed: Option<u64>,
    iters: Option<usize>,
) -> Result<()> {
    for p in presets {
        cfg.apply_preset(p)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = iters {
        cfg.total_iters = n;
    }
    cfg.validate()?;
    Ok(())
}

fn write_json<V: Serialize>(path: &Path, v: &V) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(v)?)
}

fn generate_to(
    dir: &Path,
    seed: u64,
    n_source: usize,
    n_target: usize,
    shift: &DomainShiftParams,
    scene: &SceneConfig,
) -> Result<()> {
    let samples = generate_dataset(seed, n_source, n_target, shift, scene)?;
    write_dataset(&samples, scene.num_classes, dir)?;
    Ok(())
}

fn gen_data(out: &Path, a: &DataArgs) -> Result<()> {
    let mut m = RunManifest::start("gen-data");
    let shift = DomainShiftParams {
        fog_alpha: a.fog,
        noise_sigma: a.noise,
        blur_radius: a.blur,
        brightness_shift: a.brightness,
    };
    let scene = SceneConfig {
        resolution: a.resolution,
        num_classes: a.classes,
        ..SceneConfig::default()
    };
    shift.validate()?;
    scene.validate()?;
    generate_to(out, a.seed, a.n_source, a.n_target, &shift, &scene)?;
    m.seed = Some(a.seed);
    m.config = serde_json::json!({ "shift": shift, "scene": scene, "n_source": a.n_source, "n_target": a.n_target });
    m.add_dataset(out)?;
    m.add_output(out);
    m.finish(&out.join(MANIFEST_NAME))?;
    println!(
        "wrote {} source and {} target images to {}",
        a.n_source,
        a.n_target,
        out.display()
    );
    Ok(())
}

fn train(
    cfg: &TrainConfig,
    source: &Path,
    target: &Path,
    out: &Path,
    resume: Option<&Path>,
    precision: Precision,
) -> Result<()> {
    let mut m = RunManifest::start("train");
    m.seed = Some(cfg.seed);
    m.config = serde_json::to_value(cfg)?;
    m.add_dataset(source)?;
    if target != source {
        m.add_dataset(target)?;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    let outcome = match precision {
        Precision::F32 => run_training::<f32>(cfg, source, target, out, resume)?,
        Precision::F64 => run_training::<f64>(cfg, source, target, out, resume)?,
    };
    m.add_output(&outcome.metrics);
    m.add_output(&outcome.final_checkpoint);
    m.finish(&out.join(MANIFEST_NAME))?;
    println!(
        "trained {} steps; checkpoint {}",
        outcome.steps_run,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<DetectorModel<f64>> {
    Ok(Checkpoint::load(path)?.to_model::<f64>(None)?)
}

fn check_resolution(model_res: usize, samples: &[ImageSample], what: &Path) -> Result<()> {
    if let Some(s) = samples
        .iter()
        .find(|s| s.width != model_res || s.height != model_res)
    {
        bail!(UsageError(format!(
            "{}: image {} is {}x{}, the checkpoint expects {model_res}x{model_res}",
            what.display(),
            s.id,
            s.width,
            s.height
        )));
    }
    Ok(())
}

fn eval(checkpoint: &Path, dataset: &Path, out: &Path, domain: DomainFilter) -> Result<()> {
    let mut m = RunManifest::start("eval");
    let model = load_model(checkpoint)?;
    let data = load_dataset(dataset)?;
    let samples = match domain {
        DomainFilter::Source => data.domain(Domain::Source),
        DomainFilter::Target => data.domain(Domain::Target),
        DomainFilter::All => data.samples,
    };
    if samples.is_empty() {
        bail!(UsageError(format!(
            "{} has no images for the selected domain",
            dataset.display()
        )));
    }
    check_resolution(model.cfg.resolution, &samples, dataset)?;
    let report = evaluate_detection(&model, &samples);
    write_json(out, &report)?;
    m.config = serde_json::json!({ "checkpoint": checkpoint, "domain": format!("{domain:?}").to_lowercase() });
    m.add_dataset(dataset)?;
    m.add_output(out);
    m.finish(&beside_file(out))?;
    match report.map {
        Some(v) => println!("mAP@0.5 {v:.4} over {} images", report.num_images),
        None => println!("mAP undefined: no ground truth in {}", dataset.display()),
    }
    Ok(())
}

fn distance(
    checkpoint: &Path,
    source: &Path,
    target: &Path,
    level: Level,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let mut m = RunManifest::start("distance");
    let model = load_model(checkpoint)?;
    let s = load_dataset(source)?.domain(Domain::Source);
    let t = load_dataset(target)?.domain(Domain::Target);
    for (dir, set) in [(source, &s), (target, &t)] {
        check_resolution(model.cfg.resolution, set, dir)?;
    }
    let report = domain_distance(&model, &s, &t, level, seed)?;
    write_json(out, &report)?;
    m.seed = Some(seed);
    m.config = serde_json::json!({ "checkpoint": checkpoint, "level": level });
    m.add_dataset(source)?;
    if target != source {
        m.add_dataset(target)?;
    }
    m.add_output(out);
    m.finish(&beside_file(out))?;
    let (pad, emd) = match level {
        Level::Global => (report.pad_global, report.emd_global),
        Level::Instance => (report.pad_instance, report.emd_instance),
    };
    println!(
        "PAD {:.4} EMD {:.4}",
        pad.unwrap_or(f64::NAN),
        emd.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn export(checkpoint: &Path, image: &Path, stream: Stream, out: &Path) -> Result<()> {
    let mut m = RunManifest::start("export-features");
    let model = load_model(checkpoint)?;
    let img = load_image(image, Domain::Source)?;
    check_resolution(model.cfg.resolution, std::slice::from_ref(&img), image)?;
    let feature = match stream {
        Stream::Sha => model.shared_features(&img),
        Stream::Pri => model.private_features(&img),
    };
    let png = export_feature_heatmap(&feature, &img);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    png.save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    m.config = serde_json::json!({ "checkpoint": checkpoint, "image": image, "stream": format!("{stream:?}").to_lowercase() });
    m.add_output(out);
    m.finish(&beside_file(out))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn reproduce(
    base: &TrainConfig,
    presets: &[String],
    seed: u64,
    out: &Path,
    precision: Precision,
) -> Result<()> {
    let mut m = RunManifest::start("reproduce");
    m.seed = Some(seed);
    m.config = serde_json::to_value(base)?;
    let (shift, scene) = (DomainShiftParams::default(), SceneConfig::default());
    let train_dir = out.join("data").join("train");
    let test_dir = out.join("data").join("test");
    use ddf_core::reproduce::{TEST_PER_DOMAIN, TRAIN_PER_DOMAIN};
    generate_to(
        &train_dir,
        seed,
        TRAIN_PER_DOMAIN,
        TRAIN_PER_DOMAIN,
        &shift,
        &scene,
    )?;
    generate_to(
        &test_dir,
        seed ^ TEST_SEED_SALT,
        TEST_PER_DOMAIN,
        TEST_PER_DOMAIN,
        &shift,
        &scene,
    )?;
    m.add_dataset(&train_dir)?;
    m.add_dataset(&test_dir)?;

    let (train_source, train_target) = load_domains(&train_dir, &train_dir)?;
    let test = load_dataset(&test_dir)?;
    let bench = Benchmark {
        seed,
        train_source,
        train_target,
        test_source: test.domain(Domain::Source),
        test_target: test.domain(Domain::Target),
    };
    let mut summary = Summary::default();
    for preset in presets {
        let mut cfg = base.clone();
        cfg.apply_preset(preset)?;
        let run_dir = out.join("runs").join(preset);
        log::info!("training {preset} into {}", run_dir.display());
        fs::create_dir_all(&run_dir)?;
        write_atomic(
            &run_dir.join("config.toml"),
            cfg.to_toml_string().as_bytes(),
        )?;
        let t0 = std::time::Instant::now();
        let outcome = match precision {
            Precision::F32 => run_training::<f32>(&cfg, &train_dir, &train_dir, &run_dir, None)?,
            Precision::F64 => run_training::<f64>(&cfg, &train_dir, &train_dir, &run_dir, None)?,
        };
        let secs = t0.elapsed().as_secs_f64();
        let ck = Checkpoint::load(&run_dir.join(FINAL_CHECKPOINT))?;
        let mut r = match precision {
            Precision::F32 => measured::<f32>(&ck, preset, &bench)?,
            Precision::F64 => measured::<f64>(&ck, preset, &bench)?,
        };
        r.train_seconds = secs;
        write_json(&run_dir.join("report.json"), &r)?;
        m.add_output(&outcome.final_checkpoint);
        summary.results.push(r);
    }
    let table = summary.table();
    write_json(&out.join("summary.json"), &summary)?;
    write_atomic(&out.join("summary.txt"), table.as_bytes())?;
    m.add_output(&out.join("summary.json"));
    m.add_output(&out.join("summary.txt"));
    m.finish(&out.join(MANIFEST_NAME))?;
    print!("{table}");
    Ok(())
}

fn measured<T: Scalar>(
    ck: &Checkpoint,
    preset: &str,
    bench: &Benchmark,
) -> Result<ddf_core::reproduce::PresetResult> {
    let model = ck.to_model::<T>(None)?;
    Ok(measure(&model, preset, bench))
}
