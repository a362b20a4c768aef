//! `fusionpaint` command-line pipelines.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration, 3 scene
//! generation, 4 input data or file format, 5 shape mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use fusionpaint::formats;
use fusionpaint::fusion::FusionParams;
use fusionpaint::painting::{corrupt_scores, paint_2d, paint_3d, Box3D, Corruption};
use fusionpaint::synthbench::{build_dataset, Dataset, Manifest, SynthConfig};
use fusionpaint::trainer::{
    self, ap_report_json, arm_table, evaluate_arm, prepare_scenes, run_benchmark, scene_gate,
    BenchmarkConfig, Modality, TrainConfig,
};
use fusionpaint::{Error, Exec};

#[derive(Parser)]
#[command(
    name = "fusionpaint",
    version,
    about = "Semantic painting with a learned 2D/3D label gate"
)]
struct Cli {
    /// Run every kernel on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Dataset config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Base scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Paint one scene's points from its corrupted mask and/or its boxes.
    Paint {
        /// Scene directory inside a dataset.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        mode: PaintMode,
        /// Dataset manifest; defaults to `<scene>/../../manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write voxel batches and gate values.
    Fuse(ModelArgs),
    /// Train one arm.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Training config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        modality: Option<Modality>,
    },
    /// Compare all four arms on the validation split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Benchmark config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate this checkpoint under every arm instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write gated point clouds (.fppt).
    Export(ModelArgs),
}

#[derive(clap::Args)]
struct ModelArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training config (JSON) supplying the voxel grid.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Only this scene id; all scenes otherwise.
    #[arg(long)]
    scene: Option<String>,
    #[arg(long, default_value = "fused-attention")]
    modality: Modality,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PaintMode {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
    Both,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Json { .. } => 2,
            Error::Generation(_) => 3,
            Error::Data(_)
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::NonFiniteLoss { .. } => 4,
            Error::Shape(_) => 5,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn shape_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: 5,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Reads an optional JSON config; any failure is a configuration error.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => formats::read_json(p).map_err(|e| config_failure(e.to_string())),
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(config_failure(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_failure(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn open_dataset(path: &Path) -> CliResult<Dataset> {
    require_dir(path, "dataset")?;
    Dataset::open(path).map_err(|e| match e {
        Error::Io { .. } => config_failure(e.to_string()),
        e => e.into(),
    })
}

fn load_checkpoint(path: &Path, dataset: &Dataset) -> CliResult<FusionParams> {
    require_file(path, "checkpoint")?;
    let params = FusionParams::from_tensors(&formats::read_checkpoint(path)?)?;
    if params.config.m != dataset.m() {
        return Err(shape_failure(format!(
            "checkpoint {} has {} classes, dataset {}",
            path.display(),
            params.config.m,
            dataset.m()
        )));
    }
    Ok(params)
}

fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>, exec: Exec) -> CliResult {
    let mut cfg: SynthConfig = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let manifest = build_dataset(&cfg, out, exec)?;
    println!(
        "wrote {} scenes to {}",
        manifest.scenes.len(),
        out.display()
    );
    Ok(())
}

fn cmd_paint(scene: &Path, mode: PaintMode, manifest: Option<&Path>, out: &Path) -> CliResult {
    require_dir(scene, "scene")?;
    let manifest_path = match manifest {
        Some(p) => p.to_path_buf(),
        None => scene.join("../../manifest.json"),
    };
    require_file(&manifest_path, "manifest")?;
    let manifest: Manifest = formats::read_json(&manifest_path)?;
    manifest.validate()?;
    let name = scene
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| config_failure("scene path has no directory name"))?;
    let entry = manifest
        .scenes
        .iter()
        .find(|e| e.id == name)
        .ok_or_else(|| config_failure(format!("scene {name} is not in the manifest")))?;
    let points = formats::read_points(&scene.join("points.bin"))?;
    if matches!(mode, PaintMode::TwoD | PaintMode::Both) {
        let calib = formats::read_json(&scene.join("calib.json"))?;
        let mask = formats::read_pgm(&scene.join("mask_corrupt.pgm"), manifest.m as u32)?;
        let p2d = paint_2d(&points, &mask, &calib)?;
        formats::write_scores(&out.join("p2d.fpsc"), &p2d)?;
    }
    if matches!(mode, PaintMode::ThreeD | PaintMode::Both) {
        let boxes: Vec<Box3D> = formats::read_json(&scene.join("boxes.json"))?;
        let spec = manifest.config.scene_spec(0);
        let clean = paint_3d(&points, &boxes, manifest.m)?;
        let seed = fusionpaint::synthbench::corruption_seed(entry.seed);
        let p3d = corrupt_scores(
            &clean,
            Corruption::LabelFlip {
                p: spec.confusion_p,
            },
            seed,
        )?;
        formats::write_scores(&out.join("p3d.fpsc"), &p3d)?;
    }
    Ok(())
}

fn selected_entries<'a>(
    dataset: &'a Dataset,
    scene: Option<&str>,
) -> CliResult<Vec<&'a fusionpaint::synthbench::ManifestEntry>> {
    match scene {
        None => Ok(dataset.manifest.scenes.iter().collect()),
        Some(id) => dataset
            .manifest
            .scenes
            .iter()
            .find(|e| e.id == id)
            .map(|e| vec![e])
            .ok_or_else(|| config_failure(format!("scene {id} is not in the manifest"))),
    }
}

fn cmd_model(args: &ModelArgs, export: bool, exec: Exec) -> CliResult {
    let dataset = open_dataset(&args.dataset)?;
    if let Some(c) = &args.config {
        require_file(c, "config")?;
    }
    let params = load_checkpoint(&args.checkpoint, &dataset)?;
    let cfg: TrainConfig = load_config(args.config.as_deref())?;
    cfg.voxel.validate()?;
    for entry in selected_entries(&dataset, args.scene.as_deref())? {
        let scene = dataset.load_scene(entry)?;
        let prepared = trainer::prepare_scene(&scene, &cfg.voxel, &params.config, exec)?;
        if export {
            let painted = trainer::painted_scene(
                &params,
                &scene,
                &prepared,
                &cfg.voxel,
                args.modality,
                exec,
            )?;
            formats::write_painted(&args.out.join(format!("{}.fppt", entry.id)), &painted)?;
        } else {
            let sigma = scene_gate(&params, &prepared, args.modality, exec)?;
            formats::write_voxels(
                &args.out.join(format!("{}.fpvx", entry.id)),
                &prepared.batch,
            )?;
            formats::write_json(
                &args.out.join(format!("{}.attention.json", entry.id)),
                &sigma,
            )?;
        }
    }
    Ok(())
}

fn cmd_train(
    dataset: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    modality: Option<Modality>,
    exec: Exec,
) -> CliResult {
    let dataset = open_dataset(dataset)?;
    let mut cfg: TrainConfig = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = modality {
        cfg.modality = m;
    }
    cfg.checkpoint = Some(out.join("checkpoint.fpnn"));
    cfg.metrics = Some(out.join("metrics.csv"));
    cfg.validate()?;
    let fusion = fusionpaint::fusion::FusionConfig::for_range(dataset.m(), &cfg.voxel);
    let train = dataset.load_split(fusionpaint::synthbench::Split::Train, exec)?;
    let val = dataset.load_split(fusionpaint::synthbench::Split::Val, exec)?;
    let train = prepare_scenes(&train, &cfg.voxel, &fusion, exec)?;
    let val = prepare_scenes(&val, &cfg.voxel, &fusion, exec)?;
    let outcome = trainer::train(&cfg, &train, &val, exec)?;
    formats::write_checkpoint(&out.join("final.fpnn"), &outcome.params.to_tensors())?;
    if let Some(last) = outcome.rows.last() {
        println!(
            "{}: epoch {} {} macro-F1 {:.4} (best epoch {})",
            cfg.modality.name(),
            last.epoch,
            last.split,
            last.report.macro_f1,
            outcome.best_epoch
        );
    }
    Ok(())
}

fn cmd_eval(
    dataset: &Path,
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    exec: Exec,
) -> CliResult {
    let dataset = open_dataset(dataset)?;
    let mut cfg: BenchmarkConfig = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    cfg.ap.validate()?;
    let table = match checkpoint {
        None => {
            run_benchmark(&dataset, &cfg, Some(out), exec)?;
            std::fs::read_to_string(out.join("eval_table.txt")).map_err(|e| {
                Failure::from(Error::Io {
                    path: out.join("eval_table.txt"),
                    source: e,
                })
            })?
        }
        Some(ckpt) => {
            let params = load_checkpoint(ckpt, &dataset)?;
            let val = dataset.load_split(fusionpaint::synthbench::Split::Val, exec)?;
            let prepared = prepare_scenes(&val, &cfg.train.voxel, &params.config, exec)?;
            let mut rows = Vec::new();
            for m in Modality::ALL {
                let (report, ap) = evaluate_arm(&params, &val, &prepared, m, &cfg, exec)?;
                rows.push((m, report, ap));
            }
            let aps: Vec<_> = rows.iter().map(|(m, _, ap)| (*m, ap)).collect();
            trainer::write_text(&out.join("ap_report.json"), &ap_report_json(&aps)?)?;
            let t: Vec<_> = rows.iter().map(|(m, r, ap)| (*m, r, ap.map())).collect();
            let table = arm_table(&t);
            trainer::write_text(&out.join("eval_table.txt"), &table)?;
            table
        }
    };
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match &cli.command {
        Command::Synth { config, out, seed } => {
            if let Some(c) = config {
                require_file(c, "config")?;
            }
            cmd_synth(config.as_deref(), out, *seed, exec)
        }
        Command::Paint {
            scene,
            mode,
            manifest,
            out,
        } => cmd_paint(scene, *mode, manifest.as_deref(), out),
        Command::Fuse(args) => cmd_model(args, false, exec),
        Command::Export(args) => cmd_model(args, true, exec),
        Command::Train {
            dataset,
            config,
            out,
            seed,
            modality,
        } => {
            if let Some(c) = config {
                require_file(c, "config")?;
            }
            cmd_train(dataset, config.as_deref(), out, *seed, *modality, exec)
        }
        Command::Eval {
            dataset,
            config,
            checkpoint,
            out,
            seed,
        } => {
            if let Some(c) = config {
                require_file(c, "config")?;
            }
            cmd_eval(
                dataset,
                config.as_deref(),
                checkpoint.as_deref(),
                out,
                *seed,
                exec,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
