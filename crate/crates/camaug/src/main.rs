//! Command-line front end for the experiment harness.
//!
//! A single TOML file configures everything; every flag below overrides one
//! of its keys, and `CAMAUG_OUTPUT_DIR` overrides the output root when no
//! `--output-dir` flag is given. Without `--config` a desk-scale synthetic
//! setup is used, so `camaug run-all` works out of the box.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use camaug::augmentation::MaskingMode;
use camaug::classifier::BackboneKind;
use camaug::data::synth::{generate_synthetic, save_synthetic, SynthConfig};
use camaug::harness::{
    combined_table, ensure_cams, ensure_classifier, load_all_centres, load_dataset,
    load_run_record, load_sweep_record, make_split, mode_for, run_all_centres, run_experiment,
    sweep_p, sweep_table, DataConfig, ExperimentConfig, SWEEP_P_VALUES,
};
use camaug::segmodels::{SegConfig, SegModelKind};
use camaug::{Error, Result};

const OUTPUT_ENV: &str = "CAMAUG_OUTPUT_DIR";

/// Writes to stdout, ignoring a closed pipe (e.g. `camaug report | head`).
fn emit(args: std::fmt::Arguments<'_>) {
    use std::io::Write;
    let _ = std::io::stdout().write_fmt(args);
}

macro_rules! say {
    ($fmt:literal $($arg:tt)*) => { emit(format_args!($fmt $($arg)*)) };
}

macro_rules! sayln {
    () => { emit(format_args!("\n")) };
    ($fmt:literal $($arg:tt)*) => { emit(format_args!(concat!($fmt, "\n") $($arg)*)) };
}

#[derive(Parser)]
#[command(
    name = "camaug",
    version,
    about = "Interpretability-guided data augmentation for multi-centre segmentation",
    after_help = "Config precedence per key: flag > CAMAUG_OUTPUT_DIR (output root only) > \
                  --config file > desk-scale defaults."
)]
struct Cli {
    /// TOML experiment config (defaults to a desk-scale synthetic setup).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Switch training to the full-scale protocol (lr 1e-5, batch 4,
    /// 10 classifier epochs, 300 segmentation epochs).
    #[arg(long, global = true)]
    paper_scale: bool,

    /// Root directory for checkpoints, caches, and results.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Root seed; all randomness derives from it via named sub-streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Centre whose samples form the out-of-distribution test set.
    #[arg(long, global = true)]
    held_out_centre: Option<u32>,

    /// Segmentation architecture: unet, deeplab, or sdnet. Also sets the
    /// matching masking mode.
    #[arg(long, global = true)]
    model: Option<SegModelKind>,

    /// Use a real dataset rooted at this directory (centreN/images|masks
    /// layout) instead of synthetic data.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,

    /// Turn interpretability masking on or off.
    #[arg(long, global = true)]
    masking: Option<bool>,

    /// Masking probability.
    #[arg(long, global = true)]
    p: Option<f64>,

    /// Saliency binarization threshold in (0,1).
    #[arg(long, global = true)]
    threshold: Option<f64>,

    /// Where the keep-mask multiplies: input_level or anatomy_level.
    #[arg(long, global = true)]
    masking_mode: Option<MaskingMode>,

    /// Learning rate for both training stages.
    #[arg(long, global = true)]
    lr: Option<f64>,

    /// Batch size for both training stages.
    #[arg(long, global = true)]
    batch: Option<usize>,

    /// Centre-classifier pretraining epochs.
    #[arg(long, global = true)]
    classifier_epochs: Option<usize>,

    /// Segmentation training epochs.
    #[arg(long, global = true)]
    seg_epochs: Option<usize>,

    /// Centre-classifier backbone: small or deep50.
    #[arg(long, global = true)]
    classifier_kind: Option<BackboneKind>,

    /// Centre-classifier stem width.
    #[arg(long, global = true)]
    classifier_width: Option<usize>,

    /// Train the classifier on the fly when its checkpoint is missing.
    #[arg(long, global = true)]
    auto_pretrain: Option<bool>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-centre dataset and save it to disk.
    SynthData {
        /// Where to write images, masks, and the manifest
        /// (default: <output-dir>/synth-data).
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        centres: Option<u32>,
        #[arg(long)]
        samples_per_centre: Option<usize>,
        #[arg(long)]
        patients_per_centre: Option<usize>,
        /// Square image side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train (or verify) the frozen centre classifier for the current split.
    PretrainClassifier,
    /// Fill the saliency cache with a keep-mask per training sample.
    CacheCams,
    /// Train the segmentation model and evaluate its best checkpoint.
    TrainSeg,
    /// Print the persisted metrics of a finished run.
    Evaluate {
        /// Run directory (default: the one named by the config fingerprint).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Run one experiment per masking probability and pick the best.
    SweepP {
        /// Comma-separated probabilities (default: 0.4,0.5,0.6).
        #[arg(long, value_delimiter = ',')]
        p_values: Option<Vec<f64>>,
    },
    /// Baseline + sweep with every centre held out in turn.
    RunAll {
        /// Comma-separated probabilities (default: 0.4,0.5,0.6).
        #[arg(long, value_delimiter = ',')]
        p_values: Option<Vec<f64>>,
    },
    /// Render every persisted run, sweep, and all-centres record.
    Report,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

/// Builds the effective config: file (or desk defaults), then the
/// paper-scale switch, then individual flag overrides.
fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let env_output = std::env::var_os(OUTPUT_ENV).map(PathBuf::from);
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let root = cli
                .output_dir
                .clone()
                .or_else(|| env_output.clone())
                .unwrap_or_else(|| PathBuf::from("camaug-out"));
            ExperimentConfig::desk(&root)
        }
    };
    if cli.paper_scale {
        cfg.apply_paper_scale();
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    } else if let Some(dir) = env_output {
        cfg.output_dir = dir;
    }
    if let Some(kind) = cli.model {
        cfg.model = SegConfig::for_kind(kind);
        cfg.masking.mode = mode_for(kind);
    }
    if let Some(path) = &cli.data_root {
        cfg.data = DataConfig::Real { path: path.clone() };
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.held_out_centre {
        cfg.held_out_centre = v;
    }
    if let Some(v) = cli.masking {
        cfg.masking.enabled = v;
    }
    if let Some(v) = cli.p {
        cfg.masking.p = v;
    }
    if let Some(v) = cli.threshold {
        cfg.masking.threshold = v;
    }
    if let Some(v) = cli.masking_mode {
        cfg.masking.mode = v;
    }
    if let Some(v) = cli.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = cli.batch {
        cfg.optimizer.batch = v;
    }
    if let Some(v) = cli.classifier_epochs {
        cfg.epochs.classifier = v;
    }
    if let Some(v) = cli.seg_epochs {
        cfg.epochs.segmentation = v;
    }
    if let Some(v) = cli.classifier_kind {
        cfg.classifier.kind = v;
    }
    if let Some(v) = cli.classifier_width {
        cfg.classifier.width = v;
    }
    if let Some(v) = cli.auto_pretrain {
        cfg.auto_pretrain = v;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::SynthData { root, centres, samples_per_centre, patients_per_centre, size } => {
            let mut sc = match &cfg.data {
                DataConfig::Synthetic(sc) => sc.clone(),
                DataConfig::Real { .. } => SynthConfig::default(),
            };
            if let Some(c) = *centres {
                if c as usize != sc.styles.len() {
                    sc = SynthConfig::for_centres(
                        c,
                        sc.samples_per_centre,
                        sc.patients_per_centre,
                        sc.size,
                    );
                } else {
                    sc.centres = c;
                }
            }
            if let Some(v) = *samples_per_centre {
                sc.samples_per_centre = v;
            }
            if let Some(v) = *patients_per_centre {
                sc.patients_per_centre = v;
            }
            if let Some(v) = *size {
                sc.size = v;
            }
            let root = root.clone().unwrap_or_else(|| cfg.output_dir.join("synth-data"));
            let ds = generate_synthetic(&sc, cfg.seed)?;
            save_synthetic(&ds, &sc, cfg.seed, &root)?;
            sayln!(
                "wrote {} samples across {} centres to {}",
                ds.samples.len(),
                sc.centres,
                root.display()
            );
            Ok(())
        }
        Command::PretrainClassifier => {
            cfg.validate()?;
            let existed = cfg.classifier_dir().join("classifier.json").exists();
            let mut train_cfg = cfg.clone();
            train_cfg.auto_pretrain = true;
            let ds = load_dataset(&train_cfg)?;
            let split = make_split(&train_cfg, &ds)?;
            let (_, meta) = ensure_classifier(&train_cfg, &ds, &split)?;
            sayln!(
                "{} classifier at {} (centres {:?}, weights {})",
                if existed { "verified existing" } else { "trained" },
                cfg.classifier_dir().display(),
                meta.centres,
                &meta.weights_sha256[..12]
            );
            Ok(())
        }
        Command::CacheCams => {
            cfg.validate()?;
            let ds = load_dataset(&cfg)?;
            let split = make_split(&cfg, &ds)?;
            let (classifier, _) = ensure_classifier(&cfg, &ds, &split)?;
            let cache = ensure_cams(&cfg, &ds, &split, &classifier)?;
            sayln!(
                "saliency cache at {}: {} keep-masks (threshold {})",
                cfg.cam_cache_path().display(),
                cache.len(),
                cfg.masking.threshold
            );
            Ok(())
        }
        Command::TrainSeg => {
            let record = run_experiment(&cfg)?;
            sayln!(
                "run {} finished: best epoch {} (val Dice {:.4})",
                &record.fingerprint[..12],
                record.best_epoch,
                record.best_val_dice
            );
            say!("{}", record.metrics.render_rows());
            sayln!("artifacts: {}", cfg.run_dir().display());
            Ok(())
        }
        Command::Evaluate { run_dir } => {
            let dir = run_dir.clone().unwrap_or_else(|| cfg.run_dir());
            if !dir.join("run.json").exists() {
                return Err(Error::Config(format!(
                    "no run record at {}; train first with `camaug train-seg`",
                    dir.display()
                )));
            }
            let record = load_run_record(&dir)?;
            sayln!(
                "run {} ({}, centre {} held out, {} epochs, best epoch {})",
                &record.fingerprint[..12],
                record.model,
                record.held_out_centre,
                record.epochs_trained,
                record.best_epoch
            );
            say!("{}", record.metrics.render_rows());
            Ok(())
        }
        Command::SweepP { p_values } => {
            let values = p_values.clone().unwrap_or_else(|| SWEEP_P_VALUES.to_vec());
            let mut template = cfg.clone();
            template.masking.enabled = true;
            let record = sweep_p(&template, &values)?;
            say!("{}", sweep_table(&record));
            Ok(())
        }
        Command::RunAll { p_values } => {
            let values = p_values.clone().unwrap_or_else(|| SWEEP_P_VALUES.to_vec());
            let record = run_all_centres(&cfg, &values)?;
            say!("{}", combined_table(&record));
            if !record.fully_succeeded() {
                let errors: Vec<&String> =
                    record.rows.iter().flat_map(|r| &r.errors).collect();
                eprintln!("{} member failure(s); see the table notes", errors.len());
                let protocol = errors.iter().any(|e| e.contains("protocol"));
                std::process::exit(if protocol { 3 } else { 1 });
            }
            Ok(())
        }
        Command::Report => {
            let root = &cfg.output_dir;
            let mut found = false;
            let runs_dir = root.join("runs");
            if runs_dir.is_dir() {
                let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs_dir)
                    .map_err(|e| Error::io(&runs_dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.join("run.json").exists())
                    .collect();
                dirs.sort();
                for dir in dirs {
                    let r = load_run_record(&dir)?;
                    let setting = match r.p {
                        Some(p) => format!("masking p={p:.2}"),
                        None => "baseline".to_string(),
                    };
                    found = true;
                    sayln!(
                        "run {} ({}, centre {} held out, {})",
                        &r.fingerprint[..12],
                        r.model,
                        r.held_out_centre,
                        setting
                    );
                    say!("{}", r.metrics.render_rows());
                    sayln!();
                }
            }
            let sweeps_dir = root.join("sweeps");
            if sweeps_dir.is_dir() {
                let mut files: Vec<PathBuf> = std::fs::read_dir(&sweeps_dir)
                    .map_err(|e| Error::io(&sweeps_dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "json"))
                    .collect();
                files.sort();
                for file in files {
                    let record = load_sweep_record(&file)?;
                    found = true;
                    say!("{}", sweep_table(&record));
                    sayln!();
                }
            }
            if root.join("all-centres.json").exists() {
                let record = load_all_centres(root)?;
                found = true;
                say!("{}", combined_table(&record));
            }
            if !found {
                sayln!("no run artifacts under {}", root.display());
            }
            Ok(())
        }
    }
}
