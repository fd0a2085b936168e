//! `ntf` — one binary exposing the full detection pipeline as subcommands.
//!
//! Conventions shared by every subcommand:
//!
//! * machine-readable results go to standard output; diagnostics and
//!   progress go to standard error;
//! * exit codes: 0 success, 2 usage/argument error, 3 I/O or format
//!   error, 4 numeric failure, 5 partial failure (some inputs failed);
//! * training hyperparameters come from an optional line-oriented
//!   `key=value` config file; command-line flags override file values;
//!   unknown config keys are errors;
//! * `--threads 1` (or `NTF_THREADS=1`) guarantees bitwise-identical
//!   results across runs with the same seed.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use ntf::data::corpus::gen_synthetic_corpus;
use ntf::data::{load_manifest, read_image, ImageSet, Label, Split};
use ntf::eval::{
    detect, evaluate_set, report_summary, report_to_tsv, robustness_sweep, standard_grid,
    EvalReport,
};
use ntf::losses::gradient_check_suite;
use ntf::model::{load_checkpoint, save_checkpoint, ModelBundle, ModelConfig};
use ntf::rng::{streams, Rng};
use ntf::train::{logs_to_tsv, train_stage1, train_stage2, EpochLog, Stage1Config, Stage2Config};
use ntf::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ntf",
    version,
    about = "Train and evaluate a natural-trace fake-image detector on synthetic corpora"
)]
struct Cli {
    /// Cap worker threads (default: all cores; env NTF_THREADS). 1 = bitwise deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic four-family corpus and its manifest.
    GenData {
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
        /// Images per family (train + test combined for each family).
        #[arg(long, default_value_t = 100)]
        n_per_family: usize,
        /// Square image side; a power of two ≥ 32.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 1: learn trace features from real training images only.
    TrainStage1 {
        /// Corpus manifest (TSV).
        #[arg(long)]
        manifest: PathBuf,
        /// Optional key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the trained checkpoint.
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Loss-log TSV path (default: <out-checkpoint>.losses.tsv).
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Override the config file's epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the config file's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage 2: train the auxiliary head and classifier on real + fake.
    TrainStage2 {
        #[arg(long)]
        manifest: PathBuf,
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Loss-log TSV path (default: <out-checkpoint>.losses.tsv).
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Override the config file's epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the config file's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score the manifest's test split and write a metrics report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report TSV output path.
        #[arg(long)]
        report: PathBuf,
        /// Decision threshold for ACC/FPR/FNR (score ≥ t ⇒ fake).
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Score individual images: one `path<TAB>score<TAB>label` line each.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Images to score (PPM).
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Evaluate the test split under the full perturbation grid.
    Robustness {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report TSV output path.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Seed for the additive-noise perturbation.
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Finite-difference gradient check of every loss; nonzero exit on failure.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Random configurations per loss.
        #[arg(long, default_value_t = 10)]
        rounds: usize,
    },
}

// ---------------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------------

/// A parsed `key=value` config file. Keys are consumed as they are read;
/// whatever remains at the end is unknown and rejected.
struct KvConfig {
    path: String,
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    fn load(path: Option<&Path>) -> Result<KvConfig> {
        let Some(path) = path else {
            return Ok(KvConfig {
                path: String::new(),
                entries: BTreeMap::new(),
            });
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Argument(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    idx + 1
                )));
            };
            let key = key.trim().to_string();
            if entries
                .insert(key.clone(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Argument(format!(
                    "{}:{}: duplicate key {key:?}",
                    path.display(),
                    idx + 1
                )));
            }
        }
        Ok(KvConfig {
            path: path.display().to_string(),
            entries,
        })
    }

    /// Consume `key`, parse it as `T`, and store it in `slot`.
    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *slot = raw.parse().map_err(|e| {
                Error::Argument(format!("config key {key}: {e} (value {raw:?})"))
            })?;
        }
        Ok(())
    }

    /// Fail on any key no consumer claimed.
    fn finish(self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            return Err(Error::Argument(format!(
                "{}: unknown config key {key:?}",
                self.path
            )));
        }
        Ok(())
    }
}

/// Parse `hom_smooth_tau`-style optional floats: `none` clears, a number sets.
fn set_optional_f64(cfg: &mut KvConfig, key: &str, slot: &mut Option<f64>) -> Result<()> {
    if let Some(raw) = cfg.entries.remove(key) {
        if raw == "none" {
            *slot = None;
        } else {
            let v: f64 = raw.parse().map_err(|e| {
                Error::Argument(format!("config key {key}: {e} (value {raw:?})"))
            })?;
            *slot = Some(v);
        }
    }
    Ok(())
}

/// Stage-1 settings: training hyperparameters plus the model shape.
fn stage1_settings(
    config: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<(Stage1Config, ModelConfig)> {
    let mut cfg = KvConfig::load(config)?;
    let mut s = Stage1Config::default();
    let mut m = ModelConfig::default();

    let mut channels = String::new();
    cfg.set("channels", &mut channels)?;
    if !channels.is_empty() {
        let parsed: std::result::Result<Vec<usize>, _> =
            channels.split(',').map(|c| c.trim().parse()).collect();
        m.encoder.channels = parsed.map_err(|e| {
            Error::Argument(format!("config key channels: {e} (value {channels:?})"))
        })?;
        m.encoder.embed_dim = *m.encoder.channels.last().unwrap_or(&0);
    }
    cfg.set("input_size", &mut m.encoder.input_size)?;
    cfg.set("proj_dim", &mut m.proj_dim)?;

    // Training crops match the model input unless overridden.
    s.augment.crop_size = m.encoder.input_size;
    cfg.set("crop_size", &mut s.augment.crop_size)?;
    cfg.set("flip_prob", &mut s.augment.flip_prob)?;
    cfg.set("brightness_jitter", &mut s.augment.brightness_jitter)?;

    cfg.set("epochs", &mut s.epochs)?;
    cfg.set("batch_n", &mut s.batch_n)?;
    cfg.set("lr", &mut s.lr)?;
    cfg.set("momentum", &mut s.momentum)?;
    cfg.set("weight_decay", &mut s.weight_decay)?;
    cfg.set("seed", &mut s.seed)?;

    cfg.set("tau", &mut s.loss.tau)?;
    cfg.set("lambda", &mut s.loss.lambda)?;
    cfg.set("ort_mode", &mut s.loss.ort_mode)?;
    cfg.set("enable_het", &mut s.loss.enable_het)?;
    cfg.set("enable_ort", &mut s.loss.enable_ort)?;
    set_optional_f64(&mut cfg, "hom_smooth_tau", &mut s.loss.hom_smooth_tau)?;

    cfg.finish()?;
    if let Some(e) = epochs {
        s.epochs = e;
    }
    if let Some(sd) = seed {
        s.seed = sd;
    }
    Ok((s, m))
}

/// Stage-2 settings; the model shape comes from the stage-1 checkpoint.
fn stage2_settings(
    config: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
    input_size: usize,
) -> Result<Stage2Config> {
    let mut cfg = KvConfig::load(config)?;
    let mut s = Stage2Config::default();

    s.augment.crop_size = input_size;
    cfg.set("crop_size", &mut s.augment.crop_size)?;
    cfg.set("flip_prob", &mut s.augment.flip_prob)?;
    cfg.set("brightness_jitter", &mut s.augment.brightness_jitter)?;

    cfg.set("epochs", &mut s.epochs)?;
    cfg.set("batch_real", &mut s.batch_real)?;
    cfg.set("batch_fake", &mut s.batch_fake)?;
    cfg.set("lr", &mut s.lr)?;
    cfg.set("momentum", &mut s.momentum)?;
    cfg.set("weight_decay", &mut s.weight_decay)?;
    cfg.set("seed", &mut s.seed)?;
    cfg.set("ext_weight", &mut s.ext_weight)?;
    cfg.set("freeze_backbone", &mut s.freeze_backbone)?;

    cfg.set("tau", &mut s.loss.tau)?;
    cfg.set("gamma", &mut s.loss.gamma)?;
    cfg.set("ext_use_aux", &mut s.loss.ext_use_aux)?;
    cfg.set("ext_log_form", &mut s.loss.ext_log_form)?;

    cfg.finish()?;
    if let Some(e) = epochs {
        s.epochs = e;
    }
    if let Some(sd) = seed {
        s.seed = sd;
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

fn finish_training(
    bundle: &ModelBundle,
    logs: &[EpochLog],
    out_checkpoint: &Path,
    loss_log: Option<&Path>,
) -> Result<()> {
    save_checkpoint(bundle, out_checkpoint)?;
    let log_path = loss_log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut os = out_checkpoint.as_os_str().to_os_string();
        os.push(".losses.tsv");
        PathBuf::from(os)
    });
    std::fs::write(&log_path, logs_to_tsv(logs)).map_err(|e| Error::io(&log_path, e))?;

    if let Some(last) = logs.last() {
        let mut line = format!("final\ttotal\t{}", last.total);
        for (name, v) in &last.components {
            line.push_str(&format!("\t{name}\t{v}"));
        }
        println!("{line}");
    }
    println!("loss_log\t{}", log_path.display());
    println!("checkpoint\t{}", out_checkpoint.display());
    Ok(())
}

fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, report_to_tsv(report)).map_err(|e| Error::io(path, e))?;
    eprint!("{}", report_summary(report));
    println!("report\t{}", path.display());
    println!("ap\tall\t{}", report.aggregate.ap);
    for row in &report.per_family {
        println!("ap\t{}\t{}", row.family, row.metrics.ap);
    }
    Ok(())
}

fn cmd_gen_data(out: &Path, n_per_family: usize, size: usize, seed: u64) -> Result<i32> {
    let manifest = gen_synthetic_corpus(out, n_per_family, size, &Rng::new(seed))?;
    eprintln!(
        "wrote {} images across 4 families under {}",
        manifest.records.len(),
        out.display()
    );
    println!("manifest\t{}", out.join("manifest.tsv").display());
    Ok(0)
}

fn cmd_train_stage1(
    manifest: &Path,
    config: Option<&Path>,
    out_checkpoint: &Path,
    loss_log: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<i32> {
    let (cfg, model_cfg) = stage1_settings(config, epochs, seed)?;
    let manifest = load_manifest(manifest)?;
    let real = ImageSet::load(&manifest, Some(Split::Train), Some(Label::Real), None)?;
    eprintln!(
        "stage 1: {} real train images, {} epochs, seed {}",
        real.records.len(),
        cfg.epochs,
        cfg.seed
    );

    let mut bundle = ModelBundle::new(&model_cfg, &Rng::new(cfg.seed).substream(streams::INIT))?;
    let logs = train_stage1(&mut bundle, &real, &cfg)?;
    finish_training(&bundle, &logs, out_checkpoint, loss_log)?;
    Ok(0)
}

fn cmd_train_stage2(
    manifest: &Path,
    stage1: &Path,
    config: Option<&Path>,
    out_checkpoint: &Path,
    loss_log: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<i32> {
    let mut bundle = load_checkpoint(stage1)?;
    let cfg = stage2_settings(config, epochs, seed, bundle.config.encoder.input_size)?;
    let manifest = load_manifest(manifest)?;
    let real = ImageSet::load(&manifest, Some(Split::Train), Some(Label::Real), None)?;
    let fake = ImageSet::load(&manifest, Some(Split::Train), Some(Label::Fake), None)?;
    eprintln!(
        "stage 2: {} real / {} fake train images, {} epochs, seed {}",
        real.records.len(),
        fake.records.len(),
        cfg.epochs,
        cfg.seed
    );

    let logs = train_stage2(&mut bundle, &real, &fake, &cfg)?;
    finish_training(&bundle, &logs, out_checkpoint, loss_log)?;
    Ok(0)
}

fn cmd_eval(manifest: &Path, checkpoint: &Path, report: &Path, threshold: f64) -> Result<i32> {
    let bundle = load_checkpoint(checkpoint)?;
    let manifest = load_manifest(manifest)?;
    let test = ImageSet::load(&manifest, Some(Split::Test), None, None)?;
    let result = evaluate_set(&bundle, &test, threshold)?;
    write_report(&result, report)?;
    Ok(0)
}

fn cmd_detect(checkpoint: &Path, threshold: f64, images: &[PathBuf]) -> Result<i32> {
    let bundle = load_checkpoint(checkpoint)?;
    let mut failures = 0usize;
    for path in images {
        match read_image(path).and_then(|img| detect(&bundle, &img, threshold)) {
            Ok((score, label)) => {
                println!("{}\t{}\t{}", path.display(), score, label.as_str());
            }
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                failures += 1;
            }
        }
    }
    if failures == 0 {
        Ok(0)
    } else if failures == images.len() {
        Err(Error::Argument(format!("all {failures} images failed")))
    } else {
        eprintln!("{failures} of {} images failed", images.len());
        Ok(5)
    }
}

fn cmd_robustness(
    manifest: &Path,
    checkpoint: &Path,
    report: &Path,
    threshold: f64,
    noise_seed: u64,
) -> Result<i32> {
    let bundle = load_checkpoint(checkpoint)?;
    let manifest = load_manifest(manifest)?;
    let test = ImageSet::load(&manifest, Some(Split::Test), None, None)?;
    let grid = standard_grid();
    let result = robustness_sweep(&bundle, &test, &grid, threshold, noise_seed)?;
    write_report(&result, report)?;
    Ok(0)
}

fn cmd_grad_check(seed: u64, rounds: usize) -> Result<i32> {
    const TOL: f64 = 1e-5;
    let entries = gradient_check_suite(seed, rounds)?;
    let mut worst_overall = 0.0f64;
    for e in &entries {
        let status = if e.max_rel_err <= TOL { "ok" } else { "FAIL" };
        println!("{}\t{}\t{}\t{status}", e.loss, e.rounds, e.max_rel_err);
        worst_overall = worst_overall.max(e.max_rel_err);
    }
    if worst_overall <= TOL {
        Ok(0)
    } else {
        Err(Error::numeric(
            "grad_check",
            format!("worst relative error {worst_overall} exceeds {TOL}"),
        ))
    }
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData {
            out,
            n_per_family,
            size,
            seed,
        } => cmd_gen_data(out, *n_per_family, *size, *seed),
        Command::TrainStage1 {
            manifest,
            config,
            out_checkpoint,
            loss_log,
            epochs,
            seed,
        } => cmd_train_stage1(
            manifest,
            config.as_deref(),
            out_checkpoint,
            loss_log.as_deref(),
            *epochs,
            *seed,
        ),
        Command::TrainStage2 {
            manifest,
            stage1,
            config,
            out_checkpoint,
            loss_log,
            epochs,
            seed,
        } => cmd_train_stage2(
            manifest,
            stage1,
            config.as_deref(),
            out_checkpoint,
            loss_log.as_deref(),
            *epochs,
            *seed,
        ),
        Command::Eval {
            manifest,
            checkpoint,
            report,
            threshold,
        } => cmd_eval(manifest, checkpoint, report, *threshold),
        Command::Detect {
            checkpoint,
            threshold,
            images,
        } => cmd_detect(checkpoint, *threshold, images),
        Command::Robustness {
            manifest,
            checkpoint,
            report,
            threshold,
            noise_seed,
        } => cmd_robustness(manifest, checkpoint, report, *threshold, *noise_seed),
        Command::GradCheck { seed, rounds } => cmd_grad_check(*seed, *rounds),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("NTF_THREADS") {
            Ok(v) => match v.parse::<usize>() {
                Ok(n) => Some(n),
                Err(_) => {
                    eprintln!("error: NTF_THREADS must be a positive integer, got {v:?}");
                    std::process::exit(2);
                }
            },
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if let Err(e) = ntf::configure_threads(n) {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }

    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
