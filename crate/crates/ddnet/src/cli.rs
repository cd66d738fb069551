//! Command-line surface: dataset synthesis, training, evaluation, engine
//! verification, and the τ-sensitivity sweep. Every command resolves one
//! [`RunConfig`], echoes it into a fresh run directory, and writes its
//! artifacts (CSV logs, checkpoints, JSON reports) there, so a run can be
//! reproduced from the echoed config alone.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};
use crate::data::{synthesize_dataset, synthesize_split, DataError, Split};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::model::{DdnetModel, ModelError};
use crate::tensor::TensorError;
use crate::train::{
    composite_gradient_check, load_checkpoint, save_checkpoint, train, EpochStats, TrainError,
    TrainState,
};

/// Errors bucketed by exit code: 1 validation, 2 numerical, 3 I/O.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Numerical(m) | CliError::Io(m) => {
                f.write_str(m)
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            DataError::InvalidSpec(_) => CliError::Validation(e.to_string()),
            // Corrupt or mismatched files on disk.
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Validation(e.to_string()),
            ModelError::Tensor(t) => t.into(),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => CliError::Validation(e.to_string()),
            EvalError::Model(m) => m.into(),
            EvalError::Tensor(t) => t.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Validation(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Eval(v) => v.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Io { .. } | TrainError::Checkpoint { .. } => CliError::Io(e.to_string()),
            TrainError::NonFiniteGrad { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "ddnet",
    version,
    about = "Temporal forgery localization on synthetic dual-stream features",
    after_help = "Each run creates a directory under --out (named by timestamp and seed) \
                  holding the resolved config echo and all artifacts. DDNET_THREADS caps \
                  how many sweep-tau trainings run concurrently."
)]
pub struct Cli {
    /// JSON config file; defaults describe the desk-scale experiment.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed shortcut: replaces data.seed for synth/eval and train.seed
    /// (model init + batch shuffling) for train/sweep-tau.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    pub out: PathBuf,

    /// Config override like train.lr=0.01 (repeatable; values parse as JSON).
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset (train/val/test feature files + manifests).
    Synth,
    /// Train a model; emits a CSV learning curve, a checkpoint, and a report.
    Train,
    /// Evaluate a checkpoint on freshly synthesized test data.
    Eval {
        /// Checkpoint file produced by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Verify analytic gradients against finite differences (micro scale).
    Gradcheck,
    /// Train one model per similarity threshold and tabulate validation AP.
    SweepTau {
        /// Comma-separated thresholds, each in (-1, 1).
        #[arg(
            long = "tau-list",
            value_delimiter = ',',
            default_value = "0.1,0.3,0.5,0.7,0.9",
            value_name = "T,T,..."
        )]
        tau_list: Vec<f64>,
    },
}

impl Command {
    fn tag(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck => "gradcheck",
            Command::SweepTau { .. } => "sweep-tau",
        }
    }
}

/// Entry point behind `main`: resolve the config, create the run directory,
/// dispatch.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Synth | Command::Eval { .. } => cfg.data.seed = seed,
            Command::Train | Command::SweepTau { .. } => cfg.train.seed = seed,
            Command::Gradcheck => {}
        }
    }
    cfg.validate()?;

    let seed_label = match cli.command {
        Command::Synth | Command::Eval { .. } => cfg.data.seed,
        _ => cfg.train.seed,
    };
    let run_dir = create_run_dir(&cli.out, cli.command.tag(), seed_label)?;
    let echo_path = run_dir.join("config.json");
    std::fs::write(&echo_path, cfg.to_pretty_json()?).map_err(|e| io_err(&echo_path, e))?;
    println!("run directory: {}", run_dir.display());

    match cli.command {
        Command::Synth => cmd_synth(&cfg, &run_dir),
        Command::Train => cmd_train(&cfg, &run_dir),
        Command::Eval { checkpoint } => cmd_eval(&cfg, &run_dir, &checkpoint),
        Command::Gradcheck => cmd_gradcheck(&run_dir),
        Command::SweepTau { tau_list } => cmd_sweep_tau(&cfg, &run_dir, &tau_list),
    }
}

// -- run directories ----------------------------------------------------------

/// `{parent}/{tag}-{yyyymmdd-hhmmss}-s{seed}`, suffixed on collision.
fn create_run_dir(parent: &Path, tag: &str, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    let base = format!("{tag}-{}-s{seed}", timestamp());
    for attempt in 0..100 {
        let name = if attempt == 0 { base.clone() } else { format!("{base}-{}", attempt + 1) };
        let dir = parent.join(&name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    Err(CliError::Io(format!(
        "could not find a free run directory name under {} for {base}",
        parent.display()
    )))
}

/// UTC `yyyymmdd-hhmmss` without pulling in a date crate (civil-from-days).
fn timestamp() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs();
    let (days, tod) = (secs / 86_400, secs % 86_400);
    let z = days as i64 + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1_460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = yoe + era * 400 + i64::from(month <= 2);
    format!(
        "{year:04}{month:02}{day:02}-{:02}{:02}{:02}",
        tod / 3_600,
        (tod % 3_600) / 60,
        tod % 60
    )
}

// -- synth ---------------------------------------------------------------------

fn cmd_synth(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let data_dir = run_dir.join("data");
    let manifests = synthesize_dataset(&cfg.data, &data_dir)?;
    let mut total = 0usize;
    for m in &manifests {
        let forged = m.entries.iter().filter(|e| e.video_label).count();
        total += m.entries.len();
        println!(
            "{:>5}: {:>4} videos ({} forged, {} authentic), {} domains, {} frames each",
            m.split,
            m.entries.len(),
            forged,
            m.entries.len() - forged,
            m.k_domains,
            m.t_max
        );
    }
    if total == 0 {
        println!("warning: this configuration produced zero videos; manifests are empty");
    }
    println!("dataset written to {}", data_dir.display());
    Ok(())
}

// -- train ----------------------------------------------------------------------

const CSV_HEADER: &str =
    "epoch,step,loss_frame,loss_video,loss_adv,loss_orth,loss_total,val_ap50,val_ap75,val_ap95,val_map\n";

fn csv_line(s: &EpochStats) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        s.epoch + 1,
        s.step,
        s.loss.frame,
        s.loss.video,
        s.loss.adversarial,
        s.loss.orthogonality,
        s.loss.total,
        s.val.ap50,
        s.val.ap75,
        s.val.ap95,
        s.val.mean_ap
    )
}

fn epoch_line(s: &EpochStats, total_epochs: usize) -> String {
    format!(
        "epoch {:>3}/{} step {:>6} loss {:.4} (frame {:.4} video {:.4} adv {:.4} orth {:.4}) \
         val AP@.5 {:.4} AP@.75 {:.4} AP@.95 {:.4} mAP {:.4}",
        s.epoch + 1,
        total_epochs,
        s.step,
        s.loss.total,
        s.loss.frame,
        s.loss.video,
        s.loss.adversarial,
        s.loss.orthogonality,
        s.val.ap50,
        s.val.ap75,
        s.val.ap95,
        s.val.mean_ap
    )
}

/// Synthesize data, train, and write every artifact into `run_dir`. Returns
/// the final validation report. `quiet` suppresses the per-epoch stdout line
/// (used by sweep workers).
fn train_one(cfg: &RunConfig, run_dir: &Path, quiet: bool) -> Result<EvalReport> {
    let train_set = synthesize_split(&cfg.data, Split::Train)?;
    let val_set = synthesize_split(&cfg.data, Split::Val)?;
    if val_set.is_empty() {
        return Err(CliError::Validation(
            "training needs data.videos_val >= 1 for the per-epoch validation".into(),
        ));
    }

    let csv_path = run_dir.join("train.csv");
    let mut csv = std::fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    csv.write_all(CSV_HEADER.as_bytes()).map_err(|e| io_err(&csv_path, e))?;

    let model = DdnetModel::init(cfg.model.clone(), cfg.train.seed)?;
    let state = TrainState::fresh(model, &cfg.train);
    let mut csv_err: Option<std::io::Error> = None;
    let outcome = train(state, &train_set, &val_set, &cfg.train, &cfg.eval, |stats| {
        if let Err(e) = csv.write_all(csv_line(stats).as_bytes()).and_then(|()| csv.flush()) {
            csv_err.get_or_insert(e);
        }
        if !quiet {
            println!("{}", epoch_line(stats, cfg.train.epochs));
        }
    })?;
    if let Some(e) = csv_err {
        return Err(io_err(&csv_path, e));
    }

    let ckpt_path = run_dir.join("checkpoint.ddck");
    save_checkpoint(
        &ckpt_path,
        &outcome.model,
        &outcome.opt,
        &outcome.rng,
        cfg.train.epochs,
        &cfg.train,
    )?;

    let report = outcome
        .history
        .last()
        .map(|s| s.val.clone())
        .expect("training always runs at least one epoch from a fresh state");
    write_report(run_dir, &report)?;
    Ok(report)
}

fn write_report(run_dir: &Path, report: &EvalReport) -> Result<PathBuf> {
    let path = run_dir.join("report.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::Io(format!("serializing report: {e}")))?;
    std::fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "videos       {:>8}", report.videos);
    let _ = writeln!(out, "gt segments  {:>8}", report.gt_segments);
    let _ = writeln!(out, "predictions  {:>8}", report.predictions);
    let _ = writeln!(out, "AP@0.50      {:>8.4}", report.ap50);
    let _ = writeln!(out, "AP@0.75      {:>8.4}", report.ap75);
    let _ = writeln!(out, "AP@0.95      {:>8.4}", report.ap95);
    let _ = writeln!(out, "mAP          {:>8.4}", report.mean_ap);
    out
}

fn cmd_train(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let report = train_one(cfg, run_dir, false)?;
    println!("\nfinal validation metrics:");
    print!("{}", report_table(&report));
    println!("checkpoint: {}", run_dir.join("checkpoint.ddck").display());
    println!("curve:      {}", run_dir.join("train.csv").display());
    Ok(())
}

// -- eval -------------------------------------------------------------------------

fn cmd_eval(cfg: &RunConfig, run_dir: &Path, checkpoint: &Path) -> Result<()> {
    let loaded = load_checkpoint(checkpoint)?;
    let model = loaded.state.model;
    if model.config.d_sem != cfg.data.d_sem
        || model.config.d_tex != cfg.data.d_tex
        || cfg.data.frames > model.config.t_max
    {
        return Err(CliError::Validation(format!(
            "checkpoint model (widths {}/{}, t_max {}) cannot consume the configured data \
             (widths {}/{}, {} frames)",
            model.config.d_sem,
            model.config.d_tex,
            model.config.t_max,
            cfg.data.d_sem,
            cfg.data.d_tex,
            cfg.data.frames
        )));
    }
    if cfg.data.videos_test == 0 {
        return Err(CliError::Validation("eval needs data.videos_test >= 1".into()));
    }
    let test_set = synthesize_split(&cfg.data, Split::Test)?;
    let report = evaluate(&model, &test_set, &cfg.eval)?;
    print!("{}", report_table(&report));
    let path = write_report(run_dir, &report)?;
    println!("report: {}", path.display());
    Ok(())
}

// -- gradcheck ----------------------------------------------------------------------

fn cmd_gradcheck(run_dir: &Path) -> Result<()> {
    let report = composite_gradient_check()?;
    let text = format!("{report}\n");
    print!("{text}");
    let path = run_dir.join("gradcheck.txt");
    std::fs::write(&path, &text).map_err(|e| io_err(&path, e))?;
    if !report.passed {
        return Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err, report.tol
        )));
    }
    Ok(())
}

// -- sweep-tau ------------------------------------------------------------------------

fn worker_cap(n_jobs: usize) -> Result<usize> {
    let hardware = std::thread::available_parallelism().map(usize::from).unwrap_or(1);
    let cap = match std::env::var("DDNET_THREADS") {
        Ok(raw) => raw.trim().parse::<usize>().map_err(|_| {
            CliError::Validation(format!(
                "DDNET_THREADS must be a positive integer, got {raw:?}"
            ))
        })?,
        Err(_) => hardware,
    };
    if cap == 0 {
        return Err(CliError::Validation("DDNET_THREADS must be >= 1".into()));
    }
    Ok(cap.min(n_jobs).max(1))
}

fn cmd_sweep_tau(cfg: &RunConfig, run_dir: &Path, tau_list: &[f64]) -> Result<()> {
    if tau_list.is_empty() {
        return Err(CliError::Validation("--tau-list needs at least one value".into()));
    }
    for &tau in tau_list {
        if !(tau > -1.0 && tau < 1.0) {
            return Err(CliError::Validation(format!(
                "tau values must lie in (-1, 1), got {tau}"
            )));
        }
    }

    // Each τ trains independently in its own subdirectory; a shared cursor
    // hands out jobs to at most `workers` threads.
    let jobs: Vec<(usize, f64, RunConfig, PathBuf)> = tau_list
        .iter()
        .enumerate()
        .map(|(i, &tau)| {
            let mut sub = cfg.clone();
            sub.model.tau = tau;
            (i, tau, sub, run_dir.join(format!("tau-{tau}")))
        })
        .collect();
    for (_, _, _, dir) in &jobs {
        std::fs::create_dir(dir).map_err(|e| io_err(dir, e))?;
    }
    let workers = worker_cap(jobs.len())?;
    println!("sweeping {} thresholds on {workers} worker(s)", jobs.len());

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<EvalReport>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((ix, tau, sub, dir)) = jobs.get(i) else { break };
                let echo = sub.to_pretty_json().map_err(CliError::from).and_then(|json| {
                    let path = dir.join("config.json");
                    std::fs::write(&path, json).map_err(|e| io_err(&path, e))
                });
                let outcome = echo.and_then(|()| train_one(sub, dir, true));
                if let Ok(report) = &outcome {
                    println!(
                        "tau {tau:>5}: AP@.5 {:.4} AP@.75 {:.4} AP@.95 {:.4} mAP {:.4}",
                        report.ap50, report.ap75, report.ap95, report.mean_ap
                    );
                }
                results.lock().expect("no panics hold this lock")[*ix] = Some(outcome);
            });
        }
    });

    let results = results.into_inner().expect("workers finished");
    let mut csv = String::from("tau,ap50,ap75,ap95,mean_ap\n");
    for ((_, tau, _, _), slot) in jobs.iter().zip(results) {
        let report = slot.expect("every job was claimed exactly once")?;
        let _ = writeln!(
            csv,
            "{tau},{},{},{},{}",
            report.ap50, report.ap75, report.ap95, report.mean_ap
        );
    }
    let csv_path = run_dir.join("sweep.csv");
    std::fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
    println!("sweep curve: {}", csv_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::LossValues;

    fn stats() -> EpochStats {
        EpochStats {
            epoch: 2,
            step: 30,
            loss: LossValues {
                frame: 0.25,
                video: 0.125,
                adversarial: 0.6875,
                orthogonality: 0.03125,
                total: 0.5,
            },
            val: EvalReport {
                ap50: 0.875,
                ap75: 0.75,
                ap95: 0.5,
                mean_ap: 0.708_333_333_333_333_3,
                videos: 4,
                predictions: 6,
                gt_segments: 5,
                theta: 0.5,
                max_gap: 1,
                min_len: 2,
            },
        }
    }

    #[test]
    fn exit_codes_follow_the_error_buckets() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 1);
        assert_eq!(CliError::Numerical("x".into()).exit_code(), 2);
        assert_eq!(CliError::Io("x".into()).exit_code(), 3);

        let validation: CliError = ConfigError::BadOverride("lr".into()).into();
        assert_eq!(validation.exit_code(), 1);
        let numerical: CliError = TensorError::NonFinite { op: "ln" }.into();
        assert_eq!(numerical.exit_code(), 2);
        let io: CliError = TrainError::Checkpoint { path: "x".into(), detail: "bad".into() }.into();
        assert_eq!(io.exit_code(), 3);
        let nan: CliError =
            TrainError::NonFiniteGrad { param: "p".into(), step: 1, value: f64::NAN }.into();
        assert_eq!(nan.exit_code(), 2);
    }

    #[test]
    fn csv_lines_are_exact_and_ordered_like_the_header() {
        assert_eq!(CSV_HEADER.split(',').count(), 11);
        let line = csv_line(&stats());
        assert_eq!(
            line,
            "3,30,0.25,0.125,0.6875,0.03125,0.5,0.875,0.75,0.5,0.7083333333333333\n"
        );
    }

    #[test]
    fn timestamps_have_the_fixed_shape() {
        let t = timestamp();
        assert_eq!(t.len(), 15, "got {t}");
        assert_eq!(t.as_bytes()[8], b'-');
        assert!(t[..8].bytes().all(|b| b.is_ascii_digit()));
        assert!(t[9..].bytes().all(|b| b.is_ascii_digit()));
    }

    #[test]
    fn run_directories_get_fresh_names_on_collision() {
        let dir = tempfile::tempdir().unwrap();
        let a = create_run_dir(dir.path(), "train", 7).unwrap();
        let b = create_run_dir(dir.path(), "train", 7).unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
        let name = a.file_name().unwrap().to_string_lossy().into_owned();
        assert!(name.starts_with("train-"), "{name}");
        assert!(name.ends_with("-s7") || name.contains("-s7-"), "{name}");
    }

    #[test]
    fn worker_cap_honors_the_environment_and_job_count() {
        // The env var is process-global; run every case in one test to avoid
        // races between parallel test threads.
        std::env::set_var("DDNET_THREADS", "2");
        assert_eq!(worker_cap(5).unwrap(), 2);
        assert_eq!(worker_cap(1).unwrap(), 1);
        std::env::set_var("DDNET_THREADS", "0");
        assert!(worker_cap(5).is_err());
        std::env::set_var("DDNET_THREADS", "lots");
        assert!(worker_cap(5).is_err());
        std::env::remove_var("DDNET_THREADS");
        assert!(worker_cap(3).unwrap() >= 1);
    }

    #[test]
    fn command_line_parses_subcommands_and_overrides() {
        let cli = Cli::try_parse_from([
            "ddnet",
            "train",
            "--config",
            "cfg.json",
            "--seed",
            "9",
            "--override",
            "train.lr=0.01",
            "--override",
            "model.tau=0.5",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Train));
        assert_eq!(cli.seed, Some(9));
        assert_eq!(cli.overrides.len(), 2);
        assert_eq!(cli.out, PathBuf::from("runs"));

        let cli = Cli::try_parse_from(["ddnet", "sweep-tau", "--tau-list", "0.1,0.9"]).unwrap();
        match cli.command {
            Command::SweepTau { tau_list } => assert_eq!(tau_list, vec![0.1, 0.9]),
            other => panic!("parsed {other:?}"),
        }

        let cli = Cli::try_parse_from(["ddnet", "sweep-tau"]).unwrap();
        match cli.command {
            Command::SweepTau { tau_list } => {
                assert_eq!(tau_list, vec![0.1, 0.3, 0.5, 0.7, 0.9]);
            }
            other => panic!("parsed {other:?}"),
        }

        assert!(Cli::try_parse_from(["ddnet", "eval"]).is_err(), "--checkpoint is required");
        assert!(Cli::try_parse_from(["ddnet"]).is_err(), "a subcommand is required");
    }
}
