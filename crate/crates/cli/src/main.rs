//! `gamseg`: dataset synthesis, training, evaluation, ablation sweeps and the
//! gradient-check suite.
//!
//! Exit codes: 0 success, 1 check failure or numerical error, 2 usage,
//! configuration or I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use gamseg::config::{parse_overrides, RunConfig, RESOLVED_NAME};
use gamseg::gradsuite::{run_suite, SuiteOptions};
use gamseg::io::{read_bundle, write_bundle, write_pgm};
use gamseg::pipeline::{evaluate_split, run_ablation, train, AblationRow, EpochLog, TrainState};
use gamseg::synthvos::{build_dataset, load_split, DatasetSpec, NamedSequence, Split};
use gamseg::Error;

const CHECKPOINT_NAME: &str = "checkpoint.bundle";

#[derive(Parser)]
#[command(name = "gamseg", version, about = "Generative appearance models for video object segmentation")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "GAMSEG_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic dataset from a spec file.
    Synth {
        spec: PathBuf,
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, training log and resolved config.
    Train(RunArgs),
    /// Score a checkpoint on a split; `--dump-masks` writes predicted masks.
    Eval(RunArgs),
    /// Retrain every ablation variant and tabulate validation scores.
    Ablate(RunArgs),
    /// Run the gradient-check suite.
    Gradcheck {
        /// Corrupt one backward rule (negative control; the suite must fail).
        #[arg(long)]
        inject_fault: bool,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Base `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key=value` overrides applied on top of the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

/// A failed command and the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. }
            | Error::InvalidArgument(_)
            | Error::Io { .. }
            | Error::Format(_)
            | Error::CheckpointShape { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Reads the base file (or, for evaluation, the configuration saved next to
/// the checkpoint) and applies overrides.
fn resolve(args: &RunArgs, beside_checkpoint: bool) -> Result<RunConfig, Failure> {
    let overrides = parse_overrides(&args.overrides)?;
    let base = match &args.config {
        Some(path) => Some(path.clone()),
        None if beside_checkpoint => {
            let probe = RunConfig::load("", &overrides)?;
            probe
                .checkpoint
                .as_ref()
                .and_then(|c| c.parent().map(|d| d.join(RESOLVED_NAME)))
                .filter(|p| p.is_file())
        }
        None => None,
    };
    let text = match &base {
        Some(path) => fs::read_to_string(path).map_err(|e| io_err(path, e))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::load(&text, &overrides)?;
    if base.is_some() && args.config.is_none() {
        // The saved run's output directory is not this command's.
        if !overrides.iter().any(|e| e.key == "out") {
            cfg.out = RunConfig::default().out;
        }
    }
    Ok(cfg)
}

fn load(cfg: &RunConfig, split: Split) -> Result<Vec<NamedSequence>, Failure> {
    let seqs = load_split(&cfg.data, split)?;
    if seqs.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no {} sequences", cfg.data.display(), split.name())).into());
    }
    Ok(seqs)
}

fn load_optional(cfg: &RunConfig, split: Split) -> Result<Vec<NamedSequence>, Failure> {
    if cfg.data.join(split.name()).is_dir() {
        load(cfg, split)
    } else {
        Ok(Vec::new())
    }
}

fn cmd_synth(spec: &Path, out: &Path) -> CmdResult {
    let text = fs::read_to_string(spec).map_err(|e| io_err(spec, e))?;
    let spec = DatasetSpec::parse(&text)?;
    let n = build_dataset(&spec, out)?;
    println!("wrote {n} sequences to {}", out.display());
    Ok(())
}

fn print_epoch(prefix: &str, log: &EpochLog, start: Instant) {
    eprintln!("{prefix}{}  ({:.0?})", log.csv_row(), start.elapsed());
}

fn cmd_train(args: &RunArgs) -> CmdResult {
    let cfg = resolve(args, false)?;
    let train_set = load(&cfg, Split::Train)?;
    let val_set = load_optional(&cfg, Split::Val)?;
    cfg.write_resolved(&cfg.out)?;
    let start = Instant::now();
    eprintln!("{}", EpochLog::CSV_HEADER);
    let (state, logs) = train(&train_set, &val_set, &cfg.model, &cfg.train, &mut |l| print_epoch("", l, start))?;
    let ckpt = cfg.out.join(CHECKPOINT_NAME);
    write_bundle(&ckpt, &state.to_bundle())?;
    write_file(&cfg.out.join("train_log.csv"), &EpochLog::csv(&logs))?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_eval(args: &RunArgs) -> CmdResult {
    let cfg = resolve(args, true)?;
    let ckpt = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config {
            line: 0,
            msg: "eval needs --checkpoint".into(),
        })?;
    let entries = read_bundle(&ckpt)?;
    let state = TrainState::from_bundle(&cfg.model, &entries)?;
    let seqs = load(&cfg, cfg.split)?;
    cfg.write_resolved(&cfg.out)?;
    let (result, preds) = evaluate_split(&state.params, &cfg.model, &seqs)?;
    write_file(&cfg.out.join("metrics.csv"), &result.to_csv())?;
    if cfg.dump_masks {
        for (seq, masks) in seqs.iter().zip(&preds) {
            let dir = cfg.out.join("masks").join(cfg.split.name()).join(&seq.id);
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            for (t, m) in masks.iter().enumerate() {
                write_pgm(&dir.join(format!("mask_{t:04}.pgm")), m)?;
            }
        }
    }
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.4}"));
    println!(
        "G={:.4} J_seen={} J_unseen={} F_seen={} F_unseen={}",
        result.g,
        fmt(result.j_seen),
        fmt(result.j_unseen),
        fmt(result.f_seen),
        fmt(result.f_unseen)
    );
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> CmdResult {
    let cfg = resolve(args, false)?;
    let train_set = load(&cfg, Split::Train)?;
    let val_set = load(&cfg, Split::Val)?;
    cfg.write_resolved(&cfg.out)?;
    let variants: Vec<&str> = cfg.variants.iter().map(String::as_str).collect();
    let start = Instant::now();
    let rows = run_ablation(&train_set, &val_set, &cfg.model, &cfg.train, &variants, &mut |v, l| {
        print_epoch(&format!("{v}: "), l, start)
    })?;
    for row in &rows {
        write_file(&cfg.out.join(format!("train_log_{}.csv", row.variant)), &EpochLog::csv(&row.log))?;
    }
    let table = AblationRow::csv(&rows);
    write_file(&cfg.out.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(inject_fault: bool, instances: usize, seed: u64) -> CmdResult {
    let opts = SuiteOptions {
        instances,
        seed,
        inject_fault,
        ..Default::default()
    };
    let reports = run_suite(&opts)?;
    for r in &reports {
        println!("{}", r.line());
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: 1,
            msg: format!("{failed} of {} paths failed", reports.len()),
        });
    }
    println!("all {} paths passed", reports.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Synth { spec, out } => cmd_synth(spec, out),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck {
            inject_fault,
            instances,
            seed,
        } => cmd_gradcheck(*inject_fault, *instances, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
