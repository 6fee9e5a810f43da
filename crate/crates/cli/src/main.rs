//! Command-line front end: synthesize datasets, train, evaluate across the
//! four generalization scenarios, gradient-check, and pretty-print reports.
//!
//! Exit codes: 0 success, 1 input/usage error, 2 internal error (including
//! a failed gradient check).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use emoscale::checkpoint;
use emoscale::data::{
    load_dataset, scenario_split, synth_dataset, write_dataset, Scenario, WindowSpec,
};
use emoscale::error::Error;
use emoscale::eval::{evaluate_all, fold_samples, EvalReport, RunManifest};
use emoscale::model::ModelConfig;
use emoscale::train::{grad_check, train, ScheduleConfig};

#[derive(Parser)]
#[command(
    name = "emoscale",
    version,
    about = "Valence/arousal regression from physiological signals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset directory
    Synth(SynthArgs),
    /// Train on one fold of a scenario split; writes checkpoint, manifest
    /// and training report into --out
    Train(TrainArgs),
    /// Evaluate a checkpoint across all four scenarios; writes eval.json
    /// and eval.txt into --out
    Eval(EvalArgs),
    /// Compare reverse-mode gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Pretty-print a saved evaluation report
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    subjects: u32,
    #[arg(long, default_value_t = 8)]
    videos: u32,
    /// Trial duration in seconds
    #[arg(long, default_value_t = 60)]
    duration: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `synth` (or matching its layout)
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Architecture preset: desk or paper
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Override the preset's window length
    #[arg(long)]
    seq_len: Option<usize>,
    /// Seed for parameter initialization (the config seed)
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Scenario whose training fold supplies the training windows
    #[arg(long, default_value = "across_time")]
    scenario: String,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Seed for shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Window stride in samples
    #[arg(long, default_value_t = 1000)]
    hop: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    lr_min: f64,
    /// First schedule cycle in steps; 0 means one epoch of steps
    #[arg(long, default_value_t = 0)]
    t0: usize,
    #[arg(long, default_value_t = 1)]
    t_mult: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed for the subject-grouping split
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    hop: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entries probed per parameter group
    #[arg(long, default_value_t = 8)]
    samples: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Param(_)
                | Error::Range(_)
                | Error::Input(_)
                | Error::Parse { .. }
                | Error::Io(_) => 1,
                Error::Dim(_) | Error::Train(_) => 2,
            })
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Synth(args) => {
            let trials = synth_dataset(args.seed, args.subjects, args.videos, args.duration);
            write_dataset(&trials, &args.out)?;
            println!(
                "wrote {} trials ({} subjects x {} videos, {} s each) to {}",
                trials.len(),
                args.subjects,
                args.videos,
                args.duration,
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Report(args) => {
            let report = EvalReport::load(&args.report)?;
            print!("{}", report.table());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let mut config = ModelConfig::preset(&args.preset)?;
    if let Some(seq_len) = args.seq_len {
        config.seq_len = seq_len;
    }
    config.seed = args.model_seed;
    config.validate()?;

    let scenario = Scenario::from_str(&args.scenario)?;
    let trials = load_dataset(&args.data)?;
    let win = WindowSpec {
        seq_len: config.seq_len,
        hop: args.hop,
    };
    let plan = scenario_split(&trials, scenario, args.fold, args.split_seed, &win)?;
    let (train_set, val_set, _stats, warnings) = fold_samples(&trials, &plan, &win)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if train_set.is_empty() {
        return Err(Error::Input(format!(
            "{scenario} fold {} provides no training windows",
            args.fold
        )));
    }

    let steps_per_epoch = train_set.len().div_ceil(args.batch);
    let sched = ScheduleConfig {
        lr_max: args.lr,
        lr_min: args.lr_min,
        t0: if args.t0 == 0 {
            steps_per_epoch
        } else {
            args.t0
        },
        t_mult: args.t_mult,
    };
    println!(
        "training on {} windows ({} validation), {} epochs, batch {}, {} steps/epoch",
        train_set.len(),
        val_set.len(),
        args.epochs,
        args.batch,
        steps_per_epoch
    );
    let (model, mut report) = train(
        &train_set,
        &val_set,
        &config,
        &sched,
        args.epochs,
        args.batch,
        args.seed,
    )?;

    fs::create_dir_all(&args.out)
        .map_err(|e| Error::Io(format!("creating {}: {e}", args.out.display())))?;
    let ckpt_path = args.out.join("checkpoint.json");
    checkpoint::save(&model, &ckpt_path)?;
    report.checkpoint = Some(ckpt_path.display().to_string());

    let report_body = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Io(format!("train report serialization failed: {e}")))?;
    fs::write(args.out.join("train_report.json"), report_body)?;

    let manifest = RunManifest {
        config,
        schedule: sched,
        train_seed: args.seed,
        epochs: args.epochs,
        batch_size: args.batch,
        hop: args.hop,
        train_scenario: scenario,
        train_fold: args.fold,
        split_seed: args.split_seed,
        data_dir: args.data.display().to_string(),
        n_trials: trials.len(),
        checkpoint: ckpt_path.display().to_string(),
        created_unix_s: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    manifest.save(&args.out.join("manifest.json"))?;

    for (epoch, (loss, val)) in report
        .epoch_train_loss
        .iter()
        .zip(&report.epoch_val_rmse)
        .enumerate()
    {
        match val {
            Some(v) => println!("epoch {epoch}: train mse {loss:.6}, val rmse {v:.4}"),
            None => println!("epoch {epoch}: train mse {loss:.6}"),
        }
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(ExitCode::SUCCESS)
}

fn run_eval(args: EvalArgs) -> Result<ExitCode, Error> {
    let model = checkpoint::load(&args.checkpoint)?;
    let trials = load_dataset(&args.data)?;
    let report = evaluate_all(&model, &trials, args.seed, args.hop)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| Error::Io(format!("creating {}: {e}", args.out.display())))?;
    report.save(&args.out.join("eval.json"))?;
    fs::write(args.out.join("eval.txt"), report.table())?;
    print!("{}", report.table());
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(args: GradcheckArgs) -> Result<ExitCode, Error> {
    let config = ModelConfig::preset(&args.preset)?;
    let report = grad_check(&config, args.eps, args.seed, args.samples)?;
    for group in &report.groups {
        match group.max_rel_err {
            Some(err) => println!(
                "{:<40} {:>3} entries  max rel err {err:.3e}",
                group.name, group.entries_checked
            ),
            None => println!("{:<40} frozen: no gradient", group.name),
        }
    }
    println!(
        "worst relative error: {:.3e} (tolerance {:.1e})",
        report.worst, args.tol
    );
    if report.passes(args.tol) {
        println!("gradient check passed");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check FAILED");
        Ok(ExitCode::from(2))
    }
}
