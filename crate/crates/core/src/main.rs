use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use imdd_core::bench::{
    self, estimate_ber, parse_values, reports_to_csv, run_sweep, BerReport, EstimateOptions,
    ReceiverKind, ReceiverSpec, SweepAxis, SweepSpec, TrainedReceiver,
};
use imdd_core::data::{self, DatasetConfig, FileFormat};
use imdd_core::link::{isi_span_estimate, LinkParams};
use imdd_core::neuro::{LossMode, Readout, TrainConfig};
use imdd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "imdd", version, about = "IM/DD link simulator and receiver benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write successive dataset epochs to disk.
    Generate(GenerateArgs),
    /// Train a receiver and save its checkpoint.
    Train(TrainArgs),
    /// Estimate the BER of a checkpoint at one or more noise powers.
    Eval(EvalArgs),
    /// Train and evaluate along one axis.
    Sweep(SweepArgs),
    /// Link diagnostics.
    Diag {
        #[command(subcommand)]
        what: Diag,
    },
}

#[derive(Subcommand)]
enum Diag {
    /// Print the number of symbols holding 99.9% of a pulse's ISI energy.
    Isi(TaskArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Lcd,
    Ssmf,
    Custom,
}

#[derive(Args, Clone)]
struct TaskArgs {
    #[arg(long, value_enum, default_value = "lcd")]
    task: Task,
    /// key = value link configuration; overrides the task preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the noise power of the task, in dB.
    #[arg(long, allow_hyphen_values = true)]
    train_noise_db: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    /// Output file; with several epochs the epoch index is inserted before the
    /// extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["csv", "bin"])]
    format: Option<String>,
    #[arg(long)]
    bit_level: bool,
    #[arg(long)]
    taps: Option<usize>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "snn")]
    receiver: String,
    #[arg(long, default_value_t = 40)]
    hidden: usize,
    #[arg(long)]
    taps: Option<usize>,
    #[arg(long)]
    recurrent: bool,
    #[arg(long, default_value = "motm")]
    readout: String,
    #[arg(long, default_value = "symbol")]
    loss: String,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Learning-rate factor applied after every epoch.
    #[arg(long, default_value_t = 1.0)]
    lr_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print one line per training epoch.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct EstimateArgs {
    #[arg(long, default_value_t = 2000)]
    min_errors: u64,
    #[arg(long, default_value_t = 100_000_000)]
    max_bits: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, allow_hyphen_values = true, conflicts_with = "noise_db_range")]
    noise_db: Option<f64>,
    /// start:stop:step in dB, inclusive.
    #[arg(long, allow_hyphen_values = true)]
    noise_db_range: Option<String>,
    #[command(flatten)]
    estimate: EstimateArgs,
    /// Seeds the evaluation data.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_parser = ["noise", "hidden", "taps"])]
    axis: String,
    /// Comma-separated list or start:stop:step. Defaults to -24:-14:1 for the
    /// noise axis.
    #[arg(long, allow_hyphen_values = true)]
    values: Option<String>,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    estimate: EstimateArgs,
    /// Retrain at every noise point instead of once at the task noise.
    #[arg(long)]
    retrain_per_point: bool,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn link_params(t: &TaskArgs) -> Result<LinkParams> {
    let base = match t.task {
        Task::Lcd | Task::Custom => LinkParams::lcd(),
        Task::Ssmf => LinkParams::ssmf(),
    };
    let mut p = match (&t.config, t.task) {
        (Some(path), _) => LinkParams::from_config_str(&std::fs::read_to_string(path)?, base)?,
        (None, Task::Custom) => return Err(Error::InvalidArgument("--task custom needs --config".into())),
        (None, _) => base,
    };
    if let Some(db) = t.train_noise_db {
        p.noise_power_db = db;
    }
    p.validate()?;
    Ok(p)
}

fn receiver_spec(m: &ModelArgs) -> Result<ReceiverSpec> {
    Ok(ReceiverSpec {
        kind: m.receiver.parse::<ReceiverKind>()?,
        n_hidden: m.hidden,
        recurrent: m.recurrent,
        readout: m.readout.parse::<Readout>()?,
        loss: m.loss.parse::<LossMode>()?,
        seed: m.seed,
        train: TrainConfig {
            epochs: m.epochs,
            batch_size: m.batch_size,
            learning_rate: m.lr,
            lr_decay: m.lr_decay,
            verbose: m.verbose,
            ..TrainConfig::default()
        },
    })
}

fn dataset_config(t: &TaskArgs, taps: Option<usize>) -> Result<DatasetConfig> {
    let cfg = DatasetConfig::new(link_params(t)?);
    match taps {
        Some(n) => data::set_n_taps(&cfg, n),
        None => Ok(cfg),
    }
}

fn estimate_options(e: &EstimateArgs, seed: u64) -> EstimateOptions {
    EstimateOptions {
        min_errors: e.min_errors,
        max_bits: e.max_bits,
        seed,
    }
}

fn emit(reports: &[BerReport], out: Option<&Path>) -> Result<()> {
    let csv = reports_to_csv(reports);
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn epoch_path(out: &Path, epoch: u64, many: bool) -> PathBuf {
    if !many {
        return out.to_path_buf();
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("epoch");
    let name = match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.{epoch}.{ext}"),
        None => format!("{stem}.{epoch}"),
    };
    out.with_file_name(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let mut cfg = dataset_config(&a.task, a.taps)?;
            cfg.link.seed = a.seed;
            cfg.bit_level = a.bit_level;
            let format = match &a.format {
                Some(f) => f.parse::<FileFormat>()?,
                None => FileFormat::from_path(&a.out),
            };
            let dataset = data::Dataset::new(cfg)?;
            for epoch in 0..a.epochs {
                let set = dataset.epoch(epoch)?;
                data::export(&set, &epoch_path(&a.out, epoch, a.epochs > 1), format)?;
            }
        }
        Command::Train(a) => {
            let cfg = dataset_config(&a.task, a.model.taps)?;
            let spec = receiver_spec(&a.model)?;
            let (rx, curve) = bench::train_receiver(&cfg, &spec)?;
            rx.save(&a.out)?;
            if let Some(last) = curve.and_then(|c| c.epochs.last().copied()) {
                eprintln!("final loss {:.5}, training accuracy {:.5}", last.loss, last.accuracy);
            }
        }
        Command::Eval(a) => {
            let rx = TrainedReceiver::load(&a.ckpt)?;
            let cfg = dataset_config(&a.task, None)?;
            let grid = match (&a.noise_db, &a.noise_db_range) {
                (Some(db), _) => vec![*db],
                (None, Some(range)) => parse_values(range)?,
                (None, None) => vec![cfg.link.noise_power_db],
            };
            let opts = estimate_options(&a.estimate, a.seed);
            let reports = grid
                .iter()
                .map(|&db| estimate_ber(rx.as_receiver(), &cfg, db, &opts))
                .collect::<Result<Vec<_>>>()?;
            emit(&reports, a.out.as_deref())?;
        }
        Command::Sweep(a) => {
            let axis: SweepAxis = a.axis.parse()?;
            let values = match (&a.values, axis) {
                (Some(v), _) => parse_values(v)?,
                (None, SweepAxis::Noise) => bench::default_noise_grid(),
                (None, _) => return Err(Error::InvalidArgument("--values is required for this axis".into())),
            };
            let spec = SweepSpec {
                axis,
                values,
                data: dataset_config(&a.task, a.model.taps)?,
                receiver: receiver_spec(&a.model)?,
                estimate: estimate_options(&a.estimate, a.eval_seed),
                retrain_per_point: a.retrain_per_point,
            };
            emit(&run_sweep(&spec)?, a.out.as_deref())?;
        }
        Command::Diag { what: Diag::Isi(t) } => {
            let p = link_params(&t)?;
            println!("{}", isi_span_estimate(&p)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
