//! `qread`: generate, train, evaluate, explore and simulate single-shot
//! qubit readout from the command line.

mod artifacts;
mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qread_core::baseline::ReadoutWindow;
use qread_core::QuantScheme;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "qread", version, about = "Single-shot qubit readout lab")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Root seed; every random draw of the run derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Verbose diagnostics on stderr.
    #[arg(long, global = true)]
    pub debug: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MethodArg {
    Th,
    Mf,
    Nn,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a labeled shot set.
    Gen(GenArgs),
    /// Find the noise level that puts threshold readout at a target fidelity.
    Calibrate(CalibrateArgs),
    /// Fit a discriminator.
    Train(TrainArgs),
    /// Score a model on a shot set; prints a JSON fidelity report.
    Eval(EvalArgs),
    /// Sweep readout windows and methods.
    Dse(DseArgs),
    /// Replay a shot set through the cycle-accurate classifier IP model.
    Sim(SimArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Shots per class.
    #[arg(long, default_value_t = 25_000)]
    pub shots: usize,
    /// Output file; `.csv` selects the CSV layout, anything else the binary one.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-quadrature noise; skips calibration.
    #[arg(long, conflicts_with = "calibration")]
    pub sigma: Option<f64>,
    /// Calibration file from `qread calibrate`.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Target used when calibrating on the fly.
    #[arg(long, default_value_t = 0.96)]
    pub target_fidelity: f64,
    /// Window used when calibrating on the fly.
    #[arg(long, default_value = "100:400", value_parser = parse_window)]
    pub window: ReadoutWindow,
    /// Shots per class in the on-the-fly calibration set.
    #[arg(long, default_value_t = 5_000)]
    pub cal_shots: usize,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, default_value_t = 0.96)]
    pub target_fidelity: f64,
    #[arg(long, default_value = "100:400", value_parser = parse_window)]
    pub window: ReadoutWindow,
    /// Shots per class in the calibration set.
    #[arg(long, default_value_t = 5_000)]
    pub shots: usize,
    /// Calibration JSON; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Nn)]
    pub method: MethodArg,
    #[arg(long, default_value = "100:400", value_parser = parse_window)]
    pub window: ReadoutWindow,
    /// float32, fix<bits> or ternary.
    #[arg(long, default_value = "ternary", value_parser = parse_quant)]
    pub quant: QuantScheme,
    /// Network shape `in:hidden`; `in` must be twice the window size.
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<(usize, usize)>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Share of the data held out for early stopping.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Must match the window the model was fitted on.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<ReadoutWindow>,
    /// Score the bit-exact fixed-point engine instead of the float model.
    #[arg(long)]
    pub fxp: bool,
    /// Right shift applied to ADC codes before the fixed-point engine.
    #[arg(long, default_value_t = 0)]
    pub scaling_factor: u32,
    /// Also write the report here (with a manifest).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DseArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Grid CSV; a `<out>.plot.json` is written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated, e.g. `TH,MF,NN4:ternary`.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub starts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Skip the per-start cell covering the rest of the trace.
    #[arg(long)]
    pub no_full_window: bool,
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// A network model (`kind: mlp`).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Cycles between trigger and capture (default: the model's window start).
    #[arg(long)]
    pub offset: Option<u32>,
    /// Window override; must match the model.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<ReadoutWindow>,
    #[arg(long, default_value_t = 0)]
    pub scaling_factor: u32,
    /// Replay at most this many shots.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Prediction records as CSV; with --debug also `<out>.trace.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_window(s: &str) -> Result<ReadoutWindow, String> {
    s.parse().map_err(|e: qread_core::baseline::BaselineError| e.to_string())
}

fn parse_quant(s: &str) -> Result<QuantScheme, String> {
    s.parse().map_err(|e: qread_core::mlp::MlpError| e.to_string())
}

fn parse_arch(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("expected in:hidden, got {s:?}");
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("bad arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::Usage(msg.to_string()).render());
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
