mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::error::CliError;
use crate::settings::*;

/// Sea-ice floe collisions: simulate, learn, forecast and assimilate.
#[derive(Debug, Parser)]
#[command(name = "floe", version)]
struct Cli {
    /// TOML file with one table per command (`[generate]`, `[train]`, ...).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw of the command.
    #[arg(long, global = true, env = "FLOE_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate reference trajectories with the contact model.
    Generate(GenerateArgs),
    /// Fit a surrogate to trajectories and write a checkpoint.
    Train(TrainArgs),
    /// Free-run a checkpoint from the first two states of a trajectory.
    Rollout(RolloutArgs),
    /// Ensemble twin experiment against a reference trajectory.
    Assimilate(AssimilateArgs),
    /// Score a checkpoint against a reference trajectory.
    Evaluate(EvaluateArgs),
    /// Draw trajectory frames as SVG files.
    Render(RenderArgs),
    /// Print the chain interaction graph for a number of floes.
    Graph(GraphArgs),
    /// Re-run the command recorded in an artifact and compare the bytes.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Output file, or directory when `--count` is above one.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    floes: Option<usize>,
    /// Domain walls as `LEFT,RIGHT`.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    domain: Option<(f64, f64)>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    thickness: Option<f64>,
    #[arg(long)]
    youngs_modulus: Option<f64>,
    #[arg(long)]
    density: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Trajectory files or directories of them.
    #[arg(long = "data", num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    contact_fraction: Option<f64>,
    /// mish, relu or silu.
    #[arg(long, value_parser = kebab::<floe_core::Activation>)]
    activation: Option<floe_core::Activation>,
    /// two-step or one-step.
    #[arg(long, value_parser = kebab::<floe_core::cn::History>)]
    history: Option<floe_core::cn::History>,
    /// velocity or position.
    #[arg(long, value_parser = kebab::<floe_core::cn::Target>)]
    target: Option<floe_core::cn::Target>,
    /// Predict velocity changes rather than velocities.
    #[arg(long)]
    residual: Option<bool>,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct AssimilateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Ensemble-mean trajectory.
    #[arg(short, long)]
    output: PathBuf,
    /// Per-analysis `step,rmse,spread` table.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// enkf or etkf.
    #[arg(long)]
    filter: Option<floe_core::FilterKind>,
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    sigma_model: Option<f64>,
    #[arg(long)]
    sigma_obs: Option<f64>,
    #[arg(long)]
    interval: Option<usize>,
    /// Observed floe indices, comma separated.
    #[arg(long, value_delimiter = ',')]
    observe: Option<Vec<usize>>,
    #[arg(long)]
    inflation: Option<f64>,
    /// every-step, per-unit-time or analysis-only.
    #[arg(long, value_parser = kebab::<floe_core::assim::NoiseSchedule>)]
    noise_schedule: Option<floe_core::assim::NoiseSchedule>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Score this free run instead of rolling one out.
    #[arg(long)]
    prediction: Option<PathBuf>,
    /// Also sweep these horizons, comma separated.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    /// Write the report here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Per-floe correlation bar chart (SVG).
    #[arg(long)]
    chart: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Directory for `frame_NNNNNN.svg` files.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    start: Option<usize>,
    #[arg(long)]
    end: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Debug, Args)]
struct GraphArgs {
    #[arg(long, default_value_t = 3)]
    floes: usize,
    /// Also print the dense sender and receiver matrices.
    #[arg(long)]
    dense: bool,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Trajectory, checkpoint or evaluation report carrying provenance.
    artifact: PathBuf,
}

fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

macro_rules! overlay {
    ($settings:ident, $args:ident: $($field:ident),+) => {
        $(if let Some(v) = $args.$field { $settings.$field = v; })+
    };
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    match cli.command {
        Command::Generate(a) => {
            let mut s: GenerateSettings = file.section(file.generate.as_ref(), "generate")?;
            overlay!(s, a: floes, domain, steps, dt, count, radius, thickness, youngs_modulus, density);
            commands::generate(&s, seed, &a.output)
        }
        Command::Train(a) => {
            let mut s: TrainSettings = file.section(file.train.as_ref(), "train")?;
            if !a.data.is_empty() {
                s.data = a.data;
            }
            overlay!(s, a: epochs, pairs_per_epoch, batch_size, learning_rate, lr_decay, validation_fraction,
                contact_fraction, activation, history, target, residual);
            commands::train(&s, seed, &a.output)
        }
        Command::Rollout(a) => {
            let mut s: RolloutSettings = file.section(file.rollout.as_ref(), "rollout")?;
            overlay!(s, a: checkpoint, truth);
            if a.steps.is_some() {
                s.steps = a.steps;
            }
            commands::rollout(&s, seed, &a.output)
        }
        Command::Assimilate(a) => {
            let mut s: AssimilateSettings = file.section(file.assimilate.as_ref(), "assimilate")?;
            overlay!(s, a: checkpoint, truth, filter, members, sigma_model, sigma_obs, interval, observe,
                inflation, noise_schedule);
            commands::assimilate(&s, seed, &a.output, a.diagnostics.as_deref())
        }
        Command::Evaluate(a) => {
            let mut s: EvaluateSettings = file.section(file.evaluate.as_ref(), "evaluate")?;
            overlay!(s, a: checkpoint, truth, horizons);
            if a.prediction.is_some() {
                s.prediction = a.prediction;
            }
            commands::evaluate(&s, seed, a.output.as_deref(), a.chart.as_deref())
        }
        Command::Render(a) => {
            let mut s: RenderSettings = file.section(file.render.as_ref(), "render")?;
            overlay!(s, a: trajectory, start, stride);
            if a.end.is_some() {
                s.end = a.end;
            }
            commands::render(&s, &a.output)
        }
        Command::Graph(a) => commands::graph(a.floes, a.dense),
        Command::Replay(a) => commands::replay(&a.artifact),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("floe: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
