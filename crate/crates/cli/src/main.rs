mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "sunformer", version, about = "Sun direction estimation from image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset of patch sequences.
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write error reports.
    Eval(EvalArgs),
    /// Estimate the sun direction for one sequence (JSON on stdout; azimuth in
    /// degrees counterclockwise from world +x, altitude in degrees).
    Predict(PredictArgs),
    /// Aggregate an estimate file per sequence (JSON lines on stdout or --out).
    Baseline(BaselineArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Sun azimuth and altitude for a place and time.
    #[command(allow_negative_numbers = true)]
    Solar(SolarArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Small network for a single CPU (16 px patches).
    Desk,
    /// Full-size network (224 px patches).
    Paper,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregatorArg {
    Mean,
    Meanshift,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionArg {
    /// Patches attend to each other.
    Joint,
    /// Each patch attends only to itself (independent estimates).
    PerPatch,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability that a patch carries no lighting cue.
    #[arg(long, default_value_t = 0.25)]
    pub outlier_prob: f64,
    /// Standard deviation of additive pixel noise (intensity units, pixels in [0, 1]).
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Frames per sequence.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Crops per frame.
    #[arg(long, default_value_t = 4)]
    pub crops: usize,
    /// Sets the patch size: desk 16 px, paper 224 px.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Patch side in pixels; replaces the desk size, must be 224 with --preset paper.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Lowest sun altitude drawn, degrees.
    #[arg(long, default_value_t = 5.0)]
    pub min_altitude_deg: f64,
    /// Highest sun altitude drawn, degrees.
    #[arg(long, default_value_t = 85.0)]
    pub max_altitude_deg: f64,
    /// Threads; output does not depend on this.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Overwrite an existing dataset.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation dataset directory (early stopping).
    #[arg(long)]
    pub val: PathBuf,
    /// Output directory for checkpoint.bin, metrics.jsonl, timing.jsonl and run.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Seeds initialization, shuffling and dropout.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the preset learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides the preset epoch limit.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the preset early-stopping patience, in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Overrides the preset batch size, in sequences.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides the preset transformer depth.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Overrides the preset head count; must divide the model width.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Overrides the preset dropout probability.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum, default_value_t = AttentionArg::Joint)]
    pub attention: AttentionArg,
    /// Weight of the calibrated-mean loss term.
    #[arg(long)]
    pub aggregate_weight: Option<f64>,
    /// Also store the optimizer moments in the checkpoint.
    #[arg(long)]
    pub with_optimizer: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct AggregateOpts {
    #[arg(long, value_enum, default_value_t = AggregatorArg::Mean)]
    pub aggregator: AggregatorArg,
    /// Mean-shift kernel bandwidth, degrees.
    #[arg(long, default_value_t = sunformer::aggregate::DEFAULT_BANDWIDTH.to_degrees())]
    pub bandwidth: f64,
    /// Mean-shift outlier clip, in angular standard deviations.
    #[arg(long, default_value_t = sunformer::aggregate::DEFAULT_OUTLIER_SIGMA)]
    pub outlier_sigma: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for report.csv, report.json and cdf.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub agg: AggregateOpts,
    /// Standard deviation of random pose error added before inference, degrees.
    #[arg(long, default_value_t = 0.0)]
    pub pose_noise_deg: f64,
    /// Seeds the pose noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Expected encoding; a checkpoint trained with another is rejected.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Expected per-angle encoding width; a checkpoint trained with another is rejected.
    #[arg(long)]
    pub d_angle: Option<usize>,
    /// Threads; output does not depend on this.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding the sequence.
    #[arg(long)]
    pub data: PathBuf,
    /// Sequence id within the dataset.
    #[arg(long, default_value_t = 0)]
    pub sequence: u64,
    #[command(flatten)]
    pub agg: AggregateOpts,
    /// Standard deviation of random pose error added before inference, degrees.
    #[arg(long, default_value_t = 0.0)]
    pub pose_noise_deg: f64,
    /// Seeds the pose noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the per-patch estimates as JSON lines (input for `baseline`).
    #[arg(long)]
    pub estimates_out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    /// JSON-lines estimate file: sequence_id, patch_id, frame_id, v, yaw_deg, pitch_deg.
    #[arg(long)]
    pub estimates: PathBuf,
    /// Write results here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AggregatorArg::Meanshift)]
    pub aggregator: AggregatorArg,
    /// Mean-shift kernel bandwidth, degrees.
    #[arg(long, default_value_t = sunformer::aggregate::DEFAULT_BANDWIDTH.to_degrees())]
    pub bandwidth: f64,
    /// Mean-shift outlier clip, in angular standard deviations.
    #[arg(long, default_value_t = sunformer::aggregate::DEFAULT_OUTLIER_SIGMA)]
    pub outlier_sigma: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seeds the random test inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the results as one JSON document.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SolarArgs {
    /// Latitude, degrees north.
    pub lat_deg: f64,
    /// Longitude, degrees east.
    pub lon_deg: f64,
    /// UTC time, RFC 3339 (e.g. 2020-03-20T12:07:00Z).
    #[arg(value_parser = parse_time)]
    pub time: DateTime<Utc>,
}

fn parse_time(s: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| format!("expected an RFC 3339 time: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res: Result<(), CliError> = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Baseline(a) => commands::baseline(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Solar(a) => commands::solar(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
