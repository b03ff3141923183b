//! `lidarscope`: batch front end for the range-image detection toolkit.

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::config::{RunConfig, CONFIG_ENV};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "lidarscope", version, about = "Range-image LiDAR detection toolkit")]
struct Cli {
    /// Flat `key = value` config file; falls back to $LIDARSCOPE_CONFIG.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for frame-level parallelism (0: one per core).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the config keys; a flag beats the file.
#[derive(Debug, Args)]
#[command(next_help_heading = "Run configuration")]
struct Overrides {
    /// KITTI-layout dataset root (label_2/, calib/, velodyne/).
    #[arg(long, global = true, value_name = "DIR")]
    dataset: Option<String>,
    /// High-resolution channel table: hdl64e, vlp32 or a file.
    #[arg(long, global = true, value_name = "TABLE")]
    source_table: Option<String>,
    /// 32-channel table defining the detector rows: vlp32, hdl64e or a file.
    #[arg(long, global = true, value_name = "TABLE")]
    target_table: Option<String>,
    /// `frame_id sequence_id` file for `split`.
    #[arg(long, global = true, value_name = "FILE")]
    sequence_map: Option<String>,
    /// Directory for per-frame outputs.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<String>,
    /// Objectness threshold [default: 0.05].
    #[arg(long, global = true, value_name = "T")]
    threshold: Option<String>,
    /// NMS grid cell size in meters [default: 0.2].
    #[arg(long, global = true, value_name = "M")]
    cell_size: Option<String>,
    /// NMS footprint coverage: cell-center or conservative [default: cell-center].
    #[arg(long, global = true, value_name = "MODE")]
    coverage: Option<String>,
    /// Objectness minimum filter ROWSxCOLS or none [default: 3x5].
    #[arg(long, global = true, value_name = "RxC")]
    min_window: Option<String>,
    /// Column border of the filter: wrap or clip [default: wrap].
    #[arg(long, global = true, value_name = "MODE")]
    column_edge: Option<String>,
    /// Classification window of `encode`: camera, front180 or all [default: camera].
    #[arg(long, global = true, value_name = "W")]
    window: Option<String>,
    /// Range image columns per revolution [default: 1808].
    #[arg(long, global = true, value_name = "N")]
    columns: Option<String>,
    /// Channel subset shifts, comma separated [default: -1,0,1].
    #[arg(long, global = true, value_name = "LIST", allow_hyphen_values = true)]
    shifts: Option<String>,
    /// Channel subset variants, comma separated [default: 0,1,2,3].
    #[arg(long, global = true, value_name = "LIST")]
    variants: Option<String>,
    /// Maximum gap deviation of a channel subset in degrees [default: 0.5].
    #[arg(long, global = true, value_name = "DEG")]
    match_tolerance_deg: Option<String>,
    /// Near-tie tolerance of channel matching in degrees [default: 0.15].
    #[arg(long, global = true, value_name = "DEG")]
    tie_tolerance_deg: Option<String>,
    /// Column padding of `bench forward`: zero or circular [default: zero].
    #[arg(long, global = true, value_name = "MODE")]
    padding: Option<String>,
    /// Recall samples of the interpolated AP [default: 11].
    #[arg(long, global = true, value_name = "N")]
    ap_points: Option<String>,
    /// RNG seed [default: 0].
    #[arg(long, global = true, value_name = "N")]
    seed: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        [
            ("dataset", &self.dataset),
            ("source_table", &self.source_table),
            ("target_table", &self.target_table),
            ("sequence_map", &self.sequence_map),
            ("output_dir", &self.output_dir),
            ("threshold", &self.threshold),
            ("cell_size", &self.cell_size),
            ("coverage", &self.coverage),
            ("min_window", &self.min_window),
            ("column_edge", &self.column_edge),
            ("window", &self.window),
            ("columns", &self.columns),
            ("shifts", &self.shifts),
            ("variants", &self.variants),
            ("match_tolerance_deg", &self.match_tolerance_deg),
            ("tie_tolerance_deg", &self.tie_tolerance_deg),
            ("padding", &self.padding),
            ("ap_points", &self.ap_points),
            ("seed", &self.seed),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Point cloud(s) to LRI1 range image(s).
    Convert(ConvertArgs),
    /// 64-row LRI1 image(s) to 25-row images through a channel subset.
    Simulate(SimulateArgs),
    /// Dataset frames to LPM1 targets and masks.
    Encode(EncodeArgs),
    /// LPM1 prediction maps, or an oracle on a synthetic scene, to detections.
    Detect(DetectArgs),
    /// Detections against dataset labels: AP report CSV.
    Evaluate(EvaluateArgs),
    /// Reference-vehicle accuracy report CSV.
    Refeval(RefevalArgs),
    /// Channel tables, subsets and reconstruction.
    Channels(ChannelsArgs),
    /// Timing of suppression, post-processing or the reference network.
    Bench(BenchArgs),
    /// Sequence-preserving train/validation split.
    Split(SplitArgs),
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// A .bin scan or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    /// Output .lri file, or a directory when the input is one.
    #[arg(long)]
    pub output: PathBuf,
    /// Fixed channel table (hdl64e, vlp32 or a file) instead of reconstructing channels.
    #[arg(long, value_name = "TABLE")]
    pub table: Option<String>,
    /// Channels to reconstruct.
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    /// Conversion statistics CSV; stdout if absent.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// A 64-row .lri image or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    /// Output .lri file, or a directory when the input is one.
    #[arg(long)]
    pub output: PathBuf,
    /// Subset id; a seeded random pick per frame if absent.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Chosen-subset CSV; stdout if absent.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Frame id; repeatable. All labelled frames if absent.
    #[arg(long = "frame")]
    pub frames: Vec<String>,
    /// Directory of `<frame>.lri` images; built from the scans if absent.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Summary CSV; stdout if absent.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["prediction", "oracle"])))]
pub struct DetectArgs {
    /// LPM1 prediction map, or a directory of `<frame>.lpm`.
    #[arg(long, requires = "image")]
    pub prediction: Option<PathBuf>,
    /// LRI1 image matching the prediction, or a directory of `<frame>.lri`.
    #[arg(long, requires = "prediction")]
    pub image: Option<PathBuf>,
    /// Frame id of a single prediction [default: file stem].
    #[arg(long)]
    pub frame_id: Option<String>,
    /// Raycast a scene and post-process its exact target map.
    #[arg(long, requires = "scene")]
    pub oracle: bool,
    /// Scene file for --oracle.
    #[arg(long, requires = "oracle")]
    pub scene: Option<PathBuf>,
    /// Detections file; stdout if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Detections file.
    #[arg(long)]
    pub detections: PathBuf,
    /// Split file; only frames of --subset are evaluated.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Split subset to evaluate: train or val.
    #[arg(long, default_value = "val", requires = "split")]
    pub subset: String,
    /// Comma-separated spaces: 2d, bev, 3d.
    #[arg(long, value_delimiter = ',', default_value = "2d,bev,3d")]
    pub spaces: Vec<String>,
    /// Comma-separated classes: car, pedestrian, cyclist.
    #[arg(long, value_delimiter = ',', default_value = "car,pedestrian,cyclist")]
    pub classes: Vec<String>,
    /// AP report CSV; stdout if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Precision-recall curve CSV.
    #[arg(long)]
    pub pr_curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefevalArgs {
    /// Detections file.
    #[arg(long)]
    pub detections: PathBuf,
    /// Reference track: `frame_id x y z l w h yaw` per line.
    #[arg(long)]
    pub track: PathBuf,
    /// Horizontal match radius in meters.
    #[arg(long, default_value_t = lidarscope_core::evaluation::DEFAULT_MATCH_RADIUS)]
    pub match_radius: f64,
    /// Report CSV; stdout if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["plot", "list", "reconstruct"])))]
pub struct ChannelsArgs {
    /// Both channel tables with the selected rows, as CSV.
    #[arg(long)]
    pub plot: bool,
    /// Every channel subset of the source table.
    #[arg(long)]
    pub list: bool,
    /// Channel elevations recovered from a .bin scan.
    #[arg(long, value_name = "SCAN")]
    pub reconstruct: Option<PathBuf>,
    /// Subset marked in --plot.
    #[arg(long, default_value_t = 0)]
    pub subset: usize,
    /// Channels to reconstruct.
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    /// Output file; stdout if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BenchTarget {
    /// Grid suppression of --n random detections.
    Nms,
    /// Filter, extraction and suppression of a random 25-row map.
    Pipeline,
    /// Reference forward pass of a small network.
    Forward,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub target: BenchTarget,
    /// Detections for `nms`.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 50)]
    pub repeats: usize,
    /// Report CSV; stdout if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Minimum validation frames.
    #[arg(long)]
    pub target: usize,
    /// Frame id list, one per line [default: dataset frames, else the map's frames].
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// Split file; stdout if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(&p)?,
        None => RunConfig::default(),
    };
    for (k, v) in cli.overrides.pairs() {
        cfg.set(k, v, Path::new(""))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let jobs = cli.jobs.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    match &cli.command {
        Command::Convert(a) => commands::convert(&cfg, a),
        Command::Simulate(a) => commands::simulate(&cfg, a),
        Command::Encode(a) => commands::encode(&cfg, a),
        Command::Detect(a) => commands::detect(&cfg, a, jobs != 1),
        Command::Evaluate(a) => commands::evaluate(&cfg, a),
        Command::Refeval(a) => commands::refeval(a),
        Command::Channels(a) => commands::channels(&cfg, a),
        Command::Bench(a) => commands::bench(&cfg, a, jobs != 1),
        Command::Split(a) => commands::split(&cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lidarscope: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
