// SPDX-License-Identifier: Apache-2.0

//! `adc`: command-line front-end for the agriculture monitoring data cube.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use chrono::NaiveDateTime;
use clap::{Args, Parser, Subcommand, ValueEnum};

use adc_core::{Error, ErrorKind};
use commands::Workspace;
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "adc", version, about = "Agriculture monitoring data cube", arg_required_else_help = true)]
pub struct Cli {
    /// Working directory holding the catalog, parcels and knowledge base.
    #[arg(long, global = true, default_value = "adc-data")]
    pub data_dir: PathBuf,

    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Fixed timestamp (YYYY-MM-DDTHH:MM:SS) for catalog and knowledge-base records.
    #[arg(long, global = true, value_parser = parse_timestamp)]
    pub clock: Option<NaiveDateTime>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

fn parse_timestamp(s: &str) -> Result<NaiveDateTime, String> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest products whose bands are stored as tile files, then run pending steps.
    Ingest {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic dataset into the data directory.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Burn parcels into a label raster.
    Rasterize {
        /// Parcel feature collection (default: <data-dir>/parcels.json).
        #[arg(long)]
        parcels: Option<PathBuf>,
        /// Grid definition file (default: <data-dir>/grid.json).
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Output tile file (default: <data-dir>/labels.tiles).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zonal statistics per parcel and period.
    Stats(StatsArgs),
    /// Grouped versus serial zonal statistics benchmark.
    Bench(BenchArgs),
    /// Prepare one parcel's mean time series.
    Sits {
        #[arg(long)]
        parcel: i32,
        #[arg(long, default_value = "NDVI")]
        band: String,
        /// Pipeline configuration file (JSON).
        #[arg(long)]
        pipeline: Option<PathBuf>,
        #[arg(long, default_value_t = 5.0)]
        inward_buffer: f64,
        #[arg(long, default_value_t = 50.0)]
        cloud_buffer: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a feature space.
    Features {
        #[arg(long, value_enum, default_value = "parcel")]
        level: Level,
        /// Feature specification file (JSON).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a parcel query against the knowledge base.
    Query {
        /// Query specification file (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        inward_buffer: f64,
        #[arg(long, default_value_t = 50.0)]
        cloud_buffer: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a canned end-to-end scenario.
    Scenario {
        #[arg(value_enum)]
        name: ScenarioArg,
        /// Scenario configuration file (JSON); defaults to the bundled two-year demo.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: <data-dir>/scenario/out).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Per-period composites of one band over a parcel or a box.
    Animate(AnimateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Level {
    Parcel,
    Pixel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScenarioArg {
    Query1,
    Query2,
    Query3,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Engine {
    Grouped,
    Serial,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Statistics, comma separated or repeated.
    #[arg(long = "stat", value_delimiter = ',', default_value = "mean")]
    pub stats: Vec<String>,
    #[arg(long, default_value = "month")]
    pub period: String,
    #[arg(long, value_delimiter = ',', default_value = "NDVI")]
    pub bands: Vec<String>,
    #[arg(long, default_value_t = 5.0)]
    pub inward_buffer: f64,
    #[arg(long, default_value_t = 50.0)]
    pub cloud_buffer: f64,
    #[arg(long, default_value_t = 1.0)]
    pub max_cloud: f64,
    #[arg(long, value_enum, default_value = "grouped")]
    pub engine: Engine,
    /// First day (YYYY-MM-DD).
    #[arg(long)]
    pub from: Option<String>,
    /// Last day, inclusive (YYYY-MM-DD).
    #[arg(long)]
    pub to: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 2048)]
    pub grid_side: usize,
    #[arg(long, default_value_t = 12)]
    pub months: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Largest parcel count timed with the serial engine.
    #[arg(long, default_value_t = 10_000)]
    pub serial_max_parcels: usize,
    /// Also time the serial engine at every size (the 100k run can take hours).
    #[arg(long)]
    pub serial_all: bool,
    /// Wall-clock budget per serial run, in seconds.
    #[arg(long, default_value_t = 600.0)]
    pub serial_budget_s: f64,
    /// Scratch directory for the benchmark cube (default: <data-dir>/bench).
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    #[arg(long, conflicts_with = "bbox", required_unless_present = "bbox")]
    pub parcel: Option<i32>,
    /// min_x,min_y,max_x,max_y in grid coordinates.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub bbox: Option<Vec<f64>>,
    #[arg(long, default_value = "NDVI")]
    pub band: String,
    #[arg(long, conflicts_with = "period", required_unless_present = "period")]
    pub step_days: Option<i32>,
    /// Calendar frames instead of fixed steps: day, month, season or year.
    #[arg(long)]
    pub period: Option<String>,
    #[arg(long)]
    pub from: String,
    #[arg(long)]
    pub to: String,
    #[arg(long, default_value_t = 5.0)]
    pub inward_buffer: f64,
    #[arg(long, default_value_t = 50.0)]
    pub cloud_buffer: f64,
    /// Value range mapped onto the colormap.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.0, 1.0])]
    pub range: Vec<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Precondition => 3,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    let ws = Workspace::new(cli.data_dir.clone(), cli.clock);
    let manifest_path = commands::manifest_path(&cli.command, &ws);
    let mut manifest = RunManifest::new(argv, &manifest_path);
    let start = Instant::now();
    let result = commands::run(&cli.command, &ws, &mut manifest);
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    let code = match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            manifest.error = Some(e.to_string());
            exit_code(&e)
        }
    };
    manifest.exit_code = code as i32;
    if let Err(e) = manifest.write(&manifest_path) {
        eprintln!("warning: could not write run manifest {}: {e}", manifest_path.display());
    }
    ExitCode::from(code)
}
