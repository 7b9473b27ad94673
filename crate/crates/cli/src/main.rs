mod commands;
mod values;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Bridge nodes, transform tree and scene tools.
#[derive(Debug, Parser)]
#[command(name = "scenebridge", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Node name.
    #[arg(long, global = true, env = "SCENEBRIDGE_NODE_NAME")]
    pub node_name: Option<String>,
    /// Spin period in milliseconds.
    #[arg(long, global = true, env = "SCENEBRIDGE_PERIOD_MS")]
    pub period_ms: Option<u64>,
    /// Accept peers on this address (host:port).
    #[arg(long, global = true, env = "SCENEBRIDGE_LISTEN")]
    pub listen: Option<String>,
    /// Connect to a peer (repeatable; comma-separated in the environment).
    #[arg(long, global = true, env = "SCENEBRIDGE_CONNECT", value_delimiter = ',')]
    pub connect: Vec<String>,
    /// Mesh search root (repeatable; comma-separated in the environment).
    #[arg(long, global = true, env = "SCENEBRIDGE_SEARCH_ROOT", value_delimiter = ',')]
    pub search_root: Vec<PathBuf>,
    /// Also write the JSON report to this file.
    #[arg(long, global = true, env = "SCENEBRIDGE_REPORT")]
    pub report: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, env = "SCENEBRIDGE_LOG_LEVEL")]
    pub log_level: Option<String>,
    /// Read settings from a JSON file written by --dump-config.
    #[arg(long, global = true, env = "SCENEBRIDGE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
}

/// Effective settings after merging flags, environment and config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub node_name: String,
    pub period_ms: u64,
    pub listen: Option<String>,
    pub connect: Vec<String>,
    pub search_roots: Vec<PathBuf>,
    pub report: Option<PathBuf>,
    pub log_level: String,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            node_name: "scenebridge".into(),
            period_ms: 20,
            listen: None,
            connect: Vec::new(),
            search_roots: Vec::new(),
            report: None,
            log_level: "warn".into(),
        }
    }
}

impl CliConfig {
    fn resolve(g: &GlobalArgs) -> Result<CliConfig, CliError> {
        let mut c = match &g.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => CliConfig::default(),
        };
        if let Some(v) = &g.node_name {
            c.node_name = v.clone();
        }
        if let Some(v) = g.period_ms {
            c.period_ms = v;
        }
        if g.listen.is_some() {
            c.listen = g.listen.clone();
        }
        if !g.connect.is_empty() {
            c.connect = g.connect.clone();
        }
        if !g.search_root.is_empty() {
            c.search_roots = g.search_root.clone();
        }
        if g.report.is_some() {
            c.report = g.report.clone();
        }
        if let Some(v) = &g.log_level {
            c.log_level = v.clone();
        }
        if c.period_ms == 0 {
            return Err(CliError::Usage("--period-ms must be positive".into()));
        }
        if c.log_level.parse::<log::LevelFilter>().is_err() {
            return Err(CliError::Usage(format!("unknown log level '{}'", c.log_level)));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Latch,
    Literal,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a node until interrupted.
    Serve {
        /// Parameter as name=value; value is JSON when it parses, else a string.
        #[arg(long = "param", value_name = "NAME=VALUE")]
        params: Vec<String>,
        /// JSON object of parameters.
        #[arg(long)]
        param_file: Option<PathBuf>,
        /// Set robot_description from this URDF file.
        #[arg(long)]
        robot_description: Option<PathBuf>,
        /// Stop after this many spins.
        #[arg(long)]
        cycles: Option<u64>,
    },
    /// Publish one message and exit.
    Pub {
        topic: String,
        #[arg(value_name = "TYPE")]
        type_name: String,
        value: String,
        #[arg(long, default_value = "")]
        frame_id: String,
        /// Wait this long for peers before sending.
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
    /// Print received messages as JSON lines.
    Echo {
        topic: String,
        #[arg(value_name = "TYPE")]
        type_name: String,
        count: u64,
        /// Give up after this long without reaching the count.
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
        /// Write received mono8 images to this directory as PGM.
        #[arg(long)]
        pgm_dir: Option<PathBuf>,
    },
    /// Print the parameter set of a remote node.
    Params {
        node: String,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
    },
    /// Parse a URDF file, load its meshes and report its structure.
    LoadUrdf {
        path: PathBuf,
        #[arg(long)]
        fixed_frame: Option<String>,
    },
    /// Round-trip latency benchmark.
    BenchLatency {
        #[arg(long, default_value_t = 20)]
        server_period_ms: u64,
        #[arg(long, default_value_t = 20)]
        client_period_ms: u64,
        #[arg(long, default_value_t = 100)]
        count: u64,
        /// Run both ends in this process, spinning right after each publish.
        #[arg(long, conflicts_with = "threads")]
        in_process: bool,
        /// Run the server on a thread instead of a child process.
        #[arg(long)]
        threads: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Latency relay endpoint used by bench-latency.
    #[command(hide = true)]
    BenchServer {
        #[arg(long, default_value_t = 60)]
        max_seconds: u64,
    },
    /// Spin-duration benchmark with robots loaded.
    BenchSpin {
        #[arg(long)]
        urdf: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        robots: usize,
        #[arg(long, default_value_t = 100)]
        cycles: u64,
        #[arg(long, default_value_t = 10)]
        min_lookups: usize,
    },
    /// Scripted virtual-fixture run against a closed mesh.
    FixtureDemo {
        /// Closed STL surface; a unit sphere when omitted.
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "latch")]
        mode: ModeArg,
        /// How far past the surface the tool goes, mm.
        #[arg(long, default_value_t = 50.0)]
        depth_mm: f64,
        #[arg(long, default_value = "/measured_cp")]
        measured_topic: String,
        #[arg(long, default_value = "/servo_cp")]
        servo_topic: String,
        #[arg(long, default_value = "/body/servo_cf")]
        wrench_topic: String,
    },
    /// Circular pose-array capture, relay and execution.
    RelayDemo {
        #[arg(long, default_value_t = 50.0)]
        radius_mm: f64,
        #[arg(long, default_value_t = 10.0)]
        speed_mm_s: f64,
        #[arg(long, default_value_t = 32)]
        poses: usize,
        #[arg(long, default_value_t = 10.0)]
        sample_period_ms: f64,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let config = match CliConfig::resolve(&cli.global) {
        Ok(c) => c,
        Err(e) => return report_error(e),
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&config.log_level)
        .target(env_logger::Target::Stderr)
        .try_init();
    if cli.global.dump_config {
        return match serde_json::to_string_pretty(&config) {
            Ok(s) => {
                println!("{s}");
                ExitCode::SUCCESS
            }
            Err(e) => report_error(CliError::Runtime(e.into())),
        };
    }
    let Some(command) = cli.command else {
        return report_error(CliError::Usage("no command given; see --help".into()));
    };
    match commands::run(command, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(e),
    }
}

fn report_error(e: CliError) -> ExitCode {
    match e {
        CliError::Usage(m) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        CliError::Runtime(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
