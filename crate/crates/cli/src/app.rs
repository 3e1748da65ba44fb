//! Command-line entry points.

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use creative_morph::bundle::ModelBundle;
use creative_morph::fixtures::{generate_fixtures, load_fixtures, load_sample_file, save_fixtures};
use creative_morph::geometry::{build_template_with_uv, CANONICAL_LEVEL};
use creative_morph::pipeline::{sweep_alpha, transfer, write_sweep, write_transfer, TransferSpec};
use creative_morph::texture_style::Method;
use creative_morph::trainer::{ablate_drgnet, run, Stage, TrainConfig};

use crate::service::{serve, ServiceState};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] creative_morph::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(creative_morph::Error::Config(_)) => "config",
            CliError::Core(creative_morph::Error::Io { .. }) => "io",
            CliError::Core(creative_morph::Error::Checkpoint(_)) => "checkpoint",
            CliError::Core(creative_morph::Error::NonFinite { .. }) => "non_finite",
            CliError::Core(_) => "model",
            CliError::Runtime(_) => "runtime",
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "creative-morph",
    version,
    about = "Creative 3D bird shape and texture transfer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic fixture sets.
    Fixtures {
        #[command(subcommand)]
        action: FixturesAction,
    },
    /// Train the shape or texture stage.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        #[arg(long, env = "CREATIVE_MORPH_CONFIG")]
        config: PathBuf,
        /// `key=value`; dotted keys reach nested fields.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Transfer shape and texture from a target onto a source.
    Transfer {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, allow_hyphen_values = true, value_parser = parse_alpha, default_value_t = 0.0)]
        alpha: f64,
        #[command(flatten)]
        style: StyleArgs,
        #[arg(long, env = "CREATIVE_MORPH_OUT")]
        out: PathBuf,
    },
    /// Render a strip of transfers at evenly spaced alpha.
    SweepAlpha {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = 9, value_parser = clap::value_parser!(u32).range(2..))]
        steps: u32,
        #[command(flatten)]
        style: StyleArgs,
        #[arg(long, env = "CREATIVE_MORPH_OUT")]
        out: PathBuf,
    },
    /// Train one shape model per DRG depth and report reconstruction IoU.
    AblateDrgnet {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        layers: Vec<usize>,
        #[arg(long, env = "CREATIVE_MORPH_CONFIG")]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP inference service.
    Serve {
        #[arg(long, env = "CREATIVE_MORPH_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "CREATIVE_MORPH_ASSETS")]
        assets: PathBuf,
        #[arg(long, env = "CREATIVE_MORPH_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "CREATIVE_MORPH_HOST", default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

#[derive(Debug, Subcommand)]
pub enum FixturesAction {
    Generate {
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    Shape,
    Texture,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Sample descriptor JSON of the source asset.
    #[arg(long)]
    source: PathBuf,
    /// Sample descriptor JSON of the target asset.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, env = "CREATIVE_MORPH_CHECKPOINT")]
    checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct StyleArgs {
    /// Switch gates for head, neck, belly and back, e.g. `1,0,0,0`.
    #[arg(long = "sg", value_parser = parse_gates, default_value = "0,0,0,0")]
    gates: [bool; 4],
    #[arg(long, value_parser = parse_method, default_value = "sadain")]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if !a.is_finite() || a.abs() > 1.0 {
        return Err(format!("alpha must lie in [-1, 1], got {s}"));
    }
    Ok(a)
}

fn parse_gates(s: &str) -> Result<[bool; 4], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected 4 comma-separated gates, got {}", parts.len()));
    }
    let mut out = [false; 4];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = match p {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(format!("gate value '{other}' is not 0/1/true/false")),
        };
    }
    Ok(out)
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>()
        .map_err(|_| format!("unknown method '{s}' (expected sadain, slst or sefdm)"))
}

fn load_config(path: &Path, overrides: &[String], stage: Option<Stage>) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| creative_morph::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut all = overrides.to_vec();
    if let Some(stage) = stage {
        let name = match stage {
            Stage::Shape => "shape",
            Stage::Texture => "texture",
        };
        all.insert(0, format!("stage={name}"));
    }
    Ok(TrainConfig::from_json(&text, &all)?)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn spec(style: &StyleArgs, alpha: f64) -> TransferSpec {
    TransferSpec {
        alpha,
        switch_gates: style.gates,
        method: style.method,
        seed: style.seed,
        ..TransferSpec::default()
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fixtures {
            action: FixturesAction::Generate { n, seed, out },
        } => {
            let template = build_template_with_uv(CANONICAL_LEVEL)?;
            let set = generate_fixtures(n, seed, &template)?;
            save_fixtures(&set, &out)?;
            print_json(&json!({
                "out": out,
                "samples": set.samples.iter().map(|s| json!({
                    "id": s.id, "foreground_fraction": s.foreground_fraction()
                })).collect::<Vec<_>>(),
            }));
        }
        Command::Train {
            stage,
            config,
            overrides,
        } => {
            let stage = match stage {
                StageArg::Shape => Stage::Shape,
                StageArg::Texture => Stage::Texture,
            };
            let cfg = load_config(&config, &overrides, Some(stage))?;
            let outcome = run(&cfg)?;
            let last = outcome.trace.last();
            print_json(&json!({
                "stage": cfg.stage,
                "iterations_run": outcome.trace.len(),
                "final": last,
                "checkpoints": outcome.checkpoints,
            }));
        }
        Command::Transfer {
            pair,
            alpha,
            style,
            out,
        } => {
            let bundle = ModelBundle::load(&pair.checkpoint, None)?;
            let source = load_sample_file(&pair.source)?;
            let target = load_sample_file(&pair.target)?;
            let result = transfer(&bundle, &source, &target, &spec(&style, alpha))?;
            write_transfer(&bundle, &result, &out)?;
            print_json(&serde_json::to_value(&result.report).map_err(creative_morph::Error::from)?);
        }
        Command::SweepAlpha {
            pair,
            steps,
            style,
            out,
        } => {
            let bundle = ModelBundle::load(&pair.checkpoint, None)?;
            let source = load_sample_file(&pair.source)?;
            let target = load_sample_file(&pair.target)?;
            let sweep = sweep_alpha(&bundle, &source, &target, steps as usize, &spec(&style, 0.0))?;
            write_sweep(&sweep, &out)?;
            print_json(&json!({
                "out": out,
                "alphas": sweep.summary.frames.iter().map(|f| f.alpha).collect::<Vec<_>>(),
                "path_length": sweep.summary.path_length,
            }));
        }
        Command::AblateDrgnet {
            layers,
            config,
            overrides,
            out,
        } => {
            if layers.is_empty() || layers.contains(&0) {
                return Err(CliError::Runtime("--layers needs positive depths".into()));
            }
            let cfg = load_config(&config, &overrides, Some(Stage::Shape))?;
            let fixtures = load_fixtures(&cfg.fixtures)?;
            let rows = ablate_drgnet(&cfg, &fixtures, &layers)?;
            println!("{:>6} | {:>9} | {:>10}", "layers", "mean IoU", "train loss");
            for r in &rows {
                println!("{:>6} | {:>9.4} | {:>10.4}", r.layers, r.mean_iou, r.final_train_loss);
            }
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&rows).map_err(creative_morph::Error::from)?;
                std::fs::write(&path, text + "\n").map_err(|e| creative_morph::Error::Io { path, source: e })?;
            }
        }
        Command::Serve {
            checkpoint,
            assets,
            port,
            host,
        } => {
            let state = Arc::new(ServiceState::load(&checkpoint, &assets)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            rt.block_on(serve(state, SocketAddr::new(host, port)))
                .map_err(|e| CliError::Runtime(format!("server failed: {e}")))?;
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 on success, 2 on usage errors, 1 otherwise.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let body = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{body}");
            1
        }
    }
}
