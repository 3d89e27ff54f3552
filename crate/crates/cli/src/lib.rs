//! The `mgnm` command line: synthetic data, training, evaluation, ablations,
//! inference, plots and graph dumps, each run leaving a replayable
//! manifest.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mgnm::synth::TaskKind;
use serde::{Deserialize, Serialize};

mod commands;
pub mod config;
pub mod manifest;
pub mod plot;

pub use config::{Config, Env};
pub use manifest::Manifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(mgnm::Error),
    #[error("{0}")]
    Failed(String),
}

impl From<mgnm::Error> for CliError {
    fn from(e: mgnm::Error) -> Self {
        match e {
            mgnm::Error::InvalidConfig(m) => CliError::Config(m),
            e @ mgnm::Error::ConfigMismatch { .. } => CliError::Config(e.to_string()),
            e => CliError::Run(e),
        }
    }
}

impl CliError {
    /// 2 for configuration problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mgnm", version, about = "Human-object interaction detection with a multimodal graph network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,

    /// TOML file with [model], [providers], [train], [eval] and [synth] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for training and data generation (overrides MGNM_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory, or output file for synth, infer and dump-graph
    /// (overrides MGNM_OUT_DIR).
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,

    /// Config override, e.g. `--set train.epochs=50`; repeatable.
    #[arg(long = "set", global = true, value_name = "TABLE.KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Re-run the command recorded in a manifest and check its result.
    #[arg(long, global = true)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset file.
    Synth(SynthArgs),
    /// Train the interaction predictor and evaluate it.
    Train(TrainArgs),
    /// Score predictions or a checkpoint in every protocol setting.
    Eval(EvalArgs),
    /// Write predictions of a checkpoint for one split.
    Infer(InferArgs),
    /// Train a vanilla model and one model per disabled graph stage.
    Ablate(AblateArgs),
    /// Render PR curves (SVG) and decoder attention maps (PNG).
    Plot(PlotArgs),
    /// Write the per-iteration node, pair and adjacency tensors of one scene.
    DumpGraph(DumpGraphArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Infer(_) => "infer",
            Command::Ablate(_) => "ablate",
            Command::Plot(_) => "plot",
            Command::DumpGraph(_) => "dump-graph",
        }
    }

    fn checkpoint(&self) -> Option<&Path> {
        match self {
            Command::Eval(a) => a.checkpoint.as_deref(),
            Command::Infer(a) => Some(&a.checkpoint),
            Command::Plot(a) => a.checkpoint.as_deref(),
            Command::DumpGraph(a) => a.checkpoint.as_deref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DataArg {
    /// Dataset file; without it the [synth] table is generated in memory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// Training scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub test_scenes: Option<usize>,
    /// Long-tail exponent (0 is balanced).
    #[arg(long)]
    pub exponent: Option<f64>,
    /// Categories including person.
    #[arg(long)]
    pub categories: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// `train` or `test` (overrides eval.split).
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct InferArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Stages to disable one at a time.
    #[arg(long, value_delimiter = ',', default_value = "spatial,visual,textual,interaction")]
    pub stages: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PlotArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Predictions for the PR curves; without it they come from the checkpoint.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Scene for the attention maps; defaults to the first scene with pairs.
    #[arg(long)]
    pub scene: Option<String>,
    /// Pair row whose attention is drawn.
    #[arg(long, default_value_t = 0)]
    pub pair: usize,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DumpGraphArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Trained weights; without it the seeded initialisation is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
}

/// Resolved inputs of one command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: Config,
    pub out: Option<PathBuf>,
    /// Base for relative provider file paths.
    pub base_dir: PathBuf,
    pub replay: bool,
}

/// Layers the config: file (or the `config.toml` next to a checkpoint),
/// environment, `--seed`, `--set`, then command flags.
pub fn resolve(cli: &Cli, command: &Command, env: &Env) -> Result<Context, CliError> {
    let file = cli.config.clone().or_else(|| {
        command
            .checkpoint()
            .and_then(|ck| ck.parent())
            .map(|d| d.join("config.toml"))
            .filter(|p| p.is_file())
    });
    let mut table = match &file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in &cli.overrides {
        apply_override(&mut table, o)?;
    }
    let mut config: Config = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if let Some(seed) = cli.seed.or(env.seed) {
        config.set_seed(seed);
    }
    apply_command_flags(&mut config, command);
    config.sync_dims();
    config.validate()?;
    let base_dir = file
        .as_ref()
        .and_then(|p| p.parent())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(Context {
        config,
        out: cli.out.clone().or_else(|| env.out_dir.clone()),
        base_dir,
        replay: false,
    })
}

/// `table.key=value`; the value is parsed as TOML and falls back to a bare
/// string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let bad = || CliError::Config(format!("override `{spec}` is not TABLE.KEY=VALUE"));
    let (path, raw) = spec.split_once('=').ok_or_else(bad)?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(bad());
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{k}` in `{spec}` is not a table")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn apply_command_flags(config: &mut Config, command: &Command) {
    let split = |c: &mut Config, s: &Option<String>| {
        if let Some(s) = s {
            c.eval.split = s.clone();
        }
    };
    match command {
        Command::Synth(a) => {
            let s = &mut config.synth;
            if let Some(t) = a.task {
                s.task = t;
                s.num_actions = s.num_actions.max(t.required_actions());
            }
            if let Some(n) = a.scenes {
                s.train_scenes = n;
            }
            if let Some(n) = a.test_scenes {
                s.test_scenes = n;
            }
            if let Some(e) = a.exponent {
                s.long_tail_exponent = e;
            }
            if let Some(c) = a.categories {
                s.num_categories = c;
            }
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                config.train.epochs = e;
            }
        }
        Command::Ablate(a) => {
            if let Some(e) = a.epochs {
                config.train.epochs = e;
            }
        }
        Command::Eval(a) => split(config, &a.split),
        Command::Infer(a) => split(config, &a.split),
        Command::Plot(a) => split(config, &a.split),
        Command::DumpGraph(a) => split(config, &a.split),
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = Env::from_process().and_then(|env| execute(&cli, &env));
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command line against explicit environment overrides and
/// returns the manifest of the run.
pub fn execute(cli: &Cli, env: &Env) -> Result<Manifest, CliError> {
    if let Some(path) = &cli.replay {
        return commands::replay(path, cli.out.clone(), cli.command.as_ref());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Config("a subcommand or --replay is required".into()));
    };
    let ctx = resolve(cli, command, env)?;
    commands::dispatch(command.clone(), ctx)
}
