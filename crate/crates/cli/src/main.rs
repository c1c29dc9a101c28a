mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use maplabel::{CoordFormat, PlacementMethod};

use crate::config::{EmbedderBackend, Override};

#[derive(Debug, Parser)]
#[command(name = "maplabel", version, about = "Map label placement: dataset tooling, LLM placement and evaluation")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "ALP_CONFIG")]
    config: Option<PathBuf>,

    /// Override any config key, e.g. `--set llm.max_retries=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,

    /// Where to write the run manifest instead of the default location.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// Print errors as a JSON object on stderr.
    #[arg(long, global = true)]
    error_json: bool,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
            SplitName::All => "all",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fetch landmarks for a region and add the map to a dataset.
    Ingest(IngestArgs),
    /// Derive ground-truth labels from detected text and report coverage.
    GroundTruth(GroundTruthArgs),
    /// Split a guideline document into sections and build the vector index.
    Index(IndexArgs),
    /// Predict label positions and write a results file.
    Place(PlaceArgs),
    /// Score one or more results files against ground truth.
    Eval(EvalArgs),
    /// Write instruction/response pairs for fine-tuning.
    ExportTuning(ExportArgs),
    /// Draw landmarks, ground truth and predictions as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Region as `south,west,north,east` in degrees.
    #[arg(long, allow_hyphen_values = true)]
    pub bbox: String,
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    #[arg(long)]
    pub city: String,
    #[arg(long)]
    pub map_id: String,
    /// Dataset directory; created if missing, otherwise the map is added or replaced.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset name for a new dataset.
    #[arg(long)]
    pub name: Option<String>,
    /// Map API endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,
}

#[derive(Debug, Args)]
pub struct GroundTruthArgs {
    pub dataset: PathBuf,
    /// Coverage report path (default: `<dataset>/coverage.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub guidelines: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedderBackend>,
}

#[derive(Debug, Args)]
pub struct PlaceArgs {
    pub dataset: PathBuf,
    /// Guideline index; required for the llm method.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub method: PlacementMethod,
    #[arg(long, default_value = "list")]
    pub format: CoordFormat,
    /// Include nearby landmarks in prompts.
    #[arg(long)]
    pub neighbors: bool,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitName,
    #[arg(long)]
    pub out: PathBuf,
    /// Anchor for the anchor method, e.g. `top` or `ne`.
    #[arg(long)]
    pub anchor: Option<String>,
    /// Chat model id.
    #[arg(long)]
    pub model: Option<String>,
    /// Chat completions endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub dataset: PathBuf,
    /// Results files (JSON lines). Several files give a comparison table.
    #[arg(required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitName,
    /// Write the report(s) as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write per-landmark rows as CSV (single results file only).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitName,
    #[arg(long, default_value = "list")]
    pub format: CoordFormat,
    #[arg(long)]
    pub neighbors: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Misuse of the command line detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// The run was interrupted; partial outputs may exist.
#[derive(Debug)]
pub struct Cancelled;

impl std::fmt::Display for Cancelled {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("interrupted")
    }
}

impl std::error::Error for Cancelled {}

/// Short category for an error, used in manifests and error JSON.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return "usage";
        }
        if cause.is::<Cancelled>() {
            return "cancelled";
        }
        if cause.is::<maplabel::ingest::IngestError>() {
            return "dataset";
        }
        if cause.is::<maplabel::groundtruth::GtError>() {
            return "ground_truth";
        }
        if cause.is::<maplabel::guidelines::GuidelineError>() {
            return "guidelines";
        }
        if cause.is::<maplabel::prompting::PromptError>() {
            return "prompting";
        }
        if let Some(e) = cause.downcast_ref::<maplabel::llm::LlmError>() {
            return e.kind();
        }
        if cause.is::<maplabel::baselines::BaselineError>() {
            return "baseline";
        }
        if cause.is::<maplabel::eval::EvalError>() {
            return "eval";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn exit_code_for(kind: &str) -> u8 {
    match kind {
        "usage" => 2,
        "cancelled" => 130,
        _ => 1,
    }
}

fn report_error(err: &anyhow::Error, as_json: bool) -> ExitCode {
    let kind = error_kind(err);
    let code = exit_code_for(kind);
    if as_json {
        let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
        let body = serde_json::json!({
            "error": { "kind": kind, "message": err.to_string(), "causes": causes },
            "exit_code": code,
        });
        eprintln!("{body}");
    } else {
        eprintln!("error: {err:#}");
    }
    ExitCode::from(code)
}

/// Everything a subcommand needs besides its own arguments.
pub struct Context {
    pub config: config::Config,
    pub manifest_override: Option<PathBuf>,
    pub args: Vec<String>,
    pub cancel: Arc<AtomicBool>,
}

fn flag_overrides(cli: &Cli) -> Result<Vec<Override>> {
    let mut out = Vec::new();
    match &cli.command {
        Command::Ingest(a) => {
            if let Some(e) = &a.endpoint {
                out.push(Override::flag("ingest", "endpoint", e));
            }
        }
        Command::Index(a) => {
            if let Some(b) = a.embedder {
                let name = b.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
                out.push(Override::flag("embedding", "backend", name));
            }
        }
        Command::Place(a) => {
            if let Some(v) = &a.anchor {
                out.push(Override::flag("anchor", "anchor", v));
            }
            if let Some(v) = &a.model {
                out.push(Override::flag("llm", "model_id", v));
            }
            if let Some(v) = &a.endpoint {
                out.push(Override::flag("llm", "endpoint_url", v));
            }
        }
        _ => {}
    }
    for s in &cli.set {
        out.push(Override::parse_assignment(s).map_err(|e| UsageError(e.to_string()))?);
    }
    Ok(out)
}

fn run(cli: Cli, cancel: Arc<AtomicBool>) -> Result<()> {
    let flags = flag_overrides(&cli)?;
    let env = config::env_overrides(std::env::vars())?;
    let config = config::resolve(cli.config.as_deref(), &flags, &env)?;
    let ctx = Context {
        config,
        manifest_override: cli.manifest.clone(),
        args: std::env::args().skip(1).collect(),
        cancel,
    };
    match &cli.command {
        Command::Ingest(a) => commands::ingest(&ctx, a),
        Command::GroundTruth(a) => commands::ground_truth(&ctx, a),
        Command::Index(a) => commands::index(&ctx, a),
        Command::Place(a) => commands::place(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::ExportTuning(a) => commands::export_tuning(&ctx, a),
        Command::Render(a) => commands::render(&ctx, a),
    }
}

fn main() -> ExitCode {
    let wants_json = std::env::args().any(|a| a == "--error-json");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if wants_json => {
            let err = anyhow::Error::new(UsageError(e.kind().to_string())).context(e.to_string().trim().to_string());
            return report_error(&err, true);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };

    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let cancel = Arc::new(AtomicBool::new(false));
    let flag = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install interrupt handler: {e}");
    }

    let as_json = cli.error_json;
    match run(cli, cancel) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e, as_json),
    }
}
