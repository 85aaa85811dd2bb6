//! `triad` command-line pipeline.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use triad_core::config::{ClientKind, Overrides, RunConfig};
use triad_core::evalharness::{AnswerScheme, Template};
use triad_core::Result;

mod commands;
pub mod rundir;

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Command-line usage errors, as reported by the argument parser.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "triad", version, about = "Anomaly-map metrics, region tokens, voting, datasets and evaluation")]
pub struct Cli {
    /// TOML config file (`.json` is read as JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    flags: Flags,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the config file; they override file values.
#[derive(Debug, Args)]
struct Flags {
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    run_name: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    box_side: Option<usize>,
    #[arg(long, global = true)]
    iou_merge: Option<f64>,
    #[arg(long, global = true)]
    cap: Option<usize>,
    #[arg(long, global = true)]
    pool: Option<usize>,
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    template: Option<TemplateArg>,
    #[arg(long, global = true, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long, global = true)]
    mfg_store: Option<PathBuf>,
    #[arg(long, global = true)]
    hints: Option<PathBuf>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true, value_enum)]
    client: Option<ClientArg>,
    #[arg(long, global = true)]
    in_flight: Option<usize>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TemplateArg {
    General,
    Onevision,
    Myriad,
    Anomalygpt,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemeArg {
    OptionLetter,
    Keyword,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClientArg {
    Stub,
    Http,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub(crate) enum ShotArg {
    Zero,
    One,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Expert-guided regions and token layout for each sample.
    Regions(commands::RegionsArgs),
    /// Pixel metrics and threshold sweeps over expert maps.
    Metrics(commands::MetricsArgs),
    /// Combine zero-shot and one-shot responses by confidence voting.
    Cvm(commands::CvmArgs),
    /// Instruction dataset operations.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Chain-of-thought data with manufacturing context.
    Cotm {
        #[command(subcommand)]
        command: CotmCommand,
    },
    /// Benchmark prompt rendering and scoring.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Build instruction records from annotated samples.
    Build(commands::DatasetBuildArgs),
}

#[derive(Debug, Subcommand)]
enum CotmCommand {
    /// Generate CoT-M records.
    Generate(commands::CotmArgs),
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Render prompts for an item list.
    Render(commands::RenderArgs),
    /// Score recorded responses.
    Score(commands::ScoreArgs),
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            dataset_root: self.dataset_root.clone(),
            run_dir: self.run_dir.clone(),
            run_name: self.run_name.clone(),
            threshold: self.threshold,
            box_side: self.box_side,
            iou_merge: self.iou_merge,
            cap: self.cap,
            pool: self.pool,
            budget: self.budget,
            seed: self.seed,
            template: self.template.map(|t| match t {
                TemplateArg::General => Template::General,
                TemplateArg::Onevision => Template::Onevision,
                TemplateArg::Myriad => Template::Myriad,
                TemplateArg::Anomalygpt => Template::Anomalygpt,
            }),
            scheme: self.scheme.map(|s| match s {
                SchemeArg::OptionLetter => AnswerScheme::OptionLetter,
                SchemeArg::Keyword => AnswerScheme::Keyword,
            }),
            mfg_store: self.mfg_store.clone(),
            hints: self.hints.clone(),
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            client_kind: self.client.map(|c| match c {
                ClientArg::Stub => ClientKind::Stub,
                ClientArg::Http => ClientKind::Http,
            }),
            in_flight: self.in_flight,
            workers: self.workers,
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let config = RunConfig::resolve(cli.config.as_deref(), &cli.flags.overrides())?;
    match &cli.command {
        Command::Regions(a) => commands::regions(&config, a),
        Command::Metrics(a) => commands::metrics(&config, a),
        Command::Cvm(a) => commands::cvm(&config, a),
        Command::Dataset { command: DatasetCommand::Build(a) } => commands::dataset_build(&config, a),
        Command::Cotm { command: CotmCommand::Generate(a) } => commands::cotm_generate(&config, a),
        Command::Eval { command: EvalCommand::Render(a) } => commands::eval_render(&config, a),
        Command::Eval { command: EvalCommand::Score(a) } => commands::eval_score(&config, a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
