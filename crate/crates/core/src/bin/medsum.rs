use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use medsum::cli::{
    cmd_eval, cmd_review_packets, cmd_run, cmd_validate, BackendMode, CliError, EvalOptions, ExtractorKind, Overrides,
    RunConfig, VerifierKind, EXIT_INVALID, EXIT_OK,
};
use medsum::metrics::Averaging;
use medsum::model::{Method, SelectionMode};

#[derive(Parser)]
#[command(name = "medsum", version, about = "Entity-grounded medical dialogue summarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Medsum,
    Naive,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Live,
    Record,
    Replay,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Random,
    Semantic,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifierArg {
    Llm,
    Exact,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorArg {
    Llm,
    Lexical,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    replay_store: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a JSONL dataset and print per-line results and corpus stats.
    Validate { dataset: PathBuf },

    /// Summarize every encounter, appending records to OUTPUT. Encounters
    /// already in OUTPUT are skipped.
    Run {
        dataset: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        workers: Option<usize>,
        /// Labeled example pool (JSONL).
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        extraction_k: Option<usize>,
        #[arg(long)]
        summarization_k: Option<usize>,
        #[arg(long, value_enum)]
        selection: Option<SelectionArg>,
        #[arg(long)]
        resolver: Option<bool>,
    },

    /// Score run records against reference summaries.
    Eval {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "llm")]
        verifier: VerifierArg,
        /// Defaults to lexical with the exact verifier, llm otherwise.
        #[arg(long, value_enum)]
        extractor: Option<ExtractorArg>,
        /// Pool counts over encounters instead of averaging per-encounter F1.
        #[arg(long)]
        micro: bool,
        /// One verification call per concept.
        #[arg(long)]
        per_concept: bool,
        /// Table output; stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Per-encounter detail (JSONL).
        #[arg(long)]
        json: Option<PathBuf>,
    },

    /// Write blinded A/B review packets for encounters in both record files.
    ReviewPackets {
        first: PathBuf,
        second: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset for age, sex and dialogue context.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

impl ConfigArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            backend: self.backend.map(|b| match b {
                BackendArg::Live => BackendMode::Live,
                BackendArg::Record => BackendMode::Record,
                BackendArg::Replay => BackendMode::Replay,
            }),
            replay_store: self.replay_store.clone(),
            seed: self.seed,
            ..Default::default()
        }
    }
}

fn write_out(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Validate { dataset } => {
            let report = cmd_validate(&dataset)?;
            println!("{report}");
            Ok(if report.is_valid() { EXIT_OK } else { EXIT_INVALID })
        }
        Command::Run {
            dataset,
            output,
            config,
            method,
            workers,
            pool,
            extraction_k,
            summarization_k,
            selection,
            resolver,
        } => {
            let overrides = Overrides {
                method: method.map(|m| match m {
                    MethodArg::Medsum => Method::MedsumEnt,
                    MethodArg::Naive => Method::NaiveBaseline,
                }),
                workers,
                pool,
                extraction_k,
                summarization_k,
                selection: selection.map(|s| match s {
                    SelectionArg::Random => SelectionMode::Random,
                    SelectionArg::Semantic => SelectionMode::Semantic,
                }),
                resolver,
                ..config.overrides()
            };
            let cfg = RunConfig::resolve(config.config.as_deref(), &overrides)?;
            let summary = cmd_run(&dataset, &cfg, &output)?;
            eprintln!("{} written, {} already present", summary.written, summary.already_done);
            Ok(EXIT_OK)
        }
        Command::Eval {
            records,
            dataset,
            config,
            verifier,
            extractor,
            micro,
            per_concept,
            csv,
            json,
        } => {
            let cfg = RunConfig::resolve(config.config.as_deref(), &config.overrides())?;
            let opts = EvalOptions {
                verifier: match verifier {
                    VerifierArg::Llm => VerifierKind::Llm,
                    VerifierArg::Exact => VerifierKind::Exact,
                },
                extractor: extractor.map(|e| match e {
                    ExtractorArg::Llm => ExtractorKind::Llm,
                    ExtractorArg::Lexical => ExtractorKind::Lexical,
                }),
                averaging: if micro { Averaging::Micro } else { Averaging::Macro },
                per_concept,
            };
            let out = cmd_eval(&records, &dataset, &cfg, &opts)?;
            match csv {
                Some(p) => write_out(&p, &out.csv()?)?,
                None => print!("{}", out.csv()?),
            }
            if let Some(p) = json {
                write_out(&p, &out.jsonl()?)?;
            }
            if !out.skipped.is_empty() {
                eprintln!("{} records skipped without a reference summary", out.skipped.len());
            }
            Ok(EXIT_OK)
        }
        Command::ReviewPackets {
            first,
            second,
            out_dir,
            seed,
            dataset,
        } => {
            let summary = cmd_review_packets(&first, &second, dataset.as_deref(), seed, &out_dir)?;
            eprintln!(
                "{} packets, key in {}, {} skipped",
                summary.packets.len(),
                summary.key_file.display(),
                summary.skipped.len()
            );
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
