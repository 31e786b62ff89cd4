//! `faithkit`: generate benchmarks, build perturbation pairs, score
//! predictions, train the toy model and profile its gradients.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use faithkit::metrics::AmbiguityPolicy;
use faithkit::synthgen::SplitName;
use serde::Serialize;

use commands::{CliResult, FileConfig};
use manifest::{sha256_hex, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "faithkit", version, about = "Detail-faithfulness toolkit")]
struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML file with optional [generator], [train], [model] and [profile] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ControlArg {
    Random,
    None,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Generate documents, samples and a document-level split.
    Gen {
        #[arg(long)]
        n_docs: Option<usize>,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Build minimal perturbation pairs from generated samples.
    Perturb {
        #[arg(long)]
        samples: PathBuf,
        /// Comma-separated error types (names, t1..t5 or tau1..tau5).
        #[arg(long)]
        types: Option<String>,
        /// Restrict to one split; reads split.json next to the samples unless --split-file is given.
        #[arg(long)]
        split: Option<SplitArg>,
        #[arg(long)]
        split_file: Option<PathBuf>,
    },
    /// Score predictions against gold analyses.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Source documents for citation consistency.
        #[arg(long)]
        documents: Option<PathBuf>,
        /// Leave ambiguous span matches out of the error rate.
        #[arg(long)]
        strict_ambiguous: bool,
    },
    /// Train the toy model with DPO plus evidence supervision.
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Per-token gradient profiles of minimal pairs and random controls.
    Gradprofile {
        #[arg(long)]
        pairs: PathBuf,
        /// Model to analyse; a fresh initialization when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "random")]
        control: ControlArg,
        #[arg(long)]
        limit: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Perturb { .. } => "perturb",
            Command::Eval { .. } => "eval",
            Command::Train { .. } => "train",
            Command::Gradprofile { .. } => "gradprofile",
        }
    }

    fn inputs(&self) -> Vec<String> {
        let show = |p: &Path| p.display().to_string();
        match self {
            Command::Gen { .. } => vec![],
            Command::Perturb { samples, split_file, .. } => std::iter::once(samples).chain(split_file).map(|p| show(p)).collect(),
            Command::Eval { gold, predictions, documents, .. } => [gold, predictions].into_iter().chain(documents).map(|p| show(p)).collect(),
            Command::Train { pairs, heldout, .. } => std::iter::once(pairs).chain(heldout).map(|p| show(p)).collect(),
            Command::Gradprofile { pairs, checkpoint, .. } => std::iter::once(pairs).chain(checkpoint).map(|p| show(p)).collect(),
        }
    }
}

/// Applies command-line overrides to the file configuration.
fn effective_config(cli: &Cli) -> CliResult<FileConfig> {
    let mut cfg = FileConfig::load(cli.config.as_deref())?;
    cfg.generator.rng_seed = cli.seed;
    match &cli.command {
        Command::Gen { n_docs, n_samples } => {
            if let Some(n) = n_docs {
                cfg.generator.n_documents = *n;
            }
            if let Some(n) = n_samples {
                cfg.generator.n_samples = *n;
            }
        }
        Command::Train { epochs, beta, lambda, .. } => {
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.beta = beta.unwrap_or(cfg.train.beta);
            cfg.train.lambda = lambda.unwrap_or(cfg.train.lambda);
        }
        Command::Gradprofile { limit, .. } => cfg.profile.limit = limit.unwrap_or(cfg.profile.limit),
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &FileConfig) -> CliResult<commands::Outcome> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Gen { .. } => commands::gen(&cfg.generator, out),
        Command::Perturb { samples, types, split, split_file } => {
            let types = commands::parse_types(types.as_deref())?;
            let default_split = samples.with_file_name("split.json");
            let split = split.map(|s| {
                let name = match s {
                    SplitArg::Train => SplitName::Train,
                    SplitArg::Val => SplitName::Val,
                    SplitArg::Test => SplitName::Test,
                };
                (name, split_file.as_deref().unwrap_or(&default_split))
            });
            commands::perturb(samples, split, &types, cli.seed, out)
        }
        Command::Eval { gold, predictions, documents, strict_ambiguous } => {
            let policy = if *strict_ambiguous { AmbiguityPolicy::Strict } else { AmbiguityPolicy::Threshold };
            commands::eval(gold, predictions, documents.as_deref(), policy, out)
        }
        Command::Train { pairs, heldout, .. } => commands::train_cmd(pairs, heldout.as_deref(), cfg, cli.seed, out),
        Command::Gradprofile { pairs, checkpoint, control, .. } => {
            commands::gradprofile(pairs, checkpoint.as_deref(), *control == ControlArg::Random, cfg, cli.seed, out)
        }
    }
}

#[derive(Serialize)]
struct HashedRun<'a> {
    command: &'a Command,
    seed: u64,
    config: &'a FileConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FAITHKIT_LOG", "warn")).init();
    let cli = Cli::parse();
    let started = Instant::now();
    let name = cli.command.name();

    let cfg = effective_config(&cli);
    let hash = match &cfg {
        Ok(c) => sha256_hex(&serde_json::to_vec(&HashedRun { command: &cli.command, seed: cli.seed, config: c }).unwrap_or_default()),
        Err(_) => String::new(),
    };
    let mut manifest = RunManifest::new(name, hash, cli.seed, cli.command.inputs());
    let result = cfg.and_then(|c| run(&cli, &c));
    let code = match result {
        Ok(outcome) => match manifest.record_outputs(&cli.out, &outcome.outputs) {
            Ok(()) => 0,
            Err(e) => {
                manifest.error = Some(e.to_string());
                2
            }
        },
        Err(e) => {
            eprintln!("faithkit {name}: {}", e.message());
            manifest.error = Some(e.message().to_string());
            e.exit_code()
        }
    };
    manifest.exit_code = code;
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    if let Err(e) = manifest.write(&cli.out) {
        eprintln!("faithkit {name}: cannot write manifest: {e}");
    }
    ExitCode::from(code as u8)
}

