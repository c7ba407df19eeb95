//! The `kgchat` command line: one binary covering the whole pipeline from
//! raw text to an evaluated dialogue model.
//!
//! Subcommands: `build-corpus`, `train-tokenizer`, `train`, `index`,
//! `search`, `chat`, `self-chat`, `evaluate`, `report`, and `rerun`.
//! Every run writes a machine-readable manifest recording its arguments,
//! seed, tool version, and the SHA-256 of every input and output file;
//! `rerun` replays a manifest and verifies the outputs reproduce
//! bit-identically.
//!
//! Exit codes: 0 on success, 1 on validation or runtime failures, 2 on
//! usage errors (unknown subcommands or flags).

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use kgchat_core::inference::{
    DecodeConfig, DecodeStrategy, CHAT_MAX_NEW_TOKENS, CHAT_TEMPERATURE, CHAT_TOP_P,
};
use kgchat_core::knowledge_store::Index;
use kgchat_core::model::{ModelConfig, Parameters};
use kgchat_core::tokenizer::Vocabulary;
use kgchat_core::training::load_checkpoint;

use config::FileConfig;
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "kgchat",
    version,
    about = "Knowledge-grounded dialogue at desk scale",
    long_about = "Build corpora, train the tokenizer and model, index documents, chat \
                  interactively with retrieval, run self-chat evaluations, and score \
                  human annotations — all from one binary.\n\n\
                  Every run writes a JSON manifest (inputs, outputs, checksums, seed); \
                  `kgchat rerun --manifest FILE` replays a recorded run and verifies the \
                  outputs reproduce bit-identically.",
    propagate_version = true
)]
pub struct Cli {
    /// TOML file with default paths and decode settings; overrides the
    /// KGCHAT_CONFIG environment variable.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Where to write the run manifest (default: next to the primary
    /// output, or `<subcommand>.manifest.json` in the working directory).
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,

    /// Log progress details to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert raw threads and documents into a mixed dialogue corpus and
    /// training samples.
    BuildCorpus(commands::build_corpus::BuildCorpusArgs),
    /// Learn a byte-level BPE vocabulary from dialogue or text files.
    TrainTokenizer(commands::train_tokenizer::TrainTokenizerArgs),
    /// Train one phase of the model: pretrain, finetune, or stage2.
    Train(commands::train::TrainArgs),
    /// Build the retrieval index over a document collection.
    Index(commands::index::IndexArgs),
    /// Query a retrieval index and print the ranked hits.
    Search(commands::search::SearchArgs),
    /// Chat with a trained model in the terminal, showing the query it
    /// issued and the document it retrieved on every turn.
    Chat(commands::chat::ChatArgs),
    /// Let the model talk to itself about each topic in a file.
    SelfChat(commands::self_chat::SelfChatArgs),
    /// Score human annotation files: per-model metric means, agreement,
    /// and relative improvement.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Re-render a saved evaluation report as text or CSV.
    Report(commands::report::ReportArgs),
    /// Replay a recorded run from its manifest and verify the outputs
    /// reproduce bit-identically.
    Rerun(commands::rerun::RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BuildCorpus(_) => "build-corpus",
            Command::TrainTokenizer(_) => "train-tokenizer",
            Command::Train(_) => "train",
            Command::Index(_) => "index",
            Command::Search(_) => "search",
            Command::Chat(_) => "chat",
            Command::SelfChat(_) => "self-chat",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
            Command::Rerun(_) => "rerun",
        }
    }
}

/// What a finished subcommand reports back for the run manifest.
#[derive(Debug, Default)]
pub struct RunArtifacts {
    /// The random seed the run used, when it used one.
    pub seed: Option<u64>,
    /// Files the run read.
    pub inputs: Vec<PathBuf>,
    /// Files the run wrote.
    pub outputs: Vec<PathBuf>,
    /// Whether re-running with the same arguments reproduces the outputs
    /// byte for byte. Interactive chat is the one exception.
    pub deterministic: bool,
}

impl RunArtifacts {
    fn deterministic() -> Self {
        RunArtifacts {
            deterministic: true,
            ..RunArtifacts::default()
        }
    }
}

/// Top-level entry point: parse `argv` (without the program name) and run.
/// Usage errors print clap's message and exit with code 2 directly.
pub fn run(argv: &[String]) -> Result<()> {
    let cli = match try_parse(argv) {
        Ok(cli) => cli,
        Err(err) => err.exit(),
    };
    init_logging(cli.verbose);
    execute(cli, argv)
}

/// Parse argv without touching the process; `rerun` uses this so a stale
/// manifest becomes a validation failure instead of a usage error.
pub fn try_parse(argv: &[String]) -> Result<Cli, clap::Error> {
    Cli::try_parse_from(std::iter::once("kgchat".to_string()).chain(argv.iter().cloned()))
}

fn init_logging(verbose: bool) {
    let default = if verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format_timestamp(None)
        .try_init();
}

/// Create the parent directory of an output file so `--out some/dir/file`
/// works without a separate mkdir.
pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    Ok(())
}

/// Dispatch a parsed invocation and write its run manifest. `argv` is the
/// raw argument list, recorded verbatim so the run can be replayed.
pub fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    let file_config = config::load(cli.config.as_deref())?;
    let subcommand = cli.command.name();
    let artifacts = match cli.command {
        Command::BuildCorpus(args) => commands::build_corpus::run(args)?,
        Command::TrainTokenizer(args) => commands::train_tokenizer::run(args)?,
        Command::Train(args) => commands::train::run(args, &file_config)?,
        Command::Index(args) => commands::index::run(args)?,
        Command::Search(args) => commands::search::run(args, &file_config)?,
        Command::Chat(args) => commands::chat::run(args, &file_config)?,
        Command::SelfChat(args) => commands::self_chat::run(args, &file_config)?,
        Command::Evaluate(args) => commands::evaluate::run(args)?,
        Command::Report(args) => commands::report::run(args)?,
        Command::Rerun(args) => {
            // The replayed command writes its own manifest; rerun itself
            // only verifies.
            return commands::rerun::run(args);
        }
    };

    let manifest_path = cli
        .manifest
        .clone()
        .unwrap_or_else(|| manifest::default_path(subcommand, artifacts.outputs.first()));
    let manifest = RunManifest::collect(subcommand, argv, &artifacts)?;
    manifest.write(&manifest_path)?;
    log::info!("run manifest: {}", manifest_path.display());
    Ok(())
}

/// Decode settings shared by `chat` and `self-chat`. Anything not given
/// here falls back to the config file, then to the chat defaults
/// (top-p 0.9, temperature 1.0, 128 new tokens, seed 0).
#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Token selection rule.
    #[arg(long, value_enum, value_name = "RULE")]
    pub strategy: Option<StrategyArg>,
    /// Nucleus mass for top-p sampling.
    #[arg(long, value_name = "P")]
    pub top_p: Option<f64>,
    /// Softmax temperature.
    #[arg(long, value_name = "T")]
    pub temperature: Option<f64>,
    /// Generation budget per decoded message.
    #[arg(long, value_name = "N")]
    pub max_new_tokens: Option<usize>,
    /// Base random seed; recorded in the run manifest.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Greedy,
    TopP,
}

impl From<StrategyArg> for DecodeStrategy {
    fn from(value: StrategyArg) -> Self {
        match value {
            StrategyArg::Greedy => DecodeStrategy::Greedy,
            StrategyArg::TopP => DecodeStrategy::TopP,
        }
    }
}

impl DecodeArgs {
    pub fn resolve(&self, cfg: &FileConfig) -> Result<DecodeConfig> {
        let decode = DecodeConfig {
            strategy: self
                .strategy
                .map(DecodeStrategy::from)
                .or(cfg.decode.strategy)
                .unwrap_or(DecodeStrategy::TopP),
            p: self.top_p.or(cfg.decode.top_p).unwrap_or(CHAT_TOP_P),
            temperature: self
                .temperature
                .or(cfg.decode.temperature)
                .unwrap_or(CHAT_TEMPERATURE),
            max_new_tokens: self
                .max_new_tokens
                .or(cfg.decode.max_new_tokens)
                .unwrap_or(CHAT_MAX_NEW_TOKENS),
            seed: self.seed.or(cfg.seed).unwrap_or(0),
            // respond() caps selection at the vocabulary size itself.
            vocab_limit: None,
        };
        decode.validate()?;
        Ok(decode)
    }
}

/// Model, vocabulary, and index paths shared by `chat` and `self-chat`;
/// each falls back to the matching key in the config file.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model checkpoint to serve.
    #[arg(long, value_name = "CKPT")]
    pub model: Option<PathBuf>,
    /// Tokenizer vocabulary file.
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Retrieval index; omit to answer from model parameters alone.
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,
    /// Skip retrieval even when an index is configured.
    #[arg(long)]
    pub no_retrieval: bool,
}

pub struct LoadedModel {
    pub params: Parameters<f64>,
    pub vocab: Vocabulary,
    pub store: Option<Index>,
    /// Paths actually read, for the manifest.
    pub inputs: Vec<PathBuf>,
}

impl ModelArgs {
    pub fn load(&self, cfg: &FileConfig) -> Result<LoadedModel> {
        let model_path = required_path(self.model.as_ref(), cfg.model.as_ref(), "model", "--model")?;
        let vocab_path = required_path(self.vocab.as_ref(), cfg.vocab.as_ref(), "vocab", "--vocab")?;
        let (params, _) = load_model(&model_path)?;
        let vocab = load_vocab(&vocab_path)?;
        if vocab.size() > params.config.vocab_size {
            anyhow::bail!(
                "vocabulary {} has {} tokens but the model was built for at most {}",
                vocab_path.display(),
                vocab.size(),
                params.config.vocab_size
            );
        }
        let index_path = if self.no_retrieval {
            None
        } else {
            self.index.clone().or_else(|| cfg.index.clone())
        };
        let store = match &index_path {
            Some(path) => Some(load_index(path)?),
            None => None,
        };
        let mut inputs = vec![model_path, vocab_path];
        inputs.extend(index_path);
        Ok(LoadedModel {
            params,
            vocab,
            store,
            inputs,
        })
    }
}

/// Resolve a path that may come from a flag or the config file.
pub fn required_path(
    flag: Option<&PathBuf>,
    config_value: Option<&PathBuf>,
    config_key: &str,
    flag_name: &str,
) -> Result<PathBuf> {
    flag.or(config_value).cloned().ok_or_else(|| {
        anyhow::anyhow!(
            "no {config_key} path given: pass {flag_name} or set `{config_key}` in the config file"
        )
    })
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<(Parameters<f64>, ModelConfig)> {
    let ckpt = load_checkpoint::<f64>(path, None)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((ckpt.params, ckpt.config))
}

pub fn load_index(path: &Path) -> Result<Index> {
    Index::load(path).with_context(|| format!("loading index {}", path.display()))
}
