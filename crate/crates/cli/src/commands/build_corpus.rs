//! `kgchat build-corpus`: raw comment threads and web documents in,
//! deduplicated and mixed dialogues out, optionally expanded into
//! training samples.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use kgchat_core::corpus::{
    dedup_dialogues, dialogue_to_samples, knowledge_record_to_samples, mix_corpora,
    read_knowledge_records, read_raw_records, write_dialogues, write_samples, Dialogue,
    DialogueKind, OutputKind, TrainingSample,
};

use crate::RunArtifacts;

#[derive(Debug, Args)]
pub struct BuildCorpusArgs {
    /// Raw JSON-lines input: one `thread` or `doc` record per line.
    /// Repeat to merge several files.
    #[arg(long = "raw", value_name = "FILE", required = true)]
    pub raw: Vec<PathBuf>,

    /// Logged search-session records (context, query, retrieved passage,
    /// response); expanded into query and response samples.
    #[arg(long = "knowledge", value_name = "FILE")]
    pub knowledge: Vec<PathBuf>,

    /// Where to write the mixed dialogue corpus (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub dialogues_out: PathBuf,

    /// Also expand dialogues (and knowledge records) into training
    /// samples written here.
    #[arg(long, value_name = "FILE")]
    pub samples_out: Option<PathBuf>,

    /// Interleaving weight for single-party dialogues.
    #[arg(long, default_value_t = 1.0)]
    pub single_weight: f64,

    /// Interleaving weight for multi-party dialogues.
    #[arg(long, default_value_t = 1.0)]
    pub multi_weight: f64,

    /// Word cap per utterance when splitting documents into turns.
    #[arg(long, default_value_t = 48)]
    pub sentence_cap: usize,

    /// How many preceding utterances each training sample keeps as
    /// context.
    #[arg(long, default_value_t = 6)]
    pub max_context: usize,

    /// Seed for the corpus interleaving draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: BuildCorpusArgs) -> Result<RunArtifacts> {
    let mut dialogues: Vec<Dialogue> = Vec::new();
    for path in &args.raw {
        let records = read_raw_records(path)
            .with_context(|| format!("reading raw records {}", path.display()))?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "raw".to_string());
        for (line, record) in records.iter().enumerate() {
            let id = format!("{stem}-{}", line + 1);
            dialogues.extend(
                record
                    .to_dialogues(&id, args.sentence_cap)
                    .with_context(|| format!("{}: record on line {}", path.display(), line + 1))?,
            );
        }
    }
    let before = dialogues.len();
    let dialogues = dedup_dialogues(dialogues);
    let deduped = before - dialogues.len();

    let (single, multi): (Vec<_>, Vec<_>) = dialogues
        .into_iter()
        .partition(|d| d.kind == DialogueKind::SingleParty);
    let counts = (single.len(), multi.len());
    let mixed = mix_corpora(
        single,
        multi,
        (args.single_weight, args.multi_weight),
        args.seed,
    )?;
    write_dialogues(&args.dialogues_out, &mixed)
        .with_context(|| format!("writing {}", args.dialogues_out.display()))?;
    println!(
        "dialogues: {} single-party + {} multi-party ({} duplicates dropped) -> {}",
        counts.0,
        counts.1,
        deduped,
        args.dialogues_out.display()
    );

    let mut outputs = vec![args.dialogues_out.clone()];
    if let Some(samples_out) = &args.samples_out {
        let mut samples: Vec<TrainingSample> = Vec::new();
        for dialogue in &mixed {
            samples.extend(dialogue_to_samples(dialogue, args.max_context));
        }
        for path in &args.knowledge {
            let records = read_knowledge_records(path)
                .with_context(|| format!("reading knowledge records {}", path.display()))?;
            for (line, record) in records.iter().enumerate() {
                samples.extend(knowledge_record_to_samples(record).with_context(|| {
                    format!("{}: record on line {}", path.display(), line + 1)
                })?);
            }
        }
        write_samples(samples_out, &samples)
            .with_context(|| format!("writing {}", samples_out.display()))?;
        let queries = samples
            .iter()
            .filter(|s| s.output_kind == OutputKind::Query)
            .count();
        println!(
            "samples: {} ({} query, {} response) -> {}",
            samples.len(),
            queries,
            samples.len() - queries,
            samples_out.display()
        );
        outputs.push(samples_out.clone());
    }

    let mut inputs = args.raw.clone();
    inputs.extend(args.knowledge.iter().cloned());
    Ok(RunArtifacts {
        seed: Some(args.seed),
        inputs,
        outputs,
        ..RunArtifacts::deterministic()
    })
}
