//! `kgchat self-chat`: the model plays both speakers about each topic in
//! a file, producing one JSON-lines record per topic. Topics run
//! concurrently; each derives its own seed from the base seed and its
//! line position, so the output does not depend on scheduling.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use kgchat_core::corpus::Utterance;
use kgchat_core::inference::{self_chat, DecodeConfig, TurnTrace};

use crate::config::FileConfig;
use crate::{DecodeArgs, ModelArgs, RunArtifacts};

/// Spreads per-topic seeds apart; inside a topic, turn `t` uses
/// `seed + t`, so neighboring topics must not collide.
const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Args)]
pub struct SelfChatArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub decode: DecodeArgs,

    /// Topic file: one conversation opener per line.
    #[arg(long, value_name = "FILE")]
    pub topics: PathBuf,

    /// Exchanges per topic; each round is two generated utterances.
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,

    /// Where to write the JSON-lines log (one record per topic).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,

    /// Worker threads for running topics in parallel (default: all
    /// cores).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

/// One finished conversation: the seed topic, the seed it ran with, the
/// full utterance list (topic opener + 2·rounds generated turns), and the
/// per-turn pipeline traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfChatRecord {
    pub topic: String,
    pub seed: u64,
    pub utterances: Vec<Utterance>,
    pub turns: Vec<TurnTrace>,
}

pub fn run(args: SelfChatArgs, file_config: &FileConfig) -> Result<RunArtifacts> {
    let loaded = args.model.load(file_config)?;
    let decode = args.decode.resolve(file_config)?;

    let topics_text = std::fs::read_to_string(&args.topics)
        .with_context(|| format!("reading topics {}", args.topics.display()))?;
    let topics: Vec<&str> = topics_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if topics.is_empty() {
        anyhow::bail!("topic file {} has no topics", args.topics.display());
    }

    let chat_topic = |(position, topic): (usize, &&str)| -> Result<SelfChatRecord> {
        let seed = decode.seed.wrapping_add((position as u64).wrapping_mul(SEED_STRIDE));
        let topic_cfg = DecodeConfig {
            seed,
            ..decode.clone()
        };
        let log = self_chat(
            &loaded.params,
            &loaded.vocab,
            topic,
            args.rounds,
            loaded.store.as_ref(),
            &topic_cfg,
        )
        .with_context(|| format!("topic {:?}", topic))?;
        let utterances = log.utterances();
        let mut turns = log.turns;
        for turn in &mut turns {
            // Wall-clock noise has no place in a bit-reproducible
            // artifact; overall timing goes to the summary line instead.
            turn.elapsed_ms = 0;
        }
        Ok(SelfChatRecord {
            topic: log.topic,
            seed,
            utterances,
            turns,
        })
    };

    let started = std::time::Instant::now();
    // Collecting through rayon keeps records in topic order regardless of
    // which thread finishes first.
    let records: Result<Vec<SelfChatRecord>> = match args.threads {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .context("building worker pool")?
            .install(|| topics.par_iter().enumerate().map(chat_topic).collect()),
        None => topics.par_iter().enumerate().map(chat_topic).collect(),
    };
    let records = records?;

    let mut file = std::fs::File::create(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    for record in &records {
        writeln!(file, "{}", serde_json::to_string(record)?)?;
    }
    file.flush()?;
    println!(
        "self-chat: {} topics × {} rounds ({} utterances each) in {:.1}s -> {}",
        records.len(),
        args.rounds,
        2 * args.rounds + 1,
        started.elapsed().as_secs_f64(),
        args.out.display()
    );

    let mut inputs = loaded.inputs;
    inputs.push(args.topics.clone());
    Ok(RunArtifacts {
        seed: Some(decode.seed),
        inputs,
        outputs: vec![args.out.clone()],
        ..RunArtifacts::deterministic()
    })
}
