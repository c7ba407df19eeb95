//! `kgchat chat`: a terminal read–eval loop against a trained model.
//! Every turn shows its trace — the search query the model issued, the
//! document retrieval returned, and the token and latency accounting —
//! so grounding failures are visible immediately.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use kgchat_core::corpus::Utterance;
use kgchat_core::inference::{respond, write_traces, DecodeConfig, TurnTrace};

use crate::config::FileConfig;
use crate::{DecodeArgs, ModelArgs, RunArtifacts};

/// Speaker labels for the human and the model inside the serialized
/// context.
const USER: &str = "user";
const ASSISTANT: &str = "assistant";

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub decode: DecodeArgs,

    /// Write every turn's trace to this JSON-lines file on exit.
    #[arg(long, value_name = "FILE")]
    pub transcript: Option<PathBuf>,
}

pub fn run(args: ChatArgs, file_config: &FileConfig) -> Result<RunArtifacts> {
    let loaded = args.model.load(file_config)?;
    let decode = args.decode.resolve(file_config)?;

    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    writeln!(
        out,
        "kgchat chat — retrieval {}; /quit to exit, /reset to clear the context",
        if loaded.store.is_some() { "on" } else { "off" }
    )?;

    let mut context: Vec<Utterance> = Vec::new();
    let mut traces: Vec<TurnTrace> = Vec::new();
    let mut turn: u64 = 0;
    loop {
        write!(out, "you> ")?;
        out.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            writeln!(out)?;
            break;
        }
        let line = line.trim();
        match line {
            "" => continue,
            "/quit" | "/exit" => break,
            "/reset" => {
                context.clear();
                writeln!(out, "(context cleared)")?;
                continue;
            }
            "/help" => {
                writeln!(out, "/quit to exit, /reset to clear the context")?;
                continue;
            }
            _ => {}
        }

        context.push(Utterance::new(USER, line));
        // A fresh stream per turn: repeating a message should not replay
        // the identical sample path.
        let turn_cfg = DecodeConfig {
            seed: decode.seed.wrapping_add(turn),
            ..decode.clone()
        };
        match respond(
            &loaded.params,
            &loaded.vocab,
            &context,
            ASSISTANT,
            loaded.store.as_ref(),
            &turn_cfg,
        ) {
            Ok(trace) => {
                print_trace(&mut out, &trace)?;
                context.push(Utterance::new(ASSISTANT, &trace.response));
                traces.push(trace);
                turn += 1;
            }
            Err(err) => {
                // Keep the loop alive; drop the utterance that failed.
                writeln!(out, "error: {err}")?;
                context.pop();
            }
        }
    }

    if let Some(path) = &args.transcript {
        write_traces(path, &traces)
            .with_context(|| format!("writing transcript {}", path.display()))?;
        writeln!(out, "wrote {} turn traces to {}", traces.len(), path.display())?;
    }

    Ok(RunArtifacts {
        seed: Some(decode.seed),
        inputs: loaded.inputs,
        outputs: args.transcript.iter().cloned().collect(),
        // Interactive: what gets written depends on what was typed.
        deterministic: false,
    })
}

fn print_trace(out: &mut impl Write, trace: &TurnTrace) -> std::io::Result<()> {
    match &trace.query {
        Some(query) => writeln!(out, "[query] {query}")?,
        None => writeln!(out, "[query] none — answering from internal knowledge")?,
    }
    if trace.fallback {
        writeln!(out, "[retrieval] failed; fell back to internal knowledge")?;
    }
    if let Some(hits) = &trace.retrieval {
        if hits.is_empty() {
            writeln!(out, "[retrieval] no matching document")?;
        }
        for (rank, hit) in hits.iter().enumerate() {
            writeln!(
                out,
                "[hit {}] {} (score {:.4}): {}",
                rank + 1,
                hit.doc_id,
                hit.score,
                hit.snippet
            )?;
        }
    }
    writeln!(out, "assistant> {}", trace.response)?;
    writeln!(
        out,
        "[turn] prompt {} tokens ({} knowledge) · generated {} tokens · {} ms",
        trace.prompt_tokens, trace.knowledge_tokens, trace.generated_tokens, trace.elapsed_ms
    )
}
