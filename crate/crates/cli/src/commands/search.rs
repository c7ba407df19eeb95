//! `kgchat search`: run one query against a retrieval index.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use crate::config::FileConfig;
use crate::{load_index, required_path, RunArtifacts};

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Retrieval index (falls back to `index` in the config file).
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,

    /// The search query.
    #[arg(long, value_name = "TEXT")]
    pub query: String,

    /// How many hits to return.
    #[arg(long, default_value_t = 5)]
    pub k: usize,

    /// Also write the hits as JSON lines.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

pub fn run(args: SearchArgs, file_config: &FileConfig) -> Result<RunArtifacts> {
    let index_path = required_path(args.index.as_ref(), file_config.index.as_ref(), "index", "--index")?;
    let index = load_index(&index_path)?;
    let hits = index.search(&args.query, args.k)?;

    if hits.is_empty() {
        println!("no hits for {:?}", args.query);
    }
    for (rank, hit) in hits.iter().enumerate() {
        let title = index.get(&hit.doc_id).map(|d| d.title.as_str()).unwrap_or("");
        println!("{:>2}. {:8.4}  {}  {}", rank + 1, hit.score, hit.doc_id, title);
        println!("    {}", hit.snippet);
    }

    if let Some(out) = &args.out {
        let mut file =
            std::fs::File::create(out).with_context(|| format!("writing {}", out.display()))?;
        for hit in &hits {
            writeln!(file, "{}", serde_json::to_string(hit)?)?;
        }
    }

    Ok(RunArtifacts {
        seed: None,
        inputs: vec![index_path],
        outputs: args.out.iter().cloned().collect(),
        ..RunArtifacts::deterministic()
    })
}
