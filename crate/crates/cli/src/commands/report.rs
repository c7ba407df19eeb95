//! `kgchat report`: re-render a report saved by `evaluate --json`.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use kgchat_core::evaluation::{render_csv, render_text, MetricReport};

use crate::RunArtifacts;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report file written by `evaluate --json`.
    #[arg(value_name = "REPORT")]
    pub report: PathBuf,

    /// Also write the per-model table as CSV.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

pub fn run(args: ReportArgs) -> Result<RunArtifacts> {
    let text = std::fs::read_to_string(&args.report)
        .with_context(|| format!("reading report {}", args.report.display()))?;
    let report: MetricReport = serde_json::from_str(&text)
        .with_context(|| format!("parsing report {}", args.report.display()))?;
    print!("{}", render_text(&report));

    if let Some(path) = &args.csv {
        std::fs::write(path, render_csv(&report))
            .with_context(|| format!("writing {}", path.display()))?;
    }

    Ok(RunArtifacts {
        seed: None,
        inputs: vec![args.report.clone()],
        outputs: args.csv.iter().cloned().collect(),
        ..RunArtifacts::deterministic()
    })
}
