//! `kgchat evaluate`: score annotation files into per-model metric means,
//! Fleiss' kappa agreement, and a relative-improvement headline. Can also
//! emit the built-in mock annotation sets used to exercise the pipeline.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use kgchat_core::evaluation::{
    aggregate, mock_annotations, read_annotations, relative_improvement, render_csv, render_text,
    write_annotations, AnnotationRecord, Metric, MetricReport, TopicSet,
};

use crate::RunArtifacts;

const DEFAULT_BASELINE: &str = "strong-lm";
const DEFAULT_COMPARISON: &str = "desk-full";

#[derive(Debug, Args)]
#[command(group(
    clap::ArgGroup::new("work")
        .required(true)
        .multiple(true)
        .args(["annotations", "emit_mock"]),
))]
pub struct EvaluateArgs {
    /// Annotation file (JSON lines). Repeat to merge files into one
    /// report.
    #[arg(long = "annotations", value_name = "FILE")]
    pub annotations: Vec<PathBuf>,

    /// Write the two built-in mock annotation sets into this directory.
    #[arg(long, value_name = "DIR")]
    pub emit_mock: Option<PathBuf>,

    /// Baseline model for the improvement line (default strong-lm).
    #[arg(long, value_name = "MODEL")]
    pub baseline: Option<String>,

    /// Comparison model for the improvement line (default desk-full).
    #[arg(long, value_name = "MODEL")]
    pub comparison: Option<String>,

    /// Also write the full report as JSON (re-renderable with `kgchat
    /// report`).
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,

    /// Also write the per-model table as CSV.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

pub fn run(args: EvaluateArgs) -> Result<RunArtifacts> {
    let mut outputs: Vec<PathBuf> = Vec::new();

    if let Some(dir) = &args.emit_mock {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for set in [TopicSet::ChitChat, TopicSet::KnowledgeIntensive] {
            let path = dir.join(format!("mock_annotations_{}.jsonl", set.slug()));
            let records = mock_annotations(set);
            write_annotations(&path, &records)?;
            println!("mock set '{}': {} records -> {}", set.slug(), records.len(), path.display());
            outputs.push(path);
        }
    }

    if !args.annotations.is_empty() {
        let mut records: Vec<AnnotationRecord> = Vec::new();
        for path in &args.annotations {
            records.extend(
                read_annotations(path)
                    .with_context(|| format!("reading annotations {}", path.display()))?,
            );
        }
        let report = aggregate(&records)?;
        print!("{}", render_text(&report));
        print_improvement(&report, &args)?;

        if let Some(path) = &args.json {
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
            outputs.push(path.clone());
        }
        if let Some(path) = &args.csv {
            std::fs::write(path, render_csv(&report))
                .with_context(|| format!("writing {}", path.display()))?;
            outputs.push(path.clone());
        }
    }

    Ok(RunArtifacts {
        seed: None,
        inputs: args.annotations.clone(),
        outputs,
        ..RunArtifacts::deterministic()
    })
}

/// The headline line: relative engagingness improvement of the comparison
/// model over the baseline. Explicitly named models must exist; the
/// defaults are skipped quietly when the data covers other models.
fn print_improvement(report: &MetricReport, args: &EvaluateArgs) -> Result<()> {
    let baseline = args.baseline.as_deref().unwrap_or(DEFAULT_BASELINE);
    let comparison = args.comparison.as_deref().unwrap_or(DEFAULT_COMPARISON);
    let explicit = args.baseline.is_some() || args.comparison.is_some();

    let base = report.mean(baseline, Metric::Engagingness);
    let new = report.mean(comparison, Metric::Engagingness);
    match (base, new) {
        (Some(base), Some(new)) => {
            let improvement = relative_improvement(new, base)?;
            println!(
                "engagingness improvement, {comparison} over {baseline}: {improvement:+.1}% ({new:.3} vs {base:.3})"
            );
        }
        _ if explicit => {
            let missing = if base.is_none() { baseline } else { comparison };
            bail!("model '{missing}' has no engagingness scores in the given annotations");
        }
        _ => log::info!(
            "skipping improvement line: no engagingness scores for '{baseline}'/'{comparison}'"
        ),
    }
    Ok(())
}
