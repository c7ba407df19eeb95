//! `kgchat rerun`: replay a recorded run and verify it reproduces.
//!
//! The manifest records the exact argument list plus the SHA-256 of every
//! input and output. Rerun refuses to start if an input changed, replays
//! the command, then checks each output hash — a mismatch means the
//! pipeline is not deterministic and fails the run.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use crate::manifest::{stamp, RunManifest};
use crate::{execute, try_parse, Command};

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// Manifest written by a previous run.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
}

pub fn run(args: RerunArgs) -> Result<()> {
    let manifest = RunManifest::read(&args.manifest)?;
    if !manifest.deterministic {
        bail!(
            "manifest {} records an interactive '{}' run; nothing to reproduce",
            args.manifest.display(),
            manifest.subcommand
        );
    }

    for input in &manifest.inputs {
        let now = stamp(&input.path)
            .with_context(|| format!("input {} from the manifest", input.path.display()))?;
        if now.sha256 != input.sha256 {
            bail!(
                "input {} changed since the recorded run (was {}, now {})",
                input.path.display(),
                &input.sha256[..12],
                &now.sha256[..12]
            );
        }
    }

    let cli = try_parse(&manifest.argv)
        .with_context(|| format!("manifest argv no longer parses: {:?}", manifest.argv))?;
    if matches!(cli.command, Command::Rerun(_)) {
        bail!("manifest records a rerun; refusing to recurse");
    }
    println!(
        "replaying `kgchat {}` from {}",
        manifest.argv.join(" "),
        args.manifest.display()
    );
    execute(cli, &manifest.argv)?;

    let mut verified = 0usize;
    let mut drifted: Vec<PathBuf> = Vec::new();
    for output in &manifest.outputs {
        let now = stamp(&output.path)
            .with_context(|| format!("output {} from the manifest", output.path.display()))?;
        if now.sha256 == output.sha256 {
            verified += 1;
        } else {
            drifted.push(output.path.clone());
        }
    }
    if !drifted.is_empty() {
        bail!(
            "{} of {} outputs did not reproduce bit-identically: {}",
            drifted.len(),
            manifest.outputs.len(),
            drifted
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    println!("verified {verified} outputs bit-identical");
    Ok(())
}
