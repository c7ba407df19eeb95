use std::process::ExitCode;

/// Exit codes: 0 success, 1 validation or runtime failure, 2 usage error
/// (the argument parser prints usage text and exits itself for those).
fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match kgchat_cli::run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        // A reader closing our output mid-stream (`kgchat ... | head`) is
        // not a failure of the run itself.
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("kgchat: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause
            .downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}
