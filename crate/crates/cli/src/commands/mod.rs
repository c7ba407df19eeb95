//! One module per subcommand; each exposes an args struct for clap and a
//! `run` function returning the artifact lists for the run manifest.

pub mod build_corpus;
pub mod chat;
pub mod evaluate;
pub mod index;
pub mod report;
pub mod rerun;
pub mod search;
pub mod self_chat;
pub mod train;
pub mod train_tokenizer;
