//! JSON-lines readers and writers for the corpus pipeline stages.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{CorpusError, Dialogue, KnowledgeDialogueRecord, RawRecord, TrainingSample};

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item =
            serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: i + 1, source })?;
        items.push(item);
    }
    Ok(items)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    let mut writer = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|source| CorpusError::Json { line: 0, source })?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}

/// Read raw thread/document records, one JSON object per line.
pub fn read_raw_records(path: &Path) -> Result<Vec<RawRecord>, CorpusError> {
    read_jsonl(path)
}

pub fn read_dialogues(path: &Path) -> Result<Vec<Dialogue>, CorpusError> {
    read_jsonl(path)
}

pub fn write_dialogues(path: &Path, dialogues: &[Dialogue]) -> Result<(), CorpusError> {
    write_jsonl(path, dialogues)
}

pub fn read_samples(path: &Path) -> Result<Vec<TrainingSample>, CorpusError> {
    read_jsonl(path)
}

pub fn write_samples(path: &Path, samples: &[TrainingSample]) -> Result<(), CorpusError> {
    write_jsonl(path, samples)
}

pub fn read_knowledge_records(path: &Path) -> Result<Vec<KnowledgeDialogueRecord>, CorpusError> {
    read_jsonl(path)
}
