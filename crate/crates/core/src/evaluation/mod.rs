//! Human-evaluation machinery: annotation validation, majority-vote
//! aggregation, inter-annotator agreement, and comparison reports.
//!
//! Dialogue quality is judged on five metrics by several annotators. Four
//! metrics are utterance-level (coherence, knowledgeability, groundedness,
//! safety) and one is dialogue-level (engagingness). Scores are validated
//! against per-metric scales and two cross-metric validity rules — a
//! factual-correctness judgment is meaningless when the same annotator found
//! no verifiable content, and a safety judgment is meaningless for an
//! incoherent reply. Valid scores are majority-voted per annotated unit and
//! averaged per model; agreement is measured with Fleiss' kappa per metric
//! and averaged unweighted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod kappa;
mod mock;
mod report;

pub use kappa::fleiss_kappa;
pub use mock::{mock_annotations, TopicSet, MOCK_ANNOTATORS, MOCK_DIALOGUES, MOCK_MODELS, MOCK_UTTERANCES_PER_DIALOGUE};
pub use report::{relative_improvement, render_csv, render_text};

/// Everything that can go wrong while validating, aggregating, or scoring
/// annotation sets.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no annotation records were provided")]
    NoRecords,
    #[error(
        "duplicate annotation: {annotator} scored {metric} twice for dialogue \
         {dialogue:?} (utterance {utterance:?}) of model {model:?}"
    )]
    DuplicateAnnotation {
        model: String,
        dialogue: String,
        utterance: Option<usize>,
        annotator: String,
        metric: Metric,
    },
    #[error("malformed annotation from {annotator} on dialogue {dialogue:?}: {violation}")]
    MalformedRecord {
        annotator: String,
        dialogue: String,
        violation: String,
    },
    #[error("fleiss' kappa: {0}")]
    Kappa(String),
    #[error("degenerate chance agreement")]
    DegenerateChanceAgreement,
    #[error("relative improvement: {0}")]
    Improvement(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The five dialogue-quality metrics, in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Coherence,
    Knowledgeability,
    Groundedness,
    Safety,
    Engagingness,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Coherence,
        Metric::Knowledgeability,
        Metric::Groundedness,
        Metric::Safety,
        Metric::Engagingness,
    ];

    /// The scores an annotator may assign on this metric's scale.
    pub fn allowed_scores(self) -> &'static [f64] {
        match self {
            Metric::Coherence | Metric::Safety | Metric::Engagingness => &[0.0, 0.5, 1.0],
            Metric::Knowledgeability | Metric::Groundedness => &[0.0, 1.0],
        }
    }

    /// Engagingness judges the whole dialogue; every other metric judges one
    /// utterance.
    pub fn is_dialogue_level(self) -> bool {
        matches!(self, Metric::Engagingness)
    }

    /// The metric whose zero score renders this one meaningless for the same
    /// annotator and unit: groundedness cannot be judged without verifiable
    /// content, and safety cannot be judged for an incoherent reply.
    pub fn validity_dependency(self) -> Option<Metric> {
        match self {
            Metric::Groundedness => Some(Metric::Knowledgeability),
            Metric::Safety => Some(Metric::Coherence),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Coherence => "coherence",
            Metric::Knowledgeability => "knowledgeability",
            Metric::Groundedness => "groundedness",
            Metric::Safety => "safety",
            Metric::Engagingness => "engagingness",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One annotator's judgment of one metric on one unit (an utterance, or the
/// whole dialogue for engagingness).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// The system whose output is being judged.
    #[serde(default)]
    pub model: String,
    /// Dialogue identifier.
    pub dialogue: String,
    /// Index of the judged utterance; absent for dialogue-level metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<usize>,
    /// Annotator identifier.
    pub annotator: String,
    pub metric: Metric,
    pub score: f64,
    /// Set when the score is meaningless under the cross-metric validity
    /// rules; flagged records never reach a vote.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub invalid: bool,
}

/// A single problem found in an annotation record.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Score is not on the metric's scale.
    ScoreOutOfRange { metric: Metric, score: f64 },
    /// Utterance-level metric without an utterance index.
    MissingUtteranceIndex { metric: Metric },
    /// Dialogue-level metric carrying an utterance index.
    UnexpectedUtteranceIndex { metric: Metric },
    /// Dependent metric not flagged invalid although the same annotator
    /// scored its prerequisite zero.
    MissingInvalidFlag { metric: Metric, depends_on: Metric },
    /// Record flagged invalid although the validity rules give no reason.
    UnexpectedInvalidFlag { metric: Metric },
    /// Dependent metric with no same-annotator prerequisite record to judge
    /// validity against.
    MissingDependency { metric: Metric, depends_on: Metric },
}

impl Violation {
    /// Scale and level problems are malformed data; the remaining kinds are
    /// validity bookkeeping that aggregation resolves by excluding the
    /// record.
    pub fn is_malformed(&self) -> bool {
        matches!(
            self,
            Violation::ScoreOutOfRange { .. }
                | Violation::MissingUtteranceIndex { .. }
                | Violation::UnexpectedUtteranceIndex { .. }
        )
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ScoreOutOfRange { metric, score } => {
                write!(f, "score {score} is not on the {metric} scale")
            }
            Violation::MissingUtteranceIndex { metric } => {
                write!(f, "{metric} is utterance-level but has no utterance index")
            }
            Violation::UnexpectedUtteranceIndex { metric } => {
                write!(f, "{metric} is dialogue-level but carries an utterance index")
            }
            Violation::MissingInvalidFlag { metric, depends_on } => {
                write!(
                    f,
                    "{metric} must be flagged invalid: the annotator scored {depends_on} zero"
                )
            }
            Violation::UnexpectedInvalidFlag { metric } => {
                write!(f, "{metric} is flagged invalid without cause")
            }
            Violation::MissingDependency { metric, depends_on } => {
                write!(
                    f,
                    "{metric} has no same-annotator {depends_on} record to validate against"
                )
            }
        }
    }
}

/// Check one record against its metric's scale, the utterance/dialogue level
/// rules, and the cross-metric validity rules. `siblings` should contain the
/// same annotator's other records for the same dialogue; records that do not
/// match the record's (model, dialogue, annotator) are ignored. Returns every
/// violation found and never mutates anything.
pub fn validate_annotation(record: &AnnotationRecord, siblings: &[AnnotationRecord]) -> Vec<Violation> {
    let prerequisite = record.metric.validity_dependency().and_then(|dep| {
        siblings.iter().find(|s| {
            s.metric == dep
                && s.model == record.model
                && s.dialogue == record.dialogue
                && s.annotator == record.annotator
                && s.utterance == record.utterance
        })
    });
    check_record(record, prerequisite)
}

/// Shared rule check; `prerequisite` is the same annotator's record for the
/// metric this one depends on, if any.
fn check_record(record: &AnnotationRecord, prerequisite: Option<&AnnotationRecord>) -> Vec<Violation> {
    let mut violations = Vec::new();
    let metric = record.metric;
    if !metric.allowed_scores().contains(&record.score) {
        violations.push(Violation::ScoreOutOfRange {
            metric,
            score: record.score,
        });
    }
    if metric.is_dialogue_level() {
        if record.utterance.is_some() {
            violations.push(Violation::UnexpectedUtteranceIndex { metric });
        }
    } else if record.utterance.is_none() {
        violations.push(Violation::MissingUtteranceIndex { metric });
    }
    match metric.validity_dependency() {
        Some(depends_on) => match prerequisite {
            None => violations.push(Violation::MissingDependency { metric, depends_on }),
            Some(p) if p.score == 0.0 && !record.invalid => {
                violations.push(Violation::MissingInvalidFlag { metric, depends_on });
            }
            Some(p) if p.score != 0.0 && record.invalid => {
                violations.push(Violation::UnexpectedInvalidFlag { metric });
            }
            Some(_) => {}
        },
        None => {
            if record.invalid {
                violations.push(Violation::UnexpectedInvalidFlag { metric });
            }
        }
    }
    violations
}

/// Majority vote over scores from one unit. A unique plurality wins; ties
/// fall back to the median, which on the 0/0.5/1 scale resolves a three-way
/// split to 0.5. With even vote counts the median may land between scale
/// points; the three-annotator protocol never produces that case.
fn majority_vote(scores: &mut [f64]) -> f64 {
    debug_assert!(!scores.is_empty());
    let mut tally = [0usize; 3];
    for &s in scores.iter() {
        tally[(s * 2.0) as usize] += 1;
    }
    let best = *tally.iter().max().expect("tally is non-empty");
    let winners: Vec<usize> = (0..3).filter(|&i| tally[i] == best).collect();
    if winners.len() == 1 {
        return winners[0] as f64 / 2.0;
    }
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    if n % 2 == 1 {
        scores[n / 2]
    } else {
        (scores[n / 2 - 1] + scores[n / 2]) / 2.0
    }
}

/// One model's row in the report: voted means and voted-cell counts per
/// metric. Metrics with no surviving cells are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub means: BTreeMap<Metric, f64>,
    pub cells: BTreeMap<Metric, usize>,
}

/// Per-metric agreement. `skipped_cells` counts cells left out of the tally
/// because their surviving vote count differs from the metric's modal rater
/// count (Fleiss' kappa needs a constant number of raters per item).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSummary {
    pub per_metric: BTreeMap<Metric, f64>,
    /// Unweighted mean over the per-metric values; absent when no metric had
    /// enough multi-rater cells.
    pub average: Option<f64>,
    pub skipped_cells: usize,
}

/// Bookkeeping for everything that was filtered on the way to the means.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub total_records: usize,
    /// Records that survived validity filtering and reached a vote.
    pub valid_records: usize,
    /// Records excluded as invalid: explicitly flagged, unflagged but with a
    /// zero prerequisite, or missing the prerequisite record entirely.
    pub excluded_invalid: usize,
    /// Units whose records were all excluded; they are omitted from means.
    pub empty_cells: usize,
}

/// Aggregated evaluation: one row per model plus agreement and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Rows ordered by model identifier.
    pub rows: Vec<ModelRow>,
    pub kappa: KappaSummary,
    pub diagnostics: Diagnostics,
}

impl MetricReport {
    /// Voted mean for one model and metric, if that cell was populated.
    pub fn mean(&self, model: &str, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model)
            .and_then(|r| r.means.get(&metric))
            .copied()
    }
}

/// A voteable unit: one metric on one utterance (or whole dialogue) of one
/// model's output.
type CellKey = (String, String, Option<usize>, Metric);

/// Aggregate raw annotations into a [`MetricReport`].
///
/// Scale or level violations abort with an error; flagged-invalid records,
/// records that should have been flagged, and records missing their
/// prerequisite are excluded and counted. Each surviving unit is majority
/// voted, per-model means are taken over voted values (utterance metrics
/// average globally over all voted utterances, not per dialogue first), and
/// Fleiss' kappa is computed per metric over units with the metric's modal
/// rater count, then averaged unweighted.
pub fn aggregate(records: &[AnnotationRecord]) -> Result<MetricReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }

    // Exact-position index; doubles as duplicate detection and as the
    // prerequisite lookup for the validity rules.
    type ExactKey<'a> = (&'a str, &'a str, &'a str, Option<usize>, Metric);
    let mut by_position: BTreeMap<ExactKey<'_>, &AnnotationRecord> = BTreeMap::new();
    for r in records {
        let key = (
            r.model.as_str(),
            r.dialogue.as_str(),
            r.annotator.as_str(),
            r.utterance,
            r.metric,
        );
        if by_position.insert(key, r).is_some() {
            return Err(EvalError::DuplicateAnnotation {
                model: r.model.clone(),
                dialogue: r.dialogue.clone(),
                utterance: r.utterance,
                annotator: r.annotator.clone(),
                metric: r.metric,
            });
        }
    }

    let mut diagnostics = Diagnostics {
        total_records: records.len(),
        ..Diagnostics::default()
    };
    let mut cells: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    let mut seen_cells: BTreeSet<CellKey> = BTreeSet::new();
    for r in records {
        let prerequisite = r.metric.validity_dependency().and_then(|dep| {
            by_position
                .get(&(
                    r.model.as_str(),
                    r.dialogue.as_str(),
                    r.annotator.as_str(),
                    r.utterance,
                    dep,
                ))
                .copied()
        });
        let violations = check_record(r, prerequisite);
        if let Some(v) = violations.iter().find(|v| v.is_malformed()) {
            return Err(EvalError::MalformedRecord {
                annotator: r.annotator.clone(),
                dialogue: r.dialogue.clone(),
                violation: v.to_string(),
            });
        }
        let key: CellKey = (r.model.clone(), r.dialogue.clone(), r.utterance, r.metric);
        seen_cells.insert(key.clone());
        if r.invalid || !violations.is_empty() {
            diagnostics.excluded_invalid += 1;
            continue;
        }
        cells.entry(key).or_default().push(r.score);
    }
    diagnostics.valid_records = diagnostics.total_records - diagnostics.excluded_invalid;
    diagnostics.empty_cells = seen_cells.len() - cells.len();

    // Majority vote per cell, then per-model means over voted values.
    let mut sums: BTreeMap<(String, Metric), (f64, usize)> = BTreeMap::new();
    for ((model, _dialogue, _utterance, metric), scores) in &mut cells {
        let voted = majority_vote(scores);
        let entry = sums.entry((model.clone(), *metric)).or_insert((0.0, 0));
        entry.0 += voted;
        entry.1 += 1;
    }
    let mut rows: BTreeMap<String, ModelRow> = BTreeMap::new();
    for ((model, metric), (sum, count)) in sums {
        let row = rows.entry(model.clone()).or_insert_with(|| ModelRow {
            model,
            means: BTreeMap::new(),
            cells: BTreeMap::new(),
        });
        row.means.insert(metric, sum / count as f64);
        row.cells.insert(metric, count);
    }

    let kappa = kappa_summary(&cells)?;

    Ok(MetricReport {
        rows: rows.into_values().collect(),
        kappa,
        diagnostics,
    })
}

/// Per-metric Fleiss' kappa over the surviving vote sets, averaged
/// unweighted. For each metric the modal vote count (among counts of at
/// least two) becomes the rater count; cells with any other count are
/// skipped and tallied.
fn kappa_summary(cells: &BTreeMap<CellKey, Vec<f64>>) -> Result<KappaSummary, EvalError> {
    let mut per_metric = BTreeMap::new();
    let mut skipped_cells = 0usize;
    for metric in Metric::ALL {
        let vote_sets: Vec<&Vec<f64>> = cells
            .iter()
            .filter(|((_, _, _, m), _)| *m == metric)
            .map(|(_, scores)| scores)
            .collect();
        if vote_sets.is_empty() {
            continue;
        }
        let mut count_freq: BTreeMap<usize, usize> = BTreeMap::new();
        for scores in &vote_sets {
            *count_freq.entry(scores.len()).or_insert(0) += 1;
        }
        // Most frequent count of at least two raters; ties prefer more raters.
        let modal = count_freq
            .iter()
            .filter(|(count, _)| **count >= 2)
            .max_by_key(|(count, freq)| (**freq, **count))
            .map(|(count, _)| *count);
        let Some(raters) = modal else {
            skipped_cells += vote_sets.len();
            continue;
        };
        let allowed = metric.allowed_scores();
        let mut tallies = Vec::new();
        for scores in &vote_sets {
            if scores.len() != raters {
                skipped_cells += 1;
                continue;
            }
            let mut row = vec![0u32; allowed.len()];
            for s in scores.iter() {
                let idx = allowed
                    .iter()
                    .position(|a| a == s)
                    .expect("scores were validated against the metric scale");
                row[idx] += 1;
            }
            tallies.push(row);
        }
        per_metric.insert(metric, fleiss_kappa(&tallies, raters as u32)?);
    }
    let average = if per_metric.is_empty() {
        None
    } else {
        Some(per_metric.values().sum::<f64>() / per_metric.len() as f64)
    };
    Ok(KappaSummary {
        per_metric,
        average,
        skipped_cells,
    })
}

/// Read annotation records, one JSON object per line.
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, EvalError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|source| EvalError::Json { line: i + 1, source })?;
        records.push(record);
    }
    Ok(records)
}

/// Write annotation records, one JSON object per line.
pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), EvalError> {
    let mut writer = BufWriter::new(File::create(path)?);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|source| EvalError::Json { line: 0, source })?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}
