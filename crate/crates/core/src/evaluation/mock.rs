//! Deterministic synthetic annotation sets shaped like a three-annotator
//! evaluation of five systems over fifty dialogues per topic set.
//!
//! The construction fixes, per system and metric, how many of the 500
//! annotated utterances (50 dialogues × 10 utterances) carry each score,
//! laid out as contiguous blocks, then derives three annotator votes per
//! unit. Every `period`-th unit has one rotating annotator dissent by one
//! scale step; a single dissent can never move a three-vote majority, so the
//! voted values — and with them the engineered means — are exact by
//! construction, while the dissent rate is tuned per metric so the pooled
//! agreement lands in the substantial range (average Fleiss' kappa between
//! 0.6 and 0.7).
//!
//! Groundedness is only scored where the same annotator found verifiable
//! content and safety only where they found the reply coherent, so the
//! generated sets exercise the validity filtering: whole units drop out
//! (empty cells) where nobody could judge, and reported groundedness/safety
//! means are conditional on judgeable utterances.
//!
//! The engagingness means of the strongest baseline (0.690 chit-chat, 0.650
//! knowledge-intensive) and of the full system (0.940, 0.970) are exact and
//! seed the headline relative-improvement lines (+36.2% and +49.2%).

use super::{AnnotationRecord, Metric};

/// Systems under evaluation, from weakest to strongest: three baselines of
/// increasing scale, the internal-knowledge-only stage of this system, and
/// the full retrieval-grounded system.
pub const MOCK_MODELS: [&str; 5] = ["tiny-lm", "mid-lm", "strong-lm", "desk-stage1", "desk-full"];
pub const MOCK_ANNOTATORS: [&str; 3] = ["ann-1", "ann-2", "ann-3"];
pub const MOCK_DIALOGUES: usize = 50;
pub const MOCK_UTTERANCES_PER_DIALOGUE: usize = 10;

const CELLS: usize = MOCK_DIALOGUES * MOCK_UTTERANCES_PER_DIALOGUE;

/// Which of the two shipped topic sets to mimic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopicSet {
    ChitChat,
    KnowledgeIntensive,
}

/// Mean targets in thousandths, one row per model, columns in
/// [`Metric::ALL`] order. Engagingness is exact; utterance metrics are laid
/// out to these targets before validity filtering shifts the conditional
/// means slightly.
const CHITCHAT_TARGETS: [[u32; 5]; 5] = [
    [304, 0, 0, 386, 20],
    [826, 8, 0, 920, 540],
    [930, 4, 4, 922, 690],
    [978, 128, 112, 978, 930],
    [956, 164, 144, 966, 940],
];
const KNOWLEDGE_TARGETS: [[u32; 5]; 5] = [
    [252, 4, 0, 314, 20],
    [806, 60, 40, 862, 530],
    [886, 108, 68, 900, 650],
    [976, 428, 336, 986, 960],
    [988, 528, 444, 996, 970],
];

/// Dissent period per metric (every Nth valid unit gets one dissenting
/// vote), tuned so each set's average Fleiss' kappa sits in [0.6, 0.7] and
/// then frozen. Metrics with skewed vote distributions need rarer dissent
/// because their chance agreement is already high.
const CHITCHAT_PERIODS: [usize; 5] = [5, 14, 4, 16, 4];
const KNOWLEDGE_PERIODS: [usize; 5] = [5, 6, 5, 13, 4];

impl TopicSet {
    pub fn slug(self) -> &'static str {
        match self {
            TopicSet::ChitChat => "chitchat",
            TopicSet::KnowledgeIntensive => "knowledge",
        }
    }

    fn targets(self) -> &'static [[u32; 5]; 5] {
        match self {
            TopicSet::ChitChat => &CHITCHAT_TARGETS,
            TopicSet::KnowledgeIntensive => &KNOWLEDGE_TARGETS,
        }
    }

    fn periods(self) -> [usize; 5] {
        match self {
            TopicSet::ChitChat => CHITCHAT_PERIODS,
            TopicSet::KnowledgeIntensive => KNOWLEDGE_PERIODS,
        }
    }
}

/// Block layout over a span of units: the first `ones` score 1, the next
/// `halves` score 0.5, the rest 0.
#[derive(Clone, Copy)]
struct Schedule {
    ones: usize,
    halves: usize,
}

impl Schedule {
    /// Three-valued layout hitting a mean of `target_ones / total`: when
    /// there is room, five score points are paid out as ten halves so the
    /// middle grade appears without moving the mean.
    fn three_valued(target_ones: usize, total: usize) -> Self {
        if target_ones >= 5 && total.saturating_sub(target_ones) >= 5 {
            Schedule {
                ones: target_ones - 5,
                halves: 10,
            }
        } else {
            Schedule {
                ones: target_ones,
                halves: 0,
            }
        }
    }

    /// Safety layout over the judgeable span. High safety targets would
    /// otherwise clip to an all-ones block, leaving chance agreement so
    /// close to one that the agreement statistic degenerates; for spans of
    /// at least forty units the layout therefore always keeps ten unanimous
    /// halves and ten unanimous zeros, trading at most fifteen score points
    /// of the target mean for measurable variation.
    fn safety(target_ones: usize, span: usize) -> Self {
        let target = target_ones.min(span);
        if span < 40 {
            return Schedule {
                ones: target,
                halves: 0,
            };
        }
        if target >= span - 15 {
            Schedule {
                ones: span - 20,
                halves: 10,
            }
        } else if target >= 5 {
            Schedule {
                ones: target - 5,
                halves: 10,
            }
        } else {
            Schedule {
                ones: target,
                halves: 0,
            }
        }
    }

    /// Number of non-zero units.
    fn nonzero(&self) -> usize {
        self.ones + self.halves
    }

    fn value_at(&self, idx: usize) -> f64 {
        if idx < self.ones {
            1.0
        } else if idx < self.ones + self.halves {
            0.5
        } else {
            0.0
        }
    }
}

/// One dissenting step away from `base` on the metric's scale.
fn dissent(metric: Metric, base: f64) -> f64 {
    if metric.allowed_scores().len() == 2 {
        1.0 - base
    } else if base == 0.5 {
        1.0
    } else {
        0.5
    }
}

/// Three votes for one unit: unanimous `base`, except that every
/// `period`-th valid unit has one rotating annotator dissent.
fn votes(metric: Metric, base: f64, counter: &mut usize, period: usize) -> [f64; 3] {
    let idx = *counter;
    *counter += 1;
    let mut v = [base; 3];
    if idx % period == 0 {
        v[(idx / period) % MOCK_ANNOTATORS.len()] = dissent(metric, base);
    }
    v
}

/// Generate the full annotation set for one topic set: 30,750 records
/// (5 models × 50 dialogues × (10 utterances × 4 metrics + engagingness) ×
/// 3 annotators), deterministic and self-consistent under the validity
/// rules.
pub fn mock_annotations(set: TopicSet) -> Vec<AnnotationRecord> {
    let mut out = Vec::new();
    let periods = set.periods();
    for (model_idx, &model) in MOCK_MODELS.iter().enumerate() {
        let targets = set.targets()[model_idx];
        let coherence = Schedule::three_valued((targets[0] / 2) as usize, CELLS);
        let knowledgeable = (targets[1] / 2) as usize;
        let grounded = (targets[2] / 2) as usize;
        let coherent = coherence.nonzero();
        let safety = Schedule::safety((targets[3] / 2) as usize, coherent);
        let mut counters = [0usize; 5];

        for d in 0..MOCK_DIALOGUES {
            let dialogue = format!("{}-{:02}", set.slug(), d);
            for u in 0..MOCK_UTTERANCES_PER_DIALOGUE {
                let cell = d * MOCK_UTTERANCES_PER_DIALOGUE + u;
                let coherence_votes = votes(
                    Metric::Coherence,
                    coherence.value_at(cell),
                    &mut counters[0],
                    periods[0],
                );
                let base_knowledgeable = if cell < knowledgeable { 1.0 } else { 0.0 };
                let knowledgeability_votes = votes(
                    Metric::Knowledgeability,
                    base_knowledgeable,
                    &mut counters[1],
                    periods[1],
                );
                // Groundedness and safety votes are only scheduled where the
                // unit is judgeable; a dissenter who finds content where the
                // schedule has none scores it ungrounded, and one who finds
                // coherence in a scheduled-incoherent reply still calls it
                // safe.
                let groundedness_votes = if cell < knowledgeable {
                    votes(
                        Metric::Groundedness,
                        if cell < grounded { 1.0 } else { 0.0 },
                        &mut counters[2],
                        periods[2],
                    )
                } else {
                    [0.0; 3]
                };
                let safety_votes = if cell < coherent {
                    votes(Metric::Safety, safety.value_at(cell), &mut counters[3], periods[3])
                } else {
                    [1.0; 3]
                };

                for (a, &annotator) in MOCK_ANNOTATORS.iter().enumerate() {
                    let mut push = |metric: Metric, score: f64, invalid: bool| {
                        out.push(AnnotationRecord {
                            model: model.to_string(),
                            dialogue: dialogue.clone(),
                            utterance: Some(u),
                            annotator: annotator.to_string(),
                            metric,
                            score: if invalid { 0.0 } else { score },
                            invalid,
                        });
                    };
                    push(Metric::Coherence, coherence_votes[a], false);
                    push(Metric::Knowledgeability, knowledgeability_votes[a], false);
                    push(
                        Metric::Groundedness,
                        groundedness_votes[a],
                        knowledgeability_votes[a] == 0.0,
                    );
                    push(Metric::Safety, safety_votes[a], coherence_votes[a] == 0.0);
                }
            }

            // Engagingness is one judgment per dialogue. Score totals in
            // halves over the 50 dialogues make the voted mean exact.
            let halves_total = (targets[4] / 10) as usize;
            let base = if d < halves_total / 2 {
                1.0
            } else if d == halves_total / 2 && halves_total % 2 == 1 {
                0.5
            } else {
                0.0
            };
            let engagingness_votes =
                votes(Metric::Engagingness, base, &mut counters[4], periods[4]);
            for (a, &annotator) in MOCK_ANNOTATORS.iter().enumerate() {
                out.push(AnnotationRecord {
                    model: model.to_string(),
                    dialogue: dialogue.clone(),
                    utterance: None,
                    annotator: annotator.to_string(),
                    metric: Metric::Engagingness,
                    score: engagingness_votes[a],
                    invalid: false,
                });
            }
        }
    }
    out
}
