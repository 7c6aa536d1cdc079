//! Evaluation splits and metrics for next-step prediction and partial
//! sequence completion, with random and document-order baselines.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::StepId;
use crate::decoder::{constrained_beam_search_from, DecodeConfig, PrefixTrie};
use crate::edit::levenshtein;
use crate::error::{Error, Result};
use crate::grounding::GroundedSequence;
use crate::pathmodel::StepPredictor;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestExample {
    pub prefix: Vec<StepId>,
    pub gold_next: BTreeSet<StepId>,
    pub gold_completions: BTreeSet<Vec<StepId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub train: Vec<GroundedSequence>,
    pub test: Vec<GroundedSequence>,
    pub test_examples: Vec<TestExample>,
}

/// Random split by sequence; every proper prefix of a test sequence becomes
/// an example, and examples sharing a prefix pool their gold answers.
pub fn build_eval_splits(
    sequences: &[GroundedSequence],
    train_fraction: f64,
    rng_seed: u64,
) -> Result<EvalSplit> {
    if sequences.len() < 2 {
        return Err(Error::TooFewSequences(sequences.len()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Invalid(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let n = sequences.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let (train_idx, test_idx) = order.split_at(n_train);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let test: Vec<GroundedSequence> = test_idx.iter().map(|&i| sequences[i].clone()).collect();
    Ok(EvalSplit {
        train: train_idx.iter().map(|&i| sequences[i].clone()).collect(),
        test_examples: prefix_examples(&test),
        test,
    })
}

/// Prefix examples from test sequences, merged by identical prefix and
/// ordered by prefix.
pub fn prefix_examples(test: &[GroundedSequence]) -> Vec<TestExample> {
    let mut merged: BTreeMap<Vec<StepId>, TestExample> = BTreeMap::new();
    for seq in test {
        let steps = &seq.step_ids;
        for t in 1..steps.len() {
            let prefix = steps[..t].to_vec();
            let ex = merged.entry(prefix.clone()).or_insert_with(|| TestExample {
                prefix,
                gold_next: BTreeSet::new(),
                gold_completions: BTreeSet::new(),
            });
            ex.gold_next.insert(steps[t]);
            ex.gold_completions.insert(steps[t..].to_vec());
        }
    }
    merged.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NextStepMetrics {
    pub acc_at_1: f64,
    /// Share of examples with at least one gold step in the top 3.
    pub acc_at_3: f64,
    pub prec_at_3: f64,
    pub rec_at_3: f64,
    pub f1_at_3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CompletionMetrics {
    pub acc_at_1: f64,
    pub edit_distance: f64,
    pub normalized_edit_distance: f64,
}

/// Per-example next-step scores for one ranked prediction list.
pub fn next_step_scores(ranked: &[StepId], gold: &BTreeSet<StepId>) -> NextStepMetrics {
    let top3: BTreeSet<StepId> = ranked.iter().take(3).copied().collect();
    let hits = top3.intersection(gold).count() as f64;
    let prec = hits / 3.0;
    let rec = if gold.is_empty() {
        0.0
    } else {
        hits / gold.len() as f64
    };
    let f1 = if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    };
    NextStepMetrics {
        acc_at_1: f64::from(u8::from(ranked.first().is_some_and(|s| gold.contains(s)))),
        acc_at_3: f64::from(u8::from(hits > 0.0)),
        prec_at_3: prec,
        rec_at_3: rec,
        f1_at_3: f1,
    }
}

/// Distance to the nearest gold completion and that distance normalized by
/// the longer of the two sequences.
pub fn completion_scores(predicted: &[StepId], golds: &BTreeSet<Vec<StepId>>) -> CompletionMetrics {
    let best = golds
        .iter()
        .map(|g| {
            let d = levenshtein(predicted, g);
            let longest = predicted.len().max(g.len());
            let norm = if longest == 0 {
                0.0
            } else {
                d as f64 / longest as f64
            };
            (d, norm)
        })
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    match best {
        Some((d, norm)) => CompletionMetrics {
            acc_at_1: f64::from(u8::from(d == 0)),
            edit_distance: d as f64,
            normalized_edit_distance: norm,
        },
        None => CompletionMetrics {
            acc_at_1: 0.0,
            edit_distance: predicted.len() as f64,
            normalized_edit_distance: 1.0,
        },
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// Macro-averaged next-step metrics; zeros when there are no examples.
pub fn next_step_metrics(
    predictions: &[Vec<StepId>],
    split: &EvalSplit,
) -> Result<NextStepMetrics> {
    check_len(split.test_examples.len(), predictions.len())?;
    let n = predictions.len().max(1) as f64;
    let mut sum = NextStepMetrics::default();
    for (pred, ex) in predictions.iter().zip(&split.test_examples) {
        let m = next_step_scores(pred, &ex.gold_next);
        sum.acc_at_1 += m.acc_at_1;
        sum.acc_at_3 += m.acc_at_3;
        sum.prec_at_3 += m.prec_at_3;
        sum.rec_at_3 += m.rec_at_3;
        sum.f1_at_3 += m.f1_at_3;
    }
    Ok(NextStepMetrics {
        acc_at_1: sum.acc_at_1 / n,
        acc_at_3: sum.acc_at_3 / n,
        prec_at_3: sum.prec_at_3 / n,
        rec_at_3: sum.rec_at_3 / n,
        f1_at_3: sum.f1_at_3 / n,
    })
}

/// Macro-averaged completion metrics; zeros when there are no examples.
pub fn completion_metrics(
    predicted: &[Vec<StepId>],
    split: &EvalSplit,
) -> Result<CompletionMetrics> {
    check_len(split.test_examples.len(), predicted.len())?;
    let n = predicted.len().max(1) as f64;
    let mut sum = CompletionMetrics::default();
    for (pred, ex) in predicted.iter().zip(&split.test_examples) {
        let m = completion_scores(pred, &ex.gold_completions);
        sum.acc_at_1 += m.acc_at_1;
        sum.edit_distance += m.edit_distance;
        sum.normalized_edit_distance += m.normalized_edit_distance;
    }
    Ok(CompletionMetrics {
        acc_at_1: sum.acc_at_1 / n,
        edit_distance: sum.edit_distance / n,
        normalized_edit_distance: sum.normalized_edit_distance / n,
    })
}

/// Ranked next-step lists and one completion per test example.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Predictions {
    pub next: Vec<Vec<StepId>>,
    pub completions: Vec<Vec<StepId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Random,
    Linear,
}

fn unused_steps(num_steps: usize, prefix: &[StepId]) -> Vec<StepId> {
    let used: HashSet<StepId> = prefix.iter().copied().collect();
    (0..num_steps)
        .map(StepId::from)
        .filter(|s| !used.contains(s))
        .collect()
}

fn random_guess<R: Rng + ?Sized>(
    num_steps: usize,
    prefix: &[StepId],
    rng: &mut R,
) -> (Vec<StepId>, Vec<StepId>) {
    let mut ranked = unused_steps(num_steps, prefix);
    ranked.shuffle(rng);
    let completion = if ranked.is_empty() {
        Vec::new()
    } else {
        let len = rng.random_range(1..=ranked.len());
        ranked[..len].to_vec()
    };
    (ranked, completion)
}

/// Continuation of `prefix` read off the document order that contains its
/// last step and shares the most steps with it (earliest document on ties).
fn linear_continuation(prefix: &[StepId], orders: &[Vec<StepId>]) -> Option<Vec<StepId>> {
    let tail = *prefix.last()?;
    let used: HashSet<StepId> = prefix.iter().copied().collect();
    orders
        .iter()
        .filter_map(|order| {
            let pos = order.iter().position(|&s| s == tail)?;
            let overlap = order.iter().filter(|s| used.contains(s)).count();
            let rest: Vec<StepId> = order[pos + 1..]
                .iter()
                .copied()
                .filter(|s| !used.contains(s))
                .collect();
            (!rest.is_empty()).then_some((overlap, rest))
        })
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.0.cmp(&b.0).then(ib.cmp(ia)))
        .map(|(_, (_, rest))| rest)
}

/// Random or document-order baseline predictions for every test example.
pub fn baseline_predict(
    kind: BaselineKind,
    split: &EvalSplit,
    num_steps: usize,
    linear_sequences: Option<&[Vec<StepId>]>,
    rng_seed: u64,
) -> Result<Predictions> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let orders = match kind {
        BaselineKind::Linear => Some(linear_sequences.ok_or(Error::MissingLinearData)?),
        BaselineKind::Random => None,
    };
    let mut out = Predictions::default();
    for ex in &split.test_examples {
        let (mut ranked, mut completion) = random_guess(num_steps, &ex.prefix, &mut rng);
        if let Some(rest) = orders.and_then(|o| linear_continuation(&ex.prefix, o)) {
            let mut filled = rest.clone();
            filled.extend(ranked.into_iter().filter(|s| !rest.contains(s)));
            ranked = filled;
            completion = rest;
        }
        out.next.push(ranked);
        out.completions.push(completion);
    }
    Ok(out)
}

/// Next steps ranked by the model (END and used steps excluded) and the
/// continuation of the best constrained decode from each prefix.
pub fn model_predict<M: StepPredictor + ?Sized>(
    model: &M,
    trie: &PrefixTrie,
    split: &EvalSplit,
    decode: &DecodeConfig,
) -> Result<Predictions> {
    let mut out = Predictions::default();
    for ex in &split.test_examples {
        let used: HashSet<StepId> = ex.prefix.iter().copied().collect();
        let dist = model.next_step_distribution(&ex.prefix)?;
        out.next.push(
            dist.ranked_steps()
                .into_iter()
                .map(|(s, _)| s)
                .filter(|s| !used.contains(s))
                .collect(),
        );
        let best = constrained_beam_search_from(model, trie, &ex.prefix, decode)?;
        out.completions
            .push(best[0].steps[ex.prefix.len()..].to_vec());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub system: String,
    pub next_step: NextStepMetrics,
    pub completion: CompletionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task_id: String,
    pub train_sequences: usize,
    pub test_examples: usize,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    /// Aligned text table; rates shown as percentages.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} | {:>7} {:>7} {:>7} {:>7} | {:>7} {:>7} {:>10}",
            "", "NSP", "", "", "", "PSC", "", ""
        );
        let _ = writeln!(
            out,
            "{:<10} | {:>7} {:>7} {:>7} {:>7} | {:>7} {:>7} {:>10}",
            "system", "Acc@1", "Acc@3", "Rec@3", "F1@3", "Acc@1", "Edit", "Normalized"
        );
        for row in &self.rows {
            let n = &row.next_step;
            let c = &row.completion;
            let _ = writeln!(
                out,
                "{:<10} | {:>7.2} {:>7.2} {:>7.2} {:>7.2} | {:>7.2} {:>7.3} {:>10.3}",
                row.system,
                100.0 * n.acc_at_1,
                100.0 * n.acc_at_3,
                100.0 * n.rec_at_3,
                100.0 * n.f1_at_3,
                100.0 * c.acc_at_1,
                c.edit_distance,
                c.normalized_edit_distance
            );
        }
        out
    }
}
