//! Corpus ingestion: step-text normalization, near-duplicate removal,
//! per-task step libraries and corpus-level ordering statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::edit::normalized_char_levenshtein;
use crate::error::{Error, Result};
use crate::grounding::GroundedSequence;

/// Minimum normalized edit distance between any two library steps.
pub const MIN_STEP_DISTANCE: f64 = 0.1;

/// Dense index of a step inside one [`StepLibrary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StepId(pub u32);

impl StepId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for StepId {
    fn from(i: usize) -> Self {
        StepId(u32::try_from(i).expect("step index overflows u32"))
    }
}

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub task_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, task_name: impl Into<String>) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            task_name: task_name.into(),
            category: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_name.trim().is_empty() {
            return Err(Error::Invalid(format!(
                "task {} has an empty name",
                self.task_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub step_id: StepId,
    pub raw_text: String,
    pub normalized_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDoc {
    pub title: String,
    pub rank_score: f64,
}

/// Canonical, deduplicated steps for a single task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLibrary {
    pub task_id: String,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub source_docs: Vec<SourceDoc>,
}

impl StepLibrary {
    /// Builds a library from already-normalized texts, ids in input order.
    pub fn from_normalized<S: AsRef<str>>(task_id: impl Into<String>, texts: &[S]) -> Self {
        let steps = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Step {
                step_id: StepId::from(i),
                raw_text: t.as_ref().to_string(),
                normalized_text: t.as_ref().to_string(),
            })
            .collect();
        StepLibrary {
            task_id: task_id.into(),
            steps,
            source_docs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn contains(&self, id: StepId) -> bool {
        id.index() < self.steps.len()
    }

    pub fn step(&self, id: StepId) -> Result<&Step> {
        self.steps.get(id.index()).ok_or(Error::UnknownStep(id))
    }

    pub fn text(&self, id: StepId) -> Result<&str> {
        self.step(id).map(|s| s.normalized_text.as_str())
    }

    pub fn ids(&self) -> impl Iterator<Item = StepId> + '_ {
        self.steps.iter().map(|s| s.step_id)
    }

    /// Checks contiguous ids, non-empty texts and the minimum pairwise distance.
    pub fn validate(&self) -> Result<()> {
        for (i, step) in self.steps.iter().enumerate() {
            if step.step_id.index() != i {
                return Err(Error::Invalid(format!(
                    "library {}: step ids not contiguous at position {i}",
                    self.task_id
                )));
            }
            if step.normalized_text.is_empty() {
                return Err(Error::Invalid(format!(
                    "library {}: step {i} has empty text",
                    self.task_id
                )));
            }
        }
        for (i, a) in self.steps.iter().enumerate() {
            for b in &self.steps[i + 1..] {
                if normalized_char_levenshtein(&a.normalized_text, &b.normalized_text)
                    < MIN_STEP_DISTANCE
                {
                    return Err(Error::Invalid(format!(
                        "library {}: steps {} and {} are near-duplicates",
                        self.task_id, a.step_id, b.step_id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Labelled,
    Asr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawItem {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<f64>,
}

impl RawItem {
    pub fn text(text: impl Into<String>) -> Self {
        RawItem {
            text: text.into(),
            start: None,
            end: None,
        }
    }
}

/// One observed execution of a task, before grounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSequenceRecord {
    pub video_id: String,
    pub task_id: String,
    pub kind: SequenceKind,
    /// Video title; unlabelled videos are only accepted when it matches the task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub items: Vec<RawItem>,
}

impl RawSequenceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Invalid(format!(
                "record {} has no items",
                self.video_id
            )));
        }
        let mut last = f64::NEG_INFINITY;
        for item in &self.items {
            for t in [item.start, item.end].into_iter().flatten() {
                if !t.is_finite() || t < last {
                    return Err(Error::Invalid(format!(
                        "record {}: timestamps must be finite and non-decreasing",
                        self.video_id
                    )));
                }
                last = t;
            }
        }
        Ok(())
    }
}

/// A how-to document: a title and its steps in document order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateDoc {
    pub title: String,
    pub steps: Vec<String>,
}

/// A candidate document with its task-relevance score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc: CandidateDoc,
    pub score: f64,
}

/// Hook for reducing step granularity before deduplication.
pub trait Simplifier {
    fn simplify(&self, text: &str) -> String;
}

/// Pass-through simplifier.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentitySimplifier;

impl Simplifier for IdentitySimplifier {
    fn simplify(&self, text: &str) -> String {
        text.to_string()
    }
}

/// Lowercases, drops bracketed spans, collapses whitespace and strips
/// punctuation from both ends.
pub fn normalize_step(raw: &str) -> Result<String> {
    let lowered = raw.to_lowercase();
    let mut kept = String::with_capacity(lowered.len());
    let mut depth = 0usize;
    for c in lowered.chars() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth = depth.saturating_sub(1),
            _ if depth == 0 => kept.push(c),
            _ => {}
        }
    }
    let collapsed = kept.split_whitespace().collect::<Vec<_>>().join(" ");
    let trimmed = collapsed.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        return Err(Error::EmptyStep);
    }
    Ok(trimmed.to_string())
}

/// Keeps the first member of every near-duplicate cluster, preserving order.
pub fn deduplicate_library<S: AsRef<str>>(steps: &[S]) -> Vec<String> {
    let mut kept: Vec<String> = Vec::new();
    for s in steps {
        let s = s.as_ref();
        if kept
            .iter()
            .all(|k| normalized_char_levenshtein(k, s) >= MIN_STEP_DISTANCE)
        {
            kept.push(s.to_string());
        }
    }
    kept
}

/// Merges the steps of the `top_m` highest-ranked documents into one library.
pub fn build_step_library(
    task: &TaskSpec,
    candidate_docs: &[RankedDoc],
    top_m: usize,
    simplifier: &dyn Simplifier,
) -> Result<StepLibrary> {
    if candidate_docs.is_empty() {
        return Err(Error::NoDocuments);
    }
    let docs = &candidate_docs[..top_m.max(1).min(candidate_docs.len())];
    let mut raw_for: Vec<(String, String)> = Vec::new();
    for ranked in docs {
        for raw in &ranked.doc.steps {
            // Steps with nothing left after normalization are skipped.
            let Ok(norm) = normalize_step(raw) else {
                continue;
            };
            let simplified = simplifier.simplify(&norm);
            let Ok(norm) = normalize_step(&simplified) else {
                continue;
            };
            raw_for.push((raw.clone(), norm));
        }
    }
    let normalized: Vec<&str> = raw_for.iter().map(|(_, n)| n.as_str()).collect();
    let kept = deduplicate_library(&normalized);
    let steps = kept
        .into_iter()
        .enumerate()
        .map(|(i, norm)| {
            let raw = raw_for
                .iter()
                .find(|(_, n)| *n == norm)
                .map(|(r, _)| r.clone())
                .unwrap_or_else(|| norm.clone());
            Step {
                step_id: StepId::from(i),
                raw_text: raw,
                normalized_text: norm,
            }
        })
        .collect();
    Ok(StepLibrary {
        task_id: task.task_id.clone(),
        steps,
        source_docs: docs
            .iter()
            .map(|d| SourceDoc {
                title: d.doc.title.clone(),
                rank_score: d.score,
            })
            .collect(),
    })
}

/// Maps each document's step order onto library ids. A document step maps to
/// the library step it equals, or else to the first one within the
/// near-duplicate distance; steps matching nothing are skipped.
pub fn linear_step_orders(
    library: &StepLibrary,
    docs: &[CandidateDoc],
    simplifier: &dyn Simplifier,
) -> Vec<Vec<StepId>> {
    docs.iter()
        .map(|doc| {
            let mut seen = HashSet::new();
            let mut order = Vec::new();
            for raw in &doc.steps {
                let Ok(norm) = normalize_step(raw) else {
                    continue;
                };
                let Ok(norm) = normalize_step(&simplifier.simplify(&norm)) else {
                    continue;
                };
                let hit = library
                    .steps
                    .iter()
                    .find(|s| s.normalized_text == norm)
                    .or_else(|| {
                        library.steps.iter().find(|s| {
                            normalized_char_levenshtein(&s.normalized_text, &norm)
                                < MIN_STEP_DISTANCE
                        })
                    });
                if let Some(step) = hit {
                    if seen.insert(step.step_id) {
                        order.push(step.step_id);
                    }
                }
            }
            order
        })
        .collect()
}

/// Corpus-level ordering statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Share of consecutively observed unordered pairs seen in both orders.
    pub reversal_rate: f64,
    /// Mean number of frequent successors over steps having at least one.
    pub mean_frequent_next_steps: f64,
    /// Same count averaged over every step occurring in the corpus.
    pub mean_frequent_next_steps_all_steps: f64,
    /// A successor is frequent when the pair occurs in more than this many videos.
    pub frequency_threshold: u32,
}

pub fn corpus_statistics(
    sequences: &[GroundedSequence],
    frequency_threshold: u32,
) -> Result<CorpusStats> {
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    // Number of distinct videos in which each directed consecutive pair occurs.
    let mut pair_videos: BTreeMap<(StepId, StepId), u32> = BTreeMap::new();
    let mut steps_seen: BTreeSet<StepId> = BTreeSet::new();
    for seq in sequences {
        steps_seen.extend(seq.step_ids.iter().copied());
        let pairs: BTreeSet<(StepId, StepId)> =
            seq.step_ids.windows(2).map(|w| (w[0], w[1])).collect();
        for p in pairs {
            *pair_videos.entry(p).or_insert(0) += 1;
        }
    }

    let unordered: BTreeSet<(StepId, StepId)> = pair_videos
        .keys()
        .filter(|(a, b)| a != b)
        .map(|&(a, b)| (a.min(b), a.max(b)))
        .collect();
    let reversed = unordered
        .iter()
        .filter(|&&(a, b)| pair_videos.contains_key(&(a, b)) && pair_videos.contains_key(&(b, a)))
        .count();
    let reversal_rate = if unordered.is_empty() {
        0.0
    } else {
        reversed as f64 / unordered.len() as f64
    };

    let mut frequent: BTreeMap<StepId, usize> = BTreeMap::new();
    for (&(from, _), &n) in &pair_videos {
        if n > frequency_threshold {
            *frequent.entry(from).or_insert(0) += 1;
        }
    }
    let total: usize = frequent.values().sum();
    let mean_frequent_next_steps = if frequent.is_empty() {
        0.0
    } else {
        total as f64 / frequent.len() as f64
    };
    let mean_frequent_next_steps_all_steps = total as f64 / steps_seen.len() as f64;

    Ok(CorpusStats {
        reversal_rate,
        mean_frequent_next_steps,
        mean_frequent_next_steps_all_steps,
        frequency_threshold,
    })
}
