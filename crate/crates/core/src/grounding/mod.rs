//! Grounding of observed step annotations and narration pieces onto a
//! [`StepLibrary`], plus task-level document matching.

mod similarity;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

pub use similarity::{
    cosine, word_tokens, HttpEmbeddingProvider, SimilarityProvider, TfIdfProvider,
};

use crate::corpus::{
    normalize_step, CandidateDoc, RankedDoc, RawSequenceRecord, SequenceKind, StepId, StepLibrary,
    TaskSpec,
};
use crate::error::{Error, Result};

/// Words ignored when extracting keywords from a task name.
const KEYWORD_STOPWORDS: &[&str] = &[
    "a", "an", "and", "at", "by", "for", "from", "how", "in", "into", "of", "on", "or", "the",
    "to", "with", "your", "you", "some",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    pub top_m_docs: usize,
    pub keyword_threshold: f64,
    pub relaxed_keyword_threshold: f64,
    /// Step threshold for labelled annotations.
    pub k1: f64,
    /// Title-to-task threshold for unlabelled videos.
    pub k2: f64,
    /// Step threshold for narration pieces.
    pub k3: f64,
    pub asr_min_words: usize,
    pub stop_words: Vec<String>,
    /// Drop library steps no video grounded to, renumbering the rest.
    pub prune_unused_steps: bool,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            top_m_docs: 10,
            keyword_threshold: 0.85,
            relaxed_keyword_threshold: 0.75,
            k1: 0.35,
            k2: 0.75,
            k3: 0.40,
            asr_min_words: 10,
            stop_words: vec!["subscribe".into(), "channel".into(), "sponsor".into()],
            prune_unused_steps: true,
        }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<()> {
        let thresholds = [
            ("keyword_threshold", self.keyword_threshold),
            ("relaxed_keyword_threshold", self.relaxed_keyword_threshold),
            ("k1", self.k1),
            ("k2", self.k2),
            ("k3", self.k3),
        ];
        for (name, v) in thresholds {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::BadConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.top_m_docs == 0 {
            return Err(Error::BadConfig("top_m_docs must be at least 1".into()));
        }
        if self.asr_min_words == 0 {
            return Err(Error::BadConfig("asr_min_words must be at least 1".into()));
        }
        Ok(())
    }
}

/// One observed execution path expressed as library step ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedSequence {
    pub video_id: String,
    pub task_id: String,
    pub step_ids: Vec<StepId>,
    pub scores: Vec<f64>,
    #[serde(default)]
    pub dropped: usize,
}

impl GroundedSequence {
    /// A sequence with perfect scores; handy for synthetic corpora.
    pub fn from_ids(
        video_id: impl Into<String>,
        task_id: impl Into<String>,
        step_ids: Vec<StepId>,
    ) -> Self {
        let scores = vec![1.0; step_ids.len()];
        GroundedSequence {
            video_id: video_id.into(),
            task_id: task_id.into(),
            step_ids,
            scores,
            dropped: 0,
        }
    }

    pub fn validate(&self, library: &StepLibrary) -> Result<()> {
        if self.step_ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if self.scores.len() != self.step_ids.len() {
            return Err(Error::Invalid(format!(
                "sequence {}: {} scores for {} steps",
                self.video_id,
                self.scores.len(),
                self.step_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for &id in &self.step_ids {
            if !library.contains(id) {
                return Err(Error::UnknownStep(id));
            }
            if !seen.insert(id) {
                return Err(Error::Invalid(format!(
                    "sequence {} repeats step {id}",
                    self.video_id
                )));
            }
        }
        if self.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Invalid(format!(
                "sequence {} has a score outside [0, 1]",
                self.video_id
            )));
        }
        Ok(())
    }
}

/// Content words of a task name.
pub fn task_keywords(task_name: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in word_tokens(task_name) {
        if !KEYWORD_STOPWORDS.contains(&t.as_str()) && !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

fn keyword_coverage(keywords: &[String], title: &str) -> f64 {
    if keywords.is_empty() {
        return 1.0;
    }
    let tokens: BTreeSet<String> = word_tokens(title).into_iter().collect();
    keywords.iter().filter(|k| tokens.contains(*k)).count() as f64 / keywords.len() as f64
}

/// Filters documents by title keyword coverage, relaxing the threshold when
/// too few pass, then ranks survivors by title-to-task similarity.
pub fn match_task_documents(
    task: &TaskSpec,
    all_docs: &[CandidateDoc],
    provider: &dyn SimilarityProvider,
    cfg: &GroundingConfig,
) -> Result<Vec<RankedDoc>> {
    if all_docs.is_empty() {
        return Err(Error::NoDocuments);
    }
    let keywords = task_keywords(&task.task_name);
    let coverage: Vec<f64> = all_docs
        .iter()
        .map(|d| keyword_coverage(&keywords, &d.title))
        .collect();
    let passing = |threshold: f64| -> Vec<usize> {
        (0..all_docs.len())
            .filter(|&i| coverage[i] >= threshold)
            .collect()
    };
    let mut survivors = passing(cfg.keyword_threshold);
    if survivors.len() < cfg.top_m_docs {
        survivors = passing(cfg.relaxed_keyword_threshold.min(cfg.keyword_threshold));
    }
    if survivors.is_empty() {
        return Err(Error::NoDocuments);
    }
    let titles: Vec<String> = survivors
        .iter()
        .map(|&i| all_docs[i].title.clone())
        .collect();
    let scores = provider.score_matrix(&titles, std::slice::from_ref(&task.task_name))?;
    let mut ranked: Vec<(usize, f64)> = survivors
        .iter()
        .zip(&scores)
        .map(|(&i, row)| (i, row[0]))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(cfg.top_m_docs);
    Ok(ranked
        .into_iter()
        .map(|(i, score)| RankedDoc {
            doc: all_docs[i].clone(),
            score,
        })
        .collect())
}

/// Greedy one-to-one assignment of rows to columns by descending score.
///
/// Pairs are visited in (score desc, row asc, column asc) order and taken
/// when both sides are still free and the score reaches `threshold`.
pub fn greedy_priority_match(scores: &[Vec<f64>], threshold: f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &s)| (s, r, c)))
        .filter(|&(s, _, _)| s >= threshold)
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let cols = scores.iter().map(Vec::len).max().unwrap_or(0);
    let mut row_match = vec![None; scores.len()];
    let mut col_taken = vec![false; cols];
    for (_, r, c) in pairs {
        if row_match[r].is_none() && !col_taken[c] {
            row_match[r] = Some(c);
            col_taken[c] = true;
        }
    }
    row_match
}

fn library_texts(library: &StepLibrary) -> Vec<String> {
    library
        .steps
        .iter()
        .map(|s| s.normalized_text.clone())
        .collect()
}

fn collapse_repeats(
    record: &RawSequenceRecord,
    hits: impl IntoIterator<Item = Option<(StepId, f64)>>,
) -> Result<GroundedSequence> {
    let mut seen = HashSet::new();
    let mut step_ids = Vec::new();
    let mut scores = Vec::new();
    let mut dropped = 0;
    for hit in hits {
        match hit {
            Some((id, score)) => {
                if seen.insert(id) {
                    step_ids.push(id);
                    scores.push(score.clamp(0.0, 1.0));
                }
            }
            None => dropped += 1,
        }
    }
    if step_ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(GroundedSequence {
        video_id: record.video_id.clone(),
        task_id: record.task_id.clone(),
        step_ids,
        scores,
        dropped,
    })
}

/// Grounds human step annotations with greedy priority matching at `k1`.
pub fn ground_labelled_sequence(
    record: &RawSequenceRecord,
    library: &StepLibrary,
    provider: &dyn SimilarityProvider,
    cfg: &GroundingConfig,
) -> Result<GroundedSequence> {
    if record.kind != SequenceKind::Labelled {
        return Err(Error::Invalid(format!(
            "record {} is not a labelled sequence",
            record.video_id
        )));
    }
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    // Annotations that normalize to nothing cannot ground; they score 0 everywhere.
    let queries: Vec<String> = record
        .items
        .iter()
        .map(|it| normalize_step(&it.text).unwrap_or_default())
        .collect();
    let mut scores = provider.score_matrix(&queries, &library_texts(library))?;
    for (row, q) in scores.iter_mut().zip(&queries) {
        if q.is_empty() {
            row.iter_mut().for_each(|s| *s = 0.0);
        }
    }
    let matched = greedy_priority_match(&scores, cfg.k1);
    collapse_repeats(
        record,
        matched
            .iter()
            .enumerate()
            .map(|(r, m)| m.map(|c| (StepId::from(c), scores[r][c]))),
    )
}

fn contains_stop_word(words: &[String], stop_words: &[Vec<String>]) -> bool {
    stop_words
        .iter()
        .any(|stop| !stop.is_empty() && words.windows(stop.len()).any(|w| w == stop.as_slice()))
}

/// Drops narration pieces containing stop words and concatenates the rest
/// until each piece exceeds `asr_min_words` words. A short tail joins the
/// previous piece.
pub fn preprocess_asr<S: AsRef<str>>(items: &[S], cfg: &GroundingConfig) -> Vec<String> {
    let stop_words: Vec<Vec<String>> = cfg.stop_words.iter().map(|s| word_tokens(s)).collect();
    let mut pieces: Vec<Vec<&str>> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for item in items {
        let text = item.as_ref();
        if contains_stop_word(&word_tokens(text), &stop_words) {
            continue;
        }
        current.extend(text.split_whitespace());
        if current.len() > cfg.asr_min_words {
            pieces.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        match pieces.last_mut() {
            Some(last) => last.extend(current),
            None => pieces.push(current),
        }
    }
    pieces.into_iter().map(|p| p.join(" ")).collect()
}

/// Whether an unlabelled video's title is close enough to the task name.
pub fn accept_asr_video(
    title: &str,
    task: &TaskSpec,
    provider: &dyn SimilarityProvider,
    cfg: &GroundingConfig,
) -> Result<bool> {
    Ok(provider.similarity(title, &task.task_name)? >= cfg.k2)
}

/// Grounds narration pieces independently to their best library step at `k3`.
pub fn ground_asr_sequence(
    record: &RawSequenceRecord,
    library: &StepLibrary,
    provider: &dyn SimilarityProvider,
    cfg: &GroundingConfig,
) -> Result<GroundedSequence> {
    if record.kind != SequenceKind::Asr {
        return Err(Error::Invalid(format!(
            "record {} is not a narration sequence",
            record.video_id
        )));
    }
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    let texts: Vec<&str> = record.items.iter().map(|it| it.text.as_str()).collect();
    let pieces = preprocess_asr(&texts, cfg);
    if pieces.is_empty() {
        return Err(Error::EmptySequence);
    }
    let queries: Vec<String> = pieces.iter().map(|p| p.to_lowercase()).collect();
    let scores = provider.score_matrix(&queries, &library_texts(library))?;
    let hits = scores.iter().map(|row| {
        let mut best: Option<(usize, f64)> = None;
        for (c, &s) in row.iter().enumerate() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        best.filter(|&(_, s)| s >= cfg.k3)
            .map(|(c, s)| (StepId::from(c), s))
    });
    collapse_repeats(record, hits)
}

/// Grounds one record with the procedure matching its kind.
pub fn ground_record(
    record: &RawSequenceRecord,
    library: &StepLibrary,
    provider: &dyn SimilarityProvider,
    cfg: &GroundingConfig,
) -> Result<GroundedSequence> {
    match record.kind {
        SequenceKind::Labelled => ground_labelled_sequence(record, library, provider, cfg),
        SequenceKind::Asr => ground_asr_sequence(record, library, provider, cfg),
    }
}

/// Removes library steps no sequence uses and renumbers everything densely.
/// Returns the new library, remapped sequences and the old-to-new id map.
pub fn prune_unused_steps(
    library: &StepLibrary,
    sequences: &[GroundedSequence],
) -> (StepLibrary, Vec<GroundedSequence>, Vec<Option<StepId>>) {
    let used: BTreeSet<StepId> = sequences
        .iter()
        .flat_map(|s| s.step_ids.iter().copied())
        .collect();
    let mut remap = vec![None; library.len()];
    let mut steps = Vec::new();
    for step in &library.steps {
        if used.contains(&step.step_id) {
            let new_id = StepId::from(steps.len());
            remap[step.step_id.index()] = Some(new_id);
            let mut s = step.clone();
            s.step_id = new_id;
            steps.push(s);
        }
    }
    let pruned = StepLibrary {
        task_id: library.task_id.clone(),
        steps,
        source_docs: library.source_docs.clone(),
    };
    let sequences = sequences
        .iter()
        .map(|s| GroundedSequence {
            step_ids: s
                .step_ids
                .iter()
                .map(|id| remap[id.index()].expect("used step is kept"))
                .collect(),
            ..s.clone()
        })
        .collect();
    (pruned, sequences, remap)
}
