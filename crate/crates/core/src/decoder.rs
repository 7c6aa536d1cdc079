//! Step-constrained beam search.
//!
//! A [`PrefixTrie`] over the word tokens of every library step limits what
//! the decoder may emit: from the root it walks words until an end-marker
//! completes a step, after which it either emits the end of the sequence or
//! starts a new step from the root. Scoring happens at step granularity
//! through a [`StepPredictor`].

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{StepId, StepLibrary};
use crate::error::{Error, Result};
use crate::pathmodel::{Next, StepPredictor};

/// Marks a step boundary in rendered token sequences.
pub const SEPARATOR: &str = "<->";

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<String, usize>,
    step: Option<StepId>,
}

/// What may follow the current trie position.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Continuation {
    Word(String),
    /// The current node completes this step; the separator is emitted next.
    CompleteStep(StepId),
    EndOfSequence,
}

#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
    tokens: Vec<Vec<String>>,
}

impl PrefixTrie {
    pub const ROOT: usize = 0;

    pub fn build(library: &StepLibrary) -> Result<Self> {
        if library.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        let mut trie = PrefixTrie {
            nodes: vec![TrieNode::default()],
            tokens: Vec::with_capacity(library.len()),
        };
        for step in &library.steps {
            let words: Vec<String> = step
                .normalized_text
                .split_whitespace()
                .map(str::to_string)
                .collect();
            if words.is_empty() {
                return Err(Error::EmptyStep);
            }
            let mut node = Self::ROOT;
            for w in &words {
                node = match trie.nodes[node].children.get(w) {
                    Some(&child) => child,
                    None => {
                        trie.nodes.push(TrieNode::default());
                        let child = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(w.clone(), child);
                        child
                    }
                };
            }
            if let Some(other) = trie.nodes[node].step {
                return Err(Error::Invalid(format!(
                    "steps {other} and {} have identical tokens",
                    step.step_id
                )));
            }
            trie.nodes[node].step = Some(step.step_id);
            trie.tokens.push(words);
        }
        Ok(trie)
    }

    pub fn num_steps(&self) -> usize {
        self.tokens.len()
    }

    pub fn child(&self, node: usize, word: &str) -> Option<usize> {
        self.nodes.get(node)?.children.get(word).copied()
    }

    /// Words and step completions allowed at `node`.
    pub fn allowed(&self, node: usize) -> Vec<Continuation> {
        let n = &self.nodes[node];
        let mut out: Vec<Continuation> =
            n.children.keys().cloned().map(Continuation::Word).collect();
        if let Some(id) = n.step {
            out.push(Continuation::CompleteStep(id));
        }
        out
    }

    /// After a completed step: end the sequence or start another step.
    pub fn after_step(&self) -> Vec<Continuation> {
        let mut out = vec![Continuation::EndOfSequence];
        out.extend(
            self.nodes[Self::ROOT]
                .children
                .keys()
                .cloned()
                .map(Continuation::Word),
        );
        out
    }

    /// Every step reachable from the root, in trie order.
    pub fn reachable_steps(&self) -> Vec<StepId> {
        let mut out = Vec::with_capacity(self.tokens.len());
        let mut stack = vec![Self::ROOT];
        while let Some(node) = stack.pop() {
            let n = &self.nodes[node];
            if let Some(id) = n.step {
                out.push(id);
            }
            stack.extend(n.children.values().rev());
        }
        out
    }

    pub fn step_tokens(&self, id: StepId) -> Option<&[String]> {
        self.tokens.get(id.index()).map(Vec::as_slice)
    }

    /// Token rendering of a path with a separator after every step.
    pub fn render(&self, path: &[StepId]) -> Result<String> {
        let mut parts: Vec<&str> = Vec::new();
        for &id in path {
            let tokens = self.step_tokens(id).ok_or(Error::UnknownStep(id))?;
            parts.extend(tokens.iter().map(String::as_str));
            parts.push(SEPARATOR);
        }
        Ok(parts.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Defaults to twice the library size when unset.
    pub max_steps: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 40,
            max_steps: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::BadConfig("beam_width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPath {
    pub steps: Vec<StepId>,
    pub logprob: f64,
}

struct Hypothesis {
    steps: Vec<StepId>,
    logprob: f64,
}

fn by_score(a: &(Vec<StepId>, f64), b: &(Vec<StepId>, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Decodes complete paths from START, each ending in END.
pub fn constrained_beam_search<M: StepPredictor + ?Sized>(
    model: &M,
    trie: &PrefixTrie,
    cfg: &DecodeConfig,
) -> Result<Vec<DecodedPath>> {
    constrained_beam_search_from(model, trie, &[], cfg)
}

/// Beam search continuing `prefix`. Returned paths include the prefix and
/// their log-probabilities cover the whole path. No step repeats, and the
/// empty path is never produced.
pub fn constrained_beam_search_from<M: StepPredictor + ?Sized>(
    model: &M,
    trie: &PrefixTrie,
    prefix: &[StepId],
    cfg: &DecodeConfig,
) -> Result<Vec<DecodedPath>> {
    cfg.validate()?;
    if model.num_steps() != trie.num_steps() {
        return Err(Error::Invalid(format!(
            "model covers {} steps but the trie has {}",
            model.num_steps(),
            trie.num_steps()
        )));
    }
    let max_steps = cfg.max_steps.unwrap_or(2 * trie.num_steps());
    let candidates = trie.reachable_steps();

    let mut prefix_logprob = 0.0;
    for i in 0..prefix.len() {
        let dist = model.next_step_distribution(&prefix[..i])?;
        prefix_logprob += dist.prob(Next::Step(prefix[i])).ln();
    }
    if prefix.len() != prefix.iter().collect::<HashSet<_>>().len() {
        return Err(Error::Invalid("prefix repeats a step".into()));
    }

    let mut open = vec![Hypothesis {
        steps: prefix.to_vec(),
        logprob: prefix_logprob,
    }];
    let mut finished: Vec<(Vec<StepId>, f64)> = Vec::new();

    while !open.is_empty() {
        let mut expanded: Vec<(Vec<StepId>, f64)> = Vec::new();
        for hyp in &open {
            let dist = model.next_step_distribution(&hyp.steps)?;
            if !hyp.steps.is_empty() {
                finished.push((hyp.steps.clone(), hyp.logprob + dist.end().ln()));
            }
            if hyp.steps.len() >= max_steps {
                continue;
            }
            let used: HashSet<StepId> = hyp.steps.iter().copied().collect();
            for &id in &candidates {
                if used.contains(&id) {
                    continue;
                }
                let p = dist.prob(Next::Step(id));
                if p <= 0.0 {
                    continue;
                }
                let mut steps = hyp.steps.clone();
                steps.push(id);
                expanded.push((steps, hyp.logprob + p.ln()));
            }
        }
        expanded.sort_by(by_score);
        expanded.truncate(cfg.beam_width);

        finished.sort_by(by_score);
        finished.truncate(cfg.beam_width);
        // Scores only fall as paths grow, so a full finished list that beats
        // every open hypothesis is final.
        if finished.len() == cfg.beam_width {
            let worst_kept = finished[finished.len() - 1].1;
            if expanded.first().is_none_or(|best| best.1 <= worst_kept) {
                break;
            }
        }
        open = expanded
            .into_iter()
            .map(|(steps, logprob)| Hypothesis { steps, logprob })
            .collect();
    }

    if finished.is_empty() {
        return Err(Error::NoCompletion { max_steps });
    }
    let mut merged: BTreeMap<Vec<StepId>, f64> = BTreeMap::new();
    for (steps, lp) in finished {
        let e = merged.entry(steps).or_insert(f64::NEG_INFINITY);
        *e = e.max(lp);
    }
    let mut out: Vec<(Vec<StepId>, f64)> = merged.into_iter().collect();
    out.sort_by(by_score);
    out.truncate(cfg.beam_width);
    Ok(out
        .into_iter()
        .map(|(steps, logprob)| DecodedPath { steps, logprob })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathmodel::{NextStepDistribution, PathModel, PathModelConfig};

    fn lib(texts: &[&str]) -> StepLibrary {
        StepLibrary::from_normalized("t", texts)
    }

    #[test]
    fn trie_shares_prefixes() {
        let t = PrefixTrie::build(&lib(&["add salt", "add sugar"])).unwrap();
        let add = t.child(PrefixTrie::ROOT, "add").unwrap();
        assert_eq!(
            t.allowed(add),
            [
                Continuation::Word("salt".into()),
                Continuation::Word("sugar".into())
            ]
        );
        let salt = t.child(add, "salt").unwrap();
        assert_eq!(t.allowed(salt), [Continuation::CompleteStep(StepId(0))]);
        assert_eq!(
            t.after_step(),
            [
                Continuation::EndOfSequence,
                Continuation::Word("add".into())
            ]
        );
        assert_eq!(
            t.render(&[StepId(1), StepId(0)]).unwrap(),
            "add sugar <-> add salt <->"
        );
    }

    #[test]
    fn trie_marks_step_that_prefixes_another() {
        let t = PrefixTrie::build(&lib(&["stir", "stir well"])).unwrap();
        let stir = t.child(PrefixTrie::ROOT, "stir").unwrap();
        assert_eq!(
            t.allowed(stir),
            [
                Continuation::Word("well".into()),
                Continuation::CompleteStep(StepId(0))
            ]
        );
        assert_eq!(t.reachable_steps(), [StepId(0), StepId(1)]);
    }

    #[test]
    fn trie_rejects_empty_library() {
        assert!(matches!(
            PrefixTrie::build(&lib(&[])),
            Err(Error::EmptyLibrary)
        ));
    }

    struct Table(Vec<f64>, Vec<f64>);

    impl StepPredictor for Table {
        fn num_steps(&self) -> usize {
            1
        }
        fn next_step_distribution(&self, prefix: &[StepId]) -> Result<NextStepDistribution> {
            Ok(NextStepDistribution::from_probs(if prefix.is_empty() {
                self.0.clone()
            } else {
                self.1.clone()
            }))
        }
    }

    #[test]
    fn deterministic_model_decodes_single_path() {
        let t = PrefixTrie::build(&lib(&["a"])).unwrap();
        let m = Table(vec![1.0, 0.0], vec![0.0, 1.0]);
        let out = constrained_beam_search(&m, &t, &DecodeConfig::default()).unwrap();
        assert_eq!(
            out,
            [DecodedPath {
                steps: vec![StepId(0)],
                logprob: 0.0
            }]
        );
    }

    #[test]
    fn no_completion_when_end_unreachable() {
        let t = PrefixTrie::build(&lib(&["a"])).unwrap();
        let m = Table(vec![0.0, 1.0], vec![0.0, 1.0]);
        assert!(matches!(
            constrained_beam_search(&m, &t, &DecodeConfig::default()),
            Err(Error::NoCompletion { .. })
        ));
    }

    #[test]
    fn two_step_library_matches_enumeration() {
        let l = lib(&["a", "b"]);
        let t = PrefixTrie::build(&l).unwrap();
        let paths = vec![
            vec![StepId(1), StepId(0)],
            vec![StepId(1), StepId(0)],
            vec![StepId(0)],
        ];
        let m = PathModel::train(&paths, 2, &PathModelConfig::default()).unwrap();
        let all = [
            vec![StepId(0)],
            vec![StepId(1)],
            vec![StepId(0), StepId(1)],
            vec![StepId(1), StepId(0)],
        ];
        let best = all
            .iter()
            .map(|p| (p.clone(), -m.sequence_nll(p).unwrap()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let out = constrained_beam_search(&m, &t, &DecodeConfig::default()).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0].steps, best.0);
        assert!((out[0].logprob - best.1).abs() < 1e-12);
    }

    #[test]
    fn prefix_decoding_keeps_prefix() {
        let l = lib(&["a", "b", "c"]);
        let t = PrefixTrie::build(&l).unwrap();
        let paths = vec![vec![StepId(0), StepId(1), StepId(2)]; 3];
        let m = PathModel::train(&paths, 3, &PathModelConfig::default()).unwrap();
        let out =
            constrained_beam_search_from(&m, &t, &[StepId(0)], &DecodeConfig::default()).unwrap();
        assert_eq!(out[0].steps, [StepId(0), StepId(1), StepId(2)]);
        assert!((out[0].logprob + m.sequence_nll(&out[0].steps).unwrap()).abs() < 1e-12);
    }
}
