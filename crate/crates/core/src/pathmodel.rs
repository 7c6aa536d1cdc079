//! Smoothed Markov path model over library steps.
//!
//! Transition counts are kept for every context length from 1 up to the
//! configured order. Lookups use the longest context that was observed
//! during training and fall back to shorter ones; an unseen order-1 context
//! yields the uniform distribution. Each distribution is additively
//! smoothed over the library steps plus END:
//!
//! `P(next | ctx) = (count + lambda) / (total + lambda * (|library| + 1))`

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::corpus::{StepId, StepLibrary};
use crate::error::{Error, Result};
use crate::grounding::GroundedSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathModelConfig {
    pub order: usize,
    pub smoothing_lambda: f64,
}

impl Default for PathModelConfig {
    fn default() -> Self {
        PathModelConfig {
            order: 2,
            smoothing_lambda: 0.1,
        }
    }
}

impl PathModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::BadConfig(
                "path model order must be at least 1".into(),
            ));
        }
        if !(self.smoothing_lambda > 0.0 && self.smoothing_lambda.is_finite()) {
            return Err(Error::BadConfig(format!(
                "smoothing_lambda must be positive, got {}",
                self.smoothing_lambda
            )));
        }
        Ok(())
    }
}

/// Element of a conditioning context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Symbol {
    Start,
    Step(StepId),
}

/// Outcome of one transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Next {
    Step(StepId),
    End,
}

impl fmt::Display for Next {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Next::Step(id) => write!(f, "{id}"),
            Next::End => f.write_str("END"),
        }
    }
}

impl Serialize for Symbol {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Symbol::Start => s.serialize_str("START"),
            Symbol::Step(id) => s.serialize_u32(id.0),
        }
    }
}

impl<'de> Deserialize<'de> for Symbol {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Id(u32),
            Marker(String),
        }
        match Repr::deserialize(d)? {
            Repr::Id(i) => Ok(Symbol::Step(StepId(i))),
            Repr::Marker(m) if m == "START" => Ok(Symbol::Start),
            Repr::Marker(m) => Err(de::Error::custom(format!("unknown context symbol {m}"))),
        }
    }
}

/// Full distribution over the library steps and END.
#[derive(Debug, Clone, PartialEq)]
pub struct NextStepDistribution {
    /// Indexed by step id; the final entry is END.
    probs: Vec<f64>,
}

impl NextStepDistribution {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        assert!(!probs.is_empty(), "distribution needs an END entry");
        NextStepDistribution { probs }
    }

    pub fn num_steps(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn prob(&self, next: Next) -> f64 {
        match next {
            Next::Step(id) => self.probs.get(id.index()).copied().unwrap_or(0.0),
            Next::End => self.probs[self.probs.len() - 1],
        }
    }

    pub fn end(&self) -> f64 {
        self.prob(Next::End)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Next, f64)> + '_ {
        let n = self.num_steps();
        self.probs.iter().enumerate().map(move |(i, &p)| {
            let next = if i == n {
                Next::End
            } else {
                Next::Step(StepId::from(i))
            };
            (next, p)
        })
    }

    /// Steps (END excluded) by descending probability, ties by ascending id.
    pub fn ranked_steps(&self) -> Vec<(StepId, f64)> {
        let mut steps: Vec<(StepId, f64)> = self.probs[..self.num_steps()]
            .iter()
            .enumerate()
            .map(|(i, &p)| (StepId::from(i), p))
            .collect();
        steps.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        steps
    }

    pub fn to_map(&self) -> BTreeMap<Next, f64> {
        self.iter().collect()
    }
}

/// Anything that predicts the next step of a path given its prefix.
///
/// Decoding and evaluation only need this interface, so a learned sequence
/// model can replace the Markov surrogate.
pub trait StepPredictor {
    fn num_steps(&self) -> usize;

    fn next_step_distribution(&self, prefix: &[StepId]) -> Result<NextStepDistribution>;

    /// Negative log-likelihood (base e) of the path, START and END included.
    fn sequence_nll(&self, sequence: &[StepId]) -> Result<f64> {
        let mut nll = 0.0;
        for i in 0..=sequence.len() {
            let dist = self.next_step_distribution(&sequence[..i])?;
            let next = sequence.get(i).map_or(Next::End, |&id| Next::Step(id));
            nll -= dist.prob(next).ln();
        }
        Ok(nll)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ContextCounts {
    /// Indexed like [`NextStepDistribution::probs`].
    counts: Vec<u64>,
    total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathModel {
    num_steps: usize,
    config: PathModelConfig,
    contexts: BTreeMap<Vec<Symbol>, ContextCounts>,
}

fn context(prefix: &[StepId], len: usize) -> Vec<Symbol> {
    let pad = len.saturating_sub(prefix.len());
    let mut ctx = vec![Symbol::Start; pad];
    ctx.extend(
        prefix[prefix.len() - (len - pad)..]
            .iter()
            .map(|&id| Symbol::Step(id)),
    );
    ctx
}

pub fn train_path_model(
    sequences: &[GroundedSequence],
    library: &StepLibrary,
    cfg: &PathModelConfig,
) -> Result<PathModel> {
    let paths: Vec<&[StepId]> = sequences.iter().map(|s| s.step_ids.as_slice()).collect();
    PathModel::train(&paths, library.len(), cfg)
}

impl PathModel {
    pub fn train<P: AsRef<[StepId]>>(
        paths: &[P],
        num_steps: usize,
        cfg: &PathModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if paths.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if num_steps == 0 {
            return Err(Error::EmptyLibrary);
        }
        let mut contexts: BTreeMap<Vec<Symbol>, ContextCounts> = BTreeMap::new();
        for path in paths {
            let path = path.as_ref();
            if let Some(&bad) = path.iter().find(|id| id.index() >= num_steps) {
                return Err(Error::UnknownStep(bad));
            }
            for i in 0..=path.len() {
                let slot = path.get(i).map_or(num_steps, |id| id.index());
                for len in 1..=cfg.order {
                    let entry =
                        contexts
                            .entry(context(&path[..i], len))
                            .or_insert_with(|| ContextCounts {
                                counts: vec![0; num_steps + 1],
                                total: 0,
                            });
                    entry.counts[slot] += 1;
                    entry.total += 1;
                }
            }
        }
        Ok(PathModel {
            num_steps,
            config: cfg.clone(),
            contexts,
        })
    }

    pub fn config(&self) -> &PathModelConfig {
        &self.config
    }

    /// Observed count of `next` after the exact context, if the context was seen.
    pub fn count(&self, ctx: &[Symbol], next: Next) -> Option<u64> {
        let slot = match next {
            Next::Step(id) => id.index(),
            Next::End => self.num_steps,
        };
        self.contexts.get(ctx).map(|c| c.counts[slot])
    }

    /// Draws a path by ancestral sampling, at most `max_len` steps long.
    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R, max_len: usize) -> Vec<StepId> {
        let mut path = Vec::new();
        while path.len() < max_len {
            let dist = self
                .next_step_distribution(&path)
                .expect("sampled steps come from the library");
            let mut u: f64 = rng.random();
            let mut chosen = Next::End;
            for (next, p) in dist.iter() {
                if u < p {
                    chosen = next;
                    break;
                }
                u -= p;
            }
            match chosen {
                Next::Step(id) => path.push(id),
                Next::End => break,
            }
        }
        path
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            order: self.config.order,
            lambda: self.config.smoothing_lambda,
            num_steps: self.num_steps,
            contexts: self
                .contexts
                .iter()
                .map(|(ctx, c)| ContextEntry {
                    ctx: ctx.clone(),
                    counts: c
                        .counts
                        .iter()
                        .enumerate()
                        .filter(|(_, &n)| n > 0)
                        .map(|(i, &n)| {
                            let key = if i == self.num_steps {
                                "END".to_string()
                            } else {
                                i.to_string()
                            };
                            (key, n)
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "path model".into(),
            source,
        })?;
        let config = PathModelConfig {
            order: file.order,
            smoothing_lambda: file.lambda,
        };
        config.validate()?;
        let num_steps = file.num_steps;
        let mut contexts = BTreeMap::new();
        for entry in file.contexts {
            if entry.ctx.is_empty() || entry.ctx.len() > config.order {
                return Err(Error::Invalid("context length outside 1..=order".into()));
            }
            let mut counts = vec![0; num_steps + 1];
            for (key, n) in entry.counts {
                let slot = if key == "END" {
                    num_steps
                } else {
                    key.parse::<usize>()
                        .ok()
                        .filter(|&i| i < num_steps)
                        .ok_or_else(|| Error::Invalid(format!("bad transition key {key}")))?
                };
                counts[slot] += n;
            }
            let total = counts.iter().sum();
            contexts.insert(entry.ctx, ContextCounts { counts, total });
        }
        Ok(PathModel {
            num_steps,
            config,
            contexts,
        })
    }
}

impl StepPredictor for PathModel {
    fn num_steps(&self) -> usize {
        self.num_steps
    }

    fn next_step_distribution(&self, prefix: &[StepId]) -> Result<NextStepDistribution> {
        if let Some(&bad) = prefix.iter().find(|id| id.index() >= self.num_steps) {
            return Err(Error::UnknownStep(bad));
        }
        let lambda = self.config.smoothing_lambda;
        let seen = (1..=self.config.order).rev().find_map(|len| {
            self.contexts
                .get(&context(prefix, len))
                .filter(|c| c.total > 0)
        });
        let probs = match seen {
            Some(c) => {
                let denom = c.total as f64 + lambda * (self.num_steps + 1) as f64;
                c.counts
                    .iter()
                    .map(|&n| (n as f64 + lambda) / denom)
                    .collect()
            }
            None => vec![1.0 / (self.num_steps + 1) as f64; self.num_steps + 1],
        };
        Ok(NextStepDistribution { probs })
    }
}

#[derive(Serialize, Deserialize)]
struct ContextEntry {
    ctx: Vec<Symbol>,
    counts: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    order: usize,
    lambda: f64,
    num_steps: usize,
    contexts: Vec<ContextEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: StepId = StepId(0);
    const B: StepId = StepId(1);
    const C: StepId = StepId(2);

    fn cfg(order: usize, lambda: f64) -> PathModelConfig {
        PathModelConfig {
            order,
            smoothing_lambda: lambda,
        }
    }

    #[test]
    fn deterministic_corpus_gives_certain_transitions() {
        let paths = vec![vec![A, B, C]; 5];
        let m = PathModel::train(&paths, 3, &cfg(2, 1e-12)).unwrap();
        let d = m.next_step_distribution(&[A]).unwrap();
        assert!((d.prob(Next::Step(B)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn branching_splits_mass_evenly() {
        let m = PathModel::train(&[vec![A, B], vec![A, C]], 3, &cfg(2, 1e-12)).unwrap();
        let d = m.next_step_distribution(&[A]).unwrap();
        assert!((d.prob(Next::Step(B)) - 0.5).abs() < 1e-9);
        assert!((d.prob(Next::Step(C)) - 0.5).abs() < 1e-9);
        let first = m.next_step_distribution(&[]).unwrap();
        assert!((first.prob(Next::Step(A)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn laplace_arithmetic() {
        let m = PathModel::train(&[vec![A, B]], 3, &cfg(1, 0.1)).unwrap();
        let d = m.next_step_distribution(&[A]).unwrap();
        let expected = 0.1 / (1.0 + 0.1 * 4.0);
        assert!((d.prob(Next::Step(C)) - expected).abs() < 1e-15);
        assert!((expected - 0.0714).abs() < 1e-4);

        // NLL([A, C]) contains the -ln(0.0714...) transition term.
        let nll = m.sequence_nll(&[A, C]).unwrap();
        let p_start_a: f64 = 1.1 / 1.4;
        let p_c_end: f64 = 1.0 / 4.0; // context [C] unseen at order 1: uniform
        let by_hand = -(p_start_a.ln() + expected.ln() + p_c_end.ln());
        assert!((nll - by_hand).abs() < 1e-12);
        assert!((-expected.ln() - 2.639).abs() < 1e-3);
    }

    #[test]
    fn single_sequence_nll_is_zero() {
        let m = PathModel::train(&[vec![A, B, C]], 3, &cfg(2, 1e-300)).unwrap();
        assert_eq!(m.sequence_nll(&[A, B, C]).unwrap(), 0.0);
    }

    #[test]
    fn order_two_backs_off_to_order_one() {
        let m = PathModel::train(&[vec![A, B, C], vec![C, B, A]], 3, &cfg(2, 1e-12)).unwrap();
        // Context (B) alone was followed by C once and A once.
        let backoff = m.next_step_distribution(&[B]).unwrap();
        assert!((backoff.prob(Next::Step(C)) - 0.5).abs() < 1e-9);
        let full = m.next_step_distribution(&[A, B]).unwrap();
        assert!((full.prob(Next::Step(C)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let empty: Vec<Vec<StepId>> = vec![];
        assert!(matches!(
            PathModel::train(&empty, 3, &cfg(2, 0.1)),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            PathModel::train(&[vec![StepId(5)]], 3, &cfg(2, 0.1)),
            Err(Error::UnknownStep(StepId(5)))
        ));
        let m = PathModel::train(&[vec![A]], 3, &cfg(2, 0.1)).unwrap();
        assert!(matches!(
            m.next_step_distribution(&[StepId(3)]),
            Err(Error::UnknownStep(_))
        ));
        assert!(matches!(
            m.sequence_nll(&[StepId(9)]),
            Err(Error::UnknownStep(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let m = PathModel::train(&[vec![A, B], vec![B, C, A]], 3, &cfg(2, 0.1)).unwrap();
        let text = m.to_json();
        assert!(text.contains("\"START\""));
        assert!(text.contains("\"END\""));
        assert_eq!(PathModel::from_json(&text).unwrap(), m);
    }

    #[test]
    fn sampling_is_seeded() {
        let m = PathModel::train(&[vec![A, B], vec![B, C, A]], 3, &cfg(2, 0.1)).unwrap();
        let a = m.sample_path(&mut ChaCha8Rng::seed_from_u64(3), 10);
        let b = m.sample_path(&mut ChaCha8Rng::seed_from_u64(3), 10);
        assert_eq!(a, b);
        assert!(a.len() <= 10);
    }

    fn corpus() -> impl Strategy<Value = (usize, Vec<Vec<StepId>>)> {
        (1usize..7).prop_flat_map(|n| {
            let path = proptest::collection::vec((0..n).prop_map(StepId::from), 0..6);
            (Just(n), proptest::collection::vec(path, 1..8))
        })
    }

    proptest! {
        #[test]
        fn distributions_sum_to_one((n, paths) in corpus(), order in 1usize..4, lambda in 1e-6f64..2.0, prefix_seed in 0usize..1000) {
            let m = PathModel::train(&paths, n, &cfg(order, lambda)).unwrap();
            let prefix: Vec<StepId> = (0..prefix_seed % 4).map(|i| StepId::from((prefix_seed + i) % n)).collect();
            let d = m.next_step_distribution(&prefix).unwrap();
            let total: f64 = d.iter().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn training_is_order_independent((n, mut paths) in corpus(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let a = PathModel::train(&paths, n, &cfg(2, 0.1)).unwrap();
            paths.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = PathModel::train(&paths, n, &cfg(2, 0.1)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn nll_is_additive_over_transitions((n, paths) in corpus()) {
            let m = PathModel::train(&paths, n, &cfg(2, 0.1)).unwrap();
            let path = &paths[0];
            let mut manual = 0.0;
            for i in 0..=path.len() {
                let d = m.next_step_distribution(&path[..i]).unwrap();
                let next = path.get(i).map_or(Next::End, |&s| Next::Step(s));
                manual += -d.prob(next).ln();
            }
            prop_assert!((m.sequence_nll(path).unwrap() - manual).abs() < 1e-9);
        }

        #[test]
        fn tiny_lambda_reproduces_frequencies((n, paths) in corpus()) {
            let m = PathModel::train(&paths, n, &cfg(1, 1e-12)).unwrap();
            let mut counts = vec![0u64; n + 1];
            for p in &paths {
                counts[p.first().map_or(n, |s| s.index())] += 1;
            }
            let d = m.next_step_distribution(&[]).unwrap();
            for (i, &c) in counts.iter().enumerate() {
                let next = if i == n { Next::End } else { Next::Step(StepId::from(i)) };
                prop_assert!((d.prob(next) - c as f64 / paths.len() as f64).abs() < 1e-9);
            }
        }
    }
}
