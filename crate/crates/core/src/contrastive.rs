//! Negative path generation, the curriculum over generation methods, and
//! the path-level contrastive / cross-entropy / total losses.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{StepId, StepLibrary};
use crate::error::{Error, Result};
use crate::grounding::SimilarityProvider;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegativeGenConfig {
    pub num_negatives: usize,
    pub max_shuffle_attempts: usize,
    pub rng_seed: u64,
}

impl Default for NegativeGenConfig {
    fn default() -> Self {
        NegativeGenConfig {
            num_negatives: 3,
            max_shuffle_attempts: 100,
            rng_seed: 0,
        }
    }
}

impl NegativeGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_negatives == 0 {
            return Err(Error::BadConfig("num_negatives must be at least 1".into()));
        }
        if self.max_shuffle_attempts == 0 {
            return Err(Error::BadConfig(
                "max_shuffle_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            alpha: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::BadConfig("temperature must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::BadConfig("alpha must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeMethod {
    /// Same-length draw without replacement from the whole library.
    Resample,
    /// Permutation of the positive's steps.
    Shuffle,
    /// Rotation at a cut point: the latter part moves to the front.
    Cutswap,
}

fn rejected(candidate: &[StepId], positive: &[StepId], valid_set: &HashSet<Vec<StepId>>) -> bool {
    candidate == positive || valid_set.contains(candidate)
}

/// Builds one negative path. The result never equals `positive` and never
/// belongs to `valid_set`.
pub fn generate_negative<R: Rng + ?Sized>(
    positive: &[StepId],
    method: NegativeMethod,
    library: &StepLibrary,
    valid_set: &HashSet<Vec<StepId>>,
    cfg: &NegativeGenConfig,
    rng: &mut R,
) -> Result<Vec<StepId>> {
    if positive.is_empty() {
        return Err(Error::DegenerateInput("positive path is empty".into()));
    }
    if library.len() < 2 {
        return Err(Error::DegenerateInput(
            "library needs at least 2 steps".into(),
        ));
    }
    let n = positive.len();
    match method {
        NegativeMethod::Resample => {
            if n > library.len() {
                return Err(Error::DegenerateInput(format!(
                    "cannot draw {n} distinct steps from a library of {}",
                    library.len()
                )));
            }
            for _ in 0..cfg.max_shuffle_attempts {
                let draw: Vec<StepId> = index::sample(rng, library.len(), n)
                    .into_iter()
                    .map(StepId::from)
                    .collect();
                if !rejected(&draw, positive, valid_set) {
                    return Ok(draw);
                }
            }
            Err(Error::NoValidNegative {
                attempts: cfg.max_shuffle_attempts,
            })
        }
        NegativeMethod::Shuffle => {
            if n < 2 {
                return Err(Error::DegenerateInput(
                    "cannot shuffle a single step".into(),
                ));
            }
            let mut candidate = positive.to_vec();
            for _ in 0..cfg.max_shuffle_attempts {
                candidate.shuffle(rng);
                if !rejected(&candidate, positive, valid_set) {
                    return Ok(candidate);
                }
            }
            candidate = positive.iter().rev().copied().collect();
            if rejected(&candidate, positive, valid_set) {
                return Err(Error::NoValidNegative {
                    attempts: cfg.max_shuffle_attempts,
                });
            }
            Ok(candidate)
        }
        NegativeMethod::Cutswap => {
            if n < 2 {
                return Err(Error::DegenerateInput("cannot cut a single step".into()));
            }
            let first = rng.random_range(1..n);
            // Other cut points are tried in turn when the first lands in the valid set.
            for offset in 0..n - 1 {
                let cut = 1 + (first - 1 + offset) % (n - 1);
                let candidate = cut_and_swap(positive, cut);
                if !rejected(&candidate, positive, valid_set) {
                    return Ok(candidate);
                }
            }
            Err(Error::NoValidNegative { attempts: n - 1 })
        }
    }
}

/// `path[cut..] ++ path[..cut]`.
pub fn cut_and_swap(path: &[StepId], cut: usize) -> Vec<StepId> {
    let mut out = path[cut..].to_vec();
    out.extend_from_slice(&path[..cut]);
    out
}

/// Sampling probabilities over negative-generation methods for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodMix {
    pub resample: f64,
    pub shuffle: f64,
    pub cutswap: f64,
}

impl MethodMix {
    pub fn total(&self) -> f64 {
        self.resample + self.shuffle + self.cutswap
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NegativeMethod {
        let u: f64 = rng.random::<f64>() * self.total();
        if u < self.resample {
            NegativeMethod::Resample
        } else if u < self.resample + self.shuffle || self.cutswap == 0.0 {
            NegativeMethod::Shuffle
        } else {
            NegativeMethod::Cutswap
        }
    }
}

/// Every 5 epochs 0.2 of the mass moves from resample to shuffle; once
/// shuffle holds everything (epoch 25) it moves on to cutswap the same way.
pub fn curriculum_mixture(epoch: u32) -> MethodMix {
    let block = epoch / 5;
    if block <= 5 {
        MethodMix {
            resample: f64::from(5 - block) / 5.0,
            shuffle: f64::from(block) / 5.0,
            cutswap: 0.0,
        }
    } else {
        let moved = (block - 5).min(5);
        MethodMix {
            resample: 0.0,
            shuffle: f64::from(5 - moved) / 5.0,
            cutswap: f64::from(moved) / 5.0,
        }
    }
}

/// Draws `cfg.num_negatives` negatives, picking each one's method from the
/// epoch's curriculum mixture. A single-step positive always resamples.
pub fn generate_negatives<R: Rng + ?Sized>(
    positive: &[StepId],
    epoch: u32,
    library: &StepLibrary,
    valid_set: &HashSet<Vec<StepId>>,
    cfg: &NegativeGenConfig,
    rng: &mut R,
) -> Result<Vec<(NegativeMethod, Vec<StepId>)>> {
    let mix = curriculum_mixture(epoch);
    (0..cfg.num_negatives)
        .map(|_| {
            let mut method = mix.sample(rng);
            if positive.len() < 2 {
                method = NegativeMethod::Resample;
            }
            generate_negative(positive, method, library, valid_set, cfg, rng).map(|n| (method, n))
        })
        .collect()
}

/// Mean of the step embeddings of a path.
pub fn sequence_representation(
    step_ids: &[StepId],
    library: &StepLibrary,
    provider: &dyn SimilarityProvider,
) -> Result<Vec<f64>> {
    if step_ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let texts = step_ids
        .iter()
        .map(|&id| library.text(id).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    let vectors = provider.embed(&texts)?;
    let dim = vectors[0].len();
    let mut mean = vec![0.0; dim];
    for v in &vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Representations of a generated path, its positive, and the negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveBatch {
    pub z_g: Vec<f64>,
    pub z_p: Vec<f64>,
    pub z_n: Vec<Vec<f64>>,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        let dim = self.z_g.len();
        let all = std::iter::once(&self.z_g)
            .chain(std::iter::once(&self.z_p))
            .chain(&self.z_n);
        for v in all {
            if v.len() != dim {
                return Err(Error::Invalid(
                    "contrastive vectors differ in dimension".into(),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(
                    "contrastive vector has non-finite entries".into(),
                ));
            }
            if v.iter().all(|&x| x == 0.0) {
                return Err(Error::ZeroVector);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLosses {
    pub path_contrastive: f64,
    pub cross_entropy: f64,
    pub total: f64,
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// InfoNCE over {positive} ∪ negatives with cosine logits scaled by
/// 1/temperature, plus the sequence NLL: `total = nll + alpha * contrastive`.
pub fn path_level_losses(
    batch: &ContrastiveBatch,
    nll: f64,
    cfg: &LossConfig,
) -> Result<PathLosses> {
    batch.validate()?;
    cfg.validate()?;
    if nll.is_nan() || nll < 0.0 {
        return Err(Error::Invalid(format!(
            "nll must be non-negative, got {nll}"
        )));
    }
    let positive = cos(&batch.z_g, &batch.z_p) / cfg.temperature;
    let logits: Vec<f64> = std::iter::once(positive)
        .chain(
            batch
                .z_n
                .iter()
                .map(|z| cos(&batch.z_g, z) / cfg.temperature),
        )
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let path_contrastive = if max == positive {
        logits[1..]
            .iter()
            .map(|l| (l - positive).exp())
            .sum::<f64>()
            .ln_1p()
    } else {
        (max - positive) + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    };
    Ok(PathLosses {
        path_contrastive,
        cross_entropy: nll,
        total: nll + cfg.alpha * path_contrastive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[u32]) -> Vec<StepId> {
        v.iter().map(|&i| StepId(i)).collect()
    }

    fn lib(n: usize) -> StepLibrary {
        let texts: Vec<String> = (0..n).map(|i| format!("step number {i}")).collect();
        StepLibrary::from_normalized("t", &texts)
    }

    #[test]
    fn cutswap_moves_latter_part_to_front() {
        assert_eq!(cut_and_swap(&ids(&[1, 2, 3, 4]), 2), ids(&[3, 4, 1, 2]));
    }

    #[test]
    fn methods_keep_their_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NegativeGenConfig::default();
        let pos = ids(&[0, 1, 2]);
        let valid: HashSet<_> = [pos.clone()].into();
        let r = generate_negative(
            &pos,
            NegativeMethod::Resample,
            &lib(6),
            &valid,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.len(), 3);
        let mut s = generate_negative(
            &pos,
            NegativeMethod::Shuffle,
            &lib(6),
            &valid,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_ne!(s, pos);
        s.sort();
        assert_eq!(s, pos);
    }

    #[test]
    fn single_step_cannot_be_permuted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NegativeGenConfig::default();
        let none = HashSet::new();
        for m in [NegativeMethod::Shuffle, NegativeMethod::Cutswap] {
            assert!(matches!(
                generate_negative(&ids(&[0]), m, &lib(3), &none, &cfg, &mut rng),
                Err(Error::DegenerateInput(_))
            ));
        }
    }

    #[test]
    fn shuffle_falls_back_to_reversal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NegativeGenConfig {
            max_shuffle_attempts: 1,
            ..Default::default()
        };
        let pos = ids(&[0, 1]);
        let out = generate_negative(
            &pos,
            NegativeMethod::Shuffle,
            &lib(3),
            &HashSet::new(),
            &cfg,
            &mut rng,
        );
        assert_eq!(out.unwrap(), ids(&[1, 0]));
        let valid: HashSet<_> = [ids(&[1, 0])].into();
        assert!(matches!(
            generate_negative(
                &pos,
                NegativeMethod::Shuffle,
                &lib(3),
                &valid,
                &cfg,
                &mut rng
            ),
            Err(Error::NoValidNegative { .. })
        ));
    }

    #[test]
    fn curriculum_schedule_points() {
        let m = |r, s, c| MethodMix {
            resample: r,
            shuffle: s,
            cutswap: c,
        };
        assert_eq!(curriculum_mixture(0), m(1.0, 0.0, 0.0));
        assert_eq!(curriculum_mixture(4), m(1.0, 0.0, 0.0));
        assert_eq!(curriculum_mixture(5), m(0.8, 0.2, 0.0));
        assert_eq!(curriculum_mixture(25), m(0.0, 1.0, 0.0));
        assert_eq!(curriculum_mixture(30), m(0.0, 0.8, 0.2));
        assert_eq!(curriculum_mixture(50), m(0.0, 0.0, 1.0));
        assert_eq!(curriculum_mixture(500), m(0.0, 0.0, 1.0));
    }

    #[test]
    fn mixture_draws_follow_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            assert_eq!(
                curriculum_mixture(0).sample(&mut rng),
                NegativeMethod::Resample
            );
            assert_ne!(
                curriculum_mixture(30).sample(&mut rng),
                NegativeMethod::Resample
            );
        }
    }

    #[test]
    fn representation_is_mean_embedding() {
        struct Fixed;
        impl SimilarityProvider for Fixed {
            fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
                Ok(texts
                    .iter()
                    .map(|t| {
                        if t.ends_with('0') {
                            vec![1.0, 0.0]
                        } else {
                            vec![0.0, 3.0]
                        }
                    })
                    .collect())
            }
        }
        let l = lib(2);
        assert_eq!(
            sequence_representation(&ids(&[0, 1]), &l, &Fixed).unwrap(),
            [0.5, 1.5]
        );
        assert_eq!(
            sequence_representation(&ids(&[1]), &l, &Fixed).unwrap(),
            [0.0, 3.0]
        );
        assert!(matches!(
            sequence_representation(&[], &l, &Fixed),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn loss_examples() {
        let cfg = LossConfig::default();
        let batch = ContrastiveBatch {
            z_g: vec![1.0, 0.0],
            z_p: vec![1.0, 0.0],
            z_n: vec![vec![0.0, 1.0]],
        };
        let l = path_level_losses(&batch, 2.0, &cfg).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((l.path_contrastive - expected).abs() < 1e-15);
        assert!((l.path_contrastive - 4.54e-5).abs() < 1e-7);
        assert_eq!(l.total, 2.0 + l.path_contrastive);

        let alone = ContrastiveBatch {
            z_n: vec![],
            ..batch.clone()
        };
        assert_eq!(
            path_level_losses(&alone, 1.0, &cfg)
                .unwrap()
                .path_contrastive,
            0.0
        );

        let no_alpha = LossConfig {
            alpha: 0.0,
            ..cfg.clone()
        };
        assert_eq!(
            path_level_losses(&batch, 3.5, &no_alpha).unwrap().total,
            3.5
        );

        let zero = ContrastiveBatch {
            z_n: vec![vec![0.0, 0.0]],
            ..batch
        };
        assert!(matches!(
            path_level_losses(&zero, 1.0, &cfg),
            Err(Error::ZeroVector)
        ));
    }

    fn vec2() -> impl Strategy<Value = Vec<f64>> {
        (-1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-zero", |(a, b)| a.abs() + b.abs() > 1e-3)
            .prop_map(|(a, b)| vec![a, b])
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative_and_rotation_invariant(
            g in vec2(), p in vec2(), n in proptest::collection::vec(vec2(), 0..5), theta in 0.0f64..6.3,
        ) {
            let cfg = LossConfig::default();
            let batch = ContrastiveBatch { z_g: g, z_p: p, z_n: n };
            let l = path_level_losses(&batch, 0.0, &cfg).unwrap().path_contrastive;
            prop_assert!(l >= 0.0);
            let rot = |v: &Vec<f64>| vec![v[0] * theta.cos() - v[1] * theta.sin(), v[0] * theta.sin() + v[1] * theta.cos()];
            let rotated = ContrastiveBatch {
                z_g: rot(&batch.z_g),
                z_p: rot(&batch.z_p),
                z_n: batch.z_n.iter().map(rot).collect(),
            };
            let lr = path_level_losses(&rotated, 0.0, &cfg).unwrap().path_contrastive;
            prop_assert!((l - lr).abs() < 1e-9);
        }

        #[test]
        fn loss_drops_as_positive_aligns(n in proptest::collection::vec(vec2(), 1..5), a in 0.0f64..3.0, b in 0.0f64..3.0) {
            prop_assume!((a - b).abs() > 1e-3);
            let (near, far) = (a.min(b), a.max(b));
            let cfg = LossConfig::default();
            let at = |angle: f64| ContrastiveBatch { z_g: vec![1.0, 0.0], z_p: vec![angle.cos(), angle.sin()], z_n: n.clone() };
            let l_near = path_level_losses(&at(near), 0.0, &cfg).unwrap().path_contrastive;
            let l_far = path_level_losses(&at(far), 0.0, &cfg).unwrap().path_contrastive;
            prop_assert!(l_near < l_far);
        }

        #[test]
        fn cutswap_keeps_halves_in_order(len in 2usize..10, seed in any::<u64>()) {
            let pos: Vec<StepId> = (0..len).map(StepId::from).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = generate_negative(&pos, NegativeMethod::Cutswap, &lib(12), &HashSet::new(), &NegativeGenConfig::default(), &mut rng).unwrap();
            let cut = len - out.iter().position(|&s| s == StepId(0)).unwrap();
            prop_assert_eq!(out, cut_and_swap(&pos, cut));
        }
    }
}
