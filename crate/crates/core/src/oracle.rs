//! Groundtruth toxicity scorer and the paired detoxification reward.
//!
//! `tox_score` is the fraction of completion tokens drawn from the toxic
//! lexicon; the training reward for a generation against its corpus original
//! is `tox_score(original) - tox_score(generated)`, positive when the
//! generation is the less toxic of the two.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::world::{Sequence, Token};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OracleConfig {
    pub toxic_lexicon: BTreeSet<Token>,
    pub classify_threshold: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            toxic_lexicon: [9, 10, 11].into_iter().collect(),
            classify_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToxicityOracle {
    config: OracleConfig,
}

impl ToxicityOracle {
    pub fn new(config: OracleConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    /// Toxicity in [0,1]: lexicon share of the completion; 0 when empty.
    pub fn tox_score(&self, seq: &Sequence) -> f64 {
        let completion = seq.completion();
        if completion.is_empty() {
            return 0.0;
        }
        let toxic = completion
            .iter()
            .filter(|t| self.config.toxic_lexicon.contains(t))
            .count();
        toxic as f64 / completion.len() as f64
    }

    /// Reward for `generated` against `original`; positive when the
    /// generation is less toxic.
    pub fn pairwise_reward(&self, generated: &Sequence, original: &Sequence) -> f64 {
        self.tox_score(original) - self.tox_score(generated)
    }

    /// Inclusive threshold: a score exactly at the boundary counts as toxic.
    pub fn classify_toxic(&self, seq: &Sequence) -> bool {
        self.tox_score(seq) >= self.config.classify_threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle() -> ToxicityOracle {
        ToxicityOracle::new(OracleConfig::default())
    }

    #[test]
    fn score_is_lexicon_fraction() {
        let seq = Sequence::completion_only(vec![9, 10, 0, 1, 2, 3]);
        let s = oracle().tox_score(&seq);
        assert!((s - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn empty_completion_scores_zero() {
        assert_eq!(oracle().tox_score(&Sequence::prompt_only(vec![9, 9])), 0.0);
    }

    #[test]
    fn all_toxic_scores_one() {
        assert_eq!(oracle().tox_score(&Sequence::completion_only(vec![9, 9, 9])), 1.0);
    }

    #[test]
    fn pairwise_reward_examples() {
        let o = oracle();
        // tox 0.6 vs tox 0.2 over five tokens
        let orig = Sequence::completion_only(vec![9, 9, 9, 0, 1]);
        let gen = Sequence::completion_only(vec![9, 0, 1, 2, 3]);
        assert!((o.pairwise_reward(&gen, &orig) - 0.4).abs() < 1e-15);
        assert_eq!(o.pairwise_reward(&orig, &orig), 0.0);

        let all_toxic = Sequence::completion_only(vec![9, 10, 11]);
        let clean = Sequence::completion_only(vec![0, 1, 2]);
        assert_eq!(o.pairwise_reward(&all_toxic, &clean), -1.0);
    }

    #[test]
    fn classification_boundary_is_inclusive() {
        let o = oracle();
        assert!(o.classify_toxic(&Sequence::completion_only(vec![9, 0]))); // exactly 0.5
        assert!(!o.classify_toxic(&Sequence::completion_only(vec![0, 1])));
        assert!(o.classify_toxic(&Sequence::completion_only(vec![9])));
    }

    proptest! {
        #[test]
        fn pairwise_reward_is_antisymmetric(
            a in proptest::collection::vec(0u32..12, 1..16),
            b in proptest::collection::vec(0u32..12, 1..16),
        ) {
            let o = oracle();
            let sa = Sequence::completion_only(a);
            let sb = Sequence::completion_only(b);
            prop_assert_eq!(o.pairwise_reward(&sa, &sb), -o.pairwise_reward(&sb, &sa));
        }

        #[test]
        fn tox_score_is_permutation_invariant(
            tokens in proptest::collection::vec(0u32..12, 1..16),
            rotation in 0usize..16,
        ) {
            let o = oracle();
            let mut rotated = tokens.clone();
            rotated.rotate_left(rotation % tokens.len());
            prop_assert_eq!(
                o.tox_score(&Sequence::completion_only(tokens)),
                o.tox_score(&Sequence::completion_only(rotated))
            );
        }

        #[test]
        fn self_reward_is_zero(tokens in proptest::collection::vec(0u32..12, 0..16)) {
            let o = oracle();
            let s = Sequence::completion_only(tokens);
            prop_assert_eq!(o.pairwise_reward(&s, &s), 0.0);
        }
    }
}
