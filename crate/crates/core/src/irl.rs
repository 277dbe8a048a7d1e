//! Reward recovery from observed policy behavior.
//!
//! Two strategies. Strategy A is the feature-expectation max-margin loop:
//! solve `max_w min_π wᵀ(μ_E − μ(π))` over the unit ball, fine-tune a fresh
//! policy against the candidate reward, and stop once the newest policy's
//! weighted feature expectations come within ε of the expert's. Strategy B is
//! the paired-sample extraction actually used experimentally: stochastic
//! gradient descent on an asymmetric margin loss over (preferred, rejected)
//! completion pairs, with a 2:1 penalty on ranking the rejected output higher.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{GenerationConfig, PolicyParams};
use crate::ppo::{train_rlhf, PpoConfig, RolloutPrompt, SequenceScorer};
use crate::world::{extract_features, FeatureSpec, FeatureVector, Sequence, WorldConfig};
use crate::{exec, seeding};

/// Linear reward weights over the feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w: Vec<f64>,
}

impl RewardWeights {
    pub fn zeros(dim: usize) -> Self {
        Self { w: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn norm(&self) -> f64 {
        self.w.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Discounted feature expectations μ(π) plus how they were estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExpectations {
    pub mu: FeatureVector,
    pub n_trajectories: usize,
    pub gamma: f64,
}

/// Growing set of competitor policies, each summarized by its μ.
#[derive(Debug, Clone, Default)]
pub struct PolicySet {
    entries: Vec<(String, FeatureExpectations)>,
}

impl PolicySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, mu: FeatureExpectations) {
        self.entries.push((id.into(), mu));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, FeatureExpectations)> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlConfig {
    /// Convergence threshold on the termination gap.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// PPO budget for each inner fine-tune (strategy A).
    pub inner_rl_steps: usize,
    pub lr: f64,
    /// Passes over the pair set (strategy B).
    pub epochs: usize,
    pub seed: u64,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iterations: 20,
            inner_rl_steps: 200,
            lr: 3e-4,
            epochs: 30,
            seed: 0,
        }
    }
}

/// μ(π): Monte-Carlo average over sampled trajectories of Σ_t γ^t φ(s_t),
/// where s_t is the prefix after t completion tokens (t = 0 is the prompt-only
/// prefix and contributes the zero vector). Temperature 0 collapses sampling,
/// making μ independent of `n_samples` and `seed`.
#[allow(clippy::too_many_arguments)]
pub fn feature_expectations(
    policy: &PolicyParams,
    prompts: &[Sequence],
    n_samples: usize,
    temperature: f64,
    gamma: f64,
    spec: &FeatureSpec,
    world: &WorldConfig,
    seed: u64,
) -> Result<FeatureExpectations> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    if prompts.is_empty() {
        return Err(Error::Config("prompts must be nonempty".into()));
    }
    let mut work = Vec::with_capacity(prompts.len() * n_samples);
    for (i, prompt) in prompts.iter().enumerate() {
        for s in 0..n_samples {
            work.push((prompt, seeding::derive(seed, "mu-sample", (i * n_samples + s) as u64)));
        }
    }
    let sums = exec::map_collect(&work, |(prompt, sample_seed)| -> Result<FeatureVector> {
        let cfg = GenerationConfig {
            temperature,
            max_new_tokens: world.max_len - prompt.len(),
            seed: *sample_seed,
        };
        let seq = policy.generate(prompt, &cfg, world)?;
        discounted_prefix_features(&seq, gamma, spec, world)
    });
    let dim = spec.dim(world);
    let mut mu = vec![0.0; dim];
    let mut n = 0usize;
    for s in sums {
        let s = s?;
        for (m, x) in mu.iter_mut().zip(&s) {
            *m += x;
        }
        n += 1;
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    Ok(FeatureExpectations { mu, n_trajectories: n, gamma })
}

/// Σ_t γ^t φ(s_t) over the prefixes of one sequence.
pub fn discounted_prefix_features(
    seq: &Sequence,
    gamma: f64,
    spec: &FeatureSpec,
    world: &WorldConfig,
) -> Result<FeatureVector> {
    let mut acc = vec![0.0; spec.dim(world)];
    let mut discount = 1.0;
    for t in 0..=seq.completion().len() {
        let phi = extract_features(&seq.prefix(t), spec, world)?;
        for (a, x) in acc.iter_mut().zip(&phi) {
            *a += discount * x;
        }
        discount *= gamma;
    }
    Ok(acc)
}

/// Outcome of the max-margin solve: weights on the unit ball and the margin
/// they achieve against the worst competitor.
#[derive(Debug, Clone)]
pub struct MaxMarginSolution {
    pub weights: RewardWeights,
    pub margin: f64,
    /// Set when every competitor matches the expert exactly; the solver then
    /// returns the zero vector instead of an arbitrary unit direction.
    pub degenerate: bool,
}

const MAX_MARGIN_ITERS: usize = 2000;

/// Solves `max_{‖w‖≤1} min_π wᵀ(μ_E − μ(π))` by projected subgradient ascent
/// with step 1/√iter.
pub fn max_margin_weights(
    mu_expert: &FeatureExpectations,
    policy_set: &PolicySet,
) -> Result<MaxMarginSolution> {
    if policy_set.is_empty() {
        return Err(Error::Config("policy set must be nonempty".into()));
    }
    let dim = mu_expert.mu.len();
    let mut diffs: Vec<FeatureVector> = Vec::with_capacity(policy_set.len());
    for (_, mu) in policy_set.iter() {
        if mu.mu.len() != dim {
            return Err(Error::Shape(format!(
                "feature dimension mismatch: {} vs {}",
                mu.mu.len(),
                dim
            )));
        }
        diffs.push(
            mu_expert
                .mu
                .iter()
                .zip(&mu.mu)
                .map(|(e, p)| e - p)
                .collect(),
        );
    }
    if diffs.iter().all(|d| d.iter().all(|&x| x == 0.0)) {
        return Ok(MaxMarginSolution {
            weights: RewardWeights::zeros(dim),
            margin: 0.0,
            degenerate: true,
        });
    }

    let worst = |w: &[f64]| -> (usize, f64) {
        let mut best_idx = 0;
        let mut best_val = f64::INFINITY;
        for (i, d) in diffs.iter().enumerate() {
            let v = dot(w, d);
            if v < best_val {
                best_val = v;
                best_idx = i;
            }
        }
        (best_idx, best_val)
    };

    let mut w = vec![0.0; dim];
    let mut best_w = w.clone();
    let mut best_margin = f64::NEG_INFINITY;
    for iter in 1..=MAX_MARGIN_ITERS {
        let (idx, margin) = worst(&w);
        if margin > best_margin {
            best_margin = margin;
            best_w = w.clone();
        }
        let step = 1.0 / (iter as f64).sqrt();
        for (wi, di) in w.iter_mut().zip(&diffs[idx]) {
            *wi += step * di;
        }
        let norm = dot(&w, &w).sqrt();
        if norm > 1.0 {
            for wi in &mut w {
                *wi /= norm;
            }
        }
    }
    let (_, final_margin) = worst(&w);
    if final_margin > best_margin {
        best_margin = final_margin;
        best_w = w;
    }
    Ok(MaxMarginSolution {
        weights: RewardWeights { w: best_w },
        margin: best_margin,
        degenerate: false,
    })
}

/// Per-iteration record of the max-margin loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub margin: f64,
    /// μ_E·w_t − μ_t·w_t for the policy trained this iteration.
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct Algorithm1Result {
    pub weights: RewardWeights,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
    /// The policy fine-tuned under the final weights.
    pub final_policy: PolicyParams,
}

/// Scores a sequence by the discounted prefix sum of the linear reward,
/// normalized by the number of prefixes so magnitudes stay O(1) for PPO.
pub struct LinearTrajectoryScorer<'a> {
    pub weights: &'a RewardWeights,
    pub spec: &'a FeatureSpec,
    pub world: &'a WorldConfig,
    pub gamma: f64,
}

impl SequenceScorer for LinearTrajectoryScorer<'_> {
    fn score(&self, generated: &Sequence, _original: Option<&Sequence>) -> Result<f64> {
        let sum = discounted_prefix_features(generated, self.gamma, self.spec, self.world)?;
        let horizon = (generated.completion().len() + 1) as f64;
        Ok(dot(&self.weights.w, &sum) / horizon)
    }
}

/// Scores a sequence by the linear reward of its final state, the way an
/// extracted reward model is applied to whole outputs.
pub struct LinearFinalScorer<'a> {
    pub weights: &'a RewardWeights,
    pub spec: &'a FeatureSpec,
    pub world: &'a WorldConfig,
}

impl SequenceScorer for LinearFinalScorer<'_> {
    fn score(&self, generated: &Sequence, _original: Option<&Sequence>) -> Result<f64> {
        reward_of(generated, self.weights, self.spec, self.world)
    }
}

/// The feature-expectation max-margin loop (strategy A).
///
/// Initializes the competitor set with the base policy, then alternates the
/// max-margin solve with a fresh PPO fine-tune against the candidate reward
/// until the newest policy's weighted feature expectations come within
/// ε of the expert's, or `max_iterations` is exhausted.
pub fn run_algorithm1(
    expert: &PolicyParams,
    base: &PolicyParams,
    prompts: &[Sequence],
    world: &WorldConfig,
    spec: &FeatureSpec,
    cfg: &IrlConfig,
) -> Result<Algorithm1Result> {
    let mu_of = |policy: &PolicyParams, tag: &str, idx: u64| {
        feature_expectations(
            policy,
            prompts,
            1,
            0.0,
            world.gamma,
            spec,
            world,
            seeding::derive(cfg.seed, tag, idx),
        )
    };
    let mu_expert = mu_of(expert, "mu-expert", 0)?;
    let mut policies = PolicySet::new();
    policies.push("base", mu_of(base, "mu-base", 0)?);

    let rollout_prompts: Vec<RolloutPrompt> = prompts
        .iter()
        .map(|p| RolloutPrompt { prompt: p.clone(), original: None })
        .collect();

    let mut trace = Vec::new();
    let mut weights = RewardWeights::zeros(spec.dim(world));
    let mut final_policy = base.clone();
    let mut converged = false;
    for iteration in 1..=cfg.max_iterations {
        let solution = max_margin_weights(&mu_expert, &policies)?;
        weights = solution.weights;

        let ppo_cfg = PpoConfig {
            lr: cfg.lr,
            beta_kl: 0.01,
            total_steps: cfg.inner_rl_steps,
            seed: seeding::derive(cfg.seed, "inner-rl", iteration as u64),
            gamma: world.gamma,
            ..PpoConfig::default()
        };
        let scorer = LinearTrajectoryScorer { weights: &weights, spec, world, gamma: world.gamma };
        let (candidate, _) = train_rlhf(base, base, &scorer, &rollout_prompts, world, &ppo_cfg)
            .map_err(|e| Error::Stage { stage: "algorithm1-inner-rl", source: Box::new(e) })?;
        let mu_t = mu_of(&candidate, "mu-candidate", iteration as u64)?;

        let gap = dot(&weights.w, &mu_expert.mu) - dot(&weights.w, &mu_t.mu);
        trace.push(IterationRecord { iteration, margin: solution.margin, gap });
        final_policy = candidate;
        if gap <= cfg.epsilon {
            converged = true;
            break;
        }
        policies.push(format!("iter-{iteration}"), mu_t);
    }
    Ok(Algorithm1Result { weights, converged, trace, final_policy })
}

/// Asymmetric margin loss on the reward difference x between preferred and
/// rejected outputs: −x for x>0, −2x for x<0, 0 at x=0 (zero subgradient).
pub fn asymmetric_margin_loss(x: f64) -> f64 {
    if x > 0.0 {
        -x
    } else if x < 0.0 {
        -2.0 * x
    } else {
        0.0
    }
}

/// dL/dx for the asymmetric margin loss; 0 at the kink.
fn asymmetric_margin_slope(x: f64) -> f64 {
    if x > 0.0 {
        -1.0
    } else if x < 0.0 {
        -2.0
    } else {
        0.0
    }
}

/// A (prompt, preferred, rejected) triplet; both completions extend the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub prompt: Sequence,
    pub preferred: Sequence,
    pub rejected: Sequence,
}

impl PairedSample {
    pub fn new(prompt: Sequence, preferred: Sequence, rejected: Sequence) -> Result<Self> {
        for seq in [&preferred, &rejected] {
            if !seq.tokens.starts_with(prompt.prompt()) && !seq.tokens.starts_with(&prompt.tokens) {
                return Err(Error::InvalidSequence(
                    "paired completions must extend the shared prompt".into(),
                ));
            }
        }
        Ok(Self { prompt, preferred, rejected })
    }
}

/// Feature difference φ(preferred) − φ(rejected) for each pair.
fn pair_diffs(pairs: &[PairedSample], spec: &FeatureSpec, world: &WorldConfig) -> Result<Vec<FeatureVector>> {
    let diffs = exec::map_collect(pairs, |pair| -> Result<FeatureVector> {
        let fw = extract_features(&pair.preferred, spec, world)?;
        let fl = extract_features(&pair.rejected, spec, world)?;
        Ok(fw.iter().zip(&fl).map(|(a, b)| a - b).collect())
    });
    diffs.into_iter().collect()
}

/// Mean asymmetric loss over pairs at fixed weights.
pub fn epoch_loss(w: &[f64], diffs: &[FeatureVector]) -> f64 {
    diffs.iter().map(|d| asymmetric_margin_loss(dot(w, d))).sum::<f64>() / diffs.len() as f64
}

/// Gradient of `epoch_loss` at fixed weights.
pub fn epoch_gradient(w: &[f64], diffs: &[FeatureVector]) -> FeatureVector {
    let mut grad = vec![0.0; w.len()];
    for d in diffs {
        let slope = asymmetric_margin_slope(dot(w, d));
        for (g, x) in grad.iter_mut().zip(d) {
            *g += slope * x;
        }
    }
    for g in &mut grad {
        *g /= diffs.len() as f64;
    }
    grad
}

/// Per-epoch extraction metrics. Accuracy counts x > 0 as correct; ties count
/// as incorrect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub weight_norm: f64,
}

/// Incremental strategy-B extractor: per-pair SGD on the asymmetric margin
/// loss over a seeded shuffle each epoch.
pub struct PairwiseExtractor {
    weights: RewardWeights,
    diffs: Vec<FeatureVector>,
    lr: f64,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl PairwiseExtractor {
    pub fn new(
        pairs: &[PairedSample],
        spec: &FeatureSpec,
        world: &WorldConfig,
        cfg: &IrlConfig,
        initial: RewardWeights,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("pairs must be nonempty".into()));
        }
        let dim = spec.dim(world);
        if dim == 0 {
            return Err(Error::Config("feature spec has zero dimension".into()));
        }
        if initial.dim() != dim {
            return Err(Error::Shape(format!(
                "initial weights have dimension {}, features {}",
                initial.dim(),
                dim
            )));
        }
        Ok(Self {
            weights: initial,
            diffs: pair_diffs(pairs, spec, world)?,
            lr: cfg.lr,
            rng: ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "pair-shuffle", 0)),
            epoch: 0,
        })
    }

    /// Random initialization in U(−0.1, 0.1)^dim. Zero weights are a fixed
    /// point of the loss (every pair sits at the kink), so extraction must
    /// start off-origin.
    pub fn random_init(dim: usize, seed: u64) -> RewardWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "pair-init", 0));
        RewardWeights { w: (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect() }
    }

    pub fn weights(&self) -> &RewardWeights {
        &self.weights
    }

    /// One shuffled SGD pass; returns the post-epoch metrics.
    pub fn run_epoch(&mut self) -> EpochMetric {
        self.epoch += 1;
        let mut order: Vec<usize> = (0..self.diffs.len()).collect();
        order.shuffle(&mut self.rng);
        for idx in order {
            let d = &self.diffs[idx];
            let slope = asymmetric_margin_slope(dot(&self.weights.w, d));
            if slope == 0.0 {
                continue;
            }
            for (wi, xi) in self.weights.w.iter_mut().zip(d) {
                *wi -= self.lr * slope * xi;
            }
        }
        let correct = self
            .diffs
            .iter()
            .filter(|d| dot(&self.weights.w, d) > 0.0)
            .count();
        EpochMetric {
            epoch: self.epoch,
            accuracy: correct as f64 / self.diffs.len() as f64,
            mean_loss: epoch_loss(&self.weights.w, &self.diffs),
            weight_norm: self.weights.norm(),
        }
    }
}

/// Strategy B with explicit initial weights.
pub fn pairwise_extract_with_init(
    pairs: &[PairedSample],
    spec: &FeatureSpec,
    world: &WorldConfig,
    cfg: &IrlConfig,
    initial: RewardWeights,
) -> Result<(RewardWeights, Vec<EpochMetric>)> {
    let mut extractor = PairwiseExtractor::new(pairs, spec, world, cfg, initial)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        metrics.push(extractor.run_epoch());
    }
    Ok((extractor.weights.clone(), metrics))
}

/// Strategy B: seeded random init, `cfg.epochs` shuffled SGD passes.
pub fn pairwise_extract(
    pairs: &[PairedSample],
    spec: &FeatureSpec,
    world: &WorldConfig,
    cfg: &IrlConfig,
) -> Result<(RewardWeights, Vec<EpochMetric>)> {
    let init = PairwiseExtractor::random_init(spec.dim(world), cfg.seed);
    pairwise_extract_with_init(pairs, spec, world, cfg, init)
}

/// R(seq) = wᵀφ(seq).
pub fn reward_of(
    seq: &Sequence,
    weights: &RewardWeights,
    spec: &FeatureSpec,
    world: &WorldConfig,
) -> Result<f64> {
    let phi = extract_features(seq, spec, world)?;
    if phi.len() != weights.dim() {
        return Err(Error::Shape(format!(
            "weights dimension {} does not match features {}",
            weights.dim(),
            phi.len()
        )));
    }
    Ok(dot(&weights.w, &phi))
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    version: u32,
    feature_spec: FeatureSpec,
    dim: usize,
    weights: Vec<f64>,
    norm: f64,
    strategy: String,
    epochs: usize,
    seed: u64,
    final_accuracy: Option<f64>,
}

const WEIGHTS_VERSION: u32 = 1;

/// Extraction metadata persisted alongside the weights.
#[derive(Debug, Clone)]
pub struct WeightsMeta {
    pub strategy: String,
    pub epochs: usize,
    pub seed: u64,
    pub final_accuracy: Option<f64>,
}

pub fn write_weights(
    path: &Path,
    weights: &RewardWeights,
    spec: &FeatureSpec,
    meta: &WeightsMeta,
) -> Result<()> {
    let file = WeightsFile {
        version: WEIGHTS_VERSION,
        feature_spec: *spec,
        dim: weights.dim(),
        weights: weights.w.clone(),
        norm: weights.norm(),
        strategy: meta.strategy.clone(),
        epochs: meta.epochs,
        seed: meta.seed,
        final_accuracy: meta.final_accuracy,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", serde_json::to_string(&file).map_err(|e| Error::Parse(e.to_string()))?)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<(RewardWeights, FeatureSpec, WeightsMeta)> {
    let file = std::fs::File::open(path)?;
    let line = std::io::BufReader::new(file)
        .lines()
        .next()
        .ok_or_else(|| Error::Parse("empty weights file".into()))??;
    let parsed: WeightsFile =
        serde_json::from_str(&line).map_err(|e| Error::Parse(format!("weights file: {e}")))?;
    if parsed.version != WEIGHTS_VERSION {
        return Err(Error::Parse(format!("unsupported weights version {}", parsed.version)));
    }
    if parsed.weights.len() != parsed.dim {
        return Err(Error::Parse("weights file dimension mismatch".into()));
    }
    Ok((
        RewardWeights { w: parsed.weights },
        parsed.feature_spec,
        WeightsMeta {
            strategy: parsed.strategy,
            epochs: parsed.epochs,
            seed: parsed.seed,
            final_accuracy: parsed.final_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::constant_policy;
    use proptest::prelude::*;
    use rand::Rng;

    fn world() -> WorldConfig {
        WorldConfig::default()
    }

    fn unigram_spec() -> FeatureSpec {
        FeatureSpec { unigram: true, bigram: false, lexicon_fraction: false, normalize_by_length: false }
    }

    #[test]
    fn feature_expectations_match_hand_enumeration() {
        // deterministic policy emitting token 1; completion [1,1] over vocab 3
        let w = WorldConfig {
            vocab_size: 3,
            max_len: 4,
            prompt_len: 2,
            toxic_lexicon: [2].into_iter().collect(),
            ..world()
        };
        let policy = constant_policy(2, &w, 1);
        let prompts = vec![Sequence::prompt_only(vec![0, 0])];
        let mu = feature_expectations(&policy, &prompts, 1, 0.0, 1.0, &unigram_spec(), &w, 0).unwrap();
        // prefixes hold 0, 1, 2 copies of token 1
        assert_eq!(mu.mu, vec![0.0, 3.0, 0.0]);
    }

    #[test]
    fn gamma_zero_keeps_only_the_prompt_prefix() {
        let w = world();
        let policy = constant_policy(2, &w, 1);
        let prompts = vec![Sequence::prompt_only(vec![0, 0, 0, 0])];
        let mu = feature_expectations(&policy, &prompts, 1, 0.0, 0.0, &unigram_spec(), &w, 0).unwrap();
        assert_eq!(mu.mu, vec![0.0; 12]); // φ(s_0) has an empty completion
    }

    #[test]
    fn temperature_zero_mu_is_seed_and_sample_invariant() {
        let w = world();
        let policy = constant_policy(2, &w, 5);
        let prompts = vec![Sequence::prompt_only(vec![1, 2, 3, 4])];
        let spec = FeatureSpec::default();
        let a = feature_expectations(&policy, &prompts, 1, 0.0, 1.0, &spec, &w, 1).unwrap();
        let b = feature_expectations(&policy, &prompts, 7, 0.0, 1.0, &spec, &w, 2).unwrap();
        assert_eq!(a.mu, b.mu);
    }

    #[test]
    fn single_policy_max_margin_aligns_with_difference() {
        let mu_e = FeatureExpectations { mu: vec![1.0, 0.0], n_trajectories: 1, gamma: 1.0 };
        let mut set = PolicySet::new();
        set.push("only", FeatureExpectations { mu: vec![0.0, 1.0], n_trajectories: 1, gamma: 1.0 });
        let sol = max_margin_weights(&mu_e, &set).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        assert!((sol.weights.w[0] - s).abs() < 1e-6);
        assert!((sol.weights.w[1] + s).abs() < 1e-6);
        assert!((sol.margin - 2.0f64.sqrt()).abs() < 1e-6);
        assert!(!sol.degenerate);
    }

    #[test]
    fn identical_expectations_are_degenerate() {
        let mu_e = FeatureExpectations { mu: vec![0.5, 0.5], n_trajectories: 1, gamma: 1.0 };
        let mut set = PolicySet::new();
        set.push("same", mu_e.clone());
        let sol = max_margin_weights(&mu_e, &set).unwrap();
        assert!(sol.degenerate);
        assert_eq!(sol.weights.w, vec![0.0, 0.0]);
        assert_eq!(sol.margin, 0.0);
    }

    /// Fine sweep of unit vectors on the circle.
    fn grid_search_margin(mu_e: &[f64], policies: &[Vec<f64>]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let steps = 200_000;
        for i in 0..steps {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / steps as f64;
            let w = [theta.cos(), theta.sin()];
            let margin = policies
                .iter()
                .map(|p| w[0] * (mu_e[0] - p[0]) + w[1] * (mu_e[1] - p[1]))
                .fold(f64::INFINITY, f64::min);
            best = best.max(margin);
        }
        best
    }

    #[test]
    fn solver_matches_grid_search_oracle() {
        let mu_e = FeatureExpectations { mu: vec![1.0, 0.0], n_trajectories: 1, gamma: 1.0 };
        let policies = vec![vec![0.0, 1.0], vec![1.0, -0.5]];
        let mut set = PolicySet::new();
        for (i, p) in policies.iter().enumerate() {
            set.push(
                format!("p{i}"),
                FeatureExpectations { mu: p.clone(), n_trajectories: 1, gamma: 1.0 },
            );
        }
        let sol = max_margin_weights(&mu_e, &set).unwrap();
        let oracle = grid_search_margin(&mu_e.mu, &policies);
        assert!(
            (sol.margin - oracle).abs() < 1e-3,
            "solver {} vs grid {}",
            sol.margin,
            oracle
        );
        assert!(sol.weights.norm() <= 1.0 + 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let mu_e = FeatureExpectations { mu: vec![1.0, 0.0], n_trajectories: 1, gamma: 1.0 };
        let mut set = PolicySet::new();
        set.push("bad", FeatureExpectations { mu: vec![1.0], n_trajectories: 1, gamma: 1.0 });
        assert!(matches!(max_margin_weights(&mu_e, &set), Err(Error::Shape(_))));
    }

    #[test]
    fn asymmetric_loss_branches() {
        assert_eq!(asymmetric_margin_loss(0.5), -0.5);
        assert_eq!(asymmetric_margin_loss(-0.5), 1.0);
        assert_eq!(asymmetric_margin_loss(0.0), 0.0);
    }

    fn one_pair(d: &[f64]) -> (Vec<PairedSample>, FeatureSpec, WorldConfig) {
        // Build a pair whose feature difference is exactly `d` over a
        // two-token unnormalized unigram world.
        let w = WorldConfig {
            vocab_size: 2,
            max_len: 8,
            prompt_len: 1,
            toxic_lexicon: [1].into_iter().collect(),
            ..world()
        };
        let spec = FeatureSpec { unigram: true, bigram: false, lexicon_fraction: false, normalize_by_length: false };
        assert_eq!(d, [1.0, -1.0]);
        let prompt = Sequence::prompt_only(vec![0]);
        let preferred = Sequence::new(vec![0, 0], 1).unwrap(); // φ = (1, 0)
        let rejected = Sequence::new(vec![0, 1], 1).unwrap(); // φ = (0, 1)
        (vec![PairedSample::new(prompt, preferred, rejected).unwrap()], spec, w)
    }

    #[test]
    fn hand_computed_gradient_step() {
        let (pairs, spec, w) = one_pair(&[1.0, -1.0]);
        let cfg = IrlConfig { epochs: 1, lr: 0.1, ..IrlConfig::default() };

        // at the kink the subgradient is zero and weights stay put
        let (w0, _) = pairwise_extract_with_init(&pairs, &spec, &w, &cfg, RewardWeights::zeros(2)).unwrap();
        assert_eq!(w0.w, vec![0.0, 0.0]);

        // x = -0.2 < 0 doubles the step: w <- w + 2 lr d
        let start = RewardWeights { w: vec![-0.1, 0.1] };
        let (w1, metrics) = pairwise_extract_with_init(&pairs, &spec, &w, &cfg, start).unwrap();
        assert!((w1.w[0] - 0.1).abs() < 1e-12);
        assert!((w1.w[1] + 0.1).abs() < 1e-12);
        assert_eq!(metrics.len(), 1);
        assert_eq!(metrics[0].accuracy, 1.0);
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let (pairs, spec, w) = one_pair(&[1.0, -1.0]);
        let cfg = IrlConfig { epochs: 0, ..IrlConfig::default() };
        let start = RewardWeights { w: vec![0.3, -0.2] };
        let (out, metrics) = pairwise_extract_with_init(&pairs, &spec, &w, &cfg, start.clone()).unwrap();
        assert_eq!(out, start);
        assert!(metrics.is_empty());
    }

    #[test]
    fn epoch_gradient_matches_central_differences() {
        let w = world();
        let spec = FeatureSpec::default();
        let corpus = crate::world::generate_corpus(&w, 30, 0.8, 0.35, 9).unwrap();
        let pairs: Vec<PairedSample> = corpus
            .chunks(2)
            .filter(|c| c.len() == 2)
            .map(|c| PairedSample {
                prompt: Sequence::prompt_only(c[0].seq.prompt().to_vec()),
                preferred: c[0].seq.clone(),
                rejected: c[1].seq.clone(),
            })
            .collect();
        let diffs = pair_diffs(&pairs, &spec, &w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let point: Vec<f64> = (0..spec.dim(&w)).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let grad = epoch_gradient(&point, &diffs);
        // central differences are exact on piecewise-linear pieces; the floor
        // absorbs cancellation noise on components whose contributions cancel
        let h = 1e-5;
        for i in 0..point.len() {
            let mut plus = point.clone();
            let mut minus = point.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (epoch_loss(&plus, &diffs) - epoch_loss(&minus, &diffs)) / (2.0 * h);
            let denom = grad[i].abs().max(1e-6);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-4,
                "component {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn reward_of_basis_probe_and_groundtruth() {
        let w = world();
        let spec = FeatureSpec::default();
        let dim = spec.dim(&w);
        let corpus = crate::world::generate_corpus(&w, 20, 0.8, 0.35, 2).unwrap();
        let oracle = crate::oracle::ToxicityOracle::new(crate::oracle::OracleConfig::default());

        let zero = RewardWeights::zeros(dim);
        for e in &corpus {
            assert_eq!(reward_of(&e.seq, &zero, &spec, &w).unwrap(), 0.0);
        }

        // basis probe on feature 0
        let mut e0 = RewardWeights::zeros(dim);
        e0.w[0] = 1.0;
        for e in &corpus {
            let phi = extract_features(&e.seq, &spec, &w).unwrap();
            assert_eq!(reward_of(&e.seq, &e0, &spec, &w).unwrap(), phi[0]);
        }

        // the groundtruth reward −tox lies in span(φ): weight −1 on lexicon fraction
        let mut w_star = RewardWeights::zeros(dim);
        w_star.w[spec.lexicon_fraction_index(&w).unwrap()] = -1.0;
        for e in &corpus {
            let r = reward_of(&e.seq, &w_star, &spec, &w).unwrap();
            assert!((r - (-oracle.tox_score(&e.seq))).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        let weights = RewardWeights { w: vec![0.25, -0.5, 0.125] };
        let spec = FeatureSpec::default();
        let meta = WeightsMeta {
            strategy: "pairwise".into(),
            epochs: 30,
            seed: 9,
            final_accuracy: Some(0.95),
        };
        write_weights(&path, &weights, &spec, &meta).unwrap();
        let (w2, spec2, meta2) = read_weights(&path).unwrap();
        assert_eq!(w2, weights);
        assert_eq!(spec2, spec);
        assert_eq!(meta2.strategy, "pairwise");
        assert_eq!(meta2.final_accuracy, Some(0.95));
    }

    proptest! {
        #[test]
        fn loss_sign_and_asymmetry(x in 1e-9f64..100.0) {
            prop_assert!(asymmetric_margin_loss(x) < 0.0);
            prop_assert_eq!(asymmetric_margin_loss(-x), 2.0 * -asymmetric_margin_loss(x));
        }

        #[test]
        fn positive_scaling_preserves_reward_ranking(
            scale in 1e-3f64..1e3,
            seed in any::<u64>(),
        ) {
            let w = world();
            let spec = FeatureSpec::default();
            let corpus = crate::world::generate_corpus(&w, 10, 0.8, 0.2, seed % 1000).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let weights = RewardWeights {
                w: (0..spec.dim(&w)).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let scaled = RewardWeights { w: weights.w.iter().map(|x| x * scale).collect() };
            let score = |ws: &RewardWeights| -> Vec<f64> {
                corpus.iter().map(|e| reward_of(&e.seq, ws, &spec, &w).unwrap()).collect()
            };
            let rank = |xs: &[f64]| {
                let mut idx: Vec<usize> = (0..xs.len()).collect();
                idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap().then(a.cmp(&b)));
                idx
            };
            prop_assert_eq!(rank(&score(&weights)), rank(&score(&scaled)));
        }

        #[test]
        fn max_margin_weights_stay_in_unit_ball(
            mu_e in proptest::collection::vec(-2.0f64..2.0, 3),
            mu_a in proptest::collection::vec(-2.0f64..2.0, 3),
            mu_b in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let expert = FeatureExpectations { mu: mu_e, n_trajectories: 1, gamma: 1.0 };
            let mut set = PolicySet::new();
            set.push("a", FeatureExpectations { mu: mu_a, n_trajectories: 1, gamma: 1.0 });
            set.push("b", FeatureExpectations { mu: mu_b, n_trajectories: 1, gamma: 1.0 });
            let sol = max_margin_weights(&expert, &set).unwrap();
            prop_assert!(sol.weights.norm() <= 1.0 + 1e-9);
        }
    }
}
