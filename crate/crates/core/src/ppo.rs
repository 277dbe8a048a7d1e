//! PPO fine-tuning against a sequence-level reward with a per-token KL
//! penalty anchoring the policy to a frozen reference.
//!
//! Rollouts sample completions at temperature 1; the sequence reward lands on
//! the final generated token and every token pays `-beta_kl * kl_token`,
//! where `kl_token` is the log-ratio of the sampled token under the training
//! policy versus the reference. Advantages come from GAE(λ); the value
//! baseline is a per-context running mean of rewards-to-go.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::ToxicityOracle;
use crate::policy::{GenerationConfig, PolicyParams};
use crate::world::{Sequence, Token, WorldConfig};
use crate::{exec, seeding};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    pub beta_kl: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Gradient passes over each collected batch; the clip only binds when
    /// the ratio moves away from 1 within a step.
    pub ppo_epochs: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            gamma: 1.0,
            gae_lambda: 0.95,
            lr: 10.0,
            beta_kl: 0.035,
            total_steps: 300,
            batch_size: 16,
            ppo_epochs: 4,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_epsilon <= 0.0 {
            return Err(Error::Config("clip_epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae_lambda must lie in [0,1]".into()));
        }
        if self.beta_kl < 0.0 {
            return Err(Error::Config("beta_kl must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.ppo_epochs == 0 {
            return Err(Error::Config("batch_size and ppo_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Tabular value baseline over the same contexts as the policy. Each context
/// keeps the exact running mean of every reward-to-go target it has seen.
#[derive(Debug, Clone, Default)]
pub struct ValueParams {
    table: BTreeMap<Vec<Token>, (f64, u64)>,
}

impl ValueParams {
    pub fn get(&self, context: &[Token]) -> f64 {
        self.table.get(context).map_or(0.0, |&(mean, _)| mean)
    }

    pub fn update(&mut self, context: &[Token], target: f64) {
        let entry = self.table.entry(context.to_vec()).or_insert((0.0, 0));
        entry.1 += 1;
        entry.0 += (target - entry.0) / entry.1 as f64;
    }
}

/// One optimization-step record; the exact columns of the training-curve files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub total_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub returns_mean: f64,
    pub returns_std: f64,
    pub reward_mean: f64,
    pub kl_estimate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn is_finite(&self) -> bool {
        self.records.iter().all(|r| {
            [
                r.total_loss,
                r.policy_loss,
                r.value_loss,
                r.returns_mean,
                r.returns_std,
                r.reward_mean,
                r.kl_estimate,
            ]
            .iter()
            .all(|v| v.is_finite())
        })
    }
}

/// G_t = r_t + γ G_{t+1}.
pub fn rewards_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// GAE(λ): δ_t = r_t + γ V_{t+1} − V_t, Â_t = Σ_i (γλ)^i δ_{t+i}.
/// `values` carries one bootstrap entry beyond the rewards.
pub fn advantage_estimates(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Shape(format!(
            "values must have one more entry than rewards ({} vs {})",
            values.len(),
            rewards.len()
        )));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        let delta = rewards[i] + gamma * values[i + 1] - values[i];
        acc = delta + gamma * lambda * acc;
        out[i] = acc;
    }
    Ok(out)
}

/// R_final = R_RM − β · KL.
pub fn shaped_reward(reward_model_score: f64, kl_estimate: f64, beta: f64) -> f64 {
    reward_model_score - beta * kl_estimate
}

/// min(ratio · A, clip(ratio, 1−ε, 1+ε) · A) with ratio = exp(new − old).
/// The training loss is its negation.
pub fn ppo_clip_objective(new_logp: f64, old_logp: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let ratio = (new_logp - old_logp).exp();
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Scores a generated sequence, optionally against the corpus original the
/// prompt came from.
pub trait SequenceScorer: Sync {
    fn score(&self, generated: &Sequence, original: Option<&Sequence>) -> Result<f64>;
}

impl SequenceScorer for ToxicityOracle {
    fn score(&self, generated: &Sequence, original: Option<&Sequence>) -> Result<f64> {
        let original = original.ok_or_else(|| {
            Error::Config("pairwise oracle reward needs the corpus original".into())
        })?;
        Ok(self.pairwise_reward(generated, original))
    }
}

/// A rollout prompt, optionally paired with the corpus original used by
/// pairwise scorers.
#[derive(Debug, Clone)]
pub struct RolloutPrompt {
    pub prompt: Sequence,
    pub original: Option<Sequence>,
}

struct Rollout {
    contexts: Vec<Vec<Token>>,
    tokens: Vec<Token>,
    logp_old: Vec<f64>,
    kl_tokens: Vec<f64>,
    score: f64,
}

struct TokenSample {
    context: Vec<Token>,
    token: Token,
    logp_old: f64,
    advantage: f64,
}

/// Runs `total_steps` PPO updates and returns the trained policy with its
/// full per-step log. Deterministic for a fixed config.
pub fn train_rlhf(
    policy: &PolicyParams,
    reference: &PolicyParams,
    reward: &dyn SequenceScorer,
    prompts: &[RolloutPrompt],
    world: &WorldConfig,
    cfg: &PpoConfig,
) -> Result<(PolicyParams, TrainLog)> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Config("prompts must be nonempty".into()));
    }
    let mut policy = policy.clone();
    let mut values = ValueParams::default();
    let mut log = TrainLog::default();

    for step in 0..cfg.total_steps {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "batch", step as u64));
        let batch: Vec<&RolloutPrompt> = (0..cfg.batch_size)
            .map(|_| &prompts[batch_rng.gen_range(0..prompts.len())])
            .collect();

        let policy_ref = &policy;
        let rollouts: Vec<Result<Rollout>> = {
            let work: Vec<(usize, &RolloutPrompt)> = batch.into_iter().enumerate().collect();
            exec::map_collect(&work, |(slot, case)| {
                let sample_seed = seeding::derive(
                    cfg.seed,
                    "rollout",
                    (step * cfg.batch_size + slot) as u64,
                );
                let gen_cfg = GenerationConfig {
                    temperature: 1.0,
                    max_new_tokens: world.max_len - case.prompt.len(),
                    seed: sample_seed,
                };
                let seq = policy_ref.generate(&case.prompt, &gen_cfg, world)?;
                let mut contexts = Vec::with_capacity(seq.completion().len());
                let mut tokens = Vec::with_capacity(seq.completion().len());
                let mut logp_old = Vec::with_capacity(seq.completion().len());
                let mut kl_tokens = Vec::with_capacity(seq.completion().len());
                for pos in seq.prompt_boundary..seq.len() {
                    let ctx = policy_ref.context_at(&seq.tokens, pos);
                    let tok = seq.tokens[pos];
                    let lp = policy_ref.next_token_distribution(&ctx)[tok as usize].ln();
                    let lp_ref = reference.next_token_distribution(&ctx)[tok as usize].ln();
                    contexts.push(ctx);
                    tokens.push(tok);
                    logp_old.push(lp);
                    kl_tokens.push(lp - lp_ref);
                }
                let score = reward.score(&seq, case.original.as_ref())?;
                Ok(Rollout { contexts, tokens, logp_old, kl_tokens, score })
            })
        };

        let mut samples: Vec<TokenSample> = Vec::new();
        let mut returns = Vec::with_capacity(cfg.batch_size);
        let mut scores = Vec::with_capacity(cfg.batch_size);
        let mut kl_sum = 0.0;
        let mut kl_count = 0usize;
        let mut value_sq_err = 0.0;
        let mut value_updates: Vec<(Vec<Token>, f64)> = Vec::new();

        for rollout in rollouts {
            let rollout = rollout?;
            let horizon = rollout.tokens.len();
            let mut rewards: Vec<f64> = rollout
                .kl_tokens
                .iter()
                .map(|&kl| shaped_reward(0.0, kl, cfg.beta_kl))
                .collect();
            rewards[horizon - 1] += rollout.score;

            let mut baseline = Vec::with_capacity(horizon + 1);
            for ctx in &rollout.contexts {
                baseline.push(values.get(ctx));
            }
            baseline.push(0.0); // episode ends at the horizon
            let advantages = advantage_estimates(&rewards, &baseline, cfg.gamma, cfg.gae_lambda)?;
            let targets = rewards_to_go(&rewards, cfg.gamma);

            returns.push(targets[0]);
            scores.push(rollout.score);
            kl_sum += rollout.kl_tokens.iter().sum::<f64>();
            kl_count += horizon;
            for t in 0..horizon {
                value_sq_err += (baseline[t] - targets[t]).powi(2);
                value_updates.push((rollout.contexts[t].clone(), targets[t]));
                samples.push(TokenSample {
                    context: rollout.contexts[t].clone(),
                    token: rollout.tokens[t],
                    logp_old: rollout.logp_old[t],
                    advantage: advantages[t],
                });
            }
        }

        let n_tokens = samples.len() as f64;
        let mut policy_loss_acc = 0.0;
        for _ in 0..cfg.ppo_epochs {
            let mut grads: BTreeMap<Vec<Token>, Vec<f64>> = BTreeMap::new();
            let mut objective = 0.0;
            for s in &samples {
                let probs = policy.next_token_distribution(&s.context);
                let logp_new = probs[s.token as usize].ln();
                objective += ppo_clip_objective(logp_new, s.logp_old, s.advantage, cfg.clip_epsilon);
                let ratio = (logp_new - s.logp_old).exp();
                let clipped_out = (s.advantage >= 0.0 && ratio > 1.0 + cfg.clip_epsilon)
                    || (s.advantage < 0.0 && ratio < 1.0 - cfg.clip_epsilon);
                if clipped_out {
                    continue;
                }
                let grad = grads
                    .entry(s.context.clone())
                    .or_insert_with(|| vec![0.0; world.vocab_size as usize]);
                let scale = s.advantage * ratio / n_tokens;
                for (g, p) in grad.iter_mut().zip(&probs) {
                    *g -= scale * p;
                }
                grad[s.token as usize] += scale;
            }
            policy_loss_acc += -objective / n_tokens;
            for (ctx, grad) in grads {
                // skip no-op updates so unseen contexts are not materialized
                if cfg.lr == 0.0 || grad.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let logits = policy.logits_mut(ctx);
                for (l, g) in logits.iter_mut().zip(&grad) {
                    *l += cfg.lr * g;
                }
            }
        }

        for (ctx, target) in value_updates {
            values.update(&ctx, target);
        }

        let policy_loss = policy_loss_acc / cfg.ppo_epochs as f64;
        let value_loss = value_sq_err / n_tokens;
        let returns_mean = mean(&returns);
        let returns_std = std_dev(&returns, returns_mean);
        let record = TrainRecord {
            step,
            total_loss: policy_loss + value_loss,
            policy_loss,
            value_loss,
            returns_mean,
            returns_std,
            reward_mean: mean(&scores),
            kl_estimate: kl_sum / kl_count as f64,
        };
        let finite = [
            record.total_loss,
            record.policy_loss,
            record.value_loss,
            record.returns_mean,
            record.returns_std,
            record.reward_mean,
            record.kl_estimate,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Divergence { step, what: format!("{record:?}") });
        }
        log.records.push(record);
    }

    Ok((policy, log))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64], mean: f64) -> f64 {
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// One JSON record per optimization step.
pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in &log.records {
        writeln!(out, "{}", serde_json::to_string(record).map_err(|e| Error::Parse(e.to_string()))?)?;
    }
    Ok(())
}

pub fn read_train_log(path: &Path) -> Result<TrainLog> {
    let file = std::fs::File::open(path)?;
    let mut log = TrainLog::default();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        log.records.push(
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("train log line: {e}")))?,
        );
    }
    Ok(log)
}
