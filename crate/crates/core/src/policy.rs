//! Autoregressive softmax token policies over a fixed context window.
//!
//! A policy is a table mapping length-`k` contexts (left-padded with a
//! reserved pad id at sequence start) to logit vectors. Unseen contexts map
//! to zero logits, i.e. the uniform distribution, so generation is total
//! over the state space.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::seeding;
use crate::world::{Sequence, Token, WorldConfig};

/// Tabular policy: context window `k`, vocabulary size, and per-context logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    context_window: usize,
    vocab_size: u32,
    logits: BTreeMap<Vec<Token>, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// 0 means deterministic argmax decoding (ties break to the lowest id).
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl PolicyParams {
    /// A fresh policy: every context is unseen, i.e. uniform.
    pub fn uniform(context_window: usize, vocab_size: u32) -> Self {
        Self {
            context_window,
            vocab_size,
            logits: BTreeMap::new(),
        }
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// The reserved pad id used to left-pad short histories.
    pub fn pad_token(&self) -> Token {
        self.vocab_size
    }

    /// The length-`k` context preceding position `pos` of `tokens`.
    pub fn context_at(&self, tokens: &[Token], pos: usize) -> Vec<Token> {
        let k = self.context_window;
        let mut ctx = Vec::with_capacity(k);
        for i in 0..k {
            // positions pos-k .. pos-1, padded below zero
            let idx = pos as isize - k as isize + i as isize;
            if idx < 0 {
                ctx.push(self.pad_token());
            } else {
                ctx.push(tokens[idx as usize]);
            }
        }
        ctx
    }

    pub fn logits_for(&self, context: &[Token]) -> Vec<f64> {
        self.logits
            .get(context)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab_size as usize])
    }

    fn logits_entry(&mut self, context: Vec<Token>) -> &mut Vec<f64> {
        let v = self.vocab_size as usize;
        self.logits.entry(context).or_insert_with(|| vec![0.0; v])
    }

    /// Mutable access for trainers; materializes the context if unseen.
    pub(crate) fn logits_mut(&mut self, context: Vec<Token>) -> &mut Vec<f64> {
        self.logits_entry(context)
    }

    /// Softmax over the context's logits; sums to 1 within 1e-9.
    pub fn next_token_distribution(&self, context: &[Token]) -> Vec<f64> {
        softmax(&self.logits_for(context), 1.0)
    }

    /// Extends `prompt` by up to `max_new_tokens` tokens.
    pub fn generate(
        &self,
        prompt: &Sequence,
        cfg: &GenerationConfig,
        world: &WorldConfig,
    ) -> Result<Sequence> {
        if prompt.len() + cfg.max_new_tokens > world.max_len {
            return Err(Error::Generation(format!(
                "prompt length {} + {} new tokens exceeds max_len {}",
                prompt.len(),
                cfg.max_new_tokens,
                world.max_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tokens = prompt.tokens.clone();
        for _ in 0..cfg.max_new_tokens {
            let ctx = self.context_at(&tokens, tokens.len());
            let logits = self.logits_for(&ctx);
            let next = if cfg.temperature == 0.0 {
                argmax_lowest(&logits)
            } else {
                sample_index(&softmax(&logits, cfg.temperature), &mut rng)
            };
            tokens.push(next as Token);
        }
        Sequence::new(tokens, prompt.len())
    }

    /// Sum of log π(token | context) over completion positions.
    pub fn sequence_log_prob(&self, seq: &Sequence) -> f64 {
        let mut total = 0.0;
        for pos in seq.prompt_boundary..seq.len() {
            let ctx = self.context_at(&seq.tokens, pos);
            let probs = self.next_token_distribution(&ctx);
            total += probs[seq.tokens[pos] as usize].ln();
        }
        total
    }

    /// Greedy decode of the full completion horizon from `prompt`.
    pub fn greedy_completion(&self, prompt: &Sequence, world: &WorldConfig) -> Result<Sequence> {
        let cfg = GenerationConfig {
            temperature: 0.0,
            max_new_tokens: world.max_len - prompt.len(),
            seed: 0,
        };
        self.generate(prompt, &cfg, world)
    }

    /// Number of contexts with materialized logits.
    pub fn context_count(&self) -> usize {
        self.logits.len()
    }
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Maximum-likelihood pretraining: full-batch gradient ascent on the total
/// log-likelihood of corpus completions given their contexts.
pub fn mle_fit(
    corpus: &[Sequence],
    world: &WorldConfig,
    context_window: usize,
    epochs: usize,
    lr: f64,
) -> Result<PolicyParams> {
    if corpus.is_empty() {
        return Err(Error::Fit("empty corpus".into()));
    }
    let mut params = PolicyParams::uniform(context_window, world.vocab_size);
    // (context, target) pairs are fixed across epochs
    let mut examples: Vec<(Vec<Token>, Token)> = Vec::new();
    for seq in corpus {
        seq.validate(world)?;
        for pos in seq.prompt_boundary..seq.len() {
            examples.push((params.context_at(&seq.tokens, pos), seq.tokens[pos]));
        }
    }
    if lr == 0.0 || epochs == 0 {
        return Ok(params);
    }
    for _ in 0..epochs {
        let mut grads: BTreeMap<Vec<Token>, Vec<f64>> = BTreeMap::new();
        for (ctx, target) in &examples {
            let probs = params.next_token_distribution(ctx);
            let grad = grads
                .entry(ctx.clone())
                .or_insert_with(|| vec![0.0; world.vocab_size as usize]);
            for (g, p) in grad.iter_mut().zip(&probs) {
                *g -= p;
            }
            grad[*target as usize] += 1.0;
        }
        for (ctx, grad) in grads {
            let entry = params.logits_entry(ctx);
            for (l, g) in entry.iter_mut().zip(&grad) {
                *l += lr * g;
            }
        }
    }
    Ok(params)
}

/// Total log-likelihood of corpus completions under a policy.
pub fn corpus_log_likelihood(params: &PolicyParams, corpus: &[Sequence]) -> f64 {
    corpus.iter().map(|s| params.sequence_log_prob(s)).sum()
}

/// Monte-Carlo KL(p‖q) per completion token: sample completions from `p` at
/// temperature 1 and average (log p − log q) / completion length. The raw
/// estimate can dip below zero on finite samples; report layers clip at 0.
pub fn kl_divergence(
    p: &PolicyParams,
    q: &PolicyParams,
    prompts: &[Sequence],
    samples_per_prompt: usize,
    world: &WorldConfig,
    seed: u64,
) -> Result<f64> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::Shape("policies have different vocabularies".into()));
    }
    if samples_per_prompt == 0 {
        return Err(Error::Config("samples_per_prompt must be >= 1".into()));
    }
    let mut work = Vec::with_capacity(prompts.len() * samples_per_prompt);
    for (i, prompt) in prompts.iter().enumerate() {
        for s in 0..samples_per_prompt {
            work.push((prompt, seeding::derive(seed, "kl-sample", (i * samples_per_prompt + s) as u64)));
        }
    }
    let ratios = exec::map_collect(&work, |(prompt, sample_seed)| -> Result<f64> {
        let cfg = GenerationConfig {
            temperature: 1.0,
            max_new_tokens: world.max_len - prompt.len(),
            seed: *sample_seed,
        };
        let seq = p.generate(prompt, &cfg, world)?;
        let tokens = seq.completion().len().max(1) as f64;
        Ok((p.sequence_log_prob(&seq) - q.sequence_log_prob(&seq)) / tokens)
    });
    let mut total = 0.0;
    let mut n = 0usize;
    for r in ratios {
        let r: f64 = r?;
        total += r;
        n += 1;
    }
    Ok(total / n as f64)
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    context: Vec<Token>,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    context_window: usize,
    vocab_size: u32,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Writes a policy checkpoint: a header line followed by one context entry
/// per line, in context order. Logits round-trip bit-exactly.
pub fn write_policy(path: &Path, params: &PolicyParams) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        context_window: params.context_window,
        vocab_size: params.vocab_size,
    };
    writeln!(out, "{}", serde_json::to_string(&header).map_err(|e| Error::Parse(e.to_string()))?)?;
    for (context, logits) in &params.logits {
        let entry = CheckpointEntry { context: context.clone(), logits: logits.clone() };
        writeln!(out, "{}", serde_json::to_string(&entry).map_err(|e| Error::Parse(e.to_string()))?)?;
    }
    Ok(())
}

pub fn read_policy(path: &Path) -> Result<PolicyParams> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header: CheckpointHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?).map_err(|e| Error::Parse(format!("policy header: {e}")))?,
        None => return Err(Error::Parse("empty policy file".into())),
    };
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported policy version {}", header.version)));
    }
    let mut params = PolicyParams::uniform(header.context_window, header.vocab_size);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CheckpointEntry =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("policy entry: {e}")))?;
        if entry.logits.len() != header.vocab_size as usize {
            return Err(Error::Parse("logit vector has wrong arity".into()));
        }
        if entry.logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Parse("non-finite logit in checkpoint".into()));
        }
        params.logits.insert(entry.context, entry.logits);
    }
    Ok(params)
}

/// Test-and-tooling helper: force a deterministic policy that always emits
/// `token` by writing a large logit at every reachable context.
pub fn constant_policy(context_window: usize, world: &WorldConfig, token: Token) -> PolicyParams {
    let mut params = PolicyParams::uniform(context_window, world.vocab_size);
    let alphabet: Vec<Token> = (0..world.vocab_size).chain([params.pad_token()]).collect();
    let mut contexts: Vec<Vec<Token>> = vec![Vec::new()];
    for _ in 0..context_window {
        contexts = contexts
            .into_iter()
            .flat_map(|c| {
                alphabet.iter().map(move |&t| {
                    let mut next = c.clone();
                    next.push(t);
                    next
                })
            })
            .collect();
    }
    for ctx in contexts {
        params.logits_entry(ctx)[token as usize] = 50.0;
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn world() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn uniform_distribution_on_unseen_context() {
        let w = WorldConfig { vocab_size: 4, ..world() };
        let p = PolicyParams::uniform(2, w.vocab_size);
        let dist = p.next_token_distribution(&[0, 1]);
        assert_eq!(dist, vec![0.25; 4]);
    }

    #[test]
    fn closed_form_softmax() {
        let mut p = PolicyParams::uniform(1, 2);
        *p.logits_entry(vec![0]) = vec![std::f64::consts::LN_2, 0.0];
        let dist = p.next_token_distribution(&[0]);
        assert!((dist[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((dist[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_ties_break_to_lowest_id() {
        let w = world();
        let p = PolicyParams::uniform(2, w.vocab_size);
        let prompt = Sequence::prompt_only(vec![1, 2]);
        let cfg = GenerationConfig { temperature: 0.0, max_new_tokens: 4, seed: 9 };
        let out = p.generate(&prompt, &cfg, &w).unwrap();
        assert_eq!(out.completion(), &[0, 0, 0, 0]);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let w = world();
        let p = constant_policy(2, &w, 3);
        let prompt = Sequence::prompt_only(vec![1, 2, 3, 4]);
        for temperature in [0.0, 1.0] {
            let cfg = GenerationConfig { temperature, max_new_tokens: 8, seed: 77 };
            let a = p.generate(&prompt, &cfg, &w).unwrap();
            let b = p.generate(&prompt, &cfg, &w).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn length_overflow_is_an_error() {
        let w = world();
        let p = PolicyParams::uniform(2, w.vocab_size);
        let prompt = Sequence::prompt_only(vec![0; 10]);
        let cfg = GenerationConfig { temperature: 0.0, max_new_tokens: 7, seed: 0 };
        assert!(matches!(p.generate(&prompt, &cfg, &w), Err(Error::Generation(_))));
    }

    #[test]
    fn log_prob_of_near_deterministic_sequence_is_near_zero() {
        let w = world();
        let p = constant_policy(2, &w, 5);
        let prompt = Sequence::prompt_only(vec![0, 1]);
        let seq = p.greedy_completion(&prompt, &w).unwrap();
        let lp = p.sequence_log_prob(&seq);
        assert!(lp <= 0.0 && lp > -1e-9, "log prob {lp}");
    }

    #[test]
    fn log_prob_uniform_closed_form() {
        let p = PolicyParams::uniform(2, 4);
        let seq = Sequence::new(vec![0, 1, 2, 3, 0], 2).unwrap();
        let lp = p.sequence_log_prob(&seq);
        assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mle_on_repeated_sequence_reproduces_it() {
        let w = world();
        let seq = Sequence::new(vec![1, 2, 5, 6, 7, 8, 5, 6], 2).unwrap();
        let corpus = vec![seq.clone(); 4];
        let p = mle_fit(&corpus, &w, 2, 200, 0.5).unwrap();
        let prompt = Sequence::prompt_only(seq.prompt().to_vec());
        let cfg = GenerationConfig { temperature: 0.0, max_new_tokens: seq.completion().len(), seed: 0 };
        let out = p.generate(&prompt, &cfg, &w).unwrap();
        assert_eq!(out.tokens, seq.tokens);
    }

    #[test]
    fn zero_lr_is_identity() {
        let w = world();
        let corpus = vec![Sequence::new(vec![1, 2, 3, 4], 1).unwrap()];
        let p = mle_fit(&corpus, &w, 2, 10, 0.0).unwrap();
        assert_eq!(p, PolicyParams::uniform(2, w.vocab_size));
    }

    #[test]
    fn small_step_improves_log_likelihood() {
        let w = world();
        let corpus: Vec<Sequence> = crate::world::generate_corpus(&w, 20, 0.8, 0.1, 5)
            .unwrap()
            .into_iter()
            .map(|e| e.seq)
            .collect();
        let before = corpus_log_likelihood(&PolicyParams::uniform(2, w.vocab_size), &corpus);
        let p = mle_fit(&corpus, &w, 2, 1, 1e-3).unwrap();
        let after = corpus_log_likelihood(&p, &corpus);
        assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn kl_of_identical_policies_is_exactly_zero() {
        let w = world();
        let p = constant_policy(2, &w, 1);
        let prompts = vec![Sequence::prompt_only(vec![0, 1, 2, 3])];
        let kl = kl_divergence(&p, &p.clone(), &prompts, 16, &w, 3).unwrap();
        assert_eq!(kl, 0.0);
    }

    /// Exact one-step KL by enumeration, independent of the policy code path.
    fn one_step_kl_oracle(p_logits: &[f64], q_logits: &[f64]) -> f64 {
        let norm = |ls: &[f64]| {
            let z: f64 = ls.iter().map(|l| l.exp()).sum();
            ls.iter().map(|l| l.exp() / z).collect::<Vec<f64>>()
        };
        let (p, q) = (norm(p_logits), norm(q_logits));
        p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn kl_matches_enumeration_on_one_step_world() {
        let w = WorldConfig {
            vocab_size: 2,
            max_len: 2,
            prompt_len: 1,
            toxic_lexicon: [1].into_iter().collect(),
            ..world()
        };
        let p = PolicyParams::uniform(1, 2);
        let mut q = PolicyParams::uniform(1, 2);
        *q.logits_entry(vec![0]) = vec![std::f64::consts::LN_2, 0.0];
        let expected = one_step_kl_oracle(&[0.0, 0.0], &[std::f64::consts::LN_2, 0.0]);
        assert!((expected - 0.0589).abs() < 1e-4);
        let prompts = vec![Sequence::prompt_only(vec![0])];
        let estimate = kl_divergence(&p, &q, &prompts, 10_000, &w, 123).unwrap();
        assert!((estimate - expected).abs() < 0.01, "estimate {estimate} vs {expected}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let w = world();
        let corpus: Vec<Sequence> = crate::world::generate_corpus(&w, 10, 0.8, 0.1, 2)
            .unwrap()
            .into_iter()
            .map(|e| e.seq)
            .collect();
        let p = mle_fit(&corpus, &w, 2, 5, 0.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.jsonl");
        write_policy(&path, &p).unwrap();
        let q = read_policy(&path).unwrap();
        assert_eq!(p, q);
        let bytes_a = std::fs::read(&path).unwrap();
        write_policy(&path, &q).unwrap();
        assert_eq!(bytes_a, std::fs::read(&path).unwrap());
    }

    proptest! {
        #[test]
        fn distributions_sum_to_one(logits in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut p = PolicyParams::uniform(1, 12);
            *p.logits_entry(vec![3]) = logits;
            let dist = p.next_token_distribution(&[3]);
            let sum: f64 = dist.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn greedy_invariant_to_logit_shift(
            logits in proptest::collection::vec(-5.0f64..5.0, 12),
            shift in -100.0f64..100.0,
        ) {
            let w = world();
            let mut p = PolicyParams::uniform(2, w.vocab_size);
            let ctx = p.context_at(&[1, 2], 2);
            *p.logits_entry(ctx.clone()) = logits.clone();
            let mut q = PolicyParams::uniform(2, w.vocab_size);
            *q.logits_entry(ctx) = logits.iter().map(|l| l + shift).collect();
            let prompt = Sequence::prompt_only(vec![1, 2]);
            let cfg = GenerationConfig { temperature: 0.0, max_new_tokens: 1, seed: 0 };
            prop_assert_eq!(
                p.generate(&prompt, &cfg, &w).unwrap().completion()[0],
                q.generate(&prompt, &cfg, &w).unwrap().completion()[0]
            );
        }

        #[test]
        fn generated_sequences_have_finite_log_prob(seed in any::<u64>()) {
            let w = world();
            let p = PolicyParams::uniform(2, w.vocab_size);
            let prompt = Sequence::prompt_only(vec![0, 1, 2, 3]);
            let cfg = GenerationConfig { temperature: 1.0, max_new_tokens: 12, seed };
            let seq = p.generate(&prompt, &cfg, &w).unwrap();
            prop_assert!(p.sequence_log_prob(&seq).is_finite());
        }
    }
}
