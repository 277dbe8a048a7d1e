//! Synthetic token MDP: vocabulary, deterministic append transitions,
//! feature extraction, and balanced corpus generation.
//!
//! States are token prefixes, actions are next-token choices, and the
//! transition appends the chosen token until the horizon `max_len` is
//! reached. Features are computed over the completion segment of a
//! sequence; the prompt only conditions generation.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{exec, seeding};

pub type Token = u32;
pub type FeatureVector = Vec<f64>;

/// The world: vocabulary size, horizon, discount, toxic lexicon, prompt length.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WorldConfig {
    pub vocab_size: u32,
    pub max_len: usize,
    pub gamma: f64,
    pub toxic_lexicon: BTreeSet<Token>,
    pub prompt_len: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 12,
            max_len: 16,
            gamma: 1.0,
            toxic_lexicon: [9, 10, 11].into_iter().collect(),
            prompt_len: 4,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if self.toxic_lexicon.is_empty() {
            return Err(Error::Config("toxic_lexicon must be nonempty".into()));
        }
        if self.toxic_lexicon.len() as u32 >= self.vocab_size {
            return Err(Error::Config("toxic_lexicon must be a proper subset of the vocabulary".into()));
        }
        if let Some(&t) = self.toxic_lexicon.iter().max() {
            if t >= self.vocab_size {
                return Err(Error::Config(format!("lexicon token {t} out of range")));
            }
        }
        if self.prompt_len + 1 > self.max_len {
            return Err(Error::Config("prompt_len + 1 must not exceed max_len".into()));
        }
        Ok(())
    }

    /// Token ids outside the toxic lexicon.
    pub fn non_toxic_tokens(&self) -> Vec<Token> {
        (0..self.vocab_size)
            .filter(|t| !self.toxic_lexicon.contains(t))
            .collect()
    }

    pub fn completion_len(&self) -> usize {
        self.max_len - self.prompt_len
    }
}

/// An ordered token list split into prompt and completion at `prompt_boundary`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<Token>,
    pub prompt_boundary: usize,
}

impl Sequence {
    pub fn new(tokens: Vec<Token>, prompt_boundary: usize) -> Result<Self> {
        if prompt_boundary > tokens.len() {
            return Err(Error::InvalidSequence(format!(
                "prompt_boundary {} exceeds length {}",
                prompt_boundary,
                tokens.len()
            )));
        }
        Ok(Self { tokens, prompt_boundary })
    }

    /// A sequence that is all completion (empty prompt).
    pub fn completion_only(tokens: Vec<Token>) -> Self {
        Self { tokens, prompt_boundary: 0 }
    }

    /// A sequence that is all prompt (empty completion).
    pub fn prompt_only(tokens: Vec<Token>) -> Self {
        let boundary = tokens.len();
        Self { tokens, prompt_boundary: boundary }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt(&self) -> &[Token] {
        &self.tokens[..self.prompt_boundary]
    }

    pub fn completion(&self) -> &[Token] {
        &self.tokens[self.prompt_boundary..]
    }

    /// Checks token range and length against the world.
    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        if self.tokens.len() > world.max_len {
            return Err(Error::InvalidSequence(format!(
                "length {} exceeds max_len {}",
                self.tokens.len(),
                world.max_len
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= world.vocab_size) {
            return Err(Error::InvalidSequence(format!(
                "token {} out of range for vocab {}",
                t, world.vocab_size
            )));
        }
        Ok(())
    }

    /// The prefix holding the prompt plus the first `n` completion tokens.
    pub fn prefix(&self, n: usize) -> Sequence {
        let end = self.prompt_boundary + n.min(self.completion().len());
        Sequence {
            tokens: self.tokens[..end].to_vec(),
            prompt_boundary: self.prompt_boundary,
        }
    }
}

/// Which feature blocks φ extracts, and whether counts are normalized by
/// completion length.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct FeatureSpec {
    pub unigram: bool,
    pub bigram: bool,
    pub lexicon_fraction: bool,
    pub normalize_by_length: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            unigram: true,
            bigram: false,
            lexicon_fraction: true,
            normalize_by_length: true,
        }
    }
}

impl FeatureSpec {
    /// Fixed feature dimension for a given vocabulary.
    pub fn dim(&self, world: &WorldConfig) -> usize {
        let v = world.vocab_size as usize;
        (if self.unigram { v } else { 0 })
            + (if self.bigram { v * v } else { 0 })
            + (if self.lexicon_fraction { 1 } else { 0 })
    }

    /// Index of the lexicon-fraction entry, when enabled.
    pub fn lexicon_fraction_index(&self, world: &WorldConfig) -> Option<usize> {
        if !self.lexicon_fraction {
            return None;
        }
        Some(self.dim(world) - 1)
    }
}

/// φ(seq): counts over the completion segment, laid out as
/// [unigram…][bigram…][lexicon_fraction]. Empty completions map to the zero
/// vector so normalized features never divide by zero.
pub fn extract_features(seq: &Sequence, spec: &FeatureSpec, world: &WorldConfig) -> Result<FeatureVector> {
    seq.validate(world)?;
    let v = world.vocab_size as usize;
    let mut out = vec![0.0; spec.dim(world)];
    let completion = seq.completion();
    if completion.is_empty() {
        return Ok(out);
    }
    let len = completion.len() as f64;
    let mut offset = 0;
    if spec.unigram {
        for &t in completion {
            out[offset + t as usize] += 1.0;
        }
        if spec.normalize_by_length {
            for x in &mut out[offset..offset + v] {
                *x /= len;
            }
        }
        offset += v;
    }
    if spec.bigram {
        for pair in completion.windows(2) {
            out[offset + pair[0] as usize * v + pair[1] as usize] += 1.0;
        }
        if spec.normalize_by_length {
            for x in &mut out[offset..offset + v * v] {
                *x /= len;
            }
        }
        offset += v * v;
    }
    if spec.lexicon_fraction {
        let toxic = completion.iter().filter(|t| world.toxic_lexicon.contains(t)).count();
        out[offset] = toxic as f64 / len;
    }
    Ok(out)
}

/// Class label for generated corpus entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Toxic,
    NonToxic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub seq: Sequence,
    pub label: Label,
}

impl LabeledSequence {
    pub fn is_toxic(&self) -> bool {
        self.label == Label::Toxic
    }
}

/// Generates a balanced corpus: `n_per_class` non-toxic sequences followed by
/// `n_per_class` toxic ones. Prompts are uniform over non-toxic tokens;
/// each completion token comes from the toxic lexicon with the class rate,
/// otherwise uniformly from the non-toxic complement.
pub fn generate_corpus(
    world: &WorldConfig,
    n_per_class: usize,
    toxic_rate_hi: f64,
    toxic_rate_lo: f64,
    seed: u64,
) -> Result<Vec<LabeledSequence>> {
    world.validate()?;
    if n_per_class == 0 {
        return Err(Error::EmptyCorpus);
    }
    if !(0.0 <= toxic_rate_lo && toxic_rate_lo < toxic_rate_hi && toxic_rate_hi <= 1.0) {
        return Err(Error::Config(format!(
            "rates must satisfy 0 <= lo < hi <= 1, got lo={toxic_rate_lo} hi={toxic_rate_hi}"
        )));
    }
    let world = world.clone();
    let entries = exec::map_indices(2 * n_per_class, move |i| {
        let label = if i < n_per_class { Label::NonToxic } else { Label::Toxic };
        let rate = match label {
            Label::NonToxic => toxic_rate_lo,
            Label::Toxic => toxic_rate_hi,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "corpus-entry", i as u64));
        let seq = sample_sequence(&world, rate, &mut rng);
        LabeledSequence { seq, label }
    });
    Ok(entries)
}

fn sample_sequence(world: &WorldConfig, toxic_rate: f64, rng: &mut ChaCha8Rng) -> Sequence {
    let non_toxic = world.non_toxic_tokens();
    let toxic: Vec<Token> = world.toxic_lexicon.iter().copied().collect();
    let mut tokens = Vec::with_capacity(world.max_len);
    for _ in 0..world.prompt_len {
        tokens.push(non_toxic[rng.gen_range(0..non_toxic.len())]);
    }
    for _ in 0..world.completion_len() {
        let from_lexicon = rng.gen::<f64>() < toxic_rate;
        let pool = if from_lexicon { &toxic } else { &non_toxic };
        tokens.push(pool[rng.gen_range(0..pool.len())]);
    }
    Sequence { tokens, prompt_boundary: world.prompt_len }
}

/// Splits a token sequence into a prompt-only sequence and a completion-only
/// remainder. Concatenating the two token lists reproduces the input.
pub fn split_prompt_target(seq: &Sequence, prompt_len: usize) -> Result<(Sequence, Sequence)> {
    if prompt_len > seq.len() {
        return Err(Error::Split { requested: prompt_len, len: seq.len() });
    }
    let prompt = Sequence::prompt_only(seq.tokens[..prompt_len].to_vec());
    let target = Sequence::completion_only(seq.tokens[prompt_len..].to_vec());
    Ok((prompt, target))
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    label: Label,
    prompt: String,
    completion: String,
}

fn join_tokens(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_tokens(s: &str) -> Result<Vec<Token>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split_whitespace()
        .map(|w| w.parse::<Token>().map_err(|e| Error::Parse(format!("bad token id {w:?}: {e}"))))
        .collect()
}

/// Writes one record per line: label, space-separated prompt ids,
/// space-separated completion ids.
pub fn write_corpus(path: &Path, corpus: &[LabeledSequence]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in corpus {
        let record = CorpusRecord {
            label: entry.label,
            prompt: join_tokens(entry.seq.prompt()),
            completion: join_tokens(entry.seq.completion()),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<LabeledSequence>> {
    let file = std::fs::File::open(path)?;
    let mut corpus = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("corpus line: {e}")))?;
        let mut tokens = parse_tokens(&record.prompt)?;
        let boundary = tokens.len();
        tokens.extend(parse_tokens(&record.completion)?);
        corpus.push(LabeledSequence {
            seq: Sequence { tokens, prompt_boundary: boundary },
            label: record.label,
        });
    }
    Ok(corpus)
}
