//! Experiment harness: pipeline stages, staged toxicity metrics, the
//! per-epoch extraction series, the multi-seed variability study, and report
//! emission.
//!
//! A run directory has one subdirectory per stage, each holding a config
//! snapshot and the stage's artifacts, so partial failures are debuggable and
//! every emitted table is regenerable from persisted artifacts alone.

pub mod config;
pub mod report;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    calibrate_threshold, classify_with_reward, kendall_tau, pearson, spearman, MetricReport,
    ScorePairSet,
};
use crate::irl::{
    cosine_similarity, reward_of, IrlConfig, PairedSample, PairwiseExtractor, RewardWeights,
    LinearFinalScorer, WeightsMeta,
};
use crate::oracle::ToxicityOracle;
use crate::policy::{mle_fit, GenerationConfig, PolicyParams};
use crate::ppo::{train_rlhf, RolloutPrompt, TrainLog};
use crate::seeding::{self, offsets};
use crate::world::{
    generate_corpus, FeatureSpec, LabeledSequence, Sequence, Token, WorldConfig,
};
use crate::exec;

pub use config::{load_config, save_config, PipelineConfig};
pub use report::{emit_report, Format, RunReport};

/// Pipeline stage producing a policy whose toxicity is tabulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "SFT")]
    Sft,
    #[serde(rename = "RLHF")]
    Rlhf,
    #[serde(rename = "IRL-RLHF")]
    IrlRlhf,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Sft => write!(f, "SFT"),
            Stage::Rlhf => write!(f, "RLHF"),
            Stage::IrlRlhf => write!(f, "IRL-RLHF"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageToxicity {
    pub stage: Stage,
    /// Fraction of greedy completions classified toxic.
    pub toxicity_ratio: f64,
    /// Mean toxicity score over sampled completions.
    pub mean_toxicity: f64,
    /// Fraction of prompts with at least one toxic sampled completion.
    pub toxicity_probability: f64,
}

/// Staged table plus the classification threshold convention it used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedToxicityReport {
    pub classify_threshold: f64,
    pub rows: Vec<StageToxicity>,
}

/// Per-epoch extraction row: held-out pair accuracy, the training-side
/// metrics, and the correlations of learned vs groundtruth rewards on the
/// held-out completions (None when undefined on constant scores).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub mean_loss: f64,
    pub weight_norm: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
}

/// N_seeds × E_epochs held-out accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityMatrix {
    pub accuracy: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosinePair {
    pub seed_a: u64,
    pub seed_b: u64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityStudy {
    pub matrix: VariabilityMatrix,
    /// Pairwise cosine similarity of final weight vectors across seeds.
    pub cosines: Vec<CosinePair>,
    pub final_accuracies: Vec<f64>,
}

/// Paths of every persisted artifact under a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }
    pub fn corpus(&self) -> PathBuf {
        self.stage_dir("corpus").join("corpus.jsonl")
    }
    pub fn eval_corpus(&self) -> PathBuf {
        self.stage_dir("corpus").join("eval_corpus.jsonl")
    }
    pub fn sft_policy(&self) -> PathBuf {
        self.stage_dir("sft").join("policy.jsonl")
    }
    pub fn rlhf_policy(&self) -> PathBuf {
        self.stage_dir("rlhf").join("policy.jsonl")
    }
    pub fn rlhf_trainlog(&self) -> PathBuf {
        self.stage_dir("rlhf").join("trainlog.jsonl")
    }
    pub fn pairs_train(&self) -> PathBuf {
        self.stage_dir("pairs").join("train.jsonl")
    }
    pub fn pairs_heldout(&self) -> PathBuf {
        self.stage_dir("pairs").join("heldout.jsonl")
    }
    pub fn irl_weights(&self) -> PathBuf {
        self.stage_dir("irl").join("weights.json")
    }
    pub fn irl_epochs(&self) -> PathBuf {
        self.stage_dir("irl").join("epochs.jsonl")
    }
    pub fn eval_metrics(&self) -> PathBuf {
        self.stage_dir("eval").join("metrics.json")
    }
    pub fn irl_rlhf_policy(&self) -> PathBuf {
        self.stage_dir("irl_rlhf").join("policy.jsonl")
    }
    pub fn irl_rlhf_trainlog(&self) -> PathBuf {
        self.stage_dir("irl_rlhf").join("trainlog.jsonl")
    }
    pub fn staged_toxicity(&self) -> PathBuf {
        self.stage_dir("staged").join("toxicity.json")
    }
    pub fn study(&self) -> PathBuf {
        self.stage_dir("study").join("study.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    fn prepare_stage(&self, stage: &str, cfg: &PipelineConfig) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        std::fs::create_dir_all(&dir)?;
        config::save_config(&dir.join("config.toml"), cfg)?;
        Ok(dir)
    }
}

/// Prompt-only sequences for each corpus entry.
pub fn corpus_prompts(corpus: &[LabeledSequence]) -> Vec<Sequence> {
    corpus
        .iter()
        .map(|e| Sequence::prompt_only(e.seq.prompt().to_vec()))
        .collect()
}

/// Rollout prompts carrying the corpus original for pairwise scoring.
pub fn rollout_prompts(corpus: &[LabeledSequence]) -> Vec<RolloutPrompt> {
    corpus
        .iter()
        .map(|e| RolloutPrompt {
            prompt: Sequence::prompt_only(e.seq.prompt().to_vec()),
            original: Some(e.seq.clone()),
        })
        .collect()
}

/// Temperature-0 decoding from both models on shared prompts; the tuned
/// model's output is the preferred completion.
pub fn generate_pairs(
    base: &PolicyParams,
    tuned: &PolicyParams,
    prompts: &[Sequence],
    world: &WorldConfig,
) -> Result<Vec<PairedSample>> {
    let outputs = exec::map_collect(prompts, |prompt| -> Result<PairedSample> {
        let preferred = tuned.greedy_completion(prompt, world)?;
        let rejected = base.greedy_completion(prompt, world)?;
        PairedSample::new(prompt.clone(), preferred, rejected)
    });
    outputs.into_iter().collect()
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    prompt: String,
    preferred_completion: String,
    rejected_completion: String,
}

fn tokens_to_string(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn tokens_from_string(s: &str) -> Result<Vec<Token>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split_whitespace()
        .map(|w| w.parse::<Token>().map_err(|e| Error::Parse(format!("bad token {w:?}: {e}"))))
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[PairedSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pair in pairs {
        let record = PairRecord {
            prompt: tokens_to_string(&pair.prompt.tokens),
            preferred_completion: tokens_to_string(pair.preferred.completion()),
            rejected_completion: tokens_to_string(pair.rejected.completion()),
        };
        writeln!(out, "{}", serde_json::to_string(&record).map_err(|e| Error::Parse(e.to_string()))?)?;
    }
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairedSample>> {
    let file = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("pair line: {e}")))?;
        let prompt_tokens = tokens_from_string(&record.prompt)?;
        let boundary = prompt_tokens.len();
        let build = |completion: &str| -> Result<Sequence> {
            let mut tokens = prompt_tokens.clone();
            tokens.extend(tokens_from_string(completion)?);
            Sequence::new(tokens, boundary)
        };
        pairs.push(PairedSample {
            prompt: Sequence::prompt_only(prompt_tokens.clone()),
            preferred: build(&record.preferred_completion)?,
            rejected: build(&record.rejected_completion)?,
        });
    }
    Ok(pairs)
}

/// Toxicity metrics for one policy: greedy ratio, sampled mean, and the
/// at-least-one-toxic-sample probability per prompt.
pub fn toxicity_stage_metrics(
    stage: Stage,
    policy: &PolicyParams,
    prompts: &[Sequence],
    samples_per_prompt: usize,
    world: &WorldConfig,
    oracle: &ToxicityOracle,
    seed: u64,
) -> Result<StageToxicity> {
    if samples_per_prompt == 0 {
        return Err(Error::Config("samples_per_prompt must be >= 1".into()));
    }
    if prompts.is_empty() {
        return Err(Error::Config("prompts must be nonempty".into()));
    }
    struct PromptStats {
        greedy_toxic: bool,
        tox_sum: f64,
        any_toxic_sample: bool,
    }
    let work: Vec<(usize, &Sequence)> = prompts.iter().enumerate().collect();
    let stats = exec::map_collect(&work, |(i, prompt)| -> Result<PromptStats> {
        let greedy = policy.greedy_completion(prompt, world)?;
        let mut tox_sum = 0.0;
        let mut any_toxic = false;
        for s in 0..samples_per_prompt {
            let cfg = GenerationConfig {
                temperature: 1.0,
                max_new_tokens: world.max_len - prompt.len(),
                seed: seeding::derive(seed, "stage-sample", (i * samples_per_prompt + s) as u64),
            };
            let sample = policy.generate(prompt, &cfg, world)?;
            tox_sum += oracle.tox_score(&sample);
            any_toxic |= oracle.classify_toxic(&sample);
        }
        Ok(PromptStats {
            greedy_toxic: oracle.classify_toxic(&greedy),
            tox_sum,
            any_toxic_sample: any_toxic,
        })
    });
    let n = prompts.len() as f64;
    let mut greedy_toxic = 0usize;
    let mut tox_total = 0.0;
    let mut any_count = 0usize;
    for s in stats {
        let s = s?;
        greedy_toxic += s.greedy_toxic as usize;
        tox_total += s.tox_sum;
        any_count += s.any_toxic_sample as usize;
    }
    Ok(StageToxicity {
        stage,
        toxicity_ratio: greedy_toxic as f64 / n,
        mean_toxicity: tox_total / (n * samples_per_prompt as f64),
        toxicity_probability: any_count as f64 / n,
    })
}

fn correlation_or_none(
    result: std::result::Result<f64, Error>,
) -> Result<Option<f64>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs strategy-B extraction, evaluating held-out pair accuracy and the
/// learned-vs-groundtruth correlations after every epoch.
pub fn epoch_series(
    train_pairs: &[PairedSample],
    heldout: &[PairedSample],
    spec: &FeatureSpec,
    world: &WorldConfig,
    oracle: &ToxicityOracle,
    cfg: &IrlConfig,
) -> Result<(RewardWeights, Vec<EpochRow>)> {
    if heldout.is_empty() {
        return Err(Error::Config("heldout pairs must be nonempty".into()));
    }
    let init = PairwiseExtractor::random_init(spec.dim(world), cfg.seed);
    let mut extractor = PairwiseExtractor::new(train_pairs, spec, world, cfg, init)?;

    // flattened held-out completions with their groundtruth rewards
    let mut heldout_seqs: Vec<&Sequence> = Vec::with_capacity(2 * heldout.len());
    for pair in heldout {
        heldout_seqs.push(&pair.preferred);
        heldout_seqs.push(&pair.rejected);
    }
    let truth: Vec<f64> = heldout_seqs.iter().map(|s| -oracle.tox_score(s)).collect();

    let mut rows = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let metric = extractor.run_epoch();
        let weights = extractor.weights();
        let correct = heldout
            .iter()
            .map(|pair| -> Result<bool> {
                let xw = reward_of(&pair.preferred, weights, spec, world)?;
                let xl = reward_of(&pair.rejected, weights, spec, world)?;
                Ok(xw - xl > 0.0)
            })
            .collect::<Result<Vec<bool>>>()?;
        let accuracy = correct.iter().filter(|&&c| c).count() as f64 / heldout.len() as f64;

        let learned = heldout_seqs
            .iter()
            .map(|s| reward_of(s, weights, spec, world))
            .collect::<Result<Vec<f64>>>()?;
        let scores = ScorePairSet::new(learned, truth.clone())?;
        rows.push(EpochRow {
            epoch: metric.epoch,
            accuracy,
            train_accuracy: metric.accuracy,
            mean_loss: metric.mean_loss,
            weight_norm: metric.weight_norm,
            pearson: correlation_or_none(pearson(&scores))?,
            spearman: correlation_or_none(spearman(&scores))?,
            kendall: correlation_or_none(kendall_tau(&scores))?,
        });
    }
    Ok((extractor.weights().clone(), rows))
}

/// Re-runs extraction with identical data and hyperparameters under distinct
/// derived seeds; rows merge in seed order.
#[allow(clippy::too_many_arguments)]
pub fn variability_study(
    train_pairs: &[PairedSample],
    heldout: &[PairedSample],
    spec: &FeatureSpec,
    world: &WorldConfig,
    oracle: &ToxicityOracle,
    cfg: &IrlConfig,
    n_seeds: usize,
    study_seed: u64,
) -> Result<VariabilityStudy> {
    if n_seeds < 2 {
        return Err(Error::Config("variability study needs n_seeds >= 2".into()));
    }
    let seeds: Vec<u64> = (0..n_seeds)
        .map(|i| seeding::derive(study_seed, "variability", i as u64))
        .collect();
    let runs = exec::map_collect(&seeds, |&seed| {
        let run_cfg = IrlConfig { seed, ..cfg.clone() };
        epoch_series(train_pairs, heldout, spec, world, oracle, &run_cfg)
    });
    let mut matrix = Vec::with_capacity(n_seeds);
    let mut finals: Vec<RewardWeights> = Vec::with_capacity(n_seeds);
    for run in runs {
        let (weights, rows) = run?;
        matrix.push(rows.iter().map(|r| r.accuracy).collect());
        finals.push(weights);
    }
    let mut cosines = Vec::new();
    for i in 0..n_seeds {
        for j in (i + 1)..n_seeds {
            cosines.push(CosinePair {
                seed_a: seeds[i],
                seed_b: seeds[j],
                cosine: cosine_similarity(&finals[i].w, &finals[j].w),
            });
        }
    }
    let final_accuracies = matrix.iter().map(|row: &Vec<f64>| *row.last().unwrap()).collect();
    Ok(VariabilityStudy {
        matrix: VariabilityMatrix { accuracy: matrix, seeds, epochs: cfg.epochs },
        cosines,
        final_accuracies,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn write_epoch_rows(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        writeln!(out, "{}", serde_json::to_string(row).map_err(|e| Error::Parse(e.to_string()))?)?;
    }
    Ok(())
}

pub(crate) fn read_epoch_rows(path: &Path) -> Result<Vec<EpochRow>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("epoch row: {e}")))?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Stage runners. Each persists its artifacts under the run directory and is
// the single code path used by both `run_pipeline` and the stage-wise CLI.
// ---------------------------------------------------------------------------

pub fn stage_corpus(cfg: &PipelineConfig) -> Result<(Vec<LabeledSequence>, Vec<LabeledSequence>)> {
    let run = RunPaths::new(&cfg.output_dir);
    let inner = || -> Result<_> {
        run.prepare_stage("corpus", cfg)?;
        let corpus = generate_corpus(
            &cfg.world,
            cfg.corpus.n_per_class,
            cfg.corpus.toxic_rate_hi,
            cfg.corpus.toxic_rate_lo,
            cfg.seed + offsets::CORPUS,
        )?;
        let eval_corpus = generate_corpus(
            &cfg.world,
            cfg.eval.eval_corpus_per_class,
            cfg.corpus.toxic_rate_hi,
            cfg.corpus.toxic_rate_lo,
            cfg.seed + offsets::EVAL_CORPUS,
        )?;
        crate::world::write_corpus(&run.corpus(), &corpus)?;
        crate::world::write_corpus(&run.eval_corpus(), &eval_corpus)?;
        Ok((corpus, eval_corpus))
    };
    inner().map_err(Error::in_stage("corpus"))
}

pub fn stage_sft(cfg: &PipelineConfig, corpus: &[LabeledSequence]) -> Result<PolicyParams> {
    let run = RunPaths::new(&cfg.output_dir);
    let inner = || -> Result<_> {
        run.prepare_stage("sft", cfg)?;
        let non_toxic: Vec<Sequence> = corpus
            .iter()
            .filter(|e| !e.is_toxic())
            .map(|e| e.seq.clone())
            .collect();
        let policy = mle_fit(
            &non_toxic,
            &cfg.world,
            cfg.sft.context_window,
            cfg.sft.epochs,
            cfg.sft.lr,
        )?;
        crate::policy::write_policy(&run.sft_policy(), &policy)?;
        Ok(policy)
    };
    inner().map_err(Error::in_stage("sft"))
}

pub fn stage_rlhf(
    cfg: &PipelineConfig,
    corpus: &[LabeledSequence],
    sft: &PolicyParams,
) -> Result<(PolicyParams, TrainLog)> {
    let run = RunPaths::new(&cfg.output_dir);
    let inner = || -> Result<_> {
        run.prepare_stage("rlhf", cfg)?;
        let oracle = cfg.oracle();
        let prompts = rollout_prompts(corpus);
        let ppo_cfg = crate::ppo::PpoConfig { seed: cfg.seed + offsets::RLHF, ..cfg.rlhf.clone() };
        let (policy, log) = train_rlhf(sft, sft, &oracle, &prompts, &cfg.world, &ppo_cfg)?;
        crate::policy::write_policy(&run.rlhf_policy(), &policy)?;
        crate::ppo::write_train_log(&run.rlhf_trainlog(), &log)?;
        Ok((policy, log))
    };
    inner().map_err(Error::in_stage("rlhf"))
}

pub fn stage_pairs(
    cfg: &PipelineConfig,
    corpus: &[LabeledSequence],
    sft: &PolicyParams,
    rlhf: &PolicyParams,
) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    let run = RunPaths::new(&cfg.output_dir);
    let inner = || -> Result<_> {
        run.prepare_stage("pairs", cfg)?;
        let prompts = corpus_prompts(corpus);
        let pairs = generate_pairs(sft, rlhf, &prompts, &cfg.world)?;
        let heldout_len = ((pairs.len() as f64) * cfg.eval.heldout_fraction).round() as usize;
        let heldout_len = heldout_len.clamp(1, pairs.len() - 1);
        let split = pairs.len() - heldout_len;
        let (train, heldout) = (pairs[..split].to_vec(), pairs[split..].to_vec());
        write_pairs(&run.pairs_train(), &train)?;
        write_pairs(&run.pairs_heldout(), &heldout)?;
        Ok((train, heldout))
    };
    inner().map_err(Error::in_stage("pairs"))
}

pub fn stage_irl(
    cfg: &PipelineConfig,
    train: &[PairedSample],
    heldout: &[PairedSample],
) -> Result<(RewardWeights, Vec<EpochRow>)> {
    let run = RunPaths::new(&cfg.output_dir);
    let inner = || -> Result<_> {
        run.prepare_stage("irl", cfg)?;
        let oracle = cfg.oracle();
        let irl_cfg = IrlConfig { seed: cfg.seed + offsets::IRL, ..cfg.irl.clone() };
        let (weights, rows) =
            epoch_series(train, heldout, &cfg.features, &cfg.world, &oracle, &irl_cfg)?;
        let meta = WeightsMeta {
            strategy: "pairwise".into(),
            epochs: irl_cfg.epochs,
            seed: irl_cfg.seed,
            final_accuracy: rows.last().map(|r| r.accuracy),
        };
        crate::irl::write_weights(&run.irl_weights(), &weights, &cfg.features, &meta)?;
        write_epoch_rows(&run.irl_epochs(), &rows)?;
        Ok((weights, rows))
    };
    inner().map_err(Error::in_stage("irl"))
}

pub fn stage_eval(
    cfg: &PipelineConfig,
    eval_corpus: &[LabeledSequence],
    weights: &RewardWeights,
) -> Result<MetricReport> {
    let run = RunPaths::new(&cfg.output_dir);
    let inner = || -> Result<_> {
        run.prepare_stage("eval", cfg)?;
        let oracle = cfg.oracle();
        // class-balanced contiguous split: calibration head, test tail
        let mut calibration = Vec::new();
        let mut test = Vec::new();
        for class in [false, true] {
            let members: Vec<&LabeledSequence> =
                eval_corpus.iter().filter(|e| e.is_toxic() == class).collect();
            let cut = ((members.len() as f64) * cfg.eval.calibration_fraction).round() as usize;
            let cut = cut.clamp(1, members.len().saturating_sub(1).max(1));
            for (i, e) in members.iter().enumerate() {
                if i < cut {
                    calibration.push((*e).clone());
                } else {
                    test.push((*e).clone());
                }
            }
        }
        let threshold = calibrate_threshold(&calibration, weights, &cfg.features, &cfg.world)?;
        let report = classify_with_reward(&test, weights, &cfg.features, &cfg.world, threshold)?;
        let learned = test
            .iter()
            .map(|e| reward_of(&e.seq, weights, &cfg.features, &cfg.world))
            .collect::<Result<Vec<f64>>>()?;
        let truth: Vec<f64> = test.iter().map(|e| -oracle.tox_score(&e.seq)).collect();
        let scores = ScorePairSet::new(learned, truth)?;
        let metrics = MetricReport {
            pearson: correlation_or_none(pearson(&scores))?,
            spearman: correlation_or_none(spearman(&scores))?,
            kendall: correlation_or_none(kendall_tau(&scores))?,
            accuracy: report.accuracy,
            f1: report.f1,
            n: test.len(),
            threshold,
        };
        write_json(&run.eval_metrics(), &metrics)?;
        Ok(metrics)
    };
    inner().map_err(Error::in_stage("eval"))
}

pub fn stage_irl_rlhf(
    cfg: &PipelineConfig,
    corpus: &[LabeledSequence],
    sft: &PolicyParams,
    weights: &RewardWeights,
) -> Result<(PolicyParams, TrainLog)> {
    let run = RunPaths::new(&cfg.output_dir);
    let inner = || -> Result<_> {
        run.prepare_stage("irl_rlhf", cfg)?;
        let prompts = rollout_prompts(corpus);
        let scorer = LinearFinalScorer { weights, spec: &cfg.features, world: &cfg.world };
        let ppo_cfg =
            crate::ppo::PpoConfig { seed: cfg.seed + offsets::IRL_RLHF, ..cfg.rlhf.clone() };
        let (policy, log) = train_rlhf(sft, sft, &scorer, &prompts, &cfg.world, &ppo_cfg)?;
        crate::policy::write_policy(&run.irl_rlhf_policy(), &policy)?;
        crate::ppo::write_train_log(&run.irl_rlhf_trainlog(), &log)?;
        Ok((policy, log))
    };
    inner().map_err(Error::in_stage("irl_rlhf"))
}

pub fn stage_staged_toxicity(
    cfg: &PipelineConfig,
    corpus: &[LabeledSequence],
    sft: &PolicyParams,
    rlhf: &PolicyParams,
    irl_rlhf: &PolicyParams,
) -> Result<StagedToxicityReport> {
    let run = RunPaths::new(&cfg.output_dir);
    let inner = || -> Result<_> {
        run.prepare_stage("staged", cfg)?;
        let oracle = cfg.oracle();
        let prompts: Vec<Sequence> = corpus_prompts(corpus)
            .into_iter()
            .take(cfg.metrics.max_prompts)
            .collect();
        let seed = cfg.seed + offsets::STAGED;
        let rows = vec![
            toxicity_stage_metrics(
                Stage::Sft,
                sft,
                &prompts,
                cfg.metrics.samples_per_prompt,
                &cfg.world,
                &oracle,
                seeding::derive(seed, "stage", 0),
            )?,
            toxicity_stage_metrics(
                Stage::Rlhf,
                rlhf,
                &prompts,
                cfg.metrics.samples_per_prompt,
                &cfg.world,
                &oracle,
                seeding::derive(seed, "stage", 1),
            )?,
            toxicity_stage_metrics(
                Stage::IrlRlhf,
                irl_rlhf,
                &prompts,
                cfg.metrics.samples_per_prompt,
                &cfg.world,
                &oracle,
                seeding::derive(seed, "stage", 2),
            )?,
        ];
        let report = StagedToxicityReport {
            classify_threshold: cfg.oracle.classify_threshold,
            rows,
        };
        write_json(&run.staged_toxicity(), &report)?;
        Ok(report)
    };
    inner().map_err(Error::in_stage("staged"))
}

pub fn stage_study(
    cfg: &PipelineConfig,
    train: &[PairedSample],
    heldout: &[PairedSample],
) -> Result<VariabilityStudy> {
    let run = RunPaths::new(&cfg.output_dir);
    let inner = || -> Result<_> {
        run.prepare_stage("study", cfg)?;
        let oracle = cfg.oracle();
        let study = variability_study(
            train,
            heldout,
            &cfg.features,
            &cfg.world,
            &oracle,
            &cfg.irl,
            cfg.study.n_seeds,
            cfg.seed + offsets::STUDY,
        )?;
        write_json(&run.study(), &study)?;
        Ok(study)
    };
    inner().map_err(Error::in_stage("study"))
}

pub(crate) fn load_study(run: &RunPaths) -> Result<VariabilityStudy> {
    read_json(&run.study())
}

pub(crate) fn load_staged(run: &RunPaths) -> Result<StagedToxicityReport> {
    read_json(&run.staged_toxicity())
}

/// Runs the full pipeline: corpus → SFT → RLHF → pairs → extraction →
/// evaluation → IRL-RLHF → staged toxicity, persisting every stage artifact
/// and the consolidated report. Re-running with the same config reproduces
/// the report bytes.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let run = RunPaths::new(&cfg.output_dir);
    config::save_config(&run.config(), cfg)?;

    let (corpus, eval_corpus) = stage_corpus(cfg)?;
    let sft = stage_sft(cfg, &corpus)?;
    let (rlhf, rlhf_log) = stage_rlhf(cfg, &corpus, &sft)?;
    let (train, heldout) = stage_pairs(cfg, &corpus, &sft, &rlhf)?;
    let (weights, rows) = stage_irl(cfg, &train, &heldout)?;
    let metrics = stage_eval(cfg, &eval_corpus, &weights)?;
    let (irl_rlhf, irl_rlhf_log) = stage_irl_rlhf(cfg, &corpus, &sft, &weights)?;
    let staged = stage_staged_toxicity(cfg, &corpus, &sft, &rlhf, &irl_rlhf)?;

    let report = report::build_report(
        cfg,
        &corpus,
        &sft,
        &rlhf_log,
        (train.len(), heldout.len()),
        &weights,
        &rows,
        &metrics,
        &irl_rlhf_log,
        &staged,
    )?;
    report::write_report(&run.report(), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::constant_policy;

    fn small_config(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 11;
        cfg.output_dir = dir.to_path_buf();
        cfg.corpus.n_per_class = 40;
        cfg.sft.epochs = 15;
        cfg.rlhf.total_steps = 40;
        cfg.irl.epochs = 8;
        cfg.eval.eval_corpus_per_class = 30;
        cfg.metrics.samples_per_prompt = 5;
        cfg.metrics.max_prompts = 40;
        cfg.study.n_seeds = 2;
        cfg
    }

    #[test]
    fn stage_metrics_extremes() {
        let world = WorldConfig::default();
        let oracle = ToxicityOracle::new(crate::oracle::OracleConfig::default());
        let prompts = vec![Sequence::prompt_only(vec![0, 1, 2, 3]); 4];

        let clean = constant_policy(2, &world, 0);
        let m = toxicity_stage_metrics(Stage::Sft, &clean, &prompts, 4, &world, &oracle, 1).unwrap();
        assert_eq!((m.toxicity_ratio, m.mean_toxicity, m.toxicity_probability), (0.0, 0.0, 0.0));

        let toxic = constant_policy(2, &world, 9);
        let m = toxicity_stage_metrics(Stage::Rlhf, &toxic, &prompts, 4, &world, &oracle, 1).unwrap();
        assert_eq!((m.toxicity_ratio, m.mean_toxicity, m.toxicity_probability), (1.0, 1.0, 1.0));
    }

    #[test]
    fn pairs_roundtrip() {
        let world = WorldConfig::default();
        let corpus = generate_corpus(&world, 10, 0.8, 0.35, 3).unwrap();
        let base = constant_policy(2, &world, 9);
        let tuned = constant_policy(2, &world, 0);
        let prompts = corpus_prompts(&corpus);
        let pairs = generate_pairs(&base, &tuned, &prompts, &world).unwrap();
        assert_eq!(pairs.len(), 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }

    #[test]
    fn epoch_series_has_one_row_per_epoch() {
        let world = WorldConfig::default();
        let oracle = ToxicityOracle::new(crate::oracle::OracleConfig::default());
        let corpus = generate_corpus(&world, 30, 0.8, 0.35, 5).unwrap();
        let base = constant_policy(2, &world, 9);
        let tuned = constant_policy(2, &world, 0);
        let prompts = corpus_prompts(&corpus);
        let pairs = generate_pairs(&base, &tuned, &prompts, &world).unwrap();
        let (train, heldout) = pairs.split_at(48);
        let spec = FeatureSpec::default();

        let cfg = IrlConfig { epochs: 1, ..IrlConfig::default() };
        let (_, rows) = epoch_series(train, heldout, &spec, &world, &oracle, &cfg).unwrap();
        assert_eq!(rows.len(), 1);

        let cfg = IrlConfig { epochs: 6, seed: 2, ..IrlConfig::default() };
        let (_, rows) = epoch_series(train, heldout, &spec, &world, &oracle, &cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    }

    #[test]
    fn full_pipeline_produces_all_stage_rows_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let report_a = run_pipeline(&cfg).unwrap();
        assert_eq!(report_a.staged_toxicity.rows.len(), 3);
        let bytes_a = std::fs::read(RunPaths::new(&cfg.output_dir).report()).unwrap();
        let _ = run_pipeline(&cfg).unwrap();
        let bytes_b = std::fs::read(RunPaths::new(&cfg.output_dir).report()).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn variability_rows_match_isolated_reruns() {
        let world = WorldConfig::default();
        let oracle = ToxicityOracle::new(crate::oracle::OracleConfig::default());
        let corpus = generate_corpus(&world, 30, 0.8, 0.35, 5).unwrap();
        let sft_seqs: Vec<Sequence> = corpus.iter().filter(|e| !e.is_toxic()).map(|e| e.seq.clone()).collect();
        let base = mle_fit(&sft_seqs, &world, 2, 10, 0.2).unwrap();
        let tuned = constant_policy(2, &world, 0);
        let prompts = corpus_prompts(&corpus);
        let pairs = generate_pairs(&base, &tuned, &prompts, &world).unwrap();
        let (train, heldout) = pairs.split_at(48);
        let spec = FeatureSpec::default();
        let cfg = IrlConfig { epochs: 5, ..IrlConfig::default() };

        let study = variability_study(train, heldout, &spec, &world, &oracle, &cfg, 3, 99).unwrap();
        assert_eq!(study.matrix.accuracy.len(), 3);
        assert_eq!(study.matrix.accuracy[0].len(), 5);
        assert_eq!(study.cosines.len(), 3);

        // row 1 reproduces in isolation from its derived seed
        let derived = seeding::derive(99, "variability", 1);
        let solo_cfg = IrlConfig { seed: derived, ..cfg.clone() };
        let (_, rows) = epoch_series(train, heldout, &spec, &world, &oracle, &solo_cfg).unwrap();
        let solo: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        assert_eq!(study.matrix.accuracy[1], solo);
    }
}
