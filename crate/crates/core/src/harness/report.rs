//! Consolidated run report and figure/table emission.
//!
//! `emit_report` regenerates everything from persisted stage artifacts; it
//! never recomputes training. Four outputs: the staged toxicity table, the
//! per-epoch extraction series, the merged training curves, and the
//! variability heatmap.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::irl::RewardWeights;
use crate::policy::PolicyParams;
use crate::ppo::{read_train_log, TrainLog};
use crate::world::{extract_features, LabeledSequence, FeatureSpec, WorldConfig};

use super::config::PipelineConfig;
use super::{EpochRow, RunPaths, StagedToxicityReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub n_toxic: usize,
    pub n_non_toxic: usize,
    pub mean_lexicon_fraction_toxic: f64,
    pub mean_lexicon_fraction_non_toxic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSummary {
    pub contexts: usize,
    pub train_log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_reward_mean: f64,
    pub final_returns_mean: f64,
    /// Sampled estimator noise is clipped at zero here; the raw per-step
    /// values live in the train log.
    pub final_kl: f64,
    pub mean_reward_final_tenth: f64,
}

impl TrainSummary {
    pub fn from_log(log: &TrainLog) -> Self {
        let last = log.records.last();
        let window = (log.records.len() / 10).max(1);
        let tail = &log.records[log.records.len().saturating_sub(window)..];
        Self {
            steps: log.records.len(),
            final_reward_mean: last.map_or(0.0, |r| r.reward_mean),
            final_returns_mean: last.map_or(0.0, |r| r.returns_mean),
            final_kl: last.map_or(0.0, |r| r.kl_estimate.max(0.0)),
            mean_reward_final_tenth: tail.iter().map(|r| r.reward_mean).sum::<f64>()
                / tail.len().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsSummary {
    pub n_train: usize,
    pub n_heldout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlSummary {
    pub epochs: usize,
    pub final_heldout_accuracy: f64,
    pub final_train_accuracy: f64,
    pub weight_norm: f64,
}

/// Per-stage metrics record for a whole run; a pure function of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub seed: u64,
    pub corpus: CorpusSummary,
    pub sft: SftSummary,
    pub rlhf: TrainSummary,
    pub pairs: PairsSummary,
    pub irl: IrlSummary,
    pub eval: MetricReport,
    pub irl_rlhf: TrainSummary,
    pub staged_toxicity: StagedToxicityReport,
}

const REPORT_VERSION: u32 = 1;

fn mean_lexicon_fraction(
    corpus: &[LabeledSequence],
    toxic: bool,
    spec: &FeatureSpec,
    world: &WorldConfig,
) -> Result<f64> {
    let lex_spec = FeatureSpec {
        unigram: false,
        bigram: false,
        lexicon_fraction: true,
        normalize_by_length: spec.normalize_by_length,
    };
    let members: Vec<&LabeledSequence> = corpus.iter().filter(|e| e.is_toxic() == toxic).collect();
    let mut total = 0.0;
    for e in &members {
        total += extract_features(&e.seq, &lex_spec, world)?[0];
    }
    Ok(total / members.len().max(1) as f64)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn build_report(
    cfg: &PipelineConfig,
    corpus: &[LabeledSequence],
    sft: &PolicyParams,
    rlhf_log: &TrainLog,
    pair_counts: (usize, usize),
    weights: &RewardWeights,
    rows: &[EpochRow],
    metrics: &MetricReport,
    irl_rlhf_log: &TrainLog,
    staged: &StagedToxicityReport,
) -> Result<RunReport> {
    let non_toxic: Vec<crate::world::Sequence> = corpus
        .iter()
        .filter(|e| !e.is_toxic())
        .map(|e| e.seq.clone())
        .collect();
    let last_row = rows.last();
    Ok(RunReport {
        version: REPORT_VERSION,
        seed: cfg.seed,
        corpus: CorpusSummary {
            n_toxic: corpus.iter().filter(|e| e.is_toxic()).count(),
            n_non_toxic: corpus.iter().filter(|e| !e.is_toxic()).count(),
            mean_lexicon_fraction_toxic: mean_lexicon_fraction(corpus, true, &cfg.features, &cfg.world)?,
            mean_lexicon_fraction_non_toxic: mean_lexicon_fraction(corpus, false, &cfg.features, &cfg.world)?,
        },
        sft: SftSummary {
            contexts: sft.context_count(),
            train_log_likelihood: crate::policy::corpus_log_likelihood(sft, &non_toxic),
        },
        rlhf: TrainSummary::from_log(rlhf_log),
        pairs: PairsSummary { n_train: pair_counts.0, n_heldout: pair_counts.1 },
        irl: IrlSummary {
            epochs: rows.len(),
            final_heldout_accuracy: last_row.map_or(0.0, |r| r.accuracy),
            final_train_accuracy: last_row.map_or(0.0, |r| r.train_accuracy),
            weight_norm: weights.norm(),
        },
        eval: metrics.clone(),
        irl_rlhf: TrainSummary::from_log(irl_rlhf_log),
        staged_toxicity: staged.clone(),
    })
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("report: {e}")))
}

/// Output layout for emitted tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Table,
    Csv,
    JsonLines,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            "json-lines" | "jsonl" => Ok(Format::JsonLines),
            other => Err(Error::Config(format!(
                "unknown format {other:?} (expected table, csv, or json-lines)"
            ))),
        }
    }
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Table => "txt",
            Format::Csv => "csv",
            Format::JsonLines => "jsonl",
        }
    }
}

/// Rows of (column name, formatted cells).
struct TableData {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn render(table: &TableData, format: Format) -> String {
    match format {
        Format::Csv => {
            let mut out = table.columns.join(",");
            out.push('\n');
            for row in &table.rows {
                out.push_str(&row.join(","));
                out.push('\n');
            }
            out
        }
        Format::Table => {
            let mut widths: Vec<usize> = table.columns.iter().map(|c| c.len()).collect();
            for row in &table.rows {
                for (w, cell) in widths.iter_mut().zip(row) {
                    *w = (*w).max(cell.len());
                }
            }
            let mut out = String::new();
            let fmt_row = |cells: &[String], widths: &[usize]| {
                cells
                    .iter()
                    .zip(widths)
                    .map(|(c, w)| format!("{c:>w$}", w = w))
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            out.push_str(&fmt_row(&table.columns, &widths));
            out.push('\n');
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
            for row in &table.rows {
                out.push_str(&fmt_row(row, &widths));
                out.push('\n');
            }
            out
        }
        Format::JsonLines => {
            let mut out = String::new();
            for row in &table.rows {
                let obj: serde_json::Map<String, serde_json::Value> = table
                    .columns
                    .iter()
                    .zip(row)
                    .map(|(c, v)| {
                        let value = v
                            .parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .map(serde_json::Value::from)
                            .unwrap_or_else(|| serde_json::Value::from(v.clone()));
                        (c.clone(), value)
                    })
                    .collect();
                out.push_str(&serde_json::Value::Object(obj).to_string());
                out.push('\n');
            }
            out
        }
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_else(|| "".into())
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingStage(stage.into()));
    }
    Ok(())
}

/// Writes the four plot-ready files from the artifacts under `run_dir`.
/// Returns the written paths. A missing artifact names its stage.
pub fn emit_report(run_dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    let run = RunPaths::new(run_dir);
    require(&run.staged_toxicity(), "staged")?;
    require(&run.irl_epochs(), "irl")?;
    require(&run.rlhf_trainlog(), "rlhf")?;
    require(&run.irl_rlhf_trainlog(), "irl_rlhf")?;
    require(&run.study(), "study")?;

    let out_dir = run.report_dir();
    std::fs::create_dir_all(&out_dir)?;
    let mut written = Vec::new();
    let ext = format.extension();

    let staged = super::load_staged(&run)?;
    let staged_table = TableData {
        columns: vec![
            "stage".into(),
            "toxicity_ratio".into(),
            "mean_toxicity".into(),
            "toxicity_probability".into(),
            "classify_threshold".into(),
        ],
        rows: staged
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.stage.to_string(),
                    fmt_f64(r.toxicity_ratio),
                    fmt_f64(r.mean_toxicity),
                    fmt_f64(r.toxicity_probability),
                    fmt_f64(staged.classify_threshold),
                ]
            })
            .collect(),
    };
    let path = out_dir.join(format!("staged_toxicity.{ext}"));
    std::fs::write(&path, render(&staged_table, format))?;
    written.push(path);

    let rows = super::read_epoch_rows(&run.irl_epochs())?;
    let epoch_table = TableData {
        columns: vec![
            "epoch".into(),
            "accuracy".into(),
            "pearson".into(),
            "spearman".into(),
            "kendall".into(),
            "train_accuracy".into(),
            "mean_loss".into(),
            "weight_norm".into(),
        ],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.epoch.to_string(),
                    fmt_f64(r.accuracy),
                    fmt_opt(r.pearson),
                    fmt_opt(r.spearman),
                    fmt_opt(r.kendall),
                    fmt_f64(r.train_accuracy),
                    fmt_f64(r.mean_loss),
                    fmt_f64(r.weight_norm),
                ]
            })
            .collect(),
    };
    let path = out_dir.join(format!("epoch_series.{ext}"));
    std::fs::write(&path, render(&epoch_table, format))?;
    written.push(path);

    let mut curve_rows = Vec::new();
    for (model, log_path) in [("original", run.rlhf_trainlog()), ("irl-rlhf", run.irl_rlhf_trainlog())] {
        let log = read_train_log(&log_path)?;
        for r in &log.records {
            curve_rows.push(vec![
                model.to_string(),
                r.step.to_string(),
                fmt_f64(r.total_loss),
                fmt_f64(r.policy_loss),
                fmt_f64(r.value_loss),
                fmt_f64(r.returns_mean),
                fmt_f64(r.returns_std),
                fmt_f64(r.reward_mean),
                fmt_f64(r.kl_estimate),
            ]);
        }
    }
    let curves_table = TableData {
        columns: vec![
            "model".into(),
            "step".into(),
            "total_loss".into(),
            "policy_loss".into(),
            "value_loss".into(),
            "returns_mean".into(),
            "returns_std".into(),
            "reward_mean".into(),
            "kl_estimate".into(),
        ],
        rows: curve_rows,
    };
    let path = out_dir.join(format!("training_curves.{ext}"));
    std::fs::write(&path, render(&curves_table, format))?;
    written.push(path);

    // heatmap: first row is the epoch header, first column the seed id
    let study = super::load_study(&run)?;
    let mut columns = vec!["seed".to_string()];
    columns.extend((1..=study.matrix.epochs).map(|e| e.to_string()));
    let heatmap = TableData {
        columns,
        rows: study
            .matrix
            .seeds
            .iter()
            .zip(&study.matrix.accuracy)
            .map(|(seed, row)| {
                let mut cells = vec![seed.to_string()];
                cells.extend(row.iter().map(|&a| fmt_f64(a)));
                cells
            })
            .collect(),
    };
    let path = out_dir.join(format!("variability_heatmap.{ext}"));
    std::fs::write(&path, render(&heatmap, format))?;
    written.push(path);

    Ok(written)
}
