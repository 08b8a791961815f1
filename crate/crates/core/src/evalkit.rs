//! Win-rate and reward-margin evaluation against a reward judge, and
//! one-axis ablation sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::{fnv1a64, EmbeddingProvider};
use crate::policy::{generate, DecodeConfig, ModelParams};
use crate::prefdata::PreferencePair;
use crate::synth::JudgeOracle;
use crate::trainer::{margins_on, train_align, AlignData, Reference, TrainConfig, TrainError};

/// Default generation budget for evaluation decodes.
pub const DEFAULT_MAX_NEW: usize = 24;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no baseline response for prompt {0:?}")]
    MissingBaseline(String),
    #[error("no prompts to evaluate")]
    NoPrompts,
    #[error("sweep needs at least one value")]
    NoValues,
    #[error("invalid sweep value {value} for {axis}")]
    BadValue { axis: SweepAxis, value: f64 },
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Anything that scores a response to a prompt.
pub trait Judge {
    fn reward(&self, prompt: &str, response: &str) -> f64;
}

impl Judge for JudgeOracle {
    fn reward(&self, prompt: &str, response: &str) -> f64 {
        JudgeOracle::reward(self, prompt, response)
    }
}

impl<F: Fn(&str, &str) -> f64> Judge for F {
    fn reward(&self, prompt: &str, response: &str) -> f64 {
        self(prompt, response)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Win,
    Tie,
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: String,
    pub candidate: String,
    pub baseline: String,
    pub candidate_reward: f64,
    pub baseline_reward: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub win_rate: f64,
    pub tie_rate: f64,
    pub loss_rate: f64,
    pub mean_candidate_reward: f64,
    pub mean_baseline_reward: f64,
    pub records: Vec<PromptRecord>,
}

/// Judges candidate responses (in prompt order) against baselines.
pub fn judge_responses(
    prompts: &[String],
    candidates: &BTreeMap<String, String>,
    baselines: &BTreeMap<String, String>,
    judge: &dyn Judge,
) -> Result<EvalReport, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::NoPrompts);
    }
    let mut records = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let baseline = baselines
            .get(prompt)
            .ok_or_else(|| EvalError::MissingBaseline(prompt.clone()))?;
        let candidate = candidates
            .get(prompt)
            .ok_or_else(|| EvalError::MissingBaseline(prompt.clone()))?;
        let candidate_reward = judge.reward(prompt, candidate);
        let baseline_reward = judge.reward(prompt, baseline);
        let verdict = if candidate_reward > baseline_reward {
            Verdict::Win
        } else if candidate_reward == baseline_reward {
            Verdict::Tie
        } else {
            Verdict::Loss
        };
        records.push(PromptRecord {
            prompt: prompt.clone(),
            candidate: candidate.clone(),
            baseline: baseline.clone(),
            candidate_reward,
            baseline_reward,
            verdict,
        });
    }
    let n = records.len() as f64;
    let count = |v: Verdict| records.iter().filter(|r| r.verdict == v).count() as f64;
    let (wins, ties) = (count(Verdict::Win), count(Verdict::Tie));
    let win_rate = wins / n;
    let tie_rate = ties / n;
    Ok(EvalReport {
        win_rate,
        tie_rate,
        loss_rate: (n - wins - ties) / n,
        mean_candidate_reward: records.iter().map(|r| r.candidate_reward).sum::<f64>() / n,
        mean_baseline_reward: records.iter().map(|r| r.baseline_reward).sum::<f64>() / n,
        records,
    })
}

/// Decodes every prompt. Sampling seeds derive from the prompt text, so the
/// result does not depend on prompt order.
pub fn decode_all(params: &ModelParams, prompts: &[String], cfg: &DecodeConfig) -> BTreeMap<String, String> {
    prompts
        .iter()
        .map(|p| {
            let per_prompt = DecodeConfig {
                seed: cfg.seed ^ fnv1a64(p),
                ..*cfg
            };
            (p.clone(), generate(params, p, &per_prompt))
        })
        .collect()
}

/// Decodes `policy` on `prompts` and judges it against `baselines`.
pub fn win_rate(
    policy: &ModelParams,
    baselines: &BTreeMap<String, String>,
    prompts: &[String],
    judge: &dyn Judge,
    decode: &DecodeConfig,
) -> Result<EvalReport, EvalError> {
    if let Some(missing) = prompts.iter().find(|p| !baselines.contains_key(*p)) {
        return Err(EvalError::MissingBaseline(missing.clone()));
    }
    let candidates = decode_all(policy, prompts, decode);
    judge_responses(prompts, &candidates, baselines, judge)
}

/// Chosen responses of a dataset as a prompt → baseline map. Later
/// duplicates of a prompt are ignored.
pub fn chosen_baselines(pairs: &[PreferencePair]) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for p in pairs {
        map.entry(p.prompt.clone()).or_insert_with(|| p.chosen.clone());
    }
    map
}

/// `(mean β·chosen log-ratio, mean β·rejected log-ratio)`.
pub fn reward_margin(
    policy: &ModelParams,
    reference: &ModelParams,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<(f64, f64), EvalError> {
    if pairs.is_empty() {
        return Err(TrainError::Data(crate::prefdata::DataError::EmptyDataset).into());
    }
    let mut reference = Reference::new(reference);
    let m = margins_on(policy, &mut reference, &AlignData::Paired(pairs.to_vec()), beta)?;
    Ok((m.chosen, m.rejected))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tau,
    Beta,
    BatchSize,
    Temperature,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Tau => "tau",
            SweepAxis::Beta => "beta",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Temperature => "temperature",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "tau" => Ok(SweepAxis::Tau),
            "beta" => Ok(SweepAxis::Beta),
            "batch_size" => Ok(SweepAxis::BatchSize),
            "temperature" => Ok(SweepAxis::Temperature),
            other => Err(format!(
                "unknown sweep axis `{other}` (expected tau, beta, batch_size or temperature)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub win_rate: Option<f64>,
    pub tie_rate: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

/// Everything a sweep cell holds fixed.
pub struct SweepSetup<'a> {
    pub base: TrainConfig,
    pub data: &'a AlignData,
    pub sft: &'a ModelParams,
    pub prompts: &'a [String],
    pub baselines: &'a BTreeMap<String, String>,
    pub judge: &'a dyn Judge,
    pub decode: DecodeConfig,
}

/// One train-and-evaluate run; the building block of [`sweep`].
pub fn run_cell(
    setup: &SweepSetup<'_>,
    cfg: &TrainConfig,
    decode: &DecodeConfig,
    provider: &mut EmbeddingProvider,
) -> Result<(EvalReport, f64), EvalError> {
    let (policy, report) = train_align(cfg, setup.data, setup.sft, provider)?;
    let eval = win_rate(&policy, setup.baselines, setup.prompts, setup.judge, decode)?;
    let final_loss = report.epoch_mean_loss.last().copied().unwrap_or(f64::NAN);
    Ok((eval, final_loss))
}

fn apply(axis: SweepAxis, value: f64, cfg: &mut TrainConfig, decode: &mut DecodeConfig) -> Result<(), EvalError> {
    match axis {
        SweepAxis::Tau => cfg.align.tau = value,
        SweepAxis::Beta => cfg.align.beta = value,
        SweepAxis::BatchSize => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(EvalError::BadValue { axis, value });
            }
            cfg.batch_size = value as usize;
        }
        SweepAxis::Temperature => {
            if !(value >= 0.0) {
                return Err(EvalError::BadValue { axis, value });
            }
            decode.temperature = value;
        }
    }
    Ok(())
}

/// Trains and evaluates once per value, changing only `axis`. A failing cell
/// records its error and the sweep moves on.
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    setup: &SweepSetup<'_>,
    provider: &mut EmbeddingProvider,
) -> Result<Vec<SweepRow>, EvalError> {
    if values.is_empty() {
        return Err(EvalError::NoValues);
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = setup.base.clone();
        let mut decode = setup.decode;
        let outcome = apply(axis, value, &mut cfg, &mut decode).and_then(|_| run_cell(setup, &cfg, &decode, provider));
        let row = match outcome {
            Ok((eval, loss)) => SweepRow {
                axis,
                value,
                win_rate: Some(eval.win_rate),
                tie_rate: Some(eval.tie_rate),
                final_loss: Some(loss),
                error: None,
            },
            Err(e) => {
                tracing::warn!(%axis, value, "sweep cell failed: {e}");
                SweepRow {
                    axis,
                    value,
                    win_rate: None,
                    tie_rate: None,
                    final_loss: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(entries: &[(&str, &str)]) -> BTreeMap<String, String> {
        entries.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn by_length(_: &str, r: &str) -> f64 {
        r.len() as f64
    }

    #[test]
    fn verdict_arithmetic() {
        let prompts: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let cand = map(&[("a", "long"), ("b", "x"), ("c", "mid")]);
        let base = map(&[("a", "s"), ("b", "longer"), ("c", "abc")]);
        let r = judge_responses(&prompts, &cand, &base, &by_length).unwrap();
        assert!((r.win_rate - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.win_rate + r.tie_rate + r.loss_rate - 1.0).abs() < 1e-12);

        let same = judge_responses(&prompts, &base, &base, &by_length).unwrap();
        assert_eq!((same.win_rate, same.tie_rate), (0.0, 1.0));
        let constant = |_: &str, _: &str| 1.0;
        assert_eq!(
            judge_responses(&prompts, &cand, &base, &constant).unwrap().tie_rate,
            1.0
        );

        let swapped = judge_responses(&prompts, &base, &cand, &by_length).unwrap();
        assert_eq!(swapped.loss_rate, r.win_rate);
    }

    #[test]
    fn missing_baseline_names_prompt() {
        let prompts = vec!["p".to_string(), "q".to_string()];
        let base = map(&[("p", "x")]);
        let zero = ModelParams::zeros(crate::policy::ModelShape::new(2, 2, 2).unwrap()).unwrap();
        match win_rate(&zero, &base, &prompts, &by_length, &DecodeConfig::default()) {
            Err(EvalError::MissingBaseline(p)) => assert_eq!(p, "q"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("batch-size".parse::<SweepAxis>().unwrap(), SweepAxis::BatchSize);
        assert!("gamma".parse::<SweepAxis>().is_err());
    }
}
