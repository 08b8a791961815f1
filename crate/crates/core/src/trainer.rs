//! Supervised fine-tuning, preference alignment, the optimizer and the
//! end-to-end gradient check.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::embed::{EmbedError, EmbeddingProvider};
use crate::losses::{
    build_weights, evaluate, AlignConfig, LogRatios, LossError, LossEval, Method, Strategy, WeightMatrix,
};
use crate::numeric::relative_error;
use crate::policy::{
    logprob_grad, logprob_response, GradBuffer, ModelParams, ModelShape, PolicyError, DEFAULT_INIT_SCALE,
};
use crate::prefdata::{
    make_paired_batches, make_unpaired_batches, DataError, PairedBatch, PreferencePair, UnpairedBatch, UnpairedExample,
};

pub const DEFAULT_LR: f64 = 1e-3;
/// The learning rate used for 7B-scale models; selectable, too small for
/// desk-scale runs.
pub const PAPER_LR: f64 = 5e-7;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Incompatible(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("embedding provider failed: {0}")]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    /// No momentum; `state ← decay·state + (1−decay)·g²`,
    /// `θ ← θ − lr·g / (√state + epsilon)`.
    Rmsprop { decay: f64, epsilon: f64 },
    /// Plain gradient descent `θ ← θ − lr·g`.
    Sgd,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Rmsprop {
            decay: 0.99,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    pub align: AlignConfig,
    pub seed: u64,
    /// Global-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Keep the log-ratios and weights behind every logged loss.
    #[serde(default)]
    pub record_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            optimizer: OptimizerConfig::default(),
            align: AlignConfig::default(),
            seed: 0,
            grad_clip: None,
            record_steps: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "lr must be finite and >= 0 (got {})",
                self.lr
            )));
        }
        if let OptimizerConfig::Rmsprop { decay, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&decay) || !(epsilon >= 0.0) {
                return Err(TrainError::InvalidConfig(format!(
                    "rmsprop needs decay in [0, 1) and epsilon >= 0 (got {decay}, {epsilon})"
                )));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::InvalidConfig(format!("grad_clip must be > 0 (got {c})")));
            }
        }
        self.align.validate()?;
        Ok(())
    }
}

/// One RMSProp update, elementwise.
pub fn rmsprop_step(params: &mut [f64], grads: &[f64], state: &mut [f64], lr: f64, decay: f64, epsilon: f64) {
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        *s = decay * *s + (1.0 - decay) * g * g;
        *p -= lr * g / (s.sqrt() + epsilon);
    }
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

struct Optimizer {
    cfg: OptimizerConfig,
    lr: f64,
    clip: Option<f64>,
    state: Vec<f64>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, num_params: usize) -> Self {
        Self {
            cfg: cfg.optimizer,
            lr: cfg.lr,
            clip: cfg.grad_clip,
            state: vec![0.0; num_params],
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &mut GradBuffer) -> Result<(), PolicyError> {
        if let Some(c) = self.clip {
            let norm = grads.norm();
            if norm > c {
                let scale = c / norm;
                grads.values_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
        let values = params.values_mut()?;
        match self.cfg {
            OptimizerConfig::Rmsprop { decay, epsilon } => {
                rmsprop_step(values, grads.values(), &mut self.state, self.lr, decay, epsilon)
            }
            OptimizerConfig::Sgd => sgd_step(values, grads.values(), self.lr),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Sft,
    Align,
}

/// Mean implicit rewards `β · log-ratio` of the win and lose responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub chosen: f64,
    pub rejected: f64,
}

impl Margins {
    pub fn margin(&self) -> f64 {
        self.chosen - self.rejected
    }
}

/// Everything behind one logged alignment loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub loss: f64,
    pub log_ratios: LogRatios,
    pub weights: Option<WeightMatrix>,
    pub kto_reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub config: TrainConfig,
    pub shape: ModelShape,
    pub steps: usize,
    pub loss_trace: Vec<f64>,
    pub epoch_mean_loss: Vec<f64>,
    pub margins_before: Option<Margins>,
    pub margins_after: Option<Margins>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_records: Vec<StepRecord>,
    /// Not serialized, so reports from identical runs compare equal.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl TrainReport {
    fn new(phase: Phase, config: &TrainConfig, shape: ModelShape) -> Self {
        Self {
            phase,
            config: config.clone(),
            shape,
            steps: 0,
            loss_trace: Vec::new(),
            epoch_mean_loss: Vec::new(),
            margins_before: None,
            margins_after: None,
            warnings: Vec::new(),
            step_records: Vec::new(),
            wall_clock: Duration::ZERO,
        }
    }

    fn push_step(&mut self, loss: f64) -> Result<(), TrainError> {
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step: self.steps, loss });
        }
        self.loss_trace.push(loss);
        self.steps += 1;
        Ok(())
    }

    fn close_epoch(&mut self, first_step: usize) {
        let losses = &self.loss_trace[first_step..];
        self.epoch_mean_loss
            .push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
}

/// SFT from a fresh Gaussian initialization seeded by `cfg.seed`.
pub fn train_sft(
    cfg: &TrainConfig,
    shape: ModelShape,
    pairs: &[PreferencePair],
) -> Result<(ModelParams, TrainReport), TrainError> {
    let params = ModelParams::init(shape, cfg.seed, DEFAULT_INIT_SCALE)?;
    train_sft_from(cfg, params, pairs)
}

/// Minimizes the mean negative log-likelihood of the chosen responses.
pub fn train_sft_from(
    cfg: &TrainConfig,
    mut params: ModelParams,
    pairs: &[PreferencePair],
) -> Result<(ModelParams, TrainReport), TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    let start = Instant::now();
    let mut report = TrainReport::new(Phase::Sft, cfg, params.shape());
    let mut opt = Optimizer::new(cfg, params.shape().num_params());
    let mut grads = GradBuffer::for_params(&params);
    for epoch in 0..cfg.epochs {
        let first = report.steps;
        let batches = make_paired_batches(pairs, cfg.batch_size, epoch_seed(cfg.seed, epoch))?;
        for batch in &batches.batches {
            grads.clear();
            let upstream = -1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for (prompt, chosen) in batch.prompts.iter().zip(&batch.chosen) {
                loss -= logprob_grad(&params, prompt, chosen, upstream, &mut grads)?;
            }
            report.push_step(loss / batch.len() as f64)?;
            opt.step(&mut params, &mut grads)?;
        }
        report.close_epoch(first);
    }
    params.check_finite()?;
    report.wall_clock = start.elapsed();
    Ok((params, report))
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add(epoch as u64)
}

/// Alignment data in either shape.
#[derive(Debug, Clone, PartialEq)]
pub enum AlignData {
    Paired(Vec<PreferencePair>),
    Unpaired(Vec<UnpairedExample>),
}

impl AlignData {
    pub fn len(&self) -> usize {
        match self {
            AlignData::Paired(p) => p.len(),
            AlignData::Unpaired(u) => u.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Win and lose items of one batch. Paired batches have `paired = true` and
/// index-aligned sides.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchView {
    pub win_prompts: Vec<String>,
    pub win_responses: Vec<String>,
    pub lose_prompts: Vec<String>,
    pub lose_responses: Vec<String>,
    pub paired: bool,
}

impl From<&PairedBatch> for BatchView {
    fn from(b: &PairedBatch) -> Self {
        Self {
            win_prompts: b.prompts.clone(),
            win_responses: b.chosen.clone(),
            lose_prompts: b.prompts.clone(),
            lose_responses: b.rejected.clone(),
            paired: true,
        }
    }
}

impl From<&UnpairedBatch> for BatchView {
    fn from(b: &UnpairedBatch) -> Self {
        Self {
            win_prompts: b.win_prompts.clone(),
            win_responses: b.win_responses.clone(),
            lose_prompts: b.lose_prompts.clone(),
            lose_responses: b.lose_responses.clone(),
            paired: false,
        }
    }
}

/// Rejects method/strategy choices that the data shape cannot support.
pub fn check_compatible(cfg: &AlignConfig, paired: bool) -> Result<(), TrainError> {
    if paired {
        return Ok(());
    }
    match (cfg.method, cfg.strategy) {
        (Method::Rpo, Strategy::Diagonal) => {
            Err(TrainError::Incompatible("diagonal weighting needs paired data".into()))
        }
        (Method::Dpo | Method::Ipo, _) => Err(TrainError::Incompatible(format!("{} needs paired data", cfg.method))),
        _ => Ok(()),
    }
}

/// Caches reference log-probabilities, which never change.
pub struct Reference {
    params: ModelParams,
    cache: HashMap<(String, String), f64>,
}

impl Reference {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            params: params.clone_frozen(),
            cache: HashMap::new(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn logprob(&mut self, prompt: &str, response: &str) -> f64 {
        let params = &self.params;
        *self
            .cache
            .entry((prompt.to_string(), response.to_string()))
            .or_insert_with(|| logprob_response(params, prompt, response))
    }
}

/// Contrast weights for a batch; only RPO uses them.
pub fn batch_weights(
    cfg: &AlignConfig,
    batch: &BatchView,
    provider: &mut EmbeddingProvider,
) -> Result<Option<WeightMatrix>, TrainError> {
    if cfg.method != Method::Rpo {
        return Ok(None);
    }
    let (m, n) = (batch.win_prompts.len(), batch.lose_prompts.len());
    let weights = if cfg.strategy == Strategy::Embedding {
        let win = provider.embed(&batch.win_prompts)?;
        let lose = provider.embed(&batch.lose_prompts)?;
        build_weights(cfg, m, n, Some((&win, &lose)))?
    } else {
        build_weights(cfg, m, n, None)?
    };
    Ok(Some(weights))
}

fn log_ratios(policy: &ModelParams, reference: &mut Reference, batch: &BatchView) -> Result<LogRatios, TrainError> {
    let side = |prompts: &[String], responses: &[String], reference: &mut Reference| {
        prompts
            .iter()
            .zip(responses)
            .map(|(p, r)| logprob_response(policy, p, r) - reference.logprob(p, r))
            .collect::<Vec<_>>()
    };
    let wins = side(&batch.win_prompts, &batch.win_responses, reference);
    let loses = side(&batch.lose_prompts, &batch.lose_responses, reference);
    Ok(LogRatios::new(wins, loses)?)
}

/// Loss value and parameter gradient for one batch, plus what produced it.
pub struct BatchGradient {
    pub eval: LossEval,
    pub log_ratios: LogRatios,
    pub weights: Option<WeightMatrix>,
    pub grads: GradBuffer,
}

/// Embeds, runs both models, evaluates the loss and backpropagates it into a
/// fresh gradient buffer.
pub fn batch_gradient(
    policy: &ModelParams,
    reference: &mut Reference,
    cfg: &AlignConfig,
    batch: &BatchView,
    provider: &mut EmbeddingProvider,
) -> Result<BatchGradient, TrainError> {
    check_compatible(cfg, batch.paired)?;
    let weights = batch_weights(cfg, batch, provider)?;
    let log_ratios = log_ratios(policy, reference, batch)?;
    let eval = evaluate(cfg, &log_ratios, weights.as_ref(), None)?;
    let mut grads = GradBuffer::for_params(policy);
    for ((p, r), &g) in batch.win_prompts.iter().zip(&batch.win_responses).zip(&eval.grad_wins) {
        logprob_grad(policy, p, r, g, &mut grads)?;
    }
    for ((p, r), &g) in batch
        .lose_prompts
        .iter()
        .zip(&batch.lose_responses)
        .zip(&eval.grad_loses)
    {
        logprob_grad(policy, p, r, g, &mut grads)?;
    }
    Ok(BatchGradient {
        eval,
        log_ratios,
        weights,
        grads,
    })
}

/// Mean `β · log-ratio` of the win items and of the lose items.
pub fn margins_on(
    policy: &ModelParams,
    reference: &mut Reference,
    data: &AlignData,
    beta: f64,
) -> Result<Margins, TrainError> {
    let (mut win, mut lose) = (Vec::new(), Vec::new());
    match data {
        AlignData::Paired(pairs) => {
            for p in pairs {
                win.push(logprob_response(policy, &p.prompt, &p.chosen) - reference.logprob(&p.prompt, &p.chosen));
                lose.push(logprob_response(policy, &p.prompt, &p.rejected) - reference.logprob(&p.prompt, &p.rejected));
            }
        }
        AlignData::Unpaired(examples) => {
            for e in examples {
                let lr = logprob_response(policy, &e.prompt, &e.response) - reference.logprob(&e.prompt, &e.response);
                if e.desirable { &mut win } else { &mut lose }.push(lr);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(Margins {
        chosen: beta * mean(&win),
        rejected: beta * mean(&lose),
    })
}

fn align_batches(
    cfg: &TrainConfig,
    data: &AlignData,
    epoch: usize,
) -> Result<(Vec<BatchView>, Vec<String>), TrainError> {
    let seed = epoch_seed(cfg.seed, epoch);
    Ok(match data {
        AlignData::Paired(pairs) => {
            let b = make_paired_batches(pairs, cfg.batch_size, seed)?;
            (
                b.batches.iter().map(BatchView::from).collect(),
                b.warnings.iter().map(ToString::to_string).collect(),
            )
        }
        AlignData::Unpaired(examples) => {
            let b = make_unpaired_batches(examples, cfg.batch_size, seed)?;
            (
                b.batches.iter().map(BatchView::from).collect(),
                b.warnings.iter().map(ToString::to_string).collect(),
            )
        }
    })
}

/// Aligns a copy of `sft` against a frozen clone of it.
pub fn train_align(
    cfg: &TrainConfig,
    data: &AlignData,
    sft: &ModelParams,
    provider: &mut EmbeddingProvider,
) -> Result<(ModelParams, TrainReport), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    check_compatible(&cfg.align, matches!(data, AlignData::Paired(_)))?;
    let start = Instant::now();
    let mut reference = Reference::new(sft);
    let mut policy = sft.clone_trainable();
    let mut report = TrainReport::new(Phase::Align, cfg, sft.shape());
    report.margins_before = Some(margins_on(&policy, &mut reference, data, cfg.align.beta)?);
    let mut opt = Optimizer::new(cfg, policy.shape().num_params());
    for epoch in 0..cfg.epochs {
        let first = report.steps;
        let (batches, warnings) = align_batches(cfg, data, epoch)?;
        for w in warnings {
            tracing::warn!(epoch, "{w}");
            report.warnings.push(format!("epoch {epoch}: {w}"));
        }
        for batch in &batches {
            let mut step = batch_gradient(&policy, &mut reference, &cfg.align, batch, provider)?;
            report.push_step(step.eval.loss)?;
            if cfg.record_steps {
                report.step_records.push(StepRecord {
                    loss: step.eval.loss,
                    log_ratios: step.log_ratios,
                    weights: step.weights,
                    kto_reference: step.eval.kto_reference,
                });
            }
            opt.step(&mut policy, &mut step.grads)?;
        }
        report.close_epoch(first);
    }
    policy.check_finite()?;
    report.margins_after = Some(margins_on(&policy, &mut reference, data, cfg.align.beta)?);
    report.wall_clock = start.elapsed();
    Ok((policy, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub method: Method,
    pub strategy: Strategy,
    pub num_params: usize,
    pub loss: f64,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries with magnitude below this are compared on absolute error.
    pub floor: f64,
}

/// Compares the backpropagated gradient of the configured loss against
/// central differences over every parameter.
///
/// Contrast weights and the KTO reference point are held at their values for
/// the unperturbed parameters, matching how the analytic gradient treats
/// them. The relative error of each entry is
/// `|a − n| / max(|a|, |n|, 1e-3 · max_k |a_k|)`.
pub fn gradcheck(
    policy: &ModelParams,
    reference: &ModelParams,
    batch: &PairedBatch,
    cfg: &AlignConfig,
    provider: &mut EmbeddingProvider,
) -> Result<GradReport, TrainError> {
    cfg.validate()?;
    let view = BatchView::from(batch);
    let mut reference = Reference::new(reference);
    let policy = policy.clone_trainable();
    let base = batch_gradient(&policy, &mut reference, cfg, &view, provider)?;
    let kto_ref = base.eval.kto_reference;
    let mut loss_at = |p: &ModelParams| -> Result<f64, TrainError> {
        let lr = log_ratios(p, &mut reference, &view)?;
        Ok(evaluate(cfg, &lr, base.weights.as_ref(), kto_ref)?.loss)
    };
    let analytic = base.grads.values();
    let floor = 1e-3 * analytic.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    let mut probe = policy.clone();
    let mut report = GradReport {
        method: cfg.method,
        strategy: cfg.strategy,
        num_params: analytic.len(),
        loss: base.eval.loss,
        max_rel_error: 0.0,
        worst_index: 0,
        worst_param: String::new(),
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
        floor,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = policy.values()[i];
        probe.values_mut()?[i] = orig + FD_STEP;
        let up = loss_at(&probe)?;
        probe.values_mut()?[i] = orig - FD_STEP;
        let down = loss_at(&probe)?;
        probe.values_mut()?[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let rel = relative_error(a, numeric, floor);
        if rel > report.max_rel_error || i == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.worst_param = policy.shape().describe_index(report.worst_index);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(n: usize) -> Vec<PreferencePair> {
        (0..n)
            .map(|i| {
                PreferencePair::new(
                    format!("prompt {} {}?", i % 3, i),
                    format!("good{}", i % 4),
                    format!("bad{}", i % 5),
                )
                .unwrap()
            })
            .collect()
    }

    fn tiny() -> ModelShape {
        ModelShape::new(3, 4, 6).unwrap()
    }

    #[test]
    fn rmsprop_hand_values() {
        let mut p = [0.0];
        let mut s = [0.0];
        rmsprop_step(&mut p, &[1.0], &mut s, 1.0, 0.99, 0.0);
        assert!((p[0] + 10.0).abs() < 1e-12);

        let mut p = [1.5, -2.0];
        let mut s = [0.0, 0.0];
        rmsprop_step(&mut p, &[0.0, 0.0], &mut s, 0.1, 0.99, 1e-8);
        assert_eq!(p, [1.5, -2.0]);

        let mut p = [0.3, 0.3];
        let mut s = [0.0, 0.0];
        rmsprop_step(&mut p, &[0.7, 0.7], &mut s, 0.05, 0.9, 1e-8);
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn rmsprop_matches_scalar_trace() {
        let (lr, decay, eps) = (0.01, 0.99, 1e-8);
        let grads = [0.5, -0.2, 0.1, 0.9, -1.3, 0.0, 0.4, 0.25, -0.6, 0.05];
        let (mut theta, mut v) = (1.0_f64, 0.0_f64);
        let mut p = [1.0];
        let mut s = [0.0];
        for g in grads {
            v = decay * v + (1.0 - decay) * g * g;
            theta -= lr * g / (v.sqrt() + eps);
            rmsprop_step(&mut p, &[g], &mut s, lr, decay, eps);
            assert!((p[0] - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn sft_step_counts_and_zero_lr() {
        let data = pairs(64);
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        let init = ModelParams::init(tiny(), 0, 0.02).unwrap();
        let (trained, report) = train_sft_from(&cfg, init.clone(), &data).unwrap();
        assert_eq!(report.steps, 1);
        assert_eq!(report.loss_trace.len(), 1);
        assert_eq!(trained.values(), init.values());
    }

    #[test]
    fn align_rejects_bad_combinations() {
        let sft = ModelParams::init(tiny(), 0, 0.02).unwrap();
        let mut provider = EmbeddingProvider::hashed_bow(32).unwrap();
        let unpaired = AlignData::Unpaired(crate::prefdata::decompose_to_unpaired(&pairs(4), 0).unwrap());
        let mut cfg = TrainConfig::default();
        cfg.align.strategy = Strategy::Diagonal;
        assert!(matches!(
            train_align(&cfg, &unpaired, &sft, &mut provider),
            Err(TrainError::Incompatible(_))
        ));
        cfg.align = AlignConfig::paired(Method::Dpo, Strategy::Embedding);
        assert!(train_align(&cfg, &unpaired, &sft, &mut provider).is_err());
        assert!(matches!(
            train_align(&TrainConfig::default(), &AlignData::Paired(vec![]), &sft, &mut provider),
            Err(TrainError::Data(DataError::EmptyDataset))
        ));
    }

    #[test]
    fn zero_model_gradcheck_passes() {
        let zero = ModelParams::zeros(tiny()).unwrap();
        let batch = PairedBatch::from_pairs(&pairs(3));
        let mut provider = EmbeddingProvider::hashed_bow(32).unwrap();
        let cfg = AlignConfig::paired(Method::Rpo, Strategy::Embedding);
        let report = gradcheck(&zero, &zero, &batch, &cfg, &mut provider).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
