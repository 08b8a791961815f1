//! Contrast-matrix preference losses and their baselines.
//!
//! All losses consume per-item log-ratios `log πθ(y|x) − log πref(y|x)`.
//! The relative preference loss compares every win item with every lose item
//! in a mini-batch: with weights `ω` (rows summing to one) the score of cell
//! `(i, j)` is `s_ij = ω_ij · β · (win_i − lose_j)` and the loss is the mean
//! of `−log σ(s_ij)` over all `M × N` cells. The per-prompt normalizer `Z(x)`
//! is treated as shared across prompts and drops out; [`rpo_loss_zshift`]
//! re-inserts explicit per-prompt offsets for sensitivity studies.
//!
//! Gradients are returned with respect to the log-ratios; weights are
//! constants (they depend only on prompt embeddings).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine_distance, EmbedError, Embedding};
use crate::numeric::{sigmoid, softmax_into, softplus};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_TAU_PAIRED: f64 = 0.5;
pub const DEFAULT_TAU_UNPAIRED: f64 = 0.75;
pub const DEFAULT_ALPHA: f64 = 0.8;

/// Row sums of every weight matrix stay within this of one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("{name} must be > 0 (got {value})")]
    NonPositive { name: &'static str, value: f64 },
    #[error("alpha must lie in [0, 1] (got {0})")]
    AlphaRange(f64),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("diagonal weighting needs a square (paired) batch, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("{0} needs paired data with equally many wins and loses, got {1} and {2}")]
    NeedsPairs(Method, usize, usize),
    #[error("batch is empty")]
    Empty,
    #[error("non-finite input")]
    NonFinite,
    #[error("embedding strategy needs prompt embeddings")]
    MissingEmbeddings,
    #[error("invalid weight matrix: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Embed(#[from] EmbedErrorEq),
}

/// Wrapper so [`LossError`] can stay `PartialEq`.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct EmbedErrorEq(pub String);

impl PartialEq for EmbedErrorEq {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl From<EmbedError> for LossError {
    fn from(e: EmbedError) -> Self {
        LossError::Embed(EmbedErrorEq(e.to_string()))
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), LossError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(LossError::NonPositive { name, value })
    }
}

fn shape_err(expected: impl fmt::Display, got: impl fmt::Display) -> LossError {
    LossError::Shape {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rpo,
    Dpo,
    Ipo,
    Kto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Embedding,
    Uniform,
    Diagonal,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),* })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$variant),)*
                    other => Err(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty).to_lowercase(),
                        [$($name),*].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(Method { Rpo => "rpo", Dpo => "dpo", Ipo => "ipo", Kto => "kto" });
keyword_enum!(Strategy { Embedding => "embedding", Uniform => "uniform", Diagonal => "diagonal" });

/// Loss selection and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub method: Method,
    /// Only consulted by [`Method::Rpo`].
    pub strategy: Strategy,
    pub beta: f64,
    pub tau: f64,
    pub alpha: f64,
    pub kto_weight_desirable: f64,
    pub kto_weight_undesirable: f64,
}

impl AlignConfig {
    /// Defaults for paired data (`τ = 0.5`).
    pub fn paired(method: Method, strategy: Strategy) -> Self {
        Self {
            method,
            strategy,
            beta: DEFAULT_BETA,
            tau: DEFAULT_TAU_PAIRED,
            alpha: DEFAULT_ALPHA,
            kto_weight_desirable: 1.0,
            kto_weight_undesirable: 1.0,
        }
    }

    /// Defaults for unpaired data (`τ = 0.75`).
    pub fn unpaired(method: Method, strategy: Strategy) -> Self {
        Self {
            tau: DEFAULT_TAU_UNPAIRED,
            ..Self::paired(method, strategy)
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        positive("beta", self.beta)?;
        positive("tau", self.tau)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::AlphaRange(self.alpha));
        }
        positive("kto_weight_desirable", self.kto_weight_desirable)?;
        positive("kto_weight_undesirable", self.kto_weight_undesirable)
    }
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self::paired(Method::Rpo, Strategy::Embedding)
    }
}

/// Per-item policy-minus-reference log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRatios {
    pub wins: Vec<f64>,
    pub loses: Vec<f64>,
}

impl LogRatios {
    pub fn new(wins: Vec<f64>, loses: Vec<f64>) -> Result<Self, LossError> {
        if wins.iter().chain(&loses).any(|x| !x.is_finite()) {
            return Err(LossError::NonFinite);
        }
        Ok(Self { wins, loses })
    }

    pub fn m(&self) -> usize {
        self.wins.len()
    }

    pub fn n(&self) -> usize {
        self.loses.len()
    }
}

/// Dense row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl Grid {
    fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        Self { rows, cols, entries }
    }

    fn checked(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self, LossError> {
        if entries.len() != rows * cols {
            return Err(shape_err(format!("{} entries", rows * cols), entries.len()));
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Nonnegative contrast weights whose rows each sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightMatrix(Grid);

impl std::ops::Deref for WeightMatrix {
    type Target = Grid;

    fn deref(&self) -> &Grid {
        &self.0
    }
}

impl WeightMatrix {
    /// Validates a caller-supplied matrix.
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self, LossError> {
        if rows == 0 || cols == 0 {
            return Err(LossError::Empty);
        }
        let grid = Grid::checked(rows, cols, entries)?;
        for i in 0..rows {
            let row = grid.row(i);
            if row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(LossError::InvalidWeights(format!(
                    "row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(LossError::InvalidWeights(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self(grid))
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

/// Weighted contrastive scores `s_ij`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreMatrix(Grid);

impl std::ops::Deref for ScoreMatrix {
    type Target = Grid;

    fn deref(&self) -> &Grid {
        &self.0
    }
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self, LossError> {
        if entries.iter().any(|s| !s.is_finite()) {
            return Err(LossError::NonFinite);
        }
        Grid::checked(rows, cols, entries).map(Self)
    }
}

/// Row-wise `softmax(−d_ij / τ)` over a row-major distance matrix.
pub fn weight_from_distances(distances: &[f64], rows: usize, cols: usize, tau: f64) -> Result<WeightMatrix, LossError> {
    positive("tau", tau)?;
    if rows == 0 || cols == 0 {
        return Err(LossError::Empty);
    }
    if distances.len() != rows * cols {
        return Err(shape_err(format!("{} distances", rows * cols), distances.len()));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let mut entries = vec![0.0; rows * cols];
    let mut logits = vec![0.0; cols];
    for i in 0..rows {
        for (l, d) in logits.iter_mut().zip(&distances[i * cols..(i + 1) * cols]) {
            *l = -d / tau;
        }
        softmax_into(&logits, &mut entries[i * cols..(i + 1) * cols]);
    }
    Ok(WeightMatrix(Grid { rows, cols, entries }))
}

/// Embedding-distance weights: prompts closer to the win prompt get more
/// weight within each row.
pub fn weight_embedding(win_embs: &[Embedding], lose_embs: &[Embedding], tau: f64) -> Result<WeightMatrix, LossError> {
    positive("tau", tau)?;
    let (m, n) = (win_embs.len(), lose_embs.len());
    let mut distances = Vec::with_capacity(m * n);
    for w in win_embs {
        for l in lose_embs {
            distances.push(cosine_distance(w, l)?);
        }
    }
    weight_from_distances(&distances, m, n, tau)
}

pub fn weight_uniform(m: usize, n: usize) -> Result<WeightMatrix, LossError> {
    if m == 0 || n == 0 {
        return Err(LossError::Empty);
    }
    let w = 1.0 / n as f64;
    Ok(WeightMatrix(Grid::from_fn(m, n, |_, _| w)))
}

/// `α` on the diagonal, `(1 − α)/(M − 1)` elsewhere. Needs `m == n`.
pub fn weight_diagonal(m: usize, n: usize, alpha: f64) -> Result<WeightMatrix, LossError> {
    if m != n {
        return Err(LossError::NotSquare(m, n));
    }
    if m == 0 {
        return Err(LossError::Empty);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::AlphaRange(alpha));
    }
    if m == 1 {
        return Ok(WeightMatrix(Grid::from_fn(1, 1, |_, _| 1.0)));
    }
    let off = (1.0 - alpha) / (m - 1) as f64;
    Ok(WeightMatrix(Grid::from_fn(
        m,
        m,
        |i, j| if i == j { alpha } else { off },
    )))
}

/// Weights for `cfg.strategy`. Embeddings are only read by the embedding
/// strategy.
pub fn build_weights(
    cfg: &AlignConfig,
    m: usize,
    n: usize,
    embeddings: Option<(&[Embedding], &[Embedding])>,
) -> Result<WeightMatrix, LossError> {
    match cfg.strategy {
        Strategy::Uniform => weight_uniform(m, n),
        Strategy::Diagonal => weight_diagonal(m, n, cfg.alpha),
        Strategy::Embedding => {
            let (w, l) = embeddings.ok_or(LossError::MissingEmbeddings)?;
            if w.len() != m || l.len() != n {
                return Err(shape_err(
                    format!("{m}x{n} embeddings"),
                    format!("{}x{}", w.len(), l.len()),
                ));
            }
            weight_embedding(w, l, cfg.tau)
        }
    }
}

fn check_weights(lr: &LogRatios, w: &WeightMatrix) -> Result<(), LossError> {
    if w.dims() != (lr.m(), lr.n()) {
        return Err(shape_err(
            format!("{}x{} weights", lr.m(), lr.n()),
            format!("{}x{}", w.rows(), w.cols()),
        ));
    }
    Ok(())
}

/// `s_ij = W_ij · β · (wins_i − loses_j)`.
pub fn score_matrix(lr: &LogRatios, w: &WeightMatrix, beta: f64) -> Result<ScoreMatrix, LossError> {
    positive("beta", beta)?;
    check_weights(lr, w)?;
    Ok(ScoreMatrix(Grid::from_fn(lr.m(), lr.n(), |i, j| {
        w.get(i, j) * beta * (lr.wins[i] - lr.loses[j])
    })))
}

/// Mean of `−log σ(s_ij)` over all cells.
pub fn rpo_loss(s: &ScoreMatrix) -> f64 {
    let total: f64 = s.entries().iter().map(|&x| softplus(-x)).sum();
    total / s.entries().len() as f64
}

/// Mean of `log(1 + exp(−s_ij − β W_ij (z_w,i − z_l,j)))`: the loss with
/// explicit per-prompt normalizer offsets. Diagnostic only.
pub fn rpo_loss_zshift(
    s: &ScoreMatrix,
    w: &WeightMatrix,
    z_w: &[f64],
    z_l: &[f64],
    beta: f64,
) -> Result<f64, LossError> {
    if w.dims() != s.dims() || z_w.len() != s.rows() || z_l.len() != s.cols() {
        return Err(shape_err(
            format!("{}x{} scores, weights and offsets", s.rows(), s.cols()),
            format!(
                "{}x{} weights, {} win offsets, {} lose offsets",
                w.rows(),
                w.cols(),
                z_w.len(),
                z_l.len()
            ),
        ));
    }
    let mut total = 0.0;
    for i in 0..s.rows() {
        for j in 0..s.cols() {
            total += softplus(-s.get(i, j) - beta * w.get(i, j) * (z_w[i] - z_l[j]));
        }
    }
    Ok(total / (s.rows() * s.cols()) as f64)
}

/// Gradient of `rpo_loss(score_matrix(lr, w, β))` with respect to the
/// win and lose log-ratios.
pub fn rpo_grad_logratios(lr: &LogRatios, w: &WeightMatrix, beta: f64) -> Result<(Vec<f64>, Vec<f64>), LossError> {
    let s = score_matrix(lr, w, beta)?;
    let scale = beta / (lr.m() * lr.n()) as f64;
    let mut g_w = vec![0.0; lr.m()];
    let mut g_l = vec![0.0; lr.n()];
    for i in 0..lr.m() {
        for j in 0..lr.n() {
            let c = scale * w.get(i, j) * sigmoid(-s.get(i, j));
            g_w[i] -= c;
            g_l[j] += c;
        }
    }
    Ok((g_w, g_l))
}

fn check_paired(method: Method, lr: &LogRatios) -> Result<(), LossError> {
    if lr.m() != lr.n() {
        return Err(LossError::NeedsPairs(method, lr.m(), lr.n()));
    }
    if lr.m() == 0 {
        return Err(LossError::Empty);
    }
    Ok(())
}

pub fn dpo_loss(lr: &LogRatios, beta: f64) -> Result<f64, LossError> {
    check_paired(Method::Dpo, lr)?;
    positive("beta", beta)?;
    let total: f64 = lr
        .wins
        .iter()
        .zip(&lr.loses)
        .map(|(w, l)| softplus(-beta * (w - l)))
        .sum();
    Ok(total / lr.m() as f64)
}

pub fn dpo_grad_logratios(lr: &LogRatios, beta: f64) -> Result<(Vec<f64>, Vec<f64>), LossError> {
    check_paired(Method::Dpo, lr)?;
    positive("beta", beta)?;
    let m = lr.m() as f64;
    let g_w: Vec<f64> = lr
        .wins
        .iter()
        .zip(&lr.loses)
        .map(|(w, l)| -beta / m * sigmoid(-beta * (w - l)))
        .collect();
    let g_l = g_w.iter().map(|g| -g).collect();
    Ok((g_w, g_l))
}

pub fn ipo_loss(lr: &LogRatios, beta: f64) -> Result<f64, LossError> {
    check_paired(Method::Ipo, lr)?;
    positive("beta", beta)?;
    let target = 1.0 / (2.0 * beta);
    let total: f64 = lr
        .wins
        .iter()
        .zip(&lr.loses)
        .map(|(w, l)| (w - l - target).powi(2))
        .sum();
    Ok(total / lr.m() as f64)
}

pub fn ipo_grad_logratios(lr: &LogRatios, beta: f64) -> Result<(Vec<f64>, Vec<f64>), LossError> {
    check_paired(Method::Ipo, lr)?;
    positive("beta", beta)?;
    let target = 1.0 / (2.0 * beta);
    let m = lr.m() as f64;
    let g_w: Vec<f64> = lr
        .wins
        .iter()
        .zip(&lr.loses)
        .map(|(w, l)| 2.0 / m * (w - l - target))
        .collect();
    let g_l = g_w.iter().map(|g| -g).collect();
    Ok((g_w, g_l))
}

/// KTO reference point: the batch-mean log-ratio clamped at zero.
pub fn kto_reference_point(lr: &[f64]) -> Result<f64, LossError> {
    if lr.is_empty() {
        return Err(LossError::Empty);
    }
    Ok((lr.iter().sum::<f64>() / lr.len() as f64).max(0.0))
}

fn kto_check(lr: &[f64], desirable: &[bool], beta: f64, weights: (f64, f64)) -> Result<(), LossError> {
    if lr.is_empty() {
        return Err(LossError::Empty);
    }
    if lr.len() != desirable.len() {
        return Err(shape_err(format!("{} labels", lr.len()), desirable.len()));
    }
    positive("beta", beta)?;
    positive("kto_weight_desirable", weights.0)?;
    positive("kto_weight_undesirable", weights.1)
}

/// KTO loss with an explicit reference point `z_ref`.
pub fn kto_loss_at(
    lr: &[f64],
    desirable: &[bool],
    beta: f64,
    weights: (f64, f64),
    z_ref: f64,
) -> Result<f64, LossError> {
    kto_check(lr, desirable, beta, weights)?;
    let total: f64 = lr
        .iter()
        .zip(desirable)
        .map(|(&x, &d)| {
            let g = beta * x - beta * z_ref;
            if d {
                weights.0 * (1.0 - sigmoid(g))
            } else {
                weights.1 * (1.0 - sigmoid(-g))
            }
        })
        .sum();
    Ok(total / lr.len() as f64)
}

/// KTO loss with the reference point estimated from the batch itself.
pub fn kto_loss(lr: &[f64], desirable: &[bool], beta: f64, weights: (f64, f64)) -> Result<f64, LossError> {
    kto_loss_at(lr, desirable, beta, weights, kto_reference_point(lr)?)
}

/// Gradient of [`kto_loss_at`] with `z_ref` held constant.
pub fn kto_grad_at(
    lr: &[f64],
    desirable: &[bool],
    beta: f64,
    weights: (f64, f64),
    z_ref: f64,
) -> Result<Vec<f64>, LossError> {
    kto_check(lr, desirable, beta, weights)?;
    let n = lr.len() as f64;
    Ok(lr
        .iter()
        .zip(desirable)
        .map(|(&x, &d)| {
            let g = beta * (x - z_ref);
            let slope = sigmoid(g) * sigmoid(-g) * beta / n;
            if d {
                -weights.0 * slope
            } else {
                weights.1 * slope
            }
        })
        .collect())
}

/// A loss value with its gradient with respect to the log-ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEval {
    pub loss: f64,
    pub grad_wins: Vec<f64>,
    pub grad_loses: Vec<f64>,
    /// KTO only: the reference point used (held constant).
    pub kto_reference: Option<f64>,
}

/// Evaluates the configured loss. `weights` is required for RPO and ignored
/// otherwise; for KTO the wins are the desirable items and the loses the
/// undesirable ones. `kto_reference` overrides the batch estimate.
pub fn evaluate(
    cfg: &AlignConfig,
    lr: &LogRatios,
    weights: Option<&WeightMatrix>,
    kto_reference: Option<f64>,
) -> Result<LossEval, LossError> {
    cfg.validate()?;
    match cfg.method {
        Method::Rpo => {
            let w = weights.ok_or(LossError::InvalidWeights("RPO needs a weight matrix".into()))?;
            let s = score_matrix(lr, w, cfg.beta)?;
            let (grad_wins, grad_loses) = rpo_grad_logratios(lr, w, cfg.beta)?;
            Ok(LossEval {
                loss: rpo_loss(&s),
                grad_wins,
                grad_loses,
                kto_reference: None,
            })
        }
        Method::Dpo => {
            let (grad_wins, grad_loses) = dpo_grad_logratios(lr, cfg.beta)?;
            Ok(LossEval {
                loss: dpo_loss(lr, cfg.beta)?,
                grad_wins,
                grad_loses,
                kto_reference: None,
            })
        }
        Method::Ipo => {
            let (grad_wins, grad_loses) = ipo_grad_logratios(lr, cfg.beta)?;
            Ok(LossEval {
                loss: ipo_loss(lr, cfg.beta)?,
                grad_wins,
                grad_loses,
                kto_reference: None,
            })
        }
        Method::Kto => {
            let all: Vec<f64> = lr.wins.iter().chain(&lr.loses).copied().collect();
            let labels: Vec<bool> = std::iter::repeat_n(true, lr.m())
                .chain(std::iter::repeat_n(false, lr.n()))
                .collect();
            let weights = (cfg.kto_weight_desirable, cfg.kto_weight_undesirable);
            let z_ref = match kto_reference {
                Some(z) => z,
                None => kto_reference_point(&all)?,
            };
            let loss = kto_loss_at(&all, &labels, cfg.beta, weights, z_ref)?;
            let mut grad_wins = kto_grad_at(&all, &labels, cfg.beta, weights, z_ref)?;
            let grad_loses = grad_wins.split_off(lr.m());
            Ok(LossEval {
                loss,
                grad_wins,
                grad_loses,
                kto_reference: Some(z_ref),
            })
        }
    }
}
