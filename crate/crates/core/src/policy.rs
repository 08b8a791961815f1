//! A byte-level windowed MLP language model with exact gradients.
//!
//! Each next-token distribution looks at the previous `k` tokens (left-padded
//! with BOS), concatenates their `d`-dimensional embeddings, applies an
//! affine map to `h` tanh units and a second affine map to 258 logits.
//!
//! Parameters live in one flat `Vec<f64>` in the order
//! `E [258×d] | W1 [(k·d)×h] | b1 [h] | W2 [h×258] | b2 [258]`, all row-major.
//! The same order is used by [`GradBuffer`] and by checkpoints.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::RngExt;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numeric::logsumexp;
use crate::rng::{self, Pcg32, Stream};

pub const VOCAB: usize = 258;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const MAX_PROMPT_BYTES: usize = 256;
pub const MAX_TOTAL_BYTES: usize = 512;
pub const DEFAULT_INIT_SCALE: f64 = 0.02;

const MAGIC: &[u8; 8] = b"RPOLM\0\0\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid model shape: {0}")]
    InvalidShape(String),
    #[error("parameters are frozen")]
    Frozen,
    #[error("gradient buffer shape {got:?} does not match model shape {expected:?}")]
    ShapeMismatch { expected: ModelShape, got: ModelShape },
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

/// Byte tokenizer: ids 0..=255 are raw bytes, plus BOS and EOS.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Raw bytes for the byte ids in `ids`; BOS and EOS are skipped.
    pub fn decode_bytes(ids: &[u32]) -> Vec<u8> {
        ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
    }

    /// Like [`Tokenizer::decode_bytes`], replacing invalid UTF-8.
    pub fn decode(ids: &[u32]) -> String {
        String::from_utf8_lossy(&Self::decode_bytes(ids)).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub window: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            window: 8,
            embed_dim: 16,
            hidden: 64,
        }
    }
}

/// Offsets of each parameter block in the flat layout.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl ModelShape {
    pub fn new(window: usize, embed_dim: usize, hidden: usize) -> Result<Self, PolicyError> {
        let shape = Self {
            window,
            embed_dim,
            hidden,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.window == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(PolicyError::InvalidShape(format!(
                "k, d and h must be >= 1 (got {}, {}, {})",
                self.window, self.embed_dim, self.hidden
            )));
        }
        if self.window > 4096 || self.embed_dim > 4096 || self.hidden > 4096 {
            return Err(PolicyError::InvalidShape(
                "dimensions above 4096 are not supported".into(),
            ));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let (k, d, h) = (self.window, self.embed_dim, self.hidden);
        let w1 = VOCAB * d;
        let b1 = w1 + k * d * h;
        let w2 = b1 + h;
        let b2 = w2 + h * VOCAB;
        Layout {
            w1,
            b1,
            w2,
            b2,
            total: b2 + VOCAB,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }

    /// Which block a flat index falls into, for diagnostics.
    pub fn describe_index(&self, index: usize) -> String {
        let l = self.layout();
        let (name, base, cols) = if index < l.w1 {
            ("embedding", 0, self.embed_dim)
        } else if index < l.b1 {
            ("hidden.weight", l.w1, self.hidden)
        } else if index < l.w2 {
            ("hidden.bias", l.b1, self.hidden)
        } else if index < l.b2 {
            ("output.weight", l.w2, VOCAB)
        } else {
            ("output.bias", l.b2, VOCAB)
        };
        let off = index - base;
        format!("{name}[{}, {}]", off / cols, off % cols)
    }
}

/// Model parameters. A frozen copy refuses mutation and gradient work.
#[derive(Clone, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    values: Vec<f64>,
    frozen: bool,
}

impl fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelParams")
            .field("shape", &self.shape)
            .field("num_params", &self.values.len())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Result<Self, PolicyError> {
        shape.validate()?;
        Ok(Self {
            shape,
            values: vec![0.0; shape.num_params()],
            frozen: false,
        })
    }

    /// Gaussian weights with standard deviation `scale`, zero biases.
    pub fn init(shape: ModelShape, seed: u64, scale: f64) -> Result<Self, PolicyError> {
        let mut params = Self::zeros(shape)?;
        let normal =
            Normal::new(0.0, scale).map_err(|e| PolicyError::InvalidShape(format!("init scale {scale}: {e}")))?;
        let mut rng = rng::seeded(seed, Stream::Init);
        let l = shape.layout();
        for range in [0..l.b1, l.w2..l.b2] {
            for v in &mut params.values[range] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(params)
    }

    pub fn from_values(shape: ModelShape, values: Vec<f64>) -> Result<Self, PolicyError> {
        shape.validate()?;
        if values.len() != shape.num_params() {
            return Err(PolicyError::InvalidShape(format!(
                "expected {} parameters, got {}",
                shape.num_params(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok(Self {
            shape,
            values,
            frozen: false,
        })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> Result<&mut [f64], PolicyError> {
        if self.frozen {
            return Err(PolicyError::Frozen);
        }
        Ok(&mut self.values)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Deep copy that rejects mutation and gradient accumulation.
    pub fn clone_frozen(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    /// Deep copy that can be trained, regardless of `self`'s flag.
    pub fn clone_trainable(&self) -> Self {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    pub fn check_finite(&self) -> Result<(), PolicyError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(PolicyError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for dim in [self.shape.window, self.shape.embed_dim, self.shape.hidden] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let bad = |msg: &str| PolicyError::Checkpoint(msg.to_string());
        if bytes.len() < 36 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported format version {version}")));
        }
        let shape = ModelShape::new(u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize)?;
        let count = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        if count != shape.num_params() {
            return Err(PolicyError::Checkpoint(format!(
                "parameter count {count} does not match shape ({})",
                shape.num_params()
            )));
        }
        let body = &bytes[32..];
        if body.len() != 8 * count {
            return Err(PolicyError::Checkpoint(format!(
                "expected {} bytes of parameters, found {}",
                8 * count,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_values(shape, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let path = path.as_ref();
        let io = |source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = std::fs::File::create(path).map_err(io)?;
        file.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| PolicyError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }
}

/// Accumulated gradient in the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    shape: ModelShape,
    values: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.num_params()],
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        Self::zeros(params.shape)
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) -> Result<(), PolicyError> {
        if other.shape != self.shape {
            return Err(PolicyError::ShapeMismatch {
                expected: self.shape,
                got: other.shape,
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A prompt/response pair after applying the length caps.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<u32>,
    pub response_start: usize,
    pub truncated: bool,
}

/// Encodes `prompt` then `response`. Prompts longer than
/// [`MAX_PROMPT_BYTES`] keep their last bytes; responses are then cut so the
/// total stays within [`MAX_TOTAL_BYTES`].
pub fn encode_pair(prompt: &str, response: &str) -> Sequence {
    let mut p = Tokenizer::encode(prompt);
    let mut r = Tokenizer::encode(response);
    let mut truncated = false;
    if p.len() > MAX_PROMPT_BYTES {
        p.drain(..p.len() - MAX_PROMPT_BYTES);
        truncated = true;
    }
    if p.len() + r.len() > MAX_TOTAL_BYTES {
        r.truncate(MAX_TOTAL_BYTES - p.len());
        truncated = true;
    }
    if truncated {
        tracing::warn!(
            prompt_bytes = prompt.len(),
            response_bytes = response.len(),
            "input exceeds length caps and was truncated"
        );
    }
    let response_start = p.len();
    p.extend(r);
    Sequence {
        tokens: p,
        response_start,
        truncated,
    }
}

/// Per-position activations reused across positions.
struct Scratch {
    ctx: Vec<u32>,
    x: Vec<f64>,
    z: Vec<f64>,
    logits: Vec<f64>,
    dlogits: Vec<f64>,
    dz: Vec<f64>,
}

impl Scratch {
    fn new(shape: ModelShape) -> Self {
        Self {
            ctx: vec![BOS; shape.window],
            x: vec![0.0; shape.window * shape.embed_dim],
            z: vec![0.0; shape.hidden],
            logits: vec![0.0; VOCAB],
            dlogits: vec![0.0; VOCAB],
            dz: vec![0.0; shape.hidden],
        }
    }

    /// Context for predicting `tokens[pos]`: the previous `k` tokens.
    fn set_context(&mut self, tokens: &[u32], pos: usize) {
        let k = self.ctx.len();
        for (slot, c) in self.ctx.iter_mut().enumerate() {
            let back = k - slot;
            *c = if back <= pos { tokens[pos - back] } else { BOS };
        }
    }
}

impl ModelParams {
    /// Fills `s.logits` with the log-softmax for the context in `s.ctx`.
    fn forward(&self, s: &mut Scratch) {
        let ModelShape {
            embed_dim: d,
            hidden: h,
            ..
        } = self.shape;
        let l = self.shape.layout();
        let p = &self.values;
        for (t, &tok) in s.ctx.iter().enumerate() {
            let row = tok as usize * d;
            s.x[t * d..(t + 1) * d].copy_from_slice(&p[row..row + d]);
        }
        s.z.copy_from_slice(&p[l.b1..l.b1 + h]);
        for (r, &xr) in s.x.iter().enumerate() {
            let w = &p[l.w1 + r * h..l.w1 + (r + 1) * h];
            for (a, &wc) in s.z.iter_mut().zip(w) {
                *a += xr * wc;
            }
        }
        s.z.iter_mut().for_each(|a| *a = a.tanh());
        s.logits.copy_from_slice(&p[l.b2..l.b2 + VOCAB]);
        for (c, &zc) in s.z.iter().enumerate() {
            let w = &p[l.w2 + c * VOCAB..l.w2 + (c + 1) * VOCAB];
            for (o, &wv) in s.logits.iter_mut().zip(w) {
                *o += zc * wv;
            }
        }
        let lse = logsumexp(&s.logits);
        s.logits.iter_mut().for_each(|v| *v -= lse);
    }

    /// Accumulates `upstream · ∂ log p(target | ctx) / ∂θ` after
    /// [`ModelParams::forward`] has filled `s`.
    fn backward(&self, s: &mut Scratch, target: u32, upstream: f64, grads: &mut [f64]) {
        let ModelShape {
            embed_dim: d,
            hidden: h,
            ..
        } = self.shape;
        let l = self.shape.layout();
        let p = &self.values;
        for (g, &lp) in s.dlogits.iter_mut().zip(&s.logits) {
            *g = -upstream * lp.exp();
        }
        s.dlogits[target as usize] += upstream;

        for (gb, &g) in grads[l.b2..l.b2 + VOCAB].iter_mut().zip(&s.dlogits) {
            *gb += g;
        }
        for c in 0..h {
            let w = &p[l.w2 + c * VOCAB..l.w2 + (c + 1) * VOCAB];
            let gw = &mut grads[l.w2 + c * VOCAB..l.w2 + (c + 1) * VOCAB];
            let zc = s.z[c];
            let mut acc = 0.0;
            for v in 0..VOCAB {
                acc += w[v] * s.dlogits[v];
                gw[v] += zc * s.dlogits[v];
            }
            // Through tanh: da = dz · (1 − z²).
            s.dz[c] = acc * (1.0 - zc * zc);
        }
        for (gb, &g) in grads[l.b1..l.b1 + h].iter_mut().zip(&s.dz) {
            *gb += g;
        }
        for (r, &xr) in s.x.iter().enumerate() {
            let w = &p[l.w1 + r * h..l.w1 + (r + 1) * h];
            let gw = &mut grads[l.w1 + r * h..l.w1 + (r + 1) * h];
            let mut dx = 0.0;
            for c in 0..h {
                dx += w[c] * s.dz[c];
                gw[c] += xr * s.dz[c];
            }
            let t = r / d;
            grads[s.ctx[t] as usize * d + r % d] += dx;
        }
    }

    /// Log-distribution over the next token after `context` (all prior
    /// tokens; only the last `k` are used).
    pub fn next_token_logprobs(&self, context: &[u32]) -> Vec<f64> {
        let mut s = Scratch::new(self.shape);
        s.set_context(context, context.len());
        self.forward(&mut s);
        s.logits
    }
}

fn targets(seq: &Sequence) -> impl Iterator<Item = (usize, u32)> + '_ {
    (seq.response_start..=seq.tokens.len()).map(|pos| (pos, seq.tokens.get(pos).copied().unwrap_or(EOS)))
}

/// `log π(response | prompt)`: the sum over response bytes plus the final EOS.
pub fn logprob_response(params: &ModelParams, prompt: &str, response: &str) -> f64 {
    let seq = encode_pair(prompt, response);
    let mut s = Scratch::new(params.shape);
    let mut total = 0.0;
    for (pos, target) in targets(&seq) {
        s.set_context(&seq.tokens, pos);
        params.forward(&mut s);
        total += s.logits[target as usize];
    }
    total
}

/// Accumulates `upstream · ∇θ logprob_response` into `grads` and returns the
/// log-probability.
pub fn logprob_grad(
    params: &ModelParams,
    prompt: &str,
    response: &str,
    upstream: f64,
    grads: &mut GradBuffer,
) -> Result<f64, PolicyError> {
    if params.frozen {
        return Err(PolicyError::Frozen);
    }
    if grads.shape != params.shape {
        return Err(PolicyError::ShapeMismatch {
            expected: params.shape,
            got: grads.shape,
        });
    }
    let seq = encode_pair(prompt, response);
    let mut s = Scratch::new(params.shape);
    let mut total = 0.0;
    for (pos, target) in targets(&seq) {
        s.set_context(&seq.tokens, pos);
        params.forward(&mut s);
        total += s.logits[target as usize];
        if upstream != 0.0 {
            params.backward(&mut s, target, upstream, &mut grads.values);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new: 32,
            temperature: 0.0,
            seed: 0,
        }
    }
}

/// Generates a continuation of `prompt`. Temperature 0 takes the argmax
/// (lowest id on ties); otherwise samples from `softmax(logits / T)`.
/// BOS is never emitted. Stops at EOS or after `max_new` tokens.
pub fn generate(params: &ModelParams, prompt: &str, cfg: &DecodeConfig) -> String {
    let mut rng = rng::seeded(cfg.seed, Stream::Decode);
    generate_with(params, prompt, cfg.max_new, cfg.temperature, &mut rng)
}

pub fn generate_with(params: &ModelParams, prompt: &str, max_new: usize, temperature: f64, rng: &mut Pcg32) -> String {
    let mut tokens = Tokenizer::encode(prompt);
    let start = tokens.len();
    let mut s = Scratch::new(params.shape);
    let mut probs = vec![0.0; VOCAB];
    for _ in 0..max_new {
        s.set_context(&tokens, tokens.len());
        params.forward(&mut s);
        s.logits[BOS as usize] = f64::NEG_INFINITY;
        let next = if temperature <= 0.0 {
            let mut best = 0;
            for (i, &v) in s.logits.iter().enumerate() {
                if v > s.logits[best] {
                    best = i;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = s.logits.iter().map(|v| v / temperature).collect();
            crate::numeric::softmax_into(&scaled, &mut probs);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = EOS as usize;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } as u32;
        if next == EOS {
            break;
        }
        tokens.push(next);
    }
    Tokenizer::decode(&tokens[start..])
}

/// Temperature-0 decoding.
pub fn greedy_decode(params: &ModelParams, prompt: &str, max_new: usize) -> String {
    generate(
        params,
        prompt,
        &DecodeConfig {
            max_new,
            ..DecodeConfig::default()
        },
    )
}
