//! Unit-norm prompt embeddings and cosine distances.
//!
//! Three providers are available: a hashed bag-of-words embedder (pure, no
//! setup), a file of precomputed vectors, and an HTTP client for an external
//! sentence-embedding server. All of them return L2-normalized vectors.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("hashed bag-of-words dimension must be >= 8 (got {0})")]
    InvalidDim(usize),
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("embedding has no components")]
    Empty,
    #[error("embedding has a non-finite component")]
    NonFinite,
    #[error("embedding is the zero vector")]
    Degenerate,
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("no embedding on file for text {0:?}")]
    UnknownText(String),
    #[error("embedding request failed: {0}")]
    Network(String),
    #[error("embedding server answered with status {0}")]
    Status(u16),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("embedding server returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding server returned an unusable vector at index {index}: {reason}")]
    BadVector { index: usize, reason: Box<EmbedError> },
}

/// A unit-L2-norm vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values` to unit length.
    pub fn from_raw(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::Degenerate);
        }
        for v in values.iter_mut() {
            *v /= norm;
        }
        Ok(Self(values))
    }

    /// The basis vector `e_0` of the given dimension.
    pub fn unit(dim: usize) -> Self {
        let mut v = vec![0.0; dim.max(1)];
        v[0] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `1 - <a, b>` for unit vectors, clamped to `[0, 2]`.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimMismatch(a.dim(), b.dim()));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot).clamp(0.0, 2.0))
}

/// 64-bit FNV-1a over the UTF-8 bytes of `token`.
pub fn fnv1a64(token: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    token
        .bytes()
        .fold(OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Lowercased whitespace tokens counted into `fnv1a64(token) % dim` buckets.
/// Text without tokens maps to `e_0`.
pub fn embed_hashed_bow(text: &str, dim: usize) -> Result<Embedding, EmbedError> {
    if dim < 8 {
        return Err(EmbedError::InvalidDim(dim));
    }
    let mut counts = vec![0.0; dim];
    let mut any = false;
    for tok in text.split_whitespace() {
        let tok = tok.to_lowercase();
        counts[(fnv1a64(&tok) % dim as u64) as usize] += 1.0;
        any = true;
    }
    if !any {
        return Ok(Embedding::unit(dim));
    }
    Embedding::from_raw(counts)
}

/// Vectors loaded from a line-delimited `{"text", "embedding"}` file.
#[derive(Debug, Default)]
pub struct EmbeddingTable {
    pub vectors: HashMap<String, Embedding>,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    text: String,
    embedding: Vec<f64>,
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingTable, EmbedError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut table = EmbeddingTable::default();
    let mut dim = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec_err = |message: String| EmbedError::Record { line: line_no, message };
        let rec: EmbeddingRecord = serde_json::from_str(line).map_err(|e| rec_err(e.to_string()))?;
        let d = *dim.get_or_insert(rec.embedding.len());
        if rec.embedding.len() != d {
            return Err(rec_err(format!(
                "dimension {} differs from {d} on earlier lines",
                rec.embedding.len()
            )));
        }
        let emb = Embedding::from_raw(rec.embedding).map_err(|e| rec_err(e.to_string()))?;
        if table.vectors.insert(rec.text.clone(), emb).is_some() {
            let msg = format!(
                "line {line_no}: duplicate text {:?}; keeping the later vector",
                rec.text
            );
            tracing::warn!("{msg}");
            table.warnings.push(msg);
        }
    }
    Ok(table)
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
    dim: usize,
}

pub const DEFAULT_HTTP_TIMEOUT: Duration = Duration::from_secs(10);

/// Blocking client for the `POST <endpoint>/embed` protocol. One request is
/// in flight at a time.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    url: String,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            url: format!("{}/embed", endpoint.trim_end_matches('/')),
            agent: config.into(),
        }
    }

    pub fn fetch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| EmbedError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(EmbedError::Status(status));
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EmbedError::Network(e.to_string()))?;
        let parsed: EmbedResponse = serde_json::from_str(&body).map_err(|e| EmbedError::Malformed(e.to_string()))?;
        if parsed.embeddings.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: parsed.embeddings.len(),
            });
        }
        parsed
            .embeddings
            .into_iter()
            .enumerate()
            .map(|(index, v)| {
                if v.len() != parsed.dim {
                    return Err(EmbedError::BadVector {
                        index,
                        reason: Box::new(EmbedError::DimMismatch(v.len(), parsed.dim)),
                    });
                }
                Embedding::from_raw(v).map_err(|e| EmbedError::BadVector {
                    index,
                    reason: Box::new(e),
                })
            })
            .collect()
    }
}

/// One-shot form of [`HttpEmbedder::fetch`] with the default timeout.
pub fn fetch_embeddings_http(endpoint: &str, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
    HttpEmbedder::new(endpoint, DEFAULT_HTTP_TIMEOUT).fetch(texts)
}

/// Serializable provider selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderConfig {
    HashedBow {
        dim: usize,
    },
    File {
        path: PathBuf,
    },
    Http {
        endpoint: String,
        timeout_secs: f64,
        /// Hashed bag-of-words dimension to fall back to when the server
        /// fails; `None` makes server failures fatal.
        fallback_dim: Option<usize>,
    },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::HashedBow { dim: 256 }
    }
}

#[derive(Debug)]
enum Backend {
    HashedBow(usize),
    File(HashMap<String, Embedding>),
    Http {
        client: HttpEmbedder,
        fallback_dim: Option<usize>,
    },
}

/// Embeds prompts through the configured backend, caching per unique text.
#[derive(Debug)]
pub struct EmbeddingProvider {
    backend: Backend,
    cache: HashMap<String, Embedding>,
}

impl EmbeddingProvider {
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self, EmbedError> {
        let backend = match cfg {
            ProviderConfig::HashedBow { dim } => {
                if *dim < 8 {
                    return Err(EmbedError::InvalidDim(*dim));
                }
                Backend::HashedBow(*dim)
            }
            ProviderConfig::File { path } => Backend::File(load_embedding_file(path)?.vectors),
            ProviderConfig::Http {
                endpoint,
                timeout_secs,
                fallback_dim,
            } => Backend::Http {
                client: HttpEmbedder::new(endpoint, Duration::from_secs_f64(*timeout_secs)),
                fallback_dim: *fallback_dim,
            },
        };
        Ok(Self {
            backend,
            cache: HashMap::new(),
        })
    }

    pub fn hashed_bow(dim: usize) -> Result<Self, EmbedError> {
        Self::from_config(&ProviderConfig::HashedBow { dim })
    }

    pub fn from_table(vectors: HashMap<String, Embedding>) -> Self {
        Self {
            backend: Backend::File(vectors),
            cache: HashMap::new(),
        }
    }

    /// One embedding per input text, in order.
    pub fn embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let mut missing: Vec<String> = Vec::new();
        for t in texts {
            if !self.cache.contains_key(t) && !missing.contains(t) {
                missing.push(t.clone());
            }
        }
        if !missing.is_empty() {
            let fresh = self.compute(&missing)?;
            self.cache.extend(missing.into_iter().zip(fresh));
        }
        Ok(texts.iter().map(|t| self.cache[t].clone()).collect())
    }

    fn compute(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        match &self.backend {
            Backend::HashedBow(dim) => texts.iter().map(|t| embed_hashed_bow(t, *dim)).collect(),
            Backend::File(map) => texts
                .iter()
                .map(|t| map.get(t).cloned().ok_or_else(|| EmbedError::UnknownText(t.clone())))
                .collect(),
            Backend::Http { client, fallback_dim } => match (client.fetch(texts), fallback_dim) {
                (Ok(v), _) => Ok(v),
                (Err(e), Some(dim)) => {
                    tracing::warn!("embedding server failed ({e}); using hashed bag-of-words");
                    texts.iter().map(|t| embed_hashed_bow(t, *dim)).collect()
                }
                (Err(e), None) => Err(e),
            },
        }
    }
}
