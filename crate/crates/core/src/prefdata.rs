//! Preference records: loading, validation, unpairing and mini-batching.
//!
//! Paired files carry one `{"prompt", "chosen", "rejected"}` object per line;
//! unpaired files carry `{"prompt", "response", "desirable"}`. Blank lines are
//! skipped but still counted when reporting line numbers.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: InvalidRecord },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unpaired data has no {0} examples; both sides are required")]
    OneSided(&'static str),
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
}

/// Why a single record failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvalidRecord {
    MissingField(&'static str),
    EmptyField(&'static str),
    IdenticalResponses,
}

impl fmt::Display for InvalidRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InvalidRecord::MissingField(name) => write!(f, "missing field `{name}`"),
            InvalidRecord::EmptyField(name) => write!(f, "field `{name}` is empty"),
            InvalidRecord::IdenticalResponses => {
                write!(f, "`chosen` and `rejected` are identical")
            }
        }
    }
}

/// A prompt with a preferred and a dispreferred response.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

impl PreferencePair {
    pub fn new(
        prompt: impl Into<String>,
        chosen: impl Into<String>,
        rejected: impl Into<String>,
    ) -> Result<Self, InvalidRecord> {
        let pair = Self {
            prompt: prompt.into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), InvalidRecord> {
        non_empty("prompt", &self.prompt)?;
        non_empty("chosen", &self.chosen)?;
        non_empty("rejected", &self.rejected)?;
        if self.chosen == self.rejected {
            return Err(InvalidRecord::IdenticalResponses);
        }
        Ok(())
    }
}

/// A single labeled response, as used by unpaired training.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnpairedExample {
    pub prompt: String,
    pub response: String,
    pub desirable: bool,
}

impl UnpairedExample {
    pub fn new(prompt: impl Into<String>, response: impl Into<String>, desirable: bool) -> Result<Self, InvalidRecord> {
        let ex = Self {
            prompt: prompt.into(),
            response: response.into(),
            desirable,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<(), InvalidRecord> {
        non_empty("prompt", &self.prompt)?;
        non_empty("response", &self.response)
    }
}

fn non_empty(field: &'static str, value: &str) -> Result<(), InvalidRecord> {
    if value.trim().is_empty() {
        Err(InvalidRecord::EmptyField(field))
    } else {
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawPaired {
    prompt: Option<String>,
    chosen: Option<String>,
    rejected: Option<String>,
}

#[derive(Deserialize)]
struct RawUnpaired {
    prompt: Option<String>,
    response: Option<String>,
    desirable: Option<bool>,
}

fn require<T>(value: Option<T>, field: &'static str) -> Result<T, InvalidRecord> {
    value.ok_or(InvalidRecord::MissingField(field))
}

fn read_records<R, T>(path: &Path, mut convert: impl FnMut(R) -> Result<T, InvalidRecord>) -> Result<Vec<T>, DataError>
where
    R: for<'de> Deserialize<'de>,
{
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_records(&text, &mut convert)
}

fn parse_records<R, T>(text: &str, convert: &mut impl FnMut(R) -> Result<T, InvalidRecord>) -> Result<Vec<T>, DataError>
where
    R: for<'de> Deserialize<'de>,
{
    let mut out = Vec::new();
    for (idx, line) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let raw: R = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = convert(raw).map_err(|reason| DataError::Invalid { line: line_no, reason })?;
        out.push(record);
    }
    Ok(out)
}

fn paired_from_raw(raw: RawPaired) -> Result<PreferencePair, InvalidRecord> {
    let pair = PreferencePair {
        prompt: require(raw.prompt, "prompt")?,
        chosen: require(raw.chosen, "chosen")?,
        rejected: require(raw.rejected, "rejected")?,
    };
    pair.validate()?;
    Ok(pair)
}

fn unpaired_from_raw(raw: RawUnpaired) -> Result<UnpairedExample, InvalidRecord> {
    let ex = UnpairedExample {
        prompt: require(raw.prompt, "prompt")?,
        response: require(raw.response, "response")?,
        desirable: require(raw.desirable, "desirable")?,
    };
    ex.validate()?;
    Ok(ex)
}

/// Loads a paired preference file, preserving file order.
pub fn load_paired(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>, DataError> {
    read_records(path.as_ref(), paired_from_raw)
}

/// Parses paired records from in-memory text.
pub fn parse_paired(text: &str) -> Result<Vec<PreferencePair>, DataError> {
    parse_records(text, &mut paired_from_raw)
}

pub fn load_unpaired(path: impl AsRef<Path>) -> Result<Vec<UnpairedExample>, DataError> {
    read_records(path.as_ref(), unpaired_from_raw)
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record).expect("records serialize to JSON");
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)
}

pub fn write_paired(path: impl AsRef<Path>, pairs: &[PreferencePair]) -> Result<(), DataError> {
    write_records(path.as_ref(), pairs)
}

pub fn write_unpaired(path: impl AsRef<Path>, examples: &[UnpairedExample]) -> Result<(), DataError> {
    write_records(path.as_ref(), examples)
}

/// Splits every triplet into a desirable and an undesirable example and
/// shuffles the result.
pub fn decompose_to_unpaired(pairs: &[PreferencePair], seed: u64) -> Result<Vec<UnpairedExample>, DataError> {
    if pairs.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for (idx, pair) in pairs.iter().enumerate() {
        pair.validate()
            .map_err(|reason| DataError::Invalid { line: idx + 1, reason })?;
        out.push(UnpairedExample {
            prompt: pair.prompt.clone(),
            response: pair.chosen.clone(),
            desirable: true,
        });
        out.push(UnpairedExample {
            prompt: pair.prompt.clone(),
            response: pair.rejected.clone(),
            desirable: false,
        });
    }
    rng::shuffle(&mut out, &mut rng::seeded(seed, Stream::Decompose));
    Ok(out)
}

/// M triplets viewed column-wise.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairedBatch {
    pub prompts: Vec<String>,
    pub chosen: Vec<String>,
    pub rejected: Vec<String>,
}

impl PairedBatch {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a PreferencePair>) -> Self {
        let mut batch = Self::default();
        for p in pairs {
            batch.prompts.push(p.prompt.clone());
            batch.chosen.push(p.chosen.clone());
            batch.rejected.push(p.rejected.clone());
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = PreferencePair> + '_ {
        (0..self.len()).map(move |i| PreferencePair {
            prompt: self.prompts[i].clone(),
            chosen: self.chosen[i].clone(),
            rejected: self.rejected[i].clone(),
        })
    }
}

/// Which side of an unpaired batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Win,
    Lose,
}

/// M desirable and N undesirable items, not aligned by prompt.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UnpairedBatch {
    pub win_prompts: Vec<String>,
    pub win_responses: Vec<String>,
    pub lose_prompts: Vec<String>,
    pub lose_responses: Vec<String>,
    /// Set when this batch borrows a sample from the side that ran out.
    pub recycled: Option<Side>,
}

impl UnpairedBatch {
    pub fn num_wins(&self) -> usize {
        self.win_prompts.len()
    }

    pub fn num_loses(&self) -> usize {
        self.lose_prompts.len()
    }

    fn push(&mut self, ex: &UnpairedExample) {
        if ex.desirable {
            self.win_prompts.push(ex.prompt.clone());
            self.win_responses.push(ex.response.clone());
        } else {
            self.lose_prompts.push(ex.prompt.clone());
            self.lose_responses.push(ex.response.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchWarning {
    /// A paired batch with a single triplet has no cross-prompt cells.
    Singleton { batch: usize },
    /// A trailing unpaired batch reuses one sample from the exhausted side.
    Recycled { batch: usize, side: Side },
}

impl fmt::Display for BatchWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchWarning::Singleton { batch } => {
                write!(f, "batch {batch} holds a single triplet; no cross-prompt contrast")
            }
            BatchWarning::Recycled { batch, side } => {
                write!(f, "batch {batch} recycles one {side:?} sample")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batches<B> {
    pub batches: Vec<B>,
    pub warnings: Vec<BatchWarning>,
}

/// Shuffles and partitions triplets. The last batch may be short; nothing is
/// dropped.
pub fn make_paired_batches(
    pairs: &[PreferencePair],
    batch_size: usize,
    seed: u64,
) -> Result<Batches<PairedBatch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatchSize);
    }
    if pairs.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng::shuffle(&mut order, &mut rng::seeded(seed, Stream::PairedBatches));
    let mut batches = Vec::new();
    let mut warnings = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            warnings.push(BatchWarning::Singleton { batch: batches.len() });
        }
        batches.push(PairedBatch::from_pairs(chunk.iter().map(|&i| &pairs[i])));
    }
    Ok(Batches { batches, warnings })
}

/// Shuffles each side independently and consumes both in lock-step,
/// `per_side` at a time. Once one side runs out, each trailing batch of
/// leftovers is completed with one sample drawn from the exhausted side.
pub fn make_unpaired_batches(
    examples: &[UnpairedExample],
    per_side: usize,
    seed: u64,
) -> Result<Batches<UnpairedBatch>, DataError> {
    if per_side == 0 {
        return Err(DataError::ZeroBatchSize);
    }
    if examples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut wins: Vec<&UnpairedExample> = examples.iter().filter(|e| e.desirable).collect();
    let mut loses: Vec<&UnpairedExample> = examples.iter().filter(|e| !e.desirable).collect();
    if wins.is_empty() {
        return Err(DataError::OneSided("desirable"));
    }
    if loses.is_empty() {
        return Err(DataError::OneSided("undesirable"));
    }
    rng::shuffle(&mut wins, &mut rng::seeded(seed, Stream::UnpairedWins));
    rng::shuffle(&mut loses, &mut rng::seeded(seed, Stream::UnpairedLoses));
    let mut recycle_rng = rng::seeded(seed, Stream::Recycle);

    let mut batches = Vec::new();
    let mut warnings = Vec::new();
    let (mut wi, mut li) = (0, 0);
    while wi < wins.len() && li < loses.len() {
        let mut batch = UnpairedBatch::default();
        let w_end = (wi + per_side).min(wins.len());
        let l_end = (li + per_side).min(loses.len());
        wins[wi..w_end].iter().for_each(|e| batch.push(e));
        loses[li..l_end].iter().for_each(|e| batch.push(e));
        wi = w_end;
        li = l_end;
        batches.push(batch);
    }
    let (rest, donor, donor_side) = if wi < wins.len() {
        (&wins[wi..], &loses, Side::Lose)
    } else {
        (&loses[li..], &wins, Side::Win)
    };
    for chunk in rest.chunks(per_side) {
        let mut batch = UnpairedBatch::default();
        chunk.iter().for_each(|e| batch.push(e));
        let pick = rand::RngExt::random_range(&mut recycle_rng, 0..donor.len());
        batch.push(donor[pick]);
        batch.recycled = Some(donor_side);
        warnings.push(BatchWarning::Recycled {
            batch: batches.len(),
            side: donor_side,
        });
        batches.push(batch);
    }
    Ok(Batches { batches, warnings })
}
