//! Synthetic clustered preference data with a known reward.
//!
//! Each cluster owns a handful of pseudo-word keywords. Prompts are a shared
//! lead phrase followed by three of their cluster's keywords, so bag-of-words
//! embeddings place same-cluster prompts close together. Every cluster also
//! owns a pool of candidate one-word responses: a cluster-specific target
//! word, a generic word shared by all clusters, and cluster-specific
//! off-topic words. The ground-truth reward credits the target and the
//! generic word (each at most once) and charges a per-byte length penalty.
//! Pairs are labeled by sampling the Bradley–Terry probability of the two
//! rewards.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::numeric::sigmoid;
use crate::prefdata::PreferencePair;
use crate::rng::{self, Pcg32, Stream};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("rewards must be finite (got {0}, {1})")]
    NonFinite(f64, f64),
    #[error("oracle file {path}: {message}")]
    OracleFile { path: String, message: String },
}

const LEADS: &[&str] = &[
    "tell me about",
    "what is known on",
    "please explain",
    "describe",
    "say something on",
    "i wonder about",
    "give a note on",
    "talk about",
];

const WORD_LEN: usize = 5;

/// Relative frequency with which each candidate tier is drawn into a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawWeights {
    pub target: f64,
    pub generic: f64,
    /// Split evenly across the off-topic candidates.
    pub off_topic: f64,
}

impl Default for DrawWeights {
    fn default() -> Self {
        Self {
            target: 0.5,
            generic: 6.0,
            off_topic: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_clusters: usize,
    pub prompts_per_cluster: usize,
    pub responses_per_prompt: usize,
    pub keywords_per_cluster: usize,
    pub reward_seed: u64,
    pub sample_seed: u64,
    /// Letters used to spell pseudo-words.
    pub vocab: String,
    pub draw_weights: DrawWeights,
    pub target_reward: f64,
    pub generic_reward: f64,
    pub off_topic_reward: f64,
    pub length_penalty: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_clusters: 20,
            prompts_per_cluster: 100,
            responses_per_prompt: 3,
            keywords_per_cluster: 4,
            reward_seed: 0,
            sample_seed: 0,
            vocab: "abcdefghijklmnopqrstuvwxyz".to_string(),
            draw_weights: DrawWeights::default(),
            target_reward: 3.0,
            generic_reward: 1.0,
            off_topic_reward: 0.5,
            length_penalty: 0.01,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.num_clusters < 2 {
            return bad("num_clusters must be >= 2");
        }
        if self.prompts_per_cluster < 1 {
            return bad("prompts_per_cluster must be >= 1");
        }
        if self.responses_per_prompt < 2 {
            return bad("responses_per_prompt must be >= 2");
        }
        if self.keywords_per_cluster < 3 {
            return bad("keywords_per_cluster must be >= 3");
        }
        let w = self.draw_weights;
        let needs_off_topic = self.responses_per_prompt > 2;
        if !(w.target > 0.0 && w.generic > 0.0 && (!needs_off_topic || w.off_topic > 0.0)) {
            return bad("draw weights must be positive");
        }
        if ![
            self.target_reward,
            self.generic_reward,
            self.off_topic_reward,
            self.length_penalty,
        ]
        .iter()
        .all(|x| x.is_finite())
        {
            return bad("reward parameters must be finite");
        }
        let letters = self.letters();
        if letters.len() < self.responses_per_prompt.max(2) {
            return bad("vocab needs at least responses_per_prompt distinct lowercase letters");
        }
        let needed = self.num_clusters * (self.keywords_per_cluster + self.responses_per_prompt);
        let capacity = (letters.len() as f64).powi(WORD_LEN as i32);
        if capacity < 4.0 * needed as f64 {
            return bad("vocab too small to spell enough distinct words");
        }
        Ok(())
    }

    fn letters(&self) -> Vec<char> {
        let set: BTreeSet<char> = self
            .vocab
            .chars()
            .flat_map(char::to_lowercase)
            .filter(|c| c.is_alphabetic())
            .collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub keywords: Vec<String>,
    /// `[target, generic, off-topic...]`.
    pub candidates: Vec<String>,
    pub token_rewards: BTreeMap<String, f64>,
}

/// The generating reward `r*(y | x)`, reusable as a judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOracle {
    pub clusters: Vec<Cluster>,
    pub length_penalty: f64,
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
}

impl JudgeOracle {
    /// Index of the cluster whose keywords occur most often in `prompt`
    /// (lowest index on ties), or `None` if no keyword occurs.
    pub fn cluster_of(&self, prompt: &str) -> Option<usize> {
        let toks: Vec<String> = tokens(prompt).collect();
        let mut best: Option<(usize, usize)> = None;
        for (idx, cluster) in self.clusters.iter().enumerate() {
            let hits = toks.iter().filter(|t| cluster.keywords.contains(t)).count();
            if hits > 0 && best.is_none_or(|(_, h)| hits > h) {
                best = Some((idx, hits));
            }
        }
        best.map(|(idx, _)| idx)
    }

    pub fn reward(&self, prompt: &str, response: &str) -> f64 {
        let penalty = self.length_penalty * response.len() as f64;
        let Some(cluster) = self.cluster_of(prompt).map(|c| &self.clusters[c]) else {
            return -penalty;
        };
        let distinct: BTreeSet<String> = tokens(response).collect();
        let bonus: f64 = distinct.iter().filter_map(|t| cluster.token_rewards.get(t)).sum();
        bonus - penalty
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("oracle serializes");
        fs::write(path, text).map_err(|e| SynthError::OracleFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let err = |message: String| SynthError::OracleFile {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

/// Bradley–Terry probability that the first response is preferred.
pub fn bt_probability(reward_w: f64, reward_l: f64) -> Result<f64, SynthError> {
    if !(reward_w.is_finite() && reward_l.is_finite()) {
        return Err(SynthError::NonFinite(reward_w, reward_l));
    }
    Ok(sigmoid(reward_w - reward_l))
}

/// Draws whether `a` beats `b` under the Bradley–Terry model.
pub fn sample_preference(reward_a: f64, reward_b: f64, rng: &mut Pcg32) -> Result<bool, SynthError> {
    let p = bt_probability(reward_a, reward_b)?;
    Ok(rng.random::<f64>() < p)
}

fn random_word(letters: &[char], rng: &mut Pcg32) -> String {
    (0..WORD_LEN)
        .map(|_| letters[rng.random_range(0..letters.len())])
        .collect()
}

fn is_reserved(word: &str) -> bool {
    LEADS.iter().any(|l| l.split(' ').any(|w| w == word))
}

/// Builds the reward oracle. Depends only on `reward_seed` and the
/// vocabulary/reward fields of the config.
pub fn build_oracle(cfg: &SynthConfig) -> Result<JudgeOracle, SynthError> {
    cfg.validate()?;
    let letters = cfg.letters();
    let mut rng = rng::seeded(cfg.reward_seed, Stream::SynthWords);
    let mut used = BTreeSet::new();
    let mut fresh = |rng: &mut Pcg32, avoid_initials: &BTreeSet<char>| -> String {
        loop {
            let w = random_word(&letters, rng);
            let initial = w.chars().next().expect("non-empty word");
            if !is_reserved(&w) && !avoid_initials.contains(&initial) && used.insert(w.clone()) {
                return w;
            }
        }
    };
    let generic = fresh(&mut rng, &BTreeSet::new());
    let generic_initial = generic.chars().next().expect("non-empty word");

    let mut clusters = Vec::with_capacity(cfg.num_clusters);
    for _ in 0..cfg.num_clusters {
        let keywords: Vec<String> = (0..cfg.keywords_per_cluster)
            .map(|_| fresh(&mut rng, &BTreeSet::new()))
            .collect();
        // Candidates of one cluster start with distinct letters so the first
        // response byte already identifies the candidate.
        let mut initials = BTreeSet::from([generic_initial]);
        let mut candidates = Vec::with_capacity(cfg.responses_per_prompt);
        let target = fresh(&mut rng, &initials);
        initials.insert(target.chars().next().expect("non-empty word"));
        candidates.push(target.clone());
        candidates.push(generic.clone());
        let mut token_rewards = BTreeMap::from([(target, cfg.target_reward), (generic.clone(), cfg.generic_reward)]);
        for _ in 2..cfg.responses_per_prompt {
            let w = fresh(&mut rng, &initials);
            initials.insert(w.chars().next().expect("non-empty word"));
            token_rewards.insert(w.clone(), cfg.off_topic_reward);
            candidates.push(w);
        }
        clusters.push(Cluster {
            keywords,
            candidates,
            token_rewards,
        });
    }
    Ok(JudgeOracle {
        clusters,
        length_penalty: cfg.length_penalty,
    })
}

/// A prompt for `cluster`: a lead phrase, two shuffled keywords and the
/// cluster's first keyword, which always closes the prompt.
pub fn make_prompt(oracle: &JudgeOracle, cluster: usize, rng: &mut Pcg32) -> String {
    let lead = LEADS[rng.random_range(0..LEADS.len())];
    let keywords = &oracle.clusters[cluster].keywords;
    let mut rest: Vec<&str> = keywords[1..].iter().map(String::as_str).collect();
    rng::shuffle(&mut rest, rng);
    format!("{lead} {} {} {}?", rest[0], rest[1], keywords[0])
}

/// `count` prompts cycling through the clusters in order.
pub fn generate_prompts(oracle: &JudgeOracle, count: usize, seed: u64) -> Vec<String> {
    let mut rng = rng::seeded(seed, Stream::SynthEval);
    (0..count)
        .map(|i| make_prompt(oracle, i % oracle.clusters.len(), &mut rng))
        .collect()
}

fn draw_index(weights: &[f64], rng: &mut Pcg32) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).expect("positive weight")
}

fn candidate_weights(cfg: &SynthConfig) -> Vec<f64> {
    let n_off = cfg.responses_per_prompt - 2;
    let mut w = vec![cfg.draw_weights.target, cfg.draw_weights.generic];
    w.extend(std::iter::repeat_n(
        cfg.draw_weights.off_topic / n_off.max(1) as f64,
        n_off,
    ));
    w
}

/// A generated dataset with its generating reward.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub pairs: Vec<PreferencePair>,
    pub oracle: JudgeOracle,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    let oracle = build_oracle(cfg)?;
    let weights = candidate_weights(cfg);
    let mut rng = rng::seeded(cfg.sample_seed, Stream::SynthSamples);
    let mut pairs = Vec::with_capacity(cfg.num_clusters * cfg.prompts_per_cluster);
    for c in 0..cfg.num_clusters {
        for _ in 0..cfg.prompts_per_cluster {
            let prompt = make_prompt(&oracle, c, &mut rng);
            let a = draw_index(&weights, &mut rng);
            let mut rest = weights.clone();
            rest[a] = 0.0;
            let b = draw_index(&rest, &mut rng);
            let ya = &oracle.clusters[c].candidates[a];
            let yb = &oracle.clusters[c].candidates[b];
            let a_wins = sample_preference(oracle.reward(&prompt, ya), oracle.reward(&prompt, yb), &mut rng)?;
            let (chosen, rejected) = if a_wins { (ya, yb) } else { (yb, ya) };
            pairs.push(PreferencePair {
                prompt,
                chosen: chosen.clone(),
                rejected: rejected.clone(),
            });
        }
    }
    rng::shuffle(&mut pairs, &mut rng);
    Ok(SynthDataset { pairs, oracle })
}
