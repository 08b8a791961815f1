//! Relative preference optimization at desk scale.
//!
//! The crate builds contrast-matrix preference losses (with embedding,
//! uniform and diagonal weighting) next to DPO, IPO and KTO baselines, a tiny
//! byte-level language model with exact gradients to train them on, a
//! synthetic benchmark with a known reward, and the train/evaluate/sweep
//! pipeline that ties them together.

pub mod cli;
pub mod embed;
pub mod evalkit;
pub mod losses;
pub mod numeric;
pub mod policy;
pub mod prefdata;
pub mod rng;
pub mod synth;
pub mod trainer;
