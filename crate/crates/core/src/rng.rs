//! Deterministic randomness.
//!
//! Every random decision in the crate (shuffles, synthetic sampling, weight
//! initialization, temperature sampling) flows through [`Pcg32`], the
//! PCG-XSH-RR generator with 64 bits of state and a 64-bit stream selector.
//! Its output sequence is fixed by the PCG reference definition, so a given
//! seed reproduces bit-exactly on every platform.

use rand::seq::SliceRandom;
use rand::SeedableRng;

pub use rand_pcg::Pcg32;

/// Named sub-streams so that independent consumers of one user seed never
/// share a random sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    PairedBatches,
    UnpairedWins,
    UnpairedLoses,
    Recycle,
    Decompose,
    SynthWords,
    SynthSamples,
    SynthEval,
    Init,
    Decode,
}

impl Stream {
    fn salt(self) -> u64 {
        match self {
            Stream::PairedBatches => 0x9e37_79b9_7f4a_7c15,
            Stream::UnpairedWins => 0xbf58_476d_1ce4_e5b9,
            Stream::UnpairedLoses => 0x94d0_49bb_1331_11eb,
            Stream::Recycle => 0x2545_f491_4f6c_dd1d,
            Stream::Decompose => 0x6a09_e667_f3bc_c908,
            Stream::SynthWords => 0xbb67_ae85_84ca_a73b,
            Stream::SynthSamples => 0x3c6e_f372_fe94_f82b,
            Stream::SynthEval => 0xa54f_f53a_5f1d_36f1,
            Stream::Init => 0x510e_527f_ade6_82d1,
            Stream::Decode => 0x9b05_688c_2b3e_6c1f,
        }
    }
}

/// Generator for `seed` on the given sub-stream.
pub fn seeded(seed: u64, stream: Stream) -> Pcg32 {
    Pcg32::seed_from_u64(seed ^ stream.salt())
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut Pcg32) {
    items.shuffle(rng);
}
