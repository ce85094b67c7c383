//! Splittable random streams.
//!
//! One root seed feeds every random decision in a run. Each consumer asks for
//! a stream keyed by a [`Purpose`] and a short coordinate tuple (stage, round,
//! client id, ...). The key is expanded into a ChaCha8 key and the coordinates
//! are hashed into ChaCha's 64-bit stream id, so a stream depends only on its
//! coordinates and never on the order in which other streams were drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init,
    SyntheticData,
    TrainEvalSplit,
    CsvSplit,
    ClientSampling,
    ClientBatches,
    Personalization,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x11,
            Purpose::SyntheticData => 0x22,
            Purpose::TrainEvalSplit => 0x33,
            Purpose::CsvSplit => 0x44,
            Purpose::ClientSampling => 0x55,
            Purpose::ClientBatches => 0x66,
            Purpose::Personalization => 0x77,
            Purpose::Test => 0x88,
        }
    }
}

/// SplitMix64 step.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix_coords(purpose: Purpose, coords: &[u64]) -> u64 {
    let mut state = purpose.tag();
    let mut acc = splitmix64(&mut state);
    for &c in coords {
        state ^= c.wrapping_mul(0xff51_afd7_ed55_8ccd);
        acc ^= splitmix64(&mut state);
        acc = acc.rotate_left(17);
    }
    acc ^ (coords.len() as u64)
}

/// Factory of independent, coordinate-addressed random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: Purpose, coords: &[u64]) -> StreamRng {
        let mut key = [0u8; 32];
        let mut s = self.seed;
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(mix_coords(purpose, coords));
        rng
    }
}
