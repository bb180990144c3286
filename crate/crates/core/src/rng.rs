//! Keyed random substreams.
//!
//! One root seed fans out into independent ChaCha8 streams addressed by a
//! purpose tag and a small tuple of indices (iteration, layer, time step,
//! sample). Addressing noise by global sample index keeps results independent
//! of how a batch is sharded across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; keeps e.g. training and evaluation noise apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Purpose {
    TrainNoise = 1,
    EvalNoise = 2,
    Init = 3,
    Shuffle = 4,
    Subset = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub purpose: Purpose,
    /// Training iteration, or an evaluation-run tag.
    pub round: u64,
    pub layer: u32,
    pub step: u32,
    pub sample: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn stream(&self, key: StreamKey) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&self.root.to_le_bytes());
        seed[8..12].copy_from_slice(&(key.purpose as u32).to_le_bytes());
        seed[12..16].copy_from_slice(&key.layer.to_le_bytes());
        seed[16..24].copy_from_slice(&key.round.to_le_bytes());
        seed[24..28].copy_from_slice(&key.step.to_le_bytes());
        seed[28..32].copy_from_slice(&(key.sample as u32).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(seed);
        // high sample bits select the ChaCha stream
        rng.set_stream(key.sample >> 32);
        rng
    }

    /// A stream addressed only by purpose, for one-off uses such as init.
    pub fn simple(&self, purpose: Purpose, round: u64) -> ChaCha8Rng {
        self.stream(StreamKey {
            purpose,
            round,
            layer: 0,
            step: 0,
            sample: 0,
        })
    }
}
