//! Named deterministic random streams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(seed, step, question, role, index)`, so results do not depend on how work
//! is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Role {
    TaskReference = 1,
    TaskAliases = 2,
    PolicyInit = 3,
    QuestionDraw = 4,
    Rollouts = 5,
    RewardSubset = 6,
    FreshSolutions = 7,
    Evaluation = 8,
    McTrial = 9,
    Sweep = 10,
    Explain = 11,
    Timing = 12,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub step: u64,
    pub question: u64,
    pub role: Role,
    pub index: u64,
}

impl StreamKey {
    pub fn new(seed: u64, role: Role) -> Self {
        Self {
            seed,
            step: 0,
            question: 0,
            role,
            index: 0,
        }
    }

    pub fn step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    pub fn question(mut self, question: u64) -> Self {
        self.question = question;
        self
    }

    pub fn index(mut self, index: u64) -> Self {
        self.index = index;
        self
    }

    pub fn rng(&self) -> ChaCha8Rng {
        // splitmix64 over the key words; distinct keys give unrelated seeds
        let mut state = 0x6a09_e667_f3bc_c908_u64;
        let mut seed = [0u8; 32];
        let words = [
            self.seed,
            self.step,
            self.question,
            self.role as u64,
            self.index,
        ];
        for w in words {
            state = splitmix(state ^ w);
        }
        for chunk in seed.chunks_mut(8) {
            state = splitmix(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
