//! Seeded random streams.
//!
//! Every stochastic step draws from a [`RngHandle`] derived from a run seed
//! and a named purpose, so results depend only on the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngHandle = ChaCha8Rng;

/// Stream derived from `seed` and a purpose tag.
pub fn stream(seed: u64, purpose: &str) -> RngHandle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(purpose));
    rng
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &RngHandle) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> RngHandle {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub const ENCODED_LEN: usize = 32 + 8 + 16;

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&self.stream.to_le_bytes());
        out.extend_from_slice(&self.word_pos.to_le_bytes());
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != Self::ENCODED_LEN {
            return None;
        }
        Some(RngState {
            seed: bytes[..32].try_into().ok()?,
            stream: u64::from_le_bytes(bytes[32..40].try_into().ok()?),
            word_pos: u128::from_le_bytes(bytes[40..56].try_into().ok()?),
        })
    }
}
