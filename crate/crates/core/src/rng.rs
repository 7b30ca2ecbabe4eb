//! Named, reproducible random substreams derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream families; each gets an independent substream of the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Batches,
    Clustering,
    Augment,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Init => 0x696e_6974,
            Stream::Batches => 0x6261_7463,
            Stream::Clustering => 0x636c_7573,
            Stream::Augment => 0x6175_676d,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of words into a new 64-bit seed.
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    words
        .iter()
        .fold(splitmix64(seed), |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// RNG for `(seed, stream, index...)`; identical arguments always give the identical stream.
pub fn substream(seed: u64, stream: Stream, index: &[u64]) -> ChaCha8Rng {
    let mut words = Vec::with_capacity(index.len() + 1);
    words.push(stream.tag());
    words.extend_from_slice(index);
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &words))
}

/// Stable 64-bit FNV-1a hash, used to turn sample ids into stream indices.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
