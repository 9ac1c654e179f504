//! Splittable deterministic random streams.
//!
//! A stream is keyed by `(seed, shard)`; its position is the ChaCha block
//! counter. Shards never overlap, so every path of a batch can own its own
//! shard and the batch is reproducible no matter how the work is split.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counter-based stream keyed by `(seed, shard)`.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    shard: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, shard: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(shard);
        Self { seed, shard, rng }
    }

    /// An independent stream for sub-shard `index` of this one.
    ///
    /// Derived shards live in the upper half of the shard space, mixed with
    /// the parent shard, so they cannot collide with top-level shards used
    /// for per-path streams.
    pub fn split(&self, index: u64) -> Self {
        let mixed = splitmix64(self.shard ^ splitmix64(index.wrapping_add(0x9e37_79b9)));
        Self::new(self.seed, mixed | (1 << 63))
    }

    /// A stream for a different named purpose under the same seed.
    pub fn derive(&self, label: &str) -> Self {
        let h = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        Self::new(splitmix64(self.seed ^ h), self.shard)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shard(&self) -> u64 {
        self.shard
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Current position of the underlying counter, in 32-bit words.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
