use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

/// Seeded SplitMix64 stream. Identical seeds give identical streams.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: SplitMix64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream for a named purpose (for example
    /// `"init"` or `"shuffle"`), so that consumers do not perturb each other.
    pub fn derive(seed: u64, purpose: &str) -> Self {
        // FNV-1a over the purpose label, mixed into the base seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in purpose.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self::new(seed ^ h.rotate_left(17))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn inner(&mut self) -> &mut SplitMix64 {
        &mut self.inner
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
