//! Seeded, splittable random number streams.
//!
//! Every stochastic component in this crate draws from an [`RngStream`],
//! identified by a `(seed, stream)` pair. Two streams with the same pair
//! produce the same sequence; streams with different pairs are independent
//! for all practical purposes. Child streams are derived by hashing a salt
//! into the parent's stream id, so a run can hand every particle, rollout,
//! and replication its own stream up front. That is what makes results
//! independent of thread count and scheduling: no stream is ever shared
//! across parallel work items.
//!
//! The generator is ChaCha with 8 rounds, which is counter-based under the
//! hood and cheap to construct. Derivation never looks at the parent's
//! position, only its identity, so forking is stable no matter how much of
//! the parent has been consumed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finalizer from splitmix64. Bijective on `u64`, good avalanche.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b).rotate_left(31))
}

/// A seeded random stream with a stable identity.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Stream `stream` of the generator family keyed by `seed`.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream keyed by `salt`. Depends only on `(seed, stream, salt)`,
    /// never on how much of `self` has been consumed.
    pub fn derive(&self, salt: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream, salt))
    }

    /// Chained derivation, e.g. `fork(&[t, n])` for particle `n` at step `t`.
    pub fn fork(&self, salts: &[u64]) -> RngStream {
        let mut stream = self.stream;
        for &s in salts {
            stream = mix(stream, s);
        }
        RngStream::new(self.seed, stream)
    }

    pub fn uniform_01(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_01()
    }

    pub fn standard_normal(&mut self) -> f64 {
        use rand_distr::StandardNormal;
        self.rng.sample(StandardNormal)
    }
}

impl RngCore for RngStream {
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
