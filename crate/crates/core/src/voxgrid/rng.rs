//! Splittable counter-based random streams.
//!
//! A stream is keyed by `(master_seed, purpose_tag, index)`:
//!
//! ```text
//! key  = mix64(mix64(master ^ SEED_SALT) ^ fnv1a(tag))
//! key  = mix64(key ^ mix64(index ^ INDEX_SALT))
//! draw = mix64(key + (counter + 1) * GOLDEN)
//! ```
//!
//! `mix64` is the SplitMix64 finalizer. Draw `n` of a stream depends only on
//! the key and `n`, so any position can be reached without replaying the
//! sequence and sub-streams are derived the same way from a parent key.

use rand_core::{impls, RngCore};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const SEED_SALT: u64 = 0x243F_6A88_85A3_08D3;
const INDEX_SALT: u64 = 0x1319_8A2E_0370_7344;
const CHILD_SALT: u64 = 0xA409_3822_299F_31D0;

/// SplitMix64 output function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    master_seed: u64,
    purpose_tag: String,
    index: u64,
    key: u64,
    counter: u64,
}

pub fn derive_stream(master: u64, tag: &str, index: u64) -> RngStream {
    let key = mix64(mix64(master ^ SEED_SALT) ^ fnv1a(tag));
    let key = mix64(key ^ mix64(index ^ INDEX_SALT));
    RngStream {
        master_seed: master,
        purpose_tag: tag.to_string(),
        index,
        key,
        counter: 0,
    }
}

impl RngStream {
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn purpose_tag(&self) -> &str {
        &self.purpose_tag
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// Number of 64-bit draws consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    /// Independent child stream `j`; the parent's position is not consulted.
    pub fn child(&self, j: u64) -> RngStream {
        RngStream {
            master_seed: self.master_seed,
            purpose_tag: self.purpose_tag.clone(),
            index: self.index,
            key: mix64(self.key ^ mix64(j.wrapping_add(CHILD_SALT))),
            counter: 0,
        }
    }

    /// Draw `n` of this stream without advancing it.
    #[inline]
    pub fn at(&self, n: u64) -> u64 {
        mix64(self.key.wrapping_add(n.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    #[inline]
    pub fn next_raw(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_raw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        // Lemire's multiply-shift; bias is < 2^-64 * n and irrelevant here.
        ((self.next_raw() as u128 * n as u128) >> 64) as u64
    }

    pub fn standard_normal(&mut self) -> f64 {
        use rand_distr::Distribution;
        rand_distr::StandardNormal.sample(self)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        impls::fill_bytes_via_next(self, dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand_core::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}
