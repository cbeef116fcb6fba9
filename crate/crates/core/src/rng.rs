//! Label-keyed deterministic random streams.
//!
//! Every random draw in the crate is keyed by an explicit label built from
//! the experiment seed plus structural coordinates (sample id, iteration,
//! model index, purpose, ...). Identical labels always produce identical
//! draws, so results do not depend on evaluation order, batching, or worker
//! count, and permuting a batch permutes the outputs identically.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Label component tags. Each `derive` call absorbs one (tag, value) pair.
pub mod tag {
    pub const PURPOSE: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const ITERATION: u64 = 3;
    pub const MODEL: u64 = 4;
    pub const SCALE_COPY: u64 = 5;
    pub const SITE: u64 = 6;
    pub const BLOCK: u64 = 7;
    pub const EPOCH: u64 = 8;
    pub const PARAM: u64 = 9;
    pub const INSTANCE: u64 = 10;
}

/// Values for the `PURPOSE` tag — one per kind of stochastic decision.
pub mod purpose {
    pub const DIVERSE_INPUT: u64 = 1;
    pub const PRUNE_MASK: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const ACTIVATION_SCALE: u64 = 4;
    pub const SKIP_FACTOR: u64 = 5;
    pub const PARAM_INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const TARGET_ASSIGN: u64 = 8;
    pub const SYNTH_RENDER: u64 = 9;
    pub const DECAY_MASK: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An immutable stream label. `derive` returns a child label; `rng` seeds a
/// generator from the accumulated label hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stream(u64);

impl Stream {
    pub fn root(seed: u64) -> Self {
        Stream(splitmix64(seed ^ 0x6457_5020_4c41_4253))
    }

    #[must_use]
    pub fn derive(self, tag: u64, value: u64) -> Self {
        let field = splitmix64(splitmix64(tag).wrapping_add(value));
        Stream(splitmix64(self.0 ^ field))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identical_labels_identical_draws() {
        let a = Stream::root(7).derive(tag::SAMPLE, 3).derive(tag::ITERATION, 9);
        let b = Stream::root(7).derive(tag::SAMPLE, 3).derive(tag::ITERATION, 9);
        let xs: Vec<f64> = a.rng().random_iter().take(8).collect();
        let ys: Vec<f64> = b.rng().random_iter().take(8).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn different_components_decorrelate() {
        let a = Stream::root(7).derive(tag::SAMPLE, 3);
        let b = Stream::root(7).derive(tag::SAMPLE, 4);
        let c = Stream::root(8).derive(tag::SAMPLE, 3);
        let xa: f64 = a.rng().random();
        let xb: f64 = b.rng().random();
        let xc: f64 = c.rng().random();
        assert_ne!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn derivation_order_matters() {
        let a = Stream::root(1).derive(tag::SAMPLE, 2).derive(tag::MODEL, 5);
        let b = Stream::root(1).derive(tag::MODEL, 5).derive(tag::SAMPLE, 2);
        // Tags keep the components distinguishable; swapped values must not
        // alias the same stream.
        let c = Stream::root(1).derive(tag::SAMPLE, 5).derive(tag::MODEL, 2);
        assert_ne!(a, c);
        let _ = b;
    }
}
