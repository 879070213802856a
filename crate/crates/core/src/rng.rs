//! Seed management.
//!
//! A run has one root seed. Trajectory `i` draws its own 64-bit seed from
//! ChaCha stream `i` under the root key, so the seed of a trajectory depends
//! only on `(root, i)` and never on scheduling order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type TrajectoryRng = ChaCha8Rng;

/// Seed of trajectory `index` under `root`.
pub fn trajectory_seed(root: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(index);
    rng.next_u64()
}

pub fn trajectory_rng(seed: u64) -> TrajectoryRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_stable_and_distinct() {
        let a: Vec<u64> = (0..64).map(|i| trajectory_seed(7, i)).collect();
        let b: Vec<u64> = (0..64).rev().map(|i| trajectory_seed(7, i)).collect();
        let mut b = b;
        b.reverse();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), a.len());
        assert_ne!(trajectory_seed(7, 0), trajectory_seed(8, 0));
    }
}
