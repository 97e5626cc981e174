//! Shared-quotation analysis of media outlets: quote matching, saliency-weighted
//! influence networks and causal impact estimation with a Poisson GLMM.

pub mod causal;
pub mod cluster;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod netbuild;
pub mod pipeline;
pub mod salience;
pub mod simgen;

pub use error::{Error, Result};

/// Derives an independent stream seed from a base seed and an index (splitmix64).
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
