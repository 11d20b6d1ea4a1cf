//! Factorized spatio-temporal convolutional networks (FSTCN) at desk scale:
//! a from-scratch tensor/autodiff core, the factorized 3D convolution with
//! its equivalence harness, clip-pair sampling with frame differencing, the
//! network with its T-P operator and dual-kernel temporal layer, SGD
//! training on a synthetic motion dataset, and SCI-weighted score fusion.

pub mod clip;
pub mod error;
pub mod factorized;
pub mod fusion;
pub mod net;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{FstcnError, Result};
pub use tensor::{Padding, Tensor};

/// Derive a subsystem seed from the root seed and a label, so that all
/// randomness flows from a single root while subsystems stay decoupled.
pub fn subseed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label, then splitmix-style finalization with the root
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
