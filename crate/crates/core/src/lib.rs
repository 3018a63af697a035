//! A small, self-contained two-stage detector for biometric-trait regions of
//! interest (face, iris, palm, knuckle, fingerprint), with everything built
//! from first principles:
//!
//! - [`autograd`] — reverse-mode automatic differentiation over a recorded
//!   tape, with exactly the layer and loss vocabulary the detector needs.
//! - [`boxes`] — bounding-box geometry: IOU, anchor grids, delta
//!   encode/decode, non-maximum suppression, anchor assignment.
//! - [`detector`] — the network itself: shared backbone, region proposal
//!   head, ROI max pooling, classification/regression heads, inference,
//!   and versioned model serialization.
//! - [`trainer`] — the four-phase alternating schedule with per-phase
//!   freezing and the four logged losses.
//! - [`evaluation`] — accuracy-vs-IOU curves from a histogram/CDF, precision
//!   and recall, distance-based box correspondence, and the stacked-box
//!   filter for four-finger slap images.
//! - [`synthdata`] — a deterministic synthetic dataset generator plus the
//!   line-based annotation format shared with prediction files.
//!
//! Everything is `f64`, single-threaded per training step, and bit-for-bit
//! reproducible from a seed.

pub mod autograd;
pub mod boxes;
pub mod detector;
pub mod evaluation;
pub mod rng;
pub mod synthdata;
pub mod trainer;

/// FNV-1a over raw bytes; used for artifact and parameter checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// FNV-1a over the bit patterns of a float slice.
pub fn fnv1a64_f64(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
