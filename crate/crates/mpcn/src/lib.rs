//! Few-shot single-view 3D voxel reconstruction with an external shape memory,
//! attention-based prior fusion, and a 3D-aware contrastive loss.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`voxelcore`]: voxel grids, probability volumes, IoU / shape distance,
//!   binvox and graymap I/O, orthographic depth views.
//! - [`memory`]: the bounded FIFO key-value memory with threshold-gated
//!   insertion and batched top-k retrieval.
//! - [`nn`]: plain f64 layers (conv, transposed conv, norm, attention) with
//!   explicit forward/backward passes.
//! - [`netblocks`]: image encoder, shape encoder, and voxel decoder presets.
//! - [`prior`]: cross-attention fusion of retrieved shape priors.
//! - [`losses`]: reconstruction, pair-weighted contrastive, and total losses.
//! - [`trainer`]: the episodic two-stage protocol, evaluation, and reports.
//! - [`datagen`]: procedural shape families, few-shot splits, manifest I/O.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod memory;
pub mod netblocks;
pub mod nn;
pub mod optim;
pub mod prior;
pub mod trainer;
pub mod voxelcore;

pub use error::{MpcnError, Result};

/// Deterministic RNG for tests, seeded per call site.
#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
