//! Patch-based segmentation of 3D volumes.
//!
//! A multi-pathway dense network classifies each voxel of a region of interest
//! from three orthogonal 2D patches centred on it. The crate covers the whole
//! pipeline: volume I/O, ROI masks and class-balanced sampling, the network
//! with hand-written backpropagation, mini-batch SGD, batched inference, an
//! SSD patch label-fusion baseline, Dice evaluation with cross-validation, and
//! a synthetic phantom generator.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod network;
pub mod patching;
pub mod pbs;
pub mod phantom;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use evaluation::{crossval, dice, make_folds, ClassSet, DiceReport, FoldPlan};
pub use inference::{segment, segment_batched, SegmentationResult};
pub use network::{load_checkpoint, save_checkpoint, LabelDistribution, Mode, PatchDnn, Widths};
pub use patching::{
    build_roi_mask, build_training_pool, extract_triplanar, next_batch, MiniBatch, RoiMask,
    TrainingPool, TriPlanarSample,
};
pub use pbs::{pbs_segment, select_atlases, ssd, PbsConfig};
pub use phantom::{generate_corpus, PhantomSpec, Subject};
pub use training::{sgd_step, train, TrainConfig, TrainLogRecord};
pub use volume::{load_volume, save_volume, Volume3D, VolumeKind, VoxelIndex};

use rand::SeedableRng;

/// The generator behind every random choice in the crate. ChaCha output is
/// specified independently of platform, so seeded runs reproduce everywhere.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// A generator for an independent stream derived from `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
