//! Semi-supervised volumetric segmentation at desk scale.
//!
//! Two differently-initialized tiny 3D U-Nets cross-supervise each other
//! on synthetic multi-organ phantoms. Pseudo-labels for the unlabeled
//! half of each batch are rectified by a class-conditional Gaussian
//! mixture fit on labeled-voxel features, and the cross-pseudo-
//! supervision loss is re-weighted by per-class learning difficulty.
//!
//! Everything runs on the CPU in 64-bit floats on top of a small
//! reverse-mode autodiff engine, so every training mechanism is exact,
//! seeded and testable. Start with the `examples/` directory: each
//! major capability (dataset generation, training, evaluation,
//! checkpoint inspection, ablation sweeps, gradient checking) has a
//! runnable example, and the `guidednet` binary wraps the same entry
//! points as subcommands.

pub mod cgmm;
pub mod error;
pub mod ktcps;
pub mod tensor;
pub mod unet;
pub mod util;

pub use error::{Error, Result};
