//! Weakly supervised referring image segmentation: mask utilities, candidate
//! selection, constrained matching, training losses and evaluation.

pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod image;
pub mod jsonl;
pub mod loss;
pub mod mask;
pub mod matcher;
pub mod prediction;
pub mod scenario;
pub mod select;
pub mod trainer;

pub use error::{Error, Result};
pub use mask::{iou, soft_iou, soft_iou_grad, BinaryGrid, Grid, RleMask, SoftMask};
pub use matcher::{brute_force_match, check_feasible, greedy_match, Assignment, MatchScores};

/// Rounds to two decimal places, the precision reported metrics are compared at.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}
