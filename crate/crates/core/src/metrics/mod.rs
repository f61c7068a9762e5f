//! Evaluation: mean IoU over a confusion matrix, and panoptic quality.

mod panoptic;
mod semantic;

pub use panoptic::{panoptic_stats, ClassPq, PanopticReport, PqStats, PqSummary};
pub use semantic::{ClassIou, ConfusionMatrix, SemanticReport};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("geometry mismatch: prediction {pred:?}, ground truth {gt:?}")]
    Geom { pred: (u32, u32), gt: (u32, u32) },
    #[error("nothing to evaluate: {0}")]
    EmptyEval(String),
    #[error("{which} contains id {id} outside the vocabulary")]
    Range { which: &'static str, id: u32 },
    #[error("confusion matrices over {0} and {1} classes cannot be merged")]
    Shape(usize, usize),
}
