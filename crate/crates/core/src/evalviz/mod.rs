//! Caption scoring and attention visualisation.

mod bleu;
mod export;
mod heatmap;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::attention::AttentionTrace;

pub use bleu::{bleu, BleuReport};
pub use export::{export_heatmaps, read_pgm, write_pgm, Graymap, MANIFEST_SUFFIX};
pub use heatmap::{gaussian_kernel, render_attention, smooth_weights, Heatmap, DEFAULT_SIGMA, UPSAMPLE};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no candidates to score")]
    EmptyCandidates,
    #[error("{candidates} candidates but {references} reference sets")]
    CountMismatch { candidates: usize, references: usize },
    #[error("reference set {0} is empty")]
    EmptyReferenceSet(usize),
    #[error("max_n must be at least 1")]
    ZeroOrder,
    #[error("{0} locations do not form a square grid")]
    NonSquare(usize),
    #[error("gaussian sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("base image is {found:?}, heatmaps are {expected:?}")]
    BaseSize {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("malformed graymap: {0}")]
    Graymap(String),
}

/// Mean attention mass placed on the ground-truth cell of each aligned word.
///
/// `alignment` pairs a caption position (the step that emitted the word)
/// with a location index. Pairs beyond the end of the trace are ignored;
/// `None` when nothing is left to score.
pub fn alignment_score(trace: &AttentionTrace, alignment: &[(usize, usize)]) -> Option<f64> {
    let masses: Vec<f64> = alignment
        .iter()
        .filter_map(|&(pos, cell)| trace.per_step.get(pos).and_then(|w| w.as_slice().get(cell)).copied())
        .collect();
    (!masses.is_empty()).then(|| masses.iter().sum::<f64>() / masses.len() as f64)
}
