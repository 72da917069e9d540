use std::collections::HashMap;
use std::hash::Hash;

use super::EvalError;

/// Corpus-level BLEU without a brevity penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// `scores[n - 1]` is BLEU-n: the geometric mean of the modified
    /// precisions of orders 1..=n.
    pub scores: Vec<f64>,
    /// Clipped modified precision of each order.
    pub precisions: Vec<f64>,
    pub candidates: usize,
    pub candidate_tokens: usize,
}

impl BleuReport {
    /// BLEU-n, or 0 beyond the computed orders.
    pub fn bleu(&self, n: usize) -> f64 {
        n.checked_sub(1)
            .and_then(|i| self.scores.get(i))
            .copied()
            .unwrap_or(0.0)
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Scores `candidates[i]` against the reference set `references[i]`.
/// Candidate n-gram counts are clipped by their largest count in any one
/// reference; a zero precision at some order zeroes that order and all
/// higher ones.
pub fn bleu<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    max_n: usize,
) -> Result<BleuReport, EvalError> {
    if max_n == 0 {
        return Err(EvalError::ZeroOrder);
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyCandidates);
    }
    if candidates.len() != references.len() {
        return Err(EvalError::CountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(EvalError::EmptyReferenceSet(i));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (cand, refs) in candidates.iter().zip(references) {
        for n in 1..=max_n {
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (gram, c) in ngram_counts(r, n) {
                    let slot = max_ref.entry(gram).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
            for (gram, c) in ngram_counts(cand, n) {
                matched[n - 1] += c.min(max_ref.get(gram).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    for (i, &p) in precisions.iter().enumerate() {
        if p == 0.0 || scores.last() == Some(&0.0) {
            scores.push(0.0);
            continue;
        }
        log_sum += p.ln();
        scores.push((log_sum / (i + 1) as f64).exp());
    }
    Ok(BleuReport {
        scores,
        precisions,
        candidates: candidates.len(),
        candidate_tokens: candidates.iter().map(Vec::len).sum(),
    })
}
