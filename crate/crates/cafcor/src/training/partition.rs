//! Splitting a dataset across workers.

use serde::Serialize;
use thiserror::Error;

use super::task::{Dataset, Example};
use crate::rng::{domain, KeyedStream};

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("cannot split {examples} examples across {parts} parts")]
    TooFewExamples { examples: usize, parts: usize },
    #[error("dirichlet concentration must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("parts must be >= 1")]
    NoParts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum PartitionScheme {
    /// Uniform shuffle, then near-equal contiguous shares.
    Iid,
    /// Per-class worker proportions drawn from a Dirichlet distribution;
    /// smaller `alpha` means more skew.
    Dirichlet { alpha: f64 },
    /// Sort by label and deal equal contiguous blocks: every worker sees as
    /// few classes as possible.
    Extreme,
}

/// Near-equal chunk sizes summing to `total`.
fn share_sizes(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts)
        .map(|i| base + usize::from(i < extra))
        .collect()
}

/// Split `examples` into `parts` datasets according to `scheme`; draws all
/// randomness from streams keyed by `seed`.
pub fn partition(
    examples: &[Example],
    parts: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<Dataset>, PartitionError> {
    if parts == 0 {
        return Err(PartitionError::NoParts);
    }
    if examples.len() < parts {
        return Err(PartitionError::TooFewExamples {
            examples: examples.len(),
            parts,
        });
    }
    match scheme {
        PartitionScheme::Iid => {
            let mut stream = KeyedStream::new(&[domain::PARTITION, seed], 0);
            let order = stream.sample_without_replacement(examples.len(), examples.len());
            let mut out: Vec<Dataset> = Vec::with_capacity(parts);
            let mut cursor = 0usize;
            for size in share_sizes(examples.len(), parts) {
                out.push(
                    order[cursor..cursor + size]
                        .iter()
                        .map(|&i| examples[i].clone())
                        .collect(),
                );
                cursor += size;
            }
            Ok(out)
        }
        PartitionScheme::Extreme => {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.sort_by_key(|&i| (examples[i].y, i));
            let mut out: Vec<Dataset> = Vec::with_capacity(parts);
            let mut cursor = 0usize;
            for size in share_sizes(examples.len(), parts) {
                out.push(
                    order[cursor..cursor + size]
                        .iter()
                        .map(|&i| examples[i].clone())
                        .collect(),
                );
                cursor += size;
            }
            Ok(out)
        }
        PartitionScheme::Dirichlet { alpha } => {
            if !alpha.is_finite() || alpha <= 0.0 {
                return Err(PartitionError::InvalidAlpha(alpha));
            }
            let mut stream = KeyedStream::new(&[domain::PARTITION, seed], 1);
            let mut by_class: Vec<Vec<usize>> = Vec::new();
            for (i, ex) in examples.iter().enumerate() {
                if ex.y >= by_class.len() {
                    by_class.resize(ex.y + 1, Vec::new());
                }
                by_class[ex.y].push(i);
            }
            let mut out: Vec<Dataset> = vec![Vec::new(); parts];
            for (class_idx, members) in by_class.iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                // Shuffle class members, draw worker proportions, assign
                // floors, then deal the remainder round-robin.
                let order = stream.sample_without_replacement(members.len(), members.len());
                let gammas: Vec<f64> = (0..parts).map(|_| stream.gamma(alpha)).collect();
                let total: f64 = gammas.iter().sum();
                let mut counts: Vec<usize> = gammas
                    .iter()
                    .map(|g| ((g / total) * members.len() as f64).floor() as usize)
                    .collect();
                let assigned: usize = counts.iter().sum();
                let mut leftover = members.len() - assigned;
                let mut w = class_idx % parts;
                while leftover > 0 {
                    counts[w] += 1;
                    leftover -= 1;
                    w = (w + 1) % parts;
                }
                let mut cursor = 0usize;
                for (worker, count) in counts.iter().enumerate() {
                    for &slot in &order[cursor..cursor + count] {
                        out[worker].push(examples[members[slot]].clone());
                    }
                    cursor += count;
                }
            }
            // A worker can come out empty under heavy skew; hand it one
            // example from the best-stocked worker so every share is usable.
            for w in 0..parts {
                if out[w].is_empty() {
                    let donor = (0..parts)
                        .max_by_key(|&i| out[i].len())
                        .expect("parts >= 1");
                    let ex = out[donor].pop().expect("donor cannot be empty");
                    out[w].push(ex);
                }
            }
            Ok(out)
        }
    }
}
