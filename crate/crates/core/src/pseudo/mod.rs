//! Pseudo labels, entropy confidence, curriculum selection, examiner
//! triplets and the two pairwise correlation matrices.

mod augment;
mod triplets;

use serde::{Deserialize, Serialize};

use crate::nets::ExaminerVars;
use crate::tensor::{Real, Tape, Tensor, Var, LOG_EPS};
use crate::{Error, Result};

pub use augment::{augment, augment_batch, AugmentConfig};
pub use triplets::{construct_triplets, satisfies_rule, Triplet, TripletRule, TripletSet};

/// Tolerance on the row sum of a probability vector.
const NORMALISATION_TOL: f64 = 1e-6;

/// Shannon entropy in bits of a probability row.
pub fn entropy_bits<T: Real>(row: &[T]) -> Result<f64> {
    let sum: f64 = row.iter().map(|v| v.f64()).sum();
    if (sum - 1.0).abs() > NORMALISATION_TOL || row.iter().any(|v| !(v.f64() >= 0.0)) {
        return Err(Error::invalid(
            "entropy_bits",
            format!("row is not a probability vector (sum {sum})"),
        ));
    }
    Ok(-row
        .iter()
        .map(|v| {
            let p = v.f64();
            p * p.max(LOG_EPS).log2()
        })
        .sum::<f64>())
}

/// Per-row argmax; ties go to the lowest class id.
pub fn assign_pseudo_labels<T: Real>(scores: &Tensor<T>) -> Vec<usize> {
    let n = scores.shape().first().copied().unwrap_or(0);
    (0..n)
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Confidence of one target sample under the base network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub sample_index: usize,
    pub entropy: f64,
    pub pseudo_label: usize,
}

/// One record per row of a softmax matrix `[n, k]`.
pub fn confidence_records<T: Real>(probs: &Tensor<T>) -> Result<Vec<ConfidenceRecord>> {
    let labels = assign_pseudo_labels(probs);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, pseudo_label)| {
            Ok(ConfidenceRecord {
                sample_index: i,
                entropy: entropy_bits(probs.row(i))?,
                pseudo_label,
            })
        })
        .collect()
}

/// Number of samples kept at `stage`: `ceil(rho * n)` with
/// `rho = 1/2 + stage / (2 * max(total_stages - 1, 1))`, computed exactly.
pub fn curriculum_count(n: usize, stage: usize, total_stages: usize) -> usize {
    let d = total_stages.saturating_sub(1).max(1);
    let num = n * (d + stage.min(d));
    num.div_ceil(2 * d)
}

/// Lowest-entropy samples for a curriculum stage, most confident first.
/// Equal entropies are ordered by sample index.
pub fn curriculum_select(records: &[ConfidenceRecord], stage: usize, total_stages: usize) -> Result<Vec<usize>> {
    if records.is_empty() {
        return Err(Error::invalid("curriculum_select", "no confidence records"));
    }
    if total_stages == 0 || stage >= total_stages {
        return Err(Error::invalid(
            "curriculum_select",
            format!("stage {stage} outside 0..{total_stages}"),
        ));
    }
    let mut order: Vec<&ConfidenceRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        a.entropy
            .total_cmp(&b.entropy)
            .then(a.sample_index.cmp(&b.sample_index))
    });
    let count = curriculum_count(records.len(), stage, total_stages);
    Ok(order[..count].iter().map(|r| r.sample_index).collect())
}

/// Which network produced a correlation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationSource {
    Base,
    Examiner,
}

/// Pairwise similarity over one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub values: Tensor<f64>,
    pub source: CorrelationSource,
}

impl CorrelationMatrix {
    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values.data()[a * self.size() + b]
    }
}

/// Guard added to feature norms before normalising.
pub const NORM_EPS: f64 = 1e-12;

/// Cosine similarity of feature rows `[m, d]`, optionally mapped to `[0, 1]`
/// via `(1 + cos) / 2`.
pub fn base_correlation<'t, T: Real>(features: &Var<'t, T>, rescale: bool) -> Result<Var<'t, T>> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(
            "correlation_matrix_base",
            format!("expected [m, d], got {shape:?}"),
        ));
    }
    let norms = features
        .l2_norm_axis(1)?
        .add_scalar(T::of(NORM_EPS))
        .reshape(&[shape[0], 1])?;
    let unit = features.div(&norms)?;
    let cos = unit.matmul(&unit.transpose()?)?;
    Ok(if rescale {
        cos.add_scalar(T::one()).scale(T::of(0.5))
    } else {
        cos
    })
}

/// `(c + c^T) / 2`.
pub fn symmetrize<'t, T: Real>(c: &Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(c.add(&c.transpose()?)?.scale(T::of(0.5)))
}

/// Gradient-free base correlation matrix of a feature batch.
pub fn correlation_matrix_base<T: Real>(features: &Tensor<T>, rescale: bool) -> Result<CorrelationMatrix> {
    let tape = Tape::new();
    let c = base_correlation(&tape.constant(features.clone()), rescale)?;
    Ok(CorrelationMatrix {
        values: c.value().cast(),
        source: CorrelationSource::Base,
    })
}

/// Examiner correlation matrix of a batch `[m, c, h, w]`: entry `(a, b)` is
/// the probability that image `b` is closer to image `a` than the augmented
/// copy of `a`. `augmented` holds the augmented batch.
pub fn examiner_correlation<'t, T: Real>(
    examiner: &ExaminerVars<'t, T>,
    batch: &Var<'t, T>,
    augmented: &Var<'t, T>,
    symmetric: bool,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let pc = examiner.pairwise_closeness(batch, augmented)?;
    let matrix = if symmetric { symmetrize(&pc.matrix)? } else { pc.matrix };
    Ok((matrix, pc.attention))
}

/// Gradient-free examiner correlation matrix, augmenting with `rng`.
pub fn correlation_matrix_examiner<T: Real, R: rand::Rng>(
    examiner: &crate::nets::ExaminerNetwork<T>,
    batch: &Tensor<T>,
    augment_cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<CorrelationMatrix> {
    if batch.shape().first().copied().unwrap_or(0) < 2 {
        return Err(Error::invalid(
            "correlation_matrix_examiner",
            "batch needs at least 2 images",
        ));
    }
    let augmented = augment_batch(batch, augment_cfg, rng)?;
    let tape = Tape::new();
    let vars = examiner.bind(&tape, false);
    let (c, _) = examiner_correlation(&vars, &tape.constant(batch.clone()), &tape.constant(augmented), false)?;
    Ok(CorrelationMatrix {
        values: c.value().cast(),
        source: CorrelationSource::Examiner,
    })
}

#[cfg(test)]
mod tests;
