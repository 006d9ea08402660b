//! Turns per-partition embedding lists into the scaled sequence matrix a
//! GRU branch consumes: element-wise averaging, all-ones padding for empty
//! partitions, and the logarithmic count scaling c_k = ln(m_k + 1) + 1.
//!
//! The text branch and the user branch both go through `build_sequence`;
//! only what each partition's vector list contains differs (one vector per
//! post vs. one per distinct user).

use thiserror::Error;

use crate::nn::Mat;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// The scaled partition-embedding matrix fed to one GRU branch, with the
/// per-partition item counts m_k it was scaled by.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFeatures {
    pub x: Mat,
    pub counts: Vec<usize>,
}

impl SequenceFeatures {
    pub fn n(&self) -> usize {
        self.x.rows()
    }
}

/// Logarithmic scaling coefficient c = ln(m + 1) + 1.
pub fn scale_coefficient(m: usize) -> f64 {
    ((m + 1) as f64).ln() + 1.0
}

/// Element-wise mean of the vectors; the all-ones vector when the list is
/// empty (the padding convention for partitions without posts).
pub fn partition_embedding(vectors: &[Vec<f64>], dim: usize) -> Result<Vec<f64>, FeatureError> {
    if vectors.is_empty() {
        return Ok(vec![1.0; dim]);
    }
    let mut mean = vec![0.0; dim];
    for v in vectors {
        if v.len() != dim {
            return Err(FeatureError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let inv = 1.0 / vectors.len() as f64;
    for m in &mut mean {
        *m *= inv;
    }
    Ok(mean)
}

/// Builds the n x dim feature matrix: row k is the partition mean scaled by
/// c_k = ln(m_k + 1) + 1, where m_k is the size of partition k's vector list.
pub fn build_sequence(
    partition_vectors: &[Vec<Vec<f64>>],
    dim: usize,
) -> Result<SequenceFeatures, FeatureError> {
    let n = partition_vectors.len();
    let mut x = Mat::zeros(n, dim);
    let mut counts = Vec::with_capacity(n);
    for (k, vectors) in partition_vectors.iter().enumerate() {
        let mean = partition_embedding(vectors, dim)?;
        let c = scale_coefficient(vectors.len());
        for (dst, &m) in x.row_mut(k).iter_mut().zip(&mean) {
            *dst = c * m;
        }
        counts.push(vectors.len());
    }
    Ok(SequenceFeatures { x, counts })
}
