//! Unit-norm embedding vectors and the image/text similarity kernel.
//!
//! Vectors are stored and accumulated in `f64` regardless of how the provider
//! or the embeddings file delivered them. Every vector entering the engine is
//! renormalized, so the similarity `(a·b + 1) / 2` always lies in `[0, 1]`.

mod file;
mod provider;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use file::{decode_f32_le, encode_f32_le, load_embeddings_file, EmbeddingEntry, EmbeddingTable, EmbeddingsFile};
pub use provider::{
    embed_images, embed_texts, image_key, CountingProvider, EmbeddingProvider, FileProvider, HashProvider,
    ProviderOutput,
};

/// Norms at or below this are treated as a broken provider.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding has zero norm")]
    ZeroVector,
    #[error("embedding contains NaN or infinite components")]
    NonFinite,
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("malformed embeddings file: {0}")]
    Format(String),
    #[error("duplicate embedding id `{0}`")]
    DuplicateId(String),
    #[error("inconsistent embedding dimensions: {0}")]
    DimInconsistent(String),
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("provider returned dimension {found}, session expects {expected}")]
    ProviderDimMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EmbeddingError> = std::result::Result<T, E>;

/// A unit-length embedding of an image or a text.
#[derive(Clone, PartialEq)]
pub struct EmbeddingVector(Arc<[f64]>);

impl EmbeddingVector {
    /// Scales `raw` to unit L2 norm.
    ///
    /// The norm is computed on the max-abs-rescaled vector so very large or
    /// very small components neither overflow nor underflow.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(EmbeddingError::ZeroVector);
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let scale = raw.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            return Err(EmbeddingError::ZeroVector);
        }
        let scaled_norm = raw.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt();
        if scaled_norm * scale <= MIN_NORM {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(Self(raw.iter().map(|x| (x / scale) / scaled_norm).collect()))
    }

    pub fn from_f32(raw: &[f32]) -> Result<Self> {
        let wide: Vec<f64> = raw.iter().map(|&x| f64::from(x)).collect();
        Self::normalize(&wide)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Components narrowed to `f32`, the on-disk representation.
    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&x| x as f32).collect()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(dot_unchecked(&self.0, &other.0))
    }

    /// The antipodal vector.
    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|x| -x).collect())
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.0.iter().take(4).collect();
        write!(f, "EmbeddingVector(dim={}, head={:?})", self.dim(), head)
    }
}

#[inline]
fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Image/text similarity in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    /// Maps a cosine in `[-1, 1]` to `[0, 1]`, clamping rounding spill.
    pub fn from_cosine(cos: f64) -> Self {
        Self(((cos + 1.0) / 2.0).clamp(0.0, 1.0))
    }

    pub fn new(value: f64) -> Option<Self> {
        (0.0..=1.0).contains(&value).then_some(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<SimilarityScore> for f64 {
    fn from(s: SimilarityScore) -> f64 {
        s.0
    }
}

pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<SimilarityScore> {
    a.dot(b).map(SimilarityScore::from_cosine)
}

fn check_batch_dims(text: &EmbeddingVector, images: &[EmbeddingVector]) -> Result<()> {
    match images.iter().find(|v| v.dim() != text.dim()) {
        Some(bad) => Err(EmbeddingError::DimMismatch {
            expected: text.dim(),
            found: bad.dim(),
        }),
        None => Ok(()),
    }
}

/// Similarity of one text against many images, order preserved.
///
/// Uses the rayon path when the `parallel` feature is on.
pub fn batch_similarity(text: &EmbeddingVector, images: &[EmbeddingVector]) -> Result<Vec<SimilarityScore>> {
    check_batch_dims(text, images)?;
    Ok(crate::par::map(images, |img| {
        SimilarityScore::from_cosine(dot_unchecked(text.values(), img.values()))
    }))
}

/// Single-threaded [`batch_similarity`], always available.
pub fn batch_similarity_seq(text: &EmbeddingVector, images: &[EmbeddingVector]) -> Result<Vec<SimilarityScore>> {
    check_batch_dims(text, images)?;
    Ok(images
        .iter()
        .map(|img| SimilarityScore::from_cosine(dot_unchecked(text.values(), img.values())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(raw: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalize(raw).unwrap()
    }

    #[test]
    fn normalize_pythagorean() {
        let e = v(&[3.0, 4.0]);
        assert!((e.values()[0] - 0.6).abs() < 1e-15);
        assert!((e.values()[1] - 0.8).abs() < 1e-15);
        assert_eq!(v(&[1.0, 0.0, 0.0]).values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_degenerate() {
        assert!(matches!(
            EmbeddingVector::normalize(&[0.0, 0.0]),
            Err(EmbeddingError::ZeroVector)
        ));
        assert!(matches!(
            EmbeddingVector::normalize(&[]),
            Err(EmbeddingError::ZeroVector)
        ));
        assert!(matches!(
            EmbeddingVector::normalize(&[1e-13, 0.0]),
            Err(EmbeddingError::ZeroVector)
        ));
        assert!(matches!(
            EmbeddingVector::normalize(&[1.0, f64::NAN]),
            Err(EmbeddingError::NonFinite)
        ));
        assert!(matches!(
            EmbeddingVector::normalize(&[f64::INFINITY, 1.0]),
            Err(EmbeddingError::NonFinite)
        ));
    }

    #[test]
    fn normalize_survives_extreme_magnitudes() {
        let big = v(&[1e300, 1e300]);
        assert!((big.norm() - 1.0).abs() < 1e-12);
        let small = v(&[1e-10, -1e-10, 1e-10]);
        assert!((small.norm() - 1.0).abs() < 1e-12);
        assert!(matches!(
            EmbeddingVector::normalize(&[1e-200, -1e-200]),
            Err(EmbeddingError::ZeroVector)
        ));
    }

    #[test]
    fn similarity_landmarks() {
        let a = v(&[1.0, 2.0, -0.5]);
        assert_eq!(similarity(&a, &a).unwrap().value(), 1.0);
        assert_eq!(similarity(&a, &a.negated()).unwrap().value(), 0.0);
        let x = v(&[1.0, 0.0]);
        let y = v(&[0.0, 1.0]);
        assert_eq!(similarity(&x, &y).unwrap().value(), 0.5);
    }

    #[test]
    fn similarity_dim_mismatch() {
        let err = similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, EmbeddingError::DimMismatch { expected: 2, found: 3 }));
    }

    #[test]
    fn batch_examples() {
        let t = v(&[0.3, -0.2, 0.9]);
        let got: Vec<f64> = batch_similarity(&t, std::slice::from_ref(&t))
            .unwrap()
            .into_iter()
            .map(f64::from)
            .collect();
        assert_eq!(got, vec![1.0]);
        assert!(batch_similarity(&t, &[]).unwrap().is_empty());
        let got: Vec<f64> = batch_similarity(&t, &[t.clone(), t.negated()])
            .unwrap()
            .into_iter()
            .map(f64::from)
            .collect();
        assert_eq!(got, vec![1.0, 0.0]);
        assert!(batch_similarity(&t, &[v(&[1.0, 0.0])]).is_err());
    }

    #[test]
    fn score_constructor_checks_range() {
        assert!(SimilarityScore::new(1.2).is_none());
        assert!(SimilarityScore::new(-0.1).is_none());
        assert_eq!(SimilarityScore::from_cosine(1.0 + 1e-15).value(), 1.0);
    }
}
