//! Bias scoring.
//!
//! A test concept's likelihood under an anchor is its mean similarity to that
//! anchor's images. With a uniform prior over anchors, Bayes' rule turns the
//! likelihoods into per-anchor posteriors:
//!
//! ```text
//! P(t | c_j) = mean_k s(I_jk, t)
//! P(t)       = (1/|C|) Σ_j P(t | c_j)
//! P(c_j | t) = P(t | c_j) (1/|C|) / P(t)
//! ```
//!
//! The evidence uses the law of total probability. For equal image counts per
//! anchor it equals the plain mean over all anchor images.

mod ks;
mod query;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{batch_similarity, EmbeddingError, EmbeddingVector, SimilarityScore};
use crate::ids::{AnchorId, ImageId};
use crate::tree::{NodeId, TreeError};

pub use ks::{kolmogorov_q, ks_p_value, ks_two_sample, KsResult};
pub use query::{
    anchor_similarities, forward_query, intersection_query, inverse_query, recompute_node_scores, score_text,
    ForwardQueryResult, IntersectionPoint, InverseOrigin, InversePoint, NodeScores, QueryEffects, ScoredImage,
    ScoringSnapshot,
};

/// Evidence below this is treated as zero and yields a uniform posterior.
pub const DEGENERATE_EVIDENCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum BiasError {
    #[error("anchor has no images")]
    EmptyAnchorSet,
    #[error("at least two anchors are required, got {0}")]
    TooFewAnchors(usize),
    #[error("likelihood {value} for anchor {anchor} is outside [0, 1]")]
    OutOfRangeLikelihood { anchor: AnchorId, value: f64 },
    #[error("sample is empty")]
    EmptySample,
    #[error("sample contains non-finite values")]
    NonFiniteSample,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("session has no anchor images with embeddings")]
    EmptySession,
    #[error("node {0} has no generated images")]
    NoGeneratedImages(NodeId),
    #[error("inverse queries need exactly two anchors, got {0}")]
    NotTwoAnchors(usize),
    #[error("unknown anchor {0}")]
    UnknownAnchor(AnchorId),
    #[error("missing embedding for image {0}")]
    MissingEmbedding(ImageId),
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("inconsistent cache write for ({text:?}, {image})")]
    InconsistentCacheWrite { text: String, image: ImageId },
}

impl From<EmbeddingError> for BiasError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::DimMismatch { expected, found } => BiasError::DimMismatch { expected, found },
            EmbeddingError::ProviderUnavailable(msg) => BiasError::ProviderUnavailable(msg),
            other => BiasError::Provider(other.to_string()),
        }
    }
}

/// Mean similarity between a test text and one anchor's images.
pub fn likelihood(test: &EmbeddingVector, anchor_images: &[EmbeddingVector]) -> Result<f64, BiasError> {
    if anchor_images.is_empty() {
        return Err(BiasError::EmptyAnchorSet);
    }
    let sims = batch_similarity(test, anchor_images)?;
    Ok(mean(sims.iter().map(|s| s.value()), sims.len()))
}

pub(crate) fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub likelihoods: IndexMap<AnchorId, f64>,
    pub posteriors: IndexMap<AnchorId, f64>,
    pub evidence: f64,
    pub degenerate: bool,
}

impl Posterior {
    /// Anchor with the highest posterior; the earliest anchor wins ties.
    pub fn tendency(&self) -> &AnchorId {
        let mut best: Option<(&AnchorId, f64)> = None;
        for (id, &p) in &self.posteriors {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((id, p));
            }
        }
        best.expect("posterior has at least two anchors").0
    }
}

/// Uniform-prior Bayes posterior over anchors.
pub fn posterior(likelihoods: &IndexMap<AnchorId, f64>) -> Result<Posterior, BiasError> {
    if likelihoods.len() < 2 {
        return Err(BiasError::TooFewAnchors(likelihoods.len()));
    }
    if let Some((anchor, &value)) = likelihoods.iter().find(|(_, &l)| !(0.0..=1.0).contains(&l)) {
        return Err(BiasError::OutOfRangeLikelihood {
            anchor: anchor.clone(),
            value,
        });
    }
    let prior = 1.0 / likelihoods.len() as f64;
    let evidence = prior * likelihoods.values().sum::<f64>();
    let degenerate = evidence < DEGENERATE_EVIDENCE;
    let posteriors = likelihoods
        .iter()
        .map(|(id, &l)| {
            let p = if degenerate { prior } else { l * prior / evidence };
            (id.clone(), p)
        })
        .collect();
    Ok(Posterior {
        likelihoods: likelihoods.clone(),
        posteriors,
        evidence,
        degenerate,
    })
}

/// A posterior for one serialized test text, stamped with the tree version
/// it was computed against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasScore {
    pub test_text: String,
    pub tree_version: u64,
    #[serde(flatten)]
    pub posterior: Posterior,
}

/// Per-anchor similarity lists in session image order.
pub type AnchorSimilarities = IndexMap<AnchorId, Vec<(ImageId, SimilarityScore)>>;

/// Likelihoods and posterior from per-anchor similarity lists.
pub fn posterior_from_similarities(sims: &AnchorSimilarities) -> Result<Posterior, BiasError> {
    let mut likelihoods = IndexMap::with_capacity(sims.len());
    for (anchor, list) in sims {
        if list.is_empty() {
            return Err(BiasError::EmptyAnchorSet);
        }
        likelihoods.insert(anchor.clone(), mean(list.iter().map(|(_, s)| s.value()), list.len()));
    }
    let counts: Vec<usize> = sims.values().map(Vec::len).collect();
    if counts.windows(2).any(|w| w[0] != w[1]) {
        log::warn!("anchor image counts differ ({counts:?}); posteriors assume a uniform prior");
    }
    posterior(&likelihoods)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lmap(pairs: &[(&str, f64)]) -> IndexMap<AnchorId, f64> {
        pairs.iter().map(|(k, v)| (AnchorId::from(*k), *v)).collect()
    }

    fn unit(raw: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalize(raw).unwrap()
    }

    #[test]
    fn likelihood_examples() {
        let t = unit(&[1.0, 2.0, 3.0]);
        assert_eq!(likelihood(&t, &[t.clone(), t.clone()]).unwrap(), 1.0);
        assert_eq!(likelihood(&t, &[t.clone(), t.negated()]).unwrap(), 0.5);
        assert_eq!(likelihood(&t, &[]), Err(BiasError::EmptyAnchorSet));
        assert!(matches!(
            likelihood(&t, &[unit(&[1.0, 0.0])]),
            Err(BiasError::DimMismatch { .. })
        ));
    }

    #[test]
    fn likelihood_matches_loop_oracle() {
        let t = unit(&[0.2, -0.4, 0.1, 0.9]);
        let imgs: Vec<_> = [
            [0.1, 0.2, 0.3, 0.4],
            [-0.5, 0.1, 0.0, 0.2],
            [0.9, -0.9, 0.3, 0.1],
            [0.0, 0.0, 1.0, 0.0],
            [0.3, 0.3, -0.3, -0.3],
        ]
        .iter()
        .map(|r| unit(r))
        .collect();
        let mut oracle = 0.0;
        for img in &imgs {
            let mut dot = 0.0;
            for k in 0..4 {
                dot += t.values()[k] * img.values()[k];
            }
            oracle += (dot + 1.0) / 2.0;
        }
        oracle /= imgs.len() as f64;
        assert!((likelihood(&t, &imgs).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn posterior_symmetric() {
        let p = posterior(&lmap(&[("c1", 0.5), ("c2", 0.5)])).unwrap();
        assert_eq!(p.posteriors.values().copied().collect::<Vec<_>>(), vec![0.5, 0.5]);
        assert_eq!(p.evidence, 0.5);
        assert!(!p.degenerate);
    }

    #[test]
    fn posterior_hand_evaluated() {
        // evidence = 0.5 (0.7 + 0.5) = 0.6; P(c1|t) = 0.7·0.5/0.6 = 7/12.
        let p = posterior(&lmap(&[("c1", 0.7), ("c2", 0.5)])).unwrap();
        assert!((p.evidence - 0.6).abs() < 1e-15);
        assert!((p.posteriors["c1"] - 7.0 / 12.0).abs() < 1e-15);
        assert!((p.posteriors["c2"] - 5.0 / 12.0).abs() < 1e-15);
        assert_eq!(p.tendency().as_str(), "c1");
    }

    #[test]
    fn posterior_degenerate() {
        let p = posterior(&lmap(&[("c1", 0.0), ("c2", 0.0)])).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.posteriors["c1"], 0.5);
        assert_eq!(p.posteriors["c2"], 0.5);
    }

    #[test]
    fn posterior_errors() {
        assert_eq!(posterior(&lmap(&[("c1", 0.5)])), Err(BiasError::TooFewAnchors(1)));
        assert!(matches!(
            posterior(&lmap(&[("c1", 0.5), ("c2", 1.5)])),
            Err(BiasError::OutOfRangeLikelihood { .. })
        ));
        assert!(matches!(
            posterior(&lmap(&[("c1", f64::NAN), ("c2", 0.5)])),
            Err(BiasError::OutOfRangeLikelihood { .. })
        ));
    }

    #[test]
    fn three_anchor_prior() {
        let p = posterior(&lmap(&[("a", 0.6), ("b", 0.3), ("c", 0.3)])).unwrap();
        assert!((p.evidence - 0.4).abs() < 1e-15);
        assert!((p.posteriors["a"] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tendency_ties_go_to_first_anchor() {
        let p = posterior(&lmap(&[("x", 0.4), ("y", 0.4)])).unwrap();
        assert_eq!(p.tendency().as_str(), "x");
    }

    #[test]
    fn bias_score_json_is_flat() {
        let score = BiasScore {
            test_text: "picture".into(),
            tree_version: 3,
            posterior: posterior(&lmap(&[("c1", 0.5), ("c2", 0.5)])).unwrap(),
        };
        let v = serde_json::to_value(&score).unwrap();
        assert_eq!(v["tree_version"], 3);
        assert_eq!(v["posteriors"]["c1"], 0.5);
        let back: BiasScore = serde_json::from_value(v).unwrap();
        assert_eq!(back, score);
    }
}
