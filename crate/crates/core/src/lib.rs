//! Bias probing for text-to-image models from embedding similarities.
//!
//! A session holds anchor concepts with their images and embeddings, plus a
//! prompting tree of test concepts. Each test node serializes to a prompt,
//! which is embedded and compared against every anchor image. Mean
//! similarities become per-anchor likelihoods and, with a uniform prior,
//! posteriors that say which anchor the concept leans toward.
//!
//! Batch similarity, import and probing run data-parallel with the default
//! `parallel` feature and sequentially without it; results are identical.

pub mod color;
pub mod embedding;
pub mod engine;
pub mod generation;
pub mod ids;
pub mod imaging;
pub mod par;
pub mod report;
pub mod session;
pub mod synthetic;
pub mod tree;

pub use color::Color;
pub use embedding::{similarity, EmbeddingProvider, EmbeddingVector, SimilarityScore};
pub use engine::{posterior, BiasError, BiasScore, Posterior};
pub use ids::{AnchorId, ImageId};
pub use session::{Session, SessionConfig, SessionError};
pub use tree::{NodeId, PromptingTree};
