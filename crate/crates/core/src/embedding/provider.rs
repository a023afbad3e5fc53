//! Embedding providers: the channel through which text and image vectors
//! reach the engine.
//!
//! The HTTP provider lives in the service crate. This module holds the trait,
//! the validation wrapper every caller goes through, and the offline
//! providers used for batch work and tests.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{EmbeddingError, EmbeddingTable, EmbeddingVector, Result};

/// Raw provider response, before validation and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderOutput {
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed_text(&self, texts: &[String]) -> Result<ProviderOutput>;

    /// `images` are encoded PNG bytes.
    fn embed_image(&self, images: &[Vec<u8>]) -> Result<ProviderOutput>;

    fn describe(&self) -> String {
        "embedding provider".to_owned()
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<P> {
    fn embed_text(&self, texts: &[String]) -> Result<ProviderOutput> {
        (**self).embed_text(texts)
    }

    fn embed_image(&self, images: &[Vec<u8>]) -> Result<ProviderOutput> {
        (**self).embed_image(images)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

fn validate(out: ProviderOutput, requested: usize, session_dim: Option<usize>) -> Result<Vec<EmbeddingVector>> {
    if out.embeddings.len() != requested {
        return Err(EmbeddingError::ProviderUnavailable(format!(
            "provider returned {} embeddings for {requested} inputs",
            out.embeddings.len()
        )));
    }
    if let Some(expected) = session_dim {
        if out.dim != expected {
            return Err(EmbeddingError::ProviderDimMismatch {
                expected,
                found: out.dim,
            });
        }
    }
    out.embeddings
        .iter()
        .map(|raw| {
            if raw.len() != out.dim {
                return Err(EmbeddingError::ProviderDimMismatch {
                    expected: out.dim,
                    found: raw.len(),
                });
            }
            EmbeddingVector::normalize(raw)
        })
        .collect()
}

/// Embeds texts through `provider`, checking the declared dimension against
/// the session and renormalizing every vector.
pub fn embed_texts(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    session_dim: Option<usize>,
) -> Result<Vec<EmbeddingVector>> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    if texts.iter().any(|t| t.trim().is_empty()) {
        log::warn!("embedding an empty text; provider behavior for empty input varies");
    }
    let out = provider.embed_text(texts)?;
    validate(out, texts.len(), session_dim)
}

pub fn embed_images(
    provider: &dyn EmbeddingProvider,
    images: &[Vec<u8>],
    session_dim: Option<usize>,
) -> Result<Vec<EmbeddingVector>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let out = provider.embed_image(images)?;
    validate(out, images.len(), session_dim)
}

/// Key under which [`FileProvider`] looks up an image: the hex SHA-256 of its
/// bytes, prefixed with `sha256:`.
pub fn image_key(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut key = String::with_capacity(7 + 64);
    key.push_str("sha256:");
    for b in digest.iter() {
        key.push_str(&format!("{b:02x}"));
    }
    key
}

/// Serves vectors from an embeddings file. Texts are looked up by their exact
/// string, images by [`image_key`]. A miss is reported as an unavailable
/// provider.
#[derive(Debug, Clone)]
pub struct FileProvider {
    table: EmbeddingTable,
}

impl FileProvider {
    pub fn new(table: EmbeddingTable) -> Self {
        Self { table }
    }

    pub fn open(path: &std::path::Path) -> Result<Self> {
        EmbeddingTable::read(path).map(Self::new)
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    fn lookup(&self, key: &str) -> Result<Vec<f64>> {
        self.table
            .get(key)
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| EmbeddingError::ProviderUnavailable(format!("no embedding on file for `{key}`")))
    }
}

impl EmbeddingProvider for FileProvider {
    fn embed_text(&self, texts: &[String]) -> Result<ProviderOutput> {
        let embeddings = texts.iter().map(|t| self.lookup(t)).collect::<Result<_>>()?;
        Ok(ProviderOutput {
            dim: self.table.dim,
            embeddings,
        })
    }

    fn embed_image(&self, images: &[Vec<u8>]) -> Result<ProviderOutput> {
        let embeddings = images
            .iter()
            .map(|b| self.lookup(&image_key(b)))
            .collect::<Result<_>>()?;
        Ok(ProviderOutput {
            dim: self.table.dim,
            embeddings,
        })
    }

    fn describe(&self) -> String {
        format!("file provider ({})", self.table.encoder)
    }
}

/// Deterministic pseudo-embeddings derived from a hash of the input.
///
/// Identical inputs always map to identical vectors, distinct inputs to
/// nearly orthogonal ones. Explicit text overrides let tests plant known
/// directions for chosen strings.
#[derive(Debug, Clone)]
pub struct HashProvider {
    dim: usize,
    seed: u64,
    overrides: HashMap<String, Vec<f64>>,
}

impl HashProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self {
            dim,
            seed,
            overrides: HashMap::new(),
        }
    }

    pub fn with_text(mut self, text: impl Into<String>, vector: &EmbeddingVector) -> Self {
        assert_eq!(vector.dim(), self.dim);
        self.overrides.insert(text.into(), vector.values().to_vec());
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn hashed(&self, domain: &[u8], payload: &[u8]) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(domain);
        hasher.update(payload);
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&hasher.finalize());
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    pub fn text_vector(&self, text: &str) -> Vec<f64> {
        self.overrides
            .get(text)
            .cloned()
            .unwrap_or_else(|| self.hashed(b"text", text.as_bytes()))
    }

    pub fn image_vector(&self, bytes: &[u8]) -> Vec<f64> {
        self.hashed(b"image", bytes)
    }
}

impl EmbeddingProvider for HashProvider {
    fn embed_text(&self, texts: &[String]) -> Result<ProviderOutput> {
        Ok(ProviderOutput {
            dim: self.dim,
            embeddings: texts.iter().map(|t| self.text_vector(t)).collect(),
        })
    }

    fn embed_image(&self, images: &[Vec<u8>]) -> Result<ProviderOutput> {
        Ok(ProviderOutput {
            dim: self.dim,
            embeddings: images.iter().map(|b| self.image_vector(b)).collect(),
        })
    }

    fn describe(&self) -> String {
        format!("hash provider (dim {}, seed {})", self.dim, self.seed)
    }
}

/// Wraps a provider and counts calls, for cache and call-budget checks.
#[derive(Debug, Default)]
pub struct CountingProvider<P> {
    inner: P,
    text_calls: AtomicUsize,
    text_items: AtomicUsize,
    image_calls: AtomicUsize,
    image_items: AtomicUsize,
}

impl<P> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            text_calls: AtomicUsize::new(0),
            text_items: AtomicUsize::new(0),
            image_calls: AtomicUsize::new(0),
            image_items: AtomicUsize::new(0),
        }
    }

    pub fn text_calls(&self) -> usize {
        self.text_calls.load(Ordering::SeqCst)
    }

    pub fn text_items(&self) -> usize {
        self.text_items.load(Ordering::SeqCst)
    }

    pub fn image_calls(&self) -> usize {
        self.image_calls.load(Ordering::SeqCst)
    }

    pub fn image_items(&self) -> usize {
        self.image_items.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CountingProvider<P> {
    fn embed_text(&self, texts: &[String]) -> Result<ProviderOutput> {
        self.text_calls.fetch_add(1, Ordering::SeqCst);
        self.text_items.fetch_add(texts.len(), Ordering::SeqCst);
        self.inner.embed_text(texts)
    }

    fn embed_image(&self, images: &[Vec<u8>]) -> Result<ProviderOutput> {
        self.image_calls.fetch_add(1, Ordering::SeqCst);
        self.image_items.fetch_add(images.len(), Ordering::SeqCst);
        self.inner.embed_image(images)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}
