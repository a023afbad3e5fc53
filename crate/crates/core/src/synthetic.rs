//! Constructed embeddings with a known answer.
//!
//! The separable fixture plants a test direction `t`: anchor-1 images sit at
//! cosine 0.90..0.99 from `t`, anchor-2 images at -0.95..-0.85. The balanced
//! fixture mirrors anchor-1 images across a separation axis to produce
//! anchor-2, so any text orthogonal to that axis scores both anchors equally.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{image_key, EmbeddingTable, EmbeddingVector};
use crate::ids::{AnchorId, ImageId};
use crate::imaging::noise_png;
use crate::session::{save_session, AnchorSpec, ImageOwner, PreparedImage, Session, SessionConfig, SessionError};

/// Source of reproducible unit vectors over the standard basis.
#[derive(Debug, Clone, Copy)]
pub struct Planted {
    dim: usize,
    seed: u64,
}

impl Planted {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 4, "fixtures need at least four dimensions");
        Self { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit basis vector `e_i`.
    pub fn axis(&self, i: usize) -> EmbeddingVector {
        let mut v = vec![0.0; self.dim];
        v[i] = 1.0;
        EmbeddingVector::normalize(&v).expect("basis vector")
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// A pseudo-random unit vector, one per `stream`.
    pub fn random_unit(&self, stream: u64) -> EmbeddingVector {
        let mut rng = self.rng(stream);
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(u) = EmbeddingVector::normalize(&v) {
                return u;
            }
        }
    }
}

/// Unit vector with cosine `cos` to `target`, leaning toward `noise` in the
/// orthogonal complement. `noise` must not be parallel to `target`.
pub fn unit_with_cosine(target: &EmbeddingVector, cos: f64, noise: &EmbeddingVector) -> EmbeddingVector {
    let t = target.values();
    let n = noise.values();
    let proj: f64 = t.iter().zip(n).map(|(a, b)| a * b).sum();
    let ortho: Vec<f64> = n.iter().zip(t).map(|(x, ti)| x - proj * ti).collect();
    let ortho = EmbeddingVector::normalize(&ortho).expect("noise parallel to target");
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    let v: Vec<f64> = t.iter().zip(ortho.values()).map(|(a, b)| cos * a + sin * b).collect();
    EmbeddingVector::normalize(&v).expect("unit combination")
}

/// A synthetic session: anchor prompts, images with vectors, and text vectors
/// for an offline provider.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub dim: usize,
    pub anchors: Vec<AnchorSpec>,
    pub images: Vec<(AnchorId, Vec<PreparedImage>)>,
    /// Texts the offline provider knows, with their raw vectors.
    pub texts: Vec<(String, Vec<f32>)>,
    /// Concepts to probe with.
    pub probes: Vec<String>,
}

pub const ANCHOR_ONE_PROMPT: &str = "picture that shows a woman";
pub const ANCHOR_TWO_PROMPT: &str = "picture that shows a man";

fn anchors() -> Vec<AnchorSpec> {
    vec![
        AnchorSpec::new(ANCHOR_ONE_PROMPT).with_label("woman"),
        AnchorSpec::new(ANCHOR_TWO_PROMPT).with_label("man"),
    ]
}

fn prepared(anchor: u64, seed: u64, i: usize, v: &EmbeddingVector) -> PreparedImage {
    let pixel_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (anchor << 32) ^ i as u64;
    PreparedImage {
        id: ImageId::new(format!("c{anchor}_{i:03}")),
        bytes: noise_png(pixel_seed, 8, 8),
        raw: v.to_f32(),
    }
}

/// Anchor-1 images close to the planted direction, anchor-2 images opposite.
/// The anchor-1 prompt itself embeds to the planted direction.
pub fn separable(n: usize, dim: usize, seed: u64) -> Fixture {
    let p = Planted::new(dim, seed);
    let t = p.axis(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let ca = rng.random_range(0.90..0.99);
        let cb = rng.random_range(-0.95..-0.85);
        a.push(prepared(
            1,
            seed,
            i,
            &unit_with_cosine(&t, ca, &p.random_unit(1 + i as u64)),
        ));
        b.push(prepared(
            2,
            seed,
            i,
            &unit_with_cosine(&t, cb, &p.random_unit(10_001 + i as u64)),
        ));
    }
    Fixture {
        dim,
        anchors: anchors(),
        images: vec![(AnchorId::from("c1"), a), (AnchorId::from("c2"), b)],
        texts: vec![
            (ANCHOR_ONE_PROMPT.to_owned(), t.to_f32()),
            (ANCHOR_TWO_PROMPT.to_owned(), t.negated().to_f32()),
        ],
        probes: vec![ANCHOR_ONE_PROMPT.to_owned()],
    }
}

/// Anchor-2 images are anchor-1 images with the separation axis (`e_1`)
/// component negated. Probe texts have no component on that axis.
pub fn balanced(n: usize, dim: usize, seed: u64) -> Fixture {
    let p = Planted::new(dim, seed);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = p.random_unit(1 + i as u64).values().to_vec();
        v[1] = v[1].abs() + 0.5;
        let va = EmbeddingVector::normalize(&v).expect("nonzero");
        let mut mirrored = va.values().to_vec();
        mirrored[1] = -mirrored[1];
        let vb = EmbeddingVector::normalize(&mirrored).expect("nonzero");
        a.push(prepared(1, seed, i, &va));
        b.push(prepared(2, seed, i, &vb));
    }
    let probes = [
        "picture that shows a person",
        "picture that shows a person wearing a hat",
        "picture that shows a smiling person",
    ];
    let mut texts = vec![
        (ANCHOR_ONE_PROMPT.to_owned(), p.axis(1).to_f32()),
        (ANCHOR_TWO_PROMPT.to_owned(), p.axis(1).negated().to_f32()),
    ];
    for (k, text) in probes.iter().enumerate() {
        let mut v = p.random_unit(50_000 + k as u64).values().to_vec();
        v[1] = 0.0;
        texts.push((
            text.to_string(),
            EmbeddingVector::normalize(&v).expect("nonzero").to_f32(),
        ));
    }
    Fixture {
        dim,
        anchors: anchors(),
        images: vec![(AnchorId::from("c1"), a), (AnchorId::from("c2"), b)],
        texts,
        probes: probes.iter().map(|s| s.to_string()).collect(),
    }
}

impl Fixture {
    /// Creates the session, writes images and vectors, and saves it to `dir`.
    pub fn build_session(&self, dir: &Path) -> Result<Session, SessionError> {
        let n = self.images.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(1);
        let config = SessionConfig {
            n,
            ..Default::default()
        };
        let mut session = Session::create("synthetic", self.anchors.clone(), config)?;
        for (anchor, images) in &self.images {
            let prompt = session.anchor(anchor)?.prompt_text.clone();
            crate::session::ingest(&mut session, dir, ImageOwner::Anchor(anchor.clone()), &prompt, images)?;
        }
        save_session(&session, dir)?;
        Ok(session)
    }

    /// Embeddings file for an offline provider: texts by string, images by
    /// content hash.
    pub fn provider_table(&self) -> EmbeddingTable {
        let mut table = EmbeddingTable::new(self.dim, "synthetic");
        for (text, v) in &self.texts {
            table.insert(text.clone(), v.clone()).expect("fixture dims agree");
        }
        for (_, images) in &self.images {
            for img in images {
                table
                    .insert(image_key(&img.bytes), img.raw.clone())
                    .expect("fixture dims agree");
            }
        }
        table
    }

    /// Embeddings file keyed by image id, as accepted by anchor import.
    pub fn image_table(&self) -> EmbeddingTable {
        let mut table = EmbeddingTable::new(self.dim, "synthetic");
        for (_, images) in &self.images {
            for img in images {
                table
                    .insert(img.id.0.clone(), img.raw.clone())
                    .expect("fixture dims agree");
            }
        }
        table
    }
}
