//! Forward, intersection and inverse queries plus node scoring.
//!
//! Everything here runs against a [`ScoringSnapshot`], an immutable copy of
//! what the computation needs, so callers can release the session while a
//! provider call is in flight. Side effects come back as [`QueryEffects`] and
//! are applied to the session afterwards.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{posterior_from_similarities, AnchorSimilarities, BiasError, BiasScore};
use crate::embedding::{batch_similarity, embed_texts, EmbeddingProvider, EmbeddingVector, SimilarityScore};
use crate::ids::{AnchorId, ImageId};
use crate::par;
use crate::session::{CacheRow, ImageOwner, Session, SessionError};
use crate::tree::NodeId;

type Result<T, E = BiasError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
struct AnchorSnap {
    id: AnchorId,
    prompt_text: String,
    text_vector: Option<EmbeddingVector>,
    images: Vec<(ImageId, EmbeddingVector)>,
}

/// What a scoring run needs from a session, detached from it.
#[derive(Debug, Clone)]
pub struct ScoringSnapshot {
    pub session_version: u64,
    pub tree_version: u64,
    pub dim: Option<usize>,
    anchors: Vec<AnchorSnap>,
    node_images: BTreeMap<NodeId, Vec<(ImageId, EmbeddingVector)>>,
    /// Cached anchor similarities for the texts requested at capture time.
    cached: BTreeMap<String, AnchorSimilarities>,
}

/// Changes a query wants to make to the session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryEffects {
    pub cache_rows: Vec<CacheRow>,
    pub anchor_texts: Vec<(AnchorId, EmbeddingVector)>,
}

impl QueryEffects {
    pub fn extend(&mut self, other: QueryEffects) {
        self.cache_rows.extend(other.cache_rows);
        self.anchor_texts.extend(other.anchor_texts);
    }

    pub fn is_empty(&self) -> bool {
        self.cache_rows.is_empty() && self.anchor_texts.is_empty()
    }

    pub fn apply(self, session: &mut Session) -> Result<(), SessionError> {
        for (anchor, v) in &self.anchor_texts {
            if session.anchor_text_vector(anchor).is_none() {
                session.set_anchor_text_embedding(anchor, v)?;
            }
        }
        for row in self.cache_rows {
            // Images may have been dropped while the query ran.
            if session.image(&row.image_id).is_ok() {
                session.cache_put(&row.text, &row.image_id, row.score)?;
            }
        }
        Ok(())
    }
}

impl ScoringSnapshot {
    /// Captures vectors and, for each of `texts`, any complete cached row.
    pub fn capture<S: AsRef<str>>(session: &Session, texts: &[S]) -> Result<Self> {
        let mut anchors = Vec::with_capacity(session.anchors().len());
        for a in session.anchors() {
            let images = session.anchor_image_vectors(&a.id).map_err(|e| match e {
                SessionError::MissingEmbedding(id) => BiasError::MissingEmbedding(id),
                other => BiasError::Provider(other.to_string()),
            })?;
            anchors.push(AnchorSnap {
                id: a.id.clone(),
                prompt_text: a.prompt_text.clone(),
                text_vector: session.anchor_text_vector(&a.id).cloned(),
                images,
            });
        }
        let mut node_images: BTreeMap<NodeId, Vec<(ImageId, EmbeddingVector)>> = BTreeMap::new();
        for rec in session.images() {
            if let ImageOwner::Node(n) = rec.owner {
                let v = session
                    .image_vector(&rec.id)
                    .ok_or_else(|| BiasError::MissingEmbedding(rec.id.clone()))?;
                node_images.entry(n).or_default().push((rec.id.clone(), v.clone()));
            }
        }
        let mut snap = Self {
            session_version: session.version(),
            tree_version: session.tree().version(),
            dim: session.config().dim,
            anchors,
            node_images,
            cached: BTreeMap::new(),
        };
        for text in texts {
            let text = text.as_ref();
            if let Some(sims) = snap.lookup_cache(session, text) {
                snap.cached.insert(text.to_owned(), sims);
            }
        }
        Ok(snap)
    }

    fn lookup_cache(&self, session: &Session, text: &str) -> Option<AnchorSimilarities> {
        let mut out = IndexMap::with_capacity(self.anchors.len());
        for a in &self.anchors {
            let values = session.cache().get_all(text, a.images.iter().map(|(id, _)| id))?;
            let list = a
                .images
                .iter()
                .zip(values)
                .map(|((id, _), v)| Some((id.clone(), SimilarityScore::new(v)?)))
                .collect::<Option<Vec<_>>>()?;
            out.insert(a.id.clone(), list);
        }
        Some(out)
    }

    pub fn anchor_ids(&self) -> Vec<AnchorId> {
        self.anchors.iter().map(|a| a.id.clone()).collect()
    }

    pub fn anchor_image_count(&self) -> usize {
        self.anchors.iter().map(|a| a.images.len()).sum()
    }

    pub fn is_cached(&self, text: &str) -> bool {
        self.cached.contains_key(text)
    }

    fn require_images(&self) -> Result<()> {
        if self.anchors.iter().any(|a| a.images.is_empty()) {
            return Err(BiasError::EmptySession);
        }
        Ok(())
    }

    fn embed_one(&self, provider: &dyn EmbeddingProvider, text: &str) -> Result<EmbeddingVector> {
        let mut v = embed_texts(provider, &[text.to_owned()], self.dim)?;
        Ok(v.pop().expect("one vector per text"))
    }

    /// Similarities of a text vector against every anchor image, in session order.
    pub fn similarities_for(&self, text_vector: &EmbeddingVector) -> Result<AnchorSimilarities> {
        let mut out = IndexMap::with_capacity(self.anchors.len());
        for a in &self.anchors {
            let vectors: Vec<EmbeddingVector> = a.images.iter().map(|(_, v)| v.clone()).collect();
            let sims = batch_similarity(text_vector, &vectors)?;
            out.insert(
                a.id.clone(),
                a.images.iter().map(|(id, _)| id.clone()).zip(sims).collect(),
            );
        }
        Ok(out)
    }
}

fn rows_for(text: &str, sims: &AnchorSimilarities) -> Vec<CacheRow> {
    sims.values()
        .flatten()
        .map(|(id, s)| CacheRow {
            text: text.to_owned(),
            image_id: id.clone(),
            score: s.value(),
        })
        .collect()
}

/// Anchor similarities for `text`: from the cache when complete, otherwise
/// one provider call plus the dot-product phase.
pub fn anchor_similarities(
    snap: &ScoringSnapshot,
    text: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<(AnchorSimilarities, QueryEffects)> {
    snap.require_images()?;
    if let Some(hit) = snap.cached.get(text) {
        return Ok((hit.clone(), QueryEffects::default()));
    }
    let v = snap.embed_one(provider, text)?;
    let sims = snap.similarities_for(&v)?;
    let effects = QueryEffects {
        cache_rows: rows_for(text, &sims),
        anchor_texts: Vec::new(),
    };
    Ok((sims, effects))
}

/// Posterior for one text, stamped with the snapshot's tree version.
pub fn score_text(
    snap: &ScoringSnapshot,
    text: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<(BiasScore, AnchorSimilarities, QueryEffects)> {
    let (sims, effects) = anchor_similarities(snap, text, provider)?;
    let posterior = posterior_from_similarities(&sims)?;
    Ok((
        BiasScore {
            test_text: text.to_owned(),
            tree_version: snap.tree_version,
            posterior,
        },
        sims,
        effects,
    ))
}

pub type NodeScores = BTreeMap<NodeId, BiasScore>;

/// Scores each `(node, text)` pair. Provider calls run concurrently, at most
/// `jobs` at a time when given. The first error aborts the batch.
pub fn recompute_node_scores(
    snap: &ScoringSnapshot,
    nodes: &[(NodeId, String)],
    provider: &dyn EmbeddingProvider,
    jobs: Option<usize>,
) -> Result<(NodeScores, QueryEffects)> {
    let run =
        |(node, text): &(NodeId, String)| score_text(snap, text, provider).map(|(score, _, fx)| (*node, score, fx));
    let results = match jobs {
        Some(j) => par::map_coarse_bounded(nodes, j, run),
        None => par::map_coarse(nodes, run),
    };
    let mut scores = NodeScores::new();
    let mut effects = QueryEffects::default();
    for r in results {
        let (node, score, fx) = r?;
        scores.insert(node, score);
        effects.extend(fx);
    }
    Ok((scores, effects))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image_id: ImageId,
    pub similarity: SimilarityScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardQueryResult {
    pub test_text: String,
    /// Per anchor, sorted by descending similarity; ties by image id.
    pub per_anchor: IndexMap<AnchorId, Vec<ScoredImage>>,
}

pub fn forward_query(
    snap: &ScoringSnapshot,
    text: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<(ForwardQueryResult, QueryEffects)> {
    let (sims, effects) = anchor_similarities(snap, text, provider)?;
    let per_anchor = sims
        .into_iter()
        .map(|(anchor, list)| {
            let mut list: Vec<ScoredImage> = list
                .into_iter()
                .map(|(image_id, similarity)| ScoredImage { image_id, similarity })
                .collect();
            list.sort_by(|a, b| {
                b.similarity
                    .value()
                    .total_cmp(&a.similarity.value())
                    .then_with(|| a.image_id.cmp(&b.image_id))
            });
            (anchor, list)
        })
        .collect();
    Ok((
        ForwardQueryResult {
            test_text: text.to_owned(),
            per_anchor,
        },
        effects,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionPoint {
    pub image_id: ImageId,
    pub anchor_id: AnchorId,
    pub x: SimilarityScore,
    pub y: SimilarityScore,
}

/// One point per anchor image: x against `t1`, y against `t2`.
pub fn intersection_query(
    snap: &ScoringSnapshot,
    t1: &str,
    t2: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<(Vec<IntersectionPoint>, QueryEffects)> {
    let (xs, mut effects) = anchor_similarities(snap, t1, provider)?;
    let (ys, fy) = if t1 == t2 {
        (xs.clone(), QueryEffects::default())
    } else {
        anchor_similarities(snap, t2, provider)?
    };
    effects.extend(fy);
    let mut points = Vec::with_capacity(snap.anchor_image_count());
    for ((anchor, xl), yl) in xs.iter().zip(ys.values()) {
        for ((image_id, x), (_, y)) in xl.iter().zip(yl) {
            points.push(IntersectionPoint {
                image_id: image_id.clone(),
                anchor_id: anchor.clone(),
                x: *x,
                y: *y,
            });
        }
    }
    Ok((points, effects))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InverseOrigin {
    Anchor(AnchorId),
    Test(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversePoint {
    pub image_id: ImageId,
    pub origin: InverseOrigin,
    /// `s(I, T(c2)) - s(I, T(c1))`, in [-1, 1].
    pub x: f64,
    /// Similarity to the test text.
    pub y: SimilarityScore,
}

/// Points for every anchor image and every generated image of `node`.
///
/// The x axis compares each image against the prompt texts of the two anchors
/// in `pair` (the session's two anchors when `None`).
pub fn inverse_query(
    snap: &ScoringSnapshot,
    node: NodeId,
    node_text: &str,
    pair: Option<(&AnchorId, &AnchorId)>,
    provider: &dyn EmbeddingProvider,
) -> Result<(Vec<InversePoint>, QueryEffects)> {
    let (c1, c2) = match pair {
        Some((a, b)) => {
            let find = |id: &AnchorId| {
                snap.anchors
                    .iter()
                    .find(|x| &x.id == id)
                    .ok_or_else(|| BiasError::UnknownAnchor(id.clone()))
            };
            let (a, b) = (find(a)?, find(b)?);
            if a.id == b.id {
                return Err(BiasError::NotTwoAnchors(1));
            }
            (a, b)
        }
        None if snap.anchors.len() == 2 => (&snap.anchors[0], &snap.anchors[1]),
        None => return Err(BiasError::NotTwoAnchors(snap.anchors.len())),
    };
    let test_images = snap
        .node_images
        .get(&node)
        .filter(|v| !v.is_empty())
        .ok_or(BiasError::NoGeneratedImages(node))?;

    let mut effects = QueryEffects::default();
    let mut anchor_text = |a: &AnchorSnap| -> Result<EmbeddingVector> {
        if let Some(v) = &a.text_vector {
            return Ok(v.clone());
        }
        let v = snap.embed_one(provider, &a.prompt_text)?;
        effects.anchor_texts.push((a.id.clone(), v.clone()));
        Ok(v)
    };
    let t1 = anchor_text(c1)?;
    let t2 = anchor_text(c2)?;
    let test = snap.embed_one(provider, node_text)?;

    let mut images: Vec<(ImageId, InverseOrigin, EmbeddingVector)> = Vec::new();
    for a in [c1, c2] {
        for (id, v) in &a.images {
            images.push((id.clone(), InverseOrigin::Anchor(a.id.clone()), v.clone()));
        }
    }
    for (id, v) in test_images {
        images.push((id.clone(), InverseOrigin::Test(node), v.clone()));
    }
    let vectors: Vec<EmbeddingVector> = images.iter().map(|(_, _, v)| v.clone()).collect();
    let s1 = batch_similarity(&t1, &vectors)?;
    let s2 = batch_similarity(&t2, &vectors)?;
    let ys = batch_similarity(&test, &vectors)?;

    let mut points = Vec::with_capacity(images.len());
    for (i, (image_id, origin, _)) in images.into_iter().enumerate() {
        if matches!(origin, InverseOrigin::Anchor(_)) {
            effects.cache_rows.push(CacheRow {
                text: node_text.to_owned(),
                image_id: image_id.clone(),
                score: ys[i].value(),
            });
        }
        points.push(InversePoint {
            image_id,
            origin,
            x: s2[i].value() - s1[i].value(),
            y: ys[i],
        });
    }
    Ok((points, effects))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{CountingProvider, HashProvider};
    use crate::session::{AnchorSpec, PreparedImage, SessionConfig};
    use crate::synthetic::{unit_with_cosine, Planted};

    fn session_with(dim: usize, a: &[Vec<f32>], b: &[Vec<f32>]) -> Session {
        let cfg = SessionConfig {
            n: a.len(),
            ..Default::default()
        };
        let mut s = Session::create(
            "q",
            vec![AnchorSpec::new("anchor one"), AnchorSpec::new("anchor two")],
            cfg,
        )
        .unwrap();
        for (anchor, set) in [("c1", a), ("c2", b)] {
            let prepared: Vec<PreparedImage> = set
                .iter()
                .enumerate()
                .map(|(i, raw)| {
                    assert_eq!(raw.len(), dim);
                    PreparedImage {
                        id: ImageId::new(format!("{anchor}_{i}")),
                        bytes: Vec::new(),
                        raw: raw.clone(),
                    }
                })
                .collect();
            s.add_images(ImageOwner::Anchor(AnchorId::from(anchor)), anchor, &prepared)
                .unwrap();
        }
        s
    }

    fn random_session(n: usize, dim: usize) -> (Session, HashProvider) {
        let p = HashProvider::new(dim, 3);
        let set = |tag: &str| -> Vec<Vec<f32>> {
            (0..n)
                .map(|i| {
                    p.image_vector(format!("{tag}{i}").as_bytes())
                        .iter()
                        .map(|&x| x as f32)
                        .collect()
                })
                .collect()
        };
        (session_with(dim, &set("a"), &set("b")), p)
    }

    #[test]
    fn forward_shape_order_and_cache() {
        let (mut s, p) = random_session(2, 16);
        let p = CountingProvider::new(p);
        let snap = ScoringSnapshot::capture(&s, &["a dog"]).unwrap();
        let (r, fx) = forward_query(&snap, "a dog", &p).unwrap();
        assert_eq!(r.per_anchor.len(), 2);
        for list in r.per_anchor.values() {
            assert_eq!(list.len(), 2);
            assert!(list[0].similarity.value() >= list[1].similarity.value());
        }
        assert_eq!(p.text_calls(), 1);
        fx.apply(&mut s).unwrap();
        let snap = ScoringSnapshot::capture(&s, &["a dog"]).unwrap();
        let (again, fx) = forward_query(&snap, "a dog", &p).unwrap();
        assert_eq!(again, r);
        assert!(fx.is_empty());
        assert_eq!(p.text_calls(), 1);
    }

    #[test]
    fn forward_matches_brute_force() {
        let (s, p) = random_session(5, 12);
        let snap = ScoringSnapshot::capture(&s, &[] as &[&str]).unwrap();
        let (r, _) = forward_query(&snap, "hat", &p).unwrap();
        let t = EmbeddingVector::normalize(&p.text_vector("hat")).unwrap();
        for (anchor, list) in &r.per_anchor {
            for item in list {
                let img = s.image_vector(&item.image_id).unwrap();
                let mut dot = 0.0;
                for k in 0..12 {
                    dot += t.values()[k] * img.values()[k];
                }
                assert!((item.similarity.value() - (dot + 1.0) / 2.0).abs() < 1e-12);
                assert!(s.anchor(anchor).unwrap().image_ids.contains(&item.image_id));
            }
        }
    }

    #[test]
    fn empty_session() {
        let s = Session::create(
            "e",
            vec![AnchorSpec::new("a"), AnchorSpec::new("b")],
            SessionConfig::default(),
        )
        .unwrap();
        let snap = ScoringSnapshot::capture(&s, &[] as &[&str]).unwrap();
        let p = HashProvider::new(4, 0);
        assert_eq!(forward_query(&snap, "x", &p).unwrap_err(), BiasError::EmptySession);
    }

    #[test]
    fn intersection_matches_forward() {
        let (s, p) = random_session(3, 8);
        let snap = ScoringSnapshot::capture(&s, &[] as &[&str]).unwrap();
        let (pts, _) = intersection_query(&snap, "hat", "scarf", &p).unwrap();
        assert_eq!(pts.len(), 6);
        let (f1, _) = anchor_similarities(&snap, "hat", &p).unwrap();
        let (f2, _) = anchor_similarities(&snap, "scarf", &p).unwrap();
        let mut i = 0;
        for (a, list) in &f1 {
            for (k, (id, x)) in list.iter().enumerate() {
                assert_eq!(&pts[i].image_id, id);
                assert_eq!(&pts[i].anchor_id, a);
                assert_eq!(pts[i].x, *x);
                assert_eq!(pts[i].y, f2[a][k].1);
                i += 1;
            }
        }
        let (diag, _) = intersection_query(&snap, "hat", "hat", &p).unwrap();
        assert!(diag.iter().all(|pt| pt.x == pt.y));
    }

    #[test]
    fn recompute_scores_and_stamps() {
        let (s, p) = random_session(3, 8);
        let snap = ScoringSnapshot::capture(&s, &[] as &[&str]).unwrap();
        let nodes = vec![(NodeId(7), "a".to_owned()), (NodeId(9), "b".to_owned())];
        let (scores, fx) = recompute_node_scores(&snap, &nodes, &p, Some(2)).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[&NodeId(7)].tree_version, s.tree().version());
        assert_eq!(fx.cache_rows.len(), 12);
    }

    fn inverse_fixture() -> (Session, HashProvider, NodeId) {
        let dim = 6;
        let planted = Planted::new(dim, 11);
        let t1 = planted.axis(0);
        let t2 = planted.axis(1);
        let a: Vec<Vec<f32>> = (0..3).map(|i| planted.random_unit(i).to_f32()).collect();
        let b: Vec<Vec<f32>> = (3..6).map(|i| planted.random_unit(i).to_f32()).collect();
        let mut s = session_with(dim, &a, &b);
        let p = HashProvider::new(dim, 5)
            .with_text("anchor one", &t1)
            .with_text("anchor two", &t2);
        let root = s.tree().root();
        let node = s
            .apply_tree_op(crate::session::TreeOp::AddNode {
                parent: root,
                label: "hat".into(),
                relation: Some("with a".into()),
            })
            .unwrap()
            .created_node
            .unwrap();
        // Equidistant from both anchor texts: equal components on both axes.
        let mut eq = vec![0.0f64; dim];
        eq[0] = 0.5;
        eq[1] = 0.5;
        eq[2] = 0.7;
        let eq = EmbeddingVector::normalize(&eq).unwrap();
        let gen = vec![
            PreparedImage {
                id: ImageId::from("g0"),
                bytes: Vec::new(),
                raw: eq.to_f32(),
            },
            PreparedImage {
                id: ImageId::from("g1"),
                bytes: Vec::new(),
                raw: unit_with_cosine(&t2, 0.8, &planted.random_unit(9)).to_f32(),
            },
        ];
        s.add_images(ImageOwner::Node(node), "picture with a hat", &gen)
            .unwrap();
        (s, p, node)
    }

    #[test]
    fn inverse_antisymmetry_and_equidistance() {
        let (s, p, node) = inverse_fixture();
        let text = s.serialize_node(node).unwrap();
        let snap = ScoringSnapshot::capture(&s, &[&text]).unwrap();
        let (c1, c2) = (AnchorId::from("c1"), AnchorId::from("c2"));
        let (fwd, fx) = inverse_query(&snap, node, &text, Some((&c1, &c2)), &p).unwrap();
        let (rev, _) = inverse_query(&snap, node, &text, Some((&c2, &c1)), &p).unwrap();
        assert_eq!(fwd.len(), 8);
        assert_eq!(fx.anchor_texts.len(), 2);
        for a in &fwd {
            let b = rev.iter().find(|b| b.image_id == a.image_id).unwrap();
            assert_eq!(a.x, -b.x);
            assert_eq!(a.y, b.y);
            assert!(a.x.abs() <= 1.0);
        }
        let g0 = fwd.iter().find(|pt| pt.image_id.as_str() == "g0").unwrap();
        assert!(g0.x.abs() < 1e-12);
        assert_eq!(g0.origin, InverseOrigin::Test(node));
        let g1 = fwd.iter().find(|pt| pt.image_id.as_str() == "g1").unwrap();
        assert!(g1.x > 0.0);
    }

    #[test]
    fn inverse_errors() {
        let (s, p, node) = inverse_fixture();
        let snap = ScoringSnapshot::capture(&s, &[] as &[&str]).unwrap();
        assert_eq!(
            inverse_query(&snap, NodeId(999), "x", None, &p).unwrap_err(),
            BiasError::NoGeneratedImages(NodeId(999))
        );
        let c1 = AnchorId::from("c1");
        assert!(matches!(
            inverse_query(&snap, node, "x", Some((&c1, &c1)), &p),
            Err(BiasError::NotTwoAnchors(_))
        ));
        let three = Session::create(
            "3",
            vec![AnchorSpec::new("a"), AnchorSpec::new("b"), AnchorSpec::new("c")],
            SessionConfig::default(),
        )
        .unwrap();
        let snap = ScoringSnapshot::capture(&three, &[] as &[&str]).unwrap();
        assert_eq!(
            inverse_query(&snap, node, "x", None, &p).unwrap_err(),
            BiasError::NotTwoAnchors(3)
        );
    }

    #[test]
    fn effects_apply_to_session() {
        let (mut s, p, node) = inverse_fixture();
        let text = s.serialize_node(node).unwrap();
        let snap = ScoringSnapshot::capture(&s, &[&text]).unwrap();
        let (_, fx) = inverse_query(&snap, node, &text, None, &p).unwrap();
        fx.apply(&mut s).unwrap();
        assert!(s.anchor_text_vector(&AnchorId::from("c1")).is_some());
        assert!(ScoringSnapshot::capture(&s, &[&text]).unwrap().is_cached(&text));
    }
}
