//! Sessions: anchor concepts, their images and embeddings, the prompting tree
//! and the similarity cache, persisted as a directory.

mod cache;
mod import;
mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::Color;
use crate::embedding::{EmbeddingError, EmbeddingTable, EmbeddingVector};
use crate::ids::{AnchorId, ImageId};
use crate::tree::{NodeId, NodeKind, PromptingTree, TreeError};

pub use cache::{CacheRow, InconsistentCacheWrite, SimilarityCache};
pub(crate) use import::ingest;
pub use import::{add_test_images, import_anchor_images, prepare_images, ImportOptions, ImportReport, PreparedImage};
pub use store::{load_session, save_session, CACHE_FILE, EMBEDDINGS_FILE, IMAGES_DIR, SESSION_FILE};

pub const DEFAULT_N: usize = 50;
pub const DEFAULT_M: usize = 5;
/// Relation between the root and each anchor node created with a session.
pub const ANCHOR_RELATION: &str = "that shows a";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("duplicate anchor: {0}")]
    DuplicateAnchor(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown anchor {0}")]
    UnknownAnchor(AnchorId),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("duplicate image id {0}")]
    DuplicateImage(ImageId),
    #[error("anchor node {0} cannot be removed while its anchor exists")]
    AnchorNodeProtected(NodeId),
    #[error("expected {expected} images for anchor {anchor}, got {found}")]
    CountMismatch {
        anchor: AnchorId,
        expected: usize,
        found: usize,
    },
    #[error("inconsistent embedding dimension: {0}")]
    DimInconsistent(String),
    #[error("no embedding for image {0}")]
    MissingEmbedding(ImageId),
    #[error("{0} is not a PNG file")]
    NotPng(PathBuf),
    #[error("malformed session: {0}")]
    Format(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Embedding(EmbeddingError),
    #[error(transparent)]
    Cache(#[from] InconsistentCacheWrite),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<EmbeddingError> for SessionError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::DimInconsistent(msg) => SessionError::DimInconsistent(msg),
            other => SessionError::Embedding(other),
        }
    }
}

pub type Result<T, E = SessionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Images per anchor concept.
    pub n: usize,
    /// Images generated per inverse query.
    pub m: usize,
    /// Embedding dimension, fixed by the first vector the session sees.
    pub dim: Option<usize>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_N,
            m: DEFAULT_M,
            dim: None,
        }
    }
}

impl SessionConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(SessionError::InvalidConfig(format!(
                "n and m must be at least 1 (n={}, m={})",
                self.n, self.m
            )));
        }
        if self.dim == Some(0) {
            return Err(SessionError::InvalidConfig("dim must be positive".into()));
        }
        Ok(())
    }
}

/// Input for one anchor when creating a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub prompt: String,
    #[serde(default)]
    pub color: Option<Color>,
    /// Tree label; defaults to the prompt.
    #[serde(default)]
    pub label: Option<String>,
}

impl AnchorSpec {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            color: None,
            label: None,
        }
    }

    pub fn with_color(mut self, color: Color) -> Self {
        self.color = Some(color);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConcept {
    pub id: AnchorId,
    pub prompt_text: String,
    pub color: Color,
    pub image_ids: Vec<ImageId>,
    /// Key of the prompt's text embedding in the embedding store, once known.
    #[serde(default)]
    pub text_embedding_ref: Option<String>,
    pub node_id: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Anchor,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageOwner {
    Anchor(AnchorId),
    Node(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub kind: ImageKind,
    pub owner: ImageOwner,
    /// Path relative to the session directory.
    pub file_ref: String,
    pub origin_prompt: String,
    pub embedding_ref: String,
}

pub fn image_file_ref(id: &ImageId) -> String {
    format!("{IMAGES_DIR}/{id}.png")
}

pub fn anchor_text_key(anchor: &AnchorId) -> String {
    format!("text:{anchor}")
}

/// Raw `f32` vectors as persisted, plus their normalized working copies.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    table: EmbeddingTable,
    vectors: HashMap<String, EmbeddingVector>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.table == other.table
    }
}

impl EmbeddingStore {
    pub fn from_table(table: EmbeddingTable) -> Result<Self> {
        let vectors = table
            .entries
            .iter()
            .map(|(k, v)| Ok((k.clone(), EmbeddingVector::from_f32(v)?)))
            .collect::<Result<_>>()?;
        Ok(Self { table, vectors })
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn get(&self, key: &str) -> Option<&EmbeddingVector> {
        self.vectors.get(key)
    }

    /// Stores `raw` under `key`. The working vector is derived from the stored
    /// `f32` values so it is identical before and after a save/load cycle.
    pub fn insert(&mut self, key: &str, raw: Vec<f32>) -> Result<EmbeddingVector> {
        if self.table.entries.is_empty() && self.table.dim == 0 {
            self.table.dim = raw.len();
        }
        let vector = EmbeddingVector::from_f32(&raw)?;
        self.table.insert(key, raw)?;
        self.vectors.insert(key.to_owned(), vector.clone());
        Ok(vector)
    }

    fn remove(&mut self, key: &str) {
        self.table.entries.shift_remove(key);
        self.vectors.remove(key);
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// A tree edit as submitted by a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TreeOp {
    AddNode {
        parent: NodeId,
        label: String,
        #[serde(default)]
        relation: Option<String>,
    },
    AddEdge {
        from: NodeId,
        to: NodeId,
        #[serde(default)]
        relation: Option<String>,
    },
    RemoveNode {
        node: NodeId,
    },
    RemoveEdge {
        edge: u64,
    },
    /// Relabels a node or, with `edge`, an edge's relation.
    Relabel {
        #[serde(default)]
        node: Option<NodeId>,
        #[serde(default)]
        edge: Option<u64>,
        label: String,
    },
    SetFlags {
        node: NodeId,
        #[serde(default)]
        has_generated_images: Option<bool>,
        #[serde(default)]
        probe_selected: Option<bool>,
    },
    Negate {
        node: NodeId,
    },
}

/// Outcome of a successful tree edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeChange {
    pub version: u64,
    pub tree_version: u64,
    pub created_node: Option<NodeId>,
    pub created_edge: Option<u64>,
    pub removed_nodes: Vec<NodeId>,
    /// Test nodes whose serialized text is new or different, with that text.
    pub rescore: Vec<(NodeId, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    id: String,
    name: String,
    config: SessionConfig,
    anchors: Vec<AnchorConcept>,
    images: Vec<ImageRecord>,
    tree: PromptingTree,
    version: u64,
    #[serde(skip)]
    similarity_cache: SimilarityCache,
    #[serde(skip)]
    embeddings: EmbeddingStore,
}

impl Session {
    /// A session with a root-only tree plus one anchor node per anchor.
    pub fn create(name: &str, anchors: Vec<AnchorSpec>, config: SessionConfig) -> Result<Self> {
        config.validate()?;
        if anchors.len() < 2 {
            return Err(SessionError::InvalidConfig(format!(
                "at least two anchors are required, got {}",
                anchors.len()
            )));
        }
        let mut prompts = BTreeSet::new();
        let mut colors = BTreeSet::new();
        let mut tree = PromptingTree::default();
        let mut concepts = Vec::with_capacity(anchors.len());
        for (i, spec) in anchors.into_iter().enumerate() {
            if spec.prompt.trim().is_empty() {
                return Err(SessionError::InvalidConfig("empty anchor prompt".into()));
            }
            if !prompts.insert(spec.prompt.clone()) {
                return Err(SessionError::DuplicateAnchor(spec.prompt));
            }
            let color = spec.color.unwrap_or_else(|| Color::nth(i));
            if !colors.insert(color) {
                return Err(SessionError::DuplicateAnchor(format!("color {color}")));
            }
            let label = spec.label.as_deref().unwrap_or(&spec.prompt);
            let node_id = tree.add_anchor(tree.root(), label, color, Some(ANCHOR_RELATION))?;
            concepts.push(AnchorConcept {
                id: AnchorId(format!("c{}", i + 1)),
                prompt_text: spec.prompt,
                color,
                image_ids: Vec::new(),
                text_embedding_ref: None,
                node_id,
            });
        }
        Ok(Self {
            id: uuid::Uuid::new_v4().to_string(),
            name: name.to_owned(),
            config,
            anchors: concepts,
            images: Vec::new(),
            tree,
            version: 0,
            similarity_cache: SimilarityCache::default(),
            embeddings: EmbeddingStore::default(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn anchors(&self) -> &[AnchorConcept] {
        &self.anchors
    }

    pub fn anchor(&self, id: &AnchorId) -> Result<&AnchorConcept> {
        self.anchors
            .iter()
            .find(|a| &a.id == id)
            .ok_or_else(|| SessionError::UnknownAnchor(id.clone()))
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn image(&self, id: &ImageId) -> Result<&ImageRecord> {
        self.images
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| SessionError::UnknownImage(id.clone()))
    }

    pub fn tree(&self) -> &PromptingTree {
        &self.tree
    }

    pub fn cache(&self) -> &SimilarityCache {
        &self.similarity_cache
    }

    pub fn embeddings(&self) -> &EmbeddingStore {
        &self.embeddings
    }

    pub fn cache_get(&self, text: &str, image: &ImageId) -> Option<f64> {
        self.similarity_cache.get(text, image)
    }

    pub fn cache_put(&mut self, text: &str, image: &ImageId, score: f64) -> Result<(), InconsistentCacheWrite> {
        self.similarity_cache.put(text, image, score)
    }

    pub fn serialize_node(&self, id: NodeId) -> Result<String> {
        Ok(self.tree.serialize_node(id)?)
    }

    pub fn image_vector(&self, id: &ImageId) -> Option<&EmbeddingVector> {
        let rec = self.images.iter().find(|r| &r.id == id)?;
        self.embeddings.get(&rec.embedding_ref)
    }

    /// Images and vectors of one anchor, in import order.
    pub fn anchor_image_vectors(&self, anchor: &AnchorId) -> Result<Vec<(ImageId, EmbeddingVector)>> {
        let a = self.anchor(anchor)?;
        a.image_ids
            .iter()
            .map(|id| {
                self.image_vector(id)
                    .cloned()
                    .map(|v| (id.clone(), v))
                    .ok_or_else(|| SessionError::MissingEmbedding(id.clone()))
            })
            .collect()
    }

    /// Generated images of a test node, in ingestion order.
    pub fn test_images(&self, node: NodeId) -> Vec<&ImageRecord> {
        self.images
            .iter()
            .filter(|r| r.owner == ImageOwner::Node(node))
            .collect()
    }

    pub fn anchor_text_vector(&self, anchor: &AnchorId) -> Option<&EmbeddingVector> {
        let key = self.anchor(anchor).ok()?.text_embedding_ref.as_ref()?;
        self.embeddings.get(key)
    }

    /// Whether every anchor has at least one embedded image.
    pub fn has_anchor_images(&self) -> bool {
        self.anchors.iter().all(|a| !a.image_ids.is_empty())
    }

    fn bump(&mut self) {
        self.version += 1;
    }

    /// Bumps the session version for an event recorded outside the session,
    /// such as a published score. Returns the new version.
    pub fn advance_version(&mut self) -> u64 {
        self.bump();
        self.version
    }

    fn fix_dim(&mut self, dim: usize) -> Result<()> {
        match self.config.dim {
            None => {
                self.config.dim = Some(dim);
                Ok(())
            }
            Some(d) if d == dim => Ok(()),
            Some(d) => Err(SessionError::DimInconsistent(format!(
                "session dim is {d}, got vectors of dim {dim}"
            ))),
        }
    }

    /// Records the prompt embedding of an anchor.
    pub fn set_anchor_text_embedding(&mut self, anchor: &AnchorId, vector: &EmbeddingVector) -> Result<()> {
        self.anchor(anchor)?;
        self.fix_dim(vector.dim())?;
        let key = anchor_text_key(anchor);
        self.embeddings.insert(&key, vector.to_f32())?;
        if let Some(a) = self.anchors.iter_mut().find(|a| &a.id == anchor) {
            a.text_embedding_ref = Some(key);
        }
        self.bump();
        Ok(())
    }

    /// Adds already-embedded images. Files must already be in place.
    pub(crate) fn add_images(
        &mut self,
        owner: ImageOwner,
        origin_prompt: &str,
        images: &[PreparedImage],
    ) -> Result<Vec<ImageId>> {
        let existing: BTreeSet<&ImageId> = self.images.iter().map(|r| &r.id).collect();
        let mut batch = BTreeSet::new();
        for img in images {
            if existing.contains(&img.id) || !batch.insert(&img.id) {
                return Err(SessionError::DuplicateImage(img.id.clone()));
            }
        }
        if let Some(first) = images.first() {
            if images.iter().any(|i| i.raw.len() != first.raw.len()) {
                return Err(SessionError::DimInconsistent("mixed dims in one batch".into()));
            }
            self.fix_dim(first.raw.len())?;
        }
        let kind = match owner {
            ImageOwner::Anchor(_) => ImageKind::Anchor,
            ImageOwner::Node(_) => ImageKind::Test,
        };
        let mut ids = Vec::with_capacity(images.len());
        for img in images {
            let key = img.id.0.clone();
            self.embeddings.insert(&key, img.raw.clone())?;
            self.images.push(ImageRecord {
                id: img.id.clone(),
                kind,
                owner: owner.clone(),
                file_ref: image_file_ref(&img.id),
                origin_prompt: origin_prompt.to_owned(),
                embedding_ref: key,
            });
            ids.push(img.id.clone());
        }
        match &owner {
            ImageOwner::Anchor(a) => {
                if let Some(anchor) = self.anchors.iter_mut().find(|x| &x.id == a) {
                    anchor.image_ids.extend(ids.iter().cloned());
                }
            }
            ImageOwner::Node(n) => {
                if !ids.is_empty() {
                    self.tree.set_flags(*n, Some(true), None)?;
                }
            }
        }
        self.bump();
        Ok(ids)
    }

    /// Applies a tree edit atomically. Anchor nodes cannot be removed, and
    /// generated images of removed nodes are dropped with them.
    pub fn apply_tree_op(&mut self, op: TreeOp) -> Result<TreeChange> {
        let before = self.tree.serialize_all();
        let mut tree = self.tree.clone();
        let mut created_node = None;
        let mut created_edge = None;
        let mut removed_nodes = Vec::new();
        match op {
            TreeOp::AddNode {
                parent,
                label,
                relation,
            } => {
                let id = tree.add_node(parent, &label, relation.as_deref())?;
                created_edge = tree.primary_parent(id).map(|e| e.creation_seq);
                created_node = Some(id);
            }
            TreeOp::AddEdge { from, to, relation } => {
                created_edge = Some(tree.add_edge(from, to, relation.as_deref())?);
            }
            TreeOp::RemoveNode { node } => removed_nodes = tree.remove_node(node)?,
            TreeOp::RemoveEdge { edge } => removed_nodes = tree.remove_edge(edge)?,
            TreeOp::Relabel { node, edge, label } => match (node, edge) {
                (Some(n), None) => tree.relabel_node(n, &label)?,
                (None, Some(e)) => tree.relabel_edge(e, &label)?,
                _ => {
                    return Err(SessionError::Format(
                        "relabel needs exactly one of `node` or `edge`".into(),
                    ))
                }
            },
            TreeOp::SetFlags {
                node,
                has_generated_images,
                probe_selected,
            } => tree.set_flags(node, has_generated_images, probe_selected)?,
            TreeOp::Negate { node } => {
                let id = tree.negate(node)?;
                created_edge = tree.primary_parent(id).map(|e| e.creation_seq);
                created_node = Some(id);
            }
        }
        if let Some(a) = self.anchors.iter().find(|a| !tree.contains(a.node_id)) {
            return Err(SessionError::AnchorNodeProtected(a.node_id));
        }

        let after = tree.serialize_all();
        let rescore = after
            .into_iter()
            .filter(|(id, text)| {
                before.get(id) != Some(text) && tree.node(*id).map(|n| n.kind == NodeKind::Test).unwrap_or(false)
            })
            .collect();

        self.tree = tree;
        if !removed_nodes.is_empty() {
            self.drop_images_of(&removed_nodes);
        }
        self.bump();
        Ok(TreeChange {
            version: self.version,
            tree_version: self.tree.version(),
            created_node,
            created_edge,
            removed_nodes,
            rescore,
        })
    }

    fn drop_images_of(&mut self, nodes: &[NodeId]) {
        let owners: BTreeSet<ImageOwner> = nodes.iter().map(|n| ImageOwner::Node(*n)).collect();
        let dropped: Vec<ImageRecord> = self
            .images
            .iter()
            .filter(|r| owners.contains(&r.owner))
            .cloned()
            .collect();
        if dropped.is_empty() {
            return;
        }
        log::info!("dropping {} generated images of removed nodes", dropped.len());
        for rec in &dropped {
            self.embeddings.remove(&rec.embedding_ref);
        }
        let ids: Vec<ImageId> = dropped.into_iter().map(|r| r.id).collect();
        self.similarity_cache.forget_images(&ids);
        self.images.retain(|r| !owners.contains(&r.owner));
    }

    /// Serialized text of every test node.
    pub fn test_texts(&self) -> BTreeMap<NodeId, String> {
        self.tree
            .serialize_all()
            .into_iter()
            .filter(|(id, _)| self.tree.node(*id).map(|n| n.kind == NodeKind::Test).unwrap_or(false))
            .collect()
    }

    /// Checks cross references between anchors, images, tree and store.
    pub fn check_integrity(&self) -> Result<()> {
        self.config.validate()?;
        self.tree.validate()?;
        let ids: HashMap<&ImageId, &ImageRecord> = self.images.iter().map(|r| (&r.id, r)).collect();
        if ids.len() != self.images.len() {
            return Err(SessionError::Format("duplicate image ids".into()));
        }
        let mut colors = BTreeSet::new();
        for a in &self.anchors {
            if !colors.insert(a.color) {
                return Err(SessionError::Format(format!("duplicate anchor color {}", a.color)));
            }
            let node = self.tree.node(a.node_id)?;
            if node.kind != NodeKind::Anchor {
                return Err(SessionError::Format(format!("anchor {} node is not an anchor", a.id)));
            }
            for img in &a.image_ids {
                let rec = ids.get(img).ok_or_else(|| SessionError::UnknownImage(img.clone()))?;
                if rec.owner != ImageOwner::Anchor(a.id.clone()) {
                    return Err(SessionError::Format(format!("image {img} owner mismatch")));
                }
            }
            if let Some(key) = &a.text_embedding_ref {
                if self.embeddings.get(key).is_none() {
                    return Err(SessionError::Format(format!("missing text embedding {key}")));
                }
            }
        }
        for rec in &self.images {
            match &rec.owner {
                ImageOwner::Anchor(a) => {
                    if !self.anchor(a)?.image_ids.contains(&rec.id) {
                        return Err(SessionError::Format(format!("image {} not listed by anchor", rec.id)));
                    }
                }
                ImageOwner::Node(n) => {
                    self.tree.node(*n)?;
                }
            }
            let v = self
                .embeddings
                .get(&rec.embedding_ref)
                .ok_or_else(|| SessionError::MissingEmbedding(rec.id.clone()))?;
            if Some(v.dim()) != self.config.dim {
                return Err(SessionError::DimInconsistent(format!(
                    "image {} has dim {}, session {:?}",
                    rec.id,
                    v.dim(),
                    self.config.dim
                )));
            }
        }
        Ok(())
    }
}
