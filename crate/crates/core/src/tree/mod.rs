//! The prompting tree: a rooted DAG of concept nodes joined by labeled
//! relations, edited by the analyst and serialized into probe texts.
//!
//! Invariants held after every successful mutation:
//! - exactly one root node, never removed;
//! - no self-loops, no cycles, no duplicate `(from, to, relation)` edges;
//! - every node is reachable from the root (removals prune orphans);
//! - anchor nodes carry a color and no other node does.
//!
//! Every mutation bumps [`PromptingTree::version`].

mod serialize;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::Color;

/// Default relation, used to attach adjectives to a noun.
pub const HAS_PROPERTY: &str = "has property";
pub const DEFAULT_ROOT_LABEL: &str = "picture";
pub const NEGATION_LABEL: &str = "no";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Root,
    Anchor,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub id: NodeId,
    pub label: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub anchor_color: Option<Color>,
    #[serde(default)]
    pub has_generated_images: bool,
    #[serde(default)]
    pub probe_selected: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "RelationDoc")]
pub struct Relation {
    pub label: String,
    pub is_property: bool,
}

#[derive(Deserialize)]
struct RelationDoc {
    label: String,
}

impl From<RelationDoc> for Relation {
    fn from(doc: RelationDoc) -> Self {
        Relation::new(doc.label)
    }
}

impl Relation {
    pub fn new(label: impl Into<String>) -> Self {
        let label = label.into();
        let is_property = label == HAS_PROPERTY;
        Self { label, is_property }
    }

    pub fn has_property() -> Self {
        Self::new(HAS_PROPERTY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub relation: Relation,
    /// Unique per tree; doubles as the edge identifier.
    pub creation_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown edge {0}")]
    UnknownEdge(u64),
    #[error("an edge may not connect node {0} to itself")]
    SelfLoop(NodeId),
    #[error("edge {from} -> {to} would form a cycle")]
    CycleWouldForm { from: NodeId, to: NodeId },
    #[error("edge {from} -[{relation}]-> {to} already exists")]
    DuplicateEdge { from: NodeId, to: NodeId, relation: String },
    #[error("labels must not be empty")]
    EmptyLabel,
    #[error("the root node cannot be removed")]
    CannotRemoveRoot,
    #[error("node {0} is not reachable from the root")]
    Unreachable(NodeId),
    #[error("selection is empty")]
    EmptySelection,
    #[error("creation sequence {0} is already in use")]
    SeqInUse(u64),
    #[error("node id {0} is already in use")]
    IdInUse(NodeId),
    #[error("invalid tree: {0}")]
    Invalid(String),
}

pub type Result<T, E = TreeError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptingTree {
    nodes: BTreeMap<NodeId, ConceptNode>,
    // Keyed by creation_seq, so iteration is in creation order.
    edges: BTreeMap<u64, Edge>,
    relations: BTreeSet<String>,
    root: NodeId,
    next_id: u64,
    next_seq: u64,
    version: u64,
}

impl Default for PromptingTree {
    fn default() -> Self {
        Self::new(DEFAULT_ROOT_LABEL)
    }
}

fn check_label(label: &str) -> Result<()> {
    if label.trim().is_empty() {
        Err(TreeError::EmptyLabel)
    } else {
        Ok(())
    }
}

impl PromptingTree {
    pub fn new(root_label: &str) -> Self {
        let root = NodeId(0);
        let mut nodes = BTreeMap::new();
        nodes.insert(
            root,
            ConceptNode {
                id: root,
                label: root_label.to_owned(),
                kind: NodeKind::Root,
                anchor_color: None,
                has_generated_images: false,
                probe_selected: false,
            },
        );
        Self {
            nodes,
            edges: BTreeMap::new(),
            relations: BTreeSet::from([HAS_PROPERTY.to_owned()]),
            root,
            next_id: 1,
            next_seq: 0,
            version: 0,
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn node(&self, id: NodeId) -> Result<&ConceptNode> {
        self.nodes.get(&id).ok_or(TreeError::UnknownNode(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ConceptNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    /// Edges in creation order.
    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.values()
    }

    pub fn edge(&self, seq: u64) -> Result<&Edge> {
        self.edges.get(&seq).ok_or(TreeError::UnknownEdge(seq))
    }

    /// The relation set; always contains `has property`.
    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.relations.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Outgoing edges of `id` in creation order.
    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &Edge> {
        self.edges.values().filter(move |e| e.from == id)
    }

    pub fn incoming(&self, id: NodeId) -> impl Iterator<Item = &Edge> {
        self.edges.values().filter(move |e| e.to == id)
    }

    fn bump(&mut self) {
        self.version += 1;
    }

    fn alloc_seq(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        seq
    }

    fn reaches(&self, from: NodeId, target: NodeId) -> bool {
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == target {
                return true;
            }
            if seen.insert(n) {
                stack.extend(self.children(n).map(|e| e.to));
            }
        }
        false
    }

    fn check_edge(&self, from: NodeId, to: NodeId, relation: &str) -> Result<()> {
        self.node(from)?;
        self.node(to)?;
        check_label(relation)?;
        if from == to {
            return Err(TreeError::SelfLoop(from));
        }
        if self
            .edges
            .values()
            .any(|e| e.from == from && e.to == to && e.relation.label == relation)
        {
            return Err(TreeError::DuplicateEdge {
                from,
                to,
                relation: relation.to_owned(),
            });
        }
        if self.reaches(to, from) {
            return Err(TreeError::CycleWouldForm { from, to });
        }
        Ok(())
    }

    fn insert_edge(&mut self, from: NodeId, to: NodeId, relation: &str, seq: u64) {
        self.relations.insert(relation.to_owned());
        self.edges.insert(
            seq,
            Edge {
                from,
                to,
                relation: Relation::new(relation),
                creation_seq: seq,
            },
        );
        self.next_seq = self.next_seq.max(seq + 1);
    }

    fn insert_child(
        &mut self,
        parent: NodeId,
        label: &str,
        kind: NodeKind,
        color: Option<Color>,
        relation: Option<&str>,
    ) -> Result<NodeId> {
        check_label(label)?;
        self.node(parent)?;
        let relation = relation.unwrap_or(HAS_PROPERTY);
        check_label(relation)?;
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(
            id,
            ConceptNode {
                id,
                label: label.to_owned(),
                kind,
                anchor_color: color,
                has_generated_images: false,
                probe_selected: false,
            },
        );
        let seq = self.alloc_seq();
        self.insert_edge(parent, id, relation, seq);
        self.bump();
        Ok(id)
    }

    /// Adds a test-concept node under `parent`. The relation defaults to
    /// `has property`.
    pub fn add_node(&mut self, parent: NodeId, label: &str, relation: Option<&str>) -> Result<NodeId> {
        self.insert_child(parent, label, NodeKind::Test, None, relation)
    }

    pub fn add_anchor(&mut self, parent: NodeId, label: &str, color: Color, relation: Option<&str>) -> Result<NodeId> {
        self.insert_child(parent, label, NodeKind::Anchor, Some(color), relation)
    }

    /// Connects two existing nodes; returns the new edge's creation_seq.
    pub fn add_edge(&mut self, from: NodeId, to: NodeId, relation: Option<&str>) -> Result<u64> {
        let relation = relation.unwrap_or(HAS_PROPERTY);
        self.check_edge(from, to, relation)?;
        let seq = self.alloc_seq();
        self.insert_edge(from, to, relation, seq);
        self.bump();
        Ok(seq)
    }

    /// Re-adds an edge under an explicit creation_seq, e.g. to undo a removal.
    pub fn add_edge_with_seq(&mut self, from: NodeId, to: NodeId, relation: &str, seq: u64) -> Result<()> {
        if self.edges.contains_key(&seq) {
            return Err(TreeError::SeqInUse(seq));
        }
        self.check_edge(from, to, relation)?;
        self.insert_edge(from, to, relation, seq);
        self.bump();
        Ok(())
    }

    /// Re-inserts a previously removed node under `parent` with its original
    /// id and the given edge creation_seq.
    pub fn restore_node(&mut self, node: ConceptNode, parent: NodeId, relation: &str, seq: u64) -> Result<()> {
        check_label(&node.label)?;
        check_label(relation)?;
        self.node(parent)?;
        if self.nodes.contains_key(&node.id) {
            return Err(TreeError::IdInUse(node.id));
        }
        if self.edges.contains_key(&seq) {
            return Err(TreeError::SeqInUse(seq));
        }
        match node.kind {
            NodeKind::Root => return Err(TreeError::Invalid("cannot restore a root".into())),
            NodeKind::Anchor if node.anchor_color.is_none() => {
                return Err(TreeError::Invalid("anchor without color".into()))
            }
            NodeKind::Test if node.anchor_color.is_some() => {
                return Err(TreeError::Invalid("test node with anchor color".into()))
            }
            _ => {}
        }
        self.next_id = self.next_id.max(node.id.0 + 1);
        let id = node.id;
        self.nodes.insert(id, node);
        self.insert_edge(parent, id, relation, seq);
        self.bump();
        Ok(())
    }

    /// Drops every node no longer reachable from the root, with its edges.
    fn prune(&mut self) -> Vec<NodeId> {
        let reachable = self.reachable_from_root();
        let removed: Vec<NodeId> = self
            .nodes
            .keys()
            .filter(|id| !reachable.contains(id))
            .copied()
            .collect();
        for id in &removed {
            self.nodes.remove(id);
        }
        self.edges
            .retain(|_, e| reachable.contains(&e.from) && reachable.contains(&e.to));
        removed
    }

    fn reachable_from_root(&self) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([self.root]);
        let mut queue = VecDeque::from([self.root]);
        while let Some(n) = queue.pop_front() {
            for e in self.children(n) {
                if seen.insert(e.to) {
                    queue.push_back(e.to);
                }
            }
        }
        seen
    }

    /// Removes a node, its incident edges, and every node left unreachable.
    /// Returns all removed node ids, `id` first.
    pub fn remove_node(&mut self, id: NodeId) -> Result<Vec<NodeId>> {
        self.node(id)?;
        if id == self.root {
            return Err(TreeError::CannotRemoveRoot);
        }
        self.nodes.remove(&id);
        self.edges.retain(|_, e| e.from != id && e.to != id);
        let mut removed = vec![id];
        removed.extend(self.prune());
        self.bump();
        Ok(removed)
    }

    /// Removes an edge and returns the nodes orphaned by it.
    pub fn remove_edge(&mut self, seq: u64) -> Result<Vec<NodeId>> {
        self.edges.remove(&seq).ok_or(TreeError::UnknownEdge(seq))?;
        let removed = self.prune();
        self.bump();
        Ok(removed)
    }

    pub fn relabel_node(&mut self, id: NodeId, label: &str) -> Result<()> {
        check_label(label)?;
        self.nodes.get_mut(&id).ok_or(TreeError::UnknownNode(id))?.label = label.to_owned();
        self.bump();
        Ok(())
    }

    pub fn relabel_edge(&mut self, seq: u64, relation: &str) -> Result<()> {
        check_label(relation)?;
        let edge = self.edges.get(&seq).ok_or(TreeError::UnknownEdge(seq))?;
        let (from, to) = (edge.from, edge.to);
        if self
            .edges
            .values()
            .any(|e| e.creation_seq != seq && e.from == from && e.to == to && e.relation.label == relation)
        {
            return Err(TreeError::DuplicateEdge {
                from,
                to,
                relation: relation.to_owned(),
            });
        }
        self.relations.insert(relation.to_owned());
        if let Some(edge) = self.edges.get_mut(&seq) {
            edge.relation = Relation::new(relation);
        }
        self.bump();
        Ok(())
    }

    pub fn set_flags(
        &mut self,
        id: NodeId,
        has_generated_images: Option<bool>,
        probe_selected: Option<bool>,
    ) -> Result<()> {
        let node = self.nodes.get_mut(&id).ok_or(TreeError::UnknownNode(id))?;
        if let Some(v) = has_generated_images {
            node.has_generated_images = v;
        }
        if let Some(v) = probe_selected {
            node.probe_selected = v;
        }
        self.bump();
        Ok(())
    }

    /// Adds a user relation label to the relation set without using it.
    pub fn add_relation(&mut self, label: &str) -> Result<()> {
        check_label(label)?;
        if self.relations.insert(label.to_owned()) {
            self.bump();
        }
        Ok(())
    }

    /// Flips a concept by attaching a `no` property to it.
    pub fn negate(&mut self, id: NodeId) -> Result<NodeId> {
        if id == self.root {
            log::warn!("negating the root node; every prompt will start with `no`");
        }
        self.add_node(id, NEGATION_LABEL, Some(HAS_PROPERTY))
    }

    /// The incoming edge with the lowest creation_seq, `None` for the root.
    pub fn primary_parent(&self, id: NodeId) -> Option<&Edge> {
        self.edges.values().find(|e| e.to == id)
    }

    /// Edges from the root to `id` following primary parents.
    pub fn path_to(&self, id: NodeId) -> Result<Vec<&Edge>> {
        self.node(id)?;
        let mut path = Vec::new();
        let mut cur = id;
        while cur != self.root {
            let edge = self.primary_parent(cur).ok_or(TreeError::Unreachable(id))?;
            if path.len() > self.edges.len() {
                return Err(TreeError::Unreachable(id));
            }
            path.push(edge);
            cur = edge.from;
        }
        path.reverse();
        Ok(path)
    }

    /// Nodes below `id` (excluding `id`), in breadth-first order.
    pub fn descendants(&self, id: NodeId) -> Vec<NodeId> {
        let mut seen = BTreeSet::from([id]);
        let mut out = Vec::new();
        let mut queue = VecDeque::from([id]);
        while let Some(n) = queue.pop_front() {
            for e in self.children(n) {
                if seen.insert(e.to) {
                    out.push(e.to);
                    queue.push_back(e.to);
                }
            }
        }
        out
    }

    /// Full structural check, used when loading persisted trees.
    pub fn validate(&self) -> Result<()> {
        let roots: Vec<_> = self.nodes.values().filter(|n| n.kind == NodeKind::Root).collect();
        if roots.len() != 1 || roots[0].id != self.root {
            return Err(TreeError::Invalid(format!(
                "expected exactly one root ({}), found {}",
                self.root,
                roots.len()
            )));
        }
        for n in self.nodes.values() {
            check_label(&n.label)?;
            if (n.kind == NodeKind::Anchor) != n.anchor_color.is_some() {
                return Err(TreeError::Invalid(format!(
                    "node {} has kind {:?} and color {:?}",
                    n.id, n.kind, n.anchor_color
                )));
            }
            if n.id.0 >= self.next_id {
                return Err(TreeError::Invalid(format!("node id {} >= next_id", n.id)));
            }
        }
        let mut triples = BTreeSet::new();
        for e in self.edges.values() {
            self.node(e.from)?;
            self.node(e.to)?;
            if e.from == e.to {
                return Err(TreeError::SelfLoop(e.from));
            }
            if e.creation_seq >= self.next_seq {
                return Err(TreeError::Invalid(format!("edge seq {} >= next_seq", e.creation_seq)));
            }
            if !triples.insert((e.from, e.to, e.relation.label.clone())) {
                return Err(TreeError::DuplicateEdge {
                    from: e.from,
                    to: e.to,
                    relation: e.relation.label.clone(),
                });
            }
            if !self.relations.contains(&e.relation.label) {
                return Err(TreeError::Invalid(format!(
                    "relation `{}` missing from relation set",
                    e.relation.label
                )));
            }
        }
        if !self.relations.contains(HAS_PROPERTY) {
            return Err(TreeError::Invalid("relation set lacks `has property`".into()));
        }
        if self.incoming(self.root).next().is_some() {
            return Err(TreeError::Invalid("root has an incoming edge".into()));
        }
        if self.has_cycle() {
            return Err(TreeError::Invalid("graph contains a cycle".into()));
        }
        let reachable = self.reachable_from_root();
        if let Some(orphan) = self.nodes.keys().find(|id| !reachable.contains(id)) {
            return Err(TreeError::Unreachable(*orphan));
        }
        Ok(())
    }

    fn has_cycle(&self) -> bool {
        // Kahn's algorithm: a cycle leaves nodes with nonzero in-degree.
        let mut indeg: BTreeMap<NodeId, usize> = self.nodes.keys().map(|&k| (k, 0)).collect();
        for e in self.edges.values() {
            *indeg.entry(e.to).or_default() += 1;
        }
        let mut queue: VecDeque<NodeId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
        let mut visited = 0;
        while let Some(n) = queue.pop_front() {
            visited += 1;
            for e in self.children(n) {
                let d = indeg.get_mut(&e.to).expect("edge endpoint exists");
                *d -= 1;
                if *d == 0 {
                    queue.push_back(e.to);
                }
            }
        }
        visited != self.nodes.len()
    }
}

/// Persisted form of a tree.
#[derive(Serialize, Deserialize)]
struct TreeDoc {
    root: NodeId,
    nodes: Vec<ConceptNode>,
    edges: Vec<Edge>,
    #[serde(default)]
    relations: Vec<String>,
    next_id: u64,
    next_seq: u64,
    #[serde(default)]
    version: u64,
}

impl Serialize for PromptingTree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TreeDoc {
            root: self.root,
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges.values().cloned().collect(),
            relations: self.relations.iter().cloned().collect(),
            next_id: self.next_id,
            next_seq: self.next_seq,
            version: self.version,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PromptingTree {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = TreeDoc::deserialize(d)?;
        let mut relations: BTreeSet<String> = doc.relations.into_iter().collect();
        relations.insert(HAS_PROPERTY.to_owned());
        for e in &doc.edges {
            relations.insert(e.relation.label.clone());
        }
        let mut edges = BTreeMap::new();
        for e in doc.edges {
            let seq = e.creation_seq;
            if edges.insert(seq, e).is_some() {
                return Err(serde::de::Error::custom(TreeError::SeqInUse(seq)));
            }
        }
        let mut nodes = BTreeMap::new();
        for n in doc.nodes {
            let id = n.id;
            if nodes.insert(id, n).is_some() {
                return Err(serde::de::Error::custom(TreeError::IdInUse(id)));
            }
        }
        let tree = PromptingTree {
            nodes,
            edges,
            relations,
            root: doc.root,
            next_id: doc.next_id,
            next_seq: doc.next_seq,
            version: doc.version,
        };
        tree.validate().map_err(serde::de::Error::custom)?;
        Ok(tree)
    }
}
