//! Turns a selection of tree nodes into one natural-language probe text.
//!
//! Rules, applied to the union of the root paths of all selected nodes:
//!
//! - A node reached through a non-property edge (or the root) is a noun.
//! - Nodes reached through `has property` edges are adjectives of the nearest
//!   noun above them. They are placed before that noun, in pre-order over the
//!   property edges (creation order among siblings), so chains and siblings
//!   both read `young male person`. The `has property` label is never emitted.
//! - Non-property edges leaving a noun or any of its adjectives continue the
//!   phrase after the noun: `<relation> <child phrase>`.
//! - Continuations sharing a relation label are merged: the label is emitted
//!   once and the children joined with `and`. If the label ends in an article
//!   (`a`, `an`, `the`) that article is repeated before each further child,
//!   giving `that shows a person and a dog`. Groups with different labels are
//!   joined with `and` as well.
//! - Multi-parent nodes are reached through their lowest-creation_seq
//!   incoming edge, recursively.
//! - Runs of spaces collapse to one; nothing else is rewritten.
//!
//! Property siblings that are not on a selected path are not included.

use std::collections::{BTreeMap, BTreeSet};

use super::{Edge, NodeId, PromptingTree, Result, TreeError};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

fn trailing_article(label: &str) -> Option<&str> {
    let last = label.split_whitespace().last()?;
    let has_more = label.split_whitespace().count() > 1;
    (has_more && ARTICLES.contains(&last)).then_some(last)
}

fn collapse_spaces(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut prev_space = false;
    for ch in s.chars() {
        if ch == ' ' {
            if !prev_space {
                out.push(' ');
            }
            prev_space = true;
        } else {
            out.push(ch);
            prev_space = false;
        }
    }
    out
}

struct Selection<'t> {
    tree: &'t PromptingTree,
    // Selected edges by parent, creation order.
    children: BTreeMap<NodeId, Vec<&'t Edge>>,
}

impl<'t> Selection<'t> {
    fn collect_adjectives(&self, node: NodeId, words: &mut Vec<&'t str>, cont: &mut Vec<&'t Edge>) {
        for edge in self.children.get(&node).into_iter().flatten() {
            if edge.relation.is_property {
                let child = &self.tree.nodes[&edge.to];
                words.push(&child.label);
                self.collect_adjectives(edge.to, words, cont);
            } else {
                cont.push(edge);
            }
        }
    }

    fn phrase(&self, noun: NodeId) -> String {
        let mut words = Vec::new();
        let mut cont = Vec::new();
        self.collect_adjectives(noun, &mut words, &mut cont);
        words.push(&self.tree.nodes[&noun].label);
        let mut out = words.join(" ");

        cont.sort_by_key(|e| e.creation_seq);
        let mut groups: Vec<(&str, Vec<NodeId>)> = Vec::new();
        for edge in cont {
            match groups.iter_mut().find(|(l, _)| *l == edge.relation.label) {
                Some((_, kids)) => kids.push(edge.to),
                None => groups.push((&edge.relation.label, vec![edge.to])),
            }
        }
        for (i, (label, kids)) in groups.iter().enumerate() {
            out.push_str(if i == 0 { " " } else { " and " });
            out.push_str(label);
            let article = trailing_article(label);
            for (k, kid) in kids.iter().enumerate() {
                if k > 0 {
                    out.push_str(" and ");
                    if let Some(a) = article {
                        out.push_str(a);
                    }
                }
                out.push(' ');
                out.push_str(&self.phrase(*kid));
            }
        }
        out
    }
}

impl PromptingTree {
    /// Text for a single node.
    pub fn serialize_node(&self, id: NodeId) -> Result<String> {
        self.serialize_selection(&[id])
    }

    /// Combined text for a set of nodes; duplicates are ignored.
    pub fn serialize_selection(&self, ids: &[NodeId]) -> Result<String> {
        if ids.is_empty() {
            return Err(TreeError::EmptySelection);
        }
        let mut seqs = BTreeSet::new();
        for &id in ids {
            for edge in self.path_to(id)? {
                seqs.insert(edge.creation_seq);
            }
        }
        let mut children: BTreeMap<NodeId, Vec<&Edge>> = BTreeMap::new();
        for seq in seqs {
            let edge = &self.edges[&seq];
            children.entry(edge.from).or_default().push(edge);
        }
        let sel = Selection { tree: self, children };
        Ok(collapse_spaces(&sel.phrase(self.root)))
    }

    /// Texts for every node except the root, keyed by node.
    pub fn serialize_all(&self) -> BTreeMap<NodeId, String> {
        self.nodes
            .keys()
            .filter(|&&id| id != self.root)
            .filter_map(|&id| self.serialize_node(id).ok().map(|s| (id, s)))
            .collect()
    }
}
