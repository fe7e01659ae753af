//! Label hierarchy: loading, validation, and path queries.
//!
//! Labels are indexed densely in document order. The hierarchy is a forest
//! of trees rooted at level-1 nodes; the virtual root above level 1 is never
//! materialized. Every leaf must sit at the deepest level, so each leaf
//! corresponds to exactly one root-to-leaf path.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chain::ChainSchedule;
use crate::error::{Error, Result};

pub type LabelId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelNode {
    pub id: LabelId,
    pub name: String,
    pub level: usize,
    pub parent: Option<LabelId>,
}

/// On-disk taxonomy document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyDoc {
    pub name: String,
    pub labels: Vec<LabelEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub name: String,
    pub level: usize,
    pub parent: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    name: String,
    nodes: Vec<LabelNode>,
    depth: usize,
    children: Vec<Vec<LabelId>>,
    leaf_paths: Vec<Vec<LabelId>>,
    /// Index into `leaf_paths` for every leaf, `None` for internal nodes.
    leaf_path_of: Vec<Option<usize>>,
    by_name: HashMap<String, LabelId>,
}

impl Taxonomy {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: TaxonomyDoc =
            serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_doc(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_doc(doc: TaxonomyDoc) -> Result<Self> {
        if doc.labels.is_empty() {
            return Err(Error::Validation("taxonomy has no labels".into()));
        }

        let mut by_name = HashMap::with_capacity(doc.labels.len());
        for (id, entry) in doc.labels.iter().enumerate() {
            if by_name.insert(entry.name.clone(), id).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate label name {:?}",
                    entry.name
                )));
            }
        }

        let mut nodes = Vec::with_capacity(doc.labels.len());
        for (id, entry) in doc.labels.iter().enumerate() {
            if entry.level == 0 {
                return Err(Error::Validation(format!(
                    "label {:?} has level 0; levels start at 1",
                    entry.name
                )));
            }
            let parent = match (&entry.parent, entry.level) {
                (None, 1) => None,
                (Some(p), 1) => {
                    return Err(Error::Validation(format!(
                        "level-1 label {:?} must not have a parent (found {p:?})",
                        entry.name
                    )))
                }
                (None, level) => {
                    return Err(Error::Validation(format!(
                        "label {:?} at level {level} has no parent",
                        entry.name
                    )))
                }
                (Some(p), level) => {
                    let pid = *by_name.get(p).ok_or_else(|| {
                        Error::Validation(format!(
                            "label {:?} references unknown parent {p:?}",
                            entry.name
                        ))
                    })?;
                    if pid == id {
                        return Err(Error::Validation(format!(
                            "cycle: label {:?} is its own parent",
                            entry.name
                        )));
                    }
                    let plevel = doc.labels[pid].level;
                    if plevel + 1 != level {
                        return Err(Error::Validation(format!(
                            "label {:?} at level {level} has parent {p:?} at level {plevel}; \
                             expected level {}",
                            entry.name,
                            level - 1
                        )));
                    }
                    Some(pid)
                }
            };
            nodes.push(LabelNode {
                id,
                name: entry.name.clone(),
                level: entry.level,
                parent,
            });
        }

        // Parent levels strictly decrease, so the parent relation is acyclic.
        let depth = nodes.iter().map(|n| n.level).max().unwrap_or(0);
        let mut per_level = vec![0usize; depth + 1];
        for n in &nodes {
            per_level[n.level] += 1;
        }
        if let Some(gap) = (1..=depth).find(|&v| per_level[v] == 0) {
            return Err(Error::Validation(format!(
                "level gap: no labels at level {gap} (depth {depth})"
            )));
        }

        let mut children = vec![Vec::new(); nodes.len()];
        for n in &nodes {
            if let Some(p) = n.parent {
                children[p].push(n.id);
            }
        }
        if let Some(n) = nodes
            .iter()
            .find(|n| n.level < depth && children[n.id].is_empty())
        {
            return Err(Error::Validation(format!(
                "label {:?} is a leaf at level {} but every leaf must be at level {depth}",
                n.name, n.level
            )));
        }

        let mut leaf_paths = Vec::new();
        let mut leaf_path_of = vec![None; nodes.len()];
        for n in nodes.iter().filter(|n| n.level == depth) {
            let mut path = vec![n.id];
            let mut cur = n.parent;
            while let Some(p) = cur {
                path.push(p);
                cur = nodes[p].parent;
            }
            path.reverse();
            leaf_path_of[n.id] = Some(leaf_paths.len());
            leaf_paths.push(path);
        }

        Ok(Taxonomy {
            name: doc.name,
            nodes,
            depth,
            children,
            leaf_paths,
            leaf_path_of,
            by_name,
        })
    }

    pub fn to_doc(&self) -> TaxonomyDoc {
        TaxonomyDoc {
            name: self.name.clone(),
            labels: self
                .nodes
                .iter()
                .map(|n| LabelEntry {
                    name: n.name.clone(),
                    level: n.level,
                    parent: n.parent.map(|p| self.nodes[p].name.clone()),
                })
                .collect(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("taxonomy serializes")
    }

    /// SHA-256 over the compact JSON serialization, hex encoded.
    pub fn fingerprint(&self) -> String {
        let compact = serde_json::to_vec(&self.to_doc()).expect("taxonomy serializes");
        Sha256::digest(&compact)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[LabelNode] {
        &self.nodes
    }

    pub fn node(&self, id: LabelId) -> Result<&LabelNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::UnknownLabel(format!("id {id}")))
    }

    pub fn level(&self, id: LabelId) -> usize {
        self.nodes[id].level
    }

    pub fn parent(&self, id: LabelId) -> Option<LabelId> {
        self.nodes[id].parent
    }

    pub fn children(&self, id: LabelId) -> &[LabelId] {
        &self.children[id]
    }

    pub fn id_of(&self, name: &str) -> Result<LabelId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn labels_at_level(&self, level: usize) -> impl Iterator<Item = LabelId> + '_ {
        self.nodes
            .iter()
            .filter(move |n| n.level == level)
            .map(|n| n.id)
    }

    /// All root-to-leaf paths, ordered by leaf id.
    pub fn leaf_paths(&self) -> &[Vec<LabelId>] {
        &self.leaf_paths
    }

    /// Index of the leaf path ending at `leaf`, if `leaf` is a leaf.
    pub fn leaf_path_index(&self, leaf: LabelId) -> Option<usize> {
        self.leaf_path_of.get(leaf).copied().flatten()
    }

    /// Ancestors of `id` ordered from level 1 down to `level(id) - 1`.
    pub fn ancestors(&self, id: LabelId) -> Result<Vec<LabelId>> {
        self.node(id)?;
        let mut out = Vec::with_capacity(self.nodes[id].level - 1);
        let mut cur = self.nodes[id].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p].parent;
        }
        out.reverse();
        Ok(out)
    }

    /// True when `anc` equals `id` or lies on the parent chain above it.
    pub fn is_ancestor_or_self(&self, anc: LabelId, id: LabelId) -> bool {
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c == anc {
                return true;
            }
            if self.nodes[c].level <= self.nodes[anc].level {
                return false;
            }
            cur = self.nodes[c].parent;
        }
        false
    }

    /// True when both labels lie on a common root-to-leaf path.
    pub fn on_common_path(&self, a: LabelId, b: LabelId) -> bool {
        self.is_ancestor_or_self(a, b) || self.is_ancestor_or_self(b, a)
    }

    /// Resolve a sequence of names (level 1 first) to a validated leaf path.
    pub fn resolve_path<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<LabelId>> {
        if names.len() != self.depth {
            return Err(Error::LengthMismatch {
                expected: self.depth,
                found: names.len(),
            });
        }
        let ids = names
            .iter()
            .map(|n| self.id_of(n.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        self.check_path(&ids)?;
        Ok(ids)
    }

    /// Verify that `ids` is exactly one root-to-leaf path, level 1 first.
    pub fn check_path(&self, ids: &[LabelId]) -> Result<()> {
        if ids.len() != self.depth {
            return Err(Error::LengthMismatch {
                expected: self.depth,
                found: ids.len(),
            });
        }
        match ids.last().and_then(|&leaf| self.leaf_path_index(leaf)) {
            Some(idx) if self.leaf_paths[idx] == ids => Ok(()),
            _ => Err(Error::Validation(format!(
                "[{}] is not a root-to-leaf path",
                ids.iter()
                    .map(|&i| self.nodes.get(i).map_or("?", |n| n.name.as_str()))
                    .collect::<Vec<_>>()
                    .join(" > ")
            ))),
        }
    }

    pub fn path_names(&self, ids: &[LabelId]) -> Vec<String> {
        ids.iter().map(|&i| self.nodes[i].name.clone()).collect()
    }
}

/// Level pairs that occur consecutively in the schedule. Transitions between
/// any other level pair are treated as cross-layer jumps.
pub fn legal_level_pairs(schedule: &ChainSchedule) -> BTreeSet<(usize, usize)> {
    schedule
        .levels()
        .windows(2)
        .map(|w| (w[0], w[1]))
        .collect()
}
