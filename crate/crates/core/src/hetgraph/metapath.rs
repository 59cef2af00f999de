use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::{Edge, NodeType};
use super::subgraph::CompSubgraph;

/// A typed path schema: `node_types[0] -relations[0]- node_types[1] ...`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetaPathPattern {
    pub node_types: Vec<NodeType>,
    pub relations: Vec<String>,
}

impl MetaPathPattern {
    pub fn new(node_types: Vec<NodeType>, relations: Vec<String>) -> Result<Self> {
        let p = MetaPathPattern {
            node_types,
            relations,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_types.len() < 2 {
            return Err(Error::Config(format!("meta-path {self} needs at least two node types")));
        }
        if self.relations.len() + 1 != self.node_types.len() {
            return Err(Error::Config(format!(
                "meta-path {self}: {} node types need {} relations",
                self.node_types.len(),
                self.node_types.len() - 1
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.node_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_types.is_empty()
    }

    /// Reads the same in both directions, so every path would match twice.
    fn is_palindrome(&self) -> bool {
        self.node_types.iter().eq(self.node_types.iter().rev())
            && self.relations.iter().eq(self.relations.iter().rev())
    }
}

impl fmt::Display for MetaPathPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.node_types.iter().enumerate() {
            if i > 0 {
                write!(f, "-{}-", self.relations.get(i - 1).map_or("?", String::as_str))?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// One concrete path matching a pattern. Indices are local to the
/// subgraph the instance was enumerated from; `edge_refs` index its
/// [`CompSubgraph::edges`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MetaPathInstance {
    pub node_ids: Vec<usize>,
    pub edge_refs: Vec<usize>,
    pub contains_center: bool,
}

/// Every simple path in `sub` whose node types and relations follow
/// `pattern`. Edges may be traversed against their stored direction. For
/// patterns that read the same both ways each path is reported once, in the
/// orientation whose node sequence is lexicographically smaller.
pub fn enumerate_metapath_instances(sub: &CompSubgraph, pattern: &MetaPathPattern) -> Vec<MetaPathInstance> {
    let rel_idx: Option<Vec<usize>> = pattern
        .relations
        .iter()
        .map(|name| sub.relations().iter().position(|r| r == name))
        .collect();
    let Some(rel_idx) = rel_idx else {
        return Vec::new();
    };
    if pattern.validate().is_err() {
        return Vec::new();
    }

    let n = sub.num_nodes();
    let mut incident: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); n];
    for (k, e) in sub.edges().iter().enumerate() {
        if e.src == e.dst {
            continue;
        }
        incident[e.src].push((e.dst, k, e.rel));
        incident[e.dst].push((e.src, k, e.rel));
    }
    for list in &mut incident {
        list.sort_unstable();
    }

    let types = sub.node_types();
    let palindrome = pattern.is_palindrome();
    let mut out = Vec::new();
    let mut nodes = Vec::with_capacity(pattern.len());
    let mut edges = Vec::with_capacity(pattern.len() - 1);
    let mut on_path = vec![false; n];
    for start in 0..n {
        if types[start] != pattern.node_types[0] {
            continue;
        }
        nodes.push(start);
        on_path[start] = true;
        extend(
            &incident,
            types,
            pattern,
            &rel_idx,
            &mut nodes,
            &mut edges,
            &mut on_path,
            &mut |nodes, edges| {
                if palindrome && nodes.iter().rev().lt(nodes.iter()) {
                    return;
                }
                out.push(MetaPathInstance {
                    node_ids: nodes.to_vec(),
                    edge_refs: edges.to_vec(),
                    contains_center: nodes.contains(&sub.center()),
                });
            },
        );
        on_path[start] = false;
        nodes.pop();
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn extend(
    incident: &[Vec<(usize, usize, usize)>],
    types: &[NodeType],
    pattern: &MetaPathPattern,
    rel_idx: &[usize],
    nodes: &mut Vec<usize>,
    edges: &mut Vec<usize>,
    on_path: &mut [bool],
    emit: &mut impl FnMut(&[usize], &[usize]),
) {
    let depth = nodes.len();
    if depth == pattern.len() {
        emit(nodes, edges);
        return;
    }
    let here = *nodes.last().expect("path has a start node");
    for &(next, edge, rel) in &incident[here] {
        if rel != rel_idx[depth - 1] || on_path[next] || types[next] != pattern.node_types[depth] {
            continue;
        }
        nodes.push(next);
        edges.push(edge);
        on_path[next] = true;
        extend(incident, types, pattern, rel_idx, nodes, edges, on_path, emit);
        on_path[next] = false;
        edges.pop();
        nodes.pop();
    }
}

/// Edges referenced by any of the instances, deduplicated.
pub fn instance_edges(sub: &CompSubgraph, instances: &[MetaPathInstance]) -> BTreeSet<Edge> {
    instances
        .iter()
        .flat_map(|inst| inst.edge_refs.iter().map(|&k| sub.edges()[k]))
        .collect()
}

/// A copy of `sub` with every edge used by any instance set to zero.
pub fn remove_metapath(sub: &CompSubgraph, instances: &[MetaPathInstance]) -> Result<CompSubgraph> {
    if instances.is_empty() {
        return Ok(sub.clone());
    }
    for inst in instances {
        if let Some(&bad) = inst.edge_refs.iter().find(|&&k| k >= sub.edges().len()) {
            return Err(Error::shape("remove_metapath", format!("edge ref {bad} out of range")));
        }
    }
    let mut adjacency = sub.adjacency().to_vec();
    for e in instance_edges(sub, instances) {
        adjacency[e.rel].set(e.src, e.dst, 0.0);
    }
    sub.with_adjacency(adjacency)
}
