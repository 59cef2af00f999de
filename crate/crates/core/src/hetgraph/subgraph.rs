use std::collections::VecDeque;

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};

use super::graph::{Edge, HetGraph, NodeType};

/// The L-hop neighbourhood of a center node, with dense per-relation
/// adjacency in local indices. The center is always local index 0.
#[derive(Clone, Debug)]
pub struct CompSubgraph {
    center_id: String,
    hops: usize,
    node_ids: Vec<String>,
    global: Vec<usize>,
    node_types: Vec<NodeType>,
    relations: Vec<String>,
    adjacency: Vec<Tensor>,
    features: Tensor,
    label: Option<u8>,
    edges: Vec<Edge>,
}

/// Extracts the computation subgraph of `center`: every node within `hops`
/// undirected steps. Edge direction is kept inside the adjacency matrices.
pub fn computation_subgraph(g: &HetGraph, center: &str, hops: usize) -> Result<CompSubgraph> {
    let c = g.require(center, "computation subgraph center")?;
    if hops == 0 {
        return Err(Error::Config("computation subgraph needs at least one hop".into()));
    }
    let neighbors = g.undirected_neighbors();
    let order = bfs_within(&neighbors, c, hops);
    let mut local = vec![usize::MAX; g.num_nodes()];
    for (i, &v) in order.iter().enumerate() {
        local[v] = i;
    }
    let n = order.len();
    let mut adjacency = vec![Tensor::zeros(n, n); g.relations().len()];
    for e in g.edges() {
        let (s, d) = (local[e.src], local[e.dst]);
        if s != usize::MAX && d != usize::MAX {
            adjacency[e.rel].set(s, d, 1.0);
        }
    }
    let feats = g.features();
    let mut data = Vec::with_capacity(n * feats.cols());
    for &v in &order {
        data.extend_from_slice(feats.row(v));
    }
    let features = Tensor::new(n, feats.cols(), data)?;
    let edges = collect_edges(&adjacency);
    Ok(CompSubgraph {
        center_id: center.to_string(),
        hops,
        node_ids: order.iter().map(|&v| g.id(v).to_string()).collect(),
        node_types: order.iter().map(|&v| g.node_type(v)).collect(),
        global: order,
        relations: g.relations().to_vec(),
        adjacency,
        features,
        label: None,
        edges,
    })
}

/// Breadth-first order of nodes at undirected distance <= `hops`.
pub(crate) fn bfs_within(neighbors: &[Vec<usize>], start: usize, hops: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; neighbors.len()];
    dist[start] = 0;
    let mut order = vec![start];
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        if dist[v] == hops {
            continue;
        }
        for &w in &neighbors[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                order.push(w);
                queue.push_back(w);
            }
        }
    }
    order
}

fn collect_edges(adjacency: &[Tensor]) -> Vec<Edge> {
    let mut edges = Vec::new();
    let n = adjacency.first().map_or(0, Tensor::rows);
    for src in 0..n {
        for dst in 0..n {
            for (rel, a) in adjacency.iter().enumerate() {
                if a.get(src, dst) > 0.0 {
                    edges.push(Edge { src, dst, rel });
                }
            }
        }
    }
    edges
}

fn check_adjacency(adjacency: &[Tensor], n: usize) -> Result<()> {
    for (r, a) in adjacency.iter().enumerate() {
        if a.shape() != (n, n) {
            return Err(Error::shape(
                "adjacency",
                format!("relation {r} is {}x{}, expected {n}x{n}", a.rows(), a.cols()),
            ));
        }
        if a.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Dimension(format!("relation {r} has adjacency entries outside [0,1]")));
        }
    }
    Ok(())
}

impl CompSubgraph {
    pub fn with_label(mut self, label: Option<u8>) -> Self {
        self.label = label;
        self
    }

    /// A copy with different (possibly weighted) adjacency over the same nodes.
    pub fn with_adjacency(&self, adjacency: Vec<Tensor>) -> Result<Self> {
        if adjacency.len() != self.relations.len() {
            return Err(Error::shape(
                "adjacency",
                format!("{} relations, expected {}", adjacency.len(), self.relations.len()),
            ));
        }
        check_adjacency(&adjacency, self.num_nodes())?;
        let edges = collect_edges(&adjacency);
        Ok(CompSubgraph {
            adjacency,
            edges,
            ..self.clone()
        })
    }

    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::shape("features", "feature matrix shape changed"));
        }
        Ok(CompSubgraph {
            features,
            ..self.clone()
        })
    }

    pub fn center_id(&self) -> &str {
        &self.center_id
    }

    /// Local index of the center node.
    pub fn center(&self) -> usize {
        0
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    /// Indices of the subgraph's nodes in the parent graph.
    pub fn global_indices(&self) -> &[usize] {
        &self.global
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn adjacency(&self) -> &[Tensor] {
        &self.adjacency
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn label(&self) -> Option<u8> {
        self.label
    }

    /// Non-zero `(src, dst, rel)` entries in lexicographic order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn weight(&self, e: Edge) -> f64 {
        self.adjacency[e.rel].get(e.src, e.dst)
    }

    /// Binary n×n matrix marking pairs joined by an edge of any relation.
    pub fn support(&self) -> Tensor {
        let n = self.num_nodes();
        let mut s = Tensor::zeros(n, n);
        for e in &self.edges {
            s.set(e.src, e.dst, 1.0);
        }
        s
    }

    pub fn local_index(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }
}
