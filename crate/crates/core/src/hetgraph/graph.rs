use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Company,
    Person,
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeType::Company => "company",
            NodeType::Person => "person",
        })
    }
}

/// A directed, typed edge between two node indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rel: usize,
}

/// Typed-node, typed-edge multigraph with one dense feature row per node.
#[derive(Clone, Debug)]
pub struct HetGraph {
    ids: Vec<String>,
    types: Vec<NodeType>,
    index: HashMap<String, usize>,
    relations: Vec<String>,
    edges: Vec<Edge>,
    features: Tensor,
    feature_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    #[serde(rename = "type")]
    pub node_type: NodeType,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: String,
    pub dst: String,
    pub rel: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub label: u8,
}

impl HetGraph {
    /// Assembles a graph from already-parsed parts and checks every invariant.
    pub fn new(
        nodes: Vec<(String, NodeType)>,
        relations: Vec<String>,
        edges: Vec<Edge>,
        features: Tensor,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, (id, _)) in nodes.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Dimension(format!("duplicate node id {id:?}")));
            }
        }
        let unique: HashSet<&String> = relations.iter().collect();
        if unique.len() != relations.len() {
            return Err(Error::Dimension("duplicate relation name".into()));
        }
        if features.rows() != nodes.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                nodes.len()
            )));
        }
        if features.cols() != feature_names.len() {
            return Err(Error::Dimension(format!(
                "{} feature columns but {} feature names",
                features.cols(),
                feature_names.len()
            )));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for e in &edges {
            if e.src >= nodes.len() || e.dst >= nodes.len() {
                return Err(Error::Referential {
                    id: format!("#{}", e.src.max(e.dst)),
                    context: "edge endpoint".into(),
                });
            }
            if e.rel >= relations.len() {
                return Err(Error::Dimension(format!("relation index {} out of range", e.rel)));
            }
            if !seen.insert(*e) {
                return Err(Error::Dimension(format!(
                    "duplicate edge ({}, {}, {})",
                    nodes[e.src].0, nodes[e.dst].0, relations[e.rel]
                )));
            }
        }
        let (ids, types) = nodes.into_iter().unzip();
        Ok(HetGraph {
            ids,
            types,
            index,
            relations,
            edges,
            features,
            feature_names,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn node_type(&self, idx: usize) -> NodeType {
        self.types[idx]
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.types
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &str, context: &str) -> Result<usize> {
        self.index_of(id).ok_or_else(|| Error::Referential {
            id: id.to_string(),
            context: context.to_string(),
        })
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Undirected neighbor lists, sorted by node index.
    pub fn undirected_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for e in &self.edges {
            adj[e.src].push(e.dst);
            adj[e.dst].push(e.src);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Dense per-relation adjacency of the whole graph.
    pub fn dense_adjacency(&self) -> Vec<Tensor> {
        let n = self.num_nodes();
        let mut mats = vec![Tensor::zeros(n, n); self.relations.len()];
        for e in &self.edges {
            mats[e.rel].set(e.src, e.dst, 1.0);
        }
        mats
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut nodes = String::new();
        for (id, t) in self.ids.iter().zip(&self.types) {
            let rec = NodeRecord {
                id: id.clone(),
                node_type: *t,
            };
            nodes.push_str(&serde_json::to_string(&rec).expect("serializable"));
            nodes.push('\n');
        }
        write_file(&dir.join("nodes.jsonl"), &nodes)?;

        let mut edges = String::new();
        for e in &self.edges {
            let rec = EdgeRecord {
                src: self.ids[e.src].clone(),
                dst: self.ids[e.dst].clone(),
                rel: self.relations[e.rel].clone(),
            };
            edges.push_str(&serde_json::to_string(&rec).expect("serializable"));
            edges.push('\n');
        }
        write_file(&dir.join("edges.jsonl"), &edges)?;

        let mut csv = self.feature_names.join(",");
        csv.push('\n');
        for i in 0..self.num_nodes() {
            let row: Vec<String> = self.features.row(i).iter().map(|v| format!("{v}")).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        write_file(&dir.join("features.csv"), &csv)
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a JSON Lines file, skipping blank lines.
pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads `nodes.jsonl`, `edges.jsonl` and `features.csv`.
///
/// Node order is file order. Relations are indexed in order of first
/// appearance in the edge file.
pub fn load_graph(nodes_path: &Path, edges_path: &Path, features_path: &Path) -> Result<HetGraph> {
    let nodes: Vec<NodeRecord> = read_jsonl(nodes_path)?;
    let mut index = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if index.insert(n.id.clone(), i).is_some() {
            return Err(Error::Parse {
                path: nodes_path.to_path_buf(),
                line: i + 1,
                message: format!("duplicate node id {:?}", n.id),
            });
        }
    }

    let edge_recs: Vec<EdgeRecord> = read_jsonl(edges_path)?;
    let mut relations: Vec<String> = Vec::new();
    let mut edges = Vec::with_capacity(edge_recs.len());
    for (line, rec) in edge_recs.iter().enumerate() {
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| Error::Referential {
                id: id.to_string(),
                context: format!("{}:{}", edges_path.display(), line + 1),
            })
        };
        let src = lookup(&rec.src)?;
        let dst = lookup(&rec.dst)?;
        let rel = match relations.iter().position(|r| *r == rec.rel) {
            Some(r) => r,
            None => {
                relations.push(rec.rel.clone());
                relations.len() - 1
            }
        };
        edges.push(Edge { src, dst, rel });
    }

    let (feature_names, features) = read_features_csv(features_path, nodes.len())?;
    let nodes = nodes.into_iter().map(|n| (n.id, n.node_type)).collect();
    HetGraph::new(nodes, relations, edges, features, feature_names)
}

fn read_features_csv(path: &Path, expected_rows: usize) -> Result<(Vec<String>, Tensor)> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "missing header row".into(),
    })?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let d = names.len();
    let mut data = Vec::with_capacity(expected_rows * d);
    let mut rows = 0;
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(Error::Dimension(format!(
                "{}:{}: expected {d} values, found {}",
                path.display(),
                i + 1,
                fields.len()
            )));
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("not a number: {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("non-finite value {f:?}"),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows != expected_rows {
        return Err(Error::Dimension(format!(
            "{}: {rows} feature rows for {expected_rows} nodes",
            path.display()
        )));
    }
    Ok((names, Tensor::new(rows, d, data)?))
}

/// Loads `labels.jsonl` as `(node index, label)` pairs in file order.
pub fn load_labels(graph: &HetGraph, path: &Path) -> Result<Vec<(usize, u8)>> {
    let recs: Vec<LabelRecord> = read_jsonl(path)?;
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.label > 1 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("label must be 0 or 1, got {}", r.label),
                });
            }
            Ok((graph.require(&r.id, &format!("{}:{}", path.display(), i + 1))?, r.label))
        })
        .collect()
}

pub fn write_labels(graph: &HetGraph, labels: &[(usize, u8)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for &(idx, label) in labels {
        let rec = LabelRecord {
            id: graph.id(idx).to_string(),
            label,
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    write_file(path, &out)
}
