//! Heterogeneous company/person graphs, L-hop computation subgraphs and
//! meta-path enumeration.

mod graph;
mod metapath;
mod subgraph;

pub use graph::{
    load_graph, load_labels, write_labels, Edge, EdgeRecord, HetGraph, LabelRecord, NodeRecord, NodeType,
};
pub(crate) use graph::{read_file, read_jsonl, write_file};
pub use metapath::{
    enumerate_metapath_instances, instance_edges, remove_metapath, MetaPathInstance, MetaPathPattern,
};
pub use subgraph::{computation_subgraph, CompSubgraph};
