//! Heterogeneous spatio-temporal graph over `r` consecutive observation layers.
//!
//! Vertex `(node, t)` has flat index `t · n_nodes + node`. Spatial edges copy
//! the road graph inside each layer; temporal edges link `(i, t) → (i, t+1)`
//! with weight 1.

use crate::dataset_io::RoadGraph;
use crate::error::{Error, Result};
use crate::tape::SparseMatrix;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HetNode {
    pub node_index: usize,
    pub time_offset: usize,
}

impl HetNode {
    pub fn flat(self, n_nodes: usize) -> usize {
        self.time_offset * n_nodes + self.node_index
    }

    pub fn from_flat(flat: usize, n_nodes: usize) -> Self {
        Self { node_index: flat % n_nodes, time_offset: flat / n_nodes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HetEdge {
    pub src: HetNode,
    pub dst: HetNode,
    pub weight: f64,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HetGraphTemplate {
    r: usize,
    n_nodes: usize,
    edges: Vec<HetEdge>,
}

/// Weighted in-neighbor of a vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InNeighbor {
    pub node: HetNode,
    pub weight: f64,
}

pub fn build_template(graph: &RoadGraph, r: usize, temporal_bidirectional: bool) -> Result<HetGraphTemplate> {
    if r == 0 {
        return Err(Error::Config("heterogeneous graph needs at least one time step (r ≥ 1)".into()));
    }
    let n = graph.n_nodes();
    let mut edges = Vec::with_capacity(r * graph.nnz() + 2 * (r - 1) * n);
    for t in 0..r {
        for i in 0..n {
            for j in 0..n {
                let w = graph.weight(i, j);
                if w != 0.0 {
                    edges.push(HetEdge {
                        src: HetNode { node_index: i, time_offset: t },
                        dst: HetNode { node_index: j, time_offset: t },
                        weight: w,
                        kind: EdgeKind::Spatial,
                    });
                }
            }
        }
    }
    for t in 0..r.saturating_sub(1) {
        for i in 0..n {
            let a = HetNode { node_index: i, time_offset: t };
            let b = HetNode { node_index: i, time_offset: t + 1 };
            edges.push(HetEdge { src: a, dst: b, weight: 1.0, kind: EdgeKind::Temporal });
            if temporal_bidirectional {
                edges.push(HetEdge { src: b, dst: a, weight: 1.0, kind: EdgeKind::Temporal });
            }
        }
    }
    Ok(HetGraphTemplate { r, n_nodes: n, edges })
}

impl HetGraphTemplate {
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_vertices(&self) -> usize {
        self.r * self.n_nodes
    }

    pub fn edges(&self) -> &[HetEdge] {
        &self.edges
    }

    pub fn count(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// In-neighbor lists indexed by flat vertex index, sorted by source flat index.
    pub fn neighborhoods(&self) -> Vec<Vec<InNeighbor>> {
        let mut lists = vec![Vec::new(); self.n_vertices()];
        for e in &self.edges {
            lists[e.dst.flat(self.n_nodes)].push(InNeighbor { node: e.src, weight: e.weight });
        }
        for l in &mut lists {
            l.sort_by_key(|nb| nb.node.flat(self.n_nodes));
        }
        lists
    }

    /// Row-stochastic aggregation operator: row `v` averages v's in-neighbors
    /// by edge weight. Rows with zero total in-weight are empty.
    pub fn mean_aggregator(&self) -> SparseMatrix {
        let rows: Vec<Vec<(usize, f64)>> = self
            .neighborhoods()
            .into_iter()
            .map(|nbrs| {
                let total: f64 = nbrs.iter().map(|nb| nb.weight).sum();
                if total > 0.0 {
                    nbrs.iter().map(|nb| (nb.node.flat(self.n_nodes), nb.weight / total)).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        SparseMatrix::from_rows(self.n_vertices(), &rows)
    }

    /// Text dump, one `kind,src_node,src_t,dst_node,dst_t,weight` per edge.
    pub fn dump(&self) -> String {
        let mut out = String::from("kind,src_node,src_t,dst_node,dst_t,weight\n");
        for e in &self.edges {
            let kind = match e.kind {
                EdgeKind::Spatial => "spatial",
                EdgeKind::Temporal => "temporal",
            };
            let _ = writeln!(
                out,
                "{kind},{},{},{},{},{}",
                e.src.node_index, e.src.time_offset, e.dst.node_index, e.dst.time_offset, e.weight
            );
        }
        out
    }
}
