//! Graphs, normalized neighborhoods and block-diagonal batching.
//!
//! `N_i` is node `i`'s in-neighbors plus `i` itself. The hop-1 operator
//! carries the symmetric-degree coefficients `1/√(|N_i||N_j|)` and the hop-2
//! operator is its square, so hop-2 aggregation equals two successive hop-1
//! propagations.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Csr, Matrix};

/// Task target of one graph: a scalar (class index, binary label or real
/// value) or a vector (multi-label binary targets with missing entries, or
/// per-node classes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Scalar(f64),
    Vector(Vec<Option<f64>>),
}

impl Target {
    /// Entries as a list, scalar targets having length one.
    pub fn values(&self) -> Vec<Option<f64>> {
        match self {
            Target::Scalar(v) => vec![Some(*v)],
            Target::Vector(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub graph_id: String,
    pub num_nodes: usize,
    /// Directed `(src, dst)` pairs; messages flow from `src` to `dst`.
    pub edges: Vec<(usize, usize)>,
    pub node_feat: Matrix,
    /// One row per entry of `edges`.
    pub edge_feat: Option<Matrix>,
    pub target: Target,
}

impl Graph {
    pub fn new(
        graph_id: impl Into<String>,
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        node_feat: Matrix,
        edge_feat: Option<Matrix>,
        target: Target,
    ) -> Result<Self> {
        let g = Self {
            graph_id: graph_id.into(),
            num_nodes,
            edges,
            node_feat,
            edge_feat,
            target,
        };
        g.validate()?;
        Ok(g)
    }

    /// Like [`Graph::new`] but adds the reverse of every edge that lacks
    /// one; a mirrored edge copies the feature row of its original.
    pub fn undirected(
        graph_id: impl Into<String>,
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        node_feat: Matrix,
        edge_feat: Option<Matrix>,
        target: Target,
    ) -> Result<Self> {
        let mut g = Self::new(graph_id, num_nodes, edges, node_feat, edge_feat, target)?;
        g.mirror_edges();
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(invalid(format!("graph {} has no nodes", self.graph_id)));
        }
        if self.node_feat.rows() != self.num_nodes {
            return Err(invalid(format!(
                "graph {}: {} feature rows for {} nodes",
                self.graph_id,
                self.node_feat.rows(),
                self.num_nodes
            )));
        }
        if let Some(&(s, d)) = self
            .edges
            .iter()
            .find(|&&(s, d)| s >= self.num_nodes || d >= self.num_nodes)
        {
            return Err(invalid(format!(
                "graph {}: edge ({s}, {d}) references a node >= {}",
                self.graph_id, self.num_nodes
            )));
        }
        if let Some(ef) = &self.edge_feat {
            if ef.rows() != self.edges.len() {
                return Err(invalid(format!(
                    "graph {}: {} edge feature rows for {} edges",
                    self.graph_id,
                    ef.rows(),
                    self.edges.len()
                )));
            }
        }
        if let Target::Scalar(v) = self.target {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("target of graph {}", self.graph_id)));
            }
        }
        Ok(())
    }

    pub(crate) fn mirror_edges(&mut self) {
        let present: BTreeSet<(usize, usize)> = self.edges.iter().copied().collect();
        let mut extra = Vec::new();
        let mut extra_feat = Vec::new();
        let mut seen = BTreeSet::new();
        for (e, &(s, d)) in self.edges.iter().enumerate() {
            if s != d && !present.contains(&(d, s)) && seen.insert((d, s)) {
                extra.push((d, s));
                if let Some(ef) = &self.edge_feat {
                    extra_feat.extend_from_slice(ef.row(e));
                }
            }
        }
        if extra.is_empty() {
            return;
        }
        self.edges.extend(extra);
        if let Some(ef) = &self.edge_feat {
            let mut data = ef.data().to_vec();
            data.extend(extra_feat);
            self.edge_feat = Some(Matrix::from_raw(self.edges.len(), ef.cols(), data));
        }
    }

    pub fn input_dim(&self) -> usize {
        self.node_feat.cols()
    }

    pub fn edge_dim(&self) -> Option<usize> {
        self.edge_feat.as_ref().map(Matrix::cols)
    }

    /// `N_i` for every node: in-neighbors plus the node itself.
    pub fn neighbor_sets(&self) -> Vec<BTreeSet<usize>> {
        let mut sets: Vec<BTreeSet<usize>> = (0..self.num_nodes).map(|i| BTreeSet::from([i])).collect();
        for &(s, d) in &self.edges {
            sets[d].insert(s);
        }
        sets
    }
}

/// Precomputed propagation operators of one graph (or a batch).
#[derive(Clone, Debug)]
pub struct Neighborhoods {
    /// `1/√(|N_i||N_j|)` for `j ∈ N_i` (self-loops included).
    pub hop1: Arc<Csr>,
    /// `hop1 · hop1`.
    pub hop2: Arc<Csr>,
    /// `|N_i|`.
    pub degree: Vec<usize>,
    /// Unit coefficients on the hop-1 support without the diagonal.
    pub sum1: Arc<Csr>,
    /// Unit coefficients on the hop-2 support without the diagonal.
    pub sum2: Arc<Csr>,
    /// Row `i` is `Σ_{j ∈ N_i, j ≠ i} hop1(i, j) · e_ji`.
    pub edge_agg: Option<Matrix>,
}

impl Neighborhoods {
    pub fn num_nodes(&self) -> usize {
        self.degree.len()
    }

    fn block_diag(parts: &[&Neighborhoods]) -> Result<Neighborhoods> {
        let cat = |f: fn(&Neighborhoods) -> &Arc<Csr>| {
            let blocks: Vec<&Csr> = parts.iter().map(|p| f(p).as_ref()).collect();
            Arc::new(Csr::block_diag(&blocks))
        };
        let edge_agg = match parts.iter().map(|p| p.edge_agg.as_ref()).collect::<Option<Vec<_>>>() {
            Some(mats) if !mats.is_empty() => {
                let cols = mats[0].cols();
                if mats.iter().any(|m| m.cols() != cols) {
                    return Err(invalid("edge feature dims differ within a batch"));
                }
                let rows = mats.iter().map(|m| m.rows()).sum();
                let data = mats.iter().flat_map(|m| m.data().iter().copied()).collect();
                Some(Matrix::from_raw(rows, cols, data))
            }
            _ => None,
        };
        Ok(Neighborhoods {
            hop1: cat(|n| &n.hop1),
            hop2: cat(|n| &n.hop2),
            degree: parts.iter().flat_map(|p| p.degree.iter().copied()).collect(),
            sum1: cat(|n| &n.sum1),
            sum2: cat(|n| &n.sum2),
            edge_agg,
        })
    }
}

/// Builds the normalized hop-1/hop-2 operators of `g`.
pub fn build_neighborhoods(g: &Graph) -> Result<Neighborhoods> {
    g.validate()?;
    let n = g.num_nodes;
    let sets = g.neighbor_sets();
    let degree: Vec<usize> = sets.iter().map(BTreeSet::len).collect();
    let coef = |i: usize, j: usize| 1.0 / ((degree[i] * degree[j]) as f64).sqrt();

    let mut triplets = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        for &j in set {
            triplets.push((i, j, coef(i, j)));
        }
    }
    let hop1 = Csr::from_triplets(n, n, &triplets);
    let hop2 = hop1.matmul(&hop1);
    let sum1 = hop1.filter(|i, j| i != j).map_values(|_, _, _| 1.0);
    let sum2 = hop2.filter(|i, j| i != j).map_values(|_, _, _| 1.0);

    let edge_agg = g.edge_feat.as_ref().map(|ef| {
        let mut agg = Matrix::zeros(n, ef.cols());
        let mut seen = BTreeSet::new();
        for (e, &(s, d)) in g.edges.iter().enumerate() {
            if s == d || !seen.insert((s, d)) {
                continue;
            }
            let c = coef(d, s);
            for (o, v) in agg.row_mut(d).iter_mut().zip(ef.row(e)) {
                *o += c * v;
            }
        }
        agg
    });

    Ok(Neighborhoods {
        hop1: Arc::new(hop1),
        hop2: Arc::new(hop2),
        degree,
        sum1: Arc::new(sum1),
        sum2: Arc::new(sum2),
        edge_agg,
    })
}

/// Several graphs stacked block-diagonally.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub node_feat: Matrix,
    /// First node of each graph.
    pub offsets: Vec<usize>,
    pub nbrs: Neighborhoods,
    pub targets: Vec<Target>,
    pub graph_ids: Vec<String>,
    /// `num_graphs × num_nodes` mean-pooling operator.
    pub pool: Arc<Csr>,
}

impl GraphBatch {
    pub fn num_graphs(&self) -> usize {
        self.offsets.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_feat.rows()
    }

    /// Node range of graph `g`.
    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        let end = self.offsets.get(g + 1).copied().unwrap_or(self.num_nodes());
        self.offsets[g]..end
    }
}

/// Stacks graphs; neighborhoods are built per graph, so no edge crosses
/// graph boundaries.
pub fn batch_graphs(graphs: &[&Graph]) -> Result<GraphBatch> {
    let parts: Vec<Neighborhoods> = graphs.iter().map(|g| build_neighborhoods(g)).collect::<Result<_>>()?;
    batch_with_neighborhoods(graphs, &parts.iter().collect::<Vec<_>>())
}

/// [`batch_graphs`] with neighborhoods that were built beforehand.
pub fn batch_with_neighborhoods(graphs: &[&Graph], parts: &[&Neighborhoods]) -> Result<GraphBatch> {
    let first = graphs.first().ok_or_else(|| invalid("cannot batch zero graphs"))?;
    let dim = first.input_dim();
    let edge_dim = first.edge_dim();
    for g in graphs {
        if g.input_dim() != dim {
            return Err(invalid(format!(
                "graph {} has feature dim {}, expected {dim}",
                g.graph_id,
                g.input_dim()
            )));
        }
        if g.edge_dim() != edge_dim {
            return Err(invalid(format!("graph {} has a different edge feature dim", g.graph_id)));
        }
    }
    assert_eq!(graphs.len(), parts.len(), "one neighborhood per graph");

    let total: usize = graphs.iter().map(|g| g.num_nodes).sum();
    let mut offsets = Vec::with_capacity(graphs.len());
    let mut data = Vec::with_capacity(total * dim);
    let mut pool = Vec::with_capacity(total);
    let mut at = 0;
    for (gi, g) in graphs.iter().enumerate() {
        offsets.push(at);
        data.extend_from_slice(g.node_feat.data());
        let w = 1.0 / g.num_nodes as f64;
        pool.extend((at..at + g.num_nodes).map(|n| (gi, n, w)));
        at += g.num_nodes;
    }
    Ok(GraphBatch {
        node_feat: Matrix::from_raw(total, dim, data),
        offsets,
        nbrs: Neighborhoods::block_diag(parts)?,
        targets: graphs.iter().map(|g| g.target.clone()).collect(),
        graph_ids: graphs.iter().map(|g| g.graph_id.clone()).collect(),
        pool: Arc::new(Csr::from_triplets(graphs.len(), total, &pool)),
    })
}
