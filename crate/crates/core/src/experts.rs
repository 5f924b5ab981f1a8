//! Message-passing experts.
//!
//! Experts aggregate first and transform second: neighbor aggregation of
//! the layer input is the same for every expert of a layer, so it is
//! computed once per layer by a [`Propagator`] and each expert only
//! transforms the rows routed to it. For GCN this is `Â (H W) = (Â H) W`.

use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::flops::FlopKind;
use crate::graph::Neighborhoods;
use crate::numerics::{Csr, FlopSite, Initializer, Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Gcn,
    Gin,
}

impl ExpertKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::Gcn => "gcn",
            ExpertKind::Gin => "gin",
        }
    }
}

impl std::str::FromStr for ExpertKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(ExpertKind::Gcn),
            "gin" => Ok(ExpertKind::Gin),
            other => Err(invalid(format!("unknown expert kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hop {
    One,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertConfig {
    pub kind: ExpertKind,
    pub hop: Hop,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Edge feature width, for GCN hop-1 experts that embed edge features.
    pub edge_dim: Option<usize>,
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(invalid("expert dims must be at least 1"));
        }
        if let Some(d) = self.edge_dim {
            if d == 0 {
                return Err(invalid("edge feature dim must be at least 1"));
            }
            if self.kind != ExpertKind::Gcn || self.hop != Hop::One {
                return Err(invalid("edge features are only supported by hop-1 GCN experts"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GcnExpert {
    pub config: ExpertConfig,
    pub weight: ParamId,
    /// `edge_dim × in_dim` embedding added to neighbor messages.
    pub edge_embed: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct GinExpert {
    pub config: ExpertConfig,
    /// GIN's self-weight; unrelated to the gate's Gaussian noise.
    pub eps_gin: ParamId,
    pub mlp_in: ParamId,
    pub mlp_out: ParamId,
}

#[derive(Clone, Debug)]
pub enum Expert {
    Gcn(GcnExpert),
    Gin(GinExpert),
}

impl Expert {
    /// Registers the expert's parameters under `prefix`.
    pub fn new(config: ExpertConfig, store: &mut ParamStore, prefix: &str, init: &Initializer) -> Result<Self> {
        config.validate()?;
        let (i, o) = (config.in_dim, config.out_dim);
        Ok(match config.kind {
            ExpertKind::Gcn => {
                let wname = format!("{prefix}.weight");
                let weight = store.push(wname.clone(), init.glorot(&wname, i, o));
                let edge_embed = config.edge_dim.map(|d| {
                    let name = format!("{prefix}.edge_embed");
                    store.push(name.clone(), init.glorot(&name, d, i))
                });
                Expert::Gcn(GcnExpert {
                    config,
                    weight,
                    edge_embed,
                })
            }
            ExpertKind::Gin => {
                let eps_gin = store.push(format!("{prefix}.eps_gin"), Matrix::scalar(0.0));
                let n1 = format!("{prefix}.mlp_in");
                let mlp_in = store.push(n1.clone(), init.glorot(&n1, i, o));
                let n2 = format!("{prefix}.mlp_out");
                let mlp_out = store.push(n2.clone(), init.glorot(&n2, o, o));
                Expert::Gin(GinExpert {
                    config,
                    eps_gin,
                    mlp_in,
                    mlp_out,
                })
            }
        })
    }

    pub fn config(&self) -> &ExpertConfig {
        match self {
            Expert::Gcn(e) => &e.config,
            Expert::Gin(e) => &e.config,
        }
    }

    /// Pre-activation output for `rows` (all nodes when `None`), one row
    /// per requested node. `params` are the tape leaves of the owning store.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], prop: &mut Propagator<'_>, rows: Option<&Rc<[usize]>>) -> Var {
        let restrict = |tape: &mut Tape, v: Var| match rows {
            Some(r) => tape.gather_rows(v, r.clone()),
            None => v,
        };
        match self {
            Expert::Gcn(e) => {
                let agg = prop.gcn(tape, e.config.hop);
                let mut x = prop.restrict_aggregate(tape, agg, e.config.hop, rows);
                let saved = tape.flop_site();
                tape.set_flop_site(prop.site(FlopKind::Transform));
                if let Some(embed) = e.edge_embed {
                    let edges = prop.edge_aggregate(tape);
                    let edges = restrict(tape, edges);
                    let msg = tape.matmul(edges, params[embed.0]);
                    x = tape.add(x, msg);
                }
                let out = tape.matmul(x, params[e.weight.0]);
                tape.set_flop_site(saved);
                out
            }
            Expert::Gin(e) => {
                let nsum = prop.gin(tape, e.config.hop);
                let nsum = prop.restrict_aggregate(tape, nsum, e.config.hop, rows);
                let own = restrict(tape, prop.input);
                let one_plus_eps = tape.add_scalar(params[e.eps_gin.0], 1.0);
                let own = tape.mul(own, one_plus_eps);
                let x = tape.add(nsum, own);
                let saved = tape.flop_site();
                tape.set_flop_site(prop.site(FlopKind::Transform));
                let hidden = tape.matmul(x, params[e.mlp_in.0]);
                let hidden = tape.relu(hidden);
                let out = tape.matmul(hidden, params[e.mlp_out.0]);
                tape.set_flop_site(saved);
                out
            }
        }
    }
}

/// Lazily computed neighbor aggregations of one layer input, shared by all
/// experts of the layer.
pub struct Propagator<'a> {
    nbrs: &'a Neighborhoods,
    input: Var,
    layer: Option<usize>,
    hop1: Option<Var>,
    hop2: Option<Var>,
    sum1: Option<Var>,
    sum2: Option<Var>,
    edges: Option<Var>,
    hop2_rows: Option<Rc<[usize]>>,
}

impl<'a> Propagator<'a> {
    /// `layer` selects where propagation and transform flops are charged;
    /// `None` leaves them uncounted.
    pub fn new(nbrs: &'a Neighborhoods, input: Var, layer: Option<usize>) -> Self {
        Self {
            nbrs,
            input,
            layer,
            hop1: None,
            hop2: None,
            sum1: None,
            sum2: None,
            edges: None,
            hop2_rows: None,
        }
    }

    /// Limits hop-2 aggregation to the sorted node ids `rows`, the nodes
    /// routed to any hop-2 expert. Must precede the first hop-2 aggregate.
    pub fn restrict_hop2(&mut self, rows: Rc<[usize]>) {
        assert!(self.hop2.is_none() && self.sum2.is_none(), "hop-2 aggregate already computed");
        debug_assert!(rows.windows(2).all(|w| w[0] < w[1]), "hop-2 rows must be sorted and distinct");
        self.hop2_rows = Some(rows);
    }

    fn hop2_operator(&self, op: &Arc<Csr>) -> Arc<Csr> {
        match &self.hop2_rows {
            Some(rows) => Arc::new(op.select_rows(rows)),
            None => op.clone(),
        }
    }

    /// Rows `rows` (all nodes when `None`) of an aggregate returned by
    /// [`Self::gcn`] or [`Self::gin`].
    pub fn restrict_aggregate(&self, tape: &mut Tape, agg: Var, hop: Hop, rows: Option<&Rc<[usize]>>) -> Var {
        match (hop, &self.hop2_rows, rows) {
            (Hop::Two, Some(computed), Some(r)) => {
                if r.len() == computed.len() {
                    return agg;
                }
                let positions: Rc<[usize]> = r
                    .iter()
                    .map(|i| computed.binary_search(i).expect("routed node outside the hop-2 rows"))
                    .collect();
                tape.gather_rows(agg, positions)
            }
            (Hop::Two, Some(_), None) => panic!("all-node expert with a restricted hop-2 aggregate"),
            (_, _, Some(r)) => tape.gather_rows(agg, r.clone()),
            (_, _, None) => agg,
        }
    }

    pub fn input(&self) -> Var {
        self.input
    }

    pub fn neighborhoods(&self) -> &Neighborhoods {
        self.nbrs
    }

    fn site(&self, kind: FlopKind) -> Option<FlopSite> {
        self.layer.map(|layer| FlopSite { layer, kind })
    }

    fn propagate(&self, tape: &mut Tape, op: &Arc<Csr>, x: Var) -> Var {
        let saved = tape.flop_site();
        tape.set_flop_site(self.site(FlopKind::Propagation));
        let out = tape.sparse_matmul(op.clone(), x);
        tape.set_flop_site(saved);
        out
    }

    /// `Â H` for hop 1, `Â (Â H)` for hop 2 (only the restricted rows).
    pub fn gcn(&mut self, tape: &mut Tape, hop: Hop) -> Var {
        let h1 = match self.hop1 {
            Some(v) => v,
            None => {
                let v = self.propagate(tape, &self.nbrs.hop1, self.input);
                self.hop1 = Some(v);
                v
            }
        };
        match hop {
            Hop::One => h1,
            Hop::Two => match self.hop2 {
                Some(v) => v,
                None => {
                    let op = self.hop2_operator(&self.nbrs.hop1);
                    let v = self.propagate(tape, &op, h1);
                    self.hop2 = Some(v);
                    v
                }
            },
        }
    }

    /// Unweighted sum over the hop-1 or hop-2 support, excluding the node
    /// itself (hop 2: only the restricted rows).
    pub fn gin(&mut self, tape: &mut Tape, hop: Hop) -> Var {
        let (slot, op) = match hop {
            Hop::One => (self.sum1, &self.nbrs.sum1),
            Hop::Two => (self.sum2, &self.nbrs.sum2),
        };
        if let Some(v) = slot {
            return v;
        }
        let op = match hop {
            Hop::One => op.clone(),
            Hop::Two => self.hop2_operator(op),
        };
        let v = self.propagate(tape, &op, self.input);
        match hop {
            Hop::One => self.sum1 = Some(v),
            Hop::Two => self.sum2 = Some(v),
        }
        v
    }

    fn edge_aggregate(&mut self, tape: &mut Tape) -> Var {
        if let Some(v) = self.edges {
            return v;
        }
        let agg = self
            .nbrs
            .edge_agg
            .clone()
            .expect("edge-feature expert run on a graph without edge features");
        let v = tape.constant(agg);
        self.edges = Some(v);
        v
    }
}

/// Runs one expert over every node of `h`.
pub fn expert_forward(expert: &Expert, store: &ParamStore, h: &Matrix, nbrs: &Neighborhoods) -> Result<Matrix> {
    let cfg = expert.config();
    if h.cols() != cfg.in_dim {
        return Err(invalid(format!("input has {} columns, expert expects {}", h.cols(), cfg.in_dim)));
    }
    if h.rows() != nbrs.num_nodes() {
        return Err(invalid(format!(
            "input has {} rows for {} nodes",
            h.rows(),
            nbrs.num_nodes()
        )));
    }
    if let Some(d) = cfg.edge_dim {
        match &nbrs.edge_agg {
            Some(agg) if agg.cols() == d => {}
            _ => return Err(invalid(format!("expert expects edge features of dim {d}"))),
        }
    }
    let mut tape = Tape::new();
    let params = tape.load_params(store);
    let input = tape.constant(h.clone());
    let mut prop = Propagator::new(nbrs, input, None);
    let out = expert.forward(&mut tape, &params, &mut prop, None);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_neighborhoods, Graph, Target};
    use crate::numerics::Rng;

    fn graph(n: usize, edges: &[(usize, usize)], feat: Matrix) -> Graph {
        Graph::undirected("g", n, edges.to_vec(), feat, None, Target::Scalar(0.0)).unwrap()
    }

    fn gcn(store: &mut ParamStore, hop: Hop, dim: usize) -> Expert {
        let cfg = ExpertConfig {
            kind: ExpertKind::Gcn,
            hop,
            in_dim: dim,
            out_dim: dim,
            edge_dim: None,
        };
        let e = Expert::new(cfg, store, "e", &Initializer::new(0)).unwrap();
        if let Expert::Gcn(g) = &e {
            store.set(g.weight, Matrix::identity(dim)).unwrap();
        }
        e
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn random_edges(n: usize, count: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
        (0..count).map(|_| (rng.below(n), rng.below(n))).collect()
    }

    #[test]
    fn isolated_node_identity() {
        let h = Matrix::from_rows(&[[1.5, -2.0]]).unwrap();
        let g = graph(1, &[], h.clone());
        let mut store = ParamStore::new();
        let e = gcn(&mut store, Hop::One, 2);
        let out = expert_forward(&e, &store, &h, &build_neighborhoods(&g).unwrap()).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn two_nodes_average() {
        let h = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let g = graph(2, &[(0, 1)], h.clone());
        let mut store = ParamStore::new();
        let e = gcn(&mut store, Hop::One, 2);
        let out = expert_forward(&e, &store, &h, &build_neighborhoods(&g).unwrap()).unwrap();
        assert_eq!(out.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn hop2_on_path_matches_dense_square() {
        let h = Matrix::identity(3);
        let g = graph(3, &[(0, 1), (1, 2)], h.clone());
        let nb = build_neighborhoods(&g).unwrap();
        let mut store = ParamStore::new();
        let e = gcn(&mut store, Hop::Two, 3);
        let out = expert_forward(&e, &store, &h, &nb).unwrap();
        // Dense oracle: normalized adjacency with self-loops, squared.
        let s6 = 6f64.sqrt();
        let a = Matrix::from_rows(&[
            [0.5, 1.0 / s6, 0.0],
            [1.0 / s6, 1.0 / 3.0, 1.0 / s6],
            [0.0, 1.0 / s6, 0.5],
        ])
        .unwrap();
        let a2 = a.matmul(&a).unwrap();
        assert!(out.max_abs_diff(&a2) < 1e-15);
        assert!((out.get(0, 0) - 5.0 / 12.0).abs() < 1e-15);
        assert!((out.get(0, 1) - (0.5 / s6 + 1.0 / (3.0 * s6))).abs() < 1e-15);
        assert!((out.get(0, 2) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn gin_isolated_node_is_mlp() {
        let h = Matrix::from_rows(&[[0.5, -1.0, 2.0]]).unwrap();
        let g = graph(1, &[], h.clone());
        let mut store = ParamStore::new();
        let cfg = ExpertConfig {
            kind: ExpertKind::Gin,
            hop: Hop::One,
            in_dim: 3,
            out_dim: 2,
            edge_dim: None,
        };
        let e = Expert::new(cfg, &mut store, "gin", &Initializer::new(3)).unwrap();
        let out = expert_forward(&e, &store, &h, &build_neighborhoods(&g).unwrap()).unwrap();
        let Expert::Gin(gin) = &e else { unreachable!() };
        let hidden = h.matmul(store.get(gin.mlp_in)).unwrap().map(|v| v.max(0.0));
        let expected = hidden.matmul(store.get(gin.mlp_out)).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn gin_sums_neighbors_without_self() {
        let h = Matrix::from_rows(&[[1.0], [10.0], [100.0]]).unwrap();
        let g = graph(3, &[(0, 1), (1, 2)], h.clone());
        let nb = build_neighborhoods(&g).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(h);
        let mut prop = Propagator::new(&nb, x, None);
        let s1 = prop.gin(&mut tape, Hop::One);
        let s2 = prop.gin(&mut tape, Hop::Two);
        assert_eq!(tape.value(s1).data(), &[10.0, 101.0, 10.0]);
        assert_eq!(tape.value(s2).data(), &[110.0, 101.0, 11.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let h = Matrix::zeros(2, 3);
        let g = graph(2, &[(0, 1)], h.clone());
        let mut store = ParamStore::new();
        let e = gcn(&mut store, Hop::One, 2);
        assert!(expert_forward(&e, &store, &h, &build_neighborhoods(&g).unwrap()).is_err());
    }

    #[test]
    fn edge_features_enter_hop1_messages() {
        let h = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        let ef = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let g = Graph::new("e", 2, vec![(0, 1), (1, 0)], h.clone(), Some(ef), Target::Scalar(0.0)).unwrap();
        let nb = build_neighborhoods(&g).unwrap();
        let mut store = ParamStore::new();
        let cfg = ExpertConfig {
            kind: ExpertKind::Gcn,
            hop: Hop::One,
            in_dim: 1,
            out_dim: 1,
            edge_dim: Some(1),
        };
        let e = Expert::new(cfg, &mut store, "e", &Initializer::new(0)).unwrap();
        let Expert::Gcn(inner) = &e else { unreachable!() };
        store.set(inner.weight, Matrix::scalar(1.0)).unwrap();
        store.set(inner.edge_embed.unwrap(), Matrix::scalar(2.0)).unwrap();
        let out = expert_forward(&e, &store, &h, &nb).unwrap();
        // 0.5 * 1 + 0.5 * 3 + 0.5 * (1 * 2) on both nodes
        assert_eq!(out.data(), &[3.0, 3.0]);
        let bad_cfg = ExpertConfig { hop: Hop::Two, ..cfg };
        assert!(bad_cfg.validate().is_err());
    }

    #[test]
    fn hop2_two_propagations_equal_dense_square_on_random_graphs() {
        let mut rng = Rng::new(11);
        for trial in 0..20 {
            let n = 1 + rng.below(10);
            let edges = random_edges(n, rng.below(2 * n + 1), &mut rng);
            let h = random_matrix(n, 3, &mut rng);
            let g = graph(n, &edges, h.clone());
            let nb = build_neighborhoods(&g).unwrap();
            let mut store = ParamStore::new();
            let cfg = ExpertConfig {
                kind: ExpertKind::Gcn,
                hop: Hop::Two,
                in_dim: 3,
                out_dim: 4,
                edge_dim: None,
            };
            let e = Expert::new(cfg, &mut store, "e", &Initializer::new(trial)).unwrap();
            let Expert::Gcn(inner) = &e else { unreachable!() };
            let out = expert_forward(&e, &store, &h, &nb).unwrap();
            let a = nb.hop1.to_dense();
            let dense = a
                .matmul(&a)
                .unwrap()
                .matmul(&h)
                .unwrap()
                .matmul(store.get(inner.weight))
                .unwrap();
            assert!(out.max_abs_diff(&dense) < 1e-10);
        }
    }

    #[test]
    fn permutation_equivariant_and_linear_in_weight() {
        let mut rng = Rng::new(5);
        for kind in [ExpertKind::Gcn, ExpertKind::Gin] {
            for hop in [Hop::One, Hop::Two] {
                let n = 8;
                let edges = random_edges(n, 12, &mut rng);
                let h = random_matrix(n, 3, &mut rng);
                let g = graph(n, &edges, h.clone());
                let mut perm: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut perm);
                let pedges = g.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
                let mut ph = Matrix::zeros(n, 3);
                for i in 0..n {
                    ph.row_mut(perm[i]).copy_from_slice(h.row(i));
                }
                let pg = Graph::new("p", n, pedges, ph.clone(), None, Target::Scalar(0.0)).unwrap();
                let mut store = ParamStore::new();
                let cfg = ExpertConfig {
                    kind,
                    hop,
                    in_dim: 3,
                    out_dim: 2,
                    edge_dim: None,
                };
                let e = Expert::new(cfg, &mut store, "e", &Initializer::new(9)).unwrap();
                let out = expert_forward(&e, &store, &h, &build_neighborhoods(&g).unwrap()).unwrap();
                let pout = expert_forward(&e, &store, &ph, &build_neighborhoods(&pg).unwrap()).unwrap();
                for i in 0..n {
                    for c in 0..2 {
                        assert!((out.get(i, c) - pout.get(perm[i], c)).abs() < 1e-12);
                    }
                }
                if let Expert::Gcn(inner) = &e {
                    let w = store.get(inner.weight).scale(2.0);
                    let mut doubled = store.clone();
                    doubled.set(inner.weight, w).unwrap();
                    let out2 = expert_forward(&e, &doubled, &h, &build_neighborhoods(&g).unwrap()).unwrap();
                    assert!(out2.max_abs_diff(&out.scale(2.0)) < 1e-12);
                }
            }
        }
    }
}
