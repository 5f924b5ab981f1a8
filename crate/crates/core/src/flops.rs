//! Analytic FLOPs accounting.
//!
//! One multiply-accumulate counts as 2 flops; activations, softmax, top-k
//! selection and elementwise mixing count as 0. The model matches the
//! execution order of [`crate::layer`]: neighbor aggregation of the layer
//! input is computed once per layer and shared by all experts that need
//! it, the hop-2 aggregate only over nodes routed to a hop-2 expert, and
//! each expert transforms only the rows routed to it. The same
//! conventions drive the instrumented counters on [`crate::numerics::Tape`],
//! so analytic and measured counts agree exactly.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::experts::{ExpertConfig, ExpertKind, Hop};
use crate::gating::{GateDecision, Mode};
use crate::graph::Neighborhoods;
use crate::layer::{Execution, GmoeLayer, GmoeLayerConfig, PlainLayer};
use crate::numerics::{Initializer, Matrix, ParamStore, Rng, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlopKind {
    Transform,
    Propagation,
    Gate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub transform: u64,
    pub propagation: u64,
    pub gate: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.transform + self.propagation + self.gate
    }

    /// Expert cost without the router.
    pub fn experts(&self) -> u64 {
        self.transform + self.propagation
    }
}

impl std::ops::Add for LayerFlops {
    type Output = LayerFlops;

    fn add(self, rhs: LayerFlops) -> LayerFlops {
        LayerFlops {
            transform: self.transform + rhs.transform,
            propagation: self.propagation + rhs.propagation,
            gate: self.gate + rhs.gate,
        }
    }
}

/// Sizes of the propagation operators of a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub num_nodes: usize,
    /// Directed edges including one self-loop per node (nonzeros of the
    /// hop-1 operator).
    pub edges: usize,
    /// Nonzeros of the hop-2 operator, including the diagonal.
    pub hop2_entries: usize,
}

impl GraphStats {
    pub fn from_neighborhoods(nbrs: &Neighborhoods) -> Self {
        Self {
            num_nodes: nbrs.num_nodes(),
            edges: nbrs.hop1.nnz(),
            hop2_entries: nbrs.hop2.nnz(),
        }
    }
}

/// Routing assumed by the analytic count.
#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    /// `N·k` routed rows spread over all experts, every expert in use and
    /// every node reaching a hop-2 expert whenever one exists.
    Expected,
    /// Actual routing: rows per expert and the nonzeros of the hop-2
    /// operator restricted to the nodes routed to any hop-2 expert.
    Observed { counts: Vec<usize>, hop2_nnz: usize },
}

impl Routing {
    /// Observed routing of `decision` on a layer configured as `cfg`.
    pub fn observed(cfg: &GmoeLayerConfig, decision: &GateDecision, nbrs: &Neighborhoods) -> Self {
        let op = match cfg.kind {
            ExpertKind::Gcn => &nbrs.hop1,
            ExpertKind::Gin => &nbrs.sum2,
        };
        Routing::Observed {
            counts: decision.selection_counts(),
            hop2_nnz: decision.hop2_rows(cfg.m).into_iter().map(|r| op.row_nnz(r)).sum(),
        }
    }
}

fn per_row_transform(cfg: &ExpertConfig) -> u64 {
    let (i, o) = (cfg.in_dim as u64, cfg.out_dim as u64);
    let mut cost = 2 * i * o;
    if cfg.kind == ExpertKind::Gin {
        cost += 2 * o * o;
    }
    if let Some(d) = cfg.edge_dim {
        cost += 2 * d as u64 * i;
    }
    cost
}

/// `hop2_nnz` is the nonzero count of the hop-2 operator rows that are
/// aggregated, zero when no hop-2 expert runs.
fn propagation_cost(kind: ExpertKind, hop1: bool, hop2: bool, hop2_nnz: usize, in_dim: usize, stats: &GraphStats) -> u64 {
    let s = in_dim as u64;
    let (n, e) = (stats.num_nodes as u64, stats.edges as u64);
    let second = 2 * hop2_nnz as u64 * s;
    match kind {
        // Hop 2 reuses the full one-hop aggregate.
        ExpertKind::Gcn => {
            if hop1 || hop2 {
                2 * e * s + second
            } else {
                0
            }
        }
        // Unit-coefficient sums exclude the diagonal.
        ExpertKind::Gin => {
            let first = if hop1 { 2 * (e - n) * s } else { 0 };
            first + second
        }
    }
}

fn full_hop2_nnz(kind: ExpertKind, stats: &GraphStats) -> usize {
    match kind {
        ExpertKind::Gcn => stats.edges,
        ExpertKind::Gin => stats.hop2_entries - stats.num_nodes,
    }
}

/// Gate cost: clean scores always, noise scores only in training.
pub fn gate_flops(num_nodes: usize, in_dim: usize, experts: usize, mode: Mode) -> u64 {
    let products = match mode {
        Mode::Train => 2,
        Mode::Eval => 1,
    };
    products * 2 * (num_nodes * in_dim * experts) as u64
}

/// Flops of one GMoE layer.
pub fn count_layer_flops(cfg: &GmoeLayerConfig, stats: &GraphStats, routing: &Routing, mode: Mode) -> Result<LayerFlops> {
    cfg.validate()?;
    let per_row = per_row_transform(&cfg.expert_config(0));
    let edge_extra = cfg.edge_dim.map_or(0, |d| 2 * d as u64 * cfg.in_dim as u64);
    let (transform, used, hop2_nnz) = match routing {
        Routing::Expected => {
            let rows = (stats.num_nodes * cfg.k) as u64;
            // Edge embeddings only apply to hop-1 experts; the expected
            // share of rows they receive is m/n.
            let transform = if cfg.edge_dim.is_some() {
                let hop1_rows = rows * cfg.m as u64;
                if hop1_rows % cfg.n as u64 != 0 {
                    return Err(invalid("expected routing with edge features needs N·k·m divisible by n"));
                }
                rows * (per_row - edge_extra) + hop1_rows / cfg.n as u64 * edge_extra
            } else {
                rows * per_row
            };
            let hop2_nnz = if cfg.m < cfg.n { full_hop2_nnz(cfg.kind, stats) } else { 0 };
            (transform, [cfg.m > 0, cfg.m < cfg.n], hop2_nnz)
        }
        Routing::Observed { counts, hop2_nnz } => {
            if counts.len() != cfg.n {
                return Err(invalid(format!("{} routing counts for {} experts", counts.len(), cfg.n)));
            }
            let mut transform = 0;
            let mut used = [false; 2];
            for (o, &c) in counts.iter().enumerate() {
                transform += c as u64 * per_row_transform(&cfg.expert_config(o));
                if c > 0 {
                    used[if cfg.hop_of(o) == Hop::One { 0 } else { 1 }] = true;
                }
            }
            (transform, used, if used[1] { *hop2_nnz } else { 0 })
        }
    };
    Ok(LayerFlops {
        transform,
        propagation: propagation_cost(cfg.kind, used[0], used[1], hop2_nnz, cfg.in_dim, stats),
        gate: gate_flops(stats.num_nodes, cfg.in_dim, cfg.n, mode),
    })
}

/// Flops of a plain hop-1 layer applied to every node.
pub fn count_baseline_flops(cfg: &ExpertConfig, stats: &GraphStats) -> LayerFlops {
    LayerFlops {
        transform: stats.num_nodes as u64 * per_row_transform(cfg),
        propagation: {
            let hop2 = cfg.hop == Hop::Two;
            let nnz = if hop2 { full_hop2_nnz(cfg.kind, stats) } else { 0 };
            propagation_cost(cfg.kind, !hop2, hop2, nnz, cfg.in_dim, stats)
        },
        gate: 0,
    }
}

/// Hidden width `round(s0 / √k)`, at least 1.
pub fn equal_flops_hidden(s0: usize, k: usize) -> usize {
    assert!(s0 >= 1 && k >= 1, "equal_flops_hidden needs s0, k >= 1");
    ((s0 as f64 / (k as f64).sqrt()).round() as usize).max(1)
}

/// JSON-serializable flop summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub total: u64,
    /// Expert flops (transform + propagation) over the reference total.
    pub parity_ratio: f64,
    /// Same ratio with gate flops included in the numerator.
    pub parity_ratio_with_gate: f64,
    pub baseline_layers: Vec<LayerFlops>,
    pub baseline_total: u64,
    /// Whether analytic counts equal counts instrumented on a real forward
    /// pass, when such a pass was run.
    pub instrumented_match: Option<bool>,
}

impl FlopsReport {
    pub fn new(layers: Vec<LayerFlops>, baseline_layers: Vec<LayerFlops>, instrumented_match: Option<bool>) -> Self {
        let total = layers.iter().map(LayerFlops::total).sum();
        let experts: u64 = layers.iter().map(LayerFlops::experts).sum();
        let baseline_total = baseline_layers.iter().map(LayerFlops::total).sum();
        let ratio = |num: u64| {
            if baseline_total == 0 {
                f64::NAN
            } else {
                num as f64 / baseline_total as f64
            }
        };
        Self {
            parity_ratio: ratio(experts),
            parity_ratio_with_gate: ratio(total),
            layers,
            total,
            baseline_layers,
            baseline_total,
            instrumented_match,
        }
    }
}

/// One equal-FLOPs comparison between a GMoE layer and its baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityCheck {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub s0: usize,
    pub hidden: usize,
    pub analytic: LayerFlops,
    pub instrumented: LayerFlops,
    pub baseline_analytic: LayerFlops,
    pub baseline_instrumented: LayerFlops,
    pub report: FlopsReport,
}

impl ParityCheck {
    pub fn counts_match(&self) -> bool {
        self.analytic == self.instrumented && self.baseline_analytic == self.baseline_instrumented
    }
}

/// Compares one GMoE layer of width `equal_flops_hidden(s0, k)` against a
/// plain layer of width `s0` on `nbrs`. Both layers run in evaluation mode
/// on random inputs; analytic counts use the routing actually observed.
pub fn verify_parity(kind: ExpertKind, n: usize, m: usize, k: usize, s0: usize, nbrs: &Neighborhoods, seed: u64) -> Result<ParityCheck> {
    let hidden = equal_flops_hidden(s0, k);
    let stats = GraphStats::from_neighborhoods(nbrs);
    let cfg = GmoeLayerConfig {
        n,
        m,
        k,
        in_dim: hidden,
        out_dim: hidden,
        kind,
        edge_dim: None,
    };
    cfg.validate()?;
    let init = Initializer::new(seed);
    let mut rng = Rng::derive(seed, "parity");
    let random = |rows: usize, cols: usize, rng: &mut Rng| {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
    };

    let mut store = ParamStore::new();
    let layer = GmoeLayer::new(cfg, 0, &mut store, &init)?;
    // Zero-initialized gates route every node to expert 0; random gates
    // exercise a realistic spread.
    store.set(layer.gate.w_g, random(hidden, n, &mut rng)?)?;
    store.set(layer.gate.w_n, random(hidden, n, &mut rng)?)?;
    let h = random(stats.num_nodes, hidden, &mut rng)?;
    let mut tape = Tape::new();
    let params = tape.load_params(&store);
    let x = tape.constant(h);
    let fwd = layer.forward(&mut tape, &params, x, nbrs, Mode::Eval, Execution::Sparse, &mut rng, true)?;
    let instrumented = tape.layer_flops().first().copied().unwrap_or_default();
    let routing = Routing::observed(&cfg, &fwd.gate.decision, nbrs);
    let analytic = count_layer_flops(&cfg, &stats, &routing, Mode::Eval)?;

    let base_cfg = ExpertConfig {
        kind,
        hop: Hop::One,
        in_dim: s0,
        out_dim: s0,
        edge_dim: None,
    };
    let mut base_store = ParamStore::new();
    let base = PlainLayer::new(base_cfg, 0, &mut base_store, &init)?;
    let mut tape = Tape::new();
    let params = tape.load_params(&base_store);
    let x = tape.constant(random(stats.num_nodes, s0, &mut rng)?);
    base.forward(&mut tape, &params, x, nbrs, true)?;
    let baseline_instrumented = tape.layer_flops().first().copied().unwrap_or_default();
    let baseline_analytic = count_baseline_flops(&base_cfg, &stats);

    let matched = analytic == instrumented && baseline_analytic == baseline_instrumented;
    Ok(ParityCheck {
        n,
        m,
        k,
        s0,
        hidden,
        analytic,
        instrumented,
        baseline_analytic,
        baseline_instrumented,
        report: FlopsReport::new(vec![analytic], vec![baseline_analytic], Some(matched)),
    })
}
