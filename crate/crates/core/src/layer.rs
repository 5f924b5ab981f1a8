//! The GMoE layer and the plain single-expert layer it generalizes.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::experts::{Expert, ExpertConfig, ExpertKind, Hop, Propagator};
use crate::gating::{gate_forward, GateDecision, GateForward, GateParams, Mode};
use crate::graph::Neighborhoods;
use crate::numerics::{Initializer, Matrix, ParamStore, Rng, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmoeLayerConfig {
    /// Total experts.
    pub n: usize,
    /// Hop-1 experts; experts `m..n` aggregate over two hops.
    pub m: usize,
    /// Experts selected per node.
    pub k: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kind: ExpertKind,
    pub edge_dim: Option<usize>,
}

impl GmoeLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("a GMoE layer needs at least one expert"));
        }
        if self.m > self.n {
            return Err(invalid(format!("m = {} exceeds n = {}", self.m, self.n)));
        }
        if self.k == 0 || self.k > self.n {
            return Err(invalid(format!("k = {} must lie in 1..={}", self.k, self.n)));
        }
        if self.edge_dim.is_some() && self.kind == ExpertKind::Gin {
            return Err(invalid("GIN experts do not use edge features"));
        }
        for o in 0..self.n {
            self.expert_config(o).validate()?;
        }
        Ok(())
    }

    pub fn hop_of(&self, expert: usize) -> Hop {
        if expert < self.m {
            Hop::One
        } else {
            Hop::Two
        }
    }

    pub fn expert_config(&self, expert: usize) -> ExpertConfig {
        let hop = self.hop_of(expert);
        ExpertConfig {
            kind: self.kind,
            hop,
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            edge_dim: if hop == Hop::One { self.edge_dim } else { None },
        }
    }
}

/// How the expert mixture is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    /// Each expert runs only on the nodes routed to it.
    Sparse,
    /// Every expert runs on every node and is weighted by the (mostly
    /// zero) gate column. Reference path for tests.
    Dense,
}

#[derive(Clone, Debug)]
pub struct GmoeLayer {
    pub config: GmoeLayerConfig,
    pub index: usize,
    pub experts: Vec<Expert>,
    pub gate: GateParams,
}

/// Recorded forward pass of one GMoE layer.
pub struct LayerForward {
    /// Mixture of expert outputs before the nonlinearity.
    pub output: Var,
    pub gate: GateForward,
}

fn check_input(tape: &Tape, input: Var, nbrs: &Neighborhoods, in_dim: usize, edge_dim: Option<usize>) -> Result<()> {
    let (rows, cols) = tape.shape(input);
    if cols != in_dim {
        return Err(invalid(format!("layer input has {cols} columns, expected {in_dim}")));
    }
    if rows != nbrs.num_nodes() {
        return Err(invalid(format!("layer input has {rows} rows for {} nodes", nbrs.num_nodes())));
    }
    if let Some(d) = edge_dim {
        match &nbrs.edge_agg {
            Some(agg) if agg.cols() == d => {}
            _ => return Err(invalid(format!("layer expects edge features of dim {d}"))),
        }
    }
    Ok(())
}

impl GmoeLayer {
    pub fn new(config: GmoeLayerConfig, index: usize, store: &mut ParamStore, init: &Initializer) -> Result<Self> {
        config.validate()?;
        let experts = (0..config.n)
            .map(|o| Expert::new(config.expert_config(o), store, &format!("layer{index}.expert{o}"), init))
            .collect::<Result<Vec<_>>>()?;
        let gate = GateParams::new(store, &format!("layer{index}.gate"), config.in_dim, config.n);
        Ok(Self {
            config,
            index,
            experts,
            gate,
        })
    }

    /// Records the layer on `tape`. Flops are charged to this layer's
    /// index when `count_flops` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        nbrs: &Neighborhoods,
        mode: Mode,
        execution: Execution,
        noise: &mut Rng,
        count_flops: bool,
    ) -> Result<LayerForward> {
        check_input(tape, input, nbrs, self.config.in_dim, self.config.edge_dim)?;
        let layer = count_flops.then_some(self.index);
        let gate = gate_forward(tape, params, &self.gate, input, self.config.k, mode, noise, layer)?;
        let num_nodes = nbrs.num_nodes();
        let mut prop = Propagator::new(nbrs, input, layer);
        if execution == Execution::Sparse {
            let hop2 = gate.decision.hop2_rows(self.config.m);
            if !hop2.is_empty() && hop2.len() < num_nodes {
                prop.restrict_hop2(hop2.into());
            }
        }
        let mut mixture: Option<Var> = None;
        for (o, expert) in self.experts.iter().enumerate() {
            let rows = match execution {
                Execution::Dense => None,
                Execution::Sparse => {
                    let routed = gate.decision.routed_nodes(o);
                    if routed.is_empty() {
                        continue;
                    }
                    (routed.len() < num_nodes).then(|| Rc::<[usize]>::from(routed))
                }
            };
            let y = expert.forward(tape, params, &mut prop, rows.as_ref());
            let contribution = match &rows {
                None => {
                    let w = tape.take_per_row(gate.weights, Rc::from(vec![o; num_nodes]));
                    tape.mul(y, w)
                }
                Some(rows) => {
                    let w = tape.gather_rows(gate.weights, rows.clone());
                    let w = tape.take_per_row(w, Rc::from(vec![o; rows.len()]));
                    let weighted = tape.mul(y, w);
                    tape.scatter_rows(weighted, rows.clone(), num_nodes)
                }
            };
            mixture = Some(match mixture {
                None => contribution,
                Some(acc) => tape.add(acc, contribution),
            });
        }
        let output = mixture.expect("every node selects at least one expert");
        Ok(LayerForward { output, gate })
    }
}

/// `σ(Σ_o G(h)_o E_o(h))` on plain matrices, evaluated with the sparse path.
pub fn gmoe_forward(
    layer: &GmoeLayer,
    store: &ParamStore,
    h: &Matrix,
    nbrs: &Neighborhoods,
    mode: Mode,
    noise: &mut Rng,
) -> Result<(Matrix, GateDecision)> {
    let mut tape = Tape::new();
    let params = tape.load_params(store);
    let input = tape.constant(h.clone());
    let fwd = layer.forward(&mut tape, &params, input, nbrs, mode, Execution::Sparse, noise, false)?;
    let out = tape.relu(fwd.output);
    Ok((tape.value(out).clone(), fwd.gate.decision))
}

/// A single hop-1 expert applied to every node, the backbone layer that a
/// GMoE layer replaces.
#[derive(Clone, Debug)]
pub struct PlainLayer {
    pub config: ExpertConfig,
    pub index: usize,
    pub expert: Expert,
}

impl PlainLayer {
    /// Parameters are named like expert 0 of a GMoE layer, so equal seeds
    /// give equal weights.
    pub fn new(config: ExpertConfig, index: usize, store: &mut ParamStore, init: &Initializer) -> Result<Self> {
        let expert = Expert::new(config, store, &format!("layer{index}.expert0"), init)?;
        Ok(Self { config, index, expert })
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var, nbrs: &Neighborhoods, count_flops: bool) -> Result<Var> {
        check_input(tape, input, nbrs, self.config.in_dim, self.config.edge_dim)?;
        let mut prop = Propagator::new(nbrs, input, count_flops.then_some(self.index));
        Ok(self.expert.forward(tape, params, &mut prop, None))
    }
}
