//! Noisy top-k gate and the importance and load balance losses.
//!
//! Scores are `Q = H W_g + ε ⊙ softplus(H W_n)` with one standard normal
//! draw per (node, expert) in training and `ε = 0` in evaluation. Each node
//! keeps its `k` largest scores (lowest index wins ties) and softmaxes over
//! them.

use std::cmp::Ordering;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flops::FlopKind;
use crate::numerics::special::{masked_softmax_row, softplus_raw, CV_EPSILON};
use crate::numerics::{coefficient_of_variation, FlopSite, Matrix, ParamId, ParamStore, Rng, Tape, Var};

/// Largest deviation from 1 tolerated for the sum of a node's gate weights.
pub const GATE_SUM_TOLERANCE: f64 = 1e-10;

static VALIDATED_DECISIONS: AtomicU64 = AtomicU64::new(0);

/// Number of gate decisions that passed the sparsity check in this process.
pub fn validated_decisions() -> u64 {
    VALIDATED_DECISIONS.load(AtomicOrdering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Gate weights of one layer, both `s × n`.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w_g: ParamId,
    pub w_n: ParamId,
}

impl GateParams {
    /// Registers zero-initialized gate weights, so every expert starts with
    /// equal clean scores and unit-scale noise.
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, experts: usize) -> Self {
        Self {
            w_g: store.push(format!("{prefix}.w_g"), Matrix::zeros(in_dim, experts)),
            w_n: store.push(format!("{prefix}.w_n"), Matrix::zeros(in_dim, experts)),
        }
    }
}

/// Routing of a batch of nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// `H W_g`.
    pub clean: Matrix,
    /// `Q(H)`; equal to `clean` in evaluation.
    pub noisy: Matrix,
    /// Per node, the chosen experts in descending score order.
    pub selected: Vec<Vec<usize>>,
    /// Softmax over the selection, zero elsewhere.
    pub weights: Matrix,
}

impl GateDecision {
    pub fn num_nodes(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.weights.cols()
    }

    /// How many nodes selected each expert.
    pub fn selection_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_experts()];
        for sel in &self.selected {
            for &o in sel {
                counts[o] += 1;
            }
        }
        counts
    }

    /// Sorted node indices routed to `expert`.
    pub fn routed_nodes(&self, expert: usize) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, sel)| sel.contains(&expert))
            .map(|(i, _)| i)
            .collect()
    }

    /// Sorted nodes that selected at least one expert with index `>= first`
    /// (the hop-2 experts when `first` is the hop-1 count).
    pub fn hop2_rows(&self, first: usize) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, sel)| sel.iter().any(|&o| o >= first))
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks that every node has exactly `k` nonzero weights, all on its
    /// selection, summing to one.
    pub fn check_sparsity(&self, k: usize) -> Result<()> {
        for (i, (row, sel)) in self.weights.iter_rows().zip(&self.selected).enumerate() {
            let nonzero = row.iter().filter(|&&w| w != 0.0).count();
            if nonzero != k || sel.len() != k {
                return Err(Error::Invariant(format!(
                    "node {i} has {nonzero} nonzero gate weights and {} selections, expected {k}",
                    sel.len()
                )));
            }
            if sel.iter().any(|&o| row[o] <= 0.0) {
                return Err(Error::Invariant(format!("node {i} has a non-positive selected weight")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > GATE_SUM_TOLERANCE {
                return Err(Error::Invariant(format!("gate weights of node {i} sum to {sum}")));
            }
        }
        VALIDATED_DECISIONS.fetch_add(1, AtomicOrdering::Relaxed);
        Ok(())
    }
}

/// Indices of `row` by descending value, lowest index first among ties.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(invalid(format!("k = {k} must lie in 1..={n}")));
    }
    Ok(())
}

/// Clean scores, noise scale `softplus(H W_n)` and noisy scores.
pub fn noisy_scores(w_g: &Matrix, w_n: &Matrix, h: &Matrix, mode: Mode, rng: &mut Rng) -> Result<(Matrix, Matrix, Matrix)> {
    let clean = h.matmul(w_g)?;
    let std = h.matmul(w_n)?.map(softplus_raw);
    let noisy = match mode {
        Mode::Eval => clean.clone(),
        Mode::Train => {
            let data = clean.data().iter().zip(std.data()).map(|(c, s)| c + rng.normal() * s).collect();
            Matrix::new(clean.rows(), clean.cols(), data)?
        }
    };
    Ok((clean, std, noisy))
}

/// Keeps the `k` largest scores of each row of `q` and softmaxes over them.
pub fn topk_gate(q: &Matrix, k: usize) -> Result<GateDecision> {
    check_k(k, q.cols())?;
    let (selected, mask) = select_topk(q, k);
    let mut weights = Vec::with_capacity(q.len());
    for (i, row) in q.iter_rows().enumerate() {
        weights.extend(masked_softmax_row(row, &mask[i * q.cols()..(i + 1) * q.cols()]));
    }
    Ok(GateDecision {
        clean: q.clone(),
        noisy: q.clone(),
        selected,
        weights: Matrix::new(q.rows(), q.cols(), weights)?,
    })
}

fn select_topk(q: &Matrix, k: usize) -> (Vec<Vec<usize>>, Vec<bool>) {
    let mut selected = Vec::with_capacity(q.rows());
    let mut mask = vec![false; q.len()];
    for (i, row) in q.iter_rows().enumerate() {
        let top: Vec<usize> = ranking(row).into_iter().take(k).collect();
        for &o in &top {
            mask[i * q.cols() + o] = true;
        }
        selected.push(top);
    }
    (selected, mask)
}

/// `CV(importance)²` where importance is the column sum of gate weights.
pub fn importance_loss(weights: &Matrix) -> Result<f64> {
    let cv = coefficient_of_variation(weights.column_sums().data())?;
    Ok(cv * cv)
}

/// `k`-th largest entry of `row` once position `o` is removed.
pub fn kth_excluding(row: &[f64], k: usize, o: usize) -> f64 {
    let others: Vec<usize> = ranking(row).into_iter().filter(|&j| j != o).collect();
    row[others[k - 1]]
}

/// Probability that expert `o` stays selected when only its own noise is
/// redrawn: `Φ((clean_o − kth_excluding(Q_row, k, o)) / noise_std_o)`.
pub fn load_probability(clean_o: f64, q_row: &[f64], k: usize, o: usize, noise_std_o: f64) -> Result<f64> {
    if !(noise_std_o > 0.0) {
        return Err(invalid(format!("noise scale must be positive, got {noise_std_o}")));
    }
    if o >= q_row.len() {
        return Err(invalid(format!("expert {o} out of range")));
    }
    check_k(k, q_row.len())?;
    if k >= q_row.len() {
        return Ok(1.0);
    }
    let z = (clean_o - kth_excluding(q_row, k, o)) / noise_std_o;
    crate::numerics::normal_cdf(z)
}

/// `CV(load)²` where load sums [`load_probability`] over nodes.
pub fn load_loss(clean: &Matrix, noisy: &Matrix, noise_std: &Matrix, k: usize) -> Result<f64> {
    let n = clean.cols();
    check_k(k, n)?;
    if k >= n {
        return Ok(0.0);
    }
    let mut load = vec![0.0; n];
    for i in 0..clean.rows() {
        for (o, l) in load.iter_mut().enumerate() {
            *l += load_probability(clean.get(i, o), noisy.row(i), k, o, noise_std.get(i, o))?;
        }
    }
    let cv = coefficient_of_variation(&load)?;
    Ok(cv * cv)
}

/// Recorded gate of one layer.
pub struct GateForward {
    pub decision: GateDecision,
    /// `N × n` gate weights.
    pub weights: Var,
    /// `1 × n` column sums of the gate weights.
    pub importance: Var,
    /// `1 × n` summed selection probabilities.
    pub load: Var,
    pub importance_loss: Var,
    pub load_loss: Var,
}

/// `CV(v)²` of a `1 × n` row on the tape.
pub fn cv_squared(tape: &mut Tape, v: Var) -> Var {
    let mean = tape.mean_all(v);
    let centered = tape.sub(v, mean);
    let sq = tape.square(centered);
    let var = tape.mean_all(sq);
    let denom = tape.add_scalar(mean, CV_EPSILON);
    let denom = tape.square(denom);
    tape.div(var, denom)
}

/// Gate of one layer over the rows of `input`. Clean (and, in training,
/// noise) score products are charged to `layer`'s gate flops.
pub fn gate_forward(
    tape: &mut Tape,
    params: &[Var],
    gate: &GateParams,
    input: Var,
    k: usize,
    mode: Mode,
    rng: &mut Rng,
    layer: Option<usize>,
) -> Result<GateForward> {
    let w_g = params[gate.w_g.0];
    let w_n = params[gate.w_n.0];
    let n = tape.shape(w_g).1;
    check_k(k, n)?;
    let saved = tape.flop_site();
    let gate_site = layer.map(|layer| FlopSite {
        layer,
        kind: FlopKind::Gate,
    });
    tape.set_flop_site(gate_site);
    let clean = tape.matmul(input, w_g);
    if mode == Mode::Eval {
        // Only the load loss reads the noise scale in evaluation.
        tape.set_flop_site(None);
    }
    let raw = tape.matmul(input, w_n);
    tape.set_flop_site(saved);
    let std = tape.softplus(raw);
    let noisy = match mode {
        Mode::Eval => clean,
        Mode::Train => {
            let (r, c) = tape.shape(clean);
            let eps = Matrix::new(r, c, (0..r * c).map(|_| rng.normal()).collect())?;
            let eps = tape.constant(eps);
            let scaled = tape.mul(std, eps);
            tape.add(clean, scaled)
        }
    };
    let q = tape.value(noisy).clone();
    if !q.is_finite() {
        return Err(Error::NonFinite("gate scores".into()));
    }
    let (selected, mask) = select_topk(&q, k);
    let weights = tape.masked_softmax(noisy, Rc::from(mask));

    let importance = tape.column_sums(weights);
    let importance_loss = cv_squared(tape, importance);

    let (load, load_loss) = if k >= n {
        let rows = tape.shape(input).0 as f64;
        (tape.constant(Matrix::filled(1, n, rows)), tape.constant(Matrix::scalar(0.0)))
    } else {
        let mut thresholds = Vec::with_capacity(q.len());
        for row in q.iter_rows() {
            let order = ranking(row);
            for o in 0..n {
                let pos = order.iter().position(|&j| j == o).expect("expert in ranking");
                // k-th largest among the others: skip `o` if it sits in the top k.
                thresholds.push(if pos < k { order[k] } else { order[k - 1] });
            }
        }
        let threshold = tape.take_per_row(noisy, Rc::from(thresholds));
        let margin = tape.sub(clean, threshold);
        let z = tape.div(margin, std);
        let prob = tape.normal_cdf(z);
        let load = tape.column_sums(prob);
        (load, cv_squared(tape, load))
    };

    let decision = GateDecision {
        clean: tape.value(clean).clone(),
        noisy: q,
        selected,
        weights: tape.value(weights).clone(),
    };
    decision.check_sparsity(k)?;
    Ok(GateForward {
        decision,
        weights,
        importance,
        load,
        importance_loss,
        load_loss,
    })
}
