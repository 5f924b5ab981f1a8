//! Task losses, the balanced total objective, Adam, metrics, the training
//! loop and masked-feature pretraining.

use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::gating::GateForward;
use crate::graph::{batch_with_neighborhoods, build_neighborhoods, Graph, GraphBatch, Neighborhoods, Target};
use crate::model::{node_labels, ForwardOptions, Model, Streams, TaskType};
use crate::numerics::{coefficient_of_variation, finite_difference_check, GradCheck, Initializer, Matrix, ParamId, ParamStore, Rng, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RocAuc,
    Rmse,
    Accuracy,
}

impl Metric {
    pub fn default_for(task: TaskType) -> Self {
        match task {
            TaskType::Binary { .. } => Metric::RocAuc,
            TaskType::Regression => Metric::Rmse,
            TaskType::MultiClass { .. } | TaskType::NodeClassification { .. } => Metric::Accuracy,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Rmse
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::RocAuc => "roc_auc",
            Metric::Rmse => "rmse",
            Metric::Accuracy => "accuracy",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "roc_auc" => Ok(Metric::RocAuc),
            "rmse" => Ok(Metric::Rmse),
            "accuracy" => Ok(Metric::Accuracy),
            other => Err(invalid(format!("unknown metric {other:?}"))),
        }
    }
}

/// Area under the ROC curve as the rank statistic, ties counting half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid("roc_auc: scores and labels differ in length"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(invalid("roc_auc is undefined when only one class is present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Tied block i..=j shares the average of ranks i+1..=j+1.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(invalid("rmse needs equally long, non-empty inputs"));
    }
    let mse = predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / predictions.len() as f64;
    Ok(mse.sqrt())
}

/// Fraction of rows whose argmax (first on ties) equals the label.
pub fn accuracy(scores: &Matrix, labels: &[Option<usize>]) -> Result<f64> {
    if scores.rows() != labels.len() {
        return Err(invalid("accuracy: one label per row required"));
    }
    let mut hits = 0;
    let mut total = 0;
    for (row, label) in scores.iter_rows().zip(labels) {
        if let Some(y) = label {
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hits += usize::from(best == *y);
            total += 1;
        }
    }
    if total == 0 {
        return Err(invalid("accuracy needs at least one labeled row"));
    }
    Ok(hits as f64 / total as f64)
}

fn graph_class_labels(batch: &GraphBatch) -> Rc<[Option<usize>]> {
    batch
        .targets
        .iter()
        .map(|t| match t {
            Target::Scalar(v) => Some(*v as usize),
            Target::Vector(_) => None,
        })
        .collect()
}

fn scalar_targets(batch: &GraphBatch) -> Result<Vec<f64>> {
    batch
        .targets
        .iter()
        .map(|t| match t {
            Target::Scalar(v) => Ok(*v),
            Target::Vector(_) => Err(invalid("regression needs scalar targets")),
        })
        .collect()
}

fn binary_targets(batch: &GraphBatch, labels: usize) -> Result<(Matrix, Vec<bool>)> {
    let mut values = Vec::with_capacity(batch.num_graphs() * labels);
    let mut mask = Vec::with_capacity(values.capacity());
    for (g, t) in batch.targets.iter().enumerate() {
        let v = t.values();
        if v.len() != labels {
            return Err(invalid(format!("graph {} has {} labels, expected {labels}", batch.graph_ids[g], v.len())));
        }
        for x in v {
            match x {
                Some(x) if x.is_finite() => {
                    values.push(x);
                    mask.push(true);
                }
                Some(_) => return Err(invalid(format!("non-finite label in graph {}", batch.graph_ids[g]))),
                None => {
                    values.push(0.0);
                    mask.push(false);
                }
            }
        }
    }
    Ok((Matrix::new(batch.num_graphs(), labels, values)?, mask))
}

/// Task loss of `predictions` against the batch targets: mean sigmoid
/// cross-entropy over present labels, softmax cross-entropy, or MSE.
pub fn task_loss(tape: &mut Tape, predictions: Var, batch: &GraphBatch, task: TaskType) -> Result<Var> {
    let (rows, cols) = tape.shape(predictions);
    let expected_rows = if task.is_node_level() { batch.num_nodes() } else { batch.num_graphs() };
    if rows != expected_rows || cols != task.output_dim() {
        return Err(invalid(format!("predictions have shape {:?} for task {task:?}", (rows, cols))));
    }
    Ok(match task {
        TaskType::Binary { labels } => {
            let (targets, mask) = binary_targets(batch, labels)?;
            tape.bce_with_logits(predictions, Rc::new(targets), mask.into())
        }
        TaskType::MultiClass { classes } => {
            let labels = graph_class_labels(batch);
            if labels.iter().any(|l| l.is_none_or(|y| y >= classes)) {
                return Err(invalid("class label missing or out of range"));
            }
            tape.softmax_cross_entropy(predictions, labels)
        }
        TaskType::Regression => {
            let y = Matrix::new(rows, 1, scalar_targets(batch)?)?;
            let y = tape.constant(y);
            let diff = tape.sub(predictions, y);
            let sq = tape.square(diff);
            tape.mean_all(sq)
        }
        TaskType::NodeClassification { classes } => {
            let labels = node_labels(batch)?;
            if labels.iter().flatten().any(|&y| y >= classes) {
                return Err(invalid("node label out of range"));
            }
            tape.softmax_cross_entropy(predictions, labels)
        }
    })
}

/// Metric of `predictions` (from [`Model::predict`]) on `batch`.
pub fn metric_value(task: TaskType, metric: Metric, predictions: &Matrix, batch: &GraphBatch) -> Result<f64> {
    match (metric, task) {
        (Metric::RocAuc, TaskType::Binary { labels }) => {
            let (targets, mask) = binary_targets(batch, labels)?;
            let mut aucs = Vec::new();
            for c in 0..labels {
                let mut scores = Vec::new();
                let mut ys = Vec::new();
                for g in 0..batch.num_graphs() {
                    if mask[g * labels + c] {
                        scores.push(predictions.get(g, c));
                        ys.push(targets.get(g, c) == 1.0);
                    }
                }
                if ys.iter().any(|&y| y) && ys.iter().any(|&y| !y) {
                    aucs.push(roc_auc(&scores, &ys)?);
                }
            }
            if aucs.is_empty() {
                return Err(invalid("roc_auc is undefined when only one class is present"));
            }
            Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
        (Metric::Rmse, TaskType::Regression) => rmse(predictions.data(), &scalar_targets(batch)?),
        (Metric::Accuracy, TaskType::MultiClass { .. }) => accuracy(predictions, &graph_class_labels(batch)),
        (Metric::Accuracy, TaskType::NodeClassification { .. }) => accuracy(predictions, &node_labels(batch)?),
        (Metric::Accuracy, TaskType::Binary { labels: 1 }) => {
            let (targets, mask) = binary_targets(batch, 1)?;
            let hits = (0..batch.num_graphs())
                .filter(|&g| mask[g] && (predictions.get(g, 0) > 0.0) == (targets.get(g, 0) == 1.0))
                .count();
            let total = mask.iter().filter(|&&m| m).count();
            if total == 0 {
                return Err(invalid("accuracy needs at least one labeled graph"));
            }
            Ok(hits as f64 / total as f64)
        }
        _ => Err(invalid(format!("metric {} does not apply to task {task:?}", metric.as_str()))),
    }
}

pub fn evaluate(model: &Model, graphs: &[&Graph], metric: Metric) -> Result<f64> {
    let batch = crate::graph::batch_graphs(graphs)?;
    metric_value(model.config.task, metric, &model.predict(&batch)?, &batch)
}

/// Values of the objective `task + λ · Σ_layers (importance + load)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task: f64,
    pub importance: f64,
    pub load: f64,
    pub total: f64,
}

impl LossReport {
    pub fn compose(task: f64, importance: f64, load: f64, lambda: f64) -> Self {
        Self {
            task,
            importance,
            load,
            total: task + lambda * (importance + load),
        }
    }
}

/// Recorded objective terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub task: Var,
    pub importance: Var,
    pub load: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            task: tape.scalar(self.task),
            importance: tape.scalar(self.importance),
            load: tape.scalar(self.load),
            total: tape.scalar(self.total),
        }
    }
}

/// Adds the layer-summed balance losses, scaled by `lambda`, to `task`.
pub fn total_loss(tape: &mut Tape, task: Var, gates: &[GateForward], lambda: f64) -> LossVars {
    let sum = |tape: &mut Tape, terms: Vec<Var>| {
        terms
            .into_iter()
            .reduce(|a, b| tape.add(a, b))
            .unwrap_or_else(|| tape.constant(Matrix::scalar(0.0)))
    };
    let importance = sum(tape, gates.iter().map(|g| g.importance_loss).collect());
    let load = sum(tape, gates.iter().map(|g| g.load_loss).collect());
    let balance = tape.add(importance, load);
    let scaled = tape.scale(balance, lambda);
    let total = tape.add(task, scaled);
    LossVars {
        task,
        importance,
        load,
        total,
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params.values().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Matrix]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(invalid("optimizer state does not match the parameters"));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let pd = p.data_mut();
            for (((w, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        if params.values().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters after an optimizer step".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Scale of the balance losses.
    pub lambda: f64,
    pub seed: u64,
    pub metric: Option<Metric>,
    pub mask_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 50,
            batch_size: 32,
            lambda: 0.1,
            seed: 0,
            metric: None,
            mask_ratio: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(invalid(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(self.lr > 0.0) {
            return Err(invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(invalid(format!("mask ratio {} must lie in (0, 1)", self.mask_ratio)));
        }
        Ok(())
    }
}

/// Single optimization steps on explicit batches.
pub struct Trainer {
    pub lambda: f64,
    pub adam: Adam,
    pub streams: Streams,
}

impl Trainer {
    pub fn new(model: &Model, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            lambda: config.lambda,
            adam: Adam::new(&model.params, config.lr),
            streams: Streams::new(config.seed),
        })
    }

    /// One training-mode forward, backward and Adam update.
    pub fn step(&mut self, model: &mut Model, batch: &GraphBatch) -> Result<LossReport> {
        let mut tape = Tape::new();
        let vars = tape.load_params(&model.params);
        let fwd = model.forward(&mut tape, &vars, batch, ForwardOptions::train(), &mut self.streams)?;
        let task = task_loss(&mut tape, fwd.predictions, batch, model.config.task)?;
        let loss = total_loss(&mut tape, task, &fwd.gates, self.lambda);
        let report = loss.report(&tape);
        if !report.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = tape.backward(loss.total)?.for_params(&tape, &vars);
        self.adam.update(&mut model.params, &grads)?;
        Ok(report)
    }
}

/// Evaluation-mode objective on `batch`.
pub fn eval_losses(model: &Model, batch: &GraphBatch, lambda: f64) -> Result<LossReport> {
    let mut tape = Tape::new();
    let vars = tape.load_params(&model.params);
    let fwd = model.forward(&mut tape, &vars, batch, ForwardOptions::eval(), &mut Streams::new(0))?;
    let task = task_loss(&mut tape, fwd.predictions, batch, model.config.task)?;
    Ok(total_loss(&mut tape, task, &fwd.gates, lambda).report(&tape))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossReport,
    pub valid_metric: f64,
    pub test_metric: f64,
}

pub const HISTORY_HEADER: &str = "epoch,task_loss,importance_loss,load_loss,total_loss,valid_metric,test_metric";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let l = r.losses;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, l.task, l.importance, l.load, l.total, r.valid_metric, r.test_metric
        )
        .unwrap();
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub metric: Metric,
    pub best_epoch: usize,
    pub best_valid: f64,
    /// Test metric at the best validation epoch.
    pub best_test: f64,
    /// Parameters at the best validation epoch.
    pub best_params: ParamStore,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

/// Graphs of one split with their neighborhoods, batched lazily.
struct SplitData<'a> {
    graphs: Vec<&'a Graph>,
    nbrs: Vec<Neighborhoods>,
}

impl<'a> SplitData<'a> {
    fn new(dataset: &'a Dataset, split: Split) -> Result<Self> {
        let graphs = dataset.graphs_in(split);
        if graphs.is_empty() {
            return Err(invalid(format!("the {split:?} split is empty")));
        }
        let nbrs = graphs.iter().map(|g| build_neighborhoods(g)).collect::<Result<_>>()?;
        Ok(Self { graphs, nbrs })
    }

    fn batch(&self, members: &[usize]) -> Result<GraphBatch> {
        let graphs: Vec<&Graph> = members.iter().map(|&i| self.graphs[i]).collect();
        let nbrs: Vec<&Neighborhoods> = members.iter().map(|&i| &self.nbrs[i]).collect();
        batch_with_neighborhoods(&graphs, &nbrs)
    }

    fn full(&self) -> Result<GraphBatch> {
        self.batch(&(0..self.graphs.len()).collect::<Vec<_>>())
    }
}

/// Trains `model` in place. Epoch 0 records an evaluation pass of the
/// initial parameters; later epochs report mean training-mode losses over
/// their minibatches and evaluation metrics after the epoch.
pub fn train(model: &mut Model, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, config)?;
    let metric = config.metric.unwrap_or_else(|| Metric::default_for(model.config.task));
    let train_data = SplitData::new(dataset, Split::Train)?;
    let valid = SplitData::new(dataset, Split::Valid)?.full()?;
    let test = SplitData::new(dataset, Split::Test)?.full()?;
    let train_full = train_data.full()?;
    let task = model.config.task;
    let measure = |model: &Model| -> Result<(f64, f64)> {
        let v = metric_value(task, metric, &model.predict(&valid)?, &valid)?;
        let t = metric_value(task, metric, &model.predict(&test)?, &test)?;
        Ok((v, t))
    };

    let (v0, t0) = measure(model)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        losses: eval_losses(model, &train_full, config.lambda)?,
        valid_metric: v0,
        test_metric: t0,
    }];
    let mut best = (0, v0, t0, model.params.clone());
    let mut shuffle = Rng::derive(config.seed, "shuffle");
    let mut order: Vec<usize> = (0..train_data.graphs.len()).collect();
    for epoch in 1..=config.epochs {
        shuffle.shuffle(&mut order);
        let mut sums = LossReport::default();
        for chunk in order.chunks(config.batch_size) {
            let batch = train_data.batch(chunk)?;
            let r = trainer.step(model, &batch)?;
            let w = chunk.len() as f64;
            sums.task += w * r.task;
            sums.importance += w * r.importance;
            sums.load += w * r.load;
        }
        let count = order.len() as f64;
        let losses = LossReport::compose(sums.task / count, sums.importance / count, sums.load / count, config.lambda);
        let (v, t) = measure(model)?;
        history.push(EpochRecord {
            epoch,
            losses,
            valid_metric: v,
            test_metric: t,
        });
        let improved = if metric.higher_is_better() { v > best.1 } else { v < best.1 };
        if improved {
            best = (epoch, v, t, model.params.clone());
        }
    }
    Ok(TrainOutcome {
        history,
        metric,
        best_epoch: best.0,
        best_valid: best.1,
        best_test: best.2,
        best_params: best.3,
    })
}

/// Routing summary of one expert over a set of graphs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStat {
    pub layer: usize,
    pub expert: usize,
    pub importance: f64,
    pub load: f64,
    pub count: usize,
}

/// Evaluation-mode gate statistics of every GMoE layer over `graphs`.
pub fn gate_stats(model: &Model, graphs: &[&Graph]) -> Result<Vec<GateStat>> {
    let batch = crate::graph::batch_graphs(graphs)?;
    let mut tape = Tape::new();
    let vars = tape.load_params(&model.params);
    let fwd = model.forward(&mut tape, &vars, &batch, ForwardOptions::eval(), &mut Streams::new(0))?;
    let mut out = Vec::new();
    for (layer, gate) in fwd.gates.iter().enumerate() {
        let counts = gate.decision.selection_counts();
        let importance = tape.value(gate.importance);
        let load = tape.value(gate.load);
        for (expert, &count) in counts.iter().enumerate() {
            out.push(GateStat {
                layer,
                expert,
                importance: importance.get(0, expert),
                load: load.get(0, expert),
                count,
            });
        }
    }
    Ok(out)
}

pub fn gate_stats_csv(stats: &[GateStat]) -> String {
    let mut out = String::from("layer,expert,importance,load,count\n");
    for s in stats {
        writeln!(out, "{},{},{},{},{}", s.layer, s.expert, s.importance, s.load, s.count).unwrap();
    }
    out
}

/// Mean over GMoE layers of the coefficient of variation of per-expert
/// selection counts.
pub fn selection_cv(stats: &[GateStat]) -> Result<f64> {
    let layers: std::collections::BTreeSet<usize> = stats.iter().map(|s| s.layer).collect();
    if layers.is_empty() {
        return Err(invalid("no GMoE layers"));
    }
    let mut total = 0.0;
    for &l in &layers {
        let counts: Vec<f64> = stats.iter().filter(|s| s.layer == l).map(|s| s.count as f64).collect();
        total += coefficient_of_variation(&counts)?;
    }
    Ok(total / layers.len() as f64)
}

/// Mean gate weight on hop-2 experts per node, averaged over GMoE layers
/// (evaluation mode).
pub fn hop2_gate_mass(model: &Model, graphs: &[&Graph]) -> Result<f64> {
    let moe = model.config.moe.ok_or_else(|| invalid("model has no GMoE layers"))?;
    let batch = crate::graph::batch_graphs(graphs)?;
    let mut tape = Tape::new();
    let vars = tape.load_params(&model.params);
    let fwd = model.forward(&mut tape, &vars, &batch, ForwardOptions::eval(), &mut Streams::new(0))?;
    let mut total = 0.0;
    for gate in &fwd.gates {
        let w = &gate.decision.weights;
        let mass: f64 = w.iter_rows().map(|row| row[moe.m..].iter().sum::<f64>()).sum();
        total += mass / w.rows() as f64;
    }
    Ok(total / fwd.gates.len() as f64)
}

/// Mask token and linear decoder used by masked-feature pretraining.
#[derive(Clone, Copy, Debug)]
pub struct PretrainHead {
    pub mask_token: ParamId,
    pub decoder_w: ParamId,
    pub decoder_b: ParamId,
}

impl PretrainHead {
    /// Appends the head's parameters to a copy of the model's store.
    pub fn attach(model: &Model, seed: u64) -> (Self, ParamStore) {
        let mut store = model.params.clone();
        let d = model.config.input_dim;
        let init = Initializer::new(seed);
        let head = Self {
            mask_token: store.push("pretrain.mask_token", Matrix::zeros(1, d)),
            decoder_w: store.push("pretrain.decoder.weight", init.glorot("pretrain.decoder.weight", model.config.width(), d)),
            decoder_b: store.push("pretrain.decoder.bias", Matrix::zeros(1, d)),
        };
        (head, store)
    }
}

/// Nodes to mask per graph: `max(1, round(ratio · n))` drawn uniformly.
pub fn choose_masked(batch: &GraphBatch, ratio: f64, rng: &mut Rng) -> Vec<usize> {
    let mut masked = Vec::new();
    for g in 0..batch.num_graphs() {
        let range = batch.node_range(g);
        let n = range.len();
        let count = ((ratio * n as f64).round() as usize).clamp(1, n);
        let mut picks = rng.sample_indices(n, count);
        picks.sort_unstable();
        masked.extend(picks.into_iter().map(|i| range.start + i));
    }
    masked
}

/// Records the pretraining objective: masked-row MSE of the decoded node
/// embeddings against the original features, plus the scaled balance
/// losses of the encoder's GMoE layers.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss(
    tape: &mut Tape,
    vars: &[Var],
    model: &Model,
    head: &PretrainHead,
    batch: &GraphBatch,
    masked: &[usize],
    lambda: f64,
    options: ForwardOptions,
    streams: &mut Streams,
) -> Result<LossVars> {
    if masked.is_empty() {
        return Err(invalid("no masked nodes"));
    }
    let n = batch.num_nodes();
    let mut keep = vec![1.0; n];
    let mut indicator = vec![0.0; n];
    for &i in masked {
        keep[i] = 0.0;
        indicator[i] = 1.0;
    }
    let x = tape.constant(batch.node_feat.clone());
    let keep = tape.constant(Matrix::new(n, 1, keep)?);
    let indicator = tape.constant(Matrix::new(n, 1, indicator)?);
    let kept = tape.mul(x, keep);
    let tokens = tape.matmul(indicator, vars[head.mask_token.0]);
    let input = tape.add(kept, tokens);
    let (nodes, gates) = model.encode(tape, vars, input, &batch.nbrs, options, streams)?;
    let recon = tape.matmul(nodes, vars[head.decoder_w.0]);
    let recon = tape.add(recon, vars[head.decoder_b.0]);
    let rows: Rc<[usize]> = masked.into();
    let predicted = tape.gather_rows(recon, rows.clone());
    let original = tape.gather_rows(x, rows);
    let diff = tape.sub(predicted, original);
    let sq = tape.square(diff);
    let mse = tape.mean_all(sq);
    Ok(total_loss(tape, mse, &gates, lambda))
}

/// Masked-feature pretraining of the model's encoder and layers on
/// `graphs`. Returns the mean loss per epoch; the model's parameters are
/// updated in place, the mask token and decoder are discarded.
pub fn pretrain_masked(model: &mut Model, graphs: &[&Graph], config: &TrainConfig) -> Result<Vec<LossReport>> {
    config.validate()?;
    if graphs.is_empty() {
        return Err(invalid("no graphs to pretrain on"));
    }
    let nbrs: Vec<Neighborhoods> = graphs.iter().map(|g| build_neighborhoods(g)).collect::<Result<_>>()?;
    let (head, mut store) = PretrainHead::attach(model, config.seed);
    let mut adam = Adam::new(&store, config.lr);
    let mut streams = Streams::new(config.seed);
    let mut mask_rng = Rng::derive(config.seed, "mask");
    let mut shuffle = Rng::derive(config.seed, "pretrain-shuffle");
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        shuffle.shuffle(&mut order);
        let mut sums = LossReport::default();
        for chunk in order.chunks(config.batch_size) {
            let gs: Vec<&Graph> = chunk.iter().map(|&i| graphs[i]).collect();
            let ns: Vec<&Neighborhoods> = chunk.iter().map(|&i| &nbrs[i]).collect();
            let batch = batch_with_neighborhoods(&gs, &ns)?;
            let masked = choose_masked(&batch, config.mask_ratio, &mut mask_rng);
            let mut tape = Tape::new();
            let vars = tape.load_params(&store);
            let loss = pretrain_loss(&mut tape, &vars, model, &head, &batch, &masked, config.lambda, ForwardOptions::train(), &mut streams)?;
            let r = loss.report(&tape);
            let grads = tape.backward(loss.total)?.for_params(&tape, &vars);
            adam.update(&mut store, &grads)?;
            let w = chunk.len() as f64;
            sums.task += w * r.task;
            sums.importance += w * r.importance;
            sums.load += w * r.load;
        }
        let c = graphs.len() as f64;
        history.push(LossReport::compose(sums.task / c, sums.importance / c, sums.load / c, config.lambda));
    }
    model.params.copy_matching(&store);
    Ok(history)
}

/// Term of the objective checked by [`gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossComponent {
    Task,
    Importance,
    Load,
    Total,
    Pretrain,
}

impl LossComponent {
    pub const ALL: [LossComponent; 5] = [
        LossComponent::Task,
        LossComponent::Importance,
        LossComponent::Load,
        LossComponent::Total,
        LossComponent::Pretrain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossComponent::Task => "task",
            LossComponent::Importance => "importance",
            LossComponent::Load => "load",
            LossComponent::Total => "total",
            LossComponent::Pretrain => "pretrain",
        }
    }
}

/// Central-difference check of one loss term in training mode, with the
/// gate noise (and dropout and masking) replayed from `seed` on every
/// evaluation.
pub fn gradcheck(model: &Model, batch: &GraphBatch, component: LossComponent, lambda: f64, mask_ratio: f64, seed: u64, h: f64) -> Result<GradCheck> {
    let (head, store) = PretrainHead::attach(model, seed);
    let masked = choose_masked(batch, mask_ratio, &mut Rng::derive(seed, "mask"));
    let record = |tape: &mut Tape, store: &ParamStore| -> Result<(Vec<Var>, Var)> {
        let vars = tape.load_params(store);
        let mut streams = Streams::new(seed);
        let loss = if component == LossComponent::Pretrain {
            pretrain_loss(tape, &vars, model, &head, batch, &masked, lambda, ForwardOptions::train(), &mut streams)?.total
        } else {
            let fwd = model.forward(tape, &vars, batch, ForwardOptions::train(), &mut streams)?;
            let task = task_loss(tape, fwd.predictions, batch, model.config.task)?;
            let l = total_loss(tape, task, &fwd.gates, lambda);
            match component {
                LossComponent::Task => l.task,
                LossComponent::Importance => l.importance,
                LossComponent::Load => l.load,
                _ => l.total,
            }
        };
        Ok((vars, loss))
    };
    let mut tape = Tape::new();
    let (vars, loss) = record(&mut tape, &store)?;
    let analytic = tape.backward(loss)?.for_params(&tape, &vars);
    let loss_fn = |p: &ParamStore| {
        let mut t = Tape::new();
        let (_, l) = record(&mut t, p).expect("replayed forward succeeds");
        t.scalar(l)
    };
    Ok(finite_difference_check(loss_fn, &store, &analytic, h))
}
