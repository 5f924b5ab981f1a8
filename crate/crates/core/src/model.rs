//! Full models: input encoder, stacked GMoE (or plain) layers and a task
//! readout, plus a bit-exact text checkpoint format.

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::experts::{ExpertConfig, ExpertKind, Hop};
use crate::flops::{equal_flops_hidden, FlopsReport, GraphStats, LayerFlops, Routing};
use crate::gating::{GateForward, Mode};
use crate::graph::{GraphBatch, Neighborhoods};
use crate::layer::{Execution, GmoeLayer, GmoeLayerConfig, PlainLayer};
use crate::numerics::{Initializer, Matrix, ParamId, ParamStore, Rng, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskType {
    /// One or more independent binary labels per graph.
    Binary { labels: usize },
    MultiClass { classes: usize },
    Regression,
    /// One class label per node.
    NodeClassification { classes: usize },
}

impl TaskType {
    pub fn output_dim(&self) -> usize {
        match *self {
            TaskType::Binary { labels } => labels,
            TaskType::MultiClass { classes } | TaskType::NodeClassification { classes } => classes,
            TaskType::Regression => 1,
        }
    }

    pub fn is_node_level(&self) -> bool {
        matches!(self, TaskType::NodeClassification { .. })
    }
}

/// Experts per GMoE layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n: usize,
    pub m: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Reference width `s0` of the plain backbone.
    pub hidden: usize,
    pub layers: usize,
    pub kind: ExpertKind,
    /// `None` builds the plain backbone.
    pub moe: Option<MoeConfig>,
    /// Shrinks GMoE width to `round(hidden / √k)`.
    pub equal_flops: bool,
    pub task: TaskType,
    pub edge_dim: Option<usize>,
    pub dropout: f64,
}

impl ModelConfig {
    /// Width of the message-passing layers.
    pub fn width(&self) -> usize {
        match self.moe {
            Some(moe) if self.equal_flops => equal_flops_hidden(self.hidden, moe.k),
            _ => self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(invalid("input and hidden dims must be at least 1"));
        }
        if self.layers == 0 {
            return Err(invalid("a model needs at least one layer"));
        }
        if self.task.output_dim() == 0 {
            return Err(invalid("task output dim must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if self.edge_dim.is_some() && self.kind == ExpertKind::Gin {
            return Err(invalid("GIN experts do not use edge features"));
        }
        if let Some(moe) = self.moe {
            self.layer_config(moe).validate()?;
        }
        Ok(())
    }

    fn layer_config(&self, moe: MoeConfig) -> GmoeLayerConfig {
        GmoeLayerConfig {
            n: moe.n,
            m: moe.m,
            k: moe.k,
            in_dim: self.width(),
            out_dim: self.width(),
            kind: self.kind,
            edge_dim: self.edge_dim,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Gmoe(GmoeLayer),
    Plain(PlainLayer),
}

/// Random streams used by a forward pass. Separate streams keep the gate
/// noise, dropout and data order independent of each other.
#[derive(Clone, Debug)]
pub struct Streams {
    pub noise: Rng,
    pub dropout: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            noise: Rng::derive(seed, "noise"),
            dropout: Rng::derive(seed, "dropout"),
        }
    }
}

/// Options of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub execution: Execution,
    pub count_flops: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            execution: Execution::Sparse,
            count_flops: false,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            ..Self::train()
        }
    }
}

/// Recorded forward pass of a model.
pub struct ModelForward {
    /// Graph-level (`G × out`) or node-level (`N × out`) predictions.
    pub predictions: Var,
    /// Node embeddings after the last layer.
    pub nodes: Var,
    /// One entry per GMoE layer.
    pub gates: Vec<GateForward>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder_w: ParamId,
    pub encoder_b: ParamId,
    pub layers: Vec<Layer>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Initializer::new(seed);
        let mut params = ParamStore::new();
        let width = config.width();
        let encoder_w = params.push("encoder.weight", init.glorot("encoder.weight", config.input_dim, width));
        let encoder_b = params.push("encoder.bias", Matrix::zeros(1, width));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(match config.moe {
                Some(moe) => Layer::Gmoe(GmoeLayer::new(config.layer_config(moe), l, &mut params, &init)?),
                None => {
                    let expert = ExpertConfig {
                        kind: config.kind,
                        hop: Hop::One,
                        in_dim: width,
                        out_dim: width,
                        edge_dim: config.edge_dim,
                    };
                    Layer::Plain(PlainLayer::new(expert, l, &mut params, &init)?)
                }
            });
        }
        let out = config.task.output_dim();
        let head_w = params.push("head.weight", init.glorot("head.weight", width, out));
        let head_b = params.push("head.bias", Matrix::zeros(1, out));
        Ok(Self {
            config,
            params,
            encoder_w,
            encoder_b,
            layers,
            head_w,
            head_b,
        })
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().iter().map(Matrix::len).sum()
    }

    fn check_batch(&self, batch: &GraphBatch) -> Result<()> {
        if batch.node_feat.cols() != self.config.input_dim {
            return Err(invalid(format!(
                "batch has feature dim {}, model expects {}",
                batch.node_feat.cols(),
                self.config.input_dim
            )));
        }
        let batch_edges = batch.nbrs.edge_agg.as_ref().map(Matrix::cols);
        if self.config.edge_dim.is_some() && batch_edges != self.config.edge_dim {
            return Err(invalid(format!(
                "model expects edge features of dim {:?}, batch has {batch_edges:?}",
                self.config.edge_dim
            )));
        }
        Ok(())
    }

    /// Encoder and message-passing layers on an already recorded input.
    /// The last layer skips the nonlinearity and dropout.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: Var,
        nbrs: &Neighborhoods,
        options: ForwardOptions,
        streams: &mut Streams,
    ) -> Result<(Var, Vec<GateForward>)> {
        let mut h = tape.matmul(input, vars[self.encoder_w.0]);
        h = tape.add(h, vars[self.encoder_b.0]);
        let mut gates = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Gmoe(g) => {
                    let fwd = g.forward(
                        tape,
                        vars,
                        h,
                        nbrs,
                        options.mode,
                        options.execution,
                        &mut streams.noise,
                        options.count_flops,
                    )?;
                    gates.push(fwd.gate);
                    fwd.output
                }
                Layer::Plain(p) => p.forward(tape, vars, h, nbrs, options.count_flops)?,
            };
            if l < last {
                h = tape.relu(h);
                h = self.dropout(tape, h, options.mode, &mut streams.dropout)?;
            }
        }
        Ok((h, gates))
    }

    fn dropout(&self, tape: &mut Tape, h: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let p = self.config.dropout;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(h);
        }
        let (r, c) = tape.shape(h);
        let keep = 1.0 / (1.0 - p);
        let mask = (0..r * c).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let mask = tape.constant(Matrix::new(r, c, mask)?);
        Ok(tape.mul(h, mask))
    }

    /// Records a forward pass over `batch`; parameters must already be
    /// loaded as `vars` (see [`Tape::load_params`]).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], batch: &GraphBatch, options: ForwardOptions, streams: &mut Streams) -> Result<ModelForward> {
        self.check_batch(batch)?;
        let input = tape.constant(batch.node_feat.clone());
        let (nodes, gates) = self.encode(tape, vars, input, &batch.nbrs, options, streams)?;
        let pooled = if self.config.task.is_node_level() {
            nodes
        } else {
            let saved = tape.flop_site();
            tape.set_flop_site(None);
            let p = tape.sparse_matmul(batch.pool.clone(), nodes);
            tape.set_flop_site(saved);
            p
        };
        let out = tape.matmul(pooled, vars[self.head_w.0]);
        let predictions = tape.add(out, vars[self.head_b.0]);
        Ok(ModelForward {
            predictions,
            nodes,
            gates,
        })
    }

    /// Evaluation-mode predictions as a plain matrix.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = tape.load_params(&self.params);
        let fwd = self.forward(&mut tape, &vars, batch, ForwardOptions::eval(), &mut Streams::new(0))?;
        Ok(tape.value(fwd.predictions).clone())
    }

    /// Instrumented per-layer flops of an evaluation pass over `batch`.
    pub fn measure_flops(&self, batch: &GraphBatch) -> Result<(Vec<LayerFlops>, Vec<Routing>)> {
        let mut tape = Tape::new();
        let vars = tape.load_params(&self.params);
        let options = ForwardOptions {
            count_flops: true,
            ..ForwardOptions::eval()
        };
        let fwd = self.forward(&mut tape, &vars, batch, options, &mut Streams::new(0))?;
        let mut flops = tape.layer_flops().to_vec();
        flops.resize(self.layers.len(), LayerFlops::default());
        let gmoe_layers = self.layers.iter().filter_map(|l| match l {
            Layer::Gmoe(g) => Some(g),
            Layer::Plain(_) => None,
        });
        let routing = gmoe_layers
            .zip(&fwd.gates)
            .map(|(layer, gate)| Routing::observed(&layer.config, &gate.decision, &batch.nbrs))
            .collect();
        Ok((flops, routing))
    }

    /// Analytic per-layer flops given the routing of each GMoE layer.
    pub fn analytic_flops(&self, stats: &GraphStats, routing: &[Routing], mode: Mode) -> Result<Vec<LayerFlops>> {
        let mut gmoe = routing.iter();
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Gmoe(g) => {
                    let r = gmoe.next().ok_or_else(|| invalid("missing routing"))?;
                    crate::flops::count_layer_flops(&g.config, stats, r, mode)
                }
                Layer::Plain(p) => Ok(crate::flops::count_baseline_flops(&p.config, stats)),
            })
            .collect()
    }

    /// Flop report of this model against `baseline` on `batch`, checking
    /// analytic counts against an instrumented pass for both.
    pub fn flops_report(&self, baseline: &Model, batch: &GraphBatch) -> Result<FlopsReport> {
        let stats = GraphStats::from_neighborhoods(&batch.nbrs);
        let (measured, counts) = self.measure_flops(batch)?;
        let analytic = self.analytic_flops(&stats, &counts, Mode::Eval)?;
        let (base_measured, base_counts) = baseline.measure_flops(batch)?;
        let base_analytic = baseline.analytic_flops(&stats, &base_counts, Mode::Eval)?;
        let matched = measured == analytic && base_measured == base_analytic;
        Ok(FlopsReport::new(analytic, base_analytic, Some(matched)))
    }

    /// Text checkpoint: a header, the config as JSON, then every parameter
    /// with its shape and the hex bit patterns of its entries.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("gmoe-checkpoint 1\n");
        let config = serde_json::to_string(&self.config).expect("config serializes");
        writeln!(out, "config {config}").unwrap();
        for (name, m) in self.params.iter() {
            writeln!(out, "param {name} {} {}", m.rows(), m.cols()).unwrap();
            for row in m.iter_rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let parse = |line: usize, msg: String| Error::Parse { line, msg };
        match lines.next() {
            Some((_, "gmoe-checkpoint 1")) => {}
            _ => return Err(parse(1, "not a version 1 checkpoint".into())),
        }
        let (ln, config_line) = lines.next().ok_or_else(|| parse(2, "missing config".into()))?;
        let config_json = config_line
            .strip_prefix("config ")
            .ok_or_else(|| parse(ln, "expected config line".into()))?;
        let config: ModelConfig = serde_json::from_str(config_json).map_err(|e| parse(ln, e.to_string()))?;
        let mut model = Model::new(config, 0)?;
        let mut seen = 0;
        while let Some((ln, header)) = lines.next() {
            let parts: Vec<&str> = header.split_whitespace().collect();
            let [tag, name, rows, cols] = parts[..] else {
                return Err(parse(ln, format!("malformed parameter header {header:?}")));
            };
            if tag != "param" {
                return Err(parse(ln, format!("expected param, got {tag:?}")));
            }
            let dims = |s: &str| s.parse::<usize>().map_err(|e| parse(ln, e.to_string()));
            let (rows, cols) = (dims(rows)?, dims(cols)?);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = lines.next().ok_or_else(|| parse(ln, "truncated parameter".into()))?;
                for word in row.split_whitespace() {
                    let bits = u64::from_str_radix(word, 16).map_err(|e| parse(ln, e.to_string()))?;
                    data.push(f64::from_bits(bits));
                }
            }
            let value = Matrix::new(rows, cols, data).map_err(|e| parse(ln, e.to_string()))?;
            let id = model
                .params
                .id_of(name)
                .ok_or_else(|| parse(ln, format!("unknown parameter {name}")))?;
            model.params.set(id, value).map_err(|e| parse(ln, e.to_string()))?;
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(invalid(format!("checkpoint has {seen} of {} parameters", model.params.len())));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

/// Labels of a node-classification batch, `None` where missing.
pub(crate) fn node_labels(batch: &GraphBatch) -> Result<Rc<[Option<usize>]>> {
    let mut labels = Vec::with_capacity(batch.num_nodes());
    for (g, target) in batch.targets.iter().enumerate() {
        let values = target.values();
        if values.len() != batch.node_range(g).len() {
            return Err(invalid(format!(
                "graph {} has {} node labels for {} nodes",
                batch.graph_ids[g],
                values.len(),
                batch.node_range(g).len()
            )));
        }
        for v in values {
            labels.push(v.map(|x| x as usize));
        }
    }
    Ok(labels.into())
}
