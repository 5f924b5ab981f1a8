//! Command implementations. Every command writes its resolved config to
//! `config.txt` in the output directory next to its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use gmoe::datasets::{gen_hop_mixture, random_graph, split, Dataset, Split};
use gmoe::flops::{verify_parity, ParityCheck};
use gmoe::graph::{batch_graphs, Graph, Target};
use gmoe::model::{Model, TaskType};
use gmoe::training::{self, gate_stats_csv, gradcheck as check_gradients, LossComponent, Metric};
use gmoe::{Matrix, Rng};

use crate::config::RunConfig;
use crate::CliError;

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

fn generate(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let seed = cfg.get("seed")?;
    let ds = gen_hop_mixture(seed, cfg.get("gen.graphs")?, (cfg.get("gen.min_nodes")?, cfg.get("gen.max_nodes")?))?;
    Ok(split(ds, cfg.split_ratios()?, seed)?)
}

/// The configured dataset file, or a freshly generated hop mixture.
fn dataset(cfg: &RunConfig, task: Option<TaskType>) -> Result<Dataset, CliError> {
    match cfg.path("dataset") {
        Some(path) => Ok(Dataset::load_jsonl(path, task)?),
        None => generate(cfg),
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = generate(cfg)?;
    write(out, "dataset.jsonl", &ds.to_jsonl())?;
    write(out, "config.txt", &cfg.echo("gen-data"))?;
    println!("wrote {} graphs to {}", ds.len(), out.join("dataset.jsonl").display());
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub metric: Metric,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub best_test: f64,
    pub width: usize,
    pub parameters: usize,
}

/// Trains one model and writes its history, best checkpoint, gate
/// statistics and summary to `out`.
fn train_one(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<RunSummary, CliError> {
    let model_cfg = cfg.model(ds.input_dim(), ds.task, ds.edge_dim())?;
    let tc = cfg.train()?;
    let mut model = Model::new(model_cfg, tc.seed)?;
    let pretrain_epochs: usize = cfg.get("pretrain_epochs")?;
    if pretrain_epochs > 0 {
        let pc = training::TrainConfig {
            epochs: pretrain_epochs,
            ..tc.clone()
        };
        let history = training::pretrain_masked(&mut model, &ds.graphs_in(Split::Train), &pc)?;
        let mut csv = String::from("epoch,reconstruction_loss,importance_loss,load_loss,total_loss\n");
        for (e, r) in history.iter().enumerate() {
            writeln!(csv, "{},{},{},{},{}", e + 1, r.task, r.importance, r.load, r.total).unwrap();
        }
        write(out, "pretrain.csv", &csv)?;
    }
    let outcome = training::train(&mut model, ds, &tc)?;
    model.params = outcome.best_params.clone();
    let graphs: Vec<&Graph> = ds.graphs.iter().collect();
    let stats = training::gate_stats(&model, &graphs)?;
    let summary = RunSummary {
        metric: outcome.metric,
        best_epoch: outcome.best_epoch,
        best_valid: outcome.best_valid,
        best_test: outcome.best_test,
        width: model.config.width(),
        parameters: model.num_scalars(),
    };
    write(out, "history.csv", &outcome.history_csv())?;
    write(out, "model.ckpt", &model.to_checkpoint())?;
    write(out, "gate_stats.csv", &gate_stats_csv(&stats))?;
    write(out, "summary.json", &json(&summary))?;
    write(out, "config.txt", &cfg.echo("train"))?;
    Ok(summary)
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = dataset(cfg, None)?;
    let s = train_one(cfg, &ds, out)?;
    println!(
        "best epoch {}: valid {} = {}, test {} = {}",
        s.best_epoch,
        s.metric.as_str(),
        s.best_valid,
        s.metric.as_str(),
        s.best_test
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub lambda: f64,
}

impl Cell {
    fn name(&self) -> String {
        format!("n{}-m{}-k{}-lambda{}", self.n, self.m, self.k, self.lambda)
    }
}

/// Grid cells in sweep order; m runs over {0, n/2, n} and cells with
/// k > n are skipped.
pub fn grid_cells(cfg: &RunConfig) -> Result<Vec<Cell>, CliError> {
    let mut cells = Vec::new();
    for n in cfg.list::<usize>("grid.n")? {
        let mut ms = vec![0, n / 2, n];
        ms.dedup();
        for &m in &ms {
            for k in cfg.list::<usize>("grid.k")? {
                if k == 0 || k > n {
                    continue;
                }
                for lambda in cfg.list::<f64>("grid.lambda")? {
                    cells.push(Cell { n, m, k, lambda });
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(CliError::Usage("the grid has no valid cells".into()));
    }
    Ok(cells)
}

pub fn train_grid(cfg: &RunConfig, out: &Path, parallel: bool) -> Result<(), CliError> {
    let ds = dataset(cfg, None)?;
    let cells = grid_cells(cfg)?;
    let run = |cell: &Cell| -> Result<RunSummary, CliError> {
        let mut c = cfg.clone();
        for (key, value) in [
            ("moe", "true".to_string()),
            ("n", cell.n.to_string()),
            ("m", cell.m.to_string()),
            ("k", cell.k.to_string()),
            ("lambda", cell.lambda.to_string()),
        ] {
            c.set(key, &value).map_err(CliError::Usage)?;
        }
        train_one(&c, &ds, &out.join("cells").join(cell.name()))
    };
    let results: Vec<Result<RunSummary, CliError>> = if parallel {
        cells.par_iter().map(run).collect()
    } else {
        cells.iter().map(run).collect()
    };
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut csv = String::from("n,m,k,lambda,width,best_epoch,best_valid,best_test\n");
    let mut best = 0;
    for (i, (cell, r)) in cells.iter().zip(&results).enumerate() {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            cell.n, cell.m, cell.k, cell.lambda, r.width, r.best_epoch, r.best_valid, r.best_test
        )
        .unwrap();
        let better = if r.metric.higher_is_better() {
            r.best_valid > results[best].best_valid
        } else {
            r.best_valid < results[best].best_valid
        };
        if better {
            best = i;
        }
    }
    write(out, "grid.csv", &csv)?;
    write(out, "config.txt", &cfg.echo("train --grid"))?;
    let (cell, r) = (&cells[best], &results[best]);
    println!(
        "best cell {}: valid {} = {}, test {} = {}",
        cell.name(),
        r.metric.as_str(),
        r.best_valid,
        r.metric.as_str(),
        r.best_test
    );
    Ok(())
}

fn checkpoint_and_graphs(cfg: &RunConfig) -> Result<(Model, Dataset), CliError> {
    let path = cfg.path("checkpoint").ok_or_else(|| CliError::Usage("a checkpoint is required".into()))?;
    let model = Model::load(path)?;
    if cfg.path("dataset").is_none() {
        return Err(CliError::Usage("a dataset is required".into()));
    }
    let ds = dataset(cfg, Some(model.config.task))?;
    Ok((model, ds))
}

fn selected<'a>(cfg: &RunConfig, ds: &'a Dataset) -> Result<Vec<&'a Graph>, CliError> {
    let graphs = match cfg.raw("eval.split") {
        "all" => ds.graphs.iter().collect(),
        "train" => ds.graphs_in(Split::Train),
        "valid" => ds.graphs_in(Split::Valid),
        "test" => ds.graphs_in(Split::Test),
        other => return Err(CliError::Usage(format!("eval.split must be all, train, valid or test, not {other:?}"))),
    };
    if graphs.is_empty() {
        return Err(CliError::Check(format!("the {} split is empty", cfg.raw("eval.split"))));
    }
    Ok(graphs)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    split: &'a str,
    graphs: usize,
    metric: Metric,
    value: f64,
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (model, ds) = checkpoint_and_graphs(cfg)?;
    let graphs = selected(cfg, &ds)?;
    let metric = cfg.train()?.metric.unwrap_or_else(|| Metric::default_for(model.config.task));
    let report = EvalReport {
        split: cfg.raw("eval.split"),
        graphs: graphs.len(),
        metric,
        value: training::evaluate(&model, &graphs, metric)?,
    };
    let text = json(&report);
    write(out, "eval.json", &text)?;
    write(out, "config.txt", &cfg.echo("eval"))?;
    print!("{text}");
    Ok(())
}

pub fn gate_stats(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (model, ds) = checkpoint_and_graphs(cfg)?;
    let graphs = selected(cfg, &ds)?;
    let csv = gate_stats_csv(&training::gate_stats(&model, &graphs)?);
    write(out, "gate_stats.csv", &csv)?;
    write(out, "config.txt", &cfg.echo("gate-stats"))?;
    print!("{csv}");
    Ok(())
}

pub fn flops(cfg: &RunConfig, out: &Path, grid: bool) -> Result<(), CliError> {
    let seed = cfg.get("seed")?;
    let nbrs = match cfg.path("dataset") {
        Some(_) => {
            let ds = dataset(cfg, None)?;
            batch_graphs(&ds.graphs.iter().collect::<Vec<_>>())?.nbrs
        }
        None => {
            let g = random_graph("flops", cfg.get("flops.nodes")?, cfg.get("flops.edges")?, 1, seed)?;
            batch_graphs(&[&g])?.nbrs
        }
    };
    let cells: Vec<(usize, usize, usize)> = if grid {
        let mut cells: Vec<(usize, usize, usize)> = grid_cells(cfg)?.into_iter().map(|c| (c.n, c.m, c.k)).collect();
        cells.dedup();
        cells
    } else {
        vec![(cfg.get("n")?, cfg.get("m")?, cfg.get("k")?)]
    };
    let kind = cfg.kind()?;
    let s0 = cfg.get("hidden")?;
    let checks = cells
        .iter()
        .map(|&(n, m, k)| verify_parity(kind, n, m, k, s0, &nbrs, seed))
        .collect::<Result<Vec<ParityCheck>, _>>()?;
    for c in &checks {
        println!(
            "n={} m={} k={} width={} parity_ratio={:.4} parity_ratio_with_gate={:.4} counts_match={}",
            c.n,
            c.m,
            c.k,
            c.hidden,
            c.report.parity_ratio,
            c.report.parity_ratio_with_gate,
            c.counts_match()
        );
    }
    write(out, "flops.json", &json(&checks))?;
    write(out, "config.txt", &cfg.echo(if grid { "flops --grid" } else { "flops" }))?;
    if let Some(c) = checks.iter().find(|c| !c.counts_match()) {
        return Err(CliError::Check(format!(
            "analytic flops differ from instrumented flops for n={} m={} k={}",
            c.n, c.m, c.k
        )));
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let seed: u64 = cfg.get("seed")?;
    let mut g = random_graph("gradcheck", cfg.get("gradcheck.nodes")?, cfg.get("gradcheck.edges")?, 3, seed)?;
    g.target = Target::Scalar(1.0);
    let mut model_cfg = cfg.model(3, TaskType::Binary { labels: 1 }, None)?;
    model_cfg.hidden = cfg.get("gradcheck.hidden")?;
    model_cfg.equal_flops = false;
    let mut model = Model::new(model_cfg, seed)?;
    // Zero-initialized gates and biases sit on ties and kinks; random
    // parameters give a generic point.
    let mut rng = Rng::derive(seed, "gradcheck");
    for v in model.params.values_mut() {
        let data = (0..v.len()).map(|_| 0.5 * rng.normal()).collect();
        *v = Matrix::new(v.rows(), v.cols(), data)?;
    }
    let batch = batch_graphs(&[&g])?;
    let tolerance: f64 = cfg.get("gradcheck.tolerance")?;
    let tc = cfg.train()?;
    let mut csv = String::from("component,max_relative_error,passed\n");
    let mut failed = Vec::new();
    for c in LossComponent::ALL {
        let check = check_gradients(&model, &batch, c, tc.lambda, tc.mask_ratio, seed, cfg.get("gradcheck.step")?)?;
        let passed = check.max_relative_error < tolerance;
        writeln!(csv, "{},{},{}", c.as_str(), check.max_relative_error, passed).unwrap();
        if !passed {
            failed.push(c.as_str());
        }
    }
    write(out, "gradcheck.csv", &csv)?;
    write(out, "config.txt", &cfg.echo("gradcheck"))?;
    print!("{csv}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check above {tolerance} for {}", failed.join(", "))))
    }
}
