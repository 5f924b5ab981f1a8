//! Graph datasets: JSON-lines I/O, the hop-mixture generator and
//! stratified splits.
//!
//! One graph per line:
//!
//! ```text
//! {"graph_id": str, "num_nodes": int, "edges": [[src,dst],...],
//!  "node_feat": [[f,...],...], "edge_feat": [[f,...],...] | null,
//!  "target": number | [number|null,...], "split": "train"|"valid"|"test"}
//! ```
//!
//! Edges listed in one direction only are mirrored on load.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Target};
use crate::model::TaskType;
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: TaskType,
    pub graphs: Vec<Graph>,
    /// One entry per graph.
    pub splits: Vec<Split>,
    /// Generator seed, for synthetic datasets.
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    graph_id: String,
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    node_feat: Vec<Vec<f64>>,
    edge_feat: Option<Vec<Vec<f64>>>,
    target: Target,
    split: Split,
}

fn rows_to_matrix(rows: &[Vec<f64>], expected_rows: usize, what: &str) -> Result<Matrix> {
    if rows.len() != expected_rows {
        return Err(invalid(format!("{what} has {} rows, expected {expected_rows}", rows.len())));
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(invalid(format!("{what} rows have different lengths")));
    }
    Matrix::new(rows.len(), cols, rows.concat())
}

impl Record {
    fn into_graph(self) -> Result<(Graph, Split)> {
        let node_feat = rows_to_matrix(&self.node_feat, self.num_nodes, "node_feat")?;
        if node_feat.cols() == 0 {
            return Err(invalid("node_feat must have at least one column"));
        }
        let edge_feat = self
            .edge_feat
            .map(|rows| rows_to_matrix(&rows, self.edges.len(), "edge_feat"))
            .transpose()?;
        let edges = self.edges.iter().map(|&[s, d]| (s, d)).collect();
        let graph = Graph::undirected(self.graph_id, self.num_nodes, edges, node_feat, edge_feat, self.target)?;
        Ok((graph, self.split))
    }

    fn from_graph(g: &Graph, split: Split) -> Self {
        let rows = |m: &Matrix| m.iter_rows().map(<[f64]>::to_vec).collect();
        Record {
            graph_id: g.graph_id.clone(),
            num_nodes: g.num_nodes,
            edges: g.edges.iter().map(|&(s, d)| [s, d]).collect(),
            node_feat: rows(&g.node_feat),
            edge_feat: g.edge_feat.as_ref().map(rows),
            target: g.target.clone(),
            split,
        }
    }
}

/// Guesses the task from the targets: vectors are binary labels, scalars in
/// {0, 1} binary, other non-negative integers classes, anything else
/// regression.
pub fn infer_task(graphs: &[Graph]) -> Result<TaskType> {
    let first = graphs.first().ok_or_else(|| invalid("empty dataset"))?;
    match &first.target {
        Target::Vector(v) => Ok(TaskType::Binary { labels: v.len() }),
        Target::Scalar(_) => {
            let mut values = Vec::with_capacity(graphs.len());
            for g in graphs {
                match g.target {
                    Target::Scalar(v) => values.push(v),
                    Target::Vector(_) => return Err(invalid("mixed scalar and vector targets")),
                }
            }
            let integral = values.iter().all(|v| v.fract() == 0.0 && *v >= 0.0);
            let max = values.iter().copied().fold(0.0, f64::max);
            Ok(if integral && max <= 1.0 {
                TaskType::Binary { labels: 1 }
            } else if integral {
                TaskType::MultiClass { classes: max as usize + 1 }
            } else {
                TaskType::Regression
            })
        }
    }
}

fn check_class(v: f64, classes: usize, what: &str) -> Result<()> {
    if v.fract() != 0.0 || v < 0.0 || v as usize >= classes {
        return Err(invalid(format!("{what}: {v} is not a class index below {classes}")));
    }
    Ok(())
}

impl Dataset {
    pub fn new(name: impl Into<String>, task: TaskType, graphs: Vec<Graph>, splits: Vec<Split>, seed: Option<u64>) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            task,
            graphs,
            splits,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.graphs.first().map_or(0, Graph::input_dim)
    }

    pub fn edge_dim(&self) -> Option<usize> {
        self.graphs.first().and_then(Graph::edge_dim)
    }

    /// Checks split assignment, uniform dims, unique ids and targets.
    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.graphs.len() {
            return Err(invalid(format!("{} splits for {} graphs", self.splits.len(), self.graphs.len())));
        }
        let mut ids = HashSet::new();
        for g in &self.graphs {
            if !ids.insert(g.graph_id.as_str()) {
                return Err(invalid(format!("duplicate graph_id {:?}", g.graph_id)));
            }
            if g.input_dim() != self.input_dim() || g.edge_dim() != self.edge_dim() {
                return Err(invalid(format!("graph {} has inconsistent feature dims", g.graph_id)));
            }
            self.check_target(g)?;
        }
        Ok(())
    }

    fn check_target(&self, g: &Graph) -> Result<()> {
        let what = format!("target of graph {}", g.graph_id);
        match (self.task, &g.target) {
            (TaskType::Binary { labels }, t) => {
                let values = t.values();
                if values.len() != labels {
                    return Err(invalid(format!("{what} has {} labels, expected {labels}", values.len())));
                }
                for v in values.into_iter().flatten() {
                    if v != 0.0 && v != 1.0 {
                        return Err(invalid(format!("{what}: binary label {v}")));
                    }
                }
            }
            (TaskType::MultiClass { classes }, Target::Scalar(v)) => check_class(*v, classes, &what)?,
            (TaskType::Regression, Target::Scalar(_)) => {}
            (TaskType::NodeClassification { classes }, Target::Vector(v)) => {
                if v.len() != g.num_nodes {
                    return Err(invalid(format!("{what} has {} node labels for {} nodes", v.len(), g.num_nodes)));
                }
                for x in v.iter().flatten() {
                    check_class(*x, classes, &what)?;
                }
            }
            _ => return Err(invalid(format!("{what} does not match task {:?}", self.task))),
        }
        Ok(())
    }

    /// Indices of the graphs in `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn graphs_in(&self, split: Split) -> Vec<&Graph> {
        self.indices(split).into_iter().map(|i| &self.graphs[i]).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (g, &split) in self.graphs.iter().zip(&self.splits) {
            let line = serde_json::to_string(&Record::from_graph(g, split)).expect("records serialize");
            writeln!(out, "{line}").unwrap();
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// Parses JSON lines; `task` overrides inference from the targets.
    pub fn from_jsonl(name: impl Into<String>, text: &str, task: Option<TaskType>) -> Result<Self> {
        let mut graphs = Vec::new();
        let mut splits = Vec::new();
        let mut ids = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |msg: String| Error::Parse { line: line_no, msg };
            let record: Record = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
            if !ids.insert(record.graph_id.clone()) {
                return Err(parse(format!("duplicate graph_id {:?}", record.graph_id)));
            }
            let (g, split) = record.into_graph().map_err(|e| parse(e.to_string()))?;
            if let Some(first) = graphs.first() {
                let first: &Graph = first;
                if g.input_dim() != first.input_dim() || g.edge_dim() != first.edge_dim() {
                    return Err(parse(format!("graph {} has inconsistent feature dims", g.graph_id)));
                }
            }
            graphs.push(g);
            splits.push(split);
        }
        let task = match task {
            Some(t) => t,
            None => infer_task(&graphs)?,
        };
        Dataset::new(name, task, graphs, splits, None)
    }

    pub fn load_jsonl(path: impl AsRef<Path>, task: Option<TaskType>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
        Self::from_jsonl(name, &std::fs::read_to_string(path)?, task)
    }
}

/// Family tag of a graph id (`"long-0003"` → `"long"`); ids without a
/// dash form a single family.
pub fn family_of(graph_id: &str) -> &str {
    graph_id.split_once('-').map_or("", |(f, _)| f)
}

/// Assigns splits with proportions `ratios` (train, valid, test),
/// stratified by family and deterministic in `seed`.
pub fn split(mut dataset: Dataset, ratios: [f64; 3], seed: u64) -> Result<Dataset> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = dataset.len();
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_valid);
    if n_train == 0 || n_valid == 0 || n_test == 0 {
        return Err(invalid(format!(
            "split of {n} graphs gives sizes {n_train}/{n_valid}/{n_test}; every split must be non-empty"
        )));
    }
    let mut families: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in dataset.graphs.iter().enumerate() {
        families.entry(family_of(&g.graph_id)).or_default().push(i);
    }
    let mut rng = Rng::derive(seed, "split");
    // Interleave the shuffled families by relative position so that every
    // prefix of the order holds each family in proportion.
    let mut keyed = Vec::with_capacity(n);
    for members in families.values_mut() {
        rng.shuffle(members);
        let len = members.len() as f64;
        for (j, &i) in members.iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / len, i));
        }
    }
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite keys").then(a.1.cmp(&b.1)));
    for (pos, &(_, i)) in keyed.iter().enumerate() {
        dataset.splits[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    Ok(dataset)
}

pub const LOCAL_FAMILY: &str = "local";
pub const LONG_FAMILY: &str = "long";

/// Input channels of the hop-mixture graphs.
pub const MARK_CHANNEL: usize = 0;
pub const BIT_CHANNEL: usize = 1;

/// Hop distances from `src` by breadth-first search over undirected edges.
fn distances(num_nodes: usize, edges: &[(usize, usize)], src: usize) -> Vec<Option<usize>> {
    let mut adj = vec![Vec::new(); num_nodes];
    for &(s, d) in edges {
        adj[s].push(d);
        adj[d].push(s);
    }
    let mut dist = vec![None; num_nodes];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].expect("queued nodes have a distance");
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Label rule of a family, or `None` when the graph is degenerate for it
/// (a tie among the marked node's neighbors, or no node at distance 2).
fn family_label(family: &str, num_nodes: usize, edges: &[(usize, usize)], marked: usize, bits: &[bool]) -> Option<bool> {
    let dist = distances(num_nodes, edges, marked);
    let at = |d: usize| (0..num_nodes).filter(move |&v| dist[v] == Some(d));
    if family == LOCAL_FAMILY {
        let (ones, total) = at(1).fold((0, 0), |(o, t), v| (o + bits[v] as usize, t + 1));
        (total > 0 && 2 * ones != total).then_some(2 * ones > total)
    } else {
        let ring: Vec<usize> = at(2).collect();
        (!ring.is_empty()).then(|| ring.iter().filter(|&&v| bits[v]).count() % 2 == 1)
    }
}

/// Random simple undirected graph with `edges` distinct non-loop edges,
/// standard normal node features and a zero scalar target.
pub fn random_graph(graph_id: &str, num_nodes: usize, edges: usize, feat_dim: usize, seed: u64) -> Result<Graph> {
    if num_nodes < 2 && edges > 0 || edges > num_nodes * num_nodes.saturating_sub(1) / 2 {
        return Err(invalid(format!("{num_nodes} nodes cannot hold {edges} distinct edges")));
    }
    let mut rng = Rng::derive(seed, "random-graph");
    let mut set = std::collections::BTreeSet::new();
    while set.len() < edges {
        let (a, b) = (rng.below(num_nodes), rng.below(num_nodes));
        if a != b {
            set.insert((a.min(b), a.max(b)));
        }
    }
    let feat = Matrix::new(num_nodes, feat_dim, (0..num_nodes * feat_dim).map(|_| rng.normal()).collect())?;
    Graph::undirected(graph_id, num_nodes, set.into_iter().collect(), feat, None, Target::Scalar(0.0))
}

/// Synthetic binary graph classification mixing two families.
///
/// Every node has features `[marked, bit, 1]` and exactly one node is
/// marked. In `local` graphs the label is the majority bit among the
/// marked node's neighbors; in `long` graphs it is the parity of the bits
/// of nodes at distance exactly 2 from it. Half the graphs of each family
/// are positive.
pub fn gen_hop_mixture(seed: u64, num_graphs: usize, nodes: (usize, usize)) -> Result<Dataset> {
    if num_graphs == 0 || num_graphs % 2 != 0 {
        return Err(invalid(format!("num_graphs must be even and positive, got {num_graphs}")));
    }
    let (lo, hi) = nodes;
    if lo < 4 || hi < lo {
        return Err(invalid(format!("node range {lo}..={hi} must satisfy 4 <= min <= max")));
    }
    let mut rng = Rng::derive(seed, "hop-mixture");
    let half = num_graphs / 2;
    let mut graphs = Vec::with_capacity(num_graphs);
    for i in 0..num_graphs {
        let (family, j) = if i < half { (LOCAL_FAMILY, i) } else { (LONG_FAMILY, i - half) };
        let want = j % 2 == 1;
        let graph = loop {
            let n = lo + rng.below(hi - lo + 1);
            // Random tree plus a few chords.
            let mut set = std::collections::BTreeSet::new();
            for v in 1..n {
                let u = rng.below(v);
                set.insert((u, v));
            }
            for _ in 0..rng.below(n / 3 + 1) {
                let (a, b) = (rng.below(n), rng.below(n));
                if a != b {
                    set.insert((a.min(b), a.max(b)));
                }
            }
            let edges: Vec<(usize, usize)> = set.into_iter().collect();
            let marked = rng.below(n);
            let bits: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
            if family_label(family, n, &edges, marked, &bits) != Some(want) {
                continue;
            }
            let mut feat = Matrix::zeros(n, 3);
            for v in 0..n {
                let row = feat.row_mut(v);
                row[MARK_CHANNEL] = if v == marked { 1.0 } else { 0.0 };
                row[BIT_CHANNEL] = if bits[v] { 1.0 } else { 0.0 };
                row[2] = 1.0;
            }
            let target = Target::Scalar(if want { 1.0 } else { 0.0 });
            break Graph::undirected(format!("{family}-{j:04}"), n, edges, feat, None, target)?;
        };
        graphs.push(graph);
    }
    let splits = vec![Split::Train; num_graphs];
    Dataset::new("hop_mixture", TaskType::Binary { labels: 1 }, graphs, splits, Some(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent labeler working from the stored graph alone.
    fn brute_force_label(g: &Graph) -> bool {
        let n = g.num_nodes;
        let marked = (0..n).find(|&v| g.node_feat.get(v, 0) == 1.0).unwrap();
        let bit = |v: usize| g.node_feat.get(v, 1) == 1.0;
        let adjacent = |a: usize, b: usize| g.edges.iter().any(|&(s, d)| (s, d) == (a, b) || (s, d) == (b, a));
        let neighbors: Vec<usize> = (0..n).filter(|&v| v != marked && adjacent(marked, v)).collect();
        if family_of(&g.graph_id) == LOCAL_FAMILY {
            let ones = neighbors.iter().filter(|&&v| bit(v)).count();
            2 * ones > neighbors.len()
        } else {
            let ring = (0..n).filter(|&v| v != marked && !neighbors.contains(&v) && neighbors.iter().any(|&u| adjacent(u, v)));
            ring.filter(|&v| bit(v)).count() % 2 == 1
        }
    }

    #[test]
    fn rule_examples() {
        // star, center marked, leaves with bits [1, 1, 0]
        let star = [(0, 1), (0, 2), (0, 3)];
        assert_eq!(family_label(LOCAL_FAMILY, 4, &star, 0, &[false, true, true, false]), Some(true));
        // path a-b-c, a marked, c set
        let path = [(0, 1), (1, 2)];
        assert_eq!(family_label(LONG_FAMILY, 3, &path, 0, &[false, false, true]), Some(true));
        assert_eq!(family_label(LOCAL_FAMILY, 3, &path, 1, &[true, false, false]), None);
    }

    #[test]
    fn generated_labels_match_brute_force_and_are_balanced() {
        let ds = gen_hop_mixture(3, 60, (6, 14)).unwrap();
        let mut positives = BTreeMap::new();
        for g in &ds.graphs {
            let Target::Scalar(y) = g.target else { panic!() };
            assert_eq!(brute_force_label(g), y == 1.0, "{}", g.graph_id);
            *positives.entry(family_of(&g.graph_id)).or_insert(0) += y as usize;
            assert!((6..=14).contains(&g.num_nodes));
            assert_eq!((0..g.num_nodes).filter(|&v| g.node_feat.get(v, 0) == 1.0).count(), 1);
        }
        assert_eq!(positives[LOCAL_FAMILY], 15);
        assert_eq!(positives[LONG_FAMILY], 15);
        assert!(gen_hop_mixture(0, 3, (6, 8)).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_hop_mixture(9, 20, (5, 9)).unwrap().to_jsonl();
        let b = gen_hop_mixture(9, 20, (5, 9)).unwrap().to_jsonl();
        assert_eq!(a, b);
        assert_ne!(a, gen_hop_mixture(10, 20, (5, 9)).unwrap().to_jsonl());
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = split(gen_hop_mixture(1, 20, (5, 8)).unwrap(), [0.6, 0.2, 0.2], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.write_jsonl(&path).unwrap();
        let back = Dataset::load_jsonl(&path, None).unwrap();
        assert_eq!(back.graphs, ds.graphs);
        assert_eq!(back.splits, ds.splits);
        assert_eq!(back.task, ds.task);
        assert_eq!(back.to_jsonl(), ds.to_jsonl());
    }

    #[test]
    fn loader_cases() {
        let one = r#"{"graph_id":"a","num_nodes":1,"edges":[],"node_feat":[[0.5]],"edge_feat":null,"target":1.5,"split":"train"}"#;
        let ds = Dataset::from_jsonl("t", one, None).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.task, TaskType::Regression);

        let mirrored = r#"{"graph_id":"b","num_nodes":2,"edges":[[0,1]],"node_feat":[[1],[2]],"edge_feat":[[3]],"target":[1,null],"split":"test"}"#;
        let ds = Dataset::from_jsonl("t", mirrored, None).unwrap();
        assert_eq!(ds.graphs[0].edges, vec![(0, 1), (1, 0)]);
        assert_eq!(ds.graphs[0].edge_feat.as_ref().unwrap().data(), &[3.0, 3.0]);
        assert_eq!(ds.task, TaskType::Binary { labels: 2 });

        let dup = format!("{one}\n{one}\n");
        match Dataset::from_jsonl("t", &dup, None) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
        let bad_edge = one.replace(r#""edges":[]"#, r#""edges":[[0,3]]"#);
        assert!(Dataset::from_jsonl("t", &bad_edge, None).is_err());
        let garbage = format!("{one}\nnot json\n");
        assert!(matches!(Dataset::from_jsonl("t", &garbage, None), Err(Error::Parse { line: 2, .. })));
        let two = one.replace(r#""a""#, r#""c""#).replace("[[0.5]]", "[[0.5, 1.0]]");
        assert!(Dataset::from_jsonl("t", &format!("{one}\n{two}"), None).is_err());
        let classes = one.replace("1.5", "3");
        let ds = Dataset::from_jsonl("t", &classes, None).unwrap();
        assert_eq!(ds.task, TaskType::MultiClass { classes: 4 });
    }

    #[test]
    fn split_sizes_and_stratification() {
        let ds = gen_hop_mixture(2, 100, (5, 8)).unwrap();
        let s = split(ds.clone(), [0.8, 0.1, 0.1], 4).unwrap();
        assert_eq!(s.indices(Split::Train).len(), 80);
        assert_eq!(s.indices(Split::Valid).len(), 10);
        assert_eq!(s.indices(Split::Test).len(), 10);
        for split_kind in [Split::Train, Split::Valid, Split::Test] {
            let members = s.graphs_in(split_kind);
            let local = members.iter().filter(|g| family_of(&g.graph_id) == LOCAL_FAMILY).count() as f64;
            let expected = members.len() as f64 * 0.5;
            assert!((local - expected).abs() <= 1.0);
        }
        assert_eq!(split(ds.clone(), [0.8, 0.1, 0.1], 4).unwrap().splits, s.splits);
        assert_ne!(split(ds.clone(), [0.8, 0.1, 0.1], 5).unwrap().splits, s.splits);
        assert!(split(ds.clone(), [0.8, 0.2, 0.0], 4).is_err());
        assert!(split(ds, [0.8, 0.1, 0.2], 4).is_err());
    }

    #[test]
    fn random_graph_edge_counts() {
        let g = random_graph("r", 50, 75, 4, 1).unwrap();
        assert_eq!(g.edges.len(), 150);
        assert!(g.edges.iter().all(|&(a, b)| a != b));
        assert_eq!(g.node_feat.shape(), (50, 4));
        assert_eq!(g, random_graph("r", 50, 75, 4, 1).unwrap());
        assert!(random_graph("r", 3, 4, 1, 0).is_err());
    }
}
