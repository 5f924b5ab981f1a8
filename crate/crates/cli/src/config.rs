//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gmoe::experts::ExpertKind;
use gmoe::model::{ModelConfig, MoeConfig, TaskType};
use gmoe::training::{Metric, TrainConfig};

use crate::CliError;

/// Every recognized key with its default. An empty default means unset.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("dataset", ""),
    ("checkpoint", ""),
    ("gen.graphs", "200"),
    ("gen.min_nodes", "8"),
    ("gen.max_nodes", "16"),
    ("split", "0.8,0.1,0.1"),
    ("kind", "gcn"),
    ("layers", "2"),
    ("hidden", "32"),
    ("moe", "true"),
    ("n", "4"),
    ("m", "2"),
    ("k", "2"),
    ("equal_flops", "true"),
    ("dropout", "0"),
    ("lr", "0.005"),
    ("epochs", "50"),
    ("batch_size", "32"),
    ("lambda", "0.1"),
    ("metric", ""),
    ("mask_ratio", "0.25"),
    ("pretrain_epochs", "0"),
    ("eval.split", "test"),
    ("flops.nodes", "50"),
    ("flops.edges", "75"),
    ("gradcheck.nodes", "8"),
    ("gradcheck.edges", "12"),
    ("gradcheck.hidden", "6"),
    ("gradcheck.step", "1e-6"),
    ("gradcheck.tolerance", "1e-4"),
    ("grid.n", "4,8"),
    ("grid.k", "1,2,4"),
    ("grid.lambda", "0.1,1"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the file's assignments, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                cfg.assign(line).map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
            }
        }
        for o in overrides {
            cfg.assign(o).map_err(CliError::Usage)?;
        }
        Ok(cfg)
    }

    fn assign(&mut self, text: &str) -> Result<(), String> {
        let (key, value) = text.split_once('=').ok_or_else(|| format!("expected key=value, got {text:?}"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(format!("unknown config key {key:?}")),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    pub fn optional(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e| CliError::Usage(format!("bad value {:?} for {key}: {e}", self.raw(key))))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|e| CliError::Usage(format!("bad list entry {v:?} for {key}: {e}")))
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.optional(key).map(PathBuf::from)
    }

    pub fn split_ratios(&self) -> Result<[f64; 3], CliError> {
        let r: Vec<f64> = self.list("split")?;
        r.try_into().map_err(|_| CliError::Usage("split needs three ratios".into()))
    }

    pub fn kind(&self) -> Result<ExpertKind, CliError> {
        self.raw("kind").parse().map_err(|e: gmoe::Error| CliError::Usage(e.to_string()))
    }

    pub fn model(&self, input_dim: usize, task: TaskType, edge_dim: Option<usize>) -> Result<ModelConfig, CliError> {
        let moe = if self.get::<bool>("moe")? {
            Some(MoeConfig {
                n: self.get("n")?,
                m: self.get("m")?,
                k: self.get("k")?,
            })
        } else {
            None
        };
        Ok(ModelConfig {
            input_dim,
            hidden: self.get("hidden")?,
            layers: self.get("layers")?,
            kind: self.kind()?,
            moe,
            equal_flops: self.get("equal_flops")?,
            task,
            edge_dim,
            dropout: self.get("dropout")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let metric = match self.optional("metric") {
            Some(m) => Some(Metric::from_str(m).map_err(|e| CliError::Usage(e.to_string()))?),
            None => None,
        };
        Ok(TrainConfig {
            lr: self.get("lr")?,
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            lambda: self.get("lambda")?,
            seed: self.get("seed")?,
            metric,
            mask_ratio: self.get("mask_ratio")?,
        })
    }

    /// Sorted `key=value` lines, prefixed by the command.
    pub fn echo(&self, command: &str) -> String {
        let mut out = format!("# command={command}\n");
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\n\nn = 8\nk=1\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["k=4".into()]).unwrap();
        assert_eq!(cfg.get::<usize>("n").unwrap(), 8);
        assert_eq!(cfg.get::<usize>("k").unwrap(), 4);
        assert_eq!(cfg.raw("kind"), "gcn");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        assert!(matches!(RunConfig::resolve(None, &["bogus=1".into()]), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::resolve(None, &["n".into()]), Err(CliError::Usage(_))));
        let cfg = RunConfig::resolve(None, &["n=four".into()]).unwrap();
        assert!(matches!(cfg.get::<usize>("n"), Err(CliError::Usage(_))));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::resolve(None, &["lambda=1".into(), "dataset=x.jsonl".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.cfg");
        std::fs::write(&path, cfg.echo("train")).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), &[]).unwrap(), cfg);
    }

    #[test]
    fn lists_and_ratios() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.list::<usize>("grid.k").unwrap(), vec![1, 2, 4]);
        assert_eq!(cfg.split_ratios().unwrap(), [0.8, 0.1, 0.1]);
    }
}
