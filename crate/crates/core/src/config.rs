//! Training configuration and its `key = value` file format.

use std::path::{Path, PathBuf};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::Labels;
use crate::model::{Combine, HeadKind, InputKind, Mode, ModelConfig};
use crate::optim::{OptimizerConfig, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    GraphRegression,
    NodeClassification,
    KgCompletion,
}

keyword_enum!(Task {
    Task::GraphRegression => "graph-regression",
    Task::NodeClassification => "node-classification",
    Task::KgCompletion => "kg-completion",
});

impl Task {
    pub fn mode(self) -> Mode {
        match self {
            Task::GraphRegression => Mode::WholeGraph,
            Task::NodeClassification => Mode::EgoNode,
            Task::KgCompletion => Mode::Kg,
        }
    }
}

/// Batch size: a fixed count or the whole training split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: BatchSize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tau: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub k: usize,
    pub candidate_count: usize,
    pub refresh_interval: usize,
    pub seed: u64,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub semantic_heads: usize,
    pub dropout: f64,
    pub patience: usize,
    pub ffn_hidden: usize,
    pub max_degree: usize,
    pub max_spd: usize,
    pub combine: Combine,
    /// `None` draws as many negatives as the node has neighbors, capped.
    pub negatives_per_node: Option<usize>,
    pub node_cap: usize,
    pub max_context: usize,
    pub atom_layers: usize,
    pub strict_index: bool,
}

/// Every accepted key, in the order the resolved config is printed.
pub const KEYS: [&str; 33] = [
    "task",
    "data",
    "out_dir",
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "beta1",
    "beta2",
    "eps",
    "tau",
    "lambda",
    "alpha",
    "k",
    "candidate_count",
    "refresh_interval",
    "seed",
    "layers",
    "hidden",
    "heads",
    "semantic_heads",
    "dropout",
    "patience",
    "ffn_hidden",
    "max_degree",
    "max_spd",
    "combine",
    "negatives_per_node",
    "node_cap",
    "max_context",
    "atom_layers",
    "strict_index",
    "threads",
];

impl TrainConfig {
    /// Defaults for a task: full-batch Adam for node classification,
    /// Adamax with 256-query batches and a 10-epoch index refresh for KG
    /// completion, and Adam without the fetching loss for whole-graph
    /// regression.
    pub fn for_task(task: Task) -> Self {
        let mut c = TrainConfig {
            task,
            data: None,
            out_dir: None,
            epochs: 100,
            batch_size: BatchSize::Fixed(256),
            learning_rate: 0.005,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            tau: 0.15,
            lambda: 1.0,
            alpha: 1.0,
            k: 16,
            candidate_count: 1024,
            refresh_interval: 1,
            seed: 0,
            layers: 2,
            hidden: 32,
            heads: 4,
            semantic_heads: 1,
            dropout: 0.0,
            patience: 20,
            ffn_hidden: 64,
            max_degree: 64,
            max_spd: 8,
            combine: Combine::LayerWise,
            negatives_per_node: None,
            node_cap: 256,
            max_context: 128,
            atom_layers: 1,
            strict_index: false,
        };
        match task {
            Task::NodeClassification => c.batch_size = BatchSize::Full,
            Task::KgCompletion => {
                c.optimizer = OptimizerKind::Adamax;
                c.learning_rate = 0.01;
                c.refresh_interval = 10;
            }
            Task::GraphRegression => c.alpha = 0.0,
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("beta1 and beta2 must lie in [0, 1) and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a finite non-negative number");
        }
        if self.task == Task::GraphRegression && self.alpha != 0.0 {
            return bad("whole-graph regression runs without the fetching loss; set alpha = 0");
        }
        if self.epochs == 0 || self.refresh_interval == 0 || self.k == 0 || self.candidate_count == 0 {
            return bad("epochs, refresh_interval, k and candidate_count must be at least 1");
        }
        if self.batch_size == BatchSize::Fixed(0) || self.negatives_per_node == Some(0) {
            return bad("batch_size and negatives_per_node must be at least 1");
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Model shape for this configuration over `dataset`.
    pub fn model_config(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let mismatch = || Error::Mode(format!("task {} cannot run on a {} dataset", self.task, dataset.kind()));
        let (head, input, relation_count) = match (self.task, dataset) {
            (Task::NodeClassification, Dataset::Nodes(ds)) => {
                let head = match ds.graph.labels() {
                    Some(Labels::Single { classes, .. }) => HeadKind::Classification { classes: *classes, multi_label: false },
                    Some(Labels::Multi { classes, .. }) => HeadKind::Classification { classes: *classes, multi_label: true },
                    None => return Err(Error::Integrity("node dataset has no labels".into())),
                };
                let input = match ds.graph.features() {
                    Some(f) => InputKind::Features { dim: f.cols() },
                    None => InputKind::Embedding { count: ds.graph.node_count() },
                };
                (head, input, 0)
            }
            (Task::KgCompletion, Dataset::Kg(ds)) => (
                HeadKind::Entity,
                InputKind::Embedding { count: ds.entities.len() },
                ds.kg.total_relations(),
            ),
            (Task::GraphRegression, Dataset::Graphs(_)) => (HeadKind::Regression, InputKind::Token, 0),
            _ => return Err(mismatch()),
        };
        let mut m = ModelConfig::new(self.task.mode(), head, input);
        m.relation_count = relation_count;
        m.layers = self.layers;
        m.hidden = self.hidden;
        m.heads = self.heads;
        m.semantic_heads = self.semantic_heads;
        m.ffn_hidden = self.ffn_hidden;
        m.max_degree = self.max_degree;
        m.max_spd = self.max_spd;
        m.atom_layers = self.atom_layers;
        m.tau = self.tau;
        m.lambda = self.lambda;
        m.combine = self.combine;
        m.node_cap = self.node_cap;
        m.max_context = self.max_context;
        m.validate()?;
        Ok(m)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` has bad value `{value}`")))
        }
        match key {
            "task" => {
                let t: Task = value.parse()?;
                if t != self.task {
                    return Err(Error::Config("`task` may only be given once".into()));
                }
            }
            "data" => self.data = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => {
                self.batch_size = if value == "full" { BatchSize::Full } else { BatchSize::Fixed(p(key, value)?) }
            }
            "learning_rate" => self.learning_rate = p(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "eps" => self.eps = p(key, value)?,
            "tau" => self.tau = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "alpha" => self.alpha = p(key, value)?,
            "k" => self.k = p(key, value)?,
            "candidate_count" => self.candidate_count = p(key, value)?,
            "refresh_interval" => self.refresh_interval = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "layers" => self.layers = p(key, value)?,
            "hidden" => self.hidden = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "semantic_heads" => self.semantic_heads = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "patience" => self.patience = p(key, value)?,
            "ffn_hidden" => self.ffn_hidden = p(key, value)?,
            "max_degree" => self.max_degree = p(key, value)?,
            "max_spd" => self.max_spd = p(key, value)?,
            "combine" => self.combine = value.parse()?,
            "negatives_per_node" => {
                self.negatives_per_node = if value == "auto" { None } else { Some(p(key, value)?) }
            }
            "node_cap" => self.node_cap = p(key, value)?,
            "max_context" => self.max_context = p(key, value)?,
            "atom_layers" => self.atom_layers = p(key, value)?,
            "strict_index" => self.strict_index = p(key, value)?,
            // worker count is a process setting; accepted so configs can carry it
            "threads" => {
                p::<usize>(key, value)?;
            }
            other => return Err(Error::Config(format!("unknown key `{other}`; accepted keys: {}", KEYS.join(", ")))),
        }
        Ok(())
    }

    /// Parses `key = value` lines. `#` starts a comment line; `task` is
    /// required and selects the defaults the other keys override.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if pairs.iter().any(|(seen, _): &(&str, &str)| *seen == k) {
                return Err(Error::Config(format!("line {}: `{k}` set twice", i + 1)));
            }
            pairs.push((k, v));
        }
        let task = pairs
            .iter()
            .find(|(k, _)| *k == "task")
            .ok_or_else(|| Error::Config("missing required key `task`".into()))?
            .1
            .parse()?;
        let mut cfg = TrainConfig::for_task(task);
        for (k, v) in pairs {
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every setting, defaults included, as `key = value` lines.
    pub fn to_text(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines = vec![format!("task = {}", self.task)];
        if let Some(d) = opt_path(&self.data) {
            lines.push(format!("data = {d}"));
        }
        if let Some(o) = opt_path(&self.out_dir) {
            lines.push(format!("out_dir = {o}"));
        }
        let batch = match self.batch_size {
            BatchSize::Full => "full".to_string(),
            BatchSize::Fixed(b) => b.to_string(),
        };
        let negatives = self.negatives_per_node.map_or("auto".to_string(), |n| n.to_string());
        let rest: Vec<(&str, String)> = vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", batch),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("optimizer", self.optimizer.to_string()),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("eps", format!("{:?}", self.eps)),
            ("tau", format!("{:?}", self.tau)),
            ("lambda", format!("{:?}", self.lambda)),
            ("alpha", format!("{:?}", self.alpha)),
            ("k", self.k.to_string()),
            ("candidate_count", self.candidate_count.to_string()),
            ("refresh_interval", self.refresh_interval.to_string()),
            ("seed", self.seed.to_string()),
            ("layers", self.layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("semantic_heads", self.semantic_heads.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("patience", self.patience.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("max_degree", self.max_degree.to_string()),
            ("max_spd", self.max_spd.to_string()),
            ("combine", self.combine.to_string()),
            ("negatives_per_node", negatives),
            ("node_cap", self.node_cap.to_string()),
            ("max_context", self.max_context.to_string()),
            ("atom_layers", self.atom_layers.to_string()),
            ("strict_index", self.strict_index.to_string()),
        ];
        lines.extend(rest.into_iter().map(|(k, v)| format!("{k} = {v}")));
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print_round_trip() {
        let text = "# run\ntask = kg-completion\ndata = bundles/kg\nepochs = 5\nbatch_size = full\ntau = 0.3\nnegatives_per_node = 4\n";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.optimizer, OptimizerKind::Adamax);
        assert_eq!(cfg.refresh_interval, 10);
        assert_eq!(cfg.batch_size, BatchSize::Full);
        assert_eq!(cfg.negatives_per_node, Some(4));
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("epochs = 3\n").is_err(), "missing task");
        assert!(TrainConfig::parse("task = node-classification\nlearning_rat = 0.1\n").is_err());
        assert!(TrainConfig::parse("task = node-classification\nepochs = three\n").is_err());
        assert!(TrainConfig::parse("task = node-classification\nepochs = 3\nepochs = 4\n").is_err());
        assert!(TrainConfig::parse("task = graph-regression\nalpha = 1\n").is_err());
        assert!(TrainConfig::parse("task = node-classification\nrefresh_interval = 0\n").is_err());
        assert!(TrainConfig::parse("task = node-classification\nno equals sign\n").is_err());
    }
}
