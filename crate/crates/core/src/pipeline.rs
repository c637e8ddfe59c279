//! End-to-end runs: train from a config, evaluate or inspect a checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{Task, TrainConfig};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::io::{load_dataset, resolve_data_path};
use crate::model::{DetModel, ModelConfig};
use crate::semantic::SemanticNeighborIndex;
use crate::train::{self, MetricMap, TrainOutcome};

pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.resolved";
pub const INDEX_FILE: &str = "neighbors.tsv";

pub fn load_data(path: &Path, root: Option<&Path>) -> Result<Dataset> {
    load_dataset(&resolve_data_path(path, root))
}

pub fn build_model(config: &TrainConfig, dataset: &Dataset) -> Result<DetModel> {
    DetModel::new(config.model_config(dataset)?, config.seed)
}

/// Loads the configured data, trains, and writes artifacts when `out_dir`
/// is set.
pub fn run_train(config: &TrainConfig, root: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    log::info!("resolved config:\n{}", config.to_text());
    let data = config.data.as_ref().ok_or_else(|| Error::Config("`data` is required to train".into()))?;
    let dataset = load_data(data, root)?;
    let model = build_model(config, &dataset)?;
    let outcome = train::train(config, &dataset, model)?;
    if let Some(dir) = &config.out_dir {
        write_artifacts(config, &outcome, dir)?;
    }
    Ok(outcome)
}

/// Run metadata stored next to the model manifest.
pub fn checkpoint_extras(config: &TrainConfig, outcome: &TrainOutcome) -> Vec<(String, String)> {
    let mut extras = vec![
        ("task".to_string(), config.task.to_string()),
        ("seed".to_string(), config.seed.to_string()),
        ("k".to_string(), config.k.to_string()),
        ("candidate_count".to_string(), config.candidate_count.to_string()),
        ("index_epoch".to_string(), outcome.index.epoch().to_string()),
        ("best_epoch".to_string(), outcome.best_epoch.to_string()),
    ];
    if let Some(d) = &config.data {
        extras.push(("data".to_string(), d.display().to_string()));
    }
    extras
}

pub fn write_artifacts(config: &TrainConfig, outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_text())?;
    fs::write(dir.join(METRICS_FILE), outcome.report.to_csv())?;
    fs::write(dir.join(STEPS_FILE), outcome.step_log_csv())?;
    fs::write(dir.join(TIMING_FILE), outcome.timing_csv())?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &outcome.model, &checkpoint_extras(config, outcome))?;
    if outcome.index.node_count() > 0 {
        outcome.index.write_tsv(fs::File::create(dir.join(INDEX_FILE))?)?;
    }
    Ok(())
}

/// A checkpoint together with the data it is evaluated on.
pub struct Loaded {
    pub model: DetModel,
    pub checkpoint: Checkpoint,
    pub task: Task,
    pub dataset: Dataset,
    pub index: SemanticNeighborIndex,
}

fn extra<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    ckpt.get(key)
        .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{key}`")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("manifest `{key}` is malformed")))
}

fn settings_of(task: Task, m: &ModelConfig) -> TrainConfig {
    let mut c = TrainConfig::for_task(task);
    c.layers = m.layers;
    c.hidden = m.hidden;
    c.heads = m.heads;
    c.semantic_heads = m.semantic_heads;
    c.ffn_hidden = m.ffn_hidden;
    c.max_degree = m.max_degree;
    c.max_spd = m.max_spd;
    c.atom_layers = m.atom_layers;
    c.tau = m.tau;
    c.lambda = m.lambda;
    c.combine = m.combine;
    c.node_cap = m.node_cap;
    c.max_context = m.max_context;
    c
}

/// Loads a checkpoint and its data (`data` overrides the recorded path),
/// checks that the data matches the stored vocabulary sizes, and rebuilds
/// the semantic index the model was last trained with.
pub fn load_run(ckpt_path: &Path, data: Option<&Path>, root: Option<&Path>) -> Result<Loaded> {
    let (model, checkpoint) = checkpoint::load(ckpt_path)?;
    let task: Task = extra(&checkpoint, "task")?;
    let data: PathBuf = match data {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(
            checkpoint
                .get("data")
                .ok_or_else(|| Error::Config("checkpoint records no data path; pass one".into()))?,
        ),
    };
    let dataset = load_data(&data, root)?;
    let mut settings = settings_of(task, &model.config);
    let expected = settings.model_config(&dataset)?;
    if expected != model.config {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {:?} / {:?} with {} relations, data provides {:?} / {:?} with {}",
            model.config.head,
            model.config.input,
            model.config.relation_count,
            expected.head,
            expected.input,
            expected.relation_count
        )));
    }
    settings.seed = extra(&checkpoint, "seed")?;
    settings.k = extra(&checkpoint, "k")?;
    settings.candidate_count = extra(&checkpoint, "candidate_count")?;
    let index_epoch: usize = extra(&checkpoint, "index_epoch")?;
    let index = train::build_index(&settings, &model, &dataset, index_epoch)?;
    Ok(Loaded { model, checkpoint, task, dataset, index })
}

pub fn run_eval(ckpt_path: &Path, data: Option<&Path>, root: Option<&Path>, split: Split) -> Result<MetricMap> {
    let run = load_run(ckpt_path, data, root)?;
    train::evaluate(&run.model, &run.dataset, split, &run.index)
}

/// Semantic neighbors of `node` with their `f_s` scores, best first.
pub fn run_neighbors(
    ckpt_path: &Path,
    data: Option<&Path>,
    root: Option<&Path>,
    node: NodeId,
) -> Result<Vec<(NodeId, f64)>> {
    let run = load_run(ckpt_path, data, root)?;
    if run.index.node_count() == 0 {
        return Err(Error::Mode(format!("{} runs keep no semantic neighbor index", run.task)));
    }
    if node >= run.index.node_count() {
        return Err(Error::InvalidNode { node, count: run.index.node_count() });
    }
    Ok(run.index.neighbors(node).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_dataset;
    use crate::synth::{generate_synthetic, SynthKind, SynthParams};

    #[test]
    fn train_then_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let params = SynthParams::new().with("nodes", 40).with("clusters", 2).with("feature_dim", 4);
        write_dataset(&data, &generate_synthetic(SynthKind::PlantedCluster, &params, 2).unwrap()).unwrap();
        let out = dir.path().join("run");
        let text = format!(
            "task = node-classification\ndata = {}\nout_dir = {}\nepochs = 2\nhidden = 8\nheads = 2\nffn_hidden = 8\nlayers = 1\nk = 4\n",
            data.display(),
            out.display()
        );
        let cfg = TrainConfig::parse(&text).unwrap();
        let outcome = run_train(&cfg, None).unwrap();
        for f in [METRICS_FILE, STEPS_FILE, TIMING_FILE, CHECKPOINT_FILE, CONFIG_FILE, INDEX_FILE] {
            assert!(out.join(f).exists(), "{f}");
        }
        let metrics = run_eval(&out.join(CHECKPOINT_FILE), None, None, Split::Valid).unwrap();
        assert_eq!(metrics[0].0, "accuracy");
        let trained = outcome.report.value(outcome.best_epoch, Split::Valid, "accuracy").unwrap();
        // parameters come back rounded to f32
        assert!((metrics[0].1 - trained).abs() <= 0.1);
        let neighbors = run_neighbors(&out.join(CHECKPOINT_FILE), None, None, 0).unwrap();
        assert_eq!(neighbors.len(), 4);
        assert!(run_neighbors(&out.join(CHECKPOINT_FILE), None, None, 40).is_err());
    }
}
