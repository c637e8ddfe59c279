//! Training loop, task losses and evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{BatchSize, Task, TrainConfig};
use crate::dataset::{Dataset, KgDataset, Split};
use crate::encoders::Dropout;
use crate::error::{Error, Result};
use crate::graph::{Graph, Labels, NodeId};
use crate::metrics::{self, RankMetrics};
use crate::model::{DetModel, HeadKind};
use crate::optim::{Optimizer, ParamGrads};
use crate::seed;
use crate::semantic::{batch_fetching_loss, refresh_index, SemanticNeighborIndex};

/// Samples per tape. Gradients are reduced in chunk order, so results do not
/// depend on the worker count.
pub const CHUNK: usize = 8;

pub type MetricMap = Vec<(String, f64)>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// 1-based count of optimizer steps so far.
    pub step: usize,
    pub main: f64,
    pub fetching: f64,
    pub total: f64,
}

/// What an observer sees right before an optimizer step.
pub struct StepView<'a> {
    pub record: &'a StepRecord,
    pub grads: &'a ParamGrads,
    pub model: &'a DetModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: Split,
    pub metric: String,
    pub value: f64,
}

/// Append-only metric table for one seeded run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    seed: u64,
    rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(seed: u64) -> Self {
        MetricReport { seed, rows: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn push(&mut self, epoch: usize, split: Split, metric: &str, value: f64) {
        self.rows.push(MetricRow { epoch, split, metric: metric.to_string(), value });
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn value(&self, epoch: usize, split: Split, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch && r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    /// `(epoch, value)` for one split and metric, in order.
    pub fn series(&self, split: Split, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,epoch,split,metric,value\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{:?}", self.seed, r.epoch, r.split, r.metric, r.value).expect("string write");
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: DetModel,
    pub report: MetricReport,
    /// Index that belongs to the restored parameters.
    pub index: SemanticNeighborIndex,
    /// Epoch (1-based) of the restored snapshot.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: u64,
    pub step_log: Vec<StepRecord>,
    /// Wall-clock seconds per epoch. Kept apart from the report, which is
    /// deterministic.
    pub epoch_seconds: Vec<f64>,
}

impl TrainOutcome {
    pub fn step_log_csv(&self) -> String {
        let seed = self.report.seed();
        let mut out = String::from("seed,epoch,step,main,fetching,total\n");
        for r in &self.step_log {
            writeln!(out, "{seed},{},{},{:?},{:?},{:?}", r.epoch, r.step, r.main, r.fetching, r.total)
                .expect("string write");
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let seed = self.report.seed();
        let mut out = String::from("seed,epoch,seconds\n");
        for (i, s) in self.epoch_seconds.iter().enumerate() {
            writeln!(out, "{seed},{},{s:.6}", i + 1).expect("string write");
        }
        out
    }
}

/// Name of the model-selection metric and whether larger is better.
pub fn primary_metric(dataset: &Dataset) -> (&'static str, bool) {
    match dataset {
        Dataset::Graphs(_) => ("mae", false),
        Dataset::Kg(_) => ("mrr", true),
        Dataset::Nodes(ds) => match ds.graph.labels() {
            Some(Labels::Multi { .. }) => ("micro_f1", true),
            _ => ("accuracy", true),
        },
    }
}

/// One supervised example.
#[derive(Clone, Copy, Debug)]
enum Item {
    Node(NodeId),
    /// `(head, relation, ?)` with answer `target`; the answering fact is
    /// hidden from the head's context.
    Query { head: NodeId, relation: usize, target: NodeId },
    Graph(usize),
}

fn task_of(dataset: &Dataset) -> Task {
    match dataset {
        Dataset::Nodes(_) => Task::NodeClassification,
        Dataset::Kg(_) => Task::KgCompletion,
        Dataset::Graphs(_) => Task::GraphRegression,
    }
}

fn check_pairing(model: &DetModel, dataset: &Dataset) -> Result<()> {
    let task = task_of(dataset);
    if model.config.mode != task.mode() {
        return Err(Error::Mode(format!(
            "a {} model cannot run the {task} task on a {} dataset",
            model.config.mode,
            dataset.kind()
        )));
    }
    Ok(())
}

fn query_items(ds: &KgDataset, split: Split) -> Vec<Item> {
    ds.triples(split)
        .iter()
        .flat_map(|t| {
            [
                Item::Query { head: t.head, relation: t.relation, target: t.tail },
                Item::Query { head: t.tail, relation: ds.kg.inverse(t.relation), target: t.head },
            ]
        })
        .collect()
}

fn train_items(dataset: &Dataset) -> Vec<Item> {
    match dataset {
        Dataset::Nodes(ds) => ds.splits.train.iter().map(|&v| Item::Node(v)).collect(),
        Dataset::Kg(ds) => query_items(ds, Split::Train),
        Dataset::Graphs(ds) => ds.splits.train.iter().map(|&i| Item::Graph(i)).collect(),
    }
}

/// Graph the semantic index and fetching loss live on, if any.
fn semantic_graph(dataset: &Dataset) -> Option<&Graph> {
    match dataset {
        Dataset::Nodes(ds) => Some(&ds.graph),
        Dataset::Kg(ds) => Some(&ds.kg.graph),
        Dataset::Graphs(_) => None,
    }
}

/// Unscaled main loss of one example as a `1 × 1` value.
fn item_loss<'t>(
    tape: &'t Tape,
    model: &DetModel,
    dataset: &Dataset,
    item: Item,
    index: &SemanticNeighborIndex,
    dropout: Option<&Dropout>,
) -> Result<Var<'t>> {
    match (item, dataset) {
        (Item::Node(v), Dataset::Nodes(ds)) => {
            let out = model.forward_node(tape, &ds.graph, v, index, dropout)?;
            let logits = model.predict(tape, &out.h)?;
            match ds.graph.labels() {
                Some(Labels::Single { values, .. }) => logits.log_softmax()?.pick_per_row(&[values[v]])?.scale(-1.0),
                Some(Labels::Multi { bits, .. }) => {
                    let y: Vec<f64> = bits[v].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                    let y = tape.constant(Tensor::row_vector(y));
                    logits.softplus()?.sub(&logits.mul(&y)?)?.mean()
                }
                None => Err(Error::Integrity("node dataset has no labels".into())),
            }
        }
        (Item::Query { head, relation, target }, Dataset::Kg(ds)) => {
            let out = model.forward_query(tape, &ds.kg, head, relation, Some((relation, target)), index, dropout)?;
            model.predict(tape, &out.h)?.log_softmax()?.pick_per_row(&[target])?.scale(-1.0)
        }
        (Item::Graph(i), Dataset::Graphs(ds)) => {
            let sample = &ds.graphs[i];
            let out = model.forward_graph(tape, &sample.graph, dropout)?;
            model
                .predict(tape, &out.h)?
                .sub(&tape.constant(Tensor::scalar(sample.target)))?
                .abs()
        }
        _ => unreachable!("items are built from the same dataset"),
    }
}

/// Centers whose one-hop neighbors are the fetching-loss positives.
fn fetch_centers(items: &[Item]) -> Vec<NodeId> {
    items
        .iter()
        .filter_map(|item| match *item {
            Item::Node(v) => Some(v),
            Item::Query { head, .. } => Some(head),
            Item::Graph(_) => None,
        })
        .collect()
}

struct StepResult {
    main: f64,
    fetching: f64,
    grads: ParamGrads,
}

/// Forward and backward for one batch: main loss averaged over the batch
/// plus `α ·` the fetching loss on the batch centers.
fn batch_gradients(
    config: &TrainConfig,
    model: &DetModel,
    dataset: &Dataset,
    batch: &[Item],
    index: &SemanticNeighborIndex,
    epoch: usize,
    step: usize,
) -> Result<StepResult> {
    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<Result<(f64, ParamGrads)>> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let tape = Tape::new();
            let dropout = (config.dropout > 0.0).then(|| {
                Dropout::new(
                    config.dropout,
                    seed::derive_seed(config.seed, &[0xd0, epoch as u64, step as u64, c as u64]),
                )
            });
            let losses = chunk
                .iter()
                .map(|&item| item_loss(&tape, model, dataset, item, index, dropout.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let loss = Var::concat_rows(&losses)?.sum()?.scale(scale)?;
            let value = loss.value().item()?;
            let mut grads = ParamGrads::new(&model.params);
            grads.accumulate(&tape.backward(loss)?, 1.0);
            Ok((value, grads))
        })
        .collect();
    let mut main = 0.0;
    let mut grads = ParamGrads::new(&model.params);
    for chunk in chunks {
        let (value, g) = chunk?;
        main += value;
        grads.merge(g);
    }

    let mut fetching = 0.0;
    if config.alpha > 0.0 {
        if let Some(g) = semantic_graph(dataset) {
            let tape = Tape::new();
            let mut rng = seed::stream(config.seed, &[0x5a, epoch as u64, step as u64]);
            let loss = batch_fetching_loss(&tape, model, g, &fetch_centers(batch), config.negatives_per_node, &mut rng)?;
            fetching = loss.value().item()?;
            if loss.requires_grad() {
                grads.accumulate(&tape.backward(loss)?, config.alpha);
            }
        }
    }
    Ok(StepResult { main, fetching, grads })
}

fn placeholder_index(dataset: &Dataset, config: &TrainConfig) -> SemanticNeighborIndex {
    SemanticNeighborIndex::empty(semantic_graph(dataset).map_or(0, Graph::node_count), config.k, 0)
}

/// Rebuilds the semantic index for `epoch` (0-based) if the dataset has one.
pub fn build_index(
    config: &TrainConfig,
    model: &DetModel,
    dataset: &Dataset,
    epoch: usize,
) -> Result<SemanticNeighborIndex> {
    match semantic_graph(dataset) {
        Some(g) => refresh_index(model, g, config.k, config.candidate_count, config.seed, epoch),
        None => Ok(placeholder_index(dataset, config)),
    }
}

pub fn train(config: &TrainConfig, dataset: &Dataset, model: DetModel) -> Result<TrainOutcome> {
    train_with(config, dataset, model, &mut |_| {})
}

/// Runs the training loop. The index is rebuilt whenever the 0-based epoch
/// is a multiple of `refresh_interval`; the model and index with the best
/// validation score are restored at the end, and test metrics are reported
/// for them under the best epoch.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    mut model: DetModel,
    observer: &mut dyn FnMut(&StepView),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_pairing(&model, dataset)?;
    if task_of(dataset) != config.task {
        return Err(Error::Mode(format!("config task {} does not match a {} dataset", config.task, dataset.kind())));
    }
    let items = train_items(dataset);
    if items.is_empty() {
        return Err(Error::Integrity("training split is empty".into()));
    }
    let batch_size = match config.batch_size {
        BatchSize::Full => items.len(),
        BatchSize::Fixed(b) => b,
    };
    let (primary, maximize) = primary_metric(dataset);
    let mut optimizer = Optimizer::new(config.optimizer_config(), &model.params);
    let mut report = MetricReport::new(config.seed);
    let mut step_log = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut index = placeholder_index(dataset, config);
    let mut best: Option<(f64, usize, crate::autodiff::ParamStore, SemanticNeighborIndex)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        if semantic_graph(dataset).is_some() {
            if epoch % config.refresh_interval == 0 {
                index = build_index(config, &model, dataset, epoch)?;
            }
            index.ensure_fresh(epoch, config.refresh_interval, config.strict_index)?;
        }
        let mut order = items.clone();
        order.shuffle(&mut seed::stream(config.seed, &[0x5b, epoch as u64]));

        let (mut sum_main, mut sum_fetch, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(batch_size) {
            let step = optimizer.steps() as usize + 1;
            let result = batch_gradients(config, &model, dataset, batch, &index, epoch, step)?;
            let record = StepRecord {
                epoch: epoch + 1,
                step,
                main: result.main,
                fetching: result.fetching,
                total: result.main + config.alpha * result.fetching,
            };
            if !record.total.is_finite() || !result.grads.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    step,
                    detail: format!(
                        "main loss {:?}, fetching loss {:?}, gradients finite: {}",
                        record.main,
                        record.fetching,
                        result.grads.is_finite()
                    ),
                });
            }
            observer(&StepView { record: &record, grads: &result.grads, model: &model });
            optimizer.step(&mut model.params, &result.grads)?;
            step_log.push(record);
            sum_main += record.main;
            sum_fetch += record.fetching;
            batches += 1;
        }
        epochs_run = epoch + 1;
        let n = batches as f64;
        report.push(epoch + 1, Split::Train, "loss", (sum_main + config.alpha * sum_fetch) / n);
        report.push(epoch + 1, Split::Train, "loss_main", sum_main / n);
        report.push(epoch + 1, Split::Train, "loss_fetch", sum_fetch / n);

        let metrics = evaluate(&model, dataset, Split::Valid, &index)?;
        for (name, value) in &metrics {
            report.push(epoch + 1, Split::Valid, name, *value);
        }
        epoch_seconds.push(started.elapsed().as_secs_f64());

        let score = metrics.iter().find(|(n, _)| n == primary).map(|(_, v)| *v);
        let Some(score) = score else { continue };
        let improved = match &best {
            None => true,
            Some((b, ..)) => {
                if maximize {
                    score > *b
                } else {
                    score < *b
                }
            }
        };
        if improved {
            best = Some((score, epoch + 1, model.params.clone(), index.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::info!("early stop after epoch {}: no {primary} gain for {since_best} epochs", epoch + 1);
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, e, params, best_index)) => {
            model.params = params;
            index = best_index;
            e
        }
        None => epochs_run,
    };
    if !split_is_empty(dataset, Split::Test) {
        for (name, value) in evaluate(&model, dataset, Split::Test, &index)? {
            report.push(best_epoch, Split::Test, &name, value);
        }
    }
    Ok(TrainOutcome {
        model,
        report,
        index,
        best_epoch,
        epochs_run,
        steps: optimizer.steps(),
        step_log,
        epoch_seconds,
    })
}

fn split_is_empty(dataset: &Dataset, split: Split) -> bool {
    match dataset {
        Dataset::Nodes(ds) => ds.splits.get(split).is_empty(),
        Dataset::Kg(ds) => ds.triples(split).is_empty(),
        Dataset::Graphs(ds) => ds.splits.get(split).is_empty(),
    }
}

/// Inference-mode metrics on one split. An empty split yields no metrics.
pub fn evaluate(
    model: &DetModel,
    dataset: &Dataset,
    split: Split,
    index: &SemanticNeighborIndex,
) -> Result<MetricMap> {
    check_pairing(model, dataset)?;
    if split_is_empty(dataset, split) {
        return Ok(Vec::new());
    }
    match dataset {
        Dataset::Graphs(ds) => {
            let ids = ds.splits.get(split);
            let predictions = ids
                .par_iter()
                .map(|&i| {
                    let tape = Tape::new();
                    let out = model.forward_graph(&tape, &ds.graphs[i].graph, None)?;
                    model.predict(&tape, &out.h)?.value().item()
                })
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<f64> = ids.iter().map(|&i| ds.graphs[i].target).collect();
            Ok(vec![("mae".into(), metrics::mae(&predictions, &targets)?)])
        }
        Dataset::Nodes(ds) => {
            let nodes = ds.splits.get(split);
            let logits = nodes
                .par_iter()
                .map(|&v| {
                    let tape = Tape::new();
                    let out = model.forward_node(&tape, &ds.graph, v, index, None)?;
                    Ok(model.predict(&tape, &out.h)?.value().data().to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            match ds.graph.labels() {
                Some(Labels::Single { values, .. }) => {
                    let predicted: Vec<usize> = logits.iter().map(|z| metrics::argmax(z)).collect();
                    let truth: Vec<usize> = nodes.iter().map(|&v| values[v]).collect();
                    Ok(vec![("accuracy".into(), metrics::accuracy(&predicted, &truth)?)])
                }
                Some(Labels::Multi { bits, .. }) => {
                    let predicted: Vec<Vec<bool>> = logits.iter().map(|z| z.iter().map(|&x| x > 0.0).collect()).collect();
                    let truth: Vec<Vec<bool>> = nodes.iter().map(|&v| bits[v].clone()).collect();
                    Ok(vec![("micro_f1".into(), metrics::micro_f1(&predicted, &truth)?)])
                }
                None => Err(Error::Integrity("node dataset has no labels".into())),
            }
        }
        Dataset::Kg(ds) => {
            let ranks = kg_ranks(model, ds, split, index)?;
            Ok(ranks.named().into_iter().map(|(n, v)| (n.to_string(), v)).collect())
        }
    }
}

/// Filtered rank metrics over head and tail prediction. Every other true
/// triple in any split is filtered. Fails if a filtered rank exceeds its
/// raw rank or the summary breaks the Hits ordering.
pub fn kg_ranks(
    model: &DetModel,
    ds: &KgDataset,
    split: Split,
    index: &SemanticNeighborIndex,
) -> Result<RankMetrics> {
    if !matches!(model.config.head, HeadKind::Entity) {
        return Err(Error::Mode("kg ranking needs an entity head".into()));
    }
    let mut known: HashSet<(NodeId, usize, NodeId)> = HashSet::new();
    for split in Split::ALL {
        for t in ds.triples(split) {
            known.insert((t.head, t.relation, t.tail));
            known.insert((t.tail, ds.kg.inverse(t.relation), t.head));
        }
    }
    let queries = query_items(ds, split);
    let ranks = queries
        .par_iter()
        .map(|item| {
            let Item::Query { head, relation, target } = *item else { unreachable!("query items") };
            let scores = model.score_entities(&ds.kg, head, relation, index)?;
            let (raw, filtered) = metrics::ranks(&scores, target, |e| known.contains(&(head, relation, e)));
            if filtered > raw {
                return Err(Error::Contract(format!("filtered rank {filtered} exceeds raw rank {raw}")));
            }
            Ok(filtered)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = RankMetrics::from_ranks(&ranks)?;
    if !summary.is_consistent() {
        return Err(Error::Contract(format!("inconsistent rank summary {summary:?}")));
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::dataset::{GraphSample, GraphSetDataset, Splits};
    use crate::graph::Triple;

    fn tiny_regression() -> Dataset {
        let graphs = (0..4)
            .map(|i| GraphSample {
                graph: Graph::undirected(3 + i, &(0..2 + i).map(|j| (j, j + 1)).collect::<Vec<_>>()).unwrap(),
                target: i as f64,
            })
            .collect();
        Dataset::Graphs(GraphSetDataset { graphs, splits: Splits { train: vec![0, 1], valid: vec![2], test: vec![3] } })
    }

    fn small_config() -> TrainConfig {
        let mut c = TrainConfig::for_task(Task::GraphRegression);
        c.hidden = 8;
        c.heads = 2;
        c.ffn_hidden = 8;
        c.layers = 1;
        c.epochs = 1;
        c
    }

    #[test]
    fn one_batch_is_one_step() {
        let ds = tiny_regression();
        let cfg = small_config();
        let model = DetModel::new(cfg.model_config(&ds).unwrap(), 1).unwrap();
        let out = train(&cfg, &ds, model).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.step_log.len(), 1);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = tiny_regression();
        let mut cfg = small_config();
        cfg.learning_rate = 0.0;
        cfg.epochs = 3;
        cfg.batch_size = BatchSize::Fixed(1);
        let model = DetModel::new(cfg.model_config(&ds).unwrap(), 1).unwrap();
        let before = model.params.clone();
        let out = train(&cfg, &ds, model).unwrap();
        assert_eq!(out.steps, 6);
        assert_eq!(out.model.params, before);
    }

    #[test]
    fn task_dataset_mismatch() {
        let ds = tiny_regression();
        let cfg = small_config();
        let model = DetModel::new(cfg.model_config(&ds).unwrap(), 1).unwrap();
        let kg = KgDataset::new(
            vec!["a".into(), "b".into()],
            vec!["r".into()],
            vec![Triple::new(0, 0, 1)],
            vec![],
            vec![],
        )
        .unwrap();
        let kg = Dataset::Kg(kg);
        assert!(matches!(evaluate(&model, &kg, Split::Valid, &placeholder_index(&kg, &cfg)), Err(Error::Mode(_))));
    }

    #[test]
    fn report_csv_layout() {
        let mut r = MetricReport::new(9);
        r.push(1, Split::Valid, "mae", 0.5);
        assert_eq!(r.to_csv(), "seed,epoch,split,metric,value\n9,1,valid,mae,0.5\n");
        assert_eq!(r.series(Split::Valid, "mae"), vec![(1, 0.5)]);
    }
}
