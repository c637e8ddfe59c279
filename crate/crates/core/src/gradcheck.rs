//! Central finite-difference checks of every tape operation and of the
//! full dual-encoder loss.
//!
//! Each check reduces the output to a scalar through fixed random weights
//! and compares every input or parameter gradient elementwise. With a
//! nonzero λ the exchanged biases are recorded at the base point and
//! replayed during perturbation, matching their detached role.

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{max_relative_error, numeric_gradient, Mask, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, Labels, Triple};
use crate::dataset::KgDataset;
use crate::model::{DetModel, ExchangeLog, HeadKind, InputKind, Mode, ModelConfig};
use crate::semantic::{batch_fetching_loss, refresh_index, SemanticNeighborIndex};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding compare absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub values: usize,
    pub max_relative_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

/// Values with magnitude in `[0.2, 1]` and random sign, away from kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(0.2..1.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect(),
    )
    .expect("sized")
}

fn weighted<'t>(tape: &'t Tape, out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    out.mul(&tape.constant(weights.clone()))?.sum()
}

fn op_loss(inputs: &[Tensor], f: OpFn, weights: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    weighted(&tape, f(&tape, &vars)?, weights)?.value().item()
}

pub fn check_op(name: &str, inputs: Vec<Tensor>, f: OpFn, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let [r, c] = out.shape();
    let weights = random(rng, r, c, -1.0, 1.0);
    let grads = tape.backward(weighted(&tape, out, &weights)?)?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        let mut failure = None;
        let numeric = numeric_gradient(x, STEP, |p| {
            let mut probe = inputs.clone();
            probe[i] = p.clone();
            op_loss(&probe, f, &weights).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        });
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(max_relative_error(&analytic, &numeric, FLOOR));
    }
    Ok(CheckResult {
        name: name.to_string(),
        values: inputs.iter().map(Tensor::len).sum(),
        max_relative_error: worst,
    })
}

/// One check per tape operation.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, [$($input:expr),+ $(,)?], $f:expr) => {{
            let inputs = vec![$($input),+];
            out.push(check_op($name, inputs, $f, r)?);
        }};
    }
    let u = |r: &mut ChaCha8Rng, m, n| random(r, m, n, -1.0, 1.0);
    check!("matmul", [u(r, 3, 4), u(r, 4, 2)], |_, v| v[0].matmul(&v[1]));
    check!("matmul_t", [u(r, 3, 4), u(r, 2, 4)], |_, v| v[0].matmul_t(&v[1]));
    check!("transpose", [u(r, 3, 2)], |_, v| v[0].transpose());
    check!("add", [u(r, 3, 2), u(r, 3, 2)], |_, v| v[0].add(&v[1]));
    check!("add_scalar", [u(r, 3, 2), u(r, 1, 1)], |_, v| v[0].add(&v[1]));
    check!("add_row", [u(r, 3, 2), u(r, 1, 2)], |_, v| v[0].add(&v[1]));
    check!("sub", [u(r, 2, 3), u(r, 2, 3)], |_, v| v[0].sub(&v[1]));
    check!("mul", [u(r, 2, 3), u(r, 2, 3)], |_, v| v[0].mul(&v[1]));
    check!("scale", [u(r, 2, 3)], |_, v| v[0].scale(-1.7));
    check!("affine", [u(r, 3, 4), u(r, 4, 2), u(r, 1, 2)], |_, v| v[0].affine(&v[1], &v[2]));
    check!("sigmoid", [random(r, 2, 3, -3.0, 3.0)], |_, v| v[0].sigmoid());
    check!("relu", [away_from_zero(r, 3, 3)], |_, v| v[0].relu());
    check!("ln", [random(r, 2, 3, 0.3, 2.0)], |_, v| v[0].ln());
    check!("abs", [away_from_zero(r, 3, 3)], |_, v| v[0].abs());
    check!("softplus", [random(r, 2, 3, -3.0, 3.0)], |_, v| v[0].softplus());
    check!("clamp", [away_from_zero(r, 3, 3)], |_, v| v[0].clamp(-0.6, 0.6));
    check!("clamp_probability", [random(r, 2, 3, 0.05, 0.95)], |_, v| v[0].clamp_probability());
    check!("sum", [u(r, 2, 3)], |_, v| v[0].sum());
    check!("mean", [u(r, 2, 3)], |_, v| v[0].mean());
    check!("row_softmax", [u(r, 3, 4)], |_, v| v[0].row_softmax(None, None));
    check!("row_softmax_bias_mask", [u(r, 3, 4), u(r, 3, 4)], |_, v| {
        let mask = Mask::new(3, 4, vec![false, true, false, false, false, false, false, true, true, false, false, false])?;
        v[0].row_softmax(Some(&v[1]), Some(&mask))
    });
    check!("log_softmax", [random(r, 3, 4, -2.0, 2.0)], |_, v| v[0].log_softmax());
    check!("concat_rows", [u(r, 2, 3), u(r, 1, 3)], |_, v| Var::concat_rows(&[v[0], v[1]]));
    check!("concat_cols", [u(r, 2, 3), u(r, 2, 1)], |_, v| Var::concat_cols(&[v[0], v[1]]));
    check!("slice_cols", [u(r, 2, 4)], |_, v| v[0].slice_cols(1, 2));
    check!("gather_rows", [u(r, 3, 2)], |_, v| v[0].gather_rows(&[2, 0, 2, 1]));
    check!("embedding_lookup", [u(r, 4, 3)], |_, v| v[0].embedding_lookup(&[3, 3, 0]));
    check!("pick_per_row", [u(r, 3, 4)], |_, v| v[0].pick_per_row(&[1, 0, 3]));
    check!("layer_norm", [u(r, 3, 5), random(r, 1, 5, 0.5, 1.5), u(r, 1, 5)], |_, v| {
        v[0].layer_norm(&v[1], &v[2], crate::encoders::LAYER_NORM_EPS)
    });
    check!("outer_diff", [u(r, 4, 1)], |_, v| v[0].outer_diff());
    check!("gather_cols", [u(r, 3, 4)], |_, v| v[0].gather_cols(&[0, 3, 3, 1, 2, 0, 2, 2, 1], 3));
    check!("bucket_sum", [u(r, 2, 4)], |_, v| v[0].bucket_sum(&[0, 2, 2, 1, 1, 1, 0, 2], 3));
    Ok(out)
}

type ModelLoss = for<'t> fn(&'t Tape, &DetModel, &Fixture) -> Result<Var<'t>>;

/// Inputs a model loss closes over.
pub struct Fixture {
    pub graph: Graph,
    pub index: SemanticNeighborIndex,
    pub kg: Option<KgDataset>,
}

/// Checks every parameter gradient of `loss` against finite differences.
pub fn check_model(name: &str, model: &DetModel, fixture: &Fixture, loss: ModelLoss) -> Result<CheckResult> {
    let mut model = model.clone();
    let log = Arc::new(Mutex::new(ExchangeLog::default()));
    log.lock().expect("log lock").start_recording();
    model.set_exchange_log(Some(log.clone()));
    let tape = Tape::new();
    let grads = tape.backward(loss(&tape, &model, fixture)?)?;
    let recorded = log.lock().expect("log lock").clone();
    let ids: Vec<_> = model.params.ids().collect();
    let errors = ids
        .par_iter()
        .map(|&id| {
            let mut local = model.clone();
            let log = Arc::new(Mutex::new(recorded.clone()));
            local.set_exchange_log(Some(log.clone()));
            let base = local.params.get(id).clone();
            let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(base.rows(), base.cols()));
            let mut failure = None;
            let numeric = numeric_gradient(&base, STEP, |p| {
                local.params.set(id, p.clone()).expect("same shape");
                log.lock().expect("log lock").start_replay();
                let tape = Tape::new();
                match loss(&tape, &local, fixture).and_then(|l| l.value().item()) {
                    Ok(v) => v,
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            });
            match failure {
                Some(e) => Err(e),
                None => Ok(max_relative_error(&analytic, &numeric, FLOOR)),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(CheckResult {
        name: name.to_string(),
        values: model.params.total_values(),
        max_relative_error: errors.into_iter().fold(0.0, f64::max),
    })
}

fn small(mut c: ModelConfig, lambda: f64) -> ModelConfig {
    c.layers = 2;
    c.hidden = 8;
    c.heads = 2;
    c.semantic_heads = 2;
    c.ffn_hidden = 8;
    c.max_degree = 6;
    c.max_spd = 4;
    c.tau = 0.4;
    c.lambda = lambda;
    c
}

/// Ten-node graph: a cycle with two chords and two-class labels.
pub fn ten_node_graph(rng: &mut ChaCha8Rng) -> Result<Graph> {
    let mut edges: Vec<(usize, usize)> = (0..10).map(|i| (i, (i + 1) % 10)).collect();
    edges.extend([(0, 5), (2, 7)]);
    let features = random(rng, 10, 4, -1.0, 1.0);
    Graph::undirected(10, &edges)?
        .with_features(features)?
        .with_labels(Labels::Single { classes: 2, values: (0..10).map(|i| i % 2).collect() })
}

fn ego_loss<'t>(tape: &'t Tape, model: &DetModel, fx: &Fixture) -> Result<Var<'t>> {
    let nodes: Vec<usize> = (0..10).collect();
    let h = model.forward_nodes(tape, &fx.graph, &nodes, &fx.index, None)?;
    let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
    let main = model.predict(tape, &h)?.log_softmax()?.pick_per_row(&labels)?.mean()?.scale(-1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let fetch = batch_fetching_loss(tape, model, &fx.graph, &nodes, None, &mut rng)?;
    main.add(&fetch)
}

fn graph_loss<'t>(tape: &'t Tape, model: &DetModel, fx: &Fixture) -> Result<Var<'t>> {
    let out = model.forward_graph(tape, &fx.graph, None)?;
    let d = model.predict(tape, &out.h)?.sub(&tape.constant(Tensor::scalar(0.7)))?;
    d.mul(&d)?.sum()
}

fn kg_loss<'t>(tape: &'t Tape, model: &DetModel, fx: &Fixture) -> Result<Var<'t>> {
    let ds = fx.kg.as_ref().expect("kg fixture");
    let mut total: Option<Var<'t>> = None;
    for t in ds.train.iter().take(4) {
        // mean over four queries, as in training
        let out = model.forward_query(tape, &ds.kg, t.head, t.relation, Some((t.relation, t.tail)), &fx.index, None)?;
        let l = model.predict(tape, &out.h)?.log_softmax()?.pick_per_row(&[t.tail])?;
        total = Some(match total {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Contract("empty kg fixture".into()))?.scale(-0.25)
}

/// Full-loss checks on ten-node inputs: ego-node with and without bias
/// exchange, whole-graph, and KG.
pub fn model_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = ten_node_graph(&mut rng)?;
    let mut out = Vec::new();

    let ego = |lambda| {
        small(
            ModelConfig::new(Mode::EgoNode, HeadKind::Classification { classes: 2, multi_label: false }, InputKind::Features { dim: 4 }),
            lambda,
        )
    };
    for (name, lambda) in [("dual loss, ego-node, no exchange", 0.0), ("dual loss, ego-node, exchange", 0.5)] {
        let model = DetModel::new(ego(lambda), seed)?;
        let index = refresh_index(&model, &graph, 3, 16, seed, 0)?;
        let fx = Fixture { graph: graph.clone(), index, kg: None };
        out.push(check_model(name, &model, &fx, ego_loss)?);
    }

    let whole = small(ModelConfig::new(Mode::WholeGraph, HeadKind::Regression, InputKind::Token), 0.5);
    let model = DetModel::new(whole, seed)?;
    let fx = Fixture { graph: graph.clone(), index: SemanticNeighborIndex::empty(0, 1, 0), kg: None };
    out.push(check_model("dual loss, whole-graph", &model, &fx, graph_loss)?);

    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let triples: Vec<Triple> = graph
        .edges()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.source < e.target)
        .map(|(i, e)| Triple::new(e.source, i % 2, e.target))
        .collect();
    let kg = KgDataset::new(names("e", 10), names("r", 2), triples, vec![], vec![])?;
    let mut kc = small(ModelConfig::new(Mode::Kg, HeadKind::Entity, InputKind::Embedding { count: 10 }), 0.5);
    kc.relation_count = kg.kg.total_relations();
    let model = DetModel::new(kc, seed)?;
    let index = refresh_index(&model, &kg.kg.graph, 3, 16, seed, 0)?;
    let fx = Fixture { graph: kg.kg.graph.clone(), index, kg: Some(kg) };
    out.push(check_model("dual loss, kg", &model, &fx, kg_loss)?);
    Ok(out)
}

/// Every check, operations first.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = op_checks(seed)?;
    all.extend(model_checks(seed)?);
    Ok(all)
}
