//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p det-cli --test acceptance -- 3 7` runs a subset.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use det_core::autodiff::{Mask, ParamStore, Tape, Tensor};
use det_core::config::{BatchSize, Task, TrainConfig};
use det_core::dataset::{Dataset, Split};
use det_core::encoders::{bias_exchange, DistanceBuckets, PositionBias, SemanticLayer, SemanticScorer, StructuralLayer};
use det_core::graph::{Graph, Hop};
use det_core::gradcheck;
use det_core::metrics;
use det_core::model::DetModel;
use det_core::pipeline::{build_model, CHECKPOINT_FILE, METRICS_FILE, STEPS_FILE};
use det_core::seed::stream;
use det_core::semantic::{fetching_loss, refresh_index};
use det_core::synth::{generate_synthetic, SynthKind, SynthParams};
use det_core::train::{evaluate, train, train_with, TrainOutcome};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

/// Replaces every parameter, including norm gains and biases, with noise.
fn randomize<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let [r, c] = store.get(id).shape();
        store.set(id, uniform(rng, r, c, 1.0)).expect("same shape");
    }
}

fn random_graph<R: Rng>(rng: &mut R, n: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    Graph::undirected(n, &edges).expect("valid edges")
}

/// Hop counts by Floyd–Warshall; `None` when unreachable.
fn floyd_warshall(g: &Graph) -> Vec<Vec<Option<usize>>> {
    let n = g.node_count();
    let mut d = vec![vec![None; n]; n];
    for (v, row) in d.iter_mut().enumerate() {
        row[v] = Some(0);
    }
    for e in g.edges() {
        d[e.source][e.target] = Some(1);
        d[e.target][e.source] = Some(1);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (d[i][k], d[k][j]) {
                    if d[i][j].is_none_or(|c| a + b < c) {
                        d[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    d
}

// ---------- dense loop oracles ----------

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(k, x)| (x - mean) / (var + eps).sqrt() * gamma[k] + beta[k])
                .collect()
        })
        .collect()
}

fn softmax_rows(logits: &Mat, keep: impl Fn(usize, usize) -> bool) -> Mat {
    logits
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let max = (0..row.len()).filter(|&j| keep(i, j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..row.len()).map(|j| if keep(i, j) { (row[j] - max).exp() } else { 0.0 }).collect();
            let total: f64 = e.iter().sum();
            e.iter().map(|x| x / total).collect()
        })
        .collect()
}

struct Residual<'a> {
    wo: Mat,
    bo: &'a [f64],
    g1: &'a [f64],
    be1: &'a [f64],
    w1: Mat,
    b1: &'a [f64],
    w2: Mat,
    b2: &'a [f64],
    g2: &'a [f64],
    be2: &'a [f64],
}

impl Residual<'_> {
    fn apply(&self, x: &Mat, heads: &Mat) -> Mat {
        let attended = add_row(&matmul(heads, &self.wo), self.bo);
        let y = layer_norm(&add(x, &attended), self.g1, self.be1, det_core::encoders::LAYER_NORM_EPS);
        let inner: Mat = add_row(&matmul(&y, &self.w1), self.b1)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let f = add_row(&matmul(&inner, &self.w2), self.b2);
        layer_norm(&add(&y, &f), self.g2, self.be2, det_core::encoders::LAYER_NORM_EPS)
    }
}

macro_rules! residual {
    ($store:expr, $layer:expr) => {
        Residual {
            wo: mat($store.get($layer.wo)),
            bo: $store.get($layer.bo).data(),
            g1: $store.get($layer.ln1.gamma).data(),
            be1: $store.get($layer.ln1.beta).data(),
            w1: mat($store.get($layer.ff.w1)),
            b1: $store.get($layer.ff.b1).data(),
            w2: mat($store.get($layer.ff.w2)),
            b2: $store.get($layer.ff.b2).data(),
            g2: $store.get($layer.ln2.gamma).data(),
            be2: $store.get($layer.ln2.beta).data(),
        }
    };
}

/// Structural block evaluated entry by entry: distance embeddings enter the
/// keys and values of each pair.
fn structural_oracle(
    store: &ParamStore,
    layer: &StructuralLayer,
    x: &Mat,
    table: &Mat,
    bucket: &[Vec<usize>],
    bias: Option<&Mat>,
    keep: &dyn Fn(usize, usize) -> bool,
) -> (Mat, Vec<Mat>) {
    let n = x.len();
    let d = layer.hidden / layer.heads;
    let (q, k, v) = (
        matmul(x, &mat(store.get(layer.wq))),
        matmul(x, &mat(store.get(layer.wk))),
        matmul(x, &mat(store.get(layer.wv))),
    );
    let (tk, tv) = (matmul(table, &mat(store.get(layer.wk))), matmul(table, &mat(store.get(layer.wv))));
    let mut heads = vec![vec![0.0; layer.hidden]; n];
    let mut all_scores = Vec::new();
    for hd in 0..layer.heads {
        let cols = hd * d..(hd + 1) * d;
        let mut logits = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let b = bucket[i][j];
                let dot: f64 = cols.clone().map(|c| q[i][c] * (k[j][c] + tk[b][c])).sum();
                logits[i][j] = dot / (d as f64).sqrt() + bias.map_or(0.0, |m| m[i][j]);
            }
        }
        let a = softmax_rows(&logits, keep);
        for i in 0..n {
            for c in cols.clone() {
                heads[i][c] = (0..n).map(|j| a[i][j] * (v[j][c] + tv[bucket[i][j]][c])).sum();
            }
        }
        all_scores.push(a);
    }
    (residual!(store, layer).apply(x, &heads), all_scores)
}

/// Semantic block with logits `W_s (x_i − x_j) + b_s` per head.
fn semantic_oracle(store: &ParamStore, layer: &SemanticLayer, x: &Mat, bias: Option<&Mat>) -> (Mat, Vec<Mat>) {
    let n = x.len();
    let heads_n = layer.heads();
    let d = layer.hidden / heads_n;
    let (ws, bs) = (store.get(layer.scorer.weight), store.get(layer.scorer.bias));
    let v = matmul(x, &mat(store.get(layer.wv)));
    let mut heads = vec![vec![0.0; layer.hidden]; n];
    let mut all_scores = Vec::new();
    for hd in 0..heads_n {
        let mut logits = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let z: f64 = (0..layer.hidden).map(|c| ws.get(hd, c) * (x[i][c] - x[j][c])).sum();
                logits[i][j] = z + bs.data()[hd] + bias.map_or(0.0, |m| m[i][j]);
            }
        }
        let a = softmax_rows(&logits, |_, _| true);
        for i in 0..n {
            for c in hd * d..(hd + 1) * d {
                heads[i][c] = (0..n).map(|j| a[i][j] * v[j][c]).sum();
            }
        }
        all_scores.push(a);
    }
    (residual!(store, layer).apply(x, &heads), all_scores)
}

fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(i, j)).abs());
        }
    }
    worst
}

fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).expect("rectangular")
}

// ---------- criteria ----------

fn gradient_suite() -> Check {
    let start = Instant::now();
    let results = gradcheck::run_suite(7).map_err(fail)?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    ensure(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, worst relative error {worst:.2e}, {:.1}s, failed {failed:?}",
            results.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn normalization() -> Check {
    let (mut worst, mut masked_nonzero, mut rows) = (0.0f64, 0usize, 0usize);
    for trial in 0..100u64 {
        let mut rng = stream(trial, &[2]);
        let n = rng.gen_range(1..=8);
        let hidden = 8;
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let sheads = [1, 2, 4, 8][rng.gen_range(0..4)];
        let mut store = ParamStore::new();
        let st = StructuralLayer::new(&mut store, "st", hidden, heads, 8, &mut rng);
        let se = SemanticLayer::new(&mut store, "se", hidden, sheads, 8, &mut rng);
        randomize(&mut store, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(uniform(&mut rng, n, hidden, 2.0));
        let buckets = 4;
        let index = (0..n * n).map(|_| rng.gen_range(0..buckets)).collect();
        let db = DistanceBuckets::from_index(n, buckets, index).map_err(fail)?;
        let pos = PositionBias { table: tape.constant(uniform(&mut rng, buckets, hidden, 1.0)), buckets: &db };
        let excluded: Vec<bool> = (0..n * n).map(|k| k / n != k % n && rng.gen_bool(0.4)).collect();
        let mask = Mask::new(n, n, excluded.clone()).map_err(fail)?;
        let exchange = trial % 2 == 1;
        let (bias_st, bias_se) = if exchange {
            // each encoder's logits, re-indexed onto a shuffled copy of the other's context
            let keys: Vec<usize> = (0..n).collect();
            let mut other = keys.clone();
            rand::seq::SliceRandom::shuffle(other.as_mut_slice(), &mut rng);
            let lambda = rng.gen_range(0.1..2.0);
            let se_logits = se.logits(&tape, &store, &x).map_err(fail)?.value();
            let st_logits = st.logits(&tape, &store, &x, Some(&pos)).map_err(fail)?.value();
            (
                Some(tape.constant(bias_exchange(&se_logits, &other, &keys, lambda).map_err(fail)?)),
                Some(tape.constant(bias_exchange(&st_logits, &other, &keys, lambda).map_err(fail)?)),
            )
        } else {
            (None, None)
        };
        let a = st.forward(&tape, &store, &x, Some(&pos), bias_st.as_ref(), Some(&mask), None).map_err(fail)?;
        let b = se.forward(&tape, &store, &x, bias_se.as_ref(), None).map_err(fail)?;
        for (scores, masked) in a.scores.iter().map(|s| (s, true)).chain(b.scores.iter().map(|s| (s, false))) {
            let s = scores.value();
            for i in 0..n {
                worst = worst.max((s.row(i).iter().sum::<f64>() - 1.0).abs());
                rows += 1;
                for j in 0..n {
                    if masked && excluded[i * n + j] && s.get(i, j) != 0.0 {
                        masked_nonzero += 1;
                    }
                }
            }
        }
    }
    ensure(
        worst <= 1e-6 && masked_nonzero == 0,
        format!("{rows} rows, worst |sum − 1| {worst:.2e}, nonzero masked entries {masked_nonzero}"),
    )
}

fn oracle_equivalence() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = stream(seed, &[3]);
        let n = rng.gen_range(2..=8);
        let g = random_graph(&mut rng, n, 0.35);
        let hops = floyd_warshall(&g);
        let graph_hops = g.all_pairs_distances();
        let max_spd = 3;
        let mut bucket = vec![vec![0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let expected = match hops[i][j] {
                    Some(h) => Hop::Finite(h as u32),
                    None => Hop::Unreachable,
                };
                if graph_hops[i][j] != expected {
                    return Err(format!("seed {seed}: distance ({i}, {j}) is {:?}, expected {expected:?}", graph_hops[i][j]));
                }
                bucket[i][j] = hops[i][j].map_or(max_spd + 1, |h| h.min(max_spd));
            }
        }
        let hidden = 8;
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let sheads = [1, 2, 4][rng.gen_range(0..3)];
        let mut store = ParamStore::new();
        let st = StructuralLayer::new(&mut store, "st", hidden, heads, 12, &mut rng);
        let se = SemanticLayer::new(&mut store, "se", hidden, sheads, 12, &mut rng);
        randomize(&mut store, &mut rng);
        let x = uniform(&mut rng, n, hidden, 1.5);
        let table = uniform(&mut rng, max_spd + 2, hidden, 1.0);
        let bias = (seed % 2 == 0).then(|| uniform(&mut rng, n, n, 1.0));
        let excluded: Vec<bool> = (0..n * n).map(|k| k / n != k % n && hops[k / n][k % n].is_none()).collect();
        let keep = |i: usize, j: usize| !excluded[i * n + j];

        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let db = DistanceBuckets::from_index(n, max_spd + 2, bucket.iter().flatten().copied().collect()).map_err(fail)?;
        let pos = PositionBias { table: tape.constant(table.clone()), buckets: &db };
        let mask = Mask::new(n, n, excluded.clone()).map_err(fail)?;
        let bias_var = bias.as_ref().map(|b| tape.constant(b.clone()));
        let got = st.forward(&tape, &store, &xv, Some(&pos), bias_var.as_ref(), Some(&mask), None).map_err(fail)?;
        let (want, want_scores) = structural_oracle(&store, &st, &mat(&x), &mat(&table), &bucket, bias.as_ref().map(mat).as_ref(), &keep);
        worst = worst.max(max_diff(&want, &got.out.value()));
        for (w, s) in want_scores.iter().zip(&got.scores) {
            worst = worst.max(max_diff(w, &s.value()));
        }

        let got = se.forward(&tape, &store, &xv, bias_var.as_ref(), None).map_err(fail)?;
        let (want, want_scores) = semantic_oracle(&store, &se, &mat(&x), bias.as_ref().map(mat).as_ref());
        worst = worst.max(max_diff(&want, &got.out.value()));
        for (w, s) in want_scores.iter().zip(&got.scores) {
            worst = worst.max(max_diff(w, &s.value()));
        }
        if tensor(&want).rows() != n {
            return Err("oracle shape".into());
        }
    }
    ensure(worst <= 1e-10, format!("50 seeds, worst deviation {worst:.2e}"))
}

fn scorer_identities() -> Check {
    let mut worst_sum = 0.0f64;
    let mut worst_logit = 0.0f64;
    let mut exact_failures = 0;
    for trial in 0..100u64 {
        let mut rng = stream(trial, &[4]);
        let hidden = rng.gen_range(1..=8);
        let heads = rng.gen_range(1..=4);
        let mut store = ParamStore::new();
        let scorer = SemanticScorer::new(&mut store, "s", hidden, heads, &mut rng);
        store.set(scorer.weight, uniform(&mut rng, heads, hidden, 2.0)).map_err(fail)?;
        let (a, b) = (uniform(&mut rng, 1, hidden, 3.0), uniform(&mut rng, 1, hidden, 3.0));
        // f_s(a, b) + f_s(b, a) = 1 once b_s = 0
        store.set(scorer.bias, Tensor::zeros(1, heads)).map_err(fail)?;
        let sum = scorer.score_values(&store, a.data(), b.data()) + scorer.score_values(&store, b.data(), a.data());
        worst_sum = worst_sum.max((sum - 1.0).abs());
        let tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let taped = scorer.score(&tape, &store, &av, &bv).map_err(fail)?.value().item().map_err(fail)?
            + scorer.score(&tape, &store, &bv, &av).map_err(fail)?.value().item().map_err(fail)?;
        worst_sum = worst_sum.max((taped - 1.0).abs());
        // z(a, b) = −z(b, a) + 2 b_s
        let b_s = uniform(&mut rng, 1, heads, 2.0);
        store.set(scorer.bias, b_s.clone()).map_err(fail)?;
        // tapes snapshot parameters on first use
        let tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let zab = scorer.semantic_logit(&tape, &store, &av, &bv).map_err(fail)?.value();
        let zba = scorer.semantic_logit(&tape, &store, &bv, &av).map_err(fail)?.value();
        for h in 0..heads {
            worst_logit = worst_logit.max((zab.data()[h] - (-zba.data()[h] + 2.0 * b_s.data()[h])).abs());
        }
        // with dyadic inputs every step is exact
        let dyadic = |rng: &mut rand_chacha::ChaCha8Rng, r, c| {
            Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-8i32..8) as f64 / 4.0).collect()).expect("sized")
        };
        store.set(scorer.weight, dyadic(&mut rng, heads, hidden)).map_err(fail)?;
        let b_s = dyadic(&mut rng, 1, heads);
        store.set(scorer.bias, b_s.clone()).map_err(fail)?;
        let tape = Tape::new();
        let (av, bv) = (tape.constant(dyadic(&mut rng, 1, hidden)), tape.constant(dyadic(&mut rng, 1, hidden)));
        let zab = scorer.semantic_logit(&tape, &store, &av, &bv).map_err(fail)?.value();
        let zba = scorer.semantic_logit(&tape, &store, &bv, &av).map_err(fail)?.value();
        for h in 0..heads {
            if zab.data()[h] != -zba.data()[h] + 2.0 * b_s.data()[h] {
                exact_failures += 1;
            }
        }
    }
    // worked example: W_s = [1, 0], b_s = 0, x_i = [2, 5], x_j = [1, 5]
    let mut store = ParamStore::new();
    let scorer = SemanticScorer::new(&mut store, "s", 2, 1, &mut stream(0, &[4]));
    store.set(scorer.weight, Tensor::row_vector(vec![1.0, 0.0])).map_err(fail)?;
    store.set(scorer.bias, Tensor::zeros(1, 1)).map_err(fail)?;
    let example = scorer.score_values(&store, &[2.0, 5.0], &[1.0, 5.0]);
    ensure(
        worst_sum <= 1e-12 && worst_logit <= 1e-12 && exact_failures == 0 && (example - 0.7310586).abs() < 1e-7,
        format!(
            "worst |f(a,b)+f(b,a)−1| {worst_sum:.1e}, worst logit identity error {worst_logit:.1e}, \
             dyadic mismatches {exact_failures}, example f_s {example:.7}"
        ),
    )
}

fn fetching_calibration() -> Check {
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let mut rng = stream(trial, &[5]);
        let hidden = rng.gen_range(1..=6);
        let heads = rng.gen_range(1..=3);
        let mut store = ParamStore::new();
        let scorer = SemanticScorer::new(&mut store, "s", hidden, heads, &mut rng);
        store.set(scorer.weight, Tensor::zeros(heads, hidden)).map_err(fail)?;
        store.set(scorer.bias, Tensor::zeros(1, heads)).map_err(fail)?;
        let tape = Tape::new();
        let center = tape.constant(uniform(&mut rng, 1, hidden, 3.0));
        let (p, q) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let pos = tape.constant(uniform(&mut rng, p, hidden, 3.0));
        let neg = tape.constant(uniform(&mut rng, q, hidden, 3.0));
        let loss = fetching_loss(&tape, &store, &scorer, &center, &pos, &neg).map_err(fail)?;
        worst = worst.max(loss.value().item().map_err(fail)?.abs());
    }
    // one head with W_s = 1: σ(0 − x_j) is 0.9 for the positive, 0.1 for the negative
    let mut store = ParamStore::new();
    let scorer = SemanticScorer::new(&mut store, "s", 1, 1, &mut stream(0, &[5]));
    store.set(scorer.weight, Tensor::scalar(1.0)).map_err(fail)?;
    store.set(scorer.bias, Tensor::zeros(1, 1)).map_err(fail)?;
    let tape = Tape::new();
    let logit9 = 9f64.ln();
    let loss = fetching_loss(
        &tape,
        &store,
        &scorer,
        &tape.constant(Tensor::scalar(0.0)),
        &tape.constant(Tensor::scalar(-logit9)),
        &tape.constant(Tensor::scalar(logit9)),
    )
    .map_err(fail)?
    .value()
    .item()
    .map_err(fail)?;
    let expected = 0.1f64.ln() - 0.9f64.ln();
    ensure(
        worst <= 1e-9 && (loss - (-2.1972)).abs() <= 1e-4 && (loss - expected).abs() <= 1e-12,
        format!("indifferent worst |L| {worst:.1e}, 0.9/0.1 case {loss:.6}"),
    )
}

fn small_node_config(tau: f64, lambda: f64, alpha: f64) -> TrainConfig {
    let mut c = TrainConfig::for_task(Task::NodeClassification);
    c.epochs = 3;
    c.hidden = 8;
    c.heads = 2;
    c.semantic_heads = 2;
    c.ffn_hidden = 8;
    c.k = 4;
    (c.tau, c.lambda, c.alpha) = (tau, lambda, alpha);
    c
}

/// Trains while recording the largest gradient magnitude seen on `ids`.
fn largest_gradient(config: &TrainConfig, dataset: &Dataset, ids: fn(&DetModel) -> Vec<det_core::autodiff::ParamId>) -> Result<(f64, usize), String> {
    let model = build_model(config, dataset).map_err(fail)?;
    let watched = ids(&model);
    let (mut largest, mut steps) = (0.0f64, 0usize);
    train_with(config, dataset, model, &mut |view| {
        steps += 1;
        for &id in &watched {
            if let Some(g) = view.grads.get(id) {
                largest = largest.max(g.data().iter().fold(0.0, |m: f64, v| m.max(v.abs())));
            }
        }
    })
    .map_err(fail)?;
    Ok((largest, steps))
}

fn reduction() -> Check {
    let params = SynthParams::new().with("nodes", 40).with("clusters", 2).with("feature_dim", 4);
    let nodes = generate_synthetic(SynthKind::PlantedCluster, &params, 6).map_err(fail)?;
    let kg = generate_synthetic(SynthKind::ToyKg, &SynthParams::new().with("entities", 24), 6).map_err(fail)?;
    let mut kg_config = small_node_config(1.0, 0.0, 0.0);
    kg_config.task = Task::KgCompletion;
    kg_config.epochs = 1;
    kg_config.batch_size = BatchSize::Fixed(32);
    let mut details = Vec::new();
    let mut ok = true;
    for (name, data, base) in [("nodes", &nodes, small_node_config(1.0, 0.0, 0.0)), ("kg", &kg, kg_config)] {
        let (sem, steps) = largest_gradient(&base, data, |m| m.semantic_param_ids())?;
        let mut structural = base.clone();
        structural.tau = 0.0;
        let (st, _) = largest_gradient(&structural, data, |m| m.structural_param_ids())?;
        // the same parameters do move when their branch is live
        let mut live = base.clone();
        live.tau = 0.5;
        let (sem_live, _) = largest_gradient(&live, data, |m| m.semantic_param_ids())?;
        let (st_live, _) = largest_gradient(&live, data, |m| m.structural_param_ids())?;
        ok &= sem == 0.0 && st == 0.0 && sem_live > 0.0 && st_live > 0.0;
        details.push(format!(
            "{name}: {steps} steps, semantic max |g| at τ=1 {sem:e}, structural max |g| at τ=0 {st:e} (τ=0.5: {sem_live:.1e}, {st_live:.1e})"
        ));
    }
    ensure(ok, details.join("; "))
}

fn planted_cluster_precision(model: &DetModel, data: &Dataset, seed: u64) -> Result<f64, String> {
    let Dataset::Nodes(ds) = data else { return Err("planted-cluster must be a node dataset".into()) };
    let n = ds.graph.node_count();
    let index = refresh_index(model, &ds.graph, 16, n, seed, 0).map_err(fail)?;
    let mut total = 0.0;
    for v in 0..n {
        let truth: HashSet<usize> = ds.ground_truth_semantic_neighbors(v).ok_or("no clusters recorded")?.into_iter().collect();
        let top = index.neighbors(v);
        total += top.iter().filter(|(u, _)| truth.contains(u)).count() as f64 / top.len() as f64;
    }
    Ok(total / n as f64)
}

fn planted_cluster_recovery() -> Check {
    let start = Instant::now();
    let mut per_seed = Vec::new();
    for seed in 0..5u64 {
        let data = generate_synthetic(SynthKind::PlantedCluster, &SynthParams::new(), seed).map_err(fail)?;
        let mut c = TrainConfig::for_task(Task::NodeClassification);
        c.seed = seed;
        c.epochs = 100;
        c.patience = 100;
        c.hidden = 16;
        c.layers = 1;
        c.semantic_heads = 16;
        c.alpha = 10.0;
        c.candidate_count = 200;
        let model = build_model(&c, &data).map_err(fail)?;
        let before = planted_cluster_precision(&model, &data, seed)?;
        let out = train(&c, &data, model).map_err(fail)?;
        let after = planted_cluster_precision(&out.model, &data, seed)?;
        per_seed.push((before, after));
    }
    let mean = per_seed.iter().map(|p| p.1).sum::<f64>() / 5.0;
    let elapsed = start.elapsed();
    let shown: Vec<String> = per_seed.iter().map(|(b, a)| format!("{b:.3}→{a:.3}")).collect();
    ensure(
        mean >= 0.8 && elapsed < Duration::from_secs(300),
        format!("precision@16 per seed [{}], mean {mean:.3}, {:.0}s", shown.join(", "), elapsed.as_secs_f64()),
    )
}

fn best_valid(out: &TrainOutcome, metric: &str) -> Result<f64, String> {
    out.report.value(out.best_epoch, Split::Valid, metric).ok_or_else(|| format!("no validation {metric}"))
}

fn tau_sweep() -> Check {
    let taus = [0.0, 0.15, 1.0];
    let mut rows = Vec::new();
    // large enough that one validation node moves accuracy by 1/300
    let params = SynthParams::new().with("nodes", 1500).with("signal", 1.0).with("homophily", 0.6).with("degree", 5);
    for seed in 0..5u64 {
        let data = generate_synthetic(SynthKind::BlockCitation, &params, seed).map_err(fail)?;
        let mut accs = [0.0; 3];
        for (i, &tau) in taus.iter().enumerate() {
            let mut c = TrainConfig::for_task(Task::NodeClassification);
            c.seed = seed;
            c.tau = tau;
            c.epochs = 60;
            c.hidden = 16;
            c.heads = 2;
            c.semantic_heads = 2;
            c.ffn_hidden = 16;
            c.layers = 1;
            c.k = 16;
            let out = train(&c, &data, build_model(&c, &data).map_err(fail)?).map_err(fail)?;
            accs[i] = best_valid(&out, "accuracy")?;
        }
        rows.push(accs);
    }
    let wins = rows.iter().filter(|a| a[1] > a[0] && a[1] > a[2]).count();
    let mean = |i: usize| rows.iter().map(|a| a[i]).sum::<f64>() / rows.len() as f64;
    let shown: Vec<String> = rows.iter().map(|a| format!("{:.3}/{:.3}/{:.3}", a[0], a[1], a[2])).collect();
    ensure(
        wins >= 4 && mean(0) > mean(2),
        format!(
            "valid accuracy τ=0/0.15/1 per seed [{}]; τ=0.15 best in {wins}/5; means {:.3}/{:.3}/{:.3}",
            shown.join(", "),
            mean(0),
            mean(1),
            mean(2)
        ),
    )
}

fn toy_kg() -> Check {
    let start = Instant::now();
    let data = generate_synthetic(SynthKind::ToyKg, &SynthParams::new(), 0).map_err(fail)?;
    let mut c = TrainConfig::for_task(Task::KgCompletion);
    c.epochs = 25;
    c.layers = 1;
    c.ffn_hidden = 32;
    c.batch_size = BatchSize::Fixed(64);
    c.alpha = 0.1;
    c.k = 8;
    c.max_context = 32;
    let out = train(&c, &data, build_model(&c, &data).map_err(fail)?).map_err(fail)?;
    let elapsed = start.elapsed();
    let Dataset::Kg(ds) = &data else { return Err("toy-kg must be a knowledge graph".into()) };
    // filtered ranks recomputed outside the training module
    let mut known = HashSet::new();
    for split in [Split::Train, Split::Valid, Split::Test] {
        for t in ds.triples(split) {
            known.insert((t.head, t.relation, t.tail));
            known.insert((t.tail, ds.kg.inverse(t.relation), t.head));
        }
    }
    let mut reciprocal = Vec::new();
    for t in ds.triples(Split::Test) {
        for (head, relation, target) in [(t.head, t.relation, t.tail), (t.tail, ds.kg.inverse(t.relation), t.head)] {
            let scores = out.model.score_entities(&ds.kg, head, relation, &out.index).map_err(fail)?;
            let (raw, filtered) = metrics::ranks(&scores, target, |e| known.contains(&(head, relation, e)));
            if filtered > raw || filtered < 1.0 {
                return Err(format!("filtered rank {filtered} vs raw {raw}"));
            }
            reciprocal.push(1.0 / filtered);
        }
    }
    let mrr = reciprocal.iter().sum::<f64>() / reciprocal.len() as f64;
    let reported = evaluate(&out.model, &data, Split::Test, &out.index).map_err(fail)?;
    let reported_mrr = reported.iter().find(|(n, _)| n == "mrr").map(|p| p.1).ok_or("no mrr")?;
    ensure(
        mrr >= 0.5 && (mrr - reported_mrr).abs() < 1e-12 && elapsed < Duration::from_secs(300),
        format!(
            "test filtered MRR {mrr:.3} ({} queries, {} epochs, best epoch {}), {:.0}s",
            reciprocal.len(),
            out.epochs_run,
            out.best_epoch,
            elapsed.as_secs_f64()
        ),
    )
}

fn det(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_det")).args(args).env("RUST_LOG", "warn").output().map_err(fail)?;
    if !out.status.success() {
        return Err(format!("det {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn reproducibility() -> Check {
    let dir = tempfile::tempdir().map_err(fail)?;
    let root = dir.path();
    let data = root.join("data");
    let data_arg = data.to_str().ok_or("non-utf8 path")?;
    det(&["synth", "--kind", "planted-cluster", "--out", data_arg, "--seed", "3", "--param", "nodes=60"])?;
    let config = root.join("run.conf");
    fs::write(
        &config,
        format!(
            "task = node-classification\ndata = {data_arg}\nepochs = 4\nhidden = 8\nheads = 2\nsemantic_heads = 2\nffn_hidden = 16\nk = 4\ndropout = 0.1\nseed = 11\n"
        ),
    )
    .map_err(fail)?;
    let config_arg = config.to_str().ok_or("non-utf8 path")?;
    let runs = [(root.join("a"), "1"), (root.join("b"), "3")];
    for (out, threads) in &runs {
        det(&["--threads", threads, "train", "--config", config_arg, "--out", out.to_str().ok_or("non-utf8 path")?])?;
    }
    let mut differing = Vec::new();
    for file in [METRICS_FILE, STEPS_FILE, CHECKPOINT_FILE] {
        let read = |d: &Path| fs::read(d.join(file)).map_err(fail);
        if read(&runs[0].0)? != read(&runs[1].0)? {
            differing.push(file);
        }
    }
    ensure(
        differing.is_empty(),
        format!("{METRICS_FILE}, {STEPS_FILE}, {CHECKPOINT_FILE} compared across 1 and 3 threads; differing {differing:?}"),
    )
}

fn dual_vs_structural() -> Check {
    let mut dual_wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let data = generate_synthetic(SynthKind::ToyRegression, &SynthParams::new(), seed).map_err(fail)?;
        let mut curves = Vec::new();
        let mut finals = Vec::new();
        for structural_only in [false, true] {
            let mut c = TrainConfig::for_task(Task::GraphRegression);
            c.seed = seed;
            c.epochs = 40;
            c.patience = 40;
            c.hidden = 16;
            c.heads = 2;
            c.semantic_heads = 2;
            c.ffn_hidden = 32;
            c.batch_size = BatchSize::Fixed(16);
            if structural_only {
                (c.tau, c.lambda) = (1.0, 0.0);
            }
            let out = train(&c, &data, build_model(&c, &data).map_err(fail)?).map_err(fail)?;
            curves.push(out.report.series(Split::Valid, "mae"));
            finals.push(best_valid(&out, "mae")?);
        }
        if finals[0] <= finals[1] {
            dual_wins += 1;
        }
        println!("  seed {seed} validation MAE by epoch (dual | structural-only)");
        for ((epoch, d), (_, s)) in curves[0].iter().zip(&curves[1]) {
            println!("    {epoch:>3}  {d:.4}  {s:.4}");
        }
        lines.push(format!("{:.4}/{:.4}", finals[0], finals[1]));
    }
    ensure(
        dual_wins >= 3,
        format!("best validation MAE dual/structural-only [{}]; dual ≤ structural in {dual_wins}/5", lines.join(", ")),
    )
}

type Criterion = (&'static str, fn() -> Check);

const CRITERIA: [Criterion; 11] = [
    ("gradient suite", gradient_suite),
    ("attention normalization", normalization),
    ("loop-oracle equivalence", oracle_equivalence),
    ("scorer identities", scorer_identities),
    ("fetching-loss calibration", fetching_calibration),
    ("single-encoder reduction", reduction),
    ("planted-cluster recovery", planted_cluster_recovery),
    ("τ-sweep ordering", tau_sweep),
    ("toy knowledge graph", toy_kg),
    ("reproducibility", reproducibility),
    ("dual vs structural-only regression", dual_vs_structural),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, run)) in CRITERIA.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let (verdict, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {number:>2} {verdict} {name} ({:.1}s): {detail}", start.elapsed().as_secs_f64());
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
