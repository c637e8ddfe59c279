//! Seeded synthetic datasets.
//!
//! * `planted-cluster`: clusters with cluster-centred features; edges fall
//!   inside clusters, plus optional cross-cluster noise edges.
//! * `block-citation`: stochastic block graph whose labels also shift the
//!   node features.
//! * `toy-kg`: about a hundred entities with symmetric, inverse and
//!   compositional relations; every held-out fact is implied by a training
//!   fact.
//! * `toy-regression`: small random graphs whose target depends on hop
//!   structure.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::dataset::{Dataset, GraphSample, GraphSetDataset, KgDataset, NodeDataset, Splits};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, Labels, Triple};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    PlantedCluster,
    BlockCitation,
    ToyKg,
    ToyRegression,
}

keyword_enum!(SynthKind {
    SynthKind::PlantedCluster => "planted-cluster",
    SynthKind::BlockCitation => "block-citation",
    SynthKind::ToyKg => "toy-kg",
    SynthKind::ToyRegression => "toy-regression",
});

/// Generator parameters as `key → value` text; unset keys take defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthParams(BTreeMap<String, String>);

impl SynthParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    /// Parses `key=value`.
    pub fn insert_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.0.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.0.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown generator parameter `{k}`; expected one of {allowed:?}"))),
            None => Ok(()),
        }
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("generator parameter `{key}` has bad value `{v}`"))),
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box–Muller
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Shuffled 60/20/20 split of `0..n`.
fn random_splits<R: Rng>(n: usize, rng: &mut R) -> Splits {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let train = n * 6 / 10;
    let valid = n * 2 / 10;
    let mut s = Splits {
        train: ids[..train].to_vec(),
        valid: ids[train..train + valid].to_vec(),
        test: ids[train + valid..].to_vec(),
    };
    s.train.sort_unstable();
    s.valid.sort_unstable();
    s.test.sort_unstable();
    s
}

/// Each unordered pair joined independently with the probability returned
/// by `p(u, v)`.
fn random_edges<R: Rng>(n: usize, rng: &mut R, p: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen::<f64>() < p(u, v) {
                edges.push((u, v));
            }
        }
    }
    edges
}

pub fn generate_synthetic(kind: SynthKind, params: &SynthParams, seed: u64) -> Result<Dataset> {
    let mut rng = seed::stream(seed, &[kind as u64]);
    match kind {
        SynthKind::PlantedCluster => planted_cluster(params, &mut rng).map(Dataset::Nodes),
        SynthKind::BlockCitation => block_citation(params, &mut rng).map(Dataset::Nodes),
        SynthKind::ToyKg => toy_kg(params, &mut rng).map(Dataset::Kg),
        SynthKind::ToyRegression => toy_regression(params, &mut rng).map(Dataset::Graphs),
    }
}

fn planted_cluster(params: &SynthParams, rng: &mut ChaCha8Rng) -> Result<NodeDataset> {
    params.check_keys(&["nodes", "clusters", "feature_dim", "intra_degree", "cross_degree", "feature_noise"])?;
    let n: usize = params.get("nodes", 200)?;
    let k: usize = params.get("clusters", 4)?;
    let dim: usize = params.get("feature_dim", 16)?;
    let intra: f64 = params.get("intra_degree", 4.0)?;
    let cross: f64 = params.get("cross_degree", 0.0)?;
    let noise: f64 = params.get("feature_noise", 1.0)?;
    if k == 0 || n / k < 2 {
        return Err(Error::Config(format!("{n} nodes in {k} clusters leaves clusters smaller than 2")));
    }
    let clusters: Vec<usize> = (0..n).map(|v| v * k / n).collect();
    let size = |c: usize| clusters.iter().filter(|&&x| x == c).count() as f64;
    let p_in: Vec<f64> = (0..k).map(|c| (intra / (size(c) - 1.0)).min(1.0)).collect();
    let p_out = if k > 1 { (cross / (n as f64 - n as f64 / k as f64)).min(1.0) } else { 0.0 };
    let edges = random_edges(n, rng, |u, v| if clusters[u] == clusters[v] { p_in[clusters[u]] } else { p_out });
    let centroids: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| gaussian(rng)).collect()).collect();
    let features: Vec<Vec<f64>> = (0..n)
        .map(|v| centroids[clusters[v]].iter().map(|c| c + noise * gaussian(rng)).collect())
        .collect();
    let graph = Graph::undirected(n, &edges)?
        .with_features(Tensor::from_rows(&features)?)?
        .with_labels(Labels::Single { classes: k, values: clusters.clone() })?;
    let splits = random_splits(n, rng);
    Ok(NodeDataset { graph, splits, clusters: Some(clusters) })
}

fn block_citation(params: &SynthParams, rng: &mut ChaCha8Rng) -> Result<NodeDataset> {
    params.check_keys(&["nodes", "classes", "degree", "homophily", "feature_dim", "signal", "feature_noise"])?;
    let n: usize = params.get("nodes", 300)?;
    let k: usize = params.get("classes", 3)?;
    let dim: usize = params.get("feature_dim", 16)?;
    let degree: f64 = params.get("degree", 3.0)?;
    let homophily: f64 = params.get("homophily", 0.5)?;
    let signal: f64 = params.get("signal", 1.0)?;
    let noise: f64 = params.get("feature_noise", 1.0)?;
    if k < 2 || n < 2 * k || dim < k || !(0.0..=1.0).contains(&homophily) {
        return Err(Error::Config("block-citation needs ≥ 2 classes, ≥ 2 nodes per class, feature_dim ≥ classes and homophily in [0, 1]".into()));
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let nf = n as f64;
    let same = nf / k as f64;
    let p_in = (degree * homophily / same).min(1.0);
    let p_out = (degree * (1.0 - homophily) / (nf - same)).min(1.0);
    let edges = random_edges(n, rng, |u, v| if labels[u] == labels[v] { p_in } else { p_out });
    // class c lights up coordinate c; the rest is noise
    let features: Vec<Vec<f64>> = (0..n)
        .map(|v| {
            (0..dim)
                .map(|d| if d == labels[v] { signal } else { 0.0 } + noise * gaussian(rng))
                .collect()
        })
        .collect();
    let graph = Graph::undirected(n, &edges)?
        .with_features(Tensor::from_rows(&features)?)?
        .with_labels(Labels::Single { classes: k, values: labels })?;
    let splits = random_splits(n, rng);
    Ok(NodeDataset { graph, splits, clusters: None })
}

fn toy_kg(params: &SynthParams, rng: &mut ChaCha8Rng) -> Result<KgDataset> {
    params.check_keys(&["entities", "family_size", "holdout"])?;
    let n: usize = params.get("entities", 100)?;
    let family: usize = params.get("family_size", 4)?;
    let holdout: f64 = params.get("holdout", 0.2)?;
    if family < 2 || n < 2 * family || !(0.0..1.0).contains(&holdout) {
        return Err(Error::Config("toy-kg needs family_size ≥ 2, at least two families and holdout in [0, 1)".into()));
    }
    let relations: Vec<String> = ["sibling_of", "parent_of", "child_of", "grandparent_of", "grandchild_of"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let (sibling, parent, child, grandparent, grandchild) = (0, 1, 2, 3, 4);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let families: Vec<&[usize]> = order.chunks(family).filter(|c| c.len() >= 2).collect();
    // each family after the first hangs below a member of an earlier family
    let mut parent_of = vec![None; n];
    for f in 1..families.len() {
        let up = families[rng.gen_range(0..f)];
        let p = up[rng.gen_range(0..up.len())];
        for &c in families[f] {
            parent_of[c] = Some(p);
        }
    }
    // groups of mutually implied facts
    let mut groups: Vec<Vec<Triple>> = Vec::new();
    for fam in &families {
        for (i, &a) in fam.iter().enumerate() {
            for &b in &fam[i + 1..] {
                groups.push(vec![Triple::new(a, sibling, b), Triple::new(b, sibling, a)]);
            }
        }
    }
    for c in 0..n {
        if let Some(p) = parent_of[c] {
            groups.push(vec![Triple::new(p, parent, c), Triple::new(c, child, p)]);
            if let Some(g) = parent_of[p] {
                groups.push(vec![Triple::new(g, grandparent, c), Triple::new(c, grandchild, g)]);
            }
        }
    }
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for group in groups {
        if rng.gen::<f64>() < holdout {
            let held = rng.gen_range(0..group.len());
            for (i, t) in group.into_iter().enumerate() {
                if i != held {
                    train.push(t);
                } else if rng.gen::<bool>() {
                    valid.push(t);
                } else {
                    test.push(t);
                }
            }
        } else {
            train.extend(group);
        }
    }
    // vocabulary in first-appearance order across train, valid, test
    let mut ids: Vec<Option<usize>> = vec![None; n];
    let mut names = Vec::new();
    for t in train.iter().chain(&valid).chain(&test) {
        for e in [t.head, t.tail] {
            if ids[e].is_none() {
                ids[e] = Some(names.len());
                names.push(format!("e{e}"));
            }
        }
    }
    let remap = |ts: Vec<Triple>| -> Vec<Triple> {
        ts.into_iter()
            .map(|t| Triple::new(ids[t.head].expect("seen"), t.relation, ids[t.tail].expect("seen")))
            .collect()
    };
    let (train, valid, test) = (remap(train), remap(valid), remap(test));
    // relations likewise, so a reload reproduces identical ids
    let mut rel_ids: Vec<Option<usize>> = vec![None; relations.len()];
    let mut rel_names = Vec::new();
    for t in train.iter().chain(&valid).chain(&test) {
        if rel_ids[t.relation].is_none() {
            rel_ids[t.relation] = Some(rel_names.len());
            rel_names.push(relations[t.relation].clone());
        }
    }
    let remap_rel = |ts: Vec<Triple>| -> Vec<Triple> {
        ts.into_iter()
            .map(|t| Triple::new(t.head, rel_ids[t.relation].expect("seen"), t.tail))
            .collect()
    };
    KgDataset::new(names, rel_names, remap_rel(train), remap_rel(valid), remap_rel(test))
}

/// Target: mean number of nodes at exactly two hops, a global hop
/// statistic that no single node's neighborhood reveals.
fn toy_regression(params: &SynthParams, rng: &mut ChaCha8Rng) -> Result<GraphSetDataset> {
    params.check_keys(&["graphs", "min_nodes", "max_nodes", "extra_edges"])?;
    let count: usize = params.get("graphs", 200)?;
    let lo: usize = params.get("min_nodes", 6)?;
    let hi: usize = params.get("max_nodes", 14)?;
    let extra: f64 = params.get("extra_edges", 0.3)?;
    if lo < 2 || hi < lo || count < 5 {
        return Err(Error::Config("toy-regression needs 2 ≤ min_nodes ≤ max_nodes and at least 5 graphs".into()));
    }
    let mut graphs = Vec::with_capacity(count);
    for _ in 0..count {
        let n = rng.gen_range(lo..=hi);
        let mut edges = BTreeSet::new();
        for v in 1..n {
            edges.insert((rng.gen_range(0..v), v));
        }
        let target_extra = (extra * n as f64).round() as usize;
        let mut tries = 0;
        while edges.len() < n - 1 + target_extra && tries < 100 * n {
            tries += 1;
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let mut b = GraphBuilder::new(n);
        for &(u, v) in &edges {
            b.add_edge(u, v, None)?;
        }
        let graph = b.build();
        let target = graph.hop_statistics(2)?[1];
        graphs.push(GraphSample { graph, target });
    }
    let splits = random_splits(count, rng);
    Ok(GraphSetDataset { graphs, splits })
}
