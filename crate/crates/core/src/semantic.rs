//! Semantic neighbor discovery: the fetching loss that teaches `f_s` to
//! prefer one-hop neighbors over distant nodes, and the periodically
//! refreshed top-k index of distant nodes with the highest `f_s`.

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::encoders::SemanticScorer;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::DetModel;
use crate::seed;

/// Cap on the default number of negatives drawn per node.
pub const MAX_DEFAULT_NEGATIVES: usize = 16;

/// Per node, up to `k` distant nodes sorted by descending `f_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticNeighborIndex {
    k: usize,
    epoch: usize,
    lists: Vec<Vec<(NodeId, f64)>>,
}

impl SemanticNeighborIndex {
    /// Index with no neighbors for any node.
    pub fn empty(node_count: usize, k: usize, epoch: usize) -> Self {
        SemanticNeighborIndex { k, epoch, lists: vec![Vec::new(); node_count] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn node_count(&self) -> usize {
        self.lists.len()
    }

    pub fn neighbors(&self, v: NodeId) -> &[(NodeId, f64)] {
        self.lists.get(v).map_or(&[], Vec::as_slice)
    }

    /// Errors when the index was built `interval` or more epochs before `now`.
    pub fn check_fresh(&self, now: usize, interval: usize) -> Result<()> {
        if now >= self.epoch + interval.max(1) {
            return Err(Error::StaleIndex { built: self.epoch, now, interval });
        }
        Ok(())
    }

    /// Strict mode turns staleness into an error; otherwise it is logged.
    pub fn ensure_fresh(&self, now: usize, interval: usize, strict: bool) -> Result<()> {
        match self.check_fresh(now, interval) {
            Err(e) if !strict => {
                log::warn!("{e}");
                Ok(())
            }
            other => other,
        }
    }

    /// `node<TAB>neighbor<TAB>score` lines.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (v, list) in self.lists.iter().enumerate() {
            for &(u, s) in list {
                writeln!(out, "{v}\t{u}\t{s}")?;
            }
        }
        Ok(())
    }
}

/// Sorts by descending score, ties by ascending node id, and keeps `k`.
pub fn top_k(mut scored: Vec<(NodeId, f64)>, k: usize) -> Vec<(NodeId, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Per-head projections `x W_sᵀ` so that each pair costs one subtraction
/// per head.
struct ProjectedScorer {
    projected: Tensor,
    bias: Vec<f64>,
}

impl ProjectedScorer {
    fn new(store: &ParamStore, scorer: &SemanticScorer, inputs: &Tensor) -> Result<Self> {
        Ok(ProjectedScorer {
            projected: inputs.matmul_t(store.get(scorer.weight))?,
            bias: store.get(scorer.bias).data().to_vec(),
        })
    }

    fn score(&self, i: NodeId, j: NodeId) -> f64 {
        let (pi, pj) = (self.projected.row(i), self.projected.row(j));
        let total: f64 = self
            .bias
            .iter()
            .enumerate()
            .map(|(h, b)| crate::autodiff::sigmoid(pi[h] - pj[h] + b))
            .sum();
        total / self.bias.len() as f64
    }
}

/// Rebuilds the index from the model's layer-0 inputs and first-layer
/// scorer. Each node draws `candidate_count` candidates from its distant
/// pool (all of it when smaller) with an RNG keyed by `(seed, epoch, node)`,
/// so the result does not depend on thread scheduling.
pub fn refresh_index(
    model: &DetModel,
    g: &Graph,
    k: usize,
    candidate_count: usize,
    seed: u64,
    epoch: usize,
) -> Result<SemanticNeighborIndex> {
    if k == 0 || candidate_count == 0 {
        return Err(Error::Contract("k and candidate_count must be at least 1".into()));
    }
    let nodes: Vec<NodeId> = (0..g.node_count()).collect();
    let inputs = model.input_values(g, &nodes)?;
    let scorer = ProjectedScorer::new(&model.params, model.first_scorer(), &inputs)?;
    let lists = nodes
        .par_iter()
        .map(|&v| {
            let pool = g.distant_pool(v)?;
            let candidates = if pool.len() <= candidate_count {
                pool
            } else {
                let mut rng = seed::stream(seed, &[0x1d3, epoch as u64, v as u64]);
                sample(&mut rng, pool.len(), candidate_count)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect()
            };
            let scored = candidates.into_iter().map(|u| (u, scorer.score(v, u))).collect();
            Ok(top_k(scored, k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SemanticNeighborIndex { k, epoch, lists })
}

/// `−mean ln f_s(x_v, pos) + mean ln f_s(x_v, neg)` with probabilities
/// clamped to `[ε, 1 − ε]`. An empty side makes the loss zero.
pub fn fetching_loss<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    scorer: &SemanticScorer,
    center: &Var<'t>,
    positives: &Var<'t>,
    negatives: &Var<'t>,
) -> Result<Var<'t>> {
    if center.rows() != 1 {
        return Err(Error::shape("fetching_loss", format!("center {:?} is not one row", center.shape())));
    }
    if positives.rows() == 0 || negatives.rows() == 0 {
        log::warn!("fetching loss skipped: empty positive or negative set");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mean_ln = |others: &Var<'t>| -> Result<Var<'t>> {
        let centers = center.embedding_lookup(&vec![0; others.rows()])?;
        scorer
            .score(tape, store, &centers, others)?
            .clamp_probability()?
            .ln()?
            .mean()
    };
    mean_ln(negatives)?.sub(&mean_ln(positives)?)
}

/// Mean fetching loss over `batch`, vectorized over all pairs. Negatives
/// are drawn once per distinct node, so a node listed twice carries twice
/// the weight with the same sample. The default negative count is the
/// node's degree capped at [`MAX_DEFAULT_NEGATIVES`].
pub fn batch_fetching_loss<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    model: &DetModel,
    g: &Graph,
    batch: &[NodeId],
    negatives_per_node: Option<usize>,
    rng: &mut R,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::Contract("fetching loss over an empty batch".into()));
    }
    let mut distinct: Vec<(NodeId, usize)> = Vec::new();
    for &v in batch {
        match distinct.iter_mut().find(|(u, _)| *u == v) {
            Some(entry) => entry.1 += 1,
            None => distinct.push((v, 1)),
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let (mut centers, mut partners, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for &(v, multiplicity) in &distinct {
        let positives = g.one_hop_neighbors(v)?.members;
        let count = negatives_per_node.unwrap_or(positives.len().min(MAX_DEFAULT_NEGATIVES));
        let negatives = if positives.is_empty() || count == 0 {
            Vec::new()
        } else {
            match g.sample_distant_negatives(v, count, rng) {
                Ok(set) => set.members,
                Err(Error::SamplingImpossible(_)) => Vec::new(),
                Err(e) => return Err(e),
            }
        };
        if positives.is_empty() || negatives.is_empty() {
            log::warn!("node {v}: fetching loss skipped for lack of positives or negatives");
            continue;
        }
        let w = multiplicity as f64 * scale;
        for (set, sign) in [(&positives, -1.0), (&negatives, 1.0)] {
            let per = sign * w / set.len() as f64;
            for &u in set.iter() {
                centers.push(v);
                partners.push(u);
                weights.push(per);
            }
        }
    }
    if centers.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut used: Vec<NodeId> = centers.iter().chain(&partners).copied().collect();
    used.sort_unstable();
    used.dedup();
    let position = |v: NodeId| used.binary_search(&v).expect("collected");
    let inputs = model.node_inputs(tape, g, &used)?;
    let ci: Vec<usize> = centers.iter().map(|&v| position(v)).collect();
    let pi: Vec<usize> = partners.iter().map(|&v| position(v)).collect();
    let ln_f = model
        .first_scorer()
        .score(tape, &model.params, &inputs.gather_rows(&ci)?, &inputs.gather_rows(&pi)?)?
        .clamp_probability()?
        .ln()?;
    ln_f.transpose()?
        .matmul(&tape.constant(Tensor::column_vector(weights)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, InputKind, Mode, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scorer(store: &mut ParamStore, hidden: usize) -> SemanticScorer {
        SemanticScorer::new(store, "s", hidden, 1, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn indifferent_scorer_gives_zero_loss() {
        let mut store = ParamStore::new();
        let s = scorer(&mut store, 3);
        store.set(s.weight, Tensor::zeros(1, 3)).unwrap();
        let tape = Tape::new();
        let c = tape.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let p = tape.constant(Tensor::full(2, 3, 0.7));
        let n = tape.constant(Tensor::full(4, 3, -2.0));
        let l = fetching_loss(&tape, &store, &s, &c, &p, &n).unwrap().value().item().unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn calibrated_scores() {
        // one-dimensional inputs with W_s = 1, b_s = 0: f_s = σ(x_v − x_j)
        let mut store = ParamStore::new();
        let s = scorer(&mut store, 1);
        store.set(s.weight, Tensor::scalar(1.0)).unwrap();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(0.0));
        let p = tape.constant(Tensor::column_vector(vec![-logit(0.9); 3]));
        let n = tape.constant(Tensor::column_vector(vec![-logit(0.1); 2]));
        let l = fetching_loss(&tape, &store, &s, &c, &p, &n).unwrap().value().item().unwrap();
        assert!((l - (-2.1972)).abs() < 1e-4, "{l}");
        let swapped = fetching_loss(&tape, &store, &s, &c, &n, &p).unwrap().value().item().unwrap();
        assert_eq!(swapped, -l);
        let empty = tape.constant(Tensor::zeros(0, 1));
        let zero = fetching_loss(&tape, &store, &s, &c, &p, &empty).unwrap().value().item().unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn staleness() {
        let index = SemanticNeighborIndex::empty(3, 2, 10);
        assert!(index.check_fresh(10, 10).is_ok());
        assert!(index.check_fresh(19, 10).is_ok());
        assert!(matches!(index.check_fresh(20, 10), Err(Error::StaleIndex { .. })));
        assert!(index.ensure_fresh(20, 10, false).is_ok());
        assert!(index.ensure_fresh(20, 10, true).is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_id() {
        let out = top_k(vec![(5, 0.5), (2, 0.7), (1, 0.5), (9, 0.1)], 3);
        assert_eq!(out, vec![(2, 0.7), (1, 0.5), (5, 0.5)]);
    }

    fn tiny_model(n: usize) -> DetModel {
        let mut cfg = ModelConfig::new(Mode::EgoNode, HeadKind::Regression, InputKind::Embedding { count: n });
        cfg.hidden = 4;
        cfg.heads = 1;
        cfg.ffn_hidden = 4;
        cfg.layers = 1;
        DetModel::new(cfg, 7).unwrap()
    }

    #[test]
    fn refresh_excludes_closed_neighborhood_and_is_deterministic() {
        let g = Graph::undirected(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
        let model = tiny_model(6);
        let a = refresh_index(&model, &g, 10, 2, 3, 0).unwrap();
        let b = refresh_index(&model, &g, 10, 2, 3, 0).unwrap();
        assert_eq!(a, b);
        for v in 0..6 {
            assert!(a.neighbors(v).len() <= 2);
            for &(u, s) in a.neighbors(v) {
                assert!(u != v && !g.neighbor_slice(v).contains(&u));
                assert!(s > 0.0 && s < 1.0);
            }
        }
        // exhaustive when the pool fits
        let full = refresh_index(&model, &g, 10, 100, 3, 0).unwrap();
        assert_eq!(full.neighbors(0).len(), 4);
    }

    #[test]
    fn duplicated_node_doubles_weight() {
        let g = Graph::undirected(5, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let model = tiny_model(5);
        let loss = |batch: &[usize]| {
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            batch_fetching_loss(&tape, &model, &g, batch, Some(2), &mut rng)
                .unwrap()
                .value()
                .item()
                .unwrap()
        };
        let single = loss(&[1]);
        let doubled_num = loss(&[1, 1, 3]) * 3.0;
        let once_num = loss(&[1, 3]) * 2.0;
        assert!((doubled_num - once_num - single).abs() < 1e-12);
    }
}
