//! The two attention encoders and the bias exchange between them.
//!
//! The structural encoder is standard multi-head dot-product attention over
//! a node's context (its ego graph, or the whole graph plus a virtual
//! context node), with shortest-path-distance embeddings added on the key
//! and value side. The semantic encoder scores pairs with the learnable
//! difference operator `W_s (x_i − x_j) + b_s` and softmaxes those logits.
//! Both wrap attention in the same post-norm transformer block. Row 0 of
//! every context is the center (or the virtual node).

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Mask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-9;

/// Identifies a context row for index alignment during bias exchange.
pub type NodeKey = usize;

/// Key reserved for the virtual context node.
pub const VIRTUAL_NODE: NodeKey = usize::MAX;

pub struct Attention<'t> {
    pub out: Var<'t>,
    pub scores: Var<'t>,
    pub logits: Var<'t>,
}

/// `logits = q·kᵀ/√h + bias`, `scores = softmax(logits)`, `out = scores·v`.
pub fn scaled_dot_attention<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    bias: Option<&Var<'t>>,
    mask: Option<&Mask>,
) -> Result<Attention<'t>> {
    if q.shape() != k.shape() || k.rows() != v.rows() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let mut logits = q.matmul_t(k)?.scale(1.0 / (q.cols() as f64).sqrt())?;
    if let Some(b) = bias {
        logits = logits.add(b)?;
    }
    let scores = logits.row_softmax(None, mask)?;
    let out = scores.matmul(v)?;
    Ok(Attention { out, scores, logits })
}

/// Per-pair distance buckets for a context of `size` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceBuckets {
    size: usize,
    buckets: usize,
    index: Vec<usize>,
}

impl DistanceBuckets {
    /// Every query row sees the same bucket per key: the key's distance from
    /// the center.
    pub fn relative_to_center(key_buckets: &[usize], buckets: usize) -> Result<Self> {
        let size = key_buckets.len();
        let index = (0..size).flat_map(|_| key_buckets.iter().copied()).collect();
        Self::from_index(size, buckets, index)
    }

    /// Row-major `size × size` bucket matrix.
    pub fn from_index(size: usize, buckets: usize, index: Vec<usize>) -> Result<Self> {
        if index.len() != size * size || index.iter().any(|&b| b >= buckets) {
            return Err(Error::Contract(format!(
                "distance bucket matrix of {} entries for {size} rows and {buckets} buckets",
                index.len()
            )));
        }
        Ok(DistanceBuckets { size, buckets, index })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.index[i * self.size + j]
    }

    /// Same buckets with rows and columns reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n = self.size;
        let index = (0..n * n).map(|k| self.get(order[k / n], order[k % n])).collect();
        DistanceBuckets { size: n, buckets: self.buckets, index }
    }
}

/// Distance embeddings for the key/value side of structural attention.
pub struct PositionBias<'a, 't> {
    /// `buckets × h` table.
    pub table: Var<'t>,
    pub buckets: &'a DistanceBuckets,
}

/// Inverted dropout driven by its own seeded generator.
pub struct Dropout {
    rate: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout { rate, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn apply<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        if self.rate <= 0.0 {
            return Ok(*x);
        }
        let keep = 1.0 - self.rate;
        let [r, c] = x.shape();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.mul(&x.tape().constant(Tensor::new(r, c, mask)?))
    }
}

fn apply_dropout<'t>(dropout: Option<&Dropout>, x: Var<'t>) -> Result<Var<'t>> {
    match dropout {
        Some(d) => d.apply(&x),
        None => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, prefix: &str, hidden: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(1, hidden, 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(1, hidden)),
        }
    }

    fn apply<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&tape.param(store, self.gamma), &tape.param(store, self.beta), LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, hidden: usize, inner: usize, rng: &mut R) -> Self {
        FeedForward {
            w1: store.add_glorot(format!("{prefix}.w1"), hidden, inner, rng),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, inner)),
            w2: store.add_glorot(format!("{prefix}.w2"), inner, hidden, rng),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, hidden)),
        }
    }

    fn apply<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>, dropout: Option<&Dropout>) -> Result<Var<'t>> {
        let p = |id| tape.param(store, id);
        let inner = x.affine(&p(self.w1), &p(self.b1))?.relu()?;
        let inner = apply_dropout(dropout, inner)?;
        inner.affine(&p(self.w2), &p(self.b2))
    }
}

/// Attention output wrapped as `LN(x + attn)` then `LN(y + FFN(y))`.
fn residual_block<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    x: &Var<'t>,
    attended: Var<'t>,
    ln1: &LayerNormParams,
    ff: &FeedForward,
    ln2: &LayerNormParams,
    dropout: Option<&Dropout>,
) -> Result<Var<'t>> {
    let attended = apply_dropout(dropout, attended)?;
    let y = ln1.apply(tape, store, &x.add(&attended)?)?;
    let f = apply_dropout(dropout, ff.apply(tape, store, &y, dropout)?)?;
    ln2.apply(tape, store, &y.add(&f)?)
}

fn mean_of<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = acc.add(p)?;
    }
    if parts.len() > 1 {
        acc = acc.scale(1.0 / parts.len() as f64)?;
    }
    Ok(acc)
}

/// Output of one encoder layer over a context.
pub struct LayerOutput<'t> {
    pub out: Var<'t>,
    /// Attention logits averaged over heads, including any added bias.
    pub logits: Var<'t>,
    /// Per-head attention scores.
    pub scores: Vec<Var<'t>>,
}

/// One structural transformer block.
#[derive(Clone, Debug)]
pub struct StructuralLayer {
    pub hidden: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1: LayerNormParams,
    pub ff: FeedForward,
    pub ln2: LayerNormParams,
}

struct Projected<'t> {
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    pos_k: Option<Var<'t>>,
    pos_v: Option<Var<'t>>,
}

impl StructuralLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, hidden: usize, heads: usize, ffn_hidden: usize, rng: &mut R) -> Self {
        assert!(heads >= 1 && hidden.is_multiple_of(heads), "hidden size {hidden} not divisible by {heads} heads");
        StructuralLayer {
            hidden,
            heads,
            wq: store.add_glorot(format!("{prefix}.wq"), hidden, hidden, rng),
            wk: store.add_glorot(format!("{prefix}.wk"), hidden, hidden, rng),
            wv: store.add_glorot(format!("{prefix}.wv"), hidden, hidden, rng),
            wo: store.add_glorot(format!("{prefix}.wo"), hidden, hidden, rng),
            bo: store.add(format!("{prefix}.bo"), Tensor::zeros(1, hidden)),
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), hidden),
            ff: FeedForward::new(store, &format!("{prefix}.ff"), hidden, ffn_hidden, rng),
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), hidden),
        }
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn project<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>, pos: Option<&PositionBias<'_, 't>>) -> Result<Projected<'t>> {
        if x.cols() != self.hidden {
            return Err(Error::shape("structural layer", format!("input {:?}, hidden {}", x.shape(), self.hidden)));
        }
        if let Some(p) = pos {
            if p.buckets.size() != x.rows() {
                return Err(Error::Contract(format!(
                    "distance buckets for {} rows, context has {}",
                    p.buckets.size(),
                    x.rows()
                )));
            }
        }
        let (wk, wv) = (tape.param(store, self.wk), tape.param(store, self.wv));
        Ok(Projected {
            q: x.matmul(&tape.param(store, self.wq))?,
            k: x.matmul(&wk)?,
            v: x.matmul(&wv)?,
            pos_k: pos.map(|p| p.table.matmul(&wk)).transpose()?,
            pos_v: pos.map(|p| p.table.matmul(&wv)).transpose()?,
        })
    }

    fn head_logits<'t>(&self, pr: &Projected<'t>, hd: usize, pos: Option<&PositionBias<'_, 't>>) -> Result<Var<'t>> {
        let d = self.head_dim();
        let q = pr.q.slice_cols(hd * d, d)?;
        let mut logits = q.matmul_t(&pr.k.slice_cols(hd * d, d)?)?;
        if let (Some(p), Some(pk)) = (pos, &pr.pos_k) {
            // q_i · (d_{b(i,j)} W_k): per-bucket scores gathered per pair
            let per_bucket = q.matmul_t(&pk.slice_cols(hd * d, d)?)?;
            logits = logits.add(&per_bucket.gather_cols(&p.buckets.index, p.buckets.size)?)?;
        }
        logits.scale(1.0 / (d as f64).sqrt())
    }

    /// Unbiased attention logits averaged over heads.
    pub fn logits<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>, pos: Option<&PositionBias<'_, 't>>) -> Result<Var<'t>> {
        let pr = self.project(tape, store, x, pos)?;
        let heads = (0..self.heads)
            .map(|hd| self.head_logits(&pr, hd, pos))
            .collect::<Result<Vec<_>>>()?;
        mean_of(&heads)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: &Var<'t>,
        pos: Option<&PositionBias<'_, 't>>,
        bias: Option<&Var<'t>>,
        mask: Option<&Mask>,
        dropout: Option<&Dropout>,
    ) -> Result<LayerOutput<'t>> {
        let n = x.rows();
        if let Some(b) = bias {
            if b.shape() != [n, n] {
                return Err(Error::Contract(format!("bias {:?} for a context of {n} rows", b.shape())));
            }
        }
        let pr = self.project(tape, store, x, pos)?;
        let d = self.head_dim();
        let mut outs = Vec::with_capacity(self.heads);
        let mut all_logits = Vec::with_capacity(self.heads);
        let mut scores = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let mut logits = self.head_logits(&pr, hd, pos)?;
            if let Some(b) = bias {
                logits = logits.add(b)?;
            }
            let a = logits.row_softmax(None, mask)?;
            let mut out = a.matmul(&pr.v.slice_cols(hd * d, d)?)?;
            if let (Some(p), Some(pv)) = (pos, &pr.pos_v) {
                let mass = a.bucket_sum(&p.buckets.index, p.buckets.buckets)?;
                out = out.add(&mass.matmul(&pv.slice_cols(hd * d, d)?)?)?;
            }
            outs.push(out);
            all_logits.push(logits);
            scores.push(a);
        }
        let heads = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs)? };
        let attended = heads.affine(&tape.param(store, self.wo), &tape.param(store, self.bo))?;
        let out = residual_block(tape, store, x, attended, &self.ln1, &self.ff, &self.ln2, dropout)?;
        Ok(LayerOutput { out, logits: mean_of(&all_logits)?, scores })
    }
}

/// The learnable difference operator `f_s(x_i, x_j) = σ(W_s (x_i − x_j) + b_s)`,
/// one row of `W_s` and one entry of `b_s` per head.
#[derive(Clone, Debug)]
pub struct SemanticScorer {
    pub heads: usize,
    pub hidden: usize,
    /// `heads × h`
    pub weight: ParamId,
    /// `1 × heads`
    pub bias: ParamId,
}

impl SemanticScorer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, hidden: usize, heads: usize, rng: &mut R) -> Self {
        SemanticScorer {
            heads,
            hidden,
            weight: store.add_glorot(format!("{prefix}.w_s"), heads, hidden, rng),
            bias: store.add(format!("{prefix}.b_s"), Tensor::zeros(1, heads)),
        }
    }

    /// Pre-activation `z = W_s (x_i − x_j) + b_s` for row-aligned inputs;
    /// one row per pair, one column per head.
    pub fn semantic_logit<'t>(&self, tape: &'t Tape, store: &ParamStore, x_i: &Var<'t>, x_j: &Var<'t>) -> Result<Var<'t>> {
        if x_i.shape() != x_j.shape() || x_i.cols() != self.hidden {
            return Err(Error::shape(
                "semantic_logit",
                format!("{:?} vs {:?}, hidden {}", x_i.shape(), x_j.shape(), self.hidden),
            ));
        }
        x_i.sub(x_j)?
            .matmul_t(&tape.param(store, self.weight))?
            .add(&tape.param(store, self.bias))
    }

    /// Per-head `σ(z)`.
    pub fn head_scores<'t>(&self, tape: &'t Tape, store: &ParamStore, x_i: &Var<'t>, x_j: &Var<'t>) -> Result<Var<'t>> {
        self.semantic_logit(tape, store, x_i, x_j)?.sigmoid()
    }

    /// Similarity `f_s` per pair: the head-mean of `σ(z)` (`pairs × 1`).
    pub fn score<'t>(&self, tape: &'t Tape, store: &ParamStore, x_i: &Var<'t>, x_j: &Var<'t>) -> Result<Var<'t>> {
        let per_head = self.head_scores(tape, store, x_i, x_j)?;
        if self.heads == 1 {
            return Ok(per_head);
        }
        per_head.matmul(&tape.constant(Tensor::full(self.heads, 1, 1.0 / self.heads as f64)))
    }

    /// Tape-free `f_s` for inference-time ranking.
    pub fn score_values(&self, store: &ParamStore, x_i: &[f64], x_j: &[f64]) -> f64 {
        let (w, b) = (store.get(self.weight), store.get(self.bias));
        let mut total = 0.0;
        for hd in 0..self.heads {
            let z: f64 = w.row(hd).iter().zip(x_i.iter().zip(x_j)).map(|(w, (a, c))| w * (a - c)).sum();
            total += sigmoid(z + b.data()[hd]);
        }
        total / self.heads as f64
    }

    /// Per-head `n × n` logit matrices `z_ij` over a context.
    pub fn pair_logits<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let projected = x.matmul_t(&tape.param(store, self.weight))?;
        let bias = tape.param(store, self.bias);
        (0..self.heads)
            .map(|hd| projected.slice_cols(hd, 1)?.outer_diff()?.add(&bias.slice_cols(hd, 1)?))
            .collect()
    }
}

/// One semantic transformer block: attention from difference-operator
/// logits over value-projected inputs, then the residual/feed-forward block.
#[derive(Clone, Debug)]
pub struct SemanticLayer {
    pub hidden: usize,
    pub scorer: SemanticScorer,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1: LayerNormParams,
    pub ff: FeedForward,
    pub ln2: LayerNormParams,
}

impl SemanticLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, hidden: usize, heads: usize, ffn_hidden: usize, rng: &mut R) -> Self {
        assert!(heads >= 1 && hidden.is_multiple_of(heads), "hidden size {hidden} not divisible by {heads} heads");
        SemanticLayer {
            hidden,
            scorer: SemanticScorer::new(store, prefix, hidden, heads, rng),
            wv: store.add_glorot(format!("{prefix}.wv"), hidden, hidden, rng),
            wo: store.add_glorot(format!("{prefix}.wo"), hidden, hidden, rng),
            bo: store.add(format!("{prefix}.bo"), Tensor::zeros(1, hidden)),
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), hidden),
            ff: FeedForward::new(store, &format!("{prefix}.ff"), hidden, ffn_hidden, rng),
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), hidden),
        }
    }

    pub fn heads(&self) -> usize {
        self.scorer.heads
    }

    /// Unbiased semantic logits averaged over heads.
    pub fn logits<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        mean_of(&self.scorer.pair_logits(tape, store, x)?)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: &Var<'t>,
        bias: Option<&Var<'t>>,
        dropout: Option<&Dropout>,
    ) -> Result<LayerOutput<'t>> {
        let n = x.rows();
        if x.cols() != self.hidden {
            return Err(Error::shape("semantic layer", format!("input {:?}, hidden {}", x.shape(), self.hidden)));
        }
        if let Some(b) = bias {
            if b.shape() != [n, n] {
                return Err(Error::Contract(format!("bias {:?} for a context of {n} rows", b.shape())));
            }
        }
        let v = x.matmul(&tape.param(store, self.wv))?;
        let d = self.hidden / self.heads();
        let mut outs = Vec::with_capacity(self.heads());
        let mut all_logits = Vec::with_capacity(self.heads());
        let mut scores = Vec::with_capacity(self.heads());
        for (hd, mut logits) in self.scorer.pair_logits(tape, store, x)?.into_iter().enumerate() {
            if let Some(b) = bias {
                logits = logits.add(b)?;
            }
            let a = logits.row_softmax(None, None)?;
            outs.push(a.matmul(&v.slice_cols(hd * d, d)?)?);
            all_logits.push(logits);
            scores.push(a);
        }
        let heads = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs)? };
        let attended = heads.affine(&tape.param(store, self.wo), &tape.param(store, self.bo))?;
        let out = residual_block(tape, store, x, attended, &self.ln1, &self.ff, &self.ln2, dropout)?;
        Ok(LayerOutput { out, logits: mean_of(&all_logits)?, scores })
    }
}

/// One structural block over a context whose row 0 is the center (or the
/// virtual node); returns that row.
pub fn structural_encode<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    layer: &StructuralLayer,
    inputs: &Var<'t>,
    pos: Option<&PositionBias<'_, 't>>,
    semantic_bias: Option<&Var<'t>>,
) -> Result<Var<'t>> {
    layer.forward(tape, store, inputs, pos, semantic_bias, None, None)?.out.gather_rows(&[0])
}

/// One semantic block over `[center, semantic neighbors...]`; returns the
/// center row. With no neighbors the context is the center alone.
pub fn semantic_encode<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    layer: &SemanticLayer,
    inputs: &Var<'t>,
    structural_bias: Option<&Var<'t>>,
) -> Result<Var<'t>> {
    layer.forward(tape, store, inputs, structural_bias, None)?.out.gather_rows(&[0])
}

/// Re-indexes detached logits from one context onto another:
/// `out[p, q] = λ · logits[p', q']` where `p'`, `q'` are the first positions
/// in `source` holding the nodes at `p`, `q` in `target`; zero otherwise.
pub fn bias_exchange(logits: &Tensor, source: &[NodeKey], target: &[NodeKey], lambda: f64) -> Result<Tensor> {
    if logits.shape() != [source.len(), source.len()] {
        return Err(Error::Contract(format!(
            "logits {:?} for {} source nodes",
            logits.shape(),
            source.len()
        )));
    }
    let b = target.len();
    let mut out = Tensor::zeros(b, b);
    if lambda == 0.0 {
        return Ok(out);
    }
    let position: Vec<Option<usize>> = target
        .iter()
        .map(|t| source.iter().position(|s| s == t))
        .collect();
    for p in 0..b {
        let Some(ps) = position[p] else { continue };
        for q in 0..b {
            if let Some(qs) = position[q] {
                out.set(p, q, lambda * logits.get(ps, qs));
            }
        }
    }
    Ok(out)
}
