//! The dual-encoding stack: per-layer structural and semantic blocks with
//! bias exchange, τ-combination, virtual-node graph readout, and task heads.

use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::embed::{AtomTransformer, CentralityTable, SpdTable};
use crate::encoders::{
    bias_exchange, DistanceBuckets, Dropout, NodeKey, PositionBias, SemanticLayer, SemanticScorer, StructuralLayer,
    VIRTUAL_NODE,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Hop, KnowledgeGraph, NodeId};
use crate::semantic::SemanticNeighborIndex;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    WholeGraph,
    EgoNode,
    Kg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    LayerWise,
    FinalOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Regression,
    Classification { classes: usize, multi_label: bool },
    Entity,
}

/// Where raw node embeddings come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    /// Learned table, one row per node or entity.
    Embedding { count: usize },
    /// Affine projection of node features.
    Features { dim: usize },
    /// One shared learned token for every node.
    Token,
}

keyword_enum!(Mode { Mode::WholeGraph => "whole-graph", Mode::EgoNode => "ego-node", Mode::Kg => "kg" });
keyword_enum!(Combine { Combine::LayerWise => "layer-wise", Combine::FinalOnly => "final-only" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub head: HeadKind,
    pub input: InputKind,
    /// Relation vocabulary including inverse relations.
    pub relation_count: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub semantic_heads: usize,
    pub ffn_hidden: usize,
    pub max_degree: usize,
    pub max_spd: usize,
    pub atom_layers: usize,
    pub tau: f64,
    pub lambda: f64,
    pub combine: Combine,
    /// Largest graph accepted by whole-graph mode.
    pub node_cap: usize,
    /// Largest number of structural neighbors kept per ego or KG context.
    pub max_context: usize,
}

impl ModelConfig {
    pub fn new(mode: Mode, head: HeadKind, input: InputKind) -> Self {
        ModelConfig {
            mode,
            head,
            input,
            relation_count: 0,
            layers: 2,
            hidden: 32,
            heads: 4,
            semantic_heads: 1,
            ffn_hidden: 64,
            max_degree: 64,
            max_spd: 8,
            atom_layers: 1,
            tau: 0.15,
            lambda: 1.0,
            combine: Combine::LayerWise,
            node_cap: 256,
            max_context: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !self.lambda.is_finite() {
            return bad("lambda must be finite".into());
        }
        if self.layers == 0 || self.hidden == 0 || self.ffn_hidden == 0 {
            return bad("layers, hidden and ffn_hidden must be positive".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.semantic_heads == 0 || !self.hidden.is_multiple_of(self.semantic_heads) {
            return bad(format!("hidden {} not divisible by semantic_heads {}", self.hidden, self.semantic_heads));
        }
        if self.node_cap == 0 || self.max_context == 0 {
            return bad("node_cap and max_context must be positive".into());
        }
        match (self.mode, self.head, self.input) {
            (Mode::Kg, HeadKind::Entity, InputKind::Embedding { .. }) if self.relation_count > 0 => Ok(()),
            (Mode::Kg, ..) => bad("kg mode needs an entity head, entity embeddings and relations".into()),
            (_, HeadKind::Entity, _) => bad("entity head requires kg mode".into()),
            (Mode::WholeGraph, _, InputKind::Token) => Ok(()),
            (Mode::WholeGraph, ..) => bad("whole-graph mode uses token inputs".into()),
            (Mode::EgoNode, _, InputKind::Token) => bad("ego-node mode needs embeddings or features".into()),
            _ => Ok(()),
        }
    }

    /// `key=value` lines describing everything that determines parameter
    /// shapes and forward behaviour.
    pub fn manifest(&self) -> Vec<(String, String)> {
        let mut out = vec![("mode".to_string(), self.mode.to_string())];
        match self.head {
            HeadKind::Regression => out.push(("head".into(), "regression".into())),
            HeadKind::Classification { classes, multi_label } => {
                out.push(("head".into(), if multi_label { "multi-label" } else { "classification" }.into()));
                out.push(("classes".into(), classes.to_string()));
            }
            HeadKind::Entity => out.push(("head".into(), "entity".into())),
        }
        match self.input {
            InputKind::Embedding { count } => {
                out.push(("input".into(), "embedding".into()));
                out.push(("vocab".into(), count.to_string()));
            }
            InputKind::Features { dim } => {
                out.push(("input".into(), "features".into()));
                out.push(("feature_dim".into(), dim.to_string()));
            }
            InputKind::Token => out.push(("input".into(), "token".into())),
        }
        let numbers: [(&str, String); 14] = [
            ("relations", self.relation_count.to_string()),
            ("layers", self.layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("semantic_heads", self.semantic_heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("max_degree", self.max_degree.to_string()),
            ("max_spd", self.max_spd.to_string()),
            ("atom_layers", self.atom_layers.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("lambda", format!("{:?}", self.lambda)),
            ("combine", self.combine.to_string()),
            ("node_cap", self.node_cap.to_string()),
            ("max_context", self.max_context.to_string()),
        ];
        out.extend(numbers.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn from_manifest(entries: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            entries
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{key}`")))
        };
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Checkpoint(format!("manifest `{key}` has bad value `{v}`")))
        }
        let n = |key: &str| -> Result<usize> { num(key, get(key)?) };
        let head = match get("head")? {
            "regression" => HeadKind::Regression,
            "classification" => HeadKind::Classification { classes: n("classes")?, multi_label: false },
            "multi-label" => HeadKind::Classification { classes: n("classes")?, multi_label: true },
            "entity" => HeadKind::Entity,
            other => return Err(Error::Checkpoint(format!("unknown head `{other}`"))),
        };
        let input = match get("input")? {
            "embedding" => InputKind::Embedding { count: n("vocab")? },
            "features" => InputKind::Features { dim: n("feature_dim")? },
            "token" => InputKind::Token,
            other => return Err(Error::Checkpoint(format!("unknown input `{other}`"))),
        };
        let cfg = ModelConfig {
            mode: get("mode")?.parse().map_err(|e: Error| Error::Checkpoint(e.to_string()))?,
            head,
            input,
            relation_count: n("relations")?,
            layers: n("layers")?,
            hidden: n("hidden")?,
            heads: n("heads")?,
            semantic_heads: n("semantic_heads")?,
            ffn_hidden: n("ffn_hidden")?,
            max_degree: n("max_degree")?,
            max_spd: n("max_spd")?,
            atom_layers: n("atom_layers")?,
            tau: num("tau", get("tau")?)?,
            lambda: num("lambda", get("lambda")?)?,
            combine: get("combine")?.parse().map_err(|e: Error| Error::Checkpoint(e.to_string()))?,
            node_cap: n("node_cap")?,
            max_context: n("max_context")?,
        };
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
enum InputParams {
    Embedding(ParamId),
    Features { weight: ParamId, bias: ParamId },
    Token(ParamId),
}

#[derive(Clone, Debug)]
enum HeadParams {
    Affine { weight: ParamId, bias: ParamId },
    Entity { bias: ParamId },
}

/// Output of the dual stack for one query: the combined row and both
/// branch rows of the last layer.
pub struct NodeOutput<'t> {
    pub h: Var<'t>,
    pub h_st: Var<'t>,
    pub h_se: Var<'t>,
}

/// Token matrix of one branch plus the node identity of each row.
struct Context<'t> {
    tokens: Var<'t>,
    keys: Vec<NodeKey>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Shared {
    Center,
    All,
}

#[derive(Clone, Debug)]
pub struct DetModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    input: InputParams,
    pub centrality: CentralityTable,
    pub spd: SpdTable,
    virtual_node: Option<ParamId>,
    virtual_distance: Option<ParamId>,
    pub atom: Option<AtomTransformer>,
    mask_token: Option<ParamId>,
    pub structural: Vec<StructuralLayer>,
    pub semantic: Vec<SemanticLayer>,
    head: HeadParams,
    exchange_log: Option<Arc<Mutex<ExchangeLog>>>,
}

/// Exchanged biases in the order a forward pass produces them. While
/// replaying, every exchange returns the recorded bias instead of
/// recomputing it, which pins the detached biases at the recording point.
#[derive(Clone, Debug, Default)]
pub struct ExchangeLog {
    entries: Vec<(Tensor, Tensor)>,
    cursor: usize,
    replaying: bool,
}

impl ExchangeLog {
    /// Clears the log and records from now on.
    pub fn start_recording(&mut self) {
        self.entries.clear();
        self.cursor = 0;
        self.replaying = false;
    }

    /// Replays from the first recorded entry.
    pub fn start_replay(&mut self) {
        self.cursor = 0;
        self.replaying = true;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn replay(&mut self) -> Option<(Tensor, Tensor)> {
        if !self.replaying {
            return None;
        }
        let entry = self.entries.get(self.cursor).cloned();
        self.cursor += 1;
        assert!(entry.is_some(), "replay ran past the recorded exchanges");
        entry
    }

    fn record(&mut self, pair: &(Tensor, Tensor)) {
        self.entries.push(pair.clone());
    }
}

impl DetModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let input = match config.input {
            InputKind::Embedding { count } => InputParams::Embedding(store.add_glorot("input.embedding", count, h, &mut rng)),
            InputKind::Features { dim } => InputParams::Features {
                weight: store.add_glorot("input.weight", dim, h, &mut rng),
                bias: store.add("input.bias", Tensor::zeros(1, h)),
            },
            InputKind::Token => InputParams::Token(store.add_glorot("input.token", 1, h, &mut rng)),
        };
        let centrality = CentralityTable::new(&mut store, "embed", h, config.max_degree, &mut rng);
        let spd = SpdTable::new(&mut store, "embed", h, config.max_spd, &mut rng);
        let (virtual_node, virtual_distance) = if config.mode == Mode::WholeGraph {
            (
                Some(store.add_glorot("readout.virtual_node", 1, h, &mut rng)),
                Some(store.add_glorot("readout.virtual_distance", 1, h, &mut rng)),
            )
        } else {
            (None, None)
        };
        let (atom, mask_token) = if config.mode == Mode::Kg {
            let atom = AtomTransformer::new(
                &mut store,
                "atom",
                h,
                config.relation_count,
                config.atom_layers,
                config.heads,
                config.ffn_hidden,
                &mut rng,
            );
            (Some(atom), Some(store.add_glorot("atom.mask_token", 1, h, &mut rng)))
        } else {
            (None, None)
        };
        let mut structural = Vec::with_capacity(config.layers);
        let mut semantic = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            structural.push(StructuralLayer::new(&mut store, &format!("structural{l}"), h, config.heads, config.ffn_hidden, &mut rng));
            let layer = SemanticLayer::new(&mut store, &format!("semantic{l}"), h, config.semantic_heads, config.ffn_hidden, &mut rng);
            pair_scorer_heads(&mut store, &layer.scorer);
            semantic.push(layer);
        }
        let head = match config.head {
            HeadKind::Regression => HeadParams::Affine {
                weight: store.add_glorot("head.weight", h, 1, &mut rng),
                bias: store.add("head.bias", Tensor::zeros(1, 1)),
            },
            HeadKind::Classification { classes, .. } => HeadParams::Affine {
                weight: store.add_glorot("head.weight", h, classes, &mut rng),
                bias: store.add("head.bias", Tensor::zeros(1, classes)),
            },
            HeadKind::Entity => {
                let InputKind::Embedding { count } = config.input else { unreachable!("validated") };
                HeadParams::Entity { bias: store.add("head.entity_bias", Tensor::zeros(1, count)) }
            }
        };
        Ok(DetModel {
            config,
            params: store,
            input,
            centrality,
            spd,
            virtual_node,
            virtual_distance,
            atom,
            mask_token,
            structural,
            semantic,
            head,
            exchange_log: None,
        })
    }

    /// Attaches (or with `None` detaches) a log that records or replays the
    /// exchanged biases of every forward pass.
    pub fn set_exchange_log(&mut self, log: Option<Arc<Mutex<ExchangeLog>>>) {
        self.exchange_log = log;
    }

    /// Scorer whose `f_s` drives the fetching loss and the neighbor index.
    pub fn first_scorer(&self) -> &SemanticScorer {
        &self.semantic[0].scorer
    }

    /// Parameters that exist only for the semantic branch.
    pub fn semantic_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, name, _)| name.starts_with("semantic"))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Parameters that exist only for the structural branch.
    pub fn structural_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .params
            .iter()
            .filter(|(_, name, _)| name.starts_with("structural"))
            .map(|(id, _, _)| id)
            .collect();
        ids.push(self.spd.table);
        if let Some(v) = self.virtual_distance {
            ids.push(v);
        }
        ids.sort();
        ids
    }

    fn p<'t>(&self, tape: &'t Tape, id: ParamId) -> Var<'t> {
        tape.param(&self.params, id)
    }

    /// Layer-0 inputs: raw embedding plus degree centrality.
    pub fn node_inputs<'t>(&self, tape: &'t Tape, g: &Graph, nodes: &[NodeId]) -> Result<Var<'t>> {
        for &v in nodes {
            if v >= g.node_count() {
                return Err(Error::InvalidNode { node: v, count: g.node_count() });
            }
        }
        let raw = match &self.input {
            InputParams::Embedding(table) => {
                let InputKind::Embedding { count } = self.config.input else { unreachable!() };
                if let Some(&bad) = nodes.iter().find(|&&v| v >= count) {
                    return Err(Error::Vocabulary { kind: "node", id: bad, size: count });
                }
                self.p(tape, *table).embedding_lookup(nodes)?
            }
            InputParams::Features { weight, bias } => {
                let features = g
                    .features()
                    .ok_or_else(|| Error::Mode("model expects node features but the graph has none".into()))?;
                let mut rows = Tensor::zeros(nodes.len(), features.cols());
                for (i, &v) in nodes.iter().enumerate() {
                    rows.row_mut(i).copy_from_slice(features.row(v));
                }
                tape.constant(rows).affine(&self.p(tape, *weight), &self.p(tape, *bias))?
            }
            InputParams::Token(token) => self.p(tape, *token).embedding_lookup(&vec![0; nodes.len()])?,
        };
        let degrees = nodes.iter().map(|&v| g.degree(v)).collect::<Result<Vec<_>>>()?;
        raw.add(&self.centrality.lookup(tape, &self.params, &degrees)?)
    }

    /// Tape-free layer-0 inputs, one row per node.
    pub fn input_values(&self, g: &Graph, nodes: &[NodeId]) -> Result<Tensor> {
        let tape = Tape::new();
        Ok((*self.node_inputs(&tape, g, nodes)?.value()).clone())
    }

    fn mix<'t>(&self, st: &Var<'t>, se: &Var<'t>) -> Result<Var<'t>> {
        let tau = self.config.tau;
        st.scale(tau)?.add(&se.scale(1.0 - tau)?)
    }

    /// Runs the layered dual encoder over fixed token sets. Row 0 of both
    /// contexts is the query; its final combined row is the output.
    fn dual_stack<'t>(
        &self,
        tape: &'t Tape,
        st: Context<'t>,
        se: Context<'t>,
        positions: Option<(&DistanceBuckets, Var<'t>)>,
        shared: Shared,
        dropout: Option<&Dropout>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let pos = positions.map(|(buckets, table)| PositionBias { table, buckets });
        let (mut xs, mut xe) = (st.tokens, se.tokens);
        let lambda = self.config.lambda;
        let last = self.config.layers - 1;
        for l in 0..=last {
            let (sl, el) = (&self.structural[l], &self.semantic[l]);
            let (bias_st, bias_se) = if lambda != 0.0 {
                let replayed = self.exchange_log.as_ref().and_then(|log| log.lock().expect("log lock").replay());
                let (b_st, b_se) = match replayed {
                    Some(pair) => pair,
                    None => {
                        let raw_st = sl.logits(tape, &self.params, &xs, pos.as_ref())?.value();
                        let raw_se = el.logits(tape, &self.params, &xe)?.value();
                        let pair = (
                            bias_exchange(&raw_se, &se.keys, &st.keys, lambda)?,
                            bias_exchange(&raw_st, &st.keys, &se.keys, lambda)?,
                        );
                        if let Some(log) = &self.exchange_log {
                            log.lock().expect("log lock").record(&pair);
                        }
                        pair
                    }
                };
                (Some(tape.constant(b_st)), Some(tape.constant(b_se)))
            } else {
                (None, None)
            };
            let os = sl.forward(tape, &self.params, &xs, pos.as_ref(), bias_st.as_ref(), None, dropout)?.out;
            let oe = el.forward(tape, &self.params, &xe, bias_se.as_ref(), dropout)?.out;
            if l == last {
                return Ok((os, oe));
            }
            match (self.config.combine, shared) {
                (Combine::FinalOnly, _) => {
                    xs = os;
                    xe = oe;
                }
                (Combine::LayerWise, Shared::All) => {
                    let c = self.mix(&os, &oe)?;
                    xs = c;
                    xe = c;
                }
                (Combine::LayerWise, Shared::Center) => {
                    let c = self.mix(&os.gather_rows(&[0])?, &oe.gather_rows(&[0])?)?;
                    xs = replace_first_row(&os, &c)?;
                    xe = replace_first_row(&oe, &c)?;
                }
            }
        }
        unreachable!("at least one layer")
    }

    fn finish<'t>(&self, os: Var<'t>, oe: Var<'t>) -> Result<NodeOutput<'t>> {
        let h_st = os.gather_rows(&[0])?;
        let h_se = oe.gather_rows(&[0])?;
        Ok(NodeOutput { h: self.mix(&h_st, &h_se)?, h_st, h_se })
    }

    /// Structural neighbors kept for a context, in adjacency order; larger
    /// neighborhoods are subsampled with a per-node seed.
    fn capped<T: Clone>(&self, items: &[T], node: NodeId) -> Vec<T> {
        let cap = self.config.max_context;
        if items.len() <= cap {
            return items.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 ^ node as u64);
        let mut picked = sample(&mut rng, items.len(), cap).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| items[i].clone()).collect()
    }

    fn ego_positions<'t>(&self, tape: &'t Tape, size: usize) -> Result<(DistanceBuckets, Var<'t>)> {
        let mut key_buckets = vec![self.spd.bucket(Hop::Finite(1)); size];
        key_buckets[0] = self.spd.bucket(Hop::Finite(0));
        let buckets = DistanceBuckets::relative_to_center(&key_buckets, self.spd.rows())?;
        Ok((buckets, self.spd.all(tape, &self.params)))
    }

    /// Ego-node forward for one center.
    pub fn forward_node<'t>(
        &self,
        tape: &'t Tape,
        g: &Graph,
        v: NodeId,
        index: &SemanticNeighborIndex,
        dropout: Option<&Dropout>,
    ) -> Result<NodeOutput<'t>> {
        if self.config.mode != Mode::EgoNode {
            return Err(Error::Mode(format!("forward_node needs ego-node mode, model is {}", self.config.mode)));
        }
        if v >= g.node_count() {
            return Err(Error::InvalidNode { node: v, count: g.node_count() });
        }
        let mut st_nodes = vec![v];
        st_nodes.extend(self.capped(g.neighbor_slice(v), v));
        let mut se_nodes = vec![v];
        se_nodes.extend(index.neighbors(v).iter().map(|&(u, _)| u));
        let (buckets, table) = self.ego_positions(tape, st_nodes.len())?;
        let st = Context { tokens: self.node_inputs(tape, g, &st_nodes)?, keys: st_nodes };
        let se = Context { tokens: self.node_inputs(tape, g, &se_nodes)?, keys: se_nodes };
        let (os, oe) = self.dual_stack(tape, st, se, Some((&buckets, table)), Shared::Center, dropout)?;
        self.finish(os, oe)
    }

    /// Combined outputs for several centers, one row each.
    pub fn forward_nodes<'t>(
        &self,
        tape: &'t Tape,
        g: &Graph,
        centers: &[NodeId],
        index: &SemanticNeighborIndex,
        dropout: Option<&Dropout>,
    ) -> Result<Var<'t>> {
        let rows = centers
            .iter()
            .map(|&v| Ok(self.forward_node(tape, g, v, index, dropout)?.h))
            .collect::<Result<Vec<_>>>()?;
        Var::concat_rows(&rows)
    }

    /// Whole-graph forward with a virtual context node at row 0; returns its
    /// output rows.
    pub fn forward_graph<'t>(&self, tape: &'t Tape, g: &Graph, dropout: Option<&Dropout>) -> Result<NodeOutput<'t>> {
        if self.config.mode != Mode::WholeGraph {
            return Err(Error::Mode(format!("forward_graph needs whole-graph mode, model is {}", self.config.mode)));
        }
        let n = g.node_count();
        if n > self.config.node_cap {
            return Err(Error::Mode(format!(
                "graph of {n} nodes exceeds the whole-graph cap of {}; use ego-node mode",
                self.config.node_cap
            )));
        }
        let (Some(vn), Some(vd)) = (self.virtual_node, self.virtual_distance) else {
            unreachable!("whole-graph parameters exist in whole-graph mode")
        };
        let nodes: Vec<NodeId> = (0..n).collect();
        let mut parts = vec![self.p(tape, vn)];
        if n > 0 {
            parts.push(self.node_inputs(tape, g, &nodes)?);
        }
        let tokens = Var::concat_rows(&parts)?;
        let virtual_bucket = self.spd.rows();
        let dist = g.all_pairs_distances();
        let size = n + 1;
        let mut index = vec![virtual_bucket; size * size];
        for i in 0..n {
            for j in 0..n {
                index[(i + 1) * size + j + 1] = self.spd.bucket(dist[i][j]);
            }
        }
        index[0] = self.spd.bucket(Hop::Finite(0));
        let buckets = DistanceBuckets::from_index(size, virtual_bucket + 1, index)?;
        let table = Var::concat_rows(&[self.spd.all(tape, &self.params), self.p(tape, vd)])?;
        let mut keys = vec![VIRTUAL_NODE];
        keys.extend(0..n);
        let st = Context { tokens, keys: keys.clone() };
        let se = Context { tokens, keys };
        let (os, oe) = self.dual_stack(tape, st, se, Some((&buckets, table)), Shared::All, dropout)?;
        self.finish(os, oe)
    }

    /// KG forward for the query `(head, relation, ?)`. `exclude` removes one
    /// `(relation, entity)` pair from the head's context so a training
    /// triple cannot see its own answer.
    pub fn forward_query<'t>(
        &self,
        tape: &'t Tape,
        kg: &KnowledgeGraph,
        head: NodeId,
        relation: usize,
        exclude: Option<(usize, NodeId)>,
        index: &SemanticNeighborIndex,
        dropout: Option<&Dropout>,
    ) -> Result<NodeOutput<'t>> {
        let (Some(atom), Some(mask)) = (&self.atom, self.mask_token) else {
            return Err(Error::Mode(format!("forward_query needs kg mode, model is {}", self.config.mode)));
        };
        let g = &kg.graph;
        if head >= g.node_count() {
            return Err(Error::InvalidNode { node: head, count: g.node_count() });
        }
        if relation >= atom.relation_count {
            return Err(Error::Vocabulary { kind: "relation", id: relation, size: atom.relation_count });
        }
        let facts: Vec<(usize, NodeId)> = kg.adjacency[head]
            .iter()
            .copied()
            .filter(|&pair| Some(pair) != exclude)
            .collect();
        let facts = self.capped(&facts, head);
        let x_head = self.node_inputs(tape, g, &[head])?;
        let m = facts.len() + 1;
        let heads = x_head.embedding_lookup(&vec![0; m])?;
        let mut rels = vec![relation];
        rels.extend(facts.iter().map(|&(r, _)| r));
        let relations = atom.relation_embeddings(tape, &self.params, &rels)?;
        let neighbors: Vec<NodeId> = facts.iter().map(|&(_, e)| e).collect();
        let mut tail_parts = vec![self.p(tape, mask)];
        if !neighbors.is_empty() {
            tail_parts.push(self.node_inputs(tape, g, &neighbors)?);
        }
        let tails = Var::concat_rows(&tail_parts)?;
        let st_tokens = atom.encode_tokens(tape, &self.params, &heads, &relations, &tails)?;
        let query = st_tokens.gather_rows(&[0])?;
        let mut st_keys = vec![head];
        st_keys.extend(&neighbors);

        let sem: Vec<NodeId> = index.neighbors(head).iter().map(|&(u, _)| u).collect();
        let se_tokens = if sem.is_empty() {
            query
        } else {
            Var::concat_rows(&[query, self.node_inputs(tape, g, &sem)?])?
        };
        let mut se_keys = vec![head];
        se_keys.extend(&sem);

        let (buckets, table) = self.ego_positions(tape, m)?;
        let st = Context { tokens: st_tokens, keys: st_keys };
        let se = Context { tokens: se_tokens, keys: se_keys };
        let (os, oe) = self.dual_stack(tape, st, se, Some((&buckets, table)), Shared::Center, dropout)?;
        self.finish(os, oe)
    }

    /// Task-head output for stacked representations: `m × 1` for
    /// regression, `m × C` class logits, or `m × E` entity scores.
    pub fn predict<'t>(&self, tape: &'t Tape, h: &Var<'t>) -> Result<Var<'t>> {
        match &self.head {
            HeadParams::Affine { weight, bias } => h.affine(&self.p(tape, *weight), &self.p(tape, *bias)),
            HeadParams::Entity { bias } => {
                let InputParams::Embedding(table) = &self.input else { unreachable!("validated") };
                h.matmul_t(&self.p(tape, *table))?.add(&self.p(tape, *bias))
            }
        }
    }

    /// Entity scores for `(head, relation, ?)`; higher is better.
    pub fn score_entities(
        &self,
        kg: &KnowledgeGraph,
        head: NodeId,
        relation: usize,
        index: &SemanticNeighborIndex,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let out = self.forward_query(&tape, kg, head, relation, None, index, None)?;
        Ok(self.predict(&tape, &out.h)?.value().data().to_vec())
    }
}

/// Initial `b_s` of paired scorer heads. A pair ranks candidates by
/// closeness only while its bias stays positive; the fetching loss pushes
/// the bias down, so it starts with headroom.
pub const PAIRED_SCORER_BIAS: f64 = 3.0;

/// Odd scorer heads start as the negation of the preceding even head, with
/// a positive bias, so the head-mean `f_s` peaks at zero difference.
fn pair_scorer_heads(store: &mut ParamStore, scorer: &SemanticScorer) {
    if scorer.heads < 2 {
        return;
    }
    let mut w = store.get(scorer.weight).clone();
    for hd in (1..scorer.heads).step_by(2) {
        let source: Vec<f64> = w.row(hd - 1).iter().map(|v| -v).collect();
        w.row_mut(hd).copy_from_slice(&source);
    }
    store.set(scorer.weight, w).expect("same shape");
    store
        .set(scorer.bias, Tensor::full(1, scorer.heads, PAIRED_SCORER_BIAS))
        .expect("same shape");
}

fn replace_first_row<'t>(x: &Var<'t>, row: &Var<'t>) -> Result<Var<'t>> {
    if x.rows() == 1 {
        return Ok(*row);
    }
    let rest: Vec<usize> = (1..x.rows()).collect();
    Var::concat_rows(&[*row, x.gather_rows(&rest)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut cfg = ModelConfig::new(
            Mode::EgoNode,
            HeadKind::Classification { classes: 3, multi_label: true },
            InputKind::Features { dim: 7 },
        );
        cfg.tau = 0.3;
        cfg.combine = Combine::FinalOnly;
        let back = ModelConfig::from_manifest(&cfg.manifest()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(Mode::WholeGraph, HeadKind::Regression, InputKind::Token);
        assert!(cfg.validate().is_ok());
        cfg.tau = 1.5;
        assert!(cfg.validate().is_err());
        cfg.tau = 0.5;
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let kg = ModelConfig::new(Mode::Kg, HeadKind::Entity, InputKind::Embedding { count: 5 });
        assert!(kg.validate().is_err(), "kg without relations");
    }

    #[test]
    fn whole_graph_cap() {
        let mut cfg = ModelConfig::new(Mode::WholeGraph, HeadKind::Regression, InputKind::Token);
        cfg.node_cap = 3;
        cfg.hidden = 8;
        cfg.heads = 2;
        cfg.ffn_hidden = 8;
        let model = DetModel::new(cfg, 1).unwrap();
        let g = Graph::undirected(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let tape = Tape::new();
        assert!(matches!(model.forward_graph(&tape, &g, None), Err(Error::Mode(_))));
        let small = Graph::undirected(1, &[]).unwrap();
        let out = model.forward_graph(&tape, &small, None).unwrap();
        assert_eq!(out.h.shape(), [1, 8]);
    }
}
