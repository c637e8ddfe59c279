//! Structural position encodings: degree centrality, shortest-path distance,
//! and the edge-type atom transformer.

use rand::Rng;

use crate::autodiff::{Mask, ParamId, ParamStore, Tape, Var};
use crate::encoders::StructuralLayer;
use crate::error::{Error, Result};
use crate::graph::Hop;

/// Degree embeddings: rows `0..=max_degree`, then one overflow row.
#[derive(Clone, Debug)]
pub struct CentralityTable {
    pub table: ParamId,
    pub max_degree: usize,
}

impl CentralityTable {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, hidden: usize, max_degree: usize, rng: &mut R) -> Self {
        CentralityTable {
            table: store.add_glorot(format!("{prefix}.centrality"), max_degree + 2, hidden, rng),
            max_degree,
        }
    }

    pub fn rows(&self) -> usize {
        self.max_degree + 2
    }

    pub fn bucket(&self, degree: usize) -> usize {
        if degree <= self.max_degree {
            degree
        } else {
            self.max_degree + 1
        }
    }

    pub fn centrality_embedding<'t>(&self, tape: &'t Tape, store: &ParamStore, degree: i64) -> Result<Var<'t>> {
        if degree < 0 {
            return Err(Error::Contract(format!("negative degree {degree}")));
        }
        self.lookup(tape, store, &[degree as usize])
    }

    /// One row per degree.
    pub fn lookup<'t>(&self, tape: &'t Tape, store: &ParamStore, degrees: &[usize]) -> Result<Var<'t>> {
        let idx: Vec<usize> = degrees.iter().map(|&d| self.bucket(d)).collect();
        tape.param(store, self.table).embedding_lookup(&idx)
    }
}

/// Distance embeddings: rows `0..=max_distance`, then `UNREACHABLE`.
#[derive(Clone, Debug)]
pub struct SpdTable {
    pub table: ParamId,
    pub max_distance: usize,
}

impl SpdTable {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, hidden: usize, max_distance: usize, rng: &mut R) -> Self {
        SpdTable {
            table: store.add_glorot(format!("{prefix}.spd"), max_distance + 2, hidden, rng),
            max_distance,
        }
    }

    pub fn rows(&self) -> usize {
        self.max_distance + 2
    }

    pub fn unreachable(&self) -> usize {
        self.max_distance + 1
    }

    pub fn bucket(&self, hop: Hop) -> usize {
        hop.bucket(self.max_distance)
    }

    pub fn spd_embedding<'t>(&self, tape: &'t Tape, store: &ParamStore, hop: Hop) -> Result<Var<'t>> {
        tape.param(store, self.table).embedding_lookup(&[self.bucket(hop)])
    }

    /// Whole table as a tape variable, for pairwise use inside attention.
    pub fn all<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Var<'t> {
        tape.param(store, self.table)
    }
}

/// Small transformer over `[c_A, x_i, r_ij, x_j]`; the `c_A` output row is
/// the edge-type-aware encoding of the neighbor.
#[derive(Clone, Debug)]
pub struct AtomTransformer {
    pub hidden: usize,
    /// `1 × h` virtual token.
    pub virtual_token: ParamId,
    /// `4 × h` slot-position embeddings.
    pub slots: ParamId,
    /// `relation_count × h`.
    pub relations: ParamId,
    pub relation_count: usize,
    pub layers: Vec<StructuralLayer>,
}

impl AtomTransformer {
    pub const SEQUENCE: usize = 4;

    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        relation_count: usize,
        layers: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Self {
        let virtual_token = store.add_glorot(format!("{prefix}.c_a"), 1, hidden, rng);
        let slots = store.add_glorot(format!("{prefix}.slots"), Self::SEQUENCE, hidden, rng);
        let relations = store.add_glorot(format!("{prefix}.relations"), relation_count, hidden, rng);
        let layers = (0..layers)
            .map(|l| StructuralLayer::new(store, &format!("{prefix}.layer{l}"), hidden, heads, ffn_hidden, rng))
            .collect();
        AtomTransformer { hidden, virtual_token, slots, relations, relation_count, layers }
    }

    pub fn relation_embeddings<'t>(&self, tape: &'t Tape, store: &ParamStore, relations: &[usize]) -> Result<Var<'t>> {
        if let Some(&bad) = relations.iter().find(|&&r| r >= self.relation_count) {
            return Err(Error::Vocabulary { kind: "relation", id: bad, size: self.relation_count });
        }
        tape.param(store, self.relations).embedding_lookup(relations)
    }

    pub fn edge_type_encoding<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x_i: &Var<'t>,
        relation: usize,
        x_j: &Var<'t>,
    ) -> Result<Var<'t>> {
        let r = self.relation_embeddings(tape, store, &[relation])?;
        self.encode_tokens(tape, store, x_i, &r, x_j)
    }

    /// Batched encoding of `m` triples given row-aligned `m × h` heads,
    /// relation ids and tails.
    pub fn encode_many<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        heads: &Var<'t>,
        relations: &[usize],
        tails: &Var<'t>,
    ) -> Result<Var<'t>> {
        let r = self.relation_embeddings(tape, store, relations)?;
        self.encode_tokens(tape, store, heads, &r, tails)
    }

    /// Same as [`encode_many`](Self::encode_many) with explicit relation
    /// tokens (used for the masked query token).
    pub fn encode_tokens<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        heads: &Var<'t>,
        relations: &Var<'t>,
        tails: &Var<'t>,
    ) -> Result<Var<'t>> {
        let m = heads.rows();
        if relations.rows() != m || tails.rows() != m || heads.shape() != tails.shape() || relations.cols() != self.hidden {
            return Err(Error::shape(
                "atom transformer",
                format!("heads {:?}, relations {:?}, tails {:?}", heads.shape(), relations.shape(), tails.shape()),
            ));
        }
        let cls = tape
            .param(store, self.virtual_token)
            .embedding_lookup(&vec![0; m])?;
        // rows ordered triple-major: [c_A, x_i, r, x_j] for each triple in turn
        let stacked = Var::concat_rows(&[cls, *heads, *relations, *tails])?;
        let order: Vec<usize> = (0..m)
            .flat_map(|t| (0..Self::SEQUENCE).map(move |s| s * m + t))
            .collect();
        let slot_idx: Vec<usize> = (0..m * Self::SEQUENCE).map(|k| k % Self::SEQUENCE).collect();
        let slots = tape.param(store, self.slots).embedding_lookup(&slot_idx)?;
        let mut x = stacked.gather_rows(&order)?.add(&slots)?;
        if !self.layers.is_empty() {
            let mask = Mask::block_diagonal(m, Self::SEQUENCE);
            for layer in &self.layers {
                x = layer.forward(tape, store, &x, None, None, Some(&mask), None)?.out;
            }
        }
        let firsts: Vec<usize> = (0..m).map(|t| t * Self::SEQUENCE).collect();
        x.gather_rows(&firsts)
    }
}
