//! Graph storage and the structural queries the encoders rely on: one-hop
//! neighborhoods, ego graphs, breadth-first shortest-path distances, degree,
//! distant-node sampling and per-hop shell statistics.
//!
//! Directed edges are stored as given. Neighborhoods and distances default to
//! the symmetrized view; node orderings are always ascending so that every
//! derived structure is reproducible.

use std::collections::{HashSet, VecDeque};

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;
pub type RelationId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub source: NodeId,
    pub target: NodeId,
    pub relation: Option<RelationId>,
}

/// Which incident edges count when looking at a node's neighborhood or degree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Direction {
    /// Both directions (the symmetrized view).
    #[default]
    Both,
    Out,
    In,
}

/// Shortest-path distance in hops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Hop {
    Finite(u32),
    Unreachable,
}

impl Hop {
    /// Embedding bucket: distances are clipped to `max_distance`, and
    /// `Unreachable` maps to the sentinel bucket `max_distance + 1`.
    pub fn bucket(self, max_distance: usize) -> usize {
        match self {
            Hop::Finite(d) => (d as usize).min(max_distance),
            Hop::Unreachable => max_distance + 1,
        }
    }

    pub fn finite(self) -> Option<u32> {
        match self {
            Hop::Finite(d) => Some(d),
            Hop::Unreachable => None,
        }
    }
}

/// Node labels for classification tasks.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Single { classes: usize, values: Vec<usize> },
    Multi { classes: usize, bits: Vec<Vec<bool>> },
}

impl Labels {
    pub fn classes(&self) -> usize {
        match self {
            Labels::Single { classes, .. } | Labels::Multi { classes, .. } => *classes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Single { values, .. } => values.len(),
            Labels::Multi { bits, .. } => bits.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, Labels::Multi { .. })
    }
}

/// A center node together with a sorted, duplicate-free member list that
/// never contains the center.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSet {
    pub center: NodeId,
    pub members: Vec<NodeId>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.binary_search(&node).is_ok()
    }
}

/// The induced subgraph on a node and its one-hop neighbors. `nodes[0]` is
/// the center; the rest are ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EgoGraph {
    pub nodes: Vec<NodeId>,
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug)]
pub struct GraphBuilder {
    node_count: usize,
    directed: bool,
    allow_self_loops: bool,
    edges: Vec<Edge>,
    seen: HashSet<(NodeId, NodeId, Option<RelationId>)>,
}

impl GraphBuilder {
    pub fn new(node_count: usize) -> Self {
        GraphBuilder {
            node_count,
            directed: false,
            allow_self_loops: false,
            edges: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn directed(mut self, directed: bool) -> Self {
        self.directed = directed;
        self
    }

    pub fn allow_self_loops(mut self, allow: bool) -> Self {
        self.allow_self_loops = allow;
        self
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn add_edge(&mut self, source: NodeId, target: NodeId, relation: Option<RelationId>) -> Result<()> {
        for node in [source, target] {
            if node >= self.node_count {
                return Err(Error::InvalidNode { node, count: self.node_count });
            }
        }
        if source == target && !self.allow_self_loops {
            return Err(Error::InvalidGraph(format!("self-loop on node {source}")));
        }
        if let Some(first) = self.edges.first() {
            if first.relation.is_some() != relation.is_some() {
                return Err(Error::InvalidGraph(
                    "edge types must be given for all edges or for none".into(),
                ));
            }
        }
        let key = if self.directed {
            (source, target, relation)
        } else {
            (source.min(target), source.max(target), relation)
        };
        if !self.seen.insert(key) {
            return Err(Error::InvalidGraph(format!("duplicate edge {source} -> {target}")));
        }
        self.edges.push(Edge { source, target, relation });
        Ok(())
    }

    pub fn build(self) -> Graph {
        let n = self.node_count;
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for e in &self.edges {
            out_adj[e.source].push((e.target, e.relation));
            in_adj[e.target].push((e.source, e.relation));
            if !self.directed && e.source != e.target {
                out_adj[e.target].push((e.source, e.relation));
                in_adj[e.source].push((e.target, e.relation));
            }
        }
        let mut sym: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for v in 0..n {
            let mut members: Vec<NodeId> = out_adj[v]
                .iter()
                .chain(in_adj[v].iter())
                .map(|&(u, _)| u)
                .filter(|&u| u != v)
                .collect();
            members.sort_unstable();
            members.dedup();
            sym[v] = members;
        }
        for list in out_adj.iter_mut().chain(in_adj.iter_mut()) {
            list.sort_unstable();
        }
        let typed = self.edges.first().is_some_and(|e| e.relation.is_some());
        Graph {
            node_count: n,
            directed: self.directed,
            typed,
            edges: self.edges,
            out_adj,
            in_adj,
            sym,
            features: None,
            labels: None,
        }
    }
}

/// Immutable graph with optional node features and labels.
#[derive(Clone, Debug)]
pub struct Graph {
    node_count: usize,
    directed: bool,
    typed: bool,
    edges: Vec<Edge>,
    out_adj: Vec<Vec<(NodeId, Option<RelationId>)>>,
    in_adj: Vec<Vec<(NodeId, Option<RelationId>)>>,
    sym: Vec<Vec<NodeId>>,
    features: Option<Tensor>,
    labels: Option<Labels>,
}

impl Graph {
    /// Undirected, untyped graph from an edge list.
    pub fn undirected(node_count: usize, edges: &[(NodeId, NodeId)]) -> Result<Graph> {
        let mut b = GraphBuilder::new(node_count);
        for &(u, v) in edges {
            b.add_edge(u, v, None)?;
        }
        Ok(b.build())
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Graph> {
        if features.rows() != self.node_count {
            return Err(Error::Integrity(format!(
                "feature matrix has {} rows for {} nodes",
                features.rows(),
                self.node_count
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Graph> {
        if labels.len() != self.node_count {
            return Err(Error::Integrity(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.node_count
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn is_typed(&self) -> bool {
        self.typed
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn features(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    fn check(&self, v: NodeId) -> Result<()> {
        if v >= self.node_count {
            Err(Error::InvalidNode { node: v, count: self.node_count })
        } else {
            Ok(())
        }
    }

    /// Symmetrized one-hop neighbors.
    pub fn one_hop_neighbors(&self, v: NodeId) -> Result<NeighborSet> {
        self.check(v)?;
        Ok(NeighborSet { center: v, members: self.sym[v].clone() })
    }

    /// Borrowing view of the symmetrized neighbor list.
    pub fn neighbor_slice(&self, v: NodeId) -> &[NodeId] {
        &self.sym[v]
    }

    pub fn neighbors(&self, v: NodeId, direction: Direction) -> Result<NeighborSet> {
        self.check(v)?;
        let members = match direction {
            Direction::Both => self.sym[v].clone(),
            Direction::Out | Direction::In => {
                let list = if direction == Direction::Out { &self.out_adj[v] } else { &self.in_adj[v] };
                let mut m: Vec<NodeId> = list.iter().map(|&(u, _)| u).filter(|&u| u != v).collect();
                m.dedup();
                m
            }
        };
        Ok(NeighborSet { center: v, members })
    }

    /// Outgoing `(neighbor, relation)` pairs, ascending.
    pub fn out_edges(&self, v: NodeId) -> &[(NodeId, Option<RelationId>)] {
        &self.out_adj[v]
    }

    /// Incoming `(neighbor, relation)` pairs, ascending.
    pub fn in_edges(&self, v: NodeId) -> &[(NodeId, Option<RelationId>)] {
        &self.in_adj[v]
    }

    pub fn ego_graph(&self, v: NodeId) -> Result<EgoGraph> {
        self.check(v)?;
        let mut nodes = Vec::with_capacity(self.sym[v].len() + 1);
        nodes.push(v);
        nodes.extend_from_slice(&self.sym[v]);
        let inside = |u: NodeId| u == v || self.sym[v].binary_search(&u).is_ok();
        let edges = self
            .edges
            .iter()
            .filter(|e| inside(e.source) && inside(e.target))
            .copied()
            .collect();
        Ok(EgoGraph { nodes, edges })
    }

    /// Breadth-first distances from `source` over the symmetrized view.
    pub fn distances_from(&self, source: NodeId) -> Result<Vec<Hop>> {
        self.check(source)?;
        let mut dist = vec![Hop::Unreachable; self.node_count];
        dist[source] = Hop::Finite(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let Hop::Finite(d) = dist[u] else { unreachable!() };
            for &w in &self.sym[u] {
                if dist[w] == Hop::Unreachable {
                    dist[w] = Hop::Finite(d + 1);
                    queue.push_back(w);
                }
            }
        }
        Ok(dist)
    }

    pub fn shortest_path_distance(&self, u: NodeId, v: NodeId) -> Result<Hop> {
        self.check(v)?;
        Ok(self.distances_from(u)?[v])
    }

    pub fn all_pairs_distances(&self) -> Vec<Vec<Hop>> {
        (0..self.node_count)
            .map(|u| self.distances_from(u).expect("node in range"))
            .collect()
    }

    /// Undirected degree (incident edges). For directed graphs this is
    /// in-degree plus out-degree.
    pub fn degree(&self, v: NodeId) -> Result<usize> {
        self.degree_with(v, Direction::Both)
    }

    pub fn degree_with(&self, v: NodeId, direction: Direction) -> Result<usize> {
        self.check(v)?;
        let self_loops = self.out_adj[v].iter().filter(|&&(u, _)| u == v).count();
        Ok(match (self.directed, direction) {
            // undirected adjacency lists hold each incident edge once, and a
            // self-loop contributes two endpoints
            (false, _) => self.out_adj[v].len() + self_loops,
            (true, Direction::Both) => self.out_adj[v].len() + self.in_adj[v].len(),
            (true, Direction::Out) => self.out_adj[v].len(),
            (true, Direction::In) => self.in_adj[v].len(),
        })
    }

    /// All nodes outside the closed one-hop neighborhood of `v`, ascending.
    pub fn distant_pool(&self, v: NodeId) -> Result<Vec<NodeId>> {
        self.check(v)?;
        let near = &self.sym[v];
        Ok((0..self.node_count)
            .filter(|&u| u != v && near.binary_search(&u).is_err())
            .collect())
    }

    /// Uniform sample without replacement from the nodes outside the closed
    /// one-hop neighborhood. Returns the whole pool when it holds no more
    /// than `count` nodes.
    pub fn sample_distant_negatives<R: Rng + ?Sized>(
        &self,
        v: NodeId,
        count: usize,
        rng: &mut R,
    ) -> Result<NeighborSet> {
        if count == 0 {
            return Err(Error::Contract("negative sample count must be at least 1".into()));
        }
        let pool = self.distant_pool(v)?;
        if pool.is_empty() {
            return Err(Error::SamplingImpossible(v));
        }
        let mut members = if pool.len() <= count {
            pool
        } else {
            rand::seq::index::sample(rng, pool.len(), count)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        };
        members.sort_unstable();
        Ok(NeighborSet { center: v, members })
    }

    /// Mean over all nodes of the number of nodes at exactly `k` hops, for
    /// `k = 1..=max_hop`.
    pub fn hop_statistics(&self, max_hop: usize) -> Result<Vec<f64>> {
        if max_hop == 0 {
            return Err(Error::Contract("max_hop must be at least 1".into()));
        }
        let mut totals = vec![0usize; max_hop];
        for v in 0..self.node_count {
            for hop in self.distances_from(v)? {
                if let Hop::Finite(d) = hop {
                    let d = d as usize;
                    if (1..=max_hop).contains(&d) {
                        totals[d - 1] += 1;
                    }
                }
            }
        }
        let n = self.node_count.max(1) as f64;
        Ok(totals.into_iter().map(|t| t as f64 / n).collect())
    }
}

/// A `(head, relation, tail)` fact over entity and relation ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: NodeId,
    pub relation: RelationId,
    pub tail: NodeId,
}

impl Triple {
    pub fn new(head: NodeId, relation: RelationId, tail: NodeId) -> Self {
        Triple { head, relation, tail }
    }
}

/// Entity graph over a set of known triples. Relation `r + R` is the
/// inverse of `r`, so every fact appears in the adjacency of both endpoints.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    /// Untyped undirected view: one edge per connected entity pair.
    pub graph: Graph,
    /// Per entity, `(relation, other entity)` in triple order.
    pub adjacency: Vec<Vec<(RelationId, NodeId)>>,
    /// Base relation count `R`, excluding inverses.
    pub relation_count: usize,
}

impl KnowledgeGraph {
    pub fn new(entity_count: usize, relation_count: usize, triples: &[Triple]) -> Result<Self> {
        let mut seen = HashSet::with_capacity(triples.len());
        let mut pairs = Vec::new();
        let mut adjacency = vec![Vec::new(); entity_count];
        for (i, t) in triples.iter().enumerate() {
            for e in [t.head, t.tail] {
                if e >= entity_count {
                    return Err(Error::InvalidNode { node: e, count: entity_count });
                }
            }
            if t.relation >= relation_count {
                return Err(Error::Vocabulary { kind: "relation", id: t.relation, size: relation_count });
            }
            if !seen.insert(*t) {
                return Err(Error::InvalidGraph(format!("triple {i} repeats an earlier triple")));
            }
            adjacency[t.head].push((t.relation, t.tail));
            adjacency[t.tail].push((t.relation + relation_count, t.head));
            if t.head != t.tail {
                pairs.push((t.head.min(t.tail), t.head.max(t.tail)));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        Ok(KnowledgeGraph { graph: Graph::undirected(entity_count, &pairs)?, adjacency, relation_count })
    }

    pub fn entity_count(&self) -> usize {
        self.graph.node_count()
    }

    /// Relation vocabulary including inverses.
    pub fn total_relations(&self) -> usize {
        2 * self.relation_count
    }

    pub fn inverse(&self, relation: RelationId) -> RelationId {
        if relation < self.relation_count {
            relation + self.relation_count
        } else {
            relation - self.relation_count
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path(n: usize) -> Graph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Graph::undirected(n, &edges).unwrap()
    }

    fn complete(n: usize) -> Graph {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        Graph::undirected(n, &edges).unwrap()
    }

    fn star(leaves: usize) -> Graph {
        let edges: Vec<_> = (1..=leaves).map(|i| (0, i)).collect();
        Graph::undirected(leaves + 1, &edges).unwrap()
    }

    fn cycle(n: usize) -> Graph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Graph::undirected(n, &edges).unwrap()
    }

    #[test]
    fn neighbors_on_small_graphs() {
        assert_eq!(path(3).one_hop_neighbors(1).unwrap().members, vec![0, 2]);
        let g = Graph::undirected(3, &[(0, 1)]).unwrap();
        assert!(g.one_hop_neighbors(2).unwrap().is_empty());
        let k4 = complete(4);
        for v in 0..4 {
            let expected: Vec<_> = (0..4).filter(|&u| u != v).collect();
            assert_eq!(k4.one_hop_neighbors(v).unwrap().members, expected);
        }
        assert!(matches!(k4.one_hop_neighbors(4), Err(Error::InvalidNode { .. })));
    }

    #[test]
    fn directed_neighborhoods_are_symmetrized_by_default() {
        let mut b = GraphBuilder::new(3).directed(true);
        b.add_edge(0, 1, None).unwrap();
        b.add_edge(2, 1, None).unwrap();
        let g = b.build();
        assert_eq!(g.one_hop_neighbors(1).unwrap().members, vec![0, 2]);
        assert_eq!(g.neighbors(1, Direction::Out).unwrap().members, Vec::<usize>::new());
        assert_eq!(g.neighbors(1, Direction::In).unwrap().members, vec![0, 2]);
        assert_eq!(g.degree(1).unwrap(), 2);
        assert_eq!(g.degree_with(0, Direction::In).unwrap(), 0);
    }

    #[test]
    fn builder_rejects_bad_edges() {
        let mut b = GraphBuilder::new(3);
        assert!(matches!(b.add_edge(0, 3, None), Err(Error::InvalidNode { node: 3, .. })));
        assert!(b.add_edge(1, 1, None).is_err());
        b.add_edge(0, 1, None).unwrap();
        assert!(b.add_edge(1, 0, None).is_err(), "undirected duplicate");
        assert!(b.add_edge(1, 2, Some(0)).is_err(), "mixed typed/untyped");

        let mut d = GraphBuilder::new(2).directed(true);
        d.add_edge(0, 1, Some(0)).unwrap();
        d.add_edge(1, 0, Some(0)).unwrap();
        d.add_edge(0, 1, Some(1)).unwrap();
        assert!(d.add_edge(0, 1, Some(0)).is_err());

        let mut s = GraphBuilder::new(2).allow_self_loops(true);
        s.add_edge(1, 1, None).unwrap();
        let g = s.build();
        assert_eq!(g.degree(1).unwrap(), 2);
    }

    #[test]
    fn knowledge_graph_adds_inverse_facts() {
        let triples = [Triple::new(0, 0, 1), Triple::new(1, 1, 2), Triple::new(1, 0, 0)];
        let kg = KnowledgeGraph::new(3, 2, &triples).unwrap();
        assert_eq!(kg.adjacency[0], vec![(0, 1), (2, 1)]);
        assert_eq!(kg.adjacency[1], vec![(2, 0), (1, 2), (0, 0)]);
        assert_eq!(kg.adjacency[2], vec![(3, 1)]);
        assert_eq!(kg.graph.edge_count(), 2);
        assert_eq!(kg.inverse(1), 3);
        assert_eq!(kg.inverse(3), 1);
        assert!(KnowledgeGraph::new(3, 2, &[Triple::new(0, 0, 1), Triple::new(0, 0, 1)]).is_err());
        assert!(KnowledgeGraph::new(3, 2, &[Triple::new(0, 2, 1)]).is_err());
    }

    #[test]
    fn ego_graphs() {
        let tri = complete(3);
        let ego = tri.ego_graph(0).unwrap();
        assert_eq!(ego.nodes, vec![0, 1, 2]);
        assert_eq!(ego.edges.len(), 3);

        let s = star(4);
        assert_eq!(s.ego_graph(0).unwrap().nodes, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.ego_graph(0).unwrap().edges.len(), 4);
        let leaf = s.ego_graph(3).unwrap();
        assert_eq!(leaf.nodes, vec![3, 0]);
        assert_eq!(leaf.edges.len(), 1);
    }

    #[test]
    fn distances_and_degree() {
        let p = path(4);
        assert_eq!(p.shortest_path_distance(0, 3).unwrap(), Hop::Finite(3));
        assert_eq!(p.shortest_path_distance(2, 2).unwrap(), Hop::Finite(0));
        let g = Graph::undirected(3, &[(0, 1)]).unwrap();
        assert_eq!(g.shortest_path_distance(0, 2).unwrap(), Hop::Unreachable);
        assert_eq!(Hop::Unreachable.bucket(8), 9);
        assert_eq!(Hop::Finite(12).bucket(8), 8);

        assert_eq!(star(5).degree(0).unwrap(), 5);
        assert_eq!(g.degree(2).unwrap(), 0);
    }

    #[test]
    fn distant_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k4 = complete(4);
        assert!(matches!(
            k4.sample_distant_negatives(0, 1, &mut rng),
            Err(Error::SamplingImpossible(0))
        ));
        let p = path(5);
        for _ in 0..50 {
            let s = p.sample_distant_negatives(0, 2, &mut rng).unwrap();
            assert_eq!(s.len(), 2);
            assert!(s.members.iter().all(|u| [2, 3, 4].contains(u)));
        }
        let all = p.sample_distant_negatives(0, 10, &mut rng).unwrap();
        assert_eq!(all.members, vec![2, 3, 4]);
        assert!(p.sample_distant_negatives(0, 0, &mut rng).is_err());
    }

    #[test]
    fn hop_shells_on_cycle() {
        let c6 = cycle(6);
        assert_eq!(c6.hop_statistics(3).unwrap(), vec![2.0, 2.0, 1.0]);
        assert!(c6.hop_statistics(0).is_err());
    }
}
