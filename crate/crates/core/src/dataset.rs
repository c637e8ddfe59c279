//! In-memory dataset bundles for the three task families.

use crate::error::{Error, Result};
use crate::graph::{Graph, KnowledgeGraph, NodeId, Triple};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

keyword_enum!(Split { Split::Train => "train", Split::Valid => "valid", Split::Test => "test" });

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

/// Train/valid/test index lists over some collection.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// All ids below `size` and no id in two splits.
    pub fn validate(&self, size: usize, what: &str) -> Result<()> {
        let mut owner = vec![None; size];
        for split in Split::ALL {
            for &i in self.get(split) {
                if i >= size {
                    return Err(Error::Integrity(format!("{split} split names {what} {i}, only {size} exist")));
                }
                if let Some(prev) = owner[i].replace(split) {
                    return Err(Error::Integrity(format!("{what} {i} is in both the {prev} and {split} splits")));
                }
            }
        }
        Ok(())
    }
}

/// Node-level task: one graph with features, labels and node splits.
#[derive(Clone, Debug)]
pub struct NodeDataset {
    pub graph: Graph,
    pub splits: Splits,
    /// Ground-truth semantic cluster per node, when known.
    pub clusters: Option<Vec<usize>>,
}

impl NodeDataset {
    pub fn validate(&self) -> Result<()> {
        if self.graph.labels().is_none() {
            return Err(Error::Integrity("node dataset has no labels".into()));
        }
        self.splits.validate(self.graph.node_count(), "node")?;
        if let Some(c) = &self.clusters {
            if c.len() != self.graph.node_count() {
                return Err(Error::Integrity(format!(
                    "{} cluster ids for {} nodes",
                    c.len(),
                    self.graph.node_count()
                )));
            }
        }
        Ok(())
    }

    /// Same-cluster nodes outside the closed one-hop neighborhood of `v`.
    pub fn ground_truth_semantic_neighbors(&self, v: NodeId) -> Option<Vec<NodeId>> {
        let clusters = self.clusters.as_ref()?;
        let near = self.graph.neighbor_slice(v);
        Some(
            (0..self.graph.node_count())
                .filter(|&u| u != v && clusters[u] == clusters[v] && near.binary_search(&u).is_err())
                .collect(),
        )
    }
}

/// Link prediction over a knowledge graph. The graph structure is built
/// from the training triples only.
#[derive(Clone, Debug)]
pub struct KgDataset {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub kg: KnowledgeGraph,
}

impl KgDataset {
    pub fn new(
        entities: Vec<String>,
        relations: Vec<String>,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        for t in valid.iter().chain(&test) {
            if t.head >= entities.len() || t.tail >= entities.len() || t.relation >= relations.len() {
                return Err(Error::Integrity(format!("triple {t:?} references an unknown id")));
            }
        }
        let kg = KnowledgeGraph::new(entities.len(), relations.len(), &train)?;
        Ok(KgDataset { entities, relations, train, valid, test, kg })
    }

    pub fn triples(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphSample {
    pub graph: Graph,
    pub target: f64,
}

/// Graph-level regression over many small graphs.
#[derive(Clone, Debug)]
pub struct GraphSetDataset {
    pub graphs: Vec<GraphSample>,
    pub splits: Splits,
}

#[derive(Clone, Debug)]
pub enum Dataset {
    Nodes(NodeDataset),
    Kg(KgDataset),
    Graphs(GraphSetDataset),
}

impl Dataset {
    pub fn kind(&self) -> &'static str {
        match self {
            Dataset::Nodes(_) => "node",
            Dataset::Kg(_) => "kg",
            Dataset::Graphs(_) => "graph-set",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_validation() {
        let ok = Splits { train: vec![0, 1], valid: vec![2], test: vec![3] };
        assert!(ok.validate(4, "node").is_ok());
        let overlap = Splits { train: vec![0, 1], valid: vec![1], test: vec![] };
        assert!(matches!(overlap.validate(4, "node"), Err(Error::Integrity(_))));
        assert!(ok.validate(3, "node").is_err());
    }
}
