//! Plain-text dataset formats. Every parser rejects malformed input with the
//! offending file and 1-based line number; nothing is silently repaired.
//!
//! * edge list: `u<TAB>v[<TAB>edge_type]`, `#` comments
//! * features: one node per line, space-separated reals
//! * labels: `node<TAB>label`; a node listed twice makes the set multi-label
//! * splits: one id per line
//! * triples: `head<TAB>relation<TAB>tail` as raw strings
//! * graph set: blank-line separated blocks, `N <target>` then edge lines

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::dataset::{Dataset, GraphSample, GraphSetDataset, KgDataset, NodeDataset, Splits};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, Labels, NodeId, Triple};

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.txt";
pub const LABELS_FILE: &str = "labels.tsv";
pub const CLUSTERS_FILE: &str = "clusters.tsv";
pub const GRAPHS_FILE: &str = "graphs.txt";
pub const SPLIT_FILES: [&str; 3] = ["train.idx", "valid.idx", "test.idx"];
pub const TRIPLE_FILES: [&str; 3] = ["train.txt", "valid.txt", "test.txt"];

const MULTI_LABEL_DIRECTIVE: &str = "# multi-label";
const CLASSES_DIRECTIVE: &str = "# classes:";

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Non-empty, non-comment lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn field<T: FromStr>(path: &Path, line: usize, text: &str, what: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {what} `{text}`")))
}

fn real(path: &Path, line: usize, text: &str) -> Result<f64> {
    let v: f64 = field(path, line, text, "real")?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value `{text}`")));
    }
    Ok(v)
}

type EdgeLine = (usize, NodeId, NodeId, Option<usize>);

fn parse_edge(path: &Path, line: usize, text: &str) -> Result<EdgeLine> {
    let parts: Vec<&str> = text.split('\t').collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(parse_err(path, line, "expected `u<TAB>v` or `u<TAB>v<TAB>type`"));
    }
    let u = field(path, line, parts[0], "node id")?;
    let v = field(path, line, parts[1], "node id")?;
    let r = parts.get(2).map(|t| field(path, line, t, "edge type")).transpose()?;
    Ok((line, u, v, r))
}

fn build_graph(path: &Path, node_count: usize, edges: &[EdgeLine]) -> Result<Graph> {
    let mut b = GraphBuilder::new(node_count);
    for &(line, u, v, r) in edges {
        b.add_edge(u, v, r).map_err(|e| parse_err(path, line, e.to_string()))?;
    }
    Ok(b.build())
}

/// Undirected graph from an edge list. Without an explicit node count the
/// graph spans ids `0..=max id`.
pub fn load_edge_list(path: &Path, node_count: Option<usize>) -> Result<Graph> {
    let text = read(path)?;
    let edges = content_lines(&text)
        .map(|(n, l)| parse_edge(path, n, l))
        .collect::<Result<Vec<_>>>()?;
    let n = node_count.unwrap_or_else(|| edges.iter().map(|e| e.1.max(e.2) + 1).max().unwrap_or(0));
    build_graph(path, n, &edges)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let text = read(path)?;
    let mut rows = Vec::new();
    for (n, l) in content_lines(&text) {
        let row = l.split_whitespace().map(|t| real(path, n, t)).collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(parse_err(path, n, format!("{} values, earlier rows have {first}", row.len())));
            }
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

pub fn load_labels(path: &Path, node_count: usize) -> Result<Labels> {
    let text = read(path)?;
    let mut forced_multi = false;
    let mut declared_classes = None;
    for (n, l) in text.lines().enumerate() {
        let l = l.trim();
        if l == MULTI_LABEL_DIRECTIVE {
            forced_multi = true;
        } else if let Some(rest) = l.strip_prefix(CLASSES_DIRECTIVE) {
            declared_classes = Some(field::<usize>(path, n + 1, rest, "class count")?);
        }
    }
    let mut pairs = Vec::new();
    for (n, l) in content_lines(&text) {
        let parts: Vec<&str> = l.split('\t').collect();
        if parts.len() != 2 {
            return Err(parse_err(path, n, "expected `node<TAB>label`"));
        }
        let v: usize = field(path, n, parts[0], "node id")?;
        let c: usize = field(path, n, parts[1], "label")?;
        if v >= node_count {
            return Err(Error::Integrity(format!(
                "{}:{n}: label for node {v}, graph has {node_count} nodes",
                path.display()
            )));
        }
        pairs.push((n, v, c));
    }
    let observed = pairs.iter().map(|p| p.2 + 1).max().unwrap_or(0);
    let classes = match declared_classes {
        Some(c) if c < observed => {
            return Err(parse_err(path, 0, format!("declared {c} classes but label {} appears", observed - 1)))
        }
        Some(c) => c,
        None => observed,
    };
    let mut counts = vec![0usize; node_count];
    for &(_, v, _) in &pairs {
        counts[v] += 1;
    }
    if forced_multi || counts.iter().any(|&c| c > 1) {
        let mut bits = vec![vec![false; classes]; node_count];
        for &(n, v, c) in &pairs {
            if std::mem::replace(&mut bits[v][c], true) {
                return Err(parse_err(path, n, format!("label {c} repeated for node {v}")));
            }
        }
        return Ok(Labels::Multi { classes, bits });
    }
    if let Some(v) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Integrity(format!("{}: node {v} has no label", path.display())));
    }
    let mut values = vec![0; node_count];
    for &(_, v, c) in &pairs {
        values[v] = c;
    }
    Ok(Labels::Single { classes, values })
}

pub fn load_index_list(path: &Path) -> Result<Vec<usize>> {
    let text = read(path)?;
    content_lines(&text).map(|(n, l)| field(path, n, l, "index")).collect()
}

fn load_splits(dir: &Path) -> Result<Splits> {
    Ok(Splits {
        train: load_index_list(&dir.join(SPLIT_FILES[0]))?,
        valid: load_index_list(&dir.join(SPLIT_FILES[1]))?,
        test: load_index_list(&dir.join(SPLIT_FILES[2]))?,
    })
}

/// Node-task bundle: edges, optional features, labels, splits and optional
/// ground-truth clusters.
pub fn load_node_bundle(dir: &Path) -> Result<NodeDataset> {
    let features_path = dir.join(FEATURES_FILE);
    let features = if features_path.exists() { Some(load_features(&features_path)?) } else { None };
    let edges_path = dir.join(EDGES_FILE);
    let edges_text = read(&edges_path)?;
    let edges = content_lines(&edges_text)
        .map(|(n, l)| parse_edge(&edges_path, n, l))
        .collect::<Result<Vec<_>>>()?;
    let labels_path = dir.join(LABELS_FILE);
    let node_count = match &features {
        Some(f) => f.rows(),
        None => {
            let text = read(&labels_path)?;
            content_lines(&text)
                .filter_map(|(_, l)| l.split('\t').next()?.trim().parse::<usize>().ok())
                .map(|v| v + 1)
                .max()
                .unwrap_or(0)
        }
    };
    if let Some(&(line, u, v, _)) = edges.iter().find(|e| e.1.max(e.2) >= node_count) {
        return Err(Error::Integrity(format!(
            "{}:{line}: edge {u}-{v} references a node beyond the {node_count} nodes",
            edges_path.display()
        )));
    }
    let mut graph = build_graph(&edges_path, node_count, &edges)?;
    if let Some(f) = features {
        graph = graph.with_features(f)?;
    }
    graph = graph.with_labels(load_labels(&labels_path, node_count)?)?;
    let clusters_path = dir.join(CLUSTERS_FILE);
    let clusters = if clusters_path.exists() {
        let text = read(&clusters_path)?;
        let mut out = vec![None; node_count];
        for (n, l) in content_lines(&text) {
            let parts: Vec<&str> = l.split('\t').collect();
            if parts.len() != 2 {
                return Err(parse_err(&clusters_path, n, "expected `node<TAB>cluster`"));
            }
            let v: usize = field(&clusters_path, n, parts[0], "node id")?;
            if v >= node_count {
                return Err(Error::Integrity(format!("{}:{n}: unknown node {v}", clusters_path.display())));
            }
            out[v] = Some(field(&clusters_path, n, parts[1], "cluster id")?);
        }
        Some(
            out.into_iter()
                .enumerate()
                .map(|(v, c)| c.ok_or_else(|| Error::Integrity(format!("node {v} has no cluster"))))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let ds = NodeDataset { graph, splits: load_splits(dir)?, clusters };
    ds.validate()?;
    Ok(ds)
}

/// Raw `(head, relation, tail)` strings with line numbers.
pub fn load_triples(path: &Path) -> Result<Vec<(usize, [String; 3])>> {
    let text = read(path)?;
    content_lines(&text)
        .map(|(n, l)| {
            let parts: Vec<&str> = l.split('\t').collect();
            if parts.len() != 3 || parts.iter().any(|p| p.trim().is_empty()) {
                return Err(parse_err(path, n, "expected `head<TAB>relation<TAB>tail`"));
            }
            Ok((n, [parts[0].to_string(), parts[1].to_string(), parts[2].to_string()]))
        })
        .collect()
}

/// Interns strings in first-appearance order.
#[derive(Default)]
struct Vocab {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }
}

/// KG bundle: `train.txt`, `valid.txt`, `test.txt`; vocabularies follow
/// first appearance across the three files in that order.
pub fn load_kg_bundle(dir: &Path) -> Result<KgDataset> {
    let (mut entities, mut relations) = (Vocab::default(), Vocab::default());
    let mut splits: Vec<Vec<Triple>> = Vec::new();
    for file in TRIPLE_FILES {
        let path = dir.join(file);
        let mut seen = HashMap::new();
        let mut triples = Vec::new();
        for (n, [h, r, t]) in load_triples(&path)? {
            let triple = Triple::new(entities.intern(&h), relations.intern(&r), entities.intern(&t));
            if let Some(first) = seen.insert(triple, n) {
                return Err(parse_err(&path, n, format!("duplicate of the triple on line {first}")));
            }
            triples.push(triple);
        }
        splits.push(triples);
    }
    let test = splits.pop().expect("three files");
    let valid = splits.pop().expect("three files");
    let train = splits.pop().expect("three files");
    KgDataset::new(entities.names, relations.names, train, valid, test)
}

pub fn load_graph_set(path: &Path) -> Result<Vec<GraphSample>> {
    let text = read(path)?;
    let mut graphs = Vec::new();
    let mut header: Option<(usize, usize, f64)> = None;
    let mut edges: Vec<EdgeLine> = Vec::new();
    let mut flush = |header: &mut Option<(usize, usize, f64)>, edges: &mut Vec<EdgeLine>| -> Result<()> {
        if let Some((line, n, target)) = header.take() {
            if let Some(&(l, u, v, _)) = edges.iter().find(|e| e.1.max(e.2) >= n) {
                return Err(Error::Integrity(format!(
                    "{}:{l}: edge {u}-{v} outside the {n}-node graph declared on line {line}",
                    path.display()
                )));
            }
            graphs.push(GraphSample { graph: build_graph(path, n, edges)?, target });
            edges.clear();
        }
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let l = raw.trim_end_matches('\r');
        if l.trim().is_empty() {
            flush(&mut header, &mut edges)?;
            continue;
        }
        if l.trim_start().starts_with('#') {
            continue;
        }
        if header.is_none() {
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 2 || l.contains('\t') {
                return Err(parse_err(path, n, "expected block header `N <target>`"));
            }
            header = Some((n, field(path, n, parts[0], "node count")?, real(path, n, parts[1])?));
        } else {
            edges.push(parse_edge(path, n, l)?);
        }
    }
    flush(&mut header, &mut edges)?;
    Ok(graphs)
}

pub fn load_graph_set_bundle(dir: &Path) -> Result<GraphSetDataset> {
    let graphs = load_graph_set(&dir.join(GRAPHS_FILE))?;
    let splits = load_splits(dir)?;
    splits.validate(graphs.len(), "graph")?;
    Ok(GraphSetDataset { graphs, splits })
}

/// Detects the bundle kind from the files present.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if dir.join(GRAPHS_FILE).exists() {
        Ok(Dataset::Graphs(load_graph_set_bundle(dir)?))
    } else if dir.join(TRIPLE_FILES[0]).exists() {
        Ok(Dataset::Kg(load_kg_bundle(dir)?))
    } else if dir.join(EDGES_FILE).exists() {
        Ok(Dataset::Nodes(load_node_bundle(dir)?))
    } else {
        Err(Error::Integrity(format!(
            "{} holds no {GRAPHS_FILE}, {} or {EDGES_FILE}",
            dir.display(),
            TRIPLE_FILES[0]
        )))
    }
}

/// Resolves a data path against a root directory unless it is absolute.
pub fn resolve_data_path(path: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

fn write_lines<I, D>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = D>,
    D: Display,
{
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(out, "{l}")?;
    }
    out.flush()?;
    Ok(())
}

fn edge_line(u: NodeId, v: NodeId, r: Option<usize>) -> String {
    match r {
        Some(r) => format!("{u}\t{v}\t{r}"),
        None => format!("{u}\t{v}"),
    }
}

fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    for (file, ids) in SPLIT_FILES.iter().zip([&splits.train, &splits.valid, &splits.test]) {
        write_lines(&dir.join(file), ids.iter())?;
    }
    Ok(())
}

fn format_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

pub fn write_node_bundle(dir: &Path, ds: &NodeDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let g = &ds.graph;
    write_lines(&dir.join(EDGES_FILE), g.edges().iter().map(|e| edge_line(e.source, e.target, e.relation)))?;
    if let Some(f) = g.features() {
        write_lines(&dir.join(FEATURES_FILE), (0..f.rows()).map(|r| format_row(f.row(r))))?;
    }
    let mut lines = Vec::new();
    match g.labels() {
        Some(Labels::Single { classes, values }) => {
            lines.push(format!("{CLASSES_DIRECTIVE} {classes}"));
            lines.extend(values.iter().enumerate().map(|(v, c)| format!("{v}\t{c}")));
        }
        Some(Labels::Multi { classes, bits }) => {
            lines.push(MULTI_LABEL_DIRECTIVE.to_string());
            lines.push(format!("{CLASSES_DIRECTIVE} {classes}"));
            for (v, row) in bits.iter().enumerate() {
                lines.extend(row.iter().enumerate().filter(|(_, &b)| b).map(|(c, _)| format!("{v}\t{c}")));
            }
        }
        None => return Err(Error::Integrity("node dataset has no labels".into())),
    }
    write_lines(&dir.join(LABELS_FILE), lines)?;
    if let Some(c) = &ds.clusters {
        write_lines(&dir.join(CLUSTERS_FILE), c.iter().enumerate().map(|(v, k)| format!("{v}\t{k}")))?;
    }
    write_splits(dir, &ds.splits)
}

pub fn write_kg_bundle(dir: &Path, ds: &KgDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (file, triples) in TRIPLE_FILES.iter().zip([&ds.train, &ds.valid, &ds.test]) {
        write_lines(
            &dir.join(file),
            triples.iter().map(|t| {
                format!("{}\t{}\t{}", ds.entities[t.head], ds.relations[t.relation], ds.entities[t.tail])
            }),
        )?;
    }
    Ok(())
}

pub fn write_graph_set_bundle(dir: &Path, ds: &GraphSetDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = Vec::new();
    for (i, s) in ds.graphs.iter().enumerate() {
        if i > 0 {
            lines.push(String::new());
        }
        lines.push(format!("{} {:?}", s.graph.node_count(), s.target));
        lines.extend(s.graph.edges().iter().map(|e| edge_line(e.source, e.target, e.relation)));
    }
    write_lines(&dir.join(GRAPHS_FILE), lines)?;
    write_splits(dir, &ds.splits)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    match ds {
        Dataset::Nodes(d) => write_node_bundle(dir, d),
        Dataset::Kg(d) => write_kg_bundle(dir, d),
        Dataset::Graphs(d) => write_graph_set_bundle(dir, d),
    }
}
