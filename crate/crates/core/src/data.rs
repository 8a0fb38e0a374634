//! Dataset ingestion: the canonical node-classification document, TU flat
//! files for graph classification, neighbourhood hypergraphs, splits and
//! stratified folds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;
use crate::tensor::Tensor;

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "HERALD_DATA_DIR";

pub const NODE_FORMAT: &str = "herald-hypergraph-dataset";
pub const NODE_FORMAT_VERSION: u32 = 1;

/// Size of the planted semi-supervised split.
pub const TRAIN_PER_CLASS: usize = 20;
pub const VAL_SIZE: usize = 500;
pub const TEST_SIZE: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct NodeDataset {
    pub name: String,
    pub hypergraph: Hypergraph,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct MaskDoc {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NodeDoc {
    format: String,
    version: u32,
    name: String,
    num_nodes: usize,
    num_classes: usize,
    hyperedges: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_weights: Option<Vec<f64>>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masks: Option<MaskDoc>,
}

impl NodeDataset {
    /// Validates every invariant and patches isolated nodes with singleton
    /// hyperedges.
    pub fn new(
        name: impl Into<String>,
        mut hypergraph: Hypergraph,
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Option<(Vec<usize>, Vec<usize>, Vec<usize>)>,
        split_seed: u64,
    ) -> Result<Self> {
        let name = name.into();
        let n = hypergraph.num_nodes();
        if n == 0 {
            return Err(Error::Validation(format!("{name}: dataset has no nodes")));
        }
        if !features.is_matrix() || features.rows() != n || features.cols() == 0 {
            return Err(Error::Validation(format!(
                "{name}: features have shape {:?}, expected {n} rows",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Validation(format!(
                "{name}: features contain non-finite values"
            )));
        }
        if labels.len() != n {
            return Err(Error::Validation(format!(
                "{name}: {} labels for {n} nodes",
                labels.len()
            )));
        }
        if let Some((v, &c)) = labels.iter().enumerate().find(|(_, &c)| c >= num_classes) {
            return Err(Error::Validation(format!(
                "{name}: label {c} of node {v} is out of range for {num_classes} classes"
            )));
        }
        let patched = hypergraph.patch_isolated();
        if !patched.is_empty() {
            log::warn!(
                "{name}: {} isolated nodes given singleton hyperedges (first: {})",
                patched.len(),
                patched[0]
            );
        }
        let (train, val, test) = match split {
            Some(s) => s,
            None => planted_split(&labels, num_classes, split_seed),
        };
        check_masks(&name, n, &train, &val, &test)?;
        Ok(NodeDataset {
            name,
            hypergraph,
            features,
            labels,
            num_classes,
            train,
            val,
            test,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.hypergraph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Replaces the masks with a fresh planted split.
    pub fn resplit(&mut self, seed: u64) {
        let (train, val, test) = planted_split(&self.labels, self.num_classes, seed);
        self.train = train;
        self.val = val;
        self.test = test;
    }
}

fn check_masks(name: &str, n: usize, train: &[usize], val: &[usize], test: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for (mask, idx) in [("train", train), ("val", val), ("test", test)] {
        if idx.is_empty() {
            return Err(Error::Validation(format!("{name}: {mask} mask is empty")));
        }
        for &v in idx {
            if v >= n {
                return Err(Error::Validation(format!(
                    "{name}: {mask} mask references node {v} of {n}"
                )));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::Validation(format!(
                    "{name}: node {v} appears twice across masks"
                )));
            }
        }
    }
    Ok(())
}

/// Planted split: `TRAIN_PER_CLASS` nodes per class for training, then up to
/// `VAL_SIZE` validation and `TEST_SIZE` test nodes from the remainder. On
/// small graphs the remainder is divided evenly between validation and test.
pub fn planted_split(
    labels: &[usize],
    num_classes: usize,
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    let mut sizes = vec![0usize; num_classes];
    for &c in labels {
        sizes[c] += 1;
    }
    let mut taken = vec![0usize; num_classes];
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for v in order {
        let c = labels[v];
        if taken[c] < TRAIN_PER_CLASS && taken[c] + 1 < sizes[c] {
            taken[c] += 1;
            train.push(v);
        } else {
            rest.push(v);
        }
    }
    let n_val = VAL_SIZE.min(rest.len() / 2);
    let n_test = TEST_SIZE.min(rest.len() - n_val);
    let mut test = rest[n_val..n_val + n_test].to_vec();
    rest.truncate(n_val);
    train.sort_unstable();
    rest.sort_unstable();
    test.sort_unstable();
    (train, rest, test)
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Loads a canonical node-classification document.
pub fn load_node_dataset(path: &Path, split_seed: u64) -> Result<NodeDataset> {
    let text = fs::read_to_string(path)?;
    let doc: NodeDoc = serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
    if doc.format != NODE_FORMAT {
        return Err(parse_err(
            path,
            format!("unknown format tag {:?}", doc.format),
        ));
    }
    if doc.version != NODE_FORMAT_VERSION {
        return Err(parse_err(
            path,
            format!("unsupported version {}", doc.version),
        ));
    }
    if doc.features.len() != doc.num_nodes {
        return Err(Error::Validation(format!(
            "{}: {} feature rows for {} nodes",
            doc.name,
            doc.features.len(),
            doc.num_nodes
        )));
    }
    let width = doc.features.first().map_or(0, Vec::len);
    if let Some(i) = doc.features.iter().position(|r| r.len() != width) {
        return Err(Error::Validation(format!(
            "{}: feature row {i} has {} entries, expected {width}",
            doc.name,
            doc.features[i].len()
        )));
    }
    let features = Tensor::new(vec![doc.num_nodes, width], doc.features.concat())?;
    let hypergraph = match doc.edge_weights {
        Some(w) => Hypergraph::with_weights(doc.num_nodes, doc.hyperedges, w)?,
        None => Hypergraph::new(doc.num_nodes, doc.hyperedges)?,
    };
    let split = doc.masks.map(|m| (m.train, m.val, m.test));
    NodeDataset::new(
        doc.name,
        hypergraph,
        features,
        doc.labels,
        doc.num_classes,
        split,
        split_seed,
    )
}

pub fn save_node_dataset(ds: &NodeDataset, path: &Path) -> Result<()> {
    let doc = NodeDoc {
        format: NODE_FORMAT.into(),
        version: NODE_FORMAT_VERSION,
        name: ds.name.clone(),
        num_nodes: ds.num_nodes(),
        num_classes: ds.num_classes,
        hyperedges: ds.hypergraph.hyperedges().to_vec(),
        edge_weights: ds
            .hypergraph
            .edge_weights()
            .iter()
            .any(|&w| w != 1.0)
            .then(|| ds.hypergraph.edge_weights().to_vec()),
        features: (0..ds.num_nodes())
            .map(|i| ds.features.row_slice(i).to_vec())
            .collect(),
        labels: ds.labels.clone(),
        masks: Some(MaskDoc {
            train: ds.train.clone(),
            val: ds.val.clone(),
            test: ds.test.clone(),
        }),
    };
    fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FeatureExport {
    Dense(Vec<Vec<f64>>),
    Sparse {
        shape: [usize; 2],
        rows: Vec<usize>,
        cols: Vec<usize>,
        values: Vec<f64>,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LabelExport {
    Ids(Vec<usize>),
    OneHot(Vec<Vec<f64>>),
}

#[derive(Deserialize)]
struct SplitExport {
    train: Vec<usize>,
    #[serde(default)]
    val: Option<Vec<usize>>,
    test: Vec<usize>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e))
}

/// Converts a JSON export of a co-citation / co-authorship release into a
/// [`NodeDataset`]. The directory holds `hypergraph.json` (hyperedge key to
/// member list), `features.json` (dense rows or `{shape, rows, cols, values}`),
/// `labels.json` (ids or one-hot rows) and optionally `splits/<split>.json`.
/// Splits without a validation list get one carved from their test list.
pub fn convert_hypergcn(
    dir: &Path,
    name: &str,
    split: Option<u32>,
    seed: u64,
) -> Result<NodeDataset> {
    let edges: BTreeMap<String, Vec<usize>> = read_json(&dir.join("hypergraph.json"))?;
    let features = match read_json::<FeatureExport>(&dir.join("features.json"))? {
        FeatureExport::Dense(rows) => {
            let width = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != width) {
                return Err(Error::Validation("ragged dense feature rows".into()));
            }
            Tensor::new(vec![rows.len(), width], rows.concat())?
        }
        FeatureExport::Sparse {
            shape,
            rows,
            cols,
            values,
        } => {
            if rows.len() != cols.len() || rows.len() != values.len() {
                return Err(Error::Validation(
                    "sparse feature triplets differ in length".into(),
                ));
            }
            let mut t = Tensor::zeros(&shape);
            for ((&r, &c), &v) in rows.iter().zip(&cols).zip(&values) {
                if r >= shape[0] || c >= shape[1] {
                    return Err(Error::Validation(format!(
                        "sparse entry ({r}, {c}) outside {shape:?}"
                    )));
                }
                t.set(r, c, v);
            }
            t
        }
    };
    let labels = match read_json::<LabelExport>(&dir.join("labels.json"))? {
        LabelExport::Ids(ids) => ids,
        LabelExport::OneHot(rows) => rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.iter()
                    .position(|&x| x == 1.0)
                    .ok_or_else(|| Error::Validation(format!("label row {i} is not one-hot")))
            })
            .collect::<Result<_>>()?,
    };
    let n = labels.len();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let hyperedges: Vec<Vec<usize>> = edges.into_values().collect();
    let hypergraph = Hypergraph::new(n, hyperedges)?;
    let masks = match split {
        None => None,
        Some(k) => {
            let s: SplitExport = read_json(&dir.join("splits").join(format!("{k}.json")))?;
            let (val, test) = match s.val {
                Some(val) => (val, s.test),
                None => {
                    let mut test = s.test;
                    test.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                    let n_val = VAL_SIZE.min(test.len() / 2);
                    let mut val: Vec<usize> = test.drain(..n_val).collect();
                    val.sort_unstable();
                    test.sort_unstable();
                    (val, test)
                }
            };
            Some((s.train, val, test))
        }
    };
    NodeDataset::new(name, hypergraph, features, labels, num_classes, masks, seed)
}

/// An ordinary undirected graph with per-node features.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainGraph {
    pub num_nodes: usize,
    /// Undirected edges `(u, v)` with `u < v`, deduplicated, no self loops.
    pub edges: Vec<(usize, usize)>,
    pub node_labels: Option<Vec<usize>>,
    pub label: usize,
}

impl PlainGraph {
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuDataset {
    pub name: String,
    pub graphs: Vec<PlainGraph>,
    pub num_classes: usize,
    /// Raw label value for each class id.
    pub class_values: Vec<i64>,
    /// Number of distinct node labels, when node labels are present.
    pub num_node_labels: Option<usize>,
}

fn read_ints(path: &Path) -> Result<Vec<Vec<i64>>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split(',')
                .map(|tok| {
                    tok.trim().parse::<i64>().map_err(|e| Error::Parse {
                        context: format!("{}:{}", path.display(), i + 1),
                        message: format!("{e}: {:?}", tok.trim()),
                    })
                })
                .collect()
        })
        .collect()
}

fn single_column(path: &Path) -> Result<Vec<i64>> {
    read_ints(path)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| match row.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Parse {
                context: format!("{}:{}", path.display(), i + 1),
                message: format!("expected one value, found {}", row.len()),
            }),
        })
        .collect()
}

/// Finds the `<NAME>` prefix of the `<NAME>_A.txt` file in `dir`.
fn tu_prefix(dir: &Path) -> Result<String> {
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(prefix) = name.strip_suffix("_A.txt") {
            return Ok(prefix.to_string());
        }
    }
    Err(Error::Validation(format!(
        "no *_A.txt file in {}",
        dir.display()
    )))
}

/// Loads a TU-format benchmark from its directory. Indices in the files are
/// 1-based; graph labels are mapped to `0..C` in increasing raw order.
pub fn load_tu_dataset(dir: &Path) -> Result<TuDataset> {
    let prefix = tu_prefix(dir)?;
    let file = |suffix: &str| dir.join(format!("{prefix}_{suffix}.txt"));
    let indicator = single_column(&file("graph_indicator"))?;
    let graph_labels = single_column(&file("graph_labels"))?;
    let node_labels = if file("node_labels").exists() {
        let l = single_column(&file("node_labels"))?;
        if l.len() != indicator.len() {
            return Err(Error::Validation(format!(
                "{} node labels for {} nodes",
                l.len(),
                indicator.len()
            )));
        }
        Some(l)
    } else {
        None
    };
    let num_graphs = graph_labels.len();
    let mut local = Vec::with_capacity(indicator.len());
    let mut counts = vec![0usize; num_graphs];
    for (v, &g) in indicator.iter().enumerate() {
        if g < 1 || g as usize > num_graphs {
            return Err(Error::Validation(format!(
                "node {} assigned to graph {g}, but there are {num_graphs} graphs",
                v + 1
            )));
        }
        if v > 0 && g < indicator[v - 1] {
            return Err(Error::Validation(format!(
                "graph indicator is not sorted at node {}",
                v + 1
            )));
        }
        let g = g as usize - 1;
        local.push(counts[g]);
        counts[g] += 1;
    }
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Validation(format!("graph {} has no nodes", g + 1)));
    }
    let mut edge_sets: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); num_graphs];
    for (line, row) in read_ints(&file("A"))?.into_iter().enumerate() {
        let (a, b) = match row.as_slice() {
            [a, b] => (*a, *b),
            _ => {
                return Err(Error::Parse {
                    context: format!("{}:{}", file("A").display(), line + 1),
                    message: "expected two node indices".into(),
                })
            }
        };
        let node = |x: i64| -> Result<usize> {
            if x < 1 || x as usize > indicator.len() {
                return Err(Error::Validation(format!(
                    "adjacency line {} references node {x} of {}",
                    line + 1,
                    indicator.len()
                )));
            }
            Ok(x as usize - 1)
        };
        let (u, v) = (node(a)?, node(b)?);
        if indicator[u] != indicator[v] {
            return Err(Error::Validation(format!(
                "adjacency line {} joins graphs {} and {}",
                line + 1,
                indicator[u],
                indicator[v]
            )));
        }
        if u != v {
            let g = indicator[u] as usize - 1;
            let (lu, lv) = (local[u], local[v]);
            edge_sets[g].insert((lu.min(lv), lu.max(lv)));
        }
    }
    let class_values: Vec<i64> = graph_labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let node_label_values: Option<Vec<i64>> = node_labels.as_ref().map(|l| {
        l.iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    });
    let mut graphs = Vec::with_capacity(num_graphs);
    let mut offset = 0;
    for (g, edges) in edge_sets.into_iter().enumerate() {
        let nodes = offset..offset + counts[g];
        offset += counts[g];
        graphs.push(PlainGraph {
            num_nodes: counts[g],
            edges: edges.into_iter().collect(),
            node_labels: node_labels.as_ref().map(|l| {
                let values = node_label_values.as_ref().unwrap();
                l[nodes.clone()]
                    .iter()
                    .map(|x| values.binary_search(x).unwrap())
                    .collect()
            }),
            label: class_values.binary_search(&graph_labels[g]).unwrap(),
        });
    }
    Ok(TuDataset {
        name: prefix,
        graphs,
        num_classes: class_values.len(),
        class_values,
        num_node_labels: node_label_values.map(|v| v.len()),
    })
}

/// Neighbourhood hypergraph: one hyperedge `{v} ∪ N(v)` per node.
pub fn graph_to_hypergraph(g: &PlainGraph) -> Hypergraph {
    let mut edges: Vec<Vec<usize>> = (0..g.num_nodes).map(|v| vec![v]).collect();
    for &(u, v) in &g.edges {
        edges[u].push(v);
        edges[v].push(u);
    }
    Hypergraph::new(g.num_nodes, edges).expect("neighbourhoods are non-empty and in range")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSample {
    pub hypergraph: Hypergraph,
    pub features: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub name: String,
    pub samples: Vec<GraphSample>,
    pub num_classes: usize,
    pub num_features: usize,
}

impl GraphDataset {
    /// Node features are one-hot node labels when present, otherwise one-hot
    /// degrees with every degree of at least `max_degree` sharing the last slot.
    pub fn from_tu(tu: &TuDataset, max_degree: usize) -> Result<Self> {
        if tu.graphs.is_empty() {
            return Err(Error::Validation(format!("{}: no graphs", tu.name)));
        }
        let width = match tu.num_node_labels {
            Some(k) => k,
            None => max_degree + 1,
        };
        let samples = tu
            .graphs
            .iter()
            .map(|g| {
                let slots: Vec<usize> = match &g.node_labels {
                    Some(l) => l.clone(),
                    None => g.degrees().into_iter().map(|d| d.min(max_degree)).collect(),
                };
                let mut x = Tensor::zeros(&[g.num_nodes, width]);
                for (v, s) in slots.into_iter().enumerate() {
                    x.set(v, s, 1.0);
                }
                GraphSample {
                    hypergraph: graph_to_hypergraph(g),
                    features: x,
                    label: g.label,
                }
            })
            .collect();
        Ok(GraphDataset {
            name: tu.name.clone(),
            samples,
            num_classes: tu.num_classes,
            num_features: width,
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Splits `0..labels.len()` into `k` folds, stratified by label. Each class is
/// shuffled and dealt round-robin, continuing from where the previous class
/// stopped, so fold sizes differ by at most one. Falls back to an unstratified
/// shuffle when some class has fewer than `k` members.
pub fn make_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!(
            "cannot split {n} items into {k} folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = if by_class.values().any(|m| m.len() < k) {
        log::warn!("a class has fewer than {k} members; folds are not stratified");
        vec![(0..n).collect()]
    } else {
        by_class.into_values().collect()
    };
    let mut folds = vec![Vec::new(); k];
    let mut cursor = 0;
    for mut members in groups {
        members.shuffle(&mut rng);
        for i in members {
            folds[cursor % k].push(i);
            cursor += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Dataset root: `$HERALD_DATA_DIR`, else `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Resolves a node dataset name to `<root>/<name>.json` or
/// `<root>/<name>/dataset.json`. Existing paths are returned as is.
pub fn find_node_dataset(name: &str) -> Option<PathBuf> {
    let direct = PathBuf::from(name);
    if direct.is_file() {
        return Some(direct);
    }
    let root = data_root();
    [
        root.join(format!("{name}.json")),
        root.join(name).join("dataset.json"),
    ]
    .into_iter()
    .find(|p| p.is_file())
}

/// Resolves a TU benchmark name to a directory holding `<NAME>_A.txt`, trying
/// the name as given and upper-cased under the data root.
pub fn find_tu_dataset(name: &str) -> Option<PathBuf> {
    let direct = PathBuf::from(name);
    let root = data_root();
    [direct, root.join(name), root.join(name.to_uppercase())]
        .into_iter()
        .find(|p| p.is_dir() && tu_prefix(p).is_ok())
}
