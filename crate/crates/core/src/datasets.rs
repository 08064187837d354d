//! Node-classification datasets: the graph JSON format, the NeighborsMatch
//! tree generator and the relay-path map schedule.
//!
//! Graph files look like
//!
//! ```json
//! {"num_nodes": 3, "edges": [[0, 1], [1, 2]],
//!  "features": [[1.0], [0.0], [2.0]], "labels": [0, 1, -1],
//!  "splits": [{"train": [0], "val": [1], "test": []}], "metric": "accuracy"}
//! ```
//!
//! Edges are undirected and doubled on load. A label of `-1` marks an
//! unlabeled node. `num_classes` and `metadata` are optional.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::sheaf::{random_orthogonal, ConformalMap, DirectedSheaf};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Accuracy,
    RocAuc,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    #[serde(default)]
    pub val: Vec<usize>,
    #[serde(default)]
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeDataset {
    pub graph: DirectedGraph,
    pub features: Tensor,
    /// `None` for unlabeled nodes.
    pub labels: Vec<Option<usize>>,
    pub splits: Vec<Split>,
    pub metric: MetricKind,
    num_classes: usize,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    features: Vec<Vec<f64>>,
    labels: Vec<i64>,
    splits: Vec<Split>,
    #[serde(default)]
    metric: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, serde_json::Value>,
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        field: field.into(),
        message: message.into(),
    }
}

impl NodeDataset {
    /// Validates and assembles a dataset. Split nodes must be labeled and the
    /// three parts of one split must be disjoint.
    pub fn new(
        graph: DirectedGraph,
        features: Tensor,
        labels: Vec<Option<usize>>,
        splits: Vec<Split>,
        metric: MetricKind,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        if features.rows != n {
            return Err(schema("features", format!("{} rows for {n} nodes", features.rows)));
        }
        if labels.len() != n {
            return Err(schema("labels", format!("{} entries for {n} nodes", labels.len())));
        }
        if !features.is_finite() {
            return Err(schema("features", "non-finite value"));
        }
        let max_label = labels.iter().flatten().max().copied();
        let num_classes = match (num_classes, max_label) {
            (Some(c), Some(m)) if m >= c => {
                return Err(schema("labels", format!("label {m} with num_classes {c}")));
            }
            (Some(c), _) => c,
            (None, Some(m)) => m + 1,
            (None, None) => 0,
        };
        if metric == MetricKind::RocAuc && num_classes > 2 {
            return Err(schema("metric", format!("roc_auc needs binary labels, found {num_classes} classes")));
        }
        for (s, split) in splits.iter().enumerate() {
            let mut owner = vec![None; n];
            for (part, nodes) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
                for (k, &v) in nodes.iter().enumerate() {
                    let field = || format!("splits[{s}].{part}[{k}]");
                    if v >= n {
                        return Err(schema(field(), format!("node {v} out of range for {n} nodes")));
                    }
                    if labels[v].is_none() {
                        return Err(schema(field(), format!("node {v} is unlabeled")));
                    }
                    if let Some(prev) = owner[v] {
                        return Err(schema(field(), format!("node {v} already listed in {prev}")));
                    }
                    owner[v] = Some(part);
                }
            }
        }
        Ok(Self {
            graph,
            features,
            labels,
            splits,
            metric,
            num_classes,
            metadata: BTreeMap::new(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self, k: usize) -> Result<&Split> {
        self.splits.get(k).ok_or_else(|| {
            schema("splits", format!("split {k} requested, file has {}", self.splits.len()))
        })
    }

    /// Labels of `nodes`, which must all be labeled.
    pub fn labels_of(&self, nodes: &[usize]) -> Result<Vec<usize>> {
        nodes
            .iter()
            .map(|&v| {
                self.labels
                    .get(v)
                    .copied()
                    .flatten()
                    .ok_or_else(|| schema("labels", format!("node {v} has no label")))
            })
            .collect()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        let n = file.num_nodes;
        let mut edges = Vec::with_capacity(file.edges.len());
        for (k, &[a, b]) in file.edges.iter().enumerate() {
            if a >= n || b >= n {
                return Err(schema(format!("edges[{k}]"), format!("[{a}, {b}] out of range for {n} nodes")));
            }
            if a == b {
                return Err(schema(format!("edges[{k}]"), format!("self-loop on node {a}")));
            }
            edges.push((a, b));
        }
        let graph = DirectedGraph::from_undirected_edges(&edges, n)?;
        if file.features.len() != n {
            return Err(schema("features", format!("{} rows for {n} nodes", file.features.len())));
        }
        let width = file.features.first().map_or(0, Vec::len);
        for (i, row) in file.features.iter().enumerate() {
            if row.len() != width {
                return Err(schema(format!("features[{i}]"), format!("{} values, expected {width}", row.len())));
            }
        }
        let features = Tensor::from_rows(&file.features)?;
        let mut labels = Vec::with_capacity(file.labels.len());
        for (i, &l) in file.labels.iter().enumerate() {
            labels.push(match l {
                -1 => None,
                l if l >= 0 => Some(l as usize),
                l => return Err(schema(format!("labels[{i}]"), format!("{l} is neither a class nor -1"))),
            });
        }
        let mut ds = Self::new(graph, features, labels, file.splits, file.metric, file.num_classes)?;
        ds.metadata = file.metadata;
        Ok(ds)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = GraphFile {
            num_nodes: self.num_nodes(),
            edges: self.graph.undirected_edges().into_iter().map(|(a, b)| [a, b]).collect(),
            features: (0..self.features.rows).map(|r| self.features.row(r).to_vec()).collect(),
            labels: self.labels.iter().map(|l| l.map_or(-1, |v| v as i64)).collect(),
            splits: self.splits.clone(),
            metric: self.metric,
            num_classes: Some(self.num_classes),
            metadata: self.metadata.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }
}

pub fn load_graph_json(path: &Path) -> Result<NodeDataset> {
    NodeDataset::from_json_str(&fs::read_to_string(path)?)
}

pub fn save_graph_json(ds: &NodeDataset, path: &Path) -> Result<()> {
    fs::write(path, ds.to_json_string()?)?;
    Ok(())
}

/// Layout of one NeighborsMatch tree: node `0` is the root and node `k` has
/// children `2k+1` and `2k+2`.
pub fn binary_tree(depth: usize) -> DirectedGraph {
    let n = (1usize << (depth + 1)) - 1;
    let edges: Vec<_> = (1..n).map(|c| ((c - 1) / 2, c)).collect();
    DirectedGraph::from_undirected_edges(&edges, n).expect("tree edges are valid")
}

/// NeighborsMatch trees batched into one disjoint-union graph.
///
/// Every node carries two one-hot markers of width `K + 1` (`K = 2^depth`
/// leaves, slot `0` meaning blank): a neighbor-count marker and a class
/// marker. Leaf `m` has count `m + 1` and a class drawn from a per-tree
/// permutation. The root has a count and a blank class; its label is the
/// class of the leaf with the same count. Internal nodes are blank.
#[derive(Clone, Debug)]
pub struct NeighborsMatch {
    pub depth: usize,
    pub dataset: NodeDataset,
    /// Root node of each tree in the batched graph.
    pub roots: Vec<usize>,
}

impl NeighborsMatch {
    pub fn num_leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn tree_size(&self) -> usize {
        (1 << (self.depth + 1)) - 1
    }

    /// Recovers a root's label from the features alone.
    pub fn derive_root_label(&self, root: usize) -> Option<usize> {
        let k = self.num_leaves();
        let f = &self.dataset.features;
        let hot = |row: &[f64]| row.iter().position(|&v| v == 1.0);
        let wanted = hot(&f.row(root)[..k + 1])?;
        (root..root + self.tree_size())
            .filter(|&v| hot(&f.row(v)[..k + 1]) == Some(wanted) && v != root)
            .map(|v| hot(&f.row(v)[k + 1..]))
            .next()
            .flatten()
            .and_then(|c| c.checked_sub(1))
    }
}

/// Generates `num_examples` trees of the given depth. Roots are split 80/20
/// into train and test.
pub fn gen_neighborsmatch(depth: usize, num_examples: usize, seed: u64) -> Result<NeighborsMatch> {
    if depth == 0 || depth > 12 {
        return Err(Error::Config(format!("NeighborsMatch depth must lie in 1..=12, got {depth}")));
    }
    if num_examples == 0 {
        return Err(Error::Config("NeighborsMatch needs at least one example".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = binary_tree(depth);
    let size = tree.num_nodes();
    let k = 1usize << depth;
    let first_leaf = k - 1;
    let width = 2 * (k + 1);

    let mut features = Tensor::zeros(size * num_examples, width);
    let mut labels = vec![None; size * num_examples];
    let mut roots = Vec::with_capacity(num_examples);
    for ex in 0..num_examples {
        let base = ex * size;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let selected = rng.gen_range(0..k);
        for v in 0..size {
            let row = features.row_mut(base + v);
            if v == 0 {
                row[selected + 1] = 1.0;
                row[k + 1] = 1.0;
            } else if v >= first_leaf {
                let m = v - first_leaf;
                row[m + 1] = 1.0;
                row[k + 1 + perm[m] + 1] = 1.0;
            } else {
                row[0] = 1.0;
                row[k + 1] = 1.0;
            }
        }
        labels[base] = Some(perm[selected]);
        roots.push(base);
    }
    let graph = DirectedGraph::disjoint_union(std::iter::repeat(&tree).take(num_examples));
    let num_train = (num_examples * 4).div_ceil(5);
    let split = Split {
        train: roots[..num_train].to_vec(),
        val: Vec::new(),
        test: roots[num_train..].to_vec(),
    };
    let mut dataset = NodeDataset::new(graph, features, labels, vec![split], MetricKind::Accuracy, Some(k))?;
    dataset.metadata.insert("generator".into(), "neighborsmatch".into());
    dataset.metadata.insert("depth".into(), depth.into());
    dataset.metadata.insert("num_examples".into(), num_examples.into());
    dataset.metadata.insert("seed".into(), seed.into());
    Ok(NeighborsMatch {
        depth,
        dataset,
        roots,
    })
}

/// A path with a per-layer map schedule that hands a signal from the far end
/// (node `t`) to the endpoint (node `0`) one hop per layer.
#[derive(Clone, Debug)]
pub struct RelaySchedule {
    pub graph: DirectedGraph,
    /// At layer `ℓ` (0-based) only `T` at node `t−ℓ−1` and `S` at node `t−ℓ`
    /// are nonzero.
    pub layers: Vec<DirectedSheaf>,
    pub far: usize,
    pub endpoint: usize,
}

impl RelaySchedule {
    /// The node that receives in layer `l`.
    pub fn receiver(&self, l: usize) -> usize {
        self.far - l - 1
    }

    pub fn sender(&self, l: usize) -> usize {
        self.far - l
    }
}

/// Unit scales; orthogonal parts are drawn from `seed`.
pub fn gen_relay_path(t: usize, d: usize, seed: u64) -> Result<RelaySchedule> {
    if t == 0 || d == 0 {
        return Err(Error::Config(format!("relay path needs t ≥ 1 and d ≥ 1, got t={t}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = DirectedGraph::path(t + 1);
    let mut layers = Vec::with_capacity(t);
    for l in 0..t {
        let mut sheaf = DirectedSheaf::zeros(t + 1, d);
        sheaf.set_target(t - l - 1, ConformalMap::new(1.0, random_orthogonal(d, &mut rng))?);
        sheaf.set_source(t - l, ConformalMap::new(1.0, random_orthogonal(d, &mut rng))?);
        layers.push(sheaf);
    }
    Ok(RelaySchedule {
        graph,
        layers,
        far: t,
        endpoint: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_sizes() {
        assert_eq!(binary_tree(2).num_nodes(), 7);
        let nm = gen_neighborsmatch(2, 3, 0).unwrap();
        assert_eq!(nm.dataset.num_nodes(), 21);
        assert_eq!(nm.dataset.num_features(), 10);
        assert_eq!(nm.dataset.num_classes(), 4);
        assert!(gen_neighborsmatch(0, 3, 0).is_err());
    }

    #[test]
    fn exactly_one_leaf_matches_each_root() {
        let nm = gen_neighborsmatch(2, 200, 11).unwrap();
        let k = nm.num_leaves();
        let f = &nm.dataset.features;
        for &root in &nm.roots {
            let key = f.row(root)[..k + 1].iter().position(|&v| v == 1.0).unwrap();
            assert!(key > 0);
            let matches = (root + 1..root + nm.tree_size())
                .filter(|&v| f.row(v)[key] == 1.0)
                .count();
            assert_eq!(matches, 1);
            assert_eq!(nm.derive_root_label(root), nm.dataset.labels[root]);
        }
        let labelled = nm.dataset.labels.iter().flatten().count();
        assert_eq!(labelled, 200);
    }

    #[test]
    fn relay_schedule_shape() {
        let r = gen_relay_path(4, 1, 0).unwrap();
        assert_eq!(r.graph.num_nodes(), 5);
        assert_eq!(r.graph.num_arcs(), 8);
        let first = &r.layers[0];
        for i in 0..5 {
            assert_eq!(first.target(i).scale != 0.0, i == 3);
            assert_eq!(first.source(i).scale != 0.0, i == 4);
        }
        for sheaf in &r.layers {
            let nonzero = sheaf
                .maps()
                .iter()
                .map(|p| (p.source.scale != 0.0) as usize + (p.target.scale != 0.0) as usize)
                .sum::<usize>();
            assert_eq!(nonzero, 2);
        }
        let one = gen_relay_path(1, 2, 0).unwrap();
        assert_eq!((one.graph.num_arcs(), one.layers.len()), (2, 1));
    }

    #[test]
    fn json_round_trip_and_diagnostics() {
        let text = r#"{"num_nodes": 2, "edges": [[0, 1]], "features": [[1.0], [2.0]],
            "labels": [0, 1], "splits": [{"train": [0], "val": [1], "test": []}], "metric": "accuracy"}"#;
        let ds = NodeDataset::from_json_str(text).unwrap();
        assert_eq!(ds.graph.num_arcs(), 2);
        let again = NodeDataset::from_json_str(&ds.to_json_string().unwrap()).unwrap();
        assert_eq!(again, ds);

        let bad_edge = text.replace("[[0, 1]]", "[[0, 5]]");
        match NodeDataset::from_json_str(&bad_edge) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "edges[0]"),
            other => panic!("{other:?}"),
        }
        let overlap = text.replace(r#""val": [1]"#, r#""val": [0]"#);
        match NodeDataset::from_json_str(&overlap) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "splits[0].val[0]"),
            other => panic!("{other:?}"),
        }
        match NodeDataset::from_json_str("{\n  \"num_nodes\": 2,\n  \"edges\": oops\n}") {
            Err(Error::Json { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
