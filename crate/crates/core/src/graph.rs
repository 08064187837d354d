//! Doubled-arc directed graphs.
//!
//! Every undirected edge `{i, j}` becomes the two arcs `i → j` and `j → i`, so
//! the graph is `G ∪ Ḡ` for an arbitrary orientation `G`. Arcs are stored
//! sorted by `(source, target)`, which makes the outgoing arcs of node `i` a
//! contiguous range and gives a block-CSR layout for free.

use std::collections::{BTreeSet, VecDeque};
use std::ops::Range;

use crate::error::{Error, Result};

/// Distance reported by [`DirectedGraph::bfs_distances`] for unreachable nodes.
pub const UNREACHABLE: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectedGraph {
    num_nodes: usize,
    arcs: Vec<(usize, usize)>,
    row_offsets: Vec<usize>,
    reverse_arc: Vec<usize>,
}

impl DirectedGraph {
    /// Builds `G ∪ Ḡ` from an undirected edge list. Repeated and reversed
    /// duplicates collapse to a single undirected edge.
    pub fn from_undirected_edges(edges: &[(usize, usize)], num_nodes: usize) -> Result<Self> {
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            for index in [a, b] {
                if index >= num_nodes {
                    return Err(Error::NodeOutOfRange { index, num_nodes });
                }
            }
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            set.insert((a, b));
            set.insert((b, a));
        }
        let arcs: Vec<(usize, usize)> = set.into_iter().collect();

        let mut row_offsets = vec![0usize; num_nodes + 1];
        for &(s, _) in &arcs {
            row_offsets[s + 1] += 1;
        }
        for i in 0..num_nodes {
            row_offsets[i + 1] += row_offsets[i];
        }
        let reverse_arc = arcs
            .iter()
            .map(|&(s, t)| {
                let row = &arcs[row_offsets[t]..row_offsets[t + 1]];
                row_offsets[t] + row.binary_search(&(t, s)).expect("arc set is symmetric")
            })
            .collect();

        Ok(Self {
            num_nodes,
            arcs,
            row_offsets,
            reverse_arc,
        })
    }

    pub fn path(num_nodes: usize) -> Self {
        let edges: Vec<_> = (1..num_nodes).map(|i| (i - 1, i)).collect();
        Self::from_undirected_edges(&edges, num_nodes).expect("path edges are valid")
    }

    pub fn cycle(num_nodes: usize) -> Self {
        let edges: Vec<_> = (0..num_nodes).map(|i| (i, (i + 1) % num_nodes)).collect();
        Self::from_undirected_edges(&edges, num_nodes).expect("cycle edges are valid")
    }

    /// Disjoint union; node ids of later graphs are shifted past earlier ones.
    pub fn disjoint_union<'a>(graphs: impl IntoIterator<Item = &'a DirectedGraph>) -> Self {
        let mut edges = Vec::new();
        let mut offset = 0;
        for g in graphs {
            edges.extend(
                g.undirected_edges()
                    .into_iter()
                    .map(|(a, b)| (a + offset, b + offset)),
            );
            offset += g.num_nodes;
        }
        Self::from_undirected_edges(&edges, offset).expect("union of valid graphs is valid")
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::Shape(format!(
                "permutation of length {} for {} nodes",
                perm.len(),
                self.num_nodes
            )));
        }
        let edges: Vec<_> = self
            .undirected_edges()
            .into_iter()
            .map(|(a, b)| (perm[a], perm[b]))
            .collect();
        Self::from_undirected_edges(&edges, self.num_nodes)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    pub fn arcs(&self) -> &[(usize, usize)] {
        &self.arcs
    }

    /// Index of the arc `j → i` paired with arc `e = i → j`.
    pub fn reverse_arc(&self, e: usize) -> usize {
        self.reverse_arc[e]
    }

    /// Arc indices whose source is `i`.
    pub fn out_arcs(&self, i: usize) -> Range<usize> {
        self.row_offsets[i]..self.row_offsets[i + 1]
    }

    /// `N(i)`, sorted ascending.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.arcs[self.out_arcs(i)].iter().map(|&(_, t)| t)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.degree(i)
    }

    /// Equal to the out-degree on a doubled graph.
    pub fn in_degree(&self, i: usize) -> usize {
        self.degree(i)
    }

    pub fn has_arc(&self, i: usize, j: usize) -> bool {
        i < self.num_nodes && self.arcs[self.out_arcs(i)].binary_search(&(i, j)).is_ok()
    }

    /// One `(i, j)` with `i < j` per undirected edge.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.arcs.iter().copied().filter(|&(a, b)| a < b).collect()
    }

    pub fn bfs_distances(&self, source: usize) -> Result<Vec<usize>> {
        if source >= self.num_nodes {
            return Err(Error::NodeOutOfRange {
                index: source,
                num_nodes: self.num_nodes,
            });
        }
        let mut dist = vec![UNREACHABLE; self.num_nodes];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if dist[v] == UNREACHABLE {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        Ok(dist)
    }

    /// Nodes within `radius` hops of `source`, ascending.
    pub fn ball(&self, source: usize, radius: usize) -> Result<Vec<usize>> {
        Ok(self
            .bfs_distances(source)?
            .into_iter()
            .enumerate()
            .filter(|&(_, d)| d <= radius)
            .map(|(v, _)| v)
            .collect())
    }
}
