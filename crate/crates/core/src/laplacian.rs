//! Block-sparse sheaf Laplacians.
//!
//! Off-diagonal blocks follow the arcs of a [`DirectedGraph`], so the operator
//! is a block-CSR matrix with `d × d` dense blocks. Diagonal blocks of
//! conformal sheaves are scalar multiples of the identity and are stored as a
//! single number.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::DirectedGraph;
use crate::sheaf::DirectedSheaf;
use crate::tensor::{FeatureMatrix, Tensor};

/// Diagonal blocks whose deviation from `s·I` exceeds this are rejected by
/// [`BlockOperator::normalize`].
pub const CONFORMAL_DIAG_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// `L^out`
    Out,
    /// `(L^in)ᵀ`
    InTranspose,
    /// Undirected flat-bundle Laplacian.
    Flat,
    /// Anything assembled by hand.
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DiagBlock {
    /// `s·I`
    Scalar(f64),
    /// Row-major `d × d`.
    Dense(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockOperator {
    num_nodes: usize,
    dim: usize,
    kind: OperatorKind,
    normalized: bool,
    diag: Vec<DiagBlock>,
    row_offsets: Vec<usize>,
    cols: Vec<usize>,
    /// `cols.len()` blocks of `d*d` values each.
    blocks: Vec<f64>,
}

fn check_sheaf(sheaf: &DirectedSheaf, g: &DirectedGraph) -> Result<()> {
    if sheaf.num_nodes() != g.num_nodes() {
        return shape_err(format!(
            "sheaf has {} nodes, graph has {}",
            sheaf.num_nodes(),
            g.num_nodes()
        ));
    }
    Ok(())
}

/// `dst ← alpha · aᵀ b` for `d × d` row-major blocks.
fn at_b(a: &[f64], b: &[f64], d: usize, alpha: f64, dst: &mut [f64]) {
    for r in 0..d {
        for c in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[k * d + r] * b[k * d + c];
            }
            dst[r * d + c] = alpha * s;
        }
    }
}

impl BlockOperator {
    /// Assembles an operator over the arcs of `g`. `offdiag` holds one
    /// `d × d` block per arc, in arc order.
    pub fn from_blocks(
        g: &DirectedGraph,
        dim: usize,
        diag: Vec<DiagBlock>,
        offdiag: Vec<f64>,
    ) -> Result<Self> {
        if diag.len() != g.num_nodes() {
            return shape_err(format!("{} diagonal blocks for {} nodes", diag.len(), g.num_nodes()));
        }
        if offdiag.len() != g.num_arcs() * dim * dim {
            return shape_err(format!(
                "{} off-diagonal values for {} arcs of {dim}x{dim} blocks",
                offdiag.len(),
                g.num_arcs()
            ));
        }
        for (i, b) in diag.iter().enumerate() {
            if let DiagBlock::Dense(v) = b {
                if v.len() != dim * dim {
                    return shape_err(format!("diagonal block {i} has {} values", v.len()));
                }
            }
        }
        Ok(Self::assemble(g, dim, OperatorKind::Custom, diag, offdiag))
    }

    fn assemble(
        g: &DirectedGraph,
        dim: usize,
        kind: OperatorKind,
        diag: Vec<DiagBlock>,
        blocks: Vec<f64>,
    ) -> Self {
        let n = g.num_nodes();
        let mut row_offsets = Vec::with_capacity(n + 1);
        row_offsets.push(0);
        for i in 0..n {
            row_offsets.push(g.out_arcs(i).end);
        }
        Self {
            num_nodes: n,
            dim,
            kind,
            normalized: false,
            diag,
            row_offsets,
            cols: g.arcs().iter().map(|&(_, t)| t).collect(),
            blocks,
        }
    }

    /// `−Tᵢᵀ Sⱼ` for every arc `i → j`; shared by both directed Laplacians.
    fn directed_offdiag(sheaf: &DirectedSheaf, g: &DirectedGraph) -> Vec<f64> {
        let d = sheaf.dimension();
        let mut blocks = vec![0.0; g.num_arcs() * d * d];
        for (e, &(i, j)) in g.arcs().iter().enumerate() {
            let t = sheaf.target(i);
            let s = sheaf.source(j);
            at_b(
                &t.orthogonal.data,
                &s.orthogonal.data,
                d,
                -(t.scale * s.scale),
                &mut blocks[e * d * d..(e + 1) * d * d],
            );
        }
        blocks
    }

    /// Out-degree sheaf Laplacian: diagonal `|N(i)|·SᵢᵀSᵢ`, off-diagonal `−TᵢᵀSⱼ`.
    pub fn build_out(sheaf: &DirectedSheaf, g: &DirectedGraph) -> Result<Self> {
        check_sheaf(sheaf, g)?;
        let diag = (0..g.num_nodes())
            .map(|i| {
                let c = sheaf.source(i).scale;
                DiagBlock::Scalar(g.degree(i) as f64 * c * c)
            })
            .collect();
        let blocks = Self::directed_offdiag(sheaf, g);
        Ok(Self::assemble(g, sheaf.dimension(), OperatorKind::Out, diag, blocks))
    }

    /// Transposed in-degree sheaf Laplacian: diagonal `|N(i)|·TᵢᵀTᵢ`,
    /// off-diagonal `−TᵢᵀSⱼ`.
    pub fn build_in_transpose(sheaf: &DirectedSheaf, g: &DirectedGraph) -> Result<Self> {
        check_sheaf(sheaf, g)?;
        let diag = (0..g.num_nodes())
            .map(|i| {
                let c = sheaf.target(i).scale;
                DiagBlock::Scalar(g.degree(i) as f64 * c * c)
            })
            .collect();
        let blocks = Self::directed_offdiag(sheaf, g);
        Ok(Self::assemble(
            g,
            sheaf.dimension(),
            OperatorKind::InTranspose,
            diag,
            blocks,
        ))
    }

    /// Undirected flat-bundle Laplacian: diagonal `|N(i)|·I`, off-diagonal `−OᵢᵀOⱼ`.
    pub fn build_undirected_flat(maps: &[Tensor], g: &DirectedGraph) -> Result<Self> {
        if maps.len() != g.num_nodes() {
            return shape_err(format!("{} maps for {} nodes", maps.len(), g.num_nodes()));
        }
        let d = maps.first().map_or(1, |m| m.rows);
        for (i, m) in maps.iter().enumerate() {
            if m.rows != d || m.cols != d {
                return shape_err(format!("map {i} is {}x{}, expected {d}x{d}", m.rows, m.cols));
            }
        }
        let diag = (0..g.num_nodes())
            .map(|i| DiagBlock::Scalar(g.degree(i) as f64))
            .collect();
        let mut blocks = vec![0.0; g.num_arcs() * d * d];
        for (e, &(i, j)) in g.arcs().iter().enumerate() {
            at_b(&maps[i].data, &maps[j].data, d, -1.0, &mut blocks[e * d * d..(e + 1) * d * d]);
        }
        Ok(Self::assemble(g, d, OperatorKind::Flat, diag, blocks))
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn diag_block(&self, i: usize) -> &DiagBlock {
        &self.diag[i]
    }

    /// Dense copy of diagonal block `i`.
    pub fn diag_dense(&self, i: usize) -> Vec<f64> {
        match &self.diag[i] {
            DiagBlock::Scalar(s) => {
                let d = self.dim;
                let mut v = vec![0.0; d * d];
                for k in 0..d {
                    v[k * d + k] = *s;
                }
                v
            }
            DiagBlock::Dense(v) => v.clone(),
        }
    }

    /// Off-diagonal block `(i, j)`, if the arc `i → j` exists.
    pub fn offdiag_block(&self, i: usize, j: usize) -> Option<&[f64]> {
        let row = &self.cols[self.row_offsets[i]..self.row_offsets[i + 1]];
        let pos = row.binary_search(&j).ok()?;
        let e = self.row_offsets[i] + pos;
        let dd = self.dim * self.dim;
        Some(&self.blocks[e * dd..(e + 1) * dd])
    }

    /// All off-diagonal blocks in arc order.
    pub fn offdiag_values(&self) -> &[f64] {
        &self.blocks
    }

    /// `D^{-1/2} L D^{-1/2}` with `D` the block diagonal of `self`; zero
    /// diagonal entries are pseudo-inverted to zero.
    pub fn normalize(&self) -> Result<Self> {
        self.rescale(0.0)
    }

    /// `(D + I)^{-1/2} L (D + I)^{-1/2}`.
    pub fn normalize_augmented(&self) -> Result<Self> {
        self.rescale(1.0)
    }

    fn rescale(&self, shift: f64) -> Result<Self> {
        let d = self.dim;
        let mut diag_scalar = Vec::with_capacity(self.num_nodes);
        let mut inv_sqrt = Vec::with_capacity(self.num_nodes);
        for (node, block) in self.diag.iter().enumerate() {
            let s = match block {
                DiagBlock::Scalar(s) => *s,
                DiagBlock::Dense(v) => {
                    let s = (0..d).map(|k| v[k * d + k]).sum::<f64>() / d as f64;
                    let mut deviation: f64 = 0.0;
                    for r in 0..d {
                        for c in 0..d {
                            let expect = if r == c { s } else { 0.0 };
                            deviation = deviation.max((v[r * d + c] - expect).abs());
                        }
                    }
                    if deviation > CONFORMAL_DIAG_TOL {
                        return Err(Error::NonConformal { node, deviation });
                    }
                    s
                }
            };
            let shifted = s + shift;
            inv_sqrt.push(if shifted > 0.0 { 1.0 / shifted.sqrt() } else { 0.0 });
            diag_scalar.push(s);
        }

        let diag = inv_sqrt
            .iter()
            .zip(&diag_scalar)
            .map(|(&w, &s)| {
                DiagBlock::Scalar(if shift == 0.0 {
                    if w > 0.0 { 1.0 } else { 0.0 }
                } else {
                    s * w * w
                })
            })
            .collect();
        let dd = d * d;
        let mut blocks = self.blocks.clone();
        for i in 0..self.num_nodes {
            for e in self.row_offsets[i]..self.row_offsets[i + 1] {
                let w = inv_sqrt[i] * inv_sqrt[self.cols[e]];
                for x in &mut blocks[e * dd..(e + 1) * dd] {
                    *x *= w;
                }
            }
        }
        Ok(Self {
            diag,
            blocks,
            normalized: true,
            ..self.clone()
        })
    }

    fn check_features(&self, x: &FeatureMatrix) -> Result<()> {
        if x.num_nodes() != self.num_nodes || x.stalk_dim() != self.dim {
            return shape_err(format!(
                "operator over {} nodes with d={} applied to features with {} nodes, d={}",
                self.num_nodes,
                self.dim,
                x.num_nodes(),
                x.stalk_dim()
            ));
        }
        Ok(())
    }

    /// Block-sparse product `L·X`. Rows are accumulated in a fixed order
    /// (diagonal first, then arcs ascending), so results are reproducible
    /// bit for bit.
    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check_features(x)?;
        let d = self.dim;
        let h = x.channels();
        let dd = d * d;
        let mut out = FeatureMatrix::zeros(self.num_nodes, d, h);
        for i in 0..self.num_nodes {
            let dst = out.block_mut(i);
            let xi = x.block(i);
            match &self.diag[i] {
                DiagBlock::Scalar(s) => {
                    for (o, v) in dst.iter_mut().zip(xi) {
                        *o = s * v;
                    }
                }
                DiagBlock::Dense(m) => block_matmul_acc(m, xi, d, h, dst),
            }
            for e in self.row_offsets[i]..self.row_offsets[i + 1] {
                block_matmul_acc(&self.blocks[e * dd..(e + 1) * dd], x.block(self.cols[e]), d, h, dst);
            }
        }
        Ok(out)
    }

    /// Dense `(n·d) × (n·d)` matrix.
    pub fn to_dense(&self) -> Tensor {
        let d = self.dim;
        let nd = self.num_nodes * d;
        let mut out = Tensor::zeros(nd, nd);
        let mut put = |i: usize, j: usize, block: &[f64]| {
            for r in 0..d {
                for c in 0..d {
                    out.set(i * d + r, j * d + c, block[r * d + c]);
                }
            }
        };
        for i in 0..self.num_nodes {
            put(i, i, &self.diag_dense(i));
            for e in self.row_offsets[i]..self.row_offsets[i + 1] {
                put(i, self.cols[e], &self.blocks[e * d * d..(e + 1) * d * d]);
            }
        }
        out
    }
}

/// `dst += m·x` with `m` a `d × d` block and `x` a `d × h` block.
#[inline]
fn block_matmul_acc(m: &[f64], x: &[f64], d: usize, h: usize, dst: &mut [f64]) {
    for r in 0..d {
        let out_row = &mut dst[r * h..(r + 1) * h];
        for k in 0..d {
            let a = m[r * d + k];
            if a == 0.0 {
                continue;
            }
            for (o, v) in out_row.iter_mut().zip(&x[k * h..(k + 1) * h]) {
                *o += a * v;
            }
        }
    }
}

/// `in_t · (out · X)` without forming the product operator.
pub fn compose_apply(
    in_t: &BlockOperator,
    out: &BlockOperator,
    x: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    if in_t.num_nodes != out.num_nodes || in_t.dim != out.dim {
        return shape_err("composed operators disagree on node count or stalk dimension");
    }
    in_t.apply(&out.apply(x)?)
}

/// JSON form of a dense operator, as emitted by `laplacian dump`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseDump {
    pub which: String,
    pub num_nodes: usize,
    pub stalk_dim: usize,
    pub normalized: bool,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub data: Vec<Vec<f64>>,
}

impl DenseDump {
    pub fn from_dense(which: &str, num_nodes: usize, stalk_dim: usize, normalized: bool, m: &Tensor) -> Self {
        Self {
            which: which.to_string(),
            num_nodes,
            stalk_dim,
            normalized,
            rows: m.rows,
            cols: m.cols,
            data: (0..m.rows).map(|r| m.row(r).to_vec()).collect(),
        }
    }

    pub fn from_operator(which: &str, op: &BlockOperator) -> Self {
        Self::from_dense(which, op.num_nodes, op.dim, op.normalized, &op.to_dense())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sheaf::{ConformalMap, DirectedSheaf};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(n: usize, d: usize, h: usize, rng: &mut impl Rng) -> FeatureMatrix {
        let t = Tensor::from_vec(n * d, h, (0..n * d * h).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        FeatureMatrix::from_tensor(t, n, d).unwrap()
    }

    fn dense_apply(m: &Tensor, x: &FeatureMatrix) -> Tensor {
        m.matmul(x.as_tensor()).unwrap()
    }

    #[test]
    fn trivial_sheaf_single_edge() {
        let g = DirectedGraph::path(2);
        let sheaf = DirectedSheaf::constant(2, 1);
        let out = BlockOperator::build_out(&sheaf, &g).unwrap().to_dense();
        assert_eq!(out.data, vec![1.0, -1.0, -1.0, 1.0]);
        let in_t = BlockOperator::build_in_transpose(&sheaf, &g).unwrap().to_dense();
        assert_eq!(in_t, out);
    }

    #[test]
    fn zero_target_clears_row_offdiagonals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = DirectedGraph::cycle(4);
        let mut sheaf = DirectedSheaf::random(4, 2, &mut rng);
        sheaf.freeze_target(0);
        let out = BlockOperator::build_out(&sheaf, &g).unwrap();
        for j in g.neighbors(0) {
            assert!(out.offdiag_block(0, j).unwrap().iter().all(|&x| x == 0.0));
        }
        let c = sheaf.source(0).scale;
        assert_eq!(out.diag_block(0), &DiagBlock::Scalar(2.0 * c * c));
    }

    #[test]
    fn zero_source_clears_column_of_in_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = DirectedGraph::cycle(5);
        let mut sheaf = DirectedSheaf::random(5, 2, &mut rng);
        sheaf.freeze_source(3);
        let in_t = BlockOperator::build_in_transpose(&sheaf, &g).unwrap();
        for i in g.neighbors(3) {
            assert!(in_t.offdiag_block(i, 3).unwrap().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn normalize_two_regular_trivial() {
        let g = DirectedGraph::cycle(5);
        let op = BlockOperator::build_out(&DirectedSheaf::constant(5, 1), &g)
            .unwrap()
            .normalize()
            .unwrap()
            .to_dense();
        for i in 0..5 {
            for j in 0..5 {
                let a = if g.has_arc(i, j) { 1.0 } else { 0.0 };
                let expect = if i == j { 1.0 } else { -a / 2.0 };
                assert!((op.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn normalize_keeps_frozen_rows_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = DirectedGraph::cycle(4);
        let mut sheaf = DirectedSheaf::random(4, 2, &mut rng);
        sheaf.freeze_source(1);
        let dense = BlockOperator::build_out(&sheaf, &g).unwrap().normalize().unwrap().to_dense();
        for c in 0..8 {
            assert_eq!(dense.get(2, c), 0.0);
            assert_eq!(dense.get(3, c), 0.0);
            assert_eq!(dense.get(c, 2), 0.0);
            assert_eq!(dense.get(c, 3), 0.0);
        }
    }

    #[test]
    fn normalize_rejects_non_conformal_diagonal() {
        let g = DirectedGraph::path(2);
        let op = BlockOperator::from_blocks(
            &g,
            2,
            vec![DiagBlock::Dense(vec![1.0, 0.5, 0.0, 1.0]), DiagBlock::Scalar(1.0)],
            vec![0.0; 8],
        )
        .unwrap();
        assert!(matches!(op.normalize(), Err(Error::NonConformal { node: 0, .. })));
    }

    #[test]
    fn apply_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = DirectedGraph::cycle(6);
        let x = random_features(6, 3, 4, &mut rng);

        let zero = BlockOperator::build_out(&DirectedSheaf::zeros(6, 3), &g).unwrap();
        assert!(zero.apply(&x).unwrap().as_tensor().data.iter().all(|&v| v == 0.0));

        let empty = DirectedGraph::from_undirected_edges(&[], 6).unwrap();
        let id = BlockOperator::from_blocks(&empty, 3, vec![DiagBlock::Scalar(1.0); 6], vec![])
            .unwrap();
        assert_eq!(id.apply(&x).unwrap(), x);

        let op = BlockOperator::build_out(&DirectedSheaf::random(6, 3, &mut rng), &g).unwrap();
        let fast = op.apply(&x).unwrap();
        assert!(fast.as_tensor().max_abs_diff(&dense_apply(&op.to_dense(), &x)) < 1e-12);
    }

    #[test]
    fn apply_rejects_shape_mismatch() {
        let g = DirectedGraph::path(3);
        let op = BlockOperator::build_out(&DirectedSheaf::constant(3, 2), &g).unwrap();
        assert!(op.apply(&FeatureMatrix::zeros(3, 1, 2)).is_err());
        assert!(op.apply(&FeatureMatrix::zeros(4, 2, 2)).is_err());
        assert!(BlockOperator::build_out(&DirectedSheaf::constant(2, 2), &g).is_err());
    }

    #[test]
    fn flat_with_identity_maps_is_graph_laplacian() {
        let g = DirectedGraph::cycle(4);
        let maps = vec![Tensor::identity(1); 4];
        let dense = BlockOperator::build_undirected_flat(&maps, &g).unwrap().to_dense();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j {
                    2.0
                } else if g.has_arc(i, j) {
                    -1.0
                } else {
                    0.0
                };
                assert_eq!(dense.get(i, j), expect);
            }
        }
    }

    #[test]
    fn compose_with_zero_target_at_i() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = DirectedGraph::cycle(5);
        let mut sheaf = DirectedSheaf::random(5, 2, &mut rng);
        sheaf.set_target(2, ConformalMap::zero(2));
        let x = random_features(5, 2, 3, &mut rng);
        let y = compose_apply(
            &BlockOperator::build_in_transpose(&sheaf, &g).unwrap(),
            &BlockOperator::build_out(&sheaf, &g).unwrap(),
            &x,
        )
        .unwrap();
        assert!(y.block(2).iter().all(|&v| v == 0.0));
    }
}
