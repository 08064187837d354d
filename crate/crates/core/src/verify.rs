//! Executable checks of the gating guarantees of conformal directed sheaves:
//! zero maps silence listening or broadcasting, diffusion has a bounded
//! receptive field, and scheduled maps relay a signal along a path while
//! every intermediate is ignored.
//!
//! Sensitivity is measured with exact Jacobian rows from the tape, so
//! structural zeros come out as exact zeros and [`SENSITIVITY_TOL`] only has
//! to separate them from round-off.

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::datasets::gen_relay_path;
use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::laplacian::{compose_apply, BlockOperator};
use crate::model::{
    diffusion_term, Activation, FrozenMaps, ForwardOptions, GraphContext, LayerMaps, MapPredictor, Mode,
    Model, ModelConfig, Normalization,
};
use crate::sheaf::{random_orthogonal, DirectedSheaf};
use crate::tensor::{FeatureMatrix, Tensor};
use crate::training::finite_diff_grad;

/// Below this a Jacobian entry or output change counts as a structural zero.
pub const SENSITIVITY_TOL: f64 = 1e-12;
/// Random perturbations of each neighbor's features in [`check_prop1`].
pub const PERTURBATIONS: usize = 20;
/// Agreement with dense oracles built from accumulated products.
pub const ORACLE_TOL: f64 = 1e-10;
/// Largest relative error accepted between backward and finite differences.
pub const GRADIENT_TOL: f64 = 1e-5;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Operators `((Δ^in)ᵀ, Δ^out)` in the requested normalization.
pub fn diffusion_operators(
    sheaf: &DirectedSheaf,
    g: &DirectedGraph,
    norm: Normalization,
) -> Result<(BlockOperator, BlockOperator)> {
    let out = BlockOperator::build_out(sheaf, g)?;
    let in_t = BlockOperator::build_in_transpose(sheaf, g)?;
    Ok(match norm {
        Normalization::None => (in_t, out),
        Normalization::Symmetric => (in_t.normalize()?, out.normalize()?),
        Normalization::Augmented => (in_t.normalize_augmented()?, out.normalize_augmented()?),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct NeighborSensitivity {
    pub node: usize,
    /// Largest change of node `i`'s output over all perturbations of this neighbor.
    pub max_change: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GatingReport {
    pub node: usize,
    pub listen_gated: bool,
    pub ignored_neighbors: Vec<usize>,
    /// Largest entry of node `i`'s output block.
    pub output_max_abs: f64,
    pub neighbors: Vec<NeighborSensitivity>,
}

/// Measures whether node `i` listens at all, and which neighbors it ignores,
/// by perturbing each neighbor's block [`PERTURBATIONS`] times.
pub fn check_prop1(
    g: &DirectedGraph,
    sheaf: &DirectedSheaf,
    x: &FeatureMatrix,
    node: usize,
    norm: Normalization,
    rng: &mut impl Rng,
) -> Result<GatingReport> {
    if node >= g.num_nodes() {
        return Err(Error::NodeOutOfRange {
            index: node,
            num_nodes: g.num_nodes(),
        });
    }
    let (in_t, out) = diffusion_operators(sheaf, g, norm)?;
    let base = compose_apply(&in_t, &out, x)?;
    let base_i = base.block(node).to_vec();
    let output_max_abs = base_i.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut neighbors = Vec::new();
    for k in g.neighbors(node) {
        let mut max_change = 0.0f64;
        for _ in 0..PERTURBATIONS {
            let mut xp = x.clone();
            for v in xp.block_mut(k) {
                *v += rng.gen_range(-1.0..1.0);
            }
            let yp = compose_apply(&in_t, &out, &xp)?;
            for (a, b) in yp.block(node).iter().zip(&base_i) {
                max_change = max_change.max((a - b).abs());
            }
        }
        neighbors.push(NeighborSensitivity { node: k, max_change });
    }
    Ok(GatingReport {
        node,
        listen_gated: output_max_abs <= SENSITIVITY_TOL,
        ignored_neighbors: neighbors
            .iter()
            .filter(|s| s.max_change <= SENSITIVITY_TOL)
            .map(|s| s.node)
            .collect(),
        output_max_abs,
        neighbors,
    })
}

/// Nodes `j` with `max |∂ logits_i / ∂ x_j| > threshold`, from exact
/// Jacobian rows. `options` can freeze maps, e.g. to isolate every node.
pub fn receptive_field(
    model: &Model,
    ctx: &GraphContext,
    features: &Tensor,
    node: usize,
    threshold: f64,
    options: &ForwardOptions,
) -> Result<Vec<usize>> {
    if threshold < 0.0 {
        return Err(Error::Config(format!("threshold must be non-negative, got {threshold}")));
    }
    if node >= ctx.num_nodes() {
        return Err(Error::NodeOutOfRange {
            index: node,
            num_nodes: ctx.num_nodes(),
        });
    }
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, ctx, features, Mode::Eval, options)?;
    let (n, classes) = tape.shape(out.logits);
    let mut sensitivity = vec![0.0f64; n];
    for c in 0..classes {
        let mut seed = Tensor::zeros(n, classes);
        seed.set(node, c, 1.0);
        let grads = tape.backward_with_seed(out.logits, seed)?;
        let jac = grads.get_or_zeros(out.input, features.rows, features.cols);
        for (j, s) in sensitivity.iter_mut().enumerate() {
            *s = jac.row(j).iter().fold(*s, |m, v| m.max(v.abs()));
        }
    }
    Ok((0..n).filter(|&j| sensitivity[j] > threshold).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct RelayReport {
    pub t: usize,
    pub d: usize,
    pub target_sensitive: bool,
    pub intermediates_ignored: bool,
    /// `‖∂x_endpoint / ∂x_far‖_F / √d` as measured on the tape.
    pub constant: f64,
    /// The same quantity from the dense product of per-layer matrices.
    pub oracle_constant: f64,
    /// Product over hops of `deg(receiver) + deg(sender)`.
    pub degree_product: f64,
    /// Largest Jacobian entry towards any intermediate node.
    pub max_intermediate: f64,
    /// Largest entrywise gap between the measured and dense Jacobian rows.
    pub oracle_gap: f64,
}

impl RelayReport {
    pub fn passed(&self) -> bool {
        self.target_sensitive
            && self.intermediates_ignored
            && self.oracle_gap <= ORACLE_TOL
            && (self.constant - self.oracle_constant).abs() <= ORACLE_TOL
    }
}

/// Residual factor `1 + ε` per node: `0` on the receiver, `1` elsewhere.
fn relay_residual(n: usize, receiver: usize) -> Tensor {
    let mut r = Tensor::filled(n, 1, 1.0);
    r.data[receiver] = 0.0;
    r
}

/// Dense `(L^in)ᵀ` and `L^out`, assembled entry by entry from the maps.
pub fn dense_laplacians(sheaf: &DirectedSheaf, g: &DirectedGraph) -> (Tensor, Tensor) {
    let (n, d) = (g.num_nodes(), sheaf.dimension());
    let mut in_t = Tensor::zeros(n * d, n * d);
    let mut out = Tensor::zeros(n * d, n * d);
    let put = |m: &mut Tensor, bi: usize, bj: usize, block: &Tensor, alpha: f64| {
        for r in 0..d {
            for c in 0..d {
                let v = m.get(bi * d + r, bj * d + c) + alpha * block.get(r, c);
                m.set(bi * d + r, bj * d + c, v);
            }
        }
    };
    for i in 0..n {
        let s = sheaf.source(i).matrix();
        let t = sheaf.target(i).matrix();
        let deg = g.degree(i) as f64;
        put(&mut out, i, i, &s.transpose().matmul(&s).expect("d×d"), deg);
        put(&mut in_t, i, i, &t.transpose().matmul(&t).expect("d×d"), deg);
        for j in g.neighbors(i) {
            let tij = t.transpose().matmul(&sheaf.source(j).matrix()).expect("d×d");
            put(&mut out, i, j, &tij, -1.0);
            put(&mut in_t, i, j, &tij, -1.0);
        }
    }
    (in_t, out)
}

/// Runs the scheduled relay for `t` layers on a path with identity
/// activation and `W = I`, using the raw Laplacians.
pub fn check_relay(t: usize, d: usize, seed: u64) -> Result<RelayReport> {
    if t < 2 {
        return Err(Error::Config(format!("relay needs t ≥ 2, got {t}")));
    }
    let schedule = gen_relay_path(t, d, seed)?;
    let g = &schedule.graph;
    let n = g.num_nodes();
    let ctx = GraphContext::new(g);

    let mut tape = Tape::new();
    let mut x0 = Tensor::zeros(n, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in &mut x0.data {
        *v = rng.gen_range(-1.0..1.0);
    }
    let input = tape.leaf(x0);
    let mut x = input;
    for (l, sheaf) in schedule.layers.iter().enumerate() {
        let maps = LayerMaps::from_sheaf(&mut tape, sheaf);
        let diff = diffusion_term(&mut tape, &ctx, x, &maps, d, Normalization::None)?;
        let keep = tape.constant(relay_residual(n, schedule.receiver(l)));
        let kept = tape.mul_rows(x, keep)?;
        x = tape.sub(kept, diff)?;
    }
    // measured Jacobian rows of the endpoint block, d × (n·d)
    let mut measured = Tensor::zeros(d, n * d);
    for r in 0..d {
        let mut seed_t = Tensor::zeros(n, d);
        seed_t.set(schedule.endpoint, r, 1.0);
        let grads = tape.backward_with_seed(x, seed_t)?;
        let jac = grads.get_or_zeros(input, n, d);
        measured.row_mut(r).copy_from_slice(&jac.data);
    }

    let mut product = Tensor::identity(n * d);
    for (l, sheaf) in schedule.layers.iter().enumerate() {
        let (in_t, out) = dense_laplacians(sheaf, g);
        let mut layer = in_t.matmul(&out)?.scale(-1.0);
        let keep = relay_residual(n, schedule.receiver(l));
        for i in 0..n {
            for r in 0..d {
                let k = i * d + r;
                layer.set(k, k, layer.get(k, k) + keep.data[i]);
            }
        }
        product = layer.matmul(&product)?;
    }
    let mut oracle = Tensor::zeros(d, n * d);
    for r in 0..d {
        oracle
            .row_mut(r)
            .copy_from_slice(product.row(schedule.endpoint * d + r));
    }

    let block_norm = |m: &Tensor, node: usize| {
        let mut s = 0.0;
        for r in 0..d {
            for c in 0..d {
                s += m.get(r, node * d + c).powi(2);
            }
        }
        s.sqrt() / (d as f64).sqrt()
    };
    let mut max_intermediate = 0.0f64;
    for v in (0..n).filter(|&v| v != schedule.far && v != schedule.endpoint) {
        for r in 0..d {
            for c in 0..d {
                max_intermediate = max_intermediate.max(measured.get(r, v * d + c).abs());
            }
        }
    }
    let degree_product = (0..t)
        .map(|l| (g.degree(schedule.receiver(l)) + g.degree(schedule.sender(l))) as f64)
        .product();
    let constant = block_norm(&measured, schedule.far);
    Ok(RelayReport {
        t,
        d,
        target_sensitive: constant > SENSITIVITY_TOL,
        intermediates_ignored: max_intermediate <= SENSITIVITY_TOL,
        constant,
        oracle_constant: block_norm(&oracle, schedule.far),
        degree_product,
        max_intermediate,
        oracle_gap: measured.max_abs_diff(&oracle),
    })
}

/// Connected random graph: a random spanning tree plus extra edges.
pub fn random_connected_graph(n: usize, extra_edge_prob: f64, rng: &mut impl Rng) -> DirectedGraph {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.gen_range(0..v), v));
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(extra_edge_prob) && !edges.contains(&(i, j)) {
                edges.push((i, j));
            }
        }
    }
    DirectedGraph::from_undirected_edges(&edges, n).expect("valid edges")
}

/// Tree in which every node above `depth` has one or two children.
pub fn random_tree(depth: usize, rng: &mut impl Rng) -> DirectedGraph {
    let mut edges = Vec::new();
    let mut frontier = vec![0usize];
    let mut n = 1;
    for _ in 0..depth {
        let mut next = Vec::new();
        for &p in &frontier {
            for _ in 0..rng.gen_range(1..=2) {
                edges.push((p, n));
                next.push(n);
                n += 1;
            }
        }
        frontier = next;
    }
    DirectedGraph::from_undirected_edges(&edges, n).expect("valid edges")
}

fn random_features(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in &mut t.data {
        *v = rng.gen_range(-1.0..1.0);
    }
    t
}

/// Outcome of one property harness.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: Vec<String>,
    /// Largest quantity that was required to be (near) zero.
    pub max_residual: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    pub details: serde_json::Map<String, serde_json::Value>,
}

impl SuiteResult {
    fn new(name: &str) -> Self {
        SuiteResult {
            name: name.to_string(),
            passed: false,
            cases: 0,
            failures: Vec::new(),
            max_residual: 0.0,
            seconds: 0.0,
            details: serde_json::Map::new(),
        }
    }

    fn fail(&mut self, msg: String) {
        if self.failures.len() < 20 {
            self.failures.push(msg);
        }
    }

    fn finish(mut self, start: Instant) -> Self {
        self.passed = self.failures.is_empty();
        self.seconds = start.elapsed().as_secs_f64();
        self
    }
}

/// Random graphs and sheaves with randomly frozen maps. For each case a node
/// `i` is checked under raw, symmetric and augmented operators: a frozen
/// `Tᵢ` must silence `i`, every neighbor with frozen `S_k` must be ignored,
/// and in the raw operator every other neighbor must be heard.
pub fn prop1_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut res = SuiteResult::new("prop1_gating");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gated_cases = 0;
    let mut ignored_checks = 0;
    for case in 0..cases {
        let n = rng.gen_range(3..=20);
        let d = rng.gen_range(1..=3);
        let h = rng.gen_range(1..=3);
        let g = random_connected_graph(n, 0.15, &mut rng);
        let mut sheaf = DirectedSheaf::random(n, d, &mut rng);
        for v in 0..n {
            if rng.gen_bool(0.25) {
                sheaf.freeze_source(v);
            }
            if rng.gen_bool(0.25) {
                sheaf.freeze_target(v);
            }
        }
        let i = rng.gen_range(0..n);
        if rng.gen_bool(0.5) {
            sheaf.freeze_target(i);
        }
        let x = FeatureMatrix::from_tensor(random_features(n * d, h, &mut rng), n, d)?;
        let t_frozen = sheaf.target(i).scale == 0.0;
        gated_cases += t_frozen as usize;

        for norm in [Normalization::None, Normalization::Symmetric, Normalization::Augmented] {
            let rep = check_prop1(&g, &sheaf, &x, i, norm, &mut rng)?;
            res.cases += 1;
            if t_frozen {
                res.max_residual = res.max_residual.max(rep.output_max_abs);
                if !rep.listen_gated {
                    res.fail(format!("case {case} {norm:?}: node {i} has T=0 but output {:e}", rep.output_max_abs));
                }
            }
            for s in &rep.neighbors {
                let s_frozen = sheaf.source(s.node).scale == 0.0;
                if s_frozen || t_frozen {
                    ignored_checks += 1;
                    res.max_residual = res.max_residual.max(s.max_change);
                    if s.max_change > SENSITIVITY_TOL {
                        res.fail(format!(
                            "case {case} {norm:?}: node {i} hears neighbor {} ({:e}) though it should not",
                            s.node, s.max_change
                        ));
                    }
                } else if norm == Normalization::None && s.max_change <= SENSITIVITY_TOL {
                    res.fail(format!(
                        "case {case}: node {i} ignores open neighbor {} under the raw operator",
                        s.node
                    ));
                }
            }
        }
    }
    res.details.insert("listen_gated_cases".into(), gated_cases.into());
    res.details.insert("ignored_neighbor_checks".into(), ignored_checks.into());
    Ok(res.finish(start))
}

fn small_csnn_config(input_dim: usize, layers: usize) -> ModelConfig {
    let mut c = ModelConfig::new(input_dim, 2);
    c.stalk_dim = 2;
    c.hidden_channels = 3;
    c.num_layers = layers;
    c.predictor_hidden = 4;
    c.activation = Activation::Identity;
    c.map_predictor = MapPredictor::Mlp2;
    c
}

/// Receptive fields on random depth-6 trees stay inside the `2t`-hop ball
/// for `t ∈ {1, 2}`. Also checks that with `t = 1` the root of the
/// first tree hears a node two hops away, and that freezing every map shrinks
/// the field to the node itself.
pub fn prop2_suite(seed: u64, trees: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut res = SuiteResult::new("prop2_receptive_field");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut two_hop_seen = false;
    for tree in 0..trees {
        let g = random_tree(6, &mut rng);
        let n = g.num_nodes();
        let ctx = GraphContext::new(&g);
        let features = random_features(n, 3, &mut rng);
        for t in [1usize, 2] {
            let model = Model::init(small_csnn_config(3, t), &mut rng)?;
            let nodes: Vec<usize> = (0..6).map(|_| rng.gen_range(0..n)).chain([0]).collect();
            for &i in &nodes {
                let field = receptive_field(&model, &ctx, &features, i, SENSITIVITY_TOL, &ForwardOptions::default())?;
                let dist = g.bfs_distances(i)?;
                res.cases += 1;
                for &j in &field {
                    if dist[j] > 2 * t {
                        violations += 1;
                        res.fail(format!("tree {tree}, t={t}: node {i} hears node {j} at distance {}", dist[j]));
                    }
                }
                if tree == 0 && t == 1 && i == 0 {
                    two_hop_seen = field.iter().any(|&j| dist[j] == 2);
                }
            }
            if tree == 0 {
                let frozen = FrozenMaps {
                    source: (0..n).collect(),
                    target: (0..n).collect(),
                };
                let options = ForwardOptions {
                    frozen: vec![frozen; t],
                };
                let field = receptive_field(&model, &ctx, &features, 0, SENSITIVITY_TOL, &options)?;
                if field != [0] {
                    res.fail(format!("t={t}: isolated root hears {field:?}"));
                }
            }
        }
    }
    if !two_hop_seen {
        res.fail("root of the first tree does not hear any 2-hop node at t=1".into());
    }
    res.details.insert("violations".into(), violations.into());
    res.details.insert("two_hop_sensitive".into(), two_hop_seen.into());
    Ok(res.finish(start))
}

/// The relay schedule for `t ∈ {2, 3, 4, 6}` and `d ∈ {1, 2}`.
pub fn relay_suite(seed: u64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut res = SuiteResult::new("prop3_relay");
    let mut reports = Vec::new();
    for t in [2usize, 3, 4, 6] {
        for d in [1usize, 2] {
            let rep = check_relay(t, d, seed.wrapping_add((t * 10 + d) as u64))?;
            res.cases += 1;
            res.max_residual = res.max_residual.max(rep.max_intermediate);
            if !rep.passed() {
                res.fail(format!("t={t}, d={d}: {rep:?}"));
            }
            reports.push(serde_json::to_value(&rep).expect("serializable"));
        }
    }
    res.details.insert("reports".into(), reports.into());
    Ok(res.finish(start))
}

/// Dense `D − A` of the doubled graph.
pub fn dense_graph_laplacian(g: &DirectedGraph) -> Tensor {
    let n = g.num_nodes();
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        m.set(i, i, g.degree(i) as f64);
        for j in g.neighbors(i) {
            m.set(i, j, -1.0);
        }
    }
    m
}

/// With `d = 1` and unit maps both operators equal `D − A` exactly, and the
/// composition equals the dense square.
pub fn trivial_sheaf_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut res = SuiteResult::new("trivial_sheaf_reduction");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(2..=50);
        let g = random_connected_graph(n, rng.gen_range(0.0..0.3), &mut rng);
        let sheaf = DirectedSheaf::constant(n, 1);
        let out = BlockOperator::build_out(&sheaf, &g)?.to_dense();
        let in_t = BlockOperator::build_in_transpose(&sheaf, &g)?.to_dense();
        let lap = dense_graph_laplacian(&g);
        res.cases += 1;
        if out != lap || in_t != lap {
            res.fail(format!("case {case}: operators differ from D − A"));
        }
        let h = rng.gen_range(1..=3);
        let x = random_features(n, h, &mut rng);
        let y = compose_apply(
            &BlockOperator::build_in_transpose(&sheaf, &g)?,
            &BlockOperator::build_out(&sheaf, &g)?,
            &FeatureMatrix::from_tensor(x.clone(), n, 1)?,
        )?;
        let expected = lap.matmul(&lap)?.matmul(&x)?;
        let gap = y.as_tensor().max_abs_diff(&expected);
        res.max_residual = res.max_residual.max(gap);
        if gap > ORACLE_TOL {
            res.fail(format!("case {case}: composition off by {gap:e}"));
        }
    }
    Ok(res.finish(start))
}

/// Off-diagonal blocks of `(L^in)ᵀ` and `L^out` coincide exactly, and the
/// normalized diagonal blocks are the identity wherever degree and scale are
/// nonzero.
pub fn block_structure_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut res = SuiteResult::new("block_structure");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(2..=20);
        let d = rng.gen_range(1..=4);
        let g = random_connected_graph(n, 0.2, &mut rng);
        let mut sheaf = DirectedSheaf::random(n, d, &mut rng);
        for v in 0..n {
            if rng.gen_bool(0.1) {
                sheaf.freeze_source(v);
            }
            if rng.gen_bool(0.1) {
                sheaf.freeze_target(v);
            }
        }
        let out = BlockOperator::build_out(&sheaf, &g)?;
        let in_t = BlockOperator::build_in_transpose(&sheaf, &g)?;
        res.cases += 1;
        if out.offdiag_values() != in_t.offdiag_values() {
            res.fail(format!("case {case}: off-diagonal blocks differ"));
        }
        let source_scales: Vec<f64> = (0..n).map(|v| sheaf.source(v).scale).collect();
        let target_scales: Vec<f64> = (0..n).map(|v| sheaf.target(v).scale).collect();
        for (op, scales) in [(out.normalize()?, source_scales), (in_t.normalize()?, target_scales)] {
            for v in (0..n).filter(|&v| g.degree(v) > 0 && scales[v] > 0.0) {
                let diag = op.diag_dense(v);
                let mut gap = 0.0f64;
                for r in 0..d {
                    for c in 0..d {
                        let want = if r == c { 1.0 } else { 0.0 };
                        gap = gap.max((diag[r * d + c] - want).abs());
                    }
                }
                res.max_residual = res.max_residual.max(gap);
                if gap > ORACLE_TOL {
                    res.fail(format!("case {case}: normalized diagonal of node {v} off by {gap:e}"));
                }
            }
        }
    }
    Ok(res.finish(start))
}

/// Largest change of `(L x)` at `at` when the block of `from` is perturbed.
fn flat_sensitivity(
    op: &BlockOperator,
    x: &FeatureMatrix,
    from: usize,
    at: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let base = op.apply(x)?;
    let mut worst = 0.0f64;
    for _ in 0..PERTURBATIONS {
        let mut xp = x.clone();
        for v in xp.block_mut(from) {
            *v += rng.gen_range(-1.0..1.0);
        }
        let y = op.apply(&xp)?;
        for (a, b) in y.block(at).iter().zip(base.block(at)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// In the undirected flat bundle, zeroing `O_i` stops `i` hearing its
/// neighbors and its neighbors hearing `i` at the same time. The directed
/// sheaf with only `Tᵢ = 0` silences the first direction and keeps the second.
pub fn undirected_contrast_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut res = SuiteResult::new("undirected_contrast");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(3..=12);
        let d = rng.gen_range(1..=3);
        let g = random_connected_graph(n, 0.2, &mut rng);
        let i = rng.gen_range(0..n);
        let mut maps: Vec<Tensor> = (0..n).map(|_| random_orthogonal(d, &mut rng)).collect();
        maps[i] = Tensor::zeros(d, d);
        let flat = BlockOperator::build_undirected_flat(&maps, &g)?;
        let x = FeatureMatrix::from_tensor(random_features(n * d, 2, &mut rng), n, d)?;

        let mut directed = DirectedSheaf::random(n, d, &mut rng);
        directed.freeze_target(i);
        let (in_t, out) = diffusion_operators(&directed, &g, Normalization::None)?;

        for k in g.neighbors(i).collect::<Vec<_>>() {
            res.cases += 1;
            let listen = flat_sensitivity(&flat, &x, k, i, &mut rng)?;
            let broadcast = flat_sensitivity(&flat, &x, i, k, &mut rng)?;
            res.max_residual = res.max_residual.max(listen).max(broadcast);
            if listen > SENSITIVITY_TOL || broadcast > SENSITIVITY_TOL {
                res.fail(format!(
                    "case {case}: O_{i}=0 leaves listen {listen:e} / broadcast {broadcast:e} towards {k}"
                ));
            }
            // directed contrast: i is deaf, yet k still hears i
            let base = compose_apply(&in_t, &out, &x)?;
            let mut xp = x.clone();
            for v in xp.block_mut(i) {
                *v += 1.0;
            }
            let moved = compose_apply(&in_t, &out, &xp)?;
            let heard = moved
                .block(k)
                .iter()
                .zip(base.block(k))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if heard <= SENSITIVITY_TOL {
                res.fail(format!("case {case}: directed T_{i}=0 also silenced broadcast to {k}"));
            }
        }
    }
    Ok(res.finish(start))
}

/// Entries below `1e-3` in magnitude are compared against `1e-3`, so
/// finite-difference round-off on near-zero entries does not dominate.
fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Backward against central differences over `d ∈ {1,2,3}`, `L ∈ {1,2}`,
/// both map predictors and both weight flags.
pub fn gradient_suite(seed: u64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut res = SuiteResult::new("gradient_check");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for d in 1..=3 {
        for layers in 1..=2 {
            for predictor in [MapPredictor::Mlp2, MapPredictor::MeanAgg(1)] {
                for (left, right) in [(true, true), (false, false), (true, false), (false, true)] {
                    let n = 7;
                    let g = random_connected_graph(n, 0.3, &mut rng);
                    let ctx = GraphContext::new(&g);
                    let features = random_features(n, 3, &mut rng);
                    let labels: Vec<usize> = (0..n).map(|v| v % 3).collect();
                    let mut c = ModelConfig::new(3, 3);
                    c.stalk_dim = d;
                    c.hidden_channels = 2;
                    c.num_layers = layers;
                    c.predictor_hidden = 3;
                    c.map_predictor = predictor;
                    c.left_weights = left;
                    c.right_weights = right;
                    let mut model = Model::init(c, &mut rng)?;
                    let nodes: Vec<usize> = (0..n).collect();
                    let (labels, nodes) = (Rc::new(labels), Rc::new(nodes));
                    let loss_of = |m: &Model, tape: &mut Tape| -> Result<Var> {
                        let out = m.forward(tape, &ctx, &features, Mode::Eval, &ForwardOptions::default())?;
                        tape.cross_entropy(out.logits, labels.clone(), nodes.clone())
                    };
                    let mut tape = Tape::new();
                    let loss = loss_of(&model, &mut tape)?;
                    let grads = tape.backward(loss)?;
                    model.params.zero_grad();
                    tape.accumulate_param_grads(&grads, &mut model.params);
                    let numeric = finite_diff_grad(
                        |store| {
                            let probe = Model {
                                config: model.config.clone(),
                                params: store.clone(),
                            };
                            let mut tape = Tape::new();
                            let loss = loss_of(&probe, &mut tape)?;
                            Ok(tape.value(loss).data[0])
                        },
                        &model.params,
                        FD_STEP,
                    )?;
                    res.cases += 1;
                    let mut case_worst = 0.0f64;
                    let mut grad_norm = 0.0f64;
                    for (id, num) in model.params.ids().zip(&numeric) {
                        for (a, b) in model.params.grad(id).data.iter().zip(&num.data) {
                            case_worst = case_worst.max(relative_error(*a, *b));
                            grad_norm = grad_norm.max(a.abs());
                        }
                    }
                    worst = worst.max(case_worst);
                    if grad_norm == 0.0 {
                        res.fail(format!("d={d} L={layers} {predictor:?}: all gradients are zero"));
                    }
                    if case_worst >= GRADIENT_TOL {
                        res.fail(format!(
                            "d={d} L={layers} {predictor:?} left={left} right={right}: relative error {case_worst:e}"
                        ));
                    }
                }
            }
        }
    }
    res.max_residual = worst;
    Ok(res.finish(start))
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

/// Every harness, as run by `verify props`.
pub fn run_all(seed: u64) -> Result<VerifyReport> {
    let suites = vec![
        prop1_suite(seed, 100)?,
        prop2_suite(seed, 4)?,
        relay_suite(seed)?,
        trivial_sheaf_suite(seed, 30)?,
        block_structure_suite(seed, 50)?,
        undirected_contrast_suite(seed, 20)?,
        gradient_suite(seed)?,
    ];
    Ok(VerifyReport {
        seed,
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}
