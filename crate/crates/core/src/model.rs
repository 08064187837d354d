//! Cooperative sheaf diffusion network and a GCN baseline, built on the tape.
//!
//! Each layer predicts a source and a target conformal map per node from the
//! current features, assembles the normalized out-degree and transposed
//! in-degree Laplacians implicitly as per-arc blocks, and applies
//!
//! ```text
//! X' = (1 + ε) ∘ X − σ(Δ_inᵀ Δ_out (I ⊗ W₁) X W₂)
//! ```
//!
//! Features live on the tape as `n × (d·h)` matrices; row `i` is node `i`'s
//! flattened `d × h` block.

use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CsrMatrix, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::params::ParameterStore;
use crate::sheaf::{ConformalMap, ConformalMapPair, DirectedSheaf};
use crate::tensor::{FeatureMatrix, Tensor};

/// softplus⁻¹(1): predicted scales start at one.
const UNIT_SCALE_BIAS: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn unary(self) -> Unary {
        match self {
            Activation::Gelu => Unary::Gelu,
            Activation::Identity => Unary::Identity,
            Activation::Relu => Unary::Relu,
            Activation::Tanh => Unary::Tanh,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Csnn,
    Gcn,
}

/// How restriction maps are predicted from node features: a two-layer MLP on
/// the node's own block, or `k` rounds of mean-neighbor aggregation first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum MapPredictor {
    #[default]
    Mlp2,
    MeanAgg(usize),
}

impl MapPredictor {
    pub fn rounds(self) -> usize {
        match self {
            MapPredictor::Mlp2 => 0,
            MapPredictor::MeanAgg(k) => k,
        }
    }
}

impl fmt::Display for MapPredictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapPredictor::Mlp2 => write!(f, "mlp2"),
            MapPredictor::MeanAgg(k) => write!(f, "meanagg-{k}"),
        }
    }
}

impl TryFrom<String> for MapPredictor {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "mlp2" {
            return Ok(MapPredictor::Mlp2);
        }
        s.strip_prefix("meanagg-")
            .and_then(|k| k.parse().ok())
            .map(|k: usize| if k == 0 { MapPredictor::Mlp2 } else { MapPredictor::MeanAgg(k) })
            .ok_or_else(|| format!("map predictor must be \"mlp2\" or \"meanagg-<k>\", got {s:?}"))
    }
}

impl From<MapPredictor> for String {
    fn from(p: MapPredictor) -> String {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub model: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "defaults::stalk_dim")]
    pub stalk_dim: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden_channels: usize,
    #[serde(default = "defaults::layers")]
    pub num_layers: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "defaults::yes")]
    pub left_weights: bool,
    #[serde(default = "defaults::yes")]
    pub right_weights: bool,
    #[serde(default)]
    pub map_predictor: MapPredictor,
    /// Width of the map predictor's hidden layers.
    #[serde(default = "defaults::hidden")]
    pub predictor_hidden: usize,
    /// Householder factors per orthogonal map; `None` means `d`.
    #[serde(default)]
    pub num_reflections: Option<usize>,
    #[serde(default)]
    pub dsn_mode: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub input_dropout: f64,
    #[serde(default = "defaults::yes")]
    pub epsilon_learnable: bool,
    /// Per-node standardization after every layer.
    #[serde(default)]
    pub layer_norm: bool,
    #[serde(default)]
    pub normalization: Normalization,
    /// Hidden activation of the map predictors.
    #[serde(default = "defaults::predictor_activation")]
    pub predictor_activation: Activation,
}

mod defaults {
    pub fn stalk_dim() -> usize {
        2
    }
    pub fn hidden() -> usize {
        32
    }
    pub fn layers() -> usize {
        2
    }
    pub fn yes() -> bool {
        true
    }
    pub fn predictor_activation() -> super::Activation {
        super::Activation::Tanh
    }
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            model: ModelKind::Csnn,
            input_dim,
            num_classes,
            stalk_dim: defaults::stalk_dim(),
            hidden_channels: defaults::hidden(),
            num_layers: defaults::layers(),
            activation: Activation::Gelu,
            left_weights: true,
            right_weights: true,
            map_predictor: MapPredictor::Mlp2,
            predictor_hidden: defaults::hidden(),
            num_reflections: None,
            dsn_mode: false,
            dropout: 0.0,
            input_dropout: 0.0,
            epsilon_learnable: true,
            layer_norm: false,
            normalization: Normalization::Symmetric,
            predictor_activation: defaults::predictor_activation(),
        }
    }

    pub fn reflections(&self) -> usize {
        self.num_reflections.unwrap_or(self.stalk_dim)
    }

    /// Flattened width `d·h` of a node's block.
    pub fn block_width(&self) -> usize {
        self.stalk_dim * self.hidden_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.num_classes == 0 {
            return bad("input_dim and num_classes must be positive".into());
        }
        if self.stalk_dim == 0 || self.hidden_channels == 0 || self.num_layers == 0 {
            return bad(format!(
                "stalk_dim, hidden_channels and num_layers must be positive (got {}, {}, {})",
                self.stalk_dim, self.hidden_channels, self.num_layers
            ));
        }
        if self.model == ModelKind::Csnn && self.predictor_hidden == 0 {
            return bad("predictor_hidden must be positive".into());
        }
        for (name, p) in [("dropout", self.dropout), ("input_dropout", self.input_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }
}

/// Graph-derived constants shared by every forward pass on one graph.
#[derive(Clone, Debug)]
pub struct GraphContext {
    graph: Rc<DirectedGraph>,
    arc_source: Rc<Vec<usize>>,
    arc_target: Rc<Vec<usize>>,
    degree: Tensor,
    mean_agg: Rc<CsrMatrix>,
    gcn_adj: Rc<CsrMatrix>,
}

impl GraphContext {
    pub fn new(graph: &DirectedGraph) -> Self {
        let n = graph.num_nodes();
        let arc_source = graph.arcs().iter().map(|a| a.0).collect();
        let arc_target = graph.arcs().iter().map(|a| a.1).collect();
        let degree = Tensor::from_vec(n, 1, (0..n).map(|i| graph.degree(i) as f64).collect())
            .expect("one degree per node");

        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            let deg = graph.degree(i);
            for j in graph.neighbors(i) {
                col_idx.push(j);
                values.push(1.0 / deg as f64);
            }
            row_ptr.push(col_idx.len());
        }
        let mean_agg = CsrMatrix {
            rows: n,
            cols: n,
            row_ptr,
            col_idx,
            values,
        };

        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let tilde = |i: usize| (graph.degree(i) + 1) as f64;
        for i in 0..n {
            let mut entries: Vec<usize> = graph.neighbors(i).collect();
            entries.push(i);
            entries.sort_unstable();
            for j in entries {
                col_idx.push(j);
                values.push(1.0 / (tilde(i) * tilde(j)).sqrt());
            }
            row_ptr.push(col_idx.len());
        }
        let gcn_adj = CsrMatrix {
            rows: n,
            cols: n,
            row_ptr,
            col_idx,
            values,
        };

        Self {
            graph: Rc::new(graph.clone()),
            arc_source: Rc::new(arc_source),
            arc_target: Rc::new(arc_target),
            degree,
            mean_agg: Rc::new(mean_agg),
            gcn_adj: Rc::new(gcn_adj),
        }
    }

    pub fn graph(&self) -> &DirectedGraph {
        &self.graph
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    /// `D̃^{-1/2}(A + I)D̃^{-1/2}`.
    pub fn gcn_adjacency(&self) -> &CsrMatrix {
        &self.gcn_adj
    }
}

/// Per-node conformal maps of one layer as tape values: orthogonal parts
/// `n × d²` (row-major) and scales `n × 1`.
#[derive(Clone, Copy, Debug)]
pub struct LayerMaps {
    pub source_orth: Var,
    pub source_scale: Var,
    pub target_orth: Var,
    pub target_scale: Var,
}

impl LayerMaps {
    /// Places a fixed sheaf on the tape as constants.
    pub fn from_sheaf(tape: &mut Tape, sheaf: &DirectedSheaf) -> Self {
        let n = sheaf.num_nodes();
        let d = sheaf.dimension();
        let orth = |f: &dyn Fn(&ConformalMapPair) -> &ConformalMap| {
            let mut t = Tensor::zeros(n, d * d);
            for i in 0..n {
                t.row_mut(i).copy_from_slice(&f(sheaf.pair(i)).orthogonal.data);
            }
            t
        };
        let scale = |f: &dyn Fn(&ConformalMapPair) -> &ConformalMap| {
            Tensor::from_vec(n, 1, (0..n).map(|i| f(sheaf.pair(i)).scale).collect())
                .expect("one scale per node")
        };
        LayerMaps {
            source_orth: tape.constant(orth(&|p| &p.source)),
            source_scale: tape.constant(scale(&|p| &p.source)),
            target_orth: tape.constant(orth(&|p| &p.target)),
            target_scale: tape.constant(scale(&|p| &p.target)),
        }
    }

    /// Reads the current tape values back into a sheaf.
    pub fn to_sheaf(&self, tape: &Tape, d: usize) -> Result<DirectedSheaf> {
        let (qs, cs, qt, ct) = (
            tape.value(self.source_orth),
            tape.value(self.source_scale),
            tape.value(self.target_orth),
            tape.value(self.target_scale),
        );
        let mut maps = Vec::with_capacity(qs.rows);
        for i in 0..qs.rows {
            let map = |q: &Tensor, c: &Tensor| ConformalMap {
                scale: c.data[i],
                orthogonal: Tensor::from_vec(d, d, q.row(i).to_vec()).expect("d×d block"),
            };
            maps.push(ConformalMapPair {
                source: map(qs, cs),
                target: map(qt, ct),
            });
        }
        DirectedSheaf::new(d, maps)
    }
}

/// Nodes whose source or target map is pinned to exactly zero in one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenMaps {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// How the diffusion layer rescales the Laplacians by their block diagonal `D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `D^{-1/2} L D^{-1/2}`, zero diagonal blocks mapping to zero.
    #[default]
    Symmetric,
    /// `(D + I)^{-1/2} L (D + I)^{-1/2}`. Unlike the symmetric form, a small
    /// scale on node `j` damps every block in column `j` instead of cancelling
    /// against the diagonal.
    Augmented,
    /// The raw Laplacians.
    None,
}

/// `Δ_inᵀ Δ_out Y` on the tape.
pub fn diffusion_term(
    tape: &mut Tape,
    ctx: &GraphContext,
    y: Var,
    maps: &LayerMaps,
    d: usize,
    norm: Normalization,
) -> Result<Var> {
    let n = ctx.num_nodes();
    if tape.shape(maps.source_orth) != (n, d * d) || tape.shape(maps.source_scale) != (n, 1) {
        return Err(Error::Shape(format!(
            "maps for {n} nodes with d={d}: orthogonal {:?}, scale {:?}",
            tape.shape(maps.source_orth),
            tape.shape(maps.source_scale)
        )));
    }
    let r_at_src = tape.gather_rows(maps.target_orth, ctx.arc_source.clone())?;
    let q_at_tgt = tape.gather_rows(maps.source_orth, ctx.arc_target.clone())?;
    let blocks = tape.batch_at_b(r_at_src, q_at_tgt, d)?;

    let deg = tape.constant(ctx.degree.clone());
    let cs2 = tape.unary(maps.source_scale, Unary::Square);
    let ct2 = tape.unary(maps.target_scale, Unary::Square);
    let raw_out = tape.mul(deg, cs2)?;
    let raw_in = tape.mul(deg, ct2)?;

    // coef_e = w_i · c_T,i · c_S,j · w_j on arc e = (i, j)
    let arc_coef = |tape: &mut Tape, w: Option<Var>| -> Result<Var> {
        let (ct, cs) = match w {
            Some(w) => (
                tape.mul(maps.target_scale, w)?,
                tape.mul(maps.source_scale, w)?,
            ),
            None => (maps.target_scale, maps.source_scale),
        };
        let a = tape.gather_rows(ct, ctx.arc_source.clone())?;
        let b = tape.gather_rows(cs, ctx.arc_target.clone())?;
        tape.mul(a, b)
    };

    let (diag_out, coef_out, diag_in, coef_in) = match norm {
        Normalization::Symmetric => {
            let indicator = |t: &Tensor| t.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let ind_out = indicator(tape.value(raw_out));
            let ind_in = indicator(tape.value(raw_in));
            let a = tape.unary(raw_out, Unary::PinvSqrt);
            let b = tape.unary(raw_in, Unary::PinvSqrt);
            (
                tape.constant(ind_out),
                arc_coef(tape, Some(a))?,
                tape.constant(ind_in),
                arc_coef(tape, Some(b))?,
            )
        }
        Normalization::Augmented => {
            let mut side = |raw: Var| -> Result<(Var, Var)> {
                let shifted = tape.unary(raw, Unary::Affine(1.0, 1.0));
                let w = tape.unary(shifted, Unary::PinvSqrt);
                let w2 = tape.unary(w, Unary::Square);
                Ok((tape.mul(raw, w2)?, arc_coef(tape, Some(w))?))
            };
            let (diag_out, coef_out) = side(raw_out)?;
            let (diag_in, coef_in) = side(raw_in)?;
            (diag_out, coef_out, diag_in, coef_in)
        }
        Normalization::None => {
            let c = arc_coef(tape, None)?;
            (raw_out, c, raw_in, c)
        }
    };
    let graph = ctx.graph.clone();
    let z = tape.block_diffusion(y, diag_out, coef_out, blocks, d, graph.clone())?;
    tape.block_diffusion(z, diag_in, coef_in, blocks, d, graph)
}

/// Trainable weights of one diffusion layer as tape values.
#[derive(Clone, Copy, Debug)]
pub struct LayerWeights {
    pub w1: Option<Var>,
    pub w2: Option<Var>,
    /// Raw `1 × d` values; the residual uses `1 + tanh(raw)`.
    pub epsilon: Option<Var>,
}

/// One diffusion layer on `n × (d·h)` features.
pub fn csnn_layer_tape(
    tape: &mut Tape,
    ctx: &GraphContext,
    x: Var,
    maps: &LayerMaps,
    weights: &LayerWeights,
    d: usize,
    activation: Activation,
    norm: Normalization,
) -> Result<Var> {
    let n = ctx.num_nodes();
    let width = tape.shape(x).1;
    if tape.shape(x).0 != n || width % d != 0 {
        return Err(Error::Shape(format!(
            "features {:?} for {n} nodes with d={d}",
            tape.shape(x)
        )));
    }
    let h = width / d;
    let mut y = x;
    if let Some(w1) = weights.w1 {
        y = tape.stalk_left(w1, y, d)?;
    }
    if let Some(w2) = weights.w2 {
        let stacked = tape.reshape(y, n * d, h)?;
        let mixed = tape.matmul(stacked, w2)?;
        y = tape.reshape(mixed, n, width)?;
    }
    let z = diffusion_term(tape, ctx, y, maps, d, norm)?;
    let z = tape.unary(z, activation.unary());
    let residual = match weights.epsilon {
        Some(raw) => {
            let one_plus = {
                let e = tape.unary(raw, Unary::Tanh);
                let e = tape.unary(e, Unary::Affine(1.0, 1.0));
                tape.reshape(e, d, 1)?
            };
            let tiled = tape.tile_rows(one_plus, n);
            let stacked = tape.reshape(x, n * d, h)?;
            let scaled = tape.mul_rows(stacked, tiled)?;
            tape.reshape(scaled, n, width)?
        }
        None => x,
    };
    tape.sub(residual, z)
}

/// Forward-pass behaviour switches.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let (r, c) = tape.shape(x);
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..r * c)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect();
            tape.mul_const(x, Tensor::from_vec(r, c, mask)?)
        }
        _ => Ok(x),
    }
}

/// Tape handles produced by [`Model::forward`].
pub struct ForwardOutput {
    pub logits: Var,
    /// Raw input features; the adjoint here is the input Jacobian row.
    pub input: Var,
    /// Predicted maps of each layer (empty for GCN).
    pub layer_maps: Vec<LayerMaps>,
}

/// Optional controls layered over a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Per-layer frozen maps; missing layers freeze nothing.
    pub frozen: Vec<FrozenMaps>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rows, cols, bound, rng)
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

fn predictor_prefix(layer: usize, which: &str) -> String {
    format!("layer{layer}.{which}")
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParameterStore::new();
        let c = &config;
        match c.model {
            ModelKind::Csnn => {
                let dh = c.block_width();
                let d = c.stalk_dim;
                let h = c.hidden_channels;
                p.insert("encoder.weight", glorot(c.input_dim, dh, rng), true)?;
                p.insert("encoder.bias", Tensor::zeros(1, dh), false)?;
                for l in 0..c.num_layers {
                    if c.left_weights {
                        let w1 = Tensor::identity(d).add(&uniform(d, d, 0.05, rng))?;
                        p.insert(format!("layer{l}.w1"), w1, true)?;
                    }
                    if c.right_weights {
                        let bound = 1.0 / (h as f64).sqrt();
                        p.insert(format!("layer{l}.w2"), uniform(h, h, bound, rng), true)?;
                    }
                    if c.epsilon_learnable {
                        p.insert(format!("layer{l}.epsilon"), Tensor::zeros(1, d), false)?;
                    }
                    for which in ["source", "target"] {
                        Self::init_predictor(&mut p, &predictor_prefix(l, which), c, rng)?;
                    }
                }
                p.insert("readout.weight", glorot(dh, c.num_classes, rng), true)?;
                p.insert("readout.bias", Tensor::zeros(1, c.num_classes), false)?;
            }
            ModelKind::Gcn => {
                let h = c.hidden_channels;
                p.insert("encoder.weight", glorot(c.input_dim, h, rng), true)?;
                p.insert("encoder.bias", Tensor::zeros(1, h), false)?;
                for l in 0..c.num_layers {
                    p.insert(format!("gcn{l}.weight"), glorot(h, h, rng), true)?;
                    p.insert(format!("gcn{l}.bias"), Tensor::zeros(1, h), false)?;
                }
                p.insert("readout.weight", glorot(h, c.num_classes, rng), true)?;
                p.insert("readout.bias", Tensor::zeros(1, c.num_classes), false)?;
            }
        }
        Ok(Self { config, params: p })
    }

    fn init_predictor(
        p: &mut ParameterStore,
        prefix: &str,
        c: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let (dh, hid, d) = (c.block_width(), c.predictor_hidden, c.stalk_dim);
        let out = c.reflections() * d + 1;
        let rounds = c.map_predictor.rounds();
        if rounds == 0 {
            p.insert(format!("{prefix}.hidden.weight"), glorot(dh, hid, rng), true)?;
            p.insert(format!("{prefix}.hidden.bias"), Tensor::zeros(1, hid), false)?;
        } else {
            for r in 0..rounds {
                let fan_in = if r == 0 { dh } else { hid };
                p.insert(format!("{prefix}.agg{r}.self"), glorot(fan_in, hid, rng), true)?;
                p.insert(format!("{prefix}.agg{r}.neighbor"), glorot(fan_in, hid, rng), true)?;
                p.insert(format!("{prefix}.agg{r}.bias"), Tensor::zeros(1, hid), false)?;
            }
        }
        p.insert(format!("{prefix}.out.weight"), glorot(hid, out, rng), true)?;
        // Random reflection offsets keep every Householder vector away from the
        // degenerate origin at initialization.
        let mut bias = uniform(1, out, 1.0, rng);
        bias.data[out - 1] = UNIT_SCALE_BIAS;
        p.insert(format!("{prefix}.out.bias"), bias, false)?;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn param(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(&self.params, self.params.id(name)?))
    }

    fn maybe_param(&self, tape: &mut Tape, name: &str) -> Option<Var> {
        self.params.id(name).ok().map(|id| tape.param(&self.params, id))
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(tape, &format!("{prefix}.weight"))?;
        let b = self.param(tape, &format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    /// One map-predictor network: `n × (d·h)` features to orthogonal parts and
    /// scales.
    fn predict(
        &self,
        tape: &mut Tape,
        ctx: &GraphContext,
        x: Var,
        x_agg: Option<Var>,
        prefix: &str,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let d = c.stalk_dim;
        let rounds = c.map_predictor.rounds();
        let mut z = x;
        if rounds == 0 {
            let hidden = self.linear(tape, z, &format!("{prefix}.hidden"))?;
            z = tape.unary(hidden, c.predictor_activation.unary());
        } else {
            for r in 0..rounds {
                let ws = self.param(tape, &format!("{prefix}.agg{r}.self"))?;
                let wn = self.param(tape, &format!("{prefix}.agg{r}.neighbor"))?;
                let b = self.param(tape, &format!("{prefix}.agg{r}.bias"))?;
                let agg = match (r, x_agg) {
                    (0, Some(a)) => a,
                    _ => tape.spmm(ctx.mean_agg.clone(), z)?,
                };
                z = tape.affine2(z, ws, agg, wn, b, c.predictor_activation.unary())?;
            }
        }
        let out = self.linear(tape, z, &format!("{prefix}.out"))?;
        let k = c.reflections() * d;
        let vectors = tape.slice_cols(out, 0, k)?;
        let orth = if k == 0 {
            let n = ctx.num_nodes();
            let mut eye = Tensor::zeros(n, d * d);
            for i in 0..n {
                eye.row_mut(i).copy_from_slice(&Tensor::identity(d).data);
            }
            tape.constant(eye)
        } else {
            tape.householder(vectors, d)?
        };
        let scale = if c.dsn_mode {
            tape.constant(Tensor::filled(ctx.num_nodes(), 1, 1.0))
        } else {
            let raw = tape.slice_cols(out, k, k + 1)?;
            tape.unary(raw, Unary::Softplus)
        };
        Ok((orth, scale))
    }

    fn predict_layer_maps(
        &self,
        tape: &mut Tape,
        ctx: &GraphContext,
        x: Var,
        layer: usize,
        frozen: Option<&FrozenMaps>,
    ) -> Result<LayerMaps> {
        // both predictors start from the same neighbor mean of x
        let x_agg = match self.config.map_predictor.rounds() {
            0 => None,
            _ => Some(tape.spmm(ctx.mean_agg.clone(), x)?),
        };
        let (source_orth, mut source_scale) =
            self.predict(tape, ctx, x, x_agg, &predictor_prefix(layer, "source"))?;
        let (target_orth, mut target_scale) =
            self.predict(tape, ctx, x, x_agg, &predictor_prefix(layer, "target"))?;
        if let Some(f) = frozen {
            let n = ctx.num_nodes();
            let mask = |nodes: &[usize]| -> Result<Tensor> {
                let mut m = Tensor::filled(n, 1, 1.0);
                for &i in nodes {
                    if i >= n {
                        return Err(Error::NodeOutOfRange { index: i, num_nodes: n });
                    }
                    m.data[i] = 0.0;
                }
                Ok(m)
            };
            if !f.source.is_empty() {
                source_scale = tape.mul_const(source_scale, mask(&f.source)?)?;
            }
            if !f.target.is_empty() {
                target_scale = tape.mul_const(target_scale, mask(&f.target)?)?;
            }
        }
        Ok(LayerMaps {
            source_orth,
            source_scale,
            target_orth,
            target_scale,
        })
    }

    /// Records a full forward pass. Raw features enter as a leaf so input
    /// Jacobians can be read off the adjoints.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &GraphContext,
        features: &Tensor,
        mut mode: Mode<'_>,
        options: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if features.rows != ctx.num_nodes() || features.cols != c.input_dim {
            return Err(Error::Shape(format!(
                "features {:?} for {} nodes with input_dim {}",
                features.shape(),
                ctx.num_nodes(),
                c.input_dim
            )));
        }
        let input = tape.leaf(features.clone());
        let x = dropout(tape, input, c.input_dropout, &mut mode)?;
        let enc = self.linear(tape, x, "encoder")?;
        let mut x = tape.unary(enc, c.activation.unary());
        let mut layer_maps = Vec::new();
        for l in 0..c.num_layers {
            x = match c.model {
                ModelKind::Csnn => {
                    let maps = self.predict_layer_maps(tape, ctx, x, l, options.frozen.get(l))?;
                    let weights = LayerWeights {
                        w1: self.maybe_param(tape, &format!("layer{l}.w1")),
                        w2: self.maybe_param(tape, &format!("layer{l}.w2")),
                        epsilon: self.maybe_param(tape, &format!("layer{l}.epsilon")),
                    };
                    layer_maps.push(maps);
                    csnn_layer_tape(tape, ctx, x, &maps, &weights, c.stalk_dim, c.activation, c.normalization)?
                }
                ModelKind::Gcn => {
                    let w = self.param(tape, &format!("gcn{l}.weight"))?;
                    let b = self.param(tape, &format!("gcn{l}.bias"))?;
                    let agg = tape.spmm(ctx.gcn_adj.clone(), x)?;
                    let y = tape.matmul(agg, w)?;
                    let y = tape.add_bias(y, b)?;
                    tape.unary(y, c.activation.unary())
                }
            };
            if c.layer_norm {
                x = tape.layer_norm(x);
            }
            x = dropout(tape, x, c.dropout, &mut mode)?;
        }
        let logits = self.linear(tape, x, "readout")?;
        Ok(ForwardOutput {
            logits,
            input,
            layer_maps,
        })
    }

    /// Evaluation-mode logits.
    pub fn predict_logits(&self, ctx: &GraphContext, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, ctx, features, Mode::Eval, &ForwardOptions::default())?;
        Ok(tape.value(out.logits).clone())
    }

    /// The maps each layer predicts in evaluation mode.
    pub fn layer_sheaves(&self, ctx: &GraphContext, features: &Tensor) -> Result<Vec<DirectedSheaf>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, ctx, features, Mode::Eval, &ForwardOptions::default())?;
        out.layer_maps
            .iter()
            .map(|m| m.to_sheaf(&tape, self.config.stalk_dim))
            .collect()
    }
}

/// Dense weights of one diffusion layer. Absent weights act as identity and
/// an absent `epsilon` means `ε = 0`.
#[derive(Clone, Debug, Default)]
pub struct LayerParams {
    pub w1: Option<Tensor>,
    pub w2: Option<Tensor>,
    /// Raw `1 × d` values, `ε = tanh(raw)` per stalk coordinate.
    pub epsilon: Option<Tensor>,
}

/// `σ(raw·W + b)` reshaped into per-node `d × h` blocks.
pub fn encode_input(
    raw: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stalk_dim: usize,
    activation: Activation,
) -> Result<FeatureMatrix> {
    if raw.cols != weight.rows {
        return Err(Error::Shape(format!(
            "input width {} but encoder expects {}",
            raw.cols, weight.rows
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(raw.clone());
    let w = tape.leaf(weight.clone());
    let b = tape.leaf(bias.clone());
    let y = tape.matmul(x, w)?;
    let y = tape.add_bias(y, b)?;
    let y = tape.unary(y, activation.unary());
    FeatureMatrix::from_tensor(tape.value(y).clone(), raw.rows, stalk_dim)
}

/// The maps layer `layer` of `model` predicts from features `x`.
pub fn predict_maps(
    model: &Model,
    x: &FeatureMatrix,
    ctx: &GraphContext,
    layer: usize,
) -> Result<DirectedSheaf> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.flattened());
    let maps = model.predict_layer_maps(&mut tape, ctx, xv, layer, None)?;
    maps.to_sheaf(&tape, model.config.stalk_dim)
}

/// One diffusion layer with a fixed sheaf and symmetric normalization.
pub fn csnn_layer(
    x: &FeatureMatrix,
    sheaf: &DirectedSheaf,
    g: &DirectedGraph,
    lp: &LayerParams,
    activation: Activation,
) -> Result<FeatureMatrix> {
    csnn_layer_with(x, sheaf, g, lp, activation, Normalization::Symmetric)
}

pub fn csnn_layer_with(
    x: &FeatureMatrix,
    sheaf: &DirectedSheaf,
    g: &DirectedGraph,
    lp: &LayerParams,
    activation: Activation,
    norm: Normalization,
) -> Result<FeatureMatrix> {
    let d = sheaf.dimension();
    if x.stalk_dim() != d || x.num_nodes() != g.num_nodes() || sheaf.num_nodes() != g.num_nodes() {
        return Err(Error::Shape(format!(
            "features with {} nodes and d={}, sheaf with {} nodes and d={d}, graph with {} nodes",
            x.num_nodes(),
            x.stalk_dim(),
            sheaf.num_nodes(),
            g.num_nodes()
        )));
    }
    let ctx = GraphContext::new(g);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.flattened());
    let maps = LayerMaps::from_sheaf(&mut tape, sheaf);
    let weights = LayerWeights {
        w1: lp.w1.clone().map(|w| tape.leaf(w)),
        w2: lp.w2.clone().map(|w| tape.leaf(w)),
        epsilon: lp.epsilon.clone().map(|e| tape.leaf(e)),
    };
    let y = csnn_layer_tape(&mut tape, &ctx, xv, &maps, &weights, d, activation, norm)?;
    FeatureMatrix::from_tensor(tape.value(y).clone(), g.num_nodes(), d)
}

/// Linear map from flattened node blocks to class logits.
pub fn readout(x: &FeatureMatrix, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut out = x.flattened().matmul(weight)?;
    if bias.shape() != (1, out.cols) {
        return Err(Error::Shape(format!("readout bias {:?}", bias.shape())));
    }
    for r in 0..out.rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// `σ(Â X W)` with `Â` the self-looped symmetric-normalized adjacency.
pub fn gcn_layer(x: &Tensor, g: &DirectedGraph, w: &Tensor, activation: Activation) -> Result<Tensor> {
    if x.rows != g.num_nodes() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} nodes",
            x.rows,
            g.num_nodes()
        )));
    }
    let ctx = GraphContext::new(g);
    let agg = ctx.gcn_adj.matmul_dense(x);
    Ok(agg.matmul(w)?.map(|v| activation.unary().eval(v)))
}
