//! Conformal restriction maps and directed sheaves built from them.
//!
//! Each node carries a source map `S_i` (used whenever `i` is an arc's source)
//! and a target map `T_i` (used whenever `i` is an arc's target). Both are
//! conformal: a nonnegative scale times an orthogonal matrix, the orthogonal
//! part being a product of Householder reflections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reflection vectors shorter than this are treated as the identity.
pub const DEGENERATE_REFLECTION_NORM: f64 = 1e-8;

/// Tolerance used when reporting the role of learned (never exactly zero) maps.
pub const DEFAULT_ROLE_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalMap {
    pub scale: f64,
    pub orthogonal: Tensor,
}

impl ConformalMap {
    pub fn identity(d: usize) -> Self {
        Self {
            scale: 1.0,
            orthogonal: Tensor::identity(d),
        }
    }

    pub fn zero(d: usize) -> Self {
        Self {
            scale: 0.0,
            orthogonal: Tensor::identity(d),
        }
    }

    pub fn new(scale: f64, orthogonal: Tensor) -> Result<Self> {
        if orthogonal.rows != orthogonal.cols {
            return Err(Error::Shape(format!(
                "orthogonal factor must be square, got {}x{}",
                orthogonal.rows, orthogonal.cols
            )));
        }
        if !(scale >= 0.0) {
            return Err(Error::Config(format!("conformal scale must be >= 0, got {scale}")));
        }
        Ok(Self { scale, orthogonal })
    }

    pub fn dim(&self) -> usize {
        self.orthogonal.rows
    }

    /// The represented matrix `C·Q`.
    pub fn matrix(&self) -> Tensor {
        self.orthogonal.scale(self.scale)
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.scale <= tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalMapPair {
    pub source: ConformalMap,
    pub target: ConformalMap,
}

impl ConformalMapPair {
    pub fn identity(d: usize) -> Self {
        Self {
            source: ConformalMap::identity(d),
            target: ConformalMap::identity(d),
        }
    }

    pub fn zero(d: usize) -> Self {
        Self {
            source: ConformalMap::zero(d),
            target: ConformalMap::zero(d),
        }
    }
}

/// One map pair per node, all sharing the stalk dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectedSheaf {
    dimension: usize,
    maps: Vec<ConformalMapPair>,
}

impl DirectedSheaf {
    pub fn new(dimension: usize, maps: Vec<ConformalMapPair>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("stalk dimension must be >= 1".into()));
        }
        for (i, pair) in maps.iter().enumerate() {
            if pair.source.dim() != dimension || pair.target.dim() != dimension {
                return Err(Error::Shape(format!(
                    "node {i} maps have dimension {}/{}, sheaf has {dimension}",
                    pair.source.dim(),
                    pair.target.dim()
                )));
            }
        }
        Ok(Self { dimension, maps })
    }

    /// All maps equal to the identity; with `d = 1` this is the trivial sheaf.
    pub fn constant(num_nodes: usize, d: usize) -> Self {
        Self {
            dimension: d,
            maps: vec![ConformalMapPair::identity(d); num_nodes],
        }
    }

    pub fn zeros(num_nodes: usize, d: usize) -> Self {
        Self {
            dimension: d,
            maps: vec![ConformalMapPair::zero(d); num_nodes],
        }
    }

    /// Scales uniform in `[0.5, 1.5]`, orthogonal factors from random reflections.
    pub fn random<R: Rng>(num_nodes: usize, d: usize, rng: &mut R) -> Self {
        let draw = |rng: &mut R| ConformalMap {
            scale: rng.gen_range(0.5..1.5),
            orthogonal: random_orthogonal(d, rng),
        };
        let maps = (0..num_nodes)
            .map(|_| ConformalMapPair {
                source: draw(rng),
                target: draw(rng),
            })
            .collect();
        Self { dimension: d, maps }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn num_nodes(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[ConformalMapPair] {
        &self.maps
    }

    pub fn pair(&self, i: usize) -> &ConformalMapPair {
        &self.maps[i]
    }

    pub fn source(&self, i: usize) -> &ConformalMap {
        &self.maps[i].source
    }

    pub fn target(&self, i: usize) -> &ConformalMap {
        &self.maps[i].target
    }

    pub fn set_source(&mut self, i: usize, map: ConformalMap) {
        assert_eq!(map.dim(), self.dimension);
        self.maps[i].source = map;
    }

    pub fn set_target(&mut self, i: usize, map: ConformalMap) {
        assert_eq!(map.dim(), self.dimension);
        self.maps[i].target = map;
    }

    pub fn freeze_source(&mut self, i: usize) {
        self.maps[i].source.scale = 0.0;
    }

    pub fn freeze_target(&mut self, i: usize) {
        self.maps[i].target.scale = 0.0;
    }

    pub fn roles(&self, tol: f64) -> Vec<Role> {
        self.maps.iter().map(|p| role_of(p, tol)).collect()
    }
}

/// Product `H(v_1) ⋯ H(v_k)` with `H(v) = I − 2 v vᵀ / ‖v‖²`.
pub fn householder_orthogonal(reflection_vectors: &[Vec<f64>], d: usize) -> Tensor {
    let mut q = Tensor::identity(d);
    for v in reflection_vectors {
        assert_eq!(v.len(), d, "reflection vector length");
        apply_reflection_right(&mut q, v);
    }
    q
}

/// Same as [`householder_orthogonal`] for `k` vectors packed contiguously.
pub fn householder_from_flat(packed: &[f64], d: usize) -> Tensor {
    let mut q = Tensor::identity(d);
    for v in packed.chunks_exact(d) {
        apply_reflection_right(&mut q, v);
    }
    q
}

/// `q ← q·H(v)`; a no-op for degenerate `v`.
fn apply_reflection_right(q: &mut Tensor, v: &[f64]) {
    let d = v.len();
    let norm_sq: f64 = v.iter().map(|x| x * x).sum();
    if norm_sq.sqrt() < DEGENERATE_REFLECTION_NORM {
        return;
    }
    let factor = 2.0 / norm_sq;
    for r in 0..d {
        let row = q.row_mut(r);
        let qv: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        for (x, vc) in row.iter_mut().zip(v) {
            *x -= factor * qv * vc;
        }
    }
}

/// Vector-Jacobian product of [`householder_from_flat`]: given `dL/dQ`,
/// returns `dL/dv` for every packed reflection vector. Degenerate factors
/// receive a zero gradient.
pub fn householder_vjp(packed: &[f64], d: usize, grad_q: &[f64]) -> Vec<f64> {
    let vectors: Vec<&[f64]> = packed.chunks_exact(d).collect();
    // prefixes[m] = H(v_1)⋯H(v_m)
    let mut prefixes = Vec::with_capacity(vectors.len() + 1);
    prefixes.push(Tensor::identity(d));
    for v in &vectors {
        let mut next = prefixes.last().unwrap().clone();
        apply_reflection_right(&mut next, v);
        prefixes.push(next);
    }

    let mut out = vec![0.0; packed.len()];
    let mut g = Tensor::from_vec(d, d, grad_q.to_vec()).expect("gradient is d×d");
    for m in (0..vectors.len()).rev() {
        let v = vectors[m];
        let norm_sq: f64 = v.iter().map(|x| x * x).sum();
        if norm_sq.sqrt() < DEGENERATE_REFLECTION_NORM {
            continue;
        }
        // dL/dH_m = P_{m-1}ᵀ G
        let a = prefixes[m].transpose().matmul(&g).expect("square");
        let av: Vec<f64> = (0..d)
            .map(|r| (0..d).map(|c| a.get(r, c) * v[c]).sum())
            .collect();
        let atv: Vec<f64> = (0..d)
            .map(|c| (0..d).map(|r| a.get(r, c) * v[r]).sum())
            .collect();
        let vav: f64 = v.iter().zip(&av).map(|(x, y)| x * y).sum();
        let grad = &mut out[m * d..(m + 1) * d];
        for c in 0..d {
            grad[c] = -2.0 / norm_sq * (av[c] + atv[c]) + 4.0 * vav * v[c] / (norm_sq * norm_sq);
        }
        // G ← G·H_mᵀ = G·H_m
        apply_reflection_right(&mut g, v);
    }
    out
}

pub fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Tensor {
    let vectors: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    householder_orthogonal(&vectors, d)
}

/// `ln(1 + eˣ)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic sigmoid.
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Materializes one conformal map from raw parameters. `frozen_zero` yields the
/// exact zero map, which learned parameters can only approach.
pub fn conformal_from_params(
    scale_param: f64,
    reflection_vectors: &[Vec<f64>],
    d: usize,
    frozen_zero: bool,
) -> ConformalMap {
    ConformalMap {
        scale: if frozen_zero { 0.0 } else { softplus(scale_param) },
        orthogonal: householder_orthogonal(reflection_vectors, d),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    /// Sends and receives.
    Standard,
    /// Receives from broadcasting neighbors only (`S = 0`).
    Listen,
    /// Sends to listening neighbors only (`T = 0`).
    Broadcast,
    /// Neither sends nor receives.
    Isolate,
}

pub fn role_of(pair: &ConformalMapPair, tol: f64) -> Role {
    match (pair.source.is_zero(tol), pair.target.is_zero(tol)) {
        (true, true) => Role::Isolate,
        (true, false) => Role::Listen,
        (false, true) => Role::Broadcast,
        (false, false) => Role::Standard,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn orthogonality_defect(q: &Tensor) -> f64 {
        let d = q.rows;
        q.transpose()
            .matmul(q)
            .unwrap()
            .max_abs_diff(&Tensor::identity(d))
    }

    fn det(m: &Tensor) -> f64 {
        // Gaussian elimination with partial pivoting.
        let n = m.rows;
        let mut a = m.clone();
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n)
                .max_by(|&x, &y| a.get(x, c).abs().total_cmp(&a.get(y, c).abs()))
                .unwrap();
            if a.get(p, c) == 0.0 {
                return 0.0;
            }
            if p != c {
                for k in 0..n {
                    let t = a.get(c, k);
                    a.set(c, k, a.get(p, k));
                    a.set(p, k, t);
                }
                det = -det;
            }
            det *= a.get(c, c);
            for r in c + 1..n {
                let f = a.get(r, c) / a.get(c, c);
                for k in c..n {
                    a.set(r, k, a.get(r, k) - f * a.get(c, k));
                }
            }
        }
        det
    }

    #[test]
    fn single_reflection_of_e1() {
        let q = householder_orthogonal(&[vec![1.0, 0.0]], 2);
        assert_eq!(q.data, vec![-1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn tiny_vector_is_identity() {
        let q = householder_orthogonal(&[vec![1e-9, -2e-9, 0.0]], 3);
        assert_eq!(q, Tensor::identity(3));
    }

    #[test]
    fn two_random_reflections_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        assert!(orthogonality_defect(&householder_orthogonal(&vs, 3)) < 1e-10);
    }

    #[test]
    fn conformal_params() {
        let m = conformal_from_params(0.0, &[], 2, false);
        assert!((m.scale - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(m.orthogonal, Tensor::identity(2));

        let z = conformal_from_params(5.0, &[vec![0.3, 0.4]], 2, true);
        assert_eq!(z.scale, 0.0);
        assert!(z.matrix().data.iter().all(|&x| x == 0.0));

        let soft = conformal_from_params(-60.0, &[], 2, false);
        assert!(soft.scale > 0.0 && soft.scale < 1e-25);
    }

    #[test]
    fn roles() {
        let d = 2;
        let on = ConformalMap::identity(d);
        let off = ConformalMap::zero(d);
        let pair = |s: &ConformalMap, t: &ConformalMap| ConformalMapPair {
            source: s.clone(),
            target: t.clone(),
        };
        assert_eq!(role_of(&pair(&on, &on), 0.0), Role::Standard);
        assert_eq!(role_of(&pair(&off, &on), 0.0), Role::Listen);
        assert_eq!(role_of(&pair(&on, &off), 0.0), Role::Broadcast);
        assert_eq!(role_of(&pair(&off, &off), 0.0), Role::Isolate);
        let faint = ConformalMap::new(5e-4, Tensor::identity(d)).unwrap();
        assert_eq!(role_of(&pair(&faint, &on), DEFAULT_ROLE_TOL), Role::Listen);
        assert_eq!(role_of(&pair(&faint, &on), 0.0), Role::Standard);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 3;
        let packed: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| -> f64 {
            householder_from_flat(p, d)
                .data
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        let analytic = householder_vjp(&packed, d, &w);
        for c in 0..packed.len() {
            let h = 1e-6;
            let mut plus = packed.clone();
            let mut minus = packed.clone();
            plus[c] += h;
            minus[c] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - analytic[c]).abs() < 1e-7, "coord {c}: {fd} vs {}", analytic[c]);
        }
    }

    #[test]
    fn degenerate_factor_has_zero_gradient() {
        let d = 2;
        let packed = vec![0.0, 0.0, 0.6, 0.8];
        let g = householder_vjp(&packed, d, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&g[..2], &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn householder_products_are_orthogonal(
            d in 1usize..6,
            k in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vs: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let q = householder_orthogonal(&vs, d);
            prop_assert!(orthogonality_defect(&q) < 1e-10);
            prop_assert!((det(&q).abs() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn conformal_maps_satisfy_mtm_c2(
            d in 1usize..5,
            scale_param in -5.0f64..5.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vs: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let m = conformal_from_params(scale_param, &vs, d, false).matrix();
            let c = softplus(scale_param);
            let mtm = m.transpose().matmul(&m).unwrap();
            prop_assert!(mtm.max_abs_diff(&Tensor::identity(d).scale(c * c)) < 1e-9);
        }
    }
}
