//! Occupancy and color field: multi-resolution hash-grid encoding followed
//! by a one-hidden-layer decoder, restricted to an axis-aligned box.
//!
//! The field has a hand-written forward and backward pass. Position
//! derivatives are produced eagerly as a 4×3 Jacobian so that field outputs
//! can be spliced into a [`Tape`] as single nodes; parameter derivatives are
//! produced afterwards from the adjoints of those nodes.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Adjoints, AdamConfig, Dual, ParamStore, Scalar, Tape, Var};
use crate::geometry::{Aabb, Vec3};

const MAX_LEVELS: usize = 16;
const MAX_FEATURES: usize = 4;
const MAX_ENC: usize = MAX_LEVELS * MAX_FEATURES;
const MAX_HIDDEN: usize = 64;
const LOGIT_LIMIT: f64 = 15.0;
const BOX_TOL: f64 = 1e-9;
const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

pub const FEATURES: &str = "features";
pub const W1: &str = "w1";
pub const B1: &str = "b1";
pub const W2: &str = "w2";
pub const B2: &str = "b2";

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("non-finite query position {0:?}")]
    NonFinite(Vec3),
    #[error("position {0:?} lies outside the field box")]
    Outside(Vec3),
    #[error("invalid field configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hash-grid and decoder dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub features_per_level: usize,
    pub log2_table_size: u32,
    pub hidden: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            base_resolution: 16,
            max_resolution: 128,
            features_per_level: 2,
            log2_table_size: 15,
            hidden: 32,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: String| Err(FieldError::Config(m));
        if self.levels == 0 || self.levels > MAX_LEVELS {
            return bad(format!("levels must be in 1..={MAX_LEVELS}"));
        }
        if self.features_per_level == 0 || self.features_per_level > MAX_FEATURES {
            return bad(format!("features_per_level must be in 1..={MAX_FEATURES}"));
        }
        if self.hidden == 0 || self.hidden > MAX_HIDDEN {
            return bad(format!("hidden must be in 1..={MAX_HIDDEN}"));
        }
        if !(1..=24).contains(&self.log2_table_size) {
            return bad("log2_table_size must be in 1..=24".into());
        }
        if self.base_resolution < 1 || self.max_resolution < self.base_resolution {
            return bad("need 1 <= base_resolution <= max_resolution".into());
        }
        let r = self.resolutions();
        if r.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("level resolutions not strictly increasing: {r:?}"));
        }
        Ok(())
    }

    /// Geometric progression from the base to the max resolution.
    pub fn resolutions(&self) -> Vec<u32> {
        if self.levels == 1 {
            return vec![self.base_resolution];
        }
        let growth = (self.max_resolution as f64 / self.base_resolution as f64)
            .powf(1.0 / (self.levels - 1) as f64);
        (0..self.levels)
            .map(|l| (self.base_resolution as f64 * growth.powi(l as i32)).round() as u32)
            .collect()
    }

    pub fn table_size(&self) -> usize {
        1 << self.log2_table_size
    }

    pub fn encoding_dim(&self) -> usize {
        self.levels * self.features_per_level
    }
}

/// Occupancy probability and RGB color at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub occupancy: f64,
    pub color: [f64; 3],
}

impl FieldOutput {
    pub const EMPTY: FieldOutput = FieldOutput {
        occupancy: 0.0,
        color: [0.0; 3],
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.occupancy, self.color[0], self.color[1], self.color[2]]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self {
            occupancy: a[0],
            color: [a[1], a[2], a[3]],
        }
    }
}

/// ∂(occupancy, r, g, b)/∂(x, y, z).
pub type OutputJacobian = [[f64; 3]; 4];

/// Anything that can be queried like the learned field.
pub trait OccupancyField: Sync {
    fn aabb(&self) -> Aabb;

    fn query(&self, x: Vec3) -> Result<FieldOutput, FieldError>;

    fn query_with_jacobian(&self, x: Vec3) -> Result<(FieldOutput, OutputJacobian), FieldError>;

    fn occupancy(&self, x: Vec3) -> Result<f64, FieldError> {
        Ok(self.query(x)?.occupancy)
    }

    /// Outputs and the spatial gradient of the occupancy alone.
    fn occupancy_with_gradient(&self, x: Vec3) -> Result<(FieldOutput, [f64; 3]), FieldError> {
        let (out, jac) = self.query_with_jacobian(x)?;
        Ok((out, jac[0]))
    }
}

/// Field queries generic over the scalar type, so one rendering routine
/// serves plain evaluation and every differentiated variant.
pub trait Probe<S: Scalar> {
    fn probe(&mut self, x: Vec3<S>) -> Result<[S; 4], FieldError>;
}

/// Plain evaluation.
pub struct ValueProbe<'a, F: ?Sized>(pub &'a F);

impl<F: OccupancyField + ?Sized> Probe<f64> for ValueProbe<'_, F> {
    fn probe(&mut self, x: Vec3) -> Result<[f64; 4], FieldError> {
        Ok(self.0.query(x)?.to_array())
    }
}

/// Differentiates outputs with respect to the query position only; field
/// parameters are treated as constants.
pub struct PositionProbe<'a, 't, F: ?Sized> {
    pub field: &'a F,
    pub tape: &'t Tape,
}

impl<'t, F: OccupancyField + ?Sized> Probe<Var<'t>> for PositionProbe<'_, 't, F> {
    fn probe(&mut self, x: Vec3<Var<'t>>) -> Result<[Var<'t>; 4], FieldError> {
        let xv = x.value();
        if x.x.is_constant() && x.y.is_constant() && x.z.is_constant() {
            return Ok(self.field.query(xv)?.to_array().map(Var::constant));
        }
        let (out, jac) = self.field.query_with_jacobian(xv)?;
        Ok(splice(self.tape, out.to_array(), &jac, x, false))
    }
}

/// Forward-mode position derivatives of the occupancy. Colors come back as
/// constants.
pub struct DualProbe<'a, F: ?Sized>(pub &'a F);

impl<F: OccupancyField + ?Sized, const N: usize> Probe<Dual<N>> for DualProbe<'_, F> {
    fn probe(&mut self, x: Vec3<Dual<N>>) -> Result<[Dual<N>; 4], FieldError> {
        let (out, g) = self.0.occupancy_with_gradient(x.value())?;
        let d = std::array::from_fn(|k| g[0] * x.x.d[k] + g[1] * x.y.d[k] + g[2] * x.z.d[k]);
        let [o, r, gr, b] = out.to_array();
        Ok([Dual::new(o, d), Dual::constant(r), Dual::constant(gr), Dual::constant(b)])
    }
}

fn splice<'t>(
    tape: &'t Tape,
    out: [f64; 4],
    jac: &OutputJacobian,
    x: Vec3<Var<'t>>,
    always_record: bool,
) -> [Var<'t>; 4] {
    std::array::from_fn(|k| {
        let ops = [(x.x, jac[k][0]), (x.y, jac[k][1]), (x.z, jac[k][2])];
        if always_record {
            tape.recorded(out[k], &ops)
        } else {
            tape.custom(out[k], &ops)
        }
    })
}

/// Field that returns the same occupancy everywhere inside its box.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField {
    pub occupancy: f64,
    pub aabb: Aabb,
}

impl ConstantField {
    pub fn new(occupancy: f64, aabb: Aabb) -> Self {
        Self { occupancy, aabb }
    }
}

impl OccupancyField for ConstantField {
    fn aabb(&self) -> Aabb {
        self.aabb
    }

    fn query(&self, x: Vec3) -> Result<FieldOutput, FieldError> {
        if !x.is_finite() {
            return Err(FieldError::NonFinite(x));
        }
        if !self.aabb.contains(x, BOX_TOL) {
            return Ok(FieldOutput::EMPTY);
        }
        Ok(FieldOutput {
            occupancy: self.occupancy,
            color: [0.5; 3],
        })
    }

    fn query_with_jacobian(&self, x: Vec3) -> Result<(FieldOutput, OutputJacobian), FieldError> {
        Ok((self.query(x)?, [[0.0; 3]; 4]))
    }
}

/// Occupancy given by a closure; position derivatives by central
/// differences. Color is mid-gray.
pub struct FnField<F> {
    pub aabb: Aabb,
    pub f: F,
}

impl<F: Fn(Vec3) -> f64 + Sync> OccupancyField for FnField<F> {
    fn aabb(&self) -> Aabb {
        self.aabb
    }

    fn query(&self, x: Vec3) -> Result<FieldOutput, FieldError> {
        if !x.is_finite() {
            return Err(FieldError::NonFinite(x));
        }
        if !self.aabb.contains(x, BOX_TOL) {
            return Ok(FieldOutput::EMPTY);
        }
        Ok(FieldOutput {
            occupancy: (self.f)(x),
            color: [0.5; 3],
        })
    }

    fn query_with_jacobian(&self, x: Vec3) -> Result<(FieldOutput, OutputJacobian), FieldError> {
        let out = self.query(x)?;
        let mut jac = [[0.0; 3]; 4];
        if out != FieldOutput::EMPTY {
            let h = 1e-6;
            for a in 0..3 {
                let mut e = [0.0; 3];
                e[a] = h;
                let e = Vec3::from_array(e);
                jac[0][a] = ((self.f)(x + e) - (self.f)(x - e)) / (2.0 * h);
            }
        }
        Ok((out, jac))
    }
}

/// Intermediate values of one interior query, kept for the parameter
/// backward pass.
#[derive(Clone)]
pub struct QueryCache {
    u: [f64; 3],
    enc: [f64; MAX_ENC],
    pre: [f64; MAX_HIDDEN],
    logits: [f64; 4],
    out: [f64; 4],
}

/// Sparse feature gradient plus dense decoder gradients.
#[derive(Debug, Clone, Default)]
pub struct FieldGrad {
    pub feature_index: Vec<u32>,
    pub feature_grad: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl FieldGrad {
    pub fn new(cfg: &HashGridConfig) -> Self {
        let (e, h) = (cfg.encoding_dim(), cfg.hidden);
        Self {
            feature_index: Vec::new(),
            feature_grad: Vec::new(),
            w1: vec![0.0; e * h],
            b1: vec![0.0; h],
            w2: vec![0.0; 4 * h],
            b2: vec![0.0; 4],
        }
    }

    pub fn clear(&mut self) {
        self.feature_index.clear();
        self.feature_grad.clear();
        for g in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Dense gradient buffer with one array per parameter group.
#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub groups: Vec<Vec<f64>>,
}

impl DenseGrad {
    pub fn zeros(field: &Field) -> Self {
        Self {
            groups: field.params.groups().iter().map(|g| vec![0.0; g.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.groups {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn add(&mut self, grad: &FieldGrad) {
        let feats = &mut self.groups[0];
        for (&i, &g) in grad.feature_index.iter().zip(&grad.feature_grad) {
            feats[i as usize] += g;
        }
        for (gi, src) in [(1, &grad.w1), (2, &grad.b1), (3, &grad.w2), (4, &grad.b2)] {
            for (acc, g) in self.groups[gi].iter_mut().zip(src.iter()) {
                *acc += g;
            }
        }
    }
}

/// The learned field. Parameters live in a [`ParamStore`] under the groups
/// [`FEATURES`], [`W1`], [`B1`], [`W2`], [`B2`]. `W1` is stored input-major
/// (`w1[i * hidden + j]`), `W2` output-major (`w2[k * hidden + j]`).
#[derive(Debug, Clone)]
pub struct Field {
    cfg: HashGridConfig,
    aabb: Aabb,
    resolutions: Vec<u32>,
    params: ParamStore,
}

impl Field {
    /// Features uniform in ±1e-4, weights uniform in ±1/√fan_in, zero
    /// biases; occupancy starts near 0.5 everywhere.
    pub fn new(cfg: HashGridConfig, aabb: Aabb, seed: u64) -> Result<Self, FieldError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, h) = (cfg.encoding_dim(), cfg.hidden);
        let n_feat = cfg.levels * cfg.table_size() * cfg.features_per_level;
        let mut uniform = |n: usize, a: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        };
        let features = uniform(n_feat, 1e-4);
        let w1 = uniform(e * h, 1.0 / (e as f64).sqrt());
        let w2 = uniform(4 * h, 1.0 / (h as f64).sqrt());
        let mut params = ParamStore::new();
        params.add(FEATURES, features);
        params.add(W1, w1);
        params.add(B1, vec![0.0; h]);
        params.add(W2, w2);
        params.add(B2, vec![0.0; 4]);
        Ok(Self {
            resolutions: cfg.resolutions(),
            cfg,
            aabb,
            params,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.cfg
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Slot of grid vertex `v` at `level` in that level's table.
    pub fn table_index(&self, v: [u32; 3]) -> usize {
        let h = v[0].wrapping_mul(PRIMES[0])
            ^ v[1].wrapping_mul(PRIMES[1])
            ^ v[2].wrapping_mul(PRIMES[2]);
        (h as usize) & (self.cfg.table_size() - 1)
    }

    /// Feature vector stored at grid vertex `v` of `level`.
    pub fn vertex_features(&self, level: usize, v: [u32; 3]) -> Vec<f64> {
        let f = self.cfg.features_per_level;
        let base = (level * self.cfg.table_size() + self.table_index(v)) * f;
        self.group(0)[base..base + f].to_vec()
    }

    fn group(&self, i: usize) -> &[f64] {
        &self.params.groups()[i].values
    }

    fn normalized(&self, x: Vec3) -> Result<Option<[f64; 3]>, FieldError> {
        if !x.is_finite() {
            return Err(FieldError::NonFinite(x));
        }
        if !self.aabb.contains(x, BOX_TOL) {
            return Ok(None);
        }
        let e = self.aabb.extent();
        let u = (x - self.aabb.min).to_array();
        let e = e.to_array();
        Ok(Some(std::array::from_fn(|a| (u[a] / e[a]).clamp(0.0, 1.0))))
    }

    /// Corner slots, trilinear weights and, optionally, weight derivatives
    /// with respect to normalized position.
    fn level_corners(
        &self,
        level: usize,
        u: [f64; 3],
        idx: &mut [u32],
        w: &mut [f64],
        dw: Option<&mut [[f64; 3]]>,
    ) {
        let res = self.resolutions[level];
        let mut cell = [0u32; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let p = u[a] * res as f64;
            // `u` lies in [0, 1], so truncation is floor.
            let c = (p as u32).min(res - 1);
            cell[a] = c;
            frac[a] = p - c as f64;
        }
        let mask = (self.cfg.table_size() - 1) as u32;
        let level_base = (level * self.cfg.table_size()) as u32;
        let hash: [[u32; 2]; 3] =
            std::array::from_fn(|a| [cell[a].wrapping_mul(PRIMES[a]), (cell[a] + 1).wrapping_mul(PRIMES[a])]);
        let wt: [[f64; 2]; 3] = std::array::from_fn(|a| [1.0 - frac[a], frac[a]]);
        for c in 0..8 {
            let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            idx[c] = level_base + ((hash[0][bx] ^ hash[1][by] ^ hash[2][bz]) & mask);
            w[c] = wt[0][bx] * wt[1][by] * wt[2][bz];
        }
        if let Some(dw) = dw {
            let r = res as f64;
            let slope = [-r, r];
            for c in 0..8 {
                let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
                dw[c] = [
                    slope[bx] * wt[1][by] * wt[2][bz],
                    wt[0][bx] * slope[by] * wt[2][bz],
                    wt[0][bx] * wt[1][by] * slope[bz],
                ];
            }
        }
    }

    /// Concatenated per-level interpolated features.
    pub fn encode(&self, x: Vec3) -> Result<Vec<f64>, FieldError> {
        Ok(self.encode_with_jacobian(x)?.0)
    }

    /// Encoding and its derivative with respect to world position.
    pub fn encode_with_jacobian(&self, x: Vec3) -> Result<(Vec<f64>, Vec<[f64; 3]>), FieldError> {
        let u = self.normalized(x)?.ok_or(FieldError::Outside(x))?;
        let nf = self.cfg.features_per_level;
        let feats = self.group(0);
        let inv_e = self.aabb.extent().to_array().map(|e| 1.0 / e);
        let mut enc = vec![0.0; self.cfg.encoding_dim()];
        let mut jac = vec![[0.0; 3]; self.cfg.encoding_dim()];
        let (mut idx, mut w, mut dw) = ([0u32; 8], [0.0; 8], [[0.0; 3]; 8]);
        for l in 0..self.cfg.levels {
            self.level_corners(l, u, &mut idx, &mut w, Some(&mut dw));
            for c in 0..8 {
                for f in 0..nf {
                    let v = feats[idx[c] as usize * nf + f];
                    enc[l * nf + f] += w[c] * v;
                    for a in 0..3 {
                        jac[l * nf + f][a] += dw[c][a] * inv_e[a] * v;
                    }
                }
            }
        }
        Ok((enc, jac))
    }

    /// Forward pass for a point inside the box.
    fn forward(&self, u: [f64; 3], want_jac: bool) -> (QueryCache, Option<OutputJacobian>) {
        let (nl, nf, nh) = (self.cfg.levels, self.cfg.features_per_level, self.cfg.hidden);
        let ne = nl * nf;
        let g = self.params.groups();
        let (feats, w1, b1, w2, b2) = (
            &g[0].values,
            &g[1].values,
            &g[2].values,
            &g[3].values,
            &g[4].values,
        );
        let mut cache = QueryCache {
            u,
            enc: [0.0; MAX_ENC],
            pre: [0.0; MAX_HIDDEN],
            logits: [0.0; 4],
            out: [0.0; 4],
        };
        let (mut idx, mut w) = ([0u32; 8], [0.0; 8]);
        for l in 0..nl {
            self.level_corners(l, u, &mut idx, &mut w, None);
            let enc = &mut cache.enc[l * nf..(l + 1) * nf];
            for c in 0..8 {
                let base = idx[c] as usize * nf;
                axpy(enc, w[c], &feats[base..base + nf]);
            }
        }
        cache.pre[..nh].copy_from_slice(&b1[..nh]);
        for i in 0..ne {
            axpy(&mut cache.pre[..nh], cache.enc[i], &w1[i * nh..(i + 1) * nh]);
        }
        let mut hidden = [0.0; MAX_HIDDEN];
        for j in 0..nh {
            hidden[j] = cache.pre[j].max(0.0);
        }
        for k in 0..4 {
            let s = b2[k] + dot(&w2[k * nh..(k + 1) * nh], &hidden[..nh]);
            cache.logits[k] = s;
            cache.out[k] = Scalar::sigmoid(s.clamp(-LOGIT_LIMIT, LOGIT_LIMIT));
        }
        if !want_jac {
            return (cache, None);
        }
        let mut denc = [[0.0; 3]; MAX_ENC];
        let mut dw = [[0.0; 3]; 8];
        for l in 0..nl {
            self.level_corners(l, u, &mut idx, &mut w, Some(&mut dw));
            for c in 0..8 {
                let base = idx[c] as usize * nf;
                for f in 0..nf {
                    let v = feats[base + f];
                    for a in 0..3 {
                        denc[l * nf + f][a] += dw[c][a] * v;
                    }
                }
            }
        }
        let mut dpre = [[0.0; MAX_HIDDEN]; 3];
        for i in 0..ne {
            let col = &w1[i * nh..(i + 1) * nh];
            for a in 0..3 {
                axpy(&mut dpre[a][..nh], denc[i][a], col);
            }
        }
        let inv_e = self.aabb.extent().to_array().map(|e| 1.0 / e);
        let mut jac = [[0.0; 3]; 4];
        for k in 0..4 {
            let ds = output_slope(cache.logits[k], cache.out[k]);
            if ds == 0.0 {
                continue;
            }
            let row = &w2[k * nh..(k + 1) * nh];
            for j in 0..nh {
                for a in 0..3 {
                    if cache.pre[j] > 0.0 {
                        jac[k][a] += row[j] * dpre[a][j];
                    }
                }
            }
            for a in 0..3 {
                jac[k][a] *= ds * inv_e[a];
            }
        }
        (cache, Some(jac))
    }

    /// Reverse sweep from the occupancy output to world position.
    fn occupancy_position_grad(&self, cache: &QueryCache) -> [f64; 3] {
        let (nl, nf, nh) = (self.cfg.levels, self.cfg.features_per_level, self.cfg.hidden);
        let ne = nl * nf;
        let ds = output_slope(cache.logits[0], cache.out[0]);
        if ds == 0.0 {
            return [0.0; 3];
        }
        let g = self.params.groups();
        let (feats, w1, w2) = (&g[0].values, &g[1].values, &g[3].values);
        let mut dpre = [0.0; MAX_HIDDEN];
        for j in 0..nh {
            if cache.pre[j] > 0.0 {
                dpre[j] = ds * w2[j];
            }
        }
        let mut denc = [0.0; MAX_ENC];
        for i in 0..ne {
            denc[i] = dot(&w1[i * nh..(i + 1) * nh], &dpre[..nh]);
        }
        let mut grad = [0.0; 3];
        let (mut idx, mut w, mut dw) = ([0u32; 8], [0.0; 8], [[0.0; 3]; 8]);
        for l in 0..nl {
            self.level_corners(l, cache.u, &mut idx, &mut w, Some(&mut dw));
            for c in 0..8 {
                let base = idx[c] as usize * nf;
                let s = dot(&denc[l * nf..(l + 1) * nf], &feats[base..base + nf]);
                for a in 0..3 {
                    grad[a] += s * dw[c][a];
                }
            }
        }
        let e = self.aabb.extent().to_array();
        std::array::from_fn(|a| grad[a] / e[a])
    }

    /// Parameter gradient of `Σ_k g_out[k]·out[k]` for one cached query.
    pub fn backward_params(&self, cache: &QueryCache, g_out: [f64; 4], grad: &mut FieldGrad) {
        let (nl, nf, nh) = (self.cfg.levels, self.cfg.features_per_level, self.cfg.hidden);
        let ne = nl * nf;
        let g = self.params.groups();
        let (w1, w2) = (&g[1].values, &g[3].values);
        let mut dlogit = [0.0; 4];
        for k in 0..4 {
            dlogit[k] = g_out[k] * output_slope(cache.logits[k], cache.out[k]);
        }
        if dlogit.iter().all(|&d| d == 0.0) {
            return;
        }
        let mut dpre = [0.0; MAX_HIDDEN];
        for k in 0..4 {
            let d = dlogit[k];
            if d == 0.0 {
                continue;
            }
            grad.b2[k] += d;
            let row = &w2[k * nh..(k + 1) * nh];
            let grow = &mut grad.w2[k * nh..(k + 1) * nh];
            for j in 0..nh {
                let h = cache.pre[j];
                if h > 0.0 {
                    grow[j] += d * h;
                    dpre[j] += d * row[j];
                }
            }
        }
        let mut denc = [0.0; MAX_ENC];
        for (g, d) in grad.b1.iter_mut().zip(&dpre[..nh]) {
            *g += d;
        }
        for i in 0..ne {
            axpy(&mut grad.w1[i * nh..(i + 1) * nh], cache.enc[i], &dpre[..nh]);
            denc[i] = dot(&w1[i * nh..(i + 1) * nh], &dpre[..nh]);
        }
        let (mut idx, mut w) = ([0u32; 8], [0.0; 8]);
        let (mut slots, mut values) = ([0u32; 8 * MAX_FEATURES], [0.0; 8 * MAX_FEATURES]);
        let n = 8 * nf;
        for l in 0..nl {
            self.level_corners(l, cache.u, &mut idx, &mut w, None);
            let de = &denc[l * nf..(l + 1) * nf];
            for c in 0..8 {
                let base = idx[c] * nf as u32;
                for f in 0..nf {
                    slots[c * nf + f] = base + f as u32;
                    values[c * nf + f] = w[c] * de[f];
                }
            }
            grad.feature_index.extend_from_slice(&slots[..n]);
            grad.feature_grad.extend_from_slice(&values[..n]);
        }
    }

    /// Adds a gradient into the parameter accumulators.
    pub fn accumulate(&mut self, grad: &FieldGrad) {
        let groups = self.params.groups_mut();
        let feats = &mut groups[0].grad;
        for (&i, &g) in grad.feature_index.iter().zip(&grad.feature_grad) {
            feats[i as usize] += g;
        }
        for (gi, src) in [(1, &grad.w1), (2, &grad.b1), (3, &grad.w2), (4, &grad.b2)] {
            for (acc, g) in groups[gi].grad.iter_mut().zip(src.iter()) {
                *acc += g;
            }
        }
    }

    pub fn accumulate_dense(&mut self, grad: &DenseGrad) {
        for (g, src) in self.params.groups_mut().iter_mut().zip(&grad.groups) {
            for (acc, x) in g.grad.iter_mut().zip(src) {
                *acc += x;
            }
        }
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.params.adam_step_all(cfg);
    }

    /// Drops optimizer state, keeping parameters.
    pub fn reset_optimizer(&mut self) {
        for g in self.params.groups_mut() {
            g.reset_moments();
            g.zero_grad();
        }
    }

    /// Cached forward pass for the parameter backward; `None` outside the
    /// box.
    pub fn forward_cached(
        &self,
        x: Vec3,
        want_jac: bool,
    ) -> Result<Option<(QueryCache, Option<OutputJacobian>)>, FieldError> {
        Ok(self.normalized(x)?.map(|u| self.forward(u, want_jac)))
    }

    /// Writes parameters (and optionally optimizer moments) to a
    /// little-endian binary file.
    ///
    /// Layout: magic `AIRFLD01`; u32 levels, base resolution, max resolution,
    /// features per level, log2 table size, hidden; f64 box min xyz, max xyz;
    /// u8 moments flag; u32 group count; per group: u32 name length, name
    /// bytes, u64 value count, values as f64, and when the flag is set u64
    /// step followed by first and second moments.
    pub fn save(&self, path: &Path, with_moments: bool) -> Result<(), FieldError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out, with_moments)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write, with_moments: bool) -> Result<(), FieldError> {
        out.write_all(MAGIC)?;
        let c = &self.cfg;
        for v in [
            c.levels as u32,
            c.base_resolution,
            c.max_resolution,
            c.features_per_level as u32,
            c.log2_table_size,
            c.hidden as u32,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in self.aabb.min.to_array().into_iter().chain(self.aabb.max.to_array()) {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&[with_moments as u8])?;
        let groups = self.params.groups();
        out.write_all(&(groups.len() as u32).to_le_bytes())?;
        let write_f64s = |out: &mut dyn Write, xs: &[f64]| -> std::io::Result<()> {
            for x in xs {
                out.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        for g in groups {
            out.write_all(&(g.name.len() as u32).to_le_bytes())?;
            out.write_all(g.name.as_bytes())?;
            out.write_all(&(g.values.len() as u64).to_le_bytes())?;
            write_f64s(out, &g.values)?;
            if with_moments {
                out.write_all(&g.step.to_le_bytes())?;
                write_f64s(out, &g.m)?;
                write_f64s(out, &g.v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut input)
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self, FieldError> {
        let bad = |m: &str| FieldError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32s = [0u32; 6];
        for v in &mut u32s {
            *v = read_u32(input)?;
        }
        let cfg = HashGridConfig {
            levels: u32s[0] as usize,
            base_resolution: u32s[1],
            max_resolution: u32s[2],
            features_per_level: u32s[3] as usize,
            log2_table_size: u32s[4],
            hidden: u32s[5] as usize,
        };
        cfg.validate()?;
        let mut b = [0.0; 6];
        for v in &mut b {
            *v = read_f64(input)?;
        }
        let aabb = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))
            .map_err(|e| FieldError::Checkpoint(e.to_string()))?;
        let mut flag = [0u8; 1];
        input.read_exact(&mut flag)?;
        let with_moments = flag[0] == 1;
        let mut field = Field {
            resolutions: cfg.resolutions(),
            cfg,
            aabb,
            params: ParamStore::new(),
        };
        let expected = field.expected_groups();
        let n_groups = read_u32(input)? as usize;
        if n_groups != expected.len() {
            return Err(bad("unexpected group count"));
        }
        for (name, len) in expected {
            let name_len = read_u32(input)? as usize;
            let mut buf = vec![0u8; name_len];
            input.read_exact(&mut buf)?;
            if buf != name.as_bytes() {
                return Err(bad("unexpected group name"));
            }
            let n = read_u64(input)? as usize;
            if n != len {
                return Err(bad("group size does not match configuration"));
            }
            let values = read_f64s(input, n)?;
            field.params.add(name, values);
            if with_moments {
                let step = read_u64(input)?;
                let m = read_f64s(input, n)?;
                let v = read_f64s(input, n)?;
                let g = field.params.group_mut(name).expect("just added");
                g.step = step;
                g.m = m;
                g.v = v;
            }
        }
        Ok(field)
    }

    fn expected_groups(&self) -> [(&'static str, usize); 5] {
        let c = &self.cfg;
        let (e, h) = (c.encoding_dim(), c.hidden);
        [
            (FEATURES, c.levels * c.table_size() * c.features_per_level),
            (W1, e * h),
            (B1, h),
            (W2, 4 * h),
            (B2, 4),
        ]
    }
}

const MAGIC: &[u8; 8] = b"AIRFLD01";

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for q in 0..4 {
            acc[q] += x[q] * y[q];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a·x`.
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Derivative of `sigmoid(clamp(logit))` given its output.
fn output_slope(logit: f64, out: f64) -> f64 {
    if (-LOGIT_LIMIT..=LOGIT_LIMIT).contains(&logit) {
        out * (1.0 - out)
    } else {
        0.0
    }
}

impl OccupancyField for Field {
    fn aabb(&self) -> Aabb {
        self.aabb
    }

    fn query(&self, x: Vec3) -> Result<FieldOutput, FieldError> {
        Ok(match self.normalized(x)? {
            Some(u) => FieldOutput::from_array(self.forward(u, false).0.out),
            None => FieldOutput::EMPTY,
        })
    }

    fn query_with_jacobian(&self, x: Vec3) -> Result<(FieldOutput, OutputJacobian), FieldError> {
        Ok(match self.normalized(x)? {
            Some(u) => {
                let (c, j) = self.forward(u, true);
                (FieldOutput::from_array(c.out), j.expect("requested"))
            }
            None => (FieldOutput::EMPTY, [[0.0; 3]; 4]),
        })
    }

    fn occupancy_with_gradient(&self, x: Vec3) -> Result<(FieldOutput, [f64; 3]), FieldError> {
        let Some(u) = self.normalized(x)? else {
            return Ok((FieldOutput::EMPTY, [0.0; 3]));
        };
        let (cache, _) = self.forward(u, false);
        Ok((FieldOutput::from_array(cache.out), self.occupancy_position_grad(&cache)))
    }
}

/// Records every interior query so that parameter gradients can be
/// recovered after a tape backward sweep.
pub struct TrainProbe<'a, 't> {
    field: &'a Field,
    tape: &'t Tape,
    entries: Vec<(QueryCache, [Var<'t>; 4])>,
}

impl<'a, 't> TrainProbe<'a, 't> {
    pub fn new(field: &'a Field, tape: &'t Tape) -> Self {
        Self {
            field,
            tape,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Accumulates parameter gradients using the adjoints of the recorded
    /// output nodes.
    pub fn backward_params(&self, adj: &Adjoints, grad: &mut FieldGrad) {
        for (cache, outs) in &self.entries {
            let g = outs.map(|v| adj.get(v));
            self.field.backward_params(cache, g, grad);
        }
    }
}

impl<'t> Probe<Var<'t>> for TrainProbe<'_, 't> {
    fn probe(&mut self, x: Vec3<Var<'t>>) -> Result<[Var<'t>; 4], FieldError> {
        let moving = !(x.x.is_constant() && x.y.is_constant() && x.z.is_constant());
        match self.field.forward_cached(x.value(), moving)? {
            None => Ok([Var::constant(0.0); 4]),
            Some((cache, jac)) => {
                let jac = jac.unwrap_or([[0.0; 3]; 4]);
                let outs = splice(self.tape, cache.out, &jac, x, true);
                self.entries.push((cache, outs));
                Ok(outs)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;

    fn field(seed: u64) -> Field {
        Field::new(HashGridConfig::default(), Aabb::cube(0.25), seed).unwrap()
    }

    /// Larger random parameters so that the decoder is far from its
    /// all-zero starting point.
    fn warmed(seed: u64) -> Field {
        let mut f = field(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for g in f.params_mut().groups_mut() {
            let s = if g.name == FEATURES { 0.5 } else { 0.4 };
            g.values.iter_mut().for_each(|v| *v = rng.gen_range(-s..s));
        }
        f
    }

    fn random_point(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
        Vec3::new(
            rng.gen_range(-half..half),
            rng.gen_range(-half..half),
            rng.gen_range(-half..half),
        )
    }

    #[test]
    fn default_resolutions() {
        let r = HashGridConfig::default().resolutions();
        assert_eq!(r.len(), 8);
        assert_eq!(r[0], 16);
        assert_eq!(r[7], 128);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn fresh_field_is_near_one_half() {
        let f = field(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let o = f.occupancy(random_point(&mut rng, 0.25)).unwrap();
            assert!((o - 0.5).abs() < 0.05, "{o}");
        }
    }

    #[test]
    fn seeds_control_initialization() {
        let x = Vec3::new(0.01, -0.1, 0.2);
        let (a, b, c) = (field(5), field(5), warmed(6));
        assert_eq!(a.query(x).unwrap(), b.query(x).unwrap());
        let d = field(6);
        assert_ne!(a.query(x).unwrap(), d.query(x).unwrap());
        assert!((d.occupancy(x).unwrap() - 0.5).abs() < 0.05);
        assert_ne!(a.query(x).unwrap(), c.query(x).unwrap());
    }

    #[test]
    fn outside_box_is_empty() {
        let f = warmed(1);
        let x = Vec3::new(0.3, 0.0, 0.0);
        assert_eq!(f.query(x).unwrap(), FieldOutput::EMPTY);
        let (_, j) = f.query_with_jacobian(x).unwrap();
        assert_eq!(j, [[0.0; 3]; 4]);
        assert!(matches!(
            f.query(Vec3::new(f64::NAN, 0.0, 0.0)),
            Err(FieldError::NonFinite(_))
        ));
        assert!(matches!(f.encode(x), Err(FieldError::Outside(_))));
    }

    #[test]
    fn vertex_and_cell_center_encodings() {
        let f = warmed(3);
        let res = f.resolutions()[0] as f64;
        // Grid vertex (3, 5, 7) of the coarsest level.
        let v = [3u32, 5, 7];
        let x = Vec3::new(
            -0.25 + 0.5 * v[0] as f64 / res,
            -0.25 + 0.5 * v[1] as f64 / res,
            -0.25 + 0.5 * v[2] as f64 / res,
        );
        let enc = f.encode(x).unwrap();
        let expect = f.vertex_features(0, v);
        for (a, b) in enc[0..2].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // Center of cell (3, 5, 7).
        let xc = x + Vec3::splat(0.25 / res);
        let enc = f.encode(xc).unwrap();
        let mut mean = [0.0; 2];
        for c in 0..8u32 {
            let vv = [v[0] + (c & 1), v[1] + ((c >> 1) & 1), v[2] + ((c >> 2) & 1)];
            let feat = f.vertex_features(0, vv);
            mean[0] += feat[0] / 8.0;
            mean[1] += feat[1] / 8.0;
        }
        assert!((enc[0] - mean[0]).abs() < 1e-12 && (enc[1] - mean[1]).abs() < 1e-12);
    }

    #[test]
    fn interpolation_is_affine_within_a_cell() {
        let f = warmed(4);
        let a = Vec3::new(0.0123, 0.0102, 0.0103);
        // Stay inside one cell of the finest level along x.
        let b = a + Vec3::new(3e-4, 0.0, 0.0);
        let m = (a + b) * 0.5;
        let (ea, eb, em) = (f.encode(a).unwrap(), f.encode(b).unwrap(), f.encode(m).unwrap());
        for i in 0..ea.len() {
            assert!((em[i] - 0.5 * (ea[i] + eb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_position_derivative_matches_finite_differences() {
        let f = warmed(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 20 {
            let x = random_point(&mut rng, 0.24);
            let (_, jac) = f.encode_with_jacobian(x).unwrap();
            let h = 1e-7;
            for a in 0..3 {
                let mut e = [0.0; 3];
                e[a] = h;
                let e = Vec3::from_array(e);
                let (hi, lo) = (f.encode(x + e).unwrap(), f.encode(x - e).unwrap());
                for i in 0..jac.len() {
                    let fd = (hi[i] - lo[i]) / (2.0 * h);
                    assert!((jac[i][a] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{i} {a}");
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn output_position_jacobian_matches_finite_differences() {
        let f = warmed(6);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let x = random_point(&mut rng, 0.24);
            let (_, jac) = f.query_with_jacobian(x).unwrap();
            for a in 0..3 {
                let h = 1e-7;
                let mut e = [0.0; 3];
                e[a] = h;
                let e = Vec3::from_array(e);
                let hi = f.query(x + e).unwrap().to_array();
                let lo = f.query(x - e).unwrap().to_array();
                for k in 0..4 {
                    let fd = (hi[k] - lo[k]) / (2.0 * h);
                    assert!((jac[k][a] - fd).abs() <= 1e-5 * fd.abs().max(1e-2), "{k} {a}");
                }
            }
            let (out, g) = f.occupancy_with_gradient(x).unwrap();
            assert_eq!(out, f.query(x).unwrap());
            for a in 0..3 {
                assert!((g[a] - jac[0][a]).abs() <= 1e-12 * jac[0][a].abs().max(1.0));
            }
        }
        let outside = Vec3::new(0.3, 0.0, 0.0);
        assert_eq!(f.occupancy_with_gradient(outside).unwrap(), (FieldOutput::EMPTY, [0.0; 3]));
    }

    #[test]
    fn parameter_gradient_spot_check() {
        let mut f = warmed(7);
        let x = Vec3::new(0.031, -0.117, 0.201);
        let tape = Tape::new();
        let mut probe = TrainProbe::new(&f, &tape);
        let out = probe.probe(Vec3::new(0.031, -0.117, 0.201).lift()).unwrap();
        let adj = tape.backward(&[(out[0], 1.0)]).unwrap();
        let mut grad = FieldGrad::new(f.config());
        probe.backward_params(&adj, &mut grad);
        f.accumulate(&grad);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let active: Vec<usize> = grad.feature_index.iter().map(|&i| i as usize).collect();
        for _ in 0..10 {
            // Alternate between touched features and decoder weights.
            let (group, i) = if rng.gen_bool(0.5) {
                (0, active[rng.gen_range(0..active.len())])
            } else {
                let gi = rng.gen_range(1..5);
                (gi, rng.gen_range(0..f.params().groups()[gi].len()))
            };
            let analytic = f.params().groups()[group].grad[i];
            let base = f.params().groups()[group].values[i];
            let mut g = f.clone();
            let func = |p: &[f64]| {
                g.params_mut().groups_mut()[group].values[i] = p[0];
                g.occupancy(x).unwrap()
            };
            let func = std::cell::RefCell::new(func);
            let err = grad_check(|p| (func.borrow_mut())(p), &[base], &[analytic], 1e-6);
            assert!(err < 1e-4, "group {group} index {i}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut f = warmed(8);
        let mut grad = FieldGrad::new(f.config());
        grad.b2[0] = 1.0;
        f.accumulate(&grad);
        f.adam_step(&AdamConfig::with_lr(1e-2));
        let mut buf = Vec::new();
        f.write_to(&mut buf, true).unwrap();
        let g = Field::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(g.params(), f.params());
        assert_eq!(g.aabb(), f.aabb());
        let mut buf2 = Vec::new();
        g.write_to(&mut buf2, true).unwrap();
        assert_eq!(buf, buf2);

        let mut bare = Vec::new();
        f.write_to(&mut bare, false).unwrap();
        let h = Field::read_from(&mut bare.as_slice()).unwrap();
        assert_eq!(h.params().groups()[4].values, f.params().groups()[4].values);
        assert_eq!(h.params().groups()[4].step, 0);

        buf[0] = b'X';
        assert!(matches!(
            Field::read_from(&mut buf.as_slice()),
            Err(FieldError::Checkpoint(_))
        ));
    }

    #[test]
    fn constant_field_behaviour() {
        let c = ConstantField::new(0.5, Aabb::cube(0.25));
        assert_eq!(c.occupancy(Vec3::new(0.1, 0.2, -0.2)).unwrap(), 0.5);
        assert_eq!(c.occupancy(Vec3::new(1.0, 0.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn outputs_stay_strictly_inside_unit_interval() {
        let mut f = warmed(9);
        for v in f.params_mut().groups_mut()[4].values.iter_mut() {
            *v = 1e3;
        }
        let out = f.query(Vec3::ZERO).unwrap().to_array();
        assert!(out.iter().all(|&o| o > 0.0 && o < 1.0));
    }
}
