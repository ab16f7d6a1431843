//! View information, the top-N_t criterion, movement cost and the
//! next-best-view planners.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{AdamConfig, DiffError, DomainError, Dual, ParamGroup, Scalar, Tape};
use crate::field::{DualProbe, FieldError, OccupancyField, Probe, ValueProbe};
use crate::geometry::{
    great_circle_angle, look_at_sphere, pixel_to_ray, Aabb, CameraIntrinsics, GeometryError,
    Pose, SphericalView, Vec3, ViewManifold,
};

#[derive(Debug, thiserror::Error)]
pub enum NbvError {
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("invalid planner configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Movement cost weights. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub lambda_dist: f64,
    pub lambda_ground: f64,
    pub ground_margin: f64,
    pub ground_softness: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_dist: 0.0,
            lambda_ground: 0.5,
            ground_margin: (-8f64).to_radians(),
            ground_softness: 2f64.to_radians(),
        }
    }
}

/// Starting point of the gradient ascent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Best of `init_samples` uniform draws.
    #[default]
    Sampling,
    /// The current view.
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NbvConfig {
    pub init: InitStrategy,
    pub eval_rays: usize,
    pub points_per_ray: usize,
    pub init_samples: usize,
    pub lr: f64,
    pub iterations: usize,
    pub min_ratio: f64,
    pub smoothing_window: usize,
    pub cost: CostWeights,
    pub manifold: ViewManifold,
    pub candidate_azimuths: usize,
    pub candidate_elevations: usize,
}

impl Default for NbvConfig {
    fn default() -> Self {
        Self {
            init: InitStrategy::Sampling,
            eval_rays: 5000,
            points_per_ray: 16,
            init_samples: 48,
            lr: 1e-2,
            iterations: 100,
            min_ratio: 0.05,
            smoothing_window: 5,
            cost: CostWeights::default(),
            manifold: ViewManifold::default(),
            candidate_azimuths: 12,
            candidate_elevations: 4,
        }
    }
}

impl NbvConfig {
    pub fn validate(&self) -> Result<(), NbvError> {
        let bad = |m: &str| Err(NbvError::Config(m.to_string()));
        if self.eval_rays == 0 || self.points_per_ray == 0 || self.init_samples == 0 {
            return bad("ray, point and sample counts must be positive");
        }
        if self.smoothing_window == 0 {
            return bad("smoothing_window must be positive");
        }
        if self.candidate_azimuths == 0 || self.candidate_elevations == 0 {
            return bad("candidate grid must be nonempty");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.min_ratio > 0.0 && self.min_ratio <= 1.0) {
            return bad("min_ratio must lie in (0, 1]");
        }
        if !(self.cost.ground_softness > 0.0) {
            return bad("ground_softness must be positive");
        }
        if self.cost.lambda_dist < 0.0 || self.cost.lambda_ground < 0.0 {
            return bad("cost weights must be non-negative");
        }
        self.manifold.validate()?;
        Ok(())
    }

    /// Dome grid: azimuths evenly around the circle, elevations at the
    /// midpoints of equal bands between the bounds.
    pub fn candidate_grid(&self) -> Vec<SphericalView> {
        let m = &self.manifold;
        let band = (m.elevation_max - m.elevation_min) / self.candidate_elevations as f64;
        let mut out = Vec::with_capacity(self.candidate_azimuths * self.candidate_elevations);
        for j in 0..self.candidate_elevations {
            let el = m.elevation_min + (j as f64 + 0.5) * band;
            for i in 0..self.candidate_azimuths {
                let az = std::f64::consts::TAU * i as f64 / self.candidate_azimuths as f64;
                out.push(m.view(az, el));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlannerMethod {
    Optimized,
    Candidate,
    Random,
    SumMetric,
}

impl PlannerMethod {
    pub const ALL: [PlannerMethod; 4] = [
        PlannerMethod::Optimized,
        PlannerMethod::Candidate,
        PlannerMethod::Random,
        PlannerMethod::SumMetric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlannerMethod::Optimized => "optimized",
            PlannerMethod::Candidate => "candidate",
            PlannerMethod::Random => "random",
            PlannerMethod::SumMetric => "sum-metric",
        }
    }
}

impl fmt::Display for PlannerMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlannerMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown planner method `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub azimuth: f64,
    pub elevation: f64,
    pub information: f64,
    pub cost: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbvResult {
    pub view: SphericalView,
    pub pose: Pose,
    pub utility: f64,
    pub information: f64,
    pub cost: f64,
    pub trace: Vec<TraceRow>,
    pub method: PlannerMethod,
}

/// Binary entropy in nats. Zero at the endpoints.
pub fn point_entropy<S: Scalar>(o: S) -> S {
    -(xlnx(o) + xlnx(o.one_minus()))
}

fn xlnx<S: Scalar>(x: S) -> S {
    if x.value() <= 0.0 {
        S::constant(0.0)
    } else {
        x * x.ln().expect("positive")
    }
}

/// `round(n_e · clamp(cos(π n_v / 20), min_ratio, 1))`, at least 1.
pub fn schedule_nt(n_views: usize, n_e: usize, min_ratio: f64) -> usize {
    let ratio = (std::f64::consts::PI * n_views as f64 / 20.0)
        .cos()
        .clamp(min_ratio, 1.0);
    ((n_e as f64 * ratio).round() as usize).clamp(1, n_e.max(1))
}

/// Distance and ground-avoidance penalty of moving to `(azimuth, elevation)`.
pub fn movement_cost<S: Scalar>(
    azimuth: S,
    elevation: S,
    current: &SphericalView,
    w: &CostWeights,
) -> S {
    let dist = great_circle_angle(
        azimuth,
        elevation,
        S::constant(current.azimuth),
        S::constant(current.elevation),
    );
    let ground = ((S::constant(w.ground_margin) - elevation) / w.ground_softness).softplus();
    dist * w.lambda_dist + ground * w.lambda_ground
}

/// Evaluation pixels and per-point stratum offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRays {
    pub pixels: Vec<(f64, f64)>,
    pub jitter: Vec<f64>,
    pub points_per_ray: usize,
}

/// Evaluation rays with sample parameters fixed in advance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenRays {
    pub pixels: Vec<(f64, f64)>,
    pub ts: Vec<Option<Vec<f64>>>,
    pub points_per_ray: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum Samples<'a> {
    /// Parameters stratified over each ray's current box span.
    Stratified(&'a EvalRays),
    Frozen(&'a FrozenRays),
}

impl Samples<'_> {
    fn len(&self) -> usize {
        match self {
            Samples::Stratified(r) => r.pixels.len(),
            Samples::Frozen(r) => r.pixels.len(),
        }
    }

    fn points_per_ray(&self) -> usize {
        match self {
            Samples::Stratified(r) => r.points_per_ray,
            Samples::Frozen(r) => r.points_per_ray,
        }
    }

    fn pixel(&self, i: usize) -> (f64, f64) {
        match self {
            Samples::Stratified(r) => r.pixels[i],
            Samples::Frozen(r) => r.pixels[i],
        }
    }

    fn ts(&self, i: usize, span: Option<(f64, f64)>) -> Option<Vec<f64>> {
        match self {
            Samples::Stratified(r) => span.map(|(near, far)| r.stratify(i, near, far, 0.0)),
            Samples::Frozen(r) => r.ts[i].clone(),
        }
    }
}

impl EvalRays {
    pub fn draw(intr: &CameraIntrinsics, n_e: usize, n_p: usize, rng: &mut impl Rng) -> Self {
        let n_px = intr.num_pixels();
        let pixels = (0..n_e)
            .map(|_| intr.pixel_center(rng.gen_range(0..n_px)))
            .collect();
        let jitter = (0..n_e * n_p).map(|_| rng.gen::<f64>()).collect();
        Self {
            pixels,
            jitter,
            points_per_ray: n_p,
        }
    }

    fn stratify(&self, i: usize, near: f64, far: f64, inset: f64) -> Vec<f64> {
        let (lo, hi) = (near + inset, far - inset);
        let n = self.points_per_ray;
        let step = (hi - lo) / n as f64;
        (0..n)
            .map(|k| lo + (k as f64 + self.jitter[i * n + k]) * step)
            .collect()
    }

    /// Fixes sample parameters for `pose`, shrinking each span by `inset` at
    /// both ends so that small pose changes keep the points in the box.
    pub fn freeze(
        &self,
        intr: &CameraIntrinsics,
        pose: &Pose,
        aabb: &Aabb,
        inset: f64,
    ) -> Result<FrozenRays, GeometryError> {
        let ts = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &(u, v))| {
                let ray = pixel_to_ray(intr, pose, u, v)?;
                Ok(aabb
                    .intersect(&ray)
                    .filter(|(n, f)| f - n > 2.0 * inset)
                    .map(|(n, f)| self.stratify(i, n, f, inset)))
            })
            .collect::<Result<_, GeometryError>>()?;
        Ok(FrozenRays {
            pixels: self.pixels.clone(),
            ts,
            points_per_ray: self.points_per_ray,
        })
    }
}

/// Occlusion-weighted entropy summed along one ray.
pub fn ray_information<S: Scalar, P: Probe<S>>(
    probe: &mut P,
    origin: Vec3<S>,
    dir: Vec3<S>,
    ts: &[f64],
) -> Result<S, FieldError> {
    let mut trans = S::constant(1.0);
    let mut sum = S::constant(0.0);
    for &t in ts {
        let o = probe.probe(origin + dir.scale_f(t))?[0];
        sum = sum + trans * point_entropy(o);
        trans = trans * o.one_minus();
    }
    Ok(sum)
}

/// Per-ray information sums under a fixed pose.
pub fn per_ray_information<F: OccupancyField + ?Sized>(
    field: &F,
    pose: &Pose,
    intr: &CameraIntrinsics,
    samples: Samples<'_>,
) -> Result<Vec<f64>, NbvError> {
    let aabb = field.aabb();
    (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let (u, v) = samples.pixel(i);
            let ray = pixel_to_ray(intr, pose, u, v)?;
            match samples.ts(i, aabb.intersect(&ray)) {
                Some(ts) => Ok(ray_information(&mut ValueProbe(field), ray.origin, ray.dir, &ts)?),
                None => Ok(0.0),
            }
        })
        .collect()
}

/// Indices of the `n_t` largest values, ties broken by lower index,
/// returned in ascending index order.
pub fn top_indices(values: &[f64], n_t: usize) -> Vec<usize> {
    let n_t = n_t.min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    if n_t < values.len() {
        order.select_nth_unstable_by(n_t, |&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        order.truncate(n_t);
    }
    order.sort_unstable();
    order
}

/// Mean of the `n_t` largest per-ray sums, per sample point.
pub fn top_nt_information(sums: &[f64], n_t: usize, points_per_ray: usize) -> f64 {
    let idx = top_indices(sums, n_t);
    let total: f64 = idx.iter().map(|&i| sums[i]).sum();
    total / (idx.len() * points_per_ray) as f64
}

/// View information at `view` and its gradient with respect to
/// `(azimuth, elevation)`. Sample parameters are held constant.
///
/// When fewer than half of the rays are selected, a value-only pass ranks
/// them first and only the selected rays are differentiated.
pub fn information_with_grad<F: OccupancyField + ?Sized>(
    field: &F,
    view: &SphericalView,
    intr: &CameraIntrinsics,
    samples: Samples<'_>,
    n_t: usize,
) -> Result<(f64, [f64; 2]), NbvError> {
    let aabb = field.aabb();
    let value_pose = view.pose()?;
    let az = Dual::<2>::seed(view.azimuth, 0);
    let el = Dual::<2>::seed(view.elevation, 1);
    let pose: Pose<Dual<2>> = look_at_sphere(az, el, view.radius, view.center)?;
    let ray_dual = |i: usize| -> Result<Dual<2>, NbvError> {
        let (u, v) = samples.pixel(i);
        let ray = pixel_to_ray(intr, &value_pose, u, v)?;
        let Some(ts) = samples.ts(i, aabb.intersect(&ray)) else {
            return Ok(Dual::constant(0.0));
        };
        let dir = pose.rotate_f(intr.camera_dir(u, v));
        Ok(ray_information(&mut DualProbe(field), pose.translation, dir, &ts)?)
    };
    let (sums, idx, grads): (Vec<f64>, Vec<usize>, Vec<[f64; 2]>) = if 2 * n_t >= samples.len() {
        let all: Vec<Dual<2>> = (0..samples.len())
            .into_par_iter()
            .map(ray_dual)
            .collect::<Result<_, NbvError>>()?;
        let sums: Vec<f64> = all.iter().map(|s| s.v).collect();
        let idx = top_indices(&sums, n_t);
        let grads = idx.iter().map(|&i| all[i].d).collect();
        (sums, idx, grads)
    } else {
        let sums = per_ray_information(field, &value_pose, intr, samples)?;
        let idx = top_indices(&sums, n_t);
        let grads = idx
            .par_iter()
            .map(|&i| Ok(ray_dual(i)?.d))
            .collect::<Result<_, NbvError>>()?;
        (sums, idx, grads)
    };
    let norm = (idx.len() * samples.points_per_ray()) as f64;
    let total: f64 = idx.iter().map(|&i| sums[i]).sum();
    let grad = grads.iter().fold([0.0; 2], |g, d| [g[0] + d[0], g[1] + d[1]]);
    Ok((total / norm, [grad[0] / norm, grad[1] / norm]))
}

/// Draws fresh evaluation rays and returns the top-`n_t` information of
/// `pose`.
pub fn view_information<F: OccupancyField + ?Sized>(
    field: &F,
    pose: &Pose,
    intr: &CameraIntrinsics,
    cfg: &NbvConfig,
    n_t: usize,
    rng: &mut impl Rng,
) -> Result<f64, NbvError> {
    let rays = EvalRays::draw(intr, cfg.eval_rays, cfg.points_per_ray, rng);
    let sums = per_ray_information(field, pose, intr, Samples::Stratified(&rays))?;
    Ok(top_nt_information(&sums, n_t, cfg.points_per_ray))
}

fn evaluate<F: OccupancyField + ?Sized>(
    field: &F,
    view: &SphericalView,
    current: &SphericalView,
    intr: &CameraIntrinsics,
    cfg: &NbvConfig,
    rays: &EvalRays,
    n_t: usize,
    iteration: usize,
) -> Result<TraceRow, NbvError> {
    let sums = per_ray_information(field, &view.pose()?, intr, Samples::Stratified(rays))?;
    let information = top_nt_information(&sums, n_t, cfg.points_per_ray);
    let cost = movement_cost(view.azimuth, view.elevation, current, &cfg.cost);
    Ok(TraceRow {
        iteration,
        azimuth: view.azimuth,
        elevation: view.elevation,
        information,
        cost,
        utility: information - cost,
    })
}

fn argmax_first(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn result_from(
    view: SphericalView,
    row: &TraceRow,
    trace: Vec<TraceRow>,
    method: PlannerMethod,
) -> Result<NbvResult, NbvError> {
    Ok(NbvResult {
        pose: view.pose()?,
        view,
        utility: row.utility,
        information: row.information,
        cost: row.cost,
        trace,
        method,
    })
}

/// Scores `views` on one shared set of evaluation rays and returns the best
/// (lowest index on ties).
pub fn select_best<F: OccupancyField + ?Sized>(
    field: &F,
    views: &[SphericalView],
    current: &SphericalView,
    intr: &CameraIntrinsics,
    cfg: &NbvConfig,
    n_t: usize,
    method: PlannerMethod,
    rng: &mut impl Rng,
) -> Result<NbvResult, NbvError> {
    if views.is_empty() {
        return Err(NbvError::EmptyCandidates);
    }
    let rays = EvalRays::draw(intr, cfg.eval_rays, cfg.points_per_ray, rng);
    let trace = views
        .iter()
        .enumerate()
        .map(|(i, v)| evaluate(field, v, current, intr, cfg, &rays, n_t, i))
        .collect::<Result<Vec<_>, _>>()?;
    let best = argmax_first(trace.iter().map(|r| r.utility)).expect("nonempty");
    let row = trace[best];
    result_from(views[best], &row, trace, method)
}

/// Uniform samples over the manifold bounds.
pub fn sample_manifold(m: &ViewManifold, n: usize, rng: &mut impl Rng) -> Vec<SphericalView> {
    (0..n)
        .map(|_| {
            let az = rng.gen_range(0.0..std::f64::consts::TAU);
            let el = if m.elevation_max > m.elevation_min {
                rng.gen_range(m.elevation_min..=m.elevation_max)
            } else {
                m.elevation_min
            };
            m.view(az, el)
        })
        .collect()
}

pub fn initialize_by_sampling<F: OccupancyField + ?Sized>(
    field: &F,
    current: &SphericalView,
    intr: &CameraIntrinsics,
    cfg: &NbvConfig,
    n_t: usize,
    rng: &mut impl Rng,
) -> Result<NbvResult, NbvError> {
    let views = sample_manifold(&cfg.manifold, cfg.init_samples, rng);
    select_best(field, &views, current, intr, cfg, n_t, PlannerMethod::Optimized, rng)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sampling initialization followed by adaptive-moment ascent on the
/// utility, with fresh evaluation rays at every iterate.
pub fn optimize_nbv<F: OccupancyField + ?Sized>(
    field: &F,
    current: &SphericalView,
    intr: &CameraIntrinsics,
    cfg: &NbvConfig,
    n_t: usize,
    method: PlannerMethod,
    rng: &mut impl Rng,
) -> Result<NbvResult, NbvError> {
    cfg.validate()?;
    let init = match cfg.init {
        InitStrategy::Sampling => initialize_by_sampling(field, current, intr, cfg, n_t, rng)?,
        InitStrategy::Current => {
            let rays = EvalRays::draw(intr, cfg.eval_rays, cfg.points_per_ray, rng);
            let row = evaluate(field, current, current, intr, cfg, &rays, n_t, 0)?;
            result_from(*current, &row, vec![row], method)?
        }
    };
    let m = &cfg.manifold;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut params = ParamGroup::new("view", vec![init.view.azimuth, init.view.elevation]);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut iterates = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let view = m.view(params.values[0], params.values[1]);
        let rays = EvalRays::draw(intr, cfg.eval_rays, cfg.points_per_ray, rng);
        let (information, gi) =
            information_with_grad(field, &view, intr, Samples::Stratified(&rays), n_t)?;
        let tape = Tape::new();
        let (az, el) = (tape.leaf(view.azimuth), tape.leaf(view.elevation));
        let c = movement_cost(az, el, current, &cfg.cost);
        let gc = if c.is_constant() {
            [0.0; 2]
        } else {
            let adj = tape.backward(&[(c, 1.0)])?;
            [adj.get(az), adj.get(el)]
        };
        trace.push(TraceRow {
            iteration: it,
            azimuth: view.azimuth,
            elevation: view.elevation,
            information,
            cost: c.value(),
            utility: information - c.value(),
        });
        iterates.push(view);
        params.grad = vec![gc[0] - gi[0], gc[1] - gi[1]];
        params.adam_step(&adam);
        let p = m.project(params.values[0], params.values[1]);
        params.values = vec![p.azimuth, p.elevation];
    }
    if trace.is_empty() {
        return Ok(NbvResult { method, ..init });
    }
    let w = cfg.smoothing_window;
    let smoothed: Vec<f64> = (0..trace.len())
        .map(|k| {
            let lo = (k + 1).saturating_sub(w);
            median(&trace[lo..=k].iter().map(|r| r.utility).collect::<Vec<_>>())
        })
        .collect();
    let best = argmax_first(smoothed).expect("nonempty");
    let row = trace[best];
    result_from(iterates[best], &row, trace, method)
}

/// Uniform view on the manifold. The utility fields are evaluated for
/// reporting only.
pub fn baseline_random<F: OccupancyField + ?Sized>(
    field: &F,
    current: &SphericalView,
    intr: &CameraIntrinsics,
    cfg: &NbvConfig,
    n_t: usize,
    rng: &mut impl Rng,
) -> Result<NbvResult, NbvError> {
    let view = sample_manifold(&cfg.manifold, 1, rng)[0];
    let rays = EvalRays::draw(intr, cfg.eval_rays, cfg.points_per_ray, rng);
    let row = evaluate(field, &view, current, intr, cfg, &rays, n_t, 0)?;
    result_from(view, &row, vec![row], PlannerMethod::Random)
}

pub fn baseline_candidate_selection<F: OccupancyField + ?Sized>(
    field: &F,
    candidates: &[SphericalView],
    current: &SphericalView,
    intr: &CameraIntrinsics,
    cfg: &NbvConfig,
    n_t: usize,
    rng: &mut impl Rng,
) -> Result<NbvResult, NbvError> {
    select_best(field, candidates, current, intr, cfg, n_t, PlannerMethod::Candidate, rng)
}

/// Plans the next view with `method` after `n_views` captures.
pub fn plan<F: OccupancyField + ?Sized>(
    method: PlannerMethod,
    field: &F,
    current: &SphericalView,
    n_views: usize,
    intr: &CameraIntrinsics,
    cfg: &NbvConfig,
    rng: &mut impl Rng,
) -> Result<NbvResult, NbvError> {
    cfg.validate()?;
    let n_t = schedule_nt(n_views, cfg.eval_rays, cfg.min_ratio);
    match method {
        PlannerMethod::Optimized => optimize_nbv(field, current, intr, cfg, n_t, method, rng),
        PlannerMethod::SumMetric => {
            optimize_nbv(field, current, intr, cfg, cfg.eval_rays, method, rng)
        }
        PlannerMethod::Candidate => {
            let grid = cfg.candidate_grid();
            baseline_candidate_selection(field, &grid, current, intr, cfg, n_t, rng)
        }
        PlannerMethod::Random => baseline_random(field, current, intr, cfg, n_t, rng),
    }
}
