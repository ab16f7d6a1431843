//! Ray classification, point sampling, volume rendering, losses and the
//! joint field and pose training round.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{AdamConfig, DiffError, DomainError, ParamGroup, Scalar, Tape, Var};
use crate::field::{DenseGrad, Field, FieldError, FieldGrad, OccupancyField, Probe, TrainProbe, ValueProbe};
use crate::geometry::{pixel_to_ray, Aabb, CameraIntrinsics, GeometryError, Pose, Ray, Vec3};
use crate::sensor_sim::ViewCapture;

/// Rays per parallel work item. Fixed so that reductions do not depend on
/// the number of worker threads.
const CHUNK: usize = 64;
/// Work items reduced together.
const WAVE: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum SupervisionError {
    #[error("batch has neither valid nor free rays")]
    EmptyBatch,
    #[error("no training views")]
    NoViews,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// The five ray types, in the order they are tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RayClass {
    NoIntersection,
    NoDepthMeasurement,
    DepthBeyondRange,
    DepthBeyondBox,
    Valid,
}

impl RayClass {
    pub const ALL: [RayClass; 5] = [
        RayClass::NoIntersection,
        RayClass::NoDepthMeasurement,
        RayClass::DepthBeyondRange,
        RayClass::DepthBeyondBox,
        RayClass::Valid,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_free(self) -> bool {
        matches!(self, RayClass::DepthBeyondRange | RayClass::DepthBeyondBox)
    }

    pub fn is_discarded(self) -> bool {
        matches!(self, RayClass::NoIntersection | RayClass::NoDepthMeasurement)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub class: RayClass,
    /// Box entry and exit parameters when the ray meets the box.
    pub span: Option<(f64, f64)>,
}

pub fn classify_ray(ray: &Ray, depth: Option<f64>, aabb: &Aabb, d_max: f64) -> Classification {
    let span = aabb.intersect(ray);
    let class = match (span, depth) {
        (None, _) => RayClass::NoIntersection,
        (Some(_), None) => RayClass::NoDepthMeasurement,
        (Some(_), Some(d)) if d > d_max => RayClass::DepthBeyondRange,
        (Some((_, far)), Some(d)) if d > far => RayClass::DepthBeyondBox,
        _ => RayClass::Valid,
    };
    Classification { class, span }
}

/// One uniform draw in each of `n` equal sub-intervals of `[lo, hi]`.
pub fn sample_free_points(lo: f64, hi: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let step = (hi - lo) / n as f64;
    (0..n)
        .map(|i| lo + (i as f64 + rng.gen::<f64>()) * step)
        .collect()
}

/// Normal draws around the measured depth, clamped to the box span and
/// sorted.
pub fn sample_surface_points(
    depth: f64,
    sigma: f64,
    n: usize,
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut ts: Vec<f64> = match Normal::new(depth, sigma) {
        Ok(normal) if sigma > 0.0 => (0..n).map(|_| normal.sample(rng)).collect(),
        _ => vec![depth; n],
    };
    for t in &mut ts {
        *t = t.clamp(lo, hi);
    }
    ts.sort_by(f64::total_cmp);
    ts
}

/// Rendered color, depth and per-sample weights of one ray.
#[derive(Debug, Clone)]
pub struct Rendered<S> {
    pub color: [S; 3],
    pub depth: S,
    pub weights: Vec<S>,
}

/// Alpha compositing of field samples at ray parameters `ts` (ascending).
/// Transmittance is accumulated as a sum of logarithms.
pub fn render_ray<S: Scalar, P: Probe<S>>(
    probe: &mut P,
    origin: Vec3<S>,
    dir: Vec3<S>,
    ts: &[f64],
) -> Result<Rendered<S>, SupervisionError> {
    let zero = S::constant(0.0);
    let mut color = [zero; 3];
    let mut depth = zero;
    let mut weights = Vec::with_capacity(ts.len());
    let mut log_t = zero;
    let mut blocked = false;
    for (i, &t) in ts.iter().enumerate() {
        let out = probe.probe(origin + dir.scale_f(t))?;
        let trans = if blocked { zero } else { log_t.exp() };
        let w = out[0] * trans;
        for c in 0..3 {
            color[c] = color[c] + w * out[c + 1];
        }
        depth = depth + w * t;
        weights.push(w);
        if i + 1 < ts.len() && !blocked {
            let q = out[0].one_minus();
            if q.value() > 0.0 {
                log_t = log_t + q.ln()?;
            } else {
                blocked = true;
            }
        }
    }
    Ok(Rendered {
        color,
        depth,
        weights,
    })
}

fn default_true() -> bool {
    true
}

/// Reconstruction hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rays_per_iteration: usize,
    pub surface_samples: usize,
    pub free_samples: usize,
    pub sigma_depth: f64,
    pub lambda_depth: f64,
    pub lambda_free: f64,
    pub field_lr: f64,
    pub pose_lr: f64,
    pub iterations: usize,
    pub pose_refinement: bool,
    #[serde(default = "default_true")]
    pub free_supervision: bool,
    /// Depth readings beyond this are treated as out of range.
    pub d_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_iteration: 5000,
            surface_samples: 16,
            free_samples: 16,
            sigma_depth: 0.005,
            lambda_depth: 2.0,
            lambda_free: 0.5,
            field_lr: 2e-3,
            pose_lr: 3e-3,
            iterations: 100,
            pose_refinement: false,
            free_supervision: true,
            d_max: 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SupervisionError> {
        let bad = |m: &str| Err(SupervisionError::Config(m.to_string()));
        if self.rays_per_iteration == 0 || self.surface_samples == 0 || self.free_samples == 0 {
            return bad("ray and sample counts must be positive");
        }
        if !(self.sigma_depth > 0.0) {
            return bad("sigma_depth must be positive");
        }
        if !(self.d_max > 0.0) {
            return bad("d_max must be positive");
        }
        if self.lambda_depth < 0.0 || self.lambda_free < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if !(self.field_lr > 0.0 && self.pose_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// Loss values of one batch and the ray class histogram.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub color: f64,
    pub depth: f64,
    pub free: f64,
    pub total: f64,
    pub class_counts: [usize; 5],
    pub free_points: usize,
}

impl LossReport {
    pub fn combine(color: f64, depth: f64, free: f64, cfg: &TrainConfig) -> f64 {
        color + cfg.lambda_depth * depth + cfg.lambda_free * free
    }
}

/// A training view: the capture plus the pose the reconstructor believes.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub capture: ViewCapture,
    pub pose: Pose,
}

/// A classified ray with its sample parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRay {
    pub view: usize,
    pub pixel: (f64, f64),
    pub class: RayClass,
    pub color: [f64; 3],
    pub depth: f64,
    pub surface_ts: Vec<f64>,
    pub free_ts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<PreparedRay>,
    pub class_counts: [usize; 5],
}

impl RayBatch {
    fn valid_count(&self) -> usize {
        self.class_counts[RayClass::Valid.index()]
    }

    fn free_point_count(&self) -> usize {
        self.rays.iter().map(|r| r.free_ts.len()).sum()
    }
}

/// Classifies and samples one ray through `pixel` of `view`.
pub fn prepare_ray(
    view: usize,
    capture: &ViewCapture,
    pose: &Pose,
    pixel_index: usize,
    aabb: &Aabb,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<PreparedRay, SupervisionError> {
    let (u, v) = capture.intrinsics.pixel_center(pixel_index);
    let ray = pixel_to_ray(&capture.intrinsics, pose, u, v)?;
    let depth = capture.depth[pixel_index];
    let cls = classify_ray(&ray, depth, aabb, cfg.d_max);
    let mut out = PreparedRay {
        view,
        pixel: (u, v),
        class: cls.class,
        color: capture.color[pixel_index],
        depth: depth.unwrap_or(0.0),
        surface_ts: Vec::new(),
        free_ts: Vec::new(),
    };
    let Some((near, far)) = cls.span else {
        return Ok(out);
    };
    if cls.class.is_free() && cfg.free_supervision && far > near {
        out.free_ts = sample_free_points(near, far, cfg.free_samples, rng);
    } else if cls.class == RayClass::Valid {
        let d = out.depth;
        out.surface_ts =
            sample_surface_points(d, cfg.sigma_depth, cfg.surface_samples, near, far, rng);
        let front = d - 3.0 * cfg.sigma_depth;
        if cfg.free_supervision && front > near {
            out.free_ts = sample_free_points(near, front, cfg.free_samples, rng);
        }
    }
    Ok(out)
}

/// Draws rays uniformly over all pixels of all views and prepares them
/// against the given poses.
pub fn sample_batch(
    views: &[TrainView],
    poses: &[Pose],
    aabb: &Aabb,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<RayBatch, SupervisionError> {
    if views.is_empty() {
        return Err(SupervisionError::NoViews);
    }
    let offsets: Vec<usize> = views
        .iter()
        .scan(0, |acc, v| {
            let start = *acc;
            *acc += v.capture.intrinsics.num_pixels();
            Some(start)
        })
        .collect();
    let total: usize = views.iter().map(|v| v.capture.intrinsics.num_pixels()).sum();
    let mut rays = Vec::with_capacity(cfg.rays_per_iteration);
    let mut class_counts = [0usize; 5];
    for _ in 0..cfg.rays_per_iteration {
        let k = rng.gen_range(0..total);
        let view = offsets.partition_point(|&o| o <= k) - 1;
        let ray = prepare_ray(
            view,
            &views[view].capture,
            &poses[view],
            k - offsets[view],
            aabb,
            cfg,
            rng,
        )?;
        class_counts[ray.class.index()] += 1;
        if !ray.class.is_discarded() && !(ray.class.is_free() && ray.free_ts.is_empty()) {
            rays.push(ray);
        }
    }
    Ok(RayBatch { rays, class_counts })
}

/// Scale factors turning per-ray sums into the batch loss.
#[derive(Debug, Clone, Copy)]
struct Coefficients {
    color: f64,
    depth: f64,
    free: f64,
}

impl Coefficients {
    fn new(batch: &RayBatch, cfg: &TrainConfig) -> Result<Self, SupervisionError> {
        let n_valid = batch.valid_count();
        let n_free = batch.free_point_count();
        if n_valid == 0 && n_free == 0 {
            return Err(SupervisionError::EmptyBatch);
        }
        let per = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Ok(Self {
            color: per(n_valid),
            depth: cfg.lambda_depth * per(n_valid),
            free: cfg.lambda_free * per(n_free),
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Terms {
    color: f64,
    depth: f64,
    free: f64,
}

impl Terms {
    fn add(&mut self, o: &Terms) {
        self.color += o.color;
        self.depth += o.depth;
        self.free += o.free;
    }
}

/// Weighted loss contribution of one ray.
fn ray_objective<S: Scalar, P: Probe<S>>(
    probe: &mut P,
    origin: Vec3<S>,
    dir: Vec3<S>,
    ray: &PreparedRay,
    coef: &Coefficients,
) -> Result<(S, Terms), SupervisionError> {
    let mut total = S::constant(0.0);
    let mut terms = Terms::default();
    if ray.class == RayClass::Valid {
        let r = render_ray(probe, origin, dir, &ray.surface_ts)?;
        let mut sq = S::constant(0.0);
        for c in 0..3 {
            let e = r.color[c] - ray.color[c];
            sq = sq + e * e;
        }
        let abs = (r.depth - ray.depth).abs();
        total = total + sq * coef.color + abs * coef.depth;
        terms.color = sq.value();
        terms.depth = abs.value();
    }
    for &t in &ray.free_ts {
        let o = probe.probe(origin + dir.scale_f(t))?[0];
        let nll = -(o.one_minus().ln()?);
        total = total + nll * coef.free;
        terms.free += nll.value();
    }
    Ok((total, terms))
}

fn ray_frame<S: Scalar>(pose: &Pose<S>, intr: &CameraIntrinsics, pixel: (f64, f64)) -> (Vec3<S>, Vec3<S>) {
    (pose.translation, pose.rotate_f(intr.camera_dir(pixel.0, pixel.1)))
}

fn report(batch: &RayBatch, terms: &Terms, cfg: &TrainConfig) -> LossReport {
    let n_valid = batch.valid_count();
    let n_free = batch.free_point_count();
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let color = mean(terms.color, n_valid);
    let depth = mean(terms.depth, n_valid);
    let free = mean(terms.free, n_free);
    LossReport {
        color,
        depth,
        free,
        total: LossReport::combine(color, depth, free, cfg),
        class_counts: batch.class_counts,
        free_points: n_free,
    }
}

/// Loss of a prepared batch under fixed poses, without gradients.
pub fn compute_losses<F: OccupancyField + ?Sized>(
    field: &F,
    views: &[TrainView],
    poses: &[Pose],
    batch: &RayBatch,
    cfg: &TrainConfig,
) -> Result<LossReport, SupervisionError> {
    let coef = Coefficients::new(batch, cfg)?;
    let mut terms = Terms::default();
    let mut probe = ValueProbe(field);
    for ray in &batch.rays {
        let (o, d) = ray_frame(&poses[ray.view], &views[ray.view].capture.intrinsics, ray.pixel);
        let (_, t) = ray_objective(&mut probe, o, d, ray, &coef)?;
        terms.add(&t);
    }
    Ok(report(batch, &terms, cfg))
}

struct ChunkOut {
    grad: FieldGrad,
    twist_grad: Vec<f64>,
    terms: Terms,
}

/// Loss of a prepared batch with gradients.
///
/// Field gradients are added to `grad`. When `twists` is given (six entries
/// per view, rotation first), each view's pose is `exp(twist) ∘ pose` and
/// the twist gradient is returned; view 0 is never differentiated.
pub fn loss_and_grad(
    field: &Field,
    views: &[TrainView],
    poses: &[Pose],
    twists: Option<&[f64]>,
    batch: &RayBatch,
    cfg: &TrainConfig,
    grad: &mut DenseGrad,
) -> Result<(LossReport, Vec<f64>), SupervisionError> {
    let coef = Coefficients::new(batch, cfg)?;
    let n_tw = 6 * views.len();
    let mut terms = Terms::default();
    let mut twist_grad = vec![0.0; n_tw];
    let chunks: Vec<&[PreparedRay]> = batch.rays.chunks(CHUNK).collect();
    for wave in chunks.chunks(WAVE) {
        let outs: Vec<Result<ChunkOut, SupervisionError>> = wave
            .par_iter()
            .map(|rays| {
                let mut out = ChunkOut {
                    grad: FieldGrad::new(field.config()),
                    twist_grad: vec![0.0; n_tw],
                    terms: Terms::default(),
                };
                let mut tape = Tape::new();
                for ray in rays.iter() {
                    tape.reset();
                    ray_grad(field, views, poses, twists, ray, &coef, &tape, &mut out)?;
                }
                Ok(out)
            })
            .collect();
        for out in outs {
            let out = out?;
            grad.add(&out.grad);
            for (a, b) in twist_grad.iter_mut().zip(&out.twist_grad) {
                *a += b;
            }
            terms.add(&out.terms);
        }
    }
    Ok((report(batch, &terms, cfg), twist_grad))
}

#[allow(clippy::too_many_arguments)]
fn ray_grad<'t>(
    field: &Field,
    views: &[TrainView],
    poses: &[Pose],
    twists: Option<&[f64]>,
    ray: &PreparedRay,
    coef: &Coefficients,
    tape: &'t Tape,
    out: &mut ChunkOut,
) -> Result<(), SupervisionError> {
    let v = ray.view;
    let base = poses[v].lift::<Var<'t>>();
    let (pose, leaves) = match twists {
        Some(tw) if v > 0 => {
            let leaves: [Var<'t>; 6] = std::array::from_fn(|k| tape.leaf(tw[6 * v + k]));
            (base.apply_twist(&leaves), Some(leaves))
        }
        Some(tw) => {
            let fixed: [Var<'t>; 6] = std::array::from_fn(|k| Var::constant(tw[6 * v + k]));
            (base.apply_twist(&fixed), None)
        }
        None => (base, None),
    };
    let (o, d) = ray_frame(&pose, &views[v].capture.intrinsics, ray.pixel);
    let mut probe = TrainProbe::new(field, tape);
    let (obj, terms) = ray_objective(&mut probe, o, d, ray, coef)?;
    out.terms.add(&terms);
    if obj.is_constant() {
        return Ok(());
    }
    let adj = tape.backward(&[(obj, 1.0)])?;
    probe.backward_params(&adj, &mut out.grad);
    if let Some(leaves) = leaves {
        for (k, l) in leaves.iter().enumerate() {
            out.twist_grad[6 * v + k] += adj.get(*l);
        }
    }
    Ok(())
}

/// Effective poses `exp(twist_v) ∘ pose_v`.
pub fn twisted_poses(views: &[TrainView], twists: &[f64]) -> Vec<Pose> {
    views
        .iter()
        .enumerate()
        .map(|(v, view)| {
            let tw: [f64; 6] = std::array::from_fn(|k| twists[6 * v + k]);
            view.pose.apply_twist(&tw)
        })
        .collect()
}

/// Runs `cfg.iterations` joint optimization steps over all views and folds
/// the learned pose corrections into the stored poses.
pub fn train_round(
    field: &mut Field,
    views: &mut [TrainView],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<LossReport>, SupervisionError> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(SupervisionError::NoViews);
    }
    let aabb = field.aabb();
    let field_adam = AdamConfig::with_lr(cfg.field_lr);
    let pose_adam = AdamConfig::with_lr(cfg.pose_lr);
    let mut twists = ParamGroup::new("twists", vec![0.0; 6 * views.len()]);
    let stored: Vec<Pose> = views.iter().map(|v| v.pose).collect();
    let mut grad = DenseGrad::zeros(field);
    let mut reports = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let poses = if cfg.pose_refinement {
            twisted_poses(views, &twists.values)
        } else {
            stored.clone()
        };
        let batch = sample_batch(views, &poses, &aabb, cfg, rng)?;
        grad.clear();
        let tw = cfg.pose_refinement.then_some(&twists.values[..]);
        let (rep, tgrad) = loss_and_grad(field, views, &stored, tw, &batch, cfg, &mut grad)?;
        field.accumulate_dense(&grad);
        field.adam_step(&field_adam);
        if cfg.pose_refinement {
            twists.grad.copy_from_slice(&tgrad);
            twists.grad[..6].iter_mut().for_each(|g| *g = 0.0);
            twists.adam_step(&pose_adam);
        }
        reports.push(rep);
    }
    if cfg.pose_refinement {
        let folded = twisted_poses(views, &twists.values);
        for (v, p) in views.iter_mut().zip(folded) {
            v.pose = p;
        }
    }
    Ok(reports)
}

/// Renders the field through every pixel with `samples` evenly spaced
/// points across the box; pixels whose ray misses the box get depth `None`.
pub fn render_field_view<F: OccupancyField + ?Sized>(
    field: &F,
    pose: &Pose,
    intr: &CameraIntrinsics,
    samples: usize,
) -> Result<(Vec<[f64; 3]>, Vec<Option<f64>>), SupervisionError> {
    let aabb = field.aabb();
    let px: Vec<([f64; 3], Option<f64>)> = (0..intr.num_pixels())
        .into_par_iter()
        .map(|i| {
            let (u, v) = intr.pixel_center(i);
            let ray = pixel_to_ray(intr, pose, u, v)?;
            let Some((near, far)) = aabb.intersect(&ray) else {
                return Ok(([0.0; 3], None));
            };
            let step = (far - near) / samples as f64;
            let ts: Vec<f64> = (0..samples).map(|k| near + (k as f64 + 0.5) * step).collect();
            let r = render_ray(&mut ValueProbe(field), ray.origin, ray.dir, &ts)?;
            let acc: f64 = r.weights.iter().sum();
            let depth = (acc > 0.5).then(|| r.depth / acc);
            Ok((r.color, depth))
        })
        .collect::<Result<_, SupervisionError>>()?;
    Ok(px.into_iter().unzip())
}
