//! Synthetic RGB-D sensor: analytic signed-distance scenes rendered by
//! sphere tracing.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{pixel_to_ray, Aabb, CameraIntrinsics, GeometryError, Pose, Ray, Vec3};

pub const TRACE_TOL: f64 = 1e-5;
pub const MAX_TRACE_STEPS: usize = 256;
/// Sensor measurement range.
pub const DEFAULT_SENSOR_RANGE: f64 = 8.0;
pub const DEFAULT_ROOM_RADIUS: f64 = 4.0;
pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];
const AMBIENT: f64 = 0.35;
const LIGHT_DIR: [f64; 3] = [0.3, -0.4, 0.866];

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("unknown scene `{0}` (expected sphere, blob, barbell or torus-box)")]
    UnknownScene(String),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("scene file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Shape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Box {
        center: Vec3,
        half_extents: Vec3,
    },
    /// Ring in a plane of constant z.
    Torus {
        center: Vec3,
        major_radius: f64,
        minor_radius: f64,
    },
}

impl Shape {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Box {
                center,
                half_extents,
            } => {
                let d = p - center;
                let q = Vec3::new(d.x.abs(), d.y.abs(), d.z.abs()) - half_extents;
                q.max_elem(Vec3::ZERO).norm() + q.x.max(q.y).max(q.z).min(0.0)
            }
            Shape::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let d = p - center;
                let ring = (d.x * d.x + d.y * d.y).sqrt() - major_radius;
                (ring * ring + d.z * d.z).sqrt() - minor_radius
            }
        }
    }

    /// Axis-aligned bounds of the solid.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Shape::Sphere { center, radius } => {
                (center - Vec3::splat(radius), center + Vec3::splat(radius))
            }
            Shape::Box {
                center,
                half_extents,
            } => (center - half_extents, center + half_extents),
            Shape::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let r = major_radius + minor_radius;
                let e = Vec3::new(r, r, minor_radius);
                (center - e, center + e)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UnionMode {
    #[default]
    Hard,
    /// Polynomial smooth minimum with blending radius `blend`.
    Smooth,
}

/// Scene description, also the on-disk format (TOML):
///
/// ```toml
/// union = "smooth"        # "hard" (default) or "smooth"
/// blend = 0.04            # smooth-union radius, meters
/// box_min = [-0.25, -0.25, -0.25]
/// box_max = [0.25, 0.25, 0.25]
/// ground = -0.4           # optional plane z = ground, must lie below the box
/// room = 4.0              # optional enclosing sphere radius, must contain the box
///
/// [[primitive]]
/// type = "sphere"         # "sphere", "box" or "torus"
/// center = [0.0, 0.0, 0.0]
/// radius = 0.15           # box: half_extents = [..]; torus: major_radius, minor_radius
/// albedo = [0.8, 0.4, 0.3]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfScene {
    #[serde(default)]
    pub union: UnionMode,
    #[serde(default)]
    pub blend: f64,
    pub box_min: Vec3,
    pub box_max: Vec3,
    #[serde(default)]
    pub ground: Option<f64>,
    /// Radius of a spherical enclosure centered at the origin. Its walls
    /// return depth readings beyond the reconstruction range.
    #[serde(default)]
    pub room: Option<f64>,
    #[serde(rename = "primitive")]
    pub primitives: Vec<Primitive>,
}

fn smin(a: f64, b: f64, k: f64) -> (f64, f64) {
    // Returns the blended distance and the weight of `b`.
    if k <= 0.0 {
        return if a <= b { (a, 0.0) } else { (b, 1.0) };
    }
    let h = (0.5 + 0.5 * (a - b) / k).clamp(0.0, 1.0);
    (b * h + a * (1.0 - h) - k * h * (1.0 - h), h)
}

impl SdfScene {
    pub fn aabb(&self) -> Aabb {
        Aabb {
            min: self.box_min,
            max: self.box_max,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let aabb = Aabb::new(self.box_min, self.box_max)?;
        if self.primitives.is_empty() {
            return Err(SceneError::Invalid("no primitives".into()));
        }
        if self.blend < 0.0 {
            return Err(SceneError::Invalid("blend must be non-negative".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let (lo, hi) = p.shape.bounds();
            if !(aabb.contains(lo, 0.0) && aabb.contains(hi, 0.0)) {
                return Err(SceneError::Invalid(format!(
                    "primitive {i} does not fit inside the box"
                )));
            }
            if p.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(SceneError::Invalid(format!("primitive {i}: albedo outside [0, 1]")));
            }
        }
        if let Some(g) = self.ground {
            if g >= self.box_min.z {
                return Err(SceneError::Invalid("ground plane must lie below the box".into()));
            }
        }
        if let Some(r) = self.room {
            let corner = self.box_min.abs_max(self.box_max);
            if r <= corner.norm() {
                return Err(SceneError::Invalid("room must enclose the box".into()));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SceneError> {
        let s: SdfScene = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    /// Built-in benchmark scene by name.
    pub fn builtin(name: &str) -> Result<Self, SceneError> {
        let sphere = |c: [f64; 3], r: f64, albedo: [f64; 3]| Primitive {
            shape: Shape::Sphere {
                center: c.into(),
                radius: r,
            },
            albedo,
        };
        let (union, blend, primitives) = match name {
            "sphere" => (
                UnionMode::Hard,
                0.0,
                vec![sphere([0.0; 3], 0.15, [0.8, 0.45, 0.3])],
            ),
            "blob" => (
                UnionMode::Smooth,
                0.04,
                vec![
                    sphere([0.0, 0.0, -0.02], 0.11, [0.75, 0.55, 0.35]),
                    sphere([0.07, 0.05, 0.06], 0.075, [0.4, 0.6, 0.8]),
                    sphere([-0.06, -0.05, 0.07], 0.065, [0.5, 0.8, 0.4]),
                ],
            ),
            "barbell" => (
                UnionMode::Hard,
                0.0,
                vec![
                    sphere([-0.15, 0.0, 0.0], 0.07, [0.8, 0.3, 0.3]),
                    sphere([0.15, 0.0, 0.0], 0.07, [0.3, 0.3, 0.8]),
                    Primitive {
                        shape: Shape::Box {
                            center: Vec3::ZERO,
                            half_extents: Vec3::new(0.1, 0.015, 0.015),
                        },
                        albedo: [0.7, 0.7, 0.7],
                    },
                ],
            ),
            "torus-box" => (
                UnionMode::Hard,
                0.0,
                vec![
                    Primitive {
                        shape: Shape::Torus {
                            center: Vec3::new(0.0, 0.0, 0.06),
                            major_radius: 0.12,
                            minor_radius: 0.04,
                        },
                        albedo: [0.8, 0.6, 0.2],
                    },
                    Primitive {
                        shape: Shape::Box {
                            center: Vec3::new(0.0, 0.0, -0.07),
                            half_extents: Vec3::new(0.08, 0.08, 0.06),
                        },
                        albedo: [0.3, 0.6, 0.7],
                    },
                ],
            ),
            other => return Err(SceneError::UnknownScene(other.to_string())),
        };
        let s = SdfScene {
            union,
            blend,
            box_min: Vec3::splat(-0.25),
            box_max: Vec3::splat(0.25),
            ground: None,
            room: Some(DEFAULT_ROOM_RADIUS),
            primitives,
        };
        s.validate()?;
        Ok(s)
    }

    /// Signed distance to the object (ground plane excluded).
    pub fn object_sdf(&self, p: Vec3) -> f64 {
        self.object_sdf_albedo(p).0
    }

    fn object_sdf_albedo(&self, p: Vec3) -> (f64, [f64; 3]) {
        let mut d = f64::INFINITY;
        let mut albedo = [0.0; 3];
        let k = match self.union {
            UnionMode::Hard => 0.0,
            UnionMode::Smooth => self.blend,
        };
        for (i, prim) in self.primitives.iter().enumerate() {
            let di = prim.shape.sdf(p);
            if i == 0 {
                d = di;
                albedo = prim.albedo;
                continue;
            }
            let (m, h) = smin(d, di, k);
            d = m;
            for c in 0..3 {
                albedo[c] = albedo[c] * (1.0 - h) + prim.albedo[c] * h;
            }
        }
        (d, albedo)
    }

    /// Signed distance including the optional ground plane and room.
    pub fn sdf(&self, p: Vec3) -> f64 {
        let mut d = self.object_sdf(p);
        if let Some(g) = self.ground {
            d = d.min(p.z - g);
        }
        if let Some(r) = self.room {
            d = d.min(r - p.norm());
        }
        d
    }

    /// Central-difference gradient of [`SdfScene::sdf`].
    pub fn gradient(&self, p: Vec3) -> Vec3 {
        let h = 1e-6;
        let f = |d: Vec3| self.sdf(p + d) - self.sdf(p - d);
        Vec3::new(
            f(Vec3::new(h, 0.0, 0.0)),
            f(Vec3::new(0.0, h, 0.0)),
            f(Vec3::new(0.0, 0.0, h)),
        ) * (0.5 / h)
    }

    /// First hit along the ray within `d_max`.
    pub fn trace(&self, ray: &Ray, d_max: f64) -> Option<f64> {
        let mut t = 0.0;
        for _ in 0..MAX_TRACE_STEPS {
            let d = self.sdf(ray.at(t));
            if d < TRACE_TOL {
                let t = self.refine_hit(ray, t);
                return (t <= d_max).then_some(t);
            }
            t += d;
            if t > d_max {
                return None;
            }
        }
        None
    }

    /// Grazing rays converge slowly; bracket the sign change just past the
    /// converged point and bisect it. Rays that only skim the surface keep
    /// the traced parameter.
    fn refine_hit(&self, ray: &Ray, t0: f64) -> f64 {
        let mut lo = t0;
        let mut step = TRACE_TOL;
        for _ in 0..24 {
            let d = self.sdf(ray.at(lo));
            if d < 0.0 {
                return t0;
            }
            if d > 1e-3 {
                break;
            }
            let hi = lo + d.max(step);
            if self.sdf(ray.at(hi)) < 0.0 {
                let mut hi = hi;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.sdf(ray.at(mid)) < 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return lo;
            }
            lo = hi;
            step = (step * 2.0).min(2e-3);
        }
        t0
    }

    /// Lambertian color under a fixed directional light.
    pub fn shade(&self, p: Vec3) -> [f64; 3] {
        let (d, albedo) = self.object_sdf_albedo(p);
        let ground = self.ground.map_or(f64::INFINITY, |g| p.z - g);
        let wall = self.room.map_or(f64::INFINITY, |r| r - p.norm());
        let albedo = if ground < d && ground <= wall {
            [0.6; 3]
        } else if wall < d {
            [0.8; 3]
        } else {
            albedo
        };
        let n = self.gradient(p).normalized().unwrap_or(Vec3::UP);
        let l = Vec3::from(LIGHT_DIR).normalized().expect("nonzero");
        let lambert = n.dot(l).max(0.0);
        albedo.map(|a| a * (AMBIENT + (1.0 - AMBIENT) * lambert))
    }
}

/// One simulated RGB-D frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewCapture {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    /// Row-major RGB in `[0, 1]`.
    pub color: Vec<[f64; 3]>,
    /// Row-major ray-parameter depth; `None` means no measurement.
    pub depth: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Surfaces farther than this yield no measurement.
    pub d_max: f64,
    pub noise_sigma: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            d_max: DEFAULT_SENSOR_RANGE,
            noise_sigma: 0.0,
        }
    }
}

/// Renders color and depth for every pixel center.
pub fn render_view(
    scene: &SdfScene,
    pose: &Pose,
    intr: &CameraIntrinsics,
    sensor: &SensorConfig,
    seed: u64,
) -> Result<ViewCapture, GeometryError> {
    intr.validate()?;
    let noise = (sensor.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, sensor.noise_sigma).expect("positive sigma"));
    let pixels: Vec<([f64; 3], Option<f64>)> = (0..intr.num_pixels())
        .into_par_iter()
        .map(|i| {
            let (u, v) = intr.pixel_center(i);
            let ray = pixel_to_ray(intr, pose, u, v)?;
            Ok(match scene.trace(&ray, sensor.d_max) {
                None => (BACKGROUND, None),
                Some(t) => {
                    let color = scene.shade(ray.at(t));
                    let depth = match &noise {
                        None => t,
                        Some(n) => {
                            let mut rng = ChaCha8Rng::seed_from_u64(seed);
                            rng.set_stream(i as u64);
                            (t + n.sample(&mut rng)).clamp(f64::MIN_POSITIVE, sensor.d_max)
                        }
                    };
                    (color, Some(depth))
                }
            })
        })
        .collect::<Result<_, GeometryError>>()?;
    let (color, depth) = pixels.into_iter().unzip();
    Ok(ViewCapture {
        intrinsics: *intr,
        pose: *pose,
        color,
        depth,
    })
}

impl ViewCapture {
    /// Binary PPM (P6), 8 bits per channel.
    pub fn write_ppm(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(
            out,
            "P6\n{} {}\n255\n",
            self.intrinsics.width, self.intrinsics.height
        )?;
        for c in &self.color {
            let bytes = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            out.write_all(&bytes)?;
        }
        out.flush()
    }

    /// Depth as `u32` width, `u32` height, then row-major `f32` meters, all
    /// little-endian; 0 marks a missing measurement.
    pub fn write_depth(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&self.intrinsics.width.to_le_bytes())?;
        out.write_all(&self.intrinsics.height.to_le_bytes())?;
        for d in &self.depth {
            out.write_all(&(d.unwrap_or(0.0) as f32).to_le_bytes())?;
        }
        out.flush()
    }

    pub fn num_valid(&self) -> usize {
        self.depth.iter().filter(|d| d.is_some()).count()
    }
}

/// Points on the zero level set of the object, projected to within
/// `TRACE_TOL` of the surface.
pub fn gt_surface_points(scene: &SdfScene, n: usize, seed: u64) -> Vec<Vec3> {
    let aabb = scene.aabb();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let shell = 0.01;
    while out.len() < n {
        let p = Vec3::new(
            rng.gen_range(aabb.min.x..aabb.max.x),
            rng.gen_range(aabb.min.y..aabb.max.y),
            rng.gen_range(aabb.min.z..aabb.max.z),
        );
        if scene.object_sdf(p).abs() >= shell {
            continue;
        }
        if let Some(q) = project_to_surface(scene, p) {
            out.push(q);
        }
    }
    out
}

fn project_to_surface(scene: &SdfScene, mut p: Vec3) -> Option<Vec3> {
    let h = 1e-6;
    for _ in 0..50 {
        let d = scene.object_sdf(p);
        if d.abs() < TRACE_TOL {
            return Some(p);
        }
        let f = |e: Vec3| scene.object_sdf(p + e) - scene.object_sdf(p - e);
        let g = Vec3::new(
            f(Vec3::new(h, 0.0, 0.0)),
            f(Vec3::new(0.0, h, 0.0)),
            f(Vec3::new(0.0, 0.0, h)),
        ) * (0.5 / h);
        let g2 = g.dot(g);
        if g2 < 1e-12 {
            return None;
        }
        p = p - g * (d / g2);
    }
    None
}
