//! Rigid transforms, pinhole cameras, rays, axis-aligned boxes and the
//! spherical view manifold.
//!
//! Vectors and poses are generic over [`Scalar`] so the planner can
//! differentiate camera placement with respect to its spherical coordinates
//! and the trainer can differentiate rays with respect to pose corrections.
//!
//! Conventions: world up is `+z`. Cameras follow the pinhole convention with
//! `z` forward, `x` right and `y` down in image space. A [`Pose`] maps camera
//! coordinates to world coordinates.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::diff::{DomainError, Scalar};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid bounding box: min {min:?} must be < max {max:?} componentwise")]
    InvalidAabb { min: Vec3, max: Vec3 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("pixel ({0}, {1}) outside the image")]
    PixelOutOfBounds(f64, f64),
    #[error("elevation {0} rad is too close to a pole")]
    DegenerateElevation(f64),
    #[error("zero-length direction")]
    ZeroDirection,
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// 3-vector over any scalar type. `Vec3` alone means `Vec3<f64>`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[S; 3]", into = "[S; 3]")]
#[serde(bound(serialize = "S: Copy + Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct Vec3<S = f64> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S> Vec3<S> {
    pub const fn new(x: S, y: S, z: S) -> Self {
        Self { x, y, z }
    }
}

impl<S> From<[S; 3]> for Vec3<S> {
    fn from([x, y, z]: [S; 3]) -> Self {
        Self { x, y, z }
    }
}

impl<S> From<Vec3<S>> for [S; 3] {
    fn from(v: Vec3<S>) -> Self {
        [v.x, v.y, v.z]
    }
}

impl<S: Copy> Vec3<S> {
    pub fn to_array(self) -> [S; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [S; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn get(&self, axis: usize) -> S {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Result<Vec3, GeometryError> {
        let n = self.norm();
        if n > 0.0 && n.is_finite() {
            Ok(self * (1.0 / n))
        } else {
            Err(GeometryError::ZeroDirection)
        }
    }

    pub fn lift<S: Scalar>(self) -> Vec3<S> {
        Vec3::new(S::constant(self.x), S::constant(self.y), S::constant(self.z))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self - other).norm()
    }

    pub fn min_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    /// Componentwise maximum of absolute values.
    pub fn abs_max(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.x.abs().max(o.x.abs()),
            self.y.abs().max(o.y.abs()),
            self.z.abs().max(o.z.abs()),
        )
    }

    pub fn max_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }
}

impl<S: Scalar> Vec3<S> {
    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn scale(self, s: S) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn scale_f(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn length(self) -> Result<S, DomainError> {
        self.dot(self).sqrt()
    }

    pub fn unit(self) -> Result<Self, DomainError> {
        let n = self.length()?;
        Ok(Self::new(self.x / n, self.y / n, self.z / n))
    }

    pub fn value(self) -> Vec3 {
        Vec3::new(self.x.value(), self.y.value(), self.z.value())
    }
}

impl<S: Scalar> Add for Vec3<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Scalar> Sub for Vec3<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<S: Scalar> Neg for Vec3<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Rigid transform from camera to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Copy + Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct Pose<S = f64> {
    /// Row-major rotation; columns are the camera axes in world frame.
    pub rotation: [[S; 3]; 3],
    pub translation: Vec3<S>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: Vec3::ZERO,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn lift<S: Scalar>(&self) -> Pose<S> {
        Pose {
            rotation: self.rotation.map(|r| r.map(S::constant)),
            translation: self.translation.lift(),
        }
    }

    /// Row-major rotation followed by translation.
    pub fn to_flat(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2], t.x,
            t.y, t.z,
        ]
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let ti = -Vec3::new(
            rt[0][0] * t.x + rt[0][1] * t.y + rt[0][2] * t.z,
            rt[1][0] * t.x + rt[1][1] * t.y + rt[1][2] * t.z,
            rt[2][0] * t.x + rt[2][1] * t.y + rt[2][2] * t.z,
        );
        Pose {
            rotation: rt,
            translation: ti,
        }
    }

    /// Largest deviation of `R Rᵀ` from identity and `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - e).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        worst.max((det - 1.0).abs())
    }

    /// Geodesic angle between the two rotations, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        // Relative rotation Aᵀ B; atan2 keeps small angles accurate.
        let (a, b) = (&self.rotation, &other.rotation);
        let m = |i: usize, j: usize| (0..3).map(|k| a[k][i] * b[k][j]).sum::<f64>();
        let tr = m(0, 0) + m(1, 1) + m(2, 2);
        let v = [m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)];
        let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() / 2.0;
        s.atan2((tr - 1.0) / 2.0)
    }

    /// Camera z-axis in world frame.
    pub fn forward(&self) -> Vec3 {
        Vec3::new(
            self.rotation[0][2],
            self.rotation[1][2],
            self.rotation[2][2],
        )
    }

    /// Twist `w` such that `exp(w) ∘ self == other`.
    pub fn twist_to(&self, other: &Pose) -> [f64; 6] {
        log_se3(&other.compose(&self.inverse()))
    }

    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl<S: Scalar> Pose<S> {
    pub fn from_flat(p: &[S; 12]) -> Self {
        Self {
            rotation: [[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], p[8]]],
            translation: Vec3::new(p[9], p[10], p[11]),
        }
    }

    pub fn flat(&self) -> [S; 12] {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2], t.x,
            t.y, t.z,
        ]
    }

    pub fn rotate(&self, d: Vec3<S>) -> Vec3<S> {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * d.x + r[0][1] * d.y + r[0][2] * d.z,
            r[1][0] * d.x + r[1][1] * d.y + r[1][2] * d.z,
            r[2][0] * d.x + r[2][1] * d.y + r[2][2] * d.z,
        )
    }

    /// Rotation applied to a constant direction, skipping constant work.
    pub fn rotate_f(&self, d: Vec3) -> Vec3<S> {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * d.x + r[0][1] * d.y + r[0][2] * d.z,
            r[1][0] * d.x + r[1][1] * d.y + r[1][2] * d.z,
            r[2][0] * d.x + r[2][1] * d.y + r[2][2] * d.z,
        )
    }

    pub fn transform_point(&self, p: Vec3<S>) -> Vec3<S> {
        self.rotate(p) + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose<S>) -> Pose<S> {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[S::constant(0.0); 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Pose {
            rotation: r,
            translation: self.rotate(other.translation) + self.translation,
        }
    }

    /// Returns `exp(twist) ∘ self`; the twist is `(ω, v)` with the rotation
    /// part first.
    pub fn apply_twist(&self, twist: &[S; 6]) -> Pose<S> {
        exp_se3(twist).compose(self)
    }

    pub fn value(&self) -> Pose {
        Pose {
            rotation: self.rotation.map(|r| r.map(|v| v.value())),
            translation: self.translation.value(),
        }
    }
}

fn skew<S: Scalar>(w: [S; 3]) -> [[S; 3]; 3] {
    let z = S::constant(0.0);
    [[z, -w[2], w[1]], [w[2], z, -w[0]], [-w[1], w[0], z]]
}

fn mat_mul<S: Scalar>(a: &[[S; 3]; 3], b: &[[S; 3]; 3]) -> [[S; 3]; 3] {
    let mut r = [[S::constant(0.0); 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, out) in row.iter_mut().enumerate() {
            *out = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    r
}

/// Exponential map of a twist `(ω, v)` onto a rigid transform.
pub fn exp_se3<S: Scalar>(twist: &[S; 6]) -> Pose<S> {
    let w = [twist[0], twist[1], twist[2]];
    let v = Vec3::new(twist[3], twist[4], twist[5]);
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    // Series coefficients below the threshold keep the map smooth at 0.
    let (a, b, c) = if theta2.value() < 1e-12 {
        (
            S::constant(1.0) - theta2 / 6.0,
            S::constant(0.5) - theta2 / 24.0,
            S::constant(1.0 / 6.0) - theta2 / 120.0,
        )
    } else {
        let theta = theta2.sqrt().expect("non-negative");
        let (s, co) = (theta.sin(), theta.cos());
        (
            s / theta,
            co.one_minus() / theta2,
            (theta - s) / (theta2 * theta),
        )
    };
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut r = [[S::constant(0.0); 3]; 3];
    let mut vm = [[S::constant(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            r[i][j] = a * k[i][j] + b * k2[i][j] + id;
            vm[i][j] = b * k[i][j] + c * k2[i][j] + id;
        }
    }
    let t = Vec3::new(
        vm[0][0] * v.x + vm[0][1] * v.y + vm[0][2] * v.z,
        vm[1][0] * v.x + vm[1][1] * v.y + vm[1][2] * v.z,
        vm[2][0] * v.x + vm[2][1] * v.y + vm[2][2] * v.z,
    );
    Pose {
        rotation: r,
        translation: t,
    }
}

/// Rotation vector of a rotation matrix.
pub fn log_so3(r: &[[f64; 3]; 3]) -> [f64; 3] {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let vee = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if theta < 1e-6 {
        return vee.map(|x| 0.5 * x);
    }
    if PI - theta < 1e-6 {
        // Near π: axis from the symmetric part.
        let mut axis = [0.0; 3];
        let i = (0..3)
            .max_by(|&a, &b| r[a][a].total_cmp(&r[b][b]))
            .unwrap_or(0);
        let denom = (2.0 * (1.0 + r[i][i])).sqrt();
        for (j, a) in axis.iter_mut().enumerate() {
            *a = (r[j][i] + if i == j { 1.0 } else { 0.0 }) / denom;
        }
        return axis.map(|a| a * theta);
    }
    let k = theta / (2.0 * theta.sin());
    vee.map(|x| x * k)
}

/// Inverse of [`exp_se3`].
pub fn log_se3(p: &Pose) -> [f64; 6] {
    let w = log_so3(&p.rotation);
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let theta = theta2.sqrt();
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    // V⁻¹ = I - ½K + (1/θ²)(1 - A/(2B)) K²
    let d = if theta2 < 1e-10 {
        1.0 / 12.0
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        (1.0 - a / (2.0 * b)) / theta2
    };
    let t = p.translation.to_array();
    let mut v = [0.0; 3];
    for (i, out) in v.iter_mut().enumerate() {
        for (j, tj) in t.iter().enumerate() {
            let id = if i == j { 1.0 } else { 0.0 };
            *out += (id - 0.5 * k[i][j] + d * k2[i][j]) * tj;
        }
    }
    [w[0], w[1], w[2], v[0], v[1], v[2]]
}

/// Pinhole intrinsics. Pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center, horizontal field
    /// of view in degrees.
    pub fn from_fov(width: u32, height: u32, fov_x_deg: f64) -> Result<Self, GeometryError> {
        if !(fov_x_deg > 0.0 && fov_x_deg < 180.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "field of view {fov_x_deg}° out of range"
            )));
        }
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image must be non-empty");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Unit viewing direction in camera coordinates.
    pub fn camera_dir(&self, u: f64, v: f64) -> Vec3 {
        let d = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        d * (1.0 / d.norm())
    }

    pub fn check_pixel(&self, u: f64, v: f64) -> Result<(), GeometryError> {
        if u >= 0.0 && u <= self.width as f64 && v >= 0.0 && v <= self.height as f64 {
            Ok(())
        } else {
            Err(GeometryError::PixelOutOfBounds(u, v))
        }
    }

    /// Continuous coordinates of the center of pixel `index` (row-major).
    pub fn pixel_center(&self, index: usize) -> (f64, f64) {
        let w = self.width as usize;
        ((index % w) as f64 + 0.5, (index / w) as f64 + 0.5)
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Half-line with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    /// Normalizes `dir`.
    pub fn new(origin: Vec3, dir: Vec3) -> Result<Self, GeometryError> {
        Ok(Self {
            origin,
            dir: dir.normalized()?,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Back-projects a (possibly fractional) pixel through a camera pose.
pub fn pixel_to_ray(
    intr: &CameraIntrinsics,
    pose: &Pose,
    u: f64,
    v: f64,
) -> Result<Ray, GeometryError> {
    intr.check_pixel(u, v)?;
    let d = pose.rotate(intr.camera_dir(u, v));
    Ray::new(pose.translation, d)
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self, GeometryError> {
        if min.x < max.x && min.y < max.y && min.z < max.z {
            Ok(Self { min, max })
        } else {
            Err(GeometryError::InvalidAabb { min, max })
        }
    }

    /// Box `[-h, h]³`.
    pub fn cube(half: f64) -> Self {
        Self {
            min: Vec3::splat(-half),
            max: Vec3::splat(half),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        p.x >= self.min.x - tol
            && p.x <= self.max.x + tol
            && p.y >= self.min.y - tol
            && p.y <= self.max.y + tol
            && p.z >= self.min.z - tol
            && p.z <= self.max.z + tol
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        p.max_elem(self.min).min_elem(self.max)
    }

    /// Slab test. Returns `(d_near, d_far)` with `0 ≤ d_near ≤ d_far`;
    /// `d_near` is clamped to 0 when the origin is inside the box.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            let o = ray.origin.get(axis);
            let d = ray.dir.get(axis);
            let (lo, hi) = (self.min.get(axis), self.max.get(axis));
            if d.abs() < 1e-15 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut ta, mut tb) = ((lo - o) * inv, (hi - o) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        if t0 > t1 || t1 < 0.0 {
            return None;
        }
        Some((t0.max(0.0), t1))
    }

    /// Centers of a `res³` grid of cells, x fastest.
    pub fn cell_centers(&self, res: usize) -> impl Iterator<Item = Vec3> + '_ {
        let e = self.extent();
        let step = Vec3::new(e.x / res as f64, e.y / res as f64, e.z / res as f64);
        (0..res * res * res).map(move |i| {
            let (ix, iy, iz) = (i % res, (i / res) % res, i / (res * res));
            Vec3::new(
                self.min.x + (ix as f64 + 0.5) * step.x,
                self.min.y + (iy as f64 + 0.5) * step.y,
                self.min.z + (iz as f64 + 0.5) * step.z,
            )
        })
    }
}

/// Bounds of the 2-DoF sphere on which candidate views live.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewManifold {
    pub center: Vec3,
    pub radius: f64,
    pub elevation_min: f64,
    pub elevation_max: f64,
}

/// Smallest distance from a pole that [`look_at_sphere`] accepts.
pub const POLE_MARGIN: f64 = 1e-3;

impl Default for ViewManifold {
    fn default() -> Self {
        Self {
            center: Vec3::ZERO,
            radius: 1.0,
            elevation_min: (-10f64).to_radians(),
            elevation_max: 80f64.to_radians(),
        }
    }
}

impl ViewManifold {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let lim = FRAC_PI_2 - POLE_MARGIN;
        if !(self.radius > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(
                "manifold radius must be positive".into(),
            ));
        }
        for e in [self.elevation_min, self.elevation_max] {
            if !(e > -lim && e < lim) {
                return Err(GeometryError::DegenerateElevation(e));
            }
        }
        if self.elevation_min > self.elevation_max {
            return Err(GeometryError::DegenerateElevation(self.elevation_min));
        }
        Ok(())
    }

    pub fn view(&self, azimuth: f64, elevation: f64) -> SphericalView {
        SphericalView {
            azimuth,
            elevation,
            radius: self.radius,
            center: self.center,
        }
    }

    /// Wraps azimuth into `[0, 2π)` and clamps elevation to the bounds.
    pub fn project(&self, azimuth: f64, elevation: f64) -> SphericalView {
        self.view(
            azimuth.rem_euclid(TAU),
            elevation.clamp(self.elevation_min, self.elevation_max),
        )
    }

    pub fn contains(&self, v: &SphericalView) -> bool {
        (0.0..TAU).contains(&v.azimuth)
            && v.elevation >= self.elevation_min
            && v.elevation <= self.elevation_max
    }
}

/// A point on the view manifold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalView {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub center: Vec3,
}

impl SphericalView {
    pub fn pose(&self) -> Result<Pose, GeometryError> {
        look_at_sphere(self.azimuth, self.elevation, self.radius, self.center)
    }

    pub fn position(&self) -> Vec3 {
        self.center + sphere_dir(self.azimuth, self.elevation).value() * self.radius
    }
}

fn sphere_dir<S: Scalar>(azimuth: S, elevation: S) -> Vec3<S> {
    let ce = elevation.cos();
    Vec3::new(ce * azimuth.cos(), ce * azimuth.sin(), elevation.sin())
}

/// Camera on the sphere of `radius` around `center`, looking at the center.
///
/// The camera z-axis points at the center; x is horizontal
/// (orthogonal to z and world up) and y = z × x points downward in image
/// space.
pub fn look_at_sphere<S: Scalar>(
    azimuth: S,
    elevation: S,
    radius: f64,
    center: Vec3,
) -> Result<Pose<S>, GeometryError> {
    let lim = FRAC_PI_2 - POLE_MARGIN;
    let e = elevation.value();
    if !(e > -lim && e < lim) {
        return Err(GeometryError::DegenerateElevation(e));
    }
    let out = sphere_dir(azimuth, elevation);
    let position = center.lift() + out.scale_f(radius);
    let z = -out;
    let up = Vec3::UP.lift::<S>();
    let x = z.cross(up).unit()?;
    let y = z.cross(x);
    Ok(Pose {
        rotation: [[x.x, y.x, z.x], [x.y, y.y, z.y], [x.z, y.z, z.z]],
        translation: position,
    })
}

/// Great-circle angle between two directions given in spherical
/// coordinates, differentiable everywhere except at coincidence, where the
/// subgradient is zero.
pub fn great_circle_angle<S: Scalar>(az_a: S, el_a: S, az_b: S, el_b: S) -> S {
    let a = sphere_dir(az_a, el_a);
    let b = sphere_dir(az_b, el_b);
    let c = a.cross(b);
    let s = c.dot(c).sqrt().expect("non-negative");
    s.atan2(a.dot(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn slab_examples() {
        let b = Aabb::cube(0.25);
        let r = Ray::new(Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let (n, f) = b.intersect(&r).unwrap();
        assert!((n - 0.75).abs() < 1e-12 && (f - 1.25).abs() < 1e-12);

        let r = Ray::new(Vec3::new(1.0, 1.0, -1.0), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(b.intersect(&r).is_none());

        let r = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(b.intersect(&r), Some((0.0, 0.25)));

        let r = Ray::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(b.intersect(&r).is_none(), "box behind the ray");
    }

    /// Marches the ray in 1e-4 steps and records the first and last inside
    /// sample.
    fn march(b: &Aabb, r: &Ray, t_max: f64) -> Option<(f64, f64)> {
        let step = 1e-4;
        let mut first = None;
        let mut last = None;
        let n = (t_max / step) as usize;
        for i in 0..=n {
            let t = i as f64 * step;
            if b.contains(r.at(t), 0.0) {
                first.get_or_insert(t);
                last = Some(t);
            }
        }
        first.zip(last)
    }

    #[test]
    fn slab_agrees_with_brute_force_marcher() {
        let b = Aabb::cube(0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = 0;
        for _ in 0..1000 {
            let o = Vec3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
            );
            // Aim near the box so that a good fraction of rays hit it.
            let target = Vec3::new(
                rng.gen_range(-0.35..0.35),
                rng.gen_range(-0.35..0.35),
                rng.gen_range(-0.35..0.35),
            );
            let Ok(r) = Ray::new(o, target - o) else {
                continue;
            };
            let slab = b.intersect(&r);
            let brute = march(&b, &r, 2.5);
            match (slab, brute) {
                (Some((n, f)), Some((bn, bf))) => {
                    hits += 1;
                    assert!((n - bn).abs() <= 2e-4, "near {n} vs {bn}");
                    assert!((f - bf).abs() <= 2e-4, "far {f} vs {bf}");
                }
                (None, None) => {}
                // Grazing intersections shorter than one step.
                (Some((n, f)), None) => assert!(f - n < 2e-4),
                (None, Some(_)) => panic!("marcher found a hit the slab test missed"),
            }
        }
        assert!(hits > 300);
    }

    #[test]
    fn principal_point_ray() {
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
        let r = pixel_to_ray(&k, &Pose::identity(), 32.0, 24.0).unwrap();
        assert_eq!(r.dir, Vec3::new(0.0, 0.0, 1.0));
        let r = pixel_to_ray(&k, &Pose::identity(), 132.0 - 100.0 + 100.0, 24.0);
        assert!(r.is_err());
        let r = pixel_to_ray(&k, &Pose::identity(), 32.0 + 30.0, 24.0).unwrap();
        assert!((r.dir.x / r.dir.z - 0.3).abs() < 1e-12);

        let k = CameraIntrinsics::new(10.0, 10.0, 32.0, 24.0, 64, 48).unwrap();
        let r = pixel_to_ray(&k, &Pose::identity(), 42.0, 24.0).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((r.dir - Vec3::new(s, 0.0, s)).norm() < 1e-12);

        let t = Vec3::new(0.3, -1.0, 2.0);
        let r = pixel_to_ray(&k, &Pose::from_translation(t), 5.0, 7.0).unwrap();
        assert_eq!(r.origin, t);
        assert!(CameraIntrinsics::new(-1.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
    }

    #[test]
    fn look_at_equator() {
        let v = ViewManifold::default().view(0.0, 0.0);
        let p = v.pose().unwrap();
        assert!((p.translation - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((p.forward() - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(p.orthonormality_error() < 1e-12);
        // Image y points down.
        assert!(p.rotation[2][1] < 0.0);
    }

    #[test]
    fn look_at_properties() {
        let m = ViewManifold {
            center: Vec3::new(0.1, -0.2, 0.05),
            radius: 1.3,
            ..Default::default()
        };
        let k = CameraIntrinsics::from_fov(64, 64, 40.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = m.view(rng.gen_range(0.0..TAU), rng.gen_range(-1.5..1.5));
            let p = v.pose().unwrap();
            assert!(p.orthonormality_error() < 1e-9);
            let to_center = (m.center - p.translation).normalized().unwrap();
            assert!((p.forward() - to_center).norm() < 1e-9);
            // The principal ray passes through the center.
            let r = pixel_to_ray(&k, &p, k.cx, k.cy).unwrap();
            let t = (m.center - r.origin).dot(r.dir);
            assert!((r.at(t) - m.center).norm() < 1e-6);
            // x axis is horizontal.
            assert!(p.rotation[2][0].abs() < 1e-12);
        }
        assert!(matches!(
            m.view(0.0, FRAC_PI_2).pose(),
            Err(GeometryError::DegenerateElevation(_))
        ));
    }

    #[test]
    fn camera_position_derivative_matches_finite_differences() {
        let c = Vec3::new(0.0, 0.0, 0.1);
        for (az, el) in [(0.3, 0.2), (2.0, -0.1), (4.5, 1.1)] {
            for comp in 0..3 {
                let tape = Tape::new();
                let (a, e) = (tape.leaf(az), tape.leaf(el));
                let p = look_at_sphere(a, e, 1.0, c).unwrap();
                let out = p.translation.to_array()[comp];
                let adj = tape.backward(&[(out, 1.0)]).unwrap();
                let g = [adj.get(a), adj.get(e)];
                let f = |x: &[f64]| {
                    look_at_sphere(x[0], x[1], 1.0, c)
                        .unwrap()
                        .translation
                        .to_array()[comp]
                };
                assert!(grad_check(f, &[az, el], &g, 1e-5) < 1e-6);
            }
        }
    }

    #[test]
    fn rotation_derivatives_match_finite_differences() {
        let tape = Tape::new();
        let (a, e) = (tape.leaf(1.1), tape.leaf(0.4));
        let p = look_at_sphere(a, e, 1.0, Vec3::ZERO).unwrap();
        for k in 0..9 {
            let out = p.flat()[k];
            let adj = tape.backward(&[(out, 1.0)]).unwrap();
            let g = [adj.get(a), adj.get(e)];
            let f = |x: &[f64]| look_at_sphere(x[0], x[1], 1.0, Vec3::ZERO).unwrap().flat()[k];
            let fd0 = (f(&[1.1 + 1e-6, 0.4]) - f(&[1.1 - 1e-6, 0.4])) / 2e-6;
            let fd1 = (f(&[1.1, 0.4 + 1e-6]) - f(&[1.1, 0.4 - 1e-6])) / 2e-6;
            assert!((g[0] - fd0).abs() < 1e-8 && (g[1] - fd1).abs() < 1e-8);
        }
    }

    #[test]
    fn twist_examples() {
        let p = ViewManifold::default().view(0.7, 0.3).pose().unwrap();
        assert_eq!(p.apply_twist(&[0.0; 6]), p);
        let q = p.apply_twist(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.1]);
        assert!((q.translation - p.translation - Vec3::new(0.0, 0.0, 0.1)).norm() < 1e-15);
        assert_eq!(q.rotation, p.rotation);
    }

    #[test]
    fn twist_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let p = ViewManifold::default()
                .view(rng.gen_range(0.0..TAU), rng.gen_range(-0.2..1.3))
                .pose()
                .unwrap();
            let mut w = [0.0; 6];
            w.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            let scale = rng.gen_range(0.0..0.1) / w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let w = w.map(|x| x * scale);
            let q = p.apply_twist(&w);
            assert!(q.orthonormality_error() < 1e-12);
            let back = q.apply_twist(&w.map(|x| -x));
            assert!(back.max_abs_diff(&p) < 1e-9);
            let rec = p.twist_to(&q);
            for (a, b) in rec.iter().zip(&w) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn small_rotations_compose_additively() {
        let a = [1e-3 / 3f64.sqrt(), -1e-3 / 3f64.sqrt(), 1e-3 / 3f64.sqrt()];
        let b = [0.0, 6e-4, 8e-4];
        let to6 = |w: [f64; 3]| [w[0], w[1], w[2], 0.0, 0.0, 0.0];
        let prod = exp_se3(&to6(a)).compose(&exp_se3(&to6(b)));
        let l = log_so3(&prod.rotation);
        let err: f64 = (0..3).map(|i| (l[i] - a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
        // Baker–Campbell–Hausdorff: the leading correction is ½[a, b].
        assert!(err <= 1e-6, "{err}");
        assert!(err > 0.0);
    }

    #[test]
    fn twist_exp_is_smooth_at_zero() {
        for k in 0..6 {
            let tape = Tape::new();
            let w: Vec<_> = (0..6).map(|_| tape.leaf(0.0)).collect();
            let wa = [w[0], w[1], w[2], w[3], w[4], w[5]];
            let base = Pose::from_translation(Vec3::new(0.2, 0.3, 0.4)).lift();
            let q = base.apply_twist(&wa);
            let y = q.translation.x + q.translation.y * 2.0 + q.rotation[0][1];
            let adj = tape.backward(&[(y, 1.0)]).unwrap();
            let f = |x: &[f64]| {
                let mut t = [0.0; 6];
                t[k] = x[0];
                let q = Pose::from_translation(Vec3::new(0.2, 0.3, 0.4)).apply_twist(&t);
                q.translation.x + q.translation.y * 2.0 + q.rotation[0][1]
            };
            let fd = (f(&[1e-6]) - f(&[-1e-6])) / 2e-6;
            assert!((adj.get(w[k]) - fd).abs() < 1e-8, "component {k}");
        }
    }

    #[test]
    fn great_circle_antipodal() {
        let a: f64 = great_circle_angle(0.0, 0.0, PI, 0.0);
        assert!((a - PI).abs() < 1e-12);
        let z: f64 = great_circle_angle(1.0, 0.3, 1.0, 0.3);
        assert!(z.abs() < 1e-12);
    }

    #[test]
    fn manifold_projection() {
        let m = ViewManifold::default();
        let v = m.project(-0.5, 2.0);
        assert!(m.contains(&v));
        assert!((v.azimuth - (TAU - 0.5)).abs() < 1e-12);
        assert_eq!(v.elevation, m.elevation_max);
    }
}
