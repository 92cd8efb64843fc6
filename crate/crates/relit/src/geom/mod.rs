//! Cameras, rays, and intersection primitives.
//!
//! Everything here is plain f64 geometry: pinhole projection with the
//! half-pixel center convention (+z looks forward), slab tests against
//! axis-aligned boxes, Möller–Trumbore against triangles, and stratified
//! 1-D sampling for the volume renderer.

pub mod mesh;

pub use mesh::{load_obj, ray_mesh, MeshHit, TriangleMesh};

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// 3-component vector / point in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn vec3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = vec3(0.0, 0.0, 0.0);

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Unit vector; returns `None` for near-zero input rather than blowing up.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n > 1e-12 {
            Some(self / n)
        } else {
            None
        }
    }

    pub fn comp(self, d: usize) -> f64 {
        match d {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn min_comp(self, o: Vec3) -> Vec3 {
        vec3(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max_comp(self, o: Vec3) -> Vec3 {
        vec3(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn to_f32(self) -> [f32; 3] {
        [self.x as f32, self.y as f32, self.z as f32]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        vec3(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        vec3(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        vec3(-self.x, -self.y, -self.z)
    }
}

/// Linear-light RGB triple.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rgb {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

pub const fn rgb(r: f64, g: f64, b: f64) -> Rgb {
    Rgb { r, g, b }
}

impl Rgb {
    pub const BLACK: Rgb = rgb(0.0, 0.0, 0.0);

    pub fn splat(v: f64) -> Rgb {
        rgb(v, v, v)
    }

    /// Channel-wise product (the ⊙ in the shading equation).
    pub fn mul_elem(self, o: Rgb) -> Rgb {
        rgb(self.r * o.r, self.g * o.g, self.b * o.b)
    }

    pub fn clamp01(self) -> Rgb {
        rgb(self.r.clamp(0.0, 1.0), self.g.clamp(0.0, 1.0), self.b.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(self, o: Rgb) -> f64 {
        (self.r - o.r).abs().max((self.g - o.g).abs()).max((self.b - o.b).abs())
    }

    pub fn to_f32(self) -> [f32; 3] {
        [self.r as f32, self.g as f32, self.b as f32]
    }

    pub fn from_f32(v: [f32; 3]) -> Rgb {
        rgb(v[0] as f64, v[1] as f64, v[2] as f64)
    }
}

impl Add for Rgb {
    type Output = Rgb;
    fn add(self, o: Rgb) -> Rgb {
        rgb(self.r + o.r, self.g + o.g, self.b + o.b)
    }
}

impl Mul<f64> for Rgb {
    type Output = Rgb;
    fn mul(self, s: f64) -> Rgb {
        rgb(self.r * s, self.g * s, self.b * s)
    }
}

/// Rigid camera-to-world transform: `world = r * cam + t`.
/// `r` is row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub r: [[f64; 3]; 3],
    pub t: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        t: Vec3::ZERO,
    };

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        vec3(
            self.r[0][0] * v.x + self.r[0][1] * v.y + self.r[0][2] * v.z,
            self.r[1][0] * v.x + self.r[1][1] * v.y + self.r[1][2] * v.z,
            self.r[2][0] * v.x + self.r[2][1] * v.y + self.r[2][2] * v.z,
        )
    }

    /// Rotate by the transpose (world direction into camera frame).
    pub fn rotate_inv(&self, v: Vec3) -> Vec3 {
        vec3(
            self.r[0][0] * v.x + self.r[1][0] * v.y + self.r[2][0] * v.z,
            self.r[0][1] * v.x + self.r[1][1] * v.y + self.r[2][1] * v.z,
            self.r[0][2] * v.x + self.r[1][2] * v.y + self.r[2][2] * v.z,
        )
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotate(p) + self.t
    }

    pub fn apply_inv(&self, p: Vec3) -> Vec3 {
        self.rotate_inv(p - self.t)
    }

    /// Camera-to-world pose that places the camera at `eye` looking toward
    /// `target`, with `up` fixing the roll. Camera +z is the view direction,
    /// +x right, +y down (image coordinates grow down).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Pose {
        let fwd = (target - eye).normalized().expect("look_at: eye == target");
        let right = fwd.cross(up).normalized().expect("look_at: up parallel to view");
        let down = fwd.cross(right); // unit: fwd ⊥ right
        Pose {
            r: [
                [right.x, down.x, fwd.x],
                [right.y, down.y, fwd.y],
                [right.z, down.z, fwd.z],
            ],
            t: eye,
        }
    }

    /// Max deviation of rᵀr from identity — used by manifest validation.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += self.r[k][i] * self.r[k][j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }
}

/// Pinhole camera with principal point and per-axis focal lengths in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// World-space ray through pixel `(px, py)`; the pixel *center* sits at
/// `(px + 0.5, py + 0.5)` and the camera looks along +z in its own frame.
pub fn generate_ray(cam: &Camera, px: f64, py: f64) -> Ray {
    debug_assert!(
        px >= 0.0 && px < cam.width as f64 && py >= 0.0 && py < cam.height as f64,
        "pixel ({px}, {py}) outside {}x{} image",
        cam.width,
        cam.height,
    );
    let d_cam = vec3(
        (px + 0.5 - cam.cx) / cam.fx,
        (py + 0.5 - cam.cy) / cam.fy,
        1.0,
    );
    let dir = cam.pose.rotate(d_cam).normalized().expect("camera direction degenerate");
    Ray { origin: cam.pose.t, dir }
}

impl Camera {
    /// Project a world point; returns `(px, py, depth)` in the same pixel
    /// convention as [`generate_ray`], or `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.pose.apply_inv(p);
        if c.z <= 1e-9 {
            return None;
        }
        let px = self.fx * c.x / c.z + self.cx - 0.5;
        let py = self.fy * c.y / c.z + self.cy - 0.5;
        Some((px, py, c.z))
    }
}

/// Axis-aligned box; `min` componentwise below `max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Aabb {
        debug_assert!(min.x <= max.x && min.y <= max.y && min.z <= max.z);
        Aabb { min, max }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Normalize a point into the unit cube of this box (clamped).
    pub fn to_unit(&self, p: Vec3) -> Vec3 {
        let e = self.extent();
        vec3(
            ((p.x - self.min.x) / e.x).clamp(0.0, 1.0),
            ((p.y - self.min.y) / e.y).clamp(0.0, 1.0),
            ((p.z - self.min.z) / e.z).clamp(0.0, 1.0),
        )
    }
}

/// Slab test. Returns the parametric overlap `(t_entry, t_exit)` of the ray
/// with the box, with `t_entry` clamped to 0 when the origin is inside;
/// `None` when the box is missed or entirely behind the ray.
pub fn ray_aabb(ray: &Ray, aabb: &Aabb) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for d in 0..3 {
        let o = ray.origin.comp(d);
        let v = ray.dir.comp(d);
        let lo = aabb.min.comp(d);
        let hi = aabb.max.comp(d);
        if v.abs() < 1e-15 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / v;
        let (mut a, mut b) = ((lo - o) * inv, (hi - o) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t1 < t0 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Triangle hit: ray parameter plus barycentric coordinates of the point
/// (`w = 1 - u - v` on vertex a, `u` on b, `v` on c).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriHit {
    pub t: f64,
    pub u: f64,
    pub v: f64,
}

/// Möller–Trumbore. Rejects hits with `t <= 1e-6` (behind or grazing the
/// origin) and near-degenerate configurations (`|det| <= 1e-12`).
pub fn ray_triangle(ray: &Ray, a: Vec3, b: Vec3, c: Vec3) -> Option<TriHit> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = ray.dir.cross(e2);
    let det = e1.dot(pvec);
    if det.abs() <= 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = ray.origin - a;
    let u = tvec.dot(pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(e1);
    let v = ray.dir.dot(qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(qvec) * inv_det;
    if t <= 1e-6 {
        return None;
    }
    Some(TriHit { t, u, v })
}

/// `n` stratified samples of `[t_near, t_far]`: sample `i` is drawn from bin
/// `[t_near + i·h, t_near + (i+1)·h]` with `h = (t_far − t_near)/n`. With no
/// RNG the bin centers are returned.
pub fn sample_stratified(
    t_near: f64,
    t_far: f64,
    n: usize,
    jitter: Option<&mut dyn FnMut() -> f64>,
) -> Vec<f64> {
    debug_assert!(t_far >= t_near && n > 0);
    let h = (t_far - t_near) / n as f64;
    match jitter {
        Some(rng) => (0..n)
            .map(|i| t_near + (i as f64 + rng().clamp(0.0, 1.0 - 1e-12)) * h)
            .collect(),
        None => (0..n).map(|i| t_near + (i as f64 + 0.5) * h).collect(),
    }
}
