//! Closed-form reference scene.
//!
//! A checkered ground plane plus a few axis-aligned boxes, shaded with the
//! exact model the renderer assumes: diffuse albedo times sun radiance,
//! cosine-weighted and shadow-masked, plus an ambient sky term. Because every
//! quantity — geometry, normals, albedo, semantics, shadows — has an exact
//! answer, the scene doubles as ground truth for supervision and as the
//! yardstick for end-to-end recovery tests.

pub mod dataset;

use crate::geom::{vec3, Aabb, Ray, Rgb, Vec3};
use crate::lighting::sun_direction;

/// Semantic labels used by the reference scene.
pub const CLASS_GROUND: u8 = 0;
pub const CLASS_STRUCTURE: u8 = 1;
pub const CLASS_VEHICLE: u8 = 2;
pub const CLASS_SKY: u8 = 3;
pub const N_CLASSES: usize = 4;

/// An axis-aligned box with uniform diffuse albedo.
#[derive(Debug, Clone)]
pub struct OracleBox {
    pub min: Vec3,
    pub max: Vec3,
    pub albedo: Rgb,
    pub class: u8,
}

/// The analytic scene: ground plane at z = 0 plus boxes, one sun, one sky.
#[derive(Debug, Clone)]
pub struct OracleScene {
    pub aabb: Aabb,
    /// Sun angles in radians.
    pub sun_azimuth: f64,
    pub sun_zenith: f64,
    pub l_sun: Rgb,
    pub l_sky: Rgb,
    pub boxes: Vec<OracleBox>,
    /// The ground plane exists for |x|,|y| ≤ this.
    pub ground_half: f64,
    pub d_max: f64,
}

/// What a camera ray sees, before shading.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceHit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub albedo: Rgb,
    pub class: u8,
}

/// Everything the oracle knows about one pixel.
#[derive(Debug, Clone, Copy)]
pub struct OraclePixel {
    pub rgb: Rgb,
    pub deshadow: Rgb,
    pub albedo: Rgb,
    /// Zero for sky pixels (no supervision).
    pub normal: Vec3,
    pub class: u8,
    /// 1 = the sun is blocked at this surface.
    pub shadow: bool,
    pub depth: f64,
}

/// The diffuse shading identity shared with the renderer:
/// `albedo ⊙ (L_sun · max(n·l, 0) · vis + L_sky)`.
pub fn shade(albedo: Rgb, normal: Vec3, sun_dir: Vec3, vis: f64, l_sun: Rgb, l_sky: Rgb) -> Rgb {
    let ndl = normal.dot(sun_dir).max(0.0);
    let irr = Rgb {
        r: l_sun.r * ndl * vis + l_sky.r,
        g: l_sun.g * ndl * vis + l_sky.g,
        b: l_sun.b * ndl * vis + l_sky.b,
    };
    albedo.mul_elem(irr)
}

/// Slab-test a box; returns entry distance and outward normal of the entry
/// face for rays starting outside.
fn ray_box(ray: &Ray, bmin: Vec3, bmax: Vec3) -> Option<(f64, Vec3)> {
    let mut t0 = 1e-9;
    let mut t1 = f64::INFINITY;
    let mut axis = 3usize;
    for d in 0..3 {
        let o = ray.origin.comp(d);
        let v = ray.dir.comp(d);
        let (lo, hi) = (bmin.comp(d), bmax.comp(d));
        if v.abs() < 1e-12 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / v;
        let (mut near, mut far) = ((lo - o) * inv, (hi - o) * inv);
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        if near > t0 {
            t0 = near;
            axis = d;
        }
        t1 = t1.min(far);
        if t0 > t1 {
            return None;
        }
    }
    if axis == 3 {
        // Started inside the box; no well-defined entry face.
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = -ray.dir.comp(axis).signum();
    Some((t0, vec3(n[0], n[1], n[2])))
}

impl OracleScene {
    /// The scene every test in this crate trains against.
    pub fn default_scene() -> OracleScene {
        OracleScene {
            aabb: Aabb::new(vec3(-4.0, -4.0, 0.0), vec3(4.0, 4.0, 3.0)),
            sun_azimuth: 35f64.to_radians(),
            sun_zenith: 45f64.to_radians(),
            l_sun: Rgb { r: 0.95, g: 0.9, b: 0.85 },
            l_sky: Rgb { r: 0.18, g: 0.2, b: 0.24 },
            boxes: vec![
                OracleBox {
                    min: vec3(-2.2, -0.4, 0.0),
                    max: vec3(-0.7, 1.2, 1.5),
                    albedo: Rgb { r: 0.6, g: 0.32, b: 0.26 },
                    class: CLASS_STRUCTURE,
                },
                OracleBox {
                    min: vec3(0.6, -1.4, 0.0),
                    max: vec3(2.1, -0.3, 0.8),
                    albedo: Rgb { r: 0.22, g: 0.36, b: 0.62 },
                    class: CLASS_VEHICLE,
                },
                OracleBox {
                    min: vec3(0.3, 1.0, 0.0),
                    max: vec3(1.5, 2.2, 1.1),
                    albedo: Rgb { r: 0.42, g: 0.47, b: 0.4 },
                    class: CLASS_STRUCTURE,
                },
            ],
            ground_half: 4.0,
            d_max: 20.0,
        }
    }

    /// Unit vector toward the sun.
    pub fn sun_dir(&self) -> Vec3 {
        sun_direction(self.sun_azimuth, self.sun_zenith)
    }

    /// Checkerboard ground albedo with 1 m tiles.
    pub fn ground_albedo(&self, x: f64, y: f64) -> Rgb {
        let parity = (x.floor() + y.floor()) as i64 % 2 == 0;
        if parity {
            Rgb { r: 0.62, g: 0.62, b: 0.6 }
        } else {
            Rgb { r: 0.78, g: 0.68, b: 0.55 }
        }
    }

    /// Nearest surface along a ray, or `None` for sky.
    pub fn trace(&self, ray: &Ray) -> Option<SurfaceHit> {
        let mut best: Option<SurfaceHit> = None;
        if ray.dir.z < -1e-12 {
            let t = -ray.origin.z / ray.dir.z;
            if t > 1e-9 {
                let p = ray.at(t);
                if p.x.abs() <= self.ground_half && p.y.abs() <= self.ground_half {
                    best = Some(SurfaceHit {
                        t,
                        point: p,
                        normal: vec3(0.0, 0.0, 1.0),
                        albedo: self.ground_albedo(p.x, p.y),
                        class: CLASS_GROUND,
                    });
                }
            }
        }
        for b in &self.boxes {
            if let Some((t, n)) = ray_box(ray, b.min, b.max) {
                if best.as_ref().map_or(true, |h| t < h.t) {
                    best = Some(SurfaceHit {
                        t,
                        point: ray.at(t),
                        normal: n,
                        albedo: b.albedo,
                        class: b.class,
                    });
                }
            }
        }
        best
    }

    /// Is the sun blocked at a surface point with normal `n`? Faces turned
    /// away from the sun count as (attached) shadow — exactly what a shadow
    /// detector labels and what a transmittance march from inside an opaque
    /// body reports. Beyond that, only boxes cast shadows (the sun is above
    /// the horizon, so the ground cannot).
    pub fn in_shadow(&self, p: Vec3, n: Vec3, sun_dir: Vec3) -> bool {
        if n.dot(sun_dir) <= 1e-9 {
            return true;
        }
        let ray = Ray { origin: p + sun_dir * 1e-6, dir: sun_dir };
        self.boxes.iter().any(|b| ray_box(&ray, b.min, b.max).is_some())
    }

    /// Full ground truth for one camera ray under the scene's own sun.
    pub fn render_pixel(&self, ray: &Ray) -> OraclePixel {
        self.render_pixel_with_sun(ray, self.sun_dir())
    }

    /// Ground truth under an arbitrary sun direction (for relighting tests).
    pub fn render_pixel_with_sun(&self, ray: &Ray, sun_dir: Vec3) -> OraclePixel {
        match self.trace(ray) {
            Some(hit) => {
                let shadow = self.in_shadow(hit.point, hit.normal, sun_dir);
                let vis = if shadow { 0.0 } else { 1.0 };
                OraclePixel {
                    rgb: shade(hit.albedo, hit.normal, sun_dir, vis, self.l_sun, self.l_sky),
                    deshadow: shade(hit.albedo, hit.normal, sun_dir, 1.0, self.l_sun, self.l_sky),
                    albedo: hit.albedo,
                    normal: hit.normal,
                    class: hit.class,
                    shadow,
                    depth: hit.t,
                }
            }
            None => OraclePixel {
                rgb: self.l_sky,
                deshadow: self.l_sky,
                albedo: Rgb { r: 0.0, g: 0.0, b: 0.0 },
                normal: vec3(0.0, 0.0, 0.0),
                class: CLASS_SKY,
                shadow: false,
                depth: self.d_max,
            },
        }
    }
}
