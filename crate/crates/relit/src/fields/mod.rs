//! The neural scene model: two hash-grid encoders (geometry and appearance)
//! with per-attribute MLP heads.
//!
//! Geometry: `σ(x) = softplus(head(encode_geo(x)))`, initialized to a thin
//! uniform fog (σ ≈ 0.05 per scene unit). Appearance: albedo (sigmoid),
//! normal (safe-normalized), semantic logits (raw), and a sun-visibility
//! guide (sigmoid), each its own head over a second grid. Geometry and
//! appearance share no parameters, so density edits can never bleed into
//! reflectance and vice versa.
//!
//! Scene points are normalized into the dataset AABB's unit cube before
//! encoding; queries outside clamp to the box surface.

pub mod checkpoint;
pub mod hashgrid;
pub mod mlp;

use crate::geom::{Aabb, Vec3};
use crate::grad::{sigmoid, softplus, ParamGroup, ParamSet, Real};
use hashgrid::HashGridConfig;
use mlp::HeadConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Initial density per scene unit (fixes the final σ-head bias).
pub const SIGMA_INIT: f64 = 0.05;

/// ‖raw‖ below this maps to the (0,0,1) fallback in safe normalization.
pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub aabb_min: [f64; 3],
    pub aabb_max: [f64; 3],
    pub geo_grid: HashGridConfig,
    pub app_grid: HashGridConfig,
    /// Hidden widths shared by every head.
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    /// Index of the "sky" class within `n_classes`.
    pub sky_class: usize,
}

impl ModelConfig {
    pub fn with_aabb(aabb: Aabb, n_classes: usize, sky_class: usize) -> ModelConfig {
        ModelConfig {
            aabb_min: [aabb.min.x, aabb.min.y, aabb.min.z],
            aabb_max: [aabb.max.x, aabb.max.y, aabb.max.z],
            geo_grid: HashGridConfig::default(),
            app_grid: HashGridConfig::default(),
            hidden: vec![64, 64],
            n_classes,
            sky_class,
        }
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::new(
            Vec3 { x: self.aabb_min[0], y: self.aabb_min[1], z: self.aabb_min[2] },
            Vec3 { x: self.aabb_max[0], y: self.aabb_max[1], z: self.aabb_max[2] },
        )
    }

    pub fn head(&self, g: ParamGroup) -> HeadConfig {
        let (in_dim, out_dim) = match g {
            ParamGroup::GeoSigma => (self.geo_grid.out_dim(), 1),
            ParamGroup::AppAlbedo => (self.app_grid.out_dim(), 3),
            ParamGroup::AppNormal => (self.app_grid.out_dim(), 3),
            ParamGroup::AppSemantic => (self.app_grid.out_dim(), self.n_classes),
            ParamGroup::AppGuidevis => (self.app_grid.out_dim(), 1),
            _ => panic!("{} is not an MLP head", g.name()),
        };
        HeadConfig { in_dim, hidden: self.hidden.clone(), out_dim }
    }

    pub fn group_sizes(&self) -> [usize; 9] {
        [
            self.geo_grid.param_count(),
            self.head(ParamGroup::GeoSigma).param_count(),
            self.app_grid.param_count(),
            self.head(ParamGroup::AppAlbedo).param_count(),
            self.head(ParamGroup::AppNormal).param_count(),
            self.head(ParamGroup::AppSemantic).param_count(),
            self.head(ParamGroup::AppGuidevis).param_count(),
            3,
            3,
        ]
    }

    /// Unit-cube coordinates of a world point (clamped into the box).
    pub fn to_unit(&self, p: Vec3) -> [f64; 3] {
        let u = self.aabb().to_unit(p);
        [u.x, u.y, u.z]
    }

    /// Per-axis factor converting world direction components to unit-cube
    /// components (1/extent).
    pub fn unit_scale(&self) -> [f64; 3] {
        let e = self.aabb().extent();
        [1.0 / e.x, 1.0 / e.y, 1.0 / e.z]
    }
}

/// A full parameterized scene: config plus every trainable array (f32).
#[derive(Debug, Clone)]
pub struct SceneModel {
    pub cfg: ModelConfig,
    pub params: ParamSet<f32>,
}

/// Grid tables start in `U(−1e−4, 1e−4)`; heads are Kaiming-uniform with
/// zero biases except the final σ bias, set so σ starts at [`SIGMA_INIT`]
/// everywhere; lights start at sun (1,1,1), sky (0.2,0.2,0.2).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::with_sizes(cfg.group_sizes());
    let sigma_bias = (SIGMA_INIT.exp() - 1.0).ln() as f32;
    for g in crate::grad::PARAM_GROUPS {
        match g {
            ParamGroup::GeoGrid | ParamGroup::AppGrid => {
                for v in ps.group_mut(g).iter_mut() {
                    *v = rng.gen_range(-1e-4..1e-4);
                }
            }
            ParamGroup::LightSun => ps.group_mut(g).copy_from_slice(&[1.0, 1.0, 1.0]),
            ParamGroup::LightSky => ps.group_mut(g).copy_from_slice(&[0.2, 0.2, 0.2]),
            _ => {
                let bias = if g == ParamGroup::GeoSigma { sigma_bias } else { 0.0 };
                let head = cfg.head(g).init_params(&mut rng, bias);
                ps.group_mut(g).copy_from_slice(&head);
            }
        }
    }
    ps
}

impl SceneModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> SceneModel {
        let params = init_params(&cfg, seed);
        SceneModel { cfg, params }
    }

    /// `(name, values)` for every trainable group, fixed order.
    pub fn parameters(&self) -> impl Iterator<Item = (&'static str, &[f32])> {
        self.params.iter().map(|(g, v)| (g.name(), v))
    }

    pub fn sigma(&self, p: Vec3) -> f32 {
        query_sigma(&self.cfg, &self.params, self.cfg.to_unit(p))
    }

    pub fn appearance(&self, p: Vec3) -> AppearanceSample<f32> {
        query_appearance(&self.cfg, &self.params, self.cfg.to_unit(p))
    }

    pub fn density_normal(&self, p: Vec3) -> [f32; 3] {
        density_normal(&self.cfg, &self.params, self.cfg.to_unit(p))
    }
}

/// One appearance query: activated albedo and guide, unit normal, raw
/// semantic logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceSample<F> {
    pub albedo: [F; 3],
    pub normal: [F; 3],
    pub sem_logits: Vec<F>,
    pub guide_vis: F,
}

pub fn query_sigma<F: Real>(cfg: &ModelConfig, params: &ParamSet<F>, unit: [f64; 3]) -> F {
    sigma_batch(cfg, params, std::slice::from_ref(&unit))[0]
}

/// Batched density query (used by the occupancy grid and tests).
pub fn sigma_batch<F: Real>(cfg: &ModelConfig, params: &ParamSet<F>, pts: &[[f64; 3]]) -> Vec<F> {
    let grid = cfg.geo_grid;
    let mut enc = vec![F::zero(); pts.len() * grid.out_dim()];
    hashgrid::encode_fwd(&grid, params.group(ParamGroup::GeoGrid), pts, &mut enc);
    let head = cfg.head(ParamGroup::GeoSigma);
    let raw = mlp::head_forward(&head, params.group(ParamGroup::GeoSigma), &enc, pts.len());
    raw.into_iter().map(softplus).collect()
}

pub fn safe_normalize<F: Real>(v: [F; 3]) -> [F; 3] {
    let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let n = n2.sqrt();
    if n.to_f64() <= NORMALIZE_EPS {
        [F::zero(), F::zero(), F::one()]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

pub fn query_appearance<F: Real>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    unit: [f64; 3],
) -> AppearanceSample<F> {
    let grid = cfg.app_grid;
    let mut enc = vec![F::zero(); grid.out_dim()];
    hashgrid::encode_fwd(&grid, params.group(ParamGroup::AppGrid), std::slice::from_ref(&unit), &mut enc);
    let run = |g: ParamGroup| mlp::head_forward(&cfg.head(g), params.group(g), &enc, 1);
    let alb = run(ParamGroup::AppAlbedo);
    let nrm = run(ParamGroup::AppNormal);
    let sem = run(ParamGroup::AppSemantic);
    let gv = run(ParamGroup::AppGuidevis);
    AppearanceSample {
        albedo: [sigmoid(alb[0]), sigmoid(alb[1]), sigmoid(alb[2])],
        normal: safe_normalize([nrm[0], nrm[1], nrm[2]]),
        sem_logits: sem,
        guide_vis: sigmoid(gv[0]),
    }
}

/// Analytic surface normal from the density field: `n̂ = −∇σ/‖∇σ‖`, with the
/// gradient taken in *world* coordinates. Computed by forward-mode
/// differentiation through the encoding and the σ head (exact, no stencil).
pub fn density_normal<F: Real>(cfg: &ModelConfig, params: &ParamSet<F>, unit: [f64; 3]) -> [F; 3] {
    let g = density_gradient(cfg, params, unit);
    let neg = [-g[0], -g[1], -g[2]];
    let n2 = neg[0] * neg[0] + neg[1] * neg[1] + neg[2] * neg[2];
    if n2.to_f64().sqrt() <= 1e-10 {
        return [F::zero(), F::zero(), F::one()];
    }
    safe_normalize(neg)
}

/// ∇σ in world coordinates at one point.
pub fn density_gradient<F: Real>(cfg: &ModelConfig, params: &ParamSet<F>, unit: [f64; 3]) -> [F; 3] {
    let grid = cfg.geo_grid;
    let table = params.group(ParamGroup::GeoGrid);
    let head = cfg.head(ParamGroup::GeoSigma);
    let hp = params.group(ParamGroup::GeoSigma);
    let scale = cfg.unit_scale();

    let mut e = vec![F::zero(); grid.out_dim()];
    hashgrid::encode_fwd(&grid, table, std::slice::from_ref(&unit), &mut e);

    let mut out = [F::zero(); 3];
    for axis in 0..3 {
        // World unit step along `axis` is `scale[axis]` in cube coordinates.
        let mut dir = [0f64; 3];
        dir[axis] = scale[axis];
        let mut de = vec![F::zero(); grid.out_dim()];
        hashgrid::encode_jvp_fwd(&grid, table, std::slice::from_ref(&unit), std::slice::from_ref(&dir), &mut de);

        // Push the tangent through the head: dz = W·da, da = dz·1[z>0].
        let mut a = e.clone();
        let mut da = de;
        let mut dim = head.in_dim;
        for l in 0..head.n_layers() {
            let lr = head.layer(l);
            let w = &hp[lr.w_offset..lr.w_offset + lr.fan_in * lr.fan_out];
            let b = &hp[lr.b_offset..lr.b_offset + lr.fan_out];
            let mut z = vec![F::zero(); lr.fan_out];
            let mut dz = vec![F::zero(); lr.fan_out];
            mlp::linear_fwd(&a, w, Some(b), 1, dim, lr.fan_out, &mut z);
            mlp::linear_fwd(&da, w, None, 1, dim, lr.fan_out, &mut dz);
            if l + 1 < head.n_layers() {
                for o in 0..lr.fan_out {
                    if z[o] < F::zero() {
                        z[o] = F::zero();
                        dz[o] = F::zero();
                    }
                }
            }
            a = z;
            da = dz;
            dim = lr.fan_out;
        }
        // σ = softplus(pre): dσ = sigmoid(pre)·dpre.
        out[axis] = sigmoid(a[0]) * da[0];
    }
    out
}
