//! Coarse density cache so ray marching can skip empty space.
//!
//! A `res³` grid over the scene box stores a running max of σ per cell.
//! Samples landing in cells at or below the threshold are dropped before
//! any network evaluation — with σ = 0 they would contribute nothing to
//! compositing anyway, so skipping them changes no value, only cost.
//!
//! The grid starts saturated (nothing is skipped), takes free max-splats
//! from every training batch, and is periodically refreshed: decay all
//! cells, then probe the field at one jittered point per cell so emptied
//! regions fall below the threshold and newly dense ones come back.

use crate::fields::{sigma_batch, ModelConfig};
use crate::geom::{vec3, Aabb, Vec3};
use crate::grad::{ParamSet, Real};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_RES: usize = 64;
pub const DEFAULT_THRESHOLD: f32 = 5e-3;
const DECAY: f32 = 0.5;
const PROBE_CHUNK: usize = 8192;

#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    aabb: Aabb,
    res: usize,
    sigma_max: Vec<f32>,
    pub threshold: f32,
}

impl OccupancyGrid {
    /// Starts saturated: every cell active until the first refresh.
    pub fn new(aabb: Aabb, res: usize, threshold: f32) -> OccupancyGrid {
        OccupancyGrid { aabb, res, sigma_max: vec![f32::MAX; res * res * res], threshold }
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn aabb(&self) -> Aabb {
        self.aabb
    }

    #[inline]
    fn cell_of(&self, p: Vec3) -> usize {
        let e = self.aabb.extent();
        let f = |v: f64, min: f64, ext: f64| -> usize {
            let u = ((v - min) / ext * self.res as f64).floor();
            (u.max(0.0) as usize).min(self.res - 1)
        };
        let (x, y, z) = (f(p.x, self.aabb.min.x, e.x), f(p.y, self.aabb.min.y, e.y), f(p.z, self.aabb.min.z, e.z));
        (z * self.res + y) * self.res + x
    }

    /// Should a sample at `p` be evaluated at all?
    #[inline]
    pub fn active(&self, p: Vec3) -> bool {
        self.sigma_max[self.cell_of(p)] > self.threshold
    }

    /// Free update from a σ value the trainer already computed.
    #[inline]
    pub fn splat_max(&mut self, p: Vec3, sigma: f32) {
        let c = self.cell_of(p);
        if sigma > self.sigma_max[c] || self.sigma_max[c] == f32::MAX {
            self.sigma_max[c] = sigma;
        }
    }

    /// Decay everything, then probe one jittered point per cell against the
    /// current field. Keeps the grid in sync with a moving solution.
    pub fn refresh<F: Real>(&mut self, cfg: &ModelConfig, params: &ParamSet<F>, rng: &mut ChaCha8Rng) {
        for v in self.sigma_max.iter_mut() {
            if *v == f32::MAX {
                *v = 0.0; // saturation ends at the first refresh
            } else {
                *v *= DECAY;
            }
        }
        let e = self.aabb.extent();
        let cell = vec3(e.x / self.res as f64, e.y / self.res as f64, e.z / self.res as f64);
        let n = self.res * self.res * self.res;
        let mut idx = 0usize;
        let mut pts: Vec<[f64; 3]> = Vec::with_capacity(PROBE_CHUNK);
        let mut cells: Vec<usize> = Vec::with_capacity(PROBE_CHUNK);
        while idx < n {
            pts.clear();
            cells.clear();
            for c in idx..(idx + PROBE_CHUNK).min(n) {
                let x = c % self.res;
                let y = (c / self.res) % self.res;
                let z = c / (self.res * self.res);
                let p = vec3(
                    self.aabb.min.x + (x as f64 + rng.gen_range(0.0..1.0)) * cell.x,
                    self.aabb.min.y + (y as f64 + rng.gen_range(0.0..1.0)) * cell.y,
                    self.aabb.min.z + (z as f64 + rng.gen_range(0.0..1.0)) * cell.z,
                );
                pts.push(cfg.to_unit(p));
                cells.push(c);
            }
            let sigmas = sigma_batch(cfg, params, &pts);
            for (c, s) in cells.iter().zip(&sigmas) {
                let sv = s.to_f64() as f32;
                if sv > self.sigma_max[*c] {
                    self.sigma_max[*c] = sv;
                }
            }
            idx += PROBE_CHUNK;
        }
    }

    pub fn active_fraction(&self) -> f64 {
        let n = self.sigma_max.iter().filter(|&&v| v > self.threshold).count();
        n as f64 / self.sigma_max.len() as f64
    }

    pub fn data(&self) -> &[f32] {
        &self.sigma_max
    }

    /// Rebuild from checkpointed cell values.
    pub fn from_data(aabb: Aabb, res: usize, threshold: f32, data: Vec<f32>) -> OccupancyGrid {
        assert_eq!(data.len(), res * res * res, "occupancy tensor size");
        OccupancyGrid { aabb, res, sigma_max: data, threshold }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::init_params;
    use rand::SeedableRng;

    fn test_aabb() -> Aabb {
        Aabb::new(vec3(-2.0, -2.0, 0.0), vec3(2.0, 2.0, 2.0))
    }

    #[test]
    fn fresh_grid_skips_nothing() {
        let g = OccupancyGrid::new(test_aabb(), 8, 5e-3);
        assert!(g.active(vec3(0.0, 0.0, 1.0)));
        assert!(g.active(vec3(-1.99, 1.99, 0.01)));
        assert!((g.active_fraction() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cell_indexing_covers_the_box_and_clamps() {
        let g = OccupancyGrid::new(test_aabb(), 4, 5e-3);
        // Corners map to the first and last cells even with fp overshoot.
        assert_eq!(g.cell_of(vec3(-2.0, -2.0, 0.0)), 0);
        assert_eq!(g.cell_of(vec3(2.0 + 1e-9, 2.0 + 1e-9, 2.0 + 1e-9)), 4 * 4 * 4 - 1);
        // A point in the second x-cell, first y/z.
        assert_eq!(g.cell_of(vec3(-0.9, -1.9, 0.1)), 1);
    }

    #[test]
    fn splat_then_threshold_controls_active() {
        let mut g = OccupancyGrid::new(test_aabb(), 8, 5e-3);
        // End saturation by zeroing, then splat one hot cell.
        for v in g.sigma_max.iter_mut() {
            *v = 0.0;
        }
        let p = vec3(0.3, -0.7, 1.1);
        assert!(!g.active(p));
        g.splat_max(p, 0.5);
        assert!(g.active(p));
        assert!(!g.active(vec3(-1.5, 1.5, 0.2)));
        let frac = g.active_fraction();
        assert!((frac - 1.0 / 512.0).abs() < 1e-12, "{frac}");
    }

    #[test]
    fn refresh_tracks_the_field() {
        // A freshly initialized model has σ ≈ 0.05 everywhere, which is
        // above the default threshold: refresh must keep everything active.
        let aabb = test_aabb();
        let cfg = ModelConfig::with_aabb(aabb, 4, 3);
        let params = init_params(&cfg, 7);
        let mut g = OccupancyGrid::new(aabb, 8, DEFAULT_THRESHOLD);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        g.refresh(&cfg, &params, &mut rng);
        assert!(g.active_fraction() > 0.99, "{}", g.active_fraction());
        // With a threshold above the init level, repeated refreshes decay
        // cells below threshold (probes keep them near 0.05 < 0.1).
        let mut g2 = OccupancyGrid::new(aabb, 8, 0.1);
        g2.refresh(&cfg, &params, &mut rng);
        assert!(g2.active_fraction() < 0.01, "{}", g2.active_fraction());
    }

    #[test]
    fn round_trips_through_raw_data() {
        let mut g = OccupancyGrid::new(test_aabb(), 4, 5e-3);
        g.splat_max(vec3(0.0, 0.0, 1.0), 0.25);
        let back =
            OccupancyGrid::from_data(test_aabb(), 4, 5e-3, g.data().to_vec());
        assert_eq!(g.sigma_max, back.sigma_max);
    }
}
