//! Light models: the sun/sky pair used for outdoor capture and the
//! spotlights used for night simulation.
//!
//! Conventions: +z is world up; the sun is parameterized by azimuth ψ
//! (radians around +z from +x) and zenith φ (radians off +z), and
//! `sun_direction` points *toward* the sun. Spotlights emit along their
//! axis with a `cosᵏ` falloff and inverse-square attenuation.

use crate::geom::{rgb, vec3, Rgb, Vec3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Sun + uniform sky environment. Colors are linear RGB intensities; during
/// training they are the optimizer's copies and these are initial values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SunSky {
    /// Azimuth ψ in radians.
    pub azimuth: f64,
    /// Zenith φ in radians (0 = straight up).
    pub zenith: f64,
    pub sun_color: [f64; 3],
    pub sky_color: [f64; 3],
}

impl SunSky {
    pub fn sun_dir(&self) -> Vec3 {
        sun_direction(self.azimuth, self.zenith)
    }

    pub fn sun_rgb(&self) -> Rgb {
        rgb(self.sun_color[0], self.sun_color[1], self.sun_color[2])
    }

    pub fn sky_rgb(&self) -> Rgb {
        rgb(self.sky_color[0], self.sky_color[1], self.sky_color[2])
    }
}

/// Unit vector toward the sun: `(sinφ cosψ, sinφ sinψ, cosφ)`.
pub fn sun_direction(azimuth: f64, zenith: f64) -> Vec3 {
    let (saz, caz) = azimuth.sin_cos();
    let (sze, cze) = zenith.sin_cos();
    vec3(sze * caz, sze * saz, cze)
}

pub const NIGHT_SKY_DEFAULT: [f64; 3] = [0.01, 0.01, 0.02];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spotlight {
    pub position: [f64; 3],
    /// Beam axis, away from the light. Normalized on load.
    pub direction: [f64; 3],
    pub color: [f64; 3],
    /// Beam concentration k in `max(l·d, 0)^k`.
    pub exponent: f64,
}

impl Spotlight {
    pub fn pos(&self) -> Vec3 {
        vec3(self.position[0], self.position[1], self.position[2])
    }

    pub fn axis(&self) -> Vec3 {
        vec3(self.direction[0], self.direction[1], self.direction[2])
            .normalized()
            .expect("spotlight direction must be nonzero")
    }

    pub fn rgb(&self) -> Rgb {
        rgb(self.color[0], self.color[1], self.color[2])
    }
}

/// Incident radiance from `spot` at `x` (before any occlusion):
/// `color · max(l·d, 0)^k / ‖o − x‖²` with `l` the unit vector from the
/// light to `x`.
pub fn spotlight_radiance(spot: &Spotlight, x: Vec3) -> Rgb {
    let to_x = x - spot.pos();
    let dist2 = to_x.dot(to_x);
    if dist2 < 1e-12 {
        // At the emitter itself the model diverges; call it dark rather
        // than propagate an infinity.
        return Rgb::BLACK;
    }
    let l = to_x / dist2.sqrt();
    let c = l.dot(spot.axis()).max(0.0);
    if c == 0.0 {
        return Rgb::BLACK;
    }
    spot.rgb() * (c.powf(spot.exponent) / dist2)
}

/// A night lighting rig: spotlights plus a dim ambient sky.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NightRig {
    #[serde(default = "default_night_sky")]
    pub sky: [f64; 3],
    pub spots: Vec<Spotlight>,
}

fn default_night_sky() -> [f64; 3] {
    NIGHT_SKY_DEFAULT
}

impl NightRig {
    pub fn sky_rgb(&self) -> Rgb {
        rgb(self.sky[0], self.sky[1], self.sky[2])
    }
}

#[derive(Debug, Error)]
pub enum LightsError {
    #[error("lights file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lights file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("lights file {path}: spotlight {index} has zero direction")]
    ZeroDirection { path: String, index: usize },
}

pub fn load_lights(path: &Path) -> Result<NightRig, LightsError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| LightsError::Io { path: p.clone(), source: e })?;
    let rig: NightRig =
        serde_json::from_str(&text).map_err(|e| LightsError::Json { path: p.clone(), source: e })?;
    for (index, s) in rig.spots.iter().enumerate() {
        let d = vec3(s.direction[0], s.direction[1], s.direction[2]);
        if d.norm() < 1e-12 {
            return Err(LightsError::ZeroDirection { path: p, index });
        }
    }
    Ok(rig)
}

pub fn save_lights(path: &Path, rig: &NightRig) -> Result<(), LightsError> {
    let p = path.display().to_string();
    let text = serde_json::to_string_pretty(rig).expect("light rig serializes");
    std::fs::write(path, text).map_err(|e| LightsError::Io { path: p, source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn sun_direction_axes() {
        assert!((sun_direction(0.0, 0.0) - vec3(0.0, 0.0, 1.0)).norm() < 1e-15);
        assert!((sun_direction(0.0, FRAC_PI_2) - vec3(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((sun_direction(FRAC_PI_2, FRAC_PI_2) - vec3(0.0, 1.0, 0.0)).norm() < 1e-15);
        assert!((sun_direction(PI, FRAC_PI_2) - vec3(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn spotlight_on_axis_and_falloff() {
        let spot = Spotlight {
            position: [0.0, 0.0, 2.0],
            direction: [0.0, 0.0, -1.0],
            color: [3.0, 2.0, 1.0],
            exponent: 8.0,
        };
        // On axis, one unit away: exactly the color.
        let r = spotlight_radiance(&spot, vec3(0.0, 0.0, 1.0));
        assert!(r.max_abs_diff(rgb(3.0, 2.0, 1.0)) < 1e-12);
        // On axis, two units away: a quarter.
        let r = spotlight_radiance(&spot, vec3(0.0, 0.0, 0.0));
        assert!(r.max_abs_diff(rgb(0.75, 0.5, 0.25)) < 1e-12);
        // Behind the emitter: dark.
        let r = spotlight_radiance(&spot, vec3(0.0, 0.0, 3.0));
        assert_eq!(r, Rgb::BLACK);
        // The cosine clamp means a point at exactly 90° is dark too.
        let r = spotlight_radiance(&spot, vec3(1.0, 0.0, 2.0));
        assert_eq!(r, Rgb::BLACK);
    }

    #[test]
    fn spotlight_radiance_decreases_along_axis() {
        let spot = Spotlight {
            position: [1.0, -2.0, 5.0],
            direction: [0.0, 0.3, -1.0],
            color: [2.0, 2.0, 2.0],
            exponent: 4.0,
        };
        let axis = spot.axis();
        let mut prev = f64::INFINITY;
        for i in 1..40 {
            let d = 0.25 * i as f64;
            let r = spotlight_radiance(&spot, spot.pos() + axis * d).r;
            assert!(r < prev, "radiance must fall monotonically on the axis: {r} vs {prev}");
            prev = r;
        }
    }

    #[test]
    fn lights_json_round_trip() {
        let rig = NightRig {
            sky: [0.02, 0.02, 0.03],
            spots: vec![Spotlight {
                position: [0.0, 1.0, 4.0],
                direction: [0.0, 0.0, -1.0],
                color: [5.0, 4.5, 4.0],
                exponent: 16.0,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lights.json");
        save_lights(&path, &rig).unwrap();
        let back = load_lights(&path).unwrap();
        assert_eq!(rig, back);
    }

    #[test]
    fn lights_json_defaults_night_sky() {
        let rig: NightRig = serde_json::from_str(r#"{"spots": []}"#).unwrap();
        assert_eq!(rig.sky, NIGHT_SKY_DEFAULT);
    }

    #[test]
    fn lights_json_rejects_zero_direction() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"spots": [{"position": [0,0,0], "direction": [0,0,0], "color": [1,1,1], "exponent": 2}]}"#,
        )
        .unwrap();
        let err = load_lights(&path).unwrap_err();
        assert!(err.to_string().contains("zero direction"), "{err}");
    }

    proptest! {
        #[test]
        fn sun_direction_is_unit(az in -10.0..10.0, ze in -10.0..10.0) {
            prop_assert!((sun_direction(az, ze).norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn spotlight_radiance_nonnegative(px in -5.0..5.0, py in -5.0..5.0, pz in -5.0..5.0) {
            let spot = Spotlight {
                position: [0.0, 0.0, 3.0],
                direction: [0.2, 0.0, -1.0],
                color: [1.5, 1.0, 0.5],
                exponent: 6.0,
            };
            let r = spotlight_radiance(&spot, vec3(px, py, pz));
            prop_assert!(r.r >= 0.0 && r.g >= 0.0 && r.b >= 0.0);
            prop_assert!(r.r.is_finite() && r.g.is_finite() && r.b.is_finite());
        }
    }
}
