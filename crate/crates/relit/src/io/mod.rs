//! Dataset manifests, float/byte image buffers, and file plumbing.
//!
//! A dataset is a JSON manifest plus image files. The manifest carries the
//! scene block (AABB, known sun angles, class map, far-field distance) and
//! one entry per frame (intrinsics, a row-major 3×4 camera-to-world pose,
//! and paths to the captured RGB, the deshadowed RGB, the shadow mask, the
//! world-space normal map, and the semantic label map — plus optional
//! ground-truth albedo/depth used only by evaluation). All paths are
//! relative to the manifest's directory.
//!
//! Every write here lands atomically: bytes go to a sibling temp file which
//! is renamed over the target, so a crash never leaves a half-written file
//! behind under the final name.

pub mod pfm;
pub mod png;

use crate::geom::{vec3, Aabb, Camera, Pose, Vec3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Row-major interleaved float image, top-down rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: u32, height: u32, channels: u32) -> ImageBuf {
        ImageBuf {
            width,
            height,
            channels,
            data: vec![0.0; (width * height * channels) as usize],
        }
    }

    #[inline]
    pub fn idx(&self, x: u32, y: u32) -> usize {
        ((y * self.width + x) * self.channels) as usize
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let i = self.idx(x, y);
        &self.data[i..i + self.channels as usize]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [f32] {
        let i = self.idx(x, y);
        let c = self.channels as usize;
        &mut self.data[i..i + c]
    }

    pub fn n_pixels(&self) -> usize {
        (self.width * self.height) as usize
    }
}

/// Write-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub scene: SceneMeta,
    pub frames: Vec<FrameMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneMeta {
    /// min x,y,z then max x,y,z.
    pub aabb: [f64; 6],
    pub sun_azimuth_deg: f64,
    pub sun_zenith_deg: f64,
    /// Class name → label index. Must contain "sky".
    pub classes: BTreeMap<String, u32>,
    /// Far-field distance used for background depth.
    pub d_max: f64,
    /// Dataset-generator ground truth, consumed only by evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sun_color: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sky_color: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CameraMeta {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrameMeta {
    pub camera: CameraMeta,
    /// Row-major 3×4 camera-to-world: [r00 r01 r02 t0  r10 … t1  r20 … t2].
    pub pose: [f64; 12],
    pub rgb: String,
    pub deshadow: String,
    pub shadow: String,
    pub normal: String,
    pub semantic: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub albedo: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
}

impl FrameMeta {
    pub fn to_camera(&self) -> Camera {
        let p = &self.pose;
        Camera {
            fx: self.camera.fx,
            fy: self.camera.fy,
            cx: self.camera.cx,
            cy: self.camera.cy,
            width: self.camera.width,
            height: self.camera.height,
            pose: Pose {
                r: [
                    [p[0], p[1], p[2]],
                    [p[4], p[5], p[6]],
                    [p[8], p[9], p[10]],
                ],
                t: vec3(p[3], p[7], p[11]),
            },
        }
    }

    pub fn pose_from_camera(cam: &Camera) -> [f64; 12] {
        let r = cam.pose.r;
        let t = cam.pose.t;
        [
            r[0][0], r[0][1], r[0][2], t.x, //
            r[1][0], r[1][1], r[1][2], t.y, //
            r[2][0], r[2][1], r[2][2], t.z,
        ]
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Pfm(#[from] pfm::PfmError),
    #[error(transparent)]
    Png(#[from] png::PngError),
}

fn invalid(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    serde_json::from_str(&text)
        .map_err(|e| DataError::Json { path: path.display().to_string(), source: e })
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    atomic_write(path, text.as_bytes())
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
}

/// Structural checks on the manifest plus existence of every referenced
/// file. `base` is the manifest's directory.
pub fn validate_manifest(m: &Manifest, base: &Path) -> Result<(), DataError> {
    let a = m.scene.aabb;
    for d in 0..3 {
        if !(a[d] < a[d + 3]) {
            return Err(invalid(format!(
                "scene.aabb: min[{d}] = {} must be below max[{d}] = {}",
                a[d],
                a[d + 3]
            )));
        }
    }
    if !(m.scene.d_max > 0.0) {
        return Err(invalid(format!("scene.d_max: must be positive, got {}", m.scene.d_max)));
    }
    if m.scene.classes.is_empty() {
        return Err(invalid("scene.classes: empty class map"));
    }
    if !m.scene.classes.contains_key("sky") {
        return Err(invalid("scene.classes: missing required class 'sky'"));
    }
    let n = m.scene.classes.len() as u32;
    let mut seen = vec![false; n as usize];
    for (name, idx) in &m.scene.classes {
        if *idx >= n {
            return Err(invalid(format!(
                "scene.classes: class '{name}' has index {idx}, expected 0..{n}"
            )));
        }
        if std::mem::replace(&mut seen[*idx as usize], true) {
            return Err(invalid(format!("scene.classes: duplicate index {idx} (class '{name}')")));
        }
    }
    if m.frames.is_empty() {
        return Err(invalid("frames: manifest has no frames"));
    }
    for (i, f) in m.frames.iter().enumerate() {
        let c = &f.camera;
        if !(c.fx > 0.0 && c.fy > 0.0) {
            return Err(invalid(format!("frames[{i}].camera: fx/fy must be positive")));
        }
        if c.width == 0 || c.height == 0 {
            return Err(invalid(format!("frames[{i}].camera: zero width or height")));
        }
        let cam = f.to_camera();
        let err = cam.pose.orthonormality_error();
        if err > 1e-4 {
            return Err(invalid(format!(
                "frames[{i}].pose: rotation is not orthonormal (deviation {err:.2e})"
            )));
        }
        for (field, rel) in [
            ("rgb", Some(&f.rgb)),
            ("deshadow", Some(&f.deshadow)),
            ("shadow", Some(&f.shadow)),
            ("normal", Some(&f.normal)),
            ("semantic", Some(&f.semantic)),
            ("albedo", f.albedo.as_ref()),
            ("depth", f.depth.as_ref()),
        ] {
            if let Some(rel) = rel {
                let p = base.join(rel);
                if !p.is_file() {
                    return Err(invalid(format!(
                        "frames[{i}].{field}: file '{rel}' not found under {}",
                        base.display()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// One fully-loaded training view.
#[derive(Debug, Clone)]
pub struct Frame {
    pub camera: Camera,
    pub rgb: ImageBuf,
    pub deshadow: ImageBuf,
    /// 1 = shadowed.
    pub shadow: ImageBuf,
    /// World-space unit normals; zero rows mean "no supervision here".
    pub normal: ImageBuf,
    /// Class index per pixel; 255 = ignore.
    pub semantic: Vec<u8>,
    pub albedo_gt: Option<ImageBuf>,
    pub depth_gt: Option<ImageBuf>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub aabb: Aabb,
    pub sun_azimuth: f64,
    pub sun_zenith: f64,
    pub classes: BTreeMap<String, u32>,
    pub sky_class: u32,
    pub d_max: f64,
    pub sun_color_gt: Option<[f64; 3]>,
    pub sky_color_gt: Option<[f64; 3]>,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn sun_dir(&self) -> Vec3 {
        crate::lighting::sun_direction(self.sun_azimuth, self.sun_zenith)
    }
}

/// Load and validate a dataset. `srgb` linearizes the RGB/deshadow images
/// on read (for real photographs; generated data is already linear).
pub fn load_dataset(manifest_path: &Path, srgb: bool) -> Result<Dataset, DataError> {
    let m = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    validate_manifest(&m, &base)?;
    let n_classes = m.scene.classes.len();
    let mut frames = Vec::with_capacity(m.frames.len());
    for (i, fm) in m.frames.iter().enumerate() {
        frames.push(load_frame(i, fm, &base, srgb, n_classes)?);
    }
    let a = m.scene.aabb;
    Ok(Dataset {
        aabb: Aabb::new(vec3(a[0], a[1], a[2]), vec3(a[3], a[4], a[5])),
        sun_azimuth: m.scene.sun_azimuth_deg.to_radians(),
        sun_zenith: m.scene.sun_zenith_deg.to_radians(),
        sky_class: m.scene.classes["sky"],
        classes: m.scene.classes,
        d_max: m.scene.d_max,
        sun_color_gt: m.scene.sun_color,
        sky_color_gt: m.scene.sky_color,
        frames,
    })
}

fn load_frame(
    i: usize,
    fm: &FrameMeta,
    base: &PathBuf,
    srgb: bool,
    n_classes: usize,
) -> Result<Frame, DataError> {
    let camera = fm.to_camera();
    let (w, h) = (fm.camera.width, fm.camera.height);
    let check_dims = |field: &str, img: &ImageBuf| -> Result<(), DataError> {
        if img.width != w || img.height != h {
            return Err(invalid(format!(
                "frames[{i}].{field}: image is {}x{}, camera says {w}x{h}",
                img.width, img.height
            )));
        }
        Ok(())
    };
    let rgb = png::read_png(&base.join(&fm.rgb), srgb)?;
    check_dims("rgb", &rgb)?;
    if rgb.channels != 3 {
        return Err(invalid(format!("frames[{i}].rgb: expected 3 channels")));
    }
    let deshadow = png::read_png(&base.join(&fm.deshadow), srgb)?;
    check_dims("deshadow", &deshadow)?;
    let mut shadow = png::read_png(&base.join(&fm.shadow), false)?;
    check_dims("shadow", &shadow)?;
    if shadow.channels != 1 {
        // Collapse to the first channel.
        let c = shadow.channels as usize;
        shadow = ImageBuf {
            width: shadow.width,
            height: shadow.height,
            channels: 1,
            data: shadow.data.iter().step_by(c).copied().collect(),
        };
    }
    let normal = pfm::read_pfm(&base.join(&fm.normal))?;
    check_dims("normal", &normal)?;
    if normal.channels != 3 {
        return Err(invalid(format!("frames[{i}].normal: expected a 3-channel PFM")));
    }
    let (sw, sh, semantic) = png::read_label_png(&base.join(&fm.semantic))?;
    if sw != w || sh != h {
        return Err(invalid(format!(
            "frames[{i}].semantic: image is {sw}x{sh}, camera says {w}x{h}"
        )));
    }
    for (pi, l) in semantic.iter().enumerate() {
        if *l != 255 && *l as usize >= n_classes {
            return Err(invalid(format!(
                "frames[{i}].semantic: pixel {pi} has label {l}, classes has {n_classes} entries"
            )));
        }
    }
    let albedo_gt = match &fm.albedo {
        Some(p) => {
            let img = png::read_png(&base.join(p), false)?;
            check_dims("albedo", &img)?;
            Some(img)
        }
        None => None,
    };
    let depth_gt = match &fm.depth {
        Some(p) => {
            let img = pfm::read_pfm(&base.join(p))?;
            check_dims("depth", &img)?;
            Some(img)
        }
        None => None,
    };
    Ok(Frame { camera, rgb, deshadow, shadow, normal, semantic, albedo_gt, depth_gt })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_stub_images(dir: &Path, w: u32, h: u32) {
        let rgb = ImageBuf::new(w, h, 3);
        png::write_png(&dir.join("rgb.png"), &rgb).unwrap();
        png::write_png(&dir.join("deshadow.png"), &rgb).unwrap();
        png::write_png(&dir.join("shadow.png"), &ImageBuf::new(w, h, 1)).unwrap();
        pfm::write_pfm(&dir.join("normal.pfm"), &ImageBuf::new(w, h, 3)).unwrap();
        png::write_label_png(&dir.join("sem.png"), w, h, &vec![0u8; (w * h) as usize]).unwrap();
    }

    fn stub_manifest() -> Manifest {
        Manifest {
            scene: SceneMeta {
                aabb: [-1.0, -1.0, 0.0, 1.0, 1.0, 1.0],
                sun_azimuth_deg: 30.0,
                sun_zenith_deg: 45.0,
                classes: [("ground".into(), 0u32), ("sky".into(), 1u32)].into_iter().collect(),
                d_max: 3.0,
                sun_color: None,
                sky_color: None,
            },
            frames: vec![FrameMeta {
                camera: CameraMeta { fx: 8.0, fy: 8.0, cx: 4.0, cy: 4.0, width: 8, height: 8 },
                pose: [1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., -3.],
                rgb: "rgb.png".into(),
                deshadow: "deshadow.png".into(),
                shadow: "shadow.png".into(),
                normal: "normal.pfm".into(),
                semantic: "sem.png".into(),
                albedo: None,
                depth: None,
            }],
        }
    }

    #[test]
    fn manifest_json_round_trip_and_load() {
        let dir = tempfile::tempdir().unwrap();
        write_stub_images(dir.path(), 8, 8);
        let m = stub_manifest();
        let mp = dir.path().join("manifest.json");
        save_manifest(&mp, &m).unwrap();
        let back = load_manifest(&mp).unwrap();
        assert_eq!(m, back);
        let ds = load_dataset(&mp, false).unwrap();
        assert_eq!(ds.frames.len(), 1);
        assert_eq!(ds.sky_class, 1);
        assert_eq!(ds.n_classes(), 2);
        assert!((ds.sun_zenith - 45f64.to_radians()).abs() < 1e-12);
        assert_eq!(ds.frames[0].camera.width, 8);
    }

    #[test]
    fn missing_file_error_names_frame_and_field() {
        let dir = tempfile::tempdir().unwrap();
        write_stub_images(dir.path(), 8, 8);
        std::fs::remove_file(dir.path().join("shadow.png")).unwrap();
        let err = validate_manifest(&stub_manifest(), dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frames[0].shadow"), "{msg}");
    }

    #[test]
    fn bad_pose_error_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        write_stub_images(dir.path(), 8, 8);
        let mut m = stub_manifest();
        m.frames[0].pose[0] = 2.0;
        let err = validate_manifest(&m, dir.path()).unwrap_err();
        assert!(err.to_string().contains("frames[0].pose"), "{}", err);
    }

    #[test]
    fn missing_sky_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_stub_images(dir.path(), 8, 8);
        let mut m = stub_manifest();
        m.scene.classes = [("ground".to_string(), 0u32)].into_iter().collect();
        let err = validate_manifest(&m, dir.path()).unwrap_err();
        assert!(err.to_string().contains("sky"), "{}", err);
    }

    #[test]
    fn inverted_aabb_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_stub_images(dir.path(), 8, 8);
        let mut m = stub_manifest();
        m.scene.aabb = [1.0, -1.0, 0.0, -1.0, 1.0, 1.0];
        let err = validate_manifest(&m, dir.path()).unwrap_err();
        assert!(err.to_string().contains("scene.aabb"), "{}", err);
    }

    #[test]
    fn dim_mismatch_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        write_stub_images(dir.path(), 8, 8);
        // Overwrite rgb with the wrong size.
        png::write_png(&dir.path().join("rgb.png"), &ImageBuf::new(4, 4, 3)).unwrap();
        let mp = dir.path().join("manifest.json");
        save_manifest(&mp, &stub_manifest()).unwrap();
        let err = load_dataset(&mp, false).unwrap_err();
        assert!(err.to_string().contains("frames[0].rgb"), "{}", err);
    }

    #[test]
    fn out_of_range_semantic_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_stub_images(dir.path(), 8, 8);
        let mut labels = vec![0u8; 64];
        labels[10] = 9; // only 2 classes
        png::write_label_png(&dir.path().join("sem.png"), 8, 8, &labels).unwrap();
        let mp = dir.path().join("manifest.json");
        save_manifest(&mp, &stub_manifest()).unwrap();
        let err = load_dataset(&mp, false).unwrap_err();
        assert!(err.to_string().contains("label 9"), "{}", err);
    }

    #[test]
    fn malformed_json_reports_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("manifest.json");
        std::fs::write(&mp, "{ not json").unwrap();
        let err = load_manifest(&mp).unwrap_err();
        assert!(matches!(err, DataError::Json { .. }), "{err}");
    }

    #[test]
    fn atomic_write_leaves_no_temp_behind() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.bin");
        atomic_write(&p, b"payload").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"payload");
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["out.bin".to_string()]);
    }
}
