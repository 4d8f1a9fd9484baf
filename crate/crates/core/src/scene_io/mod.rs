//! Scene descriptions, initialization point clouds and the synthetic scene.
//!
//! A scene is a JSON document:
//!
//! ```json
//! { "frame_rate": 30, "frames": 60,
//!   "cameras": [ { "id": "cam0", "width": 64, "height": 64,
//!                  "fx": 60, "fy": 60, "cx": 32, "cy": 32,
//!                  "rotation": [1,0,0, 0,1,0, 0,0,1], "translation": [0,0,4],
//!                  "images": ["cam0/000000.png", "..."] } ],
//!   "init_clouds": "clouds" }
//! ```
//!
//! Paths are relative to the document. Frame `i` is at time `i / frame_rate`.
//! Initialization clouds are `frame_%06d.ply` files in `init_clouds`.

pub mod ply;
pub mod synth;

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraJson};
use crate::error::{Error, Result};
use crate::gaussians::{validate_threshold, Gaussian4D};
use crate::hierarchy::{Hierarchy, DEFAULT_OPACITY_THRESHOLD};
use crate::image::Image;
use crate::optimizer::FrameSource;

pub use ply::{read_ply, PointCloud};
pub use synth::{Blob, BlobPath, SynthScene, SynthSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SceneJson {
    frame_rate: f64,
    frames: usize,
    cameras: Vec<CameraJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    init_clouds: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneCamera {
    pub id: String,
    pub camera: Camera,
    /// As written in the document.
    pub images: Vec<String>,
}

/// A validated multi-view video.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDescription {
    pub frame_rate: f64,
    pub frames: usize,
    pub cameras: Vec<SceneCamera>,
    pub init_clouds: Option<String>,
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
}

impl SceneDescription {
    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 / self.frame_rate
    }

    /// Time span covered by the frames; one frame interval for single-frame scenes.
    pub fn duration(&self) -> f64 {
        if self.frames > 1 {
            self.frame_time(self.frames - 1)
        } else {
            1.0 / self.frame_rate
        }
    }

    pub fn image_path(&self, view: usize, frame: usize) -> PathBuf {
        self.base_dir.join(&self.cameras[view].images[frame])
    }

    pub fn init_cloud_dir(&self) -> Option<PathBuf> {
        self.init_clouds.as_ref().map(|d| self.base_dir.join(d))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SceneJson {
            frame_rate: self.frame_rate,
            frames: self.frames,
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraJson::from_camera(&c.camera, Some(c.id.clone()), c.images.clone()))
                .collect(),
            init_clouds: self.init_clouds.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::parse("scene", e.to_string()))
    }

    /// Parses and validates a document; `base_dir` resolves relative paths.
    pub fn from_json(text: &str, base_dir: &Path, check_paths: bool) -> Result<Self> {
        let doc: SceneJson = serde_json::from_str(text)
            .map_err(|e| Error::parse(format!("scene line {} column {}", e.line(), e.column()), e.to_string()))?;
        if !(doc.frame_rate > 0.0 && doc.frame_rate.is_finite()) {
            return Err(Error::parse("frame_rate", format!("{} must be positive", doc.frame_rate)));
        }
        if doc.frames == 0 {
            return Err(Error::parse("frames", "must be positive"));
        }
        if doc.cameras.is_empty() {
            return Err(Error::parse("cameras", "at least one camera is required"));
        }
        let mut cameras = Vec::with_capacity(doc.cameras.len());
        for (i, cj) in doc.cameras.iter().enumerate() {
            let loc = format!("cameras[{i}]");
            let camera = cj.to_camera(&loc)?;
            if cj.images.len() != doc.frames {
                return Err(Error::parse(
                    format!("{loc}.images"),
                    format!("{} paths for {} frames", cj.images.len(), doc.frames),
                ));
            }
            if check_paths {
                for (f, p) in cj.images.iter().enumerate() {
                    if !base_dir.join(p).is_file() {
                        return Err(Error::parse(format!("{loc}.images[{f}]"), format!("no such file {p}")));
                    }
                }
            }
            cameras.push(SceneCamera {
                id: cj.id.clone().unwrap_or_else(|| format!("cam{i}")),
                camera,
                images: cj.images.clone(),
            });
        }
        if check_paths {
            if let Some(d) = &doc.init_clouds {
                if !base_dir.join(d).is_dir() {
                    return Err(Error::parse("init_clouds", format!("no such directory {d}")));
                }
            }
        }
        Ok(SceneDescription {
            frame_rate: doc.frame_rate,
            frames: doc.frames,
            cameras,
            init_clouds: doc.init_clouds,
            base_dir: base_dir.to_path_buf(),
        })
    }
}

/// Loads a scene document and checks that every referenced path exists.
pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneDescription> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    SceneDescription::from_json(&text, &base, true)
}

pub fn save_scene(scene: &SceneDescription, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, scene.to_json()?)?;
    Ok(())
}

/// Loads a single camera document (the per-camera schema of a scene).
pub fn load_camera(path: impl AsRef<Path>) -> Result<Camera> {
    let path = path.as_ref();
    let loc = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::parse(loc.clone(), e.to_string()))?;
    let cj: CameraJson = serde_json::from_str(&text)
        .map_err(|e| Error::parse(format!("{loc} line {} column {}", e.line(), e.column()), e.to_string()))?;
    cj.to_camera(&loc)
}

pub fn save_camera(camera: &Camera, id: Option<String>, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&CameraJson::from_camera(camera, id, Vec::new()))
        .map_err(|e| Error::parse("camera", e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Targets read from the PNG files of a scene on demand.
pub struct DiskScene {
    pub scene: SceneDescription,
}

impl FrameSource for DiskScene {
    fn num_views(&self) -> usize {
        self.scene.cameras.len()
    }

    fn num_frames(&self) -> usize {
        self.scene.frames
    }

    fn frame_time(&self, frame: usize) -> f64 {
        self.scene.frame_time(frame)
    }

    fn camera(&self, view: usize) -> &Camera {
        &self.scene.cameras[view].camera
    }

    fn target(&self, view: usize, frame: usize) -> Result<Image> {
        let path = self.scene.image_path(view, frame);
        let img = Image::load_png(&path)?;
        let cam = self.camera(view);
        if img.width != cam.width || img.height != cam.height {
            return Err(Error::parse(
                path.display().to_string(),
                format!("image is {}x{}, camera expects {}x{}", img.width, img.height, cam.width, cam.height),
            ));
        }
        Ok(img)
    }
}

/// Points of one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct InitCloud {
    pub time: f64,
    pub points: PointCloud,
}

/// Reads every `frame_%06d.ply` present in the scene's cloud directory.
pub fn load_init_clouds(scene: &SceneDescription) -> Result<Vec<InitCloud>> {
    let dir = scene
        .init_cloud_dir()
        .ok_or_else(|| Error::parse("init_clouds", "scene names no initialization clouds"))?;
    let clouds: Vec<Result<Option<InitCloud>>> = (0..scene.frames)
        .into_par_iter()
        .map(|f| {
            let p = dir.join(format!("frame_{f:06}.ply"));
            if !p.is_file() {
                return Ok(None);
            }
            Ok(Some(InitCloud {
                time: scene.frame_time(f),
                points: read_ply(&p)?,
            }))
        })
        .collect();
    let clouds: Vec<InitCloud> = clouds.into_iter().filter_map(|r| r.transpose()).collect::<Result<_>>()?;
    if clouds.iter().all(|c| c.points.is_empty()) {
        return Err(Error::parse(dir.display().to_string(), "no nonempty frame_%06d.ply files"));
    }
    Ok(clouds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub k: usize,
    pub opacity: f64,
    /// Spatial scale when a frame has a single point.
    pub default_scale: f64,
    /// Temporal scale when there is a single keyframe.
    pub default_temporal_scale: f64,
    pub o_th: f64,
    /// Uniform subsampling cap on the total point count.
    pub max_points: Option<usize>,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            k: 3,
            opacity: 0.1,
            default_scale: 0.01,
            default_temporal_scale: 1.0,
            o_th: DEFAULT_OPACITY_THRESHOLD,
            max_points: None,
            seed: 0,
        }
    }
}

/// Mean distance from each point to its `k` nearest neighbours (brute force).
pub fn knn_mean_distances(points: &[Vector3<f64>], k: usize) -> Vec<Option<f64>> {
    let n = points.len();
    if n < 2 || k == 0 {
        return vec![None; n];
    }
    let k = k.min(n - 1);
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = vec![f64::INFINITY; k];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm_squared();
                if d < best[k - 1] {
                    let pos = best.partition_point(|&b| b <= d);
                    best.insert(pos, d);
                    best.pop();
                }
            }
            Some(best.iter().map(|d| d.sqrt()).sum::<f64>() / k as f64)
        })
        .collect()
}

/// Temporal scale whose influence radius at `o_th` equals `radius`.
pub fn temporal_scale_for_radius(radius: f64, o_th: f64) -> f64 {
    radius / (-2.0 * o_th.ln()).sqrt()
}

/// One diffuse, isotropic Gaussian per point.
///
/// The temporal scale of a keyframe's Gaussians makes their influence
/// radius equal the larger gap to the neighbouring keyframes.
pub fn init_gaussians(clouds: &[InitCloud], cfg: &InitConfig) -> Result<Vec<Gaussian4D>> {
    validate_threshold(cfg.o_th)?;
    if clouds.iter().all(|c| c.points.is_empty()) {
        return Err(Error::invalid("clouds", "no points to initialize from"));
    }
    if !(cfg.opacity > 0.0 && cfg.opacity < 1.0) {
        return Err(Error::invalid("opacity", "must lie in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..clouds.len()).filter(|&i| !clouds[i].points.is_empty()).collect();
    order.sort_by(|&a, &b| clouds[a].time.total_cmp(&clouds[b].time));
    let times: Vec<f64> = order.iter().map(|&i| clouds[i].time).collect();

    let total: usize = order.iter().map(|&i| clouds[i].points.len()).sum();
    let keep: Option<Vec<bool>> = cfg.max_points.filter(|&m| m < total).map(|m| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut mask = vec![false; total];
        for i in sample(&mut rng, total, m) {
            mask[i] = true;
        }
        mask
    });

    let mut out = Vec::new();
    let mut flat = 0;
    for (rank, &ci) in order.iter().enumerate() {
        let cloud = &clouds[ci];
        let prev = rank.checked_sub(1).map(|r| cloud.time - times[r]);
        let next = times.get(rank + 1).map(|t| t - cloud.time);
        let gap = match (prev, next) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0.0).max(b.unwrap_or(0.0))),
        };
        let s_t = match gap {
            Some(g) if g > 0.0 => temporal_scale_for_radius(g, cfg.o_th),
            _ => cfg.default_temporal_scale,
        };
        let scales = knn_mean_distances(&cloud.points.positions, cfg.k);
        for ((p, c), s) in cloud.points.positions.iter().zip(&cloud.points.colors).zip(scales) {
            let kept = keep.as_ref().is_none_or(|m| m[flat]);
            flat += 1;
            if !kept {
                continue;
            }
            let s = s.filter(|&v| v > 0.0).unwrap_or(cfg.default_scale);
            out.push(Gaussian4D::isotropic(*p, cloud.time, s, s_t, cfg.opacity, *c));
        }
    }
    Ok(out)
}

/// Builds a hierarchy over `[0, duration]` and inserts `gaussians`.
pub fn build_hierarchy(
    gaussians: Vec<Gaussian4D>,
    duration: f64,
    root_length: f64,
    num_levels: usize,
    o_th: f64,
) -> Result<Hierarchy> {
    let mut h = Hierarchy::with_threshold(duration, root_length, num_levels, o_th)?;
    for g in gaussians {
        h.insert(g)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn minimal_json() -> String {
        r#"{"frame_rate": 30, "frames": 1, "cameras": [{"width": 8, "height": 6, "fx": 10, "fy": 10,
            "cx": 4, "cy": 3, "rotation": [1,0,0,0,1,0,0,0,1], "translation": [0,0,2],
            "images": ["a.png"]}]}"#
            .to_string()
    }

    #[test]
    fn minimal_document_loads() {
        let s = SceneDescription::from_json(&minimal_json(), Path::new("."), false).unwrap();
        assert_eq!(s.cameras.len(), 1);
        assert_eq!(s.cameras[0].id, "cam0");
        assert_eq!(s.duration(), 1.0 / 30.0);
    }

    #[test]
    fn errors_name_fields() {
        let bad_fx = minimal_json().replace("\"fx\": 10", "\"fx\": -1");
        let e = SceneDescription::from_json(&bad_fx, Path::new("."), false).unwrap_err().to_string();
        assert!(e.contains("fx"), "{e}");
        let missing = minimal_json().replace("\"fy\": 10,", "");
        let e = SceneDescription::from_json(&missing, Path::new("."), false).unwrap_err().to_string();
        assert!(e.contains("fy"), "{e}");
        let skew = minimal_json().replace("[1,0,0,0,1,0,0,0,1]", "[1,0.1,0,0,1,0,0,0,1]");
        let e = SceneDescription::from_json(&skew, Path::new("."), false).unwrap_err().to_string();
        assert!(e.contains("rotation"), "{e}");
        let e = SceneDescription::from_json(&minimal_json(), Path::new("/nonexistent"), true)
            .unwrap_err()
            .to_string();
        assert!(e.contains("images[0]"), "{e}");
    }

    #[test]
    fn save_load_is_canonical() {
        let near_rot = minimal_json().replace("[1,0,0,0,1,0,0,0,1]", "[1,0.0004,0,-0.0004,1,0,0,0,1]");
        let s = SceneDescription::from_json(&near_rot, Path::new("."), false).unwrap();
        let text = s.to_json().unwrap();
        let s2 = SceneDescription::from_json(&text, Path::new("."), false).unwrap();
        assert_eq!(s2.to_json().unwrap(), text);
        let r = s2.cameras[0].camera.rotation;
        assert!((r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn knn_unit_square() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
        ];
        let expected = (2.0 + 2f64.sqrt()) / 3.0;
        for d in knn_mean_distances(&pts, 3) {
            assert!((d.unwrap() - expected).abs() < 1e-12);
        }
        assert!((expected - 1.1381).abs() < 1e-4);
    }

    #[test]
    fn knn_matches_sorting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vector3<f64>> = (0..200)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let fast = knn_mean_distances(&pts, 3);
        for (i, p) in pts.iter().enumerate() {
            let mut d: Vec<f64> = pts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| (p - q).norm()).collect();
            d.sort_by(f64::total_cmp);
            let oracle = (d[0] + d[1] + d[2]) / 3.0;
            assert!((fast[i].unwrap() - oracle).abs() < 1e-12);
        }
    }

    fn cloud(time: f64, pts: Vec<Vector3<f64>>) -> InitCloud {
        let n = pts.len();
        InitCloud {
            time,
            points: PointCloud {
                positions: pts,
                colors: vec![Vector3::new(0.2, 0.4, 0.6); n],
            },
        }
    }

    #[test]
    fn init_examples() {
        let cfg = InitConfig::default();
        let single = init_gaussians(&[cloud(0.0, vec![Vector3::zeros()])], &cfg).unwrap();
        assert_eq!(single[0].scale.x, cfg.default_scale);
        assert_eq!(single[0].scale.w, cfg.default_temporal_scale);
        assert!(init_gaussians(&[], &cfg).is_err());
        assert!(init_gaussians(&[cloud(0.0, vec![])], &cfg).is_err());

        let gap = 1.0 / 30.0;
        let clouds: Vec<InitCloud> = (0..3)
            .map(|f| cloud(f as f64 * gap, vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::new(1.0, 1.0, 0.0)]))
            .collect();
        let gs = init_gaussians(&clouds, &cfg).unwrap();
        assert_eq!(gs.len(), 12);
        for g in &gs {
            assert!((g.scale.x - 1.1381).abs() < 1e-4);
            assert_eq!(g.opacity, 0.1);
            assert!(g.is_diffuse());
            let r = crate::gaussians::influence_range(g, 0.05).unwrap();
            assert!((r.end - r.start - 2.0 * gap).abs() < 1e-12);
        }
    }

    #[test]
    fn init_subsampling_and_placement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clouds: Vec<InitCloud> = (0..60)
            .map(|f| {
                cloud(
                    f as f64 / 30.0,
                    (0..30).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect(),
                )
            })
            .collect();
        let all = init_gaussians(&clouds, &InitConfig::default()).unwrap();
        assert_eq!(all.len(), 1800);
        assert!(all.iter().all(|g| g.is_finite()));
        let capped = init_gaussians(
            &clouds,
            &InitConfig {
                max_points: Some(500),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(capped.len(), 500);
        let h = build_hierarchy(all, 59.0 / 30.0, 10.0, 9, 0.05).unwrap();
        h.audit().unwrap();
    }
}
