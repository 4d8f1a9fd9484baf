//! Synthetic multi-view videos of moving spheres.
//!
//! Targets are ray-cast: each subsample takes the color of the nearest sphere
//! hit, or the background. Frames are a pure function of the spec, so they
//! can be rendered on demand instead of stored.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{InitCloud, PointCloud, SceneCamera, SceneDescription};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optimizer::FrameSource;

#[derive(Clone, Debug, PartialEq)]
pub enum BlobPath {
    Static(Vector3<f64>),
    /// `start + velocity * t`.
    Linear { start: Vector3<f64>, velocity: Vector3<f64> },
    /// `center + amplitude * sin(2 pi frequency t + phase)`, per axis.
    Sinusoidal {
        center: Vector3<f64>,
        amplitude: Vector3<f64>,
        frequency: f64,
        phase: f64,
    },
}

impl BlobPath {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        match self {
            BlobPath::Static(c) => *c,
            BlobPath::Linear { start, velocity } => start + velocity * t,
            BlobPath::Sinusoidal {
                center,
                amplitude,
                frequency,
                phase,
            } => center + amplitude * (TAU * frequency * t + phase).sin(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub path: BlobPath,
    pub radius: f64,
    pub color: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub blobs: Vec<Blob>,
    /// Training cameras, evenly spaced on a circle around the origin.
    pub num_cameras: usize,
    pub camera_radius: f64,
    pub camera_height: f64,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub frame_rate: f64,
    pub background: Vector3<f64>,
    /// Subsamples per pixel along each axis.
    pub supersample: usize,
    /// Initialization points per blob per frame.
    pub points_per_blob: usize,
    /// Standard deviation of the initialization point jitter, relative to the radius.
    pub cloud_noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Two oscillating blobs seen by four cameras at 64x64.
    pub fn two_blobs() -> Self {
        SynthSpec {
            blobs: vec![
                Blob {
                    path: BlobPath::Sinusoidal {
                        center: Vector3::zeros(),
                        amplitude: Vector3::new(0.6, 0.0, 0.2),
                        frequency: 0.2,
                        phase: -FRAC_PI_2,
                    },
                    radius: 0.35,
                    color: Vector3::new(0.9, 0.25, 0.2),
                },
                Blob {
                    path: BlobPath::Sinusoidal {
                        center: Vector3::new(0.1, -0.1, 0.3),
                        amplitude: Vector3::new(0.3, 0.25, 0.0),
                        frequency: 0.25,
                        phase: 0.0,
                    },
                    radius: 0.3,
                    color: Vector3::new(0.2, 0.45, 0.9),
                },
            ],
            num_cameras: 4,
            camera_radius: 4.0,
            camera_height: 1.0,
            focal: 64.0,
            width: 64,
            height: 64,
            frames: 60,
            frame_rate: 30.0,
            background: Vector3::zeros(),
            supersample: 4,
            points_per_blob: 24,
            cloud_noise: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_cameras == 0 {
            return Err(Error::invalid("num_cameras", "must be positive"));
        }
        if self.frames == 0 {
            return Err(Error::invalid("frames", "must be positive"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::invalid("frame_rate", "must be positive"));
        }
        if self.width == 0 || self.height == 0 || self.supersample == 0 {
            return Err(Error::invalid("width", "image size and supersampling must be positive"));
        }
        if !(self.focal > 0.0 && self.camera_radius > 0.0) {
            return Err(Error::invalid("focal", "focal length and camera radius must be positive"));
        }
        if self.blobs.iter().any(|b| !(b.radius > 0.0)) {
            return Err(Error::invalid("radius", "blob radii must be positive"));
        }
        Ok(())
    }
}

/// A synthetic scene with its cameras; targets render on demand.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub spec: SynthSpec,
    cameras: Vec<Camera>,
    held_out: Camera,
}

fn ring_camera(spec: &SynthSpec, angle: f64) -> Camera {
    let eye = Vector3::new(
        spec.camera_radius * angle.cos(),
        -spec.camera_height,
        spec.camera_radius * angle.sin(),
    );
    Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), spec.focal, spec.width, spec.height)
}

impl SynthScene {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let step = TAU / spec.num_cameras as f64;
        let cameras = (0..spec.num_cameras).map(|i| ring_camera(&spec, i as f64 * step)).collect();
        let held_out = ring_camera(&spec, 0.5 * step);
        Ok(SynthScene { spec, cameras, held_out })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    /// A camera on the ring halfway between the first two training cameras.
    pub fn held_out_camera(&self) -> &Camera {
        &self.held_out
    }

    pub fn duration(&self) -> f64 {
        if self.spec.frames > 1 {
            (self.spec.frames - 1) as f64 / self.spec.frame_rate
        } else {
            1.0 / self.spec.frame_rate
        }
    }

    pub fn blob_center(&self, blob: usize, t: f64) -> Vector3<f64> {
        self.spec.blobs[blob].path.at(t)
    }

    /// Ground truth seen by `camera` at time `t`.
    pub fn render(&self, camera: &Camera, t: f64) -> Image {
        let centers: Vec<Vector3<f64>> = self.spec.blobs.iter().map(|b| b.path.at(t)).collect();
        let origin = camera.center();
        let rt = camera.rotation.transpose();
        let ss = self.spec.supersample;
        let inv = 1.0 / (ss * ss) as f64;
        let mut img = Image::new(camera.width, camera.height);
        img.data
            .par_chunks_mut(3 * camera.width)
            .enumerate()
            .for_each(|(y, row)| {
                for x in 0..camera.width {
                    let mut acc = Vector3::zeros();
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let u = x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                            let v = y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                            let dir = rt * Vector3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
                            acc += self.shade(&origin, &dir, &centers);
                        }
                    }
                    let c = acc * inv;
                    row[3 * x..3 * x + 3].copy_from_slice(&[c.x, c.y, c.z]);
                }
            });
        img
    }

    fn shade(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, centers: &[Vector3<f64>]) -> Vector3<f64> {
        let mut best: Option<(f64, usize)> = None;
        for (i, (blob, c)) in self.spec.blobs.iter().zip(centers).enumerate() {
            if let Some(s) = ray_sphere(origin, dir, c, blob.radius) {
                // Ties keep the lower index so occlusion is total.
                if best.is_none_or(|(b, _)| s < b) {
                    best = Some((s, i));
                }
            }
        }
        best.map_or(self.spec.background, |(_, i)| self.spec.blobs[i].color)
    }

    /// Initialization points on each blob's surface at every frame.
    pub fn init_clouds(&self) -> Vec<InitCloud> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        (0..self.spec.frames)
            .map(|f| {
                let t = self.frame_time(f);
                let mut points = PointCloud::default();
                for blob in &self.spec.blobs {
                    let c = blob.path.at(t);
                    for _ in 0..self.spec.points_per_blob {
                        let n = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng)).normalize();
                        let jitter: f64 = StandardNormal.sample(&mut rng);
                        let r = blob.radius * (1.0 + self.spec.cloud_noise * jitter);
                        points.positions.push(c + n * r);
                        let tint = rng.random_range(-0.05..0.05);
                        points.colors.push(blob.color.map(|v| (v + tint).clamp(0.0, 1.0)));
                    }
                }
                InitCloud { time: t, points }
            })
            .collect()
    }

    /// Scene description whose image paths follow [`SynthScene::export`].
    pub fn description(&self, base_dir: &Path) -> SceneDescription {
        SceneDescription {
            frame_rate: self.spec.frame_rate,
            frames: self.spec.frames,
            cameras: self
                .cameras
                .iter()
                .enumerate()
                .map(|(i, cam)| SceneCamera {
                    id: format!("cam{i}"),
                    camera: cam.clone(),
                    images: (0..self.spec.frames).map(|f| format!("cam{i}/{f:06}.png")).collect(),
                })
                .collect(),
            init_clouds: Some("clouds".into()),
            base_dir: base_dir.to_path_buf(),
        }
    }

    /// Writes `scene.json`, the PNG targets, the point clouds and the
    /// held-out camera (`held_out_camera.json`) into `dir`.
    pub fn export(&self, dir: &Path) -> Result<SceneDescription> {
        let desc = self.description(dir);
        std::fs::create_dir_all(dir.join("clouds"))?;
        for cam in &desc.cameras {
            std::fs::create_dir_all(dir.join(&cam.id))?;
        }
        let jobs: Vec<(usize, usize)> = (0..self.cameras.len())
            .flat_map(|v| (0..self.spec.frames).map(move |f| (v, f)))
            .collect();
        jobs.par_iter().try_for_each(|&(v, f)| -> Result<()> {
            self.render(&self.cameras[v], self.frame_time(f)).save_png(desc.image_path(v, f))
        })?;
        for (f, cloud) in self.init_clouds().iter().enumerate() {
            let file = std::fs::File::create(dir.join("clouds").join(format!("frame_{f:06}.ply")))?;
            super::ply::write_ply_ascii(&cloud.points, std::io::BufWriter::new(file))?;
        }
        super::save_camera(&self.held_out, Some("held_out".into()), dir.join("held_out_camera.json"))?;
        super::save_scene(&desc, dir.join("scene.json"))?;
        Ok(desc)
    }
}

/// Nearest positive ray parameter where `origin + s * dir` meets the sphere.
fn ray_sphere(origin: &Vector3<f64>, dir: &Vector3<f64>, center: &Vector3<f64>, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let a = dir.norm_squared();
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let near = (-b - sq) / a;
    if near > 0.0 {
        return Some(near);
    }
    let far = (-b + sq) / a;
    (far > 0.0).then_some(far)
}

impl FrameSource for SynthScene {
    fn num_views(&self) -> usize {
        self.cameras.len()
    }

    fn num_frames(&self) -> usize {
        self.spec.frames
    }

    fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 / self.spec.frame_rate
    }

    fn camera(&self, view: usize) -> &Camera {
        &self.cameras[view]
    }

    fn target(&self, view: usize, frame: usize) -> Result<Image> {
        Ok(self.render(&self.cameras[view], self.frame_time(frame)))
    }
}

/// Intensity-weighted centroid of one channel.
pub fn channel_centroid(img: &Image, channel: usize) -> Option<Vector2<f64>> {
    let mut sum = Vector2::zeros();
    let mut w = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            let v = img.pixel(x, y)[channel];
            sum += Vector2::new(x as f64, y as f64) * v;
            w += v;
        }
    }
    (w > 0.0).then(|| sum / w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(path: BlobPath, color: Vector3<f64>) -> SynthSpec {
        SynthSpec {
            blobs: vec![Blob { path, radius: 0.25, color }],
            ..SynthSpec::two_blobs()
        }
    }

    #[test]
    fn static_blob_frames_are_identical() {
        let s = SynthScene::new(single(BlobPath::Static(Vector3::new(0.2, 0.1, 0.0)), Vector3::new(1.0, 1.0, 1.0))).unwrap();
        let a = s.target(1, 0).unwrap();
        assert!(a.data.iter().any(|&v| v > 0.0));
        for f in [1, 17, 59] {
            assert_eq!(s.target(1, f).unwrap(), a);
        }
    }

    #[test]
    fn crossing_blob_centroid_is_monotone() {
        let spec = single(
            BlobPath::Linear {
                start: Vector3::new(-1.2, 0.0, 0.0),
                velocity: Vector3::new(1.2, 0.0, 0.0),
            },
            Vector3::new(1.0, 0.0, 0.0),
        );
        let s = SynthScene::new(spec).unwrap();
        // Camera 1 sits on +z; its image x axis runs along world -x.
        let cam = s.camera(1).clone();
        let mut prev: Option<f64> = None;
        for f in (0..60).step_by(5) {
            let t = s.frame_time(f);
            let c = channel_centroid(&s.render(&cam, t), 0).unwrap();
            let analytic = cam.project(&s.blob_center(0, t));
            assert!((c - analytic).norm() < 0.5, "frame {f}: {c} vs {analytic}");
            if let Some(p) = prev {
                assert!(c.x < p, "frame {f}");
            }
            prev = Some(c.x);
        }
    }

    #[test]
    fn two_camera_consistency() {
        let p = Vector3::new(0.3, -0.2, 0.25);
        let s = SynthScene::new(single(BlobPath::Static(p), Vector3::new(0.0, 1.0, 0.0))).unwrap();
        let (a, b) = (s.camera(0).clone(), s.camera(1).clone());
        let ca = channel_centroid(&s.render(&a, 0.0), 1).unwrap();
        let cb = channel_centroid(&s.render(&b, 0.0), 1).unwrap();
        assert!((ca - a.project(&p)).norm() < 0.5);
        assert!((cb - b.project(&p)).norm() < 0.5);
        // Epipolar line of `ca` in camera b: project two points on the back-projected ray.
        let ray = a.rotation.transpose() * Vector3::new((ca.x - a.cx) / a.fx, (ca.y - a.cy) / a.fy, 1.0);
        let p0 = b.project(&(a.center() + ray * 2.0));
        let p1 = b.project(&(a.center() + ray * 6.0));
        let d = p1 - p0;
        let dist = ((cb - p0).x * d.y - (cb - p0).y * d.x).abs() / d.norm();
        assert!(dist < 0.5, "epipolar distance {dist}");
    }

    #[test]
    fn occlusion_takes_nearest() {
        let spec = SynthSpec {
            blobs: vec![
                Blob {
                    path: BlobPath::Static(Vector3::zeros()),
                    radius: 0.3,
                    color: Vector3::new(1.0, 0.0, 0.0),
                },
                Blob {
                    path: BlobPath::Static(Vector3::new(0.0, 0.0, 1.0)),
                    radius: 0.3,
                    color: Vector3::new(0.0, 0.0, 1.0),
                },
            ],
            camera_height: 0.0,
            ..SynthSpec::two_blobs()
        };
        let s = SynthScene::new(spec).unwrap();
        // Camera 1 is at +z so the second blob hides the first at the image center.
        let img = s.render(s.camera(1), 0.0);
        assert_eq!(img.pixel(32, 32), [0.0, 0.0, 1.0]);
        let img = s.render(s.camera(3), 0.0);
        assert_eq!(img.pixel(32, 32), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn deterministic() {
        let a = SynthScene::new(SynthSpec::two_blobs()).unwrap();
        let b = SynthScene::new(SynthSpec::two_blobs()).unwrap();
        assert_eq!(a.target(2, 31).unwrap(), b.target(2, 31).unwrap());
        assert_eq!(a.init_clouds(), b.init_clouds());
        assert_eq!(a.render(a.held_out_camera(), 0.5), b.render(b.held_out_camera(), 0.5));
    }

    #[test]
    fn export_roundtrip() {
        let spec = SynthSpec {
            frames: 3,
            width: 16,
            height: 16,
            focal: 16.0,
            ..SynthSpec::two_blobs()
        };
        let s = SynthScene::new(spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.export(dir.path()).unwrap();
        let scene = super::super::load_scene(dir.path().join("scene.json")).unwrap();
        let held = super::super::load_camera(dir.path().join("held_out_camera.json")).unwrap();
        assert!((held.rotation - s.held_out_camera().rotation).abs().max() < 1e-12);
        assert_eq!(scene.frames, 3);
        let clouds = super::super::load_init_clouds(&scene).unwrap();
        assert_eq!(clouds.len(), 3);
        assert_eq!(clouds[0].points.len(), 48);
        let disk = super::super::DiskScene { scene };
        let img = disk.target(1, 2).unwrap();
        let exact = s.target(1, 2).unwrap();
        assert!(img.data.iter().zip(&exact.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }
}
