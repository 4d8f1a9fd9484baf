//! Pinhole camera.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 1000.0;

/// Calibrated pinhole camera. `rotation` and `translation` map world points
/// into camera space (`x_cam = R x_world + t`, looking down +z).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return Err(Error::invalid("fx", format!("{} must be positive", self.fx)));
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(Error::invalid("fy", format!("{} must be positive", self.fy)));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("cx", "principal point must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("width", "image size must be nonzero"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("near", "require 0 < near < far"));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if !(err < 1e-6) {
            return Err(Error::invalid("rotation", format!("not orthonormal (error {err:.3e})")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation", "non-finite"));
        }
        Ok(())
    }

    /// A camera at `eye` looking at `target`, with `up` roughly the image's -y axis.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation: -(rotation * eye),
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-space point. Pixel `(i, j)` is sampled at `(i, j)`.
    pub fn project_camera(&self, m: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * m.x / m.z + self.cx, self.fy * m.y / m.z + self.cy)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        self.project_camera(&self.to_camera(p))
    }

    /// Jacobian of the pinhole projection at camera-space point `m`.
    pub fn projection_jacobian(&self, m: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / m.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * m.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * m.y * iz2,
        )
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// JSON form of a camera, shared by scene files and the render command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

/// Tolerance on `R^T R - I` accepted before re-orthonormalization.
pub const ROTATION_TOLERANCE: f64 = 1e-3;

/// Nearest rotation matrix (polar factor via SVD).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

impl CameraJson {
    /// Validates and converts; the rotation is re-orthonormalized.
    ///
    /// `location` prefixes field names in error messages.
    pub fn to_camera(&self, location: &str) -> Result<Camera> {
        let field = |name: &str| format!("{location}.{name}");
        for (name, v) in [("fx", self.fx), ("fy", self.fy)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::parse(field(name), format!("{v} must be positive")));
            }
        }
        for (name, v) in [("cx", self.cx), ("cy", self.cy)] {
            if !v.is_finite() {
                return Err(Error::parse(field(name), "must be finite"));
            }
        }
        if self.width == 0 {
            return Err(Error::parse(field("width"), "must be positive"));
        }
        if self.height == 0 {
            return Err(Error::parse(field("height"), "must be positive"));
        }
        let r = Matrix3::from_row_slice(&self.rotation);
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::parse(field("rotation"), "non-finite entry"));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ROTATION_TOLERANCE || r.determinant() <= 0.0 {
            return Err(Error::parse(
                field("rotation"),
                format!("not a rotation (orthonormality error {err:.3e})"),
            ));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::parse(field("translation"), "non-finite entry"));
        }
        let near = self.near.unwrap_or(DEFAULT_NEAR);
        let far = self.far.unwrap_or(DEFAULT_FAR);
        if !(near > 0.0 && near < far) {
            return Err(Error::parse(field("near"), "require 0 < near < far"));
        }
        Ok(Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: orthonormalize(&r),
            translation: Vector3::from_row_slice(&self.translation),
            width: self.width,
            height: self.height,
            near,
            far,
        })
    }

    pub fn from_camera(cam: &Camera, id: Option<String>, images: Vec<String>) -> Self {
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = cam.rotation[(i, j)];
            }
        }
        CameraJson {
            id,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation,
            translation: [cam.translation.x, cam.translation.y, cam.translation.z],
            near: Some(cam.near),
            far: Some(cam.far),
            images,
        }
    }
}
