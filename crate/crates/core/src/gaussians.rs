//! The 4D Gaussian primitive and the closed-form math on it.
//!
//! A primitive is an anisotropic Gaussian over `(x, y, z, t)`. Its covariance
//! is `R S S^T R^T` where `R` is a 4D rotation built from a pair of unit
//! quaternions (left and right isoclinic factors) and `S` the diagonal scale.
//! Slicing it at a timestamp yields a 3D Gaussian whose opacity is modulated
//! by the temporal marginal.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::sh::{self, RESIDUAL_LEN};

/// Lower clamp on the three spatial scale components (scene units).
pub const MIN_SPATIAL_SCALE: f64 = 1e-6;
/// Lower clamp on the temporal scale component (seconds).
pub const MIN_TEMPORAL_SCALE: f64 = 1e-4;
/// Floor on the temporal variance `Sigma[3][3]`.
pub const MIN_TEMPORAL_VARIANCE: f64 = 1e-12;

/// One 4D Gaussian primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian4D {
    /// `(x, y, z, t)` mean.
    pub mu: Vector4<f64>,
    /// Per-axis standard deviations before rotation.
    pub scale: Vector4<f64>,
    /// Left rotor as a quaternion `(w, x, y, z)`.
    pub rotor_left: Vector4<f64>,
    /// Right rotor as a quaternion `(w, x, y, z)`.
    pub rotor_right: Vector4<f64>,
    pub opacity: f64,
    /// Degree-0 color.
    pub base_color: Vector3<f64>,
    /// Degree 1..3 residual coefficients, `[basis][channel]`.
    pub sh_residual: [f64; RESIDUAL_LEN],
}

impl Gaussian4D {
    /// An axis-aligned diffuse Gaussian with identity rotors.
    pub fn isotropic(
        position: Vector3<f64>,
        t: f64,
        spatial_scale: f64,
        temporal_scale: f64,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        Gaussian4D {
            mu: Vector4::new(position.x, position.y, position.z, t),
            scale: Vector4::new(spatial_scale, spatial_scale, spatial_scale, temporal_scale),
            rotor_left: identity_rotor(),
            rotor_right: identity_rotor(),
            opacity,
            base_color: color,
            sh_residual: [0.0; RESIDUAL_LEN],
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.mu.xyz()
    }

    /// True when every residual SH coefficient is exactly zero.
    pub fn is_diffuse(&self) -> bool {
        self.sh_residual.iter().all(|&v| v == 0.0)
    }

    pub fn sh_norm(&self) -> f64 {
        self.sh_residual.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_spatial_scale(&self) -> f64 {
        self.scale.x.max(self.scale.y).max(self.scale.z)
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.rotor_left.iter().all(|v| v.is_finite())
            && self.rotor_right.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.base_color.iter().all(|v| v.is_finite())
            && self.sh_residual.iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::invalid("gaussian", "non-finite parameter"));
        }
        if self.rotor_left.norm() < 1e-12 || self.rotor_right.norm() < 1e-12 {
            return Err(Error::invalid("rotor", "zero-norm rotor"));
        }
        Ok(())
    }

    /// Renormalizes both rotors in place.
    pub fn normalize_rotors(&mut self) {
        let nl = self.rotor_left.norm();
        let nr = self.rotor_right.norm();
        if nl > 0.0 {
            self.rotor_left /= nl;
        }
        if nr > 0.0 {
            self.rotor_right /= nr;
        }
    }
}

/// Number of scalar parameters of one Gaussian.
pub const NUM_PARAMS: usize = 4 + 4 + 4 + 4 + 1 + 3 + RESIDUAL_LEN;

/// A flat parameter (or gradient) vector, laid out as described in [`param`].
pub type ParamArray = [f64; NUM_PARAMS];

/// Offsets of each parameter group inside a [`ParamArray`].
pub mod param {
    use std::ops::Range;

    pub const MU: Range<usize> = 0..4;
    pub const SCALE: Range<usize> = 4..8;
    pub const ROTOR_LEFT: Range<usize> = 8..12;
    pub const ROTOR_RIGHT: Range<usize> = 12..16;
    pub const OPACITY: usize = 16;
    pub const BASE_COLOR: Range<usize> = 17..20;
    pub const SH: Range<usize> = 20..super::NUM_PARAMS;

    /// Group name for each parameter index.
    pub fn group_of(i: usize) -> &'static str {
        match i {
            i if MU.contains(&i) => "mu",
            i if SCALE.contains(&i) => "scale",
            i if ROTOR_LEFT.contains(&i) => "rotor_left",
            i if ROTOR_RIGHT.contains(&i) => "rotor_right",
            OPACITY => "opacity",
            i if BASE_COLOR.contains(&i) => "base_color",
            _ => "sh_residual",
        }
    }
}

impl Gaussian4D {
    pub fn to_params(&self) -> ParamArray {
        let mut p = [0.0; NUM_PARAMS];
        p[param::MU].copy_from_slice(self.mu.as_slice());
        p[param::SCALE].copy_from_slice(self.scale.as_slice());
        p[param::ROTOR_LEFT].copy_from_slice(self.rotor_left.as_slice());
        p[param::ROTOR_RIGHT].copy_from_slice(self.rotor_right.as_slice());
        p[param::OPACITY] = self.opacity;
        p[param::BASE_COLOR].copy_from_slice(self.base_color.as_slice());
        p[param::SH].copy_from_slice(&self.sh_residual);
        p
    }

    pub fn from_params(p: &ParamArray) -> Self {
        let mut sh_residual = [0.0; RESIDUAL_LEN];
        sh_residual.copy_from_slice(&p[param::SH]);
        Gaussian4D {
            mu: Vector4::from_column_slice(&p[param::MU]),
            scale: Vector4::from_column_slice(&p[param::SCALE]),
            rotor_left: Vector4::from_column_slice(&p[param::ROTOR_LEFT]),
            rotor_right: Vector4::from_column_slice(&p[param::ROTOR_RIGHT]),
            opacity: p[param::OPACITY],
            base_color: Vector3::from_column_slice(&p[param::BASE_COLOR]),
            sh_residual,
        }
    }
}

pub fn identity_rotor() -> Vector4<f64> {
    Vector4::new(1.0, 0.0, 0.0, 0.0)
}

/// Left-isoclinic matrix: `left_isoclinic(a) * v` is the quaternion product `a * v`.
pub fn left_isoclinic(q: &Vector4<f64>) -> Matrix4<f64> {
    let (a, b, c, d) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        a, -b, -c, -d, //
        b, a, -d, c, //
        c, d, a, -b, //
        d, -c, b, a,
    )
}

/// Right-isoclinic matrix: `right_isoclinic(p) * v` is the quaternion product `v * p`.
pub fn right_isoclinic(q: &Vector4<f64>) -> Matrix4<f64> {
    let (p, q1, r, s) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        p, -q1, -r, -s, //
        q1, p, s, -r, //
        r, -s, p, q1, //
        s, r, -q1, p,
    )
}

/// The 4D rotation `L(q_l) R(q_r)` of two (renormalized) rotors.
pub fn rotation_4d(rotor_left: &Vector4<f64>, rotor_right: &Vector4<f64>) -> Matrix4<f64> {
    left_isoclinic(&rotor_left.normalize()) * right_isoclinic(&rotor_right.normalize())
}

/// Scale after the per-axis lower clamps.
pub fn clamped_scale(scale: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(
        scale.x.max(MIN_SPATIAL_SCALE),
        scale.y.max(MIN_SPATIAL_SCALE),
        scale.z.max(MIN_SPATIAL_SCALE),
        scale.w.max(MIN_TEMPORAL_SCALE),
    )
}

/// Intermediates of the covariance construction, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CovarianceParts {
    pub rotor_left_unit: Vector4<f64>,
    pub rotor_right_unit: Vector4<f64>,
    pub rotor_left_norm: f64,
    pub rotor_right_norm: f64,
    pub left: Matrix4<f64>,
    pub right: Matrix4<f64>,
    pub rotation: Matrix4<f64>,
    pub scale: Vector4<f64>,
    pub scale_active: [bool; 4],
    pub sigma: Matrix4<f64>,
}

impl CovarianceParts {
    pub fn new(g: &Gaussian4D) -> Result<Self> {
        g.validate()?;
        let rotor_left_norm = g.rotor_left.norm();
        let rotor_right_norm = g.rotor_right.norm();
        let rotor_left_unit = g.rotor_left / rotor_left_norm;
        let rotor_right_unit = g.rotor_right / rotor_right_norm;
        let left = left_isoclinic(&rotor_left_unit);
        let right = right_isoclinic(&rotor_right_unit);
        let rotation = left * right;
        let scale = clamped_scale(&g.scale);
        let scale_active = [
            g.scale.x >= MIN_SPATIAL_SCALE,
            g.scale.y >= MIN_SPATIAL_SCALE,
            g.scale.z >= MIN_SPATIAL_SCALE,
            g.scale.w >= MIN_TEMPORAL_SCALE,
        ];
        let a = rotation * Matrix4::from_diagonal(&scale);
        let mut sigma = a * a.transpose();
        // Exact symmetry regardless of rounding in the product.
        sigma = (sigma + sigma.transpose()) * 0.5;
        Ok(CovarianceParts {
            rotor_left_unit,
            rotor_right_unit,
            rotor_left_norm,
            rotor_right_norm,
            left,
            right,
            rotation,
            scale,
            scale_active,
            sigma,
        })
    }

    /// Pulls a gradient on the covariance entries back to the raw scale and
    /// rotor parameters. `dsigma[(i, j)]` is the derivative with respect to
    /// entry `(i, j)` treated as an independent input.
    pub fn backward(&self, dsigma: &Matrix4<f64>) -> CovarianceGrad {
        let s = Matrix4::from_diagonal(&self.scale);
        let a = self.rotation * s;
        let da = (dsigma + dsigma.transpose()) * a;
        let drot = da * s;
        let mut dscale = Vector4::zeros();
        for j in 0..4 {
            if self.scale_active[j] {
                dscale[j] = (0..4).map(|i| da[(i, j)] * self.rotation[(i, j)]).sum();
            }
        }
        let dleft = drot * self.right.transpose();
        let dright = self.left.transpose() * drot;
        let mut dql = Vector4::zeros();
        let mut dqr = Vector4::zeros();
        for k in 0..4 {
            let mut e = Vector4::zeros();
            e[k] = 1.0;
            dql[k] = dleft.component_mul(&left_isoclinic(&e)).sum();
            dqr[k] = dright.component_mul(&right_isoclinic(&e)).sum();
        }
        CovarianceGrad {
            scale: dscale,
            rotor_left: normalize_backward(&self.rotor_left_unit, self.rotor_left_norm, &dql),
            rotor_right: normalize_backward(&self.rotor_right_unit, self.rotor_right_norm, &dqr),
        }
    }
}

fn normalize_backward(unit: &Vector4<f64>, norm: f64, dunit: &Vector4<f64>) -> Vector4<f64> {
    (dunit - unit * unit.dot(dunit)) / norm
}

/// Gradient of a covariance-dependent quantity with respect to the raw parameters.
#[derive(Clone, Debug, Default)]
pub struct CovarianceGrad {
    pub scale: Vector4<f64>,
    pub rotor_left: Vector4<f64>,
    pub rotor_right: Vector4<f64>,
}

/// `Sigma = R S S^T R^T`.
pub fn build_covariance(g: &Gaussian4D) -> Result<Matrix4<f64>> {
    Ok(CovarianceParts::new(g)?.sigma)
}

/// Temporal variance `Sigma[3][3]` after the floor clamp.
pub fn temporal_variance(sigma: &Matrix4<f64>) -> f64 {
    sigma[(3, 3)].max(MIN_TEMPORAL_VARIANCE)
}

/// `exp(-(t - mu_t)^2 / (2 sigma_t))`, the normalized temporal factor.
pub fn temporal_factor_from(mu_t: f64, sigma_t: f64, t: f64) -> f64 {
    let dt = t - mu_t;
    (-0.5 * dt * dt / sigma_t).exp()
}

pub fn temporal_factor(g: &Gaussian4D, t: f64) -> Result<f64> {
    let sigma = build_covariance(g)?;
    Ok(temporal_factor_from(g.mu.w, temporal_variance(&sigma), t))
}

/// Opacity modulated by the temporal marginal: `o * exp(-(t - mu_t)^2 / (2 sigma_t))`.
pub fn marginal_opacity(g: &Gaussian4D, t: f64) -> Result<f64> {
    Ok(g.opacity * temporal_factor(g, t)?)
}

/// Time interval over which the temporal factor stays at or above a threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfluenceRange {
    pub start: f64,
    pub end: f64,
    pub radius: f64,
}

impl InfluenceRange {
    pub fn from_center(center: f64, radius: f64) -> Self {
        InfluenceRange {
            start: center - radius,
            end: center + radius,
            radius,
        }
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }
}

pub fn validate_threshold(o_th: f64) -> Result<()> {
    if !(o_th > 0.0 && o_th < 1.0) {
        return Err(Error::invalid("o_th", format!("{o_th} not in (0, 1)")));
    }
    Ok(())
}

/// Influence radius for temporal variance `sigma_t`: `sqrt(-2 ln(o_th) sigma_t)`.
pub fn influence_radius(sigma_t: f64, o_th: f64) -> f64 {
    (o_th.ln() / -0.5 * sigma_t).sqrt()
}

pub fn influence_range(g: &Gaussian4D, o_th: f64) -> Result<InfluenceRange> {
    validate_threshold(o_th)?;
    let sigma = build_covariance(g)?;
    let radius = influence_radius(temporal_variance(&sigma), o_th);
    Ok(InfluenceRange::from_center(g.mu.w, radius))
}

/// A 4D Gaussian sliced at one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedGaussian3D {
    pub mean3: Vector3<f64>,
    pub cov3: Matrix3<f64>,
    pub opacity_t: f64,
}

/// Conditioning intermediates, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub result: ConditionedGaussian3D,
    pub cross: Vector3<f64>,
    pub sigma_t: f64,
    pub sigma_t_active: bool,
    pub dt: f64,
    pub factor: f64,
}

impl Conditioning {
    pub fn new(g: &Gaussian4D, sigma: &Matrix4<f64>, t: f64) -> Self {
        let cross = Vector3::new(sigma[(0, 3)], sigma[(1, 3)], sigma[(2, 3)]);
        let sigma_t_active = sigma[(3, 3)] >= MIN_TEMPORAL_VARIANCE;
        let sigma_t = temporal_variance(sigma);
        let dt = t - g.mu.w;
        let factor = temporal_factor_from(g.mu.w, sigma_t, t);
        let spatial = sigma.fixed_view::<3, 3>(0, 0).into_owned();
        let mean3 = g.mu.xyz() + cross * (dt / sigma_t);
        let mut cov3 = spatial - cross * cross.transpose() / sigma_t;
        cov3 = (cov3 + cov3.transpose()) * 0.5;
        Conditioning {
            result: ConditionedGaussian3D {
                mean3,
                cov3,
                opacity_t: g.opacity * factor,
            },
            cross,
            sigma_t,
            sigma_t_active,
            dt,
            factor,
        }
    }

    /// Pulls gradients on `(mean3, cov3, opacity_t)` back to `(mu, Sigma, opacity)`.
    pub fn backward(
        &self,
        opacity: f64,
        dmean3: &Vector3<f64>,
        dcov3: &Matrix3<f64>,
        dopacity_t: f64,
    ) -> ConditioningGrad {
        let c = &self.cross;
        let s = self.sigma_t;
        let dt = self.dt;
        let e = self.factor;

        let mut dmu = Vector4::zeros();
        dmu.fixed_rows_mut::<3>(0).copy_from(dmean3);
        dmu.w = -c.dot(dmean3) / s + dopacity_t * opacity * e * dt / s;

        let dc = dmean3 * (dt / s) - (dcov3 + dcov3.transpose()) * c / s;
        let dsigma_t = if self.sigma_t_active {
            -c.dot(dmean3) * dt / (s * s)
                + (c.transpose() * dcov3 * c)[(0, 0)] / (s * s)
                + dopacity_t * opacity * e * dt * dt / (2.0 * s * s)
        } else {
            0.0
        };

        let mut dsigma = Matrix4::zeros();
        dsigma.fixed_view_mut::<3, 3>(0, 0).copy_from(dcov3);
        for i in 0..3 {
            dsigma[(i, 3)] = dc[i];
        }
        dsigma[(3, 3)] = dsigma_t;

        ConditioningGrad {
            mu: dmu,
            sigma: dsigma,
            opacity: dopacity_t * e,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConditioningGrad {
    pub mu: Vector4<f64>,
    pub sigma: Matrix4<f64>,
    pub opacity: f64,
}

/// Slices `g` at time `t`: the conditional spatial Gaussian and its opacity.
pub fn condition_at_time(g: &Gaussian4D, t: f64) -> Result<ConditionedGaussian3D> {
    let sigma = build_covariance(g)?;
    Ok(Conditioning::new(g, &sigma, t).result)
}

/// View-dependent color `clamp(c_base + evalSH(h, d), 0, 1)`.
pub fn eval_color(g: &Gaussian4D, view_dir: &Vector3<f64>) -> Vector3<f64> {
    let raw = g.base_color + sh::eval_residual(&g.sh_residual, view_dir);
    raw.map(|v| v.clamp(0.0, 1.0))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::Rng;

    pub fn random_unit4(rng: &mut impl Rng) -> Vector4<f64> {
        loop {
            let v = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.2 && n <= 1.0 {
                return v / n;
            }
        }
    }

    pub fn random_gaussian(rng: &mut impl Rng) -> Gaussian4D {
        let mut sh_residual = [0.0; RESIDUAL_LEN];
        for v in sh_residual.iter_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
        Gaussian4D {
            mu: Vector4::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..10.0),
            ),
            scale: Vector4::from_fn(|_, _| rng.random_range(0.1..1.5)),
            rotor_left: random_unit4(rng),
            rotor_right: random_unit4(rng),
            opacity: rng.random_range(0.05..1.0),
            base_color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
            sh_residual,
        }
    }
}
