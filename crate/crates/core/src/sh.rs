//! Real spherical harmonics of degree 1 to 3.
//!
//! The constant band is not represented here: it lives in a Gaussian's base
//! color. The remaining 15 bases are ordered band-major (l = 1, m = -1..1;
//! l = 2, m = -2..2; l = 3, m = -3..3) and residual coefficients are stored
//! `[basis][channel]`, i.e. coefficient `b` of channel `c` is at `3 * b + c`.

use nalgebra::Vector3;

/// Number of non-constant bases up to degree 3.
pub const NUM_BASES: usize = 15;
/// Residual coefficients per Gaussian (15 bases x 3 channels).
pub const RESIDUAL_LEN: usize = NUM_BASES * 3;

pub const C1: f64 = 0.488_602_511_902_919_9;
pub const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Degree (band) of each residual basis.
pub const BAND_OF_BASIS: [usize; NUM_BASES] = [1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3, 3, 3];

/// Evaluates the 15 residual bases at `d`.
///
/// The bases are homogeneous polynomials in the components of `d`; callers
/// pass a unit vector.
pub fn basis(d: &Vector3<f64>) -> [f64; NUM_BASES] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        -C1 * y,
        C1 * z,
        -C1 * x,
        C2[0] * x * y,
        C2[1] * y * z,
        C2[2] * (2.0 * zz - xx - yy),
        C2[3] * x * z,
        C2[4] * (xx - yy),
        C3[0] * y * (3.0 * xx - yy),
        C3[1] * x * y * z,
        C3[2] * y * (4.0 * zz - xx - yy),
        C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        C3[4] * x * (4.0 * zz - xx - yy),
        C3[5] * z * (xx - yy),
        C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of each basis polynomial with respect to (x, y, z).
pub fn basis_gradient(d: &Vector3<f64>) -> [Vector3<f64>; NUM_BASES] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        Vector3::new(0.0, -C1, 0.0),
        Vector3::new(0.0, 0.0, C1),
        Vector3::new(-C1, 0.0, 0.0),
        Vector3::new(C2[0] * y, C2[0] * x, 0.0),
        Vector3::new(0.0, C2[1] * z, C2[1] * y),
        Vector3::new(-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z),
        Vector3::new(C2[3] * z, 0.0, C2[3] * x),
        Vector3::new(2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0),
        Vector3::new(6.0 * C3[0] * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0),
        Vector3::new(C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
        Vector3::new(
            -2.0 * C3[2] * x * y,
            C3[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * C3[2] * y * z,
        ),
        Vector3::new(
            -6.0 * C3[3] * x * z,
            -6.0 * C3[3] * y * z,
            C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ),
        Vector3::new(
            C3[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * C3[4] * x * y,
            8.0 * C3[4] * x * z,
        ),
        Vector3::new(2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)),
        Vector3::new(C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0),
    ]
}

/// `evalSH(h, d)`: the residual color contribution of coefficients `h`.
pub fn eval_residual(h: &[f64; RESIDUAL_LEN], d: &Vector3<f64>) -> Vector3<f64> {
    let y = basis(d);
    let mut out = Vector3::zeros();
    for (b, yb) in y.iter().enumerate() {
        for c in 0..3 {
            out[c] += h[3 * b + c] * yb;
        }
    }
    out
}
