//! Reconstruction objective: weighted MSE and SSIM, with the gradient image.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) applied separably with zero
//! padding, `C1 = 0.01^2`, `C2 = 0.03^2`, averaged over pixels and channels.

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Loss weights for MSE, SSIM and the (unsupported) perceptual term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mse: 0.8,
            ssim: 0.2,
            perceptual: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.mse >= 0.0 && self.ssim >= 0.0 && self.perceptual >= 0.0) {
            return Err(Error::invalid("loss weights", "must be non-negative"));
        }
        if self.perceptual != 0.0 {
            return Err(Error::invalid(
                "lambda_p",
                "the perceptual term needs a pretrained feature network and is not available",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub mse: f64,
    pub ssim: f64,
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable zero-padded "same" blur of one `w x h` plane.
///
/// The kernel is symmetric, so this operator is its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM and, optionally, its gradient with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h) = (a.width, a.height);
    let n = (w * h * 3) as f64;
    let kernel = gaussian_kernel();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.data.len()]);
    for c in 0..3 {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = blur(&x, w, h, &kernel);
        let mu_y = blur(&y, w, h, &kernel);
        let e_xx = blur(&xx, w, h, &kernel);
        let e_yy = blur(&yy, w, h, &kernel);
        let e_xy = blur(&xy, w, h, &kernel);
        let mut d_mu = vec![0.0; w * h];
        let mut d_exx = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for p in 0..w * h {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let n1 = 2.0 * mx * my + SSIM_C1;
            let n2 = 2.0 * (e_xy[p] - mx * my) + SSIM_C2;
            let d1 = mx * mx + my * my + SSIM_C1;
            let d2 = (e_xx[p] - mx * mx) + (e_yy[p] - my * my) + SSIM_C2;
            let f = n1 * n2 / (d1 * d2);
            total += f;
            if want_grad {
                d_mu[p] = 2.0 * my * (n2 - n1) / (d1 * d2) - 2.0 * mx * f / d1 + 2.0 * mx * f / d2;
                d_exx[p] = -f / d2;
                d_exy[p] = 2.0 * n1 / (d1 * d2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let b_mu = blur(&d_mu, w, h, &kernel);
            let b_exx = blur(&d_exx, w, h, &kernel);
            let b_exy = blur(&d_exy, w, h, &kernel);
            for p in 0..w * h {
                g[3 * p + c] = (b_mu[p] + 2.0 * x[p] * b_exx[p] + y[p] * b_exy[p]) / n;
            }
        }
    }
    (total / n, grad)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid("image", "dimension mismatch"));
    }
    Ok(ssim_impl(a, b, false).0)
}

/// `lambda_m * MSE + lambda_s * (1 - SSIM)` and its gradient with respect to `rendered`.
pub fn loss(rendered: &Image, target: &Image, weights: &LossWeights) -> Result<(LossValue, Image)> {
    if !rendered.same_shape(target) {
        return Err(Error::invalid(
            "target",
            format!(
                "dimension mismatch: {}x{} vs {}x{}",
                rendered.width, rendered.height, target.width, target.height
            ),
        ));
    }
    weights.validate()?;
    let n = rendered.data.len() as f64;
    let mut grad = Image::new(rendered.width, rendered.height);
    let mut mse = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = r - t;
        mse += d * d;
        *g = weights.mse * 2.0 * d / n;
    }
    mse /= n;
    let mut ssim_value = 1.0;
    if weights.ssim != 0.0 {
        let (s, sg) = ssim_impl(rendered, target, true);
        ssim_value = s;
        for (g, d) in grad.data.iter_mut().zip(sg.expect("requested")) {
            *g -= weights.ssim * d;
        }
    }
    let total = weights.mse * mse + weights.ssim * (1.0 - ssim_value);
    Ok((
        LossValue {
            total,
            mse,
            ssim: ssim_value,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn identical_images_have_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 12, 9);
        let (v, g) = loss(&a, &a, &LossWeights::default()).unwrap();
        assert!(v.total.abs() < 1e-12);
        assert!((v.ssim - 1.0).abs() < 1e-12);
        assert!(g.data.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn constant_offset_mse_only() {
        let a = Image::filled(8, 8, [0.5; 3]);
        let b = Image::filled(8, 8, [0.4; 3]);
        let w = LossWeights {
            ssim: 0.0,
            ..Default::default()
        };
        let (v, _) = loss(&a, &b, &w).unwrap();
        assert!((v.total - 0.008).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 13, 10);
        let b = random_image(&mut rng, 13, 10);
        let w = LossWeights::default();
        let (_, g) = loss(&a, &b, &w).unwrap();
        for _ in 0..60 {
            let i = rng.random_range(0..a.data.len());
            let h = 1e-6;
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data[i] += h;
            am.data[i] -= h;
            let fd = (loss(&ap, &b, &w).unwrap().0.total - loss(&am, &b, &w).unwrap().0.total) / (2.0 * h);
            let rel = (fd - g.data[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "index {i}: fd {fd} analytic {}", g.data[i]);
        }
    }

    #[test]
    fn mismatch_and_perceptual_are_rejected() {
        let a = Image::new(4, 4);
        assert!(loss(&a, &Image::new(4, 5), &LossWeights::default()).is_err());
        let w = LossWeights {
            perceptual: 0.01,
            ..Default::default()
        };
        assert!(loss(&a, &a, &w).is_err());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!(s1 < 1.0 && s1 > -1.0);
    }
}
