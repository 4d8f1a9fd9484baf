//! Analytic gradients of the rendering loss.
//!
//! The backward pass reuses the forward records, recomputes each pixel's
//! fragment list, and walks it front to back to obtain the transmittance in
//! front of every fragment. Per-tile partial sums are merged in tile order.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{fragment_alpha, prepare, rasterize, ForwardRecord, RasterSplat, RenderOptions, TileBins};
use crate::camera::Camera;
use crate::error::Result;
use crate::gaussians::{param, Gaussian4D, ParamArray, NUM_PARAMS};
use crate::hierarchy::{GaussianId, Hierarchy};
use crate::image::Image;
use crate::loss::{loss, LossValue, LossWeights};
use crate::sh;

/// Loss, rendered image and per-Gaussian gradients, aligned with the input order.
#[derive(Clone, Debug)]
pub struct RenderGradients {
    pub image: Image,
    pub loss: LossValue,
    pub grads: Vec<ParamArray>,
    /// Norm of the loss gradient with respect to the splat center in NDC units.
    pub view_space_grad: Vec<f64>,
    /// Whether the Gaussian produced a splat at all.
    pub visible: Vec<bool>,
}

/// Screen-space gradient of one splat: opacity_t, center (2), conic (3), color (3).
type SplatGrad = [f64; 9];

fn accumulate_tile(
    tile: usize,
    bins: &TileBins,
    splats: &[RasterSplat],
    dimage: &Image,
    opts: &RenderOptions,
) -> Vec<(usize, SplatGrad)> {
    let (width, height) = (dimage.width, dimage.height);
    let rect = bins.tile_rect(tile, width, height);
    let bin = &bins.bins[tile];
    let mut local: Vec<SplatGrad> = vec![[0.0; 9]; bin.len()];
    // (bin slot, alpha, falloff, dx, dy, clamped, color behind)
    let mut frags: Vec<(usize, f64, f64, f64, f64, bool, Vector3<f64>)> = Vec::new();
    for y in rect.y0..=rect.y1 {
        for x in rect.x0..=rect.x1 {
            let p = y * width + x;
            let g = Vector3::new(dimage.data[3 * p], dimage.data[3 * p + 1], dimage.data[3 * p + 2]);
            if g == Vector3::zeros() {
                continue;
            }
            frags.clear();
            let mut color = opts.background;
            for (slot, &i) in bin.iter().enumerate() {
                let s = &splats[i];
                if let Some((a, falloff, dx, dy, clamped)) = fragment_alpha(s, x, y, opts) {
                    frags.push((slot, a, falloff, dx, dy, clamped, color));
                    color = s.color * a + color * (1.0 - a);
                }
            }
            let mut trans = 1.0;
            for &(slot, a, falloff, dx, dy, clamped, behind) in frags.iter().rev() {
                let s = &splats[bin[slot]];
                let d = &mut local[slot];
                for c in 0..3 {
                    d[6 + c] += g[c] * a * trans;
                }
                if !clamped {
                    let dalpha = g.dot(&(s.color - behind)) * trans;
                    d[0] += dalpha * falloff;
                    let dpower = dalpha * a;
                    let [ca, cb, cc] = s.conic;
                    d[1] += dpower * (ca * dx + cb * dy);
                    d[2] += dpower * (cb * dx + cc * dy);
                    d[3] += dpower * (-0.5 * dx * dx);
                    d[4] += dpower * (-dx * dy);
                    d[5] += dpower * (-0.5 * dy * dy);
                }
                trans *= 1.0 - a;
            }
        }
    }
    bin.iter().copied().zip(local).collect()
}

/// Chains a screen-space splat gradient back to the Gaussian parameters.
fn splat_to_params(
    rec: &ForwardRecord,
    g: &Gaussian4D,
    raster: &RasterSplat,
    sg: &SplatGrad,
    cam: &Camera,
) -> ParamArray {
    let dopacity_t = sg[0];
    let dcenter = Vector2::new(sg[1], sg[2]);
    // Symmetric-matrix gradient of the conic; the off-diagonal entry appears twice.
    let dconic = Matrix2::new(sg[3], 0.5 * sg[4], 0.5 * sg[4], sg[5]);
    let dcolor = Vector3::new(sg[6], sg[7], sg[8]);

    let [a, b, c] = raster.conic;
    let conic = Matrix2::new(a, b, b, c);
    let dcov2 = -(conic * dconic * conic);

    let w = &cam.rotation;
    let t = rec.proj * w;
    let cov3 = &rec.conditioning.result.cov3;
    let dcov3: Matrix3<f64> = t.transpose() * dcov2 * t;
    let dt = (dcov2 + dcov2.transpose()) * t * cov3;
    let dj = dt * w.transpose();

    let m = &rec.cam_mean;
    let iz = 1.0 / m.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (cam.fx, cam.fy);
    let mut dm = Vector3::new(
        fx * iz * dcenter.x,
        fy * iz * dcenter.y,
        -fx * m.x * iz2 * dcenter.x - fy * m.y * iz2 * dcenter.y,
    );
    dm.x += dj[(0, 2)] * (-fx * iz2);
    dm.y += dj[(1, 2)] * (-fy * iz2);
    dm.z += dj[(0, 0)] * (-fx * iz2)
        + dj[(0, 2)] * (2.0 * fx * m.x * iz3)
        + dj[(1, 1)] * (-fy * iz2)
        + dj[(1, 2)] * (2.0 * fy * m.y * iz3);
    let mut dmean3 = w.transpose() * dm;

    let mut out = [0.0; NUM_PARAMS];
    let dcolor_raw = dcolor.component_mul(&rec.color_mask);
    out[param::BASE_COLOR].copy_from_slice(dcolor_raw.as_slice());
    let norm = rec.view_vec.norm();
    let dir = rec.view_vec / norm;
    let basis = sh::basis(&dir);
    let basis_grad = sh::basis_gradient(&dir);
    let mut ddir = Vector3::zeros();
    for bi in 0..sh::NUM_BASES {
        for ch in 0..3 {
            out[param::SH.start + 3 * bi + ch] = dcolor_raw[ch] * basis[bi];
            ddir += basis_grad[bi] * (dcolor_raw[ch] * g.sh_residual[3 * bi + ch]);
        }
    }
    dmean3 += (ddir - dir * dir.dot(&ddir)) / norm;

    let cg = rec.conditioning.backward(g.opacity, &dmean3, &dcov3, dopacity_t);
    let covg = rec.cov_parts.backward(&cg.sigma);
    out[param::MU].copy_from_slice(cg.mu.as_slice());
    out[param::SCALE].copy_from_slice(covg.scale.as_slice());
    out[param::ROTOR_LEFT].copy_from_slice(covg.rotor_left.as_slice());
    out[param::ROTOR_RIGHT].copy_from_slice(covg.rotor_right.as_slice());
    out[param::OPACITY] = cg.opacity;
    out
}

/// Renders an explicit Gaussian list, evaluates the loss against `target`
/// and returns gradients for every input Gaussian (zero for culled ones).
#[allow(clippy::too_many_arguments)]
pub fn render_gaussians_with_gradients(
    ids: &[GaussianId],
    gaussians: &[Gaussian4D],
    t: f64,
    cam: &Camera,
    target: &Image,
    weights: &LossWeights,
    opts: &RenderOptions,
) -> Result<RenderGradients> {
    if target.width != cam.width || target.height != cam.height {
        return Err(crate::error::Error::invalid(
            "target",
            format!(
                "image is {}x{}, camera is {}x{}",
                target.width, target.height, cam.width, cam.height
            ),
        ));
    }
    let frame = prepare(ids, gaussians, t, cam, opts)?;
    let image = rasterize(&frame.raster, cam.width, cam.height, opts).into_image();
    let (loss_value, dimage) = loss(&image, target, weights)?;

    let bins = TileBins::new(&frame.raster, cam.width, cam.height, opts.tile_size);
    let tile_fn = |tile: usize| accumulate_tile(tile, &bins, &frame.raster, &dimage, opts);
    let partials: Vec<Vec<(usize, SplatGrad)>> = if opts.parallel {
        (0..bins.bins.len()).into_par_iter().map(tile_fn).collect()
    } else {
        (0..bins.bins.len()).map(tile_fn).collect()
    };
    let mut splat_grads = vec![[0.0; 9]; frame.raster.len()];
    for tile in partials {
        for (i, d) in tile {
            for k in 0..9 {
                splat_grads[i][k] += d[k];
            }
        }
    }

    let mut grads = vec![[0.0; NUM_PARAMS]; gaussians.len()];
    let mut view_space_grad = vec![0.0; gaussians.len()];
    let mut visible = vec![false; gaussians.len()];
    let chained: Vec<(usize, ParamArray, f64)> = frame
        .records
        .par_iter()
        .zip(frame.raster.par_iter())
        .zip(splat_grads.par_iter())
        .map(|((rec, raster), sg)| {
            let p = splat_to_params(rec, &gaussians[rec.source], raster, sg, cam);
            let ndc = Vector2::new(sg[1] * cam.width as f64 * 0.5, sg[2] * cam.height as f64 * 0.5);
            (rec.source, p, ndc.norm())
        })
        .collect();
    for (source, p, vs) in chained {
        grads[source] = p;
        view_space_grad[source] = vs;
        visible[source] = true;
    }
    Ok(RenderGradients {
        image,
        loss: loss_value,
        grads,
        view_space_grad,
        visible,
    })
}

/// Gradients of the loss for the working set of `h` at time `t`.
///
/// Returns the working-set ids alongside the gradients.
pub fn render_with_gradients(
    h: &Hierarchy,
    t: f64,
    cam: &Camera,
    target: &Image,
    weights: &LossWeights,
    opts: &RenderOptions,
) -> Result<(Vec<GaussianId>, RenderGradients)> {
    let ws = h.query(t)?;
    let set = h.materialize(&ws);
    let mut opts = opts.clone();
    opts.temporal_threshold = h.opacity_threshold();
    let grads = render_gaussians_with_gradients(&set.ids, &set.gaussians, t, cam, target, weights, &opts)?;
    Ok((set.ids, grads))
}
