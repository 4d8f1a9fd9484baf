//! Deterministic software splatting.
//!
//! Pipeline per frame: slice every working-set Gaussian at `t`, drop those
//! outside their temporal influence, project to screen-space 2D Gaussians
//! (EWA linearization), sort back to front, expand each splat into a quad
//! bounded by the alpha threshold, evaluate fragments and blend with the over
//! operator. Tiles are processed in parallel; every pixel is composited
//! sequentially in the single global order, so the result does not depend on
//! the tile size or thread count.

mod backward;

pub use backward::{render_gaussians_with_gradients, render_with_gradients, RenderGradients};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{CovarianceParts, Conditioning, ConditionedGaussian3D, Gaussian4D};
use crate::hierarchy::{GaussianId, Hierarchy};
use crate::image::Image;
use crate::sh;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub background: Vector3<f64>,
    /// Quad / fragment opacity threshold.
    pub alpha_min: f64,
    /// Per-fragment alpha clamp.
    pub max_alpha: f64,
    /// Added to the diagonal of every screen-space covariance (pixels^2).
    pub low_pass: f64,
    /// Splats whose temporal factor falls below this are dropped.
    pub temporal_threshold: f64,
    pub tile_size: usize,
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background: Vector3::zeros(),
            alpha_min: 1.0 / 255.0,
            max_alpha: 0.99,
            low_pass: 0.3,
            temporal_threshold: crate::hierarchy::DEFAULT_OPACITY_THRESHOLD,
            tile_size: 16,
            parallel: true,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_min > 0.0 && self.alpha_min < 1.0) {
            return Err(Error::invalid("alpha_min", "must lie in (0, 1)"));
        }
        if !(self.max_alpha > 0.0 && self.max_alpha <= 1.0) {
            return Err(Error::invalid("max_alpha", "must lie in (0, 1]"));
        }
        if !(self.low_pass >= 0.0) {
            return Err(Error::invalid("low_pass", "must be non-negative"));
        }
        if self.tile_size == 0 {
            return Err(Error::invalid("tile_size", "must be positive"));
        }
        Ok(())
    }
}

/// A screen-space Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub center: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub alpha: f64,
}

/// Projects a conditioned Gaussian; `None` when its depth is outside `[near, far]`.
pub fn project(
    g3: &ConditionedGaussian3D,
    color: Vector3<f64>,
    cam: &Camera,
    low_pass: f64,
) -> Option<Splat2D> {
    let m = cam.to_camera(&g3.mean3);
    if !(m.z >= cam.near && m.z <= cam.far) {
        return None;
    }
    let t = cam.projection_jacobian(&m) * cam.rotation;
    let cov = t * g3.cov3 * t.transpose() + Matrix2::identity() * low_pass;
    Some(Splat2D {
        center: cam.project_camera(&m),
        cov: (cov + cov.transpose()) * 0.5,
        depth: m.z,
        color,
        alpha: g3.opacity_t,
    })
}

/// Back-to-front order: decreasing depth, ties by ascending id.
pub fn depth_sort(depths: &[f64], ids: &[GaussianId]) -> Vec<usize> {
    assert_eq!(depths.len(), ids.len());
    let mut order: Vec<usize> = (0..depths.len()).collect();
    order.sort_by(|&a, &b| depths[b].total_cmp(&depths[a]).then(ids[a].cmp(&ids[b])));
    order
}

/// Axis-aligned bounds of a splat's alpha level set, in continuous pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadBounds {
    pub center: Vector2<f64>,
    pub half_extent: Vector2<f64>,
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

impl QuadBounds {
    /// Pixels whose sample position falls inside the bounds, clipped to the image.
    pub fn pixel_rect(&self, width: usize, height: usize) -> Option<PixelRect> {
        let clip = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
            let a = lo.ceil().max(0.0);
            let b = hi.floor().min(n as f64 - 1.0);
            (a <= b).then_some((a as usize, b as usize))
        };
        let (x0, x1) = clip(
            self.center.x - self.half_extent.x,
            self.center.x + self.half_extent.x,
            width,
        )?;
        let (y0, y1) = clip(
            self.center.y - self.half_extent.y,
            self.center.y + self.half_extent.y,
            height,
        )?;
        Some(PixelRect { x0, y0, x1, y1 })
    }
}

/// Bounding box of `{d : alpha * exp(-d^T cov^-1 d / 2) >= alpha_min}`; `None` when empty.
pub fn expand_quad(s: &Splat2D, alpha_min: f64) -> Option<QuadBounds> {
    if !(s.alpha >= alpha_min) {
        return None;
    }
    let k2 = 2.0 * (s.alpha / alpha_min).ln();
    // The ellipse d^T A^-1 d <= k^2 has half-extents k sqrt(A_ii).
    let half_extent = Vector2::new((k2 * s.cov[(0, 0)]).sqrt(), (k2 * s.cov[(1, 1)]).sqrt());
    Some(QuadBounds {
        center: s.center,
        half_extent,
    })
}

/// Accumulated color and transmittance.
#[derive(Clone, Debug, PartialEq)]
pub struct Framebuffer {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl Framebuffer {
    pub fn new(width: usize, height: usize, background: Vector3<f64>) -> Self {
        let mut rgb = vec![0.0; width * height * 3];
        for px in rgb.chunks_exact_mut(3) {
            px.copy_from_slice(background.as_slice());
        }
        Framebuffer {
            width,
            height,
            rgb,
            transmittance: vec![1.0; width * height],
        }
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.rgb.clone(),
        }
    }

    pub fn into_image(self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.rgb,
        }
    }
}

/// A projected splat ready for rasterization.
#[derive(Clone, Debug)]
pub(crate) struct RasterSplat {
    pub center: Vector2<f64>,
    /// Inverse screen covariance `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub color: Vector3<f64>,
    pub alpha: f64,
    pub rect: PixelRect,
}

impl RasterSplat {
    fn from_splat(s: &Splat2D, opts: &RenderOptions, width: usize, height: usize) -> Option<Self> {
        let det = s.cov.determinant();
        if !(det > 0.0) {
            return None;
        }
        let rect = expand_quad(s, opts.alpha_min)?.pixel_rect(width, height)?;
        Some(RasterSplat {
            center: s.center,
            conic: [s.cov[(1, 1)] / det, -s.cov[(0, 1)] / det, s.cov[(0, 0)] / det],
            color: s.color,
            alpha: s.alpha,
            rect,
        })
    }

    /// Gaussian falloff at pixel `(x, y)`.
    #[inline]
    pub fn falloff(&self, x: usize, y: usize) -> (f64, f64, f64) {
        let dx = x as f64 - self.center.x;
        let dy = y as f64 - self.center.y;
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        (power.exp(), dx, dy)
    }
}

/// Tile grid and, per tile, the indices (in back-to-front order) of splats touching it.
pub(crate) struct TileBins {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub bins: Vec<Vec<usize>>,
}

impl TileBins {
    pub fn new(splats: &[RasterSplat], width: usize, height: usize, tile_size: usize) -> Self {
        let tiles_x = width.div_ceil(tile_size);
        let tiles_y = height.div_ceil(tile_size);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for (i, s) in splats.iter().enumerate() {
            for ty in s.rect.y0 / tile_size..=s.rect.y1 / tile_size {
                for tx in s.rect.x0 / tile_size..=s.rect.x1 / tile_size {
                    bins[ty * tiles_x + tx].push(i);
                }
            }
        }
        TileBins {
            tile_size,
            tiles_x,
            bins,
        }
    }

    pub fn tile_rect(&self, tile: usize, width: usize, height: usize) -> PixelRect {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        PixelRect {
            x0: tx * self.tile_size,
            y0: ty * self.tile_size,
            x1: ((tx + 1) * self.tile_size).min(width) - 1,
            y1: ((ty + 1) * self.tile_size).min(height) - 1,
        }
    }
}

/// Fragment opacity, or `None` when below the threshold.
#[inline]
pub(crate) fn fragment_alpha(s: &RasterSplat, x: usize, y: usize, opts: &RenderOptions) -> Option<(f64, f64, f64, f64, bool)> {
    if !s.rect.contains(x, y) {
        return None;
    }
    let (falloff, dx, dy) = s.falloff(x, y);
    let raw = s.alpha * falloff;
    if raw < opts.alpha_min {
        return None;
    }
    let clamped = raw > opts.max_alpha;
    Some((if clamped { opts.max_alpha } else { raw }, falloff, dx, dy, clamped))
}

/// Blends back-to-front ordered splats over the background.
pub(crate) fn rasterize(splats: &[RasterSplat], width: usize, height: usize, opts: &RenderOptions) -> Framebuffer {
    let bins = TileBins::new(splats, width, height, opts.tile_size);
    let shade_tile = |tile: usize| -> (PixelRect, Vec<f64>, Vec<f64>) {
        let rect = bins.tile_rect(tile, width, height);
        let bin = &bins.bins[tile];
        let mut rgb = Vec::new();
        let mut trans = Vec::new();
        for y in rect.y0..=rect.y1 {
            for x in rect.x0..=rect.x1 {
                let mut color = opts.background;
                let mut t = 1.0;
                for &i in bin {
                    let s = &splats[i];
                    if let Some((a, ..)) = fragment_alpha(s, x, y, opts) {
                        color = s.color * a + color * (1.0 - a);
                        t *= 1.0 - a;
                    }
                }
                rgb.extend_from_slice(color.as_slice());
                trans.push(t);
            }
        }
        (rect, rgb, trans)
    };
    let n_tiles = bins.bins.len();
    let shaded: Vec<_> = if opts.parallel {
        (0..n_tiles).into_par_iter().map(shade_tile).collect()
    } else {
        (0..n_tiles).map(shade_tile).collect()
    };
    let mut fb = Framebuffer::new(width, height, opts.background);
    for (rect, rgb, trans) in shaded {
        let mut k = 0;
        for y in rect.y0..=rect.y1 {
            for x in rect.x0..=rect.x1 {
                let p = y * width + x;
                fb.rgb[3 * p..3 * p + 3].copy_from_slice(&rgb[3 * k..3 * k + 3]);
                fb.transmittance[p] = trans[k];
                k += 1;
            }
        }
    }
    fb
}

/// Composites splats given in back-to-front order over the background.
pub fn composite(
    width: usize,
    height: usize,
    ordered: &[Splat2D],
    opts: &RenderOptions,
) -> Result<Framebuffer> {
    opts.validate()?;
    let raster: Vec<RasterSplat> = ordered
        .iter()
        .filter_map(|s| RasterSplat::from_splat(s, opts, width, height))
        .collect();
    Ok(rasterize(&raster, width, height, opts))
}

/// Forward intermediates of one Gaussian, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ForwardRecord {
    pub source: usize,
    pub cov_parts: CovarianceParts,
    pub conditioning: Conditioning,
    pub cam_mean: Vector3<f64>,
    pub proj: Matrix2x3<f64>,
    pub view_vec: Vector3<f64>,
    pub color_mask: Vector3<f64>,
    pub splat: Splat2D,
}

/// Visible splats of a Gaussian list, sorted back to front.
pub(crate) struct PreparedFrame {
    pub records: Vec<ForwardRecord>,
    pub raster: Vec<RasterSplat>,
}

pub(crate) fn prepare(
    ids: &[GaussianId],
    gaussians: &[Gaussian4D],
    t: f64,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<PreparedFrame> {
    if ids.len() != gaussians.len() {
        return Err(Error::invalid("ids", "length differs from gaussians"));
    }
    opts.validate()?;
    cam.validate()?;
    let cam_center = cam.center();
    let process = |(source, g): (usize, &Gaussian4D)| -> Result<Option<(ForwardRecord, RasterSplat)>> {
        let cov_parts = CovarianceParts::new(g)?;
        let conditioning = Conditioning::new(g, &cov_parts.sigma, t);
        if conditioning.factor < opts.temporal_threshold {
            return Ok(None);
        }
        let g3 = &conditioning.result;
        if g3.opacity_t < opts.alpha_min {
            return Ok(None);
        }
        let cam_mean = cam.to_camera(&g3.mean3);
        let view_vec = g3.mean3 - cam_center;
        let dir = view_vec.normalize();
        let raw = g.base_color + sh::eval_residual(&g.sh_residual, &dir);
        let color_mask = raw.map(|v| if (0.0..=1.0).contains(&v) { 1.0 } else { 0.0 });
        let color = raw.map(|v| v.clamp(0.0, 1.0));
        let Some(splat) = project(g3, color, cam, opts.low_pass) else {
            return Ok(None);
        };
        let Some(raster) = RasterSplat::from_splat(&splat, opts, cam.width, cam.height) else {
            return Ok(None);
        };
        Ok(Some((
            ForwardRecord {
                source,
                cov_parts,
                conditioning,
                proj: cam.projection_jacobian(&cam_mean),
                cam_mean,
                view_vec,
                color_mask,
                splat,
            },
            raster,
        )))
    };
    let results: Vec<Result<Option<(ForwardRecord, RasterSplat)>>> = if opts.parallel {
        gaussians.par_iter().enumerate().map(process).collect()
    } else {
        gaussians.iter().enumerate().map(process).collect()
    };
    let mut visible = Vec::new();
    for r in results {
        if let Some(v) = r? {
            visible.push(v);
        }
    }
    let depths: Vec<f64> = visible.iter().map(|(r, _)| r.splat.depth).collect();
    let vis_ids: Vec<GaussianId> = visible.iter().map(|(r, _)| ids[r.source]).collect();
    let order = depth_sort(&depths, &vis_ids);
    let mut slots: Vec<Option<(ForwardRecord, RasterSplat)>> = visible.into_iter().map(Some).collect();
    let (records, raster) = order
        .into_iter()
        .map(|i| slots[i].take().expect("permutation"))
        .unzip();
    Ok(PreparedFrame { records, raster })
}

/// Renders an explicit list of Gaussians at time `t`.
pub fn render_gaussians(
    ids: &[GaussianId],
    gaussians: &[Gaussian4D],
    t: f64,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<Framebuffer> {
    let frame = prepare(ids, gaussians, t, cam, opts)?;
    Ok(rasterize(&frame.raster, cam.width, cam.height, opts))
}

/// Renders the working set of `h` at time `t`.
pub fn render(h: &Hierarchy, t: f64, cam: &Camera, opts: &RenderOptions) -> Result<Framebuffer> {
    let ws = h.query(t)?;
    let set = h.materialize(&ws);
    let mut opts = opts.clone();
    opts.temporal_threshold = h.opacity_threshold();
    render_gaussians(&set.ids, &set.gaussians, t, cam, &opts)
}

/// Splats for a Gaussian list, back to front (culled ones omitted).
pub fn project_all(
    ids: &[GaussianId],
    gaussians: &[Gaussian4D],
    t: f64,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<Vec<(GaussianId, Splat2D)>> {
    let frame = prepare(ids, gaussians, t, cam, opts)?;
    Ok(frame
        .records
        .into_iter()
        .map(|r| (ids[r.source], r.splat))
        .collect())
}

/// Spatial covariance shorthand used by tests and diagnostics.
pub fn screen_covariance(cov3: &Matrix3<f64>, cam: &Camera, cam_mean: &Vector3<f64>) -> Matrix2<f64> {
    let t = cam.projection_jacobian(cam_mean) * cam.rotation;
    t * cov3 * t.transpose()
}

#[cfg(test)]
mod tests;
