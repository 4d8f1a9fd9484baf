use std::io::Write;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{adaptive_control, ControlReport, DensifyStats, SparseAdam, TrainConfig};
use crate::appearance::{gate_gradients, update_ratio_cutoff, AppearanceGate};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{param, Gaussian4D, ParamArray, MIN_SPATIAL_SCALE, MIN_TEMPORAL_SCALE, NUM_PARAMS};
use crate::hierarchy::Hierarchy;
use crate::image::{psnr_from_mse, Image};
use crate::loss::LossValue;
use crate::renderer::render_gaussians_with_gradients;

/// Multi-view video supplying training targets.
pub trait FrameSource: Sync {
    fn num_views(&self) -> usize;
    fn num_frames(&self) -> usize;
    fn frame_time(&self, frame: usize) -> f64;
    fn camera(&self, view: usize) -> &Camera;
    fn target(&self, view: usize, frame: usize) -> Result<Image>;
}

/// Radius of the camera rig around its centroid, padded by 10%.
pub fn camera_extent(source: &dyn FrameSource) -> f64 {
    let n = source.num_views();
    if n == 0 {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = (0..n).map(|v| source.camera(v).center()).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / n as f64;
    let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if radius > 0.0 {
        1.1 * radius
    } else {
        1.0
    }
}

/// What happened in one optimization step.
#[derive(Clone, Debug)]
pub struct StepInfo {
    /// 1-based.
    pub iteration: usize,
    pub view: usize,
    pub frame: usize,
    pub t: f64,
    pub loss: LossValue,
    pub psnr: f64,
    pub working_set_size: usize,
    /// Gaussians that produced a splat.
    pub visible: usize,
    /// Gaussians whose parameters were written back.
    pub touched: usize,
    pub num_gaussians: usize,
    pub view_dependent: usize,
    /// Diffuse Gaussians that gained a nonzero residual in this step.
    pub newly_view_dependent: usize,
    /// Gaussians whose residual gradient was zeroed by the gate.
    pub gated: usize,
    pub gate: AppearanceGate,
    pub seconds: f64,
}

/// Hooks for monitoring a run. All methods default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _info: &StepInfo, _h: &Hierarchy) {}
    fn on_control(&mut self, _iteration: usize, _report: &ControlReport, _h: &Hierarchy) {}
}

impl TrainObserver for () {}

/// One row of the metrics log, averaged over a logging window.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: f64,
    pub num_gaussians: usize,
    pub working_set_size: f64,
    pub seconds_per_iter: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "iteration,loss,psnr,num_gaussians,working_set_size,seconds_per_iter")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.8},{:.4},{},{:.2},{:.6}",
            r.iteration, r.loss, r.psnr, r.num_gaussians, r.working_set_size, r.seconds_per_iter
        )?;
    }
    Ok(())
}

#[derive(Default)]
struct Window {
    steps: usize,
    loss: f64,
    psnr: f64,
    working_set: f64,
    seconds: f64,
}

const OPACITY_EPS: f64 = 1e-7;

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Optimizer-space parameters: log scales and logit opacity.
fn to_raw(g: &Gaussian4D) -> ParamArray {
    let mut p = g.to_params();
    for (k, i) in param::SCALE.enumerate() {
        let floor = if k == 3 { MIN_TEMPORAL_SCALE } else { MIN_SPATIAL_SCALE };
        p[i] = p[i].max(floor).ln();
    }
    p[param::OPACITY] = logit(p[param::OPACITY]);
    p
}

fn from_raw(p: &ParamArray) -> Gaussian4D {
    let mut q = *p;
    for i in param::SCALE {
        q[i] = q[i].exp();
    }
    q[param::OPACITY] = sigmoid(q[param::OPACITY]);
    for i in param::BASE_COLOR {
        q[i] = q[i].clamp(0.0, 1.0);
    }
    let mut g = Gaussian4D::from_params(&q);
    g.normalize_rotors();
    g
}

fn raw_gradient(g: &Gaussian4D, grad: &ParamArray) -> ParamArray {
    let mut d = *grad;
    for (k, i) in param::SCALE.enumerate() {
        d[i] *= g.scale[k];
    }
    let o = g.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    d[param::OPACITY] *= o * (1.0 - o);
    d
}

/// Owns the hierarchy for the duration of a run.
pub struct Trainer<'a, S: FrameSource + ?Sized> {
    h: Hierarchy,
    source: &'a S,
    cfg: TrainConfig,
    lr: ParamArray,
    adam: SparseAdam,
    stats: DensifyStats,
    gate: AppearanceGate,
    rng: ChaCha8Rng,
    iteration: usize,
    view_dependent: usize,
    metrics: Vec<MetricsRow>,
    window: Window,
}

impl<'a, S: FrameSource + ?Sized> Trainer<'a, S> {
    pub fn new(h: Hierarchy, source: &'a S, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if source.num_views() == 0 || source.num_frames() == 0 {
            return Err(Error::invalid("scene", "needs at least one view and one frame"));
        }
        let m = &cfg.lr_multipliers;
        let base = cfg.lr_position;
        let mut lr = [0.0; NUM_PARAMS];
        for i in 0..3 {
            lr[i] = base * cfg.scene_extent;
        }
        lr[3] = base * cfg.time_extent;
        lr[param::SCALE].fill(base * m.scale);
        lr[param::ROTOR_LEFT].fill(base * m.rotor);
        lr[param::ROTOR_RIGHT].fill(base * m.rotor);
        lr[param::OPACITY] = base * m.opacity;
        lr[param::BASE_COLOR].fill(base * m.color);
        lr[param::SH].fill(base * m.sh);
        let view_dependent = h.iter().filter(|(_, g)| !g.is_diffuse()).count();
        Ok(Trainer {
            h,
            source,
            gate: AppearanceGate::new(cfg.g_th, cfg.lambda_h)?,
            adam: SparseAdam::new(cfg.adam),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            lr,
            cfg,
            stats: DensifyStats::default(),
            iteration: 0,
            view_dependent,
            metrics: Vec::new(),
            window: Window::default(),
        })
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.h
    }

    pub fn into_hierarchy(self) -> Hierarchy {
        self.h
    }

    pub fn gate(&self) -> AppearanceGate {
        self.gate
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    /// Number of stored Gaussians with a nonzero residual, maintained incrementally.
    pub fn view_dependent_count(&self) -> usize {
        self.view_dependent
    }

    /// One optimization step on a randomly sampled (view, frame) pair.
    pub fn step(&mut self, observer: &mut dyn TrainObserver) -> Result<StepInfo> {
        let start = Instant::now();
        self.iteration += 1;
        let view = self.rng.random_range(0..self.source.num_views());
        let frame = self.rng.random_range(0..self.source.num_frames());
        let t = self.source.frame_time(frame);
        let cam = self.source.camera(view);
        let target = self.source.target(view, frame)?;

        let ws = self.h.query(t)?;
        let set = self.h.materialize(&ws);
        let mut opts = self.cfg.render.clone();
        opts.temporal_threshold = self.h.opacity_threshold();
        let out = render_gaussians_with_gradients(&set.ids, &set.gaussians, t, cam, &target, &self.cfg.loss, &opts)?;

        let mut touched = 0;
        let mut visible = 0;
        let mut newly_vd = 0usize;
        let mut lost_vd = 0usize;
        let mut gated = 0;
        for (i, (&id, g)) in set.ids.iter().zip(&set.gaussians).enumerate() {
            if !out.visible[i] {
                continue;
            }
            visible += 1;
            let mut grad = out.grads[i];
            let mut g_h = [0.0; crate::sh::RESIDUAL_LEN];
            g_h.copy_from_slice(&grad[param::SH]);
            if !gate_gradients(&g.sh_residual, &mut g_h, &self.gate) {
                gated += 1;
            }
            grad[param::SH].copy_from_slice(&g_h);
            if grad.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let was_diffuse = g.is_diffuse();
            let mut raw = to_raw(g);
            self.adam.step(id, &mut raw, &raw_gradient(g, &grad), &self.lr);
            let updated = from_raw(&raw);
            if !updated.is_finite() {
                continue;
            }
            match (was_diffuse, updated.is_diffuse()) {
                (true, false) => newly_vd += 1,
                (false, true) => lost_vd += 1,
                _ => {}
            }
            self.h.set_gaussian(id, updated)?;
            self.stats.record(
                id,
                out.view_space_grad[i],
                Vector3::new(grad[param::MU.start], grad[param::MU.start + 1], grad[param::MU.start + 2]),
            );
            touched += 1;
        }
        self.view_dependent = self.view_dependent + newly_vd - lost_vd;

        if self.iteration % self.cfg.ratio_check_interval == 0 && !self.h.is_empty() {
            self.gate = update_ratio_cutoff(self.view_dependent, self.h.len(), &self.gate)?;
        }

        if self.iteration % self.cfg.densify_interval == 0
            && self.iteration >= self.cfg.densify_from
            && self.iteration <= self.cfg.densify_until
        {
            let report = adaptive_control(&mut self.h, &mut self.stats, &self.cfg.control, &mut self.rng)?;
            for id in &report.removed {
                self.adam.forget(*id);
            }
            self.view_dependent = (self.view_dependent as i64 + report.view_dependent_delta) as usize;
            log::debug!(
                "iteration {}: pruned {} cloned {} split {} population {}",
                self.iteration,
                report.pruned,
                report.cloned,
                report.split,
                self.h.len()
            );
            observer.on_control(self.iteration, &report, &self.h);
        }

        let info = StepInfo {
            iteration: self.iteration,
            view,
            frame,
            t,
            psnr: psnr_from_mse(out.loss.mse),
            loss: out.loss,
            working_set_size: set.ids.len(),
            visible,
            touched,
            num_gaussians: self.h.len(),
            view_dependent: self.view_dependent,
            newly_view_dependent: newly_vd,
            gated,
            gate: self.gate,
            seconds: start.elapsed().as_secs_f64(),
        };
        debug_assert!(info.touched <= info.working_set_size);
        self.record_metrics(&info);
        observer.on_step(&info, &self.h);
        Ok(info)
    }

    fn record_metrics(&mut self, info: &StepInfo) {
        let w = &mut self.window;
        w.steps += 1;
        w.loss += info.loss.total;
        w.psnr += info.psnr;
        w.working_set += info.working_set_size as f64;
        w.seconds += info.seconds;
        if w.steps == self.cfg.log_interval || self.iteration == self.cfg.iterations {
            let n = w.steps as f64;
            let row = MetricsRow {
                iteration: info.iteration,
                loss: w.loss / n,
                psnr: w.psnr / n,
                num_gaussians: info.num_gaussians,
                working_set_size: w.working_set / n,
                seconds_per_iter: w.seconds / n,
            };
            log::info!(
                "iter {:>6}  loss {:.5}  psnr {:.2}  gaussians {}  working set {:.0}",
                row.iteration,
                row.loss,
                row.psnr,
                row.num_gaussians,
                row.working_set_size
            );
            self.metrics.push(row);
            *w = Window::default();
        }
    }

    /// Runs the remaining configured iterations.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            self.step(observer)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub hierarchy: Hierarchy,
    pub metrics: Vec<MetricsRow>,
    pub gate: AppearanceGate,
}

/// Trains `h` on `source` for `cfg.iterations` steps.
pub fn train<S: FrameSource + ?Sized>(
    h: Hierarchy,
    source: &S,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(h, source, cfg.clone())?;
    trainer.run(observer)?;
    let gate = trainer.gate();
    let metrics = trainer.metrics().to_vec();
    Ok(TrainOutcome {
        hierarchy: trainer.into_hierarchy(),
        metrics,
        gate,
    })
}
