//! Training: objective, sparse Adam, adaptive density control and the loop.
//!
//! Only the working set of the sampled timestamp is rendered and updated in
//! a step, so the cost of a step does not grow with the video length.

mod adam;
mod control;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState, SparseAdam};
pub use control::{adaptive_control, clone_nudged, split, ControlConfig, ControlReport, DensifyStats, GradStat};
pub use train::{
    camera_extent, train, write_metrics_csv, FrameSource, MetricsRow, StepInfo, TrainObserver, TrainOutcome, Trainer,
};

use crate::appearance::{DEFAULT_GRADIENT_THRESHOLD, DEFAULT_RATIO_CUTOFF};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::renderer::RenderOptions;

/// Learning-rate multipliers relative to the base position rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrMultipliers {
    pub scale: f64,
    pub rotor: f64,
    pub opacity: f64,
    pub color: f64,
    pub sh: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        LrMultipliers {
            scale: 5.0,
            rotor: 5.0,
            opacity: 25.0,
            color: 12.5,
            sh: 12.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Base rate; spatial means use `lr_position * scene_extent`.
    pub lr_position: f64,
    pub scene_extent: f64,
    /// Temporal means use `lr_position * time_extent`.
    pub time_extent: f64,
    pub lr_multipliers: LrMultipliers,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub densify_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub control: ControlConfig,
    pub g_th: f64,
    pub lambda_h: f64,
    /// Steps between ratio-cutoff evaluations.
    pub ratio_check_interval: usize,
    pub render: RenderOptions,
    /// Steps per metrics row.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            seed: 0,
            lr_position: 1.6e-4,
            scene_extent: 1.0,
            time_extent: 1.0,
            lr_multipliers: LrMultipliers::default(),
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            densify_interval: 100,
            densify_from: 500,
            densify_until: 15_000,
            control: ControlConfig::default(),
            g_th: DEFAULT_GRADIENT_THRESHOLD,
            lambda_h: DEFAULT_RATIO_CUTOFF,
            ratio_check_interval: 1,
            render: RenderOptions::default(),
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    /// Settings for low-resolution scenes trained for a few thousand steps.
    ///
    /// Each Gaussian spans only a few frames and so receives a small fraction
    /// of the steps; the base rate and the opacity and scale multipliers are
    /// raised to compensate, and the densification threshold is raised to
    /// account for the larger per-pixel loss weight of small images.
    /// Densification stops halfway through the run.
    pub fn desk_scale(iterations: usize) -> Self {
        let mut cfg = TrainConfig {
            iterations,
            lr_position: 1e-3,
            lr_multipliers: LrMultipliers {
                scale: 31.25,
                rotor: 5.0,
                opacity: 312.5,
                color: 12.5,
                sh: 12.5,
            },
            densify_until: iterations / 2,
            ..TrainConfig::default()
        };
        cfg.control.grad_threshold = 3e-3;
        cfg
    }

    /// Sets the spatial extent (learning rates and the clone/split cutoff) and the temporal extent.
    pub fn with_extents(mut self, scene_extent: f64, time_extent: f64) -> Self {
        self.scene_extent = scene_extent;
        self.control.scene_extent = scene_extent;
        self.time_extent = time_extent;
        self
    }

    /// Iteration budget scaled linearly with the frame count (50k per 1200 frames).
    pub fn iterations_for_frames(frames: usize) -> usize {
        (50_000 * frames).div_ceil(1200)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_position", self.lr_position),
            ("scene_extent", self.scene_extent),
            ("time_extent", self.time_extent),
            ("grad_densify_threshold", self.control.grad_threshold),
            ("prune_opacity_threshold", self.control.prune_opacity),
            ("split_divisor", self.control.split_divisor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive and finite, got {v}")));
            }
        }
        let m = &self.lr_multipliers;
        if [m.scale, m.rotor, m.opacity, m.color, m.sh].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("lr_multipliers", "must be non-negative"));
        }
        if self.densify_interval == 0 || self.log_interval == 0 || self.ratio_check_interval == 0 {
            return Err(Error::invalid("interval", "intervals must be positive"));
        }
        self.loss.validate()?;
        self.render.validate()?;
        crate::appearance::AppearanceGate::new(self.g_th, self.lambda_h)?;
        Ok(())
    }
}
