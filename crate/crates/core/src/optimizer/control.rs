//! Adaptive density control: prune, clone and split.
//!
//! Only Gaussians with statistics gathered since the previous pass are
//! examined, so the cost of a pass is bounded by what training touched.

use std::collections::HashMap;

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::gaussians::{clamped_scale, rotation_4d, Gaussian4D};
use crate::hierarchy::{GaussianId, Hierarchy};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlConfig {
    /// Mean view-space positional gradient norm (NDC units) that triggers densification.
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    pub split_divisor: f64,
    /// Clone/split cutoff as a fraction of `scene_extent`.
    pub percent_dense: f64,
    pub scene_extent: f64,
    /// Clone displacement as a fraction of the parent's largest spatial scale.
    pub clone_nudge: f64,
    /// No densification once the population reaches this size.
    pub max_gaussians: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            grad_threshold: 2e-4,
            prune_opacity: 5e-3,
            split_divisor: 1.6,
            percent_dense: 0.01,
            scene_extent: 1.0,
            clone_nudge: 0.5,
            max_gaussians: usize::MAX,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradStat {
    pub view_grad_sum: f64,
    pub count: u32,
    /// Accumulated loss gradient of the spatial mean.
    pub position_grad: Vector3<f64>,
}

impl GradStat {
    pub fn mean_view_grad(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.view_grad_sum / self.count as f64
        }
    }
}

/// Per-Gaussian gradient statistics since the last control pass.
#[derive(Clone, Debug, Default)]
pub struct DensifyStats {
    entries: HashMap<GaussianId, GradStat>,
}

impl DensifyStats {
    pub fn record(&mut self, id: GaussianId, view_grad: f64, position_grad: Vector3<f64>) {
        let e = self.entries.entry(id).or_default();
        e.view_grad_sum += view_grad;
        e.count += 1;
        e.position_grad += position_grad;
    }

    pub fn get(&self, id: GaussianId) -> Option<&GradStat> {
        self.entries.get(&id)
    }

    pub fn remove(&mut self, id: GaussianId) {
        self.entries.remove(&id);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending id order.
    fn drain_sorted(&mut self) -> Vec<(GaussianId, GradStat)> {
        let mut v: Vec<_> = self.entries.drain().collect();
        v.sort_unstable_by_key(|(id, _)| *id);
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ControlReport {
    pub examined: usize,
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
    pub removed: Vec<GaussianId>,
    /// Each new Gaussian with the id of its parent.
    pub created: Vec<(GaussianId, GaussianId)>,
    /// Net change in the number of Gaussians with a nonzero residual.
    pub view_dependent_delta: i64,
}

/// Runs one control pass over the Gaussians in `stats` and clears them.
///
/// New Gaussians are filed by the hierarchy's own placement rule, so the
/// audit holds afterwards.
pub fn adaptive_control(
    h: &mut Hierarchy,
    stats: &mut DensifyStats,
    cfg: &ControlConfig,
    rng: &mut impl Rng,
) -> Result<ControlReport> {
    let mut report = ControlReport::default();
    let size_cutoff = cfg.percent_dense * cfg.scene_extent;
    for (id, stat) in stats.drain_sorted() {
        let Some(g) = h.get(id) else { continue };
        report.examined += 1;
        if g.opacity < cfg.prune_opacity {
            if !g.is_diffuse() {
                report.view_dependent_delta -= 1;
            }
            h.remove(id)?;
            report.pruned += 1;
            report.removed.push(id);
            continue;
        }
        if stat.mean_view_grad() < cfg.grad_threshold || h.len() >= cfg.max_gaussians {
            continue;
        }
        let g = g.clone();
        let vd = i64::from(!g.is_diffuse());
        if g.max_spatial_scale() > size_cutoff {
            let children = split(&g, cfg.split_divisor, rng);
            h.remove(id)?;
            report.removed.push(id);
            for c in children {
                let cid = h.insert(c)?;
                report.created.push((cid, id));
            }
            report.split += 1;
            report.view_dependent_delta += vd;
        } else {
            let c = clone_nudged(&g, &stat.position_grad, cfg.clone_nudge);
            let cid = h.insert(c)?;
            report.created.push((cid, id));
            report.cloned += 1;
            report.view_dependent_delta += vd;
        }
    }
    Ok(report)
}

/// Two children with positions drawn from the parent and shrunken scales.
pub fn split(g: &Gaussian4D, divisor: f64, rng: &mut impl Rng) -> [Gaussian4D; 2] {
    let r = rotation_4d(&g.rotor_left.normalize(), &g.rotor_right.normalize());
    let s = clamped_scale(&g.scale);
    let mut child = || {
        let z = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let mut c = g.clone();
        c.mu = g.mu + r * s.component_mul(&z);
        c.scale = g.scale / divisor;
        c
    };
    [child(), child()]
}

/// A copy moved against the accumulated position gradient.
pub fn clone_nudged(g: &Gaussian4D, position_grad: &Vector3<f64>, nudge: f64) -> Gaussian4D {
    let mut c = g.clone();
    let n = position_grad.norm();
    if n > 0.0 && n.is_finite() {
        let step = -position_grad / n * (nudge * g.max_spatial_scale());
        c.mu += Vector4::new(step.x, step.y, step.z, 0.0);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(x: f64, t: f64, scale: f64, opacity: f64) -> Gaussian4D {
        Gaussian4D::isotropic(Vector3::new(x, 0.0, 3.0), t, scale, 0.2, opacity, Vector3::repeat(0.5))
    }

    #[test]
    fn zero_opacity_is_pruned() {
        let mut h = Hierarchy::build(10.0, 10.0, 4).unwrap();
        let a = h.insert(gaussian(0.0, 1.0, 0.1, 0.0)).unwrap();
        let b = h.insert(gaussian(0.0, 1.0, 0.1, 0.5)).unwrap();
        let mut stats = DensifyStats::default();
        stats.record(a, 0.0, Vector3::zeros());
        stats.record(b, 0.0, Vector3::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = adaptive_control(&mut h, &mut stats, &ControlConfig::default(), &mut rng).unwrap();
        assert_eq!(r.pruned, 1);
        assert_eq!(r.removed, vec![a]);
        assert!(h.get(a).is_none() && h.get(b).is_some());
        assert!(stats.is_empty());
    }

    #[test]
    fn below_threshold_changes_nothing() {
        let mut h = Hierarchy::build(10.0, 10.0, 4).unwrap();
        let ids: Vec<_> = (0..5).map(|i| h.insert(gaussian(i as f64, 1.0, 0.1, 0.5)).unwrap()).collect();
        let mut stats = DensifyStats::default();
        for &id in &ids {
            stats.record(id, 1e-5, Vector3::new(1.0, 0.0, 0.0));
        }
        let before: Vec<_> = h.iter().map(|(i, g)| (i, g.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = adaptive_control(&mut h, &mut stats, &ControlConfig::default(), &mut rng).unwrap();
        assert_eq!((r.pruned, r.cloned, r.split), (0, 0, 0));
        let after: Vec<_> = h.iter().map(|(i, g)| (i, g.clone())).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn small_clones_large_splits() {
        let mut h = Hierarchy::build(10.0, 10.0, 4).unwrap();
        let small = h.insert(gaussian(0.0, 1.0, 0.001, 0.5)).unwrap();
        let mut big_g = gaussian(1.0, 5.0, 0.5, 0.5);
        big_g.sh_residual[4] = 0.3;
        let big = h.insert(big_g.clone()).unwrap();
        let mut stats = DensifyStats::default();
        stats.record(small, 1e-3, Vector3::new(2.0, 0.0, 0.0));
        stats.record(big, 1e-3, Vector3::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ControlConfig {
            scene_extent: 5.0,
            ..Default::default()
        };
        let r = adaptive_control(&mut h, &mut stats, &cfg, &mut rng).unwrap();
        assert_eq!((r.cloned, r.split), (1, 1));
        assert_eq!(r.view_dependent_delta, 1);
        assert_eq!(h.len(), 4);
        assert!(h.get(big).is_none());
        let clone = h.get(r.created[0].0).unwrap();
        assert!(clone.mu.x < 0.0);
        for &(cid, parent) in &r.created[1..] {
            assert_eq!(parent, big);
            let c = h.get(cid).unwrap();
            assert!((c.scale - big_g.scale / 1.6).norm() < 1e-15);
            assert_eq!(c.sh_residual, big_g.sh_residual);
        }
        h.audit().unwrap();
    }

    #[test]
    fn population_cap_stops_densification() {
        let mut h = Hierarchy::build(10.0, 10.0, 4).unwrap();
        let a = h.insert(gaussian(0.0, 1.0, 0.001, 0.5)).unwrap();
        let mut stats = DensifyStats::default();
        stats.record(a, 1.0, Vector3::x());
        let cfg = ControlConfig {
            max_gaussians: 1,
            ..Default::default()
        };
        let r = adaptive_control(&mut h, &mut stats, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.cloned, 0);
    }

    #[test]
    fn split_children_follow_parent_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = gaussian(0.0, 2.0, 1.0, 0.5);
        g.scale = Vector4::new(0.5, 0.2, 0.1, 0.3);
        let n = 20000;
        let mut sum = Vector4::zeros();
        let mut sq = Vector4::zeros();
        for _ in 0..n / 2 {
            for c in split(&g, 1.6, &mut rng) {
                let d = c.mu - g.mu;
                sum += d;
                sq += d.component_mul(&d);
            }
        }
        let mean = sum / n as f64;
        let var = sq / n as f64;
        for k in 0..4 {
            assert!(mean[k].abs() < 0.02);
            let expected = g.scale[k] * g.scale[k];
            assert!((var[k] - expected).abs() < 0.05 * expected + 1e-4, "axis {k}: {} vs {}", var[k], expected);
        }
    }

    #[test]
    fn audit_holds_after_random_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut h = Hierarchy::build(20.0, 10.0, 9).unwrap();
        for _ in 0..500 {
            let g = Gaussian4D::isotropic(
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0)),
                rng.random_range(0.0..20.0),
                rng.random_range(0.001..0.2),
                10f64.powf(rng.random_range(-2.5..0.5)),
                rng.random_range(0.0..0.02),
                Vector3::repeat(0.5),
            );
            h.insert(g).unwrap();
        }
        let cfg = ControlConfig {
            scene_extent: 3.0,
            ..Default::default()
        };
        for _ in 0..5 {
            let mut stats = DensifyStats::default();
            for id in h.ids().collect::<Vec<_>>() {
                if rng.random_bool(0.5) {
                    stats.record(id, rng.random_range(0.0..5e-4), Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
                }
            }
            adaptive_control(&mut h, &mut stats, &cfg, &mut rng).unwrap();
            h.audit().unwrap();
        }
    }
}
