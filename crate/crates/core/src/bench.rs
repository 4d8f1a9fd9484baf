//! Working-set and query-latency measurements.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussians::Gaussian4D;
use crate::hierarchy::Hierarchy;
use crate::scene_io::temporal_scale_for_radius;

#[derive(Clone, Debug, PartialEq)]
pub struct WorkingSetStats {
    pub samples: usize,
    pub mean_segments: f64,
    pub mean_size: f64,
    pub min_size: usize,
    pub max_size: usize,
    pub std_size: f64,
    /// Mean wall time of one query plus member count, in seconds.
    pub mean_query_seconds: f64,
}

/// Samples `samples` uniform timestamps in `[0, T]`.
pub fn working_set_stats(h: &Hierarchy, samples: usize, seed: u64) -> Result<WorkingSetStats> {
    if samples == 0 {
        return Err(Error::invalid("samples", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = Vec::with_capacity(samples);
    let mut segments = 0usize;
    let mut seconds = 0.0;
    for _ in 0..samples {
        let t = rng.random_range(0.0..=h.duration());
        let start = Instant::now();
        let ws = h.query(t)?;
        let size = h.working_set_size(&ws);
        seconds += start.elapsed().as_secs_f64();
        segments += ws.segment_refs.len();
        sizes.push(size);
    }
    let n = samples as f64;
    let mean = sizes.iter().sum::<usize>() as f64 / n;
    let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(WorkingSetStats {
        samples,
        mean_segments: segments as f64 / n,
        mean_size: mean,
        min_size: sizes.iter().copied().min().unwrap_or(0),
        max_size: sizes.iter().copied().max().unwrap_or(0),
        std_size: var.sqrt(),
        mean_query_seconds: seconds / n,
    })
}

/// Parameters of a synthetic population with constant density in time.
#[derive(Clone, Debug, PartialEq)]
pub struct DensitySpec {
    pub root_length: f64,
    pub num_levels: usize,
    pub o_th: f64,
    /// Gaussians per second of video.
    pub per_second: f64,
    /// Influence radii are log-uniform in this range (seconds).
    pub min_radius: f64,
    pub max_radius: f64,
    pub seed: u64,
}

impl Default for DensitySpec {
    fn default() -> Self {
        DensitySpec {
            root_length: 10.0,
            num_levels: 9,
            o_th: 0.05,
            per_second: 50.0,
            min_radius: 0.005,
            max_radius: 0.5,
            seed: 0,
        }
    }
}

/// A hierarchy over `[0, duration]` whose temporal centers are uniform.
pub fn synthetic_hierarchy(duration: f64, spec: &DensitySpec) -> Result<Hierarchy> {
    if !(spec.min_radius > 0.0 && spec.min_radius <= spec.max_radius) {
        return Err(Error::invalid("min_radius", "require 0 < min_radius <= max_radius"));
    }
    let mut h = Hierarchy::with_threshold(duration, spec.root_length, spec.num_levels, spec.o_th)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = (spec.per_second * duration).round() as usize;
    let (lo, hi) = (spec.min_radius.ln(), spec.max_radius.ln());
    for _ in 0..count {
        let t = rng.random_range(0.0..=duration);
        let r = if hi > lo { rng.random_range(lo..hi).exp() } else { spec.min_radius };
        let p = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        h.insert(Gaussian4D::isotropic(
            p,
            t,
            0.05,
            temporal_scale_for_radius(r, spec.o_th),
            0.5,
            Vector3::repeat(0.5),
        ))?;
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub duration: f64,
    pub num_levels: usize,
    pub population: usize,
    pub stats: WorkingSetStats,
}

/// Working-set statistics across video durations at matched density.
pub fn duration_sweep(durations: &[f64], spec: &DensitySpec, samples: usize) -> Result<Vec<SweepRow>> {
    durations
        .iter()
        .map(|&d| {
            let h = synthetic_hierarchy(d, spec)?;
            Ok(SweepRow {
                duration: d,
                num_levels: spec.num_levels,
                population: h.len(),
                stats: working_set_stats(&h, samples, spec.seed)?,
            })
        })
        .collect()
}

/// Re-files every Gaussian of `h` into a hierarchy with `num_levels` levels.
pub fn rebuild_with_levels(h: &Hierarchy, num_levels: usize) -> Result<Hierarchy> {
    let mut out = Hierarchy::with_threshold(h.duration(), h.root_length(), num_levels, h.opacity_threshold())?;
    let mut ids: Vec<_> = h.ids().collect();
    ids.sort();
    for id in ids {
        out.insert(h.get(id).expect("listed id").clone())?;
    }
    Ok(out)
}

/// Working-set statistics of the same population under each level count.
pub fn level_sweep(h: &Hierarchy, levels: &[usize], samples: usize, seed: u64) -> Result<Vec<SweepRow>> {
    levels
        .iter()
        .map(|&l| {
            let rebuilt = rebuild_with_levels(h, l)?;
            Ok(SweepRow {
                duration: h.duration(),
                num_levels: l,
                population: rebuilt.len(),
                stats: working_set_stats(&rebuilt, samples, seed)?,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str =
    "duration,levels,population,samples,mean_segments,mean_working_set,min_working_set,max_working_set,std_working_set,mean_query_seconds";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let st = &r.stats;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{:e}",
            r.duration,
            r.num_levels,
            r.population,
            st.samples,
            st.mean_segments,
            st.mean_size,
            st.min_size,
            st.max_size,
            st.std_size,
            st.mean_query_seconds
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_count_one_segment_per_level() {
        let h = synthetic_hierarchy(20.0, &DensitySpec::default()).unwrap();
        let st = working_set_stats(&h, 200, 1).unwrap();
        assert_eq!(st.mean_segments, 10.0);
        assert!(st.min_size as f64 <= st.mean_size && st.mean_size <= st.max_size as f64);
        assert!(working_set_stats(&h, 0, 1).is_err());
    }

    #[test]
    fn working_set_brute_force_oracle() {
        let h = synthetic_hierarchy(15.0, &DensitySpec::default()).unwrap();
        for t in [0.0, 3.3, 7.5, 15.0] {
            let ws = h.query(t).unwrap();
            let brute = h
                .ids()
                .filter(|&id| ws.segment_refs.contains(&h.placement_of(id).unwrap()))
                .count();
            assert_eq!(h.working_set_size(&ws), brute);
        }
    }

    #[test]
    fn single_level_working_set_is_everything() {
        // The root segment covering t = 0 spans the whole video.
        let h = synthetic_hierarchy(5.0, &DensitySpec::default()).unwrap();
        let rows = level_sweep(&h, &[1, 3, 6, 9], 300, 2).unwrap();
        assert!(rows.iter().all(|r| r.population == h.len()));
        assert_eq!(rows[0].stats.mean_size, h.len() as f64);
        for w in rows.windows(2) {
            assert!(w[1].stats.mean_size <= w[0].stats.mean_size);
        }
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn density_is_matched() {
        let spec = DensitySpec::default();
        let rows = duration_sweep(&[40.0, 400.0], &spec, 500).unwrap();
        assert_eq!(rows[0].population, 2000);
        assert_eq!(rows[1].population, 20000);
    }
}
