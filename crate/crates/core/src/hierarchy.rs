//! The temporal hierarchy.
//!
//! Level `l` tiles time with half-open segments of length `s_l = S / 2^l`
//! starting at the staggered offset `-S / 2^(l+2)`, so that boundaries of
//! adjacent levels never coincide. A Gaussian is filed into the deepest
//! segment that contains its whole influence range; ranges that fit no bounded
//! segment go to a single global segment. At any timestamp exactly one segment
//! per level, plus the global one, can hold primitives that influence it.
//!
//! Access follows the usual reader/writer split: queries and audits take
//! `&self`, mutations take `&mut self`. Callers sharing a hierarchy across
//! threads wrap it in a `RwLock`; materialized working sets are owned snapshots.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::gaussians::{influence_range, validate_threshold, Gaussian4D, InfluenceRange};

/// Default temporal opacity threshold used for influence ranges.
pub const DEFAULT_OPACITY_THRESHOLD: f64 = 0.05;
pub const MAX_LEVELS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GaussianId(pub u64);

impl fmt::Display for GaussianId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Where a Gaussian lives; doubles as a segment reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placement {
    Level { level: usize, index: usize },
    Global,
}

impl Placement {
    pub fn level(&self) -> Option<usize> {
        match self {
            Placement::Level { level, .. } => Some(*level),
            Placement::Global => None,
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Level { level, index } => write!(f, "L{level}#{index}"),
            Placement::Global => write!(f, "global"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Segment {
    pub members: BTreeSet<GaussianId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub index: usize,
    pub seg_length: f64,
    pub offset: f64,
    pub segments: Vec<Segment>,
}

impl Level {
    fn new(index: usize, duration: f64, root_length: f64) -> Self {
        let seg_length = root_length / 2f64.powi(index as i32);
        let offset = -root_length / 2f64.powi(index as i32 + 2);
        // floor + 1 rather than ceil so that t = duration is always covered
        // by a half-open segment.
        let count = ((duration - offset) / seg_length).floor() as usize + 1;
        Level {
            index,
            seg_length,
            offset,
            segments: vec![Segment::default(); count],
        }
    }

    pub fn segment_start(&self, n: i64) -> f64 {
        self.offset + n as f64 * self.seg_length
    }

    pub fn segment_end(&self, n: i64) -> f64 {
        self.offset + (n + 1) as f64 * self.seg_length
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Index of the (possibly nonexistent) segment whose span holds `t`.
    ///
    /// The floor is corrected against the boundaries as computed by
    /// [`Level::segment_start`] so membership tests agree exactly.
    pub fn segment_index(&self, t: f64) -> i64 {
        let mut n = ((t - self.offset) / self.seg_length).floor() as i64;
        while self.segment_start(n) > t {
            n -= 1;
        }
        while self.segment_end(n) <= t {
            n += 1;
        }
        n
    }

    /// Index of the existing segment containing `[start, end]`, if any.
    pub fn containing_segment(&self, range: &InfluenceRange) -> Option<usize> {
        let n = self.segment_index(range.start);
        if n < 0 || n as usize >= self.segments.len() {
            return None;
        }
        (range.end <= self.segment_end(n)).then_some(n as usize)
    }
}

/// Segment references covering one timestamp: one per level plus global.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkingSet {
    pub t: f64,
    pub segment_refs: Vec<Placement>,
}

/// Member ids of a working set, ascending within each segment.
#[derive(Clone, Debug)]
pub struct MaterializedSet {
    pub t: f64,
    pub ids: Vec<GaussianId>,
    pub gaussians: Vec<Gaussian4D>,
}

impl MaterializedSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Levels, segments and segment membership, independent of parameter storage.
#[derive(Clone, Debug)]
pub struct TemporalIndex {
    duration: f64,
    root_length: f64,
    levels: Vec<Level>,
    global: Segment,
    placements: HashMap<GaussianId, Placement>,
}

impl TemporalIndex {
    pub fn new(duration: f64, root_length: f64, num_levels: usize) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::invalid("duration", format!("{duration} must be positive")));
        }
        if !(root_length > 0.0 && root_length.is_finite()) {
            return Err(Error::invalid("root_length", format!("{root_length} must be positive")));
        }
        if !(1..=MAX_LEVELS).contains(&num_levels) {
            return Err(Error::invalid(
                "num_levels",
                format!("{num_levels} not in 1..={MAX_LEVELS}"),
            ));
        }
        let levels = (0..num_levels)
            .map(|l| Level::new(l, duration, root_length))
            .collect();
        Ok(TemporalIndex {
            duration,
            root_length,
            levels,
            global: Segment::default(),
            placements: HashMap::new(),
        })
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn root_length(&self) -> f64 {
        self.root_length
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn global(&self) -> &Segment {
        &self.global
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn placement_of(&self, id: GaussianId) -> Option<Placement> {
        self.placements.get(&id).copied()
    }

    /// Deepest segment containing `range`, or global. Pure; O(L).
    pub fn locate(&self, range: &InfluenceRange) -> Placement {
        if !(range.start.is_finite() && range.end.is_finite()) || range.start > range.end {
            return Placement::Global;
        }
        for level in self.levels.iter().rev() {
            if let Some(index) = level.containing_segment(range) {
                return Placement::Level {
                    level: level.index,
                    index,
                };
            }
        }
        Placement::Global
    }

    pub fn segment(&self, placement: Placement) -> &Segment {
        match placement {
            Placement::Level { level, index } => &self.levels[level].segments[index],
            Placement::Global => &self.global,
        }
    }

    fn segment_mut(&mut self, placement: Placement) -> &mut Segment {
        match placement {
            Placement::Level { level, index } => &mut self.levels[level].segments[index],
            Placement::Global => &mut self.global,
        }
    }

    /// Time span of a segment; the global segment spans the whole real line.
    pub fn span(&self, placement: Placement) -> (f64, f64) {
        match placement {
            Placement::Level { level, index } => {
                let lv = &self.levels[level];
                (lv.segment_start(index as i64), lv.segment_end(index as i64))
            }
            Placement::Global => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Files `id` under the segment for `range`, moving it if already present.
    pub fn place(&mut self, id: GaussianId, range: &InfluenceRange) -> Placement {
        let placement = self.locate(range);
        self.move_to(id, placement);
        placement
    }

    pub(crate) fn move_to(&mut self, id: GaussianId, placement: Placement) -> Option<Placement> {
        let old = self.placements.insert(id, placement);
        if let Some(old) = old {
            if old == placement {
                return Some(old);
            }
            self.segment_mut(old).members.remove(&id);
        }
        self.segment_mut(placement).members.insert(id);
        old
    }

    pub fn remove(&mut self, id: GaussianId) -> Result<Placement> {
        let placement = self.placements.remove(&id).ok_or(Error::NotFound(id))?;
        self.segment_mut(placement).members.remove(&id);
        Ok(placement)
    }

    /// Segment references for timestamp `t`; no member is visited.
    pub fn query(&self, t: f64) -> Result<WorkingSet> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(Error::OutOfRange {
                t,
                duration: self.duration,
            });
        }
        let mut segment_refs = Vec::with_capacity(self.levels.len() + 1);
        for level in &self.levels {
            let index = level.segment_index(t);
            debug_assert!(index >= 0 && (index as usize) < level.len());
            segment_refs.push(Placement::Level {
                level: level.index,
                index: index as usize,
            });
        }
        segment_refs.push(Placement::Global);
        Ok(WorkingSet { t, segment_refs })
    }

    /// Like [`TemporalIndex::query`] with `t` clamped into `[0, duration]`.
    pub fn query_clamped(&self, t: f64) -> WorkingSet {
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, self.duration) };
        self.query(t).expect("clamped timestamp is in range")
    }

    pub fn members<'a>(&'a self, ws: &'a WorkingSet) -> impl Iterator<Item = GaussianId> + 'a {
        ws.segment_refs
            .iter()
            .flat_map(move |p| self.segment(*p).members.iter().copied())
    }

    pub fn working_set_size(&self, ws: &WorkingSet) -> usize {
        ws.segment_refs.iter().map(|p| self.segment(*p).members.len()).sum()
    }

    /// Every segment in storage order: levels root first, then global.
    pub fn segments(&self) -> impl Iterator<Item = (Placement, &Segment)> {
        self.levels
            .iter()
            .flat_map(|lv| {
                lv.segments.iter().enumerate().map(move |(index, seg)| {
                    (
                        Placement::Level {
                            level: lv.index,
                            index,
                        },
                        seg,
                    )
                })
            })
            .chain(std::iter::once((Placement::Global, &self.global)))
    }
}

/// Per-segment entry of an occupancy report.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentOccupancy {
    pub placement: Placement,
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy {
    pub per_level: Vec<usize>,
    pub global: usize,
    pub segments: Vec<SegmentOccupancy>,
}

impl Occupancy {
    pub fn total(&self) -> usize {
        self.per_level.iter().sum::<usize>() + self.global
    }

    /// CSV with header `level,segment_index,start,end,count`; global is level `global`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,segment_index,start,end,count\n");
        for s in &self.segments {
            match s.placement {
                Placement::Level { level, index } => {
                    out.push_str(&format!("{level},{index},{},{},{}\n", s.start, s.end, s.count))
                }
                Placement::Global => {
                    out.push_str(&format!("global,0,-inf,inf,{}\n", s.count));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Resident {
    gaussian: Gaussian4D,
    placement: Placement,
}

/// The temporal hierarchy together with the authoritative parameter store.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    index: TemporalIndex,
    o_th: f64,
    store: BTreeMap<GaussianId, Resident>,
    next_id: u64,
}

impl Hierarchy {
    /// An empty hierarchy over `[0, duration]` with the default opacity threshold.
    pub fn build(duration: f64, root_length: f64, num_levels: usize) -> Result<Self> {
        Self::with_threshold(duration, root_length, num_levels, DEFAULT_OPACITY_THRESHOLD)
    }

    pub fn with_threshold(duration: f64, root_length: f64, num_levels: usize, o_th: f64) -> Result<Self> {
        validate_threshold(o_th)?;
        Ok(Hierarchy {
            index: TemporalIndex::new(duration, root_length, num_levels)?,
            o_th,
            store: BTreeMap::new(),
            next_id: 0,
        })
    }

    /// An empty hierarchy with the same geometry and threshold.
    pub fn empty_like(&self) -> Self {
        Self::with_threshold(self.duration(), self.root_length(), self.num_levels(), self.o_th)
            .expect("geometry already validated")
    }

    pub fn index(&self) -> &TemporalIndex {
        &self.index
    }

    pub fn duration(&self) -> f64 {
        self.index.duration
    }

    pub fn root_length(&self) -> f64 {
        self.index.root_length
    }

    pub fn num_levels(&self) -> usize {
        self.index.num_levels()
    }

    pub fn opacity_threshold(&self) -> f64 {
        self.o_th
    }

    pub fn levels(&self) -> &[Level] {
        self.index.levels()
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn get(&self, id: GaussianId) -> Option<&Gaussian4D> {
        self.store.get(&id).map(|r| &r.gaussian)
    }

    pub fn placement_of(&self, id: GaussianId) -> Option<Placement> {
        self.store.get(&id).map(|r| r.placement)
    }

    /// All residents in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (GaussianId, &Gaussian4D)> {
        self.store.iter().map(|(id, r)| (*id, &r.gaussian))
    }

    pub fn ids(&self) -> impl Iterator<Item = GaussianId> + '_ {
        self.store.keys().copied()
    }

    pub fn influence_range_of(&self, g: &Gaussian4D) -> Result<InfluenceRange> {
        influence_range(g, self.o_th)
    }

    /// Placement a Gaussian would receive, without inserting it.
    pub fn locate(&self, g: &Gaussian4D) -> Result<Placement> {
        Ok(self.index.locate(&self.influence_range_of(g)?))
    }

    /// Stores `g` under a fresh id and files it into its segment.
    pub fn insert(&mut self, g: Gaussian4D) -> Result<GaussianId> {
        let range = self.influence_range_of(&g)?;
        let id = GaussianId(self.next_id);
        self.next_id += 1;
        let placement = self.index.place(id, &range);
        self.store.insert(id, Resident { gaussian: g, placement });
        Ok(id)
    }

    pub fn remove(&mut self, id: GaussianId) -> Result<Gaussian4D> {
        let resident = self.store.remove(&id).ok_or(Error::NotFound(id))?;
        self.index.remove(id)?;
        Ok(resident.gaussian)
    }

    /// Re-derives the level of `id` from its current parameters. O(L).
    ///
    /// Returns `(old, new)` placements; the id moves only when they differ.
    pub fn update_level(&mut self, id: GaussianId) -> Result<(Placement, Placement)> {
        let resident = self.store.get(&id).ok_or(Error::NotFound(id))?;
        let range = influence_range(&resident.gaussian, self.o_th)?;
        let old = resident.placement;
        let new = self.index.locate(&range);
        if new != old {
            self.index.move_to(id, new);
            self.store.get_mut(&id).expect("checked above").placement = new;
        }
        Ok((old, new))
    }

    /// Replaces the parameters of `id` and re-derives its placement.
    pub fn set_gaussian(&mut self, id: GaussianId, g: Gaussian4D) -> Result<(Placement, Placement)> {
        // Validate before mutating so a bad update leaves the old state intact.
        influence_range(&g, self.o_th)?;
        let resident = self.store.get_mut(&id).ok_or(Error::NotFound(id))?;
        resident.gaussian = g;
        self.update_level(id)
    }

    pub fn query(&self, t: f64) -> Result<WorkingSet> {
        self.index.query(t)
    }

    pub fn members<'a>(&'a self, ws: &'a WorkingSet) -> impl Iterator<Item = GaussianId> + 'a {
        self.index.members(ws)
    }

    pub fn working_set_size(&self, ws: &WorkingSet) -> usize {
        self.index.working_set_size(ws)
    }

    /// Copies the parameters of a working set into an owned snapshot.
    pub fn materialize(&self, ws: &WorkingSet) -> MaterializedSet {
        let mut ids = Vec::with_capacity(self.working_set_size(ws));
        let mut gaussians = Vec::with_capacity(ids.capacity());
        for id in self.index.members(ws) {
            ids.push(id);
            gaussians.push(self.store[&id].gaussian.clone());
        }
        MaterializedSet {
            t: ws.t,
            ids,
            gaussians,
        }
    }

    pub fn occupancy(&self) -> Occupancy {
        let mut per_level = vec![0; self.num_levels()];
        let mut segments = Vec::new();
        for (placement, seg) in self.index.segments() {
            let (start, end) = self.index.span(placement);
            match placement {
                Placement::Level { level, .. } => per_level[level] += seg.members.len(),
                Placement::Global => {}
            }
            segments.push(SegmentOccupancy {
                placement,
                start,
                end,
                count: seg.members.len(),
            });
        }
        Occupancy {
            per_level,
            global: self.index.global.members.len(),
            segments,
        }
    }

    /// Checks the partition, containment and minimality invariants.
    pub fn audit(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Audit(msg));
        let mut seen = 0usize;
        for (placement, seg) in self.index.segments() {
            for id in &seg.members {
                seen += 1;
                let Some(resident) = self.store.get(id) else {
                    return fail(format!("segment {placement} lists unknown id {id}"));
                };
                if resident.placement != placement {
                    return fail(format!(
                        "id {id} found in {placement} but recorded in {}",
                        resident.placement
                    ));
                }
            }
        }
        if seen != self.store.len() || self.index.placements.len() != self.store.len() {
            return fail(format!(
                "partition broken: {seen} memberships for {} residents",
                self.store.len()
            ));
        }
        for (id, resident) in &self.store {
            let range = influence_range(&resident.gaussian, self.o_th)?;
            let (start, end) = self.index.span(resident.placement);
            if !(start <= range.start && range.end <= end) {
                return fail(format!("id {id}: range not contained in {}", resident.placement));
            }
            let deeper_from = resident.placement.level().map_or(0, |l| l + 1);
            for level in &self.index.levels[deeper_from..] {
                if level.containing_segment(&range).is_some() {
                    return fail(format!(
                        "id {id}: level {} also contains its range (placed {})",
                        level.index, resident.placement
                    ));
                }
            }
        }
        Ok(())
    }
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn placement_is_deepest_containing_segment(
            duration in 1.0f64..200.0,
            levels in 1usize..12,
            u in 0.0f64..1.0,
            log_radius in -4.0f64..2.0,
        ) {
            let idx = TemporalIndex::new(duration, 10.0, levels).unwrap();
            let r = InfluenceRange::from_center(u * duration, 10f64.powf(log_radius));
            let p = idx.locate(&r);
            let (s, e) = idx.span(p);
            prop_assert!(s <= r.start && r.end <= e);
            if let Some(l) = p.level() {
                for deeper in &idx.levels()[l + 1..] {
                    prop_assert!(deeper.containing_segment(&r).is_none());
                }
            } else {
                for lv in idx.levels() {
                    prop_assert!(lv.containing_segment(&r).is_none());
                }
            }
        }

        #[test]
        fn query_covers_t_once_per_level(duration in 0.5f64..500.0, levels in 1usize..16, u in 0.0f64..=1.0) {
            let idx = TemporalIndex::new(duration, 10.0, levels).unwrap();
            let t = u * duration;
            let ws = idx.query(t).unwrap();
            prop_assert_eq!(ws.segment_refs.len(), levels + 1);
            prop_assert_eq!(*ws.segment_refs.last().unwrap(), Placement::Global);
            for (l, p) in ws.segment_refs[..levels].iter().enumerate() {
                prop_assert_eq!(p.level(), Some(l));
                let (s, e) = idx.span(*p);
                prop_assert!(s <= t && t < e);
            }
        }
    }
}
