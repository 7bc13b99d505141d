//! Source switching along an open path, and an exact verification harness
//! for the swap identity it implies.
//!
//! The setting is a merged pair of configurations: one layer lives on the
//! whole torus, the other on the complement of a frozen set; the merged
//! bridge/mark process carries per-point layer labels. `switch` flips both
//! trajectories along a distinguished open path, relabels the bridges the
//! path crosses and the marks it runs over, and toggles the path endpoints in
//! both source sets. `verify_switching` checks, by full enumeration of label
//! splittings and trajectories at a fixed merged configuration, that this map
//! leaves weighted sums of connectivity functionals invariant when the source
//! constraints are swapped.

use std::collections::HashSet;

use crate::connectivity::IntervalGraph;
use crate::model::Model;
use crate::sampler::{sample_configuration, Stream};
use crate::spacetime::{
    enumerate_compatible, merged_flips, ArcTrajectory, Bridge, MarkConfig, Region, SiteRegion,
    SiteTrajectory, SourceSet, SpaceTimePoint, TimeArc, Trajectory,
};
use crate::{Error, Result};

/// Default term budget for the exact verification harness.
pub const DEFAULT_VERIFY_BUDGET: u128 = 1 << 24;

/// Default cap on enumerated paths between two points.
pub const DEFAULT_PATH_CAP: usize = 1 << 14;

/// Label-free union of the two layers' bridges and marks.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedConfig {
    pub bridges: Vec<Bridge>,
    pub marks: Vec<SpaceTimePoint>,
}

impl MergedConfig {
    /// Draw from the doubled-intensity product measure: one layer on the full
    /// torus, one restricted to `c_complement`.
    pub fn sample(model: &Model, c_complement: &Region, stream: &mut Stream) -> Self {
        let full = Region::full(model.lattice.n_sites());
        let (b1, m1) = sample_configuration(model, &full, stream);
        let (b2, m2) = sample_configuration(model, c_complement, stream);
        let mut bridges = b1.flatten(model);
        bridges.extend(b2.flatten(model));
        let mut marks = Vec::new();
        for cfg in [&m1, &m2] {
            for (z, ts) in cfg.per_site.iter().enumerate() {
                marks.extend(ts.iter().map(|&t| SpaceTimePoint::new(t, z)));
            }
        }
        MergedConfig { bridges, marks }
    }

    pub fn bridge_inside(region: &Region, br: &Bridge) -> bool {
        region.contains(SpaceTimePoint::new(br.t, br.u))
            && region.contains(SpaceTimePoint::new(br.t, br.v))
    }

    /// Indices of bridges and marks restricted to a region (a bridge needs
    /// both endpoints inside).
    pub fn restricted_indices(&self, region: &Region) -> (Vec<usize>, Vec<usize>) {
        let bs = self
            .bridges
            .iter()
            .enumerate()
            .filter(|(_, br)| Self::bridge_inside(region, br))
            .map(|(i, _)| i)
            .collect();
        let ms = self
            .marks
            .iter()
            .enumerate()
            .filter(|(_, m)| region.contains(**m))
            .map(|(i, _)| i)
            .collect();
        (bs, ms)
    }
}

/// One step of a path: a circle stretch or a bridge crossing.
#[derive(Debug, Clone, PartialEq)]
pub enum PathStep {
    Traverse { site: usize, arc: TimeArc },
    Cross(Bridge),
}

/// A self-avoiding path between two space-time points, stored as its step
/// decomposition. Traversed arcs are undirected half-open intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTrace {
    pub x: SpaceTimePoint,
    pub y: SpaceTimePoint,
    pub steps: Vec<PathStep>,
}

impl PathTrace {
    pub fn traversed_arcs(&self) -> Vec<(usize, TimeArc)> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                PathStep::Traverse { site, arc } => Some((*site, *arc)),
                PathStep::Cross(_) => None,
            })
            .collect()
    }

    pub fn crossed_bridges(&self) -> Vec<Bridge> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                PathStep::Cross(br) => Some(*br),
                PathStep::Traverse { .. } => None,
            })
            .collect()
    }

    /// Whether the path runs over the point (traversed stretches, closed at
    /// their start junctions).
    pub fn runs_over(&self, p: SpaceTimePoint) -> bool {
        if p == self.x || p == self.y {
            return true;
        }
        self.steps.iter().any(|s| match s {
            PathStep::Traverse { site, arc } => *site == p.site && arc.offset_of(p.t).is_some(),
            PathStep::Cross(br) => {
                br.t == p.t && (br.u == p.site || br.v == p.site)
            }
        })
    }

    /// Open iff no traversed stretch strictly contains a mark at which both
    /// trajectories read `r`.
    pub fn is_open(&self, psi1: &Trajectory, psi2: &Trajectory, marks: &[SpaceTimePoint]) -> bool {
        for m in marks {
            let blocking =
                psi1.eval(*m) == Some(true) && psi2.eval(*m) == Some(true);
            if !blocking {
                continue;
            }
            for step in &self.steps {
                if let PathStep::Traverse { site, arc } = step {
                    if *site == m.site
                        && matches!(arc.offset_of(m.t), Some(o) if o > 0.0)
                    {
                        return false;
                    }
                }
            }
        }
        true
    }
}

fn arc_within(dom: &SiteRegion, arc: &TimeArc) -> bool {
    match dom {
        SiteRegion::Full => true,
        SiteRegion::Arcs(list) => list.iter().any(|a| {
            matches!(
                (a.offset_of(arc.start()), a.offset_of(arc.end())),
                (Some(o1), Some(o2)) if o1 < o2
            )
        }),
    }
}

fn arcs_disjoint(a: &TimeArc, b: &TimeArc) -> bool {
    !a.contains(b.start()) && !b.contains(a.start())
}

struct PathSearch<'a> {
    domain: &'a Region,
    usable: Vec<(usize, Bridge)>,
    y: SpaceTimePoint,
    cap: usize,
    visited: Vec<SpaceTimePoint>,
    arcs: Vec<(usize, TimeArc)>,
    used: HashSet<usize>,
    steps: Vec<PathStep>,
    out: Vec<PathTrace>,
    x: SpaceTimePoint,
}

impl PathSearch<'_> {
    fn point_free(&self, p: SpaceTimePoint) -> bool {
        !self.visited.contains(&p)
            && self.arcs.iter().all(|(site, a)| {
                *site != p.site || a.offset_of(p.t).map_or(true, |o| o == 0.0)
            })
    }

    fn traverse_ok(&self, site: usize, arc: &TimeArc, dest: SpaceTimePoint) -> bool {
        if !arc_within(self.domain.site(site), arc) {
            return false;
        }
        for (s, old) in &self.arcs {
            if *s == site && !arcs_disjoint(old, arc) {
                return false;
            }
        }
        for v in &self.visited {
            if v.site == site {
                if let Some(o) = arc.offset_of(v.t) {
                    if o > 0.0 {
                        return false;
                    }
                }
            }
        }
        if dest != self.y {
            if let Some(o) = arc.offset_of(self.y.t) {
                if self.y.site == site && o > 0.0 {
                    return false;
                }
            }
        }
        true
    }

    fn record(&mut self) -> Result<()> {
        if self.out.len() >= self.cap {
            return Err(Error::BudgetExceeded {
                required: self.cap as u128 + 1,
                budget: self.cap as u128,
            });
        }
        self.out.push(PathTrace {
            x: self.x,
            y: self.y,
            steps: self.steps.clone(),
        });
        Ok(())
    }

    fn dfs(&mut self, current: SpaceTimePoint, after_traverse: bool) -> Result<()> {
        if !after_traverse {
            let mut targets: Vec<SpaceTimePoint> = self
                .usable
                .iter()
                .flat_map(|(_, br)| {
                    [
                        SpaceTimePoint::new(br.t, br.u),
                        SpaceTimePoint::new(br.t, br.v),
                    ]
                })
                .chain([self.y])
                .filter(|&q| q.site == current.site && q != current && self.point_free(q))
                .collect();
            targets.sort_by(|p, q| p.t.total_cmp(&q.t));
            targets.dedup();
            for q in targets {
                for arc in [
                    TimeArc::new(current.t, q.t),
                    TimeArc::new(q.t, current.t),
                ] {
                    if !self.traverse_ok(current.site, &arc, q) {
                        continue;
                    }
                    self.steps.push(PathStep::Traverse {
                        site: current.site,
                        arc,
                    });
                    self.arcs.push((current.site, arc));
                    if q == self.y {
                        self.record()?;
                    } else {
                        self.visited.push(q);
                        self.dfs(q, true)?;
                        self.visited.pop();
                    }
                    self.arcs.pop();
                    self.steps.pop();
                }
            }
        }
        let crossings: Vec<(usize, Bridge, SpaceTimePoint)> = self
            .usable
            .iter()
            .filter(|(id, _)| !self.used.contains(id))
            .filter_map(|&(id, br)| {
                let pu = SpaceTimePoint::new(br.t, br.u);
                let pv = SpaceTimePoint::new(br.t, br.v);
                if current == pu {
                    Some((id, br, pv))
                } else if current == pv {
                    Some((id, br, pu))
                } else {
                    None
                }
            })
            .collect();
        for (id, br, other) in crossings {
            if !self.point_free(other) && other != self.y {
                continue;
            }
            self.steps.push(PathStep::Cross(br));
            self.used.insert(id);
            if other == self.y {
                self.record()?;
            } else {
                self.visited.push(other);
                self.dfs(other, false)?;
                self.visited.pop();
            }
            self.used.remove(&id);
            self.steps.pop();
        }
        Ok(())
    }
}

/// All self-avoiding paths from `x` to `y` over the bridge skeleton inside
/// `domain`, in a fixed deterministic order: at every junction, circle
/// stretches sorted by destination time (upward before downward) come before
/// bridge crossings sorted by bridge index.
pub fn enumerate_paths(
    bridges: &[Bridge],
    domain: &Region,
    x: SpaceTimePoint,
    y: SpaceTimePoint,
    cap: usize,
) -> Result<Vec<PathTrace>> {
    if x == y {
        return Err(Error::InvalidParameter(
            "path endpoints must differ".into(),
        ));
    }
    if !domain.contains(x) || !domain.contains(y) {
        return Err(Error::InvalidParameter(
            "path endpoints must lie in the search domain".into(),
        ));
    }
    let usable: Vec<(usize, Bridge)> = bridges
        .iter()
        .enumerate()
        .filter(|(_, br)| MergedConfig::bridge_inside(domain, br))
        .map(|(i, br)| (i, *br))
        .collect();
    let mut search = PathSearch {
        domain,
        usable,
        y,
        cap,
        visited: vec![x],
        arcs: Vec::new(),
        used: HashSet::new(),
        steps: Vec::new(),
        out: Vec::new(),
        x,
    };
    search.dfs(x, false)?;
    Ok(search.out)
}

/// A labeled pair of configurations with a distinguished open path.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchablePair {
    pub xi1: Vec<Bridge>,
    pub xi2: Vec<Bridge>,
    pub m1: Vec<SpaceTimePoint>,
    pub m2: Vec<SpaceTimePoint>,
    pub psi1: Trajectory,
    pub psi2: Trajectory,
    pub sources1: SourceSet,
    pub sources2: SourceSet,
    /// Domain of the second layer (complement of the frozen set).
    pub domain2: Region,
    pub path: PathTrace,
}

fn canonical_bridges(mut v: Vec<Bridge>) -> Vec<Bridge> {
    v.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.u.cmp(&b.u)).then(a.v.cmp(&b.v)));
    v
}

fn canonical_marks(mut v: Vec<SpaceTimePoint>) -> Vec<SpaceTimePoint> {
    v.sort_by(|a, b| a.site.cmp(&b.site).then(a.t.total_cmp(&b.t)));
    v
}

fn canonical_sources(s: &SourceSet) -> SourceSet {
    let mut pts: Vec<SpaceTimePoint> = s.points().to_vec();
    pts.sort_by(|a, b| a.site.cmp(&b.site).then(a.t.total_cmp(&b.t)));
    SourceSet::of(&pts)
}

impl SwitchablePair {
    /// Normalize orderings so structural equality is representation-free.
    pub fn canonical(mut self) -> Self {
        self.xi1 = canonical_bridges(self.xi1);
        self.xi2 = canonical_bridges(self.xi2);
        self.m1 = canonical_marks(self.m1);
        self.m2 = canonical_marks(self.m2);
        self.sources1 = canonical_sources(&self.sources1);
        self.sources2 = canonical_sources(&self.sources2);
        self
    }

    pub fn merged_marks(&self) -> Vec<SpaceTimePoint> {
        let mut all = self.m1.clone();
        all.extend(self.m2.iter().copied());
        all
    }

    pub fn merged_bridges(&self) -> Vec<Bridge> {
        let mut all = self.xi1.clone();
        all.extend(self.xi2.iter().copied());
        all
    }

    /// Both layers compatible and the path open.
    pub fn is_valid(&self) -> bool {
        let n = self.domain2.n_sites();
        let full = Region::full(n);
        layer_compatible(&self.psi1, &full, &self.xi1, &self.m1, &self.sources1)
            && layer_compatible(&self.psi2, &self.domain2, &self.xi2, &self.m2, &self.sources2)
            && self
                .path
                .is_open(&self.psi1, &self.psi2, &self.merged_marks())
    }
}

/// Check one layer against its data: flip times must be the parity-reduced
/// union of bridge endpoints and source times, and every mark must read `r`.
pub fn layer_compatible(
    traj: &Trajectory,
    region: &Region,
    bridges: &[Bridge],
    marks: &[SpaceTimePoint],
    sources: &SourceSet,
) -> bool {
    let n = region.n_sites();
    if traj.sites.len() != n {
        return false;
    }
    let mut site_bridge: Vec<Vec<f64>> = vec![Vec::new(); n];
    for br in bridges {
        site_bridge[br.u].push(br.t);
        site_bridge[br.v].push(br.t);
    }
    for z in 0..n {
        site_bridge[z].sort_by(|a, b| a.total_cmp(b));
        let expected = merged_flips(&site_bridge[z], &sources.times_at(z));
        if traj.sites[z].flip_times() != expected {
            return false;
        }
    }
    marks.iter().all(|m| traj.eval(*m) == Some(true))
}

fn toggle_time(v: &mut Vec<f64>, t: f64) {
    if let Some(i) = v.iter().position(|&u| u == t) {
        v.remove(i);
    } else {
        v.push(t);
    }
}

fn flip_site(traj: &SiteTrajectory, arcs: &[TimeArc]) -> Result<SiteTrajectory> {
    if arcs.is_empty() {
        return Ok(traj.clone());
    }
    let covered = |t: f64| arcs.iter().any(|a| a.contains(t));
    let mut boundaries: Vec<f64> = Vec::new();
    for a in arcs {
        toggle_time(&mut boundaries, a.start());
        toggle_time(&mut boundaries, a.end());
    }
    match traj {
        SiteTrajectory::Empty => Err(Error::InvalidParameter(
            "path traverses a site with empty domain".into(),
        )),
        SiteTrajectory::Circle { v0, flips } => {
            let mut nf = flips.clone();
            for &b in &boundaries {
                toggle_time(&mut nf, b);
            }
            nf.sort_by(|a, b| a.total_cmp(b));
            Ok(SiteTrajectory::Circle {
                v0: v0 ^ covered(0.0),
                flips: nf,
            })
        }
        SiteTrajectory::Arcs(list) => {
            let mut out = Vec::with_capacity(list.len());
            for at in list {
                if covered(at.arc.start()) {
                    return Err(Error::InvalidParameter(
                        "flip would change a domain-arc boundary value".into(),
                    ));
                }
                let mut nf = at.flips.clone();
                for &b in &boundaries {
                    match at.arc.offset_of(b) {
                        Some(o) if o > 0.0 => toggle_time(&mut nf, b),
                        Some(_) => {
                            return Err(Error::InvalidParameter(
                                "flip lands exactly on a domain-arc start".into(),
                            ))
                        }
                        None => {}
                    }
                }
                nf.sort_by(|a, b| a.total_cmp(b));
                debug_assert!(nf.len() % 2 == 0, "arc flip parity broken");
                out.push(ArcTrajectory {
                    arc: at.arc,
                    flips: nf,
                });
            }
            Ok(SiteTrajectory::Arcs(out))
        }
    }
}

fn flip_trajectory(traj: &Trajectory, per_site: &[Vec<TimeArc>]) -> Result<Trajectory> {
    let mut sites = Vec::with_capacity(traj.sites.len());
    for (z, st) in traj.sites.iter().enumerate() {
        sites.push(flip_site(st, &per_site[z])?);
    }
    Ok(Trajectory { sites })
}

/// Apply the switching map along the pair's path: flip both trajectories on
/// the traversed stretches, relabel crossed bridges and run-over marks, and
/// toggle the path endpoints in both source sets. Involutive.
pub fn switch(pair: &SwitchablePair) -> Result<SwitchablePair> {
    let all_marks = pair.merged_marks();
    if !pair.path.is_open(&pair.psi1, &pair.psi2, &all_marks) {
        return Err(Error::InvalidParameter(
            "switching path is not open".into(),
        ));
    }
    let n = pair.domain2.n_sites();
    let mut per_site: Vec<Vec<TimeArc>> = vec![Vec::new(); n];
    for (site, arc) in pair.path.traversed_arcs() {
        per_site[site].push(arc);
    }
    let psi1 = flip_trajectory(&pair.psi1, &per_site)?;
    let psi2 = flip_trajectory(&pair.psi2, &per_site)?;
    let crossed = pair.path.crossed_bridges();
    let is_crossed = |br: &Bridge| crossed.iter().any(|c| c == br);
    let mut xi1 = Vec::new();
    let mut xi2 = Vec::new();
    for br in &pair.xi1 {
        if is_crossed(br) {
            xi2.push(*br);
        } else {
            xi1.push(*br);
        }
    }
    for br in &pair.xi2 {
        if is_crossed(br) {
            xi1.push(*br);
        } else {
            xi2.push(*br);
        }
    }
    let on_path = |m: &SpaceTimePoint| {
        pair.path.traversed_arcs().iter().any(|(site, arc)| {
            *site == m.site && arc.offset_of(m.t).is_some()
        })
    };
    let mut m1 = Vec::new();
    let mut m2 = Vec::new();
    for m in &pair.m1 {
        if on_path(m) {
            m2.push(*m);
        } else {
            m1.push(*m);
        }
    }
    for m in &pair.m2 {
        if on_path(m) {
            m1.push(*m);
        } else {
            m2.push(*m);
        }
    }
    let mut sources1 = pair.sources1.clone();
    sources1.toggle(pair.path.x);
    sources1.toggle(pair.path.y);
    let mut sources2 = pair.sources2.clone();
    sources2.toggle(pair.path.x);
    sources2.toggle(pair.path.y);
    Ok(SwitchablePair {
        xi1,
        xi2,
        m1,
        m2,
        psi1,
        psi2,
        sources1,
        sources2,
        domain2: pair.domain2.clone(),
        path: pair.path.clone(),
    }
    .canonical())
}

/// Draw a random switchable pair: a merged configuration split uniformly at
/// random, one compatible trajectory per layer (the second constrained to
/// sources `{x, y}` inside `c_complement`), and the first open path between
/// the sources. Returns `None` when the draw has no compatible pair, no open
/// path, or exceeds the small enumeration caps that keep the draw cheap.
pub fn sample_switchable_pair(
    model: &Model,
    c_complement: &Region,
    stream: &mut Stream,
) -> Option<SwitchablePair> {
    let n = c_complement.n_sites();
    let merged = MergedConfig::sample(model, c_complement, stream);
    let (cb, cm) = merged.restricted_indices(c_complement);
    if cb.len() + cm.len() > 6 || merged.bridges.len() > 5 {
        return None;
    }
    let x = SpaceTimePoint::new(stream.uniform(), stream.range(n));
    let y = SpaceTimePoint::new(stream.uniform(), stream.range(n));
    if x == y || !c_complement.contains(x) || !c_complement.contains(y) {
        return None;
    }
    let n_splits = 1usize << (cb.len() + cm.len());
    let pick = stream.range(n_splits);
    let split = splittings(&merged, c_complement).nth(pick).unwrap();
    let flips1 = site_flips_of(&split.xi1, n);
    let m1cfg = mark_config_of(&split.m1, n);
    let ens1 = enumerate_compatible(&Region::full(n), &flips1, &m1cfg, &SourceSet::empty());
    let flips2 = site_flips_of(&split.xi2, n);
    let m2cfg = mark_config_of(&split.m2, n);
    let ens2 = enumerate_compatible(c_complement, &flips2, &m2cfg, &SourceSet::of(&[x, y]));
    if ens1.is_empty() || ens2.is_empty() {
        return None;
    }
    let k1 = stream.range(ens1.n_choices() as usize);
    let k2 = stream.range(ens2.n_choices() as usize);
    let psi1 = ens1.iter().nth(k1).unwrap();
    let psi2 = ens2.iter().nth(k2).unwrap();
    let paths = enumerate_paths(&merged.bridges, c_complement, x, y, DEFAULT_PATH_CAP).ok()?;
    let open = paths
        .into_iter()
        .find(|p| p.is_open(&psi1, &psi2, &merged.marks))?;
    Some(
        SwitchablePair {
            xi1: split.xi1,
            xi2: split.xi2,
            m1: split.m1,
            m2: split.m2,
            psi1,
            psi2,
            sources1: SourceSet::empty(),
            sources2: SourceSet::of(&[x, y]),
            domain2: c_complement.clone(),
            path: open,
        }
        .canonical(),
    )
}

fn site_flips_of(bridges: &[Bridge], n: usize) -> Vec<Vec<f64>> {
    let mut flips = vec![Vec::new(); n];
    for br in bridges {
        flips[br.u].push(br.t);
        flips[br.v].push(br.t);
    }
    for f in flips.iter_mut() {
        f.sort_by(|a, b| a.total_cmp(b));
    }
    flips
}

fn mark_config_of(marks: &[SpaceTimePoint], n: usize) -> MarkConfig {
    let mut per_site = vec![Vec::new(); n];
    for m in marks {
        per_site[m.site].push(m.t);
    }
    for v in per_site.iter_mut() {
        v.sort_by(|a, b| a.total_cmp(b));
    }
    MarkConfig { per_site }
}

fn blocking_of(
    marks: &[SpaceTimePoint],
    psi1: &Trajectory,
    psi2: &Trajectory,
    n: usize,
) -> Vec<Vec<f64>> {
    let mut blocking = vec![Vec::new(); n];
    for m in marks {
        if psi1.eval(*m) == Some(true) && psi2.eval(*m) == Some(true) {
            blocking[m.site].push(m.t);
        }
    }
    blocking
}

struct SplitIter<'a> {
    merged: &'a MergedConfig,
    c_bridges: Vec<usize>,
    c_marks: Vec<usize>,
    mask: u64,
    end: u64,
}

struct Split {
    xi1: Vec<Bridge>,
    xi2: Vec<Bridge>,
    m1: Vec<SpaceTimePoint>,
    m2: Vec<SpaceTimePoint>,
}

impl Iterator for SplitIter<'_> {
    type Item = Split;

    fn next(&mut self) -> Option<Split> {
        if self.mask >= self.end {
            return None;
        }
        let mask = self.mask;
        self.mask += 1;
        let nb = self.c_bridges.len();
        let mut xi2_ids = Vec::new();
        let mut m2_ids = Vec::new();
        for (bit, &id) in self.c_bridges.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                xi2_ids.push(id);
            }
        }
        for (bit, &id) in self.c_marks.iter().enumerate() {
            if mask >> (nb + bit) & 1 == 1 {
                m2_ids.push(id);
            }
        }
        let xi2: Vec<Bridge> = xi2_ids.iter().map(|&i| self.merged.bridges[i]).collect();
        let xi1: Vec<Bridge> = self
            .merged
            .bridges
            .iter()
            .enumerate()
            .filter(|(i, _)| !xi2_ids.contains(i))
            .map(|(_, b)| *b)
            .collect();
        let m2: Vec<SpaceTimePoint> = m2_ids.iter().map(|&i| self.merged.marks[i]).collect();
        let m1: Vec<SpaceTimePoint> = self
            .merged
            .marks
            .iter()
            .enumerate()
            .filter(|(i, _)| !m2_ids.contains(i))
            .map(|(_, m)| *m)
            .collect();
        Some(Split { xi1, xi2, m1, m2 })
    }
}

fn splittings<'a>(merged: &'a MergedConfig, c_complement: &Region) -> SplitIter<'a> {
    let (c_bridges, c_marks) = merged.restricted_indices(c_complement);
    let end = 1u64 << (c_bridges.len() + c_marks.len());
    SplitIter {
        merged,
        c_bridges,
        c_marks,
        mask: 0,
        end,
    }
}

fn switched_sum(
    merged: &MergedConfig,
    c_complement: &Region,
    a: &SourceSet,
    b: &SourceSet,
    x: SpaceTimePoint,
    y: SpaceTimePoint,
    f: &dyn Fn(&IntervalGraph) -> f64,
) -> f64 {
    let n = c_complement.n_sites();
    let full = Region::full(n);
    let (cb, cm) = merged.restricted_indices(c_complement);
    let weight = 0.5f64.powi((cb.len() + cm.len()) as i32);
    let mut total = 0.0;
    for split in splittings(merged, c_complement) {
        let flips1 = site_flips_of(&split.xi1, n);
        let m1cfg = mark_config_of(&split.m1, n);
        let ens1 = enumerate_compatible(&full, &flips1, &m1cfg, a);
        if ens1.is_empty() {
            continue;
        }
        let flips2 = site_flips_of(&split.xi2, n);
        let m2cfg = mark_config_of(&split.m2, n);
        let ens2 = enumerate_compatible(c_complement, &flips2, &m2cfg, b);
        for psi1 in ens1.iter() {
            for psi2 in ens2.iter() {
                let blocking = blocking_of(&merged.marks, &psi1, &psi2, n);
                let g_cc = IntervalGraph::from_parts(
                    c_complement.clone(),
                    merged.bridges.clone(),
                    blocking.clone(),
                );
                if !g_cc.connected(x, y) {
                    continue;
                }
                let g = IntervalGraph::from_parts(full.clone(), merged.bridges.clone(), blocking);
                total += f(&g);
            }
        }
    }
    total * weight
}

/// Exact check of the source-swap identity at one merged configuration:
/// the weighted sum of `f` over all splittings and compatible trajectory
/// pairs, gated by `x` and `y` being connected inside `c_complement`, is
/// invariant under toggling `{x, y}` in both source sets.
///
/// Returns `(lhs, rhs)`; the caller asserts their equality.
pub fn verify_switching(
    merged: &MergedConfig,
    c_complement: &Region,
    a: &SourceSet,
    b: &SourceSet,
    x: SpaceTimePoint,
    y: SpaceTimePoint,
    f: &dyn Fn(&IntervalGraph) -> f64,
    budget: u128,
) -> Result<(f64, f64)> {
    let n = c_complement.n_sites();
    for p in b.points() {
        if !c_complement.contains(*p) {
            return Err(Error::InvalidParameter(
                "second-layer sources must lie in the unfrozen region".into(),
            ));
        }
    }
    if !c_complement.contains(x) || !c_complement.contains(y) {
        return Err(Error::InvalidParameter(
            "query points must lie in the unfrozen region".into(),
        ));
    }
    let (cb, cm) = merged.restricted_indices(c_complement);
    let exponent = cb.len() + cm.len() + 2 * n;
    let required = if exponent >= 127 {
        u128::MAX
    } else {
        1u128 << exponent
    };
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    let lhs = switched_sum(merged, c_complement, a, b, x, y, f);
    let mut a2 = a.clone();
    a2.toggle(x);
    a2.toggle(y);
    let mut b2 = b.clone();
    b2.toggle(x);
    b2.toggle(y);
    let rhs = switched_sum(merged, c_complement, &a2, &b2, x, y, f);
    Ok((lhs, rhs))
}

/// Plain weighted count of compatible pairs (no connectivity gate), used to
/// cross-check that a source on the first layer forces the connection.
pub fn raw_sum(
    merged: &MergedConfig,
    c_complement: &Region,
    a: &SourceSet,
    b: &SourceSet,
) -> f64 {
    let n = c_complement.n_sites();
    let full = Region::full(n);
    let (cb, cm) = merged.restricted_indices(c_complement);
    let weight = 0.5f64.powi((cb.len() + cm.len()) as i32);
    let mut total = 0.0;
    for split in splittings(merged, c_complement) {
        let flips1 = site_flips_of(&split.xi1, n);
        let m1cfg = mark_config_of(&split.m1, n);
        let ens1 = enumerate_compatible(&full, &flips1, &m1cfg, a);
        if ens1.is_empty() {
            continue;
        }
        let flips2 = site_flips_of(&split.xi2, n);
        let m2cfg = mark_config_of(&split.m2, n);
        let ens2 = enumerate_compatible(c_complement, &flips2, &m2cfg, b);
        total += ens1.count() * ens2.count();
    }
    total * weight
}
