//! Geometry on the unit time circle over the spatial lattice.
//!
//! A configuration consists of bridges (one Poisson process per bond, joining
//! the two endpoint circles at a common time) and marks (one Poisson process
//! per site). A spin trajectory assigns each site a piecewise-constant map
//! from its time domain to `{r, l}`; it must flip exactly at sources and
//! bridge endpoints and sit at `r` on every mark. Restricted domains are
//! unions of half-open arcs with a free boundary condition: the trajectory is
//! `r` at arc boundaries.
//!
//! `count_compatible` counts admissible trajectories site by site (0, 1, or 2
//! per site; the product over sites is the configuration weight entering
//! every estimator).

use crate::error::{Error, Result};
use crate::model::Model;

/// Wrap a time onto `[0, 1)`.
pub fn wrap_time(t: f64) -> f64 {
    let r = t.rem_euclid(1.0);
    if r == 1.0 {
        0.0
    } else {
        r
    }
}

/// A point of the space-time cylinder: time on the unit circle, site index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimePoint {
    pub t: f64,
    pub site: usize,
}

impl SpaceTimePoint {
    pub fn new(t: f64, site: usize) -> Self {
        Self {
            t: wrap_time(t),
            site,
        }
    }
}

/// Half-open arc `[start, end)` on the circle, wrapping through 0 when
/// `end <= start`. Endpoints are stored exactly so membership is decided by
/// direct comparison: arcs produced by splitting share boundary values and
/// partition the circle without floating-point gaps or overlaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeArc {
    start: f64,
    end: f64,
}

impl TimeArc {
    /// Arc between two endpoint times. Empty and full-circle arcs are not
    /// representable (a full circle is [`SiteRegion::Full`]).
    pub fn new(start: f64, end: f64) -> Self {
        let start = wrap_time(start);
        let end = wrap_time(end);
        assert!(start != end, "arc endpoints must differ");
        Self { start, end }
    }

    /// Arc of a given length starting at `start`.
    pub fn from_len(start: f64, len: f64) -> Self {
        assert!(len > 0.0 && len < 1.0, "arc length must be in (0,1)");
        let start = wrap_time(start);
        Self::new(start, start + len)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    fn wraps(&self) -> bool {
        self.end <= self.start
    }

    pub fn len(&self) -> f64 {
        if self.wraps() {
            1.0 - self.start + self.end
        } else {
            self.end - self.start
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        if self.wraps() {
            t >= self.start || t < self.end
        } else {
            t >= self.start && t < self.end
        }
    }

    /// Offset of `t` from the arc start, if `t` lies in the arc.
    pub fn offset_of(&self, t: f64) -> Option<f64> {
        self.contains(t).then(|| {
            if t >= self.start {
                t - self.start
            } else {
                t + 1.0 - self.start
            }
        })
    }
}

/// Domain of one site: the whole circle, or a disjoint union of arcs.
///
/// Arc lists are kept as constructed (sorted by start, pairwise disjoint);
/// adjacent arcs are never fused because the shared boundary point carries a
/// free boundary condition.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteRegion {
    Full,
    Arcs(Vec<TimeArc>),
}

impl SiteRegion {
    pub fn is_empty(&self) -> bool {
        matches!(self, SiteRegion::Arcs(a) if a.is_empty())
    }

    pub fn contains(&self, t: f64) -> bool {
        match self {
            SiteRegion::Full => true,
            SiteRegion::Arcs(arcs) => arcs.iter().any(|a| a.contains(t)),
        }
    }

    pub fn measure(&self) -> f64 {
        match self {
            SiteRegion::Full => 1.0,
            SiteRegion::Arcs(arcs) => arcs.iter().map(|a| a.len()).sum(),
        }
    }

    /// Linear sub-intervals of `[0,1)` covering the region (wrapping arcs are
    /// split at 0).
    pub fn linear_intervals(&self) -> Vec<(f64, f64)> {
        match self {
            SiteRegion::Full => vec![(0.0, 1.0)],
            SiteRegion::Arcs(arcs) => {
                let mut out = Vec::with_capacity(arcs.len() + 1);
                for a in arcs {
                    if a.wraps() {
                        out.push((a.start(), 1.0));
                        if a.end() > 0.0 {
                            out.push((0.0, a.end()));
                        }
                    } else {
                        out.push((a.start(), a.end()));
                    }
                }
                out.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
                out
            }
        }
    }

    fn from_sorted_arcs(mut arcs: Vec<TimeArc>) -> Self {
        arcs.sort_by(|a, b| a.start().partial_cmp(&b.start()).unwrap());
        SiteRegion::Arcs(arcs)
    }

    /// Complement within the circle. The complement of a full circle is
    /// empty; the complement of an arc union is the union of the gaps,
    /// sharing the exact endpoint values.
    pub fn complement(&self) -> SiteRegion {
        match self {
            SiteRegion::Full => SiteRegion::Arcs(Vec::new()),
            SiteRegion::Arcs(arcs) if arcs.is_empty() => SiteRegion::Full,
            SiteRegion::Arcs(arcs) => {
                let mut gaps = Vec::with_capacity(arcs.len());
                for (i, a) in arcs.iter().enumerate() {
                    let next = &arcs[(i + 1) % arcs.len()];
                    if a.end() != next.start() {
                        gaps.push(TimeArc::new(a.end(), next.start()));
                    }
                }
                SiteRegion::from_sorted_arcs(gaps)
            }
        }
    }

    /// Intersection of two site domains. Pieces meeting at 0 are re-fused
    /// into a single wrapping arc so that domain connectivity across the
    /// period boundary is preserved.
    pub fn intersect(&self, other: &SiteRegion) -> SiteRegion {
        match (self, other) {
            (SiteRegion::Full, x) => x.clone(),
            (x, SiteRegion::Full) => x.clone(),
            _ => {
                let a = self.linear_intervals();
                let b = other.linear_intervals();
                let mut pieces: Vec<(f64, f64)> = Vec::new();
                let (mut i, mut j) = (0, 0);
                while i < a.len() && j < b.len() {
                    let lo = a[i].0.max(b[j].0);
                    let hi = a[i].1.min(b[j].1);
                    if hi > lo {
                        pieces.push((lo, hi));
                    }
                    if a[i].1 <= b[j].1 {
                        i += 1;
                    } else {
                        j += 1;
                    }
                }
                let mut fused: Vec<(f64, f64)> = Vec::with_capacity(pieces.len());
                for p in pieces {
                    match fused.last_mut() {
                        Some(last) if last.1 == p.0 => last.1 = p.1,
                        _ => fused.push(p),
                    }
                }
                let pieces = fused;
                if pieces.len() == 1 && pieces[0] == (0.0, 1.0) {
                    return SiteRegion::Full;
                }
                let tail_at_one = pieces.iter().position(|p| p.1 == 1.0 && p.0 > 0.0);
                let head_at_zero = pieces.iter().position(|p| p.0 == 0.0 && p.1 < 1.0);
                let mut arcs = Vec::with_capacity(pieces.len());
                if let (Some(ti), Some(hi)) = (tail_at_one, head_at_zero) {
                    arcs.push(TimeArc::new(pieces[ti].0, pieces[hi].1));
                    for (k, p) in pieces.iter().enumerate() {
                        if k != ti && k != hi {
                            arcs.push(TimeArc::new(p.0, p.1));
                        }
                    }
                } else {
                    for p in &pieces {
                        let end = if p.1 == 1.0 { 0.0 } else { p.1 };
                        arcs.push(TimeArc::new(p.0, end));
                    }
                }
                SiteRegion::from_sorted_arcs(arcs)
            }
        }
    }
}

/// Per-site domains for restricted sampling and counting.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    sites: Vec<SiteRegion>,
}

impl Region {
    pub fn full(n_sites: usize) -> Self {
        Self {
            sites: vec![SiteRegion::Full; n_sites],
        }
    }

    pub fn empty(n_sites: usize) -> Self {
        Self {
            sites: vec![SiteRegion::Arcs(Vec::new()); n_sites],
        }
    }

    pub fn from_sites(sites: Vec<SiteRegion>) -> Self {
        Self { sites }
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn site(&self, z: usize) -> &SiteRegion {
        &self.sites[z]
    }

    pub fn set_site(&mut self, z: usize, r: SiteRegion) {
        self.sites[z] = r;
    }

    pub fn is_full(&self) -> bool {
        self.sites.iter().all(|s| matches!(s, SiteRegion::Full))
    }

    pub fn contains(&self, p: SpaceTimePoint) -> bool {
        self.sites[p.site].contains(p.t)
    }

    pub fn complement(&self) -> Region {
        Region {
            sites: self.sites.iter().map(|s| s.complement()).collect(),
        }
    }

    /// Intersection of the domains of two sites (wrapping pieces may be
    /// reported split at 0; only the measure and membership matter because
    /// the result is used as a Poisson support, not as a counting domain).
    pub fn intersect_sites(&self, u: usize, v: usize) -> SiteRegion {
        if matches!(self.sites[u], SiteRegion::Full) && matches!(self.sites[v], SiteRegion::Full) {
            return SiteRegion::Full;
        }
        let a = self.sites[u].linear_intervals();
        let b = self.sites[v].linear_intervals();
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if hi > lo {
                out.push(TimeArc::new(lo, hi));
            }
            if a[i].1 <= b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        SiteRegion::Arcs(out)
    }

    /// Per-site intersection of two regions.
    pub fn intersect(&self, other: &Region) -> Region {
        assert_eq!(self.n_sites(), other.n_sites(), "region size mismatch");
        Region {
            sites: self
                .sites
                .iter()
                .zip(&other.sites)
                .map(|(a, b)| a.intersect(b))
                .collect(),
        }
    }
}

/// A bridge joins the circles of two sites at a common time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bridge {
    pub u: usize,
    pub v: usize,
    pub t: f64,
}

/// Bridge times per bond, each list sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BridgeConfig {
    pub per_bond: Vec<Vec<f64>>,
}

impl BridgeConfig {
    pub fn empty(n_bonds: usize) -> Self {
        Self {
            per_bond: vec![Vec::new(); n_bonds],
        }
    }

    pub fn n_bridges(&self) -> usize {
        self.per_bond.iter().map(|v| v.len()).sum()
    }

    pub fn flatten(&self, model: &Model) -> Vec<Bridge> {
        let mut out = Vec::with_capacity(self.n_bridges());
        for (b, times) in self.per_bond.iter().enumerate() {
            let bond = model.bonds()[b];
            for &t in times {
                out.push(Bridge {
                    u: bond.u,
                    v: bond.v,
                    t,
                });
            }
        }
        out
    }

    /// Flip times each site inherits from bridges, sorted per site.
    pub fn site_flips(&self, model: &Model) -> Vec<Vec<f64>> {
        let mut per_site = vec![Vec::new(); model.lattice.n_sites()];
        for (b, times) in self.per_bond.iter().enumerate() {
            let bond = model.bonds()[b];
            for &t in times {
                per_site[bond.u].push(t);
                per_site[bond.v].push(t);
            }
        }
        for v in per_site.iter_mut() {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
        per_site
    }
}

/// Mark times per site, each list sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MarkConfig {
    pub per_site: Vec<Vec<f64>>,
}

impl MarkConfig {
    pub fn empty(n_sites: usize) -> Self {
        Self {
            per_site: vec![Vec::new(); n_sites],
        }
    }

    pub fn n_marks(&self) -> usize {
        self.per_site.iter().map(|v| v.len()).sum()
    }
}

/// Finite set of space-time sources, closed under symmetric difference: a
/// point toggled twice cancels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SourceSet {
    points: Vec<SpaceTimePoint>,
}

impl SourceSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Symmetric difference of the given points (duplicates cancel pairwise).
    pub fn of(points: &[SpaceTimePoint]) -> Self {
        let mut s = Self::default();
        for &p in points {
            s.toggle(p);
        }
        s
    }

    pub fn toggle(&mut self, p: SpaceTimePoint) {
        let p = SpaceTimePoint::new(p.t, p.site);
        if let Some(i) = self
            .points
            .iter()
            .position(|q| q.site == p.site && q.t == p.t)
        {
            self.points.remove(i);
        } else {
            self.points.push(p);
        }
    }

    pub fn symmetric_difference(&self, other: &SourceSet) -> SourceSet {
        let mut s = self.clone();
        for &p in &other.points {
            s.toggle(p);
        }
        s
    }

    pub fn points(&self) -> &[SpaceTimePoint] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn times_at(&self, site: usize) -> Vec<f64> {
        let mut ts: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.site == site)
            .map(|p| p.t)
            .collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts
    }
}

/// Merge two sorted flip-time lists, cancelling times of even multiplicity.
pub fn merged_flips(bridge_flips: &[f64], source_times: &[f64]) -> Vec<f64> {
    if source_times.is_empty() {
        return bridge_flips.to_vec();
    }
    let mut all: Vec<f64> = Vec::with_capacity(bridge_flips.len() + source_times.len());
    all.extend_from_slice(bridge_flips);
    all.extend_from_slice(source_times);
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = Vec::with_capacity(all.len());
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j] == all[i] {
            j += 1;
        }
        if (j - i) % 2 == 1 {
            out.push(all[i]);
        }
        i = j;
    }
    out
}

/// Admissible trajectory count for one site given its domain, merged flip
/// times, and mark times. At most 2 on a full circle (the two values at the
/// reference time), at most 1 on arcs (boundaries force `r`).
pub fn site_count(region: &SiteRegion, flips: &[f64], marks: &[f64]) -> u8 {
    match region {
        SiteRegion::Full => {
            if flips.len() % 2 == 1 {
                return 0;
            }
            // parity of flips in (0, m] decides the value at each mark
            let mut all_even = true;
            let mut all_odd = !marks.is_empty();
            for &m in marks {
                let n = flips.partition_point(|&f| f <= m) - flips.partition_point(|&f| f <= 0.0);
                if n % 2 == 0 {
                    all_odd = false;
                } else {
                    all_even = false;
                }
            }
            if marks.is_empty() {
                2
            } else {
                u8::from(all_even) + u8::from(all_odd)
            }
        }
        SiteRegion::Arcs(arcs) => {
            // every flip and mark must lie in some arc
            for &f in flips {
                if !arcs.iter().any(|a| a.contains(f)) {
                    return 0;
                }
            }
            for &m in marks {
                if !arcs.iter().any(|a| a.contains(m)) {
                    return 0;
                }
            }
            for arc in arcs {
                let mut offs: Vec<f64> = flips.iter().filter_map(|&f| arc.offset_of(f)).collect();
                offs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if offs.len() % 2 == 1 {
                    return 0;
                }
                for &m in marks {
                    if let Some(mo) = arc.offset_of(m) {
                        let n = offs.partition_point(|&o| o <= mo);
                        if n % 2 == 1 {
                            return 0;
                        }
                    }
                }
            }
            1
        }
    }
}

/// Per-site admissible trajectory counts; the total weight is the product.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinCountTable {
    pub per_site: Vec<u8>,
}

impl SpinCountTable {
    pub fn total(&self) -> f64 {
        let mut prod = 1.0;
        for &c in &self.per_site {
            if c == 0 {
                return 0.0;
            }
            prod *= c as f64;
        }
        prod
    }
}

/// Count admissible trajectories for every site.
///
/// `site_bridge_flips` are the per-site sorted bridge flip times (see
/// [`BridgeConfig::site_flips`]); source times are folded in with parity
/// cancellation.
pub fn count_compatible(
    region: &Region,
    site_bridge_flips: &[Vec<f64>],
    marks: &MarkConfig,
    sources: &SourceSet,
) -> SpinCountTable {
    let n = region.n_sites();
    let mut per_site = vec![0u8; n];
    for z in 0..n {
        let src = sources.times_at(z);
        let flips = merged_flips(&site_bridge_flips[z], &src);
        per_site[z] = site_count(region.site(z), &flips, &marks.per_site[z]);
    }
    SpinCountTable { per_site }
}

/// One site's trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteTrajectory {
    /// Site not in the domain.
    Empty,
    /// Full circle: `v0` is the value at time 0 (`true` = r), flips sorted.
    Circle { v0: bool, flips: Vec<f64> },
    /// Restricted arcs, each starting at `r` with its own flips (as offsets
    /// are implied by the arc).
    Arcs(Vec<ArcTrajectory>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcTrajectory {
    pub arc: TimeArc,
    pub flips: Vec<f64>,
}

impl SiteTrajectory {
    /// Value at a time (true = r); `None` outside the domain.
    pub fn eval(&self, t: f64) -> Option<bool> {
        match self {
            SiteTrajectory::Empty => None,
            SiteTrajectory::Circle { v0, flips } => {
                let n = flips.partition_point(|&f| f <= t) - flips.partition_point(|&f| f <= 0.0);
                Some(*v0 ^ (n % 2 == 1))
            }
            SiteTrajectory::Arcs(arcs) => {
                for at in arcs {
                    if let Some(off) = at.arc.offset_of(t) {
                        let n = at
                            .flips
                            .iter()
                            .filter(|&&f| at.arc.offset_of(f).map(|fo| fo <= off).unwrap_or(false))
                            .count();
                        return Some(n % 2 == 0);
                    }
                }
                None
            }
        }
    }

    pub fn flip_times(&self) -> Vec<f64> {
        match self {
            SiteTrajectory::Empty => Vec::new(),
            SiteTrajectory::Circle { flips, .. } => flips.clone(),
            SiteTrajectory::Arcs(arcs) => {
                let mut out: Vec<f64> = arcs.iter().flat_map(|a| a.flips.clone()).collect();
                out.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out
            }
        }
    }
}

/// Full spin trajectory, one component per site.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sites: Vec<SiteTrajectory>,
}

impl Trajectory {
    pub fn eval(&self, p: SpaceTimePoint) -> Option<bool> {
        self.sites[p.site].eval(p.t)
    }
}

/// All admissible trajectories of a configuration, stored as independent
/// per-site options; the total count is the product of the option counts.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub options: Vec<Vec<SiteTrajectory>>,
}

impl TrajectoryEnsemble {
    pub fn count(&self) -> f64 {
        let mut prod = 1.0;
        for opts in &self.options {
            if opts.is_empty() {
                return 0.0;
            }
            prod *= opts.len() as f64;
        }
        prod
    }

    pub fn is_empty(&self) -> bool {
        self.options.iter().any(|o| o.is_empty())
    }

    pub fn n_choices(&self) -> u128 {
        let mut n: u128 = 1;
        for opts in &self.options {
            n = n.saturating_mul(opts.len() as u128);
        }
        n
    }

    /// Iterate the cartesian product of per-site options.
    pub fn iter(&self) -> TrajectoryIter<'_> {
        TrajectoryIter {
            ensemble: self,
            idx: vec![0; self.options.len()],
            done: self.is_empty(),
        }
    }
}

pub struct TrajectoryIter<'a> {
    ensemble: &'a TrajectoryEnsemble,
    idx: Vec<usize>,
    done: bool,
}

impl Iterator for TrajectoryIter<'_> {
    type Item = Trajectory;

    fn next(&mut self) -> Option<Trajectory> {
        if self.done {
            return None;
        }
        let traj = Trajectory {
            sites: self
                .idx
                .iter()
                .enumerate()
                .map(|(z, &i)| self.ensemble.options[z][i].clone())
                .collect(),
        };
        // advance odometer
        let mut carried = true;
        for z in 0..self.idx.len() {
            if self.idx[z] + 1 < self.ensemble.options[z].len() {
                self.idx[z] += 1;
                carried = false;
                break;
            }
            self.idx[z] = 0;
        }
        if carried {
            self.done = true;
        }
        Some(traj)
    }
}

/// Enumerate the admissible trajectories site by site.
pub fn enumerate_compatible(
    region: &Region,
    site_bridge_flips: &[Vec<f64>],
    marks: &MarkConfig,
    sources: &SourceSet,
) -> TrajectoryEnsemble {
    let n = region.n_sites();
    let mut options = Vec::with_capacity(n);
    for z in 0..n {
        let src = sources.times_at(z);
        let flips = merged_flips(&site_bridge_flips[z], &src);
        let site_marks = &marks.per_site[z];
        let mut opts = Vec::new();
        match region.site(z) {
            SiteRegion::Full => {
                if flips.len() % 2 == 0 {
                    for v0 in [true, false] {
                        let traj = SiteTrajectory::Circle {
                            v0,
                            flips: flips.clone(),
                        };
                        if site_marks.iter().all(|&m| traj.eval(m) == Some(true)) {
                            opts.push(traj);
                        }
                    }
                }
            }
            SiteRegion::Arcs(arcs) => {
                if site_count(region.site(z), &flips, site_marks) == 1 {
                    let arc_trajs: Vec<ArcTrajectory> = arcs
                        .iter()
                        .map(|&arc| ArcTrajectory {
                            arc,
                            flips: flips.iter().copied().filter(|&f| arc.contains(f)).collect(),
                        })
                        .collect();
                    opts.push(SiteTrajectory::Arcs(arc_trajs));
                } else if arcs.is_empty() && flips.is_empty() && site_marks.is_empty() {
                    opts.push(SiteTrajectory::Empty);
                }
            }
        }
        options.push(opts);
    }
    TrajectoryEnsemble { options }
}

/// Detect exact time collisions across all bridge and mark lists; sampled
/// configurations with collisions are rejected and redrawn.
pub fn all_times_distinct(bridges: &BridgeConfig, marks: &MarkConfig) -> bool {
    let mut all: Vec<f64> = Vec::new();
    for v in &bridges.per_bond {
        all.extend_from_slice(v);
    }
    for v in &marks.per_site {
        all.extend_from_slice(v);
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.windows(2).all(|w| w[0] != w[1])
}

/// Merge two sorted time lists keeping provenance labels; exact ties are
/// collisions.
pub fn merge_labeled(a: &[f64], b: &[f64]) -> Result<Vec<(f64, u8)>> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for &t in a {
        out.push((t, 1u8));
    }
    for &t in b {
        out.push((t, 2u8));
    }
    out.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    if out.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Collision);
    }
    Ok(out)
}
