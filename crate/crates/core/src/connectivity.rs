//! Connectivity structure of a sampled pair of configurations.
//!
//! The circle of each site is cut into maximal open segments at the marks
//! where both trajectories sit in the `r` state; bridges whose endpoints land
//! in open segments join those segments into one graph. Every cluster,
//! double-connectivity, pivotality, backbone, and lace query reduces to this
//! segment graph.
//!
//! Double connectivity follows the bridge-disjoint reading: two points are
//! doubly connected when no single bridge removal disconnects them (points on
//! one segment are always doubly connected). Under this reading the
//! first-pivotal-bridge decomposition is an exact partition, which the tests
//! check by brute force; requiring the two witness paths to avoid shared
//! segment interiors breaks that partition (two bridges leaving a segment on
//! the same side of the start point give a configuration with no pivotal
//! bridge that the stricter reading still refuses to call doubly connected).

use std::collections::{HashMap, HashSet, VecDeque};

use crate::model::Model;
use crate::spacetime::{
    wrap_time, Bridge, BridgeConfig, MarkConfig, Region, SiteRegion, SpaceTimePoint, TimeArc,
    Trajectory,
};
use crate::{Error, Result};

/// Time extent of one open segment on a site circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Span {
    /// The whole circle, uncut.
    Whole,
    /// Half-open `[start, end)` in circle coordinates; `end <= start` wraps,
    /// and `start == end` is the full circle cut at that single time.
    Cut(f64, f64),
}

impl Span {
    pub fn contains(self, t: f64) -> bool {
        match self {
            Span::Whole => true,
            Span::Cut(s, e) => {
                if s < e {
                    t >= s && t < e
                } else {
                    t >= s || t < e
                }
            }
        }
    }

    pub fn len(self) -> f64 {
        match self {
            Span::Whole => 1.0,
            Span::Cut(s, e) => {
                if s < e {
                    e - s
                } else {
                    e - s + 1.0
                }
            }
        }
    }

    /// Offset of `t` from the span start (for `Whole`, from time 0).
    pub fn offset_of(self, t: f64) -> Option<f64> {
        match self {
            Span::Whole => Some(t),
            Span::Cut(s, _) => {
                if self.contains(t) {
                    Some(if t >= s { t - s } else { t + 1.0 - s })
                } else {
                    None
                }
            }
        }
    }

    fn as_arc(self) -> Option<TimeArc> {
        match self {
            Span::Whole => None,
            Span::Cut(s, e) => {
                if s == e {
                    None
                } else {
                    Some(TimeArc::new(s, e))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub site: usize,
    pub span: Span,
}

#[derive(Debug, Clone, Copy)]
struct GraphEdge {
    bridge: usize,
    seg_u: usize,
    seg_v: usize,
}

/// Segment graph of one sampled pair of configurations.
///
/// The graph owns the merged bridge list; derived graphs (a removed bridge, a
/// deleted point, a restricted domain) are full rebuilds that keep bridge ids
/// stable so cluster sets remain comparable.
#[derive(Debug, Clone)]
pub struct IntervalGraph {
    n_sites: usize,
    domain: Region,
    bridges: Vec<Bridge>,
    layer1_bridges: usize,
    blocking: Vec<Vec<f64>>,
    probe_marks: Vec<Vec<f64>>,
    dropped: HashSet<usize>,
    segments: Vec<Segment>,
    by_site: Vec<Vec<usize>>,
    edges: Vec<GraphEdge>,
    adj: Vec<Vec<(usize, usize)>>,
    comp: Vec<usize>,
}

/// Set of segments of one particular graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    members: Vec<bool>,
}

impl ClusterSet {
    pub fn count(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn contains_segment(&self, seg: usize) -> bool {
        self.members[seg]
    }

    pub fn contains_point(&self, g: &IntervalGraph, p: SpaceTimePoint) -> bool {
        g.locate(p).map(|s| self.members[s]).unwrap_or(false)
    }

    pub fn intersects(&self, other: &ClusterSet) -> bool {
        self.members
            .iter()
            .zip(&other.members)
            .any(|(&a, &b)| a && b)
    }
}

/// Pivotal bridge with the orientation pointing away from the start point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBridge {
    pub bridge: usize,
    pub u: SpaceTimePoint,
    pub v: SpaceTimePoint,
}

fn sorted_dedup(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

fn site_segments(site: usize, dom: &SiteRegion, cuts: &[f64]) -> Vec<Segment> {
    match dom {
        SiteRegion::Full => {
            if cuts.is_empty() {
                vec![Segment {
                    site,
                    span: Span::Whole,
                }]
            } else {
                (0..cuts.len())
                    .map(|i| Segment {
                        site,
                        span: Span::Cut(cuts[i], cuts[(i + 1) % cuts.len()]),
                    })
                    .collect()
            }
        }
        SiteRegion::Arcs(arcs) => {
            let mut out = Vec::new();
            for a in arcs {
                let mut offs: Vec<(f64, f64)> = cuts
                    .iter()
                    .filter_map(|&c| a.offset_of(c).map(|o| (o, c)))
                    .filter(|&(o, _)| o > 0.0)
                    .collect();
                offs.sort_by(|x, y| x.0.total_cmp(&y.0));
                let mut prev = a.start();
                for &(_, c) in &offs {
                    out.push(Segment {
                        site,
                        span: Span::Cut(prev, c),
                    });
                    prev = c;
                }
                out.push(Segment {
                    site,
                    span: Span::Cut(prev, a.end()),
                });
            }
            out
        }
    }
}

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

impl IntervalGraph {
    fn assemble(
        domain: Region,
        bridges: Vec<Bridge>,
        layer1_bridges: usize,
        blocking: Vec<Vec<f64>>,
        probe_marks: Vec<Vec<f64>>,
        dropped: HashSet<usize>,
    ) -> Self {
        let n_sites = domain.n_sites();
        assert_eq!(blocking.len(), n_sites, "blocking list per site");
        for b in &bridges {
            assert!(b.u < n_sites && b.v < n_sites, "bridge site out of range");
        }
        let blocking: Vec<Vec<f64>> = blocking.into_iter().map(sorted_dedup).collect();
        let mut segments = Vec::new();
        let mut by_site = vec![Vec::new(); n_sites];
        for z in 0..n_sites {
            for seg in site_segments(z, domain.site(z), &blocking[z]) {
                by_site[z].push(segments.len());
                segments.push(seg);
            }
        }
        let locate = |p: SpaceTimePoint| -> Option<usize> {
            by_site[p.site]
                .iter()
                .copied()
                .find(|&s| segments[s].span.contains(p.t))
        };
        let mut edges = Vec::new();
        let mut adj = vec![Vec::new(); segments.len()];
        let mut dsu = Dsu::new(segments.len());
        for (id, br) in bridges.iter().enumerate() {
            if dropped.contains(&id) {
                continue;
            }
            let su = locate(SpaceTimePoint::new(br.t, br.u));
            let sv = locate(SpaceTimePoint::new(br.t, br.v));
            if let (Some(su), Some(sv)) = (su, sv) {
                let e = edges.len();
                edges.push(GraphEdge {
                    bridge: id,
                    seg_u: su,
                    seg_v: sv,
                });
                adj[su].push((e, sv));
                adj[sv].push((e, su));
                dsu.union(su, sv);
            }
        }
        let comp = (0..segments.len()).map(|s| dsu.find(s)).collect();
        IntervalGraph {
            n_sites,
            domain,
            bridges,
            layer1_bridges,
            blocking,
            probe_marks,
            dropped,
            segments,
            by_site,
            edges,
            adj,
            comp,
        }
    }

    /// Graph from raw parts; every mark in `blocking` cuts its circle.
    pub fn from_parts(domain: Region, bridges: Vec<Bridge>, blocking: Vec<Vec<f64>>) -> Self {
        let probe_marks = blocking.clone();
        let n1 = bridges.len();
        Self::assemble(domain, bridges, n1, blocking, probe_marks, HashSet::new())
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, s: usize) -> &Segment {
        &self.segments[s]
    }

    pub fn bridges(&self) -> &[Bridge] {
        &self.bridges
    }

    /// Number of leading bridge ids that came from the first configuration.
    pub fn layer1_bridges(&self) -> usize {
        self.layer1_bridges
    }

    pub fn domain(&self) -> &Region {
        &self.domain
    }

    pub fn bridge_is_active(&self, id: usize) -> bool {
        self.edges.iter().any(|e| e.bridge == id)
    }

    pub fn locate(&self, p: SpaceTimePoint) -> Option<usize> {
        self.by_site[p.site]
            .iter()
            .copied()
            .find(|&s| self.segments[s].span.contains(p.t))
    }

    /// Rebuild with one bridge removed.
    pub fn without_bridge(&self, id: usize) -> Self {
        let mut dropped = self.dropped.clone();
        dropped.insert(id);
        Self::assemble(
            self.domain.clone(),
            self.bridges.clone(),
            self.layer1_bridges,
            self.blocking.clone(),
            self.probe_marks.clone(),
            dropped,
        )
    }

    /// Rebuild with one space-time point deleted: the point cuts its circle
    /// and any bridge attached exactly there goes away.
    pub fn with_point_deleted(&self, v: SpaceTimePoint) -> Self {
        let mut blocking = self.blocking.clone();
        blocking[v.site].push(v.t);
        let mut dropped = self.dropped.clone();
        for (id, br) in self.bridges.iter().enumerate() {
            if br.t == v.t && (br.u == v.site || br.v == v.site) {
                dropped.insert(id);
            }
        }
        Self::assemble(
            self.domain.clone(),
            self.bridges.clone(),
            self.layer1_bridges,
            blocking,
            self.probe_marks.clone(),
            dropped,
        )
    }

    /// Rebuild on the intersection of the current domain with `within`.
    pub fn restricted(&self, within: &Region) -> Self {
        Self::assemble(
            self.domain.intersect(within),
            self.bridges.clone(),
            self.layer1_bridges,
            self.blocking.clone(),
            self.probe_marks.clone(),
            self.dropped.clone(),
        )
    }

    /// Same component, or identical points.
    pub fn connected(&self, a: SpaceTimePoint, b: SpaceTimePoint) -> bool {
        if a == b {
            return true;
        }
        match (self.locate(a), self.locate(b)) {
            (Some(sa), Some(sb)) => self.comp[sa] == self.comp[sb],
            _ => false,
        }
    }

    pub fn connected_within(&self, a: SpaceTimePoint, b: SpaceTimePoint, within: &Region) -> bool {
        if a == b {
            return true;
        }
        self.restricted(within).connected(a, b)
    }

    fn bfs(&self, start: usize, skip_bridge: Option<usize>, excl: Option<&ClusterSet>) -> Vec<bool> {
        let mut seen = vec![false; self.segments.len()];
        if excl.map(|c| c.members[start]).unwrap_or(false) {
            return seen;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            for &(e, t) in &self.adj[s] {
                if Some(self.edges[e].bridge) == skip_bridge {
                    continue;
                }
                if seen[t] || excl.map(|c| c.members[t]).unwrap_or(false) {
                    continue;
                }
                seen[t] = true;
                queue.push_back(t);
            }
        }
        seen
    }

    /// Component of `a` as a segment set.
    pub fn cluster(&self, a: SpaceTimePoint) -> ClusterSet {
        let members = match self.locate(a) {
            Some(sa) => self.bfs(sa, None, None),
            None => vec![false; self.segments.len()],
        };
        ClusterSet { members }
    }

    /// Component of `a` with one bridge removed, on the same segment ids.
    pub fn cluster_off_bridge(&self, id: usize, a: SpaceTimePoint) -> ClusterSet {
        let members = match self.locate(a) {
            Some(sa) => self.bfs(sa, Some(id), None),
            None => vec![false; self.segments.len()],
        };
        ClusterSet { members }
    }

    pub fn connected_off_bridge(&self, id: usize, a: SpaceTimePoint, b: SpaceTimePoint) -> bool {
        if a == b {
            return true;
        }
        match (self.locate(a), self.locate(b)) {
            (Some(sa), Some(sb)) => self.bfs(sa, Some(id), None)[sb],
            _ => false,
        }
    }

    /// Connectivity inside the complement of a segment set.
    pub fn connected_in_complement(
        &self,
        excl: &ClusterSet,
        a: SpaceTimePoint,
        b: SpaceTimePoint,
    ) -> bool {
        if a == b {
            return true;
        }
        match (self.locate(a), self.locate(b)) {
            (Some(sa), Some(sb)) => {
                if excl.members[sa] || excl.members[sb] {
                    false
                } else {
                    self.bfs(sa, None, Some(excl))[sb]
                }
            }
            _ => false,
        }
    }

    fn doubly_connected_skip(
        &self,
        skip: Option<usize>,
        a: SpaceTimePoint,
        b: SpaceTimePoint,
    ) -> bool {
        if a == b {
            return true;
        }
        let (sa, sb) = match (self.locate(a), self.locate(b)) {
            (Some(sa), Some(sb)) => (sa, sb),
            _ => return false,
        };
        if !self.bfs(sa, skip, None)[sb] {
            return false;
        }
        if sa == sb {
            return true;
        }
        let mut candidates: HashSet<usize> = self.edges.iter().map(|e| e.bridge).collect();
        if let Some(id) = skip {
            candidates.remove(&id);
        }
        candidates.into_iter().all(|c| {
            let mut seen = vec![false; self.segments.len()];
            seen[sa] = true;
            let mut queue = VecDeque::from([sa]);
            while let Some(s) = queue.pop_front() {
                for &(e, t) in &self.adj[s] {
                    let bid = self.edges[e].bridge;
                    if Some(bid) == skip || bid == c || seen[t] {
                        continue;
                    }
                    seen[t] = true;
                    queue.push_back(t);
                }
            }
            seen[sb]
        })
    }

    /// No single bridge removal disconnects `a` from `b`.
    pub fn doubly_connected(&self, a: SpaceTimePoint, b: SpaceTimePoint) -> bool {
        self.doubly_connected_skip(None, a, b)
    }

    /// Double connectivity in the configuration with bridge `id` removed.
    pub fn doubly_connected_off_bridge(
        &self,
        id: usize,
        a: SpaceTimePoint,
        b: SpaceTimePoint,
    ) -> bool {
        self.doubly_connected_skip(Some(id), a, b)
    }

    /// Oriented pivotal bridges ordered along the connection from `a`.
    pub fn pivotal_bridges(&self, a: SpaceTimePoint, b: SpaceTimePoint) -> Vec<OrientedBridge> {
        let mut found: Vec<(usize, OrientedBridge)> = Vec::new();
        let mut seen_ids = HashSet::new();
        for e in &self.edges {
            if !seen_ids.insert(e.bridge) {
                continue;
            }
            let br = self.bridges[e.bridge];
            let pu = SpaceTimePoint::new(br.t, br.u);
            let pv = SpaceTimePoint::new(br.t, br.v);
            for (u, v) in [(pu, pv), (pv, pu)] {
                if !self.connected_off_bridge(e.bridge, a, u) {
                    continue;
                }
                let side = self.cluster_off_bridge(e.bridge, a);
                if self.connected_in_complement(&side, v, b) {
                    found.push((
                        side.count(),
                        OrientedBridge {
                            bridge: e.bridge,
                            u,
                            v,
                        },
                    ));
                    break;
                }
            }
        }
        found.sort_by_key(|&(size, ob)| (size, ob.bridge));
        found.into_iter().map(|(_, ob)| ob).collect()
    }

    fn segment_feature_offsets(&self, seg: usize, extra: &[SpaceTimePoint]) -> Vec<f64> {
        let segment = self.segments[seg];
        let mut offs = Vec::new();
        for e in &self.edges {
            let br = self.bridges[e.bridge];
            if e.seg_u == seg {
                if let Some(o) = segment.span.offset_of(br.t) {
                    if br.u == segment.site {
                        offs.push(o);
                    }
                }
            }
            if e.seg_v == seg {
                if let Some(o) = segment.span.offset_of(br.t) {
                    if br.v == segment.site {
                        offs.push(o);
                    }
                }
            }
        }
        for p in extra {
            if p.site == segment.site {
                if let Some(o) = segment.span.offset_of(p.t) {
                    offs.push(o);
                }
            }
        }
        sorted_dedup(offs)
    }

    /// Points whose deletion separates `a` from `b`.
    ///
    /// Only finitely many deletions can matter: mark locations, bridge
    /// endpoints, segment boundaries, and one interior probe per stretch
    /// between consecutive attachment points on a segment.
    pub fn pivotal_vertices(&self, a: SpaceTimePoint, b: SpaceTimePoint) -> Vec<SpaceTimePoint> {
        if a == b {
            return Vec::new();
        }
        let mut candidates: Vec<SpaceTimePoint> = Vec::new();
        for (z, marks) in self.probe_marks.iter().enumerate() {
            candidates.extend(marks.iter().map(|&t| SpaceTimePoint::new(t, z)));
        }
        let mut seen_ids = HashSet::new();
        for e in &self.edges {
            if seen_ids.insert(e.bridge) {
                let br = self.bridges[e.bridge];
                candidates.push(SpaceTimePoint::new(br.t, br.u));
                candidates.push(SpaceTimePoint::new(br.t, br.v));
            }
        }
        for (s, seg) in self.segments.iter().enumerate() {
            if let Span::Cut(start, _) = seg.span {
                candidates.push(SpaceTimePoint::new(start, seg.site));
            }
            let feats = self.segment_feature_offsets(s, &[a, b]);
            let len = seg.span.len();
            let base = match seg.span {
                Span::Whole => 0.0,
                Span::Cut(start, _) => start,
            };
            match seg.span {
                Span::Whole => {
                    for i in 0..feats.len() {
                        let cur = feats[i];
                        let next = if i + 1 < feats.len() {
                            feats[i + 1]
                        } else {
                            feats[0] + 1.0
                        };
                        if next > cur {
                            candidates
                                .push(SpaceTimePoint::new(wrap_time((cur + next) / 2.0), seg.site));
                        }
                    }
                }
                Span::Cut(..) => {
                    let mut pts = vec![0.0];
                    pts.extend(&feats);
                    pts.push(len);
                    for w in pts.windows(2) {
                        if w[1] > w[0] {
                            candidates.push(SpaceTimePoint::new(
                                wrap_time(base + (w[0] + w[1]) / 2.0),
                                seg.site,
                            ));
                        }
                    }
                }
            }
        }
        candidates.retain(|&p| p != a && p != b && self.locate(p).is_some());
        candidates.sort_by(|p, q| p.site.cmp(&q.site).then(p.t.total_cmp(&q.t)));
        candidates.dedup();
        let mut out = Vec::new();
        for v in candidates {
            let gv = self.with_point_deleted(v);
            let ca = gv.cluster(a);
            let cb = gv.cluster(b);
            if !ca.intersects(&cb) {
                out.push(v);
            }
        }
        out
    }

    /// Region covered by the complement of a cluster, with touching arcs
    /// fused across former cut points.
    pub fn cluster_complement_region(&self, cl: &ClusterSet) -> Region {
        let mut region = Region::empty(self.n_sites);
        for z in 0..self.n_sites {
            let in_cluster = self.by_site[z].iter().any(|&s| cl.members[s]);
            if !in_cluster {
                region.set_site(z, self.domain.site(z).clone());
                continue;
            }
            let mut arcs: Vec<TimeArc> = self.by_site[z]
                .iter()
                .filter(|&&s| !cl.members[s])
                .filter_map(|&s| self.segments[s].span.as_arc())
                .collect();
            arcs.sort_by(|a, b| a.start().total_cmp(&b.start()));
            let mut fused: Vec<TimeArc> = Vec::with_capacity(arcs.len());
            for a in arcs {
                match fused.last_mut() {
                    Some(last) if last.end() == a.start() => {
                        *last = TimeArc::new(last.start(), a.end());
                    }
                    _ => fused.push(a),
                }
            }
            if fused.len() >= 2 {
                let first = fused[0];
                let last = *fused.last().unwrap();
                if last.end() == first.start() {
                    fused[0] = TimeArc::new(last.start(), first.end());
                    fused.pop();
                }
            }
            region.set_site(z, SiteRegion::Arcs(fused));
        }
        region
    }

    /// Labeled edge list for golden tests.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        for (i, seg) in self.segments.iter().enumerate() {
            let span = match seg.span {
                Span::Whole => "whole".to_string(),
                Span::Cut(s, e) => format!("[{s:.12},{e:.12})"),
            };
            out.push_str(&format!(
                "segment {i} site {} span {span} comp {}\n",
                seg.site, self.comp[i]
            ));
        }
        for e in &self.edges {
            let br = self.bridges[e.bridge];
            out.push_str(&format!(
                "edge bridge {} t {:.12} sites ({},{}) segs ({},{})\n",
                e.bridge, br.t, br.u, br.v, e.seg_u, e.seg_v
            ));
        }
        out
    }
}

/// Build the segment graph of a merged pair of configurations: a mark blocks
/// exactly where both trajectories read `r`.
pub fn build_graph(
    model: &Model,
    xi1: &BridgeConfig,
    psi1: &Trajectory,
    xi2: &BridgeConfig,
    psi2: &Trajectory,
    marks: &MarkConfig,
    region: &Region,
) -> IntervalGraph {
    let n_sites = region.n_sites();
    let mut bridges = xi1.flatten(model);
    let layer1 = bridges.len();
    bridges.extend(xi2.flatten(model));
    let mut blocking = vec![Vec::new(); n_sites];
    let mut probe_marks = vec![Vec::new(); n_sites];
    for (z, times) in marks.per_site.iter().enumerate() {
        for &t in times {
            probe_marks[z].push(t);
            let p = SpaceTimePoint::new(t, z);
            if psi1.eval(p) == Some(true) && psi2.eval(p) == Some(true) {
                blocking[z].push(t);
            }
        }
    }
    IntervalGraph::assemble(
        region.clone(),
        bridges,
        layer1,
        blocking,
        probe_marks,
        HashSet::new(),
    )
}

/// Maximum number of bridge-disjoint paths between the segments of two
/// points, by augmenting-path max-flow with unit capacity per bridge.
/// Returns 2 as soon as two paths exist; same-segment points count as 2.
pub fn max_bridge_disjoint(g: &IntervalGraph, a: SpaceTimePoint, b: SpaceTimePoint) -> usize {
    let (sa, sb) = match (g.locate(a), g.locate(b)) {
        (Some(sa), Some(sb)) => (sa, sb),
        _ => return 0,
    };
    if sa == sb {
        return 2;
    }
    // flow[e] in {-1, 0, 1}: +1 means used from seg_u to seg_v.
    let mut flow = vec![0i32; g.edges.len()];
    let mut value = 0;
    loop {
        let mut prev: Vec<Option<(usize, i32)>> = vec![None; g.segments.len()];
        let mut queue = VecDeque::from([sa]);
        let mut reached = false;
        'bfs: while let Some(s) = queue.pop_front() {
            for &(e, t) in &g.adj[s] {
                let dir = if g.edges[e].seg_u == s { 1 } else { -1 };
                let residual = 1 - dir * flow[e];
                if residual <= 0 || prev[t].is_some() || t == sa {
                    continue;
                }
                prev[t] = Some((e, dir));
                if t == sb {
                    reached = true;
                    break 'bfs;
                }
                queue.push_back(t);
            }
        }
        if !reached {
            return value;
        }
        let mut s = sb;
        while s != sa {
            let (e, dir) = prev[s].unwrap();
            flow[e] += dir;
            s = if dir == 1 {
                g.edges[e].seg_u
            } else {
                g.edges[e].seg_v
            };
        }
        value += 1;
        if value >= 2 {
            return value;
        }
    }
}

/// One traversed stretch of a backbone: entered at `from`, left at `to`,
/// walking in increasing time when `forward`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackbonePiece {
    pub site: usize,
    pub from: f64,
    pub to: f64,
    pub forward: bool,
}

impl BackbonePiece {
    /// The stretch as an undirected arc.
    pub fn arc(&self) -> TimeArc {
        if self.forward {
            TimeArc::new(self.from, self.to)
        } else {
            TimeArc::new(self.to, self.from)
        }
    }

    pub fn travel_len(&self) -> f64 {
        self.arc().len()
    }

    /// Distance from the entry point along the walk, if the point lies on
    /// this stretch (both endpoint times included).
    pub fn travel_offset(&self, t: f64) -> Option<f64> {
        let len = self.travel_len();
        if t == self.from {
            return Some(0.0);
        }
        if t == self.to {
            return Some(len);
        }
        let arc = self.arc();
        arc.offset_of(t)
            .map(|o| if self.forward { o } else { len - o })
    }
}

/// The unique `l`-valued walk between the two sources of a single
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub o: SpaceTimePoint,
    pub x: SpaceTimePoint,
    pub pieces: Vec<BackbonePiece>,
    /// Ids into the flattened bridge list, one per junction between pieces.
    pub bridges: Vec<usize>,
}

impl Backbone {
    /// Position along the walk: piece index plus travel offset.
    pub fn order_key(&self, p: SpaceTimePoint) -> Option<(usize, f64)> {
        for (i, piece) in self.pieces.iter().enumerate() {
            if piece.site == p.site {
                if let Some(off) = piece.travel_offset(p.t) {
                    return Some((i, off));
                }
            }
        }
        None
    }

    pub fn contains(&self, p: SpaceTimePoint) -> bool {
        self.order_key(p).is_some()
    }

    /// Everything outside the walk, per site.
    pub fn complement_region(&self, n_sites: usize) -> Region {
        let mut per_site: Vec<Vec<TimeArc>> = vec![Vec::new(); n_sites];
        for piece in &self.pieces {
            per_site[piece.site].push(piece.arc());
        }
        let mut region = Region::full(n_sites);
        for (z, mut arcs) in per_site.into_iter().enumerate() {
            if arcs.is_empty() {
                continue;
            }
            arcs.sort_by(|a, b| a.start().total_cmp(&b.start()));
            region.set_site(z, SiteRegion::Arcs(arcs).complement());
        }
        region
    }
}

/// Trace the unique `l`-valued walk from `o` to `x` through the bridges of a
/// single configuration whose sources are exactly `{o, x}`.
pub fn backbone(
    model: &Model,
    xi1: &BridgeConfig,
    psi1: &Trajectory,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
) -> Result<Backbone> {
    if o == x {
        return Err(Error::InvalidParameter(
            "backbone endpoints must differ".into(),
        ));
    }
    let flat = xi1.flatten(model);
    let mut endpoint_map: HashMap<(usize, u64), (usize, SpaceTimePoint)> = HashMap::new();
    for (id, br) in flat.iter().enumerate() {
        endpoint_map.insert(
            (br.u, br.t.to_bits()),
            (id, SpaceTimePoint::new(br.t, br.v)),
        );
        endpoint_map.insert(
            (br.v, br.t.to_bits()),
            (id, SpaceTimePoint::new(br.t, br.u)),
        );
    }
    let flips: Vec<Vec<f64>> = psi1.sites.iter().map(|s| s.flip_times()).collect();
    for p in [o, x] {
        if !flips[p.site].iter().any(|&f| f == p.t) {
            return Err(Error::PathNotFound(format!(
                "source ({}, {}) is not a switching time of the trajectory",
                p.t, p.site
            )));
        }
    }
    let start_right = psi1.eval(o) == Some(false);
    let mut site = o.site;
    let mut t = o.t;
    let mut forward = start_right;
    let mut pieces = Vec::new();
    let mut used_bridges = Vec::new();
    let mut used: HashSet<usize> = HashSet::new();
    let cap = 2 * flat.len() + 4;
    for _ in 0..cap {
        let fs = &flips[site];
        if fs.is_empty() {
            return Err(Error::PathNotFound("walk entered a flipless circle".into()));
        }
        let next = if forward {
            let after = fs.iter().copied().find(|&f| f > t);
            after.unwrap_or(fs[0])
        } else {
            let before = fs.iter().rev().copied().find(|&f| f < t);
            before.unwrap_or(*fs.last().unwrap())
        };
        pieces.push(BackbonePiece {
            site,
            from: t,
            to: next,
            forward,
        });
        if site == x.site && next == x.t {
            return Ok(Backbone {
                o,
                x,
                pieces,
                bridges: used_bridges,
            });
        }
        if site == o.site && next == o.t {
            return Err(Error::PathNotFound("walk returned to its start".into()));
        }
        let (id, other) = endpoint_map
            .get(&(site, next.to_bits()))
            .copied()
            .ok_or_else(|| {
                Error::PathNotFound(format!("no bridge at switching time ({next}, {site})"))
            })?;
        if !used.insert(id) {
            return Err(Error::PathNotFound(
                "walk crossed the same bridge twice".into(),
            ));
        }
        used_bridges.push(id);
        site = other.site;
        t = other.t;
        forward = psi1.eval(other) == Some(false);
    }
    Err(Error::PathNotFound("walk failed to terminate".into()))
}

/// How a lace endpoint exits the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointTag {
    /// Boundary point of a backbone stretch; the exit runs along the circle.
    TypeB,
    /// Interior point of a stretch; the exit crosses a bridge.
    TypeI,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaceEdge {
    pub y: SpaceTimePoint,
    pub z: SpaceTimePoint,
    pub y_tag: EndpointTag,
    pub z_tag: EndpointTag,
}

/// Lace over a backbone; an empty edge list is the sentinel for
/// configurations whose off-walk connections never reach the far source.
#[derive(Debug, Clone, PartialEq)]
pub struct Lace {
    pub edges: Vec<LaceEdge>,
}

impl Lace {
    pub fn size(&self) -> usize {
        self.edges.len()
    }

    pub fn is_sentinel(&self) -> bool {
        self.edges.is_empty()
    }
}

#[derive(Debug, Clone)]
struct LaceCandidate {
    point: SpaceTimePoint,
    key: (usize, f64),
    tag: EndpointTag,
    comps: Vec<usize>,
    direct: Vec<usize>,
}

fn add_candidate(
    cands: &mut Vec<LaceCandidate>,
    point: SpaceTimePoint,
    key: (usize, f64),
    tag: EndpointTag,
) -> usize {
    if let Some(i) = cands.iter().position(|c| c.point == point) {
        if tag == EndpointTag::TypeB {
            cands[i].tag = tag;
        }
        return i;
    }
    cands.push(LaceCandidate {
        point,
        key,
        tag,
        comps: Vec::new(),
        direct: Vec::new(),
    });
    cands.len() - 1
}

/// Run the max/min recursion over the off-walk connections. `g` must be the
/// graph of the off-walk configurations built on the walk's complement.
pub fn build_lace(bb: &Backbone, g: &IntervalGraph) -> Lace {
    let mut cands: Vec<LaceCandidate> = Vec::new();
    for (i, piece) in bb.pieces.iter().enumerate() {
        let entry = SpaceTimePoint::new(piece.from, piece.site);
        let exit = SpaceTimePoint::new(piece.to, piece.site);
        add_candidate(&mut cands, entry, (i, 0.0), EndpointTag::TypeB);
        add_candidate(&mut cands, exit, (i, piece.travel_len()), EndpointTag::TypeB);
    }
    for br in g.bridges() {
        let pu = SpaceTimePoint::new(br.t, br.u);
        let pv = SpaceTimePoint::new(br.t, br.v);
        match (bb.order_key(pu), bb.order_key(pv)) {
            (Some(ku), Some(kv)) => {
                let iu = add_candidate(&mut cands, pu, ku, EndpointTag::TypeI);
                let iv = add_candidate(&mut cands, pv, kv, EndpointTag::TypeI);
                cands[iu].direct.push(iv);
                cands[iv].direct.push(iu);
            }
            (Some(ku), None) => {
                let iu = add_candidate(&mut cands, pu, ku, EndpointTag::TypeI);
                if let Some(seg) = g.locate(pv) {
                    cands[iu].comps.push(g.comp[seg]);
                }
            }
            (None, Some(kv)) => {
                let iv = add_candidate(&mut cands, pv, kv, EndpointTag::TypeI);
                if let Some(seg) = g.locate(pu) {
                    cands[iv].comps.push(g.comp[seg]);
                }
            }
            (None, None) => {}
        }
    }
    // Boundary candidates reach the complement through arcs sharing their
    // exact endpoint time.
    for c in cands.iter_mut() {
        if c.tag == EndpointTag::TypeB {
            for (s, seg) in g.segments.iter().enumerate() {
                if seg.site != c.point.site {
                    continue;
                }
                if let Span::Cut(st, en) = seg.span {
                    if st == c.point.t || en == c.point.t {
                        c.comps.push(g.comp[s]);
                    }
                }
            }
        }
        c.comps.sort_unstable();
        c.comps.dedup();
    }
    let connected = |i: usize, j: usize| -> bool {
        i == j
            || cands[i].direct.contains(&j)
            || cands[i].comps.iter().any(|c| cands[j].comps.contains(c))
    };
    let key_cmp = |i: usize, j: usize| -> std::cmp::Ordering {
        cands[i]
            .key
            .0
            .cmp(&cands[j].key.0)
            .then(cands[i].key.1.total_cmp(&cands[j].key.1))
    };
    let o_idx = cands
        .iter()
        .position(|c| c.point == bb.o)
        .expect("walk start is a candidate");
    let x_idx = cands
        .iter()
        .position(|c| c.point == bb.x)
        .expect("walk end is a candidate");
    let sentinel = Lace { edges: Vec::new() };
    let mut z = o_idx;
    for j in 0..cands.len() {
        if connected(o_idx, j) && key_cmp(j, z) == std::cmp::Ordering::Greater {
            z = j;
        }
    }
    if z == o_idx {
        return sentinel;
    }
    let mut edges = vec![LaceEdge {
        y: bb.o,
        z: cands[z].point,
        y_tag: cands[o_idx].tag,
        z_tag: cands[z].tag,
    }];
    while z != x_idx {
        let mut z_next: Option<usize> = None;
        for w in 0..cands.len() {
            if key_cmp(w, z) != std::cmp::Ordering::Greater {
                continue;
            }
            let has_witness = (0..cands.len())
                .any(|w2| key_cmp(w2, z) == std::cmp::Ordering::Less && connected(w2, w));
            if has_witness
                && z_next
                    .map(|best| key_cmp(w, best) == std::cmp::Ordering::Greater)
                    .unwrap_or(true)
            {
                z_next = Some(w);
            }
        }
        let zn = match z_next {
            Some(zn) => zn,
            None => return sentinel,
        };
        let mut y = zn;
        for w in 0..cands.len() {
            if connected(w, zn) && key_cmp(w, y) == std::cmp::Ordering::Less {
                y = w;
            }
        }
        debug_assert!(key_cmp(y, z) == std::cmp::Ordering::Less);
        edges.push(LaceEdge {
            y: cands[y].point,
            z: cands[zn].point,
            y_tag: cands[y].tag,
            z_tag: cands[zn].tag,
        });
        z = zn;
    }
    Lace { edges }
}
