//! Monte Carlo estimators built on the trajectory representation: two-point
//! and restricted two-point functions, the susceptibility, the transverse
//! one-point function, truncated four-point and mixed three-point functions,
//! the expansion kernels of orders zero and one, and a small convolution
//! algebra for kernels tabulated on the time-grid x lattice mesh.
//!
//! Every estimator is a ratio (or a polynomial in ratios) of per-sample
//! trajectory counts, with numerator and denominator accumulated from the
//! same stream so that errors are computed on the correlated ratio.

use serde::Serialize;

use crate::connectivity::IntervalGraph;
use crate::error::{Error, Result};
use crate::model::{Model, SpatialLattice};
use crate::sampler::{
    run_mc_multi, sample_configuration, Estimate, McEngine, ReplicaStats, Stream,
};
use crate::spacetime::{
    count_compatible, enumerate_compatible, MarkConfig, Region, SourceSet, SpaceTimePoint,
    Trajectory, TrajectoryEnsemble,
};

/// Largest trajectory-pair product enumerated exactly; beyond it the pair
/// average switches to uniform subsampling.
pub const PAIR_ENUM_BUDGET: u128 = 1 << 16;

/// Number of uniform pair draws once exact enumeration is out of budget.
pub const PAIR_SUBSAMPLE_DRAWS: usize = 64;

/// Configuration draws per conditioned inner stage of the nested estimator.
pub const INNER_CONFIG_DRAWS: usize = 64;

/// A correlated ratio of two sample means, with the error of the ratio taken
/// over replicas (leave-one-out), not propagated from the marginals.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RatioEstimate {
    pub numerator: Estimate,
    pub denominator: Estimate,
    pub ratio: f64,
    pub std_error: f64,
}

impl RatioEstimate {
    fn from_stats(stats: &ReplicaStats, num: usize, den: usize) -> Self {
        let r = stats.ratio(num, den);
        RatioEstimate {
            numerator: stats.component(num),
            denominator: stats.component(den),
            ratio: r.mean,
            std_error: r.std_error,
        }
    }

    /// The ratio repackaged as a plain estimate.
    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.ratio,
            std_error: self.std_error,
            n_samples: self.numerator.n_samples,
            seed: self.numerator.seed,
        }
    }
}

/// Two-level estimate: an outer replica mean whose per-draw value already
/// contains an inner conditional ratio, with the sample counts of both
/// levels recorded.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NestedEstimate {
    pub outer: Estimate,
    pub outer_samples: u64,
    pub inner_samples: u64,
}

pub(crate) fn total_count(
    region: &Region,
    flips: &[Vec<f64>],
    marks: &MarkConfig,
    sources: &SourceSet,
) -> f64 {
    count_compatible(region, flips, marks, sources).total()
}

/// Marks force the trajectory value at their time, so a pointwise value
/// constraint is an extra mark.
fn with_point_mark(marks: &MarkConfig, p: SpaceTimePoint) -> MarkConfig {
    let mut out = marks.clone();
    let times = &mut out.per_site[p.site];
    let pos = times.partition_point(|&m| m < p.t);
    times.insert(pos, p.t);
    out
}

/// Two-point function `G(o,x)` as the ratio of source-constrained to
/// unconstrained trajectory counts.
pub fn estimate_g(
    model: &Model,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
    engine: &McEngine,
) -> RatioEstimate {
    let region = Region::full(model.lattice.n_sites());
    let sources = SourceSet::of(&[o, x]);
    let empty = SourceSet::empty();
    let stats = run_mc_multi(engine, 2, |stream, out| {
        let (bridges, marks) = sample_configuration(model, &region, stream);
        let flips = bridges.site_flips(model);
        out[0] = total_count(&region, &flips, &marks, &sources);
        out[1] = total_count(&region, &flips, &marks, &empty);
    });
    RatioEstimate::from_stats(&stats, 0, 1)
}

/// Two-point function of the model confined to `region`: sampling, counting
/// and the normalization all live on the restricted domain.
pub fn estimate_g_restricted(
    model: &Model,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
    region: &Region,
    engine: &McEngine,
) -> Result<RatioEstimate> {
    if region.n_sites() != model.lattice.n_sites() {
        return Err(Error::InvalidParameter(
            "region does not match the lattice".into(),
        ));
    }
    if !region.contains(o) || !region.contains(x) {
        return Err(Error::InvalidParameter(
            "both source points must lie in the region".into(),
        ));
    }
    let sources = SourceSet::of(&[o, x]);
    let empty = SourceSet::empty();
    let stats = run_mc_multi(engine, 2, |stream, out| {
        let (bridges, marks) = sample_configuration(model, region, stream);
        let flips = bridges.site_flips(model);
        out[0] = total_count(region, &flips, &marks, &sources);
        out[1] = total_count(region, &flips, &marks, &empty);
    });
    if stats.grand_means()[1] == 0.0 {
        return Err(Error::Degenerate(
            "restricted normalization has zero sampled mass".into(),
        ));
    }
    Ok(RatioEstimate::from_stats(&stats, 0, 1))
}

/// Susceptibility: time-grid average of the spatially summed two-point
/// function, all entries sharing one sample stream. On the periodic grid the
/// trapezoidal rule is the plain mean over grid times.
pub fn estimate_chi(model: &Model, engine: &McEngine, n_t: usize) -> Result<Estimate> {
    if n_t < 8 {
        return Err(Error::InvalidParameter(
            "susceptibility grid needs at least 8 times".into(),
        ));
    }
    let n = model.lattice.n_sites();
    let region = Region::full(n);
    let o = SpaceTimePoint::new(0.0, 0);
    let empty = SourceSet::empty();
    let stats = run_mc_multi(engine, n_t + 1, |stream, out| {
        let (bridges, marks) = sample_configuration(model, &region, stream);
        let flips = bridges.site_flips(model);
        for (i, slot) in out.iter_mut().enumerate().take(n_t) {
            let t = i as f64 / n_t as f64;
            let mut acc = 0.0;
            for xs in 0..n {
                let sources = SourceSet::of(&[o, SpaceTimePoint::new(t, xs)]);
                acc += total_count(&region, &flips, &marks, &sources);
            }
            *slot = acc;
        }
        out[n_t] = total_count(&region, &flips, &marks, &empty);
    });
    Ok(stats.derive(|m| m[..n_t].iter().sum::<f64>() / (n_t as f64 * m[n_t])))
}

/// Transverse one-point function at `(s, y)`: twice the fraction of
/// trajectories pinned to the reference value there, minus one.
pub fn estimate_one_point_s1(model: &Model, y: usize, s: f64, engine: &McEngine) -> Estimate {
    let region = Region::full(model.lattice.n_sites());
    let empty = SourceSet::empty();
    let pin = SpaceTimePoint::new(s, y);
    let stats = run_mc_multi(engine, 2, |stream, out| {
        let (bridges, marks) = sample_configuration(model, &region, stream);
        let flips = bridges.site_flips(model);
        let pinned = with_point_mark(&marks, pin);
        out[0] = total_count(&region, &flips, &pinned, &empty);
        out[1] = total_count(&region, &flips, &marks, &empty);
    });
    stats.derive(|m| 2.0 * m[0] / m[1] - 1.0)
}

/// Truncated four-point function minus the two cross pairings; nonpositive
/// for ferromagnetic couplings.
pub fn estimate_f4(
    model: &Model,
    w: SpaceTimePoint,
    x: SpaceTimePoint,
    y: SpaceTimePoint,
    z: SpaceTimePoint,
    engine: &McEngine,
) -> Estimate {
    let region = Region::full(model.lattice.n_sites());
    let srcs: Vec<SourceSet> = vec![
        SourceSet::of(&[w, x, y, z]),
        SourceSet::of(&[w, x]),
        SourceSet::of(&[y, z]),
        SourceSet::of(&[w, y]),
        SourceSet::of(&[x, z]),
        SourceSet::of(&[w, z]),
        SourceSet::of(&[x, y]),
        SourceSet::empty(),
    ];
    let stats = run_mc_multi(engine, srcs.len(), |stream, out| {
        let (bridges, marks) = sample_configuration(model, &region, stream);
        let flips = bridges.site_flips(model);
        for (slot, s) in out.iter_mut().zip(&srcs) {
            *slot = total_count(&region, &flips, &marks, s);
        }
    });
    stats.derive(|m| {
        let d = m[7];
        m[0] / d - (m[1] / d) * (m[2] / d) - (m[3] / d) * (m[4] / d) - (m[5] / d) * (m[6] / d)
    })
}

/// Mixed three-point function: the two-point/transverse truncated correlation
/// plus twice the product of the split two-point functions; nonnegative for
/// ferromagnetic couplings.
pub fn estimate_f3(
    model: &Model,
    w: SpaceTimePoint,
    x: SpaceTimePoint,
    y: SpaceTimePoint,
    engine: &McEngine,
) -> Estimate {
    let region = Region::full(model.lattice.n_sites());
    let src_wx = SourceSet::of(&[w, x]);
    let src_wy = SourceSet::of(&[w, y]);
    let src_yx = SourceSet::of(&[y, x]);
    let empty = SourceSet::empty();
    let stats = run_mc_multi(engine, 6, |stream, out| {
        let (bridges, marks) = sample_configuration(model, &region, stream);
        let flips = bridges.site_flips(model);
        let pinned = with_point_mark(&marks, y);
        out[0] = total_count(&region, &flips, &pinned, &src_wx);
        out[1] = total_count(&region, &flips, &marks, &src_wx);
        out[2] = total_count(&region, &flips, &pinned, &empty);
        out[3] = total_count(&region, &flips, &marks, &src_wy);
        out[4] = total_count(&region, &flips, &marks, &src_yx);
        out[5] = total_count(&region, &flips, &marks, &empty);
    });
    stats.derive(|m| {
        let d = m[5];
        2.0 * m[0] / d - 2.0 * (m[1] / d) * (m[2] / d) + 2.0 * (m[3] / d) * (m[4] / d)
    })
}

/// Average of a pair functional over two trajectory ensembles: the full
/// product is enumerated when it fits the budget, otherwise the mean is
/// subsampled with uniform independent pair draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairAverage {
    pub mean: f64,
    pub pairs: u64,
    pub exact: bool,
}

pub(crate) fn random_member(ens: &TrajectoryEnsemble, stream: &mut Stream) -> Trajectory {
    Trajectory {
        sites: ens
            .options
            .iter()
            .map(|opts| opts[stream.range(opts.len())].clone())
            .collect(),
    }
}

pub fn trajectory_pair_mean<F>(
    ens1: &TrajectoryEnsemble,
    ens2: &TrajectoryEnsemble,
    stream: &mut Stream,
    mut f: F,
) -> PairAverage
where
    F: FnMut(&Trajectory, &Trajectory) -> f64,
{
    let total = ens1.n_choices().saturating_mul(ens2.n_choices());
    if total == 0 {
        return PairAverage {
            mean: 0.0,
            pairs: 0,
            exact: true,
        };
    }
    if total <= PAIR_ENUM_BUDGET {
        let mut acc = 0.0;
        for t1 in ens1.iter() {
            for t2 in ens2.iter() {
                acc += f(&t1, &t2);
            }
        }
        PairAverage {
            mean: acc / total as f64,
            pairs: total as u64,
            exact: true,
        }
    } else {
        let mut acc = 0.0;
        for _ in 0..PAIR_SUBSAMPLE_DRAWS {
            let t1 = random_member(ens1, stream);
            let t2 = random_member(ens2, stream);
            acc += f(&t1, &t2);
        }
        PairAverage {
            mean: acc / PAIR_SUBSAMPLE_DRAWS as f64,
            pairs: PAIR_SUBSAMPLE_DRAWS as u64,
            exact: false,
        }
    }
}

/// Channels: [pair-weighted double-connection count, squared normalization,
/// trajectory pairs examined].
fn pi0_channels(
    model: &Model,
    region: &Region,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
    stream: &mut Stream,
    out: &mut [f64],
) {
    let (b1, m1) = sample_configuration(model, region, stream);
    let (b2, m2) = sample_configuration(model, region, stream);
    let f1 = b1.site_flips(model);
    let f2 = b2.site_flips(model);
    let empty = SourceSet::empty();
    out[1] = total_count(region, &f1, &m1, &empty) * total_count(region, &f2, &m2, &empty);
    out[0] = 0.0;
    out[2] = 0.0;
    let ens1 = enumerate_compatible(region, &f1, &m1, &SourceSet::of(&[o, x]));
    let ens2 = enumerate_compatible(region, &f2, &m2, &empty);
    if ens1.is_empty() || ens2.is_empty() {
        return;
    }
    let mut merged = b1.flatten(model);
    merged.extend(b2.flatten(model));
    let graph = IntervalGraph::from_parts(region.clone(), merged, vec![Vec::new(); region.n_sites()]);
    let hit = if graph.doubly_connected(o, x) { 1.0 } else { 0.0 };
    let pa = trajectory_pair_mean(&ens1, &ens2, stream, |_, _| hit);
    out[0] = ens1.count() * ens2.count() * pa.mean;
    out[2] = pa.pairs as f64;
}

/// Order-zero expansion kernel: the double-connection analogue of the
/// two-point ratio, taken over a merged pair of independent configurations.
pub fn estimate_pi0(
    model: &Model,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
    engine: &McEngine,
) -> Result<Estimate> {
    if model.q != 0.0 {
        return Err(Error::InvalidParameter(
            "expansion kernels are defined at zero transverse field".into(),
        ));
    }
    let region = Region::full(model.lattice.n_sites());
    let stats = run_mc_multi(engine, 3, |stream, out| {
        pi0_channels(model, &region, o, x, stream, out)
    });
    Ok(stats.ratio(0, 1))
}

/// Connected in the sampled graph, but not within `free` alone: every
/// connection is forced through the conditioned complement of `free`.
fn connects_through(
    graph: &IntervalGraph,
    free: &Region,
    a: SpaceTimePoint,
    b: SpaceTimePoint,
) -> bool {
    graph.connected(a, b) && !graph.connected_within(a, b, free)
}

/// Gate for one nested stage: the target is reached through the conditioned
/// set, and no pivotal bridge of the connection is reached through it
/// earlier.
fn stage_gate(
    graph: &IntervalGraph,
    free: &Region,
    v: SpaceTimePoint,
    x: SpaceTimePoint,
) -> bool {
    if !connects_through(graph, free, v, x) {
        return false;
    }
    graph
        .pivotal_bridges(v, x)
        .iter()
        .all(|ob| !connects_through(graph, free, v, ob.u))
}

/// Channels: [importance-weighted nested term, squared normalization,
/// inner draws performed].
fn pi1_channels(
    model: &Model,
    region: &Region,
    bond_weights: &[f64],
    mecke_weight: f64,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
    stream: &mut Stream,
    out: &mut [f64],
) {
    let (b1, m1) = sample_configuration(model, region, stream);
    let (b2, m2) = sample_configuration(model, region, stream);
    let f1 = b1.site_flips(model);
    let f2 = b2.site_flips(model);
    let empty = SourceSet::empty();
    let n2e = total_count(region, &f2, &m2, &empty);
    out[1] = total_count(region, &f1, &m1, &empty) * n2e;
    out[0] = 0.0;
    out[2] = 0.0;

    let bond = model.bonds()[stream.pick_weighted(bond_weights)];
    let tb = stream.uniform();
    let pu = SpaceTimePoint::new(tb, bond.u);
    let pv = SpaceTimePoint::new(tb, bond.v);

    let mut merged12 = b1.flatten(model);
    merged12.extend(b2.flatten(model));
    let g12 = IntervalGraph::from_parts(
        region.clone(),
        merged12,
        vec![Vec::new(); region.n_sites()],
    );

    // Both orientations of the cut bridge share the conditioning cluster.
    let mut stages: Vec<(SpaceTimePoint, f64)> = Vec::with_capacity(2);
    for (u, v) in [(pu, pv), (pv, pu)] {
        if !g12.doubly_connected(o, u) {
            continue;
        }
        let outer = total_count(region, &f1, &m1, &SourceSet::of(&[o, u])) * n2e;
        if outer > 0.0 {
            stages.push((v, outer));
        }
    }
    if stages.is_empty() {
        return;
    }
    let cluster = g12.cluster(o);
    let free = g12.cluster_complement_region(&cluster);

    let mut inner = stream.child();
    let mut inner_num = vec![0.0; stages.len()];
    let mut inner_den = 0.0;
    for _ in 0..INNER_CONFIG_DRAWS {
        let (b3, m3) = sample_configuration(model, region, &mut inner);
        let (b4, m4) = sample_configuration(model, &free, &mut inner);
        let f3 = b3.site_flips(model);
        let f4 = b4.site_flips(model);
        let n3e = total_count(region, &f3, &m3, &empty);
        let n4e = total_count(&free, &f4, &m4, &empty);
        inner_den += n3e * n4e;
        if n4e == 0.0 {
            continue;
        }
        let mut merged34 = b3.flatten(model);
        merged34.extend(b4.flatten(model));
        let g34 = IntervalGraph::from_parts(
            region.clone(),
            merged34,
            vec![Vec::new(); region.n_sites()],
        );
        for ((v, _), slot) in stages.iter().zip(inner_num.iter_mut()) {
            if !stage_gate(&g34, &free, *v, x) {
                continue;
            }
            *slot += total_count(region, &f3, &m3, &SourceSet::of(&[*v, x])) * n4e;
        }
    }
    out[2] = INNER_CONFIG_DRAWS as f64;
    if inner_den > 0.0 {
        let mut acc = 0.0;
        for ((_, outer), num) in stages.iter().zip(&inner_num) {
            acc += outer * num / inner_den;
        }
        out[0] = mecke_weight * acc;
    }
}

/// Expansion kernel of order `j` (`j <= 1`): order zero is the plain
/// double-connection kernel; order one conditions on the cluster cut open at
/// an importance-sampled bridge and runs an inner conditional ratio on the
/// complement.
pub fn estimate_pi_j(
    model: &Model,
    j: usize,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
    engine: &McEngine,
) -> Result<NestedEstimate> {
    if model.q != 0.0 {
        return Err(Error::InvalidParameter(
            "expansion kernels are defined at zero transverse field".into(),
        ));
    }
    if j > 1 {
        return Err(Error::InvalidParameter(
            "nesting beyond the first conditioned stage is not supported".into(),
        ));
    }
    let region = Region::full(model.lattice.n_sites());
    let stats = if j == 0 {
        run_mc_multi(engine, 3, |stream, out| {
            pi0_channels(model, &region, o, x, stream, out)
        })
    } else {
        let bond_weights: Vec<f64> = model.bonds().iter().map(|b| b.j).collect();
        if bond_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidParameter(
                "order-one kernel needs at least one coupled bond".into(),
            ));
        }
        let mecke_weight = model.beta * model.total_bond_strength();
        run_mc_multi(engine, 3, |stream, out| {
            pi1_channels(
                model,
                &region,
                &bond_weights,
                mecke_weight,
                o,
                x,
                stream,
                out,
            )
        })
    };
    let total = engine.total_samples();
    let inner = (stats.grand_means()[2] * total as f64).round() as u64;
    Ok(NestedEstimate {
        outer: stats.ratio(0, 1),
        outer_samples: total,
        inner_samples: inner,
    })
}

/// A kernel tabulated on the periodic time grid `t_i = i/n_t` and the full
/// site list; `values[i][x]` is the entry at `(t_i, x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelTable {
    pub n_t: usize,
    pub values: Vec<Vec<f64>>,
}

impl KernelTable {
    pub fn zeros(n_t: usize, n_sites: usize) -> Self {
        KernelTable {
            n_t,
            values: vec![vec![0.0; n_sites]; n_t],
        }
    }

    pub fn n_sites(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.n_t as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0, |m, &v| m.max(v.abs()))
    }
}

/// The coupling as a kernel: `values[i][y] = beta * J_{0,y}` for every grid
/// time, so spatial convolution with it applies the coupling at equal time.
pub fn coupling_table(model: &Model, n_t: usize) -> KernelTable {
    let n = model.lattice.n_sites();
    let row: Vec<f64> = (0..n)
        .map(|y| model.beta * model.coupling_between(0, y))
        .collect();
    KernelTable {
        n_t,
        values: vec![row; n_t],
    }
}

fn check_mesh(lat: &SpatialLattice, a: &KernelTable, b: &KernelTable) -> Result<()> {
    if a.n_t != b.n_t || a.n_sites() != b.n_sites() || a.n_sites() != lat.n_sites() {
        return Err(Error::InvalidParameter("kernel mesh mismatch".into()));
    }
    Ok(())
}

/// `shift[y][x]` = site index of `x - y` on the torus.
pub(crate) fn shift_table(lat: &SpatialLattice) -> Vec<Vec<usize>> {
    let n = lat.n_sites();
    (0..n)
        .map(|y| {
            let back: Vec<i32> = lat.displacement(0, y).iter().map(|&c| -c).collect();
            (0..n).map(|x| lat.translate(x, &back)).collect()
        })
        .collect()
}

/// Spatial convolution at each grid time separately: equal-time action, as
/// for a coupling kernel.
pub fn convolve(lat: &SpatialLattice, a: &KernelTable, b: &KernelTable) -> Result<KernelTable> {
    check_mesh(lat, a, b)?;
    let n = lat.n_sites();
    let shift = shift_table(lat);
    let mut out = KernelTable::zeros(a.n_t, n);
    for i in 0..a.n_t {
        for y in 0..n {
            let ay = a.values[i][y];
            if ay == 0.0 {
                continue;
            }
            for x in 0..n {
                out.values[i][x] += ay * b.values[i][shift[y][x]];
            }
        }
    }
    Ok(out)
}

/// Full space-time composition: circular average over the time shift and
/// spatial convolution, with the uniform measure on the unit time circle.
pub fn compose(lat: &SpatialLattice, a: &KernelTable, b: &KernelTable) -> Result<KernelTable> {
    check_mesh(lat, a, b)?;
    let n = lat.n_sites();
    let n_t = a.n_t;
    let shift = shift_table(lat);
    let mut out = KernelTable::zeros(n_t, n);
    for i in 0..n_t {
        for k in 0..n_t {
            let bi = (i + n_t - k) % n_t;
            for y in 0..n {
                let ay = a.values[k][y];
                if ay == 0.0 {
                    continue;
                }
                for x in 0..n {
                    out.values[i][x] += ay * b.values[bi][shift[y][x]];
                }
            }
        }
        for v in out.values[i].iter_mut() {
            *v /= n_t as f64;
        }
    }
    Ok(out)
}

/// A tabulated kernel with one standard error per mesh entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelEstimate {
    pub means: KernelTable,
    pub std_errors: KernelTable,
    pub n_samples: u64,
}

impl KernelEstimate {
    /// Rows `(t, x, mean, std_error)`, deterministic full-precision floats.
    pub fn csv(&self) -> String {
        let mut s = String::from("t,x,mean,std_error\n");
        for i in 0..self.means.n_t {
            for x in 0..self.means.n_sites() {
                s.push_str(&format!(
                    "{:.16e},{},{:.16e},{:.16e}\n",
                    self.means.time(i),
                    x,
                    self.means.values[i][x],
                    self.std_errors.values[i][x],
                ));
            }
        }
        s
    }
}

fn ratio_tables(stats: &ReplicaStats, n_t: usize, n: usize, den: usize) -> KernelEstimate {
    let mut means = KernelTable::zeros(n_t, n);
    let mut errs = KernelTable::zeros(n_t, n);
    for i in 0..n_t {
        for x in 0..n {
            let e = stats.ratio(i * n + x, den);
            means.values[i][x] = e.mean;
            errs.values[i][x] = e.std_error;
        }
    }
    KernelEstimate {
        means,
        std_errors: errs,
        n_samples: stats.total_samples(),
    }
}

/// Two-point function tabulated over the whole mesh from shared samples.
pub fn estimate_g_table(model: &Model, engine: &McEngine, n_t: usize) -> Result<KernelEstimate> {
    if n_t == 0 {
        return Err(Error::InvalidParameter("empty time grid".into()));
    }
    let n = model.lattice.n_sites();
    let region = Region::full(n);
    let o = SpaceTimePoint::new(0.0, 0);
    let empty = SourceSet::empty();
    let stats = run_mc_multi(engine, n_t * n + 1, |stream, out| {
        let (bridges, marks) = sample_configuration(model, &region, stream);
        let flips = bridges.site_flips(model);
        for i in 0..n_t {
            let t = i as f64 / n_t as f64;
            for xs in 0..n {
                let sources = SourceSet::of(&[o, SpaceTimePoint::new(t, xs)]);
                out[i * n + xs] = total_count(&region, &flips, &marks, &sources);
            }
        }
        out[n_t * n] = total_count(&region, &flips, &marks, &empty);
    });
    Ok(ratio_tables(&stats, n_t, n, n_t * n))
}

/// Order-zero expansion kernel tabulated over the whole mesh. The
/// double-connection indicator does not depend on the trajectory choice when
/// there are no marks, so the pair sum factorizes into the two counts.
pub fn estimate_pi0_table(model: &Model, engine: &McEngine, n_t: usize) -> Result<KernelEstimate> {
    if model.q != 0.0 {
        return Err(Error::InvalidParameter(
            "expansion kernels are defined at zero transverse field".into(),
        ));
    }
    if n_t == 0 {
        return Err(Error::InvalidParameter("empty time grid".into()));
    }
    let n = model.lattice.n_sites();
    let region = Region::full(n);
    let o = SpaceTimePoint::new(0.0, 0);
    let empty = SourceSet::empty();
    let stats = run_mc_multi(engine, n_t * n + 1, |stream, out| {
        let (b1, m1) = sample_configuration(model, &region, stream);
        let (b2, m2) = sample_configuration(model, &region, stream);
        let f1 = b1.site_flips(model);
        let f2 = b2.site_flips(model);
        let n2e = total_count(&region, &f2, &m2, &empty);
        out[n_t * n] = total_count(&region, &f1, &m1, &empty) * n2e;
        let mut merged = b1.flatten(model);
        merged.extend(b2.flatten(model));
        let graph = IntervalGraph::from_parts(region.clone(), merged, vec![Vec::new(); n]);
        for i in 0..n_t {
            let t = i as f64 / n_t as f64;
            for xs in 0..n {
                let x = SpaceTimePoint::new(t, xs);
                out[i * n + xs] = if graph.doubly_connected(o, x) {
                    total_count(&region, &f1, &m1, &SourceSet::of(&[o, x])) * n2e
                } else {
                    0.0
                };
            }
        }
    });
    Ok(ratio_tables(&stats, n_t, n, n_t * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CouplingSpec;
    use crate::oracle::DenseOracle;
    use crate::spacetime::TimeArc;

    fn single_site(beta: f64, q: f64) -> Model {
        Model::new(
            SpatialLattice::single_site(),
            CouplingSpec::NearestNeighbor { j: 0.0 },
            beta,
            q,
        )
        .unwrap()
    }

    fn two_site(beta: f64, j: f64, q: f64) -> Model {
        Model::new(
            SpatialLattice::new(1, 1).unwrap(),
            CouplingSpec::NearestNeighbor { j },
            beta,
            q,
        )
        .unwrap()
    }

    fn ring4(beta: f64, j: f64, q: f64) -> Model {
        Model::new(
            SpatialLattice::new(1, 2).unwrap(),
            CouplingSpec::NearestNeighbor { j },
            beta,
            q,
        )
        .unwrap()
    }

    fn assert_within(label: &str, got: f64, want: f64, sigma: f64) {
        let tol = 4.0 * sigma.max(1e-12);
        assert!(
            (got - want).abs() <= tol,
            "{label}: got {got}, want {want}, tol {tol}"
        );
    }

    #[test]
    fn g_single_site_matches_transverse_closed_form() {
        let beta = 1.0;
        let q = 0.7;
        let model = single_site(beta, q);
        let t = 0.25;
        let engine = McEngine::new(11, 8, 4000).unwrap();
        let est = estimate_g(
            &model,
            SpaceTimePoint::new(0.0, 0),
            SpaceTimePoint::new(t, 0),
            &engine,
        );
        let want = ((1.0 - 2.0 * t) * beta * q).cosh() / (beta * q).cosh();
        assert!(est.std_error > 0.0 && est.std_error < 0.02);
        assert_within("single-site g", est.ratio, want, est.std_error);
    }

    #[test]
    fn g_two_site_matches_tanh_at_zero_field() {
        let beta = 0.6;
        let j = 0.8;
        let model = two_site(beta, j, 0.0);
        let engine = McEngine::new(12, 8, 4000).unwrap();
        let est = estimate_g(
            &model,
            SpaceTimePoint::new(0.0, 0),
            SpaceTimePoint::new(0.0, 1),
            &engine,
        );
        assert_within("two-site g", est.ratio, (beta * j).tanh(), est.std_error);
    }

    #[test]
    fn g_coincident_sources_is_exactly_one() {
        let model = two_site(0.5, 1.0, 0.4);
        let engine = McEngine::new(13, 4, 200).unwrap();
        let p = SpaceTimePoint::new(0.0, 0);
        let est = estimate_g(&model, p, p, &engine);
        assert_eq!(est.ratio, 1.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn g_matches_oracle_on_ring() {
        let model = ring4(0.4, 1.0, 0.3);
        let oracle = DenseOracle::new(&model).unwrap();
        let engine = McEngine::new(14, 8, 4000).unwrap();
        let o = SpaceTimePoint::new(0.0, 0);
        let x = SpaceTimePoint::new(0.3, 2);
        let est = estimate_g(&model, o, x, &engine);
        assert_within("ring g", est.ratio, oracle.g_points(o, x), est.std_error);
    }

    #[test]
    fn g_restricted_full_region_matches_unrestricted() {
        let model = two_site(0.5, 0.9, 0.6);
        let engine = McEngine::new(15, 8, 3000).unwrap();
        let o = SpaceTimePoint::new(0.0, 0);
        let x = SpaceTimePoint::new(0.4, 1);
        let full = Region::full(2);
        let a = estimate_g(&model, o, x, &engine);
        let b = estimate_g_restricted(&model, o, x, &full, &engine).unwrap();
        let sigma = a.std_error.hypot(b.std_error);
        assert_within("restricted=full", b.ratio, a.ratio, sigma);
    }

    #[test]
    fn g_restricted_disconnected_region_numerator_vanishes() {
        let model = two_site(0.7, 1.0, 0.0);
        let engine = McEngine::new(16, 4, 500).unwrap();
        let mut region = Region::full(2);
        region.set_site(
            0,
            crate::spacetime::SiteRegion::Arcs(vec![TimeArc::new(0.0, 0.4)]),
        );
        region.set_site(
            1,
            crate::spacetime::SiteRegion::Arcs(vec![TimeArc::new(0.5, 0.9)]),
        );
        let o = SpaceTimePoint::new(0.1, 0);
        let x = SpaceTimePoint::new(0.6, 1);
        let est = estimate_g_restricted(&model, o, x, &region, &engine).unwrap();
        assert_eq!(est.numerator.mean, 0.0);
        assert_eq!(est.ratio, 0.0);
    }

    #[test]
    fn g_restricted_is_dominated_by_unrestricted() {
        let model = two_site(0.6, 1.0, 0.5);
        let engine = McEngine::new(17, 8, 3000).unwrap();
        let o = SpaceTimePoint::new(0.0, 0);
        let x = SpaceTimePoint::new(0.2, 1);
        let mut region = Region::full(2);
        region.set_site(
            1,
            crate::spacetime::SiteRegion::Arcs(vec![TimeArc::new(0.9, 0.6)]),
        );
        let full = estimate_g(&model, o, x, &engine);
        let res = estimate_g_restricted(&model, o, x, &region, &engine).unwrap();
        let sigma = full.std_error.hypot(res.std_error);
        assert!(
            res.ratio <= full.ratio + 4.0 * sigma,
            "monotonicity: restricted {} vs full {}",
            res.ratio,
            full.ratio
        );
    }

    #[test]
    fn g_restricted_rejects_sources_outside_region() {
        let model = two_site(0.5, 1.0, 0.0);
        let engine = McEngine::new(18, 2, 10).unwrap();
        let mut region = Region::full(2);
        region.set_site(
            1,
            crate::spacetime::SiteRegion::Arcs(vec![TimeArc::new(0.0, 0.3)]),
        );
        let err = estimate_g_restricted(
            &model,
            SpaceTimePoint::new(0.0, 0),
            SpaceTimePoint::new(0.5, 1),
            &region,
            &engine,
        );
        assert!(err.is_err());
    }

    #[test]
    fn chi_zero_field_matches_classical_and_grid_is_constant() {
        let beta = 0.45;
        let j = 1.0;
        let model = two_site(beta, j, 0.0);
        let engine = McEngine::new(19, 8, 3000).unwrap();
        let chi = estimate_chi(&model, &engine, 8).unwrap();
        let oracle = DenseOracle::new(&model).unwrap();
        assert_within("chi q=0", chi.mean, oracle.exact_chi(), chi.std_error);
        let classical =
            crate::oracle::classical_chi(2, model.bonds(), beta);
        assert_within("chi classical", chi.mean, classical, chi.std_error);

        let table = estimate_g_table(&model, &engine, 8).unwrap();
        for i in 1..8 {
            for x in 0..2 {
                let sigma = table.std_errors.values[i][x].hypot(table.std_errors.values[0][x]);
                assert_within(
                    "grid constancy",
                    table.means.values[i][x],
                    table.means.values[0][x],
                    sigma,
                );
            }
        }
    }

    #[test]
    fn chi_at_tiny_beta_is_one() {
        let model = two_site(1e-9, 1.0, 0.0);
        let engine = McEngine::new(20, 4, 500).unwrap();
        let chi = estimate_chi(&model, &engine, 8).unwrap();
        assert_within("chi beta->0", chi.mean, 1.0, chi.std_error.max(1e-9));
    }

    #[test]
    fn chi_ring_matches_oracle_with_transverse_field() {
        let model = ring4(0.4, 1.0, 0.3);
        let oracle = DenseOracle::new(&model).unwrap();
        let engine = McEngine::new(21, 8, 4000).unwrap();
        let chi = estimate_chi(&model, &engine, 32).unwrap();
        assert!(chi.std_error > 2e-4, "grid bias must stay below the noise");
        assert_within("chi ring", chi.mean, oracle.exact_chi(), chi.std_error);
    }

    #[test]
    fn chi_rejects_coarse_grid() {
        let model = two_site(0.3, 1.0, 0.0);
        let engine = McEngine::new(22, 2, 10).unwrap();
        assert!(estimate_chi(&model, &engine, 4).is_err());
    }

    #[test]
    fn one_point_single_site_matches_tanh() {
        let beta = 0.8;
        let q = 0.6;
        let model = single_site(beta, q);
        let engine = McEngine::new(23, 8, 4000).unwrap();
        let est = estimate_one_point_s1(&model, 0, 0.37, &engine);
        assert_within("s1 single site", est.mean, (beta * q).tanh(), est.std_error);
        let oracle = DenseOracle::new(&model).unwrap();
        assert_within(
            "s1 oracle",
            est.mean,
            oracle.exact_one_point_s1(0),
            est.std_error,
        );
    }

    #[test]
    fn one_point_vanishes_exactly_at_zero_field() {
        let model = two_site(0.7, 1.0, 0.0);
        let engine = McEngine::new(24, 4, 300).unwrap();
        let est = estimate_one_point_s1(&model, 1, 0.5, &engine);
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn one_point_stays_in_operator_range() {
        for (seed, beta, q) in [(25u64, 0.3, 0.2), (26, 1.2, 1.5), (27, 0.9, 3.0)] {
            let model = two_site(beta, 1.0, q);
            let engine = McEngine::new(seed, 4, 800).unwrap();
            let est = estimate_one_point_s1(&model, 0, 0.25, &engine);
            assert!(est.mean.abs() <= 1.0 + 1e-12, "bound at q={q}: {}", est.mean);
        }
    }

    #[test]
    fn f4_is_nonpositive_and_matches_oracle() {
        let model = two_site(0.7, 0.9, 0.4);
        let oracle = DenseOracle::new(&model).unwrap();
        let w = SpaceTimePoint::new(0.0, 0);
        let x = SpaceTimePoint::new(0.3, 1);
        let y = SpaceTimePoint::new(0.55, 0);
        let z = SpaceTimePoint::new(0.8, 1);
        let engine = McEngine::new(28, 8, 6000).unwrap();
        let est = estimate_f4(&model, w, x, y, z, &engine);
        assert_within("f4 oracle", est.mean, oracle.f4(w, x, y, z), est.std_error);
        assert!(
            est.mean <= 4.0 * est.std_error,
            "nonpositive: {} +- {}",
            est.mean,
            est.std_error
        );
    }

    #[test]
    fn f3_is_nonnegative_and_matches_oracle() {
        let model = two_site(0.7, 0.9, 0.4);
        let oracle = DenseOracle::new(&model).unwrap();
        let w = SpaceTimePoint::new(0.0, 0);
        let x = SpaceTimePoint::new(0.42, 1);
        let y = SpaceTimePoint::new(0.7, 0);
        let engine = McEngine::new(29, 8, 6000).unwrap();
        let est = estimate_f3(&model, w, x, y, &engine);
        assert_within("f3 oracle", est.mean, oracle.f3(w, x, y), est.std_error);
        assert!(
            est.mean >= -4.0 * est.std_error,
            "nonnegative: {} +- {}",
            est.mean,
            est.std_error
        );
    }

    #[test]
    fn pair_mean_exact_path_matches_brute_force() {
        let model = two_site(0.8, 1.0, 0.0);
        let region = Region::full(2);
        let mut stream = Stream::sample_stream(99, 0, 0);
        let (bridges, marks) = sample_configuration(&model, &region, &mut stream);
        let flips = bridges.site_flips(&model);
        let ens = enumerate_compatible(&region, &flips, &marks, &SourceSet::empty());
        let f = |a: &Trajectory, b: &Trajectory| {
            let va = a.sites[0].eval(0.0).unwrap();
            let vb = b.sites[0].eval(0.0).unwrap();
            if va == vb {
                1.0
            } else {
                0.0
            }
        };
        let pa = trajectory_pair_mean(&ens, &ens, &mut stream, f);
        assert!(pa.exact);
        let mut acc = 0.0;
        let mut count = 0u64;
        for a in ens.iter() {
            for b in ens.iter() {
                acc += f(&a, &b);
                count += 1;
            }
        }
        assert_eq!(pa.pairs, count);
        assert!((pa.mean - acc / count as f64).abs() < 1e-15);
        assert!((pa.mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pair_mean_subsamples_past_the_budget() {
        // 10 sites with no bridges: 2^10 choices per layer, 2^20 pairs.
        let model = Model::new(
            SpatialLattice::new(1, 5).unwrap(),
            CouplingSpec::NearestNeighbor { j: 0.0 },
            0.5,
            0.0,
        )
        .unwrap();
        let region = Region::full(10);
        let flips = vec![Vec::new(); 10];
        let marks = MarkConfig {
            per_site: vec![Vec::new(); 10],
        };
        let ens = enumerate_compatible(&region, &flips, &marks, &SourceSet::empty());
        assert!(ens.n_choices() * ens.n_choices() > PAIR_ENUM_BUDGET);
        let mut stream = Stream::sample_stream(100, 0, 0);
        let pa = trajectory_pair_mean(&ens, &ens, &mut stream, |_, _| 1.0);
        assert!(!pa.exact);
        assert_eq!(pa.pairs, PAIR_SUBSAMPLE_DRAWS as u64);
        assert_eq!(pa.mean, 1.0);
        let _ = model;
    }

    #[test]
    fn pi0_coincident_point_is_exactly_one() {
        let model = two_site(0.5, 1.0, 0.0);
        let engine = McEngine::new(30, 4, 400).unwrap();
        let p = SpaceTimePoint::new(0.0, 0);
        let est = estimate_pi0(&model, p, p, &engine).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn pi0_rejects_transverse_field() {
        let model = two_site(0.5, 1.0, 0.3);
        let engine = McEngine::new(31, 2, 10).unwrap();
        let p = SpaceTimePoint::new(0.0, 0);
        assert!(estimate_pi0(&model, p, SpaceTimePoint::new(0.0, 1), &engine).is_err());
        assert!(estimate_pi_j(&model, 1, p, p, &engine).is_err());
    }

    /// Two-site closed form: with `n_i` the bridge counts of the two layers,
    /// the numerator event is `n_1` odd, `n_2` even, `n_1+n_2 >= 2`.
    fn pi0_two_site_exact(lambda: f64) -> f64 {
        let pe = (1.0 + (-2.0 * lambda).exp()) / 2.0;
        let po = (1.0 - (-2.0 * lambda).exp()) / 2.0;
        (po * pe - lambda * (-2.0 * lambda).exp()) / (pe * pe)
    }

    #[test]
    fn pi0_weak_coupling_is_far_below_g() {
        let beta = 0.5;
        let j = 0.2; // lambda = 0.1
        let model = two_site(beta, j, 0.0);
        let engine = McEngine::new(32, 8, 20000).unwrap();
        let o = SpaceTimePoint::new(0.0, 0);
        let x = SpaceTimePoint::new(0.0, 1);
        let pi0 = estimate_pi0(&model, o, x, &engine).unwrap();
        let g = estimate_g(&model, o, x, &engine);
        let want = pi0_two_site_exact(beta * j);
        assert_within("pi0 closed form", pi0.mean, want, pi0.std_error);
        assert!(pi0.mean >= 0.0);
        assert!(
            pi0.mean + 4.0 * pi0.std_error < 0.2 * (g.ratio - 4.0 * g.std_error),
            "pi0 {} should be far below g {}",
            pi0.mean,
            g.ratio
        );
    }

    #[test]
    fn pi0_is_dominated_by_g() {
        let model = two_site(0.6, 1.0, 0.0);
        let engine = McEngine::new(33, 8, 8000).unwrap();
        let o = SpaceTimePoint::new(0.0, 0);
        let x = SpaceTimePoint::new(0.25, 1);
        let pi0 = estimate_pi0(&model, o, x, &engine).unwrap();
        let g = estimate_g(&model, o, x, &engine);
        let sigma = pi0.std_error.hypot(g.std_error);
        assert!(
            pi0.mean <= g.ratio + 4.0 * sigma,
            "pi0 {} vs g {}",
            pi0.mean,
            g.ratio
        );
    }

    #[test]
    fn pi_j_zero_reproduces_pi0_exactly() {
        let model = two_site(0.6, 1.0, 0.0);
        let engine = McEngine::new(34, 4, 1500).unwrap();
        let o = SpaceTimePoint::new(0.0, 0);
        let x = SpaceTimePoint::new(0.4, 1);
        let flat = estimate_pi0(&model, o, x, &engine).unwrap();
        let nested = estimate_pi_j(&model, 0, o, x, &engine).unwrap();
        assert_eq!(nested.outer.mean, flat.mean);
        assert_eq!(nested.outer.std_error, flat.std_error);
        assert_eq!(nested.outer_samples, engine.total_samples());
        assert!(nested.inner_samples > 0);
    }

    #[test]
    fn pi1_is_nonnegative_and_records_inner_draws() {
        let model = two_site(0.5, 0.8, 0.0);
        let engine = McEngine::new(35, 8, 1200).unwrap();
        let o = SpaceTimePoint::new(0.0, 0);
        let x = SpaceTimePoint::new(0.0, 1);
        let est = estimate_pi_j(&model, 1, o, x, &engine).unwrap();
        assert!(
            est.outer.mean >= -4.0 * est.outer.std_error,
            "pi1 {} +- {}",
            est.outer.mean,
            est.outer.std_error
        );
        assert!(est.outer.mean.abs() > 0.0, "kernel should not be identically zero");
        assert!(est.inner_samples > 0);
    }

    #[test]
    fn pi_j_rejects_deeper_nesting() {
        let model = two_site(0.5, 1.0, 0.0);
        let engine = McEngine::new(36, 2, 10).unwrap();
        let p = SpaceTimePoint::new(0.0, 0);
        assert!(estimate_pi_j(&model, 2, p, p, &engine).is_err());
    }

    #[test]
    fn convolve_zero_kernel_gives_zero() {
        let model = ring4(0.4, 1.0, 0.0);
        let lat = &model.lattice;
        let a = coupling_table(&model, 4);
        let b = KernelTable::zeros(4, 4);
        let out = convolve(lat, &a, &b).unwrap();
        assert_eq!(out, KernelTable::zeros(4, 4));
    }

    #[test]
    fn convolve_single_bond_shifts_and_scales() {
        let model = ring4(0.4, 1.0, 0.0);
        let lat = &model.lattice;
        let n = 4;
        let mut a = KernelTable::zeros(3, n);
        for i in 0..3 {
            a.values[i][1] = 2.5; // delta at displacement +1
        }
        let mut b = KernelTable::zeros(3, n);
        for i in 0..3 {
            for x in 0..n {
                b.values[i][x] = (1 + i * n + x) as f64;
            }
        }
        let out = convolve(lat, &a, &b).unwrap();
        for i in 0..3 {
            for x in 0..n {
                let back = lat.translate(x, &[-1]);
                assert!((out.values[i][x] - 2.5 * b.values[i][back]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn convolve_is_associative_on_tabulated_kernels() {
        let model = ring4(0.5, 0.7, 0.0);
        let lat = &model.lattice;
        let mut stream = Stream::sample_stream(101, 0, 0);
        let mut rand_table = |n_t: usize| {
            let mut k = KernelTable::zeros(n_t, 4);
            for row in k.values.iter_mut() {
                for v in row.iter_mut() {
                    *v = stream.uniform() - 0.5;
                }
            }
            k
        };
        let j1 = rand_table(5);
        let g = rand_table(5);
        let j2 = rand_table(5);
        let left = convolve(lat, &convolve(lat, &j1, &g).unwrap(), &j2).unwrap();
        let right = convolve(lat, &j1, &convolve(lat, &g, &j2).unwrap()).unwrap();
        for i in 0..5 {
            for x in 0..4 {
                assert!((left.values[i][x] - right.values[i][x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convolve_rejects_mesh_mismatch() {
        let model = ring4(0.4, 1.0, 0.0);
        let lat = &model.lattice;
        let a = KernelTable::zeros(4, 4);
        let b = KernelTable::zeros(5, 4);
        assert!(convolve(lat, &a, &b).is_err());
        let c = KernelTable::zeros(4, 2);
        assert!(convolve(lat, &a, &c).is_err());
    }

    #[test]
    fn compose_of_constant_tables_multiplies_means() {
        // Composition with the uniform time measure: two tables constant in
        // time and space compose to (sum over sites) * product.
        let model = ring4(0.4, 1.0, 0.0);
        let lat = &model.lattice;
        let mut a = KernelTable::zeros(6, 4);
        let mut b = KernelTable::zeros(6, 4);
        for i in 0..6 {
            for x in 0..4 {
                a.values[i][x] = 0.3;
                b.values[i][x] = 1.7;
            }
        }
        let out = compose(lat, &a, &b).unwrap();
        for i in 0..6 {
            for x in 0..4 {
                assert!((out.values[i][x] - 0.3 * 1.7 * 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn g_table_matches_single_point_estimator() {
        let model = two_site(0.55, 1.0, 0.35);
        let engine = McEngine::new(37, 6, 1200).unwrap();
        let n_t = 8;
        let table = estimate_g_table(&model, &engine, n_t).unwrap();
        let i = 3;
        let t = i as f64 / n_t as f64;
        let point = estimate_g(
            &model,
            SpaceTimePoint::new(0.0, 0),
            SpaceTimePoint::new(t, 1),
            &engine,
        );
        assert!((table.means.values[i][1] - point.ratio).abs() < 1e-14);
        assert!((table.std_errors.values[i][1] - point.std_error).abs() < 1e-14);
    }

    #[test]
    fn kernel_csv_has_header_and_full_mesh() {
        let model = two_site(0.5, 1.0, 0.0);
        let engine = McEngine::new(38, 4, 200).unwrap();
        let table = estimate_g_table(&model, &engine, 4).unwrap();
        let csv = table.csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x,mean,std_error");
        assert_eq!(lines.len(), 1 + 4 * 2);
        for line in &lines[1..] {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 4);
            assert!(fields[0].parse::<f64>().is_ok());
            assert!(fields[2].parse::<f64>().is_ok());
        }
    }

    #[test]
    fn first_order_recursion_closes_from_shared_samples() {
        // G - pi0 - pi0 * (beta J) * G = -R with R >= 0; all tables are
        // estimated from one channel set so the residual can be jackknifed.
        let beta = 0.35;
        let model = two_site(beta, 1.0, 0.0);
        let lat = model.lattice.clone();
        let n = 2;
        let n_t = 8;
        let region = Region::full(n);
        let o = SpaceTimePoint::new(0.0, 0);
        let empty = SourceSet::empty();
        let engine = McEngine::new(39, 8, 6000).unwrap();
        // channels: g numerators, pi0 numerators, g denominator, pair denominator
        let g_den = 2 * n_t * n;
        let p_den = g_den + 1;
        let stats = run_mc_multi(&engine, p_den + 1, |stream, out| {
            let (b1, m1) = sample_configuration(&model, &region, stream);
            let (b2, m2) = sample_configuration(&model, &region, stream);
            let f1 = b1.site_flips(&model);
            let f2 = b2.site_flips(&model);
            let n1e = total_count(&region, &f1, &m1, &empty);
            let n2e = total_count(&region, &f2, &m2, &empty);
            out[g_den] = n1e;
            out[p_den] = n1e * n2e;
            let mut merged = b1.flatten(&model);
            merged.extend(b2.flatten(&model));
            let graph = IntervalGraph::from_parts(region.clone(), merged, vec![Vec::new(); n]);
            for i in 0..n_t {
                let t = i as f64 / n_t as f64;
                for xs in 0..n {
                    let x = SpaceTimePoint::new(t, xs);
                    let nsrc = total_count(&region, &f1, &m1, &SourceSet::of(&[o, x]));
                    out[i * n + xs] = nsrc;
                    out[n_t * n + i * n + xs] = if graph.doubly_connected(o, x) {
                        nsrc * n2e
                    } else {
                        0.0
                    };
                }
            }
        });
        let jt = coupling_table(&model, n_t);
        let residual_at = |m: &[f64], i: usize, xs: usize| -> f64 {
            let mut g = KernelTable::zeros(n_t, n);
            let mut p = KernelTable::zeros(n_t, n);
            for k in 0..n_t {
                for y in 0..n {
                    g.values[k][y] = m[k * n + y] / m[g_den];
                    p.values[k][y] = m[n_t * n + k * n + y] / m[p_den];
                }
            }
            let term = compose(&lat, &convolve(&lat, &p, &jt).unwrap(), &g).unwrap();
            g.values[i][xs] - p.values[i][xs] - term.values[i][xs]
        };
        for i in 0..n_t {
            for xs in 0..n {
                let est = stats.derive(|m| residual_at(m, i, xs));
                assert!(
                    est.mean <= 4.0 * est.std_error,
                    "closure at ({i},{xs}): residual {} +- {}",
                    est.mean,
                    est.std_error
                );
            }
        }
    }
}
