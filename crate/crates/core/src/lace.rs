//! Consistency checks tying the expansion kernels back to the two-point
//! function, and size-restricted kernel bounds from the walk decomposition.
//!
//! Two families of checks live here. `recursion_residual` tabulates, from
//! shared samples, the two-point table, the kernel tables up to a given
//! order, their alternating sum, its coupling composition with the two-point
//! table, and the signed residual closing the identity; the residual must be
//! nonnegative and capped by the composition built from the highest kernel
//! alone, entrywise within jackknife error. `check_pi0_n1`/`check_pi0_n2`
//! split the order-zero kernel by the size of the minimal interval cover of
//! the connecting walk: every doubly connected pair admits exactly one such
//! cover, the single-interval part is bounded by the cubed two-point
//! function, and the two-interval part by a nine-term sum of convolution
//! diagrams over the mesh.

use serde::Serialize;
use serde_json::{json, Value};

use crate::connectivity::{backbone, build_lace, IntervalGraph};
use crate::error::{Error, Result};
use crate::estimators::{
    compose, convolve, coupling_table, random_member, shift_table, total_count, KernelEstimate,
    KernelTable, INNER_CONFIG_DRAWS, PAIR_ENUM_BUDGET, PAIR_SUBSAMPLE_DRAWS,
};
use crate::model::Model;
use crate::sampler::{run_mc_multi, sample_configuration, Estimate, McEngine, ReplicaStats, Stream};
use crate::spacetime::{
    enumerate_compatible, Bridge, BridgeConfig, Region, SourceSet, SpaceTimePoint, Trajectory,
    TrajectoryEnsemble,
};

/// Interval-cover sizes are tallied into this many buckets; the last bucket
/// absorbs every size at or beyond it.
pub const LACE_SIZE_BUCKETS: usize = 8;

/// Width of the acceptance window for one-sided bounds, in standard errors.
pub const BOUND_SIGMA: f64 = 4.0;

/// Entrywise tables closing the kernel identity at one truncation order.
///
/// All tables come from the same sample stream, so the residual
/// `remainder = sign * (g - alternating_sum - convolution)` carries
/// correlated jackknife errors much tighter than the individual tables.
/// `lower_ok`/`upper_ok` record, per mesh entry, whether the residual is
/// nonnegative and capped by `remainder_cap` within [`BOUND_SIGMA`] errors.
#[derive(Debug, Clone, Serialize)]
pub struct RecursionReport {
    pub j: usize,
    pub g: KernelEstimate,
    pub coefficients: Vec<KernelEstimate>,
    pub alternating_sum: KernelEstimate,
    pub convolution: KernelEstimate,
    pub remainder: KernelEstimate,
    pub remainder_cap: KernelEstimate,
    pub upper_slack: KernelEstimate,
    pub lower_ok: Vec<Vec<bool>>,
    pub upper_ok: Vec<Vec<bool>>,
}

impl RecursionReport {
    pub fn entries(&self) -> usize {
        self.g.means.n_t * self.g.means.n_sites()
    }

    pub fn lower_violations(&self) -> usize {
        self.lower_ok.iter().flatten().filter(|ok| !**ok).count()
    }

    pub fn upper_violations(&self) -> usize {
        self.upper_ok.iter().flatten().filter(|ok| !**ok).count()
    }

    pub fn bounds_hold(&self) -> bool {
        self.lower_violations() == 0 && self.upper_violations() == 0
    }

    /// Largest excess beyond the error window over all entries and both
    /// sides; zero when every bound holds.
    pub fn max_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        let n_t = self.remainder.means.n_t;
        let n = self.remainder.means.n_sites();
        for i in 0..n_t {
            for x in 0..n {
                let lo = -(self.remainder.means.values[i][x]
                    + BOUND_SIGMA * self.remainder.std_errors.values[i][x]);
                let hi = -(self.upper_slack.means.values[i][x]
                    + BOUND_SIGMA * self.upper_slack.std_errors.values[i][x]);
                worst = worst.max(lo).max(hi);
            }
        }
        worst
    }

    /// One row per mesh entry, deterministic full-precision floats.
    pub fn csv(&self) -> String {
        let mut s = String::from(
            "t,x,g,g_err,kernel_sum,kernel_sum_err,convolution,convolution_err,\
             remainder,remainder_err,cap,cap_err,lower_ok,upper_ok\n",
        );
        let n_t = self.g.means.n_t;
        let n = self.g.means.n_sites();
        for i in 0..n_t {
            for x in 0..n {
                s.push_str(&format!(
                    "{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},\
                     {:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
                    self.g.means.time(i),
                    x,
                    self.g.means.values[i][x],
                    self.g.std_errors.values[i][x],
                    self.alternating_sum.means.values[i][x],
                    self.alternating_sum.std_errors.values[i][x],
                    self.convolution.means.values[i][x],
                    self.convolution.std_errors.values[i][x],
                    self.remainder.means.values[i][x],
                    self.remainder.std_errors.values[i][x],
                    self.remainder_cap.means.values[i][x],
                    self.remainder_cap.std_errors.values[i][x],
                    u8::from(self.lower_ok[i][x]),
                    u8::from(self.upper_ok[i][x]),
                ));
            }
        }
        s
    }

    pub fn summary(&self) -> Value {
        json!({
            "j": self.j,
            "entries": self.entries(),
            "lower_violations": self.lower_violations(),
            "upper_violations": self.upper_violations(),
            "bounds_hold": self.bounds_hold(),
            "max_violation": self.max_violation(),
            "max_abs_remainder": self.remainder.means.max_abs(),
            "n_samples": self.g.n_samples,
        })
    }
}

/// Truncation sign: the residual at order `j` enters the identity with
/// `(-1)^(j+1)`, so flipping by this factor makes it nonnegative.
fn residual_sign(j: usize) -> f64 {
    if j % 2 == 0 {
        -1.0
    } else {
        1.0
    }
}

fn table_sub(a: &KernelTable, b: &KernelTable) -> KernelTable {
    let mut out = a.clone();
    for (row, brow) in out.values.iter_mut().zip(&b.values) {
        for (v, bv) in row.iter_mut().zip(brow) {
            *v -= bv;
        }
    }
    out
}

/// Tabulates the kernel identity at truncation order `j` (`j <= 1`) on the
/// `n_t`-point grid and checks the two-sided residual bound entrywise.
///
/// The two-point table, the kernels, and the composed term all come from one
/// pass of shared samples; every derived table is jackknifed as a whole over
/// replicas. The `j = 1` run nests a conditional stage per mesh entry from
/// one shared inner stream, so its cost scales with the mesh size.
pub fn recursion_residual(
    model: &Model,
    engine: &McEngine,
    n_t: usize,
    j: usize,
) -> Result<RecursionReport> {
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
    if n_t == 0 {
        return Err(Error::InvalidParameter("empty time grid".into()));
    }
    let n = model.lattice.n_sites();
    let m = n_t * n;
    let region = Region::full(n);
    let o = SpaceTimePoint::new(0.0, 0);
    let g_den = (2 + j) * m;
    let pair_den = g_den + 1;
    let dim = pair_den + 1 + usize::from(j == 1);

    let bond_weights: Vec<f64> = model.bonds().iter().map(|b| b.j).collect();
    if j == 1 && bond_weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidParameter(
            "order-one kernel needs at least one coupled bond".into(),
        ));
    }
    let mecke_weight = model.beta * model.total_bond_strength();

    let stats = run_mc_multi(engine, dim, |stream, out| {
        let (b1, m1) = sample_configuration(model, &region, stream);
        let (b2, m2) = sample_configuration(model, &region, stream);
        let f1 = b1.site_flips(model);
        let f2 = b2.site_flips(model);
        let empty = SourceSet::empty();
        let n1e = total_count(&region, &f1, &m1, &empty);
        let n2e = total_count(&region, &f2, &m2, &empty);
        out[g_den] = n1e;
        out[pair_den] = n1e * n2e;

        let mut merged12 = b1.flatten(model);
        merged12.extend(b2.flatten(model));
        let g12 = IntervalGraph::from_parts(region.clone(), merged12, vec![Vec::new(); n]);
        for i in 0..n_t {
            let t = i as f64 / n_t as f64;
            for xs in 0..n {
                let x = SpaceTimePoint::new(t, xs);
                let gv = total_count(&region, &f1, &m1, &SourceSet::of(&[o, x]));
                out[i * n + xs] = gv;
                if g12.doubly_connected(o, x) {
                    out[m + i * n + xs] = gv * n2e;
                }
            }
        }
        if j == 0 {
            return;
        }

        // One conditioned stage, importance-sampled at a coupling-weighted
        // bridge, evaluated for every mesh target from shared inner draws.
        let bond = model.bonds()[stream.pick_weighted(&bond_weights)];
        let tb = stream.uniform();
        let pu = SpaceTimePoint::new(tb, bond.u);
        let pv = SpaceTimePoint::new(tb, bond.v);
        let mut stages: Vec<(SpaceTimePoint, f64)> = Vec::with_capacity(2);
        for (u, v) in [(pu, pv), (pv, pu)] {
            if !g12.doubly_connected(o, u) {
                continue;
            }
            let outer = total_count(&region, &f1, &m1, &SourceSet::of(&[o, u])) * n2e;
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
        let mut inner_num = vec![vec![0.0; m]; stages.len()];
        let mut inner_den = 0.0;
        for _ in 0..INNER_CONFIG_DRAWS {
            let (b3, m3) = sample_configuration(model, &region, &mut inner);
            let (b4, m4) = sample_configuration(model, &free, &mut inner);
            let f3 = b3.site_flips(model);
            let f4 = b4.site_flips(model);
            let n3e = total_count(&region, &f3, &m3, &empty);
            let n4e = total_count(&free, &f4, &m4, &empty);
            inner_den += n3e * n4e;
            if n4e == 0.0 {
                continue;
            }
            let mut merged34 = b3.flatten(model);
            merged34.extend(b4.flatten(model));
            let g34 = IntervalGraph::from_parts(region.clone(), merged34, vec![Vec::new(); n]);
            let g34f = g34.restricted(&free);
            for ((v, _), row) in stages.iter().zip(inner_num.iter_mut()) {
                for i in 0..n_t {
                    let t = i as f64 / n_t as f64;
                    for xs in 0..n {
                        let x = SpaceTimePoint::new(t, xs);
                        if !mesh_stage_gate(&g34, &g34f, *v, x) {
                            continue;
                        }
                        row[i * n + xs] +=
                            total_count(&region, &f3, &m3, &SourceSet::of(&[*v, x])) * n4e;
                    }
                }
            }
        }
        out[pair_den + 1] = INNER_CONFIG_DRAWS as f64;
        if inner_den > 0.0 {
            for (k, slot) in out[2 * m..3 * m].iter_mut().enumerate() {
                let mut acc = 0.0;
                for ((_, outer), row) in stages.iter().zip(&inner_num) {
                    acc += outer * row[k] / inner_den;
                }
                *slot = mecke_weight * acc;
            }
        }
    });

    let grand = stats.grand_means();
    if grand[g_den] <= 0.0 || grand[pair_den] <= 0.0 {
        return Err(Error::Degenerate(
            "no compatible configurations sampled".into(),
        ));
    }

    let lat = &model.lattice;
    let jt = coupling_table(model, n_t);
    let sign = residual_sign(j);
    let grid = |ch: &[f64], base: usize, den: usize| -> KernelTable {
        let mut t = KernelTable::zeros(n_t, n);
        for i in 0..n_t {
            for xs in 0..n {
                t.values[i][xs] = ch[base + i * n + xs] / ch[den];
            }
        }
        t
    };

    // Slot order inside the jackknifed output vector.
    let s_alt = 2 + j;
    let s_conv = 3 + j;
    let s_rem = 4 + j;
    let s_cap = 5 + j;
    let s_slack = 6 + j;
    let n_slots = 7 + j;

    let (means, errs) = stats.derive_many(n_slots * m, |ch, out| {
        let g = grid(ch, 0, g_den);
        let coefs: Vec<KernelTable> = (0..=j).map(|k| grid(ch, (1 + k) * m, pair_den)).collect();
        let alt = if j == 0 {
            coefs[0].clone()
        } else {
            table_sub(&coefs[0], &coefs[1])
        };
        let conv = compose(lat, &convolve(lat, &alt, &jt).expect("grids match"), &g)
            .expect("grids match");
        let cap = compose(lat, &convolve(lat, &coefs[j], &jt).expect("grids match"), &g)
            .expect("grids match");
        let mut rem = KernelTable::zeros(n_t, n);
        for i in 0..n_t {
            for xs in 0..n {
                rem.values[i][xs] =
                    sign * (g.values[i][xs] - alt.values[i][xs] - conv.values[i][xs]);
            }
        }
        let slack = table_sub(&cap, &rem);
        let mut write = |slot: usize, t: &KernelTable| {
            for i in 0..n_t {
                out[slot * m + i * n..slot * m + (i + 1) * n].copy_from_slice(&t.values[i]);
            }
        };
        write(0, &g);
        for (k, c) in coefs.iter().enumerate() {
            write(1 + k, c);
        }
        write(s_alt, &alt);
        write(s_conv, &conv);
        write(s_rem, &rem);
        write(s_cap, &cap);
        write(s_slack, &slack);
    });

    let est = |slot: usize| -> KernelEstimate {
        let mut mt = KernelTable::zeros(n_t, n);
        let mut et = KernelTable::zeros(n_t, n);
        for i in 0..n_t {
            mt.values[i].copy_from_slice(&means[slot * m + i * n..slot * m + (i + 1) * n]);
            et.values[i].copy_from_slice(&errs[slot * m + i * n..slot * m + (i + 1) * n]);
        }
        KernelEstimate {
            means: mt,
            std_errors: et,
            n_samples: stats.total_samples(),
        }
    };

    let remainder = est(s_rem);
    let upper_slack = est(s_slack);
    let window = |e: &KernelEstimate, i: usize, x: usize| {
        e.means.values[i][x] >= -BOUND_SIGMA * e.std_errors.values[i][x]
    };
    let lower_ok = (0..n_t)
        .map(|i| (0..n).map(|x| window(&remainder, i, x)).collect())
        .collect();
    let upper_ok = (0..n_t)
        .map(|i| (0..n).map(|x| window(&upper_slack, i, x)).collect())
        .collect();

    Ok(RecursionReport {
        j,
        g: est(0),
        coefficients: (0..=j).map(|k| est(1 + k)).collect(),
        alternating_sum: est(s_alt),
        convolution: est(s_conv),
        remainder,
        remainder_cap: est(s_cap),
        upper_slack,
        lower_ok,
        upper_ok,
    })
}

/// [`estimators`]-equivalent stage gate with the restriction of the graph to
/// the free region prebuilt, so mesh sweeps do not rebuild it per target.
///
/// [`estimators`]: crate::estimators
fn mesh_stage_gate(
    graph: &IntervalGraph,
    free_graph: &IntervalGraph,
    v: SpaceTimePoint,
    x: SpaceTimePoint,
) -> bool {
    let through = |a: SpaceTimePoint, b: SpaceTimePoint| {
        graph.connected(a, b) && !free_graph.connected(a, b)
    };
    if !through(v, x) {
        return false;
    }
    graph.pivotal_bridges(v, x).iter().all(|ob| !through(v, ob.u))
}

/// One size-restricted kernel bound: the kernel restricted to interval
/// covers of [`size`] intervals, the diagrammatic bound for that size, their
/// slack, the gap between the size-partitioned kernel and the unrestricted
/// one, and the number of sampled trajectories violating the cover/double-
/// connection equivalence.
///
/// [`size`]: LaceBoundCheck::size
#[derive(Debug, Clone, Serialize)]
pub struct LaceBoundCheck {
    pub size: usize,
    pub restricted: Estimate,
    pub bound: Estimate,
    pub slack: Estimate,
    pub partition_gap: Estimate,
    pub mismatches: u64,
}

impl LaceBoundCheck {
    pub fn holds(&self) -> bool {
        self.slack.mean >= -BOUND_SIGMA * self.slack.std_error
            && self.partition_gap.sigma_from(0.0) <= BOUND_SIGMA
            && self.mismatches == 0
    }

    pub fn summary(&self) -> Value {
        json!({
            "size": self.size,
            "restricted": self.restricted.mean,
            "restricted_err": self.restricted.std_error,
            "bound": self.bound.mean,
            "bound_err": self.bound.std_error,
            "slack": self.slack.mean,
            "slack_err": self.slack.std_error,
            "partition_gap": self.partition_gap.mean,
            "partition_gap_err": self.partition_gap.std_error,
            "mismatches": self.mismatches,
            "holds": self.holds(),
        })
    }
}

/// Size of the minimal interval cover of the walk from `o` to `x` in the
/// first layer, with everything off the walk (both layers) as the side
/// graph; zero means no cover is needed beyond the walk itself. A degenerate
/// walk (`o == x`) counts as a single interval.
fn lace_walk_size(
    model: &Model,
    xi1: &BridgeConfig,
    psi1: &Trajectory,
    flat1: &[Bridge],
    flat2: &[Bridge],
    n_sites: usize,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
) -> usize {
    if o == x {
        return 1;
    }
    let bb = backbone(model, xi1, psi1, o, x)
        .expect("sources are switching times of every compatible trajectory");
    let mut rest: Vec<Bridge> = flat1
        .iter()
        .enumerate()
        .filter(|(id, _)| !bb.bridges.contains(id))
        .map(|(_, br)| *br)
        .collect();
    rest.extend_from_slice(flat2);
    let off_walk = IntervalGraph::from_parts(
        bb.complement_region(n_sites),
        rest,
        vec![Vec::new(); n_sites],
    );
    let lace = build_lace(&bb, &off_walk);
    if lace.is_sentinel() {
        0
    } else {
        lace.size()
    }
}

/// Channels shared by both size checks: pair normalization, unrestricted
/// kernel, per-size buckets, equivalence mismatches, two-point numerators
/// for the requested source sets with their own normalization, and the
/// per-configuration gap between the bucket split and the unrestricted
/// numerator (zero whenever the cover sizes partition the kernel).
fn lace_channels(
    model: &Model,
    region: &Region,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
    g_sources: &[SourceSet],
    stream: &mut Stream,
    out: &mut [f64],
) {
    let k = LACE_SIZE_BUCKETS;
    let n = region.n_sites();
    let (b1, m1) = sample_configuration(model, region, stream);
    let (b2, m2) = sample_configuration(model, region, stream);
    let f1 = b1.site_flips(model);
    let f2 = b2.site_flips(model);
    let empty = SourceSet::empty();
    let n1e = total_count(region, &f1, &m1, &empty);
    let n2e = total_count(region, &f2, &m2, &empty);
    out[0] = n1e * n2e;
    let gbase = 3 + k;
    for (i, src) in g_sources.iter().enumerate() {
        out[gbase + i] = total_count(region, &f1, &m1, src);
    }
    out[gbase + g_sources.len()] = n1e;
    if n2e == 0.0 {
        return;
    }
    let ens1 = enumerate_compatible(region, &f1, &m1, &SourceSet::of(&[o, x]));
    if ens1.is_empty() {
        return;
    }

    let flat1 = b1.flatten(model);
    let flat2 = b2.flatten(model);
    let mut merged = flat1.clone();
    merged.extend_from_slice(&flat2);
    let g12 = IntervalGraph::from_parts(region.clone(), merged, vec![Vec::new(); n]);
    let hit = g12.doubly_connected(o, x);
    if hit {
        out[1] = ens1.count() * n2e;
    }

    let (tally, mismatches, draws) =
        tally_cover_sizes(model, &b1, &ens1, &flat1, &flat2, n, o, x, hit, stream);
    let w = ens1.count() * n2e / draws;
    for (slot, &c) in tally.iter().enumerate() {
        out[2 + slot] = c as f64 * w;
    }
    out[2 + k] = mismatches as f64;
    let split: f64 = out[2..2 + k].iter().sum();
    out[gbase + g_sources.len() + 1] = split - out[1];
}

/// Tallies the interval-cover size of every first-layer trajectory (or of
/// [`PAIR_SUBSAMPLE_DRAWS`] uniform members when the ensemble exceeds
/// [`PAIR_ENUM_BUDGET`]), counting disagreements with the double-connection
/// indicator. Returns `(size buckets, mismatches, trajectories visited)`.
fn tally_cover_sizes(
    model: &Model,
    xi1: &BridgeConfig,
    ens1: &TrajectoryEnsemble,
    flat1: &[Bridge],
    flat2: &[Bridge],
    n_sites: usize,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
    hit: bool,
    stream: &mut Stream,
) -> (Vec<u64>, u64, f64) {
    let k = LACE_SIZE_BUCKETS;
    let mut tally = vec![0u64; k];
    let mut mismatches = 0u64;
    let mut record = |psi1: &Trajectory| {
        let size = lace_walk_size(model, xi1, psi1, flat1, flat2, n_sites, o, x);
        if (size >= 1) != hit {
            mismatches += 1;
        }
        if size >= 1 {
            tally[(size - 1).min(k - 1)] += 1;
        }
    };
    let draws = if ens1.n_choices() <= PAIR_ENUM_BUDGET {
        let mut count = 0u64;
        for psi1 in ens1.iter() {
            record(&psi1);
            count += 1;
        }
        count as f64
    } else {
        for _ in 0..PAIR_SUBSAMPLE_DRAWS {
            let psi1 = random_member(ens1, stream);
            record(&psi1);
        }
        PAIR_SUBSAMPLE_DRAWS as f64
    };
    (tally, mismatches, draws)
}

fn require_zero_field(model: &Model) -> Result<()> {
    if model.q != 0.0 {
        return Err(Error::InvalidParameter(
            "expansion kernels are defined at zero transverse field".into(),
        ));
    }
    Ok(())
}

fn lace_stats(
    model: &Model,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
    g_sources: &[SourceSet],
    engine: &McEngine,
) -> Result<ReplicaStats> {
    let region = Region::full(model.lattice.n_sites());
    let dim = 5 + LACE_SIZE_BUCKETS + g_sources.len();
    let stats = run_mc_multi(engine, dim, |stream, out| {
        lace_channels(model, &region, o, x, g_sources, stream, out);
    });
    let grand = stats.grand_means();
    if grand[0] <= 0.0 || grand[3 + LACE_SIZE_BUCKETS + g_sources.len()] <= 0.0 {
        return Err(Error::Degenerate(
            "no compatible configurations sampled".into(),
        ));
    }
    Ok(stats)
}

fn partition_estimates(
    stats: &ReplicaStats,
    n_g_sources: usize,
    total_samples: u64,
) -> (Estimate, u64) {
    let k = LACE_SIZE_BUCKETS;
    let gap_idx = 4 + k + n_g_sources;
    let gap = stats.derive(|mm| mm[gap_idx] / mm[0]);
    let mismatches = (stats.grand_means()[2 + k] * total_samples as f64).round() as u64;
    (gap, mismatches)
}

/// Checks the single-interval restriction of the order-zero kernel against
/// the cubed two-point function at the same pair, from shared samples, and
/// verifies per configuration that the cover sizes partition the kernel.
pub fn check_pi0_n1(
    model: &Model,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
    engine: &McEngine,
) -> Result<LaceBoundCheck> {
    require_zero_field(model)?;
    let g_sources = [SourceSet::of(&[o, x])];
    let stats = lace_stats(model, o, x, &g_sources, engine)?;
    let k = LACE_SIZE_BUCKETS;
    let (gi, gd) = (3 + k, 4 + k);
    let cube = move |mm: &[f64]| {
        let g = mm[gi] / mm[gd];
        g * g * g
    };
    let (partition_gap, mismatches) =
        partition_estimates(&stats, g_sources.len(), engine.total_samples());
    Ok(LaceBoundCheck {
        size: 1,
        restricted: stats.ratio(2, 0),
        bound: stats.derive(cube),
        slack: stats.derive(move |mm| cube(mm) - mm[2] / mm[0]),
        partition_gap,
        mismatches,
    })
}

fn mesh_index(t: f64, n_t: usize) -> Result<usize> {
    let scaled = t * n_t as f64;
    let idx = scaled.round();
    if (scaled - idx).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "time {t} does not lie on the {n_t}-point grid"
        )));
    }
    Ok(idx as usize % n_t)
}

/// Checks the two-interval restriction of the order-zero kernel against the
/// nine-term diagrammatic sum over the mesh: each of the two internal
/// vertices of a two-interval cover is reached by one of three bridge
/// embeddings (walk bridge on either side, or a second-layer bridge), and
/// each combination bounds its share by a product of two-point and
/// coupling-convolved two-point factors, averaged over the two internal
/// mesh times and summed over the internal sites.
pub fn check_pi0_n2(
    model: &Model,
    o: SpaceTimePoint,
    x: SpaceTimePoint,
    engine: &McEngine,
    n_t: usize,
) -> Result<LaceBoundCheck> {
    require_zero_field(model)?;
    if n_t == 0 {
        return Err(Error::InvalidParameter("empty time grid".into()));
    }
    let o_ti = mesh_index(o.t, n_t)?;
    let x_ti = mesh_index(x.t, n_t)?;
    let n = model.lattice.n_sites();
    let m = n_t * n;
    let origin = SpaceTimePoint::new(0.0, 0);
    let g_sources: Vec<SourceSet> = (0..n_t)
        .flat_map(|i| {
            (0..n).map(move |xs| {
                SourceSet::of(&[origin, SpaceTimePoint::new(i as f64 / n_t as f64, xs)])
            })
        })
        .collect();
    let stats = lace_stats(model, o, x, &g_sources, engine)?;
    let k = LACE_SIZE_BUCKETS;
    let gbase = 3 + k;
    let gden = gbase + m;

    let jt = coupling_table(model, n_t);
    let shift = shift_table(&model.lattice);
    let lat = &model.lattice;
    let op = (o_ti, o.site);
    let xp = (x_ti, x.site);
    let nine = move |mm: &[f64]| -> f64 {
        let mut g = KernelTable::zeros(n_t, n);
        for i in 0..n_t {
            for xs in 0..n {
                g.values[i][xs] = mm[gbase + i * n + xs] / mm[gden];
            }
        }
        let bjg = convolve(lat, &jt, &g).expect("grids match");
        let bjgj = convolve(lat, &bjg, &jt).expect("grids match");
        let ent = |t: &KernelTable, a: (usize, usize), b: (usize, usize)| -> f64 {
            t.values[(b.0 + n_t - a.0) % n_t][shift[a.1][b.1]]
        };
        let mut total = 0.0;
        for si in 0..n_t {
            for zs in 0..n {
                let z1 = (si, zs);
                let g_oz = ent(&g, op, z1);
                let gbj_oz = ent(&bjg, z1, op);
                let bjg_zx = ent(&bjg, z1, xp);
                let g_zx = ent(&g, z1, xp);
                let pre_b_z = g_oz * g_oz;
                let pre_i_z = g_oz * gbj_oz;
                for ti in 0..n_t {
                    for ys in 0..n {
                        let y2 = (ti, ys);
                        let g_yx = ent(&g, y2, xp);
                        let bjg_yx = ent(&bjg, y2, xp);
                        let g_oy = ent(&g, op, y2);
                        let gbj_oy = ent(&bjg, y2, op);
                        let g_yz = ent(&g, y2, z1);
                        let bjg_yz = ent(&bjg, y2, z1);
                        let gbj_yz = ent(&bjg, z1, y2);
                        let bb_yz = ent(&bjgj, y2, z1);
                        let pre_b_y = g_yx * g_yx;
                        let pre_i_y = g_yx * bjg_yx;
                        total += pre_b_y
                            * pre_b_z
                            * (g_oy * bjg_yz * bjg_zx
                                + g_oy * bb_yz * g_zx
                                + gbj_oy * g_yz * bjg_zx
                                + gbj_oy * gbj_yz * g_zx)
                            + pre_b_y * pre_i_z * (g_oy * bjg_yz + gbj_oy * g_yz) * g_zx
                            + pre_i_y * pre_b_z * g_oy * (g_yz * bjg_zx + gbj_yz * g_zx)
                            + pre_i_y * pre_i_z * g_oy * g_yz * g_zx;
                    }
                }
            }
        }
        total / (n_t as f64 * n_t as f64)
    };
    let (partition_gap, mismatches) =
        partition_estimates(&stats, g_sources.len(), engine.total_samples());
    Ok(LaceBoundCheck {
        size: 2,
        restricted: stats.ratio(3, 0),
        bound: stats.derive(&nine),
        slack: stats.derive(|mm| nine(mm) - mm[3] / mm[0]),
        partition_gap,
        mismatches,
    })
}
