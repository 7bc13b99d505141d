//! Poisson sampling and replica Monte Carlo.
//!
//! Every random draw is keyed: a sample's stream is a pure function of
//! (master seed, replica index, sample index), and nested estimators derive
//! child streams from their parent key. Results are therefore independent of
//! scheduling, and the rayon and sequential drivers produce byte-identical
//! output.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::spacetime::{all_times_distinct, BridgeConfig, MarkConfig, Region};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn mix2(a: u64, b: u64) -> u64 {
    splitmix(splitmix(a) ^ b.wrapping_mul(0x9e3779b97f4a7c15) ^ 0x6a09e667f3bcc909)
}

/// Keyed random stream. Construction from a key is deterministic; child
/// streams are keyed by (parent key, child counter).
pub struct Stream {
    rng: ChaCha8Rng,
    key: u64,
    children: u64,
}

impl Stream {
    pub fn from_key(key: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(key),
            key,
            children: 0,
        }
    }

    /// Stream for one sample of one replica.
    pub fn sample_stream(master_seed: u64, replica: u64, sample: u64) -> Self {
        Self::from_key(mix2(mix2(master_seed, replica), sample))
    }

    /// Deterministic child stream (for nested estimators).
    pub fn child(&mut self) -> Stream {
        let key = mix2(self.key ^ 0x517cc1b727220a95, self.children);
        self.children += 1;
        Stream::from_key(key)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        let d = Poisson::new(mean).expect("positive finite mean");
        d.sample(&mut self.rng) as u64
    }

    pub fn range(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.rng.random_range(0..n)
    }

    /// Index drawn proportionally to nonnegative weights.
    pub fn pick_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "weights must have positive mass");
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

/// Bridges on every bond: a Poisson process of intensity `beta*J_b` on the
/// intersection of the endpoint domains.
pub fn sample_bridges(model: &Model, region: &Region, stream: &mut Stream) -> BridgeConfig {
    let mut cfg = BridgeConfig::empty(model.bonds().len());
    for (b, bond) in model.bonds().iter().enumerate() {
        let intensity = model.bridge_intensity(bond);
        let mut times = Vec::new();
        sample_on_region(
            &region.intersect_sites(bond.u, bond.v),
            intensity,
            stream,
            &mut times,
        );
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cfg.per_bond[b] = times;
    }
    cfg
}

/// Poisson points of the given intensity on a site region, appended to
/// `times` unsorted.
fn sample_on_region(
    support: &crate::spacetime::SiteRegion,
    intensity: f64,
    stream: &mut Stream,
    times: &mut Vec<f64>,
) {
    match support {
        crate::spacetime::SiteRegion::Full => {
            let n = stream.poisson(intensity);
            for _ in 0..n {
                times.push(stream.uniform());
            }
        }
        crate::spacetime::SiteRegion::Arcs(arcs) => {
            for arc in arcs {
                let n = stream.poisson(intensity * arc.len());
                for _ in 0..n {
                    times.push(crate::spacetime::wrap_time(
                        arc.start() + stream.uniform() * arc.len(),
                    ));
                }
            }
        }
    }
}

/// Marks at every site: a Poisson process of intensity `2*beta*q` on the
/// site's domain.
pub fn sample_marks(model: &Model, region: &Region, stream: &mut Stream) -> MarkConfig {
    let intensity = model.mark_intensity();
    let mut cfg = MarkConfig::empty(model.lattice.n_sites());
    if intensity <= 0.0 {
        return cfg;
    }
    for z in 0..model.lattice.n_sites() {
        let mut times = Vec::new();
        sample_on_region(region.site(z), intensity, stream, &mut times);
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cfg.per_site[z] = times;
    }
    cfg
}

/// Draw a configuration, rejecting the measure-zero event of an exact time
/// collision.
pub fn sample_configuration(
    model: &Model,
    region: &Region,
    stream: &mut Stream,
) -> (BridgeConfig, MarkConfig) {
    for _ in 0..64 {
        let bridges = sample_bridges(model, region, stream);
        let marks = sample_marks(model, region, stream);
        if all_times_distinct(&bridges, &marks) {
            return (bridges, marks);
        }
    }
    unreachable!("persistent time collisions; broken stream");
}

/// Monte Carlo driver parameters.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct McEngine {
    pub seed: u64,
    pub replicas: u64,
    pub samples_per_replica: u64,
}

impl McEngine {
    pub fn new(seed: u64, replicas: u64, samples_per_replica: u64) -> Result<Self> {
        if replicas < 2 {
            return Err(Error::InvalidParameter(
                "need at least 2 replicas for error bars".into(),
            ));
        }
        if samples_per_replica == 0 {
            return Err(Error::InvalidParameter("samples must be positive".into()));
        }
        Ok(Self {
            seed,
            replicas,
            samples_per_replica,
        })
    }

    pub fn total_samples(&self) -> u64 {
        self.replicas * self.samples_per_replica
    }
}

/// A Monte Carlo mean with its replica-based standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: u64,
    pub seed: u64,
}

impl Estimate {
    pub fn exact(value: f64, n_samples: u64, seed: u64) -> Self {
        Self {
            mean: value,
            std_error: 0.0,
            n_samples,
            seed,
        }
    }

    /// Absolute deviation in units of combined standard error; `inf` when
    /// both errors vanish and the values differ.
    pub fn sigma_from(&self, reference: f64) -> f64 {
        let d = (self.mean - reference).abs();
        if self.std_error > 0.0 {
            d / self.std_error
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Per-replica means of a vector of raw statistics. Derived quantities are
/// evaluated at the grand mean, with standard errors from leave-one-replica-
/// out jackknife (exact for linear functionals, delta-method accurate for
/// smooth ones such as ratios).
#[derive(Debug, Clone)]
pub struct ReplicaStats {
    pub replica_means: Vec<Vec<f64>>,
    pub samples_per_replica: u64,
    pub seed: u64,
}

impl ReplicaStats {
    pub fn n_replicas(&self) -> usize {
        self.replica_means.len()
    }

    pub fn total_samples(&self) -> u64 {
        self.samples_per_replica * self.replica_means.len() as u64
    }

    pub fn grand_means(&self) -> Vec<f64> {
        let r = self.replica_means.len();
        let dim = self.replica_means[0].len();
        let mut g = vec![0.0; dim];
        for rm in &self.replica_means {
            for (gi, &v) in g.iter_mut().zip(rm.iter()) {
                *gi += v;
            }
        }
        for gi in g.iter_mut() {
            *gi /= r as f64;
        }
        g
    }

    /// Estimate `g(means)` with jackknife standard error.
    pub fn derive<F: Fn(&[f64]) -> f64>(&self, g: F) -> Estimate {
        let r = self.replica_means.len();
        assert!(r >= 2);
        let grand = self.grand_means();
        let mean = g(&grand);
        let dim = grand.len();
        let mut loo = vec![0.0; dim];
        let mut thetas = Vec::with_capacity(r);
        for i in 0..r {
            for k in 0..dim {
                loo[k] = (grand[k] * r as f64 - self.replica_means[i][k]) / (r as f64 - 1.0);
            }
            thetas.push(g(&loo));
        }
        let tbar: f64 = thetas.iter().sum::<f64>() / r as f64;
        let var: f64 = thetas.iter().map(|t| (t - tbar) * (t - tbar)).sum::<f64>() * (r as f64 - 1.0)
            / r as f64;
        Estimate {
            mean,
            std_error: var.max(0.0).sqrt(),
            n_samples: self.total_samples(),
            seed: self.seed,
        }
    }

    /// Jackknife a vector-valued functional of the means in one pass: the
    /// functional fills `out` from a mean vector, and is evaluated once on
    /// the grand means and once per leave-one-replica-out vector. Returns
    /// `(means, std_errors)`, entrywise identical to calling [`derive`] with
    /// each component separately.
    ///
    /// [`derive`]: ReplicaStats::derive
    pub fn derive_many<F: Fn(&[f64], &mut [f64])>(
        &self,
        dim_out: usize,
        g: F,
    ) -> (Vec<f64>, Vec<f64>) {
        let r = self.replica_means.len();
        assert!(r >= 2);
        let grand = self.grand_means();
        let dim = grand.len();
        let mut means = vec![0.0; dim_out];
        g(&grand, &mut means);
        let mut loo = vec![0.0; dim];
        let mut thetas = vec![vec![0.0; dim_out]; r];
        for (i, theta) in thetas.iter_mut().enumerate() {
            for k in 0..dim {
                loo[k] = (grand[k] * r as f64 - self.replica_means[i][k]) / (r as f64 - 1.0);
            }
            g(&loo, theta);
        }
        let mut errs = vec![0.0; dim_out];
        for (k, err) in errs.iter_mut().enumerate() {
            let tbar: f64 = thetas.iter().map(|t| t[k]).sum::<f64>() / r as f64;
            let var: f64 = thetas.iter().map(|t| (t[k] - tbar) * (t[k] - tbar)).sum::<f64>()
                * (r as f64 - 1.0)
                / r as f64;
            *err = var.max(0.0).sqrt();
        }
        (means, errs)
    }

    /// Estimate of one raw component.
    pub fn component(&self, k: usize) -> Estimate {
        self.derive(|m| m[k])
    }

    /// Ratio of two raw components.
    pub fn ratio(&self, num: usize, den: usize) -> Estimate {
        self.derive(|m| m[num] / m[den])
    }
}

fn replica_means<F>(engine: &McEngine, dim: usize, f: &F, replica: u64) -> Vec<f64>
where
    F: Fn(&mut Stream, &mut [f64]),
{
    let mut acc = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    for s in 0..engine.samples_per_replica {
        let mut stream = Stream::sample_stream(engine.seed, replica, s);
        scratch.iter_mut().for_each(|v| *v = 0.0);
        f(&mut stream, &mut scratch);
        for (a, &v) in acc.iter_mut().zip(scratch.iter()) {
            *a += v;
        }
    }
    let n = engine.samples_per_replica as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    acc
}

/// Sequential replica driver (always available; the benchmark baseline).
pub fn run_mc_multi_seq<F>(engine: &McEngine, dim: usize, f: F) -> ReplicaStats
where
    F: Fn(&mut Stream, &mut [f64]) + Sync,
{
    let means: Vec<Vec<f64>> = (0..engine.replicas)
        .map(|r| replica_means(engine, dim, &f, r))
        .collect();
    ReplicaStats {
        replica_means: means,
        samples_per_replica: engine.samples_per_replica,
        seed: engine.seed,
    }
}

/// Replica driver: rayon when the `parallel` feature is enabled, sequential
/// otherwise. Replica outputs are collected in index order, so the result is
/// identical either way.
pub fn run_mc_multi<F>(engine: &McEngine, dim: usize, f: F) -> ReplicaStats
where
    F: Fn(&mut Stream, &mut [f64]) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        let means: Vec<Vec<f64>> = (0..engine.replicas)
            .into_par_iter()
            .map(|r| replica_means(engine, dim, &f, r))
            .collect();
        ReplicaStats {
            replica_means: means,
            samples_per_replica: engine.samples_per_replica,
            seed: engine.seed,
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_mc_multi_seq(engine, dim, f)
    }
}

/// Scalar convenience wrapper.
pub fn run_mc<F>(engine: &McEngine, f: F) -> Estimate
where
    F: Fn(&mut Stream) -> f64 + Sync,
{
    run_mc_multi(engine, 1, |s, out| out[0] = f(s)).component(0)
}

/// Sample a rate-`lambda` Poisson process on the unit circle, sorted.
pub fn sample_unit_circle_process(lambda: f64, stream: &mut Stream) -> Vec<f64> {
    let n = stream.poisson(lambda);
    let mut ts: Vec<f64> = (0..n).map(|_| stream.uniform()).collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts
}

/// Both sides of the Mecke identity for a Poisson process on the circle:
/// the expected sum of `f(config, point)` over configuration points equals
/// `lambda` times the expectation of `f` with an independently inserted
/// uniform point.
pub fn mecke_check<F>(
    lambda: f64,
    f: F,
    engine: &McEngine,
) -> (Estimate, Estimate)
where
    F: Fn(&[f64], f64) -> f64 + Sync,
{
    let stats = run_mc_multi(engine, 2, |stream, out| {
        let config = sample_unit_circle_process(lambda, stream);
        let mut lhs = 0.0;
        for &t in &config {
            lhs += f(&config, t);
        }
        let u = stream.uniform();
        let mut augmented = config.clone();
        augmented.push(u);
        augmented.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out[0] = lhs;
        out[1] = lambda * f(&augmented, u);
    });
    (stats.component(0), stats.component(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CouplingSpec, SpatialLattice};
    use crate::spacetime::{SiteRegion, TimeArc};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn model(beta: f64, q: f64) -> Model {
        Model::new(
            SpatialLattice::new(1, 2).unwrap(),
            CouplingSpec::NearestNeighbor { j: 1.0 },
            beta,
            q,
        )
        .unwrap()
    }

    #[test]
    fn streams_are_reproducible_and_decorrelated() {
        let mut a = Stream::sample_stream(7, 3, 11);
        let mut b = Stream::sample_stream(7, 3, 11);
        for _ in 0..32 {
            assert_eq!(a.uniform(), b.uniform());
        }
        let mut c = Stream::sample_stream(7, 3, 12);
        assert_ne!(a.uniform(), c.uniform());
        // child streams differ from parent and from each other
        let mut p = Stream::sample_stream(7, 0, 0);
        let mut k1 = p.child();
        let mut k2 = p.child();
        assert_ne!(k1.uniform(), k2.uniform());
    }

    #[test]
    fn poisson_counts_pass_goodness_of_fit() {
        let lambda = 1.7;
        let n = 100_000usize;
        let mut stream = Stream::from_key(42);
        let mut counts = vec![0u64; 12];
        for _ in 0..n {
            let k = stream.poisson(lambda) as usize;
            let bin = k.min(counts.len() - 1);
            counts[bin] += 1;
        }
        // expected Poisson(lambda) probabilities with pooled tail
        let mut probs = vec![0.0; counts.len()];
        let mut p = (-lambda).exp();
        let mut cum = 0.0;
        for (k, slot) in probs.iter_mut().enumerate() {
            if k < counts.len() - 1 {
                *slot = p;
                cum += p;
                p *= lambda / (k as f64 + 1.0);
            } else {
                *slot = 1.0 - cum;
            }
        }
        let mut stat = 0.0;
        let mut dof = 0usize;
        for (obs, pr) in counts.iter().zip(probs.iter()) {
            let exp = pr * n as f64;
            if exp >= 5.0 {
                stat += (*obs as f64 - exp).powi(2) / exp;
                dof += 1;
            }
        }
        let chi = ChiSquared::new((dof - 1) as f64).unwrap();
        let threshold = chi.inverse_cdf(1.0 - 1e-3);
        assert!(stat < threshold, "chi2 {stat} >= {threshold}");
    }

    #[test]
    fn bridges_respect_restricted_supports() {
        let model = model(0.8, 0.5);
        let mut region = Region::full(4);
        region.set_site(1, SiteRegion::Arcs(vec![TimeArc::new(0.0, 0.25)]));
        let mut stream = Stream::from_key(5);
        for _ in 0..200 {
            let bridges = sample_bridges(&model, &region, &mut stream);
            for (b, times) in bridges.per_bond.iter().enumerate() {
                let bond = model.bonds()[b];
                for &t in times {
                    assert!(region.site(bond.u).contains(t));
                    assert!(region.site(bond.v).contains(t));
                }
            }
            let marks = sample_marks(&model, &region, &mut stream);
            for (z, times) in marks.per_site.iter().enumerate() {
                for &t in times {
                    assert!(region.site(z).contains(t));
                }
            }
        }
    }

    #[test]
    fn empirical_bridge_rate_matches_intensity() {
        let model = model(0.6, 0.0);
        let region = Region::full(4);
        let n = 20_000;
        let mut stream = Stream::from_key(9);
        let mut total = 0usize;
        for _ in 0..n {
            total += sample_bridges(&model, &region, &mut stream).n_bridges();
        }
        let expect = model.beta * model.total_bond_strength();
        let mean = total as f64 / n as f64;
        let sigma = (expect / n as f64).sqrt();
        assert!((mean - expect).abs() < 4.0 * sigma, "{mean} vs {expect}");
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let engine = McEngine::new(123, 4, 100).unwrap();
        let f = |s: &mut Stream, out: &mut [f64]| {
            out[0] = s.uniform();
            out[1] = s.uniform() * s.uniform();
        };
        let a = run_mc_multi(&engine, 2, f);
        let b = run_mc_multi_seq(&engine, 2, f);
        assert_eq!(a.replica_means, b.replica_means);
    }

    #[test]
    fn jackknife_matches_direct_for_linear() {
        let engine = McEngine::new(1, 16, 50).unwrap();
        let stats = run_mc_multi(&engine, 1, |s, out| out[0] = s.uniform());
        let est = stats.component(0);
        // direct replica-mean spread
        let means: Vec<f64> = stats.replica_means.iter().map(|m| m[0]).collect();
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>()
            / (means.len() as f64 - 1.0)
            / means.len() as f64;
        assert!((est.mean - grand).abs() < 1e-15);
        assert!((est.std_error - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn derive_many_matches_scalar_derive_bitwise() {
        let engine = McEngine::new(9, 6, 80).unwrap();
        let stats = run_mc_multi(&engine, 3, |s, out| {
            out[0] = s.uniform();
            out[1] = 1.0 + s.uniform();
            out[2] = s.uniform() * s.uniform();
        });
        let (means, errs) = stats.derive_many(2, |m, out| {
            out[0] = m[0] / m[1];
            out[1] = m[2] - m[0] * m[0];
        });
        let a = stats.derive(|m| m[0] / m[1]);
        let b = stats.derive(|m| m[2] - m[0] * m[0]);
        assert_eq!(means[0], a.mean);
        assert_eq!(errs[0], a.std_error);
        assert_eq!(means[1], b.mean);
        assert_eq!(errs[1], b.std_error);
    }

    #[test]
    fn replica_doubling_shrinks_errors_like_clt() {
        // over meta-trials, doubling the replica count at fixed per-replica
        // samples should shrink the standard error by about sqrt(2)
        let mut ratios = Vec::new();
        for trial in 0..100u64 {
            let e1 = McEngine::new(1000 + trial, 8, 32).unwrap();
            let e2 = McEngine::new(1000 + trial, 16, 32).unwrap();
            let f = |s: &mut Stream, out: &mut [f64]| {
                out[0] = (s.uniform() * std::f64::consts::TAU).sin().powi(2)
            };
            let a = run_mc_multi(&e1, 1, f).component(0);
            let b = run_mc_multi(&e2, 1, f).component(0);
            if b.std_error > 0.0 {
                ratios.push(a.std_error / b.std_error);
            }
        }
        let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(
            (mean_ratio - std::f64::consts::SQRT_2).abs() < 0.15,
            "mean ratio {mean_ratio}"
        );
    }

    #[test]
    fn mecke_identity_count_functional() {
        let engine = McEngine::new(77, 16, 2000).unwrap();
        // f = 1: lhs is E[N] = lambda, rhs is lambda exactly
        let (lhs, rhs) = mecke_check(1.3, |_, _| 1.0, &engine);
        assert_eq!(rhs.std_error, 0.0);
        assert!((rhs.mean - 1.3).abs() < 1e-12);
        assert!(lhs.sigma_from(1.3) < 4.0);
        // lambda = 0: both vanish identically
        let (lhs0, rhs0) = mecke_check(0.0, |_, _| 1.0, &engine);
        assert_eq!(lhs0.mean, 0.0);
        assert_eq!(rhs0.mean, 0.0);
        assert_eq!(lhs0.std_error, 0.0);
    }
}
