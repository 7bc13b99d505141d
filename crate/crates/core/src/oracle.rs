//! Exact ground truth on small volumes via dense diagonalization.
//!
//! Spins carry the two-valued 3rd-component basis, so the 1st and 3rd
//! component operators square to the identity (eigenvalues are +1/-1). All
//! imaginary-time expectations reduce to sums over eigenpairs of the
//! Hamiltonian, which keeps the time integral for the susceptibility in
//! closed form and removes quadrature error from the reference values.

use std::cell::RefCell;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::model::{Bond, Model};
use crate::quad;
use crate::spacetime::SpaceTimePoint;
use crate::{Error, Result};

/// Largest volume accepted for dense computations.
pub const MAX_DENSE_SITES: usize = 12;

/// Operator insertions supported by the time-ordered evaluator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    /// 3rd spin component at one site (diagonal).
    S3(usize),
    /// 1st spin component at one site (bit flip).
    S1(usize),
    /// Equal-time product of the 3rd components at two sites (diagonal).
    S3Pair(usize, usize),
    /// Sum of the 3rd component over all sites (diagonal).
    S3Sum,
    /// Sum of the 1st component over all sites.
    S1Sum,
}

/// One operator insertion on the unit imaginary-time circle.
#[derive(Clone, Copy, Debug)]
pub struct Insertion {
    pub t: f64,
    pub op: OpKind,
}

impl Insertion {
    pub fn new(t: f64, op: OpKind) -> Self {
        Self { t, op }
    }
}

/// Spin value (+1/-1) of site `x` in the packed basis state `b`.
fn spin(b: usize, x: usize) -> f64 {
    if b >> x & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Dense Hamiltonian `-sum_b J_b S3_u S3_v - q sum_x S1_x` on `n_sites`
/// spins. Basis index bit `x` encodes the 3rd component at site `x`.
pub fn hamiltonian(n_sites: usize, bonds: &[Bond], q: f64) -> DMatrix<f64> {
    let dim = 1usize << n_sites;
    let mut h = DMatrix::zeros(dim, dim);
    for b in 0..dim {
        let mut e = 0.0;
        for bond in bonds {
            e -= bond.j * spin(b, bond.u) * spin(b, bond.v);
        }
        h[(b, b)] = e;
        for x in 0..n_sites {
            h[(b ^ (1 << x), b)] -= q;
        }
    }
    h
}

/// Spectral data and operator cache for one `(bonds, beta, q)` point.
pub struct DenseOracle {
    n_sites: usize,
    dim: usize,
    beta: f64,
    q: f64,
    bonds: Vec<Bond>,
    /// Eigenvalues shifted so the smallest is zero.
    evals: DVector<f64>,
    /// Orthonormal eigenvectors, one per column.
    evecs: DMatrix<f64>,
    /// Partition function with the shifted spectrum.
    z: f64,
    ops: RefCell<HashMap<OpKind, DMatrix<f64>>>,
}

impl DenseOracle {
    pub fn new(model: &Model) -> Result<Self> {
        Self::from_parts(model.lattice.n_sites(), model.bonds(), model.beta, model.q)
    }

    pub fn from_parts(n_sites: usize, bonds: &[Bond], beta: f64, q: f64) -> Result<Self> {
        if n_sites == 0 || n_sites > MAX_DENSE_SITES {
            return Err(Error::InvalidParameter(format!(
                "dense computations support 1..={MAX_DENSE_SITES} sites, got {n_sites}"
            )));
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "inverse temperature must be finite and nonnegative, got {beta}"
            )));
        }
        for b in bonds {
            if b.u >= n_sites || b.v >= n_sites {
                return Err(Error::InvalidParameter(format!(
                    "bond ({}, {}) outside volume of {n_sites} sites",
                    b.u, b.v
                )));
            }
        }
        let h = hamiltonian(n_sites, bonds, q);
        let h_norm = h.norm();
        let eig = nalgebra::SymmetricEigen::new(h.clone());
        let recon = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues)
            * eig.eigenvectors.transpose();
        assert!(
            (recon - &h).norm() <= 1e-10 * (1.0 + h_norm),
            "eigendecomposition failed to reconstruct the Hamiltonian"
        );
        let e0 = eig.eigenvalues.min();
        let evals = eig.eigenvalues.map(|e| e - e0);
        let z = evals.iter().map(|&e| (-beta * e).exp()).sum();
        Ok(Self {
            n_sites,
            dim: 1 << n_sites,
            beta,
            q,
            bonds: bonds.to_vec(),
            evals,
            evecs: eig.eigenvectors,
            z,
            ops: RefCell::new(HashMap::new()),
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    /// Operator matrix rotated into the eigenbasis.
    fn build_op(&self, kind: OpKind) -> DMatrix<f64> {
        let dim = self.dim;
        // First apply the operator to the eigenvector columns, then project.
        let applied = match kind {
            OpKind::S3(x) => {
                DMatrix::from_fn(dim, dim, |b, n| spin(b, x) * self.evecs[(b, n)])
            }
            OpKind::S3Pair(u, v) => DMatrix::from_fn(dim, dim, |b, n| {
                spin(b, u) * spin(b, v) * self.evecs[(b, n)]
            }),
            OpKind::S3Sum => DMatrix::from_fn(dim, dim, |b, n| {
                (0..self.n_sites).map(|x| spin(b, x)).sum::<f64>() * self.evecs[(b, n)]
            }),
            OpKind::S1(x) => {
                DMatrix::from_fn(dim, dim, |b, n| self.evecs[(b ^ (1 << x), n)])
            }
            OpKind::S1Sum => DMatrix::from_fn(dim, dim, |b, n| {
                (0..self.n_sites)
                    .map(|x| self.evecs[(b ^ (1 << x), n)])
                    .sum::<f64>()
            }),
        };
        self.evecs.transpose() * applied
    }

    fn ensure_op(&self, kind: OpKind) {
        if !self.ops.borrow().contains_key(&kind) {
            let m = self.build_op(kind);
            self.ops.borrow_mut().insert(kind, m);
        }
    }

    /// Boltzmann propagation weight for a time gap `g`.
    fn gap_weight(&self, g: f64, n: usize) -> f64 {
        (-g * self.beta * self.evals[n]).exp()
    }

    /// Expectation of a time-ordered product of insertions on the unit
    /// circle: operators are sorted by time (stable for ties) and joined by
    /// Boltzmann factors over the gaps, with the last gap wrapping around.
    pub fn time_ordered(&self, insertions: &[Insertion]) -> f64 {
        assert!(!insertions.is_empty(), "need at least one insertion");
        for ins in insertions {
            assert!(
                ins.t >= 0.0 && ins.t < 1.0 + 1e-12,
                "insertion time {} outside the unit circle",
                ins.t
            );
            self.ensure_op(ins.op);
        }
        let ops = self.ops.borrow();
        let mut order: Vec<usize> = (0..insertions.len()).collect();
        order.sort_by(|&a, &b| insertions[a].t.total_cmp(&insertions[b].t));
        let k = order.len();
        let mut m = ops[&insertions[order[0]].op].clone();
        for step in 1..k {
            let gap = insertions[order[step]].t - insertions[order[step - 1]].t;
            for n in 0..self.dim {
                let w = self.gap_weight(gap, n);
                for r in 0..self.dim {
                    m[(r, n)] *= w;
                }
            }
            m *= &ops[&insertions[order[step]].op];
        }
        let last_gap = 1.0 - insertions[order[k - 1]].t + insertions[order[0]].t;
        let mut tr = 0.0;
        for n in 0..self.dim {
            tr += m[(n, n)] * self.gap_weight(last_gap, n);
        }
        tr / self.z
    }

    /// Alias for a plain (possibly multi-operator) expectation.
    pub fn expectation(&self, insertions: &[Insertion]) -> f64 {
        self.time_ordered(insertions)
    }

    /// Truncated expectation `<A B> - <A><B>` where `A` and `B` are the two
    /// insertion groups with their absolute times.
    pub fn truncated(&self, a: &[Insertion], b: &[Insertion]) -> f64 {
        let mut joint = a.to_vec();
        joint.extend_from_slice(b);
        self.time_ordered(&joint) - self.time_ordered(a) * self.time_ordered(b)
    }

    /// Two-point function of the 3rd component: one insertion at time 0 on
    /// site `o`, the other at time `t` on site `x`.
    pub fn exact_g(&self, o: usize, x: usize, t: f64) -> f64 {
        self.time_ordered(&[
            Insertion::new(0.0, OpKind::S3(o)),
            Insertion::new(t, OpKind::S3(x)),
        ])
    }

    /// Two-point function between arbitrary space-time points.
    pub fn g_points(&self, a: SpaceTimePoint, b: SpaceTimePoint) -> f64 {
        self.time_ordered(&[
            Insertion::new(a.t, OpKind::S3(a.site)),
            Insertion::new(b.t, OpKind::S3(b.site)),
        ])
    }

    /// One-point function of the 1st component (time independent).
    pub fn exact_one_point_s1(&self, y: usize) -> f64 {
        self.expectation(&[Insertion::new(0.0, OpKind::S1(y))])
    }

    /// Susceptibility: the two-point function summed over sites and
    /// integrated in time, with the integral done in closed form per
    /// eigenpair.
    pub fn exact_chi(&self) -> f64 {
        self.exact_chi_at_beta(self.beta)
    }

    /// Susceptibility at a different inverse temperature, reusing the
    /// spectral decomposition (valid because the Hamiltonian does not
    /// depend on it).
    pub fn exact_chi_at_beta(&self, beta: f64) -> f64 {
        self.ensure_op(OpKind::S3(0));
        self.ensure_op(OpKind::S3Sum);
        let ops = self.ops.borrow();
        let ao = &ops[&OpKind::S3(0)];
        let asum = &ops[&OpKind::S3Sum];
        let z: f64 = self.evals.iter().map(|&e| (-beta * e).exp()).sum();
        let mut total = 0.0;
        for m in 0..self.dim {
            let wm = (-beta * self.evals[m]).exp();
            for n in 0..self.dim {
                // integral over the insertion time of the gap weights
                let dz = beta * (self.evals[m] - self.evals[n]);
                let phi = if dz.abs() < 1e-8 {
                    1.0 + 0.5 * dz
                } else {
                    dz.exp_m1() / dz
                };
                total += ao[(m, n)] * asum[(n, m)] * wm * phi;
            }
        }
        total / z
    }

    /// Four-point truncated combination used by the coupling-derivative
    /// inequalities: `<S3_w S3_x; S3_y S3_z> - G(w,y)G(x,z) - G(w,z)G(x,y)`.
    pub fn f4(
        &self,
        w: SpaceTimePoint,
        x: SpaceTimePoint,
        y: SpaceTimePoint,
        z: SpaceTimePoint,
    ) -> f64 {
        let t4 = self.truncated(
            &[s3_at(w), s3_at(x)],
            &[s3_at(y), s3_at(z)],
        );
        t4 - self.g_points(w, y) * self.g_points(x, z)
            - self.g_points(w, z) * self.g_points(x, y)
    }

    /// Same combination evaluated with the two pairs swapped; equal to
    /// [`Self::f4`] by symmetry of the trace, so the difference measures
    /// numerical error.
    pub fn f4_swapped(
        &self,
        w: SpaceTimePoint,
        x: SpaceTimePoint,
        y: SpaceTimePoint,
        z: SpaceTimePoint,
    ) -> f64 {
        let t4 = self.truncated(
            &[s3_at(y), s3_at(z)],
            &[s3_at(w), s3_at(x)],
        );
        t4 - self.g_points(y, w) * self.g_points(z, x)
            - self.g_points(y, x) * self.g_points(z, w)
    }

    /// Mixed truncated combination used by the field-derivative
    /// inequalities: `<S3_w S3_x; S1_y> + 2 G(w,y) G(y,x)`.
    pub fn f3(&self, w: SpaceTimePoint, x: SpaceTimePoint, y: SpaceTimePoint) -> f64 {
        let t3 = self.truncated(
            &[s3_at(w), s3_at(x)],
            &[Insertion::new(y.t, OpKind::S1(y.site))],
        );
        t3 + 2.0 * self.g_points(w, y) * self.g_points(y, x)
    }

    /// Finite-volume bubble: time integral of the site sum of the squared
    /// two-point function, by Gauss-Legendre quadrature (the integrand is
    /// analytic in the insertion time).
    pub fn bubble(&self, nodes: usize) -> f64 {
        quad::integrate_gl(nodes, 0.0, 1.0, |t| {
            (0..self.n_sites)
                .map(|x| self.exact_g(0, x, t).powi(2))
                .sum::<f64>()
        })
    }

    /// Inner double integral of the derivative formulas: site-summed
    /// four-point expectation with the pair insertion at a second time,
    /// split at the kink where the two times cross.
    fn duhamel_term(&self, op: OpKind, nodes: usize) -> f64 {
        quad::integrate_gl(nodes, 0.0, 1.0, |t| {
            quad::integrate_piecewise(nodes, &[t], |s| {
                self.time_ordered(&[
                    Insertion::new(0.0, OpKind::S3(0)),
                    Insertion::new(t, OpKind::S3Sum),
                    Insertion::new(s, op),
                ])
            })
        })
    }

    /// Susceptibility derivatives, each both by the integral formula
    /// (quadrature over correlators) and by central finite differences of
    /// the closed-form susceptibility.
    pub fn exact_derivatives(&self, nodes: usize) -> ChiDerivatives {
        assert!(self.beta > 0.0, "derivative chain rule needs beta > 0");
        let chi = self.exact_chi();
        let mut by_bond = Vec::with_capacity(self.bonds.len());
        for b in &self.bonds {
            let pair = OpKind::S3Pair(b.u, b.v);
            let equal_time = self.expectation(&[Insertion::new(0.0, pair)]);
            let connected = self.duhamel_term(pair, nodes) - chi * equal_time;
            by_bond.push(self.beta * connected);
        }
        let s1_static = self.expectation(&[Insertion::new(0.0, OpKind::S1Sum)]);
        let by_q =
            self.beta * (self.duhamel_term(OpKind::S1Sum, nodes) - chi * s1_static);

        let h = 1e-5;
        let fd_by_bond: Vec<f64> = (0..self.bonds.len())
            .map(|i| {
                let chi_at = |dj: f64| {
                    let mut bonds = self.bonds.clone();
                    bonds[i].j += dj;
                    DenseOracle::from_parts(self.n_sites, &bonds, self.beta, self.q)
                        .expect("perturbed volume stays valid")
                        .exact_chi()
                };
                (chi_at(h) - chi_at(-h)) / (2.0 * h)
            })
            .collect();
        let chi_at_q = |dq: f64| {
            DenseOracle::from_parts(self.n_sites, &self.bonds, self.beta, self.q + dq)
                .expect("perturbed field stays valid")
                .exact_chi()
        };
        let fd_by_q = (chi_at_q(h) - chi_at_q(-h)) / (2.0 * h);
        let by_beta =
            (self.exact_chi_at_beta(self.beta + h) - self.exact_chi_at_beta(self.beta - h))
                / (2.0 * h);

        let mut chain_residual = by_beta;
        for (b, d) in self.bonds.iter().zip(&by_bond) {
            chain_residual -= b.j / self.beta * d;
        }
        chain_residual += self.q / self.beta * (-by_q);

        ChiDerivatives {
            by_bond,
            by_q,
            by_beta,
            fd_by_bond,
            fd_by_q,
            chain_residual,
        }
    }
}

fn s3_at(p: SpaceTimePoint) -> Insertion {
    Insertion::new(p.t, OpKind::S3(p.site))
}

/// Susceptibility derivatives with their finite-difference cross-checks.
#[derive(Clone, Debug)]
pub struct ChiDerivatives {
    /// Per-bond coupling derivative by the integral formula.
    pub by_bond: Vec<f64>,
    /// Field derivative by the integral formula.
    pub by_q: f64,
    /// Inverse-temperature derivative by central finite differences.
    pub by_beta: f64,
    /// Per-bond coupling derivative by central finite differences.
    pub fd_by_bond: Vec<f64>,
    /// Field derivative by central finite differences.
    pub fd_by_q: f64,
    /// Residual of the scaling identity relating the three derivative
    /// families; zero in exact arithmetic.
    pub chain_residual: f64,
}

impl ChiDerivatives {
    /// Largest relative gap between the formula and finite-difference
    /// values over all computed derivatives.
    pub fn max_relative_gap(&self) -> f64 {
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-9);
        let mut worst = rel(self.by_q, self.fd_by_q);
        for (a, b) in self.by_bond.iter().zip(&self.fd_by_bond) {
            worst = worst.max(rel(*a, *b));
        }
        worst
    }
}

/// Symmetric-matrix exponential via spectral decomposition.
pub fn matrix_exp_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(
        (a - a.transpose()).norm() <= 1e-10 * (1.0 + a.norm()),
        "matrix exponential helper requires a symmetric input"
    );
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    let exp_d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::exp));
    &eig.eigenvectors * exp_d * eig.eigenvectors.transpose()
}

/// Derivative of the matrix exponential along a one-parameter symmetric
/// family, evaluated two ways: central finite differences of the
/// exponential (left), and the interpolation integral of the sandwiched
/// derivative by 128-node Gauss-Legendre quadrature (right).
pub fn wilcox_check<F: Fn(f64) -> DMatrix<f64>>(
    family: F,
    alpha0: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = 1e-5;
    let a_plus = family(alpha0 + h);
    let a_minus = family(alpha0 - h);
    let lhs = (matrix_exp_sym(&a_plus) - matrix_exp_sym(&a_minus)) / (2.0 * h);
    let da = (&a_plus - &a_minus) / (2.0 * h);

    let a0 = family(alpha0);
    let eig = nalgebra::SymmetricEigen::new(a0.clone());
    let v = &eig.eigenvectors;
    let e = &eig.eigenvalues;
    let b = v.transpose() * &da * v;
    let dim = b.nrows();
    let mut acc = DMatrix::zeros(dim, dim);
    for (t, w) in quad::gauss_legendre(128)
        .iter()
        .map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w))
    {
        for r in 0..dim {
            for c in 0..dim {
                acc[(r, c)] += w * (t * e[r]).exp() * b[(r, c)] * ((1.0 - t) * e[c]).exp();
            }
        }
    }
    let rhs = v * acc * v.transpose();
    (lhs, rhs)
}

/// Classical (diagonal) susceptibility by brute force over all spin
/// configurations; equals the dense value when the transverse field is
/// absent.
pub fn classical_chi(n_sites: usize, bonds: &[Bond], beta: f64) -> f64 {
    assert!(n_sites >= 1 && n_sites <= 16, "brute force capped at 16 sites");
    let count = 1usize << n_sites;
    let e_shift: f64 = bonds.iter().map(|b| b.j.abs()).sum();
    let mut z = 0.0;
    let mut corr = 0.0;
    for cfg in 0..count {
        let mut e = 0.0;
        for b in bonds {
            e += b.j * spin(cfg, b.u) * spin(cfg, b.v);
        }
        let w = (beta * (e - e_shift)).exp();
        z += w;
        for x in 0..n_sites {
            corr += w * spin(cfg, 0) * spin(cfg, x);
        }
    }
    corr / z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CouplingSpec, SpatialLattice};

    fn ring4(beta: f64, j: f64, q: f64) -> DenseOracle {
        let lat = SpatialLattice::new(1, 2).unwrap();
        let model = Model::new(lat, CouplingSpec::NearestNeighbor { j }, beta, q).unwrap();
        DenseOracle::new(&model).unwrap()
    }

    fn pt(t: f64, site: usize) -> SpaceTimePoint {
        SpaceTimePoint { t, site }
    }

    #[test]
    fn hamiltonian_matches_small_cases() {
        let h = hamiltonian(1, &[], 1.0);
        assert_eq!(h.nrows(), 2);
        assert_eq!(h[(0, 0)], 0.0);
        assert_eq!(h[(0, 1)], -1.0);
        assert_eq!(h[(1, 0)], -1.0);
        assert_eq!(h[(1, 1)], 0.0);

        let h = hamiltonian(2, &[Bond { u: 0, v: 1, j: 1.0 }], 0.0);
        let diag: Vec<f64> = (0..4).map(|b| h[(b, b)]).collect();
        assert_eq!(diag, vec![-1.0, 1.0, 1.0, -1.0]);
        assert_eq!((&h - h.transpose()).norm(), 0.0);
    }

    #[test]
    fn volume_cap_enforced() {
        assert!(DenseOracle::from_parts(13, &[], 1.0, 0.5).is_err());
        assert!(DenseOracle::from_parts(0, &[], 1.0, 0.5).is_err());
        assert!(DenseOracle::from_parts(2, &[Bond { u: 0, v: 5, j: 1.0 }], 1.0, 0.0).is_err());
    }

    #[test]
    fn single_site_g_closed_form() {
        let beta = 1.0;
        let q = 0.7;
        let oracle = DenseOracle::from_parts(1, &[], beta, q).unwrap();
        for &t in &[0.0, 0.1, 0.25, 0.5, 0.75, 0.9] {
            let expect = ((1.0 - 2.0 * t) * beta * q).cosh() / (beta * q).cosh();
            let got = oracle.exact_g(0, 0, t);
            assert!((got - expect).abs() < 1e-12, "t={t}: {got} vs {expect}");
        }
    }

    #[test]
    fn two_site_no_field_g_and_chi() {
        let beta = 0.5;
        let j = 1.0;
        let oracle = DenseOracle::from_parts(2, &[Bond { u: 0, v: 1, j }], beta, 0.0).unwrap();
        for &t in &[0.0, 0.3, 0.6] {
            let g = oracle.exact_g(0, 1, t);
            assert!((g - (beta * j).tanh()).abs() < 1e-12, "t={t}: {g}");
            assert!((oracle.exact_g(0, 0, t) - 1.0).abs() < 1e-12);
        }
        assert!((oracle.exact_chi() - (1.0 + (beta * j).tanh())).abs() < 1e-12);
    }

    #[test]
    fn chi_at_zero_beta_is_one() {
        let oracle = DenseOracle::from_parts(3, &[Bond { u: 0, v: 1, j: 1.0 }], 0.0, 0.4).unwrap();
        assert!((oracle.exact_chi() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chi_closed_form_matches_quadrature() {
        let oracle = ring4(0.4, 1.0, 0.3);
        let by_quad = quad::integrate_gl(64, 0.0, 1.0, |t| {
            (0..4).map(|x| oracle.exact_g(0, x, t)).sum::<f64>()
        });
        assert!((oracle.exact_chi() - by_quad).abs() < 1e-12);
    }

    #[test]
    fn no_field_chi_matches_classical_brute_force() {
        for (d, l) in [(1usize, 2usize), (2, 1)] {
            let lat = SpatialLattice::new(d, l).unwrap();
            let model = Model::new(
                lat,
                CouplingSpec::NearestNeighbor { j: 0.8 },
                0.45,
                0.0,
            )
            .unwrap();
            let oracle = DenseOracle::new(&model).unwrap();
            let classical =
                classical_chi(model.lattice.n_sites(), model.bonds(), model.beta);
            assert!(
                (oracle.exact_chi() - classical).abs() < 1e-10,
                "d={d} l={l}: {} vs {classical}",
                oracle.exact_chi()
            );
        }
    }

    #[test]
    fn one_point_s1_is_tanh_on_single_site() {
        let beta = 0.9;
        let q = 0.6;
        let oracle = DenseOracle::from_parts(1, &[], beta, q).unwrap();
        assert!((oracle.exact_one_point_s1(0) - (beta * q).tanh()).abs() < 1e-12);
        let s3 = oracle.expectation(&[Insertion::new(0.0, OpKind::S3(0))]);
        assert!(s3.abs() < 1e-12);
    }

    #[test]
    fn g_time_reversal_and_range() {
        let oracle = ring4(0.4, 1.0, 0.3);
        for x in 0..4 {
            for &t in &[0.1, 0.25, 0.4] {
                let a = oracle.exact_g(0, x, t);
                let b = oracle.exact_g(0, x, 1.0 - t);
                assert!((a - b).abs() < 1e-10, "x={x} t={t}");
                assert!(a >= -1e-12 && a <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn f4_two_evaluations_agree_and_sign() {
        let oracle = ring4(0.4, 1.0, 0.3);
        let cases = [
            (pt(0.0, 0), pt(0.25, 1), pt(0.5, 2), pt(0.75, 3)),
            (pt(0.1, 0), pt(0.1, 0), pt(0.4, 1), pt(0.7, 2)),
            (pt(0.0, 0), pt(0.5, 2), pt(0.2, 1), pt(0.9, 3)),
        ];
        for (w, x, y, z) in cases {
            let a = oracle.f4(w, x, y, z);
            let b = oracle.f4_swapped(w, x, y, z);
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            assert!(a <= 1e-10, "fourth truncated combination must be <= 0: {a}");
        }
    }

    #[test]
    fn f3_nonnegative() {
        let oracle = ring4(0.4, 1.0, 0.3);
        let cases = [
            (pt(0.0, 0), pt(0.3, 1), pt(0.6, 2)),
            (pt(0.2, 1), pt(0.2, 1), pt(0.8, 3)),
            (pt(0.0, 0), pt(0.5, 2), pt(0.1, 0)),
        ];
        for (w, x, y) in cases {
            let v = oracle.f3(w, x, y);
            assert!(v >= -1e-10, "mixed truncated combination must be >= 0: {v}");
        }
    }

    #[test]
    fn bubble_single_site_closed_form() {
        let beta = 1.0;
        let q = 0.7;
        let oracle = DenseOracle::from_parts(1, &[], beta, q).unwrap();
        let bq = beta * q;
        let expect = (1.0 + (2.0 * bq).sinh() / (2.0 * bq)) / (2.0 * bq.cosh().powi(2));
        assert!((oracle.bubble(64) - expect).abs() < 1e-12);

        let no_field = DenseOracle::from_parts(1, &[], 1.0, 0.0).unwrap();
        assert!((no_field.bubble(32) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wilcox_commuting_family_exact() {
        let b = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, -0.2]);
        let fam = |alpha: f64| &b * alpha;
        let (lhs, rhs) = wilcox_check(fam, 0.7);
        let expect = &b * matrix_exp_sym(&(&b * 0.7));
        assert!((&rhs - &expect).norm() < 1e-9 * expect.norm());
        assert!((lhs - rhs).norm() < 1e-9);
    }

    #[test]
    fn wilcox_zero_derivative() {
        let b = DMatrix::from_row_slice(2, 2, &[0.4, 0.2, 0.2, 0.1]);
        let fam = move |_alpha: f64| b.clone();
        let (lhs, rhs) = wilcox_check(fam, 0.3);
        assert!(lhs.norm() < 1e-10);
        assert!(rhs.norm() < 1e-10);
    }

    #[test]
    fn derivative_formula_matches_finite_differences() {
        let oracle = ring4(0.4, 1.0, 0.3);
        let d = oracle.exact_derivatives(32);
        assert!(
            d.max_relative_gap() < 1e-6,
            "gap {}",
            d.max_relative_gap()
        );
        assert!(d.chain_residual.abs() < 1e-8, "residual {}", d.chain_residual);
        for v in &d.by_bond {
            assert!(*v >= -1e-10, "coupling derivatives stay nonnegative: {v}");
        }
        assert!(d.by_q <= 1e-10, "field derivative stays nonpositive: {}", d.by_q);
    }

    #[test]
    fn two_site_coupling_derivative_closed_form() {
        let beta = 0.35;
        let j = 0.9;
        let oracle = DenseOracle::from_parts(2, &[Bond { u: 0, v: 1, j }], beta, 0.0).unwrap();
        let d = oracle.exact_derivatives(32);
        let expect = beta / (beta * j).cosh().powi(2);
        assert!((d.by_bond[0] - expect).abs() < 1e-8, "{} vs {expect}", d.by_bond[0]);
    }

    #[test]
    fn equal_time_products_collapse_without_field() {
        let oracle = DenseOracle::from_parts(2, &[Bond { u: 0, v: 1, j: 1.0 }], 0.5, 0.0).unwrap();
        let v = oracle.expectation(&[
            Insertion::new(0.2, OpKind::S3(0)),
            Insertion::new(0.6, OpKind::S3(0)),
        ]);
        assert!((v - 1.0).abs() < 1e-12);
    }
}
