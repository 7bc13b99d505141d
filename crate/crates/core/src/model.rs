//! Spatial torus, couplings, and model parameters.
//!
//! Sites live on `{0, .., 2L-1}^d` with periodic identification. Couplings
//! are functions of the torus displacement between two sites; a bond is an
//! unordered pair of distinct sites with nonzero coupling. On the side-2
//! torus the displacements `+e_i` and `-e_i` coincide, so each site has `d`
//! distinct nearest neighbours instead of `2d`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Finite torus `{0, .., side-1}^d`, `side = 2L` (or 1 for the single-site
/// system).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialLattice {
    d: usize,
    side: usize,
    n_sites: usize,
}

impl SpatialLattice {
    /// Torus `[-L, L]^d ∩ Z^d` with opposite faces identified: `(2L)^d` sites.
    pub fn new(d: usize, l: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be >= 1".into()));
        }
        if l == 0 {
            return Err(Error::InvalidParameter(
                "half-side L must be >= 1 (use single_site for one site)".into(),
            ));
        }
        let side = 2 * l;
        let n_sites = (side as u128).checked_pow(d as u32).ok_or_else(|| {
            Error::InvalidParameter(format!("lattice too large: side {side}, d {d}"))
        })?;
        if n_sites > 1 << 24 {
            return Err(Error::InvalidParameter(format!(
                "lattice too large: {n_sites} sites"
            )));
        }
        Ok(Self {
            d,
            side,
            n_sites: n_sites as usize,
        })
    }

    /// Degenerate one-site lattice (no bonds); used for single-spin checks.
    pub fn single_site() -> Self {
        Self {
            d: 1,
            side: 1,
            n_sites: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn coords(&self, index: usize) -> Vec<i32> {
        debug_assert!(index < self.n_sites);
        let mut c = vec![0i32; self.d];
        let mut rest = index;
        for slot in c.iter_mut() {
            *slot = (rest % self.side) as i32;
            rest /= self.side;
        }
        c
    }

    /// Site index of a coordinate vector, wrapping each component mod the side.
    pub fn index(&self, coords: &[i32]) -> usize {
        debug_assert_eq!(coords.len(), self.d);
        let mut idx = 0usize;
        for (axis, &c) in coords.iter().enumerate().rev() {
            let _ = axis;
            let w = c.rem_euclid(self.side as i32) as usize;
            idx = idx * self.side + w;
        }
        idx
    }

    /// Minimal l-infinity representative of `y - x` on the torus; each
    /// component lies in `(-side/2, side/2]`.
    pub fn displacement(&self, x: usize, y: usize) -> Vec<i32> {
        let cx = self.coords(x);
        let cy = self.coords(y);
        let half = (self.side / 2) as i32;
        cx.iter()
            .zip(cy.iter())
            .map(|(&a, &b)| {
                let mut r = (b - a).rem_euclid(self.side as i32);
                if r > half {
                    r -= self.side as i32;
                }
                r
            })
            .collect()
    }

    pub fn translate(&self, x: usize, disp: &[i32]) -> usize {
        let c = self.coords(x);
        let moved: Vec<i32> = c.iter().zip(disp.iter()).map(|(&a, &d)| a + d).collect();
        self.index(&moved)
    }

    /// All distinct nonzero torus displacements, one minimal representative
    /// per torus element.
    pub fn nonzero_displacements(&self) -> Vec<Vec<i32>> {
        let mut out = Vec::new();
        for raw in 1..self.n_sites {
            out.push(self.displacement(0, raw));
        }
        out
    }
}

/// Translation-invariant ferromagnetic coupling as a function of the torus
/// displacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CouplingSpec {
    /// `J` on displacements of l-1 norm 1, zero elsewhere.
    NearestNeighbor { j: f64 },
    /// Finite-range table keyed by displacement class (sorted absolute
    /// components, descending).
    FiniteRange { classes: Vec<(Vec<u32>, f64)> },
}

impl CouplingSpec {
    fn class_of(disp: &[i32]) -> Vec<u32> {
        let mut c: Vec<u32> = disp.iter().map(|&v| v.unsigned_abs()).collect();
        c.sort_unstable_by(|a, b| b.cmp(a));
        c
    }

    /// Coupling strength for a (minimal-representative) displacement.
    pub fn strength(&self, disp: &[i32]) -> f64 {
        if disp.iter().all(|&c| c == 0) {
            return 0.0;
        }
        match self {
            CouplingSpec::NearestNeighbor { j } => {
                let l1: u32 = disp.iter().map(|&v| v.unsigned_abs()).sum();
                if l1 == 1 {
                    *j
                } else {
                    0.0
                }
            }
            CouplingSpec::FiniteRange { classes } => {
                let key = Self::class_of(disp);
                classes
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, j)| *j)
                    .unwrap_or(0.0)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            CouplingSpec::NearestNeighbor { j } => *j >= 0.0 && j.is_finite(),
            CouplingSpec::FiniteRange { classes } => classes
                .iter()
                .all(|(k, j)| *j >= 0.0 && j.is_finite() && !k.iter().all(|&c| c == 0)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "couplings must be finite and nonnegative".into(),
            ))
        }
    }
}

/// Unordered pair of distinct sites with nonzero coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub u: usize,
    pub v: usize,
    pub j: f64,
}

/// Lattice, coupling, and thermodynamic parameters bundled for samplers and
/// estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub lattice: SpatialLattice,
    pub coupling: CouplingSpec,
    pub beta: f64,
    pub q: f64,
    bonds: Vec<Bond>,
}

impl Model {
    pub fn new(lattice: SpatialLattice, coupling: CouplingSpec, beta: f64, q: f64) -> Result<Self> {
        coupling.validate()?;
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "inverse temperature must be positive, got {beta}"
            )));
        }
        if q < 0.0 || !q.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "transverse field must be nonnegative, got {q}"
            )));
        }
        let bonds = enumerate_bonds(&lattice, &coupling);
        Ok(Self {
            lattice,
            coupling,
            beta,
            q,
            bonds,
        })
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    /// Coupling between two sites (zero for `x == y`).
    pub fn coupling_between(&self, x: usize, y: usize) -> f64 {
        if x == y {
            return 0.0;
        }
        self.coupling.strength(&self.lattice.displacement(x, y))
    }

    /// Fourier transform of the coupling at wave vector `2*pi*k_index/side`.
    pub fn j_hat(&self, k_index: &[i64]) -> f64 {
        j_hat(&self.lattice, &self.coupling, k_index)
    }

    /// `J_hat(0) = sum_x J_x`.
    pub fn j_hat_zero(&self) -> f64 {
        self.j_hat(&vec![0i64; self.lattice.dim()])
    }

    /// Total coupling mass `sum_b J_b = |Lambda| * J_hat(0) / 2`.
    pub fn total_bond_strength(&self) -> f64 {
        self.bonds.iter().map(|b| b.j).sum()
    }

    /// Poisson intensity of the bridge process on bond `b`.
    pub fn bridge_intensity(&self, bond: &Bond) -> f64 {
        self.beta * bond.j
    }

    /// Poisson intensity of the mark process at any site.
    pub fn mark_intensity(&self) -> f64 {
        2.0 * self.beta * self.q
    }
}

/// All bonds of the lattice under the given coupling, each unordered pair
/// once, ordered by `(u, v)`.
pub fn enumerate_bonds(lat: &SpatialLattice, spec: &CouplingSpec) -> Vec<Bond> {
    let mut map = std::collections::BTreeMap::new();
    for disp in lat.nonzero_displacements() {
        let j = spec.strength(&disp);
        if j == 0.0 {
            continue;
        }
        for x in 0..lat.n_sites() {
            let y = lat.translate(x, &disp);
            debug_assert_ne!(x, y);
            let key = (x.min(y), x.max(y));
            map.insert(key, j);
        }
    }
    map.into_iter()
        .map(|((u, v), j)| Bond { u, v, j })
        .collect()
}

/// `J_hat(k) = sum_x J_x exp(i k . x)` over torus displacements, with
/// `k_j = 2*pi*k_index_j / side`. Real by the symmetry `J_x = J_{-x}`.
pub fn j_hat(lat: &SpatialLattice, spec: &CouplingSpec, k_index: &[i64]) -> f64 {
    assert_eq!(k_index.len(), lat.dim());
    let mut re = 0.0;
    let mut im = 0.0;
    for disp in lat.nonzero_displacements() {
        let j = spec.strength(&disp);
        if j == 0.0 {
            continue;
        }
        let phase: f64 = disp
            .iter()
            .zip(k_index.iter())
            .map(|(&dx, &n)| 2.0 * std::f64::consts::PI * (n as f64) * (dx as f64) / lat.side() as f64)
            .sum();
        re += j * phase.cos();
        im += j * phase.sin();
    }
    debug_assert!(im.abs() < 1e-12 * (1.0 + re.abs()));
    re
}

/// Whether every site can reach every other through bonds.
pub fn bond_graph_connected(lat: &SpatialLattice, spec: &CouplingSpec) -> bool {
    let n = lat.n_sites();
    if n <= 1 {
        return true;
    }
    let bonds = enumerate_bonds(lat, spec);
    let mut adj = vec![Vec::new(); n];
    for b in &bonds {
        adj[b.u].push(b.v);
        adj[b.v].push(b.u);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(x) = stack.pop() {
        for &y in &adj[x] {
            if !seen[y] {
                seen[y] = true;
                count += 1;
                stack.push(y);
            }
        }
    }
    count == n
}
