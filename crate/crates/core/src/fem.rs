//! P1 finite elements for `-(u y')' = f` on `(0, 1)` with `y(0) = g_l`, `y(1) = g_r`.
//!
//! The conductivity `u` is piecewise constant: each mesh cell reads its value from one
//! control group, so the number of controls can be smaller than the number of cells.
//! State, adjoint and tangent fields are nodal vectors of length `N + 1`; linear
//! systems live on the `N - 1` interior nodes and are solved by a pivot-free `LDLᵀ`
//! tridiagonal factorization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform mesh of `(0, 1)` with `cells` subdivisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mesh {
    cells: usize,
}

impl Mesh {
    pub fn new(cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::Config(format!(
                "mesh needs at least 2 cells, got {cells}"
            )));
        }
        Ok(Self { cells })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn nodes(&self) -> usize {
        self.cells + 1
    }

    pub fn h(&self) -> f64 {
        1.0 / self.cells as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 / self.cells as f64
    }

    pub fn coordinates(&self) -> DVector<f64> {
        DVector::from_fn(self.nodes(), |i, _| self.node(i))
    }

    fn check_nodal(&self, v: &DVector<f64>, what: &'static str) -> Result<()> {
        if v.len() != self.nodes() {
            return Err(Error::Dimension {
                what,
                expected: self.nodes(),
                found: v.len(),
            });
        }
        Ok(())
    }
}

/// Box `[m, M]` of admissible conductivities, `M > m > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0 && upper > lower && upper.is_finite()) {
            return Err(Error::Config(format!(
                "control bounds must satisfy M > m > 0, got [{lower}, {upper}]"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            lower: 0.1,
            upper: 10.0,
        }
    }
}

/// Piecewise-constant conductivities: mesh, cell → group map and bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpace {
    mesh: Mesh,
    group_map: Vec<usize>,
    groups: usize,
    bounds: Bounds,
}

impl ControlSpace {
    /// `groups` contiguous blocks of (nearly) equal size; cell `c` belongs to
    /// block `⌊c · groups / N⌋`.
    pub fn blocks(mesh: Mesh, groups: usize, bounds: Bounds) -> Result<Self> {
        if groups == 0 || groups > mesh.cells() {
            return Err(Error::Config(format!(
                "need 1 ≤ groups ≤ cells, got {groups} groups for {} cells",
                mesh.cells()
            )));
        }
        let group_map = (0..mesh.cells())
            .map(|c| c * groups / mesh.cells())
            .collect();
        Self::new(mesh, group_map, bounds)
    }

    pub fn new(mesh: Mesh, group_map: Vec<usize>, bounds: Bounds) -> Result<Self> {
        if group_map.len() != mesh.cells() {
            return Err(Error::Dimension {
                what: "group map",
                expected: mesh.cells(),
                found: group_map.len(),
            });
        }
        let groups = group_map.iter().max().map_or(0, |g| g + 1);
        let mut seen = vec![false; groups];
        for &g in &group_map {
            seen[g] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("group map is not onto".into()));
        }
        Ok(Self {
            mesh,
            group_map,
            groups,
            bounds,
        })
    }

    pub fn mesh(&self) -> Mesh {
        self.mesh
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn group_map(&self) -> &[usize] {
        &self.group_map
    }

    /// Lebesgue measure of each control group.
    pub fn group_measures(&self) -> DVector<f64> {
        let h = self.mesh.h();
        let mut m = DVector::zeros(self.groups);
        for &g in &self.group_map {
            m[g] += h;
        }
        m
    }

    pub fn check(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.groups {
            return Err(Error::Dimension {
                what: "control vector",
                expected: self.groups,
                found: u.len(),
            });
        }
        Ok(())
    }

    /// Per-cell conductivity; fails unless every value is finite and positive.
    pub fn cell_values(&self, u: &DVector<f64>) -> Result<Vec<f64>> {
        self.check(u)?;
        if let Some((index, &value)) = u
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::Ellipticity { index, value });
        }
        Ok(self.group_map.iter().map(|&g| u[g]).collect())
    }

    /// Sums per-cell quantities into their control groups.
    pub fn gather(&self, per_cell: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.groups);
        for (c, &g) in self.group_map.iter().enumerate() {
            out[g] += per_cell[c];
        }
        out
    }

    /// Componentwise clamp onto `[m, M]`.
    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        project_box(u, self.bounds)
    }

    pub fn is_admissible(&self, u: &DVector<f64>) -> bool {
        u.len() == self.groups && u.iter().all(|&x| self.bounds.contains(x))
    }
}

/// Componentwise clamp onto `[m, M]`.
pub fn project_box(u: &DVector<f64>, bounds: Bounds) -> DVector<f64> {
    u.map(|x| x.clamp(bounds.lower, bounds.upper))
}

/// Source (piecewise constant per cell) and Dirichlet data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemData {
    pub f: Vec<f64>,
    pub g: (f64, f64),
}

impl ProblemData {
    pub fn uniform(mesh: Mesh, f: f64, g: (f64, f64)) -> Self {
        Self {
            f: vec![f; mesh.cells()],
            g,
        }
    }

    pub fn check(&self, mesh: Mesh) -> Result<()> {
        if self.f.len() != mesh.cells() {
            return Err(Error::Dimension {
                what: "source cells",
                expected: mesh.cells(),
                found: self.f.len(),
            });
        }
        if !(self.f.iter().all(|x| x.is_finite()) && self.g.0.is_finite() && self.g.1.is_finite()) {
            return Err(Error::Config("problem data must be finite".into()));
        }
        Ok(())
    }

    /// `‖f‖_{L²}` of the piecewise-constant source.
    pub fn f_l2(&self, mesh: Mesh) -> f64 {
        (self.f.iter().map(|x| x * x).sum::<f64>() * mesh.h()).sqrt()
    }
}

/// Symmetric tridiagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub diag: Vec<f64>,
    /// `off[i]` couples rows `i` and `i + 1`.
    pub off: Vec<f64>,
}

impl Tridiagonal {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i + 1 < n {
                m[(i, i + 1)] = self.off[i];
                m[(i + 1, i)] = self.off[i];
            }
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * x[i];
                if i > 0 {
                    s += self.off[i - 1] * x[i - 1];
                }
                if i + 1 < n {
                    s += self.off[i] * x[i + 1];
                }
                s
            })
            .collect()
    }

    /// `LDLᵀ` factorization; fails unless every pivot is positive (SPD).
    pub fn factor(&self) -> Result<TridiagonalFactor> {
        let n = self.len();
        let mut d = Vec::with_capacity(n);
        let mut l = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            let pivot = if i == 0 {
                self.diag[0]
            } else {
                self.diag[i] - l[i - 1] * self.off[i - 1]
            };
            if !(pivot > 0.0 && pivot.is_finite()) {
                return Err(Error::Numerical(format!(
                    "tridiagonal matrix is not positive definite (pivot {pivot:e} at row {i})"
                )));
            }
            d.push(pivot);
            if i + 1 < n {
                l.push(self.off[i] / pivot);
            }
        }
        Ok(TridiagonalFactor { d, l })
    }
}

/// `LDLᵀ` factors of an SPD [`Tridiagonal`].
#[derive(Debug, Clone)]
pub struct TridiagonalFactor {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl TridiagonalFactor {
    pub fn pivots(&self) -> &[f64] {
        &self.d
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        let mut x = rhs.to_vec();
        for i in 1..n {
            x[i] -= self.l[i - 1] * x[i - 1];
        }
        for (xi, di) in x.iter_mut().zip(&self.d) {
            *xi /= di;
        }
        for i in (0..n.saturating_sub(1)).rev() {
            x[i] -= self.l[i] * x[i + 1];
        }
        x
    }
}

/// Interior stiffness `K(u)_{ij} = Σ_c u_c ∫_c φ_i' φ_j'` after Dirichlet elimination.
pub fn assemble_stiffness(space: &ControlSpace, u: &DVector<f64>) -> Result<Tridiagonal> {
    let cells = space.cell_values(u)?;
    Ok(stiffness_from_cells(space.mesh(), &cells))
}

fn stiffness_from_cells(mesh: Mesh, cells: &[f64]) -> Tridiagonal {
    let n = mesh.cells();
    let inv_h = 1.0 / mesh.h();
    let diag = (1..n).map(|i| (cells[i - 1] + cells[i]) * inv_h).collect();
    let off = (1..n - 1).map(|i| -cells[i] * inv_h).collect();
    Tridiagonal { diag, off }
}

/// Consistent P1 mass matrix over all `N + 1` nodes.
pub fn mass_matrix(mesh: Mesh) -> Tridiagonal {
    let h = mesh.h();
    let n = mesh.nodes();
    let mut diag = vec![2.0 * h / 3.0; n];
    diag[0] = h / 3.0;
    diag[n - 1] = h / 3.0;
    Tridiagonal {
        diag,
        off: vec![h / 6.0; n - 1],
    }
}

/// Exact `∫ a b` for P1 fields.
pub fn l2_inner(mesh: Mesh, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    mesh.check_nodal(a, "nodal field")?;
    mesh.check_nodal(b, "nodal field")?;
    let mb = mass_matrix(mesh).mul_vec(b.as_slice());
    Ok(a.iter().zip(&mb).map(|(x, y)| x * y).sum())
}

pub fn l2_norm(mesh: Mesh, a: &DVector<f64>) -> Result<f64> {
    Ok(l2_inner(mesh, a, a)?.max(0.0).sqrt())
}

/// `‖a'‖_{L²}`.
pub fn h1_seminorm(mesh: Mesh, a: &DVector<f64>) -> Result<f64> {
    mesh.check_nodal(a, "nodal field")?;
    let inv_h = 1.0 / mesh.h();
    Ok(a.as_slice()
        .windows(2)
        .map(|p| (p[1] - p[0]).powi(2) * inv_h)
        .sum::<f64>()
        .sqrt())
}

/// Full `H¹` norm `(‖a‖² + ‖a'‖²)^{1/2}`.
pub fn h1_norm(mesh: Mesh, a: &DVector<f64>) -> Result<f64> {
    Ok((l2_inner(mesh, a, a)? + h1_seminorm(mesh, a)?.powi(2)).sqrt())
}

/// `∫_c a' b'` for every cell `c`.
pub fn cell_gradient_products(mesh: Mesh, a: &DVector<f64>, b: &DVector<f64>) -> Vec<f64> {
    let inv_h = 1.0 / mesh.h();
    (0..mesh.cells())
        .map(|c| (a[c + 1] - a[c]) * (b[c + 1] - b[c]) * inv_h)
        .collect()
}

/// A factorized stiffness matrix `K(u)` reused for the state, adjoint and tangent solves.
#[derive(Debug, Clone)]
pub struct EllipticOperator<'a> {
    space: &'a ControlSpace,
    cells: Vec<f64>,
    factor: TridiagonalFactor,
}

impl<'a> EllipticOperator<'a> {
    pub fn new(space: &'a ControlSpace, u: &DVector<f64>) -> Result<Self> {
        let cells = space.cell_values(u)?;
        let factor = stiffness_from_cells(space.mesh(), &cells).factor()?;
        Ok(Self {
            space,
            cells,
            factor,
        })
    }

    fn mesh(&self) -> Mesh {
        self.space.mesh()
    }

    fn embed(&self, interior: Vec<f64>, left: f64, right: f64) -> DVector<f64> {
        let mut full = Vec::with_capacity(self.mesh().nodes());
        full.push(left);
        full.extend(interior);
        full.push(right);
        DVector::from_vec(full)
    }

    /// `y = 𝕊(u)`.
    pub fn state(&self, data: &ProblemData) -> Result<DVector<f64>> {
        let mesh = self.mesh();
        data.check(mesh)?;
        let n = mesh.cells();
        let h = mesh.h();
        let (gl, gr) = data.g;
        let mut rhs: Vec<f64> = (1..n)
            .map(|i| 0.5 * h * (data.f[i - 1] + data.f[i]))
            .collect();
        rhs[0] += self.cells[0] * gl / h;
        rhs[n - 2] += self.cells[n - 1] * gr / h;
        Ok(self.embed(self.factor.solve(&rhs), gl, gr))
    }

    /// Adjoint `p`: `K(u) p = -M (y - ẑ)` on interior nodes, `p = 0` on the boundary.
    pub fn adjoint(&self, y: &DVector<f64>, z_hat: &DVector<f64>) -> Result<DVector<f64>> {
        let mesh = self.mesh();
        mesh.check_nodal(y, "state")?;
        mesh.check_nodal(z_hat, "target state")?;
        let r: Vec<f64> = (y - z_hat).iter().copied().collect();
        let mr = mass_matrix(mesh).mul_vec(&r);
        let rhs: Vec<f64> = mr[1..mesh.cells()].iter().map(|x| -x).collect();
        Ok(self.embed(self.factor.solve(&rhs), 0.0, 0.0))
    }

    /// Tangent `ỹ = 𝕊'(u) ũ` at `y = 𝕊(u)`: `K(u) ỹ = -K'[ũ] y`, zero boundary values.
    pub fn linearized(&self, y: &DVector<f64>, du: &DVector<f64>) -> Result<DVector<f64>> {
        let mesh = self.mesh();
        mesh.check_nodal(y, "state")?;
        self.space.check(du)?;
        let n = mesh.cells();
        let inv_h = 1.0 / mesh.h();
        let dcell: Vec<f64> = self.space.group_map.iter().map(|&g| du[g]).collect();
        let rhs: Vec<f64> = (1..n)
            .map(|i| -(dcell[i - 1] * (y[i] - y[i - 1]) - dcell[i] * (y[i + 1] - y[i])) * inv_h)
            .collect();
        Ok(self.embed(self.factor.solve(&rhs), 0.0, 0.0))
    }
}

pub fn solve_state(
    space: &ControlSpace,
    u: &DVector<f64>,
    data: &ProblemData,
) -> Result<DVector<f64>> {
    EllipticOperator::new(space, u)?.state(data)
}

pub fn solve_adjoint(
    space: &ControlSpace,
    u: &DVector<f64>,
    y: &DVector<f64>,
    z_hat: &DVector<f64>,
) -> Result<DVector<f64>> {
    EllipticOperator::new(space, u)?.adjoint(y, z_hat)
}

pub fn solve_linearized(
    space: &ControlSpace,
    u: &DVector<f64>,
    y: &DVector<f64>,
    du: &DVector<f64>,
) -> Result<DVector<f64>> {
    EllipticOperator::new(space, u)?.linearized(y, du)
}
