//! Operator algebra shared by every other module.
//!
//! Conventions:
//! * `ħ = 1`; Hamiltonians are angular frequencies.
//! * A d×d matrix `X` is vectorized row-major, `v[j*d + k] = X[j, k]`.
//! * A superoperator `F` acts as `vec(Λ[X]) = F · vec(X)`, so
//!   `F[(j,k),(r,s)]` is the coefficient of `X[r,s]` in `Λ[X][j,k]`.
//!   With this ordering `vec(A X B) = (A ⊗ Bᵀ) vec(X)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-12;
pub const POSITIVITY_TOL: f64 = 1e-10;

pub(crate) const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn identity(d: usize) -> CMatrix {
    CMatrix::identity(d, d)
}

/// Largest elementwise |X − X†|.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for k in j..n {
            worst = worst.max((m[(j, k)] - m[(k, j)].conj()).norm());
        }
    }
    worst
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0f64, |acc, z| acc.max(z.norm()))
}

pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).norm()))
}

/// `(X + X†)/2`.
pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * c(0.5, 0.0)
}

/// Ascending eigenvalues of a Hermitian matrix (the Hermitian part is used).
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let eig = SymmetricEigen::new(hermitian_part(m));
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Eigenvalues (ascending) and matching column eigenvectors.
pub fn hermitian_eigh(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(hermitian_part(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

pub fn unitarity_defect(u: &CMatrix) -> f64 {
    max_abs_diff(&(u.adjoint() * u), &identity(u.nrows()))
}

/// `exp(−iHt)` for Hermitian `H`, via its eigendecomposition.
pub fn unitary_propagator(h: &CMatrix, t: f64) -> CMatrix {
    let (e, v) = hermitian_eigh(h);
    let mut w = v.clone();
    for (col, &ek) in e.iter().enumerate() {
        let ph = Complex64::from_polar(1.0, -ek * t);
        for r in 0..w.nrows() {
            w[(r, col)] *= ph;
        }
    }
    w * v.adjoint()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateTolerance {
    pub hermitian: f64,
    pub trace: f64,
    pub positivity: f64,
}

impl Default for StateTolerance {
    fn default() -> Self {
        Self { hermitian: HERMITIAN_TOL, trace: TRACE_TOL, positivity: POSITIVITY_TOL }
    }
}

/// Hermitian, positive semidefinite, unit-trace d×d matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: CMatrix,
}

impl DensityMatrix {
    pub fn new(m: CMatrix) -> Result<Self> {
        Self::with_tolerance(m, StateTolerance::default())
    }

    pub fn with_tolerance(m: CMatrix, tol: StateTolerance) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidDimension(0));
        }
        let herm = hermiticity_defect(&m);
        if herm > tol.hermitian {
            return Err(Error::ContractViolation(format!("state not Hermitian (defect {herm:.3e})")));
        }
        let tr = m.trace();
        if (tr - 1.0).norm() > tol.trace {
            return Err(Error::ContractViolation(format!("state trace {tr} != 1")));
        }
        let min_ev = hermitian_eigenvalues(&m)[0];
        if min_ev < -tol.positivity {
            return Err(Error::ContractViolation(format!(
                "state not positive (min eigenvalue {min_ev:.3e})"
            )));
        }
        Ok(Self { m })
    }

    pub fn maximally_mixed(d: usize) -> Self {
        Self { m: identity(d) * c(1.0 / d as f64, 0.0) }
    }

    /// `|ψ⟩⟨ψ|` for a (not necessarily normalized) nonzero vector.
    pub fn pure(psi: &CVector) -> Result<Self> {
        let n = psi.norm();
        if n == 0.0 {
            return Err(Error::ContractViolation("zero state vector".into()));
        }
        let p = psi / c(n, 0.0);
        Self::new(&p * p.adjoint())
    }

    /// Qubit state `(1 + b·σ)/2`; requires |b| ≤ 1.
    pub fn from_bloch(b: [f64; 3]) -> Result<Self> {
        let m = CMatrix::from_row_slice(
            2,
            2,
            &[
                c(0.5 * (1.0 + b[2]), 0.0),
                c(0.5 * b[0], -0.5 * b[1]),
                c(0.5 * b[0], 0.5 * b[1]),
                c(0.5 * (1.0 - b[2]), 0.0),
            ],
        );
        Self::new(m)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn purity(&self) -> f64 {
        purity(&self.m)
    }

    /// Bloch vector (x, y, z) of a qubit state.
    pub fn bloch(&self) -> Option<[f64; 3]> {
        (self.dim() == 2).then(|| {
            let r = self.m[(1, 0)];
            [2.0 * r.re, 2.0 * r.im, (self.m[(0, 0)] - self.m[(1, 1)]).re]
        })
    }
}

/// `Tr[X²]` for Hermitian `X`, i.e. the squared Frobenius norm.
pub fn purity(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

pub fn vectorize(rho: &DensityMatrix) -> CVector {
    vec_matrix(rho.matrix())
}

pub fn vec_matrix(m: &CMatrix) -> CVector {
    let d = m.nrows();
    CVector::from_fn(d * m.ncols(), |i, _| m[(i / d, i % d)])
}

/// Inverse of [`vec_matrix`] for a square matrix.
pub fn unvec(v: &CVector) -> Result<CMatrix> {
    let d = (v.len() as f64).sqrt().round() as usize;
    if d * d != v.len() {
        return Err(Error::DimensionMismatch { expected: d * d, found: v.len() });
    }
    Ok(CMatrix::from_fn(d, d, |j, k| v[j * d + k]))
}

pub fn devectorize(v: &CVector) -> Result<DensityMatrix> {
    DensityMatrix::new(unvec(v)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisTag {
    Identity,
    Symmetric,
    Antisymmetric,
    Diagonal,
}

/// Orthonormal Hermitian basis `A₀ = 1/√d, A₁ … A_{d²−1}`.
#[derive(Debug, Clone)]
pub struct HermitianBasis {
    dim: usize,
    ops: Vec<CMatrix>,
    tags: Vec<BasisTag>,
}

/// Normalized generalized Gell-Mann basis.
///
/// Order: identity, symmetric pairs `(j<k)` lexicographically, antisymmetric
/// pairs in the same order, then the `d−1` diagonal members.
pub fn gell_mann_basis(d: usize) -> Result<HermitianBasis> {
    if d < 2 {
        return Err(Error::InvalidDimension(d));
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut ops = vec![identity(d) * c(1.0 / (d as f64).sqrt(), 0.0)];
    let mut tags = vec![BasisTag::Identity];
    let pairs: Vec<(usize, usize)> =
        (0..d).flat_map(|j| (j + 1..d).map(move |k| (j, k))).collect();
    for &(j, k) in &pairs {
        let mut m = CMatrix::zeros(d, d);
        m[(j, k)] = c(s, 0.0);
        m[(k, j)] = c(s, 0.0);
        ops.push(m);
        tags.push(BasisTag::Symmetric);
    }
    for &(j, k) in &pairs {
        let mut m = CMatrix::zeros(d, d);
        m[(j, k)] = c(0.0, -s);
        m[(k, j)] = c(0.0, s);
        ops.push(m);
        tags.push(BasisTag::Antisymmetric);
    }
    for l in 1..d {
        let norm = 1.0 / ((l * (l + 1)) as f64).sqrt();
        let mut m = CMatrix::zeros(d, d);
        for j in 0..l {
            m[(j, j)] = c(norm, 0.0);
        }
        m[(l, l)] = c(-(l as f64) * norm, 0.0);
        ops.push(m);
        tags.push(BasisTag::Diagonal);
    }
    Ok(HermitianBasis { dim: d, ops, tags })
}

impl HermitianBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of members including `A₀`, i.e. d².
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, m: usize) -> &CMatrix {
        &self.ops[m]
    }

    pub fn ops(&self) -> &[CMatrix] {
        &self.ops
    }

    pub fn tag(&self, m: usize) -> BasisTag {
        self.tags[m]
    }

    /// Indices of the diagonal members.
    pub fn diagonal_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&m| self.tags[m] == BasisTag::Diagonal).collect()
    }

    /// `Tr[A_m X]` for every member.
    pub fn coefficients(&self, x: &CMatrix) -> Vec<Complex64> {
        self.ops.iter().map(|a| (a * x).trace()).collect()
    }

    pub fn expand(&self, coeffs: &[Complex64]) -> CMatrix {
        let mut out = CMatrix::zeros(self.dim, self.dim);
        for (a, &cm) in self.ops.iter().zip(coeffs) {
            out += a * cm;
        }
        out
    }

    /// Columns are `vec(A_m)`; a d²×d² unitary.
    pub fn vec_matrix(&self) -> CMatrix {
        let n = self.len();
        let mut m = CMatrix::zeros(self.dim * self.dim, n);
        for (col, a) in self.ops.iter().enumerate() {
            m.set_column(col, &vec_matrix(a));
        }
        m
    }
}

/// d²×d² matrix of a linear map on d×d matrices (row-major double index).
#[derive(Debug, Clone, PartialEq)]
pub struct SuperoperatorMatrix {
    dim: usize,
    m: CMatrix,
}

impl SuperoperatorMatrix {
    pub fn from_matrix(m: CMatrix) -> Result<Self> {
        let n = m.nrows();
        let d = (n as f64).sqrt().round() as usize;
        if d * d != n || m.ncols() != n {
            return Err(Error::DimensionMismatch { expected: d * d, found: m.ncols() });
        }
        Ok(Self { dim: d, m })
    }

    pub fn identity(d: usize) -> Self {
        Self { dim: d, m: identity(d * d) }
    }

    pub fn zeros(d: usize) -> Self {
        Self { dim: d, m: CMatrix::zeros(d * d, d * d) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn matrix_mut(&mut self) -> &mut CMatrix {
        &mut self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn apply(&self, x: &CMatrix) -> Result<CMatrix> {
        if x.nrows() != self.dim || x.ncols() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: x.nrows() });
        }
        unvec(&(&self.m * vec_matrix(x)))
    }

    pub fn compose(&self, inner: &Self) -> Self {
        Self { dim: self.dim, m: &self.m * &inner.m }
    }
}

/// Superoperator of `X ↦ A X B`.
pub fn sandwich_superop(a: &CMatrix, b: &CMatrix) -> SuperoperatorMatrix {
    SuperoperatorMatrix { dim: a.nrows(), m: a.kronecker(&b.transpose()) }
}

/// Superoperator of `X ↦ −i[H, X]`.
pub fn commutator_superop(h: &CMatrix) -> SuperoperatorMatrix {
    let d = h.nrows();
    let one = identity(d);
    let m = (h.kronecker(&one) - one.kronecker(&h.transpose())) * -I;
    SuperoperatorMatrix { dim: d, m }
}

/// Superoperator of `X ↦ U X U†`; `U` must be unitary to 1e-10.
pub fn conjugation_superop(u: &CMatrix) -> Result<SuperoperatorMatrix> {
    if u.nrows() != u.ncols() {
        return Err(Error::DimensionMismatch { expected: u.nrows(), found: u.ncols() });
    }
    let defect = unitarity_defect(u);
    if defect > 1e-10 {
        return Err(Error::ContractViolation(format!("U is not unitary (defect {defect:.3e})")));
    }
    Ok(SuperoperatorMatrix { dim: u.nrows(), m: u.kronecker(&u.map(|z| z.conj())) })
}

/// Choi matrix `C[(r,j),(s,k)] = F[(j,k),(r,s)]`, i.e. `Σ_rs |r⟩⟨s| ⊗ Λ(|r⟩⟨s|)`.
pub fn choi_matrix(f: &SuperoperatorMatrix) -> CMatrix {
    let d = f.dim;
    let mut out = CMatrix::zeros(d * d, d * d);
    for j in 0..d {
        for k in 0..d {
            for r in 0..d {
                for s in 0..d {
                    out[(r * d + j, s * d + k)] = f.m[(j * d + k, r * d + s)];
                }
            }
        }
    }
    out
}

/// Hermitian matrix with independent standard normal real/imaginary parts.
pub fn random_hermitian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> CMatrix {
    let g = CMatrix::from_fn(d, d, |_, _| {
        c(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    });
    hermitian_part(&g)
}

/// Density matrix `G G† / Tr[G G†]` with `G` complex Ginibre (Hilbert–Schmidt measure).
pub fn random_density_matrix<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DensityMatrix {
    let g = CMatrix::from_fn(d, d, |_, _| {
        c(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    });
    let p = &g * g.adjoint();
    let tr = p.trace().re;
    DensityMatrix { m: hermitian_part(&(p / c(tr, 0.0))) }
}

/// Random pure state.
pub fn random_pure_state<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DensityMatrix {
    let psi = CVector::from_fn(d, |_, _| {
        c(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    });
    let p = &psi / c(psi.norm(), 0.0);
    DensityMatrix { m: hermitian_part(&(&p * p.adjoint())) }
}
