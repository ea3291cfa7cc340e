//! Disordered Hamiltonian ensembles `{(H_λ, p_λ)}`.
//!
//! Spectral kinds share a fixed eigenbasis `V` (identity by default) and draw
//! dimensionless eigenvalues `λ_j`, giving `H = ω₀ V diag(λ) V†`; the global
//! kind scales a reference Hamiltonian, `H = λ · diag(ω⁰_j)`. Unitarily
//! invariant kinds rotate their spectrum by Haar-random unitaries.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use crate::distributions::ScalarDistribution;
use crate::error::{Error, Result};
use crate::numerics::{bessel_j, gauss_legendre, hermite_functions, sinc, sinc_prime};
use crate::operators::{c, hermitian_eigh, hermiticity_defect, unitarity_defect, CMatrix};
use crate::rng::SeedStream;

/// One member of the ensemble.
#[derive(Debug, Clone)]
pub struct Realization {
    hamiltonian: CMatrix,
    weight: f64,
    eigen: Option<(Vec<f64>, CMatrix)>,
}

impl Realization {
    pub fn new(hamiltonian: CMatrix, weight: f64) -> Result<Self> {
        if hamiltonian.nrows() != hamiltonian.ncols() {
            return Err(Error::DimensionMismatch {
                expected: hamiltonian.nrows(),
                found: hamiltonian.ncols(),
            });
        }
        let defect = hermiticity_defect(&hamiltonian);
        if defect > 1e-12 {
            return Err(Error::ContractViolation(format!(
                "Hamiltonian not Hermitian (defect {defect:.3e})"
            )));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::ContractViolation(format!("invalid weight {weight}")));
        }
        Ok(Self { hamiltonian, weight, eigen: None })
    }

    /// Realization with known eigenfrequencies and eigenvectors (columns of `v`).
    fn from_spectrum(energies: Vec<f64>, v: CMatrix) -> Self {
        let mut w = v.clone();
        for (col, &e) in energies.iter().enumerate() {
            for r in 0..w.nrows() {
                w[(r, col)] *= e;
            }
        }
        let h = &w * v.adjoint();
        let h = (&h + h.adjoint()) * c(0.5, 0.0);
        Self { hamiltonian: h, weight: 1.0, eigen: Some((energies, v)) }
    }

    pub fn hamiltonian(&self) -> &CMatrix {
        &self.hamiltonian
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.nrows()
    }

    /// Eigenfrequencies and eigenvectors of `H`.
    pub fn eigensystem(&self) -> (Vec<f64>, CMatrix) {
        match &self.eigen {
            Some(e) => e.clone(),
            None => hermitian_eigh(&self.hamiltonian),
        }
    }
}

/// Kind-specific eigenvalue structure.
#[derive(Debug, Clone)]
pub enum EnsembleKind {
    /// Jointly Gaussian eigenvalues `λ ~ N(mean, covariance)`.
    SpectralGeneral { mean: Vec<f64>, covariance: DMatrix<f64> },
    /// `H = λ · diag(reference)` with a single scalar `λ`.
    SpectralGlobal { law: ScalarDistribution, reference: Vec<f64> },
    /// Independent eigenvalues, one law per level.
    SpectralUncorrelated { laws: Vec<ScalarDistribution> },
    /// Independent box-distributed eigenvalues with Haar eigenvectors.
    PoissonianUnitary { sigma: f64, location: f64 },
    /// Gaussian unitary ensemble with `E|H_jk|²/ω₀² = 1/d`.
    GaussianUnitary,
    /// Explicit `(H_i, p_i)` pairs.
    FiniteList { members: Vec<Realization> },
}

impl EnsembleKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SpectralGeneral { .. } => "spectral-general",
            Self::SpectralGlobal { .. } => "spectral-global",
            Self::SpectralUncorrelated { .. } => "spectral-uncorrelated",
            Self::PoissonianUnitary { .. } => "unitarily-invariant-pe",
            Self::GaussianUnitary => "unitarily-invariant-gue",
            Self::FiniteList { .. } => "finite-list",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DisorderEnsemble {
    dim: usize,
    omega0: f64,
    kind: EnsembleKind,
    basis: Option<CMatrix>,
    cov_factor: Option<DMatrix<f64>>,
}

impl DisorderEnsemble {
    pub fn new(dim: usize, omega0: f64, kind: EnsembleKind) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        if !(omega0.is_finite() && omega0 > 0.0) {
            return Err(Error::Config(format!("omega0 must be positive, got {omega0}")));
        }
        let check_len = |n: usize| {
            if n == dim {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected: dim, found: n })
            }
        };
        let mut cov_factor = None;
        let mut kind = kind;
        match &mut kind {
            EnsembleKind::SpectralGeneral { mean, covariance } => {
                check_len(mean.len())?;
                check_len(covariance.nrows())?;
                check_len(covariance.ncols())?;
                if (&*covariance - covariance.transpose()).amax() > 1e-12 {
                    return Err(Error::Config("covariance must be symmetric".into()));
                }
                let eig = SymmetricEigen::new(covariance.clone());
                if eig.eigenvalues.min() < -1e-12 * eig.eigenvalues.amax().max(1.0) {
                    return Err(Error::Config("covariance must be positive semidefinite".into()));
                }
                let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()));
                cov_factor = Some(&eig.eigenvectors * root);
            }
            EnsembleKind::SpectralGlobal { reference, .. } => check_len(reference.len())?,
            EnsembleKind::SpectralUncorrelated { laws } => check_len(laws.len())?,
            EnsembleKind::PoissonianUnitary { sigma, location } => {
                if !(sigma.is_finite() && *sigma > 0.0 && location.is_finite()) {
                    return Err(Error::Config("box width must be positive".into()));
                }
            }
            EnsembleKind::GaussianUnitary => {}
            EnsembleKind::FiniteList { members } => {
                if members.is_empty() {
                    return Err(Error::Config("finite-list ensemble needs members".into()));
                }
                for m in members.iter() {
                    check_len(m.dim())?;
                }
                let total: f64 = members.iter().map(|m| m.weight).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("weights sum to {total}, not 1")));
                }
                for m in members.iter_mut() {
                    m.weight /= total;
                }
            }
        }
        Ok(Self { dim, omega0, kind, basis: None, cov_factor })
    }

    /// Use the columns of `v` as the shared eigenbasis (spectral kinds only).
    pub fn with_eigenbasis(mut self, v: CMatrix) -> Result<Self> {
        if !self.is_spectral() {
            return Err(Error::WrongKind {
                expected: "spectral kind".into(),
                found: self.kind.name().into(),
            });
        }
        if v.nrows() != self.dim || v.ncols() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: v.nrows() });
        }
        if unitarity_defect(&v) > 1e-10 {
            return Err(Error::ContractViolation("eigenbasis is not unitary".into()));
        }
        self.basis = Some(v);
        Ok(self)
    }

    /// Qubit with `H = λ ω₀ σ_z / 2`.
    pub fn qubit(law: ScalarDistribution, omega0: f64) -> Result<Self> {
        Self::new(
            2,
            omega0,
            EnsembleKind::SpectralGlobal { law, reference: vec![0.5 * omega0, -0.5 * omega0] },
        )
    }

    pub fn poissonian(dim: usize, omega0: f64, sigma: f64, location: f64) -> Result<Self> {
        Self::new(dim, omega0, EnsembleKind::PoissonianUnitary { sigma, location })
    }

    pub fn gue(dim: usize, omega0: f64) -> Result<Self> {
        Self::new(dim, omega0, EnsembleKind::GaussianUnitary)
    }

    pub fn finite_list(dim: usize, omega0: f64, members: Vec<(CMatrix, f64)>) -> Result<Self> {
        let members = members
            .into_iter()
            .map(|(h, p)| Realization::new(h, p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dim, omega0, EnsembleKind::FiniteList { members })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn kind(&self) -> &EnsembleKind {
        &self.kind
    }

    pub fn eigenbasis(&self) -> Option<&CMatrix> {
        self.basis.as_ref()
    }

    pub fn is_spectral(&self) -> bool {
        matches!(
            self.kind,
            EnsembleKind::SpectralGeneral { .. }
                | EnsembleKind::SpectralGlobal { .. }
                | EnsembleKind::SpectralUncorrelated { .. }
        )
    }

    pub fn is_unitarily_invariant(&self) -> bool {
        matches!(self.kind, EnsembleKind::PoissonianUnitary { .. } | EnsembleKind::GaussianUnitary)
    }

    /// Whether the qubit closed forms apply: spectral-global, d = 2, reference `±ω₀/2`.
    pub fn qubit_law(&self) -> Option<ScalarDistribution> {
        match &self.kind {
            EnsembleKind::SpectralGlobal { law, reference }
                if self.dim == 2
                    && self.basis.is_none()
                    && (reference[0] - 0.5 * self.omega0).abs() < 1e-12 * self.omega0
                    && (reference[1] + 0.5 * self.omega0).abs() < 1e-12 * self.omega0 =>
            {
                Some(*law)
            }
            _ => None,
        }
    }

    fn basis_or_identity(&self) -> CMatrix {
        self.basis.clone().unwrap_or_else(|| CMatrix::identity(self.dim, self.dim))
    }

    pub fn sample_realization(&self, seed: SeedStream) -> Realization {
        self.sample_with(&mut seed.rng())
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Realization {
        let d = self.dim;
        let w0 = self.omega0;
        match &self.kind {
            EnsembleKind::SpectralGeneral { mean, .. } => {
                let z = nalgebra::DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = self.cov_factor.as_ref().expect("built in new") * z;
                let e = (0..d).map(|j| w0 * (mean[j] + x[j])).collect();
                Realization::from_spectrum(e, self.basis_or_identity())
            }
            EnsembleKind::SpectralGlobal { law, reference } => {
                let lam = law.sample_one(rng);
                let e = reference.iter().map(|r| lam * r).collect();
                Realization::from_spectrum(e, self.basis_or_identity())
            }
            EnsembleKind::SpectralUncorrelated { laws } => {
                let e = laws.iter().map(|l| w0 * l.sample_one(rng)).collect();
                Realization::from_spectrum(e, self.basis_or_identity())
            }
            EnsembleKind::PoissonianUnitary { sigma, location } => {
                let u = Uniform::new(location - 0.5 * sigma, location + 0.5 * sigma);
                let e = (0..d).map(|_| w0 * u.sample(rng)).collect();
                Realization::from_spectrum(e, haar_unitary_with(d, rng))
            }
            EnsembleKind::GaussianUnitary => {
                let diag = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("finite");
                let off = Normal::new(0.0, (0.5 / d as f64).sqrt()).expect("finite");
                let mut h = CMatrix::zeros(d, d);
                for j in 0..d {
                    h[(j, j)] = c(w0 * diag.sample(rng), 0.0);
                    for k in j + 1..d {
                        let z = c(w0 * off.sample(rng), w0 * off.sample(rng));
                        h[(j, k)] = z;
                        h[(k, j)] = z.conj();
                    }
                }
                Realization { hamiltonian: h, weight: 1.0, eigen: None }
            }
            EnsembleKind::FiniteList { members } => {
                let mut x: f64 = rng.gen();
                for m in members {
                    x -= m.weight;
                    if x < 0.0 {
                        return m.clone();
                    }
                }
                members.last().expect("non-empty").clone()
            }
        }
    }

    /// `H̄ = E[H]`; fails for laws without a finite mean.
    pub fn mean_hamiltonian(&self) -> Result<CMatrix> {
        let d = self.dim;
        let w0 = self.omega0;
        let rotate = |diag: Vec<f64>| {
            let v = self.basis_or_identity();
            let mut m = CMatrix::zeros(d, d);
            for (j, x) in diag.into_iter().enumerate() {
                m[(j, j)] = c(x, 0.0);
            }
            &v * m * v.adjoint()
        };
        match &self.kind {
            EnsembleKind::SpectralGeneral { mean, .. } => Ok(rotate(mean.iter().map(|m| w0 * m).collect())),
            EnsembleKind::SpectralGlobal { law, reference } => {
                let m = law.mean().ok_or(Error::NoAverageHamiltonian)?;
                Ok(rotate(reference.iter().map(|r| m * r).collect()))
            }
            EnsembleKind::SpectralUncorrelated { laws } => Ok(rotate(
                laws.iter()
                    .map(|l| l.mean().map(|m| w0 * m).ok_or(Error::NoAverageHamiltonian))
                    .collect::<Result<_>>()?,
            )),
            EnsembleKind::PoissonianUnitary { location, .. } => {
                Ok(CMatrix::identity(d, d) * c(w0 * location, 0.0))
            }
            EnsembleKind::GaussianUnitary => Ok(CMatrix::zeros(d, d)),
            EnsembleKind::FiniteList { members } => Ok(members
                .iter()
                .fold(CMatrix::zeros(d, d), |acc, m| acc + m.hamiltonian() * c(m.weight, 0.0))),
        }
    }

    /// `φ_jk(ω₀t) = E[e^{i(λ_j − λ_k)ω₀t}]` together with its time derivative.
    pub fn level_spacing_cf_with_derivative(
        &self,
        j: usize,
        k: usize,
        t: f64,
    ) -> Result<(Complex64, Complex64)> {
        if j >= self.dim || k >= self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: j.max(k) + 1 });
        }
        let one = (c(1.0, 0.0), c(0.0, 0.0));
        let u = self.omega0 * t;
        match &self.kind {
            EnsembleKind::SpectralGeneral { mean, covariance } => {
                let dm = mean[j] - mean[k];
                let v = covariance[(j, j)] + covariance[(k, k)] - 2.0 * covariance[(j, k)];
                let phi = (c(-0.5 * v * u * u, dm * u)).exp();
                Ok((phi, phi * c(-v * u, dm) * self.omega0))
            }
            EnsembleKind::SpectralGlobal { law, reference } => {
                let w = reference[j] - reference[k];
                if w == 0.0 {
                    return Ok(one);
                }
                Ok((law.char_fn(w * t), law.char_fn_derivative(w * t) * w))
            }
            EnsembleKind::SpectralUncorrelated { laws } => {
                if j == k {
                    return Ok(one);
                }
                let (pj, pk) = (laws[j].char_fn(u), laws[k].char_fn(u).conj());
                let (dj, dk) = (laws[j].char_fn_derivative(u), laws[k].char_fn_derivative(u).conj());
                Ok((pj * pk, (dj * pk + pj * dk) * self.omega0))
            }
            EnsembleKind::PoissonianUnitary { sigma, .. } => {
                if j == k {
                    return Ok(one);
                }
                let x = 0.5 * sigma * u;
                let s = sinc(x);
                Ok((c(s * s, 0.0), c(2.0 * s * sinc_prime(x) * 0.5 * sigma * self.omega0, 0.0)))
            }
            EnsembleKind::GaussianUnitary => Err(Error::UnsupportedForKind {
                kind: self.kind.name().into(),
                reason: "correlated GUE levels are handled through chi_bar".into(),
            }),
            EnsembleKind::FiniteList { .. } => Err(Error::UnsupportedForKind {
                kind: self.kind.name().into(),
                reason: "no analytic eigenvalue law".into(),
            }),
        }
    }

    pub fn level_spacing_cf(&self, j: usize, k: usize, t: f64) -> Result<Complex64> {
        Ok(self.level_spacing_cf_with_derivative(j, k, t)?.0)
    }

    /// `χ̄(t) = (1/d²) Σ_jk φ*_jk(ω₀t)` and `dχ̄/dt` for unitarily invariant kinds.
    pub fn chi_bar_with_derivative(&self, t: f64) -> Result<(f64, f64)> {
        let d = self.dim as f64;
        let u = self.omega0 * t;
        match &self.kind {
            EnsembleKind::PoissonianUnitary { sigma, .. } => {
                let x = 0.5 * sigma * u;
                let s = sinc(x);
                let chi = 1.0 / d + (d - 1.0) / d * s * s;
                let dchi = (d - 1.0) / d * 2.0 * s * sinc_prime(x) * 0.5 * sigma * self.omega0;
                Ok((chi, dchi))
            }
            EnsembleKind::GaussianUnitary => {
                let (chi, dchi) = gue_chi_bar(self.dim, u);
                Ok((chi, dchi * self.omega0))
            }
            _ => Err(Error::WrongKind {
                expected: "unitarily invariant kind".into(),
                found: self.kind.name().into(),
            }),
        }
    }

    pub fn chi_bar(&self, t: f64) -> Result<f64> {
        Ok(self.chi_bar_with_derivative(t)?.0)
    }
}

/// Haar-distributed unitary: QR of a complex Ginibre matrix with the phases
/// of `R`'s diagonal moved into `Q`.
pub fn haar_unitary(d: usize, seed: SeedStream) -> CMatrix {
    haar_unitary_with(d, &mut seed.rng())
}

pub fn haar_unitary_with<R: Rng + ?Sized>(d: usize, rng: &mut R) -> CMatrix {
    let z = CMatrix::from_fn(d, d, |_, _| {
        c(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    });
    let qr = z.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for col in 0..d {
        let rd = r[(col, col)];
        let phase = if rd.norm() > 0.0 { rd / rd.norm() } else { c(1.0, 0.0) };
        for row in 0..d {
            q[(row, col)] *= phase;
        }
    }
    q
}

/// Finite-d GUE `χ̄(u)` and `dχ̄/du` with `u = ω₀t`.
///
/// With the orthonormal Hermite functions `h_n` and `y = √(d/2)·λ`,
/// `χ̄ = 1/d + (|Σ_n I_nn|² − Σ_nm |I_nm|²)/d²` where
/// `I_nm(u) = ∫ h_n h_m e^{−iu√(2/d)y} dy`.
pub fn gue_chi_bar(d: usize, u: f64) -> (f64, f64) {
    let df = d as f64;
    let k = (2.0 / df).sqrt();
    let reach = (2.0 * df + 1.0).sqrt() + 9.0;
    let omega = k * u.abs() + 2.0 * (2.0 * df + 1.0).sqrt();
    let width = (4.0 / omega).min(0.5);
    let panels = (2.0 * reach / width).ceil() as usize;
    let width = 2.0 * reach / panels as f64;
    let (gx, gw) = gauss_legendre(16);

    let mut ints = vec![c(0.0, 0.0); d * d];
    let mut dints = vec![c(0.0, 0.0); d * d];
    for p in 0..panels {
        let a = -reach + p as f64 * width;
        for (xi, wi) in gx.iter().zip(&gw) {
            let y = a + 0.5 * width * (xi + 1.0);
            let w = 0.5 * width * wi;
            let h = hermite_functions(d, y);
            let e = Complex64::from_polar(w, -u * k * y);
            let de = e * c(0.0, -k * y);
            for n in 0..d {
                for m in n..d {
                    let hh = h[n] * h[m];
                    ints[n * d + m] += e * hh;
                    dints[n * d + m] += de * hh;
                }
            }
        }
    }
    let mut trace = c(0.0, 0.0);
    let mut dtrace = c(0.0, 0.0);
    let mut sq = 0.0;
    let mut dsq = 0.0;
    for n in 0..d {
        trace += ints[n * d + n];
        dtrace += dints[n * d + n];
        for m in n..d {
            let mult = if m == n { 1.0 } else { 2.0 };
            let (i, di) = (ints[n * d + m], dints[n * d + m]);
            sq += mult * i.norm_sqr();
            dsq += mult * 2.0 * (i.conj() * di).re;
        }
    }
    let chi = 1.0 / df + (trace.norm_sqr() - sq) / (df * df);
    let dchi = (2.0 * (trace.conj() * dtrace).re - dsq) / (df * df);
    (chi, dchi)
}

/// Large-d GUE limit `χ̄ ≈ (J₁(2u)/u)²` and its derivative in `u`.
pub fn gue_chi_bar_large_d(u: f64) -> (f64, f64) {
    if u.abs() < 1e-4 {
        // J₁(2u)/u = 1 − u²/2 + …
        let f = 1.0 - 0.5 * u * u;
        return (f * f, -2.0 * u * f);
    }
    let x = 2.0 * u;
    let j1 = bessel_j(1, x);
    let j0 = bessel_j(0, x);
    let f = j1 / u;
    // d/du [J₁(2u)/u] = 2J₁′(2u)/u − J₁(2u)/u², J₁′(x) = J₀(x) − J₁(x)/x
    let df = 2.0 * (j0 - j1 / x) / u - j1 / (u * u);
    (f * f, 2.0 * f * df)
}
