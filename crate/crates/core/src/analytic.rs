//! Closed-form master-equation ingredients.
//!
//! Qubit conventions: `H = λω₀σ_z/2` and
//! `ρ̇ = −i[φ(t)σ_z, ρ] + γ(t)(σ_zρσ_z − ρ)`, so that
//! `ρ̄₀₁(t) = ρ₀₁(0)·exp(−2∫₀ᵗ(iφ + γ))`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::distributions::{DistributionKind, ScalarDistribution};
use crate::ensembles::{gue_chi_bar_large_d, DisorderEnsemble, EnsembleKind};
use crate::error::{Error, Result};
use crate::extraction::{
    generator_to_lindblad, reconstruct_generator, LindbladPoint, MasterEquationSeries, Provenance, TimeGrid,
};
use crate::numerics::sinc;
use crate::operators::{c, commutator_superop, gell_mann_basis, identity, vec_matrix, CMatrix, SuperoperatorMatrix};

/// A time-dependent generator `ρ̇ = Q(t)ρ` in vectorized form.
pub trait Generator: Sync {
    fn dim(&self) -> usize;
    fn superop(&self, t: f64) -> CMatrix;
}

/// Dissipator superoperator `Σ_λ p_λ (L ρ L† − ½{L†L, ρ})` from
/// `K = Σ p L ⊗ conj(L)` and `M = Σ p L†L`.
fn dissipator(k: &CMatrix, m: &CMatrix) -> CMatrix {
    let d = m.nrows();
    let one = identity(d);
    k - (m.kronecker(&one) + one.kronecker(&m.transpose())) * c(0.5, 0.0)
}

/// Short-time master equation
/// `ρ̇ = −i[H̄, ρ] + 2ω₀²t Σ_λ p_λ (L_λρL_λ† − ½{L_λ†L_λ, ρ})`,
/// `L_λ = (H_λ − H̄)/ω₀`, stored through its second moments.
#[derive(Debug, Clone)]
pub struct ShortTimeLindblad {
    pub h_bar: CMatrix,
    pub omega0: f64,
    /// `E[L ⊗ conj(L)]`.
    pub jump: CMatrix,
    /// `E[L†L]`.
    pub second_moment: CMatrix,
    /// Explicit `(L_λ, p_λ)` for finite-list ensembles.
    pub operators: Option<Vec<(CMatrix, f64)>>,
}

impl ShortTimeLindblad {
    /// Rate attached to `L_λ`: `γ_λ(t) = 2p_λω₀²t`.
    pub fn rate(&self, p: f64, t: f64) -> f64 {
        2.0 * p * self.omega0 * self.omega0 * t
    }
}

impl Generator for ShortTimeLindblad {
    fn dim(&self) -> usize {
        self.h_bar.nrows()
    }

    fn superop(&self, t: f64) -> CMatrix {
        commutator_superop(&self.h_bar).into_matrix()
            + dissipator(&self.jump, &self.second_moment) * c(self.rate(1.0, t), 0.0)
    }
}

pub fn short_time_lindblad(ens: &DisorderEnsemble) -> Result<ShortTimeLindblad> {
    let d = ens.dim();
    let w0 = ens.omega0();
    let h_bar = ens.mean_hamiltonian()?;
    let build = |cov: &CMatrix, basis: Option<&CMatrix>| {
        // diagonal fluctuations δE with covariance cov (energy units)
        let mut k = CMatrix::zeros(d * d, d * d);
        for j in 0..d {
            for l in 0..d {
                k[(j * d + l, j * d + l)] = cov[(j, l)] / (w0 * w0);
            }
        }
        let mut m = CMatrix::from_diagonal(&cov.diagonal()) / c(w0 * w0, 0.0);
        if let Some(v) = basis {
            let w = v.kronecker(&v.map(|z| z.conj()));
            k = &w * k * w.adjoint();
            m = v * m * v.adjoint();
        }
        (k, m)
    };
    let variance = |law: &ScalarDistribution| law.variance().ok_or(Error::NoAverageHamiltonian);
    let (jump, second_moment, operators) = match ens.kind() {
        EnsembleKind::SpectralGeneral { covariance, .. } => {
            let cov = covariance.map(|x| c(w0 * w0 * x, 0.0));
            let (k, m) = build(&cov, ens.eigenbasis());
            (k, m, None)
        }
        EnsembleKind::SpectralGlobal { law, reference } => {
            let v = variance(law)?;
            let cov = CMatrix::from_fn(d, d, |j, l| c(v * reference[j] * reference[l], 0.0));
            let (k, m) = build(&cov, ens.eigenbasis());
            (k, m, None)
        }
        EnsembleKind::SpectralUncorrelated { laws } => {
            let vars = laws.iter().map(variance).collect::<Result<Vec<_>>>()?;
            let cov = CMatrix::from_fn(d, d, |j, l| if j == l { c(w0 * w0 * vars[j], 0.0) } else { c(0.0, 0.0) });
            let (k, m) = build(&cov, ens.eigenbasis());
            (k, m, None)
        }
        EnsembleKind::PoissonianUnitary { sigma, .. } => {
            let v = sigma * sigma / 12.0;
            let df = d as f64;
            // E[d Tr L² − (Tr L)²] = d(d−1)v and E[Tr L²] = d·v for i.i.d. levels
            invariant_moments(d, df * (df - 1.0) * v, df * v)
        }
        EnsembleKind::GaussianUnitary => {
            let df = d as f64;
            // E|H_jk|² = ω₀²/d for every entry
            invariant_moments(d, df * df - 1.0, df)
        }
        EnsembleKind::FiniteList { members } => {
            let mut k = CMatrix::zeros(d * d, d * d);
            let mut m = CMatrix::zeros(d, d);
            let mut ops = Vec::with_capacity(members.len());
            for r in members {
                let l = (r.hamiltonian() - &h_bar) / c(w0, 0.0);
                k += l.kronecker(&l.map(|z| z.conj())) * c(r.weight(), 0.0);
                m += l.adjoint() * &l * c(r.weight(), 0.0);
                ops.push((l, r.weight()));
            }
            (k, m, Some(ops))
        }
    };
    Ok(ShortTimeLindblad { h_bar, omega0: w0, jump, second_moment, operators })
}

/// Haar-averaged `(K, M, None)` for `L = W A W†` given
/// `s = E[d Tr A² − (Tr A)²]` and `q = E[Tr A²]`, both in units of ω₀².
fn invariant_moments(d: usize, s: f64, q: f64) -> (CMatrix, CMatrix, Option<Vec<(CMatrix, f64)>>) {
    let df = d as f64;
    let p = q * df - s; // E[(Tr A)²]
    let alpha = s / (df * (df * df - 1.0));
    let beta = (df * p - q) / (df * (df * df - 1.0));
    let one = vec_matrix(&identity(d));
    let k = &one * one.adjoint() * c(alpha, 0.0) + identity(d * d) * c(beta, 0.0);
    (k, identity(d) * c(q / df, 0.0), None)
}

/// Short-time depolarization rate coefficient: `γ(t) ≈ coefficient · t`.
///
/// `γ = (2ω₀²t/(d²−1))(dΣ⟨λ_j²⟩ − Σ⟨λ_jλ_k⟩)`, which is non-negative.
pub fn invariant_short_time_coefficient(ens: &DisorderEnsemble) -> Result<f64> {
    let d = ens.dim() as f64;
    let w0 = ens.omega0();
    let s = match ens.kind() {
        EnsembleKind::PoissonianUnitary { sigma, .. } => d * (d - 1.0) * sigma * sigma / 12.0,
        EnsembleKind::GaussianUnitary => d * d - 1.0,
        _ => {
            return Err(Error::WrongKind {
                expected: "unitarily invariant kind".into(),
                found: ens.kind().name().into(),
            })
        }
    };
    Ok(2.0 * w0 * w0 * s / (d * d - 1.0))
}

/// Energy function and dephasing rate of a qubit with spectral disorder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitRatePair {
    pub distribution: ScalarDistribution,
    pub omega0: f64,
}

pub fn qubit_rates(dist: ScalarDistribution, omega0: f64) -> Result<QubitRatePair> {
    if !(omega0.is_finite() && omega0 > 0.0) {
        return Err(Error::Config(format!("omega0 must be positive, got {omega0}")));
    }
    Ok(QubitRatePair { distribution: dist, omega0 })
}

impl QubitRatePair {
    fn x_box(&self, t: f64) -> f64 {
        0.5 * self.distribution.scale() * self.omega0 * t
    }

    /// Index `n ≥ 1` if `t` is the box singular time `τ_n = 2nπ/(σω₀)`.
    fn box_singular_index(&self, t: f64) -> Option<u64> {
        if self.distribution.kind() != DistributionKind::UniformBox || t <= 0.0 {
            return None;
        }
        let n = (self.x_box(t) / PI).round();
        (n >= 1.0 && (self.x_box(t) - n * PI).abs() <= 1e-12 * n * PI).then_some(n as u64)
    }

    /// `φ(t) = ½ Im[d/dt ln φ_λ(ω₀t)]` in units of energy.
    pub fn energy(&self, t: f64) -> f64 {
        let d = &self.distribution;
        let w0 = self.omega0;
        match d.kind() {
            DistributionKind::CauchyLorentz
            | DistributionKind::Gaussian
            | DistributionKind::UniformBox
            | DistributionKind::PointMass => 0.5 * w0 * d.location(),
            DistributionKind::Levy => {
                if t <= 0.0 {
                    f64::INFINITY
                } else {
                    0.5 * w0 * d.location() + 0.25 * (d.scale() * w0 / t).sqrt()
                }
            }
        }
    }

    /// `γ(t) = −½ Re[d/dt ln φ*_λ(ω₀t)]`; `+∞` at box singular times.
    pub fn rate(&self, t: f64) -> f64 {
        let d = &self.distribution;
        let (w0, s) = (self.omega0, d.scale());
        match d.kind() {
            DistributionKind::CauchyLorentz => 0.5 * w0 * s,
            DistributionKind::Gaussian => 0.5 * (w0 * s).powi(2) * t,
            DistributionKind::UniformBox => {
                if self.box_singular_index(t).is_some() {
                    return f64::INFINITY;
                }
                let x = self.x_box(t);
                if x.abs() < 1e-3 {
                    // ½(1/t − k cot(kt)) = k²t/6 + k⁴t³/90 + 2k⁶t⁵/945, k = σω₀/2
                    let k = 0.5 * s * w0;
                    let k2 = k * k;
                    return 0.5 * t * k2 * (1.0 / 3.0 + k2 * t * t / 45.0 + 2.0 * k2 * k2 * t.powi(4) / 945.0);
                }
                0.5 * (1.0 / t - 0.5 * s * w0 / x.tan())
            }
            DistributionKind::Levy => {
                if t <= 0.0 {
                    f64::INFINITY
                } else {
                    0.25 * (s * w0 / t).sqrt()
                }
            }
            DistributionKind::PointMass => 0.0,
        }
    }

    /// Box singular times `τ_n ≤ t_max`; empty for the other families.
    pub fn singular_times(&self, t_max: f64) -> Vec<f64> {
        if self.distribution.kind() != DistributionKind::UniformBox {
            return Vec::new();
        }
        let tau = 2.0 * PI / (self.distribution.scale() * self.omega0);
        (1..).map(|n| n as f64 * tau).take_while(|&t| t <= t_max).collect()
    }

    /// `2∫₀ᵗ(iφ + γ)dt′` from the closed-form primitives (principal branch).
    pub fn integrated_exponent(&self, t: f64) -> Complex64 {
        let d = &self.distribution;
        let (w0, s, l0) = (self.omega0, d.scale(), d.location());
        let carrier = Complex64::new(0.0, l0 * w0 * t);
        match d.kind() {
            DistributionKind::CauchyLorentz => carrier + s * w0 * t,
            DistributionKind::Gaussian => carrier + 0.5 * (s * w0 * t).powi(2),
            DistributionKind::UniformBox => {
                if self.box_singular_index(t).is_some() {
                    return Complex64::new(f64::INFINITY, 0.0);
                }
                carrier - Complex64::new(sinc(self.x_box(t)), 0.0).ln()
            }
            DistributionKind::Levy => {
                let r = (s * w0 * t).sqrt();
                carrier + Complex64::new(r, r)
            }
            DistributionKind::PointMass => carrier,
        }
    }
}

impl Generator for QubitRatePair {
    fn dim(&self) -> usize {
        2
    }

    fn superop(&self, t: f64) -> CMatrix {
        let sz = CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)]);
        let flip = sz.kronecker(&sz) - identity(4);
        commutator_superop(&(&sz * c(self.energy(t), 0.0))).into_matrix() + flip * c(self.rate(t), 0.0)
    }
}

/// `ρ̄₀₁(t) = ρ₀₁(0)·exp(−2∫₀ᵗ(iφ + γ))`.
pub fn qubit_coherence(rho01: Complex64, pair: &QubitRatePair, t: f64) -> Complex64 {
    if t < 0.0 {
        return Complex64::new(f64::NAN, f64::NAN);
    }
    let e = pair.integrated_exponent(t);
    if e.re == f64::INFINITY {
        return Complex64::new(0.0, 0.0);
    }
    rho01 * (-e).exp()
}

/// Rate of each level in the uncorrelated projector form,
/// `γ_j = −2 Re[d/dt ln φ*_j(ω₀t)]`, and the diagonal Hamiltonian
/// `h_j = −Im[d/dt ln φ*_j(ω₀t)]`.
pub fn uncorrelated_projector_form(ens: &DisorderEnsemble, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let EnsembleKind::SpectralUncorrelated { laws } = ens.kind() else {
        return Err(Error::WrongKind { expected: "spectral-uncorrelated".into(), found: ens.kind().name().into() });
    };
    let w0 = ens.omega0();
    let mut rates = Vec::with_capacity(laws.len());
    let mut energies = Vec::with_capacity(laws.len());
    for l in laws {
        let dl = l.log_derivative(w0 * t).conj() * w0;
        rates.push(-2.0 * dl.re);
        energies.push(-dl.im);
    }
    Ok((rates, energies))
}

/// Generator of `ρ̇ = −i[H, ρ] + Σ_j γ_j (Π_jρΠ_j − ½{Π_j, ρ})` with
/// diagonal `H = Σ h_j Π_j`, in the eigenbasis `v` (identity if `None`).
pub fn projector_form_generator(energies: &[f64], rates: &[f64], v: Option<&CMatrix>) -> CMatrix {
    let d = energies.len();
    let mut q = CMatrix::zeros(d * d, d * d);
    for a in 0..d {
        for b in 0..d {
            let dephase = if a == b { 0.0 } else { -0.5 * (rates[a] + rates[b]) };
            q[(a * d + b, a * d + b)] = c(dephase, -(energies[a] - energies[b]));
        }
    }
    match v {
        Some(v) => {
            let w = v.kronecker(&v.map(|z| z.conj()));
            &w * q * w.adjoint()
        }
        None => q,
    }
}

/// Single-Lindblad form for global Gaussian disorder:
/// `ρ̇ = −i[λ₀H₀, ρ] + 2σ²t (H₀ρH₀ − ½{H₀², ρ})`.
pub fn global_gaussian_generator(ens: &DisorderEnsemble, t: f64) -> Result<CMatrix> {
    match ens.kind() {
        EnsembleKind::SpectralGlobal { law, reference } if law.kind() == DistributionKind::Gaussian => {
            let d = reference.len();
            let mut h0 = CMatrix::zeros(d, d);
            for (j, r) in reference.iter().enumerate() {
                h0[(j, j)] = c(*r, 0.0);
            }
            if let Some(v) = ens.eigenbasis() {
                h0 = v * h0 * v.adjoint();
            }
            let k = h0.kronecker(&h0.map(|z| z.conj()));
            let m = &h0 * &h0;
            let s = law.scale();
            Ok(commutator_superop(&(&h0 * c(law.location(), 0.0))).into_matrix()
                + dissipator(&k, &m) * c(2.0 * s * s * t, 0.0))
        }
        _ => Err(Error::WrongKind { expected: "spectral-global with Gaussian law".into(), found: ens.kind().name().into() }),
    }
}

/// Closed-form master equation of a spectral ensemble on a grid.
///
/// In the eigenbasis the generator is diagonal with entries
/// `d/dt ln φ*_jk(ω₀t)`; only `A₀` and the diagonal basis members carry
/// weight. Times where some `φ_jk` vanishes are flagged.
pub fn spectral_master_equation(ens: &DisorderEnsemble, grid: &TimeGrid) -> Result<MasterEquationSeries> {
    if !ens.is_spectral() {
        return Err(Error::WrongKind { expected: "spectral kind".into(), found: ens.kind().name().into() });
    }
    let d = ens.dim();
    let basis = gell_mann_basis(d)?;
    let n = basis.len();
    let diag: Vec<Vec<f64>> = (0..n).map(|m| (0..d).map(|j| basis.op(m)[(j, j)].re).collect()).collect();
    // eigenframe members V A_n V† = Σ_m T_mn A_m with real T_mn = Tr[A_m V A_n V†]
    let rot = ens.eigenbasis().map(|v| {
        CMatrix::from_fn(n, n, |a, b| (basis.op(a) * v * basis.op(b) * v.adjoint()).trace())
    });
    let mut points = Vec::with_capacity(grid.len());
    for &t in grid.times() {
        let mut q = vec![c(0.0, 0.0); d * d];
        let mut ok = true;
        for j in 0..d {
            for k in 0..d {
                let (phi, dphi) = ens.level_spacing_cf_with_derivative(j, k, t)?;
                let v = (dphi / phi).conj();
                if phi.norm() < 1e-300 || !(v.re.is_finite() && v.im.is_finite()) {
                    ok = false;
                }
                q[j * d + k] = v;
            }
        }
        if !ok {
            points.push(None);
            continue;
        }
        // C_mn = Σ_jk (A_m)_jj q_jk (A_n)_kk in the eigenframe
        let mut cm = CMatrix::zeros(n, n);
        for a in 0..n {
            if diag[a].iter().all(|x| *x == 0.0) {
                continue;
            }
            for b in 0..n {
                if diag[b].iter().all(|x| *x == 0.0) {
                    continue;
                }
                let mut s = c(0.0, 0.0);
                for j in 0..d {
                    for k in 0..d {
                        s += q[j * d + k] * (diag[a][j] * diag[b][k]);
                    }
                }
                cm[(a, b)] = s;
            }
        }
        if let Some(r) = &rot {
            cm = r * cm * r.transpose();
        }
        let sd = (d as f64).sqrt();
        let mut ct = identity(d) * (cm[(0, 0)] / (2.0 * d as f64));
        for m in 1..n {
            ct += basis.op(m) * (cm[(m, 0)] / sd);
        }
        let h = (&ct - ct.adjoint()) * Complex64::new(0.0, 0.5);
        let gamma = cm.view((1, 1), (n - 1, n - 1)).into_owned();
        let generator = reconstruct_generator(&h, &gamma, &basis);
        let (rates, vectors, lindblads) =
            crate::extraction::diagonalize_gamma(&[Some(gamma.clone())], &basis).pop().flatten().expect("present");
        points.push(Some(LindbladPoint { h_eff: h, gamma, rates, vectors, lindblads, generator }));
    }
    // continuity across time for the eigen-decomposition
    let gammas: Vec<Option<CMatrix>> = points.iter().map(|p| p.as_ref().map(|p| p.gamma.clone())).collect();
    for (p, dg) in points.iter_mut().zip(crate::extraction::diagonalize_gamma(&gammas, &basis)) {
        if let (Some(p), Some((rates, vectors, lindblads))) = (p.as_mut(), dg) {
            p.rates = rates;
            p.vectors = vectors;
            p.lindblads = lindblads;
        }
    }
    let exact = crate::extraction::build_map_analytic(ens, grid)?;
    Ok(MasterEquationSeries {
        grid: grid.clone(),
        dim: d,
        omega0: ens.omega0(),
        provenance: Provenance::Analytic,
        points,
        exact_maps: Some(exact.maps().to_vec()),
    })
}

/// Which `χ̄` the depolarization law uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DepolarizationKind {
    Pe { sigma: f64 },
    Gue,
    GueLargeD,
}

/// Depolarization `Λ_t[ρ] = (1 − a)1/d + aρ` with rate `γ = −d/dt ln a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepolarizationLaw {
    pub dim: usize,
    pub omega0: f64,
    pub kind: DepolarizationKind,
}

pub fn depolarization_law(ens: &DisorderEnsemble) -> Result<DepolarizationLaw> {
    let kind = match ens.kind() {
        EnsembleKind::PoissonianUnitary { sigma, .. } => DepolarizationKind::Pe { sigma: *sigma },
        EnsembleKind::GaussianUnitary => DepolarizationKind::Gue,
        _ => {
            return Err(Error::WrongKind {
                expected: "unitarily invariant kind".into(),
                found: ens.kind().name().into(),
            })
        }
    };
    Ok(DepolarizationLaw { dim: ens.dim(), omega0: ens.omega0(), kind })
}

impl DepolarizationLaw {
    pub fn gue_large_d(dim: usize, omega0: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        Ok(Self { dim, omega0, kind: DepolarizationKind::GueLargeD })
    }

    /// `χ̄(t)` and `dχ̄/dt`.
    pub fn chi_bar(&self, t: f64) -> (f64, f64) {
        let d = self.dim as f64;
        let u = self.omega0 * t;
        match self.kind {
            DepolarizationKind::Pe { sigma } => {
                let x = 0.5 * sigma * u;
                let s = sinc(x);
                let ds = crate::numerics::sinc_prime(x) * 0.5 * sigma * self.omega0;
                (1.0 / d + (d - 1.0) / d * s * s, (d - 1.0) / d * 2.0 * s * ds)
            }
            DepolarizationKind::Gue => {
                let (chi, dchi) = crate::ensembles::gue_chi_bar(self.dim, u);
                (chi, dchi * self.omega0)
            }
            DepolarizationKind::GueLargeD => {
                let (chi, dchi) = gue_chi_bar_large_d(u);
                (chi, dchi * self.omega0)
            }
        }
    }

    /// Mixing probability `a = (d²χ̄ − 1)/(d² − 1)` and `ȧ`.
    pub fn mixing_with_derivative(&self, t: f64) -> (f64, f64) {
        let d2 = (self.dim * self.dim) as f64;
        let (chi, dchi) = self.chi_bar(t);
        ((d2 * chi - 1.0) / (d2 - 1.0), d2 * dchi / (d2 - 1.0))
    }

    pub fn mixing(&self, t: f64) -> f64 {
        self.mixing_with_derivative(t).0
    }

    /// `γ(t) = −ȧ/a`; infinite where `a = 0`.
    pub fn rate(&self, t: f64) -> f64 {
        let (a, da) = self.mixing_with_derivative(t);
        if a == 0.0 {
            return f64::INFINITY;
        }
        -da / a
    }

    /// Printed closed forms: the PE rate for any `d`, and the GUE rate at `d = 2`.
    pub fn rate_closed_form(&self, t: f64) -> Option<f64> {
        let d = self.dim as f64;
        let w0 = self.omega0;
        match self.kind {
            DepolarizationKind::Pe { sigma } => {
                if t == 0.0 {
                    return Some(0.0);
                }
                let k = 0.5 * w0 * sigma;
                let y = w0 * sigma * t;
                let num = d * (k * t * y.sin() + y.cos() - 1.0);
                let den = d * t * (k * t).sin().powi(2) + t.powi(3) * k * k;
                Some(-num / den)
            }
            DepolarizationKind::Gue if self.dim == 2 => {
                let u2 = (w0 * t).powi(2);
                Some(-2.0 * w0 * w0 * t * (u2 - 3.0) / (-2.0 * u2 + (0.5 * u2).exp() + 2.0))
            }
            _ => None,
        }
    }

    /// Large-d PE limit `2/t − ω₀σ cot(σω₀t/2)`.
    pub fn pe_large_d_rate(&self, t: f64) -> Option<f64> {
        match self.kind {
            DepolarizationKind::Pe { sigma } => Some(2.0 / t - self.omega0 * sigma / (0.5 * sigma * self.omega0 * t).tan()),
            _ => None,
        }
    }

    /// Lindblad operators `L₀ = 1/d`, `L_j = A_j/√d` with the orthonormal
    /// Gell-Mann members `A_j` (i.e. `G_j/√(2d)` for `Tr G_j² = 2`).
    pub fn lindblad_operators(&self) -> Result<Vec<CMatrix>> {
        let basis = gell_mann_basis(self.dim)?;
        let d = self.dim as f64;
        let mut ops = vec![identity(self.dim) / c(d, 0.0)];
        ops.extend((1..basis.len()).map(|m| basis.op(m) / c(d.sqrt(), 0.0)));
        Ok(ops)
    }

    /// `Tr ρ̄² = a²(P₀ − 1/d) + 1/d`.
    pub fn purity(&self, p0: f64, t: f64) -> Result<f64> {
        purity_evolution(self, p0, t)
    }

    /// Long-time purity `(d + 2 + P₀)/(1 + d)²`.
    pub fn asymptotic_purity(&self, p0: f64) -> Result<f64> {
        check_purity(p0, self.dim)?;
        let d = self.dim as f64;
        Ok((d + 2.0 + p0) / (1.0 + d).powi(2))
    }
}

impl Generator for DepolarizationLaw {
    fn dim(&self) -> usize {
        self.dim
    }

    fn superop(&self, t: f64) -> CMatrix {
        let d = self.dim;
        let one = vec_matrix(&identity(d));
        let proj = &one * one.adjoint() / c(d as f64, 0.0);
        (identity(d * d) - proj) * c(-self.rate(t), 0.0)
    }
}

fn check_purity(p0: f64, dim: usize) -> Result<()> {
    let lo = 1.0 / dim as f64;
    if !(p0 >= lo - 1e-12 && p0 <= 1.0 + 1e-12) {
        return Err(Error::InvalidPurity { purity: p0, dim });
    }
    Ok(())
}

pub fn purity_evolution(law: &DepolarizationLaw, p0: f64, t: f64) -> Result<f64> {
    check_purity(p0, law.dim)?;
    let d = law.dim as f64;
    let a = law.mixing(t);
    Ok(a * a * (p0 - 1.0 / d) + 1.0 / d)
}

/// Time scale `|2γ̇/γ⃛|^{1/2}` at `t → 0⁺` beyond which the short-time
/// expansion of a rate stops being reliable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    Finite(f64),
    Unbounded,
}

/// Horizon from cumulants of a qubit law: `γ = c₁t + c₃t³ + …` with
/// `c₁ = κ₂ω₀²/2`, `c₃ = −κ₄ω₀⁴/12`, giving `√(2κ₂/|κ₄|)/ω₀`.
pub fn validity_horizon_from_cumulants(kappa: &crate::distributions::CumulantVector, omega0: f64) -> Result<Horizon> {
    if kappa.order() < 4 {
        return Err(Error::ContractViolation("need cumulants up to order 4".into()));
    }
    if !kappa.finite[..4].iter().all(|f| *f) {
        return Err(Error::UnsupportedDistribution("cumulants of this law are not finite".into()));
    }
    let (k2, k4) = (kappa.get(2), kappa.get(4));
    if k4 == 0.0 {
        return Ok(Horizon::Unbounded);
    }
    Ok(Horizon::Finite((2.0 * k2 / k4.abs()).sqrt() / omega0))
}

/// Horizon from a rate function odd in `t` near 0, by least-squares fit of
/// `γ(t)/t = c₁ + c₃t² + c₅t⁴ + c₇t⁶` on `(0, 0.3·time_scale]`.
pub fn validity_horizon_from_rate<F: Fn(f64) -> f64>(rate: F, time_scale: f64) -> Horizon {
    let m = 24;
    let h = 0.3 * time_scale / m as f64;
    let mut a = nalgebra::DMatrix::<f64>::zeros(m, 4);
    let mut b = nalgebra::DVector::<f64>::zeros(m);
    for i in 0..m {
        let t = (i + 1) as f64 * h;
        let s = t / time_scale;
        for p in 0..4 {
            a[(i, p)] = s.powi(2 * p as i32);
        }
        b[i] = rate(t) / t;
    }
    let coef = a.svd(true, true).solve(&b, 1e-14).expect("full rank");
    let c1 = coef[0];
    let c3 = coef[1] / time_scale.powi(2);
    if c3.abs() <= 1e-7 * c1.abs() / time_scale.powi(2) {
        return Horizon::Unbounded;
    }
    // γ̇(0) = c₁, γ⃛(0) = 6c₃
    Horizon::Finite((2.0 * c1 / (6.0 * c3)).abs().sqrt())
}

/// `(H_eff, Γ)` of a generator superoperator in the Gell-Mann basis.
pub fn lindblad_split(q: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    let sop = SuperoperatorMatrix::from_matrix(q.clone())?;
    let basis = gell_mann_basis(sop.dim())?;
    generator_to_lindblad(&sop, &basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::cumulant_series_rates;
    use crate::ensembles::haar_unitary;
    use crate::extraction::{build_map_analytic, build_map_montecarlo, extract_generator, extract_master_equation};
    use crate::operators::{max_abs, max_abs_diff, random_density_matrix, DensityMatrix};
    use crate::rng::SeedStream;
    use nalgebra::DMatrix;

    fn families(l0: f64) -> Vec<ScalarDistribution> {
        vec![
            ScalarDistribution::cauchy_lorentz(l0, 0.8).unwrap(),
            ScalarDistribution::gaussian(l0, 0.8).unwrap(),
            ScalarDistribution::uniform_box(l0, 1.6).unwrap(),
            ScalarDistribution::levy(l0, 0.8).unwrap(),
        ]
    }

    #[test]
    fn rates_match_numerical_log_derivative() {
        let w0 = 1.3;
        for law in families(0.35) {
            let pair = qubit_rates(law, w0).unwrap();
            for t in [0.1, 0.7, 1.9, 3.3] {
                // log-derivative of the CF by central differences on ln φ
                let h = 1e-5;
                let lnphi = |t: f64| law.char_fn(w0 * t).ln();
                let dl = (lnphi(t + h) - lnphi(t - h)) / (2.0 * h);
                assert!((pair.rate(t) + 0.5 * dl.conj().re).abs() < 1e-8, "{:?} rate at {t}", law.kind());
                assert!((pair.energy(t) - 0.5 * dl.im).abs() < 1e-8, "{:?} energy at {t}", law.kind());
            }
        }
    }

    #[test]
    fn closed_form_rates() {
        let cl = qubit_rates(ScalarDistribution::cauchy_lorentz(0.2, 1.0).unwrap(), 1.0).unwrap();
        assert_eq!(cl.rate(3.0), 0.5);
        assert_eq!(cl.energy(1.0), 0.1);
        let g = qubit_rates(ScalarDistribution::gaussian(0.0, 2.0).unwrap(), 0.5).unwrap();
        assert!((g.rate(3.0) - 1.5).abs() < 1e-15);
        let pm = qubit_rates(ScalarDistribution::point_mass(0.6), 2.0).unwrap();
        assert_eq!((pm.rate(1.0), pm.energy(1.0)), (0.0, 0.6));
        let bx = qubit_rates(ScalarDistribution::uniform_box(0.0, 2.0).unwrap(), 1.0).unwrap();
        assert!((bx.singular_times(10.0)[0] - PI).abs() < 1e-15);
        assert_eq!(bx.singular_times(10.0).len(), 3);
        assert_eq!(bx.rate(PI), f64::INFINITY);
        assert_eq!(bx.rate(0.0), 0.0);
        assert!(bx.rate(1e-6).abs() < 1e-6);
    }

    #[test]
    fn box_rate_series_branch_is_continuous() {
        let bx = qubit_rates(ScalarDistribution::uniform_box(0.0, 1.0).unwrap(), 1.0).unwrap();
        // x = t/2 crosses the series threshold at t = 2e-3
        let below = bx.rate(2e-3 * (1.0 - 1e-9));
        let above = bx.rate(2e-3 * (1.0 + 1e-9));
        assert!((below - above).abs() < 1e-12);
        // series oracle: γ = t/24 + t³/1440 + …
        let t: f64 = 0.3;
        assert!((bx.rate(t) - (t / 24.0 + t.powi(3) / 1440.0 + t.powi(5) / 60480.0)).abs() < 1e-9);
    }

    #[test]
    fn coherence_matches_cf_path() {
        let b = [0.4, 0.8, 1.0 / 3.0];
        let rho = DensityMatrix::from_bloch(b).unwrap();
        let r01 = rho.matrix()[(0, 1)];
        assert!((r01.norm() - 0.4472).abs() < 1e-3);
        for law in families(0.25) {
            let pair = qubit_rates(law, 1.0).unwrap();
            for t in [0.0, 0.3, 1.0, 2.5, 7.0] {
                let want = r01 * law.char_fn(t).conj();
                assert!((qubit_coherence(r01, &pair, t) - want).norm() < 1e-9, "{:?} {t}", law.kind());
            }
        }
        let bx = qubit_rates(ScalarDistribution::uniform_box(0.0, 1.0).unwrap(), 1.0).unwrap();
        assert_eq!(qubit_coherence(r01, &bx, 2.0 * PI), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn cumulant_series_reproduces_gaussian_rates() {
        let g = ScalarDistribution::gaussian(0.4, 0.9).unwrap();
        let kappa = g.cumulants(8).unwrap();
        let pair = qubit_rates(g, 1.7).unwrap();
        for t in [0.2, 1.0, 4.0] {
            let (phi, gamma) = cumulant_series_rates(&kappa, 1.7, t, 8).unwrap();
            assert!((phi - pair.energy(t)).abs() < 1e-12);
            assert!((gamma - pair.rate(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn short_time_gaussian_qubit_equals_exact_generator() {
        let law = ScalarDistribution::gaussian(0.3, 0.7).unwrap();
        let ens = DisorderEnsemble::qubit(law, 1.4).unwrap();
        let st = short_time_lindblad(&ens).unwrap();
        let pair = qubit_rates(law, 1.4).unwrap();
        for t in [0.0, 0.5, 3.0] {
            assert!(max_abs_diff(&st.superop(t), &pair.superop(t)) < 1e-12);
        }
    }

    #[test]
    fn short_time_box_qubit_rate_within_one_percent() {
        let law = ScalarDistribution::uniform_box(0.0, 1.0).unwrap();
        let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
        let st = short_time_lindblad(&ens).unwrap();
        let t = 0.05;
        let (_, gamma) = lindblad_split(&st.superop(t)).unwrap();
        // Γ_zz = 2γ in the σ_z/√2 slot
        let short = 0.5 * gamma[(2, 2)].re;
        let exact = qubit_rates(law, 1.0).unwrap().rate(t);
        assert!(((short - exact) / exact).abs() < 0.01);
    }

    #[test]
    fn short_time_rejects_heavy_tails() {
        for law in [ScalarDistribution::cauchy_lorentz(0.0, 1.0).unwrap(), ScalarDistribution::levy(0.0, 1.0).unwrap()] {
            let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
            assert!(matches!(short_time_lindblad(&ens), Err(Error::NoAverageHamiltonian)));
        }
    }

    #[test]
    fn short_time_single_realization_has_no_dissipator() {
        let mut rng = SeedStream::new(2).rng();
        let h = crate::operators::random_hermitian(3, &mut rng);
        let ens = DisorderEnsemble::finite_list(3, 1.0, vec![(h.clone(), 1.0)]).unwrap();
        let st = short_time_lindblad(&ens).unwrap();
        let ops = st.operators.as_ref().unwrap();
        assert!(max_abs(&ops[0].0) < 1e-14);
        assert!(max_abs_diff(&st.superop(2.0), commutator_superop(&h).matrix()) < 1e-13);
    }

    #[test]
    fn short_time_matches_exact_generator_to_first_order() {
        // Q(t) − Q_short(t) = O(t²) for every ensemble with finite variance
        let v = haar_unitary(3, SeedStream::new(4));
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.4, 0.2, 0.0, 0.2, 0.6]);
        let cases = vec![
            DisorderEnsemble::new(3, 1.2, EnsembleKind::SpectralGeneral { mean: vec![0.1, 0.4, -0.3], covariance: &a * a.transpose() })
                .unwrap()
                .with_eigenbasis(v)
                .unwrap(),
            DisorderEnsemble::new(
                3,
                1.0,
                EnsembleKind::SpectralUncorrelated {
                    laws: vec![
                        ScalarDistribution::uniform_box(0.2, 1.0).unwrap(),
                        ScalarDistribution::gaussian(-0.1, 0.5).unwrap(),
                        ScalarDistribution::point_mass(0.3),
                    ],
                },
            )
            .unwrap(),
            DisorderEnsemble::poissonian(3, 1.0, 2.0, 0.4).unwrap(),
            DisorderEnsemble::gue(3, 0.8).unwrap(),
        ];
        for ens in cases {
            let st = short_time_lindblad(&ens).unwrap();
            let g = TimeGrid::new(vec![0.0, 1e-3, 2e-3]).unwrap();
            let gens = extract_generator(&build_map_analytic(&ens, &g).unwrap()).unwrap();
            for (i, t) in g.times().iter().enumerate() {
                let q = gens.generators[i].as_ref().unwrap();
                let diff = max_abs_diff(q.matrix(), &st.superop(*t));
                assert!(diff < 50.0 * t * t + 1e-12, "{}: {diff} at {t}", ens.kind().name());
            }
        }
    }

    #[test]
    fn invariant_short_time_rate_is_positive_and_matches_exact_slope() {
        for ens in [DisorderEnsemble::poissonian(4, 1.0, 4.0, 0.0).unwrap(), DisorderEnsemble::gue(2, 1.0).unwrap()] {
            let coef = invariant_short_time_coefficient(&ens).unwrap();
            assert!(coef > 0.0);
            let law = depolarization_law(&ens).unwrap();
            let t = 1e-4;
            assert!((law.rate(t) / t - coef).abs() < 1e-5 * coef);
            // d·Γ_mm of the short-time generator equals the depolarization rate
            let st = short_time_lindblad(&ens).unwrap();
            let (_, gamma) = lindblad_split(&st.superop(1.0)).unwrap();
            assert!((ens.dim() as f64 * gamma[(0, 0)].re - coef).abs() < 1e-12);
        }
    }

    #[test]
    fn pe_identity_chain() {
        for d in [2usize, 4, 8] {
            let ens = DisorderEnsemble::poissonian(d, 1.0, 4.0, 0.3).unwrap();
            let law = depolarization_law(&ens).unwrap();
            for t in [0.05, 0.3, 0.9, 1.7, 5.0] {
                let x = 2.0 * t;
                let want = (1.0 + d as f64 * sinc(x).powi(2)) / (1.0 + d as f64);
                assert!((law.mixing(t) - want).abs() < 1e-10);
                let chi = ens.chi_bar(t).unwrap();
                assert!((law.mixing(t) - ((d * d) as f64 * chi - 1.0) / ((d * d) as f64 - 1.0)).abs() < 1e-14);
                assert!((law.rate(t) - law.rate_closed_form(t).unwrap()).abs() < 1e-9 * (1.0 + law.rate(t).abs()));
            }
            assert_eq!(law.mixing(0.0), 1.0);
            assert_eq!(law.rate(0.0), 0.0);
        }
    }

    #[test]
    fn pe_large_d_limit() {
        let law = DepolarizationLaw { dim: 100_000, omega0: 1.0, kind: DepolarizationKind::Pe { sigma: 1.0 } };
        for t in [0.5, 2.0, 4.0] {
            assert!((law.rate(t) - law.pe_large_d_rate(t).unwrap()).abs() < 1e-3);
        }
    }

    #[test]
    fn gue_d2_printed_rate() {
        let law = depolarization_law(&DisorderEnsemble::gue(2, 1.3).unwrap()).unwrap();
        for t in [0.1, 0.8, 1.5, 2.3] {
            assert!((law.rate(t) - law.rate_closed_form(t).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn depolarization_lindblad_normalization() {
        let mut rng = SeedStream::new(6).rng();
        for d in [2usize, 3, 4, 8] {
            let law = DepolarizationLaw { dim: d, omega0: 1.0, kind: DepolarizationKind::Gue };
            let ops = law.lindblad_operators().unwrap();
            let rho = random_density_matrix(d, &mut rng);
            let mut sandwich = CMatrix::zeros(d, d);
            let mut norm = CMatrix::zeros(d, d);
            for l in &ops {
                sandwich += l * rho.matrix() * l.adjoint();
                norm += l.adjoint() * l;
            }
            assert!(max_abs_diff(&sandwich, &(identity(d) / c(d as f64, 0.0))) < 1e-12);
            assert!(max_abs_diff(&norm, &identity(d)) < 1e-12);
        }
    }

    #[test]
    fn depolarization_generator_matches_extraction() {
        let ens = DisorderEnsemble::poissonian(3, 1.0, 2.0, 0.0).unwrap();
        let law = depolarization_law(&ens).unwrap();
        let g = TimeGrid::uniform(2.0, 9).unwrap();
        let me = extract_master_equation(&build_map_analytic(&ens, &g).unwrap()).unwrap();
        for (t, p) in g.times().iter().zip(&me.points) {
            let p = p.as_ref().unwrap();
            assert!(max_abs_diff(p.generator.matrix(), &law.superop(*t)) < 1e-10);
            for r in &p.rates {
                assert!((3.0 * r - law.rate(*t)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn purity_formulas() {
        let law = DepolarizationLaw { dim: 2, omega0: 1.0, kind: DepolarizationKind::Pe { sigma: 1.0 } };
        assert!((law.asymptotic_purity(1.0).unwrap() - 5.0 / 9.0).abs() < 1e-15);
        assert!(matches!(law.purity(0.3, 1.0), Err(Error::InvalidPurity { .. })));
        assert!(matches!(law.purity(1.2, 1.0), Err(Error::InvalidPurity { .. })));
        for t in [0.0, 1.0, 10.0] {
            assert!((law.purity(0.5, t).unwrap() - 0.5).abs() < 1e-15);
        }
        let far = law.purity(1.0, 1e6).unwrap();
        assert!((far - 5.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn gue_dips_to_maximally_mixed_but_pe_does_not() {
        let d = 8;
        let df = d as f64;
        let gue = depolarization_law(&DisorderEnsemble::gue(d, 1.0).unwrap()).unwrap();
        let pe = depolarization_law(&DisorderEnsemble::poissonian(d, 1.0, 4.0, 0.0).unwrap()).unwrap();
        let ts: Vec<f64> = (0..=2000).map(|i| 6.0 * i as f64 / 2000.0).collect();
        let min_gue = ts.iter().map(|&t| gue.purity(1.0, t).unwrap()).fold(f64::INFINITY, f64::min);
        assert!((min_gue - 1.0 / df).abs() < 0.02 / df, "{min_gue}");
        // the box mixing probability never drops below 1/(d + 1)
        let min_pe = ts.iter().map(|&t| pe.purity(1.0, t).unwrap()).fold(f64::INFINITY, f64::min);
        let floor = 1.0 / df + (1.0 - 1.0 / df) / (df + 1.0).powi(2);
        assert!(min_pe >= floor - 1e-12 && min_pe < floor + 1e-4, "{min_pe}");
    }

    #[test]
    fn spectral_closed_form_matches_extraction() {
        let v = haar_unitary(3, SeedStream::new(31));
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.4, 0.2, 0.0, 0.2, 0.6]);
        let cases = vec![
            DisorderEnsemble::new(
                3,
                1.0,
                EnsembleKind::SpectralGlobal { law: ScalarDistribution::gaussian(0.2, 0.5).unwrap(), reference: vec![1.0, 2.0, 4.0] },
            )
            .unwrap(),
            DisorderEnsemble::new(3, 1.1, EnsembleKind::SpectralGeneral { mean: vec![0.0, 0.5, 1.0], covariance: &a * a.transpose() })
                .unwrap()
                .with_eigenbasis(v)
                .unwrap(),
            DisorderEnsemble::new(
                3,
                0.9,
                EnsembleKind::SpectralUncorrelated {
                    laws: vec![
                        ScalarDistribution::cauchy_lorentz(0.1, 0.3).unwrap(),
                        ScalarDistribution::levy(0.0, 0.2).unwrap(),
                        ScalarDistribution::uniform_box(0.4, 0.9).unwrap(),
                    ],
                },
            )
            .unwrap(),
        ];
        let g = TimeGrid::uniform(3.0, 31).unwrap();
        for ens in cases {
            let closed = spectral_master_equation(&ens, &g).unwrap();
            let extracted = extract_master_equation(&build_map_analytic(&ens, &g).unwrap()).unwrap();
            for (p, q) in closed.points.iter().zip(&extracted.points) {
                match (p, q) {
                    (Some(p), Some(q)) => {
                        let s = 1.0 + max_abs(&q.gamma);
                        assert!(max_abs_diff(&p.gamma, &q.gamma) < 1e-8 * s, "{}", ens.kind().name());
                        assert!(max_abs_diff(&p.h_eff, &q.h_eff) < 1e-8 * s);
                        assert!(max_abs_diff(p.generator.matrix(), q.generator.matrix()) < 1e-8 * s);
                    }
                    (None, None) => {}
                    _ => panic!("flags differ for {}", ens.kind().name()),
                }
            }
        }
    }

    #[test]
    fn spectral_lindblads_are_diagonal() {
        let ens = DisorderEnsemble::new(
            3,
            1.0,
            EnsembleKind::SpectralUncorrelated {
                laws: vec![
                    ScalarDistribution::gaussian(0.0, 0.5).unwrap(),
                    ScalarDistribution::uniform_box(0.0, 1.0).unwrap(),
                    ScalarDistribution::cauchy_lorentz(0.0, 0.3).unwrap(),
                ],
            },
        )
        .unwrap();
        let g = TimeGrid::uniform(2.0, 11).unwrap();
        let me = extract_master_equation(&build_map_analytic(&ens, &g).unwrap()).unwrap();
        for p in me.points.iter().flatten() {
            for (r, l) in p.rates.iter().zip(&p.lindblads) {
                if r.abs() < 1e-12 {
                    continue;
                }
                for j in 0..3 {
                    let mut proj = CMatrix::zeros(3, 3);
                    proj[(j, j)] = c(1.0, 0.0);
                    assert!(max_abs(&(l * &proj - &proj * l)) < 1e-10);
                }
            }
        }
    }

    #[test]
    fn uncorrelated_and_global_forms() {
        let laws = vec![
            ScalarDistribution::gaussian(0.1, 0.5).unwrap(),
            ScalarDistribution::uniform_box(0.0, 1.0).unwrap(),
            ScalarDistribution::cauchy_lorentz(-0.2, 0.3).unwrap(),
        ];
        let ens = DisorderEnsemble::new(3, 1.2, EnsembleKind::SpectralUncorrelated { laws }).unwrap();
        let g = TimeGrid::new(vec![0.0, 0.4, 1.3, 2.2]).unwrap();
        let gens = extract_generator(&build_map_analytic(&ens, &g).unwrap()).unwrap();
        for (i, &t) in g.times().iter().enumerate() {
            let (rates, energies) = uncorrelated_projector_form(&ens, t).unwrap();
            let q = projector_form_generator(&energies, &rates, None);
            assert!(max_abs_diff(&q, gens.generators[i].as_ref().unwrap().matrix()) < 1e-10);
        }
        let glob = DisorderEnsemble::new(
            3,
            1.0,
            EnsembleKind::SpectralGlobal { law: ScalarDistribution::gaussian(0.3, 0.6).unwrap(), reference: vec![1.0, 2.0, 4.0] },
        )
        .unwrap();
        let gens = extract_generator(&build_map_analytic(&glob, &g).unwrap()).unwrap();
        for (i, &t) in g.times().iter().enumerate() {
            let q = global_gaussian_generator(&glob, t).unwrap();
            assert!(max_abs_diff(&q, gens.generators[i].as_ref().unwrap().matrix()) < 1e-10);
        }
    }

    #[test]
    fn degenerate_global_levels_keep_coherence() {
        let glob = DisorderEnsemble::new(
            3,
            1.0,
            EnsembleKind::SpectralGlobal { law: ScalarDistribution::uniform_box(0.0, 1.0).unwrap(), reference: vec![1.0, 1.0, 3.0] },
        )
        .unwrap();
        let g = TimeGrid::uniform(5.0, 26).unwrap();
        let maps = build_map_analytic(&glob, &g).unwrap();
        for f in maps.maps() {
            assert_eq!(f.matrix()[(1, 1)], c(1.0, 0.0));
        }
    }

    #[test]
    fn d2_spectral_matches_qubit_rates() {
        let law = ScalarDistribution::uniform_box(0.3, 1.2).unwrap();
        let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
        let g = TimeGrid::uniform(4.0, 17).unwrap();
        let me = spectral_master_equation(&ens, &g).unwrap();
        let pair = qubit_rates(law, 1.0).unwrap();
        for (t, p) in g.times().iter().zip(&me.points) {
            if let Some(p) = p {
                assert!(max_abs_diff(p.generator.matrix(), &pair.superop(*t)) < 1e-9);
            }
        }
    }

    #[test]
    fn horizons() {
        let g = ScalarDistribution::gaussian(0.0, 1.0).unwrap();
        assert_eq!(validity_horizon_from_cumulants(&g.cumulants(4).unwrap(), 1.0).unwrap(), Horizon::Unbounded);
        let pair = qubit_rates(g, 1.0).unwrap();
        assert_eq!(validity_horizon_from_rate(|t| pair.rate(t), 1.0), Horizon::Unbounded);

        let b = ScalarDistribution::uniform_box(0.0, 1.0).unwrap();
        let Horizon::Finite(hc) = validity_horizon_from_cumulants(&b.cumulants(4).unwrap(), 1.0).unwrap() else {
            panic!("box horizon should be finite")
        };
        // γ_B = t/24 + t³/1440 + …: |2γ̇/γ⃛| = 2(1/24)/(6/1440) = 20
        assert!((hc - 20f64.sqrt()).abs() < 1e-12);
        let pair = qubit_rates(b, 1.0).unwrap();
        let Horizon::Finite(hr) = validity_horizon_from_rate(|t| pair.rate(t), 1.0) else { panic!() };
        assert!((hr - hc).abs() < 1e-6 * hc);
        assert!(validity_horizon_from_cumulants(&ScalarDistribution::cauchy_lorentz(0.0, 1.0).unwrap().cumulants(4).unwrap(), 1.0).is_err());

        let horizon = |sigma: f64, w0: f64| {
            // d = 4 is special: the t³ term of the box rate vanishes there
            let law = depolarization_law(&DisorderEnsemble::poissonian(3, w0, sigma, 0.0).unwrap()).unwrap();
            match validity_horizon_from_rate(|t| law.rate(t), 1.0 / (sigma * w0)) {
                Horizon::Finite(h) => h,
                Horizon::Unbounded => panic!("PE horizon is finite"),
            }
        };
        let base = horizon(1.0, 1.0);
        assert!((horizon(4.0, 1.0) * 4.0 - base).abs() < 1e-6 * base);
        assert!((horizon(1.0, 2.5) * 2.5 - base).abs() < 1e-6 * base);
    }

    #[test]
    fn monte_carlo_extracted_rate_on_cl_qubit() {
        // the Markovian law keeps a constant rate even through the sampled path
        let law = ScalarDistribution::cauchy_lorentz(0.0, 1.0).unwrap();
        let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
        let g = TimeGrid::uniform(1.0, 41).unwrap();
        let maps = build_map_montecarlo(&ens, &g, 100_000, SeedStream::new(77)).unwrap();
        let (val, se) = crate::extraction::jackknife(&maps, |m| {
            let me = extract_master_equation(m)?;
            Ok(me.points.iter().map(|p| 0.5 * p.as_ref().unwrap().gamma[(2, 2)].re).collect())
        })
        .unwrap();
        for i in 0..val.len() {
            assert!((val[i] - 0.5).abs() <= 3.0 * se[i] + 1e-6, "{i}: {} ± {}", val[i], se[i]);
        }
    }
}
