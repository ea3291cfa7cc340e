//! Average dynamical maps and their time-local generators.
//!
//! `F̄(t)` is built on a time grid either in closed form or by Monte Carlo.
//! The generator `Q = Ḟ·F̄⁻¹` is then projected onto a Hermitian basis to give
//! the effective Hamiltonian `H(t)`, the decoherence matrix `Γ(t)`, and after
//! diagonalization the rates `γ_k(t)` and Lindblad operators `L_k(t)`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensembles::{DisorderEnsemble, EnsembleKind};
use crate::error::{Error, Result};
use crate::operators::{
    c, commutator_superop, conjugation_superop, gell_mann_basis, hermitian_eigh, hermitian_part, identity,
    CMatrix, HermitianBasis, SuperoperatorMatrix, I,
};
use crate::rng::SeedStream;

/// Relative singular-value threshold below which `F̄` counts as singular.
pub const SINGULAR_RATIO: f64 = 1e-8;

/// Default number of Monte Carlo batches used for jackknife errors.
pub const DEFAULT_BATCHES: usize = 50;

/// Memory budget for stored per-batch map sums.
const BATCH_MEMORY_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Strictly increasing finite times starting at 0.
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("grid must start at 0, got {}", times[0])));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite time".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("times must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    /// `n` equally spaced points on `[0, t_max]`.
    pub fn uniform(t_max: f64, n: usize) -> Result<Self> {
        if n < 2 || !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::InvalidGrid(format!("need n >= 2 and t_max > 0, got {n}, {t_max}")));
        }
        let h = t_max / (n - 1) as f64;
        let mut times: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
        times[n - 1] = t_max;
        Self::new(times)
    }

    /// 400 points on `[0, 3π/(σω₀)]`.
    pub fn default_for(sigma: f64, omega0: f64) -> Result<Self> {
        Self::uniform(3.0 * std::f64::consts::PI / (sigma * omega0), 400)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    /// Common spacing if the grid is uniform.
    pub fn step(&self) -> Option<f64> {
        if self.len() < 2 {
            return None;
        }
        let h = self.t_max() / (self.len() - 1) as f64;
        self.times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h)
            .then_some(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Analytic,
    /// Exact probability-weighted sum over an explicit list.
    FiniteList,
    MonteCarlo { n_samples: usize, seed: u64, batches: usize },
}

impl Provenance {
    /// Whether maps are exact and may bridge singular intervals.
    pub fn is_exact(&self) -> bool {
        !matches!(self, Self::MonteCarlo { .. })
    }
}

#[derive(Debug, Clone)]
struct BatchSums {
    counts: Vec<usize>,
    /// `sums[b][i]` is the sum of realization maps of batch `b` at time `i`.
    sums: Vec<Vec<CMatrix>>,
    /// Matching sums of realization derivatives; `None` when the series is
    /// differenced instead.
    dsums: Option<Vec<Vec<CMatrix>>>,
}

/// `F̄(t)` and `dF̄/dt` on a grid. Monte Carlo series carry the sample mean
/// of the per-realization derivatives when the Hamiltonian has a finite
/// second moment, and a finite-difference derivative of `F̄` otherwise.
#[derive(Debug, Clone)]
pub struct DynamicalMapSeries {
    grid: TimeGrid,
    dim: usize,
    omega0: f64,
    maps: Vec<SuperoperatorMatrix>,
    derivatives: Vec<SuperoperatorMatrix>,
    provenance: Provenance,
    batches: Option<BatchSums>,
}

impl DynamicalMapSeries {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn maps(&self) -> &[SuperoperatorMatrix] {
        &self.maps
    }

    pub fn derivatives(&self) -> &[SuperoperatorMatrix] {
        &self.derivatives
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn batch_count(&self) -> usize {
        self.batches.as_ref().map_or(0, |b| b.counts.len())
    }

    /// Monte Carlo series with batch `b` removed.
    pub fn leave_one_out(&self, b: usize) -> Option<Self> {
        let bs = self.batches.as_ref()?;
        if bs.counts.len() < 2 || b >= bs.counts.len() {
            return None;
        }
        let n: usize = bs.counts.iter().sum::<usize>() - bs.counts[b];
        let mean_without = |sums: &[Vec<CMatrix>]| -> Vec<SuperoperatorMatrix> {
            (0..self.grid.len())
                .map(|i| {
                    let mut acc = CMatrix::zeros(self.dim * self.dim, self.dim * self.dim);
                    for (k, s) in sums.iter().enumerate() {
                        if k != b {
                            acc += &s[i];
                        }
                    }
                    superop(acc / c(n as f64, 0.0))
                })
                .collect()
        };
        let maps = mean_without(&bs.sums);
        let derivatives = match &bs.dsums {
            Some(ds) => mean_without(ds),
            None => finite_difference(&maps, &self.grid).ok()?,
        };
        Some(Self {
            grid: self.grid.clone(),
            dim: self.dim,
            omega0: self.omega0,
            maps,
            derivatives,
            provenance: self.provenance,
            batches: None,
        })
    }
}

/// Jackknife estimate over Monte Carlo batches of a vector statistic.
///
/// Returns `(value, standard error)` per component; the value is the
/// statistic of the full series. Fails for series without batches.
pub fn jackknife<F>(maps: &DynamicalMapSeries, stat: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&DynamicalMapSeries) -> Result<Vec<f64>> + Sync,
{
    let b = maps.batch_count();
    if b < 2 {
        return Err(Error::ContractViolation("jackknife needs at least two Monte Carlo batches".into()));
    }
    let full = stat(maps)?;
    let loo: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|k| stat(&maps.leave_one_out(k).expect("batches present")))
        .collect::<Result<_>>()?;
    let bf = b as f64;
    let se = (0..full.len())
        .map(|i| {
            let mean = loo.iter().map(|v| v[i]).sum::<f64>() / bf;
            let ss: f64 = loo.iter().map(|v| (v[i] - mean).powi(2)).sum();
            ((bf - 1.0) / bf * ss).sqrt()
        })
        .collect();
    Ok((full, se))
}

fn superop(m: CMatrix) -> SuperoperatorMatrix {
    SuperoperatorMatrix::from_matrix(m).expect("square d²×d² matrix")
}

/// Closed-form `F̄(t)` and `Ḟ(t)` for every kind except finite-list.
pub fn build_map_analytic(ens: &DisorderEnsemble, grid: &TimeGrid) -> Result<DynamicalMapSeries> {
    let d = ens.dim();
    let n = d * d;
    let times = grid.times();
    let pairs: Vec<(SuperoperatorMatrix, SuperoperatorMatrix)> = if ens.is_spectral() {
        let w = ens.eigenbasis().map(|v| v.kronecker(&v.map(|z| z.conj())));
        times
            .par_iter()
            .map(|&t| {
                let mut f = CMatrix::zeros(n, n);
                let mut fd = CMatrix::zeros(n, n);
                for j in 0..d {
                    for k in 0..d {
                        let (phi, dphi) = ens.level_spacing_cf_with_derivative(j, k, t)?;
                        f[(j * d + k, j * d + k)] = phi.conj();
                        fd[(j * d + k, j * d + k)] = dphi.conj();
                    }
                }
                if let Some(w) = &w {
                    f = w * f * w.adjoint();
                    fd = w * fd * w.adjoint();
                }
                Ok((superop(f), superop(fd)))
            })
            .collect::<Result<_>>()?
    } else if ens.is_unitarily_invariant() {
        let df = d as f64;
        let one = crate::operators::vec_matrix(&identity(d));
        let proj = &one * one.adjoint() / c(df, 0.0);
        let id = identity(n);
        times
            .par_iter()
            .map(|&t| {
                let (chi, dchi) = ens.chi_bar_with_derivative(t)?;
                let a = (df * df * chi - 1.0) / (df * df - 1.0);
                let da = df * df * dchi / (df * df - 1.0);
                let f = &id * c(a, 0.0) + &proj * c(1.0 - a, 0.0);
                let fd = (&id - &proj) * c(da, 0.0);
                Ok((superop(f), superop(fd)))
            })
            .collect::<Result<_>>()?
    } else {
        return Err(Error::UnsupportedForKind {
            kind: ens.kind().name().into(),
            reason: "no closed-form map; use build_map_montecarlo".into(),
        });
    };
    let (maps, derivs) = pairs.into_iter().unzip();
    Ok(DynamicalMapSeries {
        grid: grid.clone(),
        dim: d,
        omega0: ens.omega0(),
        maps,
        derivatives: derivs,
        provenance: Provenance::Analytic,
        batches: None,
    })
}

/// Accumulate `U ⊗ conj(U)` into a row-major d²×d² buffer.
fn add_kron_conj(acc: &mut [Complex64], u: &[Complex64], d: usize, w: f64) {
    add_kron_conj_pair(acc, u, u, d, w);
}

/// Accumulate `A ⊗ conj(B)` into a row-major d²×d² buffer.
fn add_kron_conj_pair(acc: &mut [Complex64], a: &[Complex64], b: &[Complex64], d: usize, w: f64) {
    let n = d * d;
    for j in 0..d {
        for r in 0..d {
            let ujr = a[j * d + r] * w;
            for k in 0..d {
                let row = (j * d + k) * n + r * d;
                let urow = &b[k * d..k * d + d];
                let dst = &mut acc[row..row + d];
                for (s, x) in dst.iter_mut().enumerate() {
                    *x += ujr * urow[s].conj();
                }
            }
        }
    }
}

/// Row-major `U(t) = V diag(e^{−iEt}) V†`.
fn propagator_into(e: &[f64], v: &CMatrix, t: f64, phases: &mut [Complex64], out: &mut [Complex64]) {
    let d = e.len();
    for (p, &ek) in phases.iter_mut().zip(e) {
        *p = Complex64::from_polar(1.0, -ek * t);
    }
    for j in 0..d {
        for k in 0..d {
            let mut s = c(0.0, 0.0);
            for m in 0..d {
                s += v[(j, m)] * phases[m] * v[(k, m)].conj();
            }
            out[j * d + k] = s;
        }
    }
}

/// Row-major `dU/dt = V diag(−iE e^{−iEt}) V†`.
fn propagator_derivative_into(e: &[f64], v: &CMatrix, t: f64, phases: &mut [Complex64], out: &mut [Complex64]) {
    for (p, &ek) in phases.iter_mut().zip(e) {
        *p = Complex64::new(0.0, -ek) * Complex64::from_polar(1.0, -ek * t);
    }
    let d = e.len();
    for j in 0..d {
        for k in 0..d {
            let mut s = c(0.0, 0.0);
            for m in 0..d {
                s += v[(j, m)] * phases[m] * v[(k, m)].conj();
            }
            out[j * d + k] = s;
        }
    }
}

fn row_major_to_matrix(buf: &[Complex64], n: usize) -> CMatrix {
    CMatrix::from_row_slice(n, n, buf)
}

/// `F̄(t) = (1/n) Σ_i U_i ⊗ conj(U_i)` over sampled realizations.
///
/// Finite-list ensembles are summed exactly with their weights instead, and
/// carry exact derivatives.
pub fn build_map_montecarlo(
    ens: &DisorderEnsemble,
    grid: &TimeGrid,
    n_samples: usize,
    seed: SeedStream,
) -> Result<DynamicalMapSeries> {
    build_map_montecarlo_batched(ens, grid, n_samples, seed, DEFAULT_BATCHES)
}

pub fn build_map_montecarlo_batched(
    ens: &DisorderEnsemble,
    grid: &TimeGrid,
    n_samples: usize,
    seed: SeedStream,
    batches: usize,
) -> Result<DynamicalMapSeries> {
    let d = ens.dim();
    let n = d * d;
    if let EnsembleKind::FiniteList { members } = ens.kind() {
        let mut maps = vec![CMatrix::zeros(n, n); grid.len()];
        let mut derivs = vec![CMatrix::zeros(n, n); grid.len()];
        for m in members {
            let gen = commutator_superop(m.hamiltonian());
            let (e, v) = m.eigensystem();
            let mut ph = vec![c(0.0, 0.0); d];
            let mut u = vec![c(0.0, 0.0); n];
            for (i, &t) in grid.times().iter().enumerate() {
                propagator_into(&e, &v, t, &mut ph, &mut u);
                let mut buf = vec![c(0.0, 0.0); n * n];
                add_kron_conj(&mut buf, &u, d, m.weight());
                let f = row_major_to_matrix(&buf, n);
                derivs[i] += gen.matrix() * &f;
                maps[i] += f;
            }
        }
        return Ok(DynamicalMapSeries {
            grid: grid.clone(),
            dim: d,
            omega0: ens.omega0(),
            maps: maps.into_iter().map(superop).collect(),
            derivatives: derivs.into_iter().map(superop).collect(),
            provenance: Provenance::FiniteList,
            batches: None,
        });
    }
    if n_samples == 0 {
        return Err(Error::ContractViolation("n_samples must be at least 1".into()));
    }
    let per_batch_bytes = (1 + usize::from(has_finite_second_moment(ens))) * grid.len() * n * n * std::mem::size_of::<Complex64>();
    let cap = (BATCH_MEMORY_BYTES / per_batch_bytes.max(1)).max(2);
    let b = batches.clamp(1, n_samples).min(cap);
    let counts: Vec<usize> = (0..b).map(|k| n_samples / b + usize::from(k < n_samples % b)).collect();

    // d/dt (U ⊗ conj U) = U̇ ⊗ conj U + U ⊗ conj U̇, usable only when E‖H‖² < ∞
    let sample_derivatives = has_finite_second_moment(ens);
    if !sample_derivatives && grid.step().is_none() {
        return Err(Error::InvalidGrid("heavy-tailed laws are differenced and need a uniform grid".into()));
    }
    let (sums, dsums): (Vec<Vec<CMatrix>>, Vec<Vec<CMatrix>>) = (0..b)
        .into_par_iter()
        .map(|k| {
            let mut rng = seed.split(k as u64).rng();
            let mut acc = vec![vec![c(0.0, 0.0); n * n]; grid.len()];
            let mut dacc = vec![vec![c(0.0, 0.0); if sample_derivatives { n * n } else { 0 }]; grid.len()];
            let mut ph = vec![c(0.0, 0.0); d];
            let mut u = vec![c(0.0, 0.0); n];
            let mut du = vec![c(0.0, 0.0); n];
            for _ in 0..counts[k] {
                let r = ens.sample_with(&mut rng);
                let (e, v) = r.eigensystem();
                for (i, &t) in grid.times().iter().enumerate() {
                    propagator_into(&e, &v, t, &mut ph, &mut u);
                    add_kron_conj(&mut acc[i], &u, d, 1.0);
                    if sample_derivatives {
                        propagator_derivative_into(&e, &v, t, &mut ph, &mut du);
                        add_kron_conj_pair(&mut dacc[i], &du, &u, d, 1.0);
                        add_kron_conj_pair(&mut dacc[i], &u, &du, d, 1.0);
                    }
                }
            }
            let to_mats = |a: Vec<Vec<Complex64>>| a.iter().map(|buf| row_major_to_matrix(buf, n)).collect::<Vec<_>>();
            (to_mats(acc), if sample_derivatives { to_mats(dacc) } else { Vec::new() })
        })
        .unzip();

    let mean = |sums: &[Vec<CMatrix>]| -> Vec<SuperoperatorMatrix> {
        (0..grid.len())
            .map(|i| {
                let mut tot = CMatrix::zeros(n, n);
                for s in sums {
                    tot += &s[i];
                }
                superop(tot / c(n_samples as f64, 0.0))
            })
            .collect()
    };
    let maps = mean(&sums);
    let (derivatives, dsums) = if sample_derivatives {
        (mean(&dsums), Some(dsums))
    } else {
        (finite_difference(&maps, grid)?, None)
    };
    Ok(DynamicalMapSeries {
        grid: grid.clone(),
        dim: d,
        omega0: ens.omega0(),
        maps,
        derivatives,
        provenance: Provenance::MonteCarlo { n_samples, seed: seed.seed, batches: b },
        batches: (b >= 2).then_some(BatchSums { counts, sums, dsums }),
    })
}

/// Whether every realization Hamiltonian has finite second moment, so that
/// the sample mean of `d/dt U⊗conj(U)` obeys the central limit theorem.
fn has_finite_second_moment(ens: &DisorderEnsemble) -> bool {
    match ens.kind() {
        EnsembleKind::SpectralGlobal { law, .. } => law.variance().is_some(),
        EnsembleKind::SpectralUncorrelated { laws } => laws.iter().all(|l| l.variance().is_some()),
        _ => true,
    }
}

/// Finite-difference `dF/dt`: 5-point stencils (one-sided at the ends) on a
/// uniform grid with at least 5 points, 3-point stencils otherwise.
fn finite_difference(maps: &[SuperoperatorMatrix], grid: &TimeGrid) -> Result<Vec<SuperoperatorMatrix>> {
    let m = maps.len();
    if m < 3 {
        return Err(Error::InvalidGrid("finite differences need at least 3 grid points".into()));
    }
    let h = grid
        .step()
        .ok_or_else(|| Error::InvalidGrid("finite differences need a uniform grid".into()))?;
    let f = |i: usize| maps[i].matrix();
    let comb = |terms: &[(usize, f64)], denom: f64| {
        let mut acc = f(terms[0].0) * c(terms[0].1, 0.0);
        for &(i, w) in &terms[1..] {
            acc += f(i) * c(w, 0.0);
        }
        superop(acc / c(denom * h, 0.0))
    };
    Ok((0..m)
        .map(|i| {
            if m < 5 {
                match i {
                    0 => comb(&[(0, -3.0), (1, 4.0), (2, -1.0)], 2.0),
                    _ if i == m - 1 => comb(&[(i, 3.0), (i - 1, -4.0), (i - 2, 1.0)], 2.0),
                    _ => comb(&[(i + 1, 1.0), (i - 1, -1.0)], 2.0),
                }
            } else if i == 0 {
                comb(&[(0, -25.0), (1, 48.0), (2, -36.0), (3, 16.0), (4, -3.0)], 12.0)
            } else if i == 1 {
                comb(&[(0, -3.0), (1, -10.0), (2, 18.0), (3, -6.0), (4, 1.0)], 12.0)
            } else if i == m - 1 {
                comb(&[(i, 25.0), (i - 1, -48.0), (i - 2, 36.0), (i - 3, -16.0), (i - 4, 3.0)], 12.0)
            } else if i == m - 2 {
                comb(&[(i + 1, 3.0), (i, 10.0), (i - 1, -18.0), (i - 2, 6.0), (i - 3, -1.0)], 12.0)
            } else {
                comb(&[(i - 2, 1.0), (i - 1, -8.0), (i + 1, 8.0), (i + 2, -1.0)], 12.0)
            }
        })
        .collect())
}

/// Per-time generators; `None` marks flagged (near-singular) times.
#[derive(Debug, Clone)]
pub struct GeneratorSeries {
    pub grid: TimeGrid,
    pub generators: Vec<Option<SuperoperatorMatrix>>,
    pub singular: Vec<bool>,
}

/// Ratio of smallest to largest singular value.
fn singular_ratio(f: &CMatrix) -> f64 {
    let sv = f.clone().singular_values();
    let max = sv.max();
    if max == 0.0 {
        0.0
    } else {
        sv.min() / max
    }
}

/// Eigenvalues of `F` from its complex Schur form.
fn map_eigenvalues(f: &CMatrix) -> Option<Vec<Complex64>> {
    let schur = nalgebra::Schur::try_new(f.clone(), 1e-14, 10_000)?;
    let (_, t) = schur.unpack();
    Some(t.diagonal().iter().copied().collect())
}

/// Whether some eigenvalue, matched greedily by distance between two
/// neighbouring times, passes through zero in between (linear path). The
/// closest approach is measured against the smaller endpoint, so plain decay
/// is not mistaken for a crossing.
fn eigenvalue_crosses_zero(a: &[Complex64], b: &[Complex64]) -> bool {
    let n = a.len();
    let mut pairs: Vec<(usize, usize, f64)> =
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| (i, j, (a[i] - b[j]).norm())).collect();
    pairs.sort_by(|x, y| x.2.total_cmp(&y.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    let mut used_a = vec![false; n];
    let mut used_b = vec![false; n];
    for (i, j, _) in pairs {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        let (p, q) = (a[i], b[j]);
        let dq = q - p;
        let len2 = dq.norm_sqr();
        if len2 == 0.0 {
            continue;
        }
        let s = -(p.conj() * dq).re / len2;
        if s > 0.0 && s < 1.0 && (p + dq * s).norm() < 1e-3 * p.norm().min(q.norm()) {
            return true;
        }
    }
    false
}

/// `Q(t) = Ḟ(t) F̄⁻¹(t)` at every grid time.
///
/// A time is flagged if `σ_min(F̄) < 10⁻⁸ σ_max(F̄)`, if `Q` is not finite, or
/// if an eigenvalue of `F̄` passes through zero before the next grid time (the
/// flag then goes to the endpoint closer to singular). Two adjacent flagged
/// times are reported as an extraction failure.
pub fn extract_generator(maps: &DynamicalMapSeries) -> Result<GeneratorSeries> {
    let derivs = &maps.derivatives;
    let per_time: Vec<(Option<SuperoperatorMatrix>, f64, Option<Vec<Complex64>>)> = maps
        .maps
        .par_iter()
        .zip(derivs.par_iter())
        .map(|(f, fd)| {
            let ratio = singular_ratio(f.matrix());
            let eig = map_eigenvalues(f.matrix());
            if ratio < SINGULAR_RATIO {
                return (None, ratio, eig);
            }
            let q = f
                .matrix()
                .transpose()
                .lu()
                .solve(&fd.matrix().transpose())
                .map(|x| x.transpose())
                .filter(|q| q.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
            (q.map(superop), ratio, eig)
        })
        .collect();

    let mut singular: Vec<bool> = per_time.iter().map(|p| p.0.is_none()).collect();
    let mut generators: Vec<Option<SuperoperatorMatrix>> = per_time.iter().map(|p| p.0.clone()).collect();
    for i in 0..per_time.len().saturating_sub(1) {
        if singular[i] || singular[i + 1] {
            continue;
        }
        let crosses = match (&per_time[i].2, &per_time[i + 1].2) {
            (Some(a), Some(b)) => eigenvalue_crosses_zero(a, b),
            _ => false,
        };
        if crosses {
            let k = if per_time[i].1 <= per_time[i + 1].1 { i } else { i + 1 };
            singular[k] = true;
            generators[k] = None;
        }
    }
    let times = maps.grid.times();
    if let Some(i) = (0..singular.len().saturating_sub(1)).find(|&i| singular[i] && singular[i + 1]) {
        let end = (i..singular.len()).take_while(|&k| singular[k]).last().unwrap_or(i);
        return Err(Error::ExtractionFailure { start: times[i], end: times[end] });
    }
    Ok(GeneratorSeries { grid: maps.grid.clone(), generators, singular })
}

/// Involutive index reshuffle `S[(j,r),(k,s)] = Q[(j,k),(r,s)]`.
fn reshuffle(m: &CMatrix, d: usize) -> CMatrix {
    let mut out = CMatrix::zeros(d * d, d * d);
    for j in 0..d {
        for k in 0..d {
            for r in 0..d {
                for s in 0..d {
                    out[(j * d + r, k * d + s)] = m[(j * d + k, r * d + s)];
                }
            }
        }
    }
    out
}

/// Split a generator into effective Hamiltonian and decoherence matrix.
///
/// With `C_mn = Σ Q_jk,rs A_m,rj A_n,ks`, `C̃ = C₀₀/(2d) + Σ_m C_m0 A_m/√d`,
/// `H = (i/2)(C̃ − C̃†)` and `Γ = (C_mn)_{m,n≥1}`.
pub fn generator_to_lindblad(q: &SuperoperatorMatrix, basis: &HermitianBasis) -> Result<(CMatrix, CMatrix)> {
    let d = basis.dim();
    if q.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: q.dim() });
    }
    let qm = q.matrix();
    let scale = qm.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let mut residual: f64 = 0.0;
    for col in 0..d * d {
        let s: Complex64 = (0..d).map(|j| qm[(j * d + j, col)]).sum();
        residual = residual.max(s.norm());
    }
    if residual > 1e-8 * scale {
        return Err(Error::InconsistentGenerator(residual));
    }
    let b = basis.vec_matrix();
    let cm = b.adjoint() * reshuffle(qm, d) * &b;
    let sd = (d as f64).sqrt();
    let mut ct = identity(d) * (cm[(0, 0)] / (2.0 * d as f64));
    for m in 1..basis.len() {
        ct += basis.op(m) * (cm[(m, 0)] / sd);
    }
    let h = (&ct - ct.adjoint()) * (I * 0.5);
    let n = basis.len() - 1;
    let gamma = hermitian_part(&cm.view((1, 1), (n, n)).into_owned());
    Ok((hermitian_part(&h), gamma))
}

/// Generator of `ρ̇ = −i[H, ρ] + Σ_mn Γ_mn (A_m ρ A_n − ½{A_n A_m, ρ})`.
pub fn reconstruct_generator(h: &CMatrix, gamma: &CMatrix, basis: &HermitianBasis) -> SuperoperatorMatrix {
    let d = basis.dim();
    let n = basis.len();
    let mut full = CMatrix::zeros(n, n);
    full.view_mut((1, 1), (n - 1, n - 1)).copy_from(gamma);
    let b = basis.vec_matrix();
    let jump = reshuffle(&(&b * full * b.adjoint()), d);
    let mut anti = CMatrix::zeros(d, d);
    for m in 1..n {
        for k in 1..n {
            let g = gamma[(m - 1, k - 1)];
            if g != c(0.0, 0.0) {
                anti += basis.op(k) * basis.op(m) * g;
            }
        }
    }
    let one = identity(d);
    let dis = anti.kronecker(&one) + one.kronecker(&anti.transpose());
    superop(commutator_superop(h).into_matrix() + jump - dis * c(0.5, 0.0))
}

/// Rates and Lindblad operators at one time.
#[derive(Debug, Clone)]
pub struct LindbladPoint {
    pub h_eff: CMatrix,
    pub gamma: CMatrix,
    pub rates: Vec<f64>,
    /// Eigenvectors of `Γ` as columns, in the order of `rates`.
    pub vectors: CMatrix,
    pub lindblads: Vec<CMatrix>,
    pub generator: SuperoperatorMatrix,
}

/// Eigen-decompose each `Γ(t)` keeping eigenvectors continuous in time.
///
/// Eigenvectors at each time are matched to the previous time's by greatest
/// overlap (ties go to the lower rate) and their phases aligned. Flagged
/// times (`None`) are skipped; matching resumes against the last good time.
pub fn diagonalize_gamma(gammas: &[Option<CMatrix>], basis: &HermitianBasis) -> Vec<Option<(Vec<f64>, CMatrix, Vec<CMatrix>)>> {
    let mut prev: Option<CMatrix> = None;
    gammas
        .iter()
        .map(|g| {
            let g = g.as_ref()?;
            let (mut rates, mut v) = hermitian_eigh(&hermitian_part(g));
            if let Some(p) = &prev {
                (rates, v) = match_to_previous(p, rates, v);
            }
            prev = Some(v.clone());
            let lindblads = (0..rates.len())
                .map(|k| {
                    let coeffs: Vec<Complex64> =
                        std::iter::once(c(0.0, 0.0)).chain(v.column(k).iter().copied()).collect();
                    basis.expand(&coeffs)
                })
                .collect();
            Some((rates, v, lindblads))
        })
        .collect()
}

fn match_to_previous(prev: &CMatrix, rates: Vec<f64>, v: CMatrix) -> (Vec<f64>, CMatrix) {
    let n = rates.len();
    let ov = prev.adjoint() * &v;
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
    pairs.sort_by(|x, y| ov[*y].norm_sqr().total_cmp(&ov[*x].norm_sqr()).then(x.1.cmp(&y.1)).then(x.0.cmp(&y.0)));
    let mut slot_of = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (a, b) in pairs {
        if slot_of[a] == usize::MAX && !used[b] {
            slot_of[a] = b;
            used[b] = true;
        }
    }
    let mut new_rates = vec![0.0; n];
    let mut new_v = CMatrix::zeros(n, n);
    for a in 0..n {
        let b = slot_of[a];
        let o = ov[(a, b)];
        let phase = if o.norm() > 0.0 { o.conj() / o.norm() } else { c(1.0, 0.0) };
        new_rates[a] = rates[b];
        new_v.set_column(a, &(v.column(b) * phase));
    }
    (new_rates, new_v)
}

/// Time-local master equation on a grid.
#[derive(Debug, Clone)]
pub struct MasterEquationSeries {
    pub grid: TimeGrid,
    pub dim: usize,
    pub omega0: f64,
    pub provenance: Provenance,
    /// `None` at flagged times.
    pub points: Vec<Option<LindbladPoint>>,
    /// Exact maps at the grid times, kept for bridging singular intervals.
    pub exact_maps: Option<Vec<SuperoperatorMatrix>>,
}

impl MasterEquationSeries {
    pub fn singular_flags(&self) -> Vec<bool> {
        self.points.iter().map(|p| p.is_none()).collect()
    }

    /// Mean rate `Tr Γ / (d² − 1)` per time, NaN where flagged.
    pub fn mean_rates(&self) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| p.as_ref().map_or(f64::NAN, |p| p.rates.iter().sum::<f64>() / p.rates.len() as f64))
            .collect()
    }
}

/// Full pipeline: generators, Lindblad split and continuous diagonalization.
pub fn extract_master_equation(maps: &DynamicalMapSeries) -> Result<MasterEquationSeries> {
    let gens = extract_generator(maps)?;
    let basis = gell_mann_basis(maps.dim)?;
    let split: Vec<Option<(CMatrix, CMatrix)>> = gens
        .generators
        .par_iter()
        .map(|q| q.as_ref().map(|q| generator_to_lindblad(q, &basis)).transpose())
        .collect::<Result<_>>()?;
    let gammas: Vec<Option<CMatrix>> = split.iter().map(|s| s.as_ref().map(|(_, g)| g.clone())).collect();
    let diag = diagonalize_gamma(&gammas, &basis);
    let points = split
        .into_iter()
        .zip(diag)
        .zip(&gens.generators)
        .map(|((s, dg), q)| match (s, dg, q) {
            (Some((h, g)), Some((rates, vectors, lindblads)), Some(q)) => Some(LindbladPoint {
                h_eff: h,
                gamma: g,
                rates,
                vectors,
                lindblads,
                generator: q.clone(),
            }),
            _ => None,
        })
        .collect();
    Ok(MasterEquationSeries {
        grid: maps.grid.clone(),
        dim: maps.dim,
        omega0: maps.omega0,
        provenance: maps.provenance,
        points,
        exact_maps: maps.provenance.is_exact().then(|| maps.maps.clone()),
    })
}

/// Convenience: exact maps when the kind allows, Monte Carlo otherwise.
pub fn build_map_exact(ens: &DisorderEnsemble, grid: &TimeGrid) -> Result<DynamicalMapSeries> {
    match ens.kind() {
        EnsembleKind::FiniteList { .. } => build_map_montecarlo(ens, grid, 1, SeedStream::new(0)),
        _ => build_map_analytic(ens, grid),
    }
}

/// Check `Q` round-trips through `(H, Γ)`; returns the max entry deviation.
pub fn reconstruction_defect(q: &SuperoperatorMatrix, basis: &HermitianBasis) -> Result<f64> {
    let (h, g) = generator_to_lindblad(q, basis)?;
    let r = reconstruct_generator(&h, &g, basis);
    Ok(crate::operators::max_abs_diff(r.matrix(), q.matrix()))
}

/// Superoperator `Σ_k γ_k L_k ⊗ conj(L_k)` built from a diagonalization.
pub fn jump_superop(rates: &[f64], lindblads: &[CMatrix]) -> CMatrix {
    let d = lindblads[0].nrows();
    let mut acc = CMatrix::zeros(d * d, d * d);
    for (g, l) in rates.iter().zip(lindblads) {
        acc += l.kronecker(&l.map(|z| z.conj())) * c(*g, 0.0);
    }
    acc
}

/// Conjugation superoperator of `exp(−iHt)`; used by tests and bridging.
pub fn unitary_map(h: &CMatrix, t: f64) -> Result<SuperoperatorMatrix> {
    conjugation_superop(&crate::operators::unitary_propagator(h, t))
}
