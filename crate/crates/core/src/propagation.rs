//! Forward integration of master equations, direct disorder averages and
//! trajectory comparison.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::Generator;
use crate::ensembles::DisorderEnsemble;
use crate::error::{Error, Result};
use crate::extraction::{reconstruct_generator, DynamicalMapSeries, MasterEquationSeries, TimeGrid};
use crate::operators::{c, gell_mann_basis, purity, unvec, vec_matrix, CMatrix, DensityMatrix, StateTolerance};
use crate::rng::SeedStream;

/// Step-size control for the embedded Runge–Kutta pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorOptions {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
    /// Largest interpolation-error estimate (per interval) accepted before an
    /// interval is bridged with exact maps.
    pub bridge_tol: f64,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self { atol: 1e-10, rtol: 1e-8, max_steps: 1_000_000, bridge_tol: 1e-9 }
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrate `Ẏ = Q(t)Y` from `t0` to `t1` in place. `h` carries the step
/// size between calls.
fn dopri5<F>(q: F, t0: f64, t1: f64, y: &mut CMatrix, h: &mut f64, opts: &IntegratorOptions) -> Result<()>
where
    F: Fn(f64) -> CMatrix,
{
    let span = t1 - t0;
    if span <= 0.0 {
        return Ok(());
    }
    let mut t = t0;
    if !(*h > 0.0 && h.is_finite()) {
        *h = span;
    }
    let mut k1 = q(t) * &*y;
    let mut steps = 0usize;
    while t < t1 {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::Integrator { t, reason: "step limit exceeded".into() });
        }
        let last = t + *h >= t1 - 1e-14 * span;
        let hs = if last { t1 - t } else { *h };
        let mut ks: Vec<CMatrix> = Vec::with_capacity(7);
        ks.push(k1.clone());
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, k) in ks.iter().enumerate() {
                if A[s][j] != 0.0 {
                    ys += k * c(hs * A[s][j], 0.0);
                }
            }
            if s == 6 {
                // the last stage is evaluated at the proposed solution
                let k7 = q(t + hs) * &ys;
                let mut err = CMatrix::zeros(y.nrows(), y.ncols());
                for (j, k) in ks.iter().chain(std::iter::once(&k7)).enumerate() {
                    if E[j] != 0.0 {
                        err += k * c(hs * E[j], 0.0);
                    }
                }
                let mut acc = 0.0;
                for ((e, a), b) in err.iter().zip(y.iter()).zip(ys.iter()) {
                    let sc = opts.atol + opts.rtol * a.norm().max(b.norm());
                    acc += (e.norm() / sc).powi(2);
                }
                let en = (acc / err.len() as f64).sqrt();
                if !en.is_finite() {
                    return Err(Error::Integrator { t, reason: "non-finite error estimate".into() });
                }
                if en <= 1.0 {
                    t = if last { t1 } else { t + hs };
                    *y = ys;
                    k1 = k7;
                    let fac = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
                    if !last || hs >= *h {
                        *h = hs * fac;
                    }
                } else {
                    *h = hs * (0.9 * en.powf(-0.2)).clamp(0.2, 1.0);
                    if *h < 1e-14 * span.max(t.abs()) {
                        return Err(Error::Integrator { t, reason: "step size underflow".into() });
                    }
                }
                break;
            }
            ks.push(q(t + C[s] * hs) * &ys);
        }
    }
    Ok(())
}

/// Lagrange weights of `nodes` at `t`.
fn lagrange_weights(nodes: &[f64], t: f64) -> Vec<f64> {
    (0..nodes.len())
        .map(|k| {
            nodes
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, &x)| (t - x) / (nodes[k] - x))
                .product()
        })
        .collect()
}

/// Up to `order` consecutive unflagged nodes around interval `[i, i+1]`.
fn stencil(flags: &[bool], i: usize, order: usize) -> Option<Vec<usize>> {
    if flags[i] || flags[i + 1] {
        return None;
    }
    let mut lo = i;
    while lo > 0 && !flags[lo - 1] {
        lo -= 1;
    }
    let mut hi = i + 1;
    while hi + 1 < flags.len() && !flags[hi + 1] {
        hi += 1;
    }
    let len = (hi - lo + 1).min(order);
    let ideal = i as isize - (len as isize - 2) / 2;
    let s = ideal.clamp(lo as isize, (hi + 1 - len) as isize) as usize;
    Some((s..s + len).collect())
}

fn interpolate(nodes: &[usize], times: &[f64], gens: &[Option<CMatrix>], t: f64) -> CMatrix {
    let ts: Vec<f64> = nodes.iter().map(|&k| times[k]).collect();
    let w = lagrange_weights(&ts, t);
    let mut acc = gens[nodes[0]].as_ref().expect("unflagged") * c(w[0], 0.0);
    for (k, wk) in nodes.iter().zip(&w).skip(1) {
        acc += gens[*k].as_ref().expect("unflagged") * c(*wk, 0.0);
    }
    acc
}

enum Interval {
    Integrate(Vec<usize>),
    Bridge,
}

/// Evolve `Y(t₀)` through the grid of a master-equation series.
fn evolve_series(me: &MasterEquationSeries, y0: CMatrix, opts: &IntegratorOptions) -> Result<Vec<CMatrix>> {
    let basis = gell_mann_basis(me.dim)?;
    let gens: Vec<Option<CMatrix>> = me
        .points
        .iter()
        .map(|p| p.as_ref().map(|p| reconstruct_generator(&p.h_eff, &p.gamma, &basis).into_matrix()))
        .collect();
    let flags = me.singular_flags();
    let times = me.grid.times();
    let m = times.len();
    let exact = me.exact_maps.as_deref();

    let plan: Vec<Interval> = (0..m.saturating_sub(1))
        .map(|i| {
            let Some(nodes) = stencil(&flags, i, 6) else {
                return match exact {
                    Some(_) => Ok(Interval::Bridge),
                    None => Err(Error::SingularPropagation(times[if flags[i] { i } else { i + 1 }])),
                };
            };
            if exact.is_some() && nodes.len() >= 3 {
                // compare against the stencil without its farthest node
                let mid = 0.5 * (times[i] + times[i + 1]);
                let mut lower = nodes.clone();
                let far = if (mid - times[nodes[0]]).abs() >= (times[*nodes.last().unwrap()] - mid).abs() { 0 } else { nodes.len() - 1 };
                lower.remove(far);
                let diff = interpolate(&nodes, times, &gens, mid) - interpolate(&lower, times, &gens, mid);
                let est = diff.iter().map(|z| z.norm()).fold(0.0, f64::max) * (times[i + 1] - times[i]);
                if !(est <= opts.bridge_tol) {
                    return Ok(Interval::Bridge);
                }
            }
            Ok(Interval::Integrate(nodes))
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(m);
    out.push(y0);
    let mut h = f64::NAN;
    // last node whose exact map is invertible (index 0 is the identity)
    let mut anchor = 0usize;
    for (i, step) in plan.iter().enumerate() {
        let mut y = out[i].clone();
        match step {
            Interval::Integrate(nodes) => {
                dopri5(|t| interpolate(nodes, times, &gens, t), times[i], times[i + 1], &mut y, &mut h, opts)?;
            }
            Interval::Bridge => {
                let f = exact.expect("bridging needs exact maps");
                let fa = f[anchor].matrix().clone();
                let rel = fa.lu().solve(&out[anchor]).ok_or(Error::SingularPropagation(times[anchor]))?;
                y = f[i + 1].matrix() * rel;
                h = f64::NAN;
            }
        }
        if !flags[i + 1] {
            anchor = i + 1;
        }
        out.push(y);
    }
    Ok(out)
}

/// Evolve `Y(t₀)` under a closed-form generator.
fn evolve_generator<G: Generator + ?Sized>(g: &G, grid: &TimeGrid, y0: CMatrix, opts: &IntegratorOptions) -> Result<Vec<CMatrix>> {
    let times = grid.times();
    let mut out = Vec::with_capacity(times.len());
    out.push(y0);
    let mut h = f64::NAN;
    for i in 0..times.len() - 1 {
        let mut y = out[i].clone();
        dopri5(|t| g.superop(t), times[i], times[i + 1], &mut y, &mut h, opts)?;
        out.push(y);
    }
    Ok(out)
}

/// One observable channel, with its Monte Carlo standard error if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub values: Vec<f64>,
    pub se: Option<Vec<f64>>,
}

/// States and observables on a time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<DensityMatrix>,
    pub channels: Vec<Channel>,
    /// Per-entry standard errors of the real and imaginary parts.
    pub entry_se: Option<(Vec<nalgebra::DMatrix<f64>>, Vec<nalgebra::DMatrix<f64>>)>,
}

/// Tolerances for states produced by integration.
pub const TRAJECTORY_TOLERANCE: StateTolerance = StateTolerance { hermitian: 1e-8, trace: 1e-8, positivity: 1e-8 };

impl Trajectory {
    /// Build channels from states: purity, `|ρ_jk|` for `j < k`, and the
    /// Bloch components for qubits.
    pub fn from_states(
        grid: TimeGrid,
        states: Vec<DensityMatrix>,
        entry_se: Option<(Vec<nalgebra::DMatrix<f64>>, Vec<nalgebra::DMatrix<f64>>)>,
        purity_se: Option<Vec<f64>>,
    ) -> Self {
        let d = states[0].dim();
        let mut channels = vec![Channel {
            name: "purity".into(),
            values: states.iter().map(|s| s.purity()).collect(),
            se: purity_se,
        }];
        for j in 0..d {
            for k in j + 1..d {
                channels.push(Channel {
                    name: format!("abs_rho_{j}{k}"),
                    values: states.iter().map(|s| s.matrix()[(j, k)].norm()).collect(),
                    se: entry_se.as_ref().map(|(re, im)| re.iter().zip(im).map(|(r, i)| r[(j, k)].hypot(i[(j, k)])).collect()),
                });
            }
        }
        if d == 2 {
            let bl: Vec<[f64; 3]> = states.iter().map(|s| s.bloch().expect("qubit")).collect();
            let se = |f: &dyn Fn(&nalgebra::DMatrix<f64>, &nalgebra::DMatrix<f64>) -> f64| {
                entry_se.as_ref().map(|(re, im)| re.iter().zip(im).map(|(r, i)| f(r, i)).collect())
            };
            channels.push(Channel { name: "bloch_x".into(), values: bl.iter().map(|b| b[0]).collect(), se: se(&|r, _| 2.0 * r[(1, 0)]) });
            channels.push(Channel { name: "bloch_y".into(), values: bl.iter().map(|b| b[1]).collect(), se: se(&|_, i| 2.0 * i[(1, 0)]) });
            channels.push(Channel { name: "bloch_z".into(), values: bl.iter().map(|b| b[2]).collect(), se: se(&|r, _| 2.0 * r[(0, 0)]) });
        }
        Self { grid, states, channels, entry_se }
    }

    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|ch| ch.name == name)
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }
}

fn states_from_vectors(grid: &TimeGrid, ys: Vec<CMatrix>) -> Result<Vec<DensityMatrix>> {
    ys.into_iter()
        .zip(grid.times())
        .map(|(y, &t)| {
            let m = unvec(&y.column(0).into_owned())?;
            DensityMatrix::with_tolerance(m, TRAJECTORY_TOLERANCE)
                .map_err(|e| Error::Integrator { t, reason: format!("state left the physical set: {e}") })
        })
        .collect()
}

/// `vec(ρ)` as a one-column matrix.
fn column(rho: &DensityMatrix) -> CMatrix {
    let v = vec_matrix(rho.matrix());
    CMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn check_state_dim(rho0: &DensityMatrix, d: usize) -> Result<()> {
    if rho0.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: rho0.dim() });
    }
    Ok(())
}

/// Integrate `ρ̇ = −i[H_eff, ρ] + Σ_k γ_k(L_kρL_k† − ½{L_k†L_k, ρ})` from the
/// first grid time, with `ρ₀` the state there.
pub fn propagate(me: &MasterEquationSeries, rho0: &DensityMatrix) -> Result<Trajectory> {
    propagate_with(me, rho0, &IntegratorOptions::default())
}

pub fn propagate_with(me: &MasterEquationSeries, rho0: &DensityMatrix, opts: &IntegratorOptions) -> Result<Trajectory> {
    check_state_dim(rho0, me.dim)?;
    let ys = evolve_series(me, column(rho0), opts)?;
    Ok(Trajectory::from_states(me.grid.clone(), states_from_vectors(&me.grid, ys)?, None, None))
}

/// Propagated map `Λ(t, t₀)` at every grid time.
pub fn propagate_map(me: &MasterEquationSeries, opts: &IntegratorOptions) -> Result<Vec<CMatrix>> {
    let n = me.dim * me.dim;
    evolve_series(me, CMatrix::identity(n, n), opts)
}

/// Integrate a closed-form generator from the first grid time.
pub fn propagate_generator<G: Generator + ?Sized>(
    g: &G,
    grid: &TimeGrid,
    rho0: &DensityMatrix,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    check_state_dim(rho0, g.dim())?;
    let ys = evolve_generator(g, grid, column(rho0), opts)?;
    Ok(Trajectory::from_states(grid.clone(), states_from_vectors(grid, ys)?, None, None))
}

/// `F(t)ρ₀` from precomputed maps.
pub fn map_trajectory(maps: &DynamicalMapSeries, rho0: &DensityMatrix) -> Result<Trajectory> {
    check_state_dim(rho0, maps.dim())?;
    let v = column(rho0);
    let ys = maps.maps().iter().map(|f| f.matrix() * &v).collect();
    let states = states_from_vectors(maps.grid(), ys)?;
    Ok(Trajectory::from_states(maps.grid().clone(), states, None, None))
}

/// Default number of Monte Carlo batches for direct averages.
pub const DIRECT_BATCHES: usize = 50;

/// `ρ̄(t) = (1/n) Σ_i U_i(t)ρ₀U_i†(t)` with per-entry standard errors and
/// a jackknife error on the purity.
pub fn average_direct(ens: &DisorderEnsemble, rho0: &DensityMatrix, grid: &TimeGrid, n: usize, seed: SeedStream) -> Result<Trajectory> {
    let d = ens.dim();
    check_state_dim(rho0, d)?;
    if n == 0 {
        return Err(Error::ContractViolation("n_samples must be at least 1".into()));
    }
    let b = DIRECT_BATCHES.min(n);
    let counts: Vec<usize> = (0..b).map(|k| n / b + usize::from(k < n % b)).collect();
    let m = grid.len();
    let dd = d * d;
    struct Acc {
        sum: Vec<Complex64>,
        sq_re: Vec<f64>,
        sq_im: Vec<f64>,
    }
    let batches: Vec<Acc> = (0..b)
        .into_par_iter()
        .map(|k| {
            let mut rng = seed.split(k as u64).rng();
            let mut acc = Acc { sum: vec![c(0.0, 0.0); m * dd], sq_re: vec![0.0; m * dd], sq_im: vec![0.0; m * dd] };
            let mut tmp = vec![c(0.0, 0.0); dd];
            let mut out = vec![c(0.0, 0.0); dd];
            for _ in 0..counts[k] {
                let r = ens.sample_with(&mut rng);
                let (e, v) = r.eigensystem();
                // ρ₀ in the eigenbasis
                let rt = v.adjoint() * rho0.matrix() * &v;
                for (i, &t) in grid.times().iter().enumerate() {
                    // V (ρ̃ ∘ e^{−i(E_j − E_k)t}) V†
                    for j in 0..d {
                        for l in 0..d {
                            tmp[j * d + l] = rt[(j, l)] * Complex64::from_polar(1.0, -(e[j] - e[l]) * t);
                        }
                    }
                    for a in 0..d {
                        for l in 0..d {
                            let mut s = c(0.0, 0.0);
                            for j in 0..d {
                                s += v[(a, j)] * tmp[j * d + l];
                            }
                            out[a * d + l] = s;
                        }
                    }
                    let base = i * dd;
                    for a in 0..d {
                        for bb in 0..d {
                            let mut s = c(0.0, 0.0);
                            for l in 0..d {
                                s += out[a * d + l] * v[(bb, l)].conj();
                            }
                            acc.sum[base + a * d + bb] += s;
                            acc.sq_re[base + a * d + bb] += s.re * s.re;
                            acc.sq_im[base + a * d + bb] += s.im * s.im;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let nf = n as f64;
    let mut total = vec![c(0.0, 0.0); m * dd];
    let mut sq_re = vec![0.0; m * dd];
    let mut sq_im = vec![0.0; m * dd];
    for a in &batches {
        for i in 0..m * dd {
            total[i] += a.sum[i];
            sq_re[i] += a.sq_re[i];
            sq_im[i] += a.sq_im[i];
        }
    }
    let mean_at = |i: usize, sum: &[Complex64], count: f64| CMatrix::from_fn(d, d, |j, k| sum[i * dd + j * d + k] / count);
    let states = (0..m)
        .map(|i| {
            let mut s = mean_at(i, &total, nf);
            // exact Hermitian symmetry; the diagonal is real by construction
            s = (&s + s.adjoint()) * c(0.5, 0.0);
            DensityMatrix::with_tolerance(s, TRAJECTORY_TOLERANCE)
        })
        .collect::<Result<Vec<_>>>()?;

    let (entry_se, purity_se) = if n >= 2 {
        let se = |sq: &[f64], part: fn(Complex64) -> f64| -> Vec<nalgebra::DMatrix<f64>> {
            (0..m)
                .map(|i| {
                    nalgebra::DMatrix::from_fn(d, d, |j, k| {
                        let idx = i * dd + j * d + k;
                        let mu = part(total[idx]) / nf;
                        let var = ((sq[idx] - nf * mu * mu) / (nf - 1.0)).max(0.0);
                        (var / nf).sqrt()
                    })
                })
                .collect()
        };
        let re = se(&sq_re, |z| z.re);
        let im = se(&sq_im, |z| z.im);
        let purity_se = (b >= 2).then(|| {
            let bf = b as f64;
            (0..m)
                .map(|i| {
                    let loo: Vec<f64> = batches
                        .iter()
                        .zip(&counts)
                        .map(|(a, &cnt)| {
                            let mut s = CMatrix::zeros(d, d);
                            for j in 0..d {
                                for k in 0..d {
                                    let idx = i * dd + j * d + k;
                                    s[(j, k)] = (total[idx] - a.sum[idx]) / (nf - cnt as f64);
                                }
                            }
                            purity(&s)
                        })
                        .collect();
                    let mu = loo.iter().sum::<f64>() / bf;
                    ((bf - 1.0) / bf * loo.iter().map(|x| (x - mu).powi(2)).sum::<f64>()).sqrt()
                })
                .collect()
        });
        (Some((re, im)), purity_se)
    } else {
        (None, None)
    };
    Ok(Trajectory::from_states(grid.clone(), states, entry_se, purity_se))
}

/// Acceptance rule for [`compare`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Tolerance {
    /// `|a − b| ≤ value` everywhere.
    Absolute { value: f64 },
    /// `|a − b| ≤ k·SE + floor` with the combined standard error of both
    /// trajectories.
    Band { k: f64, floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelComparison {
    pub name: String,
    pub sup_norm: f64,
    pub deviations: Vec<f64>,
    pub band: Vec<f64>,
    pub violations: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub tolerance: Tolerance,
    pub channels: Vec<ChannelComparison>,
    pub pass: bool,
}

/// Per-channel deviations between two trajectories on the same grid.
pub fn compare(a: &Trajectory, b: &Trajectory, tol: Tolerance) -> Result<ComparisonReport> {
    if a.grid.times() != b.grid.times() {
        return Err(Error::GridMismatch);
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    let mut channels = Vec::new();
    for ca in &a.channels {
        let Some(cb) = b.channel(&ca.name) else { continue };
        let deviations: Vec<f64> = ca.values.iter().zip(&cb.values).map(|(x, y)| (x - y).abs()).collect();
        let band: Vec<f64> = match tol {
            Tolerance::Absolute { value } => vec![value; deviations.len()],
            Tolerance::Band { k, floor } => (0..deviations.len())
                .map(|i| {
                    let sa = ca.se.as_ref().map_or(0.0, |s| s[i]);
                    let sb = cb.se.as_ref().map_or(0.0, |s| s[i]);
                    k * sa.hypot(sb) + floor
                })
                .collect(),
        };
        let violations = deviations.iter().zip(&band).filter(|(d, b)| !(d <= b)).count();
        channels.push(ChannelComparison {
            name: ca.name.clone(),
            sup_norm: deviations.iter().copied().fold(0.0, f64::max),
            deviations,
            band,
            violations,
            pass: violations == 0,
        });
    }
    let pass = channels.iter().all(|ch| ch.pass);
    Ok(ComparisonReport { tolerance: tol, channels, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{depolarization_law, qubit_coherence, qubit_rates, short_time_lindblad, DepolarizationLaw};
    use crate::distributions::ScalarDistribution;
    use crate::ensembles::EnsembleKind;
    use crate::extraction::{build_map_analytic, build_map_exact, build_map_montecarlo, extract_master_equation, Provenance};
    use crate::operators::{identity, max_abs_diff, random_density_matrix, random_hermitian};
    use proptest::prelude::*;

    fn b0() -> DensityMatrix {
        DensityMatrix::from_bloch([0.4, 0.8, 1.0 / 3.0]).unwrap()
    }

    struct Const(CMatrix);

    impl Generator for Const {
        fn dim(&self) -> usize {
            (self.0.nrows() as f64).sqrt() as usize
        }
        fn superop(&self, _t: f64) -> CMatrix {
            self.0.clone()
        }
    }

    #[test]
    fn dopri_matches_matrix_exponential() {
        let mut rng = SeedStream::new(1).rng();
        let h = random_hermitian(3, &mut rng);
        let q = crate::operators::commutator_superop(&h).into_matrix();
        let grid = TimeGrid::uniform(2.0, 5).unwrap();
        let rho = random_density_matrix(3, &mut rng);
        let opts = IntegratorOptions { atol: 1e-13, rtol: 1e-12, ..Default::default() };
        let tr = propagate_generator(&Const(q), &grid, &rho, &opts).unwrap();
        for (s, &t) in tr.states.iter().zip(grid.times()) {
            let u = crate::operators::unitary_propagator(&h, t);
            assert!(max_abs_diff(s.matrix(), &(&u * rho.matrix() * u.adjoint())) < 1e-10);
        }
    }

    #[test]
    fn dopri_order_on_scalar_decay() {
        // ẏ = −t y; y(2) = e^{−2}
        let mut y = CMatrix::from_element(1, 1, c(1.0, 0.0));
        let mut h = f64::NAN;
        let opts = IntegratorOptions { atol: 1e-14, rtol: 1e-13, ..Default::default() };
        dopri5(|t| CMatrix::from_element(1, 1, c(-t, 0.0)), 0.0, 2.0, &mut y, &mut h, &opts).unwrap();
        assert!((y[(0, 0)].re - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn lagrange_reproduces_quintics() {
        let nodes = [0.0, 0.3, 0.7, 1.0, 1.4, 2.0];
        let f = |x: f64| 1.0 - 2.0 * x + x.powi(3) - 0.5 * x.powi(5);
        for t in [0.1, 0.5, 1.7] {
            let w = lagrange_weights(&nodes, t);
            let v: f64 = w.iter().zip(&nodes).map(|(w, x)| w * f(*x)).sum();
            assert!((v - f(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn stencil_respects_flags() {
        let flags = [false, false, false, true, false, false, false, false, false, false];
        assert_eq!(stencil(&flags, 0, 6).unwrap(), vec![0, 1, 2]);
        assert!(stencil(&flags, 2, 6).is_none());
        assert_eq!(stencil(&flags, 4, 6).unwrap(), vec![4, 5, 6, 7, 8, 9]);
        assert_eq!(stencil(&flags, 7, 6).unwrap(), vec![4, 5, 6, 7, 8, 9]);
        assert_eq!(stencil(&[false; 10], 5, 6).unwrap(), vec![3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn pure_precession_keeps_coherence() {
        let law = ScalarDistribution::point_mass(1.0);
        let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
        let g = TimeGrid::uniform(10.0, 101).unwrap();
        let me = extract_master_equation(&build_map_analytic(&ens, &g).unwrap()).unwrap();
        let tr = propagate(&me, &b0()).unwrap();
        let r0 = b0().matrix()[(0, 1)].norm();
        for v in &tr.channel("abs_rho_01").unwrap().values {
            assert!((v - r0).abs() < 1e-7, "{}", (v - r0).abs());
        }
    }

    #[test]
    fn gaussian_qubit_coherence() {
        let law = ScalarDistribution::gaussian(0.0, 1.0).unwrap();
        let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
        // beyond t ≈ 6 the map falls below the 1e-8 conditioning threshold
        let g = TimeGrid::uniform(5.0, 400).unwrap();
        let me = extract_master_equation(&build_map_analytic(&ens, &g).unwrap()).unwrap();
        let tr = propagate(&me, &b0()).unwrap();
        let r0 = b0().matrix()[(0, 1)].norm();
        for (v, t) in tr.channel("abs_rho_01").unwrap().values.iter().zip(g.times()) {
            assert!((v - r0 * (-0.5 * t * t).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn pe_qubit_stays_on_depolarizing_segment() {
        let ens = DisorderEnsemble::poissonian(2, 1.0, 4.0, 0.2).unwrap();
        let g = TimeGrid::default_for(4.0, 1.0).unwrap();
        let me = extract_master_equation(&build_map_analytic(&ens, &g).unwrap()).unwrap();
        let rho = b0();
        let tr = propagate(&me, &rho).unwrap();
        let law = depolarization_law(&ens).unwrap();
        let half = identity(2) * c(0.5, 0.0);
        let dev0 = rho.matrix() - &half;
        for (s, &t) in tr.states.iter().zip(g.times()) {
            assert!(max_abs_diff(&(s.matrix() - &half), &(&dev0 * c(law.mixing(t), 0.0))) < 1e-8);
        }
    }

    #[test]
    fn box_qubit_bridges_singular_times() {
        let law = ScalarDistribution::uniform_box(0.0, 2.0).unwrap();
        let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
        let g = TimeGrid::uniform(10.0, 401).unwrap();
        let maps = build_map_analytic(&ens, &g).unwrap();
        let me = extract_master_equation(&maps).unwrap();
        assert!(me.singular_flags().iter().any(|f| *f));
        let tr = propagate(&me, &b0()).unwrap();
        let pair = qubit_rates(law, 1.0).unwrap();
        let r01 = b0().matrix()[(0, 1)];
        for (s, &t) in tr.states.iter().zip(g.times()) {
            assert!((s.matrix()[(0, 1)] - qubit_coherence(r01, &pair, t)).norm() < 1e-6, "{t}");
        }
    }

    #[test]
    fn monte_carlo_provenance_refuses_singular_nodes() {
        let law = ScalarDistribution::uniform_box(0.0, 2.0).unwrap();
        let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
        let g = TimeGrid::uniform(10.0, 401).unwrap();
        let mut me = extract_master_equation(&build_map_analytic(&ens, &g).unwrap()).unwrap();
        me.provenance = Provenance::MonteCarlo { n_samples: 1, seed: 0, batches: 1 };
        me.exact_maps = None;
        assert!(matches!(propagate(&me, &b0()), Err(Error::SingularPropagation(_))));
    }

    #[test]
    fn propagated_maps_match_exact_maps() {
        let v = crate::ensembles::haar_unitary(3, SeedStream::new(2));
        let ens = DisorderEnsemble::new(
            3,
            1.0,
            EnsembleKind::SpectralUncorrelated {
                laws: vec![
                    ScalarDistribution::gaussian(0.2, 0.5).unwrap(),
                    ScalarDistribution::uniform_box(-0.3, 1.0).unwrap(),
                    ScalarDistribution::cauchy_lorentz(0.1, 0.4).unwrap(),
                ],
            },
        )
        .unwrap()
        .with_eigenbasis(v)
        .unwrap();
        let g = TimeGrid::default_for(1.0, 1.0).unwrap();
        let maps = build_map_analytic(&ens, &g).unwrap();
        let me = extract_master_equation(&maps).unwrap();
        let props = propagate_map(&me, &IntegratorOptions::default()).unwrap();
        for (p, f) in props.iter().zip(maps.maps()) {
            assert!(max_abs_diff(p, f.matrix()) < 1e-6);
        }
    }

    #[test]
    fn short_time_gaussian_is_exact() {
        let law = ScalarDistribution::gaussian(0.3, 1.0).unwrap();
        let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
        let st = short_time_lindblad(&ens).unwrap();
        let g = TimeGrid::uniform(5.0, 51).unwrap();
        let opts = IntegratorOptions { atol: 1e-13, rtol: 1e-12, ..Default::default() };
        let tr = propagate_generator(&st, &g, &b0(), &opts).unwrap();
        let exact = map_trajectory(&build_map_analytic(&ens, &g).unwrap(), &b0()).unwrap();
        for (a, b) in tr.states.iter().zip(&exact.states) {
            assert!(max_abs_diff(a.matrix(), b.matrix()) < 1e-9);
        }
    }

    #[test]
    fn depolarization_generator_propagates_purity() {
        let law = DepolarizationLaw { dim: 3, omega0: 1.0, kind: crate::analytic::DepolarizationKind::Gue };
        let g = TimeGrid::uniform(1.0, 21).unwrap();
        let psi = crate::operators::CVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let rho = DensityMatrix::pure(&psi).unwrap();
        let tr = propagate_generator(&law, &g, &rho, &IntegratorOptions::default()).unwrap();
        for (p, &t) in tr.channel("purity").unwrap().values.iter().zip(g.times()) {
            assert!((p - law.purity(1.0, t).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn single_realization_average_is_unitary() {
        let mut rng = SeedStream::new(9).rng();
        let h = random_hermitian(3, &mut rng);
        let ens = DisorderEnsemble::finite_list(3, 1.0, vec![(h.clone(), 1.0)]).unwrap();
        let psi = crate::operators::CVector::from_vec(vec![c(0.6, 0.0), c(0.0, 0.8), c(0.0, 0.0)]);
        let rho = DensityMatrix::pure(&psi).unwrap();
        let g = TimeGrid::uniform(3.0, 31).unwrap();
        let tr = average_direct(&ens, &rho, &g, 1, SeedStream::new(0)).unwrap();
        for (s, &t) in tr.states.iter().zip(g.times()) {
            assert!((s.purity() - 1.0).abs() < 1e-12);
            let u = crate::operators::unitary_propagator(&h, t);
            assert!(max_abs_diff(s.matrix(), &(&u * rho.matrix() * u.adjoint())) < 1e-12);
        }
    }

    #[test]
    fn direct_average_cl_envelope() {
        let law = ScalarDistribution::cauchy_lorentz(0.0, 1.0).unwrap();
        let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
        let g = TimeGrid::uniform(3.0, 31).unwrap();
        let tr = average_direct(&ens, &b0(), &g, 100_000, SeedStream::new(5)).unwrap();
        let ch = tr.channel("abs_rho_01").unwrap();
        let r0 = b0().matrix()[(0, 1)].norm();
        for i in 0..g.len() {
            let want = r0 * (-g.times()[i]).exp();
            assert!((ch.values[i] - want).abs() <= 3.0 * ch.se.as_ref().unwrap()[i] + 1e-12, "{i}");
        }
    }

    #[test]
    fn direct_average_is_deterministic_and_matches_exact() {
        let ens = DisorderEnsemble::poissonian(2, 1.0, 4.0, 0.0).unwrap();
        let g = TimeGrid::uniform(2.0, 21).unwrap();
        let a = average_direct(&ens, &b0(), &g, 20_000, SeedStream::new(3)).unwrap();
        let b = average_direct(&ens, &b0(), &g, 20_000, SeedStream::new(3)).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x.matrix(), y.matrix());
        }
        let exact = map_trajectory(&build_map_analytic(&ens, &g).unwrap(), &b0()).unwrap();
        let rep = compare(&exact, &a, Tolerance::Band { k: 4.0, floor: 1e-12 }).unwrap();
        assert!(rep.pass, "{:?}", rep.channels.iter().map(|c| (&c.name, c.violations)).collect::<Vec<_>>());
    }

    #[test]
    fn gue_purity_recovers() {
        let ens = DisorderEnsemble::gue(4, 1.0).unwrap();
        let g = TimeGrid::uniform(12.0, 121).unwrap();
        let psi = crate::operators::CVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let rho = DensityMatrix::pure(&psi).unwrap();
        let tr = average_direct(&ens, &rho, &g, 10_000, SeedStream::new(8)).unwrap();
        let p = tr.channel("purity").unwrap();
        let law = depolarization_law(&ens).unwrap();
        let se = p.se.as_ref().unwrap();
        for i in 0..g.len() {
            let want = law.purity(1.0, g.times()[i]).unwrap();
            assert!((p.values[i] - want).abs() <= 4.0 * se[i] + 2e-4, "{i}: {} vs {want}", p.values[i]);
        }
        let min = p.values.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min < 0.28 && *p.values.last().unwrap() > min + 0.01);
        assert!((law.asymptotic_purity(1.0).unwrap() - 0.28).abs() < 1e-15);
    }

    #[test]
    fn compare_reports() {
        let r = b0();
        let g = TimeGrid::uniform(3.0, 31).unwrap();
        let gauss = DisorderEnsemble::qubit(ScalarDistribution::gaussian(0.0, 1.0).unwrap(), 1.0).unwrap();
        let cl = DisorderEnsemble::qubit(ScalarDistribution::cauchy_lorentz(0.0, 1.0).unwrap(), 1.0).unwrap();
        let a = map_trajectory(&build_map_analytic(&gauss, &g).unwrap(), &r).unwrap();
        let b = map_trajectory(&build_map_analytic(&cl, &g).unwrap(), &r).unwrap();
        let same = compare(&a, &a, Tolerance::Absolute { value: 0.0 }).unwrap();
        assert!(same.pass && same.channels.iter().all(|c| c.sup_norm == 0.0));
        let diff = compare(&a, &b, Tolerance::Absolute { value: 1e-3 }).unwrap();
        assert!(!diff.pass);
        let coh = diff.channels.iter().find(|c| c.name == "abs_rho_01").unwrap();
        // the envelopes e^{−t²/2} and e^{−t} cross at t = 2 but differ by ~0.12 near t = 1
        assert!(coh.deviations[20] < 1e-12 && coh.sup_norm > 0.1);
        let other = TimeGrid::uniform(3.0, 30).unwrap();
        let c2 = map_trajectory(&build_map_analytic(&cl, &other).unwrap(), &r).unwrap();
        assert!(matches!(compare(&a, &c2, Tolerance::Absolute { value: 1.0 }), Err(Error::GridMismatch)));
    }

    #[test]
    fn mc_zero_tolerance_fails() {
        let ens = DisorderEnsemble::qubit(ScalarDistribution::gaussian(0.0, 1.0).unwrap(), 1.0).unwrap();
        let g = TimeGrid::uniform(2.0, 11).unwrap();
        let exact = map_trajectory(&build_map_analytic(&ens, &g).unwrap(), &b0()).unwrap();
        let mc = average_direct(&ens, &b0(), &g, 1000, SeedStream::new(1)).unwrap();
        assert!(!compare(&exact, &mc, Tolerance::Absolute { value: 0.0 }).unwrap().pass);
    }

    #[test]
    fn box_purity_revivals_follow_rate_sign_changes() {
        let law = ScalarDistribution::uniform_box(0.0, 2.0).unwrap();
        let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
        let g = TimeGrid::uniform(12.0, 1201).unwrap();
        let tr = map_trajectory(&build_map_analytic(&ens, &g).unwrap(), &b0()).unwrap();
        let p = &tr.channel("purity").unwrap().values;
        let pair = qubit_rates(law, 1.0).unwrap();
        let h = g.step().unwrap();
        let maxima: Vec<f64> = (1..p.len() - 1).filter(|&i| p[i] > p[i - 1] && p[i] >= p[i + 1]).map(|i| g.times()[i]).collect();
        assert!(maxima.len() >= 2);
        for tm in maxima {
            // γ_B changes sign from negative to positive at a purity maximum
            assert!(pair.rate(tm - 2.0 * h) < 0.0 && pair.rate(tm + 2.0 * h) > 0.0, "{tm}");
        }
    }

    #[test]
    fn levy_phase_grows_as_square_root() {
        let law = ScalarDistribution::levy(0.0, 1.0).unwrap();
        let ens = DisorderEnsemble::qubit(law, 1.0).unwrap();
        let g = TimeGrid::uniform(3.0, 61).unwrap();
        let tr = map_trajectory(&build_map_analytic(&ens, &g).unwrap(), &b0()).unwrap();
        let a0 = b0().matrix()[(0, 1)].arg();
        let phase: Vec<f64> = tr.states.iter().map(|s| a0 - s.matrix()[(0, 1)].arg()).collect();
        // the phase accumulated is √(σω₀t): its increments shrink while the
        // energy φ(t) = ¼√(σω₀/t) stays positive
        for i in 1..phase.len() {
            assert!(phase[i] > phase[i - 1]);
            assert!((phase[i] - g.times()[i].sqrt()).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn propagation_preserves_trace_and_fixed_point(seed in 0u64..1000, kind in 0usize..4) {
            let d = 2 + (seed as usize % 2);
            let ens = match kind {
                0 => DisorderEnsemble::poissonian(d, 1.0, 2.0, 0.1).unwrap(),
                1 => DisorderEnsemble::gue(d, 1.0).unwrap(),
                2 => DisorderEnsemble::new(d, 1.0, EnsembleKind::SpectralUncorrelated {
                    laws: (0..d).map(|j| ScalarDistribution::gaussian(0.2 * j as f64, 0.4).unwrap()).collect(),
                }).unwrap().with_eigenbasis(crate::ensembles::haar_unitary(d, SeedStream::new(seed))).unwrap(),
                _ => {
                    let mut rng = SeedStream::new(seed).rng();
                    DisorderEnsemble::finite_list(d, 1.0, vec![(random_hermitian(d, &mut rng), 0.3), (random_hermitian(d, &mut rng), 0.7)]).unwrap()
                }
            };
            let g = TimeGrid::uniform(3.0, 61).unwrap();
            let me = extract_master_equation(&build_map_exact(&ens, &g).unwrap()).unwrap();
            let mut rng = SeedStream::new(seed + 1).rng();
            let rho = random_density_matrix(d, &mut rng);
            let tr = propagate(&me, &rho).unwrap();
            let p0 = rho.purity();
            for s in &tr.states {
                prop_assert!((s.matrix().trace() - 1.0).norm() < 1e-10);
                prop_assert!(s.purity() <= p0 + 1e-8);
            }
            for (v, s) in tr.channel("purity").unwrap().values.iter().zip(&tr.states) {
                prop_assert!((v - purity(s.matrix())).abs() < 1e-12);
            }
            let mixed = propagate(&me, &DensityMatrix::maximally_mixed(d)).unwrap();
            for s in &mixed.states {
                prop_assert!(max_abs_diff(s.matrix(), &(identity(d) * c(1.0 / d as f64, 0.0))) < 1e-10);
            }
        }
    }

    #[test]
    fn monte_carlo_series_propagates() {
        let ens = DisorderEnsemble::poissonian(2, 1.0, 1.0, 0.0).unwrap();
        let g = TimeGrid::uniform(2.0, 41).unwrap();
        let maps = build_map_montecarlo(&ens, &g, 20_000, SeedStream::new(4)).unwrap();
        let me = extract_master_equation(&maps).unwrap();
        let tr = propagate(&me, &b0()).unwrap();
        let direct = map_trajectory(&maps, &b0()).unwrap();
        for (a, b) in tr.states.iter().zip(&direct.states) {
            assert!(max_abs_diff(a.matrix(), b.matrix()) < 1e-5);
        }
    }
}
