//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde_json::{json, Value};

use crate::analytic::{depolarization_law, qubit_coherence, qubit_rates, spectral_master_equation, DepolarizationLaw, QubitRatePair};
use crate::config::{GridSpec, RunConfig};
use crate::distributions::ScalarDistribution;
use crate::ensembles::{gue_chi_bar_large_d, DisorderEnsemble};
use crate::error::{Error, Result};
use crate::extraction::{build_map_exact, build_map_montecarlo, extract_master_equation, MasterEquationSeries, TimeGrid};
use crate::io::{comparison_summary, comparison_table, master_equation_json, master_equation_table, trajectory_table, write_json, write_table_with_manifest, Table};
use crate::numerics::{bessel_j, sinc};
use crate::propagation::{average_direct, compare, propagate_with, IntegratorOptions, Tolerance};
use crate::rng::SeedStream;

#[derive(Debug, Parser)]
#[command(name = "disorder-dynamics", version, about = "Ensemble-averaged dynamics under static Hamiltonian disorder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Cap on worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

/// Flags shared by every command; each overrides the matching config field.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Monte Carlo seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo sample count.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Time grid as `t_max:n`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Hilbert-space dimension.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FigureName {
    Fig2,
    Fig3,
    Fig4,
    Bloch,
    PurityGue,
}

impl FigureName {
    fn label(self) -> &'static str {
        match self {
            Self::Fig2 => "fig2",
            Self::Fig3 => "fig3",
            Self::Fig4 => "fig4",
            Self::Bloch => "bloch",
            Self::PurityGue => "purity-gue",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rates and effective Hamiltonian of the configured ensemble.
    Rates(Overrides),
    /// Data behind one of the standard figures.
    Figure {
        name: FigureName,
        #[command(flatten)]
        o: Overrides,
    },
    /// Direct ensemble average against the propagated master equation.
    Crosscheck {
        #[command(flatten)]
        o: Overrides,
        /// Absolute tolerance replacing the standard-error band.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Time-local master equation extracted from the dynamical map.
    Extract {
        #[command(flatten)]
        o: Overrides,
        /// Estimate the map by Monte Carlo instead of exactly.
        #[arg(long)]
        monte_carlo: bool,
    },
    /// Integrate the extracted master equation from the initial state.
    Propagate(Overrides),
    /// Monte Carlo average of unitarily evolved states.
    Average(Overrides),
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass = 0,
    CheckFailed = 1,
}

/// Exit code for an error: 2 for configuration problems, 3 for numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ExtractionFailure { .. }
        | Error::SingularPropagation(_)
        | Error::Integrator { .. }
        | Error::InconsistentGenerator(_)
        | Error::ContractViolation(_) => 3,
        _ => 2,
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match execute(&cli.command) {
        Ok(o) => o as i32,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::Rates(o) => cmd_rates(&load(o)?),
        Command::Figure { name, o } => cmd_figure(*name, o),
        Command::Crosscheck { o, tolerance } => {
            let mut cfg = load(o)?;
            if let Some(v) = tolerance {
                cfg.tolerance = Some(Tolerance::Absolute { value: *v });
            }
            cmd_crosscheck(&cfg)
        }
        Command::Extract { o, monte_carlo } => cmd_extract(&load(o)?, *monte_carlo),
        Command::Propagate(o) => cmd_propagate(&load(o)?),
        Command::Average(o) => cmd_average(&load(o)?),
    }
}

/// Read `--config` and apply the flag overrides.
pub fn load(o: &Overrides) -> Result<RunConfig> {
    let path = o.config.as_ref().ok_or_else(|| Error::Config("--config <path> is required for this command".into()))?;
    let mut cfg = RunConfig::from_path(path)?;
    apply_overrides(&mut cfg, o)?;
    Ok(cfg)
}

pub fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) -> Result<()> {
    if let Some(s) = o.seed {
        cfg.mc.seed = s;
    }
    if let Some(n) = o.samples {
        cfg.mc.n_samples = n;
    }
    if let Some(out) = &o.out {
        cfg.output = out.to_string_lossy().into_owned();
    }
    if let Some(g) = &o.grid {
        cfg.grid = Some(GridSpec::parse(g)?);
    }
    if let Some(d) = o.dim {
        cfg.ensemble.dim = Some(d);
    }
    Ok(())
}

/// Resolved config for a manifest. The output directory is left out so that
/// runs into different directories produce identical files.
fn config_record(cfg: &RunConfig) -> Value {
    let mut v = json!(cfg);
    if let Value::Object(m) = &mut v {
        m.remove("output");
    }
    v
}

fn manifest(command: &str, cfg: Value, extra: Value) -> Value {
    let mut m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut m, extra) {
        m.extend(e);
    }
    m
}

/// Closed-form series for spectral kinds, otherwise extraction from the exact map.
pub fn closed_form_or_extracted(ens: &DisorderEnsemble, grid: &TimeGrid) -> Result<MasterEquationSeries> {
    if ens.is_spectral() {
        return spectral_master_equation(ens, grid);
    }
    extracted(ens, grid)
}

/// `Q = Ḟ F̄⁻¹` from the exact (closed-form or finite-list) map.
pub fn extracted(ens: &DisorderEnsemble, grid: &TimeGrid) -> Result<MasterEquationSeries> {
    extract_master_equation(&build_map_exact(ens, grid)?)
}

/// Grid index nearest each time in `marks`.
fn nearest_indices(times: &[f64], marks: &[f64]) -> Vec<usize> {
    marks
        .iter()
        .map(|&m| {
            let i = times.partition_point(|&t| t < m);
            if i == 0 {
                0
            } else if i == times.len() || m - times[i - 1] <= times[i] - m {
                i - 1
            } else {
                i
            }
        })
        .collect()
}

/// Qubit rate, energy and flag columns. Singular times sit on the nearest grid
/// point, where the rate is `inf` on the approach side and `-inf` past it.
fn qubit_rate_columns(pair: &QubitRatePair, times: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<String>) {
    let mut gamma: Vec<f64> = times.iter().map(|&t| pair.rate(t)).collect();
    let energy: Vec<f64> = times.iter().map(|&t| pair.energy(t)).collect();
    let mut flag = vec!["0".to_string(); times.len()];
    let taus = pair.singular_times(*times.last().expect("non-empty grid"));
    for (i, tau) in nearest_indices(times, &taus).into_iter().zip(taus) {
        gamma[i] = if times[i] <= tau { f64::INFINITY } else { f64::NEG_INFINITY };
        flag[i] = "inf".into();
    }
    (gamma, energy, flag)
}

const FLAG_NOTE: &str = "singular columns hold inf at flagged grid times and 0 elsewhere";

pub fn cmd_rates(cfg: &RunConfig) -> Result<Outcome> {
    let ens = cfg.ensemble.build()?;
    let grid = cfg.time_grid()?;
    let out = Path::new(&cfg.output).join("rates.csv");
    let mut table = Table::new();
    table.push("t", grid.times());
    let path_used = if let (Some(law), 2) = (ens.qubit_law(), ens.dim()) {
        let pair = qubit_rates(law, ens.omega0())?;
        let (gamma, energy, flag) = qubit_rate_columns(&pair, grid.times());
        table.push("gamma", &gamma).push("energy", &energy).push_raw("singular", flag);
        "analytic-qubit"
    } else {
        let me = closed_form_or_extracted(&ens, &grid)?;
        table = master_equation_table(&me)?;
        if ens.is_spectral() { "analytic-spectral" } else { "extraction" }
    };
    write_table_with_manifest(
        &out,
        &table,
        manifest(
            "rates",
            config_record(cfg),
            json!({
                "path": path_used,
                "schema": {
                    "gamma": "dephasing rate of the master equation rho' = -i[energy*sigma_z, rho] + gamma*(sigma_z rho sigma_z - rho)",
                    "gamma_k": "eigenvalues of the rate matrix in continuity-tracked order",
                    "h_m": "coefficients of H_eff on the orthonormal Gell-Mann basis",
                    "singular": FLAG_NOTE,
                },
            }),
        ),
    )?;
    Ok(Outcome::Pass)
}

pub fn cmd_extract(cfg: &RunConfig, monte_carlo: bool) -> Result<Outcome> {
    let ens = cfg.ensemble.build()?;
    let grid = cfg.time_grid()?;
    let me = if monte_carlo {
        extract_master_equation(&build_map_montecarlo(&ens, &grid, cfg.mc.n_samples, SeedStream::new(cfg.mc.seed))?)?
    } else {
        extracted(&ens, &grid)?
    };
    let dir = Path::new(&cfg.output);
    write_table_with_manifest(
        &dir.join("master_equation.csv"),
        &master_equation_table(&me)?,
        manifest(
            "extract",
            config_record(cfg),
            json!({
                "monte_carlo": monte_carlo,
                "provenance": me.provenance,
                "operators": "operators.json",
                "schema": { "singular": FLAG_NOTE, "complex": "[re, im]" },
            }),
        ),
    )?;
    write_json(&dir.join("operators.json"), &master_equation_json(&me))?;
    Ok(Outcome::Pass)
}

fn integrator(cfg: &RunConfig) -> IntegratorOptions {
    cfg.integrator.unwrap_or_default()
}

pub fn cmd_propagate(cfg: &RunConfig) -> Result<Outcome> {
    let ens = cfg.ensemble.build()?;
    let grid = cfg.time_grid()?;
    let rho0 = cfg.initial_state(ens.dim())?;
    let me = extracted(&ens, &grid)?;
    let traj = propagate_with(&me, &rho0, &integrator(cfg))?;
    write_table_with_manifest(
        &Path::new(&cfg.output).join("trajectory.csv"),
        &trajectory_table(&traj),
        manifest("propagate", config_record(cfg), json!({ "integrator": integrator(cfg) })),
    )?;
    Ok(Outcome::Pass)
}

pub fn cmd_average(cfg: &RunConfig) -> Result<Outcome> {
    let ens = cfg.ensemble.build()?;
    let grid = cfg.time_grid()?;
    let rho0 = cfg.initial_state(ens.dim())?;
    let traj = average_direct(&ens, &rho0, &grid, cfg.mc.n_samples, SeedStream::new(cfg.mc.seed))?;
    write_table_with_manifest(
        &Path::new(&cfg.output).join("average.csv"),
        &trajectory_table(&traj),
        manifest("average", config_record(cfg), json!({ "schema": { "<name>_se": "Monte Carlo standard error" } })),
    )?;
    Ok(Outcome::Pass)
}

/// Default acceptance band: three standard errors plus `1e-6`.
pub const DEFAULT_BAND: Tolerance = Tolerance::Band { k: 3.0, floor: 1e-6 };

pub fn cmd_crosscheck(cfg: &RunConfig) -> Result<Outcome> {
    let ens = cfg.ensemble.build()?;
    let grid = cfg.time_grid()?;
    let rho0 = cfg.initial_state(ens.dim())?;
    let direct = average_direct(&ens, &rho0, &grid, cfg.mc.n_samples, SeedStream::new(cfg.mc.seed))?;
    let me = extracted(&ens, &grid)?;
    let propagated = propagate_with(&me, &rho0, &integrator(cfg))?;
    let tol = cfg.tolerance.unwrap_or(DEFAULT_BAND);
    let report = compare(&direct, &propagated, tol)?;
    let summary = comparison_summary(&report);
    write_table_with_manifest(
        &Path::new(&cfg.output).join("crosscheck.csv"),
        &comparison_table(grid.times(), &report),
        manifest("crosscheck", config_record(cfg), json!({ "report": summary })),
    )?;
    for ch in &report.channels {
        println!(
            "{} {:<12} sup={:.3e} violations={}",
            if ch.pass { "PASS" } else { "FAIL" },
            ch.name,
            ch.sup_norm,
            ch.violations
        );
    }
    println!("crosscheck: {}", if report.pass { "PASS" } else { "FAIL" });
    Ok(if report.pass { Outcome::Pass } else { Outcome::CheckFailed })
}

fn figure_grid(o: &Overrides, t_max: f64, n: usize) -> Result<TimeGrid> {
    match &o.grid {
        Some(g) => GridSpec::parse(g)?.build(),
        None => TimeGrid::uniform(t_max, n),
    }
}

fn figure_dims(o: &Overrides) -> Vec<usize> {
    o.dim.map_or_else(|| vec![2, 4, 8], |d| vec![d])
}

/// The four qubit laws at width `σ`, with the box widened to `2σ`.
fn qubit_laws(sigma: f64, location: f64) -> Result<[(&'static str, ScalarDistribution); 4]> {
    Ok([
        ("cl", ScalarDistribution::cauchy_lorentz(location, sigma)?),
        ("gaussian", ScalarDistribution::gaussian(location, sigma)?),
        ("box", ScalarDistribution::uniform_box(location, 2.0 * sigma)?),
        ("levy", ScalarDistribution::levy(location, sigma)?),
    ])
}

const FIG_BLOCH: [f64; 3] = [0.4, 0.8, 1.0 / 3.0];

fn rho01(b: [f64; 3]) -> Complex64 {
    Complex64::new(0.5 * b[0], -0.5 * b[1])
}

/// Mixing `a`, `ȧ` for the large-`d` limits.
fn large_d_mixing(kind: &str, sigma: f64, omega0: f64, t: f64) -> (f64, f64) {
    match kind {
        "pe" => {
            let x = 0.5 * sigma * omega0 * t;
            let s = sinc(x);
            (s * s, 2.0 * s * crate::numerics::sinc_prime(x) * 0.5 * sigma * omega0)
        }
        _ => {
            let (chi, dchi) = gue_chi_bar_large_d(omega0 * t);
            (chi, dchi * omega0)
        }
    }
}

fn rate_from_mixing((a, da): (f64, f64)) -> f64 {
    if da == 0.0 {
        0.0
    } else if a == 0.0 {
        f64::INFINITY
    } else {
        -da / a
    }
}

/// Positive zeros of `J₁` up to `x_max`.
pub fn bessel_j1_zeros(x_max: f64) -> Vec<f64> {
    let mut zeros = Vec::new();
    for n in 1.. {
        // McMahon start, then Newton with J₁′ = J₀ − J₁/x
        let beta = (n as f64 + 0.25) * std::f64::consts::PI;
        let mut x = beta - 3.0 / (8.0 * beta);
        for _ in 0..50 {
            let step = bessel_j(1, x) / (bessel_j(0, x) - bessel_j(1, x) / x);
            x -= step;
            if step.abs() < 1e-15 * x {
                break;
            }
        }
        if x > x_max {
            break;
        }
        zeros.push(x);
    }
    zeros
}

/// Grid indices of interior local minima.
fn local_minima(values: &[f64]) -> Vec<usize> {
    (1..values.len().saturating_sub(1)).filter(|&i| values[i] < values[i - 1] && values[i] <= values[i + 1]).collect()
}

fn depolarization_columns(law: &DepolarizationLaw, times: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let purity = times.iter().map(|&t| law.purity(1.0, t)).collect::<Result<Vec<_>>>()?;
    let rate = times.iter().map(|&t| rate_from_mixing(law.mixing_with_derivative(t))).collect();
    Ok((purity, rate))
}

pub fn cmd_figure(name: FigureName, o: &Overrides) -> Result<Outcome> {
    let dir = o.out.clone().unwrap_or_else(|| PathBuf::from("out")).join(name.label());
    let overrides = json!({ "grid": o.grid, "dim": o.dim });
    match name {
        FigureName::Fig2 => {
            let (sigma, omega0) = (1.0, 1.0);
            let grid = figure_grid(o, 3.0 * std::f64::consts::PI / (sigma * omega0), 400)?;
            let t = grid.times();
            let laws = qubit_laws(sigma, 0.0)?;
            let mut coh = Table::new();
            let mut rates = Table::new();
            coh.push("t", t);
            rates.push("t", t);
            for (label, law) in laws {
                let pair = qubit_rates(law, omega0)?;
                let c: Vec<f64> = t.iter().map(|&s| qubit_coherence(rho01(FIG_BLOCH), &pair, s).norm()).collect();
                coh.push(format!("abs_rho01_{label}"), &c);
                let (gamma, energy, flag) = qubit_rate_columns(&pair, t);
                rates.push(format!("gamma_{label}"), &gamma).push(format!("energy_{label}"), &energy);
                if label == "box" {
                    rates.push_raw("singular_box", flag);
                }
            }
            let params = json!({
                "omega0": omega0, "sigma": sigma, "box_width": 2.0 * sigma, "location": 0.0,
                "initial_bloch": FIG_BLOCH, "overrides": overrides,
            });
            write_table_with_manifest(&dir.join("coherence.csv"), &coh, manifest("figure fig2", params.clone(), json!({})))?;
            write_table_with_manifest(&dir.join("rates.csv"), &rates, manifest("figure fig2", params, json!({ "schema": { "singular_box": FLAG_NOTE } })))?;
        }
        FigureName::Bloch => {
            let (sigma, omega0, location) = (1.0, 1.0, 1.0);
            let grid = figure_grid(o, 3.0 * std::f64::consts::PI / (sigma * omega0), 400)?;
            let t = grid.times();
            let mut table = Table::new();
            table.push("t", t);
            for (label, law) in qubit_laws(sigma, location)? {
                let pair = qubit_rates(law, omega0)?;
                let c: Vec<Complex64> = t.iter().map(|&s| qubit_coherence(rho01(FIG_BLOCH), &pair, s)).collect();
                table.push(format!("bloch_x_{label}"), &c.iter().map(|z| 2.0 * z.re).collect::<Vec<_>>());
                table.push(format!("bloch_y_{label}"), &c.iter().map(|z| -2.0 * z.im).collect::<Vec<_>>());
            }
            table.push("bloch_z", &vec![FIG_BLOCH[2]; t.len()]);
            let params = json!({
                "omega0": omega0, "sigma": sigma, "box_width": 2.0 * sigma, "location": location,
                "initial_bloch": FIG_BLOCH, "overrides": overrides,
            });
            write_table_with_manifest(&dir.join("bloch.csv"), &table, manifest("figure bloch", params, json!({})))?;
        }
        FigureName::Fig3 | FigureName::Fig4 => {
            let pe = name == FigureName::Fig3;
            let (sigma, omega0) = (4.0, 1.0);
            let t_max = if pe { 40.0 / (sigma * omega0) } else { 10.0 / omega0 };
            let grid = figure_grid(o, t_max, 400)?;
            let t = grid.times();
            let mut purity = Table::new();
            let mut rates = Table::new();
            purity.push("t", t);
            rates.push("t", t);
            let mut asymptotes = serde_json::Map::new();
            for d in figure_dims(o) {
                let ens = if pe { DisorderEnsemble::poissonian(d, omega0, sigma, 0.0)? } else { DisorderEnsemble::gue(d, omega0)? };
                let law = depolarization_law(&ens)?;
                let (p, r) = depolarization_columns(&law, t)?;
                purity.push(format!("purity_d{d}"), &p);
                rates.push(format!("rate_d{d}"), &r);
                asymptotes.insert(format!("d{d}"), json!(law.asymptotic_purity(1.0)?));
            }
            let kind = if pe { "pe" } else { "gue" };
            let mix: Vec<(f64, f64)> = t.iter().map(|&s| large_d_mixing(kind, sigma, omega0, s)).collect();
            let large_purity: Vec<f64> = mix.iter().map(|(a, _)| a * a).collect();
            purity.push("purity_large_d", &large_purity);
            rates.push("rate_large_d", &mix.iter().map(|&m| rate_from_mixing(m)).collect::<Vec<_>>());
            let params = json!({
                "ensemble": if pe { "unitarily-invariant-pe" } else { "unitarily-invariant-gue" },
                "omega0": omega0,
                "sigma": if pe { json!(sigma) } else { Value::Null },
                "initial_purity": 1.0,
                "overrides": overrides,
            });
            let label = format!("figure {}", name.label());
            write_table_with_manifest(&dir.join("purity.csv"), &purity, manifest(&label, params.clone(), json!({ "asymptotic_purity": asymptotes })))?;
            write_table_with_manifest(&dir.join("rates.csv"), &rates, manifest(&label, params.clone(), json!({})))?;
            if !pe {
                let zeros: Vec<f64> = bessel_j1_zeros(2.0 * omega0 * t_max).iter().map(|z| z / (2.0 * omega0)).collect();
                let minima: Vec<f64> = local_minima(&large_purity).into_iter().map(|i| t[i]).collect();
                let n = zeros.len().min(minima.len());
                let mut rev = Table::new();
                rev.push("n", &(1..=n).map(|k| k as f64).collect::<Vec<_>>());
                rev.push("bessel_zero_time", &zeros[..n]).push("purity_minimum_time", &minima[..n]);
                write_table_with_manifest(
                    &dir.join("revivals.csv"),
                    &rev,
                    manifest(&label, params, json!({ "schema": { "bessel_zero_time": "j_{1,n}/(2 omega0)", "purity_minimum_time": "grid local minima of purity_large_d" } })),
                )?;
            }
        }
        FigureName::PurityGue => {
            let omega0 = 1.0;
            let grid = figure_grid(o, 10.0 / omega0, 400)?;
            let t = grid.times();
            let mut table = Table::new();
            table.push("t", t);
            let mut rev = Table::new();
            let mut rev_d = Vec::new();
            let mut rev_t = Vec::new();
            for d in figure_dims(o) {
                let law = depolarization_law(&DisorderEnsemble::gue(d, omega0)?)?;
                let (p, r) = depolarization_columns(&law, t)?;
                for i in local_minima(&p) {
                    rev_d.push(d as f64);
                    rev_t.push(t[i]);
                }
                table.push(format!("purity_d{d}"), &p).push(format!("rate_d{d}"), &r);
            }
            rev.push("d", &rev_d).push("purity_minimum_time", &rev_t);
            let params = json!({ "ensemble": "unitarily-invariant-gue", "omega0": omega0, "initial_purity": 1.0, "overrides": overrides });
            write_table_with_manifest(&dir.join("purity.csv"), &table, manifest("figure purity-gue", params.clone(), json!({})))?;
            write_table_with_manifest(&dir.join("revivals.csv"), &rev, manifest("figure purity-gue", params, json!({})))?;
        }
    }
    Ok(Outcome::Pass)
}
