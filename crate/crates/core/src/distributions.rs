//! Scalar eigenvalue laws: densities, characteristic functions, cumulants and samplers.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Cauchy, Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sinc, sinc_prime};
use crate::operators::I;
use crate::rng::SeedStream;

/// Highest cumulant order handled by the moment recursion.
pub const MAX_CUMULANT_ORDER: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionKind {
    CauchyLorentz,
    Gaussian,
    UniformBox,
    Levy,
    PointMass,
}

impl DistributionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::CauchyLorentz => "cauchy-lorentz",
            Self::Gaussian => "gaussian",
            Self::UniformBox => "uniform-box",
            Self::Levy => "levy",
            Self::PointMass => "point-mass",
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawDistribution {
    kind: DistributionKind,
    #[serde(default)]
    location: f64,
    #[serde(default)]
    scale: Option<f64>,
}

/// One-dimensional law with location `λ₀` and scale `σ`.
///
/// Serialized as `{"kind": ..., "location": λ₀, "scale": σ}`; `scale` may be
/// omitted for a point mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct ScalarDistribution {
    kind: DistributionKind,
    location: f64,
    scale: f64,
}

impl TryFrom<RawDistribution> for ScalarDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        match (raw.kind, raw.scale) {
            (DistributionKind::PointMass, _) => Ok(Self::point_mass(raw.location)),
            (kind, Some(scale)) => Self::new(kind, raw.location, scale),
            (kind, None) => Err(Error::Config(format!("{} law needs a scale", kind.name()))),
        }
    }
}

impl ScalarDistribution {
    pub fn new(kind: DistributionKind, location: f64, scale: f64) -> Result<Self> {
        if !location.is_finite() {
            return Err(Error::Config(format!("location {location} is not finite")));
        }
        if kind == DistributionKind::PointMass {
            return Ok(Self::point_mass(location));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { kind, location, scale })
    }

    pub fn cauchy_lorentz(location: f64, scale: f64) -> Result<Self> {
        Self::new(DistributionKind::CauchyLorentz, location, scale)
    }

    pub fn gaussian(location: f64, scale: f64) -> Result<Self> {
        Self::new(DistributionKind::Gaussian, location, scale)
    }

    /// Uniform on `[λ₀ − σ/2, λ₀ + σ/2]`.
    pub fn uniform_box(location: f64, width: f64) -> Result<Self> {
        Self::new(DistributionKind::UniformBox, location, width)
    }

    pub fn levy(location: f64, scale: f64) -> Result<Self> {
        Self::new(DistributionKind::Levy, location, scale)
    }

    pub fn point_mass(location: f64) -> Self {
        Self { kind: DistributionKind::PointMass, location, scale: 0.0 }
    }

    pub fn kind(&self) -> DistributionKind {
        self.kind
    }

    pub fn location(&self) -> f64 {
        self.location
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Symmetric about `λ₀` (so the energy function is time independent).
    pub fn is_symmetric(&self) -> bool {
        self.kind != DistributionKind::Levy
    }

    pub fn has_finite_mean(&self) -> bool {
        !matches!(self.kind, DistributionKind::CauchyLorentz | DistributionKind::Levy)
    }

    /// Probability density; `None` for the point mass.
    pub fn density(&self, x: f64) -> Option<f64> {
        let (l0, s) = (self.location, self.scale);
        Some(match self.kind {
            DistributionKind::CauchyLorentz => s / (PI * ((x - l0).powi(2) + s * s)),
            DistributionKind::Gaussian => {
                (-(x - l0).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt())
            }
            DistributionKind::UniformBox => {
                if (x - l0).abs() <= 0.5 * s {
                    1.0 / s
                } else {
                    0.0
                }
            }
            DistributionKind::Levy => {
                let y = x - l0;
                if y <= 0.0 {
                    0.0
                } else {
                    (s / (2.0 * PI)).sqrt() * (-s / (2.0 * y)).exp() / y.powf(1.5)
                }
            }
            DistributionKind::PointMass => return None,
        })
    }

    /// `φ(u) = E[e^{iλu}]`.
    pub fn char_fn(&self, u: f64) -> Complex64 {
        let (l0, s) = (self.location, self.scale);
        let carrier = Complex64::from_polar(1.0, l0 * u);
        match self.kind {
            DistributionKind::CauchyLorentz => carrier * (-s * u.abs()).exp(),
            DistributionKind::Gaussian => carrier * (-0.5 * s * s * u * u).exp(),
            DistributionKind::UniformBox => carrier * sinc(0.5 * s * u),
            DistributionKind::Levy => {
                if u < 0.0 {
                    self.char_fn(-u).conj()
                } else {
                    (I * l0 * u - Complex64::new(0.0, -2.0 * s * u).sqrt()).exp()
                }
            }
            DistributionKind::PointMass => carrier,
        }
    }

    /// `φ′(u)`. At `u = 0` the Cauchy–Lorentz value is the right derivative;
    /// the Lévy derivative diverges there and is returned as non-finite.
    pub fn char_fn_derivative(&self, u: f64) -> Complex64 {
        let (l0, s) = (self.location, self.scale);
        match self.kind {
            DistributionKind::UniformBox => {
                let x = 0.5 * s * u;
                Complex64::from_polar(1.0, l0 * u) * (0.5 * s * sinc_prime(x) + I * l0 * sinc(x))
            }
            DistributionKind::Levy if u == 0.0 => Complex64::new(f64::NEG_INFINITY, f64::INFINITY),
            _ => self.log_derivative(u) * self.char_fn(u),
        }
    }

    /// `(ln φ)′(u) = φ′/φ`; infinite at zeros of the box characteristic function.
    pub fn log_derivative(&self, u: f64) -> Complex64 {
        let (l0, s) = (self.location, self.scale);
        match self.kind {
            DistributionKind::CauchyLorentz => I * l0 - if u >= 0.0 { s } else { -s },
            DistributionKind::Gaussian => I * l0 - s * s * u,
            DistributionKind::UniformBox => {
                let x = 0.5 * s * u;
                let v = sinc(x);
                if v == 0.0 {
                    return Complex64::new(f64::INFINITY, l0);
                }
                I * l0 + 0.5 * s * sinc_prime(x) / v
            }
            DistributionKind::Levy => {
                if u == 0.0 {
                    return Complex64::new(f64::NEG_INFINITY, f64::INFINITY);
                }
                let r = 0.5 * (s / u.abs()).sqrt();
                if u > 0.0 {
                    I * l0 + Complex64::new(-r, r)
                } else {
                    I * l0 + Complex64::new(r, r)
                }
            }
            DistributionKind::PointMass => I * l0,
        }
    }

    pub fn mean(&self) -> Option<f64> {
        self.has_finite_mean().then_some(self.location)
    }

    pub fn variance(&self) -> Option<f64> {
        match self.kind {
            DistributionKind::Gaussian => Some(self.scale * self.scale),
            DistributionKind::UniformBox => Some(self.scale * self.scale / 12.0),
            DistributionKind::PointMass => Some(0.0),
            _ => None,
        }
    }

    /// Raw moments `μ⁽¹⁾ … μ⁽ⁿ⁾`; `None` when they do not exist.
    pub fn raw_moments(&self, n: usize) -> Option<Vec<f64>> {
        let s = self.scale;
        let central = |k: usize| -> f64 {
            if k % 2 == 1 {
                return 0.0;
            }
            match self.kind {
                DistributionKind::Gaussian => {
                    (1..k).step_by(2).map(|m| m as f64).product::<f64>() * s.powi(k as i32)
                }
                DistributionKind::UniformBox => (0.5 * s).powi(k as i32) / (k + 1) as f64,
                _ => {
                    if k == 0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        };
        if !self.has_finite_mean() {
            return None;
        }
        let binom = binomial_table(n);
        Some(
            (1..=n)
                .map(|order| {
                    (0..=order)
                        .map(|k| {
                            binom[order][k] * self.location.powi((order - k) as i32) * central(k)
                        })
                        .sum()
                })
                .collect(),
        )
    }

    /// Cumulants up to `n` (all flagged infinite for the heavy-tailed laws).
    pub fn cumulants(&self, n: usize) -> Result<CumulantVector> {
        match self.raw_moments(n) {
            Some(m) => cumulants_from_moments(&m),
            None => Ok(CumulantVector { values: vec![f64::INFINITY; n], finite: vec![false; n] }),
        }
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (l0, s) = (self.location, self.scale);
        match self.kind {
            DistributionKind::CauchyLorentz => Cauchy::new(l0, s).expect("validated").sample(rng),
            DistributionKind::Gaussian => Normal::new(l0, s).expect("validated").sample(rng),
            DistributionKind::UniformBox => Uniform::new(l0 - 0.5 * s, l0 + 0.5 * s).sample(rng),
            DistributionKind::Levy => {
                let z: f64 = rng.sample(StandardNormal);
                l0 + s / (z * z)
            }
            DistributionKind::PointMass => l0,
        }
    }

    pub fn sample(&self, seed: SeedStream, n: usize) -> Vec<f64> {
        let mut rng = seed.rng();
        (0..n).map(|_| self.sample_one(&mut rng)).collect()
    }
}

fn binomial_table(n: usize) -> Vec<Vec<f64>> {
    let mut t = vec![vec![1.0]];
    for i in 1..=n {
        let prev = &t[i - 1];
        let mut row = vec![1.0; i + 1];
        for k in 1..i {
            row[k] = prev[k - 1] + prev[k];
        }
        t.push(row);
    }
    t
}

/// Cumulants `κ⁽¹⁾ … κ⁽ⁿ⁾` with per-order finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulantVector {
    pub values: Vec<f64>,
    pub finite: Vec<bool>,
}

impl CumulantVector {
    pub fn order(&self) -> usize {
        self.values.len()
    }

    /// `κ⁽ⁿ⁾` with 1-based `n`.
    pub fn get(&self, n: usize) -> f64 {
        self.values[n - 1]
    }
}

/// `κ⁽ⁿ⁾ = μ⁽ⁿ⁾ − Σ_{m=1}^{n−1} C(n−1, m−1) κ⁽ᵐ⁾ μ⁽ⁿ⁻ᵐ⁾`.
pub fn cumulants_from_moments(moments: &[f64]) -> Result<CumulantVector> {
    let n = moments.len();
    if n == 0 || n > MAX_CUMULANT_ORDER {
        return Err(Error::ContractViolation(format!(
            "cumulant order must be in 1..={MAX_CUMULANT_ORDER}, got {n}"
        )));
    }
    let binom = binomial_table(n);
    let mut k = Vec::with_capacity(n);
    for order in 1..=n {
        let mut v = moments[order - 1];
        for m in 1..order {
            v -= binom[order - 1][m - 1] * k[m - 1] * moments[order - m - 1];
        }
        k.push(v);
    }
    let finite = k.iter().map(|x: &f64| x.is_finite()).collect();
    Ok(CumulantVector { values: k, finite })
}

/// Truncated cumulant series for the qubit energy function and dephasing
/// rate, using `κ⁽¹⁾ … κ⁽ᵒʳᵈᵉʳ⁾`. Returns `(φ, γ)`.
pub fn cumulant_series_rates(
    kappa: &CumulantVector,
    omega0: f64,
    t: f64,
    order: usize,
) -> Result<(f64, f64)> {
    if order > kappa.order() {
        return Err(Error::ContractViolation(format!(
            "order {order} exceeds available cumulants ({})",
            kappa.order()
        )));
    }
    if kappa.finite[..order].iter().any(|f| !f) {
        return Err(Error::UnsupportedDistribution("cumulants of this law are not finite".into()));
    }
    let mut fact = vec![1.0f64; order + 1];
    for i in 1..=order {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut phi = 0.0;
    let mut gamma = 0.0;
    for n in 1..=order {
        let m = n / 2;
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        let term = sign * kappa.get(n) * omega0.powi(n as i32) * t.powi(n as i32 - 1) / fact[n - 1];
        if n % 2 == 1 {
            phi += 0.5 * term;
        } else {
            gamma -= 0.5 * term;
        }
    }
    Ok((phi, gamma))
}
