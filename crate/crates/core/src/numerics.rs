//! Quadrature and special functions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// `sin x / x` with the removable point at 0.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// d/dx sinc(x).
pub fn sinc_prime(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        let x2 = x * x;
        x * (-1.0 / 3.0 + x2 / 30.0 - x2 * x2 / 840.0)
    } else {
        (x * x.cos() - x.sin()) / (x * x)
    }
}

/// Bessel function `J_n(x) = (1/π)∫₀^π cos(nτ − x sin τ) dτ`.
///
/// The integrand is smooth and periodic, so the trapezoidal rule converges
/// geometrically once the node count exceeds |x| + n by a margin.
pub fn bessel_j(n: u32, x: f64) -> f64 {
    let m = 2 * ((x.abs() as usize + n as usize) + 40);
    let h = PI / m as f64;
    let f = |tau: f64| (n as f64 * tau - x * tau.sin()).cos();
    let mut s = 0.5 * (f(0.0) + f(PI));
    for i in 1..m {
        s += f(i as f64 * h);
    }
    s * h / PI
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Orthonormal Hermite functions `h_0(y) … h_{n-1}(y)` with weight `e^{−y²}`
/// (`∫ h_m h_n dy = δ_mn`), evaluated by the normalized three-term recurrence.
pub fn hermite_functions(n: usize, y: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let h0 = PI.powf(-0.25) * (-0.5 * y * y).exp();
    out.push(h0);
    if n > 1 {
        out.push(std::f64::consts::SQRT_2 * y * h0);
    }
    for k in 1..n.saturating_sub(1) {
        let next = (2.0 / (k + 1) as f64).sqrt() * y * out[k]
            - (k as f64 / (k + 1) as f64).sqrt() * out[k - 1];
        out.push(next);
    }
    out
}

/// Values that adaptive quadrature can accumulate.
pub trait QuadValue: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> {
    fn zero() -> Self;
    fn magnitude(self) -> f64;
}

impl QuadValue for f64 {
    fn zero() -> Self {
        0.0
    }
    fn magnitude(self) -> f64 {
        self.abs()
    }
}

impl QuadValue for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn magnitude(self) -> f64 {
        self.norm()
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// 15-point Kronrod estimate and |K15 − G7| on [a, b].
fn gk15<T: QuadValue>(f: &mut impl FnMut(f64) -> T, a: f64, b: f64) -> (T, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        k = k + s * WGK[i];
        if i % 2 == 1 {
            g = g + s * WG[i / 2];
        }
    }
    (k * h, (k - g).magnitude() * h.abs())
}

struct Piece<T> {
    a: f64,
    b: f64,
    value: T,
    err: f64,
}

impl<T> PartialEq for Piece<T> {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl<T> Eq for Piece<T> {}
impl<T> PartialOrd for Piece<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Piece<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Globally adaptive Gauss–Kronrod (7/15) quadrature on a finite interval.
///
/// Stops once the summed error estimate is below `max(abs_tol, rel_tol·|I|)`.
pub fn integrate<T: QuadValue>(
    mut f: impl FnMut(f64) -> T,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<T> {
    const MAX_PIECES: usize = 20_000;
    let mut heap = BinaryHeap::new();
    let (value, err) = gk15(&mut f, a, b);
    heap.push(Piece { a, b, value, err });
    let (mut total, mut total_err) = (value, err);
    while total_err > abs_tol.max(rel_tol * total.magnitude()) {
        if heap.len() >= MAX_PIECES {
            return Err(Error::Integrator {
                t: a,
                reason: format!("quadrature did not converge (error {total_err:.3e})"),
            });
        }
        let worst = heap.pop().expect("non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        let (v1, e1) = gk15(&mut f, worst.a, mid);
        let (v2, e2) = gk15(&mut f, mid, worst.b);
        total = total - worst.value + v1 + v2;
        total_err = total_err - worst.err + e1 + e2;
        heap.push(Piece { a: worst.a, b: mid, value: v1, err: e1 });
        heap.push(Piece { a: mid, b: worst.b, value: v2, err: e2 });
        if total_err < 0.0 {
            total_err = heap.iter().map(|p| p.err).sum();
        }
    }
    Ok(total)
}

/// `∫_{−∞}^{∞} f` via `x = c + s·u/(1−u²)`, `u ∈ (−1, 1)`.
pub fn integrate_real_line<T: QuadValue>(
    mut f: impl FnMut(f64) -> T,
    center: f64,
    scale: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<T> {
    integrate(
        |u| {
            let q = 1.0 - u * u;
            if q <= 0.0 {
                return T::zero();
            }
            let x = center + scale * u / q;
            let jac = scale * (1.0 + u * u) / (q * q);
            let v = f(x);
            if jac.is_finite() && v.magnitude().is_finite() {
                v * jac
            } else {
                T::zero()
            }
        },
        -1.0,
        1.0,
        abs_tol,
        rel_tol,
    )
}

/// `∫_{a}^{∞} f` via `x = a + s·u/(1−u)`, `u ∈ [0, 1)`.
pub fn integrate_half_line<T: QuadValue>(
    mut f: impl FnMut(f64) -> T,
    a: f64,
    scale: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<T> {
    integrate(
        |u| {
            let q = 1.0 - u;
            if q <= 0.0 {
                return T::zero();
            }
            let x = a + scale * u / q;
            let jac = scale / (q * q);
            let v = f(x);
            if jac.is_finite() && v.magnitude().is_finite() {
                v * jac
            } else {
                T::zero()
            }
        },
        0.0,
        1.0,
        abs_tol,
        rel_tol,
    )
}
