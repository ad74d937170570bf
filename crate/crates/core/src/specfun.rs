//! Bessel functions of the first kind (orders 0 and 1), Gauss–Legendre
//! quadrature and the closed-form truncated Bessel product integral.

use std::f64::consts::{FRAC_PI_4, PI};

use crate::error::{Error, Result};

/// Arguments up to this magnitude use the power series.
const SERIES_LIMIT: f64 = 8.0;
/// Above this the asymptotic expansion is accurate to rounding; in between,
/// backward recurrence.
const ASYMPTOTIC_LIMIT: f64 = 25.0;

fn check_finite(z: f64) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("Bessel argument {z} is not finite")))
    }
}

/// J0 for finite `z`; panics in debug on non-finite input. Use
/// [`bessel_j0`] when the argument is untrusted.
#[inline]
pub fn j0(z: f64) -> f64 {
    let x = z.abs();
    if x <= SERIES_LIMIT {
        series(x, 0)
    } else if x <= ASYMPTOTIC_LIMIT {
        backward_recurrence(x).0
    } else {
        hankel_asymptotic(x, 0)
    }
}

/// J1 for finite `z`.
#[inline]
pub fn j1(z: f64) -> f64 {
    let x = z.abs();
    let v = if x <= SERIES_LIMIT {
        series(x, 1)
    } else if x <= ASYMPTOTIC_LIMIT {
        backward_recurrence(x).1
    } else {
        hankel_asymptotic(x, 1)
    };
    if z < 0.0 {
        -v
    } else {
        v
    }
}

pub fn bessel_j0(z: f64) -> Result<f64> {
    check_finite(z)?;
    Ok(j0(z))
}

pub fn bessel_j1(z: f64) -> Result<f64> {
    check_finite(z)?;
    Ok(j1(z))
}

/// `sum_k (-1)^k (x/2)^(2k+n) / (k! (k+n)!)` for n in {0, 1}.
fn series(x: f64, order: u32) -> f64 {
    let q = 0.25 * x * x;
    let mut term = if order == 0 { 1.0 } else { 0.5 * x };
    let mut sum = term;
    let mut k = 1.0;
    loop {
        term *= -q / (k * (k + order as f64));
        sum += term;
        if term.abs() < 1e-18 && k > q.sqrt() {
            break;
        }
        k += 1.0;
    }
    sum
}

/// `(J0, J1)` by Miller's downward recurrence, normalized with
/// `J0 + 2 (J2 + J4 + ...) = 1`.
fn backward_recurrence(x: f64) -> (f64, f64) {
    let start = 2 * ((x + 15.0 + (40.0 * x).sqrt()) as usize / 2 + 1);
    let (mut above, mut current) = (0.0_f64, 1e-30_f64);
    let mut even_sum = 0.0;
    let (mut j0, mut j1) = (0.0, 0.0);
    for n in (1..=start).rev() {
        let below = 2.0 * n as f64 / x * current - above;
        above = current;
        current = below;
        // `current` now holds J_{n-1}
        let order = n - 1;
        if order % 2 == 0 && order > 0 {
            even_sum += current;
        }
        if order == 1 {
            j1 = current;
        }
        if order == 0 {
            j0 = current;
        }
        if current.abs() > 1e250 {
            above *= 1e-250;
            current *= 1e-250;
            even_sum *= 1e-250;
            j1 *= 1e-250;
        }
    }
    let norm = j0 + 2.0 * even_sum;
    (j0 / norm, j1 / norm)
}

/// Large-argument expansion `sqrt(2/(pi x)) (P cos chi - Q sin chi)`,
/// truncated at the smallest term.
fn hankel_asymptotic(x: f64, order: u32) -> f64 {
    let mu = 4.0 * (order * order) as f64;
    let chi = x - (0.5 * order as f64 + 0.25) * PI;
    let eight_x = 8.0 * x;
    let mut p = 1.0;
    let mut q = 0.0;
    let mut term = 1.0_f64;
    for k in 1..200u32 {
        let odd = (2 * k - 1) as f64;
        let next = term * (mu - odd * odd) / (k as f64 * eight_x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        // k = 1, 2, 3, 4, ... contributes +Q, -P, -Q, +P, ...
        match k % 4 {
            1 => q += term,
            2 => p -= term,
            3 => q -= term,
            _ => p += term,
        }
        if term.abs() < 1e-17 {
            break;
        }
    }
    (2.0 / (PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
}

/// Leading-order large-argument form `sqrt(2/(pi z)) cos(z - pi/4)`.
pub fn bessel_j0_asymptotic(z: f64) -> Result<f64> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Domain(format!(
            "asymptotic J0 needs a positive argument, got {z}"
        )));
    }
    Ok((2.0 / (PI * z)).sqrt() * (z - FRAC_PI_4).cos())
}

/// Gauss–Legendre nodes and weights on `[0, cutoff]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    cutoff: f64,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(t))
            .sum()
    }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// n-point Gauss–Legendre rule on `[0, c]`, nodes ascending.
///
/// Roots of P_n come from Newton iteration started at the Tricomi
/// approximation `cos(pi (i - 1/4) / (n + 1/2))`.
pub fn gauss_legendre(n: usize, c: f64) -> Result<QuadratureRule> {
    if n == 0 {
        return Err(Error::invalid("quadrature needs at least one node"));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid(format!("cutoff {c} must be positive")));
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        let mut root = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut deriv = 0.0;
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, root);
            let step = p / dp;
            root -= step;
            deriv = dp;
            if step.abs() <= 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, root);
        if dp.is_finite() {
            deriv = dp;
        }
        let weight = 2.0 / ((1.0 - root * root) * deriv * deriv);
        // root is the i-th largest; mirror into ascending order
        x[n - 1 - i] = root;
        x[i] = -root;
        w[n - 1 - i] = weight;
        w[i] = weight;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let scale = 0.5 * c;
    Ok(QuadratureRule {
        nodes: x.iter().map(|&xi| scale * (xi + 1.0)).collect(),
        weights: w.iter().map(|&wi| scale * wi).collect(),
        cutoff: c,
    })
}

/// `int_0^c t J0(u t) J0(v t) dt` in closed form.
///
/// At `u == v` the quotient is 0/0 and the analytic limit
/// `(c^2 / 2) (J0(uc)^2 + J1(uc)^2)` is returned instead; the limit branch
/// is taken when `|u - v| < 1e-8 max(1, u)`.
pub fn truncated_bessel_product_integral(u: f64, v: f64, c: f64) -> Result<f64> {
    if !(u >= 0.0 && v >= 0.0) {
        return Err(Error::Domain(format!(
            "frequencies must be nonnegative, got u = {u}, v = {v}"
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid(format!("cutoff {c} must be positive")));
    }
    if (u - v).abs() < 1e-8 * u.max(1.0) {
        let a = j0(u * c);
        let b = j1(u * c);
        return Ok(0.5 * c * c * (a * a + b * b));
    }
    let (uc, vc) = (u * c, v * c);
    Ok(c * (u * j1(uc) * j0(vc) - v * j0(uc) * j1(vc)) / (u * u - v * v))
}
