//! Least-squares polynomial fitting on a normalized abscissa.
//!
//! The abscissa is mapped to [-1, 1] before building the normal equations,
//! which keeps the Vandermonde system well conditioned for the low degrees
//! used here (calibration curves, radius profiles). The fit therefore stays
//! in scaled coordinates; evaluate through [`Poly::eval`].

use crate::linalg::solve_dense;

/// A fitted polynomial together with its abscissa normalization.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Poly {
    /// Coefficients in the scaled domain, constant term first.
    pub coeffs: Vec<f64>,
    /// Abscissa midpoint.
    pub x_mid: f64,
    /// Abscissa half-span; 1.0 when the data had zero spread.
    pub x_half: f64,
}

impl Poly {
    /// Horner evaluation at a raw (unscaled) abscissa.
    pub fn eval(&self, x: f64) -> f64 {
        let u = (x - self.x_mid) / self.x_half;
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc.mul_add(u, c))
    }

    /// Derivative with respect to the raw abscissa.
    pub fn deriv(&self, x: f64) -> f64 {
        let u = (x - self.x_mid) / self.x_half;
        let mut acc = 0.0;
        for (k, &c) in self.coeffs.iter().enumerate().skip(1).rev() {
            acc = acc * u + c * k as f64;
        }
        acc / self.x_half
    }

    /// Degree of the fitted polynomial.
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }
}

/// Least-squares fit of `ys` against `xs`. Requires more points than the
/// degree; the caller guards that and maps violations to its own error.
pub(crate) fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Poly {
    assert!(xs.len() == ys.len() && xs.len() > degree, "underdetermined fit");
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in xs {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let x_mid = 0.5 * (lo + hi);
    let x_half = if hi > lo { 0.5 * (hi - lo) } else { 1.0 };

    let m = degree + 1;
    let mut ata = vec![vec![0.0; m]; m];
    let mut atb = vec![0.0; m];
    let mut powers = vec![0.0; m];
    for (&x, &y) in xs.iter().zip(ys) {
        let u = (x - x_mid) / x_half;
        let mut p = 1.0;
        for slot in powers.iter_mut() {
            *slot = p;
            p *= u;
        }
        for i in 0..m {
            atb[i] += powers[i] * y;
            for j in 0..m {
                ata[i][j] += powers[i] * powers[j];
            }
        }
    }
    solve_dense(&mut ata, &mut atb);
    Poly { coeffs: atb, x_mid, x_half }
}

/// Root-mean-square residual of a fit over its sample set.
pub(crate) fn fit_rmse(poly: &Poly, xs: &[f64], ys: &[f64]) -> f64 {
    let sum: f64 = xs.iter().zip(ys).map(|(&x, &y)| (poly.eval(x) - y).powi(2)).sum();
    (sum / xs.len() as f64).sqrt()
}
