//! Butterworth low-pass design and zero-phase (forward-backward) filtering.
//!
//! Poles are placed analytically, prewarped, and mapped through the bilinear
//! transform; the numerator is scaled so the DC gain is exactly one by
//! construction. `filtfilt` runs the filter forward and backward over an
//! odd-reflected extension with steady-state initial conditions, so constants
//! and straight ramps pass through essentially untouched.

use rustfft::num_complex::Complex;

use crate::linalg::solve_dense;
use crate::{Error, Result};

use super::FtSeries;

/// Default low-pass cutoff for force/torque conditioning, Hz.
pub const FT_CUTOFF_HZ: f64 = 5.0;

/// Default Butterworth order for force/torque conditioning.
pub const FT_FILTER_ORDER: usize = 2;

/// Digital Butterworth low-pass coefficients `(b, a)` with `a[0] == 1`.
pub fn butter_lowpass(order: usize, cutoff_hz: f64, rate_hz: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(1..=8).contains(&order) {
        return Err(Error::FilterOrder(order));
    }
    if cutoff_hz <= 0.0 {
        return Err(Error::NonPositiveCutoff(cutoff_hz));
    }
    let nyquist = rate_hz / 2.0;
    if cutoff_hz >= nyquist {
        return Err(Error::CutoffAboveNyquist { cutoff: cutoff_hz, nyquist });
    }

    // Prewarped analog cutoff, rad/s.
    let warped = 2.0 * rate_hz * (std::f64::consts::PI * cutoff_hz / rate_hz).tan();
    let fs2 = 2.0 * rate_hz;

    // Analog poles on the left half of the Butterworth circle, then bilinear.
    let digital_poles: Vec<Complex<f64>> = (0..order)
        .map(|k| {
            let theta =
                std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            let pole = Complex::from_polar(warped, theta);
            (fs2 + pole) / (fs2 - pole)
        })
        .collect();

    // Denominator from the pole polynomial; conjugate pairs keep it real.
    let mut poly = vec![Complex::new(1.0, 0.0)];
    for p in &digital_poles {
        let mut next = vec![Complex::new(0.0, 0.0); poly.len() + 1];
        for (i, c) in poly.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * p;
        }
        poly = next;
    }
    let a: Vec<f64> = poly.iter().map(|c| c.re).collect();

    // Numerator: `order` zeros at z = -1, scaled for unit DC gain.
    let mut b = vec![1.0];
    for _ in 0..order {
        let mut next = vec![0.0; b.len() + 1];
        for (i, &c) in b.iter().enumerate() {
            next[i] += c;
            next[i + 1] += c;
        }
        b = next;
    }
    let gain = a.iter().sum::<f64>() / b.iter().sum::<f64>();
    for c in &mut b {
        *c *= gain;
    }
    Ok((b, a))
}

/// Direct-form II transposed filtering with explicit initial state.
fn lfilter(b: &[f64], a: &[f64], x: &[f64], zi: &[f64]) -> Vec<f64> {
    let n = a.len() - 1;
    let mut z = zi.to_vec();
    debug_assert_eq!(z.len(), n);
    let mut y = Vec::with_capacity(x.len());
    for &xi in x {
        let yi = b[0] * xi + if n > 0 { z[0] } else { 0.0 };
        for i in 0..n.saturating_sub(1) {
            z[i] = b[i + 1] * xi + z[i + 1] - a[i + 1] * yi;
        }
        if n > 0 {
            z[n - 1] = b[n] * xi - a[n] * yi;
        }
        y.push(yi);
    }
    y
}

/// Steady states of the direct-form II transposed recursion.
///
/// `level` is the classic `lfilter_zi` vector: starting from `level * x0` the
/// Initial filter state settled on a constant input of 1: with the state
/// recursion `z[n] = F z[n-1] + G x[n]`, solves `(I-F) zi = G`. Scaling by
/// the first input sample then starts the filter free of a step transient.
fn steady_state(b: &[f64], a: &[f64]) -> Vec<f64> {
    let n = a.len() - 1;
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] += 1.0;
        m[i][0] += a[i + 1];
        if i + 1 < n {
            m[i][i + 1] -= 1.0;
        }
    }
    let mut zi = vec![0.0; n];
    for i in 0..n {
        zi[i] = b[i + 1] - a[i + 1] * b[0];
    }
    solve_dense(&mut m, &mut zi);
    zi
}

/// Pad length for zero-phase filtering: enough of the odd-reflected edge for
/// residual edge transients to decay below ~1e-9 of their peak before the
/// kept region starts. Probed directly from the impulse response so sluggish
/// cutoffs automatically get longer pads.
fn filtfilt_padlen(b: &[f64], a: &[f64]) -> usize {
    const PROBE: usize = 4000;
    let n = a.len().max(b.len());
    let mut impulse = vec![0.0; PROBE];
    impulse[0] = 1.0;
    let h = lfilter(b, a, &impulse, &vec![0.0; a.len() - 1]);
    let peak = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let settled = h
        .iter()
        .rposition(|v| v.abs() > 1e-9 * peak)
        .map_or(PROBE, |i| i + 1);
    (3 * n).max(settled)
}

/// Zero-phase filtering: forward pass, backward pass, odd-reflection padding
/// at each end, initial conditions settled on the edge value.
///
/// The pad is long enough for every transient to die inside it, which makes
/// the contract sharp: constants and straight ramps come through at machine
/// precision over the full length (odd reflection continues a ramp with its
/// own slope, and the forward lag and backward lead cancel), and any input
/// reaches the true steady-state zero-phase response one settle length in
/// from each end. Within a settle length of a boundary the output relaxes
/// toward the reflection level `2*x[end] - x`, so high-frequency content
/// with a large swing right at an endpoint leaves a bounded, decaying edge
/// residual there instead of being attenuated. Force/torque traces are slow
/// trends plus small noise, which keeps that residual at the noise scale.
pub fn filtfilt(b: &[f64], a: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let padlen = filtfilt_padlen(b, a);
    if x.len() <= padlen {
        return Err(Error::FilterTooShort { len: x.len(), need: padlen + 1 });
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    for i in (1..=padlen).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=padlen {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }

    let ss = steady_state(b, a);
    let init = |x0: f64| -> Vec<f64> { ss.iter().map(|z| z * x0).collect() };
    let mut y = lfilter(b, a, &ext, &init(ext[0]));
    y.reverse();
    let zi = init(y[0]);
    let mut y = lfilter(b, a, &y, &zi);
    y.reverse();
    Ok(y[padlen..padlen + n].to_vec())
}

/// Zero-phase Butterworth low-pass over all six force/torque channels.
pub fn lowpass_ft(ft: &FtSeries, cutoff_hz: f64, order: usize) -> Result<FtSeries> {
    let (b, a) = butter_lowpass(order, cutoff_hz, ft.sample_rate as f64)?;
    let mut out = ft.clone();
    for channel in &mut out.channels {
        *channel = filtfilt(&b, &a, channel)?;
    }
    Ok(out)
}
