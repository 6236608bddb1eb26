//! Container edge-profile reconstruction from poured mass and estimated
//! heights: each decision interval pours a thin disc, so its radius is
//! `sqrt(dm / (rho * pi * dh))`. Intervals too thin for a stable quotient
//! are merged forward, the scatter is fitted with a quadratic in height,
//! and the fit can be scored against a known geometry per height band.

use std::path::Path;

use crate::dsp::{lowpass_ft, FtSeries, FT_CUTOFF_HZ, FT_FILTER_ORDER, FT_RATE};
use crate::synthsim::{ContainerGeometry, GRAVITY};
use crate::{Error, Result};

/// One reconstructed edge point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSample {
    /// Midpoint liquid height of the interval, mm.
    pub h_mm: f64,
    /// Disc radius, mm.
    pub r_mm: f64,
    /// Within the first tenth of the container height, where estimates
    /// lean on little history.
    pub early: bool,
}

/// Interval merging and flagging knobs.
#[derive(Debug, Clone)]
pub struct ShapeConfig {
    /// Minimum height gain per emitted interval, mm. Below it the radius
    /// quotient divides by noise.
    pub dh_floor_mm: f64,
    /// How many consecutive decision intervals may merge before the window
    /// is dropped as stagnant.
    pub merge_horizon: usize,
    /// Fraction of the container height flagged as early.
    pub early_frac: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self { dh_floor_mm: 1.0, merge_horizon: 25, early_frac: 0.1 }
    }
}

/// Radius samples plus what had to be thrown away.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub samples: Vec<ShapeSample>,
    /// Merged windows dropped for never clearing the height floor or for a
    /// negative mass step.
    pub dropped: usize,
}

/// Poured mass inferred from the wrist force magnitude: the filtered
/// source-side loss `|F(0)| / g - |F(t)| / g`, kg at 500 Hz. The baseline
/// averages the first tenth of a second, when flow is still near zero.
pub fn poured_from_wrist(ft: &FtSeries) -> Result<Vec<f64>> {
    let filtered = lowpass_ft(ft, FT_CUTOFF_HZ, FT_FILTER_ORDER)?;
    let len = filtered.len()?;
    let mag: Vec<f64> = (0..len)
        .map(|i| {
            let fx = filtered.channels[0][i];
            let fy = filtered.channels[1][i];
            let fz = filtered.channels[2][i];
            (fx * fx + fy * fy + fz * fz).sqrt() / GRAVITY
        })
        .collect();
    let head = mag.len().min(FT_RATE as usize / 10).max(1);
    let m0 = mag[..head].iter().sum::<f64>() / head as f64;
    Ok(mag.iter().map(|m| m0 - m).collect())
}

/// Linear interpolation of a 500 Hz series at time `t`, clamped to the ends.
fn sample_at(series: &[f64], t: f64) -> f64 {
    let x = (t * FT_RATE as f64).clamp(0.0, (series.len() - 1) as f64);
    let i = x.floor() as usize;
    if i + 1 >= series.len() {
        return series[series.len() - 1];
    }
    let frac = x - i as f64;
    series[i] * (1.0 - frac) + series[i + 1] * frac
}

/// Turns a poured-mass series (kg, 500 Hz, increasing) and an estimated
/// air-column trace `(t, ha_hat)` into edge samples. The mass series is
/// resampled at the trace times so numerator and denominator share the
/// decision cadence; intervals merge forward until the height floor is
/// cleared, and windows that never clear it (or lose mass) are dropped.
pub fn radius_samples(
    poured_kg: &[f64],
    trace: &[(f64, f64)],
    rho: f64,
    container_height: f64,
    cfg: &ShapeConfig,
) -> Result<SampleSet> {
    if !(rho > 0.0) {
        return Err(Error::BadScenario(format!("liquid density {rho} must be positive")));
    }
    if !(container_height > 0.0) {
        return Err(Error::BadScenario(format!(
            "container height {container_height} must be positive"
        )));
    }
    if poured_kg.is_empty() || trace.len() < 2 {
        return Ok(SampleSet { samples: Vec::new(), dropped: 0 });
    }
    let h: Vec<f64> = trace.iter().map(|(_, ha)| container_height - ha).collect();
    let m: Vec<f64> = trace.iter().map(|(t, _)| sample_at(poured_kg, *t)).collect();

    let mut samples = Vec::new();
    let mut dropped = 0usize;
    let mut i = 0;
    while i + 1 < h.len() {
        let mut j = i + 1;
        while j < h.len() && h[j] - h[i] < cfg.dh_floor_mm && j - i < cfg.merge_horizon {
            j += 1;
        }
        if j >= h.len() || h[j] - h[i] < cfg.dh_floor_mm {
            // Stagnant window: the level never rose past the floor within
            // the horizon (or the trace ended).
            dropped += 1;
            i = j;
            continue;
        }
        let dm = m[j] - m[i];
        if dm <= 0.0 {
            dropped += 1;
            i = j;
            continue;
        }
        let dh_m = (h[j] - h[i]) / 1000.0;
        let r_mm = (dm / (rho * std::f64::consts::PI * dh_m)).sqrt() * 1000.0;
        let h_mid = 0.5 * (h[i] + h[j]);
        samples.push(ShapeSample {
            h_mm: h_mid,
            r_mm,
            early: h_mid < cfg.early_frac * container_height,
        });
        i = j;
    }
    Ok(SampleSet { samples, dropped })
}

/// Edge profile: scatter plus its quadratic fit `r(h) = a h^2 + b h + c`.
#[derive(Debug, Clone)]
pub struct ShapeProfile {
    pub samples: Vec<ShapeSample>,
    /// Coefficients (a, b, c).
    pub quad: [f64; 3],
    /// Whether the fit stays positive over the sampled height range.
    pub positive_on_range: bool,
}

impl ShapeProfile {
    /// Fitted radius at height `h`, mm.
    pub fn radius_at(&self, h: f64) -> f64 {
        self.quad[0] * h * h + self.quad[1] * h + self.quad[2]
    }

    /// Sampled height range (lo, hi), mm.
    pub fn range(&self) -> (f64, f64) {
        let lo = self.samples.iter().map(|s| s.h_mm).fold(f64::INFINITY, f64::min);
        let hi = self.samples.iter().map(|s| s.h_mm).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Solves a 3x3 system by Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::BadScenario(
                "degenerate normal equations in the quadratic fit".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in row + 1..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Least-squares quadratic through the radius scatter. Needs at least
/// three samples.
pub fn fit_profile(samples: &[ShapeSample]) -> Result<ShapeProfile> {
    if samples.len() < 3 {
        return Err(Error::NoShapeSamples);
    }
    // Normal equations for [a, b, c] on basis (h^2, h, 1).
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for s in samples {
        let basis = [s.h_mm * s.h_mm, s.h_mm, 1.0];
        for r in 0..3 {
            for c in 0..3 {
                ata[r][c] += basis[r] * basis[c];
            }
            atb[r] += basis[r] * s.r_mm;
        }
    }
    let quad = solve3(ata, atb)?;
    let profile = ShapeProfile { samples: samples.to_vec(), quad, positive_on_range: true };
    let (lo, hi) = profile.range();
    let positive = (0..=64).all(|k| {
        let h = lo + (hi - lo) * k as f64 / 64.0;
        profile.radius_at(h) > 0.0
    });
    Ok(ShapeProfile { positive_on_range: positive, ..profile })
}

/// Mean absolute radius error of the fit within one height band.
#[derive(Debug, Clone, Copy)]
pub struct BandError {
    pub h_lo: f64,
    pub h_hi: f64,
    pub mean_abs_mm: f64,
}

/// Scores the fitted curve against a known geometry on `bands` equal
/// height bands over the full container, each sampled densely.
pub fn evaluate_profile(
    profile: &ShapeProfile,
    truth: &ContainerGeometry,
    bands: usize,
) -> Vec<BandError> {
    const GRID: usize = 64;
    let height = truth.height();
    (0..bands)
        .map(|band| {
            let h_lo = height * band as f64 / bands as f64;
            let h_hi = height * (band + 1) as f64 / bands as f64;
            let mean = (0..GRID)
                .map(|k| {
                    let h = h_lo + (h_hi - h_lo) * (k as f64 + 0.5) / GRID as f64;
                    (profile.radius_at(h) - truth.radius_at(h)).abs()
                })
                .sum::<f64>()
                / GRID as f64;
            BandError { h_lo, h_hi, mean_abs_mm: mean }
        })
        .collect()
}

/// Liquid volume under the fitted profile between two heights, ml.
pub fn fit_volume_ml(profile: &ShapeProfile, h_lo: f64, h_hi: f64) -> f64 {
    // Simpson's rule on r(h)^2; the integrand is quartic, so a fine grid
    // is plenty.
    const STEPS: usize = 256;
    let dh = (h_hi - h_lo) / STEPS as f64;
    let mut acc = 0.0;
    for k in 0..STEPS {
        let a = h_lo + k as f64 * dh;
        let mid = a + 0.5 * dh;
        let b = a + dh;
        let f = |h: f64| {
            let r = profile.radius_at(h);
            r * r
        };
        acc += (f(a) + 4.0 * f(mid) + f(b)) * dh / 6.0;
    }
    std::f64::consts::PI * acc / 1000.0
}

/// Writes the profile as `h_mm,r_mm,source` rows: the scatter first, then
/// the fitted curve sampled over the scatter's height range.
pub fn write_profile_csv(path: &Path, profile: &ShapeProfile, fit_points: usize) -> Result<()> {
    let mut out = String::from("h_mm,r_mm,source\n");
    for s in &profile.samples {
        out.push_str(&format!("{:.4},{:.4},sample\n", s.h_mm, s.r_mm));
    }
    let (lo, hi) = profile.range();
    if fit_points > 1 && hi > lo {
        for k in 0..fit_points {
            let h = lo + (hi - lo) * k as f64 / (fit_points - 1) as f64;
            out.push_str(&format!("{:.4},{:.4},fit\n", h, profile.radius_at(h)));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthsim::{
        default_sensor_noise, default_sensor_orientation, simulate_pour, FlowProfile, Material,
        PourScenario, PourSim,
    };

    const RHO: f64 = 997.0;

    /// Piecewise-exact cylinder fill: level rises linearly 0 -> 100 mm over
    /// t in [1, 11], mass follows the cylinder volume.
    fn cylinder_series(r_mm: f64, height: f64) -> (Vec<f64>, Vec<(f64, f64)>) {
        let level = |t: f64| 10.0 * (t - 1.0).clamp(0.0, 10.0);
        let r_m = r_mm / 1000.0;
        let mass: Vec<f64> = (0..12 * 500)
            .map(|i| {
                let t = i as f64 / 500.0;
                RHO * std::f64::consts::PI * r_m * r_m * (level(t) / 1000.0)
            })
            .collect();
        let trace: Vec<(f64, f64)> = (0..=120)
            .map(|k| {
                let t = 1.0 + k as f64 / 12.0;
                (t, height - level(t))
            })
            .collect();
        (mass, trace)
    }

    #[test]
    fn cylinder_samples_recover_the_radius() {
        let (mass, trace) = cylinder_series(30.0, 120.0);
        let set = radius_samples(&mass, &trace, RHO, 120.0, &ShapeConfig::default()).unwrap();
        assert!(set.samples.len() > 50, "got {}", set.samples.len());
        for s in &set.samples {
            assert!((s.r_mm - 30.0).abs() < 1e-6, "r {} at h {}", s.r_mm, s.h_mm);
            assert_eq!(s.early, s.h_mm < 12.0);
        }
        assert!(set.samples.iter().any(|s| s.early));
        assert!(set.samples.iter().any(|s| !s.early));
    }

    #[test]
    fn emitted_heights_increase_strictly_even_when_the_trace_wiggles() {
        let (mass, mut trace) = cylinder_series(30.0, 120.0);
        // Sub-floor wiggle on the estimated heights.
        for (k, (_, ha)) in trace.iter_mut().enumerate() {
            *ha += 0.4 * if k % 2 == 0 { 1.0 } else { -1.0 };
        }
        let set = radius_samples(&mass, &trace, RHO, 120.0, &ShapeConfig::default()).unwrap();
        assert!(set.samples.len() > 30);
        for pair in set.samples.windows(2) {
            assert!(pair[1].h_mm > pair[0].h_mm, "{} !> {}", pair[1].h_mm, pair[0].h_mm);
        }
    }

    #[test]
    fn stagnant_or_shrinking_series_emit_nothing() {
        let flat_trace: Vec<(f64, f64)> = (0..60).map(|k| (k as f64 / 12.0, 80.0)).collect();
        let mass: Vec<f64> = (0..3000).map(|i| i as f64 * 1e-5).collect();
        let set = radius_samples(&mass, &flat_trace, RHO, 120.0, &ShapeConfig::default()).unwrap();
        assert!(set.samples.is_empty());
        assert!(set.dropped > 0);

        // Rising level but constant mass: every interval loses its mass test.
        let (_, trace) = cylinder_series(30.0, 120.0);
        let flat_mass = vec![0.05; 6000];
        let set = radius_samples(&flat_mass, &trace, RHO, 120.0, &ShapeConfig::default()).unwrap();
        assert!(set.samples.is_empty());
        assert!(set.dropped > 0);
    }

    #[test]
    fn negative_mass_steps_are_dropped() {
        let (mut mass, trace) = cylinder_series(30.0, 120.0);
        // Carve a dip around t = 5 s deep enough to survive resampling.
        for (i, m) in mass.iter_mut().enumerate() {
            let t = i as f64 / 500.0;
            if (4.9..5.3).contains(&t) {
                *m -= 0.05 * (1.0 - (t - 5.1).abs() / 0.2);
            }
        }
        let clean = radius_samples(
            &cylinder_series(30.0, 120.0).0,
            &trace,
            RHO,
            120.0,
            &ShapeConfig::default(),
        )
        .unwrap();
        let set = radius_samples(&mass, &trace, RHO, 120.0, &ShapeConfig::default()).unwrap();
        assert!(set.dropped > clean.dropped);
        assert!(set.samples.iter().all(|s| s.r_mm.is_finite()));
    }

    #[test]
    fn radius_is_invariant_to_density_and_mass_scale() {
        let (mass, trace) = cylinder_series(30.0, 120.0);
        let k = 3.7;
        let scaled: Vec<f64> = mass.iter().map(|m| m * k).collect();
        let base = radius_samples(&mass, &trace, RHO, 120.0, &ShapeConfig::default()).unwrap();
        let other = radius_samples(&scaled, &trace, RHO * k, 120.0, &ShapeConfig::default())
            .unwrap();
        assert_eq!(base.samples.len(), other.samples.len());
        for (a, b) in base.samples.iter().zip(&other.samples) {
            assert_eq!(a.h_mm, b.h_mm);
            assert!((a.r_mm - b.r_mm).abs() <= 1e-9 * a.r_mm.abs());
        }
    }

    #[test]
    fn fit_recovers_an_exact_quadratic() {
        let quad = [0.002, -0.1, 35.0];
        let samples: Vec<ShapeSample> = (1..=10)
            .map(|k| {
                let h = 10.0 * k as f64;
                ShapeSample { h_mm: h, r_mm: quad[0] * h * h + quad[1] * h + quad[2], early: false }
            })
            .collect();
        let profile = fit_profile(&samples).unwrap();
        for (got, want) in profile.quad.iter().zip(&quad) {
            assert!((got - want).abs() <= 1e-9 * want.abs(), "{got} vs {want}");
        }
        assert!(profile.positive_on_range);

        let err = fit_profile(&samples[..2]).unwrap_err();
        assert!(matches!(err, Error::NoShapeSamples));
    }

    #[test]
    fn cylinder_fit_is_flat() {
        let (mass, trace) = cylinder_series(30.0, 120.0);
        let set = radius_samples(&mass, &trace, RHO, 120.0, &ShapeConfig::default()).unwrap();
        let profile = fit_profile(&set.samples).unwrap();
        let (lo, hi) = profile.range();
        for k in 0..=20 {
            let h = lo + (hi - lo) * k as f64 / 20.0;
            assert!((profile.radius_at(h) - 30.0).abs() < 1e-4);
        }
    }

    #[test]
    fn evaluate_profile_scores_a_perfect_fit_as_zero() {
        let truth = ContainerGeometry::cylinder("cyl", Material::Glass, 30.0, 120.0);
        let profile = ShapeProfile {
            samples: Vec::new(),
            quad: [0.0, 0.0, 30.0],
            positive_on_range: true,
        };
        let bands = evaluate_profile(&profile, &truth, 5);
        assert_eq!(bands.len(), 5);
        assert_eq!(bands[0].h_lo, 0.0);
        assert_eq!(bands[4].h_hi, 120.0);
        for b in &bands {
            assert!(b.mean_abs_mm < 1e-12);
        }
    }

    fn frustum_scenario() -> PourScenario {
        PourScenario {
            id: "shape_frustum".into(),
            geometry: ContainerGeometry::frustum("frustum", Material::Plastic, 25.0, 40.0, 120.0),
            flow: FlowProfile { ramp_up: 0.5, steady: 10.0, ramp_down: 0.5, peak: 0.02 },
            duration: 13.0,
            initial_fill_height: 0.0,
            liquid_density: RHO,
            pour_height_mm: 100.0,
            sensor_orientation: default_sensor_orientation(),
            sensor_noise_sigma: default_sensor_noise(),
            source_container_mass: 0.35,
            source_fill_kg: 0.3,
            rng_seed: 909,
        }
    }

    /// Oracle heights and landed mass straight from the pour physics.
    fn oracle_series(sc: &PourScenario) -> (Vec<f64>, Vec<(f64, f64)>) {
        let sim = PourSim::new(sc).unwrap();
        let mass: Vec<f64> =
            (0..(sc.duration * 500.0) as usize).map(|i| sim.landed_mass(i as f64 / 500.0)).collect();
        let mut trace = Vec::new();
        let mut k = 12;
        loop {
            let t = k as f64 / 12.0;
            if t > sc.duration {
                break;
            }
            trace.push((t, sim.truth_ha(t)));
            k += 1;
        }
        (mass, trace)
    }

    #[test]
    fn oracle_frustum_samples_match_the_true_wall() {
        let sc = frustum_scenario();
        let (mass, trace) = oracle_series(&sc);
        let sim = PourSim::new(&sc).unwrap();
        let fill = 120.0 - sim.truth_ha(sc.duration);
        assert!(fill > 50.0, "fill only reached {fill} mm");

        let set = radius_samples(&mass, &trace, RHO, 120.0, &ShapeConfig::default()).unwrap();
        assert!(set.samples.len() > 20);
        let mut checked = 0;
        for s in &set.samples {
            if s.h_mm < 0.1 * fill {
                continue;
            }
            let truth = sc.geometry.radius_at(s.h_mm);
            assert!(
                (s.r_mm - truth).abs() <= 0.02 * truth,
                "r {} vs wall {} at h {}",
                s.r_mm,
                truth,
                s.h_mm
            );
            checked += 1;
        }
        assert!(checked > 15);
    }

    #[test]
    fn fitted_volume_matches_the_poured_volume() {
        let sc = frustum_scenario();
        let (mass, trace) = oracle_series(&sc);
        let set = radius_samples(&mass, &trace, RHO, 120.0, &ShapeConfig::default()).unwrap();
        let profile = fit_profile(&set.samples).unwrap();
        let (lo, hi) = profile.range();
        let got = fit_volume_ml(&profile, lo, hi);
        let want = sc.geometry.volume_below(hi) - sc.geometry.volume_below(lo);
        assert!((got - want).abs() <= 0.1 * want, "fit {got} ml vs poured {want} ml");
    }

    #[test]
    fn wrist_mass_tracks_the_simulated_pour() {
        let sc = frustum_scenario();
        let bundle = simulate_pour(&sc).unwrap();
        let sim = PourSim::new(&sc).unwrap();
        let poured = poured_from_wrist(&bundle.ft).unwrap();
        for t in [2.0, 5.0, 8.0, 11.0] {
            let got = sample_at(&poured, t);
            let want = sim.poured_mass(t);
            assert!((got - want).abs() < 3e-3, "{got} kg vs {want} kg at {t} s");
        }
    }

    #[test]
    fn profile_csv_lists_samples_then_fit() {
        let (mass, trace) = cylinder_series(30.0, 120.0);
        let set = radius_samples(&mass, &trace, RHO, 120.0, &ShapeConfig::default()).unwrap();
        let profile = fit_profile(&set.samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profile.csv");
        write_profile_csv(&path, &profile, 40).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("h_mm,r_mm,source"));
        let mut n_sample = 0;
        let mut n_fit = 0;
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 3);
            fields[0].parse::<f64>().unwrap();
            fields[1].parse::<f64>().unwrap();
            match fields[2] {
                "sample" => n_sample += 1,
                "fit" => n_fit += 1,
                other => panic!("unexpected source {other}"),
            }
        }
        assert_eq!(n_sample, profile.samples.len());
        assert_eq!(n_fit, 40);
    }
}
