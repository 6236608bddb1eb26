//! Scale interpolation and the weight-to-air-column calibration.
//!
//! The scale reports sparse (time, liquid weight) samples at about 1 Hz;
//! the air column moves every 16 ms. Labeling linearly interpolates the
//! scale to the slice grid, then maps weight to air column through a
//! per-container polynomial fitted on hand-measured samples. The fit must be
//! strictly decreasing over its sample range: more liquid always means a
//! shorter air column, and a wiggly high-degree fit is a data-entry bug, not
//! a shape.

use crate::dsp::{resample, stft_frames, AUDIO_RATE, FT_RATE};
use crate::poly::{fit_rmse, polyfit, Poly};
use crate::{Error, Result};

use super::io::RecordingBundle;
use super::{LabeledRecording, SLICE_SECONDS};

/// Sparse scale trace: times in seconds, liquid weight in kg.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScaleTrace {
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ScaleTrace {
    pub fn new(times: Vec<f64>, weights: Vec<f64>) -> Self {
        assert_eq!(times.len(), weights.len());
        Self { times, weights }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Linear interpolation of the scale at time `t`.
///
/// Queries outside the recorded span clamp to the nearest endpoint and set
/// the flag. A query exactly on a sample time returns exactly that sample.
pub fn interpolate_scale(trace: &ScaleTrace, t: f64) -> Result<(f64, bool)> {
    if trace.len() < 2 {
        return Err(Error::ScaleTooShort(trace.len()));
    }
    let times = &trace.times;
    let n = times.len();
    if t <= times[0] {
        return Ok((trace.weights[0], t < times[0]));
    }
    if t >= times[n - 1] {
        return Ok((trace.weights[n - 1], t > times[n - 1]));
    }
    // partition_point: first index with times[i] > t; the segment is i-1..i.
    let hi = times.partition_point(|&x| x <= t);
    let lo = hi - 1;
    if times[hi] == times[lo] {
        return Ok((trace.weights[hi], false));
    }
    let f = (t - times[lo]) / (times[hi] - times[lo]);
    Ok((trace.weights[lo] + f * (trace.weights[hi] - trace.weights[lo]), false))
}

/// Weight (kg) to air column (mm) map for one container.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Calibration {
    pub poly: Poly,
    /// Calibrated weight range, kg.
    pub weight_min: f64,
    pub weight_max: f64,
    /// RMS residual over the calibration samples, mm.
    pub fit_rmse: f64,
}

impl Calibration {
    /// Air column for a weight, clamping to the calibrated range.
    /// The flag reports whether clamping occurred.
    pub fn eval_clamped(&self, weight: f64) -> (f64, bool) {
        let clamped = weight.clamp(self.weight_min, self.weight_max);
        (self.poly.eval(clamped), clamped != weight)
    }
}

/// Fits the calibration polynomial on `(weight kg, air column mm)` samples.
///
/// Strict monotonicity (air column decreasing in weight) is validated on a
/// dense grid over the sampled range.
pub fn fit_calibration(samples: &[(f64, f64)], degree: usize) -> Result<Calibration> {
    if degree == 0 || degree > 5 {
        return Err(Error::BadConfigValue {
            key: "calibration_degree".into(),
            detail: format!("{degree} outside 1..=5"),
        });
    }
    if samples.len() <= degree {
        return Err(Error::CalibrationUnderdetermined { degree, samples: samples.len() });
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let weight_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let weight_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(weight_max > weight_min) {
        return Err(Error::CalibrationUnderdetermined { degree, samples: 1 });
    }
    let poly = polyfit(&xs, &ys, degree);

    const GRID: usize = 512;
    for i in 0..=GRID {
        let w = weight_min + (weight_max - weight_min) * i as f64 / GRID as f64;
        if poly.deriv(w) >= 0.0 {
            return Err(Error::CalibrationNotMonotone);
        }
    }
    let fit_rmse = fit_rmse(&poly, &xs, &ys);
    Ok(Calibration { poly, weight_min, weight_max, fit_rmse })
}

/// Labels a recording bundle: resamples audio to 16 kHz, validates the
/// force/torque stream, and evaluates the air-column truth on the slice
/// grid through the scale trace and calibration.
pub fn label_recording(bundle: &RecordingBundle, calib: &Calibration) -> Result<LabeledRecording> {
    let audio = resample(&bundle.audio, AUDIO_RATE)?;
    if bundle.ft.sample_rate != FT_RATE {
        return Err(Error::SampleRate { expected: FT_RATE, got: bundle.ft.sample_rate });
    }
    bundle.ft.len()?;

    let slices = stft_frames(audio.samples.len());
    let mut truth_ha = Vec::with_capacity(slices);
    let mut clamped_slices = 0;
    for k in 0..slices {
        let t = k as f64 * SLICE_SECONDS;
        let (weight, clamped_t) = interpolate_scale(&bundle.scale, t)?;
        let (ha, clamped_w) = calib.eval_clamped(weight);
        if clamped_t || clamped_w {
            clamped_slices += 1;
        }
        truth_ha.push(ha);
    }
    if clamped_slices > 0 {
        log::warn!(
            "recording {}: {clamped_slices}/{slices} slices clamped to the calibrated range",
            bundle.id
        );
    }
    Ok(LabeledRecording {
        id: bundle.id.clone(),
        container_id: bundle.container_id.clone(),
        audio,
        ft: bundle.ft.clone(),
        truth_ha,
        clamped_slices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{FtSeries, Waveform};

    const RHO: f64 = 997.0; // kg/m^3
    const RADIUS_M: f64 = 0.03;
    const HEIGHT_MM: f64 = 120.0;

    /// Air column of an ideal cylinder holding `w` kg.
    fn cylinder_ha(w: f64) -> f64 {
        HEIGHT_MM - w / (RHO * std::f64::consts::PI * RADIUS_M * RADIUS_M) * 1000.0
    }

    fn cylinder_samples(n: usize) -> Vec<(f64, f64)> {
        let full = RHO * std::f64::consts::PI * RADIUS_M * RADIUS_M * (HEIGHT_MM / 1000.0);
        (0..n)
            .map(|i| {
                let w = full * i as f64 / (n - 1) as f64;
                (w, cylinder_ha(w))
            })
            .collect()
    }

    #[test]
    fn interpolation_hits_samples_exactly_and_midpoints_linearly() {
        let trace =
            ScaleTrace::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 0.10, 0.25, 0.30]);
        assert_eq!(interpolate_scale(&trace, 1.0).unwrap(), (0.10, false));
        assert_eq!(interpolate_scale(&trace, 2.0).unwrap(), (0.25, false));
        let (mid, flag) = interpolate_scale(&trace, 1.5).unwrap();
        assert!(!flag);
        assert!((mid - 0.175).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_queries_clamp_with_flag() {
        let trace = ScaleTrace::new(vec![1.0, 2.0], vec![0.1, 0.2]);
        assert_eq!(interpolate_scale(&trace, 0.5).unwrap(), (0.1, true));
        assert_eq!(interpolate_scale(&trace, 2.5).unwrap(), (0.2, true));
        assert_eq!(interpolate_scale(&trace, 1.0).unwrap(), (0.1, false));
    }

    #[test]
    fn single_sample_trace_is_rejected() {
        let trace = ScaleTrace::new(vec![0.0], vec![0.1]);
        assert!(matches!(interpolate_scale(&trace, 0.5), Err(Error::ScaleTooShort(1))));
    }

    #[test]
    fn cylinder_degree_one_fit_is_essentially_exact() {
        let calib = fit_calibration(&cylinder_samples(12), 1).unwrap();
        assert!(calib.fit_rmse < 1e-9, "rmse {}", calib.fit_rmse);
        // Slope in mm/kg: -1000 / (rho * pi * r^2).
        let expected = -1000.0 / (RHO * std::f64::consts::PI * RADIUS_M * RADIUS_M);
        let slope = calib.poly.deriv(0.1);
        assert!(
            ((slope - expected) / expected).abs() < 1e-3,
            "slope {slope} vs {expected}"
        );
    }

    #[test]
    fn frustum_degree_three_fit_is_tight() {
        // Radius grows linearly with height: r(h) = 25 mm + 0.08 h.
        // Volume(h) is cubic in h, so weight->ha is smooth and monotone.
        let height_mm = 110.0;
        let vol_m3 = |h_mm: f64| {
            let h = h_mm / 1000.0;
            let r0 = 0.025;
            let k = 0.08;
            std::f64::consts::PI * (r0 * r0 * h + r0 * k * h * h + k * k * h * h * h / 3.0)
        };
        let samples: Vec<(f64, f64)> = (0..14)
            .map(|i| {
                let h = height_mm * i as f64 / 13.0;
                (RHO * vol_m3(h), height_mm - h)
            })
            .collect();
        let calib = fit_calibration(&samples, 3).unwrap();
        assert!(calib.fit_rmse < 0.5, "rmse {}", calib.fit_rmse);
        for &(w, ha) in &samples {
            let (est, _) = calib.eval_clamped(w);
            assert!((est - ha).abs() < 1.0, "weight {w}: {est} vs {ha}");
        }
    }

    #[test]
    fn non_monotone_samples_are_rejected() {
        let mut samples = cylinder_samples(10);
        // Sabotage: air column bounces back up.
        samples.push((samples[9].0 + 0.05, samples[5].1));
        match fit_calibration(&samples, 4) {
            Err(Error::CalibrationNotMonotone) => {}
            other => panic!("expected monotonicity rejection, got {other:?}"),
        }
    }

    #[test]
    fn underdetermined_fit_is_rejected() {
        let samples = cylinder_samples(3);
        assert!(matches!(
            fit_calibration(&samples, 3),
            Err(Error::CalibrationUnderdetermined { degree: 3, samples: 3 })
        ));
    }

    #[test]
    fn labeling_matches_the_analytic_cylinder() {
        // Constant-rate pour into the cylinder, unquantized scale at 1 Hz.
        let seconds = 8.0;
        let rate_kg_s = 0.03;
        let audio = Waveform::new(vec![0.1; (seconds * AUDIO_RATE as f64) as usize], AUDIO_RATE);
        let ft = FtSeries::zeros((seconds * FT_RATE as f64) as usize);
        let times: Vec<f64> = (0..=8).map(|i| i as f64).collect();
        let weights: Vec<f64> = times.iter().map(|t| rate_kg_s * t).collect();
        let bundle = RecordingBundle {
            id: "cyl".into(),
            container_id: "cylinder".into(),
            audio,
            ft,
            scale: ScaleTrace::new(times, weights),
            meta: Default::default(),
            truth_ha: None,
        };
        let calib = fit_calibration(&cylinder_samples(12), 1).unwrap();
        let rec = label_recording(&bundle, &calib).unwrap();
        assert_eq!(rec.clamped_slices, 0);
        for (k, &ha) in rec.truth_ha.iter().enumerate() {
            let t = k as f64 * SLICE_SECONDS;
            let expected = cylinder_ha(rate_kg_s * t);
            assert!((ha - expected).abs() < 1e-6, "slice {k}: {ha} vs {expected}");
        }
    }

    #[test]
    fn out_of_range_weights_count_clamped_slices() {
        let audio = Waveform::new(vec![0.1; AUDIO_RATE as usize * 2], AUDIO_RATE);
        let ft = FtSeries::zeros(FT_RATE as usize * 2);
        // Scale runs past the calibrated maximum weight.
        let calib = fit_calibration(&cylinder_samples(12), 1).unwrap();
        let bundle = RecordingBundle {
            id: "over".into(),
            container_id: "cylinder".into(),
            audio,
            ft,
            scale: ScaleTrace::new(vec![0.0, 2.0], vec![0.0, 3.0 * calib.weight_max]),
            meta: Default::default(),
            truth_ha: None,
        };
        let rec = label_recording(&bundle, &calib).unwrap();
        assert!(rec.clamped_slices > 0);
    }
}
