//! Polyphase windowed-sinc sample rate conversion.
//!
//! A Kaiser-windowed sinc kernel is tabulated at [`PHASES`] fractional
//! offsets with [`TAPS`] taps per phase; output samples interpolate linearly
//! between the two nearest phase rows. Each row is normalized to unit sum so
//! DC passes at exactly unit gain regardless of tap truncation.

use crate::{Error, Result};

use super::Waveform;

/// Taps per polyphase branch.
const TAPS: usize = 64;
const HALF: isize = (TAPS / 2) as isize;

/// Fractional-offset granularity of the kernel table.
const PHASES: usize = 256;

/// Kaiser window shape parameter; ~90 dB stopband at 64 taps.
const KAISER_BETA: f64 = 9.0;

/// Cutoff margin below the narrower Nyquist, keeps the transition band
/// inside the guard region instead of folding onto the passband edge.
const CUTOFF_MARGIN: f64 = 0.97;

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(x: f64) -> f64 {
    // x in [-1, 1], zero outside.
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / bessel_i0(KAISER_BETA)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kernel table: `PHASES + 1` rows of `TAPS` coefficients, row `p` holding
/// the kernel sampled at fractional offset `p / PHASES`, unit-sum normalized.
fn build_table(cutoff: f64) -> Vec<f64> {
    let mut table = vec![0.0; (PHASES + 1) * TAPS];
    for p in 0..=PHASES {
        let frac = p as f64 / PHASES as f64;
        let row = &mut table[p * TAPS..(p + 1) * TAPS];
        let mut sum = 0.0;
        for (j, slot) in row.iter_mut().enumerate() {
            let x = j as f64 - (HALF - 1) as f64 - frac;
            *slot = cutoff * sinc(cutoff * x) * kaiser(x / HALF as f64);
            sum += *slot;
        }
        for slot in row.iter_mut() {
            *slot /= sum;
        }
    }
    table
}

/// Resamples to `target_rate`. Equal rates return the input unchanged;
/// the output duration matches the input within one sample period.
pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if wave.samples.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if target_rate == 0 {
        return Err(Error::ZeroTargetRate);
    }
    if target_rate == wave.sample_rate {
        return Ok(wave.clone());
    }

    let ratio = target_rate as f64 / wave.sample_rate as f64;
    let cutoff = CUTOFF_MARGIN * ratio.min(1.0);
    let table = build_table(cutoff);

    let input = &wave.samples;
    let n_in = input.len() as isize;
    let n_out = (input.len() as f64 * ratio).round() as usize;
    let step = wave.sample_rate as f64 / target_rate as f64;

    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let pos = n as f64 * step;
        let base = pos.floor();
        let frac = pos - base;
        let base = base as isize;

        let scaled = frac * PHASES as f64;
        let row = scaled.floor() as usize;
        let t = scaled - row as f64;
        let lo = &table[row * TAPS..row * TAPS + TAPS];
        let hi = &table[(row + 1) * TAPS..(row + 1) * TAPS + TAPS];

        let first = base - HALF + 1;
        let mut acc = 0.0;
        if first >= 0 && first + TAPS as isize <= n_in {
            // Interior fast path: all taps in range.
            let seg = &input[first as usize..first as usize + TAPS];
            for j in 0..TAPS {
                acc += seg[j] * (lo[j] + (hi[j] - lo[j]) * t);
            }
        } else {
            for j in 0..TAPS {
                let idx = first + j as isize;
                if idx >= 0 && idx < n_in {
                    acc += input[idx as usize] * (lo[j] + (hi[j] - lo[j]) * t);
                }
            }
        }
        out.push(acc);
    }
    Ok(Waveform::new(out, target_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{rms, AUDIO_RATE};
    use proptest::prelude::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    const SOURCE_RATE: u32 = 44_100;

    fn sine(freq: f64, rate: u32, seconds: f64) -> Waveform {
        let n = (seconds * rate as f64).round() as usize;
        let samples =
            (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin());
        Waveform::new(samples.collect(), rate)
    }

    /// Frequency of the strongest full-length DFT bin.
    fn dominant_frequency(wave: &Waveform) -> f64 {
        let mut buf: Vec<Complex<f64>> =
            wave.samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let half = buf.len() / 2;
        let mut best = 0;
        for k in 1..half {
            if buf[k].norm_sqr() > buf[best].norm_sqr() {
                best = k;
            }
        }
        best as f64 * wave.sample_rate as f64 / buf.len() as f64
    }

    #[test]
    fn equal_rates_are_identity() {
        let wave = sine(1000.0, SOURCE_RATE, 0.25);
        let out = resample(&wave, SOURCE_RATE).unwrap();
        assert_eq!(out.samples, wave.samples);
    }

    #[test]
    fn four_seconds_lands_on_64000_samples() {
        let wave = sine(440.0, SOURCE_RATE, 4.0);
        assert_eq!(wave.samples.len(), 176_400);
        let out = resample(&wave, AUDIO_RATE).unwrap();
        let diff = out.samples.len() as i64 - 64_000;
        assert!(diff.abs() <= 1, "got {} samples", out.samples.len());
    }

    #[test]
    fn kilohertz_sine_survives_downsampling() {
        let wave = sine(1000.0, SOURCE_RATE, 4.0);
        let out = resample(&wave, AUDIO_RATE).unwrap();
        let peak = dominant_frequency(&out);
        assert!(
            (peak - 1000.0).abs() < AUDIO_RATE as f64 / out.samples.len() as f64 * 1.5,
            "dominant bin at {peak} Hz"
        );
        let ratio = out.rms() / wave.rms();
        assert!((ratio - 1.0).abs() < 0.01, "RMS ratio {ratio}");
    }

    #[test]
    fn round_trip_preserves_rms_and_shape() {
        // Band-limited mixture, well under both Nyquist limits.
        let rate = AUDIO_RATE;
        let n = rate as usize;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                0.6 * (2.0 * std::f64::consts::PI * 523.0 * t).sin()
                    + 0.3 * (2.0 * std::f64::consts::PI * 1873.0 * t).sin()
                    + 0.1 * (2.0 * std::f64::consts::PI * 4210.0 * t).sin()
            })
            .collect();
        let wave = Waveform::new(samples, rate);
        let up = resample(&wave, SOURCE_RATE).unwrap();
        let back = resample(&up, rate).unwrap();
        let ratio = back.rms() / wave.rms();
        assert!((ratio - 1.0).abs() < 0.01, "round-trip RMS ratio {ratio}");

        // Interior samples line up; kernel half-width edges excluded.
        let skip = TAPS;
        let n_cmp = wave.samples.len().min(back.samples.len()) - skip;
        let err: f64 = (skip..n_cmp)
            .map(|i| (wave.samples[i] - back.samples[i]).powi(2))
            .sum::<f64>()
            .sqrt()
            / ((n_cmp - skip) as f64).sqrt();
        assert!(err < 0.01 * wave.rms(), "interior error {err}");
    }

    #[test]
    fn empty_input_is_an_error() {
        let wave = Waveform::new(vec![], SOURCE_RATE);
        assert!(matches!(resample(&wave, AUDIO_RATE), Err(Error::EmptyWaveform)));
    }

    #[test]
    fn zero_target_rate_is_an_error() {
        let wave = sine(440.0, SOURCE_RATE, 0.05);
        assert!(matches!(resample(&wave, 0), Err(Error::ZeroTargetRate)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Round trips of band-limited content keep their RMS.
        #[test]
        fn round_trip_rms(
            f1 in 60.0..2000.0f64,
            f2 in 60.0..5500.0f64,
            a2 in 0.0..1.0f64,
            seconds in 0.3..0.8f64,
        ) {
            let rate = AUDIO_RATE;
            let n = (seconds * rate as f64) as usize;
            let samples: Vec<f64> = (0..n)
                .map(|i| {
                    let t = i as f64 / rate as f64;
                    (2.0 * std::f64::consts::PI * f1 * t).sin()
                        + a2 * (2.0 * std::f64::consts::PI * f2 * t).sin()
                })
                .collect();
            let wave = Waveform::new(samples, rate);
            let back = resample(&resample(&wave, SOURCE_RATE).unwrap(), rate).unwrap();
            let ratio = rms(&back.samples) / rms(&wave.samples);
            prop_assert!((ratio - 1.0).abs() < 0.01, "ratio {}", ratio);
        }
    }
}
