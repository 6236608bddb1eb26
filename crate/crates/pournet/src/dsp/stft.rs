//! Short-time Fourier magnitudes with centered framing.
//!
//! Fixed geometry: 512-sample (32 ms) Hann window, 256-sample (16 ms) hop,
//! FFT size equal to the window (no zero padding), so a 16 kHz stream yields
//! 257 bins spaced 31.25 Hz. Frames are centered on multiples of the hop and
//! the signal is reflect-padded at both ends, which makes the frame count
//! `len / hop + 1`.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::{Error, Result};

use super::{Spectrogram, Waveform, AUDIO_RATE};

/// Analysis window length in samples (32 ms at 16 kHz).
pub const STFT_WINDOW: usize = 512;

/// Hop between frame centers in samples (16 ms at 16 kHz).
pub const STFT_HOP: usize = 256;

/// One-sided bin count, `STFT_WINDOW / 2 + 1`.
pub const SPECTROGRAM_BINS: usize = STFT_WINDOW / 2 + 1;

/// Frame count for a signal of `samples` samples under centered framing.
pub fn stft_frames(samples: usize) -> usize {
    samples / STFT_HOP + 1
}

/// Reflects an out-of-range index back into `[0, len)` without repeating the
/// edge sample, for arbitrarily deep excursions.
fn reflect(idx: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = idx % period;
    if m < 0 {
        m += period;
    }
    if m >= len as isize { (period - m) as usize } else { m as usize }
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Magnitude spectrogram of a 16 kHz waveform.
///
/// Frame `k` is centered on sample `k * STFT_HOP`; the last frame is centered
/// on or just past the final sample. Output is `SPECTROGRAM_BINS` rows by
/// `stft_frames(len)` columns.
pub fn stft(wave: &Waveform) -> Result<Spectrogram> {
    if wave.sample_rate != AUDIO_RATE {
        return Err(Error::SampleRate { expected: AUDIO_RATE, got: wave.sample_rate });
    }
    if wave.samples.is_empty() {
        return Err(Error::EmptyWaveform);
    }

    let x = &wave.samples;
    let len = x.len();
    let frames = stft_frames(len);
    let window = hann_periodic(STFT_WINDOW);
    let fft = FftPlanner::new().plan_fft_forward(STFT_WINDOW);

    let half = (STFT_WINDOW / 2) as isize;
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_WINDOW];
    let mut data = Vec::with_capacity(frames * SPECTROGRAM_BINS);
    for k in 0..frames {
        let center = (k * STFT_HOP) as isize;
        for (j, slot) in buf.iter_mut().enumerate() {
            let idx = center - half + j as isize;
            let sample = if idx >= 0 && (idx as usize) < len {
                x[idx as usize]
            } else {
                x[reflect(idx, len)]
            };
            *slot = Complex::new(sample * window[j], 0.0);
        }
        fft.process(&mut buf);
        data.extend(buf[..SPECTROGRAM_BINS].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram::from_frames(SPECTROGRAM_BINS, data, AUDIO_RATE))
}
