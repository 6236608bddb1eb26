//! Signal plumbing: resampling, spectrograms, zero-phase filtering, WAV I/O.
//!
//! Everything downstream assumes audio at [`AUDIO_RATE`] and force/torque at
//! [`FT_RATE`]; the helpers here get arbitrary recordings into that shape.

mod butter;
mod resample;
mod stft;
mod wav;

pub use butter::{butter_lowpass, filtfilt, lowpass_ft, FT_CUTOFF_HZ, FT_FILTER_ORDER};
pub use resample::resample;
pub use stft::{stft, stft_frames, SPECTROGRAM_BINS, STFT_HOP, STFT_WINDOW};
pub use wav::{read_wav, write_wav, write_wav_i16};

use crate::{Error, Result};

/// Working audio sample rate, Hz. All feature extraction runs at this rate.
pub const AUDIO_RATE: u32 = 16_000;

/// Force/torque sample rate, Hz.
pub const FT_RATE: u32 = 500;

/// Mono audio buffer tagged with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// Samples, nominally in [-1, 1] but not clipped.
    pub samples: Vec<f64>,
    /// Sample rate in Hz.
    pub sample_rate: u32,
}

impl Waveform {
    /// Wraps samples at a given rate.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root-mean-square level of the whole buffer.
    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

/// Index of the first force/torque sample at or after time offset `t`
/// seconds, i.e. the first sample inside a slice starting at `t`.
pub fn ft_slices_align(t: f64) -> isize {
    (t * FT_RATE as f64 - 1e-9).ceil() as isize
}

/// Root mean square of a slice; 0.0 for an empty slice.
pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum_sq: f64 = samples.iter().map(|s| s * s).sum();
    (sum_sq / samples.len() as f64).sqrt()
}

/// Magnitude spectrogram, `bins` rows by `frames` columns.
///
/// Stored frame-major so one time step is a contiguous slice, which is the
/// access pattern of both feature fusion and the recurrent model.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    bins: usize,
    frames: usize,
    /// `frames * bins` magnitudes, frame-major.
    data: Vec<f64>,
    /// Hop between frame centers in seconds (0.016 at 16 kHz).
    pub hop_seconds: f64,
    /// Analysis window length in seconds (0.032 at 16 kHz).
    pub window_seconds: f64,
    /// Sample rate of the waveform this was computed from.
    pub origin_rate: u32,
}

impl Spectrogram {
    pub(crate) fn from_frames(bins: usize, data: Vec<f64>, origin_rate: u32) -> Self {
        debug_assert_eq!(data.len() % bins, 0);
        let frames = data.len() / bins;
        Self {
            bins,
            frames,
            data,
            hop_seconds: STFT_HOP as f64 / origin_rate as f64,
            window_seconds: STFT_WINDOW as f64 / origin_rate as f64,
            origin_rate,
        }
    }

    /// Number of frequency bins (window/2 + 1).
    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Number of time frames.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Magnitude at (bin, frame).
    pub fn magnitude(&self, bin: usize, frame: usize) -> f64 {
        self.data[frame * self.bins + bin]
    }

    /// All magnitudes of one frame, lowest bin first.
    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.bins..(frame + 1) * self.bins]
    }

    /// Bin index with the largest magnitude in a frame.
    pub fn argmax_bin(&self, frame: usize) -> usize {
        let col = self.frame(frame);
        let mut best = 0;
        for (i, &v) in col.iter().enumerate() {
            if v > col[best] {
                best = i;
            }
        }
        best
    }

    /// Frequency of a bin center in Hz.
    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.origin_rate as f64 / STFT_WINDOW as f64
    }

    /// Sum of squared magnitudes over the whole spectrogram.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|m| m * m).sum()
    }
}

/// Six-channel force/torque stream: fx, fy, fz in N, tx, ty, tz in N·m.
#[derive(Debug, Clone, PartialEq)]
pub struct FtSeries {
    /// Channel-major samples: `[fx, fy, fz, tx, ty, tz]`.
    pub channels: [Vec<f64>; 6],
    /// Sample rate in Hz; the dataset format fixes this at [`FT_RATE`].
    pub sample_rate: u32,
    /// Time stamp of the first sample, seconds.
    pub start_time: f64,
}

/// Channel names in storage order, matching the CSV header.
pub const FT_CHANNELS: [&str; 6] = ["fx", "fy", "fz", "tx", "ty", "tz"];

impl FtSeries {
    /// An all-zero series of `len` samples at [`FT_RATE`].
    pub fn zeros(len: usize) -> Self {
        Self {
            channels: std::array::from_fn(|_| vec![0.0; len]),
            sample_rate: FT_RATE,
            start_time: 0.0,
        }
    }

    /// Sample count per channel; errors if channels are ragged.
    pub fn len(&self) -> Result<usize> {
        let len = self.channels[0].len();
        if self.channels.iter().any(|c| c.len() != len) {
            return Err(Error::FtRagged);
        }
        Ok(len)
    }

    /// True when the series holds no samples.
    pub fn is_empty(&self) -> bool {
        self.channels[0].is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.channels[0].len() as f64 / self.sample_rate as f64
    }
}
