//! Dataset conditioning: labels, feature fusion, clip extraction.
//!
//! A pouring recording carries audio, a wrist force/torque stream, and a
//! sparse scale trace. Labeling turns the scale trace into a dense air-column
//! truth via a per-container calibration; feature fusion stacks spectrogram
//! frames on top of flattened force/torque slices; clip extraction cuts
//! fixed-length training windows out of the result.
//!
//! Time is gridded in 16 ms slices throughout: one spectrogram hop, eight
//! 500 Hz force/torque samples, one truth value per slice.

mod calibration;
mod clipfile;
mod io;

pub use calibration::{fit_calibration, interpolate_scale, label_recording, Calibration, ScaleTrace};
pub use clipfile::{read_clip_manifest, read_clips, write_clips, ClipSetManifest};
pub use io::{
    read_bundle, read_ft_csv, read_scale_csv, write_bundle, write_ft_csv, write_scale_csv,
    RecordingBundle,
};

use rand::{Rng, RngExt};

use crate::augment::SnrLevel;
use crate::dsp::{
    ft_slices_align, lowpass_ft, stft, FtSeries, Spectrogram, Waveform, AUDIO_RATE,
    FT_CUTOFF_HZ, FT_FILTER_ORDER, FT_RATE, SPECTROGRAM_BINS,
};
use crate::{Error, Result};

/// Training clip length in seconds.
pub const CLIP_SECONDS: f64 = 4.0;

/// One slice of the time grid: a spectrogram hop, 16 ms.
pub const SLICE_SECONDS: f64 = 0.016;

/// Slices per clip under centered framing (4 s at 16 kHz).
pub const CLIP_SLICES: usize = 251;

/// Force/torque samples per slice (500 Hz x 16 ms).
pub const FT_PER_SLICE: usize = 8;

/// Flattened force/torque rows per slice: 6 channels x 8 samples.
pub const FT_ROWS: usize = 6 * FT_PER_SLICE;

/// Fused feature rows: spectrogram bins on top, force/torque rows below.
pub const FEATURE_ROWS: usize = SPECTROGRAM_BINS + FT_ROWS;

/// Dense feature matrix, `rows` x `cols`, stored column-major so one time
/// step is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    /// Zero-filled matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Wraps column-major data; `data.len()` must equal `rows * cols`.
    pub fn from_columns(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// One time step, rows in order.
    pub fn column(&self, col: usize) -> &[f64] {
        &self.data[col * self.rows..(col + 1) * self.rows]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[col * self.rows + row] = value;
    }

    /// Raw column-major storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copies a contiguous row band into a new matrix (variant projection).
    pub fn row_band(&self, start: usize, len: usize) -> FeatureMatrix {
        assert!(start + len <= self.rows);
        let mut data = Vec::with_capacity(len * self.cols);
        for col in 0..self.cols {
            let base = col * self.rows + start;
            data.extend_from_slice(&self.data[base..base + len]);
        }
        FeatureMatrix { rows: len, cols: self.cols, data }
    }

    /// Truncates to the first `cols` time steps.
    pub fn prefix(&self, cols: usize) -> FeatureMatrix {
        assert!(cols <= self.cols);
        FeatureMatrix {
            rows: self.rows,
            cols,
            data: self.data[..cols * self.rows].to_vec(),
        }
    }
}

/// A recording with a dense air-column truth on the slice grid.
#[derive(Debug, Clone)]
pub struct LabeledRecording {
    pub id: String,
    pub container_id: String,
    /// Audio at 16 kHz.
    pub audio: Waveform,
    /// Raw force/torque at 500 Hz; filtering happens at slicing time.
    pub ft: FtSeries,
    /// Air column in mm at t = k * 16 ms.
    pub truth_ha: Vec<f64>,
    /// Slices whose scale weight fell outside the calibrated range.
    pub clamped_slices: usize,
}

/// Everything a clip needs before (possibly noisy) audio is featurized.
#[derive(Debug, Clone)]
pub struct ClipWindow {
    /// Clip start within the recording, seconds, slice-aligned.
    pub start: f64,
    /// Clean audio window, 4 s at 16 kHz.
    pub audio: Waveform,
    /// Filtered, flattened force/torque rows, `FT_ROWS` per slice.
    pub ft_block: Vec<f64>,
    /// Air-column truth per slice, mm.
    pub targets: Vec<f64>,
}

/// Provenance of one labeled clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipMeta {
    /// Recording id the clip was cut from.
    pub source: String,
    /// Container the recording poured into.
    pub container: String,
    /// Clip start within the recording, seconds.
    pub start: f64,
    /// Augmentation level of the audio rows.
    pub snr: SnrLevel,
}

/// A fused feature matrix with per-slice height targets.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    /// `FEATURE_ROWS` x `CLIP_SLICES`.
    pub features: FeatureMatrix,
    /// Air column per slice, mm.
    pub targets: Vec<f64>,
    pub meta: ClipMeta,
}

/// Flattened force/torque rows for `n_slices` slices starting at `t0`.
///
/// The series is low-pass filtered (zero phase, 5 Hz Butterworth order 2),
/// then slice `k` takes the eight consecutive samples covering
/// `[t0 + 16k ms, t0 + 16(k+1) ms)`, per channel, channel-major. The result
/// is column-major: `FT_ROWS` values per slice.
pub fn ft_slices(ft: &FtSeries, n_slices: usize, t0: f64) -> Result<Vec<f64>> {
    let len = ft.len()?;
    if ft.sample_rate != FT_RATE {
        return Err(Error::SampleRate { expected: FT_RATE, got: ft.sample_rate });
    }
    let filtered = lowpass_ft(ft, FT_CUTOFF_HZ, FT_FILTER_ORDER)?;
    let mut block = Vec::with_capacity(n_slices * FT_ROWS);
    for k in 0..n_slices {
        let t = t0 + k as f64 * SLICE_SECONDS;
        let idx = ft_slices_align(t - ft.start_time);
        if idx < 0 || idx as usize + FT_PER_SLICE > len {
            return Err(Error::FtTooShort { slice: k });
        }
        let idx = idx as usize;
        for channel in &filtered.channels {
            block.extend_from_slice(&channel[idx..idx + FT_PER_SLICE]);
        }
    }
    Ok(block)
}

/// Stacks spectrogram frames on top of force/torque rows: `FEATURE_ROWS` x n.
pub fn assemble_features(spec: &Spectrogram, ft_block: &[f64]) -> Result<FeatureMatrix> {
    if spec.bins() != SPECTROGRAM_BINS {
        return Err(Error::FeatureRows { bins: spec.bins(), ft_rows: FT_ROWS });
    }
    let n = spec.frames();
    if ft_block.len() != n * FT_ROWS {
        return Err(Error::FrameCount { spec_frames: n, ft_frames: ft_block.len() / FT_ROWS });
    }
    let mut data = Vec::with_capacity(n * FEATURE_ROWS);
    for k in 0..n {
        data.extend_from_slice(spec.frame(k));
        data.extend_from_slice(&ft_block[k * FT_ROWS..(k + 1) * FT_ROWS]);
    }
    Ok(FeatureMatrix::from_columns(FEATURE_ROWS, n, data))
}

/// Seeded clip start, uniform over the slice lattice `[0, duration - 4 s]`.
pub fn draw_clip_start<R: Rng>(rec: &LabeledRecording, rng: &mut R) -> Result<f64> {
    let samples = rec.audio.samples.len();
    let clip_samples = (CLIP_SECONDS * AUDIO_RATE as f64) as usize;
    if samples < clip_samples {
        return Err(Error::RecordingTooShort {
            need: CLIP_SECONDS,
            have: rec.audio.duration(),
        });
    }
    // Cap the lattice by every fused stream, not just the audio: when the
    // recording length is not slice-aligned, the force/torque series can
    // run out a hop before the audio does.
    let ft_len = rec.ft.len()?;
    let mut max_slice = (samples - clip_samples) / crate::dsp::STFT_HOP;
    max_slice = max_slice.min(rec.truth_ha.len().saturating_sub(CLIP_SLICES));
    loop {
        let t_last = (max_slice + CLIP_SLICES - 1) as f64 * SLICE_SECONDS - rec.ft.start_time;
        let idx = crate::dsp::ft_slices_align(t_last);
        if idx >= 0 && idx as usize + FT_PER_SLICE <= ft_len {
            break;
        }
        max_slice = max_slice.checked_sub(1).ok_or(Error::RecordingTooShort {
            need: CLIP_SECONDS,
            have: rec.audio.duration(),
        })?;
    }
    let k = rng.random_range(0..=max_slice);
    Ok(k as f64 * SLICE_SECONDS)
}

/// Cuts the clean window for a clip starting at `start` (slice-aligned).
pub fn clip_window(rec: &LabeledRecording, start: f64) -> Result<ClipWindow> {
    let s0 = (start * AUDIO_RATE as f64).round() as usize;
    let clip_samples = (CLIP_SECONDS * AUDIO_RATE as f64) as usize;
    if s0 + clip_samples > rec.audio.samples.len() {
        return Err(Error::RecordingTooShort {
            need: start + CLIP_SECONDS,
            have: rec.audio.duration(),
        });
    }
    let audio = Waveform::new(
        rec.audio.samples[s0..s0 + clip_samples].to_vec(),
        AUDIO_RATE,
    );
    let ft_block = ft_slices(&rec.ft, CLIP_SLICES, start)?;
    let k0 = (start / SLICE_SECONDS).round() as usize;
    if k0 + CLIP_SLICES > rec.truth_ha.len() {
        return Err(Error::RecordingTooShort {
            need: start + CLIP_SECONDS,
            have: rec.truth_ha.len() as f64 * SLICE_SECONDS,
        });
    }
    let targets = rec.truth_ha[k0..k0 + CLIP_SLICES].to_vec();
    Ok(ClipWindow { start, audio, ft_block, targets })
}

/// Featurizes a clip window whose audio may have been noise-mixed.
pub fn featurize_window(
    rec: &LabeledRecording,
    window: &ClipWindow,
    audio: &Waveform,
    snr: SnrLevel,
) -> Result<LabeledClip> {
    let spec = stft(audio)?;
    let features = assemble_features(&spec, &window.ft_block)?;
    Ok(LabeledClip {
        features,
        targets: window.targets.clone(),
        meta: ClipMeta {
            source: rec.id.clone(),
            container: rec.container_id.clone(),
            start: window.start,
            snr,
        },
    })
}

/// Extracts `clip_count` clean clips at seeded uniform start times.
pub fn extract_clips(
    rec: &LabeledRecording,
    clip_count: usize,
    seed: u64,
) -> Result<Vec<LabeledClip>> {
    let mut rng = crate::seedmix::stream(seed, 231, 0);
    let mut clips = Vec::with_capacity(clip_count);
    for _ in 0..clip_count {
        let start = draw_clip_start(rec, &mut rng)?;
        let window = clip_window(rec, start)?;
        clips.push(featurize_window(rec, &window, &window.audio, SnrLevel::Clean)?);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp;

    fn flat_recording(seconds: f64) -> LabeledRecording {
        let n = (seconds * AUDIO_RATE as f64) as usize;
        let audio = Waveform::new(
            (0..n)
                .map(|i| 0.3 * (std::f64::consts::TAU * 900.0 * i as f64 / AUDIO_RATE as f64).sin())
                .collect(),
            AUDIO_RATE,
        );
        let ft_len = (seconds * FT_RATE as f64) as usize;
        let mut ft = FtSeries::zeros(ft_len);
        for (c, channel) in ft.channels.iter_mut().enumerate() {
            channel.iter_mut().for_each(|v| *v = c as f64 + 1.0);
        }
        let slices = dsp::stft_frames(n);
        LabeledRecording {
            id: "rec".into(),
            container_id: "cup".into(),
            audio,
            ft,
            truth_ha: (0..slices).map(|k| 120.0 - 0.5 * k as f64 * SLICE_SECONDS).collect(),
            clamped_slices: 0,
        }
    }

    #[test]
    fn constant_ft_gives_identical_slices() {
        let rec = flat_recording(6.0);
        let block = ft_slices(&rec.ft, CLIP_SLICES, 0.0).unwrap();
        assert_eq!(block.len(), CLIP_SLICES * FT_ROWS);
        let first = &block[..FT_ROWS];
        for k in 1..CLIP_SLICES {
            let slice = &block[k * FT_ROWS..(k + 1) * FT_ROWS];
            for (a, b) in first.iter().zip(slice) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        // Channel-major flattening: rows 0..8 are fx (1.0), 8..16 fy (2.0)...
        for ch in 0..6 {
            for j in 0..FT_PER_SLICE {
                assert!((block[ch * FT_PER_SLICE + j] - (ch as f64 + 1.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ramp_ft_slice_means_increase_linearly() {
        let mut rec = flat_recording(6.0);
        let rate = 0.4; // units per second
        for channel in rec.ft.channels.iter_mut() {
            for (i, v) in channel.iter_mut().enumerate() {
                *v = rate * i as f64 / FT_RATE as f64;
            }
        }
        let block = ft_slices(&rec.ft, 100, 0.0).unwrap();
        let mean =
            |k: usize| block[k * FT_ROWS..k * FT_ROWS + FT_PER_SLICE].iter().sum::<f64>() / 8.0;
        let step = mean(1) - mean(0);
        assert!((step - rate * SLICE_SECONDS).abs() < 1e-6, "step {step}");
        for k in 1..99 {
            let d = mean(k + 1) - mean(k);
            assert!((d - step).abs() < 1e-6, "slice {k}: {d} vs {step}");
        }
    }

    #[test]
    fn slice_boundaries_align_with_frame_hops() {
        // Slice k covers [t0 + 16k ms, ...); its first sample must land
        // within one 500 Hz sample of that boundary.
        for k in 0..50usize {
            let t = 0.208 + k as f64 * SLICE_SECONDS;
            let idx = dsp::ft_slices_align(t);
            let dt = idx as f64 / FT_RATE as f64 - t;
            assert!(dt.abs() < 1.0 / FT_RATE as f64, "slice {k}: offset {dt}");
        }
    }

    #[test]
    fn short_ft_series_is_reported_with_slice_index() {
        let rec = flat_recording(6.0);
        let mut short = rec.ft.clone();
        for channel in &mut short.channels {
            channel.truncate(1000);
        }
        match ft_slices(&short, CLIP_SLICES, 0.0) {
            Err(Error::FtTooShort { slice }) => assert_eq!(slice, 125),
            other => panic!("expected FtTooShort, got {other:?}"),
        }
    }

    #[test]
    fn fused_features_have_the_expected_shape() {
        let rec = flat_recording(6.0);
        let window = clip_window(&rec, 0.0).unwrap();
        let clip =
            featurize_window(&rec, &window, &window.audio, SnrLevel::Clean).unwrap();
        assert_eq!(clip.features.rows(), 305);
        assert_eq!(clip.features.cols(), 251);
        assert_eq!(clip.targets.len(), 251);
        // Spectrogram rows on top: row 0..257; ft rows below.
        let spec = stft(&window.audio).unwrap();
        for k in [0usize, 100, 250] {
            for bin in [0usize, 32, 256] {
                assert_eq!(clip.features.at(bin, k), spec.magnitude(bin, k));
            }
            for ch in 0..6 {
                let row = SPECTROGRAM_BINS + ch * FT_PER_SLICE;
                assert!((clip.features.at(row, k) - window.ft_block[k * FT_ROWS + ch * FT_PER_SLICE]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frame_count_mismatch_is_rejected() {
        let rec = flat_recording(6.0);
        let window = clip_window(&rec, 0.0).unwrap();
        let spec = stft(&window.audio).unwrap();
        let short_block = &window.ft_block[..250 * FT_ROWS];
        assert!(matches!(
            assemble_features(&spec, short_block),
            Err(Error::FrameCount { spec_frames: 251, ft_frames: 250 })
        ));
    }

    #[test]
    fn clip_starts_are_slice_aligned_and_in_range() {
        let rec = flat_recording(10.0);
        let mut rng = crate::seedmix::stream(5, 0, 0);
        for _ in 0..200 {
            let start = draw_clip_start(&rec, &mut rng).unwrap();
            let slots = start / SLICE_SECONDS;
            assert!((slots - slots.round()).abs() < 1e-9, "start {start} off-lattice");
            assert!(start >= 0.0 && start + CLIP_SECONDS <= 10.0 + 1e-9);
        }
    }

    #[test]
    fn too_short_recording_is_rejected() {
        let rec = flat_recording(3.0);
        let mut rng = crate::seedmix::stream(5, 0, 0);
        assert!(matches!(
            draw_clip_start(&rec, &mut rng),
            Err(Error::RecordingTooShort { .. })
        ));
    }

    #[test]
    fn clip_targets_read_off_the_truth_grid() {
        let rec = flat_recording(8.0);
        let window = clip_window(&rec, 0.512).unwrap();
        let k0 = (0.512 / SLICE_SECONDS).round() as usize;
        assert_eq!(window.targets[0], rec.truth_ha[k0]);
        assert_eq!(window.targets[250], rec.truth_ha[k0 + 250]);
    }

    #[test]
    fn extract_clips_is_seed_deterministic() {
        let rec = flat_recording(8.0);
        let a = extract_clips(&rec, 3, 11).unwrap();
        let b = extract_clips(&rec, 3, 11).unwrap();
        let c = extract_clips(&rec, 3, 12).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.meta.start, y.meta.start);
            assert_eq!(x.features.data(), y.features.data());
        }
        let same = a.iter().zip(&c).all(|(x, y)| x.meta.start == y.meta.start);
        assert!(!same, "different seeds should draw different starts");
    }

    #[test]
    fn row_band_and_prefix_views() {
        let m = FeatureMatrix::from_columns(4, 3, (0..12).map(|v| v as f64).collect());
        let band = m.row_band(1, 2);
        assert_eq!(band.rows(), 2);
        assert_eq!(band.cols(), 3);
        assert_eq!(band.column(0), &[1.0, 2.0]);
        assert_eq!(band.column(2), &[9.0, 10.0]);
        let p = m.prefix(2);
        assert_eq!(p.cols(), 2);
        assert_eq!(p.column(1), m.column(1));
    }
}
