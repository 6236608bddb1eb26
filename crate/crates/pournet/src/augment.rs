//! SNR-controlled noise augmentation.
//!
//! A clip is corrupted by adding a scaled noise waveform. The scale is the
//! noise factor: for signal RMS `A_s`, noise RMS `A_n` and a requested
//! signal-to-noise ratio in dB,
//!
//! ```text
//! nf = (A_s / A_n) * 10^(snr_db / -20)
//! ```
//!
//! so `mix = signal + nf * noise` lands on the requested ratio exactly (the
//! ratio of *measured* RMS levels round-trips through `10*log10((A_s/(nf*A_n))^2)`).
//! Noise comes from a bank of ambient recordings; when no recordings are on
//! disk a seeded synthetic bank (pink noise, mains-style hum, and a blend)
//! keeps the pipeline self-contained.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, RngExt};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, LabeledClip, LabeledRecording};
use crate::dsp::{read_wav, resample, Waveform, AUDIO_RATE};
use crate::seedmix;
use crate::{Error, Result};

/// The stock evaluation grid: -20 dB to +20 dB in 5 dB steps.
pub const SNR_GRID_DB: [f64; 9] = [-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0];

/// One augmentation level: untouched audio or a target SNR in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrLevel {
    /// No noise added.
    Clean,
    /// Mix noise to this signal-to-noise ratio.
    Db(f64),
}

impl SnrLevel {
    /// The dB value, or `None` for clean.
    pub fn db(self) -> Option<f64> {
        match self {
            SnrLevel::Clean => None,
            SnrLevel::Db(v) => Some(v),
        }
    }
}

impl std::fmt::Display for SnrLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SnrLevel::Clean => write!(f, "clean"),
            SnrLevel::Db(v) => write!(f, "{v}"),
        }
    }
}

impl std::str::FromStr for SnrLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("clean") {
            return Ok(SnrLevel::Clean);
        }
        s.parse::<f64>().map(SnrLevel::Db).map_err(|_| Error::BadConfigValue {
            key: "snr".into(),
            detail: format!("{s:?} is neither \"clean\" nor a dB value"),
        })
    }
}

/// Noise scale for a requested SNR given measured RMS levels.
pub fn noise_factor(a_signal: f64, a_noise: f64, snr_db: f64) -> Result<f64> {
    if !(a_signal > 0.0) {
        return Err(Error::DegenerateAmplitude { context: "signal" });
    }
    if !(a_noise > 0.0) {
        return Err(Error::DegenerateAmplitude { context: "noise" });
    }
    Ok(a_signal / a_noise * 10f64.powf(snr_db / -20.0))
}

/// Adds noise to a signal at the requested SNR. Both waveforms must share a
/// sample rate; the noise must be at least as long as the signal (the bank's
/// [`NoiseBank::segment`] handles cropping and looping).
pub fn mix(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if noise.sample_rate != signal.sample_rate {
        return Err(Error::SampleRate { expected: signal.sample_rate, got: noise.sample_rate });
    }
    if noise.samples.len() < signal.samples.len() {
        return Err(Error::RecordingTooShort {
            need: signal.duration(),
            have: noise.duration(),
        });
    }
    let nf = noise_factor(signal.rms(), crate::dsp::rms(&noise.samples[..signal.samples.len()]), snr_db)?;
    let samples = signal
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(s, n)| s + nf * n)
        .collect();
    Ok(Waveform::new(samples, signal.sample_rate))
}

/// Named bank of 16 kHz noise waveforms.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    entries: BTreeMap<String, Waveform>,
}

impl NoiseBank {
    /// Loads every `.wav` under `dir` (non-recursive), resampling to 16 kHz.
    /// Entry names are the file stems. Errors when nothing usable is found.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut entries = BTreeMap::new();
        if dir.is_dir() {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("wav"))
                .collect();
            paths.sort();
            for path in paths {
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                let wave = resample(&read_wav(&path)?, AUDIO_RATE)?;
                if !wave.samples.is_empty() && wave.rms() > 0.0 {
                    entries.insert(name, wave);
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::EmptyNoiseBank { path: dir.to_path_buf() });
        }
        Ok(Self { entries })
    }

    /// Seeded synthetic bank: pink noise, a mains-style hum with harmonics
    /// and slow level wobble, and a blend of the two. Thirty seconds each.
    pub fn synthetic(seed: u64) -> Self {
        let len = 30 * AUDIO_RATE as usize;
        let mut entries = BTreeMap::new();
        entries.insert("pink".to_string(), pink_noise(len, seedmix::stream(seed, 101, 0)));
        entries.insert("hum".to_string(), hum(len, seedmix::stream(seed, 101, 1)));
        let blend = {
            let p = pink_noise(len, seedmix::stream(seed, 101, 2));
            let h = hum(len, seedmix::stream(seed, 101, 3));
            let samples = p
                .samples
                .iter()
                .zip(&h.samples)
                .map(|(a, b)| 0.7 * a + 0.7 * b)
                .collect();
            normalize_rms(Waveform::new(samples, AUDIO_RATE))
        };
        entries.insert("blend".to_string(), blend);
        Self { entries }
    }

    /// Loads from `dir` when possible, otherwise falls back to the seeded
    /// synthetic bank.
    pub fn load_or_synthetic(dir: impl AsRef<Path>, seed: u64) -> Self {
        Self::load(dir).unwrap_or_else(|_| Self::synthetic(seed))
    }

    /// Entry names in deterministic (sorted) order.
    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    /// Whole waveform of one entry.
    pub fn entry(&self, name: &str) -> Result<&Waveform> {
        self.entries.get(name).ok_or_else(|| Error::UnknownNoise(name.to_string()))
    }

    /// A `len`-sample segment of an entry starting at `offset`, wrapping
    /// around the end as often as needed.
    pub fn segment(&self, name: &str, offset: usize, len: usize) -> Result<Waveform> {
        let src = self.entry(name)?;
        let n = src.samples.len();
        let samples = (0..len).map(|i| src.samples[(offset + i) % n]).collect();
        Ok(Waveform::new(samples, src.sample_rate))
    }

    /// Seeded random entry + offset, for augmentation draws.
    pub fn pick<R: Rng>(&self, rng: &mut R) -> (&str, usize) {
        let idx = rng.random_range(0..self.entries.len());
        let (name, wave) = self.entries.iter().nth(idx).expect("bank never empty");
        let offset = rng.random_range(0..wave.samples.len());
        (name.as_str(), offset)
    }
}

fn normalize_rms(mut wave: Waveform) -> Waveform {
    let level = wave.rms();
    if level > 0.0 {
        for s in &mut wave.samples {
            *s *= 0.1 / level;
        }
    }
    wave
}

/// Streaming pink-ish noise: white noise through the classic three-pole
/// economy approximation of a -3 dB/octave slope.
pub(crate) struct PinkGen {
    rng: ChaCha8Rng,
    b0: f64,
    b1: f64,
    b2: f64,
}

impl PinkGen {
    pub(crate) fn new(rng: ChaCha8Rng) -> Self {
        Self { rng, b0: 0.0, b1: 0.0, b2: 0.0 }
    }

    pub(crate) fn next(&mut self) -> f64 {
        let white: f64 = self.rng.random_range(-1.0..1.0);
        self.b0 = 0.99765 * self.b0 + white * 0.0990460;
        self.b1 = 0.96300 * self.b1 + white * 0.2965164;
        self.b2 = 0.57000 * self.b2 + white * 1.0526913;
        self.b0 + self.b1 + self.b2 + white * 0.1848
    }
}

fn pink_noise(len: usize, rng: ChaCha8Rng) -> Waveform {
    let mut pink = PinkGen::new(rng);
    let samples = (0..len).map(|_| pink.next()).collect();
    normalize_rms(Waveform::new(samples, AUDIO_RATE))
}

/// Narrowband mains-style hum: 50 Hz with two harmonics, slowly wobbling in
/// level, plus a whisper of wideband noise so the RMS never collapses.
fn hum(len: usize, mut rng: ChaCha8Rng) -> Waveform {
    let wobble_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let base_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut samples = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / AUDIO_RATE as f64;
        let wobble = 1.0 + 0.3 * (std::f64::consts::TAU * 0.37 * t + wobble_phase).sin();
        let w = std::f64::consts::TAU * 50.0 * t + base_phase;
        let tone = w.sin() + 0.5 * (2.0 * w).sin() + 0.25 * (3.0 * w).sin();
        let hiss: f64 = rng.random_range(-1.0..1.0);
        samples.push(wobble * tone + 0.02 * hiss);
    }
    normalize_rms(Waveform::new(samples, AUDIO_RATE))
}

/// Controls for [`build_augmented_set`].
#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    /// Clips drawn per second of recording, per grid level.
    pub clips_per_second: f64,
    /// Root seed; start times and noise draws derive from it.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { clips_per_second: 0.25, seed: 0 }
    }
}

/// Expands labeled recordings into a labeled clip set across an SNR grid.
///
/// Each recording contributes `round(duration * clips_per_second)` clips per
/// grid level, at seeded slice-aligned start times. Recordings shorter than
/// one clip are skipped with a warning. Output order is fixed:
/// recording-major, then grid level, then clip index.
pub fn build_augmented_set(
    recordings: &[LabeledRecording],
    bank: &NoiseBank,
    grid: &[SnrLevel],
    cfg: &AugmentConfig,
) -> Result<Vec<LabeledClip>> {
    let mut clips = Vec::new();
    for (ri, rec) in recordings.iter().enumerate() {
        let duration = rec.audio.duration();
        if duration < data::CLIP_SECONDS {
            log::warn!(
                "recording {} is {:.2} s, shorter than one {:.0} s clip; skipped",
                rec.id,
                duration,
                data::CLIP_SECONDS
            );
            continue;
        }
        let per_level = (duration * cfg.clips_per_second).round().max(1.0) as usize;
        for (gi, &level) in grid.iter().enumerate() {
            let mut rng = seedmix::stream(cfg.seed, 211 + ri as u64, gi as u64);
            for _ in 0..per_level {
                let start = data::draw_clip_start(rec, &mut rng)?;
                let window = data::clip_window(rec, start)?;
                let (audio, snr) = match level {
                    SnrLevel::Clean => (window.audio.clone(), SnrLevel::Clean),
                    SnrLevel::Db(db) => {
                        let (name, offset) = bank.pick(&mut rng);
                        let noise = bank.segment(name, offset, window.audio.samples.len())?;
                        (mix(&window.audio, &noise, db)?, SnrLevel::Db(db))
                    }
                };
                clips.push(data::featurize_window(rec, &window, &audio, snr)?);
            }
        }
    }
    if clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::rms;

    fn tone(freq: f64, seconds: f64, amplitude: f64) -> Waveform {
        let n = (seconds * AUDIO_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| {
                amplitude * (std::f64::consts::TAU * freq * i as f64 / AUDIO_RATE as f64).sin()
            })
            .collect();
        Waveform::new(samples, AUDIO_RATE)
    }

    #[test]
    fn zero_db_means_equal_power() {
        let nf = noise_factor(0.3, 0.1, 0.0).unwrap();
        assert!((nf - 3.0).abs() < 1e-12, "nf {nf}");
        // Scaled noise RMS equals signal RMS exactly at 0 dB.
        assert!((nf * 0.1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn degenerate_amplitudes_are_rejected() {
        assert!(matches!(
            noise_factor(0.0, 0.1, 5.0),
            Err(Error::DegenerateAmplitude { context: "signal" })
        ));
        assert!(matches!(
            noise_factor(0.2, 0.0, 5.0),
            Err(Error::DegenerateAmplitude { context: "noise" })
        ));
    }

    #[test]
    fn measured_snr_round_trips_across_the_grid() {
        let signal = tone(800.0, 1.0, 0.4);
        let bank = NoiseBank::synthetic(9);
        let noise = bank.segment("pink", 123, signal.samples.len()).unwrap();
        for &snr in &SNR_GRID_DB {
            let mixed = mix(&signal, &noise, snr).unwrap();
            let residual: Vec<f64> = mixed
                .samples
                .iter()
                .zip(&signal.samples)
                .map(|(m, s)| m - s)
                .collect();
            let measured = 10.0 * (signal.rms() / rms(&residual)).powi(2).log10();
            assert!((measured - snr).abs() < 0.01, "grid {snr}: measured {measured}");
        }
    }

    #[test]
    fn silent_signal_is_an_error() {
        let silent = Waveform::new(vec![0.0; 1600], AUDIO_RATE);
        let bank = NoiseBank::synthetic(9);
        let noise = bank.segment("pink", 0, 1600).unwrap();
        assert!(matches!(
            mix(&silent, &noise, 5.0),
            Err(Error::DegenerateAmplitude { context: "signal" })
        ));
    }

    #[test]
    fn short_noise_loops_through_segment() {
        let bank = NoiseBank::synthetic(9);
        let len = bank.entry("hum").unwrap().samples.len();
        let seg = bank.segment("hum", len - 10, 100).unwrap();
        assert_eq!(seg.samples.len(), 100);
        let direct = bank.entry("hum").unwrap();
        assert_eq!(seg.samples[0], direct.samples[len - 10]);
        assert_eq!(seg.samples[10], direct.samples[0]);
        assert_eq!(seg.samples[99], direct.samples[89]);
    }

    #[test]
    fn empty_bank_reports_the_path() {
        let dir = tempfile::tempdir().unwrap();
        match NoiseBank::load(dir.path()) {
            Err(Error::EmptyNoiseBank { path }) => assert_eq!(path, dir.path()),
            other => panic!("expected empty bank error, got {other:?}"),
        }
    }

    #[test]
    fn bank_loads_wavs_and_resamples() {
        let dir = tempfile::tempdir().unwrap();
        let w = tone(500.0, 0.5, 0.3);
        let hi = crate::dsp::resample(&w, 44_100).unwrap();
        crate::dsp::write_wav(dir.path().join("shop.wav"), &hi).unwrap();
        let bank = NoiseBank::load(dir.path()).unwrap();
        assert_eq!(bank.names(), vec!["shop"]);
        assert_eq!(bank.entry("shop").unwrap().sample_rate, AUDIO_RATE);
    }

    #[test]
    fn synthetic_bank_is_seed_deterministic() {
        let a = NoiseBank::synthetic(77);
        let b = NoiseBank::synthetic(77);
        let c = NoiseBank::synthetic(78);
        assert_eq!(a.entry("pink").unwrap().samples, b.entry("pink").unwrap().samples);
        assert_ne!(a.entry("pink").unwrap().samples, c.entry("pink").unwrap().samples);
        assert_eq!(a.names(), vec!["blend", "hum", "pink"]);
    }

    #[test]
    fn mismatched_rates_are_rejected() {
        let signal = tone(500.0, 0.2, 0.5);
        let noise = Waveform::new(vec![0.1; 20_000], 44_100);
        assert!(matches!(mix(&signal, &noise, 5.0), Err(Error::SampleRate { .. })));
    }
}
