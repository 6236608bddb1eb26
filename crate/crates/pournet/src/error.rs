//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Everything that can go wrong across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty waveform")]
    EmptyWaveform,

    #[error("expected {expected} Hz input, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },

    #[error("target sample rate must be positive")]
    ZeroTargetRate,

    #[error("{path}: expected mono audio, file has {channels} channels")]
    MultichannelWav { path: PathBuf, channels: u16 },

    #[error("{path}: unsupported WAV encoding ({detail}); expected 16-bit int or 32-bit float PCM")]
    UnsupportedWav { path: PathBuf, detail: String },

    #[error("cutoff {cutoff} Hz at or above Nyquist ({nyquist} Hz)")]
    CutoffAboveNyquist { cutoff: f64, nyquist: f64 },

    #[error("cutoff must be positive, got {0} Hz")]
    NonPositiveCutoff(f64),

    #[error("filter order {0} outside supported range 1..=8")]
    FilterOrder(usize),

    #[error("series of {len} samples too short for filter edge padding ({need} needed)")]
    FilterTooShort { len: usize, need: usize },

    #[error("degenerate amplitude: {context} has zero RMS")]
    DegenerateAmplitude { context: &'static str },

    #[error("noise bank at {path} holds no usable entries")]
    EmptyNoiseBank { path: PathBuf },

    #[error("noise bank has no entry named {0:?}")]
    UnknownNoise(String),

    #[error("scale trace needs at least two samples to interpolate, got {0}")]
    ScaleTooShort(usize),

    #[error("scale trace time stamps must be monotone non-decreasing (sample {index})")]
    ScaleNotMonotone { index: usize },

    #[error("calibration needs more samples than the polynomial degree ({degree}) allows, got {samples}")]
    CalibrationUnderdetermined { degree: usize, samples: usize },

    #[error("calibration not monotone; lower degree or add samples")]
    CalibrationNotMonotone,

    #[error("container {container} has no calibration samples")]
    MissingCalibration { container: String },

    #[error("force/torque series too short: slice {slice} needs samples past the end")]
    FtTooShort { slice: usize },

    #[error("force/torque channels differ in length")]
    FtRagged,

    #[error("feature row count mismatch: spectrogram {bins} + force/torque {ft_rows} rows")]
    FeatureRows { bins: usize, ft_rows: usize },

    #[error("frame count mismatch: spectrogram {spec_frames} vs force/torque {ft_frames}")]
    FrameCount { spec_frames: usize, ft_frames: usize },

    #[error("recording too short for a {need:.1} s clip ({have:.2} s)")]
    RecordingTooShort { need: f64, have: f64 },

    #[error("model expects {expected} input rows, feature matrix has {got}")]
    InputWidth { expected: usize, got: usize },

    #[error("prediction length {pred} does not match truth length {truth}")]
    PredictionLength { pred: usize, truth: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("training set is empty")]
    EmptyDataset,

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic { path: PathBuf, found: [u8; 4], expected: [u8; 4] },

    #[error("{path}: unsupported container version {found}, this build reads {supported}")]
    BadVersion { path: PathBuf, found: u32, supported: u32 },

    #[error("{path}: file truncated or corrupt ({detail})")]
    Corrupt { path: PathBuf, detail: String },

    #[error("{path} line {line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },

    #[error("config key {key:?} is not recognized")]
    UnknownConfigKey { key: String },

    #[error("config value for {key:?} is invalid: {detail}")]
    BadConfigValue { key: String, detail: String },

    #[error("container profile needs at least two height samples")]
    ProfileTooShort,

    #[error("container profile heights must strictly increase")]
    ProfileNotIncreasing,

    #[error("requested volume {volume_ml:.1} ml exceeds container capacity {capacity_ml:.1} ml")]
    Overfill { volume_ml: f64, capacity_ml: f64 },

    #[error("scenario invalid: {0}")]
    BadScenario(String),

    #[error("shape reconstruction kept no usable height intervals")]
    NoShapeSamples,

    #[error("episode trace and force/torque series do not overlap in time")]
    TraceMismatch,

    #[error("unknown variant {0:?}, expected one of mp, ap, ft")]
    UnknownVariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
