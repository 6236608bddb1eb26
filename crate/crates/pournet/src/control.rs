//! Closed-loop stop control on simulated pours: stream a pour through an
//! estimator and cut the flow once the predicted air column drops below the
//! target plus an anticipatory correction. In-flight liquid keeps landing
//! for one transport delay after the cut, so the correction matters.
//!
//! The model estimator re-assembles the latest (at most 4 s) feature window
//! at a 12 Hz decision cadence and runs the network over it from a fresh
//! state, exactly the shape it saw in training; the stop comparison itself
//! runs every 16 ms slice against the latest estimate. Within the first
//! 4 s, re-running the window equals carrying LSTM state forward (the
//! streaming-equivalence property of the model), so nothing is lost until
//! the window starts sliding.

use std::path::Path;

use crate::augment::{noise_factor, NoiseBank, SnrLevel};
use crate::data::{assemble_features, ft_slices, CLIP_SLICES, SLICE_SECONDS};
use crate::dsp::{rms, stft, FtSeries, Waveform, AUDIO_RATE, STFT_HOP};
use crate::model::Model;
use crate::synthsim::{simulate_pour, volume_to_height, PourScenario, RecordingSynth};
use crate::{seedmix, Error, Result};

/// Estimate update cadence of the model estimator, Hz.
pub const DECISION_HZ: f64 = 12.0;

// Seed stages under the episode seed (see seedmix).
const STAGE_EPISODE_NOISE: u64 = 51;
const STAGE_MATRIX: u64 = 61;

/// The zero-phase force/torque filter needs roughly a second of history
/// before it is defined, so model estimates cannot start earlier.
pub const MIN_ESTIMATE_SECONDS: f64 = 1.0;

/// When to stop pouring.
#[derive(Debug, Clone, PartialEq)]
pub struct StopPolicy {
    /// Desired final air column, mm.
    pub target_ha: f64,
    /// Anticipatory offset added to the target: the flow is cut while the
    /// estimate is still this far above the target, absorbing in-flight
    /// liquid and decision latency.
    pub correction_mm: f64,
    /// No stop decisions before this much signal exists, s.
    pub min_window: f64,
}

impl StopPolicy {
    pub fn new(target_ha: f64, correction_mm: f64) -> Result<Self> {
        let policy = Self { target_ha, correction_mm, min_window: MIN_ESTIMATE_SECONDS };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ha >= 0.0) {
            return Err(Error::BadScenario(format!(
                "stop target {} mm must be non-negative",
                self.target_ha
            )));
        }
        if !(self.correction_mm >= 0.0) {
            return Err(Error::BadScenario(format!(
                "stop correction {} mm must be non-negative",
                self.correction_mm
            )));
        }
        if !(self.min_window >= 0.0) {
            return Err(Error::BadScenario(format!(
                "minimum window {} s must be non-negative",
                self.min_window
            )));
        }
        Ok(())
    }
}

/// What produces the air-column estimates during an episode.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    /// True air column injected as the prediction, updated every slice.
    /// Isolates the controller from perception.
    Oracle,
    /// A trained network over the latest feature window, updated at
    /// [`DECISION_HZ`].
    Model(&'a Model),
}

/// Outcome of one closed-loop pour.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    /// True air column after everything lands, mm.
    pub final_ha_true: f64,
    /// Last estimate the controller saw, if any.
    pub final_ha_pred: Option<f64>,
    /// Signed height error, mm: target minus final true air column, so
    /// positive means overpoured.
    pub error_mm: f64,
    /// Signed volume error, ml, via the container geometry.
    pub error_ml: f64,
    /// When the flow was cut, or the episode duration if never.
    pub stop_time: f64,
    /// Whether the stop rule ever fired.
    pub triggered: bool,
    /// (t, estimate) pairs in decision order.
    pub trace: Vec<(f64, f64)>,
}

/// Feature frames available in a window ending at time `te`, capped at one
/// clip length.
pub fn window_frames(te: f64) -> usize {
    let frames = (AUDIO_RATE as f64 * te / STFT_HOP as f64).floor() as usize + 1;
    frames.min(CLIP_SLICES)
}

/// Anticipatory stop offset in mm matched to the transport delay plus an
/// extra latency allowance: the mass still in flight at peak flow,
/// converted to height at the target level.
pub fn delay_matched_correction(sc: &PourScenario, target_ha: f64, extra_latency: f64) -> f64 {
    let t_fall = (2.0 * sc.pour_height_mm / 1000.0 / crate::synthsim::GRAVITY).sqrt();
    let mass = sc.flow.peak * (t_fall + extra_latency.max(0.0));
    let level = (sc.geometry.height() - target_ha).clamp(0.0, sc.geometry.height());
    let radius = sc.geometry.radius_at(level);
    let area_mm2 = std::f64::consts::PI * radius * radius;
    mass / sc.liquid_density * 1e9 / area_mm2
}

/// One estimate from the latest feature window ending at the last complete
/// slice before `t`. `audio` and `ft` must hold exactly the samples
/// generated up to `t`; the window re-creates the training clip structure
/// (the newest spectrogram frame sits on the window's right edge).
fn window_estimate(model: &Model, audio: &[f64], ft: &FtSeries, t: f64) -> Result<f64> {
    let complete = (t / SLICE_SECONDS + 1e-9).floor() as usize;
    let n = complete.min(CLIP_SLICES);
    if n < 2 {
        return Err(Error::BadScenario(format!("no complete feature window at {t:.3} s")));
    }
    let s0 = complete - n;
    let a0 = s0 * STFT_HOP;
    let a1 = a0 + (n - 1) * STFT_HOP;
    let window = Waveform::new(audio[a0..a1].to_vec(), AUDIO_RATE);
    let spec = stft(&window)?;
    let block = ft_slices(ft, n, s0 as f64 * SLICE_SECONDS)?;
    let features = assemble_features(&spec, &block)?;
    let trace = model.predict_fused(&features)?;
    Ok(*trace.ha_hat.last().expect("window has at least two frames"))
}

struct NoiseTap {
    samples: Vec<f64>,
    offset: usize,
    factor: f64,
}

/// Runs one closed-loop pour. The simulation advances in 16 ms slices; the
/// estimator sees only samples generated so far, and the stop rule fires
/// the first time the latest estimate drops below target + correction.
/// For noisy episodes the mixing gain is set from the clean uncut
/// recording's level, then held fixed, so mixing stays causal.
pub fn run_episode(
    sc: &PourScenario,
    estimator: Estimator,
    policy: &StopPolicy,
    snr: SnrLevel,
    bank: Option<&NoiseBank>,
    seed: u64,
) -> Result<EpisodeResult> {
    policy.validate()?;
    let tap = match snr {
        SnrLevel::Clean => None,
        SnrLevel::Db(db) => {
            let bank = bank.ok_or_else(|| {
                Error::BadScenario("an SNR episode needs a noise bank".into())
            })?;
            let reference = simulate_pour(sc)?;
            let a_signal = rms(&reference.audio.samples);
            let mut rng = seedmix::stream(seed, STAGE_EPISODE_NOISE, 0);
            let (name, offset) = bank.pick(&mut rng);
            let entry = bank.entry(name)?;
            let factor = noise_factor(a_signal, rms(&entry.samples), db)?;
            Some(NoiseTap { samples: entry.samples.clone(), offset, factor })
        }
    };

    let mut synth = RecordingSynth::new(sc)?;
    let t_fall = synth.sim().transport_delay();
    let threshold = policy.target_ha + policy.correction_mm;
    let steps = (sc.duration / SLICE_SECONDS).floor() as usize;
    let min_decision = policy.min_window.max(MIN_ESTIMATE_SECONDS);

    let mut mixed: Vec<f64> = Vec::new();
    let mut trace: Vec<(f64, f64)> = Vec::new();
    let mut last_pred: Option<f64> = None;
    let mut cut_time: Option<f64> = None;
    let mut next_decision = min_decision;

    for k in 1..=steps {
        let t = k as f64 * SLICE_SECONDS;
        synth.advance_to(t);
        let estimate = match estimator {
            Estimator::Oracle => {
                if t + 1e-9 >= policy.min_window {
                    Some(synth.sim().truth_ha(t))
                } else {
                    None
                }
            }
            Estimator::Model(model) => {
                if t + 1e-9 >= next_decision {
                    while next_decision <= t + 1e-9 {
                        next_decision += 1.0 / DECISION_HZ;
                    }
                    let clean = synth.audio();
                    let audio: &[f64] = match &tap {
                        Some(tap) => {
                            while mixed.len() < clean.len() {
                                let i = mixed.len();
                                let noise = tap.samples[(tap.offset + i) % tap.samples.len()];
                                mixed.push(clean[i] + tap.factor * noise);
                            }
                            &mixed
                        }
                        None => clean,
                    };
                    Some(window_estimate(model, audio, synth.ft(), t)?)
                } else {
                    None
                }
            }
        };
        if let Some(est) = estimate {
            trace.push((t, est));
            last_pred = Some(est);
        }
        if cut_time.is_none() && last_pred.is_some_and(|p| p < threshold) {
            synth.sim_mut().cut_flow(t);
            cut_time = Some(t);
        }
        if let Some(tc) = cut_time {
            if t >= tc + t_fall + SLICE_SECONDS {
                break;
            }
        }
    }

    let final_ha_true = synth.sim().truth_ha(sc.duration);
    let geom = &sc.geometry;
    let level_final = geom.height() - final_ha_true;
    let level_target = (geom.height() - policy.target_ha).clamp(0.0, geom.height());
    let error_ml = geom.volume_below(level_final) - geom.volume_below(level_target);
    Ok(EpisodeResult {
        final_ha_true,
        final_ha_pred: last_pred,
        error_mm: policy.target_ha - final_ha_true,
        error_ml,
        stop_time: cut_time.unwrap_or(sc.duration),
        triggered: cut_time.is_some(),
        trace,
    })
}

/// Target liquid height converted to a stop target: the air column that
/// leaves `fill_mm` of liquid in the container.
pub fn target_from_fill(sc: &PourScenario, fill_ml: f64) -> Result<f64> {
    let level = volume_to_height(&sc.geometry, fill_ml)?;
    Ok(sc.geometry.height() - level)
}

/// Sweep description for a closed-loop experiment table.
#[derive(Debug, Clone)]
pub struct MatrixSpec {
    pub snrs: Vec<SnrLevel>,
    pub targets_mm: Vec<f64>,
    /// Seeded episodes per cell.
    pub episodes: usize,
    /// Latency allowance folded into the per-cell correction, s.
    pub extra_latency: f64,
}

impl Default for MatrixSpec {
    fn default() -> Self {
        Self {
            snrs: vec![SnrLevel::Clean],
            targets_mm: vec![60.0],
            episodes: 5,
            extra_latency: 1.0 / DECISION_HZ,
        }
    }
}

/// One episode of the experiment table.
#[derive(Debug, Clone)]
pub struct EpisodeRow {
    pub cell_id: String,
    pub container: String,
    pub snr: SnrLevel,
    pub target_mm: f64,
    pub pour_height_mm: f64,
    pub initial_fill_mm: f64,
    pub seed: u64,
    /// NaN when the episode errored; failures are recorded, not dropped.
    pub error_mm: f64,
    pub error_ml: f64,
    pub stop_time_s: f64,
    pub triggered: bool,
    /// Decision trace `(t, ha_hat)`; empty when the episode errored. Not
    /// part of the CSV row.
    pub trace: Vec<(f64, f64)>,
}

/// SNR tag used in cell ids and CSV columns: `clean` or a signed dB value.
pub fn snr_label(snr: SnrLevel) -> String {
    match snr {
        SnrLevel::Clean => "clean".into(),
        SnrLevel::Db(db) => format!("{db:+.0}"),
    }
}

/// Runs the full sweep {scenario x SNR x target} with `episodes` seeded
/// repeats per cell. Episode failures are logged and kept as NaN rows.
pub fn experiment_matrix(
    estimator: Estimator,
    scenarios: &[PourScenario],
    spec: &MatrixSpec,
    bank: Option<&NoiseBank>,
    seed: u64,
) -> Result<Vec<EpisodeRow>> {
    let mut rows = Vec::new();
    let mut counter = 0u64;
    for sc in scenarios {
        for &snr in &spec.snrs {
            for &target in &spec.targets_mm {
                let cell_id = format!("{}_{}_t{:.0}", sc.id, snr_label(snr), target);
                for _ in 0..spec.episodes {
                    let ep_seed = seedmix::subseed(seed, STAGE_MATRIX, counter);
                    counter += 1;
                    let mut sc_rep = sc.clone();
                    sc_rep.rng_seed = ep_seed;
                    let correction = delay_matched_correction(&sc_rep, target, spec.extra_latency);
                    let policy = StopPolicy {
                        target_ha: target,
                        correction_mm: correction,
                        min_window: MIN_ESTIMATE_SECONDS,
                    };
                    let mut row = EpisodeRow {
                        cell_id: cell_id.clone(),
                        container: sc.geometry.id.clone(),
                        snr,
                        target_mm: target,
                        pour_height_mm: sc.pour_height_mm,
                        initial_fill_mm: sc.initial_fill_height,
                        seed: ep_seed,
                        error_mm: f64::NAN,
                        error_ml: f64::NAN,
                        stop_time_s: f64::NAN,
                        triggered: false,
                        trace: Vec::new(),
                    };
                    match run_episode(&sc_rep, estimator, &policy, snr, bank, ep_seed) {
                        Ok(res) => {
                            row.error_mm = res.error_mm;
                            row.error_ml = res.error_ml;
                            row.stop_time_s = res.stop_time;
                            row.triggered = res.triggered;
                            row.trace = res.trace;
                        }
                        Err(e) => {
                            log::warn!("episode {cell_id} seed {ep_seed} failed: {e}");
                        }
                    }
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

/// Per-cell mean and spread of the signed height error.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub cell_id: String,
    pub container: String,
    pub snr: SnrLevel,
    pub target_mm: f64,
    pub episodes: usize,
    pub failures: usize,
    pub mean_error_mm: f64,
    pub std_error_mm: f64,
}

/// Collapses episode rows into per-cell mean and standard deviation,
/// keeping cell order of first appearance. Failed episodes count toward
/// `failures` and are excluded from the moments.
pub fn summarize_cells(rows: &[EpisodeRow]) -> Vec<CellSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<&EpisodeRow>> =
        std::collections::HashMap::new();
    for row in rows {
        if !groups.contains_key(&row.cell_id) {
            order.push(row.cell_id.clone());
        }
        groups.entry(row.cell_id.clone()).or_default().push(row);
    }
    order
        .into_iter()
        .map(|cell_id| {
            let members = &groups[&cell_id];
            let ok: Vec<f64> = members
                .iter()
                .map(|r| r.error_mm)
                .filter(|e| e.is_finite())
                .collect();
            let mean = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            };
            let std = if ok.len() < 2 {
                0.0
            } else {
                (ok.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / ok.len() as f64).sqrt()
            };
            let first = members[0];
            CellSummary {
                cell_id,
                container: first.container.clone(),
                snr: first.snr,
                target_mm: first.target_mm,
                episodes: members.len(),
                failures: members.len() - ok.len(),
                mean_error_mm: mean,
                std_error_mm: std,
            }
        })
        .collect()
}

fn csv_float(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        "nan".into()
    }
}

/// Writes the episode table with the stable header
/// `cell_id,container,snr_db,target_mm,pour_height_mm,initial_fill_mm,seed,error_mm,error_ml,stop_time_s`.
pub fn write_episode_csv(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    let mut out = String::from(
        "cell_id,container,snr_db,target_mm,pour_height_mm,initial_fill_mm,seed,error_mm,error_ml,stop_time_s\n",
    );
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.cell_id,
            row.container,
            snr_label(row.snr),
            csv_float(row.target_mm, 1),
            csv_float(row.pour_height_mm, 1),
            csv_float(row.initial_fill_mm, 2),
            row.seed,
            csv_float(row.error_mm, 4),
            csv_float(row.error_ml, 4),
            csv_float(row.stop_time_s, 3),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
