//! Physics-based pouring simulator.
//!
//! A pour is modeled end to end from first principles that matter to the
//! sensors and nothing more: liquid volume accumulates from a trapezoidal
//! flow profile (with the stream's free-fall transport delay), the container
//! geometry turns volume into liquid height, the air column above the liquid
//! rings like a quarter-wave pipe, the wrist sensor feels the source getting
//! lighter, and the scale under the target reads in 2 g steps once a second.
//!
//! Everything is analytic in time, so ground truth is exact at any instant
//! and synthesis can run causally: [`RecordingSynth`] generates streams up
//! to a requested time, which lets a controller cut the flow mid-recording
//! and have only the future change.
//!
//! Units: heights and radii in mm, volumes in ml, masses in kg, flow in
//! kg/s, density in kg/m^3.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::PinkGen;
use crate::data::{RecordingBundle, ScaleTrace, SLICE_SECONDS};
use crate::dsp::{stft_frames, FtSeries, Waveform, AUDIO_RATE, FT_RATE};
use crate::{seedmix, Error, Result};

/// Speed of sound in air, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// End-correction factor on the mouth diameter of an open pipe.
pub const END_CORRECTION: f64 = 0.3;

/// Standard gravity, m/s2.
pub const GRAVITY: f64 = 9.81;

/// Scale resolution, kg (a 2 g kitchen scale).
pub const SCALE_STEP_KG: f64 = 0.002;

/// Empty target container sitting on the scale, kg. Constant, so calibration
/// absorbs it.
const TARGET_TARE_KG: f64 = 0.25;

// Seed stages under a scenario's rng_seed (see seedmix).
const STAGE_SPLASH: u64 = 11;
const STAGE_FLOOR: u64 = 12;
const STAGE_FT_NOISE: u64 = 13;
const STAGE_SUITE: u64 = 31;

/// Acoustic brightness tag; affects harmonic content only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Material {
    Glass,
    Ceramic,
    Plastic,
}

impl Material {
    fn brightness(self) -> f64 {
        match self {
            Material::Glass => 1.0,
            Material::Ceramic => 0.75,
            Material::Plastic => 0.55,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Material::Glass => "glass",
            Material::Ceramic => "ceramic",
            Material::Plastic => "plastic",
        }
    }
}

/// Axisymmetric container: radius as a piecewise-linear function of height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerGeometry {
    pub id: String,
    pub material: Material,
    /// Profile knot heights, mm, strictly increasing from 0.
    heights: Vec<f64>,
    /// Radius at each knot, mm, all positive.
    radii: Vec<f64>,
}

/// Volume of a conic frustum slab, ml. Radius runs linearly r1 -> r2 over dh.
fn frustum_volume(r1: f64, r2: f64, dh: f64) -> f64 {
    std::f64::consts::PI * dh * (r1 * r1 + r1 * r2 + r2 * r2) / 3.0 / 1000.0
}

impl ContainerGeometry {
    /// Builds a container from `(height, radius)` knots.
    pub fn from_profile(
        id: impl Into<String>,
        material: Material,
        profile: &[(f64, f64)],
    ) -> Result<Self> {
        if profile.len() < 2 {
            return Err(Error::ProfileTooShort);
        }
        if profile[0].0 != 0.0 {
            return Err(Error::ProfileNotIncreasing);
        }
        for pair in profile.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::ProfileNotIncreasing);
            }
        }
        let id = id.into();
        if profile.iter().any(|&(_, r)| r <= 0.0) {
            return Err(Error::BadScenario(format!("container {id} has a non-positive radius")));
        }
        Ok(Self {
            id,
            material,
            heights: profile.iter().map(|p| p.0).collect(),
            radii: profile.iter().map(|p| p.1).collect(),
        })
    }

    pub fn cylinder(id: impl Into<String>, material: Material, radius: f64, height: f64) -> Self {
        Self::from_profile(id, material, &[(0.0, radius), (height, radius)])
            .expect("cylinder profile is always valid")
    }

    /// Straight-walled cone section from `r_bottom` at the base to `r_top`
    /// at the rim.
    pub fn frustum(
        id: impl Into<String>,
        material: Material,
        r_bottom: f64,
        r_top: f64,
        height: f64,
    ) -> Self {
        Self::from_profile(id, material, &[(0.0, r_bottom), (height, r_top)])
            .expect("frustum profile is always valid")
    }

    /// Rim height, mm.
    pub fn height(&self) -> f64 {
        *self.heights.last().unwrap()
    }

    /// Inner radius at height `h`, mm, clamped to the profile ends.
    pub fn radius_at(&self, h: f64) -> f64 {
        if h <= self.heights[0] {
            return self.radii[0];
        }
        let last = self.heights.len() - 1;
        if h >= self.heights[last] {
            return self.radii[last];
        }
        let i = self.heights.partition_point(|&k| k <= h) - 1;
        let f = (h - self.heights[i]) / (self.heights[i + 1] - self.heights[i]);
        self.radii[i] + f * (self.radii[i + 1] - self.radii[i])
    }

    /// Liquid volume when filled to height `h`, ml. Exact per-segment conic
    /// integral of the piecewise-linear profile.
    pub fn volume_below(&self, h: f64) -> f64 {
        let h = h.clamp(0.0, self.height());
        let mut v = 0.0;
        for i in 0..self.heights.len() - 1 {
            let (h1, h2) = (self.heights[i], self.heights[i + 1]);
            if h <= h1 {
                break;
            }
            let top = h.min(h2);
            let r1 = self.radii[i];
            let r2 = self.radius_at(top);
            v += frustum_volume(r1, r2, top - h1);
        }
        v
    }

    /// Brim-full volume, ml.
    pub fn capacity(&self) -> f64 {
        self.volume_below(self.height())
    }

    pub fn mouth_diameter(&self) -> f64 {
        2.0 * self.radius_at(self.height())
    }

    /// Profile knots as `(height, radius)` pairs.
    pub fn profile(&self) -> Vec<(f64, f64)> {
        self.heights.iter().copied().zip(self.radii.iter().copied()).collect()
    }

    /// Meta-file encoding of the profile: `h:r;h:r;...`.
    pub fn profile_string(&self) -> String {
        self.profile()
            .iter()
            .map(|(h, r)| format!("{h}:{r}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Parses the [`profile_string`](Self::profile_string) encoding.
    pub fn parse_profile(text: &str) -> Result<Vec<(f64, f64)>> {
        let bad = |detail: String| Error::BadConfigValue { key: "profile_mm".into(), detail };
        text.split(';')
            .map(|knot| {
                let (h, r) = knot
                    .split_once(':')
                    .ok_or_else(|| bad(format!("knot {knot:?} is not h:r")))?;
                Ok((
                    h.trim().parse().map_err(|_| bad(format!("bad height {h:?}")))?,
                    r.trim().parse().map_err(|_| bad(format!("bad radius {r:?}")))?,
                ))
            })
            .collect()
    }
}

/// Height at which the container holds volume `v` (ml), by monotone
/// bisection to 1e-3 mm.
pub fn volume_to_height(geom: &ContainerGeometry, v: f64) -> Result<f64> {
    let cap = geom.capacity();
    if !(0.0..=cap * (1.0 + 1e-9)).contains(&v) {
        return Err(Error::Overfill { volume_ml: v, capacity_ml: cap });
    }
    let v = v.min(cap);
    let (mut lo, mut hi) = (0.0, geom.height());
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if geom.volume_below(mid) < v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Resonance of the air column above the liquid: a quarter-wave pipe with an
/// end correction on the open mouth. Strictly decreasing in `ha_mm`; pass
/// `mouth_diameter_mm = 0` to disable the correction.
pub fn resonance_frequency(ha_mm: f64, mouth_diameter_mm: f64) -> Result<f64> {
    if ha_mm <= 0.0 {
        return Err(Error::BadScenario(format!("air column {ha_mm} mm must be positive")));
    }
    let effective_m = ha_mm / 1000.0 + END_CORRECTION * mouth_diameter_mm / 1000.0;
    Ok(SPEED_OF_SOUND / (4.0 * effective_m))
}

/// Trapezoidal flow profile at the source mouth: linear ramp up, steady
/// plateau, linear ramp down. All segment lengths may be zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowProfile {
    pub ramp_up: f64,
    pub steady: f64,
    pub ramp_down: f64,
    /// Plateau flow, kg/s.
    pub peak: f64,
}

impl FlowProfile {
    pub fn end_time(&self) -> f64 {
        self.ramp_up + self.steady + self.ramp_down
    }

    /// Instantaneous flow, kg/s.
    pub fn rate_at(&self, t: f64) -> f64 {
        if t < 0.0 || t >= self.end_time() {
            return 0.0;
        }
        if t < self.ramp_up {
            return self.peak * t / self.ramp_up;
        }
        if t < self.ramp_up + self.steady {
            return self.peak;
        }
        self.peak * (self.end_time() - t) / self.ramp_down
    }

    /// Mass poured through the mouth up to time `t`, kg. Closed form.
    pub fn mass_until(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let mut m = 0.0;
        // Ramp up: quadratic.
        let tu = t.min(self.ramp_up);
        if self.ramp_up > 0.0 {
            m += 0.5 * self.peak * tu * tu / self.ramp_up;
        }
        // Plateau: linear.
        let ts = (t - self.ramp_up).clamp(0.0, self.steady);
        m += self.peak * ts;
        // Ramp down: quadratic from the other end.
        if self.ramp_down > 0.0 {
            let td = (t - self.ramp_up - self.steady).clamp(0.0, self.ramp_down);
            m += self.peak * (td - 0.5 * td * td / self.ramp_down);
        }
        m
    }

    pub fn total_mass(&self) -> f64 {
        self.peak * (0.5 * self.ramp_up + self.steady + 0.5 * self.ramp_down)
    }

    /// Inverse of [`mass_until`](Self::mass_until): the time by which mass
    /// `m` has left the mouth. None if the profile never delivers it.
    pub fn time_at_mass(&self, m: f64) -> Option<f64> {
        if m <= 0.0 {
            return Some(0.0);
        }
        if m > self.total_mass() || self.peak <= 0.0 {
            return None;
        }
        let m_up = 0.5 * self.peak * self.ramp_up;
        if m <= m_up && self.ramp_up > 0.0 {
            return Some((2.0 * m * self.ramp_up / self.peak).sqrt());
        }
        let m_steady = self.peak * self.steady;
        if m <= m_up + m_steady {
            return Some(self.ramp_up + (m - m_up) / self.peak);
        }
        // Invert the ramp-down quadratic m(td) = peak*(td - td^2/(2 rd)).
        let rest = m - m_up - m_steady;
        let rd = self.ramp_down;
        let disc = (1.0 - 2.0 * rest / (self.peak * rd)).max(0.0);
        Some(self.ramp_up + self.steady + rd * (1.0 - disc.sqrt()))
    }
}

/// One pour, fully specified. Every stochastic element of the synthesis
/// derives from `rng_seed`, so a scenario is a complete recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PourScenario {
    pub id: String,
    pub geometry: ContainerGeometry,
    pub flow: FlowProfile,
    /// Recording length, s.
    pub duration: f64,
    /// Liquid already in the target at t = 0, mm.
    pub initial_fill_height: f64,
    pub liquid_density: f64,
    /// Source mouth above the target rim, mm. Sets splash loudness and the
    /// stream's free-fall transport delay.
    pub pour_height_mm: f64,
    /// Rows are the wrist sensor's axes in world coordinates.
    pub sensor_orientation: [[f64; 3]; 3],
    /// Per-channel Gaussian noise, N for forces, N*m for torques.
    pub sensor_noise_sigma: [f64; 6],
    /// Empty source vessel on the wrist, kg.
    pub source_container_mass: f64,
    /// Liquid in the source at t = 0, kg.
    pub source_fill_kg: f64,
    pub rng_seed: u64,
}

/// Default wrist pose: sensor z nearly horizontal, x and y tilted so each
/// carries an equal large share of gravity. Matches the usual "tool axis
/// forward" mount where the vertical load lands on x/y and z stays almost
/// flat as the source empties.
pub fn default_sensor_orientation() -> [[f64; 3]; 3] {
    let tilt = 85f64.to_radians();
    let (s, c) = (tilt.sin(), tilt.cos());
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let z_s = [s * inv_sqrt2, s * inv_sqrt2, c];
    // w1: unit vector in the sensor x/y plane carrying all of gravity's
    // in-plane component; w2 completes the right-handed triad.
    let dot = z_s[2];
    let mut w1 = [-dot * z_s[0], -dot * z_s[1], 1.0 - dot * z_s[2]];
    let n = (w1[0] * w1[0] + w1[1] * w1[1] + w1[2] * w1[2]).sqrt();
    w1 = [w1[0] / n, w1[1] / n, w1[2] / n];
    let w2 = [
        z_s[1] * w1[2] - z_s[2] * w1[1],
        z_s[2] * w1[0] - z_s[0] * w1[2],
        z_s[0] * w1[1] - z_s[1] * w1[0],
    ];
    let x_s = [
        (w1[0] + w2[0]) * inv_sqrt2,
        (w1[1] + w2[1]) * inv_sqrt2,
        (w1[2] + w2[2]) * inv_sqrt2,
    ];
    let y_s = [
        (w2[0] - w1[0]) * inv_sqrt2,
        (w2[1] - w1[1]) * inv_sqrt2,
        (w2[2] - w1[2]) * inv_sqrt2,
    ];
    [x_s, y_s, z_s]
}

/// Default per-channel sensor noise.
pub fn default_sensor_noise() -> [f64; 6] {
    [0.08, 0.08, 0.08, 0.004, 0.004, 0.004]
}

/// Analytic pour state: volumes, heights, masses, flows at any instant.
///
/// The mouth flow follows the scenario profile until [`cut_flow`] (or the
/// overfill guard) truncates it; liquid already in the air keeps landing for
/// one transport delay after the cut.
///
/// [`cut_flow`]: Self::cut_flow
#[derive(Debug, Clone)]
pub struct PourSim {
    sc: PourScenario,
    t_fall: f64,
    v0_ml: f64,
    /// Mouth-flow cutoff time; infinity until something truncates the pour.
    cut: f64,
}

impl PourSim {
    pub fn new(sc: &PourScenario) -> Result<Self> {
        let bad = |msg: String| Err(Error::BadScenario(msg));
        if sc.duration <= 0.0 {
            return bad(format!("{}: duration {} s", sc.id, sc.duration));
        }
        if sc.liquid_density <= 0.0 {
            return bad(format!("{}: density {}", sc.id, sc.liquid_density));
        }
        if sc.pour_height_mm < 0.0 {
            return bad(format!("{}: pour height {} mm", sc.id, sc.pour_height_mm));
        }
        if sc.flow.peak < 0.0
            || sc.flow.ramp_up < 0.0
            || sc.flow.steady < 0.0
            || sc.flow.ramp_down < 0.0
        {
            return bad(format!("{}: negative flow profile segment", sc.id));
        }
        if !(0.0..sc.geometry.height()).contains(&sc.initial_fill_height) {
            return bad(format!(
                "{}: initial fill {} mm outside container height {} mm",
                sc.id,
                sc.initial_fill_height,
                sc.geometry.height()
            ));
        }
        if sc.source_fill_kg < sc.flow.total_mass() {
            return bad(format!("{}: source holds less than the profile pours", sc.id));
        }
        let t_fall = (2.0 * sc.pour_height_mm / 1000.0 / GRAVITY).sqrt();
        let v0_ml = sc.geometry.volume_below(sc.initial_fill_height);
        let budget_kg = (sc.geometry.capacity() - v0_ml) * 1e-6 * sc.liquid_density;
        let mut cut = f64::INFINITY;
        if sc.flow.total_mass() > budget_kg {
            cut = sc
                .flow
                .time_at_mass(budget_kg)
                .expect("budget below total mass is always reachable");
            log::warn!(
                "{}: profile would overfill {}; flow truncated at {:.2} s",
                sc.id,
                sc.geometry.id,
                cut
            );
        }
        Ok(Self { sc: sc.clone(), t_fall, v0_ml, cut })
    }

    pub fn scenario(&self) -> &PourScenario {
        &self.sc
    }

    /// Free-fall time from source mouth to target rim, s.
    pub fn transport_delay(&self) -> f64 {
        self.t_fall
    }

    /// Stops the mouth flow at time `t` (a controller decision). In-flight
    /// liquid keeps landing until `t + transport_delay`.
    pub fn cut_flow(&mut self, t: f64) {
        self.cut = self.cut.min(t.max(0.0));
    }

    pub fn flow_cut_at(&self) -> Option<f64> {
        self.cut.is_finite().then_some(self.cut)
    }

    /// Flow leaving the source mouth, kg/s.
    pub fn mouth_flow(&self, t: f64) -> f64 {
        if t < self.cut {
            self.sc.flow.rate_at(t)
        } else {
            0.0
        }
    }

    /// Flow landing in the target, kg/s: the mouth flow one fall ago.
    pub fn landing_flow(&self, t: f64) -> f64 {
        self.mouth_flow(t - self.t_fall)
    }

    /// Mass that has left the source by `t`, kg.
    pub fn poured_mass(&self, t: f64) -> f64 {
        self.sc.flow.mass_until(t.min(self.cut))
    }

    /// Mass that has landed in the target by `t`, kg.
    pub fn landed_mass(&self, t: f64) -> f64 {
        self.sc.flow.mass_until((t - self.t_fall).max(0.0).min(self.cut))
    }

    /// Liquid volume in the target, ml.
    pub fn target_volume(&self, t: f64) -> f64 {
        self.v0_ml + self.landed_mass(t) / self.sc.liquid_density * 1e6
    }

    /// Liquid height in the target, mm.
    pub fn liquid_height(&self, t: f64) -> f64 {
        volume_to_height(&self.sc.geometry, self.target_volume(t))
            .expect("overfill guard keeps volume within capacity")
    }

    /// Air column above the liquid, mm. The quantity the estimator predicts.
    pub fn truth_ha(&self, t: f64) -> f64 {
        self.sc.geometry.height() - self.liquid_height(t)
    }

    /// Everything the wrist carries: source vessel plus its remaining
    /// liquid, kg.
    pub fn source_mass(&self, t: f64) -> f64 {
        self.sc.source_container_mass + self.sc.source_fill_kg - self.poured_mass(t)
    }

    /// What the scale under the target reads (before quantization), kg.
    pub fn scale_mass(&self, t: f64) -> f64 {
        TARGET_TARE_KG + self.v0_ml * 1e-6 * self.sc.liquid_density + self.landed_mass(t)
    }
}

/// Newton tracker for liquid height along a pour: volume moves a hair per
/// sample, so one or two Newton steps from the previous height hold 1e-9 ml.
struct HeightTracker {
    h: f64,
}

impl HeightTracker {
    fn new() -> Self {
        Self { h: 0.0 }
    }

    fn height(&mut self, geom: &ContainerGeometry, v: f64) -> f64 {
        let top = geom.height();
        for _ in 0..60 {
            let dv = v - geom.volume_below(self.h);
            if dv.abs() < 1e-9 {
                return self.h;
            }
            let area = std::f64::consts::PI * geom.radius_at(self.h).powi(2) / 1000.0;
            self.h = (self.h + dv / area).clamp(0.0, top);
        }
        // Corner of the profile can stall Newton; fall back to bisection.
        self.h = volume_to_height(geom, v.min(geom.capacity())).unwrap_or(self.h);
        self.h
    }
}

const CHIRP_AMP: f64 = 0.22;
const SPLASH_AMP: f64 = 0.10;
const FLOOR_AMP: f64 = 0.003;
/// Harmonics fade out linearly approaching this frequency, well under
/// Nyquist, so rising overtones never alias or click.
const HARMONIC_CEIL_HZ: f64 = 7600.0;
const FLOW_REF: f64 = 0.02;
const POUR_HEIGHT_REF: f64 = 150.0;

/// Causal multi-stream synthesizer for one scenario.
///
/// [`advance_to`] generates audio, force/torque, and scale samples up to a
/// time; [`finish`] completes the recording and packages a bundle. Between
/// advances the flow may be cut through [`sim_mut`] and only later samples
/// feel it, which is exactly how a stop controller interacts with a pour.
///
/// [`advance_to`]: Self::advance_to
/// [`finish`]: Self::finish
/// [`sim_mut`]: Self::sim_mut
pub struct RecordingSynth {
    sim: PourSim,
    audio: Vec<f64>,
    ft: FtSeries,
    scale_times: Vec<f64>,
    scale_weights: Vec<f64>,
    total_audio: usize,
    total_ft: usize,
    total_scale: usize,
    // Audio voice state.
    phase: f64,
    splash_pink: PinkGen,
    floor_pink: PinkGen,
    hp_x: f64,
    hp_y: f64,
    tracker: HeightTracker,
    ft_noise: rand_chacha::ChaCha8Rng,
}

impl RecordingSynth {
    pub fn new(sc: &PourScenario) -> Result<Self> {
        let sim = PourSim::new(sc)?;
        let duration = sc.duration;
        Ok(Self {
            sim,
            audio: Vec::new(),
            ft: FtSeries {
                channels: Default::default(),
                sample_rate: FT_RATE,
                start_time: 0.0,
            },
            scale_times: Vec::new(),
            scale_weights: Vec::new(),
            total_audio: (duration * AUDIO_RATE as f64).round() as usize,
            total_ft: (duration * FT_RATE as f64).round() as usize,
            total_scale: duration.floor() as usize + 1,
            phase: 0.0,
            splash_pink: PinkGen::new(seedmix::stream(sc.rng_seed, STAGE_SPLASH, 0)),
            floor_pink: PinkGen::new(seedmix::stream(sc.rng_seed, STAGE_FLOOR, 0)),
            hp_x: 0.0,
            hp_y: 0.0,
            tracker: HeightTracker::new(),
            ft_noise: seedmix::stream(sc.rng_seed, STAGE_FT_NOISE, 0),
        })
    }

    pub fn sim(&self) -> &PourSim {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut PourSim {
        &mut self.sim
    }

    /// Audio generated so far, 16 kHz.
    pub fn audio(&self) -> &[f64] {
        &self.audio
    }

    /// Force/torque generated so far, 500 Hz.
    pub fn ft(&self) -> &FtSeries {
        &self.ft
    }

    /// Generates all streams up to time `t` (clamped to the duration).
    pub fn advance_to(&mut self, t: f64) {
        let sc = self.sim.scenario().clone();
        let geom = &sc.geometry;
        let mouth_d = geom.mouth_diameter();
        let brightness = geom.material.brightness();
        let h2_amp = 0.45 * brightness;
        let h3_amp = 0.25 * brightness * brightness;
        // One-pole high-pass at 200 Hz shapes the splash spectrum.
        let hp_alpha = 1.0 / (1.0 + std::f64::consts::TAU * 200.0 / AUDIO_RATE as f64);
        let splash_gain = SPLASH_AMP * sc.pour_height_mm / POUR_HEIGHT_REF;

        let audio_target = (((t * AUDIO_RATE as f64).floor() as usize + 1).min(self.total_audio))
            .max(self.audio.len());
        while self.audio.len() < audio_target {
            let ti = self.audio.len() as f64 / AUDIO_RATE as f64;
            let v = self.sim.target_volume(ti);
            let ha = (geom.height() - self.tracker.height(geom, v)).max(0.2);
            let f = SPEED_OF_SOUND
                / (4.0 * (ha / 1000.0 + END_CORRECTION * mouth_d / 1000.0));
            self.phase += std::f64::consts::TAU * f / AUDIO_RATE as f64;
            let flow = self.sim.landing_flow(ti) / FLOW_REF;
            let mut s = 0.0;
            if flow > 0.0 {
                let fade = |fk: f64| ((HARMONIC_CEIL_HZ - fk) / 400.0).clamp(0.0, 1.0);
                let tone = self.phase.sin()
                    + h2_amp * fade(2.0 * f) * (2.0 * self.phase).sin()
                    + h3_amp * fade(3.0 * f) * (3.0 * self.phase).sin();
                s += CHIRP_AMP * flow.sqrt() * tone;
            }
            let raw = self.splash_pink.next();
            let hp = hp_alpha * (self.hp_y + raw - self.hp_x);
            self.hp_x = raw;
            self.hp_y = hp;
            s += splash_gain * flow * hp;
            s += FLOOR_AMP * self.floor_pink.next();
            self.audio.push(s);
        }

        let ft_target = (((t * FT_RATE as f64).floor() as usize + 1).min(self.total_ft))
            .max(self.ft.channels[0].len());
        while self.ft.channels[0].len() < ft_target {
            let ti = self.ft.channels[0].len() as f64 / FT_RATE as f64;
            let m = self.sim.source_mass(ti);
            let fw = [0.0, 0.0, -m * GRAVITY];
            let r = &sc.sensor_orientation;
            let fs = [
                r[0][0] * fw[0] + r[0][1] * fw[1] + r[0][2] * fw[2],
                r[1][0] * fw[0] + r[1][1] * fw[1] + r[1][2] * fw[2],
                r[2][0] * fw[0] + r[2][1] * fw[1] + r[2][2] * fw[2],
            ];
            // Source vessel rides on a lever arm off the sensor origin.
            let lever = [0.04, 0.03, 0.10];
            let tau = [
                lever[1] * fs[2] - lever[2] * fs[1],
                lever[2] * fs[0] - lever[0] * fs[2],
                lever[0] * fs[1] - lever[1] * fs[0],
            ];
            let clean = [fs[0], fs[1], fs[2], tau[0], tau[1], tau[2]];
            for (c, channel) in self.ft.channels.iter_mut().enumerate() {
                channel
                    .push(clean[c] + sc.sensor_noise_sigma[c] * seedmix::gaussian(&mut self.ft_noise));
            }
        }

        let scale_target = ((t.floor() as usize + 1).min(self.total_scale)).max(self.scale_times.len());
        while self.scale_times.len() < scale_target {
            let ti = self.scale_times.len() as f64;
            let reading = (self.sim.scale_mass(ti) / SCALE_STEP_KG).round() * SCALE_STEP_KG;
            self.scale_times.push(ti);
            self.scale_weights.push(reading);
        }
    }

    /// Completes all streams and packages the recording.
    pub fn finish(mut self) -> RecordingBundle {
        self.advance_to(self.sim.scenario().duration);
        let sc = self.sim.scenario().clone();
        let geom = &sc.geometry;
        let frames = stft_frames(self.audio.len());
        let truth_ha = (0..frames)
            .map(|k| {
                let t = k as f64 * SLICE_SECONDS;
                (t, self.sim.truth_ha(t))
            })
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("material".into(), geom.material.name().into());
        meta.insert("liquid_density_kg_m3".into(), sc.liquid_density.to_string());
        meta.insert("pour_height_mm".into(), sc.pour_height_mm.to_string());
        meta.insert("height_mm".into(), geom.height().to_string());
        meta.insert("capacity_ml".into(), format!("{:.3}", geom.capacity()));
        meta.insert("mouth_diameter_mm".into(), geom.mouth_diameter().to_string());
        meta.insert("profile_mm".into(), geom.profile_string());
        meta.insert("initial_fill_mm".into(), sc.initial_fill_height.to_string());
        meta.insert("flow_peak_kg_s".into(), sc.flow.peak.to_string());
        meta.insert("transport_delay_s".into(), format!("{:.4}", self.sim.transport_delay()));
        meta.insert("scenario_seed".into(), sc.rng_seed.to_string());
        RecordingBundle {
            id: sc.id.clone(),
            container_id: geom.id.clone(),
            audio: Waveform::new(self.audio, AUDIO_RATE),
            ft: self.ft,
            scale: ScaleTrace::new(self.scale_times, self.scale_weights),
            meta,
            truth_ha: Some(truth_ha),
        }
    }
}

/// Simulates a full pour in one shot.
pub fn simulate_pour(sc: &PourScenario) -> Result<RecordingBundle> {
    Ok(RecordingSynth::new(sc)?.finish())
}

/// Which experiment a suite serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SuiteKind {
    /// The three training containers, varied flows and fills.
    Train,
    /// Held-out container shapes, disjoint from training by construction.
    Eval,
    /// Smooth low-curvature profiles for shape reconstruction.
    Shape,
}

impl SuiteKind {
    pub fn name(self) -> &'static str {
        match self {
            SuiteKind::Train => "train",
            SuiteKind::Eval => "eval",
            SuiteKind::Shape => "shape",
        }
    }
}

/// A deterministic batch of scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSuite {
    pub kind: SuiteKind,
    pub seed: u64,
    pub scenarios: Vec<PourScenario>,
}

/// The three training containers.
pub fn train_geometries() -> Vec<ContainerGeometry> {
    vec![
        ContainerGeometry::cylinder("tumbler", Material::Glass, 32.0, 120.0),
        ContainerGeometry::frustum("cone_cup", Material::Plastic, 24.0, 40.0, 130.0),
        ContainerGeometry::from_profile(
            "teacup",
            Material::Ceramic,
            &[(0.0, 26.0), (40.0, 33.0), (80.0, 37.0), (130.0, 39.0)],
        )
        .expect("static profile"),
    ]
}

/// Held-out container shapes; ids and profiles disjoint from training.
pub fn eval_geometries() -> Vec<ContainerGeometry> {
    vec![
        ContainerGeometry::cylinder("highball", Material::Glass, 27.0, 150.0),
        ContainerGeometry::frustum("beaker", Material::Plastic, 35.0, 45.0, 110.0),
        ContainerGeometry::from_profile(
            "goblet",
            Material::Ceramic,
            &[(0.0, 20.0), (30.0, 34.0), (70.0, 41.0), (120.0, 43.0)],
        )
        .expect("static profile"),
    ]
}

/// Low-curvature profiles for reconstruction experiments.
pub fn shape_geometries() -> Vec<ContainerGeometry> {
    let bowl: Vec<(f64, f64)> = (0..=13)
        .map(|i| {
            let h = i as f64 * 10.0;
            (h, 28.0 + 6e-4 * h * h)
        })
        .collect();
    vec![
        ContainerGeometry::cylinder("shape_cyl", Material::Glass, 30.0, 120.0),
        ContainerGeometry::frustum("shape_frustum", Material::Plastic, 25.0, 40.0, 130.0),
        ContainerGeometry::from_profile("shape_bowl", Material::Ceramic, &bowl)
            .expect("static profile"),
    ]
}

fn uniform(rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    use rand::RngExt;
    rng.random_range(lo..hi)
}

/// Deterministic scenario suite: `per_geometry` scenarios for each of the
/// kind's containers, with seeded flow, fill, and pour-height variation.
pub fn scenario_suite(kind: SuiteKind, seed: u64, per_geometry: usize) -> Result<ScenarioSuite> {
    if per_geometry == 0 {
        return Err(Error::BadScenario("suite needs at least one scenario per container".into()));
    }
    let geometries = match kind {
        SuiteKind::Train => train_geometries(),
        SuiteKind::Eval => eval_geometries(),
        SuiteKind::Shape => shape_geometries(),
    };
    let mut scenarios = Vec::with_capacity(geometries.len() * per_geometry);
    for (gi, geom) in geometries.iter().enumerate() {
        for idx in 0..per_geometry {
            let mut rng = seedmix::stream(seed, STAGE_SUITE + gi as u64, idx as u64);
            let (peak, init_frac) = match kind {
                // Shape runs pour slowly from empty so every height band
                // gets scale readings.
                SuiteKind::Shape => (uniform(&mut rng, 0.008, 0.015), 0.0),
                _ => (uniform(&mut rng, 0.012, 0.028), uniform(&mut rng, 0.0, 0.25)),
            };
            let ramp_up = uniform(&mut rng, 0.4, 1.2);
            let ramp_down = uniform(&mut rng, 0.4, 1.2);
            let fill_frac = uniform(&mut rng, 0.75, 0.95);
            let pour_height = uniform(&mut rng, 70.0, 150.0);

            let initial_fill_height = init_frac * geom.height();
            let v0 = geom.volume_below(initial_fill_height);
            let pour_mass =
                ((fill_frac * geom.capacity() - v0).max(10.0)) * 1e-6 * 997.0;
            let steady = (pour_mass / peak - 0.5 * (ramp_up + ramp_down)).max(0.5);
            let flow = FlowProfile { ramp_up, steady, ramp_down, peak };
            let t_fall = (2.0 * pour_height / 1000.0 / GRAVITY).sqrt();
            let duration = (flow.end_time() + t_fall + 1.5).min(30.0);

            scenarios.push(PourScenario {
                id: format!("{}_{}_{idx:02}", kind.name(), geom.id),
                geometry: geom.clone(),
                flow,
                duration,
                initial_fill_height,
                liquid_density: 997.0,
                pour_height_mm: pour_height,
                sensor_orientation: default_sensor_orientation(),
                sensor_noise_sigma: default_sensor_noise(),
                source_container_mass: 0.35,
                source_fill_kg: flow.total_mass() + 0.15,
                rng_seed: seedmix::subseed(seed, STAGE_SUITE + 40 + gi as u64, idx as u64),
            });
        }
    }
    Ok(ScenarioSuite { kind, seed, scenarios })
}
