//! Batch command surface: `synth`, `build-dataset`, `train`, `eval`,
//! `pour`, `shape`, and `noise-bank`, wiring the library into reproducible
//! on-disk experiments.
//!
//! Configuration is a flat key-value map per command with precedence
//! defaults < config file < flags, and every run writes its fully resolved
//! config next to its outputs. Nothing reads a clock: outputs are a pure
//! function of config and seed, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::{build_augmented_set, mix, AugmentConfig, NoiseBank, SnrLevel};
use crate::control::{
    experiment_matrix, run_episode, snr_label, summarize_cells, write_episode_csv, Estimator,
    MatrixSpec, StopPolicy, MIN_ESTIMATE_SECONDS,
};
use crate::data::{
    draw_clip_start, featurize_window, fit_calibration, interpolate_scale, label_recording,
    read_bundle, read_clips, write_bundle, write_clips, Calibration, ClipSetManifest,
    LabeledRecording, RecordingBundle, SLICE_SECONDS,
};
use crate::dsp::{write_wav, FT_RATE};
use crate::model::{
    frac_within, load_model, model_manifest_path, save_model, train, write_model_manifest,
    write_train_log, CheckpointManifest, Model, TrainConfig, Variant,
};
use crate::seedmix;
use crate::shape::{
    evaluate_profile, fit_profile, fit_volume_ml, poured_from_wrist, radius_samples,
    write_profile_csv, ShapeConfig,
};
use crate::synthsim::{
    eval_geometries, scenario_suite, shape_geometries, simulate_pour, train_geometries,
    ContainerGeometry, PourScenario, PourSim, SuiteKind,
};
use crate::{Error, Result};

/// Env var naming the default output root; `pournet-out` otherwise.
pub const OUT_ROOT_ENV: &str = "POURNET_OUT";

/// Seed stages for the paired evaluation draws (windows must not move when
/// the SNR grid changes, so noise picks get their own stage).
const STAGE_EVAL_WINDOW: u64 = 121;
const STAGE_EVAL_NOISE: u64 = 122;

/// Slices scored by `eval`: at least this much context inside the window.
/// Matches the controller, which never acts on younger estimates.
const SCORE_MIN_SECONDS: f64 = MIN_ESTIMATE_SECONDS;

// --------------------------------------------------------------------
// run configuration

const COMMANDS: &[&str] =
    &["synth", "build-dataset", "train", "eval", "pour", "shape", "noise-bank"];

/// Keys every command understands (the shared flag set).
const GLOBAL_KEYS: &[&str] = &["seed", "out", "threads", "variant", "snr_grid"];

fn command_keys(command: &str) -> &'static [&'static str] {
    match command {
        "synth" => &["suite", "per_geometry"],
        "build-dataset" => &["bundles", "clips_per_second", "noise_dir", "calibration_degree"],
        "train" => &["dataset", "epochs", "batch_size", "learning_rate", "alpha", "clip_norm",
            "val_fraction"],
        "eval" => &["model", "bundles", "windows_per_recording", "calibration_degree",
            "noise_dir"],
        "pour" => &["model", "estimator", "suite", "per_geometry", "targets_mm", "episodes",
            "extra_latency", "noise_dir"],
        "shape" => &["model", "estimator", "geometry", "trace", "ft", "density",
            "container_height", "dh_floor_mm", "merge_horizon"],
        "noise-bank" => &[],
        _ => unreachable!("unknown command"),
    }
}

fn command_defaults(command: &str) -> Vec<(&'static str, &'static str)> {
    let mut defaults = vec![
        ("seed", "7"),
        ("out", ""),
        ("threads", "1"),
        ("variant", "mp"),
        ("snr_grid", "clean"),
    ];
    let specific: &[(&str, &str)] = match command {
        "synth" => &[("suite", "train"), ("per_geometry", "auto")],
        "build-dataset" => &[
            ("bundles", ""),
            ("clips_per_second", "0.25"),
            ("noise_dir", ""),
            ("calibration_degree", "3"),
            ("snr_grid", "clean,0:20:5"),
        ],
        "train" => &[
            ("dataset", ""),
            ("epochs", "15"),
            ("batch_size", "16"),
            ("learning_rate", "0.001"),
            ("alpha", "0.01"),
            ("clip_norm", "5.0"),
            ("val_fraction", "0.1"),
        ],
        "eval" => &[
            ("model", ""),
            ("bundles", ""),
            ("windows_per_recording", "2"),
            ("calibration_degree", "3"),
            ("noise_dir", ""),
            ("snr_grid", "clean,-20:20:5"),
        ],
        "pour" => &[
            ("model", ""),
            ("estimator", "model"),
            ("suite", "eval"),
            ("per_geometry", "1"),
            ("targets_mm", "60"),
            ("episodes", "5"),
            ("extra_latency", "0.0833333333333333"),
            ("noise_dir", ""),
        ],
        "shape" => &[
            ("model", ""),
            ("estimator", "oracle"),
            ("geometry", "cylinder"),
            ("trace", ""),
            ("ft", ""),
            ("density", "997"),
            ("container_height", ""),
            ("dh_floor_mm", "1.0"),
            ("merge_horizon", "25"),
        ],
        _ => &[],
    };
    for &(k, v) in specific {
        if let Some(slot) = defaults.iter_mut().find(|(key, _)| *key == k) {
            slot.1 = v;
        } else {
            defaults.push((k, v));
        }
    }
    defaults
}

/// Resolved key-value configuration for one command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    command: &'static str,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Built-in defaults for `command`.
    pub fn new(command: &str) -> Result<Self> {
        let command = COMMANDS
            .iter()
            .find(|c| **c == command)
            .ok_or_else(|| Error::BadConfigValue {
                key: "command".into(),
                detail: format!("unknown command {command:?}"),
            })?;
        let values = command_defaults(command)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Ok(Self { command, values })
    }

    pub fn command(&self) -> &str {
        self.command
    }

    fn key_known(command: &str, key: &str) -> bool {
        GLOBAL_KEYS.contains(&key) || command_keys(command).contains(&key)
    }

    /// Sets one key, rejecting names this command does not understand.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !Self::key_known(self.command, key) {
            return Err(Error::UnknownConfigKey { key: key.to_string() });
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Applies a config file: global `key = value` lines first, then
    /// `[command]` sections. Sections for other commands are validated but
    /// only this command's section is applied.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |detail: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail,
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| parse_err("unterminated section header".into()))?
                    .trim();
                if !COMMANDS.contains(&name) {
                    return Err(Error::UnknownConfigKey { key: format!("[{name}]") });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected key = value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            match section.as_deref() {
                None => {
                    if !GLOBAL_KEYS.contains(&key) {
                        return Err(Error::UnknownConfigKey { key: key.to_string() });
                    }
                    self.values.insert(key.to_string(), value.to_string());
                }
                Some(name) => {
                    if !Self::key_known(name, key) {
                        return Err(Error::UnknownConfigKey {
                            key: format!("{name}.{key}"),
                        });
                    }
                    if name == self.command {
                        self.values.insert(key.to_string(), value.to_string());
                    }
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key {key} missing from {} config", self.command))
    }

    fn bad(&self, key: &str, detail: impl Into<String>) -> Error {
        Error::BadConfigValue { key: key.to_string(), detail: detail.into() }
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key).parse().map_err(|_| self.bad(key, format!("{:?} is not an integer", self.get(key))))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key).parse().map_err(|_| self.bad(key, format!("{:?} is not an integer", self.get(key))))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key).parse().map_err(|_| self.bad(key, format!("{:?} is not a number", self.get(key))))
    }

    /// Output directory: the `out` key, or `<root>/<command>` where the
    /// root comes from [`OUT_ROOT_ENV`] or `pournet-out`.
    pub fn out_dir(&self) -> PathBuf {
        let out = self.get("out");
        if !out.is_empty() {
            return PathBuf::from(out);
        }
        let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "pournet-out".into());
        Path::new(&root).join(self.command)
    }

    /// Default location another command's output lands in, for chaining.
    fn sibling(&self, command: &str) -> PathBuf {
        let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "pournet-out".into());
        Path::new(&root).join(command)
    }

    /// The fully resolved config as stable text.
    pub fn resolved_text(&self) -> String {
        let mut out = format!("command = {}\n", self.command);
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("resolved.cfg");
        std::fs::write(&path, self.resolved_text())?;
        Ok(path)
    }
}

/// Parses an SNR grid: comma-separated terms, each `clean`, a dB value, or
/// an inclusive `start:stop:step` range like `0:20:5`.
pub fn parse_snr_grid(text: &str) -> Result<Vec<SnrLevel>> {
    let bad = |detail: String| Error::BadConfigValue { key: "snr_grid".into(), detail };
    let mut grid = Vec::new();
    for term in text.split(',') {
        let term = term.trim();
        if term.is_empty() {
            return Err(bad("empty grid term".into()));
        }
        if term == "clean" {
            grid.push(SnrLevel::Clean);
            continue;
        }
        if term.contains(':') {
            let parts: Vec<&str> = term.split(':').collect();
            if parts.len() != 3 {
                return Err(bad(format!("range {term:?} is not start:stop:step")));
            }
            let nums: Vec<f64> = parts
                .iter()
                .map(|p| p.trim().parse().map_err(|_| bad(format!("bad number in {term:?}"))))
                .collect::<Result<_>>()?;
            let (start, stop, step) = (nums[0], nums[1], nums[2]);
            if !(step > 0.0) || stop < start {
                return Err(bad(format!("range {term:?} must ascend with a positive step")));
            }
            let mut v = start;
            while v <= stop + 1e-9 {
                grid.push(SnrLevel::Db(v));
                v += step;
            }
            continue;
        }
        let db: f64 = term.parse().map_err(|_| bad(format!("bad grid term {term:?}")))?;
        grid.push(SnrLevel::Db(db));
    }
    if grid.is_empty() {
        return Err(bad("grid is empty".into()));
    }
    Ok(grid)
}

// --------------------------------------------------------------------
// SVG line charts

struct Series<'a> {
    label: &'a str,
    points: &'a [(f64, f64)],
    /// Draw point markers (for scatter-like series).
    markers: bool,
}

const PALETTE: &[&str] = &["#1f6fb2", "#d1495b", "#3a7d44", "#8c5e99", "#c98a2b", "#4a4a4a",
    "#6aa4c8", "#e08e99", "#86b78d", "#b99cc4"];

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || (v.fract() == 0.0 && v.abs() < 1e6) {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Writes a standalone SVG line chart. The full data table is embedded in
/// a `<desc>` block as CSV, and small tables are also rendered below the
/// axes so the numbers travel with the picture.
fn svg_line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let (w, h) = (720.0, 420.0);
    let (ml, mr, mt, mb) = (64.0, 150.0, 40.0, 48.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let finite = |f: fn((f64, f64)) -> f64| {
        all.iter().copied().map(f).filter(|v| v.is_finite()).collect::<Vec<f64>>()
    };
    let xs = finite(|p| p.0);
    let ys = finite(|p| p.1);
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let sx = move |x: f64| ml + (x - x0) / (x1 - x0) * plot_w;
    let sy = move |y: f64| mt + plot_h - (y - y0) / (y1 - y0) * plot_h;

    // Data table rows: one per x of the first series, a column per series.
    let table_rows = series.first().map_or(0, |s| s.points.len());
    let render_table = table_rows > 0 && table_rows <= 24;
    let table_h = if render_table { 18.0 * (table_rows + 1) as f64 + 24.0 } else { 0.0 };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{}\" \
         font-family=\"monospace\" font-size=\"12\">\n",
        h + table_h
    ));
    svg.push_str("<desc>");
    svg.push_str(x_label);
    for s in series {
        svg.push(',');
        svg.push_str(s.label);
    }
    svg.push('\n');
    for i in 0..table_rows {
        let x = series[0].points[i].0;
        svg.push_str(&fmt_tick(x));
        for s in series {
            svg.push(',');
            match s.points.get(i) {
                Some(&(_, y)) if y.is_finite() => svg.push_str(&format!("{y:.6}")),
                _ => svg.push_str("nan"),
            }
        }
        svg.push('\n');
    }
    svg.push_str("</desc>\n");
    svg.push_str(&format!("<rect width=\"{w}\" height=\"{}\" fill=\"white\"/>\n", h + table_h));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        ml + plot_w / 2.0,
        xml_escape(title)
    ));

    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let (px, py) = (sx(fx), sy(fy));
        svg.push_str(&format!(
            "<line x1=\"{px:.1}\" y1=\"{mt}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            mt + plot_h
        ));
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#ddd\"/>\n",
            ml + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            mt + plot_h + 18.0,
            fmt_tick(fx)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            ml - 8.0,
            py + 4.0,
            fmt_tick(fy)
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" \
         stroke=\"#333\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        ml + plot_w / 2.0,
        h - 10.0,
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0,
        xml_escape(y_label)
    ));

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        if pts.len() > 1 && !s.markers {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n",
                pts.join(" ")
            ));
        }
        if s.markers || pts.len() == 1 {
            for p in &pts {
                let (px, py) = p.split_once(',').expect("formatted pair");
                svg.push_str(&format!(
                    "<circle cx=\"{px}\" cy=\"{py}\" r=\"2.4\" fill=\"{color}\"/>\n"
                ));
            }
        }
        let ly = mt + 14.0 + 16.0 * si as f64;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" \
             stroke-width=\"3\"/>\n",
            ml + plot_w + 10.0,
            ml + plot_w + 28.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            ml + plot_w + 34.0,
            ly + 4.0,
            xml_escape(s.label)
        ));
    }

    if render_table {
        let top = h + 16.0;
        let col_w = (w - 2.0 * ml) / (series.len() + 1) as f64;
        svg.push_str(&format!("<text x=\"{ml}\" y=\"{top:.1}\" font-weight=\"bold\">{}</text>\n",
            xml_escape(x_label)));
        for (si, s) in series.iter().enumerate() {
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{top:.1}\" font-weight=\"bold\">{}</text>\n",
                ml + col_w * (si + 1) as f64,
                xml_escape(s.label)
            ));
        }
        for i in 0..table_rows {
            let y = top + 18.0 * (i + 1) as f64;
            svg.push_str(&format!(
                "<text x=\"{ml}\" y=\"{y:.1}\">{}</text>\n",
                fmt_tick(series[0].points[i].0)
            ));
            for (si, s) in series.iter().enumerate() {
                let cell = match s.points.get(i) {
                    Some(&(_, v)) if v.is_finite() => format!("{v:.4}"),
                    _ => "nan".into(),
                };
                svg.push_str(&format!(
                    "<text x=\"{:.1}\" y=\"{y:.1}\">{cell}</text>\n",
                    ml + col_w * (si + 1) as f64
                ));
            }
        }
    }

    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn span(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.04;
        (lo - pad, hi + pad)
    }
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// --------------------------------------------------------------------
// shared pipeline pieces

/// What a command produced, for reporting and exit-code logic.
#[derive(Debug, Default)]
pub struct CmdReport {
    pub out_dir: PathBuf,
    pub outputs: Vec<PathBuf>,
    /// Soft failures: recorded, reported, and turned into a nonzero exit,
    /// but they do not abort the run.
    pub failures: Vec<String>,
}

impl CmdReport {
    fn new(out_dir: PathBuf) -> Self {
        Self { out_dir, ..Default::default() }
    }

    fn push(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }
}

fn read_bundles_dir(dir: &Path) -> Result<Vec<RecordingBundle>> {
    if !dir.is_dir() {
        return Err(Error::BadConfigValue {
            key: "bundles".into(),
            detail: format!("{} is not a directory", dir.display()),
        });
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.txt").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::BadConfigValue {
            key: "bundles".into(),
            detail: format!("no recording bundles under {}", dir.display()),
        });
    }
    subdirs.iter().map(read_bundle).collect()
}

/// Weight/air-column pairs a synthetic bundle carries for calibration.
fn calibration_samples(bundle: &RecordingBundle) -> Vec<(f64, f64)> {
    let Some(truth) = &bundle.truth_ha else { return Vec::new() };
    let mut samples = Vec::new();
    for &(t, ha) in truth {
        if let Ok((weight, clamped)) = interpolate_scale(&bundle.scale, t) {
            if !clamped {
                samples.push((weight, ha));
            }
        }
    }
    samples
}

#[derive(Debug, serde::Serialize)]
struct CalibrationEntry {
    container: String,
    samples: usize,
    degree: usize,
    fit_rmse_mm: f64,
}

/// Fits one calibration per container, walking the degree down when a fit
/// comes out non-monotone.
fn calibrate_containers(
    bundles: &[RecordingBundle],
    degree: usize,
) -> Result<(BTreeMap<String, Calibration>, Vec<CalibrationEntry>)> {
    let mut pooled: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for bundle in bundles {
        pooled
            .entry(bundle.container_id.clone())
            .or_default()
            .extend(calibration_samples(bundle));
    }
    let mut fits = BTreeMap::new();
    let mut entries = Vec::new();
    for (container, samples) in pooled {
        if samples.is_empty() {
            return Err(Error::MissingCalibration { container });
        }
        let mut attempt = degree.max(1);
        let calib = loop {
            match fit_calibration(&samples, attempt) {
                Ok(c) => break c,
                Err(Error::CalibrationNotMonotone | Error::CalibrationUnderdetermined { .. })
                    if attempt > 1 =>
                {
                    log::warn!(
                        "container {container}: degree-{attempt} calibration rejected, trying {}",
                        attempt - 1
                    );
                    attempt -= 1;
                }
                Err(e) => return Err(e),
            }
        };
        entries.push(CalibrationEntry {
            container: container.clone(),
            samples: samples.len(),
            degree: attempt,
            fit_rmse_mm: calib.fit_rmse,
        });
        fits.insert(container, calib);
    }
    Ok((fits, entries))
}

/// Bundles -> labeled recordings, with per-container calibration.
fn load_labeled(
    dir: &Path,
    degree: usize,
) -> Result<(Vec<LabeledRecording>, Vec<CalibrationEntry>)> {
    let bundles = read_bundles_dir(dir)?;
    let (fits, entries) = calibrate_containers(&bundles, degree)?;
    let mut recordings = Vec::with_capacity(bundles.len());
    for bundle in &bundles {
        let calib = fits
            .get(&bundle.container_id)
            .ok_or_else(|| Error::MissingCalibration { container: bundle.container_id.clone() })?;
        recordings.push(label_recording(bundle, calib)?);
    }
    Ok((recordings, entries))
}

fn noise_bank_from(cfg: &RunConfig, grid: &[SnrLevel]) -> Result<Option<NoiseBank>> {
    if !grid.iter().any(|l| matches!(l, SnrLevel::Db(_))) {
        return Ok(None);
    }
    let dir = cfg.get("noise_dir");
    let seed = cfg.get_u64("seed")?;
    if dir.is_empty() {
        Ok(Some(NoiseBank::synthetic(seed)))
    } else {
        Ok(Some(NoiseBank::load(dir)?))
    }
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Model> {
    let variant = Variant::parse(cfg.get("variant"))?;
    let path = {
        let given = cfg.get("model");
        if given.is_empty() {
            cfg.sibling("train").join(format!("model-{}.bin", variant.name()))
        } else {
            PathBuf::from(given)
        }
    };
    let model = load_model(&path)?;
    if model.variant() != variant {
        return Err(Error::BadConfigValue {
            key: "variant".into(),
            detail: format!(
                "checkpoint {} holds a {} model, config says {}",
                path.display(),
                model.variant().name(),
                variant.name()
            ),
        });
    }
    Ok(model)
}

// --------------------------------------------------------------------
// commands

#[derive(Debug, serde::Serialize)]
struct SuiteManifest {
    kind: String,
    seed: u64,
    per_geometry: usize,
    containers: Vec<ContainerEntry>,
    recordings: Vec<RecordingEntry>,
}

#[derive(Debug, serde::Serialize)]
struct ContainerEntry {
    id: String,
    height_mm: f64,
    capacity_ml: f64,
    profile: Vec<(f64, f64)>,
}

#[derive(Debug, serde::Serialize)]
struct RecordingEntry {
    id: String,
    container: String,
    duration_s: f64,
    pour_height_mm: f64,
    initial_fill_mm: f64,
}

/// Generates a synthetic recording suite: one bundle directory per
/// scenario plus `suite.json`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<CmdReport> {
    let kind = match cfg.get("suite") {
        "train" => SuiteKind::Train,
        "eval" => SuiteKind::Eval,
        "shape" => SuiteKind::Shape,
        other => {
            return Err(cfg.bad("suite", format!("{other:?} is not train, eval, or shape")))
        }
    };
    let per_geometry = match cfg.get("per_geometry") {
        "auto" => match kind {
            SuiteKind::Train => 20,
            SuiteKind::Eval => 8,
            SuiteKind::Shape => 4,
        },
        text => text
            .parse()
            .map_err(|_| cfg.bad("per_geometry", format!("{text:?} is not an integer")))?,
    };
    let seed = cfg.get_u64("seed")?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut report = CmdReport::new(out.clone());

    let suite = scenario_suite(kind, seed, per_geometry)?;
    let mut recordings = Vec::new();
    for sc in &suite.scenarios {
        let bundle = simulate_pour(sc)?;
        let dir = out.join(&sc.id);
        write_bundle(&dir, &bundle)?;
        recordings.push(RecordingEntry {
            id: sc.id.clone(),
            container: sc.geometry.id.clone(),
            duration_s: sc.duration,
            pour_height_mm: sc.pour_height_mm,
            initial_fill_mm: sc.initial_fill_height,
        });
        report.push(dir);
        log::info!("synthesized {} ({:.1} s pour)", sc.id, sc.duration);
    }
    let geometries = match kind {
        SuiteKind::Train => train_geometries(),
        SuiteKind::Eval => eval_geometries(),
        SuiteKind::Shape => shape_geometries(),
    };
    let manifest = SuiteManifest {
        kind: kind.name().to_string(),
        seed,
        per_geometry,
        containers: geometries
            .iter()
            .map(|g| ContainerEntry {
                id: g.id.clone(),
                height_mm: g.height(),
                capacity_ml: g.capacity(),
                profile: g.profile(),
            })
            .collect(),
        recordings,
    };
    let manifest_path = out.join("suite.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    report.push(manifest_path);
    report.push(cfg.write_resolved(&out)?);
    Ok(report)
}

/// Calibrates, labels, and augments a bundle directory into a clip set.
pub fn cmd_build_dataset(cfg: &RunConfig) -> Result<CmdReport> {
    let bundles_dir = {
        let given = cfg.get("bundles");
        if given.is_empty() { cfg.sibling("synth") } else { PathBuf::from(given) }
    };
    let degree = cfg.get_usize("calibration_degree")?;
    let grid = parse_snr_grid(cfg.get("snr_grid"))?;
    let seed = cfg.get_u64("seed")?;
    let cps = cfg.get_f64("clips_per_second")?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut report = CmdReport::new(out.clone());

    let (recordings, calibration) = load_labeled(&bundles_dir, degree)?;
    log::info!("labeled {} recordings from {}", recordings.len(), bundles_dir.display());
    let bank =
        noise_bank_from(cfg, &grid)?.unwrap_or_else(|| NoiseBank::synthetic(seed));
    let clips = build_augmented_set(
        &recordings,
        &bank,
        &grid,
        &AugmentConfig { clips_per_second: cps, seed },
    )?;
    log::info!("extracted {} clips across {} grid levels", clips.len(), grid.len());

    let clips_path = out.join("clips.bin");
    write_clips(&clips_path, &clips, &ClipSetManifest::describe(&clips, &grid, seed, cps))?;
    report.push(clips_path);
    let cal_path = out.join("calibration.json");
    std::fs::write(&cal_path, serde_json::to_string_pretty(&calibration)?)?;
    report.push(cal_path);
    report.push(cfg.write_resolved(&out)?);
    Ok(report)
}

/// Trains one variant on a clip set and writes the checkpoint, manifest,
/// and per-epoch log.
pub fn cmd_train(cfg: &RunConfig) -> Result<CmdReport> {
    let dataset = {
        let given = cfg.get("dataset");
        if given.is_empty() {
            cfg.sibling("build-dataset").join("clips.bin")
        } else {
            PathBuf::from(given)
        }
    };
    let variant = Variant::parse(cfg.get("variant"))?;
    let tc = TrainConfig {
        epochs: cfg.get_usize("epochs")?,
        batch_size: cfg.get_usize("batch_size")?,
        learning_rate: cfg.get_f64("learning_rate")?,
        alpha: cfg.get_f64("alpha")?,
        clip_norm: cfg.get_f64("clip_norm")?,
        seed: cfg.get_u64("seed")?,
        val_fraction: cfg.get_f64("val_fraction")?,
        threads: cfg.get_usize("threads")?,
    };
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut report = CmdReport::new(out.clone());

    let clips = read_clips(&dataset)?;
    log::info!("training {} on {} clips", variant.name(), clips.len());
    let trained = train(&clips, variant, &tc)?;
    let last = trained.log.last().expect("at least one epoch");
    log::info!(
        "best epoch {} (val loss {:.4}); final val <5mm fraction {:.3}",
        trained.best_epoch,
        trained.best_val_loss,
        last.val_frac_under_5mm
    );

    let model_path = out.join(format!("model-{}.bin", variant.name()));
    save_model(&trained.model, &model_path)?;
    let manifest = CheckpointManifest {
        version: 1,
        variant: variant.name().to_string(),
        input_rows: variant.input_rows(),
        hidden: trained.model.hidden(),
        param_count: trained.model.param_count(),
        config: tc,
        best_epoch: trained.best_epoch,
        epochs_run: trained.log.len(),
        val_loss: trained.best_val_loss,
        val_frac_under_5mm: last.val_frac_under_5mm,
    };
    write_model_manifest(&model_path, &manifest)?;
    let log_path = out.join(format!("train-log-{}.csv", variant.name()));
    write_train_log(&log_path, &trained.log)?;
    report.push(model_path.clone());
    report.push(model_manifest_path(&model_path));
    report.push(log_path);
    report.push(cfg.write_resolved(&out)?);
    Ok(report)
}

/// Per-level slice errors from identical windows, so levels differ only in
/// the mixed-in noise.
struct PairedEval {
    labels: Vec<String>,
    /// Per level: absolute slice errors (mm) on scored slices.
    errors: Vec<Vec<f64>>,
}

fn paired_eval_errors(
    model: &Model,
    recordings: &[LabeledRecording],
    grid: &[SnrLevel],
    bank: Option<&NoiseBank>,
    windows_per_recording: usize,
    seed: u64,
) -> Result<PairedEval> {
    let score_from = (SCORE_MIN_SECONDS / SLICE_SECONDS).ceil() as usize;
    let mut errors: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    for (ri, rec) in recordings.iter().enumerate() {
        let mut window_rng = seedmix::stream(seed, STAGE_EVAL_WINDOW, ri as u64);
        for wi in 0..windows_per_recording {
            let start = draw_clip_start(rec, &mut window_rng)?;
            let window = crate::data::clip_window(rec, start)?;
            for (gi, &level) in grid.iter().enumerate() {
                let clip = match level {
                    SnrLevel::Clean => featurize_window(rec, &window, &window.audio, level)?,
                    SnrLevel::Db(db) => {
                        let bank = bank.ok_or_else(|| Error::BadConfigValue {
                            key: "snr_grid".into(),
                            detail: "noisy levels need a noise bank".into(),
                        })?;
                        let mut noise_rng = seedmix::stream(
                            seed,
                            STAGE_EVAL_NOISE,
                            (ri * 1024 + wi * 32 + gi) as u64,
                        );
                        let (name, offset) = bank.pick(&mut noise_rng);
                        let noise = bank.segment(name, offset, window.audio.samples.len())?;
                        featurize_window(rec, &window, &mix(&window.audio, &noise, db)?, level)?
                    }
                };
                let trace = model.predict_fused(&clip.features)?;
                for (k, (&pred, &truth)) in
                    trace.ha_hat.iter().zip(&clip.targets).enumerate()
                {
                    if k >= score_from {
                        errors[gi].push((pred - truth).abs());
                    }
                }
            }
        }
    }
    Ok(PairedEval { labels: grid.iter().map(|&l| snr_label(l)).collect(), errors })
}

/// Fraction of errors below each threshold.
fn threshold_curve(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds.iter().map(|&t| frac_within(errors, t)).collect()
}

#[derive(Debug, serde::Serialize)]
struct EvalLevelSummary {
    snr: String,
    slices: usize,
    mean_abs_mm: f64,
    frac_below_5mm: f64,
}

#[derive(Debug, serde::Serialize)]
struct EvalSummary {
    variant: String,
    recordings: usize,
    windows_per_recording: usize,
    /// Slices closer to the window start than this are not scored.
    score_min_seconds: f64,
    levels: Vec<EvalLevelSummary>,
}

/// Evaluates a checkpoint on labeled pours across an SNR grid and writes
/// the threshold and noise-robustness curves.
pub fn cmd_eval(cfg: &RunConfig) -> Result<CmdReport> {
    let model = load_checkpoint(cfg)?;
    let variant = model.variant();
    let bundles_dir = {
        let given = cfg.get("bundles");
        if given.is_empty() { cfg.sibling("synth") } else { PathBuf::from(given) }
    };
    let grid = parse_snr_grid(cfg.get("snr_grid"))?;
    let seed = cfg.get_u64("seed")?;
    let windows = cfg.get_usize("windows_per_recording")?.max(1);
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut report = CmdReport::new(out.clone());

    let (recordings, _) = load_labeled(&bundles_dir, cfg.get_usize("calibration_degree")?)?;
    let bank = noise_bank_from(cfg, &grid)?;
    let eval = paired_eval_errors(&model, &recordings, &grid, bank.as_ref(), windows, seed)?;

    // (a) fraction below threshold, e in [0, 20] mm, one column per level.
    let thresholds: Vec<f64> = (0..=20).map(|e| e as f64).collect();
    let curves: Vec<Vec<f64>> =
        eval.errors.iter().map(|errs| threshold_curve(errs, &thresholds)).collect();
    let mut csv = String::from("threshold_mm");
    for label in &eval.labels {
        csv.push_str(&format!(",{label}"));
    }
    csv.push('\n');
    for (ti, &t) in thresholds.iter().enumerate() {
        csv.push_str(&format!("{t:.0}"));
        for curve in &curves {
            csv.push_str(&format!(",{:.6}", curve[ti]));
        }
        csv.push('\n');
    }
    let curve_path = out.join(format!("{}-threshold-curve.csv", variant.name()));
    std::fs::write(&curve_path, csv)?;
    report.push(curve_path);

    let series_points: Vec<Vec<(f64, f64)>> = curves
        .iter()
        .map(|c| thresholds.iter().zip(c).map(|(&t, &f)| (t, f)).collect())
        .collect();
    let series: Vec<Series> = eval
        .labels
        .iter()
        .zip(&series_points)
        .map(|(label, points)| Series { label, points, markers: false })
        .collect();
    let curve_svg = out.join(format!("{}-threshold-curve.svg", variant.name()));
    svg_line_chart(
        &curve_svg,
        &format!("{}: fraction of slices below error threshold", variant.name()),
        "threshold_mm",
        "fraction",
        &series,
    )?;
    report.push(curve_svg);

    // (b) fraction below 5 mm against SNR.
    let mut below5_csv = String::from("snr_db,frac_below_5mm\n");
    let mut below5_points = Vec::new();
    let mut clean_frac = None;
    for (gi, level) in grid.iter().enumerate() {
        let frac = frac_within(&eval.errors[gi], 5.0);
        below5_csv.push_str(&format!("{},{:.6}\n", eval.labels[gi], frac));
        match level {
            SnrLevel::Db(db) => below5_points.push((*db, frac)),
            SnrLevel::Clean => clean_frac = Some(frac),
        }
    }
    let below5_path = out.join(format!("{}-below5-vs-snr.csv", variant.name()));
    std::fs::write(&below5_path, below5_csv)?;
    report.push(below5_path);
    if below5_points.len() > 1 {
        let mut series = vec![Series {
            label: "below 5 mm",
            points: &below5_points,
            markers: false,
        }];
        let clean_line: Vec<(f64, f64)>;
        if let Some(frac) = clean_frac {
            let (x0, x1) = (below5_points[0].0, below5_points.last().unwrap().0);
            clean_line = vec![(x0, frac), (x1, frac)];
            series.push(Series { label: "clean", points: &clean_line, markers: false });
        }
        let below5_svg = out.join(format!("{}-below5-vs-snr.svg", variant.name()));
        svg_line_chart(
            &below5_svg,
            &format!("{}: slices below 5 mm vs SNR", variant.name()),
            "snr_db",
            "fraction",
            &series,
        )?;
        report.push(below5_svg);
    }

    let summary = EvalSummary {
        variant: variant.name().to_string(),
        recordings: recordings.len(),
        windows_per_recording: windows,
        score_min_seconds: SCORE_MIN_SECONDS,
        levels: eval
            .labels
            .iter()
            .zip(&eval.errors)
            .map(|(label, errs)| EvalLevelSummary {
                snr: label.clone(),
                slices: errs.len(),
                mean_abs_mm: if errs.is_empty() {
                    f64::NAN
                } else {
                    errs.iter().sum::<f64>() / errs.len() as f64
                },
                frac_below_5mm: frac_within(errs, 5.0),
            })
            .collect(),
    };
    let summary_path = out.join(format!("{}-eval.json", variant.name()));
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    report.push(summary_path);
    report.push(cfg.write_resolved(&out)?);
    Ok(report)
}

fn parse_targets(text: &str) -> Result<Vec<f64>> {
    let bad = |detail: String| Error::BadConfigValue { key: "targets_mm".into(), detail };
    let targets: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| bad(format!("bad target {t:?}"))))
        .collect::<Result<_>>()?;
    if targets.is_empty() {
        return Err(bad("no targets".into()));
    }
    Ok(targets)
}

/// Runs the closed-loop experiment sweep and writes episode, cell, and
/// trace tables.
pub fn cmd_pour(cfg: &RunConfig) -> Result<CmdReport> {
    let estimator_kind = cfg.get("estimator");
    let model;
    let estimator = match estimator_kind {
        "oracle" => Estimator::Oracle,
        "model" => {
            model = load_checkpoint(cfg)?;
            Estimator::Model(&model)
        }
        other => {
            return Err(cfg.bad("estimator", format!("{other:?} is not oracle or model")))
        }
    };
    let kind = match cfg.get("suite") {
        "train" => SuiteKind::Train,
        "eval" => SuiteKind::Eval,
        "shape" => SuiteKind::Shape,
        other => {
            return Err(cfg.bad("suite", format!("{other:?} is not train, eval, or shape")))
        }
    };
    let seed = cfg.get_u64("seed")?;
    let suite = scenario_suite(kind, seed, cfg.get_usize("per_geometry")?)?;
    let grid = parse_snr_grid(cfg.get("snr_grid"))?;
    let bank = noise_bank_from(cfg, &grid)?;
    let spec = MatrixSpec {
        snrs: grid,
        targets_mm: parse_targets(cfg.get("targets_mm"))?,
        episodes: cfg.get_usize("episodes")?,
        extra_latency: cfg.get_f64("extra_latency")?,
    };
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut report = CmdReport::new(out.clone());

    let rows = experiment_matrix(estimator, &suite.scenarios, &spec, bank.as_ref(), seed)?;
    let episodes_path = out.join("episodes.csv");
    write_episode_csv(&episodes_path, &rows)?;
    report.push(episodes_path);

    let cells = summarize_cells(&rows);
    let mut cells_csv = String::from(
        "cell_id,container,snr_db,target_mm,episodes,failures,mean_error_mm,std_error_mm\n",
    );
    for c in &cells {
        cells_csv.push_str(&format!(
            "{},{},{},{:.1},{},{},{:.4},{:.4}\n",
            c.cell_id,
            c.container,
            snr_label(c.snr),
            c.target_mm,
            c.episodes,
            c.failures,
            c.mean_error_mm,
            c.std_error_mm
        ));
    }
    let cells_path = out.join("cells.csv");
    std::fs::write(&cells_path, cells_csv)?;
    report.push(cells_path);

    let traces_dir = out.join("traces");
    std::fs::create_dir_all(&traces_dir)?;
    let mut within_cell: BTreeMap<&str, usize> = BTreeMap::new();
    for row in &rows {
        let k = within_cell.entry(row.cell_id.as_str()).or_insert(0);
        let index = *k;
        *k += 1;
        if row.error_mm.is_nan() {
            report
                .failures
                .push(format!("episode {} seed {} produced no result", row.cell_id, row.seed));
            continue;
        }
        if row.trace.is_empty() {
            continue;
        }
        let mut csv = String::from("t,ha_hat_mm\n");
        for (t, ha) in &row.trace {
            csv.push_str(&format!("{t:.4},{ha:.4}\n"));
        }
        let path = traces_dir.join(format!("{}-{index}.csv", row.cell_id));
        std::fs::write(&path, csv)?;
    }
    report.push(traces_dir);

    let points: Vec<(f64, f64)> =
        cells.iter().enumerate().map(|(i, c)| (i as f64, c.mean_error_mm)).collect();
    let svg_path = out.join("cells.svg");
    svg_line_chart(
        &svg_path,
        "mean signed height error per cell (index follows cells.csv)",
        "cell index",
        "error_mm",
        &[Series { label: "mean error", points: &points, markers: true }],
    )?;
    report.push(svg_path);
    report.push(cfg.write_resolved(&out)?);
    Ok(report)
}

fn read_trace_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.chars().any(|c| c.is_alphabetic())) {
            continue;
        }
        let (t, ha) = line.split_once(',').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: "expected t,ha columns".into(),
        })?;
        let parse = |field: &str| {
            field.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("not a number: {field:?}"),
            })
        };
        rows.push((parse(t)?, parse(ha)?));
    }
    Ok(rows)
}

fn shape_geometry(name: &str) -> Result<ContainerGeometry> {
    let alias = match name {
        "cylinder" => "shape_cyl",
        "frustum" => "shape_frustum",
        "bowl" => "shape_bowl",
        other => other,
    };
    shape_geometries()
        .into_iter()
        .chain(train_geometries())
        .chain(eval_geometries())
        .find(|g| g.id == alias)
        .ok_or_else(|| Error::BadConfigValue {
            key: "geometry".into(),
            detail: format!("unknown geometry {name:?}"),
        })
}

#[derive(Debug, serde::Serialize)]
struct ShapeSummary {
    geometry: String,
    estimator: String,
    samples: usize,
    dropped_intervals: usize,
    quad: [f64; 3],
    positive_on_range: bool,
    fit_volume_ml: f64,
    /// Mean |r_sample - r_true| over retained samples; absent in file mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    sample_mae_mm: Option<f64>,
    band_mae_mm: Vec<f64>,
}

/// Reconstructs a container profile, either from a synthetic episode or
/// from a trace CSV plus F/T CSV pair.
pub fn cmd_shape(cfg: &RunConfig) -> Result<CmdReport> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut report = CmdReport::new(out.clone());
    let density = cfg.get_f64("density")?;
    let shape_cfg = ShapeConfig {
        dh_floor_mm: cfg.get_f64("dh_floor_mm")?,
        merge_horizon: cfg.get_usize("merge_horizon")?,
        ..ShapeConfig::default()
    };

    // File mode: post-process an existing trace + F/T pair.
    let (tag, trace, poured, height, truth): (
        String,
        Vec<(f64, f64)>,
        Vec<f64>,
        f64,
        Option<ContainerGeometry>,
    ) = if !cfg.get("trace").is_empty() {
        let trace = read_trace_csv(Path::new(cfg.get("trace")))?;
        let ft_path = cfg.get("ft");
        if ft_path.is_empty() {
            return Err(cfg.bad("ft", "file mode needs an F/T CSV next to the trace"));
        }
        let ft = crate::data::read_ft_csv(ft_path)?;
        let poured = poured_from_wrist(&ft)?;
        let height_text = cfg.get("container_height");
        if height_text.is_empty() {
            return Err(cfg.bad("container_height", "file mode needs the container height"));
        }
        let height = cfg.get_f64("container_height")?;
        ("file".to_string(), trace, poured, height, None)
    } else {
        let geometry = shape_geometry(cfg.get("geometry"))?;
        let seed = cfg.get_u64("seed")?;
        // One slow shape-suite pour of this geometry; unreachable target,
        // so the flow is never cut and the trace spans the whole fill.
        let suite = scenario_suite(SuiteKind::Shape, seed, 1)?;
        let mut sc: PourScenario = suite
            .scenarios
            .iter()
            .find(|s| s.geometry.id == geometry.id)
            .cloned()
            .unwrap_or_else(|| {
                let mut sc = suite.scenarios[0].clone();
                sc.id = format!("shape_{}_00", geometry.id);
                sc.geometry = geometry.clone();
                sc
            });
        sc.liquid_density = density;
        let estimator_kind = cfg.get("estimator");
        let model;
        let estimator = match estimator_kind {
            "oracle" => Estimator::Oracle,
            "model" => {
                model = load_checkpoint(cfg)?;
                Estimator::Model(&model)
            }
            other => {
                return Err(cfg.bad("estimator", format!("{other:?} is not oracle or model")))
            }
        };
        let policy = StopPolicy {
            target_ha: 0.5,
            correction_mm: 0.0,
            min_window: MIN_ESTIMATE_SECONDS,
        };
        let res = run_episode(&sc, estimator, &policy, SnrLevel::Clean, None, seed)?;
        // Oracle mode is perfect perception end to end: true landed mass,
        // not the noisy wrist estimate. Model mode reconstructs from the
        // wrist force alone, like a real run would.
        let poured = if matches!(estimator, Estimator::Oracle) {
            let sim = PourSim::new(&sc)?;
            let n = (sc.duration * f64::from(FT_RATE)).round() as usize;
            (0..n).map(|i| sim.landed_mass(i as f64 / f64::from(FT_RATE))).collect()
        } else {
            poured_from_wrist(&simulate_pour(&sc)?.ft)?
        };
        let trace_path = out.join(format!("trace-{}.csv", geometry.id));
        let mut csv = String::from("t,ha_hat_mm\n");
        for (t, ha) in &res.trace {
            csv.push_str(&format!("{t:.4},{ha:.4}\n"));
        }
        std::fs::write(&trace_path, csv)?;
        report.push(trace_path);
        (geometry.id.clone(), res.trace, poured, geometry.height(), Some(geometry))
    };

    let set = radius_samples(&poured, &trace, density, height, &shape_cfg)?;
    log::info!("{} radius samples ({} intervals dropped)", set.samples.len(), set.dropped);
    let profile = fit_profile(&set.samples)?;
    let profile_path = out.join(format!("profile-{tag}.csv"));
    write_profile_csv(&profile_path, &profile, 50)?;
    report.push(profile_path);

    let (lo, hi) = profile.range();
    let mut band_mae = Vec::new();
    if let Some(geometry) = &truth {
        let bands = evaluate_profile(&profile, geometry, 5);
        let mut csv = String::from("h_lo_mm,h_hi_mm,mean_abs_mm\n");
        for b in &bands {
            csv.push_str(&format!("{:.2},{:.2},{:.4}\n", b.h_lo, b.h_hi, b.mean_abs_mm));
            band_mae.push(b.mean_abs_mm);
        }
        let bands_path = out.join(format!("bands-{tag}.csv"));
        std::fs::write(&bands_path, csv)?;
        report.push(bands_path);
    }

    let sample_points: Vec<(f64, f64)> =
        set.samples.iter().map(|s| (s.h_mm, s.r_mm)).collect();
    let fit_points: Vec<(f64, f64)> = (0..=60)
        .map(|k| {
            let h = lo + (hi - lo) * k as f64 / 60.0;
            (h, profile.radius_at(h))
        })
        .collect();
    let mut series = vec![
        Series { label: "fit", points: &fit_points, markers: false },
        Series { label: "samples", points: &sample_points, markers: true },
    ];
    let truth_points: Vec<(f64, f64)>;
    if let Some(geometry) = &truth {
        truth_points = (0..=60)
            .map(|k| {
                let h = geometry.height() * k as f64 / 60.0;
                (h, geometry.radius_at(h))
            })
            .collect();
        series.insert(0, Series { label: "true wall", points: &truth_points, markers: false });
    }
    let svg_path = out.join(format!("shape-{tag}.svg"));
    svg_line_chart(&svg_path, &format!("container profile: {tag}"), "h_mm", "r_mm", &series)?;
    report.push(svg_path);

    let sample_mae_mm = truth.as_ref().map(|geometry| {
        let total: f64 = set
            .samples
            .iter()
            .map(|s| (s.r_mm - geometry.radius_at(s.h_mm)).abs())
            .sum();
        total / set.samples.len() as f64
    });
    let summary = ShapeSummary {
        geometry: tag.clone(),
        estimator: cfg.get("estimator").to_string(),
        samples: set.samples.len(),
        dropped_intervals: set.dropped,
        quad: profile.quad,
        positive_on_range: profile.positive_on_range,
        fit_volume_ml: fit_volume_ml(&profile, lo, hi),
        sample_mae_mm,
        band_mae_mm: band_mae,
    };
    let summary_path = out.join(format!("shape-{tag}.json"));
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    report.push(summary_path);
    report.push(cfg.write_resolved(&out)?);
    Ok(report)
}

#[derive(Debug, serde::Serialize)]
struct BankEntry {
    name: String,
    seconds: f64,
    rms: f64,
}

/// Materializes the seeded synthetic noise bank as WAV files.
pub fn cmd_noise_bank(cfg: &RunConfig) -> Result<CmdReport> {
    let seed = cfg.get_u64("seed")?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut report = CmdReport::new(out.clone());
    let bank = NoiseBank::synthetic(seed);
    let mut entries = Vec::new();
    for name in bank.names() {
        let wave = bank.entry(name)?;
        let path = out.join(format!("{name}.wav"));
        write_wav(&path, wave)?;
        entries.push(BankEntry {
            name: name.to_string(),
            seconds: wave.duration(),
            rms: wave.rms(),
        });
        report.push(path);
    }
    let manifest = out.join("bank.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&entries)?)?;
    report.push(manifest);
    report.push(cfg.write_resolved(&out)?);
    Ok(report)
}

// --------------------------------------------------------------------
// argv surface

#[derive(Parser, Debug)]
#[command(
    name = "pournet",
    about = "Audio-haptic liquid level estimation: synthesis, training, and closed-loop pouring",
    version
)]
pub struct CliArgs {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand, Debug)]
enum CliCommand {
    /// Generate a synthetic recording suite.
    Synth(CommonArgs),
    /// Calibrate, label, and augment recordings into a clip dataset.
    BuildDataset(CommonArgs),
    /// Train a model variant on a clip dataset.
    Train(CommonArgs),
    /// Evaluate a checkpoint across an SNR grid.
    Eval(CommonArgs),
    /// Run closed-loop pouring episodes.
    Pour(CommonArgs),
    /// Reconstruct a container profile.
    Shape(CommonArgs),
    /// Write the synthetic noise bank to disk.
    NoiseBank(CommonArgs),
}

impl CliCommand {
    fn name(&self) -> &'static str {
        match self {
            CliCommand::Synth(_) => "synth",
            CliCommand::BuildDataset(_) => "build-dataset",
            CliCommand::Train(_) => "train",
            CliCommand::Eval(_) => "eval",
            CliCommand::Pour(_) => "pour",
            CliCommand::Shape(_) => "shape",
            CliCommand::NoiseBank(_) => "noise-bank",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            CliCommand::Synth(a)
            | CliCommand::BuildDataset(a)
            | CliCommand::Train(a)
            | CliCommand::Eval(a)
            | CliCommand::Pour(a)
            | CliCommand::Shape(a)
            | CliCommand::NoiseBank(a) => a,
        }
    }
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Config file applied over built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every derived random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $POURNET_OUT/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model variant: mp, ap, or ft.
    #[arg(long)]
    variant: Option<String>,
    /// SNR grid, e.g. "clean,0:20:5", "clean", or "-10".
    #[arg(long = "snr-grid")]
    snr_grid: Option<String>,
    /// Worker thread cap; 1 guarantees bit-determinism.
    #[arg(long)]
    threads: Option<usize>,
    /// Extra key=value overrides (repeatable), e.g. --set epochs=20.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Builds the resolved config for parsed arguments.
fn resolve_config(command: &str, args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(command)?;
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", seed.to_string())?;
    }
    if let Some(out) = &args.out {
        cfg.set("out", out.display().to_string())?;
    }
    if let Some(variant) = &args.variant {
        cfg.set("variant", variant.clone())?;
    }
    if let Some(grid) = &args.snr_grid {
        cfg.set("snr_grid", grid.clone())?;
    }
    if let Some(threads) = args.threads {
        cfg.set("threads", threads.to_string())?;
    }
    for pair in &args.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| Error::BadConfigValue {
            key: "set".into(),
            detail: format!("{pair:?} is not key=value"),
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

/// Dispatches one resolved command.
pub fn run_command(cfg: &RunConfig) -> Result<CmdReport> {
    match cfg.command() {
        "synth" => cmd_synth(cfg),
        "build-dataset" => cmd_build_dataset(cfg),
        "train" => cmd_train(cfg),
        "eval" => cmd_eval(cfg),
        "pour" => cmd_pour(cfg),
        "shape" => cmd_shape(cfg),
        "noise-bank" => cmd_noise_bank(cfg),
        other => unreachable!("unknown command {other}"),
    }
}

#[derive(Debug, serde::Serialize)]
struct ErrorReport {
    command: String,
    errors: Vec<String>,
}

fn write_error_report(dir: &Path, command: &str, errors: &[String]) {
    let report = ErrorReport { command: command.to_string(), errors: errors.to_vec() };
    if std::fs::create_dir_all(dir).is_ok() {
        if let Ok(json) = serde_json::to_string_pretty(&report) {
            let _ = std::fs::write(dir.join("error-report.json"), json);
        }
    }
}

/// Full program entry: parses argv, runs the command, writes an error
/// report on failure. Returns the process exit code (0 iff no errors).
pub fn main_from_args<I>(argv: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match CliArgs::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Clap handles --help/--version through this path too.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let command = cli.command.name();
    let cfg = match resolve_config(command, cli.command.args()) {
        Ok(cfg) => cfg,
        Err(e) => {
            log::error!("{e}");
            return 1;
        }
    };
    match run_command(&cfg) {
        Ok(report) if report.failures.is_empty() => {
            log::info!("{} outputs under {}", report.outputs.len(), report.out_dir.display());
            0
        }
        Ok(report) => {
            for failure in &report.failures {
                log::error!("{failure}");
            }
            write_error_report(&report.out_dir, command, &report.failures);
            1
        }
        Err(e) => {
            log::error!("{e}");
            write_error_report(&cfg.out_dir(), command, &[e.to_string()]);
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key() {
        for command in COMMANDS {
            let cfg = RunConfig::new(command).unwrap();
            for key in GLOBAL_KEYS.iter().chain(command_keys(command)) {
                // get() panics on a missing key, so this is the assertion.
                let _ = cfg.get(key);
            }
        }
    }

    #[test]
    fn set_rejects_unknown_keys() {
        let mut cfg = RunConfig::new("train").unwrap();
        cfg.set("epochs", "3").unwrap();
        assert_eq!(cfg.get("epochs"), "3");
        assert!(matches!(
            cfg.set("suite", "train"),
            Err(Error::UnknownConfigKey { .. })
        ));
    }

    #[test]
    fn config_file_sections_and_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nseed = 99\n\n[train]\nepochs = 4\n\n[eval]\nwindows_per_recording = 9\n",
        )
        .unwrap();

        let mut cfg = RunConfig::new("train").unwrap();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.get("seed"), "99");
        assert_eq!(cfg.get("epochs"), "4");

        // The eval section was validated but not applied to train.
        assert!(!cfg.values.contains_key("windows_per_recording"));

        // Flags land after the file.
        cfg.set("seed", "123").unwrap();
        assert_eq!(cfg.get("seed"), "123");
    }

    #[test]
    fn config_file_rejects_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let bad_key = dir.path().join("bad_key.cfg");
        std::fs::write(&bad_key, "[train]\nbogus = 1\n").unwrap();
        let mut cfg = RunConfig::new("train").unwrap();
        assert!(matches!(
            cfg.apply_file(&bad_key),
            Err(Error::UnknownConfigKey { .. })
        ));

        let bad_section = dir.path().join("bad_section.cfg");
        std::fs::write(&bad_section, "[nonsense]\n").unwrap();
        assert!(matches!(
            cfg.apply_file(&bad_section),
            Err(Error::UnknownConfigKey { .. })
        ));

        let bad_line = dir.path().join("bad_line.cfg");
        std::fs::write(&bad_line, "just words\n").unwrap();
        assert!(matches!(cfg.apply_file(&bad_line), Err(Error::Parse { .. })));
    }

    #[test]
    fn resolved_text_is_sorted_and_complete() {
        let cfg = RunConfig::new("synth").unwrap();
        let text = cfg.resolved_text();
        assert!(text.starts_with("command = synth\n"));
        let keys: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split(" = ").next().unwrap())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
        assert!(text.contains("suite = train"));
    }

    #[test]
    fn snr_grid_terms() {
        let grid = parse_snr_grid("clean").unwrap();
        assert_eq!(grid, vec![SnrLevel::Clean]);

        let grid = parse_snr_grid("0:20:5").unwrap();
        let dbs: Vec<f64> = grid
            .iter()
            .map(|l| match l {
                SnrLevel::Db(db) => *db,
                SnrLevel::Clean => panic!("unexpected clean"),
            })
            .collect();
        assert_eq!(dbs, vec![0.0, 5.0, 10.0, 15.0, 20.0]);

        let grid = parse_snr_grid("clean,-20:20:5").unwrap();
        assert_eq!(grid.len(), 10);
        assert_eq!(grid[0], SnrLevel::Clean);
        assert_eq!(grid[1], SnrLevel::Db(-20.0));
        assert_eq!(grid[9], SnrLevel::Db(20.0));

        let grid = parse_snr_grid("-7.5").unwrap();
        assert_eq!(grid, vec![SnrLevel::Db(-7.5)]);

        assert!(parse_snr_grid("").is_err());
        assert!(parse_snr_grid("10:0:5").is_err());
        assert!(parse_snr_grid("0:10:0").is_err());
        assert!(parse_snr_grid("0:10").is_err());
        assert!(parse_snr_grid("loud").is_err());
    }

    #[test]
    fn threshold_curve_ranks_perfect_above_constant() {
        // A perfect estimator has zero error everywhere: the curve pins to
        // 1.0 for every positive threshold. A constant guess misses by a
        // spread of margins and must sit strictly below somewhere.
        let thresholds: Vec<f64> = (0..=20).map(|e| e as f64).collect();
        let perfect = vec![0.0; 50];
        let constant: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let curve_p = threshold_curve(&perfect, &thresholds);
        let curve_c = threshold_curve(&constant, &thresholds);
        for (i, (&p, &c)) in curve_p.iter().zip(&curve_c).enumerate() {
            if i > 0 {
                assert_eq!(p, 1.0, "threshold {i}");
            }
            assert!(c <= p);
        }
        assert!(curve_c[5] < 1.0);
    }

    #[test]
    fn targets_parse() {
        assert_eq!(parse_targets("60").unwrap(), vec![60.0]);
        assert_eq!(parse_targets("40, 60,80").unwrap(), vec![40.0, 60.0, 80.0]);
        assert!(parse_targets("sixty").is_err());
    }

    #[test]
    fn trace_csv_reads_with_or_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        std::fs::write(&path, "t,ha_hat_mm\n1.0,80.5\n2.0,72.25\n").unwrap();
        let rows = read_trace_csv(&path).unwrap();
        assert_eq!(rows, vec![(1.0, 80.5), (2.0, 72.25)]);

        std::fs::write(&path, "1.0,80.5\n2.0,72.25\n").unwrap();
        assert_eq!(read_trace_csv(&path).unwrap().len(), 2);

        std::fs::write(&path, "1.0;80.5\n").unwrap();
        assert!(read_trace_csv(&path).is_err());
    }

    #[test]
    fn geometry_aliases_resolve() {
        assert_eq!(shape_geometry("cylinder").unwrap().id, "shape_cyl");
        assert_eq!(shape_geometry("frustum").unwrap().id, "shape_frustum");
        assert_eq!(shape_geometry("bowl").unwrap().id, "shape_bowl");
        assert_eq!(shape_geometry("tumbler").unwrap().id, "tumbler");
        assert!(shape_geometry("mug").is_err());
    }

    #[test]
    fn out_dir_prefers_explicit_key() {
        let mut cfg = RunConfig::new("synth").unwrap();
        cfg.set("out", "/tmp/somewhere").unwrap();
        assert_eq!(cfg.out_dir(), PathBuf::from("/tmp/somewhere"));
    }

    #[test]
    fn svg_chart_embeds_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.svg");
        let a = [(0.0, 1.0), (5.0, 0.8), (10.0, 0.3)];
        let b = [(0.0, 0.9), (5.0, 0.9), (10.0, 0.9)];
        svg_line_chart(
            &path,
            "test chart",
            "x",
            "y",
            &[
                Series { label: "a", points: &a, markers: false },
                Series { label: "b", points: &b, markers: true },
            ],
        )
        .unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("<circle"));
        assert!(svg.contains("0.800000"), "desc carries the data table");
        assert!(svg.contains("test chart"));
    }

    #[test]
    fn cli_argv_maps_to_config() {
        let cli = CliArgs::try_parse_from([
            "pournet",
            "train",
            "--seed",
            "21",
            "--variant",
            "ap",
            "--set",
            "epochs=2",
        ])
        .unwrap();
        assert_eq!(cli.command.name(), "train");
        let cfg = resolve_config(cli.command.name(), cli.command.args()).unwrap();
        assert_eq!(cfg.get("seed"), "21");
        assert_eq!(cfg.get("variant"), "ap");
        assert_eq!(cfg.get("epochs"), "2");
        assert_eq!(cfg.get("batch_size"), "16");
    }

    #[test]
    fn snr_grid_flag_uses_hyphen() {
        let cli = CliArgs::try_parse_from([
            "pournet",
            "eval",
            "--snr-grid",
            "clean,5",
        ])
        .unwrap();
        let cfg = resolve_config(cli.command.name(), cli.command.args()).unwrap();
        assert_eq!(parse_snr_grid(cfg.get("snr_grid")).unwrap().len(), 2);
    }
}
