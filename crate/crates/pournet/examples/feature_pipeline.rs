//! Walk the full labeling pipeline: simulate a pour, calibrate weight to
//! air-column height from the scale readings, label the recording, and
//! featurize one 4 s clip into the fused 305x251 matrix.
//!
//!     cargo run --example feature_pipeline

use pournet::data::{
    extract_clips, fit_calibration, interpolate_scale, label_recording, SLICE_SECONDS,
};
use pournet::synthsim::{scenario_suite, simulate_pour, SuiteKind};

fn main() -> pournet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let suite = scenario_suite(SuiteKind::Train, 11, 1)?;
    let sc = &suite.scenarios[0];
    let bundle = simulate_pour(sc)?;

    // Calibration pairs: scale weight interpolated at each truth time.
    // On a robot these come from a separate calibration pour; here the
    // synthetic truth channel plays that role.
    let mut pairs = Vec::new();
    for &(t, ha) in bundle.truth_ha.as_ref().expect("synthetic truth") {
        let (weight, clamped) = interpolate_scale(&bundle.scale, t)?;
        if !clamped {
            pairs.push((weight, ha));
        }
    }
    let calib = fit_calibration(&pairs, 3)?;
    log::info!(
        "calibration: {} samples, rmse {:.3} mm over {:.3}..{:.3} kg",
        pairs.len(),
        calib.fit_rmse,
        calib.weight_min,
        calib.weight_max
    );

    let rec = label_recording(&bundle, &calib)?;
    log::info!(
        "labeled {}: {} truth slices at {} ms cadence",
        rec.id,
        rec.truth_ha.len(),
        SLICE_SECONDS * 1e3
    );

    let clips = extract_clips(&rec, 2, 42)?;
    for clip in &clips {
        log::info!(
            "clip at t={:.2}: features {}x{}, targets {:.1} -> {:.1} mm",
            clip.meta.start,
            clip.features.rows(),
            clip.features.cols(),
            clip.targets[0],
            clip.targets[clip.targets.len() - 1]
        );
    }
    Ok(())
}
