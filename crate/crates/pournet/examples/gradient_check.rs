//! Verify the hand-written backpropagation-through-time gradients against
//! central finite differences on real featurized audio.
//!
//!     cargo run --example gradient_check
//!
//! The check runs on short windows cut from a full clip. Central differences
//! degrade on long sequences: truncation error grows with the curvature
//! accumulated across hundreds of recurrent steps, so past a few dozen slices
//! the probe stops being a trustworthy reference even when the analytic
//! gradient is exact. Eight slices keeps the probe well inside its accurate
//! regime while still exercising every parameter tensor on real data.

use pournet::data::{extract_clips, fit_calibration, interpolate_scale, label_recording, FeatureMatrix, LabeledClip};
use pournet::model::{finite_difference_check, Model, NormStats, Variant};
use pournet::synthsim::{scenario_suite, simulate_pour, SuiteKind};

/// First `slices` time steps of a clip as a standalone clip.
fn truncate(clip: &LabeledClip, slices: usize) -> LabeledClip {
    let rows = clip.features.rows();
    let data = clip.features.data()[..rows * slices].to_vec();
    LabeledClip {
        features: FeatureMatrix::from_columns(rows, slices, data),
        targets: clip.targets[..slices].to_vec(),
        meta: clip.meta.clone(),
    }
}

fn main() -> pournet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let suite = scenario_suite(SuiteKind::Train, 5, 1)?;
    let bundle = simulate_pour(&suite.scenarios[0])?;
    let mut pairs = Vec::new();
    for &(t, ha) in bundle.truth_ha.as_ref().expect("synthetic truth") {
        let (weight, clamped) = interpolate_scale(&bundle.scale, t)?;
        if !clamped {
            pairs.push((weight, ha));
        }
    }
    let rec = label_recording(&bundle, &fit_calibration(&pairs, 3)?)?;
    let clips = extract_clips(&rec, 3, 9)?;
    let short: Vec<LabeledClip> = clips.iter().map(|c| truncate(c, 8)).collect();
    let refs: Vec<&_> = short.iter().collect();

    let mut model = Model::init(Variant::Mp, 4);
    model.set_norm_stats(NormStats::fit(&clips, Variant::Mp)?)?;
    log::info!(
        "checking {} parameters against central differences on {} windows of {}x{}",
        model.param_count(),
        refs.len(),
        short[0].features.rows(),
        short[0].features.cols()
    );

    let worst = finite_difference_check(&mut model, &refs, 0.01, 24, 7)?;
    log::info!("max relative gradient error: {worst:.3e}");
    assert!(worst < 1e-4);
    Ok(())
}
