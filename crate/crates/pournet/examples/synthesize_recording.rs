//! Generate one synthetic pouring recording and write it to disk as a
//! bundle directory (audio.wav, ft.csv, scale.csv, meta.txt, truth_ha.csv).
//!
//!     cargo run --example synthesize_recording

use pournet::data::write_bundle;
use pournet::synthsim::{scenario_suite, simulate_pour, SuiteKind};

fn main() -> pournet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let suite = scenario_suite(SuiteKind::Train, 7, 1)?;
    let sc = &suite.scenarios[0];
    log::info!(
        "scenario {}: container {} ({:.0} mm tall, {:.0} ml), {:.1} s pour from {:.0} mm",
        sc.id,
        sc.geometry.id,
        sc.geometry.height(),
        sc.geometry.capacity(),
        sc.duration,
        sc.pour_height_mm
    );

    let bundle = simulate_pour(sc)?;
    log::info!(
        "audio: {:.1} s at {} Hz, rms {:.4}",
        bundle.audio.duration(),
        bundle.audio.sample_rate,
        bundle.audio.rms()
    );
    log::info!("scale: {} readings at 1 Hz", bundle.scale.len());

    let truth = bundle.truth_ha.as_ref().expect("synthetic bundles carry truth");
    let (t0, ha0) = truth[0];
    let (t1, ha1) = truth[truth.len() - 1];
    log::info!("air column: {ha0:.1} mm at t={t0:.1} -> {ha1:.1} mm at t={t1:.1}");

    let dir = std::env::temp_dir().join("pournet-example-recording");
    write_bundle(&dir, &bundle)?;
    log::info!("bundle written to {}", dir.display());
    Ok(())
}
