//! Train the force/torque-only variant on a small synthetic clip set and
//! watch the validation metrics move. A few seconds end to end; the full
//! audio variants live behind the `pournet train` command.
//!
//!     cargo run --example train_small

use pournet::augment::{build_augmented_set, AugmentConfig, NoiseBank, SnrLevel};
use pournet::data::{fit_calibration, interpolate_scale, label_recording};
use pournet::model::{frac_within, slice_abs_errors, train, TrainConfig, Variant};
use pournet::synthsim::{scenario_suite, simulate_pour, SuiteKind};

fn main() -> pournet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let suite = scenario_suite(SuiteKind::Train, 13, 2)?;
    let mut recordings = Vec::new();
    for sc in &suite.scenarios {
        let bundle = simulate_pour(sc)?;
        let mut pairs = Vec::new();
        for &(t, ha) in bundle.truth_ha.as_ref().expect("synthetic truth") {
            let (weight, clamped) = interpolate_scale(&bundle.scale, t)?;
            if !clamped {
                pairs.push((weight, ha));
            }
        }
        recordings.push(label_recording(&bundle, &fit_calibration(&pairs, 3)?)?);
    }

    let bank = NoiseBank::synthetic(13);
    let clips = build_augmented_set(
        &recordings,
        &bank,
        &[SnrLevel::Clean],
        &AugmentConfig { clips_per_second: 0.15, seed: 13 },
    )?;
    log::info!("{} clips from {} recordings", clips.len(), recordings.len());

    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        seed: 13,
        ..TrainConfig::default()
    };
    let report = train(&clips, Variant::Ft, &cfg)?;
    for row in &report.log {
        log::info!(
            "epoch {}: train {:.2}, val {:.2}, val <5mm {:.0}%",
            row.epoch,
            row.train_loss,
            row.val_loss,
            row.val_frac_under_5mm * 100.0
        );
    }

    let refs: Vec<&_> = clips.iter().collect();
    let errors = slice_abs_errors(&report.model, &refs)?;
    log::info!(
        "best epoch {}: whole-set slices below 5 mm: {:.0}%",
        report.best_epoch,
        frac_within(&errors, 5.0) * 100.0
    );
    Ok(())
}
