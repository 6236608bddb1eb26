//! Mix pouring audio with ambient noise at exact signal-to-noise ratios
//! and verify the achieved SNR from the component RMS levels.
//!
//!     cargo run --example snr_mixing

use pournet::augment::{mix, noise_factor, NoiseBank};
use pournet::dsp::rms;
use pournet::synthsim::{scenario_suite, simulate_pour, SuiteKind};

fn main() -> pournet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let suite = scenario_suite(SuiteKind::Train, 3, 1)?;
    let clean = simulate_pour(&suite.scenarios[0])?.audio;
    let bank = NoiseBank::synthetic(3);
    log::info!("noise bank entries: {:?}", bank.names());

    for &snr_db in &[-20.0, -10.0, 0.0, 10.0, 20.0] {
        let noise = bank.segment("blend", 0, clean.samples.len())?;
        let noisy = mix(&clean, &noise, snr_db)?;

        // Recover the achieved ratio from the scaled noise component.
        let k = noise_factor(rms(&clean.samples), rms(&noise.samples), snr_db)?;
        let scaled_noise_rms = k * rms(&noise.samples);
        let achieved = 20.0 * (rms(&clean.samples) / scaled_noise_rms).log10();
        log::info!(
            "requested {snr_db:+.0} dB -> achieved {achieved:+.4} dB (mix rms {:.4})",
            noisy.rms()
        );
        assert!((achieved - snr_db).abs() < 0.01);
    }
    Ok(())
}
