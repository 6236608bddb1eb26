//! Watch the physics the estimator feeds on: as the container fills, the
//! air column shortens and its quarter-wave resonance climbs. Track the
//! spectrogram's peak bin through a pour and compare it with the pipe
//! model evaluated at the true air column.
//!
//!     cargo run --example resonance_sweep

use pournet::dsp::stft;
use pournet::synthsim::{resonance_frequency, scenario_suite, simulate_pour, PourSim, SuiteKind};

fn main() -> pournet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let suite = scenario_suite(SuiteKind::Train, 17, 1)?;
    let sc = &suite.scenarios[0];
    let sim = PourSim::new(sc)?;
    let bundle = simulate_pour(sc)?;
    let spec = stft(&bundle.audio)?;
    log::info!(
        "{}: {} frames x {} bins, mouth {:.0} mm",
        sc.id,
        spec.frames(),
        spec.bins(),
        sc.geometry.mouth_diameter()
    );

    // Peak-energy bin per frame, sampled once a second mid-pour.
    let frames_per_second = 62; // 16 kHz / 256 hop
    for second in 1..(sc.duration as usize).saturating_sub(1) {
        let frame = spec.frame(second * frames_per_second);
        let peak = frame
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(bin, _)| bin)
            .unwrap_or(0);
        let ha = sim.truth_ha(second as f64);
        let modeled = resonance_frequency(ha, sc.geometry.mouth_diameter())?;
        log::info!(
            "t={second:>2} s: air column {:>5.1} mm, peak {:>6.0} Hz, pipe model {:>6.0} Hz",
            ha,
            spec.bin_frequency(peak),
            modeled
        );
    }
    Ok(())
}
