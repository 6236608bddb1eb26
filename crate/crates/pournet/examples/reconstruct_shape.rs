//! Reconstruct a container's wall profile from the poured-mass series and
//! the liquid height trace, then compare the quadratic fit against the
//! true geometry.
//!
//!     cargo run --example reconstruct_shape

use pournet::shape::{evaluate_profile, fit_profile, fit_volume_ml, radius_samples, ShapeConfig};
use pournet::synthsim::{scenario_suite, PourSim, SuiteKind};

fn main() -> pournet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let suite = scenario_suite(SuiteKind::Shape, 31, 1)?;
    let sc = suite
        .scenarios
        .iter()
        .find(|s| s.geometry.id == "shape_frustum")
        .expect("shape suite has the frustum");
    let sim = PourSim::new(sc)?;

    // Oracle inputs: true landed mass at 500 Hz and true heights at the
    // 12 Hz decision cadence, the same cadences a live run produces.
    let poured: Vec<f64> = (0..(sc.duration * 500.0) as usize)
        .map(|i| sim.landed_mass(i as f64 / 500.0))
        .collect();
    let trace: Vec<(f64, f64)> = (12..(sc.duration * 12.0) as usize)
        .map(|k| {
            let t = k as f64 / 12.0;
            (t, sim.truth_ha(t))
        })
        .collect();

    let set = radius_samples(
        &poured,
        &trace,
        sc.liquid_density,
        sc.geometry.height(),
        &ShapeConfig::default(),
    )?;
    log::info!("{} radius samples, {} intervals dropped", set.samples.len(), set.dropped);

    let profile = fit_profile(&set.samples)?;
    let (lo, hi) = profile.range();
    log::info!(
        "quadratic r(h) = {:.2e} h^2 + {:.4} h + {:.2} over {:.0}..{:.0} mm",
        profile.quad[0],
        profile.quad[1],
        profile.quad[2],
        lo,
        hi
    );

    for band in evaluate_profile(&profile, &sc.geometry, 4) {
        log::info!(
            "band {:>3.0}..{:>3.0} mm: mean |r_fit - r_true| = {:.3} mm",
            band.h_lo,
            band.h_hi,
            band.mean_abs_mm
        );
    }

    let volume = fit_volume_ml(&profile, lo, hi);
    log::info!(
        "volume from fit: {:.1} ml; true capacity between those heights: {:.1} ml",
        volume,
        sc.geometry.volume_below(hi) - sc.geometry.volume_below(lo)
    );
    Ok(())
}
