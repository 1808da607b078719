//! Battery and storage lifetime of a field recorder under each screening
//! variant, with and without idle draw.

use tinychirp::budget::{estimate_lifetime, DeploymentProfile, IdleAccounting};
use tinychirp::nn::ModelArch;
use tinychirp::pipeline::Variant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for idle in [IdleAccounting::ActiveOnly, IdleAccounting::Continuous] {
        println!("idle accounting: {idle:?}");
        for variant in Variant::ALL {
            let profile = DeploymentProfile {
                variant,
                model: variant.uses_model().then_some(ModelArch::TransformerTime),
                store_fraction: if variant == Variant::SkipBaseline { 0.3 } else { 0.1 },
                idle,
                bypass_fraction: if variant == Variant::PowerSaving { 0.05 } else { 0.0 },
                ..DeploymentProfile::default()
            };
            let est = estimate_lifetime(&profile)?;
            println!(
                "  {:<14} {:>7.1} mJ/day, battery {:>7.1} d, storage {:>6.1} d -> {:.1} d ({})",
                variant.as_str(),
                est.daily_energy_mj,
                est.battery_days,
                est.storage_days,
                est.lifetime_days,
                est.limiting_factor
            );
        }
    }

    let rate = DeploymentProfile::calibrated_record_rate(128e9, 14.0);
    let est = estimate_lifetime(&DeploymentProfile { record_rate_bytes_per_s: rate, ..DeploymentProfile::default() })?;
    println!("card that lasts 14 days storing everything lasts {:.0} days storing 10%", est.storage_days);
    Ok(())
}
