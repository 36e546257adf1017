//! Finite-difference check of the assembled model, plus a deliberately
//! broken backward pass that the check must catch.

use latentwatch::model::{BackwardFault, ModelConfig};
use latentwatch::training::verify_gradients;

fn main() -> latentwatch::Result<()> {
    for (name, config) in [("small", ModelConfig::small()), ("medium", ModelConfig::medium())] {
        let report = verify_gradients(&config, 0, BackwardFault::None)?;
        println!("{name}: max relative error {:.2e} (tolerance {:.0e}) {}", report.max_relative_error, report.tolerance,
            if report.passed { "ok" } else { "FAILED" });
    }
    for fault in [BackwardFault::BatchNormNaive, BackwardFault::ConvSignFlip] {
        let report = verify_gradients(&ModelConfig::small(), 0, fault)?;
        let worst = report.worst(1);
        println!(
            "{fault:?}: {} (worst group {})",
            if report.passed { "missed" } else { "caught" },
            worst.first().map_or("-", |g| g.name.as_str())
        );
    }
    Ok(())
}
