//! Trains the small model on the before passes of a synthetic series and
//! saves the weights.
//!
//!     cargo run --release --example quickstart_train -- 300 weights.rvae

use latentwatch::model::ModelConfig;
use latentwatch::training::{generate_synthetic_series, train, SyntheticSpec, TileCorpus, TrainConfig};
use latentwatch::weights::save_weights;

fn main() -> latentwatch::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = args.next().unwrap_or_else(|| "weights.rvae".into());

    let series = generate_synthetic_series(&SyntheticSpec::flood_fixture(0))?;
    let corpus = TileCorpus::from_scenes(&series.scenes[..4])?;
    println!("{} tiles, {} steps", corpus.len(), steps);

    let result = train(
        &ModelConfig::small(),
        &corpus,
        &TrainConfig {
            steps,
            ..Default::default()
        },
    )?;
    for row in result.metrics.iter().step_by((steps / 10).max(1)) {
        println!("step {:>5}  total {:>9.2}  recon {:>9.2}  kl {:>7.2}", row.step, row.total, row.recon, row.kl);
    }
    save_weights(&result.bundle, &out)?;
    println!("wrote {out}");
    Ok(())
}
