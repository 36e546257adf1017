//! Compares cosine-latent scoring with the pixel-space baseline on one
//! synthetic flood series.
//!
//!     cargo run --release --example evaluate -- 500

use latentwatch::evaluation::{evaluate, EvalConfig, LabelMask};
use latentwatch::ingest::{EventClass, SceneContainer};
use latentwatch::model::{ModelConfig, Vae};
use latentwatch::scoring::{change_map, DistanceKind, ScoreConfig};
use latentwatch::training::{generate_synthetic_series, train, SyntheticSpec, TileCorpus, TrainConfig};

fn main() -> latentwatch::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let series = generate_synthetic_series(&SyntheticSpec::flood_fixture(0))?;
    let corpus = TileCorpus::from_scenes(&series.scenes[..4])?;
    let trained = train(&ModelConfig::small(), &corpus, &TrainConfig { steps, ..Default::default() })?.bundle.model;
    let untrained = Vae::build(ModelConfig::small(), 0)?;

    let after = &series.scenes[4];
    let history: Vec<&SceneContainer> = series.scenes[..4].iter().collect();
    let labels = LabelMask {
        change: series.change_mask.clone(),
        after_cloud: None,
        before_cloud: None,
        event_class: EventClass::Flood,
    };
    let runs: [(&str, Option<&Vae<f32>>, DistanceKind); 5] = [
        ("trained", Some(&trained), DistanceKind::CosineLatent),
        ("trained", Some(&trained), DistanceKind::EuclideanLatent),
        ("trained", Some(&trained), DistanceKind::KlLatent),
        ("untrained", Some(&untrained), DistanceKind::CosineLatent),
        ("pixels", None, DistanceKind::CosineInput),
    ];
    println!("{:<10} {:<18} {:>7} {:>7}", "model", "distance", "k=1", "k=3");
    for (name, model, kind) in runs {
        let mut row = format!("{name:<10} {:<18}", kind.name());
        for k in [1, 3] {
            let map = change_map(after, &history, model, &ScoreConfig { kind, k, ..Default::default() })?;
            let report = evaluate(&[(map, labels.clone())], &EvalConfig::default())?;
            row.push_str(&format!(" {:>7.3}", report.classes[0].auprc));
        }
        println!("{row}");
    }
    Ok(())
}
