//! Picks which tiles to downlink under a byte budget, highest change score
//! first.

use latentwatch::cli::plan_downlink;
use latentwatch::scoring::{change_map, DistanceKind, ScoreConfig};
use latentwatch::training::{generate_synthetic_series, SyntheticSpec};

fn main() -> latentwatch::Result<()> {
    let series = generate_synthetic_series(&SyntheticSpec::flood_fixture(1))?;
    let history: Vec<_> = series.scenes[..4].iter().collect();
    let config = ScoreConfig {
        kind: DistanceKind::CosineInput,
        ..Default::default()
    };
    let map = change_map(&series.scenes[4], &history, None, &config)?;

    // room for 24 tiles of 20 KiB each
    let plan = plan_downlink(&[map], 24 * 20 * 1024, 20 * 1024);
    println!(
        "{} of {} tiles selected, {} of {} bytes",
        plan.selected.len(),
        plan.candidates.len(),
        plan.selected_bytes,
        plan.budget_bytes
    );
    let hits = plan
        .selected
        .iter()
        .filter(|t| series.change_mask.window_count(t.a * 32, t.b * 32, 32) > 512)
        .count();
    for t in plan.selected.iter().take(8) {
        println!("  tile ({:>2},{:>2})  score {:.4}", t.a, t.b, t.score);
    }
    println!("{hits} of the selected tiles are flooded");
    Ok(())
}
