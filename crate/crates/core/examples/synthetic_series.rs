//! Generates the seeded flood series and writes each pass as a scene
//! directory.
//!
//!     cargo run --release --example synthetic_series -- /tmp/flood 3

use latentwatch::ingest::save_scene;
use latentwatch::training::{generate_synthetic_series, SyntheticSpec};

fn main() -> latentwatch::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "flood_series".into());
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let series = generate_synthetic_series(&SyntheticSpec::flood_fixture(seed))?;
    for scene in &series.scenes {
        let dir = std::path::Path::new(&out).join(&scene.scene_id);
        save_scene(scene, &dir)?;
        println!("{}  {}  {}x{}", dir.display(), scene.timestamp.date_naive(), scene.width, scene.height);
    }
    let r = series.change_region.expect("fixture injects a change");
    println!(
        "flooded rows {}..{} cols {}..{} ({:.1}% of the scene), {} darkened patches on the last before pass",
        r.y0,
        r.y1,
        r.x0,
        r.x1,
        100.0 * series.change_mask.fraction(),
        series.nuisance_regions.len()
    );
    Ok(())
}
