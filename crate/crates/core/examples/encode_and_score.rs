//! Encodes four before passes into a latent store, then scores the after
//! pass against the stored history and prints the change map.
//!
//!     cargo run --release --example encode_and_score -- weights.rvae
//!
//! Without a weight file an untrained model is used, which still runs the
//! whole pipeline but separates change poorly.

use latentwatch::model::{ModelConfig, Vae};
use latentwatch::scoring::{change_map_from_store, encode_scene, ScoreConfig};
use latentwatch::store::{LatentRecord, LatentStore};
use latentwatch::training::{generate_synthetic_series, SyntheticSpec};
use latentwatch::weights::load_weights;

fn main() -> latentwatch::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_weights(path)?.model,
        None => Vae::build(ModelConfig::small(), 0)?,
    };
    let series = generate_synthetic_series(&SyntheticSpec::flood_fixture(0))?;
    let dir = std::env::temp_dir().join("latentwatch_encode_and_score");
    std::fs::create_dir_all(&dir).ok();
    let path = dir.join("flood0.rvls");
    std::fs::remove_file(&path).ok();

    let mut store = LatentStore::open(&path, 4)?;
    for scene in &series.scenes[..4] {
        let records = encode_scene(&model, scene)?.into_iter().map(|(tile, code, meta)| LatentRecord {
            series: scene.series_id.clone(),
            tile,
            timestamp: scene.timestamp,
            cloud_fraction: meta.cloud_fraction as f32,
            nodata_fraction: meta.nodata_fraction as f32,
            code,
        });
        let n = store.put_all(records)?;
        println!("{}: {n} codes stored", scene.scene_id);
    }
    let stats = store.stats();
    println!("store: {} records, {} bytes", stats.live_count, stats.bytes);

    let after = &series.scenes[4];
    let map = change_map_from_store(after, &model, &store, &ScoreConfig::default())?;
    let max = map.scored().map(|(_, s)| s).fold(f64::MIN_POSITIVE, f64::max);
    println!("\n{} ({} k={}), # marks the injected flood", map.scene_id, map.kind, map.k);
    let shades = [' ', '.', ':', '-', '=', '+', '*', '%', '@'];
    for a in 0..map.grid.rows {
        let mut line = String::new();
        for b in 0..map.grid.cols {
            let c = match map.scores[a * map.grid.cols + b] {
                Some(s) => shades[((s / max) * (shades.len() - 1) as f64).round() as usize],
                None => 'x',
            };
            line.push(c);
            line.push(c);
        }
        line.push_str("   ");
        for b in 0..map.grid.cols {
            let changed = series.change_mask.window_count(a * 32, b * 32, 32) > 512;
            line.push_str(if changed { "##" } else { ".." });
        }
        println!("{line}");
    }
    Ok(())
}
