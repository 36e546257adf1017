//! Simulates a crash in the middle of an append and reopens the latent
//! store.

use std::fs::OpenOptions;

use chrono::{Duration, Utc};
use latentwatch::ingest::TileRef;
use latentwatch::model::LatentCode;
use latentwatch::store::{LatentRecord, LatentStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::temp_dir().join("latentwatch_recovery.rvls");
    std::fs::remove_file(&path).ok();
    let tile = TileRef { a: 3, b: 7 };
    let now = Utc::now();
    {
        let mut store = LatentStore::open(&path, 4)?;
        for day in 0..6 {
            store.put(LatentRecord {
                series: "orbit".into(),
                tile,
                timestamp: now + Duration::days(5 * day),
                cloud_fraction: 0.0,
                nodata_fraction: 0.0,
                code: LatentCode {
                    mu: vec![day as f32; 128],
                    log_var: vec![0.0; 128],
                },
            })?;
        }
        let stats = store.stats();
        println!("wrote 6 passes, {} kept in memory, {} in the log", stats.live_count, stats.record_count);
    }
    let len = std::fs::metadata(&path)?.len();
    OpenOptions::new().write(true).open(&path)?.set_len(len - 200)?;
    println!("cut the last 200 bytes off the log");

    let store = LatentStore::open(&path, 4)?;
    println!("reopened: {} bytes of torn tail discarded", store.recovered_bytes());
    for r in store.history("orbit", tile, None, 4) {
        println!("  {}  mu[0] = {}", r.timestamp.date_naive(), r.code.mu[0]);
    }
    Ok(())
}
