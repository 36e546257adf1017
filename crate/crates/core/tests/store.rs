//! Latent store persistence: round trip, eviction, torn tails, size.

use std::fs::{self, OpenOptions};

use chrono::{DateTime, Duration, Utc};
use latentwatch::ingest::TileRef;
use latentwatch::model::LatentCode;
use latentwatch::store::*;
use latentwatch::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn t0() -> DateTime<Utc> {
    DateTime::from_timestamp(1_650_000_000, 250_000).unwrap()
}

/// Finite floats drawn from random bit patterns, so every exponent and
/// mantissa bit is exercised.
fn wild_f32(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let v = f32::from_bits(rng.random());
        if v.is_finite() && v.abs() < 20.0 {
            return v;
        }
    }
}

fn record(rng: &mut ChaCha8Rng, series: &str, tile: TileRef, day: i64) -> LatentRecord {
    LatentRecord {
        series: series.into(),
        tile,
        timestamp: t0() + Duration::days(day),
        cloud_fraction: rng.random_range(0.0..1.0),
        nodata_fraction: rng.random_range(0.0..1.0),
        code: LatentCode {
            mu: (0..128).map(|_| wild_f32(rng)).collect(),
            log_var: (0..128).map(|_| wild_f32(rng).clamp(-10.0, 10.0)).collect(),
        },
    }
}

fn bits(r: &LatentRecord) -> Vec<u32> {
    r.code.mu.iter().chain(&r.code.log_var).map(|v| v.to_bits()).collect()
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("s.rvls");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let written: Vec<LatentRecord> = (0..12)
        .map(|i| record(&mut rng, "orbit-α", TileRef { a: i % 3, b: i / 3 }, i as i64))
        .collect();
    {
        let mut store = LatentStore::open(&path, 4).unwrap();
        store.put_all(written.clone()).unwrap();
    }
    let store = LatentStore::open_read_only(&path, 4).unwrap();
    for w in &written {
        let got = store.history(&w.series, w.tile, None, 4);
        let r = got.iter().find(|r| r.timestamp == w.timestamp).expect("record present");
        assert_eq!(bits(r), bits(w));
        assert_eq!(r.cloud_fraction.to_bits(), w.cloud_fraction.to_bits());
        assert_eq!(r.nodata_fraction.to_bits(), w.nodata_fraction.to_bits());
        assert_eq!(**r, *w);
    }
}

#[test]
fn keeps_newest_k_max_per_tile() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("s.rvls");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tile = TileRef { a: 1, b: 2 };
    let mut store = LatentStore::open(&path, 4).unwrap();
    // out of order on purpose
    for day in [3, 0, 5, 1, 4, 2] {
        store.put(record(&mut rng, "s", tile, day)).unwrap();
    }
    let days = |h: Vec<&LatentRecord>| h.iter().map(|r| (r.timestamp - t0()).num_days()).collect::<Vec<_>>();
    assert_eq!(days(store.history("s", tile, None, 10)), vec![5, 4, 3, 2]);
    assert_eq!(days(store.history("s", tile, Some(t0() + Duration::days(4)), 2)), vec![3, 2]);
    assert!(store.history("s", TileRef { a: 0, b: 0 }, None, 4).is_empty());
    assert!(store.history("other", tile, None, 4).is_empty());
    drop(store);

    let store = LatentStore::open_read_only(&path, 4).unwrap();
    assert_eq!(days(store.history("s", tile, None, 10)), vec![5, 4, 3, 2]);
    assert_eq!(store.stats().live_count, 4);
}

#[test]
fn duplicate_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = LatentStore::open(dir.path().join("s.rvls"), 4).unwrap();
    let r = record(&mut rng, "s", TileRef { a: 0, b: 0 }, 0);
    store.put(r.clone()).unwrap();
    assert!(matches!(store.put(r), Err(Error::DuplicateRecord { .. })));
}

#[test]
fn torn_tail_is_recovered() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("s.rvls");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tile = TileRef { a: 0, b: 0 };
    {
        let mut store = LatentStore::open(&path, 4).unwrap();
        for day in 0..3 {
            store.put(record(&mut rng, "s", tile, day)).unwrap();
        }
    }
    let full = fs::metadata(&path).unwrap().len();
    // a crash midway through the third record
    OpenOptions::new().write(true).open(&path).unwrap().set_len(full - 300).unwrap();

    let mut store = LatentStore::open(&path, 4).unwrap();
    assert_eq!(store.history("s", tile, None, 4).len(), 2);
    assert_eq!(store.recovered_bytes(), (record_overhead(1) + 1024 - 300) as u64);
    store.put(record(&mut rng, "s", tile, 9)).unwrap();
    drop(store);
    let store = LatentStore::open_read_only(&path, 4).unwrap();
    assert_eq!(store.history("s", tile, None, 4).len(), 3);
    assert_eq!(store.recovered_bytes(), 0);
}

#[test]
fn corrupt_header_is_rejected() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("s.rvls");
    fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
    assert!(LatentStore::open(&path, 4).is_err());
}

#[test]
fn second_writer_is_locked_out() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("s.rvls");
    let _first = LatentStore::open(&path, 4).unwrap();
    assert!(matches!(LatentStore::open(&path, 4), Err(Error::Locked { .. })));
}

/// 255 tiles with 4 passes each: 1024 payload bytes per record plus the
/// fixed per-record framing and the file header.
#[test]
fn full_scene_history_size() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("s.rvls");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = LatentStore::open(&path, 4).unwrap();
    for day in 0..4 {
        let batch: Vec<LatentRecord> = (0..15)
            .flat_map(|a| (0..17).map(move |b| TileRef { a, b }))
            .map(|tile| record(&mut rng, "orbit", tile, day))
            .collect();
        store.put_all(batch).unwrap();
    }
    let stats = store.stats();
    assert_eq!(stats.live_count, 1020);
    let payload = 255 * 4 * 1024u64;
    assert_eq!(payload, 1_044_480);
    let bytes = fs::metadata(&path).unwrap().len();
    assert_eq!(bytes, STORE_HEADER_LEN + payload + 1020 * record_overhead(5) as u64);
    assert_eq!(stats.bytes + STORE_HEADER_LEN, bytes);
    // framing stays under 5 percent of the payload
    assert!((bytes - payload) as f64 / (payload as f64) < 0.05);
}
