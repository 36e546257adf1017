//! Append-only latent history log.
//!
//! File layout (little-endian): `RVLS` magic, `u32` version, then records.
//! Each record is `u32` body length, the body, and a CRC32 of the body.
//! The body holds the series id, tile coordinates, timestamp, the tile's
//! cloud and nodata fractions, and the posterior mean and log-variance.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::Serialize;

use crate::error::{Error, IoContext, Result};
use crate::ingest::TileRef;
use crate::model::LatentCode;
use crate::weights::{Reader, Writer};

pub const STORE_MAGIC: &[u8; 4] = b"RVLS";
pub const STORE_VERSION: u32 = 1;
pub const STORE_HEADER_LEN: u64 = 8;
pub const DEFAULT_K_MAX: usize = 4;

/// Bytes a record occupies in the log beyond its `8 * n` payload, for a
/// series id of `series_len` bytes.
pub fn record_overhead(series_len: usize) -> usize {
    // length + series length + series + a + b + timestamp + two fractions
    // + n + crc
    4 + 2 + series_len + 4 + 4 + 8 + 4 + 4 + 4 + 4
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    pub series: String,
    pub tile: TileRef,
    pub timestamp: DateTime<Utc>,
    pub cloud_fraction: f32,
    pub nodata_fraction: f32,
    pub code: LatentCode,
}

impl LatentRecord {
    fn encode(&self) -> Result<Vec<u8>> {
        self.code.validate()?;
        let series = self.series.as_bytes();
        if series.len() > u16::MAX as usize {
            return Err(Error::Validation("series id longer than 65535 bytes".into()));
        }
        let mut w = Writer::default();
        w.u16(series.len() as u16);
        w.bytes(series);
        w.u32(self.tile.a as u32);
        w.u32(self.tile.b as u32);
        w.i64(self.timestamp.timestamp_micros());
        w.f32s(&[self.cloud_fraction, self.nodata_fraction]);
        w.u32(self.code.dim() as u32);
        w.f32s(&self.code.mu);
        w.f32s(&self.code.log_var);
        Ok(w.buf)
    }

    fn decode(body: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: body, pos: 0 };
        let len = r.u16()? as usize;
        let series = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Malformed("series id is not UTF-8".into()))?;
        let a = r.u32()? as usize;
        let b = r.u32()? as usize;
        let micros = r.i64()?;
        let timestamp = DateTime::from_timestamp_micros(micros)
            .ok_or_else(|| Error::Malformed(format!("timestamp {micros} out of range")))?;
        let fractions = r.f32s(2)?;
        let n = r.u32()? as usize;
        let mu = r.f32s(n)?;
        let log_var = r.f32s(n)?;
        if r.pos != body.len() {
            return Err(Error::Malformed("trailing bytes in record".into()));
        }
        Ok(Self {
            series,
            tile: TileRef { a, b },
            timestamp,
            cloud_fraction: fractions[0],
            nodata_fraction: fractions[1],
            code: LatentCode { mu, log_var },
        })
    }

    fn framed(&self) -> Result<Vec<u8>> {
        let body = self.encode()?;
        let mut out = Vec::with_capacity(body.len() + 8);
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StoreStats {
    /// Records in the log, including evicted ones not yet compacted away.
    pub record_count: usize,
    /// Records currently held in the per-location rings.
    pub live_count: usize,
    /// File length minus the header.
    pub bytes: u64,
    pub per_series: BTreeMap<String, usize>,
}

type Key = (String, usize, usize);

/// Latent history keyed by `(series, a, b)`. Each location keeps at most
/// `k_max` records, oldest evicted first.
///
/// A writable store holds an exclusive lock on the file; read-only handles
/// see the snapshot taken when they were opened or last refreshed.
pub struct LatentStore {
    path: PathBuf,
    file: Option<File>,
    k_max: usize,
    rings: HashMap<Key, Vec<LatentRecord>>,
    record_count: usize,
    bytes: u64,
    recovered_bytes: u64,
}

impl std::fmt::Debug for LatentStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatentStore")
            .field("path", &self.path)
            .field("writable", &self.file.is_some())
            .field("k_max", &self.k_max)
            .field("record_count", &self.record_count)
            .finish()
    }
}

impl LatentStore {
    /// Opens or creates a store for writing. A torn record at the end of the
    /// log is truncated away.
    pub fn open(path: impl AsRef<Path>, k_max: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if k_max == 0 {
            return Err(Error::InvalidConfig("k_max must be at least 1".into()));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .ctx(|| format!("opening {}", path.display()))?;
        match file.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(Error::Locked(path)),
            Err(TryLockError::Error(e)) => return Err(Error::io(format!("locking {}", path.display()), e)),
        }
        let len = file.metadata().ctx(|| format!("reading {}", path.display()))?.len();
        if len == 0 {
            let mut header = STORE_MAGIC.to_vec();
            header.extend_from_slice(&STORE_VERSION.to_le_bytes());
            file.write_all(&header).ctx(|| format!("writing {}", path.display()))?;
            file.sync_data().ctx(|| format!("syncing {}", path.display()))?;
        }
        let mut store = Self {
            path,
            file: None,
            k_max,
            rings: HashMap::new(),
            record_count: 0,
            bytes: 0,
            recovered_bytes: 0,
        };
        let valid_end = store.load(&mut file)?;
        let len = file.metadata().ctx(|| format!("reading {}", store.path.display()))?.len();
        if valid_end < len {
            log::warn!(
                "{}: discarding {} bytes of torn tail",
                store.path.display(),
                len - valid_end
            );
            file.set_len(valid_end).ctx(|| format!("truncating {}", store.path.display()))?;
            file.sync_data().ctx(|| format!("syncing {}", store.path.display()))?;
            store.recovered_bytes = len - valid_end;
        }
        file.seek(SeekFrom::End(0)).ctx(|| format!("seeking {}", store.path.display()))?;
        store.file = Some(file);
        Ok(store)
    }

    /// Opens an existing store without locking it. A torn tail is ignored
    /// but left in place.
    pub fn open_read_only(path: impl AsRef<Path>, k_max: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self {
            path,
            file: None,
            k_max: k_max.max(1),
            rings: HashMap::new(),
            record_count: 0,
            bytes: 0,
            recovered_bytes: 0,
        };
        store.refresh()?;
        Ok(store)
    }

    /// Re-reads the log of a read-only handle.
    pub fn refresh(&mut self) -> Result<()> {
        if self.file.is_some() {
            return Ok(());
        }
        let mut file = File::open(&self.path).ctx(|| format!("opening {}", self.path.display()))?;
        self.rings.clear();
        self.record_count = 0;
        self.load(&mut file)?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Bytes dropped from a torn tail when the store was opened.
    pub fn recovered_bytes(&self) -> u64 {
        self.recovered_bytes
    }

    /// Reads the whole log into the rings and returns the offset just past
    /// the last intact record.
    fn load(&mut self, file: &mut File) -> Result<u64> {
        let mut buf = Vec::new();
        file.seek(SeekFrom::Start(0)).ctx(|| format!("seeking {}", self.path.display()))?;
        file.read_to_end(&mut buf).ctx(|| format!("reading {}", self.path.display()))?;
        if buf.len() < STORE_HEADER_LEN as usize || &buf[..4] != STORE_MAGIC {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected: "RVLS",
            });
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != STORE_VERSION {
            return Err(Error::Version {
                found: version,
                supported: STORE_VERSION,
            });
        }
        let mut pos = STORE_HEADER_LEN as usize;
        while let Some((record, next)) = parse_record(&buf, pos) {
            self.record_count += 1;
            self.index(record);
            pos = next;
        }
        self.bytes = pos as u64 - STORE_HEADER_LEN;
        Ok(pos as u64)
    }

    /// Inserts into the ring in timestamp order, evicting the oldest entry
    /// once the ring exceeds `k_max`.
    fn index(&mut self, record: LatentRecord) {
        let key = (record.series.clone(), record.tile.a, record.tile.b);
        let ring = self.rings.entry(key).or_default();
        let at = ring.partition_point(|r| r.timestamp < record.timestamp);
        ring.insert(at, record);
        if ring.len() > self.k_max {
            ring.remove(0);
        }
    }

    /// Appends `record` and flushes it to disk.
    pub fn put(&mut self, record: LatentRecord) -> Result<()> {
        self.append(record)?;
        self.sync()?;
        self.maybe_compact()
    }

    /// Appends many records with a single flush at the end.
    pub fn put_all(&mut self, records: impl IntoIterator<Item = LatentRecord>) -> Result<usize> {
        let mut n = 0;
        let mut outcome = Ok(());
        for record in records {
            if let Err(e) = self.append(record) {
                outcome = Err(e);
                break;
            }
            n += 1;
        }
        self.sync()?;
        outcome?;
        self.maybe_compact()?;
        Ok(n)
    }

    fn sync(&mut self) -> Result<()> {
        if let Some(file) = self.file.as_mut() {
            file.sync_data().ctx(|| format!("syncing {}", self.path.display()))?;
        }
        Ok(())
    }

    fn maybe_compact(&mut self) -> Result<()> {
        if self.record_count > 2 * self.live_count() {
            self.compact()?;
        }
        Ok(())
    }

    fn append(&mut self, record: LatentRecord) -> Result<()> {
        let key = (record.series.clone(), record.tile.a, record.tile.b);
        if self
            .rings
            .get(&key)
            .is_some_and(|ring| ring.iter().any(|r| r.timestamp == record.timestamp))
        {
            return Err(Error::DuplicateRecord {
                series: record.series,
                a: record.tile.a,
                b: record.tile.b,
                timestamp: record.timestamp.to_rfc3339(),
            });
        }
        let framed = record.framed()?;
        let file = self
            .file
            .as_mut()
            .ok_or_else(|| Error::Validation("store was opened read-only".into()))?;
        file.write_all(&framed).ctx(|| format!("appending to {}", self.path.display()))?;
        self.bytes += framed.len() as u64;
        self.record_count += 1;
        self.index(record);
        Ok(())
    }

    fn live_count(&self) -> usize {
        self.rings.values().map(Vec::len).sum()
    }

    /// Rewrites the log with only the live records.
    pub fn compact(&mut self) -> Result<()> {
        let Some(file) = self.file.as_mut() else {
            return Err(Error::Validation("store was opened read-only".into()));
        };
        let mut keys: Vec<&Key> = self.rings.keys().collect();
        keys.sort();
        let mut out = STORE_MAGIC.to_vec();
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        for key in keys {
            for record in &self.rings[key] {
                out.extend_from_slice(&record.framed()?);
            }
        }
        // Rewriting in place keeps the lock held on the same handle.
        file.set_len(0).ctx(|| format!("truncating {}", self.path.display()))?;
        file.seek(SeekFrom::Start(0)).ctx(|| format!("seeking {}", self.path.display()))?;
        file.write_all(&out).ctx(|| format!("writing {}", self.path.display()))?;
        file.sync_data().ctx(|| format!("syncing {}", self.path.display()))?;
        self.record_count = self.live_count();
        self.bytes = out.len() as u64 - STORE_HEADER_LEN;
        Ok(())
    }

    /// Up to `k` records for `(series, tile)`, newest first, strictly older
    /// than `before` when given.
    pub fn history(&self, series: &str, tile: TileRef, before: Option<DateTime<Utc>>, k: usize) -> Vec<&LatentRecord> {
        let Some(ring) = self.rings.get(&(series.to_string(), tile.a, tile.b)) else {
            return Vec::new();
        };
        ring.iter()
            .rev()
            .filter(|r| before.is_none_or(|t| r.timestamp < t))
            .take(k)
            .collect()
    }

    pub fn stats(&self) -> StoreStats {
        let mut per_series = BTreeMap::new();
        for ((series, _, _), ring) in &self.rings {
            *per_series.entry(series.clone()).or_insert(0) += ring.len();
        }
        StoreStats {
            record_count: self.record_count,
            live_count: self.live_count(),
            bytes: self.bytes,
            per_series,
        }
    }
}

fn parse_record(buf: &[u8], pos: usize) -> Option<(LatentRecord, usize)> {
    let len_bytes = buf.get(pos..pos + 4)?;
    let len = u32::from_le_bytes(len_bytes.try_into().ok()?) as usize;
    let body = buf.get(pos + 4..pos + 4 + len)?;
    let crc = buf.get(pos + 4 + len..pos + 8 + len)?;
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().ok()?) {
        return None;
    }
    let record = LatentRecord::decode(body).ok()?;
    Some((record, pos + 8 + len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn record(series: &str, a: usize, b: usize, day: i64, n: usize) -> LatentRecord {
        let t0 = DateTime::from_timestamp(1_600_000_000, 0).unwrap();
        LatentRecord {
            series: series.into(),
            tile: TileRef { a, b },
            timestamp: t0 + Duration::days(day),
            cloud_fraction: 0.0,
            nodata_fraction: 0.0,
            code: LatentCode {
                mu: (0..n).map(|i| (i as f32 + day as f32) * 0.1).collect(),
                log_var: vec![-1.0; n],
            },
        }
    }

    #[test]
    fn empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let store = LatentStore::open(dir.path().join("s.rvls"), 4).unwrap();
        assert!(store.history("x", TileRef { a: 0, b: 0 }, None, 3).is_empty());
        assert_eq!(store.stats(), StoreStats::default());
    }

    #[test]
    fn ring_keeps_newest() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = LatentStore::open(dir.path().join("s.rvls"), 4).unwrap();
        for day in 0..5 {
            store.put(record("x", 1, 2, day, 4)).unwrap();
        }
        let h = store.history("x", TileRef { a: 1, b: 2 }, None, 10);
        let days: Vec<_> = h.iter().map(|r| r.code.mu[0]).collect();
        assert_eq!(days, vec![0.4, 0.3, 0.2, 0.1]);
        assert_eq!(store.history("x", TileRef { a: 1, b: 2 }, None, 2).len(), 2);
    }

    #[test]
    fn three_stored_five_requested() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = LatentStore::open(dir.path().join("s.rvls"), 4).unwrap();
        for day in 0..3 {
            store.put(record("x", 0, 0, day, 2)).unwrap();
        }
        assert_eq!(store.history("x", TileRef { a: 0, b: 0 }, None, 5).len(), 3);
        let cut = record("x", 0, 0, 2, 2).timestamp;
        assert_eq!(store.history("x", TileRef { a: 0, b: 0 }, Some(cut), 5).len(), 2);
    }

    #[test]
    fn duplicates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = LatentStore::open(dir.path().join("s.rvls"), 4).unwrap();
        store.put(record("x", 0, 0, 1, 2)).unwrap();
        assert!(matches!(store.put(record("x", 0, 0, 1, 2)), Err(Error::DuplicateRecord { .. })));
        store.put(record("x", 0, 1, 1, 2)).unwrap();
    }

    #[test]
    fn reopen_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.rvls");
        let mut store = LatentStore::open(&path, 4).unwrap();
        let records: Vec<_> = (0..3).map(|d| record("x", 3, 1, d, 8)).collect();
        store.put_all(records.clone()).unwrap();
        drop(store);
        let store = LatentStore::open(&path, 4).unwrap();
        let h = store.history("x", TileRef { a: 3, b: 1 }, None, 4);
        assert_eq!(h[2], &records[0]);
        assert_eq!(h[0], &records[2]);
        assert_eq!(store.stats().bytes, fs::metadata(&path).unwrap().len() - STORE_HEADER_LEN);
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.rvls");
        let _store = LatentStore::open(&path, 4).unwrap();
        assert!(matches!(LatentStore::open(&path, 4), Err(Error::Locked(_))));
        assert!(LatentStore::open_read_only(&path, 4).is_ok());
    }

    #[test]
    fn compaction_drops_evicted_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.rvls");
        let mut store = LatentStore::open(&path, 1).unwrap();
        for day in 0..6 {
            store.put(record("x", 0, 0, day, 4)).unwrap();
        }
        let stats = store.stats();
        assert!(stats.record_count <= 2 * stats.live_count);
        assert_eq!(stats.bytes, fs::metadata(&path).unwrap().len() - STORE_HEADER_LEN);
        drop(store);
        let store = LatentStore::open(&path, 1).unwrap();
        assert_eq!(store.history("x", TileRef { a: 0, b: 0 }, None, 4)[0].code.mu[0], 0.5);
    }
}
