//! Scene containers, band normalisation and tiling.
//!
//! A scene lives in a directory:
//!
//! * `meta.json`: scene id, series id, RFC 3339 timestamp, width, height,
//!   band count, resolution, optional per-band `band_max`, optional event
//!   role and event class.
//! * `bands.raw`: band-sequential little-endian `u16` samples.
//! * `cloud.mask`, `nodata.mask`, `change.mask` (all optional): one bit per
//!   pixel in row-major order, most significant bit first, final byte
//!   zero-padded.

use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::tensor::Tensor;

pub const TILE_SIZE: usize = 32;
pub const DEFAULT_BANDS: usize = 10;
pub const DEFAULT_BAND_MAX: f32 = 10_000.0;
pub const SCENE_FORMAT: &str = "latentwatch-scene";
pub const SCENE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventRole {
    Before,
    After,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventClass {
    Landslide,
    Flood,
    Hurricane,
    Fire,
}

impl EventClass {
    pub fn name(self) -> &'static str {
        match self {
            EventClass::Landslide => "landslide",
            EventClass::Flood => "flood",
            EventClass::Hurricane => "hurricane",
            EventClass::Fire => "fire",
        }
    }
}

/// Row-major boolean raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// Set pixels inside the `size x size` window at `(y0, x0)`.
    pub fn window_count(&self, y0: usize, x0: usize, size: usize) -> usize {
        (y0..y0 + size)
            .map(|y| self.bits[y * self.width + x0..y * self.width + x0 + size].iter().filter(|&&b| b).count())
            .sum()
    }

    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            out[i / 8] |= 0x80 >> (i % 8);
        }
        out
    }

    pub fn unpack(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let n = width * height;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Malformed(format!(
                "packed mask has {} bytes, expected {} for {width}x{height}",
                bytes.len(),
                n.div_ceil(8)
            )));
        }
        let bits = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(Self { width, height, bits })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SceneMeta {
    format: String,
    version: u32,
    scene_id: String,
    #[serde(default)]
    series_id: Option<String>,
    timestamp: DateTime<Utc>,
    width: usize,
    height: usize,
    bands: usize,
    #[serde(default = "default_resolution")]
    resolution_m: f64,
    #[serde(default)]
    band_max: Option<Vec<f32>>,
    #[serde(default)]
    event_role: Option<EventRole>,
    #[serde(default)]
    event_class: Option<EventClass>,
}

fn default_resolution() -> f64 {
    10.0
}

/// One georeferenced multi-band acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneContainer {
    pub scene_id: String,
    /// Location key shared by every pass over the same area.
    pub series_id: String,
    pub timestamp: DateTime<Utc>,
    pub width: usize,
    pub height: usize,
    pub resolution_m: f64,
    /// Raw sensor values per band, row-major.
    pub bands: Vec<Vec<f32>>,
    pub band_max: Vec<f32>,
    pub cloud_mask: Option<Mask>,
    pub nodata_mask: Mask,
    pub event_role: Option<EventRole>,
    pub event_class: Option<EventClass>,
    /// Ground-truth change raster, when the scene carries labels.
    pub change_mask: Option<Mask>,
}

impl SceneContainer {
    pub fn new(
        scene_id: impl Into<String>,
        series_id: impl Into<String>,
        timestamp: DateTime<Utc>,
        width: usize,
        height: usize,
        bands: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let scene = Self {
            scene_id: scene_id.into(),
            series_id: series_id.into(),
            timestamp,
            width,
            height,
            resolution_m: 10.0,
            band_max: vec![DEFAULT_BAND_MAX; bands.len()],
            bands,
            cloud_mask: None,
            nodata_mask: Mask::empty(width, height),
            event_role: None,
            event_class: None,
            change_mask: None,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.bands.is_empty() {
            return Err(Error::Validation(format!("scene `{}` has no bands", self.scene_id)));
        }
        if let Some(i) = self.bands.iter().position(|b| b.len() != n) {
            return Err(Error::Validation(format!(
                "scene `{}`: band {i} has {} samples, expected {n}",
                self.scene_id,
                self.bands[i].len()
            )));
        }
        if self.band_max.len() != self.bands.len() || self.band_max.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Validation(format!(
                "scene `{}`: band_max needs one positive value per band",
                self.scene_id
            )));
        }
        let masks = [Some(&self.nodata_mask), self.cloud_mask.as_ref(), self.change_mask.as_ref()];
        if masks.into_iter().flatten().any(|m| (m.width, m.height) != (self.width, self.height)) {
            return Err(Error::Validation(format!("scene `{}`: mask dimensions differ from raster", self.scene_id)));
        }
        Ok(())
    }

    pub fn cloud_fraction(&self) -> Option<f64> {
        self.cloud_mask.as_ref().map(Mask::fraction)
    }
}

/// `clamp(ln(1 + v) / ln(1 + band_max), 0, 1)`.
pub fn normalize(raw_value: f32, band_max: f32) -> Result<f32> {
    if !(raw_value >= 0.0) {
        return Err(Error::Validation(format!("raw value {raw_value} is negative or NaN")));
    }
    if !(band_max > 0.0) {
        return Err(Error::Validation(format!("band_max {band_max} must be positive")));
    }
    Ok(normalize_unchecked(raw_value, band_max))
}

#[inline]
fn normalize_unchecked(raw_value: f32, band_max: f32) -> f32 {
    ((raw_value as f64).ln_1p() / (band_max as f64).ln_1p()).clamp(0.0, 1.0) as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileRef {
    /// Grid row.
    pub a: usize,
    /// Grid column.
    pub b: usize,
}

impl TileRef {
    pub fn pixel_origin(self) -> (usize, usize) {
        (self.a * TILE_SIZE, self.b * TILE_SIZE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub tile_size: usize,
}

impl TileGrid {
    /// Non-overlapping grid; partial edge tiles are dropped.
    pub fn for_dims(width: usize, height: usize) -> Result<Self> {
        if width < TILE_SIZE || height < TILE_SIZE {
            return Err(Error::Validation(format!(
                "scene of {width}x{height} px is smaller than one {TILE_SIZE}x{TILE_SIZE} tile"
            )));
        }
        Ok(Self {
            rows: height / TILE_SIZE,
            cols: width / TILE_SIZE,
            tile_size: TILE_SIZE,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tiles in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = TileRef> + '_ {
        (0..self.rows).flat_map(move |a| (0..self.cols).map(move |b| TileRef { a, b }))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TileMeta {
    pub cloud_fraction: f64,
    pub nodata_fraction: f64,
}

pub fn tile_meta(scene: &SceneContainer, tile: TileRef) -> TileMeta {
    let (y0, x0) = tile.pixel_origin();
    let area = (TILE_SIZE * TILE_SIZE) as f64;
    TileMeta {
        cloud_fraction: scene
            .cloud_mask
            .as_ref()
            .map_or(0.0, |m| m.window_count(y0, x0, TILE_SIZE) as f64 / area),
        nodata_fraction: scene.nodata_mask.window_count(y0, x0, TILE_SIZE) as f64 / area,
    }
}

/// Normalised `(1, C, 32, 32)` window of the scene.
pub fn extract_tile(scene: &SceneContainer, tile: TileRef) -> Tensor<f32> {
    let (y0, x0) = tile.pixel_origin();
    let mut data = Vec::with_capacity(scene.band_count() * TILE_SIZE * TILE_SIZE);
    for (band, &max) in scene.bands.iter().zip(&scene.band_max) {
        for y in y0..y0 + TILE_SIZE {
            let row = &band[y * scene.width + x0..y * scene.width + x0 + TILE_SIZE];
            data.extend(row.iter().map(|&v| normalize_unchecked(v.max(0.0), max)));
        }
    }
    Tensor::from_vec([1, scene.band_count(), TILE_SIZE, TILE_SIZE], data).expect("tile size is fixed")
}

#[derive(Clone, Debug)]
pub struct Tile {
    pub at: TileRef,
    pub data: Tensor<f32>,
    pub meta: TileMeta,
}

/// A scene cut into its tile grid; tiles are produced lazily.
pub struct TiledScene<'a> {
    pub scene: &'a SceneContainer,
    pub grid: TileGrid,
}

impl<'a> TiledScene<'a> {
    pub fn tiles(&self) -> impl Iterator<Item = Tile> + '_ {
        self.grid.iter().map(move |at| Tile {
            at,
            data: extract_tile(self.scene, at),
            meta: tile_meta(self.scene, at),
        })
    }

    pub fn metas(&self) -> Vec<TileMeta> {
        self.grid.iter().map(|at| tile_meta(self.scene, at)).collect()
    }
}

pub fn tile_scene(scene: &SceneContainer) -> Result<TiledScene<'_>> {
    if let Some(v) = scene.bands.iter().flatten().find(|v| !(**v >= 0.0)) {
        return Err(Error::Validation(format!("scene `{}` holds negative sample {v}", scene.scene_id)));
    }
    Ok(TiledScene {
        scene,
        grid: TileGrid::for_dims(scene.width, scene.height)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Screening {
    Accept,
    Reject,
}

/// Rejects a scene whose cloud cover strictly exceeds `max_cloud_fraction`.
pub fn screen_scene(scene: &SceneContainer, max_cloud_fraction: f64) -> Screening {
    match scene.cloud_fraction() {
        None => {
            log::warn!("scene `{}` has no cloud mask; accepting unscreened", scene.scene_id);
            Screening::Accept
        }
        Some(f) if f > max_cloud_fraction => Screening::Reject,
        Some(_) => Screening::Accept,
    }
}

const META_FILE: &str = "meta.json";
const BANDS_FILE: &str = "bands.raw";
const CLOUD_FILE: &str = "cloud.mask";
const NODATA_FILE: &str = "nodata.mask";
const CHANGE_FILE: &str = "change.mask";

pub fn save_scene(scene: &SceneContainer, dir: impl AsRef<Path>) -> Result<()> {
    scene.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    let default_max = scene.band_max.iter().all(|&m| m == DEFAULT_BAND_MAX);
    let meta = SceneMeta {
        format: SCENE_FORMAT.into(),
        version: SCENE_VERSION,
        scene_id: scene.scene_id.clone(),
        series_id: Some(scene.series_id.clone()),
        timestamp: scene.timestamp,
        width: scene.width,
        height: scene.height,
        bands: scene.band_count(),
        resolution_m: scene.resolution_m,
        band_max: (!default_max).then(|| scene.band_max.clone()),
        event_role: scene.event_role,
        event_class: scene.event_class,
    };
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).ctx(|| format!("writing {}", meta_path.display()))?;

    let mut raw = Vec::with_capacity(scene.band_count() * scene.width * scene.height * 2);
    for band in &scene.bands {
        for &v in band {
            raw.extend_from_slice(&(v.round().clamp(0.0, u16::MAX as f32) as u16).to_le_bytes());
        }
    }
    let bands_path = dir.join(BANDS_FILE);
    fs::write(&bands_path, raw).ctx(|| format!("writing {}", bands_path.display()))?;

    let masks = [
        (CLOUD_FILE, scene.cloud_mask.as_ref()),
        (NODATA_FILE, Some(&scene.nodata_mask)),
        (CHANGE_FILE, scene.change_mask.as_ref()),
    ];
    for (name, mask) in masks {
        let path = dir.join(name);
        match mask {
            Some(m) => fs::write(&path, m.pack()).ctx(|| format!("writing {}", path.display()))?,
            None if path.exists() => fs::remove_file(&path).ctx(|| format!("removing {}", path.display()))?,
            None => {}
        }
    }
    Ok(())
}

fn read_mask(dir: &Path, name: &str, width: usize, height: usize) -> Result<Option<Mask>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).ctx(|| format!("reading {}", path.display()))?;
    Mask::unpack(width, height, &bytes).map(Some)
}

pub fn load_scene(dir: impl AsRef<Path>) -> Result<SceneContainer> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).ctx(|| format!("reading {}", meta_path.display()))?;
    let meta: SceneMeta =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", meta_path.display())))?;
    if meta.format != SCENE_FORMAT {
        return Err(Error::Malformed(format!("{}: unknown format `{}`", meta_path.display(), meta.format)));
    }
    if meta.version != SCENE_VERSION {
        return Err(Error::Version {
            found: meta.version,
            supported: SCENE_VERSION,
        });
    }
    if meta.width == 0 || meta.height == 0 || meta.bands == 0 {
        return Err(Error::Malformed(format!("{}: empty raster dimensions", meta_path.display())));
    }
    let bands_path = dir.join(BANDS_FILE);
    let raw = fs::read(&bands_path).ctx(|| format!("reading {}", bands_path.display()))?;
    let plane_bytes = meta.width * meta.height * 2;
    if raw.len() != plane_bytes * meta.bands {
        if raw.len() % plane_bytes == 0 {
            return Err(Error::BandCount {
                scene: meta.scene_id,
                expected: meta.bands,
                found: raw.len() / plane_bytes,
            });
        }
        return Err(Error::Malformed(format!(
            "{}: {} bytes is not a whole number of {}x{} u16 bands",
            bands_path.display(),
            raw.len(),
            meta.width,
            meta.height
        )));
    }
    let bands = raw
        .chunks_exact(plane_bytes)
        .map(|plane| {
            plane
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
                .collect()
        })
        .collect();
    let band_max = meta.band_max.unwrap_or_else(|| vec![DEFAULT_BAND_MAX; meta.bands]);
    let scene = SceneContainer {
        series_id: meta.series_id.unwrap_or_else(|| meta.scene_id.clone()),
        scene_id: meta.scene_id,
        timestamp: meta.timestamp,
        width: meta.width,
        height: meta.height,
        resolution_m: meta.resolution_m,
        bands,
        band_max,
        cloud_mask: read_mask(dir, CLOUD_FILE, meta.width, meta.height)?,
        nodata_mask: read_mask(dir, NODATA_FILE, meta.width, meta.height)?
            .unwrap_or_else(|| Mask::empty(meta.width, meta.height)),
        event_role: meta.event_role,
        event_class: meta.event_class,
        change_mask: read_mask(dir, CHANGE_FILE, meta.width, meta.height)?,
    };
    scene.validate()?;
    Ok(scene)
}
