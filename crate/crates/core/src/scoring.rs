//! Tile distances and the history-minimum change score.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::ingest::{tile_scene, SceneContainer, TileGrid, TileMeta, TileRef};
use crate::model::{LatentCode, Vae};
use crate::store::LatentStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    CosineLatent,
    EuclideanLatent,
    KlLatent,
    CosineInput,
    EuclideanInput,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 5] = [
        DistanceKind::CosineLatent,
        DistanceKind::EuclideanLatent,
        DistanceKind::KlLatent,
        DistanceKind::CosineInput,
        DistanceKind::EuclideanInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::CosineLatent => "cosine_latent",
            DistanceKind::EuclideanLatent => "euclidean_latent",
            DistanceKind::KlLatent => "kl_latent",
            DistanceKind::CosineInput => "cosine_input",
            DistanceKind::EuclideanInput => "euclidean_input",
        }
    }

    pub fn is_latent(self) -> bool {
        matches!(
            self,
            DistanceKind::CosineLatent | DistanceKind::EuclideanLatent | DistanceKind::KlLatent
        )
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown distance kind `{s}`")))
    }
}

fn check_lengths(op: &'static str, u: usize, v: usize) -> Result<()> {
    if u != v {
        return Err(Error::dim(op, u, v));
    }
    Ok(())
}

/// `1 - cos(u, v)`. Returns 1.0 when either vector is zero.
pub fn distance_cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    check_lengths("distance_cosine", u.len(), v.len())?;
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - dot / (uu * vv).sqrt()).clamp(0.0, 2.0))
}

pub fn distance_euclidean(u: &[f32], v: &[f32]) -> Result<f64> {
    check_lengths("distance_euclidean", u.len(), v.len())?;
    Ok(u.iter()
        .zip(v)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Directed `KL(p || q)` between diagonal Gaussians.
pub fn distance_kl(p: &LatentCode, q: &LatentCode) -> Result<f64> {
    check_lengths("distance_kl", p.dim(), q.dim())?;
    p.validate()?;
    q.validate()?;
    let mut kl = 0.0;
    for i in 0..p.dim() {
        let (lp, lq) = (p.log_var[i] as f64, q.log_var[i] as f64);
        let dm = p.mu[i] as f64 - q.mu[i] as f64;
        kl += 0.5 * (lq - lp) + (lp.exp() + dm * dm) / (2.0 * lq.exp()) - 0.5;
    }
    if !kl.is_finite() {
        return Err(Error::NonFinite { op: "distance_kl" });
    }
    Ok(kl.max(0.0))
}

/// `KL(p || q) + KL(q || p)`.
pub fn distance_jeffreys(p: &LatentCode, q: &LatentCode) -> Result<f64> {
    Ok(distance_kl(p, q)? + distance_kl(q, p)?)
}

/// What a tile is compared by: its posterior, or its normalised pixels
/// flattened to one vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Representation {
    Latent(LatentCode),
    Input(Vec<f32>),
}

impl Representation {
    /// The vector cosine and euclidean distances operate on.
    fn vector(&self) -> &[f32] {
        match self {
            Representation::Latent(code) => &code.mu,
            Representation::Input(v) => v,
        }
    }

    fn is_zero(&self) -> bool {
        self.vector().iter().all(|&v| v == 0.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    /// `KL(current || previous)`.
    #[default]
    Directed,
    Jeffreys,
}

/// Distance between a history entry and the current tile.
pub fn distance(kind: DistanceKind, kl_form: KlForm, previous: &Representation, current: &Representation) -> Result<f64> {
    use Representation::{Input, Latent};
    match (kind, previous, current) {
        (DistanceKind::CosineLatent, Latent(_), Latent(_)) | (DistanceKind::CosineInput, Input(_), Input(_)) => {
            distance_cosine(previous.vector(), current.vector())
        }
        (DistanceKind::EuclideanLatent, Latent(_), Latent(_))
        | (DistanceKind::EuclideanInput, Input(_), Input(_)) => {
            distance_euclidean(previous.vector(), current.vector())
        }
        (DistanceKind::KlLatent, Latent(p), Latent(c)) => match kl_form {
            KlForm::Directed => distance_kl(c, p),
            KlForm::Jeffreys => distance_jeffreys(c, p),
        },
        _ => Err(Error::Validation(format!(
            "{kind} cannot compare the given representations"
        ))),
    }
}

/// Minimum distance from `current` to the `k` most recent entries of
/// `history` (newest first). `None` when no history is available.
pub fn score_series(
    current: &Representation,
    history: &[Representation],
    kind: DistanceKind,
    kl_form: KlForm,
    k: usize,
) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for previous in history.iter().take(k) {
        let d = distance(kind, kl_form, previous, current)?;
        best = Some(best.map_or(d, |b| b.min(d)));
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    /// Tiles whose after or most-recent-before cloud fraction exceeds this
    /// are excluded.
    pub cloud_threshold: f64,
    /// History entries with cloud plus nodata fraction above this are left
    /// out of the minimum.
    pub history_contamination_limit: f64,
    /// With `false`, no tile is excluded and no history entry skipped.
    pub enabled: bool,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            cloud_threshold: 0.0,
            history_contamination_limit: 0.5,
            enabled: true,
        }
    }
}

impl MaskPolicy {
    /// Only the after tile and the most recent before tile can exclude.
    pub fn excludes(&self, after: &TileMeta, most_recent_before: Option<&TileMeta>) -> bool {
        self.enabled
            && (after.cloud_fraction > self.cloud_threshold
                || most_recent_before.is_some_and(|m| m.cloud_fraction > self.cloud_threshold))
    }

    fn usable(&self, meta: &TileMeta) -> bool {
        !self.enabled || meta.cloud_fraction + meta.nodata_fraction <= self.history_contamination_limit
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub kind: DistanceKind,
    pub k: usize,
    pub kl_form: KlForm,
    pub mask: MaskPolicy,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            kind: DistanceKind::CosineLatent,
            k: 3,
            kl_form: KlForm::Directed,
            mask: MaskPolicy::default(),
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeMapMeta {
    pub scene_id: String,
    pub series_id: String,
    pub kind: DistanceKind,
    pub k: usize,
    pub rows: usize,
    pub cols: usize,
    pub excluded: usize,
    /// Comparisons where a cosine argument was the zero vector.
    pub zero_vectors: usize,
    /// Effective run configuration that produced the map.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub config: BTreeMap<String, String>,
}

/// Per-tile scores of one scene in row-major grid order; `None` marks an
/// excluded tile.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMap {
    pub scene_id: String,
    pub series_id: String,
    pub grid: TileGrid,
    pub kind: DistanceKind,
    pub k: usize,
    pub scores: Vec<Option<f64>>,
    pub zero_vectors: usize,
}

impl ChangeMap {
    pub fn get(&self, tile: TileRef) -> Option<f64> {
        self.scores[tile.a * self.grid.cols + tile.b]
    }

    pub fn excluded(&self) -> usize {
        self.scores.iter().filter(|s| s.is_none()).count()
    }

    pub fn scored(&self) -> impl Iterator<Item = (TileRef, f64)> + '_ {
        self.grid.iter().zip(&self.scores).filter_map(|(t, s)| s.map(|s| (t, s)))
    }

    pub fn meta(&self) -> ChangeMapMeta {
        ChangeMapMeta {
            scene_id: self.scene_id.clone(),
            series_id: self.series_id.clone(),
            kind: self.kind,
            k: self.k,
            rows: self.grid.rows,
            cols: self.grid.cols,
            excluded: self.excluded(),
            zero_vectors: self.zero_vectors,
            config: BTreeMap::new(),
        }
    }

    /// One line per grid row, `NA` for excluded tiles.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.scores.chunks(self.grid.cols) {
            let cells: Vec<String> = row
                .iter()
                .map(|s| s.map_or_else(|| "NA".to_string(), |v| v.to_string()))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(meta: &ChangeMapMeta, csv: &str) -> Result<Self> {
        let mut scores = Vec::with_capacity(meta.rows * meta.cols);
        let lines: Vec<&str> = csv.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != meta.rows {
            return Err(Error::GridMismatch(format!(
                "{}: {} rows in CSV, sidecar says {}",
                meta.scene_id,
                lines.len(),
                meta.rows
            )));
        }
        for line in lines {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != meta.cols {
                return Err(Error::GridMismatch(format!(
                    "{}: row with {} cells, sidecar says {}",
                    meta.scene_id,
                    cells.len(),
                    meta.cols
                )));
            }
            for cell in cells {
                scores.push(match cell {
                    "NA" => None,
                    v => Some(
                        v.parse::<f64>()
                            .map_err(|_| Error::Malformed(format!("{}: bad score `{v}`", meta.scene_id)))?,
                    ),
                });
            }
        }
        Ok(Self {
            scene_id: meta.scene_id.clone(),
            series_id: meta.series_id.clone(),
            grid: TileGrid {
                rows: meta.rows,
                cols: meta.cols,
                tile_size: crate::ingest::TILE_SIZE,
            },
            kind: meta.kind,
            k: meta.k,
            scores,
            zero_vectors: meta.zero_vectors,
        })
    }

    /// 8-bit grayscale, `scale` pixels per tile, scores divided by the map
    /// maximum. Excluded tiles are black.
    pub fn to_png(&self, scale: usize) -> Result<Vec<u8>> {
        let scale = scale.max(1);
        let max = self.scores.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
        let (w, h) = (self.grid.cols * scale, self.grid.rows * scale);
        let mut pixels = vec![0u8; w * h];
        for (i, s) in self.scores.iter().enumerate() {
            let level = match s {
                Some(v) if max > 0.0 => (v / max * 255.0).round() as u8,
                _ => 0,
            };
            let (a, b) = (i / self.grid.cols, i % self.grid.cols);
            for y in a * scale..(a + 1) * scale {
                pixels[y * w + b * scale..y * w + (b + 1) * scale].fill(level);
            }
        }
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, w as u32, h as u32);
            encoder.set_color(png::ColorType::Grayscale);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder
                .write_header()
                .map_err(|e| Error::Validation(format!("png header: {e}")))?;
            writer
                .write_image_data(&pixels)
                .map_err(|e| Error::Validation(format!("png data: {e}")))?;
        }
        Ok(out)
    }

    /// Writes `<scene_id>.csv`, `<scene_id>.json` and `<scene_id>.png` into
    /// `dir` and returns the CSV path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        self.save_with_config(dir, &BTreeMap::new())
    }

    /// [`save`](Self::save), echoing `config` into the sidecar.
    pub fn save_with_config(&self, dir: impl AsRef<Path>, config: &BTreeMap<String, String>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        let csv = dir.join(format!("{}.csv", self.scene_id));
        fs::write(&csv, self.to_csv()).ctx(|| format!("writing {}", csv.display()))?;
        let json = dir.join(format!("{}.json", self.scene_id));
        let meta = ChangeMapMeta {
            config: config.clone(),
            ..self.meta()
        };
        fs::write(&json, serde_json::to_string_pretty(&meta)?)
            .ctx(|| format!("writing {}", json.display()))?;
        let png = dir.join(format!("{}.png", self.scene_id));
        fs::write(&png, self.to_png(8)?).ctx(|| format!("writing {}", png.display()))?;
        Ok(csv)
    }

    /// Reads a map from its CSV path; the sidecar is expected next to it.
    pub fn load(csv_path: impl AsRef<Path>) -> Result<Self> {
        let csv_path = csv_path.as_ref();
        let json = csv_path.with_extension("json");
        let meta: ChangeMapMeta =
            serde_json::from_str(&fs::read_to_string(&json).ctx(|| format!("reading {}", json.display()))?)?;
        let csv = fs::read_to_string(csv_path).ctx(|| format!("reading {}", csv_path.display()))?;
        Self::from_csv(&meta, &csv)
    }
}

/// A tile's representation together with its contamination.
#[derive(Clone, Debug)]
pub struct Observation {
    pub repr: Representation,
    pub meta: TileMeta,
}

const ENCODE_CHUNK: usize = 64;

/// Encodes every grid tile of `scene` in row-major order.
pub fn encode_scene(model: &Vae<f32>, scene: &SceneContainer) -> Result<Vec<(TileRef, LatentCode, TileMeta)>> {
    let tiled = tile_scene(scene)?;
    let tiles: Vec<_> = tiled.tiles().collect();
    let mut out = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(ENCODE_CHUNK) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().map(|t| &t.data).collect();
        let codes = model.encode_batch(&Tensor::stack(&refs)?)?;
        out.extend(chunk.iter().zip(codes).map(|(t, c)| (t.at, c, t.meta)));
    }
    Ok(out)
}

/// Representations of every grid tile of `scene`.
pub fn observe_scene(scene: &SceneContainer, kind: DistanceKind, model: Option<&Vae<f32>>) -> Result<Vec<Observation>> {
    if kind.is_latent() {
        let model = model.ok_or_else(|| Error::InvalidConfig(format!("{kind} needs model weights")))?;
        Ok(encode_scene(model, scene)?
            .into_iter()
            .map(|(_, code, meta)| Observation {
                repr: Representation::Latent(code),
                meta,
            })
            .collect())
    } else {
        Ok(tile_scene(scene)?
            .tiles()
            .map(|t| Observation {
                repr: Representation::Input(t.data.into_vec()),
                meta: t.meta,
            })
            .collect())
    }
}

/// Scores `current` against per-tile histories (newest first).
pub fn assemble_change_map(
    scene_id: &str,
    series_id: &str,
    grid: TileGrid,
    current: &[Observation],
    histories: &[Vec<Observation>],
    config: &ScoreConfig,
) -> Result<ChangeMap> {
    config.validate()?;
    if current.len() != grid.len() || histories.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "{scene_id}: {} tiles and {} histories for a grid of {}",
            current.len(),
            histories.len(),
            grid.len()
        )));
    }
    let mut zero_vectors = 0;
    let cosine = matches!(config.kind, DistanceKind::CosineLatent | DistanceKind::CosineInput);
    let mut scores = Vec::with_capacity(grid.len());
    for (obs, history) in current.iter().zip(histories) {
        if config.mask.excludes(&obs.meta, history.first().map(|h| &h.meta)) {
            scores.push(None);
            continue;
        }
        let usable: Vec<Representation> = history
            .iter()
            .take(config.k)
            .filter(|h| config.mask.usable(&h.meta))
            .map(|h| h.repr.clone())
            .collect();
        if cosine && !usable.is_empty() {
            zero_vectors += usable.iter().filter(|h| h.is_zero() || obs.repr.is_zero()).count();
        }
        scores.push(score_series(&obs.repr, &usable, config.kind, config.kl_form, config.k)?);
    }
    Ok(ChangeMap {
        scene_id: scene_id.to_string(),
        series_id: series_id.to_string(),
        grid,
        kind: config.kind,
        k: config.k,
        scores,
        zero_vectors,
    })
}

/// Change map of `current` against earlier scenes of the same series, given
/// in any order. Latent kinds need `model`.
pub fn change_map(
    current: &SceneContainer,
    history: &[&SceneContainer],
    model: Option<&Vae<f32>>,
    config: &ScoreConfig,
) -> Result<ChangeMap> {
    let grid = TileGrid::for_dims(current.width, current.height)?;
    let mut earlier: Vec<&SceneContainer> = history
        .iter()
        .copied()
        .filter(|s| s.timestamp < current.timestamp)
        .collect();
    earlier.sort_by(|a, b| b.timestamp.cmp(&a.timestamp));
    earlier.truncate(config.k);
    for s in &earlier {
        let g = TileGrid::for_dims(s.width, s.height)?;
        if g != grid {
            return Err(Error::GridMismatch(format!(
                "{} has a {}x{} grid, {} has {}x{}",
                s.scene_id, g.rows, g.cols, current.scene_id, grid.rows, grid.cols
            )));
        }
    }
    let now = observe_scene(current, config.kind, model)?;
    let past: Vec<Vec<Observation>> = earlier
        .iter()
        .map(|s| observe_scene(s, config.kind, model))
        .collect::<Result<_>>()?;
    let histories: Vec<Vec<Observation>> = (0..grid.len())
        .map(|i| past.iter().map(|p| p[i].clone()).collect())
        .collect();
    assemble_change_map(&current.scene_id, &current.series_id, grid, &now, &histories, config)
}

/// Latent change map whose history comes only from stored codes.
pub fn change_map_from_store(
    current: &SceneContainer,
    model: &Vae<f32>,
    store: &LatentStore,
    config: &ScoreConfig,
) -> Result<ChangeMap> {
    if !config.kind.is_latent() {
        return Err(Error::InvalidConfig(format!(
            "{} compares pixels; the latent store only holds codes",
            config.kind
        )));
    }
    let grid = TileGrid::for_dims(current.width, current.height)?;
    let now = observe_scene(current, config.kind, Some(model))?;
    let histories: Vec<Vec<Observation>> = grid
        .iter()
        .map(|tile| {
            store
                .history(&current.series_id, tile, Some(current.timestamp), config.k)
                .into_iter()
                .map(|r| Observation {
                    repr: Representation::Latent(r.code.clone()),
                    meta: TileMeta {
                        cloud_fraction: r.cloud_fraction as f64,
                        nodata_fraction: r.nodata_fraction as f64,
                    },
                })
                .collect()
        })
        .collect();
    assemble_change_map(&current.scene_id, &current.series_id, grid, &now, &histories, config)
}
