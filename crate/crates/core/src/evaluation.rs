//! Tile labels, cloud exclusion, precision-recall curves and AUPRC.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{EventClass, Mask, TileGrid, TileMeta, TileRef, TILE_SIZE};
use crate::scoring::{ChangeMap, MaskPolicy};

pub const DEFAULT_POSITIVE_FRACTION: f64 = 0.5;

/// Positive iff the changed fraction of the tile window is at least
/// `threshold`.
pub fn tile_label(mask: &Mask, tile: TileRef, threshold: f64) -> bool {
    let (y0, x0) = tile.pixel_origin();
    let changed = mask.window_count(y0, x0, TILE_SIZE);
    changed as f64 >= threshold * (TILE_SIZE * TILE_SIZE) as f64
}

pub fn tile_labels(mask: &Mask, grid: &TileGrid, threshold: f64) -> Vec<bool> {
    grid.iter().map(|t| tile_label(mask, t, threshold)).collect()
}

/// Per-tile exclusion from cloud cover in the after image and the most
/// recent before image. Older images never exclude.
pub fn exclusion_mask(after: &[TileMeta], most_recent_before: Option<&[TileMeta]>, cloud_threshold: f64) -> Vec<bool> {
    let policy = MaskPolicy {
        cloud_threshold,
        ..Default::default()
    };
    after
        .iter()
        .enumerate()
        .map(|(i, a)| policy.excludes(a, most_recent_before.map(|b| &b[i])))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Equal scores form one threshold step.
    #[default]
    Grouped,
    /// Within a run of equal scores, negatives rank first.
    Pessimistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub positive_count: usize,
    pub negative_count: usize,
}

/// Ranks by descending score and emits one point per threshold step.
/// `scope` names the scene or class in the degenerate-label error.
pub fn pr_curve(scored: &[(f64, bool)], ties: TiePolicy, scope: &str) -> Result<PrCurve> {
    let positives = scored.iter().filter(|s| s.1).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels {
            scene: scope.to_string(),
            positives,
            negatives,
        });
    }
    if let Some((s, _)) = scored.iter().find(|s| s.0.is_nan()) {
        return Err(Error::Validation(format!("{scope}: score {s} is not a number")));
    }
    let mut ranked = scored.to_vec();
    // Descending score; for the pessimistic policy negatives lead a tie.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let threshold = ranked[i].0;
        let step_end = match ties {
            TiePolicy::Grouped => ranked[i..].iter().position(|r| r.0 != threshold).map_or(ranked.len(), |p| i + p),
            TiePolicy::Pessimistic => i + 1,
        };
        for r in &ranked[i..step_end] {
            if r.1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push(PrPoint {
            threshold,
            recall: tp as f64 / positives as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
        i = step_end;
    }
    Ok(PrCurve {
        points,
        positive_count: positives,
        negative_count: negatives,
    })
}

/// Average precision, `sum (R_i - R_{i-1}) * P_i`.
pub fn auprc(curve: &PrCurve) -> f64 {
    let mut previous = 0.0;
    let mut area = 0.0;
    for p in &curve.points {
        area += (p.recall - previous) * p.precision;
        previous = p.recall;
    }
    area
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One curve over all tiles of a class.
    #[default]
    PerClass,
    /// Mean of per-scene AUPRC within a class.
    MacroPerScene,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub positive_fraction: f64,
    pub cloud_threshold: f64,
    pub pooling: Pooling,
    pub ties: TiePolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            positive_fraction: DEFAULT_POSITIVE_FRACTION,
            cloud_threshold: 0.0,
            pooling: Pooling::PerClass,
            ties: TiePolicy::Grouped,
        }
    }
}

/// Ground truth for one after scene.
#[derive(Clone, Debug)]
pub struct LabelMask {
    pub change: Mask,
    pub after_cloud: Option<Mask>,
    pub before_cloud: Option<Mask>,
    pub event_class: EventClass,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneSummary {
    pub scene_id: String,
    pub event_class: EventClass,
    pub total_tiles: usize,
    pub scored_tiles: usize,
    pub excluded_tiles: usize,
    pub positive_tiles: usize,
    pub positive_ratio: f64,
    /// Set when the scene contributes nothing, e.g. every tile excluded.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassSummary {
    pub event_class: EventClass,
    pub auprc: f64,
    pub scenes: usize,
    pub tiles: usize,
    pub positive_tiles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub classes: Vec<ClassSummary>,
    pub scenes: Vec<SceneSummary>,
}

impl EvalReport {
    pub fn class_auprc(&self, class: EventClass) -> Option<f64> {
        self.classes.iter().find(|c| c.event_class == class).map(|c| c.auprc)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8} {:>7} {:>7} {:>9}", "class", "AUPRC", "scenes", "tiles", "positive");
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<10} {:>8.4} {:>7} {:>7} {:>9}",
                c.event_class.name(),
                c.auprc,
                c.scenes,
                c.tiles,
                c.positive_tiles
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<24} {:<10} {:>6} {:>7} {:>9} {:>10}",
            "scene", "class", "total", "scored", "excluded", "positive %"
        );
        for s in &self.scenes {
            let _ = writeln!(
                out,
                "{:<24} {:<10} {:>6} {:>7} {:>9} {:>10.2}{}",
                s.scene_id,
                s.event_class.name(),
                s.total_tiles,
                s.scored_tiles,
                s.excluded_tiles,
                100.0 * s.positive_ratio,
                s.note.as_ref().map(|n| format!("  ({n})")).unwrap_or_default()
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn tile_cloud(mask: Option<&Mask>, tile: TileRef) -> TileMeta {
    let (y0, x0) = tile.pixel_origin();
    TileMeta {
        cloud_fraction: mask.map_or(0.0, |m| {
            m.window_count(y0, x0, TILE_SIZE) as f64 / (TILE_SIZE * TILE_SIZE) as f64
        }),
        nodata_fraction: 0.0,
    }
}

/// The scored, non-excluded `(score, label)` pairs of one scene.
pub fn scene_pairs(map: &ChangeMap, labels: &LabelMask, config: &EvalConfig) -> Result<(Vec<(f64, bool)>, SceneSummary)> {
    let grid = TileGrid::for_dims(labels.change.width, labels.change.height)?;
    if grid.rows != map.grid.rows || grid.cols != map.grid.cols {
        return Err(Error::GridMismatch(format!(
            "{}: map grid {}x{}, label grid {}x{}",
            map.scene_id, map.grid.rows, map.grid.cols, grid.rows, grid.cols
        )));
    }
    let policy = MaskPolicy {
        cloud_threshold: config.cloud_threshold,
        ..Default::default()
    };
    let mut pairs = Vec::new();
    let mut excluded = 0;
    for (tile, score) in grid.iter().zip(&map.scores) {
        let after = tile_cloud(labels.after_cloud.as_ref(), tile);
        let before = labels.before_cloud.as_ref().map(|m| tile_cloud(Some(m), tile));
        match score {
            Some(s) if !policy.excludes(&after, before.as_ref()) => {
                pairs.push((*s, tile_label(&labels.change, tile, config.positive_fraction)));
            }
            _ => excluded += 1,
        }
    }
    let positives = pairs.iter().filter(|p| p.1).count();
    let summary = SceneSummary {
        scene_id: map.scene_id.clone(),
        event_class: labels.event_class,
        total_tiles: grid.len(),
        scored_tiles: pairs.len(),
        excluded_tiles: excluded,
        positive_tiles: positives,
        positive_ratio: if pairs.is_empty() {
            0.0
        } else {
            positives as f64 / pairs.len() as f64
        },
        note: pairs.is_empty().then(|| "all tiles excluded".to_string()),
    };
    Ok((pairs, summary))
}

/// Scores every scene, then reduces per event class.
pub fn evaluate(scenes: &[(ChangeMap, LabelMask)], config: &EvalConfig) -> Result<EvalReport> {
    let mut summaries = Vec::with_capacity(scenes.len());
    let mut by_class: BTreeMap<EventClass, Vec<(usize, Vec<(f64, bool)>)>> = BTreeMap::new();
    for (map, labels) in scenes {
        let (pairs, summary) = scene_pairs(map, labels, config)?;
        by_class
            .entry(labels.event_class)
            .or_default()
            .push((summaries.len(), pairs));
        summaries.push(summary);
    }
    let mut classes = Vec::new();
    for (class, members) in by_class {
        let tiles: usize = members.iter().map(|m| m.1.len()).sum();
        let positive_tiles: usize = members.iter().map(|m| m.1.iter().filter(|p| p.1).count()).sum();
        let auprc = match config.pooling {
            Pooling::PerClass => {
                let pooled: Vec<(f64, bool)> = members.iter().flat_map(|m| m.1.iter().copied()).collect();
                auprc(&pr_curve(&pooled, config.ties, class.name())?)
            }
            Pooling::MacroPerScene => {
                let mut values = Vec::new();
                for (idx, pairs) in &members {
                    let summary = &mut summaries[*idx];
                    if pairs.is_empty() {
                        continue;
                    }
                    match pr_curve(pairs, config.ties, &summary.scene_id) {
                        Ok(curve) => values.push(auprc(&curve)),
                        Err(Error::DegenerateLabels { .. }) => {
                            summary.note = Some("single label class, left out of the mean".into());
                        }
                        Err(e) => return Err(e),
                    }
                }
                if values.is_empty() {
                    return Err(Error::DegenerateLabels {
                        scene: class.name().to_string(),
                        positives: positive_tiles,
                        negatives: tiles - positive_tiles,
                    });
                }
                values.iter().sum::<f64>() / values.len() as f64
            }
        };
        classes.push(ClassSummary {
            event_class: class,
            auprc,
            scenes: members.len(),
            tiles,
            positive_tiles,
        });
    }
    Ok(EvalReport {
        config: *config,
        classes,
        scenes: summaries,
    })
}
