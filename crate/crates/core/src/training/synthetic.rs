//! Seeded synthetic disaster series: four correlated "before" passes and one
//! "after" pass with a spectrally shifted change region.

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{EventClass, EventRole, Mask, SceneContainer, DEFAULT_BANDS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    /// Number of land-cover classes.
    pub classes: usize,
    /// Lattice spacing of the coarsest land-cover noise octave, in pixels.
    pub cover_period: f64,
    /// Lattice spacing of the coarsest texture octave, in pixels.
    pub texture_period: f64,
    pub octaves: usize,
    /// Relative brightness modulation from texture.
    pub texture_amplitude: f64,
    /// Mean reflectance of land-cover signatures is drawn from this range
    /// (1e4 scale).
    pub level_range: (f64, f64),
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            cover_period: 96.0,
            texture_period: 12.0,
            octaves: 3,
            texture_amplitude: 0.25,
            level_range: (600.0, 3500.0),
        }
    }
}

/// How the after pass differs inside the change region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeStyle {
    /// Blend toward a new random land-cover signature with its own texture.
    Replace,
    /// Standing water over the old cover: per-band attenuation that deepens
    /// by `nir_drop` toward the long-wave bands, with surface texture damped
    /// by `smoothing`. Both lie in `[0, 1]`.
    Inundate { smoothing: f64, nir_drop: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeSpec {
    /// Fraction of the scene covered by the changed rectangle, in (0, 1).
    pub area_fraction: f64,
    /// Blend weight of the new spectral signature; 0 disables the change.
    pub magnitude: f64,
    /// Rectangle edges are snapped to multiples of this many pixels.
    pub snap: usize,
    pub style: ChangeStyle,
}

impl Default for ChangeSpec {
    fn default() -> Self {
        Self {
            area_fraction: 0.1,
            magnitude: 1.0,
            snap: 1,
            style: ChangeStyle::Replace,
        }
    }
}

/// Transient darkening that persists over the most recent before passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpec {
    pub area_fraction: f64,
    /// Multiplicative darkening, e.g. 0.4 scales affected pixels by 0.6.
    pub strength: f64,
    /// How many of the most recent before passes carry it.
    pub frames: usize,
    pub patches: usize,
    /// Keep patches clear of the change region.
    pub avoid_change: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudSpec {
    pub blobs: usize,
    pub radius: f64,
    /// Pass indices (0-based, the after pass is last) that receive clouds.
    pub frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub series_len: usize,
    pub texture: TextureSpec,
    /// Per-pixel multiplicative sensor noise (standard deviation).
    pub noise_sigma: f64,
    /// Per-pass global gain jitter (standard deviation).
    pub gain_jitter: f64,
    /// Maximum co-registration offset between passes, in pixels.
    pub max_shift: usize,
    pub change: ChangeSpec,
    pub nuisance: Option<NuisanceSpec>,
    pub clouds: Option<CloudSpec>,
    pub event_class: EventClass,
    pub series_id: String,
    pub start: DateTime<Utc>,
    pub revisit_days: i64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 256,
            height: 256,
            bands: DEFAULT_BANDS,
            series_len: 5,
            texture: TextureSpec::default(),
            noise_sigma: 0.05,
            gain_jitter: 0.03,
            max_shift: 0,
            change: ChangeSpec::default(),
            nuisance: None,
            clouds: None,
            event_class: EventClass::Flood,
            series_id: "synthetic".into(),
            start: DateTime::from_timestamp(1_600_000_000, 0).expect("valid timestamp"),
            revisit_days: 5,
        }
    }
}

impl SyntheticSpec {
    /// The flood series used for efficacy checks: 512 px passes with
    /// two-pixel co-registration jitter, a tile-aligned inundated region,
    /// and darkened patches on the most recent before pass.
    pub fn flood_fixture(seed: u64) -> Self {
        Self {
            seed,
            width: 512,
            height: 512,
            max_shift: 2,
            change: ChangeSpec {
                area_fraction: 0.1,
                magnitude: 1.0,
                snap: 32,
                style: ChangeStyle::Inundate {
                    smoothing: 0.3,
                    nir_drop: 0.2,
                },
            },
            nuisance: Some(NuisanceSpec {
                area_fraction: 0.15,
                strength: 0.4,
                frames: 1,
                patches: 3,
                avoid_change: true,
            }),
            texture: TextureSpec {
                level_range: (1000.0, 3500.0),
                ..Default::default()
            },
            series_id: format!("flood{seed}"),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("synthetic spec: {m}")));
        if self.width == 0 || self.height == 0 || self.bands == 0 {
            return fail("empty raster");
        }
        if self.series_len < 2 {
            return fail("series needs at least one before and one after pass");
        }
        if !(self.change.area_fraction > 0.0 && self.change.area_fraction < 1.0) {
            return fail("change area fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.change.magnitude) || self.change.snap == 0 {
            return fail("change magnitude must lie in [0, 1] and snap be positive");
        }
        if let ChangeStyle::Inundate { smoothing, nir_drop } = self.change.style {
            if !(0.0..=1.0).contains(&smoothing) || !(0.0..=1.0).contains(&nir_drop) {
                return fail("inundation smoothing and nir_drop must lie in [0, 1]");
            }
        }
        if self.texture.classes == 0 || self.texture.octaves == 0 {
            return fail("texture needs at least one class and one octave");
        }
        Ok(())
    }
}

/// Smooth lattice noise in `[-1, 1]`, summed over octaves.
struct ValueNoise {
    layers: Vec<(usize, usize, f64, f64, Vec<f64>)>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, width: usize, height: usize, period: f64, octaves: usize) -> Self {
        let mut layers = Vec::with_capacity(octaves);
        let mut norm = 0.0;
        for o in 0..octaves {
            let p = (period / (1 << o) as f64).max(1.0);
            let gw = (width as f64 / p).ceil() as usize + 2;
            let gh = (height as f64 / p).ceil() as usize + 2;
            let amp = 0.5f64.powi(o as i32);
            norm += amp;
            let lattice = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
            layers.push((gw, gh, p, amp, lattice));
        }
        for layer in &mut layers {
            layer.3 /= norm;
        }
        Self { layers }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        self.layers
            .iter()
            .map(|(gw, _gh, p, amp, lat)| {
                let (fx, fy) = (x / p, y / p);
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
                let at = |i: usize, j: usize| lat[j * gw + i];
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                amp * (top * (1.0 - ty) + bottom * ty)
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.y0 < other.y1 && other.y0 < self.y1 && self.x0 < other.x1 && other.x0 < self.x1
    }
}

fn random_rect(rng: &mut ChaCha8Rng, width: usize, height: usize, area_fraction: f64, snap: usize) -> Rect {
    let area = area_fraction * (width * height) as f64;
    let aspect: f64 = rng.random_range(0.6..1.6);
    let snap_len = |v: f64, limit: usize| (((v / snap as f64).round() as usize).max(1) * snap).min(limit);
    let w = snap_len((area * aspect).sqrt(), width);
    let h = snap_len(area / w as f64, height);
    let x0 = rng.random_range(0..=(width - w) / snap) * snap;
    let y0 = rng.random_range(0..=(height - h) / snap) * snap;
    Rect {
        y0,
        x0,
        y1: y0 + h,
        x1: x0 + w,
    }
}

/// Spectral signatures in reflectance units (1e4 scale).
fn signature(rng: &mut ChaCha8Rng, bands: usize, levels: (f64, f64)) -> Vec<f64> {
    let level: f64 = rng.random_range(levels.0..levels.1);
    let tilt: f64 = rng.random_range(-0.6..0.6);
    let bump_at: f64 = rng.random_range(0.0..bands as f64);
    let bump: f64 = rng.random_range(-0.5..0.8);
    (0..bands)
        .map(|c| {
            let t = c as f64 / (bands.max(2) - 1) as f64 - 0.5;
            let g = (-((c as f64 - bump_at) / 1.5).powi(2)).exp();
            (level * (1.0 + tilt * t + bump * g)).max(50.0)
        })
        .collect()
}

/// A generated series: passes in time order (the last is the after pass),
/// and the ground-truth change mask of the final pair.
#[derive(Clone, Debug)]
pub struct SyntheticSeries {
    pub scenes: Vec<SceneContainer>,
    pub change_mask: Mask,
    pub change_region: Option<Rect>,
    pub nuisance_regions: Vec<Rect>,
}

pub fn generate_synthetic_series(spec: &SyntheticSpec) -> Result<SyntheticSeries> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h, bands) = (spec.width, spec.height, spec.bands);
    let margin = spec.max_shift;
    let (fw, fh) = (w + 2 * margin, h + 2 * margin);

    let cover = ValueNoise::new(&mut rng, fw, fh, spec.texture.cover_period, 2);
    let texture = ValueNoise::new(&mut rng, fw, fh, spec.texture.texture_period, spec.texture.octaves);
    let change_texture = ValueNoise::new(&mut rng, fw, fh, spec.texture.texture_period * 2.0, spec.texture.octaves);
    let signatures: Vec<Vec<f64>> = (0..spec.texture.classes).map(|_| signature(&mut rng, bands, spec.texture.level_range)).collect();
    let change_signature = signature(&mut rng, bands, spec.texture.level_range);
    let texture_weight: Vec<f64> = (0..bands).map(|_| rng.random_range(0.6..1.4)).collect();
    // Shallow water passes 15 to 45 percent of the cover signal in the first
    // band and less toward the long-wave bands.
    let water_floor: f64 = rng.random_range(0.15..0.45);
    let water_gain: Vec<f64> = (0..bands)
        .map(|b| {
            let drop = match spec.change.style {
                ChangeStyle::Inundate { nir_drop, .. } => nir_drop,
                ChangeStyle::Replace => 0.0,
            };
            water_floor * (1.0 - drop * b as f64 / (bands.max(2) - 1) as f64)
        })
        .collect();

    // Field in the enlarged frame, before any per-pass effects.
    let k = spec.texture.classes as f64;
    let base: Vec<Vec<f64>> = {
        let mut planes = vec![vec![0.0; fw * fh]; bands];
        for y in 0..fh {
            for x in 0..fw {
                let c = cover.sample(x as f64, y as f64);
                let class = (((c + 1.0) / 2.0 * k).floor() as usize).min(spec.texture.classes - 1);
                let t = texture.sample(x as f64, y as f64);
                for (b, plane) in planes.iter_mut().enumerate() {
                    plane[y * fw + x] =
                        signatures[class][b] * (1.0 + spec.texture.texture_amplitude * t * texture_weight[b]);
                }
            }
        }
        planes
    };

    let changed = spec.change.magnitude > 0.0;
    let change_region = random_rect(&mut rng, w, h, spec.change.area_fraction, spec.change.snap);
    let nuisance_regions: Vec<Rect> = spec
        .nuisance
        .as_ref()
        .map(|n| {
            let per = n.area_fraction / n.patches.max(1) as f64;
            (0..n.patches)
                .map(|_| {
                    let mut r = random_rect(&mut rng, w, h, per, 1);
                    for _ in 0..100 {
                        if !(n.avoid_change && changed && r.overlaps(&change_region)) {
                            break;
                        }
                        r = random_rect(&mut rng, w, h, per, 1);
                    }
                    r
                })
                .collect()
        })
        .unwrap_or_default();

    let last = spec.series_len - 1;
    let mut scenes = Vec::with_capacity(spec.series_len);
    for t in 0..spec.series_len {
        let gain = 1.0 + spec.gain_jitter * { let e: f64 = StandardNormal.sample(&mut rng); e };
        let (dy, dx) = if margin > 0 {
            (rng.random_range(0..=2 * margin), rng.random_range(0..=2 * margin))
        } else {
            (0, 0)
        };
        let darkened = spec
            .nuisance
            .as_ref()
            .is_some_and(|n| t < last && t + n.frames >= last);
        let darkening = spec.nuisance.as_ref().map_or(0.0, |n| n.strength);
        let mut planes = vec![vec![0f32; w * h]; bands];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y + dy, x + dx);
                let in_change = changed && t == last && change_region.contains(y, x);
                let ct = if in_change {
                    change_texture.sample(sx as f64, sy as f64)
                } else {
                    0.0
                };
                let bt = match spec.change.style {
                    ChangeStyle::Inundate { .. } if in_change => texture.sample(sx as f64, sy as f64),
                    _ => 0.0,
                };
                let dark = darkened && nuisance_regions.iter().any(|r| r.contains(y, x));
                for (b, plane) in planes.iter_mut().enumerate() {
                    let mut v = base[b][sy * fw + sx];
                    if in_change {
                        let m = spec.change.magnitude;
                        let target = match spec.change.style {
                            ChangeStyle::Replace => {
                                change_signature[b] * (1.0 + spec.texture.texture_amplitude * ct)
                            }
                            ChangeStyle::Inundate { smoothing, .. } => {
                                // strip the surface texture, keep the cover level
                                let amp = spec.texture.texture_amplitude * bt * texture_weight[b];
                                let flat = v / (1.0 + amp);
                                water_gain[b] * flat * (1.0 + (1.0 - smoothing) * amp)
                            }
                        };
                        v = (1.0 - m) * v + m * target;
                    }
                    if dark {
                        v *= 1.0 - darkening;
                    }
                    let noise = 1.0 + spec.noise_sigma * { let e: f64 = StandardNormal.sample(&mut rng); e };
                    plane[y * w + x] = (v * gain * noise).round().clamp(0.0, u16::MAX as f64) as f32;
                }
            }
        }

        let mut cloud_mask = Mask::empty(w, h);
        if let Some(clouds) = spec.clouds.as_ref().filter(|c| c.frames.contains(&t)) {
            for _ in 0..clouds.blobs {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let r = clouds.radius * rng.random_range(0.6..1.4);
                let bright: f64 = rng.random_range(5500.0..8000.0);
                let (ylo, yhi) = ((cy - r).max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
                let (xlo, xhi) = ((cx - r).max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
                for y in ylo..yhi {
                    for x in xlo..xhi {
                        if (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r * r {
                            cloud_mask.set(y, x, true);
                            for plane in planes.iter_mut() {
                                plane[y * w + x] = bright as f32;
                            }
                        }
                    }
                }
            }
        }

        let timestamp = spec.start + Duration::days(spec.revisit_days * t as i64);
        let mut scene = SceneContainer::new(
            format!("{}_t{}", spec.series_id, t + 1),
            spec.series_id.clone(),
            timestamp,
            w,
            h,
            planes,
        )?;
        scene.cloud_mask = Some(cloud_mask);
        scene.event_role = Some(if t == last { EventRole::After } else { EventRole::Before });
        scene.event_class = Some(spec.event_class);
        scenes.push(scene);
    }

    let mut change_mask = Mask::empty(w, h);
    if changed {
        for y in change_region.y0..change_region.y1 {
            for x in change_region.x0..change_region.x1 {
                change_mask.set(y, x, true);
            }
        }
    }
    if let Some(after) = scenes.last_mut() {
        after.change_mask = Some(change_mask.clone());
    }
    Ok(SyntheticSeries {
        scenes,
        change_mask,
        change_region: changed.then_some(change_region),
        nuisance_regions,
    })
}
