//! Seeded, single-threaded VAE training plus gradient verification.

pub mod optim;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Objective};
use crate::ingest::{tile_scene, SceneContainer};
use crate::layers::NormMode;
use crate::model::{BackwardFault, ModelConfig, Vae};
use crate::tensor::{Scalar, Tensor};
use crate::weights::{save_weights, BundleMeta, WeightsBundle, WEIGHTS_VERSION};

pub use optim::{Optimizer, OptimizerKind, OptimizerParams};
pub use synthetic::{
    generate_synthetic_series, ChangeSpec, ChangeStyle, CloudSpec, NuisanceSpec, SyntheticSeries, SyntheticSpec, TextureSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 2000,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            checkpoint_interval: 0,
            checkpoint_dir: None,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidConfig("learning_rate and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Normalised training tiles.
#[derive(Clone, Debug, Default)]
pub struct TileCorpus {
    pub tiles: Vec<Tensor<f32>>,
}

impl TileCorpus {
    /// Tiles from every scene, skipping those more than half covered by
    /// cloud or nodata.
    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a SceneContainer>) -> Result<Self> {
        let mut tiles = Vec::new();
        for scene in scenes {
            let tiled = tile_scene(scene)?;
            tiles.extend(
                tiled
                    .tiles()
                    .filter(|t| t.meta.cloud_fraction + t.meta.nodata_fraction <= 0.5)
                    .map(|t| t.data),
            );
        }
        Ok(Self { tiles })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,total,recon,kl,wall_ms";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{:.3}", self.step, self.total, self.recon, self.kl, self.wall_ms)
    }
}

pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    fs::write(path, out).ctx(|| format!("writing {}", path.display()))
}

/// Exponential moving average of the logged total loss.
pub fn smoothed_totals(rows: &[MetricRow], alpha: f64) -> Vec<f64> {
    let mut acc = None;
    rows.iter()
        .map(|r| {
            let v = match acc {
                None => r.total,
                Some(prev) => alpha * r.total + (1.0 - alpha) * prev,
            };
            acc = Some(v);
            v
        })
        .collect()
}

pub struct TrainOutput {
    pub bundle: WeightsBundle,
    pub metrics: Vec<MetricRow>,
}

/// Trains from `WeightsBundle::build(model_config, train.seed)`.
///
/// Minibatches are drawn from a seeded shuffle; every step runs the batch
/// forward/backward and the optimizer update in a fixed order, so runs with
/// equal inputs produce identical weights.
pub fn train(model_config: &ModelConfig, corpus: &TileCorpus, train: &TrainConfig) -> Result<TrainOutput> {
    train.validate()?;
    let start = WeightsBundle::build(model_config.clone(), train.seed)?;
    match train.precision {
        Precision::F32 => train_from(start.model, corpus, train),
        Precision::F64 => {
            let out = train_from(start.model.cast::<f64>(), corpus, train)?;
            Ok(out)
        }
    }
}

fn train_from<T: Scalar>(mut vae: Vae<T>, corpus: &TileCorpus, config: &TrainConfig) -> Result<TrainOutput> {
    let into_bundle = |vae: &Vae<T>, steps: usize| WeightsBundle {
        model: vae.cast::<f32>(),
        format_version: WEIGHTS_VERSION,
        meta: BundleMeta {
            seed: config.seed,
            training_steps: steps as u64,
        },
    };
    if config.steps == 0 {
        return Ok(TrainOutput {
            bundle: into_bundle(&vae, 0),
            metrics: Vec::new(),
        });
    }
    if corpus.len() < config.batch_size {
        return Err(Error::Validation(format!(
            "corpus holds {} tiles, fewer than one batch of {}",
            corpus.len(),
            config.batch_size
        )));
    }
    // Data stream and noise use separate generators so that changing one
    // never perturbs the other.
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let mut optimizer = Optimizer::new(
        OptimizerParams {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
            ..Default::default()
        },
        vae.layers(),
    );
    let tiles: Vec<Tensor<T>> = corpus.tiles.iter().map(Tensor::cast).collect();
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let n = vae.config().latent_dim;
    let mut metrics = Vec::with_capacity(config.steps);
    let clock = Instant::now();
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    }

    for step in 1..=config.steps {
        if cursor + config.batch_size > order.len() {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let batch_refs: Vec<&Tensor<T>> = order[cursor..cursor + config.batch_size].iter().map(|&i| &tiles[i]).collect();
        cursor += config.batch_size;
        let batch = Tensor::stack(&batch_refs)?;
        let noise: Vec<T> = (0..config.batch_size * n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut noise_rng);
                T::lit(e)
            })
            .collect();
        let out = match vae.loss_and_grads(&batch, &noise, NormMode::Train, BackwardFault::None) {
            Ok(out) => out,
            Err(e) => {
                if let Some(dir) = &config.checkpoint_dir {
                    save_weights(&into_bundle(&vae, step - 1), dir.join("last_good.rvae"))?;
                }
                return Err(Error::TrainingAborted {
                    step,
                    reason: e.to_string(),
                });
            }
        };
        optimizer.apply(vae.layers_mut(), &out.grads);
        vae.apply_norm_updates(&out.norm_updates);
        metrics.push(MetricRow {
            step,
            total: out.loss.total,
            recon: out.loss.recon,
            kl: out.loss.kl,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 {
            if let Some(dir) = &config.checkpoint_dir {
                let stem = dir.join(format!("ckpt_{step:06}"));
                save_weights(&into_bundle(&vae, step), stem.with_extension("rvae"))?;
                let opt_path = stem.with_extension("opt");
                fs::write(&opt_path, optimizer.to_bytes()).ctx(|| format!("writing {}", opt_path.display()))?;
            }
        }
        if step % 100 == 0 {
            log::debug!("step {step}: total {:.3} recon {:.3} kl {:.3}", out.loss.total, out.loss.recon, out.loss.kl);
        }
    }
    Ok(TrainOutput {
        bundle: into_bundle(&vae, config.steps),
        metrics,
    })
}

/// The batch ELBO of a 64-bit VAE with fixed tiles and noise, exposed
/// to the finite-difference checker. Each layer contributes a weight group
/// and a bias group.
pub struct VaeObjective {
    pub vae: Vae<f64>,
    pub tiles: Tensor<f64>,
    pub noise: Vec<f64>,
    pub fault: BackwardFault,
}

impl Objective for VaeObjective {
    fn groups(&self) -> Vec<(String, usize)> {
        self.vae
            .layers()
            .iter()
            .flat_map(|l| [(format!("{}.weight", l.name), l.weights.len()), (format!("{}.bias", l.name), l.bias.len())])
            .collect()
    }

    fn get(&self, group: usize, index: usize) -> f64 {
        let layer = &self.vae.layers()[group / 2];
        if group % 2 == 0 {
            layer.weights.data()[index]
        } else {
            layer.bias[index]
        }
    }

    fn set(&mut self, group: usize, index: usize, value: f64) {
        let layer = &mut self.vae.layers_mut()[group / 2];
        if group % 2 == 0 {
            layer.weights.data_mut()[index] = value;
        } else {
            layer.bias[index] = value;
        }
    }

    fn loss(&self) -> Result<f64> {
        Ok(self.vae.loss(&self.tiles, &self.noise, NormMode::Train)?.total)
    }

    fn gradient(&self) -> Result<Vec<Vec<f64>>> {
        let out = self.vae.loss_and_grads(&self.tiles, &self.noise, NormMode::Train, self.fault)?;
        Ok(out
            .grads
            .into_iter()
            .flat_map(|g| [g.weights.into_vec(), g.bias])
            .collect())
    }
}

/// Checks the end-to-end ELBO gradient of a freshly built 64-bit model on
/// one random tile against central differences.
pub fn verify_gradients(model_config: &ModelConfig, seed: u64, fault: BackwardFault) -> Result<GradCheckReport> {
    let vae = Vae::<f64>::build(model_config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let c = model_config;
    let tile_len = c.in_channels * c.tile_size * c.tile_size;
    let tiles = Tensor::from_vec(
        [1, c.in_channels, c.tile_size, c.tile_size],
        (0..tile_len).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let noise = (0..c.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut objective = VaeObjective {
        vae,
        tiles,
        noise,
        fault,
    };
    grad_check(
        &mut objective,
        &GradCheckOptions {
            seed,
            ..Default::default()
        },
    )
}
