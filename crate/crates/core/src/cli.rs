//! Command-line front end: `train`, `encode`, `score`, `eval`, `bench` and
//! `prioritize`.
//!
//! Every command reads a flat `key = value` [`RunConfig`], applies
//! `--<key> <value>` overrides, and writes its artifacts plus the effective
//! configuration under `--out`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Arg, ArgAction, Command};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, IoContext, Result};
use crate::evaluation::{evaluate, EvalConfig, EvalReport, LabelMask};
use crate::ingest::{load_scene, screen_scene, tile_scene, SceneContainer, Screening};
use crate::model::{count_parameters, ModelConfig, Vae};
use crate::scoring::{change_map, change_map_from_store, encode_scene, ChangeMap, MaskPolicy, ScoreConfig};
use crate::store::{LatentRecord, LatentStore, StoreStats};
use crate::training::{
    generate_synthetic_series, train, write_metrics_csv, Precision, SyntheticSpec, TileCorpus,
    TrainConfig,
};
use crate::weights::{load_weights, save_weights, WeightsBundle};

/// `(key, default, help)` for every accepted configuration key.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("model", "small", "model preset: small, medium or large"),
    ("seed", "0", "seed for initialisation, shuffling and sampling"),
    ("steps", "2000", "training steps"),
    ("batch_size", "16", "training minibatch size"),
    ("learning_rate", "0.001", "optimizer step size"),
    ("optimizer", "adam", "adam or sgd_momentum"),
    ("precision", "f32", "training arithmetic: f32 or f64"),
    ("checkpoint_interval", "0", "steps between checkpoints, 0 disables"),
    ("corpus", "", "directory of scene directories, or `synthetic`"),
    ("synthetic_seed", "0", "seed of the generated corpus when corpus = synthetic"),
    ("synthetic_size", "256", "edge length in pixels of generated scenes"),
    ("weights", "", "weight file"),
    ("scene", "", "scene directory"),
    ("history", "", "comma-separated earlier scene directories"),
    ("store", "", "latent store file"),
    ("k_max", "4", "history records kept per tile location"),
    ("max_scene_cloud", "1", "scenes with a larger cloud fraction are not encoded"),
    ("kind", "cosine_latent", "distance kind"),
    ("k", "3", "history length of the minimum"),
    ("kl_form", "directed", "directed or jeffreys"),
    ("cloud_threshold", "0", "cloud fraction above which a tile is excluded"),
    ("history_limit", "0.5", "cloud plus nodata fraction above which a history tile is skipped"),
    ("maps", "", "directory of change maps"),
    ("labels", "", "directory of labelled scene directories"),
    ("positive_fraction", "0.5", "changed-pixel fraction making a tile positive"),
    ("pooling", "per_class", "per_class or macro_per_scene"),
    ("ties", "grouped", "grouped or pessimistic"),
    ("repetitions", "5", "timed repetitions"),
    ("budget_bytes", "0", "downlink budget"),
    ("bytes_per_tile", "20480", "payload of one tile"),
];

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => Failure::Usage(m),
            e => Failure::Runtime(e),
        }
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: CONFIG_KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn known(key: &str) -> bool {
    CONFIG_KEYS.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1)))?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::InvalidConfig(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{raw}`")))
    }

    fn get_enum<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        serde_json::from_value(serde_json::Value::String(raw.to_string()))
            .map_err(|_| Error::InvalidConfig(format!("`{key}`: unknown value `{raw}`")))
    }

    /// `None` for an empty value.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::InvalidConfig(format!("`{key}` is required")))
    }

    /// Like [`require_path`](Self::require_path), and the path must exist.
    fn existing_path(&self, key: &str) -> Result<PathBuf> {
        let path = self.require_path(key)?;
        if !path.exists() {
            return Err(Error::InvalidConfig(format!("`{key}`: {} does not exist", path.display())));
        }
        Ok(path)
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let name = self.raw("model");
        ModelConfig::preset(name)
            .ok_or_else(|| Error::InvalidConfig(format!("`model`: unknown preset `{name}`")))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            learning_rate: self.get("learning_rate")?,
            batch_size: self.get("batch_size")?,
            steps: self.get("steps")?,
            seed: self.get("seed")?,
            optimizer: self.get("optimizer")?,
            checkpoint_interval: self.get("checkpoint_interval")?,
            checkpoint_dir: None,
            precision: self.get_enum::<Precision>("precision")?,
        })
    }

    pub fn score_config(&self) -> Result<ScoreConfig> {
        let config = ScoreConfig {
            kind: self.get("kind")?,
            k: self.get("k")?,
            kl_form: self.get_enum("kl_form")?,
            mask: MaskPolicy {
                cloud_threshold: self.get("cloud_threshold")?,
                history_contamination_limit: self.get("history_limit")?,
                enabled: true,
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            positive_fraction: self.get("positive_fraction")?,
            cloud_threshold: self.get("cloud_threshold")?,
            pooling: self.get_enum("pooling")?,
            ties: self.get_enum("ties")?,
        })
    }
}

/// Writes the effective configuration next to a command's outputs.
fn echo_config(config: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).ctx(|| format!("creating {}", out.display()))?;
    let path = out.join("config.effective");
    fs::write(&path, config.to_text()).ctx(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).ctx(|| format!("writing {}", path.display()))
}

/// Scene directories directly below `dir`, in name order.
pub fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .ctx(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn synthetic_corpus(config: &RunConfig) -> Result<Vec<SceneContainer>> {
    let size: usize = config.get("synthetic_size")?;
    let spec = SyntheticSpec {
        width: size,
        height: size,
        ..SyntheticSpec::flood_fixture(config.get("synthetic_seed")?)
    };
    Ok(generate_synthetic_series(&spec)?.scenes)
}

fn load_model(config: &RunConfig) -> Result<Vae<f32>> {
    Ok(load_weights(config.existing_path("weights")?)?.model)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub weights: PathBuf,
    pub metrics: PathBuf,
    pub tiles: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub checksum: u32,
    pub config: BTreeMap<String, String>,
}

pub fn cmd_train(config: &RunConfig, out: &Path) -> CmdResult<TrainSummary> {
    let model_config = config.model_config()?;
    let mut train_config = config.train_config()?;
    let corpus_key = config.raw("corpus");
    let scenes = if corpus_key == "synthetic" {
        synthetic_corpus(config)?
    } else {
        let dir = config.existing_path("corpus")?;
        scene_dirs(&dir)?
            .iter()
            .map(load_scene)
            .collect::<Result<Vec<_>>>()?
    };
    let corpus = TileCorpus::from_scenes(&scenes)?;
    echo_config(config, out)?;
    if train_config.checkpoint_interval > 0 {
        train_config.checkpoint_dir = Some(out.join("checkpoints"));
    }
    let result = train(&model_config, &corpus, &train_config)?;
    let weights = out.join("weights.rvae");
    save_weights(&result.bundle, &weights)?;
    let metrics = out.join("metrics.csv");
    write_metrics_csv(&result.metrics, &metrics)?;
    let summary = TrainSummary {
        weights,
        metrics,
        tiles: corpus.len(),
        steps: train_config.steps,
        final_loss: result.metrics.last().map(|r| r.total),
        checksum: result.bundle.checksum(),
        config: config.values().clone(),
    };
    write_json(&out.join("train.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct EncodeSummary {
    pub scene_id: String,
    pub series_id: String,
    pub records: usize,
    pub discarded: usize,
    pub screened_out: bool,
    pub store: PathBuf,
    pub store_stats: StoreStats,
    pub config: BTreeMap<String, String>,
}

/// Appends one record per tile that is not entirely nodata.
pub fn cmd_encode(config: &RunConfig, out: &Path) -> CmdResult<EncodeSummary> {
    let scene = load_scene(config.existing_path("scene")?)?;
    let model = load_model(config)?;
    let store_path = config.path("store").unwrap_or_else(|| out.join("latents.rvls"));
    let k_max: usize = config.get("k_max")?;
    let max_cloud: f64 = config.get("max_scene_cloud")?;
    echo_config(config, out)?;
    let mut store = LatentStore::open(&store_path, k_max)?;
    let screened_out = screen_scene(&scene, max_cloud) == Screening::Reject;
    let (mut records, mut discarded) = (0, 0);
    if !screened_out {
        let mut batch = Vec::new();
        for (tile, code, meta) in encode_scene(&model, &scene)? {
            if meta.nodata_fraction >= 1.0 {
                discarded += 1;
                continue;
            }
            batch.push(LatentRecord {
                series: scene.series_id.clone(),
                tile,
                timestamp: scene.timestamp,
                cloud_fraction: meta.cloud_fraction as f32,
                nodata_fraction: meta.nodata_fraction as f32,
                code,
            });
        }
        records = store.put_all(batch)?;
    }
    let summary = EncodeSummary {
        scene_id: scene.scene_id.clone(),
        series_id: scene.series_id.clone(),
        records,
        discarded,
        screened_out,
        store: store_path,
        store_stats: store.stats(),
        config: config.values().clone(),
    };
    write_json(&out.join(format!("encode_{}.json", scene.scene_id)), &summary)?;
    Ok(summary)
}

/// Scores a scene against stored latent history, or against the scenes
/// listed in `history` when no store is configured or the kind compares
/// pixels.
pub fn cmd_score(config: &RunConfig, out: &Path) -> CmdResult<ChangeMap> {
    let scene = load_scene(config.existing_path("scene")?)?;
    let score = config.score_config()?;
    let history_dirs: Vec<PathBuf> = config
        .raw("history")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect();
    let model = if score.kind.is_latent() {
        Some(load_model(config)?)
    } else {
        None
    };
    echo_config(config, out)?;
    let map = match (&model, config.path("store")) {
        (Some(model), Some(store_path)) if history_dirs.is_empty() => {
            let store = LatentStore::open_read_only(&store_path, config.get("k_max")?)?;
            change_map_from_store(&scene, model, &store, &score)?
        }
        _ => {
            if history_dirs.is_empty() {
                return Err(Failure::Usage(format!(
                    "{} needs `history` scenes{}",
                    score.kind,
                    if score.kind.is_latent() { " or a `store`" } else { "" }
                )));
            }
            let history = history_dirs.iter().map(load_scene).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SceneContainer> = history.iter().collect();
            change_map(&scene, &refs, model.as_ref(), &score)?
        }
    };
    if map.scores.iter().all(Option::is_none) {
        return Err(Failure::Runtime(Error::Validation(format!(
            "no tile of `{}` has usable history; encode earlier passes first",
            scene.scene_id
        ))));
    }
    map.save_with_config(out.join("maps"), config.values())?;
    Ok(map)
}

/// Reads every `*.csv` change map in `dir`, in name order.
pub fn load_maps(dir: &Path) -> Result<Vec<ChangeMap>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .ctx(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths.iter().map(ChangeMap::load).collect()
}

/// Labels for each map: the labelled scene with the map's id, plus the
/// cloud mask of the latest earlier scene of the same series, when present.
fn labels_for(maps: &[ChangeMap], label_dir: &Path) -> Result<Vec<LabelMask>> {
    let scenes: Vec<SceneContainer> = scene_dirs(label_dir)?
        .iter()
        .map(load_scene)
        .collect::<Result<_>>()?;
    maps.iter()
        .map(|map| {
            let after = scenes
                .iter()
                .find(|s| s.scene_id == map.scene_id)
                .ok_or_else(|| Error::Validation(format!("no labelled scene `{}`", map.scene_id)))?;
            let change = after
                .change_mask
                .clone()
                .ok_or_else(|| Error::Validation(format!("scene `{}` has no change mask", after.scene_id)))?;
            let before = scenes
                .iter()
                .filter(|s| s.series_id == after.series_id && s.timestamp < after.timestamp)
                .max_by_key(|s| s.timestamp);
            Ok(LabelMask {
                change,
                after_cloud: after.cloud_mask.clone(),
                before_cloud: before.and_then(|b| b.cloud_mask.clone()),
                event_class: after.event_class.unwrap_or(crate::ingest::EventClass::Flood),
            })
        })
        .collect()
}

pub fn cmd_eval(config: &RunConfig, out: &Path) -> CmdResult<EvalReport> {
    let maps = load_maps(&config.existing_path("maps")?)?;
    let label_dir = config.existing_path("labels")?;
    let eval = config.eval_config()?;
    echo_config(config, out)?;
    if maps.is_empty() {
        return Err(Failure::Usage("`maps` holds no change maps".into()));
    }
    let labels = labels_for(&maps, &label_dir)?;
    let pairs: Vec<(ChangeMap, LabelMask)> = maps.into_iter().zip(labels).collect();
    let report = evaluate(&pairs, &eval)?;
    let table = report.to_table();
    fs::write(out.join("eval.txt"), &table).ctx(|| "writing eval.txt".to_string())?;
    let mut json = serde_json::to_value(&report).map_err(Error::from)?;
    json["run_config"] = serde_json::to_value(config.values()).map_err(Error::from)?;
    write_json(&out.join("eval.json"), &json)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub parameters: usize,
    pub encoder_parameters: usize,
    pub scene_id: String,
    pub tiles: usize,
    pub repetitions: usize,
    /// Per-scene encode wall time, seconds.
    pub median_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub tiles_per_second: f64,
    /// Peak resident set size, when the platform reports it.
    pub peak_rss_bytes: Option<u64>,
    pub config: BTreeMap<String, String>,
}

fn peak_rss_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Times encoding of every tile of a scene. Without `weights`, a model of
/// the configured preset is initialised from `seed`; without `scene`, a
/// 574x509 synthetic scene is used.
pub fn cmd_bench(config: &RunConfig, out: &Path) -> CmdResult<BenchReport> {
    let repetitions: usize = config.get("repetitions")?;
    if repetitions == 0 {
        return Err(Failure::Usage("`repetitions` must be at least 1".into()));
    }
    let (model, label) = match config.path("weights") {
        Some(_) => {
            let m = load_model(config)?;
            (m, config.raw("weights").to_string())
        }
        None => (
            WeightsBundle::build(config.model_config()?, config.get("seed")?)?.model,
            config.raw("model").to_string(),
        ),
    };
    let scene = match config.path("scene") {
        Some(_) => load_scene(config.existing_path("scene")?)?,
        None => {
            let spec = SyntheticSpec {
                seed: config.get("synthetic_seed")?,
                width: 574,
                height: 509,
                series_len: 2,
                ..Default::default()
            };
            generate_synthetic_series(&spec)?.scenes.remove(1)
        }
    };
    echo_config(config, out)?;
    let tiles = tile_scene(&scene)?.grid.len();
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let codes = encode_scene(&model, &scene)?;
        times.push(start.elapsed().as_secs_f64());
        debug_assert_eq!(codes.len(), tiles);
    }
    let (encoder_parameters, parameters) = count_parameters(model.config())?;
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let max = times.iter().copied().fold(0.0, f64::max);
    let med = median(&mut times);
    let report = BenchReport {
        model: label,
        parameters,
        encoder_parameters,
        scene_id: scene.scene_id.clone(),
        tiles,
        repetitions,
        median_seconds: med,
        min_seconds: min,
        max_seconds: max,
        tiles_per_second: tiles as f64 / med,
        peak_rss_bytes: peak_rss_bytes(),
        config: config.values().clone(),
    };
    write_json(&out.join("bench.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DownlinkItem {
    pub scene_id: String,
    pub a: usize,
    pub b: usize,
    pub score: f64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DownlinkPlan {
    pub budget_bytes: u64,
    /// Every scored tile, highest score first.
    pub candidates: Vec<DownlinkItem>,
    /// The greedy prefix of `candidates` that fits the budget.
    pub selected: Vec<DownlinkItem>,
    pub selected_bytes: u64,
}

/// Greedy selection by descending score; ties go to the smaller
/// `(scene_id, a, b)`. Selection stops at the first tile that no longer fits.
pub fn plan_downlink(maps: &[ChangeMap], budget_bytes: u64, bytes_per_tile: u64) -> DownlinkPlan {
    let mut candidates: Vec<DownlinkItem> = maps
        .iter()
        .flat_map(|m| {
            m.scored().map(|(t, score)| DownlinkItem {
                scene_id: m.scene_id.clone(),
                a: t.a,
                b: t.b,
                score,
                bytes: bytes_per_tile,
            })
        })
        .collect();
    candidates.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then_with(|| (&x.scene_id, x.a, x.b).cmp(&(&y.scene_id, y.a, y.b)))
    });
    let mut selected = Vec::new();
    let mut used = 0u64;
    for c in &candidates {
        if used + c.bytes > budget_bytes {
            break;
        }
        used += c.bytes;
        selected.push(c.clone());
    }
    DownlinkPlan {
        budget_bytes,
        candidates,
        selected,
        selected_bytes: used,
    }
}

pub fn cmd_prioritize(config: &RunConfig, out: &Path) -> CmdResult<DownlinkPlan> {
    let maps = load_maps(&config.existing_path("maps")?)?;
    let budget: u64 = config.get("budget_bytes")?;
    let per_tile: u64 = config.get("bytes_per_tile")?;
    if per_tile == 0 {
        return Err(Failure::Usage("`bytes_per_tile` must be positive".into()));
    }
    echo_config(config, out)?;
    let plan = plan_downlink(&maps, budget, per_tile);
    let mut csv = String::from("rank,scene_id,a,b,score,bytes\n");
    for (i, s) in plan.selected.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{},{},{}\n", i + 1, s.scene_id, s.a, s.b, s.score, s.bytes));
    }
    fs::write(out.join("plan.csv"), csv).ctx(|| "writing plan.csv".to_string())?;
    let mut json = serde_json::to_value(&plan).map_err(Error::from)?;
    json["run_config"] = serde_json::to_value(config.values()).map_err(Error::from)?;
    write_json(&out.join("plan.json"), &json)?;
    Ok(plan)
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

pub fn command() -> Command {
    let sub = |name: &'static str, about: &'static str| {
        let mut c = Command::new(name)
            .about(about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("key = value configuration file"),
            )
            .arg(
                Arg::new("out")
                    .long("out")
                    .value_name("DIR")
                    .required(true)
                    .help("output directory"),
            );
        for (key, default, help) in CONFIG_KEYS {
            let help = if default.is_empty() {
                help.to_string()
            } else {
                format!("{help} [default: {default}]")
            };
            c = c.arg(
                Arg::new(*key)
                    .long(flag(key))
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(help),
            );
        }
        c
    };
    Command::new("latentwatch")
        .about("Latent-space change detection for multi-band satellite tiles")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("train", "train a model and write its weights and metrics"))
        .subcommand(sub("encode", "encode a scene into the latent store"))
        .subcommand(sub("score", "score a scene against its history"))
        .subcommand(sub("eval", "compute AUPRC of change maps against labels"))
        .subcommand(sub("bench", "time scene encoding"))
        .subcommand(sub("prioritize", "plan a downlink from change maps"))
}

/// Parses `args` (including the program name), runs the command, prints a
/// short result line, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}

fn dispatch(name: &str, sub: &clap::ArgMatches) -> CmdResult<String> {
    let mut config = match sub.get_one::<String>("config") {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (key, _, _) in CONFIG_KEYS {
        if let Some(v) = sub.get_one::<String>(key) {
            config.set(key, v)?;
        }
    }
    let out = PathBuf::from(sub.get_one::<String>("out").expect("required"));
    Ok(match name {
        "train" => {
            let s = cmd_train(&config, &out)?;
            format!(
                "trained {} steps on {} tiles; weights {} (crc {:08x})",
                s.steps,
                s.tiles,
                s.weights.display(),
                s.checksum
            )
        }
        "encode" => {
            let s = cmd_encode(&config, &out)?;
            format!("{}: {} records appended to {}", s.scene_id, s.records, s.store.display())
        }
        "score" => {
            let m = cmd_score(&config, &out)?;
            format!(
                "{}: {}x{} map, {} excluded, written to {}",
                m.scene_id,
                m.grid.cols,
                m.grid.rows,
                m.excluded(),
                out.join("maps").display()
            )
        }
        "eval" => cmd_eval(&config, &out)?.to_table(),
        "bench" => serde_json::to_string_pretty(&cmd_bench(&config, &out)?).map_err(Error::from)?,
        "prioritize" => {
            let p = cmd_prioritize(&config, &out)?;
            format!(
                "selected {} of {} tiles, {} of {} bytes",
                p.selected.len(),
                p.candidates.len(),
                p.selected_bytes,
                p.budget_bytes
            )
        }
        other => return Err(Failure::Usage(format!("unknown command `{other}`"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::TileGrid;
    use crate::scoring::DistanceKind;

    #[test]
    fn config_parsing() {
        let c = RunConfig::parse("# comment\nk = 5\nkind = euclidean_input # trailing\n").unwrap();
        assert_eq!(c.get::<usize>("k").unwrap(), 5);
        assert_eq!(c.score_config().unwrap().kind, DistanceKind::EuclideanInput);
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::InvalidConfig(_))));
        assert!(matches!(RunConfig::parse("no equals sign"), Err(Error::InvalidConfig(_))));
        let bad = RunConfig::parse("k = many").unwrap();
        assert!(bad.score_config().is_err());
    }

    fn map(id: &str, scores: Vec<Option<f64>>) -> ChangeMap {
        ChangeMap {
            scene_id: id.into(),
            series_id: "s".into(),
            grid: TileGrid {
                rows: 1,
                cols: scores.len(),
                tile_size: 32,
            },
            kind: DistanceKind::CosineInput,
            k: 3,
            scores,
            zero_vectors: 0,
        }
    }

    #[test]
    fn greedy_plan() {
        let maps = [map("a", vec![Some(0.9), Some(0.1), None, Some(0.5), Some(0.4)])];
        let plan = plan_downlink(&maps, 30, 10);
        let picked: Vec<f64> = plan.selected.iter().map(|s| s.score).collect();
        assert_eq!(picked, vec![0.9, 0.5, 0.4]);
        assert_eq!(plan_downlink(&maps, 0, 10).selected.len(), 0);
        assert_eq!(plan_downlink(&maps, 1000, 10).selected.len(), 4);
    }

    #[test]
    fn ties_break_by_scene_then_position() {
        let maps = [map("b", vec![Some(0.5)]), map("a", vec![Some(0.5), Some(0.5)])];
        let plan = plan_downlink(&maps, 20, 10);
        let ids: Vec<_> = plan.selected.iter().map(|s| (s.scene_id.as_str(), s.b)).collect();
        assert_eq!(ids, vec![("a", 0), ("a", 1)]);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["latentwatch"]), 2);
        assert_eq!(run(["latentwatch", "train"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["latentwatch", "train", "--out", out, "--corpus", "/nonexistent/corpus"]), 2);
        assert_eq!(run(["latentwatch", "score", "--out", out, "--k", "x"]), 2);
    }
}
