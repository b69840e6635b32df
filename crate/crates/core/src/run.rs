//! Training, evaluation, prediction and ablation runs.
//!
//! Every run writes into its own directory:
//!
//! ```text
//! <output_dir>/config.resolved        effective RunConfig (TOML)
//! <output_dir>/checkpoints/           init, epoch_N, best, final (.safetensors)
//! <output_dir>/logs/loss.csv          one row per optimizer step
//! <output_dir>/logs/metrics.csv       one row per epoch
//! <output_dir>/predictions/           written by `predict`
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::assembly::{Network, NetworkConfig, Variant};
use crate::datapipe::{
    self, augment, collate, generate_with, load_dataset, sample_rng, AugmentationConfig, SampleRecord, Split, SyntheticConfig,
};
use crate::efficiency::{BenchConfig, EfficiencyReport};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, PpaConfig};
use crate::metrics::{evaluate_dataset, maps_from_tensor, MetricConfig, MetricReport};
use crate::mic::RotationStrategy;
use crate::nn::Mode;
use crate::ops::{resize_bilinear, sigmoid};
use crate::params::{read_metadata, ParamStore};

const META_NETWORK: &str = "network_config";
const META_EPOCH: &str = "epoch";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Poly,
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_lr: f64,
    pub schedule: Schedule,
    /// Fraction of all steps spent ramping linearly up to `max_lr`.
    pub warmup_fraction: f64,
    pub poly_power: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            max_lr: 1e-2,
            schedule: Schedule::Poly,
            warmup_fraction: 0.05,
            poly_power: 0.9,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate at `step` out of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1) as f64;
        let s = step as f64;
        let warm = (self.warmup_fraction * total).floor();
        if s < warm {
            return self.max_lr * (s + 1.0) / warm;
        }
        let progress = ((s - warm) / (total - warm).max(1.0)).clamp(0.0, 1.0);
        match self.schedule {
            Schedule::Constant => self.max_lr,
            Schedule::Poly => self.max_lr * (1.0 - progress).powf(self.poly_power),
            Schedule::Cosine => self.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        }
    }
}

/// Procedurally generated train and held-out splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    #[serde(default = "default_decoys")]
    pub decoys: usize,
}

fn default_decoys() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset in the standard on-disk layout; takes precedence over `synthetic`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
    pub edge_radius: usize,
    pub augmentation: AugmentationConfig,
    /// Side every evaluation image is resized to before the forward pass.
    pub inference_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synthetic: None,
            edge_radius: datapipe::DEFAULT_EDGE_RADIUS,
            augmentation: AugmentationConfig::default(),
            inference_size: 352,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    /// Save `epoch_N` checkpoints every this many epochs; 0 disables them.
    pub checkpoint_interval: usize,
    /// Evaluate on the test split every this many epochs; 0 only at the end.
    pub eval_interval: usize,
    pub ppa: PpaConfig,
    pub metrics: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::full(),
            optimizer: OptimizerConfig::default(),
            batch_size: 12,
            epochs: 150,
            seed: 0,
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            checkpoint_interval: 10,
            eval_interval: 1,
            ppa: PpaConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size network and the reference training recipe.
    Full,
    /// Tiny network on 64x64 synthetic scenes, minutes on one CPU core.
    Desk,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::default(),
            Preset::Desk => Self {
                network: NetworkConfig::tiny(),
                optimizer: OptimizerConfig {
                    max_lr: 5e-2,
                    ..OptimizerConfig::default()
                },
                batch_size: 8,
                epochs: 20,
                seed: 0,
                data: DataConfig {
                    root: None,
                    synthetic: Some(SyntheticSource {
                        n_train: 200,
                        n_test: 50,
                        size: 64,
                        decoys: default_decoys(),
                    }),
                    edge_radius: datapipe::DEFAULT_EDGE_RADIUS,
                    augmentation: AugmentationConfig {
                        base_size: 64,
                        scales: vec![1.0],
                        crop_size: 64,
                        hflip_prob: 0.5,
                        seed: 0,
                    },
                    inference_size: 64,
                },
                output_dir: PathBuf::from("runs/desk"),
                checkpoint_interval: 0,
                eval_interval: 0,
                ppa: PpaConfig::default(),
                metrics: MetricConfig::default(),
            },
        }
    }

    /// Parses a TOML document layered over a preset. The document may name
    /// its own base with a top-level `preset = "desk"` key.
    pub fn from_toml(text: &str, default_preset: Preset) -> Result<Self> {
        let cfg = Self::from_toml_unchecked(text, default_preset)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`from_toml`](Self::from_toml) without the final validation.
    pub fn from_toml_unchecked(text: &str, default_preset: Preset) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text)?;
        let preset = match user.remove("preset") {
            Some(v) => Preset::deserialize(v).map_err(|e| Error::config(format!("preset: {e}")))?,
            None => default_preset,
        };
        let mut base = to_table(&Self::preset(preset))?;
        merge(&mut base, user);
        Ok(toml::Value::Table(base).try_into()?)
    }

    pub fn load(path: &Path, default_preset: Preset) -> Result<Self> {
        let cfg = Self::load_unchecked(path, default_preset)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_unchecked(path: &Path, default_preset: Preset) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_unchecked(&text, default_preset)
    }

    /// Applies a `key.path=value` override; the value is parsed as TOML and
    /// falls back to a plain string. The result must validate.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let mut updated = self.clone();
        updated.set_unchecked(assignment)?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// [`set`](Self::set) without validation.
    pub fn set_unchecked(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
        let mut table = to_table(&*self)?;
        let mut cursor = &mut table;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for p in &parts[..parts.len() - 1] {
            cursor = cursor
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("{key}: {p} is not a table")))?;
        }
        cursor.insert(parts[parts.len() - 1].to_string(), value);
        *self = toml::Value::Table(table).try_into()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let o = &self.optimizer;
        if !(o.max_lr > 0.0) || o.momentum < 0.0 || o.weight_decay < 0.0 || !(0.0..1.0).contains(&o.warmup_fraction) {
            return Err(Error::config("optimizer hyperparameters must be positive, warmup in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.data.root.is_none() && self.data.synthetic.is_none() {
            return Err(Error::config("set data.root or data.synthetic"));
        }
        if self.epochs > 0 {
            self.data.augmentation.validate()?;
        }
        if self.data.inference_size == 0 {
            return Err(Error::config("inference_size must be positive"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            ppa: self.ppa,
            deep_supervision: self.network.deep_supervision,
            edge_supervision: self.network.edge_supervision,
        }
    }

    /// Train and test records of the configured source.
    pub fn datasets(&self) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
        if let Some(root) = &self.data.root {
            return Ok((
                load_dataset(root, Split::Train, self.data.edge_radius)?,
                load_dataset(root, Split::Test, self.data.edge_radius)?,
            ));
        }
        let s = self.data.synthetic.ok_or_else(|| Error::config("no dataset configured"))?;
        let split = |n, seed| {
            generate_with(&SyntheticConfig {
                decoys: s.decoys,
                ..SyntheticConfig::new(n, s.size, seed)
            })
        };
        Ok((split(s.n_train, self.seed)?, split(s.n_test, held_out_seed(self.seed))?))
    }
}

/// Seed of the synthetic test split; disjoint from the training seed.
pub fn held_out_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_7e57_0000_0001
}

fn to_table<T: Serialize>(x: &T) -> Result<toml::Table> {
    match toml::Value::try_from(x)? {
        toml::Value::Table(t) => Ok(t),
        other => Err(Error::Serde(format!("expected a table, got {}", other.type_str()))),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Human-readable list of fields that differ between two network configs.
pub fn config_diff(a: &NetworkConfig, b: &NetworkConfig) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(a).unwrap_or_default(), &mut fa);
    flatten("", &serde_json::to_value(b).unwrap_or_default(), &mut fb);
    let keys: std::collections::BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| {
            format!(
                "{k}: checkpoint {} vs config {}",
                fa.get(k).map(String::as_str).unwrap_or("<absent>"),
                fb.get(k).map(String::as_str).unwrap_or("<absent>")
            )
        })
        .collect()
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() + (var.as_tensor().detach() * self.weight_decay)?)?;
            let v = match vel.take() {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g,
            };
            var.set(&(var.as_tensor() - (&v * lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

/// Checkpoint metadata: the network config (JSON) and the epoch.
fn checkpoint_meta(net: &NetworkConfig, epoch: usize) -> Result<HashMap<String, String>> {
    let mut m = HashMap::new();
    m.insert(
        META_NETWORK.to_string(),
        serde_json::to_string(net).map_err(|e| Error::Serde(e.to_string()))?,
    );
    m.insert(META_EPOCH.to_string(), epoch.to_string());
    Ok(m)
}

/// Network config stored in a checkpoint written by [`train`].
pub fn checkpoint_config(path: &Path) -> Result<NetworkConfig> {
    if !path.exists() {
        return Err(Error::config(format!("checkpoint {} does not exist", path.display())));
    }
    let meta = read_metadata(path)?;
    let json = meta
        .get(META_NETWORK)
        .ok_or_else(|| Error::config(format!("{} carries no network config", path.display())))?;
    serde_json::from_str(json).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Rebuilds the network a checkpoint was written from and loads its weights.
pub fn load_network(path: &Path) -> Result<Network> {
    let mut cfg = checkpoint_config(path)?;
    cfg.backbone.pretrained_weights_path = None;
    let net = Network::new(&cfg, 0, DType::F32)?;
    net.store().load(path)?;
    Ok(net)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub mae: Option<f64>,
    pub iou: Option<f64>,
    pub f_beta: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    /// Mean total loss of the first and last epochs (`None` when no step ran).
    pub first_epoch_loss: Option<f64>,
    pub last_epoch_loss: Option<f64>,
    pub final_report: MetricReport,
    pub epochs: Vec<EpochLog>,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for d in ["checkpoints", "logs", "predictions"] {
            fs::create_dir_all(root.join(d))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.safetensors"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }
}

/// Scores `net` on `records`: each image is resized to `inference_size`
/// (rounded to the backbone's stride), predicted, and the probability map
/// is resized back to the record's own resolution.
pub fn evaluate_records(
    net: &Network,
    records: &[SampleRecord],
    inference_size: usize,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let side = adjust_size(inference_size, net.config().backbone.max_stride());
    let store = net.store();
    let mut pairs = Vec::with_capacity(records.len());
    for chunk in records.chunks(8) {
        let resized: Vec<_> = chunk
            .iter()
            .map(|r| datapipe::resize_image(&r.image, side, side))
            .collect();
        let x = datapipe::image_batch(resized.iter(), store.device(), store.dtype())?;
        let prob = sigmoid(&net.predict(&x)?)?;
        for (i, r) in chunk.iter().enumerate() {
            let (h, w) = r.size();
            let p = resize_bilinear(&prob.narrow(0, i, 1)?, h, w)?.clamp(0.0, 1.0)?;
            let p = maps_from_tensor(&p)?.remove(0);
            pairs.push((p, r.mask.mapv(|v| v as f64)));
        }
    }
    evaluate_dataset(pairs, cfg)
}

/// Nearest positive multiple of `stride`, warning when it differs.
pub fn adjust_size(size: usize, stride: usize) -> usize {
    let adjusted = (((size as f64 / stride as f64).round() as usize).max(1)) * stride;
    if adjusted != size {
        log::warn!("inference size {size} is not a multiple of {stride}; using {adjusted}");
    }
    adjusted
}

/// Trains per `cfg`, optionally continuing from `resume`.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.datasets()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Dataset("train and test splits must both be nonempty".into()));
    }
    train_on(cfg, &train_set, &test_set, resume)
}

/// [`train`] with explicit datasets.
pub fn train_on(
    cfg: &RunConfig,
    train_set: &[SampleRecord],
    test_set: &[SampleRecord],
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = RunDir::create(&cfg.output_dir)?;
    fs::write(dir.root.join("config.resolved"), cfg.to_toml()?)?;

    let store = ParamStore::new(cfg.seed, DType::F32, &Device::Cpu);
    let net = Network::build(&cfg.network, &store)?;
    if let Some(path) = resume {
        let saved = checkpoint_config(path)?;
        let mut current = cfg.network.clone();
        current.backbone.pretrained_weights_path = None;
        let mut saved_cmp = saved.clone();
        saved_cmp.backbone.pretrained_weights_path = None;
        let diff = config_diff(&saved_cmp, &current);
        if !diff.is_empty() {
            return Err(Error::config(format!(
                "checkpoint {} is incompatible with the configured network:\n  {}",
                path.display(),
                diff.join("\n  ")
            )));
        }
        store.load(path)?;
    }
    store.save(dir.checkpoint("init"), checkpoint_meta(&cfg.network, 0)?)?;

    let mut loss_log = csv::Writer::from_path(dir.log("loss.csv"))?;
    let mut metric_log = csv::Writer::from_path(dir.log("metrics.csv"))?;
    let loss_cfg = cfg.loss_config();
    let batch = cfg.batch_size.min(train_set.len()).max(1);
    // incomplete trailing batches are dropped so batch statistics stay defined
    let steps_per_epoch = train_set.len() / batch;
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = Sgd::new(
        store.trainable_vars().into_iter().map(|(_, v)| v).collect(),
        cfg.optimizer.momentum,
        cfg.optimizer.weight_decay,
    );

    let mut step = 0usize;
    let mut epochs = Vec::new();
    let mut best_iou = f64::NEG_INFINITY;
    let mut last_report = None;
    let (mut first_loss, mut last_loss) = (None, None);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut sample_rng(cfg.seed, epoch as u64, u64::from(u32::MAX)));
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for b in 0..steps_per_epoch {
            let idx = &order[b * batch..(b + 1) * batch];
            let samples = idx
                .iter()
                .map(|&i| {
                    let mut rng = sample_rng(cfg.seed, epoch as u64, i as u64);
                    augment(&train_set[i], &cfg.data.augmentation, &mut rng).map(|(s, _)| s)
                })
                .collect::<Result<Vec<_>>>()?;
            let data = collate(&samples, store.device(), store.dtype())?;
            let out = net.forward(&data.images, Mode::Train)?;
            let terms = total_loss(&out, &data.masks, &data.edges, &loss_cfg)?;
            let grads = terms.total.backward()?;
            lr = cfg.optimizer.lr_at(step, total_steps);
            opt.step(&grads, lr)?;
            let rec = terms.record(step as u64)?;
            if !rec.total.is_finite() {
                return Err(Error::Dataset(format!("loss diverged at step {step}")));
            }
            loss_log.serialize(rec)?;
            epoch_loss += rec.total;
            step += 1;
        }
        loss_log.flush()?;
        let mean_loss = epoch_loss / steps_per_epoch.max(1) as f64;
        if steps_per_epoch > 0 {
            first_loss.get_or_insert(mean_loss);
            last_loss = Some(mean_loss);
        }
        let is_last = epoch + 1 == cfg.epochs;
        let evaluate_now = is_last || (cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0);
        let report = if evaluate_now {
            Some(evaluate_records(&net, test_set, cfg.data.inference_size, &cfg.metrics)?)
        } else {
            None
        };
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: mean_loss,
            mae: report.map(|r| r.mae),
            iou: report.map(|r| r.iou),
            f_beta: report.map(|r| r.f_beta),
        };
        log::info!(
            "epoch {}/{} lr {:.5} loss {:.4}{}",
            epoch + 1,
            cfg.epochs,
            lr,
            mean_loss,
            report.map(|r| format!(" iou {:.4}", r.iou)).unwrap_or_default()
        );
        metric_log.serialize(&log)?;
        metric_log.flush()?;
        epochs.push(log);
        if let Some(r) = report {
            if r.iou > best_iou {
                best_iou = r.iou;
                store.save(dir.checkpoint("best"), checkpoint_meta(&cfg.network, epoch + 1)?)?;
            }
            last_report = Some(r);
        }
        if cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0 {
            store.save(
                dir.checkpoint(&format!("epoch_{}", epoch + 1)),
                checkpoint_meta(&cfg.network, epoch + 1)?,
            )?;
        }
    }
    let final_report = match last_report {
        Some(r) => r,
        None => evaluate_records(&net, test_set, cfg.data.inference_size, &cfg.metrics)?,
    };
    store.save(dir.checkpoint("final"), checkpoint_meta(&cfg.network, cfg.epochs)?)?;
    if !dir.checkpoint("best").exists() {
        fs::copy(dir.checkpoint("final"), dir.checkpoint("best"))?;
    }
    fs::write(
        dir.log("final_metrics.csv"),
        format!("{}\n{}\n", MetricReport::CSV_HEADER, final_report.csv_row()),
    )?;
    Ok(TrainSummary {
        run_dir: dir.root.clone(),
        final_checkpoint: dir.checkpoint("final"),
        best_checkpoint: dir.checkpoint("best"),
        first_epoch_loss: first_loss,
        last_epoch_loss: last_loss,
        final_report,
        epochs,
    })
}

/// Evaluates a checkpoint on a dataset split in the standard layout.
pub fn evaluate(
    checkpoint: &Path,
    dataset_root: &Path,
    split: Split,
    inference_size: usize,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let net = load_network(checkpoint)?;
    let records = load_dataset(dataset_root, split, datapipe::DEFAULT_EDGE_RADIUS)?;
    if records.is_empty() {
        return Err(Error::Dataset(format!("{} has no images", dataset_root.display())));
    }
    evaluate_records(&net, &records, inference_size, cfg)
}

/// Files `predict` would read for `input` (a file or a directory).
fn prediction_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::input(format!("{} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Writes `<stem>_prob.png` (8-bit probability) and `<stem>_mask.png`
/// (probability thresholded at 0.5) per readable image. Returns the
/// number of images written.
pub fn predict(checkpoint: &Path, input: &Path, out_dir: &Path, inference_size: usize) -> Result<usize> {
    let net = load_network(checkpoint)?;
    let side = adjust_size(inference_size, net.config().backbone.max_stride());
    fs::create_dir_all(out_dir)?;
    let files = prediction_inputs(input)?;
    let mut written = 0;
    for f in &files {
        let img = match datapipe::read_rgb(f) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping {}: {e}", f.display());
                continue;
            }
        };
        let (_, h, w) = img.dim();
        let x = datapipe::image_batch([&datapipe::resize_image(&img, side, side)], net.store().device(), net.store().dtype())?;
        let prob = resize_bilinear(&sigmoid(&net.predict(&x)?)?, h, w)?.clamp(0.0, 1.0)?;
        let prob8 = maps_from_tensor(&prob)?.remove(0).mapv(|p| (p * 255.0).round() as u8);
        let mask = prob8.mapv(|v| if v >= 128 { 255 } else { 0 });
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        datapipe::write_gray(&out_dir.join(format!("{stem}_prob.png")), &prob8)?;
        datapipe::write_gray(&out_dir.join(format!("{stem}_mask.png")), &mask)?;
        written += 1;
    }
    if written == 0 {
        return Err(Error::Dataset(format!("no readable images under {}", input.display())));
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GridName {
    Architecture,
    Components,
    Rotation,
}

#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub name: GridName,
    pub rows: Vec<(String, NetworkConfig)>,
}

/// Row labels and variants of each grid, in table order.
pub fn grid_variants(name: GridName) -> Vec<(&'static str, Variant)> {
    use RotationStrategy as R;
    match name {
        GridName::Architecture => vec![
            ("A_ba", Variant::ArchBa),
            ("A_a", Variant::ArchA),
            ("A_b", Variant::ArchB),
            ("HetNet", Variant::HetNet),
        ],
        GridName::Components => vec![
            ("I", Variant::AblationI),
            ("II", Variant::AblationII),
            ("III", Variant::AblationIII),
            ("IV", Variant::AblationIV),
            ("V", Variant::AblationV),
            ("HetNet", Variant::HetNet),
        ],
        GridName::Rotation => vec![
            ("ICFE", Variant::Rotation(R::Single)),
            ("ICFE+ICFE", Variant::Rotation(R::DualSame)),
            ("ICFE*3", Variant::Rotation(R::Tri)),
            ("ICFE*4", Variant::Rotation(R::Quad)),
            ("MIC", Variant::Rotation(R::Mic)),
        ],
    }
}

impl AblationGrid {
    pub fn new(name: GridName, base: &NetworkConfig) -> Self {
        Self {
            name,
            rows: grid_variants(name)
                .into_iter()
                .map(|(l, v)| (l.to_string(), base.variant(v)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub mae: f64,
    pub iou: f64,
    pub f_beta: f64,
    pub params_m: f64,
    pub flops_gmac: f64,
    pub fps: f64,
}

fn dir_label(label: &str) -> String {
    label
        .chars()
        .map(|c| match c {
            '+' => 'p',
            '*' => 'x',
            c if c.is_ascii_alphanumeric() || c == '_' => c,
            _ => '_',
        })
        .collect()
}

/// Trains and evaluates every grid row with the same seed, data and budget.
/// Writes `ablation_<grid>.csv` into `base.output_dir`.
pub fn ablate(grid: &AblationGrid, base: &RunConfig, bench: Option<&BenchConfig>) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let (train_set, test_set) = base.datasets()?;
    let mut rows = Vec::new();
    for (label, net_cfg) in &grid.rows {
        let mut cfg = base.clone();
        cfg.network = net_cfg.clone();
        cfg.output_dir = base.output_dir.join(dir_label(label));
        let named = |e: Error| match e {
            Error::Config(m) => Error::Config(format!("row {label}: {m}")),
            other => Error::Dataset(format!("row {label}: {other}")),
        };
        Network::shape_only(net_cfg).map_err(named)?;
        let summary = train_on(&cfg, &train_set, &test_set, None).map_err(named)?;
        let net = load_network(&summary.final_checkpoint)?;
        let side = adjust_size(base.data.inference_size, net_cfg.backbone.max_stride());
        let eff = EfficiencyReport::measure(&net, (side, side), bench)?;
        let r = summary.final_report;
        rows.push(AblationRow {
            label: label.clone(),
            mae: r.mae,
            iou: r.iou,
            f_beta: r.f_beta,
            params_m: eff.params_millions,
            flops_gmac: eff.flops_gmac,
            fps: eff.fps,
        });
    }
    let name = match grid.name {
        GridName::Architecture => "architecture",
        GridName::Components => "components",
        GridName::Rotation => "rotation",
    };
    fs::create_dir_all(&base.output_dir)?;
    let mut w = csv::Writer::from_path(base.output_dir.join(format!("ablation_{name}.csv")))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<10}{:>8}{:>8}{:>8}{:>10}{:>10}{:>10}\n",
        "row", "MAE", "IoU", "F_beta", "Para.(M)", "GMAC", "FPS"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<10}{:>8.4}{:>8.4}{:>8.4}{:>10.3}{:>10.3}{:>10.1}\n",
            r.label, r.mae, r.iou, r.f_beta, r.params_m, r.flops_gmac, r.fps
        ));
    }
    s
}
