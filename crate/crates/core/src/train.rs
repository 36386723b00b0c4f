//! Training loop, evaluation driver and the TOML training configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::checkpoint::TrainProgress;
use crate::data::{generate_synthetic_dataset, make_gaussian_target, save_checkpoint, Checkpoint, PoseSample};
use crate::error::{HgError, Result};
use crate::graph::{Mode, Tape};
use crate::hourglass::{Network, NetworkConfig};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::metrics::{decode_heatmap, pckh, Joints, MeanMode, PckhResult, PckhSample, NUM_JOINTS};
use crate::optim::{rmsprop_step, RmspropConfig, RmspropState};
use crate::params::ParamStore;
use crate::presets;
use crate::tensor::Tensor4;

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    24
}
fn default_epochs() -> u64 {
    20
}
fn default_decay() -> f64 {
    0.99
}
fn default_eps() -> f64 {
    1e-8
}
fn default_sigma() -> f64 {
    1.0
}
fn default_threads() -> usize {
    1
}

/// Synthetic training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    /// Defaults to the network input resolution.
    #[serde(default)]
    pub resolution: Option<usize>,
    /// Defaults to the training seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_decay")]
    pub rmsprop_decay: f64,
    #[serde(default = "default_eps")]
    pub rmsprop_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Stops after this many optimizer steps in total, if set.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Preset name or path to an architecture JSON file.
    #[serde(default)]
    pub arch: Option<String>,
    /// Inline architecture, alternative to `arch`.
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub loss: LossConfig,
    pub dataset: DatasetConfig,
    /// Target Gaussian width in heatmap pixels.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub log: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl TrainConfig {
    /// Minimal configuration around an architecture.
    pub fn for_network(network: NetworkConfig, dataset_count: usize) -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            rmsprop_decay: default_decay(),
            rmsprop_eps: default_eps(),
            seed: 0,
            max_steps: None,
            arch: None,
            network: Some(network),
            loss: LossConfig::default(),
            dataset: DatasetConfig {
                count: dataset_count,
                resolution: None,
                seed: None,
            },
            sigma: default_sigma(),
            checkpoint: None,
            log: None,
            resume: None,
            threads: 1,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| HgError::config(format!("training config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a TOML file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut c = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut c.checkpoint);
        fix(&mut c.log);
        fix(&mut c.resume);
        if let Some(a) = &c.arch {
            let candidate = base.join(a);
            if candidate.is_file() {
                c.arch = Some(candidate.to_string_lossy().into_owned());
            }
        }
        Ok(c)
    }

    pub fn optimizer(&self) -> RmspropConfig {
        RmspropConfig {
            lr: self.learning_rate,
            decay: self.rmsprop_decay,
            eps: self.rmsprop_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(HgError::config("batch_size must be at least 1"));
        }
        if self.dataset.count == 0 {
            return Err(HgError::config("dataset.count must be at least 1"));
        }
        if self.dataset.count < self.batch_size {
            return Err(HgError::config(format!(
                "dataset.count {} is smaller than batch_size {}",
                self.dataset.count, self.batch_size
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(HgError::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.threads != 1 {
            return Err(HgError::config(format!(
                "threads = {}: only single-threaded execution is available",
                self.threads
            )));
        }
        match (&self.arch, &self.network) {
            (Some(_), Some(_)) => Err(HgError::config("set either arch or [network], not both")),
            (None, None) => Err(HgError::config("missing architecture: set arch or [network]")),
            _ => Ok(()),
        }
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        match (&self.arch, &self.network) {
            (_, Some(n)) => {
                n.validate()?;
                Ok(n.clone())
            }
            (Some(a), None) => resolve_arch(a),
            (None, None) => Err(HgError::config("missing architecture: set arch or [network]")),
        }
    }
}

/// A path to an architecture JSON file, or a preset name.
pub fn resolve_arch(arch: &str) -> Result<NetworkConfig> {
    let p = Path::new(arch);
    if p.is_file() {
        NetworkConfig::from_json(&fs::read_to_string(p)?)
    } else if presets::names().any(|n| n == arch) {
        presets::preset(arch)
    } else {
        Err(HgError::usage(format!("architecture '{arch}' is neither a file nor a preset")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: u64,
    /// 1-based index of the step.
    pub step: u64,
    pub loss: LossBreakdown,
}

/// One CSV row: means over the steps of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    pub step: u64,
    pub loss_total: f64,
    pub per_stack: Vec<f64>,
    pub loss_percep: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRow {
    pub fn header(stacks: usize) -> String {
        let mut h = String::from("epoch,step,loss_total");
        for k in 1..=stacks.max(2) {
            h.push_str(&format!(",loss_hg{k}"));
        }
        h.push_str(",loss_percep,lr,seconds");
        h
    }

    pub fn to_csv(&self, stacks: usize) -> String {
        let mut s = format!("{},{},{:e}", self.epoch, self.step, self.loss_total);
        for k in 0..stacks.max(2) {
            match self.per_stack.get(k) {
                Some(v) => s.push_str(&format!(",{v:e}")),
                None => s.push(','),
            }
        }
        s.push_str(&format!(",{:e},{:e},{:.3}", self.loss_percep, self.lr, self.seconds));
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRow>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub network: Network,
    pub store: ParamStore<f32>,
    pub optimizer: RmspropState<f32>,
    pub progress: TrainProgress,
    samples: Vec<PoseSample>,
    targets: Vec<Tensor4<f32>>,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    /// Fresh weights from the training seed, or the state stored in
    /// `config.resume`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if let Some(path) = &config.resume {
            let ckpt = crate::data::load_checkpoint(path)?;
            return Self::from_checkpoint(config, ckpt);
        }
        let net_cfg = config.network_config()?;
        let (network, store) = Network::with_seed::<f32>(&net_cfg, config.seed)?;
        let optimizer = RmspropState::new(&store);
        Self::assemble(config, network, store, optimizer, TrainProgress::default())
    }

    pub fn from_checkpoint(config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        let network = ckpt.network()?;
        let optimizer = ckpt.optimizer.unwrap_or_else(|| RmspropState::new(&ckpt.store));
        Self::assemble(config, network, ckpt.store, optimizer, ckpt.progress)
    }

    fn assemble(
        config: TrainConfig,
        network: Network,
        store: ParamStore<f32>,
        optimizer: RmspropState<f32>,
        progress: TrainProgress,
    ) -> Result<Self> {
        config.loss.validate()?;
        if config.loss.use_perceptual && network.config.num_stacks != 2 {
            return Err(HgError::config(format!(
                "perceptual loss needs exactly 2 stacks, network has {}",
                network.config.num_stacks
            )));
        }
        let res = network.config.input_resolution;
        let data_res = config.dataset.resolution.unwrap_or(res);
        if data_res != res {
            return Err(HgError::config(format!(
                "dataset resolution {data_res} does not match network input {res}"
            )));
        }
        let samples =
            generate_synthetic_dataset(config.dataset.count, res, config.dataset.seed.unwrap_or(config.seed))?;
        let hm = network.config.heatmap_resolution();
        let targets = samples
            .iter()
            .map(|s| make_gaussian_target::<f32>(&s.joints, &s.visible, hm, config.sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            network,
            store,
            optimizer,
            progress,
            samples,
            targets,
            order: None,
        })
    }

    pub fn samples(&self) -> &[PoseSample] {
        &self.samples
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.samples.len() / self.config.batch_size) as u64
    }

    /// Steps in a complete run: all epochs, capped by `max_steps`.
    pub fn total_steps(&self) -> u64 {
        let full = self.config.epochs * self.batches_per_epoch();
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    /// Sample order of an epoch, a function of `(seed, epoch)` only.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch + 1);
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.network.config.clone(),
            store: self.store.clone(),
            optimizer: Some(self.optimizer.clone()),
            progress: self.progress,
        }
    }

    /// Runs the next optimizer step. Parameters stay untouched when the
    /// loss or any gradient is non-finite.
    pub fn step(&mut self) -> Result<StepRecord> {
        let bpe = self.batches_per_epoch();
        let step = self.progress.step;
        let epoch = step / bpe;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, self.epoch_order(epoch)));
        }
        let order = &self.order.as_ref().expect("order set").1;
        let bs = self.config.batch_size;
        let b = (step % bpe) as usize;
        let idx = &order[b * bs..(b + 1) * bs];
        let images = Tensor4::stack(&idx.iter().map(|i| self.samples[*i].image.clone()).collect::<Vec<_>>())?;
        let target = Tensor4::stack(&idx.iter().map(|i| self.targets[*i].clone()).collect::<Vec<_>>())?;

        let mut tape = Tape::<f32>::new(Mode::Train);
        let x = tape.input(images, false);
        let t = tape.constant(target);
        let out = self.network.forward(&mut tape, &self.store, x)?;
        let (loss, breakdown) = total_loss(&mut tape, &out, t, &self.config.loss)?;
        if !breakdown.total.is_finite() {
            return Err(HgError::Training(format!(
                "non-finite loss {} at step {}",
                breakdown.total,
                step + 1
            )));
        }
        tape.backward(loss)?;
        self.store.zero_grads();
        tape.accumulate_into(&mut self.store);
        rmsprop_step(&mut self.store, &mut self.optimizer, &self.config.optimizer())?;
        self.store.zero_grads();
        self.store.apply_stat_updates(&tape.take_stat_updates());
        self.progress.step = step + 1;
        self.progress.epoch = (step + 1) / bpe;
        Ok(StepRecord {
            epoch,
            step: step + 1,
            loss: breakdown,
        })
    }

    /// Trains until [`Self::total_steps`], writing a log row and a
    /// checkpoint at the end of every epoch.
    pub fn run(&mut self) -> Result<TrainLog> {
        let total = self.total_steps();
        let bpe = self.batches_per_epoch();
        let stacks = self.network.config.num_stacks;
        let mut log_file = match &self.config.log {
            None => None,
            Some(p) => {
                let fresh = self.progress.step == 0 || !p.exists();
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(p)?;
                if fresh {
                    writeln!(f, "{}", EpochRow::header(stacks))?;
                }
                Some(f)
            }
        };
        let mut log = TrainLog::default();
        let mut epoch_steps: Vec<StepRecord> = Vec::new();
        let start = Instant::now();
        while self.progress.step < total {
            let rec = self.step()?;
            epoch_steps.push(rec.clone());
            log.steps.push(rec);
            let done = self.progress.step;
            if done % bpe == 0 || done == total {
                let row = epoch_row(&epoch_steps, self.config.learning_rate, start.elapsed().as_secs_f64());
                if let Some(f) = &mut log_file {
                    writeln!(f, "{}", row.to_csv(stacks))?;
                    f.flush()?;
                }
                log.epochs.push(row);
                epoch_steps.clear();
                if let Some(p) = &self.config.checkpoint {
                    save_checkpoint(p, &self.checkpoint())?;
                }
            }
        }
        Ok(log)
    }
}

fn epoch_row(steps: &[StepRecord], lr: f64, seconds: f64) -> EpochRow {
    let n = steps.len().max(1) as f64;
    let last = steps.last().expect("epoch has steps");
    let stacks = last.loss.per_stack_mse.len();
    let per_stack = (0..stacks)
        .map(|k| steps.iter().map(|s| s.loss.per_stack_mse[k]).sum::<f64>() / n)
        .collect();
    EpochRow {
        epoch: last.epoch,
        step: last.step,
        loss_total: steps.iter().map(|s| s.loss.total).sum::<f64>() / n,
        per_stack,
        loss_percep: steps.iter().map(|s| s.loss.l_percep).sum::<f64>() / n,
        lr,
        seconds,
    }
}

pub fn train(config: TrainConfig) -> Result<TrainLog> {
    Trainer::new(config)?.run()
}

/// Final-stack heatmaps decoded to input pixels (argmax cell × 4).
pub fn heatmaps_to_joints(heatmaps: &Tensor4<f32>) -> Result<Vec<Joints>> {
    if heatmaps.shape().c != NUM_JOINTS {
        return Err(HgError::config(format!(
            "expected {NUM_JOINTS} heatmap channels, got {}",
            heatmaps.shape().c
        )));
    }
    Ok(decode_heatmap(heatmaps, false)
        .into_iter()
        .map(|joints| {
            let mut out = [[0.0; 2]; NUM_JOINTS];
            for (o, p) in out.iter_mut().zip(joints) {
                *o = [p[0] * 4.0, p[1] * 4.0];
            }
            out
        })
        .collect())
}

/// Eval-mode predictions for each sample, in input pixels.
pub fn predict(network: &Network, store: &ParamStore<f32>, samples: &[PoseSample]) -> Result<Vec<Joints>> {
    let res = network.config.input_resolution;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        for s in chunk {
            let sh = s.image.shape();
            if (sh.c, sh.h, sh.w) != (3, res, res) {
                return Err(HgError::config(format!(
                    "sample image is {sh}, network expects 3×{res}×{res}"
                )));
            }
        }
        let images = Tensor4::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let mut tape = Tape::<f32>::new(Mode::Eval);
        let x = tape.input(images, false);
        let o = network.forward(&mut tape, store, x)?;
        let last = *o.heatmaps.last().expect("at least one stack");
        out.extend(heatmaps_to_joints(tape.value(last))?);
    }
    Ok(out)
}

/// PCKh@0.5 of the network's predictions, plus the scored samples.
pub fn evaluate(
    network: &Network,
    store: &ParamStore<f32>,
    samples: &[PoseSample],
    mode: MeanMode,
) -> Result<(PckhResult, Vec<PckhSample>)> {
    let preds = predict(network, store, samples)?;
    let scored: Vec<PckhSample> = samples
        .iter()
        .zip(preds)
        .map(|(s, pred)| PckhSample {
            pred,
            gt: s.joints,
            visible: s.visible,
            head_size: s.head_size,
        })
        .collect();
    Ok((pckh(&scored, 0.5, mode)?, scored))
}
