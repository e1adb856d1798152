//! Training loop, checkpoints and run records.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::DataSource;
use crate::error::{Error, Result};
use crate::geometry::{augment, AugmentOptions, PointCloud};
use crate::network::{argmax_rows, Metrics, Network, NetworkConfig};
use crate::nn::{commit_bn_updates, Ctx};
use crate::seeds;
use crate::tensor::{checkpoint, Adam, AdamConfig, ParamKind, ParamStore, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.lsan";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: AugmentOptions,
    pub adam: AdamConfig,
    /// Save a checkpoint every this many epochs (and after the last); 0 disables.
    pub checkpoint_every: usize,
    /// Points per test cloud when evaluating after each epoch.
    pub eval_points: usize,
    /// Stop once test accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Where the data came from, so evaluation tools can rebuild the test split.
    pub data: Option<DataSource>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 250,
            batch_size: 32,
            augment: AugmentOptions {
                rotate_z: false,
                jitter_sigma: 0.01,
                jitter_clip: 0.05,
                dropout_max_ratio: 0.0,
            },
            adam: AdamConfig::default(),
            checkpoint_every: 1,
            eval_points: 1024,
            target_accuracy: None,
            data: None,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test: Option<Metrics>,
    pub seconds: f64,
}

/// Everything besides tensors needed to rebuild and resume a run. Stored as
/// JSON beside each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: NetworkConfig,
    pub seed: u64,
    pub options: TrainOptions,
    /// Epochs completed when the checkpoint was written.
    pub epochs_done: usize,
    pub adam_step: u64,
    pub history: Vec<EpochRecord>,
}

/// Subsampling seed shared by per-epoch evaluation and density sweeps.
pub fn eval_seed(run_seed: u64) -> u64 {
    seeds::derive(run_seed, "eval", 0, 0)
}

pub fn record_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

/// Model parameters with the architecture they belong to.
pub struct Model {
    pub network: Network,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        let network = Network::new(config)?;
        let params = network.init_params(seed)?;
        Ok(Model { network, params })
    }

    /// Loads the tensors of a checkpoint and the config from its run record.
    pub fn load(ckpt: impl AsRef<Path>) -> Result<(Self, RunRecord)> {
        let ckpt = ckpt.as_ref();
        let record: RunRecord = serde_json::from_str(&fs::read_to_string(record_path(ckpt))?)?;
        let network = Network::new(record.config.clone())?;
        let mut params: ParamStore<f32> = network.init_params(0)?;
        let mut stored = checkpoint::load_typed::<f32>(ckpt)?;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let t = stored
                .swap_remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            params
                .set(&name, t)
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        }
        Ok((Model { network, params }, record))
    }
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam<f32>,
    pub seed: u64,
    pub options: TrainOptions,
    pub history: Vec<EpochRecord>,
    /// Epochs completed so far; the next epoch index.
    pub epoch: usize,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: NetworkConfig, seed: u64, options: TrainOptions, out_dir: Option<PathBuf>) -> Result<Self> {
        super::tune_allocator();
        if options.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        let model = Model::build(config, seeds::derive(seed, "init", 0, 0))?;
        if let Some(dir) = &out_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), model.network.config().to_json())?;
        }
        Ok(Trainer {
            model,
            adam: Adam::new(options.adam),
            seed,
            options,
            history: Vec::new(),
            epoch: 0,
            out_dir,
        })
    }

    /// Restores parameters, optimizer state and history from a checkpoint.
    /// `out_dir` receives later checkpoints and metrics.
    pub fn resume(ckpt: impl AsRef<Path>, out_dir: Option<PathBuf>) -> Result<Self> {
        super::tune_allocator();
        let ckpt = ckpt.as_ref();
        let (model, record) = Model::load(ckpt)?;
        let mut stored = checkpoint::load_typed::<f32>(ckpt)?;
        let mut moments = IndexMap::new();
        for (name, p) in model.params.iter() {
            if p.kind != ParamKind::Learnable {
                continue;
            }
            let m = stored.swap_remove(&format!("adam.m.{name}"));
            let v = stored.swap_remove(&format!("adam.v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    moments.insert(name.to_string(), (m, v));
                }
                (None, None) => {}
                _ => return Err(Error::Checkpoint(format!("incomplete optimizer state for `{name}`"))),
            }
        }
        let mut adam = Adam::new(record.options.adam);
        adam.restore(record.adam_step, moments);
        Ok(Trainer {
            model,
            adam,
            seed: record.seed,
            options: record.options,
            history: record.history,
            epoch: record.epochs_done,
            out_dir,
        })
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    /// Writes tensors and optimizer moments, then the run record.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries: Vec<(String, &Tensor<f32>)> = self
            .model
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), &p.value))
            .collect();
        for (name, m, v) in self.adam.moments() {
            entries.push((format!("adam.m.{name}"), m));
            entries.push((format!("adam.v.{name}"), v));
        }
        checkpoint::save(path, entries.iter().map(|(n, t)| (n.as_str(), *t)))?;
        let record = RunRecord {
            config: self.model.network.config().clone(),
            seed: self.seed,
            options: self.options.clone(),
            epochs_done: self.epoch,
            adam_step: self.adam.step_count(),
            history: self.history.clone(),
        };
        let tmp = record_path(path).with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&record)?)?;
        fs::rename(tmp, record_path(path))?;
        Ok(())
    }

    /// Shuffled order of the training set for `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, "shuffle", epoch as u64, 0)));
        order
    }

    /// One optimization step on `batch`; returns (loss, correct predictions).
    pub fn step(&mut self, batch: &[PointCloud<f32>], dropout_seed: u64) -> Result<(f64, usize)> {
        let labels = batch
            .iter()
            .map(|c| c.label.ok_or_else(|| Error::Invalid("training cloud without label".into())))
            .collect::<Result<Vec<_>>>()?;
        let epoch = self.epoch;
        let (loss, correct, grads, updates) = {
            let mut ctx = Ctx::train(&self.model.params);
            ctx.dropout_rng = Some(ChaCha8Rng::seed_from_u64(dropout_seed));
            let out = self.model.network.forward(&mut ctx, batch)?;
            let loss = self.model.network.loss(&mut ctx, out.logits, &labels)?;
            let loss_value = ctx.tape.value(loss).item().expect("scalar") as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: 0,
                });
            }
            let preds = argmax_rows(ctx.tape.value(out.logits));
            let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            let (_, grads) = ctx.param_grads(loss)?;
            (loss_value, correct, grads, ctx.take_bn_updates())
        };
        self.adam.step(&mut self.model.params, &grads, epoch)?;
        commit_bn_updates(&mut self.model.params, updates)?;
        Ok((loss, correct))
    }

    /// Trains one epoch and returns its record (without test metrics).
    pub fn train_epoch(&mut self, train: &[PointCloud<f32>]) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch;
        let order = self.epoch_order(train.len(), epoch);
        let bs = self.options.batch_size;
        let mut loss_sum = 0.0;
        let mut seen = 0;
        let mut correct = 0;
        for (bi, idx) in order.chunks(bs).enumerate() {
            // batch norm needs more than one sample
            if idx.len() < 2 {
                continue;
            }
            let batch = idx
                .iter()
                .map(|&i| {
                    let seed = seeds::derive(self.seed, "augment", epoch as u64, i as u64);
                    augment(&train[i], seed, &self.options.augment).map(|(c, _)| c)
                })
                .collect::<Result<Vec<_>>>()?;
            let dropout_seed = seeds::derive(self.seed, "dropout", epoch as u64, bi as u64);
            let (loss, hits) = self.step(&batch, dropout_seed).map_err(|e| match e {
                Error::NonFiniteLoss { epoch, .. } => Error::NonFiniteLoss { epoch, batch: bi },
                other => other,
            })?;
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            correct += hits;
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            lr: self.options.adam.effective_lr(epoch),
            loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test: None,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn evaluate(&self, test: &[PointCloud<f32>], n_points: usize) -> Result<Metrics> {
        self.model
            .network
            .evaluate(&self.model.params, test, n_points, eval_seed(self.seed))
    }

    fn log(&self, record: &EpochRecord) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(METRICS_FILE))?;
            writeln!(f, "{}", serde_json::to_string(record)?)?;
            f.flush()?;
        }
        Ok(())
    }

    /// Runs epochs until `options.epochs` or the accuracy target. A
    /// non-finite loss aborts the run; the last checkpoint on disk stays valid.
    pub fn run(&mut self, train: &[PointCloud<f32>], test: &[PointCloud<f32>]) -> Result<&[EpochRecord]> {
        while self.epoch < self.options.epochs {
            let mut record = self.train_epoch(train)?;
            if !test.is_empty() {
                record.test = Some(self.evaluate(test, self.options.eval_points)?);
            }
            log::info!(
                "epoch {} loss {:.4} train {:.3} test {:?} ({:.1}s)",
                record.epoch,
                record.loss,
                record.train_accuracy,
                record.test.as_ref().map(|m| m.overall_accuracy),
                record.seconds
            );
            self.log(&record)?;
            let reached = match (self.options.target_accuracy, &record.test) {
                (Some(t), Some(m)) => m.overall_accuracy >= t,
                _ => false,
            };
            self.history.push(record);
            let done = reached || self.epoch == self.options.epochs;
            let cadence = self.options.checkpoint_every;
            if let Some(dir) = &self.out_dir {
                if cadence > 0 && (self.epoch.is_multiple_of(cadence) || done) {
                    self.save_checkpoint(dir.join(CHECKPOINT_FILE))?;
                }
            }
            if reached {
                break;
            }
        }
        Ok(&self.history)
    }
}

/// Repeated steps on one fixed batch without augmentation or dropout.
/// Returns the loss before each step, stopping after the first loss below
/// `stop_below`.
pub fn overfit_batch(
    config: NetworkConfig,
    batch: &[PointCloud<f32>],
    max_steps: usize,
    stop_below: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let config = NetworkConfig {
        dropout_rate: 0.0,
        ..config
    };
    let options = TrainOptions {
        augment: AugmentOptions::default(),
        ..TrainOptions::default()
    };
    let mut trainer = Trainer::new(config, seed, options, None)?;
    let mut losses = Vec::new();
    for s in 0..max_steps {
        let (loss, _) = trainer.step(batch, s as u64)?;
        losses.push(loss);
        if loss < stop_below {
            break;
        }
    }
    Ok(losses)
}
