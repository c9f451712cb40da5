//! Optimizer, configuration, checkpoints and the training loop.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{self, ChannelStats, StereoSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{self, MetricReport};
use crate::model::StereoModel;
use crate::regress;
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, TrainConfig};
pub use optim::{adamw_step, one_cycle_lr, AdamState, AdamWConfig, LrSchedule};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "STEREOMAMBA_THREADS";

const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_CROP: u64 = 4;

/// Independent 64-bit seed for item `index` of `stream`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.set_word_pos(2 * index as u128);
    r.next_u64()
}

/// Worker pool sized by [`THREADS_ENV`] (default: all cores).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Training and held-out samples, generated or read from disk.
pub fn load_data(cfg: &TrainConfig) -> Result<(Vec<StereoSample>, Vec<StereoSample>)> {
    let d = &cfg.data;
    let synth = |stream: u64, n: usize| -> Result<Vec<StereoSample>> {
        (0..n)
            .map(|i| data::synth_stereogram(&d.synth, derive_seed(cfg.seed, stream, i as u64)))
            .collect()
    };
    let from_dir = |dir: &Path| -> Result<Vec<StereoSample>> {
        Ok(data::load_dataset(dir)?.into_iter().map(|(_, s)| s).collect())
    };
    let train = match &d.train_dir {
        Some(dir) => from_dir(dir)?,
        None => synth(STREAM_TRAIN, d.train_samples)?,
    };
    let val = match &d.val_dir {
        Some(dir) => from_dir(dir)?,
        None => synth(STREAM_VAL, d.val_samples)?,
    };
    if train.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    Ok((train, val))
}

/// One optimizer step as written to the loss CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: StereoModel,
    pub adam: AdamState,
    pub stats: ChannelStats,
    pub step: u64,
    train: Vec<StereoSample>,
    pool: rayon::ThreadPool,
    order: Option<(usize, Vec<usize>)>,
}

/// Forward, loss and backward of one sample on a private tape.
fn sample_gradients(model: &StereoModel, s: &StereoSample, weights: [f64; 4]) -> Result<Option<(f64, BTreeMap<String, Tensor>)>> {
    let mask = regress::supervision_mask(&s.gt_disparity, &s.valid_mask, model.config.d_max);
    if !mask.iter().any(|&m| m) {
        return Ok(None);
    }
    let mut g = Graph::new();
    let l = g.constant(s.left.clone());
    let r = g.constant(s.right.clone());
    let out = model.forward(&mut g, l, r, true)?;
    let loss = regress::multi_output_loss(&mut g, &out.disparities, &s.gt_disparity, &mask, weights)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok(Some((value, g.param_grads(&grads))))
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train, _) = load_data(&config)?;
        Self::with_data(config, train)
    }

    pub fn with_data(config: TrainConfig, train: Vec<StereoSample>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        let stats = ChannelStats::measure(&train)?;
        let model = StereoModel::new(config.model.clone(), config.seed)?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            config,
            model,
            adam,
            stats,
            step: 0,
            train,
            pool: thread_pool()?,
            order: None,
        })
    }

    /// Resumes from a checkpoint; `train` must be the same data the run
    /// started with.
    pub fn resume(ckpt: &Checkpoint, train: Vec<StereoSample>) -> Result<Self> {
        let mut t = Self::with_data(ckpt.config.clone(), train)?;
        ckpt.restore_params(&mut t.model.params)?;
        t.adam = ckpt.adam.clone();
        t.step = ckpt.step;
        t.stats = ckpt.stats;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.step, self.stats, &self.model.params, &self.adam)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.config.epochs) as u64
    }

    pub fn done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STREAM_SHUFFLE, epoch as u64));
            idx.shuffle(&mut rng);
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().expect("just set").1
    }

    /// Network input for a raw sample: optional seeded crop, then
    /// normalization with the training statistics.
    fn prepare(&self, idx: usize, epoch: usize) -> Result<StereoSample> {
        let s = &self.train[idx];
        match self.config.crop {
            Some([h, w]) => {
                let seed = derive_seed(self.config.seed, STREAM_CROP, (epoch * self.train.len() + idx) as u64);
                data::augment(s, (h, w), &self.stats, &mut ChaCha8Rng::seed_from_u64(seed))
            }
            None => Ok(StereoSample {
                left: self.stats.normalize(&s.left),
                right: self.stats.normalize(&s.right),
                ..s.clone()
            }),
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        optim::scheduled_lr(self.config.lr_schedule, step as usize, self.total_steps() as usize, self.config.lr_max)
    }

    /// One optimizer update on the next batch.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let spe = self.steps_per_epoch();
        let epoch = self.step as usize / spe;
        let b = self.step as usize % spe;
        let bs = self.config.batch_size;
        let batch: Vec<usize> = {
            let order = self.epoch_order(epoch);
            order[b * bs..((b + 1) * bs).min(order.len())].to_vec()
        };
        let inputs: Vec<StereoSample> = batch.iter().map(|&i| self.prepare(i, epoch)).collect::<Result<_>>()?;
        let (model, weights) = (&self.model, self.config.loss_weights);
        let results: Vec<Result<Option<(f64, BTreeMap<String, Tensor>)>>> =
            self.pool.install(|| inputs.par_iter().map(|s| sample_gradients(model, s, weights)).collect());
        let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
        let (mut loss, mut n) = (0.0, 0usize);
        for r in results {
            let Some((l, grads)) = r? else { continue };
            loss += l;
            n += 1;
            for (name, g) in grads {
                match total.get_mut(&name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        total.insert(name, g);
                    }
                }
            }
        }
        let lr = self.lr_at(self.step);
        if n > 0 {
            let inv = 1.0 / n as f64;
            for g in total.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            self.adam.step(&mut self.model.params, &total, lr, &self.config.optimizer())?;
        }
        let log = StepLog {
            step: self.step,
            epoch,
            lr,
            loss: if n > 0 { loss / n as f64 } else { f64::NAN },
        };
        self.step += 1;
        Ok(log)
    }

    /// Trains until `until` steps (or the end of the schedule).
    pub fn run(&mut self, until: Option<u64>, mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<()> {
        let stop = until.unwrap_or(u64::MAX).min(self.total_steps());
        while self.step < stop {
            let log = self.train_step()?;
            on_step(&log)?;
        }
        Ok(())
    }

    /// Predicted disparity for a raw `[0, 1]` pair.
    pub fn predict(&self, left: &Tensor, right: &Tensor) -> Result<Tensor> {
        predict_normalized(&self.model, &self.stats, left, right)
    }

    /// Per-sample disparity metrics on held-out data.
    pub fn evaluate(&self, samples: &[StereoSample]) -> Result<Vec<MetricReport>> {
        evaluate_model(&self.model, &self.stats, samples, &self.pool)
    }
}

pub fn predict_normalized(model: &StereoModel, stats: &ChannelStats, left: &Tensor, right: &Tensor) -> Result<Tensor> {
    model.predict(&stats.normalize(left), &stats.normalize(right))
}

pub fn evaluate_model(model: &StereoModel, stats: &ChannelStats, samples: &[StereoSample], pool: &rayon::ThreadPool) -> Result<Vec<MetricReport>> {
    pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let pred = predict_normalized(model, stats, &s.left, &s.right)?;
                metrics::disparity_metrics(&pred, &s.gt_disparity, &s.valid_mask, &s.calib)
            })
            .collect()
    })
}

/// Mean EPE / BadN over reports.
pub fn mean_report(reports: &[MetricReport]) -> Option<metrics::FrameRow> {
    let rows: Vec<metrics::FrameRow> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| metrics::FrameRow::new(i.to_string(), r))
        .collect();
    metrics::aggregate_rows(&rows)
}

/// Loss CSV writer (`step,epoch,lr,loss`).
pub struct LossCsv {
    writer: csv::Writer<std::fs::File>,
    path: std::path::PathBuf,
}

impl LossCsv {
    /// Creates the file, or appends to it without a second header.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, log: &StepLog) -> Result<()> {
        self.writer
            .serialize(log)
            .map_err(|e| Error::invalid(format!("{}: {e}", self.path.display())))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Mean training loss of each epoch, in order.
pub fn epoch_means(logs: &[StepLog]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for l in logs {
        if out.len() <= l.epoch {
            out.resize(l.epoch + 1, (0.0, 0));
        }
        if l.loss.is_finite() {
            out[l.epoch].0 += l.loss;
            out[l.epoch].1 += 1;
        }
    }
    out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}
