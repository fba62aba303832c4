//! BPTT training loop: RMSProp with momentum, global-norm clipping, per
//! iteration metrics and run-level convergence/outlier statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::memory_graph::{Checkpoint, NtmModel};
use crate::params::ParamSet;
use crate::tasks::{episode_seed, Episode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip: Option<f64>,
    pub max_iters: u64,
    pub sample_every: u64,
    pub outlier_threshold: f64,
    pub convergence_threshold: f64,
    /// Sampled records in the trailing median window.
    pub convergence_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            momentum: 0.9,
            decay: 0.95,
            epsilon: 1e-8,
            clip: Some(10.0),
            max_iters: 100_000,
            sample_every: 25,
            outlier_threshold: 0.5,
            convergence_threshold: 0.02,
            convergence_window: 11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |key: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("{key}: out of range")))
            }
        };
        check("lr", self.lr >= 0.0 && self.lr.is_finite())?;
        check("momentum", (0.0..1.0).contains(&self.momentum))?;
        check("decay", (0.0..1.0).contains(&self.decay))?;
        check("epsilon", self.epsilon > 0.0)?;
        check("clip", self.clip.is_none_or(|c| c > 0.0))?;
        check("sample_every", self.sample_every > 0)?;
        check("outlier_threshold", self.outlier_threshold >= 0.0)?;
        check("convergence_threshold", self.convergence_threshold >= 0.0)?;
        check("convergence_window", self.convergence_window > 0)
    }
}

/// RMSProp with momentum on the scaled update:
///
/// ```text
/// ms  <- decay * ms + (1 - decay) * g^2
/// mom <- momentum * mom - lr * g / sqrt(ms + eps)
/// p   <- p + mom
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub momentum: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub mean_square: Vec<Vec<f64>>,
    pub velocity: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(cfg: &TrainConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        RmsProp {
            lr: cfg.lr,
            momentum: cfg.momentum,
            decay: cfg.decay,
            epsilon: cfg.epsilon,
            mean_square: zeros.clone(),
            velocity: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() || self.mean_square.len() != params.len() {
            return Err(Error::Contract(format!(
                "rmsprop: {} parameters, {} gradients, {} accumulators",
                params.len(),
                grads.len(),
                self.mean_square.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            let (g, ms, v) = (&grads[i], &mut self.mean_square[i], &mut self.velocity[i]);
            if g.len() != p.len() || ms.len() != p.len() {
                return Err(Error::Contract(format!("rmsprop: shape mismatch for parameter {i}")));
            }
            for k in 0..p.len() {
                ms[k] = self.decay * ms[k] + (1.0 - self.decay) * g[k] * g[k];
                v[k] = self.momentum * v[k] - self.lr * g[k] / (ms[k] + self.epsilon).sqrt();
                p[k] += v[k];
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Metrics of one training iteration; also the CSV row schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    pub loss_sum: f64,
    pub loss_per_item: f64,
    pub loss_per_bit: f64,
    pub outlier: bool,
    pub grad_norm: f64,
}

/// Statistics derived from a sampled record series.
#[derive(Clone, Debug, PartialEq)]
pub struct RunStats {
    /// First sampled iteration whose trailing-window median per-bit loss is
    /// below the threshold.
    pub convergence_iteration: Option<u64>,
    /// Outliers sampled after convergence, or over the whole run if it never
    /// converged.
    pub outlier_count: usize,
    pub final_loss_per_bit: Option<f64>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(sampled: &[TrainRecord], cfg: &TrainConfig) -> RunStats {
    let w = cfg.convergence_window;
    let losses: Vec<f64> = sampled.iter().map(|r| r.loss_per_bit).collect();
    let converged_at = (w..=losses.len())
        .find(|&end| median(&losses[end - w..end]) < cfg.convergence_threshold)
        .map(|end| end - 1);
    let outlier_count = match converged_at {
        Some(idx) => sampled[idx + 1..].iter().filter(|r| r.outlier).count(),
        None => sampled.iter().filter(|r| r.outlier).count(),
    };
    RunStats {
        convergence_iteration: converged_at.map(|i| sampled[i].iteration),
        outlier_count,
        final_loss_per_bit: sampled.last().map(|r| r.loss_per_bit),
    }
}

/// Model, optimizer and iteration counter for one seeded run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: NtmModel,
    pub opt: RmsProp,
    /// Completed iterations.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = NtmModel::new(config.model.clone())?;
        let opt = RmsProp::new(&config.train, model.params());
        Ok(Trainer {
            config,
            model,
            opt,
            iteration: 0,
        })
    }

    /// Episode used by iteration `iteration` (1-based).
    pub fn episode_for(&self, iteration: u64) -> Result<Episode> {
        self.config.task.generate(episode_seed(self.config.model.seed, iteration))
    }

    /// Forward, backward, clip and update on one episode.
    pub fn train_iteration(&mut self, episode: &Episode) -> Result<TrainRecord> {
        let iteration = self.iteration + 1;
        let (loss, mut grads) = self.model.loss_and_grads(episode)?;
        let grad_norm = match self.config.train.clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged { iteration, loss, grad_norm });
        }
        self.opt.step(self.model.params_mut(), &grads)?;
        self.iteration = iteration;
        let loss_per_bit = loss / episode.masked_bits() as f64;
        Ok(TrainRecord {
            iteration,
            loss_sum: loss,
            loss_per_item: loss / episode.meta.item_count as f64,
            loss_per_bit,
            outlier: loss_per_bit > self.config.train.outlier_threshold,
            grad_norm,
        })
    }

    /// Generates the next episode and trains on it.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let ep = self.episode_for(self.iteration + 1)?;
        self.train_iteration(&ep)
    }

    pub fn is_sampled(&self, iteration: u64) -> bool {
        iteration.is_multiple_of(self.config.train.sample_every)
    }

    /// Config, iteration, parameters and optimizer buffers.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = self.config.to_pairs();
        meta.push(("iteration".into(), self.iteration.to_string()));
        let mut tensors = Vec::new();
        for p in self.model.params().iter() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for (label, bufs) in [("opt.ms", &self.opt.mean_square), ("opt.mom", &self.opt.velocity)] {
            for (p, buf) in self.model.params().iter().zip(bufs) {
                tensors.push((
                    format!("{label}.{}", p.name),
                    Tensor::new(p.value.shape().to_vec(), buf.clone()).expect("buffer matches parameter"),
                ));
            }
        }
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let pairs: Vec<(String, String)> = ck.meta.iter().filter(|(k, _)| k != "iteration").cloned().collect();
        let config = ExperimentConfig::from_pairs(&pairs)?;
        let iteration = ck
            .meta("iteration")
            .ok_or_else(|| Error::Format("checkpoint lacks iteration".into()))?
            .parse()
            .map_err(|_| Error::Format("bad iteration in checkpoint".into()))?;
        let mut trainer = Trainer::new(config)?;
        let mut params = trainer.model.params().clone();
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        let fetch = |name: &str| {
            ck.tensor(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
        };
        for (i, name) in names.iter().enumerate() {
            params.set(name, fetch(name)?)?;
            trainer.opt.mean_square[i] = fetch(&format!("opt.ms.{name}"))?.into_data();
            trainer.opt.velocity[i] = fetch(&format!("opt.mom.{name}"))?.into_data();
        }
        trainer.model.load_params(params)?;
        trainer.iteration = iteration;
        Ok(trainer)
    }
}

/// Outcome of [`run_experiment`].
pub struct RunResult {
    pub records: Vec<TrainRecord>,
    pub sampled: Vec<TrainRecord>,
    pub stats: RunStats,
    pub trainer: Trainer,
}

/// Trains `trainer` until `max_iters` completed iterations, calling
/// `on_sample` for each sampled record as soon as it is produced.
pub fn run_trainer(
    mut trainer: Trainer,
    mut on_sample: impl FnMut(&TrainRecord) -> Result<()>,
) -> Result<RunResult> {
    let mut records = Vec::new();
    let mut sampled = Vec::new();
    while trainer.iteration < trainer.config.train.max_iters {
        let rec = trainer.step()?;
        if trainer.is_sampled(rec.iteration) {
            on_sample(&rec)?;
            sampled.push(rec.clone());
        }
        records.push(rec);
    }
    let stats = summarize(&sampled, &trainer.config.train);
    Ok(RunResult {
        records,
        sampled,
        stats,
        trainer,
    })
}

pub fn run_experiment(config: &ExperimentConfig, on_sample: impl FnMut(&TrainRecord) -> Result<()>) -> Result<RunResult> {
    run_trainer(Trainer::new(config.clone())?, on_sample)
}

pub fn write_csv<W: std::io::Write>(out: W, records: &[TrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<TrainRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for r in rdr.deserialize() {
        out.push(r?);
    }
    Ok(out)
}
