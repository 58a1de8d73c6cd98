//! ERM and joint (original + refilled) training loops.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{mine_hard_batch, AugmentedSample, Candidate, DonorPool, MiningConfig};
use crate::error::{Error, Result};
use crate::imaging::io::write_atomic;
use crate::testbed::DatasetSplit;
use crate::tinynet::{Arch, Optimizer, OptimizerKind, TinyNetParams, WeightedSample};

/// Stream of the batch-order generator; parameter init uses stream 0.
const SHUFFLE_STREAM: u64 = 1;

/// Per-step learning-rate multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate at step 0 to zero after the
    /// last step.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: u64, total_steps: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total_steps == 0 => 1.0,
            LrSchedule::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            epochs: 15,
            batch_size: 32,
            optimizer: OptimizerKind::adam(),
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(
                "weight_decay must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Settings specific to joint training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SscaConfig {
    pub mining: MiningConfig,
    /// Weight of the mean loss over refilled samples.
    pub aug_weight: f64,
    /// Epochs of plain ERM before mining starts.
    pub warmup_epochs: usize,
    /// Mine every `refresh_interval` steps and reuse the last hard batch in
    /// between; 1 mines at every step.
    pub refresh_interval: usize,
}

impl Default for SscaConfig {
    fn default() -> Self {
        Self {
            mining: MiningConfig::default(),
            aug_weight: 1.0,
            warmup_epochs: 10,
            refresh_interval: 1,
        }
    }
}

impl SscaConfig {
    pub fn validate(&self) -> Result<()> {
        self.mining.validate()?;
        if !(self.aug_weight >= 0.0 && self.aug_weight.is_finite()) {
            return Err(Error::InvalidArgument(
                "aug_weight must be nonnegative".into(),
            ));
        }
        if self.refresh_interval == 0 {
            return Err(Error::InvalidArgument(
                "refresh_interval must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Loss bookkeeping for one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    /// Global 0-based step index.
    pub step: u64,
    pub ce_orig: Vec<f64>,
    pub ce_aug: Vec<f64>,
    pub aug_weight: f64,
    /// The optimized objective as accumulated during the gradient pass.
    pub joint: f64,
}

impl StepLoss {
    pub fn mean_orig(&self) -> f64 {
        self.ce_orig.iter().sum::<f64>() / self.ce_orig.len() as f64
    }

    pub fn mean_aug(&self) -> Option<f64> {
        (!self.ce_aug.is_empty())
            .then(|| self.ce_aug.iter().sum::<f64>() / self.ce_aug.len() as f64)
    }

    /// `mean(ce_orig) + aug_weight · mean(ce_aug)`, dropping the second term
    /// for an empty hard batch.
    pub fn recompute_joint(&self) -> f64 {
        self.mean_orig() + self.mean_aug().map_or(0.0, |m| self.aug_weight * m)
    }
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,n_orig,n_aug,loss_orig,loss_aug,loss_joint";

pub fn loss_log_csv(log: &[StepLoss]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(LOSS_CSV_HEADER.split(','))?;
    for s in log {
        w.write_record([
            s.epoch.to_string(),
            s.step.to_string(),
            s.ce_orig.len().to_string(),
            s.ce_aug.len().to_string(),
            s.mean_orig().to_string(),
            s.mean_aug().map(|m| m.to_string()).unwrap_or_default(),
            s.joint.to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))
}

pub fn write_loss_csv(path: &Path, log: &[StepLoss]) -> Result<()> {
    write_atomic(path, &loss_log_csv(log)?)
}

/// Hooks into the training loop, mainly for tests and progress output.
pub trait TrainObserver {
    /// Called with the exact parameters used to score candidates of `step`.
    fn on_mining(&mut self, _step: u64, _scorer: &TinyNetParams) {}
    /// Called after the update of `step` has been applied.
    fn on_step(&mut self, _step: u64, _params: &TinyNetParams, _loss: &StepLoss) {}
    fn on_epoch(&mut self, _epoch: usize, _params: &TinyNetParams) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub steps_mined: u64,
    pub attributed: usize,
    pub kept: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TinyNetParams,
    pub log: Vec<StepLoss>,
    pub mining: MiningStats,
}

struct JointSource<'a> {
    ssca: &'a SscaConfig,
    pool: &'a DonorPool,
}

fn check_split(split: &DatasetSplit, arch: &Arch) -> Result<()> {
    if split.is_empty() {
        return Err(Error::EmptySource(format!(
            "split {} has no samples",
            split.name
        )));
    }
    if split.labels.len() != split.len() {
        return Err(Error::dims("labels and images differ in length"));
    }
    if let Some(&l) = split.labels.iter().find(|&&l| l >= arch.num_classes) {
        return Err(Error::InvalidArgument(format!("label {l} out of range")));
    }
    Ok(())
}

fn run(
    train: &DatasetSplit,
    arch: &Arch,
    cfg: &TrainConfig,
    joint: Option<JointSource<'_>>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_split(train, arch)?;
    let mut params = TinyNetParams::init(arch.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, &params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(SHUFFLE_STREAM);
    let mut sampler = joint.as_ref().map(|j| j.pool.sampler(cfg.seed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total_steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size)) as u64;
    let mut log = Vec::new();
    let mut stats = MiningStats::default();
    let mut cached: Vec<AugmentedSample> = Vec::new();
    let mut step: u64 = 0;
    let mut mined_since = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len() as f64;
            let mut samples: Vec<WeightedSample> = chunk
                .iter()
                .map(|&i| WeightedSample {
                    image: &train.images[i],
                    label: train.labels[i],
                    weight: 1.0 / n,
                })
                .collect();
            let mut aug_weight = 0.0;
            if let (Some(j), Some(sampler)) = (&joint, sampler.as_mut()) {
                aug_weight = j.ssca.aug_weight;
                if epoch >= j.ssca.warmup_epochs {
                    if mined_since % j.ssca.refresh_interval == 0 {
                        observer.on_mining(step, &params);
                        let candidates: Vec<Candidate> = chunk
                            .iter()
                            .map(|&i| Candidate {
                                image: &train.images[i],
                                label: train.labels[i],
                                source_index: i,
                            })
                            .collect();
                        let mined =
                            mine_hard_batch(&candidates, &params, j.pool, &j.ssca.mining, sampler)?;
                        stats.steps_mined += 1;
                        stats.attributed += mined.candidates.len();
                        stats.kept += mined.kept.len();
                        cached = mined.kept;
                    }
                    mined_since += 1;
                    let m = cached.len() as f64;
                    samples.extend(cached.iter().map(|a| WeightedSample {
                        image: &a.image,
                        label: a.label,
                        weight: j.ssca.aug_weight / m,
                    }));
                }
            }
            let (loss, grads) = params.loss_and_grad(&samples)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            let k = chunk.len();
            let record = StepLoss {
                epoch,
                step,
                ce_orig: loss.per_sample[..k].to_vec(),
                ce_aug: loss.per_sample[k..].to_vec(),
                aug_weight,
                joint: loss.total,
            };
            opt.set_learning_rate(cfg.learning_rate * cfg.lr_schedule.factor(step, total_steps));
            opt.step(&mut params, &grads)?;
            observer.on_step(step, &params, &record);
            log.push(record);
            step += 1;
        }
        observer.on_epoch(epoch, &params);
    }
    Ok(TrainOutcome {
        params,
        log,
        mining: stats,
    })
}

/// Minimizes the mean cross-entropy over shuffled mini-batches.
pub fn train_erm(
    train: &DatasetSplit,
    arch: &Arch,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    run(train, arch, cfg, None, observer)
}

/// Joint training: after the warmup epochs, each step mines a hard batch
/// against the current parameters and descends on
/// `mean CE(originals) + aug_weight · mean CE(hard batch)`.
///
/// Batch order and initialization match [`train_erm`] for equal seeds;
/// donor draws come from a separate stream, so when nothing is ever mined
/// the two produce bit-identical parameters.
pub fn train_ssca(
    train: &DatasetSplit,
    arch: &Arch,
    cfg: &TrainConfig,
    ssca: &SscaConfig,
    pool: &DonorPool,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    ssca.validate()?;
    if let Some(img) = train.images.first() {
        pool.check_dims(img)?;
    }
    run(train, arch, cfg, Some(JointSource { ssca, pool }), observer)
}
