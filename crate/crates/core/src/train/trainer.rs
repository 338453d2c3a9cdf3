use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::schedule::{LrSchedule, TaskRatios, TaskSchedule};
use crate::data::{Batcher, Corpus, MaskingConfig, Pool, Task, TaskBatch};
use crate::error::{Error, Result};
use crate::model::StptModel;
use crate::numerics::{Adam, AdamConfig, Graph, Tensor};
use crate::seeds;
use crate::tasks::{
    ssl_loss_from_targets, ssl_targets, target_concentration, task_loss, ContrastiveConfig, LossOptions, SslLoss,
    TaskWeights,
};

/// The three training stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Text-to-text only.
    T2tPretrain,
    /// All four subtasks interleaved.
    Joint,
    /// Text-to-text and speech-to-text.
    Finetune,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::T2tPretrain => 1,
            Stage::Joint => 2,
            Stage::Finetune => 3,
        }
    }
}

/// Per-task batch sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSizes {
    pub t2t: usize,
    pub ssl: usize,
    pub s2p: usize,
    pub s2t: usize,
}

impl BatchSizes {
    pub const fn uniform(n: usize) -> Self {
        Self {
            t2t: n,
            ssl: n,
            s2p: n,
            s2t: n,
        }
    }

    pub fn get(&self, task: Task) -> usize {
        match task {
            Task::T2t => self.t2t,
            Task::Ssl => self.ssl,
            Task::S2p => self.s2p,
            Task::S2t => self.s2t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub warmup: u64,
    pub max_updates: u64,
    pub ratios: TaskRatios,
    pub batch_sizes: BatchSizes,
    /// Mask supervised speech inputs (S2P, S2T) with their span plans.
    pub corrupt_supervised: bool,
    /// Progress is logged every this many updates (0 disables it).
    pub log_every: u64,
}

impl StageConfig {
    pub fn t2t_pretrain() -> Self {
        Self {
            lr: 1e-3,
            warmup: 200,
            max_updates: 2000,
            ratios: TaskRatios::T2T_ONLY,
            batch_sizes: BatchSizes::uniform(8),
            corrupt_supervised: true,
            log_every: 100,
        }
    }

    pub fn joint() -> Self {
        Self {
            lr: 1e-3,
            warmup: 300,
            max_updates: 5000,
            ratios: TaskRatios::JOINT,
            batch_sizes: BatchSizes::uniform(8),
            corrupt_supervised: true,
            log_every: 100,
        }
    }

    pub fn finetune() -> Self {
        Self {
            lr: 5e-4,
            warmup: 100,
            max_updates: 1000,
            ratios: TaskRatios::FINETUNE,
            batch_sizes: BatchSizes::uniform(8),
            corrupt_supervised: true,
            log_every: 100,
        }
    }
}

/// A stage table as written; missing keys fall back to that stage's defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StagePatch {
    lr: Option<f64>,
    warmup: Option<u64>,
    max_updates: Option<u64>,
    ratios: Option<TaskRatios>,
    batch_sizes: Option<BatchSizes>,
    corrupt_supervised: Option<bool>,
    log_every: Option<u64>,
}

impl StagePatch {
    fn apply(self, base: StageConfig) -> StageConfig {
        StageConfig {
            lr: self.lr.unwrap_or(base.lr),
            warmup: self.warmup.unwrap_or(base.warmup),
            max_updates: self.max_updates.unwrap_or(base.max_updates),
            ratios: self.ratios.unwrap_or(base.ratios),
            batch_sizes: self.batch_sizes.unwrap_or(base.batch_sizes),
            corrupt_supervised: self.corrupt_supervised.unwrap_or(base.corrupt_supervised),
            log_every: self.log_every.unwrap_or(base.log_every),
        }
    }
}

fn stage1_de<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    Ok(StagePatch::deserialize(d)?.apply(StageConfig::t2t_pretrain()))
}

fn stage2_de<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    Ok(StagePatch::deserialize(d)?.apply(StageConfig::joint()))
}

fn stage3_de<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    Ok(StagePatch::deserialize(d)?.apply(StageConfig::finetune()))
}

/// Ablations of the three-stage recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Start joint pre-training from the random initialization.
    pub skip_t2t_pretrain: bool,
    /// Remove speech-to-text batches from joint pre-training.
    pub drop_s2t: bool,
    /// Fine-tune directly from the text-to-text checkpoint.
    pub drop_joint_pretrain: bool,
}

/// Abort when more than `threshold` of the self-supervised target mass sits
/// on two phonemes for `patience` consecutive batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseConfig {
    pub threshold: f64,
    pub patience: usize,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            patience: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Root seed of batch sampling, masking and task order. Supplied by the
    /// run configuration rather than the document.
    #[serde(skip)]
    pub seed: u64,
    #[serde(deserialize_with = "stage1_de")]
    pub stage1: StageConfig,
    #[serde(deserialize_with = "stage2_de")]
    pub stage2: StageConfig,
    #[serde(deserialize_with = "stage3_de")]
    pub stage3: StageConfig,
    pub adam: AdamConfig,
    pub ssl_loss: SslLoss,
    pub contrastive: ContrastiveConfig,
    pub weights: TaskWeights,
    pub masking: MaskingConfig,
    pub ablation: Ablation,
    pub collapse: CollapseConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage1: StageConfig::t2t_pretrain(),
            stage2: StageConfig::joint(),
            stage3: StageConfig::finetune(),
            adam: AdamConfig::default(),
            ssl_loss: SslLoss::Kl,
            contrastive: ContrastiveConfig::default(),
            weights: TaskWeights::default(),
            masking: MaskingConfig::default(),
            ablation: Ablation::default(),
            collapse: CollapseConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::T2tPretrain => &self.stage1,
            Stage::Joint => &self.stage2,
            Stage::Finetune => &self.stage3,
        }
    }

    /// Ratios actually scheduled in `stage`, after ablations.
    pub fn effective_ratios(&self, stage: Stage) -> TaskRatios {
        let mut r = self.stage(stage).ratios;
        if stage == Stage::Joint && self.ablation.drop_s2t {
            r.s2t = 0.0;
        }
        r
    }

    pub fn validate(&self) -> Result<()> {
        for (name, stage, allowed) in [
            ("train.stage1", Stage::T2tPretrain, &[Task::T2t][..]),
            ("train.stage2", Stage::Joint, &Task::ALL[..]),
            ("train.stage3", Stage::Finetune, &[Task::T2t, Task::S2t][..]),
        ] {
            let s = self.stage(stage);
            if !(s.lr.is_finite() && s.lr > 0.0) {
                return Err(Error::config(format!("{name}.lr"), "must be positive"));
            }
            if let Some(t) = s.ratios.active().into_iter().find(|t| !allowed.contains(t)) {
                let names: Vec<_> = allowed.iter().map(|t| t.label()).collect();
                return Err(Error::config(
                    format!("{name}.ratios.{}", t.label().to_lowercase()),
                    format!("{t} cannot be scheduled in this stage (allowed: {})", names.join(", ")),
                ));
            }
            TaskSchedule::new(self.effective_ratios(stage), 0)
                .map_err(|e| Error::config(format!("{name}.ratios"), e.to_string()))?;
            for t in s.ratios.active() {
                if s.batch_sizes.get(t) == 0 {
                    return Err(Error::config(
                        format!("{name}.batch_sizes.{}", t.label().to_lowercase()),
                        "must be positive for a scheduled task",
                    ));
                }
            }
        }
        self.masking.validate()?;
        if self.contrastive.n_distractors == 0 || !(self.contrastive.temperature > 0.0) {
            return Err(Error::config(
                "train.contrastive",
                "needs at least one distractor and a positive temperature",
            ));
        }
        if !(0.0..=1.0).contains(&self.collapse.threshold) || self.collapse.patience == 0 {
            return Err(Error::config(
                "train.collapse",
                "threshold must lie in [0, 1] and patience be positive",
            ));
        }
        Ok(())
    }

    pub fn loss_options(&self, stage: Stage) -> LossOptions {
        LossOptions {
            ssl: self.ssl_loss,
            contrastive: self.contrastive,
            corrupt_supervised: self.stage(stage).corrupt_supervised,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    /// One-based update index within the stage.
    pub update: u64,
    pub task: Task,
    pub loss: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "update\ttask\tloss\tlr";

impl LogRecord {
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.update, self.task, self.loss, self.lr)
    }
}

/// Parses a training log. The header and lines starting with `#` are
/// skipped.
pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') || line == LOG_HEADER {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("log line {}: {what}", i + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad("expected 4 tab-separated columns"));
        }
        out.push(LogRecord {
            update: cols[0].parse().map_err(|_| bad("bad update"))?,
            task: cols[1].parse().map_err(|_| bad("bad task"))?,
            loss: cols[2].parse().map_err(|_| bad("bad loss"))?,
            lr: cols[3].parse().map_err(|_| bad("bad lr"))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct CollapseDetector {
    config: CollapseConfig,
    run: usize,
}

impl CollapseDetector {
    /// Returns true once the concentration stayed above threshold for
    /// `patience` consecutive observations.
    fn observe(&mut self, concentration: f64) -> bool {
        if concentration > self.config.threshold {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run >= self.config.patience
    }
}

/// Result of a stage: the final checkpoint and the per-update log.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// Runs single-task updates of one stage. Batches, masks and task order are
/// pure functions of the seed, stage and update index, so a trainer restored
/// from a mid-stage checkpoint continues exactly as an uninterrupted one.
#[derive(Debug)]
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    config: &'a TrainConfig,
    stage: Stage,
    schedule: TaskSchedule,
    lr: LrSchedule,
    model: StptModel,
    adam: Adam,
    update: u64,
    collapse: CollapseDetector,
    run: Option<toml::Table>,
}

impl<'a> Trainer<'a> {
    /// Continues `init` if it is a checkpoint of the same stage with
    /// optimizer state, otherwise starts the stage with a fresh optimizer.
    pub fn new(config: &'a TrainConfig, corpus: &'a Corpus, stage: Stage, init: Checkpoint) -> Result<Self> {
        config.validate()?;
        let n = stage.number();
        let sc = config.stage(stage);
        let schedule = TaskSchedule::new(
            config.effective_ratios(stage),
            seeds::derive(config.seed, "schedule", &[n as u64]),
        )?;
        let (adam, update) = match init.optimizer {
            Some(adam) if init.stage == n => (adam, init.update),
            _ => (Adam::new(init.model.params(), config.adam), 0),
        };
        Ok(Self {
            corpus,
            config,
            stage,
            schedule,
            lr: LrSchedule::new(sc.lr, sc.warmup),
            model: init.model,
            adam,
            update,
            collapse: CollapseDetector {
                config: config.collapse,
                run: 0,
            },
            run: init.run,
        })
    }

    pub fn model(&self) -> &StptModel {
        &self.model
    }

    pub fn schedule(&self) -> &TaskSchedule {
        &self.schedule
    }

    /// Updates completed so far.
    pub fn update(&self) -> u64 {
        self.update
    }

    pub fn is_done(&self) -> bool {
        self.update >= self.config.stage(self.stage).max_updates
    }

    /// The batch of zero-based update `u`.
    pub fn batch(&self, u: u64) -> Result<TaskBatch> {
        let task = self.schedule.task_at(u);
        let sc = self.config.stage(self.stage);
        let batcher = Batcher::new(self.corpus, self.model.config(), self.config.masking);
        let seed = seeds::derive(self.config.seed, "batch", &[self.stage.number() as u64, u]);
        batcher.sample(task, task.training_pool(), sc.batch_sizes.get(task), seed)
    }

    /// Weighted loss of `batch` at the current parameters, without updating.
    pub fn loss(&self, batch: &TaskBatch, u: u64) -> Result<f64> {
        let mut g = Graph::inference();
        let (loss, _) = self.forward(&mut g, batch, u)?;
        Ok(g.scalar(loss))
    }

    fn forward(&self, g: &mut Graph, batch: &TaskBatch, u: u64) -> Result<(crate::numerics::Var, Option<f64>)> {
        let options = self.config.loss_options(self.stage);
        let seed = seeds::derive(self.config.seed, "loss", &[self.stage.number() as u64, u]);
        let mut concentration = None;
        let raw = if batch.task == Task::Ssl {
            let targets = ssl_targets(&self.model, batch)?;
            concentration = target_concentration(batch, &targets)?;
            match options.ssl {
                SslLoss::Kl => ssl_loss_from_targets(&self.model, g, batch, &targets)?,
                // Every masked utterance has a lone frame: no distractors, no update.
                SslLoss::Contrastive => match task_loss(&self.model, g, batch, &options, seed) {
                    Err(Error::Degenerate(msg)) => {
                        log::warn!("stage {} update {}: skipping batch: {msg}", self.stage.number(), u + 1);
                        g.constant(Tensor::scalar(0.0))
                    }
                    other => other?,
                },
            }
        } else {
            task_loss(&self.model, g, batch, &options, seed)?
        };
        let w = self.config.weights.weight(batch.task);
        let loss = if w == 1.0 { raw } else { g.scale(raw, w)? };
        Ok((loss, concentration))
    }

    /// Performs the next scheduled update.
    pub fn step(&mut self) -> Result<LogRecord> {
        let u = self.update;
        let batch = self.batch(u)?;
        let lr = self.lr.at(u + 1);
        let mut g = Graph::new();
        let (loss, concentration) = self.forward(&mut g, &batch, u)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "stage {} update {}: {} loss is {value} at lr {lr:.3e} (batch {})",
                self.stage.number(),
                u + 1,
                batch.task,
                batch.ids.join(",")
            )));
        }
        if let Some(c) = concentration {
            if self.collapse.observe(c) {
                return Err(Error::Divergence(format!(
                    "stage {} update {}: self-supervised targets collapsed, {:.1}% of the mass on two phonemes \
                     for {} consecutive batches; the masked prediction has a trivial solution without \
                     a well-initialized phoneme embedding",
                    self.stage.number(),
                    u + 1,
                    100.0 * c,
                    self.collapse.run
                )));
            }
        }
        g.backward(loss)?;
        let grads = g.param_grads(self.model.params().len())?;
        self.adam.step(self.model.params_mut(), &grads, lr)?;
        self.update += 1;
        let record = LogRecord {
            update: self.update,
            task: batch.task,
            loss: value,
            lr,
        };
        let every = self.config.stage(self.stage).log_every;
        if every > 0 && self.update % every == 0 {
            log::info!(
                "stage {} update {}/{}: {} loss {:.4} lr {:.2e}",
                self.stage.number(),
                self.update,
                self.config.stage(self.stage).max_updates,
                batch.task,
                value,
                lr
            );
        }
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.adam.clone()),
            stage: self.stage.number(),
            update: self.update,
            run: self.run.clone(),
        }
    }

    /// Runs until `max_updates` and returns the final checkpoint.
    pub fn run(mut self) -> Result<StageOutput> {
        let mut log = Vec::new();
        while !self.is_done() {
            log.push(self.step()?);
        }
        Ok(StageOutput {
            checkpoint: self.checkpoint(),
            log,
        })
    }
}

/// Stage 1: text-to-text pre-training. Only the phoneme embedding, shared
/// encoder and decoder receive gradients. With `skip_t2t_pretrain` the
/// initial checkpoint is returned unchanged.
pub fn run_stage1_t2t(config: &TrainConfig, corpus: &Corpus, init: Checkpoint) -> Result<StageOutput> {
    if config.ablation.skip_t2t_pretrain {
        return Ok(StageOutput {
            checkpoint: init,
            log: Vec::new(),
        });
    }
    Trainer::new(config, corpus, Stage::T2tPretrain, init)?.run()
}

/// Stage 2: joint pre-training on all subtasks in scheduled proportion.
/// With `drop_joint_pretrain` the input checkpoint is returned unchanged.
pub fn run_stage2_joint(config: &TrainConfig, corpus: &Corpus, init: Checkpoint) -> Result<StageOutput> {
    if config.ablation.drop_joint_pretrain {
        return Ok(StageOutput {
            checkpoint: init,
            log: Vec::new(),
        });
    }
    Trainer::new(config, corpus, Stage::Joint, init)?.run()
}

/// Stage 3: fine-tuning on text-to-text and speech-to-text.
pub fn run_stage3_finetune(config: &TrainConfig, corpus: &Corpus, init: Checkpoint) -> Result<StageOutput> {
    Trainer::new(config, corpus, Stage::Finetune, init)?.run()
}

/// Mean unweighted loss of `task` over `n_batches` batches from `pool`,
/// with masking as configured for `stage`. Parameters are not modified.
pub fn held_out_loss(
    model: &StptModel,
    corpus: &Corpus,
    config: &TrainConfig,
    stage: Stage,
    (task, pool): (Task, Pool),
    n_batches: usize,
    seed: u64,
) -> Result<f64> {
    if n_batches == 0 {
        return Err(Error::Contract("held_out_loss needs at least one batch".into()));
    }
    let batcher = Batcher::new(corpus, model.config(), config.masking);
    let options = config.loss_options(stage);
    let size = config.stage(stage).batch_sizes.get(task).max(1);
    let mut total = 0.0;
    for i in 0..n_batches {
        let s = seeds::derive(seed, "held-out", &[i as u64]);
        let batch = batcher.sample(task, pool, size, s)?;
        let mut g = Graph::inference();
        let loss = task_loss(model, &mut g, &batch, &options, s)?;
        total += g.scalar(loss);
    }
    Ok(total / n_batches as f64)
}
