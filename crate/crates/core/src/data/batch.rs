use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Pool, Record, TaskMode};
use super::utterance::phonemize;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;
use crate::seeds;
use crate::tasks::{
    sample_spans_with, text_mask_flags, MaskPlan, SPAN_LENGTH, SSL_MASK_RATE, SUPERVISED_MASK_RATE, TEXT_MASK_RATE,
};

/// The four subtasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "T2T")]
    T2t,
    #[serde(rename = "SSL")]
    Ssl,
    #[serde(rename = "S2P")]
    S2p,
    #[serde(rename = "S2T")]
    S2t,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::T2t, Task::Ssl, Task::S2p, Task::S2t];

    pub fn label(self) -> &'static str {
        match self {
            Task::T2t => "T2T",
            Task::Ssl => "SSL",
            Task::S2p => "S2P",
            Task::S2t => "S2T",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn uses_speech(self) -> bool {
        self != Task::T2t
    }

    /// Pool a training batch of this task is drawn from.
    pub fn training_pool(self) -> Pool {
        match self {
            Task::T2t => Pool::Text,
            Task::Ssl => Pool::Unlabeled,
            Task::S2p | Task::S2t => Pool::Supervised,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Contract(format!("unknown task `{s}` (expected T2T, SSL, S2P or S2T)")))
    }
}

/// Masking rates applied when batches are built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    /// Span-start probability of self-supervised batches.
    pub ssl_rate: f64,
    /// Span-start probability of speech-to-phoneme and speech-to-text batches.
    pub supervised_rate: f64,
    pub span_length: usize,
    /// Minimum fraction of words masked in text-to-text inputs (recognition
    /// mode only; translation inputs are left intact).
    pub text_rate: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            ssl_rate: SSL_MASK_RATE,
            supervised_rate: SUPERVISED_MASK_RATE,
            span_length: SPAN_LENGTH,
            text_rate: TEXT_MASK_RATE,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("masking.ssl_rate", self.ssl_rate),
            ("masking.supervised_rate", self.supervised_rate),
            ("masking.text_rate", self.text_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(f, "must lie in [0, 1]"));
            }
        }
        if self.span_length == 0 {
            return Err(Error::config("masking.span_length", "must be positive"));
        }
        Ok(())
    }
}

/// Padded speech input of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechBatch {
    /// `[batch·max_frames × feature_dim]`, zero-padded.
    pub frames: Tensor,
    pub frame_lengths: Vec<usize>,
    /// Context lengths after the feature extractor.
    pub context_lengths: Vec<usize>,
    /// One mask plan per utterance over its context frames.
    pub plans: Vec<MaskPlan>,
}

/// A batch tagged with its subtask and the inputs that subtask consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub task: Task,
    pub ids: Vec<String>,
    pub speech: Option<SpeechBatch>,
    /// Phonemized text input.
    pub phonemes: Option<Vec<Vec<usize>>>,
    /// Decoder targets ending with EOS (no BOS).
    pub targets: Option<Vec<Vec<usize>>>,
    /// Phoneme label of every context frame.
    pub alignments: Option<Vec<Vec<usize>>>,
}

fn missing(task: Task, field: &str) -> Error {
    Error::Data(format!("{task} batch has no `{field}`"))
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn require_speech(&self) -> Result<&SpeechBatch> {
        self.speech.as_ref().ok_or_else(|| missing(self.task, "frames"))
    }

    pub fn require_phonemes(&self) -> Result<&[Vec<usize>]> {
        self.phonemes.as_deref().ok_or_else(|| missing(self.task, "phonemes"))
    }

    pub fn require_targets(&self) -> Result<&[Vec<usize>]> {
        self.targets.as_deref().ok_or_else(|| missing(self.task, "target"))
    }

    pub fn require_alignments(&self) -> Result<&[Vec<usize>]> {
        self.alignments.as_deref().ok_or_else(|| missing(self.task, "alignment"))
    }

    /// Same batch with every mask plan emptied.
    pub fn without_masking(&self) -> Self {
        let mut b = self.clone();
        if let Some(s) = b.speech.as_mut() {
            s.plans = s.context_lengths.iter().map(|&l| MaskPlan::empty(l)).collect();
        }
        b
    }
}

/// Builds [`TaskBatch`]es from a corpus for a given model geometry.
#[derive(Debug, Clone, Copy)]
pub struct Batcher<'a> {
    pub corpus: &'a Corpus,
    pub model: &'a ModelConfig,
    pub masking: MaskingConfig,
}

impl<'a> Batcher<'a> {
    pub fn new(corpus: &'a Corpus, model: &'a ModelConfig, masking: MaskingConfig) -> Self {
        Self { corpus, model, masking }
    }

    /// `batch_size` distinct utterances drawn uniformly from `pool` (the
    /// whole pool if smaller).
    pub fn sample(&self, task: Task, pool: Pool, batch_size: usize, seed: u64) -> Result<TaskBatch> {
        let records = self.corpus.pool(pool);
        if records.is_empty() {
            return Err(Error::Data(format!("pool `{}` is empty", pool.name())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "pick", &[]));
        let mut idx = sample(&mut rng, records.len(), batch_size.min(records.len())).into_vec();
        idx.sort_unstable();
        let picked: Vec<&Record> = idx.iter().map(|&i| &records[i]).collect();
        self.build(task, &picked, seed)
    }

    /// Batch of exactly `records`, in order. `seed` drives the masking.
    pub fn build(&self, task: Task, records: &[&Record], seed: u64) -> Result<TaskBatch> {
        if records.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "mask", &[]));
        let mut batch = TaskBatch {
            task,
            ids: records.iter().map(|r| r.id.clone()).collect(),
            speech: None,
            phonemes: None,
            targets: None,
            alignments: None,
        };
        if task.uses_speech() {
            let rate = if task == Task::Ssl {
                self.masking.ssl_rate
            } else {
                self.masking.supervised_rate
            };
            batch.speech = Some(self.speech(task, records, rate, &mut rng)?);
        }
        match task {
            Task::T2t => {
                let mut inputs = Vec::new();
                let mut targets = Vec::new();
                for r in records {
                    let words = r.words.as_ref().ok_or_else(|| missing(task, "source"))?;
                    let noisy: Vec<Option<usize>> = match self.corpus.config.mode {
                        TaskMode::Asr => {
                            let flags = text_mask_flags(words.len(), self.masking.text_rate, rng.random())?;
                            words.iter().zip(flags).map(|(&w, m)| (!m).then_some(w)).collect()
                        }
                        TaskMode::St => words.iter().map(|&w| Some(w)).collect(),
                    };
                    inputs.push(phonemize(&noisy, &self.corpus.lexicon));
                    targets.push(r.target.clone().ok_or_else(|| missing(task, "target"))?);
                }
                batch.phonemes = Some(inputs);
                batch.targets = Some(targets);
            }
            Task::Ssl => {}
            Task::S2p => {
                let alignments = records
                    .iter()
                    .map(|r| r.alignment().ok_or_else(|| missing(task, "alignment")))
                    .collect::<Result<Vec<_>>>()?;
                batch.alignments = Some(alignments);
            }
            Task::S2t => {
                let targets = records
                    .iter()
                    .map(|r| r.target.clone().ok_or_else(|| missing(task, "target")))
                    .collect::<Result<Vec<_>>>()?;
                batch.targets = Some(targets);
            }
        }
        Ok(batch)
    }

    fn speech(&self, task: Task, records: &[&Record], rate: f64, rng: &mut ChaCha8Rng) -> Result<SpeechBatch> {
        let f = self.corpus.config.feature_dim;
        if f != self.model.input_dim {
            return Err(Error::Data(format!(
                "corpus frames have {f} features but the model expects {}",
                self.model.input_dim
            )));
        }
        let mut lengths = Vec::with_capacity(records.len());
        for r in records {
            lengths.push(r.frames.ok_or_else(|| missing(task, "frames"))?.n_frames);
        }
        let max = *lengths.iter().max().unwrap();
        let mut data = vec![0.0; records.len() * max * f];
        for (b, r) in records.iter().enumerate() {
            let src = self
                .corpus
                .frames_of(r)
                .ok_or_else(|| Error::Data(format!("{}: frames out of range", r.id)))?;
            data[b * max * f..b * max * f + src.len()].copy_from_slice(src);
        }
        let context_lengths = lengths
            .iter()
            .map(|&l| self.model.context_len(l))
            .collect::<Result<Vec<_>>>()?;
        let plans = context_lengths
            .iter()
            .map(|&l| sample_spans_with(rng, l, rate, self.masking.span_length))
            .collect::<Result<Vec<_>>>()?;
        Ok(SpeechBatch {
            frames: Tensor::matrix(records.len() * max, f, data)?,
            frame_lengths: lengths,
            context_lengths,
            plans,
        })
    }
}
