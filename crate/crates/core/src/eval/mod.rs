//! Greedy decoding and the error-rate and BLEU metrics of the downstream
//! recognition and translation tasks.

mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use metrics::{bleu, corpus_error_rate, edit_distance, word_error_rate, BLEU_ORDER};

use crate::data::vocab::{BOS, EOS, PAD, SPACE};
use crate::data::{Batcher, Corpus, MaskingConfig, Pool, Task, TaskMode};
use crate::error::{Error, Result};
use crate::model::{Seq, StptModel};
use crate::numerics::{Graph, Tensor};

/// One decoded sequence without BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// `max_len` was reached before EOS.
    pub truncated: bool,
}

/// Greedy search for a batch of `n` sequences. `next` receives the current
/// prefixes (all starting with BOS, equal lengths) and returns one row of
/// scores per sequence for the next position.
pub fn greedy_search<F>(n: usize, max_len: usize, mut next: F) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
{
    let mut prefixes = vec![vec![BOS]; n];
    let mut done = vec![false; n];
    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let scores = next(&prefixes)?;
        if scores.len() != n {
            return Err(Error::Contract(format!("greedy_search: {} score rows for {n} sequences", scores.len())));
        }
        for (b, row) in scores.iter().enumerate() {
            let tok = if done[b] {
                PAD
            } else {
                row.iter()
                    .enumerate()
                    .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(&x.0)))
                    .map(|(i, _)| i)
                    .ok_or_else(|| Error::Contract("greedy_search: empty score row".into()))?
            };
            done[b] |= tok == EOS;
            prefixes[b].push(tok);
        }
    }
    Ok(prefixes
        .into_iter()
        .map(|p| {
            let body = &p[1..];
            match body.iter().position(|&t| t == EOS) {
                Some(i) => Hypothesis {
                    tokens: body[..i].to_vec(),
                    truncated: false,
                },
                None => Hypothesis {
                    tokens: body.to_vec(),
                    truncated: true,
                },
            }
        })
        .collect())
}

/// Greedy decoding of padded speech `[batch·max_frames × f]` without masking.
pub fn greedy_decode(model: &StptModel, frames: &Tensor, frame_lengths: &[usize], max_len: usize) -> Result<Vec<Hypothesis>> {
    let (memory, batch, len, lengths) = {
        let mut g = Graph::inference();
        let m = model.speech_memory(&mut g, frames, frame_lengths, None)?;
        (g.value(m.x).clone(), m.batch, m.len, m.lengths)
    };
    greedy_search(batch, max_len, |prefixes| {
        let mut g = Graph::inference();
        let mem = Seq {
            x: g.constant(memory.clone()),
            batch,
            len,
            lengths: lengths.clone(),
        };
        let logits = model.decode(&mut g, &mem, prefixes)?;
        let logits = g.value(logits);
        let n = prefixes[0].len();
        Ok((0..batch).map(|b| logits.row(b * n + n - 1).to_vec()).collect())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub batch_size: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_len: 64,
            batch_size: 16,
        }
    }
}

/// Metrics of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n_samples: usize,
    pub token_error_rate: f64,
    pub word_error_rate: f64,
    pub bleu: f64,
    /// Hypotheses cut off at `max_len`.
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub decode: DecodeConfig,
    pub splits: BTreeMap<String, SplitMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Words of a token sequence: spans between spaces in recognition mode,
/// single tokens in translation mode. Special tokens are dropped.
pub fn words_of(tokens: &[usize], mode: TaskMode) -> Vec<Vec<usize>> {
    let body = tokens.iter().copied().filter(|&t| t != BOS && t != EOS && t != PAD);
    match mode {
        TaskMode::Asr => {
            let v: Vec<usize> = body.collect();
            v.split(|&t| t == SPACE).filter(|w| !w.is_empty()).map(<[usize]>::to_vec).collect()
        }
        TaskMode::St => body.map(|t| vec![t]).collect(),
    }
}

/// Decodes every utterance of `pool` and scores it against its target.
pub fn evaluate_split(model: &StptModel, corpus: &Corpus, pool: Pool, config: &DecodeConfig) -> Result<SplitMetrics> {
    let records = corpus.pool(pool);
    if records.is_empty() {
        return Err(Error::Data(format!("pool `{}` is empty", pool.name())));
    }
    if config.batch_size == 0 {
        return Err(Error::config("eval.decode.batch_size", "must be positive"));
    }
    let batcher = Batcher::new(corpus, model.config(), MaskingConfig::default());
    let mut tokens = Vec::new();
    let mut words = Vec::new();
    let mut truncated = 0;
    for chunk in records.chunks(config.batch_size) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = batcher.build(Task::S2t, &refs, 0)?;
        let speech = batch.require_speech()?;
        let hyps = greedy_decode(model, &speech.frames, &speech.frame_lengths, config.max_len)?;
        for (h, target) in hyps.into_iter().zip(batch.require_targets()?) {
            truncated += usize::from(h.truncated);
            let reference: Vec<usize> = target.iter().copied().filter(|&t| t != EOS).collect();
            words.push((words_of(&h.tokens, corpus.config.mode), words_of(&reference, corpus.config.mode)));
            tokens.push((h.tokens, reference));
        }
    }
    let (hw, rw): (Vec<_>, Vec<_>) = words.iter().cloned().unzip();
    Ok(SplitMetrics {
        n_samples: tokens.len(),
        token_error_rate: corpus_error_rate(&tokens)?,
        word_error_rate: corpus_error_rate(&words)?,
        bleu: bleu(&hw, &rw)?,
        truncated,
    })
}

/// Evaluates `pools` into one report.
pub fn evaluate(model: &StptModel, corpus: &Corpus, pools: &[Pool], config: &DecodeConfig) -> Result<EvalReport> {
    let mut splits = BTreeMap::new();
    for &p in pools {
        splits.insert(p.name().to_string(), evaluate_split(model, corpus, p, config)?);
    }
    Ok(EvalReport {
        decode: *config,
        splits,
    })
}
