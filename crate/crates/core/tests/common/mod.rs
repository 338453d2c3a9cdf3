#![allow(dead_code)]

use stpt::config::RunConfig;
use stpt::data::{gen_corpus, Batcher, Corpus, DataConfig, Task, TaskBatch};
use stpt::model::{ArchitectureVariant, ModelConfig, StptModel};

/// Micro model on a small inventory; cheap enough for finite differences.
pub fn micro_config(variant: ArchitectureVariant) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 11,
        data: DataConfig {
            n_base_phonemes: 4,
            n_words: 6,
            max_sentence_words: 3,
            n_unlabeled: 12,
            n_supervised: 12,
            n_text: 12,
            n_dev: 4,
            n_test: 4,
            ..DataConfig::default()
        },
        model: ModelConfig {
            variant,
            ..ModelConfig::micro()
        },
        ..RunConfig::default()
    };
    cfg.train.masking.ssl_rate = 0.3;
    cfg.train.masking.supervised_rate = 0.3;
    cfg.normalize().unwrap()
}

pub fn corpus(cfg: &RunConfig) -> Corpus {
    gen_corpus(&cfg.data, cfg.layout(), cfg.data_seed()).unwrap()
}

pub fn model(cfg: &RunConfig) -> StptModel {
    StptModel::new(cfg.model.clone(), cfg.init_seed()).unwrap()
}

pub fn batch(cfg: &RunConfig, corpus: &Corpus, task: Task, n: usize, seed: u64) -> TaskBatch {
    Batcher::new(corpus, &cfg.model, cfg.train.masking)
        .sample(task, task.training_pool(), n, seed)
        .unwrap()
}

/// An SSL batch drawn until at least one utterance has two or more masked
/// frames.
pub fn masked_ssl_batch(cfg: &RunConfig, corpus: &Corpus, n: usize) -> TaskBatch {
    (0..100)
        .map(|s| batch(cfg, corpus, Task::Ssl, n, s))
        .find(|b| b.speech.as_ref().unwrap().plans.iter().any(|p| p.masked_positions().len() >= 2))
        .expect("some seed masks frames")
}
