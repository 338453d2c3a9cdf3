//! Synthetic phoneme-grounded corpus: inventory, lexicon, utterance
//! rendering with exact alignments, pooled corpora with manifest I/O, and
//! batch construction.

mod batch;
mod corpus;
mod lexicon;
mod utterance;
pub mod vocab;

pub use batch::{Batcher, MaskingConfig, SpeechBatch, Task, TaskBatch};
pub use corpus::{
    gen_corpus, parse_manifest, write_manifest, Corpus, DataConfig, FrameSpan, Pool, Record, Symbols, TaskMode,
    MANIFEST_COLUMNS,
};
pub use lexicon::{gen_lexicon, spell, Lexicon, MAX_WORD_PHONEMES, MIN_WORD_PHONEMES};
pub use utterance::{
    asr_target, expand, gen_utterance, phonemize, run_lengths, sample_sentence, st_source, st_target, FrameLayout,
    UtteranceSample, UtteranceSpec,
};
pub use vocab::{PhonemeInventory, TokenVocab};
