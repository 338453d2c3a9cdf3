use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::lexicon::Lexicon;
use super::vocab::{PhonemeInventory, TokenVocab, EOS, PHONE_MASK, PHONE_SIL, SPACE};
use crate::error::{Error, Result};

/// How raw frames relate to context frames of the model's feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLayout {
    /// Raw frames per context frame.
    pub downsample: usize,
    /// Raw frames needed for the first context frame.
    pub receptive_field: usize,
}

impl FrameLayout {
    /// Raw length whose context length is exactly `n`: `n·downsample` plus
    /// whatever the receptive field needs beyond one stride.
    pub fn raw_len(&self, n: usize) -> usize {
        n * self.downsample + self.receptive_field.saturating_sub(self.downsample)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtteranceSpec {
    /// Context frames per phoneme, inclusive range.
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_sd: f64,
    pub max_frames: usize,
}

/// One synthetic utterance: frames are phoneme prototypes plus Gaussian
/// noise, with a silence segment at both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceSample {
    pub frames: Vec<f64>,
    pub feature_dim: usize,
    /// Phoneme ids, one per alignment segment.
    pub phonemes: Vec<usize>,
    /// Segment lengths in context frames.
    pub durations: Vec<usize>,
    pub words: Vec<usize>,
    pub layout: FrameLayout,
}

impl UtteranceSample {
    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.feature_dim
    }

    pub fn context_len(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Phoneme label of every context frame.
    pub fn context_alignment(&self) -> Vec<usize> {
        expand(&self.phonemes, &self.durations)
    }

    /// Phoneme label of every raw frame. Segments partition `[0, T)`; the
    /// last one absorbs frames added for the receptive field.
    pub fn frame_alignment(&self) -> Vec<usize> {
        self.frame_alignment_for(self.n_frames())
    }
}

/// Repeats `labels[i]` `counts[i]` times.
pub fn expand(labels: &[usize], counts: &[usize]) -> Vec<usize> {
    labels
        .iter()
        .zip(counts)
        .flat_map(|(&l, &c)| std::iter::repeat_n(l, c))
        .collect()
}

/// Run-length compression: `(labels, counts)`.
pub fn run_lengths(seq: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut labels: Vec<usize> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for &x in seq {
        if labels.last() == Some(&x) {
            *counts.last_mut().unwrap() += 1;
        } else {
            labels.push(x);
            counts.push(1);
        }
    }
    (labels, counts)
}

/// Word sequence of `n_words` words from the lexicon's bigram graph.
pub fn sample_sentence(lexicon: &Lexicon, n_words: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut words = vec![rng.random_range(0..lexicon.len())];
    while words.len() < n_words {
        let next = lexicon.successors(*words.last().unwrap());
        words.push(next[rng.random_range(0..next.len())]);
    }
    words
}

/// Renders `words` as frames with an exact phoneme alignment. Trailing words
/// are dropped while the utterance exceeds `spec.max_frames`.
pub fn gen_utterance(
    lexicon: &Lexicon,
    inventory: &PhonemeInventory,
    words: &[usize],
    spec: &UtteranceSpec,
    layout: FrameLayout,
    seed: u64,
) -> Result<UtteranceSample> {
    if lexicon.is_empty() || words.is_empty() {
        return Err(Error::Data("utterance needs a lexicon and at least one word".into()));
    }
    if spec.min_duration == 0 || spec.min_duration > spec.max_duration {
        return Err(Error::config("data.min_duration", "need 0 < min_duration <= max_duration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| rng.random_range(spec.min_duration..=spec.max_duration);
    let mut phonemes = vec![PHONE_SIL];
    let mut durations = vec![draw(&mut rng)];
    let closing = draw(&mut rng);
    let mut kept = Vec::new();
    for &w in words {
        let p = lexicon.pronunciation(w);
        let d: Vec<usize> = p.iter().map(|_| draw(&mut rng)).collect();
        let total: usize = durations.iter().chain(&d).sum::<usize>() + closing;
        if layout.raw_len(total) > spec.max_frames {
            break;
        }
        phonemes.extend_from_slice(p);
        durations.extend(d);
        kept.push(w);
    }
    if kept.is_empty() {
        return Err(Error::Data(format!("no word fits in {} frames", spec.max_frames)));
    }
    phonemes.push(PHONE_SIL);
    durations.push(closing);

    let sample = UtteranceSample {
        frames: Vec::new(),
        feature_dim: inventory.feature_dim(),
        phonemes,
        durations,
        words: kept,
        layout,
    };
    let alignment = sample.frame_alignment_for(layout.raw_len(sample.context_len()));
    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).map_err(|e| Error::Data(e.to_string()))?;
    let mut frames = Vec::with_capacity(alignment.len() * sample.feature_dim);
    for &p in &alignment {
        for &v in inventory.prototype(p) {
            let eps = if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            frames.push(v + eps);
        }
    }
    Ok(UtteranceSample { frames, ..sample })
}

impl UtteranceSample {
    fn frame_alignment_for(&self, n_frames: usize) -> Vec<usize> {
        let raw: Vec<usize> = self.durations.iter().map(|d| d * self.layout.downsample).collect();
        let mut out = expand(&self.phonemes, &raw);
        out.resize(n_frames, *self.phonemes.last().unwrap());
        out
    }
}

/// Character targets: spellings separated by the space token, then EOS.
pub fn asr_target(words: &[usize], lexicon: &Lexicon, vocab: &TokenVocab) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &w) in words.iter().enumerate() {
        if i > 0 {
            out.push(SPACE);
        }
        out.extend(lexicon.spelling(w).chars().map(|c| vocab.letter(c).expect("lowercase spelling")));
    }
    out.push(EOS);
    out
}

/// Toy translation: dictionary lookup, then every adjacent pair
/// `(0,1), (2,3), …` swapped, then EOS.
pub fn st_target(words: &[usize], lexicon: &Lexicon, vocab: &TokenVocab) -> Vec<usize> {
    let mut t: Vec<usize> = words.iter().map(|&w| vocab.word(lexicon.translate_word(w))).collect();
    for pair in t.chunks_mut(2) {
        pair.reverse();
    }
    t.push(EOS);
    t
}

/// Inverse of [`st_target`]; `None` if the tokens are not a translation.
pub fn st_source(tokens: &[usize], lexicon: &Lexicon, vocab: &TokenVocab) -> Option<Vec<usize>> {
    let body = tokens.strip_suffix(&[EOS]).unwrap_or(tokens);
    let mut words = body
        .iter()
        .map(|&t| vocab.is_word(t).then(|| lexicon.source_of(t - vocab.word(0))).flatten())
        .collect::<Option<Vec<_>>>()?;
    for pair in words.chunks_mut(2) {
        pair.reverse();
    }
    Some(words)
}

/// Pronunciation form of a word sequence; masked words become one mask
/// phoneme each.
pub fn phonemize(words: &[Option<usize>], lexicon: &Lexicon) -> Vec<usize> {
    words
        .iter()
        .flat_map(|w| match w {
            Some(w) => lexicon.pronunciation(*w).to_vec(),
            None => vec![PHONE_MASK],
        })
        .collect()
}
