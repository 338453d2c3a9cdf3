//! Phoneme inventory (encoder side) and token vocabulary (decoder side).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// ARPAbet-style base symbols. Inventories larger than this list fall back
/// to numbered symbols.
pub const BASE_PHONEMES: [&str; 30] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "P", "R", "S", "T", "UW",
];

/// Phoneme vocabulary size of the full-scale setup (English g2p symbols with
/// word-initial variants).
pub const FULL_SCALE_PHONEME_VOCAB: usize = 134;

pub const PHONE_PAD: usize = 0;
pub const PHONE_SIL: usize = 1;
/// Replaces masked words in the noised text-to-text input.
pub const PHONE_MASK: usize = 2;
const PHONE_SPECIALS: usize = 3;

/// Minimum Euclidean distance between any two prototypes.
pub const MIN_PROTOTYPE_DISTANCE: f64 = 0.5;

/// Symbols plus one acoustic prototype vector per symbol.
///
/// Ids: `0` pad, `1` silence, `2` mask, then the `n_base` base phonemes, then
/// their word-initial `_` variants in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeInventory {
    n_base: usize,
    symbols: Vec<String>,
    prototypes: Vec<Vec<f64>>,
}

impl PhonemeInventory {
    pub fn new(n_base: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if n_base == 0 || feature_dim == 0 {
            return Err(Error::Data("inventory needs base phonemes and a feature width".into()));
        }
        let base: Vec<String> = (0..n_base)
            .map(|i| match BASE_PHONEMES.get(i) {
                Some(s) if n_base <= BASE_PHONEMES.len() => s.to_string(),
                _ => format!("P{i}"),
            })
            .collect();
        let mut symbols = vec!["<pad>".to_string(), "SIL".to_string(), "<mask>".to_string()];
        symbols.extend(base.iter().cloned());
        symbols.extend(base.iter().map(|s| format!("_{s}")));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(symbols.len());
        let mut attempts = 0;
        while prototypes.len() < symbols.len() {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Data(format!(
                    "cannot place {} prototypes {MIN_PROTOTYPE_DISTANCE} apart in {feature_dim} dims",
                    symbols.len()
                )));
            }
            let candidate: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            if prototypes.iter().all(|p| distance(p, &candidate) > MIN_PROTOTYPE_DISTANCE) {
                prototypes.push(candidate);
            }
        }
        Ok(Self {
            n_base,
            symbols,
            prototypes,
        })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn prototype(&self, id: usize) -> &[f64] {
        &self.prototypes[id]
    }

    pub fn base_id(&self, base: usize) -> usize {
        PHONE_SPECIALS + base
    }

    pub fn initial_id(&self, base: usize) -> usize {
        PHONE_SPECIALS + self.n_base + base
    }

    /// Base index of a (possibly word-initial) phoneme id.
    pub fn base_of(&self, id: usize) -> Option<usize> {
        let b = id.checked_sub(PHONE_SPECIALS)?;
        match b {
            b if b < self.n_base => Some(b),
            b if b < 2 * self.n_base => Some(b - self.n_base),
            _ => None,
        }
    }

    pub fn is_initial(&self, id: usize) -> bool {
        id >= PHONE_SPECIALS + self.n_base && id < PHONE_SPECIALS + 2 * self.n_base
    }

    /// Closest prototype by Euclidean distance among emitted symbols
    /// (everything except pad and mask).
    pub fn nearest(&self, frame: &[f64]) -> usize {
        (0..self.size())
            .filter(|&i| i != PHONE_PAD && i != PHONE_MASK)
            .min_by(|&a, &b| {
                distance(&self.prototypes[a], frame).total_cmp(&distance(&self.prototypes[b], frame))
            })
            .unwrap()
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.size() {
            for j in i + 1..self.size() {
                best = best.min(distance(&self.prototypes[i], &self.prototypes[j]));
            }
        }
        best
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Word separator for character-level targets.
pub const SPACE: usize = 3;
const TOKEN_SPECIALS: usize = 4;
const LETTERS: usize = 26;

/// Decoder vocabulary: specials, the 26 lowercase letters (recognition
/// targets) and one token per target-language word (translation targets).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenVocab {
    n_words: usize,
}

impl TokenVocab {
    pub fn new(n_words: usize) -> Self {
        Self { n_words }
    }

    pub fn size(&self) -> usize {
        TOKEN_SPECIALS + LETTERS + self.n_words
    }

    pub fn letter(&self, c: char) -> Option<usize> {
        c.is_ascii_lowercase()
            .then(|| TOKEN_SPECIALS + (c as u8 - b'a') as usize)
    }

    pub fn word(&self, target_word: usize) -> usize {
        assert!(target_word < self.n_words);
        TOKEN_SPECIALS + LETTERS + target_word
    }

    pub fn is_word(&self, token: usize) -> bool {
        token >= TOKEN_SPECIALS + LETTERS && token < self.size()
    }

    pub fn render(&self, token: usize) -> String {
        match token {
            PAD => "<pad>".into(),
            BOS => "<s>".into(),
            EOS => "</s>".into(),
            SPACE => "|".into(),
            t if t < TOKEN_SPECIALS + LETTERS => ((b'a' + (t - TOKEN_SPECIALS) as u8) as char).to_string(),
            t if t < self.size() => format!("T{}", t - TOKEN_SPECIALS - LETTERS),
            t => format!("<unk:{t}>"),
        }
    }

    pub fn parse(&self, s: &str) -> Result<usize> {
        let id = match s {
            "<pad>" => PAD,
            "<s>" => BOS,
            "</s>" => EOS,
            "|" => SPACE,
            _ => {
                let mut chars = s.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if c.is_ascii_lowercase() => self.letter(c).unwrap(),
                    _ => s
                        .strip_prefix('T')
                        .and_then(|n| n.parse::<usize>().ok())
                        .filter(|&n| n < self.n_words)
                        .map(|n| self.word(n))
                        .ok_or_else(|| Error::Format(format!("unknown token `{s}`")))?,
                }
            }
        };
        Ok(id)
    }
}
