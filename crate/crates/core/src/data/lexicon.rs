use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::PhonemeInventory;
use crate::error::{Error, Result};

pub const MIN_WORD_PHONEMES: usize = 2;
pub const MAX_WORD_PHONEMES: usize = 5;
/// Out-degree of the word bigram graph used to sample sentences.
pub const SUCCESSORS: usize = 4;

/// Pronunciations, spellings, a sparse bigram structure for sentence
/// sampling, and the toy translation dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pronunciations: Vec<Vec<usize>>,
    spellings: Vec<String>,
    successors: Vec<Vec<usize>>,
    translation: Vec<usize>,
}

impl Lexicon {
    pub fn len(&self) -> usize {
        self.pronunciations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pronunciations.is_empty()
    }

    /// Phoneme ids of word `w`; the first one is a word-initial variant.
    pub fn pronunciation(&self, w: usize) -> &[usize] {
        &self.pronunciations[w]
    }

    pub fn spelling(&self, w: usize) -> &str {
        &self.spellings[w]
    }

    pub fn word_by_spelling(&self, s: &str) -> Option<usize> {
        self.spellings.iter().position(|x| x == s)
    }

    pub fn successors(&self, w: usize) -> &[usize] {
        &self.successors[w]
    }

    /// Target-language word of source word `w` (a permutation).
    pub fn translate_word(&self, w: usize) -> usize {
        self.translation[w]
    }

    pub fn source_of(&self, target_word: usize) -> Option<usize> {
        self.translation.iter().position(|&t| t == target_word)
    }

    pub fn from_parts(
        pronunciations: Vec<Vec<usize>>,
        inventory: &PhonemeInventory,
        successors: Vec<Vec<usize>>,
        translation: Vec<usize>,
    ) -> Result<Self> {
        let spellings: Vec<String> = pronunciations.iter().map(|p| spell(p, inventory)).collect();
        let n = pronunciations.len();
        let distinct = |v: &[String]| v.iter().collect::<HashSet<_>>().len() == v.len();
        if !distinct(&spellings)
            || pronunciations.iter().collect::<HashSet<_>>().len() != n
            || successors.len() != n
            || successors.iter().flatten().any(|&s| s >= n)
        {
            return Err(Error::Data("lexicon is not injective or has dangling successors".into()));
        }
        let mut sorted = translation.clone();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(Error::Data("translation dictionary is not a permutation".into()));
        }
        Ok(Self {
            pronunciations,
            spellings,
            successors,
            translation,
        })
    }
}

/// Lowercase concatenation of base phoneme symbols.
pub fn spell(pronunciation: &[usize], inventory: &PhonemeInventory) -> String {
    pronunciation
        .iter()
        .map(|&p| {
            let base = inventory.base_of(p).expect("pronunciations use phoneme symbols");
            inventory.symbol(inventory.base_id(base)).to_ascii_lowercase()
        })
        .collect()
}

/// Random lexicon of `n_words` words with 2–5 phonemes each, no phoneme
/// repeated back to back, word-initial variant first. Pronunciations and
/// spellings are both injective.
pub fn gen_lexicon(n_words: usize, inventory: &PhonemeInventory, seed: u64) -> Result<Lexicon> {
    if n_words < 2 {
        return Err(Error::Data("lexicon needs at least two words".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = inventory.n_base();
    let mut pronunciations: Vec<Vec<usize>> = Vec::with_capacity(n_words);
    let mut seen = HashSet::new();
    let mut spellings = HashSet::new();
    let mut failures = 0;
    while pronunciations.len() < n_words {
        let len = rng.random_range(MIN_WORD_PHONEMES..=MAX_WORD_PHONEMES);
        let mut bases = vec![rng.random_range(0..nb)];
        while bases.len() < len {
            let b = rng.random_range(0..nb);
            if b != *bases.last().unwrap() {
                bases.push(b);
            } else if nb == 1 {
                break;
            }
        }
        let p: Vec<usize> = bases
            .iter()
            .enumerate()
            .map(|(i, &b)| if i == 0 { inventory.initial_id(b) } else { inventory.base_id(b) })
            .collect();
        let s = spell(&p, inventory);
        if p.len() >= MIN_WORD_PHONEMES && !seen.contains(&p) && !spellings.contains(&s) {
            seen.insert(p.clone());
            spellings.insert(s);
            pronunciations.push(p);
            failures = 0;
        } else {
            failures += 1;
            if failures > 10_000 {
                return Err(Error::Data(format!(
                    "inventory of {nb} base phonemes is too small for {n_words} distinct words"
                )));
            }
        }
    }
    let successors = (0..n_words)
        .map(|_| {
            let mut all: Vec<usize> = (0..n_words).collect();
            all.shuffle(&mut rng);
            all.truncate(SUCCESSORS.min(n_words));
            all
        })
        .collect();
    let mut translation: Vec<usize> = (0..n_words).collect();
    translation.shuffle(&mut rng);
    Lexicon::from_parts(pronunciations, inventory, successors, translation)
}
