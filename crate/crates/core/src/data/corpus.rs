use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{gen_lexicon, Lexicon};
use super::utterance::{
    asr_target, gen_utterance, sample_sentence, st_target, FrameLayout, UtteranceSpec,
};
use super::vocab::{PhonemeInventory, TokenVocab};
use crate::error::{Error, Result};
use crate::seeds;

/// What the decoder produces: character transcripts or toy translations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    #[default]
    Asr,
    St,
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Asr => "asr",
            Self::St => "st",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub mode: TaskMode,
    pub n_base_phonemes: usize,
    pub feature_dim: usize,
    pub n_words: usize,
    pub noise_sd: f64,
    /// Context frames per phoneme, inclusive range.
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_sentence_words: usize,
    pub max_sentence_words: usize,
    /// Cap on raw frames per utterance.
    pub max_frames: usize,
    pub n_unlabeled: usize,
    pub n_supervised: usize,
    pub n_text: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mode: TaskMode::Asr,
            n_base_phonemes: 30,
            feature_dim: 8,
            n_words: 64,
            noise_sd: 0.1,
            min_duration: 2,
            max_duration: 5,
            min_sentence_words: 2,
            max_sentence_words: 5,
            max_frames: 512,
            n_unlabeled: 1000,
            n_supervised: 100,
            n_text: 2000,
            n_dev: 50,
            n_test: 50,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(Error::config("data.min_duration", "need 0 < min_duration <= max_duration"));
        }
        if self.min_sentence_words == 0 || self.min_sentence_words > self.max_sentence_words {
            return Err(Error::config(
                "data.min_sentence_words",
                "need 0 < min_sentence_words <= max_sentence_words",
            ));
        }
        if self.n_words < 2 {
            return Err(Error::config("data.n_words", "at least 2"));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::config("data.noise_sd", "must be non-negative"));
        }
        if self.n_base_phonemes == 0 || self.feature_dim == 0 {
            return Err(Error::config("data.n_base_phonemes", "inventory and feature width must be positive"));
        }
        Ok(())
    }

    pub fn utterance_spec(&self) -> UtteranceSpec {
        UtteranceSpec {
            min_duration: self.min_duration,
            max_duration: self.max_duration,
            noise_sd: self.noise_sd,
            max_frames: self.max_frames,
        }
    }

    /// Phoneme vocabulary: pad, silence, mask, base symbols and their
    /// word-initial variants.
    pub fn phoneme_vocab_size(&self) -> usize {
        3 + 2 * self.n_base_phonemes
    }

    pub fn token_vocab_size(&self) -> usize {
        TokenVocab::new(self.n_words).size()
    }
}

/// Disjoint utterance pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pool {
    /// Frames only.
    Unlabeled,
    /// Frames, alignment and text.
    Supervised,
    /// Text only.
    Text,
    Dev,
    Test,
}

impl Pool {
    pub const ALL: [Pool; 5] = [Pool::Unlabeled, Pool::Supervised, Pool::Text, Pool::Dev, Pool::Test];

    pub fn name(self) -> &'static str {
        match self {
            Pool::Unlabeled => "unlabeled",
            Pool::Supervised => "supervised",
            Pool::Text => "text",
            Pool::Dev => "dev",
            Pool::Test => "test",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            Pool::Unlabeled => "unl",
            Pool::Supervised => "sup",
            Pool::Text => "txt",
            Pool::Dev => "dev",
            Pool::Test => "tst",
        }
    }

    pub fn has_frames(self) -> bool {
        self != Pool::Text
    }

    pub fn has_text(self) -> bool {
        self != Pool::Unlabeled
    }

    pub fn has_alignment(self) -> bool {
        !matches!(self, Pool::Unlabeled | Pool::Text)
    }
}

impl std::str::FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pool::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown pool `{s}` (expected unlabeled, supervised, text, dev or test)")))
    }
}

/// Location of an utterance's frames in the frame blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSpan {
    /// Byte offset into the blob.
    pub offset: u64,
    pub n_frames: usize,
}

/// One manifest line. Fields a pool does not provide are `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub frames: Option<FrameSpan>,
    /// Alignment segments: phoneme ids and their lengths in context frames.
    pub phonemes: Option<Vec<usize>>,
    pub durations: Option<Vec<usize>>,
    /// Source word sequence.
    pub words: Option<Vec<usize>>,
    /// Decoder target tokens ending with EOS.
    pub target: Option<Vec<usize>>,
}

impl Record {
    pub fn alignment(&self) -> Option<Vec<usize>> {
        Some(super::utterance::expand(self.phonemes.as_ref()?, self.durations.as_ref()?))
    }
}

/// Manifest column order.
pub const MANIFEST_COLUMNS: [&str; 7] = ["id", "offset", "n_frames", "phonemes", "durations", "source", "target"];

/// Symbol tables needed to print and parse manifests.
#[derive(Debug, Clone, Copy)]
pub struct Symbols<'a> {
    pub inventory: &'a PhonemeInventory,
    pub lexicon: &'a Lexicon,
    pub vocab: &'a TokenVocab,
}

fn field<T>(v: &Option<T>, f: impl FnOnce(&T) -> String) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), f)
}

fn join(xs: impl Iterator<Item = String>) -> String {
    xs.collect::<Vec<_>>().join(" ")
}

/// Serializes records as tab-separated lines under a `#` header.
pub fn write_manifest(records: &[Record], sym: Symbols<'_>) -> String {
    let mut out = format!("#{}\n", MANIFEST_COLUMNS.join("\t"));
    for r in records {
        let cols = [
            r.id.clone(),
            field(&r.frames, |s| s.offset.to_string()),
            field(&r.frames, |s| s.n_frames.to_string()),
            field(&r.phonemes, |p| join(p.iter().map(|&x| sym.inventory.symbol(x).to_string()))),
            field(&r.durations, |d| join(d.iter().map(|x| x.to_string()))),
            field(&r.words, |w| join(w.iter().map(|&x| sym.lexicon.spelling(x).to_string()))),
            field(&r.target, |t| join(t.iter().map(|&x| sym.vocab.render(x)))),
        ];
        writeln!(out, "{}", cols.join("\t")).unwrap();
    }
    out
}

fn parse_opt<T>(s: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if s == "-" {
        Ok(None)
    } else {
        f(s).map(Some)
    }
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(' ').map(f).collect()
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("expected a number, got `{s}`")))
}

/// Inverse of [`write_manifest`].
pub fn parse_manifest(text: &str, sym: Symbols<'_>) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != MANIFEST_COLUMNS.len() {
            return Err(Error::Format(format!(
                "manifest line {}: {} columns, expected {}",
                n + 1,
                cols.len(),
                MANIFEST_COLUMNS.len()
            )));
        }
        let offset = parse_opt(cols[1], parse_num::<u64>)?;
        let n_frames = parse_opt(cols[2], parse_num::<usize>)?;
        let frames = match (offset, n_frames) {
            (Some(offset), Some(n_frames)) => Some(FrameSpan { offset, n_frames }),
            (None, None) => None,
            _ => return Err(Error::Format(format!("manifest line {}: offset without length", n + 1))),
        };
        records.push(Record {
            id: cols[0].to_string(),
            frames,
            phonemes: parse_opt(cols[3], |s| {
                parse_list(s, |x| {
                    sym.inventory
                        .id(x)
                        .ok_or_else(|| Error::Format(format!("unknown phoneme `{x}`")))
                })
            })?,
            durations: parse_opt(cols[4], |s| parse_list(s, parse_num::<usize>))?,
            words: parse_opt(cols[5], |s| {
                parse_list(s, |x| {
                    sym.lexicon
                        .word_by_spelling(x)
                        .ok_or_else(|| Error::Format(format!("unknown word `{x}`")))
                })
            })?,
            target: parse_opt(cols[6], |s| parse_list(s, |x| sym.vocab.parse(x)))?,
        });
    }
    Ok(records)
}

/// A generated corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: DataConfig,
    pub seed: u64,
    pub layout: FrameLayout,
    pub inventory: PhonemeInventory,
    pub lexicon: Lexicon,
    pub vocab: TokenVocab,
    /// All frames of all pools, row-major, `feature_dim` values per frame.
    pub frames: Vec<f64>,
    pools: Vec<(Pool, Vec<Record>)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusHeader {
    seed: u64,
    downsample: usize,
    receptive_field: usize,
    data: DataConfig,
}

impl Corpus {
    pub fn pool(&self, pool: Pool) -> &[Record] {
        self.pools
            .iter()
            .find(|(p, _)| *p == pool)
            .map(|(_, r)| r.as_slice())
            .unwrap_or(&[])
    }

    pub fn symbols(&self) -> Symbols<'_> {
        Symbols {
            inventory: &self.inventory,
            lexicon: &self.lexicon,
            vocab: &self.vocab,
        }
    }

    pub fn frames_of(&self, record: &Record) -> Option<&[f64]> {
        let span = record.frames?;
        let start = span.offset as usize / 8;
        self.frames.get(start..start + span.n_frames * self.config.feature_dim)
    }

    /// Decoder target for a word sequence in this corpus's mode.
    pub fn target_for(&self, words: &[usize]) -> Vec<usize> {
        match self.config.mode {
            TaskMode::Asr => asr_target(words, &self.lexicon, &self.vocab),
            TaskMode::St => st_target(words, &self.lexicon, &self.vocab),
        }
    }

    /// Writes `corpus.toml`, `lexicon.tsv`, one `<pool>.tsv` manifest per
    /// pool, the frame blob `frames.bin` and its index `frames.idx`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        let header = CorpusHeader {
            seed: self.seed,
            downsample: self.layout.downsample,
            receptive_field: self.layout.receptive_field,
            data: self.config.clone(),
        };
        put("corpus.toml", toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?.as_bytes())?;
        put("lexicon.tsv", self.lexicon_tsv().as_bytes())?;
        let mut index = String::from("#id\toffset\tn_frames\n");
        for (pool, records) in &self.pools {
            put(&format!("{}.tsv", pool.name()), write_manifest(records, self.symbols()).as_bytes())?;
            for r in records {
                if let Some(s) = r.frames {
                    writeln!(index, "{}\t{}\t{}", r.id, s.offset, s.n_frames).unwrap();
                }
            }
        }
        put("frames.idx", index.as_bytes())?;
        let blob: Vec<u8> = self.frames.iter().flat_map(|v| v.to_le_bytes()).collect();
        put("frames.bin", &blob)
    }

    fn lexicon_tsv(&self) -> String {
        let mut out = String::from("#word\tspelling\tpronunciation\ttranslation\tsuccessors\n");
        for w in 0..self.lexicon.len() {
            writeln!(
                out,
                "{w}\t{}\t{}\t{}\t{}",
                self.lexicon.spelling(w),
                join(self.lexicon.pronunciation(w).iter().map(|&p| self.inventory.symbol(p).to_string())),
                self.lexicon.translate_word(w),
                join(self.lexicon.successors(w).iter().map(|s| s.to_string())),
            )
            .unwrap();
        }
        out
    }

    /// Reads a directory written by [`Corpus::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let get = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let text = |name: &str| -> Result<String> {
            String::from_utf8(get(name)?).map_err(|_| Error::Format(format!("{name} is not UTF-8")))
        };
        let header: CorpusHeader =
            toml::from_str(&text("corpus.toml")?).map_err(|e| Error::Format(format!("corpus.toml: {e}")))?;
        let config = header.data;
        config.validate()?;
        let inventory = PhonemeInventory::new(
            config.n_base_phonemes,
            config.feature_dim,
            seeds::derive(header.seed, "inventory", &[]),
        )?;
        let lexicon = parse_lexicon(&text("lexicon.tsv")?, &inventory)?;
        let vocab = TokenVocab::new(config.n_words);
        let sym = Symbols {
            inventory: &inventory,
            lexicon: &lexicon,
            vocab: &vocab,
        };
        let mut pools = Vec::new();
        for pool in Pool::ALL {
            pools.push((pool, parse_manifest(&text(&format!("{}.tsv", pool.name()))?, sym)?));
        }
        let blob = get("frames.bin")?;
        if blob.len() % 8 != 0 {
            return Err(Error::Format("frames.bin length is not a multiple of 8".into()));
        }
        let frames = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let corpus = Self {
            config,
            seed: header.seed,
            layout: FrameLayout {
                downsample: header.downsample,
                receptive_field: header.receptive_field,
            },
            inventory,
            lexicon,
            vocab,
            frames,
            pools,
        };
        for (_, records) in &corpus.pools {
            for r in records {
                if r.frames.is_some() && corpus.frames_of(r).is_none() {
                    return Err(Error::Format(format!("{}: frame span outside frames.bin", r.id)));
                }
            }
        }
        Ok(corpus)
    }
}

fn parse_lexicon(text: &str, inventory: &PhonemeInventory) -> Result<Lexicon> {
    let mut prons = Vec::new();
    let mut successors = Vec::new();
    let mut translation = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 || cols[0] != prons.len().to_string() {
            return Err(Error::Format(format!("bad lexicon line `{line}`")));
        }
        prons.push(parse_list(cols[2], |x| {
            inventory.id(x).ok_or_else(|| Error::Format(format!("unknown phoneme `{x}`")))
        })?);
        translation.push(parse_num::<usize>(cols[3])?);
        successors.push(parse_list(cols[4], parse_num::<usize>)?);
    }
    let lexicon = Lexicon::from_parts(prons, inventory, successors, translation)?;
    Ok(lexicon)
}

/// Generates every pool. Utterance `i` of a pool depends only on
/// `(seed, pool, i)`, and pools never share an id.
pub fn gen_corpus(config: &DataConfig, layout: FrameLayout, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let inventory = PhonemeInventory::new(
        config.n_base_phonemes,
        config.feature_dim,
        seeds::derive(seed, "inventory", &[]),
    )?;
    let lexicon = gen_lexicon(config.n_words, &inventory, seeds::derive(seed, "lexicon", &[]))?;
    let vocab = TokenVocab::new(config.n_words);
    let spec = config.utterance_spec();
    let mut corpus = Corpus {
        config: config.clone(),
        seed,
        layout,
        inventory,
        lexicon,
        vocab,
        frames: Vec::new(),
        pools: Vec::new(),
    };
    for pool in Pool::ALL {
        let count = match pool {
            Pool::Unlabeled => config.n_unlabeled,
            Pool::Supervised => config.n_supervised,
            Pool::Text => config.n_text,
            Pool::Dev => config.n_dev,
            Pool::Test => config.n_test,
        };
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, pool.name(), &[i as u64]));
            let n = rng.random_range(config.min_sentence_words..=config.max_sentence_words);
            let mut words = sample_sentence(&corpus.lexicon, n, &mut rng);
            let id = format!("{}-{i:06}", pool.id_prefix());
            let mut record = Record {
                id,
                frames: None,
                phonemes: None,
                durations: None,
                words: None,
                target: None,
            };
            if pool.has_frames() {
                let u = gen_utterance(&corpus.lexicon, &corpus.inventory, &words, &spec, layout, rng.random())?;
                record.frames = Some(FrameSpan {
                    offset: (corpus.frames.len() * 8) as u64,
                    n_frames: u.n_frames(),
                });
                corpus.frames.extend_from_slice(&u.frames);
                if pool.has_alignment() {
                    record.phonemes = Some(u.phonemes);
                    record.durations = Some(u.durations);
                }
                words = u.words;
            }
            if pool.has_text() {
                record.target = Some(corpus.target_for(&words));
                record.words = Some(words);
            }
            records.push(record);
        }
        corpus.pools.push((pool, records));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    const DESK: FrameLayout = FrameLayout {
        downsample: 4,
        receptive_field: 4,
    };

    fn small() -> DataConfig {
        DataConfig {
            n_unlabeled: 12,
            n_supervised: 5,
            n_text: 20,
            n_dev: 3,
            n_test: 3,
            ..DataConfig::default()
        }
    }

    #[test]
    fn pool_sizes_and_disjoint_ids() {
        let c = gen_corpus(&small(), DESK, 1).unwrap();
        assert_eq!(c.pool(Pool::Unlabeled).len(), 12);
        assert_eq!(c.pool(Pool::Text).len(), 20);
        let mut ids = HashSet::new();
        for p in Pool::ALL {
            for r in c.pool(p) {
                assert!(ids.insert(r.id.clone()));
                assert_eq!(r.frames.is_some(), p.has_frames());
                assert_eq!(r.target.is_some(), p.has_text());
                assert_eq!(r.durations.is_some(), p.has_alignment());
            }
        }
    }

    #[test]
    fn write_read_round_trip() {
        let c = gen_corpus(&small(), DESK, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = Corpus::read(dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_corpus(&small(), DESK, 3).unwrap().write(a.path()).unwrap();
        gen_corpus(&small(), DESK, 3).unwrap().write(b.path()).unwrap();
        for name in ["corpus.toml", "lexicon.tsv", "unlabeled.tsv", "text.tsv", "frames.bin", "frames.idx"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
        }
    }

    #[test]
    fn alignment_matches_frame_count() {
        let c = gen_corpus(&small(), DESK, 4).unwrap();
        for r in c.pool(Pool::Supervised) {
            let n = r.frames.unwrap().n_frames;
            assert_eq!(r.alignment().unwrap().len() * 4, n);
        }
    }
}
