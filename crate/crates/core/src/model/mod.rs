//! The encoder-decoder network and its per-subtask routing.
//!
//! Sequences travel through the network as a [`Seq`]: `batch` blocks of
//! `len` rows stacked into one `[batch·len × d]` matrix, with the number of
//! real (unpadded) rows of each block in `lengths`. Attention never looks at
//! padding rows, so outputs on real rows do not depend on how much padding a
//! batch carries.
//!
//! Paths through the model:
//!
//! * text-to-text: phoneme embeddings, input LayerNorm, shared encoder, decoder
//! * speech-to-text: feature extractor, speech encoder, input LayerNorm,
//!   shared encoder, decoder
//! * self-supervised / speech-to-phoneme: feature extractor, speech encoder,
//!   and under [`ArchitectureVariant::Fse`] also input LayerNorm and shared
//!   encoder; the result is scored against the phoneme embeddings

mod config;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ArchitectureVariant, ModelConfig};
pub use layers::sinusoidal_positions;

use crate::data::{vocab, Task, TaskBatch};
use crate::error::{Error, Result};
use crate::numerics::{matmul, AttentionSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::tasks::MaskPlan;
use layers::{normal, DecoderLayer, EncoderLayer, Linear, Norm};

/// Standard deviation multiplier of the output projection. Small enough that
/// an untrained decoder is close to uniform over the vocabulary.
const OUTPUT_GAIN: f64 = 0.3;

/// A batch of padded sequences flowing through the network.
#[derive(Debug, Clone)]
pub struct Seq {
    pub x: Var,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl Seq {
    /// Row index of position `t` of sequence `b`.
    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.len + t
    }
}

/// Which transformer stack [`StptModel::encode`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stack {
    Speech,
    Shared,
}

#[derive(Debug, Clone)]
struct EncoderStack {
    layers: Vec<EncoderLayer>,
    final_norm: Norm,
}

#[derive(Debug, Clone)]
struct Ids {
    conv: Vec<Linear>,
    fe_norm: Norm,
    fe_proj: Linear,
    mask_emb: ParamId,
    speech: EncoderStack,
    input_norm: Norm,
    shared: EncoderStack,
    phoneme_emb: ParamId,
    token_emb: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    output: Linear,
}

/// Output of [`StptModel::route_forward`].
#[derive(Debug, Clone)]
pub enum RouteOutput {
    /// Decoder logits `[batch·len × V]` with the teacher-forcing target of
    /// each row (`None` on padding).
    Logits { logits: Var, targets: Vec<Option<usize>> },
    /// Context-encoder outputs for scoring against phoneme embeddings.
    Context(Seq),
}

/// Named groups of parameters used by the gradient-similarity probe.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGroup {
    pub name: String,
    pub params: Vec<ParamId>,
}

#[derive(Debug, Clone)]
pub struct StptModel {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
}

impl StptModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = config.model_dim;
        let c = config.conv_channels;
        let mut conv = Vec::new();
        let mut c_in = config.input_dim;
        for (i, &k) in config.conv_kernels.iter().enumerate() {
            conv.push(Linear::new(&mut s, &mut rng, &format!("fe.conv{i}"), k * c_in, c, 1.0));
            c_in = c;
        }
        let fe_norm = Norm::new(&mut s, "fe.norm", c);
        let fe_proj = Linear::new(&mut s, &mut rng, "fe.proj", c, d, 1.0);
        let mask_emb = s.add("speech.mask_emb", normal(&mut rng, &[d], 1.0));
        let stack = |s: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, n: usize| EncoderStack {
            layers: (0..n)
                .map(|i| EncoderLayer::new(s, rng, &format!("{name}.layer{i}"), d, config.ffn_dim))
                .collect(),
            final_norm: Norm::new(s, &format!("{name}.final_norm"), d),
        };
        let speech = stack(&mut s, &mut rng, "speech", config.n_speech_layers);
        let input_norm = Norm::new(&mut s, "shared.input_norm", d);
        let shared = stack(&mut s, &mut rng, "shared", config.n_shared_layers);
        let emb_std = 1.0 / (d as f64).sqrt();
        let phoneme_emb = s.add("phoneme_emb", normal(&mut rng, &[config.phoneme_vocab_size, d], emb_std));
        let token_emb = s.add("decoder.token_emb", normal(&mut rng, &[config.token_vocab_size, d], emb_std));
        let decoder = (0..config.n_decoder_layers)
            .map(|i| DecoderLayer::new(&mut s, &mut rng, &format!("decoder.layer{i}"), d, config.ffn_dim))
            .collect();
        let decoder_norm = Norm::new(&mut s, "decoder.final_norm", d);
        let output = Linear::new(&mut s, &mut rng, "decoder.out", d, config.token_vocab_size, OUTPUT_GAIN);
        Ok(Self {
            config,
            params: s,
            ids: Ids {
                conv,
                fe_norm,
                fe_proj,
                mask_emb,
                speech,
                input_norm,
                shared,
                phoneme_emb,
                token_emb,
                decoder,
                decoder_norm,
                output,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Id of the single phoneme embedding table `E[I×d]`.
    pub fn phoneme_embedding(&self) -> ParamId {
        self.ids.phoneme_emb
    }

    pub fn mask_embedding(&self) -> ParamId {
        self.ids.mask_emb
    }

    fn stack(&self, which: Stack) -> &EncoderStack {
        match which {
            Stack::Speech => &self.ids.speech,
            Stack::Shared => &self.ids.shared,
        }
    }

    /// Parameters of a whole encoder stack, LayerNorms included (plus the
    /// input LayerNorm for the shared stack).
    pub fn stack_params(&self, which: Stack) -> Vec<ParamId> {
        let prefix = match which {
            Stack::Speech => "speech.layer",
            Stack::Shared => "shared.",
        };
        let mut ids: Vec<ParamId> = self
            .params
            .iter()
            .filter(|(_, name, _)| name.starts_with(prefix) || (which == Stack::Speech && name.starts_with("speech.final_norm")))
            .map(|(id, _, _)| id)
            .collect();
        ids.sort_by_key(|id| id.index());
        ids
    }

    /// Parameters read by the speech front end: feature extractor, mask
    /// embedding and speech encoder.
    pub fn speech_path_params(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, name, _)| name.starts_with("fe.") || name.starts_with("speech."))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Per-layer groups of attention and feed-forward weights for each
    /// encoder stack, followed by the embedding tables as their own group.
    pub fn layer_groups(&self, which: Stack) -> Vec<LayerGroup> {
        let name = match which {
            Stack::Speech => "speech",
            Stack::Shared => "shared",
        };
        self.stack(which)
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerGroup {
                name: format!("{name}.layer{i}"),
                params: l.weight_ids(),
            })
            .collect()
    }

    pub fn embedding_group(&self) -> LayerGroup {
        LayerGroup {
            name: "embeddings".into(),
            params: vec![self.ids.phoneme_emb, self.ids.token_emb],
        }
    }

    /// Strided convolutions over `batch` blocks of `max_frames` input rows,
    /// then LayerNorm over channels and a projection to `model_dim`.
    ///
    /// Context position `t` of sequence `b` is valid when
    /// `t < context_len(frame_lengths[b])`; valid positions only read real
    /// frames.
    pub fn feature_extract(&self, g: &mut Graph, frames: &Tensor, frame_lengths: &[usize]) -> Result<Seq> {
        let batch = frame_lengths.len();
        let f = self.config.input_dim;
        if batch == 0 || frames.shape().len() != 2 || frames.cols() != f || frames.rows() % batch != 0 {
            return Err(Error::shape("feature_extract", frames.shape(), &[batch, f]));
        }
        let max_frames = frames.rows() / batch;
        let lengths = frame_lengths
            .iter()
            .map(|&l| {
                if l > max_frames {
                    return Err(Error::Length(format!("frame length {l} exceeds padded length {max_frames}")));
                }
                self.config.context_len(l)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut x = g.constant(frames.clone());
        let mut len = max_frames;
        for (layer, (&k, &s)) in self
            .ids
            .conv
            .iter()
            .zip(self.config.conv_kernels.iter().zip(&self.config.conv_strides))
        {
            let u = g.unfold(x, batch, len, k, s)?;
            len = crate::numerics::conv_out_len(len, k, s)?;
            let y = layer.forward(g, &self.params, u)?;
            x = g.gelu(y)?;
        }
        let x = self.ids.fe_norm.forward(g, &self.params, x)?;
        let x = self.ids.fe_proj.forward(g, &self.params, x)?;
        Ok(Seq { x, batch, len, lengths })
    }

    /// Replaces flagged rows by the learned mask embedding.
    pub fn corrupt(&self, g: &mut Graph, seq: &Seq, row_mask: &[bool]) -> Result<Seq> {
        let fill = g.param(&self.params, self.ids.mask_emb);
        let x = g.mask_rows(seq.x, fill, row_mask)?;
        Ok(Seq { x, ..seq.clone() })
    }

    fn add_positions(&self, g: &mut Graph, seq: &Seq) -> Result<Seq> {
        self.check_positions(seq.len)?;
        let d = self.config.model_dim;
        let pe = sinusoidal_positions(seq.len, d);
        let mut data = Vec::with_capacity(seq.batch * seq.len * d);
        for _ in 0..seq.batch {
            data.extend_from_slice(&pe);
        }
        let pe = g.constant(Tensor::matrix(seq.batch * seq.len, d, data)?);
        let x = g.add(seq.x, pe)?;
        Ok(Seq { x, ..seq.clone() })
    }

    fn check_positions(&self, len: usize) -> Result<()> {
        if len > self.config.max_positions {
            return Err(Error::Length(format!(
                "sequence of {len} positions exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn self_spec(&self, seq: &Seq, causal: bool) -> AttentionSpec {
        AttentionSpec {
            heads: self.config.n_heads,
            batch: seq.batch,
            query_len: seq.len,
            key_len: seq.len,
            key_lengths: seq.lengths.clone(),
            causal,
        }
    }

    /// Runs a Pre-LN transformer stack followed by its final LayerNorm. A
    /// stack without layers is the identity.
    pub fn encode(&self, g: &mut Graph, which: Stack, seq: &Seq) -> Result<Seq> {
        self.check_positions(seq.len)?;
        let stack = self.stack(which);
        if stack.layers.is_empty() {
            return Ok(seq.clone());
        }
        let spec = self.self_spec(seq, false);
        let mut x = seq.x;
        for layer in &stack.layers {
            x = layer.forward(g, &self.params, x, spec.clone())?;
        }
        let x = stack.final_norm.forward(g, &self.params, x)?;
        Ok(Seq { x, ..seq.clone() })
    }

    /// LayerNorm applied to every input of the shared encoder.
    pub fn input_norm(&self, g: &mut Graph, seq: &Seq) -> Result<Seq> {
        let x = self.ids.input_norm.forward(g, &self.params, seq.x)?;
        Ok(Seq { x, ..seq.clone() })
    }

    /// Speech encoder output for padded frames, with optional row masking
    /// of the extracted features.
    pub fn speech_encode(
        &self,
        g: &mut Graph,
        frames: &Tensor,
        frame_lengths: &[usize],
        plans: Option<&[MaskPlan]>,
    ) -> Result<Seq> {
        let z = self.feature_extract(g, frames, frame_lengths)?;
        let z = match plans {
            Some(plans) => {
                let mask = row_mask(&z, plans)?;
                if mask.iter().any(|&m| m) {
                    self.corrupt(g, &z, &mask)?
                } else {
                    z
                }
            }
            None => z,
        };
        let z = self.add_positions(g, &z)?;
        self.encode(g, Stack::Speech, &z)
    }

    /// Context outputs `O` (or `Ô` when masked) compared with phoneme
    /// embeddings: speech encoder only under PSE, speech plus shared encoder
    /// under FSE.
    pub fn speech_context(
        &self,
        g: &mut Graph,
        frames: &Tensor,
        frame_lengths: &[usize],
        plans: Option<&[MaskPlan]>,
    ) -> Result<Seq> {
        let s = self.speech_encode(g, frames, frame_lengths, plans)?;
        match self.config.variant {
            ArchitectureVariant::Pse => Ok(s),
            ArchitectureVariant::Fse => {
                let s = self.input_norm(g, &s)?;
                self.encode(g, Stack::Shared, &s)
            }
        }
    }

    /// Decoder memory for speech input.
    pub fn speech_memory(
        &self,
        g: &mut Graph,
        frames: &Tensor,
        frame_lengths: &[usize],
        plans: Option<&[MaskPlan]>,
    ) -> Result<Seq> {
        let s = self.speech_encode(g, frames, frame_lengths, plans)?;
        let s = self.input_norm(g, &s)?;
        self.encode(g, Stack::Shared, &s)
    }

    /// Decoder memory for phonemized text input.
    pub fn text_memory(&self, g: &mut Graph, phonemes: &[Vec<usize>]) -> Result<Seq> {
        let d = self.config.model_dim;
        let (ids, len, lengths) = pad_ids(phonemes, vocab::PHONE_PAD, "phoneme input")?;
        let table = g.param(&self.params, self.ids.phoneme_emb);
        let e = g.embedding(table, &ids)?;
        let x = g.scale(e, (d as f64).sqrt())?;
        let seq = Seq {
            x,
            batch: phonemes.len(),
            len,
            lengths,
        };
        let seq = self.add_positions(g, &seq)?;
        let seq = self.input_norm(g, &seq)?;
        self.encode(g, Stack::Shared, &seq)
    }

    /// Decoder logits `[batch·N × V]` for teacher-forced inputs, each of
    /// which must begin with the begin-of-sequence token.
    pub fn decode(&self, g: &mut Graph, memory: &Seq, targets_in: &[Vec<usize>]) -> Result<Var> {
        if targets_in.len() != memory.batch {
            return Err(Error::Contract(format!(
                "decode: {} target sequences for a memory batch of {}",
                targets_in.len(),
                memory.batch
            )));
        }
        if targets_in.iter().any(|t| t.first() != Some(&vocab::BOS)) {
            return Err(Error::Contract("decoder inputs must begin with BOS".into()));
        }
        let d = self.config.model_dim;
        let (ids, len, lengths) = pad_ids(targets_in, vocab::PAD, "target")?;
        let table = g.param(&self.params, self.ids.token_emb);
        let e = g.embedding(table, &ids)?;
        let x = g.scale(e, (d as f64).sqrt())?;
        let y = Seq {
            x,
            batch: targets_in.len(),
            len,
            lengths,
        };
        let y = self.add_positions(g, &y)?;
        let self_spec = self.self_spec(&y, true);
        let cross_spec = AttentionSpec {
            heads: self.config.n_heads,
            batch: y.batch,
            query_len: y.len,
            key_len: memory.len,
            key_lengths: memory.lengths.clone(),
            causal: false,
        };
        let mut x = y.x;
        for layer in &self.ids.decoder {
            x = layer.forward(g, &self.params, x, memory.x, self_spec.clone(), cross_spec.clone())?;
        }
        let x = self.ids.decoder_norm.forward(g, &self.params, x)?;
        self.ids.output.forward(g, &self.params, x)
    }

    /// Raw scores `context · Eᵀ` against the phoneme embedding table.
    pub fn phoneme_logits(&self, g: &mut Graph, context: Var) -> Result<Var> {
        let e = g.param(&self.params, self.ids.phoneme_emb);
        let et = g.transpose(e)?;
        g.matmul(context, et)
    }

    /// Runs the path of `batch.task` and returns what its loss consumes.
    /// Speech inputs are masked with the batch's plans when `corrupt` is set.
    pub fn route_forward(&self, g: &mut Graph, batch: &TaskBatch, corrupt: bool) -> Result<RouteOutput> {
        match batch.task {
            Task::T2t => {
                let phonemes = batch.require_phonemes()?;
                let targets = batch.require_targets()?;
                let memory = self.text_memory(g, phonemes)?;
                self.teacher_forced(g, &memory, targets)
            }
            Task::S2t => {
                let speech = batch.require_speech()?;
                let targets = batch.require_targets()?;
                let plans = corrupt.then_some(speech.plans.as_slice());
                let memory = self.speech_memory(g, &speech.frames, &speech.frame_lengths, plans)?;
                self.teacher_forced(g, &memory, targets)
            }
            Task::Ssl | Task::S2p => {
                let speech = batch.require_speech()?;
                let plans = corrupt.then_some(speech.plans.as_slice());
                let ctx = self.speech_context(g, &speech.frames, &speech.frame_lengths, plans)?;
                Ok(RouteOutput::Context(ctx))
            }
        }
    }

    fn teacher_forced(&self, g: &mut Graph, memory: &Seq, targets: &[Vec<usize>]) -> Result<RouteOutput> {
        let (inputs, rows) = teacher_forcing(targets)?;
        let logits = self.decode(g, memory, &inputs)?;
        Ok(RouteOutput::Logits { logits, targets: rows })
    }
}

/// Decoder inputs `[BOS, y₁ … y_{n−1}]` and flattened per-row targets
/// `y₁ … y_n` padded with `None` to the longest sequence.
pub fn teacher_forcing(targets: &[Vec<usize>]) -> Result<(Vec<Vec<usize>>, Vec<Option<usize>>)> {
    if targets.is_empty() || targets.iter().any(|t| t.is_empty()) {
        return Err(Error::Contract("empty target sequence".into()));
    }
    let len = targets.iter().map(Vec::len).max().unwrap();
    let mut inputs = Vec::with_capacity(targets.len());
    let mut rows = Vec::with_capacity(targets.len() * len);
    for t in targets {
        let mut input = vec![vocab::BOS];
        input.extend_from_slice(&t[..t.len() - 1]);
        inputs.push(input);
        rows.extend(t.iter().map(|&y| Some(y)));
        rows.extend(std::iter::repeat_n(None, len - t.len()));
    }
    Ok((inputs, rows))
}

fn pad_ids(seqs: &[Vec<usize>], pad: usize, what: &str) -> Result<(Vec<usize>, usize, Vec<usize>)> {
    if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::Contract(format!("empty {what} sequence")));
    }
    let len = seqs.iter().map(Vec::len).max().unwrap();
    let mut ids = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(pad, len - s.len()));
    }
    Ok((ids, len, seqs.iter().map(Vec::len).collect()))
}

/// Flattens per-sequence mask plans into one flag per row of `seq`.
pub fn row_mask(seq: &Seq, plans: &[MaskPlan]) -> Result<Vec<bool>> {
    if plans.len() != seq.batch {
        return Err(Error::Contract(format!("{} mask plans for a batch of {}", plans.len(), seq.batch)));
    }
    let mut mask = vec![false; seq.batch * seq.len];
    for (b, plan) in plans.iter().enumerate() {
        if plan.len() != seq.lengths[b] {
            return Err(Error::Data(format!(
                "mask plan for length {} applied to a sequence of length {}",
                plan.len(),
                seq.lengths[b]
            )));
        }
        for t in plan.masked_positions() {
            mask[seq.row(b, t)] = true;
        }
    }
    Ok(mask)
}

/// Eager form of [`StptModel::phoneme_logits`]: `context · Eᵀ`.
pub fn phoneme_logits(context: &Tensor, embeddings: &Tensor) -> Result<Tensor> {
    if context.shape().len() != 2 || embeddings.shape().len() != 2 || context.cols() != embeddings.cols() {
        return Err(Error::shape("phoneme_logits", context.shape(), embeddings.shape()));
    }
    let (i, d) = (embeddings.rows(), embeddings.cols());
    let mut et = vec![0.0; d * i];
    for r in 0..i {
        for c in 0..d {
            et[c * i + r] = embeddings.at(r, c);
        }
    }
    matmul(context, &Tensor::matrix(d, i, et)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;

    #[test]
    fn two_dimensional_phoneme_scores() {
        let o = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let e = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = phoneme_logits(&o, &e).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let p = softmax(&s, 1).unwrap();
        let e1 = std::f64::consts::E;
        assert!((p.data()[0] - e1 / (1.0 + e1)).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / (1.0 + e1)).abs() < 1e-15);
    }

    #[test]
    fn self_match_and_zero_row() {
        let mut e = vec![0.0; 5 * 5];
        for i in 0..5 {
            e[i * 5 + i] = 1.0;
        }
        let e = Tensor::matrix(5, 5, e).unwrap();
        let s = phoneme_logits(&Tensor::matrix(1, 5, e.row(3).to_vec()).unwrap(), &e).unwrap();
        let argmax = (0..5).max_by(|&a, &b| s.data()[a].total_cmp(&s.data()[b])).unwrap();
        assert_eq!(argmax, 3);
        let p = softmax(&phoneme_logits(&Tensor::zeros(&[1, 5]), &e).unwrap(), 1).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(phoneme_logits(&Tensor::zeros(&[1, 4]), &e).is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_complete() {
        let m = StptModel::new(ModelConfig::micro(), 0).unwrap();
        for name in ["fe.conv1.weight", "speech.mask_emb", "shared.input_norm.gain", "phoneme_emb", "decoder.out.bias"] {
            assert!(m.params().find(name).is_some(), "{name}");
        }
        assert_eq!(m.layer_groups(Stack::Shared).len(), 1);
        assert_eq!(m.layer_groups(Stack::Shared)[0].params.len(), 12);
    }

    #[test]
    fn teacher_forcing_shifts_targets() {
        let (inputs, rows) = teacher_forcing(&[vec![5, 6, 2], vec![7, 2]]).unwrap();
        assert_eq!(inputs, vec![vec![vocab::BOS, 5, 6], vec![vocab::BOS, 7]]);
        assert_eq!(rows, vec![Some(5), Some(6), Some(2), Some(7), Some(2), None]);
        assert!(teacher_forcing(&[vec![]]).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = StptModel::new(ModelConfig::micro(), 3).unwrap();
        let b = StptModel::new(ModelConfig::micro(), 3).unwrap();
        for ((_, _, x), (_, _, y)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x.data(), y.data());
        }
    }
}
