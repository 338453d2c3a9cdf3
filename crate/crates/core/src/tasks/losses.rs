use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Task, TaskBatch};
use crate::error::{Error, Result};
use crate::model::{RouteOutput, Seq, StptModel};
use crate::numerics::{softmax, Graph, Tensor, Var};

/// Loss-scale weights of the self-supervised, speech-to-phoneme and
/// speech-to-text terms. The text-to-text term always has weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn weight(&self, task: Task) -> f64 {
        match task {
            Task::T2t => 1.0,
            Task::Ssl => self.alpha,
            Task::S2p => self.beta,
            Task::S2t => self.gamma,
        }
    }
}

/// Objective of the self-supervised subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SslLoss {
    /// Masked-frame KL between clean and corrupted phoneme distributions.
    #[default]
    Kl,
    /// InfoNCE over cosine similarities of context outputs.
    Contrastive,
}

impl std::fmt::Display for SslLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Kl => "kl",
            Self::Contrastive => "contrastive",
        })
    }
}

impl std::str::FromStr for SslLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(Self::Kl),
            "contrastive" => Ok(Self::Contrastive),
            other => Err(Error::config("loss", format!("expected kl or contrastive, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub n_distractors: usize,
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            n_distractors: 100,
            temperature: 0.1,
        }
    }
}

/// Denoising (recognition mode) or translation loss on phonemized text,
/// averaged over target tokens.
pub fn t2t_loss(model: &StptModel, g: &mut Graph, batch: &TaskBatch) -> Result<Var> {
    expect_task(batch, Task::T2t)?;
    decoder_loss(model, g, batch, false)
}

/// Encoder-decoder loss on speech, averaged over target tokens. With
/// `corrupt`, the batch's supervised mask plans are applied first.
pub fn s2t_loss(model: &StptModel, g: &mut Graph, batch: &TaskBatch, corrupt: bool) -> Result<Var> {
    expect_task(batch, Task::S2t)?;
    decoder_loss(model, g, batch, corrupt)
}

fn decoder_loss(model: &StptModel, g: &mut Graph, batch: &TaskBatch, corrupt: bool) -> Result<Var> {
    match model.route_forward(g, batch, corrupt)? {
        RouteOutput::Logits { logits, targets } => g.cross_entropy(logits, &targets),
        RouteOutput::Context(_) => unreachable!("decoder tasks route to logits"),
    }
}

fn context(model: &StptModel, g: &mut Graph, batch: &TaskBatch, corrupt: bool) -> Result<Seq> {
    match model.route_forward(g, batch, corrupt)? {
        RouteOutput::Context(seq) => Ok(seq),
        RouteOutput::Logits { .. } => unreachable!("encoder-only tasks route to context outputs"),
    }
}

fn expect_task(batch: &TaskBatch, task: Task) -> Result<()> {
    if batch.task != task {
        return Err(Error::Contract(format!("{task} loss given a {} batch", batch.task)));
    }
    Ok(())
}

/// Frame-level phoneme classification against the batch alignments,
/// averaged over real frames.
pub fn s2p_loss(model: &StptModel, g: &mut Graph, batch: &TaskBatch, corrupt: bool) -> Result<Var> {
    expect_task(batch, Task::S2p)?;
    let alignments = batch.require_alignments()?;
    let ctx = context(model, g, batch, corrupt)?;
    let mut targets = vec![None; ctx.batch * ctx.len];
    for (b, a) in alignments.iter().enumerate() {
        if a.len() != ctx.lengths[b] {
            return Err(Error::Data(format!(
                "alignment of {} frames for a context of {} frames ({})",
                a.len(),
                ctx.lengths[b],
                batch.ids[b]
            )));
        }
        for (t, &p) in a.iter().enumerate() {
            targets[ctx.row(b, t)] = Some(p);
        }
    }
    let logits = model.phoneme_logits(g, ctx.x)?;
    g.cross_entropy(logits, &targets)
}

/// Rows (in the padded `batch·len` layout) covered by the batch's mask plans.
fn masked_rows(batch: &TaskBatch, len: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    let speech = batch.require_speech()?;
    Ok(speech
        .plans
        .iter()
        .enumerate()
        .map(|(b, p)| (b, p.masked_positions().into_iter().map(|t| b * len + t).collect()))
        .collect())
}

/// Phoneme distributions of the clean pass, computed without recording a
/// gradient. Rows follow the padded `batch·len` layout.
pub fn ssl_targets(model: &StptModel, batch: &TaskBatch) -> Result<Tensor> {
    let mut g = Graph::inference();
    let ctx = context(model, &mut g, batch, false)?;
    let logits = model.phoneme_logits(&mut g, ctx.x)?;
    softmax(g.value(logits), 1)
}

/// Second pass of the masked KL loss against fixed `targets` from
/// [`ssl_targets`]: `Σ_{j masked} KL(p(o_j) ‖ p(ô_j))` divided by the number
/// of masked frames. Exactly zero when nothing is masked.
pub fn ssl_loss_from_targets(model: &StptModel, g: &mut Graph, batch: &TaskBatch, targets: &Tensor) -> Result<Var> {
    expect_task(batch, Task::Ssl)?;
    let speech = batch.require_speech()?;
    if speech.plans.iter().all(|p| p.is_empty()) {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let ctx = context(model, g, batch, true)?;
    let rows: Vec<usize> = masked_rows(batch, ctx.len)?.into_iter().flat_map(|(_, r)| r).collect();
    if targets.rows() != ctx.batch * ctx.len {
        return Err(Error::shape("ssl targets", targets.shape(), &[ctx.batch * ctx.len]));
    }
    let i = targets.cols();
    let p: Vec<f64> = rows.iter().flat_map(|&r| targets.row(r).iter().copied()).collect();
    let p = Tensor::matrix(rows.len(), i, p)?;
    let picked = g.gather_rows(ctx.x, &rows)?;
    let logits = model.phoneme_logits(g, picked)?;
    let log_q = g.log_softmax(logits)?;
    let kl = g.kl_divergence(&p, log_q)?;
    g.scale(kl, 1.0 / rows.len() as f64)
}

/// Masked KL loss with a detached clean pass.
pub fn ssl_masked_kl_loss(model: &StptModel, g: &mut Graph, batch: &TaskBatch) -> Result<Var> {
    let targets = ssl_targets(model, batch)?;
    ssl_loss_from_targets(model, g, batch, &targets)
}

/// Fraction of the averaged target distribution at masked frames carried by
/// its two most likely phonemes. Values near 1 indicate collapsed targets.
pub fn target_concentration(batch: &TaskBatch, targets: &Tensor) -> Result<Option<f64>> {
    let speech = batch.require_speech()?;
    let len = targets.rows() / speech.plans.len();
    let rows: Vec<usize> = masked_rows(batch, len)?.into_iter().flat_map(|(_, r)| r).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let mut mean = vec![0.0; targets.cols()];
    for &r in &rows {
        mean.iter_mut().zip(targets.row(r)).for_each(|(m, p)| *m += p);
    }
    mean.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = mean.iter().sum();
    Ok(Some((mean[0] + mean.get(1).copied().unwrap_or(0.0)) / total))
}

/// Contrastive alternative to the masked KL loss. For every masked frame
/// `j`, the positive is the clean output `o_j` and the distractors are clean
/// outputs at other masked frames of the same utterance, drawn uniformly with
/// replacement. Scores are cosine similarities divided by the temperature.
/// Utterances with a single masked frame have no distractor and are left
/// out; a batch where that holds for every masked utterance is degenerate.
pub fn contrastive_loss(
    model: &StptModel,
    g: &mut Graph,
    batch: &TaskBatch,
    config: &ContrastiveConfig,
    seed: u64,
) -> Result<Var> {
    expect_task(batch, Task::Ssl)?;
    if config.n_distractors == 0 || config.temperature <= 0.0 {
        return Err(Error::Contract("contrastive loss needs distractors and a positive temperature".into()));
    }
    let clean = {
        let mut g1 = Graph::inference();
        let ctx = context(model, &mut g1, batch, false)?;
        g1.value(ctx.x).clone()
    };
    let ctx = context(model, g, batch, true)?;
    let groups = masked_rows(batch, ctx.len)?;
    let d = clean.cols();
    let unit = |r: usize| -> Vec<f64> {
        let row = clean.row(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter().map(|v| v / n).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 1 + config.n_distractors;
    let mut anchors = Vec::new();
    let mut candidates = Vec::new();
    let mut lone = 0;
    for (_, rows) in &groups {
        if rows.len() == 1 {
            lone += 1;
            continue;
        }
        for (a, &j) in rows.iter().enumerate() {
            anchors.push(j);
            candidates.extend(unit(j));
            for _ in 0..config.n_distractors {
                let mut pick = rng.random_range(0..rows.len() - 1);
                if pick >= a {
                    pick += 1;
                }
                candidates.extend(unit(rows[pick]));
            }
        }
    }
    if anchors.is_empty() {
        if lone > 0 {
            return Err(Error::Degenerate(
                "contrastive loss needs at least one other masked frame as distractor".into(),
            ));
        }
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let m = anchors.len();
    let predicted = g.gather_rows(ctx.x, &anchors)?;
    let predicted = g.normalize_rows(predicted)?;
    let repeated: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let predicted = g.gather_rows(predicted, &repeated)?;
    let candidates = g.constant(Tensor::matrix(m * k, d, candidates)?);
    let prod = g.mul(predicted, candidates)?;
    let ones = g.constant(Tensor::full(&[d, 1], 1.0));
    let cos = g.matmul(prod, ones)?;
    let cos = g.reshape(cos, &[m, k])?;
    let logits = g.scale(cos, 1.0 / config.temperature)?;
    g.cross_entropy(logits, &vec![Some(0); m])
}

/// How the subtask losses are evaluated during training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossOptions {
    pub ssl: SslLoss,
    pub contrastive: ContrastiveConfig,
    /// Apply the batch's mask plans to supervised speech inputs.
    pub corrupt_supervised: bool,
}

/// Loss of one batch of its own subtask (unweighted).
pub fn task_loss(model: &StptModel, g: &mut Graph, batch: &TaskBatch, options: &LossOptions, seed: u64) -> Result<Var> {
    match batch.task {
        Task::T2t => t2t_loss(model, g, batch),
        Task::Ssl => match options.ssl {
            SslLoss::Kl => ssl_masked_kl_loss(model, g, batch),
            SslLoss::Contrastive => contrastive_loss(model, g, batch, &options.contrastive, seed),
        },
        Task::S2p => s2p_loss(model, g, batch, options.corrupt_supervised),
        Task::S2t => s2t_loss(model, g, batch, options.corrupt_supervised),
    }
}

fn check_finite(task: Task, value: f64) -> Result<()> {
    if value.is_nan() {
        return Err(Error::Numeric(format!("{task} loss is NaN")));
    }
    Ok(())
}

/// `l_t2t + α·l_ssl + β·l_s2p + γ·l_s2t` on a graph.
pub fn combine_losses(g: &mut Graph, t2t: Var, ssl: Var, s2p: Var, s2t: Var, w: &TaskWeights) -> Result<Var> {
    for (task, v) in [(Task::T2t, t2t), (Task::Ssl, ssl), (Task::S2p, s2p), (Task::S2t, s2t)] {
        check_finite(task, g.scalar(v))?;
    }
    let mut total = t2t;
    for (task, v) in [(Task::Ssl, ssl), (Task::S2p, s2p), (Task::S2t, s2t)] {
        let scaled = g.scale(v, w.weight(task))?;
        total = g.add(total, scaled)?;
    }
    Ok(total)
}

/// Scalar form of [`combine_losses`].
pub fn combine_loss_values(t2t: f64, ssl: f64, s2p: f64, s2t: f64, w: &TaskWeights) -> Result<f64> {
    for (task, v) in [(Task::T2t, t2t), (Task::Ssl, ssl), (Task::S2p, s2p), (Task::S2t, s2t)] {
        check_finite(task, v)?;
    }
    Ok(t2t + w.alpha * ssl + w.beta * s2p + w.gamma * s2t)
}
