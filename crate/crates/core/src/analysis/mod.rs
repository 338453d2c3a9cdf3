//! Gradient-interference probe: per-subtask gradients summed over fixed batch
//! sets, compared layer by layer with cosine similarity.

mod export;

use serde::{Deserialize, Serialize};

pub use export::{export_report, parse_csv, render_csv, render_svg};

use crate::data::{Batcher, Corpus, Task};
use crate::error::{Error, Result};
use crate::model::{ArchitectureVariant, LayerGroup, Stack, StptModel};
use crate::numerics::{cosine_similarity, Gradients, Graph};
use crate::seeds;
use crate::train::{Stage, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Batches summed per subtask.
    pub n_batches: usize,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_batches: 20,
            batch_size: 8,
        }
    }
}

/// Which part of the network a layer group belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Speech,
    Shared,
    Embedding,
}

impl GroupKind {
    /// Subtasks compared on this kind of group. Text-to-text never reaches
    /// the speech encoder, so speech layers get a 3×3 matrix.
    pub fn tasks(self) -> &'static [Task] {
        match self {
            GroupKind::Speech => &[Task::Ssl, Task::S2p, Task::S2t],
            GroupKind::Shared | GroupKind::Embedding => &Task::ALL,
        }
    }
}

/// Layer groups probed on `model`: speech-encoder layers, shared-encoder
/// layers, then the embedding tables.
pub fn probe_groups(model: &StptModel) -> Vec<(GroupKind, LayerGroup)> {
    let mut out: Vec<_> = model
        .layer_groups(Stack::Speech)
        .into_iter()
        .map(|g| (GroupKind::Speech, g))
        .collect();
    out.extend(model.layer_groups(Stack::Shared).into_iter().map(|g| (GroupKind::Shared, g)));
    out.push((GroupKind::Embedding, model.embedding_group()));
    out
}

/// Summed gradient of one layer group, flattened in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub name: String,
    pub kind: GroupKind,
    pub values: Vec<f64>,
    /// False when no parameter of the group was on the task's path; the
    /// values are then exact zeros.
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradients {
    pub task: Task,
    pub n_batches: usize,
    pub layers: Vec<LayerGradient>,
}

/// Sums the gradient of `task`'s loss over `probe.n_batches` batches drawn
/// from its training pool, in batch order, then flattens each layer group.
/// The model is only read.
pub fn accumulate_gradients(
    model: &StptModel,
    corpus: &Corpus,
    task: Task,
    probe: &ProbeConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<TaskGradients> {
    if probe.n_batches == 0 || probe.batch_size == 0 {
        return Err(Error::config("probe", "n_batches and batch_size must be positive"));
    }
    let batcher = Batcher::new(corpus, model.config(), train.masking);
    let options = train.loss_options(Stage::Joint);
    let n = model.params().len();
    let mut total = Gradients::empty(n);
    for i in 0..probe.n_batches {
        let s = seeds::derive(seed, "probe", &[task.index() as u64, i as u64]);
        let batch = batcher.sample(task, task.training_pool(), probe.batch_size, s)?;
        let mut g = Graph::new();
        let loss = crate::tasks::task_loss(model, &mut g, &batch, &options, s)?;
        g.backward(loss)?;
        total.accumulate(&g.param_grads(n)?);
    }
    let layers = probe_groups(model)
        .into_iter()
        .map(|(kind, group)| {
            let mut values = Vec::new();
            let mut present = false;
            for id in group.params {
                match total.get(id) {
                    Some(g) => {
                        present = true;
                        values.extend_from_slice(g);
                    }
                    None => values.extend(std::iter::repeat_n(0.0, model.params().get(id).len())),
                }
            }
            LayerGradient {
                name: group.name,
                kind,
                values,
                present,
            }
        })
        .collect();
    Ok(TaskGradients {
        task,
        n_batches: probe.n_batches,
        layers,
    })
}

/// Pairwise similarities of one layer group. `None` marks a pair with a
/// structurally absent or all-zero gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub name: String,
    pub kind: GroupKind,
    pub tasks: Vec<Task>,
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Fewer than two tasks had a usable gradient.
    pub degenerate: bool,
}

impl LayerSimilarity {
    pub fn get(&self, a: Task, b: Task) -> Option<f64> {
        let i = self.tasks.iter().position(|&t| t == a)?;
        let j = self.tasks.iter().position(|&t| t == b)?;
        self.matrix[i][j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSimilarityReport {
    pub model_id: String,
    pub variant: ArchitectureVariant,
    pub n_batches: usize,
    pub seed: u64,
    pub layers: Vec<LayerSimilarity>,
    /// Every layer is degenerate.
    pub degenerate: bool,
}

impl GradientSimilarityReport {
    pub fn layer(&self, name: &str) -> Option<&LayerSimilarity> {
        self.layers.iter().find(|l| l.name == name)
    }
}

fn similarity(a: &LayerGradient, b: &LayerGradient) -> Result<Option<f64>> {
    if !a.present || !b.present {
        return Ok(None);
    }
    match cosine_similarity(&a.values, &b.values) {
        Ok(c) => Ok(Some(c)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Cosine-similarity matrices per layer group from per-task gradients. Each
/// group compares the tasks of its [`GroupKind`] that were probed.
pub fn similarity_matrix(
    model_id: &str,
    variant: ArchitectureVariant,
    seed: u64,
    gradients: &[TaskGradients],
) -> Result<GradientSimilarityReport> {
    let first = gradients
        .first()
        .ok_or_else(|| Error::Contract("similarity_matrix needs at least one task".into()))?;
    if gradients.iter().any(|g| g.layers.len() != first.layers.len()) {
        return Err(Error::Contract("task gradients come from different models".into()));
    }
    let mut layers = Vec::new();
    for (li, layer) in first.layers.iter().enumerate() {
        let rows: Vec<&TaskGradients> = layer
            .kind
            .tasks()
            .iter()
            .filter_map(|t| gradients.iter().find(|g| g.task == *t))
            .collect();
        let k = rows.len();
        let mut matrix = vec![vec![None; k]; k];
        for i in 0..k {
            for j in i..k {
                let (a, b) = (&rows[i].layers[li], &rows[j].layers[li]);
                if a.name != layer.name || b.name != layer.name {
                    return Err(Error::Contract(format!("layer order differs at `{}`", layer.name)));
                }
                let s = if i == j {
                    similarity(a, a)?.map(|_| 1.0)
                } else {
                    similarity(a, b)?
                };
                matrix[i][j] = s;
                matrix[j][i] = s;
            }
        }
        let usable = (0..k).filter(|&i| matrix[i][i].is_some()).count();
        layers.push(LayerSimilarity {
            name: layer.name.clone(),
            kind: layer.kind,
            tasks: rows.iter().map(|g| g.task).collect(),
            matrix,
            degenerate: usable < 2,
        });
    }
    let degenerate = layers.iter().all(|l| l.degenerate);
    Ok(GradientSimilarityReport {
        model_id: model_id.to_string(),
        variant,
        n_batches: first.n_batches,
        seed,
        layers,
        degenerate,
    })
}

/// Probes every subtask on `model` and builds the report.
pub fn probe(
    model_id: &str,
    model: &StptModel,
    corpus: &Corpus,
    probe: &ProbeConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<GradientSimilarityReport> {
    let grads = Task::ALL
        .into_iter()
        .map(|t| accumulate_gradients(model, corpus, t, probe, train, seed))
        .collect::<Result<Vec<_>>>()?;
    similarity_matrix(model_id, model.config().variant, seed, &grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(task: Task, kind: GroupKind, values: Vec<f64>) -> TaskGradients {
        TaskGradients {
            task,
            n_batches: 1,
            layers: vec![LayerGradient {
                name: "l".into(),
                kind,
                present: values.iter().any(|&v| v != 0.0),
                values,
            }],
        }
    }

    #[test]
    fn duplicate_and_negated_vectors() {
        let v = vec![0.3, -1.0, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let r = similarity_matrix(
            "m",
            ArchitectureVariant::Fse,
            0,
            &[
                grads(Task::T2t, GroupKind::Shared, v.clone()),
                grads(Task::Ssl, GroupKind::Shared, v.clone()),
                grads(Task::S2p, GroupKind::Shared, neg),
            ],
        )
        .unwrap();
        let l = &r.layers[0];
        assert_eq!(l.tasks, vec![Task::T2t, Task::Ssl, Task::S2p]);
        assert!((l.get(Task::T2t, Task::Ssl).unwrap() - 1.0).abs() < 1e-12);
        assert!((l.get(Task::T2t, Task::S2p).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(l.get(Task::S2p, Task::S2p), Some(1.0));
        assert!(!r.degenerate);
    }

    #[test]
    fn zero_vectors_are_absent_and_flagged() {
        let r = similarity_matrix(
            "m",
            ArchitectureVariant::Pse,
            0,
            &[
                grads(Task::T2t, GroupKind::Shared, vec![0.0; 3]),
                grads(Task::Ssl, GroupKind::Shared, vec![0.0; 3]),
            ],
        )
        .unwrap();
        assert!(r.layers[0].matrix.iter().flatten().all(Option::is_none));
        assert!(r.degenerate);
    }

    #[test]
    fn speech_groups_exclude_text_task() {
        let r = similarity_matrix(
            "m",
            ArchitectureVariant::Fse,
            0,
            &[
                grads(Task::T2t, GroupKind::Speech, vec![0.0; 2]),
                grads(Task::Ssl, GroupKind::Speech, vec![1.0, 0.0]),
                grads(Task::S2t, GroupKind::Speech, vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        assert_eq!(r.layers[0].tasks, vec![Task::Ssl, Task::S2t]);
        assert_eq!(r.layers[0].get(Task::Ssl, Task::S2t), Some(0.0));
    }
}
