mod common;

use stpt::analysis::{accumulate_gradients, probe, GradientSimilarityReport, GroupKind, ProbeConfig};
use stpt::data::{Batcher, Task};
use stpt::model::ArchitectureVariant;
use stpt::numerics::{Gradients, Graph};
use stpt::seeds;
use stpt::tasks::task_loss;
use stpt::train::{Stage, Trainer};

const PROBE: ProbeConfig = ProbeConfig {
    n_batches: 3,
    batch_size: 2,
};

fn report(variant: ArchitectureVariant, seed: u64) -> GradientSimilarityReport {
    let cfg = common::micro_config(variant);
    let corpus = common::corpus(&cfg);
    let model = common::model(&cfg);
    let before = model.params().clone();
    let r = probe("micro", &model, &corpus, &PROBE, &cfg.train, seed).unwrap();
    for id in before.ids() {
        assert_eq!(before.get(id), model.params().get(id));
    }
    r
}

fn assert_structure(r: &GradientSimilarityReport) {
    for l in &r.layers {
        let k = l.tasks.len();
        assert_eq!(k, l.kind.tasks().len());
        for i in 0..k {
            if let Some(d) = l.matrix[i][i] {
                assert!((d - 1.0).abs() <= 1e-10);
            }
            for j in 0..k {
                assert_eq!(l.matrix[i][j], l.matrix[j][i], "{} not symmetric", l.name);
                if let Some(v) = l.matrix[i][j] {
                    assert!((-1.0..=1.0).contains(&v), "{}: {v}", l.name);
                }
            }
        }
    }
}

#[test]
fn fse_report_is_symmetric_unit_diagonal_and_bounded() {
    let r = report(ArchitectureVariant::Fse, 1);
    assert_structure(&r);
    let shared = r.layers.iter().find(|l| l.kind == GroupKind::Shared).unwrap();
    for t in Task::ALL {
        assert_eq!(shared.get(t, t), Some(1.0));
    }
    assert!(!r.degenerate);
}

#[test]
fn pse_marks_shared_ssl_and_s2p_absent() {
    let r = report(ArchitectureVariant::Pse, 1);
    assert_structure(&r);
    for l in r.layers.iter().filter(|l| l.kind == GroupKind::Shared) {
        for t in [Task::Ssl, Task::S2p] {
            for u in Task::ALL {
                assert_eq!(l.get(t, u), None, "{}: {t}/{u}", l.name);
            }
        }
        assert!(l.get(Task::T2t, Task::S2t).is_some());
    }
    let speech = r.layers.iter().find(|l| l.kind == GroupKind::Speech).unwrap();
    assert!(speech.get(Task::Ssl, Task::S2p).is_some());
}

#[test]
fn probe_is_deterministic_per_seed() {
    assert_eq!(report(ArchitectureVariant::Fse, 7), report(ArchitectureVariant::Fse, 7));
    assert_ne!(report(ArchitectureVariant::Fse, 7), report(ArchitectureVariant::Fse, 8));
}

#[test]
fn accumulated_gradient_is_the_sum_of_batch_gradients() {
    let cfg = common::micro_config(ArchitectureVariant::Fse);
    let corpus = common::corpus(&cfg);
    let model = common::model(&cfg);
    let task = Task::S2t;
    let acc = accumulate_gradients(&model, &corpus, task, &PROBE, &cfg.train, 3).unwrap();
    let batcher = Batcher::new(&corpus, &cfg.model, cfg.train.masking);
    let n = model.params().len();
    let per_batch: Vec<Gradients> = (0..PROBE.n_batches)
        .map(|i| {
            let s = seeds::derive(3, "probe", &[task.index() as u64, i as u64]);
            let b = batcher.sample(task, task.training_pool(), PROBE.batch_size, s).unwrap();
            let mut g = Graph::new();
            let l = task_loss(&model, &mut g, &b, &cfg.train.loss_options(Stage::Joint), s).unwrap();
            g.backward(l).unwrap();
            g.param_grads(n).unwrap()
        })
        .collect();
    let groups = stpt::analysis::probe_groups(&model);
    for ((_, group), layer) in groups.iter().zip(&acc.layers) {
        let mut want = Vec::new();
        for &id in &group.params {
            let len = model.params().get(id).len();
            want.extend((0..len).map(|k| per_batch.iter().map(|g| g.get(id).map_or(0.0, |v| v[k])).sum::<f64>()));
        }
        assert_eq!(want.len(), layer.values.len());
        for (a, b) in want.iter().zip(&layer.values) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{}", layer.name);
        }
    }
}

#[test]
fn trained_model_keeps_the_invariants() {
    let mut cfg = common::micro_config(ArchitectureVariant::Fse);
    cfg.train.stage2.max_updates = 18;
    cfg.train.stage2.batch_sizes = stpt::train::BatchSizes::uniform(2);
    let cfg = cfg.normalize().unwrap();
    let corpus = common::corpus(&cfg);
    let init = stpt::train::Checkpoint::init(common::model(&cfg));
    let trained = Trainer::new(&cfg.train, &corpus, Stage::Joint, init).unwrap().run().unwrap();
    let model = trained.checkpoint.model;
    let r = probe("trained", &model, &corpus, &PROBE, &cfg.train, 2).unwrap();
    assert_structure(&r);
    assert_eq!(r, probe("trained", &model, &corpus, &PROBE, &cfg.train, 2).unwrap());
}
