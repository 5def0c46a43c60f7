use kdgat::graph::{build_graph, WindowGraph};
use kdgat::ingest::{CanMessage, Label};
use kdgat::model::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RESERVED_ID: u16 = 0x7FF;

/// Windows over four benign ids; attack windows carry one reserved-id frame.
fn toy_graphs(n: usize, seed: u64) -> Vec<WindowGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = [0x100u16, 0x1A0, 0x2B0, 0x3C0];
    (0..n)
        .map(|g| {
            let attack = g % 3 == 0;
            let hit = rng.gen_range(0..10);
            let window: Vec<CanMessage> = (0..10)
                .map(|i| {
                    let (id, label) =
                        if attack && i == hit { (RESERVED_ID, Label::Attack) } else { (ids[rng.gen_range(0..4)], Label::Benign) };
                    let payload = (0..8).map(|_| rng.gen()).collect();
                    CanMessage::new(g as f64 + i as f64 * 0.01, id, payload, label).unwrap()
                })
                .collect();
            build_graph(&window, g * 10)
        })
        .collect()
}

fn toy_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr: 2e-3, batch_size: 16, warmup_epochs: 3, seed: 4, ..TrainConfig::default() }
}

fn small_teacher() -> ArchConfig {
    ArchConfig { gat_layers: 3, heads: 4, hidden_channels: 16, ..ArchConfig::teacher() }
}

#[test]
fn separable_task_is_learned() {
    let graphs = toy_graphs(240, 1);
    let (_, h) = train_teacher(ArchConfig::teacher(), &graphs, &toy_cfg(20)).unwrap();
    let best = h.best().unwrap();
    assert!(best.val_acc >= 0.99, "{:?}", h.records.iter().map(|r| r.val_acc).collect::<Vec<_>>());
    let max = h.records.iter().map(|r| r.val_acc).fold(0.0, f64::max);
    assert_eq!(best.val_acc, max);
}

#[test]
fn returned_model_scores_like_its_best_epoch() {
    let graphs = toy_graphs(120, 2);
    let cfg = toy_cfg(6);
    let (model, h) = train_teacher(small_teacher(), &graphs, &cfg).unwrap();
    let split = split_indices(&graphs.iter().map(|g| g.label).collect::<Vec<_>>(), cfg.val_fraction, cfg.split, cfg.seed);
    let val: Vec<WindowGraph> = split.val.iter().map(|&i| graphs[i].clone()).collect();
    let report = kdgat::eval::evaluate(&model, &val, 0.5, 64).unwrap();
    assert_eq!(report.metrics.accuracy, h.best().unwrap().val_acc);
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let graphs = toy_graphs(30, 3);
    let (m, h) = train_teacher(ArchConfig::student(), &graphs, &toy_cfg(0)).unwrap();
    assert!(h.records.is_empty() && h.best_epoch.is_none());
    assert_eq!(m.snapshot(), build_model(ArchConfig::student(), 4).unwrap().snapshot());
}

#[test]
fn degenerate_datasets() {
    assert!(matches!(train_teacher(ArchConfig::student(), &[], &toy_cfg(1)), Err(ModelError::EmptyDataset(_))));
    let benign: Vec<WindowGraph> = toy_graphs(30, 3).into_iter().filter(|g| g.label == 0).collect();
    assert!(matches!(
        train_teacher(ArchConfig::student(), &benign, &toy_cfg(1)),
        Err(ModelError::SingleClassDataset(0))
    ));
}

#[test]
fn training_is_deterministic() {
    let graphs = toy_graphs(60, 5);
    let (a, ha) = train_teacher(ArchConfig::student(), &graphs, &toy_cfg(3)).unwrap();
    let (b, hb) = train_teacher(ArchConfig::student(), &graphs, &toy_cfg(3)).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.snapshot(), b.snapshot());
}

#[test]
fn distillation_schedule_and_frozen_teacher() {
    let graphs = toy_graphs(90, 6);
    let cfg = toy_cfg(6);
    let (teacher, _) = train_teacher(small_teacher(), &graphs, &cfg).unwrap();
    let before = teacher.snapshot();
    let (_, h) = distill_student(&teacher, ArchConfig::student(), &graphs, &cfg).unwrap();
    assert_eq!(teacher.snapshot(), before);
    let stages: Vec<Stage> = h.records.iter().map(|r| r.stage).collect();
    assert_eq!(stages, [[Stage::Warmup; 3], [Stage::Distill; 3]].concat());
    assert!(h.to_csv("").contains("\n3,warmup,") && h.to_csv("").contains("\n4,distill,"));
}

#[test]
fn alpha_one_matches_hard_label_training() {
    let graphs = toy_graphs(90, 7);
    let cfg = TrainConfig { alpha: 1.0, ..toy_cfg(5) };
    let (teacher, _) = train_teacher(small_teacher(), &graphs, &toy_cfg(2)).unwrap();
    let (s, hs) = distill_student(&teacher, ArchConfig::student(), &graphs, &cfg).unwrap();
    let (h, hh) = train_teacher(ArchConfig::student(), &graphs, &cfg).unwrap();
    let strip = |h: &History| h.records.iter().map(|r| (r.train_loss, r.val_loss, r.val_acc)).collect::<Vec<_>>();
    assert_eq!(strip(&hs), strip(&hh));
    assert_eq!(s.snapshot(), h.snapshot());
}

#[test]
fn student_tracks_teacher_on_toy_task() {
    let graphs = toy_graphs(240, 8);
    let cfg = toy_cfg(20);
    let (teacher, ht) = train_teacher(ArchConfig::teacher(), &graphs, &cfg).unwrap();
    let (_, hs) = distill_student(&teacher, ArchConfig::student(), &graphs, &cfg).unwrap();
    let t = ht.best().unwrap().val_acc;
    let s = hs.best().unwrap().val_acc;
    assert!(s >= t - 0.01, "student {s} teacher {t}");
}

#[test]
fn checkpoint_round_trip_after_training() {
    let graphs = toy_graphs(60, 9);
    let (m, h) = train_teacher(ArchConfig::student(), &graphs, &toy_cfg(2)).unwrap();
    let meta = CheckpointMeta {
        role: "student".into(),
        epoch: h.best_epoch,
        val_accuracy: h.best().map(|r| r.val_acc),
        val_f1: h.best().map(|r| r.val_f1),
        seed: 4,
        config_hash: config_hash(&toy_cfg(2)),
        config: serde_json::to_value(toy_cfg(2)).unwrap(),
    };
    let (back, _) = read_checkpoint(&write_checkpoint(&m, &meta)).unwrap();
    for g in &graphs {
        assert_eq!(back.forward(g).unwrap(), m.forward(g).unwrap());
    }
}
