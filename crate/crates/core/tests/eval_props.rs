use kdgat::eval::{confusion, detect_stream, f1_score, metrics, ConfusionCounts, EvalError};
use kdgat::graph::build_windows;
use kdgat::ingest::CanMessage;
use kdgat::model::{attack_probability, build_model, train_teacher, ArchConfig, TrainConfig};
use kdgat::synth::{AttackKind, AttackScenario, Scenario};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn confusion_matches_brute_force_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let preds: Vec<u8> = (0..1000).map(|_| rng.gen_range(0..2)).collect();
    let labels: Vec<u8> = (0..1000).map(|_| rng.gen_range(0..2)).collect();
    let c = confusion(&preds, &labels).unwrap();
    let count = |p: u8, y: u8| preds.iter().zip(&labels).filter(|&(&a, &b)| a == p && b == y).count() as u64;
    assert_eq!(c, ConfusionCounts { tp: count(1, 1), tn: count(0, 0), fp: count(1, 0), fn_: count(0, 1) });
}

proptest! {
    #[test]
    fn confusion_ignores_joint_reordering(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..200), seed in any::<u64>()) {
        let (p, y): (Vec<u8>, Vec<u8>) = pairs.iter().cloned().unzip();
        let mut shuffled = pairs.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let (ps, ys): (Vec<u8>, Vec<u8>) = shuffled.into_iter().unzip();
        prop_assert_eq!(confusion(&p, &y).unwrap(), confusion(&ps, &ys).unwrap());
    }

    #[test]
    fn metrics_match_scalar_formulas(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        prop_assume!(tp + tn + fp + fn_ > 0);
        let m = metrics(&ConfusionCounts { tp, tn, fp, fn_ }).unwrap();
        let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
        let acc = (tp + tn) / (tp + tn + fp + fn_);
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        prop_assert!((m.accuracy - acc).abs() < 1e-12);
        prop_assert!((m.precision - p).abs() < 1e-12);
        prop_assert!((m.recall - r).abs() < 1e-12);
        prop_assert!((m.f1 - f).abs() < 1e-12);
        prop_assert!((m.f1 - f1_score(m.precision, m.recall)).abs() < 1e-15);
    }
}

fn benign_only(seed: u64) -> Vec<CanMessage> {
    let s = Scenario { attacks: Vec::new(), seed, ..Scenario::desk_default() };
    s.generate().unwrap()
}

#[test]
fn detection_matches_offline_scoring() {
    let msgs = Scenario::desk_default().generate().unwrap();
    let model = build_model(ArchConfig::student(), 3).unwrap();
    let det = detect_stream(&model, &msgs[..5000], 50, 25, 0.5).unwrap();
    let graphs = build_windows(&msgs[..5000], 50, 25).unwrap();
    assert_eq!(det.records.len(), graphs.len());
    for (r, g) in det.records.iter().zip(&graphs) {
        let p = attack_probability(model.forward(g).unwrap());
        assert_eq!(r.prob, p);
        assert_eq!(r.verdict, p >= 0.5);
        assert_eq!(r.start_ts, msgs[g.window_start_index].timestamp);
        assert_eq!(r.end_ts, msgs[g.window_start_index + 49].timestamp);
    }
    assert_eq!(det.records, detect_stream(&model, &msgs[..5000], 50, 25, 0.5).unwrap().records);
    assert!(det.windows_per_second > 0.0);

    let all = detect_stream(&model, &msgs[..5000], 50, 25, -3.0).unwrap();
    assert_eq!(all.threshold, 0.0);
    assert_eq!(all.attack_windows(), all.records.len());
    let strict = detect_stream(&model, &msgs[..5000], 50, 25, 1.0 + 1e-9).unwrap();
    assert_eq!(strict.threshold, 1.0);
    assert!(strict.records.iter().all(|r| r.verdict == (r.prob == 1.0)));
}

#[test]
fn empty_and_short_traces() {
    let model = build_model(ArchConfig::student(), 3).unwrap();
    assert!(matches!(detect_stream(&model, &[], 50, 50, 0.5), Err(EvalError::EmptyTrace)));
    let msgs = benign_only(1);
    assert!(matches!(detect_stream(&model, &msgs[..10], 50, 50, 0.5), Err(EvalError::EmptyTrace)));
}

#[test]
fn trained_detector_on_benign_and_flooded_traces() {
    let msgs = Scenario::desk_default().generate().unwrap();
    let graphs = build_windows(&msgs, 50, 50).unwrap();
    let cfg = TrainConfig { epochs: 30, lr: 2e-3, batch_size: 16, seed: 1, ..TrainConfig::default() };
    let (model, _) = train_teacher(ArchConfig::student(), &graphs, &cfg).unwrap();

    let benign = detect_stream(&model, &benign_only(31), 50, 50, 0.5).unwrap();
    let fp_rate = benign.attack_windows() as f64 / benign.records.len() as f64;
    assert!(fp_rate <= 0.01, "false-positive rate {fp_rate}");

    let flood = AttackScenario::new(AttackKind::Flooding { id: 0, rate: 1000.0 }, 20.0, 2.0);
    let s = Scenario { attacks: vec![flood], seed: 32, ..Scenario::desk_default() };
    let msgs = s.generate().unwrap();
    let det = detect_stream(&model, &msgs, 50, 50, 0.5).unwrap();
    for (r, g) in det.records.iter().zip(build_windows(&msgs, 50, 50).unwrap()) {
        if g.label == 1 {
            assert!(r.verdict, "window {} overlaps the flood but scored {}", r.window_index, r.prob);
        }
    }
}

