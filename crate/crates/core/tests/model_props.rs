use kdgat::graph::{build_windows, WindowGraph};
use kdgat::model::{build_model, ArchConfig, GatModel};
use kdgat::synth::Scenario;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk_graphs(limit: usize) -> Vec<WindowGraph> {
    let msgs = Scenario::desk_default().generate().unwrap();
    let mut graphs = build_windows(&msgs, 50, 50).unwrap();
    // Keep every attack window that fits so fuzzing-sized graphs are covered.
    graphs.sort_by_key(|g| std::cmp::Reverse(g.num_nodes()));
    graphs.truncate(limit);
    graphs
}

fn close(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
    (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
}

fn models() -> Vec<GatModel> {
    vec![build_model(ArchConfig::teacher(), 21).unwrap(), build_model(ArchConfig::student(), 22).unwrap()]
}

#[test]
fn logits_are_node_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let graphs = desk_graphs(40);
    for m in models() {
        for g in &graphs {
            let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
            perm.shuffle(&mut rng);
            let a = m.forward(g).unwrap();
            let b = m.forward(&g.permuted(&perm)).unwrap();
            assert!(close(a, b, 1e-9), "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn batched_logits_match_single_graph_logits() {
    let graphs = desk_graphs(200);
    let refs: Vec<&WindowGraph> = graphs.iter().collect();
    for m in models() {
        let batched = m.predict_logits(&refs, 128).unwrap();
        for (g, b) in graphs.iter().zip(&batched) {
            assert!(close(m.forward(g).unwrap(), *b, 1e-9));
        }
    }
}

#[test]
fn eval_is_bit_reproducible() {
    let graphs = desk_graphs(20);
    for m in models() {
        for g in &graphs {
            assert_eq!(m.forward(g).unwrap(), m.forward(g).unwrap());
        }
    }
}
