use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, ModelError, Result};
use crate::graph::WindowGraph;
use crate::nn::{global_mean_pool, EdgeSet, GatLayer, JkAggregator, Linear, NnError, ELU_ALPHA};
use crate::tensor::{no_grad, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Disjoint union of several window graphs.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    /// `N × in_dim` node features of all graphs, stacked.
    pub x: Tensor,
    pub edges: EdgeSet,
    /// Graph of each node row.
    pub graph_index: Rc<Vec<usize>>,
    pub num_graphs: usize,
    pub labels: Vec<u8>,
}

impl GraphBatch {
    pub fn new(graphs: &[&WindowGraph]) -> Result<GraphBatch> {
        if graphs.is_empty() {
            return Err(ModelError::EmptyDataset("batch holds no graphs".into()));
        }
        let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut x = Vec::with_capacity(total * 3);
        let mut graph_index = Vec::with_capacity(total);
        let mut edges = Vec::new();
        let mut offset = 0;
        let mut width = None;
        for (gi, g) in graphs.iter().enumerate() {
            if g.num_nodes() == 0 {
                return Err(NnError::EmptyGraph(gi).into());
            }
            for row in &g.x {
                let w = *width.get_or_insert(row.len());
                debug_assert_eq!(w, row.len());
                x.extend_from_slice(row);
            }
            graph_index.extend(std::iter::repeat_n(gi, g.num_nodes()));
            edges.extend(g.edges.iter().map(|e| (e.src + offset, e.dst + offset, e.weight as f64)));
            offset += g.num_nodes();
        }
        let width = width.unwrap_or(0);
        Ok(GraphBatch {
            x: Tensor::constant(total, width, x)?,
            edges: EdgeSet::with_self_loops(total, &edges)?,
            graph_index: Rc::new(graph_index),
            num_graphs: graphs.len(),
            labels: graphs.iter().map(|g| g.label).collect(),
        })
    }
}

/// GAT stack, bidirectional-LSTM jumping knowledge, mean readout and an MLP
/// head producing two logits per graph.
#[derive(Debug)]
pub struct GatModel {
    arch: ArchConfig,
    gat: Vec<GatLayer>,
    jk: JkAggregator,
    head: Vec<Linear>,
    mode: Mode,
}

/// Initializes a model: Glorot-uniform weights, zero biases, all drawn from
/// one ChaCha8 stream seeded with `seed`.
pub fn build_model(arch: ArchConfig, seed: u64) -> Result<GatModel> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = arch.gat_widths();
    let mut gat = Vec::with_capacity(arch.gat_layers);
    let mut in_dim = arch.in_dim;
    for (l, &w) in widths.iter().enumerate() {
        let last = l + 1 == arch.gat_layers;
        gat.push(GatLayer::new(in_dim, arch.hidden_channels, arch.heads, !last, !last, arch.edge_weights, &mut rng));
        in_dim = w;
    }
    let jk = JkAggregator::new(&widths, arch.hidden_channels, arch.jk_hidden(), &mut rng);
    let head = arch.head_widths().windows(2).map(|w| Linear::new(w[0], w[1], &mut rng)).collect();
    Ok(GatModel { arch, gat, jk, head, mode: Mode::Eval })
}

impl GatModel {
    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.gat.iter().enumerate() {
            out.push((format!("gat.{i}.weight"), l.weight.clone()));
            out.push((format!("gat.{i}.attention"), l.attention.clone()));
        }
        for (i, p) in self.jk.projections.iter().enumerate() {
            out.push((format!("jk.proj.{i}"), p.clone()));
        }
        for (dir, lstm) in [("fwd", &self.jk.forward_lstm), ("bwd", &self.jk.backward_lstm)] {
            out.push((format!("jk.lstm_{dir}.w_input"), lstm.w_input.clone()));
            out.push((format!("jk.lstm_{dir}.w_hidden"), lstm.w_hidden.clone()));
            out.push((format!("jk.lstm_{dir}.bias"), lstm.bias.clone()));
        }
        for (i, l) in self.head.iter().enumerate() {
            out.push((format!("head.{i}.weight"), l.weight.clone()));
            out.push((format!("head.{i}.bias"), l.bias.clone()));
        }
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(Tensor::len).sum()
    }

    /// Logits `num_graphs × 2` for a batch. Dropout is active only in
    /// [`Mode::Train`], drawing one mask seed per application from `rng`.
    pub fn forward_batch(&self, batch: &GraphBatch, rng: &mut impl Rng) -> Result<Tensor> {
        if batch.x.cols() != self.arch.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "model_forward",
                lhs: batch.x.shape(),
                rhs: (batch.x.rows(), self.arch.in_dim),
            }
            .into());
        }
        let training = self.mode == Mode::Train;
        let rate = self.arch.dropout;
        let mut drop = |t: &Tensor| -> Result<Tensor> {
            if training && rate > 0.0 {
                Ok(t.dropout(rate, true, rng.gen())?)
            } else {
                Ok(t.clone())
            }
        };
        // Raw node features are only three wide, so they are never dropped.
        let mut h = batch.x.clone();
        let mut layers = Vec::with_capacity(self.gat.len());
        for (l, layer) in self.gat.iter().enumerate() {
            let input = if l == 0 { h.clone() } else { drop(&h)? };
            h = layer.forward(&input, &batch.edges)?;
            layers.push(h.clone());
        }
        let nodes = self.jk.aggregate(&layers)?;
        let mut g = global_mean_pool(&nodes, &batch.graph_index, batch.num_graphs)?;
        let last = self.head.len() - 1;
        for (i, lin) in self.head.iter().enumerate() {
            g = lin.forward(&g)?;
            if i < last {
                g = drop(&g.elu(ELU_ALPHA)?)?;
            }
        }
        Ok(g)
    }

    /// Inference logits for each graph, batched `batch_size` at a time,
    /// without dropout and without recording gradients.
    pub fn predict_logits(&self, graphs: &[&WindowGraph], batch_size: usize) -> Result<Vec<[f64; 2]>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(graphs.len());
        no_grad(|| -> Result<()> {
            for chunk in graphs.chunks(batch_size.max(1)) {
                let batch = GraphBatch::new(chunk)?;
                let logits = self.eval_forward(&batch, &mut unused)?;
                out.extend((0..logits.rows()).map(|r| [logits.get(r, 0), logits.get(r, 1)]));
            }
            Ok(())
        })?;
        Ok(out)
    }

    /// Inference logits for one graph.
    pub fn forward(&self, graph: &WindowGraph) -> Result<[f64; 2]> {
        Ok(self.predict_logits(&[graph], 1)?[0])
    }

    fn eval_forward(&self, batch: &GraphBatch, rng: &mut impl Rng) -> Result<Tensor> {
        if self.mode == Mode::Eval {
            return self.forward_batch(batch, rng);
        }
        let shadow = GatModel {
            arch: self.arch,
            gat: self.gat.clone(),
            jk: self.jk.clone(),
            head: self.head.clone(),
            mode: Mode::Eval,
        };
        shadow.forward_batch(batch, rng)
    }

    /// Copies of all parameter values, in [`GatModel::named_parameters`] order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.parameters().iter().map(Tensor::to_vec).collect()
    }

    pub fn restore(&self, values: &[Vec<f64>]) {
        for (p, v) in self.parameters().iter().zip(values) {
            p.data_mut().copy_from_slice(v);
        }
    }
}

/// Attack probability from a logit pair.
pub fn attack_probability(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;

    fn toy_graph(n: usize, salt: f64) -> WindowGraph {
        let x = (0..n).map(|i| [0.1 * i as f64 + salt, 0.3, (i as f64 + salt).sin().abs()]).collect();
        let edges = (0..n.saturating_sub(1)).map(|i| Edge { src: i, dst: i + 1, weight: 1 + i as u32 % 3 }).collect();
        WindowGraph { node_ids: (0..n as u16).collect(), x, edges, label: 0, window_start_index: 0 }
    }

    #[test]
    fn parameter_counts() {
        let t = build_model(ArchConfig::teacher(), 1).unwrap();
        let s = build_model(ArchConfig::student(), 1).unwrap();
        assert_eq!(t.parameter_count(), 306_258);
        assert_eq!(s.parameter_count(), 29_362);
        assert!((s.parameter_count() as f64) / (t.parameter_count() as f64) < 0.10);
    }

    #[test]
    fn layer_structure() {
        let t = build_model(ArchConfig::teacher(), 1).unwrap();
        assert_eq!(t.gat.len(), 5);
        assert!(t.gat.iter().all(|l| l.heads == 8));
        let s = build_model(ArchConfig::student(), 1).unwrap();
        assert_eq!(s.gat.len(), 2);
        assert!(s.gat.iter().all(|l| l.heads == 4));
        assert!(matches!(build_model(ArchConfig { gat_layers: 0, ..ArchConfig::student() }, 0), Err(ModelError::InvalidArch(_))));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = build_model(ArchConfig::student(), 42).unwrap().snapshot();
        let b = build_model(ArchConfig::student(), 42).unwrap().snapshot();
        let c = build_model(ArchConfig::student(), 43).unwrap().snapshot();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn single_node_and_repeatability() {
        let m = build_model(ArchConfig::student(), 3).unwrap();
        let g = toy_graph(1, 0.2);
        let a = m.forward(&g).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, m.forward(&g).unwrap());
    }

    #[test]
    fn train_mode_dropout_changes_output() {
        let mut m = build_model(ArchConfig::student(), 3).unwrap();
        let g = toy_graph(6, 0.1);
        let batch = GraphBatch::new(&[&g]).unwrap();
        m.set_mode(Mode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = m.forward_batch(&batch, &mut rng).unwrap().to_vec();
        let b = m.forward_batch(&batch, &mut rng).unwrap().to_vec();
        assert_ne!(a, b);
        // Inference ignores the training flag.
        let e = m.forward(&g).unwrap();
        m.set_mode(Mode::Eval);
        assert_eq!(e, m.forward(&g).unwrap());
    }

    #[test]
    fn batch_matches_individual() {
        let m = build_model(ArchConfig::teacher(), 5).unwrap();
        let graphs: Vec<WindowGraph> = (1..8).map(|n| toy_graph(n, n as f64 * 0.07)).collect();
        let refs: Vec<&WindowGraph> = graphs.iter().collect();
        let batched = m.predict_logits(&refs, 128).unwrap();
        for (g, b) in graphs.iter().zip(&batched) {
            let alone = m.forward(g).unwrap();
            assert!((alone[0] - b[0]).abs() < 1e-9 && (alone[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn probability_of_logits() {
        assert_eq!(attack_probability([0.0, 0.0]), 0.5);
        assert!((attack_probability([0.0, 2.0]) - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
        assert_eq!(attack_probability([0.0, 1000.0]), 1.0);
    }
}
