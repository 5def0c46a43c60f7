use std::rc::Rc;

use rand::Rng;

use super::{glorot, NnError, Result, ELU_ALPHA};
use crate::tensor::Tensor;

/// Negative slope of the attention-score LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Directed edges of a (possibly batched) graph, self-loops included.
/// Node `v` aggregates over the sources of its incoming edges.
#[derive(Debug, Clone)]
pub struct EdgeSet {
    pub num_nodes: usize,
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
    /// `log(1 + weight)` per edge, `E × 1`.
    pub log_weight: Tensor,
}

impl EdgeSet {
    /// Builds the edge set, adding a weight-1 self-loop to every node that
    /// lacks one.
    pub fn with_self_loops(num_nodes: usize, edges: &[(usize, usize, f64)]) -> Result<EdgeSet> {
        let mut has_loop = vec![false; num_nodes];
        let mut src = Vec::with_capacity(edges.len() + num_nodes);
        let mut dst = Vec::with_capacity(edges.len() + num_nodes);
        let mut lw = Vec::with_capacity(edges.len() + num_nodes);
        for &(s, d, w) in edges {
            if s >= num_nodes || d >= num_nodes {
                return Err(NnError::EdgeIndexOutOfRange { src: s, dst: d, num_nodes });
            }
            if s == d {
                has_loop[s] = true;
            }
            src.push(s);
            dst.push(d);
            lw.push(w.ln_1p());
        }
        for (v, _) in has_loop.iter().enumerate().filter(|(_, &l)| !l) {
            src.push(v);
            dst.push(v);
            lw.push(1f64.ln_1p());
        }
        let n = lw.len();
        Ok(EdgeSet { num_nodes, src: Rc::new(src), dst: Rc::new(dst), log_weight: Tensor::constant(n, 1, lw)? })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Multi-head graph attention layer.
///
/// Per head, `s_vu = LeakyReLU(aᵀ[W h_v ‖ W h_u ‖ log(1 + w_vu)])`, the
/// coefficients are a softmax of `s_v·` over the in-neighbours of `v`, and
/// the output is `σ(Σ_u α_vu W h_u)`. Heads are concatenated or averaged.
#[derive(Debug, Clone)]
pub struct GatLayer {
    /// `in_dim × (heads · head_dim)`.
    pub weight: Tensor,
    /// `heads × (2 · head_dim [+ 1])`: destination part, source part and the
    /// optional edge-weight slot.
    pub attention: Tensor,
    pub heads: usize,
    pub head_dim: usize,
    pub concat_heads: bool,
    /// ELU on the output; off for the last layer.
    pub activate: bool,
    pub edge_weights: bool,
}

impl GatLayer {
    pub fn new(
        in_dim: usize,
        head_dim: usize,
        heads: usize,
        concat_heads: bool,
        activate: bool,
        edge_weights: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = glorot(in_dim, heads * head_dim, rng);
        let attention = glorot(heads, 2 * head_dim + edge_weights as usize, rng);
        GatLayer { weight, attention, heads, head_dim, concat_heads, activate, edge_weights }
    }

    pub fn out_dim(&self) -> usize {
        if self.concat_heads {
            self.heads * self.head_dim
        } else {
            self.head_dim
        }
    }

    pub fn forward(&self, x: &Tensor, edges: &EdgeSet) -> Result<Tensor> {
        Ok(self.forward_with_attention(x, edges)?.0)
    }

    /// Output embeddings plus the `E × heads` attention coefficients.
    pub fn forward_with_attention(&self, x: &Tensor, edges: &EdgeSet) -> Result<(Tensor, Tensor)> {
        if x.rows() != edges.num_nodes {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "gat_layer",
                lhs: x.shape(),
                rhs: (edges.num_nodes, x.cols()),
            }
            .into());
        }
        let d = self.head_dim;
        let h = x.matmul(&self.weight)?;
        let a_dst = self.attention.slice(1, 0, d)?;
        let a_src = self.attention.slice(1, d, d)?;
        let s_dst = h.head_dot(&a_dst)?.gather_rows(&edges.dst)?;
        let s_src = h.head_dot(&a_src)?.gather_rows(&edges.src)?;
        let mut scores = s_dst.add(&s_src)?;
        if self.edge_weights {
            let a_edge = self.attention.slice(1, 2 * d, 1)?.transpose()?;
            scores = scores.add(&edges.log_weight.matmul(&a_edge)?)?;
        }
        let alpha = scores.leaky_relu(LEAKY_SLOPE)?.segment_softmax(&edges.dst)?;
        let messages = h.gather_rows(&edges.src)?.head_scale(&alpha)?;
        let mut out = messages.scatter_add_rows(&edges.dst, edges.num_nodes)?;
        if !self.concat_heads {
            out = out.head_mean(self.heads)?;
        }
        if self.activate {
            out = out.elu(ELU_ALPHA)?;
        }
        Ok((out, alpha))
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.attention.clone()]
    }
}
