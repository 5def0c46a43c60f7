use rand::Rng;

use super::{glorot, zeros_param, NnError, Result};
use crate::tensor::{Tensor, TensorError};

/// LSTM weights for input size `d_in` and hidden size `d_h`. Gates are laid
/// out as `[input | forget | candidate | output]` along the columns.
#[derive(Debug, Clone)]
pub struct LstmParams {
    /// `d_in × 4·d_h`.
    pub w_input: Tensor,
    /// `d_h × 4·d_h`.
    pub w_hidden: Tensor,
    /// `1 × 4·d_h`.
    pub bias: Tensor,
}

impl LstmParams {
    pub fn new(d_in: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        LstmParams {
            w_input: glorot(d_in, 4 * d_h, rng),
            w_hidden: glorot(d_h, 4 * d_h, rng),
            bias: zeros_param(1, 4 * d_h),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_input.rows()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.rows()
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![self.w_input.clone(), self.w_hidden.clone(), self.bias.clone()]
    }
}

/// One LSTM step over a batch of rows. Returns `(h_t, c_t)`.
pub fn lstm_cell(x: &Tensor, h_prev: &Tensor, c_prev: &Tensor, p: &LstmParams) -> Result<(Tensor, Tensor)> {
    let d_h = p.hidden_size();
    if h_prev.cols() != d_h || c_prev.shape() != h_prev.shape() || x.rows() != h_prev.rows() {
        return Err(TensorError::ShapeMismatch { op: "lstm_cell", lhs: h_prev.shape(), rhs: c_prev.shape() }.into());
    }
    let gates = x.matmul(&p.w_input)?.add(&h_prev.matmul(&p.w_hidden)?)?.add(&p.bias)?;
    let input = gates.slice(1, 0, d_h)?.sigmoid()?;
    let forget = gates.slice(1, d_h, d_h)?.sigmoid()?;
    let candidate = gates.slice(1, 2 * d_h, d_h)?.tanh()?;
    let output = gates.slice(1, 3 * d_h, d_h)?.sigmoid()?;
    let c = forget.mul(c_prev)?.add(&input.mul(&candidate)?)?;
    let h = output.mul(&c.tanh()?)?;
    Ok((h, c))
}

/// Jumping-knowledge aggregation with a bidirectional LSTM over the layer
/// sequence of each node.
///
/// Layer `l`'s embeddings are first projected (no bias) to a common width
/// `d`, then a forward LSTM runs over layers `1..=L` and a backward LSTM over
/// `L..=1`; the result is `[h_fwd(L) ; h_bwd(1)]`, of width `2·d_h`.
#[derive(Debug, Clone)]
pub struct JkAggregator {
    /// One `width_l × d` projection per layer.
    pub projections: Vec<Tensor>,
    pub forward_lstm: LstmParams,
    pub backward_lstm: LstmParams,
}

impl JkAggregator {
    pub fn new(layer_widths: &[usize], d: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let projections = layer_widths.iter().map(|&w| glorot(w, d, rng)).collect();
        JkAggregator {
            projections,
            forward_lstm: LstmParams::new(d, d_h, rng),
            backward_lstm: LstmParams::new(d, d_h, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.forward_lstm.hidden_size()
    }

    pub fn aggregate(&self, layers: &[Tensor]) -> Result<Tensor> {
        if layers.is_empty() {
            return Err(NnError::EmptyLayerList);
        }
        if layers.len() != self.projections.len() {
            return Err(TensorError::ShapeMismatch {
                op: "jk_aggregate",
                lhs: (layers.len(), 0),
                rhs: (self.projections.len(), 0),
            }
            .into());
        }
        let n = layers[0].rows();
        if let Some(bad) = layers.iter().find(|l| l.rows() != n) {
            return Err(TensorError::ShapeMismatch { op: "jk_aggregate", lhs: layers[0].shape(), rhs: bad.shape() }.into());
        }
        let seq = layers
            .iter()
            .zip(&self.projections)
            .map(|(x, p)| x.matmul(p))
            .collect::<std::result::Result<Vec<_>, _>>()?;

        let run = |params: &LstmParams, order: &mut dyn Iterator<Item = &Tensor>| -> Result<Tensor> {
            let d_h = params.hidden_size();
            let mut h = Tensor::zeros(n, d_h);
            let mut c = Tensor::zeros(n, d_h);
            for x in order {
                (h, c) = lstm_cell(x, &h, &c, params)?;
            }
            Ok(h)
        };
        let fwd = run(&self.forward_lstm, &mut seq.iter())?;
        let bwd = run(&self.backward_lstm, &mut seq.iter().rev())?;
        Ok(Tensor::concat(&[fwd, bwd], 1)?)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut ps = self.projections.clone();
        ps.extend(self.forward_lstm.parameters());
        ps.extend(self.backward_lstm.parameters());
        ps
    }
}
