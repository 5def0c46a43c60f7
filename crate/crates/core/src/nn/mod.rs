//! Layers and losses built on [`crate::tensor`].

mod gat;
mod jk;
mod loss;

pub use gat::{EdgeSet, GatLayer, LEAKY_SLOPE};
pub use jk::{lstm_cell, JkAggregator, LstmParams};
pub use loss::{focal_loss, hard_loss, kd_loss, soften, KdLoss, LossConfig};

use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// ELU slope for negative inputs.
pub const ELU_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("edge ({src}, {dst}) references a node outside 0..{num_nodes}")]
    EdgeIndexOutOfRange { src: usize, dst: usize, num_nodes: usize },
    #[error("jumping-knowledge aggregation needs at least one layer")]
    EmptyLayerList,
    #[error("graph {0} has no nodes")]
    EmptyGraph(usize),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("label {0} is not binary")]
    InvalidLabel(u8),
    #[error("probability {0} outside (0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Glorot/Xavier uniform initialisation of a `rows × cols` trainable matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(rows, cols, data).expect("finite init")
}

pub fn zeros_param(rows: usize, cols: usize) -> Tensor {
    Tensor::param(rows, cols, vec![0.0; rows * cols]).expect("finite init")
}

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear { weight: glorot(in_dim, out_dim, rng), bias: zeros_param(1, out_dim) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.add(&self.bias)?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Column-wise mean of the node rows belonging to each graph:
/// `(N × d) → (num_graphs × d)`.
pub fn global_mean_pool(x: &Tensor, graph_index: &Rc<Vec<usize>>, num_graphs: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; num_graphs];
    for &g in graph_index.iter() {
        if g >= num_graphs {
            return Err(TensorError::IndexOutOfRange { op: "global_mean_pool", index: g, len: num_graphs }.into());
        }
        counts[g] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(NnError::EmptyGraph(empty));
    }
    let summed = x.scatter_add_rows(graph_index, num_graphs)?;
    let inv = Tensor::constant(num_graphs, 1, counts.iter().map(|&c| 1.0 / c as f64).collect())?;
    Ok(summed.mul(&inv)?)
}
