//! Both attention formulations and their gradients.
//!
//! `standard_sdpa` is the classic softmax(q k^T) v kernel. `projection_sdpa`
//! rewrites it as Gaussian-distance weighting: each output row is a convex
//! combination of key rows with weights exp(-|q_i - k_j|^2 / 2 sigma^2),
//! row-normalized. For unit-norm rows, sigma^2 = 1 and scale = 1 the two are
//! the same function; `equivalence_residual` certifies that numerically.

mod kernels;
mod multihead;

pub use kernels::{
    equivalence_residual, gaussian_weights, gaussian_weights_backward, pairwise_sq_distance,
    pairwise_sq_distance_backward, projection_sdpa, projection_sdpa_backward, projection_sdpa_fwd,
    standard_sdpa, standard_sdpa_backward, standard_sdpa_fwd, ProjectionGrads, ProjectionSaved,
    StandardSaved,
};
pub use multihead::{
    multi_head_attention, multi_head_backward, multi_head_forward, MultiHeadSaved,
};

use crate::error::{Error, Result};
use crate::numerics::{Parameter, RngState, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Standard,
    Projection,
}

/// Whether query/key rows are L2-normalized before weighting.
///
/// Layer normalization leaves rows at norm ~ sqrt(d); only explicit L2
/// normalization puts them on the unit sphere where the two kernels agree
/// exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowNormalization {
    None,
    ExplicitL2,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Gaussian variance, projection variant only.
    pub sigma2: f64,
    pub causal: bool,
    pub normalize_rows: RowNormalization,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!(
                "num_heads and head_dim must be positive, got {} / {}",
                self.num_heads, self.head_dim
            )));
        }
        if self.sigma2 <= 0.0 {
            return Err(Error::Config(format!("sigma2 must be > 0, got {}", self.sigma2)));
        }
        Ok(())
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Score scale used by the standard kernel inside the multi-head
    /// wrapper: 1/sqrt(head_dim) for raw rows, 1 for unit-norm rows (the
    /// regime where the projection form matches it exactly).
    pub fn standard_scale(&self) -> f64 {
        match self.normalize_rows {
            RowNormalization::ExplicitL2 => 1.0,
            RowNormalization::None => 1.0 / (self.head_dim as f64).sqrt(),
        }
    }
}

/// Per-call record of the distance and weight matrices, for inspection.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// Pairwise squared Euclidean distances d_ij; absent for the standard
    /// kernel on non-normalized inputs where no distance is defined.
    pub distances: Option<Tensor>,
    /// Row-stochastic weight matrix z_ij; masked entries are exact zeros.
    pub weights: Tensor,
}

/// Learned projections for one multi-head attention layer.
///
/// The projection variant omits `w_v` and reuses keys as values, with
/// `w_out` absorbing the difference.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Parameter,
    pub w_k: Parameter,
    pub w_v: Option<Parameter>,
    pub w_out: Parameter,
}

impl AttentionParams {
    pub fn init(model_dim: usize, inner_dim: usize, variant: AttentionVariant, rng: &mut RngState) -> Self {
        let glorot = |rows: usize, cols: usize, rng: &mut RngState| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Parameter::new(rng.uniform_symmetric_tensor(vec![rows, cols], limit))
        };
        AttentionParams {
            w_q: glorot(model_dim, inner_dim, rng),
            w_k: glorot(model_dim, inner_dim, rng),
            w_v: match variant {
                AttentionVariant::Standard => Some(glorot(model_dim, inner_dim, rng)),
                AttentionVariant::Projection => None,
            },
            w_out: glorot(inner_dim, model_dim, rng),
        }
    }

    pub fn zero_grads(&mut self) {
        self.w_q.zero_grad();
        self.w_k.zero_grad();
        if let Some(wv) = &mut self.w_v {
            wv.zero_grad();
        }
        self.w_out.zero_grad();
    }
}
