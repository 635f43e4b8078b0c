//! Multi-head wrapper: project inputs, run the per-head kernel, concatenate,
//! and project back out, with an exact backward pass through every step.

use crate::attention::kernels::{
    pairwise_sq_distance, projection_sdpa_backward, projection_sdpa_fwd, standard_sdpa_backward,
    standard_sdpa_fwd, ProjectionSaved, StandardSaved,
};
use crate::attention::{
    AttentionConfig, AttentionParams, AttentionTrace, AttentionVariant, RowNormalization,
};
use crate::error::{Error, Result};
use crate::numerics::{
    l2_normalize_rows, l2_normalize_rows_backward, matmul, matmul_transpose_a,
    matmul_transpose_b, Tensor,
};

#[derive(Debug, Clone)]
enum HeadSaved {
    Standard {
        /// Pre-normalization projections, kept when rows were L2-normalized.
        raw_q: Option<Tensor>,
        raw_k: Option<Tensor>,
        saved: StandardSaved,
    },
    Projection { saved: ProjectionSaved },
}

/// Everything the multi-head backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct MultiHeadSaved {
    config: AttentionConfig,
    x_q: Tensor,
    x_kv: Tensor,
    heads: Vec<HeadSaved>,
    concat: Tensor,
}

impl MultiHeadSaved {
    /// Per-head weight matrices (and distances where defined), for
    /// inspection and tests.
    pub fn head_traces(&self) -> Result<Vec<AttentionTrace>> {
        self.heads
            .iter()
            .map(|h| match h {
                HeadSaved::Standard { saved, raw_q, .. } => {
                    let distances = if raw_q.is_some() {
                        Some(pairwise_sq_distance(&saved.q, &saved.k)?)
                    } else {
                        None
                    };
                    Ok(AttentionTrace {
                        distances,
                        weights: saved.weights.clone(),
                    })
                }
                HeadSaved::Projection { saved } => Ok(saved.trace.clone()),
            })
            .collect()
    }
}

fn check_inputs(
    x_q: &Tensor,
    x_kv: &Tensor,
    params: &AttentionParams,
    config: &AttentionConfig,
) -> Result<()> {
    config.validate()?;
    let inner = config.model_dim();
    if x_q.rank() != 2 || x_kv.rank() != 2 || x_q.cols() != x_kv.cols() {
        return Err(Error::ShapeMismatch {
            op: "multi_head inputs",
            left: x_q.shape().to_vec(),
            right: x_kv.shape().to_vec(),
        });
    }
    if params.w_q.value.rows() != x_q.cols() || params.w_q.value.cols() != inner {
        return Err(Error::ShapeMismatch {
            op: "multi_head w_q",
            left: params.w_q.value.shape().to_vec(),
            right: vec![x_q.cols(), inner],
        });
    }
    match (config.variant, &params.w_v) {
        (AttentionVariant::Standard, None) => {
            return Err(Error::Config(
                "standard attention requires a value projection".into(),
            ))
        }
        (AttentionVariant::Projection, Some(_)) => {
            return Err(Error::Config(
                "projection attention takes no value projection".into(),
            ))
        }
        _ => {}
    }
    Ok(())
}

/// Forward pass over all heads. `x_q` supplies queries; `x_kv` supplies
/// keys (and values, when the variant has them).
pub fn multi_head_forward(
    x_q: &Tensor,
    x_kv: &Tensor,
    params: &AttentionParams,
    config: &AttentionConfig,
) -> Result<(Tensor, MultiHeadSaved)> {
    check_inputs(x_q, x_kv, params, config)?;
    let hd = config.head_dim;
    let q_full = matmul(x_q, &params.w_q.value)?;
    let k_full = matmul(x_kv, &params.w_k.value)?;
    let v_full = match &params.w_v {
        Some(w_v) => Some(matmul(x_kv, &w_v.value)?),
        None => None,
    };
    let normalize = config.normalize_rows == RowNormalization::ExplicitL2;
    let mut heads = Vec::with_capacity(config.num_heads);
    let mut concat = Tensor::zeros(vec![x_q.rows(), config.model_dim()]);
    for h in 0..config.num_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let q_h = q_full.slice_cols(lo, hi);
        let k_h = k_full.slice_cols(lo, hi);
        let (y_h, head) = match config.variant {
            AttentionVariant::Standard => {
                let v_h = v_full.as_ref().unwrap().slice_cols(lo, hi);
                let (q_in, k_in, raw_q, raw_k) = if normalize {
                    (
                        l2_normalize_rows(&q_h)?,
                        l2_normalize_rows(&k_h)?,
                        Some(q_h),
                        Some(k_h),
                    )
                } else {
                    (q_h, k_h, None, None)
                };
                let (y, saved) = standard_sdpa_fwd(
                    &q_in,
                    &k_in,
                    &v_h,
                    config.standard_scale(),
                    config.causal,
                )?;
                (y, HeadSaved::Standard { raw_q, raw_k, saved })
            }
            AttentionVariant::Projection => {
                let (y, saved) =
                    projection_sdpa_fwd(&q_h, &k_h, config.sigma2, config.causal, normalize)?;
                (y, HeadSaved::Projection { saved })
            }
        };
        concat.set_cols(lo, &y_h);
        heads.push(head);
    }
    let y = matmul(&concat, &params.w_out.value)?;
    let saved = MultiHeadSaved {
        config: config.clone(),
        x_q: x_q.clone(),
        x_kv: x_kv.clone(),
        heads,
        concat,
    };
    Ok((y, saved))
}

/// Forward pass that only reports the output and per-head traces.
pub fn multi_head_attention(
    x_q: &Tensor,
    x_kv: &Tensor,
    params: &AttentionParams,
    config: &AttentionConfig,
) -> Result<(Tensor, Vec<AttentionTrace>)> {
    let (y, saved) = multi_head_forward(x_q, x_kv, params, config)?;
    let traces = saved.head_traces()?;
    Ok((y, traces))
}

/// Backward pass: accumulates weight gradients into `params` and returns
/// `(dx_q, dx_kv)`.
pub fn multi_head_backward(
    upstream: &Tensor,
    saved: &MultiHeadSaved,
    params: &mut AttentionParams,
) -> Result<(Tensor, Tensor)> {
    let config = &saved.config;
    let inner = config.model_dim();
    if upstream.shape() != [saved.x_q.rows(), params.w_out.value.cols()] {
        return Err(Error::ShapeMismatch {
            op: "multi_head_backward",
            left: upstream.shape().to_vec(),
            right: vec![saved.x_q.rows(), params.w_out.value.cols()],
        });
    }
    params
        .w_out
        .accumulate(&matmul_transpose_a(&saved.concat, upstream)?);
    let dconcat = matmul_transpose_b(upstream, &params.w_out.value)?;

    let hd = config.head_dim;
    let mut dq_full = Tensor::zeros(vec![saved.x_q.rows(), inner]);
    let mut dk_full = Tensor::zeros(vec![saved.x_kv.rows(), inner]);
    let mut dv_full = Tensor::zeros(vec![saved.x_kv.rows(), inner]);
    for (h, head) in saved.heads.iter().enumerate() {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let dy_h = dconcat.slice_cols(lo, hi);
        match head {
            HeadSaved::Standard { raw_q, raw_k, saved } => {
                let (dq_in, dk_in, dv_h) = standard_sdpa_backward(&dy_h, saved)?;
                let (dq_h, dk_h) = match (raw_q, raw_k) {
                    (Some(rq), Some(rk)) => (
                        l2_normalize_rows_backward(&dq_in, rq)?,
                        l2_normalize_rows_backward(&dk_in, rk)?,
                    ),
                    _ => (dq_in, dk_in),
                };
                dq_full.set_cols(lo, &dq_h);
                dk_full.set_cols(lo, &dk_h);
                dv_full.set_cols(lo, &dv_h);
            }
            HeadSaved::Projection { saved } => {
                let grads = projection_sdpa_backward(&dy_h, saved)?;
                dq_full.set_cols(lo, &grads.dq);
                dk_full.set_cols(lo, &grads.dk);
            }
        }
    }
    params
        .w_q
        .accumulate(&matmul_transpose_a(&saved.x_q, &dq_full)?);
    params
        .w_k
        .accumulate(&matmul_transpose_a(&saved.x_kv, &dk_full)?);
    let dx_q = matmul_transpose_b(&dq_full, &params.w_q.value)?;
    let mut dx_kv = matmul_transpose_b(&dk_full, &params.w_k.value)?;
    if let Some(w_v) = params.w_v.as_mut() {
        w_v.accumulate(&matmul_transpose_a(&saved.x_kv, &dv_full)?);
        dx_kv.add_assign(&matmul_transpose_b(&dv_full, &w_v.value)?);
    }
    Ok((dx_q, dx_kv))
}
