//! Single-head attention kernels: forward, saved state, and exact
//! vector-Jacobian backward passes.

use crate::attention::AttentionTrace;
use crate::error::{Error, Result};
use crate::numerics::{
    l2_normalize_rows, l2_normalize_rows_backward, matmul, matmul_transpose_a,
    matmul_transpose_b, softmax_rows, softmax_rows_backward, Tensor,
};

fn check_causal_square(t_q: usize, t_k: usize) -> Result<()> {
    if t_q != t_k {
        return Err(Error::ShapeMismatch {
            op: "causal mask",
            left: vec![t_q],
            right: vec![t_k],
        });
    }
    Ok(())
}

/// Saved forward state of the standard kernel.
#[derive(Debug, Clone)]
pub struct StandardSaved {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub scale: f64,
    pub causal: bool,
    pub weights: Tensor,
}

/// `y = softmax(scale * q k^T + mask) v`; masked entries get exact zero
/// weight. Returns the output plus the saved state backward needs.
pub fn standard_sdpa_fwd(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale: f64,
    causal: bool,
) -> Result<(Tensor, StandardSaved)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            op: "standard_sdpa q/k",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "standard_sdpa k/v",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    if scale <= 0.0 {
        return Err(Error::Config(format!("attention scale must be > 0, got {scale}")));
    }
    if causal {
        check_causal_square(q.rows(), k.rows())?;
    }
    let mut scores = matmul_transpose_b(q, k)?.scale(scale);
    if causal {
        let n = scores.cols();
        for i in 0..scores.rows() {
            for j in (i + 1)..n {
                scores.data_mut()[i * n + j] = f64::NEG_INFINITY;
            }
        }
    }
    let weights = softmax_rows(&scores)?;
    let y = matmul(&weights, v)?;
    let saved = StandardSaved {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        scale,
        causal,
        weights,
    };
    Ok((y, saved))
}

/// Standard kernel returning its trace. Distances are absent here: they
/// are only meaningful for normalized rows, which the multi-head wrapper
/// handles.
pub fn standard_sdpa(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale: f64,
    causal: bool,
) -> Result<(Tensor, AttentionTrace)> {
    let (y, saved) = standard_sdpa_fwd(q, k, v, scale, causal)?;
    Ok((
        y,
        AttentionTrace {
            distances: None,
            weights: saved.weights,
        },
    ))
}

/// Gradients of the standard kernel: `(dq, dk, dv)`.
pub fn standard_sdpa_backward(
    upstream: &Tensor,
    saved: &StandardSaved,
) -> Result<(Tensor, Tensor, Tensor)> {
    if upstream.shape() != [saved.q.rows(), saved.v.cols()] {
        return Err(Error::ShapeMismatch {
            op: "standard_sdpa_backward",
            left: upstream.shape().to_vec(),
            right: vec![saved.q.rows(), saved.v.cols()],
        });
    }
    let dv = matmul_transpose_a(&saved.weights, upstream)?;
    let dw = matmul_transpose_b(upstream, &saved.v)?;
    let ds = softmax_rows_backward(&dw, &saved.weights)?;
    let dq = matmul(&ds, &saved.k)?.scale(saved.scale);
    let dk = matmul_transpose_a(&ds, &saved.q)?.scale(saved.scale);
    Ok((dq, dk, dv))
}

/// Pairwise squared Euclidean distances via the
/// `|q|^2 + |k|^2 - 2 q k^T` expansion, clamped at zero against round-off.
pub fn pairwise_sq_distance(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            op: "pairwise_sq_distance",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let (tq, tk) = (q.rows(), k.rows());
    let q_sq: Vec<f64> = (0..tq).map(|i| q.row(i).iter().map(|v| v * v).sum()).collect();
    let k_sq: Vec<f64> = (0..tk).map(|j| k.row(j).iter().map(|v| v * v).sum()).collect();
    let mut d = matmul_transpose_b(q, k)?;
    for i in 0..tq {
        let row = d.row_mut(i);
        for j in 0..tk {
            row[j] = (q_sq[i] + k_sq[j] - 2.0 * row[j]).max(0.0);
        }
    }
    Ok(d)
}

/// Gradients of the distance matrix: `(dq, dk)` where
/// `dq_i = 2 sum_j dD_ij (q_i - k_j)` and symmetrically for `dk`.
pub fn pairwise_sq_distance_backward(
    grad: &Tensor,
    q: &Tensor,
    k: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if grad.shape() != [q.rows(), k.rows()] {
        return Err(Error::ShapeMismatch {
            op: "pairwise_sq_distance_backward",
            left: grad.shape().to_vec(),
            right: vec![q.rows(), k.rows()],
        });
    }
    let (tq, tk) = (q.rows(), k.rows());
    let mut row_sum = vec![0.0; tq];
    let mut col_sum = vec![0.0; tk];
    for i in 0..tq {
        for j in 0..tk {
            let g = grad.at2(i, j);
            row_sum[i] += g;
            col_sum[j] += g;
        }
    }
    let gk = matmul(grad, k)?; // [tq x d]
    let gq = matmul_transpose_a(grad, q)?; // [tk x d]
    let d = q.cols();
    let mut dq = Tensor::zeros(vec![tq, d]);
    for i in 0..tq {
        let qr = q.row(i);
        let gr = gk.row(i);
        let o = dq.row_mut(i);
        for m in 0..d {
            o[m] = 2.0 * (row_sum[i] * qr[m] - gr[m]);
        }
    }
    let mut dk = Tensor::zeros(vec![tk, d]);
    for j in 0..tk {
        let kr = k.row(j);
        let gr = gq.row(j);
        let o = dk.row_mut(j);
        for m in 0..d {
            o[m] = 2.0 * (col_sum[j] * kr[m] - gr[m]);
        }
    }
    Ok((dq, dk))
}

/// Row-normalized Gaussian weights `z_ij = exp(-d_ij / 2 sigma^2) / C_i`.
///
/// Computed in log space with per-row minimum-distance subtraction, so the
/// row maximum exponent is 0 even when `sigma^2` is tiny. Masked entries are
/// excluded from the normalizer and set to exact zero.
pub fn gaussian_weights(d: &Tensor, sigma2: f64, causal: bool) -> Result<Tensor> {
    if d.rank() != 2 {
        return Err(Error::InvalidShape {
            what: "gaussian_weights",
            detail: format!("expected rank-2 distances, got {:?}", d.shape()),
        });
    }
    if sigma2 <= 0.0 {
        return Err(Error::Config(format!("sigma2 must be > 0, got {sigma2}")));
    }
    let (tq, tk) = (d.rows(), d.cols());
    if causal {
        check_causal_square(tq, tk)?;
    }
    let inv = 1.0 / (2.0 * sigma2);
    let mut out = Tensor::zeros(vec![tq, tk]);
    for i in 0..tq {
        let limit = if causal { i + 1 } else { tk };
        let row = d.row(i);
        let min_d = row[..limit].iter().cloned().fold(f64::INFINITY, f64::min);
        if !min_d.is_finite() {
            return Err(Error::DegenerateRow {
                row: i,
                detail: "no unmasked entries".to_string(),
            });
        }
        let o = out.row_mut(i);
        let mut sum = 0.0;
        for j in 0..limit {
            let w = (-(row[j] - min_d) * inv).exp();
            o[j] = w;
            sum += w;
        }
        for w in o[..limit].iter_mut() {
            *w /= sum;
        }
    }
    Ok(out)
}

/// Gradients of `gaussian_weights`: `(dD, dsigma2)`.
///
/// The weights are a masked softmax of `-D / 2 sigma^2`, so the softmax
/// backward applies; the `dsigma2` term supports a learnable variance and is
/// simply discarded by callers that keep it fixed.
pub fn gaussian_weights_backward(
    grad: &Tensor,
    weights: &Tensor,
    d: &Tensor,
    sigma2: f64,
) -> Result<(Tensor, f64)> {
    let de = softmax_rows_backward(grad, weights)?;
    let inv = 1.0 / (2.0 * sigma2);
    let mut dd = Tensor::zeros(d.shape().to_vec());
    let mut dsigma2 = 0.0;
    for idx in 0..de.numel() {
        let g = de.data()[idx];
        dd.data_mut()[idx] = -g * inv;
        dsigma2 += g * d.data()[idx] / (2.0 * sigma2 * sigma2);
    }
    Ok((dd, dsigma2))
}

/// Saved forward state of the projection kernel.
#[derive(Debug, Clone)]
pub struct ProjectionSaved {
    /// Inputs before normalization; `None` when `normalize` was off.
    pub raw_q: Option<Tensor>,
    pub raw_k: Option<Tensor>,
    /// Rows actually used for distances and as values.
    pub q: Tensor,
    pub k: Tensor,
    pub trace: AttentionTrace,
    pub sigma2: f64,
    pub causal: bool,
}

/// Projection-form attention: `y_i = sum_j z_ij k_j` with Gaussian-distance
/// weights `z`. Key rows double as value rows. Optionally L2-normalizes
/// query and key rows first.
pub fn projection_sdpa_fwd(
    q: &Tensor,
    k: &Tensor,
    sigma2: f64,
    causal: bool,
    normalize: bool,
) -> Result<(Tensor, ProjectionSaved)> {
    let (qn, kn, raw_q, raw_k) = if normalize {
        (
            l2_normalize_rows(q)?,
            l2_normalize_rows(k)?,
            Some(q.clone()),
            Some(k.clone()),
        )
    } else {
        (q.clone(), k.clone(), None, None)
    };
    let distances = pairwise_sq_distance(&qn, &kn)?;
    let weights = gaussian_weights(&distances, sigma2, causal)?;
    let y = matmul(&weights, &kn)?;
    let saved = ProjectionSaved {
        raw_q,
        raw_k,
        q: qn,
        k: kn,
        trace: AttentionTrace {
            distances: Some(distances),
            weights,
        },
        sigma2,
        causal,
    };
    Ok((y, saved))
}

/// Projection kernel returning its trace (distances and weights).
pub fn projection_sdpa(
    q: &Tensor,
    k: &Tensor,
    sigma2: f64,
    causal: bool,
    normalize: bool,
) -> Result<(Tensor, AttentionTrace)> {
    let (y, saved) = projection_sdpa_fwd(q, k, sigma2, causal, normalize)?;
    Ok((y, saved.trace))
}

/// Gradients of the projection kernel.
#[derive(Debug, Clone)]
pub struct ProjectionGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    /// Gradient for a learnable variance; unused when sigma2 is fixed.
    pub dsigma2: f64,
}

pub fn projection_sdpa_backward(
    upstream: &Tensor,
    saved: &ProjectionSaved,
) -> Result<ProjectionGrads> {
    let distances = saved
        .trace
        .distances
        .as_ref()
        .ok_or_else(|| Error::Numeric("projection saved state missing distances".into()))?;
    let weights = &saved.trace.weights;
    if upstream.shape() != [saved.q.rows(), saved.k.cols()] {
        return Err(Error::ShapeMismatch {
            op: "projection_sdpa_backward",
            left: upstream.shape().to_vec(),
            right: vec![saved.q.rows(), saved.k.cols()],
        });
    }
    // value path: y = z k
    let dk_value = matmul_transpose_a(weights, upstream)?;
    let dz = matmul_transpose_b(upstream, &saved.k)?;
    // weight path: z = gaussian(d), d = pairwise(q, k)
    let (dd, dsigma2) = gaussian_weights_backward(&dz, weights, distances, saved.sigma2)?;
    let (dqn, dkn_dist) = pairwise_sq_distance_backward(&dd, &saved.q, &saved.k)?;
    let dkn = dk_value.add(&dkn_dist)?;
    let (dq, dk) = match (&saved.raw_q, &saved.raw_k) {
        (Some(rq), Some(rk)) => (
            l2_normalize_rows_backward(&dqn, rq)?,
            l2_normalize_rows_backward(&dkn, rk)?,
        ),
        _ => (dqn, dkn),
    };
    Ok(ProjectionGrads { dq, dk, dsigma2 })
}

/// Max-abs difference between the two kernels on L2-normalized inputs with
/// value = key. At `sigma2 = 1`, `scale = 1` this is the equivalence
/// certificate; other settings probe how the forms drift apart.
pub fn equivalence_residual(q: &Tensor, k: &Tensor, sigma2: f64, scale: f64) -> Result<f64> {
    let qn = l2_normalize_rows(q)?;
    let kn = l2_normalize_rows(k)?;
    let (y_std, _) = standard_sdpa(&qn, &kn, &kn, scale, false)?;
    let (y_proj, _) = projection_sdpa(q, k, sigma2, false, true)?;
    Ok(y_std.max_abs_diff(&y_proj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, max_rel_error, RngState};

    fn rand2(r: usize, c: usize, rng: &mut RngState) -> Tensor {
        rng.normal_tensor(vec![r, c])
    }

    #[test]
    fn standard_single_key_returns_value() {
        let mut rng = RngState::new(1);
        let q = rand2(5, 3, &mut rng);
        let k = rand2(1, 3, &mut rng);
        let v = rand2(1, 4, &mut rng);
        let (y, trace) = standard_sdpa(&q, &k, &v, 1.0, false).unwrap();
        for i in 0..5 {
            assert_eq!(y.row(i), v.row(0));
            assert_eq!(trace.weights.at2(i, 0), 1.0);
        }
    }

    #[test]
    fn standard_orthonormal_self_weight_closed_form() {
        // q = k = I4: scores are one-hot rows, softmax gives e/(e+3) on self.
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let (_, trace) = standard_sdpa(&eye, &eye, &eye, 1.0, false).unwrap();
        let expect = std::f64::consts::E / (std::f64::consts::E + 3.0);
        for i in 0..4 {
            assert!((trace.weights.at2(i, i) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_first_row_attends_only_to_itself() {
        let mut rng = RngState::new(2);
        let q = rand2(2, 3, &mut rng);
        let k = rand2(2, 3, &mut rng);
        let v = rand2(2, 3, &mut rng);
        let (_, trace) = standard_sdpa(&q, &k, &v, 1.0, true).unwrap();
        assert_eq!(trace.weights.at2(0, 0), 1.0);
        assert_eq!(trace.weights.at2(0, 1), 0.0);
    }

    #[test]
    fn causal_requires_square() {
        let q = Tensor::zeros(vec![3, 2]);
        let k = Tensor::zeros(vec![4, 2]);
        let v = Tensor::zeros(vec![4, 2]);
        assert!(standard_sdpa(&q, &k, &v, 1.0, true).is_err());
        let d = Tensor::zeros(vec![3, 4]);
        assert!(gaussian_weights(&d, 1.0, true).is_err());
    }

    #[test]
    fn causal_output_ignores_future_keys() {
        let mut rng = RngState::new(3);
        let q = rand2(5, 4, &mut rng);
        let k = rand2(5, 4, &mut rng);
        let v = rand2(5, 4, &mut rng);
        let (y, _) = standard_sdpa(&q, &k, &v, 0.7, true).unwrap();
        // rewrite rows > 2 of k and v; rows 0..=2 of y must be bit-identical
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 3..5 {
            for m in 0..4 {
                k2.row_mut(j)[m] = 99.0 + j as f64;
                v2.row_mut(j)[m] = -7.0 * m as f64;
            }
        }
        let (y2, trace2) = standard_sdpa(&q, &k2, &v2, 0.7, true).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), y2.row(i));
        }
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_eq!(trace2.weights.at2(i, j), 0.0);
            }
        }
    }

    fn pairwise_oracle(q: &Tensor, k: &Tensor) -> Tensor {
        let mut d = Tensor::zeros(vec![q.rows(), k.rows()]);
        for i in 0..q.rows() {
            for j in 0..k.rows() {
                let mut s = 0.0;
                for m in 0..q.cols() {
                    let diff = q.at2(i, m) - k.at2(j, m);
                    s += diff * diff;
                }
                d.row_mut(i)[j] = s;
            }
        }
        d
    }

    #[test]
    fn pairwise_distance_examples() {
        let q = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let d = pairwise_sq_distance(&q, &q).unwrap();
        assert_eq!(d.data(), &[0.0]);

        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let d = pairwise_sq_distance(&q, &k).unwrap();
        assert_eq!(d.data(), &[0.0, 2.0]);
    }

    #[test]
    fn pairwise_distance_matches_scalar_oracle_and_stays_nonnegative() {
        let mut rng = RngState::new(4);
        let q = rand2(7, 5, &mut rng);
        let k = rand2(9, 5, &mut rng);
        let d = pairwise_sq_distance(&q, &k).unwrap();
        assert!(d.max_abs_diff(&pairwise_oracle(&q, &k)) < 1e-10);
        assert!(d.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn gaussian_weights_closed_form() {
        let d = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let z = gaussian_weights(&d, 1.0, false).unwrap();
        let e1 = (-1.0f64).exp();
        assert!((z.data()[0] - 1.0 / (1.0 + e1)).abs() < 1e-15);
        assert!((z.data()[1] - e1 / (1.0 + e1)).abs() < 1e-15);
        assert!((z.data()[0] - 0.7311).abs() < 1e-4);
        assert!((z.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn gaussian_weights_large_sigma_is_uniform() {
        let mut rng = RngState::new(5);
        let d = pairwise_sq_distance(&rand2(6, 4, &mut rng), &rand2(8, 4, &mut rng)).unwrap();
        let z = gaussian_weights(&d, 1e8, false).unwrap();
        for idx in 0..z.numel() {
            assert!((z.data()[idx] - 1.0 / 8.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_weights_small_sigma_concentrates_on_argmin() {
        // unique row minimum with gap >= 0.01
        let d = Tensor::from_rows(&[vec![0.50, 0.07, 0.09, 1.3]]).unwrap();
        let z = gaussian_weights(&d, 1e-6, false).unwrap();
        assert!(z.data()[1] >= 1.0 - 1e-9);
    }

    #[test]
    fn gaussian_weights_survive_tiny_sigma_without_underflow() {
        // sigma2 = 1e-4 drives raw exponents to -1e4 magnitudes; the row-min
        // shift must keep each row finite and stochastic.
        let mut rng = RngState::new(6);
        let q = l2_normalize_rows(&rand2(5, 8, &mut rng)).unwrap();
        let k = l2_normalize_rows(&rand2(5, 8, &mut rng)).unwrap();
        let d = pairwise_sq_distance(&q, &k).unwrap();
        let z = gaussian_weights(&d, 1e-4, false).unwrap();
        assert!(z.is_finite());
        for i in 0..5 {
            let s: f64 = z.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_single_key_returns_key() {
        let mut rng = RngState::new(7);
        let q = rand2(4, 3, &mut rng);
        let k = rand2(1, 3, &mut rng);
        for sigma2 in [1e-3, 1.0, 50.0] {
            let (y, _) = projection_sdpa(&q, &k, sigma2, false, false).unwrap();
            for i in 0..4 {
                assert_eq!(y.row(i), k.row(0));
            }
        }
    }

    #[test]
    fn projection_identical_keys_split_weight_evenly() {
        let q = Tensor::from_rows(&[vec![0.2, 0.4]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.5, -0.5], vec![1.5, -0.5]]).unwrap();
        let (y, trace) = projection_sdpa(&q, &k, 1.0, false, false).unwrap();
        assert!((trace.weights.data()[0] - 0.5).abs() < 1e-15);
        assert!((trace.weights.data()[1] - 0.5).abs() < 1e-15);
        assert!((y.data()[0] - 1.5).abs() < 1e-15);
        assert!((y.data()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn projection_matches_standard_on_unit_rows() {
        let mut rng = RngState::new(8);
        let q = rand2(6, 5, &mut rng);
        let k = rand2(9, 5, &mut rng);
        let qn = l2_normalize_rows(&q).unwrap();
        let kn = l2_normalize_rows(&k).unwrap();
        let (y_std, _) = standard_sdpa(&qn, &kn, &kn, 1.0, false).unwrap();
        let (y_proj, _) = projection_sdpa(&q, &k, 1.0, false, true).unwrap();
        assert!(y_std.max_abs_diff(&y_proj) < 1e-9);
    }

    #[test]
    fn projection_trace_invariants() {
        let mut rng = RngState::new(9);
        let q = rand2(6, 4, &mut rng);
        let (_, trace) = projection_sdpa(&q, &q, 0.5, true, true).unwrap();
        let d = trace.distances.as_ref().unwrap();
        for i in 0..6 {
            assert!(d.at2(i, i) < 1e-12); // self-distance
            let s: f64 = trace.weights.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            for j in (i + 1)..6 {
                assert_eq!(trace.weights.at2(i, j), 0.0);
            }
        }
        assert!(d.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn equivalence_residual_certificate_and_negative_control() {
        let mut rng = RngState::new(10);
        for _ in 0..50 {
            let q = rand2(5, 6, &mut rng);
            let k = rand2(7, 6, &mut rng);
            assert!(equivalence_residual(&q, &k, 1.0, 1.0).unwrap() < 1e-9);
        }
        // temperature correspondence scale = 1 / sigma2 on unit rows
        for sigma2 in [0.25, 0.5, 2.0, 4.0] {
            let q = rand2(6, 5, &mut rng);
            let k = rand2(6, 5, &mut rng);
            assert!(equivalence_residual(&q, &k, sigma2, 1.0 / sigma2).unwrap() < 1e-9);
        }
        // mismatched temperature: the forms genuinely differ
        let q = rand2(8, 6, &mut rng);
        let k = rand2(8, 6, &mut rng);
        assert!(equivalence_residual(&q, &k, 0.01, 1.0).unwrap() > 0.1);
    }

    // scalar loss sum(y * r) so FD has a fixed upstream r
    fn loss_with_upstream(y: &Tensor, r: &Tensor) -> f64 {
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn standard_backward_matches_finite_differences() {
        let mut rng = RngState::new(11);
        let q = rand2(4, 3, &mut rng);
        let k = rand2(5, 3, &mut rng);
        let v = rand2(5, 2, &mut rng);
        let r = rand2(4, 2, &mut rng);
        let (_, saved) = standard_sdpa_fwd(&q, &k, &v, 0.8, false).unwrap();
        let (dq, dk, dv) = standard_sdpa_backward(&r, &saved).unwrap();

        let fd_q = finite_difference_grad(
            |t| Ok(loss_with_upstream(&standard_sdpa_fwd(t, &k, &v, 0.8, false)?.0, &r)),
            &q,
            1e-5,
        )
        .unwrap();
        let fd_k = finite_difference_grad(
            |t| Ok(loss_with_upstream(&standard_sdpa_fwd(&q, t, &v, 0.8, false)?.0, &r)),
            &k,
            1e-5,
        )
        .unwrap();
        let fd_v = finite_difference_grad(
            |t| Ok(loss_with_upstream(&standard_sdpa_fwd(&q, &k, t, 0.8, false)?.0, &r)),
            &v,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&dq, &fd_q) < 1e-4);
        assert!(max_rel_error(&dk, &fd_k) < 1e-4);
        assert!(max_rel_error(&dv, &fd_v) < 1e-4);
    }

    #[test]
    fn standard_backward_causal_matches_finite_differences() {
        let mut rng = RngState::new(12);
        let q = rand2(4, 3, &mut rng);
        let k = rand2(4, 3, &mut rng);
        let v = rand2(4, 3, &mut rng);
        let r = rand2(4, 3, &mut rng);
        let (_, saved) = standard_sdpa_fwd(&q, &k, &v, 1.0, true).unwrap();
        let (dq, dk, dv) = standard_sdpa_backward(&r, &saved).unwrap();
        let fd_q = finite_difference_grad(
            |t| Ok(loss_with_upstream(&standard_sdpa_fwd(t, &k, &v, 1.0, true)?.0, &r)),
            &q,
            1e-5,
        )
        .unwrap();
        let fd_k = finite_difference_grad(
            |t| Ok(loss_with_upstream(&standard_sdpa_fwd(&q, t, &v, 1.0, true)?.0, &r)),
            &k,
            1e-5,
        )
        .unwrap();
        let fd_v = finite_difference_grad(
            |t| Ok(loss_with_upstream(&standard_sdpa_fwd(&q, &k, t, 1.0, true)?.0, &r)),
            &v,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&dq, &fd_q) < 1e-4);
        assert!(max_rel_error(&dk, &fd_k) < 1e-4);
        assert!(max_rel_error(&dv, &fd_v) < 1e-4);
    }

    #[test]
    fn projection_backward_matches_finite_differences() {
        let mut rng = RngState::new(13);
        for (causal, normalize) in [(false, false), (false, true), (true, false), (true, true)] {
            let t = 4;
            let q = rand2(t, 3, &mut rng);
            let k = rand2(t, 3, &mut rng);
            let r = rand2(t, 3, &mut rng);
            let sigma2 = 0.7;
            let (_, saved) = projection_sdpa_fwd(&q, &k, sigma2, causal, normalize).unwrap();
            let grads = projection_sdpa_backward(&r, &saved).unwrap();

            let fd_q = finite_difference_grad(
                |x| Ok(loss_with_upstream(&projection_sdpa_fwd(x, &k, sigma2, causal, normalize)?.0, &r)),
                &q,
                1e-5,
            )
            .unwrap();
            let fd_k = finite_difference_grad(
                |x| Ok(loss_with_upstream(&projection_sdpa_fwd(&q, x, sigma2, causal, normalize)?.0, &r)),
                &k,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_error(&grads.dq, &fd_q) < 1e-4, "causal={causal} normalize={normalize}");
            assert!(max_rel_error(&grads.dk, &fd_k) < 1e-4, "causal={causal} normalize={normalize}");

            // learnable-sigma2 path, finite-differenced in sigma2 itself
            let h = 1e-6;
            let yp = projection_sdpa_fwd(&q, &k, sigma2 + h, causal, normalize).unwrap().0;
            let ym = projection_sdpa_fwd(&q, &k, sigma2 - h, causal, normalize).unwrap().0;
            let fd_sigma2 =
                (loss_with_upstream(&yp, &r) - loss_with_upstream(&ym, &r)) / (2.0 * h);
            let denom = fd_sigma2.abs().max(1e-8);
            assert!(
                (grads.dsigma2 - fd_sigma2).abs() / denom < 1e-4,
                "dsigma2 {} vs fd {}",
                grads.dsigma2,
                fd_sigma2
            );
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = RngState::new(14);
        let q = rand2(3, 4, &mut rng);
        let k = rand2(3, 4, &mut rng);
        let zero = Tensor::zeros(vec![3, 4]);
        let (_, saved) = projection_sdpa_fwd(&q, &k, 1.0, false, true).unwrap();
        let grads = projection_sdpa_backward(&zero, &saved).unwrap();
        assert!(grads.dq.max_abs() == 0.0);
        assert!(grads.dk.max_abs() == 0.0);
        assert_eq!(grads.dsigma2, 0.0);

        let v = rand2(3, 4, &mut rng);
        let (_, saved) = standard_sdpa_fwd(&q, &k, &v, 1.0, false).unwrap();
        let (dq, dk, dv) = standard_sdpa_backward(&zero, &saved).unwrap();
        assert!(dq.max_abs() == 0.0 && dk.max_abs() == 0.0 && dv.max_abs() == 0.0);
    }

    #[test]
    fn gradients_agree_across_forms_under_equivalence_preconditions() {
        // With explicit normalization folded into both pipelines, the two
        // composed maps are the same function of the raw inputs, so their
        // gradients must agree too.
        let mut rng = RngState::new(15);
        let q = rand2(5, 4, &mut rng);
        let k = rand2(6, 4, &mut rng);
        let r = rand2(5, 4, &mut rng);

        let (_, psaved) = projection_sdpa_fwd(&q, &k, 1.0, false, true).unwrap();
        let pg = projection_sdpa_backward(&r, &psaved).unwrap();

        let qn = l2_normalize_rows(&q).unwrap();
        let kn = l2_normalize_rows(&k).unwrap();
        let (_, ssaved) = standard_sdpa_fwd(&qn, &kn, &kn, 1.0, false).unwrap();
        let (dqn, dkn, dvn) = standard_sdpa_backward(&r, &ssaved).unwrap();
        let dq_std = l2_normalize_rows_backward(&dqn, &q).unwrap();
        let dk_std = l2_normalize_rows_backward(&dkn.add(&dvn).unwrap(), &k).unwrap();

        assert!(pg.dq.max_abs_diff(&dq_std) < 1e-6);
        assert!(pg.dk.max_abs_diff(&dk_std) < 1e-6);
    }

    #[test]
    fn projection_output_stays_in_key_hull() {
        let mut rng = RngState::new(16);
        let q = rand2(5, 3, &mut rng);
        let k = rand2(7, 3, &mut rng);
        let (y, _) = projection_sdpa(&q, &k, 0.3, false, false).unwrap();
        for m in 0..3 {
            let lo = (0..7).map(|j| k.at2(j, m)).fold(f64::INFINITY, f64::min);
            let hi = (0..7).map(|j| k.at2(j, m)).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..5 {
                assert!(y.at2(i, m) >= lo - 1e-9 && y.at2(i, m) <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn projection_translation_covariance() {
        let mut rng = RngState::new(17);
        let q = rand2(4, 3, &mut rng);
        let k = rand2(6, 3, &mut rng);
        let c = [0.8, -1.3, 2.0];
        let shift = |t: &Tensor| {
            let mut s = t.clone();
            for i in 0..s.rows() {
                for (m, cm) in c.iter().enumerate() {
                    s.row_mut(i)[m] += cm;
                }
            }
            s
        };
        let (y, _) = projection_sdpa(&q, &k, 0.9, false, false).unwrap();
        let (ys, _) = projection_sdpa(&shift(&q), &shift(&k), 0.9, false, false).unwrap();
        assert!(ys.max_abs_diff(&shift(&y)) < 1e-9);
    }
}
