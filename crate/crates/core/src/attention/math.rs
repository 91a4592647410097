use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};

/// Row-stochastic attention map `softmax(Q Kᵀ / √d)`.
///
/// `q` is `[..., queries, d]` and `k` is `[..., keys, d]` with identical
/// leading dimensions. The softmax subtracts the row maximum before
/// exponentiating. Computation happens in f32 and the result is returned in
/// the input dtype.
pub fn compute_attention(q: &Tensor, k: &Tensor, d: usize) -> Result<Tensor> {
    if d == 0 {
        return Err(Error::validation("attention feature dimension d must be positive"));
    }
    let (q_rank, k_rank) = (q.rank(), k.rank());
    if q_rank < 2 || q_rank != k_rank {
        return Err(Error::Shape(format!(
            "query rank {q_rank} and key rank {k_rank} must match and be >= 2"
        )));
    }
    let qd = q.dim(D::Minus1)?;
    let kd = k.dim(D::Minus1)?;
    if qd != kd {
        return Err(Error::Shape(format!(
            "query feature dim {qd} != key feature dim {kd}"
        )));
    }
    if kd != d {
        return Err(Error::Shape(format!("d = {d} but key feature dim is {kd}")));
    }
    if q.dims()[..q_rank - 2] != k.dims()[..k_rank - 2] {
        return Err(Error::Shape(format!(
            "leading dims differ: {:?} vs {:?}",
            q.dims(),
            k.dims()
        )));
    }
    let in_dtype = q.dtype();
    let q = q.to_dtype(DType::F32)?;
    let k = k.to_dtype(DType::F32)?;
    let scores = (q.contiguous()?.matmul(&k.t()?.contiguous()?)? * (1.0 / (d as f64).sqrt()))?;
    let probs = stable_softmax_last(&scores)?;
    Ok(probs.to_dtype(in_dtype)?)
}

/// Softmax over the last dimension with max subtraction. Differentiable.
pub(crate) fn stable_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    e.broadcast_div(&sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Naive triple loop; independent of the tensor path.
    fn oracle(q: &[f32], k: &[f32], nq: usize, nk: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0f64; nq * nk];
        for i in 0..nq {
            let mut row = vec![0f64; nk];
            for j in 0..nk {
                let mut s = 0f64;
                for c in 0..d {
                    s += q[i * d + c] as f64 * k[j * d + c] as f64;
                }
                row[j] = s / (d as f64).sqrt();
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..nk {
                out[i * nk + j] = (row[j] - m).exp() / z;
            }
        }
        out
    }

    #[test]
    fn zeros_give_uniform_rows() {
        let dev = Device::Cpu;
        let q = Tensor::zeros((3, 4), DType::F32, &dev).unwrap();
        let k = Tensor::zeros((5, 4), DType::F32, &dev).unwrap();
        let p: Vec<Vec<f32>> = compute_attention(&q, &k, 4).unwrap().to_vec2().unwrap();
        for row in p {
            for v in row {
                assert!((v - 0.2).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn matches_naive_oracle_3x2_by_5x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q: Vec<f32> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k: Vec<f32> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dev = Device::Cpu;
        let qt = Tensor::from_slice(&q, (3, 2), &dev).unwrap();
        let kt = Tensor::from_slice(&k, (5, 2), &dev).unwrap();
        let got: Vec<f32> = compute_attention(&qt, &kt, 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let want = oracle(&q, &k, 3, 5, 2);
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5);
        }
    }

    #[test]
    fn large_logits_are_stable() {
        let dev = Device::Cpu;
        let q = Tensor::new(&[[1000f32, -1000.0]], &dev).unwrap();
        let k = Tensor::new(&[[1000f32, 0.0], [0.0, 1000.0]], &dev).unwrap();
        let p: Vec<Vec<f32>> = compute_attention(&q, &k, 2).unwrap().to_vec2().unwrap();
        assert!(p[0].iter().all(|v| v.is_finite()));
        assert!((p[0][0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let dev = Device::Cpu;
        let q = Tensor::zeros((3, 4), DType::F32, &dev).unwrap();
        let k = Tensor::zeros((5, 3), DType::F32, &dev).unwrap();
        assert!(matches!(compute_attention(&q, &k, 4), Err(Error::Shape(_))));
        let k = Tensor::zeros((5, 4), DType::F32, &dev).unwrap();
        assert!(matches!(compute_attention(&q, &k, 0), Err(Error::Validation(_))));
        assert!(matches!(compute_attention(&q, &k, 3), Err(Error::Shape(_))));
    }
}
