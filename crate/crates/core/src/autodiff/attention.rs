use super::ops::gemm_strided;
use super::{Tensor, TensorError};

/// Multi-head scaled dot-product attention.
///
/// `q`, `k`, `v` are `[seq, width]` with heads laid out as contiguous column
/// blocks of `width / heads`. With `causal`, position `i` only sees `j <= i`.
/// Returns `[seq, width]`.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<Tensor, TensorError> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(TensorError::Shape {
            op: "attention",
            detail: format!(
                "q/k/v must share a [seq, width] shape, got {:?}, {:?}, {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        });
    }
    let (s, d) = (q.shape()[0], q.shape()[1]);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Shape {
            op: "attention",
            detail: format!("width {d} not divisible by {heads} heads"),
        });
    }
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    let mut probs = vec![0.0; heads * s * s];
    let mut out = vec![0.0; s * d];
    for h in 0..heads {
        let c = h * hd;
        let p = &mut probs[h * s * s..(h + 1) * s * s];
        gemm_strided(s, hd, s, (&qd[c..], d, 1), (&kd[c..], 1, d), (&mut *p, s, 1), 0.0);
        for (i, row) in p.chunks_mut(s).enumerate() {
            let visible = if causal { i + 1 } else { s };
            let max = row[..visible].iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
            let mut z = 0.0;
            for x in &mut row[..visible] {
                *x = (*x * scale - max).exp();
                z += *x;
            }
            row[..visible].iter_mut().for_each(|x| *x /= z);
            row[visible..].iter_mut().for_each(|x| *x = 0.0);
        }
        gemm_strided(s, s, hd, (&*p, s, 1), (&vd[c..], d, 1), (&mut out[c..], d, 1), 0.0);
    }

    Ok(Tensor::from_op(
        vec![s, d],
        out,
        "attention",
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g, _, parents| {
            let (qd, kd, vd) = (parents[0].data(), parents[1].data(), parents[2].data());
            let need_q = parents[0].tracks_grad();
            let need_k = parents[1].tracks_grad();
            let need_v = parents[2].tracks_grad();
            let mut gq = vec![0.0; s * d];
            let mut gk = vec![0.0; s * d];
            let mut gv = vec![0.0; s * d];
            let mut dp = vec![0.0; s * s];
            for h in 0..heads {
                let c = h * hd;
                let p = &probs[h * s * s..(h + 1) * s * s];
                if need_v {
                    gemm_strided(s, s, hd, (p, 1, s), (&g[c..], d, 1), (&mut gv[c..], d, 1), 0.0);
                }
                if !(need_q || need_k) {
                    continue;
                }
                gemm_strided(s, hd, s, (&g[c..], d, 1), (&vd[c..], 1, d), (&mut dp, s, 1), 0.0);
                for (dr, pr) in dp.chunks_mut(s).zip(p.chunks(s)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (x, pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                if need_q {
                    gemm_strided(s, s, hd, (&dp, s, 1), (&kd[c..], d, 1), (&mut gq[c..], d, 1), 0.0);
                }
                if need_k {
                    gemm_strided(s, s, hd, (&dp, 1, s), (&qd[c..], d, 1), (&mut gk[c..], d, 1), 0.0);
                }
            }
            vec![need_q.then_some(gq), need_k.then_some(gk), need_v.then_some(gv)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composes attention from the elementwise suite, head by head.
    fn reference(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> Tensor {
        let (s, d) = (q.shape()[0], q.shape()[1]);
        let hd = d / heads;
        let mut mask = vec![0.0; s * s];
        if causal {
            for i in 0..s {
                for j in i + 1..s {
                    mask[i * s + j] = -1e30;
                }
            }
        }
        let mask = Tensor::new(mask, &[s, s]).unwrap();
        let split = |t: &Tensor| t.reshape(&[s, heads, hd]).unwrap().permute(&[1, 0, 2]).unwrap();
        let (qh, kh, vh) = (split(q), split(k), split(v));
        let scores = qh
            .matmul(&kh.transpose(1, 2).unwrap())
            .unwrap()
            .scale(1.0 / (hd as f64).sqrt())
            .add(&mask)
            .unwrap();
        let ctx = scores.softmax().unwrap().matmul(&vh).unwrap();
        ctx.permute(&[1, 0, 2]).unwrap().reshape(&[s, d]).unwrap()
    }

    fn seq(n: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..n).map(f).collect()
    }

    #[test]
    fn fused_matches_composed_ops() {
        let (s, d) = (5, 8);
        let q = Tensor::new(seq(s * d, |i| ((i * 7 % 11) as f64 - 5.0) * 0.1), &[s, d]).unwrap();
        let k = Tensor::new(seq(s * d, |i| ((i * 5 % 13) as f64 - 6.0) * 0.1), &[s, d]).unwrap();
        let v = Tensor::new(seq(s * d, |i| ((i * 3 % 7) as f64 - 3.0) * 0.2), &[s, d]).unwrap();
        for causal in [false, true] {
            let a = attention(&q, &k, &v, 2, causal).unwrap();
            let b = reference(&q, &k, &v, 2, causal);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn causal_first_row_copies_first_value() {
        let q = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let v = Tensor::new(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let out = attention(&q, &q, &v, 1, true).unwrap();
        assert_eq!(&out.data()[..2], &[5.0, 6.0]);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let q = Tensor::zeros(&[3, 6]);
        assert!(attention(&q, &q, &q, 4, false).is_err());
    }
}
