use super::ops::{matmul, softmax_in_place};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Which keys a query may see.
///
/// Keys at index `>= key_len` are padding. With `causal`, query `i` sees keys
/// `j <= i + (lk - lq)`, so a single trailing query attends to the whole cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub causal: bool,
    pub key_len: usize,
}

impl AttnMask {
    pub fn full(key_len: usize) -> Self {
        Self {
            causal: false,
            key_len,
        }
    }

    pub fn causal(key_len: usize) -> Self {
        Self {
            causal: true,
            key_len,
        }
    }

    #[inline]
    pub(crate) fn visible(&self, i: usize, j: usize, lq: usize, lk: usize) -> bool {
        j < self.key_len && (!self.causal || j + lq <= i + lk)
    }
}

/// Scaled dot-product attention for one sequence over raw row-major slices.
///
/// `q` is `lq x d`, `k`/`v` are `lk x d`. Writes `lq x d` into `out` and the
/// per-head attention weights (`heads x lq x lk`) into `probs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    mask: AttnMask,
    out: &mut [T],
    probs: &mut [T],
) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..lq {
            let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let qi = &q[i * d + cols.start..i * d + cols.end];
            let mut any = false;
            for (j, pj) in p.iter_mut().enumerate() {
                if mask.visible(i, j, lq, lk) {
                    let kj = &k[j * d + cols.start..j * d + cols.end];
                    *pj = super::ops::dot(qi, kj) * scale;
                    any = true;
                } else {
                    *pj = T::neg_infinity();
                }
            }
            let o = &mut out[i * d + cols.start..i * d + cols.end];
            o.iter_mut().for_each(|x| *x = T::zero());
            if !any {
                p.iter_mut().for_each(|x| *x = T::zero());
                continue;
            }
            softmax_in_place(p);
            for (j, &pj) in p.iter().enumerate() {
                if pj == T::zero() {
                    continue;
                }
                let vj = &v[j * d + cols.start..j * d + cols.end];
                for (oo, &vv) in o.iter_mut().zip(vj) {
                    *oo += pj * vv;
                }
            }
        }
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model dimension {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(d / heads)) V` per head, heads concatenated.
pub fn scaled_dot_product_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: AttnMask,
) -> Result<Tensor<T>> {
    let d = q.cols();
    check_heads(d, heads)?;
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::Dimension {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let (lq, lk) = (q.rows(), k.rows());
    let mut out = vec![T::zero(); lq * d];
    let mut probs = vec![T::zero(); heads * lq * lk];
    attend(
        q.data(),
        k.data(),
        v.data(),
        lq,
        lk,
        d,
        heads,
        mask,
        &mut out,
        &mut probs,
    );
    Ok(Tensor::from_parts(vec![lq, d], out))
}

/// The four projection matrices of one attention block, each `d x d`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProjections<'a, T: Scalar> {
    pub wq: &'a Tensor<T>,
    pub wk: &'a Tensor<T>,
    pub wv: &'a Tensor<T>,
    pub wo: &'a Tensor<T>,
}

/// Multi-head attention of `query_in` over `memory_in`, including the input and
/// output projections.
pub fn multi_head_attention<T: Scalar>(
    query_in: &Tensor<T>,
    memory_in: &Tensor<T>,
    w: AttentionProjections<'_, T>,
    heads: usize,
    mask: AttnMask,
) -> Result<Tensor<T>> {
    check_heads(query_in.cols(), heads)?;
    let q = matmul(query_in, w.wq)?;
    let k = matmul(memory_in, w.wk)?;
    let v = matmul(memory_in, w.wv)?;
    let ctx = scaled_dot_product_attention(&q, &k, &v, heads, mask)?;
    matmul(&ctx, w.wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_position_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[1, 4]);
        let (wq, wk, wv, wo) = (
            random(&mut rng, &[4, 4]),
            random(&mut rng, &[4, 4]),
            random(&mut rng, &[4, 4]),
            random(&mut rng, &[4, 4]),
        );
        let w = AttentionProjections {
            wq: &wq,
            wk: &wk,
            wv: &wv,
            wo: &wo,
        };
        let y = multi_head_attention(&x, &x, w, 2, AttnMask::full(1)).unwrap();
        let want = matmul(&matmul(&x, &wv).unwrap(), &wo).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn causal_position_zero_ignores_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(&mut rng, &[3, 4]);
        let k = random(&mut rng, &[3, 4]);
        let v = random(&mut rng, &[3, 4]);
        let a = scaled_dot_product_attention(&q, &k, &v, 2, AttnMask::causal(3)).unwrap();
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 4..12 {
            k2.data_mut()[j] += 3.0;
            v2.data_mut()[j] -= 2.0;
        }
        let b = scaled_dot_product_attention(&q, &k2, &v2, 2, AttnMask::causal(3)).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn matches_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&mut rng, &[3, 4]);
        let k = random(&mut rng, &[3, 4]);
        let v = random(&mut rng, &[3, 4]);
        let got = scaled_dot_product_attention(&q, &k, &v, 1, AttnMask::full(3)).unwrap();
        // softmax(Q K^T / sqrt(d)) V evaluated at f64
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| {
                    (0..4)
                        .map(|c| q.row(i)[c] as f64 * k.row(j)[c] as f64)
                        .sum::<f64>()
                        / 2.0
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for c in 0..4 {
                let want: f64 = (0..3)
                    .map(|j| (scores[j] - m).exp() / z * v.row(j)[c] as f64)
                    .sum();
                assert!((got.row(i)[c] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let x = Tensor::<f32>::zeros(&[2, 6]);
        let err = scaled_dot_product_attention(&x, &x, &x, 4, AttnMask::full(2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
