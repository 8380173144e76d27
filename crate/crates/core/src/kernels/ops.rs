//! Forward kernels over [`Tensor`]s.
//!
//! Reductions always run left to right in index order. Rows may be spread
//! over threads, but no reduction is ever split, so results are
//! bit-identical for any thread count.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Work (multiply-adds) above which matmul rows are spread across threads.
const PAR_THRESHOLD: usize = 1 << 18;

fn out_shape(a: &Tensor<impl Scalar>, n: usize) -> Vec<usize> {
    let mut s = a.shape().to_vec();
    *s.last_mut().unwrap() = n;
    s
}

/// `a[.., k] x b[k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.rank() != 2 || a.cols() != b.shape()[0] {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    let bd = b.data();
    let row_kernel = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a.data()[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &bd[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m > 1 && m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    Ok(Tensor::from_parts(out_shape(a, n), out))
}

/// `a[.., k] x b[n, k]^T`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![T::zero(); m * n];
    let row_kernel = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a.data()[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, b.row(j));
        }
    };
    if m > 1 && m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    Ok(Tensor::from_parts(out_shape(a, n), out))
}

/// `a[m, k]^T x b[m, n]`, accumulated over `m` in order.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![k, n], out))
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Adds `bias[n]` to every row of `x[.., n]`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if bias.numel() != x.cols() {
        return Err(Error::Dimension {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    let n = x.cols();
    for row in out.data_mut().chunks_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// In-place softmax of one slice with max subtraction.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let n = x.cols();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Log-softmax over the last axis.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let n = x.cols();
    for row in out.data_mut().chunks_mut(n) {
        log_softmax_in_place(row);
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Mean and reciprocal standard deviation of one slice.
#[inline]
pub(crate) fn norm_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let mut var = T::zero();
    for &v in row {
        let c = v - mean;
        var += c * c;
    }
    var /= n;
    (mean, T::one() / (var + eps).sqrt())
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let (mean, rstd) = norm_stats(row, eps);
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (*v - mean) * rstd * g + b;
        }
    }
    Ok(out)
}

/// Sinusoidal position encodings for positions `offset..offset + len`.
pub fn positional_encoding<T: Scalar>(len: usize, d: usize, offset: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in offset..offset + len {
        data.extend(position_row::<T>(pos, d));
    }
    Tensor::from_parts(vec![len, d], data)
}

pub fn position_row<T: Scalar>(pos: usize, d: usize) -> impl Iterator<Item = T> {
    let half = d / 2;
    (0..d).map(move |i| {
        let pair = if i < half { i } else { i - half };
        let rate = 1.0 / 10000f64.powf(pair as f64 / half.max(1) as f64);
        let angle = pos as f64 * rate;
        T::lit(if i < half { angle.sin() } else { angle.cos() })
    })
}
