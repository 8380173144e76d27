//! INT8 dynamic quantization of linear layers.
//!
//! Weights are quantized offline per output row, activations per input row at
//! call time, products accumulate in `i32`.

mod checkpoint;
mod dot;

pub use checkpoint::{is_linear_weight, QuantEntry, QuantizedParams};
pub use dot::{
    dot_i8, dot_i8_packed, dot_i8_rows, pack_rows, quantize_row, simd_available, PACK_DEPTH, PACK_UNITS,
};

use crate::error::{Error, Result};
use crate::kernels::Tensor;

/// Symmetric per-row INT8 weight matrix, stored as `[out x in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear {
    out_dim: usize,
    in_dim: usize,
    q_weight: Vec<i8>,
    scales: Vec<f32>,
    bias: Option<Vec<f32>>,
    /// Interleaved copy of `q_weight` for the AVX2 kernel; empty without it.
    packed: Vec<i8>,
}

fn packed_copy(q: &[i8], out_dim: usize, in_dim: usize) -> Vec<i8> {
    if simd_available() {
        pack_rows(q, out_dim, in_dim)
    } else {
        Vec::new()
    }
}

/// Quantizes `w` (`[out x in]`, one row per output unit); `bias` stays FP32.
pub fn quantize_linear(w: &Tensor, bias: Option<&Tensor>) -> Result<QuantizedLinear> {
    if w.rank() != 2 {
        return Err(Error::Dimension {
            op: "quantize_linear",
            lhs: w.shape().to_vec(),
            rhs: vec![],
        });
    }
    if !w.is_finite() {
        return Err(Error::Numeric("cannot quantize non-finite weights".into()));
    }
    let (out_dim, in_dim) = (w.rows(), w.cols());
    if let Some(b) = bias {
        if b.numel() != out_dim {
            return Err(Error::Dimension {
                op: "quantize_linear",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let mut q_weight = vec![0i8; out_dim * in_dim];
    let scales = (0..out_dim)
        .map(|r| quantize_row(w.row(r), &mut q_weight[r * in_dim..(r + 1) * in_dim]))
        .collect();
    Ok(QuantizedLinear {
        out_dim,
        in_dim,
        packed: packed_copy(&q_weight, out_dim, in_dim),
        q_weight,
        scales,
        bias: bias.map(|b| b.data().to_vec()),
    })
}

impl QuantizedLinear {
    pub fn from_parts(
        out_dim: usize,
        in_dim: usize,
        q_weight: Vec<i8>,
        scales: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        if q_weight.len() != out_dim * in_dim
            || scales.len() != out_dim
            || bias.as_ref().is_some_and(|b| b.len() != out_dim)
        {
            return Err(Error::Checkpoint(format!(
                "quantized weight of {out_dim}x{in_dim} has inconsistent parts"
            )));
        }
        if q_weight.contains(&i8::MIN) {
            return Err(Error::Checkpoint("quantized weight holds -128".into()));
        }
        Ok(Self {
            out_dim,
            in_dim,
            packed: packed_copy(&q_weight, out_dim, in_dim),
            q_weight,
            scales,
            bias,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn q_weight(&self) -> &[i8] {
        &self.q_weight
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn dequantize(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.q_weight.len());
        for r in 0..self.out_dim {
            let s = self.scales[r];
            data.extend(
                self.q_weight[r * self.in_dim..(r + 1) * self.in_dim]
                    .iter()
                    .map(|&q| q as f32 * s),
            );
        }
        Tensor::new(vec![self.out_dim, self.in_dim], data).expect("non-empty weight")
    }

    /// Output units `rows` only; column `i` of the result is unit `rows[i]`.
    pub fn forward_rows(&self, x: &Tensor, rows: &[u32]) -> Result<Tensor> {
        self.check_input(x)?;
        if let Some(&r) = rows.iter().find(|&&r| r as usize >= self.out_dim) {
            return Err(Error::Input(format!(
                "output unit {r} outside layer of {} units",
                self.out_dim
            )));
        }
        Ok(self.run(x, rows.len(), |i| rows[i] as usize))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.in_dim {
            return Err(Error::Dimension {
                op: "quantized_matmul",
                lhs: x.shape().to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, n: usize, unit: impl Fn(usize) -> usize) -> Tensor {
        let k = self.in_dim;
        let mut xq = vec![0i8; k];
        let mut acc = vec![0i32; n];
        let mut out = Vec::with_capacity(x.rows() * n);
        for r in 0..x.rows() {
            let xs = quantize_row(x.row(r), &mut xq);
            dot_i8_rows(&xq, &self.q_weight, &mut acc, &unit);
            self.emit(&acc, xs, &unit, &mut out);
        }
        Tensor::new(vec![x.rows(), n], out).expect("non-empty output")
    }

    /// All units through the interleaved layout.
    fn run_packed(&self, x: &Tensor) -> Tensor {
        let k = self.in_dim;
        let mut xq = vec![0i8; k.div_ceil(PACK_DEPTH) * PACK_DEPTH];
        let mut acc = vec![0i32; self.out_dim.div_ceil(PACK_UNITS) * PACK_UNITS];
        let mut out = Vec::with_capacity(x.rows() * self.out_dim);
        for r in 0..x.rows() {
            let xs = quantize_row(x.row(r), &mut xq[..k]);
            dot_i8_packed(&xq, &self.packed, &mut acc);
            self.emit(&acc[..self.out_dim], xs, |i| i, &mut out);
        }
        Tensor::new(vec![x.rows(), self.out_dim], out).expect("non-empty output")
    }

    fn emit(&self, acc: &[i32], xs: f32, unit: impl Fn(usize) -> usize, out: &mut Vec<f32>) {
        for (i, &a) in acc.iter().enumerate() {
            let u = unit(i);
            let mut y = a as f32 * (xs * self.scales[u]);
            if let Some(b) = &self.bias {
                y += b[u];
            }
            out.push(y);
        }
    }
}

/// `x W^T + b` with `x` quantized per row on the fly.
pub fn quantized_matmul(x: &Tensor, qw: &QuantizedLinear) -> Result<Tensor> {
    qw.check_input(x)?;
    if qw.packed.is_empty() {
        Ok(qw.run(x, qw.out_dim, |i| i))
    } else {
        Ok(qw.run_packed(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::matmul_nt;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn extremal_row_is_exact() {
        let w = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let q = quantize_linear(&w, None).unwrap();
        assert_eq!(q.scales(), &[1.0 / 127.0]);
        assert_eq!(q.q_weight(), &[127, -127]);
        assert_eq!(q.dequantize().data(), &[1.0, -1.0]);
    }

    #[test]
    fn zero_row_has_zero_scale() {
        let w = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.5, 0.0, -0.25]]).unwrap();
        let q = quantize_linear(&w, None).unwrap();
        assert_eq!(q.scales()[0], 0.0);
        assert_eq!(&q.q_weight()[..3], &[0, 0, 0]);
        assert_eq!(q.dequantize().row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // scale 1: 0.5 -> 1, -0.5 -> -1, 1.5 -> 2
        let w = Tensor::from_rows(&[vec![127.0, 0.5, -0.5, 1.5, -2.5]]).unwrap();
        let q = quantize_linear(&w, None).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.q_weight(), &[127, 1, -1, 2, -3]);
    }

    #[test]
    fn dequantization_error_within_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(&mut rng, 4, 4);
        let q = quantize_linear(&w, None).unwrap();
        let d = q.dequantize();
        for r in 0..4 {
            for c in 0..4 {
                assert!((d.row(r)[c] - w.row(r)[c]).abs() <= q.scales()[r] / 2.0);
            }
        }
    }

    #[test]
    fn one_hot_input_selects_weight_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&mut rng, 3, 5);
        let q = quantize_linear(&w, None).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        let y = quantized_matmul(&x, &q).unwrap();
        let dq = q.dequantize();
        // x_scale = 1/127, x quantizes to 127 * e0
        for u in 0..3 {
            let bound = (1.0 / 127.0) * q.scales()[u];
            assert!((y.row(0)[u] - dq.row(u)[0]).abs() <= bound);
        }
    }

    #[test]
    fn zero_weight_gives_bias() {
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::vector(vec![0.25, -1.5]);
        let q = quantize_linear(&w, Some(&b)).unwrap();
        let x = Tensor::from_rows(&[vec![3.0, -7.0, 1.0], vec![0.1, 0.2, 0.3]]).unwrap();
        let y = quantized_matmul(&x, &q).unwrap();
        assert_eq!(y.data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn forward_rows_matches_full_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random(&mut rng, 7, 40);
        let q = quantize_linear(&w, Some(&Tensor::vector((0..7).map(|i| i as f32).collect()))).unwrap();
        let x = random(&mut rng, 2, 40);
        let full = quantized_matmul(&x, &q).unwrap();
        let some = q.forward_rows(&x, &[6, 0, 3]).unwrap();
        for r in 0..2 {
            assert_eq!(some.row(r), &[full.row(r)[6], full.row(r)[0], full.row(r)[3]]);
        }
        assert!(q.forward_rows(&x, &[7]).is_err());
    }

    #[test]
    fn error_bound_over_seeds() {
        let bound = 2.0 * (1.0 / 127.0 + 1.0 / 127.0 + 1.0 / (127.0 * 127.0));
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, k, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
            let x = random(&mut rng, m, k);
            let w = random(&mut rng, n, k);
            let q = quantize_linear(&w, None).unwrap();
            let got = quantized_matmul(&x, &q).unwrap();
            let want = matmul_nt(&x, &w).unwrap();
            for r in 0..m {
                let mx = x.row(r).iter().fold(0.0f32, |a, v| a.max(v.abs()));
                for u in 0..n {
                    let mw = w.row(u).iter().fold(0.0f32, |a, v| a.max(v.abs()));
                    let scale = (k as f32 * mx * mw).max(f32::MIN_POSITIVE);
                    let rel = (got.row(r)[u] - want.row(r)[u]).abs() / scale;
                    assert!(rel <= bound, "seed {seed}: {rel} > {bound}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn requantizing_is_idempotent(rows in proptest::collection::vec(proptest::collection::vec(-100.0f32..100.0, 6), 1..5)) {
            let w = Tensor::from_rows(&rows).unwrap();
            let q = quantize_linear(&w, None).unwrap();
            let again = quantize_linear(&q.dequantize(), None).unwrap();
            prop_assert_eq!(q.q_weight(), again.q_weight());
            prop_assert_eq!(q.scales(), again.scales());
        }

        #[test]
        fn q_weight_in_symmetric_range(rows in proptest::collection::vec(proptest::collection::vec(-1e3f32..1e3, 3), 1..4)) {
            let w = Tensor::from_rows(&rows).unwrap();
            let q = quantize_linear(&w, None).unwrap();
            prop_assert!(q.q_weight().iter().all(|&v| v != i8::MIN));
            for r in 0..w.rows() {
                let max = w.row(r).iter().fold(0.0f32, |a, v| a.max(v.abs()));
                prop_assert_eq!(q.scales()[r], max / 127.0);
            }
        }
    }
}
