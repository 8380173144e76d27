#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::*;

/// True when the AVX2 kernel is used.
pub fn simd_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Integer dot product with `i32` accumulation.
pub fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    {
        if simd_available() {
            // SAFETY: AVX2 support was just detected.
            return unsafe { dot_avx2(a, b) };
        }
    }
    dot_scalar(a, b)
}

/// Output units per packed block.
pub const PACK_UNITS: usize = 8;
/// Inputs per packed block.
pub const PACK_DEPTH: usize = 4;

/// Interleaves `[out x in]` codes into blocks of 8 units by 4 inputs so
/// one 32-byte load feeds eight accumulators. Padding is zero.
pub fn pack_rows(q: &[i8], out_dim: usize, in_dim: usize) -> Vec<i8> {
    let groups = in_dim.div_ceil(PACK_DEPTH);
    let blocks = out_dim.div_ceil(PACK_UNITS);
    let mut packed = vec![0i8; blocks * groups * PACK_UNITS * PACK_DEPTH];
    for u in 0..out_dim {
        let (b, lane) = (u / PACK_UNITS, u % PACK_UNITS);
        for (i, &v) in q[u * in_dim..(u + 1) * in_dim].iter().enumerate() {
            let (g, j) = (i / PACK_DEPTH, i % PACK_DEPTH);
            packed[((b * groups + g) * PACK_UNITS + lane) * PACK_DEPTH + j] = v;
        }
    }
    packed
}

/// `x · w[u]` for every unit of a packed matrix. `x` is zero-padded to a
/// multiple of 4 and `out` holds a multiple of 8 values. Needs AVX2.
pub fn dot_i8_packed(x: &[i8], packed: &[i8], out: &mut [i32]) {
    assert!(x.len() % PACK_DEPTH == 0 && out.len() % PACK_UNITS == 0);
    assert_eq!(packed.len(), x.len() * out.len());
    #[cfg(target_arch = "x86_64")]
    {
        if simd_available() {
            // SAFETY: AVX2 support was just detected; lengths checked above.
            unsafe { packed_avx2(x, packed, out) };
            return;
        }
    }
    let groups = x.len() / PACK_DEPTH;
    for (u, o) in out.iter_mut().enumerate() {
        let (b, lane) = (u / PACK_UNITS, u % PACK_UNITS);
        *o = (0..x.len())
            .map(|i| {
                let (g, j) = (i / PACK_DEPTH, i % PACK_DEPTH);
                x[i] as i32 * packed[((b * groups + g) * PACK_UNITS + lane) * PACK_DEPTH + j] as i32
            })
            .sum();
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn packed_avx2(x: &[i8], packed: &[i8], out: &mut [i32]) {
    let groups = x.len() / PACK_DEPTH;
    let ones = _mm256_set1_epi16(1);
    for (b, chunk) in out.chunks_exact_mut(PACK_UNITS).enumerate() {
        let base = packed.as_ptr().add(b * groups * 32);
        let mut acc0 = _mm256_setzero_si256();
        let mut acc1 = _mm256_setzero_si256();
        let mut g = 0;
        while g + 2 <= groups {
            let x0 = _mm256_set1_epi32((x.as_ptr().add(g * 4) as *const i32).read_unaligned());
            let x1 = _mm256_set1_epi32((x.as_ptr().add(g * 4 + 4) as *const i32).read_unaligned());
            let w0 = _mm256_loadu_si256(base.add(g * 32) as *const __m256i);
            let w1 = _mm256_loadu_si256(base.add(g * 32 + 32) as *const __m256i);
            let p0 = _mm256_maddubs_epi16(_mm256_abs_epi8(x0), _mm256_sign_epi8(w0, x0));
            let p1 = _mm256_maddubs_epi16(_mm256_abs_epi8(x1), _mm256_sign_epi8(w1, x1));
            acc0 = _mm256_add_epi32(acc0, _mm256_madd_epi16(p0, ones));
            acc1 = _mm256_add_epi32(acc1, _mm256_madd_epi16(p1, ones));
            g += 2;
        }
        if g < groups {
            let x0 = _mm256_set1_epi32((x.as_ptr().add(g * 4) as *const i32).read_unaligned());
            let w0 = _mm256_loadu_si256(base.add(g * 32) as *const __m256i);
            let p0 = _mm256_maddubs_epi16(_mm256_abs_epi8(x0), _mm256_sign_epi8(w0, x0));
            acc0 = _mm256_add_epi32(acc0, _mm256_madd_epi16(p0, ones));
        }
        _mm256_storeu_si256(chunk.as_mut_ptr() as *mut __m256i, _mm256_add_epi32(acc0, acc1));
    }
}

/// Symmetric quantization of one row to [-127, 127], rounding half away
/// from zero. Returns the scale (0 for an all-zero row).
pub fn quantize_row(row: &[f32], out: &mut [i8]) -> f32 {
    let max = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        out.iter_mut().for_each(|q| *q = 0);
        return 0.0;
    }
    let scale = max / 127.0;
    let mut done = 0;
    #[cfg(target_arch = "x86_64")]
    {
        if simd_available() {
            // SAFETY: AVX2 support was just detected.
            done = unsafe { quantize_avx2(row, out, scale) };
        }
    }
    for (q, &v) in out[done..].iter_mut().zip(&row[done..]) {
        // f32::round rounds half away from zero
        *q = (v / scale).round().clamp(-127.0, 127.0) as i8;
    }
    scale
}

/// Handles whole blocks of 8 and returns how many values were written.
/// Same division and rounding as the scalar path, so codes are identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn quantize_avx2(row: &[f32], out: &mut [i8], scale: f32) -> usize {
    let full = row.len() / 8 * 8;
    let s = _mm256_set1_ps(scale);
    let half = _mm256_set1_ps(0.5);
    let one = _mm256_set1_ps(1.0);
    let sign = _mm256_set1_ps(-0.0);
    let lo = _mm256_set1_ps(-127.0);
    let hi = _mm256_set1_ps(127.0);
    let mut ints = [0i32; 8];
    let mut i = 0;
    while i < full {
        let v = _mm256_div_ps(_mm256_loadu_ps(row.as_ptr().add(i)), s);
        let t = _mm256_round_ps(v, _MM_FROUND_TO_ZERO | _MM_FROUND_NO_EXC);
        let frac = _mm256_andnot_ps(sign, _mm256_sub_ps(v, t));
        let away = _mm256_and_ps(_mm256_cmp_ps(frac, half, _CMP_GE_OQ), _mm256_or_ps(_mm256_and_ps(v, sign), one));
        let r = _mm256_min_ps(_mm256_max_ps(_mm256_add_ps(t, away), lo), hi);
        _mm256_storeu_si256(ints.as_mut_ptr() as *mut __m256i, _mm256_cvtps_epi32(r));
        for (q, &v) in out[i..i + 8].iter_mut().zip(&ints) {
            *q = v as i8;
        }
        i += 8;
    }
    full
}

/// `out[i] = x · w[unit(i)]`, where `w` holds rows of `x.len()` values.
pub fn dot_i8_rows(x: &[i8], w: &[i8], out: &mut [i32], unit: impl Fn(usize) -> usize) {
    let k = x.len();
    #[cfg(target_arch = "x86_64")]
    {
        if simd_available() {
            // SAFETY: AVX2 support was just detected.
            unsafe { rows_avx2(x, w, out, &unit) };
            return;
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        let u = unit(i);
        *o = dot_scalar(x, &w[u * k..(u + 1) * k]);
    }
}

fn dot_scalar(a: &[i8], b: &[i8]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[i8], b: &[i8]) -> i32 {
    let n = a.len();
    let mut acc0 = _mm256_setzero_si256();
    let mut acc1 = _mm256_setzero_si256();
    let mut i = 0;
    while i + 32 <= n {
        let a0 = _mm256_cvtepi8_epi16(_mm_loadu_si128(a.as_ptr().add(i) as *const __m128i));
        let b0 = _mm256_cvtepi8_epi16(_mm_loadu_si128(b.as_ptr().add(i) as *const __m128i));
        let a1 = _mm256_cvtepi8_epi16(_mm_loadu_si128(a.as_ptr().add(i + 16) as *const __m128i));
        let b1 = _mm256_cvtepi8_epi16(_mm_loadu_si128(b.as_ptr().add(i + 16) as *const __m128i));
        acc0 = _mm256_add_epi32(acc0, _mm256_madd_epi16(a0, b0));
        acc1 = _mm256_add_epi32(acc1, _mm256_madd_epi16(a1, b1));
        i += 32;
    }
    if i + 16 <= n {
        let a0 = _mm256_cvtepi8_epi16(_mm_loadu_si128(a.as_ptr().add(i) as *const __m128i));
        let b0 = _mm256_cvtepi8_epi16(_mm_loadu_si128(b.as_ptr().add(i) as *const __m128i));
        acc0 = _mm256_add_epi32(acc0, _mm256_madd_epi16(a0, b0));
        i += 16;
    }
    let acc = _mm256_add_epi32(acc0, acc1);
    let lo = _mm256_castsi256_si128(acc);
    let hi = _mm256_extracti128_si256(acc, 1);
    let s = _mm_add_epi32(lo, hi);
    let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b01_00_11_10));
    let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b10_11_00_01));
    _mm_cvtsi128_si32(s) + dot_scalar(&a[i..], &b[i..])
}

/// Four output units per pass. Codes lie in [-127, 127], so each
/// `maddubs` pair sum fits in i16 without saturating.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn rows_avx2(x: &[i8], w: &[i8], out: &mut [i32], unit: &impl Fn(usize) -> usize) {
    let k = x.len();
    let full = k / 32 * 32;
    let ones = _mm256_set1_epi16(1);
    let n = out.len();
    let mut i = 0;
    while i + 4 <= n {
        let rows = [unit(i) * k, unit(i + 1) * k, unit(i + 2) * k, unit(i + 3) * k];
        let mut acc = [_mm256_setzero_si256(); 4];
        let mut b = 0;
        while b < full {
            let xv = _mm256_loadu_si256(x.as_ptr().add(b) as *const __m256i);
            let ax = _mm256_abs_epi8(xv);
            for j in 0..4 {
                let wv = _mm256_loadu_si256(w.as_ptr().add(rows[j] + b) as *const __m256i);
                let p = _mm256_maddubs_epi16(ax, _mm256_sign_epi8(wv, xv));
                acc[j] = _mm256_add_epi32(acc[j], _mm256_madd_epi16(p, ones));
            }
            b += 32;
        }
        let h = _mm256_hadd_epi32(_mm256_hadd_epi32(acc[0], acc[1]), _mm256_hadd_epi32(acc[2], acc[3]));
        let s = _mm_add_epi32(_mm256_castsi256_si128(h), _mm256_extracti128_si256(h, 1));
        let mut sums = [0i32; 4];
        _mm_storeu_si128(sums.as_mut_ptr() as *mut __m128i, s);
        for j in 0..4 {
            out[i + j] = sums[j] + dot_scalar(&x[full..], &w[rows[j] + full..rows[j] + k]);
        }
        i += 4;
    }
    for (j, o) in out.iter_mut().enumerate().skip(i) {
        let r = unit(j) * k;
        *o = dot_avx2(x, &w[r..r + k]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn simd_matches_scalar(pairs in proptest::collection::vec((-127i8..=127, -127i8..=127), 0..200)) {
            let (a, b): (Vec<i8>, Vec<i8>) = pairs.into_iter().unzip();
            prop_assert_eq!(dot_i8(&a, &b), dot_scalar(&a, &b));
        }

        #[test]
        fn simd_quantization_matches_scalar(row in proptest::collection::vec(-1e3f32..1e3, 1..40), tie in 0usize..40) {
            let mut row = row;
            // exact ties at the current scale
            let max = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let n = row.len();
            row[tie % n] = if max > 0.0 { 2.5 * (max / 127.0) } else { 0.0 };
            let mut fast = vec![0i8; n];
            let scale = quantize_row(&row, &mut fast);
            for (q, v) in fast.iter().zip(&row) {
                let want = if scale == 0.0 { 0 } else { (v / scale).round().clamp(-127.0, 127.0) as i8 };
                prop_assert_eq!(*q, want);
            }
        }

        #[test]
        fn packed_kernel_matches_scalar(k in 1usize..70, n in 1usize..20, seed in any::<u64>()) {
            let mut s = seed | 1;
            let mut next = || {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                ((s % 255) as i32 - 127) as i8
            };
            let x: Vec<i8> = (0..k).map(|_| next()).collect();
            let w: Vec<i8> = (0..k * n).map(|_| next()).collect();
            let packed = pack_rows(&w, n, k);
            let mut xp = x.clone();
            xp.resize(k.div_ceil(PACK_DEPTH) * PACK_DEPTH, 0);
            let mut out = vec![0; n.div_ceil(PACK_UNITS) * PACK_UNITS];
            dot_i8_packed(&xp, &packed, &mut out);
            for u in 0..n {
                prop_assert_eq!(out[u], dot_scalar(&x, &w[u * k..(u + 1) * k]));
            }
            prop_assert!(out[n..].iter().all(|&v| v == 0));
        }

        #[test]
        fn row_kernel_matches_scalar(
            k in 0usize..100,
            n in 0usize..11,
            seed in any::<u64>(),
        ) {
            let mut s = seed | 1;
            let mut next = || {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                ((s % 255) as i32 - 127) as i8
            };
            let x: Vec<i8> = (0..k).map(|_| next()).collect();
            let w: Vec<i8> = (0..k * n).map(|_| next()).collect();
            // reversed unit order exercises the gather
            let mut out = vec![0; n];
            dot_i8_rows(&x, &w, &mut out, |i| n - 1 - i);
            for (i, &o) in out.iter().enumerate() {
                let u = n - 1 - i;
                prop_assert_eq!(o, dot_scalar(&x, &w[u * k..(u + 1) * k]));
            }
        }
    }
}
