use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` receives a fresh `f64` tape and the variable holding the evaluation
/// point; a non-scalar result is sum-reduced. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, epsilon, &coords)
}

/// [`grad_check`] restricted to the listed coordinates of `point`.
pub fn grad_check_coords<F>(f: F, point: &Tensor<f64>, epsilon: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-5..=1e-3).contains(&epsilon) {
        return Err(Error::Input(format!(
            "finite-difference step {epsilon} outside [1e-5, 1e-3]"
        )));
    }
    let eval = |p: &Tensor<f64>, with_grad: bool| -> Result<(f64, Option<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone(), with_grad);
        let mut y = f(&mut tape, x)?;
        if tape.value(y).numel() != 1 {
            y = tape.sum_all(y);
        }
        let value = tape.value(y).data()[0];
        if !with_grad {
            return Ok((value, None));
        }
        tape.backward(y)?;
        let g = tape
            .grad(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.shape()));
        Ok((value, Some(g)))
    };

    let (_, analytic) = eval(point, true)?;
    let analytic = analytic.expect("gradient requested");
    if !analytic.is_finite() {
        return Err(Error::Numeric("non-finite analytic gradient".into()));
    }
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(Error::Numeric(format!("non-finite numeric gradient at {i}")));
        }
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::attention::AttnMask;
    use crate::kernels::tape::{AttnLayout, SeqLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Random projection so each check has a non-trivial upstream gradient.
    fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let w = random(&mut rng, tape.value(y).shape());
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        Ok(tape.sum_all(p))
    }

    #[test]
    fn linear_function_is_exact() {
        // dyadic point and step keep every evaluation exact
        let p = Tensor::vector(vec![0.25, -2.0, 5.0]);
        let err = grad_check(|t, x| Ok(t.sum_all(x)), &p, 1.0 / 1024.0).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_matches_analytic() {
        let p = Tensor::vector(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.param(p.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
        let err = grad_check(|t, x| t.mul(x, x), &p, 1e-4).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let p = Tensor::vector(vec![1.0]);
        assert!(grad_check(|t, x| Ok(t.sum_all(x)), &p, 1e-1).is_err());
    }

    #[test]
    fn backward_visits_records_in_reverse() {
        // a second use of `x` after a long chain still receives both paths
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![2.0]));
        let a = tape.scale(x, 3.0);
        let b = tape.mul(a, x).unwrap();
        let c = tape.add(b, x).unwrap();
        let s = tape.sum_all(c);
        tape.backward(s).unwrap();
        // d/dx (3x^2 + x) = 6x + 1
        assert_eq!(tape.grad(x).unwrap().data(), &[13.0]);
        assert_eq!(tape.backward_ops(), 4);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]), false);
        let x = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.mul(w, x).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn every_kernel_passes_gradient_check_over_20_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[3, 4]);
            let b = random(&mut rng, &[4, 5]);
            let bt = random(&mut rng, &[5, 4]);
            let bias = random(&mut rng, &[4]);
            let other = random(&mut rng, &[3, 4]);

            let checks: Vec<(&str, f64)> = vec![
                (
                    "matmul_lhs",
                    grad_check(
                        |t, x| {
                            let w = t.constant(b.clone());
                            let y = t.matmul(x, w)?;
                            project(t, y, seed)
                        },
                        &a,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "matmul_rhs",
                    grad_check(
                        |t, w| {
                            let x = t.constant(a.clone());
                            let y = t.matmul(x, w)?;
                            project(t, y, seed)
                        },
                        &b,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "matmul_nt",
                    grad_check(
                        |t, w| {
                            let x = t.constant(a.clone());
                            let y = t.matmul_nt(x, w)?;
                            project(t, y, seed)
                        },
                        &bt,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "add_bias",
                    grad_check(
                        |t, bv| {
                            let x = t.constant(a.clone());
                            let y = t.add_bias(x, bv)?;
                            project(t, y, seed)
                        },
                        &bias,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "mul",
                    grad_check(
                        |t, x| {
                            let o = t.constant(other.clone());
                            let y = t.mul(x, o)?;
                            project(t, y, seed)
                        },
                        &a,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "relu",
                    grad_check(
                        |t, x| {
                            let y = t.relu(x);
                            project(t, y, seed)
                        },
                        &a,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "sigmoid",
                    grad_check(
                        |t, x| {
                            let y = t.sigmoid(x);
                            let y = t.one_minus(y);
                            project(t, y, seed)
                        },
                        &a,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "layer_norm_x",
                    grad_check(
                        |t, x| {
                            let g = t.constant(bias.clone());
                            let bb = t.constant(bias.map(|v| v * 0.5));
                            let y = t.layer_norm(x, g, bb, 1e-5)?;
                            project(t, y, seed)
                        },
                        &a,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "layer_norm_gain",
                    grad_check(
                        |t, g| {
                            let x = t.constant(a.clone());
                            let bb = t.constant(bias.clone());
                            let y = t.layer_norm(x, g, bb, 1e-5)?;
                            project(t, y, seed)
                        },
                        &bias,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "gather",
                    grad_check(
                        |t, table| {
                            let y = t.gather(table, &[2, 0, 2, 1])?;
                            project(t, y, seed)
                        },
                        &bt,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "concat",
                    grad_check(
                        |t, x| {
                            let o = t.constant(other.clone());
                            let y = t.concat_cols(&[o, x, x])?;
                            project(t, y, seed)
                        },
                        &a,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "smoothed_ce",
                    grad_check(
                        |t, x| t.smoothed_cross_entropy(x, &[2, 0, 3], 0, 0.1, 2.0),
                        &a,
                        EPS,
                    )
                    .unwrap(),
                ),
                (
                    "bce",
                    grad_check(
                        |t, x| {
                            let y = Tensor::new(
                                vec![3, 4],
                                (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect(),
                            )
                            .unwrap();
                            t.bce_with_logits(x, y, 12.0)
                        },
                        &a,
                        EPS,
                    )
                    .unwrap(),
                ),
            ];
            for (name, err) in checks {
                assert!(err < TOL, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn attention_scan_and_pool_pass_gradient_check_over_20_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            // two sequences of 3 queries over 4 keys, d = 4, 2 heads
            let q = random(&mut rng, &[6, 4]);
            let k = random(&mut rng, &[8, 4]);
            let v = random(&mut rng, &[8, 4]);
            let layout = AttnLayout {
                batch: 2,
                lq: 3,
                lk: 4,
                heads: 2,
                masks: vec![AttnMask::causal(4), AttnMask::full(2)],
            };
            for which in 0..3 {
                let point = [&q, &k, &v][which].clone();
                let err = grad_check(
                    |t, x| {
                        let base = [&q, &k, &v];
                        let vars: Vec<Var> = (0..3)
                            .map(|i| if i == which { x } else { t.constant(base[i].clone()) })
                            .collect();
                        let y = t.attention(vars[0], vars[1], vars[2], layout.clone())?;
                        project(t, y, seed)
                    },
                    &point,
                    EPS,
                )
                .unwrap();
                assert!(err < TOL, "attention input {which} seed {seed}: {err}");
            }

            let f = random(&mut rng, &[6, 3]).map(|z| 1.0 / (1.0 + (-z).exp()));
            let u = random(&mut rng, &[6, 3]);
            for which in 0..2 {
                let point = if which == 0 { f.clone() } else { u.clone() };
                let err = grad_check(
                    |t, x| {
                        let (fv, uv) = if which == 0 {
                            (x, t.constant(u.clone()))
                        } else {
                            (t.constant(f.clone()), x)
                        };
                        let c = t.gated_scan(fv, uv, 2, 3)?;
                        project(t, c, seed)
                    },
                    &point,
                    EPS,
                )
                .unwrap();
                assert!(err < TOL, "scan input {which} seed {seed}: {err}");
            }

            let x = random(&mut rng, &[6, 3]);
            let layout = SeqLayout {
                batch: 2,
                len: 3,
                lengths: vec![3, 2],
            };
            let err = grad_check(
                |t, x| {
                    let y = t.max_pool(x, &layout)?;
                    project(t, y, seed)
                },
                &x,
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "max_pool seed {seed}: {err}");
        }
    }
}
