use crate::error::{Error, Result};
use crate::kernels::{add_bias, matmul, sigmoid_scalar, Tensor};

/// One SSRU step for a batch.
///
/// ```text
/// f_t = sigmoid(x_t W_f + b_f)
/// c_t = f_t * c_{t-1} + (1 - f_t) * (x_t W)
/// h_t = relu(c_t)
/// ```
pub fn ssru_cell(
    x_t: &Tensor,
    c_prev: &Tensor,
    w_f: &Tensor,
    b_f: &Tensor,
    w: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let f_pre = add_bias(&matmul(x_t, w_f)?, b_f)?;
    let u = matmul(x_t, w)?;
    if c_prev.shape() != u.shape() {
        return Err(Error::Dimension {
            op: "ssru_cell",
            lhs: c_prev.shape().to_vec(),
            rhs: u.shape().to_vec(),
        });
    }
    let mut c = c_prev.clone();
    let mut h = c_prev.clone();
    ssru_update(f_pre.data(), u.data(), c.data_mut(), h.data_mut());
    Ok((h, c))
}

/// Applies the gate in place: `c` holds `c_{t-1}` on entry and `c_t` on exit.
pub(crate) fn ssru_update(f_pre: &[f32], u: &[f32], c: &mut [f32], h: &mut [f32]) {
    for (((c, h), &fp), &u) in c.iter_mut().zip(h.iter_mut()).zip(f_pre).zip(u) {
        let f = sigmoid_scalar(fp);
        *c = f * *c + (1.0 - f) * u;
        *h = c.max(0.0);
    }
}
