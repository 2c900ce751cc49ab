//! Graph-free versions of the array primitives.

use crate::error::{shape_err, Result, TensorError};
use crate::graph::{check_divisible, median_along, norm_along};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn as_batched(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *shape {
        [c, t, f] => Ok([1, c, t, f]),
        [b, c, t, f] => Ok([b, c, t, f]),
        _ => Err(shape_err(op, "[C, T, F] or [B, C, T, F]", shape)),
    }
}

/// Non-overlapping patch unfolding of `[C,T,F]` (or batched `[B,C,T,F]`)
/// into `[C*kt*kf, T/kt, F/kf]`. Output channel `c*kt*kf + i*kf + j` at
/// `(p, q)` holds input `(c, p*kt + i, q*kf + j)`.
pub fn unfold<S: Scalar>(x: &Tensor<S>, kt: usize, kf: usize) -> Result<Tensor<S>> {
    let dims = as_batched(x.shape(), "unfold")?;
    let [b, c, t, f] = dims;
    check_divisible("unfold", t, kt, f, kf)?;
    let data = kernels::unfold(x.data(), dims, kt, kf);
    let mut shape = vec![c * kt * kf, t / kt, f / kf];
    if x.ndim() == 4 {
        shape.insert(0, b);
    }
    Tensor::new(shape, data)
}

/// Inverse of [`unfold`].
pub fn fold<S: Scalar>(x: &Tensor<S>, kt: usize, kf: usize) -> Result<Tensor<S>> {
    let [b, ck, gt, gf] = as_batched(x.shape(), "fold")?;
    if kt == 0 || kf == 0 || ck % (kt * kf) != 0 {
        return Err(TensorError::Indivisible { op: "fold", axis: "channel", extent: ck, kernel: kt * kf });
    }
    let dims = [b, ck / (kt * kf), gt * kt, gf * kf];
    let data = kernels::fold(x.data(), dims, kt, kf);
    let shape = if x.ndim() == 4 { dims.to_vec() } else { dims[1..].to_vec() };
    Tensor::new(shape, data)
}

pub fn softmax_last<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    x.check_finite("softmax_last")?;
    let len = *x.shape().last().expect("rank >= 1");
    Tensor::new(x.shape().to_vec(), kernels::softmax_rows(x.data(), len))
}

pub fn median_axis<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.ndim() {
        return Err(shape_err("median", format!("axis < {}", x.ndim()), x.shape()));
    }
    x.check_finite("median")?;
    let (shape, _, data) = median_along(x.data(), x.shape(), axis);
    Tensor::new(shape, data)
}

pub fn norm_axis<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.ndim() {
        return Err(shape_err("norm", format!("axis < {}", x.ndim()), x.shape()));
    }
    let (shape, data) = norm_along(x.data(), x.shape(), axis);
    let t = Tensor::new(shape, data)?;
    t.check_finite("norm")?;
    Ok(t)
}
