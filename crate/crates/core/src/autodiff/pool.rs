//! Windowed max pooling.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub(crate) fn pool_output(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for d in 0..3 {
        if stride[d] == 0 {
            return Err(Error::Dimension(format!("pool stride must be >= 1, got {stride:?}")));
        }
        if kernel[d] == 0 || kernel[d] > input[d] {
            return Err(Error::Dimension(format!(
                "pool kernel {kernel:?} larger than input extents {input:?}"
            )));
        }
        out[d] = (input[d] - kernel[d]) / stride[d] + 1;
    }
    Ok(out)
}

/// Returns pooled values and, per output element, the flat input index of
/// the first maximum in scan order.
pub(crate) fn max_pool3d_forward<F: Scalar>(
    x: &[F],
    planes: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    output: [usize; 3],
) -> (Vec<F>, Vec<usize>) {
    let [ti, hi, wi] = input;
    let [to, ho, wo] = output;
    let in_plane = ti * hi * wi;
    let out_plane = to * ho * wo;
    let mut vals = Vec::with_capacity(planes * out_plane);
    let mut arg = Vec::with_capacity(planes * out_plane);
    for p in 0..planes {
        let base = p * in_plane;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut best_i = usize::MAX;
                    for dt in 0..kernel[0] {
                        for dh in 0..kernel[1] {
                            for dw in 0..kernel[2] {
                                let i = base
                                    + ((ot * stride[0] + dt) * hi + oh * stride[1] + dh) * wi
                                    + ow * stride[2]
                                    + dw;
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (vals, arg)
}

pub(crate) fn max_pool3d_backward<F: Scalar>(dout: &[F], argmax: &[usize], input_len: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); input_len];
    for (&g, &i) in dout.iter().zip(argmax) {
        dx[i] = dx[i] + g;
    }
    dx
}
