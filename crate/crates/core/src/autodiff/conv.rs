//! 3-D convolution kernels via im2col + GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Scalar;

/// Stride and zero padding of a 3-D convolution, ordered (time, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    pub const UNIT: ConvSpec = ConvSpec {
        stride: [1, 1, 1],
        padding: [0, 0, 0],
    };

    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// "Same" padding for odd kernels with the given stride.
    pub fn same(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            stride,
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    fn check_stride(&self) -> Result<()> {
        if self.stride.contains(&0) {
            return Err(Error::Dimension(format!(
                "stride components must be >= 1, got {:?}",
                self.stride
            )));
        }
        Ok(())
    }

    /// Output extents of a forward convolution.
    pub fn conv_output(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        self.check_stride()?;
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * self.padding[d];
            if kernel[d] == 0 || kernel[d] > padded {
                return Err(Error::Dimension(format!(
                    "kernel extent {} exceeds padded input extent {} along axis {d}",
                    kernel[d], padded
                )));
            }
            out[d] = (padded - kernel[d]) / self.stride[d] + 1;
        }
        Ok(out)
    }

    /// Output extents of a transposed convolution: `(in - 1) * s - 2p + k`.
    pub fn transpose_output(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        self.check_stride()?;
        let mut out = [0; 3];
        for d in 0..3 {
            let full = (input[d].max(1) - 1) * self.stride[d] + kernel[d];
            if input[d] == 0 || kernel[d] == 0 || full <= 2 * self.padding[d] {
                return Err(Error::Dimension(format!(
                    "transposed conv along axis {d}: input {} kernel {} padding {} gives an empty output",
                    input[d], kernel[d], self.padding[d]
                )));
            }
            out[d] = full - 2 * self.padding[d];
        }
        Ok(out)
    }
}

/// Geometry shared by im2col and col2im.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Patch {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub spec: ConvSpec,
}

impl Patch {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn cols(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }

    /// Visits every (row, out position, in position) triple with an
    /// in-bounds source, row-major in the col matrix.
    #[inline]
    fn walk(&self, mut visit: impl FnMut(usize, Option<usize>)) {
        let [ti, hi, wi] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [to, ho, wo] = self.output;
        let [st, sh, sw] = self.spec.stride;
        let [pt, ph, pw] = self.spec.padding;
        let cols = self.cols();
        for c in 0..self.channels {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let row = ((c * kt + dt) * kh + dh) * kw + dw;
                        let base = row * cols;
                        for ot in 0..to {
                            let it = (ot * st + dt) as isize - pt as isize;
                            let t_ok = it >= 0 && (it as usize) < ti;
                            for oh in 0..ho {
                                let ih = (oh * sh + dh) as isize - ph as isize;
                                let h_ok = t_ok && ih >= 0 && (ih as usize) < hi;
                                let src_row = if h_ok {
                                    ((c * ti + it as usize) * hi + ih as usize) * wi
                                } else {
                                    0
                                };
                                let dst_row = base + (ot * ho + oh) * wo;
                                for ow in 0..wo {
                                    let iw = (ow * sw + dw) as isize - pw as isize;
                                    let src = if h_ok && iw >= 0 && (iw as usize) < wi {
                                        Some(src_row + iw as usize)
                                    } else {
                                        None
                                    };
                                    visit(dst_row + ow, src);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col<F: Scalar>(x: &[F], p: &Patch, col: &mut [F]) {
    debug_assert_eq!(x.len(), p.input_len());
    debug_assert_eq!(col.len(), p.rows() * p.cols());
    p.walk(|dst, src| {
        col[dst] = match src {
            Some(s) => x[s],
            None => F::zero(),
        }
    });
}

pub(crate) fn col2im<F: Scalar>(col: &[F], p: &Patch, x: &mut [F]) {
    debug_assert_eq!(x.len(), p.input_len());
    x.iter_mut().for_each(|v| *v = F::zero());
    p.walk(|dst, src| {
        if let Some(s) = src {
            x[s] = x[s] + col[dst];
        }
    });
}

/// Shapes of a conv call, all per batch sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub spec: ConvSpec,
}

impl ConvDims {
    fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }
    fn out_pos(&self) -> usize {
        self.output.iter().product()
    }
    fn k_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }
    /// Patch for im2col over the conv input.
    fn patch(&self) -> Patch {
        Patch {
            channels: self.cin,
            input: self.input,
            kernel: self.kernel,
            output: self.output,
            spec: self.spec,
        }
    }
}

fn add_bias<F: Scalar>(out: &mut [F], bias: Option<&[F]>, positions: usize) {
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(positions).zip(b) {
            row.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn bias_grad<F: Scalar>(dout: &[F], batch: usize, channels: usize, positions: usize) -> Vec<F> {
    let mut g = vec![F::zero(); channels];
    for n in 0..batch {
        for (c, gc) in g.iter_mut().enumerate() {
            let s = &dout[(n * channels + c) * positions..(n * channels + c + 1) * positions];
            *gc = *gc + s.iter().copied().sum::<F>();
        }
    }
    g
}

fn sum_partials<F: Scalar>(partials: Vec<Vec<F>>, len: usize) -> Vec<F> {
    let mut acc = vec![F::zero(); len];
    for p in partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    acc
}

/// Cross-correlation forward. `weight` is `[cout, cin, kt, kh, kw]`.
pub(crate) fn conv3d_forward<F: Scalar>(
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    d: &ConvDims,
) -> Vec<F> {
    let pos = d.out_pos();
    let k = d.k_len();
    let patch = d.patch();
    let mut out = vec![F::zero(); d.batch * d.cout * pos];
    par::for_each_chunk_mut(&mut out, d.cout * pos, |n, out_n| {
        let x_n = &x[n * d.in_len()..(n + 1) * d.in_len()];
        let mut col = vec![F::zero(); k * pos];
        im2col(x_n, &patch, &mut col);
        F::gemm(d.cout, k, pos, weight, false, &col, false, F::zero(), out_n);
        add_bias(out_n, bias, pos);
    });
    out
}

pub(crate) struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub weight: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub(crate) fn conv3d_backward<F: Scalar>(
    x: &[F],
    weight: &[F],
    dout: &[F],
    d: &ConvDims,
    need: [bool; 3],
) -> ConvGrads<F> {
    let pos = d.out_pos();
    let k = d.k_len();
    let patch = d.patch();
    let input = need[0].then(|| {
        let mut dx = vec![F::zero(); d.batch * d.in_len()];
        par::for_each_chunk_mut(&mut dx, d.in_len(), |n, dx_n| {
            let dout_n = &dout[n * d.cout * pos..(n + 1) * d.cout * pos];
            let mut dcol = vec![F::zero(); k * pos];
            F::gemm(k, d.cout, pos, weight, true, dout_n, false, F::zero(), &mut dcol);
            col2im(&dcol, &patch, dx_n);
        });
        dx
    });
    let weight_grad = need[1].then(|| {
        let partials = par::map_range(d.batch, |n| {
            let x_n = &x[n * d.in_len()..(n + 1) * d.in_len()];
            let dout_n = &dout[n * d.cout * pos..(n + 1) * d.cout * pos];
            let mut col = vec![F::zero(); k * pos];
            im2col(x_n, &patch, &mut col);
            let mut dw = vec![F::zero(); d.cout * k];
            F::gemm(d.cout, pos, k, dout_n, false, &col, true, F::zero(), &mut dw);
            dw
        });
        sum_partials(partials, d.cout * k)
    });
    let bias = need[2].then(|| bias_grad(dout, d.batch, d.cout, pos));
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

/// Transposed convolution dims: `input`/`cin` refer to the tensor fed in,
/// `output`/`cout` to the upsampled result. `weight` is `[cin, cout, kt, kh, kw]`.
fn transpose_patch(d: &ConvDims) -> Patch {
    // im2col over the (larger) output grid lands on the input grid.
    Patch {
        channels: d.cout,
        input: d.output,
        kernel: d.kernel,
        output: d.input,
        spec: d.spec,
    }
}

pub(crate) fn conv_transpose3d_forward<F: Scalar>(
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    d: &ConvDims,
) -> Vec<F> {
    let pin: usize = d.input.iter().product();
    let pout = d.out_pos();
    let kk = d.cout * d.kernel.iter().product::<usize>();
    let patch = transpose_patch(d);
    let mut out = vec![F::zero(); d.batch * d.cout * pout];
    par::for_each_chunk_mut(&mut out, d.cout * pout, |n, out_n| {
        let x_n = &x[n * d.cin * pin..(n + 1) * d.cin * pin];
        let mut col = vec![F::zero(); kk * pin];
        F::gemm(kk, d.cin, pin, weight, true, x_n, false, F::zero(), &mut col);
        col2im(&col, &patch, out_n);
        add_bias(out_n, bias, pout);
    });
    out
}

pub(crate) fn conv_transpose3d_backward<F: Scalar>(
    x: &[F],
    weight: &[F],
    dout: &[F],
    d: &ConvDims,
    need: [bool; 3],
) -> ConvGrads<F> {
    let pin: usize = d.input.iter().product();
    let pout = d.out_pos();
    let kk = d.cout * d.kernel.iter().product::<usize>();
    let patch = transpose_patch(d);
    let cols = |n: usize| {
        let dout_n = &dout[n * d.cout * pout..(n + 1) * d.cout * pout];
        let mut col = vec![F::zero(); kk * pin];
        im2col(dout_n, &patch, &mut col);
        col
    };
    let input = need[0].then(|| {
        let mut dx = vec![F::zero(); d.batch * d.cin * pin];
        par::for_each_chunk_mut(&mut dx, d.cin * pin, |n, dx_n| {
            let col = cols(n);
            F::gemm(d.cin, kk, pin, weight, false, &col, false, F::zero(), dx_n);
        });
        dx
    });
    let weight_grad = need[1].then(|| {
        let partials = par::map_range(d.batch, |n| {
            let x_n = &x[n * d.cin * pin..(n + 1) * d.cin * pin];
            let col = cols(n);
            let mut dw = vec![F::zero(); d.cin * kk];
            F::gemm(d.cin, pin, kk, x_n, false, &col, true, F::zero(), &mut dw);
            dw
        });
        sum_partials(partials, d.cin * kk)
    });
    let bias = need[2].then(|| bias_grad(dout, d.batch, d.cout, pout));
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}
