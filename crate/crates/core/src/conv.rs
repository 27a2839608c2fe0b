//! Convolution kernels: `im2col` lowering onto GEMM, batch-parallel over samples.
//!
//! Conventions follow the common deep-learning layout: activations are
//! `[B, C, H, W]`, convolution weights `[C_out, C_in, kh, kw]` and
//! transposed-convolution weights `[C_in, C_out, kh, kw]`. Convolution is
//! cross-correlation (no kernel flip); the transposed convolution is its exact
//! adjoint.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Samples per partial weight-gradient accumulator; fixed so the reduction
/// order does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn pointwise() -> Self {
        Self::new((1, 1), (1, 1), (0, 0))
    }

    fn is_pointwise(&self) -> bool {
        *self == Self::pointwise()
    }

    /// `floor((H + 2p - k) / s) + 1` per axis.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize, name: &str| {
            if s == 0 || k == 0 {
                return Err(Error::contract(format!("{name}: zero kernel or stride")));
            }
            if n + 2 * p < k {
                return Err(Error::Dimension {
                    op: "conv2d",
                    axis: format!("{name} (padded extent vs kernel)"),
                    expected: k,
                    actual: n + 2 * p,
                });
            }
            Ok((n + 2 * p - k) / s + 1)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0, "height")?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1, "width")?,
        ))
    }

    /// `(H - 1) s - 2p + k` per axis.
    pub fn transpose_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize, name: &str| {
            let full = (n - 1) * s + k;
            if s == 0 || full <= 2 * p {
                return Err(Error::Dimension {
                    op: "conv_transpose2d",
                    axis: format!("{name} (output extent vs padding)"),
                    expected: 2 * p + 1,
                    actual: full,
                });
            }
            Ok(full - 2 * p)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0, "height")?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1, "width")?,
        ))
    }
}

/// Index bookkeeping for one lowering `[C, H, W] <-> [C*kh*kw, Ho*Wo]`.
#[derive(Clone, Copy, Debug)]
struct Lowering {
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    geom: ConvGeometry,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.geom.kernel.0 * self.geom.kernel.1
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col<F: Element>(&self, image: &[F], col: &mut [F]) {
        let (kh, kw) = self.geom.kernel;
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        let cols = self.cols();
        for c in 0..self.channels {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(F::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                F::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into `image` (adjoint of [`Self::im2col`]).
    fn col2im<F: Element>(&self, col: &[F], image: &mut [F]) {
        let (kh, kw) = self.geom.kernel;
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        let cols = self.cols();
        for c in 0..self.channels {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.out_w {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn view<F>(data: &[F], rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), data).expect("gemm operand shape")
}

fn view_mut<F>(data: &mut [F], rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("gemm operand shape")
}

fn check_bias<F: Element>(op: &'static str, bias: Option<&Tensor<F>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::Dimension {
                op,
                axis: "bias length (output channels)".into(),
                expected: channels,
                actual: b.len(),
            });
        }
    }
    Ok(())
}

fn add_bias<F: Element>(out: &mut [F], bias: &[F], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

/// Sums `grad` over batch and spatial axes, per channel.
fn bias_grad<F: Element>(grad: &[F], channels: usize, plane: usize) -> Tensor<F> {
    let mut db = vec![F::zero(); channels];
    for (i, chunk) in grad.chunks(plane).enumerate() {
        db[i % channels] = db[i % channels] + chunk.iter().copied().sum::<F>();
    }
    Tensor::new(vec![channels], db).expect("bias shape")
}

fn conv_lowering(
    input: [usize; 4],
    weight: [usize; 4],
    geom: ConvGeometry,
) -> Result<(Lowering, usize)> {
    let [_, c_in, h, w] = input;
    let [c_out, w_in, kh, kw] = weight;
    if w_in != c_in {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "input channels (weight axis 1 vs input axis 1)".into(),
            expected: w_in,
            actual: c_in,
        });
    }
    if (kh, kw) != geom.kernel {
        return Err(Error::contract(format!(
            "conv2d: weight kernel {:?} disagrees with geometry {:?}",
            (kh, kw),
            geom.kernel
        )));
    }
    let (out_h, out_w) = geom.conv_output(h, w)?;
    Ok((
        Lowering {
            channels: c_in,
            h,
            w,
            out_h,
            out_w,
            geom,
        },
        c_out,
    ))
}

/// Cross-correlation of `input [B,C_in,H,W]` with `weight [C_out,C_in,kh,kw]`.
pub fn conv2d<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    geom: ConvGeometry,
) -> Result<Tensor<F>> {
    let in_dims = input.dims4("conv2d")?;
    let w_dims = weight.dims4("conv2d")?;
    let (low, c_out) = conv_lowering(in_dims, w_dims, geom)?;
    check_bias("conv2d", bias, c_out)?;
    let batch = in_dims[0];
    let (k, p) = (low.rows(), low.cols());
    let in_stride = low.channels * low.h * low.w;
    let mut out = vec![F::zero(); batch * c_out * p];
    let wv = view(weight.data(), c_out, k);
    out.par_chunks_mut(c_out * p)
        .zip(input.data().par_chunks(in_stride))
        .for_each_init(
            || vec![F::zero(); if geom.is_pointwise() { 0 } else { k * p }],
            |col, (dst, src)| {
                let colv = if geom.is_pointwise() {
                    view(src, k, p)
                } else {
                    low.im2col(src, col);
                    view(col, k, p)
                };
                general_mat_mul(F::one(), &wv, &colv, F::zero(), &mut view_mut(dst, c_out, p));
            },
        );
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), p);
    }
    Tensor::new(vec![batch, c_out, low.out_h, low.out_w], out)
}

/// Gradients of [`conv2d`]: `(d input, d weight, d bias)`.
///
/// The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    geom: ConvGeometry,
    need_input: bool,
) -> Result<(Option<Tensor<F>>, Tensor<F>, Tensor<F>)> {
    let in_dims = input.dims4("conv2d_backward")?;
    let w_dims = weight.dims4("conv2d_backward")?;
    let (low, c_out) = conv_lowering(in_dims, w_dims, geom)?;
    let batch = in_dims[0];
    let expected = [batch, c_out, low.out_h, low.out_w];
    if grad_out.shape() != expected {
        return Err(Error::Shape {
            op: "conv2d_backward",
            lhs: expected.to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let (k, p) = (low.rows(), low.cols());
    let in_stride = low.channels * low.h * low.w;
    let pointwise = geom.is_pointwise();

    let grad_input = if need_input {
        let mut dx = vec![F::zero(); input.len()];
        let wv = view(weight.data(), c_out, k);
        dx.par_chunks_mut(in_stride)
            .zip(grad_out.data().par_chunks(c_out * p))
            .for_each_init(
                || vec![F::zero(); k * p],
                |col, (dst, g)| {
                    let gv = view(g, c_out, p);
                    if pointwise {
                        general_mat_mul(F::one(), &wv.t(), &gv, F::zero(), &mut view_mut(dst, k, p));
                    } else {
                        general_mat_mul(F::one(), &wv.t(), &gv, F::zero(), &mut view_mut(col, k, p));
                        low.col2im(col, dst);
                    }
                },
            );
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };

    let partials: Vec<Vec<F>> = input
        .data()
        .par_chunks(in_stride * GRAD_CHUNK)
        .zip(grad_out.data().par_chunks(c_out * p * GRAD_CHUNK))
        .map(|(xs, gs)| {
            let mut dw = vec![F::zero(); c_out * k];
            let mut col = vec![F::zero(); if pointwise { 0 } else { k * p }];
            for (x, g) in xs.chunks(in_stride).zip(gs.chunks(c_out * p)) {
                let colv = if pointwise {
                    view(x, k, p)
                } else {
                    low.im2col(x, &mut col);
                    view(&col, k, p)
                };
                general_mat_mul(
                    F::one(),
                    &view(g, c_out, p),
                    &colv.t(),
                    F::one(),
                    &mut view_mut(&mut dw, c_out, k),
                );
            }
            dw
        })
        .collect();
    let grad_weight = sum_partials(partials, weight.shape())?;
    let grad_bias = bias_grad(grad_out.data(), c_out, p);
    Ok((grad_input, grad_weight, grad_bias))
}

fn sum_partials<F: Element>(partials: Vec<Vec<F>>, shape: &[usize]) -> Result<Tensor<F>> {
    let mut iter = partials.into_iter();
    let mut acc = iter.next().expect("at least one sample");
    for part in iter {
        for (a, b) in acc.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    Tensor::new(shape.to_vec(), acc)
}

fn transpose_lowering(
    input: [usize; 4],
    weight: [usize; 4],
    geom: ConvGeometry,
) -> Result<Lowering> {
    let [_, c_in, h, w] = input;
    let [w_in, c_out, kh, kw] = weight;
    if w_in != c_in {
        return Err(Error::Dimension {
            op: "conv_transpose2d",
            axis: "input channels (weight axis 0 vs input axis 1)".into(),
            expected: w_in,
            actual: c_in,
        });
    }
    if (kh, kw) != geom.kernel {
        return Err(Error::contract(format!(
            "conv_transpose2d: weight kernel {:?} disagrees with geometry {:?}",
            (kh, kw),
            geom.kernel
        )));
    }
    let (out_h, out_w) = geom.transpose_output(h, w)?;
    // The lowering runs over the *output* image; its im2col grid must match the input.
    let check = geom.conv_output(out_h, out_w)?;
    if check != (h, w) {
        return Err(Error::contract(format!(
            "conv_transpose2d: geometry {geom:?} is not invertible for input {h}x{w}"
        )));
    }
    Ok(Lowering {
        channels: c_out,
        h: out_h,
        w: out_w,
        out_h: h,
        out_w: w,
        geom,
    })
}

/// Transposed convolution of `input [B,C_in,H,W]` with `weight [C_in,C_out,kh,kw]`.
pub fn conv_transpose2d<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    geom: ConvGeometry,
) -> Result<Tensor<F>> {
    let in_dims = input.dims4("conv_transpose2d")?;
    let w_dims = weight.dims4("conv_transpose2d")?;
    let low = transpose_lowering(in_dims, w_dims, geom)?;
    let c_in = in_dims[1];
    let c_out = low.channels;
    check_bias("conv_transpose2d", bias, c_out)?;
    let batch = in_dims[0];
    let (k, p) = (low.rows(), low.cols());
    let out_plane = low.h * low.w;
    let mut out = vec![F::zero(); batch * c_out * out_plane];
    let wv = view(weight.data(), c_in, k);
    let pointwise = geom.is_pointwise();
    out.par_chunks_mut(c_out * out_plane)
        .zip(input.data().par_chunks(c_in * p))
        .for_each_init(
            || vec![F::zero(); k * p],
            |col, (dst, x)| {
                let xv = view(x, c_in, p);
                if pointwise {
                    general_mat_mul(F::one(), &wv.t(), &xv, F::zero(), &mut view_mut(dst, k, p));
                } else {
                    general_mat_mul(F::one(), &wv.t(), &xv, F::zero(), &mut view_mut(col, k, p));
                    low.col2im(col, dst);
                }
            },
        );
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), out_plane);
    }
    Tensor::new(vec![batch, c_out, low.h, low.w], out)
}

/// Gradients of [`conv_transpose2d`]: `(d input, d weight, d bias)`.
pub fn conv_transpose2d_backward<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    geom: ConvGeometry,
    need_input: bool,
) -> Result<(Option<Tensor<F>>, Tensor<F>, Tensor<F>)> {
    let in_dims = input.dims4("conv_transpose2d_backward")?;
    let w_dims = weight.dims4("conv_transpose2d_backward")?;
    let low = transpose_lowering(in_dims, w_dims, geom)?;
    let [batch, c_in, _, _] = in_dims;
    let c_out = low.channels;
    let expected = [batch, c_out, low.h, low.w];
    if grad_out.shape() != expected {
        return Err(Error::Shape {
            op: "conv_transpose2d_backward",
            lhs: expected.to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let (k, p) = (low.rows(), low.cols());
    let out_plane = low.h * low.w;
    let pointwise = geom.is_pointwise();

    let grad_input = if need_input {
        let mut dx = vec![F::zero(); input.len()];
        let wv = view(weight.data(), c_in, k);
        dx.par_chunks_mut(c_in * p)
            .zip(grad_out.data().par_chunks(c_out * out_plane))
            .for_each_init(
                || vec![F::zero(); if pointwise { 0 } else { k * p }],
                |col, (dst, g)| {
                    let colv = if pointwise {
                        view(g, k, p)
                    } else {
                        low.im2col(g, col);
                        view(col, k, p)
                    };
                    general_mat_mul(F::one(), &wv, &colv, F::zero(), &mut view_mut(dst, c_in, p));
                },
            );
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };

    let partials: Vec<Vec<F>> = input
        .data()
        .par_chunks(c_in * p * GRAD_CHUNK)
        .zip(grad_out.data().par_chunks(c_out * out_plane * GRAD_CHUNK))
        .map(|(xs, gs)| {
            let mut dw = vec![F::zero(); c_in * k];
            let mut col = vec![F::zero(); if pointwise { 0 } else { k * p }];
            for (x, g) in xs.chunks(c_in * p).zip(gs.chunks(c_out * out_plane)) {
                let colv = if pointwise {
                    view(g, k, p)
                } else {
                    low.im2col(g, &mut col);
                    view(&col, k, p)
                };
                general_mat_mul(
                    F::one(),
                    &view(x, c_in, p),
                    &colv.t(),
                    F::one(),
                    &mut view_mut(&mut dw, c_in, k),
                );
            }
            dw
        })
        .collect();
    let grad_weight = sum_partials(partials, weight.shape())?;
    let grad_bias = bias_grad(grad_out.data(), c_out, out_plane);
    Ok((grad_input, grad_weight, grad_bias))
}

pub fn relu<F: Element>(input: &Tensor<F>) -> Tensor<F> {
    input.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Passes `grad` where `input > 0`; the subgradient at zero is zero.
pub fn relu_backward<F: Element>(input: &Tensor<F>, grad: &Tensor<F>) -> Result<Tensor<F>> {
    input.zip_map(grad, |x, g| if x > F::zero() { g } else { F::zero() })
}
