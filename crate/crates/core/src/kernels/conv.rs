//! im2col + GEMM convolution kernels.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Geometry of a single-image 2-D convolution from `c_in x h x w` to
/// `* x h_out x w_out`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

pub(crate) fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
/// lies inside the image.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kx {
        (g.w + g.pad - kx).div_ceil(g.stride).min(g.w_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane_out = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx);
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[ix0..ix0 + hi - lo]);
                    } else {
                        for (v, &s) in line[lo..hi].iter_mut().zip(src_row[ix0..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-adds columns back into an image.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let plane_out = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let dst = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx);
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                row += 1;
                if lo == hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst_row[ix0..ix0 + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst_row[ix0..].iter_mut().step_by(g.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_square_kernel(op: &'static str, w: Shape) -> Result<usize> {
    if w.height != w.width {
        return Err(Error::shape(
            op,
            format!("kernel must be square, got {}x{}", w.height, w.width),
        ));
    }
    if w.height == 0 {
        return Err(Error::shape(op, "kernel size must be positive"));
    }
    Ok(w.height)
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(Error::shape(
                op,
                format!("bias has {} elements, expected {channels} (output channels)", b.len()),
            ));
        }
    }
    Ok(())
}

pub(crate) fn conv2d_geom(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<ConvGeom> {
    const OP: &str = "conv2d";
    let k = check_square_kernel(OP, w)?;
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if x.channels != w.channels {
        return Err(Error::shape(
            OP,
            format!(
                "input channels {} != weight in-channels {} (weight shape {w})",
                x.channels, w.channels
            ),
        ));
    }
    let h_out = conv_out_size(x.height, k, stride, pad)
        .ok_or_else(|| Error::shape(OP, format!("input height {} too small for kernel {k}", x.height)))?;
    let w_out = conv_out_size(x.width, k, stride, pad)
        .ok_or_else(|| Error::shape(OP, format!("input width {} too small for kernel {k}", x.width)))?;
    Ok(ConvGeom {
        c_in: x.channels,
        h: x.height,
        w: x.width,
        k,
        stride,
        pad,
        h_out,
        w_out,
    })
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let g = conv2d_geom(xs, ws, stride, pad)?;
    check_bias("conv2d", bias, ws.batch)?;
    let c_out = ws.batch;
    let out_shape = Shape::new(xs.batch, c_out, g.h_out, g.w_out);
    let mut out = Tensor::zeros(out_shape);
    let in_per = xs.channels * xs.plane();
    let out_per = c_out * g.col_cols();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    for b in 0..xs.batch {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let ob = &mut out.data_mut()[b * out_per..(b + 1) * out_per];
        let colref: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        T::gemm(c_out, g.col_rows(), g.col_cols(), w.data(), false, colref, false, ob, false);
        if let Some(bias) = bias {
            for (co, plane) in ob.chunks_mut(g.col_cols()).enumerate() {
                let bv = bias.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = w.shape();
    let g = conv2d_geom(xs, ws, stride, pad).expect("validated in forward");
    let c_out = ws.batch;
    let in_per = xs.channels * xs.plane();
    let out_per = c_out * g.col_cols();
    let mut gx = Tensor::zeros(if need_input { xs } else { Shape::new(0, 0, 0, 0) });
    let mut gw = Tensor::zeros(ws);
    let mut gb = vec![T::zero(); c_out];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for b in 0..xs.batch {
        let gob = &grad_out[b * out_per..(b + 1) * out_per];
        for (co, plane) in gob.chunks(g.col_cols()).enumerate() {
            gb[co] += plane.iter().copied().sum();
        }
        if need_weight {
            let xb = &x.data()[b * in_per..(b + 1) * in_per];
            let colref: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            T::gemm(c_out, g.col_cols(), g.col_rows(), gob, false, colref, true, gw.data_mut(), true);
        }
        if need_input {
            let gxb = &mut gx.data_mut()[b * in_per..(b + 1) * in_per];
            if g.is_pointwise() {
                T::gemm(g.col_rows(), c_out, g.col_cols(), w.data(), true, gob, false, gxb, true);
            } else {
                T::gemm(g.col_rows(), c_out, g.col_cols(), w.data(), true, gob, false, &mut cols, false);
                col2im(&cols, &g, gxb);
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Geometry of the convolution whose adjoint is the requested transposed
/// convolution: it maps the transposed output back onto the input grid.
pub(crate) fn conv_transpose2d_geom(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<ConvGeom> {
    const OP: &str = "conv_transpose2d";
    let k = check_square_kernel(OP, w)?;
    if !(1..=2).contains(&stride) {
        return Err(Error::InvalidArgument(format!(
            "conv_transpose2d stride must be 1 or 2, got {stride}"
        )));
    }
    if x.channels != w.batch {
        return Err(Error::shape(
            OP,
            format!(
                "input channels {} != weight in-channels {} (weight shape {w})",
                x.channels, w.batch
            ),
        ));
    }
    let full_h = (x.height.max(1) - 1) * stride + k;
    let full_w = (x.width.max(1) - 1) * stride + k;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(Error::shape(OP, format!("padding {pad} too large for input {x}")));
    }
    Ok(ConvGeom {
        c_in: w.channels,
        h: full_h - 2 * pad,
        w: full_w - 2 * pad,
        k,
        stride,
        pad,
        h_out: x.height,
        w_out: x.width,
    })
}

pub(crate) fn conv_transpose2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let g = conv_transpose2d_geom(xs, ws, stride, pad)?;
    let c_out = ws.channels;
    check_bias("conv_transpose2d", bias, c_out)?;
    let out_shape = Shape::new(xs.batch, c_out, g.h, g.w);
    let mut out = Tensor::zeros(out_shape);
    let in_per = xs.channels * xs.plane();
    let out_per = c_out * g.h * g.w;
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for b in 0..xs.batch {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let ob = &mut out.data_mut()[b * out_per..(b + 1) * out_per];
        if g.is_pointwise() {
            T::gemm(c_out, xs.channels, g.col_cols(), w.data(), true, xb, false, ob, false);
        } else {
            T::gemm(g.col_rows(), xs.channels, g.col_cols(), w.data(), true, xb, false, &mut cols, false);
            col2im(&cols, &g, ob);
        }
        if let Some(bias) = bias {
            for (co, plane) in ob.chunks_mut(g.h * g.w).enumerate() {
                let bv = bias.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = w.shape();
    let g = conv_transpose2d_geom(xs, ws, stride, pad).expect("validated in forward");
    let c_out = ws.channels;
    let in_per = xs.channels * xs.plane();
    let out_plane = g.h * g.w;
    let out_per = c_out * out_plane;
    let mut gx = Tensor::zeros(if need_input { xs } else { Shape::new(0, 0, 0, 0) });
    let mut gw = Tensor::zeros(ws);
    let mut gb = vec![T::zero(); c_out];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for b in 0..xs.batch {
        let gob = &grad_out[b * out_per..(b + 1) * out_per];
        for (co, plane) in gob.chunks(out_plane).enumerate() {
            gb[co] += plane.iter().copied().sum();
        }
        let colref: &[T] = if g.is_pointwise() {
            gob
        } else {
            im2col(gob, &g, &mut cols);
            &cols
        };
        if need_input {
            let gxb = &mut gx.data_mut()[b * in_per..(b + 1) * in_per];
            T::gemm(xs.channels, g.col_rows(), g.col_cols(), w.data(), false, colref, false, gxb, true);
        }
        if need_weight {
            let xb = &x.data()[b * in_per..(b + 1) * in_per];
            T::gemm(xs.channels, g.col_cols(), g.col_rows(), xb, false, colref, true, gw.data_mut(), true);
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}
