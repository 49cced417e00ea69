//! Resampling kernels: bilinear resize, horizontal warp, correlation and
//! 3x3 pooling. Each forward has a matching adjoint used by backward.

use crate::tensor::{Real, Shape, Tensor};

/// One output coordinate's two source taps and the weight of the second.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

/// Half-pixel-centred source taps, clamped to the border.
fn resize_taps<T: Real>(n_in: usize, n_out: usize) -> Vec<Tap<T>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == n_in - 1 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                frac: T::from_f64(frac).unwrap(),
            }
        })
        .collect()
}

pub(crate) fn resize_forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize, mul: T) -> Tensor<T> {
    let s = x.shape();
    let ys = resize_taps::<T>(s.height, out_h);
    let xs = resize_taps::<T>(s.width, out_w);
    let out_shape = s.with_spatial(out_h, out_w);
    let mut out = Tensor::zeros(out_shape);
    let out_plane = out_h * out_w;
    for (p, dst) in out.data_mut().chunks_mut(out_plane).enumerate() {
        let src = &x.data()[p * s.plane()..(p + 1) * s.plane()];
        for (oy, ty) in ys.iter().enumerate() {
            let r0 = &src[ty.i0 * s.width..(ty.i0 + 1) * s.width];
            let r1 = &src[ty.i1 * s.width..(ty.i1 + 1) * s.width];
            let wy1 = ty.frac;
            let wy0 = T::one() - wy1;
            for (ox, tx) in xs.iter().enumerate() {
                let wx1 = tx.frac;
                let wx0 = T::one() - wx1;
                let top = wx0 * r0[tx.i0] + wx1 * r0[tx.i1];
                let bot = wx0 * r1[tx.i0] + wx1 * r1[tx.i1];
                dst[oy * out_w + ox] = (wy0 * top + wy1 * bot) * mul;
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Real>(in_shape: Shape, grad_out: &[T], out_h: usize, out_w: usize, mul: T) -> Vec<T> {
    let s = in_shape;
    let ys = resize_taps::<T>(s.height, out_h);
    let xs = resize_taps::<T>(s.width, out_w);
    let mut gx = vec![T::zero(); s.numel()];
    let out_plane = out_h * out_w;
    for (p, g) in grad_out.chunks(out_plane).enumerate() {
        let dst = &mut gx[p * s.plane()..(p + 1) * s.plane()];
        for (oy, ty) in ys.iter().enumerate() {
            let wy1 = ty.frac;
            let wy0 = T::one() - wy1;
            for (ox, tx) in xs.iter().enumerate() {
                let wx1 = tx.frac;
                let wx0 = T::one() - wx1;
                let gv = g[oy * out_w + ox] * mul;
                dst[ty.i0 * s.width + tx.i0] += gv * wy0 * wx0;
                dst[ty.i0 * s.width + tx.i1] += gv * wy0 * wx1;
                dst[ty.i1 * s.width + tx.i0] += gv * wy1 * wx0;
                dst[ty.i1 * s.width + tx.i1] += gv * wy1 * wx1;
            }
        }
    }
    gx
}

/// Source abscissa `x - d` clamped into `[0, w-1]`, with its two taps.
/// `inside` is false where the clamp is active (zero derivative in `d`).
#[inline]
fn warp_tap<T: Real>(x: usize, d: T, w: usize) -> (usize, usize, T, bool) {
    let wmax = T::from_usize(w - 1).unwrap();
    let raw = T::from_usize(x).unwrap() - d;
    let inside = raw > T::zero() && raw < wmax;
    let u = raw.max(T::zero()).min(wmax);
    let i0 = u.floor().to_usize().unwrap().min(w - 1);
    let i1 = (i0 + 1).min(w - 1);
    (i0, i1, u - T::from_usize(i0).unwrap(), inside)
}

pub(crate) fn warp_forward<T: Real>(f: &Tensor<T>, disp: &Tensor<T>) -> Tensor<T> {
    let s = f.shape();
    let mut out = Tensor::zeros(s);
    let w = s.width;
    for b in 0..s.batch {
        let dplane = disp.plane(b, 0);
        for y in 0..s.height {
            for x in 0..w {
                let (i0, i1, frac, _) = warp_tap(x, dplane[y * w + x], w);
                for c in 0..s.channels {
                    let row = s.index(b, c, y, 0);
                    let src = &f.data()[row..row + w];
                    let v = (T::one() - frac) * src[i0] + frac * src[i1];
                    out.data_mut()[row + x] = v;
                }
            }
        }
    }
    out
}

/// Returns `(grad_features, grad_disparity)`.
pub(crate) fn warp_backward<T: Real>(f: &Tensor<T>, disp: &Tensor<T>, grad_out: &[T]) -> (Vec<T>, Vec<T>) {
    let s = f.shape();
    let w = s.width;
    let mut gf = vec![T::zero(); s.numel()];
    let mut gd = vec![T::zero(); disp.len()];
    for b in 0..s.batch {
        let dplane = disp.plane(b, 0);
        for y in 0..s.height {
            for x in 0..w {
                let (i0, i1, frac, inside) = warp_tap(x, dplane[y * w + x], w);
                let mut acc = T::zero();
                for c in 0..s.channels {
                    let row = s.index(b, c, y, 0);
                    let g = grad_out[row + x];
                    gf[row + i0] += g * (T::one() - frac);
                    gf[row + i1] += g * frac;
                    if inside {
                        let src = &f.data()[row..row + w];
                        acc += g * (src[i1] - src[i0]);
                    }
                }
                // d(out)/d(d) = -(f[i1] - f[i0])
                gd[(b * s.height + y) * w + x] = -acc;
            }
        }
    }
    (gf, gd)
}

/// Cost volume: `out[b,i,y,x] = mean_c l[b,c,y,x] * r[b,c,y,x-offsets[i]]`,
/// zero where `x - offset` leaves the image.
pub(crate) fn correlate_forward<T: Real>(l: &Tensor<T>, r: &Tensor<T>, offsets: &[i32]) -> Tensor<T> {
    let s = l.shape();
    let out_shape = s.with_channels(offsets.len());
    let mut out = Tensor::zeros(out_shape);
    let inv_c = T::one() / T::from_usize(s.channels).unwrap();
    let w = s.width as isize;
    for b in 0..s.batch {
        for (i, &d) in offsets.iter().enumerate() {
            let d = d as isize;
            let (x_lo, x_hi) = (d.max(0).min(w), (w + d).min(w).max(0));
            if x_lo >= x_hi {
                continue;
            }
            let obase = out_shape.index(b, i, 0, 0);
            for c in 0..s.channels {
                for y in 0..s.height {
                    let lrow = &l.data()[s.index(b, c, y, 0)..][..s.width];
                    let rrow = &r.data()[s.index(b, c, y, 0)..][..s.width];
                    let orow = &mut out.data_mut()[obase + y * s.width..][..s.width];
                    for x in x_lo..x_hi {
                        orow[x as usize] += lrow[x as usize] * rrow[(x - d) as usize];
                    }
                }
            }
            out.data_mut()[obase..obase + s.plane()]
                .iter_mut()
                .for_each(|v| *v *= inv_c);
        }
    }
    out
}

pub(crate) fn correlate_backward<T: Real>(
    l: &Tensor<T>,
    r: &Tensor<T>,
    offsets: &[i32],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let s = l.shape();
    let out_shape = s.with_channels(offsets.len());
    let mut gl = vec![T::zero(); s.numel()];
    let mut gr = vec![T::zero(); s.numel()];
    let inv_c = T::one() / T::from_usize(s.channels).unwrap();
    let w = s.width as isize;
    for b in 0..s.batch {
        for (i, &d) in offsets.iter().enumerate() {
            let d = d as isize;
            let (x_lo, x_hi) = (d.max(0).min(w), (w + d).min(w).max(0));
            if x_lo >= x_hi {
                continue;
            }
            let gbase = out_shape.index(b, i, 0, 0);
            for c in 0..s.channels {
                for y in 0..s.height {
                    let base = s.index(b, c, y, 0);
                    let grow = &grad_out[gbase + y * s.width..][..s.width];
                    for x in x_lo..x_hi {
                        let (xu, xr) = (x as usize, (x - d) as usize);
                        let g = grow[xu] * inv_c;
                        gl[base + xu] += g * r.data()[base + xr];
                        gr[base + xr] += g * l.data()[base + xu];
                    }
                }
            }
        }
    }
    (gl, gr)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// 3x3 mean filter with reflection padding; output has the input's size.
pub(crate) fn avg_pool3_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    let ninth = T::one() / T::from_f64(9.0).unwrap();
    let (h, w) = (s.height, s.width);
    for (p, dst) in out.data_mut().chunks_mut(s.plane()).enumerate() {
        let src = &x.data()[p * s.plane()..(p + 1) * s.plane()];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for dy in -1..=1isize {
                    let sy = reflect(y as isize + dy, h);
                    for dx in -1..=1isize {
                        acc += src[sy * w + reflect(xx as isize + dx, w)];
                    }
                }
                dst[y * w + xx] = acc * ninth;
            }
        }
    }
    out
}

pub(crate) fn avg_pool3_backward<T: Real>(s: Shape, grad_out: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); s.numel()];
    let ninth = T::one() / T::from_f64(9.0).unwrap();
    let (h, w) = (s.height, s.width);
    for (p, g) in grad_out.chunks(s.plane()).enumerate() {
        let dst = &mut gx[p * s.plane()..(p + 1) * s.plane()];
        for y in 0..h {
            for xx in 0..w {
                let gv = g[y * w + xx] * ninth;
                for dy in -1..=1isize {
                    let sy = reflect(y as isize + dy, h);
                    for dx in -1..=1isize {
                        dst[sy * w + reflect(xx as isize + dx, w)] += gv;
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(2, 4), 2);
        assert_eq!(reflect(-1, 1), 0);
    }

    #[test]
    fn resize_taps_exact_halving() {
        let taps = resize_taps::<f64>(4, 2);
        assert_eq!((taps[0].i0, taps[0].i1), (0, 1));
        assert!((taps[0].frac - 0.5).abs() < 1e-12);
        assert_eq!((taps[1].i0, taps[1].i1), (2, 3));
    }
}
