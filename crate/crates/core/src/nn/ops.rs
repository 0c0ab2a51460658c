//! Forward and backward kernels on plain tensors.
//!
//! Backward functions take the forward inputs they need plus the upstream
//! gradient. Parameter gradients are accumulated (`+=`) into the caller's
//! buffers; input gradients are returned as fresh tensors.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Padding and stride of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub pad: usize,
    pub stride: usize,
}

impl ConvSpec {
    /// Stride 1 with the padding that keeps an odd `kernel` size-preserving.
    pub fn same(kernel: usize) -> Self {
        ConvSpec {
            pad: kernel / 2,
            stride: 1,
        }
    }
}

/// Upper bound on im2col buffer elements; larger images are processed in
/// bands of output rows.
const IM2COL_BUDGET: usize = 1 << 22;

struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

struct MatMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c = alpha * a * b + beta * c` with bounds checked against the slices.
fn matmul<T: Element>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!(a.rows, c.rows, "output rows");
    assert_eq!(b.cols, c.cols, "output cols");
    assert!(a.data.len() >= extent(a.rows, a.cols, a.rs, a.cs));
    assert!(b.data.len() >= extent(b.rows, b.cols, b.rs, b.cs));
    assert!(c.data.len() >= extent(c.rows, c.cols, c.rs, c.cs));
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: extents are checked above and `c` is a unique borrow.
    unsafe {
        T::gemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

fn conv_out_dims(x: Shape, w: Shape, spec: ConvSpec) -> Result<(usize, usize)> {
    if spec.stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if x.c != w.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d (input channels)",
            left: x,
            right: w,
        });
    }
    let hp = x.h + 2 * spec.pad;
    let wp = x.w + 2 * spec.pad;
    if hp < w.h || wp < w.w || x.h == 0 || x.w == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("input {x} with kernel {w} and pad {} has no output", spec.pad),
        ));
    }
    Ok(((hp - w.h) / spec.stride + 1, (wp - w.w) / spec.stride + 1))
}

fn check_bias<T: Element>(w: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if b.len() != w.shape().n {
        return Err(Error::ShapeMismatch {
            op: "bias",
            left: w.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn is_pointwise(w: Shape, spec: ConvSpec) -> bool {
    w.h == 1 && w.w == 1 && spec.pad == 0 && spec.stride == 1
}

/// Number of output rows per im2col band.
fn band_rows(k: usize, ow: usize, oh: usize) -> usize {
    (IM2COL_BUDGET / (k * ow).max(1)).clamp(1, oh)
}

/// Unfolds output rows `oy0..oy1` of one sample into `cols`, a
/// `(ci*kh*kw) x ((oy1-oy0)*ow)` row-major matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    xs: Shape,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ow: usize,
    oy0: usize,
    oy1: usize,
    cols: &mut [T],
) {
    let ncols = (oy1 - oy0) * ow;
    let (h, w) = (xs.h as isize, xs.w as isize);
    let pad = spec.pad as isize;
    let stride = spec.stride as isize;
    for j in 0..xs.c {
        let plane = &x[j * xs.h * xs.w..(j + 1) * xs.h * xs.w];
        for u in 0..kh {
            for v in 0..kw {
                let row = (j * kh + u) * kw + v;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in oy0..oy1 {
                    let out = &mut dst[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    let iy = oy as isize * stride + u as isize - pad;
                    if iy < 0 || iy >= h {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                    if stride == 1 {
                        // ix = ox + v - pad; valid ox in [lo, hi)
                        let shift = v as isize - pad;
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w - shift).clamp(0, ow as isize) as usize;
                        out[..lo].fill(T::zero());
                        if hi > lo {
                            let s0 = (lo as isize + shift) as usize;
                            out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                        out[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = ox as isize * stride + v as isize - pad;
                            *o = if ix < 0 || ix >= w {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: scatter-adds `cols` back into the input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    xs: Shape,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ow: usize,
    oy0: usize,
    oy1: usize,
    gx: &mut [T],
) {
    let ncols = (oy1 - oy0) * ow;
    let (h, w) = (xs.h as isize, xs.w as isize);
    let pad = spec.pad as isize;
    let stride = spec.stride as isize;
    for j in 0..xs.c {
        let plane = &mut gx[j * xs.h * xs.w..(j + 1) * xs.h * xs.w];
        for u in 0..kh {
            for v in 0..kw {
                let row = (j * kh + u) * kw + v;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in oy0..oy1 {
                    let iy = oy as isize * stride + u as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                    let line = &src[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    for (ox, &g) in line.iter().enumerate() {
                        let ix = ox as isize * stride + v as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation) via im2col and GEMM.
///
/// `x` is `(n, ci, h, w)`, `w` is `(co, ci, kh, kw)` and `b` holds `co` values.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    check_bias(w, b)?;
    let (oh, ow) = conv_out_dims(xs, ws, spec)?;
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = Tensor::zeros(os);
    let k = ws.c * ws.h * ws.w;
    let wmat = |d| MatRef {
        data: d,
        rows: ws.n,
        cols: k,
        rs: k,
        cs: 1,
    };
    let bias = b.data();

    let pointwise = is_pointwise(ws, spec);
    let rows = band_rows(k, ow, oh);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * rows * ow]
    };
    for i in 0..xs.n {
        let xi = x.sample(i);
        let oi = out.sample_mut(i);
        for (o, plane) in oi.chunks_exact_mut(oh * ow).enumerate() {
            plane.fill(bias[o]);
        }
        if pointwise {
            matmul(
                T::one(),
                wmat(w.data()),
                MatRef {
                    data: xi,
                    rows: k,
                    cols: oh * ow,
                    rs: oh * ow,
                    cs: 1,
                },
                T::one(),
                MatMut {
                    data: oi,
                    rows: ws.n,
                    cols: oh * ow,
                    rs: oh * ow,
                    cs: 1,
                },
            );
            continue;
        }
        let mut oy0 = 0;
        while oy0 < oh {
            let oy1 = (oy0 + rows).min(oh);
            let ncols = (oy1 - oy0) * ow;
            let buf = &mut cols[..k * ncols];
            im2col(xi, xs.with_batch(1), ws.h, ws.w, spec, ow, oy0, oy1, buf);
            matmul(
                T::one(),
                wmat(w.data()),
                MatRef {
                    data: buf,
                    rows: k,
                    cols: ncols,
                    rs: ncols,
                    cs: 1,
                },
                T::one(),
                MatMut {
                    data: &mut oi[oy0 * ow..],
                    rows: ws.n,
                    cols: ncols,
                    rs: oh * ow,
                    cs: 1,
                },
            );
            oy0 = oy1;
        }
    }
    Ok(out)
}

/// Reference convolution by direct summation. Slow; kept as the oracle for
/// the GEMM path.
pub fn conv2d_direct<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    check_bias(w, b)?;
    let (oh, ow) = conv_out_dims(xs, ws, spec)?;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for i in 0..xs.n {
        for o in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for j in 0..ws.c {
                        for u in 0..ws.h {
                            for v in 0..ws.w {
                                let iy = (oy * spec.stride + u) as isize - spec.pad as isize;
                                let ix = (ox * spec.stride + v) as isize - spec.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                    acc += w.at(o, j, u, v) * x.at(i, j, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    *out.at_mut(i, o, oy, ox) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`conv2d`]. Accumulates into `grad_w` and `grad_b` and
/// returns the gradient with respect to `x`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
    grad_w: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let (oh, ow) = conv_out_dims(xs, ws, spec)?;
    let gs = grad_out.shape();
    if gs != Shape::new(xs.n, ws.n, oh, ow) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: Shape::new(xs.n, ws.n, oh, ow),
            right: gs,
        });
    }
    grad_w.check_same_shape("conv2d_backward (grad_w)", w)?;
    if grad_b.len() != ws.n {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward (grad_b)",
            left: ws,
            right: grad_b.shape(),
        });
    }
    let k = ws.c * ws.h * ws.w;
    let mut grad_x = Tensor::zeros(xs);

    for i in 0..xs.n {
        for (o, g) in grad_out.sample(i).chunks_exact(oh * ow).enumerate() {
            grad_b.data_mut()[o] += g.iter().copied().sum::<T>();
        }
    }

    let pointwise = is_pointwise(ws, spec);
    let rows = band_rows(k, ow, oh);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * rows * ow]
    };
    let mut dcols = cols.clone();
    for i in 0..xs.n {
        let xi = x.sample(i);
        let gi = grad_out.sample(i);
        if pointwise {
            let hw = oh * ow;
            // dW += G * X^T
            matmul(
                T::one(),
                MatRef { data: gi, rows: ws.n, cols: hw, rs: hw, cs: 1 },
                MatRef { data: xi, rows: hw, cols: k, rs: 1, cs: hw },
                T::one(),
                MatMut { data: grad_w.data_mut(), rows: ws.n, cols: k, rs: k, cs: 1 },
            );
            // dX = W^T * G
            matmul(
                T::one(),
                MatRef { data: w.data(), rows: k, cols: ws.n, rs: 1, cs: k },
                MatRef { data: gi, rows: ws.n, cols: hw, rs: hw, cs: 1 },
                T::zero(),
                MatMut { data: grad_x.sample_mut(i), rows: k, cols: hw, rs: hw, cs: 1 },
            );
            continue;
        }
        let mut oy0 = 0;
        while oy0 < oh {
            let oy1 = (oy0 + rows).min(oh);
            let ncols = (oy1 - oy0) * ow;
            let buf = &mut cols[..k * ncols];
            im2col(xi, xs.with_batch(1), ws.h, ws.w, spec, ow, oy0, oy1, buf);
            let g_band = MatRef {
                data: &gi[oy0 * ow..],
                rows: ws.n,
                cols: ncols,
                rs: oh * ow,
                cs: 1,
            };
            matmul(
                T::one(),
                g_band,
                MatRef { data: buf, rows: ncols, cols: k, rs: 1, cs: ncols },
                T::one(),
                MatMut { data: grad_w.data_mut(), rows: ws.n, cols: k, rs: k, cs: 1 },
            );
            let dbuf = &mut dcols[..k * ncols];
            matmul(
                T::one(),
                MatRef { data: w.data(), rows: k, cols: ws.n, rs: 1, cs: k },
                MatRef { data: &gi[oy0 * ow..], rows: ws.n, cols: ncols, rs: oh * ow, cs: 1 },
                T::zero(),
                MatMut { data: dbuf, rows: k, cols: ncols, rs: ncols, cs: 1 },
            );
            col2im(dbuf, xs.with_batch(1), ws.h, ws.w, spec, ow, oy0, oy1, grad_x.sample_mut(i));
            oy0 = oy1;
        }
    }
    Ok(grad_x)
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad` where `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_same_shape("relu_backward", grad)?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

fn check_vector(op: &'static str, x: Shape) -> Result<()> {
    if x.h != 1 || x.w != 1 {
        return Err(Error::invalid(op, format!("expected (n, c, 1, 1), got {x}")));
    }
    Ok(())
}

/// Fully connected layer on `(n, ci, 1, 1)` with weight `(co, ci, 1, 1)`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    check_vector("linear", xs)?;
    check_bias(w, b)?;
    if ws.c != xs.c || ws.h != 1 || ws.w != 1 {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: xs,
            right: ws,
        });
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, 1, 1));
    for row in out.data_mut().chunks_exact_mut(ws.n) {
        row.copy_from_slice(b.data());
    }
    matmul(
        T::one(),
        MatRef { data: x.data(), rows: xs.n, cols: xs.c, rs: xs.c, cs: 1 },
        MatRef { data: w.data(), rows: ws.c, cols: ws.n, rs: 1, cs: ws.c },
        T::one(),
        MatMut { data: out.data_mut(), rows: xs.n, cols: ws.n, rs: ws.n, cs: 1 },
    );
    Ok(out)
}

pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_w: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if grad_out.shape() != Shape::new(xs.n, ws.n, 1, 1) {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            left: Shape::new(xs.n, ws.n, 1, 1),
            right: grad_out.shape(),
        });
    }
    grad_w.check_same_shape("linear_backward (grad_w)", w)?;
    for row in grad_out.data().chunks_exact(ws.n) {
        for (gb, &g) in grad_b.data_mut().iter_mut().zip(row) {
            *gb += g;
        }
    }
    matmul(
        T::one(),
        MatRef { data: grad_out.data(), rows: ws.n, cols: xs.n, rs: 1, cs: ws.n },
        MatRef { data: x.data(), rows: xs.n, cols: xs.c, rs: xs.c, cs: 1 },
        T::one(),
        MatMut { data: grad_w.data_mut(), rows: ws.n, cols: ws.c, rs: ws.c, cs: 1 },
    );
    let mut grad_x = Tensor::zeros(xs);
    matmul(
        T::one(),
        MatRef { data: grad_out.data(), rows: xs.n, cols: ws.n, rs: ws.n, cs: 1 },
        MatRef { data: w.data(), rows: ws.n, cols: ws.c, rs: ws.c, cs: 1 },
        T::zero(),
        MatMut { data: grad_x.data_mut(), rows: xs.n, cols: xs.c, rs: xs.c, cs: 1 },
    );
    Ok(grad_x)
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / T::from_f64_lossy(s.plane() as f64);
    let data = x
        .data()
        .chunks_exact(s.plane().max(1))
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

/// Spreads each pooled gradient uniformly over its `h*w` plane.
pub fn global_avg_pool_backward<T: Element>(input_shape: Shape, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if grad.shape() != Shape::new(input_shape.n, input_shape.c, 1, 1) {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            left: input_shape,
            right: grad.shape(),
        });
    }
    let inv = T::one() / T::from_f64_lossy(input_shape.plane() as f64);
    let mut out = Tensor::zeros(input_shape);
    for (plane, &g) in out
        .data_mut()
        .chunks_exact_mut(input_shape.plane())
        .zip(grad.data())
    {
        plane.fill(g * inv);
    }
    Ok(out)
}

/// Row-wise softmax over the channel axis of `(n, k, 1, 1)`.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    check_vector("softmax", s)?;
    if s.c == 0 {
        return Err(Error::invalid("softmax", "empty rows"));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(s.c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Softmax Jacobian-vector product from the forward output `y`:
/// `dx = y * (g - <g, y>)` per row.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    y.check_same_shape("softmax_backward", grad)?;
    let k = y.shape().c;
    let mut out = Tensor::zeros(y.shape());
    for ((o, yr), gr) in out
        .data_mut()
        .chunks_exact_mut(k)
        .zip(y.data().chunks_exact(k))
        .zip(grad.data().chunks_exact(k))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &g) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (g - dot);
        }
    }
    Ok(out)
}

/// `(n, c*s^2, h, w) -> (n, c, h*s, w*s)` with
/// `out[i, j, y*s+dy, x*s+dx] = in[i, j*s^2 + dy*s + dx, y, x]`.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if s == 0 || xs.c % (s * s) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("{} channels not divisible by scale^2 = {}", xs.c, s * s),
        ));
    }
    let c = xs.c / (s * s);
    let os = Shape::new(xs.n, c, xs.h * s, xs.w * s);
    let mut out = Tensor::zeros(os);
    for i in 0..xs.n {
        for j in 0..c {
            for dy in 0..s {
                for dx in 0..s {
                    let src_c = j * s * s + dy * s + dx;
                    for y in 0..xs.h {
                        let src = &x.data()[x.offset(i, src_c, y, 0)..][..xs.w];
                        let row = out.offset(i, j, y * s + dy, 0);
                        let dst = &mut out.data_mut()[row..row + os.w];
                        for (xx, &v) in src.iter().enumerate() {
                            dst[xx * s + dx] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse permutation of [`pixel_shuffle`]; also its backward.
pub fn pixel_unshuffle<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if s == 0 || xs.h % s != 0 || xs.w % s != 0 {
        return Err(Error::invalid(
            "pixel_unshuffle",
            format!("spatial dims of {xs} not divisible by {s}"),
        ));
    }
    let (h, w) = (xs.h / s, xs.w / s);
    let os = Shape::new(xs.n, xs.c * s * s, h, w);
    let mut out = Tensor::zeros(os);
    for i in 0..xs.n {
        for j in 0..xs.c {
            for dy in 0..s {
                for dx in 0..s {
                    let dst_c = j * s * s + dy * s + dx;
                    for y in 0..h {
                        let src = &x.data()[x.offset(i, j, y * s + dy, 0)..][..xs.w];
                        let row = out.offset(i, dst_c, y, 0);
                        let dst = &mut out.data_mut()[row..row + w];
                        for (xx, d) in dst.iter_mut().enumerate() {
                            *d = src[xx * s + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `out[i] = x[i] * weights[i, column]`, one scalar per sample.
pub fn scale_samples<T: Element>(x: &Tensor<T>, weights: &Tensor<T>, column: usize) -> Result<Tensor<T>> {
    check_sample_weights(x, weights, column)?;
    let k = weights.shape().c;
    let mut out = x.clone();
    for i in 0..x.shape().n {
        let g = weights.data()[i * k + column];
        out.sample_mut(i).iter_mut().for_each(|v| *v *= g);
    }
    Ok(out)
}

/// Returns `(grad_x, grad_weights)` for [`scale_samples`].
pub fn scale_samples_backward<T: Element>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    column: usize,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_sample_weights(x, weights, column)?;
    x.check_same_shape("scale_samples_backward", grad)?;
    let k = weights.shape().c;
    let mut gx = grad.clone();
    let mut gw = Tensor::zeros(weights.shape());
    for i in 0..x.shape().n {
        let wv = weights.data()[i * k + column];
        gx.sample_mut(i).iter_mut().for_each(|v| *v *= wv);
        gw.data_mut()[i * k + column] = x
            .sample(i)
            .iter()
            .zip(grad.sample(i))
            .map(|(&a, &b)| a * b)
            .sum();
    }
    Ok((gx, gw))
}

fn check_sample_weights<T: Element>(x: &Tensor<T>, weights: &Tensor<T>, column: usize) -> Result<()> {
    let ws = weights.shape();
    check_vector("scale_samples", ws)?;
    if ws.n != x.shape().n || column >= ws.c {
        return Err(Error::ShapeMismatch {
            op: "scale_samples",
            left: x.shape(),
            right: ws,
        });
    }
    Ok(())
}

/// `out = base; out[indices[k]] += part[k]`.
pub fn scatter_add_samples<T: Element>(base: &Tensor<T>, part: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let bs = base.shape();
    if part.shape() != bs.with_batch(indices.len()) {
        return Err(Error::ShapeMismatch {
            op: "scatter_add_samples",
            left: bs,
            right: part.shape(),
        });
    }
    let mut out = base.clone();
    for (k, &i) in indices.iter().enumerate() {
        if i >= bs.n {
            return Err(Error::invalid(
                "scatter_add_samples",
                format!("sample index {i} out of range for {bs}"),
            ));
        }
        for (o, &p) in out.sample_mut(i).iter_mut().zip(part.sample(k)) {
            *o += p;
        }
    }
    Ok(out)
}

/// Backward of [`Tensor::gather_samples`]: scatter-add into a zero tensor.
pub fn gather_samples_backward<T: Element>(input_shape: Shape, grad: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    scatter_add_samples(&Tensor::zeros(input_shape), grad, indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn rand_t(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
        Tensor::uniform(shape, -1.0, 1.0, rng)
    }

    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        // independent 7-deep loop over a physically padded copy of x
        let xs = x.shape();
        let ws = w.shape();
        let (hp, wp) = (xs.h + 2 * pad, xs.w + 2 * pad);
        let mut padded = vec![0.0; xs.n * xs.c * hp * wp];
        for i in 0..xs.n {
            for j in 0..xs.c {
                for y in 0..xs.h {
                    for x_ in 0..xs.w {
                        padded[((i * xs.c + j) * hp + y + pad) * wp + x_ + pad] = x.at(i, j, y, x_);
                    }
                }
            }
        }
        let (oh, ow) = (hp - ws.h + 1, wp - ws.w + 1);
        Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |i, o, y, x_| {
            let mut acc = b.data()[o];
            for j in 0..ws.c {
                for u in 0..ws.h {
                    for v in 0..ws.w {
                        acc += w.at(o, j, u, v) * padded[((i * xs.c + j) * hp + y + u) * wp + x_ + v];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_scalar_scaling() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 2.0);
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let y = conv2d(&x, &w, &b, ConvSpec { pad: 0, stride: 1 }).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = Rng::new(1);
        let x = rand_t(Shape::new(1, 1, 5, 4), &mut rng);
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        *w.at_mut(0, 0, 1, 1) = 1.0;
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert_eq!(conv2d(&x, &w, &b, ConvSpec::same(3)).unwrap(), x);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = Rng::new(2);
        let x = rand_t(Shape::new(2, 3, 5, 5), &mut rng);
        let w = rand_t(Shape::new(4, 3, 3, 3), &mut rng);
        let b = rand_t(Shape::new(1, 4, 1, 1), &mut rng);
        let want = conv_oracle(&x, &w, &b, 1);
        let fast = conv2d(&x, &w, &b, ConvSpec::same(3)).unwrap();
        let direct = conv2d_direct(&x, &w, &b, ConvSpec::same(3)).unwrap();
        assert!(fast.max_abs_diff(&want).unwrap() < 1e-12);
        assert!(direct.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn conv_fast_path_agrees_with_direct_in_f32() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f32>::uniform(Shape::new(2, 16, 9, 7), -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(Shape::new(8, 16, 3, 3), -0.2, 0.2, &mut rng);
        let b = Tensor::<f32>::uniform(Shape::new(1, 8, 1, 1), -1.0, 1.0, &mut rng);
        for spec in [ConvSpec::same(3), ConvSpec { pad: 0, stride: 1 }, ConvSpec { pad: 1, stride: 2 }] {
            let fast = conv2d(&x, &w, &b, spec).unwrap();
            let direct = conv2d_direct(&x, &w, &b, spec).unwrap();
            assert!(fast.max_abs_diff(&direct).unwrap() < 1e-5, "{spec:?}");
        }
        let w1 = Tensor::<f32>::uniform(Shape::new(8, 16, 1, 1), -0.2, 0.2, &mut rng);
        let fast = conv2d(&x, &w1, &b, ConvSpec::same(1)).unwrap();
        let direct = conv2d_direct(&x, &w1, &b, ConvSpec::same(1)).unwrap();
        assert!(fast.max_abs_diff(&direct).unwrap() < 1e-5);
    }

    #[test]
    fn conv_banding_matches_unbanded() {
        // wide enough that the im2col budget forces several bands
        let mut rng = Rng::new(4);
        let x = Tensor::<f32>::uniform(Shape::new(1, 64, 80, 1100), 0.0, 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(Shape::new(2, 64, 3, 3), -0.1, 0.1, &mut rng);
        let b = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 1));
        assert!(band_rows(64 * 9, 1100, 80) < 80);
        let fast = conv2d(&x, &w, &b, ConvSpec::same(3)).unwrap();
        let sub = x.clone();
        let direct = conv2d_direct(&sub, &w, &b, ConvSpec::same(3)).unwrap();
        assert!(fast.max_abs_diff(&direct).unwrap() < 1e-4);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(2, 4, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 1));
        assert!(conv2d(&x, &w, &b, ConvSpec::same(3)).is_err());
        let w = Tensor::<f32>::zeros(Shape::new(2, 3, 5, 5));
        assert!(conv2d(&x, &w, &b, ConvSpec { pad: 0, stride: 1 }).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::full(x.shape(), 1.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
        let mut rng = Rng::new(5);
        let r = rand_t(Shape::new(2, 3, 4, 4), &mut rng);
        let y = relu(&r);
        for (a, b) in r.data().iter().zip(y.data()) {
            assert_eq!(*b, if *a > 0.0 { *a } else { 0.0 });
        }
    }

    #[test]
    fn linear_cases() {
        let mut rng = Rng::new(6);
        let x = rand_t(Shape::new(3, 2, 1, 1), &mut rng);
        let eye = Tensor::from_fn(Shape::new(2, 2, 1, 1), |o, j, _, _| if o == j { 1.0 } else { 0.0 });
        let zb = Tensor::zeros(Shape::new(1, 2, 1, 1));
        assert_eq!(linear(&x, &eye, &zb).unwrap(), x);
        let zw = Tensor::zeros(Shape::new(2, 2, 1, 1));
        let b = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let y = linear(&x, &zw, &b).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[1.0, 2.0]);
        }
        let x = rand_t(Shape::new(3, 5, 1, 1), &mut rng);
        let w = rand_t(Shape::new(4, 5, 1, 1), &mut rng);
        let b = rand_t(Shape::new(1, 4, 1, 1), &mut rng);
        let y = linear(&x, &w, &b).unwrap();
        for i in 0..3 {
            for o in 0..4 {
                let mut acc = b.data()[o];
                for j in 0..5 {
                    acc += w.at(o, j, 0, 0) * x.at(i, j, 0, 0);
                }
                assert!((y.at(i, o, 0, 0) - acc).abs() < 1e-12);
            }
        }
        assert!(linear(&Tensor::zeros(Shape::new(1, 5, 2, 1)), &w, &b).is_err());
    }

    #[test]
    fn pooling_cases() {
        let c = Tensor::<f64>::full(Shape::new(1, 1, 3, 5), 7.0);
        assert!((global_avg_pool(&c).data()[0] - 7.0).abs() < 1e-12);
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
        let mut rng = Rng::new(7);
        let r = rand_t(Shape::new(2, 64, 8, 8), &mut rng);
        let p = global_avg_pool(&r);
        for i in 0..2 {
            for j in 0..64 {
                let mut s = 0.0;
                for y in 0..8 {
                    for x in 0..8 {
                        s += r.at(i, j, y, x);
                    }
                }
                assert!((p.at(i, j, 0, 0) - s / 64.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax(&x).unwrap().data(), &[0.5, 0.5]);
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.0f64, 3f64.ln()]).unwrap();
        let y = softmax(&x).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        let bad = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.0f64, f64::NAN]).unwrap();
        assert!(softmax(&bad).is_err());
    }

    #[test]
    fn pixel_shuffle_index_formula() {
        let x = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(pixel_shuffle(&Tensor::<f64>::zeros(Shape::new(1, 6, 2, 2)), 2).is_err());
    }

    #[test]
    fn pixel_shuffle_inverse_round_trip() {
        let mut rng = Rng::new(8);
        let x = rand_t(Shape::new(2, 12, 3, 3), &mut rng);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert!((y.sum_sq() - x.sum_sq()).abs() < 1e-12);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
        // general element check against the closed-form index map
        for j in 0..3 {
            for yy in 0..6 {
                for xx in 0..6 {
                    let src = j * 4 + (yy % 2) * 2 + xx % 2;
                    assert_eq!(y.at(1, j, yy, xx), x.at(1, src, yy / 2, xx / 2));
                }
            }
        }
    }

    #[test]
    fn scatter_and_gather_are_adjoint() {
        let mut rng = Rng::new(9);
        let x = rand_t(Shape::new(4, 2, 2, 2), &mut rng);
        let idx = [3, 1];
        let g = x.gather_samples(&idx).unwrap();
        let part = rand_t(g.shape(), &mut rng);
        let back = gather_samples_backward(x.shape(), &part, &idx).unwrap();
        assert!((g.dot(&part).unwrap() - x.dot(&back).unwrap()).abs() < 1e-12);
    }

    /// Directional-derivative consistency of a forward/backward pair:
    /// `<g, f(x + d) - f(x - d)> / 2` against `<backward(g), d>`.
    fn check_directional(
        x: &Tensor<f64>,
        f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
        back: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
        rng: &mut Rng,
    ) {
        let y = f(x);
        let g = rand_t(y.shape(), rng);
        let dir = rand_t(x.shape(), rng);
        let norm = dir.sum_sq().sqrt();
        let delta = dir.scale(1e-6 / norm);
        let plus = f(&x.add(&delta).unwrap());
        let minus = f(&x.sub(&delta).unwrap());
        let numeric = g.dot(&plus.sub(&minus).unwrap()).unwrap() / 2.0;
        let analytic = back(x, &g).dot(&delta).unwrap();
        let rel = (numeric - analytic).abs() / analytic.abs().max(1e-12);
        assert!(rel < 1e-6, "numeric {numeric} analytic {analytic} rel {rel}");
    }

    #[test]
    fn directional_derivatives_of_every_layer() {
        let mut rng = Rng::new(10);
        let x = rand_t(Shape::new(2, 3, 5, 4), &mut rng);
        let w = rand_t(Shape::new(4, 3, 3, 3), &mut rng);
        let b = rand_t(Shape::new(1, 4, 1, 1), &mut rng);
        let spec = ConvSpec::same(3);
        check_directional(
            &x,
            |x| conv2d(x, &w, &b, spec).unwrap(),
            |x, g| {
                let mut gw = Tensor::zeros(w.shape());
                let mut gb = Tensor::zeros(b.shape());
                conv2d_backward(x, &w, g, spec, &mut gw, &mut gb).unwrap()
            },
            &mut rng,
        );
        // the same pair viewed as a function of the weights
        check_directional(
            &w,
            |w| conv2d(&x, w, &b, spec).unwrap(),
            |w, g| {
                let mut gw = Tensor::zeros(w.shape());
                let mut gb = Tensor::zeros(b.shape());
                conv2d_backward(&x, w, g, spec, &mut gw, &mut gb).unwrap();
                gw
            },
            &mut rng,
        );
        let w1 = rand_t(Shape::new(4, 3, 1, 1), &mut rng);
        let spec1 = ConvSpec::same(1);
        check_directional(
            &x,
            |x| conv2d(x, &w1, &b, spec1).unwrap(),
            |x, g| {
                let mut gw = Tensor::zeros(w1.shape());
                let mut gb = Tensor::zeros(b.shape());
                conv2d_backward(x, &w1, g, spec1, &mut gw, &mut gb).unwrap()
            },
            &mut rng,
        );
        // keep the relu probe away from its kink
        let xr = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check_directional(&xr, relu, |x, g| relu_backward(x, g).unwrap(), &mut rng);
        check_directional(&x, global_avg_pool, |x, g| global_avg_pool_backward(x.shape(), g).unwrap(), &mut rng);
        let v = rand_t(Shape::new(3, 5, 1, 1), &mut rng);
        let lw = rand_t(Shape::new(2, 5, 1, 1), &mut rng);
        let lb = rand_t(Shape::new(1, 2, 1, 1), &mut rng);
        check_directional(
            &v,
            |v| linear(v, &lw, &lb).unwrap(),
            |v, g| {
                let mut gw = Tensor::zeros(lw.shape());
                let mut gb = Tensor::zeros(lb.shape());
                linear_backward(v, &lw, g, &mut gw, &mut gb).unwrap()
            },
            &mut rng,
        );
        check_directional(
            &v,
            |v| softmax(v).unwrap(),
            |v, g| softmax_backward(&softmax(v).unwrap(), g).unwrap(),
            &mut rng,
        );
        let ps = rand_t(Shape::new(1, 8, 3, 2), &mut rng);
        check_directional(
            &ps,
            |p| pixel_shuffle(p, 2).unwrap(),
            |_, g| pixel_unshuffle(g, 2).unwrap(),
            &mut rng,
        );
        let weights = rand_t(Shape::new(2, 2, 1, 1), &mut rng);
        check_directional(
            &x,
            |x| scale_samples(x, &weights, 1).unwrap(),
            |x, g| scale_samples_backward(x, &weights, 1, g).unwrap().0,
            &mut rng,
        );
        check_directional(
            &weights,
            |wt| scale_samples(&x, wt, 1).unwrap(),
            |wt, g| scale_samples_backward(&x, wt, 1, g).unwrap().1,
            &mut rng,
        );
    }

    #[test]
    fn conv_backward_accumulates() {
        let mut rng = Rng::new(11);
        let x = rand_t(Shape::new(1, 2, 4, 4), &mut rng);
        let w = rand_t(Shape::new(3, 2, 3, 3), &mut rng);
        let g = rand_t(Shape::new(1, 3, 4, 4), &mut rng);
        let mut gw = Tensor::zeros(w.shape());
        let mut gb = Tensor::zeros(Shape::new(1, 3, 1, 1));
        conv2d_backward(&x, &w, &g, ConvSpec::same(3), &mut gw, &mut gb).unwrap();
        let (once_w, once_b) = (gw.clone(), gb.clone());
        conv2d_backward(&x, &w, &g, ConvSpec::same(3), &mut gw, &mut gb).unwrap();
        assert_eq!(gw, once_w.scale(2.0));
        assert_eq!(gb, once_b.scale(2.0));
    }

    proptest! {
        #[test]
        fn same_conv_preserves_spatial_dims(h in 1usize..9, w in 1usize..9) {
            let x = Tensor::<f32>::zeros(Shape::new(1, 2, h, w));
            let k = Tensor::<f32>::zeros(Shape::new(3, 2, 3, 3));
            let b = Tensor::<f32>::zeros(Shape::new(1, 3, 1, 1));
            let y = conv2d(&x, &k, &b, ConvSpec::same(3)).unwrap();
            prop_assert_eq!(y.shape(), Shape::new(1, 3, h, w));
        }

        #[test]
        fn pixel_shuffle_is_a_bijection(seed in any::<u64>(), s in 1usize..4) {
            let mut rng = Rng::new(seed);
            let x = rand_t(Shape::new(1, 2 * s * s, 2, 3), &mut rng);
            let y = pixel_shuffle(&x, s).unwrap();
            let mut a = x.data().to_vec();
            let mut b = y.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn softmax_rows_are_distributions(seed in any::<u64>(), k in 1usize..6) {
            let mut rng = Rng::new(seed);
            let x = Tensor::<f64>::uniform(Shape::new(3, k, 1, 1), -20.0, 20.0, &mut rng);
            let y = softmax(&x).unwrap();
            for row in y.data().chunks(k) {
                prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
