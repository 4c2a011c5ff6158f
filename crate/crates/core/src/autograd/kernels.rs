//! Convolution, batch-norm and pooling kernels with their adjoints.
//!
//! Convolutions go through im2col and a single gemm per batch item. The
//! transposed convolution reuses the same column layout: its forward pass is
//! the data-adjoint of an ordinary convolution from the (larger) output grid
//! down to the input grid.

use crate::scalar::Scalar;

/// Spatial geometry of a square-kernel convolution mapping `in` to `out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a convolution over an `h x w` input, or `None` when the
    /// kernel does not fit.
    pub fn conv(h: usize, w: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<Self> {
        let span = dilation * (kernel - 1) + 1;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < span || pw < span {
            return None;
        }
        Some(Self {
            kernel,
            stride,
            pad,
            dilation,
            in_h: h,
            in_w: w,
            out_h: (ph - span) / stride + 1,
            out_w: (pw - span) / stride + 1,
        })
    }

    /// Geometry of a transposed convolution from `h x w`, expressed as the
    /// ordinary convolution it is the adjoint of (large grid -> `h x w`).
    pub fn transposed(h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let big_h = (h - 1) * stride + kernel;
        let big_w = (w - 1) * stride + kernel;
        if big_h < 2 * pad || big_w < 2 * pad {
            return None;
        }
        let g = Self::conv(big_h - 2 * pad, big_w - 2 * pad, kernel, stride, pad, 1)?;
        (g.out_h == h && g.out_w == w).then_some(g)
    }

    pub fn col_rows(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one `c x in_h x in_w` image into `(c*k*k) x (out_h*out_w)` columns.
pub fn im2col<T: Scalar>(img: &[T], channels: usize, g: &ConvGeom, cols: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    debug_assert_eq!(cols.len(), channels * k * k * ncols);
    let mut row = 0;
    for c in 0..channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let off_y = (ki * g.dilation) as isize - g.pad as isize;
                let off_x = (kj * g.dilation) as isize - g.pad as isize;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride) as isize + off_y;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + off_x;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image grid.
pub fn col2im<T: Scalar>(cols: &[T], channels: usize, g: &ConvGeom, img: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * ncols..(row + 1) * ncols];
                let off_y = (ki * g.dilation) as isize - g.pad as isize;
                let off_x = (kj * g.dilation) as isize - g.pad as isize;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride) as isize + off_y;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + off_x;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolution forward. `w` is `cout x cin x k x k`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(cin), g.col_cols());
    let in_sz = cin * g.in_h * g.in_w;
    let out_sz = cout * ncols;
    let mut out = vec![T::zero(); n * out_sz];
    let mut cols = vec![T::zero(); rows * ncols];
    for b in 0..n {
        im2col(&x[b * in_sz..(b + 1) * in_sz], cin, g, &mut cols);
        let y = &mut out[b * out_sz..(b + 1) * out_sz];
        T::gemm(cout, rows, ncols, T::one(), w, false, &cols, false, T::zero(), y);
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                y[o * ncols..(o + 1) * ncols].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a convolution. Any of the outputs can be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    g: &ConvGeom,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (rows, ncols) = (g.col_rows(cin), g.col_cols());
    let in_sz = cin * g.in_h * g.in_w;
    let out_sz = cout * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    for b in 0..n {
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], cin, g, &mut cols);
            T::gemm(cout, ncols, rows, T::one(), dyb, false, &cols, true, T::one(), dw);
        }
        if let Some(db) = db.as_deref_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dyb[o * ncols..(o + 1) * ncols].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(rows, cout, ncols, T::one(), w, true, dyb, false, T::zero(), &mut cols);
            col2im(&cols, cin, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
}

/// Transposed convolution forward. `w` is `cin x cout x k x k`; `g` is the
/// geometry of the adjoint convolution (output grid -> input grid).
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(cout), g.col_cols());
    let in_sz = cin * ncols;
    let out_plane = g.in_h * g.in_w;
    let out_sz = cout * out_plane;
    let mut out = vec![T::zero(); n * out_sz];
    let mut cols = vec![T::zero(); rows * ncols];
    for b in 0..n {
        T::gemm(rows, cin, ncols, T::one(), w, true, &x[b * in_sz..(b + 1) * in_sz], false, T::zero(), &mut cols);
        let y = &mut out[b * out_sz..(b + 1) * out_sz];
        col2im(&cols, cout, g, y);
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                y[o * out_plane..(o + 1) * out_plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    g: &ConvGeom,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (rows, ncols) = (g.col_rows(cout), g.col_cols());
    let in_sz = cin * ncols;
    let out_plane = g.in_h * g.in_w;
    let out_sz = cout * out_plane;
    let mut cols = vec![T::zero(); rows * ncols];
    for b in 0..n {
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        im2col(dyb, cout, g, &mut cols);
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(cin, rows, ncols, T::one(), w, false, &cols, false, T::one(), &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
        if let Some(dw) = dw.as_deref_mut() {
            T::gemm(cin, ncols, rows, T::one(), &x[b * in_sz..(b + 1) * in_sz], false, &cols, true, T::one(), dw);
        }
        if let Some(db) = db.as_deref_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dyb[o * out_plane..(o + 1) * out_plane].iter().copied().sum::<T>();
            }
        }
    }
}

/// Per-channel mean and biased variance over the N, H, W axes.
pub fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * plane).expect("count fits");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += x[off..off + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            v += x[off..off + plane].iter().map(|&t| (t - m) * (t - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// 2x2 max pooling with stride 2. Returns the output and the flat argmax
/// index of every output cell.
pub fn max_pool2<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
