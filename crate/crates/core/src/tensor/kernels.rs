//! Raw numeric kernels over flat NCHW buffers. Shapes are validated by the
//! tape ops before these are called.

use rayon::prelude::*;

use super::Elem;

/// Samples per weight-gradient partial sum. Fixed so the reduction order
/// does not depend on the number of worker threads.
const GRAD_GROUP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.col_cols()
    }

    /// 1x1 stride-1 unpadded convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c = alpha * a·b + beta * c` for row-major `a: m×k`, `b: k×n`, `c: m×n`,
/// with explicit (row, column) strides so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Elem,
    a: &[Elem],
    a_strides: (isize, isize),
    b: &[Elem],
    b_strides: (isize, isize),
    beta: Elem,
    c: &mut [Elem],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(extent(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
    assert!(extent(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
    assert!(m * n <= c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every index the kernel can touch, and
    // `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as gemm_raw;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as gemm_raw;

fn im2col(x: &[Elem], g: &Conv2dGeom, cols: &mut [Elem]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = g.padding as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - p;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (xo, v) in line.iter_mut().enumerate() {
                        let ix = (xo * g.stride + kj) as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[Elem], g: &Conv2dGeom, dx: &mut [Elem]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = g.padding as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for xo in 0..ow {
                        let ix = (xo * g.stride + kj) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            line[ix as usize] += src[y * ow + xo];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[Elem], w: &[Elem], g: &Conv2dGeom, batch: usize) -> Vec<Elem> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; batch * out_len];
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each_init(
            || vec![0.0; if g.is_pointwise() { 0 } else { rows * cols_n }],
            |cols, (n, y)| {
                let xn = &x[n * in_len..(n + 1) * in_len];
                let cols: &[Elem] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(xn, g, cols);
                    cols
                };
                gemm(
                    g.out_channels,
                    rows,
                    cols_n,
                    1.0,
                    w,
                    (rows as isize, 1),
                    cols,
                    (cols_n as isize, 1),
                    0.0,
                    y,
                );
            },
        );
    out
}

/// Gradient of the convolution with respect to its input.
pub(crate) fn conv2d_backward_input(
    dy: &[Elem],
    w: &[Elem],
    g: &Conv2dGeom,
    batch: usize,
) -> Vec<Elem> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut dx = vec![0.0; batch * in_len];
    dx.par_chunks_mut(in_len)
        .enumerate()
        .for_each_init(
            || vec![0.0; rows * cols_n],
            |dcols, (n, dxn)| {
                let dyn_ = &dy[n * out_len..(n + 1) * out_len];
                let target: &mut [Elem] = if g.is_pointwise() { dxn } else { dcols };
                // dcols = wᵀ · dy
                gemm(
                    rows,
                    g.out_channels,
                    cols_n,
                    1.0,
                    w,
                    (1, rows as isize),
                    dyn_,
                    (cols_n as isize, 1),
                    0.0,
                    target,
                );
                if !g.is_pointwise() {
                    col2im(dcols, g, dxn);
                }
            },
        );
    dx
}

/// Gradient of the convolution with respect to its weight.
pub(crate) fn conv2d_backward_weight(
    dy: &[Elem],
    x: &[Elem],
    g: &Conv2dGeom,
    batch: usize,
) -> Vec<Elem> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let wlen = g.out_channels * rows;
    let groups: Vec<usize> = (0..batch).step_by(GRAD_GROUP).collect();
    let partials: Vec<Vec<Elem>> = groups
        .par_iter()
        .map(|&start| {
            let mut dw = vec![0.0; wlen];
            let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * cols_n }];
            for n in start..(start + GRAD_GROUP).min(batch) {
                let xn = &x[n * in_len..(n + 1) * in_len];
                let colsr: &[Elem] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(xn, g, &mut cols);
                    &cols
                };
                // dw += dy · colsᵀ
                gemm(
                    g.out_channels,
                    cols_n,
                    rows,
                    1.0,
                    &dy[n * out_len..(n + 1) * out_len],
                    (cols_n as isize, 1),
                    colsr,
                    (1, cols_n as isize),
                    1.0,
                    &mut dw,
                );
            }
            dw
        })
        .collect();
    let mut dw = vec![0.0; wlen];
    for p in &partials {
        dw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    dw
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Clipped window `[lo, hi)` along one axis.
    fn window(&self, o: usize, extent: usize) -> (usize, usize) {
        let lo = (o * self.stride) as isize - self.padding as isize;
        let hi = (lo + self.kernel as isize).min(extent as isize);
        (lo.max(0) as usize, hi.max(0) as usize)
    }
}

/// Average pooling whose divisor counts only in-bounds cells.
pub(crate) fn avg_pool_forward(x: &[Elem], g: &PoolGeom, batch: usize) -> Vec<Elem> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; batch * g.channels * oh * ow];
    for (plane, dst) in x
        .chunks(g.height * g.width)
        .zip(out.chunks_mut(oh * ow))
    {
        for y in 0..oh {
            let (r0, r1) = g.window(y, g.height);
            for xo in 0..ow {
                let (c0, c1) = g.window(xo, g.width);
                let mut s = 0.0;
                for r in r0..r1 {
                    s += plane[r * g.width + c0..r * g.width + c1].iter().sum::<Elem>();
                }
                let count = ((r1 - r0) * (c1 - c0)) as Elem;
                dst[y * ow + xo] = s / count;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dy: &[Elem], g: &PoolGeom, batch: usize) -> Vec<Elem> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = vec![0.0; batch * g.channels * g.height * g.width];
    for (plane, src) in dx
        .chunks_mut(g.height * g.width)
        .zip(dy.chunks(oh * ow))
    {
        for y in 0..oh {
            let (r0, r1) = g.window(y, g.height);
            for xo in 0..ow {
                let (c0, c1) = g.window(xo, g.width);
                let share = src[y * ow + xo] / ((r1 - r0) * (c1 - c0)) as Elem;
                for r in r0..r1 {
                    plane[r * g.width + c0..r * g.width + c1]
                        .iter_mut()
                        .for_each(|v| *v += share);
                }
            }
        }
    }
    dx
}
