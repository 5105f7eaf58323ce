//! Raw numeric kernels shared by the tape ops.

use crate::tensor::Shape;

/// Row-major matrix view: `rows × cols` with explicit strides, so transposed
/// operands need no copy.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `out ← a·b + beta·out`, `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    // SAFETY: every element addressed by the (rows, cols, strides) triples lies
    // inside the borrowed slices (checked above), and `out` is exclusively
    // borrowed with exactly a.rows * b.cols elements in row-major order.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Unfolds zero-padded `k³` neighbourhoods into a `(C·k³) × (H·W·D)` matrix.
pub(crate) fn im2col(x: &[f64], shape: Shape, k: usize) -> Vec<f64> {
    let (h, w, d) = (shape.h, shape.w, shape.d);
    let n = shape.spatial();
    let kvol = k * k * k;
    let pad = (k / 2) as isize;
    let mut cols = vec![0.0; shape.c * kvol * n];
    for c in 0..shape.c {
        let src = &x[c * n..(c + 1) * n];
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let t = (a * k + b) * k + e;
                    let row = &mut cols[(c * kvol + t) * n..(c * kvol + t + 1) * n];
                    let (da, db, de) = (a as isize - pad, b as isize - pad, e as isize - pad);
                    for i in 0..h {
                        let si = i as isize + da;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + db;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let dst_base = (i * w + j) * d;
                            let src_base = (si as usize * w + sj as usize) * d;
                            let lo = (-de).max(0) as usize;
                            let hi = (d as isize - de).min(d as isize).max(0) as usize;
                            for l in lo..hi {
                                row[dst_base + l] = src[(src_base as isize + l as isize + de) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im_add(cols: &[f64], shape: Shape, k: usize, dx: &mut [f64]) {
    let (h, w, d) = (shape.h, shape.w, shape.d);
    let n = shape.spatial();
    let kvol = k * k * k;
    let pad = (k / 2) as isize;
    for c in 0..shape.c {
        let dst = &mut dx[c * n..(c + 1) * n];
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let t = (a * k + b) * k + e;
                    let row = &cols[(c * kvol + t) * n..(c * kvol + t + 1) * n];
                    let (da, db, de) = (a as isize - pad, b as isize - pad, e as isize - pad);
                    for i in 0..h {
                        let si = i as isize + da;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + db;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let src_base = (i * w + j) * d;
                            let dst_base = (si as usize * w + sj as usize) * d;
                            let lo = (-de).max(0) as usize;
                            let hi = (d as isize - de).min(d as isize).max(0) as usize;
                            for l in lo..hi {
                                dst[(dst_base as isize + l as isize + de) as usize] += row[src_base + l];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the first maximal element (scan order wins ties).
#[inline]
pub(crate) fn argmax_first(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 || i == 0 {
            best = (i, v);
        }
    }
    best
}

/// Gap between the largest and second-largest value; `INFINITY` for one value.
pub(crate) fn top2_gap(values: impl Iterator<Item = f64>) -> f64 {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for v in values {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    if second == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        first - second
    }
}
