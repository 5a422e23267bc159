//! Dense kernels shared by the tape ops: GEMM, im2col/col2im, softmax.

use super::Real;

/// C = alpha * A(op) * B(op) + beta * C for row-major buffers.
///
/// `a` is (m, k) and `b` is (k, n) after the optional transposes.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    trans_a: bool,
    b: &[Real],
    trans_b: bool,
    beta: Real,
    c: &mut [Real],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        #[cfg(feature = "single-precision")]
        matrixmultiply::sgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(),
            n as isize, 1,
        );
        #[cfg(not(feature = "single-precision"))]
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(),
            n as isize, 1,
        );
    }
}

/// Output spatial extent of a cross-correlation.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Unrolls one (c_in, h, w) image into a (c_in*kh*kw, oh*ow) column matrix.
///
/// Out-of-bounds taps read as zero, which realizes zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[Real],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    cols: &mut [Real],
) {
    let oh = conv_out_len(h, kh, stride, padding);
    let ow = conv_out_len(w, kw, stride, padding);
    debug_assert_eq!(cols.len(), c_in * kh * kw * oh * ow);
    let mut row = 0usize;
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let out_row = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + u) as isize - padding as isize;
                    let base = oy * ow;
                    if iy < 0 || iy >= h as isize {
                        out_row[base..base + ow].fill(0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + v) as isize - padding as isize;
                        out_row[base + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            plane[iy * w + ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back onto a (c_in, h, w) image.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[Real],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    x: &mut [Real],
) {
    let oh = conv_out_len(h, kh, stride, padding);
    let ow = conv_out_len(w, kw, stride, padding);
    debug_assert_eq!(cols.len(), c_in * kh * kw * oh * ow);
    let mut row = 0usize;
    for ci in 0..c_in {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let col_row = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + u) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + v) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy * w + ix as usize] += col_row[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// In-place row softmax over a (rows, cols) buffer.
pub fn softmax_rows(data: &mut [Real], rows: usize, cols: usize) {
    debug_assert_eq!(data.len(), rows * cols);
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
