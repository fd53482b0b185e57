//! Convolution plumbing: rayon-chunked GEMM, im2col/col2im.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4};

use super::Real;

/// Chunked matrix product: splits the left operand's rows across threads.
/// Deterministic regardless of scheduling (disjoint output rows).
pub fn par_matmul<S: Real>(a: ArrayView2<S>, b: ArrayView2<S>) -> Array2<S> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    let work = m * k * n;
    let threads = rayon::current_num_threads().max(1);
    if threads < 2 || work < 262_144 || m < 2 {
        return a.dot(&b);
    }
    let split = m / 2;
    let (top, bottom) = (a.slice(s![..split, ..]), a.slice(s![split.., ..]));
    let (yt, yb) = rayon::join(|| top.dot(&b), || bottom.dot(&b));
    let mut out = Array2::zeros((m, n));
    out.slice_mut(s![..split, ..]).assign(&yt);
    out.slice_mut(s![split.., ..]).assign(&yb);
    out
}

/// Output spatial size of a convolution.
pub fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h - 1) * stride + k - 2 * pad
}

/// Lower image patches into a matrix of shape `[B*OH*OW, C*KH*KW]`.
/// Row order is `(b, oh, ow)`, column order `(c, kh, kw)`.
pub fn im2col<S: Real>(
    x: ArrayView4<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<S> {
    let (batch, channels, h, w) = x.dim();
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(w, k, stride, pad);
    let mut cols = Array2::<S>::zeros((batch * oh * ow, channels * k * k));
    let row_len = channels * k * k;
    {
        let cols_slice = cols.as_slice_mut().expect("contiguous");
        let chunk = batch * oh * ow / rayon::current_num_threads().max(1);
        let per_b = oh * ow * row_len;
        rayon::scope(|scope| {
            let mut rest = cols_slice;
            let mut b0 = 0usize;
            let bs = ((chunk / (oh * ow)).max(1)).min(batch);
            while b0 < batch {
                let b1 = (b0 + bs).min(batch);
                let (head, tail) = rest.split_at_mut((b1 - b0) * per_b);
                let xv = x;
                scope.spawn(move |_| {
                    fill_cols(xv, head, b0, b1, k, stride, pad, oh, ow);
                });
                rest = tail;
                b0 = b1;
            }
        });
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn fill_cols<S: Real>(
    x: ArrayView4<S>,
    out: &mut [S],
    b0: usize,
    b1: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (_, channels, h, w) = x.dim();
    let row_len = channels * k * k;
    let mut row = 0usize;
    for b in b0..b1 {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * row_len;
                for c in 0..channels {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[base + c * k * k + ky * k + kx] =
                                x[[b, c, iy as usize, ix as usize]];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-accumulate patch rows back into an image
/// of shape `[B, C, H, W]`.
pub fn col2im<S: Real>(
    cols: ArrayView2<S>,
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(w, k, stride, pad);
    let mut x = Array4::<S>::zeros((batch, channels, h, w));
    let mut row = 0usize;
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let col_row = cols.row(row);
                let cr = col_row.as_slice().expect("contiguous");
                for c in 0..channels {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[b, c, iy as usize, ix as usize]] =
                                x[[b, c, iy as usize, ix as usize]]
                                    + cr[c * k * k + ky * k + kx];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn par_matmul_matches_dot() {
        let a = Array::from_shape_fn((130, 70), |(i, j)| ((i * 7 + j) % 13) as f64 * 0.1 - 0.5);
        let b = Array::from_shape_fn((70, 50), |(i, j)| ((i * 3 + j) % 11) as f64 * 0.2 - 1.0);
        let expect = a.dot(&b);
        let got = par_matmul(a.view(), b.view());
        let max_diff = (&expect - &got).iter().fold(0.0f64, |m, &d| m.max(d.abs()));
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let (b, ch, h, w, k, s, p) = (2, 3, 6, 6, 4, 2, 1);
        let x = Array::from_shape_fn((b, ch, h, w), |(a, b2, c, d)| {
            ((a * 31 + b2 * 17 + c * 7 + d) % 23) as f64 * 0.17 - 1.3
        });
        let oh = conv_out(h, k, s, p);
        let cols_shape = (b * oh * oh, ch * k * k);
        let c_mat = Array::from_shape_fn(cols_shape, |(i, j)| {
            ((i * 13 + j * 5) % 19) as f64 * 0.11 - 0.9
        });
        let cols = im2col(x.view(), k, s, p);
        let lhs: f64 = (&cols * &c_mat).sum();
        let back = col2im(c_mat.view(), b, ch, h, w, k, s, p);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
