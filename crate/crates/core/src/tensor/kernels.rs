//! Dense numeric kernels backing the autodiff ops.
//!
//! Convolutions are lowered to GEMM via im2col; the GEMM itself is delegated
//! to `matrixmultiply`. Everything is f64 and single-threaded.

/// C = A·B + beta·C with all matrices row-major contiguous.
/// A is (m, k), B is (k, n), C is (m, n).
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = Aᵀ·B + beta·C where A is stored row-major as (k, m).
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = A·Bᵀ + beta·C where B is stored row-major as (n, k).
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_out_dim(inp: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - kernel) / stride + 1
}

/// Unfold x (c_in, h, w) into cols (c_in*kh*kw, h_out*w_out), zero-padded.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    cols: &mut [f64],
) {
    let h_out = conv2d_out_dim(h, kh, sh, ph);
    let w_out = conv2d_out_dim(w, kw, sw, pw);
    let n = h_out * w_out;
    debug_assert_eq!(cols.len(), c_in * kh * kw * n);
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                for oy in 0..h_out {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let dst = &mut dst_row[oy * w_out..(oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    if sw == 1 {
                        // Contiguous source span; copy the in-bounds part directly.
                        let lo = pw.saturating_sub(kj).min(w_out);
                        let hi = (w + pw - kj).min(w_out).max(lo);
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let src_lo = lo + kj - pw;
                        dst[lo..hi].copy_from_slice(&src_row[src_lo..src_lo + (hi - lo)]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            *d = if ix >= 0 && ix < w as isize {
                                src_row[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add cols back into x_grad (c_in, h, w).
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    x_grad: &mut [f64],
) {
    let h_out = conv2d_out_dim(h, kh, sh, ph);
    let w_out = conv2d_out_dim(w, kw, sw, pw);
    let n = h_out * w_out;
    debug_assert_eq!(cols.len(), c_in * kh * kw * n);
    debug_assert_eq!(x_grad.len(), c_in * h * w);
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src_row = &cols[row * n..(row + 1) * n];
                for oy in 0..h_out {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row =
                        &mut x_grad[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    let src = &src_row[oy * w_out..(oy + 1) * w_out];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

pub fn pool_out_dim(inp: usize, kernel: usize, stride: usize) -> usize {
    (inp - kernel) / stride + 1
}

/// Bin edges used by adaptive average pooling: bin i covers
/// [floor(i·inp/out), ceil((i+1)·inp/out)).
pub fn adaptive_bin(i: usize, inp: usize, out: usize) -> (usize, usize) {
    let lo = i * inp / out;
    let hi = ((i + 1) * inp).div_ceil(out);
    (lo, hi)
}
