//! Raw f64 compute kernels behind the tensor ops.
//!
//! Loop orders are chosen so the innermost loop runs over contiguous
//! output/input slices, which LLVM vectorizes. Accumulation order is fixed,
//! so results are bit-reproducible run to run.

/// out[m x n] += a[m x k] * b[k x n]
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m x n] += a'[k x m]^T * b[k x n]
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aki * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] * b'[n x k]^T
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// Geometry of a 2D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    /// Returns None when the output would have a non-positive extent.
    pub fn new(
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        out_ch: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 {
            return None;
        }
        let eff_h = in_h + 2 * pad;
        let eff_w = in_w + 2 * pad;
        if eff_h < k_h || eff_w < k_w {
            return None;
        }
        let out_h = (eff_h - k_h) / stride + 1;
        let out_w = (eff_w - k_w) / stride + 1;
        if out_h == 0 || out_w == 0 {
            return None;
        }
        Some(ConvDims {
            in_ch,
            in_h,
            in_w,
            out_ch,
            k_h,
            k_w,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image (C x H x W) into a (C*kh*kw) x (oh*ow) column matrix.
pub fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    debug_assert_eq!(x.len(), d.in_ch * d.in_h * d.in_w);
    debug_assert_eq!(cols.len(), d.col_rows() * d.out_pixels());
    let ow = d.out_w;
    let npix = d.out_pixels();
    let mut row = 0;
    for c in 0..d.in_ch {
        let plane = &x[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
        for ky in 0..d.k_h {
            for kx in 0..d.k_w {
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= d.in_h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.in_w..(iy as usize + 1) * d.in_w];
                    for (ox, dv) in drow.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        *dv = if ix < 0 || ix >= d.in_w as isize {
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

/// Fold a column-matrix gradient back onto the input image (scatter-add).
pub fn col2im(cols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    debug_assert_eq!(dx.len(), d.in_ch * d.in_h * d.in_w);
    debug_assert_eq!(cols.len(), d.col_rows() * d.out_pixels());
    let ow = d.out_w;
    let npix = d.out_pixels();
    let mut row = 0;
    for c in 0..d.in_ch {
        let plane = &mut dx[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
        for ky in 0..d.k_h {
            for kx in 0..d.k_w {
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.in_h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * d.in_w..(iy as usize + 1) * d.in_w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &sv) in srow.iter().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.in_w as isize {
                            prow[ix as usize] += sv;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// One axis of a half-pixel-center bilinear map: `out[i]` blends
/// `lo[i]` and `hi[i]` with weight `w[i]` on the `hi` tap.
pub struct BilinearAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w: Vec<f64>,
}

/// Sampling positions for resizing `n_in` samples to `n_out`, using
/// half-pixel centers with edge clamping.
pub fn bilinear_axis(n_in: usize, n_out: usize) -> BilinearAxis {
    let mut lo = Vec::with_capacity(n_out);
    let mut hi = Vec::with_capacity(n_out);
    let mut w = Vec::with_capacity(n_out);
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let floor = src.floor();
        let mut i0 = floor as isize;
        let mut frac = src - floor;
        if i0 < 0 {
            i0 = 0;
            frac = 0.0;
        }
        let mut i1 = i0 + 1;
        if i1 >= n_in as isize {
            i1 = n_in as isize - 1;
            if i0 >= i1 {
                frac = 0.0;
            }
        }
        lo.push(i0 as usize);
        hi.push(i1 as usize);
        w.push(frac);
    }
    BilinearAxis { lo, hi, w }
}

/// Resample one plane (in_h x in_w) to (out_h x out_w) using precomputed axes.
pub fn bilinear_plane(
    src: &[f64],
    dst: &mut [f64],
    ax_y: &BilinearAxis,
    ax_x: &BilinearAxis,
    in_w: usize,
    out_w: usize,
) {
    for (oy, drow) in dst.chunks_exact_mut(out_w).enumerate() {
        let y0 = ax_y.lo[oy];
        let y1 = ax_y.hi[oy];
        let wy = ax_y.w[oy];
        let r0 = &src[y0 * in_w..y0 * in_w + in_w];
        let r1 = &src[y1 * in_w..y1 * in_w + in_w];
        for (ox, d) in drow.iter_mut().enumerate() {
            let x0 = ax_x.lo[ox];
            let x1 = ax_x.hi[ox];
            let wx = ax_x.w[ox];
            let top = r0[x0] + (r0[x1] - r0[x0]) * wx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * wx;
            *d = top + (bot - top) * wy;
        }
    }
}

/// Transpose of `bilinear_plane`: scatter the output-plane gradient back.
pub fn bilinear_plane_back(
    dout: &[f64],
    dsrc: &mut [f64],
    ax_y: &BilinearAxis,
    ax_x: &BilinearAxis,
    in_w: usize,
    out_w: usize,
) {
    for (oy, orow) in dout.chunks_exact(out_w).enumerate() {
        let y0 = ax_y.lo[oy];
        let y1 = ax_y.hi[oy];
        let wy = ax_y.w[oy];
        for (ox, &g) in orow.iter().enumerate() {
            let x0 = ax_x.lo[ox];
            let x1 = ax_x.hi[ox];
            let wx = ax_x.w[ox];
            dsrc[y0 * in_w + x0] += g * (1.0 - wy) * (1.0 - wx);
            dsrc[y0 * in_w + x1] += g * (1.0 - wy) * wx;
            dsrc[y1 * in_w + x0] += g * wy * (1.0 - wx);
            dsrc[y1 * in_w + x1] += g * wy * wx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nn_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_variants_agree() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.7 - 2.0).collect();
        let mut c_nn = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c_nn, m, k, n);

        // a^T laid out k x m
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut c_tn = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut c_tn, m, k, n);
        assert_eq!(c_nn, c_tn);

        // b^T laid out n x k
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut c_nt = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c_nt, m, k, n);
        assert_eq!(c_nn, c_nt);
    }

    #[test]
    fn bilinear_identity_axis() {
        let ax = bilinear_axis(5, 5);
        for i in 0..5 {
            assert_eq!(ax.lo[i], i);
            assert_eq!(ax.w[i], 0.0);
        }
    }

    #[test]
    fn conv_dims_rejects_empty_output() {
        assert!(ConvDims::new(1, 2, 2, 1, 3, 3, 1, 0).is_none());
        assert!(ConvDims::new(1, 3, 3, 1, 3, 3, 1, 0).is_some());
    }
}
