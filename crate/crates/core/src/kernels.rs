//! Raw forward kernels on contiguous `[N, C, H, W]` buffers.
//!
//! Convolution is im2col followed by a gemm per sample. The three bilinear
//! maps `conv`, `conv_input_grad` (transposed convolution) and
//! `conv_weight_grad` are mutual adjoints; the autodiff layer relies on that
//! to express every derivative of one of them with the other two.

use crate::par;
use crate::tensor::Float;

/// Geometry of one convolution, shared by all three kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Geometry of a strided convolution mapping `h x w` to `ceil(h/s) x ceil(w/s)`
    /// with zero "same" padding `(k - 1) / 2`.
    pub fn same(n: usize, c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let pad = (k - 1) / 2;
        ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            ho: h.div_ceil(stride),
            wo: w.div_ceil(stride),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    #[inline]
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid range of output columns `ox` whose input column `ox*s - p + kx` is in bounds.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // ox*s + off >= 0  and  ox*s + off <= w - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = self.w as isize - 1 - off;
        let hi = if hi_num < 0 {
            0
        } else {
            (hi_num / s + 1).min(self.wo as isize)
        };
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Writes the in-bounds entries of the column matrix. Padding entries are left
/// untouched: they sit at the same positions for every sample, so a buffer
/// zeroed once stays valid across calls with the same geometry.
fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * hw_out..(r + 1) * hw_out];
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut row[oy * g.wo + lo..oy * g.wo + hi];
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        for (d, &v) in dst.iter_mut().zip(&src[ix0..ix0 + (hi - lo)]) {
                            *d = v;
                        }
                    } else {
                        for (ox, d) in (lo..hi).zip(dst.iter_mut()) {
                            *d = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * hw_out..(r + 1) * hw_out];
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        for (d, &s) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d = *d + s;
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate().take(hi).skip(lo) {
                            let ix = ox * g.stride + kx - g.pad;
                            dst[ix] = dst[ix] + s;
                        }
                    }
                }
            }
        }
    }
}

/// `y[n] = W * im2col(x[n])`; `w` is `[c_out, c_in, k, k]`.
pub fn conv_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.ho * g.wo;
    let hw_out = g.ho * g.wo;
    let rows = g.rows();
    let mut y = vec![T::zero(); g.n * out_len];
    let scratch_len = if g.is_pointwise() { 0 } else { rows * hw_out };
    par::for_each_chunk_init(
        &mut y,
        out_len,
        || vec![T::zero(); scratch_len],
        |scratch, n, yn| {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, scratch);
                scratch
            };
            unsafe {
                T::gemm(
                    g.c_out,
                    rows,
                    hw_out,
                    T::one(),
                    w.as_ptr(),
                    rows as isize,
                    1,
                    cols.as_ptr(),
                    hw_out as isize,
                    1,
                    T::zero(),
                    yn.as_mut_ptr(),
                    hw_out as isize,
                    1,
                );
            }
        },
    );
    y
}

/// Adjoint of [`conv_forward`] in `x`: maps `[n, c_out, ho, wo]` back to `[n, c_in, h, w]`.
pub fn conv_input_grad<T: Float>(g: &ConvGeom, gy: &[T], w: &[T]) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.ho * g.wo;
    let hw_out = g.ho * g.wo;
    let rows = g.rows();
    let mut dx = vec![T::zero(); g.n * in_len];
    let scratch_len = if g.is_pointwise() { 0 } else { rows * hw_out };
    par::for_each_chunk_init(
        &mut dx,
        in_len,
        || vec![T::zero(); scratch_len],
        |cols, n, dxn| {
            let gyn = &gy[n * out_len..(n + 1) * out_len];
            if g.is_pointwise() {
                unsafe {
                    T::gemm(
                        rows,
                        g.c_out,
                        hw_out,
                        T::one(),
                        w.as_ptr(),
                        1,
                        rows as isize,
                        gyn.as_ptr(),
                        hw_out as isize,
                        1,
                        T::zero(),
                        dxn.as_mut_ptr(),
                        hw_out as isize,
                        1,
                    );
                }
                return;
            }
            unsafe {
                T::gemm(
                    rows,
                    g.c_out,
                    hw_out,
                    T::one(),
                    w.as_ptr(),
                    1,
                    rows as isize,
                    gyn.as_ptr(),
                    hw_out as isize,
                    1,
                    T::zero(),
                    cols.as_mut_ptr(),
                    hw_out as isize,
                    1,
                );
            }
            col2im_add(g, cols, dxn);
        },
    );
    dx
}

/// Adjoint of [`conv_forward`] in `w`: `sum_n gy[n] * im2col(x[n])^T`.
pub fn conv_weight_grad<T: Float>(g: &ConvGeom, x: &[T], gy: &[T]) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.ho * g.wo;
    let hw_out = g.ho * g.wo;
    let rows = g.rows();
    let w_len = g.c_out * rows;
    let scratch_len = if g.is_pointwise() { 0 } else { rows * hw_out };
    let partials = par::map_indexed_init(
        g.n,
        || vec![T::zero(); scratch_len],
        |scratch, n| {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let gyn = &gy[n * out_len..(n + 1) * out_len];
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, scratch);
                scratch
            };
            let mut dw = vec![T::zero(); w_len];
            unsafe {
                T::gemm(
                    g.c_out,
                    hw_out,
                    rows,
                    T::one(),
                    gyn.as_ptr(),
                    hw_out as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    hw_out as isize,
                    T::zero(),
                    dw.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
            dw
        },
    );
    let mut dw = vec![T::zero(); w_len];
    for p in partials {
        for (a, b) in dw.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    dw
}

/// 2x2 average pooling with stride 2; `h` and `w` must be even.
pub fn avg_pool2<T: Float>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut y = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let r0 = &src[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..wo {
                dst[oy * wo + ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
    y
}

/// Adjoint of [`avg_pool2`]: spreads each value, scaled by 1/4, over its 2x2 window.
pub fn avg_pool2_adjoint<T: Float>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut x = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * wo + xx / 2] * quarter;
            }
        }
    }
    x
}

/// Views `x` as `[outer, mid, inner]` and sums over `outer` and `inner`.
pub fn sum_keep<T: Float>(x: &[T], outer: usize, mid: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); mid];
    for o in 0..outer {
        for (m, acc) in out.iter_mut().enumerate() {
            let base = (o * mid + m) * inner;
            *acc = *acc + crate::tensor::pairwise_sum(&x[base..base + inner]);
        }
    }
    out
}

/// Adjoint of [`sum_keep`]: replicates `v` (length `mid`) to `[outer, mid, inner]`.
pub fn expand<T: Float>(v: &[T], outer: usize, inner: usize) -> Vec<T> {
    let mid = v.len();
    let mut out = Vec::with_capacity(outer * mid * inner);
    for _ in 0..outer {
        for &value in v {
            out.extend(std::iter::repeat_n(value, inner));
        }
    }
    out
}

/// `x * scale[m] + shift[m]` over the `[outer, mid, inner]` view of `x`.
pub fn bcast_affine<T: Float>(
    x: &[T],
    scale: Option<&[T]>,
    shift: Option<&[T]>,
    outer: usize,
    mid: usize,
    inner: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            let src = &x[base..base + inner];
            let s = scale.map_or(T::one(), |v| v[m]);
            let b = shift.map_or(T::zero(), |v| v[m]);
            match (scale.is_some(), shift.is_some()) {
                (true, true) => out.extend(src.iter().map(|&v| v * s + b)),
                (true, false) => out.extend(src.iter().map(|&v| v * s)),
                (false, true) => out.extend(src.iter().map(|&v| v + b)),
                (false, false) => out.extend_from_slice(src),
            }
        }
    }
    out
}

/// Per-`mid` sum of `a * b` over the `[outer, mid, inner]` view.
pub fn sum_prod<T: Float>(a: &[T], b: &[T], outer: usize, mid: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); mid];
    let mut prod = vec![T::zero(); inner];
    for o in 0..outer {
        for (m, acc) in out.iter_mut().enumerate() {
            let base = (o * mid + m) * inner;
            for ((p, &x), &y) in prod.iter_mut().zip(&a[base..base + inner]).zip(&b[base..base + inner]) {
                *p = x * y;
            }
            *acc = *acc + crate::tensor::pairwise_sum(&prod);
        }
    }
    out
}

/// Row-major `[m, k] x [k, n]`, with optional transposes of either operand.
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.n * g.c_out * g.ho * g.wo];
        for n in 0..g.n {
            for co in 0..g.c_out {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        y[((n * g.c_out + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, s, h, w) in &[(3, 1, 5, 6), (3, 2, 6, 6), (3, 2, 7, 5), (1, 1, 4, 3), (1, 2, 4, 4)] {
            let g = ConvGeom::same(2, 3, h, w, 4, k, s);
            let x = lcg(1, g.n * g.c_in * h * w);
            let wt = lcg(2, g.c_out * g.rows());
            let fast = conv_forward(&g, &x, &wt);
            let slow = naive_conv(&g, &x, &wt);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s}");
            }
        }
    }

    #[test]
    fn conv_trio_is_mutually_adjoint() {
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let g = ConvGeom::same(2, 3, 6, 6, 2, k, s);
            let x = lcg(3, g.n * g.c_in * g.h * g.w);
            let w = lcg(4, g.c_out * g.rows());
            let y = lcg(5, g.n * g.c_out * g.ho * g.wo);
            let lhs: f64 = conv_forward(&g, &x, &w).iter().zip(&y).map(|(a, b)| a * b).sum();
            let via_x: f64 = conv_input_grad(&g, &y, &w).iter().zip(&x).map(|(a, b)| a * b).sum();
            let via_w: f64 = conv_weight_grad(&g, &x, &y).iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn pool_adjoint() {
        let x = lcg(7, 2 * 4 * 6);
        let g = lcg(8, 2 * 2 * 3);
        let lhs: f64 = avg_pool2(&x, 2, 4, 6).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = avg_pool2_adjoint(&g, 2, 4, 6).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2, false, false), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&a, &b, 2, 2, 2, true, false), vec![26.0, 30.0, 38.0, 44.0]);
        assert_eq!(matmul(&a, &b, 2, 2, 2, false, true), vec![17.0, 23.0, 39.0, 53.0]);
    }
}
