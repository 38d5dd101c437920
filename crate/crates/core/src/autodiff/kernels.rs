//! Forward and input-gradient kernels on flat row-major buffers.
//!
//! Image-like data is laid out `[channels, height, width]`. The kernels are
//! shared by the autodiff graph and by value-level code (octave resizing,
//! target preparation) so both routes use one interpolation convention.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Boundary handling for stride-1 "same" convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Pads one `h × w` plane by `(ph, pw)` on every side.
pub fn pad_plane<S: Scalar>(
    src: &[S],
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    mode: Padding,
) -> Vec<S> {
    let hp = h + 2 * ph;
    let wp = w + 2 * pw;
    let mut out = vec![S::zero(); hp * wp];
    for yp in 0..hp {
        let y = yp as isize - ph as isize;
        let sy = match mode {
            Padding::Zero if y < 0 || y >= h as isize => continue,
            Padding::Zero => y as usize,
            Padding::Reflect => reflect_index(y, h),
        };
        let row = &mut out[yp * wp..(yp + 1) * wp];
        match mode {
            Padding::Zero => row[pw..pw + w].copy_from_slice(&src[sy * w..(sy + 1) * w]),
            Padding::Reflect => {
                for (xp, v) in row.iter_mut().enumerate() {
                    let x = xp as isize - pw as isize;
                    *v = src[sy * w + reflect_index(x, w)];
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad_plane`]: folds a padded-plane gradient back onto the
/// unpadded plane. Reflected positions accumulate into their source pixel.
pub fn unpad_plane_adjoint<S: Scalar>(
    padded: &[S],
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    mode: Padding,
) -> Vec<S> {
    let hp = h + 2 * ph;
    let wp = w + 2 * pw;
    let mut out = vec![S::zero(); h * w];
    for yp in 0..hp {
        let y = yp as isize - ph as isize;
        for xp in 0..wp {
            let x = xp as isize - pw as isize;
            let (sy, sx) = match mode {
                Padding::Zero => {
                    if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                        continue;
                    }
                    (y as usize, x as usize)
                }
                Padding::Reflect => (reflect_index(y, h), reflect_index(x, w)),
            };
            out[sy * w + sx] = out[sy * w + sx] + padded[yp * wp + xp];
        }
    }
    out
}

/// Geometry of a stride-1 same-size 2D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: Padding,
}

impl ConvGeom {
    fn ph(&self) -> usize {
        self.kh / 2
    }
    fn pw(&self) -> usize {
        self.kw / 2
    }
}

/// Cross-correlation, `weight` laid out `[c_out, c_in, kh, kw]`.
pub fn conv2d_forward<S: Scalar>(x: &[S], weight: &[S], bias: Option<&[S]>, g: ConvGeom) -> Vec<S> {
    let (ph, pw) = (g.ph(), g.pw());
    let wp = g.w + 2 * pw;
    let plane = g.h * g.w;
    let padded: Vec<Vec<S>> = (0..g.c_in)
        .map(|c| pad_plane(&x[c * plane..(c + 1) * plane], g.h, g.w, ph, pw, g.padding))
        .collect();
    let ksize = g.kh * g.kw;
    let mut out = vec![S::zero(); g.c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(oc, dst)| {
        let b = bias.map_or(S::zero(), |b| b[oc]);
        dst.iter_mut().for_each(|v| *v = b);
        for (ic, src) in padded.iter().enumerate() {
            let wk = &weight[(oc * g.c_in + ic) * ksize..(oc * g.c_in + ic + 1) * ksize];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    if wv == S::zero() {
                        continue;
                    }
                    for y in 0..g.h {
                        let s = &src[(y + ky) * wp + kx..(y + ky) * wp + kx + g.w];
                        let d = &mut dst[y * g.w..(y + 1) * g.w];
                        for (dv, &sv) in d.iter_mut().zip(s) {
                            *dv = *dv + wv * sv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of [`conv2d_forward`] with respect to its input.
pub fn conv2d_backward_input<S: Scalar>(grad_out: &[S], weight: &[S], g: ConvGeom) -> Vec<S> {
    let (ph, pw) = (g.ph(), g.pw());
    let (hp, wp) = (g.h + 2 * ph, g.w + 2 * pw);
    let plane = g.h * g.w;
    let ksize = g.kh * g.kw;
    let mut grad_x = vec![S::zero(); g.c_in * plane];
    grad_x
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(ic, gx)| {
            let mut acc = vec![S::zero(); hp * wp];
            for oc in 0..g.c_out {
                let go = &grad_out[oc * plane..(oc + 1) * plane];
                let wk = &weight[(oc * g.c_in + ic) * ksize..(oc * g.c_in + ic + 1) * ksize];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        for y in 0..g.h {
                            let d = &mut acc[(y + ky) * wp + kx..(y + ky) * wp + kx + g.w];
                            let s = &go[y * g.w..(y + 1) * g.w];
                            for (dv, &sv) in d.iter_mut().zip(s) {
                                *dv = *dv + wv * sv;
                            }
                        }
                    }
                }
            }
            gx.copy_from_slice(&unpad_plane_adjoint(&acc, g.h, g.w, ph, pw, g.padding));
        });
    grad_x
}

/// 2×2 stride-2 max pooling. Returns the pooled values and, per output
/// element, the flat input index it was taken from (first maximum in
/// row-major order on ties).
pub fn maxpool2_forward<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> (Vec<S>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn avgpool2_forward<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = S::of(0.25);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            let r0 = base + 2 * oy * w;
            let r1 = r0 + w;
            for ox in 0..wo {
                let s = x[r0 + 2 * ox] + x[r0 + 2 * ox + 1] + x[r1 + 2 * ox] + x[r1 + 2 * ox + 1];
                out.push(s * quarter);
            }
        }
    }
    out
}

pub fn avgpool2_backward<S: Scalar>(grad_out: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = S::of(0.25);
    let mut gx = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = grad_out[(ch * ho + oy) * wo + ox] * quarter;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    gx[base + (2 * oy + dy) * w + 2 * ox + dx] = g;
                }
            }
        }
    }
    gx
}

/// One output sample of a 1D linear interpolation: two taps and weights.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Half-pixel-centre (align-corners = false) bilinear taps, edge-clamped.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

/// Bilinear resize of `c` planes from `h × w` to `ho × wo`.
pub fn resize_bilinear<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    if (h, w) == (ho, wo) {
        return x.to_vec();
    }
    let ty = linear_taps(h, ho);
    let tx = linear_taps(w, wo);
    let mut out = vec![S::zero(); c * ho * wo];
    let mut rows = vec![S::zero(); h * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for (ox, t) in tx.iter().enumerate() {
                rows[y * wo + ox] =
                    S::of(t.w0) * src[y * w + t.i0] + S::of(t.w1) * src[y * w + t.i1];
            }
        }
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, t) in ty.iter().enumerate() {
            let (w0, w1) = (S::of(t.w0), S::of(t.w1));
            for ox in 0..wo {
                dst[oy * wo + ox] = w0 * rows[t.i0 * wo + ox] + w1 * rows[t.i1 * wo + ox];
            }
        }
    }
    out
}

/// Transpose of the interpolation operator in [`resize_bilinear`].
pub fn resize_bilinear_backward<S: Scalar>(
    grad_out: &[S],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    if (h, w) == (ho, wo) {
        return grad_out.to_vec();
    }
    let ty = linear_taps(h, ho);
    let tx = linear_taps(w, wo);
    let mut gx = vec![S::zero(); c * h * w];
    let mut rows = vec![S::zero(); h * wo];
    for ch in 0..c {
        rows.iter_mut().for_each(|v| *v = S::zero());
        let go = &grad_out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, t) in ty.iter().enumerate() {
            let (w0, w1) = (S::of(t.w0), S::of(t.w1));
            for ox in 0..wo {
                let g = go[oy * wo + ox];
                rows[t.i0 * wo + ox] = rows[t.i0 * wo + ox] + w0 * g;
                rows[t.i1 * wo + ox] = rows[t.i1 * wo + ox] + w1 * g;
            }
        }
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for (ox, t) in tx.iter().enumerate() {
                let g = rows[y * wo + ox];
                dst[y * w + t.i0] = dst[y * w + t.i0] + S::of(t.w0) * g;
                dst[y * w + t.i1] = dst[y * w + t.i1] + S::of(t.w1) * g;
            }
        }
    }
    gx
}

/// `y_i = e_i / (Σ_j e_j + eps)` across the leading (channel) axis.
pub fn divnorm_forward<S: Scalar>(e: &[S], k: usize, eps: S) -> Vec<S> {
    let m = e.len() / k;
    let mut out = vec![S::zero(); e.len()];
    for p in 0..m {
        let mut s = eps;
        for i in 0..k {
            s = s + e[i * m + p];
        }
        for i in 0..k {
            out[i * m + p] = e[i * m + p] / s;
        }
    }
    out
}

pub fn divnorm_backward<S: Scalar>(grad_out: &[S], e: &[S], k: usize, eps: S) -> Vec<S> {
    let m = e.len() / k;
    let mut gx = vec![S::zero(); e.len()];
    for p in 0..m {
        let mut s = eps;
        let mut ge = S::zero();
        for i in 0..k {
            s = s + e[i * m + p];
            ge = ge + grad_out[i * m + p] * e[i * m + p];
        }
        let inv = S::one() / s;
        let cross = ge * inv * inv;
        for i in 0..k {
            gx[i * m + p] = grad_out[i * m + p] * inv - cross;
        }
    }
    gx
}

/// `C = A · Bᵀ` with `A: [n, k]`, `B: [m, k]`.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], n: usize, m: usize, k: usize) -> Vec<S> {
    let mut c = vec![S::zero(); n * m];
    c.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, v) in row.iter_mut().enumerate() {
            let bj = &b[j * k..(j + 1) * k];
            *v = ai
                .iter()
                .zip(bj)
                .fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        }
    });
    c
}

/// `C = A · B` with `A: [n, m]`, `B: [m, k]`.
pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], n: usize, m: usize, k: usize) -> Vec<S> {
    let mut c = vec![S::zero(); n * k];
    c.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        for j in 0..m {
            let aij = a[i * m + j];
            if aij == S::zero() {
                continue;
            }
            for (v, &bv) in row.iter_mut().zip(&b[j * k..(j + 1) * k]) {
                *v = *v + aij * bv;
            }
        }
    });
    c
}

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn grayscale<S: Scalar>(x: &[S], plane: usize) -> Vec<S> {
    let (r, g, b) = (S::of(LUMA[0]), S::of(LUMA[1]), S::of(LUMA[2]));
    (0..plane)
        .map(|p| r * x[p] + g * x[plane + p] + b * x[2 * plane + p])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-2, 1), 0);
    }

    #[test]
    fn pad_adjoint_identity() {
        // <pad(x), y> == <x, pad^T(y)> for both padding modes.
        let (h, w, p) = (3, 4, 2);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..(h + 2 * p) * (w + 2 * p))
            .map(|i| (i as f64 * 0.91).cos())
            .collect();
        for mode in [Padding::Zero, Padding::Reflect] {
            let px = pad_plane(&x, h, w, p, p, mode);
            let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
            let aty = unpad_plane_adjoint(&y, h, w, p, p, mode);
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn resize_is_identity_at_same_size_and_preserves_constants() {
        let x = vec![0.25f64; 2 * 5 * 7];
        assert_eq!(resize_bilinear(&x, 2, 5, 7, 5, 7), x);
        let y = resize_bilinear(&x, 2, 5, 7, 11, 3);
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn resize_adjoint_identity() {
        let (c, h, w, ho, wo) = (2, 5, 6, 8, 4);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.13).sin()).collect();
        let y: Vec<f64> = (0..c * ho * wo).map(|i| (i as f64 * 0.71).cos()).collect();
        let ax = resize_bilinear(&x, c, h, w, ho, wo);
        let aty = resize_bilinear_backward(&y, c, h, w, ho, wo);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = [1.0f32, 1.0, 1.0, 1.0];
        let (v, arg) = maxpool2_forward(&x, 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn divnorm_equal_energies() {
        let k = 4;
        let e = vec![0.3f64; k * 5];
        let y = divnorm_forward(&e, k, 0.0);
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }
}
