//! Dense optical flow by polynomial expansion (Farnebäck), coarse to fine.

use rayon::prelude::*;

use crate::autodiff::kernels;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FarnebackParams {
    pub pyramid_scale: f64,
    pub levels: usize,
    pub window: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self {
            pyramid_scale: 0.5,
            levels: 5,
            window: 13,
            iterations: 10,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "pyramid scale {} must be in (0, 1)",
                self.pyramid_scale
            )));
        }
        if self.levels == 0 || self.window == 0 || self.iterations == 0 || self.poly_n == 0 {
            return Err(Error::InvalidArgument(
                "flow levels, window, iterations and poly_n must be positive".into(),
            ));
        }
        if !(self.poly_sigma > 0.0) {
            return Err(Error::InvalidArgument("poly sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel displacement from the first frame to the second.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl Flow {
    fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            dx: vec![0.0; height * width],
            dy: vec![0.0; height * width],
        }
    }

    /// Bilinear upsampling with vectors scaled to the new grid.
    fn resized(&self, height: usize, width: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let up = |v: &[f64], s: f64| -> Vec<f64> {
            kernels::resize_bilinear(v, 1, self.height, self.width, height, width)
                .into_iter()
                .map(|x| x * s)
                .collect()
        };
        Self {
            height,
            width,
            dx: up(&self.dx, sx),
            dy: up(&self.dy, sy),
        }
    }
}

/// Quadratic model `xᵀAx + bᵀx + c` per pixel, stored as
/// `[b_x, b_y, a_xx, a_yy, a_xy]` with `A = [[a_xx, a_xy/2], [a_xy/2, a_yy]]`.
struct Poly {
    coef: Vec<[f64; 5]>,
}

/// Weighted least-squares projector from a `(2n+1)²` patch to the five
/// non-constant coefficients.
fn projector(n: usize, sigma: f64) -> Vec<[f64; 5]> {
    let side = 2 * n + 1;
    let mut basis = Vec::with_capacity(side * side);
    let mut weight = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let (y, x) = (i as f64 - n as f64, j as f64 - n as f64);
            basis.push([1.0, x, y, x * x, y * y, x * y]);
            weight.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
        }
    }
    // normal matrix BᵀWB (6×6) and its inverse by Gauss-Jordan
    let mut m = [[0.0f64; 12]; 6];
    for (b, &w) in basis.iter().zip(&weight) {
        for r in 0..6 {
            for c in 0..6 {
                m[r][c] += w * b[r] * b[c];
            }
        }
    }
    for (r, row) in m.iter_mut().enumerate() {
        row[6 + r] = 1.0;
    }
    for col in 0..6 {
        let piv = (col..6)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .expect("rows");
        m.swap(col, piv);
        let p = m[col][col];
        m[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..6 {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col];
                m[r].iter_mut()
                    .zip(pivot_row)
                    .for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    basis
        .iter()
        .zip(&weight)
        .map(|(b, &w)| {
            std::array::from_fn(|k| (0..6).map(|c| m[k + 1][6 + c] * b[c]).sum::<f64>() * w)
        })
        .collect()
}

fn expand(img: &[f64], h: usize, w: usize, proj: &[[f64; 5]], n: usize) -> Poly {
    let side = 2 * n + 1;
    let coef = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            let mut c = [0.0; 5];
            for i in 0..side {
                let yy = (y + i as isize - n as isize).clamp(0, h as isize - 1) as usize;
                for j in 0..side {
                    let xx = (x + j as isize - n as isize).clamp(0, w as isize - 1) as usize;
                    let v = img[yy * w + xx];
                    let pr = &proj[i * side + j];
                    for k in 0..5 {
                        c[k] += pr[k] * v;
                    }
                }
            }
            c
        })
        .collect();
    Poly { coef }
}

fn sample_poly(poly: &Poly, h: usize, w: usize, y: f64, x: f64) -> [f64; 5] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| poly.coef[yy * w + xx];
    let (a, b, c, d) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
    std::array::from_fn(|k| {
        (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy
    })
}

/// Box sum with clamped borders over a `win × win` window.
fn box_filter(v: &[f64], h: usize, w: usize, win: usize) -> Vec<f64> {
    let r = (win / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -r..=r {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                s += v[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -r..=r {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                s += tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Down-weighting of the five outermost rows and columns.
const BORDER_WEIGHTS: [f64; 5] = [0.14, 0.14, 0.4472, 0.4472, 0.4472];

fn border_weight(i: usize, n: usize) -> f64 {
    let d = i.min(n - 1 - i);
    BORDER_WEIGHTS.get(d).copied().unwrap_or(1.0)
}

fn refine(p1: &Poly, p2: &Poly, flow: &mut Flow, params: &FarnebackParams) {
    let (h, w) = (flow.height, flow.width);
    for _ in 0..params.iterations {
        // per-pixel normal equations G d = h with G = AᵀA, h = AᵀΔb
        let terms: Vec<[f64; 5]> = (0..h * w)
            .into_par_iter()
            .map(|p| {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                let (dx, dy) = (flow.dx[p], flow.dy[p]);
                let (ty, tx) = (y + dy, x + dx);
                if ty < 0.0 || tx < 0.0 || ty > (h - 1) as f64 || tx > (w - 1) as f64 {
                    return [0.0; 5];
                }
                let bw = border_weight(p / w, h) * border_weight(p % w, w);
                let c1 = p1.coef[p];
                let c2 = sample_poly(p2, h, w, ty, tx);
                let a11 = (c1[2] + c2[2]) / 2.0;
                let a22 = (c1[3] + c2[3]) / 2.0;
                let a12 = (c1[4] + c2[4]) / 4.0;
                let bx = -(c2[0] - c1[0]) / 2.0 + a11 * dx + a12 * dy;
                let by = -(c2[1] - c1[1]) / 2.0 + a12 * dx + a22 * dy;
                [
                    a11 * a11 + a12 * a12,
                    a12 * (a11 + a22),
                    a12 * a12 + a22 * a22,
                    a11 * bx + a12 * by,
                    a12 * bx + a22 * by,
                ]
                .map(|v| v * bw)
            })
            .collect();
        let sums: Vec<Vec<f64>> = (0..5)
            .map(|k| {
                let plane: Vec<f64> = terms.iter().map(|t| t[k]).collect();
                box_filter(&plane, h, w, params.window)
            })
            .collect();
        // ridge against flat, ill-conditioned neighbourhoods
        let ridge = RIDGE * (sums[0].iter().sum::<f64>() + sums[2].iter().sum::<f64>())
            / (2 * h * w) as f64;
        for p in 0..h * w {
            let (g11, g12, g22, h1, h2) = (
                sums[0][p] + ridge,
                sums[1][p],
                sums[2][p] + ridge,
                sums[3][p],
                sums[4][p],
            );
            let det = g11 * g22 - g12 * g12;
            if det.abs() > 1e-12 * (g11 * g22).abs().max(1e-300) {
                flow.dx[p] = (g22 * h1 - g12 * h2) / det;
                flow.dy[p] = (g11 * h2 - g12 * h1) / det;
            }
        }
    }
}

const RIDGE: f64 = 1e-3;
const MIN_LEVEL_SIDE: f64 = 32.0;

fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let r = ((sigma * 3.0).ceil() as isize).max(1);
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| {
                    img[y * w + (x as isize + d).clamp(0, w as isize - 1) as usize]
                        * k[(d + r) as usize]
                })
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| {
                    tmp[(y as isize + d).clamp(0, h as isize - 1) as usize * w + x]
                        * k[(d + r) as usize]
                })
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Number of pyramid levels usable for an `h × w` frame.
pub fn usable_levels(h: usize, w: usize, requested: usize) -> usize {
    let mut levels = requested;
    while levels > 1 && h.min(w) < 1 << levels {
        levels -= 1;
    }
    levels
}

/// Flow from grayscale `prev` to `cur` (row-major `h × w`).
pub fn farneback_flow(
    prev: &[f64],
    cur: &[f64],
    h: usize,
    w: usize,
    params: &FarnebackParams,
) -> Result<Flow> {
    params.validate()?;
    if prev.len() != h * w || cur.len() != h * w || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "flow frames must both be {h}x{w}"
        )));
    }
    let levels = usable_levels(h, w, params.levels);
    if levels < params.levels {
        log::warn!(
            "{h}x{w} frames are too small for {} pyramid levels; using {levels}",
            params.levels
        );
    }
    // like the reference implementation, never estimate on levels below 32 px
    let levels = (1..levels)
        .take_while(|&k| h.min(w) as f64 * params.pyramid_scale.powi(k as i32) >= MIN_LEVEL_SIDE)
        .count()
        + 1;
    let proj = projector(params.poly_n, params.poly_sigma);
    let mut flow: Option<Flow> = None;
    for k in (0..levels).rev() {
        let scale = params.pyramid_scale.powi(k as i32);
        let (lh, lw) = (
            ((h as f64 * scale).round() as usize).max(1),
            ((w as f64 * scale).round() as usize).max(1),
        );
        let sigma = (1.0 / scale - 1.0) * 0.5;
        let level = |img: &[f64]| {
            let b = gaussian_blur(img, h, w, sigma);
            kernels::resize_bilinear(&b, 1, h, w, lh, lw)
        };
        let (i1, i2) = (level(prev), level(cur));
        let p1 = expand(&i1, lh, lw, &proj, params.poly_n);
        let p2 = expand(&i2, lh, lw, &proj, params.poly_n);
        let mut f = match flow {
            None => Flow::zeros(lh, lw),
            Some(f) => f.resized(lh, lw),
        };
        refine(&p1, &p2, &mut f, params);
        flow = Some(f);
    }
    Ok(flow.expect("at least one level"))
}
