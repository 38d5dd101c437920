//! Color distribution transfer: iterated quantile matching along random
//! rotations of the RGB cloud, with an optional regrain pass that keeps the
//! source frame's gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::video::Frame;

#[derive(Clone, Debug, PartialEq)]
pub struct ColorTransferParams {
    pub rotations: usize,
    pub bins: usize,
    pub regrain: bool,
    pub seed: u64,
}

impl Default for ColorTransferParams {
    fn default() -> Self {
        Self {
            rotations: 20,
            bins: 256,
            regrain: true,
            seed: 0,
        }
    }
}

impl ColorTransferParams {
    pub fn validate(&self) -> Result<()> {
        if self.rotations == 0 {
            return Err(Error::Config(
                "color transfer needs at least one rotation".into(),
            ));
        }
        if self.bins < 16 {
            return Err(Error::Config(format!(
                "color transfer needs at least 16 bins, got {}",
                self.bins
            )));
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Uniformly distributed rotation from a random unit quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    );
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn rotate(m: &Mat3, p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
}

fn rotate_back(m: &Mat3, p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[0][i] * p[0] + m[1][i] * p[1] + m[2][i] * p[2])
}

/// `bins + 1` quantiles of `values` at `k / bins` with linear interpolation.
fn quantile_table(values: &mut [f64], bins: usize) -> Vec<f64> {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    (0..=bins)
        .map(|k| {
            let pos = k as f64 / bins as f64 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
        })
        .collect()
}

/// Position of `v` in a non-decreasing table, as a fraction of its range.
/// Values on a flat run map to the centre of the run.
fn table_position(table: &[f64], v: f64) -> f64 {
    let bins = (table.len() - 1) as f64;
    let lo = table.partition_point(|&q| q < v);
    let hi = table.partition_point(|&q| q <= v);
    if hi > lo {
        return (lo + hi - 1) as f64 / 2.0 / bins;
    }
    if lo == 0 {
        return 0.0;
    }
    if lo == table.len() {
        return 1.0;
    }
    let (a, b) = (table[lo - 1], table[lo]);
    ((lo - 1) as f64 + (v - a) / (b - a)) / bins
}

fn table_value(table: &[f64], p: f64) -> f64 {
    let pos = p * (table.len() - 1) as f64;
    let lo = (pos.floor() as usize).min(table.len() - 1);
    let hi = (lo + 1).min(table.len() - 1);
    table[lo] + (pos - lo as f64) * (table[hi] - table[lo])
}

fn match_marginal(source: &mut [[f64; 3]], target: &[[f64; 3]], axis: usize, bins: usize) {
    let mut s: Vec<f64> = source.iter().map(|p| p[axis]).collect();
    let mut t: Vec<f64> = target.iter().map(|p| p[axis]).collect();
    let qs = quantile_table(&mut s, bins);
    let qt = quantile_table(&mut t, bins);
    for p in source.iter_mut() {
        p[axis] = table_value(&qt, table_position(&qs, p[axis]));
    }
}

/// 1-Wasserstein distance between two samples via their quantile functions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let n = a.len().max(b.len());
    let q = |v: &[f64], p: f64| v[((p * v.len() as f64) as usize).min(v.len() - 1)];
    (0..n)
        .map(|i| {
            let p = (i as f64 + 0.5) / n as f64;
            (q(&a, p) - q(&b, p)).abs()
        })
        .sum::<f64>()
        / n as f64
}

fn cloud(frame: &Frame) -> Vec<[f64; 3]> {
    frame
        .data
        .chunks_exact(3)
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect()
}

fn summed_w1(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    (0..3)
        .map(|c| {
            let x: Vec<f64> = a.iter().map(|p| p[c]).collect();
            let y: Vec<f64> = b.iter().map(|p| p[c]).collect();
            wasserstein1(&x, &y)
        })
        .sum()
}

fn check_frames(source: &Frame, target: &Frame) -> Result<()> {
    if source.channels != 3 || target.channels != 3 {
        return Err(Error::InvalidArgument(
            "color transfer needs RGB frames".into(),
        ));
    }
    Ok(())
}

/// Iterative distribution transfer without regrain or clamping. When
/// `trace` is given it receives the summed per-channel 1-Wasserstein
/// distance to the target after every rotation.
pub fn distribution_transfer(
    source: &Frame,
    target: &Frame,
    params: &ColorTransferParams,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<Frame> {
    check_frames(source, target)?;
    params.validate()?;
    let mut src = cloud(source);
    let tgt = cloud(target);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut rot_src = vec![[0.0; 3]; src.len()];
    let mut rot_tgt = vec![[0.0; 3]; tgt.len()];
    for i in 0..params.rotations {
        let r = if i == 0 {
            IDENTITY
        } else {
            random_rotation(&mut rng)
        };
        for (d, p) in rot_src.iter_mut().zip(&src) {
            *d = rotate(&r, *p);
        }
        for (d, p) in rot_tgt.iter_mut().zip(&tgt) {
            *d = rotate(&r, *p);
        }
        for axis in 0..3 {
            match_marginal(&mut rot_src, &rot_tgt, axis, params.bins);
        }
        for (d, p) in src.iter_mut().zip(&rot_src) {
            *d = rotate_back(&r, *p);
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(summed_w1(&src, &tgt));
        }
    }
    let data = src.iter().flat_map(|p| p.map(|v| v as f32)).collect();
    Frame::new(source.height, source.width, 3, data)
}

const REGRAIN_LEVELS: usize = 4;
const REGRAIN_ITERS: usize = 15;

/// Per-pixel weights `(data, gradient)` from the source gradient magnitude
/// at pyramid `level` (0 is finest): the data term dominates in flat areas,
/// the source gradients are kept across edges.
fn regrain_weights(src: &[Vec<f64>], h: usize, w: usize, level: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = (1usize << level) as f64;
    let mut data = vec![0.0; h * w];
    let mut grad = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut g2 = 0.0;
            for c in src {
                let dx = if x + 1 < w { c[i + 1] - c[i] } else { 0.0 };
                let dy = if y + 1 < h { c[i + w] - c[i] } else { 0.0 };
                g2 += dx * dx + dy * dy;
            }
            let d = g2.sqrt();
            data[i] = 30.0 / (1.0 + 10.0 * d * scale);
            grad[i] = (256.0 * d / 5.0).min(1.0);
        }
    }
    (data, grad)
}

fn planes(f: &Frame) -> Vec<Vec<f64>> {
    (0..3)
        .map(|c| f.channel(c).into_iter().map(f64::from).collect())
        .collect()
}

fn to_frame(p: &[Vec<f64>], h: usize, w: usize) -> Frame {
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        data.extend(p.iter().map(|c| c[i] as f32));
    }
    Frame::new(h, w, 3, data).expect("consistent planes")
}

/// Jacobi sweeps of `min Σ φ (J − T)² + Σ_edges ψ ((J_p − J_q) − (I_p − I_q))²`.
fn regrain_level(
    src: &[Vec<f64>],
    mapped: &[Vec<f64>],
    mut j: Vec<Vec<f64>>,
    (h, w): (usize, usize),
    level: usize,
) -> Vec<Vec<f64>> {
    let (phi, psi) = regrain_weights(src, h, w, level);
    for _ in 0..REGRAIN_ITERS {
        let mut next = j.clone();
        for c in 0..3 {
            let (s, t, cur) = (&src[c], &mapped[c], &j[c]);
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let mut num = phi[p] * t[p];
                    let mut den = phi[p];
                    let mut edge = |q: usize| {
                        let wgt = 0.5 * (psi[p] + psi[q]);
                        num += wgt * (cur[q] + s[p] - s[q]);
                        den += wgt;
                    };
                    if x > 0 {
                        edge(p - 1);
                    }
                    if x + 1 < w {
                        edge(p + 1);
                    }
                    if y > 0 {
                        edge(p - w);
                    }
                    if y + 1 < h {
                        edge(p + w);
                    }
                    next[c][p] = num / den;
                }
            }
        }
        j = next;
    }
    j
}

/// Coarse-to-fine regrain of `mapped` against the gradients of `source`.
pub fn regrain(source: &Frame, mapped: &Frame) -> Result<Frame> {
    if !source.same_dims(mapped) || source.channels != 3 {
        return Err(Error::InvalidArgument(
            "regrain needs two RGB frames of equal size".into(),
        ));
    }
    let mut sizes = vec![(source.height, source.width)];
    while sizes.len() < REGRAIN_LEVELS {
        let (h, w) = *sizes.last().unwrap();
        if h < 4 || w < 4 {
            break;
        }
        sizes.push((h.div_ceil(2), w.div_ceil(2)));
    }
    let mut correction: Option<(Vec<Vec<f64>>, usize, usize)> = None;
    let mut result = None;
    for (level, &(h, w)) in sizes.iter().enumerate().rev() {
        let s = planes(&source.resize(h, w));
        let t = planes(&mapped.resize(h, w));
        let init = match &correction {
            None => t.clone(),
            Some((d, dh, dw)) => {
                let up = planes(&to_frame(d, *dh, *dw).resize(h, w));
                t.iter()
                    .zip(&up)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                    .collect()
            }
        };
        let j = regrain_level(&s, &t, init, (h, w), level);
        let d = j
            .iter()
            .zip(&t)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        correction = Some((d, h, w));
        result = Some(j);
    }
    let (h, w) = sizes[0];
    Ok(to_frame(&result.expect("at least one level"), h, w))
}

/// Maps the colors of `source` onto the distribution of `target`.
pub fn color_transfer(
    source: &Frame,
    target: &Frame,
    params: &ColorTransferParams,
) -> Result<Frame> {
    check_frames(source, target)?;
    params.validate()?;
    let first = [target.data[0], target.data[1], target.data[2]];
    if target.data.chunks_exact(3).all(|p| p == first) {
        let data = std::iter::repeat_n(first, source.pixels())
            .flatten()
            .collect();
        return Frame::new(source.height, source.width, 3, data);
    }
    let mapped = distribution_transfer(source, target, params, None)?;
    let out = if params.regrain {
        regrain(source, &mapped)?
    } else {
        mapped
    };
    Ok(out.clamp_unit())
}
