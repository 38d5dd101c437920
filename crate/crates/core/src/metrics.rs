//! Similarity measures: linear CKA between activation matrices, SSIM and
//! the conditional SSIM of a next-frame prediction.

use crate::error::{Error, Result};
use crate::interop::ArchiveEntry;
use crate::video::Frame;

/// `n` samples × `d` features.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub label: String,
    pub samples: usize,
    pub features: usize,
    pub data: Vec<f32>,
}

impl ActivationMatrix {
    pub fn new(
        label: impl Into<String>,
        samples: usize,
        features: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if samples < 2 || features == 0 || data.len() != samples * features {
            return Err(Error::InvalidArgument(format!(
                "activation matrix {samples}x{features} with {} values (needs at least 2 samples)",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "activation matrix has non-finite entries".into(),
            ));
        }
        Ok(Self {
            label: label.into(),
            samples,
            features,
            data,
        })
    }

    /// A rank-2 archive entry `[n, d]`.
    pub fn from_entry(label: impl Into<String>, e: &ArchiveEntry) -> Result<Self> {
        let label = label.into();
        match e.shape.as_slice() {
            &[n, d] => Self::new(label, n, d, e.data.clone()),
            s => Err(Error::InvalidArgument(format!(
                "entry {label:?} has shape {s:?}, expected [n, d]"
            ))),
        }
    }

    fn centered(&self) -> Vec<f64> {
        let (n, d) = (self.samples, self.features);
        let mut means = vec![0.0; d];
        for row in self.data.chunks(d) {
            for (m, &v) in means.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        self.data
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(&means)
                    .map(|(&v, m)| v as f64 - m)
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// `‖AᵀB‖²_F` for row-major `n × da` and `n × db`.
fn cross_frobenius_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut m = vec![0.0; da * db];
    for r in 0..n {
        let (ra, rb) = (&a[r * da..(r + 1) * da], &b[r * db..(r + 1) * db]);
        for (i, &x) in ra.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (j, &y) in rb.iter().enumerate() {
                m[i * db + j] += x * y;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

pub fn linear_cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    if x.samples != y.samples {
        return Err(Error::InvalidArgument(format!(
            "CKA needs equal sample counts, got {} and {}",
            x.samples, y.samples
        )));
    }
    let n = x.samples;
    let (xc, yc) = (x.centered(), y.centered());
    let xy = cross_frobenius_sq(&yc, y.features, &xc, x.features, n);
    let xx = cross_frobenius_sq(&xc, x.features, &xc, x.features, n).sqrt();
    let yy = cross_frobenius_sq(&yc, y.features, &yc, y.features, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn window() -> Vec<f64> {
    let r = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Separable weighted sums over every fully contained window.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of the grayscale frames over all valid 11×11 windows.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs equal sizes, got {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (h, w) = (a.height, a.width);
    if h < WINDOW || w < WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs frames of at least {WINDOW}x{WINDOW}"
        )));
    }
    let x: Vec<f64> = a.luma().into_iter().map(f64::from).collect();
    let y: Vec<f64> = b.luma().into_iter().map(f64::from).collect();
    let k = window();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sq = |v: &[f64]| v.iter().map(|a| a * a).collect::<Vec<_>>();
    let xx = filter_valid(&sq(&x), h, w, &k);
    let yy = filter_valid(&sq(&y), h, w, &k);
    let xy = filter_valid(
        &x.iter().zip(&y).map(|(a, b)| a * b).collect::<Vec<_>>(),
        h,
        w,
        &k,
    );
    let mut sum = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = xx[i] - ux * ux;
        let vy = yy[i] - uy * uy;
        let cov = xy[i] - ux * uy;
        sum +=
            ((2.0 * ux * uy + C1) * (2.0 * cov + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
    }
    Ok(sum / mx.len() as f64)
}

/// `(1 − SSIM(prev, pred)) · SSIM(cur, pred)`.
pub fn cssim(cur: &Frame, prev: &Frame, pred: &Frame) -> Result<f64> {
    if !cur.same_dims(prev) || !cur.same_dims(pred) {
        return Err(Error::InvalidArgument(
            "cSSIM needs three frames of equal size".into(),
        ));
    }
    Ok((1.0 - ssim(prev, pred)?) * ssim(cur, pred)?)
}

/// Mean and standard deviation of per-frame cSSIM for predictions of frames
/// `1..T`, where `preds[t]` predicts `frames[t + 1]`.
pub fn cssim_series(frames: &[Frame], preds: &[Frame]) -> Result<Vec<f64>> {
    if preds.len() + 1 != frames.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} frames; expected one per frame after the first",
            preds.len(),
            frames.len()
        )));
    }
    preds
        .iter()
        .enumerate()
        .map(|(t, p)| cssim(&frames[t + 1], &frames[t], p))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn random_matrix(n: usize, d: usize, rng: &mut ChaCha8Rng) -> ActivationMatrix {
        ActivationMatrix::new(
            "x",
            n,
            d,
            (0..n * d).map(|_| StandardNormal.sample(rng)).collect(),
        )
        .unwrap()
    }

    fn random_frame(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Frame {
        Frame::new(
            h,
            w,
            3,
            (0..h * w * 3).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap()
    }

    /// Orthogonal matrix by Gram-Schmidt on Gaussian columns.
    fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            q.push(v.iter().map(|a| a / n).collect());
        }
        (0..d * d).map(|i| q[i % d][i / d]).collect()
    }

    #[test]
    fn cka_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(40, 6, &mut rng);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
        let scaled =
            ActivationMatrix::new("s", 40, 6, x.data.iter().map(|v| v * -3.5).collect()).unwrap();
        assert!((linear_cka(&x, &scaled).unwrap() - 1.0).abs() <= 1e-8);
        let q = orthogonal(6, &mut rng);
        let mut rot = vec![0.0f32; 40 * 6];
        for r in 0..40 {
            for j in 0..6 {
                rot[r * 6 + j] = (0..6)
                    .map(|k| x.data[r * 6 + k] as f64 * q[k * 6 + j])
                    .sum::<f64>() as f32;
            }
        }
        let rot = ActivationMatrix::new("q", 40, 6, rot).unwrap();
        assert!((linear_cka(&x, &rot).unwrap() - 1.0).abs() <= 1e-6);
        let constant = ActivationMatrix::new("c", 40, 2, vec![1.0; 80]).unwrap();
        assert_eq!(linear_cka(&x, &constant).unwrap(), 0.0);
        assert!(linear_cka(&x, &random_matrix(39, 6, &mut rng)).is_err());
    }

    #[test]
    fn independent_features_have_low_cka() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(1000, 50, &mut rng);
        let y = random_matrix(1000, 50, &mut rng);
        assert!(linear_cka(&x, &y).unwrap() < 0.1);
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_frame(32, 32, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-10);
        let inv = Frame::new(32, 32, 3, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 0.2);
        let (p, q) = (Frame::filled(16, 16, 3, 0.3), Frame::filled(16, 16, 3, 0.4));
        let (mx, my) = (0.3f32 as f64, 0.4f32 as f64);
        let expect = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
        assert!((ssim(&p, &q).unwrap() - expect).abs() <= 1e-6);
        assert!(ssim(&p, &Frame::filled(16, 15, 3, 0.3)).is_err());
    }

    #[test]
    fn cssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cur, prev, pred) = (
            random_frame(16, 16, &mut rng),
            random_frame(16, 16, &mut rng),
            random_frame(16, 16, &mut rng),
        );
        assert_eq!(cssim(&cur, &prev, &prev).unwrap(), 0.0);
        let perfect = cssim(&cur, &prev, &cur).unwrap();
        assert!((perfect - (1.0 - ssim(&prev, &cur).unwrap())).abs() <= 1e-12);
        let v = cssim(&cur, &prev, &pred).unwrap();
        let expect = (1.0 - ssim(&prev, &pred).unwrap()) * ssim(&cur, &pred).unwrap();
        assert!((v - expect).abs() <= 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cka_is_symmetric_and_bounded(seed in any::<u64>(), n in 2usize..30, dx in 1usize..6, dy in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(n, dx, &mut rng);
            let y = random_matrix(n, dy, &mut rng);
            let (a, b) = (linear_cka(&x, &y).unwrap(), linear_cka(&y, &x).unwrap());
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn ssim_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_frame(14, 13, &mut rng), random_frame(14, 13, &mut rng));
            let (x, y) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((x - y).abs() <= 1e-10);
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }
}
