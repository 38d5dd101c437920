//! Seeded synthetic clips for tests, benchmarks and the CLI `fixture`
//! command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::video::{Frame, VideoTensor};

/// Periodic band-limited noise in `[0, 1]`: white noise blurred with
/// wrap-around box filters, rescaled to its range. `passes` controls the
/// smoothness.
pub fn periodic_noise(h: usize, w: usize, seed: u64, passes: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
    let mut tmp = vec![0.0; h * w];
    for _ in 0..passes {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] =
                    (v[y * w + (x + w - 1) % w] + v[y * w + x] + v[y * w + (x + 1) % w]) / 3.0;
            }
        }
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] =
                    (tmp[((y + h - 1) % h) * w + x] + tmp[y * w + x] + tmp[((y + 1) % h) * w + x])
                        / 3.0;
            }
        }
    }
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let span = (hi - lo).max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - lo) / span);
    v
}

/// A periodic RGB texture: three noise fields mixed through a seeded color
/// matrix, each channel mapped into `[0, 1]`.
#[derive(Clone, Debug)]
pub struct PeriodicTexture {
    pub height: usize,
    pub width: usize,
    planes: [Vec<f64>; 3],
}

impl PeriodicTexture {
    pub fn new(h: usize, w: usize, seed: u64, passes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let fields: Vec<Vec<f64>> = (0..3)
            .map(|i| periodic_noise(h, w, seed.wrapping_add(i * 7919), passes))
            .collect();
        let planes = std::array::from_fn(|_| {
            let mix: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..1.0));
            let lo = rng.random_range(0.05..0.35);
            let span = rng.random_range(0.4..0.6);
            let total: f64 = mix.iter().sum();
            (0..h * w)
                .map(|i| lo + span * (0..3).map(|k| mix[k] * fields[k][i]).sum::<f64>() / total)
                .collect()
        });
        Self {
            height: h,
            width: w,
            planes,
        }
    }

    /// Bilinear sample at continuous `(y, x)` with wrap-around.
    pub fn sample(&self, c: usize, y: f64, x: f64) -> f64 {
        let (h, w) = (self.height as f64, self.width as f64);
        let (y, x) = (y.rem_euclid(h), x.rem_euclid(w));
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let idx = |yy: f64, xx: f64| {
            let yi = (yy as usize) % self.height;
            let xi = (xx as usize) % self.width;
            self.planes[c][yi * self.width + xi]
        };
        let top = idx(y0, x0) * (1.0 - fx) + idx(y0, x0 + 1.0) * fx;
        let bottom = idx(y0 + 1.0, x0) * (1.0 - fx) + idx(y0 + 1.0, x0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// The texture translated by `(dy, dx)`: pixel `p` shows texture point
    /// `p − (dy, dx)`.
    pub fn frame(&self, dy: f64, dx: f64) -> Frame {
        let mut data = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    data.push(self.sample(c, y as f64 - dy, x as f64 - dx) as f32);
                }
            }
        }
        Frame::new(self.height, self.width, 3, data).expect("consistent size")
    }
}

/// `frames` frames of a periodic texture drifting by `velocity = (dy, dx)`
/// pixels per frame.
pub fn drifting_texture(
    frames: usize,
    h: usize,
    w: usize,
    velocity: (f64, f64),
    seed: u64,
) -> Result<VideoTensor> {
    let tex = PeriodicTexture::new(h, w, seed, 3);
    let v = (0..frames)
        .map(|t| tex.frame(velocity.0 * t as f64, velocity.1 * t as f64))
        .collect();
    VideoTensor::rgb(v)
}

/// Sinusoidal gray grating with spatial frequency `(fy, fx)` cycles per
/// pixel drifting by `velocity` pixels per frame.
pub fn drifting_grating(
    frames: usize,
    h: usize,
    w: usize,
    freq: (f64, f64),
    velocity: (f64, f64),
) -> Result<VideoTensor> {
    let tau = std::f64::consts::TAU;
    let v = (0..frames)
        .map(|t| {
            let t = t as f64;
            let mut data = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    let arg =
                        freq.0 * (y as f64 - velocity.0 * t) + freq.1 * (x as f64 - velocity.1 * t);
                    data.extend([(0.5 + 0.4 * (tau * arg).sin()) as f32; 3]);
                }
            }
            Frame::new(h, w, 3, data).expect("consistent size")
        })
        .collect();
    VideoTensor::rgb(v)
}

/// Independent uniform noise frames.
pub fn noise_clip(frames: usize, h: usize, w: usize, seed: u64) -> Result<VideoTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..frames)
        .map(|_| {
            Frame::new(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect())
                .expect("consistent size")
        })
        .collect();
    VideoTensor::rgb(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_is_periodic_and_in_range() {
        let t = PeriodicTexture::new(16, 12, 1, 2);
        for c in 0..3 {
            assert!((t.sample(c, 3.0, 4.0) - t.sample(c, 19.0, -8.0)).abs() < 1e-12);
        }
        let f = t.frame(0.5, 0.25);
        assert!(f.in_unit_range());
    }

    #[test]
    fn integer_drift_is_a_cyclic_shift() {
        let v = drifting_texture(3, 16, 16, (0.0, 2.0), 4).unwrap();
        let (a, b) = (v.frame(0), v.frame(1));
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    assert_eq!(b.get(y, (x + 2) % 16, c), a.get(y, x, c));
                }
            }
        }
    }
}
