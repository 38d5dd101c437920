//! Spatiotemporal phase scrambling: one random phase field added to every
//! frame's 2D spectrum, then a random phase field added to the 3D spectrum
//! of the whole clip, then per-frame color transfer to the original.
//!
//! Phase fields are antisymmetric under `k → −k`, so inverse transforms
//! stay real; the zero frequency is never shifted and self-conjugate bins
//! get a shift of 0 or π.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::color::{color_transfer, ColorTransferParams};
use crate::error::{Error, Result};
use crate::video::{ColorSpace, Frame, VideoTensor};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct StpsParams {
    pub seed: u64,
    pub color: ColorTransferParams,
}

/// In-place DFT of a row-major array with shape `dims` along each of `axes`.
/// The inverse is normalized.
pub fn fft_axes(data: &mut [Complex64], dims: &[usize], axes: &[usize], inverse: bool) {
    let mut planner = FftPlanner::new();
    for &axis in axes {
        let n = dims[axis];
        let stride: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                for (k, v) in line.iter_mut().enumerate() {
                    *v = data[base + k * stride];
                }
                fft.process(&mut line);
                for (k, v) in line.iter().enumerate() {
                    data[base + k * stride] = *v;
                }
            }
        }
        if inverse {
            let inv = 1.0 / n as f64;
            data.iter_mut().for_each(|v| *v *= inv);
        }
    }
}

/// Uniform `[−π, π)` phases with `φ(−k) = −φ(k)`; zero at DC, 0 or π on the
/// other self-conjugate bins.
pub fn antisymmetric_phase(dims: &[usize], rng: &mut impl Rng) -> Vec<f64> {
    let len: usize = dims.iter().product();
    let mut field = vec![f64::NAN; len];
    let mut idx = vec![0usize; dims.len()];
    for flat in 0..len {
        let mut rem = flat;
        for d in (0..dims.len()).rev() {
            idx[d] = rem % dims[d];
            rem /= dims[d];
        }
        let neg = idx
            .iter()
            .zip(dims)
            .fold(0, |acc, (&i, &n)| acc * n + (n - i) % n);
        if !field[flat].is_nan() {
            continue;
        }
        if neg == flat {
            field[flat] = if flat == 0 || !rng.random::<bool>() {
                0.0
            } else {
                PI
            };
        } else {
            let phi = rng.random_range(-PI..PI);
            field[flat] = phi;
            field[neg] = -phi;
        }
    }
    field
}

/// Intermediate results of the two scrambling steps, per channel as
/// row-major `T × H × W` volumes.
#[derive(Clone, Debug)]
pub struct Scrambled {
    pub spatial: Vec<Vec<f64>>,
    pub spatiotemporal: Vec<Vec<f64>>,
    /// Largest imaginary part discarded by any inverse transform.
    pub max_imaginary: f64,
}

fn to_complex(v: &[f64]) -> Vec<Complex64> {
    v.iter().map(|&x| Complex64::new(x, 0.0)).collect()
}

fn rotate_phases(spectrum: &mut [Complex64], field: &[f64]) {
    for (s, &phi) in spectrum.iter_mut().zip(field) {
        *s *= Complex64::from_polar(1.0, phi);
    }
}

fn real_part(spectrum: &[Complex64], max_imag: &mut f64) -> Vec<f64> {
    spectrum.iter()
        .map(|c| {
            *max_imag = max_imag.max(c.im.abs());
            c.re
        })
        .collect()
}

/// Channel volumes of an RGB video.
pub fn channel_volumes(v: &VideoTensor) -> Vec<Vec<f64>> {
    (0..v.channels())
        .map(|c| {
            v.frames()
                .iter()
                .flat_map(|f| f.channel(c))
                .map(f64::from)
                .collect()
        })
        .collect()
}

pub fn phase_scramble(v: &VideoTensor, seed: u64) -> Result<Scrambled> {
    if v.len() < 2 {
        return Err(Error::InvalidArgument(
            "phase scrambling needs at least two frames".into(),
        ));
    }
    let (t, h, w) = (v.len(), v.height(), v.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field2 = antisymmetric_phase(&[h, w], &mut rng);
    let field3 = antisymmetric_phase(&[t, h, w], &mut rng);
    let mut max_imaginary = 0.0f64;
    let mut spatial = Vec::new();
    let mut spatiotemporal = Vec::new();
    for vol in channel_volumes(v) {
        let mut step1 = Vec::with_capacity(vol.len());
        for frame in vol.chunks(h * w) {
            let mut spectrum = to_complex(frame);
            fft_axes(&mut spectrum, &[h, w], &[0, 1], false);
            rotate_phases(&mut spectrum, &field2);
            fft_axes(&mut spectrum, &[h, w], &[0, 1], true);
            step1.extend(real_part(&spectrum, &mut max_imaginary));
        }
        let mut spectrum = to_complex(&step1);
        fft_axes(&mut spectrum, &[t, h, w], &[0, 1, 2], false);
        rotate_phases(&mut spectrum, &field3);
        fft_axes(&mut spectrum, &[t, h, w], &[0, 1, 2], true);
        spatiotemporal.push(real_part(&spectrum, &mut max_imaginary));
        spatial.push(step1);
    }
    Ok(Scrambled {
        spatial,
        spatiotemporal,
        max_imaginary,
    })
}

/// Phase-scrambled version of an RGB video.
pub fn stps_generate(v: &VideoTensor, params: &StpsParams) -> Result<VideoTensor> {
    params.color.validate()?;
    let v = v.to_rgb();
    let s = phase_scramble(&v, params.seed)?;
    let (h, w) = (v.height(), v.width());
    let plane = h * w;
    let mut frames = Vec::with_capacity(v.len());
    for (t, original) in v.frames().iter().enumerate() {
        let mut data = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            data.extend(s.spatiotemporal.iter().map(|c| c[t * plane + p] as f32));
        }
        let scrambled = Frame::new(h, w, 3, data)?;
        frames.push(color_transfer(&scrambled, original, &params.color)?.clamp_unit());
    }
    VideoTensor::new(frames, v.fps, ColorSpace::Rgb)
}
