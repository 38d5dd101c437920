//! Low-level feature time courses: intensity, contrast, pixel change and
//! dense optical flow.

pub mod farneback;

use rayon::prelude::*;

pub use farneback::{farneback_flow, FarnebackParams, Flow};

use crate::error::{Error, Result};
use crate::video::{Frame, VideoTensor};

/// Luma of an RGB frame; a grayscale frame is returned as is.
pub fn grayscale(frame: &Frame) -> Vec<f64> {
    frame.luma().into_iter().map(f64::from).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-frame mean over all pixels and channels.
pub fn intensity(frame: &Frame) -> f64 {
    frame.data.iter().map(|&v| v as f64).sum::<f64>() / frame.data.len() as f64
}

/// Population standard deviation of the grayscale frame.
pub fn contrast(frame: &Frame) -> f64 {
    let g = grayscale(frame);
    let m = mean(&g);
    (g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / g.len() as f64).sqrt()
}

pub fn pixel_change(prev: &Frame, cur: &Frame) -> f64 {
    prev.data
        .iter()
        .zip(&cur.data)
        .map(|(&a, &b)| (b as f64 - a as f64).abs())
        .sum::<f64>()
        / cur.data.len() as f64
}

pub fn spatial_features(v: &VideoTensor) -> (Vec<f64>, Vec<f64>) {
    v.frames()
        .iter()
        .map(|f| (intensity(f), contrast(f)))
        .unzip()
}

/// Mean vector norm and circular-mean angle in `(−π, π]`.
pub fn flow_summary(flow: &Flow) -> (f64, f64) {
    let n = flow.dx.len() as f64;
    let mut mag = 0.0;
    let (mut s, mut c) = (0.0, 0.0);
    for (&dx, &dy) in flow.dx.iter().zip(&flow.dy) {
        mag += dx.hypot(dy);
        if dx != 0.0 || dy != 0.0 {
            let a = dy.atan2(dx);
            s += a.sin();
            c += a.cos();
        }
    }
    let angle = s.atan2(c);
    (
        mag / n,
        if angle <= -std::f64::consts::PI {
            std::f64::consts::PI
        } else {
            angle
        },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalSeries {
    pub pixel_change: Vec<f64>,
    pub flow_magnitude: Vec<f64>,
    pub flow_angle: Vec<f64>,
}

pub fn temporal_features(v: &VideoTensor, params: &FarnebackParams) -> Result<TemporalSeries> {
    if v.len() < 2 {
        return Err(Error::InvalidArgument(
            "temporal features need at least two frames".into(),
        ));
    }
    params.validate()?;
    let (h, w) = (v.height(), v.width());
    let gray: Vec<Vec<f64>> = v.frames().iter().map(grayscale).collect();
    let per_pair: Vec<Result<(f64, f64, f64)>> = (1..v.len())
        .into_par_iter()
        .map(|t| {
            let flow = farneback_flow(&gray[t - 1], &gray[t], h, w, params)?;
            let (m, a) = flow_summary(&flow);
            Ok((pixel_change(v.frame(t - 1), v.frame(t)), m, a))
        })
        .collect();
    let mut out = TemporalSeries {
        pixel_change: Vec::new(),
        flow_magnitude: Vec::new(),
        flow_angle: Vec::new(),
    };
    for r in per_pair {
        let (p, m, a) = r?;
        out.pixel_change.push(p);
        out.flow_magnitude.push(m);
        out.flow_angle.push(a);
    }
    Ok(out)
}

/// Per-frame and per-pair feature courses of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeries {
    pub intensity: Vec<f64>,
    pub contrast: Vec<f64>,
    pub pixel_change: Vec<f64>,
    pub flow_magnitude: Vec<f64>,
    pub flow_angle: Vec<f64>,
}

impl FeatureSeries {
    pub fn frames(&self) -> usize {
        self.intensity.len()
    }
}

/// Spatial features of every frame plus temporal features when the video
/// has at least two frames.
pub fn analyze(v: &VideoTensor, params: &FarnebackParams) -> Result<FeatureSeries> {
    let (intensity, contrast) = spatial_features(v);
    let t = if v.len() >= 2 {
        temporal_features(v, params)?
    } else {
        TemporalSeries {
            pixel_change: Vec::new(),
            flow_magnitude: Vec::new(),
            flow_angle: Vec::new(),
        }
    };
    Ok(FeatureSeries {
        intensity,
        contrast,
        pixel_change: t.pixel_change,
        flow_magnitude: t.flow_magnitude,
        flow_angle: t.flow_angle,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::fixtures::{drifting_texture, PeriodicTexture};

    #[test]
    fn grayscale_weights() {
        let px = |r, g, b| grayscale(&Frame::new(1, 1, 3, vec![r, g, b]).unwrap())[0];
        assert!((px(1.0, 1.0, 1.0) - 1.0).abs() < 1e-6);
        assert!((px(1.0, 0.0, 0.0) - 0.299).abs() < 1e-7);
        assert_eq!(px(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn spatial_feature_examples() {
        let v = VideoTensor::rgb(vec![Frame::filled(8, 8, 3, 0.5); 3]).unwrap();
        let (i, c) = spatial_features(&v);
        assert!(i.iter().all(|&x| (x - 0.5).abs() < 1e-7));
        assert!(c.iter().all(|&x| x.abs() < 1e-7));
        let half: Vec<f32> = (0..64).map(|p| if p < 32 { 0.0 } else { 1.0 }).collect();
        let f = Frame::new(8, 8, 1, half).unwrap();
        assert!((contrast(&f) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn alternating_frames_change_fully() {
        let v = VideoTensor::rgb(vec![
            Frame::filled(8, 8, 3, 0.0),
            Frame::filled(8, 8, 3, 1.0),
            Frame::filled(8, 8, 3, 0.0),
        ])
        .unwrap();
        let s = temporal_features(&v, &FarnebackParams::default()).unwrap();
        assert_eq!(s.pixel_change, vec![1.0, 1.0]);
    }

    #[test]
    fn static_video_has_no_flow() {
        let tex = PeriodicTexture::new(64, 64, 1, 2);
        let v = VideoTensor::rgb(vec![tex.frame(0.0, 0.0); 3]).unwrap();
        let s = temporal_features(&v, &FarnebackParams::default()).unwrap();
        assert!(s.pixel_change.iter().all(|&p| p == 0.0));
        assert!(
            s.flow_magnitude.iter().all(|&m| m < 0.05),
            "{:?}",
            s.flow_magnitude
        );
    }

    #[test]
    fn translation_is_recovered() {
        let v = drifting_texture(3, 64, 64, (0.0, 2.0), 2).unwrap();
        let s = temporal_features(&v, &FarnebackParams::default()).unwrap();
        for (&m, &a) in s.flow_magnitude.iter().zip(&s.flow_angle) {
            assert!((1.7..=2.3).contains(&m), "{m}");
            assert!(a.abs() <= 0.2, "{a}");
        }
    }

    #[test]
    fn rigid_shifts_within_tolerance() {
        let gray = |f: &Frame| grayscale(f);
        for (k, &(dy, dx)) in [
            (0.0, 1.0),
            (1.0, -2.0),
            (-3.0, 0.0),
            (2.0, 2.0),
            (0.5, -1.5),
        ]
        .iter()
        .enumerate()
        {
            let tex = PeriodicTexture::new(64, 64, 10 + k as u64, 2);
            let (a, b) = (tex.frame(0.0, 0.0), tex.frame(dy, dx));
            let flow =
                farneback_flow(&gray(&a), &gray(&b), 64, 64, &FarnebackParams::default()).unwrap();
            let mae = flow
                .dx
                .iter()
                .zip(&flow.dy)
                .map(|(&fx, &fy)| ((fx - dx).powi(2) + (fy - dy).powi(2)).sqrt())
                .sum::<f64>()
                / flow.dx.len() as f64;
            assert!(mae <= 0.3, "shift ({dy}, {dx}): mean error {mae}");
        }
    }

    #[test]
    fn small_frames_reduce_levels() {
        assert_eq!(farneback::usable_levels(64, 64, 5), 5);
        assert_eq!(farneback::usable_levels(20, 40, 5), 4);
        assert_eq!(farneback::usable_levels(3, 3, 5), 1);
        let v = VideoTensor::rgb(vec![Frame::filled(12, 12, 3, 0.2); 2]).unwrap();
        assert!(temporal_features(&v, &FarnebackParams::default()).is_ok());
    }

    #[test]
    fn circular_mean_wraps() {
        let flow = Flow {
            height: 1,
            width: 2,
            dx: vec![-1.0, -1.0],
            dy: vec![0.1, -0.1],
        };
        let (m, a) = flow_summary(&flow);
        assert!((m - 1.0f64.hypot(0.1)).abs() < 1e-12);
        assert!((a - std::f64::consts::PI).abs() < 1e-12);
    }

    fn naive(v: &VideoTensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut inten = Vec::new();
        let mut con = Vec::new();
        let mut change = Vec::new();
        for (t, f) in v.frames().iter().enumerate() {
            let mut s = 0.0;
            let mut g = vec![];
            for y in 0..f.height {
                for x in 0..f.width {
                    let mut l = 0.0;
                    for (c, wgt) in [0.299, 0.587, 0.114].iter().enumerate() {
                        s += f.get(y, x, c) as f64;
                        l += wgt * f.get(y, x, c) as f64;
                    }
                    g.push(l);
                }
            }
            inten.push(s / (f.height * f.width * 3) as f64);
            let m = g.iter().sum::<f64>() / g.len() as f64;
            con.push((g.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / g.len() as f64).sqrt());
            if t > 0 {
                let p = v.frame(t - 1);
                let mut d = 0.0;
                for y in 0..f.height {
                    for x in 0..f.width {
                        for c in 0..3 {
                            d += (f.get(y, x, c) as f64 - p.get(y, x, c) as f64).abs();
                        }
                    }
                }
                change.push(d / (f.height * f.width * 3) as f64);
            }
        }
        (inten, con, change)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn features_match_loop_oracle(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = (0..3)
                .map(|_| Frame::new(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap())
                .collect();
            let v = VideoTensor::rgb(frames).unwrap();
            let (i, c) = spatial_features(&v);
            let (ni, nc, np) = naive(&v);
            for k in 0..3 {
                prop_assert!((i[k] - ni[k]).abs() <= 1e-6);
                prop_assert!((c[k] - nc[k]).abs() <= 1e-6);
                prop_assert!((0.0..=1.0).contains(&i[k]) && c[k] >= 0.0);
            }
            for t in 1..3 {
                let p = pixel_change(v.frame(t - 1), v.frame(t));
                prop_assert!((p - np[t - 1]).abs() <= 1e-6);
            }
        }
    }
}
