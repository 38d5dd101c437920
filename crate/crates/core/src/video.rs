//! Frames and videos of pixel intensities in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Grayscale,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb => 3,
            ColorSpace::Grayscale => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColorSpace::Rgb => "rgb",
            ColorSpace::Grayscale => "grayscale",
        }
    }
}

impl FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(ColorSpace::Rgb),
            "grayscale" | "gray" => Ok(ColorSpace::Grayscale),
            _ => Err(Error::InvalidVideo(format!("unknown color space {s:?}"))),
        }
    }
}

/// Frames per second as a positive rational.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fps {
    pub num: u32,
    pub den: u32,
}

impl Fps {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidVideo(format!(
                "fps {num}/{den} must be positive"
            )));
        }
        Ok(Self { num, den })
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Default for Fps {
    fn default() -> Self {
        Self { num: 60, den: 1 }
    }
}

impl fmt::Display for Fps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fps {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidVideo(format!("cannot parse fps {s:?}"));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        Fps::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

/// One `H × W × C` frame, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidVideo(format!(
                "frame dimensions {height}x{width}x{channels} must be positive"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidVideo(format!(
                "frame {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    /// Planar `[C, H, W]` tensor for the autodiff graph.
    pub fn to_chw<S: Scalar>(&self) -> Tensor<S> {
        let (p, c) = (self.pixels(), self.channels);
        let mut out = vec![S::zero(); p * c];
        for i in 0..p {
            for ch in 0..c {
                out[ch * p + i] = S::of(self.data[i * c + ch] as f64);
            }
        }
        Tensor::new(vec![c, self.height, self.width], out).expect("dimensions are positive")
    }

    pub fn from_chw<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let &[c, h, w] = t.shape() else {
            return Err(Error::InvalidVideo(format!(
                "expected a [C, H, W] tensor, got {:?}",
                t.shape()
            )));
        };
        let p = h * w;
        let src = t.data();
        let mut data = vec![0.0f32; p * c];
        for ch in 0..c {
            for i in 0..p {
                data[i * c + ch] = src[ch * p + i].f64() as f32;
            }
        }
        Frame::new(h, w, c, data)
    }

    /// Single channel plane `c`.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Luma plane; the frame itself when single-channel.
    pub fn luma(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let [r, g, b] = kernels::LUMA;
        self.data
            .chunks_exact(self.channels)
            .map(|px| (r * px[0] as f64 + g * px[1] as f64 + b * px[2] as f64) as f32)
            .collect()
    }

    pub fn to_rgb(&self) -> Frame {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Frame {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    pub fn clamp_unit(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Bilinear resize with the same convention as the graph resize node.
    pub fn resize(&self, height: usize, width: usize) -> Frame {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let chw = self.to_chw::<f32>();
        let out = kernels::resize_bilinear(
            chw.data(),
            self.channels,
            self.height,
            self.width,
            height,
            width,
        );
        let t = Tensor::new(vec![self.channels, height, width], out).expect("positive size");
        Frame::from_chw(&t).expect("rank 3")
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// `T × H × W × C` video with a frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    frames: Vec<Frame>,
    pub fps: Fps,
    pub color_space: ColorSpace,
}

impl VideoTensor {
    pub fn new(frames: Vec<Frame>, fps: Fps, color_space: ColorSpace) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidVideo("a video needs at least one frame".into()))?;
        if first.channels != color_space.channels() {
            return Err(Error::InvalidVideo(format!(
                "{} video must have {} channels, got {}",
                color_space.as_str(),
                color_space.channels(),
                first.channels
            )));
        }
        for (t, f) in frames.iter().enumerate() {
            if !f.same_dims(first) {
                return Err(Error::InvalidVideo(format!(
                    "frame {t} is {}x{}x{}, frame 0 is {}x{}x{}",
                    f.height, f.width, f.channels, first.height, first.width, first.channels
                )));
            }
            if !f.in_unit_range() {
                return Err(Error::InvalidVideo(format!(
                    "frame {t} has values outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            frames,
            fps,
            color_space,
        })
    }

    /// RGB video at the default frame rate.
    pub fn rgb(frames: Vec<Frame>) -> Result<Self> {
        Self::new(frames, Fps::default(), ColorSpace::Rgb)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn to_rgb(&self) -> VideoTensor {
        VideoTensor {
            frames: self.frames.iter().map(Frame::to_rgb).collect(),
            fps: self.fps,
            color_space: ColorSpace::Rgb,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_round_trip() {
        let f = Frame::new(2, 3, 3, (0..18).map(|i| i as f32 / 17.0).collect()).unwrap();
        let t = f.to_chw::<f32>();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(t.data()[6], f.get(0, 0, 1));
        assert_eq!(Frame::from_chw(&t).unwrap(), f);
    }

    #[test]
    fn video_invariants() {
        assert!(VideoTensor::rgb(vec![]).is_err());
        assert!(VideoTensor::rgb(vec![Frame::filled(2, 2, 1, 0.5)]).is_err());
        assert!(VideoTensor::rgb(vec![Frame::filled(2, 2, 3, 1.5)]).is_err());
        assert!(VideoTensor::rgb(vec![
            Frame::filled(2, 2, 3, 0.5),
            Frame::filled(2, 3, 3, 0.5)
        ])
        .is_err());
        let v = VideoTensor::new(
            vec![Frame::filled(2, 2, 1, 0.1)],
            Fps::new(30, 1).unwrap(),
            ColorSpace::Grayscale,
        )
        .unwrap();
        assert_eq!(v.to_rgb().channels(), 3);
    }

    #[test]
    fn fps_parsing() {
        assert_eq!("60".parse::<Fps>().unwrap(), Fps::new(60, 1).unwrap());
        assert_eq!(
            "30000/1001".parse::<Fps>().unwrap().to_string(),
            "30000/1001"
        );
        assert!("0/1".parse::<Fps>().is_err());
        assert!("x".parse::<Fps>().is_err());
    }
}
