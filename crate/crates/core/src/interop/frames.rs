//! Videos as directories of frame files plus a `video.meta` file.
//!
//! ```text
//! frames = 120
//! height = 360
//! width = 640
//! channels = 3
//! fps = 60/1
//! format = png8
//! color_space = rgb
//! ```
//!
//! `png8` frames are 8-bit PNGs quantized with round-half-to-even of
//! `v · 255`. `raw32` frames are planar `[C, H, W]` little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::video::{ColorSpace, Fps, Frame, VideoTensor};

pub const META_FILE: &str = "video.meta";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFormat {
    Png8,
    Raw32,
}

impl FrameFormat {
    fn extension(self) -> &'static str {
        match self {
            FrameFormat::Png8 => "png",
            FrameFormat::Raw32 => "f32",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FrameFormat::Png8 => "png8",
            FrameFormat::Raw32 => "raw32",
        }
    }
}

impl FromStr for FrameFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png8" => Ok(FrameFormat::Png8),
            "raw32" => Ok(FrameFormat::Raw32),
            _ => Err(Error::InvalidArgument(format!(
                "unknown frame format {s:?} (expected png8 or raw32)"
            ))),
        }
    }
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

fn frame_name(t: usize, format: FrameFormat) -> String {
    format!("frame_{t:06}.{}", format.extension())
}

pub fn save_video(v: &VideoTensor, dir: &Path, format: FrameFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, f) in v.frames().iter().enumerate() {
        let path = dir.join(frame_name(t, format));
        match format {
            FrameFormat::Png8 => {
                let bytes: Vec<u8> = f.data.iter().map(|&x| quantize_u8(x)).collect();
                let (w, h) = (f.width as u32, f.height as u32);
                let err = |e: image::ImageError| Error::Frame {
                    path: path.clone(),
                    detail: e.to_string(),
                };
                match v.color_space {
                    ColorSpace::Rgb => image::RgbImage::from_raw(w, h, bytes)
                        .expect("buffer sized to frame")
                        .save(&path)
                        .map_err(err)?,
                    ColorSpace::Grayscale => image::GrayImage::from_raw(w, h, bytes)
                        .expect("buffer sized to frame")
                        .save(&path)
                        .map_err(err)?,
                }
            }
            FrameFormat::Raw32 => {
                let chw = f.to_chw::<f32>();
                let bytes: Vec<u8> = chw.data().iter().flat_map(|x| x.to_le_bytes()).collect();
                fs::write(&path, bytes)?;
            }
        }
    }
    let meta = format!(
        "frames = {}\nheight = {}\nwidth = {}\nchannels = {}\nfps = {}\nformat = {}\ncolor_space = {}\n",
        v.len(),
        v.height(),
        v.width(),
        v.channels(),
        v.fps,
        format.as_str(),
        v.color_space.as_str()
    );
    fs::write(dir.join(META_FILE), meta)?;
    Ok(())
}

fn parse_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Frame {
        path: path.to_path_buf(),
        detail: format!("cannot read metadata: {e}"),
    })?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Frame {
            path: path.to_path_buf(),
            detail: format!("malformed line {line:?}"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load_video(dir: &Path) -> Result<VideoTensor> {
    let meta_path = dir.join(META_FILE);
    if !dir.is_dir() {
        return Err(Error::Frame {
            path: dir.to_path_buf(),
            detail: "not a directory".into(),
        });
    }
    let meta = parse_meta(&meta_path)?;
    let field = |k: &str| -> Result<&str> {
        meta.get(k).map(String::as_str).ok_or_else(|| Error::Frame {
            path: meta_path.clone(),
            detail: format!("missing key {k:?}"),
        })
    };
    let bad = |k: &str| Error::Frame {
        path: meta_path.clone(),
        detail: format!("invalid value for {k:?}"),
    };
    let format: FrameFormat = field("format")?.parse()?;
    let fps: Fps = field("fps")?.parse()?;
    let color_space: ColorSpace = meta
        .get("color_space")
        .map_or(Ok(ColorSpace::Rgb), |s| s.parse())?;
    let count: usize = field("frames")?.parse().map_err(|_| bad("frames"))?;
    let height: usize = field("height")?.parse().map_err(|_| bad("height"))?;
    let width: usize = field("width")?.parse().map_err(|_| bad("width"))?;
    let channels = color_space.channels();

    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(format.extension()))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Frame {
            path: dir.to_path_buf(),
            detail: "no frame files".into(),
        });
    }
    if files.len() != count {
        return Err(Error::Frame {
            path: meta_path.clone(),
            detail: format!("declares {count} frames, directory holds {}", files.len()),
        });
    }

    let mut frames = Vec::with_capacity(files.len());
    for path in &files {
        let frame = match format {
            FrameFormat::Png8 => {
                let img = image::open(path).map_err(|e| Error::Frame {
                    path: path.clone(),
                    detail: e.to_string(),
                })?;
                if (img.height() as usize, img.width() as usize) != (height, width) {
                    return Err(Error::Frame {
                        path: path.clone(),
                        detail: format!(
                            "is {}x{}, expected {height}x{width}",
                            img.height(),
                            img.width()
                        ),
                    });
                }
                let data = match color_space {
                    ColorSpace::Rgb => img.to_rgb32f().into_raw(),
                    ColorSpace::Grayscale => img.to_luma32f().into_raw(),
                };
                Frame::new(height, width, channels, data)?
            }
            FrameFormat::Raw32 => {
                let bytes = fs::read(path)?;
                let n = height * width * channels;
                if bytes.len() != n * 4 {
                    return Err(Error::Frame {
                        path: path.clone(),
                        detail: format!("holds {} bytes, expected {}", bytes.len(), n * 4),
                    });
                }
                let planar: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                let t = crate::tensor::Tensor::new(vec![channels, height, width], planar)?;
                Frame::from_chw(&t)?
            }
        };
        if !frame.in_unit_range() {
            return Err(Error::Frame {
                path: path.clone(),
                detail: "values outside [0, 1]".into(),
            });
        }
        frames.push(frame);
    }
    VideoTensor::new(frames, fps, color_space)
}
