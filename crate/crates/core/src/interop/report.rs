//! CSV reports: feature time courses and per-iteration loss logs.
//!
//! Files have a header row, `.` decimals and LF line endings. Numbers use
//! the shortest representation that reads back exactly; NaN is written as
//! `nan` and infinities as `inf` / `-inf`.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureSeries;
use crate::synth::LossRecord;

pub const FEATURE_HEADER: [&str; 6] = [
    "frame",
    "intensity",
    "contrast",
    "pixel_change",
    "flow_magnitude",
    "flow_angle",
];

pub const LOSS_HEADER: [&str; 9] = [
    "frame",
    "octave",
    "iteration",
    "spatial_content",
    "spatial_texture",
    "temporal_content",
    "temporal_texture",
    "tv",
    "total",
];

pub fn format_number(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        v.to_string()
    }
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

/// One row per frame; the per-pair columns are blank on the first row.
pub fn write_feature_csv_to<W: Write>(series: &FeatureSeries, out: W) -> Result<()> {
    let t = series.frames();
    let pairs = t.saturating_sub(1);
    if series.contrast.len() != t {
        return Err(Error::Series(format!(
            "{} intensity values but {} contrast values",
            t,
            series.contrast.len()
        )));
    }
    for (name, col) in [
        ("pixel_change", &series.pixel_change),
        ("flow_magnitude", &series.flow_magnitude),
        ("flow_angle", &series.flow_angle),
    ] {
        if col.len() != pairs {
            return Err(Error::Series(format!(
                "{name} has {} values; {t} frames need {pairs}",
                col.len()
            )));
        }
    }
    let mut w = writer(out);
    w.write_record(FEATURE_HEADER)?;
    for i in 0..t {
        let pair = |c: &[f64]| {
            if i == 0 {
                String::new()
            } else {
                format_number(c[i - 1])
            }
        };
        w.write_record([
            i.to_string(),
            format_number(series.intensity[i]),
            format_number(series.contrast[i]),
            pair(&series.pixel_change),
            pair(&series.flow_magnitude),
            pair(&series.flow_angle),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_feature_csv(series: &FeatureSeries, path: &Path) -> Result<()> {
    write_feature_csv_to(series, File::create(path)?)
}

/// Streams [`LossRecord`]s as they are produced.
pub struct LossLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl LossLogWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(File::create(path)?)
    }
}

impl<W: Write> LossLogWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = writer(out);
        inner.write_record(LOSS_HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &LossRecord) -> Result<()> {
        let b = &r.breakdown;
        self.inner.write_record([
            r.frame.to_string(),
            r.octave.to_string(),
            r.iteration.to_string(),
            format_number(b.spatial_content),
            format_number(b.spatial_texture),
            format_number(b.temporal_content),
            format_number(b.temporal_texture),
            format_number(b.tv),
            format_number(b.total),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::analyze;
    use crate::features::FarnebackParams;
    use crate::objective::LossBreakdown;
    use crate::video::{Frame, VideoTensor};

    fn csv_text(s: &FeatureSeries) -> String {
        let mut buf = Vec::new();
        write_feature_csv_to(s, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn constant_video_rows() {
        let v = VideoTensor::rgb(vec![Frame::filled(16, 16, 3, 0.25); 3]).unwrap();
        let text = csv_text(&analyze(&v, &FarnebackParams::default()).unwrap());
        let lines: Vec<&str> = text.split('\n').collect();
        assert_eq!(lines[0], FEATURE_HEADER.join(","));
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "");
        assert!(!text.contains('\r'));
        let cells = |l: &str| l.split(',').map(String::from).collect::<Vec<_>>();
        assert_eq!(cells(lines[1])[3], "");
        let filled = lines[1..4]
            .iter()
            .filter(|l| !cells(l)[3].is_empty())
            .count();
        assert_eq!(filled, 2);
        assert_eq!(cells(lines[2])[3], "0");
    }

    #[test]
    fn empty_and_nan() {
        let empty = FeatureSeries {
            intensity: vec![],
            contrast: vec![],
            pixel_change: vec![],
            flow_magnitude: vec![],
            flow_angle: vec![],
        };
        assert_eq!(csv_text(&empty), FEATURE_HEADER.join(",") + "\n");
        let s = FeatureSeries {
            intensity: vec![0.5, f64::NAN],
            contrast: vec![0.1, 0.2],
            pixel_change: vec![f64::NAN],
            flow_magnitude: vec![f64::INFINITY],
            flow_angle: vec![-0.25],
        };
        assert_eq!(
            csv_text(&s).lines().nth(2).unwrap(),
            "1,nan,0.2,nan,inf,-0.25"
        );
        let bad = FeatureSeries {
            pixel_change: vec![],
            ..s
        };
        let mut buf = Vec::new();
        assert!(matches!(
            write_feature_csv_to(&bad, &mut buf),
            Err(Error::Series(_))
        ));
    }

    #[test]
    fn loss_log_rows() {
        let mut w = LossLogWriter::new(Vec::new()).unwrap();
        let breakdown = LossBreakdown {
            spatial_texture: 2.5,
            tv: 0.125,
            total: 2.5625,
            ..Default::default()
        };
        w.write(&LossRecord {
            frame: -2,
            octave: -1,
            iteration: 7,
            breakdown,
        })
        .unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        assert_eq!(
            text,
            format!(
                "{}\n-2,-1,7,0,2.5,0,0,0.125,2.5625\n",
                LOSS_HEADER.join(",")
            )
        );
    }
}
