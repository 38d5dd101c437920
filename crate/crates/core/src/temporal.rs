//! Motion-energy temporal stream over frame pairs.
//!
//! A pair `(previous, current)` is converted to grayscale, stacked into a
//! `[1, 2, H, W]` volume and, at each spatial scale, filtered by a bank of
//! `K` space-time kernels (`[K, 1, 2, kh, kw]`, reflect padding). Responses
//! are squared, divisively normalized across channels and bilinearly
//! upsampled to the finest scale, giving a `[K·S, H·W]` activation map.
//!
//! Kernels are built analytically. A directional channel tuned to unit
//! direction `u` pairs an even kernel on the previous frame (the negated
//! second Gaussian derivative along `u`) with its odd quadrature partner on
//! the current frame (`(u·p)/σ² · G(p)`), so motion along `u` adds the two
//! responses in phase and motion against `u` cancels them. Besides the
//! direction channels there is a static channel (the same Laplacian of
//! Gaussian on both frames) and a flicker channel (opposite signs). Every
//! kernel is
//! zero-mean with unit L2 norm.

use std::sync::Arc;

use crate::autodiff::{Graph, NodeId, Padding};
use crate::error::{Error, Result};
use crate::interop::TensorArchive;
use crate::scalar::Scalar;
use crate::spatial::ActivationMap;
use crate::tensor::Tensor;
use crate::video::Frame;

pub const FILTERS_ENTRY: &str = "msoe.filters";

/// Energies are reported on the 0–255 scale of the spatial stream's input.
pub const DEFAULT_OUTPUT_SCALE: f64 = 255.0;

/// Channel names in bank order; a bank of `K` filters uses the first `K`.
pub const ORIENTATIONS: [&str; 8] = [
    "rightward",
    "leftward",
    "upward",
    "downward",
    "static",
    "flicker",
    "down_right",
    "up_right",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalParams {
    pub orientations: usize,
    pub scales: usize,
    pub kernel: usize,
    pub sigma: f64,
    pub epsilon: f64,
    /// Multiplies the normalized energies, which otherwise lie in `[0, 1]`.
    pub output_scale: f64,
}

impl Default for TemporalParams {
    fn default() -> Self {
        Self {
            orientations: 6,
            scales: 3,
            kernel: 11,
            sigma: 1.5,
            epsilon: 1e-6,
            output_scale: DEFAULT_OUTPUT_SCALE,
        }
    }
}

fn gaussian(x: f64, y: f64, sigma: f64) -> f64 {
    (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
}

fn even_part(u: (f64, f64), x: f64, y: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let d = u.0 * x + u.1 * y;
    (1.0 / s2 - d * d / (s2 * s2)) * gaussian(x, y, sigma)
}

fn odd_part(u: (f64, f64), x: f64, y: f64, sigma: f64) -> f64 {
    (u.0 * x + u.1 * y) / (sigma * sigma) * gaussian(x, y, sigma)
}

fn log_kernel(x: f64, y: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    ((x * x + y * y) / s2 - 2.0) / s2 * gaussian(x, y, sigma)
}

fn normalize(k: &mut [f64]) {
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        k.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Builds `[K, 2, kh, kw]` kernels (frame axis: previous, current).
pub fn analytic_filterbank(params: &TemporalParams) -> Result<Tensor<f64>> {
    let k = params.orientations;
    if !(2..=ORIENTATIONS.len()).contains(&k) {
        return Err(Error::InvalidArgument(format!(
            "filter bank needs 2 to {} orientations, got {k}",
            ORIENTATIONS.len()
        )));
    }
    let n = params.kernel;
    if n % 2 == 0 || n < 3 {
        return Err(Error::InvalidArgument(format!(
            "kernel side {n} must be odd and at least 3"
        )));
    }
    if !(params.sigma > 0.0) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    let half = (n / 2) as f64;
    let plane = n * n;
    let sigma = params.sigma;
    let unit = |k: &mut [f64]| {
        let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        k.iter_mut().for_each(|v| *v /= norm);
    };
    let directional = |u: (f64, f64)| {
        let mut out = vec![0.0; 2 * plane];
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (j as f64 - half, i as f64 - half);
                out[i * n + j] = even_part(u, x, y, sigma);
                out[plane + i * n + j] = odd_part(u, x, y, sigma);
            }
        }
        let (e, o) = out.split_at_mut(plane);
        unit(e);
        unit(o);
        normalize(&mut out);
        out
    };
    let mirror_x = |src: &[f64]| {
        let mut out = src.to_vec();
        for f in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    out[f * plane + i * n + j] = src[f * plane + i * n + (n - 1 - j)];
                }
            }
        }
        out
    };
    let mirror_y = |src: &[f64]| {
        let mut out = src.to_vec();
        for f in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    out[f * plane + i * n + j] = src[f * plane + (n - 1 - i) * n + j];
                }
            }
        }
        out
    };
    let log_pair = |sign: f64| {
        let mut out = vec![0.0; 2 * plane];
        for i in 0..n {
            for j in 0..n {
                let v = log_kernel(j as f64 - half, i as f64 - half, sigma);
                out[i * n + j] = sign * v;
                out[plane + i * n + j] = v;
            }
        }
        normalize(&mut out);
        out
    };

    let right = directional((1.0, 0.0));
    let down = directional((0.0, 1.0));
    let d = std::f64::consts::FRAC_1_SQRT_2;
    let left = mirror_x(&right);
    let up = mirror_y(&down);
    let mut bank = vec![
        right,
        left,
        up,
        down,
        log_pair(1.0),
        log_pair(-1.0),
        directional((d, d)),
        directional((d, -d)),
    ];
    bank.truncate(k);
    let data = bank.concat();
    Tensor::new(vec![k, 2, n, n], data)
}

#[derive(Clone, Debug)]
pub struct TemporalNetwork<S> {
    filters: Arc<Tensor<S>>,
    pub scales: usize,
    pub epsilon: f64,
    pub output_scale: f64,
}

impl<S: Scalar> TemporalNetwork<S> {
    pub fn analytic(params: &TemporalParams) -> Result<Self> {
        let bank = analytic_filterbank(params)?;
        let mut net = Self::from_filters(&bank.cast(), params.scales, params.epsilon)?;
        net.output_scale = params.output_scale;
        net.check_scale()?;
        Ok(net)
    }

    fn check_scale(&self) -> Result<()> {
        if self.output_scale > 0.0 && self.output_scale.is_finite() {
            Ok(())
        } else {
            Err(Error::Network(format!(
                "output scale {} must be positive",
                self.output_scale
            )))
        }
    }

    /// `filters` has shape `[K, 2, kh, kw]`.
    pub fn from_filters(filters: &Tensor<S>, scales: usize, epsilon: f64) -> Result<Self> {
        let &[k, 2, kh, kw] = filters.shape() else {
            return Err(Error::Network(format!(
                "temporal filters must be [K, 2, kh, kw], got {:?}",
                filters.shape()
            )));
        };
        if k == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Network(format!(
                "invalid temporal filter shape {:?}",
                filters.shape()
            )));
        }
        if scales == 0 {
            return Err(Error::Network(
                "temporal stream needs at least one scale".into(),
            ));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Network(
                "normalization epsilon must be positive".into(),
            ));
        }
        let weight = filters.clone().reshape(&[k, 1, 2, kh, kw])?;
        Ok(Self {
            filters: Arc::new(weight),
            scales,
            epsilon,
            output_scale: DEFAULT_OUTPUT_SCALE,
        })
    }

    /// Reads `msoe.filters` plus optional `msoe.scales`, `msoe.epsilon` and
    /// `msoe.output_scale` metadata.
    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let entry = archive
            .get(FILTERS_ENTRY)
            .ok_or_else(|| Error::Network(format!("missing entry {FILTERS_ENTRY:?}")))?;
        let meta = |key: &str, default: f64| -> Result<f64> {
            match archive.metadata.get(key) {
                Some(v) => v.trim().parse().map_err(|_| {
                    Error::Network(format!("metadata {key:?} = {v:?} is not a number"))
                }),
                None => Ok(default),
            }
        };
        let d = TemporalParams::default();
        let scales = meta("msoe.scales", d.scales as f64)?;
        if scales.fract() != 0.0 || scales < 1.0 {
            return Err(Error::Network(format!(
                "msoe.scales = {scales} is not a positive integer"
            )));
        }
        let mut net = Self::from_filters(
            &entry.to_tensor(),
            scales as usize,
            meta("msoe.epsilon", d.epsilon)?,
        )?;
        net.output_scale = meta("msoe.output_scale", d.output_scale)?;
        net.check_scale()?;
        Ok(net)
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let s = self.filters.shape();
        let flat = self
            .filters
            .as_ref()
            .clone()
            .reshape(&[s[0], 2, s[3], s[4]])?;
        let mut a = TensorArchive::new();
        a.insert_tensor(FILTERS_ENTRY, &flat)?;
        a.metadata
            .insert("msoe.scales".into(), self.scales.to_string());
        a.metadata
            .insert("msoe.epsilon".into(), self.epsilon.to_string());
        a.metadata
            .insert("msoe.output_scale".into(), self.output_scale.to_string());
        Ok(a)
    }

    pub fn orientations(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.orientations() * self.scales
    }

    pub fn filters(&self) -> &Tensor<S> {
        &self.filters
    }

    /// Appends the stream for `[3, H, W]` nodes `cur` and `prev`, returning
    /// the `[K·S, H·W]` activation node.
    pub fn build(&self, graph: &mut Graph<S>, cur: NodeId, prev: NodeId) -> Result<NodeId> {
        let shape = graph.shape(cur).to_vec();
        if graph.shape(prev) != shape.as_slice() {
            return Err(Error::shape(
                "temporal input",
                format!(
                    "frame shapes differ: {:?} vs {:?}",
                    graph.shape(prev),
                    shape
                ),
            ));
        }
        let &[_, h, w] = shape.as_slice() else {
            return Err(Error::shape(
                "temporal input",
                format!("expected [C, H, W], got {shape:?}"),
            ));
        };
        let gp = graph.grayscale(prev)?;
        let gc = graph.grayscale(cur)?;
        let mut level = graph.concat(&[gp, gc])?;
        let mut maps = Vec::with_capacity(self.scales);
        for s in 0..self.scales {
            if s > 0 {
                level = graph.avgpool2(level)?;
            }
            let ls = graph.shape(level).to_vec();
            let vol = graph.reshape(level, &[1, 2, ls[1], ls[2]])?;
            let resp = graph.conv3d(vol, self.filters.clone(), Padding::Reflect)?;
            let k = self.orientations();
            let resp = graph.reshape(resp, &[k, ls[1], ls[2]])?;
            let energy = graph.square(resp)?;
            let norm = graph.divnorm(energy, self.epsilon)?;
            graph.label(norm, format!("msoe.scale{s}"));
            let up = if s == 0 {
                norm
            } else {
                graph.resize(norm, h, w)?
            };
            maps.push(up);
        }
        let all = if maps.len() == 1 {
            maps[0]
        } else {
            graph.concat(&maps)?
        };
        let all = if self.output_scale == 1.0 {
            all
        } else {
            graph.scale(all, self.output_scale)?
        };
        graph.reshape(all, &[self.channels(), h * w])
    }

    pub fn activations(&self, cur: &Frame, prev: &Frame) -> Result<ActivationMap<S>> {
        if !cur.same_dims(prev) {
            return Err(Error::InvalidArgument(
                "temporal frames differ in size".into(),
            ));
        }
        let mut g = Graph::new();
        let shape = [cur.channels, cur.height, cur.width];
        let c = g.input("cur", &shape)?;
        let p = g.input("prev", &shape)?;
        let out = self.build(&mut g, c, p)?;
        let t = g
            .forward_eval(out, &[("cur", cur.to_chw()), ("prev", prev.to_chw())])?
            .clone();
        ActivationMap::from_tensor("msoe", &t)
    }
}
