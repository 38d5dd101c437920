//! Flat `key = value` run configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Every key has a default, so an empty file is valid;
//! [`RunConfig::to_text`] writes the fully resolved configuration and parses
//! back to the same values.
//!
//! ```text
//! target = clips/waves
//! octave.iters = 250,750,1000
//! blend = 0.95
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::color::ColorTransferParams;
use crate::error::{Error, Result};
use crate::features::FarnebackParams;
use crate::interop::{read_archive, FrameFormat};
use crate::objective::LossWeights;
use crate::scalar::Scalar;
use crate::spatial::{LayerPlan, Pooling, SpatialNetwork};
use crate::synth::{Octave, OctaveSchedule, SynthesisConfig};
use crate::temporal::{TemporalNetwork, TemporalParams, FILTERS_ENTRY};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Path,
    Float,
    Count,
    Seed,
    Bool,
    Ints,
    Counts,
    Floats,
    Names,
    Pooling,
    Format,
}

/// Every accepted key, its value kind, default and description, in the
/// order they are written out.
const KEYS: &[(&str, Kind, &str, &str)] = &[
    (
        "target",
        Kind::Path,
        "",
        "target video for every term without its own",
    ),
    (
        "target.spatial_content",
        Kind::Path,
        "",
        "spatial content target",
    ),
    (
        "target.spatial_texture",
        Kind::Path,
        "",
        "spatial texture target",
    ),
    (
        "target.temporal_content",
        Kind::Path,
        "",
        "temporal content target",
    ),
    (
        "target.temporal_texture",
        Kind::Path,
        "",
        "temporal texture target",
    ),
    ("output", Kind::Path, "out", "output directory"),
    ("output.format", Kind::Format, "png8", "png8 or raw32"),
    (
        "seed",
        Kind::Seed,
        "0",
        "noise seed for synthesis and phase scrambling",
    ),
    ("loss.spatial_content", Kind::Float, "0", "alpha"),
    ("loss.spatial_texture", Kind::Float, "1", "beta"),
    ("loss.temporal_content", Kind::Float, "0", "theta"),
    ("loss.temporal_texture", Kind::Float, "1", "lambda"),
    ("octave.scale", Kind::Float, "1.5", "octave scale sigma"),
    (
        "octave.exponents",
        Kind::Ints,
        "-2,-1,0",
        "octave exponents, coarse to fine",
    ),
    (
        "octave.iters",
        Kind::Counts,
        "250,750,1000",
        "iterations per octave",
    ),
    (
        "octave.lr",
        Kind::Floats,
        "0.001,0.003,0.005",
        "learning rate per octave",
    ),
    (
        "octave.tv",
        Kind::Floats,
        "0.05,0.1,0.5",
        "total variation weight per octave",
    ),
    ("blend", Kind::Float, "0.95", "blending ratio phi"),
    ("padding", Kind::Count, "5", "mirror padding frames xi"),
    (
        "color.enabled",
        Kind::Bool,
        "true",
        "color transfer after each frame",
    ),
    (
        "color.rotations",
        Kind::Count,
        "20",
        "rotated marginal matching passes",
    ),
    ("color.bins", Kind::Count, "256", "quantile bins"),
    (
        "color.regrain",
        Kind::Bool,
        "true",
        "gradient-preserving regrain",
    ),
    ("color.seed", Kind::Seed, "0", "rotation seed"),
    (
        "network.weights",
        Kind::Path,
        "",
        "STTA weight archive; synthetic weights when empty",
    ),
    (
        "network.seed",
        Kind::Seed,
        "0",
        "seed of synthetic spatial weights",
    ),
    (
        "spatial.layers",
        Kind::Names,
        "conv1_1,conv2_1,conv3_1,conv4_1,conv5_1",
        "selected layers",
    ),
    ("spatial.pooling", Kind::Pooling, "max", "max or avg"),
    (
        "spatial.width_divisor",
        Kind::Count,
        "1",
        "divides every layer's filter count",
    ),
    (
        "temporal.orientations",
        Kind::Count,
        "6",
        "analytic filter count K",
    ),
    ("temporal.scales", Kind::Count, "3", "pyramid scales S"),
    ("temporal.kernel", Kind::Count, "11", "analytic kernel side"),
    (
        "temporal.sigma",
        Kind::Float,
        "1.5",
        "analytic kernel Gaussian sigma",
    ),
    (
        "temporal.epsilon",
        Kind::Float,
        "1e-6",
        "divisive normalization constant",
    ),
    (
        "temporal.output_scale",
        Kind::Float,
        "255",
        "multiplier on normalized energies",
    ),
    (
        "flow.pyramid_scale",
        Kind::Float,
        "0.5",
        "Farneback pyramid scale",
    ),
    ("flow.levels", Kind::Count, "5", "Farneback pyramid levels"),
    (
        "flow.window",
        Kind::Count,
        "13",
        "Farneback averaging window",
    ),
    (
        "flow.iterations",
        Kind::Count,
        "10",
        "Farneback iterations per level",
    ),
    (
        "flow.poly_n",
        Kind::Count,
        "5",
        "Farneback polynomial neighbourhood",
    ),
    (
        "flow.poly_sigma",
        Kind::Float,
        "1.1",
        "Farneback polynomial sigma",
    ),
];

fn lookup(key: &str) -> Result<(&'static str, Kind)> {
    KEYS.iter()
        .find(|k| k.0 == key)
        .map(|k| (k.0, k.1))
        .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))
}

fn list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    if v.trim().is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn check_value(kind: Kind, v: &str) -> std::result::Result<(), &'static str> {
    let ok = match kind {
        Kind::Path => true,
        Kind::Float => v.parse::<f64>().is_ok(),
        Kind::Count => v.parse::<usize>().is_ok(),
        Kind::Seed => v.parse::<u64>().is_ok(),
        Kind::Bool => matches!(v, "true" | "false"),
        Kind::Ints => list::<i32>(v).is_some(),
        Kind::Counts => list::<usize>(v).is_some(),
        Kind::Floats => list::<f64>(v).is_some(),
        Kind::Names => true,
        Kind::Pooling => v.parse::<Pooling>().is_ok(),
        Kind::Format => v.parse::<FrameFormat>().is_ok(),
    };
    if ok {
        return Ok(());
    }
    Err(match kind {
        Kind::Float => "a number",
        Kind::Count => "a nonnegative integer",
        Kind::Seed => "an unsigned 64-bit integer",
        Kind::Bool => "true or false",
        Kind::Ints => "comma-separated integers",
        Kind::Counts => "comma-separated nonnegative integers",
        Kind::Floats => "comma-separated numbers",
        Kind::Pooling => "max or avg",
        Kind::Format => "png8 or raw32",
        Kind::Path | Kind::Names => unreachable!(),
    })
}

/// Target video paths per loss term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetPaths {
    pub spatial_content: Option<PathBuf>,
    pub spatial_texture: Option<PathBuf>,
    pub temporal_content: Option<PathBuf>,
    pub temporal_texture: Option<PathBuf>,
}

impl TargetPaths {
    /// Distinct paths in first-use order.
    pub fn distinct(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = Vec::new();
        for p in [
            &self.spatial_content,
            &self.spatial_texture,
            &self.temporal_content,
            &self.temporal_texture,
        ]
        .into_iter()
        .flatten()
        {
            if !out.contains(&p.as_path()) {
                out.push(p);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub layers: Vec<String>,
    pub pooling: Pooling,
    pub width_divisor: usize,
    pub temporal: TemporalParams,
}

impl NetworkConfig {
    pub fn plan(&self) -> Result<LayerPlan> {
        if self.width_divisor == 0 {
            return Err(Error::Config(
                "spatial.width_divisor must be at least 1".into(),
            ));
        }
        Ok(LayerPlan::vgg19_scaled(self.width_divisor))
    }

    /// Loads both streams from the archive, or builds synthetic spatial
    /// weights and the analytic temporal bank. An archive without
    /// temporal filters also falls back to the analytic bank.
    pub fn build<S: Scalar>(&self) -> Result<(SpatialNetwork<S>, TemporalNetwork<S>)> {
        let layers: Vec<&str> = self.layers.iter().map(String::as_str).collect();
        let plan = self.plan()?;
        match &self.weights {
            None => Ok((
                SpatialNetwork::synthetic(plan, &layers, self.seed, self.pooling)?,
                TemporalNetwork::analytic(&self.temporal)?,
            )),
            Some(path) => {
                let archive = read_archive(path)?;
                let spatial = SpatialNetwork::from_archive(&archive, plan, &layers, self.pooling)?;
                let temporal = if archive.get(FILTERS_ENTRY).is_some() {
                    TemporalNetwork::from_archive(&archive)?
                } else {
                    TemporalNetwork::analytic(&self.temporal)?
                };
                Ok((spatial, temporal))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.0, k.2.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    n + 1
                ))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key; the value is kept verbatim.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, kind) = lookup(key)?;
        let value = value.trim();
        check_value(kind, value)
            .map_err(|want| Error::Config(format!("{key} = {value:?}: expected {want}")))?;
        self.values.insert(key, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        let (key, _) = lookup(key)?;
        Ok(&self.values[key])
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> T {
        // values are checked on insertion
        self.values[key].parse().ok().expect("checked config value")
    }

    fn parsed_list<T: std::str::FromStr>(&self, key: &str) -> Vec<T> {
        list(&self.values[key]).expect("checked config value")
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = &self.values[key];
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// All keys in canonical order with a comment describing each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _, _, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.values[key]));
        }
        out
    }

    pub fn seed(&self) -> u64 {
        self.parsed("seed")
    }

    pub fn output(&self) -> Option<PathBuf> {
        self.path("output")
    }

    pub fn format(&self) -> FrameFormat {
        self.parsed("output.format")
    }

    pub fn targets(&self) -> TargetPaths {
        let all = self.path("target");
        let term = |k: &str| self.path(k).or_else(|| all.clone());
        TargetPaths {
            spatial_content: term("target.spatial_content"),
            spatial_texture: term("target.spatial_texture"),
            temporal_content: term("target.temporal_content"),
            temporal_texture: term("target.temporal_texture"),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            spatial_content: self.parsed("loss.spatial_content"),
            spatial_texture: self.parsed("loss.spatial_texture"),
            temporal_content: self.parsed("loss.temporal_content"),
            temporal_texture: self.parsed("loss.temporal_texture"),
        }
    }

    pub fn color(&self) -> ColorTransferParams {
        ColorTransferParams {
            rotations: self.parsed("color.rotations"),
            bins: self.parsed("color.bins"),
            regrain: self.parsed("color.regrain"),
            seed: self.parsed("color.seed"),
        }
    }

    pub fn schedule(&self) -> Result<OctaveSchedule> {
        let exps: Vec<i32> = self.parsed_list("octave.exponents");
        let iters: Vec<usize> = self.parsed_list("octave.iters");
        let lrs: Vec<f64> = self.parsed_list("octave.lr");
        let tvs: Vec<f64> = self.parsed_list("octave.tv");
        if [iters.len(), lrs.len(), tvs.len()]
            .iter()
            .any(|&n| n != exps.len())
        {
            return Err(Error::Config(format!(
                "octave lists differ in length: {} exponents, {} iters, {} lr, {} tv",
                exps.len(),
                iters.len(),
                lrs.len(),
                tvs.len()
            )));
        }
        let octaves = (0..exps.len())
            .map(|i| Octave {
                exponent: exps[i],
                iterations: iters[i],
                learning_rate: lrs[i],
                tv_weight: tvs[i],
            })
            .collect();
        let schedule = OctaveSchedule {
            scale: self.parsed("octave.scale"),
            octaves,
        };
        schedule.check()?;
        Ok(schedule)
    }

    /// The synthesis settings, checked except for frame-size constraints.
    pub fn synthesis(&self) -> Result<SynthesisConfig> {
        let cfg = SynthesisConfig {
            schedule: self.schedule()?,
            weights: self.weights(),
            blend: self.parsed("blend"),
            padding: self.parsed("padding"),
            seed: self.seed(),
            color: self.parsed::<bool>("color.enabled").then(|| self.color()),
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let layers: Vec<String> = self.parsed_list("spatial.layers");
        let cfg = NetworkConfig {
            weights: self.path("network.weights"),
            seed: self.parsed("network.seed"),
            layers,
            pooling: self.parsed("spatial.pooling"),
            width_divisor: self.parsed("spatial.width_divisor"),
            temporal: TemporalParams {
                orientations: self.parsed("temporal.orientations"),
                scales: self.parsed("temporal.scales"),
                kernel: self.parsed("temporal.kernel"),
                sigma: self.parsed("temporal.sigma"),
                epsilon: self.parsed("temporal.epsilon"),
                output_scale: self.parsed("temporal.output_scale"),
            },
        };
        let plan = cfg.plan()?;
        if cfg.layers.is_empty() {
            return Err(Error::Config("spatial.layers is empty".into()));
        }
        if let Some(l) = cfg.layers.iter().find(|l| !plan.contains(l)) {
            return Err(Error::Config(format!("unknown spatial layer {l:?}")));
        }
        Ok(cfg)
    }

    pub fn flow(&self) -> Result<FarnebackParams> {
        let p = FarnebackParams {
            pyramid_scale: self.parsed("flow.pyramid_scale"),
            levels: self.parsed("flow.levels"),
            window: self.parsed("flow.window"),
            iterations: self.parsed("flow.iterations"),
            poly_n: self.parsed("flow.poly_n"),
            poly_sigma: self.parsed("flow.poly_sigma"),
        };
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }

    /// Resolves every section so that configuration errors surface before
    /// any work starts.
    pub fn validate(&self) -> Result<()> {
        self.synthesis()?;
        self.network()?;
        self.flow()?;
        self.color().validate()?;
        Ok(())
    }
}
