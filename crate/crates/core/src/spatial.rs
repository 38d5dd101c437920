//! VGG-19-style spatial stream up to `conv5_1`.
//!
//! Weights come from an `STTA` archive (`vgg.<layer>.weight` with shape
//! `[out, in, 3, 3]`, `vgg.<layer>.bias` with shape `[out]`) or are drawn
//! from a seeded generator. Input preprocessing is archive metadata:
//!
//! * `vgg.input_scale`: multiplier applied to `[0, 1]` pixels (default 1)
//! * `vgg.mean`, `vgg.std`: comma-separated per-channel constants in the
//!   network's channel order (defaults 0 and 1)
//! * `vgg.channel_order`: `rgb` (default) or `bgr`

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, NodeId, Padding};
use crate::error::{Error, Result};
use crate::interop::TensorArchive;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::Frame;

/// Filter counts of the VGG-19 convolutions up to `conv5_1`.
pub const VGG19_FILTERS: [usize; 13] = [
    64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512,
];

/// Texture layers used by default.
pub const DEFAULT_LAYERS: [&str; 5] = ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"];

const BLOCK_SIZES: [usize; 5] = [2, 2, 4, 4, 1];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    Conv { name: String, filters: usize },
    Pool,
}

/// Ordered convolution and pooling stages. Every convolution is 3×3,
/// zero-padded and followed by a rectifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    stages: Vec<Stage>,
}

impl LayerPlan {
    pub fn vgg19() -> Self {
        Self::from_filters(VGG19_FILTERS)
    }

    /// The VGG-19 topology with every filter count divided by `divisor`
    /// (at least one filter per layer). Used with synthetic weights.
    pub fn vgg19_scaled(divisor: usize) -> Self {
        Self::from_filters(VGG19_FILTERS.map(|f| (f / divisor.max(1)).max(1)))
    }

    pub fn from_filters(filters: [usize; 13]) -> Self {
        let mut stages = Vec::new();
        let mut it = filters.into_iter();
        for (b, &n) in BLOCK_SIZES.iter().enumerate() {
            if b > 0 {
                stages.push(Stage::Pool);
            }
            for i in 0..n {
                stages.push(Stage::Conv {
                    name: format!("conv{}_{}", b + 1, i + 1),
                    filters: it.next().expect("13 filter counts"),
                });
            }
        }
        Self { stages }
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (&str, usize)> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Conv { name, filters } => Some((name.as_str(), *filters)),
            Stage::Pool => None,
        })
    }

    pub fn contains(&self, layer: &str) -> bool {
        self.conv_layers().any(|(n, _)| n == layer)
    }

    /// Number of 2× poolings before `layer`.
    pub fn pools_before(&self, layer: &str) -> Option<usize> {
        let mut pools = 0;
        for s in &self.stages {
            match s {
                Stage::Pool => pools += 1,
                Stage::Conv { name, .. } if name == layer => return Some(pools),
                Stage::Conv { .. } => {}
            }
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Max,
    Avg,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "avg" => Ok(Pooling::Avg),
            _ => Err(Error::Config(format!("unknown pooling {s:?} (max or avg)"))),
        }
    }
}

/// `y_c = (x_c · input_scale − mean_c) / std_c` in RGB channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub input_scale: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocess {
    /// Stock VGG-19 input convention: 0–255 intensities minus the ImageNet
    /// channel means.
    pub fn caffe() -> Self {
        Self {
            input_scale: 255.0,
            mean: [123.68, 116.779, 103.939],
            std: [1.0; 3],
        }
    }
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            input_scale: 1.0,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Responses of one layer as an `N × M` matrix (filters × locations).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap<S> {
    pub layer: String,
    pub filters: usize,
    pub locations: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> ActivationMap<S> {
    pub fn new(
        layer: impl Into<String>,
        filters: usize,
        locations: usize,
        data: Vec<S>,
    ) -> Result<Self> {
        if filters == 0 || locations == 0 || data.len() != filters * locations {
            return Err(Error::InvalidArgument(format!(
                "activation map {filters}x{locations} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            layer: layer.into(),
            filters,
            locations,
            data,
        })
    }

    pub fn from_tensor(layer: impl Into<String>, t: &Tensor<S>) -> Result<Self> {
        let (n, m) = t.rows_cols();
        Self::new(layer, n, m, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(vec![self.filters, self.locations], self.data.clone()).expect("validated")
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.locations..(i + 1) * self.locations]
    }
}

#[derive(Clone, Debug)]
struct ConvLayer<S> {
    name: String,
    weight: Arc<Tensor<S>>,
    bias: Arc<Tensor<S>>,
}

#[derive(Clone, Debug)]
pub struct SpatialNetwork<S> {
    plan: LayerPlan,
    layers: Vec<ConvLayer<S>>,
    pub preprocess: Preprocess,
    pub pooling: Pooling,
    selected: Vec<String>,
}

fn parse_triplet(archive: &TensorArchive, key: &str, default: [f64; 3]) -> Result<[f64; 3]> {
    let Some(s) = archive.metadata.get(key) else {
        return Ok(default);
    };
    let vals: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Network(format!("metadata {key:?} = {s:?} is not three numbers")))?;
    vals.try_into()
        .map_err(|_| Error::Network(format!("metadata {key:?} needs three values")))
}

impl<S: Scalar> SpatialNetwork<S> {
    fn check_selected(plan: &LayerPlan, selected: &[&str]) -> Result<Vec<String>> {
        if selected.is_empty() {
            return Err(Error::Network("no spatial layers selected".into()));
        }
        selected
            .iter()
            .map(|&l| {
                if plan.contains(l) {
                    Ok(l.to_string())
                } else {
                    Err(Error::Network(format!("unknown spatial layer {l:?}")))
                }
            })
            .collect()
    }

    /// He-normal random weights, zero biases, [`Preprocess::caffe`] inputs.
    pub fn synthetic(
        plan: LayerPlan,
        selected: &[&str],
        seed: u64,
        pooling: Pooling,
    ) -> Result<Self> {
        let selected = Self::check_selected(&plan, selected)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let mut layers = Vec::new();
        for (name, filters) in plan.conv_layers() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let weight = Tensor::from_fn(&[filters, c_in, 3, 3], |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                S::of(z * std)
            });
            layers.push(ConvLayer {
                name: name.to_string(),
                weight: Arc::new(weight),
                bias: Arc::new(Tensor::zeros(&[filters])),
            });
            c_in = filters;
        }
        Ok(Self {
            plan,
            layers,
            preprocess: Preprocess::caffe(),
            pooling,
            selected,
        })
    }

    /// Loads and validates every planned convolution from `archive`.
    pub fn from_archive(
        archive: &TensorArchive,
        plan: LayerPlan,
        selected: &[&str],
        pooling: Pooling,
    ) -> Result<Self> {
        let selected = Self::check_selected(&plan, selected)?;
        let bgr = match archive
            .metadata
            .get("vgg.channel_order")
            .map(String::as_str)
        {
            None | Some("rgb") => false,
            Some("bgr") => true,
            Some(o) => return Err(Error::Network(format!("unknown channel order {o:?}"))),
        };
        let input_scale = match archive.metadata.get("vgg.input_scale") {
            Some(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::Network(format!("vgg.input_scale = {s:?} is not a number")))?,
            None => 1.0,
        };
        let mut mean = parse_triplet(archive, "vgg.mean", [0.0; 3])?;
        let mut std = parse_triplet(archive, "vgg.std", [1.0; 3])?;
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Network("vgg.std must be positive".into()));
        }
        if bgr {
            mean.reverse();
            std.reverse();
        }

        let mut c_in = 3;
        let mut layers = Vec::new();
        for (name, filters) in plan.conv_layers() {
            let wname = format!("vgg.{name}.weight");
            let bname = format!("vgg.{name}.bias");
            let w = archive
                .get(&wname)
                .ok_or_else(|| Error::Network(format!("layer {name}: missing entry {wname:?}")))?;
            let b = archive
                .get(&bname)
                .ok_or_else(|| Error::Network(format!("layer {name}: missing entry {bname:?}")))?;
            if w.shape != [filters, c_in, 3, 3] {
                return Err(Error::Network(format!(
                    "layer {name}: weight shape {:?}, plan needs {:?}",
                    w.shape,
                    [filters, c_in, 3, 3]
                )));
            }
            if b.shape != [filters] {
                return Err(Error::Network(format!(
                    "layer {name}: bias shape {:?}, plan needs [{filters}]",
                    b.shape
                )));
            }
            let mut weight = w.to_tensor::<S>();
            if bgr && c_in == 3 {
                // reorder input channels so the network consumes RGB frames
                let data = weight.data_mut();
                for o in 0..filters {
                    for k in 0..9 {
                        data.swap(o * 27 + k, o * 27 + 18 + k);
                    }
                }
            }
            layers.push(ConvLayer {
                name: name.to_string(),
                weight: Arc::new(weight),
                bias: Arc::new(b.to_tensor()),
            });
            c_in = filters;
        }
        Ok(Self {
            plan,
            layers,
            preprocess: Preprocess {
                input_scale,
                mean,
                std,
            },
            pooling,
            selected,
        })
    }

    /// Writes the weights in archive layout with identity preprocessing
    /// metadata.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        for l in &self.layers {
            a.insert_tensor(&format!("vgg.{}.weight", l.name), &l.weight)?;
            a.insert_tensor(&format!("vgg.{}.bias", l.name), &l.bias)?;
        }
        let p = &self.preprocess;
        let join = |v: [f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        a.metadata
            .insert("vgg.input_scale".into(), p.input_scale.to_string());
        a.metadata.insert("vgg.mean".into(), join(p.mean));
        a.metadata.insert("vgg.std".into(), join(p.std));
        a.metadata.insert("vgg.channel_order".into(), "rgb".into());
        Ok(a)
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    pub fn selected(&self) -> &[String] {
        &self.selected
    }

    pub fn conv_count(&self) -> usize {
        self.layers.len()
    }

    pub fn filters(&self, layer: &str) -> Option<usize> {
        self.plan
            .conv_layers()
            .find(|(n, _)| *n == layer)
            .map(|(_, f)| f)
    }

    /// Smallest frame side for which every selected layer has a non-empty map.
    pub fn min_side(&self) -> usize {
        let pools = self
            .selected
            .iter()
            .filter_map(|l| self.plan.pools_before(l))
            .max()
            .unwrap_or(0);
        1 << pools
    }

    /// Appends the stream to `graph` for a `[3, H, W]` node and returns one
    /// `[N, H_ℓ·W_ℓ]` activation node per selected layer, in plan order.
    pub fn build(&self, graph: &mut Graph<S>, x: NodeId) -> Result<Vec<(String, NodeId)>> {
        let shape = graph.shape(x).to_vec();
        let &[3, h, w] = shape.as_slice() else {
            return Err(Error::shape(
                "spatial input",
                format!("expected [3, H, W], got {shape:?}"),
            ));
        };
        if h < self.min_side() || w < self.min_side() {
            return Err(Error::shape(
                "spatial input",
                format!(
                    "{h}x{w} frame is too small; selected layers need at least {0}x{0}",
                    self.min_side()
                ),
            ));
        }
        let p = &self.preprocess;
        let scale: Vec<f64> = (0..3).map(|c| p.input_scale / p.std[c]).collect();
        let shift: Vec<f64> = (0..3).map(|c| -p.mean[c] / p.std[c]).collect();
        let mut cur = if scale.iter().all(|&s| s == 1.0) && shift.iter().all(|&s| s == 0.0) {
            x
        } else {
            graph.channel_affine(x, &scale, &shift)?
        };
        let last = self
            .plan
            .stages()
            .iter()
            .rposition(|s| matches!(s, Stage::Conv { name, .. } if self.selected.contains(name)))
            .expect("selection validated");
        let mut layers = self.layers.iter();
        let mut out = Vec::new();
        for stage in &self.plan.stages()[..=last] {
            match stage {
                Stage::Pool => {
                    cur = match self.pooling {
                        Pooling::Max => graph.maxpool2(cur)?,
                        Pooling::Avg => graph.avgpool2(cur)?,
                    };
                }
                Stage::Conv { name, filters } => {
                    let layer = layers.next().expect("one weight set per conv");
                    let conv = graph.conv2d(
                        cur,
                        layer.weight.clone(),
                        Some(layer.bias.clone()),
                        Padding::Zero,
                    )?;
                    graph.label(conv, name.clone());
                    cur = graph.relu(conv)?;
                    if self.selected.contains(name) {
                        let s = graph.shape(cur).to_vec();
                        let map = graph.reshape(cur, &[*filters, s[1] * s[2]])?;
                        out.push((name.clone(), map));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Activation maps of one RGB frame at every selected layer.
    pub fn activations(&self, frame: &Frame) -> Result<BTreeMap<String, ActivationMap<S>>> {
        if frame.channels != 3 {
            return Err(Error::InvalidArgument(
                "spatial stream needs an RGB frame".into(),
            ));
        }
        let mut g = Graph::new();
        let x = g.input("x", &[3, frame.height, frame.width])?;
        let maps = self.build(&mut g, x)?;
        g.set_input("x", frame.to_chw())?;
        let mut out = BTreeMap::new();
        for (name, id) in maps {
            let t = g.forward(id)?.clone();
            out.insert(name.clone(), ActivationMap::from_tensor(name, &t)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autodiff::fd::{finite_difference_check, FdMetric};

    fn random_frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(
            h,
            w,
            3,
            (0..h * w * 3).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn plan_has_thirteen_convolutions() {
        let plan = LayerPlan::vgg19();
        let filters: Vec<usize> = plan.conv_layers().map(|(_, f)| f).collect();
        assert_eq!(filters, VGG19_FILTERS);
        assert_eq!(plan.pools_before("conv1_1"), Some(0));
        assert_eq!(plan.pools_before("conv3_1"), Some(2));
        assert_eq!(plan.pools_before("conv5_1"), Some(4));
    }

    #[test]
    fn zero_input_gives_zero_activations() {
        let mut net = SpatialNetwork::<f32>::synthetic(
            LayerPlan::vgg19_scaled(16),
            &DEFAULT_LAYERS,
            1,
            Pooling::Max,
        )
        .unwrap();
        net.preprocess = Preprocess::default();
        let acts = net.activations(&Frame::filled(16, 16, 3, 0.0)).unwrap();
        assert_eq!(acts.len(), 5);
        assert!(acts.values().all(|a| a.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn conv1_1_shape_at_native_resolution() {
        // Only conv1_1 is built, so this stays cheap at 360×640.
        let net =
            SpatialNetwork::<f32>::synthetic(LayerPlan::vgg19(), &["conv1_1"], 2, Pooling::Max)
                .unwrap();
        let acts = net.activations(&Frame::filled(360, 640, 3, 0.25)).unwrap();
        let a = &acts["conv1_1"];
        assert_eq!((a.filters, a.locations), (64, 230_400));
    }

    #[test]
    fn activations_are_deterministic_and_nonnegative() {
        let net = SpatialNetwork::<f32>::synthetic(
            LayerPlan::vgg19_scaled(8),
            &DEFAULT_LAYERS,
            3,
            Pooling::Max,
        )
        .unwrap();
        let f = random_frame(32, 32, 4);
        let a = net.activations(&f).unwrap();
        let b = net.activations(&f).unwrap();
        assert_eq!(a, b);
        assert!(a.values().all(|m| m.data.iter().all(|&v| v >= 0.0)));
        assert_eq!(a["conv3_1"].locations, 64);
        assert_eq!(a["conv5_1"].locations, 4);
    }

    #[test]
    fn archive_round_trip_and_errors() {
        let plan = LayerPlan::vgg19_scaled(16);
        let net = SpatialNetwork::<f32>::synthetic(plan.clone(), &DEFAULT_LAYERS, 5, Pooling::Max)
            .unwrap();
        let archive = net.to_archive().unwrap();
        let loaded = SpatialNetwork::<f32>::from_archive(
            &archive,
            plan.clone(),
            &DEFAULT_LAYERS,
            Pooling::Max,
        )
        .unwrap();
        assert_eq!(loaded.conv_count(), 13);
        let f = random_frame(16, 16, 6);
        assert_eq!(
            net.activations(&f).unwrap(),
            loaded.activations(&f).unwrap()
        );

        let mut no_bias = archive.clone();
        no_bias.entries.retain(|(n, _)| n != "vgg.conv2_1.bias");
        let err = SpatialNetwork::<f32>::from_archive(
            &no_bias,
            plan.clone(),
            &DEFAULT_LAYERS,
            Pooling::Max,
        )
        .unwrap_err();
        assert!(err.to_string().contains("conv2_1"), "{err}");

        let err = SpatialNetwork::<f32>::from_archive(
            &archive,
            LayerPlan::vgg19(),
            &DEFAULT_LAYERS,
            Pooling::Max,
        )
        .unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");

        assert!(SpatialNetwork::<f32>::synthetic(plan, &["conv9_1"], 0, Pooling::Max).is_err());
    }

    #[test]
    fn bgr_archive_matches_rgb_network() {
        let plan = LayerPlan::vgg19_scaled(32);
        let net =
            SpatialNetwork::<f64>::synthetic(plan.clone(), &["conv1_1"], 7, Pooling::Max).unwrap();
        let mut bgr = net.to_archive().unwrap();
        let w = &mut bgr
            .entries
            .iter_mut()
            .find(|(n, _)| n == "vgg.conv1_1.weight")
            .unwrap()
            .1;
        let f = w.shape[0];
        for o in 0..f {
            for k in 0..9 {
                w.data.swap(o * 27 + k, o * 27 + 18 + k);
            }
        }
        bgr.metadata
            .insert("vgg.channel_order".into(), "bgr".into());
        bgr.metadata.insert("vgg.mean".into(), "0.3,0.2,0.1".into());
        let mut rgb = net.to_archive().unwrap();
        rgb.metadata.insert("vgg.mean".into(), "0.1,0.2,0.3".into());
        let a = SpatialNetwork::<f64>::from_archive(&bgr, plan.clone(), &["conv1_1"], Pooling::Max)
            .unwrap();
        let b =
            SpatialNetwork::<f64>::from_archive(&rgb, plan, &["conv1_1"], Pooling::Max).unwrap();
        let fr = random_frame(8, 8, 8);
        let (ma, mb) = (a.activations(&fr).unwrap(), b.activations(&fr).unwrap());
        for (x, y) in ma["conv1_1"].data.iter().zip(&mb["conv1_1"].data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_activation_gradients_match_finite_differences() {
        for pooling in [Pooling::Max, Pooling::Avg] {
            let net = SpatialNetwork::<f64>::synthetic(
                LayerPlan::vgg19_scaled(16),
                &DEFAULT_LAYERS,
                9,
                pooling,
            )
            .unwrap();
            let mut g = Graph::new();
            let x = g.input("x", &[3, 16, 16]).unwrap();
            let maps = net.build(&mut g, x).unwrap();
            g.set_input("x", random_frame(16, 16, 10).to_chw()).unwrap();
            for (name, id) in maps {
                let root = g.mean(id).unwrap();
                let r =
                    finite_difference_check(&mut g, root, "x", 1e-3, FdMetric::Relative).unwrap();
                assert!(r.checked > 0);
                assert!(r.max_error <= 1e-3, "{name} {pooling:?}: {r:?}");
            }
        }
    }

    #[test]
    fn conv1_1_is_translation_covariant() {
        let net = SpatialNetwork::<f64>::synthetic(
            LayerPlan::vgg19_scaled(16),
            &["conv1_1"],
            11,
            Pooling::Max,
        )
        .unwrap();
        let big = random_frame(20, 20, 12);
        let crop = |dy: usize, dx: usize| {
            let mut data = Vec::new();
            for y in 0..16 {
                for x in 0..16 {
                    for c in 0..3 {
                        data.push(big.get(y + dy, x + dx, c));
                    }
                }
            }
            Frame::new(16, 16, 3, data).unwrap()
        };
        let a = net
            .activations(&crop(0, 0))
            .unwrap()
            .remove("conv1_1")
            .unwrap();
        let b = net
            .activations(&crop(1, 1))
            .unwrap()
            .remove("conv1_1")
            .unwrap();
        // away from the zero-padded border, shifted input gives shifted output
        for f in 0..a.filters {
            for y in 1..14 {
                for x in 1..14 {
                    let va = a.data[f * 256 + (y + 1) * 16 + (x + 1)];
                    let vb = b.data[f * 256 + y * 16 + x];
                    assert!((va - vb).abs() < 1e-5);
                }
            }
        }
    }
}
