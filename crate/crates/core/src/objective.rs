//! Content, texture and total-variation losses, and their weighted total.
//!
//! Every loss exists twice: as a plain function over values (used by the
//! oracles and the reports) and as a graph builder whose gradient with
//! respect to the generated frame drives the synthesizer.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spatial::{ActivationMap, SpatialNetwork};
use crate::temporal::TemporalNetwork;
use crate::tensor::Tensor;
use crate::video::Frame;
use std::collections::BTreeMap;

/// `G = A·Aᵀ / (N·M)` for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<S> {
    pub layer: String,
    pub n: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> GramMatrix<S> {
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.n + j]
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(vec![self.n, self.n], self.data.clone()).expect("square")
    }
}

/// Evaluated with the same kernels as [`gram_node`], so a target Gram and
/// the Gram of identical generated activations agree bit for bit.
pub fn gram<S: Scalar>(a: &ActivationMap<S>) -> GramMatrix<S> {
    let mut g = Graph::new();
    let x = g
        .input("a", &[a.filters, a.locations])
        .expect("validated map");
    let gm = gram_node(&mut g, x).expect("rank 2");
    let t = g
        .forward_eval(gm, &[("a", a.to_tensor())])
        .expect("consistent shapes");
    GramMatrix {
        layer: a.layer.clone(),
        n: a.filters,
        data: t.data().to_vec(),
    }
}

pub fn content_loss<S: Scalar>(a: &ActivationMap<S>, target: &ActivationMap<S>) -> Result<f64> {
    if (a.filters, a.locations) != (target.filters, target.locations) {
        return Err(Error::Loss(format!(
            "content loss on {}: maps are {}x{} and {}x{}",
            a.layer, a.filters, a.locations, target.filters, target.locations
        )));
    }
    let ss: f64 = a
        .data
        .iter()
        .zip(&target.data)
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum();
    Ok(ss / (2.0 * (a.filters * a.locations) as f64))
}

pub fn gram_loss<S: Scalar>(g: &GramMatrix<S>, target: &GramMatrix<S>) -> Result<f64> {
    if g.n != target.n {
        return Err(Error::Loss(format!(
            "texture loss on {}: {} filters against {}",
            g.layer, g.n, target.n
        )));
    }
    let ss: f64 = g
        .data
        .iter()
        .zip(&target.data)
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum();
    Ok(ss / (2.0 * (g.n * g.n) as f64))
}

pub fn texture_loss<S: Scalar>(a: &ActivationMap<S>, target: &ActivationMap<S>) -> Result<f64> {
    gram_loss(&gram(a), &gram(target))
}

/// Anisotropic total variation of a `[C, H, W]` tensor over in-bounds
/// neighbor pairs, normalized by `H·W·C`.
pub fn tv_loss<S: Scalar>(x: &Tensor<S>) -> Result<f64> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::Loss(format!(
            "tv loss needs [C, H, W], got {:?}",
            x.shape()
        )));
    };
    let d = x.data();
    let mut sum = 0.0;
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = p[y * w + x].f64();
                if y + 1 < h {
                    sum += (p[(y + 1) * w + x].f64() - v).abs();
                }
                if x + 1 < w {
                    sum += (p[y * w + x + 1].f64() - v).abs();
                }
            }
        }
    }
    Ok(sum / (c * h * w) as f64)
}

fn check_target_shape<S: Scalar>(
    g: &Graph<S>,
    a: NodeId,
    shape: &[usize],
    what: &str,
) -> Result<()> {
    if g.shape(a) != shape {
        return Err(Error::shape(
            what.to_string(),
            format!("generated {:?} against target {:?}", g.shape(a), shape),
        ));
    }
    Ok(())
}

pub fn content_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    a: NodeId,
    target: &ActivationMap<S>,
) -> Result<NodeId> {
    check_target_shape(g, a, &[target.filters, target.locations], "content loss")?;
    let t = g.constant(target.to_tensor());
    let d = g.sub(a, t)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / (2.0 * (target.filters * target.locations) as f64))
}

pub fn gram_node<S: Scalar>(g: &mut Graph<S>, a: NodeId) -> Result<NodeId> {
    let (n, m) = match g.shape(a) {
        &[n, m] => (n, m),
        s => return Err(Error::shape("gram", format!("expected [N, M], got {s:?}"))),
    };
    let p = g.matmul_nt(a, a)?;
    g.scale(p, 1.0 / (n * m) as f64)
}

pub fn texture_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    a: NodeId,
    target: &GramMatrix<S>,
) -> Result<NodeId> {
    let gm = gram_node(g, a)?;
    check_target_shape(g, gm, &[target.n, target.n], "texture loss")?;
    let t = g.constant(target.to_tensor());
    let d = g.sub(gm, t)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / (2.0 * (target.n * target.n) as f64))
}

pub fn tv_loss_node<S: Scalar>(g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
    let n: usize = g.shape(x).iter().product();
    let mut parts = Vec::new();
    for axis in [1, 2] {
        let d = g.diff(x, axis)?;
        let a = g.abs(d)?;
        parts.push(g.sum(a)?);
    }
    let s = g.add(parts[0], parts[1])?;
    g.scale(s, 1.0 / n as f64)
}

/// Stream weights. The TV weight is passed per octave.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub spatial_content: f64,
    pub spatial_texture: f64,
    pub temporal_content: f64,
    pub temporal_texture: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spatial_content: 0.0,
            spatial_texture: 1.0,
            temporal_content: 0.0,
            temporal_texture: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} = {w} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("spatial_content", self.spatial_content),
            ("spatial_texture", self.spatial_texture),
            ("temporal_content", self.temporal_content),
            ("temporal_texture", self.temporal_texture),
        ]
    }

    pub fn any_temporal(&self) -> bool {
        self.temporal_content > 0.0 || self.temporal_texture > 0.0
    }
}

/// Unweighted term values (summed over layers) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub spatial_content: f64,
    pub spatial_texture: f64,
    pub temporal_content: f64,
    pub temporal_texture: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights, omega: f64) -> f64 {
        w.spatial_content * self.spatial_content
            + w.spatial_texture * self.spatial_texture
            + w.temporal_content * self.temporal_content
            + w.temporal_texture * self.temporal_texture
            + omega * self.tv
    }

    pub fn is_finite(&self) -> bool {
        [
            self.spatial_content,
            self.spatial_texture,
            self.temporal_content,
            self.temporal_texture,
            self.tv,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy)]
pub struct Models<'a, S> {
    pub spatial: &'a SpatialNetwork<S>,
    pub temporal: &'a TemporalNetwork<S>,
}

/// Target frames for one generated frame, one per term. Temporal terms take
/// `(current, previous)`; they are `None` at the first frame of a sequence.
#[derive(Clone, Copy, Default)]
pub struct TermFrames<'a> {
    pub spatial_content: Option<&'a Frame>,
    pub spatial_texture: Option<&'a Frame>,
    pub temporal_content: Option<(&'a Frame, &'a Frame)>,
    pub temporal_texture: Option<(&'a Frame, &'a Frame)>,
}

/// Target statistics derived from [`TermFrames`] for the active terms.
#[derive(Clone, Debug, Default)]
pub struct FrameTargets<S> {
    pub spatial_content: Option<BTreeMap<String, ActivationMap<S>>>,
    pub spatial_texture: Option<BTreeMap<String, GramMatrix<S>>>,
    pub temporal_content: Option<ActivationMap<S>>,
    pub temporal_texture: Option<GramMatrix<S>>,
}

impl<S: Scalar> FrameTargets<S> {
    /// Computes features for every term with a nonzero weight.
    /// `temporal_available` is false at the first frame, where temporal
    /// terms are skipped.
    pub fn compute(
        models: Models<'_, S>,
        weights: &LossWeights,
        frames: &TermFrames<'_>,
        temporal_available: bool,
    ) -> Result<Self> {
        let missing = |term: &str| {
            Error::Loss(format!(
                "{term} weight is nonzero but the term has no target"
            ))
        };
        let mut out = FrameTargets::default();
        if weights.spatial_content > 0.0 {
            let f = frames
                .spatial_content
                .ok_or_else(|| missing("spatial_content"))?;
            out.spatial_content = Some(models.spatial.activations(f)?);
        }
        if weights.spatial_texture > 0.0 {
            let f = frames
                .spatial_texture
                .ok_or_else(|| missing("spatial_texture"))?;
            let acts = models.spatial.activations(f)?;
            out.spatial_texture = Some(acts.iter().map(|(k, a)| (k.clone(), gram(a))).collect());
        }
        if temporal_available {
            if weights.temporal_content > 0.0 {
                let (c, p) = frames
                    .temporal_content
                    .ok_or_else(|| missing("temporal_content"))?;
                out.temporal_content = Some(models.temporal.activations(c, p)?);
            }
            if weights.temporal_texture > 0.0 {
                let (c, p) = frames
                    .temporal_texture
                    .ok_or_else(|| missing("temporal_texture"))?;
                out.temporal_texture = Some(gram(&models.temporal.activations(c, p)?));
            }
        }
        Ok(out)
    }
}

/// Name of the generated-frame leaf in a [`LossGraph`].
pub const GENERATED: &str = "g";

/// The STST objective for one frame size, built once and re-evaluated at
/// every iteration.
pub struct LossGraph<S> {
    graph: Graph<S>,
    terms: [Option<NodeId>; 5],
    root: NodeId,
    weights: LossWeights,
    omega: f64,
    shape: [usize; 3],
}

impl<S: Scalar> LossGraph<S> {
    /// `prev` is the previous generated frame at the same resolution; temporal
    /// terms are built only when it is given.
    pub fn build(
        models: Models<'_, S>,
        targets: &FrameTargets<S>,
        weights: &LossWeights,
        omega: f64,
        prev: Option<&Frame>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        weights.validate()?;
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(Error::Config(format!(
                "tv weight {omega} must be finite and >= 0"
            )));
        }
        let mut graph = Graph::new();
        let shape = [3, height, width];
        let x = graph.input(GENERATED, &shape)?;
        let mut terms = [None; 5];

        let spatial_layers = match (&targets.spatial_content, &targets.spatial_texture) {
            (None, None) => Vec::new(),
            _ => models.spatial.build(&mut graph, x)?,
        };
        let sum_layers = |graph: &mut Graph<S>, nodes: Vec<NodeId>| -> Result<NodeId> {
            let mut acc = nodes[0];
            for &n in &nodes[1..] {
                acc = graph.add(acc, n)?;
            }
            Ok(acc)
        };
        if let Some(t) = &targets.spatial_content {
            let mut nodes = Vec::new();
            for (name, a) in &spatial_layers {
                let target = t
                    .get(name)
                    .ok_or_else(|| Error::Loss(format!("no content target for layer {name}")))?;
                nodes.push(content_loss_node(&mut graph, *a, target)?);
            }
            terms[0] = Some(sum_layers(&mut graph, nodes)?);
        }
        if let Some(t) = &targets.spatial_texture {
            let mut nodes = Vec::new();
            for (name, a) in &spatial_layers {
                let target = t
                    .get(name)
                    .ok_or_else(|| Error::Loss(format!("no texture target for layer {name}")))?;
                nodes.push(texture_loss_node(&mut graph, *a, target)?);
            }
            terms[1] = Some(sum_layers(&mut graph, nodes)?);
        }
        if let Some(prev) = prev {
            if targets.temporal_content.is_some() || targets.temporal_texture.is_some() {
                if (prev.height, prev.width) != (height, width) || prev.channels != 3 {
                    return Err(Error::shape(
                        "temporal input",
                        format!(
                            "previous frame is {}x{}x{}, expected {height}x{width}x3",
                            prev.height, prev.width, prev.channels
                        ),
                    ));
                }
                let p = graph.constant(prev.to_chw());
                let t = models.temporal.build(&mut graph, x, p)?;
                if let Some(target) = &targets.temporal_content {
                    terms[2] = Some(content_loss_node(&mut graph, t, target)?);
                }
                if let Some(target) = &targets.temporal_texture {
                    terms[3] = Some(texture_loss_node(&mut graph, t, target)?);
                }
            }
        }
        if omega > 0.0 {
            terms[4] = Some(tv_loss_node(&mut graph, x)?);
        }

        let coeffs = [
            weights.spatial_content,
            weights.spatial_texture,
            weights.temporal_content,
            weights.temporal_texture,
            omega,
        ];
        let mut root = None;
        for (term, &c) in terms.iter().zip(&coeffs) {
            if let Some(node) = *term {
                let scaled = graph.scale(node, c)?;
                root = Some(match root {
                    None => scaled,
                    Some(acc) => graph.add(acc, scaled)?,
                });
            }
        }
        let root = match root {
            Some(r) => r,
            None => graph.constant(Tensor::scalar(S::zero())),
        };
        Ok(Self {
            graph,
            terms,
            root,
            weights: *weights,
            omega,
            shape,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Runs the forward pass at `g` (`[3, H, W]`).
    pub fn evaluate(&mut self, g: Tensor<S>) -> Result<LossBreakdown> {
        self.graph.set_input(GENERATED, g)?;
        self.graph.forward(self.root)?;
        let v = |t: Option<NodeId>| t.and_then(|id| self.graph.scalar_value(id)).unwrap_or(0.0);
        let mut b = LossBreakdown {
            spatial_content: v(self.terms[0]),
            spatial_texture: v(self.terms[1]),
            temporal_content: v(self.terms[2]),
            temporal_texture: v(self.terms[3]),
            tv: v(self.terms[4]),
            total: 0.0,
        };
        b.total = b.weighted_total(&self.weights, self.omega);
        Ok(b)
    }

    /// Gradient of the total with respect to `g` at the last evaluation.
    pub fn gradient(&self) -> Result<Tensor<S>> {
        self.graph.backward(self.root, GENERATED)
    }

    pub fn graph_mut(&mut self) -> (&mut Graph<S>, NodeId) {
        (&mut self.graph, self.root)
    }
}

/// One-shot evaluation of the objective for `g_t`.
pub fn total_loss<S: Scalar>(
    models: Models<'_, S>,
    targets: &FrameTargets<S>,
    g_t: &Frame,
    g_prev: Option<&Frame>,
    weights: &LossWeights,
    omega: f64,
) -> Result<LossBreakdown> {
    let mut lg = LossGraph::build(
        models, targets, weights, omega, g_prev, g_t.height, g_t.width,
    )?;
    lg.evaluate(g_t.to_chw())
}
