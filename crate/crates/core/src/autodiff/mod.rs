//! Reverse-mode differentiation over a static graph of image kernels.
//!
//! A [`Graph`] is built once per problem size with shapes inferred at build
//! time, then evaluated repeatedly with new input values. Only gradients with
//! respect to named inputs are supported; weights are constants.

pub mod fd;
pub mod kernels;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{sum_f64, Scalar};
use crate::tensor::Tensor;

pub use kernels::Padding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Input(String),
    Constant,
    Conv2d {
        x: usize,
        weight: Arc<Tensor<S>>,
        bias: Option<Arc<Tensor<S>>>,
        padding: Padding,
    },
    Conv3d {
        x: usize,
        weight: Arc<Tensor<S>>,
        padding: Padding,
    },
    Relu(usize),
    MaxPool2(usize),
    AvgPool2(usize),
    Square(usize),
    Abs(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, S),
    ChannelAffine {
        x: usize,
        scale: Vec<S>,
        shift: Vec<S>,
    },
    Concat(Vec<usize>),
    DivNorm {
        x: usize,
        eps: S,
    },
    Resize(usize),
    Grayscale(usize),
    MatMulNT(usize, usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Diff {
        x: usize,
        axis: usize,
    },
}

impl<S> Op<S> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv3d { .. } => "conv3d",
            Op::Relu(_) => "relu",
            Op::MaxPool2(_) => "maxpool2",
            Op::AvgPool2(_) => "avgpool2",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Concat(_) => "concat",
            Op::DivNorm { .. } => "divnorm",
            Op::Resize(_) => "resize",
            Op::Grayscale(_) => "grayscale",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Diff { .. } => "diff",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Input(_) | Op::Constant => vec![],
            Op::Conv2d { x, .. }
            | Op::Conv3d { x, .. }
            | Op::ChannelAffine { x, .. }
            | Op::DivNorm { x, .. }
            | Op::Diff { x, .. } => vec![*x],
            Op::Relu(x)
            | Op::MaxPool2(x)
            | Op::AvgPool2(x)
            | Op::Square(x)
            | Op::Abs(x)
            | Op::Scale(x, _)
            | Op::Resize(x)
            | Op::Grayscale(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::MatMulNT(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    label: Option<String>,
    shape: Vec<usize>,
    value: Option<Tensor<S>>,
    /// Max-pool routing indices from the last forward pass.
    argmax: Vec<usize>,
    /// 64-bit value of scalar reductions and the scalar arithmetic on top.
    wide: Option<f64>,
}

/// Static computation graph. Parents always precede children.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    inputs: BTreeMap<String, usize>,
}

fn dims3(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((c, h, w)),
        _ => None,
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn name(&self, i: usize) -> String {
        let n = &self.nodes[i];
        match &n.label {
            Some(l) => format!("#{i} {} ({l})", n.op.kind()),
            None => format!("#{i} {}", n.op.kind()),
        }
    }

    fn next_name(&self, kind: &str) -> String {
        format!("#{} {kind}", self.nodes.len())
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.0 < self.nodes.len() {
            Ok(id.0)
        } else {
            Err(Error::Graph(format!("node #{} does not exist", id.0)))
        }
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>, value: Option<Tensor<S>>) -> NodeId {
        self.nodes.push(Node {
            op,
            label: None,
            shape,
            value,
            argmax: Vec::new(),
            wide: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape3(&self, x: usize, kind: &str) -> Result<(usize, usize, usize)> {
        dims3(&self.nodes[x].shape).ok_or_else(|| {
            Error::shape(
                self.next_name(kind),
                format!("expected [C, H, W] input, got {:?}", self.nodes[x].shape),
            )
        })
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) {
        if let Some(n) = self.nodes.get_mut(id.0) {
            n.label = Some(label.into());
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::Graph(format!("input {name:?} declared twice")));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(name, format!("invalid input shape {shape:?}")));
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec(), None);
        self.inputs.insert(name.to_string(), id.0);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, shape, Some(value))
    }

    /// Stride-1 same-size convolution, weight `[out, in, kh, kw]` with odd
    /// kernel sides, optional bias `[out]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: Arc<Tensor<S>>,
        bias: Option<Arc<Tensor<S>>>,
        padding: Padding,
    ) -> Result<NodeId> {
        let x = self.check(x)?;
        let (c, h, w) = self.shape3(x, "conv2d")?;
        let &[o, i, kh, kw] = weight.shape() else {
            return Err(Error::shape(
                self.next_name("conv2d"),
                format!("weight must be [out, in, kh, kw], got {:?}", weight.shape()),
            ));
        };
        if i != c {
            return Err(Error::shape(
                self.next_name("conv2d"),
                format!("weight expects {i} input channels, input has {c}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                self.next_name("conv2d"),
                format!("kernel {kh}x{kw} must have odd sides"),
            ));
        }
        if padding == Padding::Reflect && (kh / 2 >= h.max(2) || kw / 2 >= w.max(2)) {
            return Err(Error::shape(
                self.next_name("conv2d"),
                format!("reflect padding of a {kh}x{kw} kernel needs a larger than {h}x{w} input"),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != o {
                return Err(Error::shape(
                    self.next_name("conv2d"),
                    format!("bias has {} entries, expected {o}", b.len()),
                ));
            }
        }
        Ok(self.push(
            Op::Conv2d {
                x,
                weight,
                bias,
                padding,
            },
            vec![o, h, w],
            None,
        ))
    }

    /// Convolution over `[C, D, H, W]` volumes with weight
    /// `[K, C, kd, kh, kw]`: valid along depth, same-size in space.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        weight: Arc<Tensor<S>>,
        padding: Padding,
    ) -> Result<NodeId> {
        let x = self.check(x)?;
        let &[c, d, h, w] = self.nodes[x].shape.as_slice() else {
            return Err(Error::shape(
                self.next_name("conv3d"),
                format!("expected [C, D, H, W] input, got {:?}", self.nodes[x].shape),
            ));
        };
        let &[k, wc, kd, kh, kw] = weight.shape() else {
            return Err(Error::shape(
                self.next_name("conv3d"),
                format!(
                    "weight must be [K, C, kd, kh, kw], got {:?}",
                    weight.shape()
                ),
            ));
        };
        if wc != c || kd > d || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                self.next_name("conv3d"),
                format!(
                    "weight {:?} incompatible with input [{c}, {d}, {h}, {w}]",
                    weight.shape()
                ),
            ));
        }
        if padding == Padding::Reflect && (kh / 2 >= h.max(2) || kw / 2 >= w.max(2)) {
            return Err(Error::shape(
                self.next_name("conv3d"),
                format!("reflect padding of a {kh}x{kw} kernel needs a larger than {h}x{w} input"),
            ));
        }
        Ok(self.push(
            Op::Conv3d { x, weight, padding },
            vec![k, d - kd + 1, h, w],
            None,
        ))
    }

    fn unary(&mut self, x: NodeId, make: impl FnOnce(usize) -> Op<S>) -> Result<NodeId> {
        let x = self.check(x)?;
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(make(x), shape, None))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Square)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Abs)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.unary(x, |x| Op::Scale(x, S::of(factor)))
    }

    fn pool(&mut self, x: NodeId, max: bool) -> Result<NodeId> {
        let kind = if max { "maxpool2" } else { "avgpool2" };
        let x = self.check(x)?;
        let (c, h, w) = self.shape3(x, kind)?;
        if h < 2 || w < 2 {
            return Err(Error::shape(
                self.next_name(kind),
                format!("cannot pool a {h}x{w} map"),
            ));
        }
        let op = if max {
            Op::MaxPool2(x)
        } else {
            Op::AvgPool2(x)
        };
        Ok(self.push(op, vec![c, h / 2, w / 2], None))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.pool(x, true)
    }

    pub fn avgpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.pool(x, false)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, kind: &str) -> Result<(usize, usize)> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::shape(
                self.next_name(kind),
                format!(
                    "operands {:?} and {:?} differ",
                    self.nodes[a].shape, self.nodes[b].shape
                ),
            ));
        }
        Ok((a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = self.binary(a, b, "add")?;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add(a, b), shape, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = self.binary(a, b, "sub")?;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Sub(a, b), shape, None))
    }

    /// Per-channel `y = scale[c]·x + shift[c]` over the leading axis.
    pub fn channel_affine(&mut self, x: NodeId, scale: &[f64], shift: &[f64]) -> Result<NodeId> {
        let x = self.check(x)?;
        let c = self.nodes[x].shape[0];
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape(
                self.next_name("channel_affine"),
                format!(
                    "{c} channels but {} scales / {} shifts",
                    scale.len(),
                    shift.len()
                ),
            ));
        }
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(
            Op::ChannelAffine {
                x,
                scale: scale.iter().map(|&v| S::of(v)).collect(),
                shift: shift.iter().map(|&v| S::of(v)).collect(),
            },
            shape,
            None,
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Graph("concat of zero nodes".into()));
        }
        let ids = xs
            .iter()
            .map(|&x| self.check(x))
            .collect::<Result<Vec<_>>>()?;
        let tail = self.nodes[ids[0]].shape[1..].to_vec();
        let mut lead = 0;
        for &i in &ids {
            if self.nodes[i].shape[1..] != tail[..] {
                return Err(Error::shape(
                    self.next_name("concat"),
                    format!(
                        "{:?} vs {:?}",
                        self.nodes[i].shape, self.nodes[ids[0]].shape
                    ),
                ));
            }
            lead += self.nodes[i].shape[0];
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Op::Concat(ids), shape, None))
    }

    /// Divisive normalization across the leading (channel) axis.
    pub fn divnorm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.unary(x, |x| Op::DivNorm { x, eps: S::of(eps) })
    }

    /// Bilinear resize of a `[C, H, W]` node.
    pub fn resize(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let x = self.check(x)?;
        let (c, _, _) = self.shape3(x, "resize")?;
        if h == 0 || w == 0 {
            return Err(Error::shape(self.next_name("resize"), "zero output size"));
        }
        Ok(self.push(Op::Resize(x), vec![c, h, w], None))
    }

    /// `[3, H, W]` RGB to `[1, H, W]` luma.
    pub fn grayscale(&mut self, x: NodeId) -> Result<NodeId> {
        let x = self.check(x)?;
        let (c, h, w) = self.shape3(x, "grayscale")?;
        if c != 3 {
            return Err(Error::shape(
                self.next_name("grayscale"),
                format!("expected 3 channels, got {c}"),
            ));
        }
        Ok(self.push(Op::Grayscale(x), vec![1, h, w], None))
    }

    /// `A · Bᵀ` for `A: [n, k]`, `B: [m, k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (&[n, k1], &[m, k2]) = (
            self.nodes[a].shape.as_slice(),
            self.nodes[b].shape.as_slice(),
        ) else {
            return Err(Error::shape(
                self.next_name("matmul_nt"),
                "operands must be matrices",
            ));
        };
        if k1 != k2 {
            return Err(Error::shape(
                self.next_name("matmul_nt"),
                format!("inner dimensions {k1} and {k2} differ"),
            ));
        }
        Ok(self.push(Op::MatMulNT(a, b), vec![n, m], None))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let x = self.check(x)?;
        let n: usize = self.nodes[x].shape.iter().product();
        if shape.iter().product::<usize>() != n || shape.contains(&0) {
            return Err(Error::shape(
                self.next_name("reshape"),
                format!("cannot reshape {:?} to {shape:?}", self.nodes[x].shape),
            ));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec(), None))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let x = self.check(x)?;
        Ok(self.push(Op::Sum(x), vec![1], None))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let x = self.check(x)?;
        Ok(self.push(Op::Mean(x), vec![1], None))
    }

    /// Forward difference `x[i+1] − x[i]` along axis 1 (rows) or 2 (columns)
    /// of a `[C, H, W]` node.
    pub fn diff(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let x = self.check(x)?;
        let (c, h, w) = self.shape3(x, "diff")?;
        let shape = match axis {
            1 if h >= 2 => vec![c, h - 1, w],
            2 if w >= 2 => vec![c, h, w - 1],
            _ => {
                return Err(Error::shape(
                    self.next_name("diff"),
                    format!("cannot difference axis {axis} of {:?}", [c, h, w]),
                ))
            }
        };
        Ok(self.push(Op::Diff { x, axis }, shape, None))
    }

    /// Sets the value of a named input.
    pub fn set_input(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let &i = self
            .inputs
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown input {name:?}")))?;
        if value.shape() != self.nodes[i].shape.as_slice() {
            return Err(Error::shape(
                self.name(i),
                format!(
                    "declared {:?}, supplied {:?}",
                    self.nodes[i].shape,
                    value.shape()
                ),
            ));
        }
        self.nodes[i].value = Some(value);
        Ok(())
    }

    pub fn input_value(&self, name: &str) -> Option<&Tensor<S>> {
        self.inputs
            .get(name)
            .and_then(|&i| self.nodes[i].value.as_ref())
    }

    fn ancestors(&self, root: usize) -> Vec<bool> {
        let mut need = vec![false; root + 1];
        need[root] = true;
        for i in (0..=root).rev() {
            if need[i] {
                for p in self.nodes[i].op.parents() {
                    need[p] = true;
                }
            }
        }
        need
    }

    /// Sets the given inputs, then evaluates everything `root` depends on.
    pub fn forward_eval(
        &mut self,
        root: NodeId,
        leaves: &[(&str, Tensor<S>)],
    ) -> Result<&Tensor<S>> {
        for (name, v) in leaves {
            self.set_input(name, v.clone())?;
        }
        self.forward(root)
    }

    /// Evaluates everything `root` depends on using the current inputs.
    pub fn forward(&mut self, root: NodeId) -> Result<&Tensor<S>> {
        let root = self.check(root)?;
        let need = self.ancestors(root);
        for i in 0..=root {
            if !need[i] {
                continue;
            }
            match &self.nodes[i].op {
                Op::Constant => continue,
                Op::Input(name) => {
                    if self.nodes[i].value.is_none() {
                        return Err(Error::Graph(format!("input {name:?} has no value")));
                    }
                    continue;
                }
                _ => {}
            }
            let (value, argmax) = self.eval_node(i)?;
            let wide = self.eval_wide(i, &value);
            let node = &mut self.nodes[i];
            node.value = Some(value);
            node.argmax = argmax;
            node.wide = wide;
        }
        Ok(self.nodes[root].value.as_ref().expect("root evaluated"))
    }

    fn wide_of(&self, i: usize) -> Option<f64> {
        let n = &self.nodes[i];
        n.wide.or_else(|| {
            n.value
                .as_ref()
                .filter(|v| v.len() == 1)
                .map(|v| v.data()[0].f64())
        })
    }

    fn eval_wide(&self, i: usize, value: &Tensor<S>) -> Option<f64> {
        if value.len() != 1 {
            return None;
        }
        match &self.nodes[i].op {
            Op::Sum(x) => Some(sum_f64(self.val(*x))),
            Op::Mean(x) => {
                let v = self.val(*x);
                Some(sum_f64(v) / v.len() as f64)
            }
            Op::Add(a, b) => Some(self.wide_of(*a)? + self.wide_of(*b)?),
            Op::Sub(a, b) => Some(self.wide_of(*a)? - self.wide_of(*b)?),
            Op::Scale(x, f) => Some(self.wide_of(*x)? * f.f64()),
            Op::Reshape(x) => self.wide_of(*x),
            _ => None,
        }
    }

    /// Value of a single-element node, in 64-bit where the node is a
    /// reduction (or scalar arithmetic over reductions).
    pub fn scalar_value(&self, id: NodeId) -> Option<f64> {
        self.nodes.get(id.0)?;
        self.wide_of(id.0)
    }

    fn val(&self, i: usize) -> &[S] {
        self.nodes[i]
            .value
            .as_ref()
            .expect("parents are evaluated before children")
            .data()
    }

    fn eval_node(&self, i: usize) -> Result<(Tensor<S>, Vec<usize>)> {
        let node = &self.nodes[i];
        let shape = node.shape.clone();
        let mut argmax = Vec::new();
        let data: Vec<S> = match &node.op {
            Op::Input(_) | Op::Constant => unreachable!(),
            Op::Conv2d {
                x,
                weight,
                bias,
                padding,
            } => {
                let (c, h, w) = dims3(&self.nodes[*x].shape).expect("checked at build");
                let ws = weight.shape();
                kernels::conv2d_forward(
                    self.val(*x),
                    weight.data(),
                    bias.as_deref().map(Tensor::data),
                    kernels::ConvGeom {
                        c_in: c,
                        c_out: ws[0],
                        h,
                        w,
                        kh: ws[2],
                        kw: ws[3],
                        padding: *padding,
                    },
                )
            }
            Op::Conv3d { x, weight, padding } => {
                conv3d_forward(self.val(*x), &self.nodes[*x].shape, weight, *padding)
            }
            Op::Relu(x) => self
                .val(*x)
                .iter()
                .map(|&v| if v > S::zero() { v } else { S::zero() })
                .collect(),
            Op::MaxPool2(x) => {
                let (c, h, w) = dims3(&self.nodes[*x].shape).expect("checked at build");
                let (v, a) = kernels::maxpool2_forward(self.val(*x), c, h, w);
                argmax = a;
                v
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = dims3(&self.nodes[*x].shape).expect("checked at build");
                kernels::avgpool2_forward(self.val(*x), c, h, w)
            }
            Op::Square(x) => self.val(*x).iter().map(|&v| v * v).collect(),
            Op::Abs(x) => self.val(*x).iter().map(|&v| v.abs()).collect(),
            Op::Add(a, b) => self
                .val(*a)
                .iter()
                .zip(self.val(*b))
                .map(|(&p, &q)| p + q)
                .collect(),
            Op::Sub(a, b) => self
                .val(*a)
                .iter()
                .zip(self.val(*b))
                .map(|(&p, &q)| p - q)
                .collect(),
            Op::Scale(x, f) => self.val(*x).iter().map(|&v| v * *f).collect(),
            Op::ChannelAffine { x, scale, shift } => {
                let src = self.val(*x);
                let per = src.len() / scale.len();
                src.iter()
                    .enumerate()
                    .map(|(j, &v)| scale[j / per] * v + shift[j / per])
                    .collect()
            }
            Op::Concat(xs) => xs
                .iter()
                .flat_map(|&x| self.val(x).iter().copied())
                .collect(),
            Op::DivNorm { x, eps } => {
                kernels::divnorm_forward(self.val(*x), self.nodes[*x].shape[0], *eps)
            }
            Op::Resize(x) => {
                let (c, h, w) = dims3(&self.nodes[*x].shape).expect("checked at build");
                kernels::resize_bilinear(self.val(*x), c, h, w, shape[1], shape[2])
            }
            Op::Grayscale(x) => kernels::grayscale(self.val(*x), shape[1] * shape[2]),
            Op::MatMulNT(a, b) => {
                let k = self.nodes[*a].shape[1];
                kernels::matmul_nt(self.val(*a), self.val(*b), shape[0], shape[1], k)
            }
            Op::Reshape(x) => self.val(*x).to_vec(),
            Op::Sum(x) => vec![S::of(sum_f64(self.val(*x)))],
            Op::Mean(x) => {
                let v = self.val(*x);
                vec![S::of(sum_f64(v) / v.len() as f64)]
            }
            Op::Diff { x, axis } => {
                let (c, h, w) = dims3(&self.nodes[*x].shape).expect("checked at build");
                diff_forward(self.val(*x), c, h, w, *axis)
            }
        };
        let value = Tensor::new(shape, data)?;
        if !value.is_finite() {
            log::debug!("non-finite output at {}", self.name(i));
        }
        Ok((value, argmax))
    }

    /// Gradient of the scalar `root` with respect to the input `leaf`.
    /// Requires a preceding [`Graph::forward`] on `root`.
    pub fn backward(&self, root: NodeId, leaf: &str) -> Result<Tensor<S>> {
        let root = self.check(root)?;
        let &leaf_idx = self
            .inputs
            .get(leaf)
            .ok_or_else(|| Error::Graph(format!("unknown input {leaf:?}")))?;
        let root_value = self.nodes[root]
            .value
            .as_ref()
            .ok_or_else(|| Error::Graph("backward before forward".into()))?;
        if root_value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, {} has shape {:?}",
                self.name(root),
                root_value.shape()
            )));
        }
        let leaf_shape = self.nodes[leaf_idx].shape.clone();
        if leaf_idx > root {
            return Ok(Tensor::zeros(&leaf_shape));
        }
        // Only nodes downstream of the leaf carry gradient.
        let need = self.ancestors(root);
        let mut live = vec![false; root + 1];
        live[leaf_idx] = true;
        for i in leaf_idx + 1..=root {
            live[i] = need[i] && self.nodes[i].op.parents().iter().any(|&p| live[p]);
        }
        if !live[root] {
            return Ok(Tensor::zeros(&leaf_shape));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root + 1];
        grads[root] = Some(vec![S::one()]);
        for i in (leaf_idx + 1..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !live[i] {
                continue;
            }
            for (p, gp) in self.node_backward(i, &g) {
                if !live[p] {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&gp).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        let data = grads[leaf_idx]
            .take()
            .unwrap_or_else(|| vec![S::zero(); leaf_shape.iter().product()]);
        Tensor::new(leaf_shape, data)
    }

    /// Parent gradients of node `i` given its output gradient `g`.
    fn node_backward(&self, i: usize, g: &[S]) -> Vec<(usize, Vec<S>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input(_) | Op::Constant => vec![],
            Op::Conv2d {
                x, weight, padding, ..
            } => {
                let (c, h, w) = dims3(&self.nodes[*x].shape).expect("checked at build");
                let ws = weight.shape();
                let gx = kernels::conv2d_backward_input(
                    g,
                    weight.data(),
                    kernels::ConvGeom {
                        c_in: c,
                        c_out: ws[0],
                        h,
                        w,
                        kh: ws[2],
                        kw: ws[3],
                        padding: *padding,
                    },
                );
                vec![(*x, gx)]
            }
            Op::Conv3d { x, weight, padding } => {
                vec![(
                    *x,
                    conv3d_backward(g, &self.nodes[*x].shape, weight, *padding),
                )]
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                vec![(*x, gx)]
            }
            Op::MaxPool2(x) => {
                let mut gx = vec![S::zero(); self.val(*x).len()];
                for (&src, &gv) in node.argmax.iter().zip(g) {
                    gx[src] = gx[src] + gv;
                }
                vec![(*x, gx)]
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = dims3(&self.nodes[*x].shape).expect("checked at build");
                vec![(*x, kernels::avgpool2_backward(g, c, h, w))]
            }
            Op::Square(x) => {
                let two = S::of(2.0);
                let gx = g
                    .iter()
                    .zip(self.val(*x))
                    .map(|(&gv, &v)| two * v * gv)
                    .collect();
                vec![(*x, gx)]
            }
            Op::Abs(x) => {
                let gx = g
                    .iter()
                    .zip(self.val(*x))
                    .map(|(&gv, &v)| {
                        if v > S::zero() {
                            gv
                        } else if v < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Scale(x, f) => vec![(*x, g.iter().map(|&v| v * *f).collect())],
            Op::ChannelAffine { x, scale, .. } => {
                let per = g.len() / scale.len();
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| v * scale[j / per])
                    .collect();
                vec![(*x, gx)]
            }
            Op::Concat(xs) => {
                let mut off = 0;
                xs.iter()
                    .map(|&x| {
                        let n = self.val(x).len();
                        let part = g[off..off + n].to_vec();
                        off += n;
                        (x, part)
                    })
                    .collect()
            }
            Op::DivNorm { x, eps } => {
                let k = self.nodes[*x].shape[0];
                vec![(*x, kernels::divnorm_backward(g, self.val(*x), k, *eps))]
            }
            Op::Resize(x) => {
                let (c, h, w) = dims3(&self.nodes[*x].shape).expect("checked at build");
                let gx =
                    kernels::resize_bilinear_backward(g, c, h, w, node.shape[1], node.shape[2]);
                vec![(*x, gx)]
            }
            Op::Grayscale(x) => {
                let plane = g.len();
                let mut gx = vec![S::zero(); plane * 3];
                for (c, &coef) in kernels::LUMA.iter().enumerate() {
                    let coef = S::of(coef);
                    for p in 0..plane {
                        gx[c * plane + p] = coef * g[p];
                    }
                }
                vec![(*x, gx)]
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let m = self.nodes[*b].shape[0];
                // dA = dC · B, dB = dCᵀ · A
                let ga = kernels::matmul_nn(g, self.val(*b), n, m, k);
                let gt = transpose(g, n, m);
                let gb = kernels::matmul_nn(&gt, self.val(*a), m, n, k);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.val(*x).len()])],
            Op::Mean(x) => {
                let n = self.val(*x).len();
                vec![(*x, vec![g[0] / S::of(n as f64); n])]
            }
            Op::Diff { x, axis } => {
                let (c, h, w) = dims3(&self.nodes[*x].shape).expect("checked at build");
                vec![(*x, diff_backward(g, c, h, w, *axis))]
            }
        }
    }

    /// Hash of every branch decision taken in the last forward pass
    /// (rectifier masks, max-pool routes, absolute-value signs).
    pub fn branch_signature(&self, root: NodeId) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        let need = self.ancestors(root.0.min(self.nodes.len().saturating_sub(1)));
        for (i, node) in self.nodes.iter().enumerate().take(need.len()) {
            if !need[i] || node.value.is_none() {
                continue;
            }
            match &node.op {
                Op::Relu(x) => self
                    .val(*x)
                    .iter()
                    .for_each(|&v| mix((v > S::zero()) as u64)),
                Op::Abs(x) => self.val(*x).iter().for_each(|&v| {
                    mix(if v > S::zero() {
                        1
                    } else if v < S::zero() {
                        2
                    } else {
                        3
                    })
                }),
                Op::MaxPool2(_) => node.argmax.iter().for_each(|&a| mix(a as u64)),
                _ => {}
            }
        }
        h
    }
}

fn transpose<S: Scalar>(a: &[S], n: usize, m: usize) -> Vec<S> {
    let mut t = vec![S::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            t[j * n + i] = a[i * m + j];
        }
    }
    t
}

/// Gathers the depth window starting at `od` into `[C·kd, H, W]` channels so
/// the 3D correlation reduces to a 2D one with weight `[K, C·kd, kh, kw]`.
fn depth_window<S: Scalar>(
    x: &[S],
    c: usize,
    d: usize,
    plane: usize,
    kd: usize,
    od: usize,
) -> Vec<S> {
    let mut v = Vec::with_capacity(c * kd * plane);
    for ch in 0..c {
        for dz in 0..kd {
            let z = od + dz;
            v.extend_from_slice(&x[(ch * d + z) * plane..(ch * d + z + 1) * plane]);
        }
    }
    v
}

fn conv3d_geom<S: Scalar>(
    xshape: &[usize],
    weight: &Tensor<S>,
    padding: Padding,
) -> kernels::ConvGeom {
    let ws = weight.shape();
    kernels::ConvGeom {
        c_in: xshape[0] * ws[2],
        c_out: ws[0],
        h: xshape[2],
        w: xshape[3],
        kh: ws[3],
        kw: ws[4],
        padding,
    }
}

fn conv3d_forward<S: Scalar>(
    x: &[S],
    xshape: &[usize],
    weight: &Tensor<S>,
    padding: Padding,
) -> Vec<S> {
    let (c, d, plane) = (xshape[0], xshape[1], xshape[2] * xshape[3]);
    let (k, kd) = (weight.shape()[0], weight.shape()[2]);
    let dout = d - kd + 1;
    let g = conv3d_geom(xshape, weight, padding);
    let mut out = vec![S::zero(); k * dout * plane];
    for od in 0..dout {
        let win = depth_window(x, c, d, plane, kd, od);
        let y = kernels::conv2d_forward(&win, weight.data(), None, g);
        for kk in 0..k {
            out[(kk * dout + od) * plane..(kk * dout + od + 1) * plane]
                .copy_from_slice(&y[kk * plane..(kk + 1) * plane]);
        }
    }
    out
}

fn conv3d_backward<S: Scalar>(
    g: &[S],
    xshape: &[usize],
    weight: &Tensor<S>,
    padding: Padding,
) -> Vec<S> {
    let (c, d, plane) = (xshape[0], xshape[1], xshape[2] * xshape[3]);
    let (k, kd) = (weight.shape()[0], weight.shape()[2]);
    let dout = d - kd + 1;
    let geom = conv3d_geom(xshape, weight, padding);
    let mut gx = vec![S::zero(); c * d * plane];
    for od in 0..dout {
        let mut go = Vec::with_capacity(k * plane);
        for kk in 0..k {
            go.extend_from_slice(&g[(kk * dout + od) * plane..(kk * dout + od + 1) * plane]);
        }
        let gwin = kernels::conv2d_backward_input(&go, weight.data(), geom);
        for ch in 0..c {
            for dz in 0..kd {
                let z = od + dz;
                let src = &gwin[(ch * kd + dz) * plane..(ch * kd + dz + 1) * plane];
                let dst = &mut gx[(ch * d + z) * plane..(ch * d + z + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }
    gx
}

fn diff_forward<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, axis: usize) -> Vec<S> {
    let mut out = Vec::new();
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        if axis == 1 {
            for y in 0..h - 1 {
                for xx in 0..w {
                    out.push(p[(y + 1) * w + xx] - p[y * w + xx]);
                }
            }
        } else {
            for y in 0..h {
                for xx in 0..w - 1 {
                    out.push(p[y * w + xx + 1] - p[y * w + xx]);
                }
            }
        }
    }
    out
}

fn diff_backward<S: Scalar>(g: &[S], c: usize, h: usize, w: usize, axis: usize) -> Vec<S> {
    let mut gx = vec![S::zero(); c * h * w];
    let mut it = g.iter();
    for ch in 0..c {
        let p = &mut gx[ch * h * w..(ch + 1) * h * w];
        let (rows, cols) = if axis == 1 { (h - 1, w) } else { (h, w - 1) };
        for y in 0..rows {
            for xx in 0..cols {
                let gv = *it.next().expect("gradient sized to output");
                let (hi, lo) = if axis == 1 {
                    ((y + 1) * w + xx, y * w + xx)
                } else {
                    (y * w + xx + 1, y * w + xx)
                };
                p[hi] = p[hi] + gv;
                p[lo] = p[lo] - gv;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests;
