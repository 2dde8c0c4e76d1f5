use std::fmt;
use std::sync::Arc;

use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Scalar activation applied elementwise inside a [`Graph`].
///
/// `region` labels the smooth piece of the function containing `x`; two
/// points with equal labels must be joined by a segment on which the
/// function is differentiable. The gradient checker uses it to skip
/// perturbations that straddle a kink.
pub trait Elementwise: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, x: f64) -> f64;
    /// Derivative (or the chosen surrogate) used by backpropagation.
    fn derivative(&self, x: f64) -> f64;
    fn region(&self, x: f64) -> i64;
}

/// `max(x, slope * x)`. The derivative at exactly zero is `slope`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakyRelu {
    pub slope: f64,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must lie in [0, 1), got {slope}"
            )));
        }
        Ok(LeakyRelu { slope })
    }
}

impl Elementwise for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    #[inline]
    fn forward(&self, x: f64) -> f64 {
        x.max(self.slope * x)
    }
    #[inline]
    fn derivative(&self, x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else {
            self.slope
        }
    }
    fn region(&self, x: f64) -> i64 {
        i64::from(x > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        input: NodeId,
        s: usize,
    },
    Tile {
        input: NodeId,
        s: usize,
    },
    PixelShuffle {
        input: NodeId,
        s: usize,
    },
    PixelUnshuffle {
        input: NodeId,
        s: usize,
    },
    Map {
        input: NodeId,
        f: Arc<dyn Elementwise>,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    L1 {
        a: NodeId,
        b: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avg_pool",
            Op::Tile { .. } => "tile_upsample",
            Op::PixelShuffle { .. } => "pixel_shuffle",
            Op::PixelUnshuffle { .. } => "pixel_unshuffle",
            Op::Map { f, .. } => f.name(),
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Scale { .. } => "scalar_mul",
            Op::L1 { .. } => "l1_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Tape of operations in creation order, which is also a topological order.
///
/// Every node caches its forward value; [`Graph::backward`] walks the tape
/// in reverse and leaves gradients on the leaves that asked for them.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.node(id).requires_grad)
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.node(id).value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.node(id).value.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.node(id).grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let out = kernels::conv2d(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn avg_pool(&mut self, input: NodeId, s: usize) -> Result<NodeId> {
        let out = kernels::avg_pool(self.value(input), s)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::AvgPool { input, s }, rg))
    }

    pub fn tile_upsample(&mut self, input: NodeId, s: usize) -> Result<NodeId> {
        if s == 0 {
            return Err(Error::InvalidArgument("tile_upsample: scale must be >= 1".into()));
        }
        let out = kernels::tile_upsample(self.value(input), s);
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Tile { input, s }, rg))
    }

    pub fn pixel_shuffle(&mut self, input: NodeId, s: usize) -> Result<NodeId> {
        let out = kernels::pixel_shuffle(self.value(input), s)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::PixelShuffle { input, s }, rg))
    }

    pub fn pixel_unshuffle(&mut self, input: NodeId, s: usize) -> Result<NodeId> {
        let out = kernels::pixel_unshuffle(self.value(input), s)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::PixelUnshuffle { input, s }, rg))
    }

    pub fn map(&mut self, input: NodeId, f: Arc<dyn Elementwise>) -> NodeId {
        let out = self
            .value(input)
            .map(|v| T::from_f64(f.forward(v.to_f64())));
        let rg = self.requires_grad(input);
        self.push(out, Op::Map { input, f }, rg)
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> Result<NodeId> {
        let f = LeakyRelu::new(slope)?;
        Ok(self.map(input, Arc::new(f)))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&id| self.value(id)).collect();
        let out = kernels::concat_channels(&values)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::zip_map(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::zip_map(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn scalar_mul(&mut self, input: NodeId, factor: f64) -> NodeId {
        let f = T::from_f64(factor);
        let out = self.value(input).map(|v| v * f);
        let rg = self.requires_grad(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// Mean absolute error, producing a `1x1x1x1` scalar node.
    ///
    /// The subgradient is `sign(a - b) / N`, zero at ties.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.shape().expect(&vb.shape(), "l1_loss")?;
        let sum: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
            .sum();
        let mean = sum / va.shape().len().max(1) as f64;
        let out = Tensor::full(Shape::new(1, 1, 1, 1), T::from_f64(mean));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::L1 { a, b }, rg))
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.shape().len() != 1 {
            return Err(Error::dim("scalar", "element", 1, v.shape().len()));
        }
        Ok(v.data()[0].to_f64())
    }

    /// Hash of the piecewise-smooth region of every kinked operation.
    ///
    /// Equal signatures at two parameter settings mean no activation or loss
    /// term changed branch between them.
    pub fn kink_signature(&self) -> u64 {
        const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = FNV_OFFSET;
        let mut mix = |v: i64| {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(FNV_PRIME);
            }
        };
        for node in &self.nodes {
            match &node.op {
                Op::Map { input, f } => {
                    for &x in self.value(*input).data() {
                        mix(f.region(x.to_f64()));
                    }
                }
                Op::L1 { a, b } => {
                    for (&x, &y) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        let d = x.to_f64() - y.to_f64();
                        mix(if d > 0.0 {
                            1
                        } else if d < 0.0 {
                            -1
                        } else {
                            0
                        });
                    }
                }
                _ => {}
            }
        }
        h
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Reverse-mode sweep from a single-element node.
    ///
    /// Clears gradients left by a previous sweep. Intermediate gradients are
    /// released once propagated; leaves keep theirs.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.shape(loss);
        if shape.len() != 1 {
            return Err(Error::dim("backward", "element", 1, shape.len()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::full(shape, T::ONE));
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backward_op(&op, &g)
                .map_err(|e| Error::Numeric(format!("backward through {}: {e}", op.name())))?;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op, g: &Tensor<T>) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    self.value(bias),
                    g,
                    stride,
                    pad,
                    self.requires_grad(input),
                )?;
                if let Some(gi) = grads.input {
                    self.accumulate(input, gi);
                }
                self.accumulate(weight, grads.weight);
                self.accumulate(bias, grads.bias);
            }
            Op::AvgPool { input, s } => {
                self.accumulate(input, kernels::avg_pool_backward(g, s));
            }
            Op::Tile { input, s } => {
                self.accumulate(input, kernels::tile_backward(g, s)?);
            }
            Op::PixelShuffle { input, s } => {
                self.accumulate(input, kernels::pixel_unshuffle(g, s)?);
            }
            Op::PixelUnshuffle { input, s } => {
                self.accumulate(input, kernels::pixel_shuffle(g, s)?);
            }
            Op::Map { input, ref f } => {
                let x = self.value(input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * T::from_f64(f.derivative(xv.to_f64())))
                    .collect();
                let gi = Tensor::from_vec(x.shape(), data)?;
                self.accumulate(input, gi);
            }
            Op::Concat { ref inputs } => {
                let mut start = 0;
                for &id in inputs {
                    let c = self.shape(id).c;
                    if self.requires_grad(id) {
                        let gi = kernels::slice_channels(g, start, c);
                        self.accumulate(id, gi);
                    }
                    start += c;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|v| -v));
            }
            Op::Scale { input, factor } => {
                let f = T::from_f64(factor);
                self.accumulate(input, g.map(|v| v * f));
            }
            Op::L1 { a, b } => {
                let upstream = g.data()[0];
                let (va, vb) = (self.value(a), self.value(b));
                let scale = upstream * T::from_f64(1.0 / va.shape().len().max(1) as f64);
                let data: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                let ga = Tensor::from_vec(va.shape(), data)?;
                if self.requires_grad(b) {
                    self.accumulate(b, ga.map(|v| -v));
                }
                self.accumulate(a, ga);
            }
        }
        Ok(())
    }
}
