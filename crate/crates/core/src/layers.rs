//! Network building blocks: the quantized bilateral activation, the two
//! residual sampling heads, and the dense bottleneck block.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Elementwise, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Rails and level count of the quantized bilateral ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QBReluParams {
    pub t_min: f64,
    pub t_max: f64,
    /// Number of quantization levels, including both rails.
    pub levels: u32,
}

impl Default for QBReluParams {
    /// 8-bit output on a `[0, 1]` scale.
    fn default() -> Self {
        QBReluParams {
            t_min: 0.0,
            t_max: 1.0,
            levels: 256,
        }
    }
}

impl QBReluParams {
    pub fn new(t_min: f64, t_max: f64, levels: u32) -> Result<Self> {
        let p = QBReluParams { t_min, t_max, levels };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min.is_finite() && self.t_max.is_finite() && self.t_min < self.t_max) {
            return Err(Error::InvalidArgument(format!(
                "q_brelu rails must satisfy t_min < t_max (got {}, {})",
                self.t_min, self.t_max
            )));
        }
        if self.levels < 2 {
            return Err(Error::InvalidArgument(format!(
                "q_brelu needs at least 2 levels, got {}",
                self.levels
            )));
        }
        Ok(())
    }

    pub fn span(&self) -> f64 {
        self.t_max - self.t_min
    }

    /// Distance between neighbouring grid values.
    pub fn step(&self) -> f64 {
        self.span() / f64::from(self.levels - 1)
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.max(self.t_min).min(self.t_max)
    }

    /// Index of the grid value `x` rounds to.
    pub fn level(&self, x: f64) -> u32 {
        let scaled = f64::from(self.levels - 1) / self.span() * (self.clamp(x) - self.t_min);
        ((scaled + 0.5).floor() as i64).clamp(0, i64::from(self.levels - 1)) as u32
    }

    pub fn grid_value(&self, level: u32) -> f64 {
        if level >= self.levels - 1 {
            // The top level must not overshoot the rail by rounding.
            return self.t_max;
        }
        self.step() * f64::from(level) + self.t_min
    }

    /// Forward quantizer: clamp to the rails, round to the nearest level.
    pub fn quantize(&self, x: f64) -> f64 {
        self.grid_value(self.level(x))
    }

    /// Straight-through surrogate derivative: 1 strictly inside the rails.
    pub fn surrogate_derivative(&self, x: f64) -> f64 {
        if self.t_min < x && x < self.t_max {
            1.0
        } else {
            0.0
        }
    }

    fn rail(&self, x: f64) -> i64 {
        if x <= self.t_min {
            0
        } else if x >= self.t_max {
            2
        } else {
            1
        }
    }

    /// Graph activation for the requested forward behaviour.
    pub fn activation(&self, mode: QuantMode) -> Arc<dyn Elementwise> {
        match mode {
            QuantMode::Quantized => Arc::new(QBRelu(*self)),
            QuantMode::Relaxed => Arc::new(BRelu(*self)),
        }
    }
}

/// Forward behaviour of the down-sampler's output activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantMode {
    /// Clamp and round to the grid (training and inference).
    #[default]
    Quantized,
    /// Clamp only. Its exact derivative equals the quantizer's surrogate,
    /// so finite differences can verify the straight-through path.
    Relaxed,
}

/// Quantized bilateral ReLU with a straight-through gradient inside the rails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QBRelu(pub QBReluParams);

impl Elementwise for QBRelu {
    fn name(&self) -> &'static str {
        "q_brelu"
    }
    fn forward(&self, x: f64) -> f64 {
        self.0.quantize(x)
    }
    fn derivative(&self, x: f64) -> f64 {
        self.0.surrogate_derivative(x)
    }
    fn region(&self, x: f64) -> i64 {
        i64::from(self.0.level(x)) * 4 + self.0.rail(x)
    }
}

/// Bilateral ReLU: `max(min(x, t_max), t_min)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BRelu(pub QBReluParams);

impl Elementwise for BRelu {
    fn name(&self) -> &'static str {
        "brelu"
    }
    fn forward(&self, x: f64) -> f64 {
        self.0.clamp(x)
    }
    fn derivative(&self, x: f64) -> f64 {
        self.0.surrogate_derivative(x)
    }
    fn region(&self, x: f64) -> i64 {
        self.0.rail(x)
    }
}

/// Apply the quantizer to every element of a graph node.
pub fn q_brelu<T: Real>(g: &mut Graph<T>, input: NodeId, p: &QBReluParams) -> NodeId {
    g.map(input, p.activation(QuantMode::Quantized))
}

/// Gradient of the quantizer: `grad_out` where `t_min < x < t_max`, else 0.
pub fn q_brelu_backward(grad_out: &[f64], input: &[f64], p: &QBReluParams) -> Result<Vec<f64>> {
    if grad_out.len() != input.len() {
        return Err(Error::dim("q_brelu_backward", "element", input.len(), grad_out.len()));
    }
    Ok(grad_out
        .iter()
        .zip(input)
        .map(|(&g, &x)| g * p.surrogate_derivative(x))
        .collect())
}

/// Weight and bias leaves of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl ConvParams {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        g.conv2d(x, self.weight, self.bias, stride, pad)
    }

    /// Stride-1 convolution that keeps the spatial size (odd kernels).
    pub fn same<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let k = g.shape(self.weight).h;
        self.apply(g, x, 1, k / 2)
    }
}

/// `L = q_brelu(F_d[H] + avg_pool(H, s))`.
///
/// `residual` builds the learned residual head on `H`; its output must be at
/// the pooled resolution with one channel per input channel.
pub fn superpixel_residual_down<T, F>(
    g: &mut Graph<T>,
    hr: NodeId,
    s: usize,
    activation: Arc<dyn Elementwise>,
    residual: F,
) -> Result<NodeId>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let pooled = g.avg_pool(hr, s)?;
    let r = residual(g, hr)?;
    g.shape(pooled).expect(&g.shape(r), "superpixel_residual_down")?;
    let sum = g.add(r, pooled)?;
    Ok(g.map(sum, activation))
}

/// `S = pixel_shuffle(F_u[L], s) + tile_upsample(L, s)`.
///
/// `residual` must produce `s^2` channels at the resolution of `L`. No clamp
/// is applied; export to 8-bit clamps.
pub fn subpixel_residual_up<T, F>(g: &mut Graph<T>, lr: NodeId, s: usize, residual: F) -> Result<NodeId>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let r = residual(g, lr)?;
    let (ls, rs) = (g.shape(lr), g.shape(r));
    if rs.c != s * s {
        return Err(Error::dim("subpixel_residual_up", "channel", s * s, rs.c));
    }
    if rs.h != ls.h {
        return Err(Error::dim("subpixel_residual_up", "height", ls.h, rs.h));
    }
    if rs.w != ls.w {
        return Err(Error::dim("subpixel_residual_up", "width", ls.w, rs.w));
    }
    let shuffled = g.pixel_shuffle(r, s)?;
    let tiled = g.tile_upsample(lr, s)?;
    g.add(shuffled, tiled)
}

/// Shape of a dense bottleneck block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockConfig {
    /// Number of composite layers.
    pub depth: usize,
    /// Feature maps added by each layer.
    pub growth: usize,
    /// Output channels of each 1x1 bottleneck.
    pub bottleneck_width: usize,
    /// Channels entering the block.
    pub input_width: usize,
}

impl Default for DenseBlockConfig {
    fn default() -> Self {
        DenseBlockConfig {
            depth: 4,
            growth: 16,
            bottleneck_width: 32,
            input_width: 32,
        }
    }
}

impl DenseBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.growth == 0 || self.bottleneck_width == 0 || self.input_width == 0 {
            return Err(Error::InvalidArgument(format!(
                "dense block dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Channels consumed by layer `l` (1-based).
    pub fn layer_input_channels(&self, l: usize) -> usize {
        self.input_width + (l - 1) * self.growth
    }

    pub fn output_channels(&self) -> usize {
        self.input_width + self.depth * self.growth
    }

    /// Receptive field of the stream leaving layer `l` (1-based), measured
    /// at the block input.
    pub fn receptive_field(&self, l: usize) -> usize {
        2 * l + 1
    }
}

/// Parameters of one composite layer: 1x1 bottleneck then 3x3 conv.
#[derive(Debug, Clone, Copy)]
pub struct DenseLayerParams {
    pub bottleneck: ConvParams,
    pub conv: ConvParams,
}

/// Dense block: layer `l` sees the concatenation of the block input and all
/// earlier layer outputs through `lrelu -> 1x1 -> lrelu -> 3x3`.
pub fn dense_block<T: Real>(
    g: &mut Graph<T>,
    input: NodeId,
    cfg: &DenseBlockConfig,
    layers: &[DenseLayerParams],
    slope: f64,
) -> Result<NodeId> {
    cfg.validate()?;
    let c = g.shape(input).c;
    if c != cfg.input_width {
        return Err(Error::dim("dense_block", "channel", cfg.input_width, c));
    }
    if layers.len() != cfg.depth {
        return Err(Error::dim("dense_block", "layer", cfg.depth, layers.len()));
    }
    let mut features = vec![input];
    for (i, layer) in layers.iter().enumerate() {
        let l = i + 1;
        let x = if features.len() == 1 {
            input
        } else {
            g.concat_channels(&features)?
        };
        debug_assert_eq!(g.shape(x).c, cfg.layer_input_channels(l));
        let a = g.leaky_relu(x, slope)?;
        let b = layer.bottleneck.apply(g, a, 1, 0)?;
        let b = g.leaky_relu(b, slope)?;
        let out = layer.conv.same(g, b)?;
        let oc = g.shape(out).c;
        if oc != cfg.growth {
            return Err(Error::dim("dense_block", "growth", cfg.growth, oc));
        }
        features.push(out);
    }
    g.concat_channels(&features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn p(t_min: f64, t_max: f64, levels: u32) -> QBReluParams {
        QBReluParams::new(t_min, t_max, levels).unwrap()
    }

    #[test]
    fn qbrelu_examples() {
        let q = p(0.0, 1.0, 4);
        assert!((q.quantize(0.3) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(q.quantize(-0.2), 0.0);
        assert_eq!(q.quantize(1.7), 1.0);
        for level in 0..4 {
            let v = q.grid_value(level);
            assert_eq!(q.quantize(v), v);
        }
    }

    #[test]
    fn qbrelu_rejects_bad_params() {
        assert!(QBReluParams::new(1.0, 1.0, 4).is_err());
        assert!(QBReluParams::new(0.0, 1.0, 1).is_err());
        assert!(QBReluParams::new(0.0, f64::NAN, 4).is_err());
    }

    #[test]
    fn straight_through_backward() {
        let q = p(0.0, 1.0, 4);
        let g = q_brelu_backward(&[2.0, 2.0, 2.0, 2.0], &[0.5, -0.2, 1.0, 0.0], &q).unwrap();
        assert_eq!(g, vec![2.0, 0.0, 0.0, 0.0]);
        assert!(q_brelu_backward(&[1.0], &[0.5, 0.5], &q).is_err());
    }

    #[test]
    fn down_head_with_zero_residual_quantizes_pooled_mean() {
        let mut g = Graph::<f64>::new();
        let h = g.input(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let q = QBReluParams::default();
        let l = superpixel_residual_down(&mut g, h, 2, q.activation(QuantMode::Quantized), |g, _| {
            Ok(g.input(Tensor::zeros(Shape::new(1, 1, 1, 1))))
        })
        .unwrap();
        assert!((g.value(l).data()[0] - 64.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn up_head_checks_residual_channels() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::zeros(Shape::new(1, 1, 3, 3)));
        let r = subpixel_residual_up(&mut g, l, 2, |g, _| Ok(g.input(Tensor::zeros(Shape::new(1, 3, 3, 3)))));
        assert!(matches!(r, Err(Error::Dimension { axis: "channel", .. })));
    }

    #[test]
    fn dense_shape_and_receptive_fields() {
        let cfg = DenseBlockConfig {
            depth: 4,
            growth: 4,
            bottleneck_width: 8,
            input_width: 8,
        };
        assert_eq!(cfg.output_channels(), 24);
        assert_eq!(
            (1..=4).map(|l| cfg.receptive_field(l)).collect::<Vec<_>>(),
            vec![3, 5, 7, 9]
        );
        assert_eq!(cfg.layer_input_channels(3), 16);
    }
}
