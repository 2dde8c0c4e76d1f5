//! The deep sampling network: Down-SNet and Up-SNet parameters, their
//! graph assembly, initialization, and checkpoints.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{
    dense_block, subpixel_residual_up, superpixel_residual_down, ConvParams, DenseBlockConfig,
    DenseLayerParams, QBReluParams, QuantMode,
};
use crate::tensor::{Real, Shape, Tensor};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Standard deviation of the residual-output layers at initialization.
pub const RESIDUAL_INIT_STD: f64 = 0.001;

/// Architecture of a deep sampling network at one scale factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsnConfig {
    pub scale: usize,
    /// Output widths of the 3x3 stride-1 layers in front of the s x s
    /// stride-s sampling conv.
    pub down_widths: Vec<usize>,
    /// Up-SNet dense block; `input_width` is the width of the input 3x3 conv.
    pub dense: DenseBlockConfig,
    pub leaky_slope: f64,
    pub qbrelu: QBReluParams,
}

impl Default for DsnConfig {
    fn default() -> Self {
        DsnConfig::with_scale(3)
    }
}

impl DsnConfig {
    pub fn with_scale(scale: usize) -> Self {
        DsnConfig {
            scale,
            down_widths: vec![32, 32, 32],
            dense: DenseBlockConfig::default(),
            leaky_slope: 0.05,
            qbrelu: QBReluParams::default(),
        }
    }

    /// Small network for quick experiments and tests.
    pub fn tiny(scale: usize) -> Self {
        DsnConfig {
            scale,
            down_widths: vec![16, 16, 16],
            dense: DenseBlockConfig {
                depth: 4,
                growth: 8,
                bottleneck_width: 16,
                input_width: 16,
            },
            ..DsnConfig::with_scale(scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::InvalidArgument(format!(
                "scale factor must be 2, 3 or 4, got {}",
                self.scale
            )));
        }
        if self.down_widths.is_empty() || self.down_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "down-sampler widths must be non-empty and positive: {:?}",
                self.down_widths
            )));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope must lie in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        self.dense.validate()?;
        self.qbrelu.validate()
    }

    /// Parameter tensors in storage order: all Down-SNet tensors, then Up-SNet.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let s = self.scale;
        let mut specs = Vec::new();
        let mut conv = |name: String, co: usize, ci: usize, k: usize, role: Role, init: Init, fin: bool| {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: Shape::new(co, ci, k, k),
                role,
                init,
                is_final: fin,
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: Shape::new(1, co, 1, 1),
                role,
                init: Init::Zero,
                is_final: fin,
            });
        };
        let mut c_in = 1;
        for (i, &w) in self.down_widths.iter().enumerate() {
            conv(format!("down.conv{i}"), w, c_in, 3, Role::Down, Init::He, false);
            c_in = w;
        }
        conv("down.sample".into(), 1, c_in, s, Role::Down, Init::Residual, true);

        let d = &self.dense;
        conv("up.input".into(), d.input_width, 1, 3, Role::Up, Init::He, false);
        for l in 1..=d.depth {
            let ci = d.layer_input_channels(l);
            conv(
                format!("up.dense{l}.bottleneck"),
                d.bottleneck_width,
                ci,
                1,
                Role::Up,
                Init::He,
                false,
            );
            conv(format!("up.dense{l}.conv"), d.growth, d.bottleneck_width, 3, Role::Up, Init::He, false);
        }
        conv("up.output".into(), s * s, d.output_channels(), 1, Role::Up, Init::Residual, true);
        specs
    }

    fn down_param_count(&self) -> usize {
        2 * (self.down_widths.len() + 1)
    }

    /// Down-SNet on `hr`. `ids` are the leaves of [`DsnConfig::param_specs`].
    pub fn down_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        ids: &[NodeId],
        hr: NodeId,
        mode: QuantMode,
    ) -> Result<NodeId> {
        let ids = &ids[..self.down_param_count()];
        let convs: Vec<ConvParams> = ids
            .chunks(2)
            .map(|c| ConvParams {
                weight: c[0],
                bias: c[1],
            })
            .collect();
        let (sample, hidden) = convs.split_last().expect("down-sampler has a sampling conv");
        let slope = self.leaky_slope;
        let s = self.scale;
        superpixel_residual_down(g, hr, s, self.qbrelu.activation(mode), |g, x| {
            let mut x = x;
            for conv in hidden {
                let y = conv.same(g, x)?;
                x = g.leaky_relu(y, slope)?;
            }
            sample.apply(g, x, s, 0)
        })
    }

    /// Up-SNet on `lr`. `ids` are the leaves of [`DsnConfig::param_specs`].
    pub fn up_graph<T: Real>(&self, g: &mut Graph<T>, ids: &[NodeId], lr: NodeId) -> Result<NodeId> {
        let ids = &ids[self.down_param_count()..];
        let convs: Vec<ConvParams> = ids
            .chunks(2)
            .map(|c| ConvParams {
                weight: c[0],
                bias: c[1],
            })
            .collect();
        let input = convs[0];
        let output = convs[convs.len() - 1];
        let dense: Vec<DenseLayerParams> = convs[1..convs.len() - 1]
            .chunks(2)
            .map(|c| DenseLayerParams {
                bottleneck: c[0],
                conv: c[1],
            })
            .collect();
        let slope = self.leaky_slope;
        subpixel_residual_up(g, lr, self.scale, |g, x| {
            let f = input.same(g, x)?;
            let d = dense_block(g, f, &self.dense, &dense, slope)?;
            let a = g.leaky_relu(d, slope)?;
            output.apply(g, a, 1, 0)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`
    He,
    /// `N(0, RESIDUAL_INIT_STD^2)`
    Residual,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub role: Role,
    pub init: Init,
    /// Last layer of its subnetwork (trained with a reduced learning rate).
    pub is_final: bool,
}

impl ParamSpec {
    pub fn fan_in(&self) -> usize {
        self.shape.c * self.shape.h * self.shape.w
    }
}

/// Trained or freshly initialized parameters for one [`DsnConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct DsnModel {
    config: DsnConfig,
    params: Vec<Tensor<f32>>,
}

impl DsnModel {
    /// All parameters zero.
    pub fn zeros(config: DsnConfig) -> Result<Self> {
        config.validate()?;
        let params = config.param_specs().iter().map(|s| Tensor::zeros(s.shape)).collect();
        Ok(DsnModel { config, params })
    }

    /// Seeded initialization: residual-output layers from `N(0, 0.001^2)`,
    /// other conv weights from `N(0, 2 / fan_in)`, biases zero.
    pub fn init(config: DsnConfig, seed: u64) -> Result<Self> {
        let mut model = DsnModel::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = model.config.param_specs();
        for (spec, t) in specs.iter().zip(model.params.iter_mut()) {
            let std = match spec.init {
                Init::Zero => continue,
                Init::Residual => RESIDUAL_INIT_STD,
                Init::He => (2.0 / spec.fan_in() as f64).sqrt(),
            };
            let dist = Normal::new(0.0, std).expect("finite positive std");
            for v in t.data_mut() {
                *v = dist.sample(&mut rng) as f32;
            }
        }
        Ok(model)
    }

    pub(crate) fn from_parts(config: DsnConfig, params: Vec<Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::dim("model", "parameter", specs.len(), params.len()));
        }
        for (spec, p) in specs.iter().zip(&params) {
            spec.shape.expect(&p.shape(), "model")?;
        }
        Ok(DsnModel { config, params })
    }

    pub fn config(&self) -> &DsnConfig {
        &self.config
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.config.param_specs()
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape().len()).sum()
    }

    /// Zero both residual-output layers, so the network reduces to quantized
    /// average pooling followed by nearest-neighbour up-sampling.
    pub fn zero_residual_heads(&mut self) {
        let specs = self.config.param_specs();
        for (spec, p) in specs.iter().zip(self.params.iter_mut()) {
            if spec.is_final {
                p.data_mut().fill(0.0);
            }
        }
    }

    /// Insert every parameter into `g` as a leaf, trainable where `trainable`
    /// says so.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: impl Fn(&ParamSpec) -> bool) -> Vec<NodeId> {
        self.config
            .param_specs()
            .iter()
            .zip(&self.params)
            .map(|(spec, p)| g.leaf(p.cast(), trainable(spec)))
            .collect()
    }

    fn check_input(&self, shape: Shape, divisible: bool) -> Result<()> {
        if shape.c != 1 {
            return Err(Error::dim("dsn", "channel", 1, shape.c));
        }
        let s = self.config.scale;
        if divisible {
            if !shape.h.is_multiple_of(s) {
                return Err(Error::dim("forward_down", "height", shape.h.next_multiple_of(s), shape.h));
            }
            if !shape.w.is_multiple_of(s) {
                return Err(Error::dim("forward_down", "width", shape.w.next_multiple_of(s), shape.w));
            }
        }
        Ok(())
    }

    /// Low-resolution image for a luminance batch `(n, 1, h, w)` with `h`
    /// and `w` divisible by the scale.
    pub fn forward_down(&self, hr: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward_down_with(hr, QuantMode::Quantized)
    }

    pub fn forward_down_with<T: Real>(&self, hr: &Tensor<T>, mode: QuantMode) -> Result<Tensor<T>> {
        self.check_input(hr.shape(), true)?;
        let mut g = Graph::new();
        let ids = self.bind(&mut g, |_| false);
        let h = g.input(hr.clone());
        let l = self.config.down_graph(&mut g, &ids, h, mode)?;
        Ok(g.value(l).clone())
    }

    /// Restored high-resolution image `(n, 1, s*h, s*w)`; not clamped.
    pub fn forward_up<T: Real>(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(lr.shape(), false)?;
        let mut g = Graph::new();
        let ids = self.bind(&mut g, |_| false);
        let l = g.input(lr.clone());
        let s = self.config.up_graph(&mut g, &ids, l)?;
        Ok(g.value(s).clone())
    }

    /// `(L, S)` for `hr`.
    pub fn forward_roundtrip(&self, hr: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let lr = self.forward_down(hr)?;
        let sr = self.forward_up(&lr)?;
        Ok((lr, sr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::kernels;

    fn grid(q: &QBReluParams, level: u32) -> f32 {
        q.grid_value(level) as f32
    }

    #[test]
    fn specs_follow_architecture() {
        let cfg = DsnConfig::with_scale(3);
        let specs = cfg.param_specs();
        let sample = specs.iter().find(|s| s.name == "down.sample.weight").unwrap();
        assert_eq!(sample.shape, Shape::new(1, 32, 3, 3));
        let out = specs.iter().find(|s| s.name == "up.output.weight").unwrap();
        assert_eq!(out.shape, Shape::new(9, 32 + 4 * 16, 1, 1));
        assert_eq!(specs.iter().filter(|s| s.is_final).count(), 4);
        assert_eq!(specs.iter().filter(|s| s.role == Role::Down).count(), 8);
    }

    #[test]
    fn invalid_scale_rejected() {
        assert!(DsnModel::zeros(DsnConfig::with_scale(5)).is_err());
        assert!(DsnModel::zeros(DsnConfig::with_scale(1)).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = DsnModel::init(DsnConfig::tiny(2), 7).unwrap();
        let b = DsnModel::init(DsnConfig::tiny(2), 7).unwrap();
        let c = DsnModel::init(DsnConfig::tiny(2), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (spec, p) in a.specs().iter().zip(a.params()) {
            if spec.init == Init::Zero {
                assert!(p.data().iter().all(|&v| v == 0.0), "{}", spec.name);
            }
        }
    }

    #[test]
    fn init_moments() {
        // Residual heads: sigma = 0.001 over >= 1e4 samples.
        let mut cfg = DsnConfig::with_scale(4);
        cfg.dense.depth = 8;
        cfg.dense.growth = 64;
        cfg.dense.input_width = 160;
        let m = DsnModel::init(cfg, 3).unwrap();
        let specs = m.specs();
        let out = specs.iter().position(|s| s.name == "up.output.weight").unwrap();
        let data = m.params()[out].data();
        assert!(data.len() >= 10_000);
        let std = sample_std(data);
        assert!((0.0008..=0.0012).contains(&std), "residual std {std}");

        // fan_in = 9 * 32.
        let m = DsnModel::init(DsnConfig::with_scale(3), 11).unwrap();
        let specs = m.specs();
        let idx = specs.iter().position(|s| s.name == "down.conv1.weight").unwrap();
        assert_eq!(specs[idx].fan_in(), 288);
        let std = sample_std(m.params()[idx].data());
        let expect = (2.0f64 / 288.0).sqrt();
        assert!((std / expect - 1.0).abs() < 0.05, "he std {std} vs {expect}");
    }

    fn sample_std(data: &[f32]) -> f64 {
        let n = data.len() as f64;
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        (data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn zero_heads_reduce_to_pool_and_tile() {
        let mut m = DsnModel::init(DsnConfig::tiny(2), 1).unwrap();
        m.zero_residual_heads();
        let q = m.config().qbrelu;
        let hr = Tensor::from_fn(Shape::new(1, 1, 8, 6), |_, _, y, x| ((y * 6 + x) as f32 * 0.0173).sin().abs());
        let lr = m.forward_down(&hr).unwrap();
        let expect = kernels::avg_pool(&hr, 2).unwrap().map(|v| q.quantize(v as f64) as f32);
        assert_eq!(lr, expect);
        let sr = m.forward_up(&lr).unwrap();
        assert_eq!(sr, kernels::tile_upsample(&lr, 2));
    }

    #[test]
    fn shapes_and_grid() {
        let m = DsnModel::init(DsnConfig::tiny(3), 2).unwrap();
        let hr = Tensor::from_fn(Shape::new(1, 1, 48, 48), |_, _, y, x| ((x * 7 + y * 13) % 50) as f32 / 49.0);
        let (lr, sr) = m.forward_roundtrip(&hr).unwrap();
        assert_eq!(lr.shape(), Shape::new(1, 1, 16, 16));
        assert_eq!(sr.shape(), hr.shape());
        let q = m.config().qbrelu;
        for &v in lr.data() {
            let level = (v as f64 * 255.0).round() as u32;
            assert_eq!(v, grid(&q, level));
        }
        assert!(m.forward_down(&Tensor::zeros(Shape::new(1, 1, 47, 48))).is_err());
    }

    #[test]
    fn lossless_on_block_constant_grid_images() {
        let mut m = DsnModel::init(DsnConfig::tiny(3), 5).unwrap();
        m.zero_residual_heads();
        let q = m.config().qbrelu;
        let hr = Tensor::from_fn(Shape::new(2, 1, 12, 9), |n, _, y, x| {
            grid(&q, ((y / 3) * 37 + (x / 3) * 11 + n * 101) as u32 % 256)
        });
        let (_, sr) = m.forward_roundtrip(&hr).unwrap();
        assert_eq!(sr, hr);
    }
}
