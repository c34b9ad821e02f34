//! Configurable convolutional feature extractor.
//!
//! An [`EncoderConfig`] is an ordered list of blocks. In a plain encoder each
//! block is a run of 3×3 convolutions, each followed by a ReLU, optionally
//! closed by a 2×2 max-pool. In a residual encoder each block is a run of
//! basic residual units (`relu(conv(relu(conv(x))) + skip(x))`), where the skip
//! is the identity or a 1×1 projection when the channel count changes.
//!
//! The VGG-like presets downsample after blocks 1–3 only, so their features
//! have stride 8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Parameter, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Plain,
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    /// Number of 3×3 convolutions in a plain block; number of two-convolution
    /// residual units in a residual block.
    pub conv_count: usize,
    pub channels: usize,
    /// Max-pool 2×2 (stride 2) after the block.
    pub downsample_after: bool,
}

impl BlockSpec {
    pub const fn new(conv_count: usize, channels: usize, downsample_after: bool) -> Self {
        Self {
            conv_count,
            channels,
            downsample_after,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub blocks: Vec<BlockSpec>,
    pub input_channels: usize,
    pub block_kind: BlockKind,
}

/// Names accepted by [`EncoderConfig::preset`].
pub const PRESETS: [&str; 5] = ["tiny", "vgg16_like", "vgg19_like", "res18_like", "res50_like"];

fn stack(kind: BlockKind, counts: &[usize], channels: &[usize], downsampled: usize) -> EncoderConfig {
    EncoderConfig {
        blocks: counts
            .iter()
            .zip(channels)
            .enumerate()
            .map(|(i, (&n, &c))| BlockSpec::new(n, c, i < downsampled))
            .collect(),
        input_channels: 1,
        block_kind: kind,
    }
}

impl EncoderConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let vgg_channels = [64, 128, 256, 512, 512];
        let res_channels = [64, 128, 256, 512];
        Ok(match name {
            "tiny" => stack(BlockKind::Plain, &[1, 1, 2], &[8, 16, 32], 2),
            "vgg16_like" => stack(BlockKind::Plain, &[2, 2, 3, 3, 3], &vgg_channels, 3),
            "vgg19_like" => stack(BlockKind::Plain, &[2, 2, 4, 4, 4], &vgg_channels, 3),
            "res18_like" => stack(BlockKind::Residual, &[2, 2, 2, 2], &res_channels, 3),
            "res50_like" => stack(BlockKind::Residual, &[3, 4, 6, 3], &res_channels, 3),
            other => {
                return Err(Error::Config(format!(
                    "unknown encoder preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// The preset this configuration equals, ignoring the input channel count.
    pub fn preset_name(&self) -> Option<&'static str> {
        PRESETS.into_iter().find(|name| {
            let preset = Self::preset(name).expect("known preset");
            preset.blocks == self.blocks && preset.block_kind == self.block_kind
        })
    }

    pub fn with_input_channels(mut self, channels: usize) -> Self {
        self.input_channels = channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be at least 1".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.conv_count == 0 || b.channels == 0 {
                return Err(Error::Config(format!(
                    "block {} needs conv_count >= 1 and channels >= 1, got {b:?}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Input pixels per feature cell.
    pub fn stride(&self) -> usize {
        1 << self.blocks.iter().filter(|b| b.downsample_after).count()
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvRole {
    /// A convolution of a plain block.
    Plain,
    /// First or second convolution of a residual unit.
    Branch,
    /// 1×1 channel projection on a residual skip path.
    Projection,
}

/// One convolution of a built encoder, in declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    /// Zero-based block index.
    pub block: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub role: ConvRole,
    /// Index of the weight in [`Encoder::params`]; the bias follows it.
    pub weight: usize,
}

impl ConvLayer {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

fn layout(config: &EncoderConfig) -> Vec<ConvLayer> {
    let mut layers = Vec::new();
    let mut channels = config.input_channels;
    let add = |layers: &mut Vec<ConvLayer>, block, in_channels, out_channels, kernel, role| {
        let weight = 2 * layers.len();
        layers.push(ConvLayer {
            block,
            in_channels,
            out_channels,
            kernel,
            role,
            weight,
        });
    };
    for (b, spec) in config.blocks.iter().enumerate() {
        for _ in 0..spec.conv_count {
            match config.block_kind {
                BlockKind::Plain => add(&mut layers, b, channels, spec.channels, 3, ConvRole::Plain),
                BlockKind::Residual => {
                    add(&mut layers, b, channels, spec.channels, 3, ConvRole::Branch);
                    add(&mut layers, b, spec.channels, spec.channels, 3, ConvRole::Branch);
                    if channels != spec.channels {
                        add(&mut layers, b, channels, spec.channels, 1, ConvRole::Projection);
                    }
                }
            }
            channels = spec.channels;
        }
    }
    layers
}

/// Encoder output: a `[D, h, w]` embedding with `h = H / stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub tensor: Tensor<T>,
    pub stride: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>, stride: usize) -> Result<Self> {
        tensor.dims3()?;
        if stride == 0 {
            return Err(Error::shape("feature stride must be positive"));
        }
        Ok(Self { tensor, stride })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

/// Tape handles for every parameter of an [`Encoder`], registered once per graph.
#[derive(Clone, Debug)]
pub struct EncoderVars(Vec<Var>);

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    layers: Vec<ConvLayer>,
    params: Vec<Parameter<T>>,
}

impl<T: Real> Encoder<T> {
    /// He-normal weights (std `sqrt(2 / fan_in)`) and zero biases, drawn
    /// deterministically from `seed`. The draws happen in `f64`, so `f32`
    /// and `f64` encoders built from one seed agree up to rounding.
    pub fn build(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_init(config, |layer, n| {
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
        })
    }

    /// Every weight and bias zero.
    pub fn zeroed(config: EncoderConfig) -> Result<Self> {
        Self::with_init(config, |_, n| vec![T::zero(); n])
    }

    fn with_init(config: EncoderConfig, mut weights: impl FnMut(&ConvLayer, usize) -> Vec<T>) -> Result<Self> {
        config.validate()?;
        let layers = layout(&config);
        let mut params = Vec::with_capacity(2 * layers.len());
        for layer in &layers {
            let shape = [layer.out_channels, layer.in_channels, layer.kernel, layer.kernel];
            let w = weights(layer, shape.iter().product());
            params.push(Parameter::new(Tensor::new(shape.to_vec(), w)?));
            params.push(Parameter::new(Tensor::zeros(&[layer.out_channels])));
        }
        Ok(Self { config, layers, params })
    }

    /// Reassembles an encoder from stored parameter values, checking every shape.
    pub fn from_parameters(config: EncoderConfig, values: Vec<Tensor<T>>) -> Result<Self> {
        let mut encoder = Self::zeroed(config)?;
        if values.len() != encoder.params.len() {
            return Err(Error::Format(format!(
                "configuration needs {} parameter tensors, got {}",
                encoder.params.len(),
                values.len()
            )));
        }
        for (i, (p, v)) in encoder.params.iter_mut().zip(values).enumerate() {
            if p.value.shape() != v.shape() {
                return Err(Error::Format(format!(
                    "parameter {i} should have shape {:?}, got {:?}",
                    p.value.shape(),
                    v.shape()
                )));
            }
            *p = Parameter::new(v);
        }
        Ok(encoder)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    /// Convolutions per block, projections included.
    pub fn conv_counts_per_block(&self) -> Vec<usize> {
        let mut counts = vec![0; self.config.blocks.len()];
        for layer in &self.layers {
            counts[layer.block] += 1;
        }
        counts
    }

    pub fn stride(&self) -> usize {
        self.config.stride()
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| Parameter::new(p.value.cast())).collect(),
        }
    }

    pub fn register(&self, graph: &mut Graph<T>) -> EncoderVars {
        EncoderVars(self.params.iter().enumerate().map(|(i, p)| graph.param(i, p)).collect())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match *shape {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape(format!("encoder input must be [C,H,W], got {shape:?}"))),
        };
        if c != self.config.input_channels {
            return Err(Error::shape(format!(
                "encoder expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let s = self.stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by the feature stride {s}"
            )));
        }
        Ok(())
    }

    fn conv(&self, g: &mut Graph<T>, vars: &EncoderVars, layer: &ConvLayer, x: Var) -> Result<Var> {
        g.conv2d(x, vars.0[layer.weight], vars.0[layer.weight + 1], 1, layer.padding())
    }

    /// Records the forward pass of `image` on `graph`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &EncoderVars, image: Var) -> Result<Var> {
        self.check_input(g.value(image).shape())?;
        let mut x = image;
        let mut layers = self.layers.iter().peekable();
        for (b, spec) in self.config.blocks.iter().enumerate() {
            while let Some(layer) = layers.next_if(|l| l.block == b) {
                x = match layer.role {
                    ConvRole::Plain => {
                        let y = self.conv(g, vars, layer, x)?;
                        g.relu(y)
                    }
                    ConvRole::Branch => {
                        let second = layers.next().expect("residual units hold two convolutions");
                        let h = self.conv(g, vars, layer, x)?;
                        let h = g.relu(h);
                        let h = self.conv(g, vars, second, h)?;
                        let skip = match layers.next_if(|l| l.role == ConvRole::Projection) {
                            Some(proj) => self.conv(g, vars, proj, x)?,
                            None => x,
                        };
                        let sum = g.add(h, skip)?;
                        g.relu(sum)
                    }
                    ConvRole::Projection => unreachable!("projections follow their branch"),
                };
            }
            if spec.downsample_after {
                x = g.maxpool2d(x, 2, 2)?;
            }
        }
        Ok(x)
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<FeatureMap<T>> {
        self.check_input(image.shape())?;
        let mut g = Graph::new();
        let vars = self.register(&mut g);
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, &vars, x)?;
        FeatureMap::new(g.value(y).clone(), self.stride())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
        c_out * c_in * k * k + c_out
    }

    #[test]
    fn vgg19_adds_one_conv_to_each_of_the_last_three_blocks() {
        let v16 = Encoder::<f32>::zeroed(EncoderConfig::preset("vgg16_like").unwrap()).unwrap();
        let v19 = Encoder::<f32>::zeroed(EncoderConfig::preset("vgg19_like").unwrap()).unwrap();
        assert_eq!(v16.conv_counts_per_block(), vec![2, 2, 3, 3, 3]);
        assert_eq!(v19.conv_counts_per_block(), vec![2, 2, 4, 4, 4]);
        assert_eq!(v19.layers().len() - v16.layers().len(), 3);
        let extra = conv_params(256, 256, 3) + 2 * conv_params(512, 512, 3);
        assert_eq!(v19.parameter_count() - v16.parameter_count(), extra);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = EncoderConfig::preset("tiny").unwrap();
        let a = Encoder::<f32>::build(cfg.clone(), 42).unwrap();
        let b = Encoder::<f32>::build(cfg.clone(), 42).unwrap();
        let c = Encoder::<f32>::build(cfg, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_preset_is_small_and_fast() {
        let start = Instant::now();
        let tiny = Encoder::<f32>::build(EncoderConfig::preset("tiny").unwrap(), 0).unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0);
        // 1→8, 8→16, 16→32, 32→32 3×3 convolutions with biases
        let expected = conv_params(1, 8, 3) + conv_params(8, 16, 3) + conv_params(16, 32, 3) + conv_params(32, 32, 3);
        assert_eq!(tiny.parameter_count(), expected);
        assert!(expected < 50_000);
    }

    #[test]
    fn init_scale_follows_fan_in() {
        let enc = Encoder::<f64>::build(EncoderConfig::preset("tiny").unwrap(), 3).unwrap();
        // last conv: fan_in = 32·9, 9216 weights
        let w = enc.params()[6].value.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (32.0 * 9.0);
        assert!(mean.abs() < 0.01);
        assert!((var / expected - 1.0).abs() < 0.1, "variance {var} vs {expected}");
        assert!(enc.params()[7].value.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn feature_geometry() {
        let tiny = Encoder::<f32>::build(EncoderConfig::preset("tiny").unwrap(), 0).unwrap();
        let f = tiny.encode(&Tensor::full(&[1, 32, 32], 0.5)).unwrap();
        assert_eq!(f.tensor.shape(), &[32, 8, 8]);
        assert_eq!(f.stride, 4);
        assert!(matches!(
            tiny.encode(&Tensor::full(&[1, 30, 32], 0.5)),
            Err(Error::Shape(_))
        ));
        assert!(tiny.encode(&Tensor::full(&[3, 32, 32], 0.5)).is_err());

        for name in ["vgg16_like", "vgg19_like", "res18_like", "res50_like"] {
            assert_eq!(EncoderConfig::preset(name).unwrap().stride(), 8, "{name}");
        }
    }

    #[test]
    fn standard_presets_give_28x28_features_on_224_inputs() {
        // zero weights keep this cheap to reason about; the geometry is what matters
        let enc = Encoder::<f32>::zeroed(EncoderConfig::preset("vgg16_like").unwrap()).unwrap();
        let f = enc.encode(&Tensor::full(&[1, 224, 224], 0.3)).unwrap();
        assert_eq!(f.tensor.shape(), &[512, 28, 28]);
        assert!(f.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let enc = Encoder::<f32>::zeroed(EncoderConfig::preset("tiny").unwrap()).unwrap();
        let img = Tensor::from_fn(&[1, 16, 16], |i| (i % 7) as f32 / 7.0);
        let f = enc.encode(&img).unwrap();
        assert!(f.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_units_with_zeroed_branches_are_identity() {
        let cfg = EncoderConfig {
            blocks: vec![BlockSpec::new(2, 4, false), BlockSpec::new(1, 4, false)],
            input_channels: 4,
            block_kind: BlockKind::Residual,
        };
        let enc = Encoder::<f64>::zeroed(cfg).unwrap();
        assert!(enc.layers().iter().all(|l| l.role == ConvRole::Branch));
        let img = Tensor::from_fn(&[4, 6, 6], |i| ((i * 37) % 11) as f64 / 11.0);
        assert_eq!(enc.encode(&img).unwrap().tensor, img);
    }

    #[test]
    fn residual_projection_carries_the_skip_when_channels_change() {
        let cfg = EncoderConfig {
            blocks: vec![BlockSpec::new(1, 2, false)],
            input_channels: 1,
            block_kind: BlockKind::Residual,
        };
        let mut enc = Encoder::<f64>::zeroed(cfg).unwrap();
        let proj = *enc.layers().iter().find(|l| l.role == ConvRole::Projection).unwrap();
        // projection weights (2, -1): channel 0 copies the input, channel 1 is relu(-x) = 0
        enc.params_mut()[proj.weight].value = Tensor::new(vec![2, 1, 1, 1], vec![1.0, -1.0]).unwrap();
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f64 / 16.0);
        let out = enc.encode(&img).unwrap().tensor;
        assert_eq!(&out.data()[..16], img.data());
        assert!(out.data()[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(matches!(EncoderConfig::preset("vgg11"), Err(Error::Config(_))));
        let mut cfg = EncoderConfig::preset("tiny").unwrap();
        cfg.blocks[1].conv_count = 0;
        assert!(matches!(Encoder::<f32>::build(cfg, 0), Err(Error::Config(_))));
        let empty = EncoderConfig {
            blocks: vec![],
            input_channels: 1,
            block_kind: BlockKind::Plain,
        };
        assert!(Encoder::<f32>::build(empty, 0).is_err());
    }

    #[test]
    fn preset_names_round_trip() {
        for name in PRESETS {
            let cfg = EncoderConfig::preset(name).unwrap().with_input_channels(3);
            assert_eq!(cfg.preset_name(), Some(name));
        }
    }
}
