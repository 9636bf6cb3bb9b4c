//! Convolutional feature extractor and the full classifier built on it.
//!
//! Each block is `pad → conv3×3 → relu → maxpool2`. With the default
//! one-pixel padding a 64×64 image shrinks 64→32→16→8 through blocks of
//! 8, 16 and 32 channels, giving `F = 32·8·8 = 2048` features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spinal::{fan_in_uniform, SpinalConfig, SpinalHead};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_BLOCKS: [usize; 3] = [8, 16, 32];

/// Kernels are drawn on ±gain/√fan_in; √6 keeps activation variance roughly
/// constant through relu.
const CONV_INIT_GAIN: f32 = 2.449_489_7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub image_size: usize,
    /// Output channels of each block.
    pub blocks: Vec<usize>,
    pub kernel: usize,
    /// Zero padding applied before every convolution.
    pub padding: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 1,
            image_size: DEFAULT_IMAGE_SIZE,
            blocks: DEFAULT_BLOCKS.to_vec(),
            kernel: 3,
            padding: 1,
        }
    }
}

impl BackboneConfig {
    pub fn with_image_size(image_size: usize) -> Self {
        BackboneConfig {
            image_size,
            ..Default::default()
        }
    }

    /// Spatial extent after every block, checking that each convolution
    /// output is a positive even integer so the 2×2 pooling tiles it.
    pub fn extents(&self) -> Result<Vec<usize>> {
        if self.input_channels == 0 || self.kernel == 0 {
            return Err(Error::Config(
                "input channels and kernel size must be positive".into(),
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "image size must be a positive even integer, got {}",
                self.image_size
            )));
        }
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return Err(Error::Config(format!(
                "blocks must be non-empty positive channel counts, got {:?}",
                self.blocks
            )));
        }
        let mut n = self.image_size;
        let mut trace = vec![n];
        let mut out = Vec::with_capacity(self.blocks.len());
        for _ in &self.blocks {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::Config(format!(
                    "extent {n} is too small for a {k}x{k} kernel (trace {trace:?})",
                    k = self.kernel
                )));
            }
            let conv = padded - self.kernel + 1;
            trace.push(conv);
            if !conv.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "convolution output {conv} is odd and cannot be pooled (trace {trace:?})"
                )));
            }
            n = conv / 2;
            trace.push(n);
            out.push(n);
        }
        Ok(out)
    }

    /// Flattened feature count `channels × height × width` after the last block.
    pub fn feature_dim(&self) -> Result<usize> {
        let last = *self.extents()?.last().expect("blocks are non-empty");
        Ok(self.blocks.last().expect("blocks are non-empty") * last * last)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    kernels: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Seeded backbone plus its flattened feature count.
pub fn build_backbone(config: BackboneConfig, seed: u64) -> Result<(Backbone, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = Backbone::new(config, &mut rng)?;
    let f = backbone.config.feature_dim()?;
    Ok((backbone, f))
}

impl Backbone {
    fn new(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.extents()?;
        let mut kernels = Vec::with_capacity(config.blocks.len());
        let mut biases = Vec::with_capacity(config.blocks.len());
        let mut c_in = config.input_channels;
        for &c_out in &config.blocks {
            let fan_in = c_in * config.kernel * config.kernel;
            kernels.push(fan_in_uniform(
                &[c_out, c_in, config.kernel, config.kernel],
                fan_in,
                CONV_INIT_GAIN,
                rng,
            )?);
            biases.push(Tensor::zeros(&[c_out])?);
            c_in = c_out;
        }
        Ok(Backbone {
            config,
            kernels,
            biases,
        })
    }

    pub fn parameter_shapes(config: &BackboneConfig) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(2 * config.blocks.len());
        let mut c_in = config.input_channels;
        for &c_out in &config.blocks {
            shapes.push(vec![c_out, c_in, config.kernel, config.kernel]);
            shapes.push(vec![c_out]);
            c_in = c_out;
        }
        shapes
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Kernel then bias for each block, in block order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.kernels
            .iter()
            .zip(&self.biases)
            .flat_map(|(k, b)| [k, b])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.kernels
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(k, b)| [k, b])
            .collect()
    }

    /// `[n,c,h,w]` images to `[n,F]` features, channel-major per sample.
    pub fn forward_on<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        images: Var,
    ) -> Result<Var> {
        let size = self.config.image_size;
        let batch = match tape.value(images).shape() {
            [n, c, h, w] if *c == self.config.input_channels && *h == size && *w == size => *n,
            s => {
                return Err(Error::Dimension(format!(
                    "model expects [batch, {}, {size}, {size}] images, got {s:?}",
                    self.config.input_channels
                )))
            }
        };
        let mut x = images;
        for block in 0..self.config.blocks.len() {
            if self.config.padding > 0 {
                x = tape.pad2d(x, self.config.padding)?;
            }
            x = tape.conv2d(x, params[2 * block], params[2 * block + 1])?;
            x = tape.relu(x)?;
            x = tape.maxpool2(x)?;
        }
        let features = tape.value(x).numel() / batch;
        tape.reshape(x, &[batch, features])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: SpinalConfig,
}

/// Backbone plus spinal head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    backbone: Backbone,
    head: SpinalHead,
    feature_dim: usize,
}

impl Model {
    /// Builds a model whose head input width is derived from the backbone.
    /// `head.input_dim` is overwritten with the computed feature count.
    pub fn build(backbone: BackboneConfig, mut head: SpinalConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(backbone, &mut rng)?;
        let feature_dim = backbone.config.feature_dim()?;
        head.input_dim = feature_dim;
        let head = SpinalHead::new(head, &mut rng)?;
        Ok(Model {
            backbone,
            head,
            feature_dim,
        })
    }

    /// Reassembles a model from parameters in serialization order.
    pub fn from_parameters(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let feature_dim = config.backbone.feature_dim()?;
        if feature_dim != config.head.input_dim {
            return Err(Error::Config(format!(
                "backbone yields {feature_dim} features but the head expects {}",
                config.head.input_dim
            )));
        }
        let shapes = Backbone::parameter_shapes(&config.backbone);
        if params.len() < shapes.len() {
            return Err(Error::Config(
                "too few parameter tensors for the backbone".into(),
            ));
        }
        let mut params = params;
        let head_params = params.split_off(shapes.len());
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            if p.shape() != &s[..] {
                return Err(Error::Dimension(format!(
                    "backbone parameter {i} must be {s:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut it = params.into_iter();
        while let (Some(k), Some(b)) = (it.next(), it.next()) {
            kernels.push(k);
            biases.push(b);
        }
        Ok(Model {
            backbone: Backbone {
                config: config.backbone,
                kernels,
                biases,
            },
            head: SpinalHead::from_parameters(config.head, head_params)?,
            feature_dim,
        })
    }

    pub fn parameter_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let mut shapes = Backbone::parameter_shapes(&config.backbone);
        shapes.extend(SpinalHead::parameter_shapes(&config.head));
        shapes
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.config.clone(),
            head: *self.head.config(),
        }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &SpinalHead {
        &self.head
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.head.config().classes
    }

    pub fn image_size(&self) -> usize {
        self.backbone.config.image_size
    }

    /// Backbone parameters then head parameters.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = self.backbone.parameters();
        out.extend(self.head.parameters());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.parameters_mut();
        out.extend(self.head.parameters_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Puts every parameter on `tape`; with `trainable` they receive gradients.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| {
                let mut t = p.clone();
                t.set_requires_grad(trainable);
                tape.leaf(t)
            })
            .collect()
    }

    /// Like [`Self::register`] but converting parameters to another element type.
    pub fn register_as<T: Element>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| {
                let mut t = p.cast::<T>();
                t.set_requires_grad(trainable);
                tape.leaf(t)
            })
            .collect()
    }

    /// Moves gradients computed on `tape` into the model's parameters.
    pub fn absorb_gradients(&mut self, tape: &mut Tape, params: &[Var]) -> Result<()> {
        for (p, &v) in self.parameters_mut().into_iter().zip(params) {
            p.set_grad(tape.take_grad(v))?;
        }
        Ok(())
    }

    pub fn forward_on<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        images: Var,
    ) -> Result<Var> {
        let split = 2 * self.backbone.config.blocks.len();
        let features = self.backbone.forward_on(tape, &params[..split], images)?;
        self.head.forward_on(tape, &params[split..], features)
    }

    /// Logits `[batch, C]` for `[batch, 1, h, w]` images, without gradients.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let x = tape.constant(images.clone());
        let logits = self.forward_on(&mut tape, &params, x)?;
        Ok(tape.into_value(logits))
    }

    /// All parameters as little-endian `f32` bytes in serialization order.
    pub fn parameter_blob(&self) -> Vec<u8> {
        self.parameters()
            .iter()
            .flat_map(|p| p.to_le_bytes())
            .collect()
    }
}

/// Alias of [`Model::forward`].
pub fn model_forward(model: &Model, images: &Tensor) -> Result<Tensor> {
    model.forward(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(classes: usize) -> SpinalConfig {
        SpinalConfig {
            input_dim: 0,
            segments: 2,
            layers: 4,
            width: 8,
            classes,
        }
    }

    #[test]
    fn valid_convolution_64_fails_on_odd_extent() {
        let cfg = BackboneConfig {
            padding: 0,
            ..Default::default()
        };
        match cfg.extents() {
            Err(Error::Config(msg)) => assert!(msg.contains("[64, 62, 31, 29]"), "{msg}"),
            other => panic!("expected configuration error, got {other:?}"),
        }
        assert!(build_backbone(cfg, 0).is_err());
    }

    #[test]
    fn padded_default_yields_2048_features() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.extents().unwrap(), vec![32, 16, 8]);
        let (_, f) = build_backbone(cfg, 1).unwrap();
        assert_eq!(f, 2048);
    }

    #[test]
    fn backbone_seeding_is_deterministic() {
        let blob = |seed| {
            let (b, _) = build_backbone(BackboneConfig::default(), seed).unwrap();
            b.parameters()
                .iter()
                .flat_map(|p| p.to_le_bytes())
                .collect::<Vec<u8>>()
        };
        assert_eq!(blob(3), blob(3));
        assert_ne!(blob(3), blob(4));
    }

    #[test]
    fn odd_image_size_is_rejected() {
        assert!(BackboneConfig::with_image_size(63).extents().is_err());
        // 4 → 2 → 1, and a padded 3×3 conv of a single pixel is odd.
        assert!(BackboneConfig::with_image_size(4).extents().is_err());
    }

    #[test]
    fn model_head_width_follows_backbone() {
        let model = Model::build(BackboneConfig::with_image_size(16), head(3), 0).unwrap();
        assert_eq!(model.feature_dim(), 32 * 2 * 2);
        assert_eq!(model.head().config().input_dim, 128);
        let images = Tensor::zeros(&[5, 1, 16, 16]).unwrap();
        assert_eq!(model.forward(&images).unwrap().shape(), &[5, 3]);
    }

    #[test]
    fn wrong_image_extent_is_rejected() {
        let model = Model::build(BackboneConfig::with_image_size(16), head(2), 0).unwrap();
        let images = Tensor::zeros(&[1, 1, 8, 8]).unwrap();
        assert!(matches!(model.forward(&images), Err(Error::Dimension(_))));
    }

    #[test]
    fn from_parameters_round_trips() {
        let model = Model::build(BackboneConfig::with_image_size(16), head(2), 9).unwrap();
        let params = model.parameters().into_iter().cloned().collect();
        let rebuilt = Model::from_parameters(model.config(), params).unwrap();
        assert_eq!(rebuilt, model);
    }
}
