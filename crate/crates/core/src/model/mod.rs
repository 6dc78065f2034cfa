//! The two-block network: Conv(32)+ReLU, MaxPool, Conv(64)+ReLU,
//! Conv(64)+ReLU, MaxPool, Flatten, Dense(500)+ReLU, Dropout, Dense(2),
//! Softmax.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMetadata};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    self, Conv2DParams, ConvCache, DenseCache, DenseParams, DropoutCache, Mode, PoolCache, ReluCache, KERNEL,
};
use crate::tensor::{glorot_uniform_init, Prng, Tensor};

/// Architecture hyper-parameters. Defaults are the reference settings with
/// a 96×96 input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub conv1_filters: usize,
    /// Depth shared by both convolutions of the second block.
    pub conv2_filters: usize,
    pub dense_units: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub l2_lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 96,
            input_width: 96,
            input_channels: 1,
            conv1_filters: 32,
            conv2_filters: 64,
            dense_units: 500,
            num_classes: 2,
            dropout_rate: 0.5,
            l2_lambda: 0.01,
        }
    }
}

/// One entry of the layer stack, with its output shape (excluding batch).
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Conv { name: &'static str, in_channels: usize, filters: usize, output: [usize; 3] },
    MaxPool { output: [usize; 3] },
    Flatten { features: usize },
    Dense { name: &'static str, units: usize, relu: bool },
    Dropout { rate: f64 },
    Softmax { classes: usize },
}

impl ModelConfig {
    /// Walks the layer chain and returns the ten stages, failing with the
    /// name of the first layer whose output would be empty.
    pub fn stages(&self) -> Result<Vec<Stage>> {
        if self.input_channels == 0 || self.conv1_filters == 0 || self.conv2_filters == 0 || self.dense_units == 0 {
            return Err(Error::Config("channel, filter and unit counts must be positive".into()));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!("num_classes must be 2 (MCI vs AD), got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Config(format!("l2_lambda must be >= 0, got {}", self.l2_lambda)));
        }

        let (mut h, mut w) = (self.input_height, self.input_width);
        let conv = |name: &'static str, h: usize, w: usize| -> Result<(usize, usize)> {
            if h < KERNEL || w < KERNEL {
                return Err(Error::Config(format!(
                    "input {}x{} too small: layer {name} receives {h}x{w}, needs at least {KERNEL}x{KERNEL}",
                    self.input_height, self.input_width
                )));
            }
            Ok((h - KERNEL + 1, w - KERNEL + 1))
        };
        let pool = |name: &'static str, h: usize, w: usize| -> Result<(usize, usize)> {
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "input {}x{} too small: layer {name} receives {h}x{w}, needs at least 2x2",
                    self.input_height, self.input_width
                )));
            }
            Ok((h / 2, w / 2))
        };

        let mut stages = Vec::with_capacity(10);
        (h, w) = conv("conv1", h, w)?;
        stages.push(Stage::Conv {
            name: "conv1",
            in_channels: self.input_channels,
            filters: self.conv1_filters,
            output: [self.conv1_filters, h, w],
        });
        (h, w) = pool("pool1", h, w)?;
        stages.push(Stage::MaxPool { output: [self.conv1_filters, h, w] });
        (h, w) = conv("conv2", h, w)?;
        stages.push(Stage::Conv {
            name: "conv2",
            in_channels: self.conv1_filters,
            filters: self.conv2_filters,
            output: [self.conv2_filters, h, w],
        });
        (h, w) = conv("conv3", h, w)?;
        stages.push(Stage::Conv {
            name: "conv3",
            in_channels: self.conv2_filters,
            filters: self.conv2_filters,
            output: [self.conv2_filters, h, w],
        });
        (h, w) = pool("pool2", h, w)?;
        stages.push(Stage::MaxPool { output: [self.conv2_filters, h, w] });
        stages.push(Stage::Flatten { features: self.conv2_filters * h * w });
        stages.push(Stage::Dense { name: "dense1", units: self.dense_units, relu: true });
        stages.push(Stage::Dropout { rate: self.dropout_rate });
        stages.push(Stage::Dense { name: "dense2", units: self.num_classes, relu: false });
        stages.push(Stage::Softmax { classes: self.num_classes });
        Ok(stages)
    }

    pub fn validate(&self) -> Result<()> {
        self.stages().map(|_| ())
    }

    /// Width of the flattened feature vector feeding the first dense layer.
    pub fn flatten_width(&self) -> Result<usize> {
        self.stages()?
            .into_iter()
            .find_map(|s| match s {
                Stage::Flatten { features } => Some(features),
                _ => None,
            })
            .ok_or_else(|| Error::Config("layer chain has no flatten stage".into()))
    }
}

/// Parameter names in checkpoint and gradient order.
pub const PARAM_NAMES: [&str; 10] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "dense1.weight",
    "dense1.bias",
    "dense2.weight",
    "dense2.bias",
];

/// Kernels (weights) sit at even positions of [`PARAM_NAMES`]; only these
/// receive the L2 penalty.
pub fn is_kernel(param_index: usize) -> bool {
    param_index.is_multiple_of(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SNeurodCnn {
    config: ModelConfig,
    pub conv1: Conv2DParams,
    pub conv2: Conv2DParams,
    pub conv3: Conv2DParams,
    pub dense1: DenseParams,
    pub dense2: DenseParams,
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    conv1: ConvCache,
    relu1: ReluCache,
    pool1: PoolCache,
    conv2: ConvCache,
    relu2: ReluCache,
    conv3: ConvCache,
    relu3: ReluCache,
    /// Post-ReLU output of the last convolution, before pooling.
    last_conv: Tensor,
    pool2: PoolCache,
    pooled_shape: Vec<usize>,
    dense1: DenseCache,
    relu4: ReluCache,
    dropout: DropoutCache,
    dense2: DenseCache,
    logits: Tensor,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn last_conv_activation(&self) -> &Tensor {
        &self.last_conv
    }
}

/// Parameter gradients in [`PARAM_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl SNeurodCnn {
    /// Glorot-uniform kernels, zero biases.
    pub fn build(config: ModelConfig, rng: &mut Prng) -> Result<Self> {
        let flat = config.flatten_width()?;
        let k2 = KERNEL * KERNEL;
        let conv = |rng: &mut Prng, cin: usize, cout: usize| -> Result<Conv2DParams> {
            let w = glorot_uniform_init(rng, cin * k2, cout * k2, &[cout, cin, KERNEL, KERNEL])?;
            Conv2DParams::new(w, Tensor::zeros(&[cout]))
        };
        let dense = |rng: &mut Prng, fin: usize, fout: usize| -> Result<DenseParams> {
            let w = glorot_uniform_init(rng, fin, fout, &[fin, fout])?;
            DenseParams::new(w, Tensor::zeros(&[fout]))
        };
        let conv1 = conv(rng, config.input_channels, config.conv1_filters)?;
        let conv2 = conv(rng, config.conv1_filters, config.conv2_filters)?;
        let conv3 = conv(rng, config.conv2_filters, config.conv2_filters)?;
        let dense1 = dense(rng, flat, config.dense_units)?;
        let dense2 = dense(rng, config.dense_units, config.num_classes)?;
        Ok(Self { config, conv1, conv2, conv3, dense1, dense2 })
    }

    /// Assembles a model from tensors in [`PARAM_NAMES`] order, checking
    /// every shape against the configuration.
    pub fn from_parameters(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = Self::parameter_shapes(&config)?;
        if tensors.len() != expected.len() {
            return Err(Error::Shape(format!("expected {} parameter tensors, got {}", expected.len(), tensors.len())));
        }
        for ((t, shape), name) in tensors.iter().zip(&expected).zip(PARAM_NAMES) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let conv1 = Conv2DParams::new(next(), next())?;
        let conv2 = Conv2DParams::new(next(), next())?;
        let conv3 = Conv2DParams::new(next(), next())?;
        let dense1 = DenseParams::new(next(), next())?;
        let dense2 = DenseParams::new(next(), next())?;
        Ok(Self { config, conv1, conv2, conv3, dense1, dense2 })
    }

    pub fn parameter_shapes(config: &ModelConfig) -> Result<Vec<Vec<usize>>> {
        let flat = config.flatten_width()?;
        let (c0, c1, c2) = (config.input_channels, config.conv1_filters, config.conv2_filters);
        let (d, k) = (config.dense_units, config.num_classes);
        Ok(vec![
            vec![c1, c0, KERNEL, KERNEL],
            vec![c1],
            vec![c2, c1, KERNEL, KERNEL],
            vec![c2],
            vec![c2, c2, KERNEL, KERNEL],
            vec![c2],
            vec![flat, d],
            vec![d],
            vec![d, k],
            vec![k],
        ])
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> [&Tensor; 10] {
        [
            &self.conv1.weights,
            &self.conv1.bias,
            &self.conv2.weights,
            &self.conv2.bias,
            &self.conv3.weights,
            &self.conv3.bias,
            &self.dense1.weights,
            &self.dense1.bias,
            &self.dense2.weights,
            &self.dense2.bias,
        ]
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.conv1.weights,
            &mut self.conv1.bias,
            &mut self.conv2.weights,
            &mut self.conv2.bias,
            &mut self.conv3.weights,
            &mut self.conv3.bias,
            &mut self.dense1.weights,
            &mut self.dense1.bias,
            &mut self.dense2.weights,
            &mut self.dense2.bias,
        ]
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Sum of squared kernel entries (biases excluded).
    pub fn kernel_sum_of_squares(&self) -> f64 {
        self.parameters().iter().enumerate().filter(|(i, _)| is_kernel(*i)).map(|(_, t)| t.sum_of_squares()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let cfg = &self.config;
        if (c, h, w) != (cfg.input_channels, cfg.input_height, cfg.input_width) {
            return Err(Error::Shape(format!(
                "input {:?} does not match model input [B, {}, {}, {}]",
                x.shape(),
                cfg.input_channels,
                cfg.input_height,
                cfg.input_width
            )));
        }
        Ok(())
    }

    /// Full forward pass returning class probabilities `[B, 2]`. The
    /// generator is only consumed by dropout in [`Mode::Train`].
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Prng) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let (a, conv1) = layers::conv2d_forward(x, &self.conv1)?;
        let (a, relu1) = layers::relu(&a);
        let (a, pool1) = layers::maxpool2_forward(&a)?;
        let (a, conv2) = layers::conv2d_forward(&a, &self.conv2)?;
        let (a, relu2) = layers::relu(&a);
        let (a, conv3) = layers::conv2d_forward(&a, &self.conv3)?;
        let (last_conv, relu3) = layers::relu(&a);
        let (pooled, pool2) = layers::maxpool2_forward(&last_conv)?;
        let pooled_shape = pooled.shape().to_vec();
        let batch = pooled_shape[0];
        let flat = pooled.into_shape(&[batch, pooled_shape[1..].iter().product()])?;
        let (a, dense1) = layers::dense_forward(&flat, &self.dense1)?;
        let (a, relu4) = layers::relu(&a);
        let (a, dropout) = layers::dropout_forward(&a, self.config.dropout_rate, mode, rng)?;
        let (logits, dense2) = layers::dense_forward(&a, &self.dense2)?;
        let probs = layers::softmax(&logits)?;
        let cache = ForwardCache {
            conv1,
            relu1,
            pool1,
            conv2,
            relu2,
            conv3,
            relu3,
            last_conv,
            pool2,
            pooled_shape,
            dense1,
            relu4,
            dropout,
            dense2,
            logits,
        };
        Ok((probs, cache))
    }

    /// Eval-mode probabilities; a pure function of parameters and input.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut unused = Prng::new(0);
        Ok(self.forward(x, Mode::Eval, &mut unused)?.0)
    }

    /// Back-propagates `d_logits` from the classifier down to the post-ReLU
    /// output of the last convolution. Returns that gradient together with
    /// the dense-layer gradients (dense1.w, dense1.b, dense2.w, dense2.b).
    pub fn backward_to_last_conv(&self, cache: &ForwardCache, d_logits: &Tensor) -> Result<(Tensor, [Tensor; 4])> {
        if d_logits.shape() != cache.logits.shape() {
            return Err(Error::Shape(format!(
                "logit gradient {:?} does not match forward logits {:?}",
                d_logits.shape(),
                cache.logits.shape()
            )));
        }
        let g2 = layers::dense_backward(d_logits, &cache.dense2, &self.dense2)?;
        let d = layers::dropout_backward(&g2.dx, &cache.dropout)?;
        let d = layers::relu_backward(&d, &cache.relu4)?;
        let g1 = layers::dense_backward(&d, &cache.dense1, &self.dense1)?;
        let d = g1.dx.into_shape(&cache.pooled_shape)?;
        let d_last = layers::maxpool2_backward(&d, &cache.pool2)?;
        Ok((d_last, [g1.dw, g1.db, g2.dw, g2.db]))
    }

    /// Chain-rule composition of every layer's backward pass. Returns the
    /// gradient of whatever scalar produced `d_logits`; regularisation is
    /// added by the training module.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Tensor) -> Result<Gradients> {
        let (d_last, [d1w, d1b, d2w, d2b]) = self.backward_to_last_conv(cache, d_logits)?;
        let d = layers::relu_backward(&d_last, &cache.relu3)?;
        let g3 = layers::conv2d_backward(&d, &cache.conv3, &self.conv3)?;
        let d = layers::relu_backward(&g3.dx, &cache.relu2)?;
        let g2 = layers::conv2d_backward(&d, &cache.conv2, &self.conv2)?;
        let d = layers::maxpool2_backward(&g2.dx, &cache.pool1)?;
        let d = layers::relu_backward(&d, &cache.relu1)?;
        let g1 = layers::conv2d_backward(&d, &cache.conv1, &self.conv1)?;
        Ok(Gradients { tensors: vec![g1.dw, g1.db, g2.dw, g2.db, g3.dw, g3.db, d1w, d1b, d2w, d2b] })
    }
}
