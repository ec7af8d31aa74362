//! The U-Net-style convolutional masked autoencoder and the classifiers
//! derived from its encoder.
//!
//! Tensors are laid out `N x C x D x H x W` with `D = z`, `H = y`, `W = x`,
//! so a volume of dims `(x, y, z)` maps to spatial shape `(z, y, x)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::neuralops::{kaiming_uniform, BatchNormMode, BatchNormStats, Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input volume dims `(x, y, z)`.
    pub input_dims: [usize; 3],
    pub base_channels: usize,
    pub stages: usize,
    /// Convolutions per encoder stage; the decoder mirrors the counts.
    pub convs_per_stage: Vec<usize>,
    pub skip_connections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: [32, 32, 16],
            base_channels: 8,
            stages: 3,
            convs_per_stage: vec![2, 2, 3],
            skip_connections: true,
        }
    }
}

impl ModelConfig {
    /// Full VGG16 stage pattern.
    pub fn vgg16(input_dims: [usize; 3], base_channels: usize) -> Self {
        Self {
            input_dims,
            base_channels,
            stages: 5,
            convs_per_stage: vec![2, 2, 3, 3, 3],
            skip_connections: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.stages) {
            return Err(invalid!("stages must lie in [2, 5], got {}", self.stages));
        }
        if self.base_channels == 0 {
            return Err(invalid!("base_channels must be positive"));
        }
        if self.convs_per_stage.len() != self.stages || self.convs_per_stage.contains(&0) {
            return Err(invalid!(
                "convs_per_stage needs {} positive entries, got {:?}",
                self.stages,
                self.convs_per_stage
            ));
        }
        let div = 1usize << self.stages;
        for (a, &d) in self.input_dims.iter().enumerate() {
            if d == 0 || d % div != 0 {
                return Err(invalid!(
                    "input dim {d} on axis {a} is not divisible by 2^{} = {div}",
                    self.stages
                ));
            }
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Spatial dims `(x, y, z)` of the encoder output.
    pub fn latent_dims(&self) -> [usize; 3] {
        self.input_dims.map(|d| d >> self.stages)
    }

    pub fn latent_channels(&self) -> usize {
        self.channels(self.stages - 1)
    }

    /// Tensor shape of an `n`-sample input batch.
    pub fn input_shape(&self, n: usize) -> [usize; 5] {
        let [x, y, z] = self.input_dims;
        [n, 1, z, y, x]
    }

    fn encoder_blocks(&self) -> Vec<Vec<(usize, usize)>> {
        (0..self.stages)
            .map(|s| {
                let c = self.channels(s);
                let c_in = if s == 0 { 1 } else { self.channels(s - 1) };
                (0..self.convs_per_stage[s]).map(|i| (if i == 0 { c_in } else { c }, c)).collect()
            })
            .collect()
    }

    /// Decoder blocks, deepest stage first.
    fn decoder_blocks(&self) -> Vec<Vec<(usize, usize)>> {
        (0..self.stages)
            .rev()
            .map(|s| {
                let c = self.channels(s);
                let from_below = if s + 1 == self.stages { self.latent_channels() } else { self.channels(s + 1) };
                let c_in = from_below + if self.skip_connections { c } else { 0 };
                (0..self.convs_per_stage[s]).map(|i| (if i == 0 { c_in } else { c }, c)).collect()
            })
            .collect()
    }

    fn block_params(c_in: usize, c_out: usize) -> usize {
        c_out * c_in * 27 + 3 * c_out
    }

    /// Learnable scalars in the encoder.
    pub fn encoder_param_count(&self) -> usize {
        self.encoder_blocks().iter().flatten().map(|&(i, o)| Self::block_params(i, o)).sum()
    }

    /// Learnable scalars in the full autoencoder.
    pub fn mae_param_count(&self) -> usize {
        let decoder: usize = self.decoder_blocks().iter().flatten().map(|&(i, o)| Self::block_params(i, o)).sum();
        self.encoder_param_count() + decoder + self.channels(0) + 1
    }

    pub fn classifier_param_count(&self) -> usize {
        self.encoder_param_count() + self.latent_channels() + 1
    }
}

/// 3x3x3 convolution, batch norm, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: BatchNormStats<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            weight: kaiming_uniform(&[c_out, c_in, 3, 3, 3], c_in * 27, rng),
            bias: Tensor::zeros([c_out]),
            gamma: Tensor::full([c_out], T::one()),
            beta: Tensor::zeros([c_out]),
            stats: BatchNormStats::new(c_out),
        }
    }

    fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: BatchNormMode, trainable: bool, vars: &mut Vec<Var>) -> Result<Var> {
        let w = g.leaf(self.weight.clone(), trainable);
        let b = g.leaf(self.bias.clone(), trainable);
        let gm = g.leaf(self.gamma.clone(), trainable);
        let bt = g.leaf(self.beta.clone(), trainable);
        vars.extend([w, b, gm, bt]);
        let y = g.conv3d(x, w, b, [1, 1, 1])?;
        let y = g.batchnorm3d(y, gm, bt, &mut self.stats, mode)?;
        Ok(g.relu(y))
    }

    fn params(&self) -> [&Tensor<T>; 4] {
        [&self.weight, &self.bias, &self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.weight, &mut self.bias, &mut self.gamma, &mut self.beta]
    }

    fn cast<U: Scalar>(&self) -> ConvBlock<U> {
        ConvBlock {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            stats: BatchNormStats {
                mean: self.stats.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                var: self.stats.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                momentum: self.stats.momentum,
                eps: self.stats.eps,
            },
        }
    }
}

/// Staged conv blocks with 2x max pooling after every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub stages: Vec<Vec<ConvBlock<T>>>,
}

/// Output of an encoder pass.
pub struct EncoderPass {
    pub latent: Var,
    /// Pre-pooling feature map of each stage.
    pub skips: Vec<Var>,
    /// Parameter leaves in [`Encoder::params`] order.
    pub params: Vec<Var>,
}

impl<T: Scalar> Encoder<T> {
    fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        Self {
            stages: config
                .encoder_blocks()
                .into_iter()
                .map(|stage| stage.into_iter().map(|(i, o)| ConvBlock::new(i, o, rng)).collect())
                .collect(),
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: BatchNormMode, trainable: bool) -> Result<EncoderPass> {
        let mut params = Vec::new();
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for stage in &mut self.stages {
            for block in stage {
                h = block.forward(g, h, mode, trainable, &mut params)?;
            }
            skips.push(h);
            h = g.maxpool3d(h, [2, 2, 2])?;
        }
        Ok(EncoderPass {
            latent: h,
            skips,
            params,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ConvBlock<T>> {
        self.stages.iter().flatten()
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock<T>> {
        self.stages.iter_mut().flatten()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.blocks().flat_map(ConvBlock::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks_mut().flat_map(ConvBlock::params_mut).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            stages: self.stages.iter().map(|s| s.iter().map(ConvBlock::cast).collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedAutoencoder<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    /// Decoder stages, deepest first.
    pub decoder: Vec<Vec<ConvBlock<T>>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

/// Output of an autoencoder pass.
pub struct ReconstructionPass {
    pub output: Var,
    /// Parameter leaves in [`MaskedAutoencoder::params`] order.
    pub params: Vec<Var>,
}

pub fn build_mae<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<MaskedAutoencoder<T>> {
    config.validate()?;
    let encoder = Encoder::new(config, rng);
    let decoder = config
        .decoder_blocks()
        .into_iter()
        .map(|stage| stage.into_iter().map(|(i, o)| ConvBlock::new(i, o, rng)).collect())
        .collect();
    let c0 = config.channels(0);
    Ok(MaskedAutoencoder {
        config: config.clone(),
        encoder,
        decoder,
        head_weight: kaiming_uniform(&[1, c0, 1, 1, 1], c0, rng),
        head_bias: Tensor::zeros([1]),
    })
}

impl<T: Scalar> MaskedAutoencoder<T> {
    /// Records a full encode-decode pass. Output shape equals input shape and
    /// values lie in (0, 1).
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: BatchNormMode) -> Result<ReconstructionPass> {
        let expected = self.config.input_shape(g.value(x).shape()[0]);
        if g.value(x).shape() != expected {
            return Err(shape_err!("input {:?} does not match model input {expected:?}", g.value(x).shape()));
        }
        let enc = self.encoder.forward(g, x, mode, true)?;
        let mut params = enc.params;
        let mut h = enc.latent;
        let skip_connections = self.config.skip_connections;
        for (stage, skip) in self.decoder.iter_mut().zip(enc.skips.iter().rev()) {
            h = g.upsample_nearest3d(h, [2, 2, 2])?;
            if skip_connections {
                h = g.concat_channels(h, *skip)?;
            }
            for block in stage {
                h = block.forward(g, h, mode, true, &mut params)?;
            }
        }
        let w = g.param(self.head_weight.clone());
        let b = g.param(self.head_bias.clone());
        params.extend([w, b]);
        let y = g.conv3d(h, w, b, [0, 0, 0])?;
        Ok(ReconstructionPass {
            output: g.sigmoid(y),
            params,
        })
    }

    /// Reconstructs a batch of corrupted volumes outside of any training loop.
    pub fn reconstruct(&mut self, corrupted: &Tensor<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(corrupted.clone());
        let pass = self.forward(&mut g, x, mode)?;
        Ok(g.value(pass.output).clone())
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.iter().flatten().flat_map(ConvBlock::params));
        out.extend([&self.head_weight, &self.head_bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.iter_mut().flatten().flat_map(ConvBlock::params_mut));
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ConvBlock<T>> {
        self.encoder.blocks().chain(self.decoder.iter().flatten())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock<T>> {
        self.encoder.blocks_mut().chain(self.decoder.iter_mut().flatten())
    }

    pub fn cast<U: Scalar>(&self) -> MaskedAutoencoder<U> {
        MaskedAutoencoder {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            decoder: self.decoder.iter().map(|s| s.iter().map(ConvBlock::cast).collect()).collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// Pretrained encoder, frozen; only the head trains.
    LinearProbe,
    /// Pretrained encoder, trained together with the head.
    FineTune,
    /// Freshly initialised encoder.
    RandomInit,
    /// Encoder loaded from an external checkpoint.
    ExternalWeights,
}

impl ClassifierMode {
    /// Default trainability of the encoder under this mode. Random and
    /// external encoders default to frozen (probing); see
    /// [`Classifier::set_encoder_trainable`].
    pub fn encoder_trainable(self) -> bool {
        matches!(self, ClassifierMode::FineTune)
    }
}

/// Where a classifier takes its encoder from.
pub enum EncoderSource<'a, T> {
    Pretrained(&'a MaskedAutoencoder<T>),
    Fresh(&'a ModelConfig),
    External(&'a std::path::Path),
}

/// Encoder, global average pooling, one linear unit, sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub config: ModelConfig,
    pub mode: ClassifierMode,
    pub encoder: Encoder<T>,
    pub encoder_trainable: bool,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

/// Output of a classifier pass.
pub struct ClassifierPass {
    pub probabilities: Var,
    /// Leaves of the trainable parameters, in [`Classifier::trainable_params_mut`] order.
    pub trainable: Vec<Var>,
}

pub fn build_classifier<T: Scalar, R: Rng + ?Sized>(
    source: EncoderSource<'_, T>,
    mode: ClassifierMode,
    rng: &mut R,
) -> Result<Classifier<T>> {
    let (config, encoder) = match (source, mode) {
        (EncoderSource::Pretrained(mae), ClassifierMode::LinearProbe | ClassifierMode::FineTune) => {
            (mae.config.clone(), mae.encoder.clone())
        }
        (EncoderSource::Fresh(config), ClassifierMode::RandomInit) => {
            config.validate()?;
            (config.clone(), Encoder::new(config, rng))
        }
        (EncoderSource::External(path), ClassifierMode::ExternalWeights) => {
            let (config, encoder) = crate::trainer::checkpoint::load_encoder::<T>(path)?;
            (config, encoder)
        }
        (_, mode) => return Err(invalid!("encoder source does not fit classifier mode {mode:?}")),
    };
    let c = config.latent_channels();
    // zero head: the first updates, not the draw, set the decision direction
    Ok(Classifier {
        config,
        mode,
        encoder,
        encoder_trainable: mode.encoder_trainable(),
        head_weight: Tensor::zeros([1, c]),
        head_bias: Tensor::zeros([1]),
    })
}

impl<T: Scalar> Classifier<T> {
    /// Unfreezes (or freezes) a random or external encoder. The pretrained
    /// modes keep the trainability their protocol prescribes.
    pub fn set_encoder_trainable(&mut self, trainable: bool) -> Result<()> {
        match self.mode {
            ClassifierMode::RandomInit | ClassifierMode::ExternalWeights => {
                self.encoder_trainable = trainable;
                Ok(())
            }
            mode => Err(invalid!("encoder trainability is fixed under {mode:?}")),
        }
    }

    /// Records a forward pass. Encoder batch norm always runs on its running
    /// statistics; the encoder only receives gradients when trainable.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var) -> Result<ClassifierPass> {
        let expected = self.config.input_shape(g.value(x).shape()[0]);
        if g.value(x).shape() != expected {
            return Err(shape_err!("input {:?} does not match model input {expected:?}", g.value(x).shape()));
        }
        let enc = self.encoder.forward(g, x, BatchNormMode::Eval, self.encoder_trainable)?;
        let pooled = g.global_avg_pool(enc.latent)?;
        let w = g.param(self.head_weight.clone());
        let b = g.param(self.head_bias.clone());
        let logit = g.linear(pooled, w, b)?;
        let probabilities = g.sigmoid(logit);
        let mut trainable = if self.encoder_trainable { enc.params } else { Vec::new() };
        trainable.extend([w, b]);
        Ok(ClassifierPass {
            probabilities,
            trainable,
        })
    }

    /// One probability per case of an `N x 1 x D x H x W` batch.
    pub fn predict(&mut self, batch: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let pass = self.forward(&mut g, x)?;
        Ok(g.value(pass.probabilities).data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = if self.encoder_trainable { self.encoder.params_mut() } else { Vec::new() };
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = self.encoder.params();
        out.extend([&self.head_weight, &self.head_bias]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            config: self.config.clone(),
            mode: self.mode,
            encoder: self.encoder.cast(),
            encoder_trainable: self.encoder_trainable,
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        }
    }
}
