//! Baseline architectures trained under the same losses as the cascade.
//!
//! * [`FullResModel`]: every layer at full input resolution, receptive field
//!   grown by dilation that starts large and halves layer to layer.
//! * [`EncoderDecoderModel`]: a u-net style contracting/expanding network
//!   with skip connections; expansion uses bilinear upsampling.
//!
//! Both consume the same layouts and emit the same `k` RGB images as the
//! cascade, and both use layer normalization + leaky ReLU after every 3x3
//! convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, DEFAULT_LRELU_SLOPE};
use crate::error::{CrnError, Result};
use crate::layout::SemanticLayout;
use crate::model::{split_images, stack_images, SynthesisModel};
use crate::nn::{
    avg_pool2, avg_pool2_backward, bilinear_upsample, bilinear_upsample_backward, leaky_relu,
    leaky_relu_backward, Conv2d, LayerNorm, LayerNormCache,
};
use crate::params::{GradStore, ParamStore};
use crate::tensor::{FeatureTensor, Shape};

/// Conv 3x3, layer norm, leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
struct ConvBlock {
    conv: Conv2d,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct ConvBlockCache {
    input: FeatureTensor,
    norm: LayerNormCache,
    normed: FeatureTensor,
}

impl ConvBlock {
    fn new(params: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(params, &format!("{name}.conv"), in_ch, out_ch, 3, dilation, rng),
            norm: LayerNorm::new(params, &format!("{name}.norm"), out_ch),
        }
    }

    fn param_count(in_ch: usize, out_ch: usize) -> usize {
        Conv2d::param_count(in_ch, out_ch, 3) + LayerNorm::param_count(out_ch)
    }

    fn forward(&self, params: &ParamStore, input: FeatureTensor, slope: f64) -> Result<(FeatureTensor, ConvBlockCache)> {
        let z = self.conv.forward(params, &input)?;
        let (normed, norm) = self.norm.forward(params, &z)?;
        let out = leaky_relu(&normed, slope);
        Ok((out, ConvBlockCache { input, norm, normed }))
    }

    fn backward(
        &self,
        params: &ParamStore,
        cache: &ConvBlockCache,
        grad: &FeatureTensor,
        slope: f64,
        grads: &mut GradStore,
    ) -> Result<FeatureTensor> {
        let g = leaky_relu_backward(&cache.normed, grad, slope);
        let g = self.norm.backward(params, &cache.norm, &g, grads)?;
        self.conv.backward(params, &cache.input, &g, grads)
    }

    /// Sets a dilation used by the next forward/backward pass.
    fn with_dilation(&self, dilation: usize) -> ConvBlock {
        let mut b = self.clone();
        b.conv.dilation = dilation;
        b
    }
}

fn check_classes(layout: &SemanticLayout, expected: usize) -> Result<()> {
    if layout.num_classes() != expected {
        return Err(CrnError::Dimension(format!(
            "layout has {} classes, model expects {expected}",
            layout.num_classes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullResConfig {
    #[serde(default = "default_layer_count")]
    pub layer_count: usize,
    #[serde(default = "default_feature_maps")]
    pub feature_maps: usize,
    #[serde(default = "default_max_h")]
    pub max_h: usize,
    #[serde(default = "default_max_w")]
    pub max_w: usize,
    pub num_classes: usize,
    pub output_multiplicity: usize,
    #[serde(default = "default_slope")]
    pub lrelu_slope: f64,
}

fn default_layer_count() -> usize {
    10
}
fn default_feature_maps() -> usize {
    256
}
fn default_max_h() -> usize {
    256
}
fn default_max_w() -> usize {
    512
}
fn default_slope() -> f64 {
    DEFAULT_LRELU_SLOPE
}

impl FullResConfig {
    pub fn new(num_classes: usize, output_multiplicity: usize) -> Self {
        FullResConfig {
            layer_count: default_layer_count(),
            feature_maps: default_feature_maps(),
            max_h: default_max_h(),
            max_w: default_max_w(),
            num_classes,
            output_multiplicity,
            lrelu_slope: DEFAULT_LRELU_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.feature_maps == 0 || self.num_classes == 0 || self.output_multiplicity == 0 {
            return Err(CrnError::Argument(
                "layer_count, feature_maps, num_classes and output_multiplicity must be positive".into(),
            ));
        }
        if self.layer_count > 31 {
            return Err(CrnError::Argument("layer_count must be at most 31".into()));
        }
        Ok(())
    }

    /// Dilation of every layer before capping: `2^(L-1), ..., 2, 1`.
    pub fn base_dilations(&self) -> Vec<usize> {
        (0..self.layer_count).map(|i| 1usize << (self.layer_count - 1 - i)).collect()
    }

    /// Dilations for an `height x width` input: the first is `2^(L-1)` capped
    /// at half the smaller side (rounded down to a power of two), then each
    /// layer halves it, bottoming out at 1.
    pub fn dilations(&self, height: usize, width: usize) -> Vec<usize> {
        let half = (height.min(width) / 2).max(1);
        let cap = 1usize << (usize::BITS - 1 - half.leading_zeros());
        let start = (1usize << (self.layer_count - 1)).min(cap);
        (0..self.layer_count).map(|i| (start >> i).max(1)).collect()
    }

    pub fn param_count(&self) -> usize {
        let fm = self.feature_maps;
        ConvBlock::param_count(self.num_classes, fm)
            + (self.layer_count - 1) * ConvBlock::param_count(fm, fm)
            + Conv2d::param_count(fm, 3 * self.output_multiplicity, 1)
    }

    /// Elements of all intermediate feature layers for one sample, i.e. what
    /// a training step keeps alive for backpropagation.
    pub fn activation_elements(&self, height: usize, width: usize) -> usize {
        self.layer_count * self.feature_maps * height * width
    }
}

impl CascadeConfig {
    /// Elements of all intermediate feature layers (two per module) for one sample.
    pub fn activation_elements(&self) -> usize {
        (0..self.module_count)
            .map(|i| {
                let (h, w) = self.module_resolution(i);
                2 * self.channels[i] * h * w
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullResModel {
    config: FullResConfig,
    params: ParamStore,
    blocks: Vec<ConvBlock>,
    projection: Conv2d,
}

#[derive(Debug, Clone)]
pub struct FullResCache {
    blocks: Vec<ConvBlockCache>,
    dilations: Vec<usize>,
    features: FeatureTensor,
}

impl FullResModel {
    pub fn new(config: FullResConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let blocks = (0..config.layer_count)
            .map(|i| {
                let in_ch = if i == 0 { config.num_classes } else { config.feature_maps };
                ConvBlock::new(&mut params, &format!("layer{i}"), in_ch, config.feature_maps, 1, &mut rng)
            })
            .collect();
        let projection = Conv2d::new(
            &mut params,
            "projection",
            config.feature_maps,
            3 * config.output_multiplicity,
            1,
            1,
            &mut rng,
        );
        Ok(FullResModel {
            config,
            params,
            blocks,
            projection,
        })
    }

    pub fn config(&self) -> &FullResConfig {
        &self.config
    }

    /// Forward pass that also returns every intermediate feature layer.
    pub fn forward_with_features(&self, layout: &SemanticLayout) -> Result<(Vec<FeatureTensor>, Vec<FeatureTensor>)> {
        let (images, cache) = self.forward_train(layout)?;
        let mut features: Vec<FeatureTensor> = cache.blocks.iter().skip(1).map(|b| b.input.clone()).collect();
        features.push(cache.features);
        Ok((images, features))
    }
}

impl SynthesisModel for FullResModel {
    type Cache = FullResCache;

    fn kind(&self) -> &'static str {
        "fullres"
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn output_multiplicity(&self) -> usize {
        self.config.output_multiplicity
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_layout(&self, layout: &SemanticLayout) -> Result<()> {
        check_classes(layout, self.config.num_classes)?;
        if layout.height() > self.config.max_h || layout.width() > self.config.max_w {
            return Err(CrnError::Capacity(format!(
                "{}x{} exceeds the full-resolution maximum {}x{}",
                layout.height(),
                layout.width(),
                self.config.max_h,
                self.config.max_w
            )));
        }
        Ok(())
    }

    fn forward_train(&self, layout: &SemanticLayout) -> Result<(Vec<FeatureTensor>, FullResCache)> {
        self.check_layout(layout)?;
        let dilations = self.config.dilations(layout.height(), layout.width());
        let mut x = layout.tensor().clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (block, &d) in self.blocks.iter().zip(&dilations) {
            let (y, cache) = block.with_dilation(d).forward(&self.params, x, self.config.lrelu_slope)?;
            caches.push(cache);
            x = y;
        }
        let projected = self.projection.forward(&self.params, &x)?;
        Ok((
            split_images(&projected, self.config.output_multiplicity)?,
            FullResCache {
                blocks: caches,
                dilations,
                features: x,
            },
        ))
    }

    fn backward(&self, cache: &FullResCache, grad_images: &[FeatureTensor]) -> Result<GradStore> {
        let mut grads = GradStore::zeros_like(&self.params);
        let g = stack_images(grad_images, self.config.output_multiplicity)?;
        let mut g = self.projection.backward(&self.params, &cache.features, &g, &mut grads)?;
        for i in (0..self.blocks.len()).rev() {
            let block = self.blocks[i].with_dilation(cache.dilations[i]);
            g = block.backward(&self.params, &cache.blocks[i], &g, self.config.lrelu_slope, &mut grads)?;
        }
        Ok(grads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDecoderConfig {
    /// Number of 2x downsamplings between input and bottleneck.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    pub num_classes: usize,
    pub output_multiplicity: usize,
    #[serde(default = "default_slope")]
    pub lrelu_slope: f64,
}

fn default_depth() -> usize {
    5
}
fn default_base_channels() -> usize {
    64
}

impl EncoderDecoderConfig {
    pub fn new(num_classes: usize, output_multiplicity: usize) -> Self {
        EncoderDecoderConfig {
            depth: default_depth(),
            base_channels: default_base_channels(),
            num_classes,
            output_multiplicity,
            lrelu_slope: DEFAULT_LRELU_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_classes == 0 || self.output_multiplicity == 0 {
            return Err(CrnError::Argument(
                "base_channels, num_classes and output_multiplicity must be positive".into(),
            ));
        }
        if self.depth > 16 {
            return Err(CrnError::Argument("depth must be at most 16".into()));
        }
        Ok(())
    }

    /// Channels at encoder level `l`; doubling per level, capped at 8x base.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level.min(3)
    }

    pub fn bottleneck_resolution(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = 1usize << self.depth;
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(CrnError::Dimension(format!(
                "{height}x{width} is not divisible by 2^{} = {f}",
                self.depth
            )));
        }
        Ok((height / f, width / f))
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        for l in 0..=self.depth {
            let in_ch = if l == 0 { self.num_classes } else { self.level_channels(l - 1) };
            let ch = self.level_channels(l);
            total += ConvBlock::param_count(in_ch, ch) + ConvBlock::param_count(ch, ch);
        }
        for l in 0..self.depth {
            let ch = self.level_channels(l);
            total += ConvBlock::param_count(self.level_channels(l + 1) + ch, ch) + ConvBlock::param_count(ch, ch);
        }
        total + Conv2d::param_count(self.level_channels(0), 3 * self.output_multiplicity, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoderModel {
    config: EncoderDecoderConfig,
    params: ParamStore,
    /// Two blocks per level, `0..=depth` (the last is the bottleneck).
    encoder: Vec<[ConvBlock; 2]>,
    /// Two blocks per level, `0..depth`.
    decoder: Vec<[ConvBlock; 2]>,
    projection: Conv2d,
}

#[derive(Debug, Clone)]
pub struct EncoderDecoderCache {
    encoder: Vec<[ConvBlockCache; 2]>,
    /// Decoder caches indexed by level.
    decoder: Vec<[ConvBlockCache; 2]>,
    /// Shapes of the encoder outputs per level.
    skip_shapes: Vec<Shape>,
    features: FeatureTensor,
    bottleneck: Shape,
}

impl EncoderDecoderModel {
    pub fn new(config: EncoderDecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut encoder = Vec::with_capacity(config.depth + 1);
        for l in 0..=config.depth {
            let in_ch = if l == 0 { config.num_classes } else { config.level_channels(l - 1) };
            let ch = config.level_channels(l);
            encoder.push([
                ConvBlock::new(&mut params, &format!("enc{l}.a"), in_ch, ch, 1, &mut rng),
                ConvBlock::new(&mut params, &format!("enc{l}.b"), ch, ch, 1, &mut rng),
            ]);
        }
        let mut decoder = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let ch = config.level_channels(l);
            let in_ch = config.level_channels(l + 1) + ch;
            decoder.push([
                ConvBlock::new(&mut params, &format!("dec{l}.a"), in_ch, ch, 1, &mut rng),
                ConvBlock::new(&mut params, &format!("dec{l}.b"), ch, ch, 1, &mut rng),
            ]);
        }
        let projection = Conv2d::new(
            &mut params,
            "projection",
            config.level_channels(0),
            3 * config.output_multiplicity,
            1,
            1,
            &mut rng,
        );
        Ok(EncoderDecoderModel {
            config,
            params,
            encoder,
            decoder,
            projection,
        })
    }

    pub fn config(&self) -> &EncoderDecoderConfig {
        &self.config
    }

    /// Shape of the bottleneck features for a layout.
    pub fn bottleneck_shape(&self, layout: &SemanticLayout) -> Result<Shape> {
        let (h, w) = self.config.bottleneck_resolution(layout.height(), layout.width())?;
        Ok(Shape::new(self.config.level_channels(self.config.depth), h, w))
    }
}

impl SynthesisModel for EncoderDecoderModel {
    type Cache = EncoderDecoderCache;

    fn kind(&self) -> &'static str {
        "encoder_decoder"
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn output_multiplicity(&self) -> usize {
        self.config.output_multiplicity
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_layout(&self, layout: &SemanticLayout) -> Result<()> {
        check_classes(layout, self.config.num_classes)?;
        self.config.bottleneck_resolution(layout.height(), layout.width())?;
        Ok(())
    }

    fn forward_train(&self, layout: &SemanticLayout) -> Result<(Vec<FeatureTensor>, EncoderDecoderCache)> {
        self.check_layout(layout)?;
        let slope = self.config.lrelu_slope;
        let depth = self.config.depth;
        let mut x = layout.tensor().clone();
        let mut skips = Vec::with_capacity(depth);
        let mut enc_caches = Vec::with_capacity(depth + 1);
        for (l, [a, b]) in self.encoder.iter().enumerate() {
            if l > 0 {
                x = avg_pool2(&x)?;
            }
            let (y, ca) = a.forward(&self.params, x, slope)?;
            let (y, cb) = b.forward(&self.params, y, slope)?;
            enc_caches.push([ca, cb]);
            if l < depth {
                skips.push(y.clone());
            }
            x = y;
        }
        let bottleneck = x.shape();
        let skip_shapes: Vec<Shape> = skips.iter().map(|s| s.shape()).collect();
        let mut dec_caches: Vec<Option<[ConvBlockCache; 2]>> = vec![None; depth];
        for l in (0..depth).rev() {
            let skip = &skips[l];
            let up = bilinear_upsample(&x, skip.height(), skip.width())?;
            let input = FeatureTensor::concat_channels(&[&up, skip])?;
            let [a, b] = &self.decoder[l];
            let (y, ca) = a.forward(&self.params, input, slope)?;
            let (y, cb) = b.forward(&self.params, y, slope)?;
            dec_caches[l] = Some([ca, cb]);
            x = y;
        }
        let projected = self.projection.forward(&self.params, &x)?;
        Ok((
            split_images(&projected, self.config.output_multiplicity)?,
            EncoderDecoderCache {
                encoder: enc_caches,
                decoder: dec_caches.into_iter().map(|c| c.expect("every level decoded")).collect(),
                skip_shapes,
                features: x,
                bottleneck,
            },
        ))
    }

    fn backward(&self, cache: &EncoderDecoderCache, grad_images: &[FeatureTensor]) -> Result<GradStore> {
        let slope = self.config.lrelu_slope;
        let depth = self.config.depth;
        let mut grads = GradStore::zeros_like(&self.params);
        let g = stack_images(grad_images, self.config.output_multiplicity)?;
        let mut g = self.projection.backward(&self.params, &cache.features, &g, &mut grads)?;
        let mut skip_grads: Vec<Option<FeatureTensor>> = vec![None; depth];
        for l in 0..depth {
            let [a, b] = &self.decoder[l];
            let [ca, cb] = &cache.decoder[l];
            let gb = b.backward(&self.params, cb, &g, slope, &mut grads)?;
            let g_in = a.backward(&self.params, ca, &gb, slope, &mut grads)?;
            let below = if l + 1 < depth {
                cache.skip_shapes[l + 1]
            } else {
                cache.bottleneck
            };
            let g_up = g_in.slice_channels(0, below.channels)?;
            skip_grads[l] = Some(g_in.slice_channels(below.channels, cache.skip_shapes[l].channels)?);
            g = bilinear_upsample_backward(below, &g_up)?;
        }
        for l in (0..=depth).rev() {
            if l < depth {
                g.add_assign(skip_grads[l].as_ref().expect("filled above"));
            }
            let [a, b] = &self.encoder[l];
            let [ca, cb] = &cache.encoder[l];
            let gb = b.backward(&self.params, cb, &g, slope, &mut grads)?;
            g = a.backward(&self.params, ca, &gb, slope, &mut grads)?;
            if l > 0 {
                g = avg_pool2_backward(cache.skip_shapes[l - 1].with_channels(g.channels()), &g);
            }
        }
        Ok(grads)
    }
}
