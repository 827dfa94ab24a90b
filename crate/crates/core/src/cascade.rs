//! The cascaded refinement network.
//!
//! Module `i` runs at `(base_h * 2^i, base_w * 2^i)`. Its input is the layout
//! block-averaged to that resolution, concatenated with the bilinearly
//! upsampled output of module `i - 1`. Two stages of 3x3 convolution, layer
//! normalization and leaky ReLU follow. A linear 1x1 projection maps the
//! final module's features to `3k` channels, read as `k` RGB images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrnError, Result};
use crate::layout::{downsample_layout, SemanticLayout};
use crate::model::{split_images, stack_images, SynthesisModel};
use crate::nn::{
    bilinear_upsample, bilinear_upsample_backward, leaky_relu, leaky_relu_backward, Conv2d, LayerNorm,
    LayerNormCache,
};
use crate::params::{GradStore, ParamStore};
use crate::tensor::{FeatureTensor, Shape};

pub const DEFAULT_LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub base_h: usize,
    pub base_w: usize,
    pub module_count: usize,
    /// Feature maps per module, one entry per module.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub output_multiplicity: usize,
    #[serde(default = "default_slope")]
    pub lrelu_slope: f64,
}

fn default_slope() -> f64 {
    DEFAULT_LRELU_SLOPE
}

impl CascadeConfig {
    /// Nine modules from 4x8 to 1024x2048 with the published channel schedule.
    pub fn full_scale(num_classes: usize, output_multiplicity: usize) -> Self {
        let mut channels = vec![1024; 5];
        channels.extend([512, 512, 128, 32]);
        CascadeConfig {
            base_h: 4,
            base_w: 8,
            module_count: 9,
            channels,
            num_classes,
            output_multiplicity,
            lrelu_slope: DEFAULT_LRELU_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CrnError::Argument(msg));
        if self.base_h == 0 || self.base_w == 0 {
            return bad("base resolution must be positive".into());
        }
        if self.module_count == 0 {
            return bad("module_count must be at least 1".into());
        }
        if self.channels.len() != self.module_count {
            return bad(format!(
                "channels has {} entries for {} modules",
                self.channels.len(),
                self.module_count
            ));
        }
        if self.channels.contains(&0) {
            return bad("every module needs at least one feature map".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.output_multiplicity == 0 {
            return bad("output_multiplicity must be at least 1".into());
        }
        if !self.lrelu_slope.is_finite() {
            return bad("lrelu_slope must be finite".into());
        }
        Ok(())
    }

    pub fn module_resolution(&self, i: usize) -> (usize, usize) {
        (self.base_h << i, self.base_w << i)
    }

    pub fn output_resolution(&self) -> (usize, usize) {
        self.module_resolution(self.module_count - 1)
    }

    fn module_input_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.num_classes
        } else {
            self.channels[i - 1] + self.num_classes
        }
    }

    /// Parameter total in closed form.
    pub fn param_count(&self) -> usize {
        let modules: usize = (0..self.module_count)
            .map(|i| {
                let d = self.channels[i];
                Conv2d::param_count(self.module_input_channels(i), d, 3)
                    + Conv2d::param_count(d, d, 3)
                    + 2 * LayerNorm::param_count(d)
            })
            .sum();
        let last = self.channels[self.module_count - 1];
        modules + Conv2d::param_count(last, 3 * self.output_multiplicity, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RefinementModule {
    height: usize,
    width: usize,
    conv1: Conv2d,
    norm1: LayerNorm,
    conv2: Conv2d,
    norm2: LayerNorm,
}

/// Intermediate values of one refinement module kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ModuleCache {
    input: FeatureTensor,
    norm1: LayerNormCache,
    normed1: FeatureTensor,
    hidden: FeatureTensor,
    norm2: LayerNormCache,
    normed2: FeatureTensor,
    prev_shape: Option<Shape>,
}

impl ModuleCache {
    /// The concatenated `[layout, upsampled previous features]` input.
    pub fn input(&self) -> &FeatureTensor {
        &self.input
    }
}

#[derive(Debug, Clone)]
pub struct CascadeCache {
    modules: Vec<ModuleCache>,
    features: FeatureTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    config: CascadeConfig,
    params: ParamStore,
    modules: Vec<RefinementModule>,
    projection: Conv2d,
}

impl CascadeModel {
    /// Fan-in-scaled uniform weights, zero biases, unit gains.
    ///
    /// Each module draws from its own ChaCha stream, so extending the cascade
    /// leaves earlier modules' initial weights unchanged.
    pub fn new(config: CascadeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut modules = Vec::with_capacity(config.module_count);
        for i in 0..config.module_count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let d = config.channels[i];
            let (height, width) = config.module_resolution(i);
            let prefix = format!("module{i}");
            let conv1 = Conv2d::new(
                &mut params,
                &format!("{prefix}.conv1"),
                config.module_input_channels(i),
                d,
                3,
                1,
                &mut rng,
            );
            let norm1 = LayerNorm::new(&mut params, &format!("{prefix}.norm1"), d);
            let conv2 = Conv2d::new(&mut params, &format!("{prefix}.conv2"), d, d, 3, 1, &mut rng);
            let norm2 = LayerNorm::new(&mut params, &format!("{prefix}.norm2"), d);
            modules.push(RefinementModule {
                height,
                width,
                conv1,
                norm1,
                conv2,
                norm2,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let projection = Conv2d::new(
            &mut params,
            "projection",
            config.channels[config.module_count - 1],
            3 * config.output_multiplicity,
            1,
            1,
            &mut rng,
        );
        Ok(CascadeModel {
            config,
            params,
            modules,
            projection,
        })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    /// Number of scalar parameters, counted from the instantiated tensors.
    pub fn enumerated_param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_module_index(&self, i: usize) -> Result<()> {
        if i >= self.modules.len() {
            return Err(CrnError::Argument(format!(
                "module index {i} out of {} modules",
                self.modules.len()
            )));
        }
        Ok(())
    }

    fn module_input(&self, i: usize, layout: &SemanticLayout, prev: Option<&FeatureTensor>) -> Result<FeatureTensor> {
        self.check_module_index(i)?;
        if layout.num_classes() != self.config.num_classes {
            return Err(CrnError::Dimension(format!(
                "layout has {} classes, model expects {}",
                layout.num_classes(),
                self.config.num_classes
            )));
        }
        let m = &self.modules[i];
        let local = downsample_layout(layout, m.height, m.width)?;
        match (i, prev) {
            (0, None) => Ok(local.tensor().clone()),
            (0, Some(_)) => Err(CrnError::Argument("module 0 takes no previous features".into())),
            (_, None) => Err(CrnError::Argument(format!("module {i} needs previous features"))),
            (_, Some(prev)) => {
                let (ph, pw) = self.config.module_resolution(i - 1);
                prev.ensure_shape(
                    Shape::new(self.config.channels[i - 1], ph, pw),
                    &format!("features entering module {i}"),
                )?;
                let up = bilinear_upsample(prev, m.height, m.width)?;
                FeatureTensor::concat_channels(&[local.tensor(), &up])
            }
        }
    }

    /// Runs module `i` and keeps what its backward pass needs.
    pub fn refinement_forward_cached(
        &self,
        i: usize,
        layout: &SemanticLayout,
        prev: Option<&FeatureTensor>,
    ) -> Result<(FeatureTensor, ModuleCache)> {
        let input = self.module_input(i, layout, prev)?;
        self.module_from_input(i, input, prev.map(|p| p.shape()))
    }

    /// Runs module `i` on a prepared concatenated input.
    pub fn module_from_input(
        &self,
        i: usize,
        input: FeatureTensor,
        prev_shape: Option<Shape>,
    ) -> Result<(FeatureTensor, ModuleCache)> {
        self.check_module_index(i)?;
        let m = &self.modules[i];
        let slope = self.config.lrelu_slope;
        let z1 = m.conv1.forward(&self.params, &input)?;
        let (normed1, norm1) = m.norm1.forward(&self.params, &z1)?;
        let hidden = leaky_relu(&normed1, slope);
        let z2 = m.conv2.forward(&self.params, &hidden)?;
        let (normed2, norm2) = m.norm2.forward(&self.params, &z2)?;
        let out = leaky_relu(&normed2, slope);
        Ok((
            out,
            ModuleCache {
                input,
                norm1,
                normed1,
                hidden,
                norm2,
                normed2,
                prev_shape,
            },
        ))
    }

    /// Output features of module `i`. Module 0 takes `prev = None`.
    pub fn refinement_forward(
        &self,
        i: usize,
        layout: &SemanticLayout,
        prev: Option<&FeatureTensor>,
    ) -> Result<FeatureTensor> {
        Ok(self.refinement_forward_cached(i, layout, prev)?.0)
    }

    /// Accumulates module `i`'s parameter gradients and returns the gradient
    /// with respect to its concatenated input.
    pub fn module_backward(
        &self,
        i: usize,
        cache: &ModuleCache,
        grad_out: &FeatureTensor,
        grads: &mut GradStore,
    ) -> Result<FeatureTensor> {
        self.check_module_index(i)?;
        let m = &self.modules[i];
        let slope = self.config.lrelu_slope;
        let g = leaky_relu_backward(&cache.normed2, grad_out, slope);
        let g = m.norm2.backward(&self.params, &cache.norm2, &g, grads)?;
        let g = m.conv2.backward(&self.params, &cache.hidden, &g, grads)?;
        let g = leaky_relu_backward(&cache.normed1, &g, slope);
        let g = m.norm1.backward(&self.params, &cache.norm1, &g, grads)?;
        m.conv1.backward(&self.params, &cache.input, &g, grads)
    }

    fn check_layout_shape(&self, layout: &SemanticLayout) -> Result<()> {
        let (h, w) = self.config.output_resolution();
        layout.tensor().ensure_shape(
            Shape::new(self.config.num_classes, h, w),
            "cascade input layout",
        )
    }
}

impl SynthesisModel for CascadeModel {
    type Cache = CascadeCache;

    fn kind(&self) -> &'static str {
        "crn"
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
        self.check_layout_shape(layout)
    }

    fn forward_train(&self, layout: &SemanticLayout) -> Result<(Vec<FeatureTensor>, CascadeCache)> {
        self.check_layout_shape(layout)?;
        let mut caches = Vec::with_capacity(self.modules.len());
        let mut features: Option<FeatureTensor> = None;
        for i in 0..self.modules.len() {
            let (out, cache) = self.refinement_forward_cached(i, layout, features.as_ref())?;
            caches.push(cache);
            features = Some(out);
        }
        let features = features.expect("at least one module");
        let projected = self.projection.forward(&self.params, &features)?;
        let images = split_images(&projected, self.config.output_multiplicity)?;
        Ok((
            images,
            CascadeCache {
                modules: caches,
                features,
            },
        ))
    }

    fn backward(&self, cache: &CascadeCache, grad_images: &[FeatureTensor]) -> Result<GradStore> {
        let mut grads = GradStore::zeros_like(&self.params);
        let g = stack_images(grad_images, self.config.output_multiplicity)?;
        let mut grad = self.projection.backward(&self.params, &cache.features, &g, &mut grads)?;
        let c = self.config.num_classes;
        for i in (0..self.modules.len()).rev() {
            let mc = &cache.modules[i];
            let g_in = self.module_backward(i, mc, &grad, &mut grads)?;
            if let Some(prev_shape) = mc.prev_shape {
                let g_up = g_in.slice_channels(c, prev_shape.channels)?;
                grad = bilinear_upsample_backward(prev_shape, &g_up)?;
            }
        }
        Ok(grads)
    }
}

/// Closed-form parameter count of a cascade configuration.
pub fn param_count(config: &CascadeConfig) -> usize {
    config.param_count()
}
