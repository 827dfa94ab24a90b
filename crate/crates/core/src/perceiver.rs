//! Frozen perception networks whose activations ("taps") drive the
//! feature-matching losses.
//!
//! Tap 0 is always the raw input image. Two architectures are provided:
//!
//! * `desk`: a small seeded random network with taps at strides 1, 2 and 4,
//!   cheap enough for tests and desk-scale training;
//! * `vgg19`: the VGG-19 convolutional stack up to `conv5_2`, tapping the
//!   post-ReLU outputs of `conv1_2` .. `conv5_2`, loaded from a weight archive.
//!
//! Gradients flow through a perceiver to its input image; its own parameters
//! are never updated.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{load_archive, save_archive, ArchiveHeader};
use crate::error::{CrnError, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward, Conv2d,
};
use crate::params::{GradStore, ParamStore};
use crate::tensor::{FeatureTensor, Shape};

pub const VGG19_TAPS: [&str; 6] = ["input", "conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2"];
pub const DESK_TAPS: [&str; 4] = ["input", "conv1", "conv2", "conv3"];

/// Torchvision ImageNet statistics; inputs are RGB in `[0, 1]`.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceiverArch {
    Desk,
    Vgg19,
}

/// Per-channel affine normalization applied before the first convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocessing {
    pub channel_order: String,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocessing {
    pub fn identity() -> Self {
        Preprocessing {
            channel_order: "RGB".into(),
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn imagenet() -> Self {
        Preprocessing {
            channel_order: "RGB".into(),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapSpec {
    pub name: String,
    pub channels: usize,
    /// Downsampling factor relative to the input image.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum WeightSource {
    Seeded { seed: u64 },
    Archive { path: String },
}

/// Description of a perceiver: ordered taps, preprocessing and weight origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceiverSpec {
    pub arch: PerceiverArch,
    pub taps: Vec<TapSpec>,
    pub preprocessing: Preprocessing,
    pub weights: WeightSource,
}

impl PerceiverSpec {
    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    pub fn tap_names(&self) -> Vec<&str> {
        self.taps.iter().map(|t| t.name.as_str()).collect()
    }

    /// Largest tap stride; image sizes must be multiples of it.
    pub fn max_stride(&self) -> usize {
        self.taps.iter().map(|t| t.stride).max().unwrap_or(1)
    }

    /// Tap shapes for an `height x width` input.
    pub fn tap_shapes(&self, height: usize, width: usize) -> Result<Vec<Shape>> {
        let s = self.max_stride();
        if height == 0 || width == 0 || height % s != 0 || width % s != 0 {
            return Err(CrnError::Dimension(format!(
                "{height}x{width} is not divisible by the perceiver stride {s}"
            )));
        }
        Ok(self
            .taps
            .iter()
            .map(|t| Shape::new(t.channels, height / t.stride, width / t.stride))
            .collect())
    }

    /// `(height, width)` of every tap for an `height x width` input.
    pub fn tap_resolutions(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        Ok(self
            .tap_shapes(height, width)?
            .into_iter()
            .map(|s| (s.height, s.width))
            .collect())
    }
}

/// Activations `Φ_0 .. Φ_L` of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceiverTaps {
    pub taps: Vec<FeatureTensor>,
}

impl PerceiverTaps {
    pub fn new(taps: Vec<FeatureTensor>) -> Self {
        PerceiverTaps { taps }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn shapes(&self) -> Vec<Shape> {
        self.taps.iter().map(|t| t.shape()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Normalize { mean: [f64; 3], std: [f64; 3] },
    Conv(Conv2d),
    Relu,
    MaxPool,
    AvgPool,
}

/// Inputs of every layer from a forward pass, for backpropagation to the image.
#[derive(Debug, Clone)]
pub struct PerceiverCache {
    layer_inputs: Vec<FeatureTensor>,
    image_shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perceiver {
    spec: PerceiverSpec,
    params: ParamStore,
    layers: Vec<Layer>,
    /// For each tap `l >= 1`, the layer after which it is read.
    tap_after: Vec<usize>,
}

struct Builder<'a, R: Rng> {
    params: ParamStore,
    layers: Vec<Layer>,
    tap_after: Vec<usize>,
    taps: Vec<TapSpec>,
    stride: usize,
    channels: usize,
    rng: &'a mut R,
    gain: f64,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(&mut self, name: &str, out: usize) {
        let conv = Conv2d::new(&mut self.params, name, self.channels, out, 3, 1, self.rng);
        if self.gain != 1.0 {
            for v in self.params.get_mut(conv.weight) {
                *v *= self.gain;
            }
            self.params.quantize();
        }
        self.layers.push(Layer::Conv(conv));
        self.layers.push(Layer::Relu);
        self.channels = out;
    }

    fn tap(&mut self, name: &str) {
        self.tap_after.push(self.layers.len() - 1);
        self.taps.push(TapSpec {
            name: name.into(),
            channels: self.channels,
            stride: self.stride,
        });
    }

    fn pool(&mut self, max: bool) {
        self.layers.push(if max { Layer::MaxPool } else { Layer::AvgPool });
        self.stride *= 2;
    }
}

fn input_tap() -> TapSpec {
    TapSpec {
        name: "input".into(),
        channels: 3,
        stride: 1,
    }
}

impl Perceiver {
    fn assemble<R: Rng>(
        arch: PerceiverArch,
        preprocessing: Preprocessing,
        weights: WeightSource,
        rng: &mut R,
        gain: f64,
    ) -> Self {
        let mut b = Builder {
            params: ParamStore::new(),
            layers: vec![Layer::Normalize {
                mean: preprocessing.mean,
                std: preprocessing.std,
            }],
            tap_after: Vec::new(),
            taps: vec![input_tap()],
            stride: 1,
            channels: 3,
            rng,
            gain,
        };
        match arch {
            PerceiverArch::Desk => {
                b.conv("conv1", 8);
                b.tap("conv1");
                b.pool(false);
                b.conv("conv2", 16);
                b.tap("conv2");
                b.pool(false);
                b.conv("conv3", 32);
                b.tap("conv3");
            }
            PerceiverArch::Vgg19 => {
                let blocks: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (2, 512)];
                for (block, &(convs, width)) in blocks.iter().enumerate() {
                    if block > 0 {
                        b.pool(true);
                    }
                    for j in 1..=convs {
                        let name = format!("conv{}_{}", block + 1, j);
                        b.conv(&name, width);
                        if j == 2 {
                            b.tap(&name);
                        }
                    }
                }
            }
        }
        let spec = PerceiverSpec {
            arch,
            taps: b.taps,
            preprocessing,
            weights,
        };
        Perceiver {
            spec,
            params: b.params,
            layers: b.layers,
            tap_after: b.tap_after,
        }
    }

    /// The desk-scale random perceiver (taps at strides 1, 2, 4).
    pub fn desk(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // sqrt(6) turns the fan-in uniform bound into a variance-preserving one under ReLU.
        Self::assemble(
            PerceiverArch::Desk,
            Preprocessing::identity(),
            WeightSource::Seeded { seed },
            &mut rng,
            6f64.sqrt(),
        )
    }

    /// VGG-19 with seeded random weights; useful for shape checks.
    pub fn vgg19_seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::assemble(
            PerceiverArch::Vgg19,
            Preprocessing::imagenet(),
            WeightSource::Seeded { seed },
            &mut rng,
            6f64.sqrt(),
        )
    }

    fn skeleton(arch: PerceiverArch, preprocessing: Preprocessing, weights: WeightSource) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self::assemble(arch, preprocessing, weights, &mut rng, 1.0)
    }

    pub fn spec(&self) -> &PerceiverSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn extract_taps(&self, image: &FeatureTensor) -> Result<PerceiverTaps> {
        Ok(self.extract_taps_cached(image)?.0)
    }

    pub fn extract_taps_cached(&self, image: &FeatureTensor) -> Result<(PerceiverTaps, PerceiverCache)> {
        if image.channels() != 3 {
            return Err(CrnError::Dimension(format!(
                "perceiver input must have 3 channels, got {}",
                image.shape()
            )));
        }
        self.spec.tap_shapes(image.height(), image.width())?;
        let mut taps = vec![image.clone()];
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = image.clone();
        let mut next_tap = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = match layer {
                Layer::Normalize { mean, std } => {
                    let mut y = x.clone();
                    for c in 0..3 {
                        for v in y.channel_mut(c) {
                            *v = (*v - mean[c]) / std[c];
                        }
                    }
                    y
                }
                Layer::Conv(conv) => conv.forward(&self.params, &x)?,
                Layer::Relu => leaky_relu(&x, 0.0),
                Layer::MaxPool => max_pool2(&x)?,
                Layer::AvgPool => avg_pool2(&x)?,
            };
            inputs.push(std::mem::replace(&mut x, y));
            if next_tap < self.tap_after.len() && self.tap_after[next_tap] == i {
                taps.push(x.clone());
                next_tap += 1;
                if next_tap == self.tap_after.len() {
                    break;
                }
            }
        }
        Ok((
            PerceiverTaps { taps },
            PerceiverCache {
                layer_inputs: inputs,
                image_shape: image.shape(),
            },
        ))
    }

    /// Gradient with respect to the input image given a gradient per tap.
    pub fn backward(&self, cache: &PerceiverCache, tap_grads: &[FeatureTensor]) -> Result<FeatureTensor> {
        if tap_grads.len() != self.spec.num_taps() {
            return Err(CrnError::Dimension(format!(
                "{} tap gradients for {} taps",
                tap_grads.len(),
                self.spec.num_taps()
            )));
        }
        let mut scratch = GradStore::zeros_like(&self.params);
        let last = cache.layer_inputs.len();
        let mut grad: Option<FeatureTensor> = None;
        let mut tap = self.tap_after.len();
        for i in (0..last).rev() {
            while tap > 0 && self.tap_after[tap - 1] == i {
                let g = &tap_grads[tap];
                grad = Some(match grad {
                    Some(mut acc) => {
                        acc.add_assign(g);
                        acc
                    }
                    None => g.clone(),
                });
                tap -= 1;
            }
            let Some(g) = grad.take() else { continue };
            let x = &cache.layer_inputs[i];
            grad = Some(match &self.layers[i] {
                Layer::Normalize { std, .. } => {
                    let mut g = g;
                    for (c, s) in std.iter().enumerate() {
                        for v in g.channel_mut(c) {
                            *v /= s;
                        }
                    }
                    g
                }
                Layer::Conv(conv) => conv.backward(&self.params, x, &g, &mut scratch)?,
                Layer::Relu => leaky_relu_backward(x, &g, 0.0),
                Layer::MaxPool => max_pool2_backward(x, &g),
                Layer::AvgPool => avg_pool2_backward(x.shape(), &g),
            });
        }
        let mut out = grad.unwrap_or_else(|| FeatureTensor::zeros(cache.image_shape));
        out.add_assign(&tap_grads[0]);
        Ok(out)
    }

    /// Archive header describing this perceiver.
    pub fn archive_header(&self) -> ArchiveHeader {
        ArchiveHeader {
            kind: "perceiver".into(),
            config: serde_json::json!({
                "arch": self.spec.arch,
                "taps": self.spec.tap_names(),
                "preprocessing": self.spec.preprocessing,
            }),
            step: 0,
            seed: match self.spec.weights {
                WeightSource::Seeded { seed } => seed,
                WeightSource::Archive { .. } => 0,
            },
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_archive(dir, &self.archive_header(), &self.params)
    }
}

#[derive(Debug, Deserialize)]
struct PerceiverArchiveConfig {
    arch: PerceiverArch,
    taps: Vec<String>,
    preprocessing: Preprocessing,
}

/// Loads a perceiver from a weight archive, validating every tensor name and shape.
pub fn load_perceiver_weights(archive_path: &Path) -> Result<Perceiver> {
    let (header, params) = load_archive(archive_path)?;
    if header.kind != "perceiver" {
        return Err(CrnError::Schema(format!(
            "archive kind is {:?}, expected \"perceiver\"",
            header.kind
        )));
    }
    let config: PerceiverArchiveConfig = serde_json::from_value(header.config)
        .map_err(|e| CrnError::Schema(format!("perceiver header: {e}")))?;
    let mut perceiver = Perceiver::skeleton(
        config.arch,
        config.preprocessing,
        WeightSource::Archive {
            path: archive_path.display().to_string(),
        },
    );
    if config.taps != perceiver.spec.tap_names() {
        return Err(CrnError::Schema(format!(
            "tap list {:?} does not match {:?}",
            config.taps,
            perceiver.spec.tap_names()
        )));
    }
    perceiver.params.load_from(&params)?;
    Ok(perceiver)
}

/// Torchvision `features.N` indices of the VGG-19 convolutions used here.
const TORCHVISION_VGG19_CONVS: [(&str, usize); 14] = [
    ("conv1_1", 0),
    ("conv1_2", 2),
    ("conv2_1", 5),
    ("conv2_2", 7),
    ("conv3_1", 10),
    ("conv3_2", 12),
    ("conv3_3", 14),
    ("conv3_4", 16),
    ("conv4_1", 19),
    ("conv4_2", 21),
    ("conv4_3", 23),
    ("conv4_4", 25),
    ("conv5_1", 28),
    ("conv5_2", 30),
];

#[derive(Debug, Deserialize)]
struct SafetensorsEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Reads the float32 tensors of a `.safetensors` file.
pub fn read_safetensors(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| CrnError::io(path, e))?;
    let bad = |msg: String| CrnError::Schema(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("file too short".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file".into()))?;
    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..body_start]).map_err(|e| CrnError::json(path, e))?;
    let body = &bytes[body_start..];
    let mut names: Vec<(&String, SafetensorsEntry)> = header
        .iter()
        .filter(|(k, _)| k.as_str() != "__metadata__")
        .map(|(k, v)| {
            serde_json::from_value::<SafetensorsEntry>(v.clone())
                .map(|e| (k, e))
                .map_err(|e| bad(format!("tensor {k}: {e}")))
        })
        .collect::<Result<_>>()?;
    names.sort_by_key(|(_, e)| e.data_offsets[0]);
    let mut store = ParamStore::new();
    for (name, entry) in names {
        if entry.dtype != "F32" {
            return Err(bad(format!("tensor {name} has dtype {}, expected F32", entry.dtype)));
        }
        let [start, end] = entry.data_offsets;
        let n: usize = entry.shape.iter().product();
        if end < start || end - start != 4 * n || end > body.len() {
            return Err(bad(format!("tensor {name} has inconsistent offsets")));
        }
        let data = body[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        store.insert(name.clone(), entry.shape, data);
    }
    Ok(store)
}

/// Converts a torchvision VGG-19 state dict saved as safetensors into a
/// perceiver archive with ImageNet preprocessing.
pub fn convert_torchvision_vgg19(safetensors_path: &Path, out_dir: &Path) -> Result<Perceiver> {
    let source = read_safetensors(safetensors_path)?;
    let mut renamed = ParamStore::new();
    for (name, index) in TORCHVISION_VGG19_CONVS {
        for suffix in ["weight", "bias"] {
            let key = format!("features.{index}.{suffix}");
            let id = source
                .id_of(&key)
                .ok_or_else(|| CrnError::Schema(format!("missing tensor {key} (for {name}.{suffix})")))?;
            let entry = &source.entries()[id.index()];
            renamed.insert(format!("{name}.{suffix}"), entry.shape.clone(), entry.data.clone());
        }
    }
    let mut perceiver = Perceiver::skeleton(
        PerceiverArch::Vgg19,
        Preprocessing::imagenet(),
        WeightSource::Archive {
            path: out_dir.display().to_string(),
        },
    );
    perceiver.params.load_from(&renamed)?;
    perceiver.save(out_dir)?;
    Ok(perceiver)
}
