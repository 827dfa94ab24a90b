//! Supervised training loop, synthesis driver and memorization report.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::AnyModel;
use crate::dataset::{Dataset, TrainingPair};
use crate::error::{CrnError, Result};
use crate::layout::{class_masks, load_label_map, one_hot, save_rgb_png, ClassMasks, LabelMapping, ReferenceImage};
use crate::model::SynthesisModel;
use crate::objectives::{
    feature_matching_loss_grad, hindsight_loss_grad, image_lambda, lambda_init, lambda_rescale,
    masked_diversity_loss_grad, LayerWeights, LossReport,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::perceiver::{Perceiver, PerceiverTaps};
use crate::tensor::FeatureTensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAMBDA_FILE: &str = "lambda.jsonl";
pub const FINAL_CHECKPOINT: &str = "final";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Feature matching against one output.
    Eq1,
    /// Best of `k` outputs.
    Eq2,
    /// Best of `k` outputs chosen independently per semantic class.
    Eq3,
    /// Pixel-space L1 (best of `k` when `k > 1`).
    Eq4,
}

impl std::str::FromStr for LossKind {
    type Err = CrnError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| CrnError::Argument(format!("unknown loss {s:?}, expected eq1|eq2|eq3|eq4")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Defaults to one pass over the dataset.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Epoch after which λ is rescaled once; `null` disables rescaling.
    #[serde(default = "default_rescale_epoch")]
    pub lambda_rescale_epoch: Option<usize>,
    /// Checkpoint every this many steps, in addition to the final one.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

fn default_epochs() -> usize {
    200
}
fn default_loss() -> LossKind {
    LossKind::Eq1
}
fn default_k() -> usize {
    1
}
fn default_rescale_epoch() -> Option<usize> {
    Some(100)
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            steps_per_epoch: None,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            loss: default_loss(),
            k: default_k(),
            lambda_rescale_epoch: default_rescale_epoch(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.k == 0 || self.steps_per_epoch == Some(0) {
            return Err(CrnError::Argument("epochs, steps_per_epoch and k must be positive".into()));
        }
        if self.lambda_rescale_epoch == Some(0) {
            return Err(CrnError::Argument("lambda_rescale_epoch must be positive or null".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(CrnError::Argument("checkpoint_every must be positive or null".into()));
        }
        if self.loss == LossKind::Eq1 && self.k != 1 {
            return Err(CrnError::Argument(format!(
                "loss eq1 trains a single output, got k = {}; use eq2 or eq3",
                self.k
            )));
        }
        self.optimizer.validate()
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        self.steps_per_epoch.unwrap_or(dataset_len)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub pair: usize,
    pub total: f64,
    pub per_layer: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_u: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaEventKind {
    Init,
    Rescale,
}

/// One line of the λ log. A rescale event records the weights in force
/// before and after, and the running means that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaEvent {
    pub event: LambdaEventKind,
    /// First step that uses `lambda`.
    pub step: u64,
    pub epoch: usize,
    pub lambda: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_means: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub step: u64,
    pub epoch: usize,
    pub lambda: LayerWeights,
    pub rescaled: bool,
    term_sums: Vec<f64>,
    term_count: u64,
}

impl TrainingState {
    fn new(lambda: LayerWeights) -> Self {
        let n = lambda.len();
        TrainingState {
            step: 0,
            epoch: 0,
            lambda,
            rescaled: false,
            term_sums: vec![0.0; n],
            term_count: 0,
        }
    }

    fn observe(&mut self, per_layer: &[f64]) {
        for (s, v) in self.term_sums.iter_mut().zip(per_layer) {
            *s += v;
        }
        self.term_count += 1;
    }

    /// Arithmetic mean of each weighted per-layer term over the steps seen.
    pub fn running_means(&self) -> Vec<f64> {
        let n = self.term_count.max(1) as f64;
        self.term_sums.iter().map(|s| s / n).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainingState,
    pub records: Vec<StepRecord>,
    pub lambda_events: Vec<LambdaEvent>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Per-pair values that stay fixed during training.
struct PairTargets {
    taps: Option<PerceiverTaps>,
    masks: Option<ClassMasks>,
}

/// Loss and per-image gradients for one pair under a given λ.
pub struct Objective<'a> {
    kind: LossKind,
    perceiver: &'a Perceiver,
}

impl<'a> Objective<'a> {
    pub fn new(kind: LossKind, perceiver: &'a Perceiver) -> Self {
        Objective { kind, perceiver }
    }

    /// λ at initialization for images of the given resolution.
    pub fn initial_lambda(&self, resolution: (usize, usize)) -> Result<LayerWeights> {
        match self.kind {
            LossKind::Eq4 => LayerWeights::new(vec![image_lambda(crate::tensor::Shape::new(
                3,
                resolution.0,
                resolution.1,
            ))]),
            _ => lambda_init(self.perceiver.spec(), resolution),
        }
    }

    fn targets(&self, pair: &TrainingPair) -> Result<PairTargets> {
        let (h, w) = (pair.layout.height(), pair.layout.width());
        Ok(match self.kind {
            LossKind::Eq4 => PairTargets { taps: None, masks: None },
            LossKind::Eq1 | LossKind::Eq2 => PairTargets {
                taps: Some(self.perceiver.extract_taps(pair.image.tensor())?),
                masks: None,
            },
            LossKind::Eq3 => PairTargets {
                taps: Some(self.perceiver.extract_taps(pair.image.tensor())?),
                masks: Some(class_masks(&pair.layout, &self.perceiver.spec().tap_resolutions(h, w)?)?),
            },
        })
    }

    /// Loss of `images` against `pair`, without gradients.
    pub fn evaluate(&self, pair: &TrainingPair, images: &[FeatureTensor], lambda: &LayerWeights) -> Result<LossReport> {
        let targets = self.targets(pair)?;
        Ok(self.loss_and_grads(pair, &targets, images, lambda, false)?.0)
    }

    /// Loss of `images` against `pair` with the gradient for each image.
    pub fn gradients(
        &self,
        pair: &TrainingPair,
        images: &[FeatureTensor],
        lambda: &LayerWeights,
    ) -> Result<(LossReport, Vec<FeatureTensor>)> {
        let targets = self.targets(pair)?;
        self.loss_and_grads(pair, &targets, images, lambda, true)
    }

    fn loss_and_grads(
        &self,
        pair: &TrainingPair,
        targets: &PairTargets,
        images: &[FeatureTensor],
        lambda: &LayerWeights,
        want_grads: bool,
    ) -> Result<(LossReport, Vec<FeatureTensor>)> {
        let zero_grads = || images.iter().map(|im| FeatureTensor::zeros(im.shape())).collect::<Vec<_>>();
        match self.kind {
            LossKind::Eq4 => {
                let reference = PerceiverTaps::new(vec![pair.image.tensor().clone()]);
                let syn: Vec<PerceiverTaps> = images.iter().map(|im| PerceiverTaps::new(vec![im.clone()])).collect();
                let (report, grads) = hindsight_loss_grad(&reference, &syn, lambda)?;
                let mut report = report;
                if images.len() == 1 {
                    report.chosen_u = None;
                    report.per_hypothesis = None;
                }
                Ok((report, grads.into_iter().map(|mut g| g.remove(0)).collect()))
            }
            LossKind::Eq1 => {
                let reference = targets.taps.as_ref().expect("eq1 targets");
                let (syn, cache) = self.perceiver.extract_taps_cached(&images[0])?;
                let (report, tap_grads) = feature_matching_loss_grad(reference, &syn, lambda)?;
                let grads = if want_grads {
                    vec![self.perceiver.backward(&cache, &tap_grads)?]
                } else {
                    zero_grads()
                };
                Ok((report, grads))
            }
            LossKind::Eq2 | LossKind::Eq3 => {
                let reference = targets.taps.as_ref().expect("eq2/eq3 targets");
                let mut syn = Vec::with_capacity(images.len());
                let mut caches = Vec::with_capacity(images.len());
                for im in images {
                    let (t, c) = self.perceiver.extract_taps_cached(im)?;
                    syn.push(t);
                    caches.push(c);
                }
                let (report, tap_grads) = if self.kind == LossKind::Eq2 {
                    hindsight_loss_grad(reference, &syn, lambda)?
                } else {
                    masked_diversity_loss_grad(reference, &syn, lambda, targets.masks.as_ref().expect("eq3 masks"))?
                };
                let mut grads = zero_grads();
                if want_grads {
                    let chosen = report.chosen_u.clone().unwrap_or_default();
                    for (u, g) in grads.iter_mut().enumerate() {
                        if chosen.contains(&u) {
                            *g = self.perceiver.backward(&caches[u], &tap_grads[u])?;
                        }
                    }
                }
                Ok((report, grads))
            }
        }
    }
}

fn check_compatibility(model: &AnyModel, perceiver: &Perceiver, dataset: &Dataset, config: &TrainConfig) -> Result<()> {
    if model.output_multiplicity() != config.k {
        return Err(CrnError::Argument(format!(
            "model emits {} images but the training config asks for k = {}",
            model.output_multiplicity(),
            config.k
        )));
    }
    if model.num_classes() != dataset.num_classes() {
        return Err(CrnError::Dimension(format!(
            "dataset has {} classes, model expects {}",
            dataset.num_classes(),
            model.num_classes()
        )));
    }
    for pair in dataset.pairs() {
        model
            .check_layout(&pair.layout)
            .map_err(|e| CrnError::Dimension(format!("pair {}: {e}", pair.name)))?;
    }
    if config.loss != LossKind::Eq4 {
        let (h, w) = dataset.resolution();
        perceiver.spec().tap_shapes(h, w)?;
    }
    Ok(())
}

/// Order in which pairs are visited during `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, dataset_len: usize, steps: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut order = Vec::with_capacity(steps);
    while order.len() < steps {
        let mut perm: Vec<usize> = (0..dataset_len).collect();
        perm.shuffle(&mut rng);
        order.extend(perm);
    }
    order.truncate(steps);
    order
}

struct JsonlWriter(Option<BufWriter<File>>, PathBuf);

impl JsonlWriter {
    fn create(dir: Option<&Path>, name: &str) -> Result<Self> {
        match dir {
            None => Ok(JsonlWriter(None, PathBuf::new())),
            Some(dir) => {
                let path = dir.join(name);
                let file = File::create(&path).map_err(|e| CrnError::io(&path, e))?;
                Ok(JsonlWriter(Some(BufWriter::new(file)), path))
            }
        }
    }

    fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        if let Some(w) = &mut self.0 {
            let line = serde_json::to_string(value).map_err(|e| CrnError::json(&self.1, e))?;
            writeln!(w, "{line}").map_err(|e| CrnError::io(&self.1, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush().map_err(|e| CrnError::io(&self.1, e))?;
        }
        Ok(())
    }
}

/// Trains `model` in place. With `out_dir`, writes the metrics and λ logs and
/// checkpoints there.
pub fn train(
    model: &mut AnyModel,
    perceiver: &Perceiver,
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatibility(model, perceiver, dataset, config)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| CrnError::io(dir, e))?;
    }
    let objective = Objective::new(config.loss, perceiver);
    let targets: Vec<PairTargets> = dataset
        .pairs()
        .iter()
        .map(|p| objective.targets(p))
        .collect::<Result<_>>()?;
    let mut state = TrainingState::new(objective.initial_lambda(dataset.resolution())?);
    let mut optimizer = Optimizer::new(config.optimizer.clone(), model.params())?;
    let mut metrics = JsonlWriter::create(out_dir, METRICS_FILE)?;
    let mut lambda_log = JsonlWriter::create(out_dir, LAMBDA_FILE)?;
    let mut records = Vec::new();
    let mut lambda_events = vec![LambdaEvent {
        event: LambdaEventKind::Init,
        step: 0,
        epoch: 0,
        lambda: state.lambda.values().to_vec(),
        previous: None,
        running_means: None,
    }];
    lambda_log.write(&lambda_events[0])?;
    let steps = config.steps_per_epoch(dataset.len());

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        if !state.rescaled && config.lambda_rescale_epoch == Some(epoch) {
            let means = state.running_means();
            let previous = state.lambda.clone();
            state.lambda = lambda_rescale(&previous, &means)?;
            state.rescaled = true;
            let event = LambdaEvent {
                event: LambdaEventKind::Rescale,
                step: state.step,
                epoch,
                lambda: state.lambda.values().to_vec(),
                previous: Some(previous.values().to_vec()),
                running_means: Some(means),
            };
            lambda_log.write(&event)?;
            lambda_events.push(event);
        }
        for pair_index in epoch_order(config.seed, epoch, dataset.len(), steps) {
            let pair = &dataset.pairs()[pair_index];
            let (images, cache) = model.forward_train(&pair.layout)?;
            let (report, image_grads) =
                objective.loss_and_grads(pair, &targets[pair_index], &images, &state.lambda, true)?;
            if !report.total.is_finite() || !report.per_layer.iter().all(|v| v.is_finite()) {
                metrics.flush()?;
                return Err(CrnError::NonFiniteLoss {
                    step: state.step,
                    detail: format!("loss {} on pair {}", report.total, pair.name),
                });
            }
            let grads = model.backward(&cache, &image_grads)?;
            if !grads.all_finite() {
                metrics.flush()?;
                return Err(CrnError::NonFiniteLoss {
                    step: state.step,
                    detail: format!("non-finite gradient on pair {}", pair.name),
                });
            }
            optimizer.step(model.params_mut(), &grads)?;
            if !state.rescaled {
                state.observe(&report.per_layer);
            }
            let record = StepRecord {
                step: state.step,
                epoch,
                pair: pair_index,
                total: report.total,
                per_layer: report.per_layer,
                per_class: report.per_class,
                chosen_u: report.chosen_u,
            };
            metrics.write(&record)?;
            records.push(record);
            state.step += 1;
            if let (Some(dir), Some(every)) = (out_dir, config.checkpoint_every) {
                if state.step % every == 0 {
                    let path = dir.join(CHECKPOINT_DIR).join(format!("step_{:08}", state.step));
                    model.save_checkpoint(&path, state.step, config.seed)?;
                }
            }
        }
    }
    metrics.flush()?;
    lambda_log.flush()?;
    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            model.save_checkpoint(&path, state.step, config.seed)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        state,
        records,
        lambda_events,
        final_checkpoint,
    })
}

/// Mean of a loss over the dataset under fixed λ.
pub fn evaluate_dataset(
    model: &AnyModel,
    objective: &Objective<'_>,
    dataset: &Dataset,
    lambda: &LayerWeights,
) -> Result<Vec<LossReport>> {
    dataset
        .pairs()
        .iter()
        .map(|pair| objective.evaluate(pair, &model.forward(&pair.layout)?, lambda))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KSelect {
    All,
    /// Only the output closest (pixel L1) to a given reference image.
    Best,
}

impl std::str::FromStr for KSelect {
    type Err = CrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(KSelect::All),
            "best" => Ok(KSelect::Best),
            _ => Err(CrnError::Argument(format!("unknown selection {s:?}, expected all|best"))),
        }
    }
}

fn clamp01(t: &FeatureTensor) -> FeatureTensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn mean_abs_diff(a: &FeatureTensor, b: &FeatureTensor) -> Result<f64> {
    Ok(a.l1_distance(b)? / a.numel() as f64)
}

/// Index of the output closest to `reference` in mean per-pixel L1, ties to the lowest index.
pub fn best_output(images: &[FeatureTensor], reference: &FeatureTensor) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for (u, im) in images.iter().enumerate() {
        let d = mean_abs_diff(&clamp01(im), reference)?;
        if d < best.1 {
            best = (u, d);
        }
    }
    Ok(best.0)
}

/// Runs a trained model over layout files and writes PNGs into `out_dir`.
///
/// With `k > 1` and [`KSelect::All`] the files are `<stem>_<u>.png`;
/// otherwise `<stem>.png`. [`KSelect::Best`] needs one reference per layout.
pub fn synthesize(
    model: &AnyModel,
    layout_paths: &[PathBuf],
    mapping: LabelMapping<'_>,
    out_dir: &Path,
    select: KSelect,
    references: Option<&[PathBuf]>,
) -> Result<Vec<PathBuf>> {
    if select == KSelect::Best && references.map(|r| r.len()) != Some(layout_paths.len()) {
        return Err(CrnError::Argument(
            "best-of-k selection needs exactly one reference image per layout".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| CrnError::io(out_dir, e))?;
    let k = model.output_multiplicity();
    let mut written = Vec::new();
    for (i, path) in layout_paths.iter().enumerate() {
        let grid = load_label_map(path, mapping)?;
        let layout = one_hot(&grid, model.num_classes())?;
        model.check_layout(&layout)?;
        let images = model.forward(&layout)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("layout{i}"));
        let chosen: Vec<(usize, PathBuf)> = match select {
            KSelect::All if k > 1 => (0..k).map(|u| (u, out_dir.join(format!("{stem}_{u}.png")))).collect(),
            KSelect::All => vec![(0, out_dir.join(format!("{stem}.png")))],
            KSelect::Best => {
                let reference = ReferenceImage::load(&references.expect("checked above")[i])?;
                vec![(best_output(&images, reference.tensor())?, out_dir.join(format!("{stem}.png")))]
            }
        };
        for (u, file) in chosen {
            save_rgb_png(&images[u], &file)?;
            written.push(file);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    /// Mean per-pixel L1 between the (best) clamped output and the reference, per pair.
    pub per_pair: Vec<f64>,
    /// Same measure for a constant prediction of the dataset mean image.
    pub constant_baseline: Vec<f64>,
    pub mean_l1: f64,
    pub mean_baseline: f64,
}

impl MemorizationReport {
    /// Whether the model beats the constant predictor on every pair.
    pub fn beats_baseline_everywhere(&self) -> bool {
        self.per_pair.iter().zip(&self.constant_baseline).all(|(m, b)| m < b)
    }
}

/// Pixel-space fit of a model to its training pairs.
pub fn memorization_report(model: &AnyModel, dataset: &Dataset) -> Result<MemorizationReport> {
    let mut mean_image = FeatureTensor::zeros(dataset.pairs()[0].image.tensor().shape());
    for pair in dataset.pairs() {
        mean_image.add_assign(pair.image.tensor());
    }
    let n = dataset.len() as f64;
    let mean_image = mean_image.map(|v| v / n);
    let mut per_pair = Vec::with_capacity(dataset.len());
    let mut constant_baseline = Vec::with_capacity(dataset.len());
    for pair in dataset.pairs() {
        let images = model.forward(&pair.layout)?;
        let reference = pair.image.tensor();
        let u = best_output(&images, reference)?;
        per_pair.push(mean_abs_diff(&clamp01(&images[u]), reference)?);
        constant_baseline.push(mean_abs_diff(&mean_image, reference)?);
    }
    Ok(MemorizationReport {
        mean_l1: per_pair.iter().sum::<f64>() / n,
        mean_baseline: constant_baseline.iter().sum::<f64>() / n,
        per_pair,
        constant_baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::CascadeConfig;
    use crate::checkpoint::ModelConfig;
    use crate::layout::LabelGrid;
    use crate::tensor::Shape;

    fn tiny_model(k: usize) -> AnyModel {
        AnyModel::build(
            &ModelConfig::Crn(CascadeConfig {
                base_h: 4,
                base_w: 8,
                module_count: 2,
                channels: vec![6, 4],
                num_classes: 3,
                output_multiplicity: k,
                lrelu_slope: 0.2,
            }),
            3,
        )
        .unwrap()
    }

    fn tiny_dataset(n: usize) -> Dataset {
        let pairs = (0..n)
            .map(|i| {
                let grid = LabelGrid::new(8, 16, (0..128).map(|p| (p / 16 + i + (p % 16) / 6) % 3).collect()).unwrap();
                let img = FeatureTensor::from_fn(Shape::new(3, 8, 16), |c, y, x| {
                    let l = grid.get(y, x);
                    (0.2 + 0.3 * l as f64 + 0.05 * c as f64 + 0.01 * i as f64).min(1.0)
                });
                TrainingPair::new(format!("p{i}"), grid, 3, ReferenceImage::new(img).unwrap()).unwrap()
            })
            .collect();
        Dataset::new(pairs).unwrap()
    }

    fn config(loss: LossKind, k: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            loss,
            k,
            optimizer: OptimizerConfig {
                step_size: 1e-2,
                ..OptimizerConfig::default()
            },
            lambda_rescale_epoch: Some(2),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_step_size_leaves_parameters_unchanged() {
        let mut model = tiny_model(1);
        let before = model.clone();
        let mut cfg = config(LossKind::Eq1, 1, 1);
        cfg.optimizer.step_size = 0.0;
        cfg.steps_per_epoch = Some(1);
        let out = train(&mut model, &Perceiver::desk(0), &tiny_dataset(2), &cfg, None).unwrap();
        assert_eq!(model, before);
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].total > 0.0);
    }

    #[test]
    fn every_loss_trains_and_logs() {
        let perceiver = Perceiver::desk(1);
        let ds = tiny_dataset(3);
        for (loss, k) in [(LossKind::Eq1, 1), (LossKind::Eq2, 2), (LossKind::Eq3, 3), (LossKind::Eq4, 2)] {
            let mut model = tiny_model(k);
            let out = train(&mut model, &perceiver, &ds, &config(loss, k, 3), None).unwrap();
            assert_eq!(out.records.len(), 9);
            assert!(out.state.rescaled);
            let r = &out.records[0];
            match loss {
                LossKind::Eq1 => assert!(r.chosen_u.is_none()),
                LossKind::Eq2 | LossKind::Eq4 => assert_eq!(r.chosen_u.as_ref().unwrap().len(), 1),
                LossKind::Eq3 => assert_eq!(r.chosen_u.as_ref().unwrap().len(), 3),
            }
        }
    }

    #[test]
    fn rescale_divides_by_running_means_of_prior_steps() {
        let ds = tiny_dataset(2);
        let mut model = tiny_model(1);
        let out = train(&mut model, &Perceiver::desk(2), &ds, &config(LossKind::Eq1, 1, 4), None).unwrap();
        let ev = &out.lambda_events[1];
        assert_eq!(ev.event, LambdaEventKind::Rescale);
        assert_eq!(ev.step, 4);
        let prior: Vec<&StepRecord> = out.records.iter().filter(|r| r.step < ev.step).collect();
        for l in 0..ev.lambda.len() {
            let mean = prior.iter().map(|r| r.per_layer[l]).sum::<f64>() / prior.len() as f64;
            let want = ev.previous.as_ref().unwrap()[l] / mean;
            assert!((ev.lambda[l] - want).abs() <= 1e-12 * want.abs());
        }
        assert_eq!(out.lambda_events.len(), 2);
    }

    #[test]
    fn epoch_order_is_seeded_permutation() {
        let a = epoch_order(5, 0, 8, 8);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(5, 0, 8, 8));
        assert_ne!(a, epoch_order(5, 1, 8, 8));
        assert_eq!(epoch_order(5, 0, 3, 7).len(), 7);
    }

    #[test]
    fn mismatched_shapes_fail_before_training() {
        let mut model = tiny_model(1);
        let grid = LabelGrid::new(4, 8, vec![0; 32]).unwrap();
        let img = ReferenceImage::new(FeatureTensor::zeros(Shape::new(3, 4, 8))).unwrap();
        let ds = Dataset::new(vec![TrainingPair::new("small", grid, 3, img).unwrap()]).unwrap();
        let err = train(&mut model, &Perceiver::desk(0), &ds, &config(LossKind::Eq1, 1, 1), None).unwrap_err();
        assert!(matches!(err, CrnError::Dimension(ref m) if m.contains("small")));
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let mut model = tiny_model(1);
        let id = model.params().id_of("projection.bias").unwrap();
        model.params_mut().get_mut(id)[0] = f64::NAN;
        let err = train(&mut model, &Perceiver::desk(0), &tiny_dataset(1), &config(LossKind::Eq1, 1, 1), None)
            .unwrap_err();
        assert!(matches!(err, CrnError::NonFiniteLoss { step: 0, .. }));
    }

    #[test]
    fn eq1_rejects_multiple_outputs() {
        assert!(config(LossKind::Eq1, 2, 1).validate().is_err());
        assert_eq!("EQ3".parse::<LossKind>().unwrap(), LossKind::Eq3);
    }

    #[test]
    fn constant_predictor_scores_zero_against_identical_pairs() {
        let grid = LabelGrid::new(8, 16, vec![1; 128]).unwrap();
        let img = FeatureTensor::filled(Shape::new(3, 8, 16), 0.5);
        let pair = TrainingPair::new("a", grid, 3, ReferenceImage::new(img).unwrap()).unwrap();
        let ds = Dataset::new(vec![pair.clone(), pair]).unwrap();
        let report = memorization_report(&tiny_model(1), &ds).unwrap();
        assert_eq!(report.constant_baseline, vec![0.0, 0.0]);
        assert!(!report.beats_baseline_everywhere());
    }
}
