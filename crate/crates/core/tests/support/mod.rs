//! Brute-force oracles, random loss instances and finite-difference helpers
//! shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use crn_core::cascade::CascadeConfig;
use crn_core::checkpoint::{AnyModel, ModelConfig};
use crn_core::dataset::TrainingPair;
use crn_core::layout::{ClassMasks, LabelGrid, ReferenceImage};
use crn_core::model::SynthesisModel;
use crn_core::objectives::{
    feature_matching_loss_grad, hindsight_loss_grad, image_space_loss_grad, masked_diversity_loss_grad,
    LayerWeights, LossReport,
};
use crn_core::perceiver::{Perceiver, PerceiverTaps};
use crn_core::tensor::{FeatureTensor, Shape};
use crn_core::trainer::{LossKind, Objective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_RTOL: f64 = 1e-6;
pub const GRAD_RTOL: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;

pub fn rel_close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1e-12)
}

pub fn l1_oracle(a: &FeatureTensor, b: &FeatureTensor) -> f64 {
    let mut s = 0.0;
    for c in 0..a.channels() {
        for y in 0..a.height() {
            for x in 0..a.width() {
                s += (a.get(c, y, x) - b.get(c, y, x)).abs();
            }
        }
    }
    s
}

pub fn eq1_oracle(r: &[FeatureTensor], s: &[FeatureTensor], lambda: &[f64]) -> f64 {
    (0..r.len()).map(|l| lambda[l] * l1_oracle(&r[l], &s[l])).sum()
}

pub fn eq2_oracle(r: &[FeatureTensor], syn: &[Vec<FeatureTensor>], lambda: &[f64]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (u, s) in syn.iter().enumerate() {
        let v = eq1_oracle(r, s, lambda);
        if v < best.0 {
            best = (v, u);
        }
    }
    best
}

/// Masked term of class `p` for hypothesis `s`, summed over taps.
fn class_term(r: &[FeatureTensor], s: &[FeatureTensor], lambda: &[f64], masks: &[FeatureTensor], p: usize) -> f64 {
    let mut total = 0.0;
    for l in 0..r.len() {
        let mut t = 0.0;
        for j in 0..r[l].channels() {
            for y in 0..r[l].height() {
                for x in 0..r[l].width() {
                    t += (masks[l].get(p, y, x) * (r[l].get(j, y, x) - s[l].get(j, y, x))).abs();
                }
            }
        }
        total += lambda[l] * t;
    }
    total
}

/// Minimum over all `k^c` assignments of hypotheses to classes.
pub fn eq3_oracle(
    r: &[FeatureTensor],
    syn: &[Vec<FeatureTensor>],
    lambda: &[f64],
    masks: &[FeatureTensor],
) -> (f64, Vec<usize>) {
    let c = masks[0].channels();
    let k = syn.len();
    let terms: Vec<Vec<f64>> = syn
        .iter()
        .map(|s| (0..c).map(|p| class_term(r, s, lambda, masks, p)).collect())
        .collect();
    let mut best = (f64::INFINITY, vec![0; c]);
    for code in 0..k.pow(c as u32) {
        let mut assign = vec![0; c];
        let mut rest = code;
        for p in (0..c).rev() {
            assign[p] = rest % k;
            rest /= k;
        }
        let v: f64 = (0..c).map(|p| terms[assign[p]][p]).sum();
        if v < best.0 {
            best = (v, assign);
        }
    }
    best
}

pub fn eq4_oracle(reference: &FeatureTensor, syn: &FeatureTensor, lambda_0: f64) -> f64 {
    lambda_0 * l1_oracle(reference, syn)
}

/// Random taps, hypotheses and partition masks.
#[derive(Debug, Clone)]
pub struct Instance {
    pub lambda: Vec<f64>,
    pub reference: Vec<FeatureTensor>,
    pub hypotheses: Vec<Vec<FeatureTensor>>,
    pub masks: Vec<FeatureTensor>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> FeatureTensor {
    FeatureTensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

impl Instance {
    pub fn random(seed: u64, max_classes: usize, max_k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = rng.gen_range(1..=3);
        let classes = rng.gen_range(1..=max_classes);
        let k = rng.gen_range(1..=max_k);
        let shapes: Vec<Shape> = (0..levels)
            .map(|_| Shape::new(rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=5)))
            .collect();
        let lambda = (0..levels).map(|_| rng.gen_range(0.01..2.0)).collect();
        let reference = shapes.iter().map(|&s| random_tensor(&mut rng, s)).collect();
        let hypotheses = (0..k)
            .map(|_| shapes.iter().map(|&s| random_tensor(&mut rng, s)).collect())
            .collect();
        let masks = shapes
            .iter()
            .map(|s| {
                let raw = FeatureTensor::from_fn(s.with_channels(classes), |_, _, _| rng.gen_range(0.0..1.0));
                let mut m = raw.clone();
                for y in 0..s.height {
                    for x in 0..s.width {
                        let total: f64 = (0..classes).map(|p| raw.get(p, y, x)).sum();
                        for p in 0..classes {
                            m.set(p, y, x, raw.get(p, y, x) / total);
                        }
                    }
                }
                m
            })
            .collect();
        Instance {
            lambda,
            reference,
            hypotheses,
            masks,
        }
    }

    pub fn weights(&self) -> LayerWeights {
        LayerWeights::new(self.lambda.clone()).unwrap()
    }

    pub fn ref_taps(&self) -> PerceiverTaps {
        PerceiverTaps::new(self.reference.clone())
    }

    pub fn syn_taps(&self) -> Vec<PerceiverTaps> {
        self.hypotheses.iter().map(|h| PerceiverTaps::new(h.clone())).collect()
    }

    pub fn class_masks(&self) -> ClassMasks {
        ClassMasks::from_levels(self.masks.clone(), 1e-9).unwrap()
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub rel_error: f64,
    pub coordinates: usize,
    /// Smallest `|reference - synthesized|` over the selected L1 terms, when known.
    pub min_margin: Option<f64>,
    /// Fixture seeds skipped because two step sizes disagreed (a kink was crossed).
    pub rejected: usize,
}

/// Central differences at `h` and `h / 2` for each coordinate. Returns `None`
/// when the two disagree by more than `1e-5 * scale`, i.e. a kink lies
/// within the stencil.
fn central_differences(
    coords: usize,
    h: f64,
    scale: f64,
    mut eval: impl FnMut(usize, f64) -> f64,
) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(coords);
    for i in 0..coords {
        let d1 = (eval(i, h) - eval(i, -h)) / (2.0 * h);
        let d2 = (eval(i, h / 2.0) - eval(i, -h / 2.0)) / h;
        if (d1 - d2).abs() > 1e-5 * scale {
            return None;
        }
        out.push(d1);
    }
    Some(out)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn losses_k(kind: LossKind) -> usize {
    match kind {
        LossKind::Eq1 | LossKind::Eq4 => 1,
        LossKind::Eq2 | LossKind::Eq3 => 2,
    }
}

fn flatten(images: &[FeatureTensor]) -> Vec<f64> {
    images.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Offset of magnitude in `[0.05, 0.25]` with random sign.
fn offset(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.gen_range(0.05..0.25);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Hard left/right class split at every tap resolution.
fn split_masks(shapes: &[Shape]) -> ClassMasks {
    let levels = shapes
        .iter()
        .map(|s| FeatureTensor::from_fn(s.with_channels(2), |p, _, x| ((x < s.width / 2) == (p == 0)) as u8 as f64))
        .collect();
    ClassMasks::from_levels(levels, 0.0).unwrap()
}

/// Loss and synthesized-tap gradients for one kind on fixed reference taps.
fn tap_loss(
    kind: LossKind,
    reference: &PerceiverTaps,
    syn: &[PerceiverTaps],
    weights: &LayerWeights,
    masks: &ClassMasks,
) -> (LossReport, Vec<Vec<FeatureTensor>>) {
    match kind {
        LossKind::Eq1 => {
            let (r, g) = feature_matching_loss_grad(reference, &syn[0], weights).unwrap();
            (r, vec![g])
        }
        LossKind::Eq2 => hindsight_loss_grad(reference, syn, weights).unwrap(),
        LossKind::Eq3 => masked_diversity_loss_grad(reference, syn, weights, masks).unwrap(),
        LossKind::Eq4 => {
            let (r, g) = image_space_loss_grad(&reference.taps[0], &syn[0].taps[0], weights.values()[0]).unwrap();
            (r, vec![vec![g]])
        }
    }
}

/// Gradient of a loss with respect to synthesized pixels, through the desk
/// perceiver, against central differences.
///
/// Reference taps are the synthesized taps of the hypothesis meant to win
/// each region, offset by at least 0.05 elementwise, so every difference
/// entering a selected L1 term stays clear of zero.
pub fn perceiver_grad_check(kind: LossKind, perceiver: &Perceiver, seed: u64) -> GradCheck {
    let (h, w) = (8, 8);
    let k = losses_k(kind);
    let mut rejected = 0;
    for attempt in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(attempt));
        let images: Vec<FeatureTensor> = (0..k)
            .map(|_| FeatureTensor::from_fn(Shape::new(3, h, w), |_, _, _| rng.gen_range(0.0..1.0)))
            .collect();
        let taps = |ims: &[FeatureTensor]| -> Vec<PerceiverTaps> {
            ims.iter()
                .map(|im| {
                    if kind == LossKind::Eq4 {
                        PerceiverTaps::new(vec![im.clone()])
                    } else {
                        perceiver.extract_taps(im).unwrap()
                    }
                })
                .collect()
        };
        let syn = taps(&images);
        let shapes = syn[0].shapes();
        let masks = split_masks(&shapes);
        let mut reference = syn[0].clone();
        for (l, t) in reference.taps.iter_mut().enumerate() {
            let wl = t.width();
            for c in 0..t.channels() {
                for y in 0..t.height() {
                    for x in 0..wl {
                        let owner = if kind == LossKind::Eq3 && x >= wl / 2 { 1 } else { 0 };
                        let v = syn[owner].taps[l].get(c, y, x) + offset(&mut rng);
                        t.set(c, y, x, v);
                    }
                }
            }
        }
        let weights = if kind == LossKind::Eq4 {
            LayerWeights::new(vec![1.0 / (3 * h * w) as f64]).unwrap()
        } else {
            LayerWeights::new(shapes.iter().map(|s| 1.0 / s.numel() as f64).collect()).unwrap()
        };
        let mut margin = f64::INFINITY;
        for (l, t) in reference.taps.iter().enumerate() {
            for c in 0..t.channels() {
                for y in 0..t.height() {
                    for x in 0..t.width() {
                        let owner = if kind == LossKind::Eq3 && x >= t.width() / 2 { 1 } else { 0 };
                        margin = margin.min((t.get(c, y, x) - syn[owner].taps[l].get(c, y, x)).abs());
                    }
                }
            }
        }
        let (report, tap_grads) = tap_loss(kind, &reference, &syn, &weights, &masks);
        if kind == LossKind::Eq3 && report.chosen_u.as_deref() != Some(&[0, 1][..]) {
            rejected += 1;
            continue;
        }
        if kind == LossKind::Eq2 && report.chosen_u.as_deref() != Some(&[0][..]) {
            rejected += 1;
            continue;
        }
        let analytic: Vec<FeatureTensor> = images
            .iter()
            .zip(&tap_grads)
            .map(|(im, g)| {
                if kind == LossKind::Eq4 {
                    g[0].clone()
                } else {
                    let (_, cache) = perceiver.extract_taps_cached(im).unwrap();
                    perceiver.backward(&cache, g).unwrap()
                }
            })
            .collect();
        let analytic = flatten(&analytic);
        let numel = 3 * h * w;
        let numeric = central_differences(k * numel, 1e-6, max_abs(&analytic), |i, step| {
            let mut ims = images.clone();
            ims[i / numel].data_mut()[i % numel] += step;
            tap_loss(kind, &reference, &taps(&ims), &weights, &masks).0.total
        });
        match numeric {
            Some(numeric) => {
                return GradCheck {
                    rel_error: rel_error(&analytic, &numeric),
                    coordinates: analytic.len(),
                    min_margin: Some(margin),
                    rejected,
                }
            }
            None => rejected += 1,
        }
    }
    GradCheck {
        rel_error: f64::INFINITY,
        coordinates: 0,
        min_margin: None,
        rejected,
    }
}

/// A two-module cascade at 8x8 with three classes.
pub fn small_cascade(k: usize) -> ModelConfig {
    ModelConfig::Crn(CascadeConfig {
        base_h: 4,
        base_w: 4,
        module_count: 2,
        channels: vec![6, 5],
        num_classes: 3,
        output_multiplicity: k,
        lrelu_slope: 0.2,
    })
}

pub fn small_pair(seed: u64) -> TrainingPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..64).map(|i| if i % 8 < 3 { 0 } else if i / 8 < 4 { 1 } else { 2 }).collect();
    let grid = LabelGrid::new(8, 8, labels).unwrap();
    let image = ReferenceImage::new(FeatureTensor::from_fn(Shape::new(3, 8, 8), |_, _, _| rng.gen_range(0.0..1.0)))
        .unwrap();
    TrainingPair::new("fixture", grid, 3, image).unwrap()
}

/// Parameter gradient of a loss through a refinement cascade and the desk
/// perceiver, against central differences on sampled parameters.
pub fn model_grad_check(kind: LossKind, perceiver: &Perceiver, seed: u64) -> GradCheck {
    let k = losses_k(kind);
    let objective = Objective::new(kind, perceiver);
    let lambda = objective.initial_lambda((8, 8)).unwrap();
    let mut rejected = 0;
    for attempt in 0..8u64 {
        let pair = small_pair(seed.wrapping_mul(17).wrapping_add(attempt));
        let model = AnyModel::build(&small_cascade(k), seed.wrapping_add(attempt)).unwrap();
        let (images, cache) = model.forward_train(&pair.layout).unwrap();
        let (_, image_grads) = objective.gradients(&pair, &images, &lambda).unwrap();
        let grads = model.backward(&cache, &image_grads).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut coords = Vec::new();
        for (t, e) in model.params().entries().iter().enumerate() {
            for _ in 0..3 {
                coords.push((t, rng.gen_range(0..e.data.len())));
            }
        }
        let analytic: Vec<f64> = coords.iter().map(|&(t, i)| grads.buffers()[t][i]).collect();
        let numeric = central_differences(coords.len(), 1e-5, max_abs(&analytic), |c, step| {
            let mut m = model.clone();
            let (t, i) = coords[c];
            m.params_mut().entries_mut()[t].data[i] += step;
            let ims = m.forward(&pair.layout).unwrap();
            objective.evaluate(&pair, &ims, &lambda).unwrap().total
        });
        match numeric {
            Some(numeric) => {
                return GradCheck {
                    rel_error: rel_error(&analytic, &numeric),
                    coordinates: analytic.len(),
                    min_margin: None,
                    rejected,
                }
            }
            None => rejected += 1,
        }
    }
    GradCheck {
        rel_error: f64::INFINITY,
        coordinates: 0,
        min_margin: None,
        rejected,
    }
}

#[derive(Debug, Clone)]
pub struct LambdaCheck {
    /// Largest relative gap between the logged new λ and previous λ over the
    /// mean recomputed from the metrics log.
    pub ratio_error: f64,
    /// Largest `|mean · λ_new / λ_old − 1|`.
    pub plug_back_error: f64,
    pub rescale_step: u64,
    pub steps_averaged: usize,
}

fn jsonl(path: &std::path::Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn floats(v: &serde_json::Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

/// Recomputes the rescale from the logs a training run wrote to `dir`.
pub fn lambda_schedule_check(dir: &std::path::Path) -> Option<LambdaCheck> {
    let events = jsonl(&dir.join(crn_core::trainer::LAMBDA_FILE));
    let rescale = events.iter().find(|e| e["event"] == "rescale")?;
    let init = events.iter().find(|e| e["event"] == "init")?;
    let step = rescale["step"].as_u64()?;
    let old = floats(&rescale["previous"]);
    let new = floats(&rescale["lambda"]);
    if floats(&init["lambda"]) != old {
        return None;
    }
    let prior: Vec<Vec<f64>> = jsonl(&dir.join(crn_core::trainer::METRICS_FILE))
        .iter()
        .filter(|r| r["step"].as_u64().unwrap() < step)
        .map(|r| floats(&r["per_layer"]))
        .collect();
    let mut ratio_error: f64 = 0.0;
    let mut plug_back_error: f64 = 0.0;
    for l in 0..old.len() {
        let mean = prior.iter().map(|p| p[l]).sum::<f64>() / prior.len() as f64;
        let expected = old[l] / mean;
        ratio_error = ratio_error.max((new[l] - expected).abs() / expected.abs());
        plug_back_error = plug_back_error.max((mean * new[l] / old[l] - 1.0).abs());
    }
    Some(LambdaCheck {
        ratio_error,
        plug_back_error,
        rescale_step: step,
        steps_averaged: prior.len(),
    })
}

/// Relative paths of every file under `root`, sorted.
pub fn tree_files(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    fn walk(base: &std::path::Path, dir: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push(p.strip_prefix(base).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// True when both trees hold the same files with identical bytes.
pub fn trees_identical(a: &std::path::Path, b: &std::path::Path) -> bool {
    let files = tree_files(a);
    files == tree_files(b)
        && !files.is_empty()
        && files
            .iter()
            .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
}
