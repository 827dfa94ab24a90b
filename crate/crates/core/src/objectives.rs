//! Training objectives: perceptual feature matching, the hindsight
//! (best-of-k) loss, the class-masked diversity loss and the image-space
//! baseline loss, plus the per-layer weight schedule.
//!
//! Each loss has a `*_grad` variant that also returns the gradient with
//! respect to every synthesized tap. Minima over hypotheses pick the lowest
//! index on ties and pass gradient only to the selected hypothesis.

use serde::{Deserialize, Serialize};

use crate::error::{CrnError, Result};
use crate::layout::{check_partition, ClassMasks};
use crate::perceiver::{PerceiverSpec, PerceiverTaps};
use crate::tensor::{FeatureTensor, Shape};

/// Largest tolerated deviation of class masks from a partition of unity.
pub const MASK_PARTITION_TOLERANCE: f64 = 1e-5;

/// Nonnegative weight `λ_l` per perceiver tap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerWeights(Vec<f64>);

impl LayerWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CrnError::Argument("layer weights cannot be empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(CrnError::Argument(format!("layer weight {v} must be finite and >= 0")));
        }
        Ok(LayerWeights(values))
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `λ_l = 1 / numel(Φ_l)` for an input of the given resolution.
pub fn lambda_init(spec: &PerceiverSpec, sample_resolution: (usize, usize)) -> Result<LayerWeights> {
    let shapes = spec.tap_shapes(sample_resolution.0, sample_resolution.1)?;
    LayerWeights::new(shapes.iter().map(|s| 1.0 / s.numel() as f64).collect())
}

/// Divides each weight by the running mean of its weighted term, so every
/// layer's mean contribution over those statistics becomes one.
pub fn lambda_rescale(weights: &LayerWeights, per_term_running_means: &[f64]) -> Result<LayerWeights> {
    if per_term_running_means.len() != weights.len() {
        return Err(CrnError::Argument(format!(
            "{} running means for {} layer weights",
            per_term_running_means.len(),
            weights.len()
        )));
    }
    for (l, &m) in per_term_running_means.iter().enumerate() {
        if !(m.is_finite() && m > 0.0) {
            return Err(CrnError::DegenerateStatistics(format!(
                "running mean {m} for layer {l} must be positive and finite"
            )));
        }
    }
    LayerWeights::new(
        weights
            .values()
            .iter()
            .zip(per_term_running_means)
            .map(|(w, m)| w / m)
            .collect(),
    )
}

/// Loss value with its breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Weighted term per tap, for the selected hypothesis (or classes).
    pub per_layer: Vec<f64>,
    /// Selected weighted term per class (masked diversity loss).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<f64>>,
    /// Unmasked weighted loss of each hypothesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_hypothesis: Option<Vec<f64>>,
    /// Selected hypothesis: one entry for the hindsight loss, one per class
    /// for the masked diversity loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_u: Option<Vec<usize>>,
}

impl LossReport {
    fn from_layers(per_layer: Vec<f64>) -> Self {
        LossReport {
            total: per_layer.iter().sum(),
            per_layer,
            per_class: None,
            per_hypothesis: None,
            chosen_u: None,
        }
    }
}

fn check_taps(taps_ref: &PerceiverTaps, taps_syn: &PerceiverTaps, weights: &LayerWeights) -> Result<()> {
    if taps_ref.len() != weights.len() || taps_syn.len() != weights.len() {
        return Err(CrnError::Dimension(format!(
            "{} reference taps, {} synthesized taps, {} weights",
            taps_ref.len(),
            taps_syn.len(),
            weights.len()
        )));
    }
    for (l, (a, b)) in taps_ref.taps.iter().zip(&taps_syn.taps).enumerate() {
        if a.shape() != b.shape() {
            return Err(CrnError::Dimension(format!(
                "tap {l}: reference {} vs synthesized {}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

fn check_hypotheses(taps_ref: &PerceiverTaps, taps_syn: &[PerceiverTaps], weights: &LayerWeights) -> Result<()> {
    if taps_syn.is_empty() {
        return Err(CrnError::Argument("need at least one synthesized hypothesis".into()));
    }
    taps_syn.iter().try_for_each(|s| check_taps(taps_ref, s, weights))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `λ · sign(syn - ref)` elementwise.
fn l1_grad(reference: &FeatureTensor, synthesized: &FeatureTensor, lambda: f64) -> FeatureTensor {
    let mut g = synthesized.clone();
    for (gv, &r) in g.data_mut().iter_mut().zip(reference.data()) {
        *gv = lambda * sign(*gv - r);
    }
    g
}

fn per_layer_terms(taps_ref: &PerceiverTaps, taps_syn: &PerceiverTaps, weights: &LayerWeights) -> Vec<f64> {
    taps_ref
        .taps
        .iter()
        .zip(&taps_syn.taps)
        .zip(weights.values())
        .map(|((r, s), &w)| w * l1(r, s))
        .collect()
}

/// `Σ_l λ_l ‖Φ_l(I) − Φ_l(g)‖₁`.
pub fn feature_matching_loss(
    taps_ref: &PerceiverTaps,
    taps_syn: &PerceiverTaps,
    weights: &LayerWeights,
) -> Result<LossReport> {
    check_taps(taps_ref, taps_syn, weights)?;
    Ok(LossReport::from_layers(per_layer_terms(taps_ref, taps_syn, weights)))
}

pub fn feature_matching_loss_grad(
    taps_ref: &PerceiverTaps,
    taps_syn: &PerceiverTaps,
    weights: &LayerWeights,
) -> Result<(LossReport, Vec<FeatureTensor>)> {
    let report = feature_matching_loss(taps_ref, taps_syn, weights)?;
    let grads = taps_ref
        .taps
        .iter()
        .zip(&taps_syn.taps)
        .zip(weights.values())
        .map(|((r, s), &w)| l1_grad(r, s, w))
        .collect();
    Ok((report, grads))
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn zero_grads(taps: &PerceiverTaps) -> Vec<FeatureTensor> {
    taps.taps.iter().map(|t| FeatureTensor::zeros(t.shape())).collect()
}

/// `min_u Σ_l λ_l ‖Φ_l(I) − Φ_l(g_u)‖₁`.
pub fn hindsight_loss(
    taps_ref: &PerceiverTaps,
    taps_syn: &[PerceiverTaps],
    weights: &LayerWeights,
) -> Result<LossReport> {
    check_hypotheses(taps_ref, taps_syn, weights)?;
    let layers: Vec<Vec<f64>> = taps_syn
        .iter()
        .map(|s| per_layer_terms(taps_ref, s, weights))
        .collect();
    let totals: Vec<f64> = layers.iter().map(|l| l.iter().sum()).collect();
    let best = argmin(&totals);
    let mut report = LossReport::from_layers(layers[best].clone());
    report.total = totals[best];
    report.per_hypothesis = Some(totals);
    report.chosen_u = Some(vec![best]);
    Ok(report)
}

pub fn hindsight_loss_grad(
    taps_ref: &PerceiverTaps,
    taps_syn: &[PerceiverTaps],
    weights: &LayerWeights,
) -> Result<(LossReport, Vec<Vec<FeatureTensor>>)> {
    let report = hindsight_loss(taps_ref, taps_syn, weights)?;
    let best = report.chosen_u.as_ref().expect("set by hindsight_loss")[0];
    let grads = taps_syn
        .iter()
        .enumerate()
        .map(|(u, s)| {
            if u == best {
                feature_matching_loss_grad(taps_ref, s, weights).map(|(_, g)| g)
            } else {
                Ok(zero_grads(s))
            }
        })
        .collect::<Result<_>>()?;
    Ok((report, grads))
}

fn check_masks(taps_ref: &PerceiverTaps, masks: &ClassMasks) -> Result<()> {
    if masks.num_levels() != taps_ref.len() {
        return Err(CrnError::Dimension(format!(
            "{} mask levels for {} taps",
            masks.num_levels(),
            taps_ref.len()
        )));
    }
    for (l, tap) in taps_ref.taps.iter().enumerate() {
        let level = masks.level(l);
        if level.height() != tap.height() || level.width() != tap.width() {
            return Err(CrnError::Dimension(format!(
                "mask level {l} is {}x{}, tap is {}x{}",
                level.height(),
                level.width(),
                tap.height(),
                tap.width()
            )));
        }
        check_partition(level, MASK_PARTITION_TOLERANCE)?;
    }
    Ok(())
}

/// Per-pixel `Σ_j |Φ^j(I) − Φ^j(g)|` of one tap.
fn channel_summed_abs(reference: &FeatureTensor, synthesized: &FeatureTensor) -> Vec<f64> {
    let plane = reference.shape().plane();
    let mut out = vec![0.0; plane];
    for c in 0..reference.channels() {
        for ((o, r), s) in out.iter_mut().zip(reference.channel(c)).zip(synthesized.channel(c)) {
            *o += (r - s).abs();
        }
    }
    out
}

/// Same reduction order as the masked terms, so a single all-ones class
/// reproduces the unmasked loss bit for bit.
fn l1(reference: &FeatureTensor, synthesized: &FeatureTensor) -> f64 {
    channel_summed_abs(reference, synthesized).iter().sum()
}

/// Weighted masked terms `term[u][p][l]`.
fn masked_terms(
    taps_ref: &PerceiverTaps,
    taps_syn: &[PerceiverTaps],
    weights: &LayerWeights,
    masks: &ClassMasks,
) -> Vec<Vec<Vec<f64>>> {
    let c = masks.num_classes();
    taps_syn
        .iter()
        .map(|syn| {
            let mut per_class = vec![vec![0.0; taps_ref.len()]; c];
            for (l, (r, s)) in taps_ref.taps.iter().zip(&syn.taps).enumerate() {
                let diff = channel_summed_abs(r, s);
                let level = masks.level(l);
                let lambda = weights.values()[l];
                for (p, row) in per_class.iter_mut().enumerate() {
                    let m = level.channel(p);
                    row[l] = lambda * m.iter().zip(&diff).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            per_class
        })
        .collect()
}

/// `Σ_p min_u Σ_l λ_l Σ_j ‖L_p^l ⊙ (Φ_l^j(I) − Φ_l^j(g_u))‖₁`.
///
/// `masks` must have one level per tap at that tap's resolution, each a
/// partition of unity over classes.
pub fn masked_diversity_loss(
    taps_ref: &PerceiverTaps,
    taps_syn: &[PerceiverTaps],
    weights: &LayerWeights,
    masks: &ClassMasks,
) -> Result<LossReport> {
    check_hypotheses(taps_ref, taps_syn, weights)?;
    check_masks(taps_ref, masks)?;
    let terms = masked_terms(taps_ref, taps_syn, weights, masks);
    let c = masks.num_classes();
    let mut per_layer = vec![0.0; taps_ref.len()];
    let mut per_class = Vec::with_capacity(c);
    let mut chosen = Vec::with_capacity(c);
    for p in 0..c {
        let sums: Vec<f64> = terms.iter().map(|t| t[p].iter().sum()).collect();
        let best = argmin(&sums);
        for (acc, v) in per_layer.iter_mut().zip(&terms[best][p]) {
            *acc += v;
        }
        per_class.push(sums[best]);
        chosen.push(best);
    }
    let per_hypothesis = terms
        .iter()
        .map(|t| t.iter().map(|row| row.iter().sum::<f64>()).sum())
        .collect();
    Ok(LossReport {
        total: per_class.iter().sum(),
        per_layer,
        per_class: Some(per_class),
        per_hypothesis: Some(per_hypothesis),
        chosen_u: Some(chosen),
    })
}

pub fn masked_diversity_loss_grad(
    taps_ref: &PerceiverTaps,
    taps_syn: &[PerceiverTaps],
    weights: &LayerWeights,
    masks: &ClassMasks,
) -> Result<(LossReport, Vec<Vec<FeatureTensor>>)> {
    let report = masked_diversity_loss(taps_ref, taps_syn, weights, masks)?;
    let chosen = report.chosen_u.as_ref().expect("set by masked_diversity_loss");
    let mut grads = Vec::with_capacity(taps_syn.len());
    for (u, syn) in taps_syn.iter().enumerate() {
        let classes: Vec<usize> = (0..chosen.len()).filter(|&p| chosen[p] == u).collect();
        if classes.is_empty() {
            grads.push(zero_grads(syn));
            continue;
        }
        let mut per_tap = Vec::with_capacity(syn.len());
        for (l, (r, s)) in taps_ref.taps.iter().zip(&syn.taps).enumerate() {
            let level = masks.level(l);
            let mut weight_map = vec![0.0; level.shape().plane()];
            for &p in &classes {
                for (w, m) in weight_map.iter_mut().zip(level.channel(p)) {
                    *w += m;
                }
            }
            let mut g = l1_grad(r, s, weights.values()[l]);
            for ch in 0..g.channels() {
                for (gv, w) in g.channel_mut(ch).iter_mut().zip(&weight_map) {
                    *gv *= w;
                }
            }
            per_tap.push(g);
        }
        grads.push(per_tap);
    }
    Ok((report, grads))
}

/// `λ_0 ‖I − g‖₁` on pixels only.
pub fn image_space_loss(image_ref: &FeatureTensor, image_syn: &FeatureTensor, lambda_0: f64) -> Result<LossReport> {
    if image_ref.shape() != image_syn.shape() {
        return Err(CrnError::Dimension(format!(
            "reference {} vs synthesized {}",
            image_ref.shape(),
            image_syn.shape()
        )));
    }
    Ok(LossReport::from_layers(vec![lambda_0 * l1(image_ref, image_syn)]))
}

pub fn image_space_loss_grad(
    image_ref: &FeatureTensor,
    image_syn: &FeatureTensor,
    lambda_0: f64,
) -> Result<(LossReport, FeatureTensor)> {
    let report = image_space_loss(image_ref, image_syn, lambda_0)?;
    Ok((report, l1_grad(image_ref, image_syn, lambda_0)))
}

/// `1 / numel` of an image, the initial `λ_0`.
pub fn image_lambda(shape: Shape) -> f64 {
    1.0 / shape.numel() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceiver::Perceiver;

    fn scalar_taps(v: f64) -> PerceiverTaps {
        PerceiverTaps::new(vec![FeatureTensor::filled(Shape::new(1, 1, 1), v)])
    }

    #[test]
    fn lambda_init_is_inverse_element_count() {
        let spec = Perceiver::desk(0).spec().clone();
        let w = lambda_init(&spec, (4, 8)).unwrap();
        assert_eq!(w.values()[0], 1.0 / 96.0);
        let shapes = spec.tap_shapes(4, 8).unwrap();
        for (l, s) in shapes.iter().enumerate() {
            assert!((w.values()[l] * s.numel() as f64 - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn lambda_for_thousand_elements() {
        let shape = Shape::new(10, 10, 10);
        assert_eq!(1.0 / shape.numel() as f64, 1e-3);
    }

    #[test]
    fn rescale_examples() {
        let w = LayerWeights::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(lambda_rescale(&w, &[1.0, 1.0]).unwrap(), w);
        let ones = LayerWeights::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(lambda_rescale(&ones, &[2.0, 0.5]).unwrap().values(), &[0.5, 2.0]);
        assert!(matches!(
            lambda_rescale(&ones, &[1.0, 0.0]),
            Err(CrnError::DegenerateStatistics(_))
        ));
        assert!(matches!(
            lambda_rescale(&ones, &[-1.0, 1.0]),
            Err(CrnError::DegenerateStatistics(_))
        ));
    }

    #[test]
    fn scalar_taps_difference() {
        let w = LayerWeights::uniform(1, 1.0).unwrap();
        let r = feature_matching_loss(&scalar_taps(0.3), &scalar_taps(0.7), &w).unwrap();
        assert!((r.total - 0.4).abs() < 1e-15);
        let z = feature_matching_loss(&scalar_taps(0.3), &scalar_taps(0.3), &w).unwrap();
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn hindsight_picks_exact_match() {
        let w = LayerWeights::uniform(1, 1.0).unwrap();
        let r = hindsight_loss(&scalar_taps(0.5), &[scalar_taps(0.9), scalar_taps(0.5)], &w).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.chosen_u, Some(vec![1]));
    }

    #[test]
    fn hindsight_ties_pick_lowest_index() {
        let w = LayerWeights::uniform(1, 1.0).unwrap();
        let r = hindsight_loss(&scalar_taps(0.5), &[scalar_taps(0.6), scalar_taps(0.4)], &w).unwrap();
        assert_eq!(r.chosen_u, Some(vec![0]));
    }

    #[test]
    fn hindsight_rejects_empty_collection() {
        let w = LayerWeights::uniform(1, 1.0).unwrap();
        assert!(matches!(hindsight_loss(&scalar_taps(0.5), &[], &w), Err(CrnError::Argument(_))));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let w = LayerWeights::uniform(1, 1.0).unwrap();
        let other = PerceiverTaps::new(vec![FeatureTensor::zeros(Shape::new(1, 2, 1))]);
        assert!(matches!(
            feature_matching_loss(&scalar_taps(0.0), &other, &w),
            Err(CrnError::Dimension(_))
        ));
        assert!(matches!(
            image_space_loss(&FeatureTensor::zeros(Shape::new(3, 2, 2)), &FeatureTensor::zeros(Shape::new(3, 2, 4)), 1.0),
            Err(CrnError::Dimension(_))
        ));
    }

    #[test]
    fn broken_partition_is_rejected() {
        let w = LayerWeights::uniform(1, 1.0).unwrap();
        let bad = FeatureTensor::from_vec(Shape::new(2, 1, 1), vec![0.5, 0.6]).unwrap();
        assert!(ClassMasks::from_levels(vec![bad.clone()], 0.2).is_ok());
        let masks = ClassMasks::from_levels(vec![bad], 0.2).unwrap();
        let err = masked_diversity_loss(&scalar_taps(0.0), &[scalar_taps(1.0)], &w, &masks).unwrap_err();
        assert!(matches!(err, CrnError::Invariant(_)));
    }

    #[test]
    fn image_space_normalized_l1() {
        let shape = Shape::new(3, 4, 8);
        let r = image_space_loss(
            &FeatureTensor::zeros(shape),
            &FeatureTensor::filled(shape, 1.0),
            image_lambda(shape),
        )
        .unwrap();
        assert!((r.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_expected_keys() {
        let w = LayerWeights::uniform(1, 1.0).unwrap();
        let r = hindsight_loss(&scalar_taps(0.5), &[scalar_taps(0.9)], &w).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["total", "per_layer", "chosen_u"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: LossReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
