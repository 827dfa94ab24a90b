//! Common interface of the synthesis architectures.

use crate::error::{CrnError, Result};
use crate::layout::SemanticLayout;
use crate::params::{GradStore, ParamStore};
use crate::tensor::{FeatureTensor, Shape};

/// A trainable network mapping a semantic layout to `k` RGB images.
pub trait SynthesisModel {
    /// Values kept by [`SynthesisModel::forward_train`] for the backward pass.
    type Cache;

    /// Architecture tag recorded in checkpoints.
    fn kind(&self) -> &'static str;
    fn num_classes(&self) -> usize;
    fn output_multiplicity(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Errors unless the model can consume `layout`.
    fn check_layout(&self, layout: &SemanticLayout) -> Result<()>;

    fn forward_train(&self, layout: &SemanticLayout) -> Result<(Vec<FeatureTensor>, Self::Cache)>;

    /// Parameter gradients given one gradient tensor per output image.
    fn backward(&self, cache: &Self::Cache, grad_images: &[FeatureTensor]) -> Result<GradStore>;

    fn forward(&self, layout: &SemanticLayout) -> Result<Vec<FeatureTensor>> {
        Ok(self.forward_train(layout)?.0)
    }
}

/// Splits a `3k`-channel projection into `k` consecutive RGB images.
pub fn split_images(projected: &FeatureTensor, k: usize) -> Result<Vec<FeatureTensor>> {
    if projected.channels() != 3 * k {
        return Err(CrnError::Dimension(format!(
            "{} projection channels cannot form {k} images",
            projected.channels()
        )));
    }
    (0..k).map(|u| projected.slice_channels(3 * u, 3)).collect()
}

/// Inverse of [`split_images`].
pub fn stack_images(images: &[FeatureTensor], k: usize) -> Result<FeatureTensor> {
    if images.len() != k {
        return Err(CrnError::Dimension(format!(
            "expected {k} image gradients, got {}",
            images.len()
        )));
    }
    let first = images[0].shape();
    for im in images {
        im.ensure_shape(Shape::new(3, first.height, first.width), "image gradient")?;
    }
    let refs: Vec<&FeatureTensor> = images.iter().collect();
    FeatureTensor::concat_channels(&refs)
}
