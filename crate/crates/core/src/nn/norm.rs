use crate::error::Result;
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{FeatureTensor, Shape};

const EPS: f64 = 1e-5;

/// Layer normalization over all positions and channels of one sample,
/// followed by a learned per-channel gain and offset.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub channels: usize,
    pub gain: ParamId,
    pub offset: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: FeatureTensor,
    inv_std: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gain = store.filled(format!("{name}.gain"), vec![channels], 1.0);
        let offset = store.zeros(format!("{name}.offset"), vec![channels]);
        LayerNorm {
            channels,
            gain,
            offset,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureTensor) -> Result<(FeatureTensor, LayerNormCache)> {
        x.ensure_shape(
            Shape::new(self.channels, x.height(), x.width()),
            "layer norm input",
        )?;
        let n = x.numel() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + EPS).sqrt();
        let normalized = x.map(|v| (v - mean) * inv_std);
        let mut out = normalized.clone();
        let gain = store.get(self.gain);
        let offset = store.get(self.offset);
        for c in 0..self.channels {
            let (g, b) = (gain[c], offset[c]);
            for v in out.channel_mut(c) {
                *v = g * *v + b;
            }
        }
        Ok((out, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        grad_out: &FeatureTensor,
        grads: &mut GradStore,
    ) -> Result<FeatureTensor> {
        grad_out.ensure_shape(cache.normalized.shape(), "layer norm output gradient")?;
        let gain = store.get(self.gain);
        let mut dnorm = grad_out.clone();
        {
            let (dg, db) = (self.gain, self.offset);
            for c in 0..self.channels {
                let go = grad_out.channel(c);
                let xh = cache.normalized.channel(c);
                let sg: f64 = go.iter().zip(xh).map(|(a, b)| a * b).sum();
                let sb: f64 = go.iter().sum();
                grads.get_mut(dg)[c] += sg;
                grads.get_mut(db)[c] += sb;
                for v in dnorm.channel_mut(c) {
                    *v *= gain[c];
                }
            }
        }
        let n = dnorm.numel() as f64;
        let sum_d = dnorm.sum();
        let sum_dx: f64 = dnorm
            .data()
            .iter()
            .zip(cache.normalized.data())
            .map(|(a, b)| a * b)
            .sum();
        let scale = cache.inv_std / n;
        let mut dx = dnorm;
        for (d, &xh) in dx.data_mut().iter_mut().zip(cache.normalized.data()) {
            *d = scale * (n * *d - sum_d - xh * sum_dx);
        }
        Ok(dx)
    }
}
