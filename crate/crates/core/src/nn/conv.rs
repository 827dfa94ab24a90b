use rand::Rng;

use super::gemm::matmul;
use crate::error::Result;
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{FeatureTensor, Shape};

/// Square stride-1 convolution with zero "same" padding and optional dilation.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    /// Registers `{name}.weight` (`out x in x k x k`) and `{name}.bias` in `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        assert!(dilation >= 1);
        let fan_in = in_channels * kernel * kernel;
        let weight = store.fan_in_uniform(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = store.zeros(format!("{name}.bias"), vec![out_channels]);
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight,
            bias,
        }
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        kernel * kernel * in_channels * out_channels + out_channels
    }

    fn check_input(&self, x: &FeatureTensor) -> Result<()> {
        x.ensure_shape(
            Shape::new(self.in_channels, x.height(), x.width()),
            "convolution input",
        )
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureTensor) -> Result<FeatureTensor> {
        self.check_input(x)?;
        let plane = x.shape().plane();
        let k = self.in_channels * self.kernel * self.kernel;
        let col;
        let col_ref: &[f64] = if self.kernel == 1 {
            x.data()
        } else {
            col = im2col(x, self.kernel, self.dilation);
            &col
        };
        let mut out = FeatureTensor::zeros(Shape::new(self.out_channels, x.height(), x.width()));
        matmul(
            self.out_channels,
            k,
            plane,
            store.get(self.weight),
            false,
            col_ref,
            false,
            out.data_mut(),
            false,
        );
        let bias = store.get(self.bias);
        for (o, &b) in bias.iter().enumerate() {
            if b != 0.0 {
                for v in out.channel_mut(o) {
                    *v += b;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &FeatureTensor,
        grad_out: &FeatureTensor,
        grads: &mut GradStore,
    ) -> Result<FeatureTensor> {
        self.check_input(x)?;
        grad_out.ensure_shape(
            Shape::new(self.out_channels, x.height(), x.width()),
            "convolution output gradient",
        )?;
        let plane = x.shape().plane();
        let k = self.in_channels * self.kernel * self.kernel;
        let col;
        let col_ref: &[f64] = if self.kernel == 1 {
            x.data()
        } else {
            col = im2col(x, self.kernel, self.dilation);
            &col
        };
        matmul(
            self.out_channels,
            plane,
            k,
            grad_out.data(),
            false,
            col_ref,
            true,
            grads.get_mut(self.weight),
            true,
        );
        for (o, gb) in grads.get_mut(self.bias).iter_mut().enumerate() {
            *gb += grad_out.channel(o).iter().sum::<f64>();
        }
        let mut dcol = vec![0.0; k * plane];
        matmul(
            k,
            self.out_channels,
            plane,
            store.get(self.weight),
            true,
            grad_out.data(),
            false,
            &mut dcol,
            false,
        );
        if self.kernel == 1 {
            return FeatureTensor::from_vec(x.shape(), dcol);
        }
        Ok(col2im(&dcol, x.shape(), self.kernel, self.dilation))
    }
}

/// Valid destination range `[lo, hi)` along an axis of length `len` for a tap offset.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col(x: &FeatureTensor, kernel: usize, dilation: usize) -> Vec<f64> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let plane = h * w;
    let half = (kernel / 2) as isize;
    let mut col = vec![0.0; c * kernel * kernel * plane];
    let src = x.data();
    for ci in 0..c {
        for ky in 0..kernel {
            let dy = (ky as isize - half) * dilation as isize;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..kernel {
                let dx = (kx as isize - half) * dilation as isize;
                let (x0, x1) = valid_range(w, dx);
                let row = ((ci * kernel + ky) * kernel + kx) * plane;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s = ci * plane + sy * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    let sx1 = (x1 as isize + dx) as usize;
                    col[row + y * w + x0..row + y * w + x1].copy_from_slice(&src[s + sx0..s + sx1]);
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], shape: Shape, kernel: usize, dilation: usize) -> FeatureTensor {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let plane = h * w;
    let half = (kernel / 2) as isize;
    let mut out = FeatureTensor::zeros(shape);
    let dst = out.data_mut();
    for ci in 0..c {
        for ky in 0..kernel {
            let dy = (ky as isize - half) * dilation as isize;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..kernel {
                let dx = (kx as isize - half) * dilation as isize;
                let (x0, x1) = valid_range(w, dx);
                let row = ((ci * kernel + ky) * kernel + kx) * plane;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let d = ci * plane + sy * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    let src = &col[row + y * w + x0..row + y * w + x1];
                    for (t, &v) in dst[d + sx0..d + sx0 + src.len()].iter_mut().zip(src) {
                        *t += v;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-loop convolution used as an independent reference.
    fn direct_conv(store: &ParamStore, conv: &Conv2d, x: &FeatureTensor) -> FeatureTensor {
        let w = store.get(conv.weight);
        let b = store.get(conv.bias);
        let k = conv.kernel;
        let half = (k / 2) as isize;
        let d = conv.dilation as isize;
        FeatureTensor::from_fn(
            Shape::new(conv.out_channels, x.height(), x.width()),
            |o, y, xx| {
                let mut acc = b[o];
                for i in 0..conv.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + (ky as isize - half) * d;
                            let sx = xx as isize + (kx as isize - half) * d;
                            if sy < 0 || sx < 0 || sy >= x.height() as isize || sx >= x.width() as isize {
                                continue;
                            }
                            acc += w[((o * conv.in_channels + i) * k + ky) * k + kx]
                                * x.get(i, sy as usize, sx as usize);
                        }
                    }
                }
                acc
            },
        )
    }

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> FeatureTensor {
        FeatureTensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matches_direct_convolution_with_dilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, d) in &[(3, 1), (3, 2), (3, 4), (1, 1)] {
            let mut store = ParamStore::new();
            let conv = Conv2d::new(&mut store, "c", 3, 4, k, d, &mut rng);
            for v in store.get_mut(conv.bias) {
                *v = rng.gen_range(-1.0..1.0);
            }
            let x = random_tensor(Shape::new(3, 5, 7), &mut rng);
            let got = conv.forward(&store, &x).unwrap();
            let want = direct_conv(&store, &conv, &x);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} d={d}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x) - bias, g> == <x, conv_backward(g)> for the linear part.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, &mut rng);
        let x = random_tensor(Shape::new(2, 6, 5), &mut rng);
        let g = random_tensor(Shape::new(3, 6, 5), &mut rng);
        let y = conv.forward(&store, &x).unwrap();
        let mut grads = GradStore::zeros_like(&store);
        let dx = conv.backward(&store, &x, &g, &mut grads).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // d<y,g>/dW[o,i,ky,kx] summed against W gives <y,g> again (bias is zero).
        let wdot: f64 = store
            .get(conv.weight)
            .iter()
            .zip(grads.get(conv.weight))
            .map(|(a, b)| a * b)
            .sum();
        assert!((wdot - lhs).abs() < 1e-10);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, &mut rng);
        let x = FeatureTensor::zeros(Shape::new(3, 4, 4));
        assert!(conv.forward(&store, &x).is_err());
    }
}
