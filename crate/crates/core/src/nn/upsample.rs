use crate::error::{CrnError, Result};
use crate::tensor::{FeatureTensor, Shape};

/// Interpolation taps along one axis: `(lower index, upper index, upper weight)`.
///
/// Sampling uses half-pixel centers: output index `d` reads source coordinate
/// `(d + 0.5) * src / dst - 0.5`, clamped to the valid range.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn check_target(f: &FeatureTensor, target_h: usize, target_w: usize) -> Result<()> {
    if target_h < f.height() || target_w < f.width() || f.height() == 0 || f.width() == 0 {
        return Err(CrnError::Dimension(format!(
            "cannot upsample {}x{} to {}x{}",
            f.height(),
            f.width(),
            target_h,
            target_w
        )));
    }
    Ok(())
}

pub fn bilinear_upsample(f: &FeatureTensor, target_h: usize, target_w: usize) -> Result<FeatureTensor> {
    check_target(f, target_h, target_w)?;
    let ys = axis_taps(f.height(), target_h);
    let xs = axis_taps(f.width(), target_w);
    Ok(FeatureTensor::from_fn(
        Shape::new(f.channels(), target_h, target_w),
        |c, y, x| {
            let (y0, y1, ty) = ys[y];
            let (x0, x1, tx) = xs[x];
            let top = (1.0 - tx) * f.get(c, y0, x0) + tx * f.get(c, y0, x1);
            let bottom = (1.0 - tx) * f.get(c, y1, x0) + tx * f.get(c, y1, x1);
            (1.0 - ty) * top + ty * bottom
        },
    ))
}

/// Adjoint of [`bilinear_upsample`]: scatters output gradients back to the source grid.
pub fn bilinear_upsample_backward(source_shape: Shape, grad_out: &FeatureTensor) -> Result<FeatureTensor> {
    let probe = FeatureTensor::zeros(source_shape);
    check_target(&probe, grad_out.height(), grad_out.width())?;
    let ys = axis_taps(source_shape.height, grad_out.height());
    let xs = axis_taps(source_shape.width, grad_out.width());
    let mut dx = probe;
    for c in 0..grad_out.channels() {
        for (y, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
                let g = grad_out.get(c, y, x);
                let w = source_shape.width;
                let plane = dx.channel_mut(c);
                plane[y0 * w + x0] += (1.0 - ty) * (1.0 - tx) * g;
                plane[y0 * w + x1] += (1.0 - ty) * tx * g;
                plane[y1 * w + x0] += ty * (1.0 - tx) * g;
                plane[y1 * w + x1] += ty * tx * g;
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_are_preserved() {
        let f = FeatureTensor::filled(Shape::new(1, 2, 2), 0.7);
        let up = bilinear_upsample(&f, 4, 4).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn ramp_row_is_monotone() {
        let f = FeatureTensor::from_vec(Shape::new(1, 1, 2), vec![0.0, 1.0]).unwrap();
        let up = bilinear_upsample(&f, 1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
        assert!(up.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn shrinking_is_an_error() {
        let f = FeatureTensor::zeros(Shape::new(1, 4, 4));
        assert!(matches!(bilinear_upsample(&f, 2, 4), Err(CrnError::Dimension(_))));
    }

    #[test]
    fn backward_is_adjoint() {
        let f = FeatureTensor::from_fn(Shape::new(2, 3, 4), |c, y, x| ((c + 2 * y + 3 * x) as f64).sin());
        let g = FeatureTensor::from_fn(Shape::new(2, 6, 8), |c, y, x| ((5 * c + y + 7 * x) as f64).cos());
        let up = bilinear_upsample(&f, 6, 8).unwrap();
        let back = bilinear_upsample_backward(f.shape(), &g).unwrap();
        let lhs: f64 = up.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
