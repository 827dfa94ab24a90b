use crate::error::{CrnError, Result};
use crate::tensor::{FeatureTensor, Shape};

fn halved(x: &FeatureTensor) -> Result<Shape> {
    if x.height() % 2 != 0 || x.width() % 2 != 0 {
        return Err(CrnError::Dimension(format!(
            "2x2 pooling needs even spatial size, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    Ok(Shape::new(x.channels(), x.height() / 2, x.width() / 2))
}

pub fn avg_pool2(x: &FeatureTensor) -> Result<FeatureTensor> {
    let shape = halved(x)?;
    Ok(FeatureTensor::from_fn(shape, |c, y, xx| {
        0.25 * (x.get(c, 2 * y, 2 * xx)
            + x.get(c, 2 * y, 2 * xx + 1)
            + x.get(c, 2 * y + 1, 2 * xx)
            + x.get(c, 2 * y + 1, 2 * xx + 1))
    }))
}

pub fn avg_pool2_backward(input_shape: Shape, grad_out: &FeatureTensor) -> FeatureTensor {
    FeatureTensor::from_fn(input_shape, |c, y, x| 0.25 * grad_out.get(c, y / 2, x / 2))
}

fn argmax_2x2(x: &FeatureTensor, c: usize, y: usize, xx: usize) -> (usize, usize) {
    let mut best = (2 * y, 2 * xx);
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let cand = (2 * y + dy, 2 * xx + dx);
        if x.get(c, cand.0, cand.1) > x.get(c, best.0, best.1) {
            best = cand;
        }
    }
    best
}

pub fn max_pool2(x: &FeatureTensor) -> Result<FeatureTensor> {
    let shape = halved(x)?;
    Ok(FeatureTensor::from_fn(shape, |c, y, xx| {
        let (sy, sx) = argmax_2x2(x, c, y, xx);
        x.get(c, sy, sx)
    }))
}

/// Routes each output gradient to the first maximal input of its window.
pub fn max_pool2_backward(x: &FeatureTensor, grad_out: &FeatureTensor) -> FeatureTensor {
    let mut dx = FeatureTensor::zeros(x.shape());
    for c in 0..grad_out.channels() {
        for y in 0..grad_out.height() {
            for xx in 0..grad_out.width() {
                let (sy, sx) = argmax_2x2(x, c, y, xx);
                let v = dx.get(c, sy, sx) + grad_out.get(c, y, xx);
                dx.set(c, sy, sx, v);
            }
        }
    }
    dx
}
