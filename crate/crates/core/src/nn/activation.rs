use crate::tensor::FeatureTensor;

/// Leaky rectifier; a slope of zero gives the plain ReLU.
pub fn leaky_relu(x: &FeatureTensor, slope: f64) -> FeatureTensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

/// Gradient of [`leaky_relu`] given its input `x`.
pub fn leaky_relu_backward(x: &FeatureTensor, grad_out: &FeatureTensor, slope: f64) -> FeatureTensor {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *gv *= slope;
        }
    }
    g
}
