use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::LayerSpec;
use crate::tensor::Tensor;

/// `shape`-sized draws from N(0, 2 / fan_in).
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}

/// Weights He-normal, biases zero except the LSTM forget gate at 1.
pub fn init_layer(spec: &LayerSpec, rng: &mut impl Rng) -> Vec<Tensor> {
    match *spec {
        LayerSpec::Dense { inputs, units } => {
            vec![he_normal(&[inputs, units], inputs, rng), Tensor::zeros(&[units])]
        }
        LayerSpec::Conv2d {
            in_channels,
            filters,
            kernel,
            ..
        } => vec![
            he_normal(&[filters, in_channels, kernel, kernel], in_channels * kernel * kernel, rng),
            Tensor::zeros(&[filters, 1, 1]),
        ],
        LayerSpec::Lstm { inputs, units } => {
            let fan_in = inputs + units;
            let wx = he_normal(&[inputs, 4 * units], fan_in, rng);
            let wh = he_normal(&[units, 4 * units], fan_in, rng);
            let mut b = vec![0.0; 4 * units];
            b[units..2 * units].fill(1.0);
            vec![wx, wh, Tensor::vector(b)]
        }
        _ => Vec::new(),
    }
}
