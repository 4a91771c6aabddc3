use rand::Rng;

use crate::diffcore::Tensor;

/// Uniform Glorot initialization on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape.to_vec());
    for v in t.data_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    t
}
