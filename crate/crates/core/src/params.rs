use rand::Rng;

use crate::tensor::Tensor;

/// A bundle of trainable tensors with a fixed canonical order.
///
/// `named_params` and `params_mut` must list the same tensors in the same
/// order, and `bind` methods register them on a tape in that order too, so
/// `Tape::params()[i]` always refers to `named_params()[i]`.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

impl Parameters for Vec<Tensor> {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    inner: Vec<(String, &'a Tensor)>,
) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    let prefix = prefix.to_string();
    inner
        .into_iter()
        .map(move |(name, t)| (format!("{prefix}.{name}"), t))
}

/// Glorot-uniform initialization for a weight with the given fan-in and fan-out.
pub fn glorot<R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}
