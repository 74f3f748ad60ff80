//! Embedding producer: a linear map, optionally with one ReLU hidden layer.
//! No biases.

use crate::error::Result;
use crate::numerics::{Matrix, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Matrix>,
}

/// Intermediate values kept for the backward pass.
pub struct BackboneCache {
    inputs: Vec<Matrix>,
}

impl Backbone {
    /// Fan-in scaled normal initialisation. `hidden == 0` gives a single
    /// linear layer.
    pub fn init(input_dim: usize, hidden: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let dims: Vec<usize> = if hidden == 0 {
            vec![input_dim, out_dim]
        } else {
            vec![input_dim, hidden, out_dim]
        };
        let layers = dims
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                Matrix::from_fn(w[0], w[1], |_, _| scale * rng.next_gaussian())
            })
            .collect();
        Backbone { layers }
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, BackboneCache)> {
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut h = inputs.clone();
        for (l, w) in self.layers.iter().enumerate() {
            let z = h.matmul(w)?;
            cache.push(h);
            h = if l + 1 < self.layers.len() {
                z.map(|v| v.max(0.0))
            } else {
                z
            };
        }
        Ok((h, BackboneCache { inputs: cache }))
    }

    /// Parameter gradients given the gradient of the output.
    pub fn backward(&self, cache: &BackboneCache, grad_out: &Matrix) -> Result<Vec<Matrix>> {
        let mut grads = vec![Matrix::zeros(0, 0); self.layers.len()];
        let mut g = grad_out.clone();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            grads[l] = input.transpose().matmul(&g)?;
            if l > 0 {
                let back = g.matmul(&self.layers[l].transpose())?;
                // input of layer l is relu(pre-activation): gate on > 0
                g = back.zip_with(input, |gv, a| if a > 0.0 { gv } else { 0.0 })?;
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_matches_difference_quotient() {
        let mut rng = RngStream::new(12);
        for hidden in [0, 5] {
            let net = Backbone::init(4, hidden, 3, &mut rng);
            let inputs = Matrix::from_fn(6, 4, |_, _| rng.next_gaussian());
            let probe = Matrix::from_fn(6, 3, |_, _| rng.next_gaussian());
            let objective = |net: &Backbone| {
                let (out, _) = net.forward(&inputs).unwrap();
                out.data()
                    .iter()
                    .zip(probe.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let (_, cache) = net.forward(&inputs).unwrap();
            let grads = net.backward(&cache, &probe).unwrap();
            let h = 1e-6;
            for (l, grad) in grads.iter().enumerate() {
                for i in 0..net.layers[l].rows() {
                    for j in 0..net.layers[l].cols() {
                        let mut up = net.clone();
                        up.layers[l].set(i, j, net.layers[l].get(i, j) + h);
                        let mut dn = net.clone();
                        dn.layers[l].set(i, j, net.layers[l].get(i, j) - h);
                        let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                        assert!((fd - grad.get(i, j)).abs() <= 1e-6 * fd.abs().max(1.0));
                    }
                }
            }
        }
    }
}
