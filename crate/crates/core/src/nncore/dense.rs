use crate::error::{shape, HarError, Result};
use crate::nncore::{Activation, Grads, Parameterized};
use crate::rng::{self, HarRng};
use crate::Scalar;

/// `activation(W x + b)` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self { in_dim, out_dim, weights: vec![T::zero(); in_dim * out_dim], bias: vec![T::zero(); out_dim], activation }
    }

    pub fn from_parts(weights: Vec<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        let out_dim = bias.len();
        if out_dim == 0 || !weights.len().is_multiple_of(out_dim) || weights.is_empty() {
            return Err(shape(format!("{} weights for {out_dim} outputs", weights.len())));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(HarError::NonFinite("dense layer parameters".into()));
        }
        Ok(Self { in_dim: weights.len() / out_dim, out_dim, weights, bias, activation })
    }

    /// He initialization for relu layers, Glorot-style variance otherwise;
    /// zero biases.
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut HarRng) -> Self {
        let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
        let std = T::lit((gain / in_dim as f64).sqrt());
        let weights = rng::normal_vec::<T>(rng, in_dim * out_dim).into_iter().map(|v| v * std).collect();
        Self { in_dim, out_dim, weights, bias: vec![T::zero(); out_dim], activation }
    }

    pub fn pre_activation(&self, x: &[T]) -> Vec<T> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &v)| acc + w * v))
            .collect()
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_dim {
            return Err(shape(format!("dense layer expects {} inputs, got {}", self.in_dim, x.len())));
        }
        let mut y = self.pre_activation(x);
        y.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        Ok(y)
    }

    /// Accumulates parameter gradients into `gw`/`gb` and returns `∂L/∂x`.
    /// `x` and `y` are the input and output recorded by the forward pass.
    pub fn backward(&self, x: &[T], y: &[T], dy: &[T], gw: &mut [T], gb: &mut [T]) -> Vec<T> {
        let mut dx = vec![T::zero(); self.in_dim];
        for o in 0..self.out_dim {
            let dz = dy[o] * self.activation.derivative_from_output(y[o]);
            if dz == T::zero() {
                continue;
            }
            gb[o] += dz;
            let row = o * self.in_dim;
            let w = &self.weights[row..row + self.in_dim];
            let g = &mut gw[row..row + self.in_dim];
            for i in 0..self.in_dim {
                g[i] += dz * x[i];
                dx[i] += dz * w[i];
            }
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for DenseLayer<T> {
    fn param_blocks(&self) -> Vec<&[T]> {
        vec![&self.weights, &self.bias]
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<DenseLayer<T>>,
}

/// Inputs and outputs of every layer from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace<T> {
    /// `activations[0]` is the network input, `activations[i + 1]` the output
    /// of layer `i`.
    pub activations: Vec<Vec<T>>,
}

impl<T> MlpTrace<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().expect("trace holds the input at least")
    }
}

impl<T: Scalar> Mlp<T> {
    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last layer
    /// uses `output`.
    pub fn init(dims: &[usize], hidden: Activation, output: Activation, rng: &mut HarRng) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| DenseLayer::init(dims[i], dims[i + 1], if i + 1 == n { output } else { hidden }, rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &[T]) -> Result<MlpTrace<T>> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(activations.last().unwrap())?;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(HarError::NonFinite(format!("activation of layer {i}")));
            }
            activations.push(y);
        }
        Ok(MlpTrace { activations })
    }

    /// Backpropagates `dy` through the traced pass. `grads` must hold two
    /// blocks (weights, bias) per layer.
    pub fn backward(&self, trace: &MlpTrace<T>, dy: &[T], grads: &mut [Vec<T>]) -> Result<Vec<T>> {
        let mut delta = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gw, gb) = grads[2 * i..2 * i + 2].split_at_mut(1);
            delta = layer.backward(&trace.activations[i], &trace.activations[i + 1], &delta, &mut gw[0], &mut gb[0]);
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(HarError::NonFinite(format!("gradient entering layer {i}")));
            }
        }
        Ok(delta)
    }

    /// Convenience: gradients of `Σ dy · f(x)` w.r.t. parameters and input.
    pub fn gradients(&self, x: &[T], dy: &[T]) -> Result<(Grads<T>, Vec<T>)> {
        let trace = self.forward_trace(x)?;
        let mut g = self.zero_grads();
        let dx = self.backward(&trace, dy, &mut g.blocks)?;
        Ok((g, dx))
    }
}

impl<T: Scalar> Parameterized<T> for Mlp<T> {
    fn param_blocks(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.param_blocks()).collect()
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.param_blocks_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{max_relative_error, numeric_gradient};

    #[test]
    fn forward_examples() {
        let id = DenseLayer::from_parts(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], Activation::Identity).unwrap();
        assert_eq!(id.forward(&[3.0, -4.0]).unwrap(), vec![3.0, -4.0]);
        let relu = DenseLayer::from_parts(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], Activation::Relu).unwrap();
        assert_eq!(relu.forward(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
        let one = DenseLayer::from_parts(vec![2.0], vec![1.0], Activation::Identity).unwrap();
        assert_eq!(one.forward(&[3.0]).unwrap(), vec![7.0]);
        assert!(matches!(one.forward(&[1.0, 2.0]), Err(HarError::ShapeMismatch(_))));
    }

    #[test]
    fn constant_zero_loss_gives_zero_gradients() {
        let mut rng = rng::seeded(1);
        let net = Mlp::<f64>::init(&[3, 4, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let (g, dx) = net.gradients(&[0.3, -0.1, 0.7], &[0.0, 0.0]).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = rng::seeded(9);
        let x = [0.4, -0.8, 0.15];
        let target = [0.5, -0.25];
        let mut net = Mlp::<f64>::init(&[3, 5, 4, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let loss = |n: &Mlp<f64>| {
            let y = n.forward(&x).unwrap();
            y.iter().zip(&target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>()
        };
        let y = net.forward(&x).unwrap();
        let dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        let (g, _) = net.gradients(&x, &dy).unwrap();
        let num = numeric_gradient(&mut net, loss, 1e-5);
        assert!(max_relative_error(&g, &num, 1e-6) < 1e-6);
    }
}
