use rand::Rng;

use super::tensor::{DiffModule, Module, Param, Tensor};
use crate::error::{Error, Result};

/// Fully connected layer `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in)`.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let w = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..output).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::from_vec(&[output, input], w).unwrap()),
            bias: Param::new(format!("{name}.bias"), Tensor::vector(b)),
        }
    }

    pub fn zeros(name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[output, input])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (out, inp) = (self.output_dim(), self.input_dim());
        if x.len() != inp {
            return Err(Error::shape(&[inp], &[x.len()]));
        }
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        Ok((0..out)
            .map(|r| b[r] + w[r * inp..(r + 1) * inp].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect())
    }

    /// Accumulates parameter gradients for input `x` and returns `dL/dx`.
    pub fn backprop(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let inp = self.input_dim();
        let mut dx = vec![0.0; inp];
        let w = self.weight.value.data();
        let gw = self.weight.grad.data_mut();
        let gb = self.bias.grad.data_mut();
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[r] += g;
            let row = r * inp;
            for c in 0..inp {
                gw[row + c] += g * x[c];
                dx[c] += g * w[row + c];
            }
        }
        dx
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl DiffModule for Linear {
    type Cache = Vec<f64>;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        Ok((Tensor::vector(self.apply(x.data())?), x.data().to_vec()))
    }

    fn backward(&mut self, cache: &Vec<f64>, grad_out: &Tensor) -> Tensor {
        Tensor::vector(self.backprop(cache, grad_out.data()))
    }
}
