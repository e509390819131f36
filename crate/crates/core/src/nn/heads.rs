use rand::Rng;

use super::linear::Linear;
use super::tensor::{sigmoid, DiffModule, Module, Param, Tensor};
use crate::error::Result;

/// Gated attention layer: `out = o * tanh(i * g)` with
/// `i = σ(W_i x + b_i)`, `g = tanh(W_g x + b_g)`, `o = σ(W_o x + b_o)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub input_gate: Linear,
    pub candidate: Linear,
    pub output_gate: Linear,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Vec<f64>,
    i: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    t: Vec<f64>,
}

impl AttentionCache {
    pub fn input_gate(&self) -> &[f64] {
        &self.i
    }
    pub fn output_gate(&self) -> &[f64] {
        &self.o
    }
}

impl AttentionHead {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            input_gate: Linear::new(&format!("{name}.w_i"), input, output, rng),
            candidate: Linear::new(&format!("{name}.w_g"), input, output, rng),
            output_gate: Linear::new(&format!("{name}.w_o"), input, output, rng),
        }
    }

    pub fn zeros(name: &str, input: usize, output: usize) -> Self {
        Self {
            input_gate: Linear::zeros(&format!("{name}.w_i"), input, output),
            candidate: Linear::zeros(&format!("{name}.w_g"), input, output),
            output_gate: Linear::zeros(&format!("{name}.w_o"), input, output),
        }
    }
}

impl Module for AttentionHead {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.input_gate.params();
        v.extend(self.candidate.params());
        v.extend(self.output_gate.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.input_gate.params_mut();
        v.extend(self.candidate.params_mut());
        v.extend(self.output_gate.params_mut());
        v
    }
}

impl DiffModule for AttentionHead {
    type Cache = AttentionCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, AttentionCache)> {
        let x = x.data();
        let i: Vec<f64> = self.input_gate.apply(x)?.into_iter().map(sigmoid).collect();
        let g: Vec<f64> = self.candidate.apply(x)?.into_iter().map(f64::tanh).collect();
        let o: Vec<f64> = self.output_gate.apply(x)?.into_iter().map(sigmoid).collect();
        let t: Vec<f64> = i.iter().zip(&g).map(|(a, b)| (a * b).tanh()).collect();
        let out = o.iter().zip(&t).map(|(a, b)| a * b).collect();
        Ok((
            Tensor::vector(out),
            AttentionCache {
                x: x.to_vec(),
                i,
                g,
                o,
                t,
            },
        ))
    }

    fn backward(&mut self, c: &AttentionCache, grad_out: &Tensor) -> Tensor {
        let dy = grad_out.data();
        let n = dy.len();
        let mut d_i = vec![0.0; n];
        let mut d_g = vec![0.0; n];
        let mut d_o = vec![0.0; n];
        for k in 0..n {
            let ds = dy[k] * c.o[k] * (1.0 - c.t[k] * c.t[k]);
            d_o[k] = dy[k] * c.t[k] * c.o[k] * (1.0 - c.o[k]);
            d_i[k] = ds * c.g[k] * c.i[k] * (1.0 - c.i[k]);
            d_g[k] = ds * c.i[k] * (1.0 - c.g[k] * c.g[k]);
        }
        let mut dx = self.input_gate.backprop(&c.x, &d_i);
        for (a, b) in dx.iter_mut().zip(self.candidate.backprop(&c.x, &d_g)) {
            *a += b;
        }
        for (a, b) in dx.iter_mut().zip(self.output_gate.backprop(&c.x, &d_o)) {
            *a += b;
        }
        Tensor::vector(dx)
    }
}

/// Two-layer ablation head: `out = tanh(W₂ tanh(W₁ x + b₁) + b₂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcActivationHead {
    pub first: Linear,
    pub second: Linear,
}

#[derive(Clone, Debug)]
pub struct FcActivationCache {
    x: Vec<f64>,
    h: Vec<f64>,
    out: Vec<f64>,
}

impl FcActivationHead {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::new(&format!("{name}.fc1"), input, output, rng),
            second: Linear::new(&format!("{name}.fc2"), output, output, rng),
        }
    }

    pub fn zeros(name: &str, input: usize, output: usize) -> Self {
        Self {
            first: Linear::zeros(&format!("{name}.fc1"), input, output),
            second: Linear::zeros(&format!("{name}.fc2"), output, output),
        }
    }
}

impl Module for FcActivationHead {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.first.params();
        v.extend(self.second.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.first.params_mut();
        v.extend(self.second.params_mut());
        v
    }
}

impl DiffModule for FcActivationHead {
    type Cache = FcActivationCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, FcActivationCache)> {
        let h: Vec<f64> = self.first.apply(x.data())?.into_iter().map(f64::tanh).collect();
        let out: Vec<f64> = self.second.apply(&h)?.into_iter().map(f64::tanh).collect();
        Ok((
            Tensor::vector(out.clone()),
            FcActivationCache {
                x: x.data().to_vec(),
                h,
                out,
            },
        ))
    }

    fn backward(&mut self, c: &FcActivationCache, grad_out: &Tensor) -> Tensor {
        let d2: Vec<f64> = grad_out
            .data()
            .iter()
            .zip(&c.out)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        let dh = self.second.backprop(&c.h, &d2);
        let d1: Vec<f64> = dh.iter().zip(&c.h).map(|(g, y)| g * (1.0 - y * y)).collect();
        Tensor::vector(self.first.backprop(&c.x, &d1))
    }
}

#[cfg(test)]
mod tests {
    use super::{AttentionHead, DiffModule, FcActivationHead, Module, Tensor};
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_attention_outputs_zero() {
        let head = AttentionHead::zeros("att", 4, 3);
        let (y, c) = head.forward(&Tensor::vector(vec![1.0, -2.0, 3.0, 0.5])).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);
        assert!(c.input_gate().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_gates_give_tanh_one() {
        let mut head = AttentionHead::zeros("att", 1, 1);
        head.input_gate.bias.value = Tensor::vector(vec![20.0]);
        head.output_gate.bias.value = Tensor::vector(vec![20.0]);
        // tanh(19) rounds to 1 in double precision.
        head.candidate.bias.value = Tensor::vector(vec![19.0]);
        let (y, _) = head.forward(&Tensor::vector(vec![0.3])).unwrap();
        assert!((y.data()[0] - 1f64.tanh()).abs() < 1e-7, "{}", y.data()[0]);
        assert!((y.data()[0] - 0.7616).abs() < 1e-4);
    }

    #[test]
    fn attention_rejects_wrong_width() {
        let head = AttentionHead::zeros("att", 4, 3);
        assert!(matches!(
            head.forward(&Tensor::vector(vec![1.0; 5])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_fc_head_outputs_zero() {
        let head = FcActivationHead::zeros("fc", 3, 3);
        let (y, _) = head.forward(&Tensor::vector(vec![4.0, -1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);
    }

    #[test]
    fn identity_fc_head_is_identity_to_first_order() {
        let mut head = FcActivationHead::zeros("fc", 2, 2);
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        head.first.weight.value = eye.clone();
        head.second.weight.value = eye;
        let x = [1e-3, -2e-3];
        let (y, _) = head.forward(&Tensor::vector(x.to_vec())).unwrap();
        for (a, b) in y.data().iter().zip(x) {
            // tanh(tanh(x)) = x - 2x³/3 + O(x⁵)
            assert!((a - b).abs() < b.abs().powi(3));
        }
    }

    #[test]
    fn param_counts_follow_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(AttentionHead::new("a", 10, 6, &mut rng).param_count(), 3 * (10 * 6 + 6));
        assert_eq!(FcActivationHead::new("f", 10, 6, &mut rng).param_count(), 10 * 6 + 6 + 6 * 6 + 6);
    }

    proptest! {
        #[test]
        fn attention_gates_stay_open_interval(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = AttentionHead::new("a", 8, 8, &mut rng);
            let x: Vec<f64> = (0..8).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let (y, c) = head.forward(&Tensor::vector(x)).unwrap();
            prop_assert!(c.input_gate().iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(c.output_gate().iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(y.data().iter().all(|v| v.abs() < 1.0));
        }
    }
}
