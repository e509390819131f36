use rand::Rng;

use super::tensor::{sigmoid, DiffModule, Module, Param, Tensor};
use crate::error::{Error, Result};

/// Single-layer LSTM. Gate rows are stacked as input, forget, candidate,
/// output in `w_ih` (`[4H, F]`), `w_hh` (`[4H, H]`) and `bias` (`[4H]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub w_ih: Param,
    pub w_hh: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    xs: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
}

impl LstmCache {
    pub fn final_hidden(&self) -> &[f64] {
        self.hs.last().unwrap()
    }
    pub fn final_cell(&self) -> &[f64] {
        self.cs.last().unwrap()
    }
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        let mut init = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w_ih = init(4 * hidden * input);
        let w_hh = init(4 * hidden * hidden);
        let b = init(4 * hidden);
        Self {
            w_ih: Param::new(format!("{name}.w_ih"), Tensor::from_vec(&[4 * hidden, input], w_ih).unwrap()),
            w_hh: Param::new(format!("{name}.w_hh"), Tensor::from_vec(&[4 * hidden, hidden], w_hh).unwrap()),
            bias: Param::new(format!("{name}.bias"), Tensor::vector(b)),
        }
    }

    pub fn zeros(name: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Param::new(format!("{name}.w_ih"), Tensor::zeros(&[4 * hidden, input])),
            w_hh: Param::new(format!("{name}.w_hh"), Tensor::zeros(&[4 * hidden, hidden])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[4 * hidden])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.value.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.value.shape()[1]
    }

    /// Runs the recurrence over an `[S, F]` sequence from state `(h0, c0)`.
    /// Returns the `[S, H]` hidden sequence.
    pub fn forward_with_state(&self, x: &Tensor, h0: &[f64], c0: &[f64]) -> Result<(Tensor, LstmCache)> {
        let (f, h) = (self.input_dim(), self.hidden_dim());
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != f || shape[0] == 0 {
            return Err(Error::shape(&[shape.first().copied().unwrap_or(0).max(1), f], shape));
        }
        if h0.len() != h || c0.len() != h {
            return Err(Error::shape(&[h], &[h0.len().max(c0.len())]));
        }
        let steps = shape[0];
        let w_ih = self.w_ih.value.data();
        let w_hh = self.w_hh.value.data();
        let b = self.bias.value.data();
        let mut cache = LstmCache {
            xs: Vec::with_capacity(steps),
            hs: vec![h0.to_vec()],
            cs: vec![c0.to_vec()],
            gates: Vec::with_capacity(steps),
        };
        let mut out = Vec::with_capacity(steps * h);
        for t in 0..steps {
            let xt = &x.data()[t * f..(t + 1) * f];
            let hp = &cache.hs[t];
            let cp = &cache.cs[t];
            let mut a: Vec<f64> = (0..4 * h)
                .map(|r| {
                    b[r] + w_ih[r * f..(r + 1) * f].iter().zip(xt).map(|(w, v)| w * v).sum::<f64>()
                        + w_hh[r * h..(r + 1) * h].iter().zip(hp).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect();
            for (r, v) in a.iter_mut().enumerate() {
                *v = if (2 * h..3 * h).contains(&r) { v.tanh() } else { sigmoid(*v) };
            }
            let c: Vec<f64> = (0..h).map(|k| a[h + k] * cp[k] + a[k] * a[2 * h + k]).collect();
            let hn: Vec<f64> = (0..h).map(|k| a[3 * h + k] * c[k].tanh()).collect();
            out.extend_from_slice(&hn);
            cache.xs.push(xt.to_vec());
            cache.gates.push(a);
            cache.hs.push(hn);
            cache.cs.push(c);
        }
        Ok((Tensor::from_vec(&[steps, h], out)?, cache))
    }
}

impl Module for Lstm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w_ih, &self.w_hh, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}

impl DiffModule for Lstm {
    type Cache = LstmCache;

    /// Zero initial state.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, LstmCache)> {
        let zero = vec![0.0; self.hidden_dim()];
        self.forward_with_state(x, &zero, &zero)
    }

    /// `grad_out` is `[S, H]`, the gradient with respect to every hidden output.
    fn backward(&mut self, c: &LstmCache, grad_out: &Tensor) -> Tensor {
        let (f, h) = (self.input_dim(), self.hidden_dim());
        let steps = c.xs.len();
        let mut dx = vec![0.0; steps * f];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut da = vec![0.0; 4 * h];
        for t in (0..steps).rev() {
            let a = &c.gates[t];
            let (ct, cp) = (&c.cs[t + 1], &c.cs[t]);
            for k in 0..h {
                let dh = grad_out.data()[t * h + k] + dh_next[k];
                let (i, fg, g, o) = (a[k], a[h + k], a[2 * h + k], a[3 * h + k]);
                let tc = ct[k].tanh();
                let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                da[k] = dc * g * i * (1.0 - i);
                da[h + k] = dc * cp[k] * fg * (1.0 - fg);
                da[2 * h + k] = dc * i * (1.0 - g * g);
                da[3 * h + k] = dh * tc * o * (1.0 - o);
                dc_next[k] = dc * fg;
            }
            let xt = &c.xs[t];
            let hp = &c.hs[t];
            let w_ih = self.w_ih.value.data();
            let w_hh = self.w_hh.value.data();
            let gw_ih = self.w_ih.grad.data_mut();
            let dxt = &mut dx[t * f..(t + 1) * f];
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            for (r, &g) in da.iter().enumerate() {
                for q in 0..f {
                    gw_ih[r * f + q] += g * xt[q];
                    dxt[q] += g * w_ih[r * f + q];
                }
            }
            let gw_hh = self.w_hh.grad.data_mut();
            for (r, &g) in da.iter().enumerate() {
                for q in 0..h {
                    gw_hh[r * h + q] += g * hp[q];
                    dh_next[q] += g * w_hh[r * h + q];
                }
            }
            for (gb, g) in self.bias.grad.data_mut().iter_mut().zip(&da) {
                *gb += g;
            }
        }
        Tensor::from_vec(&[steps, f], dx).unwrap()
    }
}
