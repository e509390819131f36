use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::Linear;
use super::tensor::{DiffModule, Module, Param, Tensor};
use crate::error::{Error, Result};

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "expected a [C, H, W] tensor, got {:?}",
            t.shape()
        ))),
    }
}

/// Square 2-D convolution with zero padding `kernel / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (input * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = (0..output * input * kernel * kernel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::from_vec(&[output, input, kernel, kernel], w).unwrap(),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[output])),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }
    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let p = k / 2;
        ((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1)
    }

    /// Visits every (output index, input index, weight index) triple.
    fn for_each_tap(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (o_ch, i_ch, k) = (self.out_channels(), self.in_channels(), self.kernel());
        let p = k / 2;
        let s = self.stride;
        let (ho, wo) = self.output_size(h, w);
        for oc in 0..o_ch {
            for ic in 0..i_ch {
                for kh in 0..k {
                    for kw in 0..k {
                        let widx = ((oc * i_ch + ic) * k + kh) * k + kw;
                        for oh in 0..ho {
                            let ih = (oh * s + kh) as isize - p as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let in_row = (ic * h + ih as usize) * w;
                            let out_row = (oc * ho + oh) * wo;
                            for ow in 0..wo {
                                let iw = (ow * s + kw) as isize - p as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                f(out_row + ow, in_row + iw as usize, widx);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl DiffModule for Conv2d {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (c, h, w) = dims3(x)?;
        if c != self.in_channels() {
            return Err(Error::shape(&[self.in_channels(), h, w], x.shape()));
        }
        let (ho, wo) = self.output_size(h, w);
        let o_ch = self.out_channels();
        let mut out = Vec::with_capacity(o_ch * ho * wo);
        for &b in self.bias.value.data() {
            out.extend(std::iter::repeat_n(b, ho * wo));
        }
        let wt = self.weight.value.data();
        let xd = x.data();
        self.for_each_tap(h, w, |o, i, k| out[o] += wt[k] * xd[i]);
        Ok((Tensor::from_vec(&[o_ch, ho, wo], out)?, x.clone()))
    }

    fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        let (_, h, w) = dims3(x).unwrap();
        let (ho, wo) = self.output_size(h, w);
        let dy = grad_out.data();
        for (oc, gb) in self.bias.grad.data_mut().iter_mut().enumerate() {
            *gb += dy[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
        }
        let mut dx = vec![0.0; x.len()];
        let mut gw = std::mem::take(&mut self.weight.grad);
        let wt = self.weight.value.data();
        let xd = x.data();
        {
            let g = gw.data_mut();
            self.for_each_tap(h, w, |o, i, k| {
                g[k] += dy[o] * xd[i];
                dx[i] += dy[o] * wt[k];
            });
        }
        self.weight.grad = gw;
        Tensor::from_vec(x.shape(), dx).unwrap()
    }
}

/// Per-channel affine normalization by running statistics:
/// `y = γ (x − μ) / sqrt(σ² + ε) + β`. The statistics are constants of the
/// forward pass and are refreshed with [`AffineNorm::update_stats`].
#[derive(Clone, Debug, PartialEq)]
pub struct AffineNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Tensor,
    /// Per-channel mean and variance of the input that produced this cache.
    pub observed_mean: Vec<f64>,
    pub observed_var: Vec<f64>,
}

impl AffineNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        let ones = Tensor::vector(vec![1.0; channels]);
        Self {
            gamma: Param::new(format!("{name}.gamma"), ones.clone()),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), ones),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Exponential moving average toward observed statistics.
    pub fn update_stats(&mut self, cache: &NormCache, momentum: f64) {
        let m = self.running_mean.value.data_mut();
        for (r, o) in m.iter_mut().zip(&cache.observed_mean) {
            *r = (1.0 - momentum) * *r + momentum * o;
        }
        let v = self.running_var.value.data_mut();
        for (r, o) in v.iter_mut().zip(&cache.observed_var) {
            *r = (1.0 - momentum) * *r + momentum * o;
        }
    }
}

impl Module for AffineNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

impl DiffModule for AffineNorm {
    type Cache = NormCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, NormCache)> {
        let (c, h, w) = dims3(x)?;
        if c != self.channels() {
            return Err(Error::shape(&[self.channels(), h, w], x.shape()));
        }
        let plane = h * w;
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        let mut observed_mean = Vec::with_capacity(c);
        let mut observed_var = Vec::with_capacity(c);
        for ch in 0..c {
            let vals = &x.data()[ch * plane..(ch + 1) * plane];
            let mean = vals.iter().sum::<f64>() / plane as f64;
            observed_mean.push(mean);
            observed_var.push(vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64);
            let mu = self.running_mean.value.data()[ch];
            let inv = 1.0 / (self.running_var.value.data()[ch] + NORM_EPS).sqrt();
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for v in vals {
                let n = (v - mu) * inv;
                xhat.push(n);
                out.push(g * n + b);
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), out)?,
            NormCache {
                xhat: Tensor::from_vec(x.shape(), xhat)?,
                observed_mean,
                observed_var,
            },
        ))
    }

    fn backward(&mut self, cache: &NormCache, grad_out: &Tensor) -> Tensor {
        let c = self.channels();
        let plane = grad_out.len() / c;
        let mut dx = Vec::with_capacity(grad_out.len());
        for ch in 0..c {
            let dy = &grad_out.data()[ch * plane..(ch + 1) * plane];
            let xh = &cache.xhat.data()[ch * plane..(ch + 1) * plane];
            self.gamma.grad.data_mut()[ch] += dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
            self.beta.grad.data_mut()[ch] += dy.iter().sum::<f64>();
            let scale = self.gamma.value.data()[ch]
                / (self.running_var.value.data()[ch] + NORM_EPS).sqrt();
            dx.extend(dy.iter().map(|g| g * scale));
        }
        Tensor::from_vec(grad_out.shape(), dx).unwrap()
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn elu_tensor(t: &Tensor) -> Tensor {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&v| elu(v)).collect()).unwrap()
}

fn elu_backward(pre: &Tensor, grad: &Tensor) -> Tensor {
    Tensor::from_vec(
        pre.shape(),
        pre.data().iter().zip(grad.data()).map(|(&p, g)| g * elu_grad(p)).collect(),
    )
    .unwrap()
}

/// Residual basic block: two 3×3 conv + norm stages with an ELU between,
/// added to a shortcut (1×1 conv + norm when the shape changes), then ELU.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub norm1: AffineNorm,
    pub conv2: Conv2d,
    pub norm2: AffineNorm,
    pub shortcut: Option<(Conv2d, AffineNorm)>,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    conv1: Tensor,
    norm1: NormCache,
    pre1: Tensor,
    conv2: Tensor,
    norm2: NormCache,
    shortcut: Option<(Tensor, NormCache)>,
    pre_out: Tensor,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (input != output || stride != 1).then(|| {
            (
                Conv2d::new(&format!("{name}.shortcut.conv"), input, output, 1, stride, rng),
                AffineNorm::new(&format!("{name}.shortcut.norm"), output),
            )
        });
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), input, output, 3, stride, rng),
            norm1: AffineNorm::new(&format!("{name}.norm1"), output),
            conv2: Conv2d::new(&format!("{name}.conv2"), output, output, 3, 1, rng),
            norm2: AffineNorm::new(&format!("{name}.norm2"), output),
            shortcut,
        }
    }

    pub fn update_stats(&mut self, cache: &BlockCache, momentum: f64) {
        self.norm1.update_stats(&cache.norm1, momentum);
        self.norm2.update_stats(&cache.norm2, momentum);
        if let (Some((_, n)), Some((_, c))) = (&mut self.shortcut, &cache.shortcut) {
            n.update_stats(c, momentum);
        }
    }
}

impl Module for BasicBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv1.params();
        v.extend(self.norm1.params());
        v.extend(self.conv2.params());
        v.extend(self.norm2.params());
        if let Some((c, n)) = &self.shortcut {
            v.extend(c.params());
            v.extend(n.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.norm1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.norm2.params_mut());
        if let Some((c, n)) = &mut self.shortcut {
            v.extend(c.params_mut());
            v.extend(n.params_mut());
        }
        v
    }
}

impl DiffModule for BasicBlock {
    type Cache = BlockCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (y1, conv1) = self.conv1.forward(x)?;
        let (pre1, norm1) = self.norm1.forward(&y1)?;
        let a1 = elu_tensor(&pre1);
        let (y2, conv2) = self.conv2.forward(&a1)?;
        let (mut pre_out, norm2) = self.norm2.forward(&y2)?;
        let shortcut = match &self.shortcut {
            Some((c, n)) => {
                let (s, cc) = c.forward(x)?;
                let (s, nc) = n.forward(&s)?;
                pre_out.add_assign(&s);
                Some((cc, nc))
            }
            None => {
                pre_out.add_assign(x);
                None
            }
        };
        let out = elu_tensor(&pre_out);
        Ok((
            out,
            BlockCache {
                conv1,
                norm1,
                pre1,
                conv2,
                norm2,
                shortcut,
                pre_out,
            },
        ))
    }

    fn backward(&mut self, c: &BlockCache, grad_out: &Tensor) -> Tensor {
        let d_pre = elu_backward(&c.pre_out, grad_out);
        let d_y2 = self.norm2.backward(&c.norm2, &d_pre);
        let d_a1 = self.conv2.backward(&c.conv2, &d_y2);
        let d_pre1 = elu_backward(&c.pre1, &d_a1);
        let d_y1 = self.norm1.backward(&c.norm1, &d_pre1);
        let mut dx = self.conv1.backward(&c.conv1, &d_y1);
        match (&mut self.shortcut, &c.shortcut) {
            (Some((conv, norm)), Some((cc, nc))) => {
                let ds = norm.backward(nc, &d_pre);
                dx.add_assign(&conv.backward(cc, &ds));
            }
            _ => dx.add_assign(&d_pre),
        }
        dx
    }
}

/// Encoder widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Channels of the three residual stages; the stem uses the first.
    pub channels: [usize; 3],
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            channels: [64, 128, 256],
            feature_dim: 256,
        }
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            in_channels: 6,
            channels: [16, 32, 64],
            feature_dim: 32,
        }
    }

    /// Smallest input height and width accepted.
    pub const MIN_SIZE: usize = 4;
}

/// Stem convolution, three stages of two basic blocks (stride 2 entering
/// stages two and three), global average pooling and a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem: Conv2d,
    pub stem_norm: AffineNorm,
    pub blocks: Vec<BasicBlock>,
    pub fc: Linear,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    stem: Tensor,
    stem_norm: NormCache,
    stem_pre: Tensor,
    blocks: Vec<BlockCache>,
    pooled_shape: Vec<usize>,
    pooled: Vec<f64>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(name: &str, config: &EncoderConfig, rng: &mut R) -> Self {
        let [c0, c1, c2] = config.channels;
        let stem = Conv2d::new(&format!("{name}.stem"), config.in_channels, c0, 3, 1, rng);
        let stem_norm = AffineNorm::new(&format!("{name}.stem_norm"), c0);
        let plan = [(c0, c0, 1), (c0, c0, 1), (c0, c1, 2), (c1, c1, 1), (c1, c2, 2), (c2, c2, 1)];
        let blocks = plan
            .iter()
            .enumerate()
            .map(|(i, &(a, b, s))| BasicBlock::new(&format!("{name}.stage{}.block{}", i / 2 + 1, i % 2), a, b, s, rng))
            .collect();
        let mut fc = Linear::new(&format!("{name}.fc"), c2, config.feature_dim, rng);
        fc.bias.value.fill(0.0);
        Self {
            config: config.clone(),
            stem,
            stem_norm,
            blocks,
            fc,
        }
    }

    /// Accepts `[6, H, W]` or a stacked pair `[2, 3, H, W]`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, EncoderCache)> {
        let x = match *x.shape() {
            [2, c, h, w] => x.clone().reshape(&[2 * c, h, w])?,
            _ => x.clone(),
        };
        let (c, h, w) = dims3(&x)?;
        if c != self.config.in_channels {
            return Err(Error::shape(&[self.config.in_channels, h, w], x.shape()));
        }
        if h < EncoderConfig::MIN_SIZE || w < EncoderConfig::MIN_SIZE {
            return Err(Error::InvalidArgument(format!(
                "encoder input {h}x{w} is below the {0}x{0} minimum",
                EncoderConfig::MIN_SIZE
            )));
        }
        let (y, stem) = self.stem.forward(&x)?;
        let (stem_pre, stem_norm) = self.stem_norm.forward(&y)?;
        let mut a = elu_tensor(&stem_pre);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&a)?;
            blocks.push(cache);
            a = next;
        }
        let (ch, hh, ww) = dims3(&a)?;
        let plane = (hh * ww) as f64;
        let pooled: Vec<f64> = (0..ch)
            .map(|k| a.data()[k * hh * ww..(k + 1) * hh * ww].iter().sum::<f64>() / plane)
            .collect();
        let out = self.fc.apply(&pooled)?;
        Ok((
            Tensor::vector(out),
            EncoderCache {
                stem,
                stem_norm,
                stem_pre,
                blocks,
                pooled_shape: a.shape().to_vec(),
                pooled,
            },
        ))
    }

    pub fn update_stats(&mut self, cache: &EncoderCache, momentum: f64) {
        self.stem_norm.update_stats(&cache.stem_norm, momentum);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.update_stats(c, momentum);
        }
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.stem.params();
        v.extend(self.stem_norm.params());
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.fc.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        v.extend(self.stem_norm.params_mut());
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.fc.params_mut());
        v
    }
}

impl DiffModule for Encoder {
    type Cache = EncoderCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, EncoderCache)> {
        self.encode(x)
    }

    /// Returns the gradient for the `[C, H, W]` input.
    fn backward(&mut self, c: &EncoderCache, grad_out: &Tensor) -> Tensor {
        let d_pool = self.fc.backprop(&c.pooled, grad_out.data());
        let (ch, hh, ww) = (c.pooled_shape[0], c.pooled_shape[1], c.pooled_shape[2]);
        let plane = hh * ww;
        let mut d = Vec::with_capacity(ch * plane);
        for g in d_pool.iter().take(ch) {
            d.extend(std::iter::repeat_n(g / plane as f64, plane));
        }
        let mut d = Tensor::from_vec(&c.pooled_shape, d).unwrap();
        for (b, bc) in self.blocks.iter_mut().zip(&c.blocks).rev() {
            d = b.backward(bc, &d);
        }
        let d = elu_backward(&c.stem_pre, &d);
        let d = self.stem_norm.backward(&c.stem_norm, &d);
        self.stem.backward(&c.stem, &d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            in_channels: 6,
            channels: [4, 6, 8],
            feature_dim: 5,
        }
    }

    #[test]
    fn conv_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new("c", 1, 1, 3, 1, &mut rng);
        conv.weight.value = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        conv.bias.value = Tensor::vector(vec![0.5]);
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = conv.forward(&x).unwrap();
        // Cross-shaped stencil with zero padding.
        assert_eq!(y.data(), &[6.5, 7.5, 8.5, 9.5]);
    }

    #[test]
    fn strided_output_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new("c", 2, 3, 3, 2, &mut rng);
        assert_eq!(conv.output_size(16, 64), (8, 32));
        assert_eq!(conv.output_size(5, 7), (3, 4));
        let (y, _) = conv.forward(&Tensor::zeros(&[2, 5, 7])).unwrap();
        assert_eq!(y.shape(), &[3, 3, 4]);
    }

    #[test]
    fn norm_uses_running_stats() {
        let mut n = AffineNorm::new("n", 2);
        n.running_mean.value = Tensor::vector(vec![1.0, -1.0]);
        n.running_var.value = Tensor::vector(vec![4.0 - NORM_EPS, 1.0 - NORM_EPS]);
        n.gamma.value = Tensor::vector(vec![2.0, 1.0]);
        n.beta.value = Tensor::vector(vec![0.0, 3.0]);
        let x = Tensor::from_vec(&[2, 1, 2], vec![3.0, 5.0, -1.0, 1.0]).unwrap();
        let (y, c) = n.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip([2.0, 4.0, 3.0, 5.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c.observed_mean, vec![4.0, 0.0]);
        assert_eq!(c.observed_var, vec![1.0, 1.0]);
        n.update_stats(&c, 0.5);
        assert_eq!(n.running_mean.value.data(), &[2.5, -0.5]);
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new("e", &tiny(), &mut rng);
        let (y, _) = enc.encode(&Tensor::zeros(&[2, 3, 8, 16])).unwrap();
        assert_eq!(y.shape(), &[5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_width_is_independent_of_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::new("e", &tiny(), &mut rng);
        for (h, w) in [(4, 4), (8, 16), (9, 13), (16, 64)] {
            let x = Tensor::from_vec(&[6, h, w], (0..6 * h * w).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            assert_eq!(enc.encode(&x).unwrap().0.shape(), &[5]);
        }
    }

    #[test]
    fn too_small_input_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::new("e", &tiny(), &mut rng);
        assert!(enc.encode(&Tensor::zeros(&[6, 3, 16])).is_err());
        assert!(enc.encode(&Tensor::zeros(&[5, 8, 16])).is_err());
    }

    #[test]
    fn param_count_follows_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny();
        let enc = Encoder::new("e", &cfg, &mut rng);
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let norm = |c: usize| 2 * c;
        let block = |i: usize, o: usize, proj: bool| {
            conv(i, o, 3) + norm(o) + conv(o, o, 3) + norm(o) + if proj { conv(i, o, 1) + norm(o) } else { 0 }
        };
        let expected = conv(6, 4, 3)
            + norm(4)
            + 2 * block(4, 4, false)
            + block(4, 6, true)
            + block(6, 6, false)
            + block(6, 8, true)
            + block(8, 8, false)
            + 8 * 5
            + 5;
        assert_eq!(enc.param_count(), expected);
        let names: std::collections::HashSet<_> = enc.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names.len(), enc.params().len());
    }
}
