use nalgebra::Vector6;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_io::ImuWindow;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::nn::conv::{Encoder, EncoderCache, EncoderConfig};
use crate::nn::heads::{AttentionCache, AttentionHead, FcActivationCache, FcActivationHead};
use crate::nn::lstm::{Lstm, LstmCache};
use crate::nn::{DiffModule, Linear, Module, Param, Tensor};
use crate::range_image::{remap, NormalMap, ProjectionConfig, VertexMap};

/// How inertial data enters the estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImuMode {
    /// LSTM branch predicts `T̂`; current maps are remapped by it.
    InitialPose,
    /// LSTM hidden states are appended to the map features; no remap.
    FeatureConcat,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Translation from vertex features; rotation from vertex and normal features.
    TwoBranch,
    /// One head over vertex and normal features for both outputs.
    Merged,
    /// One head over vertex features; the normal encoder is absent.
    VertexOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadType {
    Attention,
    FcActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub imu_mode: ImuMode,
    pub head_mode: HeadMode,
    pub head_type: HeadType,
    pub encoder: EncoderConfig,
    pub lstm_hidden: usize,
    /// Width of the hidden FC layer in the IMU pose head.
    pub imu_fc: usize,
    /// Output width of the attention or FC-activation head.
    pub head_width: usize,
    /// IMU window length `S`.
    pub imu_window: usize,
    /// Multiplies rotation outputs (radians).
    pub rotation_scale: f64,
    /// Multiplies vertex-map coordinates before encoding.
    pub vertex_scale: f64,
    pub accel_scale: f64,
    pub gyro_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            imu_mode: ImuMode::InitialPose,
            head_mode: HeadMode::TwoBranch,
            head_type: HeadType::Attention,
            encoder: EncoderConfig::default(),
            lstm_hidden: 64,
            imu_fc: 64,
            head_width: 128,
            imu_window: 15,
            rotation_scale: 0.1,
            vertex_scale: 0.1,
            accel_scale: 0.1,
            gyro_scale: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small widths for 16×64 maps.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            lstm_hidden: 32,
            imu_fc: 32,
            head_width: 32,
            ..Self::default()
        }
    }
}

/// Attention or FC-activation layer.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadLayer {
    Attention(AttentionHead),
    Fc(FcActivationHead),
}

#[derive(Clone, Debug)]
pub enum HeadCache {
    Attention(AttentionCache),
    Fc(FcActivationCache),
}

impl HeadLayer {
    pub fn new(kind: HeadType, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            HeadType::Attention => HeadLayer::Attention(AttentionHead::new(name, input, output, rng)),
            HeadType::FcActivation => HeadLayer::Fc(FcActivationHead::new(name, input, output, rng)),
        }
    }
}

impl Module for HeadLayer {
    fn params(&self) -> Vec<&Param> {
        match self {
            HeadLayer::Attention(h) => h.params(),
            HeadLayer::Fc(h) => h.params(),
        }
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            HeadLayer::Attention(h) => h.params_mut(),
            HeadLayer::Fc(h) => h.params_mut(),
        }
    }
}

impl DiffModule for HeadLayer {
    type Cache = HeadCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, HeadCache)> {
        Ok(match self {
            HeadLayer::Attention(h) => {
                let (y, c) = h.forward(x)?;
                (y, HeadCache::Attention(c))
            }
            HeadLayer::Fc(h) => {
                let (y, c) = h.forward(x)?;
                (y, HeadCache::Fc(c))
            }
        })
    }

    fn backward(&mut self, cache: &HeadCache, grad_out: &Tensor) -> Tensor {
        match (self, cache) {
            (HeadLayer::Attention(h), HeadCache::Attention(c)) => h.backward(c, grad_out),
            (HeadLayer::Fc(h), HeadCache::Fc(c)) => h.backward(c, grad_out),
            _ => panic!("head cache does not match head type"),
        }
    }
}

/// Pair of untied LSTMs over angular velocity and linear acceleration.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuEncoder {
    pub gyro: Lstm,
    pub accel: Lstm,
}

/// `q̂ = s · W_q tanh(F_q h_gyro)`, `t̂ = W_t tanh(F_t h_accel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuPoseHead {
    pub q_fc: Linear,
    pub q_out: Linear,
    pub t_fc: Linear,
    pub t_out: Linear,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    gyro: Option<(LstmCache, usize)>,
    accel: Option<(LstmCache, usize)>,
    imu_hidden: Option<(Vec<f64>, Vec<f64>)>,
    imu_head: Option<(Vec<f64>, Vec<f64>)>,
    vertex: EncoderCache,
    normal: Option<EncoderCache>,
    head_t: HeadCache,
    head_r: Option<HeadCache>,
    act_t: Vec<f64>,
    act_r: Vec<f64>,
}

/// One relative-pose estimate: `pose = residual ∘ initial`.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub pose: Pose,
    pub initial: Pose,
    pub residual: Pose,
    pub cache: ForwardCache,
}

/// Maps of the last and current scans plus the IMU window between them.
#[derive(Clone, Copy, Debug)]
pub struct PairInput<'a> {
    pub last_vertex: &'a VertexMap,
    pub last_normal: &'a NormalMap,
    pub current_vertex: &'a VertexMap,
    pub current_normal: &'a NormalMap,
    pub imu: Option<&'a ImuWindow>,
    pub projection: &'a ProjectionConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdometryModel {
    pub config: ModelConfig,
    pub imu: Option<ImuEncoder>,
    pub imu_head: Option<ImuPoseHead>,
    pub vertex_encoder: Encoder,
    pub normal_encoder: Option<Encoder>,
    /// Translation head, or the shared head in merged and vertex-only modes.
    pub head_t: HeadLayer,
    pub head_r: Option<HeadLayer>,
    pub out_t: Linear,
    pub out_q: Linear,
}

fn concat(parts: &[&[f64]]) -> Tensor {
    Tensor::vector(parts.iter().flat_map(|p| p.iter().copied()).collect())
}

fn lstm_input(window: &ImuWindow, cols: std::ops::Range<usize>, scale: f64) -> Tensor {
    let data = window
        .rows
        .iter()
        .flat_map(|r| r[cols.clone()].iter().map(move |v| v * scale))
        .collect();
    Tensor::from_vec(&[window.len(), 3], data).unwrap()
}

fn map_pair(a: &[f64], b: &[f64], scale: f64, h: usize, w: usize) -> Tensor {
    let data = a.iter().chain(b).map(|v| v * scale).collect();
    Tensor::from_vec(&[6, h, w], data).unwrap()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

impl OdometryModel {
    pub fn new(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config;
        let f = c.encoder.feature_dim;
        let (imu, imu_head) = match c.imu_mode {
            ImuMode::None => (None, None),
            mode => {
                let enc = ImuEncoder {
                    gyro: Lstm::new("imu.gyro_lstm", 3, c.lstm_hidden, &mut rng),
                    accel: Lstm::new("imu.accel_lstm", 3, c.lstm_hidden, &mut rng),
                };
                let head = (mode == ImuMode::InitialPose).then(|| ImuPoseHead {
                    q_fc: Linear::new("imu.q_fc", c.lstm_hidden, c.imu_fc, &mut rng),
                    q_out: Linear::zeros("imu.q_out", c.imu_fc, 3),
                    t_fc: Linear::new("imu.t_fc", c.lstm_hidden, c.imu_fc, &mut rng),
                    t_out: Linear::zeros("imu.t_out", c.imu_fc, 3),
                });
                (Some(enc), head)
            }
        };
        let imu_feat = if c.imu_mode == ImuMode::FeatureConcat { 2 * c.lstm_hidden } else { 0 };
        let vertex_encoder = Encoder::new("vertex_encoder", &c.encoder, &mut rng);
        let normal_encoder =
            (c.head_mode != HeadMode::VertexOnly).then(|| Encoder::new("normal_encoder", &c.encoder, &mut rng));
        let (head_t, head_r) = match c.head_mode {
            HeadMode::TwoBranch => (
                HeadLayer::new(c.head_type, "head.translation", f + imu_feat, c.head_width, &mut rng),
                Some(HeadLayer::new(c.head_type, "head.rotation", 2 * f + imu_feat, c.head_width, &mut rng)),
            ),
            HeadMode::Merged => (
                HeadLayer::new(c.head_type, "head.shared", 2 * f + imu_feat, c.head_width, &mut rng),
                None,
            ),
            HeadMode::VertexOnly => (
                HeadLayer::new(c.head_type, "head.shared", f + imu_feat, c.head_width, &mut rng),
                None,
            ),
        };
        Self {
            config: config.clone(),
            imu,
            imu_head,
            vertex_encoder,
            normal_encoder,
            head_t,
            head_r,
            out_t: Linear::zeros("out.translation", c.head_width, 3),
            out_q: Linear::zeros("out.rotation", c.head_width, 3),
        }
    }

    /// Initial pose from the IMU branch alone; identity unless the mode is
    /// [`ImuMode::InitialPose`].
    pub fn imu_initial_pose(&self, window: &ImuWindow) -> Result<Pose> {
        let (hidden, _, _) = self.imu_features(Some(window))?;
        Ok(match (&self.imu_head, hidden) {
            (Some(head), Some((hg, ha))) => self.apply_imu_head(head, &hg, &ha)?.0,
            _ => Pose::identity(),
        })
    }

    #[allow(clippy::type_complexity)]
    fn imu_features(
        &self,
        window: Option<&ImuWindow>,
    ) -> Result<(Option<(Vec<f64>, Vec<f64>)>, Option<(LstmCache, usize)>, Option<(LstmCache, usize)>)> {
        let Some(enc) = &self.imu else {
            return Ok((None, None, None));
        };
        let window = window.ok_or_else(|| Error::Config("IMU mode requires an IMU window".into()))?;
        if window.len() != self.config.imu_window {
            return Err(Error::shape(&[self.config.imu_window, 6], &[window.len(), 6]));
        }
        let (_, gc) = enc.gyro.forward(&lstm_input(window, 3..6, self.config.gyro_scale))?;
        let (_, ac) = enc.accel.forward(&lstm_input(window, 0..3, self.config.accel_scale))?;
        let hg = gc.final_hidden().to_vec();
        let ha = ac.final_hidden().to_vec();
        let steps = window.len();
        Ok((Some((hg, ha)), Some((gc, steps)), Some((ac, steps))))
    }

    fn apply_imu_head(&self, head: &ImuPoseHead, hg: &[f64], ha: &[f64]) -> Result<(Pose, Vec<f64>, Vec<f64>)> {
        let zq: Vec<f64> = head.q_fc.apply(hg)?.into_iter().map(f64::tanh).collect();
        let zt: Vec<f64> = head.t_fc.apply(ha)?.into_iter().map(f64::tanh).collect();
        let q = head.q_out.apply(&zq)?;
        let t = head.t_out.apply(&zt)?;
        let s = self.config.rotation_scale;
        let pose = Pose::new(
            nalgebra::Vector3::new(s * q[0], s * q[1], s * q[2]),
            nalgebra::Vector3::new(t[0], t[1], t[2]),
        );
        Ok((pose, zq, zt))
    }

    pub fn forward(&self, input: &PairInput) -> Result<Estimate> {
        let c = &self.config;
        let (hidden, gyro, accel) = self.imu_features(input.imu)?;
        let (initial, imu_head) = match (&self.imu_head, &hidden) {
            (Some(head), Some((hg, ha))) => {
                let (p, zq, zt) = self.apply_imu_head(head, hg, ha)?;
                (p, Some((zq, zt)))
            }
            _ => (Pose::identity(), None),
        };
        let remapped;
        let (cur_v, cur_n) = if c.imu_mode == ImuMode::InitialPose {
            remapped = remap(input.current_vertex, input.current_normal, &initial, input.projection)?;
            (&remapped.0, &remapped.1)
        } else {
            (input.current_vertex, input.current_normal)
        };
        let (h, w) = (input.last_vertex.grid.height, input.last_vertex.grid.width);
        if !cur_v.grid.same_shape(&input.last_vertex.grid) {
            return Err(Error::shape(&[h, w], &[cur_v.grid.height, cur_v.grid.width]));
        }
        let vx = map_pair(
            &input.last_vertex.grid.to_channels(),
            &cur_v.grid.to_channels(),
            c.vertex_scale,
            h,
            w,
        );
        let (fv, vertex) = self.vertex_encoder.encode(&vx)?;
        let normal_out = match &self.normal_encoder {
            Some(enc) => {
                let nx = map_pair(&input.last_normal.grid.to_channels(), &cur_n.grid.to_channels(), 1.0, h, w);
                Some(enc.encode(&nx)?)
            }
            None => None,
        };
        let imu_feat: Vec<f64> = match (&hidden, c.imu_mode) {
            (Some((hg, ha)), ImuMode::FeatureConcat) => hg.iter().chain(ha).copied().collect(),
            _ => Vec::new(),
        };
        let fv = fv.into_data();
        let fn_ = normal_out.as_ref().map(|(t, _)| t.data().to_vec()).unwrap_or_default();
        let (act_t, head_t, act_r, head_r) = match c.head_mode {
            HeadMode::TwoBranch => {
                let (at, ct) = self.head_t.forward(&concat(&[&fv, &imu_feat]))?;
                let (ar, cr) = self
                    .head_r
                    .as_ref()
                    .expect("two-branch model has a rotation head")
                    .forward(&concat(&[&fv, &fn_, &imu_feat]))?;
                (at.into_data(), ct, ar.into_data(), Some(cr))
            }
            HeadMode::Merged | HeadMode::VertexOnly => {
                let (a, ch) = self.head_t.forward(&concat(&[&fv, &fn_, &imu_feat]))?;
                let a = a.into_data();
                (a.clone(), ch, a, None)
            }
        };
        let t = self.out_t.apply(&act_t)?;
        let q = self.out_q.apply(&act_r)?;
        let s = c.rotation_scale;
        let residual = Pose::new(
            nalgebra::Vector3::new(s * q[0], s * q[1], s * q[2]),
            nalgebra::Vector3::new(t[0], t[1], t[2]),
        );
        Ok(Estimate {
            pose: residual.compose(&initial),
            initial,
            residual,
            cache: ForwardCache {
                gyro,
                accel,
                imu_hidden: hidden,
                imu_head,
                vertex,
                normal: normal_out.map(|(_, c)| c),
                head_t,
                head_r,
                act_t,
                act_r,
            },
        })
    }

    /// Accumulates parameter gradients given `dL/dδ` and `dL/dT̂` in
    /// `(roll, pitch, yaw, tx, ty, tz)` order.
    pub fn backward(&mut self, cache: &ForwardCache, d_residual: &Vector6<f64>, d_initial: &Vector6<f64>) {
        let s = self.config.rotation_scale;
        let f = self.config.encoder.feature_dim;
        let d_t = [d_residual[3], d_residual[4], d_residual[5]];
        let d_q = [s * d_residual[0], s * d_residual[1], s * d_residual[2]];
        let da_t = self.out_t.backprop(&cache.act_t, &d_t);
        let da_r = self.out_q.backprop(&cache.act_r, &d_q);
        let mut d_fv = vec![0.0; f];
        let mut d_fn = vec![0.0; f];
        let imu_len = cache
            .imu_hidden
            .as_ref()
            .filter(|_| self.config.imu_mode == ImuMode::FeatureConcat)
            .map_or(0, |(g, a)| g.len() + a.len());
        let mut d_imu = vec![0.0; imu_len];
        match self.config.head_mode {
            HeadMode::TwoBranch => {
                let dx_t = self.head_t.backward(&cache.head_t, &Tensor::vector(da_t)).into_data();
                let head_r = self.head_r.as_mut().expect("two-branch model has a rotation head");
                let dx_r = head_r
                    .backward(cache.head_r.as_ref().expect("rotation cache"), &Tensor::vector(da_r))
                    .into_data();
                add_into(&mut d_fv, &dx_t[..f]);
                add_into(&mut d_imu, &dx_t[f..]);
                add_into(&mut d_fv, &dx_r[..f]);
                add_into(&mut d_fn, &dx_r[f..2 * f]);
                add_into(&mut d_imu, &dx_r[2 * f..]);
            }
            mode => {
                let da: Vec<f64> = da_t.iter().zip(&da_r).map(|(a, b)| a + b).collect();
                let dx = self.head_t.backward(&cache.head_t, &Tensor::vector(da)).into_data();
                add_into(&mut d_fv, &dx[..f]);
                let rest = if mode == HeadMode::Merged {
                    add_into(&mut d_fn, &dx[f..2 * f]);
                    &dx[2 * f..]
                } else {
                    &dx[f..]
                };
                add_into(&mut d_imu, rest);
            }
        }
        self.vertex_encoder.backward(&cache.vertex, &Tensor::vector(d_fv));
        if let (Some(enc), Some(c)) = (&mut self.normal_encoder, &cache.normal) {
            enc.backward(c, &Tensor::vector(d_fn));
        }
        let Some((hg, ha)) = &cache.imu_hidden else {
            return;
        };
        let h = hg.len();
        let mut d_hg = vec![0.0; h];
        let mut d_ha = vec![0.0; h];
        if !d_imu.is_empty() {
            add_into(&mut d_hg, &d_imu[..h]);
            add_into(&mut d_ha, &d_imu[h..]);
        }
        if let (Some(head), Some((zq, zt))) = (&mut self.imu_head, &cache.imu_head) {
            let dq = [s * d_initial[0], s * d_initial[1], s * d_initial[2]];
            let dt = [d_initial[3], d_initial[4], d_initial[5]];
            let dzq: Vec<f64> = head.q_out.backprop(zq, &dq).iter().zip(zq).map(|(g, z)| g * (1.0 - z * z)).collect();
            let dzt: Vec<f64> = head.t_out.backprop(zt, &dt).iter().zip(zt).map(|(g, z)| g * (1.0 - z * z)).collect();
            add_into(&mut d_hg, &head.q_fc.backprop(hg, &dzq));
            add_into(&mut d_ha, &head.t_fc.backprop(ha, &dzt));
        }
        let enc = self.imu.as_mut().expect("hidden states imply an IMU encoder");
        for (lstm, cache, d_last) in [
            (&mut enc.gyro, &cache.gyro, d_hg),
            (&mut enc.accel, &cache.accel, d_ha),
        ] {
            let (c, steps) = cache.as_ref().expect("IMU caches");
            let mut d = vec![0.0; steps * h];
            d[(steps - 1) * h..].copy_from_slice(&d_last);
            lstm.backward(c, &Tensor::from_vec(&[*steps, h], d).unwrap());
        }
    }

    /// Moves running normalization statistics toward those seen in `cache`.
    pub fn update_stats(&mut self, cache: &ForwardCache, momentum: f64) {
        self.vertex_encoder.update_stats(&cache.vertex, momentum);
        if let (Some(enc), Some(c)) = (&mut self.normal_encoder, &cache.normal) {
            enc.update_stats(c, momentum);
        }
    }

    /// Output layers of every head set to zero, so the model emits `T̂`
    /// (identity without IMU).
    pub fn zero_heads(&mut self) {
        for p in self.out_t.params_mut().into_iter().chain(self.out_q.params_mut()) {
            p.value.fill(0.0);
        }
        if let Some(h) = &mut self.imu_head {
            for p in h.q_out.params_mut().into_iter().chain(h.t_out.params_mut()) {
                p.value.fill(0.0);
            }
        }
    }
}

impl Module for OdometryModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        if let Some(e) = &self.imu {
            v.extend(e.gyro.params());
            v.extend(e.accel.params());
        }
        if let Some(h) = &self.imu_head {
            v.extend(h.q_fc.params());
            v.extend(h.q_out.params());
            v.extend(h.t_fc.params());
            v.extend(h.t_out.params());
        }
        v.extend(self.vertex_encoder.params());
        if let Some(e) = &self.normal_encoder {
            v.extend(e.params());
        }
        v.extend(self.head_t.params());
        if let Some(h) = &self.head_r {
            v.extend(h.params());
        }
        v.extend(self.out_t.params());
        v.extend(self.out_q.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        if let Some(e) = &mut self.imu {
            v.extend(e.gyro.params_mut());
            v.extend(e.accel.params_mut());
        }
        if let Some(h) = &mut self.imu_head {
            v.extend(h.q_fc.params_mut());
            v.extend(h.q_out.params_mut());
            v.extend(h.t_fc.params_mut());
            v.extend(h.t_out.params_mut());
        }
        v.extend(self.vertex_encoder.params_mut());
        if let Some(e) = &mut self.normal_encoder {
            v.extend(e.params_mut());
        }
        v.extend(self.head_t.params_mut());
        if let Some(h) = &mut self.head_r {
            v.extend(h.params_mut());
        }
        v.extend(self.out_t.params_mut());
        v.extend(self.out_q.params_mut());
        v
    }
}
