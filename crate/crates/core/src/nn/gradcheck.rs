//! Central finite-difference checks for [`DiffModule`] backward passes.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{DiffModule, Tensor};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries sampled per tensor; tensors at or below this size are checked fully.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_entries: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x` along the given coordinates.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], step: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    coords
        .iter()
        .map(|&k| {
            let orig = x[k];
            x[k] = orig + step;
            let plus = f(&x);
            x[k] = orig - step;
            let minus = f(&x);
            x[k] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

fn pick<R: Rng>(len: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks input and parameter gradients of `module` at `input` for the
/// scalar objective `c · forward(x)` with a random projection `c`.
pub fn check_module<M: DiffModule>(module: &mut M, input: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (y, cache) = module.forward(input)?;
    let proj = Tensor::from_vec(y.shape(), (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    module.zero_grad();
    let dx = module.backward(&cache, &proj);
    drop(cache);
    let objective = |m: &M, x: &Tensor| -> f64 { m.forward(x).map(|(y, _)| y.dot(&proj)).unwrap_or(f64::NAN) };

    let mut report = GradCheckReport::default();
    let coords = pick(input.len(), opts.max_entries, &mut rng);
    let numeric = numeric_gradient(
        |v| objective(module, &Tensor::from_vec(input.shape(), v.to_vec()).unwrap()),
        input.data(),
        &coords,
        opts.step,
    );
    let analytic: Vec<f64> = coords.iter().map(|&k| dx.data()[k]).collect();
    report.tensors.push(TensorCheck {
        name: "input".into(),
        checked: coords.len(),
        rel_error: relative_error(&analytic, &numeric),
    });

    let count = module.params().len();
    for pi in 0..count {
        let (name, len, trainable, grad) = {
            let p = &module.params()[pi];
            (p.name.clone(), p.value.len(), p.trainable, p.grad.data().to_vec())
        };
        if !trainable {
            continue;
        }
        let coords = pick(len, opts.max_entries, &mut rng);
        let mut numeric = Vec::with_capacity(coords.len());
        for &k in &coords {
            let orig = module.params()[pi].value.data()[k];
            let mut eval = |v: f64| {
                module.params_mut()[pi].value.data_mut()[k] = v;
                objective(module, input)
            };
            let plus = eval(orig + opts.step);
            let minus = eval(orig - opts.step);
            module.params_mut()[pi].value.data_mut()[k] = orig;
            numeric.push((plus - minus) / (2.0 * opts.step));
        }
        let analytic: Vec<f64> = coords.iter().map(|&k| grad[k]).collect();
        report.tensors.push(TensorCheck {
            name,
            checked: coords.len(),
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    Ok(report)
}

/// Worst relative error of one suite entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub module: &'static str,
    pub max_rel_error: f64,
    pub worst: String,
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn module_result<M: DiffModule>(module: &'static str, m: &mut M, x: &Tensor, seed: u64) -> Result<SuiteResult> {
    let r = check_module(
        m,
        x,
        &GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        },
    )?;
    Ok(SuiteResult {
        module,
        max_rel_error: r.max_rel_error(),
        worst: r.worst().map(|t| t.name.clone()).unwrap_or_default(),
    })
}

fn pose_result(module: &'static str, analytic: &[f64], numeric: &[f64]) -> SuiteResult {
    SuiteResult {
        module,
        max_rel_error: relative_error(analytic, numeric),
        worst: "pose".into(),
    }
}

/// Every network building block plus the registration loss gradients,
/// with inputs and parameters drawn from `seed`.
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    use super::conv::{BasicBlock, Encoder, EncoderConfig};
    use super::heads::{AttentionHead, FcActivationHead};
    use super::linear::Linear;
    use super::lstm::Lstm;
    use crate::correspondence::{loss_at, loss_gradient, match_nearest, build_index, LossWeights};
    use crate::geometry::{Pose, PoseVector, Vec3};
    use crate::pipeline::{pair_loss, PipelineConfig};
    use crate::preprocess::PreprocessedCloud;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let x = random_tensor(&[12], &mut rng);
    out.push(module_result("linear", &mut Linear::new("fc", 12, 6, &mut rng), &x, seed)?);
    let x = random_tensor(&[15, 6], &mut rng);
    out.push(module_result("lstm", &mut Lstm::new("lstm", 6, 8, &mut rng), &x, seed)?);
    let x = random_tensor(&[3, 6, 8], &mut rng);
    out.push(module_result("residual-block", &mut BasicBlock::new("b", 3, 3, 1, &mut rng), &x, seed)?);
    out.push(module_result("residual-block-strided", &mut BasicBlock::new("b", 3, 5, 2, &mut rng), &x, seed)?);
    let x = random_tensor(&[24], &mut rng);
    out.push(module_result("attention-head", &mut AttentionHead::new("att", 24, 10, &mut rng), &x, seed)?);
    out.push(module_result("fc-activation-head", &mut FcActivationHead::new("fc", 24, 10, &mut rng), &x, seed)?);
    let enc = EncoderConfig {
        in_channels: 6,
        channels: [3, 4, 5],
        feature_dim: 4,
    };
    let x = random_tensor(&[6, 8, 16], &mut rng);
    out.push(module_result("encoder", &mut Encoder::new("enc", &enc, &mut rng), &x, seed)?);

    let mut vec3 = |scale: f64| Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale));
    let points: Vec<Vec3> = (0..200).map(|_| vec3(5.0)).collect();
    let normals: Vec<Vec3> = (0..200).map(|_| vec3(1.0).normalize()).collect();
    let target = PreprocessedCloud::new(points.iter().map(|p| p + vec3(0.2)).collect(), normals.iter().map(|n| (n + vec3(0.2)).normalize()).collect());
    let source = PreprocessedCloud::new(points, normals);
    let p = PoseVector::from(Pose::new(vec3(0.1), vec3(0.3)));
    let index = build_index(&target)?;
    let weights = LossWeights::default();
    let c = match_nearest(&source.transformed(&p.to_pose()), &index, &target, f64::INFINITY)?;
    let analytic = loss_gradient(&p, &source, &c, &weights);
    let numeric = numeric_gradient(
        |v| loss_at(&PoseVector(nalgebra::Vector6::from_column_slice(v)), &source, &c, &weights).unwrap_or(f64::NAN),
        p.0.as_slice(),
        &[0, 1, 2, 3, 4, 5],
        1e-6,
    );
    out.push(pose_result("registration-loss", analytic.as_slice(), &numeric));

    let cfg = PipelineConfig::default();
    let residual = Pose::new(vec3(0.05), vec3(0.2));
    let initial = Pose::new(vec3(0.05), vec3(0.5));
    let pl = pair_loss(&residual, &initial, &source, &c, &cfg)?;
    for (name, which, analytic) in [
        ("composed-loss-residual", true, pl.d_residual),
        ("composed-loss-initial", false, pl.d_initial),
    ] {
        let base = PoseVector::from(if which { residual } else { initial });
        let numeric = numeric_gradient(
            |v| {
                let moved = PoseVector(nalgebra::Vector6::from_column_slice(v)).to_pose();
                let (r, i) = if which { (moved, initial) } else { (residual, moved) };
                pair_loss(&r, &i, &source, &c, &cfg).map(|l| l.loss.total).unwrap_or(f64::NAN)
            },
            base.0.as_slice(),
            &[0, 1, 2, 3, 4, 5],
            1e-6,
        );
        out.push(pose_result(name, analytic.as_slice(), &numeric));
    }
    Ok(out)
}
