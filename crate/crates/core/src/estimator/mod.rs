//! Convolutional regressor predicting local MTF values from image patches.
//!
//! A patch is normalized, then two copies are formed: the patch itself,
//! whose horizontal axis is the radial direction, and the patch rotated by
//! −90°, whose horizontal axis is the tangential direction. Each copy is
//! paired with its 180° rotation, so every direction sees two views. All
//! views of all patches sharing a PSF run through the shared trunk; their
//! feature vectors are averaged per direction and the head maps each
//! average to eight MTF values.
//!
//! Pairing a copy with its half-turn makes the direction outputs invariant
//! to a half-turn of the input, which is what makes a −90° input rotation
//! swap the two halves exactly.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
mod network;
pub mod real;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{NetConfig, StageSpec, TrainConfig};
pub use network::{Architecture, ParamTensor, Tensor};
pub use real::Real;

use crate::error::{Error, Result};
use crate::geometry::{sobel_gradient, subsample_to_channels, Axis, ChannelStack};
use crate::mtf_core::{MtfLabel, LABEL_LEN};
use crate::plane::Plane;

/// Views per direction copy: the copy and its half-turn.
pub const VIEWS: usize = 2;

/// Images fed through the trunk at once during inference.
const INFERENCE_CHUNK: usize = 256;

/// All network weights with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: NetConfig,
    arch: Architecture,
    values: Vec<f32>,
}

impl ModelParams {
    /// All-zero parameters.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let values = vec![0.0; arch.n_params()];
        Ok(ModelParams { config, arch, values })
    }

    /// Weights drawn from `N(0, 2/fan_in)`, biases zero.
    pub fn he_init(config: NetConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.arch.param_tensors() {
            if t.fan_in == 0 {
                continue;
            }
            let len: usize = t.shape.iter().product();
            let normal = Normal::new(0.0, (2.0 / t.fan_in as f64).sqrt()).expect("positive std");
            for v in &mut p.values[t.offset..t.offset + len] {
                *v = normal.sample(&mut rng) as f32;
            }
        }
        Ok(p)
    }

    pub fn from_values(config: NetConfig, values: Vec<f32>) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        if values.len() != arch.n_params() {
            return Err(Error::dims(format!(
                "expected {} parameters, got {}",
                arch.n_params(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter".into()));
        }
        Ok(ModelParams { config, arch, values })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Mean that depends only on the multiset of values and is exact under
/// uniform duplication: values are sorted, equal values grouped, and the
/// multiplicities divided by their greatest common divisor before summing.
fn multiset_mean<T: Real>(buf: &mut [T]) -> T {
    buf.sort_by(|a, b| a.partial_cmp(b).expect("values are finite"));
    let buf: &[T] = buf;
    let runs = || {
        let mut i = 0;
        std::iter::from_fn(move || {
            let v = *buf.get(i)?;
            let start = i;
            while i < buf.len() && buf[i] == v {
                i += 1;
            }
            Some((v, i - start))
        })
    };
    let g = runs().fold(0, |g, (_, c)| gcd(g, c));
    let mut acc = T::ZERO;
    for (v, c) in runs() {
        for _ in 0..c / g {
            acc += v;
        }
    }
    acc / T::from_f64((buf.len() / g) as f64)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sorted_mean(values: &[f64]) -> f64 {
    multiset_mean(&mut values.to_vec())
}

/// Maps the patch's min..max onto 0..1 and subtracts the mean. A constant
/// patch maps to zeros and is reported as degenerate.
pub fn normalize_patch(patch: &Plane) -> (Plane, bool) {
    let (lo, hi) = (patch.min(), patch.max());
    if !(hi > lo) {
        return (Plane::zeros(patch.width(), patch.height()), true);
    }
    let scale = 1.0 / (hi - lo);
    let scaled = patch.map(|v| (v - lo) * scale);
    let mean = sorted_mean(scaled.data());
    (scaled.map(|v| v - mean), false)
}

fn copy_stack(copy: &Plane, m: usize) -> Result<ChannelStack> {
    let grad = sobel_gradient(copy, Axis::Horizontal)?;
    subsample_to_channels(&ChannelStack::from_planes(&[copy, &grad])?, m)
}

fn check_patch(patch: &Plane, cfg: &NetConfig) -> Result<()> {
    let s = cfg.input_size;
    if patch.width() != s || patch.height() != s {
        return Err(Error::dims(format!(
            "patch is {}x{}, network expects {s}x{s}",
            patch.width(),
            patch.height()
        )));
    }
    Ok(())
}

/// Radial copy (the patch) and tangential copy (the patch rotated −90°),
/// each with a horizontal Sobel channel and subsampled into channels.
pub fn preprocess(patch: &Plane, cfg: &NetConfig) -> Result<(ChannelStack, ChannelStack)> {
    check_patch(patch, cfg)?;
    let (n, _) = normalize_patch(patch);
    Ok((copy_stack(&n, cfg.subsample)?, copy_stack(&n.rotate_cw90(), cfg.subsample)?))
}

/// Network-ready form of one patch: two views per direction.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPatch {
    /// Channel-major view data, index `dir * VIEWS + view`.
    views: [Vec<f64>; 2 * VIEWS],
    pub degenerate: bool,
}

impl PreparedPatch {
    pub fn new(patch: &Plane, cfg: &NetConfig) -> Result<Self> {
        check_patch(patch, cfg)?;
        let (n, degenerate) = normalize_patch(patch);
        let b = n.rotate_cw90();
        let m = cfg.subsample;
        let views = [
            copy_stack(&n, m)?.data().to_vec(),
            copy_stack(&n.rotate180(), m)?.data().to_vec(),
            copy_stack(&b, m)?.data().to_vec(),
            copy_stack(&b.rotate180(), m)?.data().to_vec(),
        ];
        Ok(PreparedPatch { views, degenerate })
    }
}

/// Patches sharing one PSF together with their common target.
#[derive(Debug, Clone)]
pub struct TrainingGroup {
    pub patches: Vec<PreparedPatch>,
    pub target: MtfLabel,
}

/// Contiguous image range of one `(group, direction)` column in the batch.
#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    count: usize,
}

fn assemble<T: Real>(arch: &Architecture, groups: &[&[PreparedPatch]]) -> Result<(Tensor<T>, Vec<Span>)> {
    let c = arch.input_channels();
    let hw = arch.input_hw();
    let plane = hw * hw;
    let mut spans = Vec::with_capacity(2 * groups.len());
    let mut n = 0;
    for g in groups {
        if g.is_empty() {
            return Err(Error::Empty("group without patches".into()));
        }
        for _ in 0..2 {
            spans.push(Span {
                start: n,
                count: g.len() * VIEWS,
            });
            n += g.len() * VIEWS;
        }
    }
    let mut x = Tensor::zeros(c, n, hw, hw);
    let mut img = 0;
    for g in groups {
        for dir in 0..2 {
            for p in g.iter() {
                for v in 0..VIEWS {
                    let src = &p.views[dir * VIEWS + v];
                    if src.len() != c * plane {
                        return Err(Error::dims("prepared patch does not match the network"));
                    }
                    for ch in 0..c {
                        let dst = &mut x.data[(ch * n + img) * plane..][..plane];
                        for (d, s) in dst.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
                            *d = T::from_f64(*s);
                        }
                    }
                    img += 1;
                }
            }
        }
    }
    Ok((x, spans))
}

/// Mean of each span's feature columns.
fn average_spans<T: Real>(features: &[T], dim: usize, n: usize, spans: &[Span]) -> Vec<T> {
    let cols = spans.len();
    let mut out = vec![T::ZERO; dim * cols];
    let mut buf: Vec<T> = Vec::new();
    for c in 0..dim {
        let row = &features[c * n..(c + 1) * n];
        for (j, s) in spans.iter().enumerate() {
            buf.clear();
            buf.extend_from_slice(&row[s.start..s.start + s.count]);
            out[c * cols + j] = multiset_mean(&mut buf);
        }
    }
    out
}

fn check_finite<T: Real>(v: &[T], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

struct BatchPass<T> {
    trunk: network::TrunkCache<T>,
    head: network::HeadCache<T>,
    spans: Vec<Span>,
    n_images: usize,
}

fn run_batch<T: Real>(arch: &Architecture, p: &[T], groups: &[&[PreparedPatch]]) -> Result<BatchPass<T>> {
    let (x, spans) = assemble::<T>(arch, groups)?;
    let n_images = x.n;
    let trunk = arch.trunk_forward(p, &x)?;
    check_finite(trunk.features(), "trunk activation")?;
    let avg = average_spans(trunk.features(), arch.feature_dim(), n_images, &spans);
    let head = arch.head_forward(p, avg, spans.len());
    check_finite(&head.output, "network output")?;
    Ok(BatchPass {
        trunk,
        head,
        spans,
        n_images,
    })
}

fn labels_of<T: Real>(output: &[T], cols: usize) -> Vec<MtfLabel> {
    (0..cols / 2)
        .map(|g| {
            let mut l = MtfLabel::ones();
            for k in 0..LABEL_LEN {
                l.radial[k] = output[k * cols + 2 * g].to_f64();
                l.tangential[k] = output[k * cols + 2 * g + 1].to_f64();
            }
            l
        })
        .collect()
}

/// Predictions for groups of prepared patches; each group shares a PSF.
pub fn predict_prepared(params: &ModelParams, groups: &[&[PreparedPatch]]) -> Result<Vec<MtfLabel>> {
    let mut out = Vec::with_capacity(groups.len());
    let mut start = 0;
    while start < groups.len() {
        let mut end = start;
        let mut images = 0;
        while end < groups.len() && (end == start || images + 2 * VIEWS * groups[end].len() <= INFERENCE_CHUNK) {
            images += 2 * VIEWS * groups[end].len();
            end += 1;
        }
        out.extend(predict_with(&params.arch, &params.values, &groups[start..end])?);
        start = end;
    }
    Ok(out)
}

pub(crate) fn predict_with<T: Real>(arch: &Architecture, p: &[T], groups: &[&[PreparedPatch]]) -> Result<Vec<MtfLabel>> {
    let pass = run_batch(arch, p, groups)?;
    Ok(labels_of(&pass.head.output, pass.head.cols))
}

/// Prediction from several patches blurred by the same PSF.
pub fn predict_multi(params: &ModelParams, patches: &[Plane]) -> Result<MtfLabel> {
    if patches.is_empty() {
        return Err(Error::Empty("no patches".into()));
    }
    let prepared = patches
        .iter()
        .map(|p| PreparedPatch::new(p, &params.config))
        .collect::<Result<Vec<_>>>()?;
    Ok(predict_prepared(params, &[&prepared])?.remove(0))
}

/// Single-patch prediction: radial values from the patch, tangential
/// values from its −90° copy.
pub fn forward(params: &ModelParams, patch: &Plane) -> Result<MtfLabel> {
    predict_multi(params, std::slice::from_ref(patch))
}

/// Trunk and head applied to one stack without view pairing. Returns the
/// eight outputs and the trunk feature vector.
pub fn forward_single(params: &ModelParams, stack: &ChannelStack) -> Result<(Vec<f64>, Vec<f64>)> {
    let arch = &params.arch;
    if stack.channels() != arch.input_channels() || stack.height() != arch.input_hw() || stack.width() != arch.input_hw() {
        return Err(Error::dims(format!(
            "stack {}x{}x{} does not match network input {}x{}x{}",
            stack.height(),
            stack.width(),
            stack.channels(),
            arch.input_hw(),
            arch.input_hw(),
            arch.input_channels()
        )));
    }
    let x = Tensor {
        c: stack.channels(),
        n: 1,
        h: stack.height(),
        w: stack.width(),
        data: stack.data().iter().map(|&v| v as f32).collect(),
    };
    let trunk = arch.trunk_forward(&params.values, &x)?;
    let features: Vec<f32> = trunk.features().to_vec();
    check_finite(&features, "trunk activation")?;
    let head = arch.head_forward(&params.values, features.clone(), 1);
    Ok((
        head.output.iter().map(|&v| v as f64).collect(),
        features.iter().map(|&v| v as f64).collect(),
    ))
}

/// Elementwise mean of feature vectors, independent of their order.
pub fn average_features(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = features.first().ok_or_else(|| Error::Empty("no feature vectors".into()))?;
    if features.iter().any(|f| f.len() != first.len()) {
        return Err(Error::dims("feature vectors differ in length"));
    }
    Ok((0..first.len())
        .map(|i| sorted_mean(&features.iter().map(|f| f[i]).collect::<Vec<_>>()))
        .collect())
}

/// Mean squared difference.
pub fn loss(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64
}

/// Mean squared error over all groups and outputs, and its gradient with
/// respect to every parameter.
pub fn loss_and_gradient<T: Real>(arch: &Architecture, p: &[T], batch: &[TrainingGroup]) -> Result<(f64, Vec<T>)> {
    let groups: Vec<&[PreparedPatch]> = batch.iter().map(|g| g.patches.as_slice()).collect();
    let pass = run_batch(arch, p, &groups)?;
    let cols = pass.head.cols;
    let n_out = arch.outputs();
    let denom = (cols * n_out) as f64;
    let mut dout = vec![T::ZERO; n_out * cols];
    let mut total = 0.0;
    for (g, grp) in batch.iter().enumerate() {
        for (d, tgt) in [&grp.target.radial, &grp.target.tangential].into_iter().enumerate() {
            let col = 2 * g + d;
            for k in 0..n_out {
                let pred = pass.head.output[k * cols + col];
                let diff = pred.to_f64() - tgt[k];
                total += diff * diff;
                dout[k * cols + col] = T::from_f64(2.0 * diff / denom);
            }
        }
    }
    let mut grad = vec![T::ZERO; p.len()];
    let davg = arch.head_backward(p, &pass.head, &dout, &mut grad);
    let dim = arch.feature_dim();
    let mut dfeat = vec![T::ZERO; dim * pass.n_images];
    for c in 0..dim {
        for (j, s) in pass.spans.iter().enumerate() {
            let v = davg[c * cols + j] / T::from_f64(s.count as f64);
            for slot in &mut dfeat[c * pass.n_images + s.start..][..s.count] {
                *slot = v;
            }
        }
    }
    arch.trunk_backward(p, &pass.trunk, dfeat, &mut grad);
    check_finite(&grad, "gradient")?;
    Ok((total / denom, grad))
}

/// Batch loss and gradient of f32 parameters.
pub fn backward(params: &ModelParams, batch: &[TrainingGroup]) -> Result<(f64, Vec<f32>)> {
    loss_and_gradient(&params.arch, &params.values, batch)
}
