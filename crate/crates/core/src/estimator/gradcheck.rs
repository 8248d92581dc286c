//! Finite-difference verification of the reverse pass.
//!
//! Every parameter is perturbed by `±h` and the batch loss recomputed in
//! float64. A weight only changes its own layer's pre-activation (weight
//! `(o, r)` adds `h · cols[r]` to output channel `o`), so each evaluation
//! starts from a cached base pass at that layer and recomputes only what
//! lies downstream.
//!
//! Central differences are invalid when `±h` moves a ReLU input across
//! zero. Such crossings are detected by comparing every downstream ReLU
//! input with its sign in the base pass. The difference is then repeated
//! with every gate held at its base state, which leaves the derivative at
//! the base point unchanged. Shrinking the step instead trades the kink
//! for cancellation error of the same order as the tolerance.

use std::cell::Cell;

use rayon::prelude::*;

use super::network::{Architecture, Tensor};
use super::{assemble, average_spans, loss_and_gradient, PreparedPatch, Span, TrainingGroup};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Gradients below this magnitude are compared in absolute terms.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
    /// Parameter with the largest error: offset, analytic, numeric.
    pub worst: (usize, f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub checked: usize,
    /// Parameters whose perturbation crossed a ReLU kink and were
    /// differenced with held gates.
    pub held_gates: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

struct BaseBlock {
    input: Tensor<f64>,
    z1: Tensor<f64>,
    h1: Tensor<f64>,
    cols1: Vec<f64>,
    /// Second convolution's output without the shortcut.
    z2: Tensor<f64>,
    cols2: Vec<f64>,
    shortcut: Tensor<f64>,
    cols_proj: Option<Vec<f64>>,
    sum: Tensor<f64>,
}

struct Base<'a> {
    arch: &'a Architecture,
    p: &'a [f64],
    targets: Vec<[f64; 2 * crate::mtf_core::LABEL_LEN]>,
    spans: Vec<Span>,
    n_images: usize,
    z0: Tensor<f64>,
    cols0: Vec<f64>,
    blocks: Vec<BaseBlock>,
    /// Inputs and pre-activations of each dense layer.
    dense_in: Vec<Vec<f64>>,
    dense_z: Vec<Vec<f64>>,
}

/// State of one perturbed evaluation.
#[derive(Default)]
struct Probe {
    /// Gate every ReLU by the base sign instead of the current input.
    hold: bool,
    crossed: Cell<bool>,
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

impl<'a> Base<'a> {
    fn new(arch: &'a Architecture, p: &'a [f64], batch: &[TrainingGroup]) -> Result<Self> {
        let groups: Vec<&[PreparedPatch]> = batch.iter().map(|g| g.patches.as_slice()).collect();
        let (x, spans) = assemble::<f64>(arch, &groups)?;
        let n_images = x.n;
        let (z0, cols0) = arch.conv0.forward(p, &x);
        let mut a = z0.clone();
        relu(&mut a.data);
        let mut blocks = Vec::new();
        for spec in &arch.blocks {
            let (z1, cols1) = spec.conv1.forward(p, &a);
            let mut h1 = z1.clone();
            relu(&mut h1.data);
            let (z2, cols2) = spec.conv2.forward(p, &h1);
            let (shortcut, cols_proj) = match &spec.projection {
                Some(proj) => {
                    let (s, c) = proj.forward(p, &a);
                    (s, Some(c))
                }
                None => (a.clone(), None),
            };
            let sum = add(&z2, &shortcut);
            let mut out = sum.clone();
            relu(&mut out.data);
            let input = std::mem::replace(&mut a, out);
            blocks.push(BaseBlock {
                input,
                z1,
                h1,
                cols1,
                z2,
                cols2,
                shortcut,
                cols_proj,
                sum,
            });
        }
        let cols = spans.len();
        let mut x = average_spans(&a.data, arch.feature_dim, n_images, &spans);
        let (mut dense_in, mut dense_z) = (Vec::new(), Vec::new());
        let last = arch.dense.len() - 1;
        for (i, layer) in arch.dense.iter().enumerate() {
            let z = layer.forward(p, &x, cols);
            let mut y = z.clone();
            if i < last {
                relu(&mut y);
            }
            dense_in.push(std::mem::replace(&mut x, y));
            dense_z.push(z);
        }
        let targets = batch.iter().map(|g| g.target.to_array()).collect();
        Ok(Base {
            arch,
            p,
            targets,
            spans,
            n_images,
            z0,
            cols0,
            blocks,
            dense_in,
            dense_z,
        })
    }

    /// ReLU that records any sign change against the base pre-activation.
    fn relu_tracked(&self, pr: &Probe, z: &mut [f64], base: &[f64]) {
        if pr.hold {
            for (x, &b) in z.iter_mut().zip(base) {
                if b <= 0.0 {
                    *x = 0.0;
                }
            }
            return;
        }
        let mut crossed = false;
        for (x, &b) in z.iter_mut().zip(base) {
            crossed |= (*x > 0.0) != (b > 0.0);
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        if crossed {
            pr.crossed.set(true);
        }
    }

    fn loss(&self, z_out: &[f64]) -> f64 {
        let cols = self.spans.len();
        let n_out = self.arch.outputs();
        let mut total = 0.0;
        for (g, t) in self.targets.iter().enumerate() {
            for d in 0..2 {
                for k in 0..n_out {
                    let s = super::network::sigmoid(z_out[k * cols + 2 * g + d]);
                    total += (s - t[d * n_out + k]).powi(2);
                }
            }
        }
        total / (cols * n_out) as f64
    }

    fn from_dense_z(&self, pr: &Probe, i: usize, mut z: Vec<f64>) -> f64 {
        let cols = self.spans.len();
        let mut j = i;
        loop {
            if j + 1 == self.arch.dense.len() {
                return self.loss(&z);
            }
            self.relu_tracked(pr, &mut z, &self.dense_z[j]);
            j += 1;
            z = self.arch.dense[j].forward(self.p, &z, cols);
        }
    }

    fn from_features(&self, pr: &Probe, features: &[f64]) -> f64 {
        let avg = average_spans(features, self.arch.feature_dim, self.n_images, &self.spans);
        self.from_dense_z(pr, 0, self.arch.dense[0].forward(self.p, &avg, self.spans.len()))
    }

    /// Runs blocks `i..` on block `i`'s input. `changed` names the only
    /// channel that differs from the base input, if there is one; the
    /// block's first convolutions then add that channel's contribution to
    /// the cached outputs instead of recomputing them.
    fn from_block_input(&self, pr: &Probe, i: usize, a: Tensor<f64>, changed: Option<usize>) -> f64 {
        let Some(base) = self.blocks.get(i) else {
            return self.from_features(pr, &a.data);
        };
        let spec = &self.arch.blocks[i];
        let delta = changed.map(|c| (c, channel_difference(&a, &base.input, c)));
        let z1 = match &delta {
            Some((c, d)) => add(&base.z1, &spec.conv1.channel_delta(self.p, *c, d)),
            None => spec.conv1.forward(self.p, &a).0,
        };
        let shortcut = match (&spec.projection, &delta) {
            (Some(proj), Some((c, d))) => add(&base.shortcut, &proj.channel_delta(self.p, *c, d)),
            (Some(proj), None) => proj.forward(self.p, &a).0,
            (None, _) => a,
        };
        self.from_block_z1(pr, i, z1, None, Some(shortcut))
    }

    fn from_block_sum(&self, pr: &Probe, i: usize, mut sum: Tensor<f64>, changed: Option<usize>) -> f64 {
        self.relu_tracked(pr, &mut sum.data, &self.blocks[i].sum.data);
        self.from_block_input(pr, i + 1, sum, changed)
    }

    /// Continues block `i` from its first pre-activation. Without a
    /// `shortcut` the cached one is used and `changed` may name the only
    /// channel of `z1` that differs from the base.
    fn from_block_z1(
        &self,
        pr: &Probe,
        i: usize,
        mut z1: Tensor<f64>,
        changed: Option<usize>,
        shortcut: Option<Tensor<f64>>,
    ) -> f64 {
        let base = &self.blocks[i];
        let conv2 = &self.arch.blocks[i].conv2;
        self.relu_tracked(pr, &mut z1.data, &base.z1.data);
        let z2 = match changed {
            Some(c) => add(&base.z2, &conv2.channel_delta(self.p, c, &channel_difference(&z1, &base.h1, c))),
            None => conv2.forward(self.p, &z1).0,
        };
        let sum = add(&z2, shortcut.as_ref().unwrap_or(&base.shortcut));
        self.from_block_sum(pr, i, sum, None)
    }

    fn from_z0(&self, pr: &Probe, mut z0: Tensor<f64>, changed: Option<usize>) -> f64 {
        self.relu_tracked(pr, &mut z0.data, &self.z0.data);
        self.from_block_input(pr, 0, z0, changed)
    }
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut out = a.clone();
    for (o, v) in out.data.iter_mut().zip(&b.data) {
        *o += *v;
    }
    out
}

/// Channel `c` of `a − base` as a one-channel tensor.
fn channel_difference(a: &Tensor<f64>, base: &Tensor<f64>, c: usize) -> Tensor<f64> {
    let n = a.n * a.h * a.w;
    let mut d = Tensor::zeros(1, a.n, a.h, a.w);
    for ((o, x), y) in d.data.iter_mut().zip(&a.data[c * n..(c + 1) * n]).zip(&base.data[c * n..(c + 1) * n]) {
        *o = x - y;
    }
    d
}

/// Adds `h · row` to output channel `o` of a conv pre-activation, or `h`
/// for a bias (`row = None`).
fn bump(z: &Tensor<f64>, o: usize, row: Option<&[f64]>, h: f64) -> Tensor<f64> {
    let mut out = z.clone();
    let n = z.n * z.h * z.w;
    let dst = &mut out.data[o * n..(o + 1) * n];
    match row {
        Some(r) => {
            for (d, v) in dst.iter_mut().zip(r) {
                *d += h * v;
            }
        }
        None => {
            for d in dst {
                *d += h;
            }
        }
    }
    out
}

/// Pre-activation a convolution's parameters perturb.
enum Site {
    Conv0,
    Conv1(usize),
    /// Block output before its ReLU; fed by conv2 and the projection.
    Sum(usize),
}

struct ConvSite<'a> {
    site: Site,
    spec: &'a super::network::ConvSpec,
    cols: &'a [f64],
    z: &'a Tensor<f64>,
    name: String,
}

/// Compares the analytic gradient of the batch loss with central
/// differences for every parameter. `progress` receives the tensor name
/// before each tensor is checked.
pub fn check_gradients(
    arch: &Architecture,
    p: &[f64],
    batch: &[TrainingGroup],
    step: f64,
    mut progress: impl FnMut(&str),
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    let (_, analytic) = loss_and_gradient::<f64>(arch, p, batch)?;
    let base = Base::new(arch, p, batch)?;
    let mut convs: Vec<ConvSite> = vec![ConvSite {
        site: Site::Conv0,
        spec: &arch.conv0,
        cols: &base.cols0,
        z: &base.z0,
        name: "conv0".into(),
    }];
    for (i, (spec, b)) in arch.blocks.iter().zip(&base.blocks).enumerate() {
        convs.push(ConvSite {
            site: Site::Conv1(i),
            spec: &spec.conv1,
            cols: &b.cols1,
            z: &b.z1,
            name: format!("block{i}.conv1"),
        });
        convs.push(ConvSite {
            site: Site::Sum(i),
            spec: &spec.conv2,
            cols: &b.cols2,
            z: &b.sum,
            name: format!("block{i}.conv2"),
        });
        if let (Some(proj), Some(cols)) = (&spec.projection, &b.cols_proj) {
            convs.push(ConvSite {
                site: Site::Sum(i),
                spec: proj,
                cols,
                z: &b.sum,
                name: format!("block{i}.projection"),
            });
        }
    }
    let mut report = GradCheckReport {
        tensors: Vec::new(),
        checked: 0,
        held_gates: 0,
        max_rel_error: 0.0,
    };
    let record = |name: String, results: Vec<(usize, f64, f64, bool)>, report: &mut GradCheckReport| {
        let mut t = TensorCheck {
            name,
            count: results.len(),
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for (off, a, n, held) in results {
            let e = relative_error(a, n);
            if e >= t.max_rel_error {
                t.max_rel_error = e;
                t.worst = (off, a, n);
            }
            report.checked += 1;
            report.held_gates += usize::from(held);
        }
        report.max_rel_error = report.max_rel_error.max(t.max_rel_error);
        report.tensors.push(t);
    };
    // Central difference; true when the gates had to be held.
    let diff = |eval: &(dyn Fn(&Probe, f64) -> f64 + Sync)| -> (f64, bool) {
        let free = Probe::default();
        let g = (eval(&free, step) - eval(&free, -step)) / (2.0 * step);
        if !free.crossed.get() {
            return (g, false);
        }
        let held = Probe {
            hold: true,
            ..Probe::default()
        };
        ((eval(&held, step) - eval(&held, -step)) / (2.0 * step), true)
    };
    for cs in &convs {
        let kk = cs.spec.fan_in();
        let n = cs.z.n * cs.z.h * cs.z.w;
        // a conv parameter of output channel `o` only moves channel `o`
        let evaluate = |pr: &Probe, z: Tensor<f64>, o: usize| match cs.site {
            Site::Conv0 => base.from_z0(pr, z, Some(o)),
            Site::Conv1(i) => base.from_block_z1(pr, i, z, Some(o), None),
            Site::Sum(i) => base.from_block_sum(pr, i, z, Some(o)),
        };
        progress(&format!("{}.weight", cs.name));
        let results = (0..cs.spec.cout * kk)
            .into_par_iter()
            .map(|i| {
                let (o, r) = (i / kk, i % kk);
                let row = &cs.cols[r * n..(r + 1) * n];
                let (g, s) = diff(&|pr, h| evaluate(pr, bump(cs.z, o, Some(row), h), o));
                let off = cs.spec.w_off + i;
                (off, analytic[off], g, s)
            })
            .collect();
        record(format!("{}.weight", cs.name), results, &mut report);
        progress(&format!("{}.bias", cs.name));
        let results = (0..cs.spec.cout)
            .into_par_iter()
            .map(|o| {
                let (g, s) = diff(&|pr, h| evaluate(pr, bump(cs.z, o, None, h), o));
                let off = cs.spec.b_off + o;
                (off, analytic[off], g, s)
            })
            .collect();
        record(format!("{}.bias", cs.name), results, &mut report);
    }
    let cols = base.spans.len();
    for (j, layer) in arch.dense.iter().enumerate() {
        let z = &base.dense_z[j];
        let x = &base.dense_in[j];
        let bumped = |pr: &Probe, o: usize, input: Option<usize>, h: f64| {
            let mut zz = z.clone();
            for c in 0..cols {
                zz[o * cols + c] += h * input.map_or(1.0, |i| x[i * cols + c]);
            }
            base.from_dense_z(pr, j, zz)
        };
        progress(&format!("fc{j}.weight"));
        let results = (0..layer.nout * layer.nin)
            .into_par_iter()
            .map(|k| {
                let (o, i) = (k / layer.nin, k % layer.nin);
                let (g, s) = diff(&|pr, h| bumped(pr, o, Some(i), h));
                let off = layer.w_off + k;
                (off, analytic[off], g, s)
            })
            .collect();
        record(format!("fc{j}.weight"), results, &mut report);
        progress(&format!("fc{j}.bias"));
        let results = (0..layer.nout)
            .into_par_iter()
            .map(|o| {
                let (g, s) = diff(&|pr, h| bumped(pr, o, None, h));
                let off = layer.b_off + o;
                (off, analytic[off], g, s)
            })
            .collect();
        record(format!("fc{j}.bias"), results, &mut report);
    }
    if report.checked != arch.n_params() {
        return Err(Error::dims(format!(
            "checked {} of {} parameters",
            report.checked,
            arch.n_params()
        )));
    }
    Ok(report)
}

/// Loss of the batch through the same float64 path the checker uses.
pub fn batch_loss(arch: &Architecture, p: &[f64], batch: &[TrainingGroup]) -> Result<f64> {
    let base = Base::new(arch, p, batch)?;
    Ok(base.from_z0(&Probe::default(), base.z0.clone(), None))
}
