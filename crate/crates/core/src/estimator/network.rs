//! Forward and reverse passes of the convolutional regressor.
//!
//! Activations are stored channel-major across the batch (`[c][n][h][w]`)
//! so every convolution is a single GEMM over an im2col matrix whose
//! columns span all images. All parameters live in one flat vector; the
//! [`Architecture`] records where each layer's weights sit.

use super::config::NetConfig;
use super::real::Real;
use crate::error::{Error, Result};

/// Batched activation tensor, `[c][n][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            n,
            h,
            w,
            data: vec![T::ZERO; c * n * h * w],
        }
    }

    /// Columns per channel (`n·h·w`).
    #[inline]
    fn cols(&self) -> usize {
        self.n * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvSpec {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, offset: &mut usize) -> Self {
        let w_off = *offset;
        let b_off = w_off + cout * cin * k * k;
        *offset = b_off + cout;
        ConvSpec {
            cin,
            cout,
            k,
            stride,
            w_off,
            b_off,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Output size and leading padding under "same" padding: the output
    /// has `ceil(in / stride)` samples and any odd padding goes after.
    fn geometry(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let oh = h.div_ceil(self.stride);
        let ow = w.div_ceil(self.stride);
        let pad_h = ((oh - 1) * self.stride + self.k).saturating_sub(h);
        let pad_w = ((ow - 1) * self.stride + self.k).saturating_sub(w);
        (oh, ow, pad_h / 2, pad_w / 2)
    }

    /// Range of output columns whose input column `ox·stride + kj − pad` is in bounds.
    fn valid_cols(&self, kj: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = pad.saturating_sub(kj).div_ceil(s);
        let hi = if w + pad > kj { ((w + pad - kj - 1) / s + 1).min(ow) } else { 0 };
        (lo, hi.max(lo))
    }

    fn im2col<T: Real>(&self, x: &Tensor<T>) -> (Vec<T>, usize, usize) {
        let (oh, ow, pt, pl) = self.geometry(x.h, x.w);
        let n_cols = x.n * oh * ow;
        let (k, s) = (self.k, self.stride);
        let mut cols = vec![T::ZERO; self.fan_in() * n_cols];
        for ci in 0..self.cin {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst_row = &mut cols[row * n_cols..(row + 1) * n_cols];
                    let (lo, hi) = self.valid_cols(kj, pl, x.w, ow);
                    if lo >= hi {
                        continue;
                    }
                    let ix0 = lo * s + kj - pl;
                    for img in 0..x.n {
                        let src = &x.data[(ci * x.n + img) * x.h * x.w..][..x.h * x.w];
                        for oy in 0..oh {
                            let iy = (oy * s + ki) as isize - pt as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * x.w..][..x.w];
                            let dst = &mut dst_row[(img * oh + oy) * ow..][lo..hi];
                            if s == 1 {
                                dst.copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                            } else {
                                for (d, v) in dst.iter_mut().zip(src_row[ix0..].iter().step_by(s)) {
                                    *d = *v;
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    fn col2im<T: Real>(&self, dcols: &[T], n: usize, h: usize, w: usize, oh: usize, ow: usize) -> Tensor<T> {
        let (_, _, pt, pl) = self.geometry(h, w);
        let (k, s) = (self.k, self.stride);
        let n_cols = n * oh * ow;
        let mut dx = Tensor::zeros(self.cin, n, h, w);
        for ci in 0..self.cin {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src_row = &dcols[row * n_cols..(row + 1) * n_cols];
                    let (lo, hi) = self.valid_cols(kj, pl, w, ow);
                    if lo >= hi {
                        continue;
                    }
                    let ix0 = lo * s + kj - pl;
                    for img in 0..n {
                        let dst = &mut dx.data[(ci * n + img) * h * w..][..h * w];
                        for oy in 0..oh {
                            let iy = (oy * s + ki) as isize - pt as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * w..][..w];
                            let src = &src_row[(img * oh + oy) * ow..][lo..hi];
                            for (d, v) in dst_row[ix0..].iter_mut().step_by(s).zip(src) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the pre-activation output and the im2col matrix for backward.
    pub(crate) fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        debug_assert_eq!(x.c, self.cin);
        let (cols, oh, ow) = self.im2col(x);
        let n_cols = x.n * oh * ow;
        let kk = self.fan_in();
        let mut out = Tensor::zeros(self.cout, x.n, oh, ow);
        let weights = &p[self.w_off..self.w_off + self.cout * kk];
        T::gemm(
            self.cout,
            kk,
            n_cols,
            T::ONE,
            weights,
            (kk as isize, 1),
            &cols,
            (n_cols as isize, 1),
            T::ZERO,
            &mut out.data,
            (n_cols as isize, 1),
        );
        for o in 0..self.cout {
            let b = p[self.b_off + o];
            for v in &mut out.data[o * n_cols..(o + 1) * n_cols] {
                *v += b;
            }
        }
        (out, cols)
    }

    /// Output change, bias excluded, when only input channel `ci` changes
    /// by `delta` (a one-channel tensor).
    pub(crate) fn channel_delta<T: Real>(&self, p: &[T], ci: usize, delta: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(delta.c, 1);
        let single = ConvSpec { cin: 1, ..self.clone() };
        let (cols, oh, ow) = single.im2col(delta);
        let n_cols = delta.n * oh * ow;
        let (kk, k2) = (self.fan_in(), self.k * self.k);
        let mut out = Tensor::zeros(self.cout, delta.n, oh, ow);
        T::gemm(
            self.cout,
            k2,
            n_cols,
            T::ONE,
            &p[self.w_off + ci * k2..self.w_off + self.cout * kk],
            (kk as isize, 1),
            &cols,
            (n_cols as isize, 1),
            T::ZERO,
            &mut out.data,
            (n_cols as isize, 1),
        );
        out
    }

    /// Accumulates parameter gradients and optionally returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    fn backward<T: Real>(
        &self,
        p: &[T],
        in_shape: (usize, usize, usize),
        cols: &[T],
        dout: &Tensor<T>,
        grad: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (n, h, w) = in_shape;
        let n_cols = dout.cols();
        let kk = self.fan_in();
        T::gemm(
            self.cout,
            n_cols,
            kk,
            T::ONE,
            &dout.data,
            (n_cols as isize, 1),
            cols,
            (1, n_cols as isize),
            T::ONE,
            &mut grad[self.w_off..self.w_off + self.cout * kk],
            (kk as isize, 1),
        );
        for o in 0..self.cout {
            let mut s = T::ZERO;
            for &v in &dout.data[o * n_cols..(o + 1) * n_cols] {
                s += v;
            }
            grad[self.b_off + o] += s;
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::ZERO; kk * n_cols];
        T::gemm(
            kk,
            self.cout,
            n_cols,
            T::ONE,
            &p[self.w_off..self.w_off + self.cout * kk],
            (1, kk as isize),
            &dout.data,
            (n_cols as isize, 1),
            T::ZERO,
            &mut dcols,
            (n_cols as isize, 1),
        );
        Some(self.col2im(&dcols, n, h, w, dout.h, dout.w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockSpec {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub projection: Option<ConvSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DenseSpec {
    pub nin: usize,
    pub nout: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl DenseSpec {
    fn new(nin: usize, nout: usize, offset: &mut usize) -> Self {
        let w_off = *offset;
        let b_off = w_off + nin * nout;
        *offset = b_off + nout;
        DenseSpec {
            nin,
            nout,
            w_off,
            b_off,
        }
    }

    pub(crate) fn forward<T: Real>(&self, p: &[T], x: &[T], cols: usize) -> Vec<T> {
        let mut y = vec![T::ZERO; self.nout * cols];
        T::gemm(
            self.nout,
            self.nin,
            cols,
            T::ONE,
            &p[self.w_off..self.w_off + self.nin * self.nout],
            (self.nin as isize, 1),
            x,
            (cols as isize, 1),
            T::ZERO,
            &mut y,
            (cols as isize, 1),
        );
        for o in 0..self.nout {
            let b = p[self.b_off + o];
            for v in &mut y[o * cols..(o + 1) * cols] {
                *v += b;
            }
        }
        y
    }

    fn backward<T: Real>(&self, p: &[T], x: &[T], dy: &[T], cols: usize, grad: &mut [T]) -> Vec<T> {
        T::gemm(
            self.nout,
            cols,
            self.nin,
            T::ONE,
            dy,
            (cols as isize, 1),
            x,
            (1, cols as isize),
            T::ONE,
            &mut grad[self.w_off..self.w_off + self.nin * self.nout],
            (self.nin as isize, 1),
        );
        for o in 0..self.nout {
            let mut s = T::ZERO;
            for &v in &dy[o * cols..(o + 1) * cols] {
                s += v;
            }
            grad[self.b_off + o] += s;
        }
        let mut dx = vec![T::ZERO; self.nin * cols];
        T::gemm(
            self.nin,
            self.nout,
            cols,
            T::ONE,
            &p[self.w_off..self.w_off + self.nin * self.nout],
            (1, self.nin as isize),
            dy,
            (cols as isize, 1),
            T::ZERO,
            &mut dx,
            (cols as isize, 1),
        );
        dx
    }
}

/// Parameter layout and layer shapes derived from a [`NetConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub(crate) input_channels: usize,
    pub(crate) input_hw: usize,
    pub(crate) conv0: ConvSpec,
    pub(crate) blocks: Vec<BlockSpec>,
    pub(crate) dense: Vec<DenseSpec>,
    pub(crate) feature_dim: usize,
    pub(crate) n_params: usize,
}

/// Description of one parameter tensor in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// Fan-in used for initialization; zero for biases.
    pub fan_in: usize,
}

impl Architecture {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.subsample;
        let input_channels = 2 * m * m;
        let input_hw = cfg.input_size / m;
        let mut off = 0;
        let conv0 = ConvSpec::new(input_channels, cfg.initial_width, cfg.initial_kernel, 1, &mut off);
        let mut blocks = Vec::with_capacity(cfg.stages.len());
        let mut c = cfg.initial_width;
        let mut hw = input_hw;
        for st in &cfg.stages {
            let conv1 = ConvSpec::new(c, st.width, st.kernel, st.stride, &mut off);
            let conv2 = ConvSpec::new(st.width, st.width, st.kernel, 1, &mut off);
            let projection = (st.stride != 1 || st.width != c)
                .then(|| ConvSpec::new(c, st.width, 1, st.stride, &mut off));
            blocks.push(BlockSpec {
                conv1,
                conv2,
                projection,
            });
            c = st.width;
            hw = hw.div_ceil(st.stride);
        }
        if hw != 1 {
            return Err(Error::param(format!(
                "residual stages reduce {input_hw}x{input_hw} to {hw}x{hw}, expected 1x1"
            )));
        }
        let mut dense = Vec::new();
        let mut nin = c;
        for &wd in cfg.fc_widths.iter().chain(std::iter::once(&cfg.outputs)) {
            dense.push(DenseSpec::new(nin, wd, &mut off));
            nin = wd;
        }
        Ok(Architecture {
            input_channels,
            input_hw,
            conv0,
            blocks,
            dense,
            feature_dim: c,
            n_params: off,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn input_hw(&self) -> usize {
        self.input_hw
    }

    pub fn outputs(&self) -> usize {
        self.dense.last().map(|d| d.nout).unwrap_or(0)
    }

    /// Parameter tensors in canonical (storage) order.
    pub fn param_tensors(&self) -> Vec<ParamTensor> {
        let mut v = Vec::new();
        let conv = |name: String, c: &ConvSpec, v: &mut Vec<ParamTensor>| {
            v.push(ParamTensor {
                name: format!("{name}.weight"),
                offset: c.w_off,
                shape: vec![c.cout, c.cin, c.k, c.k],
                fan_in: c.fan_in(),
            });
            v.push(ParamTensor {
                name: format!("{name}.bias"),
                offset: c.b_off,
                shape: vec![c.cout],
                fan_in: 0,
            });
        };
        conv("conv0".into(), &self.conv0, &mut v);
        for (i, b) in self.blocks.iter().enumerate() {
            conv(format!("block{i}.conv1"), &b.conv1, &mut v);
            conv(format!("block{i}.conv2"), &b.conv2, &mut v);
            if let Some(p) = &b.projection {
                conv(format!("block{i}.projection"), p, &mut v);
            }
        }
        for (i, d) in self.dense.iter().enumerate() {
            v.push(ParamTensor {
                name: format!("fc{i}.weight"),
                offset: d.w_off,
                shape: vec![d.nout, d.nin],
                fan_in: d.nin,
            });
            v.push(ParamTensor {
                name: format!("fc{i}.bias"),
                offset: d.b_off,
                shape: vec![d.nout],
                fan_in: 0,
            });
        }
        v
    }
}

fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::ZERO {
            *x = T::ZERO;
        }
    }
}

fn relu_mask<T: Real>(grad: &mut [T], activation: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= T::ZERO {
            *g = T::ZERO;
        }
    }
}

struct BlockCache<T> {
    in_shape: (usize, usize, usize),
    cols1: Vec<T>,
    h1: Tensor<T>,
    cols2: Vec<T>,
    cols_proj: Option<Vec<T>>,
    out: Tensor<T>,
}

/// Intermediate values of one trunk pass, kept for the reverse pass.
pub struct TrunkCache<T> {
    in_shape: (usize, usize, usize),
    cols0: Vec<T>,
    a0: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> TrunkCache<T> {
    /// Feature matrix, `feature_dim` rows by one column per image.
    pub fn features(&self) -> &[T] {
        match self.blocks.last() {
            Some(b) => &b.out.data,
            None => &self.a0.data,
        }
    }
}

/// Intermediate values of one head pass.
pub struct HeadCache<T> {
    /// Inputs to each dense layer; the first is the feature matrix.
    inputs: Vec<Vec<T>>,
    /// Sigmoid outputs, `outputs` rows by `cols`.
    pub output: Vec<T>,
    pub cols: usize,
}

impl Architecture {
    pub fn trunk_forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Result<TrunkCache<T>> {
        if x.c != self.input_channels || x.h != self.input_hw || x.w != self.input_hw {
            return Err(Error::dims(format!(
                "trunk expects {}x{}x{}, got {}x{}x{}",
                self.input_hw, self.input_hw, self.input_channels, x.h, x.w, x.c
            )));
        }
        let (mut a0, cols0) = self.conv0.forward(p, x);
        relu_inplace(&mut a0.data);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for spec in &self.blocks {
            let input = blocks.last().map(|b: &BlockCache<T>| &b.out).unwrap_or(&a0);
            let in_shape = (input.n, input.h, input.w);
            let (mut h1, cols1) = spec.conv1.forward(p, input);
            relu_inplace(&mut h1.data);
            let (mut out, cols2) = spec.conv2.forward(p, &h1);
            let cols_proj = match &spec.projection {
                Some(proj) => {
                    let (s, cols) = proj.forward(p, input);
                    for (o, v) in out.data.iter_mut().zip(&s.data) {
                        *o += *v;
                    }
                    Some(cols)
                }
                None => {
                    for (o, v) in out.data.iter_mut().zip(&input.data) {
                        *o += *v;
                    }
                    None
                }
            };
            relu_inplace(&mut out.data);
            blocks.push(BlockCache {
                in_shape,
                cols1,
                h1,
                cols2,
                cols_proj,
                out,
            });
        }
        Ok(TrunkCache {
            in_shape: (x.n, x.h, x.w),
            cols0,
            a0,
            blocks,
        })
    }

    /// Reverse pass of the trunk given the gradient w.r.t. its features.
    pub fn trunk_backward<T: Real>(&self, p: &[T], cache: &TrunkCache<T>, dfeat: Vec<T>, grad: &mut [T]) {
        let n = cache.in_shape.0;
        let mut d = Tensor {
            c: self.feature_dim,
            n,
            h: 1,
            w: 1,
            data: dfeat,
        };
        for (spec, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            relu_mask(&mut d.data, &bc.out.data);
            let (bn, bh, bw) = bc.in_shape;
            let h1_shape = (bc.h1.n, bc.h1.h, bc.h1.w);
            let mut dh1 = spec
                .conv2
                .backward(p, h1_shape, &bc.cols2, &d, grad, true)
                .expect("dx requested");
            relu_mask(&mut dh1.data, &bc.h1.data);
            let mut dx = spec
                .conv1
                .backward(p, bc.in_shape, &bc.cols1, &dh1, grad, true)
                .expect("dx requested");
            match (&spec.projection, &bc.cols_proj) {
                (Some(proj), Some(cols)) => {
                    let ds = proj
                        .backward(p, (bn, bh, bw), cols, &d, grad, true)
                        .expect("dx requested");
                    for (a, b) in dx.data.iter_mut().zip(&ds.data) {
                        *a += *b;
                    }
                }
                _ => {
                    for (a, b) in dx.data.iter_mut().zip(&d.data) {
                        *a += *b;
                    }
                }
            }
            d = dx;
        }
        relu_mask(&mut d.data, &cache.a0.data);
        self.conv0
            .backward(p, cache.in_shape, &cache.cols0, &d, grad, false);
    }

    /// Fully-connected head on a `feature_dim` x `cols` matrix.
    pub fn head_forward<T: Real>(&self, p: &[T], features: Vec<T>, cols: usize) -> HeadCache<T> {
        let mut inputs = Vec::with_capacity(self.dense.len());
        let mut x = features;
        let last = self.dense.len() - 1;
        for (i, layer) in self.dense.iter().enumerate() {
            let mut y = layer.forward(p, &x, cols);
            inputs.push(x);
            if i < last {
                relu_inplace(&mut y);
            } else {
                for v in &mut y {
                    *v = sigmoid(*v);
                }
            }
            x = y;
        }
        HeadCache {
            inputs,
            output: x,
            cols,
        }
    }

    /// Reverse pass of the head given the gradient w.r.t. the sigmoid
    /// outputs; returns the gradient w.r.t. the input features.
    pub fn head_backward<T: Real>(&self, p: &[T], cache: &HeadCache<T>, doutput: &[T], grad: &mut [T]) -> Vec<T> {
        let mut d: Vec<T> = doutput
            .iter()
            .zip(&cache.output)
            .map(|(&g, &s)| g * s * (T::ONE - s))
            .collect();
        for (i, layer) in self.dense.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let dx = layer.backward(p, x, &d, cache.cols, grad);
            if i > 0 {
                d = dx;
                // inputs[i] is the relu output of layer i-1
                relu_mask(&mut d, x);
            } else {
                d = dx;
            }
        }
        d
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::ZERO {
        T::ONE / (T::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::ONE + e)
    }
}
