//! Small dense and convolutional layers with explicit backward passes, plus
//! the Adam optimiser.
//!
//! Batched activations are row-major `batch × features`; images and feature
//! maps are planar `channels × height × width`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Buffers (running statistics, frozen weights) are stored with the
    /// model but never updated by the optimiser.
    pub trainable: bool,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
            trainable: true,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("finite std");
            for v in &mut p.value {
                *v = dist.sample(rng);
            }
        }
        p
    }

    pub fn buffer(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns named parameters.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.numel();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inference,
}

// ---------------------------------------------------------------------------
// Dense

/// `y = W x (+ b)` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, std: f64, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::normal(&[outputs, inputs], std, rng),
            bias: bias.then(|| Param::zeros(&[outputs])),
            inputs,
            outputs,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, bias: bool) -> Self {
        Self {
            weight: Param::zeros(&[outputs, inputs]),
            bias: bias.then(|| Param::zeros(&[outputs])),
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        if x.len() != batch * self.inputs {
            return Err(Error::dim("linear input", batch * self.inputs, x.len()));
        }
        let mut y = vec![0.0; batch * self.outputs];
        for b in 0..batch {
            let xb = &x[b * self.inputs..(b + 1) * self.inputs];
            for o in 0..self.outputs {
                let w = &self.weight.value[o * self.inputs..(o + 1) * self.inputs];
                let mut s = self.bias.as_ref().map_or(0.0, |bias| bias.value[o]);
                for (wi, xi) in w.iter().zip(xb) {
                    s += wi * xi;
                }
                y[b * self.outputs + o] = s;
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], batch: usize) -> Vec<f64> {
        let (ni, no) = (self.inputs, self.outputs);
        let mut dx = vec![0.0; batch * ni];
        for b in 0..batch {
            let xb = &x[b * ni..(b + 1) * ni];
            let dxb = &mut dx[b * ni..(b + 1) * ni];
            for o in 0..no {
                let g = dy[b * no + o];
                if g == 0.0 {
                    continue;
                }
                let w = &self.weight.value[o * ni..(o + 1) * ni];
                let gw = &mut self.weight.grad[o * ni..(o + 1) * ni];
                for i in 0..ni {
                    gw[i] += g * xb[i];
                    dxb[i] += g * w[i];
                }
                if let Some(bias) = self.bias.as_mut() {
                    bias.grad[o] += g;
                }
            }
        }
        dx
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Batch normalisation over a `batch × features` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch: usize,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
    mode: Mode,
}

impl BatchNorm1d {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Param::filled(&[features], 1.0),
            beta: Param::zeros(&[features]),
            running_mean: Param::zeros(&[features]).buffer(),
            running_var: Param::filled(&[features], 1.0).buffer(),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.numel()
    }

    /// Normalises with batch statistics in training mode and running
    /// statistics in inference mode. Running statistics are not touched here;
    /// see [`BatchNorm1d::update_running`].
    pub fn forward(&self, x: &[f64], batch: usize, mode: Mode) -> (Vec<f64>, BatchNormCache) {
        let d = self.features();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        let mut var_unbiased = vec![0.0; d];
        match mode {
            Mode::Training => {
                for b in 0..batch {
                    for j in 0..d {
                        mean[j] += x[b * d + j];
                    }
                }
                for m in &mut mean {
                    *m /= batch as f64;
                }
                for b in 0..batch {
                    for j in 0..d {
                        let c = x[b * d + j] - mean[j];
                        var[j] += c * c;
                    }
                }
                for j in 0..d {
                    let ss = var[j];
                    var[j] = ss / batch as f64;
                    var_unbiased[j] = if batch > 1 { ss / (batch - 1) as f64 } else { 0.0 };
                }
            }
            Mode::Inference => {
                mean.copy_from_slice(&self.running_mean.value);
                var.copy_from_slice(&self.running_var.value);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; batch * d];
        let mut y = vec![0.0; batch * d];
        for b in 0..batch {
            for j in 0..d {
                let h = (x[b * d + j] - mean[j]) * inv_std[j];
                xhat[b * d + j] = h;
                y[b * d + j] = self.gamma.value[j] * h + self.beta.value[j];
            }
        }
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
                mode,
            },
        )
    }

    pub fn update_running(&mut self, cache: &BatchNormCache) {
        if cache.mode != Mode::Training {
            return;
        }
        let m = self.momentum;
        for j in 0..self.features() {
            self.running_mean.value[j] = (1.0 - m) * self.running_mean.value[j] + m * cache.batch_mean[j];
            self.running_var.value[j] = (1.0 - m) * self.running_var.value[j] + m * cache.batch_var_unbiased[j];
        }
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &[f64]) -> Vec<f64> {
        let d = self.features();
        let n = cache.batch;
        let mut dx = vec![0.0; n * d];
        for j in 0..d {
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for b in 0..n {
                let g = dy[b * d + j];
                let h = cache.xhat[b * d + j];
                self.gamma.grad[j] += g * h;
                self.beta.grad[j] += g;
                let dh = g * self.gamma.value[j];
                sum_dxhat += dh;
                sum_dxhat_xhat += dh * h;
            }
            for b in 0..n {
                let dh = dy[b * d + j] * self.gamma.value[j];
                dx[b * d + j] = match cache.mode {
                    Mode::Training => {
                        cache.inv_std[j] / n as f64
                            * (n as f64 * dh - sum_dxhat - cache.xhat[b * d + j] * sum_dxhat_xhat)
                    }
                    Mode::Inference => dh * cache.inv_std[j],
                };
            }
        }
        dx
    }
}

impl Parameterized for BatchNorm1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, o) in grad.iter_mut().zip(output) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn leaky_relu_inplace(x: &mut [f64], slope: f64) {
    for v in x {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Scales `grad` by `slope` wherever the leaky-ReLU output was not positive.
pub fn leaky_relu_backward(output: &[f64], grad: &mut [f64], slope: f64) {
    for (g, o) in grad.iter_mut().zip(output) {
        if *o <= 0.0 {
            *g *= slope;
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Convolution

/// Square-kernel 2D convolution with zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self {
            weight: Param::normal(&[out_channels, in_channels, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    /// Valid output-column range for kernel column `kx`, plus the input column
    /// of the first output.
    #[inline]
    fn x_range(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        // ix = x * s + kx - p must lie in [0, w).
        let x0 = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let x1 = if w + p > kx {
            ((w + p - kx - 1) / s + 1).min(ow)
        } else {
            0
        };
        (x0, x1.max(x0))
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, usize, usize)> {
        if input.len() != self.in_channels * h * w {
            return Err(Error::dim(
                "conv input",
                format!("{}x{h}x{w}", self.in_channels),
                input.len(),
            ));
        }
        let (oh, ow) = self.output_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let mut out = vec![0.0; self.out_channels * oh * ow];
        for o in 0..self.out_channels {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            if let Some(b) = &self.bias {
                plane.fill(b.value[o]);
            }
            for c in 0..self.in_channels {
                let inp = &input[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weight.value[((o * self.in_channels + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = self.x_range(kx, w, ow);
                        for y in 0..oh {
                            let iy = (y * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &inp[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut plane[y * ow..(y + 1) * ow];
                            if s == 1 {
                                let off = x0 + kx - p;
                                let n = x1 - x0;
                                for (ov, iv) in orow[x0..x1].iter_mut().zip(&row[off..off + n]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for x in x0..x1 {
                                    orow[x] += wv * row[x * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((out, oh, ow))
    }

    /// Accumulates weight gradients (when `trainable`) and returns `dL/dinput`
    /// when `need_input_grad`.
    pub fn backward(
        &mut self,
        input: &[f64],
        h: usize,
        w: usize,
        dout: &[f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (oh, ow) = self.output_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let train = self.weight.trainable;
        let mut din = need_input_grad.then(|| vec![0.0; self.in_channels * h * w]);
        for o in 0..self.out_channels {
            let gplane = &dout[o * oh * ow..(o + 1) * oh * ow];
            if let Some(b) = self.bias.as_mut().filter(|b| b.trainable) {
                b.grad[o] += gplane.iter().sum::<f64>();
            }
            for c in 0..self.in_channels {
                let inp = &input[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * self.in_channels + c) * k + ky) * k + kx;
                        let wv = self.weight.value[widx];
                        let (x0, x1) = self.x_range(kx, w, ow);
                        let mut gw = 0.0;
                        for y in 0..oh {
                            let iy = (y * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let grow = &gplane[y * ow..(y + 1) * ow];
                            if s == 1 {
                                let off = x0 + kx - p;
                                let n = x1 - x0;
                                if train {
                                    let row = &inp[iy * w + off..iy * w + off + n];
                                    gw += grow[x0..x1].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(din) = din.as_mut() {
                                    let drow = &mut din[c * h * w + iy * w + off..c * h * w + iy * w + off + n];
                                    for (d, g) in drow.iter_mut().zip(&grow[x0..x1]) {
                                        *d += wv * g;
                                    }
                                }
                            } else {
                                for x in x0..x1 {
                                    let ix = x * s + kx - p;
                                    if train {
                                        gw += grow[x] * inp[iy * w + ix];
                                    }
                                    if let Some(din) = din.as_mut() {
                                        din[c * h * w + iy * w + ix] += wv * grow[x];
                                    }
                                }
                            }
                        }
                        if train {
                            self.weight.grad[widx] += gw;
                        }
                    }
                }
            }
        }
        din
    }

    pub fn freeze(&mut self) {
        self.weight.trainable = false;
        if let Some(b) = &mut self.bias {
            b.trainable = false;
        }
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Rearranges `4C × H × W` into `C × 2H × 2W`.
pub fn pixel_shuffle2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let src = &input[(ch * 4 + dy * 2 + dx) * h * w..(ch * 4 + dy * 2 + dx + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        out[(ch * oh + 2 * y + dy) * ow + 2 * x + dx] = src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_unshuffle2(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; 4 * c * h * w];
    for ch in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let base = (ch * 4 + dy * 2 + dx) * h * w;
                for y in 0..h {
                    for x in 0..w {
                        out[base + y * w + x] = grad[(ch * oh + 2 * y + dy) * ow + 2 * x + dx];
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Optimiser

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Applies one update to every trainable parameter of `model`.
    pub fn update(&mut self, model: &mut dyn Parameterized, prefix: &str, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        model.visit_mut(prefix, &mut |name, p| {
            if !p.trainable {
                return;
            }
            let (m, v) = moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            for i in 0..p.numel() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}
