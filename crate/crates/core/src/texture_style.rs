//! Semantic UV texture transfer: part masks, masked feature statistics, the
//! three stylizers (SAdaIN, SLST, SEFDM), switch gates and the texture
//! encoder/decoder pair.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{
    join, leaky_relu_backward, leaky_relu_inplace, pixel_shuffle2, pixel_unshuffle2, relu_backward, relu_inplace,
    sigmoid, Conv2d, Param, Parameterized,
};

pub const UV_HEIGHT: usize = 128;
pub const UV_WIDTH: usize = 256;
pub const FEATURE_HEIGHT: usize = UV_HEIGHT / 2;
pub const FEATURE_WIDTH: usize = UV_WIDTH / 2;
pub const NON_SEMANTIC: u8 = 5;
pub const SEMANTIC_PARTS: [u8; 4] = [1, 2, 3, 4];
pub const PART_NAMES: [&str; 5] = ["head", "neck", "belly", "back", "non-semantic"];

/// `C × 64 × 128` feature grid.
pub type FeatureMap = Grid;

/// RGB UV texture, `3 × 128 × 256`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UvTexture(Grid);

impl UvTexture {
    pub fn new(mut grid: Grid) -> Result<Self> {
        if grid.shape() != (3, UV_HEIGHT, UV_WIDTH) {
            return Err(Error::dim(
                "uv texture",
                format!("3x{UV_HEIGHT}x{UV_WIDTH}"),
                format!("{}x{}x{}", grid.channels, grid.height, grid.width),
            ));
        }
        grid.clamp01();
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

/// Per-cell part labels in `1..=5`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticUvMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl SemanticUvMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim("semantic mask", height * width, labels.len()));
        }
        if let Some(bad) = labels.iter().find(|l| !(1..=5).contains(*l)) {
            return Err(Error::Invalid(format!("semantic label {bad} outside 1..=5")));
        }
        Ok(Self { height, width, labels })
    }

    pub fn uniform(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    /// Raster indices of the cells carrying `part`.
    pub fn cells(&self, part: u8) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == part)
            .map(|(i, _)| i)
            .collect()
    }
}

/// 2×2 mode pooling; ties go to the smallest label.
pub fn downsample_mask(mask: &SemanticUvMask) -> Result<SemanticUvMask> {
    if !mask.height.is_multiple_of(2) || !mask.width.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "mask size {}x{} is not divisible by 2",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / 2, mask.width / 2);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut counts = [0u8; 6];
            for dy in 0..2 {
                for dx in 0..2 {
                    counts[mask.labels[(2 * y + dy) * mask.width + 2 * x + dx] as usize] += 1;
                }
            }
            let mut best = 1;
            for l in 2..=5 {
                if counts[l] > counts[best] {
                    best = l;
                }
            }
            labels.push(best as u8);
        }
    }
    SemanticUvMask::new(h, w, labels)
}

/// Binary indicator of `part`.
pub fn part_one_hot(mask: &SemanticUvMask, part: u8) -> Vec<f64> {
    mask.labels.iter().map(|&l| if l == part { 1.0 } else { 0.0 }).collect()
}

/// Per-channel mean and `sqrt(population variance + epsilon)` over the
/// selected cells.
pub fn masked_moments(v: &FeatureMap, part: &[f64], epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if part.len() != v.plane_len() {
        return Err(Error::dim("part mask", v.plane_len(), part.len()));
    }
    let cells: Vec<usize> = (0..part.len()).filter(|&i| part[i] != 0.0).collect();
    if cells.is_empty() {
        return Err(Error::EmptyPart(0));
    }
    let mut mu = Vec::with_capacity(v.channels);
    let mut sigma = Vec::with_capacity(v.channels);
    for c in 0..v.channels {
        let vals: Vec<f64> = cells.iter().map(|&i| v.plane(c)[i]).collect();
        let (m, s) = moments(&vals, epsilon);
        mu.push(m);
        sigma.push(s);
    }
    Ok((mu, sigma))
}

pub(crate) fn moments(vals: &[f64], epsilon: f64) -> (f64, f64) {
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, (var + epsilon).sqrt())
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sadain,
    Slst,
    Sefdm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Sadain, Method::Slst, Method::Sefdm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sadain => "sadain",
            Method::Slst => "slst",
            Method::Sefdm => "sefdm",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sadain" => Ok(Method::Sadain),
            "slst" => Ok(Method::Slst),
            "sefdm" => Ok(Method::Sefdm),
            other => Err(Error::Invalid(format!(
                "unknown texture method '{other}' (expected sadain, slst or sefdm)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlstMode {
    /// Whitening-colouring transform.
    Wct,
    /// `cov(V_S) · cov(V_T) · V_S` on the part cells, without whitening.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StylizerConfig {
    pub method: Method,
    pub slst_mode: SlstMode,
    /// Head, neck, belly, back.
    pub switch_gates: [bool; 4],
    /// Draw the gates from Bernoulli(0.5) with `seed` instead of using
    /// `switch_gates`.
    pub stochastic_gates: bool,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for StylizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Sadain,
            slst_mode: SlstMode::Wct,
            switch_gates: [false; 4],
            stochastic_gates: false,
            epsilon: 1e-5,
            seed: 0,
        }
    }
}

impl StylizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Returns, per semantic part, whether source and target swap roles.
pub fn apply_switch_gates(cfg: &StylizerConfig) -> [bool; 4] {
    if cfg.stochastic_gates {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut g = [false; 4];
        for v in &mut g {
            *v = rng.random_bool(0.5);
        }
        g
    } else {
        cfg.switch_gates
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StylizeReport {
    pub gates: [bool; 4],
    /// Parts left untouched, with the reason.
    pub passthrough: Vec<(u8, String)>,
    /// Parts whose value sequences were resampled because the source and
    /// target cell counts differ.
    pub resampled: Vec<u8>,
}

// ---------------------------------------------------------------------------
// Per-part transforms. Part values are channel-major: `values[c][k]`.

type PartValues = Vec<Vec<f64>>;

fn gather(v: &FeatureMap, cells: &[usize]) -> PartValues {
    (0..v.channels)
        .map(|c| {
            let p = v.plane(c);
            cells.iter().map(|&i| p[i]).collect()
        })
        .collect()
}

fn sadain_part(content: &PartValues, style: &PartValues, eps: f64) -> PartValues {
    content
        .iter()
        .zip(style)
        .map(|(xc, xs)| {
            let (mc, sc) = moments(xc, eps);
            let (ms, ss) = moments(xs, eps);
            xc.iter().map(|x| ss * (x - mc) / sc + ms).collect()
        })
        .collect()
}

fn centered(x: &PartValues) -> (DMatrix<f64>, Vec<f64>) {
    let c = x.len();
    let n = x[0].len();
    let mu: Vec<f64> = x.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let m = DMatrix::from_fn(c, n, |i, k| x[i][k] - mu[i]);
    (m, mu)
}

/// Count-normalised covariance of centred columns.
fn covariance(centered: &DMatrix<f64>) -> DMatrix<f64> {
    let n = centered.ncols() as f64;
    centered * centered.transpose() / n
}

/// Symmetric matrix power `A^{±1/2}` with eigenvalues clamped below at `eps`.
fn sym_sqrt(a: &DMatrix<f64>, eps: f64, inverse: bool) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let d = eig.eigenvalues.map(|l| {
        let s = l.max(eps).sqrt();
        if inverse {
            1.0 / s
        } else {
            s
        }
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn slst_part(content: &PartValues, style: &PartValues, mode: SlstMode, eps: f64) -> PartValues {
    let (xc, _) = centered(content);
    let (xs, ms) = centered(style);
    let cov_c = covariance(&xc);
    let cov_s = covariance(&xs);
    let (c, n) = (content.len(), content[0].len());
    let out = match mode {
        SlstMode::Wct => {
            let t = sym_sqrt(&cov_s, eps, false) * sym_sqrt(&cov_c, eps, true);
            let mut y = t * xc;
            for i in 0..c {
                for k in 0..n {
                    y[(i, k)] += ms[i];
                }
            }
            y
        }
        SlstMode::Literal => {
            let raw = DMatrix::from_fn(c, n, |i, k| content[i][k]);
            cov_c * cov_s * raw
        }
    };
    (0..c).map(|i| (0..n).map(|k| out[(i, k)]).collect()).collect()
}

/// Stable argsort-and-place: `out[k] = sorted(tgt)[rank of src[k]]`.
/// Target sequences of a different length are first resampled to
/// `src.len()` by linear interpolation over their sorted values.
pub fn ehm_sort_match(src: &[f64], tgt: &[f64]) -> Result<Vec<f64>> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Invalid("histogram matching needs non-empty sequences".into()));
    }
    let mut sorted_tgt = tgt.to_vec();
    sorted_tgt.sort_by(f64::total_cmp);
    if sorted_tgt.len() != src.len() {
        sorted_tgt = resample_linear(&sorted_tgt, src.len());
    }
    let mut order: Vec<usize> = (0..src.len()).collect();
    // Adding 0.0 folds -0.0 into 0.0 so signed zeros tie.
    order.sort_by(|&a, &b| (src[a] + 0.0).total_cmp(&(src[b] + 0.0)));
    let mut out = vec![0.0; src.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = sorted_tgt[rank];
    }
    Ok(out)
}

/// Linear interpolation of a sequence onto `n` evenly spaced positions.
pub fn resample_linear(values: &[f64], n: usize) -> Vec<f64> {
    let m = values.len();
    if n == 0 {
        return Vec::new();
    }
    if m == 1 || n == 1 {
        return vec![values[0]; n];
    }
    (0..n)
        .map(|k| {
            let pos = k as f64 * (m - 1) as f64 / (n - 1) as f64;
            let i = (pos.floor() as usize).min(m - 2);
            let f = pos - i as f64;
            values[i] * (1.0 - f) + values[i + 1] * f
        })
        .collect()
}

fn sefdm_part(content: &PartValues, style: &PartValues) -> Result<PartValues> {
    content
        .iter()
        .zip(style)
        .map(|(xc, xs)| ehm_sort_match(xc, xs))
        .collect()
}

/// Straight-through gradient of [`sefdm`]: the output is treated as the
/// source plus a constant, so gradients pass to the source unchanged.
pub fn sefdm_backward(grad_output: &FeatureMap) -> FeatureMap {
    grad_output.clone()
}

fn check_pair(vs: &FeatureMap, vt: &FeatureMap, ms: &SemanticUvMask, mt: &SemanticUvMask) -> Result<()> {
    if vs.shape() != vt.shape() {
        return Err(Error::dim(
            "stylizer features",
            format!("{:?}", vs.shape()),
            format!("{:?}", vt.shape()),
        ));
    }
    for m in [ms, mt] {
        if (m.height, m.width) != (vs.height, vs.width) {
            return Err(Error::dim(
                "stylizer mask",
                format!("{}x{}", vs.height, vs.width),
                format!("{}x{}", m.height, m.width),
            ));
        }
    }
    Ok(())
}

/// Applies the configured stylizer part by part. `mask_s` and `mask_t` are
/// at feature resolution; the output follows the source layout and keeps
/// the source values on the non-semantic part and on any skipped part.
pub fn stylize_features(
    vs: &FeatureMap,
    vt: &FeatureMap,
    mask_s: &SemanticUvMask,
    mask_t: &SemanticUvMask,
    cfg: &StylizerConfig,
) -> Result<(FeatureMap, StylizeReport)> {
    cfg.validate()?;
    check_pair(vs, vt, mask_s, mask_t)?;
    let gates = apply_switch_gates(cfg);
    let mut report = StylizeReport {
        gates,
        ..Default::default()
    };
    let mut out = vs.clone();
    for (gi, &part) in SEMANTIC_PARTS.iter().enumerate() {
        let cells_s = mask_s.cells(part);
        let cells_t = mask_t.cells(part);
        let (content, content_cells, style, style_cells) = if gates[gi] {
            (vt, &cells_t, vs, &cells_s)
        } else {
            (vs, &cells_s, vt, &cells_t)
        };
        if cells_s.is_empty() || content_cells.is_empty() || style_cells.is_empty() {
            report.passthrough.push((part, "empty part".into()));
            continue;
        }
        let xc = gather(content, content_cells);
        let xs = gather(style, style_cells);
        let y = match cfg.method {
            Method::Sadain => sadain_part(&xc, &xs, cfg.epsilon),
            Method::Slst => {
                if content_cells.len() < 2 || style_cells.len() < 2 {
                    report
                        .passthrough
                        .push((part, "fewer than 2 cells for covariance".into()));
                    continue;
                }
                slst_part(&xc, &xs, cfg.slst_mode, cfg.epsilon)
            }
            Method::Sefdm => {
                if content_cells.len() != style_cells.len() {
                    report.resampled.push(part);
                }
                sefdm_part(&xc, &xs)?
            }
        };
        let placed = if content_cells.len() == cells_s.len() {
            y
        } else {
            if !report.resampled.contains(&part) {
                report.resampled.push(part);
            }
            y.iter().map(|row| resample_linear(row, cells_s.len())).collect()
        };
        for (c, row) in placed.iter().enumerate() {
            let plane = out.plane_mut(c);
            for (&cell, &v) in cells_s.iter().zip(row) {
                plane[cell] = v;
            }
        }
    }
    Ok((out, report))
}

fn with_method(cfg: &StylizerConfig, method: Method) -> StylizerConfig {
    StylizerConfig { method, ..cfg.clone() }
}

pub fn sadain(
    vs: &FeatureMap,
    vt: &FeatureMap,
    mask_s: &SemanticUvMask,
    mask_t: &SemanticUvMask,
    cfg: &StylizerConfig,
) -> Result<(FeatureMap, StylizeReport)> {
    stylize_features(vs, vt, mask_s, mask_t, &with_method(cfg, Method::Sadain))
}

pub fn slst(
    vs: &FeatureMap,
    vt: &FeatureMap,
    mask_s: &SemanticUvMask,
    mask_t: &SemanticUvMask,
    cfg: &StylizerConfig,
) -> Result<(FeatureMap, StylizeReport)> {
    stylize_features(vs, vt, mask_s, mask_t, &with_method(cfg, Method::Slst))
}

pub fn sefdm(
    vs: &FeatureMap,
    vt: &FeatureMap,
    mask_s: &SemanticUvMask,
    mask_t: &SemanticUvMask,
    cfg: &StylizerConfig,
) -> Result<(FeatureMap, StylizeReport)> {
    stylize_features(vs, vt, mask_s, mask_t, &with_method(cfg, Method::Sefdm))
}

// ---------------------------------------------------------------------------
// Encoder and decoder

pub const TEXTURE_ENCODER_SEED: u64 = 0x7e47;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureNetConfig {
    pub channels: usize,
    pub encoder_seed: u64,
    pub decoder_hidden: usize,
}

impl Default for TextureNetConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            encoder_seed: TEXTURE_ENCODER_SEED,
            decoder_hidden: 32,
        }
    }
}

/// Negative slope of the encoder activations.
pub const ENCODER_SLOPE: f64 = 0.2;

/// Value subtracted from every input pixel.
pub const ENCODER_CENTER: f64 = 0.5;

/// Frozen feature extractor: a stride-2 3×3 convolution followed by three
/// 1×1 convolutions, leaky ReLU between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureEncoder {
    pub layers: Vec<Conv2d>,
}

pub struct TextureEncoderCache {
    inputs: Vec<(Vec<f64>, usize, usize)>,
    /// Activated outputs of the hidden layers.
    hidden: Vec<Vec<f64>>,
}

impl TextureEncoder {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![
            Conv2d::new(3, 16, 3, 2, true, &mut rng),
            Conv2d::new(16, 32, 1, 1, true, &mut rng),
            Conv2d::new(32, 32, 1, 1, true, &mut rng),
            Conv2d::new(32, channels, 1, 1, true, &mut rng),
        ];
        for l in &mut layers {
            l.freeze();
        }
        Self { layers }
    }

    pub fn channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn forward(&self, image: &Grid) -> Result<(FeatureMap, TextureEncoderCache)> {
        if image.channels != 3 || !image.height.is_multiple_of(2) || !image.width.is_multiple_of(2) {
            return Err(Error::dim(
                "texture encoder input",
                "3 x even x even",
                format!("{}x{}x{}", image.channels, image.height, image.width),
            ));
        }
        let mut x: Vec<f64> = image.data.iter().map(|v| v - ENCODER_CENTER).collect();
        let (mut h, mut w) = (image.height, image.width);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut y, oh, ow) = layer.forward(&x, h, w)?;
            if i < last {
                leaky_relu_inplace(&mut y, ENCODER_SLOPE);
                hidden.push(y.clone());
            }
            inputs.push((std::mem::replace(&mut x, y), h, w));
            h = oh;
            w = ow;
        }
        let fm = Grid::from_vec(self.channels(), h, w, x)?;
        Ok((fm, TextureEncoderCache { inputs, hidden }))
    }

    pub fn encode(&self, image: &Grid) -> Result<FeatureMap> {
        Ok(self.forward(image)?.0)
    }

    /// Gradient with respect to the input image; weights stay untouched.
    pub fn backward_input(&mut self, cache: &TextureEncoderCache, grad: &FeatureMap) -> Grid {
        let mut d = grad.data.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                leaky_relu_backward(&cache.hidden[i], &mut d, ENCODER_SLOPE);
            }
            let (input, h, w) = &cache.inputs[i];
            d = self.layers[i]
                .backward(input, *h, *w, &d, true)
                .expect("input gradient requested");
        }
        let (_, h, w) = cache.inputs[0];
        Grid::from_vec(3, h, w, d).expect("input gradient shape")
    }
}

impl Parameterized for TextureEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

/// 1×1 convolution, ReLU, 3×3 convolution to 12 channels, 2× pixel shuffle
/// and a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureDecoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct TextureDecoderCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    output: Grid,
    h: usize,
    w: usize,
}

impl TextureDecoder {
    pub fn new(channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(channels, hidden, 1, 1, true, rng),
            conv2: Conv2d::new(hidden, 12, 3, 1, true, rng),
        }
    }

    pub fn forward(&self, v: &FeatureMap) -> Result<(Grid, TextureDecoderCache)> {
        if v.channels != self.conv1.in_channels {
            return Err(Error::dim("decoder input channels", self.conv1.in_channels, v.channels));
        }
        let (h, w) = (v.height, v.width);
        let (mut hidden, _, _) = self.conv1.forward(&v.data, h, w)?;
        relu_inplace(&mut hidden);
        let (pre, _, _) = self.conv2.forward(&hidden, h, w)?;
        let mut up = pixel_shuffle2(&pre, 3, h, w);
        for x in &mut up {
            *x = sigmoid(*x);
        }
        let output = Grid::from_vec(3, 2 * h, 2 * w, up)?;
        Ok((
            output.clone(),
            TextureDecoderCache {
                input: v.data.clone(),
                hidden,
                output,
                h,
                w,
            },
        ))
    }

    pub fn decode(&self, v: &FeatureMap) -> Result<Grid> {
        Ok(self.forward(v)?.0)
    }

    /// Accumulates parameter gradients from a gradient on the output image.
    pub fn backward(&mut self, cache: &TextureDecoderCache, grad: &Grid) {
        let (h, w) = (cache.h, cache.w);
        let dpre_up: Vec<f64> = grad
            .data
            .iter()
            .zip(&cache.output.data)
            .map(|(g, y)| g * y * (1.0 - y))
            .collect();
        let dpre = pixel_unshuffle2(&dpre_up, 3, h, w);
        let mut dhidden = self
            .conv2
            .backward(&cache.hidden, h, w, &dpre, true)
            .expect("input gradient requested");
        relu_backward(&cache.hidden, &mut dhidden);
        self.conv1.backward(&cache.input, h, w, &dhidden, false);
    }
}

impl Parameterized for TextureDecoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// Frozen encoder plus one trained decoder per stylizer method.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureModel {
    pub config: TextureNetConfig,
    pub encoder: TextureEncoder,
    pub decoders: BTreeMap<Method, TextureDecoder>,
}

impl TextureModel {
    pub fn new(config: TextureNetConfig) -> Self {
        Self {
            config,
            encoder: TextureEncoder::new(config.channels, config.encoder_seed),
            decoders: BTreeMap::new(),
        }
    }

    /// Decoder trained for `method`, falling back to any trained decoder.
    pub fn decoder(&self, method: Method) -> Result<&TextureDecoder> {
        if let Some(d) = self.decoders.get(&method) {
            return Ok(d);
        }
        let fallback = self
            .decoders
            .iter()
            .next()
            .ok_or_else(|| Error::Config("no trained texture decoder in the model".into()))?;
        log::warn!(
            "no decoder trained for {}; using the {} decoder",
            method.name(),
            fallback.0.name()
        );
        Ok(fallback.1)
    }
}

impl Parameterized for TextureModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (m, d) in &self.decoders {
            d.visit(&join(prefix, &format!("decoder.{}", m.name())), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for (m, d) in self.decoders.iter_mut() {
            d.visit_mut(&join(prefix, &format!("decoder.{}", m.name())), f);
        }
    }
}

pub fn encode_texture(uv: &UvTexture, encoder: &TextureEncoder) -> Result<FeatureMap> {
    encoder.encode(uv.grid())
}

pub fn decode_texture(v: &FeatureMap, decoder: &TextureDecoder) -> Result<UvTexture> {
    UvTexture::new(decoder.decode(v)?)
}

/// Full texture transfer. Non-semantic pixels of the source mask are copied
/// from the source texture.
pub fn stylize_uv(
    source: &UvTexture,
    target: &UvTexture,
    mask_s: &SemanticUvMask,
    mask_t: &SemanticUvMask,
    cfg: &StylizerConfig,
    model: &TextureModel,
) -> Result<(UvTexture, StylizeReport)> {
    for m in [mask_s, mask_t] {
        if (m.height, m.width) != (UV_HEIGHT, UV_WIDTH) {
            return Err(Error::dim(
                "uv mask",
                format!("{UV_HEIGHT}x{UV_WIDTH}"),
                format!("{}x{}", m.height, m.width),
            ));
        }
    }
    let vs = model.encoder.encode(source.grid())?;
    let vt = model.encoder.encode(target.grid())?;
    let (v, report) = stylize_features(&vs, &vt, &downsample_mask(mask_s)?, &downsample_mask(mask_t)?, cfg)?;
    let mut out = model.decoder(cfg.method)?.decode(&v)?;
    let n = out.plane_len();
    for i in mask_s.cells(NON_SEMANTIC) {
        for c in 0..3 {
            out.data[c * n + i] = source.grid().data[c * n + i];
        }
    }
    Ok((UvTexture::new(out)?, report))
}
