//! Shape transfer generator: image encoder, dual residual gated fusion,
//! scale-factor mixing and the offset-emitting MLP head.
//!
//! Batched activations are row-major `rows × D`. A row holds one
//! (source, target) feature pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_template_with_uv, expand_symmetric, expand_symmetric_backward, MeshVertices, Template};
use crate::grid::Grid;
use crate::nn::{
    join, relu_backward, relu_inplace, sigmoid, BatchNorm1d, BatchNormCache, Conv2d, Linear, Mode, Param, Parameterized,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeFeature {
    pub values: Vec<f64>,
}

impl ShapeFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("shape feature contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferControls {
    pub alpha: f64,
    pub mode: Mode,
}

impl TransferControls {
    pub fn inference(alpha: f64) -> Result<Self> {
        let c = Self {
            alpha,
            mode: Mode::Inference,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn training() -> Self {
        Self {
            alpha: 0.0,
            mode: Mode::Training,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.abs() <= 1.0) {
            return Err(Error::Invalid(format!("alpha must lie in [-1, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// Multipliers applied to the source and target features. Training mode
    /// always uses `(1, 1)`.
    pub fn multipliers(&self) -> (f64, f64) {
        match self.mode {
            Mode::Training => (1.0, 1.0),
            Mode::Inference => (1.0 - self.alpha, 1.0 + self.alpha),
        }
    }
}

/// How source and target features are fused before the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Stacked dual residual gate units.
    Drgnet,
    /// No fusion network: the head sees the raw encoder features.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeConfig {
    pub feature_dim: usize,
    pub layers: usize,
    pub fusion: Fusion,
    pub image_size: usize,
    pub template_level: u32,
    /// Standard deviation of the initial output-layer weights.
    pub head_init_std: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            layers: 4,
            fusion: Fusion::Drgnet,
            image_size: 256,
            template_level: crate::geometry::CANONICAL_LEVEL,
            head_init_std: 1e-3,
        }
    }
}

impl ShapeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.image_size < ENCODER_GRID || !self.image_size.is_multiple_of(ENCODER_GRID) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of {ENCODER_GRID}, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gate units

#[derive(Clone, Debug, PartialEq)]
pub struct GateUnit {
    /// `D × 2D` gate weights with bias.
    pub gate: Linear,
    pub w_s: Linear,
    pub w_t: Linear,
    pub bn_s: BatchNorm1d,
    pub bn_t: BatchNorm1d,
}

pub struct GateCache {
    fs: Vec<f64>,
    ft: Vec<f64>,
    cat: Vec<f64>,
    g: Vec<f64>,
    hs: Vec<f64>,
    ht: Vec<f64>,
    rs: Vec<f64>,
    rt: Vec<f64>,
    bn_s: BatchNormCache,
    bn_t: BatchNormCache,
}

fn concat_rows(a: &[f64], b: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * rows * d);
    for r in 0..rows {
        out.extend_from_slice(&a[r * d..(r + 1) * d]);
        out.extend_from_slice(&b[r * d..(r + 1) * d]);
    }
    out
}

fn split_rows(x: &[f64], rows: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(rows * d);
    let mut b = Vec::with_capacity(rows * d);
    for r in 0..rows {
        a.extend_from_slice(&x[2 * r * d..(2 * r + 1) * d]);
        b.extend_from_slice(&x[(2 * r + 1) * d..(2 * r + 2) * d]);
    }
    (a, b)
}

impl GateUnit {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gate: Linear::new(2 * d, d, (1.0 / (2 * d) as f64).sqrt(), true, rng),
            w_s: Linear::new(d, d, (1.0 / d as f64).sqrt(), false, rng),
            w_t: Linear::new(d, d, (1.0 / d as f64).sqrt(), false, rng),
            bn_s: BatchNorm1d::new(d),
            bn_t: BatchNorm1d::new(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            gate: Linear::zeros(2 * d, d, true),
            w_s: Linear::zeros(d, d, false),
            w_t: Linear::zeros(d, d, false),
            bn_s: BatchNorm1d::new(d),
            bn_t: BatchNorm1d::new(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_s.inputs
    }

    pub fn forward(&self, fs: &[f64], ft: &[f64], rows: usize, mode: Mode) -> Result<(Vec<f64>, Vec<f64>, GateCache)> {
        let d = self.dim();
        if fs.len() != rows * d || ft.len() != rows * d {
            return Err(Error::dim(
                "gate unit input",
                rows * d,
                format!("{} and {}", fs.len(), ft.len()),
            ));
        }
        let cat = concat_rows(fs, ft, rows, d);
        let mut g = self.gate.forward(&cat, rows)?;
        for v in &mut g {
            *v = sigmoid(*v);
        }
        let hs: Vec<f64> = fs.iter().zip(&g).map(|(a, b)| a * b).collect();
        let ht: Vec<f64> = ft.iter().zip(&g).map(|(a, b)| a * b).collect();
        let (mut rs, bn_s) = self.bn_s.forward(&self.w_s.forward(&hs, rows)?, rows, mode);
        let (mut rt, bn_t) = self.bn_t.forward(&self.w_t.forward(&ht, rows)?, rows, mode);
        relu_inplace(&mut rs);
        relu_inplace(&mut rt);
        let out_s = fs.iter().zip(&rs).map(|(a, b)| a + b).collect();
        let out_t = ft.iter().zip(&rt).map(|(a, b)| a + b).collect();
        let cache = GateCache {
            fs: fs.to_vec(),
            ft: ft.to_vec(),
            cat,
            g,
            hs,
            ht,
            rs,
            rt,
            bn_s,
            bn_t,
        };
        Ok((out_s, out_t, cache))
    }

    pub fn backward(&mut self, cache: &GateCache, dout_s: &[f64], dout_t: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let rows = cache.g.len() / d;
        let mut drs = dout_s.to_vec();
        let mut drt = dout_t.to_vec();
        relu_backward(&cache.rs, &mut drs);
        relu_backward(&cache.rt, &mut drt);
        let das = self.bn_s.backward(&cache.bn_s, &drs);
        let dat = self.bn_t.backward(&cache.bn_t, &drt);
        let dhs = self.w_s.backward(&cache.hs, &das, rows);
        let dht = self.w_t.backward(&cache.ht, &dat, rows);
        let mut dfs = dout_s.to_vec();
        let mut dft = dout_t.to_vec();
        let mut dz = vec![0.0; rows * d];
        for i in 0..rows * d {
            let g = cache.g[i];
            dfs[i] += dhs[i] * g;
            dft[i] += dht[i] * g;
            let dg = dhs[i] * cache.fs[i] + dht[i] * cache.ft[i];
            dz[i] = dg * g * (1.0 - g);
        }
        let dcat = self.gate.backward(&cache.cat, &dz, rows);
        let (a, b) = split_rows(&dcat, rows, d);
        for i in 0..rows * d {
            dfs[i] += a[i];
            dft[i] += b[i];
        }
        (dfs, dft)
    }

    pub fn update_running(&mut self, cache: &GateCache) {
        self.bn_s.update_running(&cache.bn_s);
        self.bn_t.update_running(&cache.bn_t);
    }
}

impl Parameterized for GateUnit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.gate.visit(&join(prefix, "gate"), f);
        self.w_s.visit(&join(prefix, "w_s"), f);
        self.w_t.visit(&join(prefix, "w_t"), f);
        self.bn_s.visit(&join(prefix, "bn_s"), f);
        self.bn_t.visit(&join(prefix, "bn_t"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.gate.visit_mut(&join(prefix, "gate"), f);
        self.w_s.visit_mut(&join(prefix, "w_s"), f);
        self.w_t.visit_mut(&join(prefix, "w_t"), f);
        self.bn_s.visit_mut(&join(prefix, "bn_s"), f);
        self.bn_t.visit_mut(&join(prefix, "bn_t"), f);
    }
}

/// Single-pair convenience wrapper around [`GateUnit::forward`].
pub fn gate_unit(
    fs: &ShapeFeature,
    ft: &ShapeFeature,
    unit: &GateUnit,
    mode: Mode,
) -> Result<(ShapeFeature, ShapeFeature)> {
    let (s, t, _) = unit.forward(&fs.values, &ft.values, 1, mode)?;
    Ok((ShapeFeature { values: s }, ShapeFeature { values: t }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrgNet {
    pub units: Vec<GateUnit>,
}

impl DrgNet {
    pub fn new(d: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            units: (0..layers).map(|_| GateUnit::new(d, rng)).collect(),
        }
    }

    pub fn forward(
        &self,
        fs: &[f64],
        ft: &[f64],
        rows: usize,
        mode: Mode,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<GateCache>)> {
        if self.units.is_empty() {
            return Err(Error::Config("DRGNet needs at least one unit".into()));
        }
        let mut s = fs.to_vec();
        let mut t = ft.to_vec();
        let mut caches = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let (ns, nt, c) = unit.forward(&s, &t, rows, mode)?;
            s = ns;
            t = nt;
            caches.push(c);
        }
        Ok((s, t, caches))
    }

    pub fn backward(&mut self, caches: &[GateCache], ds: &[f64], dt: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut s = ds.to_vec();
        let mut t = dt.to_vec();
        for (unit, cache) in self.units.iter_mut().zip(caches).rev() {
            (s, t) = unit.backward(cache, &s, &t);
        }
        (s, t)
    }

    pub fn update_running(&mut self, caches: &[GateCache]) {
        for (unit, c) in self.units.iter_mut().zip(caches) {
            unit.update_running(c);
        }
    }
}

impl Parameterized for DrgNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (i, u) in self.units.iter().enumerate() {
            u.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, u) in self.units.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

pub fn drgnet_forward(
    fs: &ShapeFeature,
    ft: &ShapeFeature,
    net: &DrgNet,
    mode: Mode,
) -> Result<(ShapeFeature, ShapeFeature)> {
    let (s, t, _) = net.forward(&fs.values, &ft.values, 1, mode)?;
    Ok((ShapeFeature { values: s }, ShapeFeature { values: t }))
}

pub fn apply_scale(
    fs: &ShapeFeature,
    ft: &ShapeFeature,
    controls: &TransferControls,
) -> Result<(ShapeFeature, ShapeFeature)> {
    controls.validate()?;
    let (a, b) = controls.multipliers();
    Ok((
        ShapeFeature {
            values: fs.values.iter().map(|v| a * v).collect(),
        },
        ShapeFeature {
            values: ft.values.iter().map(|v| b * v).collect(),
        },
    ))
}

// ---------------------------------------------------------------------------
// Head

/// `O = W_o · ReLU(W_f2 · ReLU(W_f1 · [F_S, F_T]))`, reshaped to `3 × n_left`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub f1: Linear,
    pub f2: Linear,
    pub out: Linear,
}

pub struct HeadCache {
    cat: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    rows: usize,
}

impl MlpHead {
    pub fn new(d: usize, n_left: usize, out_std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            f1: Linear::new(2 * d, d, (2.0 / (2 * d) as f64).sqrt(), false, rng),
            f2: Linear::new(d, d, (2.0 / d as f64).sqrt(), false, rng),
            out: Linear::new(d, 3 * n_left, out_std, false, rng),
        }
    }

    pub fn zeros(d: usize, n_left: usize) -> Self {
        Self {
            f1: Linear::zeros(2 * d, d, false),
            f2: Linear::zeros(d, d, false),
            out: Linear::zeros(d, 3 * n_left, false),
        }
    }

    pub fn dim(&self) -> usize {
        self.f2.inputs
    }

    pub fn n_left(&self) -> usize {
        self.out.outputs / 3
    }

    pub fn forward(&self, fs: &[f64], ft: &[f64], rows: usize) -> Result<(Vec<f64>, HeadCache)> {
        let d = self.dim();
        if fs.len() != rows * d || ft.len() != rows * d {
            return Err(Error::dim(
                "mlp head input",
                rows * d,
                format!("{} and {}", fs.len(), ft.len()),
            ));
        }
        let cat = concat_rows(fs, ft, rows, d);
        let mut h1 = self.f1.forward(&cat, rows)?;
        relu_inplace(&mut h1);
        let mut h2 = self.f2.forward(&h1, rows)?;
        relu_inplace(&mut h2);
        let o = self.out.forward(&h2, rows)?;
        Ok((o, HeadCache { cat, h1, h2, rows }))
    }

    pub fn backward(&mut self, cache: &HeadCache, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let rows = cache.rows;
        let mut dh2 = self.out.backward(&cache.h2, dout, rows);
        relu_backward(&cache.h2, &mut dh2);
        let mut dh1 = self.f2.backward(&cache.h1, &dh2, rows);
        relu_backward(&cache.h1, &mut dh1);
        let dcat = self.f1.backward(&cache.cat, &dh1, rows);
        split_rows(&dcat, rows, self.dim())
    }
}

impl Parameterized for MlpHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.f1.visit(&join(prefix, "f1"), f);
        self.f2.visit(&join(prefix, "f2"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.f1.visit_mut(&join(prefix, "f1"), f);
        self.f2.visit_mut(&join(prefix, "f2"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Evaluates the head on one pair; the result is coordinate-major `3 × n_left`.
pub fn mlp_head(fs: &ShapeFeature, ft: &ShapeFeature, head: &MlpHead) -> Result<Vec<f64>> {
    Ok(head.forward(&fs.values, &ft.values, 1)?.0)
}

// ---------------------------------------------------------------------------
// Image encoder

/// Spatial size the image is average-pooled to before the convolutions.
pub const ENCODER_GRID: usize = 64;
const ENCODER_CHANNELS: [usize; 4] = [3, 8, 16, 16];

/// Average pooling followed by three stride-2 convolutions and a dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
    pub image_size: usize,
}

pub struct EncoderCache {
    /// Input to each convolution and its spatial size.
    inputs: Vec<(Vec<f64>, usize, usize)>,
    /// Post-ReLU output of the last convolution.
    flat: Vec<f64>,
}

impl ImageEncoder {
    pub fn new(d: usize, image_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let convs = ENCODER_CHANNELS
            .windows(2)
            .map(|w| Conv2d::new(w[0], w[1], 3, 2, true, rng))
            .collect();
        let side = ENCODER_GRID >> (ENCODER_CHANNELS.len() - 1);
        let flat = ENCODER_CHANNELS[ENCODER_CHANNELS.len() - 1] * side * side;
        Self {
            convs,
            fc: Linear::new(flat, d, (1.0 / flat as f64).sqrt(), true, rng),
            image_size,
        }
    }

    pub fn forward(&self, image: &Grid) -> Result<(Vec<f64>, EncoderCache)> {
        if image.shape() != (3, self.image_size, self.image_size) {
            return Err(Error::dim(
                "encoder image",
                format!("3x{0}x{0}", self.image_size),
                format!("{}x{}x{}", image.channels, image.height, image.width),
            ));
        }
        let pooled = image.downsample(self.image_size / ENCODER_GRID)?;
        let mut x = pooled.data;
        let (mut h, mut w) = (ENCODER_GRID, ENCODER_GRID);
        let mut inputs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut y, oh, ow) = conv.forward(&x, h, w)?;
            relu_inplace(&mut y);
            inputs.push((std::mem::replace(&mut x, y), h, w));
            h = oh;
            w = ow;
        }
        let feat = self.fc.forward(&x, 1)?;
        Ok((feat, EncoderCache { inputs, flat: x }))
    }

    pub fn backward(&mut self, cache: &EncoderCache, dfeat: &[f64]) {
        let mut dx = self.fc.backward(&cache.flat, dfeat, 1);
        let mut out = cache.flat.clone();
        for (i, conv) in self.convs.iter_mut().enumerate().rev() {
            relu_backward(&out, &mut dx);
            let (input, h, w) = &cache.inputs[i];
            match conv.backward(input, *h, *w, &dx, i > 0) {
                Some(d) => {
                    dx = d;
                    out = input.clone();
                }
                None => break,
            }
        }
    }

    pub fn encode(&self, image: &Grid) -> Result<ShapeFeature> {
        ShapeFeature::new(self.forward(image)?.0)
    }
}

impl Parameterized for ImageEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

pub fn encode_image(image: &Grid, encoder: &ImageEncoder) -> Result<ShapeFeature> {
    encoder.encode(image)
}

// ---------------------------------------------------------------------------
// Full generator

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    pub config: ShapeConfig,
    pub encoder: ImageEncoder,
    pub drg: DrgNet,
    pub head: MlpHead,
    pub template: Template,
}

/// Intermediate values of a batched forward pass.
pub struct ShapeForward {
    rows: usize,
    mults: (f64, f64),
    drg: Vec<GateCache>,
    head: HeadCache,
    /// One symmetric mesh per row.
    pub meshes: Vec<MeshVertices>,
}

impl ShapeModel {
    pub fn new(config: ShapeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let template = build_template_with_uv(config.template_level)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let encoder = ImageEncoder::new(d, config.image_size, &mut rng);
        let drg = DrgNet::new(d, config.layers, &mut rng);
        let head = MlpHead::new(d, template.topology.n_left(), config.head_init_std, &mut rng);
        Ok(Self {
            config,
            encoder,
            drg,
            head,
            template,
        })
    }

    pub fn n_left(&self) -> usize {
        self.template.topology.n_left()
    }

    fn fuse(&self, fs: &[f64], ft: &[f64], rows: usize, mode: Mode) -> Result<(Vec<f64>, Vec<f64>, Vec<GateCache>)> {
        match self.config.fusion {
            Fusion::Drgnet => self.drg.forward(fs, ft, rows, mode),
            Fusion::Mlp => Ok((fs.to_vec(), ft.to_vec(), Vec::new())),
        }
    }

    /// Runs fusion, scaling and the head on `rows` feature pairs and expands
    /// each row into a full mesh.
    pub fn forward_features(
        &self,
        fs: &[f64],
        ft: &[f64],
        rows: usize,
        controls: &TransferControls,
    ) -> Result<ShapeForward> {
        controls.validate()?;
        let (s, t, drg) = self.fuse(fs, ft, rows, controls.mode)?;
        let mults = controls.multipliers();
        let s: Vec<f64> = s.iter().map(|v| mults.0 * v).collect();
        let t: Vec<f64> = t.iter().map(|v| mults.1 * v).collect();
        let (o, head) = self.head.forward(&s, &t, rows)?;
        let topo = &self.template.topology;
        let base = self.template.vertices.left_half(topo);
        let width = base.len();
        let mut meshes = Vec::with_capacity(rows);
        for r in 0..rows {
            let half: Vec<f64> = o[r * width..(r + 1) * width]
                .iter()
                .zip(&base)
                .map(|(a, b)| a + b)
                .collect();
            meshes.push(expand_symmetric(&half, topo)?);
        }
        Ok(ShapeForward {
            rows,
            mults,
            drg,
            head,
            meshes,
        })
    }

    /// Back-propagates per-row mesh gradients; returns gradients with respect
    /// to the input source and target features.
    pub fn backward_features(&mut self, fwd: &ShapeForward, mesh_grads: &[Vec<[f64; 3]>]) -> (Vec<f64>, Vec<f64>) {
        let topo = &self.template.topology;
        let mut dout = Vec::with_capacity(fwd.rows * 3 * topo.n_left());
        for g in mesh_grads {
            dout.extend(expand_symmetric_backward(g, topo));
        }
        let (mut ds, mut dt) = self.head.backward(&fwd.head, &dout);
        ds.iter_mut().for_each(|v| *v *= fwd.mults.0);
        dt.iter_mut().for_each(|v| *v *= fwd.mults.1);
        match self.config.fusion {
            Fusion::Drgnet => self.drg.backward(&fwd.drg, &ds, &dt),
            Fusion::Mlp => (ds, dt),
        }
    }

    pub fn update_running(&mut self, fwd: &ShapeForward) {
        self.drg.update_running(&fwd.drg);
    }

    pub fn generate_from_features(
        &self,
        fs: &ShapeFeature,
        ft: &ShapeFeature,
        controls: &TransferControls,
    ) -> Result<MeshVertices> {
        let mut f = self.forward_features(&fs.values, &ft.values, 1, controls)?;
        Ok(f.meshes.remove(0))
    }
}

impl Parameterized for ShapeModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.drg.visit(&join(prefix, "drg"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.drg.visit_mut(&join(prefix, "drg"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Encodes both images and produces the transferred symmetric mesh.
/// Reconstruction is the special case of passing the same image twice.
pub fn generate_shape(
    source: &Grid,
    target: &Grid,
    model: &ShapeModel,
    controls: &TransferControls,
) -> Result<MeshVertices> {
    let fs = model.encoder.encode(source)?;
    let ft = model.encoder.encode(target)?;
    model.generate_from_features(&fs, &ft, controls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PLANE_AXIS;

    fn feat(v: &[f64]) -> ShapeFeature {
        ShapeFeature::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gate_weights_give_half_gate() {
        let unit = GateUnit::zeros(3);
        let (_, _, cache) = unit
            .forward(&[1.0, -2.0, 0.5], &[0.3, 0.0, 4.0], 1, Mode::Inference)
            .unwrap();
        assert!(cache.g.iter().all(|&g| g == 0.5));
    }

    #[test]
    fn zero_branches_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = DrgNet::new(3, 3, &mut rng);
        for u in &mut net.units {
            u.w_s.weight.value.fill(0.0);
            u.w_t.weight.value.fill(0.0);
        }
        let fs = feat(&[0.1, 0.2, -0.3]);
        let ft = feat(&[1.0, -1.0, 2.0]);
        let (s, t) = drgnet_forward(&fs, &ft, &net, Mode::Inference).unwrap();
        assert_eq!(s, fs);
        assert_eq!(t, ft);
    }

    #[test]
    fn scale_endpoints() {
        let fs = feat(&[1.0, -2.0]);
        let ft = feat(&[3.0, 0.5]);
        let (s, t) = apply_scale(&fs, &ft, &TransferControls::inference(1.0).unwrap()).unwrap();
        assert_eq!(s.values, vec![0.0, -0.0]);
        assert_eq!(t.values, vec![6.0, 1.0]);
        let (s, t) = apply_scale(&fs, &ft, &TransferControls::inference(-0.5).unwrap()).unwrap();
        assert_eq!(s.values, vec![1.5, -3.0]);
        assert_eq!(t.values, vec![1.5, 0.25]);
        let (s, t) = apply_scale(&fs, &ft, &TransferControls::training()).unwrap();
        assert_eq!((s, t), (fs, ft));
        assert!(TransferControls::inference(1.5).is_err());
    }

    #[test]
    fn zero_head_reproduces_template() {
        let mut model = ShapeModel::new(ShapeConfig::default(), 0).unwrap();
        model.head = MlpHead::zeros(64, model.n_left());
        let img = Grid::filled(3, 256, 256, 0.3);
        let mesh = generate_shape(&img, &img, &model, &TransferControls::inference(0.4).unwrap()).unwrap();
        assert_eq!(mesh, model.template.vertices);
    }

    #[test]
    fn generated_mesh_is_symmetric() {
        let model = ShapeModel::new(
            ShapeConfig {
                head_init_std: 0.1,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let img = Grid::filled(3, 256, 256, 0.7);
        let mesh = generate_shape(&img, &img, &model, &TransferControls::inference(0.0).unwrap()).unwrap();
        let topo = &model.template.topology;
        for (i, &j) in topo.reflection_map().iter().enumerate() {
            let (a, b) = (mesh.coords[i], mesh.coords[j]);
            assert_eq!(a[PLANE_AXIS], -b[PLANE_AXIS]);
            assert_eq!((a[1], a[2]), (b[1], b[2]));
        }
        for v in topo.plane_vertices() {
            assert_eq!(mesh.coords[v][PLANE_AXIS], 0.0);
        }
    }

    #[test]
    fn encoder_rejects_wrong_size() {
        let model = ShapeModel::new(ShapeConfig::default(), 0).unwrap();
        assert!(model.encoder.encode(&Grid::zeros(3, 128, 128)).is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_feature() {
        let model = ShapeModel::new(ShapeConfig::default(), 0).unwrap();
        let f = model.encoder.encode(&Grid::zeros(3, 256, 256)).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }
}
