//! Two-stage training (shape, then texture), evaluation and the depth
//! ablation.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{decoder_prefix, init_decoder, ModelBundle, SHAPE_PREFIX};
use crate::error::{Error, Result};
use crate::fixtures::{FixtureSet, IMAGE_SIZE};
use crate::geometry::{
    edge_energy, edge_energy_grad, laplacian_energy, laplacian_energy_grad, Keypoints3D, MeshVertices,
};
use crate::grid::Grid;
use crate::losses::{
    content_loss, keypoint_loss, keypoint_loss_grads, mask_loss, mask_loss_grad, part_stats, perceptual_loss,
    shape_total, style_loss, texture_total, LossReport, LossWeights,
};
use crate::nn::{Adam, Parameterized};
use crate::renderer::{render_textured, RenderConfig, SoftSilhouette};
use crate::shape_gen::{EncoderCache, Fusion, ShapeConfig, TransferControls};
use crate::texture_style::{
    downsample_mask, stylize_features, FeatureMap, Method, SemanticUvMask, SlstMode, StylizerConfig, TextureNetConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Shape,
    Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per iteration.
    pub lr_decay: f64,
    pub seed: u64,
    pub feature_dim: usize,
    pub layers: usize,
    pub fusion: Fusion,
    pub head_init_std: f64,
    pub channels: usize,
    pub decoder_hidden: usize,
    pub weights: LossWeights,
    pub fixtures: PathBuf,
    pub render_resolution: usize,
    pub sigma: f64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    pub output_dir: Option<PathBuf>,
    /// Bundle to start from (for example a trained shape stage).
    pub init_checkpoint: Option<PathBuf>,
    /// Checkpoint to resume from; its iteration counter is continued.
    pub resume: Option<PathBuf>,
    pub method: Method,
    pub slst_mode: SlstMode,
    pub epsilon: f64,
    /// Sample switch gates during texture training.
    pub gates_in_training: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Stage::Shape)
    }
}

impl TrainConfig {
    /// Small CPU preset used for tests and the toy runs.
    pub fn desk(stage: Stage) -> Self {
        let (iterations, batch_size, learning_rate, lr_decay) = match stage {
            Stage::Shape => (1500, 4, 1e-3, 0.999),
            Stage::Texture => (1000, 4, 2e-3, 0.999),
        };
        Self {
            stage,
            iterations,
            batch_size,
            learning_rate,
            lr_decay,
            seed: 7,
            feature_dim: 64,
            layers: 4,
            fusion: Fusion::Drgnet,
            head_init_std: 1e-3,
            channels: 32,
            decoder_hidden: 64,
            weights: LossWeights {
                laplacian: 1.0,
                ..LossWeights::default()
            },
            fixtures: PathBuf::from("fixtures"),
            render_resolution: 64,
            sigma: 1e-4,
            checkpoint_every: 0,
            output_dir: None,
            init_checkpoint: None,
            resume: None,
            method: Method::Sadain,
            slst_mode: SlstMode::Wct,
            epsilon: 1e-5,
            gates_in_training: false,
        }
    }

    /// Full-scale schedule: 100k shape / 80k texture iterations, batch 8,
    /// learning rate 1e-4 decayed by 0.9995 per iteration, D = C = 512, L = 8.
    pub fn full_scale(stage: Stage) -> Self {
        Self {
            iterations: match stage {
                Stage::Shape => 100_000,
                Stage::Texture => 80_000,
            },
            batch_size: 8,
            learning_rate: 1e-4,
            lr_decay: 0.9995,
            feature_dim: 512,
            layers: 8,
            channels: 512,
            ..Self::desk(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.stage == Stage::Shape && self.batch_size < 4 && self.fusion == Fusion::Drgnet {
            return fail(format!(
                "shape training needs batch_size >= 4 for batch normalisation, got {}",
                self.batch_size
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.channels == 0 || self.decoder_hidden == 0 || self.render_resolution == 0 {
            return fail("channels, decoder_hidden and render_resolution must be positive".into());
        }
        if !IMAGE_SIZE.is_multiple_of(self.render_resolution) {
            return fail(format!("render_resolution must divide {IMAGE_SIZE}"));
        }
        self.shape_config().validate()?;
        if !(self.sigma > 0.0) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }

    pub fn shape_config(&self) -> ShapeConfig {
        ShapeConfig {
            feature_dim: self.feature_dim,
            layers: self.layers,
            fusion: self.fusion,
            head_init_std: self.head_init_std,
            ..ShapeConfig::default()
        }
    }

    pub fn texture_config(&self) -> TextureNetConfig {
        TextureNetConfig {
            channels: self.channels,
            decoder_hidden: self.decoder_hidden,
            ..TextureNetConfig::default()
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig::default()
            .with_resolution(self.render_resolution)
            .with_sigma(self.sigma)
    }

    pub fn stylizer_config(&self, seed: u64) -> StylizerConfig {
        StylizerConfig {
            method: self.method,
            slst_mode: self.slst_mode,
            stochastic_gates: self.gates_in_training,
            epsilon: self.epsilon,
            seed,
            ..StylizerConfig::default()
        }
    }

    /// `lr₀ · decay^t`.
    pub fn learning_rate_at(&self, t: u64) -> f64 {
        self.learning_rate * self.lr_decay.powf(t as f64)
    }

    /// Parses a JSON config, applies `key=value` overrides (dotted keys reach
    /// into nested objects; values are parsed as JSON, falling back to a
    /// plain string) and validates the result.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        let overridden = overrides
            .iter()
            .rev()
            .find_map(|o| o.strip_prefix("stage="))
            .map(|s| serde_json::from_str(s).unwrap_or_else(|_| serde_json::Value::String(s.to_string())));
        let stage = overridden.or_else(|| value.get("stage").cloned());
        let stage: Stage = match stage {
            Some(s) => serde_json::from_value(s)?,
            None => Stage::Shape,
        };
        let mut base = serde_json::to_value(Self::desk(stage))?;
        merge(&mut base, std::mem::take(&mut value));
        for o in overrides {
            apply_override(&mut base, o)?;
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

pub fn apply_override(value: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not of the form key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = value;
    for part in key.split('.') {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override key '{key}' does not name an object field")))?;
        cur = obj.entry(part.to_string()).or_insert(serde_json::Value::Null);
    }
    *cur = parsed;
    Ok(())
}

/// Per-iteration sample order: sources cycle through the set, targets are
/// drawn from a stream keyed by the iteration, so any iteration can be
/// replayed without earlier RNG state.
pub fn sample_pairs(seed: u64, iteration: u64, n: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    (0..batch)
        .map(|j| {
            let s = ((iteration as usize) * batch + j) % n;
            let t = if n == 1 {
                rng.random_range(0..n)
            } else {
                let r = rng.random_range(0..n - 1);
                if r >= s {
                    r + 1
                } else {
                    r
                }
            };
            (s, t)
        })
        .collect()
}

/// Texture-stage sample order: every ordered pair (including a fixture with
/// itself) is visited once per `n²` samples, in a seeded relabelling of the
/// fixture indices.
pub fn cyclic_pairs(seed: u64, iteration: u64, n: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    (0..batch)
        .map(|j| {
            let q = iteration as usize * batch + j;
            let s = q % n;
            let offset = (q / n) % n;
            (perm[s], perm[(s + offset) % n])
        })
        .collect()
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    /// One report per iteration run in this call.
    pub trace: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

struct RunFiles {
    log: Option<File>,
    dir: Option<PathBuf>,
    checkpoints: Vec<PathBuf>,
    last_good: Option<PathBuf>,
}

impl RunFiles {
    fn open(cfg: &TrainConfig, name: &str, append: bool) -> Result<Self> {
        let Some(dir) = cfg.output_dir.clone() else {
            return Ok(Self {
                log: None,
                dir: None,
                checkpoints: Vec::new(),
                last_good: cfg.resume.clone(),
            });
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{name}_log.jsonl"));
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            log: Some(log),
            dir: Some(dir),
            checkpoints: Vec::new(),
            last_good: cfg.resume.clone(),
        })
    }

    fn record(&mut self, iter: u64, report: &LossReport) -> Result<()> {
        if let (Some(log), Some(dir)) = (self.log.as_mut(), self.dir.as_ref()) {
            writeln!(log, "{}", report.log_line(iter)).map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, bundle: &ModelBundle, name: &str, iter: u64) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{name}_{iter:06}.ckpt"));
            bundle.save(&path)?;
            self.last_good = Some(path.clone());
            self.checkpoints.push(path);
        }
        Ok(())
    }

    fn finish(&mut self, bundle: &ModelBundle) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join("model.ckpt");
            bundle.save(&path)?;
            self.checkpoints.push(path);
        }
        Ok(())
    }
}

/// Per-fixture tensors reused across iterations.
struct ShapeTargets {
    silhouettes: Vec<Vec<f64>>,
    images: Vec<Grid>,
}

fn prepare_shape_targets(fixtures: &FixtureSet, size: usize) -> Result<ShapeTargets> {
    let mut silhouettes = Vec::with_capacity(fixtures.len());
    let mut images = Vec::with_capacity(fixtures.len());
    for s in &fixtures.samples {
        silhouettes.push(s.silhouette_at(size)?);
        images.push(s.image_at(size)?);
    }
    Ok(ShapeTargets { silhouettes, images })
}

/// One forward/backward pass of the shape objective. Gradients are left in
/// the model; running statistics are updated.
fn shape_step(
    bundle: &mut ModelBundle,
    fixtures: &FixtureSet,
    targets: &ShapeTargets,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let render = cfg.render_config();
    let w = &cfg.weights;
    let b = pairs.len();
    let model = &mut bundle.shape;
    model.zero_grad();

    let mut used: Vec<usize> = pairs.iter().flat_map(|&(s, t)| [s, t]).collect();
    used.sort_unstable();
    used.dedup();
    let mut encoded: BTreeMap<usize, (Vec<f64>, EncoderCache)> = BTreeMap::new();
    for &i in &used {
        encoded.insert(i, model.encoder.forward(&fixtures.samples[i].image)?);
    }
    let d = model.config.feature_dim;
    let feat = |i: usize| -> &[f64] { &encoded[&i].0 };
    // Rows: reconstruct source, reconstruct target, transfer.
    let mut src_rows = Vec::with_capacity(3 * b * d);
    let mut tgt_rows = Vec::with_capacity(3 * b * d);
    for &(s, _) in pairs {
        src_rows.extend_from_slice(feat(s));
        tgt_rows.extend_from_slice(feat(s));
    }
    for &(_, t) in pairs {
        src_rows.extend_from_slice(feat(t));
        tgt_rows.extend_from_slice(feat(t));
    }
    for &(s, t) in pairs {
        src_rows.extend_from_slice(feat(s));
        tgt_rows.extend_from_slice(feat(t));
    }
    let fwd = model.forward_features(&src_rows, &tgt_rows, 3 * b, &TransferControls::training())?;
    let topo = &model.template.topology;
    let n_rows = 3 * b;
    let mut grads: Vec<Vec<[f64; 3]>> = vec![vec![[0.0; 3]; topo.n_total()]; n_rows];

    let fixture_of = |row: usize| -> usize {
        if row < b {
            pairs[row].0
        } else {
            pairs[row - b].1
        }
    };
    let mut mask_sum = 0.0;
    let mut perceptual_sum = 0.0;
    for row in 0..2 * b {
        let fi = fixture_of(row);
        let sample = &fixtures.samples[fi];
        let mesh = &fwd.meshes[row];
        let sil = SoftSilhouette::render(mesh, topo, &sample.camera, &render)?;
        let gt = &targets.silhouettes[fi];
        mask_sum += mask_loss(gt, &sil.image.values)?;
        if w.mask != 0.0 {
            let mut g = mask_loss_grad(gt, &sil.image.values)?;
            g.iter_mut().for_each(|v| *v *= w.mask / b as f64);
            let (gv, _) = sil.backward(mesh, topo, &sample.camera, &g);
            add_into(&mut grads[row], &gv);
        }
        if w.perceptual != 0.0 {
            let tex = render_textured(
                mesh,
                topo,
                &sample.camera,
                sample.texture.grid(),
                &model.template.uv,
                &render,
            )?;
            perceptual_sum += perceptual_loss(&targets.images[fi], &tex.image, &bundle.texture.encoder)?;
        }
    }

    let mut key_sum = 0.0;
    for (j, &(s, t)) in pairs.iter().enumerate() {
        let row = 2 * b + j;
        let idx = &fixtures.samples[s].keypoints;
        let idx_t = &fixtures.samples[t].keypoints;
        let p = Keypoints3D::from_mesh(&fwd.meshes[row], idx)?;
        let ps = Keypoints3D::from_mesh(&fwd.meshes[j], idx)?;
        let pt = Keypoints3D::from_mesh(&fwd.meshes[b + j], idx_t)?;
        key_sum += keypoint_loss(&p, &ps, &pt, w.keypoint_lambda)?;
        if w.keypoint != 0.0 {
            let (gp, gs, gt) = keypoint_loss_grads(&p, &ps, &pt, w.keypoint_lambda)?;
            let scale = w.keypoint / b as f64;
            for (r, g, indices) in [(row, &gp, idx), (j, &gs, idx), (b + j, &gt, idx_t)] {
                for (k, &vi) in indices.iter().enumerate() {
                    for c in 0..3 {
                        // Plane projection zeroes the plane coordinate.
                        if c != crate::geometry::PLANE_AXIS {
                            grads[r][vi][c] += scale * g[k][c];
                        }
                    }
                }
            }
        }
    }

    let mut lap_sum = 0.0;
    let mut edge_sum = 0.0;
    for (row, mesh) in fwd.meshes.iter().enumerate() {
        lap_sum += laplacian_energy(mesh, topo)?;
        edge_sum += edge_energy(mesh, topo)?;
        if w.laplacian != 0.0 {
            add_scaled(
                &mut grads[row],
                &laplacian_energy_grad(mesh, topo)?,
                w.laplacian / n_rows as f64,
            );
        }
        if w.edge != 0.0 {
            add_scaled(&mut grads[row], &edge_energy_grad(mesh, topo)?, w.edge / n_rows as f64);
        }
    }

    let report = shape_total(
        mask_sum / b as f64,
        perceptual_sum / b as f64,
        key_sum / b as f64,
        lap_sum / n_rows as f64,
        edge_sum / n_rows as f64,
        w,
    );
    if !report.is_finite() {
        return Ok(report);
    }

    let (ds, dt) = model.backward_features(&fwd, &grads);
    let mut dfeat: BTreeMap<usize, Vec<f64>> = used.iter().map(|&i| (i, vec![0.0; d])).collect();
    for row in 0..n_rows {
        let (si, ti) = if row < b {
            (pairs[row].0, pairs[row].0)
        } else if row < 2 * b {
            (pairs[row - b].1, pairs[row - b].1)
        } else {
            pairs[row - 2 * b]
        };
        for k in 0..d {
            dfeat.get_mut(&si).expect("used")[k] += ds[row * d + k];
            dfeat.get_mut(&ti).expect("used")[k] += dt[row * d + k];
        }
    }
    for (i, g) in &dfeat {
        model.encoder.backward(&encoded[i].1, g);
    }
    model.update_running(&fwd);
    Ok(report)
}

fn add_into(acc: &mut [[f64; 3]], g: &[[f64; 3]]) {
    add_scaled(acc, g, 1.0);
}

fn add_scaled(acc: &mut [[f64; 3]], g: &[[f64; 3]], s: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for c in 0..3 {
            a[c] += s * b[c];
        }
    }
}

fn grads_finite(model: &dyn Parameterized) -> bool {
    let mut ok = true;
    model.visit("", &mut |_, p| ok &= p.grad.iter().all(|g| g.is_finite()));
    ok
}

/// Trains the shape stage from `bundle.shape_iteration` up to
/// `cfg.iterations`.
pub fn train_shape(cfg: &TrainConfig, fixtures: &FixtureSet, mut bundle: ModelBundle) -> Result<TrainOutcome> {
    cfg.validate()?;
    if fixtures.is_empty() {
        return Err(Error::Config("shape training needs at least one fixture".into()));
    }
    let targets = prepare_shape_targets(fixtures, cfg.render_resolution)?;
    let mut files = RunFiles::open(cfg, "shape", bundle.shape_iteration > 0)?;
    let mut trace = Vec::new();
    for t in bundle.shape_iteration..cfg.iterations {
        let pairs = sample_pairs(cfg.seed, t, fixtures.len(), cfg.batch_size);
        let report = shape_step(&mut bundle, fixtures, &targets, &pairs, cfg)?;
        if !report.is_finite() || !grads_finite(&bundle.shape) {
            return Err(Error::NonFinite {
                iteration: t as usize,
                last_good: files.last_good.clone(),
            });
        }
        bundle
            .shape_opt
            .update(&mut bundle.shape, SHAPE_PREFIX, cfg.learning_rate_at(t));
        bundle.shape_iteration = t + 1;
        files.record(t, &report)?;
        log::debug!("shape iter {t}: {}", report.log_line(t));
        trace.push(report);
        if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 {
            files.checkpoint(&bundle, "shape", t + 1)?;
        }
    }
    files.finish(&bundle)?;
    Ok(TrainOutcome {
        bundle,
        trace,
        checkpoints: files.checkpoints,
    })
}

/// Encoder features and feature-resolution masks of every fixture texture.
pub struct TextureTargets {
    pub features: Vec<FeatureMap>,
    pub masks: Vec<SemanticUvMask>,
}

pub fn prepare_texture_targets(bundle: &ModelBundle, fixtures: &FixtureSet) -> Result<TextureTargets> {
    let mut features = Vec::with_capacity(fixtures.len());
    let mut masks = Vec::with_capacity(fixtures.len());
    for s in &fixtures.samples {
        features.push(bundle.texture.encoder.encode(s.texture.grid())?);
        masks.push(downsample_mask(&s.semantic_mask)?);
    }
    Ok(TextureTargets { features, masks })
}

fn texture_step(
    bundle: &mut ModelBundle,
    targets: &TextureTargets,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<LossReport> {
    let method = cfg.method;
    let b = pairs.len() as f64;
    let mut style_sum = 0.0;
    let mut content_sum = 0.0;
    let texture = &mut bundle.texture;
    let decoder = texture.decoders.get_mut(&method).expect("decoder initialised");
    decoder.zero_grad();
    for (j, &(s, t)) in pairs.iter().enumerate() {
        let scfg = cfg.stylizer_config(cfg.seed ^ (iteration << 8) ^ j as u64);
        let (vs, vt) = (&targets.features[s], &targets.features[t]);
        let (ms, mt) = (&targets.masks[s], &targets.masks[t]);
        let (stylized, report) = stylize_features(vs, vt, ms, mt, &scfg)?;
        let (out, dcache) = decoder.forward(&stylized)?;
        let (feat, ecache) = texture.encoder.forward(&out)?;
        let (content, mut g) = content_loss(&feat, &stylized)?;
        // Style statistics come from whichever side supplied the style of
        // each part.
        let stats_t = part_stats(vt, mt, scfg.epsilon);
        let stats_s = part_stats(vs, ms, scfg.epsilon);
        let stats = std::array::from_fn(|i| {
            if report.gates[i] {
                stats_s[i].clone()
            } else {
                stats_t[i].clone()
            }
        });
        let (style, gs) = style_loss(&feat, ms, &stats, scfg.epsilon)?;
        content_sum += content;
        style_sum += style;
        let (wc, ws) = (cfg.weights.content / b, cfg.weights.style / b);
        for (a, x) in g.data.iter_mut().zip(&gs.data) {
            *a = wc * *a + ws * x;
        }
        let dimg = texture.encoder.backward_input(&ecache, &g);
        decoder.backward(&dcache, &dimg);
    }
    Ok(texture_total(style_sum / b, content_sum / b, &cfg.weights))
}

/// Trains the decoder for `cfg.method` with the encoder frozen.
pub fn train_texture(cfg: &TrainConfig, fixtures: &FixtureSet, mut bundle: ModelBundle) -> Result<TrainOutcome> {
    cfg.validate()?;
    if fixtures.is_empty() {
        return Err(Error::Config("texture training needs at least one fixture".into()));
    }
    let method = cfg.method;
    if bundle.texture.config.channels != cfg.channels {
        return Err(Error::Config(format!(
            "bundle texture channels {} differ from the configured {}",
            bundle.texture.config.channels, cfg.channels
        )));
    }
    let tcfg = bundle.texture.config;
    let seed = bundle.seed;
    bundle
        .texture
        .decoders
        .entry(method)
        .or_insert_with(|| init_decoder(&tcfg, seed, method));
    let targets = prepare_texture_targets(&bundle, fixtures)?;
    let start = bundle.texture_iterations.get(&method).copied().unwrap_or(0);
    let mut files = RunFiles::open(cfg, &format!("texture_{}", method.name()), start > 0)?;
    let mut trace = Vec::new();
    let prefix = decoder_prefix(method);
    for t in start..cfg.iterations {
        let pairs = cyclic_pairs(cfg.seed, t, fixtures.len(), cfg.batch_size);
        let report = texture_step(&mut bundle, &targets, &pairs, cfg, t)?;
        let decoder = bundle.texture.decoders.get_mut(&method).expect("decoder initialised");
        if !report.is_finite() || !grads_finite(decoder) {
            return Err(Error::NonFinite {
                iteration: t as usize,
                last_good: files.last_good.clone(),
            });
        }
        let opt = bundle.texture_opt.entry(method).or_default();
        opt.update(decoder, &prefix, cfg.learning_rate_at(t));
        bundle.texture_iterations.insert(method, t + 1);
        files.record(t, &report)?;
        trace.push(report);
        if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 {
            files.checkpoint(&bundle, &format!("texture_{}", method.name()), t + 1)?;
        }
    }
    files.finish(&bundle)?;
    Ok(TrainOutcome {
        bundle,
        trace,
        checkpoints: files.checkpoints,
    })
}

/// Reconstruction mesh of one fixture in inference mode (both inputs equal).
pub fn reconstruct(bundle: &ModelBundle, image: &Grid) -> Result<MeshVertices> {
    let f = bundle.shape.encoder.encode(image)?;
    bundle
        .shape
        .generate_from_features(&f, &f, &TransferControls::inference(0.0)?)
}

/// Inference-mode reconstruction mask loss per fixture.
pub fn evaluate_reconstruction(
    bundle: &ModelBundle,
    fixtures: &FixtureSet,
    render: &RenderConfig,
) -> Result<Vec<(String, f64)>> {
    let topo = &bundle.shape.template.topology;
    fixtures
        .samples
        .iter()
        .map(|s| {
            let mesh = reconstruct(bundle, &s.image)?;
            let sil = SoftSilhouette::render(&mesh, topo, &s.camera, render)?;
            let gt = s.silhouette_at(render.resolution)?;
            Ok((s.id.clone(), mask_loss(&gt, &sil.image.values)?))
        })
        .collect()
}

/// Mean absolute error of `decode(encode(texture))` over the fixture set.
pub fn texture_reconstruction_mae(bundle: &ModelBundle, fixtures: &FixtureSet, method: Method) -> Result<f64> {
    let decoder = bundle.texture.decoder(method)?;
    let mut total = 0.0;
    for s in &fixtures.samples {
        let out = decoder.decode(&bundle.texture.encoder.encode(s.texture.grid())?)?;
        total += out.mean_abs_diff(s.texture.grid())?;
    }
    Ok(total / fixtures.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub layers: usize,
    pub mean_iou: f64,
    pub per_fixture_iou: Vec<(String, f64)>,
    pub final_train_loss: f64,
}

/// Trains one fresh shape model per depth and reports reconstruction IoU.
pub fn ablate_drgnet(cfg: &TrainConfig, fixtures: &FixtureSet, layers: &[usize]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(layers.len());
    for &l in layers {
        let run_cfg = TrainConfig {
            layers: l,
            fusion: Fusion::Drgnet,
            output_dir: None,
            checkpoint_every: 0,
            resume: None,
            init_checkpoint: None,
            ..cfg.clone()
        };
        let bundle = ModelBundle::new(run_cfg.shape_config(), run_cfg.texture_config(), run_cfg.seed)?;
        let out = train_shape(&run_cfg, fixtures, bundle)?;
        let eval = evaluate_reconstruction(&out.bundle, fixtures, &run_cfg.render_config())?;
        let per: Vec<(String, f64)> = eval.into_iter().map(|(id, l)| (id, 1.0 - l)).collect();
        rows.push(AblationRow {
            layers: l,
            mean_iou: per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64,
            per_fixture_iou: per,
            final_train_loss: out.trace.last().map_or(f64::NAN, |r| r.total),
        });
    }
    Ok(rows)
}

/// Loads the starting bundle for a run: `resume` first, then
/// `init_checkpoint`, else a fresh initialisation.
pub fn initial_bundle(cfg: &TrainConfig) -> Result<ModelBundle> {
    if let Some(path) = &cfg.resume {
        return ModelBundle::load(path, Some(&cfg.shape_config()));
    }
    if let Some(path) = &cfg.init_checkpoint {
        let mut b = ModelBundle::load(path, Some(&cfg.shape_config()))?;
        match cfg.stage {
            Stage::Shape => {
                b.shape_iteration = 0;
                b.shape_opt = Adam::default();
            }
            Stage::Texture => {
                b.texture_iterations.remove(&cfg.method);
                b.texture_opt.remove(&cfg.method);
            }
        }
        return Ok(b);
    }
    ModelBundle::new(cfg.shape_config(), cfg.texture_config(), cfg.seed)
}

/// Loads fixtures and the starting bundle, then runs the configured stage.
pub fn run(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let fixtures = crate::fixtures::load_fixtures(&cfg.fixtures)?;
    let bundle = initial_bundle(cfg)?;
    match cfg.stage {
        Stage::Shape => train_shape(cfg, &fixtures, bundle),
        Stage::Texture => train_texture(cfg, &fixtures, bundle),
    }
}

pub fn write_config(cfg: &TrainConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
