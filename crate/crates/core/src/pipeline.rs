//! End-to-end inference: shape transfer, texture stylization and rendering
//! from the source camera.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::error::{Error, Result};
use crate::fixtures::{FixtureSample, IMAGE_SIZE};
use crate::geometry::{export_obj, Keypoints3D, MeshVertices};
use crate::grid::{write_png, Grid};
use crate::renderer::{render_textured, RenderConfig};
use crate::shape_gen::TransferControls;
use crate::texture_style::{stylize_uv, Method, StylizeReport, StylizerConfig, UvTexture};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub alpha: f64,
    /// Head, neck, belly, back.
    pub switch_gates: [bool; 4],
    pub method: Method,
    pub seed: u64,
    pub resolution: usize,
}

impl Default for TransferSpec {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            switch_gates: [false; 4],
            method: Method::Sadain,
            seed: 0,
            resolution: IMAGE_SIZE,
        }
    }
}

impl TransferSpec {
    pub fn validate(&self) -> Result<()> {
        TransferControls::inference(self.alpha)?;
        if self.resolution == 0 {
            return Err(Error::Invalid("render resolution must be positive".into()));
        }
        Ok(())
    }

    fn stylizer(&self) -> StylizerConfig {
        StylizerConfig {
            method: self.method,
            switch_gates: self.switch_gates,
            stochastic_gates: false,
            seed: self.seed,
            ..StylizerConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source_id: String,
    pub target_id: String,
    pub alpha: f64,
    pub switch_gates: [bool; 4],
    pub method: Method,
    /// Method whose decoder produced the texture (differs from `method` when
    /// no decoder was trained for it).
    pub decoder: Method,
    pub seed: u64,
    pub stylize: StylizeReport,
    pub foreground_fraction: f64,
    pub keypoints: Vec<[f64; 3]>,
}

pub struct TransferResult {
    pub mesh: MeshVertices,
    pub texture: UvTexture,
    pub render: Grid,
    /// Binary coverage of the render, one channel.
    pub silhouette: Grid,
    pub report: TransferReport,
}

/// Decoder actually used for `method`.
fn decoder_method(bundle: &ModelBundle, method: Method) -> Result<Method> {
    if bundle.texture.decoders.contains_key(&method) {
        return Ok(method);
    }
    bundle
        .texture
        .decoders
        .keys()
        .next()
        .copied()
        .ok_or_else(|| Error::Config("no trained texture decoder in the model".into()))
}

pub fn transfer_mesh(
    bundle: &ModelBundle,
    source: &FixtureSample,
    target: &FixtureSample,
    alpha: f64,
) -> Result<MeshVertices> {
    let shape = &bundle.shape;
    let fs = shape.encoder.encode(&source.image)?;
    let ft = shape.encoder.encode(&target.image)?;
    shape.generate_from_features(&fs, &ft, &TransferControls::inference(alpha)?)
}

pub fn transfer_texture(
    bundle: &ModelBundle,
    source: &FixtureSample,
    target: &FixtureSample,
    spec: &TransferSpec,
) -> Result<(UvTexture, StylizeReport)> {
    stylize_uv(
        &source.texture,
        &target.texture,
        &source.semantic_mask,
        &target.semantic_mask,
        &spec.stylizer(),
        &bundle.texture,
    )
}

fn render_mesh(
    bundle: &ModelBundle,
    mesh: &MeshVertices,
    texture: &UvTexture,
    source: &FixtureSample,
    resolution: usize,
) -> Result<(Grid, Grid)> {
    let template = &bundle.shape.template;
    let cfg = RenderConfig::default().with_resolution(resolution);
    let r = render_textured(
        mesh,
        &template.topology,
        &source.camera,
        texture.grid(),
        &template.uv,
        &cfg,
    )?;
    let cov = r.coverage.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    Ok((r.image, Grid::from_vec(1, resolution, resolution, cov)?))
}

pub fn transfer(
    bundle: &ModelBundle,
    source: &FixtureSample,
    target: &FixtureSample,
    spec: &TransferSpec,
) -> Result<TransferResult> {
    spec.validate()?;
    let decoder = decoder_method(bundle, spec.method)?;
    let mesh = transfer_mesh(bundle, source, target, spec.alpha)?;
    let (texture, stylize) = transfer_texture(bundle, source, target, spec)?;
    let (render, silhouette) = render_mesh(bundle, &mesh, &texture, source, spec.resolution)?;
    let keypoints = Keypoints3D::from_mesh(&mesh, &source.keypoints)?;
    let foreground_fraction = silhouette.data.iter().sum::<f64>() / silhouette.data.len() as f64;
    Ok(TransferResult {
        report: TransferReport {
            source_id: source.id.clone(),
            target_id: target.id.clone(),
            alpha: spec.alpha,
            switch_gates: spec.switch_gates,
            method: spec.method,
            decoder,
            seed: spec.seed,
            stylize,
            foreground_fraction,
            keypoints: keypoints.points,
        },
        mesh,
        texture,
        render,
        silhouette,
    })
}

/// Writes `mesh.obj`, `texture.png`, `render.png`, `silhouette.png` and
/// `report.json` into `dir`.
pub fn write_transfer(bundle: &ModelBundle, result: &TransferResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let template = &bundle.shape.template;
    export_obj(
        &result.mesh,
        &template.topology,
        Some(&template.uv),
        &dir.join("mesh.obj"),
    )?;
    write_png(result.texture.grid(), &dir.join("texture.png"))?;
    write_png(&result.render, &dir.join("render.png"))?;
    write_png(&result.silhouette, &dir.join("silhouette.png"))?;
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&result.report)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// `steps` evenly spaced values from −1 to 1 inclusive.
pub fn alpha_steps(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::Invalid(format!(
            "an alpha sweep needs at least 2 steps, got {steps}"
        )));
    }
    let last = (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| {
            // Exact endpoints and an exact zero for odd step counts.
            let a = (2 * i) as f64 / last - 1.0;
            if 2 * i + 1 == steps {
                0.0
            } else {
                a
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFrame {
    pub alpha: f64,
    pub keypoints: Vec<[f64; 3]>,
    /// Mean keypoint displacement from the previous frame (0 for the first).
    pub displacement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub source_id: String,
    pub target_id: String,
    pub frames: Vec<SweepFrame>,
    /// Sum of the frame displacements.
    pub path_length: f64,
}

pub struct Sweep {
    pub summary: SweepSummary,
    pub meshes: Vec<MeshVertices>,
    pub renders: Vec<Grid>,
    pub texture: UvTexture,
}

pub fn mean_displacement(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n
}

/// Shape transfer at evenly spaced α with a fixed stylized texture.
pub fn sweep_alpha(
    bundle: &ModelBundle,
    source: &FixtureSample,
    target: &FixtureSample,
    steps: usize,
    spec: &TransferSpec,
) -> Result<Sweep> {
    let alphas = alpha_steps(steps)?;
    spec.validate()?;
    let (texture, _) = transfer_texture(bundle, source, target, spec)?;
    let mut frames: Vec<SweepFrame> = Vec::with_capacity(steps);
    let mut meshes = Vec::with_capacity(steps);
    let mut renders = Vec::with_capacity(steps);
    for alpha in alphas {
        let mesh = transfer_mesh(bundle, source, target, alpha)?;
        let (render, _) = render_mesh(bundle, &mesh, &texture, source, spec.resolution)?;
        let keypoints = Keypoints3D::from_mesh(&mesh, &source.keypoints)?.points;
        let displacement = frames
            .last()
            .map_or(0.0, |prev| mean_displacement(&prev.keypoints, &keypoints));
        frames.push(SweepFrame {
            alpha,
            keypoints,
            displacement,
        });
        meshes.push(mesh);
        renders.push(render);
    }
    let path_length = frames.iter().map(|f| f.displacement).sum();
    Ok(Sweep {
        summary: SweepSummary {
            source_id: source.id.clone(),
            target_id: target.id.clone(),
            frames,
            path_length,
        },
        meshes,
        renders,
        texture,
    })
}

/// Concatenates equally sized images left to right.
pub fn horizontal_strip(images: &[Grid]) -> Result<Grid> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("cannot build a strip from zero images".into()))?;
    let (c, h, w) = first.shape();
    let mut out = Grid::zeros(c, h, w * images.len());
    for (k, img) in images.iter().enumerate() {
        if img.shape() != (c, h, w) {
            return Err(Error::dim(
                "strip image",
                format!("{c}x{h}x{w}"),
                format!("{:?}", img.shape()),
            ));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, y, k * w + x, img.get(ch, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Writes `alpha_<i>.png` per frame, `strip.png` and `sweep.json`.
pub fn write_sweep(sweep: &Sweep, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, r) in sweep.renders.iter().enumerate() {
        write_png(r, &dir.join(format!("alpha_{i:02}.png")))?;
    }
    write_png(&horizontal_strip(&sweep.renders)?, &dir.join("strip.png"))?;
    let path = dir.join("sweep.json");
    let text = serde_json::to_string_pretty(&sweep.summary)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
