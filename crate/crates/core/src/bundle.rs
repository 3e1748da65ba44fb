//! All model parameters plus optimiser and progress state, persisted as one
//! checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Block, Container};
use crate::error::{Error, Result};
use crate::nn::{Adam, Param, Parameterized};
use crate::shape_gen::{ShapeConfig, ShapeModel};
use crate::texture_style::{Method, TextureDecoder, TextureModel, TextureNetConfig};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub feature_dim: usize,
    pub layers: usize,
    pub n_left: usize,
    pub seed: u64,
    /// Completed shape-training iterations.
    pub iteration: u64,
    pub shape_config: ShapeConfig,
    pub texture_config: TextureNetConfig,
    pub decoders: Vec<Method>,
    pub texture_iterations: BTreeMap<Method, u64>,
    pub shape_adam_step: u64,
    pub texture_adam_steps: BTreeMap<Method, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub seed: u64,
    pub shape: ShapeModel,
    pub texture: TextureModel,
    pub shape_iteration: u64,
    pub texture_iterations: BTreeMap<Method, u64>,
    pub shape_opt: Adam,
    pub texture_opt: BTreeMap<Method, Adam>,
}

pub const SHAPE_PREFIX: &str = "shape";
pub const TEXTURE_PREFIX: &str = "texture";

pub fn decoder_prefix(method: Method) -> String {
    format!("{TEXTURE_PREFIX}.decoder.{}", method.name())
}

/// Deterministic initial decoder for `method`.
pub fn init_decoder(config: &TextureNetConfig, seed: u64, method: Method) -> TextureDecoder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xdec0de + method as u64));
    TextureDecoder::new(config.channels, config.decoder_hidden, &mut rng)
}

impl ModelBundle {
    pub fn new(shape: ShapeConfig, texture: TextureNetConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            seed,
            shape: ShapeModel::new(shape, seed)?,
            texture: TextureModel::new(texture),
            shape_iteration: 0,
            texture_iterations: BTreeMap::new(),
            shape_opt: Adam::default(),
            texture_opt: BTreeMap::new(),
        })
    }

    pub fn manifest(&self) -> BundleManifest {
        BundleManifest {
            format_version: BUNDLE_FORMAT_VERSION,
            feature_dim: self.shape.config.feature_dim,
            layers: self.shape.config.layers,
            n_left: self.shape.n_left(),
            seed: self.seed,
            iteration: self.shape_iteration,
            shape_config: self.shape.config.clone(),
            texture_config: self.texture.config,
            decoders: self.texture.decoders.keys().copied().collect(),
            texture_iterations: self.texture_iterations.clone(),
            shape_adam_step: self.shape_opt.step,
            texture_adam_steps: self.texture_opt.iter().map(|(m, a)| (*m, a.step)).collect(),
        }
    }

    fn visit_all(&self, f: &mut dyn FnMut(String, &Param)) {
        self.shape.visit(SHAPE_PREFIX, f);
        self.texture.visit(TEXTURE_PREFIX, f);
    }

    fn visit_all_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.shape.visit_mut(SHAPE_PREFIX, f);
        self.texture.visit_mut(TEXTURE_PREFIX, f);
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(serde_json::to_value(self.manifest())?);
        self.visit_all(&mut |name, p| c.insert(name, Block::f64(&p.shape, p.value.clone())));
        let topo = &self.shape.template.topology;
        let faces: Vec<u32> = topo.faces().iter().flatten().map(|&i| i as u32).collect();
        c.insert("topology.faces", Block::u32(&[topo.faces().len(), 3], faces));
        c.insert(
            "topology.on_plane",
            Block::u32(&[topo.n_left()], topo.on_plane().iter().map(|&b| b as u32).collect()),
        );
        c.insert(
            "topology.mirror_source",
            Block::u32(
                &[topo.n_mirrored()],
                topo.mirror_source().iter().map(|&i| i as u32).collect(),
            ),
        );
        let opts = std::iter::once(&self.shape_opt).chain(self.texture_opt.values());
        for opt in opts {
            for (name, (m, v)) in &opt.moments {
                c.insert(format!("adam.{name}.m"), Block::f64(&[m.len()], m.clone()));
                c.insert(format!("adam.{name}.v"), Block::f64(&[v.len()], v.clone()));
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    /// Loads a bundle. When `expected` is given, its dimensions must match
    /// the stored manifest.
    pub fn load(path: &Path, expected: Option<&ShapeConfig>) -> Result<Self> {
        Self::from_container(&Container::read(path)?, expected)
    }

    pub fn from_container(c: &Container, expected: Option<&ShapeConfig>) -> Result<Self> {
        let m: BundleManifest =
            serde_json::from_value(c.manifest.clone()).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if m.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "bundle format version {} is not supported (expected {BUNDLE_FORMAT_VERSION})",
                m.format_version
            )));
        }
        if let Some(exp) = expected {
            if (exp.feature_dim, exp.layers, exp.fusion) != (m.feature_dim, m.layers, m.shape_config.fusion) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has D={} L={} ({:?}) but the configuration asks for D={} L={} ({:?})",
                    m.feature_dim, m.layers, m.shape_config.fusion, exp.feature_dim, exp.layers, exp.fusion
                )));
            }
        }
        let mut bundle = Self::new(m.shape_config.clone(), m.texture_config, m.seed)?;
        if bundle.shape.n_left() != m.n_left {
            return Err(Error::Checkpoint(format!(
                "checkpoint n_left {} does not match the template ({})",
                m.n_left,
                bundle.shape.n_left()
            )));
        }
        check_topology(c, &bundle)?;
        for &method in &m.decoders {
            bundle
                .texture
                .decoders
                .insert(method, init_decoder(&m.texture_config, m.seed, method));
        }
        let mut err = None;
        bundle.visit_all_mut(&mut |name, p| {
            if err.is_some() {
                return;
            }
            match c.f64_block(&name, &p.shape) {
                Ok(v) => p.value.copy_from_slice(v),
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        bundle.shape_iteration = m.iteration;
        bundle.texture_iterations = m.texture_iterations.clone();
        bundle.shape_opt = load_adam(c, SHAPE_PREFIX, m.shape_adam_step);
        for (method, step) in &m.texture_adam_steps {
            bundle
                .texture_opt
                .insert(*method, load_adam(c, &decoder_prefix(*method), *step));
        }
        Ok(bundle)
    }
}

fn check_topology(c: &Container, bundle: &ModelBundle) -> Result<()> {
    let topo = &bundle.shape.template.topology;
    let (_, faces) = c.u32_block("topology.faces")?;
    let (_, on_plane) = c.u32_block("topology.on_plane")?;
    let (_, mirror) = c.u32_block("topology.mirror_source")?;
    let same_faces = faces.len() == 3 * topo.faces().len()
        && faces
            .iter()
            .zip(topo.faces().iter().flatten())
            .all(|(&a, &b)| a as usize == b);
    let same_plane =
        on_plane.len() == topo.n_left() && on_plane.iter().zip(topo.on_plane()).all(|(&a, &b)| (a != 0) == b);
    let same_mirror =
        mirror.len() == topo.n_mirrored() && mirror.iter().zip(topo.mirror_source()).all(|(&a, &b)| a as usize == b);
    if !(same_faces && same_plane && same_mirror) {
        return Err(Error::Checkpoint(
            "checkpoint topology does not match the template".into(),
        ));
    }
    Ok(())
}

fn load_adam(c: &Container, prefix: &str, step: u64) -> Adam {
    let mut adam = Adam {
        step,
        ..Adam::default()
    };
    let head = format!("adam.{prefix}.");
    for (name, block) in c.blocks.range(head.clone()..) {
        if !name.starts_with(&head) {
            break;
        }
        let Some(param) = name.strip_prefix("adam.").and_then(|n| n.strip_suffix(".m")) else {
            continue;
        };
        let (crate::checkpoint::BlockData::F64(m), Some(crate::checkpoint::BlockData::F64(v))) =
            (&block.data, c.blocks.get(&format!("adam.{param}.v")).map(|b| &b.data))
        else {
            continue;
        };
        adam.moments.insert(param.to_string(), (m.clone(), v.clone()));
    }
    adam
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trip() {
        let cfg = ShapeConfig {
            feature_dim: 8,
            layers: 2,
            ..Default::default()
        };
        let tcfg = TextureNetConfig {
            channels: 4,
            ..Default::default()
        };
        let mut b = ModelBundle::new(cfg.clone(), tcfg, 9).unwrap();
        b.texture
            .decoders
            .insert(Method::Sefdm, init_decoder(&tcfg, 9, Method::Sefdm));
        b.shape_iteration = 17;
        b.shape.zero_grad();
        b.shape_opt.update(&mut b.shape, SHAPE_PREFIX, 1e-3);
        let back = ModelBundle::from_container(&b.to_container().unwrap(), Some(&cfg)).unwrap();
        assert_eq!(back, b);
        let other = ShapeConfig { layers: 3, ..cfg };
        assert!(ModelBundle::from_container(&b.to_container().unwrap(), Some(&other)).is_err());
    }
}
