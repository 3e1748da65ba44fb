//! Procedural "proto-bird" fixture sets and the on-disk sample directory.
//!
//! A fixture directory holds `manifest.json` listing one descriptor JSON per
//! sample; each descriptor names its PNG files and carries the camera pose
//! and the keypoint vertex indices.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{quat_from_axis_angle, quat_mul, CameraPose};
use crate::error::{Error, Result};
use crate::geometry::{MeshVertices, Template};
use crate::grid::{read_indexed_png, read_png, write_indexed_png, write_png, Grid};
use crate::renderer::{render_textured, RenderConfig};
use crate::texture_style::{SemanticUvMask, UvTexture, NON_SEMANTIC, UV_HEIGHT, UV_WIDTH};

pub const IMAGE_SIZE: usize = 256;
pub const NUM_KEYPOINTS: usize = 15;
pub const FORMAT_VERSION: u32 = 1;
pub const MIN_FOREGROUND: f64 = 0.05;
pub const MAX_FOREGROUND: f64 = 0.6;

/// Palette of the indexed semantic mask PNGs; index 0 is unused.
pub const MASK_PALETTE: [[u8; 3]; 6] = [
    [0, 0, 0],
    [230, 40, 40],
    [40, 200, 60],
    [40, 80, 230],
    [240, 220, 40],
    [128, 128, 128],
];

/// One training/inference instance.
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSample {
    pub id: String,
    /// `3 × 256 × 256`.
    pub image: Grid,
    /// Binary foreground, row-major `256 × 256`.
    pub silhouette: Vec<f64>,
    pub semantic_mask: SemanticUvMask,
    pub texture: UvTexture,
    pub camera: CameraPose,
    pub keypoints: Vec<usize>,
}

impl FixtureSample {
    pub fn foreground_fraction(&self) -> f64 {
        self.silhouette.iter().sum::<f64>() / self.silhouette.len() as f64
    }

    /// Box-filtered silhouette at `size × size`.
    pub fn silhouette_at(&self, size: usize) -> Result<Vec<f64>> {
        let g = Grid::from_vec(1, IMAGE_SIZE, IMAGE_SIZE, self.silhouette.clone())?;
        if size == IMAGE_SIZE {
            return Ok(g.data);
        }
        if !IMAGE_SIZE.is_multiple_of(size) {
            return Err(Error::Invalid(format!("render size {size} must divide {IMAGE_SIZE}")));
        }
        Ok(g.downsample(IMAGE_SIZE / size)?.data)
    }

    pub fn image_at(&self, size: usize) -> Result<Grid> {
        if size == IMAGE_SIZE {
            return Ok(self.image.clone());
        }
        if !IMAGE_SIZE.is_multiple_of(size) {
            return Err(Error::Invalid(format!("render size {size} must divide {IMAGE_SIZE}")));
        }
        self.image.downsample(IMAGE_SIZE / size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSet {
    pub seed: u64,
    pub samples: Vec<FixtureSample>,
}

impl FixtureSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FixtureSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Shape parameters of one generated instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BirdParams {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub head_lift: f64,
    pub tail: f64,
    pub belly_sag: f64,
}

impl BirdParams {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            length: rng.random_range(0.55..0.72),
            width: rng.random_range(0.2..0.3),
            height: rng.random_range(0.24..0.34),
            head_lift: rng.random_range(0.05..0.2),
            tail: rng.random_range(0.1..0.3),
            belly_sag: rng.random_range(0.0..0.3),
        }
    }

    /// Deforms one template vertex. The first coordinate only ever gets
    /// scaled, so mirror symmetry and the plane vertices are preserved.
    pub fn deform(&self, v: [f64; 3]) -> [f64; 3] {
        let [x, y, z] = v;
        let head = ((z - 0.4) / 0.6).max(0.0);
        let tail = ((-z - 0.5) / 0.5).max(0.0);
        let sag = if y < 0.0 { 1.0 + self.belly_sag } else { 1.0 };
        [
            self.width * x * (1.0 - 0.4 * head) * (1.0 - 0.5 * tail),
            self.height * y * sag * (1.0 - 0.5 * tail) + self.head_lift * head * head,
            self.length * z - self.tail * tail * tail,
        ]
    }

    pub fn mesh(&self, template: &Template) -> MeshVertices {
        MeshVertices::new(template.vertices.coords.iter().map(|v| self.deform(*v)).collect())
    }
}

/// Semantic label of a texel from its UV coordinate: head and neck bands
/// near the `+z` pole, the body split into back (`y > 0`) and belly, and the
/// tail band non-semantic.
pub fn uv_label(u: f64, v: f64) -> u8 {
    if v < 0.18 {
        1
    } else if v < 0.30 {
        2
    } else if v < 0.85 {
        if (PI / 2.0 + 2.0 * PI * u).sin() >= 0.0 {
            4
        } else {
            3
        }
    } else {
        NON_SEMANTIC
    }
}

pub fn semantic_uv_mask() -> SemanticUvMask {
    let mut labels = Vec::with_capacity(UV_HEIGHT * UV_WIDTH);
    for r in 0..UV_HEIGHT {
        for c in 0..UV_WIDTH {
            labels.push(uv_label(
                c as f64 / (UV_WIDTH - 1) as f64,
                r as f64 / (UV_HEIGHT - 1) as f64,
            ));
        }
    }
    SemanticUvMask::new(UV_HEIGHT, UV_WIDTH, labels).expect("labels in range")
}

/// Part colours plus a smooth periodic pattern.
fn procedural_texture(mask: &SemanticUvMask, rng: &mut ChaCha8Rng) -> UvTexture {
    let colors: Vec<[f64; 3]> = (0..5)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.15..0.9)))
        .collect();
    let fu = rng.random_range(2..7) as f64;
    let fv = rng.random_range(1..5) as f64;
    let phase = rng.random_range(0.0..1.0);
    let amp = rng.random_range(0.06..0.15);
    let mut g = Grid::zeros(3, UV_HEIGHT, UV_WIDTH);
    for r in 0..UV_HEIGHT {
        for c in 0..UV_WIDTH {
            let (u, v) = (c as f64 / (UV_WIDTH - 1) as f64, r as f64 / (UV_HEIGHT - 1) as f64);
            let label = mask.labels[r * UV_WIDTH + c] as usize;
            let pattern = amp * (2.0 * PI * (fu * u + phase)).sin() * (2.0 * PI * fv * v).cos();
            for ch in 0..3 {
                let shade = if ch == 1 { -pattern } else { pattern };
                g.set(ch, r, c, (colors[label - 1][ch] + shade).clamp(0.0, 1.0));
            }
        }
    }
    UvTexture::new(g).expect("fixed size")
}

/// Side view of a body lying along `z`, with random yaw and tilt.
fn sample_camera(rng: &mut ChaCha8Rng) -> Result<CameraPose> {
    let yaw = (90.0 + rng.random_range(-25.0..25.0)) * PI / 180.0;
    let tilt = rng.random_range(-10.0..10.0) * PI / 180.0;
    let q = quat_mul(
        quat_from_axis_angle([1.0, 0.0, 0.0], tilt),
        quat_from_axis_angle([0.0, 1.0, 0.0], yaw),
    );
    let scale = rng.random_range(0.9..1.15);
    let t = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
    CameraPose::new(scale, t, q)
}

/// Template vertex indices used as keypoints: the head pole and top/bottom
/// points of the symmetry plane at seven positions along the body.
pub fn keypoint_indices(template: &Template) -> Vec<usize> {
    let mut dirs = vec![[0.0, 0.0, 1.0]];
    for z in [0.85, 0.55, 0.25, -0.05, -0.35, -0.65, -0.9] {
        let r = (1.0f64 - z * z).sqrt();
        dirs.push([0.0, r, z]);
        dirs.push([0.0, -r, z]);
    }
    let n_left = template.topology.n_left();
    dirs.iter()
        .map(|d| {
            (0..n_left)
                .min_by(|&a, &b| {
                    let da = sq_dist(template.vertices.coords[a], *d);
                    let db = sq_dist(template.vertices.coords[b], *d);
                    da.total_cmp(&db)
                })
                .expect("non-empty template")
        })
        .collect()
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Generates `n` instances deterministically from `seed`. Instances whose
/// silhouette covers less than 5% or more than 60% of the image are redrawn.
pub fn generate_fixtures(n: usize, seed: u64, template: &Template) -> Result<FixtureSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = semantic_uv_mask();
    let keypoints = keypoint_indices(template);
    let cfg = RenderConfig::default().with_resolution(IMAGE_SIZE);
    let mut samples = Vec::with_capacity(n);
    let mut attempts = 0;
    while samples.len() < n {
        attempts += 1;
        if attempts > 100 * (n + 1) {
            return Err(Error::Invalid(
                "fixture generator keeps producing out-of-range silhouettes".into(),
            ));
        }
        let params = BirdParams::sample(&mut rng);
        let camera = sample_camera(&mut rng)?;
        let texture = procedural_texture(&mask, &mut rng);
        let mesh = params.mesh(template);
        let render = render_textured(&mesh, &template.topology, &camera, texture.grid(), &template.uv, &cfg)?;
        let silhouette: Vec<f64> = render.coverage.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        let frac = silhouette.iter().sum::<f64>() / silhouette.len() as f64;
        if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            log::debug!("rejecting fixture with foreground fraction {frac:.3}");
            continue;
        }
        samples.push(FixtureSample {
            id: format!("bird_{:03}", samples.len()),
            image: render.image,
            silhouette,
            semantic_mask: mask.clone(),
            texture,
            camera,
            keypoints: keypoints.clone(),
        });
    }
    Ok(FixtureSet { seed, samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub samples: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDescriptor {
    pub id: String,
    pub image: String,
    pub silhouette: String,
    pub semantic_mask: String,
    pub texture: String,
    pub camera: CameraPose,
    pub keypoints: Vec<usize>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_fixtures(set: &FixtureSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(set.len());
    for s in &set.samples {
        let desc = SampleDescriptor {
            id: s.id.clone(),
            image: format!("{}_image.png", s.id),
            silhouette: format!("{}_silhouette.png", s.id),
            semantic_mask: format!("{}_mask.png", s.id),
            texture: format!("{}_texture.png", s.id),
            camera: s.camera,
            keypoints: s.keypoints.clone(),
        };
        write_png(&s.image, &dir.join(&desc.image))?;
        let sil = Grid::from_vec(1, IMAGE_SIZE, IMAGE_SIZE, s.silhouette.clone())?;
        write_png(&sil, &dir.join(&desc.silhouette))?;
        let m = &s.semantic_mask;
        write_indexed_png(
            &m.labels,
            m.height,
            m.width,
            &MASK_PALETTE,
            &dir.join(&desc.semantic_mask),
        )?;
        write_png(s.texture.grid(), &dir.join(&desc.texture))?;
        let name = format!("{}.json", s.id);
        write_json(&desc, &dir.join(&name))?;
        names.push(name);
    }
    write_json(
        &Manifest {
            version: FORMAT_VERSION,
            seed: set.seed,
            samples: names,
        },
        &dir.join("manifest.json"),
    )
}

pub fn load_fixtures(dir: &Path) -> Result<FixtureSet> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Invalid(format!(
            "fixture manifest version {} is not supported (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for name in &manifest.samples {
        let desc: SampleDescriptor = read_json(&dir.join(name))?;
        samples.push(load_sample(dir, &desc)?);
    }
    if samples.is_empty() {
        return Err(Error::Invalid(format!("fixture set at {} is empty", dir.display())));
    }
    Ok(FixtureSet {
        seed: manifest.seed,
        samples,
    })
}

/// Loads one sample from its descriptor JSON; file names resolve relative to
/// the descriptor's directory.
pub fn load_sample_file(path: &Path) -> Result<FixtureSample> {
    let desc: SampleDescriptor = read_json(path)?;
    load_sample(path.parent().unwrap_or(Path::new(".")), &desc)
}

fn load_sample(dir: &Path, desc: &SampleDescriptor) -> Result<FixtureSample> {
    let path = |f: &str| -> PathBuf { dir.join(f) };
    let image = read_png(&path(&desc.image))?;
    if image.shape() != (3, IMAGE_SIZE, IMAGE_SIZE) {
        return Err(Error::Image {
            path: path(&desc.image),
            msg: format!("expected a {IMAGE_SIZE}x{IMAGE_SIZE} RGB image"),
        });
    }
    let sil = read_png(&path(&desc.silhouette))?;
    if sil.shape() != (1, IMAGE_SIZE, IMAGE_SIZE) {
        return Err(Error::Image {
            path: path(&desc.silhouette),
            msg: format!("expected a {IMAGE_SIZE}x{IMAGE_SIZE} grayscale silhouette"),
        });
    }
    let silhouette = sil.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    let (labels, h, w) = read_indexed_png(&path(&desc.semantic_mask))?;
    let semantic_mask = SemanticUvMask::new(h, w, labels)?;
    if (h, w) != (UV_HEIGHT, UV_WIDTH) {
        return Err(Error::Image {
            path: path(&desc.semantic_mask),
            msg: format!("expected a {UV_HEIGHT}x{UV_WIDTH} mask"),
        });
    }
    let texture = UvTexture::new(read_png(&path(&desc.texture))?)?;
    if desc.keypoints.len() != NUM_KEYPOINTS {
        return Err(Error::Invalid(format!(
            "sample {} lists {} keypoints, expected {NUM_KEYPOINTS}",
            desc.id,
            desc.keypoints.len()
        )));
    }
    Ok(FixtureSample {
        id: desc.id.clone(),
        image,
        silhouette,
        semantic_mask,
        texture,
        camera: desc.camera,
        keypoints: desc.keypoints.clone(),
    })
}
