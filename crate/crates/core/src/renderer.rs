//! Soft silhouette rasterisation, bilinear texture sampling and a z-buffered
//! textured preview renderer.
//!
//! Image space is the normalised square `[-1, 1]²` with `y` pointing up; pixel
//! `(row i, column j)` of an `S × S` image has its centre at
//! `(-1 + (2j + 1) / S, 1 - (2i + 1) / S)`.

use serde::{Deserialize, Serialize};

use crate::camera::{project_backward, project_point, CameraPose, PoseGrad};
use crate::error::{Error, Result};
use crate::geometry::{MeshVertices, SymmetricTopology};
use crate::grid::Grid;

/// Per-pixel coverage terms with `δ·d²/σ` below `-CUTOFF` are dropped; their
/// contribution is below `e^-CUTOFF`.
const CUTOFF: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub resolution: usize,
    /// Softness of the signed squared-distance sigmoid, in normalised units².
    pub sigma: f64,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            sigma: 1e-4,
            near: -100.0,
            far: 100.0,
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl RenderConfig {
    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.resolution == 0 {
            return Err(Error::Invalid("resolution must be positive".into()));
        }
        Ok(())
    }
}

/// Occupancy probabilities in `[0, 1]`, row-major `size × size`.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteImage {
    pub size: usize,
    pub values: Vec<f64>,
}

impl SilhouetteImage {
    pub fn to_grid(&self) -> Grid {
        Grid {
            channels: 1,
            height: self.size,
            width: self.size,
            data: self.values.clone(),
        }
    }

    pub fn threshold(&self, level: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= level).collect()
    }
}

#[inline]
pub fn pixel_center(row: usize, col: usize, size: usize) -> [f64; 2] {
    let s = size as f64;
    [-1.0 + (2 * col + 1) as f64 / s, 1.0 - (2 * row + 1) as f64 / s]
}

/// Inclusive pixel index range whose centres fall within `[lo, hi]` on the
/// horizontal axis.
fn col_range(lo: f64, hi: f64, size: usize) -> Option<(usize, usize)> {
    let s = size as f64;
    let a = (((lo + 1.0) * s / 2.0) - 0.5).ceil().max(0.0);
    let b = (((hi + 1.0) * s / 2.0) - 0.5).floor().min(s - 1.0);
    (a <= b).then_some((a as usize, b as usize))
}

fn row_range(lo: f64, hi: f64, size: usize) -> Option<(usize, usize)> {
    // Rows grow downwards while y grows upwards.
    let (c0, c1) = col_range(-hi, -lo, size)?;
    Some((c0, c1))
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn edge_fn(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Squared distance from `p` to segment `ab` and the clamped segment
/// parameter of the closest point.
#[inline]
fn segment_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [a[0] + t * ab[0] - p[0], a[1] + t * ab[1] - p[1]];
    (c[0] * c[0] + c[1] * c[1], t)
}

/// Signed coverage geometry of one pixel against one projected triangle.
struct Coverage {
    inside: bool,
    dist2: f64,
    edge: usize,
    t: f64,
}

#[inline]
fn coverage(p: [f64; 2], tri: &[[f64; 2]; 3]) -> Coverage {
    let e0 = edge_fn(tri[0], tri[1], p);
    let e1 = edge_fn(tri[1], tri[2], p);
    let e2 = edge_fn(tri[2], tri[0], p);
    let area = edge_fn(tri[0], tri[1], tri[2]);
    let inside = area != 0.0 && ((e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0));
    let mut best = Coverage {
        inside,
        dist2: f64::INFINITY,
        edge: 0,
        t: 0.0,
    };
    for k in 0..3 {
        let (d2, t) = segment_dist2(p, tri[k], tri[(k + 1) % 3]);
        if d2 < best.dist2 {
            best.dist2 = d2;
            best.edge = k;
            best.t = t;
        }
    }
    best
}

/// A rendered soft silhouette with the per-pixel products needed for the
/// backward pass.
pub struct SoftSilhouette {
    pub image: SilhouetteImage,
    projected: Vec<[f64; 2]>,
    /// Product of the non-zero `(1 - D_j)` factors per pixel.
    prod: Vec<f64>,
    /// Number of factors `(1 - D_j)` that are exactly zero per pixel.
    zeros: Vec<u32>,
    sigma: f64,
}

/// Visits every (pixel, face) pair that can contribute, calling `f` with the
/// pixel index, face index, coverage and the pre-sigmoid logit.
fn for_each_contribution(
    projected: &[[f64; 2]],
    topo: &SymmetricTopology,
    size: usize,
    sigma: f64,
    mut f: impl FnMut(usize, usize, &[[f64; 2]; 3], &Coverage, f64),
) {
    let margin = (CUTOFF * sigma).sqrt();
    for (fi, face) in topo.faces().iter().enumerate() {
        let tri = [projected[face[0]], projected[face[1]], projected[face[2]]];
        let xmin = tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - margin;
        let xmax = tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + margin;
        let ymin = tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min) - margin;
        let ymax = tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max) + margin;
        let (Some((c0, c1)), Some((r0, r1))) = (col_range(xmin, xmax, size), row_range(ymin, ymax, size)) else {
            continue;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                let p = pixel_center(row, col, size);
                let cov = coverage(p, &tri);
                let z = if cov.inside { cov.dist2 } else { -cov.dist2 } / sigma;
                if z < -CUTOFF {
                    continue;
                }
                f(row * size + col, fi, &tri, &cov, z);
            }
        }
    }
}

impl SoftSilhouette {
    /// `silhouette(p) = 1 - Π_j (1 - sigmoid(δ_j(p) · d_j(p)² / σ))`.
    pub fn render(
        mesh: &MeshVertices,
        topo: &SymmetricTopology,
        pose: &CameraPose,
        cfg: &RenderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if mesh.len() != topo.n_total() {
            return Err(Error::dim("soft_silhouette mesh", topo.n_total(), mesh.len()));
        }
        let size = cfg.resolution;
        let projected: Vec<[f64; 2]> = mesh.coords.iter().map(|v| project_point(*v, pose)).collect();
        let mut prod = vec![1.0; size * size];
        let mut zeros = vec![0u32; size * size];
        for_each_contribution(&projected, topo, size, cfg.sigma, |px, _, _, _, z| {
            let q = sigmoid(-z);
            if q == 0.0 {
                zeros[px] += 1;
            } else {
                prod[px] *= q;
            }
        });
        let values = prod
            .iter()
            .zip(&zeros)
            .map(|(&p, &z)| if z > 0 { 1.0 } else { 1.0 - p })
            .collect();
        Ok(Self {
            image: SilhouetteImage { size, values },
            projected,
            prod,
            zeros,
            sigma: cfg.sigma,
        })
    }

    /// Gradient of a scalar loss with respect to the mesh vertices (and pose),
    /// given `dL/dsilhouette` per pixel.
    pub fn backward(
        &self,
        mesh: &MeshVertices,
        topo: &SymmetricTopology,
        pose: &CameraPose,
        grad: &[f64],
    ) -> (Vec<[f64; 3]>, PoseGrad) {
        let size = self.image.size;
        let mut g2 = vec![[0.0; 2]; self.projected.len()];
        for_each_contribution(&self.projected, topo, size, self.sigma, |px, fi, tri, cov, z| {
            let gp = grad[px];
            if gp == 0.0 {
                return;
            }
            let q = sigmoid(-z);
            let d = sigmoid(z);
            let others = if q == 0.0 {
                if self.zeros[px] == 1 {
                    self.prod[px]
                } else {
                    0.0
                }
            } else if self.zeros[px] == 0 {
                self.prod[px] / q
            } else {
                0.0
            };
            // d sil / d D_j = Π_{k≠j} (1 - D_k); dD/dz = D (1 - D).
            let dz = gp * others * d * q;
            if dz == 0.0 {
                return;
            }
            let sign = if cov.inside { 1.0 } else { -1.0 };
            let dd2 = dz * sign / self.sigma;
            let face = topo.faces()[fi];
            let (ia, ib) = (cov.edge, (cov.edge + 1) % 3);
            let (a, b) = (tri[ia], tri[ib]);
            let p = pixel_center(px / size, px % size, size);
            let c = [a[0] + cov.t * (b[0] - a[0]), a[1] + cov.t * (b[1] - a[1])];
            // d(|p - c|²)/dc = -2 (p - c); c = (1 - t) a + t b with t fixed at
            // its optimum.
            let gc = [-2.0 * (p[0] - c[0]) * dd2, -2.0 * (p[1] - c[1]) * dd2];
            for k in 0..2 {
                g2[face[ia]][k] += (1.0 - cov.t) * gc[k];
                g2[face[ib]][k] += cov.t * gc[k];
            }
        });
        project_backward(&mesh.coords, pose, &g2)
    }
}

pub fn soft_silhouette(
    mesh: &MeshVertices,
    topo: &SymmetricTopology,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> Result<SilhouetteImage> {
    Ok(SoftSilhouette::render(mesh, topo, pose, cfg)?.image)
}

/// Continuous pixel position of a coordinate in `[-1, 1]` along an axis of
/// `n` samples (the ends map to the first and last sample centres).
#[inline]
fn grid_pos(v: f64, n: usize) -> (usize, f64, f64) {
    if n == 1 {
        return (0, 0.0, 0.0);
    }
    let scale = (n - 1) as f64 / 2.0;
    let f = (v + 1.0) * scale;
    if f <= 0.0 {
        return (0, 0.0, 0.0);
    }
    if f >= (n - 1) as f64 {
        return (n - 2, 1.0, 0.0);
    }
    let i = (f.floor() as usize).min(n - 2);
    (i, f - i as f64, scale)
}

/// Bilinear interpolation with border clamping. `coords[k] = (x, y)` where `x`
/// spans the width and `y` the height; returns `n × C` values (row-major).
pub fn bilinear_sample(image: &Grid, coords: &[[f64; 2]]) -> Result<Vec<f64>> {
    let c = image.channels;
    let mut out = vec![0.0; coords.len() * c];
    for (k, xy) in coords.iter().enumerate() {
        if !xy[0].is_finite() || !xy[1].is_finite() {
            return Err(Error::Invalid(format!("non-finite sample coordinate {xy:?}")));
        }
        let (x0, fx, _) = grid_pos(xy[0], image.width);
        let (y0, fy, _) = grid_pos(xy[1], image.height);
        let x1 = (x0 + 1).min(image.width - 1);
        let y1 = (y0 + 1).min(image.height - 1);
        for ch in 0..c {
            let v00 = image.get(ch, y0, x0);
            let v01 = image.get(ch, y0, x1);
            let v10 = image.get(ch, y1, x0);
            let v11 = image.get(ch, y1, x1);
            out[k * c + ch] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    Ok(out)
}

/// Gradients of [`bilinear_sample`] with respect to the image and the
/// coordinates, given `grad` in the same `n × C` layout as its output.
pub fn bilinear_sample_backward(image: &Grid, coords: &[[f64; 2]], grad: &[f64]) -> (Grid, Vec<[f64; 2]>) {
    let c = image.channels;
    let mut gi = Grid::zeros(c, image.height, image.width);
    let mut gc = vec![[0.0; 2]; coords.len()];
    for (k, xy) in coords.iter().enumerate() {
        let (x0, fx, sx) = grid_pos(xy[0], image.width);
        let (y0, fy, sy) = grid_pos(xy[1], image.height);
        let x1 = (x0 + 1).min(image.width - 1);
        let y1 = (y0 + 1).min(image.height - 1);
        for ch in 0..c {
            let g = grad[k * c + ch];
            if g == 0.0 {
                continue;
            }
            let v00 = image.get(ch, y0, x0);
            let v01 = image.get(ch, y0, x1);
            let v10 = image.get(ch, y1, x0);
            let v11 = image.get(ch, y1, x1);
            let idx = |y: usize, x: usize| (ch * image.height + y) * image.width + x;
            gi.data[idx(y0, x0)] += g * (1.0 - fy) * (1.0 - fx);
            gi.data[idx(y0, x1)] += g * (1.0 - fy) * fx;
            gi.data[idx(y1, x0)] += g * fy * (1.0 - fx);
            gi.data[idx(y1, x1)] += g * fy * fx;
            gc[k][0] += g * sx * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
            gc[k][1] += g * sy * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
        }
    }
    (gi, gc)
}

/// Result of the z-buffered textured renderer.
pub struct TexturedRender {
    pub image: Grid,
    pub coverage: Vec<bool>,
    /// Covered pixel index and the texture coordinate it sampled.
    samples: Vec<(usize, [f64; 2])>,
}

impl TexturedRender {
    /// Gradient with respect to the texture given `dL/dimage`.
    pub fn backward_texture(&self, texture: &Grid, grad: &Grid) -> Grid {
        let n = grad.plane_len();
        let coords: Vec<[f64; 2]> = self.samples.iter().map(|s| s.1).collect();
        let mut g = Vec::with_capacity(coords.len() * 3);
        for (px, _) in &self.samples {
            for c in 0..3 {
                g.push(grad.data[c * n + px]);
            }
        }
        bilinear_sample_backward(texture, &coords, &g).0
    }

    pub fn coverage_grid(&self, size: usize) -> Grid {
        Grid {
            channels: 1,
            height: size,
            width: size,
            data: self.coverage.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Nearest-depth textured rendering; `uv` holds per-vertex texture
/// coordinates in `[0, 1]²` (u across the width, v down the height). The `u`
/// axis wraps around.
pub fn render_textured(
    mesh: &MeshVertices,
    topo: &SymmetricTopology,
    pose: &CameraPose,
    texture: &Grid,
    uv: &[[f64; 2]],
    cfg: &RenderConfig,
) -> Result<TexturedRender> {
    cfg.validate()?;
    if mesh.len() != topo.n_total() {
        return Err(Error::dim("render_textured mesh", topo.n_total(), mesh.len()));
    }
    if uv.len() != mesh.len() {
        return Err(Error::dim("render_textured uv", mesh.len(), uv.len()));
    }
    if texture.channels != 3 {
        return Err(Error::dim("render_textured texture channels", 3, texture.channels));
    }
    let size = cfg.resolution;
    let projected: Vec<[f64; 2]> = mesh.coords.iter().map(|v| project_point(*v, pose)).collect();
    let depth: Vec<f64> = mesh.coords.iter().map(|v| pose.depth(*v)).collect();
    let mut zbuf = vec![f64::INFINITY; size * size];
    let mut hit: Vec<Option<(usize, [f64; 3])>> = vec![None; size * size];
    for (fi, face) in topo.faces().iter().enumerate() {
        let tri = [projected[face[0]], projected[face[1]], projected[face[2]]];
        let area = edge_fn(tri[0], tri[1], tri[2]);
        if area == 0.0 {
            continue;
        }
        let xmin = tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let xmax = tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let ymin = tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let ymax = tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let (Some((c0, c1)), Some((r0, r1))) = (col_range(xmin, xmax, size), row_range(ymin, ymax, size)) else {
            continue;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                let p = pixel_center(row, col, size);
                let w0 = edge_fn(tri[1], tri[2], p) / area;
                let w1 = edge_fn(tri[2], tri[0], p) / area;
                let w2 = edge_fn(tri[0], tri[1], p) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * depth[face[0]] + w1 * depth[face[1]] + w2 * depth[face[2]];
                if z < cfg.near || z > cfg.far {
                    continue;
                }
                let px = row * size + col;
                if z < zbuf[px] {
                    zbuf[px] = z;
                    hit[px] = Some((fi, [w0, w1, w2]));
                }
            }
        }
    }

    let mut image = Grid::zeros(3, size, size);
    for c in 0..3 {
        image.plane_mut(c).fill(cfg.background[c]);
    }
    let mut coverage = vec![false; size * size];
    let mut samples = Vec::new();
    for (px, h) in hit.iter().enumerate() {
        let Some((fi, w)) = h else { continue };
        let face = topo.faces()[*fi];
        let mut us = [uv[face[0]][0], uv[face[1]][0], uv[face[2]][0]];
        let umin = us.iter().copied().fold(f64::INFINITY, f64::min);
        let umax = us.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if umax - umin > 0.5 {
            for u in &mut us {
                if *u < 0.5 {
                    *u += 1.0;
                }
            }
        }
        let mut u = w[0] * us[0] + w[1] * us[1] + w[2] * us[2];
        if u > 1.0 {
            u -= 1.0;
        }
        let v = w[0] * uv[face[0]][1] + w[1] * uv[face[1]][1] + w[2] * uv[face[2]][1];
        let coord = [2.0 * u - 1.0, 2.0 * v - 1.0];
        let color = bilinear_sample(texture, &[coord])?;
        for c in 0..3 {
            image.data[c * size * size + px] = color[c];
        }
        coverage[px] = true;
        samples.push((px, coord));
    }
    Ok(TexturedRender {
        image,
        coverage,
        samples,
    })
}
