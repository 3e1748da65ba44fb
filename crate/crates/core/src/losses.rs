//! Training objectives and their aggregates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Keypoints3D;
use crate::grid::Grid;
use crate::texture_style::{moments, FeatureMap, SemanticUvMask, TextureEncoder, SEMANTIC_PARTS};

fn check_len(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(what, a, b));
    }
    Ok(())
}

fn iou_terms(m: &[f64], mbar: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (a, b) in m.iter().zip(mbar) {
        inter += a * b;
        union += a + b - a * b;
    }
    (inter, union)
}

/// `1 − ‖M ⊙ M̄‖₁ / ‖M + M̄ − M ⊙ M̄‖₁`. Two empty masks give 0.
pub fn mask_loss(m: &[f64], mbar: &[f64]) -> Result<f64> {
    check_len("mask loss inputs", m.len(), mbar.len())?;
    let (inter, union) = iou_terms(m, mbar);
    if union <= 0.0 {
        log::warn!("mask loss on two empty masks; returning 0");
        return Ok(0.0);
    }
    Ok(1.0 - inter / union)
}

/// Gradient of [`mask_loss`] with respect to `mbar`.
pub fn mask_loss_grad(m: &[f64], mbar: &[f64]) -> Result<Vec<f64>> {
    check_len("mask loss inputs", m.len(), mbar.len())?;
    let (inter, union) = iou_terms(m, mbar);
    if union <= 0.0 {
        return Ok(vec![0.0; m.len()]);
    }
    let u2 = union * union;
    Ok(m.iter().map(|&a| -(a * union - inter * (1.0 - a)) / u2).collect())
}

/// `L_m(M_S, M̄_S) + L_m(M_T, M̄_T)`.
pub fn mask_loss_pair(ms: &[f64], ms_bar: &[f64], mt: &[f64], mt_bar: &[f64]) -> Result<f64> {
    Ok(mask_loss(ms, ms_bar)? + mask_loss(mt, mt_bar)?)
}

/// Euclidean norm of the difference between the encoder features of two
/// images.
pub fn perceptual_loss(image: &Grid, rendered: &Grid, encoder: &TextureEncoder) -> Result<f64> {
    if image.shape() != rendered.shape() {
        return Err(Error::dim(
            "perceptual images",
            format!("{:?}", image.shape()),
            format!("{:?}", rendered.shape()),
        ));
    }
    let a = encoder.encode(image)?;
    let b = encoder.encode(rendered)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

pub fn perceptual_loss_pair(s: &Grid, s_bar: &Grid, t: &Grid, t_bar: &Grid, encoder: &TextureEncoder) -> Result<f64> {
    Ok(perceptual_loss(s, s_bar, encoder)? + perceptual_loss(t, t_bar, encoder)?)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_keypoints(p: &Keypoints3D, ps: &Keypoints3D, pt: &Keypoints3D) -> Result<()> {
    if p.is_empty() || p.len() != ps.len() || p.len() != pt.len() {
        return Err(Error::dim(
            "keypoint sets",
            format!("{} non-empty", p.len()),
            format!("{} and {}", ps.len(), pt.len()),
        ));
    }
    Ok(())
}

/// `(1/2N) Σ (‖p − p_S‖ + λ ‖p − p_T‖)`.
pub fn keypoint_loss(p: &Keypoints3D, ps: &Keypoints3D, pt: &Keypoints3D, lambda: f64) -> Result<f64> {
    check_keypoints(p, ps, pt)?;
    let n = p.len() as f64;
    let s: f64 = (0..p.len())
        .map(|i| dist(p.points[i], ps.points[i]) + lambda * dist(p.points[i], pt.points[i]))
        .sum();
    Ok(s / (2.0 * n))
}

/// Gradient of [`keypoint_loss`] with respect to `p`. Coincident points
/// contribute zero.
pub fn keypoint_loss_grad(p: &Keypoints3D, ps: &Keypoints3D, pt: &Keypoints3D, lambda: f64) -> Result<Vec<[f64; 3]>> {
    Ok(keypoint_loss_grads(p, ps, pt, lambda)?.0)
}

/// Gradients of [`keypoint_loss`] with respect to `p`, `p_S` and `p_T`.
pub fn keypoint_loss_grads(
    p: &Keypoints3D,
    ps: &Keypoints3D,
    pt: &Keypoints3D,
    lambda: f64,
) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    check_keypoints(p, ps, pt)?;
    let n = p.len();
    let scale = 1.0 / (2.0 * n as f64);
    let mut gp = vec![[0.0; 3]; n];
    let mut gs = vec![[0.0; 3]; n];
    let mut gt = vec![[0.0; 3]; n];
    for i in 0..n {
        for (q, w, gq) in [(ps.points[i], 1.0, &mut gs[i]), (pt.points[i], lambda, &mut gt[i])] {
            let d = dist(p.points[i], q);
            if d > 0.0 {
                for c in 0..3 {
                    let g = scale * w * (p.points[i][c] - q[c]) / d;
                    gp[i][c] += g;
                    gq[c] -= g;
                }
            }
        }
    }
    Ok((gp, gs, gt))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mask: f64,
    pub perceptual: f64,
    pub keypoint: f64,
    pub laplacian: f64,
    pub edge: f64,
    pub style: f64,
    pub content: f64,
    /// Weight of the target term inside the keypoint loss.
    pub keypoint_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mask: 1.0,
            perceptual: 1.0,
            keypoint: 1.0,
            laplacian: 0.1,
            edge: 0.1,
            style: 1.0,
            content: 1.0,
            keypoint_lambda: 1.0,
        }
    }
}

/// Unweighted loss components plus their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mask: f64,
    pub perceptual: f64,
    pub keypoint: f64,
    pub laplacian: f64,
    pub edge: f64,
    pub style: f64,
    pub content: f64,
    pub total: f64,
}

impl LossReport {
    pub fn components(&self) -> [f64; 7] {
        [
            self.mask,
            self.perceptual,
            self.keypoint,
            self.laplacian,
            self.edge,
            self.style,
            self.content,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }

    /// One JSON-lines log record.
    pub fn log_line(&self, iter: u64) -> String {
        let mut v = serde_json::to_value(self).expect("report serialises");
        v.as_object_mut()
            .expect("object")
            .insert("iter".into(), serde_json::Value::from(iter));
        v.to_string()
    }
}

/// `mask + perceptual + keypoint + w_lap · laplacian + w_edge · edge`, with
/// every term weighted by `weights`.
pub fn shape_total(
    mask: f64,
    perceptual: f64,
    keypoint: f64,
    laplacian: f64,
    edge: f64,
    weights: &LossWeights,
) -> LossReport {
    let total = weights.mask * mask
        + weights.perceptual * perceptual
        + weights.keypoint * keypoint
        + weights.laplacian * laplacian
        + weights.edge * edge;
    LossReport {
        mask,
        perceptual,
        keypoint,
        laplacian,
        edge,
        total,
        ..Default::default()
    }
}

pub fn texture_total(style: f64, content: f64, weights: &LossWeights) -> LossReport {
    LossReport {
        style,
        content,
        total: weights.style * style + weights.content * content,
        ..Default::default()
    }
}

/// Mean squared difference between two feature maps and its gradient with
/// respect to `features`.
pub fn content_loss(features: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap)> {
    if features.shape() != target.shape() {
        return Err(Error::dim(
            "content features",
            format!("{:?}", target.shape()),
            format!("{:?}", features.shape()),
        ));
    }
    let n = features.data.len() as f64;
    let mut grad = features.clone();
    let mut loss = 0.0;
    for (g, (a, b)) in grad.data.iter_mut().zip(features.data.iter().zip(&target.data)) {
        let d = a - b;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Per-part target statistics `(mu, sigma)` for parts 1–4; `None` skips a part.
pub type PartStats = [Option<(Vec<f64>, Vec<f64>)>; 4];

/// Masked moments of every semantic part, `None` for empty parts.
pub fn part_stats(v: &FeatureMap, mask: &SemanticUvMask, epsilon: f64) -> PartStats {
    std::array::from_fn(|i| {
        let cells = mask.cells(SEMANTIC_PARTS[i]);
        if cells.is_empty() {
            return None;
        }
        let mut mu = Vec::with_capacity(v.channels);
        let mut sigma = Vec::with_capacity(v.channels);
        for c in 0..v.channels {
            let vals: Vec<f64> = cells.iter().map(|&k| v.plane(c)[k]).collect();
            let (m, s) = moments(&vals, epsilon);
            mu.push(m);
            sigma.push(s);
        }
        Some((mu, sigma))
    })
}

/// Mean over used parts and channels of `(μ − μ*)² + (σ − σ*)²`, measured
/// on the cells of `mask`, and its gradient with respect to `features`.
pub fn style_loss(
    features: &FeatureMap,
    mask: &SemanticUvMask,
    target: &PartStats,
    epsilon: f64,
) -> Result<(f64, FeatureMap)> {
    if mask.labels.len() != features.plane_len() {
        return Err(Error::dim("style mask", features.plane_len(), mask.labels.len()));
    }
    let c_count = features.channels;
    let used: Vec<usize> = (0..4)
        .filter(|&i| target[i].is_some() && !mask.cells(SEMANTIC_PARTS[i]).is_empty())
        .collect();
    let mut grad = Grid::zeros(features.channels, features.height, features.width);
    if used.is_empty() {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / (used.len() * c_count) as f64;
    let mut loss = 0.0;
    for &i in &used {
        let (tmu, tsigma) = target[i].as_ref().expect("filtered");
        if tmu.len() != c_count || tsigma.len() != c_count {
            return Err(Error::dim("style statistics", c_count, tmu.len()));
        }
        let cells = mask.cells(SEMANTIC_PARTS[i]);
        let n = cells.len() as f64;
        for c in 0..c_count {
            let vals: Vec<f64> = cells.iter().map(|&k| features.plane(c)[k]).collect();
            let (mu, sigma) = moments(&vals, epsilon);
            let dm = mu - tmu[c];
            let ds = sigma - tsigma[c];
            loss += norm * (dm * dm + ds * ds);
            let plane = grad.plane_mut(c);
            for (&k, &x) in cells.iter().zip(&vals) {
                plane[k] += norm * (2.0 * dm / n + 2.0 * ds * (x - mu) / (n * sigma));
            }
        }
    }
    Ok((loss, grad))
}
