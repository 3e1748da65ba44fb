//! Reference computations and property checks shared by the integration
//! tests and the acceptance runner. The references are written directly
//! from the defining formulas with scalar loops and do not call into the
//! code they check.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use creative_morph::camera::{quat_from_axis_angle, CameraPose};
use creative_morph::geometry::{
    build_template_with_uv, edge_energy, edge_energy_grad, expand_symmetric, expand_symmetric_backward,
    laplacian_energy, laplacian_energy_grad, project_keypoints, MeshVertices, SymmetricTopology, PLANE_AXIS,
};
use creative_morph::grid::Grid;
use creative_morph::losses::{keypoint_loss, keypoint_loss_grads, mask_loss, mask_loss_grad};
use creative_morph::nn::{BatchNorm1d, Linear, Mode};
use creative_morph::renderer::{bilinear_sample, bilinear_sample_backward, RenderConfig, SoftSilhouette};
use creative_morph::shape_gen::{
    apply_scale, drgnet_forward, gate_unit, mlp_head, DrgNet, GateUnit, MlpHead, ShapeConfig, ShapeFeature, ShapeModel,
    TransferControls,
};
use creative_morph::texture_style::{ehm_sort_match, sadain, sefdm, slst, SemanticUvMask, SlstMode, StylizerConfig};

pub const INSTANCES: usize = 25;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn central_diff(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let keep = x[i];
            x[i] = keep + h;
            let up = f(x);
            x[i] = keep - h;
            let down = f(x);
            x[i] = keep;
            (up - down) / (2.0 * h)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scalar references

fn ref_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn ref_relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

fn ref_linear(l: &Linear, x: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(l.outputs);
    for o in 0..l.outputs {
        let mut s = 0.0;
        for i in 0..l.inputs {
            s += l.weight.value[o * l.inputs + i] * x[i];
        }
        if let Some(b) = &l.bias {
            s += b.value[o];
        }
        y.push(s);
    }
    y
}

/// Batch normalisation of a single row: its own statistics in training mode
/// (a one-row batch has zero variance), the stored ones otherwise.
fn ref_batchnorm_row(bn: &BatchNorm1d, x: &[f64], mode: Mode) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let (m, v) = match mode {
                Mode::Training => (x[j], 0.0),
                Mode::Inference => (bn.running_mean.value[j], bn.running_var.value[j]),
            };
            bn.gamma.value[j] * (x[j] - m) / (v + bn.eps).sqrt() + bn.beta.value[j]
        })
        .collect()
}

/// `g = σ(W_g [F_S, F_T] + b)`, `F' = F + ReLU(BN(W (g ⊙ F)))` per branch.
fn ref_gate(unit: &GateUnit, fs: &[f64], ft: &[f64], mode: Mode) -> (Vec<f64>, Vec<f64>) {
    let d = fs.len();
    let mut cat = fs.to_vec();
    cat.extend_from_slice(ft);
    let g: Vec<f64> = ref_linear(&unit.gate, &cat).into_iter().map(ref_sigmoid).collect();
    let hs: Vec<f64> = (0..d).map(|i| g[i] * fs[i]).collect();
    let ht: Vec<f64> = (0..d).map(|i| g[i] * ft[i]).collect();
    let rs = ref_batchnorm_row(&unit.bn_s, &ref_linear(&unit.w_s, &hs), mode);
    let rt = ref_batchnorm_row(&unit.bn_t, &ref_linear(&unit.w_t, &ht), mode);
    (
        (0..d).map(|i| fs[i] + ref_relu(rs[i])).collect(),
        (0..d).map(|i| ft[i] + ref_relu(rt[i])).collect(),
    )
}

fn randomize_unit(unit: &mut GateUnit, r: &mut ChaCha8Rng) {
    let d = unit.dim();
    if let Some(b) = &mut unit.gate.bias {
        b.value = uniform(r, d, -0.5, 0.5);
    }
    for bn in [&mut unit.bn_s, &mut unit.bn_t] {
        bn.gamma.value = uniform(r, d, 0.5, 1.5);
        bn.beta.value = uniform(r, d, -0.5, 0.5);
        bn.running_mean.value = uniform(r, d, -0.5, 0.5);
        bn.running_var.value = uniform(r, d, 0.2, 2.0);
    }
}

fn random_mode(r: &mut ChaCha8Rng) -> Mode {
    if r.random_bool(0.5) {
        Mode::Training
    } else {
        Mode::Inference
    }
}

pub fn oracle_gate_unit() -> f64 {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let d = r.random_range(1..=4);
        let mut unit = GateUnit::new(d, &mut r);
        randomize_unit(&mut unit, &mut r);
        let fs = uniform(&mut r, d, -1.0, 1.0);
        let ft = uniform(&mut r, d, -1.0, 1.0);
        let mode = random_mode(&mut r);
        let (s, t) = gate_unit(
            &ShapeFeature::new(fs.clone()).unwrap(),
            &ShapeFeature::new(ft.clone()).unwrap(),
            &unit,
            mode,
        )
        .unwrap();
        let (es, et) = ref_gate(&unit, &fs, &ft, mode);
        worst = worst.max(max_abs(&s.values, &es)).max(max_abs(&t.values, &et));
    }
    worst
}

pub fn oracle_drgnet_forward() -> f64 {
    let mut r = rng(102);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let d = r.random_range(1..=4);
        let layers = r.random_range(1..=4);
        let mut net = DrgNet::new(d, layers, &mut r);
        for u in &mut net.units {
            randomize_unit(u, &mut r);
        }
        let fs = uniform(&mut r, d, -1.0, 1.0);
        let ft = uniform(&mut r, d, -1.0, 1.0);
        let mode = random_mode(&mut r);
        let (s, t) = drgnet_forward(
            &ShapeFeature::new(fs.clone()).unwrap(),
            &ShapeFeature::new(ft.clone()).unwrap(),
            &net,
            mode,
        )
        .unwrap();
        let (mut es, mut et) = (fs, ft);
        for u in &net.units {
            (es, et) = ref_gate(u, &es, &et, mode);
        }
        worst = worst.max(max_abs(&s.values, &es)).max(max_abs(&t.values, &et));
    }
    worst
}

pub fn oracle_apply_scale() -> f64 {
    let mut r = rng(103);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let d = r.random_range(1..=4);
        let fs = uniform(&mut r, d, -2.0, 2.0);
        let ft = uniform(&mut r, d, -2.0, 2.0);
        let (controls, a) = if i % 5 == 0 {
            (TransferControls::training(), 0.0)
        } else {
            let a = r.random_range(-1.0..=1.0);
            (TransferControls::inference(a).unwrap(), a)
        };
        let (s, t) = apply_scale(
            &ShapeFeature::new(fs.clone()).unwrap(),
            &ShapeFeature::new(ft.clone()).unwrap(),
            &controls,
        )
        .unwrap();
        let es: Vec<f64> = fs.iter().map(|v| (1.0 - a) * v).collect();
        let et: Vec<f64> = ft.iter().map(|v| (1.0 + a) * v).collect();
        worst = worst.max(max_abs(&s.values, &es)).max(max_abs(&t.values, &et));
    }
    worst
}

pub fn oracle_mlp_head() -> f64 {
    let mut r = rng(104);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let d = r.random_range(1..=4);
        let n_left = r.random_range(1..=3);
        let head = MlpHead::new(d, n_left, 0.5, &mut r);
        let fs = uniform(&mut r, d, -1.0, 1.0);
        let ft = uniform(&mut r, d, -1.0, 1.0);
        let o = mlp_head(
            &ShapeFeature::new(fs.clone()).unwrap(),
            &ShapeFeature::new(ft.clone()).unwrap(),
            &head,
        )
        .unwrap();
        let mut cat = fs;
        cat.extend(ft);
        let h1: Vec<f64> = ref_linear(&head.f1, &cat).into_iter().map(ref_relu).collect();
        let h2: Vec<f64> = ref_linear(&head.f2, &h1).into_iter().map(ref_relu).collect();
        let expected = ref_linear(&head.out, &h2);
        assert_eq!(expected.len(), 3 * n_left);
        worst = worst.max(max_abs(&o, &expected));
    }
    worst
}

// ---------------------------------------------------------------------------
// Stylizer references

/// Piecewise-linear resampling of `values` onto `n` evenly spaced positions.
fn ref_resample(values: &[f64], n: usize) -> Vec<f64> {
    let m = values.len();
    if m == 1 || n == 1 {
        return vec![values[0]; n];
    }
    (0..n)
        .map(|k| {
            let t = k as f64 * (m - 1) as f64 / (n - 1) as f64;
            let lo = t.floor() as usize;
            let hi = (t.ceil() as usize).min(m - 1);
            values[lo] + (t - lo as f64) * (values[hi] - values[lo])
        })
        .collect()
}

fn ref_mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
}

fn ref_adain(content: &[f64], style: &[f64], eps: f64) -> Vec<f64> {
    let (mc, vc) = ref_mean_var(content);
    let (ms, vs) = ref_mean_var(style);
    content
        .iter()
        .map(|x| (vs + eps).sqrt() * (x - mc) / (vc + eps).sqrt() + ms)
        .collect()
}

/// Whitening-colouring on a single channel.
fn ref_wct_1d(content: &[f64], style: &[f64], eps: f64) -> Vec<f64> {
    let (mc, vc) = ref_mean_var(content);
    let (ms, vs) = ref_mean_var(style);
    content
        .iter()
        .map(|x| vs.max(eps).sqrt() / vc.max(eps).sqrt() * (x - mc) + ms)
        .collect()
}

/// `out[k]` is the target value whose rank equals the rank of `src[k]`,
/// ties broken by position.
pub fn ref_ehm(src: &[f64], tgt: &[f64]) -> Vec<f64> {
    let mut sorted = tgt.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.len() != src.len() {
        sorted = ref_resample(&sorted, src.len());
    }
    (0..src.len())
        .map(|k| {
            let rank = (0..src.len())
                .filter(|&j| src[j] < src[k] || (src[j] == src[k] && j < k))
                .count();
            sorted[rank]
        })
        .collect()
}

type PartFn<'a> = &'a dyn Fn(&[Vec<f64>], &[Vec<f64>]) -> Option<Vec<Vec<f64>>>;

fn ref_stylize(vs: &Grid, vt: &Grid, ms: &[u8], mt: &[u8], gates: [bool; 4], f: PartFn) -> Grid {
    let mut out = vs.clone();
    let n = vs.plane_len();
    for (gi, part) in (1u8..=4).enumerate() {
        let cs: Vec<usize> = (0..n).filter(|&i| ms[i] == part).collect();
        let ct: Vec<usize> = (0..n).filter(|&i| mt[i] == part).collect();
        let (content, ccells, style, scells) = if gates[gi] {
            (vt, &ct, vs, &cs)
        } else {
            (vs, &cs, vt, &ct)
        };
        if cs.is_empty() || ccells.is_empty() || scells.is_empty() {
            continue;
        }
        let xc: Vec<Vec<f64>> = (0..vs.channels)
            .map(|c| ccells.iter().map(|&i| content.data[c * n + i]).collect())
            .collect();
        let xs: Vec<Vec<f64>> = (0..vs.channels)
            .map(|c| scells.iter().map(|&i| style.data[c * n + i]).collect())
            .collect();
        let Some(y) = f(&xc, &xs) else { continue };
        for (c, row) in y.iter().enumerate() {
            let row = if row.len() == cs.len() {
                row.clone()
            } else {
                ref_resample(row, cs.len())
            };
            for (&cell, v) in cs.iter().zip(row) {
                out.data[c * n + cell] = v;
            }
        }
    }
    out
}

struct StyleCase {
    vs: Grid,
    vt: Grid,
    ms: SemanticUvMask,
    mt: SemanticUvMask,
    cfg: StylizerConfig,
}

fn random_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| r.random_range(1..=5)).collect()
}

fn style_case(r: &mut ChaCha8Rng, channels: usize) -> StyleCase {
    let h = r.random_range(2..=4);
    let w = r.random_range(2..=4);
    let n = h * w;
    let mut vs = Grid::zeros(channels, h, w);
    let mut vt = Grid::zeros(channels, h, w);
    vs.data = uniform(r, channels * n, -1.0, 1.0);
    vt.data = uniform(r, channels * n, -2.0, 3.0);
    let ms = SemanticUvMask::new(h, w, random_labels(r, n)).unwrap();
    let mt = SemanticUvMask::new(h, w, random_labels(r, n)).unwrap();
    let cfg = StylizerConfig {
        switch_gates: std::array::from_fn(|_| r.random_bool(0.5)),
        ..StylizerConfig::default()
    };
    StyleCase { vs, vt, ms, mt, cfg }
}

pub fn oracle_sadain() -> f64 {
    let mut r = rng(105);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let c = r.random_range(1..=4);
        let k = style_case(&mut r, c);
        let eps = k.cfg.epsilon;
        let (out, _) = sadain(&k.vs, &k.vt, &k.ms, &k.mt, &k.cfg).unwrap();
        let f = |xc: &[Vec<f64>], xs: &[Vec<f64>]| Some(xc.iter().zip(xs).map(|(a, b)| ref_adain(a, b, eps)).collect());
        let expected = ref_stylize(&k.vs, &k.vt, &k.ms.labels, &k.mt.labels, k.cfg.switch_gates, &f);
        worst = worst.max(max_abs(&out.data, &expected.data));
    }
    worst
}

pub fn oracle_slst_wct_c1() -> f64 {
    let mut r = rng(106);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let mut k = style_case(&mut r, 1);
        k.cfg.slst_mode = SlstMode::Wct;
        let eps = k.cfg.epsilon;
        let (out, _) = slst(&k.vs, &k.vt, &k.ms, &k.mt, &k.cfg).unwrap();
        let f = |xc: &[Vec<f64>], xs: &[Vec<f64>]| {
            (xc[0].len() >= 2 && xs[0].len() >= 2).then(|| vec![ref_wct_1d(&xc[0], &xs[0], eps)])
        };
        let expected = ref_stylize(&k.vs, &k.vt, &k.ms.labels, &k.mt.labels, k.cfg.switch_gates, &f);
        worst = worst.max(max_abs(&out.data, &expected.data));
    }
    worst
}

pub fn oracle_ehm_sort_match() -> f64 {
    let mut r = rng(107);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let n = r.random_range(1..=16);
        let m = if i % 2 == 0 { n } else { r.random_range(1..=16) };
        // Rounded values produce ties.
        let src: Vec<f64> = (0..n)
            .map(|_| (r.random_range(-2.0..2.0f64) * 2.0).round() / 2.0)
            .collect();
        let tgt = uniform(&mut r, m, -5.0, 5.0);
        worst = worst.max(max_abs(&ehm_sort_match(&src, &tgt).unwrap(), &ref_ehm(&src, &tgt)));
    }
    worst
}

pub fn oracle_sefdm() -> f64 {
    let mut r = rng(108);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let c = r.random_range(1..=4);
        let k = style_case(&mut r, c);
        let (out, _) = sefdm(&k.vs, &k.vt, &k.ms, &k.mt, &k.cfg).unwrap();
        let f = |xc: &[Vec<f64>], xs: &[Vec<f64>]| Some(xc.iter().zip(xs).map(|(a, b)| ref_ehm(a, b)).collect());
        let expected = ref_stylize(&k.vs, &k.vt, &k.ms.labels, &k.mt.labels, k.cfg.switch_gates, &f);
        worst = worst.max(max_abs(&out.data, &expected.data));
    }
    worst
}

pub fn oracle_mask_loss() -> f64 {
    let mut r = rng(109);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let n = r.random_range(1..=16);
        let m = uniform(&mut r, n, 0.0, 1.0);
        let mbar = uniform(&mut r, n, 0.0, 1.0);
        let (mut inter, mut union) = (0.0, 0.0);
        for i in 0..n {
            inter += m[i] * mbar[i];
            union += m[i] + mbar[i] - m[i] * mbar[i];
        }
        worst = worst.max((mask_loss(&m, &mbar).unwrap() - (1.0 - inter / union)).abs());
    }
    worst
}

pub fn oracle_keypoint_loss() -> f64 {
    let mut r = rng(110);
    let mut worst: f64 = 0.0;
    let points = |r: &mut ChaCha8Rng, n: usize| -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0)))
            .collect()
    };
    for _ in 0..INSTANCES {
        let n = r.random_range(1..=15);
        let lambda = r.random_range(0.0..2.0);
        let (p, ps, pt) = (points(&mut r, n), points(&mut r, n), points(&mut r, n));
        let got = keypoint_loss(
            &project_keypoints(&p).unwrap(),
            &project_keypoints(&ps).unwrap(),
            &project_keypoints(&pt).unwrap(),
            lambda,
        )
        .unwrap();
        // Projection onto the plane drops the first coordinate.
        let d = |a: [f64; 3], b: [f64; 3]| ((a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        let mut sum = 0.0;
        for i in 0..n {
            sum += d(p[i], ps[i]) + lambda * d(p[i], pt[i]);
        }
        worst = worst.max((got - sum / (2.0 * n as f64)).abs());
    }
    worst
}

pub fn all_oracles() -> Vec<(&'static str, f64)> {
    vec![
        ("gate_unit", oracle_gate_unit()),
        ("drgnet_forward", oracle_drgnet_forward()),
        ("apply_scale", oracle_apply_scale()),
        ("mlp_head", oracle_mlp_head()),
        ("sadain", oracle_sadain()),
        ("slst_wct_c1", oracle_slst_wct_c1()),
        ("ehm_sort_match", oracle_ehm_sort_match()),
        ("sefdm", oracle_sefdm()),
        ("mask_loss", oracle_mask_loss()),
        ("keypoint_loss", oracle_keypoint_loss()),
    ]
}

// ---------------------------------------------------------------------------
// Gradient checks

fn two_triangles() -> SymmetricTopology {
    SymmetricTopology::from_parts(vec![true; 6], vec![], vec![[0, 1, 2], [3, 4, 5]]).unwrap()
}

fn to_mesh(x: &[f64]) -> MeshVertices {
    MeshVertices::new(x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn flat(mesh: &MeshVertices) -> Vec<f64> {
    mesh.coords.iter().flatten().copied().collect()
}

/// Vertex and camera scale/translation gradients of a weighted pixel sum of
/// the soft silhouette, 16×16, two overlapping triangles.
pub fn grad_soft_silhouette() -> f64 {
    let mut r = rng(201);
    let topo = two_triangles();
    let cfg = RenderConfig::default().with_resolution(16).with_sigma(0.01);
    let q = quat_from_axis_angle([0.3, 1.0, 0.2], 0.4);
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let base = [
            [-0.6, -0.5, 0.1],
            [0.5, -0.4, -0.2],
            [-0.1, 0.6, 0.0],
            [-0.2, -0.1, 0.3],
            [0.7, 0.2, 0.1],
            [0.3, 0.7, -0.1],
        ];
        let mut x: Vec<f64> = base.iter().flatten().map(|v| v + r.random_range(-0.08..0.08)).collect();
        let w = uniform(&mut r, 256, 0.5, 1.5);
        let pose_of = |p: &[f64]| CameraPose::new(p[0], [p[1], p[2]], q).unwrap();
        let mut pose_params = vec![0.9, 0.05, -0.02];
        let loss = |x: &[f64], p: &[f64]| {
            let s = SoftSilhouette::render(&to_mesh(x), &topo, &pose_of(p), &cfg).unwrap();
            s.image.values.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let pose = pose_of(&pose_params);
        let mesh = to_mesh(&x);
        let sil = SoftSilhouette::render(&mesh, &topo, &pose, &cfg).unwrap();
        let (gv, gp) = sil.backward(&mesh, &topo, &pose, &w);
        let mut analytic: Vec<f64> = gv.iter().flatten().copied().collect();
        analytic.extend_from_slice(&gp.0[..3]);
        let p0 = pose_params.clone();
        let mut numeric = central_diff(&mut x, 1e-6, |x| loss(x, &p0));
        let x0 = x.clone();
        numeric.extend(central_diff(&mut pose_params, 1e-6, |p| loss(&x0, p)));
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn grad_bilinear_sample() -> f64 {
    let mut r = rng(202);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (c, h, w) = (3, 5, 7);
        let mut image = Grid::zeros(c, h, w);
        image.data = uniform(&mut r, c * h * w, 0.0, 1.0);
        let coords: Vec<[f64; 2]> = (0..20)
            .map(|_| [r.random_range(-0.95..0.95), r.random_range(-0.95..0.95)])
            .collect();
        let g = uniform(&mut r, coords.len() * c, -1.0, 1.0);
        let dot = |v: Vec<f64>| v.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let (gi, gc) = bilinear_sample_backward(&image, &coords, &g);
        let mut analytic = gi.data.clone();
        analytic.extend(gc.iter().flatten());
        let mut img = image.data.clone();
        let mut numeric = central_diff(&mut img, 1e-6, |d| {
            let im = Grid::from_vec(c, h, w, d.to_vec()).unwrap();
            dot(bilinear_sample(&im, &coords).unwrap())
        });
        let mut xy: Vec<f64> = coords.iter().flatten().copied().collect();
        numeric.extend(central_diff(&mut xy, 1e-7, |xy| {
            let cs: Vec<[f64; 2]> = xy.chunks(2).map(|p| [p[0], p[1]]).collect();
            dot(bilinear_sample(&image, &cs).unwrap())
        }));
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn grad_mask_loss() -> f64 {
    let mut r = rng(203);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let m: Vec<f64> = (0..64)
            .map(|_| {
                if r.random_bool(0.4) {
                    1.0
                } else {
                    r.random_range(0.0..1.0)
                }
            })
            .collect();
        let mut mbar = uniform(&mut r, 64, 0.05, 0.95);
        let analytic = mask_loss_grad(&m, &mbar).unwrap();
        let numeric = central_diff(&mut mbar, 1e-6, |x| mask_loss(&m, x).unwrap());
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn perturbed_template(r: &mut ChaCha8Rng) -> (SymmetricTopology, Vec<f64>) {
    let t = build_template_with_uv(3).unwrap();
    let x = flat(&t.vertices)
        .into_iter()
        .map(|v| v + r.random_range(-0.05..0.05))
        .collect();
    (t.topology, x)
}

pub fn grad_laplacian_energy() -> f64 {
    let mut r = rng(204);
    let (topo, mut x) = perturbed_template(&mut r);
    let analytic: Vec<f64> = laplacian_energy_grad(&to_mesh(&x), &topo)
        .unwrap()
        .into_iter()
        .flatten()
        .collect();
    let numeric = central_diff(&mut x, 1e-5, |x| laplacian_energy(&to_mesh(x), &topo).unwrap());
    rel_err(&analytic, &numeric)
}

pub fn grad_edge_energy() -> f64 {
    let mut r = rng(205);
    let (topo, mut x) = perturbed_template(&mut r);
    let analytic: Vec<f64> = edge_energy_grad(&to_mesh(&x), &topo)
        .unwrap()
        .into_iter()
        .flatten()
        .collect();
    let numeric = central_diff(&mut x, 1e-5, |x| edge_energy(&to_mesh(x), &topo).unwrap());
    rel_err(&analytic, &numeric)
}

pub fn grad_expand_symmetric() -> f64 {
    let mut r = rng(206);
    let topo = build_template_with_uv(3).unwrap().topology;
    let mut half = uniform(&mut r, 3 * topo.n_left(), -1.0, 1.0);
    let w: Vec<[f64; 3]> = (0..topo.n_total())
        .map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0)))
        .collect();
    let analytic = expand_symmetric_backward(&w, &topo);
    let numeric = central_diff(&mut half, 1e-6, |h| {
        let m = expand_symmetric(h, &topo).unwrap();
        m.coords
            .iter()
            .zip(&w)
            .map(|(a, b)| (0..3).map(|c| a[c] * b[c]).sum::<f64>())
            .sum()
    });
    rel_err(&analytic, &numeric)
}

pub fn grad_keypoint_loss() -> f64 {
    let mut r = rng(207);
    let n = 15;
    let lambda = 0.7;
    let mut x = uniform(&mut r, 9 * n, -1.0, 1.0);
    let split = |x: &[f64]| {
        let pts: Vec<[f64; 3]> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        (
            project_keypoints(&pts[..n]).unwrap(),
            project_keypoints(&pts[n..2 * n]).unwrap(),
            project_keypoints(&pts[2 * n..]).unwrap(),
        )
    };
    let (p, ps, pt) = split(&x);
    let (gp, gs, gt) = keypoint_loss_grads(&p, &ps, &pt, lambda).unwrap();
    let mut analytic: Vec<f64> = gp.into_iter().chain(gs).chain(gt).flatten().collect();
    // The loss only sees projected points; the plane coordinate has no effect.
    for (i, a) in analytic.iter_mut().enumerate() {
        if i % 3 == PLANE_AXIS {
            *a = 0.0;
        }
    }
    let numeric = central_diff(&mut x, 1e-6, |x| {
        let (p, ps, pt) = split(x);
        keypoint_loss(&p, &ps, &pt, lambda).unwrap()
    });
    rel_err(&analytic, &numeric)
}

/// Input-feature gradient of a weighted sum of the generated meshes through
/// fusion (training-mode batch norm), the head and symmetric expansion.
pub fn grad_shape_model() -> f64 {
    let mut r = rng(208);
    let cfg = ShapeConfig {
        feature_dim: 6,
        layers: 2,
        head_init_std: 0.05,
        ..ShapeConfig::default()
    };
    let mut model = ShapeModel::new(cfg, 3).unwrap();
    let rows = 3;
    let d = 6;
    let mut f = uniform(&mut r, 2 * rows * d, -1.0, 1.0);
    let n_total = model.template.topology.n_total();
    let w: Vec<Vec<[f64; 3]>> = (0..rows)
        .map(|_| {
            (0..n_total)
                .map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let controls = TransferControls::training();
    let objective = |model: &ShapeModel, f: &[f64]| -> f64 {
        let out = model
            .forward_features(&f[..rows * d], &f[rows * d..], rows, &controls)
            .unwrap();
        out.meshes
            .iter()
            .zip(&w)
            .map(|(m, wr)| {
                m.coords
                    .iter()
                    .zip(wr)
                    .map(|(a, b)| (0..3).map(|c| a[c] * b[c]).sum::<f64>())
                    .sum::<f64>()
            })
            .sum()
    };
    let fwd = model
        .forward_features(&f[..rows * d], &f[rows * d..], rows, &controls)
        .unwrap();
    let (ds, dt) = model.backward_features(&fwd, &w);
    let analytic: Vec<f64> = ds.into_iter().chain(dt).collect();
    let numeric = central_diff(&mut f, 1e-6, |f| objective(&model, f));
    rel_err(&analytic, &numeric)
}

// ---------------------------------------------------------------------------
// Statistic post-conditions

fn stats_case(r: &mut ChaCha8Rng, channels: usize, size: usize) -> StyleCase {
    let n = size * size;
    let mut labels_s = random_labels(r, n);
    // Every part present with at least `channels + 2` cells.
    for (i, l) in labels_s.iter_mut().enumerate().take(5 * (channels + 2)) {
        *l = (i % 5) as u8 + 1;
    }
    let mut labels_t = labels_s.clone();
    labels_t.shuffle(r);
    let mut vs = Grid::zeros(channels, size, size);
    let mut vt = Grid::zeros(channels, size, size);
    vs.data = uniform(r, channels * n, -1.0, 1.0);
    // Correlated target channels.
    for i in 0..n {
        let z: Vec<f64> = uniform(r, channels, -1.0, 1.0);
        for c in 0..channels {
            vt.data[c * n + i] = 2.0 * z[c] + 0.8 * z[(c + 1) % channels] + 0.5;
        }
    }
    let cfg = StylizerConfig {
        switch_gates: std::array::from_fn(|_| r.random_bool(0.5)),
        ..StylizerConfig::default()
    };
    StyleCase {
        vs,
        vt,
        ms: SemanticUvMask::new(size, size, labels_s).unwrap(),
        mt: SemanticUvMask::new(size, size, labels_t).unwrap(),
        cfg,
    }
}

fn part_values(v: &Grid, mask: &SemanticUvMask, part: u8, c: usize) -> Vec<f64> {
    mask.cells(part).into_iter().map(|i| v.plane(c)[i]).collect()
}

/// The side supplying the style of `part` under the case's gates.
fn style_side(k: &StyleCase, part: u8) -> (&Grid, &SemanticUvMask) {
    if k.cfg.switch_gates[(part - 1) as usize] {
        (&k.vs, &k.ms)
    } else {
        (&k.vt, &k.mt)
    }
}

/// Largest deviation of the per-part masked mean and standard deviation of
/// the SAdaIN output from those of the style side.
pub fn stats_sadain() -> f64 {
    let mut r = rng(301);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let k = stats_case(&mut r, 3, 12);
        let (out, _) = sadain(&k.vs, &k.vt, &k.ms, &k.mt, &k.cfg).unwrap();
        for part in 1..=4u8 {
            let (sv, sm) = style_side(&k, part);
            for c in 0..3 {
                let (mo, vo) = ref_mean_var(&part_values(&out, &k.ms, part, c));
                let (me, ve) = ref_mean_var(&part_values(sv, sm, part, c));
                worst = worst.max((mo - me).abs()).max((vo.sqrt() - ve.sqrt()).abs());
            }
        }
    }
    worst
}

/// Whether every SEFDM output part has exactly the style side's value
/// multiset per channel.
pub fn stats_sefdm() -> bool {
    let mut r = rng(302);
    for _ in 0..10 {
        let k = stats_case(&mut r, 3, 12);
        let (out, _) = sefdm(&k.vs, &k.vt, &k.ms, &k.mt, &k.cfg).unwrap();
        for part in 1..=4u8 {
            let (sv, sm) = style_side(&k, part);
            for c in 0..3 {
                let mut a = part_values(&out, &k.ms, part, c);
                let mut b = part_values(sv, sm, part, c);
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                if a != b {
                    return false;
                }
            }
        }
    }
    true
}

fn covariance(v: &Grid, mask: &SemanticUvMask, part: u8, channels: usize) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = (0..channels).map(|c| part_values(v, mask, part, c)).collect();
    let n = rows[0].len() as f64;
    let means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let mut cov = vec![0.0; channels * channels];
    for a in 0..channels {
        for b in 0..channels {
            cov[a * channels + b] = rows[a]
                .iter()
                .zip(&rows[b])
                .map(|(x, y)| (x - means[a]) * (y - means[b]))
                .sum::<f64>()
                / n;
        }
    }
    cov
}

/// Largest relative Frobenius error between the per-part covariance of the
/// SLST (WCT) output and that of the style side.
pub fn stats_slst() -> f64 {
    let mut r = rng(303);
    let mut worst: f64 = 0.0;
    let c = 3;
    for _ in 0..10 {
        let mut k = stats_case(&mut r, c, 16);
        k.cfg.slst_mode = SlstMode::Wct;
        let (out, _) = slst(&k.vs, &k.vt, &k.ms, &k.mt, &k.cfg).unwrap();
        for part in 1..=4u8 {
            let (sv, sm) = style_side(&k, part);
            let got = covariance(&out, &k.ms, part, c);
            let want = covariance(sv, sm, part, c);
            let diff: f64 = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
            worst = worst.max(diff / norm);
        }
    }
    worst
}

/// Whether every stylizer leaves the non-semantic cells bit-identical to the
/// source features.
pub fn stats_passthrough() -> bool {
    let mut r = rng(304);
    for _ in 0..10 {
        let k = stats_case(&mut r, 3, 12);
        let keep = k.ms.cells(5);
        for out in [
            sadain(&k.vs, &k.vt, &k.ms, &k.mt, &k.cfg).unwrap().0,
            slst(&k.vs, &k.vt, &k.ms, &k.mt, &k.cfg).unwrap().0,
            sefdm(&k.vs, &k.vt, &k.ms, &k.mt, &k.cfg).unwrap().0,
        ] {
            for c in 0..3 {
                if keep
                    .iter()
                    .any(|&i| out.plane(c)[i].to_bits() != k.vs.plane(c)[i].to_bits())
                {
                    return false;
                }
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Symmetry and scaling

pub struct SymmetryStats {
    /// Largest deviation of a reflected vertex from its partner.
    pub max_reflection_error: f64,
    pub plane_vertices: usize,
    /// Plane vertices whose plane coordinate is not exactly zero.
    pub plane_nonzero: usize,
}

pub fn mesh_symmetry(mesh: &MeshVertices, topo: &SymmetricTopology) -> SymmetryStats {
    let map = topo.reflection_map();
    let mut err: f64 = 0.0;
    for (v, p) in mesh.coords.iter().enumerate() {
        let q = mesh.coords[map[v]];
        for c in 0..3 {
            let expect = if c == PLANE_AXIS { -p[c] } else { p[c] };
            err = err.max((q[c] - expect).abs());
        }
    }
    let plane: Vec<usize> = topo.plane_vertices().collect();
    SymmetryStats {
        max_reflection_error: err,
        plane_nonzero: plane.iter().filter(|&&v| mesh.coords[v][PLANE_AXIS] != 0.0).count(),
        plane_vertices: plane.len(),
    }
}

/// Meshes generated by randomly initialised models from random features at
/// random α, in both modes.
pub fn random_generated_meshes(count: usize) -> (SymmetricTopology, Vec<MeshVertices>) {
    let mut r = rng(401);
    let mut meshes = Vec::new();
    let mut topo = None;
    for i in 0..count {
        let cfg = ShapeConfig {
            feature_dim: 16,
            layers: 1 + i % 3,
            head_init_std: 0.3,
            ..ShapeConfig::default()
        };
        let model = ShapeModel::new(cfg, 500 + i as u64).unwrap();
        let rows = 2;
        let fs = uniform(&mut r, rows * 16, -2.0, 2.0);
        let ft = uniform(&mut r, rows * 16, -2.0, 2.0);
        let controls = if i % 2 == 0 {
            TransferControls::training()
        } else {
            TransferControls::inference(r.random_range(-1.0..=1.0)).unwrap()
        };
        meshes.extend(model.forward_features(&fs, &ft, rows, &controls).unwrap().meshes);
        topo.get_or_insert(model.template.topology);
    }
    (topo.expect("at least one model"), meshes)
}

/// Whether `apply_scale` at α = ±1 zeroes one half exactly and doubles the
/// other exactly.
pub fn endpoint_scaling_exact() -> bool {
    let mut r = rng(402);
    for _ in 0..INSTANCES {
        let d = r.random_range(1..=64);
        let fs = ShapeFeature::new(uniform(&mut r, d, -1e3, 1e3)).unwrap();
        let ft = ShapeFeature::new(uniform(&mut r, d, -1e3, 1e3)).unwrap();
        let (s, t) = apply_scale(&fs, &ft, &TransferControls::inference(1.0).unwrap()).unwrap();
        if s.values.iter().any(|&v| v != 0.0) || t.values.iter().zip(&ft.values).any(|(a, b)| *a != 2.0 * b) {
            return false;
        }
        let (s, t) = apply_scale(&fs, &ft, &TransferControls::inference(-1.0).unwrap()).unwrap();
        if t.values.iter().any(|&v| v != 0.0) || s.values.iter().zip(&fs.values).any(|(a, b)| *a != 2.0 * b) {
            return false;
        }
    }
    true
}
