//! Fixed-topology symmetric meshes.
//!
//! Every mesh in the pipeline shares one topology whose vertices are split
//! into three groups:
//!
//! - `left`: the `n_left` vertices the shape head predicts (indices `0..n_left`),
//!   a subset of which lie on the symmetry plane;
//! - `mirrored`: `n_mirrored` vertices (indices `n_left..n_total`) that are the
//!   reflections of the off-plane left vertices;
//! - `plane`: left vertices whose first coordinate is forced to zero.
//!
//! The symmetry plane is `x = 0` ([`PLANE_AXIS`]).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate zeroed on the symmetry plane.
pub const PLANE_AXIS: usize = 0;

/// Subdivision level at which the canonical 642-vertex template is reached.
pub const CANONICAL_LEVEL: u32 = 3;
pub const CANONICAL_LEFT: usize = 372;
pub const CANONICAL_MIRRORED: usize = 270;
pub const CANONICAL_PLANE: usize = 102;
pub const CANONICAL_TOTAL: usize = 642;

const CANONICAL_RINGS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricTopology {
    n_left: usize,
    n_mirrored: usize,
    n_plane: usize,
    faces: Vec<[usize; 3]>,
    /// For each left vertex, whether it sits on the symmetry plane.
    on_plane: Vec<bool>,
    /// For mirrored vertex `n_left + k`, the left vertex it reflects.
    mirror_source: Vec<usize>,
    reflection: Vec<usize>,
    edges: Vec<[usize; 2]>,
    neighbors: Vec<Vec<usize>>,
}

impl SymmetricTopology {
    /// Builds a topology from its face list and symmetry maps.
    pub fn from_parts(on_plane: Vec<bool>, mirror_source: Vec<usize>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mut edge_set = BTreeSet::new();
        for f in &faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edge_set.insert([a.min(b), a.max(b)]);
            }
        }
        Self::assemble(on_plane, mirror_source, faces, edge_set.into_iter().collect())
    }

    /// Builds a face-less topology from an explicit edge list (graph-only meshes).
    pub fn from_edges(on_plane: Vec<bool>, mirror_source: Vec<usize>, edges: Vec<[usize; 2]>) -> Result<Self> {
        let edge_set: BTreeSet<[usize; 2]> = edges.iter().map(|e| [e[0].min(e[1]), e[0].max(e[1])]).collect();
        Self::assemble(on_plane, mirror_source, Vec::new(), edge_set.into_iter().collect())
    }

    fn assemble(
        on_plane: Vec<bool>,
        mirror_source: Vec<usize>,
        faces: Vec<[usize; 3]>,
        edges: Vec<[usize; 2]>,
    ) -> Result<Self> {
        let n_left = on_plane.len();
        let n_mirrored = mirror_source.len();
        let n_plane = on_plane.iter().filter(|p| **p).count();
        if n_left != n_mirrored + n_plane {
            return Err(Error::Topology(format!(
                "n_left ({n_left}) must equal n_mirrored ({n_mirrored}) + n_plane ({n_plane})"
            )));
        }
        let n_total = n_left + n_mirrored;

        let mut reflection: Vec<usize> = (0..n_total).collect();
        let mut seen = vec![false; n_left];
        for (k, &src) in mirror_source.iter().enumerate() {
            if src >= n_left {
                return Err(Error::Topology(format!("mirror source {src} is not a left vertex")));
            }
            if on_plane[src] {
                return Err(Error::Topology(format!(
                    "plane vertex {src} cannot have a mirror partner"
                )));
            }
            if seen[src] {
                return Err(Error::Topology(format!("left vertex {src} mirrored twice")));
            }
            seen[src] = true;
            reflection[src] = n_left + k;
            reflection[n_left + k] = src;
        }

        for f in &faces {
            if f.iter().any(|&i| i >= n_total) {
                return Err(Error::Topology(format!("face {f:?} references a missing vertex")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Topology(format!("face {f:?} is degenerate")));
            }
        }
        let mut neighbors = vec![Vec::new(); n_total];
        for e in &edges {
            if e[0] >= n_total || e[1] >= n_total || e[0] == e[1] {
                return Err(Error::Topology(format!("invalid edge {e:?}")));
            }
            neighbors[e[0]].push(e[1]);
            neighbors[e[1]].push(e[0]);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }

        Ok(Self {
            n_left,
            n_mirrored,
            n_plane,
            faces,
            on_plane,
            mirror_source,
            reflection,
            edges,
            neighbors,
        })
    }

    pub fn n_left(&self) -> usize {
        self.n_left
    }

    pub fn n_mirrored(&self) -> usize {
        self.n_mirrored
    }

    pub fn n_plane(&self) -> usize {
        self.n_plane
    }

    pub fn n_total(&self) -> usize {
        self.n_left + self.n_mirrored
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn is_on_plane(&self, left: usize) -> bool {
        self.on_plane[left]
    }

    pub fn on_plane(&self) -> &[bool] {
        &self.on_plane
    }

    pub fn mirror_source(&self) -> &[usize] {
        &self.mirror_source
    }

    /// Vertex index permutation induced by reflecting across the plane.
    pub fn reflection_map(&self) -> &[usize] {
        &self.reflection
    }

    pub fn plane_vertices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_left).filter(move |&i| self.on_plane[i])
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.n_total() as i64 - self.edges.len() as i64 + self.faces.len() as i64
    }

    /// Checks that every edge is shared by exactly two faces with opposite
    /// orientation.
    pub fn check_closed_manifold(&self) -> Result<()> {
        use std::collections::BTreeMap;
        let mut directed: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            if count != 1 {
                return Err(Error::Topology(format!("directed edge ({a},{b}) used {count} times")));
            }
            if !directed.contains_key(&(b, a)) {
                return Err(Error::Topology(format!("edge ({a},{b}) is on a boundary")));
            }
        }
        Ok(())
    }
}

/// Vertex coordinates of a mesh, one `[x, y, z]` per vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshVertices {
    pub coords: Vec<[f64; 3]>,
}

impl MeshVertices {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        Self { coords }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            coords: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.coords
                .iter()
                .map(|v| [v[0] * factor, v[1] * factor, v[2] * factor])
                .collect(),
        )
    }

    /// Left-half coordinates in the coordinate-major `3 × n_left` layout.
    pub fn left_half(&self, topo: &SymmetricTopology) -> Vec<f64> {
        let n = topo.n_left();
        let mut half = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                half[c * n + i] = self.coords[i][c];
            }
        }
        half
    }

    fn check(&self, topo: &SymmetricTopology) -> Result<()> {
        if self.coords.len() != topo.n_total() {
            return Err(Error::dim("mesh vertices", topo.n_total(), self.coords.len()));
        }
        Ok(())
    }
}

/// Template mesh together with its per-vertex UV coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub topology: SymmetricTopology,
    pub vertices: MeshVertices,
    pub uv: Vec<[f64; 2]>,
}

/// Builds the symmetric sphere template.
///
/// The canonical partition (372 left, 270 mirrored, 102 on-plane) is reached
/// at [`CANONICAL_LEVEL`]; lower levels cannot supply 642 vertices and are
/// rejected. Higher levels are welded down to the same canonical budget.
pub fn build_template(subdivision_level: u32) -> Result<(SymmetricTopology, MeshVertices)> {
    let t = build_template_with_uv(subdivision_level)?;
    Ok((t.topology, t.vertices))
}

pub fn build_template_with_uv(subdivision_level: u32) -> Result<Template> {
    if subdivision_level < CANONICAL_LEVEL {
        let achievable = 10 * 4usize.pow(subdivision_level) + 2;
        return Err(Error::Template(format!(
            "subdivision level {subdivision_level} reaches only {achievable} vertices; \
             the template needs {CANONICAL_TOTAL} ({CANONICAL_LEFT} left + {CANONICAL_MIRRORED} \
             mirrored, {CANONICAL_PLANE} on-plane), available from level {CANONICAL_LEVEL}"
        )));
    }
    let counts = canonical_ring_counts();
    build_symmetric_sphere(&counts)
}

/// Even per-ring vertex counts roughly proportional to the ring radius,
/// summing to the canonical off-pole budget.
fn canonical_ring_counts() -> Vec<usize> {
    let rings = CANONICAL_RINGS;
    let budget = CANONICAL_TOTAL - 2;
    let radii: Vec<f64> = (1..=rings)
        .map(|r| (std::f64::consts::PI * r as f64 / (rings + 1) as f64).sin())
        .collect();
    let total: f64 = radii.iter().sum();
    let raw: Vec<f64> = radii.iter().map(|s| s * budget as f64 / total).collect();
    let mut counts: Vec<usize> = raw
        .iter()
        .map(|&x| (2.0 * (x / 2.0).round()).max(4.0) as usize)
        .collect();
    // Fix the total in steps of 2, visiting rings in a deterministic order.
    loop {
        let sum: usize = counts.iter().sum();
        if sum == budget {
            break;
        }
        let grow = sum < budget;
        let pick = (0..rings)
            .filter(|&r| grow || counts[r] > 4)
            .max_by(|&a, &b| {
                let da = raw[a] - counts[a] as f64;
                let db = raw[b] - counts[b] as f64;
                let (da, db) = if grow { (da, db) } else { (-da, -db) };
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("at least one adjustable ring");
        if grow {
            counts[pick] += 2;
        } else {
            counts[pick] -= 2;
        }
    }
    counts
}

/// Builds a latitude/longitude sphere around the `z` axis with the given
/// even per-ring vertex counts. Each ring has one vertex at the top and one at
/// the bottom of the symmetry plane, so the plane holds `2 + 2 · rings`
/// vertices including both poles.
pub fn build_symmetric_sphere(ring_counts: &[usize]) -> Result<Template> {
    use std::f64::consts::PI;
    if ring_counts.is_empty() {
        return Err(Error::Template("need at least one ring".into()));
    }
    if let Some(bad) = ring_counts.iter().find(|&&m| m < 4 || m % 2 != 0) {
        return Err(Error::Template(format!(
            "ring vertex counts must be even and >= 4, got {bad}"
        )));
    }
    let rings = ring_counts.len();

    // Geometric vertex ids: 0 = north pole, then ring-major, last = south pole.
    let mut ring_offset = Vec::with_capacity(rings);
    let mut next = 1;
    for &m in ring_counts {
        ring_offset.push(next);
        next += m;
    }
    let south = next;
    let n_geo = south + 1;

    let mut pos = vec![[0.0; 3]; n_geo];
    let mut uv = vec![[0.0; 2]; n_geo];
    let mut mirror_geo: Vec<usize> = (0..n_geo).collect();
    let mut plane_geo = vec![false; n_geo];
    let mut left_geo = vec![false; n_geo];
    pos[0] = [0.0, 0.0, 1.0];
    uv[0] = [0.5, 0.0];
    pos[south] = [0.0, 0.0, -1.0];
    uv[south] = [0.5, 1.0];
    for g in [0, south] {
        plane_geo[g] = true;
        left_geo[g] = true;
    }
    for (r, &m) in ring_counts.iter().enumerate() {
        let theta = PI * (r + 1) as f64 / (rings + 1) as f64;
        let (rho, z) = (theta.sin(), theta.cos());
        for k in 0..m {
            let g = ring_offset[r] + k;
            let phi = PI / 2.0 + 2.0 * PI * k as f64 / m as f64;
            uv[g] = [k as f64 / m as f64, theta / PI];
            mirror_geo[g] = ring_offset[r] + (m - k) % m;
            if k == 0 || k == m / 2 {
                let y = if k == 0 { rho } else { -rho };
                pos[g] = [0.0, y, z];
                plane_geo[g] = true;
                left_geo[g] = true;
            } else if k > m / 2 {
                pos[g] = [rho * phi.cos(), rho * phi.sin(), z];
                left_geo[g] = true;
            }
        }
        // Mirrored vertices are exact reflections of their partners.
        for k in 1..m / 2 {
            let g = ring_offset[r] + k;
            let p = pos[mirror_geo[g]];
            pos[g] = [-p[0], p[1], p[2]];
        }
    }

    let mut faces_geo: Vec<[usize; 3]> = Vec::new();
    let first = ring_counts[0];
    for k in 0..first {
        faces_geo.push([0, ring_offset[0] + k, ring_offset[0] + (k + 1) % first]);
    }
    for r in 0..rings - 1 {
        zip_rings(
            ring_offset[r],
            ring_counts[r],
            ring_offset[r + 1],
            ring_counts[r + 1],
            &mut faces_geo,
        );
    }
    let last = ring_counts[rings - 1];
    let lo = ring_offset[rings - 1];
    for k in 0..last {
        faces_geo.push([south, lo + (k + 1) % last, lo + k]);
    }
    // Orient outward; the sphere is star-shaped about the origin.
    for f in &mut faces_geo {
        let (a, b, c) = (pos[f[0]], pos[f[1]], pos[f[2]]);
        let n = cross(sub(b, a), sub(c, a));
        let centroid = [a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]];
        if dot(n, centroid) < 0.0 {
            f.swap(1, 2);
        }
    }

    // Renumber: left vertices first (geometric order), then mirrored partners
    // in the order of their left sources.
    let mut new_index = vec![usize::MAX; n_geo];
    let mut on_plane = Vec::new();
    let mut left_order = Vec::new();
    for g in 0..n_geo {
        if left_geo[g] {
            new_index[g] = left_order.len();
            left_order.push(g);
            on_plane.push(plane_geo[g]);
        }
    }
    let n_left = left_order.len();
    let mut mirror_source = Vec::new();
    let mut order = left_order.clone();
    for (li, &g) in left_order.iter().enumerate() {
        if !plane_geo[g] {
            let mg = mirror_geo[g];
            new_index[mg] = n_left + mirror_source.len();
            mirror_source.push(li);
            order.push(mg);
        }
    }
    debug_assert!(new_index.iter().all(|&i| i != usize::MAX));

    let faces: Vec<[usize; 3]> = faces_geo
        .iter()
        .map(|f| [new_index[f[0]], new_index[f[1]], new_index[f[2]]])
        .collect();
    let coords: Vec<[f64; 3]> = order.iter().map(|&g| pos[g]).collect();
    let uv: Vec<[f64; 2]> = order.iter().map(|&g| uv[g]).collect();
    let topology = SymmetricTopology::from_parts(on_plane, mirror_source, faces)?;
    Ok(Template {
        topology,
        vertices: MeshVertices::new(coords),
        uv,
    })
}

/// Triangulates the band between two rings by merging their edges in order of
/// midpoint angle. Ties go to the upper ring on the first half of the turn and
/// to the lower ring on the second half, which keeps the band mirror-symmetric.
fn zip_rings(a0: usize, ma: usize, b0: usize, mb: usize, out: &mut Vec<[usize; 3]>) {
    // Midpoint of edge k on a ring with m vertices sits at (2k + 1) / (2m) turns.
    let mut events: Vec<(bool, usize)> = (0..ma).map(|k| (true, k)).chain((0..mb).map(|k| (false, k))).collect();
    let before = |x: &(bool, usize), y: &(bool, usize)| -> std::cmp::Ordering {
        let (mx, my) = (if x.0 { ma } else { mb }, if y.0 { ma } else { mb });
        let lhs = (2 * x.1 + 1) * my;
        let rhs = (2 * y.1 + 1) * mx;
        lhs.cmp(&rhs).then_with(|| {
            if x.0 == y.0 {
                return std::cmp::Ordering::Equal;
            }
            // Tie: first half of the turn iff (2k + 1) / (2m) < 1/2.
            let first_half = 2 * x.1 + 1 < mx;
            match (x.0, first_half) {
                (true, true) | (false, false) => std::cmp::Ordering::Less,
                _ => std::cmp::Ordering::Greater,
            }
        })
    };
    events.sort_by(before);
    let (mut ia, mut ib) = (0usize, 0usize);
    for (upper, k) in events {
        if upper {
            out.push([a0 + k, a0 + (k + 1) % ma, b0 + ib % mb]);
            ia = k + 1;
        } else {
            out.push([b0 + (k + 1) % mb, b0 + k, a0 + ia % ma]);
            ib = k + 1;
        }
    }
}

/// Expands predicted left-half coordinates (coordinate-major `3 × n_left`)
/// into a full symmetric mesh.
pub fn expand_symmetric(half: &[f64], topo: &SymmetricTopology) -> Result<MeshVertices> {
    let n = topo.n_left();
    if half.len() != 3 * n {
        return Err(Error::dim(
            "expand_symmetric half",
            format!("3 x {n}"),
            format!("{} values", half.len()),
        ));
    }
    let mut coords = Vec::with_capacity(topo.n_total());
    for i in 0..n {
        let mut v = [half[i], half[n + i], half[2 * n + i]];
        if topo.on_plane[i] {
            v[PLANE_AXIS] = 0.0;
        }
        coords.push(v);
    }
    for &src in &topo.mirror_source {
        let mut v = coords[src];
        v[PLANE_AXIS] = -v[PLANE_AXIS];
        coords.push(v);
    }
    Ok(MeshVertices::new(coords))
}

/// Pulls a gradient on the full mesh back to the `3 × n_left` half layout.
pub fn expand_symmetric_backward(grad: &[[f64; 3]], topo: &SymmetricTopology) -> Vec<f64> {
    let n = topo.n_left();
    let mut out = vec![0.0; 3 * n];
    let mut acc = |i: usize, g: [f64; 3], mirrored: bool| {
        for c in 0..3 {
            let mut v = g[c];
            if c == PLANE_AXIS && mirrored {
                v = -v;
            }
            if c == PLANE_AXIS && topo.on_plane[i] {
                v = 0.0;
            }
            out[c * n + i] += v;
        }
    };
    for (i, g) in grad.iter().take(n).enumerate() {
        acc(i, *g, false);
    }
    for (k, &src) in topo.mirror_source.iter().enumerate() {
        acc(src, grad[n + k], true);
    }
    out
}

/// Mean squared deviation of each vertex from its one-ring centroid.
pub fn laplacian_energy(mesh: &MeshVertices, topo: &SymmetricTopology) -> Result<f64> {
    mesh.check(topo)?;
    let n = mesh.len() as f64;
    let mut total = 0.0;
    for (v, p) in mesh.coords.iter().enumerate() {
        if let Some(d) = umbrella_offset(mesh, topo, v, p) {
            total += d.iter().map(|x| x * x).sum::<f64>();
        }
    }
    Ok(total / n)
}

pub fn laplacian_energy_grad(mesh: &MeshVertices, topo: &SymmetricTopology) -> Result<Vec<[f64; 3]>> {
    mesh.check(topo)?;
    let n = mesh.len() as f64;
    let mut grad = vec![[0.0; 3]; mesh.len()];
    for (v, p) in mesh.coords.iter().enumerate() {
        let Some(d) = umbrella_offset(mesh, topo, v, p) else {
            continue;
        };
        let nbrs = topo.neighbors(v);
        let share = 1.0 / nbrs.len() as f64;
        for c in 0..3 {
            let g = 2.0 * d[c] / n;
            grad[v][c] += g;
            for &u in nbrs {
                grad[u][c] -= g * share;
            }
        }
    }
    Ok(grad)
}

fn umbrella_offset(mesh: &MeshVertices, topo: &SymmetricTopology, v: usize, p: &[f64; 3]) -> Option<[f64; 3]> {
    let nbrs = topo.neighbors(v);
    if nbrs.is_empty() {
        return None;
    }
    // Accumulate neighbour offsets so coincident vertices give exactly zero.
    let mut acc = [0.0; 3];
    for &u in nbrs {
        for c in 0..3 {
            acc[c] += mesh.coords[u][c] - p[c];
        }
    }
    let k = nbrs.len() as f64;
    Some([-acc[0] / k, -acc[1] / k, -acc[2] / k])
}

/// Mean squared edge length.
pub fn edge_energy(mesh: &MeshVertices, topo: &SymmetricTopology) -> Result<f64> {
    mesh.check(topo)?;
    let edges = topo.edges();
    if edges.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = edges.iter().map(|e| dist2(mesh.coords[e[0]], mesh.coords[e[1]])).sum();
    Ok(sum / edges.len() as f64)
}

pub fn edge_energy_grad(mesh: &MeshVertices, topo: &SymmetricTopology) -> Result<Vec<[f64; 3]>> {
    mesh.check(topo)?;
    let mut grad = vec![[0.0; 3]; mesh.len()];
    let edges = topo.edges();
    if edges.is_empty() {
        return Ok(grad);
    }
    let w = 2.0 / edges.len() as f64;
    for e in edges {
        let (a, b) = (mesh.coords[e[0]], mesh.coords[e[1]]);
        for c in 0..3 {
            let g = w * (a[c] - b[c]);
            grad[e[0]][c] += g;
            grad[e[1]][c] -= g;
        }
    }
    Ok(grad)
}

/// 3D keypoints projected onto the symmetry plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints3D {
    pub points: Vec<[f64; 3]>,
    /// Mesh vertex that produced each point, when known.
    pub source: Vec<Option<usize>>,
}

impl Keypoints3D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reads the given vertices from a mesh and projects them onto the plane.
    pub fn from_mesh(mesh: &MeshVertices, indices: &[usize]) -> Result<Self> {
        let mut points = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = mesh
                .coords
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("keypoint vertex {i} out of range")))?;
            points.push(*p);
        }
        let mut kp = project_keypoints(&points)?;
        kp.source = indices.iter().map(|&i| Some(i)).collect();
        Ok(kp)
    }
}

pub fn project_keypoints(points: &[[f64; 3]]) -> Result<Keypoints3D> {
    if points.is_empty() {
        return Err(Error::Invalid("at least one keypoint is required".into()));
    }
    let points = points
        .iter()
        .map(|p| {
            let mut q = *p;
            q[PLANE_AXIS] = 0.0;
            q
        })
        .collect::<Vec<_>>();
    let source = vec![None; points.len()];
    Ok(Keypoints3D { points, source })
}

/// Writes a Wavefront OBJ with 6-decimal vertices, optional `vt` lines and
/// 1-based faces.
pub fn export_obj(mesh: &MeshVertices, topo: &SymmetricTopology, uv: Option<&[[f64; 2]]>, path: &Path) -> Result<()> {
    let text = obj_string(mesh, topo, uv)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn obj_string(mesh: &MeshVertices, topo: &SymmetricTopology, uv: Option<&[[f64; 2]]>) -> Result<String> {
    mesh.check(topo)?;
    if let Some(uv) = uv {
        if uv.len() != mesh.len() {
            return Err(Error::dim("obj uv coordinates", mesh.len(), uv.len()));
        }
    }
    let mut s = String::with_capacity(mesh.len() * 40 + topo.faces().len() * 24);
    for v in &mesh.coords {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    if let Some(uv) = uv {
        for t in uv {
            let _ = writeln!(s, "vt {:.6} {:.6}", t[0], t[1]);
        }
    }
    for f in topo.faces() {
        let (a, b, c) = (f[0] + 1, f[1] + 1, f[2] + 1);
        if uv.is_some() {
            let _ = writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}");
        } else {
            let _ = writeln!(s, "f {a} {b} {c}");
        }
    }
    Ok(s)
}

/// Minimal OBJ contents: positions, texture coordinates and triangle indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjData {
    pub vertices: Vec<[f64; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub faces: Vec<[usize; 3]>,
}

pub fn parse_obj(text: &str) -> Result<ObjData> {
    let mut out = ObjData::default();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let err = |msg: &str| Error::Obj {
            line: ln + 1,
            msg: msg.to_string(),
        };
        let nums = |it: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>> {
            it.map(|t| t.parse::<f64>().map_err(|_| err("bad number"))).collect()
        };
        match tag {
            "v" => {
                let v = nums(it)?;
                if v.len() < 3 {
                    return Err(err("vertex needs 3 coordinates"));
                }
                out.vertices.push([v[0], v[1], v[2]]);
            }
            "vt" => {
                let v = nums(it)?;
                if v.len() < 2 {
                    return Err(err("texture coordinate needs 2 values"));
                }
                out.uv.push([v[0], v[1]]);
            }
            "f" => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        t.split('/')
                            .next()
                            .and_then(|s| s.parse::<usize>().ok())
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| err("bad face index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(err("only triangles are supported"));
                }
                out.faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Ok(out)
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> Template {
        build_template_with_uv(CANONICAL_LEVEL).unwrap()
    }

    #[test]
    fn canonical_partition() {
        let t = template();
        let topo = &t.topology;
        assert_eq!(topo.n_left(), 372);
        assert_eq!(topo.n_mirrored(), 270);
        assert_eq!(topo.n_plane(), 102);
        assert_eq!(topo.n_total(), 642);
        assert_eq!(topo.faces().len(), 1280);
    }

    #[test]
    fn low_level_is_rejected_with_counts() {
        let err = build_template(2).unwrap_err().to_string();
        assert!(err.contains("162"), "{err}");
        assert!(err.contains("642"), "{err}");
    }

    #[test]
    fn template_is_closed_with_euler_two() {
        let t = template();
        t.topology.check_closed_manifold().unwrap();
        // Count edges directly from the face list.
        let mut edges = BTreeSet::new();
        for f in t.topology.faces() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let chi = 642 - edges.len() as i64 + t.topology.faces().len() as i64;
        assert_eq!(chi, 2);
        assert_eq!(t.topology.euler_characteristic(), 2);
    }

    #[test]
    fn reflection_is_involution_and_preserves_faces() {
        let t = template();
        let r = t.topology.reflection_map();
        for i in 0..r.len() {
            assert_eq!(r[r[i]], i);
        }
        let norm = |f: [usize; 3]| {
            let mut s = f;
            s.sort_unstable();
            s
        };
        let faces: BTreeSet<[usize; 3]> = t.topology.faces().iter().map(|f| norm(*f)).collect();
        for f in t.topology.faces() {
            assert!(faces.contains(&norm([r[f[0]], r[f[1]], r[f[2]]])));
        }
    }

    #[test]
    fn template_faces_point_outward() {
        let t = template();
        let mut volume = 0.0;
        for f in t.topology.faces() {
            let (a, b, c) = (
                t.vertices.coords[f[0]],
                t.vertices.coords[f[1]],
                t.vertices.coords[f[2]],
            );
            volume += dot(a, cross(b, c)) / 6.0;
        }
        assert!(volume > 3.5 && volume < 4.2, "volume {volume}");
    }

    #[test]
    fn template_vertices_are_symmetric() {
        let t = template();
        let topo = &t.topology;
        for i in topo.plane_vertices() {
            assert_eq!(t.vertices.coords[i][PLANE_AXIS], 0.0);
        }
        for (k, &src) in topo.mirror_source().iter().enumerate() {
            let a = t.vertices.coords[src];
            let b = t.vertices.coords[topo.n_left() + k];
            assert_eq!([-a[0], a[1], a[2]], b);
            assert!(a[0] > 0.0);
        }
    }

    #[test]
    fn expand_zero_half_is_zero() {
        let t = template();
        let out = expand_symmetric(&vec![0.0; 3 * 372], &t.topology).unwrap();
        assert_eq!(out.len(), 642);
        assert!(out.coords.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn expand_reflects_and_projects() {
        let t = template();
        let topo = &t.topology;
        let n = topo.n_left();
        let off = (0..n).find(|&i| !topo.is_on_plane(i)).unwrap();
        let on = (0..n).find(|&i| topo.is_on_plane(i)).unwrap();
        let mut half = vec![0.0; 3 * n];
        for (c, v) in [0.3, 0.1, 0.2].into_iter().enumerate() {
            half[c * n + off] = v;
        }
        for (c, v) in [0.05, 0.4, -0.1].into_iter().enumerate() {
            half[c * n + on] = v;
        }
        let out = expand_symmetric(&half, topo).unwrap();
        let partner = topo.reflection_map()[off];
        assert_eq!(out.coords[partner], [-0.3, 0.1, 0.2]);
        assert_eq!(out.coords[on], [0.0, 0.4, -0.1]);
    }

    #[test]
    fn expand_rejects_wrong_width() {
        let t = template();
        assert!(matches!(
            expand_symmetric(&[0.0; 9], &t.topology),
            Err(Error::Dimension { .. })
        ));
    }

    fn path_graph() -> (SymmetricTopology, MeshVertices) {
        let topo = SymmetricTopology::from_edges(vec![true; 4], vec![], vec![[0, 1], [1, 2], [2, 3]]).unwrap();
        let mesh = MeshVertices::new((0..4).map(|i| [0.0, i as f64, 0.0]).collect());
        (topo, mesh)
    }

    #[test]
    fn laplacian_of_path_graph() {
        let (topo, mesh) = path_graph();
        // Interior vertices sit at their neighbour centroid; each endpoint is
        // one unit away from its single neighbour: (1 + 0 + 0 + 1) / 4.
        assert_eq!(laplacian_energy(&mesh, &topo).unwrap(), 0.5);
    }

    #[test]
    fn energies_vanish_on_collapsed_mesh() {
        let t = template();
        let mesh = MeshVertices::new(vec![[0.3, -0.2, 0.1]; 642]);
        assert_eq!(laplacian_energy(&mesh, &t.topology).unwrap(), 0.0);
        assert_eq!(edge_energy(&mesh, &t.topology).unwrap(), 0.0);
    }

    #[test]
    fn laplacian_scales_quadratically() {
        let t = template();
        let e1 = laplacian_energy(&t.vertices, &t.topology).unwrap();
        let e2 = laplacian_energy(&t.vertices.scaled(2.0), &t.topology).unwrap();
        assert!((e2 - 4.0 * e1).abs() < 1e-12 * e2.max(1.0));
        assert!(e1 > 0.0);
    }

    #[test]
    fn single_edge_energy() {
        let topo = SymmetricTopology::from_edges(vec![true, true], vec![], vec![[0, 1]]).unwrap();
        let mesh = MeshVertices::new(vec![[0.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        assert_eq!(edge_energy(&mesh, &topo).unwrap(), 4.0);
    }

    #[test]
    fn template_edge_energy_matches_edge_sum() {
        let t = template();
        let mut sum = 0.0;
        let mut count = 0;
        let mut seen = BTreeSet::new();
        for f in t.topology.faces() {
            for k in 0..3 {
                let (a, b) = (f[k].min(f[(k + 1) % 3]), f[k].max(f[(k + 1) % 3]));
                if seen.insert((a, b)) {
                    let d = sub(t.vertices.coords[a], t.vertices.coords[b]);
                    sum += dot(d, d);
                    count += 1;
                }
            }
        }
        let e = edge_energy(&t.vertices, &t.topology).unwrap();
        assert!((e - sum / count as f64).abs() < 1e-14);
    }

    #[test]
    fn keypoint_projection() {
        let kp = project_keypoints(&[[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]]).unwrap();
        assert_eq!(kp.points, vec![[0.0, 2.0, 3.0], [0.0, -1.0, 0.5]]);
        assert!(project_keypoints(&[]).is_err());
    }

    #[test]
    fn obj_unit_triangle() {
        let topo = SymmetricTopology::from_parts(vec![true, true, true], vec![], vec![[0, 1, 2]]).unwrap();
        let mesh = MeshVertices::new(vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let s = obj_string(&mesh, &topo, None).unwrap();
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(
            s.lines().filter(|l| l.starts_with("f ")).collect::<Vec<_>>(),
            vec!["f 1 2 3"]
        );
    }

    #[test]
    fn obj_with_uv_has_one_vt_per_vertex() {
        let t = template();
        let s = obj_string(&t.vertices, &t.topology, Some(&t.uv)).unwrap();
        let parsed = parse_obj(&s).unwrap();
        assert_eq!(parsed.uv.len(), parsed.vertices.len());
        assert_eq!(parsed.faces, t.topology.faces());
    }

    #[test]
    fn obj_write_failure_names_path() {
        let t = template();
        let path = Path::new("/nonexistent-dir/x/mesh.obj");
        let err = export_obj(&t.vertices, &t.topology, None, path).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x/mesh.obj"));
    }
}
