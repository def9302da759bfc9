//! First-order FEM assembly: conduction stiffness, control-surface
//! operators, electrode observation rows, and the data normal blocks.
//!
//! All element integrals are exact for P1 elements (no quadrature error):
//! volume stiffness via face area vectors, surface stiffness via cotangent
//! weights, surface mass via the closed-form P1 element mass. Assembly
//! iterates elements in storage order and canonicalizes triplets
//! deterministically, so identical inputs give bit-identical matrices.

use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, ConductivityMap, SurfaceExtraction, TetMesh};
use crate::sparse::{SparseRectMatrix, SparseSymMatrix, Triplet};
use crate::vec3::{self, Point3};

/// Relative snap tolerance for electrode-to-node matching, as a fraction of
/// the domain diameter. Electrodes farther outside the mesh are errors, not
/// silently projected; deliberate projection is a separate, explicit step
/// ([`project_radially_to_boundary`]).
pub const ELECTRODE_SNAP_REL: f64 = 1e-8;

/// Electrode positions and diagonal data weights (inverse noise stds).
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeSet {
    positions: Vec<Point3>,
    weights: Vec<f64>,
}

impl ElectrodeSet {
    pub fn new(positions: Vec<Point3>, weights: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Parameter("electrode set is empty".into()));
        }
        if positions.len() != weights.len() {
            return Err(Error::Parameter(format!(
                "{} electrode positions but {} weights",
                positions.len(),
                weights.len()
            )));
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Parameter(format!("electrode {i} has non-finite position")));
            }
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Parameter(format!(
                    "electrode {i} weight must be positive and finite, got {w}"
                )));
            }
        }
        let scale = positions
            .iter()
            .map(|p| vec3::norm(*p))
            .fold(0.0f64, f64::max)
            .max(1e-300);
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                if vec3::dist(positions[i], positions[j]) < 1e-12 * scale {
                    return Err(Error::Parameter(format!(
                        "electrodes {i} and {j} coincide (duplicate measurement)"
                    )));
                }
            }
        }
        Ok(Self { positions, weights })
    }

    /// Unit weights.
    pub fn with_unit_weights(positions: Vec<Point3>) -> Result<Self> {
        let w = vec![1.0; positions.len()];
        Self::new(positions, w)
    }

    /// Correlated noise would need a dense weighting of the data term; only
    /// diagonal weights are implemented.
    pub fn with_dense_covariance(_positions: Vec<Point3>, _cov: Vec<Vec<f64>>) -> Result<Self> {
        Err(Error::Unsupported(
            "dense noise covariance is not implemented; use diagonal weights".into(),
        ))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Measured potentials, one per electrode.
pub type DataVector = Vec<f64>;

/// Conduction stiffness E (N x N): E_ij = integral sigma grad a_i . grad a_j.
/// Symmetric positive semidefinite; constants span the kernel.
pub fn assemble_volume_stiffness(mesh: &TetMesh, cond: &ConductivityMap) -> Result<SparseSymMatrix> {
    let verts = mesh.vertices();
    let mut trips = Vec::with_capacity(mesh.num_tets() * 10);
    for (t, tet) in mesh.tets().iter().enumerate() {
        let sigma = cond.sigma(mesh.regions()[t])?;
        let p = [verts[tet[0]], verts[tet[1]], verts[tet[2]], verts[tet[3]]];
        let vol = vec3::tet_volume(p[0], p[1], p[2], p[3]);
        // Outward area vectors of the faces opposite each vertex; the P1
        // gradient is grad a_i = -S_i / (3 V), so the element matrix is
        // sigma (S_i . S_j) / (9 V), exact.
        let s = [
            face_area_vector(p[1], p[2], p[3]),
            face_area_vector(p[0], p[3], p[2]),
            face_area_vector(p[0], p[1], p[3]),
            face_area_vector(p[0], p[2], p[1]),
        ];
        let c = sigma / (9.0 * vol);
        for i in 0..4 {
            for j in i..4 {
                trips.push(Triplet {
                    row: tet[i].min(tet[j]),
                    col: tet[i].max(tet[j]),
                    val: c * vec3::dot(s[i], s[j]),
                });
            }
        }
    }
    SparseSymMatrix::from_triplets(mesh.num_vertices(), trips)
}

#[inline]
fn face_area_vector(a: Point3, b: Point3, c: Point3) -> Point3 {
    vec3::scale(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)), 0.5)
}

/// Volume mass matrix (N x N): M_ij = integral a_i a_j dV, exact for P1
/// (per-tet block V/10 on the diagonal, V/20 off it).
pub fn assemble_volume_mass(mesh: &TetMesh) -> Result<SparseSymMatrix> {
    let verts = mesh.vertices();
    let mut trips = Vec::with_capacity(mesh.num_tets() * 10);
    for tet in mesh.tets() {
        let vol = vec3::tet_volume(verts[tet[0]], verts[tet[1]], verts[tet[2]], verts[tet[3]]);
        for i in 0..4 {
            for j in i..4 {
                trips.push(Triplet {
                    row: tet[i].min(tet[j]),
                    col: tet[i].max(tet[j]),
                    val: if i == j { vol / 10.0 } else { vol / 20.0 },
                });
            }
        }
    }
    SparseSymMatrix::from_triplets(mesh.num_vertices(), trips)
}

/// Lumped volume mass: m_i = integral a_i dV = sum of V/4 over incident
/// tets. Equals the row sums of [`assemble_volume_mass`]; used as the
/// zero-mean gauge functional in pure-Neumann solves.
pub fn lumped_volume_mass(mesh: &TetMesh) -> Vec<f64> {
    let verts = mesh.vertices();
    let mut m = vec![0.0; mesh.num_vertices()];
    for tet in mesh.tets() {
        let share =
            vec3::tet_volume(verts[tet[0]], verts[tet[1]], verts[tet[2]], verts[tet[3]]) / 4.0;
        for &v in tet {
            m[v] += share;
        }
    }
    m
}

/// Surface (Laplace-Beltrami) stiffness A_core (M x M), unscaled:
/// A_ij = integral over the control surface of grad_S b_i . grad_S b_j.
/// Cotangent weights; exact for P1 on flat triangles.
pub fn assemble_surface_stiffness(
    mesh: &TetMesh,
    surf: &SurfaceExtraction,
) -> Result<SparseSymMatrix> {
    let m = surf.num_nodes();
    let mut trips = Vec::with_capacity(surf.num_triangles() * 6);
    for t in 0..surf.num_triangles() {
        let tri = surf.triangles()[t];
        let p = [
            surf.position(mesh, tri[0]),
            surf.position(mesh, tri[1]),
            surf.position(mesh, tri[2]),
        ];
        for k in 0..3 {
            let (i, j) = ((k + 1) % 3, (k + 2) % 3);
            let u = vec3::sub(p[i], p[k]);
            let v = vec3::sub(p[j], p[k]);
            let cross_norm = vec3::norm(vec3::cross(u, v));
            if cross_norm == 0.0 {
                return Err(Error::Validation(format!(
                    "degenerate control-surface triangle {t}"
                )));
            }
            let w = 0.5 * vec3::dot(u, v) / cross_norm;
            let (a, b) = (tri[i], tri[j]);
            trips.push(Triplet {
                row: a.min(b),
                col: a.max(b),
                val: -w,
            });
            trips.push(Triplet { row: a, col: a, val: w });
            trips.push(Triplet { row: b, col: b, val: w });
        }
    }
    SparseSymMatrix::from_triplets(m, trips)
}

/// Exact P1 mass element on a triangle: area / 12 * [[2,1,1],[1,2,1],[1,1,2]].
const MASS_COEF: [[f64; 3]; 3] = [[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]];

/// Control-surface mass M_f (M x M): M_ij = integral b_i b_j dS.
pub fn assemble_surface_mass(mesh: &TetMesh, surf: &SurfaceExtraction) -> Result<SparseSymMatrix> {
    let m = surf.num_nodes();
    let mut trips = Vec::with_capacity(surf.num_triangles() * 6);
    for t in 0..surf.num_triangles() {
        let tri = surf.triangles()[t];
        let area = surf.triangle_area(mesh, t);
        for i in 0..3 {
            for j in i..3 {
                trips.push(Triplet {
                    row: tri[i].min(tri[j]),
                    col: tri[i].max(tri[j]),
                    val: area / 12.0 * MASS_COEF[i][j],
                });
            }
        }
    }
    SparseSymMatrix::from_triplets(m, trips)
}

/// Surface-to-volume mass coupling B (M x N): B_ij = integral over the
/// control surface of b_i a_j dS. Only volume basis functions of the three
/// face nodes are nonzero on a face, so each triangle contributes the same
/// 3 x 3 exact mass block, with columns in volume indexing.
pub fn assemble_surface_mass_coupling(
    mesh: &TetMesh,
    surf: &SurfaceExtraction,
) -> Result<SparseRectMatrix> {
    let m = surf.num_nodes();
    let n = mesh.num_vertices();
    let mut trips = Vec::with_capacity(surf.num_triangles() * 9);
    for t in 0..surf.num_triangles() {
        let tri = surf.triangles()[t];
        let area = surf.triangle_area(mesh, t);
        for i in 0..3 {
            for j in 0..3 {
                trips.push(Triplet {
                    row: tri[i],
                    col: surf.vol_node(tri[j]),
                    val: area / 12.0 * MASS_COEF[i][j],
                });
            }
        }
    }
    SparseRectMatrix::from_triplets(m, n, trips)
}

/// Locate each electrode and build the observation matrix Q (K x N): row i
/// holds the P1 barycentric weights of electrode i in its host tet
/// (nonnegative, summing to 1), or a single 1 if the electrode snaps to a
/// mesh node within [`ELECTRODE_SNAP_REL`] of the domain diameter.
pub fn assemble_observation(mesh: &TetMesh, electrodes: &ElectrodeSet) -> Result<SparseRectMatrix> {
    let n = mesh.num_vertices();
    let verts = mesh.vertices();
    let snap_tol = ELECTRODE_SNAP_REL * mesh.domain_diameter();

    // Centroid/radius prefilter to keep the scan near-linear.
    let bounds: Vec<(Point3, f64)> = mesh
        .tets()
        .iter()
        .map(|t| {
            let c = vec3::scale(
                [0, 1, 2, 3]
                    .iter()
                    .fold([0.0; 3], |acc, &k| vec3::add(acc, verts[t[k]])),
                0.25,
            );
            let r = t.iter().map(|&v| vec3::dist(c, verts[v])).fold(0.0, f64::max);
            (c, r)
        })
        .collect();

    let mut trips = Vec::with_capacity(electrodes.len() * 4);
    for (e, &p) in electrodes.positions().iter().enumerate() {
        let mut best: Option<(f64, usize, [f64; 4])> = None;
        for (t, tet) in mesh.tets().iter().enumerate() {
            let (c, r) = bounds[t];
            if vec3::dist(p, c) > r + snap_tol {
                continue;
            }
            if let Some(w) = barycentric(verts, tet, p) {
                let min_w = w.iter().cloned().fold(f64::INFINITY, f64::min);
                if best.map_or(true, |(bw, _, _)| min_w > bw) {
                    best = Some((min_w, t, w));
                }
                if min_w >= 0.0 {
                    break;
                }
            }
        }
        match best {
            Some((min_w, t, w)) if min_w >= -1e-10 => {
                let tet = mesh.tets()[t];
                let mut wc = w.map(|x| x.max(0.0));
                let sum: f64 = wc.iter().sum();
                for x in &mut wc {
                    *x /= sum;
                }
                for k in 0..4 {
                    if wc[k] != 0.0 {
                        trips.push(Triplet {
                            row: e,
                            col: tet[k],
                            val: wc[k],
                        });
                    }
                }
            }
            _ => {
                // Node snap fallback.
                let (node, dist) = verts
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i, vec3::dist(*v, p)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("mesh has vertices");
                if dist <= snap_tol {
                    trips.push(Triplet {
                        row: e,
                        col: node,
                        val: 1.0,
                    });
                } else {
                    return Err(Error::ElectrodeLocation {
                        index: e,
                        x: p[0],
                        y: p[1],
                        z: p[2],
                        reason: format!(
                            "lies in no tet (nearest node is {dist:.3e} away, snap tolerance {snap_tol:.3e})"
                        ),
                    });
                }
            }
        }
    }
    SparseRectMatrix::from_triplets(electrodes.len(), n, trips)
}

/// Barycentric coordinates of p in the tet, or None if the tet is unusable.
fn barycentric(verts: &[Point3], tet: &[usize; 4], p: Point3) -> Option<[f64; 4]> {
    let v0 = verts[tet[0]];
    let cols = [
        vec3::sub(verts[tet[1]], v0),
        vec3::sub(verts[tet[2]], v0),
        vec3::sub(verts[tet[3]], v0),
    ];
    let rhs = vec3::sub(p, v0);
    let det = vec3::dot(cols[0], vec3::cross(cols[1], cols[2]));
    if det == 0.0 {
        return None;
    }
    let w1 = vec3::dot(rhs, vec3::cross(cols[1], cols[2])) / det;
    let w2 = vec3::dot(cols[0], vec3::cross(rhs, cols[2])) / det;
    let w3 = vec3::dot(cols[0], vec3::cross(cols[1], rhs)) / det;
    Some([1.0 - w1 - w2 - w3, w1, w2, w3])
}

/// Radially project points onto the tagged boundary of a star-shaped mesh
/// (the explicit electrode-placement step for faceted shells: a point on the
/// ideal sphere is moved along its ray from the origin onto the actual
/// boundary facet).
pub fn project_radially_to_boundary(
    mesh: &TetMesh,
    tag: BoundaryTag,
    points: &[Point3],
) -> Result<Vec<Point3>> {
    let verts = mesh.vertices();
    let mut out = Vec::with_capacity(points.len());
    for (e, &p) in points.iter().enumerate() {
        let dir = vec3::normalize(p);
        let mut best: Option<(f64, Point3)> = None;
        for f in mesh.boundary_faces().iter().filter(|f| f.tag == tag) {
            let (a, b, c) = (verts[f.nodes[0]], verts[f.nodes[1]], verts[f.nodes[2]]);
            let n = vec3::cross(vec3::sub(b, a), vec3::sub(c, a));
            let denom = vec3::dot(n, dir);
            if denom.abs() < 1e-300 {
                continue;
            }
            let t = vec3::dot(n, a) / denom;
            if t <= 0.0 {
                continue;
            }
            let hit = vec3::scale(dir, t);
            // In-triangle test via barycentric areas against a small
            // relative slack.
            let area = 0.5 * vec3::norm(n);
            let wa = vec3::dot(n, vec3::cross(vec3::sub(b, hit), vec3::sub(c, hit))) / (2.0 * area);
            let wb = vec3::dot(n, vec3::cross(vec3::sub(c, hit), vec3::sub(a, hit))) / (2.0 * area);
            let wc = vec3::dot(n, vec3::cross(vec3::sub(a, hit), vec3::sub(b, hit))) / (2.0 * area);
            let min_w = wa.min(wb).min(wc) / vec3::norm(n);
            if best.map_or(true, |(bw, _)| min_w > bw) {
                best = Some((min_w, hit));
            }
        }
        match best {
            Some((min_w, hit)) if min_w >= -1e-9 => out.push(hit),
            _ => {
                return Err(Error::ElectrodeLocation {
                    index: e,
                    x: p[0],
                    y: p[1],
                    z: p[2],
                    reason: format!("ray from origin misses every {} face", tag.name()),
                })
            }
        }
    }
    Ok(out)
}

/// Data normal blocks: G = Q^T W^2 Q (N x N, PSD, rank <= K) and
/// r = Q^T W^2 d.
pub fn assemble_data_blocks(
    q: &SparseRectMatrix,
    electrodes: &ElectrodeSet,
    d: &[f64],
) -> Result<(SparseSymMatrix, Vec<f64>)> {
    let k = electrodes.len();
    if q.nrows() != k {
        return Err(Error::Usage(format!(
            "observation matrix has {} rows for {k} electrodes",
            q.nrows()
        )));
    }
    if d.len() != k {
        return Err(Error::Usage(format!("{} data values for {k} electrodes", d.len())));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Usage("data vector contains non-finite values".into()));
    }
    let n = q.ncols();
    let w = electrodes.weights();

    let mut g_trips = Vec::new();
    let mut r = vec![0.0; n];
    let entries = q.entries();
    let mut start = 0;
    while start < entries.len() {
        let row = entries[start].row;
        let mut end = start;
        while end < entries.len() && entries[end].row == row {
            end += 1;
        }
        let w2 = w[row] * w[row];
        for i in start..end {
            r[entries[i].col] += w2 * d[row] * entries[i].val;
            for j in start..end {
                if entries[i].col <= entries[j].col {
                    g_trips.push(Triplet {
                        row: entries[i].col,
                        col: entries[j].col,
                        val: w2 * entries[i].val * entries[j].val,
                    });
                }
            }
        }
        start = end;
    }
    Ok((SparseSymMatrix::from_triplets(n, g_trips)?, r))
}

/// Lumped control-surface areas: entry i is the area share of surface node
/// i (one third of its incident triangle areas), equal to B applied to the
/// all-ones volume vector.
pub fn lumped_surface_areas(mesh: &TetMesh, surf: &SurfaceExtraction) -> Vec<f64> {
    let mut a = vec![0.0; surf.num_nodes()];
    for t in 0..surf.num_triangles() {
        let share = surf.triangle_area(mesh, t) / 3.0;
        for &v in &surf.triangles()[t] {
            a[v] += share;
        }
    }
    a
}
