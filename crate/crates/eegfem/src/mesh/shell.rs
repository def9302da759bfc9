//! Deterministic concentric-shell mesh generator.
//!
//! The unit sphere is triangulated by midpoint subdivision of an octahedron
//! (level 0 already carries [`ShellOptions::base_subdivisions`] rounds so a
//! coarse shell is still a usable sphere approximation). Nodes are replicated
//! on radial layers between the two shell radii; each surface triangle and
//! layer interval forms a prism split into three tets. Diagonals on the prism
//! quads are chosen by global vertex index, which makes neighboring prisms
//! agree and the mesh conforming. Refinement halves both the surface chord
//! and the radial spacing, and coarser-level nodes are an exact subset of
//! finer-level nodes.

use std::collections::BTreeMap;

use super::{BoundaryFace, BoundaryTag, TetMesh};
use crate::error::{Error, Result};
use crate::vec3::{self, Point3};

#[derive(Debug, Clone)]
pub struct ShellOptions {
    /// Octahedron subdivision rounds applied at refinement level 0.
    pub base_subdivisions: u32,
    /// Radial layer count override; `None` picks a near-unit aspect ratio.
    pub radial_layers: Option<usize>,
    /// Hard cap on generated tets; exceeding it is a resource error.
    pub tet_budget: usize,
}

impl Default for ShellOptions {
    fn default() -> Self {
        Self {
            base_subdivisions: 3,
            radial_layers: None,
            tet_budget: 2_000_000,
        }
    }
}

/// Triangulated unit sphere: subdivided octahedron with vertices projected
/// onto the sphere. Triangles are counterclockwise seen from outside.
pub(crate) struct UnitSphere {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
}

pub(crate) fn unit_sphere(subdivisions: u32) -> UnitSphere {
    let mut vertices: Vec<Point3> = vec![
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    // One face per octant, outward-oriented.
    let (px, nx, py, ny, pz, nz) = (0, 1, 2, 3, 4, 5);
    let mut triangles: Vec<[usize; 3]> = vec![
        [px, py, pz],
        [py, nx, pz],
        [nx, ny, pz],
        [ny, px, pz],
        [py, px, nz],
        [nx, py, nz],
        [ny, nx, nz],
        [px, ny, nz],
    ];

    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Point3>| -> usize {
            let key = (a.min(b), a.max(b));
            if let Some(&m) = midpoint.get(&key) {
                return m;
            }
            let p = vec3::normalize(vec3::scale(vec3::add(vertices[a], vertices[b]), 0.5));
            vertices.push(p);
            let m = vertices.len() - 1;
            midpoint.insert(key, m);
            m
        };
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for [a, b, c] in triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.push([a, ab, ca]);
            next.push([ab, b, bc]);
            next.push([ca, bc, c]);
            next.push([ab, bc, ca]);
        }
        triangles = next;
    }

    UnitSphere {
        vertices,
        triangles,
    }
}

/// Chord length of one triangulation edge of the subdivided octahedron on
/// the unit sphere (octahedron edges span an arc of pi/2).
fn unit_chord(subdivisions: u32) -> f64 {
    let arc = std::f64::consts::FRAC_PI_2 / f64::powi(2.0, subdivisions as i32);
    2.0 * (arc / 2.0).sin()
}

/// Shell mesh with default options; see [`build_shell_mesh_with`].
pub fn build_shell_mesh(r_inner: f64, r_outer: f64, refinement_level: u32) -> Result<TetMesh> {
    build_shell_mesh_with(r_inner, r_outer, refinement_level, &ShellOptions::default())
}

/// Mesh the shell `r_inner <= |x| <= r_outer` at the given refinement level.
///
/// The inner boundary is tagged CORTEX, the outer SCALP, and all tets carry
/// region id 0. Identical arguments always produce a bit-identical mesh.
pub fn build_shell_mesh_with(
    r_inner: f64,
    r_outer: f64,
    refinement_level: u32,
    options: &ShellOptions,
) -> Result<TetMesh> {
    if !(r_inner.is_finite() && r_outer.is_finite()) || r_inner <= 0.0 || r_inner >= r_outer {
        return Err(Error::Parameter(format!(
            "shell radii must satisfy 0 < r_inner < r_outer, got ({r_inner}, {r_outer})"
        )));
    }
    if refinement_level > 16 {
        return Err(Error::Resource(format!(
            "refinement level {refinement_level} is out of range"
        )));
    }

    let subdivisions = options.base_subdivisions + refinement_level;
    let faces_at_level = 8usize
        .checked_mul(1usize << (2 * subdivisions as usize))
        .ok_or_else(|| Error::Resource("surface triangle count overflows".into()))?;

    // Radial layer count: match the base-level chord at the mid radius, then
    // double per level so refinement halves spacing exactly and layer radii
    // nest across levels.
    let n_r = match options.radial_layers {
        Some(n) => {
            if n == 0 {
                return Err(Error::Parameter("radial_layers must be >= 1".into()));
            }
            n
        }
        None => {
            let r_mid = 0.5 * (r_inner + r_outer);
            let base_edge = unit_chord(options.base_subdivisions) * r_mid;
            let base_layers = ((r_outer - r_inner) / base_edge).round().max(1.0) as usize;
            base_layers << refinement_level
        }
    };

    let num_tets = 3 * faces_at_level * n_r;
    if num_tets > options.tet_budget {
        return Err(Error::Resource(format!(
            "level {refinement_level} shell needs {num_tets} tets, budget is {}",
            options.tet_budget
        )));
    }

    let sphere = unit_sphere(subdivisions);
    let vs = sphere.vertices.len();

    let mut vertices = Vec::with_capacity(vs * (n_r + 1));
    for layer in 0..=n_r {
        let r = r_inner + (r_outer - r_inner) * layer as f64 / n_r as f64;
        for s in &sphere.vertices {
            vertices.push(vec3::scale(*s, r));
        }
    }

    let mut tets = Vec::with_capacity(num_tets);
    for layer in 0..n_r {
        let base = layer * vs;
        for tri in &sphere.triangles {
            // Rotate so the smallest surface index leads; the bottom vertex
            // of a column always has the smaller global index.
            let rot = if tri[0] < tri[1] && tri[0] < tri[2] {
                [tri[0], tri[1], tri[2]]
            } else if tri[1] < tri[2] {
                [tri[1], tri[2], tri[0]]
            } else {
                [tri[2], tri[0], tri[1]]
            };
            let (v0, v1, v2) = (base + rot[0], base + rot[1], base + rot[2]);
            let (v3, v4, v5) = (v0 + vs, v1 + vs, v2 + vs);
            // Diagonal on the quad opposite v0 runs from its smallest global
            // index; both prisms sharing a quad see the same choice.
            if v1 < v2 {
                tets.push([v0, v1, v2, v5]);
                tets.push([v0, v1, v5, v4]);
                tets.push([v0, v4, v5, v3]);
            } else {
                tets.push([v0, v1, v2, v4]);
                tets.push([v0, v4, v2, v5]);
                tets.push([v0, v4, v5, v3]);
            }
        }
    }

    let mut faces = Vec::with_capacity(2 * faces_at_level);
    let top = n_r * vs;
    for tri in &sphere.triangles {
        // Inner sphere: outward (w.r.t. the shell) points toward the origin,
        // so the sphere orientation is reversed.
        faces.push(BoundaryFace {
            nodes: [tri[0], tri[2], tri[1]],
            tag: BoundaryTag::Cortex,
        });
        faces.push(BoundaryFace {
            nodes: [top + tri[0], top + tri[1], top + tri[2]],
            tag: BoundaryTag::Scalp,
        });
    }

    let regions = vec![0; tets.len()];
    TetMesh::new(vertices, tets, regions, faces)
}
