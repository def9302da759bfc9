//! Tetrahedral meshes, boundary tagging, and structural validation.
//!
//! A mesh is immutable after construction: the constructor canonicalizes
//! tet orientation (positive signed volume) and checks index ranges, while
//! [`validate`] runs the full structural audit (conformity, boundary
//! coverage, tagged-surface manifoldness).

mod shell;
mod surface;

pub use shell::{build_shell_mesh, build_shell_mesh_with, ShellOptions};
pub use surface::{extract_cortex, SurfaceExtraction};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::vec3::{self, Point3};

/// Boundary role of a tagged surface triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BoundaryTag {
    /// Accessible outer boundary (homogeneous Neumann, electrodes live here).
    Scalp,
    /// Control boundary carrying the unknown current density.
    Cortex,
    /// Any other tagged boundary patch.
    Other,
}

impl BoundaryTag {
    pub fn name(self) -> &'static str {
        match self {
            BoundaryTag::Scalp => "SCALP",
            BoundaryTag::Cortex => "CORTEX",
            BoundaryTag::Other => "OTHER",
        }
    }
}

/// Oriented boundary triangle; vertex order gives the outward normal
/// (right-hand rule) with respect to the meshed domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFace {
    pub nodes: [usize; 3],
    pub tag: BoundaryTag,
}

/// Immutable tetrahedral mesh with per-tet region ids and tagged boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    vertices: Vec<Point3>,
    tets: Vec<[usize; 4]>,
    regions: Vec<i32>,
    faces: Vec<BoundaryFace>,
}

impl TetMesh {
    /// Construct a mesh, reorienting each tet to positive signed volume.
    /// Exactly degenerate tets and out-of-range indices are rejected;
    /// deeper structural checks live in [`validate`].
    pub fn new(
        vertices: Vec<Point3>,
        mut tets: Vec<[usize; 4]>,
        regions: Vec<i32>,
        faces: Vec<BoundaryFace>,
    ) -> Result<Self> {
        if regions.len() != tets.len() {
            return Err(Error::Validation(format!(
                "{} region ids for {} tets",
                regions.len(),
                tets.len()
            )));
        }
        let n = vertices.len();
        for v in &vertices {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::Validation("non-finite vertex coordinate".into()));
            }
        }
        for (i, t) in tets.iter_mut().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::Validation(format!("tet {i} references missing vertex")));
            }
            let vol = vec3::tet_volume(
                vertices[t[0]],
                vertices[t[1]],
                vertices[t[2]],
                vertices[t[3]],
            );
            if vol == 0.0 {
                return Err(Error::Validation(format!("tet {i} has zero volume")));
            }
            if vol < 0.0 {
                t.swap(2, 3);
            }
        }
        for (i, f) in faces.iter().enumerate() {
            if f.nodes.iter().any(|&v| v >= n) {
                return Err(Error::Validation(format!(
                    "boundary face {i} references missing vertex"
                )));
            }
        }
        Ok(Self {
            vertices,
            tets,
            regions,
            faces,
        })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn regions(&self) -> &[i32] {
        &self.regions
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.faces
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn tet_volume(&self, i: usize) -> f64 {
        let t = self.tets[i];
        vec3::tet_volume(
            self.vertices[t[0]],
            self.vertices[t[1]],
            self.vertices[t[2]],
            self.vertices[t[3]],
        )
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|i| self.tet_volume(i)).sum()
    }

    /// Axis-aligned bounding-box diagonal; the reference length for
    /// point-location and snapping tolerances.
    pub fn domain_diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        vec3::dist(lo, hi)
    }

    /// Longest edge over all tets.
    pub fn max_element_diameter(&self) -> f64 {
        let mut h: f64 = 0.0;
        for t in &self.tets {
            for a in 0..4 {
                for b in (a + 1)..4 {
                    h = h.max(vec3::dist(self.vertices[t[a]], self.vertices[t[b]]));
                }
            }
        }
        h
    }
}

/// Piecewise-constant conductivity, one value per region id.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityMap {
    map: BTreeMap<i32, f64>,
}

impl ConductivityMap {
    pub fn new(pairs: impl IntoIterator<Item = (i32, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (region, sigma) in pairs {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::Parameter(format!(
                    "conductivity for region {region} must be positive and finite, got {sigma}"
                )));
            }
            map.insert(region, sigma);
        }
        Ok(Self { map })
    }

    pub fn uniform(region: i32, sigma: f64) -> Result<Self> {
        Self::new([(region, sigma)])
    }

    pub fn sigma(&self, region: i32) -> Result<f64> {
        self.map.get(&region).copied().ok_or_else(|| {
            Error::Validation(format!("no conductivity assigned to region {region}"))
        })
    }

    pub fn regions(&self) -> impl Iterator<Item = (i32, f64)> + '_ {
        self.map.iter().map(|(&r, &s)| (r, s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    NonPositiveVolume,
    NearDegenerate,
    NonConforming,
    BoundaryCoverage,
    DuplicateFace,
    NonManifoldTag,
    TagOverlap,
    MissingTag,
    ZeroAreaFace,
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

/// Outcome of the structural audit; empty means the mesh is sound.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, detail: String) {
        self.violations.push(Violation { kind, detail });
    }
}

fn sorted3(f: [usize; 3]) -> [usize; 3] {
    let mut s = f;
    s.sort_unstable();
    s
}

/// Full structural audit: element volumes, face conformity, boundary
/// coverage, duplicate faces, per-tag 2-manifoldness, and tag sanity.
pub fn validate(mesh: &TetMesh) -> ValidationReport {
    let mut report = ValidationReport::default();
    let vol_scale = mesh.domain_diameter().powi(3);

    for i in 0..mesh.num_tets() {
        let v = mesh.tet_volume(i);
        if v <= 0.0 {
            report.push(
                ViolationKind::NonPositiveVolume,
                format!("tet {i} has signed volume {v:.3e}"),
            );
        } else if v < 1e-14 * vol_scale {
            report.push(
                ViolationKind::NearDegenerate,
                format!("tet {i} volume {v:.3e} below 1e-14 of domain scale"),
            );
        }
    }

    // Count tet adjacency per undirected face.
    let mut face_count: BTreeMap<[usize; 3], usize> = BTreeMap::new();
    for t in mesh.tets() {
        for f in [
            [t[0], t[1], t[2]],
            [t[0], t[1], t[3]],
            [t[0], t[2], t[3]],
            [t[1], t[2], t[3]],
        ] {
            *face_count.entry(sorted3(f)).or_insert(0) += 1;
        }
    }
    for (f, c) in &face_count {
        if *c > 2 {
            report.push(
                ViolationKind::NonConforming,
                format!("face {f:?} shared by {c} tets"),
            );
        }
    }

    // Stored boundary faces vs the topological boundary.
    let mut tagged: BTreeMap<[usize; 3], Vec<BoundaryTag>> = BTreeMap::new();
    for (i, bf) in mesh.boundary_faces().iter().enumerate() {
        let key = sorted3(bf.nodes);
        match face_count.get(&key) {
            Some(1) => {}
            Some(c) => report.push(
                ViolationKind::BoundaryCoverage,
                format!("tagged face {i} {key:?} is adjacent to {c} tets"),
            ),
            None => report.push(
                ViolationKind::BoundaryCoverage,
                format!("tagged face {i} {key:?} is not a face of any tet"),
            ),
        }
        let a = mesh.vertices()[bf.nodes[0]];
        let b = mesh.vertices()[bf.nodes[1]];
        let c = mesh.vertices()[bf.nodes[2]];
        if vec3::tri_area(a, b, c) < 1e-14 * vol_scale.cbrt().powi(2) {
            report.push(
                ViolationKind::ZeroAreaFace,
                format!("tagged face {i} {key:?} has (near-)zero area"),
            );
        }
        tagged.entry(key).or_default().push(bf.tag);
    }
    for (key, tags) in &tagged {
        if tags.len() > 1 {
            let kind = if tags.windows(2).all(|w| w[0] == w[1]) {
                ViolationKind::DuplicateFace
            } else {
                ViolationKind::TagOverlap
            };
            report.push(kind, format!("face {key:?} listed {} times", tags.len()));
        }
    }
    for (f, c) in &face_count {
        if *c == 1 && !tagged.contains_key(f) {
            report.push(
                ViolationKind::MissingTag,
                format!("boundary face {f:?} carries no tag"),
            );
        }
    }

    // The tagged faces together must form a closed 2-manifold (every edge
    // bounds exactly two faces); within one tag an edge may additionally sit
    // on the patch rim (one face) but never more than two.
    let mut union_edges: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut tag_edges: BTreeMap<(BoundaryTag, (usize, usize)), usize> = BTreeMap::new();
    for bf in mesh.boundary_faces() {
        let [a, b, c] = bf.nodes;
        for (u, v) in [(a, b), (b, c), (c, a)] {
            let key = (u.min(v), u.max(v));
            *union_edges.entry(key).or_insert(0) += 1;
            *tag_edges.entry((bf.tag, key)).or_insert(0) += 1;
        }
    }
    for (e, c) in union_edges {
        if c != 2 {
            report.push(
                ViolationKind::NonManifoldTag,
                format!("boundary edge {e:?} bounds {c} faces"),
            );
        }
    }
    for ((tag, e), c) in tag_edges {
        if c > 2 {
            report.push(
                ViolationKind::NonManifoldTag,
                format!("{} edge {e:?} bounds {c} faces of that tag", tag.name()),
            );
        }
    }

    report
}
