//! Extraction of the tagged control surface from a volume mesh.

use super::{BoundaryTag, TetMesh};
use crate::error::{Error, Result};
use crate::vec3::{self, Point3};

/// The control surface as its own indexed triangle mesh.
///
/// Surface node `i` is volume node `surf_to_vol[i]`; triangles keep the
/// stored boundary orientation (outward w.r.t. the volume).
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceExtraction {
    surf_to_vol: Vec<usize>,
    triangles: Vec<[usize; 3]>,
}

impl SurfaceExtraction {
    pub fn num_nodes(&self) -> usize {
        self.surf_to_vol.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Sorted, injective map from surface node index to volume node index.
    pub fn surf_to_vol(&self) -> &[usize] {
        &self.surf_to_vol
    }

    /// Triangles in surface indexing.
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Volume index of surface node `i`.
    pub fn vol_node(&self, i: usize) -> usize {
        self.surf_to_vol[i]
    }

    /// Surface index of a volume node, if it lies on the surface.
    pub fn surf_index(&self, vol: usize) -> Option<usize> {
        self.surf_to_vol.binary_search(&vol).ok()
    }

    /// Coordinates of surface node `i`.
    pub fn position(&self, mesh: &TetMesh, i: usize) -> Point3 {
        mesh.vertices()[self.surf_to_vol[i]]
    }

    pub fn triangle_area(&self, mesh: &TetMesh, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        vec3::tri_area(
            self.position(mesh, a),
            self.position(mesh, b),
            self.position(mesh, c),
        )
    }

    pub fn total_area(&self, mesh: &TetMesh) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_area(mesh, t))
            .sum()
    }

    /// Signed volume enclosed by the surface w.r.t. the origin
    /// (`sum of det(a, b, c) / 6`); the sign encodes the stored orientation.
    pub fn signed_volume(&self, mesh: &TetMesh) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| {
                let pa = self.position(mesh, a);
                let pb = self.position(mesh, b);
                let pc = self.position(mesh, c);
                vec3::dot(pa, vec3::cross(pb, pc)) / 6.0
            })
            .sum()
    }
}

/// Collect all CORTEX-tagged faces into a standalone surface mesh.
pub fn extract_cortex(mesh: &TetMesh) -> Result<SurfaceExtraction> {
    extract_tagged(mesh, BoundaryTag::Cortex)
}

pub fn extract_tagged(mesh: &TetMesh, tag: BoundaryTag) -> Result<SurfaceExtraction> {
    let mut vol_nodes: Vec<usize> = mesh
        .boundary_faces()
        .iter()
        .filter(|f| f.tag == tag)
        .flat_map(|f| f.nodes)
        .collect();
    vol_nodes.sort_unstable();
    vol_nodes.dedup();
    if vol_nodes.is_empty() {
        return Err(Error::Validation(format!(
            "mesh has no {} faces to extract",
            tag.name()
        )));
    }
    let triangles = mesh
        .boundary_faces()
        .iter()
        .filter(|f| f.tag == tag)
        .map(|f| {
            let mut t = [0usize; 3];
            for (k, &v) in f.nodes.iter().enumerate() {
                t[k] = vol_nodes.binary_search(&v).expect("node gathered above");
            }
            t
        })
        .collect();
    Ok(SurfaceExtraction {
        surf_to_vol: vol_nodes,
        triangles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_shell_mesh;
    use std::collections::BTreeSet;

    #[test]
    fn cortex_extraction_counts_match_tags() {
        let mesh = build_shell_mesh(0.7, 1.0, 1).unwrap();
        let surf = extract_cortex(&mesh).unwrap();
        let tagged = mesh
            .boundary_faces()
            .iter()
            .filter(|f| f.tag == BoundaryTag::Cortex)
            .count();
        assert_eq!(surf.num_triangles(), tagged);
    }

    #[test]
    fn extraction_is_closed_sphere() {
        // V - E + F = 2 for a topological sphere.
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let surf = extract_cortex(&mesh).unwrap();
        let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &[a, b, c] in surf.triangles() {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                edges.insert((u.min(v), u.max(v)));
            }
        }
        let euler =
            surf.num_nodes() as i64 - edges.len() as i64 + surf.num_triangles() as i64;
        assert_eq!(euler, 2);
    }

    #[test]
    fn area_approximates_inner_sphere() {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let surf = extract_cortex(&mesh).unwrap();
        let exact = 4.0 * std::f64::consts::PI * 0.49;
        let rel = (surf.total_area(&mesh) - exact).abs() / exact;
        assert!(rel < 0.02, "area error {rel:.4}");

        let fine = build_shell_mesh(0.7, 1.0, 1).unwrap();
        let fine_surf = extract_cortex(&fine).unwrap();
        let fine_rel = (fine_surf.total_area(&fine) - exact).abs() / exact;
        assert!(fine_rel < rel, "area error must shrink under refinement");
    }

    #[test]
    fn orientation_gives_consistent_signed_volume() {
        // Cortex faces point outward w.r.t. the shell = toward the origin,
        // so the enclosed signed volume is minus the inner-ball volume.
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let surf = extract_cortex(&mesh).unwrap();
        let ball = 4.0 / 3.0 * std::f64::consts::PI * 0.7f64.powi(3);
        let signed = surf.signed_volume(&mesh);
        assert!(signed < 0.0, "orientation flipped");
        assert!((signed.abs() - ball).abs() / ball < 0.05);
    }

    #[test]
    fn every_surface_node_used_and_injective() {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let surf = extract_cortex(&mesh).unwrap();
        let mut used = vec![false; surf.num_nodes()];
        for t in surf.triangles() {
            for &v in t {
                used[v] = true;
            }
        }
        assert!(used.iter().all(|&u| u));
        let unique: BTreeSet<_> = surf.surf_to_vol().iter().collect();
        assert_eq!(unique.len(), surf.num_nodes());
    }
}
