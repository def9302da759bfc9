//! The two saddle-point systems built from the assembled blocks: the
//! optimal-control KKT system for reconstruction from pointwise electrode
//! data, and the stabilized mixed quasi-reversibility baseline that takes a
//! full scalp Dirichlet trace instead.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, ConductivityMap, TetMesh};
use crate::solver::{
    minres, BlockDiagPrecond, DirectSolver, MinresOptions, SolveReport,
};
use crate::sparse::{self, SparseRectMatrix, SparseSymMatrix, Triplet};

/// Which linear solver backs a saddle-point solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SolverChoice {
    Direct,
    Iterative(MinresOptionsSer),
}

/// Serializable mirror of the MINRES options (kept flat for manifests).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinresOptionsSer {
    pub rel_tol: f64,
    pub max_iters: usize,
}

impl From<MinresOptionsSer> for MinresOptions {
    fn from(o: MinresOptionsSer) -> Self {
        Self {
            rel_tol: o.rel_tol,
            max_iters: o.max_iters,
        }
    }
}

impl SolverChoice {
    pub fn iterative_default() -> Self {
        Self::Iterative(MinresOptionsSer {
            rel_tol: 1e-12,
            max_iters: 50_000,
        })
    }
}

/// Default mass shift removing the constant mode of the control block.
pub fn default_gamma(a_core: &SparseSymMatrix) -> f64 {
    1e-12 * a_core.trace() / a_core.dim() as f64
}

/// The KKT system in the unknown ordering (f, lambda, u):
///
/// ```text
/// [ A    -B    0 ] [ f ]   [ 0 ]
/// [-B^T   0    E ] [ l ] = [ 0 ]     A = eps A_core + gamma M_f
/// [ 0     E    G ] [ u ]   [ r ]
/// ```
///
/// with B stored M x N (control surface rows against volume columns).
/// Symmetric indefinite, dimension M + 2N.
pub struct KKTSystem {
    m: usize,
    n: usize,
    epsilon: f64,
    gamma: f64,
    a: SparseSymMatrix,
    b: SparseRectMatrix,
    e: SparseSymMatrix,
    g: SparseSymMatrix,
    r: Vec<f64>,
    matrix: SparseSymMatrix,
}

/// Assemble the KKT system. `a_core` is the unscaled control-surface
/// stiffness, `m_f` the control-surface mass used for the gamma shift.
#[allow(clippy::too_many_arguments)]
pub fn build_kkt(
    a_core: &SparseSymMatrix,
    m_f: &SparseSymMatrix,
    b: SparseRectMatrix,
    e: SparseSymMatrix,
    g: SparseSymMatrix,
    r: Vec<f64>,
    epsilon: f64,
    gamma: f64,
) -> Result<KKTSystem> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Parameter(format!(
            "regularization weight must be positive, got {epsilon}"
        )));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::Parameter(format!(
            "mass shift must be nonnegative, got {gamma}"
        )));
    }
    let m = a_core.dim();
    let n = e.dim();
    if m == 0 {
        return Err(Error::Parameter("control space is empty (M = 0)".into()));
    }
    if n == 0 {
        return Err(Error::Parameter("state space is empty (N = 0)".into()));
    }
    if m_f.dim() != m || b.nrows() != m {
        return Err(Error::Parameter(format!(
            "control-block dimensions disagree: A_core {m}, M_f {}, B rows {}",
            m_f.dim(),
            b.nrows()
        )));
    }
    if b.ncols() != n || g.dim() != n || r.len() != n {
        return Err(Error::Parameter(format!(
            "state-block dimensions disagree: E {n}, G {}, B cols {}, r {}",
            g.dim(),
            b.ncols(),
            r.len()
        )));
    }

    let a = SparseSymMatrix::lin_comb(epsilon, a_core, gamma, m_f)?;

    let dim = m + 2 * n;
    let mut trips =
        Vec::with_capacity(a.nnz_upper() + b.nnz() + 2 * e.nnz_upper() + g.nnz_upper());
    for t in a.entries() {
        trips.push(*t);
    }
    for t in b.entries() {
        // (f, lambda) block: -B
        trips.push(Triplet {
            row: t.row,
            col: m + t.col,
            val: -t.val,
        });
    }
    for t in e.entries() {
        // (lambda, u) block: full E (both triangles land above the diagonal)
        trips.push(Triplet {
            row: m + t.row,
            col: m + n + t.col,
            val: t.val,
        });
        if t.row != t.col {
            trips.push(Triplet {
                row: m + t.col,
                col: m + n + t.row,
                val: t.val,
            });
        }
    }
    for t in g.entries() {
        trips.push(Triplet {
            row: m + n + t.row,
            col: m + n + t.col,
            val: t.val,
        });
    }
    let matrix = SparseSymMatrix::from_triplets(dim, trips)?;

    Ok(KKTSystem {
        m,
        n,
        epsilon,
        gamma,
        a,
        b,
        e,
        g,
        r,
        matrix,
    })
}

impl KKTSystem {
    pub fn num_controls(&self) -> usize {
        self.m
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.m + 2 * self.n
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// The control block A = eps A_core + gamma M_f.
    pub fn a(&self) -> &SparseSymMatrix {
        &self.a
    }

    pub fn b(&self) -> &SparseRectMatrix {
        &self.b
    }

    pub fn e(&self) -> &SparseSymMatrix {
        &self.e
    }

    pub fn g(&self) -> &SparseSymMatrix {
        &self.g
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn matrix(&self) -> &SparseSymMatrix {
        &self.matrix
    }

    pub fn rhs(&self) -> Vec<f64> {
        let mut rhs = vec![0.0; self.dim()];
        rhs[self.m + self.n..].copy_from_slice(&self.r);
        rhs
    }

    pub fn solve(&self, tol: f64, choice: SolverChoice) -> Result<(Vec<f64>, SolveReport)> {
        if !(tol > 0.0) {
            return Err(Error::Parameter(format!("solve tolerance must be positive, got {tol}")));
        }
        let rhs = self.rhs();
        match choice {
            SolverChoice::Direct => {
                let mut solver = DirectSolver::factor_signed(&self.matrix, Some(&self.inertia_signs()))?;
                solver.solve(&rhs, tol)
            }
            SolverChoice::Iterative(opts) => {
                let start = std::time::Instant::now();
                let precond = self.block_preconditioner()?;
                let (xi, iterations, rel) =
                    minres(&self.matrix, &precond, &rhs, opts.into())?;
                if rel > tol {
                    return Err(Error::Convergence(format!(
                        "iterative solve reached relative residual {rel:.3e} after \
                         {iterations} iterations, above the requested {tol:.3e}"
                    )));
                }
                Ok((
                    xi,
                    SolveReport {
                        method: "minres".into(),
                        dim: self.dim(),
                        iterations,
                        rel_residual: rel,
                        wall_time_s: start.elapsed().as_secs_f64(),
                        reused_symbolic: false,
                    },
                ))
            }
        }
    }

    /// Expected inertia signs for pivot regularization: the control and
    /// state unknowns are primal-like (+1), the multiplier dual-like (-1).
    pub fn inertia_signs(&self) -> Vec<i8> {
        let mut s = vec![1i8; self.dim()];
        for v in &mut s[self.m..self.m + self.n] {
            *v = -1;
        }
        s
    }

    /// Block-diagonal SPD preconditioner: approximate A on the control
    /// block, the diagonal of E on the multiplier block, E + G on the state
    /// block.
    pub fn block_preconditioner(&self) -> Result<BlockDiagPrecond> {
        // The control block may be nearly singular at tiny gamma; lift it by
        // a relative mass-like shift (preconditioner quality only).
        let lift = 1e-8 * self.a.trace().max(f64::MIN_POSITIVE) / self.m as f64;
        let mut a_trips: Vec<Triplet> = self.a.entries().to_vec();
        for i in 0..self.m {
            a_trips.push(Triplet {
                row: i,
                col: i,
                val: lift,
            });
        }
        let p_f = SparseSymMatrix::from_triplets(self.m, a_trips)?;

        let e_diag = self.e.diag();
        let p_l = SparseSymMatrix::from_triplets(
            self.n,
            (0..self.n)
                .map(|i| Triplet {
                    row: i,
                    col: i,
                    val: e_diag[i].max(f64::MIN_POSITIVE),
                })
                .collect(),
        )?;

        let p_u = SparseSymMatrix::lin_comb(1.0, &self.e, 1.0, &self.g)?;
        BlockDiagPrecond::new(&[&p_f, &p_l, &p_u])
    }

    /// Split a stacked solution vector into (f, lambda, u).
    pub fn split_solution(&self, xi: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if xi.len() != self.dim() {
            return Err(Error::Usage(format!(
                "solution length {} does not match system dimension {}",
                xi.len(),
                self.dim()
            )));
        }
        let f = xi[..self.m].to_vec();
        let l = xi[self.m..self.m + self.n].to_vec();
        let u = xi[self.m + self.n..].to_vec();
        Ok((f, l, u))
    }

    /// Relative residuals of the three variational equations at a triple
    /// (f, lambda, u): control stationarity A f - B lambda = 0, the state
    /// equation -B^T f + E u = 0, and the adjoint equation
    /// E lambda + G u = r.
    ///
    /// Each equation is scaled the Oettli-Prager way, by the norm of the
    /// entrywise-absolute products |A||f| + |B||lambda| etc. With small
    /// epsilon the signed terms A f and B lambda cancel almost exactly, so
    /// dividing by their norms would demand more accuracy than f64 can
    /// represent; the backward-error scale stays meaningful there.
    pub fn variational_residuals(&self, f: &[f64], lambda: &[f64], u: &[f64]) -> [f64; 3] {
        let af = self.a.mul_vec(f);
        let bl = self.b.mul_vec(lambda);
        let s1 = add_norms(&self.a.mul_abs_vec(f), &self.b.mul_abs_vec(lambda));
        let r1 = rel_block(
            &af.iter().zip(&bl).map(|(a, b)| a - b).collect::<Vec<_>>(),
            s1,
        );

        let btf = self.b.mul_transpose_vec(f);
        let eu = self.e.mul_vec(u);
        let s2 = add_norms(&self.b.mul_abs_transpose_vec(f), &self.e.mul_abs_vec(u));
        let r2 = rel_block(
            &btf.iter().zip(&eu).map(|(b, e)| e - b).collect::<Vec<_>>(),
            s2,
        );

        let el = self.e.mul_vec(lambda);
        let gu = self.g.mul_vec(u);
        let s3 = add_norms(&self.e.mul_abs_vec(lambda), &self.g.mul_abs_vec(u))
            + sparse::norm2(&self.r);
        let r3 = rel_block(
            &el.iter()
                .zip(&gu)
                .zip(&self.r)
                .map(|((a, b), c)| a + b - c)
                .collect::<Vec<_>>(),
            s3,
        );
        [r1, r2, r3]
    }

    /// Write the assembled matrix in symmetric coordinate format: a header
    /// `nrows ncols nnz`, then one `row col value` line per stored
    /// upper-triangle entry, 1-based.
    pub fn write_matrix<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_symmetric_coordinate(&self.matrix, w)
    }
}

fn rel_block(res: &[f64], scale: f64) -> f64 {
    let num = sparse::norm2(res);
    if num == 0.0 {
        0.0
    } else {
        num / scale.max(f64::MIN_POSITIVE)
    }
}

fn add_norms(a: &[f64], b: &[f64]) -> f64 {
    sparse::norm2(a) + sparse::norm2(b)
}

/// Symmetric coordinate-format export (upper triangle, 1-based indices).
pub fn write_symmetric_coordinate<W: std::io::Write>(
    mat: &SparseSymMatrix,
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(w, "{} {} {}", mat.dim(), mat.dim(), mat.nnz_upper())?;
    for t in mat.entries() {
        writeln!(w, "{} {} {:.17e}", t.row + 1, t.col + 1, t.val)?;
    }
    Ok(())
}

/// The stabilized mixed quasi-reversibility system over free (u, lambda)
/// unknowns, with u = g_D on the scalp and lambda = 0 on the control surface
/// eliminated strongly:
///
/// ```text
/// [ eps K_vv   E_vq     ] [u_free]   [-eps K_vD g_D]
/// [ E_qv      -delta K_qq] [l_free] = [-E_qD g_D    ]
/// ```
///
/// K is the unweighted stiffness, E the conductivity-weighted one.
pub struct QRMSystem {
    epsilon: f64,
    delta: f64,
    num_nodes: usize,
    free_u: Vec<usize>,
    free_l: Vec<usize>,
    g_d: Vec<f64>,
    scalp: Vec<bool>,
    matrix: SparseSymMatrix,
    rhs: Vec<f64>,
}

pub struct QRMSolution {
    pub u: Vec<f64>,
    pub lambda: Vec<f64>,
}

pub fn build_qrm(
    mesh: &TetMesh,
    cond: &ConductivityMap,
    g_d: &[f64],
    epsilon: f64,
    delta: f64,
) -> Result<QRMSystem> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Parameter(format!(
            "regularization weight must be positive, got {epsilon}"
        )));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Parameter(format!(
            "stabilization weight must be positive, got {delta} \
             (the unstabilized system is ill-posed)"
        )));
    }
    let n = mesh.num_vertices();
    if g_d.len() != n {
        return Err(Error::Usage(format!(
            "Dirichlet trace has {} entries for {n} mesh nodes",
            g_d.len()
        )));
    }

    let mut scalp = vec![false; n];
    let mut cortex = vec![false; n];
    for f in mesh.boundary_faces() {
        let flags = match f.tag {
            BoundaryTag::Scalp => &mut scalp,
            BoundaryTag::Cortex => &mut cortex,
            BoundaryTag::Other => continue,
        };
        for &v in &f.nodes {
            flags[v] = true;
        }
    }
    if !scalp.iter().any(|&s| s) || !cortex.iter().any(|&c| c) {
        return Err(Error::Validation(
            "mesh must have both scalp and cortex boundary faces".into(),
        ));
    }
    for i in 0..n {
        if scalp[i] && !g_d[i].is_finite() {
            return Err(Error::Usage(format!(
                "Dirichlet value missing (non-finite) at scalp node {i}"
            )));
        }
    }

    // u is eliminated on the scalp, lambda on the control surface.
    let mut u_slot = vec![usize::MAX; n];
    let mut l_slot = vec![usize::MAX; n];
    let mut free_u = Vec::new();
    let mut free_l = Vec::new();
    for i in 0..n {
        if !scalp[i] {
            u_slot[i] = free_u.len();
            free_u.push(i);
        }
        if !cortex[i] {
            l_slot[i] = free_l.len();
            free_l.push(i);
        }
    }
    let nu = free_u.len();
    let nl = free_l.len();
    if nu == 0 || nl == 0 {
        return Err(Error::Validation(
            "Dirichlet elimination leaves no free unknowns".into(),
        ));
    }

    let unit = ConductivityMap::new(mesh.regions().iter().map(|&r| (r, 1.0)))?;
    let k = crate::assembly::assemble_volume_stiffness(mesh, &unit)?;
    let e = crate::assembly::assemble_volume_stiffness(mesh, cond)?;

    let dim = nu + nl;
    let mut trips = Vec::with_capacity(k.nnz_upper() * 2 + e.nnz_upper() * 2);
    let mut rhs = vec![0.0; dim];

    for t in k.entries() {
        let (i, j, v) = (t.row, t.col, t.val);
        // eps K_vv
        if u_slot[i] != usize::MAX && u_slot[j] != usize::MAX {
            let (a, b) = (u_slot[i].min(u_slot[j]), u_slot[i].max(u_slot[j]));
            trips.push(Triplet { row: a, col: b, val: epsilon * v });
        }
        // -delta K_qq
        if l_slot[i] != usize::MAX && l_slot[j] != usize::MAX {
            let (a, b) = (l_slot[i].min(l_slot[j]), l_slot[i].max(l_slot[j]));
            trips.push(Triplet { row: nu + a, col: nu + b, val: -delta * v });
        }
        // rhs_u -= eps K_vD g_D
        if u_slot[i] != usize::MAX && scalp[j] {
            rhs[u_slot[i]] -= epsilon * v * g_d[j];
        }
        if i != j && u_slot[j] != usize::MAX && scalp[i] {
            rhs[u_slot[j]] -= epsilon * v * g_d[i];
        }
    }
    for t in e.entries() {
        let (i, j, v) = (t.row, t.col, t.val);
        // E_vq couples u rows with lambda columns, in both index orders
        if u_slot[i] != usize::MAX && l_slot[j] != usize::MAX {
            trips.push(Triplet { row: u_slot[i], col: nu + l_slot[j], val: v });
        }
        if i != j && u_slot[j] != usize::MAX && l_slot[i] != usize::MAX {
            trips.push(Triplet { row: u_slot[j], col: nu + l_slot[i], val: v });
        }
        // rhs_l -= E_qD g_D
        if l_slot[i] != usize::MAX && scalp[j] {
            rhs[nu + l_slot[i]] -= v * g_d[j];
        }
        if i != j && l_slot[j] != usize::MAX && scalp[i] {
            rhs[nu + l_slot[j]] -= v * g_d[i];
        }
    }

    let matrix = SparseSymMatrix::from_triplets(dim, trips)?;
    Ok(QRMSystem {
        epsilon,
        delta,
        num_nodes: n,
        free_u,
        free_l,
        g_d: g_d.to_vec(),
        scalp,
        matrix,
        rhs,
    })
}

impl QRMSystem {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &SparseSymMatrix {
        &self.matrix
    }

    pub fn solve(&self, tol: f64, choice: SolverChoice) -> Result<(QRMSolution, SolveReport)> {
        if !(tol > 0.0) {
            return Err(Error::Parameter(format!("solve tolerance must be positive, got {tol}")));
        }
        let (xi, report) = match choice {
            SolverChoice::Direct => {
                let nu = self.free_u.len();
                let mut signs = vec![1i8; self.dim()];
                for v in &mut signs[nu..] {
                    *v = -1;
                }
                let mut solver = DirectSolver::factor_signed(&self.matrix, Some(&signs))?;
                solver.solve(&self.rhs, tol)?
            }
            SolverChoice::Iterative(opts) => {
                let start = std::time::Instant::now();
                let precond = self.block_preconditioner()?;
                let (xi, iterations, rel) =
                    minres(&self.matrix, &precond, &self.rhs, opts.into())?;
                if rel > tol {
                    return Err(Error::Convergence(format!(
                        "iterative solve reached relative residual {rel:.3e} after \
                         {iterations} iterations, above the requested {tol:.3e}"
                    )));
                }
                (
                    xi,
                    SolveReport {
                        method: "minres".into(),
                        dim: self.dim(),
                        iterations,
                        rel_residual: rel,
                        wall_time_s: start.elapsed().as_secs_f64(),
                        reused_symbolic: false,
                    },
                )
            }
        };

        let mut u = vec![0.0; self.num_nodes];
        let mut lambda = vec![0.0; self.num_nodes];
        for (slot, &node) in self.free_u.iter().enumerate() {
            u[node] = xi[slot];
        }
        for i in 0..self.num_nodes {
            if self.scalp[i] {
                u[i] = self.g_d[i];
            }
        }
        for (slot, &node) in self.free_l.iter().enumerate() {
            lambda[node] = xi[self.free_u.len() + slot];
        }
        Ok((QRMSolution { u, lambda }, report))
    }

    fn block_preconditioner(&self) -> Result<BlockDiagPrecond> {
        let nu = self.free_u.len();
        let nl = self.free_l.len();
        let mut u_trips = Vec::new();
        let mut l_trips = Vec::new();
        for t in self.matrix.entries() {
            if t.row < nu && t.col < nu {
                u_trips.push(*t);
            } else if t.row >= nu && t.col >= nu {
                l_trips.push(Triplet {
                    row: t.row - nu,
                    col: t.col - nu,
                    val: -t.val,
                });
            }
        }
        let p_u = SparseSymMatrix::from_triplets(nu, u_trips)?;
        let p_l = SparseSymMatrix::from_triplets(nl, l_trips)?;
        BlockDiagPrecond::new(&[&p_u, &p_l])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{electrode_layout_hemisphere, ShellHarmonicField};
    use crate::assembly::{
        assemble_data_blocks, assemble_observation, assemble_surface_mass,
        assemble_surface_mass_coupling, assemble_surface_stiffness, assemble_volume_stiffness,
        project_radially_to_boundary, ElectrodeSet,
    };
    use crate::mesh::{build_shell_mesh, extract_cortex};
    use approx::assert_relative_eq;

    fn toy_blocks() -> (
        SparseSymMatrix,
        SparseSymMatrix,
        SparseRectMatrix,
        SparseSymMatrix,
        SparseSymMatrix,
        Vec<f64>,
    ) {
        let m = 3;
        let n = 5;
        let a_core = SparseSymMatrix::from_triplets(
            m,
            vec![
                Triplet { row: 0, col: 0, val: 2.0 },
                Triplet { row: 1, col: 1, val: 2.0 },
                Triplet { row: 2, col: 2, val: 2.0 },
                Triplet { row: 0, col: 1, val: -1.0 },
                Triplet { row: 1, col: 2, val: -1.0 },
            ],
        )
        .unwrap();
        let m_f = SparseSymMatrix::from_triplets(
            m,
            (0..m).map(|i| Triplet { row: i, col: i, val: 0.5 }).collect(),
        )
        .unwrap();
        let b = SparseRectMatrix::from_triplets(
            m,
            n,
            vec![
                Triplet { row: 0, col: 0, val: 1.0 },
                Triplet { row: 1, col: 2, val: 0.5 },
                Triplet { row: 2, col: 4, val: -0.7 },
            ],
        )
        .unwrap();
        let e = SparseSymMatrix::from_triplets(
            n,
            (0..n)
                .map(|i| Triplet { row: i, col: i, val: 3.0 })
                .chain((0..n - 1).map(|i| Triplet { row: i, col: i + 1, val: -1.0 }))
                .collect(),
        )
        .unwrap();
        let g = SparseSymMatrix::from_triplets(
            n,
            (0..n).map(|i| Triplet { row: i, col: i, val: 0.25 }).collect(),
        )
        .unwrap();
        let r = vec![1.0, -2.0, 0.5, 0.0, 3.0];
        (a_core, m_f, b, e, g, r)
    }

    #[test]
    fn toy_dimensions_and_block_pattern() {
        let (a_core, m_f, b, e, g, r) = toy_blocks();
        let kkt = build_kkt(&a_core, &m_f, b, e, g, r, 1e-3, 1e-6).unwrap();
        assert_eq!(kkt.dim(), 13);
        let (m, n) = (3, 5);
        for t in kkt.matrix().entries() {
            let block = |i: usize| {
                if i < m {
                    0
                } else if i < m + n {
                    1
                } else {
                    2
                }
            };
            let (bi, bj) = (block(t.row), block(t.col));
            // zero blocks: (f,u) and (lambda,lambda)
            assert!(!(bi == 0 && bj == 2), "entry in the (f,u) zero block");
            assert!(!(bi == 1 && bj == 1), "entry in the (lambda,lambda) zero block");
        }
        // symmetry of the assembled matrix
        let dense = kkt.matrix().to_dense();
        for i in 0..13 {
            for j in 0..13 {
                assert_eq!(dense[i][j], dense[j][i]);
            }
        }
        // rhs layout
        let rhs = kkt.rhs();
        assert!(rhs[..m + n].iter().all(|&v| v == 0.0));
        assert_eq!(&rhs[m + n..], &[1.0, -2.0, 0.5, 0.0, 3.0]);
    }

    #[test]
    fn split_solution_round_trips() {
        let (a_core, m_f, b, e, g, r) = toy_blocks();
        let kkt = build_kkt(&a_core, &m_f, b, e, g, r, 1.0, 0.0).unwrap();
        let xi: Vec<f64> = (1..=13).map(|i| i as f64).collect();
        let (f, l, u) = kkt.split_solution(&xi).unwrap();
        assert_eq!(f, vec![1.0, 2.0, 3.0]);
        assert_eq!(l, vec![4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(u, vec![9.0, 10.0, 11.0, 12.0, 13.0]);
        let cat: Vec<f64> = f.iter().chain(&l).chain(&u).copied().collect();
        assert_eq!(cat, xi);
        assert!(kkt.split_solution(&xi[..12]).is_err());
    }

    #[test]
    fn build_kkt_rejects_bad_parameters() {
        let (a_core, m_f, b, e, g, r) = toy_blocks();
        assert!(build_kkt(&a_core, &m_f, b.clone(), e.clone(), g.clone(), r.clone(), 0.0, 0.0)
            .is_err());
        assert!(build_kkt(&a_core, &m_f, b.clone(), e.clone(), g.clone(), r.clone(), -1.0, 0.0)
            .is_err());
        assert!(build_kkt(&a_core, &m_f, b.clone(), e.clone(), g.clone(), r.clone(), 1.0, -1.0)
            .is_err());
        assert!(build_kkt(&a_core, &m_f, b, e, g, vec![0.0; 4], 1.0, 0.0).is_err());
    }

    /// Builds a real KKT system on the coarse shell with synthetic data.
    fn shell_kkt(epsilon: f64, gamma: f64) -> KKTSystem {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let surf = extract_cortex(&mesh).unwrap();
        let cond = ConductivityMap::uniform(0, 1.0).unwrap();
        let e = assemble_volume_stiffness(&mesh, &cond).unwrap();
        let a_core = assemble_surface_stiffness(&mesh, &surf).unwrap();
        let m_f = assemble_surface_mass(&mesh, &surf).unwrap();
        let b = assemble_surface_mass_coupling(&mesh, &surf).unwrap();
        let pts = electrode_layout_hemisphere(32, 1.0).unwrap();
        let pts = project_radially_to_boundary(&mesh, BoundaryTag::Scalp, &pts).unwrap();
        let electrodes = ElectrodeSet::with_unit_weights(pts).unwrap();
        let q = assemble_observation(&mesh, &electrodes).unwrap();
        // synthetic smooth data from a nodal field sampled at electrodes
        let field: Vec<f64> = mesh
            .vertices()
            .iter()
            .map(|p| p[0] + 2.0 * p[1] - 0.5 * p[2])
            .collect();
        let d = q.mul_vec(&field);
        let (g, r) = assemble_data_blocks(&q, &electrodes, &d).unwrap();
        build_kkt(&a_core, &m_f, b, e, g, r, epsilon, gamma).unwrap()
    }

    #[test]
    fn shell_kkt_direct_solve_and_stationarity() {
        // gamma = 0: the system must still be nonsingular (the data term
        // pins u's constant, the coupling pins f's and lambda's).
        let kkt = shell_kkt(1e-9, 0.0);
        assert_eq!(kkt.dim(), 1806);
        let (xi, report) = kkt.solve(1e-10, SolverChoice::Direct).unwrap();
        assert!(report.rel_residual <= 1e-10);
        let (f, l, u) = kkt.split_solution(&xi).unwrap();
        let res = kkt.variational_residuals(&f, &l, &u);
        for r in res {
            assert!(
                r <= 1e-8,
                "stationarity residuals {res:?} (method {}, rel {:.3e})",
                report.method,
                report.rel_residual
            );
        }
    }

    #[test]
    fn direct_and_iterative_agree() {
        // Moderate regularization: the one block-diagonal preconditioner is
        // only expected to converge away from the vanishing-epsilon regime
        // (a sweep at small epsilon uses the direct path).
        let kkt = shell_kkt(1e-3, 1e6 * default_gamma_for_shell());
        let (xi_d, _) = kkt.solve(1e-10, SolverChoice::Direct).unwrap();
        let (xi_i, rep) = kkt.solve(1e-8, SolverChoice::iterative_default()).unwrap();
        assert_eq!(rep.method, "minres");
        let diff: Vec<f64> = xi_d.iter().zip(&xi_i).map(|(a, b)| a - b).collect();
        let rel = sparse::norm2(&diff) / sparse::norm2(&xi_d);
        assert!(rel <= 1e-6, "direct and iterative differ by {rel:.3e}");
    }

    fn default_gamma_for_shell() -> f64 {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let surf = extract_cortex(&mesh).unwrap();
        let a_core = assemble_surface_stiffness(&mesh, &surf).unwrap();
        default_gamma(&a_core)
    }

    #[test]
    fn coordinate_export_round_trips() {
        let (a_core, m_f, b, e, g, r) = toy_blocks();
        let kkt = build_kkt(&a_core, &m_f, b, e, g, r, 1e-2, 1e-5).unwrap();
        let mut buf = Vec::new();
        kkt.write_matrix(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header: Vec<usize> = lines
            .next()
            .unwrap()
            .split_whitespace()
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(header[0], 13);
        assert_eq!(header[1], 13);
        assert_eq!(header[2], kkt.matrix().nnz_upper());
        let mut parsed = Vec::new();
        for line in lines {
            let mut it = line.split_whitespace();
            let row: usize = it.next().unwrap().parse::<usize>().unwrap() - 1;
            let col: usize = it.next().unwrap().parse::<usize>().unwrap() - 1;
            let val: f64 = it.next().unwrap().parse().unwrap();
            parsed.push(Triplet { row, col, val });
        }
        let rebuilt = SparseSymMatrix::from_triplets(13, parsed).unwrap();
        assert_eq!(rebuilt, *kkt.matrix());
    }

    #[test]
    fn qrm_constant_trace_gives_constant_state() {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let cond = ConductivityMap::uniform(0, 1.0).unwrap();
        let c = 2.5;
        let g_d = vec![c; mesh.num_vertices()];
        let qrm = build_qrm(&mesh, &cond, &g_d, 1e-8, 1e-8).unwrap();
        let (sol, report) = qrm.solve(1e-10, SolverChoice::Direct).unwrap();
        assert!(report.rel_residual <= 1e-10);
        for &ui in &sol.u {
            assert_relative_eq!(ui, c, max_relative = 1e-6, epsilon = 1e-8);
        }
        let lam_norm = sparse::norm2(&sol.lambda);
        assert!(lam_norm <= 1e-6 * c, "multiplier norm {lam_norm:.3e}");
    }

    #[test]
    fn qrm_recovers_harmonic_field_approximately() {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let cond = ConductivityMap::uniform(0, 1.0).unwrap();
        // band-limited harmonic field satisfying the outer Neumann condition
        let mut coeffs = vec![0.0; 9];
        coeffs[2] = 1.0; // (l=1, m=0)
        coeffs[6] = 0.6; // (l=2, m=0)
        let field = ShellHarmonicField::from_coefficients(0.7, 1.0, coeffs).unwrap();
        let g_d: Vec<f64> = mesh
            .vertices()
            .iter()
            .map(|&p| field.eval(p).unwrap())
            .collect();
        let qrm = build_qrm(&mesh, &cond, &g_d, 1e-8, 1e-8).unwrap();
        let (sol, _) = qrm.solve(1e-9, SolverChoice::Direct).unwrap();
        // compare on the control surface against the analytic trace
        let surf = extract_cortex(&mesh).unwrap();
        let truth: Vec<f64> = (0..surf.num_nodes())
            .map(|i| field.eval(surf.position(&mesh, i)).unwrap())
            .collect();
        let got: Vec<f64> = (0..surf.num_nodes())
            .map(|i| sol.u[surf.vol_node(i)])
            .collect();
        let corr = pearson(&truth, &got);
        assert!(corr >= 0.9, "cortical trace correlation {corr:.3}");
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (x, y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            da += (x - ma) * (x - ma);
            db += (y - mb) * (y - mb);
        }
        num / (da.sqrt() * db.sqrt()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn qrm_rejects_bad_input() {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let cond = ConductivityMap::uniform(0, 1.0).unwrap();
        let g_d = vec![0.0; mesh.num_vertices()];
        assert!(build_qrm(&mesh, &cond, &g_d, 1e-8, 0.0).is_err());
        assert!(build_qrm(&mesh, &cond, &g_d, 0.0, 1e-8).is_err());
        assert!(build_qrm(&mesh, &cond, &g_d[..5], 1e-8, 1e-8).is_err());
        let mut bad = g_d.clone();
        // poison one scalp node
        let scalp_node = mesh
            .boundary_faces()
            .iter()
            .find(|f| f.tag == BoundaryTag::Scalp)
            .unwrap()
            .nodes[0];
        bad[scalp_node] = f64::NAN;
        assert!(build_qrm(&mesh, &cond, &bad, 1e-8, 1e-8).is_err());
    }
}
