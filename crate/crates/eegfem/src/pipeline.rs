//! End-to-end reconstruction workflows: pure-Neumann forward solves, single
//! reconstructions, regularization sweeps, the dense lead-field verification
//! oracle, synthetic-data generation, and the mesh-refinement convergence
//! study.
//!
//! The reconstruction path never forms the lead-field matrix; the dense
//! oracle here exists so tests can cross-check the KKT solution against an
//! independent reduced formulation on coarse meshes.

use std::collections::HashMap;

use crate::analytic::{add_noise, electrode_layout_hemisphere, NoiseSpec, ShellHarmonicField};
use crate::assembly::{
    assemble_data_blocks, assemble_observation, assemble_surface_mass,
    assemble_surface_mass_coupling, assemble_surface_stiffness, assemble_volume_mass,
    assemble_volume_stiffness, lumped_surface_areas, lumped_volume_mass, ElectrodeSet,
};
use crate::error::{Error, Result};
use crate::mesh::{build_shell_mesh, extract_cortex, ConductivityMap, TetMesh};
use crate::solver::{DirectSolver, SolveReport};
use crate::sparse::{self, SparseRectMatrix, SparseSymMatrix, Triplet};
use crate::systems::{build_kkt, default_gamma, KKTSystem, SolverChoice};
use crate::vec3::{self, Point3};

/// Relative tolerance of the pure-Neumann compatibility gate: a control is
/// accepted when |integral of f over the control surface| does not exceed
/// this fraction of ||f|| times the surface area.
pub const COMPATIBILITY_REL: f64 = 1e-10;

/// Default relative residual requested from forward and KKT solves.
pub const DEFAULT_SOLVE_TOL: f64 = 1e-10;

/// Default cap on the control dimension of the dense lead-field oracle.
pub const LEAD_FIELD_DEFAULT_CAP: usize = 2000;

/// Remove the w-weighted mean from x: x <- x - (w.x / w.1) 1.
/// Returns the removed mean. Used with surface areas for controls and with
/// the lumped volume mass for potentials.
pub fn remove_weighted_mean(x: &mut [f64], w: &[f64]) -> f64 {
    assert_eq!(x.len(), w.len());
    let total: f64 = w.iter().sum();
    let mean = sparse::dot(x, w) / total;
    for v in x.iter_mut() {
        *v -= mean;
    }
    mean
}

/// Pearson correlation of two equally long samples.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Usage(format!(
            "correlation needs two equal samples of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Usage(
            "correlation is undefined for a constant sample".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Noise-normalized root-mean-square misfit
/// e = sqrt( (1/K) sum ((d_i - u_i) / s_i)^2 ).
pub fn rmse(d: &[f64], u_hat: &[f64], s: &[f64]) -> Result<f64> {
    if d.len() != u_hat.len() || d.len() != s.len() {
        return Err(Error::Usage(format!(
            "rmse needs equally long data, prediction, and std vectors, got {}, {}, {}",
            d.len(),
            u_hat.len(),
            s.len()
        )));
    }
    if d.is_empty() {
        return Err(Error::Usage("rmse of an empty data vector".into()));
    }
    let mut acc = 0.0;
    for (i, ((di, ui), si)) in d.iter().zip(u_hat).zip(s).enumerate() {
        if !(si > &0.0) || !si.is_finite() {
            return Err(Error::Usage(format!(
                "noise std must be positive and finite, got s[{i}] = {si}"
            )));
        }
        let t = (di - ui) / si;
        acc += t * t;
    }
    Ok((acc / d.len() as f64).sqrt())
}

/// Forward conduction solve -div(sigma grad u) = 0 with flux f on the
/// control surface and an insulated outer boundary. The pure-Neumann
/// constant is pinned by a zero volume mean, imposed through the bordered
/// system [[E, m], [m^T, 0]] with m_i = integral a_i dV; the factorization
/// is computed once and reused across solves.
pub struct ForwardOperator {
    num_nodes: usize,
    stiffness: SparseSymMatrix,
    coupling: SparseRectMatrix,
    areas: Vec<f64>,
    total_area: f64,
    volume_weights: Vec<f64>,
    total_volume: f64,
    solver: DirectSolver,
}

impl ForwardOperator {
    pub fn new(mesh: &TetMesh, cond: &ConductivityMap) -> Result<Self> {
        let surf = extract_cortex(mesh)?;
        let stiffness = assemble_volume_stiffness(mesh, cond)?;
        let coupling = assemble_surface_mass_coupling(mesh, &surf)?;
        let areas = lumped_surface_areas(mesh, &surf);
        let volume_weights = lumped_volume_mass(mesh);
        let n = mesh.num_vertices();

        let mut trips: Vec<Triplet> = stiffness.entries().to_vec();
        for (i, &mi) in volume_weights.iter().enumerate() {
            trips.push(Triplet {
                row: i,
                col: n,
                val: mi,
            });
        }
        let bordered = SparseSymMatrix::from_triplets(n + 1, trips)?;
        let mut signs = vec![1i8; n + 1];
        signs[n] = -1;
        let solver = DirectSolver::factor_signed(&bordered, Some(&signs))?;

        Ok(Self {
            num_nodes: n,
            stiffness,
            coupling,
            total_area: areas.iter().sum(),
            areas,
            total_volume: volume_weights.iter().sum(),
            volume_weights,
            solver,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_nodes
    }

    pub fn num_controls(&self) -> usize {
        self.coupling.nrows()
    }

    /// Lumped control-surface areas (the discrete surface measure).
    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn total_area(&self) -> f64 {
        self.total_area
    }

    /// Conduction stiffness E used by the solve (handy for energy norms).
    pub fn stiffness(&self) -> &SparseSymMatrix {
        &self.stiffness
    }

    /// The m-weighted (volume) mean, the functional the gauge pins to zero.
    pub fn volume_mean(&self, u: &[f64]) -> f64 {
        sparse::dot(u, &self.volume_weights) / self.total_volume
    }

    pub fn remove_volume_mean(&self, u: &mut [f64]) -> f64 {
        remove_weighted_mean(u, &self.volume_weights)
    }

    /// Solve for the potential produced by the surface control f.
    ///
    /// f must satisfy the pure-Neumann compatibility condition: its surface
    /// integral may not exceed [`COMPATIBILITY_REL`] relative to
    /// ||f|| * area. The returned potential has zero volume mean.
    pub fn solve(&mut self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.num_controls() {
            return Err(Error::Usage(format!(
                "control vector length {} does not match the {} surface nodes",
                f.len(),
                self.num_controls()
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage("control vector has non-finite entries".into()));
        }
        let defect = sparse::dot(f, &self.areas);
        let bound = COMPATIBILITY_REL * sparse::norm2(f) * self.total_area;
        if defect.abs() > bound {
            return Err(Error::Compatibility(format!(
                "surface integral of f is {defect:.3e}, above the solvability bound {bound:.3e}; \
                 a pure-Neumann problem needs a zero-total-flux control"
            )));
        }
        let rhs_n = self.coupling.mul_transpose_vec(f);
        self.solve_bordered(rhs_n)
    }

    /// Solve E u = rhs with the zero-volume-mean gauge, for right-hand sides
    /// that are discretely compatible (entries summing to zero, as adjoint
    /// sources Q^T W^2 (d - Q u) are at a stationary point). Oracle plumbing
    /// for the adjoint-consistency check.
    pub fn solve_compatible_rhs(&mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.num_nodes {
            return Err(Error::Usage(format!(
                "rhs length {} does not match the {} mesh nodes",
                rhs.len(),
                self.num_nodes
            )));
        }
        let sum: f64 = rhs.iter().sum();
        let scale: f64 = rhs.iter().map(|v| v.abs()).sum();
        if sum.abs() > 1e-8 * scale {
            return Err(Error::Compatibility(format!(
                "volume rhs sums to {sum:.3e} against magnitude {scale:.3e}; \
                 the singular conduction operator needs a zero-sum source"
            )));
        }
        self.solve_bordered(rhs.to_vec())
    }

    fn solve_bordered(&mut self, mut rhs: Vec<f64>) -> Result<Vec<f64>> {
        rhs.push(0.0);
        let (mut x, _) = self.solver.solve(&rhs, DEFAULT_SOLVE_TOL)?;
        x.truncate(self.num_nodes);
        Ok(x)
    }
}

/// One reconstruction: the KKT solution with its misfit metrics.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    /// Estimated control (raw KKT component).
    pub f: Vec<f64>,
    /// The same control with its area-weighted mean removed, the
    /// quotient-space representative.
    pub f_zero_mean: Vec<f64>,
    pub lambda: Vec<f64>,
    pub u: Vec<f64>,
    /// ||W (Q u - d)||, the weighted data residual norm.
    pub residual_norm: f64,
    /// Noise-normalized misfit e with s_i = 1 / w_i.
    pub rmse: f64,
    pub epsilon: f64,
    pub gamma: f64,
    /// Relative residuals of the three variational optimality equations.
    pub stationarity: [f64; 3],
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
pub struct ReconstructionOptions {
    /// Control-mass shift; `None` picks the trace-scaled default.
    pub gamma: Option<f64>,
    /// Relative residual requested from the linear solve.
    pub tol: f64,
    pub solver: SolverChoice,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        Self {
            gamma: None,
            tol: DEFAULT_SOLVE_TOL,
            solver: SolverChoice::Direct,
        }
    }
}

struct ProblemBlocks {
    areas: Vec<f64>,
    a_core: SparseSymMatrix,
    m_f: SparseSymMatrix,
    b: SparseRectMatrix,
    e: SparseSymMatrix,
    q: SparseRectMatrix,
    g: SparseSymMatrix,
    r: Vec<f64>,
}

fn assemble_problem(
    mesh: &TetMesh,
    cond: &ConductivityMap,
    electrodes: &ElectrodeSet,
    d: &[f64],
) -> Result<ProblemBlocks> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Usage("data vector has non-finite entries".into()));
    }
    let surf = extract_cortex(mesh)?;
    let e = assemble_volume_stiffness(mesh, cond)?;
    let a_core = assemble_surface_stiffness(mesh, &surf)?;
    let m_f = assemble_surface_mass(mesh, &surf)?;
    let b = assemble_surface_mass_coupling(mesh, &surf)?;
    let q = assemble_observation(mesh, electrodes)?;
    let (g, r) = assemble_data_blocks(&q, electrodes, d)?;
    Ok(ProblemBlocks {
        areas: lumped_surface_areas(mesh, &surf),
        a_core,
        m_f,
        b,
        e,
        q,
        g,
        r,
    })
}

fn finish_result(
    kkt: &KKTSystem,
    blocks: &ProblemBlocks,
    electrodes: &ElectrodeSet,
    d: &[f64],
    xi: &[f64],
    report: SolveReport,
) -> Result<ReconstructionResult> {
    let (f, lambda, u) = kkt.split_solution(xi)?;
    let stationarity = kkt.variational_residuals(&f, &lambda, &u);

    let qu = blocks.q.mul_vec(&u);
    let w = electrodes.weights();
    let weighted: Vec<f64> = qu
        .iter()
        .zip(d)
        .zip(w)
        .map(|((qi, di), wi)| wi * (qi - di))
        .collect();
    let residual_norm = sparse::norm2(&weighted);
    let stds: Vec<f64> = w.iter().map(|wi| 1.0 / wi).collect();
    let e = rmse(d, &qu, &stds)?;

    let mut f_zero_mean = f.clone();
    remove_weighted_mean(&mut f_zero_mean, &blocks.areas);

    Ok(ReconstructionResult {
        f,
        f_zero_mean,
        lambda,
        u,
        residual_norm,
        rmse: e,
        epsilon: kkt.epsilon(),
        gamma: kkt.gamma(),
        stationarity,
        report,
    })
}

/// Assemble and solve the optimality system for one regularization weight.
pub fn reconstruct(
    mesh: &TetMesh,
    cond: &ConductivityMap,
    electrodes: &ElectrodeSet,
    d: &[f64],
    epsilon: f64,
    opts: &ReconstructionOptions,
) -> Result<ReconstructionResult> {
    let blocks = assemble_problem(mesh, cond, electrodes, d)?;
    let gamma = opts.gamma.unwrap_or_else(|| default_gamma(&blocks.a_core));
    let kkt = build_kkt(
        &blocks.a_core,
        &blocks.m_f,
        blocks.b.clone(),
        blocks.e.clone(),
        blocks.g.clone(),
        blocks.r.clone(),
        epsilon,
        gamma,
    )?;
    let (xi, report) = kkt.solve(opts.tol, opts.solver.clone())?;
    finish_result(&kkt, &blocks, electrodes, d, &xi, report)
}

/// One point of a regularization sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub residual_norm: f64,
    pub rmse: f64,
}

/// Residual and misfit against the regularization weight, epsilon strictly
/// decreasing.
#[derive(Debug, Clone)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    /// CSV with header `epsilon,residual_norm,rmse`, one row per point,
    /// 17 significant digits.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "epsilon,residual_norm,rmse")?;
        for p in &self.points {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", p.epsilon, p.residual_norm, p.rmse)?;
        }
        Ok(())
    }
}

/// Reconstruct once per epsilon, largest first, returning the full results.
/// The symbolic factorization is shared across the sweep: only the control
/// block values change between systems, not the sparsity pattern.
pub fn sweep_epsilon_detailed(
    mesh: &TetMesh,
    cond: &ConductivityMap,
    electrodes: &ElectrodeSet,
    d: &[f64],
    eps: &[f64],
    opts: &ReconstructionOptions,
) -> Result<Vec<ReconstructionResult>> {
    if eps.is_empty() {
        return Err(Error::Parameter("sweep needs at least one epsilon".into()));
    }
    for &e in eps {
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::Parameter(format!(
                "sweep epsilons must be positive and finite, got {e}"
            )));
        }
    }
    let mut sorted = eps.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite by validation"));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Parameter("sweep epsilons must be distinct".into()));
    }

    let blocks = assemble_problem(mesh, cond, electrodes, d)?;
    let gamma = opts.gamma.unwrap_or_else(|| default_gamma(&blocks.a_core));

    let mut out = Vec::with_capacity(sorted.len());
    let mut solver: Option<DirectSolver> = None;
    for &epsilon in &sorted {
        let kkt = build_kkt(
            &blocks.a_core,
            &blocks.m_f,
            blocks.b.clone(),
            blocks.e.clone(),
            blocks.g.clone(),
            blocks.r.clone(),
            epsilon,
            gamma,
        )?;
        let (xi, report) = match &opts.solver {
            SolverChoice::Direct => {
                let s = match solver.as_mut() {
                    Some(s) => {
                        s.refactor(kkt.matrix())?;
                        s
                    }
                    None => solver.insert(DirectSolver::factor_signed(
                        kkt.matrix(),
                        Some(&kkt.inertia_signs()),
                    )?),
                };
                s.solve(&kkt.rhs(), opts.tol)?
            }
            choice => kkt.solve(opts.tol, choice.clone())?,
        };
        out.push(finish_result(&kkt, &blocks, electrodes, d, &xi, report)?);
    }
    Ok(out)
}

/// Reconstruct once per epsilon and return the (epsilon, residual, rmse)
/// curve, sorted by epsilon descending.
pub fn sweep_epsilon(
    mesh: &TetMesh,
    cond: &ConductivityMap,
    electrodes: &ElectrodeSet,
    d: &[f64],
    eps: &[f64],
    opts: &ReconstructionOptions,
) -> Result<SweepCurve> {
    let detailed = sweep_epsilon_detailed(mesh, cond, electrodes, d, eps, opts)?;
    Ok(SweepCurve {
        points: detailed
            .iter()
            .map(|r| SweepPoint {
                epsilon: r.epsilon,
                residual_norm: r.residual_norm,
                rmse: r.rmse,
            })
            .collect(),
    })
}

/// Dense control-to-measurement map, computed column by column through the
/// forward solver. A verification oracle: the reconstruction path never
/// forms this matrix.
pub struct LeadFieldOracle {
    /// Column j is W Q S0 applied to the zero-mean-projected j-th control
    /// basis vector (K entries per column).
    cols: Vec<Vec<f64>>,
    /// W applied to the all-ones electrode vector; models the free additive
    /// constant of the pure-Neumann potential.
    const_col: Vec<f64>,
    weights: Vec<f64>,
    areas: Vec<f64>,
    a_core: SparseSymMatrix,
    m_f: SparseSymMatrix,
}

/// Build the oracle on a coarse mesh. Costs one forward factorization plus
/// M forward solves; refuses control dimensions above `cap` (default
/// [`LEAD_FIELD_DEFAULT_CAP`]).
pub fn build_lead_field_oracle(
    mesh: &TetMesh,
    cond: &ConductivityMap,
    electrodes: &ElectrodeSet,
    cap: Option<usize>,
) -> Result<LeadFieldOracle> {
    let cap = cap.unwrap_or(LEAD_FIELD_DEFAULT_CAP);
    let surf = extract_cortex(mesh)?;
    let m = surf.num_nodes();
    if m > cap {
        return Err(Error::Resource(format!(
            "lead-field oracle refused: {m} control DOFs exceed the cap {cap}"
        )));
    }
    let a_core = assemble_surface_stiffness(mesh, &surf)?;
    let m_f = assemble_surface_mass(mesh, &surf)?;
    let q = assemble_observation(mesh, electrodes)?;
    let mut fw = ForwardOperator::new(mesh, cond)?;
    let areas = fw.areas().to_vec();
    let total_area = fw.total_area();
    let weights = electrodes.weights().to_vec();

    let mut cols = Vec::with_capacity(m);
    for j in 0..m {
        // Zero-mean projection of the j-th basis vector keeps the column
        // inside the solvable control subspace.
        let shift = areas[j] / total_area;
        let mut ej = vec![-shift; m];
        ej[j] += 1.0;
        let u = fw.solve(&ej)?;
        let qu = q.mul_vec(&u);
        cols.push(qu.iter().zip(&weights).map(|(v, w)| v * w).collect());
    }

    Ok(LeadFieldOracle {
        cols,
        const_col: weights.clone(),
        weights,
        areas,
        a_core,
        m_f,
    })
}

impl LeadFieldOracle {
    pub fn num_electrodes(&self) -> usize {
        self.const_col.len()
    }

    pub fn num_controls(&self) -> usize {
        self.cols.len()
    }

    /// Column j of the weighted lead field (response to the projected j-th
    /// control basis vector).
    pub fn column(&self, j: usize) -> &[f64] {
        &self.cols[j]
    }

    /// L f, the weighted electrode response to the control f.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.num_controls());
        let mut y = vec![0.0; self.num_electrodes()];
        for (fj, col) in f.iter().zip(&self.cols) {
            for (yi, ci) in y.iter_mut().zip(col) {
                *yi += fj * ci;
            }
        }
        y
    }

    fn check_params(&self, d: &[f64], epsilon: f64, gamma: f64) -> Result<()> {
        if d.len() != self.num_electrodes() {
            return Err(Error::Usage(format!(
                "data length {} does not match {} electrodes",
                d.len(),
                self.num_electrodes()
            )));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() || !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::Parameter(format!(
                "regularization (epsilon {epsilon}, gamma {gamma}) out of range"
            )));
        }
        Ok(())
    }

    /// The regularizer eps A_core + gamma M_f as a dense addend.
    fn regularizer(&self, epsilon: f64, gamma: f64) -> Result<SparseSymMatrix> {
        SparseSymMatrix::lin_comb(epsilon, &self.a_core, gamma, &self.m_f)
    }

    /// Misfit with the additive constant at its optimum:
    /// y(f, c) = L f + c W1 - W d, c* minimizing ||y||.
    fn misfit_at_optimal_constant(&self, f: &[f64], d: &[f64]) -> Vec<f64> {
        let mut y = self.apply(f);
        for ((yi, di), wi) in y.iter_mut().zip(d).zip(&self.weights) {
            *yi -= wi * di;
        }
        let c = -sparse::dot(&y, &self.const_col) / sparse::dot(&self.const_col, &self.const_col);
        for (yi, wi) in y.iter_mut().zip(&self.const_col) {
            *yi += c * wi;
        }
        y
    }

    /// Reduced Tikhonov objective
    /// Phi(f) = 1/2 ||L f + c* W1 - W d||^2 + 1/2 f^T (eps A + gamma M) f
    /// with the additive potential constant minimized out.
    pub fn phi(&self, f: &[f64], d: &[f64], epsilon: f64, gamma: f64) -> Result<f64> {
        self.check_params(d, epsilon, gamma)?;
        if f.len() != self.num_controls() {
            return Err(Error::Usage(format!(
                "control length {} does not match {} control DOFs",
                f.len(),
                self.num_controls()
            )));
        }
        let y = self.misfit_at_optimal_constant(f, d);
        let reg = self.regularizer(epsilon, gamma)?;
        Ok(0.5 * sparse::dot(&y, &y) + 0.5 * reg.quad_form(f))
    }

    /// Gradient of [`Self::phi`] restricted to the solvable control
    /// manifold {a^T f = 0}: the raw gradient L^T y + R f with its
    /// area-direction component projected out (that direction is not a
    /// feasible perturbation).
    pub fn reduced_gradient(
        &self,
        f: &[f64],
        d: &[f64],
        epsilon: f64,
        gamma: f64,
    ) -> Result<Vec<f64>> {
        self.check_params(d, epsilon, gamma)?;
        if f.len() != self.num_controls() {
            return Err(Error::Usage(format!(
                "control length {} does not match {} control DOFs",
                f.len(),
                self.num_controls()
            )));
        }
        let y = self.misfit_at_optimal_constant(f, d);
        let reg = self.regularizer(epsilon, gamma)?;
        let mut g: Vec<f64> = self
            .cols
            .iter()
            .map(|col| sparse::dot(col, &y))
            .collect();
        for (gi, ri) in g.iter_mut().zip(reg.mul_vec(f)) {
            *gi += ri;
        }
        let scale = sparse::dot(&self.areas, &self.areas);
        let along = sparse::dot(&self.areas, &g) / scale;
        for (gi, ai) in g.iter_mut().zip(&self.areas) {
            *gi -= along * ai;
        }
        Ok(g)
    }

    /// Minimizer of the reduced Tikhonov functional over the solvable
    /// control subspace, by a dense solve of the stationarity system in
    /// (f, c, mu): f the control, c the free potential constant, mu the
    /// multiplier of the zero-area-mean constraint.
    pub fn tikhonov_minimizer(&self, d: &[f64], epsilon: f64, gamma: f64) -> Result<Vec<f64>> {
        self.check_params(d, epsilon, gamma)?;
        let m = self.num_controls();
        let dim = m + 2;
        let reg = self.regularizer(epsilon, gamma)?;

        let mut mat = vec![vec![0.0; dim]; dim];
        for i in 0..m {
            for j in i..m {
                let v = sparse::dot(&self.cols[i], &self.cols[j]);
                mat[i][j] = v;
                mat[j][i] = v;
            }
        }
        for t in reg.entries() {
            mat[t.row][t.col] += t.val;
            if t.row != t.col {
                mat[t.col][t.row] += t.val;
            }
        }
        for j in 0..m {
            let v = sparse::dot(&self.cols[j], &self.const_col);
            mat[j][m] = v;
            mat[m][j] = v;
        }
        mat[m][m] = sparse::dot(&self.const_col, &self.const_col);
        for j in 0..m {
            mat[j][m + 1] = self.areas[j];
            mat[m + 1][j] = self.areas[j];
        }

        let wd: Vec<f64> = d.iter().zip(&self.weights).map(|(di, wi)| di * wi).collect();
        let mut rhs = vec![0.0; dim];
        for j in 0..m {
            rhs[j] = sparse::dot(&self.cols[j], &wd);
        }
        rhs[m] = sparse::dot(&self.const_col, &wd);

        let mut x = dense_solve(mat, rhs)?;
        x.truncate(m);
        Ok(x)
    }
}

/// Dense partial-pivot Gaussian elimination; consumes its inputs.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
            .expect("nonempty range");
        if a[piv][k].abs() == 0.0 {
            return Err(Error::Singular(format!(
                "dense oracle system is singular at pivot {k}"
            )));
        }
        a.swap(k, piv);
        b.swap(k, piv);
        for i in (k + 1)..n {
            let l = a[i][k] / a[k][k];
            if l == 0.0 {
                continue;
            }
            for j in (k + 1)..n {
                a[i][j] -= l * a[k][j];
            }
            b[i] -= l * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let mut s = b[k];
        for j in (k + 1)..n {
            s -= a[k][j] * x[j];
        }
        x[k] = s / a[k][k];
    }
    Ok(x)
}

/// Adjoint-state oracle: the multiplier recomputed from the solved state by
/// one extra conduction solve with source Q^T W^2 (d - Q u), returned in the
/// zero-volume-mean gauge. At a true stationary point this equals the KKT
/// multiplier up to its additive constant.
pub fn adjoint_oracle(
    fw: &mut ForwardOperator,
    q: &SparseRectMatrix,
    weights: &[f64],
    d: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    if q.nrows() != weights.len() || d.len() != weights.len() {
        return Err(Error::Usage(format!(
            "observation rows {}, weights {}, data {} must agree",
            q.nrows(),
            weights.len(),
            d.len()
        )));
    }
    let qu = q.mul_vec(u);
    let resid: Vec<f64> = qu
        .iter()
        .zip(d)
        .zip(weights)
        .map(|((qi, di), wi)| wi * wi * (di - qi))
        .collect();
    let rhs = q.mul_transpose_vec(&resid);
    fw.solve_compatible_rhs(&rhs)
}

/// Synthetic measurements produced by the discrete forward model.
pub struct SyntheticData {
    /// Nodal control truth on the control surface, area-mean removed.
    pub f_true: Vec<f64>,
    /// Noise-free electrode potentials.
    pub d_clean: Vec<f64>,
    /// Measurements handed to the inverse solver (equals `d_clean` when no
    /// noise was requested).
    pub d: Vec<f64>,
    /// Per-electrode noise std (all ones when no noise was requested).
    pub stds: Vec<f64>,
    /// Electrode set with weights 1/s_i (unit weights when noise-free).
    pub electrodes: ElectrodeSet,
}

/// Sample a control truth on the cortex nodes, run the forward model, and
/// read out (optionally noisy) electrode data. The sampled control has its
/// area-weighted mean removed so it is an admissible total-flux-free
/// control; multiplicative noise per [`NoiseSpec`] sets the electrode
/// weights to 1/s_i.
pub fn synthesize_shell_data(
    mesh: &TetMesh,
    cond: &ConductivityMap,
    positions: &[Point3],
    control: impl Fn(Point3) -> f64,
    noise: Option<NoiseSpec>,
) -> Result<SyntheticData> {
    let surf = extract_cortex(mesh)?;
    let mut f_true: Vec<f64> = (0..surf.num_nodes())
        .map(|i| control(surf.position(mesh, i)))
        .collect();
    if f_true.iter().any(|v| !v.is_finite()) {
        return Err(Error::Usage("control sampled to non-finite values".into()));
    }
    let areas = lumped_surface_areas(mesh, &surf);
    remove_weighted_mean(&mut f_true, &areas);

    let mut fw = ForwardOperator::new(mesh, cond)?;
    let u = fw.solve(&f_true)?;

    let probe = ElectrodeSet::with_unit_weights(positions.to_vec())?;
    let q = assemble_observation(mesh, &probe)?;
    let d_clean = q.mul_vec(&u);

    let (d, stds, weights) = match noise {
        None => {
            let k = d_clean.len();
            (d_clean.clone(), vec![1.0; k], vec![1.0; k])
        }
        Some(spec) => {
            if !(spec.level > 0.0) {
                return Err(Error::Parameter(format!(
                    "noise level must be positive when a noise spec is given, got {}",
                    spec.level
                )));
            }
            let (noisy, stds) = add_noise(&d_clean, spec)?;
            if stds.iter().any(|s| !(s > &0.0)) {
                return Err(Error::Usage(
                    "multiplicative noise needs nonzero clean data at every electrode".into(),
                ));
            }
            let weights = stds.iter().map(|s| 1.0 / s).collect();
            (noisy, stds, weights)
        }
    };
    let electrodes = ElectrodeSet::new(positions.to_vec(), weights)?;

    Ok(SyntheticData {
        f_true,
        d_clean,
        d,
        stds,
        electrodes,
    })
}

/// Electrode count used by the convergence study.
pub const CONVERGENCE_ELECTRODES: usize = 32;

/// Electrodes sit at this fraction of the outer radius so the same physical
/// points lie strictly inside the faceted domain at every refinement level.
pub const CONVERGENCE_ELECTRODE_RADIUS: f64 = 0.98;

/// Regularization weight the self-convergence part solves at (fixed across
/// levels so every level discretizes the same continuous problem).
pub const CONVERGENCE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct ForwardLevel {
    pub level: u32,
    pub h: f64,
    pub num_tets: usize,
    pub h1_error: f64,
    pub l2_error: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardConvergence {
    pub levels: Vec<ForwardLevel>,
    pub h1_rate: f64,
    pub l2_rate: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct KktLevel {
    pub level: u32,
    pub h: f64,
    /// Combined H1-type distance to the finest level; `None` on the finest
    /// level itself (the reference).
    pub error: Option<f64>,
    pub stationarity: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct KktSelfConvergence {
    pub levels: Vec<KktLevel>,
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub forward: ForwardConvergence,
    pub kkt: KktSelfConvergence,
}

fn check_levels(levels: u32) -> Result<()> {
    if levels < 3 {
        return Err(Error::Parameter(format!(
            "a convergence study needs at least 3 levels, got {levels}"
        )));
    }
    Ok(())
}

/// Least-squares slope of log(err) against log(h).
fn log_log_slope(hs: &[f64], errs: &[f64]) -> f64 {
    assert_eq!(hs.len(), errs.len());
    let n = hs.len() as f64;
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Forward-solver accuracy against the analytic shell field over refinement
/// levels 0..levels: the control is the field's inward conormal flux sampled
/// on the cortex nodes, the error is measured against the nodal interpolant
/// in the (sigma = 1) energy seminorm and the L2 norm, gauge-aligned.
pub fn forward_convergence(levels: u32, field: &ShellHarmonicField) -> Result<ForwardConvergence> {
    check_levels(levels)?;
    let cond = ConductivityMap::uniform(0, 1.0)?;
    let mut records = Vec::with_capacity(levels as usize);
    for level in 0..levels {
        let mesh = build_shell_mesh(field.r_inner(), field.r_outer(), level)?;
        let surf = extract_cortex(&mesh)?;
        // The domain's outward normal on the inner sphere points toward the
        // origin, so the conormal flux is minus the radial derivative.
        let mut f: Vec<f64> = (0..surf.num_nodes())
            .map(|i| field.radial_derivative(surf.position(&mesh, i)).map(|v| -v))
            .collect::<Result<_>>()?;
        let areas = lumped_surface_areas(&mesh, &surf);
        remove_weighted_mean(&mut f, &areas);

        let mut fw = ForwardOperator::new(&mesh, &cond)?;
        let u_h = fw.solve(&f)?;
        let mut err: Vec<f64> = mesh
            .vertices()
            .iter()
            .zip(&u_h)
            .map(|(p, uh)| field.eval(*p).map(|ua| uh - ua))
            .collect::<Result<_>>()?;
        fw.remove_volume_mean(&mut err);

        let mass = assemble_volume_mass(&mesh)?;
        records.push(ForwardLevel {
            level,
            h: mesh.max_element_diameter(),
            num_tets: mesh.num_tets(),
            h1_error: fw.stiffness().quad_form(&err).max(0.0).sqrt(),
            l2_error: mass.quad_form(&err).max(0.0).sqrt(),
        });
    }
    let hs: Vec<f64> = records.iter().map(|r| r.h).collect();
    let h1: Vec<f64> = records.iter().map(|r| r.h1_error).collect();
    let l2: Vec<f64> = records.iter().map(|r| r.l2_error).collect();
    Ok(ForwardConvergence {
        h1_rate: log_log_slope(&hs, &h1),
        l2_rate: log_log_slope(&hs, &l2),
        levels: records,
    })
}

fn vertex_key(p: Point3) -> [u64; 3] {
    [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()]
}

/// Self-convergence of the optimality-system solution under refinement:
/// every level solves the same data (analytic trace at electrodes fixed
/// strictly inside all levels, fixed epsilon and gamma) and coarser
/// solutions are compared to the finest at shared nodes, which nest
/// bitwise by construction of the shell mesher.
pub fn kkt_self_convergence(levels: u32, field: &ShellHarmonicField) -> Result<KktSelfConvergence> {
    check_levels(levels)?;
    let cond = ConductivityMap::uniform(0, 1.0)?;
    let positions = electrode_layout_hemisphere(
        CONVERGENCE_ELECTRODES,
        CONVERGENCE_ELECTRODE_RADIUS * field.r_outer(),
    )?;
    let electrodes = ElectrodeSet::with_unit_weights(positions)?;
    let d: Vec<f64> = electrodes
        .positions()
        .iter()
        .map(|p| field.eval(*p))
        .collect::<Result<_>>()?;

    let mut meshes = Vec::with_capacity(levels as usize);
    let mut results = Vec::with_capacity(levels as usize);
    let mut gamma = None;
    for level in 0..levels {
        let mesh = build_shell_mesh(field.r_inner(), field.r_outer(), level)?;
        if gamma.is_none() {
            // Freeze the level-0 default so every level regularizes the
            // same continuous functional.
            let surf = extract_cortex(&mesh)?;
            gamma = Some(default_gamma(&assemble_surface_stiffness(&mesh, &surf)?));
        }
        let opts = ReconstructionOptions {
            gamma,
            ..Default::default()
        };
        results.push(reconstruct(
            &mesh,
            &cond,
            &electrodes,
            &d,
            CONVERGENCE_EPSILON,
            &opts,
        )?);
        meshes.push(mesh);
    }

    let fine_mesh = meshes.last().expect("levels >= 3");
    let fine = results.last().expect("levels >= 3");
    let fine_surf = extract_cortex(fine_mesh)?;
    let mut fine_index: HashMap<[u64; 3], usize> = HashMap::with_capacity(fine_mesh.num_vertices());
    for (i, p) in fine_mesh.vertices().iter().enumerate() {
        fine_index.insert(vertex_key(*p), i);
    }

    let mut records = Vec::with_capacity(levels as usize);
    for (idx, (mesh, res)) in meshes.iter().zip(&results).enumerate() {
        let level = idx as u32;
        if level == levels - 1 {
            records.push(KktLevel {
                level,
                h: mesh.max_element_diameter(),
                error: None,
                stationarity: res.stationarity,
            });
            continue;
        }
        let surf = extract_cortex(mesh)?;
        let locate = |p: Point3| -> Result<usize> {
            fine_index.get(&vertex_key(p)).copied().ok_or_else(|| {
                Error::Validation(format!(
                    "coarse node ({:.6}, {:.6}, {:.6}) is not shared with the finest level",
                    p[0], p[1], p[2]
                ))
            })
        };
        let mut e_f = Vec::with_capacity(surf.num_nodes());
        for s in 0..surf.num_nodes() {
            let fine_vol = locate(surf.position(mesh, s))?;
            let fine_s = fine_surf.surf_index(fine_vol).ok_or_else(|| {
                Error::Validation("shared node lost its control-surface tag on the fine level".into())
            })?;
            e_f.push(res.f[s] - fine.f[fine_s]);
        }
        let mut e_u = Vec::with_capacity(mesh.num_vertices());
        for (i, p) in mesh.vertices().iter().enumerate() {
            e_u.push(res.u[i] - fine.u[locate(*p)?]);
        }
        let a_core = assemble_surface_stiffness(mesh, &surf)?;
        let stiff = assemble_volume_stiffness(mesh, &cond)?;
        // H1 seminorms are blind to the per-level gauge constants.
        let err = (a_core.quad_form(&e_f).max(0.0) + stiff.quad_form(&e_u).max(0.0)).sqrt();
        records.push(KktLevel {
            level,
            h: mesh.max_element_diameter(),
            error: Some(err),
            stationarity: res.stationarity,
        });
    }

    let hs: Vec<f64> = records
        .iter()
        .filter_map(|r| r.error.map(|_| r.h))
        .collect();
    let errs: Vec<f64> = records.iter().filter_map(|r| r.error).collect();
    Ok(KktSelfConvergence {
        rate: log_log_slope(&hs, &errs),
        levels: records,
    })
}

/// Run both convergence measurements on the same field.
pub fn convergence_study(levels: u32, field: &ShellHarmonicField) -> Result<ConvergenceStudy> {
    Ok(ConvergenceStudy {
        forward: forward_convergence(levels, field)?,
        kkt: kkt_self_convergence(levels, field)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::sh_index;
    use crate::assembly::project_radially_to_boundary;
    use crate::mesh::BoundaryTag;
    use approx::assert_relative_eq;

    fn unit_cond() -> ConductivityMap {
        ConductivityMap::uniform(0, 1.0).unwrap()
    }

    fn test_field() -> ShellHarmonicField {
        let mut coeffs = vec![0.0; 9];
        coeffs[sh_index(1, 0)] = 1.0;
        coeffs[sh_index(2, 0)] = 0.6;
        coeffs[sh_index(2, 2)] = 0.3;
        ShellHarmonicField::from_coefficients(0.7, 1.0, coeffs).unwrap()
    }

    fn scalp_electrodes(mesh: &TetMesh, k: usize) -> ElectrodeSet {
        let pts = electrode_layout_hemisphere(k, 1.0).unwrap();
        let pts = project_radially_to_boundary(mesh, BoundaryTag::Scalp, &pts).unwrap();
        ElectrodeSet::with_unit_weights(pts).unwrap()
    }

    #[test]
    fn forward_zero_control_gives_zero_potential() {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let mut fw = ForwardOperator::new(&mesh, &unit_cond()).unwrap();
        let u = fw.solve(&vec![0.0; fw.num_controls()]).unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_incompatible_control() {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let mut fw = ForwardOperator::new(&mesh, &unit_cond()).unwrap();
        let f = vec![0.3; fw.num_controls()];
        assert!(matches!(fw.solve(&f), Err(Error::Compatibility(_))));
    }

    #[test]
    fn forward_tracks_analytic_field_on_coarse_shell() {
        let field = test_field();
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let surf = extract_cortex(&mesh).unwrap();
        let mut f: Vec<f64> = (0..surf.num_nodes())
            .map(|i| -field.radial_derivative(surf.position(&mesh, i)).unwrap())
            .collect();
        let areas = lumped_surface_areas(&mesh, &surf);
        remove_weighted_mean(&mut f, &areas);
        let mut fw = ForwardOperator::new(&mesh, &unit_cond()).unwrap();
        let u = fw.solve(&f).unwrap();

        let mut err: Vec<f64> = mesh
            .vertices()
            .iter()
            .zip(&u)
            .map(|(p, uh)| uh - field.eval(*p).unwrap())
            .collect();
        fw.remove_volume_mean(&mut err);
        let mut truth: Vec<f64> = mesh
            .vertices()
            .iter()
            .map(|p| field.eval(*p).unwrap())
            .collect();
        fw.remove_volume_mean(&mut truth);
        let rel = sparse::norm2(&err) / sparse::norm2(&truth);
        assert!(rel < 0.05, "coarse forward error {rel:.3e}");
    }

    #[test]
    fn rmse_matches_reference_values() {
        assert_relative_eq!(
            rmse(&[1.0, 2.0], &[1.0, 2.0], &[0.3, 0.4]).unwrap(),
            0.0
        );
        assert_relative_eq!(rmse(&[1.0], &[0.0], &[0.5]).unwrap(), 2.0);
        assert_relative_eq!(
            rmse(&[1.0, -1.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap(),
            1.0
        );
        assert!(matches!(
            rmse(&[1.0], &[0.0], &[0.0]),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            rmse(&[1.0], &[0.0], &[-1.0]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn reconstruct_zero_data_gives_zero_solution() {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let electrodes = scalp_electrodes(&mesh, 16);
        let d = vec![0.0; electrodes.len()];
        let res = reconstruct(
            &mesh,
            &unit_cond(),
            &electrodes,
            &d,
            1e-8,
            &ReconstructionOptions::default(),
        )
        .unwrap();
        assert!(res.f.iter().all(|&v| v == 0.0));
        assert!(res.lambda.iter().all(|&v| v == 0.0));
        assert!(res.u.iter().all(|&v| v == 0.0));
        assert_eq!(res.residual_norm, 0.0);
        assert_eq!(res.rmse, 0.0);
    }

    fn synthetic_case(level: u32, k: usize) -> (TetMesh, SyntheticData) {
        let mesh = build_shell_mesh(0.7, 1.0, level).unwrap();
        let pts = electrode_layout_hemisphere(k, 1.0).unwrap();
        let pts = project_radially_to_boundary(&mesh, BoundaryTag::Scalp, &pts).unwrap();
        let field = test_field();
        let data = synthesize_shell_data(
            &mesh,
            &unit_cond(),
            &pts,
            |p| -field.radial_derivative(p).unwrap(),
            None,
        )
        .unwrap();
        (mesh, data)
    }

    #[test]
    fn kkt_matches_dense_tikhonov_oracle() {
        let (mesh, data) = synthetic_case(0, 32);
        let cond = unit_cond();
        let opts = ReconstructionOptions::default();
        let res = reconstruct(&mesh, &cond, &data.electrodes, &data.d, 1e-8, &opts).unwrap();
        let oracle = build_lead_field_oracle(&mesh, &cond, &data.electrodes, None).unwrap();
        let f_dense = oracle
            .tikhonov_minimizer(&data.d, 1e-8, res.gamma)
            .unwrap();
        let diff: Vec<f64> = res.f.iter().zip(&f_dense).map(|(a, b)| a - b).collect();
        let rel = sparse::norm2(&diff) / sparse::norm2(&f_dense);
        assert!(rel <= 1e-6, "KKT and dense minimizer differ by {rel:.3e}");
    }

    #[test]
    fn oracle_cap_is_enforced() {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let electrodes = scalp_electrodes(&mesh, 8);
        let r = build_lead_field_oracle(&mesh, &unit_cond(), &electrodes, Some(10));
        assert!(matches!(r, Err(Error::Resource(_))));
    }

    #[test]
    fn oracle_first_column_is_forward_and_observe() {
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let electrodes = scalp_electrodes(&mesh, 8);
        let cond = unit_cond();
        let oracle = build_lead_field_oracle(&mesh, &cond, &electrodes, None).unwrap();

        let surf = extract_cortex(&mesh).unwrap();
        let areas = lumped_surface_areas(&mesh, &surf);
        let total: f64 = areas.iter().sum();
        let mut e0 = vec![-areas[0] / total; surf.num_nodes()];
        e0[0] += 1.0;
        let mut fw = ForwardOperator::new(&mesh, &cond).unwrap();
        let u = fw.solve(&e0).unwrap();
        let q = assemble_observation(&mesh, &electrodes).unwrap();
        let want = q.mul_vec(&u);
        for (got, w) in oracle.column(0).iter().zip(&want) {
            assert_relative_eq!(got, w, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn oracle_mirror_symmetry_smoke() {
        // Mirror x -> -x maps the surface triangulation onto itself exactly,
        // but the prism diagonals inside the volume follow global indices,
        // so the tetrahedralization is only approximately mirror-symmetric;
        // columns must agree at discretization accuracy, not bitwise.
        let mesh = build_shell_mesh(0.7, 1.0, 0).unwrap();
        let cond = unit_cond();
        let base = [0.6, 0.7, 0.2];
        let pts = vec![base, [-base[0], base[1], base[2]]];
        let pts = project_radially_to_boundary(&mesh, BoundaryTag::Scalp, &pts).unwrap();
        let electrodes = ElectrodeSet::with_unit_weights(pts).unwrap();
        let oracle = build_lead_field_oracle(&mesh, &cond, &electrodes, None).unwrap();

        let surf = extract_cortex(&mesh).unwrap();
        let mut mirror = HashMap::new();
        for s in 0..surf.num_nodes() {
            let p = surf.position(&mesh, s);
            mirror.insert(vertex_key(p), s);
        }
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for s in 0..surf.num_nodes() {
            let p = surf.position(&mesh, s);
            let m = mirror[&vertex_key([-p[0], p[1], p[2]])];
            // L[electrode 0, column s] vs L[mirrored electrode, mirrored column]
            let a = oracle.column(s)[0];
            let b = oracle.column(m)[1];
            worst = worst.max((a - b).abs());
            scale = scale.max(a.abs());
            checked += 1;
        }
        assert!(checked > 0);
        assert!(
            worst <= 0.05 * scale,
            "mirror asymmetry {worst:.3e} vs scale {scale:.3e}"
        );
    }

    #[test]
    fn reduced_gradient_matches_central_differences() {
        let (mesh, data) = synthetic_case(0, 16);
        let cond = unit_cond();
        let oracle = build_lead_field_oracle(&mesh, &cond, &data.electrodes, None).unwrap();
        let m = oracle.num_controls();
        let (epsilon, gamma) = (1e-6, 1e-10);

        // Deterministic pseudo-random tangent point and directions.
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let areas = oracle.areas.clone();
        let mut f: Vec<f64> = (0..m).map(|_| next()).collect();
        remove_weighted_mean(&mut f, &areas);

        let g = oracle.reduced_gradient(&f, &data.d, epsilon, gamma).unwrap();
        for _ in 0..5 {
            let mut dir: Vec<f64> = (0..m).map(|_| next()).collect();
            remove_weighted_mean(&mut dir, &areas);
            let h = 1e-4;
            let fp: Vec<f64> = f.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
            let fm: Vec<f64> = f.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
            let num = (oracle.phi(&fp, &data.d, epsilon, gamma).unwrap()
                - oracle.phi(&fm, &data.d, epsilon, gamma).unwrap())
                / (2.0 * h);
            let ana = sparse::dot(&g, &dir);
            assert_relative_eq!(num, ana, max_relative = 1e-5);
        }
    }

    #[test]
    fn adjoint_oracle_matches_kkt_multiplier() {
        let (mesh, data) = synthetic_case(0, 32);
        let cond = unit_cond();
        let res = reconstruct(
            &mesh,
            &cond,
            &data.electrodes,
            &data.d,
            1e-8,
            &ReconstructionOptions::default(),
        )
        .unwrap();

        let mut fw = ForwardOperator::new(&mesh, &cond).unwrap();
        let q = assemble_observation(&mesh, &data.electrodes).unwrap();
        let lam_oracle = adjoint_oracle(
            &mut fw,
            &q,
            data.electrodes.weights(),
            &data.d,
            &res.u,
        )
        .unwrap();
        let mut lam = res.lambda.clone();
        fw.remove_volume_mean(&mut lam);
        let diff: Vec<f64> = lam.iter().zip(&lam_oracle).map(|(a, b)| a - b).collect();
        let rel = sparse::norm2(&diff) / sparse::norm2(&lam_oracle);
        assert!(rel <= 1e-8, "adjoint mismatch {rel:.3e}");
    }

    #[test]
    fn noise_free_sweep_is_monotone_and_deterministic() {
        let (mesh, data) = synthetic_case(0, 32);
        let cond = unit_cond();
        let eps = [1e-7, 1e-8, 1e-9, 1e-10];
        let opts = ReconstructionOptions::default();
        let curve = sweep_epsilon(&mesh, &cond, &data.electrodes, &data.d, &eps, &opts).unwrap();
        assert_eq!(curve.points.len(), eps.len());
        for w in curve.points.windows(2) {
            assert!(w[0].epsilon > w[1].epsilon);
            assert!(
                w[1].residual_norm <= w[0].residual_norm * (1.0 + 1e-12),
                "residual grew from {:.6e} to {:.6e}",
                w[0].residual_norm,
                w[1].residual_norm
            );
        }

        let mut csv_a = Vec::new();
        curve.write_csv(&mut csv_a).unwrap();
        let again = sweep_epsilon(&mesh, &cond, &data.electrodes, &data.d, &eps, &opts).unwrap();
        let mut csv_b = Vec::new();
        again.write_csv(&mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b, "sweep must be bit-reproducible");

        let text = String::from_utf8(csv_a).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epsilon,residual_norm,rmse"));
        assert_eq!(lines.count(), eps.len());
    }

    #[test]
    fn sweep_rejects_bad_grids() {
        let (mesh, data) = synthetic_case(0, 8);
        let cond = unit_cond();
        let opts = ReconstructionOptions::default();
        for bad in [vec![], vec![1e-8, -1.0], vec![1e-8, 1e-8]] {
            assert!(matches!(
                sweep_epsilon(&mesh, &cond, &data.electrodes, &data.d, &bad, &opts),
                Err(Error::Parameter(_))
            ));
        }
    }

    #[test]
    fn constant_field_forward_error_is_roundoff() {
        // Constant harmonic field: flux is zero, the interpolant is exact,
        // so the forward error is pure round-off at every level.
        let field = ShellHarmonicField::from_coefficients(0.7, 1.0, vec![2.5]).unwrap();
        let study = forward_convergence(3, &field).unwrap();
        for l in &study.levels {
            assert!(l.h1_error < 1e-10, "level {} H1 {:.3e}", l.level, l.h1_error);
            assert!(l.l2_error < 1e-10, "level {} L2 {:.3e}", l.level, l.l2_error);
        }
    }

    #[test]
    fn study_rejects_too_few_levels() {
        let field = test_field();
        assert!(matches!(
            forward_convergence(2, &field),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            kkt_self_convergence(1, &field),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn pearson_reference_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.0, 6.0, 8.0];
        assert_relative_eq!(pearson(&x, &y).unwrap(), 1.0);
        let z = [-2.0, -4.0, -6.0, -8.0];
        assert_relative_eq!(pearson(&x, &z).unwrap(), -1.0);
        assert!(pearson(&x, &[1.0, 1.0, 1.0, 1.0]).is_err());
    }
}
