//! Structured Q4 mesh, stiffness assembly, state solve and compliance.
//!
//! Nodes are numbered column-major: node `(i, j)` with `0 <= i <= nx`,
//! `0 <= j <= ny` (j counted from the bottom) has id `i * (ny + 1) + j`
//! and displacement DOFs `2 id` (x) and `2 id + 1` (y). Elements are
//! numbered the same way, `e = i * ny + j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, pcg, BandCholesky, CsrMatrix, PIVOT_RTOL};
use crate::material::{plane_tensor, MaterialParams, BOUND_TOL};

pub type ElementMatrix = [[f64; 8]; 8];

/// Marker for fixed DOFs in the free-DOF index map.
const FIXED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuredGrid {
    pub nx: usize,
    pub ny: usize,
    pub elem_w: f64,
    pub elem_h: f64,
}

impl StructuredGrid {
    pub fn new(nx: usize, ny: usize, width: f64, height: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidParams(format!(
                "grid needs at least one element per axis, got {nx}x{ny}"
            )));
        }
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "domain size must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            nx,
            ny,
            elem_w: width / nx as f64,
            elem_h: height / ny as f64,
        })
    }

    /// Grid of unit square elements.
    pub fn unit(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, nx as f64, ny as f64)
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.n_nodes()
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        i * (self.ny + 1) + j
    }

    pub fn element(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    pub fn element_ij(&self, e: usize) -> (usize, usize) {
        (e / self.ny, e % self.ny)
    }

    /// Counterclockwise from the bottom-left corner.
    pub fn element_nodes(&self, e: usize) -> [usize; 4] {
        let (i, j) = self.element_ij(e);
        [
            self.node(i, j),
            self.node(i + 1, j),
            self.node(i + 1, j + 1),
            self.node(i, j + 1),
        ]
    }

    pub fn element_dofs(&self, e: usize) -> [usize; 8] {
        let n = self.element_nodes(e);
        [
            2 * n[0],
            2 * n[0] + 1,
            2 * n[1],
            2 * n[1] + 1,
            2 * n[2],
            2 * n[2] + 1,
            2 * n[3],
            2 * n[3] + 1,
        ]
    }

    pub fn element_volume(&self) -> f64 {
        self.elem_w * self.elem_h
    }

    pub fn domain_volume(&self) -> f64 {
        self.element_volume() * self.n_elements() as f64
    }

    pub fn centroid(&self, e: usize) -> (f64, f64) {
        let (i, j) = self.element_ij(e);
        (
            (i as f64 + 0.5) * self.elem_w,
            (j as f64 + 0.5) * self.elem_h,
        )
    }

    /// Element reflected about the vertical mid-line.
    pub fn mirror_element(&self, e: usize) -> usize {
        let (i, j) = self.element_ij(e);
        self.element(self.nx - 1 - i, j)
    }

    /// DOF reflected about the vertical mid-line, with the sign the
    /// displacement component picks up under reflection.
    pub fn mirror_dof(&self, dof: usize) -> (usize, f64) {
        let node = dof / 2;
        let (i, j) = (node / (self.ny + 1), node % (self.ny + 1));
        let m = self.node(self.nx - i, j);
        if dof.is_multiple_of(2) {
            (2 * m, -1.0)
        } else {
            (2 * m + 1, 1.0)
        }
    }
}

/// Supports and nodal forces of a single load case.
#[derive(Debug, Clone)]
pub struct LoadCase {
    fixed_dofs: Vec<usize>,
    force: Vec<f64>,
}

impl LoadCase {
    pub fn new(grid: &StructuredGrid, mut fixed_dofs: Vec<usize>, force: Vec<f64>) -> Result<Self> {
        fixed_dofs.sort_unstable();
        fixed_dofs.dedup();
        if fixed_dofs.is_empty() {
            return Err(Error::InvalidParams("load case has no supports".into()));
        }
        if force.len() != grid.n_dofs() {
            return Err(Error::DimensionMismatch(format!(
                "force vector has {} entries, grid has {} DOFs",
                force.len(),
                grid.n_dofs()
            )));
        }
        if let Some(&d) = fixed_dofs.iter().find(|&&d| d >= grid.n_dofs()) {
            return Err(Error::InvalidParams(format!("fixed DOF {d} out of range")));
        }
        if fixed_dofs.iter().any(|&d| force[d] != 0.0) {
            return Err(Error::InvalidParams("force applied on a fixed DOF".into()));
        }
        if force.iter().all(|&f| f == 0.0) {
            return Err(Error::InvalidParams("force vector is zero".into()));
        }
        Ok(Self { fixed_dofs, force })
    }

    /// Left edge clamped, unit downward line load on the bottom
    /// `load_fraction` of the right edge (at least one element edge),
    /// distributed as consistent nodal forces.
    pub fn cantilever(grid: &StructuredGrid, load_fraction: f64) -> Result<Self> {
        let fixed: Vec<usize> = (0..=grid.ny)
            .flat_map(|j| {
                let n = grid.node(0, j);
                [2 * n, 2 * n + 1]
            })
            .collect();
        let edges = ((load_fraction * grid.ny as f64).round() as usize).clamp(1, grid.ny);
        let mut force = vec![0.0; grid.n_dofs()];
        let per_edge = 1.0 / edges as f64;
        for k in 0..edges {
            for j in [k, k + 1] {
                force[2 * grid.node(grid.nx, j) + 1] -= 0.5 * per_edge;
            }
        }
        Self::new(grid, fixed, force)
    }

    pub fn fixed_dofs(&self) -> &[usize] {
        &self.fixed_dofs
    }

    /// Full-length nodal force vector.
    pub fn force(&self) -> &[f64] {
        &self.force
    }

    /// Same supports, force multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            fixed_dofs: self.fixed_dofs.clone(),
            force: self.force.iter().map(|f| f * s).collect(),
        }
    }
}

/// Unit-modulus Q4 element stiffness via 2x2 Gauss quadrature.
pub fn element_stiffness_template(grid: &StructuredGrid, params: &MaterialParams) -> ElementMatrix {
    let c = plane_tensor(params);
    let (w, h) = (grid.elem_w, grid.elem_h);
    let g = 1.0 / 3f64.sqrt();
    let xi_n = [-1.0, 1.0, 1.0, -1.0];
    let eta_n = [-1.0, -1.0, 1.0, 1.0];
    let det_j = w * h / 4.0;
    let mut ke = [[0.0; 8]; 8];
    for &xi in &[-g, g] {
        for &eta in &[-g, g] {
            let mut b = [[0.0; 8]; 3];
            for a in 0..4 {
                let dx = xi_n[a] * (1.0 + eta * eta_n[a]) / 4.0 * (2.0 / w);
                let dy = eta_n[a] * (1.0 + xi * xi_n[a]) / 4.0 * (2.0 / h);
                b[0][2 * a] = dx;
                b[1][2 * a + 1] = dy;
                b[2][2 * a] = dy;
                b[2][2 * a + 1] = dx;
            }
            for r in 0..8 {
                for s in 0..8 {
                    let mut v = 0.0;
                    for k in 0..3 {
                        for l in 0..3 {
                            v += b[k][r] * c[k][l] * b[l][s];
                        }
                    }
                    ke[r][s] += v * det_j;
                }
            }
        }
    }
    ke
}

/// Element energy `u_e^T K u_e` for an element matrix.
#[inline]
pub(crate) fn quad_form(k: &ElementMatrix, ue: &[f64; 8]) -> f64 {
    let mut s = 0.0;
    for r in 0..8 {
        let mut t = 0.0;
        for c in 0..8 {
            t += k[r][c] * ue[c];
        }
        s += ue[r] * t;
    }
    s
}

#[inline]
pub(crate) fn mat_vec8(k: &ElementMatrix, ue: &[f64; 8]) -> [f64; 8] {
    let mut out = [0.0; 8];
    for r in 0..8 {
        out[r] = (0..8).map(|c| k[r][c] * ue[c]).sum();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverBackend {
    /// Banded sparse Cholesky.
    #[default]
    Direct,
    /// Jacobi-preconditioned conjugate gradients.
    Pcg,
}

/// Reduced (Dirichlet-eliminated) stiffness matrix and its factorization.
/// Relative pivot threshold for a matrix assembled from element scales
/// `scales`: [`PIVOT_RTOL`] for uniform scales, lowered with the stiffness
/// contrast so that void-connected hinges still factor.
pub fn pivot_tolerance(scales: &[f64]) -> f64 {
    let (lo, hi) = scales
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &s| {
            (lo.min(s.abs()), hi.max(s.abs()))
        });
    if hi > 0.0 {
        PIVOT_RTOL.min(1e-2 * lo / hi)
    } else {
        PIVOT_RTOL
    }
}

#[derive(Debug, Clone)]
pub struct SparseSpdSystem {
    pub matrix: CsrMatrix,
    backend: SolverBackend,
    factor: Option<BandCholesky>,
}

impl SparseSpdSystem {
    pub fn new(matrix: CsrMatrix, backend: SolverBackend) -> Result<Self> {
        Self::with_pivot_tolerance(matrix, backend, PIVOT_RTOL)
    }

    pub fn with_pivot_tolerance(
        matrix: CsrMatrix,
        backend: SolverBackend,
        rtol: f64,
    ) -> Result<Self> {
        debug_assert!(matrix.is_symmetric(1e-12));
        let factor = match backend {
            SolverBackend::Direct => Some(
                BandCholesky::factor_with_tolerance(&matrix, rtol).map_err(|e| {
                    Error::Singular(format!(
                        "stiffness factorization failed ({e}); supports may leave rigid-body modes"
                    ))
                })?,
            ),
            SolverBackend::Pcg => None,
        };
        Ok(Self {
            matrix,
            backend,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.n
    }

    pub fn backend(&self) -> SolverBackend {
        self.backend
    }

    /// Solves on free DOFs; checks the relative residual against `1e-10`.
    pub fn solve_reduced(&self, b: &[f64]) -> Result<Vec<f64>> {
        let x = match &self.factor {
            Some(f) => f.solve(b),
            None => {
                let mut x = vec![0.0; b.len()];
                pcg(&self.matrix, b, &mut x, 1e-12, 20 * b.len() + 100)?;
                x
            }
        };
        let bn = norm2(b);
        if bn > 0.0 {
            let res = self.relative_residual(&x, b);
            if !(res <= 1e-10) {
                return Err(Error::SolveNotConverged {
                    residual: res,
                    iterations: 0,
                });
            }
        }
        Ok(x)
    }

    pub fn relative_residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut r = vec![0.0; b.len()];
        self.matrix.mul_vec(x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri -= bi;
        }
        norm2(&r) / norm2(b).max(f64::MIN_POSITIVE)
    }
}

/// Mesh, load case and the precomputed scatter structure shared by every
/// assembly on the same grid.
#[derive(Debug, Clone)]
pub struct FemModel {
    pub grid: StructuredGrid,
    pub load: LoadCase,
    pub params: MaterialParams,
    pub backend: SolverBackend,
    ke: ElementMatrix,
    free_index: Vec<u32>,
    free_dofs: Vec<usize>,
    pattern: CsrMatrix,
    /// Per element, the CSR value slot of each local (r, c) pair.
    slots: Vec<[u32; 64]>,
}

impl FemModel {
    pub fn new(grid: StructuredGrid, load: LoadCase, params: MaterialParams) -> Result<Self> {
        params.validate()?;
        if load.force().len() != grid.n_dofs() {
            return Err(Error::DimensionMismatch(
                "load case built for a different grid".into(),
            ));
        }
        let ndof = grid.n_dofs();
        let mut free_index = vec![0u32; ndof];
        for &d in load.fixed_dofs() {
            free_index[d] = FIXED;
        }
        let mut free_dofs = Vec::with_capacity(ndof);
        for (d, slot) in free_index.iter_mut().enumerate() {
            if *slot != FIXED {
                *slot = free_dofs.len() as u32;
                free_dofs.push(d);
            }
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); free_dofs.len()];
        for e in 0..grid.n_elements() {
            let dofs = grid.element_dofs(e);
            for &r in &dofs {
                let fr = free_index[r];
                if fr == FIXED {
                    continue;
                }
                for &c in &dofs {
                    let fc = free_index[c];
                    if fc != FIXED {
                        rows[fr as usize].push(fc as usize);
                    }
                }
            }
        }
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
        }
        let pattern = CsrMatrix::from_pattern(&rows);
        let slots = (0..grid.n_elements())
            .map(|e| {
                let dofs = grid.element_dofs(e);
                let mut s = [FIXED; 64];
                for a in 0..8 {
                    for b in 0..8 {
                        let (fr, fc) = (free_index[dofs[a]], free_index[dofs[b]]);
                        if fr != FIXED && fc != FIXED {
                            s[8 * a + b] =
                                pattern.position(fr as usize, fc as usize).unwrap() as u32;
                        }
                    }
                }
                s
            })
            .collect();
        let ke = element_stiffness_template(&grid, &params);
        Ok(Self {
            grid,
            load,
            params,
            backend: SolverBackend::Direct,
            ke,
            free_index,
            free_dofs,
            pattern,
            slots,
        })
    }

    pub fn with_backend(mut self, backend: SolverBackend) -> Self {
        self.backend = backend;
        self
    }

    pub fn n_elements(&self) -> usize {
        self.grid.n_elements()
    }

    pub fn n_free(&self) -> usize {
        self.free_dofs.len()
    }

    pub fn template(&self) -> &ElementMatrix {
        &self.ke
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }

    /// Index into the reduced system, or `None` for a fixed DOF.
    pub fn free_index(&self, dof: usize) -> Option<usize> {
        let f = self.free_index[dof];
        (f != FIXED).then_some(f as usize)
    }

    pub fn reduce(&self, full: &[f64]) -> Vec<f64> {
        self.free_dofs.iter().map(|&d| full[d]).collect()
    }

    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.grid.n_dofs()];
        for (&d, &v) in self.free_dofs.iter().zip(reduced) {
            full[d] = v;
        }
        full
    }

    pub fn reduced_force(&self) -> Vec<f64> {
        self.reduce(self.load.force())
    }

    pub fn element_displacement(&self, u: &[f64], e: usize) -> [f64; 8] {
        let dofs = self.grid.element_dofs(e);
        std::array::from_fn(|k| u[dofs[k]])
    }

    /// Assembles the reduced matrix from per-element dense blocks; `fill`
    /// writes element `e`'s 8x8 block (row-major) into the buffer.
    pub fn assemble_elementwise(&self, mut fill: impl FnMut(usize, &mut [f64; 64])) -> CsrMatrix {
        let mut m = self.pattern.clone();
        let mut buf = [0.0; 64];
        for (e, slots) in self.slots.iter().enumerate() {
            fill(e, &mut buf);
            for (k, &s) in slots.iter().enumerate() {
                if s != FIXED {
                    m.values[s as usize] += buf[k];
                }
            }
        }
        m
    }

    /// Scatters per-element 8-vectors into a reduced vector.
    pub fn scatter_reduced(&self, e: usize, ve: &[f64; 8], out: &mut [f64]) {
        for (d, v) in self.grid.element_dofs(e).iter().zip(ve) {
            if let Some(f) = self.free_index(*d) {
                out[f] += v;
            }
        }
    }

    /// Global stiffness `sum_e rho_e^p E_eff(delta_e) K`, Dirichlet-reduced.
    pub fn assemble(&self, rho_phys: &[f64], delta: &[f64]) -> Result<SparseSpdSystem> {
        let scale = self.element_scales(rho_phys, delta)?;
        let ke = &self.ke;
        let m = self.assemble_elementwise(|e, buf| {
            for a in 0..8 {
                for b in 0..8 {
                    buf[8 * a + b] = scale[e] * ke[a][b];
                }
            }
        });
        SparseSpdSystem::with_pivot_tolerance(m, self.backend, pivot_tolerance(&scale))
    }

    /// `rho_e^p E_eff(delta_e)` after range checks.
    pub fn element_scales(&self, rho_phys: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_elements();
        if rho_phys.len() != n || delta.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "expected {n} element values, got rho {} / delta {}",
                rho_phys.len(),
                delta.len()
            )));
        }
        let p = &self.params;
        rho_phys
            .iter()
            .zip(delta)
            .map(|(&r, &d)| {
                if !(p.rho_min - BOUND_TOL..=1.0 + BOUND_TOL).contains(&r) {
                    return Err(Error::Domain {
                        what: "rho",
                        value: r,
                        range: "[rho_min, 1]",
                    });
                }
                if !(-BOUND_TOL..=1.0 + BOUND_TOL).contains(&d) {
                    return Err(Error::Domain {
                        what: "delta",
                        value: d,
                        range: "[0, 1]",
                    });
                }
                let (r, d) = (r.clamp(p.rho_min, 1.0), d.clamp(0.0, 1.0));
                Ok(p.penalized(r) * p.modulus(d))
            })
            .collect()
    }

    /// Full-length displacement solving `K u = f`.
    pub fn solve_state(&self, system: &SparseSpdSystem) -> Result<Vec<f64>> {
        self.solve_state_for(system, self.load.force())
    }

    pub fn solve_state_for(&self, system: &SparseSpdSystem, force: &[f64]) -> Result<Vec<f64>> {
        let b = self.reduce(force);
        if b.iter().all(|&v| v == 0.0) {
            return Ok(vec![0.0; self.grid.n_dofs()]);
        }
        Ok(self.expand(&system.solve_reduced(&b)?))
    }

    /// `u_e^T K u_e` per element (unit modulus, unpenalized).
    pub fn unit_energies(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n_elements())
            .map(|e| quad_form(&self.ke, &self.element_displacement(u, e)))
            .collect()
    }

    /// Strain energies `u_e^T K_e(rho, delta) u_e`.
    pub fn element_energies(&self, rho_phys: &[f64], delta: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let scale = self.element_scales(rho_phys, delta)?;
        Ok(self
            .unit_energies(u)
            .into_iter()
            .zip(scale)
            .map(|(q, s)| q * s)
            .collect())
    }

    /// Nominal pipeline: assemble, solve, return `(u, f^T u)`.
    pub fn solve_nominal(&self, rho_phys: &[f64], delta: &[f64]) -> Result<(Vec<f64>, f64)> {
        let sys = self.assemble(rho_phys, delta)?;
        let u = self.solve_state(&sys)?;
        let c = compliance(&self.load, &u);
        Ok((u, c))
    }
}

/// `f^T u`.
pub fn compliance(load: &LoadCase, u: &[f64]) -> f64 {
    load.force().iter().zip(u).map(|(f, u)| f * u).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::PlaneModel;

    fn sym_eigenvalues(m: &ElementMatrix) -> Vec<f64> {
        // cyclic Jacobi, plenty for 8x8
        let mut a = *m;
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..8 {
                for q in p + 1..8 {
                    off += a[p][q] * a[p][q];
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..8 {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..8 {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
            if off < 1e-30 {
                break;
            }
        }
        let mut ev: Vec<f64> = (0..8).map(|i| a[i][i]).collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }

    #[test]
    fn template_rigid_modes_and_value() {
        let grid = StructuredGrid::unit(1, 1).unwrap();
        let ke = element_stiffness_template(&grid, &MaterialParams::default());
        // independent quadrature script: (C11 + C33) / 3
        assert!((ke[0][0] - 0.576_923_076_923).abs() < 1e-5);
        for r in 0..8 {
            for c in 0..8 {
                assert!((ke[r][c] - ke[c][r]).abs() < 1e-15);
            }
        }
        let ev = sym_eigenvalues(&ke);
        let max = ev[7];
        assert!(ev.iter().all(|&v| v >= -1e-12));
        assert_eq!(ev.iter().filter(|&&v| v < 1e-10 * max).count(), 3);
        let tx = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert!(mat_vec8(&ke, &tx).iter().all(|v| v.abs() < 1e-12));
        let ty = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        assert!(mat_vec8(&ke, &ty).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn template_plane_stress_rectangle_is_rigid_invariant() {
        let grid = StructuredGrid::new(2, 1, 3.0, 0.5).unwrap();
        let params = MaterialParams {
            plane_model: PlaneModel::Stress,
            ..Default::default()
        };
        let ke = element_stiffness_template(&grid, &params);
        let ev = sym_eigenvalues(&ke);
        assert_eq!(ev.iter().filter(|&&v| v.abs() < 1e-10 * ev[7]).count(), 3);
        // rotation mode about the element center: u = -y, v = x
        let (w, h) = (grid.elem_w, grid.elem_h);
        let xy = [
            (-w / 2.0, -h / 2.0),
            (w / 2.0, -h / 2.0),
            (w / 2.0, h / 2.0),
            (-w / 2.0, h / 2.0),
        ];
        let rot: [f64; 8] = std::array::from_fn(|k| {
            if k % 2 == 0 {
                -xy[k / 2].1
            } else {
                xy[k / 2].0
            }
        });
        assert!(mat_vec8(&ke, &rot).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_element_assembly_is_scaled_template() {
        let grid = StructuredGrid::unit(1, 1).unwrap();
        let load = LoadCase::cantilever(&grid, 0.05).unwrap();
        let model = FemModel::new(grid, load, MaterialParams::default()).unwrap();
        let sys = model.assemble(&[1.0], &[0.0]).unwrap();
        // free DOFs are the right-hand nodes: local dofs 2..6
        assert_eq!(model.free_dofs(), &[4, 5, 6, 7]);
        for (a, la) in (2..6).enumerate() {
            for (b, lb) in (2..6).enumerate() {
                assert_eq!(sys.matrix.get(a, b), model.template()[la][lb]);
            }
        }
    }

    #[test]
    fn two_element_assembly_scaling() {
        let grid = StructuredGrid::unit(2, 1).unwrap();
        let load = LoadCase::cantilever(&grid, 0.05).unwrap();
        let model = FemModel::new(grid, load, MaterialParams::default()).unwrap();
        let sys = model.assemble(&[1.0, 0.5], &[0.0, 1.0]).unwrap();
        let ke = model.template();
        // node (1,0) is shared: local node 1 of element 0 and local node 0 of element 1
        let dof = 2 * grid.node(1, 0);
        let f = model.free_index(dof).unwrap();
        let want = ke[2][2] + 0.0234375 * ke[0][0];
        assert!((sys.matrix.get(f, f) - want).abs() < 1e-14);
    }

    #[test]
    fn assembly_scales_with_rho_to_the_p() {
        let grid = StructuredGrid::unit(3, 2).unwrap();
        let load = LoadCase::cantilever(&grid, 0.05).unwrap();
        let model = FemModel::new(grid, load, MaterialParams::default()).unwrap();
        let rho = vec![0.8; 6];
        let delta = vec![0.3; 6];
        let a = model.assemble(&rho, &delta).unwrap();
        let rho2: Vec<f64> = rho.iter().map(|r| r * 0.5).collect();
        let b = model.assemble(&rho2, &delta).unwrap();
        for (x, y) in a.matrix.values.iter().zip(&b.matrix.values) {
            assert!((y - x * 0.5f64.powi(5)).abs() <= 1e-15 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn zero_force_gives_zero_displacement() {
        let grid = StructuredGrid::unit(3, 2).unwrap();
        let load = LoadCase::cantilever(&grid, 0.05).unwrap();
        let model = FemModel::new(grid, load, MaterialParams::default()).unwrap();
        let sys = model.assemble(&[1.0; 6], &[0.5; 6]).unwrap();
        let u = model
            .solve_state_for(&sys, &vec![0.0; grid.n_dofs()])
            .unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
        assert_eq!(compliance(&model.load, &u), 0.0);
    }

    #[test]
    fn compliance_energy_identity_and_scaling() {
        let grid = StructuredGrid::unit(6, 3).unwrap();
        let load = LoadCase::cantilever(&grid, 0.05).unwrap();
        let model = FemModel::new(grid, load.clone(), MaterialParams::default()).unwrap();
        let n = grid.n_elements();
        let rho: Vec<f64> = (0..n)
            .map(|e| 0.3 + 0.7 * ((e * 7) % 11) as f64 / 10.0)
            .collect();
        let delta: Vec<f64> = (0..n).map(|e| ((e * 3) % 5) as f64 / 4.0).collect();
        let sys = model.assemble(&rho, &delta).unwrap();
        let u = model.solve_state(&sys).unwrap();
        let c = compliance(&load, &u);
        let ur = model.reduce(&u);
        let mut ku = vec![0.0; ur.len()];
        sys.matrix.mul_vec(&ur, &mut ku);
        let uku: f64 = ur.iter().zip(&ku).map(|(a, b)| a * b).sum();
        assert!(c > 0.0);
        assert!(((c - uku) / c).abs() < 1e-8);
        let q: f64 = model
            .element_energies(&rho, &delta, &u)
            .unwrap()
            .iter()
            .sum();
        assert!(((q - uku) / uku).abs() < 1e-10);

        let u2 = model
            .solve_state_for(&sys, load.scaled(2.0).force())
            .unwrap();
        let c2 = compliance(&load.scaled(2.0), &u2);
        assert!((c2 / c - 4.0).abs() < 1e-10);
    }

    #[test]
    fn backends_agree() {
        let grid = StructuredGrid::unit(12, 6).unwrap();
        let load = LoadCase::cantilever(&grid, 0.05).unwrap();
        let n = grid.n_elements();
        let direct = FemModel::new(grid, load.clone(), MaterialParams::default()).unwrap();
        let iterative = direct.clone().with_backend(SolverBackend::Pcg);
        let rho = vec![0.6; n];
        let delta = vec![0.5; n];
        let (u1, c1) = direct.solve_nominal(&rho, &delta).unwrap();
        let (u2, c2) = iterative.solve_nominal(&rho, &delta).unwrap();
        assert!(((c1 - c2) / c1).abs() < 1e-8);
        let scale = u1.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(u1
            .iter()
            .zip(&u2)
            .all(|(a, b)| (a - b).abs() < 1e-8 * scale));
    }

    #[test]
    fn unsupported_structure_is_singular() {
        let grid = StructuredGrid::unit(2, 1).unwrap();
        // only one DOF pinned: rigid modes remain
        let mut force = vec![0.0; grid.n_dofs()];
        force[2 * grid.node(2, 0) + 1] = -1.0;
        let load = LoadCase::new(&grid, vec![0], force).unwrap();
        let model = FemModel::new(grid, load, MaterialParams::default()).unwrap();
        assert!(matches!(
            model.assemble(&[1.0, 1.0], &[0.5, 0.5]),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn checkerboard_hinges_with_void_still_factor() {
        let grid = StructuredGrid::unit(8, 4).unwrap();
        let load = LoadCase::cantilever(&grid, 0.25).unwrap();
        let model = FemModel::new(grid, load, MaterialParams::default()).unwrap();
        let rho: Vec<f64> = (0..32)
            .map(|e| {
                let (i, j) = model.grid.element_ij(e);
                if (i + j) % 2 == 0 {
                    1.0
                } else {
                    1e-3
                }
            })
            .collect();
        let (u, c) = model.solve_nominal(&rho, &[0.5; 32]).unwrap();
        assert!(c > 0.0 && u.iter().all(|v| v.is_finite()));
        assert!(pivot_tolerance(&[1.0, 1e-15]) < 1e-16);
        assert_eq!(pivot_tolerance(&[0.3; 4]), PIVOT_RTOL);
    }

    #[test]
    fn load_case_invariants() {
        let grid = StructuredGrid::unit(2, 2).unwrap();
        let zero = vec![0.0; grid.n_dofs()];
        assert!(LoadCase::new(&grid, vec![], zero.clone()).is_err());
        assert!(LoadCase::new(&grid, vec![0], zero.clone()).is_err());
        let mut f = zero;
        f[0] = 1.0;
        assert!(LoadCase::new(&grid, vec![0], f).is_err());
        let c = LoadCase::cantilever(&grid, 0.05).unwrap();
        let total: f64 = c.force().iter().sum();
        assert!((total + 1.0).abs() < 1e-15);
    }

    #[test]
    fn mirrored_load_gives_mirrored_energies() {
        // clamped both ends, vertical load at the top middle node
        let grid = StructuredGrid::unit(6, 3).unwrap();
        let mut fixed = Vec::new();
        for j in 0..=grid.ny {
            for i in [0, grid.nx] {
                let n = grid.node(i, j);
                fixed.extend([2 * n, 2 * n + 1]);
            }
        }
        let mut force = vec![0.0; grid.n_dofs()];
        force[2 * grid.node(3, 3) + 1] = -1.0;
        let load = LoadCase::new(&grid, fixed, force).unwrap();
        let model = FemModel::new(grid, load, MaterialParams::default()).unwrap();
        let n = grid.n_elements();
        let rho = vec![0.7; n];
        let delta = vec![0.5; n];
        let (u, _) = model.solve_nominal(&rho, &delta).unwrap();
        let q = model.element_energies(&rho, &delta, &u).unwrap();
        for e in 0..n {
            assert!((q[e] - q[grid.mirror_element(e)]).abs() < 1e-10 * q[e].max(1e-12));
        }
    }
}
