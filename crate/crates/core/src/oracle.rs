//! Brute-force reference implementations for verification.
//!
//! Nothing here calls into the assembly, solvers, filter or optimizers of
//! the production path; only plain data (grid sizes, supports, forces,
//! material constants) is shared. Agreement between the two is therefore
//! evidence rather than a tautology.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{LoadCase, StructuredGrid};
use crate::inner::MeanNorm;
use crate::material::{MaterialParams, PlaneModel};

/// Largest DOF count handled by dense linear algebra.
pub const MAX_TINY_DOFS: usize = 50;

/// A small problem solved with dense matrices.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub nx: usize,
    pub ny: usize,
    pub elem_w: f64,
    pub elem_h: f64,
    pub params: MaterialParams,
    pub fixed: Vec<usize>,
    pub force: Vec<f64>,
    pub budget: f64,
    pub norm: MeanNorm,
}

impl TinyInstance {
    pub fn new(
        grid: &StructuredGrid,
        load: &LoadCase,
        params: MaterialParams,
        budget: f64,
        norm: MeanNorm,
    ) -> Result<Self> {
        if grid.n_dofs() > MAX_TINY_DOFS {
            return Err(Error::InvalidParams(format!(
                "tiny instance limited to {MAX_TINY_DOFS} DOFs, got {}",
                grid.n_dofs()
            )));
        }
        Ok(Self {
            nx: grid.nx,
            ny: grid.ny,
            elem_w: grid.elem_w,
            elem_h: grid.elem_h,
            params,
            fixed: load.fixed_dofs().to_vec(),
            force: load.force().to_vec(),
            budget,
            norm,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    fn n_dofs(&self) -> usize {
        2 * (self.nx + 1) * (self.ny + 1)
    }

    fn dofs(&self, e: usize) -> [usize; 8] {
        element_dofs(self.nx, self.ny, e)
    }

    /// Dense reduced stiffness and the free-DOF list.
    pub fn dense_stiffness(&self, rho: &[f64], delta: &[f64]) -> (Vec<Vec<f64>>, Vec<usize>) {
        let ke = element_matrix_3x3_gauss(self.elem_w, self.elem_h, &self.params);
        let nd = self.n_dofs();
        let mut k = vec![vec![0.0; nd]; nd];
        for e in 0..self.n_elements() {
            let s = rho[e].powf(self.params.p) * harmonic(delta[e], &self.params);
            let d = self.dofs(e);
            for a in 0..8 {
                for b in 0..8 {
                    k[d[a]][d[b]] += s * ke[a][b];
                }
            }
        }
        let free: Vec<usize> = (0..nd).filter(|d| !self.fixed.contains(d)).collect();
        let kr = free
            .iter()
            .map(|&i| free.iter().map(|&j| k[i][j]).collect())
            .collect();
        (kr, free)
    }

    /// Mean-constraint weights recomputed from their definition.
    pub fn mean_weights(&self, rho: &[f64]) -> Vec<f64> {
        let v = self.elem_w * self.elem_h;
        let raw: Vec<f64> = rho.iter().map(|r| v * r.powf(self.params.p)).collect();
        let denom = match self.norm {
            MeanNorm::Material => raw.iter().sum::<f64>(),
            MeanNorm::Domain => v * self.n_elements() as f64,
        };
        raw.iter().map(|x| x / denom).collect()
    }
}

fn element_dofs(nx: usize, ny: usize, e: usize) -> [usize; 8] {
    let _ = nx;
    let (i, j) = (e / ny, e % ny);
    let node = |i: usize, j: usize| i * (ny + 1) + j;
    let n = [
        node(i, j),
        node(i + 1, j),
        node(i + 1, j + 1),
        node(i, j + 1),
    ];
    std::array::from_fn(|k| 2 * n[k / 2] + k % 2)
}

fn harmonic(delta: f64, p: &MaterialParams) -> f64 {
    let compliance_modulus = (1.0 - delta) / p.e0 + delta / p.ed;
    1.0 / compliance_modulus
}

fn constitutive(p: &MaterialParams) -> [[f64; 3]; 3] {
    let nu = p.nu;
    let (e11, e12, g) = match p.plane_model {
        PlaneModel::Strain => {
            let lam = nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
            let mu = 1.0 / (2.0 * (1.0 + nu));
            (lam + 2.0 * mu, lam, mu)
        }
        PlaneModel::Stress => {
            let f = 1.0 / (1.0 - nu * nu);
            (f, f * nu, 1.0 / (2.0 * (1.0 + nu)))
        }
    };
    [[e11, e12, 0.0], [e12, e11, 0.0], [0.0, 0.0, g]]
}

/// Q4 element matrix from 3x3 Gauss-Legendre quadrature in physical
/// coordinates (exact for a rectangle, independent of the production rule).
pub fn element_matrix_3x3_gauss(w: f64, h: f64, p: &MaterialParams) -> [[f64; 8]; 8] {
    let c = constitutive(p);
    let pts = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
    let wts = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let mut k = [[0.0; 8]; 8];
    for (gx, wx) in pts.iter().zip(&wts) {
        for (gy, wy) in pts.iter().zip(&wts) {
            let (x, y) = ((gx + 1.0) * w / 2.0, (gy + 1.0) * h / 2.0);
            let mut grads = [(0.0, 0.0); 4];
            for (a, &(cx, cy)) in corners.iter().enumerate() {
                // N_a = (1 - |x - cx|/w)(1 - |y - cy|/h)
                let fx = 1.0 - (x - cx).abs() / w;
                let fy = 1.0 - (y - cy).abs() / h;
                let sx = if cx == 0.0 { -1.0 / w } else { 1.0 / w };
                let sy = if cy == 0.0 { -1.0 / h } else { 1.0 / h };
                grads[a] = (sx * fy, fx * sy);
            }
            let mut b = [[0.0; 8]; 3];
            for (a, &(dx, dy)) in grads.iter().enumerate() {
                b[0][2 * a] = dx;
                b[1][2 * a + 1] = dy;
                b[2][2 * a] = dy;
                b[2][2 * a + 1] = dx;
            }
            let jw = wx * wy * w * h / 4.0;
            for r in 0..8 {
                for s in 0..8 {
                    let mut v = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            v += b[i][r] * c[i][j] * b[j][s];
                        }
                    }
                    k[r][s] += jw * v;
                }
            }
        }
    }
    k
}

/// Gaussian elimination with partial pivoting.
pub fn dense_lu_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[piv][col].abs() <= 1e-14 * scale {
            return Err(Error::Singular(format!("dense pivot {col} vanishes")));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Ok(x)
}

/// Dense state solve; returns the full displacement and `f^T u`.
pub fn dense_solve(inst: &TinyInstance, rho: &[f64], delta: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (k, free) = inst.dense_stiffness(rho, delta);
    let f: Vec<f64> = free.iter().map(|&d| inst.force[d]).collect();
    let x = dense_lu_solve(k, f.clone())?;
    let mut u = vec![0.0; inst.n_dofs()];
    for (&d, &v) in free.iter().zip(&x) {
        u[d] = v;
    }
    let c = f.iter().zip(&x).map(|(a, b)| a * b).sum();
    Ok((u, c))
}

/// Enumerates the feasible defect set
/// `{sum a_e delta_e = 1/2, sum w_e (delta_e - 1/2)^2 = D, 0 <= delta <= 1}`,
/// which is a sphere of dimension `n - 2` cut by the box, and returns the
/// candidate with the largest compliance (lowest index on ties).
pub fn brute_force_worst_case(
    inst: &TinyInstance,
    rho: &[f64],
    resolution: usize,
) -> Result<(Vec<f64>, f64)> {
    let n = inst.n_elements();
    if !(2..=4).contains(&n) {
        return Err(Error::InvalidParams(format!(
            "enumeration supports 2 to 4 elements, got {n}"
        )));
    }
    let candidates = feasible_candidates(inst, rho, resolution)?;
    if candidates.is_empty() {
        return Err(Error::InfeasibleBudget(
            "no enumerated point lies inside the box".into(),
        ));
    }
    let values: Vec<Result<f64>> = candidates
        .par_iter()
        .map(|d| dense_solve(inst, rho, d).map(|(_, c)| c))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        let v = v?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    let (i, c) = best.unwrap();
    Ok((candidates[i].clone(), c))
}

/// Points of the feasible defect set on the enumeration grid.
pub fn feasible_candidates(
    inst: &TinyInstance,
    rho: &[f64],
    resolution: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = inst.n_elements();
    let a = inst.mean_weights(rho);
    let w = 1.0 / n as f64;
    // y = sqrt(w) (delta - 1/2): |y|^2 = D, ahat^T y = c0
    let sw = w.sqrt();
    let ahat: Vec<f64> = a.iter().map(|ai| ai / sw).collect();
    let c0 = 0.5 - 0.5 * a.iter().sum::<f64>();
    let an2: f64 = ahat.iter().map(|v| v * v).sum();
    let y0: Vec<f64> = ahat.iter().map(|v| c0 * v / an2).collect();
    let r2 = inst.budget - y0.iter().map(|v| v * v).sum::<f64>();
    if r2 <= 0.0 {
        return Err(Error::InfeasibleBudget(format!(
            "variance {} unreachable on the mean plane",
            inst.budget
        )));
    }
    let r = r2.sqrt();
    let basis = complement_basis(&ahat);
    let to_delta = |dir: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|e| 0.5 + (y0[e] + r * dir[e]) / sw)
            .collect::<Vec<f64>>()
    };
    let combine = |coef: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|e| coef.iter().zip(&basis).map(|(c, b)| c * b[e]).sum())
            .collect()
    };
    let mut out = Vec::new();
    match n {
        2 => {
            for s in [1.0, -1.0] {
                out.push(to_delta(&combine(&[s])));
            }
        }
        3 => {
            for k in 0..resolution {
                let t = 2.0 * std::f64::consts::PI * k as f64 / resolution as f64;
                out.push(to_delta(&combine(&[t.cos(), t.sin()])));
            }
        }
        _ => {
            for i in 0..=resolution {
                let th = std::f64::consts::PI * i as f64 / resolution as f64;
                for k in 0..resolution {
                    let ph = 2.0 * std::f64::consts::PI * k as f64 / resolution as f64;
                    out.push(to_delta(&combine(&[
                        th.cos(),
                        th.sin() * ph.cos(),
                        th.sin() * ph.sin(),
                    ])));
                }
            }
        }
    }
    out.retain(|d| d.iter().all(|&x| (0.0..=1.0).contains(&x)));
    Ok(out)
}

/// Orthonormal basis of the complement of `v` (Gram-Schmidt on unit vectors).
fn complement_basis(v: &[f64]) -> Vec<Vec<f64>> {
    let n = v.len();
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut basis: Vec<Vec<f64>> = vec![v.iter().map(|x| x / vn).collect()];
    for k in 0..n {
        let mut c = vec![0.0; n];
        c[k] = 1.0;
        for b in &basis {
            let p: f64 = c.iter().zip(b).map(|(x, y)| x * y).sum();
            for (ci, bi) in c.iter_mut().zip(b) {
                *ci -= p * bi;
            }
        }
        let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if cn > 1e-8 && basis.len() < n {
            basis.push(c.iter().map(|x| x / cn).collect());
        }
    }
    basis.remove(0);
    basis
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdProbe {
    pub index: usize,
    pub value: f64,
}

/// Central differences `(J(x + h e_i) - J(x - h e_i)) / 2h` at the given
/// indices, probes evaluated in parallel.
pub fn fd_gradient<F>(
    callback: F,
    x: &[f64],
    probe_indices: &[usize],
    h: f64,
) -> Result<Vec<FdProbe>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::InvalidParams(format!(
            "FD step {h} outside [1e-8, 1e-4]"
        )));
    }
    probe_indices
        .par_iter()
        .map(|&i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let value = (callback(&xp)? - callback(&xm)?) / (2.0 * h);
            Ok(FdProbe { index: i, value })
        })
        .collect()
}

/// Outcome of [`nominal_simp`].
#[derive(Debug, Clone)]
pub struct NominalSimpResult {
    pub rho: Vec<f64>,
    pub rho_phys: Vec<f64>,
    pub compliance: f64,
    pub iterations: usize,
}

/// Independent nominal SIMP pipeline: brute-force cone filter, banded
/// Gaussian elimination, optimality-criteria updates. Defects are held at
/// `delta = 1/2`.
pub fn nominal_simp(
    grid: &StructuredGrid,
    load: &LoadCase,
    params: &MaterialParams,
    volume_fraction: f64,
    radius_elements: f64,
    iterations: usize,
) -> Result<NominalSimpResult> {
    let (nx, ny) = (grid.nx, grid.ny);
    let n = nx * ny;
    let (w, h) = (grid.elem_w, grid.elem_h);
    let rphys = radius_elements * w;
    let centers: Vec<(f64, f64)> = (0..n)
        .map(|e| (((e / ny) as f64 + 0.5) * w, ((e % ny) as f64 + 0.5) * h))
        .collect();
    let mut weights: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<(usize, f64)> = (0..n)
            .filter_map(|j| {
                let d = ((centers[i].0 - centers[j].0).powi(2)
                    + (centers[i].1 - centers[j].1).powi(2))
                .sqrt();
                let wt = rphys - d;
                (wt > 0.0).then_some((j, wt))
            })
            .collect();
        if row.is_empty() {
            row.push((i, 1.0));
        }
        let s: f64 = row.iter().map(|x| x.1).sum();
        row.iter_mut().for_each(|x| x.1 /= s);
        weights.push(row);
    }
    let filt = |x: &[f64]| -> Vec<f64> {
        weights
            .iter()
            .map(|row| row.iter().map(|&(j, wt)| wt * x[j]).sum())
            .collect()
    };
    let filt_t = |g: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (i, row) in weights.iter().enumerate() {
            for &(j, wt) in row {
                out[j] += wt * g[i];
            }
        }
        out
    };
    let ke = element_matrix_3x3_gauss(w, h, params);
    let e_half = harmonic(0.5, params);
    let nd = grid.n_dofs();
    let fixed = load.fixed_dofs();
    let free: Vec<usize> = (0..nd)
        .filter(|d| fixed.binary_search(d).is_err())
        .collect();
    let mut map = vec![usize::MAX; nd];
    for (k, &d) in free.iter().enumerate() {
        map[d] = k;
    }
    let nf = free.len();
    let bw = 2 * (ny + 1) + 3;
    let f: Vec<f64> = free.iter().map(|&d| load.force()[d]).collect();

    let solve = |rho_phys: &[f64]| -> Result<Vec<f64>> {
        // full band rows of width 2 bw + 1, column c at offset c + bw - r
        let width = 2 * bw + 1;
        let mut band = vec![0.0; nf * width];
        for e in 0..n {
            let s = rho_phys[e].powf(params.p) * e_half;
            let d = element_dofs(nx, ny, e);
            for a in 0..8 {
                let r = map[d[a]];
                if r == usize::MAX {
                    continue;
                }
                for b in 0..8 {
                    let c = map[d[b]];
                    if c != usize::MAX {
                        band[r * width + c + bw - r] += s * ke[a][b];
                    }
                }
            }
        }
        let mut rhs = f.clone();
        for k in 0..nf {
            let piv = band[k * width + bw];
            if !(piv > 0.0) {
                return Err(Error::Singular(format!("band pivot {k}")));
            }
            for r in k + 1..(k + bw + 1).min(nf) {
                let l = band[r * width + k + bw - r] / piv;
                if l == 0.0 {
                    continue;
                }
                for c in k..(k + bw + 1).min(nf) {
                    band[r * width + c + bw - r] -= l * band[k * width + c + bw - k];
                }
                rhs[r] -= l * rhs[k];
            }
        }
        let mut x = vec![0.0; nf];
        for k in (0..nf).rev() {
            let mut s = rhs[k];
            for c in k + 1..(k + bw + 1).min(nf) {
                s -= band[k * width + c + bw - k] * x[c];
            }
            x[k] = s / band[k * width + bw];
        }
        Ok(x)
    };

    let mut x = vec![volume_fraction; n];
    let mut compliance = 0.0;
    let mut rho_phys = filt(&x);
    let mut it = 0;
    for k in 0..=iterations {
        rho_phys = filt(&x);
        let ur = solve(&rho_phys)?;
        compliance = ur.iter().zip(&f).map(|(a, b)| a * b).sum();
        it = k;
        if k == iterations {
            break;
        }
        let mut u = vec![0.0; nd];
        for (k, &d) in free.iter().enumerate() {
            u[d] = ur[k];
        }
        let dc: Vec<f64> = (0..n)
            .map(|e| {
                let d = element_dofs(nx, ny, e);
                let mut q = 0.0;
                for a in 0..8 {
                    for b in 0..8 {
                        q += u[d[a]] * ke[a][b] * u[d[b]];
                    }
                }
                -params.p * rho_phys[e].powf(params.p - 1.0) * e_half * q
            })
            .collect();
        let dc = filt_t(&dc);
        let dv = filt_t(&vec![1.0 / n as f64; n]);
        // optimality criteria with bisection on the volume multiplier
        let (mut l1, mut l2) = (0.0, 1e9);
        let mv = 0.2;
        let mut xnew = x.clone();
        while (l2 - l1) / (l1 + l2) > 1e-9 {
            let lm = 0.5 * (l1 + l2);
            for e in 0..n {
                let be = (-dc[e] / (dv[e] * lm)).max(0.0).sqrt();
                xnew[e] = (x[e] * be)
                    .min(x[e] + mv)
                    .min(1.0)
                    .max(x[e] - mv)
                    .max(params.rho_min);
            }
            let vol: f64 = filt(&xnew).iter().sum::<f64>() / n as f64;
            if vol > volume_fraction {
                l1 = lm;
            } else {
                l2 = lm;
            }
        }
        x = xnew;
    }
    Ok(NominalSimpResult {
        rho: x,
        rho_phys,
        compliance,
        iterations: it,
    })
}
