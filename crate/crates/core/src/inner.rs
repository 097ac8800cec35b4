//! Worst-case defect placement for a fixed design.
//!
//! For physical densities `rho` the inner problem is
//!
//! ```text
//! min_{delta, u}  -2 f^T u + sum_e u^T K_e(rho, delta) u
//!                 - mu * sum_e (ln delta_e + ln(1 - delta_e))
//! s.t.            sum_e a_e delta_e = 1/2
//!                 sum_e w_e (delta_e - 1/2)^2 = D
//! ```
//!
//! Stationarity in `u` is the state equation, so the optimal `u` is the
//! displacement of the part with the most damaging admissible defects.
//! The KKT system is solved by a primal-dual Newton method: bound duals
//! `z_l ~ mu/delta`, `z_u ~ mu/(1-delta)` are carried along so that the
//! barrier Hessian stays well scaled near the bounds, and every step
//! eliminates the diagonal `delta` block onto the displacement block, which
//! keeps the sparsity of `K`, plus two border rows for the multipliers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{compliance, mat_vec8, pivot_tolerance, FemModel, LoadCase};
use crate::linalg::{dot, norm_inf, BandCholesky};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MeanNorm {
    /// Weighted mean over effective material, normalized by `sum v_e rho_e^p`.
    #[default]
    Material,
    /// Literal normalization by the domain volume.
    Domain,
}

/// Mean target of the defect parameter.
pub const MEAN_TARGET: f64 = 0.5;

/// Both equality constraints on the defect field for one physical design.
#[derive(Debug, Clone)]
pub struct DefectConstraints {
    pub budget: f64,
    pub norm: MeanNorm,
    /// `a_e` in `sum a_e delta_e = 1/2`.
    pub mean_weights: Vec<f64>,
    /// `w_e = v_e / |Omega|` in the variance constraint.
    pub var_weights: Vec<f64>,
    /// Denominator used for `a_e`: `sum v_e rho_e^p` or `|Omega|`.
    pub normalizer: f64,
    /// `v_e` per element.
    pub volumes: Vec<f64>,
}

impl DefectConstraints {
    pub fn new(model: &FemModel, rho_phys: &[f64], budget: f64, norm: MeanNorm) -> Result<Self> {
        if !(budget > 0.0 && budget < 0.25) {
            return Err(Error::InfeasibleBudget(format!(
                "D = {budget} must lie in (0, 0.25)"
            )));
        }
        let n = model.n_elements();
        if rho_phys.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "expected {n} densities, got {}",
                rho_phys.len()
            )));
        }
        let v = model.grid.element_volume();
        let omega = model.grid.domain_volume();
        let simp: Vec<f64> = rho_phys
            .iter()
            .map(|&r| model.params.penalized(r))
            .collect();
        let normalizer = match norm {
            MeanNorm::Material => simp.iter().map(|s| v * s).sum(),
            MeanNorm::Domain => omega,
        };
        Ok(Self {
            budget,
            norm,
            mean_weights: simp.iter().map(|s| v * s / normalizer).collect(),
            var_weights: vec![v / omega; n],
            normalizer,
            volumes: vec![v; n],
        })
    }

    pub fn len(&self) -> usize {
        self.mean_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_weights.is_empty()
    }

    pub fn mean_residual(&self, delta: &[f64]) -> f64 {
        dot(&self.mean_weights, delta) - MEAN_TARGET
    }

    pub fn var_residual(&self, delta: &[f64]) -> f64 {
        self.var_weights
            .iter()
            .zip(delta)
            .map(|(w, d)| w * (d - 0.5) * (d - 0.5))
            .sum::<f64>()
            - self.budget
    }
}

/// Converged worst-case data for one design.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub delta: Vec<f64>,
    /// Full-length displacement (zeros on fixed DOFs).
    pub u: Vec<f64>,
    pub lambda_mean: f64,
    pub lambda_var: f64,
    /// Bound duals, `z_lower * delta ~ mu` and `z_upper * (1 - delta) ~ mu`.
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
    pub mu: f64,
    pub kkt_residual_inf: f64,
    pub newton_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerSettings {
    pub mu_star: f64,
    pub mu_init: f64,
    pub kkt_tol: f64,
    pub max_newton: usize,
    /// Clamp margin applied to a warm-start defect field before re-projection.
    pub warm_margin: f64,
}

impl Default for InnerSettings {
    fn default() -> Self {
        Self {
            mu_star: 1e-6,
            mu_init: 1e-2,
            kkt_tol: 1e-10,
            max_newton: 100,
            warm_margin: 1e-4,
        }
    }
}

impl InnerSettings {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.mu_star > 0.0 && self.mu_star < 1.0) {
            v.push(format!(
                "inner.mu_star = {} must lie in (0, 1)",
                self.mu_star
            ));
        }
        if !(self.mu_init >= self.mu_star && self.mu_init < 1.0) {
            v.push(format!(
                "inner.mu_init = {} must lie in [mu_star, 1)",
                self.mu_init
            ));
        }
        if !(self.kkt_tol > 0.0) {
            v.push(format!("inner.kkt_tol = {} must be positive", self.kkt_tol));
        }
        if self.max_newton == 0 {
            v.push("inner.max_newton must be at least 1".into());
        }
        if !(self.warm_margin > 0.0 && self.warm_margin < 0.5) {
            v.push(format!(
                "inner.warm_margin = {} must lie in (0, 0.5)",
                self.warm_margin
            ));
        }
        v
    }
}

const FRACTION_TO_BOUNDARY: f64 = 0.995;
const MU_DECREASE: f64 = 0.1;

/// Strictly feasible defect field `delta_e = clamp(1/2 + o + alpha s_e)`
/// satisfying both equalities; `pattern` defaults to alternating `-1, +1`.
pub fn initialize_feasible(
    constraints: &DefectConstraints,
    pattern: Option<&[f64]>,
) -> Result<Vec<f64>> {
    initialize_with_margin(constraints, pattern, 1e-4)
}

fn initialize_with_margin(
    c: &DefectConstraints,
    pattern: Option<&[f64]>,
    margin: f64,
) -> Result<Vec<f64>> {
    let n = c.len();
    if n < 2 {
        return Err(Error::InfeasibleBudget(format!(
            "{n} element(s) cannot carry mean 1/2 and variance D > 0"
        )));
    }
    let alternating: Vec<f64> = (0..n)
        .map(|e| if e % 2 == 0 { -1.0 } else { 1.0 })
        .collect();
    let s = match pattern {
        Some(p) if p.len() == n && p.iter().any(|v| v.abs() > 0.0) => p,
        _ => &alternating[..],
    };
    let (lo, hi) = (margin, 1.0 - margin);
    let eval = |o: f64, alpha: f64| -> Vec<f64> {
        s.iter()
            .map(|si| (0.5 + o + alpha * si).clamp(lo, hi))
            .collect()
    };
    let a_sum: f64 = c.mean_weights.iter().sum();
    let ws2: f64 = c.var_weights.iter().zip(s).map(|(w, s)| w * s * s).sum();
    let mut alpha = (c.budget / ws2).sqrt();
    let mut o = (MEAN_TARGET - 0.5 * a_sum - alpha * dot(&c.mean_weights, s)) / a_sum;
    for _ in 0..200 {
        let d = eval(o, alpha);
        let (f1, f2) = (c.mean_residual(&d), c.var_residual(&d));
        if f1.abs() < 1e-13 && f2.abs() < 1e-13 {
            return Ok(d);
        }
        let (mut j11, mut j12, mut j21, mut j22) = (0.0, 0.0, 0.0, 0.0);
        for e in 0..n {
            let raw = 0.5 + o + alpha * s[e];
            if raw <= lo || raw >= hi {
                continue;
            }
            let (a, w, x) = (c.mean_weights[e], c.var_weights[e], d[e] - 0.5);
            j11 += a;
            j12 += a * s[e];
            j21 += 2.0 * w * x;
            j22 += 2.0 * w * x * s[e];
        }
        let det = j11 * j22 - j12 * j21;
        if det.abs() < 1e-300 || !det.is_finite() {
            break;
        }
        let d_o = -(j22 * f1 - j12 * f2) / det;
        let d_a = -(-j21 * f1 + j11 * f2) / det;
        // keep alpha positive, damp large corrections
        let mut t = 1.0;
        while alpha + t * d_a <= 0.0 {
            t *= 0.5;
        }
        o += t * d_o;
        alpha += t * d_a;
    }
    Err(Error::InfeasibleBudget(format!(
        "could not place defect budget D = {} within ({lo}, {hi})",
        c.budget
    )))
}

/// Residual blocks of the barrier KKT system.
#[derive(Debug, Clone)]
pub struct KktResidual {
    /// `2 (K u - f)` on free DOFs.
    pub u_block: Vec<f64>,
    pub delta_block: Vec<f64>,
    pub mean: f64,
    pub var: f64,
}

impl KktResidual {
    pub fn inf_norm(&self) -> f64 {
        norm_inf(&self.u_block)
            .max(norm_inf(&self.delta_block))
            .max(self.mean.abs())
            .max(self.var.abs())
    }
}

/// Per-element quantities at the current `(u, delta)`.
struct ElementState {
    /// `K u_e` (unit modulus).
    ku: Vec<[f64; 8]>,
    /// `u_e^T K u_e`.
    q: Vec<f64>,
    modulus: Vec<f64>,
    d_modulus: Vec<f64>,
    dd_modulus: Vec<f64>,
}

/// The inner problem for one physical design.
pub struct InnerProblem<'a> {
    pub model: &'a FemModel,
    pub rho_phys: &'a [f64],
    pub constraints: DefectConstraints,
    /// `rho_e^p`.
    simp: Vec<f64>,
}

impl<'a> InnerProblem<'a> {
    pub fn new(
        model: &'a FemModel,
        rho_phys: &'a [f64],
        budget: f64,
        norm: MeanNorm,
    ) -> Result<Self> {
        let constraints = DefectConstraints::new(model, rho_phys, budget, norm)?;
        // range check
        model.element_scales(rho_phys, &vec![0.5; rho_phys.len()])?;
        let simp = rho_phys
            .iter()
            .map(|&r| model.params.penalized(r))
            .collect();
        Ok(Self {
            model,
            rho_phys,
            constraints,
            simp,
        })
    }

    pub fn simp(&self) -> &[f64] {
        &self.simp
    }

    fn element_state(&self, u: &[f64], delta: &[f64]) -> ElementState {
        let n = self.model.n_elements();
        let ke = self.model.template();
        let mut st = ElementState {
            ku: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            modulus: Vec::with_capacity(n),
            d_modulus: Vec::with_capacity(n),
            dd_modulus: Vec::with_capacity(n),
        };
        for e in 0..n {
            let ue = self.model.element_displacement(u, e);
            let ku = mat_vec8(ke, &ue);
            st.q.push(dot(&ue, &ku));
            st.ku.push(ku);
            let (m, dm, ddm) = self.model.params.modulus_with_derivatives(delta[e]);
            st.modulus.push(m);
            st.d_modulus.push(dm);
            st.dd_modulus.push(ddm);
        }
        st
    }

    fn u_residual(&self, st: &ElementState) -> Vec<f64> {
        let mut r = vec![0.0; self.model.n_free()];
        for e in 0..st.ku.len() {
            let s = 2.0 * self.simp[e] * st.modulus[e];
            let v: [f64; 8] = std::array::from_fn(|k| s * st.ku[e][k]);
            self.model.scatter_reduced(e, &v, &mut r);
        }
        for (ri, fi) in r.iter_mut().zip(self.model.reduced_force()) {
            *ri -= 2.0 * fi;
        }
        r
    }

    /// Barrier objective value.
    pub fn objective(&self, delta: &[f64], u: &[f64], mu: f64) -> Result<f64> {
        let n = self.model.n_elements();
        if delta.len() != n || u.len() != self.model.grid.n_dofs() {
            return Err(Error::DimensionMismatch("objective arguments".into()));
        }
        let mut barrier = 0.0;
        for &d in delta {
            let interior = d > 0.0 && d < 1.0;
            if mu > 0.0 && !interior || !(0.0..=1.0).contains(&d) {
                return Err(Error::Domain {
                    what: "delta",
                    value: d,
                    range: "(0, 1)",
                });
            }
            if mu > 0.0 {
                barrier += d.ln() + (1.0 - d).ln();
            }
        }
        let st = self.element_state(u, delta);
        let energy: f64 = (0..n).map(|e| self.simp[e] * st.modulus[e] * st.q[e]).sum();
        Ok(-2.0 * compliance(&self.model.load, u) + energy - mu * barrier)
    }

    fn residual_from_state(
        &self,
        st: &ElementState,
        delta: &[f64],
        lambda_mean: f64,
        lambda_var: f64,
        mu: f64,
    ) -> KktResidual {
        let c = &self.constraints;
        let delta_block = (0..delta.len())
            .map(|e| {
                let d = delta[e];
                self.simp[e] * st.d_modulus[e] * st.q[e] - mu * (1.0 / d - 1.0 / (1.0 - d))
                    + lambda_mean * c.mean_weights[e]
                    + lambda_var * 2.0 * c.var_weights[e] * (d - 0.5)
            })
            .collect();
        KktResidual {
            u_block: self.u_residual(st),
            delta_block,
            mean: c.mean_residual(delta),
            var: c.var_residual(delta),
        }
    }

    /// Stationarity and feasibility residual of the barrier problem.
    pub fn kkt_residual(
        &self,
        delta: &[f64],
        u: &[f64],
        lambda_mean: f64,
        lambda_var: f64,
        mu: f64,
    ) -> KktResidual {
        let st = self.element_state(u, delta);
        self.residual_from_state(&st, delta, lambda_mean, lambda_var, mu)
    }

    /// Exact barrier KKT matrix at a solution, factored. This is the
    /// matrix the adjoint system uses.
    pub fn kkt_factor(&self, sol: &InnerSolution) -> Result<KktFactor> {
        let st = self.element_state(&sol.u, &sol.delta);
        let sigma: Vec<f64> = sol
            .delta
            .iter()
            .map(|d| sol.mu * (1.0 / (d * d) + 1.0 / ((1.0 - d) * (1.0 - d))))
            .collect();
        self.factor_at(&st, &sol.delta, sol.lambda_var, &sigma, false)
    }

    fn factor_at(
        &self,
        st: &ElementState,
        delta: &[f64],
        lambda_var: f64,
        sigma: &[f64],
        allow_regularization: bool,
    ) -> Result<KktFactor> {
        let n = delta.len();
        let c = &self.constraints;
        let h0: Vec<f64> = (0..n)
            .map(|e| {
                self.simp[e] * st.dd_modulus[e] * st.q[e]
                    + 2.0 * lambda_var * c.var_weights[e]
                    + sigma[e]
            })
            .collect();
        let b: Vec<[f64; 8]> = (0..n)
            .map(|e| {
                let s = 2.0 * self.simp[e] * st.d_modulus[e];
                std::array::from_fn(|k| s * st.ku[e][k])
            })
            .collect();
        let g: Vec<f64> = (0..n)
            .map(|e| 2.0 * c.var_weights[e] * (delta[e] - 0.5))
            .collect();
        let kscale: Vec<f64> = (0..n).map(|e| self.simp[e] * st.modulus[e]).collect();
        let scale = norm_inf(&h0).max(f64::MIN_POSITIVE);
        let mut reg = 0.0;
        loop {
            let h: Vec<f64> = h0.iter().map(|v| v + reg).collect();
            match KktFactor::build(self.model, &kscale, h, &b, &c.mean_weights, &g, reg) {
                Ok(f) => return Ok(f),
                Err(e) if !allow_regularization => return Err(e),
                Err(e) => {
                    reg = if reg == 0.0 { 1e-8 * scale } else { reg * 10.0 };
                    if reg > 1e8 * scale {
                        return Err(e);
                    }
                }
            }
        }
    }

    /// Solves the barrier problem. Without a warm start the barrier
    /// parameter is driven from `mu_init` down to `mu_star`; a warm start
    /// runs at `mu_star` directly.
    pub fn solve(
        &self,
        settings: &InnerSettings,
        warm_start: Option<&InnerSolution>,
    ) -> Result<InnerSolution> {
        let mut state = match warm_start {
            Some(prev) => self.warm_state(prev, settings)?,
            None => self.cold_state(settings)?,
        };
        let mut iters = 0;
        let mut mu = if warm_start.is_some() {
            settings.mu_star
        } else {
            settings.mu_init.max(settings.mu_star)
        };
        if warm_start.is_none() {
            state.recenter_duals(mu);
        }
        loop {
            let last = mu <= settings.mu_star;
            let tol = if last {
                settings.kkt_tol
            } else {
                settings.kkt_tol.max(mu)
            };
            self.newton(&mut state, mu, tol, settings.max_newton, &mut iters)?;
            if last {
                break;
            }
            mu = (mu * MU_DECREASE).max(settings.mu_star);
        }
        let res = self.kkt_residual(
            &state.delta,
            &state.u,
            state.lambda_mean,
            state.lambda_var,
            mu,
        );
        Ok(state.into_solution(mu, res.inf_norm(), iters))
    }

    fn cold_state(&self, settings: &InnerSettings) -> Result<PdState> {
        let n = self.model.n_elements();
        // first-order worst case: maximize g^T x over the plane/ellipsoid
        let half = vec![0.5; n];
        let sys = self.model.assemble(self.rho_phys, &half)?;
        let u0 = self.model.solve_state(&sys)?;
        let st = self.element_state(&u0, &half);
        let c = &self.constraints;
        let grad: Vec<f64> = (0..n)
            .map(|e| -self.simp[e] * st.d_modulus[e] * st.q[e])
            .collect();
        let winv = |e: usize| 1.0 / c.var_weights[e];
        let num: f64 = (0..n).map(|e| c.mean_weights[e] * winv(e) * grad[e]).sum();
        let den: f64 = (0..n)
            .map(|e| c.mean_weights[e] * winv(e) * c.mean_weights[e])
            .sum();
        let kappa = num / den;
        let pattern: Vec<f64> = (0..n)
            .map(|e| winv(e) * (grad[e] - kappa * c.mean_weights[e]))
            .collect();
        let delta = initialize_with_margin(c, Some(&pattern), 1e-2)
            .or_else(|_| initialize_with_margin(c, None, 1e-2))?;
        let sys = self.model.assemble(self.rho_phys, &delta)?;
        let u = self.model.solve_state(&sys)?;
        let mu = settings.mu_init.max(settings.mu_star);
        let mut s = PdState {
            z_lower: vec![0.0; n],
            z_upper: vec![0.0; n],
            delta,
            u,
            lambda_mean: 0.0,
            lambda_var: 0.0,
        };
        s.recenter_duals(mu);
        Ok(s)
    }

    fn warm_state(&self, prev: &InnerSolution, settings: &InnerSettings) -> Result<PdState> {
        let n = self.model.n_elements();
        if prev.delta.len() != n || prev.u.len() != self.model.grid.n_dofs() {
            return Err(Error::DimensionMismatch(
                "warm start from another grid".into(),
            ));
        }
        let m = settings.warm_margin;
        let pattern: Vec<f64> = prev
            .delta
            .iter()
            .map(|d| d.clamp(m, 1.0 - m) - 0.5)
            .collect();
        let delta = initialize_with_margin(&self.constraints, Some(&pattern), m)?;
        let mut s = PdState {
            z_lower: vec![0.0; n],
            z_upper: vec![0.0; n],
            delta,
            u: prev.u.clone(),
            lambda_mean: prev.lambda_mean,
            lambda_var: prev.lambda_var,
        };
        s.recenter_duals(settings.mu_star);
        Ok(s)
    }

    /// Primal-dual residual: barrier KKT blocks with `mu/delta` replaced by
    /// the duals, plus complementarity.
    fn pd_merit(&self, s: &PdState, st: &ElementState, mu: f64) -> f64 {
        let c = &self.constraints;
        let ru = self.u_residual(st);
        let mut sum = dot(&ru, &ru);
        for e in 0..s.delta.len() {
            let d = s.delta[e];
            let rd = self.simp[e] * st.d_modulus[e] * st.q[e] - s.z_lower[e]
                + s.z_upper[e]
                + s.lambda_mean * c.mean_weights[e]
                + s.lambda_var * 2.0 * c.var_weights[e] * (d - 0.5);
            let cl = s.z_lower[e] * d - mu;
            let cu = s.z_upper[e] * (1.0 - d) - mu;
            sum += rd * rd + cl * cl + cu * cu;
        }
        let (rm, rv) = (c.mean_residual(&s.delta), c.var_residual(&s.delta));
        sum + rm * rm + rv * rv
    }

    fn newton(
        &self,
        s: &mut PdState,
        mu: f64,
        tol: f64,
        max_iter: usize,
        iters: &mut usize,
    ) -> Result<()> {
        let n = s.delta.len();
        loop {
            let st = self.element_state(&s.u, &s.delta);
            let res = self.residual_from_state(&st, &s.delta, s.lambda_mean, s.lambda_var, mu);
            let rnorm = res.inf_norm();
            if !rnorm.is_finite() {
                return Err(Error::Unconverged(rnorm));
            }
            if rnorm <= tol {
                return Ok(());
            }
            if *iters >= max_iter {
                let best = s.clone().into_solution(mu, rnorm, *iters);
                return Err(Error::InnerMaxIterations {
                    iterations: *iters,
                    residual: rnorm,
                    best: Box::new(best),
                });
            }
            *iters += 1;

            let sigma: Vec<f64> = (0..n)
                .map(|e| s.z_lower[e] / s.delta[e] + s.z_upper[e] / (1.0 - s.delta[e]))
                .collect();
            let f = self.factor_at(&st, &s.delta, s.lambda_var, &sigma, true)?;
            let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<f64>>();
            let step = f.solve(
                self.model,
                &neg(&res.u_block),
                &neg(&res.delta_block),
                -res.mean,
                -res.var,
            )?;
            let dzl: Vec<f64> = (0..n)
                .map(|e| (mu - s.z_lower[e] * (s.delta[e] + step.delta[e])) / s.delta[e])
                .collect();
            let dzu: Vec<f64> = (0..n)
                .map(|e| {
                    (mu - s.z_upper[e] * (1.0 - s.delta[e] - step.delta[e])) / (1.0 - s.delta[e])
                })
                .collect();

            let tau = FRACTION_TO_BOUNDARY.max(1.0 - mu);
            let mut alpha_max: f64 = 1.0;
            for e in 0..n {
                let (d, dd) = (s.delta[e], step.delta[e]);
                if dd < 0.0 {
                    alpha_max = alpha_max.min(-tau * d / dd);
                } else if dd > 0.0 {
                    alpha_max = alpha_max.min(tau * (1.0 - d) / dd);
                }
                if dzl[e] < 0.0 {
                    alpha_max = alpha_max.min(-tau * s.z_lower[e] / dzl[e]);
                }
                if dzu[e] < 0.0 {
                    alpha_max = alpha_max.min(-tau * s.z_upper[e] / dzu[e]);
                }
            }

            let du = self.model.expand(&step.u);
            let phi0 = self.pd_merit(s, &st, mu);
            let mut alpha = alpha_max;
            let mut accepted = None;
            for _ in 0..40 {
                let trial = s.stepped(alpha, &du, &step, &dzl, &dzu);
                let tst = self.element_state(&trial.u, &trial.delta);
                let phi = self.pd_merit(&trial, &tst, mu);
                if phi <= (1.0 - 1e-4 * alpha) * phi0 {
                    accepted = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
            *s = match accepted {
                Some(t) => t,
                // no decrease: take the damped step anyway
                None => s.stepped(alpha, &du, &step, &dzl, &dzu),
            };
            s.safeguard_duals(mu);
        }
    }
}

#[derive(Debug, Clone)]
struct PdState {
    delta: Vec<f64>,
    u: Vec<f64>,
    lambda_mean: f64,
    lambda_var: f64,
    z_lower: Vec<f64>,
    z_upper: Vec<f64>,
}

impl PdState {
    fn recenter_duals(&mut self, mu: f64) {
        for e in 0..self.delta.len() {
            self.z_lower[e] = mu / self.delta[e];
            self.z_upper[e] = mu / (1.0 - self.delta[e]);
        }
    }

    /// Keeps `z * slack` within a factor 1e10 of `mu`.
    fn safeguard_duals(&mut self, mu: f64) {
        const K: f64 = 1e10;
        for e in 0..self.delta.len() {
            let (l, u) = (self.delta[e], 1.0 - self.delta[e]);
            self.z_lower[e] = self.z_lower[e].clamp(mu / (K * l), K * mu / l);
            self.z_upper[e] = self.z_upper[e].clamp(mu / (K * u), K * mu / u);
        }
    }

    fn stepped(&self, alpha: f64, du: &[f64], step: &KktStep, dzl: &[f64], dzu: &[f64]) -> Self {
        Self {
            delta: self
                .delta
                .iter()
                .zip(&step.delta)
                .map(|(d, dd)| d + alpha * dd)
                .collect(),
            u: self.u.iter().zip(du).map(|(u, d)| u + alpha * d).collect(),
            lambda_mean: self.lambda_mean + alpha * step.lambda_mean,
            lambda_var: self.lambda_var + alpha * step.lambda_var,
            z_lower: self
                .z_lower
                .iter()
                .zip(dzl)
                .map(|(z, d)| z + alpha * d)
                .collect(),
            z_upper: self
                .z_upper
                .iter()
                .zip(dzu)
                .map(|(z, d)| z + alpha * d)
                .collect(),
        }
    }

    fn into_solution(self, mu: f64, residual: f64, iters: usize) -> InnerSolution {
        InnerSolution {
            delta: self.delta,
            u: self.u,
            lambda_mean: self.lambda_mean,
            lambda_var: self.lambda_var,
            z_lower: self.z_lower,
            z_upper: self.z_upper,
            mu,
            kkt_residual_inf: residual,
            newton_iters: iters,
        }
    }
}

/// Solution of one bordered KKT solve.
#[derive(Debug, Clone)]
pub struct KktStep {
    /// Free-DOF block.
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub lambda_mean: f64,
    pub lambda_var: f64,
}

/// Factorization of the symmetric bordered KKT matrix
///
/// ```text
/// [ 2K   B    0   0 ]
/// [ B^T  H    a   g ]
/// [ 0    a^T  0   0 ]
/// [ 0    g^T  0   0 ]
/// ```
///
/// with diagonal `H`, obtained by eliminating `H` onto the displacement
/// block (`S = 2K - B H^-1 B^T`, same sparsity as `K`) and then the two
/// multipliers through a 2x2 Schur complement.
pub struct KktFactor {
    kscale: Vec<f64>,
    h: Vec<f64>,
    b: Vec<[f64; 8]>,
    a: Vec<f64>,
    g: Vec<f64>,
    schur: BandCholesky,
    x_mean: Vec<f64>,
    x_var: Vec<f64>,
    t_mean: Vec<f64>,
    t_var: Vec<f64>,
    border: [[f64; 2]; 2],
    /// Diagonal shift added to `H` to obtain the factorization.
    pub regularization: f64,
}

impl KktFactor {
    fn build(
        model: &FemModel,
        kscale: &[f64],
        h: Vec<f64>,
        b: &[[f64; 8]],
        a: &[f64],
        g: &[f64],
        regularization: f64,
    ) -> Result<Self> {
        if let Some((row, &pivot)) = h.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::NotPositiveDefinite { row, pivot });
        }
        let ke = model.template();
        let s_mat = model.assemble_elementwise(|e, buf| {
            let (k2, inv_h) = (2.0 * kscale[e], 1.0 / h[e]);
            for r in 0..8 {
                for c in 0..8 {
                    buf[8 * r + c] = k2 * ke[r][c] - b[e][r] * b[e][c] * inv_h;
                }
            }
        });
        let schur = BandCholesky::factor_with_tolerance(&s_mat, pivot_tolerance(kscale))?;
        let nf = model.n_free();
        let mut t_mean = vec![0.0; nf];
        let mut t_var = vec![0.0; nf];
        for e in 0..h.len() {
            let (cm, cv) = (a[e] / h[e], g[e] / h[e]);
            model.scatter_reduced(e, &std::array::from_fn(|k| b[e][k] * cm), &mut t_mean);
            model.scatter_reduced(e, &std::array::from_fn(|k| b[e][k] * cv), &mut t_var);
        }
        let x_mean = schur.solve(&t_mean);
        let x_var = schur.solve(&t_var);
        let sum = |f: &dyn Fn(usize) -> f64| (0..h.len()).map(f).sum::<f64>();
        let border = [
            [
                dot(&t_mean, &x_mean) + sum(&|e| a[e] * a[e] / h[e]),
                dot(&t_mean, &x_var) + sum(&|e| a[e] * g[e] / h[e]),
            ],
            [
                dot(&t_var, &x_mean) + sum(&|e| g[e] * a[e] / h[e]),
                dot(&t_var, &x_var) + sum(&|e| g[e] * g[e] / h[e]),
            ],
        ];
        let det = border[0][0] * border[1][1] - border[0][1] * border[1][0];
        if !(det.abs() > 1e-300) || !det.is_finite() {
            return Err(Error::Singular(
                "constraint gradients are linearly dependent".into(),
            ));
        }
        Ok(Self {
            kscale: kscale.to_vec(),
            h,
            b: b.to_vec(),
            a: a.to_vec(),
            g: g.to_vec(),
            schur,
            x_mean,
            x_var,
            t_mean,
            t_var,
            border,
            regularization,
        })
    }

    /// Solves the bordered system for the right-hand side `(ru, rd, rm, rv)`.
    pub fn solve(
        &self,
        model: &FemModel,
        ru: &[f64],
        rd: &[f64],
        rm: f64,
        rv: f64,
    ) -> Result<KktStep> {
        let n = self.h.len();
        let mut rhs = ru.to_vec();
        let mut am = 0.0;
        let mut av = 0.0;
        for e in 0..n {
            let c = rd[e] / self.h[e];
            model.scatter_reduced(e, &std::array::from_fn(|k| -self.b[e][k] * c), &mut rhs);
            am += self.a[e] * c;
            av += self.g[e] * c;
        }
        let x0 = self.schur.solve(&rhs);
        let r1 = am - dot(&self.t_mean, &x0) - rm;
        let r2 = av - dot(&self.t_var, &x0) - rv;
        let m = &self.border;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let lm = (m[1][1] * r1 - m[0][1] * r2) / det;
        let lv = (-m[1][0] * r1 + m[0][0] * r2) / det;
        let u: Vec<f64> = (0..x0.len())
            .map(|i| x0[i] + self.x_mean[i] * lm + self.x_var[i] * lv)
            .collect();
        let delta = (0..n)
            .map(|e| {
                let bu = gather_dot(model, e, &self.b[e], &u);
                (rd[e] - bu - self.a[e] * lm - self.g[e] * lv) / self.h[e]
            })
            .collect();
        Ok(KktStep {
            u,
            delta,
            lambda_mean: lm,
            lambda_var: lv,
        })
    }

    /// Multiplies the (regularized) KKT matrix with a vector.
    pub fn apply(&self, model: &FemModel, x: &KktStep) -> KktStep {
        let n = self.h.len();
        let ke = model.template();
        let mut ru = vec![0.0; model.n_free()];
        let mut rd = vec![0.0; n];
        for e in 0..n {
            let ue = gather(model, e, &x.u);
            let ku = mat_vec8(ke, &ue);
            let v: [f64; 8] =
                std::array::from_fn(|k| 2.0 * self.kscale[e] * ku[k] + self.b[e][k] * x.delta[e]);
            model.scatter_reduced(e, &v, &mut ru);
            rd[e] = dot(&self.b[e], &ue)
                + self.h[e] * x.delta[e]
                + self.a[e] * x.lambda_mean
                + self.g[e] * x.lambda_var;
        }
        KktStep {
            u: ru,
            delta: rd,
            lambda_mean: dot(&self.a, &x.delta),
            lambda_var: dot(&self.g, &x.delta),
        }
    }
}

fn gather(model: &FemModel, e: usize, reduced: &[f64]) -> [f64; 8] {
    let dofs = model.grid.element_dofs(e);
    std::array::from_fn(|k| model.free_index(dofs[k]).map_or(0.0, |f| reduced[f]))
}

fn gather_dot(model: &FemModel, e: usize, v: &[f64; 8], reduced: &[f64]) -> f64 {
    dot(v, &gather(model, e, reduced))
}

/// Builds the constraints and solves the inner problem in one call.
pub fn solve_inner(
    model: &FemModel,
    rho_phys: &[f64],
    budget: f64,
    norm: MeanNorm,
    settings: &InnerSettings,
    warm_start: Option<&InnerSolution>,
) -> Result<InnerSolution> {
    InnerProblem::new(model, rho_phys, budget, norm)?.solve(settings, warm_start)
}

/// `f^T u` at the worst-case defect placement.
pub fn worst_case_compliance(load: &LoadCase, sol: &InnerSolution) -> f64 {
    compliance(load, &sol.u)
}

/// `||K(rho, delta) u - f|| / ||f||` for a solution.
pub fn equilibrium_residual(
    model: &FemModel,
    rho_phys: &[f64],
    sol: &InnerSolution,
) -> Result<f64> {
    let sys = model.assemble(rho_phys, &sol.delta)?;
    Ok(sys.relative_residual(&model.reduce(&sol.u), &model.reduced_force()))
}

/// Standard log-barrier optimality gap `m * mu` for `m = 2n` bound terms,
/// in compliance units.
pub fn barrier_gap_bound(n_elements: usize, mu: f64) -> f64 {
    2.0 * n_elements as f64 * mu
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::StructuredGrid;
    use crate::material::MaterialParams;
    use crate::oracle::{brute_force_worst_case, dense_solve, TinyInstance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cantilever(nx: usize, ny: usize, params: MaterialParams) -> FemModel {
        let grid = StructuredGrid::unit(nx, ny).unwrap();
        let load = LoadCase::cantilever(&grid, 0.05).unwrap();
        FemModel::new(grid, load, params).unwrap()
    }

    fn constraints(model: &FemModel, rho: &[f64], d: f64) -> DefectConstraints {
        DefectConstraints::new(model, rho, d, MeanNorm::Material).unwrap()
    }

    #[test]
    fn alternating_start_is_exact() {
        let model = cantilever(4, 2, MaterialParams::default());
        let c = constraints(&model, &[1.0; 8], 0.04);
        let d = initialize_feasible(&c, None).unwrap();
        for (e, v) in d.iter().enumerate() {
            let want = if e % 2 == 0 { 0.3 } else { 0.7 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn start_respects_weights_and_small_budget() {
        let model = cantilever(3, 2, MaterialParams::default());
        let rho = [0.2, 1.0, 0.7, 0.5, 0.9, 0.3];
        let c = constraints(&model, &rho, 0.05);
        let d = initialize_feasible(&c, None).unwrap();
        assert!(c.mean_residual(&d).abs() < 1e-10 && c.var_residual(&d).abs() < 1e-10);
        assert!(d.iter().all(|&x| x > 0.0 && x < 1.0));

        let c = constraints(&model, &rho, 1e-8);
        let d = initialize_feasible(&c, None).unwrap();
        assert!(d.iter().all(|x| (x - 0.5).abs() <= 1e-3));
    }

    #[test]
    fn infeasible_budgets_are_rejected() {
        let model = cantilever(1, 1, MaterialParams::default());
        let c = constraints(&model, &[1.0], 0.02);
        assert!(matches!(
            initialize_feasible(&c, None),
            Err(Error::InfeasibleBudget(_))
        ));
        let model = cantilever(2, 1, MaterialParams::default());
        for d in [0.0, 0.25, 0.3, -1.0] {
            assert!(DefectConstraints::new(&model, &[1.0, 1.0], d, MeanNorm::Material).is_err());
        }
        assert!(DefectConstraints::new(&model, &[1.0], 0.02, MeanNorm::Material).is_err());
    }

    #[test]
    fn mean_constraint_is_centered() {
        let model = cantilever(3, 2, MaterialParams::default());
        let rho = [0.2, 1.0, 0.7, 0.5, 0.9, 0.3];
        let c = constraints(&model, &rho, 0.02);
        assert!(c.mean_residual(&[0.5; 6]).abs() < 1e-15);
        let c = DefectConstraints::new(&model, &[1.0; 6], 0.02, MeanNorm::Domain).unwrap();
        assert!(c.mean_residual(&[0.5; 6]).abs() < 1e-15);
    }

    #[test]
    fn objective_identities() {
        let model = cantilever(3, 2, MaterialParams::default());
        let rho = vec![0.8; 6];
        let p = InnerProblem::new(&model, &rho, 0.02, MeanNorm::Material).unwrap();
        let zero = vec![0.0; model.grid.n_dofs()];
        assert_eq!(p.objective(&[0.5; 6], &zero, 0.0).unwrap(), 0.0);

        let delta = [0.2, 0.4, 0.6, 0.8, 0.5, 0.3];
        let (u, c) = model.solve_nominal(&rho, &delta).unwrap();
        let j = p.objective(&delta, &u, 0.0).unwrap();
        assert!((j + c).abs() < 1e-8 * c);
        assert!(p
            .objective(&[0.0, 0.4, 0.6, 0.8, 0.5, 0.3], &u, 1e-6)
            .is_err());
        assert!(p
            .objective(&[1.2, 0.4, 0.6, 0.8, 0.5, 0.3], &u, 0.0)
            .is_err());
    }

    #[test]
    fn objective_is_midpoint_convex() {
        let model = cantilever(2, 2, MaterialParams::default());
        let rho = vec![1.0, 0.5, 0.8, 0.3];
        let p = InnerProblem::new(&model, &rho, 0.02, MeanNorm::Material).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let nd = model.grid.n_dofs();
        let sample = |rng: &mut ChaCha8Rng| {
            let d: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..0.99)).collect();
            let u: Vec<f64> = model.expand(
                &model.reduce(
                    &(0..nd)
                        .map(|_| rng.gen_range(-5.0..5.0))
                        .collect::<Vec<_>>(),
                ),
            );
            (d, u)
        };
        for _ in 0..100 {
            let (d1, u1) = sample(&mut rng);
            let (d2, u2) = sample(&mut rng);
            let dm: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| 0.5 * (a + b)).collect();
            let um: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| 0.5 * (a + b)).collect();
            let jm = p.objective(&dm, &um, 1e-4).unwrap();
            let ja =
                0.5 * (p.objective(&d1, &u1, 1e-4).unwrap() + p.objective(&d2, &u2, 1e-4).unwrap());
            assert!(jm <= ja + 1e-12);
        }
    }

    #[test]
    fn residual_degenerate_and_linear() {
        let params = MaterialParams {
            ed: 1.0,
            ..Default::default()
        };
        let model = cantilever(3, 2, params);
        let rho = vec![0.9; 6];
        let p = InnerProblem::new(&model, &rho, 0.02, MeanNorm::Material).unwrap();
        let (u, _) = model.solve_nominal(&rho, &[0.5; 6]).unwrap();
        let r = p.kkt_residual(&[0.5; 6], &u, 0.0, 0.0, 0.0);
        assert!(norm_inf(&r.delta_block) == 0.0);
        assert!(norm_inf(&r.u_block) < 1e-10);

        let model = cantilever(3, 2, MaterialParams::default());
        let p = InnerProblem::new(&model, &rho, 0.02, MeanNorm::Material).unwrap();
        let delta = [0.3, 0.6, 0.4, 0.7, 0.5, 0.45];
        let r0 = p.kkt_residual(&delta, &u, 0.3, 0.2, 1e-3);
        let r1 = p.kkt_residual(&delta, &u, 0.3 + 0.01, 0.2, 1e-3);
        for e in 0..6 {
            let d = r1.delta_block[e] - r0.delta_block[e];
            assert!((d - 0.01 * p.constraints.mean_weights[e]).abs() < 1e-15);
        }
    }

    #[test]
    fn converged_solution_invariants() {
        let model = cantilever(6, 3, MaterialParams::default());
        let rho: Vec<f64> = (0..18)
            .map(|e| 0.4 + 0.6 * ((e * 7) % 5) as f64 / 4.0)
            .collect();
        let settings = InnerSettings::default();
        let sol = solve_inner(&model, &rho, 0.02, MeanNorm::Material, &settings, None).unwrap();
        assert!(sol.kkt_residual_inf <= 1e-10);
        assert!(sol.delta.iter().all(|&d| d > 0.0 && d < 1.0));
        assert!(equilibrium_residual(&model, &rho, &sol).unwrap() <= 1e-9);
        let p = InnerProblem::new(&model, &rho, 0.02, MeanNorm::Material).unwrap();
        assert!(p.constraints.mean_residual(&sol.delta).abs() <= 1e-10);
        assert!(p.constraints.var_residual(&sol.delta).abs() <= 1e-10);

        // saddle value: 2 f^T u - u^T K u = f^T u
        let c = worst_case_compliance(&model.load, &sol);
        let energy: f64 = model
            .element_energies(&rho, &sol.delta, &sol.u)
            .unwrap()
            .iter()
            .sum();
        assert!(((2.0 * c - energy) - c).abs() <= 1e-8 * c);

        let (_, nominal) = model.solve_nominal(&rho, &[0.5; 18]).unwrap();
        assert!(c > nominal);
    }

    #[test]
    fn worst_case_grows_with_budget() {
        let model = cantilever(6, 3, MaterialParams::default());
        let rho = vec![1.0; 18];
        let s = InnerSettings::default();
        let c: Vec<f64> = [0.01, 0.02, 0.04]
            .iter()
            .map(|&d| {
                worst_case_compliance(
                    &model.load,
                    &solve_inner(&model, &rho, d, MeanNorm::Material, &s, None).unwrap(),
                )
            })
            .collect();
        assert!(c[0] < c[1] && c[1] < c[2], "{c:?}");
    }

    #[test]
    fn barrier_parameter_consistency() {
        let model = cantilever(4, 2, MaterialParams::default());
        let rho = vec![1.0; 8];
        let s1 = InnerSettings::default();
        let s2 = InnerSettings {
            mu_star: 0.5 * s1.mu_star,
            ..s1
        };
        let a = solve_inner(&model, &rho, 0.02, MeanNorm::Material, &s1, None).unwrap();
        let b = solve_inner(&model, &rho, 0.02, MeanNorm::Material, &s2, None).unwrap();
        let gap =
            (worst_case_compliance(&model.load, &a) - worst_case_compliance(&model.load, &b)).abs();
        assert!(gap <= barrier_gap_bound(8, s1.mu_star));
    }

    #[test]
    fn defects_gather_on_loaded_element() {
        let model = cantilever(2, 1, MaterialParams::default());
        let rho = [1.0, 1.0];
        let sol = solve_inner(
            &model,
            &rho,
            0.04,
            MeanNorm::Material,
            &InnerSettings::default(),
            None,
        )
        .unwrap();
        let q = model.unit_energies(&model.solve_nominal(&rho, &[0.5, 0.5]).unwrap().0);
        let (hi, lo) = if q[0] > q[1] { (0, 1) } else { (1, 0) };
        assert!(sol.delta[hi] > sol.delta[lo]);
        assert!((sol.delta[hi] - 0.7).abs() < 1e-9 && (sol.delta[lo] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn symmetric_pair_has_mirrored_optima() {
        // two stacked elements, clamped left, load centred on the right edge
        let grid = StructuredGrid::unit(1, 2).unwrap();
        let mut force = vec![0.0; grid.n_dofs()];
        force[2 * grid.node(1, 1)] = 1.0;
        let fixed = (0..=2)
            .flat_map(|j| [2 * grid.node(0, j), 2 * grid.node(0, j) + 1])
            .collect();
        let load = LoadCase::new(&grid, fixed, force).unwrap();
        let model = FemModel::new(grid, load, MaterialParams::default()).unwrap();
        let rho = [1.0, 1.0];
        let sol = solve_inner(
            &model,
            &rho,
            0.04,
            MeanNorm::Material,
            &InnerSettings::default(),
            None,
        )
        .unwrap();
        let mut d = sol.delta.clone();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((d[0] - 0.3).abs() < 1e-9 && (d[1] - 0.7).abs() < 1e-9);
        let mirrored = [sol.delta[1], sol.delta[0]];
        let (_, c1) = model.solve_nominal(&rho, &sol.delta).unwrap();
        let (_, c2) = model.solve_nominal(&rho, &mirrored).unwrap();
        assert!((c1 - c2).abs() <= 1e-9 * c1);
    }

    #[test]
    fn agrees_with_enumeration() {
        let settings = InnerSettings::default();
        for (nx, d, rho) in [
            (2, 0.04, vec![1.0, 1.0]),
            (2, 0.02, vec![0.9, 0.6]),
            (3, 0.02, vec![1.0, 1.0, 1.0]),
            (3, 0.02, vec![0.7, 1.0, 0.5]),
        ] {
            let model = cantilever(nx, 1, MaterialParams::default());
            let inst = TinyInstance::new(
                &model.grid,
                &model.load,
                model.params,
                d,
                MeanNorm::Material,
            )
            .unwrap();
            let (_, oracle) = brute_force_worst_case(&inst, &rho, 720).unwrap();
            let sol = solve_inner(&model, &rho, d, MeanNorm::Material, &settings, None).unwrap();
            let c = worst_case_compliance(&model.load, &sol);
            assert!(oracle >= c - 1e-4 * oracle, "nx={nx}: {oracle} vs {c}");
            assert!(oracle <= c + barrier_gap_bound(nx, settings.mu_star) + 5e-3 * oracle);
            let (_, dense) = dense_solve(&inst, &rho, &sol.delta).unwrap();
            assert!((dense - c).abs() < 1e-9 * c);
        }
    }

    #[test]
    fn warm_start_after_small_change() {
        let model = cantilever(8, 4, MaterialParams::default());
        let rho: Vec<f64> = (0..32)
            .map(|e| 0.5 + 0.5 * ((e * 5) % 7) as f64 / 6.0)
            .collect();
        let s = InnerSettings::default();
        let first = solve_inner(&model, &rho, 0.02, MeanNorm::Material, &s, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let moved: Vec<f64> = rho
            .iter()
            .map(|r| (r + rng.gen_range(-0.01..0.01)).clamp(0.001, 1.0))
            .collect();
        let second =
            solve_inner(&model, &moved, 0.02, MeanNorm::Material, &s, Some(&first)).unwrap();
        assert!(second.kkt_residual_inf <= 1e-10);
        assert!(
            second.newton_iters <= 10,
            "{} iterations",
            second.newton_iters
        );
        let cold = solve_inner(&model, &moved, 0.02, MeanNorm::Material, &s, None).unwrap();
        let (a, b) = (
            worst_case_compliance(&model.load, &second),
            worst_case_compliance(&model.load, &cold),
        );
        assert!((a - b).abs() < 1e-7 * a);
    }

    #[test]
    fn max_iterations_carry_best_iterate() {
        let model = cantilever(4, 2, MaterialParams::default());
        let s = InnerSettings {
            max_newton: 1,
            ..Default::default()
        };
        match solve_inner(&model, &[1.0; 8], 0.02, MeanNorm::Material, &s, None) {
            Err(Error::InnerMaxIterations {
                best, iterations, ..
            }) => {
                assert_eq!(iterations, 1);
                assert_eq!(best.delta.len(), 8);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kkt_factor_solves_its_own_products() {
        let model = cantilever(4, 2, MaterialParams::default());
        let rho: Vec<f64> = (0..8).map(|e| 0.5 + 0.06 * e as f64).collect();
        let p = InnerProblem::new(&model, &rho, 0.02, MeanNorm::Material).unwrap();
        let sol = p.solve(&InnerSettings::default(), None).unwrap();
        let f = p.kkt_factor(&sol).unwrap();
        assert_eq!(f.regularization, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = KktStep {
            u: (0..model.n_free())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            delta: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            lambda_mean: 0.7,
            lambda_var: -0.4,
        };
        let y = f.apply(&model, &x);
        let z = f
            .solve(&model, &y.u, &y.delta, y.lambda_mean, y.lambda_var)
            .unwrap();
        for (a, b) in z.u.iter().zip(&x.u).chain(z.delta.iter().zip(&x.delta)) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        assert!((z.lambda_mean - 0.7).abs() < 1e-7 && (z.lambda_var + 0.4).abs() < 1e-7);
    }
}
