//! Design sensitivities of the worst-case compliance.
//!
//! With `z = (u, delta, lambda_mean, lambda_var)` and `R(z; rho) = 0` the
//! barrier KKT conditions, `dJ/drho = -w^T dR/drho` where `M w = (f, 0, 0, 0)`
//! and `M = dR/dz` is the symmetric bordered KKT matrix at the solution.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::{mat_vec8, StructuredGrid};
use crate::filter::FilterOperator;
use crate::inner::{InnerProblem, InnerSolution, MeanNorm};
use crate::linalg::dot;
use crate::oracle::fd_gradient;

/// Inner residual above which gradients are refused.
pub const GRADIENT_KKT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct FdCheck {
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
}

impl FdCheck {
    pub fn new(indices: Vec<usize>, analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        let relative_errors: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / n.abs().max(f64::MIN_POSITIVE))
            .collect();
        let max_relative_error = relative_errors.iter().cloned().fold(0.0, f64::max);
        Self {
            indices,
            analytic,
            numeric,
            relative_errors,
            max_relative_error,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub grad_compliance: Vec<f64>,
    pub grad_volume: Vec<f64>,
    pub fd_check: Option<FdCheck>,
}

/// Gradient of `f^T u` with respect to physical densities.
pub fn compliance_gradient_physical(
    problem: &InnerProblem,
    sol: &InnerSolution,
) -> Result<Vec<f64>> {
    if !(sol.kkt_residual_inf <= GRADIENT_KKT_TOL) {
        return Err(Error::Unconverged(sol.kkt_residual_inf));
    }
    let model = problem.model;
    let factor = problem.kkt_factor(sol).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } | Error::Singular(_) => {
            Error::Singular(format!("adjoint system: {e}"))
        }
        other => other,
    })?;
    let n = model.n_elements();
    let w = factor.solve(model, &model.reduced_force(), &vec![0.0; n], 0.0, 0.0)?;
    let w_full = model.expand(&w.u);

    let params = &model.params;
    let c = &problem.constraints;
    let rho = problem.rho_phys;
    let ke = model.template();
    let a_dot_w: f64 = dot(&c.mean_weights, &w.delta);
    let a_dot_delta: f64 = dot(&c.mean_weights, &sol.delta);
    let grad = (0..n)
        .map(|e| {
            let ds = params.penalized_derivative(rho[e]);
            let (m, dm, _) = params.modulus_with_derivatives(sol.delta[e]);
            let ue = model.element_displacement(&sol.u, e);
            let ku = mat_vec8(ke, &ue);
            let we = model.element_displacement(&w_full, e);
            let mut r = 2.0 * ds * m * dot(&we, &ku) + w.delta[e] * ds * dm * dot(&ue, &ku);
            let ce = c.volumes[e] * ds / c.normalizer;
            r += match c.norm {
                MeanNorm::Material => {
                    sol.lambda_mean * ce * (w.delta[e] - a_dot_w)
                        + w.lambda_mean * ce * (sol.delta[e] - a_dot_delta)
                }
                MeanNorm::Domain => {
                    sol.lambda_mean * ce * w.delta[e] + w.lambda_mean * ce * sol.delta[e]
                }
            };
            -r
        })
        .collect();
    Ok(grad)
}

/// Gradient of `f^T u` with respect to design densities.
pub fn compliance_gradient(
    problem: &InnerProblem,
    sol: &InnerSolution,
    filter: &FilterOperator,
) -> Result<Vec<f64>> {
    Ok(filter.chain_rule(&compliance_gradient_physical(problem, sol)?))
}

/// Classical SIMP sensitivity at fixed defects, with respect to design
/// densities.
pub fn nominal_gradient(
    model: &crate::fem::FemModel,
    rho_phys: &[f64],
    delta: &[f64],
    u: &[f64],
    filter: &FilterOperator,
) -> Vec<f64> {
    let q = model.unit_energies(u);
    let g: Vec<f64> = (0..rho_phys.len())
        .map(|e| {
            -model.params.penalized_derivative(rho_phys[e]) * model.params.modulus(delta[e]) * q[e]
        })
        .collect();
    filter.chain_rule(&g)
}

/// `W^T (v / |Omega|)`.
pub fn volume_gradient(filter: &FilterOperator, grid: &StructuredGrid) -> Vec<f64> {
    let w = grid.element_volume() / grid.domain_volume();
    filter.chain_rule(&vec![w; grid.n_elements()])
}

/// Volume fraction of physical densities.
pub fn volume_fraction(rho_phys: &[f64], grid: &StructuredGrid) -> f64 {
    rho_phys.iter().sum::<f64>() * grid.element_volume() / grid.domain_volume()
}

/// Compares an analytic gradient against central differences of `objective`.
pub fn fd_check<F>(
    objective: F,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
) -> Result<FdCheck>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let probes = fd_gradient(objective, x, indices, h)?;
    Ok(FdCheck::new(
        indices.to_vec(),
        indices.iter().map(|&i| analytic[i]).collect(),
        probes.iter().map(|p| p.value).collect(),
    ))
}
