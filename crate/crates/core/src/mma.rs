//! Method of moving asymptotes for one linear inequality constraint and
//! box bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmaSettings {
    pub max_iters: usize,
    pub move_limit: f64,
    pub change_tol: f64,
    pub asyinit: f64,
    pub asyincr: f64,
    pub asydecr: f64,
    pub raa0: f64,
}

impl Default for MmaSettings {
    fn default() -> Self {
        Self {
            max_iters: 300,
            move_limit: 0.2,
            change_tol: 1e-3,
            asyinit: 0.5,
            asyincr: 1.2,
            asydecr: 0.7,
            raa0: 1e-5,
        }
    }
}

impl MmaSettings {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.move_limit > 0.0 && self.move_limit <= 1.0) {
            v.push(format!(
                "outer.move_limit = {} must lie in (0, 1]",
                self.move_limit
            ));
        }
        if !(self.change_tol > 0.0) {
            v.push(format!(
                "outer.change_tol = {} must be positive",
                self.change_tol
            ));
        }
        if !(self.asyinit > 0.0 && self.asyinit <= 1.0) {
            v.push(format!(
                "outer.asyinit = {} must lie in (0, 1]",
                self.asyinit
            ));
        }
        if !(self.asyincr >= 1.0) {
            v.push(format!("outer.asyincr = {} must be >= 1", self.asyincr));
        }
        if !(self.asydecr > 0.0 && self.asydecr <= 1.0) {
            v.push(format!(
                "outer.asydecr = {} must lie in (0, 1]",
                self.asydecr
            ));
        }
        if !(self.raa0 > 0.0) {
            v.push(format!("outer.raa0 = {} must be positive", self.raa0));
        }
        v
    }
}

/// Asymptote gap limits relative to the box width.
const GAP_MIN: f64 = 0.01;
const GAP_MAX: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct MmaState {
    pub x: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub xold1: Vec<f64>,
    pub xold2: Vec<f64>,
    pub iteration: usize,
    pub xmin: Vec<f64>,
    pub xmax: Vec<f64>,
}

impl MmaState {
    pub fn new(x0: Vec<f64>, xmin: Vec<f64>, xmax: Vec<f64>) -> Result<Self> {
        let n = x0.len();
        if xmin.len() != n || xmax.len() != n {
            return Err(Error::DimensionMismatch("MMA bounds".into()));
        }
        for e in 0..n {
            if !(xmin[e] < xmax[e]) || !(xmin[e]..=xmax[e]).contains(&x0[e]) {
                return Err(Error::InvalidParams(format!(
                    "x[{e}] = {} outside [{}, {}]",
                    x0[e], xmin[e], xmax[e]
                )));
            }
        }
        Ok(Self {
            lower: xmin.clone(),
            upper: xmax.clone(),
            xold1: x0.clone(),
            xold2: x0.clone(),
            x: x0,
            iteration: 0,
            xmin,
            xmax,
        })
    }

    /// Moves the asymptotes for the next subproblem and advances the
    /// iteration counter.
    pub fn update_asymptotes(&mut self, s: &MmaSettings) {
        self.iteration += 1;
        for e in 0..self.x.len() {
            let w = self.xmax[e] - self.xmin[e];
            let x = self.x[e];
            if self.iteration <= 2 {
                self.lower[e] = x - s.asyinit * w;
                self.upper[e] = x + s.asyinit * w;
                continue;
            }
            let sign = (x - self.xold1[e]) * (self.xold1[e] - self.xold2[e]);
            let gamma = if sign < 0.0 {
                s.asydecr
            } else if sign > 0.0 {
                s.asyincr
            } else {
                1.0
            };
            let lo = (gamma * (self.xold1[e] - self.lower[e])).clamp(GAP_MIN * w, GAP_MAX * w);
            let hi = (gamma * (self.upper[e] - self.xold1[e])).clamp(GAP_MIN * w, GAP_MAX * w);
            self.lower[e] = x - lo;
            self.upper[e] = x + hi;
        }
    }

    fn accept(&mut self, x_new: Vec<f64>) {
        self.xold2 = std::mem::replace(&mut self.xold1, std::mem::replace(&mut self.x, x_new));
    }
}

/// Linearized constraint `value + grad^T (y - x) <= 0`.
#[derive(Debug, Clone)]
pub struct LinearConstraint<'a> {
    pub value: f64,
    pub grad: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct SubproblemSolution {
    pub x: Vec<f64>,
    pub multiplier: f64,
    /// Linearized constraint at the new point.
    pub constraint: f64,
}

struct Approximation {
    p: Vec<f64>,
    q: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

fn approximation(state: &MmaState, grad_f: &[f64], move_limit: f64, raa0: f64) -> Approximation {
    let n = state.x.len();
    let mut ap = Approximation {
        p: vec![0.0; n],
        q: vec![0.0; n],
        alpha: vec![0.0; n],
        beta: vec![0.0; n],
    };
    for e in 0..n {
        let (x, l, u) = (state.x[e], state.lower[e], state.upper[e]);
        let w = state.xmax[e] - state.xmin[e];
        let (gp, gm) = (grad_f[e].max(0.0), (-grad_f[e]).max(0.0));
        let reg = raa0 / w;
        ap.p[e] = (u - x).powi(2) * (1.001 * gp + 0.001 * gm + reg);
        ap.q[e] = (x - l).powi(2) * (0.001 * gp + 1.001 * gm + reg);
        ap.alpha[e] = state.xmin[e].max(x - move_limit * w).max(l + 0.1 * (x - l));
        ap.beta[e] = state.xmax[e].min(x + move_limit * w).min(u - 0.1 * (u - x));
    }
    ap
}

/// Minimizer of `p/(U-y) + q/(y-L) + t y` over `[alpha, beta]`.
fn element_minimizer(p: f64, q: f64, l: f64, u: f64, t: f64, alpha: f64, beta: f64) -> f64 {
    let dphi = |y: f64| p / ((u - y) * (u - y)) - q / ((y - l) * (y - l)) + t;
    if dphi(alpha) >= 0.0 {
        return alpha;
    }
    if dphi(beta) <= 0.0 {
        return beta;
    }
    let (mut a, mut b) = (alpha, beta);
    // without the linear term the root is closed-form; use it as a start
    let (sp, sq) = (p.sqrt(), q.sqrt());
    let mut y = ((sp * l + sq * u) / (sp + sq)).clamp(a, b);
    for _ in 0..100 {
        let g = dphi(y);
        if g > 0.0 {
            b = y;
        } else {
            a = y;
        }
        let h = 2.0 * p / (u - y).powi(3) + 2.0 * q / (y - l).powi(3);
        let mut next = y - g / h;
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        if (next - y).abs() <= 1e-15 * (1.0 + y.abs()) || b - a <= 1e-15 * (1.0 + y.abs()) {
            return next;
        }
        y = next;
    }
    y
}

fn primal(ap: &Approximation, state: &MmaState, c: &[f64], lambda: f64) -> Vec<f64> {
    (0..ap.p.len())
        .map(|e| {
            element_minimizer(
                ap.p[e],
                ap.q[e],
                state.lower[e],
                state.upper[e],
                lambda * c[e],
                ap.alpha[e],
                ap.beta[e],
            )
        })
        .collect()
}

/// Linearized constraint value as a function of the dual multiplier;
/// nonincreasing in `lambda`.
pub fn dual_constraint_value(
    state: &MmaState,
    grad_f: &[f64],
    constraint: &LinearConstraint,
    move_limit: f64,
    raa0: f64,
    lambda: f64,
) -> f64 {
    let ap = approximation(state, grad_f, move_limit, raa0);
    let y = primal(&ap, state, constraint.grad, lambda);
    linearized(state, constraint, &y)
}

fn linearized(state: &MmaState, c: &LinearConstraint, y: &[f64]) -> f64 {
    c.value + dot(c.grad, y) - dot(c.grad, &state.x)
}

/// Solves the separable subproblem by bisection on the constraint
/// multiplier.
pub fn solve_subproblem(
    state: &MmaState,
    grad_f: &[f64],
    constraint: &LinearConstraint,
    move_limit: f64,
    raa0: f64,
) -> Result<SubproblemSolution> {
    if grad_f.iter().any(|g| !g.is_finite()) {
        return Err(Error::DualBracket("non-finite objective gradient".into()));
    }
    let ap = approximation(state, grad_f, move_limit, raa0);
    let eval = |lambda: f64| {
        let y = primal(&ap, state, constraint.grad, lambda);
        let g = linearized(state, constraint, &y);
        (y, g)
    };
    let (y0, g0) = eval(0.0);
    if g0 <= 0.0 {
        return Ok(SubproblemSolution {
            x: y0,
            multiplier: 0.0,
            constraint: g0,
        });
    }
    let mut hi = 1.0;
    let mut g_hi = eval(hi).1;
    while g_hi > 0.0 {
        hi *= 10.0;
        if hi > 1e40 {
            return Err(Error::DualBracket(format!(
                "constraint stays violated ({g_hi:e}) for every multiplier; bad gradients or infeasible move limits"
            )));
        }
        g_hi = eval(hi).1;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if eval(mid).1 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (y, g) = eval(hi);
    Ok(SubproblemSolution {
        x: y,
        multiplier: hi,
        constraint: g,
    })
}

/// One objective/constraint evaluation supplied by the caller.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub gradient: Vec<f64>,
    /// Constraint value, feasible when `<= 0`.
    pub constraint: f64,
    pub constraint_gradient: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Per-iteration quantities recorded alongside the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub worst_case_compliance: f64,
    pub volume: f64,
    pub inner_newton_iters: usize,
    pub inner_kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub worst_case_compliance: f64,
    pub volume: f64,
    pub design_change_inf: f64,
    pub inner_newton_iters: usize,
    pub inner_kkt_residual: f64,
}

#[derive(Debug, Clone)]
pub struct MmaResult {
    pub x: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
}

/// Runs MMA from `x0`. `evaluate` receives the iterate and the iteration
/// number. Row 0 of the history is the starting design.
pub fn run<F>(
    mut evaluate: F,
    x0: Vec<f64>,
    xmin: Vec<f64>,
    xmax: Vec<f64>,
    settings: &MmaSettings,
) -> Result<MmaResult>
where
    F: FnMut(&[f64], usize) -> Result<Evaluation>,
{
    let mut state = MmaState::new(x0, xmin, xmax)?;
    let wrap = |iteration: usize| {
        move |e: Error| Error::Outer {
            iteration,
            source: Box::new(e),
        }
    };
    let mut ev = evaluate(&state.x, 0).map_err(wrap(0))?;
    check_finite(&ev, 0)?;
    let f0 = ev.objective.abs().max(f64::MIN_POSITIVE);
    let record = |iter: usize, ev: &Evaluation, change: f64| IterationRecord {
        iter,
        objective: ev.objective,
        worst_case_compliance: ev.diagnostics.worst_case_compliance,
        volume: ev.diagnostics.volume,
        design_change_inf: change,
        inner_newton_iters: ev.diagnostics.inner_newton_iters,
        inner_kkt_residual: ev.diagnostics.inner_kkt_residual,
    };
    let mut history = vec![record(0, &ev, 0.0)];
    let mut converged = false;
    for k in 1..=settings.max_iters {
        state.update_asymptotes(settings);
        let grad: Vec<f64> = ev.gradient.iter().map(|g| g / f0).collect();
        let c = LinearConstraint {
            value: ev.constraint,
            grad: &ev.constraint_gradient,
        };
        let sub = solve_subproblem(&state, &grad, &c, settings.move_limit, settings.raa0)
            .map_err(wrap(k))?;
        let change = norm_inf(
            &sub.x
                .iter()
                .zip(&state.x)
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>(),
        );
        state.accept(sub.x);
        ev = evaluate(&state.x, k).map_err(wrap(k))?;
        check_finite(&ev, k)?;
        history.push(record(k, &ev, change));
        if change < settings.change_tol {
            converged = true;
            break;
        }
    }
    Ok(MmaResult {
        x: state.x,
        history,
        converged,
    })
}

fn check_finite(ev: &Evaluation, iteration: usize) -> Result<()> {
    if ev.objective.is_finite() && ev.constraint.is_finite() {
        Ok(())
    } else {
        Err(Error::Outer {
            iteration,
            source: Box::new(Error::Unconverged(ev.objective)),
        })
    }
}
