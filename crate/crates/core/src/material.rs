//! Defect-interpolated, SIMP-penalized isotropic elasticity.
//!
//! The element constitutive matrix is `C_e = rho_e^p * E_eff(delta_e) * C1`
//! where `C1` is the unit-modulus plane tensor and
//! `E_eff(delta) = ((1 - delta)/E0 + delta/ED)^-1` is the harmonic
//! interpolation between the stiffest (`delta = 0`) and the weakest
//! (`delta = 1`) realized material. Since `1/E_eff` is affine in `delta`,
//! the potential energy is jointly convex in `(delta, u)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounds may be grazed by this much before an argument is rejected.
pub const BOUND_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlaneModel {
    #[default]
    Strain,
    Stress,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialParams {
    /// Young's modulus of the stiffest realized material.
    #[serde(rename = "E0")]
    pub e0: f64,
    /// Young's modulus of the weakest realized material.
    #[serde(rename = "ED")]
    pub ed: f64,
    pub nu: f64,
    /// SIMP penalization exponent.
    pub p: f64,
    pub rho_min: f64,
    pub plane_model: PlaneModel,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            e0: 1.0,
            ed: 0.75,
            nu: 0.3,
            p: 5.0,
            rho_min: 1e-3,
            plane_model: PlaneModel::Strain,
        }
    }
}

impl MaterialParams {
    /// Collects every violated range instead of stopping at the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.e0 > 0.0 && self.e0.is_finite()) {
            v.push(format!("material.E0 = {} must be positive", self.e0));
        }
        if !(self.ed > 0.0 && self.ed <= self.e0) {
            v.push(format!(
                "material.ED = {} must satisfy 0 < ED <= E0 = {}",
                self.ed, self.e0
            ));
        }
        if !(self.nu > 0.0 && self.nu < 0.5) {
            v.push(format!("material.nu = {} must lie in (0, 0.5)", self.nu));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            v.push(format!("material.p = {} must be >= 1", self.p));
        }
        if !(self.rho_min > 0.0 && self.rho_min < 1.0) {
            v.push(format!(
                "material.rho_min = {} must lie in (0, 1)",
                self.rho_min
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// `1/ED - 1/E0`, the slope of the affine compliance-modulus `1/E_eff`.
    #[inline]
    pub fn inverse_modulus_slope(&self) -> f64 {
        1.0 / self.ed - 1.0 / self.e0
    }

    #[inline]
    pub(crate) fn modulus(&self, delta: f64) -> f64 {
        1.0 / (1.0 / self.e0 + delta * self.inverse_modulus_slope())
    }

    /// `(E, dE/ddelta, d2E/ddelta2)` without range checks.
    #[inline]
    pub(crate) fn modulus_with_derivatives(&self, delta: f64) -> (f64, f64, f64) {
        let e = self.modulus(delta);
        let s = self.inverse_modulus_slope();
        (e, -s * e * e, 2.0 * s * s * e * e * e)
    }

    #[inline]
    pub(crate) fn penalized(&self, rho: f64) -> f64 {
        rho.powf(self.p)
    }

    /// `d(rho^p)/drho`.
    #[inline]
    pub(crate) fn penalized_derivative(&self, rho: f64) -> f64 {
        self.p * rho.powf(self.p - 1.0)
    }
}

fn check_unit_interval(what: &'static str, x: f64) -> Result<f64> {
    if !(-BOUND_TOL..=1.0 + BOUND_TOL).contains(&x) {
        return Err(Error::Domain {
            what,
            value: x,
            range: "[0, 1]",
        });
    }
    Ok(x.clamp(0.0, 1.0))
}

/// Harmonic interpolation `((1 - delta)/E0 + delta/ED)^-1`.
pub fn effective_modulus(delta: f64, params: &MaterialParams) -> Result<f64> {
    let delta = check_unit_interval("delta", delta)?;
    Ok(params.modulus(delta))
}

/// First and second derivative of [`effective_modulus`] in `delta`.
pub fn effective_modulus_derivatives(delta: f64, params: &MaterialParams) -> Result<(f64, f64)> {
    let delta = check_unit_interval("delta", delta)?;
    let (_, d1, d2) = params.modulus_with_derivatives(delta);
    Ok((d1, d2))
}

/// SIMP factor `rho^p`.
pub fn simp_scale(rho: f64, params: &MaterialParams) -> Result<f64> {
    if !(params.rho_min - BOUND_TOL..=1.0 + BOUND_TOL).contains(&rho) {
        return Err(Error::Domain {
            what: "rho",
            value: rho,
            range: "[rho_min, 1]",
        });
    }
    Ok(params.penalized(rho.clamp(params.rho_min, 1.0)))
}

/// Unit-modulus constitutive matrix in Voigt order `(xx, yy, xy)` with
/// engineering shear strain.
pub fn plane_tensor(params: &MaterialParams) -> [[f64; 3]; 3] {
    let nu = params.nu;
    match params.plane_model {
        PlaneModel::Strain => {
            let c = 1.0 / ((1.0 + nu) * (1.0 - 2.0 * nu));
            [
                [c * (1.0 - nu), c * nu, 0.0],
                [c * nu, c * (1.0 - nu), 0.0],
                [0.0, 0.0, c * (1.0 - 2.0 * nu) / 2.0],
            ]
        }
        PlaneModel::Stress => {
            let c = 1.0 / (1.0 - nu * nu);
            [
                [c, c * nu, 0.0],
                [c * nu, c, 0.0],
                [0.0, 0.0, c * (1.0 - nu) / 2.0],
            ]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_params() -> MaterialParams {
        MaterialParams::default()
    }

    fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn modulus_endpoints_and_midpoint() {
        let m = reference_params();
        assert_eq!(effective_modulus(0.0, &m).unwrap(), 1.0);
        assert!((effective_modulus(1.0, &m).unwrap() - 0.75).abs() < 1e-15);
        assert!((effective_modulus(0.5, &m).unwrap() - 0.857_142_857_142_857_1).abs() < 1e-12);
    }

    #[test]
    fn modulus_rejects_out_of_range() {
        let m = reference_params();
        assert!(effective_modulus(1.0 + 1e-9, &m).is_err());
        assert!(effective_modulus(-1e-9, &m).is_err());
        // grazing the bound is clamped
        assert_eq!(effective_modulus(-1e-13, &m).unwrap(), 1.0);
    }

    #[test]
    fn derivative_examples() {
        let m = reference_params();
        let (d0, _) = effective_modulus_derivatives(0.0, &m).unwrap();
        let (d1, _) = effective_modulus_derivatives(1.0, &m).unwrap();
        assert!((d0 + 1.0 / 3.0).abs() < 1e-14);
        assert!((d1 + 0.1875).abs() < 1e-14);

        let flat = MaterialParams { ed: 1.0, ..m };
        for k in 0..=10 {
            let (d, dd) = effective_modulus_derivatives(k as f64 / 10.0, &flat).unwrap();
            assert_eq!(d, 0.0);
            assert_eq!(dd, 0.0);
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let m = reference_params();
        let h = 1e-6;
        for k in 0..=100 {
            let delta = k as f64 / 100.0;
            let (_, d1, d2) = m.modulus_with_derivatives(delta);
            let fd1 = fd(|x| m.modulus(x), delta, h);
            let fd2 = fd(|x| m.modulus_with_derivatives(x).1, delta, h);
            assert!(((d1 - fd1) / d1).abs() < 1e-6, "delta={delta}");
            assert!(((d2 - fd2) / d2).abs() < 1e-6, "delta={delta}");
            assert!(d1 < 0.0 && d2 > 0.0);
        }
    }

    #[test]
    fn harmonic_bounds_and_affine_inverse() {
        let m = reference_params();
        let h = 1e-3;
        for k in 1..100 {
            let d = k as f64 / 100.0;
            let e = m.modulus(d);
            assert!(m.ed <= e && e <= m.e0);
            assert!(e < (1.0 - d) * m.e0 + d * m.ed);
            let inv = |x: f64| 1.0 / m.modulus(x);
            let second = inv(d + h) - 2.0 * inv(d) + inv(d - h);
            assert!(second.abs() < 1e-12);
        }
    }

    #[test]
    fn simp_examples() {
        let m = reference_params();
        assert_eq!(simp_scale(1.0, &m).unwrap(), 1.0);
        assert!((simp_scale(0.5, &m).unwrap() - 0.03125).abs() < 1e-15);
        assert!((simp_scale(0.4, &m).unwrap() - 0.01024).abs() < 1e-15);
        assert!(simp_scale(m.rho_min, &m).unwrap() > 0.0);
        assert!(simp_scale(1e-4, &m).is_err());
        assert!(simp_scale(1.1, &m).is_err());
        let mut prev = 0.0;
        for k in 1..=100 {
            let s = simp_scale(k as f64 / 100.0, &m).unwrap();
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn plane_tensor_examples() {
        let mut m = reference_params();
        let c = plane_tensor(&m);
        let want = [
            [1.346154, 0.576923, 0.0],
            [0.576923, 1.346154, 0.0],
            [0.0, 0.0, 0.384615],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((c[i][j] - want[i][j]).abs() < 1e-6);
                assert_eq!(c[i][j], c[j][i]);
            }
        }
        // 2x2 leading block eigenvalues are c11 +- c12, shear entry is the third
        assert!(c[0][0] - c[0][1] > 0.0 && c[2][2] > 0.0);

        m.nu = 1e-300;
        let c0 = plane_tensor(&m);
        assert!((c0[0][0] - 1.0).abs() < 1e-12 && c0[0][1].abs() < 1e-12);
        assert!((c0[2][2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn validation_lists_every_violation() {
        let m = MaterialParams {
            e0: 1.0,
            ed: 2.0,
            nu: 0.6,
            p: 0.5,
            rho_min: 0.0,
            plane_model: PlaneModel::Strain,
        };
        assert_eq!(m.violations().len(), 4);
        assert!(reference_params().validate().is_ok());
    }
}
