//! Run configuration: TOML sections plus `section.key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::fem::SolverBackend;
use crate::inner::{InnerSettings, MeanNorm};
use crate::material::MaterialParams;
use crate::mma::MmaSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Evaluate,
    Robust,
    Gradcheck,
    Oracle,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "evaluate" => Ok(Mode::Evaluate),
            "robust" => Ok(Mode::Robust),
            "gradcheck" => Ok(Mode::Gradcheck),
            "oracle" => Ok(Mode::Oracle),
            other => Err(Error::ConfigParse(format!(
                "unknown mode '{other}' (expected baseline, evaluate, robust, gradcheck or oracle)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Baseline => "baseline",
            Mode::Evaluate => "evaluate",
            Mode::Robust => "robust",
            Mode::Gradcheck => "gradcheck",
            Mode::Oracle => "oracle",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub width: f64,
    pub height: f64,
    /// Fraction of the right edge, from the bottom, carrying the load.
    pub load_fraction: f64,
    pub solver: SolverBackend,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            nx: 120,
            ny: 60,
            width: 2.0,
            height: 1.0,
            load_fraction: 0.05,
            solver: SolverBackend::Direct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    /// Volume fraction bound `V`.
    #[serde(rename = "V")]
    pub volume_fraction: f64,
    /// Defect budget `D`.
    #[serde(rename = "D")]
    pub budget: f64,
    pub mean_norm: MeanNorm,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            volume_fraction: 0.5,
            budget: 0.02,
            mean_norm: MeanNorm::Material,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Cone radius in element widths; `7 nx / 400` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius_elements: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_density_path: Option<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            input_density_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub probes: usize,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            probes: 8,
            step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub resolution: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { resolution: 720 }
    }
}

/// Everything a run needs. Unknown keys anywhere are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub seed: u64,
    pub grid: GridConfig,
    pub material: MaterialParams,
    pub constraints: ConstraintConfig,
    pub filter: FilterConfig,
    pub inner: InnerSettings,
    pub outer: MmaSettings,
    pub io: IoConfig,
    pub gradcheck: GradcheckConfig,
    pub oracle: OracleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            preset: None,
            seed: 0,
            grid: GridConfig::default(),
            material: MaterialParams::default(),
            constraints: ConstraintConfig::default(),
            filter: FilterConfig::default(),
            inner: InnerSettings::default(),
            outer: MmaSettings::default(),
            io: IoConfig::default(),
            gradcheck: GradcheckConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

pub const PRESETS: &[&str] = &["cantilever"];

impl RunConfig {
    /// The cantilever benchmark at desk scale.
    pub fn cantilever() -> Self {
        Self {
            preset: Some("cantilever".into()),
            ..Self::default()
        }
    }

    /// Filter radius in element widths.
    pub fn filter_radius(&self) -> f64 {
        self.filter
            .radius_elements
            .unwrap_or(7.0 * self.grid.nx as f64 / 400.0)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(p) = &self.preset {
            if !PRESETS.contains(&p.as_str()) {
                v.push(format!(
                    "preset = '{p}' is unknown (available: {})",
                    PRESETS.join(", ")
                ));
            }
        }
        let g = &self.grid;
        if g.nx == 0 {
            v.push("grid.nx must be at least 1".into());
        }
        if g.ny == 0 {
            v.push("grid.ny must be at least 1".into());
        }
        if !(g.width > 0.0 && g.width.is_finite()) {
            v.push(format!("grid.width = {} must be positive", g.width));
        }
        if !(g.height > 0.0 && g.height.is_finite()) {
            v.push(format!("grid.height = {} must be positive", g.height));
        }
        if !(g.load_fraction > 0.0 && g.load_fraction <= 1.0) {
            v.push(format!(
                "grid.load_fraction = {} must lie in (0, 1]",
                g.load_fraction
            ));
        }
        v.extend(self.material.violations());
        let c = &self.constraints;
        if !(c.volume_fraction > 0.0 && c.volume_fraction <= 1.0) {
            v.push(format!(
                "constraints.V = {} must lie in (0, 1]",
                c.volume_fraction
            ));
        } else if c.volume_fraction < self.material.rho_min {
            v.push(format!(
                "constraints.V = {} is below material.rho_min = {}",
                c.volume_fraction, self.material.rho_min
            ));
        }
        if !(c.budget > 0.0 && c.budget < 0.25) {
            v.push(format!(
                "constraints.D = {} must lie in (0, 0.25); larger budgets cannot be met with delta in [0, 1]",
                c.budget
            ));
        }
        if let Some(r) = self.filter.radius_elements {
            if !(r >= 0.0 && r.is_finite()) {
                v.push(format!("filter.radius_elements = {r} must be non-negative"));
            }
        }
        v.extend(self.inner.violations());
        v.extend(self.outer.violations());
        if self.mode == Mode::Evaluate && self.io.input_density_path.is_none() {
            v.push("mode evaluate requires io.input_density_path".into());
        }
        if self.gradcheck.probes == 0 {
            v.push("gradcheck.probes must be at least 1".into());
        }
        if !(1e-8..=1e-4).contains(&self.gradcheck.step) {
            v.push(format!(
                "gradcheck.step = {} must lie in [1e-8, 1e-4]",
                self.gradcheck.step
            ));
        }
        if self.oracle.resolution < 8 {
            v.push(format!(
                "oracle.resolution = {} must be at least 8",
                self.oracle.resolution
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

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Splits `a.b.c=value` and parses the value as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(arg: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = arg.split_once('=').ok_or_else(|| {
        Error::ConfigParse(format!("override '{arg}' is not of the form key=value"))
    })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|k| k.trim().is_empty()) {
        return Err(Error::ConfigParse(format!(
            "override '{arg}' has an empty key"
        )));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    };
    Ok((
        key.split('.').map(|k| k.trim().to_string()).collect(),
        value,
    ))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::ConfigParse(format!(
                "override path '{}' crosses the non-table key '{p}'",
                path.join(".")
            ))
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Parses config text, applies overrides and validates.
///
/// Precedence, lowest first: built-in defaults, the `preset` (from the file
/// or `preset_override`), the file's keys, the `key=value` overrides.
pub fn parse_config_str(
    text: &str,
    mode: Option<Mode>,
    preset_override: Option<&str>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut table, &path, value)?;
    }
    if let Some(p) = preset_override {
        table.insert("preset".into(), Value::String(p.into()));
    }
    if let Some(m) = mode {
        table.insert("mode".into(), Value::String(m.to_string()));
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_file(
    path: &Path,
    mode: Option<Mode>,
    preset: Option<&str>,
    overrides: &[String],
) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, mode, preset, overrides).map_err(|e| match e {
        Error::ConfigParse(msg) => Error::ConfigParse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        parse_config_str(text, Some(Mode::Baseline), None, &o)
    }

    #[test]
    fn empty_config_is_the_cantilever_preset() {
        let cfg = parse_config_str("", Some(Mode::Robust), Some("cantilever"), &[]).unwrap();
        assert_eq!((cfg.grid.nx, cfg.grid.ny), (120, 60));
        assert_eq!((cfg.grid.width, cfg.grid.height), (2.0, 1.0));
        assert!((cfg.filter_radius() - 2.1).abs() < 1e-12);
        assert_eq!(cfg.material.p, 5.0);
        assert_eq!((cfg.material.e0, cfg.material.ed), (1.0, 0.75));
        assert_eq!(cfg.constraints.volume_fraction, 0.5);
        assert_eq!(cfg.constraints.budget, 0.02);
        assert_eq!(cfg.mode, Mode::Robust);
        assert_eq!(
            cfg,
            RunConfig {
                mode: Mode::Robust,
                ..RunConfig::cantilever()
            }
        );
    }

    #[test]
    fn sections_and_overrides() {
        let text = "seed = 4\n[grid]\nnx = 40\nny = 20\n[material]\nED = 0.5\nplane_model = \"stress\"\n[constraints]\nD = 0.04\nmean_norm = \"domain\"\n";
        let cfg = parse(
            text,
            &["grid.nx=60", "outer.max_iters=12", "io.output_dir=runs/a"],
        )
        .unwrap();
        assert_eq!(cfg.grid.nx, 60);
        assert_eq!(cfg.grid.ny, 20);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.material.ed, 0.5);
        assert_eq!(
            cfg.material.plane_model,
            crate::material::PlaneModel::Stress
        );
        assert_eq!(cfg.constraints.budget, 0.04);
        assert_eq!(cfg.constraints.mean_norm, MeanNorm::Domain);
        assert_eq!(cfg.outer.max_iters, 12);
        assert_eq!(cfg.io.output_dir, PathBuf::from("runs/a"));
        assert!((cfg.filter_radius() - 1.05).abs() < 1e-12);
    }

    #[test]
    fn validation_errors_are_listed() {
        match parse("", &["constraints.D=0.3"]) {
            Err(Error::Validation(v)) => assert!(v.iter().any(|m| m.contains("constraints.D"))),
            other => panic!("{other:?}"),
        }
        match parse("[grid]\nnx = 0\n[material]\nnu = 0.7\n", &[]) {
            Err(Error::Validation(v)) => {
                assert_eq!(v.len(), 2, "{v:?}");
                assert!(v[0].contains("grid.nx"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_config_str("", Some(Mode::Evaluate), None, &[]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse("preset = \"bridge\"", &[]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unknown_keys_and_bad_syntax_fail() {
        for text in [
            "[grid]\nnxx = 3\n",
            "typo = 1\n",
            "[grid\nnx = 3\n",
            "[grid]\nnx = \"many\"\n",
        ] {
            assert!(
                matches!(parse(text, &[]), Err(Error::ConfigParse(_))),
                "{text}"
            );
        }
        let e = parse("[grid]\nnx = 3\n\n[grid\n", &[])
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 4"), "{e}");
        assert!(parse("", &["grid.nxx=3"]).is_err());
        assert!(parse("", &["novalue"]).is_err());
        assert!(parse("", &["grid.nx.deep=3"]).is_err());
    }

    #[test]
    fn override_values_parse_as_toml() {
        assert_eq!(parse_override("a.b=3").unwrap().1, Value::Integer(3));
        assert_eq!(parse_override("a=1e-6").unwrap().1, Value::Float(1e-6));
        assert_eq!(
            parse_override("a = direct").unwrap().1,
            Value::String("direct".into())
        );
        assert_eq!(
            parse_override("a=\"x y\"").unwrap().1,
            Value::String("x y".into())
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::cantilever();
        cfg.filter.radius_elements = Some(3.5);
        cfg.io.input_density_path = Some("base/density.txt".into());
        let back = parse_config_str(&cfg.to_toml(), None, None, &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn modes_parse() {
        for m in ["baseline", "evaluate", "robust", "gradcheck", "oracle"] {
            assert_eq!(m.parse::<Mode>().unwrap().to_string(), m);
        }
        assert!("optimize".parse::<Mode>().is_err());
    }
}
