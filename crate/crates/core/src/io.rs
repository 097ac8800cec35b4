//! File formats: `density.txt`, PGM images, `convergence.csv`, `summary.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::StructuredGrid;
use crate::mma::IterationRecord;

/// Physical density at and above which an element counts as material in
/// the defect map.
pub const DEFECT_MASK_THRESHOLD: f64 = 0.4;
/// Background gray of masked-out defect pixels.
pub const MASK_GRAY: u8 = 128;

/// A per-element field on an `nx` by `ny` grid, indexed like the grid
/// (column-major, `e = i ny + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * ny {
            return Err(Error::DimensionMismatch(format!(
                "{nx}x{ny} field needs {} values, got {}",
                nx * ny,
                values.len()
            )));
        }
        Ok(Self { nx, ny, values })
    }

    /// Checks that the field fits `grid`.
    pub fn check_grid(&self, grid: &StructuredGrid) -> Result<()> {
        if (self.nx, self.ny) != (grid.nx, grid.ny) {
            return Err(Error::DimensionMismatch(format!(
                "density file is {}x{}, grid is {}x{}",
                self.nx, self.ny, grid.nx, grid.ny
            )));
        }
        Ok(())
    }

    /// Text form: `nx ny`, then one line per grid row from the bottom, each
    /// listing elements left to right. Values use the shortest
    /// representation that reads back to the same bits.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.nx, self.ny);
        for j in 0..self.ny {
            for i in 0..self.nx {
                if i > 0 {
                    s.push(' ');
                }
                write!(s, "{}", self.values[i * self.ny + j]).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Parses the text form of [`DensityField`]. `source` names the input in
/// error messages.
pub fn parse_density(text: &str, source: &str) -> Result<DensityField> {
    let err = |msg: String| Error::DensityFormat {
        path: source.to_string(),
        msg,
    };
    let mut tokens = text.split_ascii_whitespace();
    let mut dim = |name: &str| -> Result<usize> {
        let t = tokens
            .next()
            .ok_or_else(|| err(format!("missing {name} in header")))?;
        let v: usize = t
            .parse()
            .map_err(|_| err(format!("{name} = '{t}' is not a positive integer")))?;
        if v == 0 {
            return Err(err(format!("{name} must be positive")));
        }
        Ok(v)
    };
    let nx = dim("nx")?;
    let ny = dim("ny")?;
    let n = nx
        .checked_mul(ny)
        .filter(|&n| n <= text.len())
        .ok_or_else(|| err(format!("header {nx}x{ny} larger than the file")))?;
    let mut values = vec![0.0; n];
    for k in 0..n {
        let t = tokens
            .next()
            .ok_or_else(|| err(format!("expected {n} values, found {k}")))?;
        let v: f64 = t
            .parse()
            .map_err(|_| err(format!("value {k} = '{t}' is not a number")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(err(format!("value {k} = {v} outside [0, 1]")));
        }
        let (j, i) = (k / nx, k % nx);
        values[i * ny + j] = v;
    }
    if let Some(t) = tokens.next() {
        return Err(err(format!("trailing data after {n} values: '{t}'")));
    }
    Ok(DensityField { nx, ny, values })
}

pub fn read_density(path: &Path) -> Result<DensityField> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_density(&text, &path.display().to_string())
}

pub fn write_density(path: &Path, field: &DensityField) -> Result<()> {
    fs::write(path, field.to_text()).map_err(|e| Error::io(path, e))
}

/// Binary PGM, `P5 <w> <h> 255`, top image row first.
pub fn encode_pgm(nx: usize, ny: usize, pixel: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut out = format!("P5 {nx} {ny} 255\n").into_bytes();
    for j in (0..ny).rev() {
        for i in 0..nx {
            out.push(pixel(i * ny + j));
        }
    }
    out
}

fn gray(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Density image: 0 white, 1 black.
pub fn density_pgm(grid: &StructuredGrid, rho_phys: &[f64]) -> Vec<u8> {
    encode_pgm(grid.nx, grid.ny, |e| gray(1.0 - rho_phys[e]))
}

/// Defect image: `delta` from 0 black to 1 white on material elements,
/// gray elsewhere.
pub fn defect_pgm(grid: &StructuredGrid, rho_phys: &[f64], delta: &[f64]) -> Vec<u8> {
    encode_pgm(grid.nx, grid.ny, |e| {
        if rho_phys[e] >= DEFECT_MASK_THRESHOLD {
            gray(delta[e])
        } else {
            MASK_GRAY
        }
    })
}

pub const CONVERGENCE_HEADER: &str =
    "iter,objective,worst_case_compliance,volume,design_change_inf,inner_newton_iters,inner_kkt_residual";

pub fn convergence_csv(history: &[IterationRecord]) -> String {
    let mut s = String::from(CONVERGENCE_HEADER);
    s.push('\n');
    for r in history {
        writeln!(
            s,
            "{},{:e},{:e},{},{:e},{},{:e}",
            r.iter,
            r.objective,
            r.worst_case_compliance,
            r.volume,
            r.design_change_inf,
            r.inner_newton_iters,
            r.inner_kkt_residual
        )
        .unwrap();
    }
    s
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_layout_is_bottom_row_first() {
        // 2x2: e = i*ny + j
        let f = DensityField::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(f.to_text(), "2 2\n0.1 0.3\n0.2 0.4\n");
        assert_eq!(parse_density(&f.to_text(), "t").unwrap(), f);
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("density.txt");
        let values: Vec<f64> = (0..12)
            .map(|e| (e as f64 * 0.731).sin().abs() / 3.0 + 1e-3)
            .collect();
        let f = DensityField::new(4, 3, values).unwrap();
        write_density(&path, &f).unwrap();
        let back = read_density(&path).unwrap();
        assert!(back
            .values
            .iter()
            .zip(&f.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn malformed_files_are_rejected() {
        for text in [
            "",
            "3",
            "0 2\n",
            "2 2\n0.1 0.2 0.3\n",
            "2 2\n0.1 0.2 0.3 0.4 0.5\n",
            "1 1\nnan\n",
            "1 1\n1.5\n",
            "1 1\n-0.1\n",
            "a b\n",
            "99999999999 99999999999\n1\n",
        ] {
            assert!(
                matches!(parse_density(text, "t"), Err(Error::DensityFormat { .. })),
                "{text:?}"
            );
        }
        let err = read_density(Path::new("/nonexistent/density.txt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/density.txt"));
    }

    #[test]
    fn images() {
        let grid = StructuredGrid::unit(3, 2).unwrap();
        let img = density_pgm(&grid, &[1.0; 6]);
        let header = b"P5 3 2 255\n";
        assert_eq!(&img[..header.len()], header);
        assert!(img[header.len()..].iter().all(|&p| p == 0));
        assert_eq!(img.len(), header.len() + 6);

        let rho = [0.4, 0.39, 1.0, 0.0, 0.9, 0.5];
        let delta = [1.0, 0.2, 0.0, 0.7, 0.5, 0.25];
        let img = defect_pgm(&grid, &rho, &delta);
        let px = &img[header.len()..];
        // top row (j = 1) first: elements 1, 3, 5
        assert_eq!(px, &[128, 128, 64, 255, 0, 128]);
    }

    #[test]
    fn csv_has_one_row_per_record() {
        let r = IterationRecord {
            iter: 0,
            objective: 1.5,
            worst_case_compliance: 1.6,
            volume: 0.5,
            design_change_inf: 0.0,
            inner_newton_iters: 7,
            inner_kkt_residual: 1e-11,
        };
        let csv = convergence_csv(&[r, IterationRecord { iter: 1, ..r }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CONVERGENCE_HEADER);
        assert!(lines[2].starts_with("1,1.5e0,"));
    }

    proptest! {
        #[test]
        fn text_round_trip_is_bitwise(nx in 1usize..6, ny in 1usize..6, seed in any::<u64>()) {
            let values: Vec<f64> = (0..nx * ny)
                .map(|k| ((seed.wrapping_mul(k as u64 + 1) >> 11) as f64) / (1u64 << 53) as f64)
                .collect();
            let f = DensityField::new(nx, ny, values).unwrap();
            let back = parse_density(&f.to_text(), "p").unwrap();
            prop_assert!(back.values.iter().zip(&f.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn parser_never_panics(s in "\\PC{0,64}") {
            let _ = parse_density(&s, "p");
        }
    }
}
