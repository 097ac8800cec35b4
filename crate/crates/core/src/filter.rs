//! Linearly decaying (cone) density filter.

use crate::fem::StructuredGrid;

/// Row-normalized filter matrix `W` with weights proportional to
/// `max(0, r - d(i, j))` between element centroids.
#[derive(Debug, Clone)]
pub struct FilterOperator {
    radius: f64,
    rows: Vec<Vec<(usize, f64)>>,
}

impl FilterOperator {
    /// `radius` is measured in element widths.
    pub fn build(grid: &StructuredGrid, radius: f64) -> Self {
        let r_phys = radius * grid.elem_w;
        let reach_i = (r_phys / grid.elem_w).ceil() as isize;
        let reach_j = (r_phys / grid.elem_h).ceil() as isize;
        let rows = (0..grid.n_elements())
            .map(|e| {
                let (i, j) = grid.element_ij(e);
                let (cx, cy) = grid.centroid(e);
                let mut row = Vec::new();
                for di in -reach_i..=reach_i {
                    for dj in -reach_j..=reach_j {
                        let (ii, jj) = (i as isize + di, j as isize + dj);
                        if ii < 0 || jj < 0 || ii >= grid.nx as isize || jj >= grid.ny as isize {
                            continue;
                        }
                        let k = grid.element(ii as usize, jj as usize);
                        let (kx, ky) = grid.centroid(k);
                        let d = ((cx - kx).powi(2) + (cy - ky).powi(2)).sqrt();
                        let w = r_phys - d;
                        if w > 0.0 || k == e {
                            row.push((k, w.max(0.0)));
                        }
                    }
                }
                let sum: f64 = row.iter().map(|(_, w)| w).sum();
                if sum > 0.0 {
                    for (_, w) in &mut row {
                        *w /= sum;
                    }
                } else {
                    // radius below one element: self only
                    row.retain(|(k, _)| *k == e);
                    row[0].1 = 1.0;
                }
                row.retain(|(_, w)| *w > 0.0);
                row.sort_unstable_by_key(|(k, _)| *k);
                row
            })
            .collect();
        Self { radius, rows }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            radius: 0.0,
            rows: (0..n).map(|e| vec![(e, 1.0)]).collect(),
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Physical densities `W rho`.
    pub fn apply(&self, rho_design: &[f64]) -> Vec<f64> {
        assert_eq!(rho_design.len(), self.rows.len());
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(k, w)| w * rho_design[k]).sum())
            .collect()
    }

    /// Sensitivity chain rule `W^T g`.
    pub fn chain_rule(&self, grad_wrt_phys: &[f64]) -> Vec<f64> {
        assert_eq!(grad_wrt_phys.len(), self.rows.len());
        let mut out = vec![0.0; self.rows.len()];
        for (row, g) in self.rows.iter().zip(grad_wrt_phys) {
            for &(k, w) in row {
                out[k] += w * g;
            }
        }
        out
    }
}
