//! Time meshes and time-indexed sequences of grid functions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{Grid1D, GridFunction};

/// Uniform time mesh `t0, t0 + dt, ..., t0 + n_steps*dt`.
///
/// The step is stored, not the end time, so that a mesh restarted at an
/// interior node reproduces the original nodes bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMesh {
    origin: f64,
    dt: f64,
    /// Index of the first node relative to `origin`.
    first: usize,
    n_steps: usize,
}

impl TimeMesh {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(invalid("time mesh needs at least one step"));
        }
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(invalid(format!("bad time interval [{t0}, {t1}]")));
        }
        Ok(Self { origin: t0, dt: (t1 - t0) / n_steps as f64, first: 0, n_steps })
    }

    pub fn with_step(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || !(dt > 0.0) {
            return Err(invalid("time mesh needs a positive step and at least one step"));
        }
        Ok(Self { origin: t0, dt, first: 0, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.time(0)
    }

    pub fn t1(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn time(&self, j: usize) -> f64 {
        self.origin + (self.first + j) as f64 * self.dt
    }

    /// Index of the node at time `s`, if `s` lies on the mesh.
    pub fn index_of(&self, s: f64) -> Option<usize> {
        let k = ((s - self.t0()) / self.dt).round();
        if k < 0.0 || k > self.n_steps as f64 {
            return None;
        }
        let k = k as usize;
        ((self.time(k) - s).abs() <= 1e-9 * self.dt.max(1.0)).then_some(k)
    }

    pub fn require_index(&self, s: f64) -> Result<usize> {
        self.index_of(s).ok_or_else(|| invalid(format!("time {s} is not a mesh node")))
    }

    /// Tail of this mesh starting at node `k`, same step.
    pub fn restart_at(&self, k: usize) -> Result<Self> {
        if k >= self.n_steps {
            return Err(invalid(format!("cannot restart at node {k} of {}", self.n_steps)));
        }
        Ok(Self { origin: self.origin, dt: self.dt, first: self.first + k, n_steps: self.n_steps - k })
    }

    /// Same mesh with each step split in `factor` substeps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            origin: self.origin,
            dt: self.dt / factor as f64,
            first: self.first * factor,
            n_steps: self.n_steps * factor,
        }
    }

    pub fn same_as(&self, other: &TimeMesh) -> bool {
        self.n_steps == other.n_steps && self.t0() == other.t0() && self.dt == other.dt
    }
}

/// Density (or density-derivative) flow sampled at every mesh node.
#[derive(Debug, Clone)]
pub struct DensityPath {
    grid: Grid1D,
    mesh: TimeMesh,
    slices: Vec<Vec<f64>>,
    warnings: Vec<String>,
}

impl DensityPath {
    pub(crate) fn from_slices(grid: Grid1D, mesh: TimeMesh, slices: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(slices.len(), mesh.n_steps() + 1);
        Self { grid, mesh, slices, warnings: Vec::new() }
    }

    pub(crate) fn push_warning(&mut self, w: String) {
        self.warnings.push(w);
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn slice_values(&self, j: usize) -> &[f64] {
        &self.slices[j]
    }

    pub fn slice(&self, j: usize) -> GridFunction {
        GridFunction::from_raw(self.grid, self.slices[j].clone())
    }

    pub fn last(&self) -> GridFunction {
        self.slice(self.slices.len() - 1)
    }

    pub fn at_time(&self, s: f64) -> Result<GridFunction> {
        Ok(self.slice(self.mesh.require_index(s)?))
    }

    /// Diagnostics recorded by the solver, e.g. unconverged fixed-point steps.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn ensure_compatible(&self, other: &DensityPath) -> Result<()> {
        self.grid.ensure_same(&other.grid)?;
        if !self.mesh.same_as(&other.mesh) {
            return Err(invalid("time mesh mismatch between density paths"));
        }
        Ok(())
    }

    /// Sup over time of the L² distance between two paths on the same mesh.
    pub fn sup_l2_distance(&self, other: &DensityPath) -> Result<f64> {
        self.ensure_compatible(other)?;
        let dx = self.grid.dx();
        Ok(self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| {
                let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                crate::grid::weighted_dot(&d, &d, dx).sqrt()
            })
            .fold(0.0, f64::max))
    }

    /// Pointwise `(self - other) / h`, used for difference quotients.
    pub fn quotient(&self, base: &DensityPath, h: f64) -> Result<DensityPath> {
        self.ensure_compatible(base)?;
        let slices = self
            .slices
            .iter()
            .zip(&base.slices)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) / h).collect())
            .collect();
        Ok(Self::from_slices(self.grid, self.mesh, slices))
    }

    pub fn scaled(&self, alpha: f64) -> DensityPath {
        let slices =
            self.slices.iter().map(|s| s.iter().map(|v| alpha * v).collect()).collect();
        Self::from_slices(self.grid, self.mesh, slices)
    }

    /// Drop the first `k` slices, re-based on the restarted mesh.
    pub fn tail(&self, k: usize) -> Result<DensityPath> {
        let mesh = self.mesh.restart_at(k)?;
        Ok(Self::from_slices(self.grid, mesh, self.slices[k..].to_vec()))
    }

    /// CSV body with header `s,x0,x1,...`.
    pub fn to_csv_rows(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let mut header = vec!["s".to_string()];
        header.extend((0..self.grid.len()).map(|i| format!("x{i}")));
        let rows = self
            .slices
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let mut row = Vec::with_capacity(s.len() + 1);
                row.push(self.mesh.time(j));
                row.extend_from_slice(s);
                row
            })
            .collect();
        (header, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restart_preserves_nodes_exactly() {
        let mesh = TimeMesh::new(0.0, 1.0, 1000).unwrap();
        let tail = mesh.restart_at(300).unwrap();
        for j in 0..=tail.n_steps() {
            assert_eq!(tail.time(j), mesh.time(300 + j));
        }
        assert_eq!(tail.t1(), mesh.t1());
    }

    #[test]
    fn index_lookup() {
        let mesh = TimeMesh::new(0.5, 1.5, 10).unwrap();
        assert_eq!(mesh.index_of(0.5), Some(0));
        assert_eq!(mesh.index_of(0.8), Some(3));
        assert_eq!(mesh.index_of(1.5), Some(10));
        assert_eq!(mesh.index_of(0.85), None);
        assert_eq!(mesh.index_of(2.0), None);
        assert!(mesh.require_index(0.81).is_err());
    }

    #[test]
    fn mesh_rejects_empty_intervals() {
        assert!(TimeMesh::new(1.0, 1.0, 10).is_err());
        assert!(TimeMesh::new(0.0, 1.0, 0).is_err());
    }
}
