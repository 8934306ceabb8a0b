//! Derivatives of the density flow with respect to the initial density.
//!
//! [`solve_directional`] propagates one direction `mu~` through the exact
//! linearization of the discrete Fokker-Planck step, so its output is the
//! derivative of the discrete flow. The kernel route builds the full
//! derivative operator `k = f + g`: `f` from the translation-invariant
//! fundamental solution (only available when the coefficients ignore `x`),
//! `g` from one linear solve per `y`-column driven by `f`.

use rayon::prelude::*;

use crate::coefficients::CoefficientModel;
use crate::error::{invalid, Error, Result};
use crate::fp::{theta_step, FpConfig, Stencil, Tri};
use crate::grid::{weighted_dot, Grid1D, GridFunction};
use crate::path::{DensityPath, TimeMesh};
use crate::tridiag::Tridiagonal;

fn check_mesh(m_path: &DensityPath, cfg: &FpConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.n_steps != m_path.mesh().n_steps() {
        return Err(invalid(format!(
            "config has {} steps but the density path has {}",
            cfg.n_steps,
            m_path.mesh().n_steps()
        )));
    }
    Ok(())
}

/// Per-step data of the linearized scheme.
struct TangentStep {
    op: Tri,
    lhs: Tridiagonal,
    /// `dA/dc_b` and `dA/dc_s` applied to the theta-average of the step.
    v_b: Vec<f64>,
    v_s: Vec<f64>,
}

fn tangent_step(
    model: &CoefficientModel,
    stencil: &Stencil,
    m_path: &DensityPath,
    j: usize,
    theta: f64,
) -> Result<TangentStep> {
    let m0 = m_path.slice_values(j);
    let m1 = m_path.slice_values(j + 1);
    let st = model.field_state(m0);
    let op = stencil.operator(&st);
    let dt = m_path.mesh().dt();
    let (l, d, u) = op.shifted(&stencil.w, theta * dt);
    let lhs = Tridiagonal::factor(&l, &d, &u, j)?;
    let mid: Vec<f64> = m0.iter().zip(m1).map(|(a, b)| (1.0 - theta) * a + theta * b).collect();
    let v_b = stencil.drift_derivative(&st).apply(&mid);
    let v_s = stencil.vol_derivative(&st).apply(&mid);
    Ok(TangentStep { op, lhs, v_b, v_s })
}

impl TangentStep {
    /// Advances `u` in place given the functional increments `(pb, ps)`.
    fn advance(&self, w: &[f64], u: &mut [f64], pb: f64, ps: f64, dt: f64, theta: f64) {
        let au = self.op.apply(u);
        for i in 0..u.len() {
            u[i] = w[i] * u[i]
                + (1.0 - theta) * dt * au[i]
                + dt * (pb * self.v_b[i] + ps * self.v_s[i]);
        }
        self.lhs.solve_in_place(u);
    }
}

/// Directional derivative `m~(s)` of the density flow along `mu_tilde`.
pub fn solve_directional(
    model: &CoefficientModel,
    m_path: &DensityPath,
    mu_tilde: &GridFunction,
    cfg: &FpConfig,
) -> Result<DensityPath> {
    check_mesh(m_path, cfg)?;
    let grid = *m_path.grid();
    grid.ensure_same(mu_tilde.grid())?;
    let stencil = Stencil::new(model, &grid);
    let dx = grid.dx();
    let dt = m_path.mesh().dt();
    let hb = model.drift_functional().h().values();
    let hs = model.vol_functional().h().values();
    let mut slices = Vec::with_capacity(m_path.n_slices());
    slices.push(mu_tilde.values().to_vec());
    for j in 0..m_path.mesh().n_steps() {
        let step = tangent_step(model, &stencil, m_path, j, cfg.theta)?;
        let mut u = slices[j].clone();
        let pb = weighted_dot(hb, &u, dx);
        let ps = weighted_dot(hs, &u, dx);
        step.advance(&stencil.w, &mut u, pb, ps, dt, cfg.theta);
        slices.push(u);
    }
    Ok(DensityPath::from_slices(grid, *m_path.mesh(), slices))
}

/// Time-indexed two-point field `K_j(x_i, y_l)`.
///
/// Full matrices are kept only at snapshot steps (every `snapshot_every`
/// steps plus the final one); the projections `<h_b, K_j(., y)>` and
/// `<h_s, K_j(., y)>` needed by the correction solve and the `U` process are
/// kept at every step.
#[derive(Debug, Clone)]
pub struct KernelPath {
    grid: Grid1D,
    mesh: TimeMesh,
    snapshot_steps: Vec<usize>,
    /// Column-major: entry `(i, l)` at `l * n + i`.
    snapshots: Vec<Vec<f64>>,
    proj_b: Vec<Vec<f64>>,
    proj_s: Vec<Vec<f64>>,
}

fn snapshot_steps(n_steps: usize, every: usize) -> Vec<usize> {
    let every = every.max(1);
    let mut v: Vec<usize> = (0..=n_steps).step_by(every).collect();
    if *v.last().unwrap() != n_steps {
        v.push(n_steps);
    }
    v
}

impl KernelPath {
    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }

    pub fn snapshot_steps(&self) -> &[usize] {
        &self.snapshot_steps
    }

    fn snapshot_index(&self, s: f64) -> Result<usize> {
        let j = self.mesh.require_index(s)?;
        self.snapshot_steps.binary_search(&j).map_err(|_| {
            invalid(format!("time {s} (step {j}) was not retained; lower --snapshot-every"))
        })
    }

    /// Column-major matrix at time `s`.
    pub fn matrix_at(&self, s: f64) -> Result<&[f64]> {
        Ok(&self.snapshots[self.snapshot_index(s)?])
    }

    pub fn matrix_at_step(&self, j: usize) -> Option<&[f64]> {
        self.snapshot_steps.binary_search(&j).ok().map(|k| self.snapshots[k].as_slice())
    }

    pub fn entry(&self, s: f64, i: usize, l: usize) -> Result<f64> {
        let n = self.grid.len();
        Ok(self.matrix_at(s)?[l * n + i])
    }

    /// `<h_b, K_j(., y_l)>` for all `l`.
    pub fn drift_projection(&self, j: usize) -> &[f64] {
        &self.proj_b[j]
    }

    /// `<h_s, K_j(., y_l)>` for all `l`.
    pub fn vol_projection(&self, j: usize) -> &[f64] {
        &self.proj_s[j]
    }

    fn ensure_compatible(&self, other: &KernelPath) -> Result<()> {
        self.grid.ensure_same(&other.grid)?;
        if !self.mesh.same_as(&other.mesh) || self.snapshot_steps != other.snapshot_steps {
            return Err(invalid("kernel paths have different meshes or snapshot sets"));
        }
        Ok(())
    }

    /// Frobenius norm `(int int K^2 dx dy)^{1/2}` of each retained snapshot.
    pub fn frobenius_norms(&self) -> Vec<f64> {
        let n = self.grid.len();
        let w = self.grid.weights();
        self.snapshots
            .iter()
            .map(|k| {
                let mut acc = 0.0;
                for l in 0..n {
                    for i in 0..n {
                        acc += w[l] * w[i] * k[l * n + i].powi(2);
                    }
                }
                acc.sqrt()
            })
            .collect()
    }

    /// Rows `x_i`, columns `y_l`, for CSV export.
    pub fn matrix_rows(&self, s: f64) -> Result<Vec<Vec<f64>>> {
        let k = self.matrix_at(s)?;
        let n = self.grid.len();
        Ok((0..n).map(|i| (0..n).map(|l| k[l * n + i]).collect()).collect())
    }
}

fn require_state_invariant(model: &CoefficientModel) -> Result<()> {
    if model.state_invariant() {
        Ok(())
    } else {
        Err(Error::UnsupportedModel(
            "the kernel representation needs x-independent coefficients; \
             use directional derivatives instead"
                .into(),
        ))
    }
}

/// Projections `<h, column_l>` of a column-major matrix.
fn column_projections(h: &[f64], mat: impl Fn(usize, usize) -> f64, n: usize, dx: f64) -> Vec<f64> {
    let w = |i: usize| if i == 0 || i + 1 == n { 0.5 * dx } else { dx };
    (0..n).map(|l| (0..n).map(|i| w(i) * h[i] * mat(i, l)).sum()).collect()
}

/// Fundamental part `f(s, x, y) = h(s, x - y)`, with `h` the solution of the
/// constant-in-space equation started from a Gaussian of width `2 dx`.
pub fn solve_fundamental(
    model: &CoefficientModel,
    m_path: &DensityPath,
    cfg: &FpConfig,
    snapshot_every: usize,
) -> Result<KernelPath> {
    require_state_invariant(model)?;
    check_mesh(m_path, cfg)?;
    let grid = *m_path.grid();
    let n = grid.len();
    let dx = grid.dx();
    let mesh = *m_path.mesh();
    let hz = fundamental_profiles(model, m_path, cfg)?;
    let hb = model.drift_functional().h().values();
    let hs = model.vol_functional().h().values();
    let steps = snapshot_steps(mesh.n_steps(), snapshot_every);

    let per_step: Vec<(Vec<f64>, Vec<f64>)> = hz
        .par_iter()
        .map(|h| {
            let f = |i: usize, l: usize| h[i + n - 1 - l];
            (column_projections(hb, f, n, dx), column_projections(hs, f, n, dx))
        })
        .collect();
    let (proj_b, proj_s) = per_step.into_iter().unzip();
    let snapshots = steps
        .iter()
        .map(|&j| {
            let h = &hz[j];
            let mut k = vec![0.0; n * n];
            for l in 0..n {
                k[l * n..(l + 1) * n].copy_from_slice(&h[n - 1 - l..2 * n - 1 - l]);
            }
            k
        })
        .collect();
    Ok(KernelPath { grid, mesh, snapshot_steps: steps, snapshots, proj_b, proj_s })
}

/// Offset grid of `z = x - y` values, `z_k = (k - (n-1)) dx`.
pub fn offset_grid(grid: &Grid1D) -> Grid1D {
    let span = grid.x_max() - grid.x_min();
    Grid1D::new(-span, span, 2 * grid.len() - 1).expect("valid offset grid")
}

/// Solutions `h(s_j, z)` on the offset grid, every step.
pub fn fundamental_profiles(
    model: &CoefficientModel,
    m_path: &DensityPath,
    cfg: &FpConfig,
) -> Result<Vec<Vec<f64>>> {
    require_state_invariant(model)?;
    check_mesh(m_path, cfg)?;
    let zgrid = offset_grid(m_path.grid());
    let dz = zgrid.dx();
    let nz = zgrid.len();
    let width = 2.0 * dz;
    let mut h0: Vec<f64> =
        zgrid.nodes().iter().map(|z| (-0.5 * (z / width).powi(2)).exp()).collect();
    let mass = crate::grid::trapezoid(&h0, dz);
    h0.iter_mut().for_each(|v| *v /= mass);
    let w = zgrid.weights();
    let dt = m_path.mesh().dt();
    let mut out = Vec::with_capacity(m_path.n_slices());
    out.push(h0);
    for j in 0..m_path.mesh().n_steps() {
        let st = model.field_state(m_path.slice_values(j));
        let a = vec![model.a(0.0, &st); nz];
        let b = vec![model.b(0.0, &st); nz - 1];
        let op = Tri::flux(&a, &b, dz);
        let (next, _) = theta_step(&w, &op, &out[j], dt, cfg.theta, j)?;
        out.push(next);
    }
    Ok(out)
}

/// Correction part `g`: zero initial data, one linear solve per `y`-column
/// sharing the factorized step operators.
pub fn solve_correction(
    model: &CoefficientModel,
    m_path: &DensityPath,
    f_path: &KernelPath,
    cfg: &FpConfig,
) -> Result<KernelPath> {
    check_mesh(m_path, cfg)?;
    m_path.grid().ensure_same(&f_path.grid)?;
    if !m_path.mesh().same_as(&f_path.mesh) {
        return Err(invalid("fundamental part and density path use different meshes"));
    }
    let grid = *m_path.grid();
    let n = grid.len();
    let dx = grid.dx();
    let dt = m_path.mesh().dt();
    let stencil = Stencil::new(model, &grid);
    let hb = model.drift_functional().h().values();
    let hs = model.vol_functional().h().values();
    let n_steps = m_path.mesh().n_steps();

    let mut cols = vec![vec![0.0; n]; n];
    let mut proj_b = Vec::with_capacity(n_steps + 1);
    let mut proj_s = Vec::with_capacity(n_steps + 1);
    let mut snapshots = Vec::with_capacity(f_path.snapshot_steps.len());
    let project = |cols: &[Vec<f64>], h: &[f64]| -> Vec<f64> {
        cols.iter().map(|c| weighted_dot(h, c, dx)).collect()
    };
    let snapshot = |cols: &[Vec<f64>]| -> Vec<f64> { cols.concat() };

    if model.density_independent() {
        let zeros = vec![0.0; n];
        return Ok(KernelPath {
            grid,
            mesh: *m_path.mesh(),
            snapshot_steps: f_path.snapshot_steps.clone(),
            snapshots: vec![vec![0.0; n * n]; f_path.snapshot_steps.len()],
            proj_b: vec![zeros.clone(); n_steps + 1],
            proj_s: vec![zeros; n_steps + 1],
        });
    }

    for j in 0..=n_steps {
        let pb = project(&cols, hb);
        let ps = project(&cols, hs);
        if f_path.snapshot_steps.binary_search(&j).is_ok() {
            snapshots.push(snapshot(&cols));
        }
        if j < n_steps {
            let step = tangent_step(model, &stencil, m_path, j, cfg.theta)?;
            let fb = &f_path.proj_b[j];
            let fs = &f_path.proj_s[j];
            cols.par_iter_mut().enumerate().for_each(|(l, col)| {
                step.advance(&stencil.w, col, pb[l] + fb[l], ps[l] + fs[l], dt, cfg.theta);
            });
        }
        proj_b.push(pb);
        proj_s.push(ps);
    }
    Ok(KernelPath {
        grid,
        mesh: *m_path.mesh(),
        snapshot_steps: f_path.snapshot_steps.clone(),
        snapshots,
        proj_b,
        proj_s,
    })
}

/// `k = f + g`.
pub fn assemble_kernel(f_path: &KernelPath, g_path: &KernelPath) -> Result<KernelPath> {
    f_path.ensure_compatible(g_path)?;
    let add = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
    };
    Ok(KernelPath {
        grid: f_path.grid,
        mesh: f_path.mesh,
        snapshot_steps: f_path.snapshot_steps.clone(),
        snapshots: add(&f_path.snapshots, &g_path.snapshots),
        proj_b: add(&f_path.proj_b, &g_path.proj_b),
        proj_s: add(&f_path.proj_s, &g_path.proj_s),
    })
}

/// Convenience: `f`, `g` and `k` in one call.
pub fn solve_kernel(
    model: &CoefficientModel,
    m_path: &DensityPath,
    cfg: &FpConfig,
    snapshot_every: usize,
) -> Result<KernelPath> {
    let f = solve_fundamental(model, m_path, cfg, snapshot_every)?;
    let g = solve_correction(model, m_path, &f, cfg)?;
    assemble_kernel(&f, &g)
}

/// `x -> int K(s, x, y) mu~(y) dy`.
pub fn apply_kernel(k_path: &KernelPath, mu_tilde: &GridFunction, s: f64) -> Result<GridFunction> {
    k_path.grid.ensure_same(mu_tilde.grid())?;
    let k = k_path.matrix_at(s)?;
    let n = k_path.grid.len();
    let w = k_path.grid.weights();
    let mut out = vec![0.0; n];
    for l in 0..n {
        let c = w[l] * mu_tilde.values()[l];
        if c != 0.0 {
            for (o, kv) in out.iter_mut().zip(&k[l * n..(l + 1) * n]) {
                *o += c * kv;
            }
        }
    }
    Ok(GridFunction::from_raw(k_path.grid, out))
}

/// `y -> int K(s, x, y) phi(x) dx`.
pub fn kernel_test_function(k_path: &KernelPath, phi: &GridFunction, s: f64) -> Result<GridFunction> {
    k_path.grid.ensure_same(phi.grid())?;
    let k = k_path.matrix_at(s)?;
    let n = k_path.grid.len();
    let dx = k_path.grid.dx();
    let out = (0..n).map(|l| weighted_dot(&k[l * n..(l + 1) * n], phi.values(), dx)).collect();
    Ok(GridFunction::from_raw(k_path.grid, out))
}
