//! Flux-form solver for the nonlocal Fokker-Planck equation
//! `d_s m = d_xx(a m) - d_x(b m)` on a truncated interval.
//!
//! The scheme is a vertex-centred finite volume: node `i` owns a cell of
//! width `w_i` (`dx/2` for the two end nodes), fluxes live on half nodes and
//! vanish at both walls. Column sums of the discrete operator are zero, so
//! the trapezoid mass `sum w_i m_i` is conserved to round-off by every step.
//! Time stepping is the theta-method with coefficients frozen at the start
//! of the step, optionally Picard-corrected.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientModel, FieldState};
use crate::error::{invalid, Result};
use crate::grid::{sobolev_norm, trapezoid, weighted_dot, Grid1D, GridFunction};
use crate::path::{DensityPath, TimeMesh};
use crate::tridiag::Tridiagonal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FpConfig {
    pub n_steps: usize,
    /// Extra fixed-point sweeps per step; 0 keeps coefficients lagged.
    pub picard_iters: usize,
    pub picard_tol: f64,
    /// Implicitness: 1/2 is Crank-Nicolson, 1 is backward Euler.
    pub theta: f64,
}

impl Default for FpConfig {
    fn default() -> Self {
        Self { n_steps: 1000, picard_iters: 0, picard_tol: 1e-12, theta: 0.5 }
    }
}

impl FpConfig {
    pub fn with_steps(n_steps: usize) -> Self {
        Self { n_steps, ..Self::default() }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(invalid("n_steps must be positive"));
        }
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(invalid(format!("theta = {} outside [0.5, 1]", self.theta)));
        }
        if !(self.picard_tol > 0.0) {
            return Err(invalid("picard_tol must be positive"));
        }
        Ok(())
    }
}

/// Tridiagonal matrix in row form: row `i` is
/// `lower[i] u[i-1] + diag[i] u[i] + upper[i] u[i+1]`.
#[derive(Debug, Clone)]
pub(crate) struct Tri {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tri {
    /// Flux-divergence operator for nodal `a` and half-node `b`
    /// (`b_half[i]` sits between nodes `i` and `i+1`).
    pub fn flux(a: &[f64], b_half: &[f64], dx: f64) -> Self {
        let n = a.len();
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for k in 0..n - 1 {
            // F = (a_{k+1} m_{k+1} - a_k m_k)/dx - b (m_k + m_{k+1})/2 leaves k, enters k+1
            let cl = -a[k] / dx - 0.5 * b_half[k];
            let cr = a[k + 1] / dx - 0.5 * b_half[k];
            diag[k] += cl;
            upper[k] += cr;
            lower[k + 1] -= cl;
            diag[k + 1] -= cr;
        }
        Self { lower, diag, upper }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut out = vec![0.0; n];
        self.apply_into(v, &mut out);
        out
    }

    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        let n = v.len();
        for i in 0..n {
            let mut acc = self.diag[i] * v[i];
            if i > 0 {
                acc += self.lower[i] * v[i - 1];
            }
            if i + 1 < n {
                acc += self.upper[i] * v[i + 1];
            }
            out[i] = acc;
        }
    }

    /// `W - c A` with diagonal weights `w`.
    pub fn shifted(&self, w: &[f64], c: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let lower = self.lower.iter().map(|v| -c * v).collect();
        let upper = self.upper.iter().map(|v| -c * v).collect();
        let diag = self.diag.iter().zip(w).map(|(d, w)| w - c * d).collect();
        (lower, diag, upper)
    }
}

/// Spatial shapes of a model sampled once on a grid.
#[derive(Debug, Clone)]
pub(crate) struct Stencil {
    pub grid: Grid1D,
    pub w: Vec<f64>,
    alpha_nodes: Vec<f64>,
    beta_half: Vec<f64>,
}

impl Stencil {
    pub fn new(model: &CoefficientModel, grid: &Grid1D) -> Self {
        let dx = grid.dx();
        let alpha = model.vol_shape();
        let beta = model.drift_shape();
        let alpha_nodes = grid.nodes().iter().map(|&x| alpha.value(x)).collect();
        let beta_half =
            (0..grid.len() - 1).map(|i| beta.value(grid.node(i) + 0.5 * dx)).collect();
        Self { grid: *grid, w: grid.weights(), alpha_nodes, beta_half }
    }

    /// `A(c)` so that `W dm/ds = A(c) m`.
    pub fn operator(&self, st: &FieldState) -> Tri {
        let s2 = 0.5 * st.vol_level * st.vol_level;
        let a: Vec<f64> = self.alpha_nodes.iter().map(|al| s2 * al * al).collect();
        let b: Vec<f64> = self.beta_half.iter().map(|be| be * st.drift_level).collect();
        Tri::flux(&a, &b, self.grid.dx())
    }

    /// Derivative of `A` with respect to the drift functional `<h_b, m>`.
    pub fn drift_derivative(&self, st: &FieldState) -> Tri {
        let a = vec![0.0; self.alpha_nodes.len()];
        let b: Vec<f64> = self.beta_half.iter().map(|be| be * st.drift_slope).collect();
        Tri::flux(&a, &b, self.grid.dx())
    }

    /// Derivative of `A` with respect to the volatility functional `<h_s, m>`.
    pub fn vol_derivative(&self, st: &FieldState) -> Tri {
        let c = st.vol_level * st.vol_slope;
        let a: Vec<f64> = self.alpha_nodes.iter().map(|al| c * al * al).collect();
        let b = vec![0.0; self.beta_half.len()];
        Tri::flux(&a, &b, self.grid.dx())
    }
}

/// One theta step `(W - th dt A) m1 = (W + (1-th) dt A) m0`; returns the
/// factorized left-hand side for reuse.
pub(crate) fn theta_step(
    w: &[f64],
    op: &Tri,
    m0: &[f64],
    dt: f64,
    theta: f64,
    step: usize,
) -> Result<(Vec<f64>, Tridiagonal)> {
    let (l, d, u) = op.shifted(w, theta * dt);
    let lhs = Tridiagonal::factor(&l, &d, &u, step)?;
    let mut rhs = op.apply(m0);
    for ((r, wi), mi) in rhs.iter_mut().zip(w).zip(m0) {
        *r = wi * mi + (1.0 - theta) * dt * *r;
    }
    lhs.solve_in_place(&mut rhs);
    Ok((rhs, lhs))
}

/// Solves the Fokker-Planck equation from `mu` at time `t` up to `t_end`.
pub fn solve_fp(
    model: &CoefficientModel,
    mu: &GridFunction,
    t: f64,
    t_end: f64,
    cfg: &FpConfig,
) -> Result<DensityPath> {
    let mesh = TimeMesh::new(t, t_end, cfg.n_steps)?;
    if mu.boundary_max() > 1e-10 {
        return Err(invalid(format!(
            "initial density reaches the boundary (|mu| = {:e}); enlarge the domain",
            mu.boundary_max()
        )));
    }
    solve_on_mesh(model, mu, &mesh, cfg)
}

/// Same as [`solve_fp`] on an explicit mesh; used for exact restarts.
pub fn solve_on_mesh(
    model: &CoefficientModel,
    mu: &GridFunction,
    mesh: &TimeMesh,
    cfg: &FpConfig,
) -> Result<DensityPath> {
    cfg.validate()?;
    let grid = *mu.grid();
    grid.ensure_same(model.grid())?;
    let stencil = Stencil::new(model, &grid);
    let dt = mesh.dt();
    let dx = grid.dx();
    let mut slices = Vec::with_capacity(mesh.n_steps() + 1);
    slices.push(mu.values().to_vec());
    let mut warnings = Vec::new();
    for j in 0..mesh.n_steps() {
        let m0 = &slices[j];
        let st = model.field_state(m0);
        let (mut m1, _) = theta_step(&stencil.w, &stencil.operator(&st), m0, dt, cfg.theta, j)?;
        if cfg.picard_iters > 0 && !model.density_independent() {
            let mut converged = false;
            for _ in 0..cfg.picard_iters {
                let mid: Vec<f64> =
                    m0.iter().zip(&m1).map(|(a, b)| (1.0 - cfg.theta) * a + cfg.theta * b).collect();
                let st = model.field_state(&mid);
                let (next, _) = theta_step(&stencil.w, &stencil.operator(&st), m0, dt, cfg.theta, j)?;
                let d: Vec<f64> = next.iter().zip(&m1).map(|(a, b)| a - b).collect();
                let change = weighted_dot(&d, &d, dx).sqrt();
                m1 = next;
                if change < cfg.picard_tol {
                    converged = true;
                    break;
                }
            }
            if !converged {
                warnings.push(format!(
                    "step {j}: fixed point not converged after {} iterations",
                    cfg.picard_iters
                ));
            }
        }
        if let Some(i) = m1.iter().position(|v| !v.is_finite()) {
            return Err(crate::error::Error::Numerical {
                step: j,
                reason: format!("non-finite density at node {i}"),
            });
        }
        slices.push(m1);
    }
    let mut path = DensityPath::from_slices(grid, *mesh, slices);
    for w in warnings {
        path.push_warning(w);
    }
    Ok(path)
}

/// `d_s m` from the discrete right-hand side at density `m`.
pub fn density_time_derivative(model: &CoefficientModel, m: &GridFunction) -> GridFunction {
    let stencil = Stencil::new(model, m.grid());
    let st = model.field_state(m.values());
    let am = stencil.operator(&st).apply(m.values());
    let values = am.iter().zip(&stencil.w).map(|(v, w)| v / w).collect();
    GridFunction::from_raw(*m.grid(), values)
}

/// `||m(T) - m^{s, m(s)}(T)||_{L2}` with the restart taken on the same mesh.
pub fn flow_property_check(
    model: &CoefficientModel,
    mu: &GridFunction,
    t: f64,
    s: f64,
    t_end: f64,
    cfg: &FpConfig,
) -> Result<f64> {
    if !(t <= s && s < t_end) {
        return Err(invalid(format!("need t <= s < T, got t={t}, s={s}, T={t_end}")));
    }
    let full = solve_fp(model, mu, t, t_end, cfg)?;
    let k = full.mesh().require_index(s)?;
    if k == 0 {
        return Ok(0.0);
    }
    let tail_mesh = full.mesh().restart_at(k)?;
    let restarted = solve_on_mesh(
        model,
        &full.slice(k),
        &tail_mesh,
        &FpConfig { n_steps: tail_mesh.n_steps(), ..*cfg },
    )?;
    crate::grid::l2_distance(&full.last(), &restarted.last())
}

#[derive(Debug, Clone, Serialize)]
pub struct NormReport {
    /// `sup_s ||m(s)||_{W^{k,2}}` for `k = 0, 1, 2`.
    pub sup_sobolev: [f64; 3],
    /// `max_{j<k} ||m_j - m_k||_{L2} / |s_j - s_k|^{1/2}`.
    pub holder_quotient: f64,
    pub min_value: f64,
    /// `max_j |mass(m_j) - mass(m_0)|`.
    pub mass_drift: f64,
}

pub fn norm_report(path: &DensityPath) -> NormReport {
    let grid = *path.grid();
    let dx = grid.dx();
    let n = path.n_slices();
    let mut sup = [0.0f64; 3];
    let mut min_value = f64::INFINITY;
    let mass0 = trapezoid(path.slice_values(0), dx);
    let mut mass_drift = 0.0f64;
    for j in 0..n {
        let s = path.slice(j);
        for (k, slot) in sup.iter_mut().enumerate() {
            *slot = slot.max(sobolev_norm(&s, k).unwrap_or(f64::NAN));
        }
        min_value = min_value.min(s.values().iter().cloned().fold(f64::INFINITY, f64::min));
        mass_drift = mass_drift.max((trapezoid(s.values(), dx) - mass0).abs());
    }
    let mesh = *path.mesh();
    let holder_quotient = (0..n)
        .into_par_iter()
        .map(|j| {
            let a = path.slice_values(j);
            let mut best = 0.0f64;
            let mut d = vec![0.0; a.len()];
            for k in j + 1..n {
                let b = path.slice_values(k);
                for ((di, x), y) in d.iter_mut().zip(a).zip(b) {
                    *di = x - y;
                }
                let q = weighted_dot(&d, &d, dx).sqrt() / (mesh.time(k) - mesh.time(j)).sqrt();
                best = best.max(q);
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0, f64::max);
    NormReport { sup_sobolev: sup, holder_quotient, min_value, mass_drift }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{make_state_invariant_model, StateInvariantSpec};
    use crate::functions::{Outer, Profile};
    use crate::grid::{l2_distance, quadrature};

    fn constant_model(grid: Grid1D, b: f64, sigma: f64) -> CoefficientModel {
        make_state_invariant_model(StateInvariantSpec {
            b0: b,
            b1: 0.0,
            b_outer: Outer::Identity,
            h_b: GridFunction::zeros(grid),
            s0: sigma,
            s1: 0.0,
            s_outer: Outer::Identity,
            h_s: GridFunction::zeros(grid),
        })
        .unwrap()
    }

    fn normal(grid: Grid1D, mean: f64, std: f64) -> GridFunction {
        let p = Profile::Normal { mean, std };
        GridFunction::from_fn(grid, |x| p.value(x))
    }

    #[test]
    fn flux_operator_conserves_mass() {
        let a = [1.0, 2.0, 0.5, 1.5, 1.0];
        let b = [0.3, -0.2, 0.7, 0.1];
        let op = Tri::flux(&a, &b, 0.1);
        for col in 0..5 {
            let mut e = vec![0.0; 5];
            e[col] = 1.0;
            let s: f64 = op.apply(&e).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn heat_kernel_oracle() {
        let grid = Grid1D::with_spacing(-8.0, 8.0, 0.01).unwrap();
        let model = constant_model(grid, 0.0, 2f64.sqrt());
        let mu = normal(grid, 0.0, 0.5);
        let path = solve_fp(&model, &mu, 0.0, 0.5, &FpConfig::with_steps(500)).unwrap();
        let exact = normal(grid, 0.0, (0.25f64 + 1.0).sqrt());
        assert!(l2_distance(&path.last(), &exact).unwrap() < 1e-3);
    }

    #[test]
    fn drift_transport_matches_characteristics() {
        let grid = Grid1D::with_spacing(-8.0, 8.0, 0.02).unwrap();
        let h = GridFunction::from_fn(grid, |x| "gauss(0,2,1,1)".parse::<Profile>().unwrap().value(x));
        let model = make_state_invariant_model(StateInvariantSpec {
            b0: 0.2,
            b1: 0.5,
            b_outer: Outer::Sin,
            h_b: h.clone(),
            s0: 1.0,
            s1: 0.0,
            s_outer: Outer::Identity,
            h_s: GridFunction::zeros(grid),
        })
        .unwrap();
        let mu = normal(grid, -0.5, 0.5);
        let path = solve_fp(&model, &mu, 0.0, 1.0, &FpConfig::with_steps(1000)).unwrap();
        let dt = path.mesh().dt();
        let nodes = grid.nodes();
        let mut shift = 0.0;
        for j in 0..path.mesh().n_steps() {
            let st = model.field_state(path.slice_values(j));
            shift += model.b(0.0, &st) * dt;
        }
        let mean_of = |v: &[f64]| {
            let xm: Vec<f64> = v.iter().zip(&nodes).map(|(m, x)| m * x).collect();
            trapezoid(&xm, grid.dx())
        };
        let moved = mean_of(path.slice_values(path.n_slices() - 1)) - mean_of(mu.values());
        assert!((moved - shift).abs() < 1e-3, "{moved} vs {shift}");
    }

    #[test]
    fn mass_is_conserved_and_restart_is_exact() {
        let grid = Grid1D::with_spacing(-8.0, 8.0, 0.05).unwrap();
        let h = GridFunction::from_fn(grid, |x| "gauss(0,2,1,1)".parse::<Profile>().unwrap().value(x));
        let model = make_state_invariant_model(StateInvariantSpec {
            b0: 0.0,
            b1: 0.5,
            b_outer: Outer::Sin,
            h_b: h.clone(),
            s0: 1.0,
            s1: 0.3,
            s_outer: Outer::Tanh,
            h_s: h,
        })
        .unwrap();
        let mu = normal(grid, 0.2, 0.5);
        let cfg = FpConfig::with_steps(200);
        let path = solve_fp(&model, &mu, 0.0, 1.0, &cfg).unwrap();
        let m0 = quadrature(&mu);
        for j in 0..path.n_slices() {
            assert!((quadrature(&path.slice(j)) - m0).abs() < 1e-12);
        }
        assert_eq!(flow_property_check(&model, &mu, 0.0, 0.4, 1.0, &cfg).unwrap(), 0.0);
        assert_eq!(flow_property_check(&model, &mu, 0.0, 0.0, 1.0, &cfg).unwrap(), 0.0);
        assert!(flow_property_check(&model, &mu, 0.0, 0.4037, 1.0, &cfg).is_err());

        let picard = FpConfig { picard_iters: 20, picard_tol: 1e-11, ..cfg };
        let d = flow_property_check(&model, &mu, 0.0, 0.4, 1.0, &picard).unwrap();
        assert!(d <= picard.picard_tol * picard.n_steps as f64);
        let p = solve_fp(&model, &mu, 0.0, 1.0, &picard).unwrap();
        assert!(p.warnings().is_empty());
        let tight = FpConfig { picard_iters: 1, picard_tol: 1e-300, ..cfg };
        assert!(!solve_fp(&model, &mu, 0.0, 1.0, &tight).unwrap().warnings().is_empty());
    }

    #[test]
    fn norm_report_behaviour() {
        let grid = Grid1D::with_spacing(-8.0, 8.0, 0.05).unwrap();
        let model = constant_model(grid, 0.0, 1.0);
        let mu = normal(grid, 0.0, 0.5);
        let path = solve_fp(&model, &mu, 0.0, 1.0, &FpConfig::with_steps(100)).unwrap();
        let r = norm_report(&path);
        assert!(r.holder_quotient.is_finite() && r.holder_quotient > 0.0);
        assert!(r.mass_drift < 1e-12);
        let l2: Vec<f64> = (0..path.n_slices()).map(|j| crate::grid::l2_norm(&path.slice(j))).collect();
        assert!(l2.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(r.sup_sobolev[0], l2[0]);

        let flat = GridFunction::from_fn(grid, |_| 1.0 / 16.0);
        let stationary = solve_on_mesh(
            &model,
            &flat,
            &TimeMesh::new(0.0, 1.0, 50).unwrap(),
            &FpConfig::with_steps(50),
        )
        .unwrap();
        assert!(norm_report(&stationary).holder_quotient < 1e-12);

        let fine = solve_fp(&model, &mu, 0.0, 1.0, &FpConfig::with_steps(200)).unwrap();
        let rf = norm_report(&fine);
        for k in 0..3 {
            assert!((rf.sup_sobolev[k] / r.sup_sobolev[k] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn time_derivative_matches_step_difference() {
        let grid = Grid1D::with_spacing(-8.0, 8.0, 0.05).unwrap();
        let model = constant_model(grid, 0.3, 1.0);
        let mu = normal(grid, 0.0, 0.6);
        let dt = 1e-5;
        let path = solve_on_mesh(&model, &mu, &TimeMesh::with_step(0.0, dt, 1).unwrap(), &FpConfig::with_steps(1))
            .unwrap();
        let ds = density_time_derivative(&model, &mu);
        for i in 0..grid.len() {
            let q = (path.slice_values(1)[i] - mu.values()[i]) / dt;
            assert!((q - ds.values()[i]).abs() < 1e-3 * (1.0 + ds.values()[i].abs()));
        }
    }

    #[test]
    fn rejects_mass_at_boundary() {
        let grid = Grid1D::with_spacing(-2.0, 2.0, 0.05).unwrap();
        let model = constant_model(grid, 0.0, 1.0);
        let mu = normal(grid, 0.0, 1.0);
        assert!(solve_fp(&model, &mu, 0.0, 1.0, &FpConfig::default()).is_err());
    }
}
