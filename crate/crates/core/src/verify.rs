//! Numerical checks of the identities the value function satisfies: the
//! master equation, the martingale property along the flow, the Itô
//! formula, the terminal condition, difference-quotient agreement of the
//! derivative estimators, and convergence rates of the linearizations.
//!
//! Every check reports the quantities it compares together with the error
//! budget it was judged against; budgets are built from standard errors and
//! Richardson-type estimates computed in the same run.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::CoefficientModel;
use crate::error::{invalid, Error, Result};
use crate::fp::{density_time_derivative, solve_fp, solve_on_mesh, FpConfig};
use crate::functions::Profile;
use crate::grid::{l2_inner, spatial_derivative, GridFunction};
use crate::linearized::solve_directional;
use crate::path::{DensityPath, TimeMesh};
use crate::scenario::Scenario;
use crate::sde::{check_escapes, derive_seed, euler_path, simulate_x, simulate_y, NoiseBank};
use crate::stats::{fit_loglog_slope, mean_and_se, SlopeFit};
use crate::value::{
    prepare, report_with_extra, run_paths, terminal_samples, y_direction, Estimate, PathContext,
    PathwiseRequest, TerminalFunctional, ValueSettings,
};

/// Weight given to Richardson discrepancies when they are turned into bias envelopes.
pub const RICHARDSON_SAFETY: f64 = 2.0;

/// Relative level below which convergence-study errors count as round-off.
pub const FLOOR_REL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    /// Sum of the components, in order.
    pub residual: f64,
    pub std_err: f64,
    pub components: Vec<(String, f64)>,
    /// Residual on the mesh with `dt` and `dx` doubled, same Brownian paths.
    pub coarse_residual: f64,
    pub c_est: f64,
    /// `c_est * (dt + dx^2)`.
    pub discretization: f64,
    pub error_budget: f64,
    pub dt: f64,
    pub dx: f64,
    pub n_paths: usize,
    pub escaped: usize,
    pub seed: u64,
}

impl ResidualReport {
    pub fn pass(&self) -> bool {
        self.residual.abs() <= self.error_budget
    }
}

/// `d_xx(a mu) - d_x(b mu)`, the density generator applied to `mu`.
pub fn density_generator(model: &CoefficientModel, mu: &GridFunction) -> Result<GridFunction> {
    let st = model.field_state(mu.values());
    let grid = *mu.grid();
    let times = |f: &dyn Fn(f64) -> f64| {
        let v = grid.nodes().iter().zip(mu.values()).map(|(&x, m)| f(x) * m).collect();
        GridFunction::new(grid, v)
    };
    let am = times(&|x| model.a(x, &st))?;
    let bm = times(&|x| model.b(x, &st))?;
    spatial_derivative(&am, 2)?.axpy(-1.0, &spatial_derivative(&bm, 1)?)
}

struct Level {
    components: Vec<(String, f64)>,
    residual: f64,
    std_err: f64,
    escaped: usize,
}

#[allow(clippy::too_many_arguments)]
fn residual_level(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    x: f64,
    mu: &GridFunction,
    mesh: &TimeMesh,
    fp: &FpConfig,
    noise: &NoiseBank,
    snapshot_every: usize,
) -> Result<Level> {
    let prep = prepare(model, mu, mesh, fp, &[], true, snapshot_every)?;
    let bracket = density_generator(model, mu)?;
    let (report, stats) = report_with_extra(model, phi, x, &prep, noise, &[], Some(&bracket))?;
    let st = model.field_state(mu.values());
    let (b, a) = (model.b(x, &st), model.a(x, &st));
    let mu_term = stats.estimate(|s| s.kernel[0]);
    let components = vec![
        ("dv_dt".to_string(), report.dv_dt.mean),
        ("b_dv_dx".to_string(), b * report.dv_dx.mean),
        ("a_d2v_dx2".to_string(), a * report.d2v_dx2.mean),
        ("mu_term".to_string(), mu_term.mean),
    ];
    let per_path: Vec<f64> = stats
        .active()
        .into_iter()
        .map(|s| s.vt + b * s.vx + a * s.vxx + s.kernel[0])
        .collect();
    let (_, std_err) = mean_and_se(&per_path);
    Ok(Level {
        residual: components.iter().map(|c| c.1).sum(),
        components,
        std_err,
        escaped: report.escaped,
    })
}

/// `dV/dt + b V_x + a V_xx + <dV/dmu, d_xx(a mu) - d_x(b mu)>` at `(t, x, mu)`.
///
/// The discretization part of the budget is calibrated by rerunning with
/// `dt` and `dx` doubled on the same Brownian paths.
pub fn master_pde_residual(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    t: f64,
    x: f64,
    mu: &GridFunction,
    cfg: &ValueSettings,
) -> Result<ResidualReport> {
    let mesh = TimeMesh::new(t, cfg.horizon, cfg.fp.n_steps)?;
    let noise = NoiseBank::for_mesh(cfg.seed, cfg.n_paths, &mesh)?;
    master_pde_residual_with_noise(model, phi, t, x, mu, cfg, &noise)
}

/// As [`master_pde_residual`] with the Brownian paths given explicitly, so
/// that runs at different resolutions can share them.
pub fn master_pde_residual_with_noise(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    t: f64,
    x: f64,
    mu: &GridFunction,
    cfg: &ValueSettings,
    noise: &NoiseBank,
) -> Result<ResidualReport> {
    if !model.state_invariant() {
        return Err(Error::UnsupportedModel(
            "the master-equation residual needs dV/dmu as a function, which requires the kernel \
             of a state-invariant model; pairings alone do not determine the mu-term"
                .into(),
        ));
    }
    let n = cfg.fp.n_steps;
    let grid = *mu.grid();
    if !n.is_multiple_of(2) || !(grid.len() - 1).is_multiple_of(2) {
        return Err(invalid("residual calibration needs an even number of steps and of cells"));
    }
    let mesh = TimeMesh::new(t, cfg.horizon, n)?;
    noise.check_mesh(&mesh)?;
    let fine = residual_level(model, phi, x, mu, &mesh, &cfg.fp, noise, cfg.snapshot_every)?;

    let coarse = residual_level(
        &model.subsampled(2)?,
        &phi.subsampled(2)?,
        x,
        &mu.subsampled(2)?,
        &TimeMesh::new(t, cfg.horizon, n / 2)?,
        &FpConfig { n_steps: n / 2, ..cfg.fp },
        &noise.coarsened(2)?,
        (cfg.snapshot_every / 2).max(1),
    )?;
    let (dt, dx) = (mesh.dt(), grid.dx());
    let scale = dt + dx * dx;
    let c_est = RICHARDSON_SAFETY * (coarse.residual - fine.residual).abs() / scale;
    let discretization = c_est * scale;
    Ok(ResidualReport {
        residual: fine.residual,
        std_err: fine.std_err,
        components: fine.components,
        coarse_residual: coarse.residual,
        c_est,
        discretization,
        error_budget: 3.0 * fine.std_err + discretization,
        dt,
        dx,
        n_paths: noise.n_paths(),
        escaped: fine.escaped,
        seed: noise.seed(),
    })
}

/// `|V(T, x, mu) - Phi(x, mu)|`; at the horizon no evolution takes place.
pub fn terminal_condition_check(phi: &TerminalFunctional, x: f64, mu: &GridFunction) -> f64 {
    let at_horizon = phi.value(x, mu);
    (at_horizon - phi.value(x, mu)).abs()
}

#[derive(Debug, Clone, Serialize)]
pub struct OneStepReport {
    pub gap: f64,
    pub std_err: f64,
    pub envelope: f64,
    pub dt: f64,
}

impl OneStepReport {
    pub fn pass(&self) -> bool {
        self.gap <= self.envelope
    }
}

/// `|V(T - dt, x, mu) - Phi(x, mu)|` against a one-step Taylor envelope.
pub fn one_step_terminal_check(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    x: f64,
    mu: &GridFunction,
    cfg: &ValueSettings,
) -> Result<OneStepReport> {
    let dt = cfg.horizon / cfg.fp.n_steps as f64;
    let mesh = TimeMesh::new(cfg.horizon - dt, cfg.horizon, 1)?;
    let m_path = solve_on_mesh(model, mu, &mesh, &FpConfig { n_steps: 1, ..cfg.fp })?;
    let noise = NoiseBank::for_mesh(cfg.seed, cfg.n_paths, &mesh)?;
    let samples: Vec<f64> =
        terminal_samples(model, phi, &m_path, x, &noise)?.into_iter().flatten().collect();
    let (v, se) = mean_and_se(&samples);
    let st = model.field_state(mu.values());
    let nodes = mu.grid().nodes();
    let b_max = nodes.iter().map(|&y| model.b(y, &st).abs()).fold(0.0, f64::max);
    let s_max = nodes.iter().map(|&y| model.sigma(y, &st).abs()).fold(0.0, f64::max);
    let grid = mu.grid();
    let g_max = phi.g().sup_bounds(grid.x_min(), grid.x_max())[0];
    let f = phi.functional();
    let level_change = (f.value(&m_path.last()) - f.value(mu)).abs();
    let mean_abs_normal = (2.0 / std::f64::consts::PI).sqrt();
    let envelope = phi.bound() * (b_max * dt + s_max * dt.sqrt() * mean_abs_normal)
        + g_max * level_change
        + 3.0 * se;
    Ok(OneStepReport { gap: (v - phi.value(x, mu)).abs(), std_err: se, envelope, dt })
}

/// Sizes of the nested simulation behind [`martingale_check`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NestedSettings {
    pub outer_paths: usize,
    /// Inner paths per outer state; `None` means `ceil(sqrt(outer_paths))`.
    pub inner_paths: Option<usize>,
    pub n_steps: usize,
    /// Largest allowed total of inner path-steps.
    pub budget: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleRow {
    pub s: f64,
    /// Mean over outer paths of the inner estimate of `V(s, X_s, m(s))`.
    pub m_s: f64,
    pub m_se: f64,
    /// `m_s - V(t, x, mu)`.
    pub drift: f64,
    pub combined_se: f64,
    /// Standard error of the inner estimate minus `Phi(X_T)` on the same
    /// outer path, for reference.
    pub paired_se: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleReport {
    pub v: Estimate,
    pub rows: Vec<MartingaleRow>,
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub escaped: usize,
}

impl MartingaleReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_drift(&self) -> f64 {
        self.rows.iter().map(|r| r.drift.abs()).fold(0.0, f64::max)
    }
}

/// Nested Monte Carlo check that `s -> V(s, X_s, m(s))` has constant mean.
///
/// Inner values come from fresh noise seeded by `(seed, checkpoint, path)`
/// and restart the density path at the checkpoint; at `s = t` the value
/// itself is used, at `s = T` the terminal functional. `V(t, x, mu)` is
/// estimated from a separate ensemble of `cfg.n_paths` paths on the same
/// mesh, so each drift compares two independent estimates.
#[allow(clippy::too_many_arguments)]
pub fn martingale_check(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    t: f64,
    x: f64,
    mu: &GridFunction,
    checkpoints: &[f64],
    cfg: &ValueSettings,
    nested: &NestedSettings,
) -> Result<MartingaleReport> {
    let n = nested.n_steps;
    let mesh = TimeMesh::new(t, cfg.horizon, n)?;
    let ks = checkpoints
        .iter()
        .map(|&s| {
            mesh.index_of(s)
                .ok_or_else(|| Error::Config(format!("checkpoint {s} is not a node of the nested mesh")))
        })
        .collect::<Result<Vec<_>>>()?;
    let outer = nested.outer_paths;
    let inner = nested.inner_paths.unwrap_or((outer as f64).sqrt().ceil() as usize).max(1);
    let cost: f64 = ks.iter().filter(|&&k| k > 0 && k < n).map(|&k| (outer * inner * (n - k)) as f64).sum();
    if cost > nested.budget {
        return Err(Error::Config(format!(
            "nested simulation needs {cost:.3e} inner path-steps, budget is {:.3e}",
            nested.budget
        )));
    }
    let m_path = solve_on_mesh(model, mu, &mesh, &FpConfig { n_steps: n, ..cfg.fp })?;
    let ctx = PathContext::new(model, phi, &m_path);
    let noise = NoiseBank::for_mesh(cfg.seed, outer, &mesh)?;
    let dt = mesh.dt();

    let rows: Vec<Option<(f64, Vec<f64>)>> = (0..outer)
        .into_par_iter()
        .map(|p| {
            let db = noise.increments(p);
            let mut xs = vec![0.0; n + 1];
            if !euler_path(model, &ctx.states, &ctx.grid, x, &db, dt, &mut xs) {
                return Ok(None);
            }
            let phi_t = phi.phi(xs[n], &ctx.pst);
            let mut vals = Vec::with_capacity(ks.len());
            for &k in &ks {
                let v = if k == 0 {
                    f64::NAN
                } else if k == n {
                    phi_t
                } else {
                    let bank = NoiseBank::new(derive_seed(cfg.seed, k as u64, p as u64), inner, n - k, dt)?;
                    let stats = run_paths(
                        model,
                        phi,
                        &ctx.states[k..],
                        &ctx,
                        xs[k],
                        &bank,
                        &PathwiseRequest::default(),
                    );
                    let active = stats.active();
                    if active.is_empty() {
                        return Ok(None);
                    }
                    active.iter().map(|s| s.phi).sum::<f64>() / active.len() as f64
                };
                vals.push(v);
            }
            Ok(Some((phi_t, vals)))
        })
        .collect::<Result<Vec<_>>>()?;
    let escaped = rows.iter().filter(|r| r.is_none()).count();
    check_escapes(escaped, outer)?;
    let active: Vec<&(f64, Vec<f64>)> = rows.iter().flatten().collect();
    let reference_bank = NoiseBank::new(derive_seed(cfg.seed, u64::MAX, u64::MAX), cfg.n_paths, n, dt)?;
    let reference =
        run_paths(model, phi, &ctx.states, &ctx, x, &reference_bank, &PathwiseRequest::default());
    check_escapes(reference.n_escaped(), cfg.n_paths)?;
    let v = reference.estimate(|s| s.phi);

    let rows = ks
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let s = mesh.time(k);
            if k == 0 {
                return MartingaleRow {
                    s,
                    m_s: v.mean,
                    m_se: v.se,
                    drift: 0.0,
                    combined_se: 0.0,
                    paired_se: 0.0,
                    pass: true,
                };
            }
            let vals: Vec<f64> = active.iter().map(|r| r.1[c]).collect();
            let diffs: Vec<f64> = active.iter().map(|r| r.1[c] - r.0).collect();
            let m = Estimate::from_samples(&vals);
            let (_, paired_se) = mean_and_se(&diffs);
            let drift = m.mean - v.mean;
            let combined_se = (m.se * m.se + v.se * v.se).sqrt();
            MartingaleRow {
                s,
                m_s: m.mean,
                m_se: m.se,
                drift,
                combined_se,
                paired_se,
                pass: drift.abs() <= 3.0 * combined_se,
            }
        })
        .collect();
    Ok(MartingaleReport { v, rows, outer_paths: outer, inner_paths: inner, escaped })
}

#[derive(Debug, Clone, Serialize)]
pub struct ItoReport {
    pub mean: f64,
    pub std_err: f64,
    /// Mean residual with `dt` doubled on the same Brownian paths.
    pub coarse_mean: f64,
    pub c_est: f64,
    /// `c_est * dt`.
    pub bias_envelope: f64,
    pub dt: f64,
    pub n_paths: usize,
}

impl ItoReport {
    pub fn pass(&self) -> bool {
        self.mean.abs() <= 3.0 * self.std_err + self.bias_envelope
    }
}

fn ito_samples(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    weight: Profile,
    x: f64,
    m_path: &DensityPath,
    noise: &NoiseBank,
) -> Result<Vec<f64>> {
    noise.check_mesh(m_path.mesh())?;
    let ctx = PathContext::new(model, phi, m_path);
    let mesh = m_path.mesh();
    let n = mesh.n_steps();
    let dt = mesh.dt();
    let h = phi.functional().h();
    let slices: Vec<(crate::value::PhiState, f64)> = (0..=n)
        .into_par_iter()
        .map(|j| {
            let st = phi.state(m_path.slice_values(j));
            let pair = if phi.functional().is_constant() {
                0.0
            } else {
                l2_inner(h, &density_time_derivative(model, &m_path.slice(j)))?
            };
            Ok((st, pair))
        })
        .collect::<Result<Vec<_>>>()?;
    let times: Vec<f64> = (0..=n).map(|j| mesh.time(j)).collect();
    let rows: Vec<Option<f64>> = (0..noise.n_paths())
        .into_par_iter()
        .map(|p| {
            let db = noise.increments(p);
            let mut xs = vec![0.0; n + 1];
            if !euler_path(model, &ctx.states, &ctx.grid, x, &db, dt, &mut xs) {
                return None;
            }
            let f = |j: usize| weight.value(times[j]) * phi.phi(xs[j], &slices[j].0);
            let (mut drift, mut noise_int) = (0.0, 0.0);
            for j in 0..n {
                let (ps, pair) = &slices[j];
                let (xj, st) = (xs[j], &ctx.states[j]);
                let w = weight.value(times[j]);
                let fx = phi.phi_x(xj, ps);
                drift += (weight.d1(times[j]) * phi.phi(xj, ps)
                    + w * (model.b(xj, st) * fx
                        + model.a(xj, st) * phi.phi_xx(xj, ps)
                        + phi.dm_factor(xj, ps) * pair))
                    * dt;
                noise_int += w * fx * model.sigma(xj, st) * db[j];
            }
            Some(f(n) - f(0) - drift - noise_int)
        })
        .collect();
    check_escapes(rows.iter().filter(|r| r.is_none()).count(), rows.len())?;
    Ok(rows.into_iter().flatten().collect())
}

/// Mean of `f(T, X_T, m_T) - f(t, x, mu) - (dr-integral) - (stochastic integral)`
/// for `f(s, x, m) = w(s) Phi(x, m)`, with both integrals discretized on the mesh.
pub fn ito_residual(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    weight: Profile,
    t: f64,
    x: f64,
    mu: &GridFunction,
    cfg: &ValueSettings,
) -> Result<ItoReport> {
    let n = cfg.fp.n_steps;
    if !n.is_multiple_of(2) {
        return Err(invalid("Itô residual calibration needs an even number of steps"));
    }
    let mesh = TimeMesh::new(t, cfg.horizon, n)?;
    let noise = NoiseBank::for_mesh(cfg.seed, cfg.n_paths, &mesh)?;
    let m_path = solve_on_mesh(model, mu, &mesh, &cfg.fp)?;
    let (mean, std_err) = mean_and_se(&ito_samples(model, phi, weight, x, &m_path, &noise)?);

    let coarse_mesh = TimeMesh::new(t, cfg.horizon, n / 2)?;
    let coarse_path = solve_on_mesh(model, mu, &coarse_mesh, &FpConfig { n_steps: n / 2, ..cfg.fp })?;
    let (coarse_mean, _) =
        mean_and_se(&ito_samples(model, phi, weight, x, &coarse_path, &noise.coarsened(2)?)?);
    let dt = mesh.dt();
    let c_est = RICHARDSON_SAFETY * (coarse_mean - mean).abs() / dt;
    Ok(ItoReport {
        mean,
        std_err,
        coarse_mean,
        c_est,
        bias_envelope: c_est * dt,
        dt,
        n_paths: cfg.n_paths,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceTarget {
    DensityDerivative,
    StateDerivative,
    ValueMuPairing,
}

impl ConvergenceTarget {
    pub const ALL: [ConvergenceTarget; 3] =
        [Self::DensityDerivative, Self::StateDerivative, Self::ValueMuPairing];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::DensityDerivative => "density_derivative",
            Self::StateDerivative => "state_derivative",
            Self::ValueMuPairing => "value_mu_pairing",
        }
    }
}

impl fmt::Display for ConvergenceTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConvergenceTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown convergence target '{s}'")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub target: ConvergenceTarget,
    pub h_values: Vec<f64>,
    pub errors: Vec<f64>,
    pub fit: SlopeFit,
    pub floor: f64,
}

impl ConvergenceReport {
    pub fn pass(&self) -> bool {
        self.fit.acceptable(0.7, 1.3)
    }
}

/// Error of the difference quotient in the first scenario direction, per `h`.
///
/// * `density_derivative`: `sup_s ||(m^{mu + h mu~} - m^mu)/h - m~||_{L2}`.
/// * `state_derivative`: RMS over paths of `sup_s |(X^{mu + h mu~} - X^mu)/h - Y|`.
/// * `value_mu_pairing`: `|mean (Phi^h - Phi)/h - <dV/dmu, mu~>|` on shared paths.
pub fn convergence_study(
    target: ConvergenceTarget,
    scenario: &Scenario,
    h_values: &[f64],
) -> Result<ConvergenceReport> {
    if h_values.len() < 4 || h_values.windows(2).any(|w| !(w[1] < w[0])) || h_values.iter().any(|h| !(*h > 0.0)) {
        return Err(invalid("need at least four positive, strictly decreasing step sizes"));
    }
    let dir = scenario
        .directions
        .first()
        .ok_or_else(|| Error::Config("scenario has no perturbation directions".into()))?;
    let model = &scenario.model;
    let cfg = scenario.fp_config();
    let (t, horizon) = (scenario.t(), scenario.horizon());
    let m_path = solve_fp(model, &scenario.mu, t, horizon, &cfg)?;
    let mt = solve_directional(model, &m_path, dir, &cfg)?;
    let perturbed = |h: f64| -> Result<DensityPath> {
        solve_fp(model, &scenario.mu.axpy(h, dir)?, t, horizon, &cfg)
    };

    let (errors, scale) = match target {
        ConvergenceTarget::DensityDerivative => {
            let scale = (0..mt.n_slices())
                .map(|j| crate::grid::l2_norm(&mt.slice(j)))
                .fold(0.0, f64::max);
            let errors = h_values
                .par_iter()
                .map(|&h| perturbed(h)?.quotient(&m_path, h)?.sup_l2_distance(&mt))
                .collect::<Result<Vec<_>>>()?;
            (errors, scale)
        }
        ConvergenceTarget::StateDerivative => {
            let noise = NoiseBank::for_mesh(scenario.seed(), scenario.spec.mc.n_paths, m_path.mesh())?;
            let x0 = scenario.x0();
            let xe = simulate_x(model, &m_path, t, x0, &noise)?;
            let ye = simulate_y(model, &m_path, &mt, &xe)?;
            let live = |p: usize| !xe.escaped(p);
            let scale = {
                let sq: Vec<f64> = (0..xe.n_paths())
                    .filter(|&p| live(p))
                    .map(|p| ye.path(p).iter().fold(0.0f64, |a, v| a.max(v.abs())).powi(2))
                    .collect();
                (sq.iter().sum::<f64>() / sq.len() as f64).sqrt()
            };
            let errors = h_values
                .iter()
                .map(|&h| {
                    let xh = simulate_x(model, &perturbed(h)?, t, x0, &noise)?;
                    let sq: Vec<f64> = (0..xe.n_paths())
                        .into_par_iter()
                        .filter(|&p| live(p) && !xh.escaped(p))
                        .map(|p| {
                            let (a, b, y) = (xe.path(p), xh.path(p), ye.path(p));
                            (0..a.len())
                                .map(|j| ((b[j] - a[j]) / h - y[j]).abs())
                                .fold(0.0f64, f64::max)
                                .powi(2)
                        })
                        .collect();
                    Ok((sq.iter().sum::<f64>() / sq.len() as f64).sqrt())
                })
                .collect::<Result<Vec<_>>>()?;
            (errors, scale)
        }
        ConvergenceTarget::ValueMuPairing => {
            let noise = NoiseBank::for_mesh(scenario.seed(), scenario.spec.mc.n_paths, m_path.mesh())?;
            let (x0, phi) = (scenario.x0(), &scenario.phi);
            let req = PathwiseRequest { y_dirs: vec![y_direction(model, phi, &mt)], ..Default::default() };
            let base = crate::value::pathwise(model, phi, &m_path, x0, &noise, &req)?;
            let pairing = base.estimate(|s| s.y[0]).mean;
            let errors = h_values
                .iter()
                .map(|&h| {
                    let bumped = terminal_samples(model, phi, &perturbed(h)?, x0, &noise)?;
                    let d: Vec<f64> = base
                        .samples
                        .iter()
                        .zip(&bumped)
                        .filter_map(|(s, b)| Some((b.as_ref()? - s.as_ref()?.phi) / h - s.as_ref()?.y[0]))
                        .collect();
                    Ok((d.iter().sum::<f64>() / d.len() as f64).abs())
                })
                .collect::<Result<Vec<_>>>()?;
            (errors, pairing.abs())
        }
    };
    let floor = FLOOR_REL * scale.max(1.0);
    let fit = fit_loglog_slope(h_values, &errors, floor);
    Ok(ConvergenceReport { target, h_values: h_values.to_vec(), errors, fit, floor })
}

/// Step sizes of the difference quotients in [`derivative_agreement`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct QuotientSteps {
    /// Central-difference step in `x`.
    pub dx: f64,
    /// Forward step along each density direction.
    pub dmu: f64,
    /// Forward step in `t`, in mesh steps.
    pub dt_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgreementRow {
    pub label: String,
    pub derivative: Estimate,
    pub quotient: Estimate,
    /// Richardson estimate of the quotient's bias, from the quotient at twice the step.
    pub bias: f64,
    /// `sqrt(se_derivative^2 + se_quotient^2)`.
    pub combined_se: f64,
    /// Standard error of the pathwise differences, for reference.
    pub paired_se: f64,
}

impl AgreementRow {
    pub fn gap(&self) -> f64 {
        (self.derivative.mean - self.quotient.mean).abs()
    }

    pub fn pass(&self) -> bool {
        self.gap() <= 3.0 * self.combined_se + self.bias
    }
}

/// Compares `V_x`, `V_xx`, `<dV/dmu, mu~>` for each direction and `dV/dt`
/// with their difference quotients on the same Brownian paths.
#[allow(clippy::too_many_arguments)]
pub fn derivative_agreement(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    t: f64,
    x: f64,
    mu: &GridFunction,
    cfg: &ValueSettings,
    directions: &[GridFunction],
    steps: &QuotientSteps,
) -> Result<Vec<AgreementRow>> {
    let n = cfg.fp.n_steps;
    if 2 * steps.dt_steps >= n || steps.dt_steps == 0 {
        return Err(invalid("time quotient needs 0 < 2 * dt_steps < n_steps"));
    }
    let mesh = TimeMesh::new(t, cfg.horizon, n)?;
    let noise = NoiseBank::for_mesh(cfg.seed, cfg.n_paths, &mesh)?;
    let prep = prepare(model, mu, &mesh, &cfg.fp, directions, true, cfg.snapshot_every)?;
    let (_, stats) = report_with_extra(model, phi, x, &prep, &noise, directions, None)?;
    let base: Vec<Option<f64>> = stats.samples.iter().map(|s| s.as_ref().map(|s| s.phi)).collect();
    let m_path = &prep.m_path;
    let at_x = |y: f64| terminal_samples(model, phi, m_path, y, &noise);

    // per-path derivative sample and quotient sample, on paths live everywhere
    let row = |label: String,
               deriv: &dyn Fn(usize) -> Option<f64>,
               quot: &dyn Fn(usize) -> Option<f64>,
               quot2: &dyn Fn(usize) -> Option<f64>,
               bias_factor: f64| {
        let mut d = Vec::new();
        let mut q = Vec::new();
        let mut q2 = Vec::new();
        for p in 0..noise.n_paths() {
            if let (Some(a), Some(b), Some(c)) = (deriv(p), quot(p), quot2(p)) {
                d.push(a);
                q.push(b);
                q2.push(c);
            }
        }
        let derivative = Estimate::from_samples(&d);
        let quotient = Estimate::from_samples(&q);
        let coarse = Estimate::from_samples(&q2);
        let diffs: Vec<f64> = d.iter().zip(&q).map(|(a, b)| a - b).collect();
        AgreementRow {
            label,
            derivative,
            quotient,
            bias: bias_factor * (coarse.mean - quotient.mean).abs(),
            combined_se: (derivative.se.powi(2) + quotient.se.powi(2)).sqrt(),
            paired_se: mean_and_se(&diffs).1,
        }
    };
    let sample = |p: usize| stats.samples[p].as_ref();
    let mut rows = Vec::new();

    let h = steps.dx;
    let shifted: Vec<Vec<Option<f64>>> =
        [x + h, x - h, x + 2.0 * h, x - 2.0 * h].iter().map(|&y| at_x(y)).collect::<Result<_>>()?;
    let central = |k: usize, s: f64| -> Vec<Option<f64>> {
        (0..base.len()).map(|p| Some((shifted[k][p]? - shifted[k + 1][p]?) / (2.0 * s))).collect()
    };
    let second = |k: usize, s: f64| -> Vec<Option<f64>> {
        (0..base.len())
            .map(|p| Some((shifted[k][p]? - 2.0 * base[p]? + shifted[k + 1][p]?) / (s * s)))
            .collect()
    };
    let (c1, c2) = (central(0, h), central(2, 2.0 * h));
    let (s1, s2) = (second(0, h), second(2, 2.0 * h));
    // central differences have O(h^2) bias: Q(2h) - Q(h) is three times it
    rows.push(row("dv_dx".into(), &|p| Some(sample(p)?.vx), &|p| c1[p], &|p| c2[p], RICHARDSON_SAFETY / 3.0));
    rows.push(row("d2v_dx2".into(), &|p| Some(sample(p)?.vxx), &|p| s1[p], &|p| s2[p], RICHARDSON_SAFETY / 3.0));

    for (d, dir) in directions.iter().enumerate() {
        let bumped = |s: f64| -> Result<Vec<Option<f64>>> {
            let path = solve_on_mesh(model, &mu.axpy(s, dir)?, &mesh, &cfg.fp)?;
            terminal_samples(model, phi, &path, x, &noise)
        };
        let (b1, b2) = (bumped(steps.dmu)?, bumped(2.0 * steps.dmu)?);
        let fwd = |b: &Vec<Option<f64>>, s: f64, p: usize| Some((b[p]? - base[p]?) / s);
        // forward differences have O(h) bias: Q(2h) - Q(h) equals it
        rows.push(row(
            format!("dv_dmu[{d}]"),
            &|p| Some(sample(p)?.kernel.get(d).copied().unwrap_or(sample(p)?.y[d])),
            &|p| fwd(&b1, steps.dmu, p),
            &|p| fwd(&b2, 2.0 * steps.dmu, p),
            RICHARDSON_SAFETY,
        ));
    }

    let later = |k: usize| -> Result<Vec<Option<f64>>> {
        let tail_mesh = mesh.restart_at(k)?;
        let path = solve_on_mesh(model, mu, &tail_mesh, &FpConfig { n_steps: n - k, ..cfg.fp })?;
        terminal_samples(model, phi, &path, x, &noise.prefix(n - k)?)
    };
    let k = steps.dt_steps;
    let (l1, l2) = (later(k)?, later(2 * k)?);
    let delta = k as f64 * mesh.dt();
    let fwd_t = |l: &Vec<Option<f64>>, s: f64, p: usize| Some((l[p]? - base[p]?) / s);
    // the time quotient is only guaranteed O(sqrt(dt)): Q(2h) - Q(h) = (sqrt 2 - 1) C sqrt(h)
    rows.push(row(
        "dv_dt".into(),
        &|p| Some(sample(p)?.vt),
        &|p| fwd_t(&l1, delta, p),
        &|p| fwd_t(&l2, 2.0 * delta, p),
        RICHARDSON_SAFETY / (2f64.sqrt() - 1.0),
    ));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::catalog;

    fn small(name: &str) -> Scenario {
        let mut s = catalog(name).unwrap();
        s.grid.n_points = 201;
        s.time.n_steps = 100;
        s.mc.n_paths = 2000;
        Scenario::build(s).unwrap()
    }

    #[test]
    fn residual_is_sum_of_components() {
        let s = small("state-invariant-ref");
        let r = master_pde_residual(&s.model, &s.phi, 0.0, s.x0(), &s.mu, &s.value_settings()).unwrap();
        let sum: f64 = r.components.iter().map(|c| c.1).sum();
        assert_eq!(sum, r.residual);
        assert!(r.error_budget >= 3.0 * r.std_err);
    }

    #[test]
    fn constant_phi_has_zero_residual() {
        let s = small("constant-phi");
        let r = master_pde_residual(&s.model, &s.phi, 0.0, s.x0(), &s.mu, &s.value_settings()).unwrap();
        assert!(r.components.iter().all(|c| c.1 == 0.0));
        assert_eq!(r.residual, 0.0);
        assert!(r.pass());
        let ito = ito_residual(&s.model, &s.phi, Profile::Const(1.0), 0.0, s.x0(), &s.mu, &s.value_settings()).unwrap();
        assert_eq!((ito.mean, ito.std_err), (0.0, 0.0));
    }

    #[test]
    fn residual_refuses_state_dependent_models() {
        let s = small("state-dep-drift");
        let r = master_pde_residual(&s.model, &s.phi, 0.0, s.x0(), &s.mu, &s.value_settings());
        assert!(matches!(r, Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn terminal_conditions() {
        let s = small("state-invariant-ref");
        assert_eq!(terminal_condition_check(&s.phi, 0.4, &s.mu), 0.0);
        let r = one_step_terminal_check(&s.model, &s.phi, 0.4, &s.mu, &s.value_settings()).unwrap();
        assert!(r.pass(), "{r:?}");
    }

    #[test]
    fn identity_functional_ito_residual_telescopes() {
        let s = small("driftless-identity");
        let mut cfg = s.value_settings();
        cfg.n_paths = 200;
        let r = ito_residual(&s.model, &s.phi, Profile::Const(1.0), 0.0, 0.3, &s.mu, &cfg).unwrap();
        assert!(r.mean.abs() < 1e-13 && r.std_err < 1e-13, "{r:?}");
    }

    #[test]
    fn martingale_degenerate_checkpoints_and_budget() {
        let s = small("state-invariant-ref");
        let nested = NestedSettings { outer_paths: 400, inner_paths: None, n_steps: 50, budget: 1e9 };
        let r = martingale_check(&s.model, &s.phi, 0.0, s.x0(), &s.mu, &[0.0, 0.5, 1.0], &s.value_settings(), &nested)
            .unwrap();
        assert_eq!(r.inner_paths, 20);
        assert_eq!(r.rows[0].m_s, r.v.mean);
        assert_eq!(r.rows[0].drift, 0.0);
        // V comes from its own ensemble, so the horizon row is a genuine comparison
        assert!(r.rows[2].drift != 0.0 && r.rows.iter().all(|row| row.pass), "{:?}", r.rows);
        let tight = NestedSettings { budget: 10.0, ..nested };
        let e = martingale_check(&s.model, &s.phi, 0.0, s.x0(), &s.mu, &[0.5], &s.value_settings(), &tight);
        assert!(matches!(e, Err(Error::Config(_))));
        let off = martingale_check(&s.model, &s.phi, 0.0, s.x0(), &s.mu, &[0.503], &s.value_settings(), &nested);
        assert!(matches!(off, Err(Error::Config(_))));
    }

    #[test]
    fn convergence_input_validation() {
        let s = small("state-invariant-ref");
        let t = ConvergenceTarget::DensityDerivative;
        assert!(convergence_study(t, &s, &[0.1, 0.05, 0.025]).is_err());
        assert!(convergence_study(t, &s, &[0.1, 0.2, 0.05, 0.025]).is_err());
        assert_eq!("state_derivative".parse::<ConvergenceTarget>().unwrap(), ConvergenceTarget::StateDerivative);
        assert!("rate".parse::<ConvergenceTarget>().is_err());
    }
}
