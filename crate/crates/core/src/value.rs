//! The value function `V(t, x, mu) = E[Phi(X_T, m(T))]` and its derivatives.
//!
//! All estimators run through one pathwise pass ([`pathwise`]) that
//! simulates `X`, its first and second variations, optional directional
//! processes `Y`, and a backward sweep producing the weights that turn the
//! kernel projections into `dV/dmu`. Paths are processed in fixed blocks
//! whose partial sums are reduced in block order, so results do not depend
//! on the number of threads.

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{CoefficientModel, FieldState, SmoothFunctional};
use crate::error::{invalid, Result};
use crate::fp::{density_time_derivative, solve_on_mesh, FpConfig};
use crate::functions::Profile;
use crate::grid::{l2_inner, weighted_dot, Grid1D, GridFunction};
use crate::linearized::{kernel_test_function, solve_directional, solve_kernel, KernelPath};
use crate::path::{DensityPath, TimeMesh};
use crate::sde::{check_escapes, euler_path, field_states, NoiseBank};
use crate::stats::mean_and_se;

const BLOCK: usize = 64;

/// `Phi(x, m) = g(x) F(m) + c`.
#[derive(Debug, Clone)]
pub struct TerminalFunctional {
    g: Profile,
    functional: SmoothFunctional,
    c: f64,
}

/// Values of the density functional of `Phi` on one slice.
#[derive(Debug, Clone, Copy)]
pub struct PhiState {
    pub level: f64,
    pub slope: f64,
}

impl TerminalFunctional {
    pub fn new(g: Profile, functional: SmoothFunctional, c: f64) -> Self {
        Self { g, functional, c }
    }

    /// `Phi = c`.
    pub fn constant(grid: Grid1D, c: f64) -> Self {
        Self::new(Profile::Const(0.0), SmoothFunctional::constant(grid, 0.0), c)
    }

    /// `Phi(x, m) = x`.
    pub fn identity(grid: Grid1D) -> Self {
        Self::new(Profile::Linear { c0: 0.0, c1: 1.0 }, SmoothFunctional::constant(grid, 1.0), 0.0)
    }

    /// The same functional with `h` restricted to a coarser grid.
    pub fn subsampled(&self, factor: usize) -> Result<Self> {
        Ok(Self { functional: self.functional.subsampled(factor)?, ..self.clone() })
    }

    pub fn g(&self) -> Profile {
        self.g
    }

    pub fn functional(&self) -> &SmoothFunctional {
        &self.functional
    }

    pub fn offset(&self) -> f64 {
        self.c
    }

    pub fn is_constant(&self) -> bool {
        self.g.is_constant() && self.functional.is_constant()
    }

    pub fn state(&self, m: &[f64]) -> PhiState {
        let arg = self.functional.argument(m);
        PhiState { level: self.functional.value_at(arg), slope: self.functional.factor_at(arg) }
    }

    pub fn phi(&self, x: f64, st: &PhiState) -> f64 {
        self.g.value(x) * st.level + self.c
    }

    pub fn phi_x(&self, x: f64, st: &PhiState) -> f64 {
        self.g.d1(x) * st.level
    }

    pub fn phi_xx(&self, x: f64, st: &PhiState) -> f64 {
        self.g.d2(x) * st.level
    }

    /// `dPhi/dm(x, m) = dm_factor(x) * h`.
    pub fn dm_factor(&self, x: f64, st: &PhiState) -> f64 {
        self.g.value(x) * st.slope
    }

    pub fn value(&self, x: f64, m: &GridFunction) -> f64 {
        self.phi(x, &self.state(m.values()))
    }

    pub fn dphi_dx(&self, x: f64, m: &GridFunction) -> f64 {
        self.phi_x(x, &self.state(m.values()))
    }

    pub fn d2phi_dx2(&self, x: f64, m: &GridFunction) -> f64 {
        self.phi_xx(x, &self.state(m.values()))
    }

    pub fn dphi_dm(&self, x: f64, m: &GridFunction) -> GridFunction {
        self.functional.h().scale(self.dm_factor(x, &self.state(m.values())))
    }

    /// Bound on `|Phi|`, `|Phi_x|`, `|Phi_xx|` and `||dPhi/dm||_{W^{1,2}}` over the grid.
    pub fn bound(&self) -> f64 {
        let grid = self.functional.h().grid();
        let gb = self.g.sup_bounds(grid.x_min(), grid.x_max());
        let level = self.functional.sup_value().unwrap_or(f64::INFINITY);
        let dm = gb[0] * self.functional.derivative_bound().unwrap_or(f64::INFINITY);
        [gb[0] * level + self.c.abs(), gb[1] * level, gb[2] * level, dm]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Monte-Carlo and discretization settings for value-function estimators.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ValueSettings {
    pub horizon: f64,
    pub fp: FpConfig,
    pub n_paths: usize,
    pub seed: u64,
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let (mean, se) = mean_and_se(samples);
        Self { mean, se }
    }

    pub fn exact(mean: f64) -> Self {
        Self { mean, se: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MuDerivativeMode {
    /// Full function of `y` through the kernel.
    Kernel,
    /// Only pairings with the requested directions (kernel unavailable).
    Pairing,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueReport {
    pub v: f64,
    pub std_err: f64,
    pub dv_dx: Estimate,
    pub d2v_dx2: Estimate,
    #[serde(skip)]
    pub dv_dmu: Option<GridFunction>,
    pub mu_mode: MuDerivativeMode,
    /// `<dV/dmu, mu~>` per requested direction, from the primary route.
    pub pairings: Vec<Estimate>,
    /// Same pairings through the directional process `Y`.
    pub pairings_directional: Vec<Estimate>,
    pub dv_dt: Estimate,
    pub n_paths: usize,
    pub escaped: usize,
    pub seed: u64,
    pub n_steps: usize,
    pub n_points: usize,
}

/// Density path, kernel and auxiliary flows shared by the estimators.
pub(crate) struct Prepared {
    pub m_path: DensityPath,
    pub kernel: Option<KernelPath>,
    pub directional: Vec<DensityPath>,
}

pub(crate) fn prepare(
    model: &CoefficientModel,
    mu: &GridFunction,
    mesh: &TimeMesh,
    fp: &FpConfig,
    directions: &[GridFunction],
    want_kernel: bool,
    snapshot_every: usize,
) -> Result<Prepared> {
    let fp = FpConfig { n_steps: mesh.n_steps(), ..*fp };
    let m_path = solve_on_mesh(model, mu, mesh, &fp)?;
    let kernel = if want_kernel && model.state_invariant() {
        Some(solve_kernel(model, &m_path, &fp, snapshot_every.max(1))?)
    } else {
        None
    };
    let directional = directions
        .iter()
        .map(|d| solve_directional(model, &m_path, d, &fp))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { m_path, kernel, directional })
}

/// Per-step pairings `(<a_j, mu~>, <b_j, mu~>)` plus a terminal pairing.
#[derive(Debug, Clone)]
pub(crate) struct DirectionData {
    pub steps: Vec<(f64, f64)>,
    pub terminal: f64,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct PathwiseRequest {
    pub derivatives: bool,
    /// Accumulate the weights of `E[Phi_x U_T(y)]`.
    pub kernel_weights: bool,
    /// Directions paired through the kernel projections.
    pub kernel_dirs: Vec<DirectionData>,
    /// Directions paired through `Y` driven by `m~`.
    pub y_dirs: Vec<DirectionData>,
    /// `<h_Phi, d_s m(T)>`, if the time derivative is wanted.
    pub dt_pair: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct PathSample {
    pub phi: f64,
    pub vx: f64,
    pub vxx: f64,
    pub vt: f64,
    pub kernel: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct PathStats {
    pub samples: Vec<Option<PathSample>>,
    /// Sums over active paths of `Phi_x R_{j+1} B_j dt` and `Phi_x R_{j+1} S_j dB_j`.
    pub drift_weights: Vec<f64>,
    pub vol_weights: Vec<f64>,
    /// Sum over active paths of `g(X_T) F'(m_T)`.
    pub dm_weight: f64,
}

impl PathStats {
    pub fn active(&self) -> Vec<&PathSample> {
        self.samples.iter().flatten().collect()
    }

    pub fn n_escaped(&self) -> usize {
        self.samples.iter().filter(|s| s.is_none()).count()
    }

    pub fn estimate(&self, f: impl Fn(&PathSample) -> f64) -> Estimate {
        let v: Vec<f64> = self.active().into_iter().map(f).collect();
        Estimate::from_samples(&v)
    }
}

/// Per-slice coefficient states and the terminal state of `Phi`.
pub(crate) struct PathContext {
    pub states: Vec<FieldState>,
    pub grid: Grid1D,
    pub dt: f64,
    pub pst: PhiState,
}

impl PathContext {
    pub fn new(model: &CoefficientModel, phi: &TerminalFunctional, m_path: &DensityPath) -> Self {
        let n = m_path.mesh().n_steps();
        Self {
            states: field_states(model, m_path),
            grid: *m_path.grid(),
            dt: m_path.mesh().dt(),
            pst: phi.state(m_path.slice_values(n)),
        }
    }
}

/// Simulates every path of `noise` from `x` along `m_path` and evaluates
/// the requested pathwise functionals.
pub(crate) fn pathwise(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    m_path: &DensityPath,
    x: f64,
    noise: &NoiseBank,
    req: &PathwiseRequest,
) -> Result<PathStats> {
    noise.check_mesh(m_path.mesh())?;
    if !m_path.grid().contains(x) {
        return Err(invalid(format!("starting point {x} outside the grid")));
    }
    let ctx = PathContext::new(model, phi, m_path);
    let stats = run_paths(model, phi, &ctx.states, &ctx, x, noise, req);
    check_escapes(stats.n_escaped(), noise.n_paths())?;
    Ok(stats)
}

/// Samples of one block of paths, its drift and volatility weights, and the
/// summed `dm` weight.
type BlockResult = (Vec<Option<PathSample>>, Vec<f64>, Vec<f64>, f64);

/// Path loop over `states` (one per step plus the terminal slice), which
/// may be a tail of `ctx.states`. Escapes are reported, not checked.
pub(crate) fn run_paths(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    states: &[FieldState],
    ctx: &PathContext,
    x: f64,
    noise: &NoiseBank,
    req: &PathwiseRequest,
) -> PathStats {
    let grid = ctx.grid;
    let n = states.len() - 1;
    let dt = ctx.dt;
    let pst = ctx.pst;
    let n_paths = noise.n_paths();
    let n_blocks = n_paths.div_ceil(BLOCK);

    let blocks: Vec<BlockResult> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut xs = vec![0.0; n + 1];
            let mut db = vec![0.0; n];
            let mut aw = if req.kernel_weights { vec![0.0; n] } else { Vec::new() };
            let mut bw = if req.kernel_weights { vec![0.0; n] } else { Vec::new() };
            let mut gw = 0.0;
            let mut out = Vec::with_capacity(BLOCK);
            let mut lin = vec![0.0; n];
            for p in b * BLOCK..((b + 1) * BLOCK).min(n_paths) {
                noise.fill(p, &mut db);
                if !euler_path(model, states, &grid, x, &db, dt, &mut xs) {
                    out.push(None);
                    continue;
                }
                let xt = xs[n];
                let fx = phi.phi_x(xt, &pst);
                let fxx = phi.phi_xx(xt, &pst);
                let dmf = phi.dm_factor(xt, &pst);
                let mut s = PathSample { phi: phi.phi(xt, &pst), ..Default::default() };
                let need_lin = req.derivatives || req.kernel_weights || !req.y_dirs.is_empty();
                if need_lin {
                    for j in 0..n {
                        lin[j] = 1.0
                            + model.b_x(xs[j], &states[j]) * dt
                            + model.sigma_x(xs[j], &states[j]) * db[j];
                    }
                }
                if req.derivatives {
                    let (mut d, mut d2) = (1.0, 0.0);
                    for j in 0..n {
                        let st = &states[j];
                        let xj = xs[j];
                        d2 = d2
                            + (model.b_x(xj, st) * d2 + model.b_xx(xj, st) * d * d) * dt
                            + (model.sigma_x(xj, st) * d2 + model.sigma_xx(xj, st) * d * d) * db[j];
                        d *= lin[j];
                    }
                    s.vx = fx * d;
                    s.vxx = fxx * d * d + fx * d2;
                }
                if let Some(pair) = req.dt_pair {
                    let st = &states[n];
                    s.vt = -(model.b(xt, st) * fx + model.a(xt, st) * fxx + dmf * pair);
                }
                if req.kernel_weights || !req.kernel_dirs.is_empty() {
                    let mut r = 1.0;
                    let mut acc = vec![0.0; req.kernel_dirs.len()];
                    for j in (0..n).rev() {
                        let st = &states[j];
                        let a = fx * r * model.drift_sensitivity(xs[j], st) * dt;
                        let c = fx * r * model.vol_sensitivity(xs[j], st) * db[j];
                        if req.kernel_weights {
                            aw[j] += a;
                            bw[j] += c;
                        }
                        for (k, dir) in req.kernel_dirs.iter().enumerate() {
                            acc[k] += a * dir.steps[j].0 + c * dir.steps[j].1;
                        }
                        r *= lin[j];
                    }
                    for (k, dir) in req.kernel_dirs.iter().enumerate() {
                        acc[k] += dmf * dir.terminal;
                    }
                    s.kernel = acc;
                    gw += dmf;
                }
                if !req.y_dirs.is_empty() {
                    s.y = req
                        .y_dirs
                        .iter()
                        .map(|dir| {
                            let mut y = 0.0;
                            for j in 0..n {
                                let st = &states[j];
                                let (pb, ps) = dir.steps[j];
                                y = lin[j] * y
                                    + model.drift_sensitivity(xs[j], st) * pb * dt
                                    + model.vol_sensitivity(xs[j], st) * ps * db[j];
                            }
                            fx * y + dmf * dir.terminal
                        })
                        .collect();
                }
                out.push(Some(s));
            }
            (out, aw, bw, gw)
        })
        .collect();

    let mut samples = Vec::with_capacity(n_paths);
    let mut drift_weights = vec![0.0; if req.kernel_weights { n } else { 0 }];
    let mut vol_weights = drift_weights.clone();
    let mut dm_weight = 0.0;
    for (out, aw, bw, gw) in blocks {
        samples.extend(out);
        for (t, v) in drift_weights.iter_mut().zip(&aw) {
            *t += v;
        }
        for (t, v) in vol_weights.iter_mut().zip(&bw) {
            *t += v;
        }
        dm_weight += gw;
    }
    PathStats { samples, drift_weights, vol_weights, dm_weight }
}

/// Kernel-side pairing data of a direction.
pub(crate) fn kernel_direction(
    kernel: &KernelPath,
    phi: &TerminalFunctional,
    dir: &GridFunction,
) -> Result<DirectionData> {
    let n = kernel.mesh().n_steps();
    let dx = kernel.grid().dx();
    let steps = (0..n)
        .map(|j| {
            (
                weighted_dot(kernel.drift_projection(j), dir.values(), dx),
                weighted_dot(kernel.vol_projection(j), dir.values(), dx),
            )
        })
        .collect();
    let tf = kernel_test_function(kernel, phi.functional().h(), kernel.mesh().t1())?;
    Ok(DirectionData { steps, terminal: l2_inner(&tf, dir)? })
}

/// Directional-flow pairing data of a direction.
pub(crate) fn y_direction(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    mtilde: &DensityPath,
) -> DirectionData {
    let dx = mtilde.grid().dx();
    let hb = model.drift_functional().h().values();
    let hs = model.vol_functional().h().values();
    let n = mtilde.mesh().n_steps();
    let steps = (0..n)
        .map(|j| {
            let mt = mtilde.slice_values(j);
            (weighted_dot(hb, mt, dx), weighted_dot(hs, mt, dx))
        })
        .collect();
    let terminal = weighted_dot(phi.functional().h().values(), mtilde.slice_values(n), dx);
    DirectionData { steps, terminal }
}

fn mesh_for(t: f64, cfg: &ValueSettings) -> Result<TimeMesh> {
    TimeMesh::new(t, cfg.horizon, cfg.fp.n_steps)
}

/// Everything at once: value, `x`-derivatives, `mu`-derivative (function
/// or pairings) and time derivative, all from the same paths.
pub fn value_report(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    t: f64,
    x: f64,
    mu: &GridFunction,
    cfg: &ValueSettings,
    directions: &[GridFunction],
) -> Result<ValueReport> {
    let mesh = mesh_for(t, cfg)?;
    let prep = prepare(model, mu, &mesh, &cfg.fp, directions, true, cfg.snapshot_every)?;
    let noise = NoiseBank::for_mesh(cfg.seed, cfg.n_paths, &mesh)?;
    report_from_prepared(model, phi, x, &prep, &noise, directions)
}

pub(crate) fn report_from_prepared(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    x: f64,
    prep: &Prepared,
    noise: &NoiseBank,
    directions: &[GridFunction],
) -> Result<ValueReport> {
    report_with_extra(model, phi, x, prep, noise, directions, None).map(|(r, _)| r)
}

/// As [`report_from_prepared`], also pairing `extra` through the kernel
/// and returning the raw path statistics.
pub(crate) fn report_with_extra(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    x: f64,
    prep: &Prepared,
    noise: &NoiseBank,
    directions: &[GridFunction],
    extra: Option<&GridFunction>,
) -> Result<(ValueReport, PathStats)> {
    let m_path = &prep.m_path;
    let n = m_path.mesh().n_steps();
    let ds_m = density_time_derivative(model, &m_path.last());
    let dt_pair = l2_inner(phi.functional().h(), &ds_m)?;
    let mut req = PathwiseRequest {
        derivatives: true,
        dt_pair: Some(dt_pair),
        y_dirs: prep.directional.iter().map(|mt| y_direction(model, phi, mt)).collect(),
        ..Default::default()
    };
    if let Some(k) = &prep.kernel {
        req.kernel_weights = true;
        req.kernel_dirs = directions
            .iter()
            .chain(extra)
            .map(|d| kernel_direction(k, phi, d))
            .collect::<Result<Vec<_>>>()?;
    }
    let stats = pathwise(model, phi, m_path, x, noise, &req)?;
    let active = stats.active();
    let n_active = active.len() as f64;
    let value = stats.estimate(|s| s.phi);

    let (dv_dmu, mu_mode, pairings) = match &prep.kernel {
        Some(k) => {
            let grid = *m_path.grid();
            let mut f = vec![0.0; grid.len()];
            for j in 0..n {
                let (a, b) = (stats.drift_weights[j] / n_active, stats.vol_weights[j] / n_active);
                for ((fy, pb), ps) in f.iter_mut().zip(k.drift_projection(j)).zip(k.vol_projection(j)) {
                    *fy += a * pb + b * ps;
                }
            }
            let tf = kernel_test_function(k, phi.functional().h(), m_path.mesh().t1())?;
            let gbar = stats.dm_weight / n_active;
            for (fy, t) in f.iter_mut().zip(tf.values()) {
                *fy += gbar * t;
            }
            let pairings =
                (0..directions.len()).map(|d| stats.estimate(|s| s.kernel[d])).collect();
            (Some(GridFunction::from_raw(grid, f)), MuDerivativeMode::Kernel, pairings)
        }
        None => {
            let pairings = (0..directions.len()).map(|d| stats.estimate(|s| s.y[d])).collect();
            (None, MuDerivativeMode::Pairing, pairings)
        }
    };
    let pairings_directional =
        (0..directions.len()).map(|d| stats.estimate(|s| s.y[d])).collect();
    let report = ValueReport {
        v: value.mean,
        std_err: value.se,
        dv_dx: stats.estimate(|s| s.vx),
        d2v_dx2: stats.estimate(|s| s.vxx),
        dv_dmu,
        mu_mode,
        pairings,
        pairings_directional,
        dv_dt: stats.estimate(|s| s.vt),
        n_paths: noise.n_paths(),
        escaped: stats.n_escaped(),
        seed: noise.seed(),
        n_steps: n,
        n_points: m_path.grid().len(),
    };
    Ok((report, stats))
}

/// Per-path samples of `Phi(X_T, m_T)` (`None` for escaped paths).
pub(crate) fn terminal_samples(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    m_path: &DensityPath,
    x: f64,
    noise: &NoiseBank,
) -> Result<Vec<Option<f64>>> {
    let stats = pathwise(model, phi, m_path, x, noise, &PathwiseRequest::default())?;
    Ok(stats.samples.into_iter().map(|s| s.map(|s| s.phi)).collect())
}

/// `V(t, x, mu)` with its standard error.
pub fn eval_v(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    t: f64,
    x: f64,
    mu: &GridFunction,
    cfg: &ValueSettings,
) -> Result<Estimate> {
    if t == cfg.horizon {
        return Ok(Estimate::exact(phi.value(x, mu)));
    }
    let mesh = mesh_for(t, cfg)?;
    let m_path = solve_on_mesh(model, mu, &mesh, &cfg.fp)?;
    let noise = NoiseBank::for_mesh(cfg.seed, cfg.n_paths, &mesh)?;
    let s = terminal_samples(model, phi, &m_path, x, &noise)?;
    Ok(Estimate::from_samples(&s.into_iter().flatten().collect::<Vec<_>>()))
}

/// `(dV/dx, d2V/dx2)`.
pub fn dv_dx(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    t: f64,
    x: f64,
    mu: &GridFunction,
    cfg: &ValueSettings,
) -> Result<(Estimate, Estimate)> {
    let mesh = mesh_for(t, cfg)?;
    let m_path = solve_on_mesh(model, mu, &mesh, &cfg.fp)?;
    let noise = NoiseBank::for_mesh(cfg.seed, cfg.n_paths, &mesh)?;
    let req = PathwiseRequest { derivatives: true, ..Default::default() };
    let stats = pathwise(model, phi, &m_path, x, &noise, &req)?;
    Ok((stats.estimate(|s| s.vx), stats.estimate(|s| s.vxx)))
}

/// `dV/dmu`: the full function of `y` when the kernel exists, otherwise the
/// pairings with `directions` only.
#[derive(Debug, Clone)]
pub struct MuDerivative {
    pub mode: MuDerivativeMode,
    pub function: Option<GridFunction>,
    pub pairings: Vec<Estimate>,
}

pub fn dv_dmu(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    t: f64,
    x: f64,
    mu: &GridFunction,
    cfg: &ValueSettings,
    directions: &[GridFunction],
) -> Result<MuDerivative> {
    let r = value_report(model, phi, t, x, mu, cfg, directions)?;
    Ok(MuDerivative { mode: r.mu_mode, function: r.dv_dmu, pairings: r.pairings })
}

/// `dV/dt` from the terminal-time formula.
pub fn dv_dt(
    model: &CoefficientModel,
    phi: &TerminalFunctional,
    t: f64,
    x: f64,
    mu: &GridFunction,
    cfg: &ValueSettings,
) -> Result<Estimate> {
    let mesh = mesh_for(t, cfg)?;
    let m_path = solve_on_mesh(model, mu, &mesh, &cfg.fp)?;
    let noise = NoiseBank::for_mesh(cfg.seed, cfg.n_paths, &mesh)?;
    let ds_m = density_time_derivative(model, &m_path.last());
    let req = PathwiseRequest {
        dt_pair: Some(l2_inner(phi.functional().h(), &ds_m)?),
        ..Default::default()
    };
    let stats = pathwise(model, phi, &m_path, x, &noise, &req)?;
    Ok(stats.estimate(|s| s.vt))
}
