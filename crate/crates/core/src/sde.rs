//! Euler-Maruyama simulation of the state process and its derivative
//! processes on the time mesh of the density path.
//!
//! Brownian increments come from a [`NoiseBank`]: path `p` draws from the
//! ChaCha stream `p` of the bank's seed, so any subset of paths can be
//! regenerated independently of thread scheduling, and two ensembles built
//! from the same bank share their noise exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{CoefficientModel, FieldState};
use crate::error::{invalid, Error, Result};
use crate::grid::{weighted_dot, Grid1D, GridFunction};
use crate::linearized::KernelPath;
use crate::path::{DensityPath, TimeMesh};
use crate::stats::{mean_and_var, quantile};

/// Largest tolerated fraction of paths leaving the spatial domain.
pub const MAX_ESCAPE_FRACTION: f64 = 0.01;

/// Reproducible Gaussian increments `dB_j` for `n_paths` paths.
///
/// Each increment is the sum of `substeps` finer draws, so a bank and its
/// [`coarsened`](NoiseBank::coarsened) version sample the same Brownian path
/// on nested meshes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseBank {
    seed: u64,
    n_paths: usize,
    n_steps: usize,
    dt: f64,
    substeps: usize,
}

impl NoiseBank {
    pub fn new(seed: u64, n_paths: usize, n_steps: usize, dt: f64) -> Result<Self> {
        if n_paths == 0 || n_steps == 0 || !(dt > 0.0) {
            return Err(invalid("noise bank needs paths, steps and a positive dt"));
        }
        Ok(Self { seed, n_paths, n_steps, dt, substeps: 1 })
    }

    pub fn for_mesh(seed: u64, n_paths: usize, mesh: &TimeMesh) -> Result<Self> {
        Self::new(seed, n_paths, mesh.n_steps(), mesh.dt())
    }

    /// Same Brownian paths observed every `factor` steps.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(invalid(format!("cannot coarsen {} steps by {factor}", self.n_steps)));
        }
        Ok(Self {
            n_steps: self.n_steps / factor,
            dt: self.dt * factor as f64,
            substeps: self.substeps * factor,
            ..*self
        })
    }

    /// First `n_paths` paths of this bank.
    pub fn truncated(&self, n_paths: usize) -> Self {
        Self { n_paths: n_paths.min(self.n_paths), ..*self }
    }

    /// The first `n_steps` increments of every path.
    pub fn prefix(&self, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || n_steps > self.n_steps {
            return Err(invalid(format!("prefix of {n_steps} steps from a bank of {}", self.n_steps)));
        }
        Ok(Self { n_steps, ..*self })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn fill(&self, path: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_steps);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        let scale = (self.dt / self.substeps as f64).sqrt();
        for slot in out.iter_mut() {
            let mut acc = 0.0;
            for _ in 0..self.substeps {
                let z: f64 = StandardNormal.sample(&mut rng);
                acc += z;
            }
            *slot = scale * acc;
        }
    }

    pub fn increments(&self, path: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_steps];
        self.fill(path, &mut v);
        v
    }

    pub(crate) fn check_mesh(&self, mesh: &TimeMesh) -> Result<()> {
        if self.n_steps != mesh.n_steps() || (self.dt - mesh.dt()).abs() > 1e-12 * mesh.dt() {
            return Err(invalid(format!(
                "noise bank ({} steps of {}) does not match the mesh ({} steps of {})",
                self.n_steps,
                self.dt,
                mesh.n_steps(),
                mesh.dt()
            )));
        }
        Ok(())
    }
}

/// SplitMix64 mixing, used to derive independent child seeds.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProcessLabel {
    X,
    DX,
    D2X,
    Y,
}

/// Per-path trajectories on every mesh node.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    label: ProcessLabel,
    noise: NoiseBank,
    mesh: TimeMesh,
    width: usize,
    states: Vec<f64>,
    escaped: Vec<bool>,
}

impl PathEnsemble {
    pub fn label(&self) -> ProcessLabel {
        self.label
    }

    pub fn noise(&self) -> &NoiseBank {
        &self.noise
    }

    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }

    pub fn n_paths(&self) -> usize {
        self.escaped.len()
    }

    pub fn path(&self, p: usize) -> &[f64] {
        &self.states[p * self.width..(p + 1) * self.width]
    }

    pub fn escaped(&self, p: usize) -> bool {
        self.escaped[p]
    }

    pub fn n_escaped(&self) -> usize {
        self.escaped.iter().filter(|e| **e).count()
    }

    /// Values at step `j` over the paths that stayed in the domain.
    pub fn at_step(&self, j: usize) -> Vec<f64> {
        (0..self.n_paths()).filter(|p| !self.escaped[*p]).map(|p| self.path(p)[j]).collect()
    }

    pub fn terminal(&self) -> Vec<f64> {
        self.at_step(self.width - 1)
    }

    /// `E[sup_s |Z_s|^p]` over non-escaped paths.
    pub fn sup_moment(&self, p: f64) -> f64 {
        let vals: Vec<f64> = (0..self.n_paths())
            .filter(|q| !self.escaped[*q])
            .map(|q| self.path(q).iter().fold(0.0f64, |m, v| m.max(v.abs())).powf(p))
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Per-node mean, variance and 5/50/95% quantiles.
    pub fn summary_rows(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let header = ["s", "mean", "variance", "q05", "q50", "q95"].map(String::from).to_vec();
        let rows = (0..self.width)
            .map(|j| {
                let mut v = self.at_step(j);
                let (m, var) = mean_and_var(&v);
                v.sort_by(f64::total_cmp);
                vec![self.mesh.time(j), m, var, quantile(&v, 0.05), quantile(&v, 0.5), quantile(&v, 0.95)]
            })
            .collect();
        (header, rows)
    }
}

pub(crate) fn field_states(model: &CoefficientModel, m_path: &DensityPath) -> Vec<FieldState> {
    (0..m_path.n_slices()).map(|j| model.field_state(m_path.slice_values(j))).collect()
}

/// Index of the mesh node `t` and the remaining number of steps.
fn start_index(m_path: &DensityPath, t: f64, noise: &NoiseBank) -> Result<usize> {
    let k = m_path.mesh().require_index(t)?;
    let rest = m_path.mesh().n_steps() - k;
    if rest == 0 {
        return Err(invalid("cannot simulate from the terminal time"));
    }
    noise.check_mesh(&m_path.mesh().restart_at(k)?)?;
    Ok(k)
}

/// One Euler-Maruyama path of `X`. Returns `false` if the path left the
/// grid; the state is then frozen at its last in-domain value.
pub(crate) fn euler_path(
    model: &CoefficientModel,
    states: &[FieldState],
    grid: &Grid1D,
    x0: f64,
    db: &[f64],
    dt: f64,
    out: &mut [f64],
) -> bool {
    out[0] = x0;
    let mut x = x0;
    for (j, dbj) in db.iter().enumerate() {
        let st = &states[j];
        let next = x + model.b(x, st) * dt + model.sigma(x, st) * dbj;
        if !grid.contains(next) {
            out[j + 1..].iter_mut().for_each(|v| *v = x);
            return false;
        }
        x = next;
        out[j + 1] = x;
    }
    true
}

pub(crate) fn check_escapes(escaped: usize, total: usize) -> Result<()> {
    if escaped as f64 > MAX_ESCAPE_FRACTION * total as f64 {
        return Err(Error::DomainEscape { escaped, total });
    }
    Ok(())
}

/// Euler-Maruyama ensemble of `X^{t,x,mu}` driven by the density path.
pub fn simulate_x(
    model: &CoefficientModel,
    m_path: &DensityPath,
    t: f64,
    x: f64,
    noise: &NoiseBank,
) -> Result<PathEnsemble> {
    let k = start_index(m_path, t, noise)?;
    let grid = *m_path.grid();
    if !grid.contains(x) {
        return Err(invalid(format!("starting point {x} outside the grid")));
    }
    let states = field_states(model, m_path)[k..].to_vec();
    let mesh = m_path.mesh().restart_at(k)?;
    let width = mesh.n_steps() + 1;
    let dt = mesh.dt();
    let rows: Vec<(Vec<f64>, bool)> = (0..noise.n_paths())
        .into_par_iter()
        .map(|p| {
            let db = noise.increments(p);
            let mut out = vec![0.0; width];
            let ok = euler_path(model, &states, &grid, x, &db, dt, &mut out);
            (out, !ok)
        })
        .collect();
    let escaped: Vec<bool> = rows.iter().map(|r| r.1).collect();
    check_escapes(escaped.iter().filter(|e| **e).count(), escaped.len())?;
    let states = rows.into_iter().flat_map(|r| r.0).collect();
    Ok(PathEnsemble { label: ProcessLabel::X, noise: *noise, mesh, width, states, escaped })
}

fn derived_ensemble(
    base: &PathEnsemble,
    label: ProcessLabel,
    step: impl Fn(usize, usize, f64, f64, f64) -> f64 + Sync,
    init: f64,
) -> PathEnsemble {
    let width = base.width;
    let rows: Vec<Vec<f64>> = (0..base.n_paths())
        .into_par_iter()
        .map(|p| {
            let db = base.noise.increments(p);
            let mut out = vec![0.0; width];
            out[0] = init;
            for j in 0..width - 1 {
                out[j + 1] = step(p, j, base.path(p)[j], out[j], db[j]);
            }
            out
        })
        .collect();
    PathEnsemble {
        label,
        noise: base.noise,
        mesh: base.mesh,
        width,
        states: rows.concat(),
        escaped: base.escaped.clone(),
    }
}

fn aligned_states(
    model: &CoefficientModel,
    m_path: &DensityPath,
    ens: &PathEnsemble,
) -> Result<(usize, Vec<FieldState>)> {
    let k = m_path.mesh().require_index(ens.mesh.t0())?;
    if m_path.mesh().n_steps() - k != ens.mesh.n_steps() {
        return Err(invalid("ensemble and density path cover different horizons"));
    }
    Ok((k, field_states(model, m_path)[k..].to_vec()))
}

/// First variation `d_x X`: linear SDE along `X`, started at 1.
pub fn simulate_first_variation(
    model: &CoefficientModel,
    m_path: &DensityPath,
    x_ensemble: &PathEnsemble,
) -> Result<PathEnsemble> {
    let (_, states) = aligned_states(model, m_path, x_ensemble)?;
    let dt = x_ensemble.mesh.dt();
    Ok(derived_ensemble(
        x_ensemble,
        ProcessLabel::DX,
        |_, j, x, d, db| {
            let st = &states[j];
            d + model.b_x(x, st) * d * dt + model.sigma_x(x, st) * d * db
        },
        1.0,
    ))
}

/// Second variation `d_xx X`, started at 0.
pub fn simulate_second_variation(
    model: &CoefficientModel,
    m_path: &DensityPath,
    x_ensemble: &PathEnsemble,
    dx_ensemble: &PathEnsemble,
) -> Result<PathEnsemble> {
    let (_, states) = aligned_states(model, m_path, x_ensemble)?;
    if dx_ensemble.noise != x_ensemble.noise {
        return Err(invalid("first-variation ensemble uses different noise"));
    }
    let dt = x_ensemble.mesh.dt();
    Ok(derived_ensemble(
        x_ensemble,
        ProcessLabel::D2X,
        |p, j, x, d2, db| {
            let st = &states[j];
            let d = dx_ensemble.path(p)[j];
            d2 + (model.b_x(x, st) * d2 + model.b_xx(x, st) * d * d) * dt
                + (model.sigma_x(x, st) * d2 + model.sigma_xx(x, st) * d * d) * db
        },
        0.0,
    ))
}

/// Directional derivative `Y` of `X` along the density direction whose
/// flow is `mtilde_path`.
pub fn simulate_y(
    model: &CoefficientModel,
    m_path: &DensityPath,
    mtilde_path: &DensityPath,
    x_ensemble: &PathEnsemble,
) -> Result<PathEnsemble> {
    m_path.ensure_compatible(mtilde_path)?;
    let (k, states) = aligned_states(model, m_path, x_ensemble)?;
    let dx = m_path.grid().dx();
    let hb = model.drift_functional().h().values();
    let hs = model.vol_functional().h().values();
    let pairs: Vec<(f64, f64)> = (k..m_path.n_slices())
        .map(|j| {
            let mt = mtilde_path.slice_values(j);
            (weighted_dot(hb, mt, dx), weighted_dot(hs, mt, dx))
        })
        .collect();
    let dt = x_ensemble.mesh.dt();
    Ok(derived_ensemble(
        x_ensemble,
        ProcessLabel::Y,
        |_, j, x, y, db| {
            let st = &states[j];
            let (pb, ps) = pairs[j];
            y + (model.b_x(x, st) * y + model.drift_sensitivity(x, st) * pb) * dt
                + (model.sigma_x(x, st) * y + model.vol_sensitivity(x, st) * ps) * db
        },
        0.0,
    ))
}

/// `U_s(y)` recorded at a set of mesh steps, for every path and `y`-node.
#[derive(Debug, Clone)]
pub struct KernelEnsemble {
    grid: Grid1D,
    mesh: TimeMesh,
    record_steps: Vec<usize>,
    /// `[path][record][y]`
    values: Vec<f64>,
    escaped: Vec<bool>,
}

impl KernelEnsemble {
    pub fn record_steps(&self) -> &[usize] {
        &self.record_steps
    }

    pub fn n_paths(&self) -> usize {
        self.escaped.len()
    }

    pub fn escaped(&self, p: usize) -> bool {
        self.escaped[p]
    }

    fn record_index(&self, j: usize) -> Result<usize> {
        self.record_steps
            .iter()
            .position(|r| *r == j)
            .ok_or_else(|| invalid(format!("step {j} was not recorded")))
    }

    /// `y -> U_{s_j}(y)` on path `p`.
    pub fn u(&self, p: usize, j: usize) -> Result<&[f64]> {
        let n = self.grid.len();
        let r = self.record_index(j)?;
        let base = (p * self.record_steps.len() + r) * n;
        Ok(&self.values[base..base + n])
    }

    /// `int U_{s_j}(y) mu~(y) dy` on path `p`.
    pub fn pair(&self, p: usize, j: usize, mu_tilde: &GridFunction) -> Result<f64> {
        Ok(weighted_dot(self.u(p, j)?, mu_tilde.values(), self.grid.dx()))
    }

    /// `E[int sup_s U_s(y)^2 dy]` over the recorded steps.
    pub fn sup_square_integral(&self) -> f64 {
        let n = self.grid.len();
        let r = self.record_steps.len();
        let dx = self.grid.dx();
        let active: Vec<usize> = (0..self.n_paths()).filter(|p| !self.escaped[*p]).collect();
        let total: f64 = active
            .iter()
            .map(|&p| {
                let sup: Vec<f64> = (0..n)
                    .map(|l| {
                        (0..r)
                            .map(|k| self.values[(p * r + k) * n + l].powi(2))
                            .fold(0.0, f64::max)
                    })
                    .collect();
                crate::grid::trapezoid(&sup, dx)
            })
            .sum();
        total / active.len() as f64
    }

    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }
}

/// Kernel-valued derivative process `U(y)`, recorded at `record_steps`
/// (relative to the ensemble's mesh).
pub fn simulate_u(
    model: &CoefficientModel,
    m_path: &DensityPath,
    k_path: &KernelPath,
    x_ensemble: &PathEnsemble,
    record_steps: &[usize],
) -> Result<KernelEnsemble> {
    if !model.state_invariant() {
        return Err(Error::UnsupportedModel(
            "U needs the kernel, which is only available for x-independent coefficients".into(),
        ));
    }
    m_path.grid().ensure_same(k_path.grid())?;
    if !m_path.mesh().same_as(k_path.mesh()) {
        return Err(invalid("kernel path and density path use different meshes"));
    }
    let (k0, states) = aligned_states(model, m_path, x_ensemble)?;
    let n_steps = x_ensemble.mesh.n_steps();
    if record_steps.iter().any(|r| *r > n_steps) {
        return Err(invalid("record step beyond the horizon"));
    }
    let n = m_path.grid().len();
    let dt = x_ensemble.mesh.dt();
    let rows: Vec<Vec<f64>> = (0..x_ensemble.n_paths())
        .into_par_iter()
        .map(|p| {
            let db = x_ensemble.noise.increments(p);
            let xs = x_ensemble.path(p);
            let mut u = vec![0.0; n];
            let mut out = Vec::with_capacity(record_steps.len() * n);
            let rec = |j: usize, u: &[f64], out: &mut Vec<f64>| {
                for r in record_steps {
                    if *r == j {
                        out.extend_from_slice(u);
                    }
                }
            };
            rec(0, &u, &mut out);
            for j in 0..n_steps {
                let st = &states[j];
                let x = xs[j];
                let lin = 1.0 + model.b_x(x, st) * dt + model.sigma_x(x, st) * db[j];
                let cb = model.drift_sensitivity(x, st) * dt;
                let cs = model.vol_sensitivity(x, st) * db[j];
                let pb = k_path.drift_projection(k0 + j);
                let ps = k_path.vol_projection(k0 + j);
                for l in 0..n {
                    u[l] = lin * u[l] + cb * pb[l] + cs * ps[l];
                }
                rec(j + 1, &u, &mut out);
            }
            out
        })
        .collect();
    let mut sorted_record: Vec<usize> = Vec::new();
    for j in 0..=n_steps {
        for r in record_steps {
            if *r == j {
                sorted_record.push(*r);
            }
        }
    }
    Ok(KernelEnsemble {
        grid: *m_path.grid(),
        mesh: x_ensemble.mesh,
        record_steps: sorted_record,
        values: rows.concat(),
        escaped: x_ensemble.escaped.clone(),
    })
}

/// `int U_s(y) mu~(y) dy` at every step via the scalar recursion driven by
/// the paired kernel projections. Rows are paths.
pub fn u_pairing(
    model: &CoefficientModel,
    m_path: &DensityPath,
    k_path: &KernelPath,
    x_ensemble: &PathEnsemble,
    mu_tilde: &GridFunction,
) -> Result<Vec<Vec<f64>>> {
    if !model.state_invariant() {
        return Err(Error::UnsupportedModel("U needs the kernel".into()));
    }
    let (k0, states) = aligned_states(model, m_path, x_ensemble)?;
    let dx = m_path.grid().dx();
    let n_steps = x_ensemble.mesh.n_steps();
    let pairs: Vec<(f64, f64)> = (0..n_steps)
        .map(|j| {
            (
                weighted_dot(k_path.drift_projection(k0 + j), mu_tilde.values(), dx),
                weighted_dot(k_path.vol_projection(k0 + j), mu_tilde.values(), dx),
            )
        })
        .collect();
    let dt = x_ensemble.mesh.dt();
    Ok((0..x_ensemble.n_paths())
        .into_par_iter()
        .map(|p| {
            let db = x_ensemble.noise.increments(p);
            let xs = x_ensemble.path(p);
            let mut out = vec![0.0; n_steps + 1];
            for j in 0..n_steps {
                let st = &states[j];
                let x = xs[j];
                let (pb, ps) = pairs[j];
                out[j + 1] = out[j]
                    + (model.b_x(x, st) * out[j] + model.drift_sensitivity(x, st) * pb) * dt
                    + (model.sigma_x(x, st) * out[j] + model.vol_sensitivity(x, st) * ps) * db[j];
            }
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{make_state_dependent_model, make_state_invariant_model};
    use crate::coefficients::{StateDependentSpec, StateInvariantSpec};
    use crate::fp::{solve_fp, FpConfig};
    use crate::functions::{Outer, Profile};
    use crate::linearized::{solve_directional, solve_kernel};
    use crate::stats::mean_and_se;

    fn grid() -> Grid1D {
        Grid1D::new(-8.0, 8.0, 161).unwrap()
    }

    fn gf(p: &str) -> GridFunction {
        let p: Profile = p.parse().unwrap();
        GridFunction::from_fn(grid(), |x| p.value(x))
    }

    fn spec(b0: f64, b1: f64, s0: f64, s1: f64) -> StateInvariantSpec {
        StateInvariantSpec {
            b0,
            b1,
            b_outer: Outer::Sin,
            h_b: gf("gauss(0,2,1,1)"),
            s0,
            s1,
            s_outer: Outer::Tanh,
            h_s: gf("gauss(0,2,1,1)"),
        }
    }

    fn setup(model: &CoefficientModel, steps: usize) -> DensityPath {
        solve_fp(model, &gf("normal(0.2,0.5)"), 0.0, 1.0, &FpConfig::with_steps(steps)).unwrap()
    }

    #[test]
    fn noise_is_reproducible_and_centred() {
        let bank = NoiseBank::new(7, 4000, 20, 0.05).unwrap();
        assert_eq!(bank.increments(11), bank.increments(11));
        assert_ne!(bank.increments(11), bank.increments(12));
        for j in 0..20 {
            let col: Vec<f64> = (0..4000).map(|p| bank.increments(p)[j]).collect();
            let (m, _) = mean_and_se(&col);
            assert!(m.abs() < 4.0 * 0.05f64.sqrt() / (4000f64).sqrt());
        }
        let fine = NoiseBank::new(7, 10, 40, 0.025).unwrap();
        let coarse = fine.coarsened(2).unwrap();
        let f = fine.increments(3);
        let c = coarse.increments(3);
        for j in 0..20 {
            assert!((c[j] - f[2 * j] - f[2 * j + 1]).abs() < 1e-14);
        }
        assert!(fine.coarsened(3).is_err());
        let head = fine.prefix(15).unwrap().increments(3);
        assert_eq!(head[..], f[..15]);
        assert!(fine.prefix(41).is_err());
    }

    #[test]
    fn deterministic_drift_is_exact() {
        let model = make_state_invariant_model(spec(0.3, 0.0, 1e-9, 0.0)).unwrap();
        let path = setup(&model, 50);
        let bank = NoiseBank::for_mesh(1, 20, path.mesh()).unwrap();
        let ens = simulate_x(&model, &path, 0.0, 0.5, &bank).unwrap();
        for x in ens.terminal() {
            assert!((x - 0.8).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_coefficient_moments() {
        let model = make_state_invariant_model(spec(0.0, 0.0, 0.8, 0.0)).unwrap();
        let path = setup(&model, 50);
        let n = 20000;
        let bank = NoiseBank::for_mesh(2, n, path.mesh()).unwrap();
        let ens = simulate_x(&model, &path, 0.0, 0.5, &bank).unwrap();
        let xt = ens.terminal();
        let (m, var) = mean_and_var(&xt);
        assert!((m - 0.5).abs() < 4.0 * 0.8 / (n as f64).sqrt());
        let se_var = var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - 0.64).abs() < 5.0 * se_var);
        let dx = simulate_first_variation(&model, &path, &ens).unwrap();
        assert!(dx.terminal().iter().all(|v| *v == 1.0));
        let d2 = simulate_second_variation(&model, &path, &ens, &dx).unwrap();
        assert!(d2.terminal().iter().all(|v| *v == 0.0));
        assert!(ens.sup_moment(2.0).is_finite() && ens.sup_moment(4.0).is_finite());
        let (h, rows) = ens.summary_rows();
        assert_eq!(h.len(), rows[0].len());
        assert_eq!(rows.len(), 51);
    }

    #[test]
    fn escape_threshold() {
        let small = Grid1D::new(-1.0, 1.0, 41).unwrap();
        let h = GridFunction::zeros(small);
        let model = make_state_invariant_model(StateInvariantSpec {
            b0: 0.0,
            b1: 0.0,
            b_outer: Outer::Identity,
            h_b: h.clone(),
            s0: 1.0,
            s1: 0.0,
            s_outer: Outer::Identity,
            h_s: h,
        })
        .unwrap();
        let mu = GridFunction::from_fn(small, |x| (1.0 - x * x).powi(4));
        let path = crate::fp::solve_on_mesh(&model, &mu, &TimeMesh::new(0.0, 1.0, 20).unwrap(), &FpConfig::with_steps(20))
            .unwrap();
        let bank = NoiseBank::for_mesh(3, 100, path.mesh()).unwrap();
        assert!(matches!(simulate_x(&model, &path, 0.0, 0.0, &bank), Err(Error::DomainEscape { .. })));
    }

    #[test]
    fn first_variation_matches_crn_difference() {
        let model = make_state_dependent_model(StateDependentSpec {
            base: spec(0.0, 0.5, 1.0, 0.3),
            beta: "tanh(0,1,1)".parse().unwrap(),
            alpha: "tanh(1,0.2,1.5)".parse().unwrap(),
        })
        .unwrap();
        let path = setup(&model, 100);
        let bank = NoiseBank::for_mesh(4, 400, path.mesh()).unwrap();
        let x0 = 0.3;
        let base = simulate_x(&model, &path, 0.0, x0, &bank).unwrap();
        let dx = simulate_first_variation(&model, &path, &base).unwrap();
        let d2 = simulate_second_variation(&model, &path, &base, &dx).unwrap();
        let mut errs = Vec::new();
        let deltas = [0.08, 0.04, 0.02, 0.01];
        for &d in &deltas {
            let up = simulate_x(&model, &path, 0.0, x0 + d, &bank).unwrap();
            let dn = simulate_x(&model, &path, 0.0, x0 - d, &bank).unwrap();
            let (u, m, l) = (up.terminal(), base.terminal(), dn.terminal());
            let e1: f64 = (0..u.len()).map(|p| ((u[p] - m[p]) / d - dx.terminal()[p]).abs()).sum::<f64>()
                / u.len() as f64;
            errs.push(e1);
            let e2: f64 = (0..u.len())
                .map(|p| ((u[p] - 2.0 * m[p] + l[p]) / (d * d) - d2.terminal()[p]).abs())
                .sum::<f64>()
                / u.len() as f64;
            assert!(e2 < 0.5 * d + 1e-3, "second variation error {e2} at {d}");
        }
        let fit = crate::stats::fit_loglog_slope(&deltas, &errs, 1e-13);
        assert!(fit.within(0.8, 1.2), "{:?} {:?}", fit, errs);
    }

    #[test]
    fn y_matches_crn_quotient_and_u_representation() {
        let g = Grid1D::new(-6.0, 6.0, 121).unwrap();
        let cfg = FpConfig::with_steps(100);
        let gg = |p: &str| {
            let p: Profile = p.parse().unwrap();
            GridFunction::from_fn(g, |x| p.value(x))
        };
        let model = make_state_invariant_model(StateInvariantSpec {
            h_b: gg("gauss(0,2,1,1)"),
            h_s: gg("gauss(0,2,1,1)"),
            ..spec(0.0, 0.5, 1.0, 0.3)
        })
        .unwrap();
        let mu = gg("normal(0.2,0.5)");
        let dir = gg("dgauss(1,0,0.6)");
        let path = solve_fp(&model, &mu, 0.0, 1.0, &cfg).unwrap();
        let mt = solve_directional(&model, &path, &dir, &cfg).unwrap();
        let bank = NoiseBank::for_mesh(5, 500, path.mesh()).unwrap();
        let xe = simulate_x(&model, &path, 0.0, 0.1, &bank).unwrap();
        let y = simulate_y(&model, &path, &mt, &xe).unwrap();
        let zero = simulate_y(&model, &path, &mt.scaled(0.0), &xe).unwrap();
        assert!(zero.terminal().iter().all(|v| *v == 0.0));

        let mut errs = Vec::new();
        let hs = [0.2, 0.1, 0.05, 0.025];
        for &h in &hs {
            let pp = solve_fp(&model, &mu.axpy(h, &dir).unwrap(), 0.0, 1.0, &cfg).unwrap();
            let xp = simulate_x(&model, &pp, 0.0, 0.1, &bank).unwrap();
            let mut acc = 0.0;
            for p in 0..500 {
                let sup = (0..=100)
                    .map(|j| ((xp.path(p)[j] - xe.path(p)[j]) / h - y.path(p)[j]).powi(2))
                    .fold(0.0, f64::max);
                acc += sup;
            }
            errs.push((acc / 500.0).sqrt());
        }
        let fit = crate::stats::fit_loglog_slope(&hs, &errs, 1e-14);
        assert!(fit.within(0.7, 1.3), "{fit:?} {errs:?}");

        let k = solve_kernel(&model, &path, &cfg, 100).unwrap();
        let u = simulate_u(&model, &path, &k, &xe, &[0, 100]).unwrap();
        let pairing = u_pairing(&model, &path, &k, &xe, &dir).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (p, row) in pairing.iter().enumerate() {
            assert_eq!(u.u(p, 0).unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
            let up = u.pair(p, 100, &dir).unwrap();
            assert!((up - row[100]).abs() < 1e-10 * (1.0 + up.abs()));
            num += (up - y.path(p)[100]).powi(2);
            den += y.path(p)[100].powi(2);
        }
        assert!((num / den).sqrt() < 0.05, "{}", (num / den).sqrt());
        assert!(u.sup_square_integral().is_finite());
    }
}
