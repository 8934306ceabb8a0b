//! Named problem instances and the schema used to describe them.
//!
//! A [`ScenarioSpec`] is plain data (it is also the config-file schema);
//! [`Scenario::build`] turns it into grids, models and densities and checks
//! the instance invariants.

use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coefficients::{
    make_state_dependent_model, CoefficientModel, SmoothFunctional, StateDependentSpec,
    StateInvariantSpec,
};
use crate::error::{Error, Result};
use crate::fp::FpConfig;
use crate::functions::{parse_call, Outer, Profile};
use crate::grid::{l2_norm, Grid1D, GridFunction};
use crate::path::TimeMesh;
use crate::value::{TerminalFunctional, ValueSettings};

/// Largest tolerated initial-density value at the domain walls.
pub const BOUNDARY_DECAY: f64 = 1e-10;

pub const CATALOG: [&str; 5] =
    ["pure-diffusion", "state-invariant-ref", "state-dep-drift", "constant-phi", "driftless-identity"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub t: f64,
    pub horizon: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub picard_iters: usize,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
}

fn default_picard_tol() -> f64 {
    FpConfig::default().picard_tol
}

fn default_theta() -> f64 {
    FpConfig::default().theta
}

/// `b = beta(x) (b0 + b1 b_outer(<h_b, m>))`, `sigma = alpha(x) (s0 + s1 s_outer(<h_s, m>))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub b0: f64,
    pub b1: f64,
    pub b_outer: String,
    pub h_b: String,
    pub s0: f64,
    pub s1: f64,
    pub s_outer: String,
    pub h_s: String,
    #[serde(default = "unit_profile")]
    pub beta: String,
    #[serde(default = "unit_profile")]
    pub alpha: String,
}

fn unit_profile() -> String {
    "const(1)".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuSpec {
    /// Density expression, e.g. `0.3*normal(-1,0.4) + 0.7*normal(1,0.8)`.
    pub density: String,
}

/// `Phi(x, m) = g(x) (offset + scale outer(<h, m>)) + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiSpec {
    pub g: String,
    pub outer: String,
    pub h: String,
    pub scale: f64,
    pub offset: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub n_paths: usize,
    pub seed: u64,
    pub x0: f64,
}

/// Parameters of the verification checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    /// Perturbation directions for derivative checks (expressions on the grid).
    pub directions: Vec<String>,
    /// Step sizes of convergence studies, decreasing.
    pub h_values: Vec<f64>,
    /// Martingale checkpoints in `[t, T]`.
    pub checkpoints: Vec<f64>,
    pub snapshot_every: usize,
    /// Time weight `w(s)` of the Itô test functional `w(s) Phi(x, m)`.
    pub time_weight: String,
    /// Outer path count of the nested martingale check.
    pub nested_outer_paths: usize,
    /// Time steps of the nested martingale check.
    pub nested_steps: usize,
    /// Upper bound on inner path-steps of the nested check.
    pub nested_budget: f64,
    /// Convergence-study targets.
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub grid: GridSpec,
    pub time: TimeSpec,
    pub model: ModelSpec,
    pub mu: MuSpec,
    pub phi: PhiSpec,
    pub mc: McSpec,
    pub check: CheckSpec,
}

fn base_spec() -> ScenarioSpec {
    ScenarioSpec {
        name: "state-invariant-ref".into(),
        grid: GridSpec { x_min: -10.0, x_max: 10.0, n_points: 1001 },
        time: TimeSpec {
            t: 0.0,
            horizon: 1.0,
            n_steps: 1000,
            picard_iters: 0,
            picard_tol: default_picard_tol(),
            theta: default_theta(),
        },
        model: ModelSpec {
            b0: 0.0,
            b1: 0.5,
            b_outer: "sin".into(),
            h_b: "gauss(0,2,1,1)".into(),
            s0: 1.0,
            s1: 0.3,
            s_outer: "tanh".into(),
            h_s: "gauss(0,2,1,1)".into(),
            beta: unit_profile(),
            alpha: unit_profile(),
        },
        mu: MuSpec { density: "normal(0.2,0.5)".into() },
        phi: PhiSpec {
            g: "gauss(0,1,0,1.5)".into(),
            outer: "expnegsq".into(),
            h: "gauss(0,1,0.5,1)".into(),
            scale: 1.0,
            offset: 0.0,
            c: 0.0,
        },
        mc: McSpec { n_paths: 10_000, seed: 20_240_611, x0: 0.3 },
        check: CheckSpec {
            directions: vec![
                "dgauss(1,0,0.6)".into(),
                "normal(0.5,0.7)".into(),
                "gauss(0,1,-0.5,0.4)".into(),
            ],
            h_values: vec![0.2, 0.1, 0.05, 0.025],
            checkpoints: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            snapshot_every: 50,
            time_weight: "linear(1,0.5)".into(),
            nested_outer_paths: 2500,
            nested_steps: 200,
            nested_budget: 2e9,
            targets: vec![
                "density_derivative".into(),
                "state_derivative".into(),
                "value_mu_pairing".into(),
            ],
        },
    }
}

/// Spec of a catalog scenario.
pub fn catalog(name: &str) -> Result<ScenarioSpec> {
    let mut s = base_spec();
    s.name = name.into();
    match name {
        "state-invariant-ref" => {}
        "pure-diffusion" => {
            s.grid = GridSpec { x_min: -8.0, x_max: 8.0, n_points: 801 };
            s.model = ModelSpec {
                b0: 0.0,
                b1: 0.0,
                b_outer: "identity".into(),
                h_b: "const(0)".into(),
                s0: 2f64.sqrt(),
                s1: 0.0,
                s_outer: "identity".into(),
                h_s: "const(0)".into(),
                beta: unit_profile(),
                alpha: unit_profile(),
            };
            s.mu.density = "normal(0,0.5)".into();
            s.phi = PhiSpec {
                g: "const(1)".into(),
                outer: "expnegsq".into(),
                h: "gauss(0,1,0,1)".into(),
                scale: 1.0,
                offset: 0.0,
                c: 0.0,
            };
        }
        "state-dep-drift" => {
            s.model.b0 = 0.3;
            s.model.beta = "tanh(0,1,1)".into();
        }
        "constant-phi" => {
            s.phi = PhiSpec {
                g: "const(1)".into(),
                outer: "identity".into(),
                h: "const(0)".into(),
                scale: 0.0,
                offset: 1.0,
                c: 0.5,
            };
        }
        "driftless-identity" => {
            s.model.b1 = 0.0;
            s.phi = PhiSpec {
                g: "linear(0,1)".into(),
                outer: "identity".into(),
                h: "const(0)".into(),
                scale: 0.0,
                offset: 1.0,
                c: 0.0,
            };
        }
        other => {
            return Err(Error::Config(format!(
                "unknown scenario '{other}' (known: {})",
                CATALOG.join(", ")
            )))
        }
    }
    Ok(s)
}

/// Term of a density expression.
#[derive(Debug, Clone, PartialEq)]
enum Term {
    Profile(Profile),
    /// The heavy-tailed indicator density, truncated after `n` blocks.
    Example21(usize),
}

/// Linear combination of catalog profiles, e.g. `0.3*normal(-1,0.4) + 0.7*normal(1,0.8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityExpr {
    terms: Vec<(f64, Term)>,
}

impl DensityExpr {
    pub fn on_grid(&self, grid: &Grid1D) -> GridFunction {
        let mut out = GridFunction::zeros(*grid);
        for (c, term) in &self.terms {
            let f = match term {
                Term::Profile(p) => GridFunction::from_fn(*grid, |x| p.value(x)),
                Term::Example21(n) => example21_on_grid(grid, *n),
            };
            out = &out + &f.scale(*c);
        }
        out
    }

    /// Whether the expression only uses smooth profiles.
    pub fn is_smooth(&self) -> bool {
        self.terms.iter().all(|(_, t)| matches!(t, Term::Profile(_)))
    }
}

impl FromStr for DensityExpr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for part in split_top_level(s, '+') {
            let part = part.trim();
            if part.is_empty() {
                return Err(Error::Config(format!("empty term in '{s}'")));
            }
            let (coef, call) = match split_top_level(part, '*').as_slice() {
                [call] => (1.0, *call),
                [c, call] => {
                    let c = c.trim().parse::<f64>().map_err(|_| {
                        Error::Config(format!("bad coefficient '{}' in '{s}'", c.trim()))
                    })?;
                    (c, *call)
                }
                _ => return Err(Error::Config(format!("cannot parse term '{part}'"))),
            };
            let (name, args) = parse_call(call)?;
            let term = match name.as_str() {
                "example21" => match args.as_slice() {
                    [n] if *n >= 1.0 && n.fract() == 0.0 => Term::Example21(*n as usize),
                    _ => return Err(Error::Config("example21 takes one positive integer".into())),
                },
                "gaussian" => match args.as_slice() {
                    [mean, std] => Term::Profile(Profile::Normal { mean: *mean, std: *std }),
                    _ => return Err(Error::Config("gaussian takes (mean, std)".into())),
                },
                _ => Term::Profile(call.parse()?),
            };
            terms.push((coef, term));
        }
        Ok(Self { terms })
    }
}

fn split_top_level(s: &str, sep: char) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                // keep exponents such as 1e+3 intact
                let head = s[start..i].trim_end().as_bytes();
                if let [.., d, b'e' | b'E'] = head {
                    if d.is_ascii_digit() || *d == b'.' {
                        continue;
                    }
                }
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

/// Parses a density expression and samples it on `grid`.
pub fn parse_density(expr: &str, grid: &Grid1D) -> Result<GridFunction> {
    Ok(expr.parse::<DensityExpr>()?.on_grid(grid))
}

/// `rho(x) = sum_{n=1}^{n_terms} (pi^2 / (6n)) 1_{[n, n + 1/n)}(x)`, sampled at the nodes.
pub fn example21_on_grid(grid: &Grid1D, n_terms: usize) -> GridFunction {
    GridFunction::from_fn(*grid, |x| {
        if x < 1.0 {
            return 0.0;
        }
        let n = x.floor();
        if (n as usize) <= n_terms && x < n + 1.0 / n {
            PI * PI / (6.0 * n)
        } else {
            0.0
        }
    })
}

/// Closed-form moments of the truncated heavy-tailed density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Example21Moments {
    /// `(pi^2/6) sum n^-2`.
    pub mass: f64,
    /// `(pi^2/6)^2 sum n^-3`.
    pub l2_sq: f64,
    /// `int |x| rho = (pi^2/6) sum (1/n + 1/(2 n^3))`, at least `(pi^2/6) H_n`.
    pub first_moment_partial: f64,
    /// Mass with the omitted blocks `n > n_terms` added back analytically.
    pub mass_with_tail: f64,
    /// `l2_sq` with the analytic tail.
    pub l2_sq_with_tail: f64,
}

pub fn example21_moments(n_terms: usize) -> Result<Example21Moments> {
    if n_terms == 0 {
        return Err(crate::error::invalid("example21 needs at least one term"));
    }
    let c = PI * PI / 6.0;
    // sum from the small terms up to keep rounding low
    let (mut s2, mut s3, mut s1) = (0.0, 0.0, 0.0);
    for n in (1..=n_terms).rev() {
        let n = n as f64;
        s2 += 1.0 / (n * n);
        s3 += 1.0 / (n * n * n);
        s1 += 1.0 / n + 0.5 / (n * n * n);
    }
    let n = n_terms as f64;
    Ok(Example21Moments {
        mass: c * s2,
        l2_sq: c * c * s3,
        first_moment_partial: c * s1,
        mass_with_tail: c * (s2 + zeta_tail(2.0, n)),
        l2_sq_with_tail: c * c * (s3 + zeta_tail(3.0, n)),
    })
}

/// `sum_{k > n} k^-s` by Euler-Maclaurin.
fn zeta_tail(s: f64, n: f64) -> f64 {
    let np = n.powf(-s);
    n.powf(1.0 - s) / (s - 1.0) - 0.5 * np + s / 12.0 * np / n
        - s * (s + 1.0) * (s + 2.0) / 720.0 * np / (n * n * n)
}

/// A built scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub grid: Grid1D,
    pub model: CoefficientModel,
    pub mu: GridFunction,
    pub phi: TerminalFunctional,
    pub directions: Vec<GridFunction>,
}

fn profile(field: &str, s: &str) -> Result<Profile> {
    s.parse().map_err(|e: Error| Error::Config(format!("{field}: {e}")))
}

fn outer(field: &str, s: &str) -> Result<Outer> {
    s.parse().map_err(|e: Error| Error::Config(format!("{field}: {e}")))
}

fn sampled(grid: Grid1D, field: &str, s: &str) -> Result<GridFunction> {
    let p = profile(field, s)?;
    Ok(GridFunction::from_fn(grid, |x| p.value(x)))
}

impl Scenario {
    pub fn named(name: &str) -> Result<Self> {
        Self::build(catalog(name)?)
    }

    pub fn build(spec: ScenarioSpec) -> Result<Self> {
        let g = &spec.grid;
        let grid = Grid1D::new(g.x_min, g.x_max, g.n_points)
            .map_err(|e| Error::Config(format!("grid: {e}")))?;
        let m = &spec.model;
        let model = make_state_dependent_model(StateDependentSpec {
            base: StateInvariantSpec {
                b0: m.b0,
                b1: m.b1,
                b_outer: outer("model.b_outer", &m.b_outer)?,
                h_b: sampled(grid, "model.h_b", &m.h_b)?,
                s0: m.s0,
                s1: m.s1,
                s_outer: outer("model.s_outer", &m.s_outer)?,
                h_s: sampled(grid, "model.h_s", &m.h_s)?,
            },
            beta: profile("model.beta", &m.beta)?,
            alpha: profile("model.alpha", &m.alpha)?,
        })?;

        let mu_expr: DensityExpr = spec.mu.density.parse()?;
        if !mu_expr.is_smooth() {
            return Err(Error::Construction(
                "example21 is not weakly differentiable and cannot start a density flow".into(),
            ));
        }
        let mu = mu_expr.on_grid(&grid);
        if mu.boundary_max() >= BOUNDARY_DECAY {
            return Err(Error::Construction(format!(
                "initial density reaches {:.3e} at the walls (limit {BOUNDARY_DECAY:e}); widen the grid",
                mu.boundary_max()
            )));
        }

        let p = &spec.phi;
        let phi = TerminalFunctional::new(
            profile("phi.g", &p.g)?,
            SmoothFunctional::new(
                sampled(grid, "phi.h", &p.h)?,
                outer("phi.outer", &p.outer)?,
                p.scale,
                p.offset,
            ),
            p.c,
        );
        if !phi.bound().is_finite() {
            return Err(Error::Construction("terminal functional is unbounded on the grid".into()));
        }

        let directions = spec
            .check
            .directions
            .iter()
            .map(|d| {
                let f = parse_density(d, &grid)?;
                if !l2_norm(&f).is_finite() {
                    return Err(Error::Construction(format!("direction '{d}' is not in L2")));
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;

        let t = &spec.time;
        TimeMesh::new(t.t, t.horizon, t.n_steps).map_err(|e| Error::Config(format!("time: {e}")))?;
        let fp = FpConfig { n_steps: t.n_steps, picard_iters: t.picard_iters, picard_tol: t.picard_tol, theta: t.theta };
        fp.validate().map_err(|e| Error::Config(format!("time: {e}")))?;
        if !grid.contains(spec.mc.x0) {
            return Err(Error::Config(format!("mc.x0 = {} outside the grid", spec.mc.x0)));
        }
        Ok(Self { spec, grid, model, mu, phi, directions })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn t(&self) -> f64 {
        self.spec.time.t
    }

    pub fn horizon(&self) -> f64 {
        self.spec.time.horizon
    }

    pub fn x0(&self) -> f64 {
        self.spec.mc.x0
    }

    pub fn seed(&self) -> u64 {
        self.spec.mc.seed
    }

    pub fn mesh(&self) -> TimeMesh {
        let t = &self.spec.time;
        TimeMesh::new(t.t, t.horizon, t.n_steps).expect("validated at build")
    }

    pub fn fp_config(&self) -> FpConfig {
        let t = &self.spec.time;
        FpConfig { n_steps: t.n_steps, picard_iters: t.picard_iters, picard_tol: t.picard_tol, theta: t.theta }
    }

    pub fn value_settings(&self) -> ValueSettings {
        ValueSettings {
            horizon: self.horizon(),
            fp: self.fp_config(),
            n_paths: self.spec.mc.n_paths,
            seed: self.spec.mc.seed,
            snapshot_every: self.spec.check.snapshot_every,
        }
    }

    pub fn time_weight(&self) -> Result<Profile> {
        profile("check.time_weight", &self.spec.check.time_weight)
    }
}
