//! Coefficient models `b(x, m)`, `sigma(x, m)`, `a = sigma^2 / 2`.
//!
//! Every model in the catalog has the product form
//!
//! ```text
//! b(x, m)     = beta(x)  * F_b(m),    F_b(m) = b0 + b1 * outer_b(<h_b, m>)
//! sigma(x, m) = alpha(x) * F_s(m),    F_s(m) = s0 + s1 * outer_s(<h_s, m>)
//! ```
//!
//! so the dependence on the density goes through two scalars per slice and
//! the functional derivatives are rank one:
//! `db/dm(x, m)(xi) = beta(x) * F_b'(m) * h_b(xi)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{Outer, Profile};
use crate::grid::{l2_inner, l2_norm, sobolev_norm, weighted_dot, Grid1D, GridFunction};
use crate::stats::{fit_loglog_slope, SlopeFit};

/// `F(m) = offset + scale * outer(<h, m>)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothFunctional {
    h: GridFunction,
    outer: Outer,
    scale: f64,
    offset: f64,
}

impl SmoothFunctional {
    pub fn new(h: GridFunction, outer: Outer, scale: f64, offset: f64) -> Self {
        Self { h, outer, scale, offset }
    }

    pub fn constant(grid: Grid1D, value: f64) -> Self {
        Self::new(GridFunction::zeros(grid), Outer::Identity, 0.0, value)
    }

    /// Example-2.2 functional `exp(-<h, m>^2)`.
    pub fn exp_neg_square(h: GridFunction) -> Self {
        Self::new(h, Outer::ExpNegSquare, 1.0, 0.0)
    }

    /// Same functional with `h` restricted to a coarser grid.
    pub fn subsampled(&self, factor: usize) -> Result<Self> {
        Ok(Self { h: self.h.subsampled(factor)?, ..self.clone() })
    }

    pub fn h(&self) -> &GridFunction {
        &self.h
    }

    pub fn outer(&self) -> Outer {
        self.outer
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn is_constant(&self) -> bool {
        self.scale == 0.0 || self.h.max_abs() == 0.0
    }

    /// `<h, m>`.
    pub fn argument(&self, m: &[f64]) -> f64 {
        weighted_dot(self.h.values(), m, self.h.grid().dx())
    }

    pub fn value_at(&self, arg: f64) -> f64 {
        self.offset + self.scale * self.outer.value(arg)
    }

    /// `dF/dm = factor(arg) * h`.
    pub fn factor_at(&self, arg: f64) -> f64 {
        self.scale * self.outer.d1(arg)
    }

    pub fn second_factor_at(&self, arg: f64) -> f64 {
        self.scale * self.outer.d2(arg)
    }

    pub fn value(&self, m: &GridFunction) -> f64 {
        self.value_at(self.argument(m.values()))
    }

    pub fn derivative(&self, m: &GridFunction) -> GridFunction {
        self.h.scale(self.factor_at(self.argument(m.values())))
    }

    /// `sup |F|` over all densities, `None` if the outer map is unbounded.
    pub fn sup_value(&self) -> Option<f64> {
        if self.is_constant() {
            return Some(self.offset.abs());
        }
        self.outer.sup_bounds().map(|b| self.offset.abs() + self.scale.abs() * b[0])
    }

    pub fn inf_value(&self) -> Option<f64> {
        if self.is_constant() {
            return Some(self.offset);
        }
        self.outer.sup_bounds().map(|b| self.offset - self.scale.abs() * b[0])
    }

    /// Bound on `||dF/dm||_{W^{1,2}}`, `None` if unbounded.
    pub fn derivative_bound(&self) -> Option<f64> {
        if self.is_constant() {
            return Some(0.0);
        }
        let w12 = sobolev_norm(&self.h, 1).unwrap_or(f64::INFINITY);
        let d1 = match self.outer {
            Outer::Identity => 1.0,
            o => o.sup_bounds()?[1],
        };
        Some(self.scale.abs() * d1 * w12)
    }

    /// `sup |F'| * ||h||_{L2}`, the L²-Lipschitz constant of `F`.
    pub fn lipschitz(&self) -> f64 {
        let d1 = match self.outer {
            Outer::Identity => 1.0,
            o => o.sup_bounds().map(|b| b[1]).unwrap_or(f64::INFINITY),
        };
        self.scale.abs() * d1 * l2_norm(&self.h)
    }
}

/// Values of the model's density functionals on one density slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldState {
    pub drift_arg: f64,
    pub vol_arg: f64,
    pub drift_level: f64,
    pub vol_level: f64,
    pub drift_slope: f64,
    pub vol_slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    B,
    Sigma,
}

#[derive(Debug, Clone)]
pub struct CoefficientModel {
    drift_shape: Profile,
    drift: SmoothFunctional,
    vol_shape: Profile,
    vol: SmoothFunctional,
    gamma: f64,
    lip_bound: f64,
    state_invariant: bool,
}

/// Parameters of `b(m) = b0 + b1 outer_b(<h_b,m>)`, `sigma(m) = s0 + s1 outer_s(<h_s,m>)`.
#[derive(Debug, Clone)]
pub struct StateInvariantSpec {
    pub b0: f64,
    pub b1: f64,
    pub b_outer: Outer,
    pub h_b: GridFunction,
    pub s0: f64,
    pub s1: f64,
    pub s_outer: Outer,
    pub h_s: GridFunction,
}

/// As [`StateInvariantSpec`] plus spatial shapes: `b = beta(x) F_b(m)`, `sigma = alpha(x) F_s(m)`.
#[derive(Debug, Clone)]
pub struct StateDependentSpec {
    pub base: StateInvariantSpec,
    pub beta: Profile,
    pub alpha: Profile,
}

pub fn make_state_invariant_model(spec: StateInvariantSpec) -> Result<CoefficientModel> {
    make_state_dependent_model(StateDependentSpec {
        base: spec,
        beta: Profile::Const(1.0),
        alpha: Profile::Const(1.0),
    })
}

pub fn make_state_dependent_model(spec: StateDependentSpec) -> Result<CoefficientModel> {
    let StateDependentSpec { base, beta, alpha } = spec;
    let grid = *base.h_b.grid();
    grid.ensure_same(base.h_s.grid())
        .map_err(|e| Error::Construction(format!("test functions live on different grids: {e}")))?;
    let drift = SmoothFunctional::new(base.h_b, base.b_outer, base.b1, base.b0);
    let vol = SmoothFunctional::new(base.h_s, base.s_outer, base.s1, base.s0);
    let (lo, hi) = (grid.x_min(), grid.x_max());

    let alpha_inf = alpha.inf_on(lo, hi);
    let vol_inf = vol.inf_value().ok_or_else(|| {
        Error::Construction("volatility functional is unbounded; ellipticity cannot hold".into())
    })?;
    if !(alpha_inf > 0.0 && vol_inf > 0.0) {
        return Err(Error::Construction(format!(
            "volatility not bounded away from zero: inf alpha = {alpha_inf}, inf F_sigma = {vol_inf}"
        )));
    }
    let sigma_inf = alpha_inf * vol_inf;
    let gamma = 0.5 * sigma_inf * sigma_inf;

    let beta_b = beta.sup_bounds(lo, hi);
    let alpha_b = alpha.sup_bounds(lo, hi);
    let lip_bound = [
        drift.sup_value().map(|f| f * beta_b[0].max(beta_b[1]).max(beta_b[2])),
        vol.sup_value().map(|f| f * alpha_b[0].max(alpha_b[1]).max(alpha_b[2])),
        drift.derivative_bound().map(|d| d * beta_b[0].max(beta_b[1]).max(beta_b[2])),
        vol.derivative_bound().map(|d| d * alpha_b[0].max(alpha_b[1]).max(alpha_b[2])),
        Some(drift.lipschitz() * beta_b[0]),
        Some(vol.lipschitz() * alpha_b[0]),
    ]
    .into_iter()
    .map(|v| v.unwrap_or(f64::INFINITY))
    .fold(0.0, f64::max);

    let state_invariant = beta.is_constant() && alpha.is_constant();
    let model = CoefficientModel {
        drift_shape: beta,
        drift,
        vol_shape: alpha,
        vol,
        gamma,
        lip_bound,
        state_invariant,
    };
    model.probe_ellipticity()?;
    Ok(model)
}

impl CoefficientModel {
    /// The same model with its test functions restricted to a coarser grid.
    pub fn subsampled(&self, factor: usize) -> Result<Self> {
        make_state_dependent_model(StateDependentSpec {
            base: StateInvariantSpec {
                b0: self.drift.offset(),
                b1: self.drift.scale(),
                b_outer: self.drift.outer(),
                h_b: self.drift.h().subsampled(factor)?,
                s0: self.vol.offset(),
                s1: self.vol.scale(),
                s_outer: self.vol.outer(),
                h_s: self.vol.h().subsampled(factor)?,
            },
            beta: self.drift_shape,
            alpha: self.vol_shape,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lip_bound(&self) -> f64 {
        self.lip_bound
    }

    pub fn state_invariant(&self) -> bool {
        self.state_invariant
    }

    pub fn grid(&self) -> &Grid1D {
        self.drift.h().grid()
    }

    pub fn drift_functional(&self) -> &SmoothFunctional {
        &self.drift
    }

    pub fn vol_functional(&self) -> &SmoothFunctional {
        &self.vol
    }

    pub fn drift_shape(&self) -> Profile {
        self.drift_shape
    }

    pub fn vol_shape(&self) -> Profile {
        self.vol_shape
    }

    /// True when neither coefficient depends on the density.
    pub fn density_independent(&self) -> bool {
        self.drift.is_constant() && self.vol.is_constant()
    }

    pub fn field_state(&self, m: &[f64]) -> FieldState {
        let drift_arg = self.drift.argument(m);
        let vol_arg = self.vol.argument(m);
        self.field_state_from_args(drift_arg, vol_arg)
    }

    pub fn field_state_from_args(&self, drift_arg: f64, vol_arg: f64) -> FieldState {
        FieldState {
            drift_arg,
            vol_arg,
            drift_level: self.drift.value_at(drift_arg),
            vol_level: self.vol.value_at(vol_arg),
            drift_slope: self.drift.factor_at(drift_arg),
            vol_slope: self.vol.factor_at(vol_arg),
        }
    }

    pub fn b(&self, x: f64, st: &FieldState) -> f64 {
        self.drift_shape.value(x) * st.drift_level
    }

    pub fn b_x(&self, x: f64, st: &FieldState) -> f64 {
        self.drift_shape.d1(x) * st.drift_level
    }

    pub fn b_xx(&self, x: f64, st: &FieldState) -> f64 {
        self.drift_shape.d2(x) * st.drift_level
    }

    pub fn sigma(&self, x: f64, st: &FieldState) -> f64 {
        self.vol_shape.value(x) * st.vol_level
    }

    pub fn sigma_x(&self, x: f64, st: &FieldState) -> f64 {
        self.vol_shape.d1(x) * st.vol_level
    }

    pub fn sigma_xx(&self, x: f64, st: &FieldState) -> f64 {
        self.vol_shape.d2(x) * st.vol_level
    }

    pub fn a(&self, x: f64, st: &FieldState) -> f64 {
        let s = self.sigma(x, st);
        0.5 * s * s
    }

    pub fn a_x(&self, x: f64, st: &FieldState) -> f64 {
        self.sigma(x, st) * self.sigma_x(x, st)
    }

    pub fn a_xx(&self, x: f64, st: &FieldState) -> f64 {
        let sx = self.sigma_x(x, st);
        sx * sx + self.sigma(x, st) * self.sigma_xx(x, st)
    }

    pub fn a_xxx(&self, x: f64, st: &FieldState) -> f64 {
        let sxxx = self.vol_shape.d3(x) * st.vol_level;
        3.0 * self.sigma_x(x, st) * self.sigma_xx(x, st) + self.sigma(x, st) * sxxx
    }

    /// `db/dm(x, m) = drift_sensitivity(x) * h_b`.
    pub fn drift_sensitivity(&self, x: f64, st: &FieldState) -> f64 {
        self.drift_shape.value(x) * st.drift_slope
    }

    /// `dsigma/dm(x, m) = vol_sensitivity(x) * h_s`.
    pub fn vol_sensitivity(&self, x: f64, st: &FieldState) -> f64 {
        self.vol_shape.value(x) * st.vol_slope
    }

    /// `da/dm(x, m) = sigma(x, m) * vol_sensitivity(x) * h_s`.
    pub fn diffusion_sensitivity(&self, x: f64, st: &FieldState) -> f64 {
        self.sigma(x, st) * self.vol_sensitivity(x, st)
    }

    pub fn eval_b(&self, x: f64, m: &GridFunction) -> f64 {
        self.b(x, &self.field_state(m.values()))
    }

    pub fn eval_sigma(&self, x: f64, m: &GridFunction) -> f64 {
        self.sigma(x, &self.field_state(m.values()))
    }

    pub fn eval_a(&self, x: f64, m: &GridFunction) -> f64 {
        self.a(x, &self.field_state(m.values()))
    }

    pub fn eval(&self, field: Field, x: f64, m: &GridFunction) -> f64 {
        match field {
            Field::B => self.eval_b(x, m),
            Field::Sigma => self.eval_sigma(x, m),
        }
    }

    pub fn db_dm(&self, x: f64, m: &GridFunction) -> GridFunction {
        let st = self.field_state(m.values());
        self.drift.h().scale(self.drift_sensitivity(x, &st))
    }

    pub fn dsigma_dm(&self, x: f64, m: &GridFunction) -> GridFunction {
        let st = self.field_state(m.values());
        self.vol.h().scale(self.vol_sensitivity(x, &st))
    }

    pub fn da_dm(&self, x: f64, m: &GridFunction) -> GridFunction {
        let st = self.field_state(m.values());
        self.vol.h().scale(self.diffusion_sensitivity(x, &st))
    }

    pub fn d_dm(&self, field: Field, x: f64, m: &GridFunction) -> GridFunction {
        match field {
            Field::B => self.db_dm(x, m),
            Field::Sigma => self.dsigma_dm(x, m),
        }
    }

    /// Checks `a >= gamma` on the probe densities over the whole grid.
    pub fn probe_ellipticity(&self) -> Result<()> {
        let grid = *self.grid();
        let xs: Vec<f64> = grid.nodes().into_iter().step_by(grid.len().div_ceil(200).max(1)).collect();
        for (name, m) in probe_densities(&grid) {
            let st = self.field_state(m.values());
            for &x in &xs {
                let a = self.a(x, &st);
                if a < self.gamma * (1.0 - 1e-12) {
                    return Err(Error::Construction(format!(
                        "ellipticity violated: a({x}, {name}) = {a} < gamma = {}",
                        self.gamma
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fixed family of densities used for sampled assumption checks.
pub fn probe_densities(grid: &Grid1D) -> Vec<(String, GridFunction)> {
    let mut out = Vec::new();
    let span = grid.x_max() - grid.x_min();
    let mid = 0.5 * (grid.x_min() + grid.x_max());
    for &(dm, s) in &[(0.0, 0.3), (0.0, 1.0), (-0.2, 0.5), (0.25, 0.15), (-0.15, 2.0)] {
        let p = Profile::Normal { mean: mid + dm * span, std: s };
        out.push((format!("normal({},{s})", mid + dm * span), GridFunction::from_fn(*grid, |x| p.value(x))));
    }
    let a = Profile::Normal { mean: mid - 0.1 * span, std: 0.4 };
    let b = Profile::Normal { mean: mid + 0.1 * span, std: 0.8 };
    out.push((
        "mixture".into(),
        GridFunction::from_fn(*grid, |x| 0.3 * a.value(x) + 0.7 * b.value(x)),
    ));
    out.push(("signed".into(), GridFunction::from_fn(*grid, |x| 2.0 * (a.value(x) - b.value(x)))));
    out.push(("example21".into(), crate::scenario::example21_on_grid(grid, 50)));
    out.push(("zero".into(), GridFunction::zeros(*grid)));
    out
}

#[derive(Debug, Clone)]
pub struct DerivativeCheck {
    pub h_values: Vec<f64>,
    pub errors: Vec<f64>,
    pub fit: SlopeFit,
}

/// Compares `(f(x, m + h m~) - f(x, m)) / h` with `<df/dm(x, m), m~>`.
pub fn functional_derivative_check(
    model: &CoefficientModel,
    field: Field,
    x: f64,
    m: &GridFunction,
    mtilde: &GridFunction,
    h_values: &[f64],
) -> Result<DerivativeCheck> {
    if h_values.iter().any(|h| !(*h > 0.0)) || h_values.windows(2).any(|w| w[1] >= w[0]) {
        return Err(crate::error::invalid("h_values must be positive and decreasing"));
    }
    let base = model.eval(field, x, m);
    let exact = l2_inner(&model.d_dm(field, x, m), mtilde)?;
    let errors: Vec<f64> = h_values
        .iter()
        .map(|&h| {
            let shifted = m.axpy(h, mtilde).expect("same grid");
            let q = (model.eval(field, x, &shifted) - base) / h;
            (q - exact).abs()
        })
        .collect();
    let fit = fit_loglog_slope(h_values, &errors, 1e-10);
    Ok(DerivativeCheck { h_values: h_values.to_vec(), errors, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::Profile;

    fn grid() -> Grid1D {
        Grid1D::with_spacing(-8.0, 8.0, 0.02).unwrap()
    }

    fn gf(p: &str) -> GridFunction {
        let p: Profile = p.parse().unwrap();
        GridFunction::from_fn(grid(), |x| p.value(x))
    }

    fn reference_spec(b1: f64, s1: f64) -> StateInvariantSpec {
        StateInvariantSpec {
            b0: 0.0,
            b1,
            b_outer: Outer::Sin,
            h_b: gf("gauss(0,2,1,1)"),
            s0: 1.0,
            s1,
            s_outer: Outer::Tanh,
            h_s: gf("gauss(0,2,1,1)"),
        }
    }

    #[test]
    fn constant_model_has_zero_functional_derivatives() {
        let m = make_state_invariant_model(reference_spec(0.0, 0.0)).unwrap();
        let mu = gf("normal(0,0.5)");
        assert_eq!(m.db_dm(0.3, &mu).max_abs(), 0.0);
        assert_eq!(m.dsigma_dm(0.3, &mu).max_abs(), 0.0);
        assert!(m.state_invariant());
        assert!(m.density_independent());
        assert_eq!(m.gamma(), 0.5);
        assert_eq!(m.eval_a(1.0, &mu), 0.5);
    }

    #[test]
    fn reference_model_gamma() {
        let m = make_state_invariant_model(reference_spec(0.5, 0.3)).unwrap();
        assert!((m.gamma() - 0.245).abs() < 1e-12);
        for (_, d) in probe_densities(&grid()) {
            assert!(m.eval_a(0.0, &d) >= 0.245 - 1e-15);
        }
    }

    #[test]
    fn non_elliptic_spec_is_rejected() {
        let err = make_state_invariant_model(reference_spec(0.5, 1.2)).unwrap_err();
        assert!(matches!(err, Error::Construction(_)));
        let mut spec = reference_spec(0.5, 0.3);
        spec.s_outer = Outer::Identity;
        assert!(make_state_invariant_model(spec).is_err());
    }

    #[test]
    fn chain_rule_for_diffusion_derivative() {
        let model = make_state_dependent_model(StateDependentSpec {
            base: reference_spec(0.5, 0.3),
            beta: "tanh(0,1,1)".parse().unwrap(),
            alpha: "tanh(1,0.2,1.5)".parse().unwrap(),
        })
        .unwrap();
        for (_, m) in probe_densities(&grid()) {
            for &x in &[-2.0, 0.1, 3.5] {
                let lhs = model.da_dm(x, &m);
                let rhs = model.dsigma_dm(x, &m).scale(model.eval_sigma(x, &m));
                for (a, b) in lhs.values().iter().zip(rhs.values()) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn example_22_derivative_bound() {
        let h = gf("gauss(0,1.5,0.5,0.8)");
        let f = SmoothFunctional::exp_neg_square(h.clone());
        let bound = 2f64.sqrt() * (-0.5f64).exp() * l2_norm(&h);
        let mu = gf("normal(0.2,0.5)");
        let dir = gf("dgauss(1,0,0.7)");
        let fm = f.argument(mu.values());
        let expected = -2.0 * fm * (-fm * fm).exp() * l2_inner(&h, &dir).unwrap();
        assert!((l2_inner(&f.derivative(&mu), &dir).unwrap() - expected).abs() < 1e-14);
        for (_, m) in probe_densities(&grid()) {
            assert!(l2_norm(&f.derivative(&m)) <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn spatial_derivatives_match_finite_differences() {
        let model = make_state_dependent_model(StateDependentSpec {
            base: reference_spec(0.5, 0.3),
            beta: "tanh(0,1,1)".parse().unwrap(),
            alpha: "sin(1,0.1,1,0)".parse().unwrap(),
        })
        .unwrap();
        let mu = gf("normal(0.2,0.5)");
        let st = model.field_state(mu.values());
        let d = 1e-4;
        for &x in &[-1.5, 0.0, 0.8, 2.5] {
            let fd = |f: &dyn Fn(f64) -> f64| (f(x + d) - f(x - d)) / (2.0 * d);
            assert!((fd(&|y| model.b(y, &st)) - model.b_x(x, &st)).abs() < 1e-6);
            assert!((fd(&|y| model.b_x(y, &st)) - model.b_xx(x, &st)).abs() < 1e-6);
            assert!((fd(&|y| model.sigma(y, &st)) - model.sigma_x(x, &st)).abs() < 1e-6);
            assert!((fd(&|y| model.sigma_x(y, &st)) - model.sigma_xx(x, &st)).abs() < 1e-6);
            assert!((fd(&|y| model.a(y, &st)) - model.a_x(x, &st)).abs() < 1e-6);
            assert!((fd(&|y| model.a_x(y, &st)) - model.a_xx(x, &st)).abs() < 1e-6);
            assert!((fd(&|y| model.a_xx(y, &st)) - model.a_xxx(x, &st)).abs() < 1e-6);
        }
        assert!(!model.state_invariant());
    }

    #[test]
    fn unit_shapes_reduce_to_state_invariant_model() {
        let a = make_state_invariant_model(reference_spec(0.5, 0.3)).unwrap();
        let b = make_state_dependent_model(StateDependentSpec {
            base: reference_spec(0.5, 0.3),
            beta: Profile::Const(1.0),
            alpha: Profile::Const(1.0),
        })
        .unwrap();
        assert!(b.state_invariant());
        let mu = gf("normal(0.2,0.5)");
        assert_eq!(a.eval_b(0.7, &mu), b.eval_b(0.7, &mu));
        assert_eq!(a.eval_sigma(0.7, &mu), b.eval_sigma(0.7, &mu));
    }

    #[test]
    fn sampled_bounds_and_lipschitz() {
        let model = make_state_dependent_model(StateDependentSpec {
            base: reference_spec(0.5, 0.3),
            beta: "tanh(0,1,1)".parse().unwrap(),
            alpha: Profile::Const(1.0),
        })
        .unwrap();
        let l = model.lip_bound();
        assert!(l.is_finite());
        let probes = probe_densities(&grid());
        let xs = [-3.0, -0.4, 0.0, 0.9, 4.0];
        for (_, m) in &probes {
            let st = model.field_state(m.values());
            for &x in &xs {
                assert!(model.b(x, &st).abs() <= l);
                assert!(model.b_x(x, &st).abs() <= l);
                assert!(model.b_xx(x, &st).abs() <= l);
            }
        }
        for (_, m1) in &probes {
            for (_, m2) in &probes {
                let dm = crate::grid::l2_distance(m1, m2).unwrap();
                for &x1 in &xs {
                    for &x2 in &xs {
                        for field in [Field::B, Field::Sigma] {
                            let df = (model.eval(field, x1, m1) - model.eval(field, x2, m2)).abs();
                            assert!(df <= l * ((x1 - x2).abs() + dm) + 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn finite_difference_check_rates() {
        let model = make_state_invariant_model(reference_spec(0.5, 0.3)).unwrap();
        let mu = gf("normal(0.2,0.5)");
        let dir = gf("dgauss(1,0.3,0.6)");
        let hs = [1e-1, 1e-2, 1e-3, 1e-4];
        let zero = functional_derivative_check(
            &model,
            Field::Sigma,
            0.0,
            &mu,
            &GridFunction::zeros(grid()),
            &hs,
        )
        .unwrap();
        assert!(zero.errors.iter().all(|e| *e == 0.0));

        let tanh = functional_derivative_check(&model, Field::Sigma, 0.0, &mu, &dir, &hs).unwrap();
        let slope = tanh.fit.slope.expect("slope");
        assert!((0.9..=1.1).contains(&slope), "slope {slope}");

        let mut lin = reference_spec(0.5, 0.3);
        lin.b_outer = Outer::Identity;
        let lin = make_state_invariant_model(lin).unwrap();
        let check = functional_derivative_check(&lin, Field::B, 0.0, &mu, &dir, &hs).unwrap();
        assert!(check.errors.iter().all(|e| *e < 1e-10), "{:?}", check.errors);
        assert!(check.fit.floor_limited);

        assert!(functional_derivative_check(&model, Field::B, 0.0, &mu, &dir, &[0.1, 0.2]).is_err());
    }
}
