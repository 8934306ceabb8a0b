//! Uniform 1-D grids and sampled L² functions.
//!
//! Every integral in the crate goes through the trapezoid weights defined
//! here, so the discrete mass used by the Fokker-Planck scheme and the
//! quadrature used by diagnostics agree to round-off.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    x_min: f64,
    x_max: f64,
    n_points: usize,
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, n_points: usize) -> Result<Self> {
        if n_points < 3 {
            return Err(invalid(format!("grid needs at least 3 points, got {n_points}")));
        }
        if !(x_min.is_finite() && x_max.is_finite() && x_max > x_min) {
            return Err(invalid(format!("bad grid interval [{x_min}, {x_max}]")));
        }
        Ok(Self { x_min, x_max, n_points })
    }

    /// Every `factor`-th node of this grid, same interval.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !(self.n_points - 1).is_multiple_of(factor) {
            return Err(invalid(format!("cannot coarsen {} points by {factor}", self.n_points)));
        }
        Self::new(self.x_min, self.x_max, (self.n_points - 1) / factor + 1)
    }

    /// Grid with spacing as close as possible to `dx` on `[x_min, x_max]`.
    pub fn with_spacing(x_min: f64, x_max: f64, dx: f64) -> Result<Self> {
        let n = ((x_max - x_min) / dx).round() as usize + 1;
        Self::new(x_min, x_max, n)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.node(i)).collect()
    }

    /// Trapezoid weights: `dx` in the interior, `dx/2` at both ends.
    pub fn weights(&self) -> Vec<f64> {
        let dx = self.dx();
        let mut w = vec![dx; self.n_points];
        w[0] = 0.5 * dx;
        w[self.n_points - 1] = 0.5 * dx;
        w
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }

    /// Grids are compatible when they have identical node sets.
    pub fn same_as(&self, other: &Grid1D) -> bool {
        self.n_points == other.n_points && self.x_min == other.x_min && self.x_max == other.x_max
    }

    pub fn ensure_same(&self, other: &Grid1D) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(invalid(format!(
                "grid mismatch: [{}, {}]x{} vs [{}, {}]x{}",
                self.x_min, self.x_max, self.n_points, other.x_min, other.x_max, other.n_points
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Grid1D,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.node(i))).collect();
        Self { grid, values }
    }

    pub fn zeros(grid: Grid1D) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub(crate) fn from_raw(grid: Grid1D, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    /// Restriction to [`Grid1D::coarsened`] nodes.
    pub fn subsampled(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsened(factor)?;
        Ok(Self { grid, values: self.values.iter().step_by(factor).copied().collect() })
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self::from_raw(self.grid, self.values.iter().map(|v| alpha * v).collect())
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &GridFunction) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        let values = self.values.iter().zip(&other.values).map(|(u, v)| u + alpha * v).collect();
        Ok(Self::from_raw(self.grid, values))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn boundary_max(&self) -> f64 {
        self.values[0].abs().max(self.values[self.values.len() - 1].abs())
    }
}

impl Add for &GridFunction {
    type Output = GridFunction;
    fn add(self, rhs: &GridFunction) -> GridFunction {
        self.axpy(1.0, rhs).expect("grid mismatch in addition")
    }
}

impl Sub for &GridFunction {
    type Output = GridFunction;
    fn sub(self, rhs: &GridFunction) -> GridFunction {
        self.axpy(-1.0, rhs).expect("grid mismatch in subtraction")
    }
}

impl Mul<f64> for &GridFunction {
    type Output = GridFunction;
    fn mul(self, rhs: f64) -> GridFunction {
        self.scale(rhs)
    }
}

/// Trapezoid weighted sum of raw nodal values.
pub(crate) fn trapezoid(values: &[f64], dx: f64) -> f64 {
    let n = values.len();
    let interior: f64 = values[1..n - 1].iter().sum();
    dx * (interior + 0.5 * (values[0] + values[n - 1]))
}

/// Trapezoid rule of `u` over `[x_min, x_max]`.
pub fn quadrature(u: &GridFunction) -> f64 {
    trapezoid(&u.values, u.grid.dx())
}

pub(crate) fn weighted_dot(u: &[f64], v: &[f64], dx: f64) -> f64 {
    let n = u.len();
    let interior: f64 = (1..n - 1).map(|i| u[i] * v[i]).sum();
    dx * (interior + 0.5 * (u[0] * v[0] + u[n - 1] * v[n - 1]))
}

pub fn l2_inner(u: &GridFunction, v: &GridFunction) -> Result<f64> {
    u.grid.ensure_same(&v.grid)?;
    Ok(weighted_dot(&u.values, &v.values, u.grid.dx()))
}

pub fn l2_norm(u: &GridFunction) -> f64 {
    weighted_dot(&u.values, &u.values, u.grid.dx()).sqrt()
}

pub fn l2_distance(u: &GridFunction, v: &GridFunction) -> Result<f64> {
    u.grid.ensure_same(&v.grid)?;
    let dx = u.grid.dx();
    let d: Vec<f64> = u.values.iter().zip(&v.values).map(|(a, b)| a - b).collect();
    Ok(weighted_dot(&d, &d, dx).sqrt())
}

/// Discrete `W^{order,2}` norm, derivatives by [`spatial_derivative`].
pub fn sobolev_norm(u: &GridFunction, order: usize) -> Result<f64> {
    if order > 3 {
        return Err(Error::UnsupportedOrder(order));
    }
    if u.grid.len() < order + 2 {
        return Err(invalid(format!(
            "{} points cannot resolve derivatives of order {order}",
            u.grid.len()
        )));
    }
    let mut sq = l2_norm(u).powi(2);
    for k in 1..=order {
        sq += l2_norm(&spatial_derivative(u, k)?).powi(2);
    }
    Ok(sq.sqrt())
}

/// Finite-difference derivative of order 1..=3: central in the interior,
/// one-sided near the boundary, second-order accurate everywhere.
pub fn spatial_derivative(u: &GridFunction, order: usize) -> Result<GridFunction> {
    if order == 0 || order > 3 {
        return Err(Error::UnsupportedOrder(order));
    }
    let n = u.grid.len();
    if n < order + 2 {
        return Err(invalid(format!("{n} points cannot resolve order {order}")));
    }
    let values = derivative_values(&u.values, u.grid.dx(), order);
    Ok(GridFunction::from_raw(u.grid, values))
}

pub(crate) fn derivative_values(u: &[f64], dx: f64, order: usize) -> Vec<f64> {
    let n = u.len();
    // interior stencils are symmetric; the boundary windows need one extra point
    let central_half = if order == 3 { 2 } else { 1 };
    let boundary_width = order + 2;
    let scale = dx.powi(order as i32);

    let central = stencil_weights(-(central_half as i64), 2 * central_half + 1, 0, order);
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let acc = if i >= central_half && i + central_half < n {
            let start = i - central_half;
            central.iter().enumerate().map(|(k, w)| w * u[start + k]).sum::<f64>()
        } else {
            let start = if i < central_half { 0 } else { n - boundary_width };
            let w = stencil_weights(start as i64 - i as i64, boundary_width, 0, order);
            w.iter().enumerate().map(|(k, w)| w * u[start + k]).sum::<f64>()
        };
        *slot = acc / scale;
    }
    out
}

/// Fornberg weights for the `order`-th derivative at offset `at` using the
/// integer offsets `first, first+1, ..., first+width-1` (unit spacing).
fn stencil_weights(first: i64, width: usize, at: i64, order: usize) -> Vec<f64> {
    let xs: Vec<f64> = (0..width).map(|k| (first + k as i64) as f64).collect();
    let z = at as f64;
    let m = order;
    let n = width - 1;
    let mut c = vec![vec![0.0; m + 1]; width];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - z;
    c[0][0] = 1.0;
    for i in 1..=n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - z;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[m]).collect()
}
