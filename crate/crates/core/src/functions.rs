//! Catalog of smooth scalar functions.
//!
//! [`Profile`]s are functions of the state `x` (drift/volatility shapes,
//! test functions `h`, initial densities, directions); [`Outer`] maps are
//! applied to scalar functionals `<h, m>`. Both carry closed-form
//! derivatives and parse from / print to a compact `name(args)` syntax used
//! by the config files.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    /// `c`
    Const(f64),
    /// `c0 + c1 x`
    Linear { c0: f64, c1: f64 },
    /// `base + amp * tanh(x / width)`
    Tanh { base: f64, amp: f64, width: f64 },
    /// `base + amp * sin(freq * x + phase)`
    Sin { base: f64, amp: f64, freq: f64, phase: f64 },
    /// `base + amp * exp(-(x - center)^2 / (2 width^2))`
    Gauss { base: f64, amp: f64, center: f64, width: f64 },
    /// `amp * (x - center)/width * exp(-(x - center)^2 / (2 width^2))`, mass zero
    DGauss { amp: f64, center: f64, width: f64 },
    /// Normal density with the given mean and standard deviation.
    Normal { mean: f64, std: f64 },
}

impl Profile {
    pub fn value(&self, x: f64) -> f64 {
        self.derivative(x, 0)
    }

    pub fn d1(&self, x: f64) -> f64 {
        self.derivative(x, 1)
    }

    pub fn d2(&self, x: f64) -> f64 {
        self.derivative(x, 2)
    }

    pub fn d3(&self, x: f64) -> f64 {
        self.derivative(x, 3)
    }

    /// `k`-th derivative, `k <= 3`.
    pub fn derivative(&self, x: f64, k: usize) -> f64 {
        match *self {
            Profile::Const(c) => {
                if k == 0 {
                    c
                } else {
                    0.0
                }
            }
            Profile::Linear { c0, c1 } => match k {
                0 => c0 + c1 * x,
                1 => c1,
                _ => 0.0,
            },
            Profile::Tanh { base, amp, width } => {
                let u = x / width;
                let t = u.tanh();
                let s2 = 1.0 - t * t;
                match k {
                    0 => base + amp * t,
                    1 => amp * s2 / width,
                    2 => amp * (-2.0 * t * s2) / (width * width),
                    _ => amp * (s2 * (6.0 * t * t - 2.0)) / width.powi(3),
                }
            }
            Profile::Sin { base, amp, freq, phase } => {
                let a = freq * x + phase;
                match k {
                    0 => base + amp * a.sin(),
                    1 => amp * freq * a.cos(),
                    2 => -amp * freq * freq * a.sin(),
                    _ => -amp * freq.powi(3) * a.cos(),
                }
            }
            Profile::Gauss { base, amp, center, width } => {
                let (e, u, w) = gauss_parts(x, center, width);
                let h = match k {
                    0 => 1.0,
                    1 => -u,
                    2 => u * u - 1.0,
                    _ => -(u * u * u - 3.0 * u),
                };
                (if k == 0 { base } else { 0.0 }) + amp * e * h / w.powi(k as i32)
            }
            Profile::DGauss { amp, center, width } => {
                // u * e(u); derivatives in u: (1-u^2)e, (u^3-3u)e, (-u^4+6u^2-3)e
                let (e, u, w) = gauss_parts(x, center, width);
                let h = match k {
                    0 => u,
                    1 => 1.0 - u * u,
                    2 => u * u * u - 3.0 * u,
                    _ => -u.powi(4) + 6.0 * u * u - 3.0,
                };
                amp * e * h / w.powi(k as i32)
            }
            Profile::Normal { mean, std } => {
                let g = Profile::Gauss { base: 0.0, amp: 1.0 / (std * SQRT_2PI), center: mean, width: std };
                g.derivative(x, k)
            }
        }
    }

    /// Sampled `sup |f^{(k)}|` over `[lo, hi]`, `k = 0, 1, 2, 3`.
    pub fn sup_bounds(&self, lo: f64, hi: f64) -> [f64; 4] {
        let n = 4001;
        let mut out = [0.0f64; 4];
        for i in 0..n {
            let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            for (k, slot) in out.iter_mut().enumerate() {
                *slot = slot.max(self.derivative(x, k).abs());
            }
        }
        out
    }

    pub fn inf_on(&self, lo: f64, hi: f64) -> f64 {
        let n = 4001;
        (0..n)
            .map(|i| self.value(lo + (hi - lo) * i as f64 / (n - 1) as f64))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_constant(&self) -> bool {
        match *self {
            Profile::Const(_) => true,
            Profile::Linear { c1, .. } => c1 == 0.0,
            Profile::Tanh { amp, .. } | Profile::Sin { amp, .. } | Profile::Gauss { amp, .. } => {
                amp == 0.0
            }
            Profile::DGauss { amp, .. } => amp == 0.0,
            Profile::Normal { .. } => false,
        }
    }
}

fn gauss_parts(x: f64, center: f64, width: f64) -> (f64, f64, f64) {
    let u = (x - center) / width;
    ((-0.5 * u * u).exp(), u, width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outer {
    Identity,
    Tanh,
    Sin,
    /// `exp(-u^2)`
    ExpNegSquare,
}

impl Outer {
    pub fn value(&self, u: f64) -> f64 {
        match self {
            Outer::Identity => u,
            Outer::Tanh => u.tanh(),
            Outer::Sin => u.sin(),
            Outer::ExpNegSquare => (-u * u).exp(),
        }
    }

    pub fn d1(&self, u: f64) -> f64 {
        match self {
            Outer::Identity => 1.0,
            Outer::Tanh => 1.0 - u.tanh().powi(2),
            Outer::Sin => u.cos(),
            Outer::ExpNegSquare => -2.0 * u * (-u * u).exp(),
        }
    }

    pub fn d2(&self, u: f64) -> f64 {
        match self {
            Outer::Identity => 0.0,
            Outer::Tanh => {
                let t = u.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Outer::Sin => -u.sin(),
            Outer::ExpNegSquare => (4.0 * u * u - 2.0) * (-u * u).exp(),
        }
    }

    /// `(sup |g|, sup |g'|, sup |g''|)`; `None` for unbounded maps.
    pub fn sup_bounds(&self) -> Option<[f64; 3]> {
        match self {
            Outer::Identity => None,
            Outer::Tanh => Some([1.0, 1.0, 4.0 / (3.0 * 3f64.sqrt())]),
            Outer::Sin => Some([1.0, 1.0, 1.0]),
            // |2u e^{-u^2}| peaks at u^2 = 1/2; |(4u^2-2)e^{-u^2}| peaks at 0
            Outer::ExpNegSquare => Some([1.0, 2f64.sqrt() * (-0.5f64).exp(), 2.0]),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Outer::Identity)
    }
}

impl fmt::Display for Outer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outer::Identity => "identity",
            Outer::Tanh => "tanh",
            Outer::Sin => "sin",
            Outer::ExpNegSquare => "expnegsq",
        })
    }
}

impl FromStr for Outer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Outer::Identity),
            "tanh" => Ok(Outer::Tanh),
            "sin" => Ok(Outer::Sin),
            "expnegsq" | "exp-neg-square" => Ok(Outer::ExpNegSquare),
            other => Err(Error::Config(format!("unknown outer map '{other}'"))),
        }
    }
}

/// Split `name(a, b, c)` into the name and numeric arguments.
pub(crate) fn parse_call(s: &str) -> Result<(String, Vec<f64>)> {
    let s = s.trim();
    let open = s.find('(').ok_or_else(|| Error::Config(format!("expected name(args), got '{s}'")))?;
    if !s.ends_with(')') {
        return Err(Error::Config(format!("missing ')' in '{s}'")));
    }
    let name = s[..open].trim().to_ascii_lowercase();
    let inner = &s[open + 1..s.len() - 1];
    let args = if inner.trim().is_empty() {
        Vec::new()
    } else {
        inner
            .split(',')
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number '{}' in '{s}'", a.trim())))
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok((name, args))
}

pub(crate) fn expect_args(name: &str, args: &[f64], n: usize) -> Result<()> {
    if args.len() == n {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} takes {n} arguments, got {}", args.len())))
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, a) = parse_call(s)?;
        let p = match name.as_str() {
            "const" => {
                expect_args(&name, &a, 1)?;
                Profile::Const(a[0])
            }
            "linear" => {
                expect_args(&name, &a, 2)?;
                Profile::Linear { c0: a[0], c1: a[1] }
            }
            "tanh" => {
                expect_args(&name, &a, 3)?;
                Profile::Tanh { base: a[0], amp: a[1], width: a[2] }
            }
            "sin" => {
                expect_args(&name, &a, 4)?;
                Profile::Sin { base: a[0], amp: a[1], freq: a[2], phase: a[3] }
            }
            "gauss" => {
                expect_args(&name, &a, 4)?;
                Profile::Gauss { base: a[0], amp: a[1], center: a[2], width: a[3] }
            }
            "dgauss" => {
                expect_args(&name, &a, 3)?;
                Profile::DGauss { amp: a[0], center: a[1], width: a[2] }
            }
            "normal" | "gaussian" => {
                expect_args(&name, &a, 2)?;
                Profile::Normal { mean: a[0], std: a[1] }
            }
            other => return Err(Error::Config(format!("unknown profile '{other}'"))),
        };
        let widths_ok = match p {
            Profile::Tanh { width, .. }
            | Profile::Gauss { width, .. }
            | Profile::DGauss { width, .. } => width > 0.0,
            Profile::Normal { std, .. } => std > 0.0,
            _ => true,
        };
        if !widths_ok {
            return Err(Error::Config(format!("width must be positive in '{s}'")));
        }
        Ok(p)
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Profile::Const(c) => write!(f, "const({c})"),
            Profile::Linear { c0, c1 } => write!(f, "linear({c0},{c1})"),
            Profile::Tanh { base, amp, width } => write!(f, "tanh({base},{amp},{width})"),
            Profile::Sin { base, amp, freq, phase } => {
                write!(f, "sin({base},{amp},{freq},{phase})")
            }
            Profile::Gauss { base, amp, center, width } => {
                write!(f, "gauss({base},{amp},{center},{width})")
            }
            Profile::DGauss { amp, center, width } => write!(f, "dgauss({amp},{center},{width})"),
            Profile::Normal { mean, std } => write!(f, "normal({mean},{std})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn profile_derivatives_match_finite_differences() {
        let profiles: Vec<Profile> = [
            "const(2)",
            "linear(1,-3)",
            "tanh(0.5,1.2,0.8)",
            "sin(0,0.7,1.3,0.4)",
            "gauss(0.1,2,1,0.9)",
            "dgauss(1.5,-0.3,0.7)",
            "normal(0.2,0.5)",
        ]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
        for p in profiles {
            for &x in &[-1.7, -0.2, 0.0, 0.45, 1.9] {
                for k in 0..3 {
                    let fd = central(|y| p.derivative(y, k), x);
                    let exact = p.derivative(x, k + 1);
                    assert!(
                        (fd - exact).abs() < 1e-6 * (1.0 + exact.abs()),
                        "{p} k={k} x={x}: {fd} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn outer_derivatives_match_finite_differences() {
        for o in [Outer::Identity, Outer::Tanh, Outer::Sin, Outer::ExpNegSquare] {
            for &u in &[-1.3, -0.1, 0.0, 0.7, 2.2] {
                assert!((central(|v| o.value(v), u) - o.d1(u)).abs() < 1e-8);
                assert!((central(|v| o.d1(v), u) - o.d2(u)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn outer_bounds_hold_on_samples() {
        for o in [Outer::Tanh, Outer::Sin, Outer::ExpNegSquare] {
            let [b0, b1, b2] = o.sup_bounds().unwrap();
            for i in 0..20001 {
                let u = -10.0 + 20.0 * i as f64 / 20000.0;
                assert!(o.value(u).abs() <= b0 + 1e-12);
                assert!(o.d1(u).abs() <= b1 + 1e-12);
                assert!(o.d2(u).abs() <= b2 + 1e-12);
            }
        }
        assert!(Outer::Identity.sup_bounds().is_none());
    }

    #[test]
    fn profile_text_round_trip() {
        for s in ["tanh(0,1,1)", "gauss(0,2,1,0.5)", "normal(-1,0.25)", "dgauss(1,0,0.7)"] {
            let p: Profile = s.parse().unwrap();
            assert_eq!(p.to_string().parse::<Profile>().unwrap(), p);
        }
        assert!("gauss(1,2)".parse::<Profile>().is_err());
        assert!("normal(0,-1)".parse::<Profile>().is_err());
        assert!("wiggle(1)".parse::<Profile>().is_err());
        assert!("tanh 1,2,3".parse::<Profile>().is_err());
    }
}
