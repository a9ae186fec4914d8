//! Concave benefit functions, their maximizer map and conjugate.
//!
//! A benefit function `f` maps consumption (content units) to benefit. The
//! model requires `f(0) = 0`, `f' > 0`, `f'' < 0`, a finite right derivative
//! at zero and `f'(c) -> 0` as `c -> inf`. Under these assumptions every rate
//! `alpha` in `(0, f'(0)]` has a unique `x` with `f'(x) = alpha`, which is the
//! maximizer of `f(x) - alpha x` over `x >= 0`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Absolute tolerance on the root of `f'(x) = alpha`.
pub const ROOT_TOL: f64 = 1e-10;

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A concave benefit function given as a (value, derivative) evaluator pair.
#[derive(Clone)]
pub struct BenefitSpec {
    name: String,
    eval: RealFn,
    deriv: RealFn,
    deriv_at_zero: f64,
}

impl fmt::Debug for BenefitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BenefitSpec")
            .field("name", &self.name)
            .field("deriv_at_zero", &self.deriv_at_zero)
            .finish()
    }
}

impl BenefitSpec {
    /// Builds a benefit from evaluator closures and checks the model
    /// assumptions on a sample of points.
    pub fn new<F, D>(name: impl Into<String>, eval: F, deriv: D) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let deriv_at_zero = deriv(0.0);
        let spec = BenefitSpec {
            name: name.into(),
            eval: Arc::new(eval),
            deriv: Arc::new(deriv),
            deriv_at_zero,
        };
        spec.check_assumptions()?;
        Ok(spec)
    }

    fn check_assumptions(&self) -> Result<()> {
        let d0 = self.deriv_at_zero;
        if !(d0.is_finite() && d0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "f'(0) must be finite and positive, got {d0}"
            )));
        }
        let f0 = self.eval(0.0);
        if f0.abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("f(0) must be 0, got {f0}")));
        }
        let probes = [0.0, 1e-3, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0, 1e3, 1e4];
        for pair in probes.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (da, db) = (self.deriv(a), self.deriv(b));
            if !(db > 0.0 && db < da) {
                return Err(Error::InvalidParameter(format!(
                    "f' must be positive and strictly decreasing; f'({a}) = {da}, f'({b}) = {db}"
                )));
            }
            let mid = self.eval(0.5 * (a + b));
            let chord = 0.5 * (self.eval(a) + self.eval(b));
            if mid < chord - 1e-12 * (1.0 + chord.abs()) {
                return Err(Error::InvalidParameter(format!(
                    "f is not concave on [{a}, {b}]"
                )));
            }
        }
        if self.deriv(1e9) >= 1e-6 * d0 {
            return Err(Error::InvalidParameter(
                "f'(c) must vanish as c grows (f'(1e9) >= 1e-6 f'(0))".into(),
            ));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, c: f64) -> f64 {
        (self.eval)(c)
    }

    pub fn deriv(&self, c: f64) -> f64 {
        (self.deriv)(c)
    }

    /// Right derivative `f'(0)`.
    pub fn deriv_at_zero(&self) -> f64 {
        self.deriv_at_zero
    }

    /// See [`maximizer`].
    pub fn maximizer(&self, alpha: f64) -> Result<f64> {
        maximizer(self, alpha)
    }

    /// See [`conjugate`].
    pub fn conjugate(&self, alpha: f64) -> Result<f64> {
        conjugate(self, alpha)
    }
}

/// `f(c) = ln(1 + c)`.
pub fn log_benefit() -> BenefitSpec {
    BenefitSpec {
        name: "log".into(),
        eval: Arc::new(f64::ln_1p),
        deriv: Arc::new(|c: f64| 1.0 / (1.0 + c)),
        deriv_at_zero: 1.0,
    }
}

/// Parameters of the expected number of distinct files benefit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistinctFilesParams {
    /// Benefit per distinct file.
    pub a: f64,
    /// Number of files that can be produced.
    pub m: u64,
}

/// Benefit proportional to the expected number of distinct files among `c`
/// uniform draws with replacement from `M` files:
/// `f(c) = a M [1 - (1 - 1/M)^c]`.
pub fn distinct_files_benefit(p: DistinctFilesParams) -> Result<BenefitSpec> {
    if !(p.a.is_finite() && p.a > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "distinct-files benefit needs a > 0, got {}",
            p.a
        )));
    }
    if p.m < 2 {
        return Err(Error::InvalidParameter(format!(
            "distinct-files benefit needs M >= 2 (f' is undefined at M = 1), got {}",
            p.m
        )));
    }
    let scale = p.a * p.m as f64;
    // ln(1 - 1/M), negative
    let ln_keep = (-1.0 / p.m as f64).ln_1p();
    Ok(BenefitSpec {
        name: format!("distinct_files(a={}, M={})", p.a, p.m),
        eval: Arc::new(move |c: f64| -scale * (c * ln_keep).exp_m1()),
        deriv: Arc::new(move |c: f64| -scale * ln_keep * (c * ln_keep).exp()),
        deriv_at_zero: -scale * ln_keep,
    })
}

/// The unique `x >= 0` with `f'(x) = alpha`, or 0 when `alpha >= f'(0)`.
///
/// In both cases the result maximizes `f(x) - alpha x` over `x >= 0`. The root
/// is bracketed by doubling from 1 and refined by bisection to [`ROOT_TOL`].
pub fn maximizer(f: &BenefitSpec, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::NonPositiveRate(alpha));
    }
    if alpha >= f.deriv_at_zero() {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    while f.deriv(hi) >= alpha {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 1100 || !hi.is_finite() {
            return Err(Error::NoBracket(alpha));
        }
    }
    // f'(lo) >= alpha > f'(hi)
    for _ in 0..200 {
        if hi - lo <= ROOT_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f.deriv(mid) >= alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `f*(alpha) = sup_{x >= 0} f(x) - alpha x`.
pub fn conjugate(f: &BenefitSpec, alpha: f64) -> Result<f64> {
    let x = maximizer(f, alpha)?;
    Ok(f.eval(x) - alpha * x)
}
