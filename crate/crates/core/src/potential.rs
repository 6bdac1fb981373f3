//! Flory-Huggins logarithmic free energy, its derivative, and the C^2
//! regularized family used when the order parameter may leave [-1, 1].
//!
//! The energy splits as F = F1 + F2 with a concave quadratic part
//! F1(s) = theta0/2 (1 - s^2) and a convex logarithmic part
//! F2(s) = theta/2 [(1-s) ln((1-s)/2) + (1+s) ln((1+s)/2)].
//! The regularization replaces F2 outside [-1+delta, 1-delta] by its
//! second-order Taylor polynomial about the seam, which keeps the result
//! C^2 on all of R and convex.

use crate::error::{Error, Result};

/// Argument clamp used by the solvers when evaluating the singular
/// potential; discrete overshoots must not overflow the logarithm.
pub const SINGULAR_CLAMP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PotentialMode {
    Singular,
    Regularized,
}

#[derive(Clone, Copy, Debug)]
pub struct PotentialParams {
    pub theta: f64,
    pub theta0: f64,
    pub lambda: f64,
    pub mu: f64,
    pub delta: f64,
}

impl PotentialParams {
    pub fn new(theta: f64, theta0: f64, lambda: f64, mu: f64, delta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < theta0) {
            return Err(Error::ParamError(format!(
                "temperatures must satisfy 0 < theta < theta0 (got theta = {theta}, theta0 = {theta0})"
            )));
        }
        // lambda = 0 switches the capillary coupling off (degenerate studies).
        if lambda < 0.0 {
            return Err(Error::ParamError(format!("lambda must be nonnegative (got {lambda})")));
        }
        if !(mu > 0.0) {
            return Err(Error::ParamError(format!("mu must be positive (got {mu})")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::ParamError(format!(
                "regularization width delta must lie in (0, 1) (got {delta})"
            )));
        }
        Ok(PotentialParams {
            theta,
            theta0,
            lambda,
            mu,
            delta,
        })
    }
}

/// x ln x with the limit value 0 at x = 0.
fn xlnx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Convex logarithmic part F2 on [-1, 1].
pub fn f2_energy(s: f64, p: &PotentialParams) -> f64 {
    0.5 * p.theta * (xlnx(1.0 - s) + (1.0 - s) * (0.5f64).ln() + xlnx(1.0 + s) + (1.0 + s) * (0.5f64).ln())
}

/// F2' on (-1, 1).
pub fn f2_prime(s: f64, p: &PotentialParams) -> f64 {
    0.5 * p.theta * ((1.0 + s) / (1.0 - s)).ln()
}

/// F2'' on (-1, 1).
pub fn f2_double_prime(s: f64, p: &PotentialParams) -> f64 {
    p.theta / (1.0 - s * s)
}

/// Free energy density F(s) on [-1, 1]; the 0 ln 0 terms at the endpoints
/// take their limit value 0.
pub fn big_f(s: f64, p: &PotentialParams) -> Result<f64> {
    if s.abs() > 1.0 {
        return Err(Error::DomainError(s));
    }
    Ok(0.5 * p.theta0 * (1.0 - s * s) + f2_energy(s, p))
}

/// f = F' on the open interval (-1, 1).
pub fn f(s: f64, p: &PotentialParams) -> Result<f64> {
    if s.abs() >= 1.0 {
        return Err(Error::DomainError(s));
    }
    Ok(-p.theta0 * s + f2_prime(s, p))
}

/// f' = F'' on (-1, 1).
pub fn f_prime(s: f64, p: &PotentialParams) -> Result<f64> {
    if s.abs() >= 1.0 {
        return Err(Error::DomainError(s));
    }
    Ok(-p.theta0 + f2_double_prime(s, p))
}

/// Regularized convex part: quadratic Taylor continuation beyond the seams.
pub fn f2_delta_energy(s: f64, p: &PotentialParams) -> f64 {
    let seam = 1.0 - p.delta;
    if s.abs() <= seam {
        f2_energy(s, p)
    } else {
        let a = seam.copysign(s);
        let d = s - a;
        f2_energy(a, p) + f2_prime(a, p) * d + 0.5 * f2_double_prime(a, p) * d * d
    }
}

pub fn f2_delta_prime(s: f64, p: &PotentialParams) -> f64 {
    let seam = 1.0 - p.delta;
    if s.abs() <= seam {
        f2_prime(s, p)
    } else {
        let a = seam.copysign(s);
        f2_prime(a, p) + f2_double_prime(a, p) * (s - a)
    }
}

pub fn f2_delta_double_prime(s: f64, p: &PotentialParams) -> f64 {
    let seam = 1.0 - p.delta;
    f2_double_prime(s.clamp(-seam, seam), p)
}

/// Regularized energy F_delta, total on R.
pub fn big_f_delta(s: f64, p: &PotentialParams) -> f64 {
    0.5 * p.theta0 * (1.0 - s * s) + f2_delta_energy(s, p)
}

/// f_delta = F_delta', total on R.
pub fn f_delta(s: f64, p: &PotentialParams) -> f64 {
    -p.theta0 * s + f2_delta_prime(s, p)
}

/// f_delta' = F_delta'', total on R.
pub fn f_delta_prime(s: f64, p: &PotentialParams) -> f64 {
    -p.theta0 + f2_delta_double_prime(s, p)
}

/// Mode-aware view of the split potential used by the time steppers.
///
/// In singular mode arguments are clamped to 1 - SINGULAR_CLAMP in
/// magnitude before the logarithm is evaluated.
#[derive(Clone, Copy, Debug)]
pub struct SplitPotential {
    pub params: PotentialParams,
    pub mode: PotentialMode,
}

impl SplitPotential {
    pub fn new(params: PotentialParams, mode: PotentialMode) -> Self {
        SplitPotential { params, mode }
    }

    fn clamp(&self, s: f64) -> f64 {
        let lim = 1.0 - SINGULAR_CLAMP;
        s.clamp(-lim, lim)
    }

    /// Derivative of the convex part (implicit in the time scheme).
    pub fn convex_prime(&self, s: f64) -> f64 {
        match self.mode {
            PotentialMode::Singular => f2_prime(self.clamp(s), &self.params),
            PotentialMode::Regularized => f2_delta_prime(s, &self.params),
        }
    }

    /// Second derivative of the convex part (Newton diagonal).
    pub fn convex_double_prime(&self, s: f64) -> f64 {
        match self.mode {
            PotentialMode::Singular => f2_double_prime(self.clamp(s), &self.params),
            PotentialMode::Regularized => f2_delta_double_prime(s, &self.params),
        }
    }

    /// Full derivative f (or f_delta) for diagnostics.
    pub fn full_prime(&self, s: f64) -> f64 {
        -self.params.theta0 * s + self.convex_prime(s)
    }

    /// Full energy density used in the ledger.
    pub fn energy(&self, s: f64) -> f64 {
        match self.mode {
            PotentialMode::Singular => {
                let s = self.clamp(s);
                0.5 * self.params.theta0 * (1.0 - s * s) + f2_energy(s, &self.params)
            }
            PotentialMode::Regularized => big_f_delta(s, &self.params),
        }
    }
}

/// Numerical check of the structural assumptions on F over dense samples.
#[derive(Clone, Debug)]
pub struct AssumptionReport {
    /// Minimum of F over the sampled interval before normalization.
    pub f_min_raw: f64,
    /// Additive constant making min(F + shift) >= 0.
    pub shift: f64,
    /// Growth exponent used in the |f(x)| <= K1 |x|^p + K2 fit.
    pub a2_p: f64,
    pub a2_k1: f64,
    pub a2_k2: f64,
    pub a3_gamma: f64,
    pub a3_k3: f64,
    pub a3_k4: f64,
    /// Sampled infimum of f'.
    pub a4_inf_f_prime: f64,
    pub a4_k5: f64,
    /// Whether K5 < 1/4 as the strong form of the assumption asks.
    pub a4_k5_lt_quarter: bool,
    /// Lower bound -alpha of F_delta'' over [-3, 3].
    pub fdelta_lower: f64,
    /// Upper bound L of F_delta'' over [-3, 3]; attained at the seams.
    pub fdelta_upper: f64,
}

impl std::fmt::Display for AssumptionReport {
    fn fmt(&self, w: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(w, "assumption report")?;
        writeln!(
            w,
            "  A1  min F (raw) = {:+.6e}, additive shift = {:.6e}, min(F + shift) >= 0: ok",
            self.f_min_raw, self.shift
        )?;
        writeln!(
            w,
            "  A2  |f(x)| <= K1 |x|^p + K2 with p = {}, K1 = {:.6e}, K2 = {:.6e}",
            self.a2_p, self.a2_k1, self.a2_k2
        )?;
        writeln!(
            w,
            "  A3  (x - gamma) f(x) >= K3 F(x) - K4 at gamma = {:+.4}, K3 = {:.3}, K4 = {:.6e}",
            self.a3_gamma, self.a3_k3, self.a3_k4
        )?;
        writeln!(
            w,
            "  A4  inf f' = {:+.6e}, K5 = {:.6e} (K5 < 1/4: {})",
            self.a4_inf_f_prime,
            self.a4_k5,
            if self.a4_k5_lt_quarter { "yes" } else { "no; reported, not enforced" }
        )?;
        writeln!(
            w,
            "  F_delta''  in [{:+.6e}, {:+.6e}] on [-3, 3] (upper bound attained at the seams)",
            self.fdelta_lower, self.fdelta_upper
        )
    }
}

/// Sample-based verification of A1-A4 for f on (-1, 1) and of the
/// curvature window for f_delta on [-3, 3]. `gamma` is the mean of the
/// initial data the A3 inequality is anchored at.
pub fn verify_assumptions(p: &PotentialParams, gamma: f64) -> Result<AssumptionReport> {
    let n = 4001;
    let edge = 1e-4;
    let samples: Vec<f64> = (0..n)
        .map(|k| -1.0 + edge + (2.0 - 2.0 * edge) * k as f64 / (n - 1) as f64)
        .collect();

    let f_min_raw = samples
        .iter()
        .map(|&s| big_f(s, p).unwrap())
        .fold(f64::INFINITY, f64::min);
    let shift = (-f_min_raw).max(0.0);

    // A2 fit with p = 1: bound the bulk by K2 and the growth by K1.
    let a2_p = 1.0;
    let a2_k2 = samples
        .iter()
        .filter(|s| s.abs() <= 0.5)
        .map(|&s| f(s, p).unwrap().abs())
        .fold(0.0, f64::max)
        * 1.000001
        + 1e-12;
    let a2_k1 = samples
        .iter()
        .filter(|s| s.abs() > 0.5)
        .map(|&s| (f(s, p).unwrap().abs() - a2_k2).max(0.0) / s.abs().powf(a2_p))
        .fold(0.0, f64::max)
        * 1.000001
        + 1e-12;
    for &s in &samples {
        if f(s, p).unwrap().abs() > a2_k1 * s.abs().powf(a2_p) + a2_k2 + 1e-9 {
            return Err(Error::AssumptionViolated {
                predicate: "A2 growth bound",
                witness: s,
            });
        }
    }

    // A3 with K3 = 1: take the smallest K4 >= 0 that makes the inequality
    // hold on the sample, then re-check.
    let a3_k3 = 1.0;
    let a3_k4 = samples
        .iter()
        .map(|&s| a3_k3 * (big_f(s, p).unwrap() + shift) - (s - gamma) * f(s, p).unwrap())
        .fold(0.0, f64::max)
        * 1.000001
        + 1e-12;
    for &s in &samples {
        let lhs = (s - gamma) * f(s, p).unwrap();
        let rhs = a3_k3 * (big_f(s, p).unwrap() + shift) - a3_k4;
        if lhs < rhs - 1e-9 {
            return Err(Error::AssumptionViolated {
                predicate: "A3 coercivity",
                witness: s,
            });
        }
    }

    let a4_inf_f_prime = samples
        .iter()
        .map(|&s| f_prime(s, p).unwrap())
        .fold(f64::INFINITY, f64::min);
    let a4_k5 = (-a4_inf_f_prime).max(0.0);

    let m = 4001;
    let fdelta_samples: Vec<f64> = (0..m).map(|k| -3.0 + 6.0 * k as f64 / (m - 1) as f64).collect();
    let fdelta_lower = fdelta_samples
        .iter()
        .map(|&s| f_delta_prime(s, p))
        .fold(f64::INFINITY, f64::min);
    let fdelta_upper = fdelta_samples
        .iter()
        .map(|&s| f_delta_prime(s, p))
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(AssumptionReport {
        f_min_raw,
        shift,
        a2_p,
        a2_k1,
        a2_k2,
        a3_gamma: gamma,
        a3_k3,
        a3_k4,
        a4_inf_f_prime,
        a4_k5,
        a4_k5_lt_quarter: a4_k5 < 0.25,
        fdelta_lower,
        fdelta_upper,
    })
}
