//! Aggregation operators: combine the pseudo-densities of `n` pills at a
//! point into one value, with analytic partials `dA/drho_m` and
//! `d2A/drho_a drho_b`.
//!
//! Five families with different overlap behavior: plain sum (additive, may
//! exceed 1), p-norm and softmax (smooth maximum bias), sum-softcap (smooth
//! saturation above a threshold) and a cosine-weighted shaping of the raw
//! sum that rewards the first unit of mass and damps further accumulation.
//! Hard max/min and post-hoc clipping are deliberately not offered; their
//! kinks break the second-order chain.

use crate::{Error, Result};

/// Clamp floor for p-norm partials; the `rho^{p-2}` power is singular at
/// zero for p < 2 and ill-scaled right above it.
const PNORM_RHO_FLOOR: f64 = 1e-12;

/// Aggregation operator family and parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregatorSpec {
    Sum,
    PNorm { p: f64 },
    Softmax { beta: f64 },
    SumSoftcap { tau: f64, beta_c: f64 },
    Cosine { n: f64 },
}

/// Operator value with first and second partials in density space.
#[derive(Debug, Clone)]
pub struct AggPartials {
    pub value: f64,
    /// `dA/drho_m`, length n.
    pub d1: Vec<f64>,
    /// `d2A/drho_a drho_b`, row-major n x n, symmetric.
    pub d2: Vec<f64>,
}

impl AggregatorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AggregatorSpec::Sum => Ok(()),
            AggregatorSpec::PNorm { p } => {
                if p > 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!("p-norm exponent {p} must be > 1")))
                }
            }
            AggregatorSpec::Softmax { beta } => {
                if beta > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!("softmax beta {beta} must be > 0")))
                }
            }
            AggregatorSpec::SumSoftcap { tau, beta_c } => {
                if tau > 0.0 && beta_c > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!(
                        "sum-softcap needs tau > 0 and beta_c > 0, got tau={tau}, beta_c={beta_c}"
                    )))
                }
            }
            AggregatorSpec::Cosine { n } => {
                if n > 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!("cosine shaping N = {n} must be > 1")))
                }
            }
        }
    }

    /// Whether the operator introduces cross-feature second-order coupling.
    /// The linear sum is the only family without it.
    pub fn couples_features(&self) -> bool {
        !matches!(self, AggregatorSpec::Sum)
    }
}

fn check_nonempty(rho: &[f64]) -> Result<()> {
    if rho.is_empty() {
        return Err(Error::Contract("aggregation over an empty density vector".into()));
    }
    Ok(())
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn cap_value(tau: f64, beta_c: f64, s: f64) -> f64 {
    tau - softplus(beta_c * (tau - s)) / beta_c
}

/// `cap' = 1 / (1 + e^{beta_c (s - tau)})`, a falling logistic in (0, 1):
/// near 1 below the threshold, decaying to 0 as the cap saturates.
fn cap_d1(tau: f64, beta_c: f64, s: f64) -> f64 {
    let t = beta_c * (s - tau);
    if t > 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

fn cosine_value(n: f64, s: f64) -> f64 {
    let a = 1.0 - (n - 1.0) * (n - 1.0) / 2.0;
    if s <= 1.0 {
        (std::f64::consts::FRAC_PI_2 * s).sin()
    } else if s < n {
        a + (1.0 - a) * (1.0 + (std::f64::consts::PI * (s - 1.0) / (n - 1.0)).cos()) / 2.0
    } else {
        a
    }
}

fn cosine_d12(n: f64, s: f64) -> (f64, f64) {
    let a = 1.0 - (n - 1.0) * (n - 1.0) / 2.0;
    let half_pi = std::f64::consts::FRAC_PI_2;
    if s <= 1.0 {
        (
            half_pi * (half_pi * s).cos(),
            -half_pi * half_pi * (half_pi * s).sin(),
        )
    } else if s < n {
        let w = std::f64::consts::PI / (n - 1.0);
        let arg = w * (s - 1.0);
        (
            -(1.0 - a) * w * arg.sin() / 2.0,
            -(1.0 - a) * w * w * arg.cos() / 2.0,
        )
    } else {
        (0.0, 0.0)
    }
}

/// Aggregated value for a density vector `rho` with entries in `[0, 1]`.
pub fn aggregate_value(spec: &AggregatorSpec, rho: &[f64]) -> Result<f64> {
    check_nonempty(rho)?;
    Ok(match *spec {
        AggregatorSpec::Sum => rho.iter().sum(),
        AggregatorSpec::PNorm { p } => {
            // Factored form keeps rho^p away from underflow even for the
            // near-maximum exponents used in limit tests.
            let m = rho.iter().fold(0.0_f64, |a, &v| a.max(v));
            if m == 0.0 {
                0.0
            } else {
                let t: f64 = rho.iter().map(|&v| (v / m).powf(p)).sum();
                m * t.powf(1.0 / p)
            }
        }
        AggregatorSpec::Softmax { beta } => {
            let m = rho.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let s: f64 = rho.iter().map(|&v| (beta * (v - m)).exp()).sum();
            m + s.ln() / beta
        }
        AggregatorSpec::SumSoftcap { tau, beta_c } => {
            cap_value(tau, beta_c, rho.iter().sum())
        }
        AggregatorSpec::Cosine { n } => cosine_value(n, rho.iter().sum()),
    })
}

/// Aggregated value together with its first and second partials in density
/// space. The chain into design parameters happens at the quadrature level.
pub fn aggregate_partials(spec: &AggregatorSpec, rho: &[f64]) -> Result<AggPartials> {
    check_nonempty(rho)?;
    let n = rho.len();
    let value = aggregate_value(spec, rho)?;
    let mut out = AggPartials {
        value,
        d1: vec![0.0; n],
        d2: vec![0.0; n * n],
    };
    match *spec {
        AggregatorSpec::Sum => {
            out.d1.fill(1.0);
        }
        AggregatorSpec::PNorm { p } => {
            // Work on clamped, max-normalized densities u = rho/m in (0, 1].
            let clamped: Vec<f64> = rho.iter().map(|&v| v.clamp(PNORM_RHO_FLOOR, 1.0)).collect();
            let m = clamped.iter().fold(0.0_f64, |a, &v| a.max(v));
            let u: Vec<f64> = clamped.iter().map(|&v| v / m).collect();
            let t: f64 = u.iter().map(|&v| v.powf(p)).sum();
            let t1 = t.powf(1.0 / p - 1.0);
            let t2 = t.powf(1.0 / p - 2.0);
            for a in 0..n {
                out.d1[a] = t1 * u[a].powf(p - 1.0);
            }
            for a in 0..n {
                for b in a..n {
                    let mut h = -(p - 1.0) / m * t2 * u[a].powf(p - 1.0) * u[b].powf(p - 1.0);
                    if a == b {
                        h += (p - 1.0) / m * t1 * u[a].powf(p - 2.0);
                    }
                    out.d2[a * n + b] = h;
                    out.d2[b * n + a] = h;
                }
            }
        }
        AggregatorSpec::Softmax { beta } => {
            let m = rho.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mut w: Vec<f64> = rho.iter().map(|&v| (beta * (v - m)).exp()).collect();
            let s: f64 = w.iter().sum();
            for v in &mut w {
                *v /= s;
            }
            out.d1.copy_from_slice(&w);
            for a in 0..n {
                for b in a..n {
                    let mut h = -beta * w[a] * w[b];
                    if a == b {
                        h += beta * w[a];
                    }
                    out.d2[a * n + b] = h;
                    out.d2[b * n + a] = h;
                }
            }
        }
        AggregatorSpec::SumSoftcap { tau, beta_c } => {
            let s: f64 = rho.iter().sum();
            let c1 = cap_d1(tau, beta_c, s);
            let c2 = -beta_c * c1 * (1.0 - c1);
            out.d1.fill(c1);
            out.d2.fill(c2);
        }
        AggregatorSpec::Cosine { n: ncap } => {
            let s: f64 = rho.iter().sum();
            let (a1, a2) = cosine_d12(ncap, s);
            out.d1.fill(a1);
            out.d2.fill(a2);
        }
    }
    Ok(out)
}
