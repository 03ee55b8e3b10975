//! Transition functions: map signed distance to pseudo-density in `[0, 1]`
//! with analytic first and second derivatives.
//!
//! All families share the clipping rule: density is exactly 1 on the interior
//! plateau and exactly 0 on the exterior plateau, with an open transition
//! zone in between where a smooth core mapping interpolates. The tanh core
//! keeps small residual slopes at the clipping points; the polynomial
//! smoothstep of class `C^k` vanishes there together with its first `k`
//! derivatives. The asymmetric variant stretches only the exterior flank,
//! trading `C^2` regularity at the medial axis for sensitivity reach into
//! the void.

use crate::geometry::{self, PillParams, Point2, PILL_PARAMS};
use crate::{Error, Result};

/// Maximum supported smoothstep regularity order.
pub const MAX_SMOOTHSTEP_K: usize = 10;

/// Transition family selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransitionKind {
    /// `1/2 (1 - tanh(beta d / delta))`, clipped outside `[-delta, delta]`.
    Tanh { beta: f64 },
    /// Minimal-degree polynomial of class `C^k`, exact plateaus.
    Smoothstep { k: usize },
    /// Smoothstep basis with interior half-width `h = delta/2` and the
    /// exterior flank stretched by `ext`.
    Asymmetric { k: usize, ext: f64 },
}

/// A transition family together with its half-width and the cached
/// polynomial coefficients (computed once at construction).
#[derive(Debug, Clone)]
pub struct TransitionSpec {
    kind: TransitionKind,
    delta: f64,
    poly: Vec<f64>,
    dpoly: Vec<f64>,
    ddpoly: Vec<f64>,
}

/// Pointwise transition value with its first two derivatives in the
/// distance variable.
#[derive(Debug, Clone, Copy)]
pub struct TransitionJet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Pseudo-density of a single pill at a point: value plus gradient and
/// Hessian over the five design parameters.
#[derive(Debug, Clone)]
pub struct DensityJet {
    pub value: f64,
    pub grad: [f64; PILL_PARAMS],
    pub hess: [[f64; PILL_PARAMS]; PILL_PARAMS],
    pub singular: bool,
}

impl DensityJet {
    fn plateau(value: f64) -> Self {
        DensityJet {
            value,
            grad: [0.0; PILL_PARAMS],
            hess: [[0.0; PILL_PARAMS]; PILL_PARAMS],
            singular: false,
        }
    }
}

fn binomial(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    for i in 0..k {
        num *= (n - i) as u128;
        den *= (i + 1) as u128;
    }
    (num / den) as f64
}

/// Coefficients of the minimal-degree polynomial of degree `2k + 1` on
/// `[0, 1]` with `p(0) = 1`, `p(1) = 0` and vanishing derivatives of order
/// `1..=k` at both endpoints. Returned in monomial order, index = power.
///
/// The flank coefficients are signed binomial products; together with the
/// constant term the k = 2 case reads `p(t) = -6 t^5 + 15 t^4 - 10 t^3 + 1`.
pub fn smoothstep_coeffs(k: usize) -> Result<Vec<f64>> {
    if k > MAX_SMOOTHSTEP_K {
        return Err(Error::InvalidConfig(format!(
            "smoothstep order k = {k} exceeds supported maximum {MAX_SMOOTHSTEP_K}"
        )));
    }
    let mut c = vec![0.0; 2 * k + 2];
    c[0] = 1.0;
    let (ku, deg) = (k as u64, 2 * k as u64 + 1);
    for m in 0..=ku {
        let sign = if m % 2 == 0 { -1.0 } else { 1.0 };
        c[(ku + 1 + m) as usize] = sign * binomial(ku + m, m) * binomial(deg, ku - m);
    }
    Ok(c)
}

fn poly_deriv(c: &[f64]) -> Vec<f64> {
    if c.len() <= 1 {
        return vec![0.0];
    }
    c.iter()
        .enumerate()
        .skip(1)
        .map(|(i, v)| v * i as f64)
        .collect()
}

fn horner(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * t + v)
}

impl TransitionSpec {
    pub fn new(kind: TransitionKind, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "transition half-width delta = {delta} must be > 0"
            )));
        }
        let poly = match kind {
            TransitionKind::Tanh { beta } => {
                if !(beta > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "tanh steepness beta = {beta} must be > 0"
                    )));
                }
                Vec::new()
            }
            TransitionKind::Smoothstep { k } => smoothstep_coeffs(k)?,
            TransitionKind::Asymmetric { k, ext } => {
                if ext < 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "asymmetric flank extension ext = {ext} must be >= 0"
                    )));
                }
                smoothstep_coeffs(k)?
            }
        };
        let dpoly = poly_deriv(&poly);
        let ddpoly = poly_deriv(&dpoly);
        Ok(TransitionSpec {
            kind,
            delta,
            poly,
            dpoly,
            ddpoly,
        })
    }

    /// Smoothstep of order `k = 3` with half-width `0.05`; the default used
    /// by all pipeline presets.
    pub fn default_smoothstep() -> Self {
        TransitionSpec::new(TransitionKind::Smoothstep { k: 3 }, 0.05).unwrap()
    }

    pub fn kind(&self) -> TransitionKind {
        self.kind
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Signed-distance interval `(lo, hi)` outside of which the density sits
    /// exactly on a plateau (1 below, 0 above).
    pub fn support(&self) -> (f64, f64) {
        match self.kind {
            TransitionKind::Tanh { .. } | TransitionKind::Smoothstep { .. } => {
                (-self.delta, self.delta)
            }
            TransitionKind::Asymmetric { ext, .. } => {
                let h = 0.5 * self.delta;
                (-h, h + ext)
            }
        }
    }

    /// Transition value and its first two distance derivatives at signed
    /// distance `d`. Total function: plateaus return exact `(1, 0, 0)` /
    /// `(0, 0, 0)`.
    pub fn eval(&self, d: f64) -> TransitionJet {
        let (lo, hi) = self.support();
        if d <= lo {
            return TransitionJet {
                value: 1.0,
                d1: 0.0,
                d2: 0.0,
            };
        }
        if d >= hi {
            return TransitionJet {
                value: 0.0,
                d1: 0.0,
                d2: 0.0,
            };
        }
        match self.kind {
            TransitionKind::Tanh { beta } => {
                let xi = beta * d / self.delta;
                let sech2 = {
                    let c = xi.cosh();
                    1.0 / (c * c)
                };
                let scale = beta / self.delta;
                TransitionJet {
                    value: 0.5 * (1.0 - xi.tanh()),
                    d1: -0.5 * scale * sech2,
                    d2: scale * scale * sech2 * xi.tanh(),
                }
            }
            TransitionKind::Smoothstep { .. } => {
                let w = 2.0 * self.delta;
                let t = (d + self.delta) / w;
                TransitionJet {
                    // Clamp shaves float noise at the band edges, where the
                    // polynomial can land a few ulp outside [0, 1].
                    value: horner(&self.poly, t).clamp(0.0, 1.0),
                    d1: horner(&self.dpoly, t) / w,
                    d2: horner(&self.ddpoly, t) / (w * w),
                }
            }
            TransitionKind::Asymmetric { ext, .. } => {
                // Interior half-width h = delta/2; the flank parameterization
                // runs the rising basis 1 - p from 1 (at -h) down to 0
                // (at h + ext), continuous at d = 0 with value 1/2.
                let h = 0.5 * self.delta;
                let half = if d <= 0.0 { h } else { h + ext };
                let t = (-d + half) / (2.0 * half);
                let dt = -1.0 / (2.0 * half);
                TransitionJet {
                    value: (1.0 - horner(&self.poly, t)).clamp(0.0, 1.0),
                    d1: -horner(&self.dpoly, t) * dt,
                    d2: -horner(&self.ddpoly, t) * dt * dt,
                }
            }
        }
    }
}

/// Pseudo-density value of one pill at `x`, using the plateau shortcut where
/// possible.
pub fn pseudo_density(spec: &TransitionSpec, pill: &PillParams, x: Point2) -> Result<f64> {
    let d = geometry::signed_distance(x, pill)?;
    let (lo, hi) = spec.support();
    if d <= lo {
        return Ok(1.0);
    }
    if d >= hi {
        return Ok(0.0);
    }
    Ok(spec.eval(d).value)
}

/// Full pseudo-density jet of one pill: chain of the transition derivatives
/// with the signed-distance jet. Sensitivities vanish identically outside
/// the transition zone.
pub fn pseudo_density_jet(
    spec: &TransitionSpec,
    pill: &PillParams,
    x: Point2,
) -> Result<DensityJet> {
    let d = geometry::signed_distance(x, pill)?;
    let (lo, hi) = spec.support();
    if d <= lo {
        return Ok(DensityJet::plateau(1.0));
    }
    if d >= hi {
        return Ok(DensityJet::plateau(0.0));
    }
    let djet = geometry::distance_jet(x, pill, true)?;
    let t = spec.eval(d);
    let mut out = DensityJet {
        value: t.value,
        grad: [0.0; PILL_PARAMS],
        hess: [[0.0; PILL_PARAMS]; PILL_PARAMS],
        singular: djet.singular,
    };
    for i in 0..PILL_PARAMS {
        out.grad[i] = t.d1 * djet.grad[i];
    }
    for i in 0..PILL_PARAMS {
        for k in i..PILL_PARAMS {
            let h = t.d2 * djet.grad[i] * djet.grad[k] + t.d1 * djet.hess[i][k];
            out.hess[i][k] = h;
            out.hess[k][i] = h;
        }
    }
    Ok(out)
}

/// Like [`pseudo_density_jet`] but computes value and gradient only.
pub fn pseudo_density_grad(
    spec: &TransitionSpec,
    pill: &PillParams,
    x: Point2,
) -> Result<(f64, [f64; PILL_PARAMS])> {
    let d = geometry::signed_distance(x, pill)?;
    let (lo, hi) = spec.support();
    if d <= lo {
        return Ok((1.0, [0.0; PILL_PARAMS]));
    }
    if d >= hi {
        return Ok((0.0, [0.0; PILL_PARAMS]));
    }
    let djet = geometry::distance_jet(x, pill, true)?;
    let t = spec.eval(d);
    let mut g = [0.0; PILL_PARAMS];
    for i in 0..PILL_PARAMS {
        g[i] = t.d1 * djet.grad[i];
    }
    Ok((t.value, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: TransitionKind, delta: f64) -> TransitionSpec {
        TransitionSpec::new(kind, delta).unwrap()
    }

    #[test]
    fn quintic_smoothstep_coefficients() {
        let c = smoothstep_coeffs(2).unwrap();
        assert_eq!(c, vec![1.0, 0.0, 0.0, -10.0, 15.0, -6.0]);
    }

    #[test]
    fn linear_ramp_for_k0() {
        // Two endpoint conditions only: solved by hand, p(t) = 1 - t.
        let c = smoothstep_coeffs(0).unwrap();
        assert_eq!(c, vec![1.0, -1.0]);
    }

    #[test]
    fn endpoint_conditions_all_orders() {
        for k in 0..=MAX_SMOOTHSTEP_K {
            let c = smoothstep_coeffs(k).unwrap();
            assert!((horner(&c, 0.0) - 1.0).abs() < 1e-12, "p(0) k={k}");
            assert!(horner(&c, 1.0).abs() < 1e-12, "p(1) k={k}");
        }
    }

    #[test]
    fn derivative_conditions_up_to_k5() {
        for k in 0..=5usize {
            let mut c = smoothstep_coeffs(k).unwrap();
            for j in 1..=k {
                c = poly_deriv(&c);
                assert!(horner(&c, 0.0).abs() < 1e-10, "p^({j})(0) k={k}");
                assert!(horner(&c, 1.0).abs() < 1e-10, "p^({j})(1) k={k}");
            }
        }
    }

    #[test]
    fn smoothstep_order_range() {
        assert!(smoothstep_coeffs(11).is_err());
        assert!(smoothstep_coeffs(10).is_ok());
    }

    #[test]
    fn interface_value_is_half() {
        let s = spec(TransitionKind::Smoothstep { k: 2 }, 0.05);
        assert!((s.eval(0.0).value - 0.5).abs() < 1e-15);
        let t = spec(TransitionKind::Tanh { beta: 8.0 }, 0.05);
        assert!((t.eval(0.0).value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn smoothstep_endpoint_derivatives_exact_zero() {
        let s = spec(TransitionKind::Smoothstep { k: 3 }, 0.05);
        for d in [0.05, -0.05, 0.08, -0.3] {
            let j = s.eval(d);
            assert_eq!(j.d1, 0.0);
            assert_eq!(j.d2, 0.0);
        }
    }

    #[test]
    fn tanh_interface_slope() {
        let t = spec(TransitionKind::Tanh { beta: 8.0 }, 0.05);
        let j = t.eval(0.0);
        assert!((j.d1 + 80.0).abs() < 1e-10);
    }

    #[test]
    fn tanh_residual_slope_at_clip() {
        // The clipped tanh keeps a nonzero slope just inside the clipping
        // point: (beta / 2 delta) sech^2(beta).
        let (beta, delta) = (8.0_f64, 0.05_f64);
        let t = spec(TransitionKind::Tanh { beta }, delta);
        let inside = delta * (1.0 - 1e-9);
        let expect = beta / (2.0 * delta) / beta.cosh().powi(2);
        let j = t.eval(inside);
        assert!(j.d1 != 0.0);
        assert!((j.d1.abs() - expect).abs() / expect < 1e-6);
    }

    #[test]
    fn asymmetric_slope_ratio() {
        // h = delta/2; the interior slope is (h + ext)/h times steeper.
        let s = spec(TransitionKind::Asymmetric { k: 2, ext: 0.1 }, 0.1);
        let left = s.eval(-1e-12).d1;
        let right = s.eval(1e-12).d1;
        assert!((left / right - 3.0).abs() < 1e-6);
        assert!(left < 0.0 && right < 0.0);
        assert!((s.eval(0.0).value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_support_endpoints() {
        let s = spec(TransitionKind::Asymmetric { k: 2, ext: 0.1 }, 0.1);
        let (lo, hi) = s.support();
        assert!((lo + 0.05).abs() < 1e-15 && (hi - 0.15).abs() < 1e-15);
        let j = s.eval(lo);
        assert_eq!((j.value, j.d1, j.d2), (1.0, 0.0, 0.0));
        let j = s.eval(hi);
        assert_eq!((j.value, j.d1, j.d2), (0.0, 0.0, 0.0));
        // Just inside the support the derivatives also fade smoothly.
        let j = s.eval(lo + 1e-9);
        assert!(j.d1.abs() < 1e-6 && j.value <= 1.0);
    }

    proptest! {
        #[test]
        fn symmetric_monotone(d1 in -0.2_f64..0.2, d2 in -0.2_f64..0.2, k in 0_usize..6) {
            let s = spec(TransitionKind::Smoothstep { k }, 0.05);
            let (lo, hi) = (d1.min(d2), d1.max(d2));
            prop_assert!(s.eval(lo).value >= s.eval(hi).value - 1e-12);
            let t = spec(TransitionKind::Tanh { beta: 6.0 }, 0.05);
            prop_assert!(t.eval(lo).value >= t.eval(hi).value - 1e-12);
        }

        #[test]
        fn slope_nonpositive(d in -0.3_f64..0.3) {
            for s in [
                spec(TransitionKind::Smoothstep { k: 3 }, 0.05),
                spec(TransitionKind::Tanh { beta: 10.0 }, 0.05),
                spec(TransitionKind::Asymmetric { k: 3, ext: 0.2 }, 0.1),
            ] {
                let j = s.eval(d);
                prop_assert!(j.d1 <= 0.0);
                prop_assert!((0.0..=1.0).contains(&j.value));
            }
        }
    }

    #[test]
    fn plateau_jets_are_exact() {
        let s = spec(TransitionKind::Smoothstep { k: 3 }, 0.05);
        let pill = PillParams::new(0.3, 0.5, 0.7, 0.5, 0.2).unwrap();
        // Deep inside.
        let j = pseudo_density_jet(&s, &pill, Point2::new(0.5, 0.5)).unwrap();
        assert_eq!(j.value, 1.0);
        assert!(j.grad.iter().all(|&g| g == 0.0));
        assert!(j.hess.iter().flatten().all(|&h| h == 0.0));
        // Far outside.
        let j = pseudo_density_jet(&s, &pill, Point2::new(0.5, 0.95)).unwrap();
        assert_eq!(j.value, 0.0);
        assert!(j.grad.iter().all(|&g| g == 0.0));
        assert!(j.hess.iter().flatten().all(|&h| h == 0.0));
    }

    #[test]
    fn density_jet_matches_finite_differences() {
        use rand::Rng;
        let specs = [
            spec(TransitionKind::Smoothstep { k: 3 }, 0.05),
            spec(TransitionKind::Tanh { beta: 8.0 }, 0.05),
            spec(TransitionKind::Asymmetric { k: 3, ext: 0.15 }, 0.1),
        ];
        let mut rng = crate::test_rng(23);
        let mut tested = 0;
        while tested < 150 {
            let pill = PillParams::new(
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.05..0.3),
            );
            let Ok(pill) = pill else { continue };
            if pill.length() < 0.15 {
                continue;
            }
            let s = &specs[tested % specs.len()];
            let x = Point2::new(rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2));
            let d = geometry::signed_distance(x, &pill).unwrap();
            let (lo, hi) = s.support();
            // In-band, clear of the plateau edges, the asymmetric interface
            // kink and the branch boundaries.
            if d < lo + 5e-4 || d > hi - 5e-4 || d.abs() < 5e-4 {
                continue;
            }
            let jet = distance_safe(s, &pill, x);
            let Some(jet) = jet else { continue };

            let h = 1e-6;
            let z = pill.params();
            let mut fd_g = [0.0; 5];
            for i in 0..5 {
                let mut zp = z;
                let mut zm = z;
                zp[i] += h;
                zm[i] -= h;
                fd_g[i] = (dens(s, zp, x) - dens(s, zm, x)) / (2.0 * h);
            }
            let scale = fd_g.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            for i in 0..5 {
                assert!(
                    (jet.grad[i] - fd_g[i]).abs() / scale < 1e-5,
                    "grad[{i}] {} vs {}",
                    jet.grad[i],
                    fd_g[i]
                );
            }

            // Hessian rows via central differences of the analytic
            // gradient, which is itself checked against value differences
            // above.
            let hh = 1e-6;
            let mut hscale = 1.0_f64;
            let mut fd_h = [[0.0; 5]; 5];
            for i in 0..5 {
                let mut zp = z;
                let mut zm = z;
                zp[i] += hh;
                zm[i] -= hh;
                let gp = pseudo_density_grad(s, &PillParams::from_params(zp), x).unwrap().1;
                let gm = pseudo_density_grad(s, &PillParams::from_params(zm), x).unwrap().1;
                for k in 0..5 {
                    fd_h[i][k] = (gp[k] - gm[k]) / (2.0 * hh);
                    hscale = hscale.max(fd_h[i][k].abs());
                }
            }
            for i in 0..5 {
                for k in 0..5 {
                    assert!(
                        (jet.hess[i][k] - fd_h[i][k]).abs() / hscale < 1e-4,
                        "hess[{i}][{k}] {} vs {}",
                        jet.hess[i][k],
                        fd_h[i][k]
                    );
                }
            }
            tested += 1;
        }
    }

    fn dens(s: &TransitionSpec, z: [f64; 5], x: Point2) -> f64 {
        pseudo_density(s, &PillParams::from_params(z), x).unwrap()
    }

    /// Skips configurations where the finite-difference stencil would cross
    /// a distance-branch boundary.
    fn distance_safe(s: &TransitionSpec, pill: &PillParams, x: Point2) -> Option<DensityJet> {
        let (ux, uy) = (pill.qx - pill.px, pill.qy - pill.py);
        let len2 = ux * ux + uy * uy;
        let t = ((x.x - pill.px) * ux + (x.y - pill.py) * uy) / len2;
        if (t - 0.0).abs() < 1e-2 || (t - 1.0).abs() < 1e-2 {
            return None;
        }
        let jet = pseudo_density_jet(s, pill, x).unwrap();
        if jet.singular {
            return None;
        }
        let d = geometry::unsigned_distance(x, pill).unwrap();
        if d < 1e-3 {
            return None;
        }
        Some(jet)
    }
}
