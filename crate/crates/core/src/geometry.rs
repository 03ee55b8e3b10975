//! Capsule ("pill") geometry: parameterization, unsigned/signed distance and
//! exact first/second derivatives of the distance with respect to the five
//! design parameters of a pill.
//!
//! A pill is the set of points within radius `r` of the segment between two
//! endpoints `P` and `Q`. Its distance field decomposes into three branches:
//! the two endpoint distances and the perpendicular distance to the
//! supporting line, selected by where the orthogonal projection of the query
//! point lands on the segment. The branches meet on the normal lines through
//! the endpoints, where values, gradients and Hessians of the adjacent
//! branches coincide, so the combined field is twice continuously
//! differentiable away from the singular set (the endpoints themselves and
//! the supporting line under the segment branch).

use crate::{Error, Result};

/// Default tolerance below which a query point counts as singular.
pub const EPS_SINGULAR: f64 = 1e-12;

/// Number of design parameters per pill: `(p_x, p_y, q_x, q_y, r)`.
pub const PILL_PARAMS: usize = 5;

/// A query point in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }
}

/// One capsule: two endpoints plus a radius, the five design scalars of a
/// single feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PillParams {
    pub px: f64,
    pub py: f64,
    pub qx: f64,
    pub qy: f64,
    pub r: f64,
}

impl PillParams {
    /// Validated constructor. Rejects non-positive radii and degenerate
    /// segments (`P == Q`), which have no usable distance derivatives.
    pub fn new(px: f64, py: f64, qx: f64, qy: f64, r: f64) -> Result<Self> {
        let pill = PillParams { px, py, qx, qy, r };
        if !pill.params().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "non-finite pill parameters {:?}",
                pill.params()
            )));
        }
        if r <= 0.0 {
            return Err(Error::InvalidGeometry(format!("radius {r} must be > 0")));
        }
        if pill.length() == 0.0 {
            return Err(Error::InvalidGeometry(
                "degenerate pill: endpoints coincide".into(),
            ));
        }
        Ok(pill)
    }

    /// The design parameter block in fixed order `(p_x, p_y, q_x, q_y, r)`.
    pub fn params(&self) -> [f64; PILL_PARAMS] {
        [self.px, self.py, self.qx, self.qy, self.r]
    }

    /// Rebuild from a parameter block without validation. Used on solver
    /// trial points, where degenerate values must evaluate (to something
    /// non-finite) rather than error.
    pub fn from_params(z: [f64; PILL_PARAMS]) -> Self {
        PillParams {
            px: z[0],
            py: z[1],
            qx: z[2],
            qy: z[3],
            r: z[4],
        }
    }

    /// Segment length `‖Q − P‖`.
    pub fn length(&self) -> f64 {
        let (ux, uy) = (self.qx - self.px, self.qy - self.py);
        (ux * ux + uy * uy).sqrt()
    }

    /// Segment midpoint.
    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.px + self.qx), 0.5 * (self.py + self.qy))
    }

    /// Same segment with a different radius.
    pub fn with_radius(&self, r: f64) -> Self {
        PillParams { r, ..*self }
    }

    /// Unit direction of the segment and its left normal.
    /// Returns `None` for degenerate segments.
    pub fn frame(&self) -> Option<((f64, f64), (f64, f64))> {
        let (ux, uy) = (self.qx - self.px, self.qy - self.py);
        let d = (ux * ux + uy * uy).sqrt();
        if d == 0.0 {
            return None;
        }
        let u0 = (ux / d, uy / d);
        Some((u0, (-u0.1, u0.0)))
    }
}

/// Which distance candidate is active at a query point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    PointP,
    PointQ,
    Segment,
}

/// Distance value with exact gradient and Hessian over the five pill
/// parameters.
#[derive(Debug, Clone)]
pub struct DistanceJet {
    pub value: f64,
    pub grad: [f64; PILL_PARAMS],
    pub hess: [[f64; PILL_PARAMS]; PILL_PARAMS],
    pub branch: Branch,
    /// Set when the query point lies within `eps` of the singular set; the
    /// value is still exact but the derivatives are unreliable there.
    pub singular: bool,
}

fn check_pill(pill: &PillParams) -> Result<f64> {
    let d = pill.length();
    if d == 0.0 {
        return Err(Error::InvalidGeometry(
            "degenerate pill: endpoints coincide".into(),
        ));
    }
    Ok(d)
}

/// Selects the active branch by the projection parameter of `x` onto the
/// segment. Ties at the region boundaries resolve to `Segment`, where the
/// adjacent jets coincide anyway.
fn active_branch(x: Point2, pill: &PillParams) -> Branch {
    let (ux, uy) = (pill.qx - pill.px, pill.qy - pill.py);
    let len2 = ux * ux + uy * uy;
    let t = ((x.x - pill.px) * ux + (x.y - pill.py) * uy) / len2;
    if t < 0.0 {
        Branch::PointP
    } else if t > 1.0 {
        Branch::PointQ
    } else {
        Branch::Segment
    }
}

/// Unsigned distance from `x` to the pill surface segment, i.e. the minimum
/// of the two endpoint distances and the perpendicular distance to the
/// supporting line, each taken on the region where it is the true segment
/// distance.
pub fn unsigned_distance(x: Point2, pill: &PillParams) -> Result<f64> {
    let d = check_pill(pill)?;
    Ok(match active_branch(x, pill) {
        Branch::PointP => {
            let (dx, dy) = (x.x - pill.px, x.y - pill.py);
            (dx * dx + dy * dy).sqrt()
        }
        Branch::PointQ => {
            let (dx, dy) = (x.x - pill.qx, x.y - pill.qy);
            (dx * dx + dy * dy).sqrt()
        }
        Branch::Segment => numerator(x, pill).abs() / d,
    })
}

/// Signed distance: negative inside the pill, zero on its boundary.
pub fn signed_distance(x: Point2, pill: &PillParams) -> Result<f64> {
    Ok(unsigned_distance(x, pill)? - pill.r)
}

/// Signed area numerator `N(x, z)` of the perpendicular line distance
/// `|N|/D`.
fn numerator(x: Point2, pill: &PillParams) -> f64 {
    (x.x - pill.qx) * (pill.py - pill.qy) + (x.y - pill.qy) * (pill.qx - pill.px)
}

/// Jet of one endpoint distance. `slot` is 0 for `P`, 2 for `Q`; only the
/// two coordinates of that endpoint carry derivatives.
pub fn point_branch_jet(x: Point2, pill: &PillParams, endpoint: Branch) -> DistanceJet {
    let (ex, ey, slot) = match endpoint {
        Branch::PointP => (pill.px, pill.py, 0),
        Branch::PointQ => (pill.qx, pill.qy, 2),
        Branch::Segment => panic!("point_branch_jet called with Segment"),
    };
    let (dx, dy) = (x.x - ex, x.y - ey);
    let dist = (dx * dx + dy * dy).sqrt();

    let mut jet = DistanceJet {
        value: dist,
        grad: [0.0; 5],
        hess: [[0.0; 5]; 5],
        branch: endpoint,
        singular: false,
    };
    if dist == 0.0 {
        // Value is exact; derivatives blow up at the endpoint itself.
        jet.singular = true;
        return jet;
    }
    jet.grad[slot] = -dx / dist;
    jet.grad[slot + 1] = -dy / dist;
    let d3 = dist * dist * dist;
    jet.hess[slot][slot] = dy * dy / d3;
    jet.hess[slot + 1][slot + 1] = dx * dx / d3;
    jet.hess[slot][slot + 1] = -dx * dy / d3;
    jet.hess[slot + 1][slot] = jet.hess[slot][slot + 1];
    jet
}

/// Jet of the perpendicular distance `|N|/D` to the supporting line,
/// assembled from the derivative tables of `N` and `D` through the quotient
/// rule.
pub fn segment_branch_jet(x: Point2, pill: &PillParams) -> DistanceJet {
    let (a, b) = (pill.px - pill.qx, pill.py - pill.qy);
    let d = (a * a + b * b).sqrt();
    let n = numerator(x, pill);
    let n_abs = n.abs();
    // sgn(N) is undefined on the supporting line; 0 there keeps everything
    // finite and the caller gets the singular flag.
    let sgn = if n > 0.0 {
        1.0
    } else if n < 0.0 {
        -1.0
    } else {
        0.0
    };

    let mut jet = DistanceJet {
        value: n_abs / d,
        grad: [0.0; 5],
        hess: [[0.0; 5]; 5],
        branch: Branch::Segment,
        singular: n == 0.0,
    };

    // First derivatives of N and D over (p_x, p_y, q_x, q_y, r).
    let dn = [
        -(x.y - pill.qy),
        x.x - pill.qx,
        -(pill.py - pill.qy) + (x.y - pill.qy),
        (pill.px - pill.qx) - (x.x - pill.qx),
        0.0,
    ];
    let dd = [a / d, b / d, -a / d, -b / d, 0.0];

    let d2 = d * d;
    for i in 0..4 {
        jet.grad[i] = (sgn * dn[i] * d - n_abs * dd[i]) / d2;
    }

    // Second derivatives: N is bilinear (two nonzero mixed entries) and D is
    // the endpoint separation norm.
    let d3 = d2 * d;
    let mut d2n = [[0.0; 5]; 5];
    d2n[0][3] = 1.0;
    d2n[3][0] = 1.0;
    d2n[1][2] = -1.0;
    d2n[2][1] = -1.0;
    let (aa, bb, ab) = (a * a / d3, b * b / d3, a * b / d3);
    let d2d = [
        [bb, -ab, -bb, ab, 0.0],
        [-ab, aa, ab, -aa, 0.0],
        [-bb, ab, bb, -ab, 0.0],
        [ab, -aa, -ab, aa, 0.0],
        [0.0; 5],
    ];

    for i in 0..4 {
        for k in i..4 {
            let h = sgn * d2n[i][k] / d - sgn * (dn[i] * dd[k] + dn[k] * dd[i]) / d2
                + n_abs / d2 * (2.0 * dd[i] * dd[k] / d - d2d[i][k]);
            jet.hess[i][k] = h;
            jet.hess[k][i] = h;
        }
    }
    jet
}

/// Distance jet at `x`: value, gradient and Hessian of the active branch,
/// with the default singularity tolerance.
pub fn distance_jet(x: Point2, pill: &PillParams, signed: bool) -> Result<DistanceJet> {
    distance_jet_with_eps(x, pill, signed, EPS_SINGULAR)
}

/// Distance jet with an explicit singularity tolerance `eps` (domain units).
/// Points within `eps` of the singular set are still evaluated but flagged.
pub fn distance_jet_with_eps(
    x: Point2,
    pill: &PillParams,
    signed: bool,
    eps: f64,
) -> Result<DistanceJet> {
    check_pill(pill)?;
    let mut jet = match active_branch(x, pill) {
        Branch::Segment => segment_branch_jet(x, pill),
        endpoint => point_branch_jet(x, pill, endpoint),
    };
    if jet.value <= eps && matches!(jet.branch, Branch::PointP | Branch::PointQ) {
        jet.singular = true;
    }
    if matches!(jet.branch, Branch::Segment) && jet.value <= eps {
        jet.singular = true;
    }
    if signed {
        // d_signed = d - r: constant shift in r, so only the radius slot of
        // the gradient changes and the Hessian is untouched.
        jet.value -= pill.r;
        jet.grad[4] -= 1.0;
    }
    Ok(jet)
}
