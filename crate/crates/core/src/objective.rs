//! Tracking and reward functionals over the element grid, their analytic
//! gradients/Hessians, residual fields and the smooth segment-length
//! constraints.
//!
//! Tracking is the least-squares misfit to a target field; its Hessian
//! splits into a positive semidefinite Gauss-Newton part and a
//! residual-weighted curvature part. The reward functional is the negative
//! overlap integral: it promotes coverage of the target without penalizing
//! overshoot, carries no Gauss-Newton term, and its sensitivities vanish
//! identically wherever the target is zero.

use rayon::prelude::*;

use crate::aggregation::AggregatorSpec;
use crate::geometry::{PillParams, PILL_PARAMS};
use crate::grid::{self, DesignVector, ElementField, EvalMode, GridSpec};
use crate::jet::ScalarJet;
use crate::transition::TransitionSpec;
use crate::{Error, Result};

/// A jet of an objective functional; alias kept for symmetry with the other
/// jet types.
pub type ObjectiveJet = ScalarJet;

/// Prescribed density field on the unpadded grid, clamped to `[0, 1]` on
/// ingestion. Row-major, row 0 at the bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetField {
    values: Vec<f64>,
    nx: usize,
    ny: usize,
}

impl TargetField {
    pub fn new(nx: usize, ny: usize, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * ny {
            return Err(Error::GridMismatch(format!(
                "target with {} values does not fit {nx} x {ny} elements",
                values.len()
            )));
        }
        for v in &mut values {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(TargetField { values, nx, ny })
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        TargetField {
            values: vec![0.0; nx * ny],
            nx,
            ny,
        }
    }

    pub fn from_field(field: &ElementField) -> Self {
        TargetField::new(field.nx(), field.ny(), field.values().to_vec()).unwrap()
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        if self.nx != grid.nx || self.ny != grid.ny {
            return Err(Error::GridMismatch(format!(
                "target is {} x {} but grid has {} x {} elements",
                self.nx, self.ny, grid.nx, grid.ny
            )));
        }
        Ok(())
    }
}

/// Feasible set of the constrained problem: endpoint box, radius range and
/// segment-length range. The box equals the unpadded design domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub r_min: f64,
    pub r_max: Option<f64>,
    pub l_min: f64,
    pub l_max: Option<f64>,
}

impl ConstraintSet {
    /// Endpoint box from the unpadded grid domain.
    pub fn for_grid(grid: &GridSpec, r_min: f64, l_min: f64) -> Self {
        ConstraintSet {
            x_min: grid.x0,
            x_max: grid.x0 + grid.lx,
            y_min: grid.y0,
            y_max: grid.y0 + grid.ly,
            r_min,
            r_max: None,
            l_min,
            l_max: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_min < 0.0 {
            return Err(Error::InvalidConfig("r_min must be >= 0".into()));
        }
        if !(self.l_min > 0.0) {
            return Err(Error::InvalidConfig("l_min must be > 0".into()));
        }
        if self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::InvalidConfig("constraint box is empty".into()));
        }
        Ok(())
    }
}

/// Which functional an evaluation computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Tracking,
    Reward,
}

/// Reusable evaluator binding one functional to its field model, grid and
/// target. Evaluation optionally inflates every radius (early-stage
/// exploration); the inflation is invisible to the derivative chain because
/// it is a constant shift.
pub struct ObjectiveEval<'a> {
    pub kind: ObjectiveKind,
    pub tspec: &'a TransitionSpec,
    pub aspec: &'a AggregatorSpec,
    pub grid: &'a GridSpec,
    pub target: &'a TargetField,
    pub radius_inflation: f64,
    pub parallel: bool,
    elements: Vec<((f64, f64), Option<usize>)>,
}

/// Per-chunk accumulator; chunks are combined in fixed order so results are
/// identical at any thread count.
struct Partial {
    f: f64,
    g: Vec<f64>,
    h: Vec<f64>,
}

const CHUNK: usize = 128;

impl<'a> ObjectiveEval<'a> {
    pub fn new(
        kind: ObjectiveKind,
        tspec: &'a TransitionSpec,
        aspec: &'a AggregatorSpec,
        grid: &'a GridSpec,
        target: &'a TargetField,
    ) -> Result<Self> {
        grid.validate()?;
        target.check_grid(grid)?;
        Ok(ObjectiveEval {
            kind,
            tspec,
            aspec,
            grid,
            target,
            radius_inflation: 0.0,
            parallel: false,
            elements: grid::eval_elements(grid),
        })
    }

    pub fn with_radius_inflation(mut self, ext: f64) -> Self {
        self.radius_inflation = ext;
        self
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn value(&self, design: &DesignVector) -> Result<f64> {
        Ok(self.accumulate(design, EvalMode::Value)?.f)
    }

    pub fn value_grad(&self, design: &DesignVector) -> Result<(f64, Vec<f64>)> {
        let p = self.accumulate(design, EvalMode::Grad)?;
        Ok((p.f, p.g))
    }

    pub fn jet(&self, design: &DesignVector) -> Result<ScalarJet> {
        let p = self.accumulate(design, EvalMode::Full)?;
        Ok(ScalarJet {
            value: p.f,
            grad: p.g,
            hess: p.h,
        })
    }

    /// Number of elements carrying a nonzero target value.
    pub fn target_support(&self) -> usize {
        self.target.values().iter().filter(|&&v| v > 0.0).count()
    }

    fn target_at(&self, core: Option<usize>) -> f64 {
        core.map_or(0.0, |e| self.target.values()[e])
    }

    fn accumulate(&self, design: &DesignVector, mode: EvalMode) -> Result<Partial> {
        let eval_design = design.inflated(self.radius_inflation);
        let np = design.n_params();
        let h = (self.grid.hx(), self.grid.hy());
        let q = self.grid.quad_order;

        let chunks: Vec<&[((f64, f64), Option<usize>)]> = self.elements.chunks(CHUNK).collect();
        let run_chunk = |chunk: &[((f64, f64), Option<usize>)]| -> Result<Partial> {
            let mut part = Partial {
                f: 0.0,
                g: if mode == EvalMode::Value { Vec::new() } else { vec![0.0; np] },
                h: if mode == EvalMode::Full { vec![0.0; np * np] } else { Vec::new() },
            };
            let mut scratch = grid::ElementScratch::new();
            for &(origin, core) in chunk {
                let t = self.target_at(core);
                // The reward integrand is identically zero off the target
                // support, sensitivities included.
                if self.kind == ObjectiveKind::Reward && t == 0.0 {
                    continue;
                }
                grid::eval_element_into(
                    &mut scratch,
                    &eval_design,
                    self.tspec,
                    self.aspec,
                    origin,
                    h,
                    q,
                    mode,
                )?;
                self.scatter(&scratch, t, mode, &mut part);
            }
            Ok(part)
        };

        let partials: Vec<Result<Partial>> = if self.parallel {
            chunks.par_iter().map(|c| run_chunk(c)).collect()
        } else {
            chunks.iter().map(|c| run_chunk(c)).collect()
        };

        let mut total = Partial {
            f: 0.0,
            g: if mode == EvalMode::Value { Vec::new() } else { vec![0.0; np] },
            h: if mode == EvalMode::Full { vec![0.0; np * np] } else { Vec::new() },
        };
        for p in partials {
            let p = p?;
            total.f += p.f;
            for (a, b) in total.g.iter_mut().zip(&p.g) {
                *a += b;
            }
            for (a, b) in total.h.iter_mut().zip(&p.h) {
                *a += b;
            }
        }
        Ok(total)
    }

    /// Adds one element's contribution to the partial accumulator.
    fn scatter(&self, scr: &grid::ElementScratch, t: f64, mode: EvalMode, part: &mut Partial) {
        let np = part.g.len().max(1);
        let rho = scr.value;
        match self.kind {
            ObjectiveKind::Tracking => {
                let res = t - rho;
                part.f += res * res;
                if mode == EvalMode::Value {
                    return;
                }
                for (slot, &m) in scr.active.iter().enumerate() {
                    for i in 0..PILL_PARAMS {
                        part.g[m * PILL_PARAMS + i] += -2.0 * res * scr.grad[slot][i];
                    }
                }
                if mode != EvalMode::Full {
                    return;
                }
                let k = scr.active.len();
                for si in 0..k {
                    for sj in si..k {
                        let (ma, mb) = (scr.active[si], scr.active[sj]);
                        let block = &scr.hess[grid::pair_index(k, si, sj)];
                        for i in 0..PILL_PARAMS {
                            for j in 0..PILL_PARAMS {
                                if si == sj && j < i {
                                    continue;
                                }
                                // Gauss-Newton plus residual-weighted
                                // curvature; diagonal blocks symmetrized so
                                // H equals its transpose bitwise.
                                let curv = if si == sj {
                                    0.5 * (block[i][j] + block[j][i])
                                } else {
                                    block[i][j]
                                };
                                let v = 2.0
                                    * (scr.grad[si][i] * scr.grad[sj][j] - res * curv);
                                let (gi, gj) =
                                    (ma * PILL_PARAMS + i, mb * PILL_PARAMS + j);
                                part.h[gi * np + gj] += v;
                                if gi != gj {
                                    part.h[gj * np + gi] += v;
                                }
                            }
                        }
                    }
                }
            }
            ObjectiveKind::Reward => {
                part.f += -rho * t;
                if mode == EvalMode::Value || t == 0.0 {
                    return;
                }
                for (slot, &m) in scr.active.iter().enumerate() {
                    for i in 0..PILL_PARAMS {
                        part.g[m * PILL_PARAMS + i] += -t * scr.grad[slot][i];
                    }
                }
                if mode != EvalMode::Full {
                    return;
                }
                let k = scr.active.len();
                for si in 0..k {
                    for sj in si..k {
                        let (ma, mb) = (scr.active[si], scr.active[sj]);
                        let block = &scr.hess[grid::pair_index(k, si, sj)];
                        for i in 0..PILL_PARAMS {
                            for j in 0..PILL_PARAMS {
                                if si == sj && j < i {
                                    continue;
                                }
                                let curv = if si == sj {
                                    0.5 * (block[i][j] + block[j][i])
                                } else {
                                    block[i][j]
                                };
                                let v = -t * curv;
                                let (gi, gj) =
                                    (ma * PILL_PARAMS + i, mb * PILL_PARAMS + j);
                                part.h[gi * np + gj] += v;
                                if gi != gj {
                                    part.h[gj * np + gi] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Least-squares tracking jet: value, gradient and Hessian of
/// `sum_e (target_e - rhobar_e)^2`.
pub fn tracking_jet(
    design: &DesignVector,
    tspec: &TransitionSpec,
    aspec: &AggregatorSpec,
    grid: &GridSpec,
    target: &TargetField,
) -> Result<ObjectiveJet> {
    ObjectiveEval::new(ObjectiveKind::Tracking, tspec, aspec, grid, target)?.jet(design)
}

/// Reward jet: value, gradient and Hessian of `-sum_e rhobar_e * target_e`
/// (minimization form of the overlap maximization).
pub fn reward_jet(
    design: &DesignVector,
    tspec: &TransitionSpec,
    aspec: &AggregatorSpec,
    grid: &GridSpec,
    target: &TargetField,
) -> Result<ObjectiveJet> {
    ObjectiveEval::new(ObjectiveKind::Reward, tspec, aspec, grid, target)?.jet(design)
}

/// The Gauss-Newton part of the tracking Hessian alone,
/// `2 sum_e grad rhobar_e grad rhobar_e^T`; positive semidefinite by
/// construction.
pub fn tracking_gauss_newton(
    design: &DesignVector,
    tspec: &TransitionSpec,
    aspec: &AggregatorSpec,
    grid: &GridSpec,
    target: &TargetField,
) -> Result<Vec<f64>> {
    let eval = ObjectiveEval::new(ObjectiveKind::Tracking, tspec, aspec, grid, target)?;
    let np = design.n_params();
    let mut gn = vec![0.0; np * np];
    let mut scratch = grid::ElementScratch::new();
    let h = (grid.hx(), grid.hy());
    for &(origin, _) in &eval.elements {
        grid::eval_element_into(
            &mut scratch,
            design,
            tspec,
            aspec,
            origin,
            h,
            grid.quad_order,
            EvalMode::Grad,
        )?;
        let k = scratch.active.len();
        for si in 0..k {
            for sj in 0..k {
                let (ma, mb) = (scratch.active[si], scratch.active[sj]);
                for i in 0..PILL_PARAMS {
                    for j in 0..PILL_PARAMS {
                        let (gi, gj) = (ma * PILL_PARAMS + i, mb * PILL_PARAMS + j);
                        gn[gi * np + gj] += 2.0 * scratch.grad[si][i] * scratch.grad[sj][j];
                    }
                }
            }
        }
    }
    Ok(gn)
}

/// Signed difference `target - current`: positive where target density is
/// missing, negative where the reconstruction overshoots.
pub fn residual_field(target: &TargetField, current: &ElementField) -> Result<ElementField> {
    if target.nx() != current.nx() || target.ny() != current.ny() {
        return Err(Error::GridMismatch(format!(
            "residual of {} x {} target vs {} x {} field",
            target.nx(),
            target.ny(),
            current.nx(),
            current.ny()
        )));
    }
    let values = target
        .values()
        .iter()
        .zip(current.values())
        .map(|(t, c)| t - c)
        .collect();
    ElementField::from_values(target.nx(), target.ny(), values)
}

/// Binary mask of elements whose deficit strictly exceeds `tau_res`.
pub fn residual_mask(
    target: &TargetField,
    current: &ElementField,
    tau_res: f64,
) -> Result<ElementField> {
    let res = residual_field(target, current)?;
    let values = res
        .values()
        .iter()
        .map(|&v| if v > tau_res { 1.0 } else { 0.0 })
        .collect();
    ElementField::from_values(target.nx(), target.ny(), values)
}

/// One smooth inequality residual with its exact quadratic-form derivatives
/// over the pill parameters. Feasible iff `g <= 0`.
#[derive(Debug, Clone)]
pub struct ConstraintJet {
    pub g: f64,
    pub grad: [f64; PILL_PARAMS],
    pub hess: [[f64; PILL_PARAMS]; PILL_PARAMS],
}

/// Squared-form segment-length constraints of one pill:
/// `g_lo = l_min^2 - |Q-P|^2 <= 0` and, if bounded above,
/// `g_hi = |Q-P|^2 - l_max^2 <= 0`. The Hessians are constant.
pub fn length_constraint_jet(
    pill: &PillParams,
    l_min: f64,
    l_max: Option<f64>,
) -> Vec<ConstraintJet> {
    let (ux, uy) = (pill.qx - pill.px, pill.qy - pill.py);
    let len2 = ux * ux + uy * uy;
    // d(len2)/dz = (-2ux, -2uy, 2ux, 2uy, 0); constant Hessian +-2 pattern.
    let grad_len2 = [-2.0 * ux, -2.0 * uy, 2.0 * ux, 2.0 * uy, 0.0];
    let mut hess_len2 = [[0.0; PILL_PARAMS]; PILL_PARAMS];
    for (i, s) in [(0usize, 2usize), (1, 3)] {
        hess_len2[i][i] = 2.0;
        hess_len2[s][s] = 2.0;
        hess_len2[i][s] = -2.0;
        hess_len2[s][i] = -2.0;
    }

    let neg = |a: &[f64; PILL_PARAMS]| {
        let mut out = [0.0; PILL_PARAMS];
        for (o, v) in out.iter_mut().zip(a) {
            *o = -v;
        }
        out
    };
    let neg_m = |m: &[[f64; PILL_PARAMS]; PILL_PARAMS]| {
        let mut out = [[0.0; PILL_PARAMS]; PILL_PARAMS];
        for i in 0..PILL_PARAMS {
            for j in 0..PILL_PARAMS {
                out[i][j] = -m[i][j];
            }
        }
        out
    };

    let mut out = vec![ConstraintJet {
        g: l_min * l_min - len2,
        grad: neg(&grad_len2),
        hess: neg_m(&hess_len2),
    }];
    if let Some(lmax) = l_max {
        out.push(ConstraintJet {
            g: len2 - lmax * lmax,
            grad: grad_len2,
            hess: hess_len2,
        });
    }
    out
}
