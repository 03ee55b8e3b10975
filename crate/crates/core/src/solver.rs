//! Constrained local minimization over the design vector: exact-Hessian
//! Newton or limited-memory BFGS inner steps, gradient-projection handling
//! of box bounds, and a log-barrier (with quadratic extension near the
//! boundary) for the smooth segment-length inequalities.
//!
//! The barrier parameter follows a fixed x0.2 reduction schedule; every
//! accepted iterate must both satisfy the Armijo condition on the
//! barrier-augmented objective and keep the raw objective non-increasing,
//! so the recorded trace is monotone by construction. Identical inputs give
//! bit-identical results.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::geometry::PILL_PARAMS;
use crate::grid::DesignVector;
use crate::jet::ScalarJet;
use crate::objective::{length_constraint_jet, ConstraintSet, ObjectiveEval};
use crate::{Error, Result};

/// Armijo sufficient-decrease constant.
const ARMIJO_C1: f64 = 1e-4;
/// Backtracking factor.
const BACKTRACK: f64 = 0.5;
/// Final barrier parameter of the reduction schedule.
const MU_FINAL: f64 = 1e-8;
/// Slack below which the log barrier switches to its quadratic extension.
const BARRIER_S0: f64 = 1e-10;
/// Feasibility tolerance on the smooth inequalities at the returned design.
const FEAS_TOL: f64 = 1e-8;

/// Anything the solver can minimize: value, gradient and full jet over a
/// design vector.
pub trait ObjectiveModel {
    fn value(&self, design: &DesignVector) -> Result<f64>;
    fn value_grad(&self, design: &DesignVector) -> Result<(f64, Vec<f64>)>;
    fn jet(&self, design: &DesignVector) -> Result<ScalarJet>;
}

impl ObjectiveModel for ObjectiveEval<'_> {
    fn value(&self, design: &DesignVector) -> Result<f64> {
        ObjectiveEval::value(self, design)
    }

    fn value_grad(&self, design: &DesignVector) -> Result<(f64, Vec<f64>)> {
        ObjectiveEval::value_grad(self, design)
    }

    fn jet(&self, design: &DesignVector) -> Result<ScalarJet> {
        ObjectiveEval::jet(self, design)
    }
}

/// Hessian strategy of the inner step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    Exact,
    Lbfgs { history: usize },
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Termination threshold on objective reduction / projected gradient.
    pub tol: f64,
    /// Total inner-iteration budget across all barrier phases.
    pub max_iter: usize,
    pub hessian_mode: HessianMode,
    /// Initial barrier parameter; values at or below the final barrier
    /// level collapse the schedule to a single phase.
    pub barrier_mu0: f64,
    /// Consecutive rejected trial steps before the line search gives up.
    pub ls_max_backtracks: usize,
    /// Seed reserved for stochastic callers; the solver itself is
    /// deterministic.
    pub rng_seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-7,
            max_iter: 100,
            hessian_mode: HessianMode::Exact,
            barrier_mu0: 1e-2,
            ls_max_backtracks: 30,
            rng_seed: 0,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("solver tol must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("solver max_iter must be >= 1".into()));
        }
        if let HessianMode::Lbfgs { history } = self.hessian_mode {
            if history == 0 {
                return Err(Error::InvalidConfig("lbfgs history must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Tolerance,
    MaxIter,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub design: DesignVector,
    /// Raw objective at every accepted iterate, starting with the initial
    /// point; non-increasing.
    pub objective_trace: Vec<f64>,
    /// Objective-evaluation count at which each trace entry was recorded.
    pub trace_evals: Vec<usize>,
    pub eval_count: usize,
    pub termination: Termination,
    pub feasible: bool,
}

/// Per-coordinate box bounds of the flattened design vector.
fn box_bounds(constraints: &ConstraintSet, design: &DesignVector) -> (Vec<f64>, Vec<f64>) {
    let n = design.n();
    let mut lo = Vec::with_capacity(n * PILL_PARAMS);
    let mut hi = Vec::with_capacity(n * PILL_PARAMS);
    for _ in 0..n {
        lo.extend_from_slice(&[
            constraints.x_min,
            constraints.y_min,
            constraints.x_min,
            constraints.y_min,
            constraints.r_min,
        ]);
        hi.extend_from_slice(&[
            constraints.x_max,
            constraints.y_max,
            constraints.x_max,
            constraints.y_max,
            constraints.r_max.unwrap_or(f64::INFINITY),
        ]);
    }
    (lo, hi)
}

fn clamp_to_box(z: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(lo[i], hi[i]);
    }
}

/// Barrier term `-mu ln(s)` of one slack `s = -g`, quadratically extended
/// below `s0` so infeasible trial points stay finite with a strong inward
/// push. Returns (value, d/ds, d2/ds2) scaled by `mu`.
fn barrier_1d(mu: f64, s: f64) -> (f64, f64, f64) {
    if s >= BARRIER_S0 {
        (-mu * s.ln(), -mu / s, mu / (s * s))
    } else {
        let d = s - BARRIER_S0;
        (
            mu * (-BARRIER_S0.ln() - d / BARRIER_S0 + d * d / (2.0 * BARRIER_S0 * BARRIER_S0)),
            mu * (-1.0 / BARRIER_S0 + d / (BARRIER_S0 * BARRIER_S0)),
            mu / (BARRIER_S0 * BARRIER_S0),
        )
    }
}

/// Barrier value over all smooth length inequalities.
fn barrier_value(constraints: &ConstraintSet, design: &DesignVector, mu: f64) -> f64 {
    let mut total = 0.0;
    for pill in &design.pills {
        for c in length_constraint_jet(pill, constraints.l_min, constraints.l_max) {
            total += barrier_1d(mu, -c.g).0;
        }
    }
    total
}

/// Adds barrier value/gradient/Hessian contributions in flat coordinates.
fn barrier_accumulate(
    constraints: &ConstraintSet,
    design: &DesignVector,
    mu: f64,
    grad: &mut [f64],
    hess: Option<&mut [f64]>,
) -> f64 {
    let np = design.n_params();
    let mut value = 0.0;
    let mut hess = hess;
    for (m, pill) in design.pills.iter().enumerate() {
        for c in length_constraint_jet(pill, constraints.l_min, constraints.l_max) {
            let (b, b1, b2) = barrier_1d(mu, -c.g);
            value += b;
            // s = -g: chain the sign through both derivative orders.
            for i in 0..PILL_PARAMS {
                grad[m * PILL_PARAMS + i] += -b1 * c.grad[i];
            }
            if let Some(h) = hess.as_deref_mut() {
                for i in 0..PILL_PARAMS {
                    for j in 0..PILL_PARAMS {
                        let (gi, gj) = (m * PILL_PARAMS + i, m * PILL_PARAMS + j);
                        h[gi * np + gj] += b2 * c.grad[i] * c.grad[j] - b1 * c.hess[i][j];
                    }
                }
            }
        }
    }
    value
}

/// Coordinates pinned by freezing or by an active box face with outward
/// gradient; their step components are zeroed.
fn pinned_mask(z: &[f64], grad: &[f64], lo: &[f64], hi: &[f64], frozen: &[bool]) -> Vec<bool> {
    (0..z.len())
        .map(|i| {
            let pill = i / PILL_PARAMS;
            let slot = i % PILL_PARAMS;
            let is_frozen = slot == 4 && frozen[pill];
            let at_lo = z[i] <= lo[i] + 1e-14 && grad[i] > 0.0;
            let at_hi = z[i] >= hi[i] - 1e-14 && grad[i] < 0.0;
            is_frozen || at_lo || at_hi
        })
        .collect()
}

fn projected_grad_norm(z: &[f64], grad: &[f64], lo: &[f64], hi: &[f64], frozen: &[bool]) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..z.len() {
        let pill = i / PILL_PARAMS;
        let slot = i % PILL_PARAMS;
        if slot == 4 && frozen[pill] {
            continue;
        }
        let mut g = grad[i];
        if z[i] <= lo[i] + 1e-14 && g > 0.0 {
            g = 0.0;
        }
        if z[i] >= hi[i] - 1e-14 && g < 0.0 {
            g = 0.0;
        }
        worst = worst.max(g.abs());
    }
    worst
}

/// Newton direction on the unpinned coordinates with positive-definiteness
/// repair: add lambda I, doubling lambda from 1e-8, until the factorization
/// succeeds.
fn newton_direction(hess: &[f64], grad: &[f64], pinned: &[bool]) -> Option<Vec<f64>> {
    let np = grad.len();
    let free: Vec<usize> = (0..np).filter(|&i| !pinned[i]).collect();
    if free.is_empty() {
        return None;
    }
    let k = free.len();
    let mut h = DMatrix::zeros(k, k);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            h[(a, b)] = hess[i * np + j];
        }
    }
    let g = DVector::from_iterator(k, free.iter().map(|&i| grad[i]));
    let mut lambda = 0.0;
    loop {
        let mut trial = h.clone();
        if lambda > 0.0 {
            for d in 0..k {
                trial[(d, d)] += lambda;
            }
        }
        if let Some(chol) = Cholesky::new(trial) {
            let step = chol.solve(&(-&g));
            let mut full = vec![0.0; np];
            for (a, &i) in free.iter().enumerate() {
                full[i] = step[a];
            }
            return Some(full);
        }
        lambda = if lambda == 0.0 { 1e-8 } else { lambda * 2.0 };
        if lambda > 1e16 {
            return None;
        }
    }
}

/// Two-loop recursion producing `-H g` from the stored curvature pairs,
/// with the standard `s.y / y.y` initial scaling.
fn lbfgs_direction(grad: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let np = grad.len();
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let alpha = rho * dot(s, &q);
        for i in 0..np {
            q[i] -= alpha * y[i];
        }
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        for v in &mut q {
            *v *= gamma;
        }
    }
    for ((s, y, rho), alpha) in memory.iter().zip(alphas.iter().rev()) {
        let beta = rho * dot(y, &q);
        for i in 0..np {
            q[i] += s[i] * (alpha - beta);
        }
    }
    for v in &mut q {
        *v = -*v;
    }
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes the model subject to the constraint set, starting from `x0`
/// projected onto the box. Frozen radius coordinates are removed from the
/// free-variable set and kept bit-exact.
pub fn minimize(
    model: &dyn ObjectiveModel,
    constraints: &ConstraintSet,
    x0: &DesignVector,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    opts.validate()?;
    constraints.validate()?;
    if x0.n() == 0 {
        return Err(Error::Contract("minimize over an empty design".into()));
    }

    let (lo, hi) = box_bounds(constraints, x0);
    let mut design = x0.clone();
    let mut z = design.flat();
    clamp_to_box(&mut z, &lo, &hi);
    design.set_flat(&z);
    let frozen = design.radius_frozen.clone();
    let np = z.len();

    let mut eval_count = 0usize;
    let mut trace = Vec::new();
    let mut trace_evals = Vec::new();
    let mut termination = Termination::MaxIter;
    let mut iters = 0usize;

    // Barrier schedule: mu0, mu0 * 0.2, ... down to the final level. A mu0
    // at or below the final level runs a single phase.
    let mut phases = Vec::new();
    let mut mu = opts.barrier_mu0.max(0.0);
    if mu <= MU_FINAL {
        phases.push(mu);
    } else {
        while mu > MU_FINAL {
            phases.push(mu);
            mu *= 0.2;
        }
        phases.push(mu);
    }
    let last_phase = phases.len() - 1;

    let mut raw_cur = f64::INFINITY;
    let mut best_raw = f64::INFINITY;
    let mut best_z = z.clone();
    let mut first_eval = true;

    'phases: for (phase, &mu) in phases.iter().enumerate() {
        let tol_phase = if phase == last_phase {
            opts.tol
        } else {
            opts.tol.max(mu)
        };
        let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        let mut prev_state: Option<(Vec<f64>, Vec<f64>)> = None;

        loop {
            if iters >= opts.max_iter {
                termination = Termination::MaxIter;
                break 'phases;
            }
            iters += 1;

            design.set_flat(&z);
            // One evaluation of the model per iteration: full jet for exact
            // Newton, value+gradient for L-BFGS.
            let (raw_f, mut grad, hess) = match opts.hessian_mode {
                HessianMode::Exact => {
                    let jet = model.jet(&design)?;
                    (jet.value, jet.grad, Some(jet.hess))
                }
                HessianMode::Lbfgs { .. } => {
                    let (f, g) = model.value_grad(&design)?;
                    (f, g, None)
                }
            };
            eval_count += 1;
            if !raw_f.is_finite() {
                return Err(Error::Solver(format!(
                    "non-finite objective {raw_f} at an accepted iterate"
                )));
            }
            let mut hess = hess;
            let bval = barrier_accumulate(
                constraints,
                &design,
                mu,
                &mut grad,
                hess.as_deref_mut(),
            );
            let f_mu = raw_f + bval;

            if first_eval {
                raw_cur = raw_f;
                best_raw = raw_f;
                best_z = z.clone();
                trace.push(raw_f);
                trace_evals.push(eval_count);
                first_eval = false;
            }

            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::Solver("non-finite gradient".into()));
            }

            if projected_grad_norm(&z, &grad, &lo, &hi, &frozen) < tol_phase {
                termination = Termination::Tolerance;
                continue 'phases;
            }

            // L-BFGS curvature update from the previous accepted state.
            if let HessianMode::Lbfgs { history } = opts.hessian_mode {
                if let Some((pz, pg)) = &prev_state {
                    let s: Vec<f64> = z.iter().zip(pz).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = grad.iter().zip(pg).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    let (sn, yn) = (dot(&s, &s).sqrt(), dot(&y, &y).sqrt());
                    if sy > 1e-10 * sn * yn {
                        memory.push_back((s, y, 1.0 / sy));
                        while memory.len() > history {
                            memory.pop_front();
                        }
                    }
                }
                prev_state = Some((z.clone(), grad.clone()));
            }

            let pinned = pinned_mask(&z, &grad, &lo, &hi, &frozen);
            let mut dir = match opts.hessian_mode {
                HessianMode::Exact => {
                    newton_direction(hess.as_ref().unwrap(), &grad, &pinned)
                        .unwrap_or_else(|| steepest(&grad, &pinned))
                }
                HessianMode::Lbfgs { .. } => {
                    let mut d = lbfgs_direction(&grad, &memory);
                    for (i, p) in pinned.iter().enumerate() {
                        if *p {
                            d[i] = 0.0;
                        }
                    }
                    d
                }
            };
            if dot(&dir, &grad) >= 0.0 {
                dir = steepest(&grad, &pinned);
            }

            // Projected backtracking line search. Acceptance needs Armijo
            // decrease of the barrier-augmented objective and a raw
            // objective no worse than the incumbent, so the recorded trace
            // is monotone.
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..=opts.ls_max_backtracks {
                let mut zt = z.clone();
                for i in 0..np {
                    zt[i] += alpha * dir[i];
                }
                clamp_to_box(&mut zt, &lo, &hi);
                let gdx: f64 = (0..np).map(|i| grad[i] * (zt[i] - z[i])).sum();
                if gdx >= 0.0 {
                    alpha *= BACKTRACK;
                    continue;
                }
                let mut trial = design.clone();
                trial.set_flat(&zt);
                let raw_t = model.value(&trial)?;
                eval_count += 1;
                let f_t = raw_t + barrier_value(constraints, &trial, mu);
                if raw_t.is_finite()
                    && f_t <= f_mu + ARMIJO_C1 * gdx
                    && raw_t <= raw_cur
                {
                    z = zt;
                    raw_cur = raw_t;
                    trace.push(raw_t);
                    trace_evals.push(eval_count);
                    if raw_t <= best_raw {
                        best_raw = raw_t;
                        best_z = z.clone();
                    }
                    // Objective stagnation at this barrier level.
                    if (f_mu - f_t).abs() < tol_phase * f_t.abs().max(1.0) {
                        termination = Termination::Tolerance;
                        accepted = true;
                        break;
                    }
                    accepted = true;
                    break;
                }
                alpha *= BACKTRACK;
            }
            if !accepted {
                termination = Termination::LineSearchFailure;
                break 'phases;
            }
            if termination == Termination::Tolerance {
                continue 'phases;
            }
        }
    }

    design.set_flat(&best_z);
    let feasible = design.pills.iter().all(|p| {
        length_constraint_jet(p, constraints.l_min, constraints.l_max)
            .iter()
            .all(|c| c.g <= FEAS_TOL)
    });

    Ok(SolveResult {
        design,
        objective_trace: trace,
        trace_evals,
        eval_count,
        termination,
        feasible,
    })
}

fn steepest(grad: &[f64], pinned: &[bool]) -> Vec<f64> {
    grad.iter()
        .zip(pinned)
        .map(|(g, p)| if *p { 0.0 } else { -g })
        .collect()
}

/// Finite-difference report for an objective model at (and around) a design
/// point.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub samples: usize,
    pub max_grad_rel_err: f64,
    pub max_hess_rel_err: f64,
    /// Sampled designs whose finite-difference stencil straddled a
    /// curvature kink of the distance branch structure (detected by
    /// forward/backward asymmetry of the differenced gradient). The
    /// Hessian is one-sided there and cannot be verified; such samples are
    /// replaced by additional perturbed ones.
    pub kinked_samples: usize,
    /// The analytic gradient vanished at every sampled point (plateau
    /// design); nothing to compare against.
    pub inactive: bool,
}

impl GradCheckReport {
    pub fn passed(&self, grad_tol: f64, hess_tol: f64) -> bool {
        self.inactive || (self.max_grad_rel_err < grad_tol && self.max_hess_rel_err < hess_tol)
    }
}

/// Compares analytic gradients and Hessians of `model` against central
/// differences at `samples` points: the given design plus seeded random
/// perturbations of it. Relative errors are normalized by the largest
/// finite-difference entry (at least 1).
///
/// The Hessian oracle differences the analytic gradient. A stencil that
/// straddles a branch-interface curvature jump shows up as a forward vs
/// backward disagreement of order the jump, far above the smooth-case
/// asymmetry O(step * f'''); such samples are skipped and replaced.
pub fn gradcheck(
    model: &dyn ObjectiveModel,
    x0: &DesignVector,
    step: f64,
    samples: usize,
) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x9d5c);
    let np = x0.n_params();
    let mut report = GradCheckReport {
        samples,
        max_grad_rel_err: 0.0,
        max_hess_rel_err: 0.0,
        kinked_samples: 0,
        inactive: true,
    };
    let grad_at = |design: &DesignVector, z0: &[f64], i: usize, h: f64| -> Result<Vec<f64>> {
        let mut z = z0.to_vec();
        z[i] += h;
        let mut d = design.clone();
        d.set_flat(&z);
        Ok(model.value_grad(&d)?.1)
    };

    let wanted = samples.max(1);
    let mut done = 0usize;
    let mut attempts = 0usize;
    while done < wanted && attempts < 2 * wanted + 4 {
        attempts += 1;
        let mut design = x0.clone();
        if attempts > 1 {
            let mut z = design.flat();
            for v in &mut z {
                *v += rng.gen_range(-0.02..0.02);
            }
            design.set_flat(&z);
        }
        let jet = model.jet(&design)?;
        if jet.grad.iter().all(|&g| g == 0.0) {
            done += 1;
            continue;
        }
        report.inactive = false;
        let z0 = design.flat();

        let mut fd_g = vec![0.0; np];
        let mut gscale = 1.0_f64;
        for i in 0..np {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[i] += step;
            zm[i] -= step;
            let mut dp = design.clone();
            dp.set_flat(&zp);
            let mut dm = design.clone();
            dm.set_flat(&zm);
            fd_g[i] = (model.value(&dp)? - model.value(&dm)?) / (2.0 * step);
            gscale = gscale.max(fd_g[i].abs());
        }
        let grad_err = (0..np)
            .map(|i| (jet.grad[i] - fd_g[i]).abs() / gscale)
            .fold(0.0_f64, f64::max);

        let mut central = vec![0.0; np * np];
        let mut asymmetry = 0.0_f64;
        let mut hscale = 1.0_f64;
        for i in 0..np {
            let gp = grad_at(&design, &z0, i, step)?;
            let gm = grad_at(&design, &z0, i, -step)?;
            for k in 0..np {
                central[i * np + k] = (gp[k] - gm[k]) / (2.0 * step);
                hscale = hscale.max(central[i * np + k].abs());
                // Second-difference asymmetry: O(step) when smooth, O(jump)
                // across an interface.
                asymmetry = asymmetry.max((gp[k] + gm[k] - 2.0 * jet.grad[k]).abs() / step);
            }
        }
        if asymmetry > 1e-3 * hscale {
            report.kinked_samples += 1;
            continue;
        }
        report.max_grad_rel_err = report.max_grad_rel_err.max(grad_err);
        for i in 0..np {
            for k in 0..np {
                report.max_hess_rel_err = report
                    .max_hess_rel_err
                    .max((jet.hess_at(i, k) - central[i * np + k]).abs() / hscale);
            }
        }
        done += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggregatorSpec;
    use crate::geometry::PillParams;
    use crate::grid::{project_field, GridSpec};
    use crate::objective::{ObjectiveKind, TargetField};
    use crate::transition::TransitionSpec;

    /// Convex quadratic over one pill block: f = 1/2 (z - z*)^T Q (z - z*).
    struct Quadratic {
        target: [f64; 5],
        diag: [f64; 5],
    }

    impl Quadratic {
        fn f(&self, z: &[f64]) -> f64 {
            (0..5)
                .map(|i| 0.5 * self.diag[i] * (z[i] - self.target[i]).powi(2))
                .sum()
        }
    }

    impl ObjectiveModel for Quadratic {
        fn value(&self, d: &DesignVector) -> crate::Result<f64> {
            Ok(self.f(&d.flat()))
        }
        fn value_grad(&self, d: &DesignVector) -> crate::Result<(f64, Vec<f64>)> {
            let z = d.flat();
            let g = (0..5)
                .map(|i| self.diag[i] * (z[i] - self.target[i]))
                .collect();
            Ok((self.f(&z), g))
        }
        fn jet(&self, d: &DesignVector) -> crate::Result<ScalarJet> {
            let (value, grad) = self.value_grad(d)?;
            let mut hess = vec![0.0; 25];
            for i in 0..5 {
                hess[i * 5 + i] = self.diag[i];
            }
            Ok(ScalarJet { value, grad, hess })
        }
    }

    fn wide_constraints() -> ConstraintSet {
        ConstraintSet {
            x_min: -10.0,
            x_max: 10.0,
            y_min: -10.0,
            y_max: 10.0,
            r_min: 1e-3,
            r_max: None,
            l_min: 1e-3,
            l_max: None,
        }
    }

    fn start() -> DesignVector {
        DesignVector::new(vec![PillParams::new(0.1, 0.1, 0.9, 0.6, 0.2).unwrap()])
    }

    #[test]
    fn newton_exact_on_quadratic() {
        let model = Quadratic {
            target: [0.3, 0.4, 0.8, 0.9, 0.3],
            diag: [2.0, 1.0, 4.0, 0.5, 3.0],
        };
        let opts = SolveOptions {
            tol: 1e-12,
            barrier_mu0: 1e-12,
            ..Default::default()
        };
        let res = minimize(&model, &wide_constraints(), &start(), &opts).unwrap();
        assert_eq!(res.termination, Termination::Tolerance);
        // One Newton step lands on the minimizer; trace = initial + one
        // accepted iterate.
        assert!(res.objective_trace.len() <= 2);
        let g = model.value_grad(&res.design).unwrap().1;
        let gnorm = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(gnorm < 1e-10, "gradient norm {gnorm}");
    }

    #[test]
    fn box_constrained_quadratic_lands_on_face() {
        let model = Quadratic {
            target: [1.5, 0.4, 0.8, 0.9, 0.3],
            diag: [2.0, 1.0, 4.0, 0.5, 3.0],
        };
        let mut cons = wide_constraints();
        cons.x_max = 1.0;
        let opts = SolveOptions {
            tol: 1e-12,
            barrier_mu0: 1e-12,
            ..Default::default()
        };
        let res = minimize(&model, &cons, &start(), &opts).unwrap();
        let z = res.design.flat();
        assert_eq!(z[0], 1.0);
        // KKT sign at the upper bound: interior gradient pulls outward.
        let g = model.value_grad(&res.design).unwrap().1;
        assert!(g[0] < 0.0);
        for i in 1..5 {
            assert!(g[i].abs() < 1e-10, "free coord {i} gradient {}", g[i]);
        }
        assert!(res.feasible);
    }

    #[test]
    fn lbfgs_converges_on_quadratic() {
        let model = Quadratic {
            target: [0.3, 0.4, 0.8, 0.9, 0.3],
            diag: [2.0, 1.0, 4.0, 0.5, 3.0],
        };
        let opts = SolveOptions {
            tol: 1e-10,
            barrier_mu0: 1e-12,
            hessian_mode: HessianMode::Lbfgs { history: 5 },
            max_iter: 200,
            ..Default::default()
        };
        let res = minimize(&model, &wide_constraints(), &start(), &opts).unwrap();
        assert_eq!(res.termination, Termination::Tolerance);
        let g = model.value_grad(&res.design).unwrap().1;
        assert!(g.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn trace_is_monotone_and_best_returned() {
        let grid = GridSpec::unit(24, 24);
        let tspec = TransitionSpec::default_smoothstep();
        let aspec = AggregatorSpec::Sum;
        let truth = DesignVector::new(vec![PillParams::new(0.25, 0.3, 0.75, 0.7, 0.12).unwrap()]);
        let target = TargetField::from_field(
            &project_field(&truth, &tspec, &aspec, &grid).unwrap(),
        );
        let eval =
            ObjectiveEval::new(ObjectiveKind::Tracking, &tspec, &aspec, &grid, &target).unwrap();
        let cons = ConstraintSet::for_grid(&grid, 0.05, 0.05);
        let x0 = DesignVector::new(vec![PillParams::new(0.2, 0.6, 0.7, 0.4, 0.08).unwrap()]);
        let opts = SolveOptions {
            tol: 1e-9,
            max_iter: 60,
            ..Default::default()
        };
        let res = minimize(&eval, &cons, &x0, &opts).unwrap();
        assert!(!res.objective_trace.is_empty());
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0], "trace not monotone: {} -> {}", w[0], w[1]);
        }
        assert!(res.trace_evals.windows(2).all(|w| w[1] > w[0]));
        let last = *res.objective_trace.last().unwrap();
        let returned = eval.value(&res.design).unwrap();
        assert!((returned - last).abs() < 1e-12);
        assert!(res.feasible);
    }

    #[test]
    fn frozen_radius_is_bit_exact() {
        let grid = GridSpec::unit(20, 20);
        let tspec = TransitionSpec::default_smoothstep();
        let aspec = AggregatorSpec::Sum;
        let truth = DesignVector::new(vec![PillParams::new(0.25, 0.3, 0.75, 0.7, 0.12).unwrap()]);
        let target = TargetField::from_field(
            &project_field(&truth, &tspec, &aspec, &grid).unwrap(),
        );
        let eval =
            ObjectiveEval::new(ObjectiveKind::Tracking, &tspec, &aspec, &grid, &target).unwrap();
        let cons = ConstraintSet::for_grid(&grid, 0.05, 0.05);
        let mut x0 = DesignVector::new(vec![PillParams::new(0.2, 0.6, 0.7, 0.4, 0.0775).unwrap()]);
        x0.radius_frozen[0] = true;
        let opts = SolveOptions {
            max_iter: 30,
            ..Default::default()
        };
        let res = minimize(&eval, &cons, &x0, &opts).unwrap();
        assert_eq!(res.design.pills[0].r, 0.0775);
    }

    #[test]
    fn deterministic_repeat() {
        let grid = GridSpec::unit(16, 16);
        let tspec = TransitionSpec::default_smoothstep();
        let aspec = AggregatorSpec::Softmax { beta: 10.0 };
        let truth = DesignVector::new(vec![PillParams::new(0.25, 0.3, 0.75, 0.7, 0.12).unwrap()]);
        let target = TargetField::from_field(
            &project_field(&truth, &tspec, &aspec, &grid).unwrap(),
        );
        let eval =
            ObjectiveEval::new(ObjectiveKind::Tracking, &tspec, &aspec, &grid, &target).unwrap();
        let cons = ConstraintSet::for_grid(&grid, 0.05, 0.05);
        let x0 = DesignVector::new(vec![PillParams::new(0.3, 0.55, 0.6, 0.35, 0.09).unwrap()]);
        let opts = SolveOptions {
            max_iter: 25,
            ..Default::default()
        };
        let a = minimize(&eval, &cons, &x0, &opts).unwrap();
        let b = minimize(&eval, &cons, &x0, &opts).unwrap();
        assert_eq!(a.design.flat(), b.design.flat());
        assert_eq!(a.objective_trace, b.objective_trace);
        assert_eq!(a.eval_count, b.eval_count);
    }

    #[test]
    fn line_search_failure_reported() {
        /// Claims a descent direction exists but never actually decreases.
        struct Liar;
        impl ObjectiveModel for Liar {
            fn value(&self, d: &DesignVector) -> crate::Result<f64> {
                let z = d.flat();
                Ok(if z[0] == 0.1 { 0.0 } else { 1.0 })
            }
            fn value_grad(&self, d: &DesignVector) -> crate::Result<(f64, Vec<f64>)> {
                Ok((self.value(d)?, vec![1.0, 0.0, 0.0, 0.0, 0.0]))
            }
            fn jet(&self, d: &DesignVector) -> crate::Result<ScalarJet> {
                let (value, grad) = self.value_grad(d)?;
                let mut hess = vec![0.0; 25];
                for i in 0..5 {
                    hess[i * 5 + i] = 1.0;
                }
                Ok(ScalarJet { value, grad, hess })
            }
        }
        let opts = SolveOptions {
            barrier_mu0: 1e-12,
            ls_max_backtracks: 8,
            ..Default::default()
        };
        let res = minimize(&Liar, &wide_constraints(), &start(), &opts).unwrap();
        assert_eq!(res.termination, Termination::LineSearchFailure);
        assert_eq!(res.design.flat(), start().flat());
    }

    #[test]
    fn gradcheck_tracking_three_pills() {
        let grid = GridSpec::unit(12, 12);
        let tspec = TransitionSpec::default_smoothstep();
        let aspec = AggregatorSpec::PNorm { p: 5.0 };
        let truth = DesignVector::new(vec![
            PillParams::new(0.2, 0.25, 0.8, 0.3, 0.1).unwrap(),
            PillParams::new(0.5, 0.2, 0.55, 0.8, 0.09).unwrap(),
        ]);
        let target = TargetField::from_field(
            &project_field(&truth, &tspec, &aspec, &grid).unwrap(),
        );
        let eval =
            ObjectiveEval::new(ObjectiveKind::Tracking, &tspec, &aspec, &grid, &target).unwrap();
        let x0 = DesignVector::new(vec![
            PillParams::new(0.22, 0.31, 0.67, 0.42, 0.09).unwrap(),
            PillParams::new(0.4, 0.7, 0.8, 0.65, 0.07).unwrap(),
            PillParams::new(0.15, 0.55, 0.45, 0.8, 0.08).unwrap(),
        ]);
        let report = gradcheck(&eval, &x0, 1e-6, 3).unwrap();
        assert!(!report.inactive);
        assert!(report.max_grad_rel_err < 1e-6, "{report:?}");
        assert!(report.max_hess_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn gradcheck_flags_plateau_as_inactive() {
        let grid = GridSpec::unit(10, 10);
        let tspec = TransitionSpec::default_smoothstep();
        let aspec = AggregatorSpec::Sum;
        let target = TargetField::zeros(10, 10);
        let eval =
            ObjectiveEval::new(ObjectiveKind::Reward, &tspec, &aspec, &grid, &target).unwrap();
        // Reward with an all-zero target: gradient identically zero.
        let x0 = start();
        let report = gradcheck(&eval, &x0, 1e-6, 2).unwrap();
        assert!(report.inactive);
    }
}
