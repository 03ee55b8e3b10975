//! Module-by-module finite-difference sweeps over random configurations.
//!
//! Every analytic jet in the chain is compared against central differences
//! of the value one level below it (Hessians against differences of the
//! verified gradient). Configurations whose stencil would straddle a
//! distance-branch interface or a clipping point are resampled: the
//! derivatives under test exist only on the twice-differentiable part of
//! the domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{self, AggregatorSpec};
use crate::geometry::{self, PillParams, Point2};
use crate::grid::{element_average_jet, DesignVector, GridSpec};
use crate::objective::{ObjectiveEval, ObjectiveKind, TargetField};
use crate::transition::{self, TransitionSpec};
use crate::Result;

/// Outcome of one module sweep.
#[derive(Debug, Clone)]
pub struct CheckSummary {
    pub name: String,
    pub samples: usize,
    pub max_grad_rel_err: f64,
    pub max_hess_rel_err: f64,
    /// Configurations resampled because a kink fell inside the stencil.
    pub resampled: usize,
}

impl CheckSummary {
    pub fn passed(&self, grad_tol: f64, hess_tol: f64) -> bool {
        self.max_grad_rel_err < grad_tol && self.max_hess_rel_err < hess_tol
    }
}

fn random_pill(rng: &mut ChaCha8Rng) -> PillParams {
    loop {
        let px = rng.gen_range(0.05..0.95);
        let py = rng.gen_range(0.05..0.95);
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let len: f64 = rng.gen_range(0.2..0.6);
        let (qx, qy) = (px + len * ang.cos(), py + len * ang.sin());
        if let Ok(p) = PillParams::new(px, py, qx, qy, rng.gen_range(0.06..0.2)) {
            return p;
        }
    }
}

/// Rejects query points whose finite-difference stencil could cross the
/// projection-parameter branch boundaries or leave the distance
/// twice-differentiable region.
fn clear_of_branch_lines(x: Point2, pill: &PillParams, margin: f64) -> bool {
    let (ux, uy) = (pill.qx - pill.px, pill.qy - pill.py);
    let len2 = ux * ux + uy * uy;
    let t = ((x.x - pill.px) * ux + (x.y - pill.py) * uy) / len2;
    if t.abs() < margin || (1.0 - t).abs() < margin {
        return false;
    }
    let d = geometry::unsigned_distance(x, pill).unwrap_or(0.0);
    d > 1e-3
}

/// Geometry: distance jets of random non-singular (x, pill) pairs.
pub fn geometry_jets(samples: usize, seed: u64) -> Result<CheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = CheckSummary {
        name: "geometry.distance_jet".into(),
        samples,
        max_grad_rel_err: 0.0,
        max_hess_rel_err: 0.0,
        resampled: 0,
    };
    let mut done = 0;
    while done < samples {
        let pill = random_pill(&mut rng);
        let x = Point2::new(rng.gen_range(-0.3..1.3), rng.gen_range(-0.3..1.3));
        if !clear_of_branch_lines(x, &pill, 1e-2) {
            summary.resampled += 1;
            continue;
        }
        let jet = geometry::distance_jet(x, &pill, false)?;
        if jet.singular {
            summary.resampled += 1;
            continue;
        }
        let z0 = pill.params();
        let h = 1e-6;
        let value = |z: [f64; 5]| {
            geometry::unsigned_distance(x, &PillParams::from_params(z)).unwrap()
        };
        let grad = |z: [f64; 5]| geometry::distance_jet(x, &PillParams::from_params(z), false)
            .unwrap()
            .grad;

        let mut gscale = 1.0_f64;
        let mut fd_g = [0.0; 5];
        for i in 0..5 {
            let mut zp = z0;
            let mut zm = z0;
            zp[i] += h;
            zm[i] -= h;
            fd_g[i] = (value(zp) - value(zm)) / (2.0 * h);
            gscale = gscale.max(fd_g[i].abs());
        }
        for i in 0..5 {
            summary.max_grad_rel_err = summary
                .max_grad_rel_err
                .max((jet.grad[i] - fd_g[i]).abs() / gscale);
        }

        let mut hscale = 1.0_f64;
        let mut fd_h = [[0.0; 5]; 5];
        for i in 0..5 {
            let mut zp = z0;
            let mut zm = z0;
            zp[i] += h;
            zm[i] -= h;
            let (gp, gm) = (grad(zp), grad(zm));
            for k in 0..5 {
                fd_h[i][k] = (gp[k] - gm[k]) / (2.0 * h);
                hscale = hscale.max(fd_h[i][k].abs());
            }
        }
        for i in 0..5 {
            for k in 0..5 {
                summary.max_hess_rel_err = summary
                    .max_hess_rel_err
                    .max((jet.hess[i][k] - fd_h[i][k]).abs() / hscale);
            }
        }
        done += 1;
    }
    Ok(summary)
}

/// Transition chain: pseudo-density jets of a single pill inside the band.
pub fn density_jets(tspec: &TransitionSpec, samples: usize, seed: u64) -> Result<CheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = CheckSummary {
        name: "transition.pseudo_density_jet".into(),
        samples,
        max_grad_rel_err: 0.0,
        max_hess_rel_err: 0.0,
        resampled: 0,
    };
    let (lo, hi) = tspec.support();
    let mut done = 0;
    while done < samples {
        let pill = random_pill(&mut rng);
        let x = Point2::new(rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2));
        let d = geometry::signed_distance(x, &pill)?;
        // Stay inside the band, away from the clipping points and the
        // asymmetric interface kink at d = 0.
        if d < lo + 1e-3 || d > hi - 1e-3 || d.abs() < 1e-3 {
            summary.resampled += 1;
            continue;
        }
        if !clear_of_branch_lines(x, &pill, 1e-2) {
            summary.resampled += 1;
            continue;
        }
        let jet = transition::pseudo_density_jet(tspec, &pill, x)?;
        if jet.singular {
            summary.resampled += 1;
            continue;
        }
        let z0 = pill.params();
        let h = 1e-6;
        let value = |z: [f64; 5]| {
            transition::pseudo_density(tspec, &PillParams::from_params(z), x).unwrap()
        };
        let grad = |z: [f64; 5]| {
            transition::pseudo_density_grad(tspec, &PillParams::from_params(z), x)
                .unwrap()
                .1
        };
        let mut gscale = 1.0_f64;
        let mut fd_g = [0.0; 5];
        for i in 0..5 {
            let mut zp = z0;
            let mut zm = z0;
            zp[i] += h;
            zm[i] -= h;
            fd_g[i] = (value(zp) - value(zm)) / (2.0 * h);
            gscale = gscale.max(fd_g[i].abs());
        }
        for i in 0..5 {
            summary.max_grad_rel_err = summary
                .max_grad_rel_err
                .max((jet.grad[i] - fd_g[i]).abs() / gscale);
        }
        let mut hscale = 1.0_f64;
        let mut fd_h = [[0.0; 5]; 5];
        for i in 0..5 {
            let mut zp = z0;
            let mut zm = z0;
            zp[i] += h;
            zm[i] -= h;
            let (gp, gm) = (grad(zp), grad(zm));
            for k in 0..5 {
                fd_h[i][k] = (gp[k] - gm[k]) / (2.0 * h);
                hscale = hscale.max(fd_h[i][k].abs());
            }
        }
        for i in 0..5 {
            for k in 0..5 {
                summary.max_hess_rel_err = summary
                    .max_hess_rel_err
                    .max((jet.hess[i][k] - fd_h[i][k]).abs() / hscale);
            }
        }
        done += 1;
    }
    Ok(summary)
}

/// Aggregation partials against differences of the operator value.
pub fn aggregation_partials(
    aspec: &AggregatorSpec,
    samples: usize,
    seed: u64,
) -> Result<CheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = CheckSummary {
        name: "aggregation.aggregate_partials".into(),
        samples,
        max_grad_rel_err: 0.0,
        max_hess_rel_err: 0.0,
        resampled: 0,
    };
    for _ in 0..samples {
        let n = rng.gen_range(1..7);
        let rho: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let parts = aggregation::aggregate_partials(aspec, &rho)?;
        let h = 1e-6;
        let mut gscale = 1.0_f64;
        let mut fd1 = vec![0.0; n];
        for i in 0..n {
            let mut rp = rho.clone();
            let mut rm = rho.clone();
            rp[i] += h;
            rm[i] -= h;
            fd1[i] = (aggregation::aggregate_value(aspec, &rp)?
                - aggregation::aggregate_value(aspec, &rm)?)
                / (2.0 * h);
            gscale = gscale.max(fd1[i].abs());
        }
        for i in 0..n {
            summary.max_grad_rel_err = summary
                .max_grad_rel_err
                .max((parts.d1[i] - fd1[i]).abs() / gscale);
        }
        let mut hscale = 1.0_f64;
        let mut fd2 = vec![0.0; n * n];
        for i in 0..n {
            let mut rp = rho.clone();
            let mut rm = rho.clone();
            rp[i] += h;
            rm[i] -= h;
            let pp = aggregation::aggregate_partials(aspec, &rp)?;
            let pm = aggregation::aggregate_partials(aspec, &rm)?;
            for k in 0..n {
                fd2[i * n + k] = (pp.d1[k] - pm.d1[k]) / (2.0 * h);
                hscale = hscale.max(fd2[i * n + k].abs());
            }
        }
        for i in 0..n * n {
            summary.max_hess_rel_err = summary
                .max_hess_rel_err
                .max((parts.d2[i] - fd2[i]).abs() / hscale);
        }
    }
    Ok(summary)
}

/// Whether any quadrature point of the grid sits close to a branch line or
/// band edge of any pill, which would make element Hessians one-sided.
fn design_clear_of_kinks(
    design: &DesignVector,
    tspec: &TransitionSpec,
    grid: &GridSpec,
) -> Result<bool> {
    let (lo, hi) = tspec.support();
    for e in 0..grid.n_elements() {
        for x in crate::grid::quad_points(grid, e, grid.quad_order)? {
            for pill in &design.pills {
                let d = geometry::signed_distance(x, pill)?;
                if d <= lo || d >= hi {
                    continue;
                }
                if (d - lo).abs() < 1e-4 || (hi - d).abs() < 1e-4 || d.abs() < 1e-4 {
                    return Ok(false);
                }
                if !clear_of_branch_lines(x, pill, 1e-4) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

fn random_design(rng: &mut ChaCha8Rng, n: usize) -> DesignVector {
    DesignVector::new((0..n).map(|_| random_pill(rng)).collect())
}

/// Grid: element averages of two pills at order 3 against differences of
/// the element value and gradient.
pub fn element_jets(
    tspec: &TransitionSpec,
    aspec: &AggregatorSpec,
    samples: usize,
    seed: u64,
) -> Result<CheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridSpec::unit(10, 10).with_quad_order(3);
    let mut summary = CheckSummary {
        name: "grid.element_average_jet".into(),
        samples,
        max_grad_rel_err: 0.0,
        max_hess_rel_err: 0.0,
        resampled: 0,
    };
    let mut done = 0;
    while done < samples {
        let design = random_design(&mut rng, 2);
        let e = rng.gen_range(0..grid.n_elements());
        // Only elements with sensitivity are informative; kink-adjacent
        // samples are replaced.
        let cell = GridSpec {
            nx: 1,
            ny: 1,
            x0: grid.x0 + (e % grid.nx) as f64 * grid.hx(),
            y0: grid.y0 + (e / grid.nx) as f64 * grid.hy(),
            lx: grid.hx(),
            ly: grid.hy(),
            pad: 0.0,
            quad_order: 3,
        };
        if !design_clear_of_kinks(&design, tspec, &cell)? {
            summary.resampled += 1;
            continue;
        }
        let jet = element_average_jet(&design, tspec, aspec, &grid, e)?;
        if jet.grad.iter().all(|&g| g.abs() < 1e-12) {
            summary.resampled += 1;
            continue;
        }
        let np = design.n_params();
        let z0 = design.flat();
        let h = 1e-6;
        let value = |z: &[f64]| {
            let mut d = design.clone();
            d.set_flat(z);
            element_average_jet(&d, tspec, aspec, &grid, e).unwrap().value
        };
        let grad = |z: &[f64]| {
            let mut d = design.clone();
            d.set_flat(z);
            element_average_jet(&d, tspec, aspec, &grid, e).unwrap().grad
        };
        let mut gscale = 1.0_f64;
        let mut fd_g = vec![0.0; np];
        for i in 0..np {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[i] += h;
            zm[i] -= h;
            fd_g[i] = (value(&zp) - value(&zm)) / (2.0 * h);
            gscale = gscale.max(fd_g[i].abs());
        }
        for i in 0..np {
            summary.max_grad_rel_err = summary
                .max_grad_rel_err
                .max((jet.grad[i] - fd_g[i]).abs() / gscale);
        }
        let mut hscale = 1.0_f64;
        let mut fd_h = vec![0.0; np * np];
        for i in 0..np {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[i] += h;
            zm[i] -= h;
            let (gp, gm) = (grad(&zp), grad(&zm));
            for k in 0..np {
                fd_h[i * np + k] = (gp[k] - gm[k]) / (2.0 * h);
                hscale = hscale.max(fd_h[i * np + k].abs());
            }
        }
        for i in 0..np {
            for k in 0..np {
                summary.max_hess_rel_err = summary
                    .max_hess_rel_err
                    .max((jet.hess_at(i, k) - fd_h[i * np + k]).abs() / hscale);
            }
        }
        done += 1;
    }
    Ok(summary)
}

/// Objectives: tracking and reward jets of three pills against differences
/// of the functional value and gradient.
pub fn objective_jets(
    kind: ObjectiveKind,
    tspec: &TransitionSpec,
    aspec: &AggregatorSpec,
    samples: usize,
    seed: u64,
) -> Result<CheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridSpec::unit(14, 14).with_quad_order(3);
    let truth = DesignVector::new(vec![
        PillParams::new(0.2, 0.25, 0.8, 0.3, 0.1).unwrap(),
        PillParams::new(0.5, 0.2, 0.55, 0.8, 0.09).unwrap(),
    ]);
    let target = TargetField::from_field(&crate::grid::project_field(
        &truth, tspec, aspec, &grid,
    )?);
    let name = match kind {
        ObjectiveKind::Tracking => "objective.tracking_jet",
        ObjectiveKind::Reward => "objective.reward_jet",
    };
    let mut summary = CheckSummary {
        name: name.into(),
        samples,
        max_grad_rel_err: 0.0,
        max_hess_rel_err: 0.0,
        resampled: 0,
    };
    let eval = ObjectiveEval::new(kind, tspec, aspec, &grid, &target)?;
    let mut done = 0;
    let mut attempts = 0;
    while done < samples && attempts < 20 * samples + 50 {
        attempts += 1;
        let design = random_design(&mut rng, 3);
        if !design_clear_of_kinks(&design, tspec, &grid)? {
            summary.resampled += 1;
            continue;
        }
        let jet = eval.jet(&design)?;
        if jet.grad.iter().all(|&g| g.abs() < 1e-10) {
            summary.resampled += 1;
            continue;
        }
        let np = design.n_params();
        let z0 = design.flat();
        let h = 1e-6;
        let value = |z: &[f64]| {
            let mut d = design.clone();
            d.set_flat(z);
            eval.value(&d).unwrap()
        };
        let grad = |z: &[f64]| {
            let mut d = design.clone();
            d.set_flat(z);
            eval.value_grad(&d).unwrap().1
        };
        let mut gscale = 1.0_f64;
        let mut fd_g = vec![0.0; np];
        for i in 0..np {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[i] += h;
            zm[i] -= h;
            fd_g[i] = (value(&zp) - value(&zm)) / (2.0 * h);
            gscale = gscale.max(fd_g[i].abs());
        }
        for i in 0..np {
            summary.max_grad_rel_err = summary
                .max_grad_rel_err
                .max((jet.grad[i] - fd_g[i]).abs() / gscale);
        }
        let mut hscale = 1.0_f64;
        let mut fd_h = vec![0.0; np * np];
        for i in 0..np {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[i] += h;
            zm[i] -= h;
            let (gp, gm) = (grad(&zp), grad(&zm));
            for k in 0..np {
                fd_h[i * np + k] = (gp[k] - gm[k]) / (2.0 * h);
                hscale = hscale.max(fd_h[i * np + k].abs());
            }
        }
        for i in 0..np {
            for k in 0..np {
                summary.max_hess_rel_err = summary
                    .max_hess_rel_err
                    .max((jet.hess_at(i, k) - fd_h[i * np + k]).abs() / hscale);
            }
        }
        done += 1;
    }
    summary.samples = done;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transition::TransitionKind;

    #[test]
    fn module_sweeps_pass_reference_tolerances() {
        let tspec = TransitionSpec::default_smoothstep();
        let aspec = AggregatorSpec::PNorm { p: 7.0 };
        let g = geometry_jets(60, 1).unwrap();
        assert!(g.passed(1e-6, 1e-4), "{g:?}");
        let d = density_jets(&tspec, 60, 2).unwrap();
        assert!(d.passed(1e-6, 1e-4), "{d:?}");
        let a = aggregation_partials(&aspec, 60, 3).unwrap();
        assert!(a.passed(1e-6, 1e-4), "{a:?}");
        let e = element_jets(&tspec, &aspec, 8, 4).unwrap();
        assert!(e.passed(1e-6, 1e-4), "{e:?}");
        let t = objective_jets(ObjectiveKind::Tracking, &tspec, &aspec, 3, 5).unwrap();
        assert!(t.passed(1e-6, 1e-4), "{t:?}");
    }

    #[test]
    fn asymmetric_transition_sweep() {
        let tspec =
            TransitionSpec::new(TransitionKind::Asymmetric { k: 3, ext: 0.2 }, 0.1).unwrap();
        let d = density_jets(&tspec, 40, 6).unwrap();
        assert!(d.passed(1e-6, 1e-4), "{d:?}");
    }
}
