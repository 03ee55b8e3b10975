//! Orchestration above the solver: cross / randomized-cross seeding, the
//! staged exploration-bridging-convergence schedule with warm starts,
//! pruning and merging heuristics based on area/uniqueness ratios, and the
//! residual-guided additive refinement loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::AggregatorSpec;
use crate::geometry::{PillParams, Point2};
use crate::grid::{self, DesignVector, GridSpec};
use crate::objective::{residual_mask, ConstraintSet, ObjectiveEval, ObjectiveKind, TargetField};
use crate::solver::{self, SolveOptions, Termination};
use crate::transition::{TransitionKind, TransitionSpec};
use crate::{Error, Result};

/// One stage of the schedule: objective, temporary radius inflation,
/// termination settings and the field model to use.
#[derive(Debug, Clone)]
pub struct StageConfig {
    pub objective: ObjectiveKind,
    /// Radius inflation applied inside evaluation only.
    pub ext: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Freeze every radius for the duration of this stage.
    pub radius_frozen: bool,
    pub tspec: TransitionSpec,
    pub aspec: AggregatorSpec,
}

/// Thresholds of the pruning and merging heuristics.
#[derive(Debug, Clone)]
pub struct HeuristicConfig {
    /// Minimum area ratio.
    pub ar_min: f64,
    /// Minimum uniqueness ratio.
    pub ur_min: f64,
    /// Angular tolerance for grouping, degrees.
    pub theta_lim_deg: f64,
    /// Maximum distance for grouping, domain units.
    pub d_min: f64,
    pub proximity: Proximity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proximity {
    CenterDistance,
    SegmentDistance,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        HeuristicConfig {
            ar_min: 0.15,
            ur_min: 1e-4,
            theta_lim_deg: 10.0,
            d_min: 0.15,
            proximity: Proximity::CenterDistance,
        }
    }
}

/// Settings of the additive refinement loop.
#[derive(Debug, Clone)]
pub struct RefinementConfig {
    /// Residual deficit threshold of the insertion mask.
    pub tau_res: f64,
    /// Radius of freshly seeded pills.
    pub r_seed: f64,
    /// Optional fixed radius held throughout the candidate solves.
    pub fixed_r: Option<f64>,
    /// Maximum number of accepted additions.
    pub k_max: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            tau_res: 0.2,
            r_seed: 0.05,
            fixed_r: None,
            k_max: 5,
            eps_abs: 0.0,
            eps_rel: 1e-3,
        }
    }
}

/// The default three-stage schedule: reward exploration with inflated radii
/// and frozen r, tracking under reduced inflation, tracking at full
/// resolution under tight tolerance.
pub fn default_stages(tspec: &TransitionSpec, aspec: &AggregatorSpec) -> Vec<StageConfig> {
    vec![
        StageConfig {
            objective: ObjectiveKind::Reward,
            ext: 0.2,
            tol: 1e-2,
            max_iter: 100,
            radius_frozen: true,
            tspec: tspec.clone(),
            aspec: *aspec,
        },
        StageConfig {
            objective: ObjectiveKind::Tracking,
            ext: 0.1,
            tol: 1e-3,
            max_iter: 100,
            radius_frozen: false,
            tspec: tspec.clone(),
            aspec: *aspec,
        },
        StageConfig {
            objective: ObjectiveKind::Tracking,
            ext: 0.0,
            tol: 1e-7,
            max_iter: 100,
            radius_frozen: false,
            tspec: tspec.clone(),
            aspec: *aspec,
        },
    ]
}

/// Two-stage schedule for single-feature reconstructions: reward
/// exploration through an asymmetric transition with frozen radius, then
/// symmetric tracking with the radius released.
pub fn single_feature_stages(delta: f64, flank_ext: f64) -> Result<Vec<StageConfig>> {
    let explore = TransitionSpec::new(TransitionKind::Asymmetric { k: 3, ext: flank_ext }, delta)?;
    let track = TransitionSpec::new(TransitionKind::Smoothstep { k: 3 }, delta)?;
    Ok(vec![
        StageConfig {
            objective: ObjectiveKind::Reward,
            ext: 0.0,
            tol: 1e-2,
            max_iter: 60,
            radius_frozen: true,
            tspec: explore,
            aspec: AggregatorSpec::Sum,
        },
        StageConfig {
            objective: ObjectiveKind::Tracking,
            ext: 0.0,
            tol: 1e-8,
            max_iter: 100,
            radius_frozen: false,
            tspec: track,
            aspec: AggregatorSpec::Sum,
        },
    ])
}

/// Deterministic cross seeding: the domain box is split into `rows x cols`
/// cells and each cell receives up to two diagonal segments, clipped to the
/// box. Placement runs cell row-major from the bottom-left, first diagonal
/// before second, truncated at `n` pills.
pub fn cross_init(
    rows: usize,
    cols: usize,
    n: usize,
    r0: f64,
    constraints: &ConstraintSet,
) -> Result<DesignVector> {
    build_cross(rows, cols, n, r0, constraints, None)
}

/// Cross seeding with each diagonal rotated about its center by an
/// independent uniform angle in `[-theta_max, theta_max]`; deterministic
/// under the seed.
pub fn randomized_cross_init(
    rows: usize,
    cols: usize,
    n: usize,
    r0: f64,
    constraints: &ConstraintSet,
    theta_max: f64,
    seed: u64,
) -> Result<DesignVector> {
    build_cross(
        rows,
        cols,
        n,
        r0,
        constraints,
        Some((theta_max, ChaCha8Rng::seed_from_u64(seed))),
    )
}

fn build_cross(
    rows: usize,
    cols: usize,
    n: usize,
    r0: f64,
    constraints: &ConstraintSet,
    mut randomize: Option<(f64, ChaCha8Rng)>,
) -> Result<DesignVector> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidConfig("cross seeding needs rows, cols >= 1".into()));
    }
    if n > 2 * rows * cols {
        return Err(Error::Contract(format!(
            "{n} pills exceed the capacity {} of a {rows} x {cols} cross seeding",
            2 * rows * cols
        )));
    }
    if r0 <= 0.0 {
        return Err(Error::InvalidConfig("seed radius must be > 0".into()));
    }
    let dx = (constraints.x_max - constraints.x_min) / cols as f64;
    let dy = (constraints.y_max - constraints.y_min) / rows as f64;
    let diag = (dx * dx + dy * dy).sqrt();
    let len = constraints
        .l_max
        .map_or(0.95 * diag, |lmax| (0.95 * diag).min(lmax));
    let u_hat = (dx / diag, dy / diag);
    let v_hat = (dx / diag, -dy / diag);

    let mut pills = Vec::with_capacity(n);
    'outer: for iy in 0..rows {
        for ix in 0..cols {
            let c = (
                constraints.x_min + (ix as f64 + 0.5) * dx,
                constraints.y_min + (iy as f64 + 0.5) * dy,
            );
            for dir in [u_hat, v_hat] {
                if pills.len() >= n {
                    break 'outer;
                }
                let mut dir = dir;
                if let Some((theta_max, rng)) = randomize.as_mut() {
                    let theta = if *theta_max > 0.0 {
                        rng.gen_range(-*theta_max..*theta_max)
                    } else {
                        0.0
                    };
                    let (s, co) = theta.sin_cos();
                    dir = (co * dir.0 - s * dir.1, s * dir.0 + co * dir.1);
                }
                let half = 0.5 * len;
                let p = (
                    (c.0 - half * dir.0).clamp(constraints.x_min, constraints.x_max),
                    (c.1 - half * dir.1).clamp(constraints.y_min, constraints.y_max),
                );
                let q = (
                    (c.0 + half * dir.0).clamp(constraints.x_min, constraints.x_max),
                    (c.1 + half * dir.1).clamp(constraints.y_min, constraints.y_max),
                );
                pills.push(PillParams::new(p.0, p.1, q.0, q.1, r0)?);
            }
        }
    }
    Ok(DesignVector::new(pills))
}

/// Trace row of a staged run: cumulative evaluation index, objective value
/// of the stage's active functional, stage number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub eval_index: usize,
    pub objective: f64,
    pub stage: usize,
}

/// Outcome bookkeeping per stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub termination: Termination,
    pub evals: usize,
    /// The stage ended no better than it started and its result was
    /// discarded in favor of the warm start.
    pub rolled_back: bool,
}

#[derive(Debug, Clone)]
pub struct StagedRun {
    pub design: DesignVector,
    pub trace: Vec<TraceRow>,
    pub stages: Vec<StageOutcome>,
}

/// Runs the stage list sequentially with design warm starts. A stage is
/// accepted only if it did not end worse than it started; otherwise its
/// warm-start design is retained. Solver failures roll the stage back and
/// the schedule continues with the best design so far.
pub fn run_staged(
    target: &TargetField,
    init: &DesignVector,
    stages: &[StageConfig],
    grid: &GridSpec,
    constraints: &ConstraintSet,
    opts: &SolveOptions,
    parallel: bool,
) -> Result<StagedRun> {
    if stages.is_empty() {
        return Err(Error::Contract("staged run without stages".into()));
    }
    if init.n() == 0 {
        return Err(Error::Contract("staged run needs at least one pill".into()));
    }
    for w in stages.windows(2) {
        if w[1].ext > w[0].ext {
            return Err(Error::InvalidConfig(
                "radius inflation must be non-increasing across stages".into(),
            ));
        }
    }

    let mut design = init.clone();
    let mut trace = Vec::new();
    let mut outcomes = Vec::new();
    let mut eval_offset = 0usize;

    for (si, stage) in stages.iter().enumerate() {
        let eval = ObjectiveEval::new(
            stage.objective,
            &stage.tspec,
            &stage.aspec,
            grid,
            target,
        )?
        .with_radius_inflation(stage.ext)
        .with_parallel(parallel);

        let mut start = design.clone();
        if stage.radius_frozen {
            start.radius_frozen.iter_mut().for_each(|f| *f = true);
        }
        let stage_opts = SolveOptions {
            tol: stage.tol,
            max_iter: stage.max_iter,
            ..opts.clone()
        };

        match solver::minimize(&eval, constraints, &start, &stage_opts) {
            Ok(res) => {
                let initial = res.objective_trace[0];
                let fin = *res.objective_trace.last().unwrap();
                let rolled_back = fin > initial;
                if !rolled_back {
                    design.pills = res.design.pills;
                }
                for (f, e) in res.objective_trace.iter().zip(&res.trace_evals) {
                    trace.push(TraceRow {
                        eval_index: eval_offset + e,
                        objective: *f,
                        stage: si,
                    });
                }
                eval_offset += res.eval_count;
                outcomes.push(StageOutcome {
                    stage: si,
                    initial_objective: initial,
                    final_objective: fin,
                    termination: res.termination,
                    evals: res.eval_count,
                    rolled_back,
                });
            }
            Err(err) => {
                // Stage failed outright; keep the warm start.
                outcomes.push(StageOutcome {
                    stage: si,
                    initial_objective: f64::NAN,
                    final_objective: f64::NAN,
                    termination: Termination::LineSearchFailure,
                    evals: 0,
                    rolled_back: true,
                });
                let _ = err;
            }
        }
    }

    Ok(StagedRun {
        design,
        trace,
        stages: outcomes,
    })
}

/// Soft area and exclusive-support ratios of every pill: `AR_m` is the
/// pill's share of the total soft area, `UR_m` the fraction of its own area
/// not overlapped by any other pill. The footprint is the pill's own
/// pseudo-density at zero inflation, integrated with the grid's quadrature.
pub fn area_uniqueness_ratios(
    design: &DesignVector,
    tspec: &TransitionSpec,
    grid: &GridSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = design.n();
    if n == 0 {
        return Err(Error::Contract("area ratios of an empty design".into()));
    }
    let q = grid.quad_order;
    let cell = grid.cell_area();
    let w = cell / (q * q) as f64;
    let mut area = vec![0.0; n];
    let mut unique = vec![0.0; n];
    let mut chi = vec![0.0; n];
    for e in 0..grid.n_elements() {
        for x in grid::quad_points(grid, e, q)? {
            for (m, pill) in design.pills.iter().enumerate() {
                chi[m] = crate::transition::pseudo_density(tspec, pill, x)?;
            }
            for m in 0..n {
                area[m] += w * chi[m];
                let mut u = chi[m];
                for (j, &c) in chi.iter().enumerate() {
                    if j != m {
                        u *= 1.0 - c;
                    }
                }
                unique[m] += w * u;
            }
        }
    }
    let total: f64 = area.iter().sum();
    let ar = area
        .iter()
        .map(|a| if total > 0.0 { a / total } else { 0.0 })
        .collect();
    let ur = area
        .iter()
        .zip(&unique)
        .map(|(a, u)| if *a > 0.0 { u / a } else { 0.0 })
        .collect();
    Ok((ar, ur))
}

/// Removes pills whose area ratio or uniqueness ratio falls below the
/// thresholds. Survivors keep their order; the result may be empty.
pub fn prune(
    design: &DesignVector,
    ar: &[f64],
    ur: &[f64],
    cfg: &HeuristicConfig,
) -> DesignVector {
    let mut out = DesignVector::empty();
    for (i, pill) in design.pills.iter().enumerate() {
        if ar[i] >= cfg.ar_min && ur[i] >= cfg.ur_min {
            out.push(*pill, design.radius_frozen[i]);
        }
    }
    out
}

fn undirected_angle_diff(a: &PillParams, b: &PillParams) -> f64 {
    let ta = (a.qy - a.py).atan2(a.qx - a.px);
    let tb = (b.qy - b.py).atan2(b.qx - b.px);
    let mut d = (ta - tb).abs() % std::f64::consts::PI;
    if d > std::f64::consts::FRAC_PI_2 {
        d = std::f64::consts::PI - d;
    }
    d
}

fn center_distance(a: &PillParams, b: &PillParams) -> f64 {
    let (ca, cb) = (a.center(), b.center());
    ((ca.x - cb.x).powi(2) + (ca.y - cb.y).powi(2)).sqrt()
}

/// Minimal distance between the two core segments.
fn segment_distance(a: &PillParams, b: &PillParams) -> f64 {
    let d1 = crate::geometry::unsigned_distance(Point2::new(b.px, b.py), a).unwrap_or(f64::MAX);
    let d2 = crate::geometry::unsigned_distance(Point2::new(b.qx, b.qy), a).unwrap_or(f64::MAX);
    let d3 = crate::geometry::unsigned_distance(Point2::new(a.px, a.py), b).unwrap_or(f64::MAX);
    let d4 = crate::geometry::unsigned_distance(Point2::new(a.qx, a.qy), b).unwrap_or(f64::MAX);
    // Proper crossing means distance zero; detect via orientation tests.
    if segments_intersect(a, b) {
        return 0.0;
    }
    d1.min(d2).min(d3).min(d4)
}

fn segments_intersect(a: &PillParams, b: &PillParams) -> bool {
    let orient = |ox: f64, oy: f64, px: f64, py: f64, qx: f64, qy: f64| {
        ((px - ox) * (qy - oy) - (py - oy) * (qx - ox)).signum()
    };
    let o1 = orient(a.px, a.py, a.qx, a.qy, b.px, b.py);
    let o2 = orient(a.px, a.py, a.qx, a.qy, b.qx, b.qy);
    let o3 = orient(b.px, b.py, b.qx, b.qy, a.px, a.py);
    let o4 = orient(b.px, b.py, b.qx, b.qy, a.qx, a.qy);
    o1 != o2 && o3 != o4 && o1 != 0.0 && o2 != 0.0 && o3 != 0.0 && o4 != 0.0
}

/// Consolidates groups of nearly parallel, adjacent pills: connected
/// components of the (angle, proximity) adjacency keep only their longest
/// member, with the minimum group radius. Singletons pass through.
pub fn group_merge(design: &DesignVector, cfg: &HeuristicConfig) -> DesignVector {
    let n = design.n();
    if n <= 1 {
        return design.clone();
    }
    let theta_lim = cfg.theta_lim_deg.to_radians();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&design.pills[i], &design.pills[j]);
            let near = match cfg.proximity {
                Proximity::CenterDistance => center_distance(a, b) < cfg.d_min,
                Proximity::SegmentDistance => segment_distance(a, b) < cfg.d_min,
            };
            if near && undirected_angle_diff(a, b) <= theta_lim {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    // Connected components by breadth-first traversal in index order.
    let mut component = vec![usize::MAX; n];
    let mut n_comp = 0;
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let mut queue = vec![start];
        component[start] = n_comp;
        while let Some(v) = queue.pop() {
            for &w in &adj[v] {
                if component[w] == usize::MAX {
                    component[w] = n_comp;
                    queue.push(w);
                }
            }
        }
        n_comp += 1;
    }

    let mut representative = vec![usize::MAX; n_comp];
    let mut min_radius = vec![f64::INFINITY; n_comp];
    for (i, pill) in design.pills.iter().enumerate() {
        let c = component[i];
        min_radius[c] = min_radius[c].min(pill.r);
        let rep = representative[c];
        if rep == usize::MAX || pill.length() > design.pills[rep].length() {
            representative[c] = i;
        }
    }

    let mut out = DesignVector::empty();
    for (i, pill) in design.pills.iter().enumerate() {
        let c = component[i];
        if representative[c] != i {
            continue;
        }
        let r = min_radius[c].max(0.0);
        let merged = if (r - pill.r).abs() == 0.0 {
            *pill
        } else {
            pill.with_radius(r)
        };
        out.push(merged, design.radius_frozen[i]);
    }
    out
}

/// One refinement step in the audit log.
#[derive(Debug, Clone)]
pub struct RefineEvent {
    pub iteration: usize,
    pub candidate: PillParams,
    pub mse_before: f64,
    pub mse_after: f64,
    pub delta_abs: f64,
    pub delta_rel: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStop {
    MaskEmpty,
    Rejected,
    BudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub design: DesignVector,
    pub log: Vec<RefineEvent>,
    pub stopped: RefineStop,
}

/// Stage presets of the refinement sub-solves.
#[derive(Debug, Clone)]
pub struct RefinePresets {
    /// Reward orientation of the fresh pill against the residual mask.
    pub orient: StageConfig,
    /// Tracking convergence, used both solo-on-mask and jointly-on-target.
    pub converge: StageConfig,
}

impl RefinePresets {
    pub fn from_specs(tspec: &TransitionSpec, aspec: &AggregatorSpec) -> Self {
        let stages = default_stages(tspec, aspec);
        RefinePresets {
            orient: stages[0].clone(),
            converge: stages[2].clone(),
        }
    }
}

fn mean_squared_error(
    design: &DesignVector,
    target: &TargetField,
    preset: &StageConfig,
    grid: &GridSpec,
    parallel: bool,
) -> Result<f64> {
    let n_el = grid.n_elements() as f64;
    if design.n() == 0 {
        return Ok(target.values().iter().map(|v| v * v).sum::<f64>() / n_el);
    }
    let eval = ObjectiveEval::new(
        ObjectiveKind::Tracking,
        &preset.tspec,
        &preset.aspec,
        grid,
        target,
    )?
    .with_parallel(parallel);
    Ok(eval.value(design)? / n_el)
}

fn mask_centroid(mask: &crate::grid::ElementField, grid: &GridSpec) -> Option<Point2> {
    let mut sum = (0.0, 0.0);
    let mut count = 0.0;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            if mask.at(ix, iy) > 0.0 {
                sum.0 += grid.x0 + (ix as f64 + 0.5) * grid.hx();
                sum.1 += grid.y0 + (iy as f64 + 0.5) * grid.hy();
                count += 1.0;
            }
        }
    }
    (count > 0.0).then(|| Point2::new(sum.0 / count, sum.1 / count))
}

/// Residual-guided additive refinement: seed a pill on the deficit mask,
/// orient it with the reward functional, converge it against the mask,
/// then jointly converge the concatenated design against the true target.
/// Candidates are kept only on a demonstrated mean-squared-error
/// improvement.
#[allow(clippy::too_many_arguments)]
pub fn refine_loop(
    target: &TargetField,
    initial: &DesignVector,
    rcfg: &RefinementConfig,
    presets: &RefinePresets,
    grid: &GridSpec,
    constraints: &ConstraintSet,
    opts: &SolveOptions,
    parallel: bool,
) -> Result<RefineOutcome> {
    if rcfg.k_max == 0 {
        return Err(Error::InvalidConfig("refinement needs k_max >= 1".into()));
    }
    if !(rcfg.tau_res > 0.0 && rcfg.tau_res < 1.0) {
        return Err(Error::InvalidConfig("tau_res must lie in (0, 1)".into()));
    }
    let mut best = initial.clone();
    let mut j_best = mean_squared_error(&best, target, &presets.converge, grid, parallel)?;
    let mut log = Vec::new();
    let mut stopped = RefineStop::BudgetExhausted;

    for iteration in 0..rcfg.k_max {
        // Current synthesized field and the deficit mask.
        let current = if best.n() == 0 {
            crate::grid::ElementField::zeros(grid.nx, grid.ny)
        } else {
            grid::project_field(&best, &presets.converge.tspec, &presets.converge.aspec, grid)?
        };
        let mask = residual_mask(target, &current, rcfg.tau_res)?;
        let Some(centroid) = mask_centroid(&mask, grid) else {
            stopped = RefineStop::MaskEmpty;
            break;
        };
        let mask_target = TargetField::new(grid.nx, grid.ny, mask.values().to_vec())?;

        // Seed with short diagonal endpoints at the mask centroid.
        let off = constraints.l_min * std::f64::consts::FRAC_1_SQRT_2 / 2.0;
        let r_seed = rcfg.fixed_r.unwrap_or(rcfg.r_seed);
        let seed = PillParams::new(
            (centroid.x - off).clamp(constraints.x_min, constraints.x_max),
            (centroid.y - off).clamp(constraints.y_min, constraints.y_max),
            (centroid.x + off).clamp(constraints.x_min, constraints.x_max),
            (centroid.y + off).clamp(constraints.y_min, constraints.y_max),
            r_seed,
        )?;
        let mut solo = DesignVector::new(vec![seed]);
        solo.radius_frozen[0] = true;

        // Orientation on the mask with the reward functional.
        let orient_eval = ObjectiveEval::new(
            ObjectiveKind::Reward,
            &presets.orient.tspec,
            &presets.orient.aspec,
            grid,
            &mask_target,
        )?
        .with_radius_inflation(presets.orient.ext)
        .with_parallel(parallel);
        let orient_opts = SolveOptions {
            tol: presets.orient.tol,
            max_iter: presets.orient.max_iter,
            ..opts.clone()
        };
        if let Ok(res) = solver::minimize(&orient_eval, constraints, &solo, &orient_opts) {
            solo = res.design;
        }

        // Solo convergence against the mask; radius released unless fixed.
        solo.radius_frozen[0] = rcfg.fixed_r.is_some();
        let conv_eval = ObjectiveEval::new(
            ObjectiveKind::Tracking,
            &presets.converge.tspec,
            &presets.converge.aspec,
            grid,
            &mask_target,
        )?
        .with_parallel(parallel);
        let conv_opts = SolveOptions {
            tol: presets.converge.tol,
            max_iter: presets.converge.max_iter,
            ..opts.clone()
        };
        if let Ok(res) = solver::minimize(&conv_eval, constraints, &solo, &conv_opts) {
            solo = res.design;
        }
        let candidate_pill = solo.pills[0];

        // Joint convergence of the concatenated design against the target.
        let mut joint = best.clone();
        joint.push(candidate_pill, rcfg.fixed_r.is_some());
        let full_eval = ObjectiveEval::new(
            ObjectiveKind::Tracking,
            &presets.converge.tspec,
            &presets.converge.aspec,
            grid,
            target,
        )?
        .with_parallel(parallel);
        let joint_res = solver::minimize(&full_eval, constraints, &joint, &conv_opts);
        let joint = match joint_res {
            Ok(res) => res.design,
            Err(_) => {
                // Solver failure counts as a rejected candidate.
                log.push(RefineEvent {
                    iteration,
                    candidate: candidate_pill,
                    mse_before: j_best,
                    mse_after: f64::NAN,
                    delta_abs: f64::NAN,
                    delta_rel: f64::NAN,
                    accepted: false,
                });
                stopped = RefineStop::Rejected;
                break;
            }
        };

        let j_full = mean_squared_error(&joint, target, &presets.converge, grid, parallel)?;
        let delta_abs = j_best - j_full;
        let delta_rel = delta_abs / j_best.max(1e-12);
        let accepted = delta_abs > rcfg.eps_abs || delta_rel > rcfg.eps_rel;
        log.push(RefineEvent {
            iteration,
            candidate: candidate_pill,
            mse_before: j_best,
            mse_after: j_full,
            delta_abs,
            delta_rel,
            accepted,
        });
        if !accepted {
            stopped = RefineStop::Rejected;
            break;
        }
        best = joint;
        j_best = j_full;
    }

    Ok(RefineOutcome {
        design: best,
        log,
        stopped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::project_field;

    fn unit_constraints() -> ConstraintSet {
        ConstraintSet {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            r_min: 0.05,
            r_max: None,
            l_min: 0.05,
            l_max: None,
        }
    }

    #[test]
    fn cross_init_two_by_two() {
        let cons = unit_constraints();
        let design = cross_init(2, 2, 8, 0.05, &cons).unwrap();
        assert_eq!(design.n(), 8);
        // L = 0.95 * sqrt(0.5); every segment keeps that length.
        let expect = 0.95 * 0.5_f64.sqrt();
        for pill in &design.pills {
            assert!((pill.length() - expect).abs() < 1e-12);
            for v in [pill.px, pill.py, pill.qx, pill.qy] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert!(pill.length() >= cons.l_min);
            assert!(pill.r >= 0.05);
        }
        // Truncation: five pills fill cells in order (bottom row first),
        // the third cell gets a single diagonal.
        let five = cross_init(2, 2, 5, 0.05, &cons).unwrap();
        assert_eq!(five.n(), 5);
        assert_eq!(five.pills[4].center().x, 0.25);
        assert_eq!(five.pills[4].center().y, 0.75);
    }

    #[test]
    fn cross_init_capacity() {
        let cons = unit_constraints();
        assert!(cross_init(2, 2, 9, 0.05, &cons).is_err());
    }

    #[test]
    fn randomized_cross_matches_cross_at_zero_angle() {
        let cons = unit_constraints();
        let a = cross_init(2, 3, 10, 0.06, &cons).unwrap();
        let b = randomized_cross_init(2, 3, 10, 0.06, &cons, 0.0, 7).unwrap();
        assert_eq!(a.flat(), b.flat());
    }

    #[test]
    fn randomized_cross_reproducible_and_length_preserving() {
        let cons = unit_constraints();
        let a = randomized_cross_init(2, 2, 8, 0.05, &cons, 0.2, 42).unwrap();
        let b = randomized_cross_init(2, 2, 8, 0.05, &cons, 0.2, 42).unwrap();
        assert_eq!(a.flat(), b.flat());
        let c = randomized_cross_init(2, 2, 8, 0.05, &cons, 0.2, 43).unwrap();
        assert_ne!(a.flat(), c.flat());
        // Box clipping may shorten strongly rotated diagonals near the
        // boundary, but never lengthens them.
        let expect = 0.95 * 0.5_f64.sqrt();
        for pill in &a.pills {
            assert!(pill.length() <= expect + 1e-12);
        }
        // Small rotations keep every endpoint interior: rigid rotation,
        // lengths exactly preserved.
        let small = randomized_cross_init(2, 2, 8, 0.05, &cons, 0.03, 5).unwrap();
        for pill in &small.pills {
            assert!((pill.length() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn area_ratios_coincident_and_isolated() {
        let tspec =
            TransitionSpec::new(TransitionKind::Smoothstep { k: 3 }, 0.02).unwrap();
        let grid = GridSpec::unit(50, 50);
        // Two identical pills: perfect symmetry, and exclusive support only
        // from the soft fringe where chi (1 - chi) is nonzero.
        let p = PillParams::new(0.3, 0.5, 0.7, 0.5, 0.1).unwrap();
        let design = DesignVector::new(vec![p, p]);
        let (ar, ur) = area_uniqueness_ratios(&design, &tspec, &grid).unwrap();
        assert!((ar[0] - 0.5).abs() < 1e-12);
        assert!((ar[1] - 0.5).abs() < 1e-12);
        assert_eq!(ur[0], ur[1]);
        assert!(ur[0] < 0.15);

        // An isolated pill among non-overlapping others has UR = 1.
        let design = DesignVector::new(vec![
            PillParams::new(0.15, 0.2, 0.4, 0.2, 0.06).unwrap(),
            PillParams::new(0.15, 0.8, 0.4, 0.8, 0.06).unwrap(),
        ]);
        let (_, ur) = area_uniqueness_ratios(&design, &tspec, &grid).unwrap();
        assert!((ur[0] - 1.0).abs() < 1e-9);
        assert!((ur[1] - 1.0).abs() < 1e-9);
        // AR sums to one.
        let (ar, _) = area_uniqueness_ratios(&design, &tspec, &grid).unwrap();
        assert!((ar.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prune_thresholds() {
        let design = DesignVector::new(vec![
            PillParams::new(0.1, 0.1, 0.5, 0.1, 0.06).unwrap(),
            PillParams::new(0.1, 0.3, 0.5, 0.3, 0.06).unwrap(),
        ]);
        let cfg = HeuristicConfig::default();
        let pruned = prune(&design, &[0.5, 0.1], &[1.0, 1.0], &cfg);
        assert_eq!(pruned.n(), 1);
        assert_eq!(pruned.pills[0], design.pills[0]);

        let zero = HeuristicConfig {
            ar_min: 0.0,
            ur_min: 0.0,
            ..cfg.clone()
        };
        assert_eq!(prune(&design, &[0.5, 0.1], &[0.0, 0.0], &zero).n(), 2);

        // The documented pattern: exactly the sub-threshold entries go.
        let ar = [0.855, 0.110, 1.0, 0.551, 0.097, 0.859];
        let ur = [1.0; 6];
        let design6 = DesignVector::new(
            (0..6)
                .map(|i| {
                    PillParams::new(0.1, 0.1 + 0.1 * i as f64, 0.5, 0.1 + 0.1 * i as f64, 0.06)
                        .unwrap()
                })
                .collect(),
        );
        let kept = prune(&design6, &ar, &ur, &cfg);
        assert_eq!(kept.n(), 4);
    }

    #[test]
    fn group_merge_rules() {
        let cfg = HeuristicConfig::default();
        // Nearly parallel, close: keep the longer with the smaller radius.
        let design = DesignVector::new(vec![
            PillParams::new(0.1, 0.50, 0.5, 0.50, 0.06).unwrap(),
            PillParams::new(0.15, 0.55, 0.45, 0.55, 0.05).unwrap(),
        ]);
        let merged = group_merge(&design, &cfg);
        assert_eq!(merged.n(), 1);
        assert_eq!(merged.pills[0].px, 0.1);
        assert_eq!(merged.pills[0].qx, 0.5);
        assert_eq!(merged.pills[0].r, 0.05);

        // Orthogonal pills stay apart.
        let design = DesignVector::new(vec![
            PillParams::new(0.4, 0.5, 0.6, 0.5, 0.06).unwrap(),
            PillParams::new(0.5, 0.4, 0.5, 0.6, 0.05).unwrap(),
        ]);
        assert_eq!(group_merge(&design, &cfg).n(), 2);

        // Transitive chain A~B, B~C forms one component even if A and C are
        // not direct neighbors.
        let design = DesignVector::new(vec![
            PillParams::new(0.10, 0.5, 0.30, 0.5, 0.05).unwrap(),
            PillParams::new(0.22, 0.52, 0.42, 0.52, 0.05).unwrap(),
            PillParams::new(0.32, 0.54, 0.58, 0.54, 0.05).unwrap(),
        ]);
        assert!(center_distance(&design.pills[0], &design.pills[2]) > cfg.d_min);
        let merged = group_merge(&design, &cfg);
        assert_eq!(merged.n(), 1);
        assert_eq!(merged.pills[0].qx, 0.58);
    }

    #[test]
    fn staged_single_stage_equals_plain_minimize() {
        let grid = GridSpec::unit(20, 20);
        let tspec = TransitionSpec::default_smoothstep();
        let aspec = AggregatorSpec::Sum;
        let truth = DesignVector::new(vec![PillParams::new(0.25, 0.3, 0.75, 0.7, 0.1).unwrap()]);
        let target = TargetField::from_field(
            &project_field(&truth, &tspec, &aspec, &grid).unwrap(),
        );
        let cons = unit_constraints();
        let init = DesignVector::new(vec![PillParams::new(0.3, 0.6, 0.7, 0.35, 0.08).unwrap()]);
        let stage = StageConfig {
            objective: ObjectiveKind::Tracking,
            ext: 0.0,
            tol: 1e-7,
            max_iter: 40,
            radius_frozen: false,
            tspec: tspec.clone(),
            aspec,
        };
        let opts = SolveOptions::default();
        let staged = run_staged(&target, &init, &[stage], &grid, &cons, &opts, false).unwrap();

        let eval = ObjectiveEval::new(ObjectiveKind::Tracking, &tspec, &aspec, &grid, &target)
            .unwrap();
        let sopts = SolveOptions {
            tol: 1e-7,
            max_iter: 40,
            ..opts
        };
        let direct = solver::minimize(&eval, &cons, &init, &sopts).unwrap();
        assert_eq!(staged.design.flat(), direct.design.flat());
        assert_eq!(staged.trace.len(), direct.objective_trace.len());
    }

    #[test]
    fn staged_rejects_increasing_inflation() {
        let grid = GridSpec::unit(8, 8);
        let tspec = TransitionSpec::default_smoothstep();
        let aspec = AggregatorSpec::Sum;
        let target = TargetField::zeros(8, 8);
        let cons = unit_constraints();
        let init = DesignVector::new(vec![PillParams::new(0.3, 0.6, 0.7, 0.35, 0.08).unwrap()]);
        let mut stages = default_stages(&tspec, &aspec);
        stages[1].ext = 0.5;
        let res = run_staged(
            &target,
            &init,
            &stages,
            &grid,
            &cons,
            &SolveOptions::default(),
            false,
        );
        assert!(res.is_err());
    }

    #[test]
    fn refine_terminates_on_matched_target() {
        let grid = GridSpec::unit(20, 20);
        let tspec = TransitionSpec::default_smoothstep();
        let aspec = AggregatorSpec::Sum;
        let truth = DesignVector::new(vec![PillParams::new(0.25, 0.3, 0.75, 0.7, 0.1).unwrap()]);
        let target = TargetField::from_field(
            &project_field(&truth, &tspec, &aspec, &grid).unwrap(),
        );
        let presets = RefinePresets::from_specs(&tspec, &aspec);
        let out = refine_loop(
            &target,
            &truth,
            &RefinementConfig::default(),
            &presets,
            &grid,
            &unit_constraints(),
            &SolveOptions::default(),
            false,
        )
        .unwrap();
        assert_eq!(out.stopped, RefineStop::MaskEmpty);
        assert!(out.log.is_empty());
        assert_eq!(out.design.flat(), truth.flat());
    }

    #[test]
    fn refine_from_empty_adds_a_pill() {
        let grid = GridSpec::unit(24, 24);
        let tspec = TransitionSpec::default_smoothstep();
        let aspec = AggregatorSpec::Sum;
        let truth = DesignVector::new(vec![PillParams::new(0.25, 0.45, 0.75, 0.55, 0.1).unwrap()]);
        let target = TargetField::from_field(
            &project_field(&truth, &tspec, &aspec, &grid).unwrap(),
        );
        let presets = RefinePresets::from_specs(&tspec, &aspec);
        let rcfg = RefinementConfig {
            k_max: 2,
            ..Default::default()
        };
        let out = refine_loop(
            &target,
            &DesignVector::empty(),
            &rcfg,
            &presets,
            &grid,
            &unit_constraints(),
            &SolveOptions::default(),
            false,
        )
        .unwrap();
        assert!(!out.log.is_empty());
        assert!(out.log[0].accepted, "{:?}", out.log[0]);
        assert!(out.design.n() >= 1);
        assert!(out.log[0].mse_after < out.log[0].mse_before);
    }
}
