//! Subcommand implementations sharing the config/target plumbing.

use std::fs;
use std::path::Path;
use std::sync::Once;

use pillfit::aggregation::AggregatorSpec;
use pillfit::checks;
use pillfit::grid::{project_field, DesignVector, GridSpec};
use pillfit::io::{self, InitMode, RunConfig, RunOutputs, TargetFormat};
use pillfit::objective::{ConstraintSet, ObjectiveKind, TargetField};
use pillfit::pipeline::{self, RefinePresets, StageConfig};
use pillfit::solver::SolveOptions;
use pillfit::transition::TransitionSpec;

use crate::{CmdResult, Failure, InitModeArg};

pub(crate) struct Ctx {
    pub cfg: RunConfig,
    pub grid: GridSpec,
    pub tspec: TransitionSpec,
    pub aspec: AggregatorSpec,
    pub cons: ConstraintSet,
    pub stages: Vec<StageConfig>,
    pub opts: SolveOptions,
    pub parallel: bool,
}

static THREAD_POOL: Once = Once::new();

pub(crate) fn load_ctx(config_path: &Path, threads: Option<usize>) -> Result<Ctx, Failure> {
    let text = fs::read_to_string(config_path).map_err(|e| {
        Failure::validation(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let cfg = RunConfig::from_toml(&text)?;
    for warning in cfg.validate()? {
        eprintln!("warning: {warning}");
    }
    let threads = threads.unwrap_or(cfg.threads).max(1);
    if threads > 1 {
        THREAD_POOL.call_once(|| {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        });
    }
    Ok(Ctx {
        grid: cfg.grid_spec()?,
        tspec: cfg.transition.build()?,
        aspec: cfg.aggregator.build()?,
        cons: cfg.constraint_set()?,
        stages: cfg.stage_configs()?,
        opts: cfg.solve_options()?,
        parallel: threads > 1,
        cfg,
    })
}

/// Resolves the target from the command line or the config: a field file,
/// a rasterized pill table, or the built-in synthetic layout.
pub(crate) fn resolve_target(
    ctx: &Ctx,
    cli_target: Option<&Path>,
) -> Result<TargetField, Failure> {
    let target = if let Some(path) = cli_target {
        let format = match ctx.cfg.target.format.as_deref() {
            Some("csv") => TargetFormat::Csv,
            Some("pgm") => TargetFormat::Pgm,
            Some(other) => {
                return Err(Failure::validation(format!(
                    "unknown target format {other:?} (csv|pgm)"
                )))
            }
            None => TargetFormat::from_path(path),
        };
        io::load_target(path, format)?
    } else if let Some(path) = &ctx.cfg.target.path {
        let path = Path::new(path);
        let format = match ctx.cfg.target.format.as_deref() {
            Some("csv") => TargetFormat::Csv,
            Some("pgm") => TargetFormat::Pgm,
            Some(other) => {
                return Err(Failure::validation(format!(
                    "unknown target format {other:?} (csv|pgm)"
                )))
            }
            None => TargetFormat::from_path(path),
        };
        io::load_target(path, format)?
    } else if let Some(pills) = &ctx.cfg.target.pills {
        let truth = io::load_pills(Path::new(pills))?;
        io::generate_target(&truth, &ctx.grid, &ctx.tspec)?
    } else if let Some(builtin) = &ctx.cfg.target.builtin {
        let truth = builtin_pills(builtin)?;
        io::generate_target(&truth, &ctx.grid, &ctx.tspec)?
    } else {
        return Err(Failure::validation(
            "no target: pass --target or set target.path / target.pills / target.builtin",
        ));
    };
    if target.nx() != ctx.grid.nx || target.ny() != ctx.grid.ny {
        return Err(Failure::validation(format!(
            "target is {} x {} but the grid has {} x {} elements",
            target.nx(),
            target.ny(),
            ctx.grid.nx,
            ctx.grid.ny
        )));
    }
    Ok(target)
}

pub(crate) fn builtin_pills(name: &str) -> Result<DesignVector, Failure> {
    match name {
        "five_bar" => Ok(io::five_bar_pills()),
        other => Err(Failure::validation(format!(
            "unknown builtin target {other:?} (five_bar)"
        ))),
    }
}

pub(crate) fn initial_design(ctx: &Ctx) -> Result<DesignVector, Failure> {
    let init = &ctx.cfg.init;
    let design = match init.mode {
        InitMode::Cross => {
            pipeline::cross_init(init.rows, init.cols, init.n, init.r0, &ctx.cons)?
        }
        InitMode::Randcross => pipeline::randomized_cross_init(
            init.rows,
            init.cols,
            init.n,
            init.r0,
            &ctx.cons,
            init.theta_max,
            ctx.cfg.seed,
        )?,
        InitMode::Pills => {
            let path = init.pills.as_ref().ok_or_else(|| {
                Failure::validation("init.mode = \"pills\" needs init.pills = <csv path>")
            })?;
            io::load_pills(Path::new(path))?
        }
    };
    Ok(design)
}

/// Final visible field: last stage's field model at the real radii.
pub(crate) fn final_density(
    ctx: &Ctx,
    design: &DesignVector,
) -> Result<pillfit::grid::ElementField, Failure> {
    let last = ctx.stages.last().expect("stage list nonempty");
    Ok(project_field(design, &last.tspec, &last.aspec, &ctx.grid)?)
}

pub(crate) fn run(
    config: &Path,
    target: Option<&Path>,
    out: &Path,
    threads: Option<usize>,
) -> CmdResult {
    let ctx = load_ctx(config, threads)?;
    let target = resolve_target(&ctx, target)?;
    let init = initial_design(&ctx)?;
    let staged = pipeline::run_staged(
        &target,
        &init,
        &ctx.stages,
        &ctx.grid,
        &ctx.cons,
        &ctx.opts,
        ctx.parallel,
    )
    .map_err(crate::commands_runtime)?;

    for outcome in &staged.stages {
        println!(
            "stage {}: {} -> {} ({:?}, {} evals{})",
            outcome.stage,
            fmt_obj(outcome.initial_objective),
            fmt_obj(outcome.final_objective),
            outcome.termination,
            outcome.evals,
            if outcome.rolled_back { ", rolled back" } else { "" }
        );
    }

    let density = final_density(&ctx, &staged.design)?;
    let echo = ctx.cfg.to_toml();
    io::write_outputs(
        &RunOutputs {
            design: &staged.design,
            density: &density,
            target: &target,
            trace: &staged.trace,
            config_echo: &echo,
        },
        out,
    )?;
    println!("wrote {}", out.display());
    Ok(0)
}

fn fmt_obj(v: f64) -> String {
    if v.is_nan() {
        "failed".into()
    } else {
        format!("{v:.6e}")
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn init(
    mode: InitModeArg,
    n: usize,
    rows: Option<usize>,
    cols: Option<usize>,
    r0: Option<f64>,
    theta_max: f64,
    seed: Option<u64>,
    config: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let (cons, defaults) = match config {
        Some(path) => {
            let ctx = load_ctx(path, None)?;
            (ctx.cons, ctx.cfg.init)
        }
        None => {
            let cfg = RunConfig::default();
            (cfg.constraint_set()?, cfg.init)
        }
    };
    let rows = rows.unwrap_or(defaults.rows);
    let cols = cols.unwrap_or(defaults.cols);
    let r0 = r0.unwrap_or(defaults.r0);
    let design = match mode {
        InitModeArg::Cross => pipeline::cross_init(rows, cols, n, r0, &cons)?,
        InitModeArg::Randcross => pipeline::randomized_cross_init(
            rows,
            cols,
            n,
            r0,
            &cons,
            theta_max,
            seed.unwrap_or(0),
        )?,
    };
    io::write_pills(out, &design)?;
    println!("wrote {} pills to {}", design.n(), out.display());
    Ok(0)
}

pub(crate) fn gradcheck(config: &Path, samples: usize) -> CmdResult {
    let ctx = load_ctx(config, None)?;
    let seed = ctx.cfg.seed;
    let mut all_pass = true;
    let mut report = |summary: checks::CheckSummary| {
        let pass = summary.passed(1e-6, 1e-4);
        all_pass &= pass;
        println!(
            "{:34} samples {:4}  grad {:.3e}  hess {:.3e}  {}",
            summary.name,
            summary.samples,
            summary.max_grad_rel_err,
            summary.max_hess_rel_err,
            if pass { "pass" } else { "FAIL" }
        );
    };
    report(checks::geometry_jets(samples, seed).map_err(crate::commands_runtime)?);
    report(checks::density_jets(&ctx.tspec, samples, seed + 1).map_err(crate::commands_runtime)?);
    report(
        checks::aggregation_partials(&ctx.aspec, samples, seed + 2).map_err(crate::commands_runtime)?,
    );
    report(
        checks::element_jets(&ctx.tspec, &ctx.aspec, samples.min(25), seed + 3)
            .map_err(crate::commands_runtime)?,
    );
    report(
        checks::objective_jets(
            ObjectiveKind::Tracking,
            &ctx.tspec,
            &ctx.aspec,
            samples.min(3),
            seed + 4,
        )
        .map_err(crate::commands_runtime)?,
    );
    report(
        checks::objective_jets(
            ObjectiveKind::Reward,
            &ctx.tspec,
            &ctx.aspec,
            samples.min(3),
            seed + 5,
        )
        .map_err(crate::commands_runtime)?,
    );
    Ok(if all_pass { 0 } else { 3 })
}

pub(crate) fn refine(
    config: &Path,
    pills: &Path,
    target: Option<&Path>,
    out: &Path,
    threads: Option<usize>,
) -> CmdResult {
    let ctx = load_ctx(config, threads)?;
    let target = resolve_target(&ctx, target)?;
    let initial = io::load_pills(pills)?;
    let rcfg = ctx.cfg.refinement_config()?;
    let presets = refine_presets(&ctx);
    let outcome = pipeline::refine_loop(
        &target,
        &initial,
        &rcfg,
        &presets,
        &ctx.grid,
        &ctx.cons,
        &ctx.opts,
        ctx.parallel,
    )
    .map_err(crate::commands_runtime)?;

    fs::create_dir_all(out).map_err(|e| Failure::validation(format!("{}: {e}", out.display())))?;
    let mut log = String::from(
        "iteration,px,py,qx,qy,r,mse_before,mse_after,delta_abs,delta_rel,accepted\n",
    );
    for ev in &outcome.log {
        let p = ev.candidate;
        log.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.9e},{:.9e},{:.9e},{:.9e},{}\n",
            ev.iteration,
            p.px,
            p.py,
            p.qx,
            p.qy,
            p.r,
            ev.mse_before,
            ev.mse_after,
            ev.delta_abs,
            ev.delta_rel,
            ev.accepted
        ));
    }
    fs::write(out.join("refine_log.csv"), log)
        .map_err(|e| Failure::validation(format!("refine_log.csv: {e}")))?;
    io::write_pills(&out.join("pills.csv"), &outcome.design)?;
    let density = final_density(&ctx, &outcome.design)?;
    io::write_field_csv(
        &out.join("density.csv"),
        density.values(),
        density.nx(),
        density.ny(),
    )?;
    println!(
        "refinement stopped: {:?}; {} candidate(s), {} pill(s)",
        outcome.stopped,
        outcome.log.len(),
        outcome.design.n()
    );
    Ok(0)
}

pub(crate) fn refine_presets(ctx: &Ctx) -> RefinePresets {
    let orient = ctx
        .stages
        .iter()
        .find(|s| s.objective == ObjectiveKind::Reward)
        .cloned()
        .unwrap_or_else(|| pipeline::default_stages(&ctx.tspec, &ctx.aspec)[0].clone());
    let converge = ctx
        .stages
        .iter()
        .rev()
        .find(|s| s.objective == ObjectiveKind::Tracking && s.ext == 0.0)
        .cloned()
        .unwrap_or_else(|| pipeline::default_stages(&ctx.tspec, &ctx.aspec)[2].clone());
    RefinePresets { orient, converge }
}

pub(crate) fn heuristics(pills: &Path, config: &Path, out: &Path) -> CmdResult {
    let ctx = load_ctx(config, None)?;
    let design = io::load_pills(pills)?;
    if design.n() == 0 {
        return Err(Failure::validation("empty pill table"));
    }
    let hcfg = ctx.cfg.heuristic_config()?;
    let (ar, ur) = pipeline::area_uniqueness_ratios(&design, &ctx.tspec, &ctx.grid)
        .map_err(crate::commands_runtime)?;

    println!("id      AR          UR");
    for i in 0..design.n() {
        println!("{i:<7} {:<11.4e} {:.4e}", ar[i], ur[i]);
    }

    let mut pruned = pipeline::prune(&design, &ar, &ur, &hcfg);
    if pruned.n() == 0 {
        // Downstream stages need at least one pill: keep the largest.
        let best = (0..design.n())
            .max_by(|a, b| ar[*a].total_cmp(&ar[*b]))
            .unwrap();
        eprintln!(
            "warning: pruning removed every pill; restoring the highest-AR pill (id {best})"
        );
        pruned.push(design.pills[best], design.radius_frozen[best]);
    }
    let merged = pipeline::group_merge(&pruned, &hcfg);
    println!(
        "prune: {} -> {} pills; merge: {} -> {} pills",
        design.n(),
        pruned.n(),
        pruned.n(),
        merged.n()
    );

    fs::create_dir_all(out).map_err(|e| Failure::validation(format!("{}: {e}", out.display())))?;
    let mut table = String::from("id,ar,ur\n");
    for i in 0..design.n() {
        table.push_str(&format!("{i},{:.9e},{:.9e}\n", ar[i], ur[i]));
    }
    fs::write(out.join("ar_ur.csv"), table)
        .map_err(|e| Failure::validation(format!("ar_ur.csv: {e}")))?;
    io::write_pills(&out.join("pruned.csv"), &pruned)?;
    io::write_pills(&out.join("merged.csv"), &merged)?;
    Ok(0)
}
