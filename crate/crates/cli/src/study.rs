//! Study sweeps: resolution, quadrature order, Hessian mode and pill
//! count, each running the staged pipeline under one varied setting and
//! emitting a summary CSV.

use std::fs;
use std::path::Path;

use pillfit::grid::DesignVector;
use pillfit::io;
use pillfit::objective::{ObjectiveEval, ObjectiveKind, TargetField};
use pillfit::pipeline::{self, StageConfig};
use pillfit::solver::HessianMode;

use crate::commands::{builtin_pills, initial_design, load_ctx, resolve_target, Ctx};
use crate::{CmdResult, Failure, StudyKind};

pub(crate) fn run(
    kind: StudyKind,
    config: &Path,
    out: &Path,
    threads: Option<usize>,
) -> CmdResult {
    let ctx = load_ctx(config, threads)?;
    fs::create_dir_all(out).map_err(|e| Failure::validation(format!("{}: {e}", out.display())))?;
    match kind {
        StudyKind::Resolution => resolution(&ctx, out),
        StudyKind::Quadrature => quadrature(&ctx, out),
        StudyKind::Hessian => hessian(&ctx, out),
        StudyKind::Count => count(&ctx, out),
    }
}

/// Final value of the last tracking stage's objective on the given design.
fn final_tracking(
    ctx: &Ctx,
    stages: &[StageConfig],
    grid: &pillfit::grid::GridSpec,
    target: &TargetField,
    design: &DesignVector,
) -> Result<f64, Failure> {
    let last = stages.last().unwrap();
    let eval = ObjectiveEval::new(ObjectiveKind::Tracking, &last.tspec, &last.aspec, grid, target)?
        .with_parallel(ctx.parallel);
    Ok(eval.value(design)?)
}

fn write_summary(out: &Path, name: &str, header: &str, rows: &[String]) -> Result<(), Failure> {
    let path = out.join(name);
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Mesh refinement on a synthetic target: the same physical run at three
/// resolutions; raw objectives grow with element count while the mean error
/// per element falls.
fn resolution(ctx: &Ctx, out: &Path) -> CmdResult {
    let truth = if let Some(pills) = &ctx.cfg.target.pills {
        io::load_pills(Path::new(pills))?
    } else if let Some(builtin) = &ctx.cfg.target.builtin {
        builtin_pills(builtin)?
    } else {
        return Err(Failure::validation(
            "resolution study needs a synthetic target (target.pills or target.builtin), \
             because the target must be rasterized at every resolution",
        ));
    };
    let mut rows = Vec::new();
    println!("nx    ny    F             F_norm");
    for (nx, ny) in [(40, 20), (80, 40), (120, 60)] {
        let mut grid = ctx.grid.clone();
        grid.nx = nx;
        grid.ny = ny;
        let target = io::generate_target(&truth, &grid, &ctx.tspec)?;
        let init = initial_design_for_grid(ctx)?;
        let staged = pipeline::run_staged(
            &target,
            &init,
            &ctx.stages,
            &grid,
            &ctx.cons,
            &ctx.opts,
            ctx.parallel,
        )
        .map_err(crate::commands_runtime)?;
        let f = final_tracking(ctx, &ctx.stages, &grid, &target, &staged.design)?;
        let f_norm = f / (nx * ny) as f64;
        println!("{nx:<5} {ny:<5} {f:<13.6e} {f_norm:.6e}");
        rows.push(format!("{nx},{ny},{f:.9e},{f_norm:.9e}"));
    }
    write_summary(out, "study_resolution.csv", "nx,ny,f,f_norm", &rows)?;
    Ok(0)
}

fn initial_design_for_grid(ctx: &Ctx) -> Result<DesignVector, Failure> {
    initial_design(ctx)
}

/// Quadrature order sweep at a fixed mesh and target.
fn quadrature(ctx: &Ctx, out: &Path) -> CmdResult {
    let target = resolve_target(ctx, None)?;
    let init = initial_design(ctx)?;
    let mut rows = Vec::new();
    println!("order F             F_norm");
    for order in 1..=5usize {
        let mut grid = ctx.grid.clone();
        grid.quad_order = order;
        let staged = pipeline::run_staged(
            &target,
            &init,
            &ctx.stages,
            &grid,
            &ctx.cons,
            &ctx.opts,
            ctx.parallel,
        )
        .map_err(crate::commands_runtime)?;
        let f = final_tracking(ctx, &ctx.stages, &grid, &target, &staged.design)?;
        let f_norm = f / grid.n_elements() as f64;
        println!("{order:<5} {f:<13.6e} {f_norm:.6e}");
        rows.push(format!("{order},{f:.9e},{f_norm:.9e}"));
    }
    write_summary(out, "study_quadrature.csv", "order,f,f_norm", &rows)?;
    Ok(0)
}

/// Exact Newton versus limited-memory BFGS on the same staged run.
fn hessian(ctx: &Ctx, out: &Path) -> CmdResult {
    let target = resolve_target(ctx, None)?;
    let init = initial_design(ctx)?;
    let mut rows = Vec::new();
    println!("mode      F             F_norm        evals");
    for (name, mode) in [
        ("exact", HessianMode::Exact),
        (
            "lbfgs",
            HessianMode::Lbfgs {
                history: ctx.cfg.solver.history,
            },
        ),
    ] {
        let mut opts = ctx.opts.clone();
        opts.hessian_mode = mode;
        let staged = pipeline::run_staged(
            &target,
            &init,
            &ctx.stages,
            &ctx.grid,
            &ctx.cons,
            &opts,
            ctx.parallel,
        )
        .map_err(crate::commands_runtime)?;
        let f = final_tracking(ctx, &ctx.stages, &ctx.grid, &target, &staged.design)?;
        let f_norm = f / ctx.grid.n_elements() as f64;
        let evals: usize = staged.stages.iter().map(|s| s.evals).sum();
        println!("{name:<9} {f:<13.6e} {f_norm:<13.6e} {evals}");
        rows.push(format!("{name},{f:.9e},{f_norm:.9e},{evals}"));
    }
    write_summary(out, "study_hessian.csv", "mode,f,f_norm,evals", &rows)?;
    Ok(0)
}

/// Pill-count sweep with cross seeding.
fn count(ctx: &Ctx, out: &Path) -> CmdResult {
    let target = resolve_target(ctx, None)?;
    let mut rows = Vec::new();
    println!("n     F             F_norm");
    for n in [3usize, 4, 5, 8, 13, 18] {
        let capacity = 2 * ctx.cfg.init.rows * ctx.cfg.init.cols;
        let (rows_, cols_) = if n <= capacity {
            (ctx.cfg.init.rows, ctx.cfg.init.cols)
        } else {
            // Grow the seeding lattice to fit the requested count.
            let mut r = ctx.cfg.init.rows.max(1);
            let mut c = ctx.cfg.init.cols.max(1);
            while 2 * r * c < n {
                if c <= 2 * r {
                    c += 1;
                } else {
                    r += 1;
                }
            }
            (r, c)
        };
        let init = pipeline::cross_init(rows_, cols_, n, ctx.cfg.init.r0, &ctx.cons)?;
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
        let f = final_tracking(ctx, &ctx.stages, &ctx.grid, &target, &staged.design)?;
        let f_norm = f / ctx.grid.n_elements() as f64;
        println!("{n:<5} {f:<13.6e} {f_norm:.6e}");
        rows.push(format!("{n},{f:.9e},{f_norm:.9e}"));
    }
    write_summary(out, "study_count.csv", "n,f,f_norm", &rows)?;
    Ok(0)
}
