//! Target ingestion, synthetic target generation, pill tables, run
//! configuration and result export.
//!
//! External formats: CSV (RFC-4180-like, LF line endings, `.` decimal, top
//! row of a field = highest-y row), PGM P2/P5 with maxval 255, and a TOML
//! run configuration whose defaults reproduce the standard protocol.

mod config;
mod fields;
mod outputs;
mod pills;

pub use config::{
    AggregatorConfig, ConstraintConfig, GridConfig, InitConfig, InitMode, RefineTomlConfig,
    RunConfig, SolverTomlConfig, StageTomlConfig, TargetConfig, TransitionConfig,
};
pub use fields::{
    field_to_pgm_bytes, load_target, read_field_csv, residual_to_pgm_bytes, write_field_csv,
    write_field_pgm, write_residual_pgm, TargetFormat,
};
pub use outputs::{write_outputs, RunOutputs};
pub use pills::{load_pills, write_pills};

use crate::grid::{self, DesignVector, GridSpec};
use crate::objective::TargetField;
use crate::transition::TransitionSpec;
use crate::Result;

/// Rasterizes a pill table into a target field: pointwise maximum over the
/// per-pill densities, element-averaged with the grid's quadrature rule.
pub fn generate_target(
    design: &DesignVector,
    grid: &GridSpec,
    tspec: &TransitionSpec,
) -> Result<TargetField> {
    grid.validate()?;
    let mut values = vec![0.0; grid.n_elements()];
    let q = grid.quad_order;
    for (e, v) in values.iter_mut().enumerate() {
        let pts = grid::quad_points(grid, e, q)?;
        let mut acc = 0.0;
        for x in &pts {
            let mut m = 0.0_f64;
            for pill in &design.pills {
                m = m.max(crate::transition::pseudo_density(tspec, pill, *x)?);
            }
            acc += m;
        }
        *v = acc / pts.len() as f64;
    }
    TargetField::new(grid.nx, grid.ny, values)
}

/// The built-in five-bar ground truth on the 2:1 domain: four diagonals
/// meeting at the top/bottom centers plus a central vertical bar.
pub fn five_bar_pills() -> DesignVector {
    use crate::geometry::PillParams;
    DesignVector::new(vec![
        PillParams::new(0.1, 0.1, 1.0, 0.9, 0.07).unwrap(),
        PillParams::new(1.0, 0.9, 1.9, 0.1, 0.07).unwrap(),
        PillParams::new(0.1, 0.9, 1.0, 0.1, 0.07).unwrap(),
        PillParams::new(1.0, 0.1, 1.9, 0.9, 0.07).unwrap(),
        PillParams::new(1.0, 0.28, 1.0, 0.72, 0.06).unwrap(),
    ])
}

/// Element-wise overlap diagnostic `rhobar * target`.
pub fn reward_field(
    density: &grid::ElementField,
    target: &TargetField,
) -> Result<grid::ElementField> {
    if density.nx() != target.nx() || density.ny() != target.ny() {
        return Err(crate::Error::GridMismatch(format!(
            "reward field of {} x {} density vs {} x {} target",
            density.nx(),
            density.ny(),
            target.nx(),
            target.ny()
        )));
    }
    let values = density
        .values()
        .iter()
        .zip(target.values())
        .map(|(d, t)| d * t)
        .collect();
    grid::ElementField::from_values(density.nx(), density.ny(), values)
}
