//! Diagnostic export of a finished run: pill table, density/residual
//! fields (CSV and PGM), the per-element overlap, the objective trace and
//! an echo of the effective configuration.

use std::fs;
use std::path::Path;

use crate::grid::DesignVector;
use crate::objective::{residual_field, TargetField};
use crate::pipeline::TraceRow;
use crate::{Error, Result};

use super::{fields, pills, reward_field};

/// Everything written by [`write_outputs`].
pub struct RunOutputs<'a> {
    pub design: &'a DesignVector,
    pub density: &'a crate::grid::ElementField,
    pub target: &'a TargetField,
    pub trace: &'a [TraceRow],
    /// Effective configuration echoed back as TOML; itself a valid input.
    pub config_echo: &'a str,
}

pub fn write_outputs(out: &RunOutputs, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let (nx, ny) = (out.density.nx(), out.density.ny());

    pills::write_pills(&dir.join("pills.csv"), out.design)?;

    fields::write_field_csv(&dir.join("density.csv"), out.density.values(), nx, ny)?;
    fields::write_field_pgm(&dir.join("density.pgm"), out.density)?;

    let residual = residual_field(out.target, out.density)?;
    fields::write_field_csv(&dir.join("residual.csv"), residual.values(), nx, ny)?;
    fields::write_residual_pgm(&dir.join("residual.pgm"), &residual)?;

    let abs_res = crate::grid::ElementField::from_values(
        nx,
        ny,
        residual.values().iter().map(|v| v.abs()).collect(),
    )?;
    fields::write_field_csv(&dir.join("abs_residual.csv"), abs_res.values(), nx, ny)?;
    fields::write_field_pgm(&dir.join("abs_residual.pgm"), &abs_res)?;

    let reward = reward_field(out.density, out.target)?;
    fields::write_field_csv(&dir.join("reward.csv"), reward.values(), nx, ny)?;

    let mut trace_csv = String::from("eval_index,objective,stage\n");
    for row in out.trace {
        trace_csv.push_str(&format!(
            "{},{:.16e},{}\n",
            row.eval_index, row.objective, row.stage
        ));
    }
    let trace_path = dir.join("trace.csv");
    fs::write(&trace_path, trace_csv)
        .map_err(|e| Error::io(trace_path.display().to_string(), e))?;

    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, out.config_echo)
        .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PillParams;
    use crate::grid::ElementField;
    use crate::io::RunConfig;

    #[test]
    fn writes_the_diagnostic_set() {
        let dir = tempfile::tempdir().unwrap();
        let design =
            DesignVector::new(vec![PillParams::new(0.2, 0.3, 0.8, 0.7, 0.1).unwrap()]);
        let density = ElementField::from_values(2, 2, vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let target = TargetField::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let trace = vec![
            TraceRow {
                eval_index: 1,
                objective: 2.0,
                stage: 0,
            },
            TraceRow {
                eval_index: 3,
                objective: 1.0,
                stage: 1,
            },
        ];
        let echo = RunConfig::default().to_toml();
        write_outputs(
            &RunOutputs {
                design: &design,
                density: &density,
                target: &target,
                trace: &trace,
                config_echo: &echo,
            },
            dir.path(),
        )
        .unwrap();
        for name in [
            "pills.csv",
            "density.csv",
            "density.pgm",
            "residual.csv",
            "residual.pgm",
            "abs_residual.csv",
            "abs_residual.pgm",
            "reward.csv",
            "trace.csv",
            "config.toml",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        // The echo parses back as a valid config.
        let text = fs::read_to_string(dir.path().join("config.toml")).unwrap();
        assert!(RunConfig::from_toml(&text).is_ok());
        // Trace rows strictly increasing in eval index.
        let trace_text = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        let idx: Vec<usize> = trace_text
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert!(idx.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_field_bytes() {
        let zeros = ElementField::zeros(3, 2);
        let bytes = fields::field_to_pgm_bytes(zeros.values(), 3, 2);
        assert!(bytes.ends_with(&[0, 0, 0, 0, 0, 0]));
    }
}
