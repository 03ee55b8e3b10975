//! Pill-table CSV: `id,px,py,qx,qy,r` with one row per pill. Values are
//! serialized with 17 significant digits so a write/load round trip is
//! bit-exact.

use std::fs;
use std::path::Path;

use crate::geometry::PillParams;
use crate::grid::DesignVector;
use crate::{Error, Result};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn write_pills(path: &Path, design: &DesignVector) -> Result<()> {
    let mut out = String::from("id,px,py,qx,qy,r\n");
    for (i, p) in design.pills.iter().enumerate() {
        out.push_str(&format!(
            "{i},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            p.px, p.py, p.qx, p.qy, p.r
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_pills(path: &Path) -> Result<DesignVector> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pills = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 && trimmed.starts_with("id") {
            continue;
        }
        let cells: Vec<&str> = trimmed.split(',').collect();
        if cells.len() != 6 {
            return Err(parse_err(
                path,
                idx + 1,
                format!("expected 6 columns, found {}", cells.len()),
            ));
        }
        let id: u64 = cells[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, idx + 1, format!("bad id {:?}", cells[0])))?;
        if !seen_ids.insert(id) {
            return Err(parse_err(path, idx + 1, format!("duplicate id {id}")));
        }
        let mut vals = [0.0_f64; 5];
        for (k, cell) in cells[1..].iter().enumerate() {
            vals[k] = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(path, idx + 1, format!("bad number {cell:?}")))?;
            if !vals[k].is_finite() {
                return Err(parse_err(path, idx + 1, format!("non-finite value {cell:?}")));
            }
        }
        pills.push(
            PillParams::new(vals[0], vals[1], vals[2], vals[3], vals[4])
                .map_err(|e| parse_err(path, idx + 1, e.to_string()))?,
        );
    }
    Ok(DesignVector::new(pills))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let design = DesignVector::new(vec![
            PillParams::new(0.1, 0.2, 0.9, 0.7, 1.0 / 3.0).unwrap(),
            PillParams::new(
                std::f64::consts::FRAC_1_SQRT_2,
                0.123456789012345678,
                0.9,
                0.1,
                0.05,
            )
            .unwrap(),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pills.csv");
        write_pills(&path, &design).unwrap();
        let back = load_pills(&path).unwrap();
        assert_eq!(design.flat(), back.flat());
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pills.csv");
        fs::write(&path, "id,px,py,qx,qy,r\n0,0,0,1,0,0.1\n0,0,1,1,1,0.1\n").unwrap();
        assert!(load_pills(&path).is_err());
    }

    #[test]
    fn degenerate_pill_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pills.csv");
        fs::write(&path, "id,px,py,qx,qy,r\n0,0.5,0.5,0.5,0.5,0.1\n").unwrap();
        match load_pills(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
