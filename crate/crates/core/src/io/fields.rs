//! Scalar-field I/O: CSV matrices and PGM images.
//!
//! Both formats use the image convention: the first row of a file is the
//! highest-y row of the domain, so fields are flipped on the way in and
//! out. PGM values map density through `round(255 * clamp(v, 0, 1))`;
//! signed residuals map `[-1, 1]` linearly onto `[0, 255]`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::grid::ElementField;
use crate::objective::TargetField;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetFormat {
    Csv,
    Pgm,
}

impl TargetFormat {
    /// Guessed from the file extension; defaults to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pgm") => TargetFormat::Pgm,
            _ => TargetFormat::Csv,
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads a CSV matrix (top row first) and returns it bottom-row-first
/// together with its dimensions.
pub fn read_field_csv(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(path, idx + 1, format!("bad number {cell:?}")))?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    path,
                    idx + 1,
                    format!("ragged row: {} values, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "empty field file"));
    }
    let (ny, nx) = (rows.len(), rows[0].len());
    let mut values = vec![0.0; nx * ny];
    for (file_row, row) in rows.iter().enumerate() {
        let iy = ny - 1 - file_row;
        values[iy * nx..(iy + 1) * nx].copy_from_slice(row);
    }
    Ok((values, nx, ny))
}

/// Reads a PGM header token, skipping whitespace and `#` comments.
fn pgm_token(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(parse_err(path, 0, "unexpected end of PGM header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Reads a P2 (ASCII) or P5 (binary) PGM with maxval 255 into a
/// bottom-row-first density field, gray/255.
pub fn read_field_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let magic = pgm_token(&bytes, &mut pos, path)?;
    if magic != "P2" && magic != "P5" {
        return Err(parse_err(path, 1, format!("unsupported PGM magic {magic:?}")));
    }
    let nx: usize = pgm_token(&bytes, &mut pos, path)?
        .parse()
        .map_err(|_| parse_err(path, 1, "bad width"))?;
    let ny: usize = pgm_token(&bytes, &mut pos, path)?
        .parse()
        .map_err(|_| parse_err(path, 1, "bad height"))?;
    let maxval: usize = pgm_token(&bytes, &mut pos, path)?
        .parse()
        .map_err(|_| parse_err(path, 1, "bad maxval"))?;
    if maxval != 255 {
        return Err(parse_err(path, 1, format!("maxval {maxval}, expected 255")));
    }
    let mut gray = Vec::with_capacity(nx * ny);
    if magic == "P5" {
        pos += 1; // single whitespace after maxval
        if bytes.len() < pos + nx * ny {
            return Err(parse_err(path, 0, "truncated P5 payload"));
        }
        gray.extend(bytes[pos..pos + nx * ny].iter().map(|&b| b as f64));
    } else {
        for _ in 0..nx * ny {
            let v: f64 = pgm_token(&bytes, &mut pos, path)?
                .parse()
                .map_err(|_| parse_err(path, 0, "bad P2 sample"))?;
            gray.push(v);
        }
    }
    // Top row first in the file.
    let mut values = vec![0.0; nx * ny];
    for iy in 0..ny {
        let file_row = ny - 1 - iy;
        for ix in 0..nx {
            values[iy * nx + ix] = gray[file_row * nx + ix] / 255.0;
        }
    }
    Ok((values, nx, ny))
}

/// Loads a target field; the dimensions come from the file and are checked
/// against the analysis grid downstream.
pub fn load_target(path: &Path, format: TargetFormat) -> Result<TargetField> {
    let (values, nx, ny) = match format {
        TargetFormat::Csv => read_field_csv(path)?,
        TargetFormat::Pgm => read_field_pgm(path)?,
    };
    TargetField::new(nx, ny, values)
}

fn field_rows_topdown(values: &[f64], nx: usize, ny: usize) -> impl Iterator<Item = &[f64]> {
    (0..ny).rev().map(move |iy| &values[iy * nx..(iy + 1) * nx])
}

/// Writes a field as CSV, top row first, shortest-round-trip floats.
pub fn write_field_csv(path: &Path, values: &[f64], nx: usize, ny: usize) -> Result<()> {
    let mut out = String::new();
    for row in field_rows_topdown(values, nx, ny) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// P5 bytes of a density field: `round(255 * clamp(v, 0, 1))`.
pub fn field_to_pgm_bytes(values: &[f64], nx: usize, ny: usize) -> Vec<u8> {
    let mut bytes = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for row in field_rows_topdown(values, nx, ny) {
        bytes.extend(row.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    }
    bytes
}

/// P5 bytes of a signed residual field, `[-1, 1]` mapped onto `[0, 255]`.
pub fn residual_to_pgm_bytes(values: &[f64], nx: usize, ny: usize) -> Vec<u8> {
    let mut bytes = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for row in field_rows_topdown(values, nx, ny) {
        bytes.extend(
            row.iter()
                .map(|v| (255.0 * (v.clamp(-1.0, 1.0) + 1.0) / 2.0).round() as u8),
        );
    }
    bytes
}

pub fn write_field_pgm(path: &Path, field: &ElementField) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&field_to_pgm_bytes(field.values(), field.nx(), field.ny()))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_residual_pgm(path: &Path, field: &ElementField) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&residual_to_pgm_bytes(field.values(), field.nx(), field.ny()))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_flip_convention() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "1,0\n0,1\n").unwrap();
        let t = load_target(&path, TargetFormat::Csv).unwrap();
        // File top-left 1 lands at (ix 0, iy 1); bottom-left is 0.
        assert_eq!(t.at(0, 0), 0.0);
        assert_eq!(t.at(0, 1), 1.0);
        assert_eq!(t.at(1, 0), 1.0);
    }

    #[test]
    fn ragged_csv_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "1,0\n0\n").unwrap();
        let err = load_target(&path, TargetFormat::Csv).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn p5_all_white_is_all_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let mut bytes = b"P5\n3 2\n255\n".to_vec();
        bytes.extend([255u8; 6]);
        fs::write(&path, bytes).unwrap();
        let t = load_target(&path, TargetFormat::Pgm).unwrap();
        assert!(t.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn p2_parses_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        fs::write(&path, "P2\n# a comment\n2 2\n255\n0 255\n128 64\n").unwrap();
        let t = load_target(&path, TargetFormat::Pgm).unwrap();
        assert_eq!(t.at(0, 1), 0.0);
        assert_eq!(t.at(1, 1), 1.0);
        assert!((t.at(0, 0) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        fs::write(&path, "P2\n1 1\n65535\n12\n").unwrap();
        assert!(load_target(&path, TargetFormat::Pgm).is_err());
    }

    #[test]
    fn csv_pgm_quantization_agreement() {
        let values = vec![0.0, 0.2, 0.5013, 0.9999, 1.0, 0.77];
        let (nx, ny) = (3, 2);
        let dir = tempfile::tempdir().unwrap();
        let cpath = dir.path().join("f.csv");
        write_field_csv(&cpath, &values, nx, ny).unwrap();
        let (back, bx, by) = read_field_csv(&cpath).unwrap();
        assert_eq!((bx, by), (nx, ny));
        assert_eq!(back, values);

        let bytes = field_to_pgm_bytes(&values, nx, ny);
        let ppath = dir.path().join("f.pgm");
        fs::write(&ppath, bytes).unwrap();
        let (pvals, _, _) = read_field_pgm(&ppath).unwrap();
        for (a, b) in back.iter().zip(&pvals) {
            // Differ only by the 8-bit quantization.
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn residual_midscale_gray() {
        let bytes = residual_to_pgm_bytes(&[0.0], 1, 1);
        assert_eq!(*bytes.last().unwrap(), 128);
        let bytes = residual_to_pgm_bytes(&[1.0, -1.0], 2, 1);
        assert_eq!(&bytes[bytes.len() - 2..], &[255, 0]);
    }
}
