use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Writes an `H × V` grid of attention weights as `<stem>.csv` (row-major,
/// shortest round-trip decimal) and `<stem>.pgm` (binary P5, max 255,
/// min-max rescaled; a constant grid maps to mid-gray 128).
///
/// Returns the two written paths.
pub fn export_attention(
    weights: &[f64],
    height: usize,
    width: usize,
    stem: &Path,
) -> Result<(PathBuf, PathBuf)> {
    if weights.len() != height * width {
        return Err(Error::dim("export_attention", &[height, width], &[weights.len()]));
    }
    let csv_path = stem.with_extension("csv");
    let pgm_path = stem.with_extension("pgm");

    let mut csv = String::new();
    for row in weights.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    fs::write(&csv_path, csv)?;

    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels: Vec<u8> = weights
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    let mut f = fs::File::create(&pgm_path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&pixels)?;
    Ok((csv_path, pgm_path))
}

/// Reads back a CSV grid written by [`export_attention`].
pub fn read_attention_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut offset = 0u64;
    let mut rows = Vec::new();
    for line in text.lines() {
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| Error::Format {
                    offset,
                    msg: format!("bad number {s:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        offset += line.len() as u64 + 1;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm_pixels(path: &Path) -> Vec<u8> {
        let bytes = fs::read(path).unwrap();
        // header is three newline-terminated lines
        let mut newlines = 0;
        let start = bytes
            .iter()
            .position(|&b| {
                if b == b'\n' {
                    newlines += 1;
                }
                newlines == 3
            })
            .unwrap();
        bytes[start + 1..].to_vec()
    }

    #[test]
    fn uniform_weights_are_constant_gray() {
        let dir = tempfile::tempdir().unwrap();
        let (_, pgm) = export_attention(&[0.25; 4], 2, 2, &dir.path().join("u")).unwrap();
        let px = pgm_pixels(&pgm);
        assert_eq!(px.len(), 4);
        assert!(px.iter().all(|&p| p == px[0]));
        assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n2 2\n255\n"));
    }

    #[test]
    fn one_hot_is_single_max_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let w = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let (_, pgm) = export_attention(&w, 2, 3, &dir.path().join("h")).unwrap();
        let px = pgm_pixels(&pgm);
        assert_eq!(px, vec![0, 0, 255, 0, 0, 0]);
    }

    #[test]
    fn csv_round_trip_sums_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let raw = [0.3, 1.7, -0.2, 0.9, 2.2, 0.1, 0.0, -1.0, 0.4];
        let z: f64 = raw.iter().map(|v: &f64| v.exp()).sum();
        let w: Vec<f64> = raw.iter().map(|v| v.exp() / z).collect();
        let (csv, _) = export_attention(&w, 3, 3, &dir.path().join("s")).unwrap();
        let back = read_attention_csv(&csv).unwrap();
        assert_eq!(back.len(), 3);
        let flat: Vec<f64> = back.into_iter().flatten().collect();
        assert_eq!(flat, w);
        assert!((flat.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let r = export_attention(&[1.0], 1, 1, Path::new("/nonexistent-dir/x/y"));
        assert!(matches!(r, Err(Error::Io(_))));
    }
}
