use std::path::{Path, PathBuf};

use super::{DataError, RunToFailureUnit};

/// Concatenates the per-minute vibration snapshots in `dir`, ordered by the
/// numeric file stem (`2.csv` before `10.csv`). Each file holds horizontal and
/// vertical acceleration columns; a header row is skipped.
pub fn parse_xjtu(dir: &Path, unit_id: usize) -> Result<RunToFailureUnit, DataError> {
    let entries = std::fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| DataError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let index = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| DataError::File {
                file: path.clone(),
                msg: "file name is not a numeric index".into(),
            })?;
        files.push((index, path));
    }
    if files.is_empty() {
        return Err(DataError::File {
            file: dir.to_path_buf(),
            msg: "no csv files".into(),
        });
    }
    files.sort();

    let mut series = vec![Vec::new(), Vec::new()];
    for (_, path) in &files {
        read_snapshot(path, &mut series)?;
    }
    Ok(RunToFailureUnit {
        unit_id,
        series,
        onset_index: None,
        condition: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    })
}

fn read_snapshot(path: &Path, series: &mut [Vec<f64>]) -> Result<(), DataError> {
    let file_err = |msg: String| DataError::File {
        file: path.to_path_buf(),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| file_err(e.to_string()))?;
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| file_err(e.to_string()))?;
        if rec.len() < 2 {
            return Err(file_err(format!("row {} has {} column(s), need 2", i + 1, rec.len())));
        }
        let parsed: Result<Vec<f64>, _> = rec.iter().take(2).map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => {
                series[0].push(v[0]);
                series[1].push(v[1]);
                rows += 1;
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(file_err(format!("row {}: {e}", i + 1))),
        }
    }
    if rows == 0 {
        return Err(file_err("no data rows".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn concatenates_in_numeric_order() {
        let d = tempfile::tempdir().unwrap();
        for (name, base) in [("10.csv", 3.0), ("2.csv", 2.0), ("1.csv", 1.0)] {
            let body: String = (0..4).map(|i| format!("{},{}\n", base, -(i as f64))).collect();
            write(d.path(), name, &format!("Horizontal_vibration_signals,Vertical_vibration_signals\n{body}"));
        }
        let u = parse_xjtu(d.path(), 0).unwrap();
        assert_eq!(u.len(), 12);
        assert_eq!(u.n_channels(), 2);
        assert_eq!(&u.series[0][..], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn single_column_is_rejected_with_file_name() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "1.csv", "0.5\n0.6\n");
        let e = parse_xjtu(d.path(), 0).unwrap_err();
        assert!(e.to_string().contains("1.csv"), "{e}");
    }
}
