use std::path::Path;

use super::{DataError, RunToFailureUnit};

/// Sensor columns (0-based among the 21) kept by default: the 14 channels
/// that are not constant across the turbofan fleet.
pub const DEFAULT_SENSORS: [usize; 14] = [1, 2, 3, 6, 7, 8, 10, 11, 12, 13, 14, 16, 19, 20];

const COLUMNS: usize = 26;

/// Reads a turbofan trajectory file: per row unit id, cycle, three operating
/// settings and 21 sensors, whitespace separated.
pub fn parse_cmapss(path: &Path, sensors: &[usize]) -> Result<Vec<RunToFailureUnit>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_cmapss_str(&text, &path.display().to_string(), sensors)
}

pub fn parse_cmapss_str(text: &str, origin: &str, sensors: &[usize]) -> Result<Vec<RunToFailureUnit>, DataError> {
    if let Some(&bad) = sensors.iter().find(|&&s| s >= 21) {
        return Err(DataError::Invalid(format!("sensor index {bad} out of range 0..21")));
    }
    if sensors.is_empty() {
        return Err(DataError::Invalid("no sensors selected".into()));
    }
    let err = |line: usize, msg: String| DataError::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut units: Vec<RunToFailureUnit> = Vec::new();
    let mut last_cycle = 0.0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let vals = raw
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| err(line, format!("bad number {f:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != COLUMNS {
            return Err(err(line, format!("expected {COLUMNS} columns, found {}", vals.len())));
        }
        let id = vals[0];
        if id < 0.0 || id.fract() != 0.0 {
            return Err(err(line, format!("unit id {id} is not a non-negative integer")));
        }
        let id = id as usize;
        let cycle = vals[1];
        let new_unit = units.last().is_none_or(|u| u.unit_id != id);
        if new_unit {
            if units.iter().any(|u| u.unit_id == id) {
                return Err(err(line, format!("unit {id} rows are not contiguous")));
            }
            units.push(RunToFailureUnit {
                unit_id: id,
                series: vec![Vec::new(); sensors.len()],
                onset_index: None,
                condition: String::new(),
            });
        } else if cycle <= last_cycle {
            return Err(err(line, format!("cycle {cycle} does not increase (previous {last_cycle})")));
        }
        last_cycle = cycle;
        let unit = units.last_mut().expect("pushed above");
        for (c, &s) in sensors.iter().enumerate() {
            unit.series[c].push(vals[5 + s]);
        }
    }
    units.sort_by_key(|u| u.unit_id);
    Ok(units)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(unit: usize, cycle: usize) -> String {
        let mut v = vec![unit.to_string(), cycle.to_string(), "0.1".into(), "0.2".into(), "100".into()];
        v.extend((0..21).map(|s| format!("{}.5", s + cycle)));
        v.join(" ")
    }

    #[test]
    fn two_units() {
        let text = [row(1, 1), row(1, 2), row(1, 3), row(2, 1), row(2, 2)].join("\n");
        let units = parse_cmapss_str(&text, "toy", &DEFAULT_SENSORS).unwrap();
        assert_eq!(units.len(), 2);
        assert_eq!(units[0].len(), 3);
        assert_eq!(units[1].len(), 2);
        assert_eq!(units[0].n_channels(), 14);
        // sensor index 1 of cycle 2 → "3.5"
        assert_eq!(units[0].series[0][1], 3.5);
    }

    #[test]
    fn all_sensors() {
        let all: Vec<usize> = (0..21).collect();
        let units = parse_cmapss_str(&row(1, 1), "toy", &all).unwrap();
        assert_eq!(units[0].n_channels(), 21);
    }

    #[test]
    fn wrong_column_count_names_line() {
        let text = format!("{}\n1 2 3", row(1, 1));
        let e = parse_cmapss_str(&text, "toy", &DEFAULT_SENSORS).unwrap_err();
        assert!(matches!(e, DataError::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn non_monotone_cycle() {
        let text = [row(1, 2), row(1, 2)].join("\n");
        let e = parse_cmapss_str(&text, "toy", &DEFAULT_SENSORS).unwrap_err();
        assert!(matches!(e, DataError::Parse { line: 2, .. }), "{e}");
    }
}
