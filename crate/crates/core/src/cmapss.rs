//! Reader for the C-MAPSS turbofan text layout.
//!
//! Each row holds 26 whitespace separated columns: unit number, cycle,
//! three operating settings and 21 sensor channels. There is no header.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_SETTINGS: usize = 3;
pub const N_SENSORS: usize = 21;
pub const N_COLUMNS: usize = 2 + N_SETTINGS + N_SENSORS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetId {
    FD001,
    FD002,
    FD003,
    FD004,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [
        DatasetId::FD001,
        DatasetId::FD002,
        DatasetId::FD003,
        DatasetId::FD004,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::FD001 => "FD001",
            DatasetId::FD002 => "FD002",
            DatasetId::FD003 => "FD003",
            DatasetId::FD004 => "FD004",
        }
    }

    /// True for the sub-datasets recorded under six operating conditions.
    pub fn multi_condition(self) -> bool {
        matches!(self, DatasetId::FD002 | DatasetId::FD004)
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FD001" => Ok(DatasetId::FD001),
            "FD002" => Ok(DatasetId::FD002),
            "FD003" => Ok(DatasetId::FD003),
            "FD004" => Ok(DatasetId::FD004),
            other => Err(Error::Config(format!("unknown dataset id {other:?}"))),
        }
    }
}

/// One engine's run, cycles `1..=k_max` with no gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSeries {
    pub dataset: DatasetId,
    pub unit_id: u32,
    pub op_settings: Vec<[f64; N_SETTINGS]>,
    pub sensors: Vec<[f64; N_SENSORS]>,
}

impl EngineSeries {
    pub fn new(
        dataset: DatasetId,
        unit_id: u32,
        op_settings: Vec<[f64; N_SETTINGS]>,
        sensors: Vec<[f64; N_SENSORS]>,
    ) -> Result<Self> {
        if unit_id == 0 {
            return Err(Error::Integrity("unit ids start at 1".into()));
        }
        if op_settings.len() != sensors.len() {
            return Err(Error::Integrity(format!(
                "unit {unit_id}: {} setting rows vs {} sensor rows",
                op_settings.len(),
                sensors.len()
            )));
        }
        Ok(Self {
            dataset,
            unit_id,
            op_settings,
            sensors,
        })
    }

    /// Lifespan (or last observed cycle for truncated test engines).
    pub fn k_max(&self) -> usize {
        self.sensors.len()
    }

    pub fn cycles(&self) -> impl Iterator<Item = usize> {
        1..=self.k_max()
    }

    /// Selected sensor channels as an `m × N` matrix (one column per cycle).
    pub fn sensor_matrix(&self, selection: &SensorSelection) -> DMatrix<f64> {
        let idx = selection.zero_based();
        DMatrix::from_fn(idx.len(), self.k_max(), |ch, k| self.sensors[k][idx[ch]])
    }

    /// Keep only the first `len` cycles.
    pub fn truncated(&self, len: usize) -> EngineSeries {
        let len = len.min(self.k_max());
        EngineSeries {
            dataset: self.dataset,
            unit_id: self.unit_id,
            op_settings: self.op_settings[..len].to_vec(),
            sensors: self.sensors[..len].to_vec(),
        }
    }

    /// Render the engine back to C-MAPSS rows.
    pub fn to_rows(&self) -> String {
        let mut out = String::new();
        for (i, (set, sen)) in self.op_settings.iter().zip(&self.sensors).enumerate() {
            out.push_str(&format!("{} {}", self.unit_id, i + 1));
            for v in set.iter().chain(sen.iter()) {
                out.push(' ');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Sensors kept as model features, as sorted 1-based channel indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSelection {
    pub dataset: DatasetId,
    pub kept_indices: Vec<usize>,
}

const EXCLUDED_SINGLE_CONDITION: [usize; 7] = [1, 5, 6, 10, 16, 18, 19];
const EXCLUDED_MULTI_CONDITION: [usize; 5] = [10, 13, 16, 18, 19];

impl SensorSelection {
    pub fn custom(dataset: DatasetId, mut kept: Vec<usize>) -> Result<Self> {
        kept.sort_unstable();
        if kept.is_empty() {
            return Err(Error::Config("sensor selection is empty".into()));
        }
        if kept.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate sensor index in selection".into()));
        }
        if kept.iter().any(|&i| i == 0 || i > N_SENSORS) {
            return Err(Error::Config(format!(
                "sensor indices must lie in 1..={N_SENSORS}"
            )));
        }
        Ok(Self {
            dataset,
            kept_indices: kept,
        })
    }

    pub fn m(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn excluded(&self) -> Vec<usize> {
        (1..=N_SENSORS)
            .filter(|i| !self.kept_indices.contains(i))
            .collect()
    }

    pub fn zero_based(&self) -> Vec<usize> {
        self.kept_indices.iter().map(|i| i - 1).collect()
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.kept_indices.iter().map(|i| format!("s{i}")).collect()
    }
}

/// Default feature set per sub-dataset.
pub fn select_sensors(dataset: DatasetId) -> SensorSelection {
    let excluded: &[usize] = if dataset.multi_condition() {
        &EXCLUDED_MULTI_CONDITION
    } else {
        &EXCLUDED_SINGLE_CONDITION
    };
    SensorSelection {
        dataset,
        kept_indices: (1..=N_SENSORS).filter(|i| !excluded.contains(i)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulTarget {
    pub dataset: DatasetId,
    pub unit_id: u32,
    pub true_rul_at_cutoff: u32,
}

fn parse_integral(token: &str, row: usize, what: &str) -> Result<u32> {
    if let Ok(v) = token.parse::<u32>() {
        return Ok(v);
    }
    match token.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v >= 0.0 && v <= u32::MAX as f64 => Ok(v as u32),
        _ => Err(Error::Parse {
            row,
            message: format!("{what} {token:?} is not a nonnegative integer"),
        }),
    }
}

/// Parse a train or test file into per-engine series ordered by unit id.
pub fn parse_cmapss_file(text: &str, dataset: DatasetId) -> Result<Vec<EngineSeries>> {
    type Row = (u32, [f64; N_SETTINGS], [f64; N_SENSORS]);
    let mut units: BTreeMap<u32, Vec<Row>> = BTreeMap::new();

    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != N_COLUMNS {
            return Err(Error::Parse {
                row,
                message: format!("expected {N_COLUMNS} columns, found {}", tokens.len()),
            });
        }
        let unit = parse_integral(tokens[0], row, "unit")?;
        let cycle = parse_integral(tokens[1], row, "cycle")?;
        if unit == 0 {
            return Err(Error::Parse {
                row,
                message: "unit ids start at 1".into(),
            });
        }
        let mut values = [0.0; N_SETTINGS + N_SENSORS];
        for (slot, tok) in values.iter_mut().zip(&tokens[2..]) {
            *slot = tok.parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("non-numeric value {tok:?}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("non-finite value {tok:?}"),
                });
            }
        }
        let mut settings = [0.0; N_SETTINGS];
        settings.copy_from_slice(&values[..N_SETTINGS]);
        let mut sensors = [0.0; N_SENSORS];
        sensors.copy_from_slice(&values[N_SETTINGS..]);
        units.entry(unit).or_default().push((cycle, settings, sensors));
    }

    units
        .into_iter()
        .map(|(unit, mut rows)| {
            rows.sort_by_key(|r| r.0);
            for (i, r) in rows.iter().enumerate() {
                if r.0 as usize != i + 1 {
                    return Err(Error::Integrity(format!(
                        "unit {unit}: cycles are not contiguous from 1 (found cycle {} at position {})",
                        r.0,
                        i + 1
                    )));
                }
            }
            let (settings, sensors) = rows.into_iter().map(|(_, a, b)| (a, b)).unzip();
            EngineSeries::new(dataset, unit, settings, sensors)
        })
        .collect()
}

pub fn read_cmapss_file(path: &Path, dataset: DatasetId) -> Result<Vec<EngineSeries>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cmapss_file(&text, dataset)
}

/// Parse an `RUL_FDxxx.txt` file. When `expected` is given the line count must match.
pub fn load_rul_targets(
    text: &str,
    dataset: DatasetId,
    expected: Option<usize>,
) -> Result<Vec<RulTarget>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: i64 = line.parse().map_err(|_| Error::Parse {
            row: lineno + 1,
            message: format!("RUL value {line:?} is not an integer"),
        })?;
        if value < 0 {
            return Err(Error::Integrity(format!(
                "negative RUL {value} at row {}",
                lineno + 1
            )));
        }
        out.push(RulTarget {
            dataset,
            unit_id: out.len() as u32 + 1,
            true_rul_at_cutoff: value as u32,
        });
    }
    if let Some(n) = expected {
        if n != out.len() {
            return Err(Error::Integrity(format!(
                "{} RUL targets for {n} test engines",
                out.len()
            )));
        }
    }
    Ok(out)
}

pub fn read_rul_targets(
    path: &Path,
    dataset: DatasetId,
    expected: Option<usize>,
) -> Result<Vec<RulTarget>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_rul_targets(&text, dataset, expected)
}

/// Normalized CSV export: `unit,cycle,<kept sensor columns>`.
pub fn to_normalized_csv(engines: &[EngineSeries], selection: &SensorSelection) -> String {
    let mut out = String::from("unit,cycle");
    for name in selection.channel_names() {
        out.push(',');
        out.push_str(&name);
    }
    out.push('\n');
    let idx = selection.zero_based();
    for e in engines {
        for (k, row) in e.sensors.iter().enumerate() {
            out.push_str(&format!("{},{}", e.unit_id, k + 1));
            for &i in &idx {
                out.push_str(&format!(",{:?}", row[i]));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(unit: u32, cycle: u32, base: f64) -> String {
        let mut s = format!("{unit} {cycle}");
        for j in 0..(N_SETTINGS + N_SENSORS) {
            s.push_str(&format!(" {}", base + j as f64 * 0.5));
        }
        s
    }

    #[test]
    fn empty_text_gives_no_engines() {
        assert!(parse_cmapss_file("", DatasetId::FD001).unwrap().is_empty());
        assert!(parse_cmapss_file("\n  \n", DatasetId::FD001).unwrap().is_empty());
    }

    #[test]
    fn two_rows_form_one_engine() {
        let text = format!("{}  \n{}   \n\n", row(1, 1, 0.0), row(1, 2, 1.0));
        let engines = parse_cmapss_file(&text, DatasetId::FD001).unwrap();
        assert_eq!(engines.len(), 1);
        assert_eq!(engines[0].k_max(), 2);
        assert_eq!(engines[0].sensors[1][0], 1.0 + 1.5);
    }

    #[test]
    fn rows_are_grouped_and_sorted() {
        let text = [row(2, 2, 0.0), row(1, 1, 0.0), row(2, 1, 0.0)].join("\n");
        let engines = parse_cmapss_file(&text, DatasetId::FD002).unwrap();
        assert_eq!(engines.iter().map(|e| e.unit_id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(engines[1].k_max(), 2);
    }

    #[test]
    fn wrong_column_count_reports_row() {
        let text = format!("{}\n1 2 3", row(1, 1, 0.0));
        match parse_cmapss_file(&text, DatasetId::FD001) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_value_reports_row() {
        let mut bad = row(1, 1, 0.0);
        bad.push_str("x");
        let text = format!("\n{bad}");
        match parse_cmapss_file(&text, DatasetId::FD001) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gap_in_cycles_is_integrity_error() {
        let text = [row(7, 1, 0.0), row(7, 3, 0.0)].join("\n");
        match parse_cmapss_file(&text, DatasetId::FD001) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("unit 7")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sensor_selection_tables() {
        let fd1 = select_sensors(DatasetId::FD001);
        assert_eq!(fd1.m(), 14);
        assert_eq!(fd1.excluded(), vec![1, 5, 6, 10, 16, 18, 19]);
        let fd4 = select_sensors(DatasetId::FD004);
        assert_eq!(fd4.m(), 16);
        assert_eq!(fd4.excluded(), vec![10, 13, 16, 18, 19]);
        assert_eq!(
            select_sensors(DatasetId::FD003).kept_indices,
            fd1.kept_indices
        );
        assert_eq!(
            select_sensors(DatasetId::FD002).kept_indices,
            fd4.kept_indices
        );
    }

    #[test]
    fn custom_selection_validates() {
        assert!(SensorSelection::custom(DatasetId::FD001, vec![2, 2]).is_err());
        assert!(SensorSelection::custom(DatasetId::FD001, vec![0]).is_err());
        assert!(SensorSelection::custom(DatasetId::FD001, vec![22]).is_err());
        let s = SensorSelection::custom(DatasetId::FD001, vec![9, 3]).unwrap();
        assert_eq!(s.kept_indices, vec![3, 9]);
    }

    #[test]
    fn sensor_matrix_matches_selection() {
        let text = [row(1, 1, 0.0), row(1, 2, 10.0), row(1, 3, 20.0)].join("\n");
        let e = &parse_cmapss_file(&text, DatasetId::FD001).unwrap()[0];
        let sel = select_sensors(DatasetId::FD001);
        let x = e.sensor_matrix(&sel);
        assert_eq!(x.shape(), (sel.m(), 3));
        for (ch, &s) in sel.kept_indices.iter().enumerate() {
            for k in 0..3 {
                assert_eq!(x[(ch, k)], e.sensors[k][s - 1]);
            }
        }
    }

    #[test]
    fn rul_targets() {
        let t = load_rul_targets("112\n", DatasetId::FD001, None).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].true_rul_at_cutoff, 112);
        assert_eq!(t[0].unit_id, 1);
        assert!(matches!(
            load_rul_targets("-3", DatasetId::FD001, None),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            load_rul_targets("1\n2\n", DatasetId::FD001, Some(3)),
            Err(Error::Integrity(_))
        ));
        let t = load_rul_targets("5 \n\n7\n", DatasetId::FD002, Some(2)).unwrap();
        assert_eq!(t[1].unit_id, 2);
        assert_eq!(t[1].true_rul_at_cutoff, 7);
    }

    #[test]
    fn csv_export_header_and_rows() {
        let text = [row(3, 1, 0.0), row(3, 2, 1.0)].join("\n");
        let engines = parse_cmapss_file(&text, DatasetId::FD001).unwrap();
        let sel = select_sensors(DatasetId::FD001);
        let csv = to_normalized_csv(&engines, &sel);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("unit,cycle,s2,s3,s4,s7"));
        assert_eq!(lines[1].split(',').count(), 2 + sel.m());
        assert!(lines[2].starts_with("3,2,"));
    }

    proptest! {
        #[test]
        fn rows_round_trip(
            unit in 1u32..500,
            values in prop::collection::vec(
                prop::collection::vec(-1e4f64..1e4, N_SETTINGS + N_SENSORS), 1..12),
        ) {
            let settings = values.iter().map(|v| {
                let mut a = [0.0; N_SETTINGS];
                a.copy_from_slice(&v[..N_SETTINGS]);
                a
            }).collect();
            let sensors = values.iter().map(|v| {
                let mut a = [0.0; N_SENSORS];
                a.copy_from_slice(&v[N_SETTINGS..]);
                a
            }).collect();
            let e = EngineSeries::new(DatasetId::FD003, unit, settings, sensors).unwrap();
            let parsed = parse_cmapss_file(&e.to_rows(), DatasetId::FD003).unwrap();
            prop_assert_eq!(parsed.len(), 1);
            prop_assert_eq!(&parsed[0], &e);
        }
    }
}
