//! Randomized-experiment data: the tabular model, CSV loading, and
//! stratified honest splitting.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Variant label of the control arm.
pub const CONTROL: usize = 0;

/// One experimental unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    pub features: Vec<f64>,
    /// Assigned arm, `0` is control.
    pub variant: usize,
    /// Observed metrics; index 0 is the objective metric.
    pub outcomes: Vec<f64>,
    /// Potential outcomes `[arm][metric]`, only known for simulated data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactuals: Option<Vec<Vec<f64>>>,
}

/// An immutable randomized-experiment dataset with `J` treatments plus
/// control and `K + 1` metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDataset {
    feature_names: Vec<String>,
    metric_names: Vec<String>,
    n_treatments: usize,
    units: Vec<Unit>,
}

impl ExperimentDataset {
    pub fn new(
        feature_names: Vec<String>,
        metric_names: Vec<String>,
        n_treatments: usize,
        units: Vec<Unit>,
    ) -> Result<Self> {
        let ds = ExperimentDataset {
            feature_names,
            metric_names,
            n_treatments,
            units,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let m = self.feature_names.len();
        let k = self.metric_names.len();
        if m == 0 {
            return Err(Error::Schema("at least one feature column is required".into()));
        }
        if k == 0 {
            return Err(Error::Schema("at least one metric column is required".into()));
        }
        if self.units.is_empty() {
            return Err(Error::Validation("dataset has no units".into()));
        }
        let with_cf = self.units[0].counterfactuals.is_some();
        for (row, unit) in self.units.iter().enumerate() {
            if unit.features.len() != m {
                return Err(Error::Validation(format!(
                    "unit {row} has {} features, expected {m}",
                    unit.features.len()
                )));
            }
            if unit.outcomes.len() != k {
                return Err(Error::Validation(format!(
                    "unit {row} has {} outcomes, expected {k}",
                    unit.outcomes.len()
                )));
            }
            if unit.variant > self.n_treatments {
                return Err(Error::Validation(format!(
                    "unit {row} has variant {} but only {} treatments are declared",
                    unit.variant, self.n_treatments
                )));
            }
            if unit.features.iter().chain(&unit.outcomes).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("unit {row} has a non-finite value")));
            }
            match (&unit.counterfactuals, with_cf) {
                (Some(cf), true) => {
                    if cf.len() != self.n_treatments + 1 || cf.iter().any(|r| r.len() != k) {
                        return Err(Error::Validation(format!(
                            "unit {row} counterfactual matrix must be {}x{k}",
                            self.n_treatments + 1
                        )));
                    }
                    if cf[unit.variant] != unit.outcomes {
                        return Err(Error::Validation(format!(
                            "unit {row} observed outcomes differ from its counterfactuals at the assigned arm"
                        )));
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(Error::Validation(
                        "counterfactuals must be present for all units or none".into(),
                    ))
                }
            }
        }
        if !self.units.iter().any(|u| u.variant == CONTROL) {
            return Err(Error::Validation("no control units".into()));
        }
        Ok(())
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// `K + 1`.
    pub fn n_metrics(&self) -> usize {
        self.metric_names.len()
    }

    /// `J`, not counting control.
    pub fn n_treatments(&self) -> usize {
        self.n_treatments
    }

    /// `J + 1`.
    pub fn n_arms(&self) -> usize {
        self.n_treatments + 1
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn metric_names(&self) -> &[String] {
        &self.metric_names
    }

    pub fn has_counterfactuals(&self) -> bool {
        self.units[0].counterfactuals.is_some()
    }

    pub fn arm_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_arms()];
        for u in &self.units {
            counts[u.variant] += 1;
        }
        counts
    }

    /// Mean observed outcome of control units for `metric`.
    pub fn control_mean(&self, metric: usize) -> f64 {
        let (sum, n) = self
            .units
            .iter()
            .filter(|u| u.variant == CONTROL)
            .fold((0.0, 0usize), |(s, n), u| (s + u.outcomes[metric], n + 1));
        sum / n as f64
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Units at `indices`, in the given order. Fails if the result would
    /// have no control units.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let units = indices.iter().map(|&i| self.units[i].clone()).collect();
        ExperimentDataset::new(
            self.feature_names.clone(),
            self.metric_names.clone(),
            self.n_treatments,
            units,
        )
    }

    /// Schema matching the layout written by [`write_experiment_csv`].
    pub fn csv_schema(&self, delimiter: char) -> CsvSchema {
        CsvSchema {
            id_column: Some("id".into()),
            feature_columns: self.feature_names.clone(),
            variant_column: "variant".into(),
            metric_columns: self.metric_names.clone(),
            n_treatments: Some(self.n_treatments),
            delimiter,
            counterfactuals: self.has_counterfactuals(),
        }
    }
}

fn default_delimiter() -> char {
    ','
}

/// Column roles for a CSV experiment export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Unit identifier column; row numbers are used when absent.
    #[serde(default)]
    pub id_column: Option<String>,
    pub feature_columns: Vec<String>,
    pub variant_column: String,
    /// Objective metric first, then the guardrail metrics.
    pub metric_columns: Vec<String>,
    /// Declared `J`. Inferred from the largest label when absent.
    #[serde(default)]
    pub n_treatments: Option<usize>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Expect `metric@arm` potential-outcome columns.
    #[serde(default)]
    pub counterfactuals: bool,
}

fn counterfactual_column(metric: &str, arm: usize) -> String {
    format!("{metric}@{arm}")
}

fn delimiter_byte(delimiter: char) -> Result<u8> {
    u8::try_from(delimiter)
        .ok()
        .filter(|b| b.is_ascii())
        .ok_or_else(|| Error::Schema(format!("delimiter {delimiter:?} is not a single ASCII byte")))
}

pub fn load_experiment_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<ExperimentDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_experiment_csv(file, schema)
}

pub fn read_experiment_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<ExperimentDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter_byte(schema.delimiter)?)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    if schema.feature_columns.is_empty() {
        return Err(Error::Schema("at least one feature column is required".into()));
    }
    if schema.metric_columns.is_empty() {
        return Err(Error::Schema("at least one metric column is required".into()));
    }
    let id_col = schema.id_column.as_deref().map(find).transpose()?;
    let feature_cols = schema
        .feature_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let variant_col = find(&schema.variant_column)?;
    let metric_cols = schema
        .metric_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    struct Raw {
        id: String,
        features: Vec<f64>,
        variant: usize,
        outcomes: Vec<f64>,
        cf_cells: Vec<f64>,
    }

    // counterfactual columns need J, which may only be known after reading
    let mut raw = Vec::new();
    let mut cf_headers: Vec<(usize, usize, usize)> = Vec::new(); // (arm, metric, column)
    if schema.counterfactuals {
        for (col, h) in headers.iter().enumerate() {
            if let Some((metric, arm)) = h.trim().rsplit_once('@') {
                if let (Some(k), Ok(arm)) = (
                    schema.metric_columns.iter().position(|m| m == metric),
                    arm.parse::<usize>(),
                ) {
                    cf_headers.push((arm, k, col));
                }
            }
        }
    }

    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let cell = |col: usize, name: &str| -> Result<f64> {
            let text = record.get(col).unwrap_or("").trim();
            if text.is_empty() {
                return Err(Error::Parse {
                    row,
                    column: name.to_string(),
                    message: "missing value".into(),
                });
            }
            text.parse::<f64>().map_err(|e| Error::Parse {
                row,
                column: name.to_string(),
                message: format!("`{text}` is not a number ({e})"),
            })
        };
        let features = feature_cols
            .iter()
            .zip(&schema.feature_columns)
            .map(|(&c, name)| cell(c, name))
            .collect::<Result<Vec<_>>>()?;
        let outcomes = metric_cols
            .iter()
            .zip(&schema.metric_columns)
            .map(|(&c, name)| cell(c, name))
            .collect::<Result<Vec<_>>>()?;
        let label = record.get(variant_col).unwrap_or("").trim();
        let variant = label.parse::<usize>().map_err(|_| Error::Parse {
            row,
            column: schema.variant_column.clone(),
            message: format!("`{label}` is not a non-negative integer variant label"),
        })?;
        let id = match id_col {
            Some(c) => record.get(c).unwrap_or("").trim().to_string(),
            None => row.to_string(),
        };
        let cf_cells = cf_headers
            .iter()
            .map(|&(_, _, col)| cell(col, &headers[col]))
            .collect::<Result<Vec<_>>>()?;
        raw.push(Raw {
            id,
            features,
            variant,
            outcomes,
            cf_cells,
        });
    }

    let max_label = raw.iter().map(|r| r.variant).max().unwrap_or(0);
    let n_treatments = match schema.n_treatments {
        Some(j) => {
            if let Some((row, r)) = raw.iter().enumerate().find(|(_, r)| r.variant > j) {
                return Err(Error::Validation(format!(
                    "row {row}: variant {} exceeds the declared {j} treatments",
                    r.variant
                )));
            }
            j
        }
        None => max_label,
    };

    let n_metrics = schema.metric_columns.len();
    if schema.counterfactuals {
        for arm in 0..=n_treatments {
            for metric in &schema.metric_columns {
                let name = counterfactual_column(metric, arm);
                if !headers.iter().any(|h| h.trim() == name) {
                    return Err(Error::Schema(format!("missing column `{name}`")));
                }
            }
        }
    }

    let units = raw
        .into_iter()
        .map(|r| {
            let counterfactuals = schema.counterfactuals.then(|| {
                let mut cf = vec![vec![0.0; n_metrics]; n_treatments + 1];
                for (&(arm, k, _), &v) in cf_headers.iter().zip(&r.cf_cells) {
                    if arm <= n_treatments {
                        cf[arm][k] = v;
                    }
                }
                cf
            });
            Unit {
                id: r.id,
                features: r.features,
                variant: r.variant,
                outcomes: r.outcomes,
                counterfactuals,
            }
        })
        .collect();

    ExperimentDataset::new(
        schema.feature_columns.clone(),
        schema.metric_columns.clone(),
        n_treatments,
        units,
    )
}

pub fn write_experiment_csv(ds: &ExperimentDataset, path: impl AsRef<Path>, delimiter: char) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(ds, file, delimiter)
}

/// Write `ds` with an `id` column, the features, `variant`, the metrics and,
/// when present, one `metric@arm` column per potential outcome.
pub fn write_csv<W: Write>(ds: &ExperimentDataset, writer: W, delimiter: char) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter_byte(delimiter)?)
        .from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend(ds.feature_names.iter().cloned());
    header.push("variant".into());
    header.extend(ds.metric_names.iter().cloned());
    if ds.has_counterfactuals() {
        for arm in 0..ds.n_arms() {
            for m in &ds.metric_names {
                header.push(counterfactual_column(m, arm));
            }
        }
    }
    w.write_record(&header)?;
    for u in &ds.units {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(u.id.clone());
        rec.extend(u.features.iter().map(f64::to_string));
        rec.push(u.variant.to_string());
        rec.extend(u.outcomes.iter().map(f64::to_string));
        if let Some(cf) = &u.counterfactuals {
            rec.extend(cf.iter().flatten().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Train/estimate halves for honest estimation.
#[derive(Debug, Clone)]
pub struct HonestSplit {
    pub train: ExperimentDataset,
    pub estimate: ExperimentDataset,
    pub fraction: f64,
    pub seed: u64,
}

pub const DEFAULT_HONEST_FRACTION: f64 = 0.5;

/// Split `ds` into a train part holding `fraction` of every arm and an
/// estimate part holding the rest. Both parts keep the original row order.
pub fn honest_split(ds: &ExperimentDataset, fraction: f64, seed: u64) -> Result<HonestSplit> {
    let (train, estimate) = stratified_indices(ds, fraction, seed)?;
    Ok(HonestSplit {
        train: ds.subset(&train)?,
        estimate: ds.subset(&estimate)?,
        fraction,
        seed,
    })
}

pub(crate) fn stratified_indices(
    ds: &ExperimentDataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let mut by_arm: Vec<Vec<usize>> = vec![Vec::new(); ds.n_arms()];
    for (i, u) in ds.units.iter().enumerate() {
        by_arm[u.variant].push(i);
    }
    let mut rng = rng::stream(seed, 0);
    let mut train = Vec::new();
    let mut estimate = Vec::new();
    for (arm, mut idx) in by_arm.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "arm {arm} has {} unit(s); honest splitting needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_train = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        estimate.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    estimate.sort_unstable();
    Ok((train, estimate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_per_arm: usize, arms: usize) -> ExperimentDataset {
        let mut units = Vec::new();
        for arm in 0..arms {
            for i in 0..n_per_arm {
                units.push(Unit {
                    id: format!("{arm}-{i}"),
                    features: vec![i as f64],
                    variant: arm,
                    outcomes: vec![1.0],
                    counterfactuals: None,
                });
            }
        }
        ExperimentDataset::new(vec!["f1".into()], vec!["y0".into()], arms - 1, units).unwrap()
    }

    #[test]
    fn minimal_csv_loads() {
        let text = "id,f1,variant,y0\na,0.5,0,1\nb,1.5,1,2\nc,-1,0,3\nd,2,1,4\n";
        let schema = CsvSchema {
            id_column: Some("id".into()),
            feature_columns: vec!["f1".into()],
            variant_column: "variant".into(),
            metric_columns: vec!["y0".into()],
            n_treatments: None,
            delimiter: ',',
            counterfactuals: false,
        };
        let ds = read_experiment_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.n_units(), 4);
        assert_eq!(ds.n_features(), 1);
        assert_eq!(ds.n_metrics(), 1);
        assert_eq!(ds.n_treatments(), 1);
        assert_eq!(ds.units()[2].id, "c");
        assert_eq!(ds.units()[2].features, vec![-1.0]);
    }

    #[test]
    fn out_of_range_variant_is_rejected() {
        let text = "id,f1,variant,y0\na,0,0,1\nb,0,3,1\n";
        let schema = CsvSchema {
            id_column: Some("id".into()),
            feature_columns: vec!["f1".into()],
            variant_column: "variant".into(),
            metric_columns: vec!["y0".into()],
            n_treatments: Some(2),
            delimiter: ',',
            counterfactuals: false,
        };
        let err = read_experiment_csv(text.as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn bad_cells_report_row_and_column() {
        let schema = CsvSchema {
            id_column: None,
            feature_columns: vec!["f1".into()],
            variant_column: "variant".into(),
            metric_columns: vec!["y0".into()],
            n_treatments: None,
            delimiter: ';',
            counterfactuals: false,
        };
        let err = read_experiment_csv("f1;variant;y0\n1;0;2\n1;1;oops\n".as_bytes(), &schema).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "y0");
            }
            other => panic!("unexpected {other}"),
        }
        let err = read_experiment_csv("f1;variant;y0\n;0;2\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 0, .. }));
        let err = read_experiment_csv("f1;arm;y0\n1;0;2\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn even_split_is_stratified_and_deterministic() {
        let ds = toy(50, 2);
        let a = honest_split(&ds, 0.5, 7).unwrap();
        let b = honest_split(&ds, 0.5, 7).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.train.arm_counts(), vec![25, 25]);
        assert_eq!(a.estimate.arm_counts(), vec![25, 25]);
    }

    #[test]
    fn uneven_fraction_rounds_per_arm() {
        // 0.3 * 10 = 3 train units per arm, 7 estimate units per arm.
        let ds = toy(10, 2);
        let s = honest_split(&ds, 0.3, 1).unwrap();
        assert_eq!(s.train.arm_counts(), vec![3, 3]);
        assert_eq!(s.estimate.arm_counts(), vec![7, 7]);
    }

    #[test]
    fn tiny_arm_is_insufficient() {
        let mut units = toy(5, 2).units().to_vec();
        units.truncate(6); // 5 control, 1 treated
        let ds = ExperimentDataset::new(vec!["f1".into()], vec!["y0".into()], 1, units).unwrap();
        assert!(matches!(honest_split(&ds, 0.5, 0), Err(Error::InsufficientData(_))));
        assert!(matches!(honest_split(&toy(5, 2), 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn counterfactual_consistency_is_enforced() {
        let unit = Unit {
            id: "a".into(),
            features: vec![0.0],
            variant: 1,
            outcomes: vec![2.0],
            counterfactuals: Some(vec![vec![1.0], vec![3.0]]),
        };
        let control = Unit {
            id: "b".into(),
            features: vec![0.0],
            variant: 0,
            outcomes: vec![1.0],
            counterfactuals: Some(vec![vec![1.0], vec![3.0]]),
        };
        let err = ExperimentDataset::new(vec!["f".into()], vec!["y".into()], 1, vec![control, unit]).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("counterfactual"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
