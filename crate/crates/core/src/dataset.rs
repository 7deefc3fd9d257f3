//! Tabular datasets with a binary sensitive attribute and a binary label.
//!
//! A [`Dataset`] keeps the raw feature values (so categorical labels survive
//! for profiling) and produces a one-hot [`DesignMatrix`] for the models.
//! The sensitive attribute is kept apart from the features and only enters a
//! design matrix when explicitly requested.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Group id of the protected group (`S = s`).
pub const PROTECTED: u8 = 1;
/// Group id of everyone else (`S != s`).
pub const UNPROTECTED: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical { categories: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Numeric,
        }
    }

    pub fn categorical(name: impl Into<String>, categories: Vec<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Categorical { categories },
        }
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Categorical { categories } => Some(categories),
            FeatureKind::Numeric => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Numeric(f64),
    /// Index into the feature's category list. Codes past the end of the
    /// list stand for categories never seen at load time.
    Category(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<Value>,
}

impl FeatureVector {
    pub fn new(values: Vec<Value>) -> Self {
        FeatureVector { values }
    }

    pub fn numeric(values: &[f64]) -> Self {
        FeatureVector {
            values: values.iter().map(|&v| Value::Numeric(v)).collect(),
        }
    }
}

/// Schema for [`load_csv`], read from a TOML key-value file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub sensitive_column: String,
    pub sensitive_protected_value: String,
    pub label_column: String,
    pub label_positive_value: String,
    #[serde(default)]
    pub categorical_columns: Vec<String>,
    #[serde(default)]
    pub drop_columns: Vec<String>,
    /// Cell values treated as missing in addition to the empty string.
    #[serde(default = "default_missing")]
    pub missing_values: Vec<String>,
}

fn default_missing() -> Vec<String> {
    vec!["?".to_string()]
}

impl SchemaConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub raw_rows: usize,
    pub dropped_missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub features: Vec<FeatureSpec>,
    pub rows: Vec<FeatureVector>,
    pub sensitive: Vec<u8>,
    pub labels: Vec<u8>,
    pub sensitive_name: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<FeatureSpec>,
        rows: Vec<FeatureVector>,
        sensitive: Vec<u8>,
        labels: Vec<u8>,
        sensitive_name: impl Into<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            features,
            rows,
            sensitive,
            labels,
            sensitive_name: sensitive_name.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.rows.len();
        if n == 0 {
            return Err(Error::Validation("dataset has no rows".into()));
        }
        if self.sensitive.len() != n || self.labels.len() != n {
            return Err(Error::Validation(format!(
                "length mismatch: {} rows, {} sensitive values, {} labels",
                n,
                self.sensitive.len(),
                self.labels.len()
            )));
        }
        if let Some(v) = self.labels.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("label {v} is not binary")));
        }
        if let Some(v) = self.sensitive.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!(
                "sensitive group {v} is not binary"
            )));
        }
        for g in [UNPROTECTED, PROTECTED] {
            if !self.sensitive.contains(&g) {
                return Err(Error::Validation(format!(
                    "one sensitive group empty: no rows with group {g}"
                )));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.values.len() != self.features.len() {
                return Err(Error::Row {
                    row: i,
                    message: format!(
                        "{} values for {} features",
                        row.values.len(),
                        self.features.len()
                    ),
                });
            }
            for (value, spec) in row.values.iter().zip(&self.features) {
                match (value, &spec.kind) {
                    (Value::Numeric(v), FeatureKind::Numeric) if v.is_finite() => {}
                    (Value::Numeric(_), FeatureKind::Numeric) => {
                        return Err(Error::Row {
                            row: i,
                            message: format!("non-finite value in '{}'", spec.name),
                        })
                    }
                    (Value::Category(c), FeatureKind::Categorical { categories })
                        if (*c as usize) < categories.len() => {}
                    _ => {
                        return Err(Error::Row {
                            row: i,
                            message: format!("value does not match feature '{}'", spec.name),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn category_code(&self, feature: usize, label: &str) -> Option<u32> {
        self.features[feature]
            .categories()?
            .iter()
            .position(|c| c == label)
            .map(|p| p as u32)
    }

    pub fn category_label(&self, feature: usize, code: u32) -> Option<&str> {
        self.features[feature]
            .categories()?
            .get(code as usize)
            .map(String::as_str)
    }

    /// Names of the encoded columns, in design-matrix order (without the
    /// optional trailing sensitive column).
    pub fn encoded_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for spec in &self.features {
            match &spec.kind {
                FeatureKind::Numeric => names.push(spec.name.clone()),
                FeatureKind::Categorical { categories } => {
                    names.extend(categories.iter().map(|c| format!("{}={}", spec.name, c)))
                }
            }
        }
        names
    }

    pub fn encoded_width(&self) -> usize {
        self.features
            .iter()
            .map(|f| match &f.kind {
                FeatureKind::Numeric => 1,
                FeatureKind::Categorical { categories } => categories.len(),
            })
            .sum()
    }

    /// One-hot encodes a raw row. Unknown category codes map to the zero
    /// vector. When `sensitive` is given it is appended as the last column.
    pub fn encode(&self, row: &FeatureVector, sensitive: Option<u8>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.encoded_width() + 1);
        self.encode_into(row, &mut out);
        if let Some(s) = sensitive {
            out.push(s as f64);
        }
        out
    }

    fn encode_into(&self, row: &FeatureVector, out: &mut Vec<f64>) {
        for (value, spec) in row.values.iter().zip(&self.features) {
            match (&spec.kind, value) {
                (FeatureKind::Numeric, Value::Numeric(v)) => out.push(*v),
                (FeatureKind::Categorical { categories }, Value::Category(c)) => {
                    let start = out.len();
                    out.resize(start + categories.len(), 0.0);
                    if (*c as usize) < categories.len() {
                        out[start + *c as usize] = 1.0;
                    }
                }
                (FeatureKind::Numeric, Value::Category(_)) => out.push(0.0),
                (FeatureKind::Categorical { categories }, Value::Numeric(_)) => {
                    out.resize(out.len() + categories.len(), 0.0)
                }
            }
        }
    }

    /// Builds the model-facing matrix. `include_sensitive` appends the
    /// sensitive attribute as the final column.
    pub fn design(&self, include_sensitive: bool) -> DesignMatrix {
        let width = self.encoded_width() + usize::from(include_sensitive);
        let mut values = Vec::with_capacity(width * self.len());
        for (row, &s) in self.rows.iter().zip(&self.sensitive) {
            self.encode_into(row, &mut values);
            if include_sensitive {
                values.push(s as f64);
            }
        }
        let mut columns = self.encoded_names();
        let sensitive_column = if include_sensitive {
            columns.push(self.sensitive_name.clone());
            Some(width - 1)
        } else {
            None
        };
        DesignMatrix::new(values, columns, sensitive_column)
    }

    pub fn group_counts(&self, indices: &[usize]) -> [usize; 2] {
        let mut counts = [0usize; 2];
        for &i in indices {
            counts[self.sensitive[i] as usize] += 1;
        }
        counts
    }
}

/// Dense row-major numeric matrix consumed by every model.
#[derive(Debug)]
pub struct DesignMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
    columns: Vec<String>,
    sensitive_column: Option<usize>,
    sorted: OnceLock<Vec<SortedColumn>>,
}

/// One column in ascending value order (stable by row index).
#[derive(Clone, Debug)]
pub struct SortedColumn {
    pub rows: Vec<u32>,
    pub values: Vec<f64>,
    /// For a column with exactly two distinct values, the position of the
    /// first row holding the larger one.
    pub binary_split: Option<usize>,
}

impl Clone for DesignMatrix {
    fn clone(&self) -> Self {
        DesignMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            values: self.values.clone(),
            columns: self.columns.clone(),
            sensitive_column: self.sensitive_column,
            sorted: OnceLock::new(),
        }
    }
}

impl DesignMatrix {
    pub fn new(values: Vec<f64>, columns: Vec<String>, sensitive_column: Option<usize>) -> Self {
        let n_cols = columns.len();
        assert!(n_cols > 0, "design matrix needs at least one column");
        assert_eq!(values.len() % n_cols, 0, "ragged design matrix");
        DesignMatrix {
            n_rows: values.len() / n_cols,
            n_cols,
            values,
            columns,
            sensitive_column,
            sorted: OnceLock::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        let columns = (0..n_cols).map(|c| format!("x{c}")).collect();
        DesignMatrix::new(rows.concat(), columns, None)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn sensitive_column(&self) -> Option<usize> {
        self.sensitive_column
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.n_cols + c]
    }

    /// Every column sorted by value. Computed once and shared by all trees
    /// grown on this matrix.
    pub fn sorted_columns(&self) -> &[SortedColumn] {
        self.sorted.get_or_init(|| {
            (0..self.n_cols)
                .map(|c| {
                    let mut rows: Vec<u32> = (0..self.n_rows as u32).collect();
                    rows.sort_by(|&a, &b| {
                        self.get(a as usize, c).total_cmp(&self.get(b as usize, c))
                    });
                    let values: Vec<f64> = rows.iter().map(|&r| self.get(r as usize, c)).collect();
                    let changes: Vec<usize> = (1..values.len())
                        .filter(|&i| values[i] > values[i - 1])
                        .collect();
                    let binary_split = (changes.len() == 1).then(|| changes[0]);
                    SortedColumn {
                        rows,
                        values,
                        binary_split,
                    }
                })
                .collect()
        })
    }
}

enum ColumnRole {
    Feature(usize),
    Sensitive,
    Label,
    Dropped,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &SchemaConfig) -> Result<Dataset> {
    load_csv_with_report(path, schema).map(|(ds, _)| ds)
}

pub fn load_csv_with_report(
    path: impl AsRef<Path>,
    schema: &SchemaConfig,
) -> Result<(Dataset, LoadReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = schema.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    read_csv(file, schema, name)
}

/// Reads CSV from any reader; see [`load_csv`].
pub fn read_csv<R: std::io::Read>(
    reader: R,
    schema: &SchemaConfig,
    name: String,
) -> Result<(Dataset, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    let find = |col: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::Schema(format!("missing column '{col}'")))
    };
    let sensitive_idx = find(&schema.sensitive_column)?;
    let label_idx = find(&schema.label_column)?;
    for col in schema
        .categorical_columns
        .iter()
        .chain(&schema.drop_columns)
    {
        find(col)?;
    }

    let mut roles = Vec::with_capacity(header.len());
    let mut feature_names = Vec::new();
    let mut is_categorical = Vec::new();
    for (i, h) in header.iter().enumerate() {
        let role = if i == sensitive_idx {
            ColumnRole::Sensitive
        } else if i == label_idx {
            ColumnRole::Label
        } else if schema.drop_columns.contains(h) {
            ColumnRole::Dropped
        } else {
            feature_names.push(h.clone());
            is_categorical.push(schema.categorical_columns.contains(h));
            ColumnRole::Feature(feature_names.len() - 1)
        };
        roles.push(role);
    }

    let is_missing =
        |cell: &str| cell.is_empty() || schema.missing_values.iter().any(|m| m == cell);

    // First pass keeps raw strings; category lists need every row.
    let mut raw_rows: Vec<Vec<String>> = Vec::new();
    let mut sensitive = Vec::new();
    let mut labels = Vec::new();
    let mut label_values = BTreeSet::new();
    let mut report = LoadReport::default();
    for (row_no, record) in rdr.records().enumerate() {
        let record = record?;
        report.raw_rows += 1;
        if record.len() != header.len() {
            return Err(Error::Row {
                row: row_no,
                message: format!("{} cells, expected {}", record.len(), header.len()),
            });
        }
        if record
            .iter()
            .enumerate()
            .any(|(i, cell)| !matches!(roles[i], ColumnRole::Dropped) && is_missing(cell))
        {
            report.dropped_missing += 1;
            continue;
        }
        let mut cells = vec![String::new(); feature_names.len()];
        for (i, cell) in record.iter().enumerate() {
            match roles[i] {
                ColumnRole::Feature(f) => cells[f] = cell.to_string(),
                ColumnRole::Sensitive => {
                    sensitive.push(u8::from(cell == schema.sensitive_protected_value))
                }
                ColumnRole::Label => {
                    label_values.insert(cell.to_string());
                    labels.push(u8::from(cell == schema.label_positive_value));
                }
                ColumnRole::Dropped => {}
            }
        }
        raw_rows.push(cells);
    }
    if report.dropped_missing > 0 {
        info!(
            "dropped {} of {} rows with missing cells",
            report.dropped_missing, report.raw_rows
        );
    }
    if label_values.len() > 2 {
        return Err(Error::Validation(format!(
            "label column '{}' is not binary: {} distinct values",
            schema.label_column,
            label_values.len()
        )));
    }
    if !label_values.is_empty() && !label_values.contains(&schema.label_positive_value) {
        warn!(
            "label positive value '{}' never occurs in '{}'",
            schema.label_positive_value, schema.label_column
        );
    }

    let mut features = Vec::with_capacity(feature_names.len());
    let mut lookups: Vec<Option<BTreeMap<&str, u32>>> = Vec::with_capacity(feature_names.len());
    for (f, name) in feature_names.iter().enumerate() {
        if is_categorical[f] {
            let set: BTreeSet<&str> = raw_rows.iter().map(|r| r[f].as_str()).collect();
            let categories: Vec<String> = set.iter().map(|s| s.to_string()).collect();
            lookups.push(Some(set.into_iter().zip(0u32..).collect()));
            features.push(FeatureSpec::categorical(name.clone(), categories));
        } else {
            lookups.push(None);
            features.push(FeatureSpec::numeric(name.clone()));
        }
    }

    let mut rows = Vec::with_capacity(raw_rows.len());
    for (row_no, cells) in raw_rows.iter().enumerate() {
        let mut values = Vec::with_capacity(cells.len());
        for (f, cell) in cells.iter().enumerate() {
            let value = match &lookups[f] {
                Some(map) => Value::Category(map[cell.as_str()]),
                None => {
                    let v: f64 = cell.parse().map_err(|_| Error::Row {
                        row: row_no,
                        message: format!(
                            "unparsable numeric value '{}' in column '{}'",
                            cell, feature_names[f]
                        ),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Row {
                            row: row_no,
                            message: format!("non-finite value in column '{}'", feature_names[f]),
                        });
                    }
                    Value::Numeric(v)
                }
            };
            values.push(value);
        }
        rows.push(FeatureVector::new(values));
    }

    let ds = Dataset::new(
        name,
        features,
        rows,
        sensitive,
        labels,
        schema.sensitive_column.clone(),
    )?;
    Ok((ds, report))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPair {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Stratified train/test split over the four (label, group) cells.
///
/// The overall train size is `round(ratio * n)`; each cell gets its floor
/// share and the leftover slots go to the cells with the largest fractional
/// remainders, so every cell is within one instance of its target.
pub fn split(data: &Dataset, ratio: f64, seed: u64) -> Result<SplitPair> {
    split_subset(data, &data.all_indices(), ratio, seed)
}

/// [`split`] restricted to `indices`.
pub fn split_subset(data: &Dataset, indices: &[usize], ratio: f64, seed: u64) -> Result<SplitPair> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let mut strata: [Vec<usize>; 4] = Default::default();
    for &i in indices {
        strata[(data.labels[i] * 2 + data.sensitive[i]) as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for stratum in strata.iter_mut() {
        stratum.shuffle(&mut rng);
    }

    let mut quota = [0usize; 4];
    let mut remainders = Vec::new();
    for (k, stratum) in strata.iter().enumerate() {
        let n = stratum.len();
        if n < 2 {
            if n == 1 {
                warn!(
                    "stratum (label={}, group={}) has 1 instance; assigned to train",
                    k / 2,
                    k % 2
                );
            }
            quota[k] = n;
            continue;
        }
        let exact = ratio * n as f64;
        quota[k] = exact.floor() as usize;
        remainders.push((k, exact - exact.floor()));
    }
    let splittable: usize = remainders.iter().map(|&(k, _)| strata[k].len()).sum();
    let target = (ratio * splittable as f64).round() as usize;
    let assigned: usize = remainders.iter().map(|&(k, _)| quota[k]).sum();
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(k, _) in remainders.iter().take(target.saturating_sub(assigned)) {
        quota[k] += 1;
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, stratum) in strata.iter().enumerate() {
        train.extend_from_slice(&stratum[..quota[k]]);
        test.extend_from_slice(&stratum[quota[k]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPair { train, test, seed })
}
