//! Schema declaration, typed dataset storage, standardization and the
//! regression design vector.
//!
//! A dataset is a set of typed columns. Every column is either *random*
//! (modelled, may have missing cells) or *fixed* (conditioning information,
//! always observed). Continuous columns are standardized on load; the
//! recorded mean and sd allow mapping imputations back to the original scale.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema parse error: {0}")]
    SchemaParse(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("column `{0}` is not declared in the schema")]
    UnknownColumn(String),
    #[error("schema variable `{0}` has no column in the file")]
    MissingColumn(String),
    #[error("row {row}: value {value} of `{column}` is outside 1..={max}")]
    OutOfRangeLevel {
        column: String,
        row: usize,
        value: String,
        max: u32,
    },
    #[error("row {row}: fixed variable `{column}` is missing")]
    MissingFixedValue { column: String, row: usize },
    #[error("row {row}: `{value}` in continuous column `{column}` is not numeric")]
    NonNumericContinuous {
        column: String,
        row: usize,
        value: String,
    },
    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("variable `{0}` has no current value (missing and not imputed)")]
    UnresolvedMissing(String),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Random,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kind {
    Ordinal { levels: u32 },
    Nominal { categories: u32 },
    Continuous,
}

impl Kind {
    /// Number of admissible levels for discrete kinds.
    pub fn level_count(&self) -> Option<u32> {
        match *self {
            Kind::Ordinal { levels } => Some(levels),
            Kind::Nominal { categories } => Some(categories),
            Kind::Continuous => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, Kind::Continuous)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub role: Role,
    #[serde(flatten)]
    pub kind: Kind,
}

impl VariableSpec {
    pub fn new(name: impl Into<String>, role: Role, kind: Kind) -> Self {
        VariableSpec {
            name: name.into(),
            role,
            kind,
        }
    }

    pub fn ordinal(name: impl Into<String>, role: Role, levels: u32) -> Self {
        Self::new(name, role, Kind::Ordinal { levels })
    }

    pub fn nominal(name: impl Into<String>, role: Role, categories: u32) -> Self {
        Self::new(name, role, Kind::Nominal { categories })
    }

    pub fn continuous(name: impl Into<String>, role: Role) -> Self {
        Self::new(name, role, Kind::Continuous)
    }
}

/// Ordered list of variable declarations. Column `j` of a dataset is
/// described by `variables[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub variables: Vec<VariableSpec>,
}

impl Schema {
    pub fn new(variables: Vec<VariableSpec>) -> Result<Self, DataError> {
        let schema = Schema { variables };
        schema.check()?;
        Ok(schema)
    }

    fn check(&self) -> Result<(), DataError> {
        let mut seen = HashMap::new();
        for (j, v) in self.variables.iter().enumerate() {
            if seen.insert(v.name.as_str(), j).is_some() {
                return Err(DataError::InvalidSchema(format!(
                    "duplicate variable `{}`",
                    v.name
                )));
            }
            if let Some(k) = v.kind.level_count() {
                if k < 2 {
                    return Err(DataError::InvalidSchema(format!(
                        "`{}` needs at least 2 levels, got {k}",
                        v.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reads a schema sidecar. `.json` files are parsed as JSON, anything
    /// else as TOML.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let is_json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false);
        let schema: Schema = if is_json {
            serde_json::from_str(&text).map_err(|e| DataError::SchemaParse(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| DataError::SchemaParse(e.to_string()))?
        };
        schema.check()?;
        Ok(schema)
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn layout(&self) -> Layout {
        Layout::from_schema(self)
    }
}

/// Column indices grouped by the role each plays in the model.
///
/// The latent vector of an observation is `(W, Z)`: entry `j < p_o` belongs
/// to `ordinal[j]`, entry `p_o + j` to `continuous[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub ordinal: Vec<usize>,
    pub continuous: Vec<usize>,
    pub nominal: Vec<usize>,
    pub fixed: Vec<usize>,
}

impl Layout {
    pub fn from_schema(schema: &Schema) -> Self {
        let mut layout = Layout {
            ordinal: vec![],
            continuous: vec![],
            nominal: vec![],
            fixed: vec![],
        };
        for (j, v) in schema.variables.iter().enumerate() {
            match (v.role, v.kind) {
                (Role::Fixed, _) => layout.fixed.push(j),
                (Role::Random, Kind::Ordinal { .. }) => layout.ordinal.push(j),
                (Role::Random, Kind::Continuous) => layout.continuous.push(j),
                (Role::Random, Kind::Nominal { .. }) => layout.nominal.push(j),
            }
        }
        layout
    }

    /// `p_o + p_c`, the dimension of the Gaussian kernel.
    pub fn latent_dim(&self) -> usize {
        self.ordinal.len() + self.continuous.len()
    }

    /// Dataset column backing latent coordinate `j`.
    pub fn latent_column(&self, j: usize) -> usize {
        if j < self.ordinal.len() {
            self.ordinal[j]
        } else {
            self.continuous[j - self.ordinal.len()]
        }
    }
}

/// Mean and sample sd (divisor n-1) of the observed entries of a continuous
/// column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub const IDENTITY: Standardization = Standardization { mean: 0.0, sd: 1.0 };

    pub fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self::IDENTITY;
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        // Constant columns are only centred.
        let sd = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
        Standardization { mean, sd }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    /// Ordinal or nominal levels in `1..=k`. Missing entries hold 0.
    Levels(Vec<u32>),
    /// Standardized continuous values. Missing entries hold NaN.
    Real(Vec<f64>),
}


/// Column-typed data with a missingness mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedDataset {
    schema: Schema,
    n: usize,
    columns: Vec<Column>,
    missing: Vec<Vec<bool>>,
    standardization: Vec<Option<Standardization>>,
}

impl MixedDataset {
    /// Builds a dataset from raw (original-scale) values, validating levels
    /// and standardizing continuous columns. `values[j][i]` is row `i` of
    /// column `j`; `None` marks a missing cell.
    pub fn from_raw(schema: Schema, values: Vec<Vec<Option<f64>>>) -> Result<Self, DataError> {
        Self::build(schema, values, None)
    }

    /// Like [`MixedDataset::from_raw`] but continuous values are taken to be
    /// on the model scale already and are stored with the given
    /// standardization records (identity when `None`).
    pub fn from_standardized(
        schema: Schema,
        values: Vec<Vec<Option<f64>>>,
        standardization: Option<Vec<Option<Standardization>>>,
    ) -> Result<Self, DataError> {
        let records = standardization.unwrap_or_else(|| {
            schema
                .variables
                .iter()
                .map(|v| (v.kind == Kind::Continuous).then_some(Standardization::IDENTITY))
                .collect()
        });
        Self::build(schema, values, Some(records))
    }

    fn build(
        schema: Schema,
        values: Vec<Vec<Option<f64>>>,
        preset: Option<Vec<Option<Standardization>>>,
    ) -> Result<Self, DataError> {
        schema.check()?;
        if values.len() != schema.len() {
            return Err(DataError::InvalidSchema(format!(
                "{} columns supplied for {} variables",
                values.len(),
                schema.len()
            )));
        }
        let n = values.first().map_or(0, |c| c.len());
        let mut columns = Vec::with_capacity(schema.len());
        let mut missing = Vec::with_capacity(schema.len());
        let mut standardization = Vec::with_capacity(schema.len());
        for (j, (var, col)) in schema.variables.iter().zip(values).enumerate() {
            if col.len() != n {
                return Err(DataError::InvalidSchema(format!(
                    "column `{}` has {} rows, expected {n}",
                    var.name,
                    col.len()
                )));
            }
            let mask: Vec<bool> = col.iter().map(|v| v.is_none()).collect();
            if var.role == Role::Fixed {
                if let Some(row) = mask.iter().position(|&m| m) {
                    return Err(DataError::MissingFixedValue {
                        column: var.name.clone(),
                        row,
                    });
                }
            }
            match var.kind {
                Kind::Continuous => {
                    if let Some((row, v)) = col
                        .iter()
                        .enumerate()
                        .find(|(_, v)| v.is_some_and(|x| !x.is_finite()))
                    {
                        return Err(DataError::NonNumericContinuous {
                            column: var.name.clone(),
                            row,
                            value: format!("{}", v.unwrap()),
                        });
                    }
                    let record = match &preset {
                        Some(p) => p[j].unwrap_or(Standardization::IDENTITY),
                        None => Standardization::fit(col.iter().flatten().copied()),
                    };
                    let stored = col
                        .iter()
                        .map(|v| match v {
                            Some(x) if preset.is_none() => record.apply(*x),
                            Some(x) => *x,
                            None => f64::NAN,
                        })
                        .collect();
                    columns.push(Column::Real(stored));
                    standardization.push(Some(record));
                }
                kind => {
                    let k = kind.level_count().unwrap();
                    let mut levels = Vec::with_capacity(n);
                    for (row, v) in col.iter().enumerate() {
                        match v {
                            None => levels.push(0),
                            Some(x) => {
                                if x.fract() != 0.0 || *x < 1.0 || *x > k as f64 {
                                    return Err(DataError::OutOfRangeLevel {
                                        column: var.name.clone(),
                                        row,
                                        value: format!("{x}"),
                                        max: k,
                                    });
                                }
                                levels.push(*x as u32);
                            }
                        }
                    }
                    columns.push(Column::Levels(levels));
                    standardization.push(None);
                }
            }
            missing.push(mask);
        }
        Ok(MixedDataset {
            schema,
            n,
            columns,
            missing,
            standardization,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &Column {
        &self.columns[j]
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[col][row]
    }

    pub fn missing_count(&self, col: usize) -> usize {
        self.missing[col].iter().filter(|&&m| m).count()
    }

    pub fn standardization(&self, col: usize) -> Option<Standardization> {
        self.standardization[col]
    }

    /// Level of a discrete cell, `None` if missing or continuous.
    pub fn level(&self, row: usize, col: usize) -> Option<u32> {
        match &self.columns[col] {
            Column::Levels(v) if !self.missing[col][row] => Some(v[row]),
            _ => None,
        }
    }

    /// Model-scale value of any cell (levels are returned as floats).
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        if self.missing[col][row] {
            return None;
        }
        Some(match &self.columns[col] {
            Column::Levels(v) => v[row] as f64,
            Column::Real(v) => v[row],
        })
    }

    /// Original-scale value of a cell.
    pub fn raw_value(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.value(row, col)?;
        Some(match self.standardization[col] {
            Some(s) => s.invert(v),
            None => v,
        })
    }

    pub fn row(&self, row: usize) -> Vec<Option<f64>> {
        (0..self.n_cols()).map(|j| self.value(row, j)).collect()
    }

    /// Overwrites an observed cell with a model-scale value. Used by
    /// simulation studies that regenerate the random part of a dataset.
    pub fn set_observed(&mut self, row: usize, col: usize, value: f64) -> Result<(), DataError> {
        let var = &self.schema.variables[col];
        match &mut self.columns[col] {
            Column::Levels(v) => {
                let k = var.kind.level_count().unwrap();
                if value.fract() != 0.0 || value < 1.0 || value > k as f64 {
                    return Err(DataError::OutOfRangeLevel {
                        column: var.name.clone(),
                        row,
                        value: format!("{value}"),
                        max: k,
                    });
                }
                v[row] = value as u32;
            }
            Column::Real(v) => {
                if !value.is_finite() {
                    return Err(DataError::NonNumericContinuous {
                        column: var.name.clone(),
                        row,
                        value: format!("{value}"),
                    });
                }
                v[row] = value;
            }
        }
        self.missing[col][row] = false;
        Ok(())
    }

    /// Marks a random cell as missing.
    pub fn set_missing(&mut self, row: usize, col: usize) -> Result<(), DataError> {
        let var = &self.schema.variables[col];
        if var.role == Role::Fixed {
            return Err(DataError::MissingFixedValue {
                column: var.name.clone(),
                row,
            });
        }
        self.missing[col][row] = true;
        match &mut self.columns[col] {
            Column::Levels(v) => v[row] = 0,
            Column::Real(v) => v[row] = f64::NAN,
        }
        Ok(())
    }

    /// Observed (min, max) of a continuous column on the model scale.
    pub fn observed_range(&self, col: usize) -> Option<(f64, f64)> {
        match &self.columns[col] {
            Column::Real(v) => {
                let mut it = v
                    .iter()
                    .zip(&self.missing[col])
                    .filter(|(_, &m)| !m)
                    .map(|(x, _)| *x);
                let first = it.next()?;
                Some(it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x))))
            }
            Column::Levels(_) => None,
        }
    }

    /// Fixed-variable vector of a row in `Layout::fixed` order.
    pub fn fixed_vector(&self, row: usize) -> Vec<f64> {
        self.schema
            .variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.role == Role::Fixed)
            .map(|(j, _)| self.value(row, j).expect("fixed values are always observed"))
            .collect()
    }

    /// Writes the dataset as CSV on the original scale, missing cells as "NA".
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.schema.variables.iter().map(|v| v.name.as_str()))?;
        for i in 0..self.n {
            let record: Vec<String> = (0..self.n_cols())
                .map(|j| match (self.raw_value(i, j), &self.columns[j]) {
                    (None, _) => "NA".to_string(),
                    (Some(v), Column::Levels(_)) => format!("{}", v as u32),
                    (Some(v), Column::Real(_)) => format!("{v}"),
                })
                .collect();
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn is_missing_token(s: &str) -> bool {
    s.is_empty() || s == "NA"
}

/// Reads a CSV file (header row + RFC-4180 quoting) against a schema.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<MixedDataset, DataError> {
    let file = fs::File::open(path)?;
    load_csv_from_reader(file, schema)
}

pub fn load_csv_from_reader<R: Read>(reader: R, schema: &Schema) -> Result<MixedDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut positions = vec![None; schema.len()];
    for (pos, name) in headers.iter().enumerate() {
        let name = name.trim();
        let j = schema
            .index_of(name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))?;
        positions[j] = Some(pos);
    }
    let positions: Vec<usize> = positions
        .into_iter()
        .enumerate()
        .map(|(j, p)| p.ok_or_else(|| DataError::MissingColumn(schema.variables[j].name.clone())))
        .collect::<Result<_, _>>()?;

    let mut values: Vec<Vec<Option<f64>>> = vec![Vec::new(); schema.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(DataError::RaggedRow {
                row,
                found: record.len(),
                expected: headers.len(),
            });
        }
        for (j, var) in schema.variables.iter().enumerate() {
            let cell = record[positions[j]].trim();
            if is_missing_token(cell) {
                values[j].push(None);
                continue;
            }
            let parsed = match var.kind {
                Kind::Continuous => {
                    cell.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| DataError::NonNumericContinuous {
                            column: var.name.clone(),
                            row,
                            value: cell.to_string(),
                        })?
                }
                kind => cell
                    .parse::<u32>()
                    .map(f64::from)
                    .map_err(|_| DataError::OutOfRangeLevel {
                        column: var.name.clone(),
                        row,
                        value: cell.to_string(),
                        max: kind.level_count().unwrap(),
                    })?,
            };
            values[j].push(Some(parsed));
        }
    }
    MixedDataset::from_raw(schema.clone(), values)
}

/// One term of the regression design vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "term", rename_all = "snake_case")]
pub enum DesignTerm {
    Intercept,
    Dummy { variable: String, level: u32 },
    Linear { variable: String },
    Interaction {
        left: Box<DesignTerm>,
        right: Box<DesignTerm>,
    },
}

impl DesignTerm {
    pub fn dummy(variable: impl Into<String>, level: u32) -> Self {
        DesignTerm::Dummy {
            variable: variable.into(),
            level,
        }
    }

    pub fn linear(variable: impl Into<String>) -> Self {
        DesignTerm::Linear {
            variable: variable.into(),
        }
    }

    pub fn interaction(left: DesignTerm, right: DesignTerm) -> Self {
        DesignTerm::Interaction {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn label(&self) -> String {
        match self {
            DesignTerm::Intercept => "(intercept)".to_string(),
            DesignTerm::Dummy { variable, level } => format!("{variable}={level}"),
            DesignTerm::Linear { variable } => variable.clone(),
            DesignTerm::Interaction { left, right } => {
                format!("{}:{}", left.label(), right.label())
            }
        }
    }
}

/// Ordered list of design terms; the first is always the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub terms: Vec<DesignTerm>,
}

impl DesignConfig {
    pub fn intercept_only() -> Self {
        DesignConfig {
            terms: vec![DesignTerm::Intercept],
        }
    }

    /// Intercept, dummy coding (level 1 dropped) of every nominal random
    /// variable and every ordinal/nominal fixed variable, and linear terms
    /// for continuous fixed variables. With `ordinal_fixed_linear` the
    /// ordinal fixed variables enter linearly instead.
    pub fn default_for(schema: &Schema, ordinal_fixed_linear: bool) -> Self {
        let mut terms = vec![DesignTerm::Intercept];
        let dummies = |terms: &mut Vec<DesignTerm>, name: &str, k: u32| {
            terms.extend((2..=k).map(|l| DesignTerm::dummy(name, l)));
        };
        for v in schema.variables.iter().filter(|v| v.role == Role::Random) {
            if let Kind::Nominal { categories } = v.kind {
                dummies(&mut terms, &v.name, categories);
            }
        }
        for v in schema.variables.iter().filter(|v| v.role == Role::Fixed) {
            match v.kind {
                Kind::Ordinal { .. } if ordinal_fixed_linear => {
                    terms.push(DesignTerm::linear(&v.name))
                }
                Kind::Ordinal { levels } => dummies(&mut terms, &v.name, levels),
                Kind::Nominal { categories } => dummies(&mut terms, &v.name, categories),
                Kind::Continuous => terms.push(DesignTerm::linear(&v.name)),
            }
        }
        DesignConfig { terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn compile(&self, schema: &Schema) -> Result<CompiledDesign, DataError> {
        if self.terms.first() != Some(&DesignTerm::Intercept) {
            return Err(DataError::InvalidDesign(
                "the first design term must be the intercept".into(),
            ));
        }
        let terms = self
            .terms
            .iter()
            .enumerate()
            .map(|(t, term)| {
                if t > 0 && *term == DesignTerm::Intercept {
                    Err(DataError::InvalidDesign("repeated intercept".into()))
                } else {
                    compile_term(term, schema)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CompiledDesign {
            terms,
            labels: self.terms.iter().map(DesignTerm::label).collect(),
        })
    }
}

fn compile_term(term: &DesignTerm, schema: &Schema) -> Result<Term, DataError> {
    let resolve = |name: &str| -> Result<usize, DataError> {
        let j = schema
            .index_of(name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))?;
        let v = &schema.variables[j];
        let allowed = v.role == Role::Fixed || matches!(v.kind, Kind::Nominal { .. });
        if !allowed {
            return Err(DataError::InvalidDesign(format!(
                "`{name}` is a random ordinal/continuous response and cannot enter the design"
            )));
        }
        Ok(j)
    };
    Ok(match term {
        DesignTerm::Intercept => Term::Intercept,
        DesignTerm::Dummy { variable, level } => {
            let col = resolve(variable)?;
            let k = schema.variables[col].kind.level_count().ok_or_else(|| {
                DataError::InvalidDesign(format!("dummy on continuous `{variable}`"))
            })?;
            if *level < 1 || *level > k {
                return Err(DataError::InvalidDesign(format!(
                    "level {level} of `{variable}` outside 1..={k}"
                )));
            }
            Term::Dummy { col, level: *level }
        }
        DesignTerm::Linear { variable } => {
            let col = resolve(variable)?;
            if matches!(schema.variables[col].kind, Kind::Nominal { .. }) {
                return Err(DataError::InvalidDesign(format!(
                    "linear term on nominal `{variable}`"
                )));
            }
            Term::Linear { col }
        }
        DesignTerm::Interaction { left, right } => Term::Product(
            Box::new(compile_term(left, schema)?),
            Box::new(compile_term(right, schema)?),
        ),
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Term {
    Intercept,
    Dummy { col: usize, level: u32 },
    Linear { col: usize },
    Product(Box<Term>, Box<Term>),
}

impl Term {
    fn eval(&self, value: &dyn Fn(usize) -> Option<f64>) -> Result<f64, usize> {
        Ok(match self {
            Term::Intercept => 1.0,
            Term::Dummy { col, level } => {
                let v = value(*col).ok_or(*col)?;
                if v == *level as f64 {
                    1.0
                } else {
                    0.0
                }
            }
            Term::Linear { col } => value(*col).ok_or(*col)?,
            Term::Product(a, b) => a.eval(value)? * b.eval(value)?,
        })
    }

    fn references(&self, column: usize) -> bool {
        match self {
            Term::Intercept => false,
            Term::Dummy { col, .. } | Term::Linear { col } => *col == column,
            Term::Product(a, b) => a.references(column) || b.references(column),
        }
    }
}

/// A design configuration resolved against a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledDesign {
    terms: Vec<Term>,
    labels: Vec<String>,
}

impl CompiledDesign {
    /// Design length `k`.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// True if any term reads column `col`.
    pub fn references(&self, col: usize) -> bool {
        self.terms.iter().any(|t| t.references(col))
    }

    /// Evaluates the design vector into `out` given a column-value lookup
    /// (model scale). Fails with the first referenced column lacking a value.
    pub fn fill(
        &self,
        value: &dyn Fn(usize) -> Option<f64>,
        out: &mut [f64],
    ) -> Result<(), usize> {
        for (slot, term) in out.iter_mut().zip(&self.terms) {
            *slot = term.eval(value)?;
        }
        Ok(())
    }

    pub fn build(&self, row: &[Option<f64>], schema: &Schema) -> Result<Vec<f64>, DataError> {
        let mut out = vec![0.0; self.len()];
        self.fill(&|c| row.get(c).copied().flatten(), &mut out)
            .map_err(|c| DataError::UnresolvedMissing(schema.variables[c].name.clone()))?;
        Ok(out)
    }
}

/// Design vector of one observation: `row[j]` is the current model-scale
/// value of column `j` (observed or imputed), `None` if unresolved.
pub fn build_design_vector(
    row: &[Option<f64>],
    config: &DesignConfig,
    schema: &Schema,
) -> Result<Vec<f64>, DataError> {
    config.compile(schema)?.build(row, schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema3() -> Schema {
        Schema::new(vec![
            VariableSpec::ordinal("y", Role::Random, 3),
            VariableSpec::continuous("z", Role::Random),
            VariableSpec::nominal("x1", Role::Random, 3),
            VariableSpec::continuous("zf", Role::Fixed),
        ])
        .unwrap()
    }

    #[test]
    fn load_fully_observed_ordinal() {
        let schema = Schema::new(vec![VariableSpec::ordinal("y", Role::Random, 3)]).unwrap();
        let data = load_csv_from_reader("y\n1\n2\n3\n".as_bytes(), &schema).unwrap();
        assert_eq!(data.n_rows(), 3);
        assert_eq!(data.missing_count(0), 0);
        assert_eq!(data.level(2, 0), Some(3));
    }

    #[test]
    fn out_of_range_level_is_rejected() {
        let schema = Schema::new(vec![VariableSpec::ordinal("y", Role::Random, 3)]).unwrap();
        let err = load_csv_from_reader("y\n1\n5\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DataError::OutOfRangeLevel { row: 1, .. }));
    }

    #[test]
    fn continuous_standardized_with_n_minus_one() {
        let schema = Schema::new(vec![VariableSpec::continuous("z", Role::Random)]).unwrap();
        let data = load_csv_from_reader("z\n1\n2\n3\n".as_bytes(), &schema).unwrap();
        let s = data.standardization(0).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.sd, 1.0);
        let got: Vec<f64> = (0..3).map(|i| data.value(i, 0).unwrap()).collect();
        assert_eq!(got, vec![-1.0, 0.0, 1.0]);
        assert_eq!(data.raw_value(2, 0), Some(3.0));
    }

    #[test]
    fn missing_tokens_and_errors() {
        let schema = Schema::new(vec![
            VariableSpec::continuous("z", Role::Random),
            VariableSpec::nominal("f", Role::Fixed, 2),
        ])
        .unwrap();
        let data = load_csv_from_reader("z,f\n,1\nNA,2\n1.5,1\n".as_bytes(), &schema).unwrap();
        assert!(data.is_missing(0, 0) && data.is_missing(1, 0));
        assert!(!data.is_missing(2, 0));

        let err = load_csv_from_reader("z,f\n1,\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DataError::MissingFixedValue { .. }));
        let err = load_csv_from_reader("z,f\nabc,1\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DataError::NonNumericContinuous { .. }));
        let err = load_csv_from_reader("z,f,w\n1,1,2\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DataError::UnknownColumn(c) if c == "w"));
        let err = load_csv_from_reader("z\n1\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "f"));
        // "na" (lower case) is not a missing token.
        let err = load_csv_from_reader("z,f\nna,1\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DataError::NonNumericContinuous { .. }));
    }

    #[test]
    fn quoted_header_and_cells() {
        let schema = Schema::new(vec![VariableSpec::continuous("a b", Role::Random)]).unwrap();
        let data = load_csv_from_reader("\"a b\"\n\"4\"\n\"6\"\n".as_bytes(), &schema).unwrap();
        assert_eq!(data.raw_value(1, 0), Some(6.0));
    }

    #[test]
    fn design_intercept_only() {
        let schema = schema3();
        let v = build_design_vector(
            &[Some(1.0), Some(0.0), Some(2.0), Some(0.3)],
            &DesignConfig::intercept_only(),
            &schema,
        )
        .unwrap();
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn design_dummy_coding() {
        let schema = schema3();
        let cfg = DesignConfig {
            terms: vec![
                DesignTerm::Intercept,
                DesignTerm::dummy("x1", 2),
                DesignTerm::dummy("x1", 3),
            ],
        };
        let v = build_design_vector(&[None, None, Some(2.0), Some(0.0)], &cfg, &schema).unwrap();
        assert_eq!(v, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn design_interaction() {
        let schema = schema3();
        let cfg = DesignConfig {
            terms: vec![
                DesignTerm::Intercept,
                DesignTerm::linear("zf"),
                DesignTerm::interaction(DesignTerm::dummy("x1", 2), DesignTerm::linear("zf")),
            ],
        };
        let v = build_design_vector(&[None, None, Some(2.0), Some(0.5)], &cfg, &schema).unwrap();
        assert_eq!(v, vec![1.0, 0.5, 0.5]);
    }

    #[test]
    fn design_unresolved_missing() {
        let schema = schema3();
        let cfg = DesignConfig::default_for(&schema, false);
        let err = build_design_vector(&[None, None, None, Some(0.5)], &cfg, &schema).unwrap_err();
        assert!(matches!(err, DataError::UnresolvedMissing(c) if c == "x1"));
    }

    #[test]
    fn design_rejects_response_and_bad_intercept() {
        let schema = schema3();
        let cfg = DesignConfig {
            terms: vec![DesignTerm::Intercept, DesignTerm::linear("z")],
        };
        assert!(matches!(cfg.compile(&schema), Err(DataError::InvalidDesign(_))));
        let cfg = DesignConfig {
            terms: vec![DesignTerm::linear("zf")],
        };
        assert!(matches!(cfg.compile(&schema), Err(DataError::InvalidDesign(_))));
    }

    #[test]
    fn default_design_layout() {
        let schema = Schema::new(vec![
            VariableSpec::nominal("x", Role::Random, 3),
            VariableSpec::ordinal("a", Role::Fixed, 4),
            VariableSpec::nominal("b", Role::Fixed, 2),
            VariableSpec::continuous("c", Role::Fixed),
            VariableSpec::ordinal("y", Role::Random, 5),
        ])
        .unwrap();
        let cfg = DesignConfig::default_for(&schema, false);
        // 1 + 2 (x) + 3 (a) + 1 (b) + 1 (c)
        assert_eq!(cfg.len(), 8);
        let linear = DesignConfig::default_for(&schema, true);
        assert_eq!(linear.len(), 6);
        let layout = schema.layout();
        assert_eq!(layout.ordinal, vec![4]);
        assert_eq!(layout.nominal, vec![0]);
        assert_eq!(layout.fixed, vec![1, 2, 3]);
    }

    #[test]
    fn schema_sidecar_toml_and_json() {
        let toml_text = r#"
            [[variables]]
            name = "age"
            role = "fixed"
            kind = "ordinal"
            levels = 6

            [[variables]]
            name = "z"
            role = "random"
            kind = "continuous"
        "#;
        let s: Schema = toml::from_str(toml_text).unwrap();
        assert_eq!(s.variables[0].kind, Kind::Ordinal { levels: 6 });
        let json = serde_json::to_string(&s).unwrap();
        let back: Schema = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
