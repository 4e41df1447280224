//! Attribute schema, CSV ingestion and row encoding.
//!
//! Rows are kept column-wise in a [`RawTable`] (the exact-scan oracle reads
//! it directly) and encoded into model input vectors on demand.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::geocell::{self, Cell, Domain, GeoPoint};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("cannot parse timestamp {0:?}")]
    Timestamp(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geo(#[from] geocell::GeoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatetimeField {
    DayOfMonth,
    DayOfWeek,
    Hour,
    Month,
}

impl DatetimeField {
    pub fn cardinality(self) -> usize {
        match self {
            DatetimeField::DayOfMonth => 31,
            DatetimeField::DayOfWeek => 7,
            DatetimeField::Hour => 24,
            DatetimeField::Month => 12,
        }
    }

    /// Smallest legal value; category index = value - offset.
    pub fn offset(self) -> u32 {
        match self {
            DatetimeField::Hour => 0,
            _ => 1,
        }
    }

    pub fn extract(self, parts: &DatetimeParts) -> u32 {
        match self {
            DatetimeField::DayOfMonth => parts.day_of_month,
            DatetimeField::DayOfWeek => parts.day_of_week,
            DatetimeField::Hour => parts.hour,
            DatetimeField::Month => parts.month,
        }
    }
}

/// Output head for a continuous attribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadKind {
    Gaussian { components: usize },
    Lognormal,
    Pareto { beta: f64 },
}

impl HeadKind {
    /// Whether the input neuron sees `ln(x)` rather than `x`.
    pub fn log_input(&self) -> bool {
        matches!(self, HeadKind::Lognormal | HeadKind::Pareto { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttributeKind {
    Categorical { categories: Vec<String> },
    Datetime { field: DatetimeField },
    Geo { max_level: u8 },
    Continuous { head: HeadKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttributeKind,
}

impl AttributeSpec {
    /// Number of categories for one-hot attributes (4 per geo level).
    pub fn cardinality(&self) -> Option<usize> {
        match &self.kind {
            AttributeKind::Categorical { categories } => Some(categories.len()),
            AttributeKind::Datetime { field } => Some(field.cardinality()),
            AttributeKind::Geo { .. } => Some(4),
            AttributeKind::Continuous { .. } => None,
        }
    }

    pub fn input_width(&self) -> usize {
        match &self.kind {
            AttributeKind::Categorical { categories } => categories.len(),
            AttributeKind::Datetime { field } => field.cardinality(),
            AttributeKind::Geo { max_level } => 4 * *max_level as usize,
            AttributeKind::Continuous { .. } => 1,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(
            self.kind,
            AttributeKind::Categorical { .. } | AttributeKind::Datetime { .. }
        )
    }

    /// Human-readable labels of a discrete attribute, in category order.
    pub fn labels(&self) -> Vec<String> {
        match &self.kind {
            AttributeKind::Categorical { categories } => categories.clone(),
            AttributeKind::Datetime { field } => (0..field.cardinality() as u32)
                .map(|i| (i + field.offset()).to_string())
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Category index of a query value. `Ok(None)` means a well-formed
    /// value that never occurs (unknown categorical label).
    pub fn category_of(&self, value: &serde_json::Value) -> Result<Option<u16>, DatasetError> {
        match &self.kind {
            AttributeKind::Categorical { categories } => {
                let label = match value {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Number(n) => n.to_string(),
                    serde_json::Value::Bool(b) => b.to_string(),
                    other => {
                        return Err(DatasetError::Config(format!(
                            "attribute {} expects a label, got {other}",
                            self.name
                        )))
                    }
                };
                Ok(categories.iter().position(|c| *c == label).map(|i| i as u16))
            }
            AttributeKind::Datetime { field } => {
                let v = match value {
                    serde_json::Value::Number(n) => n.as_u64(),
                    serde_json::Value::String(s) => s.trim().parse::<u64>().ok(),
                    _ => None,
                };
                let lo = field.offset() as u64;
                let hi = lo + field.cardinality() as u64;
                match v {
                    Some(v) if (lo..hi).contains(&v) => Ok(Some((v - lo) as u16)),
                    _ => Err(DatasetError::Config(format!(
                        "attribute {} expects an integer in {lo}..{hi}, got {value}",
                        self.name
                    ))),
                }
            }
            _ => Err(DatasetError::Config(format!(
                "attribute {} is not discrete",
                self.name
            ))),
        }
    }
}

/// Ordered attribute list plus the spatial domain. Attribute order is the
/// canonical block order used by the model and is serialized with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub domain: Domain,
    pub attributes: Vec<AttributeSpec>,
}

impl AttributeSchema {
    pub fn new(domain: Domain, attributes: Vec<AttributeSpec>) -> Result<Self, DatasetError> {
        let schema = Self { domain, attributes };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        self.domain.validate()?;
        let mut names = HashSet::new();
        let mut geo = 0;
        for a in &self.attributes {
            if !names.insert(a.name.as_str()) {
                return Err(DatasetError::Config(format!("duplicate attribute {}", a.name)));
            }
            match &a.kind {
                AttributeKind::Categorical { categories } => {
                    if categories.len() < 2 {
                        return Err(DatasetError::Config(format!(
                            "categorical {} needs at least 2 categories",
                            a.name
                        )));
                    }
                    let distinct: HashSet<_> = categories.iter().collect();
                    if distinct.len() != categories.len() {
                        return Err(DatasetError::Config(format!("duplicate category in {}", a.name)));
                    }
                    if categories.len() > u16::MAX as usize {
                        return Err(DatasetError::Config(format!("too many categories in {}", a.name)));
                    }
                }
                AttributeKind::Geo { max_level } => {
                    geo += 1;
                    if *max_level == 0 || *max_level > self.domain.max_level {
                        return Err(DatasetError::Config(format!(
                            "geo {} max_level {} outside 1..={}",
                            a.name, max_level, self.domain.max_level
                        )));
                    }
                }
                AttributeKind::Continuous { head } => match head {
                    HeadKind::Gaussian { components } if *components == 0 => {
                        return Err(DatasetError::Config(format!("{}: zero mixture components", a.name)))
                    }
                    HeadKind::Pareto { beta } if !(*beta > 0.0 && beta.is_finite()) => {
                        return Err(DatasetError::Config(format!("{}: pareto beta must be > 0", a.name)))
                    }
                    _ => {}
                },
                AttributeKind::Datetime { .. } => {}
            }
        }
        if geo != 1 {
            return Err(DatasetError::Config(format!(
                "schema needs exactly one geo attribute, found {geo}"
            )));
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn geo_index(&self) -> usize {
        self.attributes
            .iter()
            .position(|a| matches!(a.kind, AttributeKind::Geo { .. }))
            .expect("validated schema has a geo attribute")
    }

    pub fn geo_levels(&self) -> u8 {
        match self.attributes[self.geo_index()].kind {
            AttributeKind::Geo { max_level } => max_level,
            _ => unreachable!(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.attributes.iter().map(AttributeSpec::input_width).sum()
    }

    /// Offset of each attribute's block inside an encoded row.
    pub fn input_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.attributes
            .iter()
            .map(|a| {
                let o = acc;
                acc += a.input_width();
                o
            })
            .collect()
    }
}

/// Where each attribute's raw value lives in the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Single(String),
    LonLat { lon: String, lat: String },
}

/// The schema config file: schema plus CSV column mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub domain: Domain,
    pub attributes: Vec<AttributeSpec>,
    #[serde(default)]
    pub columns: BTreeMap<String, ColumnRef>,
}

impl SchemaConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn schema(&self) -> Result<AttributeSchema, DatasetError> {
        AttributeSchema::new(self.domain, self.attributes.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatetimeParts {
    pub day_of_month: u32,
    /// ISO numbering, Monday = 1 .. Sunday = 7.
    pub day_of_week: u32,
    pub hour: u32,
    pub month: u32,
}

pub fn derive_datetime(timestamp: &str) -> Result<DatetimeParts, DatasetError> {
    let ts = timestamp.trim();
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    let parsed = FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(ts, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(ts, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
        .ok_or_else(|| DatasetError::Timestamp(timestamp.to_string()))?;
    Ok(DatetimeParts {
        day_of_month: parsed.day(),
        day_of_week: parsed.weekday().number_from_monday(),
        hour: parsed.hour(),
        month: parsed.month(),
    })
}

/// Mean and standard deviation of a continuous input, after the optional
/// log transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousStats {
    pub mean: f64,
    pub std: f64,
    pub log: bool,
}

impl ContinuousStats {
    pub fn fit(values: &[f64], log: bool) -> Self {
        let n = values.len().max(1) as f64;
        let t = |v: f64| if log { v.ln() } else { v };
        let mean = values.iter().map(|&v| t(v)).sum::<f64>() / n;
        let var = values.iter().map(|&v| (t(v) - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 0.0 && std.is_finite() { std } else { 1.0 },
            log,
        }
    }

    pub fn standardize(&self, raw: f64) -> f64 {
        let v = if self.log { raw.ln() } else { raw };
        (v - self.mean) / self.std
    }

    /// Inverse of [`standardize`](Self::standardize) up to the log transform:
    /// returns the (maybe-log) value.
    pub fn unstandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    /// Category index per row.
    Discrete(Vec<u16>),
    /// Curve index at the schema's geo depth, plus the raw point.
    Geo { cells: Vec<u64>, points: Vec<GeoPoint> },
    Continuous(Vec<f64>),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Discrete(v) => v.len(),
            Column::Geo { cells, .. } => cells.len(),
            Column::Continuous(v) => v.len(),
        }
    }
}

/// One parsed value of a row, for row-level APIs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RawValue {
    Category(u16),
    Location(Cell),
    Number(f64),
}

/// Column-major storage of validated rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<Column>,
}

impl RawTable {
    pub fn new(columns: Vec<Column>) -> Result<Self, DatasetError> {
        let len = columns.first().map(Column::len).unwrap_or(0);
        if columns.iter().any(|c| c.len() != len) {
            return Err(DatasetError::Data("columns differ in length".into()));
        }
        Ok(Self { columns })
    }

    pub fn len(&self) -> usize {
        self.columns.first().map(Column::len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn discrete(&self, attr: usize) -> &[u16] {
        match &self.columns[attr] {
            Column::Discrete(v) => v,
            _ => panic!("attribute {attr} is not discrete"),
        }
    }

    pub fn geo_cells(&self, attr: usize) -> &[u64] {
        match &self.columns[attr] {
            Column::Geo { cells, .. } => cells,
            _ => panic!("attribute {attr} is not geo"),
        }
    }

    pub fn geo_points(&self, attr: usize) -> &[GeoPoint] {
        match &self.columns[attr] {
            Column::Geo { points, .. } => points,
            _ => panic!("attribute {attr} is not geo"),
        }
    }

    pub fn continuous(&self, attr: usize) -> &[f64] {
        match &self.columns[attr] {
            Column::Continuous(v) => v,
            _ => panic!("attribute {attr} is not continuous"),
        }
    }

    /// Row `i` as raw values, with the geo cell at `geo_level`.
    pub fn row(&self, i: usize, geo_level: u8) -> Vec<RawValue> {
        self.columns
            .iter()
            .map(|c| match c {
                Column::Discrete(v) => RawValue::Category(v[i]),
                Column::Geo { cells, .. } => {
                    RawValue::Location(Cell::from_index(geo_level, cells[i]).expect("stored at geo level"))
                }
                Column::Continuous(v) => RawValue::Number(v[i]),
            })
            .collect()
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> RawTable {
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                Column::Discrete(v) => Column::Discrete(indices.iter().map(|&i| v[i]).collect()),
                Column::Geo { cells, points } => Column::Geo {
                    cells: indices.iter().map(|&i| cells[i]).collect(),
                    points: indices.iter().map(|&i| points[i]).collect(),
                },
                Column::Continuous(v) => Column::Continuous(indices.iter().map(|&i| v[i]).collect()),
            })
            .collect();
        RawTable { columns }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub dropped: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl DropReport {
    fn record(&mut self, reason: impl Into<String>) {
        self.dropped += 1;
        *self.reasons.entry(reason.into()).or_default() += 1;
    }
}

/// Validated rows plus the per-attribute standardization statistics.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub schema: AttributeSchema,
    pub table: RawTable,
    /// `Some` for continuous attributes, indexed like the schema.
    pub stats: Vec<Option<ContinuousStats>>,
    pub dropped: DropReport,
}

impl EncodedDataset {
    /// Fits statistics on `table` (the training data).
    pub fn from_table(schema: AttributeSchema, table: RawTable) -> Result<Self, DatasetError> {
        if table.is_empty() {
            return Err(DatasetError::Data("no rows".into()));
        }
        if table.columns.len() != schema.attributes.len() {
            return Err(DatasetError::Data(format!(
                "{} columns for {} attributes",
                table.columns.len(),
                schema.attributes.len()
            )));
        }
        let stats = schema
            .attributes
            .iter()
            .zip(&table.columns)
            .map(|(a, c)| match (&a.kind, c) {
                (AttributeKind::Continuous { head }, Column::Continuous(v)) => {
                    Ok(Some(ContinuousStats::fit(v, head.log_input())))
                }
                (AttributeKind::Continuous { .. }, _) | (_, Column::Continuous(_)) => {
                    Err(DatasetError::Data(format!("column type mismatch for {}", a.name)))
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            schema,
            table,
            stats,
            dropped: DropReport::default(),
        })
    }

    pub fn n_total(&self) -> usize {
        self.table.len()
    }

    /// Encodes row `i` into `out` (length = schema input width).
    pub fn encode_into(&self, i: usize, out: &mut [f64]) {
        encode_columns(&self.schema, &self.stats, &self.table, i, out);
    }

    pub fn encode(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.schema.input_width()];
        self.encode_into(i, &mut v);
        v
    }
}

fn encode_columns(schema: &AttributeSchema, stats: &[Option<ContinuousStats>], table: &RawTable, i: usize, out: &mut [f64]) {
    out.fill(0.0);
    let mut off = 0;
    for (a, (spec, col)) in schema.attributes.iter().zip(&table.columns).enumerate() {
        match col {
            Column::Discrete(v) => out[off + v[i] as usize] = 1.0,
            Column::Geo { cells, .. } => {
                let levels = spec.input_width() / 4;
                let idx = cells[i];
                for l in 0..levels {
                    let digit = (idx >> (2 * (levels - 1 - l))) & 3;
                    out[off + 4 * l + digit as usize] = 1.0;
                }
            }
            Column::Continuous(v) => {
                out[off] = stats[a].expect("continuous stats").standardize(v[i]);
            }
        }
        off += spec.input_width();
    }
}

/// Encodes one row of raw values: one-hot per discrete attribute, one
/// one-hot(4) block per geo level (coarse to fine), standardized scalars.
pub fn encode_row(row: &[RawValue], schema: &AttributeSchema, stats: &[Option<ContinuousStats>]) -> Vec<f64> {
    let mut out = vec![0.0; schema.input_width()];
    let mut off = 0;
    for (a, (spec, value)) in schema.attributes.iter().zip(row).enumerate() {
        match *value {
            RawValue::Category(k) => out[off + k as usize] = 1.0,
            RawValue::Location(cell) => {
                let levels = (spec.input_width() / 4) as u8;
                let cell = cell.truncate(levels);
                for l in 1..=cell.level() {
                    out[off + 4 * (l as usize - 1) + cell.digit(l) as usize] = 1.0;
                }
            }
            RawValue::Number(x) => out[off] = stats[a].expect("continuous stats").standardize(x),
        }
        off += spec.input_width();
    }
    out
}

fn resolve_columns(
    schema: &AttributeSchema,
    columns: &BTreeMap<String, ColumnRef>,
    headers: &csv::StringRecord,
) -> Result<Vec<(usize, Option<usize>)>, DatasetError> {
    let lookup: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let find = |name: &str| {
        lookup
            .get(name)
            .copied()
            .ok_or_else(|| DatasetError::Config(format!("CSV has no column {name:?}")))
    };
    schema
        .attributes
        .iter()
        .map(|a| {
            let default = ColumnRef::Single(a.name.clone());
            match (&a.kind, columns.get(&a.name).unwrap_or(&default)) {
                (AttributeKind::Geo { .. }, ColumnRef::LonLat { lon, lat }) => Ok((find(lon)?, Some(find(lat)?))),
                (AttributeKind::Geo { .. }, ColumnRef::Single(_)) => Err(DatasetError::Config(format!(
                    "geo attribute {} needs {{\"lon\": .., \"lat\": ..}} columns",
                    a.name
                ))),
                (_, ColumnRef::Single(c)) => Ok((find(c)?, None)),
                (_, ColumnRef::LonLat { .. }) => Err(DatasetError::Config(format!(
                    "attribute {} maps to a single column",
                    a.name
                ))),
            }
        })
        .collect()
}

/// Reads an RFC-4180 CSV with a header row. Rows that fail to parse or lie
/// outside the domain are dropped and counted.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &AttributeSchema,
    columns: &BTreeMap<String, ColumnRef>,
) -> Result<EncodedDataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let positions = resolve_columns(schema, columns, &headers)?;
    let geo_level = schema.geo_levels();
    let category_maps: Vec<HashMap<&str, u16>> = schema
        .attributes
        .iter()
        .map(|a| match &a.kind {
            AttributeKind::Categorical { categories } => categories
                .iter()
                .enumerate()
                .map(|(i, c)| (c.as_str(), i as u16))
                .collect(),
            _ => HashMap::new(),
        })
        .collect();

    let mut cols: Vec<Column> = schema
        .attributes
        .iter()
        .map(|a| match a.kind {
            AttributeKind::Categorical { .. } | AttributeKind::Datetime { .. } => Column::Discrete(Vec::new()),
            AttributeKind::Geo { .. } => Column::Geo {
                cells: Vec::new(),
                points: Vec::new(),
            },
            AttributeKind::Continuous { .. } => Column::Continuous(Vec::new()),
        })
        .collect();
    let mut report = DropReport::default();
    let mut record = csv::StringRecord::new();
    let mut values = Vec::with_capacity(schema.attributes.len());
    let mut datetime_cache: HashMap<usize, DatetimeParts> = HashMap::new();

    'rows: while reader.read_record(&mut record)? {
        values.clear();
        datetime_cache.clear();
        let mut row_point = None;
        for (a, spec) in schema.attributes.iter().enumerate() {
            let (ci, lat_ci) = positions[a];
            let field = record.get(ci).unwrap_or("").trim();
            let value = match &spec.kind {
                AttributeKind::Categorical { .. } => match category_maps[a].get(field) {
                    Some(&k) => RawValue::Category(k),
                    None => {
                        report.record(format!("{}: unknown category", spec.name));
                        continue 'rows;
                    }
                },
                AttributeKind::Datetime { field: f } => {
                    let parts = match datetime_cache.get(&ci) {
                        Some(p) => *p,
                        None => match derive_datetime(field) {
                            Ok(p) => {
                                datetime_cache.insert(ci, p);
                                p
                            }
                            Err(_) => {
                                report.record(format!("{}: bad timestamp", spec.name));
                                continue 'rows;
                            }
                        },
                    };
                    RawValue::Category((f.extract(&parts) - f.offset()) as u16)
                }
                AttributeKind::Geo { .. } => {
                    let lat_field = record.get(lat_ci.expect("geo has lat")).unwrap_or("").trim();
                    let point = match (field.parse::<f64>(), lat_field.parse::<f64>()) {
                        (Ok(lon), Ok(lat)) => GeoPoint::new(lon, lat),
                        _ => {
                            report.record(format!("{}: bad coordinate", spec.name));
                            continue 'rows;
                        }
                    };
                    match geocell::encode(point, geo_level, &schema.domain) {
                        Ok(cell) => {
                            row_point = Some(point);
                            RawValue::Location(cell)
                        }
                        Err(_) => {
                            report.record(format!("{}: outside domain", spec.name));
                            continue 'rows;
                        }
                    }
                }
                AttributeKind::Continuous { head } => {
                    let x = match field.parse::<f64>() {
                        Ok(x) if x.is_finite() => x,
                        _ => {
                            report.record(format!("{}: bad number", spec.name));
                            continue 'rows;
                        }
                    };
                    let ok = match head {
                        HeadKind::Gaussian { .. } => true,
                        HeadKind::Lognormal => x > 0.0,
                        HeadKind::Pareto { beta } => x >= *beta,
                    };
                    if !ok {
                        report.record(format!("{}: outside head support", spec.name));
                        continue 'rows;
                    }
                    RawValue::Number(x)
                }
            };
            values.push(value);
        }
        for (col, value) in cols.iter_mut().zip(&values) {
            match (col, *value) {
                (Column::Discrete(v), RawValue::Category(k)) => v.push(k),
                (Column::Geo { cells, points }, RawValue::Location(c)) => {
                    cells.push(c.index());
                    points.push(row_point.expect("geo value parsed with its point"));
                }
                (Column::Continuous(v), RawValue::Number(x)) => v.push(x),
                _ => unreachable!("column kinds follow the schema"),
            }
        }
    }
    let committed = cols.first().map(Column::len).unwrap_or(0);
    if committed == 0 {
        return Err(DatasetError::Data(format!(
            "no usable rows ({} dropped)",
            report.dropped
        )));
    }
    let table = RawTable::new(cols)?;
    let mut ds = EncodedDataset::from_table(schema.clone(), table)?;
    ds.dropped = report;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn schema(levels: u8) -> AttributeSchema {
        AttributeSchema::new(
            Domain::new(0.0, 0.0, 4.0, 4.0, levels).unwrap(),
            vec![
                AttributeSpec {
                    name: "hour".into(),
                    kind: AttributeKind::Datetime {
                        field: DatetimeField::Hour,
                    },
                },
                AttributeSpec {
                    name: "dow".into(),
                    kind: AttributeKind::Datetime {
                        field: DatetimeField::DayOfWeek,
                    },
                },
                AttributeSpec {
                    name: "vendor".into(),
                    kind: AttributeKind::Categorical {
                        categories: vec!["a".into(), "b".into()],
                    },
                },
                AttributeSpec {
                    name: "loc".into(),
                    kind: AttributeKind::Geo { max_level: levels },
                },
                AttributeSpec {
                    name: "fare".into(),
                    kind: AttributeKind::Continuous {
                        head: HeadKind::Lognormal,
                    },
                },
            ],
        )
        .unwrap()
    }

    fn columns() -> BTreeMap<String, ColumnRef> {
        let mut m = BTreeMap::new();
        m.insert("hour".into(), ColumnRef::Single("ts".into()));
        m.insert("dow".into(), ColumnRef::Single("ts".into()));
        m.insert(
            "loc".into(),
            ColumnRef::LonLat {
                lon: "x".into(),
                lat: "y".into(),
            },
        );
        m
    }

    #[test]
    fn datetime_parts() {
        // Calendar oracle: Python datetime(2016, 1, 15).isoweekday() == 5.
        let p = derive_datetime("2016-01-15T13:45:00").unwrap();
        assert_eq!((p.day_of_month, p.day_of_week, p.hour, p.month), (15, 5, 13, 1));
        let p = derive_datetime("2016-01-01").unwrap();
        assert_eq!((p.day_of_month, p.day_of_week, p.hour, p.month), (1, 5, 0, 1));
        let p = derive_datetime("2016-02-29 23:59:59.5").unwrap();
        assert_eq!((p.day_of_month, p.day_of_week, p.hour, p.month), (29, 1, 23, 2));
        assert!(derive_datetime("2015-02-29T00:00:00").is_err());
        assert!(derive_datetime("noon").is_err());
    }

    #[test]
    fn category_values() {
        let s = schema(2);
        let hour = &s.attributes[0];
        assert_eq!(hour.category_of(&json!(0)).unwrap(), Some(0));
        assert_eq!(hour.category_of(&json!("23")).unwrap(), Some(23));
        assert!(hour.category_of(&json!(24)).is_err());
        let dow = &s.attributes[1];
        assert_eq!(dow.category_of(&json!(1)).unwrap(), Some(0));
        assert!(dow.category_of(&json!(0)).is_err());
        let vendor = &s.attributes[2];
        assert_eq!(vendor.category_of(&json!("b")).unwrap(), Some(1));
        assert_eq!(vendor.category_of(&json!("z")).unwrap(), None);
        assert_eq!(hour.labels().len(), 24);
        assert_eq!(dow.labels()[0], "1");
    }

    #[test]
    fn encoding_layout() {
        let s = schema(2);
        assert_eq!(s.input_width(), 24 + 7 + 2 + 8 + 1);
        assert_eq!(s.input_offsets(), vec![0, 24, 31, 33, 41]);
        let stats = vec![None, None, None, None, Some(ContinuousStats { mean: 1.0, std: 2.0, log: true })];
        let cell = geocell::encode(GeoPoint::new(0.0, 0.0), 2, &s.domain).unwrap();
        let row = [
            RawValue::Category(0),
            RawValue::Category(6),
            RawValue::Category(1),
            RawValue::Location(cell),
            RawValue::Number(1f64.exp()),
        ];
        let v = encode_row(&row, &s, &stats);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[24 + 6], 1.0);
        assert_eq!(v[32], 1.0);
        // Corner (0, 0) is digit 0 at both levels.
        assert_eq!((v[33], v[37]), (1.0, 1.0));
        assert_eq!(v[41], 0.0);
        for (off, w) in [(0, 24), (24, 7), (31, 2), (33, 4), (37, 4)] {
            assert_eq!(v[off..off + w].iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn stats_roundtrip() {
        let st = ContinuousStats::fit(&[1.0, 2.0, 4.0, 8.0], true);
        for x in [0.5, 3.0, 100.0] {
            assert!((st.unstandardize(st.standardize(x)) - f64::ln(x)).abs() < 1e-12);
        }
        let flat = ContinuousStats::fit(&[3.0, 3.0], false);
        assert_eq!((flat.std, flat.standardize(3.0)), (1.0, 0.0));
    }

    #[test]
    fn csv_rows_are_validated_and_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(
            &path,
            "ts,vendor,x,y,fare\n\
             2016-01-15T13:45:00,a,1.0,1.0,7.5\n\
             2016-01-16T01:00:00,b,3.5,0.5,12\n\
             bad,a,1.0,1.0,7.5\n\
             2016-01-15T13:45:00,c,1.0,1.0,7.5\n\
             2016-01-15T13:45:00,a,9.0,1.0,7.5\n\
             2016-01-15T13:45:00,a,1.0,1.0,-2\n\
             2016-01-15T13:45:00,a,1.0,1.0,NaN\n",
        )
        .unwrap();
        let s = schema(3);
        let ds = load_csv(&path, &s, &columns()).unwrap();
        assert_eq!(ds.n_total(), 2);
        assert_eq!(ds.dropped.dropped, 5);
        assert_eq!(ds.table.discrete(0), &[13, 1]);
        assert_eq!(ds.table.discrete(1), &[4, 5]);
        assert_eq!(ds.table.discrete(2), &[0, 1]);
        assert_eq!(ds.dropped.reasons["loc: outside domain"], 1);
        assert_eq!(ds.dropped.reasons["fare: outside head support"], 1);
        let st = ds.stats[4].unwrap();
        assert!(st.log && (st.mean - (7.5f64.ln() + 12f64.ln()) / 2.0).abs() < 1e-12);

        let mut missing = columns();
        missing.insert("fare".into(), ColumnRef::Single("price".into()));
        assert!(matches!(load_csv(&path, &s, &missing), Err(DatasetError::Config(_))));
        std::fs::write(&path, "ts,vendor,x,y,fare\nbad,a,1,1,1\n").unwrap();
        assert!(matches!(load_csv(&path, &s, &columns()), Err(DatasetError::Data(_))));
    }

    #[test]
    fn schema_validation() {
        let mut attrs = schema(2).attributes;
        attrs.push(attrs[0].clone());
        assert!(AttributeSchema::new(Domain::new(0.0, 0.0, 1.0, 1.0, 2).unwrap(), attrs).is_err());
    }
}
