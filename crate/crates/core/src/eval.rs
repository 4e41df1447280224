//! Exact scans, sampling baselines, error metrics, workloads and reports.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AttributeKind, AttributeSchema, DatetimeField, EncodedDataset, RawTable};
use crate::geocell::{cover_polygon, Cell, GeoPoint, Polygon};
use crate::model::DensityModel;
use crate::query::{evaluate_many, AggregateFunction, AggregateSpec, Predicate, Query, QueryError};

/// Bytes per raw sample row in the state-size table: four 4-byte fields
/// (timestamp, lon, lat, fare), uncompressed.
pub const SAMPLE_ROW_BYTES: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A query's predicates compiled against raw columns.
#[derive(Debug, Clone)]
pub struct RowFilter {
    discrete: Vec<(usize, Vec<bool>)>,
    /// Geo attribute and half-open leaf index ranges.
    geo: Option<(usize, Vec<(u64, u64)>)>,
}

impl RowFilter {
    pub fn new(schema: &AttributeSchema, predicates: &[Predicate]) -> Result<Self, QueryError> {
        let mut discrete = Vec::new();
        let mut geo = None;
        let levels = schema.geo_levels();
        let find = |name: &str| -> Result<usize, QueryError> {
            let a = schema
                .index_of(name)
                .ok_or_else(|| QueryError::Invalid(format!("unknown attribute {name:?}")))?;
            if !schema.attributes[a].is_discrete() {
                return Err(QueryError::Unsupported(format!("{name} is not discrete")));
            }
            Ok(a)
        };
        let allowed = |a: usize, values: &[serde_json::Value]| -> Result<Vec<bool>, QueryError> {
            let spec = &schema.attributes[a];
            let mut mask = vec![false; spec.cardinality().expect("discrete")];
            for v in values {
                if let Some(k) = spec.category_of(v).map_err(|e| QueryError::Invalid(e.to_string()))? {
                    mask[k as usize] = true;
                }
            }
            Ok(mask)
        };
        let ranges = |cells: &[Cell]| -> Result<Vec<(u64, u64)>, QueryError> {
            cells
                .iter()
                .map(|c| {
                    if c.level() > levels {
                        return Err(QueryError::LevelTooDeep { level: c.level(), max: levels });
                    }
                    let shift = 2 * (levels - c.level()) as u32;
                    Ok((c.index() << shift, (c.index() + 1) << shift))
                })
                .collect()
        };
        for p in predicates {
            match p {
                Predicate::Equals { attribute, value } => {
                    let a = find(attribute)?;
                    discrete.push((a, allowed(a, std::slice::from_ref(value))?));
                }
                Predicate::InSet { attribute, values } => {
                    let a = find(attribute)?;
                    discrete.push((a, allowed(a, values)?));
                }
                Predicate::CellContains { cell } => {
                    geo = Some((schema.geo_index(), ranges(std::slice::from_ref(cell))?));
                }
                Predicate::InPolygon { ring, cover_level } => {
                    let pts: Vec<GeoPoint> = ring.iter().map(|&[lon, lat]| GeoPoint::new(lon, lat)).collect();
                    let poly = Polygon::new(&pts)?;
                    let cells = cover_polygon(&poly, *cover_level, &schema.domain)?;
                    geo = Some((schema.geo_index(), ranges(&cells)?));
                }
            }
        }
        Ok(Self { discrete, geo })
    }

    pub fn matches(&self, table: &RawTable, i: usize) -> bool {
        if let Some((a, ranges)) = &self.geo {
            let idx = table.geo_cells(*a)[i];
            if !ranges.iter().any(|&(lo, hi)| (lo..hi).contains(&idx)) {
                return false;
            }
        }
        self.discrete
            .iter()
            .all(|(a, mask)| mask[table.discrete(*a)[i] as usize])
    }
}

/// Nearest-rank percentile of ascending `sorted`, `p` in (0, 100].
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Aggregate over matching rows. `scale` multiplies COUNT and SUM
/// (1 / sampling rate). `None` when a value aggregate has no rows.
fn aggregate_values(spec: &AggregateSpec, count: usize, values: &mut [f64], scale: f64) -> Option<f64> {
    use AggregateFunction::*;
    let n = values.len() as f64;
    match spec.function {
        Count => Some(count as f64 * scale),
        Sum => Some(values.iter().sum::<f64>() * scale),
        _ if values.is_empty() => None,
        Mean => Some(values.iter().sum::<f64>() / n),
        Stddev => {
            let m = values.iter().sum::<f64>() / n;
            Some((values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
        }
        Percentile => {
            values.sort_by(f64::total_cmp);
            Some(nearest_rank(values, 100.0 * spec.p.unwrap_or(0.5)))
        }
        Min => values.iter().copied().reduce(f64::min),
        Max => values.iter().copied().reduce(f64::max),
    }
}

fn scan(schema: &AttributeSchema, table: &RawTable, query: &Query, scale: f64) -> Result<Option<f64>, QueryError> {
    let filter = RowFilter::new(schema, &query.predicates)?;
    let column = match &query.aggregate.attribute {
        Some(name) if query.aggregate.function != AggregateFunction::Count => {
            let a = schema
                .index_of(name)
                .ok_or_else(|| QueryError::Invalid(format!("unknown attribute {name:?}")))?;
            if !matches!(schema.attributes[a].kind, AttributeKind::Continuous { .. }) {
                return Err(QueryError::Invalid(format!("{name} is not continuous")));
            }
            Some(table.continuous(a))
        }
        None if query.aggregate.function != AggregateFunction::Count => {
            return Err(QueryError::Invalid("aggregate needs an attribute".into()))
        }
        _ => None,
    };
    let mut count = 0;
    let mut values = Vec::new();
    for i in 0..table.len() {
        if filter.matches(table, i) {
            count += 1;
            if let Some(col) = column {
                values.push(col[i]);
            }
        }
    }
    Ok(aggregate_values(&query.aggregate, count, &mut values, scale))
}

/// Exact answer by a sequential scan of the raw rows.
pub fn exact_scan(data: &EncodedDataset, query: &Query) -> Result<Option<f64>, QueryError> {
    scan(&data.schema, &data.table, query, 1.0)
}

/// Anything that answers a batch of queries. `None` marks "no estimate"
/// (for example an empty sample for a MEAN).
pub trait Estimator: Sync {
    fn name(&self) -> String;
    fn estimate_all(&self, queries: &[Query]) -> Vec<Option<f64>>;
    /// Bytes of state the estimator needs at query time.
    fn state_bytes(&self) -> usize;
}

pub struct ExactScan<'a>(pub &'a EncodedDataset);

impl Estimator for ExactScan<'_> {
    fn name(&self) -> String {
        "exact".into()
    }

    fn estimate_all(&self, queries: &[Query]) -> Vec<Option<f64>> {
        queries.par_iter().map(|q| exact_scan(self.0, q).ok().flatten()).collect()
    }

    fn state_bytes(&self) -> usize {
        self.0.n_total() * SAMPLE_ROW_BYTES
    }
}

/// Uniform sample without replacement.
pub struct SampleEstimator {
    pub rate: f64,
    pub seed: u64,
    schema: AttributeSchema,
    rows: RawTable,
}

impl SampleEstimator {
    /// Keeps `round(rate·N)` rows: the prefix of a seeded Fisher–Yates shuffle.
    pub fn new(data: &EncodedDataset, rate: f64, seed: u64) -> Result<Self, EvalError> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(EvalError::Config(format!("sampling rate {rate} outside (0, 1]")));
        }
        let n = data.n_total();
        let k = (rate * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (prefix, _) = idx.partial_shuffle(&mut rng, k);
        let mut chosen = prefix.to_vec();
        chosen.sort_unstable();
        Ok(Self {
            rate,
            seed,
            schema: data.schema.clone(),
            rows: data.table.select(&chosen),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn estimate(&self, query: &Query) -> Result<Option<f64>, QueryError> {
        scan(&self.schema, &self.rows, query, 1.0 / self.rate)
    }
}

impl Estimator for SampleEstimator {
    fn name(&self) -> String {
        format!("sample {}%", self.rate * 100.0)
    }

    fn estimate_all(&self, queries: &[Query]) -> Vec<Option<f64>> {
        queries.par_iter().map(|q| self.estimate(q).ok().flatten()).collect()
    }

    fn state_bytes(&self) -> usize {
        self.rows.len() * SAMPLE_ROW_BYTES
    }
}

pub struct ModelEstimator<'a> {
    pub model: &'a DensityModel,
    pub serialized_bytes: usize,
}

impl<'a> ModelEstimator<'a> {
    pub fn new(model: &'a DensityModel) -> Result<Self, EvalError> {
        let serialized_bytes = crate::model::io::serialized_size(model).map_err(QueryError::from)?;
        Ok(Self { model, serialized_bytes })
    }
}

impl Estimator for ModelEstimator<'_> {
    fn name(&self) -> String {
        "model".into()
    }

    fn estimate_all(&self, queries: &[Query]) -> Vec<Option<f64>> {
        // Moderate batches keep the shared pass tables small.
        queries
            .chunks(256)
            .flat_map(|chunk| evaluate_many(self.model, chunk))
            .map(|r| r.ok().map(|r| r.estimate))
            .collect()
    }

    fn state_bytes(&self) -> usize {
        self.serialized_bytes
    }
}

/// Factor between estimate and truth; both are clamped to at least one,
/// so an empty estimate counts as one row.
pub fn qerror(estimate: f64, truth: f64) -> f64 {
    assert!(truth >= 1.0, "q-error needs a true result of at least one, got {truth}");
    let e = if estimate.is_finite() { estimate.max(1.0) } else { 1.0 };
    e.max(truth) / e.min(truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Smape {
    pub value: f64,
    pub used: usize,
    /// Pairs where both members are zero.
    pub excluded: usize,
}

pub fn smape(pairs: &[(f64, f64)]) -> Smape {
    let mut sum = 0.0;
    let mut used = 0;
    for &(t, e) in pairs {
        if t == 0.0 && e == 0.0 {
            continue;
        }
        sum += (t - e).abs() / ((t.abs() + e.abs()) / 2.0);
        used += 1;
    }
    Smape {
        value: if used == 0 { 0.0 } else { sum / used as f64 },
        used,
        excluded: pairs.len() - used,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub min_level: u8,
    pub max_level: u8,
    /// Cell-only queries.
    pub geo_queries: usize,
    /// Cell plus one or two datetime equalities.
    pub predicate_queries: usize,
    /// Adds an equality on the `month` attribute to every query.
    pub month_predicate: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            min_level: 13,
            max_level: 16,
            geo_queries: 500,
            predicate_queries: 500,
            month_predicate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadEntry {
    pub query: Query,
    pub truth: f64,
    pub level: u8,
    /// Non-spatial predicate count.
    pub predicates: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Workload {
    pub entries: Vec<WorkloadEntry>,
}

impl Workload {
    pub fn queries(&self) -> Vec<Query> {
        self.entries.iter().map(|e| e.query.clone()).collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { entries })
    }
}

/// Builds a workload whose every query has a true result of at least one.
///
/// Each query starts from a uniformly drawn row: its leaf cell truncated to
/// a uniform level gives the cell, and its own datetime values give the
/// equality predicates, so the origin row always qualifies.
pub fn generate_workload(data: &EncodedDataset, config: &WorkloadConfig, seed: u64) -> Result<Workload, EvalError> {
    let schema = &data.schema;
    let n = data.n_total();
    if n == 0 {
        return Err(EvalError::Data("empty dataset".into()));
    }
    let levels = schema.geo_levels();
    if config.min_level == 0 || config.min_level > config.max_level || config.max_level > levels {
        return Err(EvalError::Config(format!(
            "workload levels {}..={} outside 1..={levels}",
            config.min_level, config.max_level
        )));
    }
    let datetime: Vec<(usize, DatetimeField)> = schema
        .attributes
        .iter()
        .enumerate()
        .filter_map(|(i, a)| match a.kind {
            AttributeKind::Datetime { field } if field != DatetimeField::Month => Some((i, field)),
            _ => None,
        })
        .collect();
    let month = schema.attributes.iter().enumerate().find_map(|(i, a)| match a.kind {
        AttributeKind::Datetime {
            field: DatetimeField::Month,
        } => Some(i),
        _ => None,
    });
    if config.month_predicate && month.is_none() {
        return Err(EvalError::Config("month predicate requested but the schema has no month".into()));
    }
    if config.predicate_queries > 0 && datetime.is_empty() {
        return Err(EvalError::Config("predicate queries need a datetime attribute".into()));
    }
    let mut pairs: Vec<Vec<usize>> = (0..datetime.len()).map(|i| vec![i]).collect();
    let singles = pairs.len();
    for i in 0..datetime.len() {
        for j in i + 1..datetime.len() {
            let both = [datetime[i].1, datetime[j].1];
            if !(both.contains(&DatetimeField::DayOfMonth) && both.contains(&DatetimeField::DayOfWeek)) {
                pairs.push(vec![i, j]);
            }
        }
    }
    let geo = schema.geo_index();
    let equals = |a: usize, row: usize| {
        let spec = &schema.attributes[a];
        let field = match spec.kind {
            AttributeKind::Datetime { field } => field,
            _ => unreachable!("datetime attribute"),
        };
        Predicate::Equals {
            attribute: spec.name.clone(),
            value: serde_json::json!(data.table.discrete(a)[row] as u32 + field.offset()),
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drafts = Vec::with_capacity(config.geo_queries + config.predicate_queries);
    for q in 0..config.geo_queries + config.predicate_queries {
        let level = rng.random_range(config.min_level..=config.max_level);
        let row = rng.random_range(0..n);
        let leaf = Cell::from_index(levels, data.table.geo_cells(geo)[row]).map_err(QueryError::from)?;
        let mut predicates = Vec::new();
        if q >= config.geo_queries {
            // One or two columns with equal probability.
            let chosen = if rng.random_bool(0.5) || pairs.len() == singles {
                &pairs[rng.random_range(0..singles)]
            } else {
                pairs[singles..].choose(&mut rng).expect("non-empty")
            };
            predicates.extend(chosen.iter().map(|&k| equals(datetime[k].0, row)));
        }
        if config.month_predicate {
            predicates.push(equals(month.expect("checked"), row));
        }
        let count = predicates.len();
        predicates.push(Predicate::CellContains {
            cell: leaf.truncate(level),
        });
        drafts.push((Query::count(predicates), level, count));
    }
    let entries = drafts
        .into_par_iter()
        .map(|(query, level, predicates)| {
            let truth = exact_scan(data, &query)?.unwrap_or(0.0);
            Ok(WorkloadEntry {
                query,
                truth,
                level,
                predicates,
            })
        })
        .collect::<Result<Vec<_>, QueryError>>()?;
    Ok(Workload { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: nearest_rank(&v, 50.0),
            p95: nearest_rank(&v, 95.0),
        })
    }
}

pub const BUCKET_ALL: &str = "all";
pub const BUCKET_SMALL: &str = "N<100";
pub const BUCKET_MEDIUM: &str = "100<=N<1000";
pub const BUCKET_LARGE: &str = "N>=1000";

pub fn size_bucket(truth: f64) -> &'static str {
    if truth < 100.0 {
        BUCKET_SMALL
    } else if truth < 1000.0 {
        BUCKET_MEDIUM
    } else {
        BUCKET_LARGE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRecord {
    pub index: usize,
    pub level: u8,
    pub predicates: usize,
    pub truth: f64,
    /// One per estimator, in report order.
    pub estimates: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketRow {
    pub estimator: String,
    pub bucket: String,
    pub qerror: Summary,
    pub smape: Smape,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateSize {
    pub estimator: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub estimators: Vec<String>,
    pub records: Vec<QueryRecord>,
    pub buckets: Vec<BucketRow>,
    pub state_sizes: Vec<StateSize>,
    /// Queries left out for a true result of zero.
    pub skipped_zero: usize,
}

/// Scores every estimator on the workload. Queries with a true result of
/// zero are skipped.
pub fn run_eval(estimators: &[&dyn Estimator], workload: &Workload) -> EvalReport {
    let kept: Vec<(usize, &WorkloadEntry)> = workload
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.truth >= 1.0)
        .collect();
    let queries: Vec<Query> = kept.iter().map(|(_, e)| e.query.clone()).collect();
    let answers: Vec<Vec<Option<f64>>> = estimators.iter().map(|e| e.estimate_all(&queries)).collect();
    let records: Vec<QueryRecord> = kept
        .iter()
        .enumerate()
        .map(|(k, (i, e))| QueryRecord {
            index: *i,
            level: e.level,
            predicates: e.predicates,
            truth: e.truth,
            estimates: answers.iter().map(|a| a[k]).collect(),
        })
        .collect();

    let mut levels: Vec<u8> = records.iter().map(|r| r.level).collect();
    levels.sort_unstable();
    levels.dedup();
    type Member = Box<dyn Fn(&QueryRecord) -> bool>;
    let mut buckets: Vec<(String, Member)> = vec![(BUCKET_ALL.into(), Box::new(|_| true))];
    for l in levels {
        buckets.push((format!("level {l}"), Box::new(move |r: &QueryRecord| r.level == l)));
    }
    for name in [BUCKET_SMALL, BUCKET_MEDIUM, BUCKET_LARGE] {
        buckets.push((name.into(), Box::new(move |r: &QueryRecord| size_bucket(r.truth) == name)));
    }

    let mut rows = Vec::new();
    for (k, est) in estimators.iter().enumerate() {
        for (name, member) in &buckets {
            let members: Vec<&QueryRecord> = records.iter().filter(|r| member(r)).collect();
            let q: Vec<f64> = members
                .iter()
                .map(|r| qerror(r.estimates[k].unwrap_or(0.0), r.truth))
                .collect();
            let pairs: Vec<(f64, f64)> = members
                .iter()
                .map(|r| (r.truth, r.estimates[k].unwrap_or(0.0)))
                .collect();
            if let Some(summary) = Summary::of(&q) {
                rows.push(BucketRow {
                    estimator: est.name(),
                    bucket: name.clone(),
                    qerror: summary,
                    smape: smape(&pairs),
                });
            }
        }
    }
    EvalReport {
        estimators: estimators.iter().map(|e| e.name()).collect(),
        records,
        buckets: rows,
        state_sizes: estimators
            .iter()
            .map(|e| StateSize {
                estimator: e.name(),
                bytes: e.state_bytes(),
            })
            .collect(),
        skipped_zero: workload.entries.len() - kept.len(),
    }
}

impl EvalReport {
    pub fn bucket(&self, estimator: &str, bucket: &str) -> Option<&BucketRow> {
        self.buckets
            .iter()
            .find(|b| b.estimator == estimator && b.bucket == bucket)
    }

    /// Writes `queries.csv`, `summary.csv`, `state_size.csv` and `report.txt`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("queries.csv"))?;
        let mut header = vec!["index".to_string(), "level".into(), "predicates".into(), "truth".into()];
        for e in &self.estimators {
            header.push(format!("estimate:{e}"));
            header.push(format!("qerror:{e}"));
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.index.to_string(),
                r.level.to_string(),
                r.predicates.to_string(),
                r.truth.to_string(),
            ];
            for e in &r.estimates {
                row.push(e.map(|v| v.to_string()).unwrap_or_default());
                row.push(qerror(e.unwrap_or(0.0), r.truth).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.write_record(["estimator", "bucket", "n", "qerror_mean", "qerror_p50", "qerror_p95", "smape"])?;
        for b in &self.buckets {
            w.write_record([
                b.estimator.clone(),
                b.bucket.clone(),
                b.qerror.n.to_string(),
                b.qerror.mean.to_string(),
                b.qerror.p50.to_string(),
                b.qerror.p95.to_string(),
                b.smape.value.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("state_size.csv"))?;
        w.write_record(["estimator", "bytes"])?;
        for s in &self.state_sizes {
            w.write_record([s.estimator.clone(), s.bytes.to_string()])?;
        }
        w.flush()?;
        std::fs::write(dir.join("report.txt"), self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:<14} {:>6} {:>10} {:>10} {:>10} {:>8}",
            "estimator", "bucket", "n", "mean", "50th", "95th", "sMAPE"
        );
        for b in &self.buckets {
            let _ = writeln!(
                out,
                "{:<14} {:<14} {:>6} {:>10.3} {:>10.3} {:>10.3} {:>8.3}",
                b.estimator, b.bucket, b.qerror.n, b.qerror.mean, b.qerror.p50, b.qerror.p95, b.smape.value
            );
        }
        let _ = writeln!(out, "\n{:<14} {:>12} {:>10}", "state", "bytes", "KiB");
        for s in &self.state_sizes {
            let _ = writeln!(out, "{:<14} {:>12} {:>10.1}", s.estimator, s.bytes, s.bytes as f64 / 1024.0);
        }
        if self.skipped_zero > 0 {
            let _ = writeln!(out, "\n{} queries with a true result of zero skipped", self.skipped_zero);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use serde_json::json;

    fn data() -> EncodedDataset {
        generate(&SynthConfig {
            rows: 5000,
            seed: 3,
            geo_levels: 10,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn qerror_examples() {
        assert_eq!(qerror(10.0, 10.0), 1.0);
        assert_eq!(qerror(5.0, 20.0), 4.0);
        assert_eq!(qerror(0.0, 7.0), 7.0);
        assert_eq!(qerror(0.3, 1.0), 1.0);
    }

    #[test]
    fn smape_examples() {
        assert_eq!(smape(&[(4.0, 4.0)]).value, 0.0);
        assert_eq!(smape(&[(100.0, 0.0)]).value, 2.0);
        assert!((smape(&[(100.0, 50.0)]).value - 50.0 / 75.0).abs() < 1e-15);
        let s = smape(&[(0.0, 0.0), (10.0, 10.0)]);
        assert_eq!((s.used, s.excluded), (1, 1));
    }

    #[test]
    fn nearest_rank_examples() {
        let v = [15.0, 20.0, 35.0, 40.0, 50.0];
        assert_eq!(nearest_rank(&v, 5.0), 15.0);
        assert_eq!(nearest_rank(&v, 30.0), 20.0);
        assert_eq!(nearest_rank(&v, 40.0), 20.0);
        assert_eq!(nearest_rank(&v, 50.0), 35.0);
        assert_eq!(nearest_rank(&v, 100.0), 50.0);
        let s = Summary::of(&[3.0]).unwrap();
        assert_eq!((s.mean, s.p50, s.p95), (3.0, 3.0, 3.0));
    }

    #[test]
    fn sample_sizes_and_scaling() {
        let d = data();
        let s = SampleEstimator::new(&d, 0.01, 1).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s.estimate(&Query::count(vec![])).unwrap(), Some(5000.0));
        let full = SampleEstimator::new(&d, 1.0, 1).unwrap();
        let q = Query {
            predicates: vec![Predicate::Equals {
                attribute: "hour".into(),
                value: json!(18),
            }],
            aggregate: AggregateSpec::of(AggregateFunction::Stddev, "total_fare"),
        };
        assert_eq!(full.estimate(&q).unwrap(), exact_scan(&d, &q).unwrap());
        assert!(SampleEstimator::new(&d, 0.0, 1).is_err());
        assert!(SampleEstimator::new(&d, 1.5, 1).is_err());
    }

    #[test]
    fn scan_aggregates() {
        let d = data();
        let fare = d.table.continuous(d.schema.index_of("total_fare").unwrap());
        let q = |spec| Query {
            predicates: vec![],
            aggregate: spec,
        };
        let sum = exact_scan(&d, &q(AggregateSpec::of(AggregateFunction::Sum, "total_fare"))).unwrap().unwrap();
        assert!((sum - fare.iter().sum::<f64>()).abs() < 1e-6);
        let max = exact_scan(&d, &q(AggregateSpec::of(AggregateFunction::Max, "total_fare"))).unwrap().unwrap();
        assert_eq!(max, fare.iter().copied().fold(f64::MIN, f64::max));
        let empty = Query {
            predicates: vec![Predicate::Equals {
                attribute: "day_of_month".into(),
                value: json!(1),
            }, Predicate::Equals {
                attribute: "day_of_week".into(),
                value: json!(1),
            }],
            aggregate: AggregateSpec::of(AggregateFunction::Mean, "total_fare"),
        };
        // 2016-01-01 was a Friday.
        assert_eq!(exact_scan(&d, &empty).unwrap(), None);
    }

    #[test]
    fn workload_rules() {
        let d = data();
        let cfg = WorkloadConfig {
            min_level: 4,
            max_level: 8,
            geo_queries: 100,
            predicate_queries: 300,
            month_predicate: false,
        };
        let w = generate_workload(&d, &cfg, 5).unwrap();
        assert_eq!(w, generate_workload(&d, &cfg, 5).unwrap());
        assert_eq!(w.entries.len(), 400);
        let mut two = 0;
        for e in &w.entries {
            assert!((4..=8).contains(&e.level) && e.truth >= 1.0);
            let names: Vec<&str> = e
                .query
                .predicates
                .iter()
                .filter_map(|p| match p {
                    Predicate::Equals { attribute, .. } => Some(attribute.as_str()),
                    _ => None,
                })
                .collect();
            assert!(!(names.contains(&"day_of_month") && names.contains(&"day_of_week")));
            assert_eq!(names.len(), e.predicates);
            two += (e.predicates == 2) as usize;
        }
        assert!((100..200).contains(&two), "{two}");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.jsonl");
        w.write_jsonl(&path).unwrap();
        assert_eq!(Workload::read_jsonl(&path).unwrap(), w);
        assert!(matches!(
            generate_workload(&d, &WorkloadConfig { month_predicate: true, ..cfg.clone() }, 1),
            Err(EvalError::Config(_))
        ));
        assert!(generate_workload(&d, &WorkloadConfig { max_level: 11, ..cfg }, 1).is_err());
    }

    #[test]
    fn exact_estimator_is_perfect() {
        let d = data();
        let cfg = WorkloadConfig {
            min_level: 3,
            max_level: 9,
            geo_queries: 60,
            predicate_queries: 60,
            month_predicate: false,
        };
        let w = generate_workload(&d, &cfg, 9).unwrap();
        let exact = ExactScan(&d);
        let full = SampleEstimator::new(&d, 1.0, 4).unwrap();
        let r = run_eval(&[&exact, &full], &w);
        for b in &r.buckets {
            assert_eq!((b.qerror.mean, b.qerror.p95, b.smape.value), (1.0, 1.0, 0.0), "{b:?}");
        }
        let all = r.bucket("exact", BUCKET_ALL).unwrap().qerror.n;
        let by_size: usize = [BUCKET_SMALL, BUCKET_MEDIUM, BUCKET_LARGE]
            .iter()
            .filter_map(|b| r.bucket("exact", b))
            .map(|b| b.qerror.n)
            .sum();
        let by_level: usize = r
            .buckets
            .iter()
            .filter(|b| b.estimator == "exact" && b.bucket.starts_with("level"))
            .map(|b| b.qerror.n)
            .sum();
        assert_eq!((all, by_size, by_level), (120, 120, 120));
        let dir = tempfile::tempdir().unwrap();
        r.write_dir(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(text.contains("50th") && text.contains("95th"));
    }
}
