//! Conjunctive queries answered from the density model.
//!
//! A query's selectivity is a product of conditionals read from head
//! outputs. The conditioning order is fixed: `equals` predicates in schema
//! order, then the geo digits coarse to fine, then values of multi-valued
//! `in_set` predicates in query order (a one-value set acts as `equals`).
//! Each factor is read from a pass whose conditioning set holds exactly the
//! factors before it; the geo digits come from a single pass through the
//! chained geo heads. Disjunctive predicates (polygon covers, value sets)
//! expand into conjunctive sub-queries whose results are combined per
//! aggregate.
//!
//! Passes are planned for a whole set of queries at once: identical
//! (ordering, input) pairs run once, and passes sharing an ordering run as
//! one batch.

use std::collections::HashMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AttributeKind, HeadKind};
use crate::geocell::{cell_bounds, cover_polygon, cover_rect, Cell, GeoError, GeoPoint, Polygon, Rect};
use crate::model::{DensityModel, HeadParams, ModelError, OrderingSample};
use crate::nn::{log_sum_exp, std_normal_quantile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    Equals {
        attribute: String,
        value: serde_json::Value,
    },
    CellContains {
        cell: Cell,
    },
    InPolygon {
        /// `[lon, lat]` vertices; closing the ring is optional.
        ring: Vec<[f64; 2]>,
        cover_level: u8,
    },
    InSet {
        attribute: String,
        values: Vec<serde_json::Value>,
    },
}

impl Predicate {
    pub fn is_spatial(&self) -> bool {
        matches!(self, Predicate::CellContains { .. } | Predicate::InPolygon { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AggregateFunction {
    Count,
    Mean,
    Stddev,
    Percentile,
    Sum,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateSpec {
    pub function: AggregateFunction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

impl AggregateSpec {
    pub fn count() -> Self {
        Self {
            function: AggregateFunction::Count,
            attribute: None,
            p: None,
        }
    }

    pub fn of(function: AggregateFunction, attribute: &str) -> Self {
        Self {
            function,
            attribute: Some(attribute.to_string()),
            p: None,
        }
    }

    pub fn percentile(attribute: &str, p: f64) -> Self {
        Self {
            function: AggregateFunction::Percentile,
            attribute: Some(attribute.to_string()),
            p: Some(p),
        }
    }
}

impl Default for AggregateSpec {
    fn default() -> Self {
        Self::count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    #[serde(default)]
    pub predicates: Vec<Predicate>,
    #[serde(default)]
    pub aggregate: AggregateSpec,
}

impl Query {
    pub fn count(predicates: Vec<Predicate>) -> Self {
        Self {
            predicates,
            aggregate: AggregateSpec::count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQueryResult {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell: Option<Cell>,
    pub selectivity: f64,
    pub count: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub estimate: f64,
    pub selectivity: f64,
    pub log_selectivity: f64,
    /// Estimated number of qualifying rows.
    pub count: f64,
    /// Per sub-query breakdown when the query expanded into several.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subqueries: Vec<SubQueryResult>,
}

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error("invalid query: {0}")]
    Invalid(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("cell level {level} deeper than the model's {max}")]
    LevelTooDeep { level: u8, max: u8 },
    #[error("empty result: {0}")]
    EmptyResult(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<GeoError> for QueryError {
    fn from(e: GeoError) -> Self {
        QueryError::Invalid(e.to_string())
    }
}

/// Conditional distribution of a continuous attribute in raw units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conditional {
    Normal { mu: f64, sigma: f64 },
    /// `ln X ~ N(mu, sigma²)`.
    LogNormal { mu: f64, sigma: f64 },
}

impl Conditional {
    pub fn mean(&self) -> f64 {
        match *self {
            Conditional::Normal { mu, .. } => mu,
            Conditional::LogNormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
        }
    }

    pub fn stddev(&self) -> f64 {
        match *self {
            Conditional::Normal { sigma, .. } => sigma,
            Conditional::LogNormal { mu, sigma } => {
                let s2 = sigma * sigma;
                (s2.exp_m1() * (2.0 * mu + s2).exp()).sqrt()
            }
        }
    }

    pub fn quantile(&self, p: f64) -> Result<f64, QueryError> {
        let z = std_normal_quantile(p).map_err(|e| QueryError::Invalid(e.to_string()))?;
        Ok(match *self {
            Conditional::Normal { mu, sigma } => mu + sigma * z,
            Conditional::LogNormal { mu, sigma } => (mu + sigma * z).exp(),
        })
    }

    /// Expected `r`-th smallest of `n` draws (Blom's approximation).
    pub fn order_statistic(&self, r: f64, n: f64) -> Result<f64, QueryError> {
        let pi = std::f64::consts::PI;
        self.quantile((r - pi / 8.0) / (n - pi / 4.0 + 1.0))
    }
}

/// Maps a continuous head to raw units using the attribute's statistics.
pub fn conditional(model: &DensityModel, attr: usize, head: &HeadParams) -> Result<Conditional, QueryError> {
    let spec = &model.schema.attributes[attr];
    let stats = model
        .stats_of(attr)
        .ok_or_else(|| QueryError::Invalid(format!("{} is not continuous", spec.name)))?;
    match (head, &spec.kind) {
        (
            HeadParams::GaussianMixture { means, log_sigmas, .. },
            AttributeKind::Continuous {
                head: HeadKind::Gaussian { components: 1 } | HeadKind::Lognormal,
            },
        ) => {
            let mu = means[0] * stats.std + stats.mean;
            let sigma = log_sigmas[0].exp() * stats.std;
            Ok(if stats.log {
                Conditional::LogNormal { mu, sigma }
            } else {
                Conditional::Normal { mu, sigma }
            })
        }
        _ => Err(QueryError::Unsupported(format!(
            "aggregates over {} need a single-Gaussian or lognormal head",
            spec.name
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Factor {
    /// `None` for a value that never occurs in the data.
    Attr { attr: usize, category: Option<u16> },
    Geo(Cell),
}

#[derive(Debug, Clone)]
struct Conjunction {
    factors: Vec<Factor>,
    cell: Option<Cell>,
}

/// A query validated against the model and expanded into conjunctions.
#[derive(Debug, Clone)]
struct Plan {
    conjunctions: Vec<Conjunction>,
    target: Option<usize>,
    spec: AggregateSpec,
}

fn attribute_index(model: &DensityModel, name: &str) -> Result<usize, QueryError> {
    model
        .schema
        .index_of(name)
        .ok_or_else(|| QueryError::Invalid(format!("unknown attribute {name:?}")))
}

fn discrete_index(model: &DensityModel, name: &str) -> Result<usize, QueryError> {
    let a = attribute_index(model, name)?;
    if !model.schema.attributes[a].is_discrete() {
        return Err(QueryError::Unsupported(format!(
            "{name} is not categorical or datetime; only discrete attributes take equality and set predicates"
        )));
    }
    Ok(a)
}

fn category(model: &DensityModel, attr: usize, value: &serde_json::Value) -> Result<Option<u16>, QueryError> {
    model.schema.attributes[attr]
        .category_of(value)
        .map_err(|e| QueryError::Invalid(e.to_string()))
}

fn validate_spec(model: &DensityModel, spec: &AggregateSpec) -> Result<Option<usize>, QueryError> {
    if spec.function == AggregateFunction::Count {
        return Ok(None);
    }
    let name = spec
        .attribute
        .as_deref()
        .ok_or_else(|| QueryError::Invalid(format!("{:?} needs an attribute", spec.function)))?;
    let a = attribute_index(model, name)?;
    let kind = &model.schema.attributes[a].kind;
    match kind {
        AttributeKind::Continuous {
            head: HeadKind::Gaussian { components: 1 } | HeadKind::Lognormal,
        } => {}
        AttributeKind::Continuous { head } => {
            return Err(QueryError::Unsupported(format!(
                "{name} uses a {head:?} head; only COUNT is supported for it"
            )))
        }
        _ => return Err(QueryError::Invalid(format!("{name} is not continuous"))),
    }
    if spec.function == AggregateFunction::Percentile {
        match spec.p {
            Some(p) if p > 0.0 && p < 1.0 => {}
            other => return Err(QueryError::Invalid(format!("PERCENTILE needs p in (0, 1), got {other:?}"))),
        }
    }
    Ok(Some(a))
}

fn plan(model: &DensityModel, query: &Query) -> Result<Plan, QueryError> {
    let target = validate_spec(model, &query.aggregate)?;
    let geo_levels = model.indexing.geo_levels();
    let mut used = vec![false; model.schema.attributes.len()];
    let mut mark = |a: usize, name: &str| {
        if std::mem::replace(&mut used[a], true) {
            Err(QueryError::Invalid(format!("more than one predicate on {name}")))
        } else {
            Ok(())
        }
    };
    let mut equals: Vec<(usize, Option<u16>)> = Vec::new();
    let mut sets: Vec<(usize, Vec<Option<u16>>)> = Vec::new();
    let mut cells: Option<Vec<Cell>> = None;
    for p in &query.predicates {
        if p.is_spatial() && cells.is_some() {
            return Err(QueryError::Invalid("at most one spatial predicate per query".into()));
        }
        match p {
            Predicate::Equals { attribute, value } => {
                let a = discrete_index(model, attribute)?;
                mark(a, attribute)?;
                equals.push((a, category(model, a, value)?));
            }
            Predicate::InSet { attribute, values } => {
                let a = discrete_index(model, attribute)?;
                mark(a, attribute)?;
                if values.is_empty() {
                    return Err(QueryError::Invalid(format!("empty value set for {attribute}")));
                }
                let mut cats: Vec<Option<u16>> = Vec::with_capacity(values.len());
                for v in values {
                    let c = category(model, a, v)?;
                    if c.is_some() && cats.contains(&c) {
                        continue;
                    }
                    cats.push(c);
                }
                // Unknown labels contribute nothing; keep one so the set is never empty.
                if cats.iter().any(Option::is_some) {
                    cats.retain(Option::is_some);
                } else {
                    cats.truncate(1);
                }
                if cats.len() == 1 {
                    equals.push((a, cats[0]));
                } else {
                    sets.push((a, cats));
                }
            }
            Predicate::CellContains { cell } => {
                if cell.level() > geo_levels {
                    return Err(QueryError::LevelTooDeep {
                        level: cell.level(),
                        max: geo_levels,
                    });
                }
                cells = Some(vec![*cell]);
            }
            Predicate::InPolygon { ring, cover_level } => {
                if *cover_level > geo_levels {
                    return Err(QueryError::LevelTooDeep {
                        level: *cover_level,
                        max: geo_levels,
                    });
                }
                let pts: Vec<GeoPoint> = ring.iter().map(|&[lon, lat]| GeoPoint::new(lon, lat)).collect();
                let polygon = Polygon::new(&pts)?;
                let cover = cover_polygon(&polygon, *cover_level, &model.schema.domain)?;
                if cover.is_empty() {
                    return Err(QueryError::Invalid("polygon does not intersect the domain".into()));
                }
                cells = Some(cover);
            }
        }
    }
    equals.sort_by_key(|&(a, _)| a);

    let mut prefixes: Vec<Vec<Factor>> = vec![Vec::new()];
    for (a, cats) in &sets {
        let mut next = Vec::with_capacity(prefixes.len() * cats.len());
        for prefix in &prefixes {
            for &c in cats {
                let mut f = prefix.clone();
                f.push(Factor::Attr {
                    attr: *a,
                    category: c,
                });
                next.push(f);
            }
        }
        prefixes = next;
    }
    let base: Vec<Factor> = equals
        .iter()
        .map(|&(attr, category)| Factor::Attr { attr, category })
        .collect();
    let cell_list: Vec<Option<Cell>> = match cells {
        Some(c) => c.into_iter().map(Some).collect(),
        None => vec![None],
    };
    let mut conjunctions = Vec::with_capacity(cell_list.len() * prefixes.len());
    for cell in &cell_list {
        for tail in &prefixes {
            let mut factors = base.clone();
            if let Some(c) = cell.filter(|c| c.level() > 0) {
                factors.push(Factor::Geo(c));
            }
            factors.extend_from_slice(tail);
            conjunctions.push(Conjunction { factors, cell: *cell });
        }
    }
    Ok(Plan {
        conjunctions,
        target,
        spec: query.aggregate.clone(),
    })
}

#[derive(Debug, Clone, Copy)]
struct PassRef {
    group: usize,
    row: usize,
}

/// Encoded input rows of one ordering, with a lookup by row bits.
type PassGroup = (OrderingSample, Vec<Vec<f64>>, HashMap<Vec<u64>, usize>);

/// Collects forward passes, deduplicated per ordering.
struct Planner<'m> {
    model: &'m DensityModel,
    groups: Vec<PassGroup>,
    index: HashMap<OrderingSample, usize>,
}

impl<'m> Planner<'m> {
    fn new(model: &'m DensityModel) -> Self {
        Self {
            model,
            groups: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn request(&mut self, ordering: OrderingSample, row: &[f64]) -> PassRef {
        let group = match self.index.get(&ordering) {
            Some(&g) => g,
            None => {
                self.groups.push((ordering.clone(), Vec::new(), HashMap::new()));
                self.index.insert(ordering, self.groups.len() - 1);
                self.groups.len() - 1
            }
        };
        let (_, rows, seen) = &mut self.groups[group];
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let row = *seen.entry(key).or_insert_with(|| {
            rows.push(row.to_vec());
            rows.len() - 1
        });
        PassRef { group, row }
    }

    fn run(self) -> Result<Outputs, ModelError> {
        const CHUNK: usize = 4096;
        let model = self.model;
        let width = model.indexing.input_width;
        let outputs = self
            .groups
            .par_iter()
            .map(|(ordering, rows, _)| {
                let mut out = Array2::zeros((rows.len(), model.indexing.output_width));
                for (c, chunk) in rows.chunks(CHUNK).enumerate() {
                    let mut enc = Array2::zeros((chunk.len(), width));
                    for (r, row) in chunk.iter().enumerate() {
                        enc.row_mut(r).assign(&ndarray::ArrayView1::from(row.as_slice()));
                    }
                    let cache = model.forward_batch(enc.view(), ordering)?;
                    out.slice_mut(ndarray::s![c * CHUNK..c * CHUNK + chunk.len(), ..])
                        .assign(cache.output());
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Outputs { outputs })
    }
}

struct Outputs {
    outputs: Vec<Array2<f64>>,
}

impl Outputs {
    fn head(&self, model: &DensityModel, pass: PassRef, block: usize) -> HeadParams {
        model.head(self.outputs[pass.group].row(pass.row), block)
    }
}

enum Read {
    Category { pass: PassRef, block: usize, category: u16 },
    GeoChain { pass: PassRef, cell: Cell },
}

struct ConjunctionPasses {
    /// `None` when a factor is impossible (unknown value).
    reads: Option<Vec<Read>>,
    target: Option<PassRef>,
}

fn schedule(model: &DensityModel, conj: &Conjunction, target: Option<usize>, planner: &mut Planner) -> Result<ConjunctionPasses, QueryError> {
    let ix = &model.indexing;
    let mut flags = vec![false; model.schema.attributes.len()];
    let mut depth = 0u8;
    let mut row = vec![0.0; ix.input_width];
    let mut reads = Vec::with_capacity(conj.factors.len());
    for factor in &conj.factors {
        match *factor {
            Factor::Attr { attr, category } => {
                let Some(category) = category else {
                    return Ok(ConjunctionPasses { reads: None, target: None });
                };
                let block = ix.attribute_block[attr].expect("discrete attribute");
                let ordering = OrderingSample::new(ix, &flags, depth)?;
                let pass = planner.request(ordering, &row);
                reads.push(Read::Category { pass, block, category });
                flags[attr] = true;
                row[ix.blocks[block].input_offset + category as usize] = 1.0;
            }
            Factor::Geo(cell) => {
                for l in 1..=cell.level() {
                    let blk = &ix.blocks[ix.geo_blocks[l as usize - 1]];
                    row[blk.input_offset + cell.digit(l) as usize] = 1.0;
                }
                let ordering = OrderingSample::new(ix, &flags, 0)?;
                let pass = planner.request(ordering, &row);
                reads.push(Read::GeoChain { pass, cell });
                depth = cell.level();
            }
        }
    }
    let target = match target {
        Some(attr) => {
            // Geo digits beyond the cell stay zero: they are disconnected.
            let ordering = OrderingSample::new(ix, &flags, depth)?;
            debug_assert!(ordering.is_target(ix.attribute_block[attr].expect("continuous block")));
            Some(planner.request(ordering, &row))
        }
        None => None,
    };
    Ok(ConjunctionPasses {
        reads: Some(reads),
        target,
    })
}

fn log_probability(model: &DensityModel, outputs: &Outputs, reads: &[Read]) -> f64 {
    let ix = &model.indexing;
    let mut total = 0.0;
    for read in reads {
        match *read {
            Read::Category { pass, block, category } => {
                total += outputs
                    .head(model, pass, block)
                    .log_prob_category(category as usize)
                    .expect("categorical head");
            }
            Read::GeoChain { pass, cell } => {
                for l in 1..=cell.level() {
                    total += outputs
                        .head(model, pass, ix.geo_blocks[l as usize - 1])
                        .log_prob_category(cell.digit(l) as usize)
                        .expect("categorical head");
                }
            }
        }
    }
    total
}

struct Evaluated {
    log_selectivity: f64,
    conditional: Option<Conditional>,
}

fn combine(model: &DensityModel, plan: &Plan, parts: &[(Option<Cell>, Evaluated)]) -> Result<QueryResult, QueryError> {
    let n_total = model.n_total as f64;
    let logs: Vec<f64> = parts.iter().map(|(_, e)| e.log_selectivity).collect();
    let log_selectivity = if logs.len() == 1 { logs[0] } else { log_sum_exp(&logs) };
    let selectivity = log_selectivity.exp();
    let count = selectivity * n_total;
    let counts: Vec<f64> = logs.iter().map(|l| l.exp() * n_total).collect();
    let live = || parts.iter().zip(&counts).filter(|(_, &c)| c > 0.0);
    let single = || -> Result<Conditional, QueryError> {
        if parts.len() != 1 {
            return Err(QueryError::Unsupported(format!(
                "{:?} cannot be combined across {} sub-queries",
                plan.spec.function,
                parts.len()
            )));
        }
        parts[0]
            .1
            .conditional
            .ok_or_else(|| QueryError::EmptyResult("no qualifying rows".into()))
    };
    let weighted_mean = || -> Result<f64, QueryError> {
        if count <= 0.0 {
            return Err(QueryError::EmptyResult("no qualifying rows".into()));
        }
        Ok(live()
            .map(|((_, e), &c)| c * e.conditional.expect("target read").mean())
            .sum::<f64>()
            / count)
    };
    use AggregateFunction::*;
    let estimate = match plan.spec.function {
        Count => count,
        Sum => {
            if parts.len() == 1 {
                match parts[0].1.conditional {
                    Some(d) => count * d.mean(),
                    None => 0.0,
                }
            } else {
                live().map(|((_, e), &c)| c * e.conditional.expect("target read").mean()).sum()
            }
        }
        Mean => {
            if parts.len() == 1 {
                single()?.mean()
            } else {
                weighted_mean()?
            }
        }
        Stddev => {
            if parts.len() == 1 {
                single()?.stddev()
            } else {
                let mean = weighted_mean()?;
                let second = live()
                    .map(|((_, e), &c)| {
                        let d = e.conditional.expect("target read");
                        c * (d.stddev().powi(2) + d.mean().powi(2))
                    })
                    .sum::<f64>()
                    / count;
                (second - mean * mean).max(0.0).sqrt()
            }
        }
        Percentile => single()?.quantile(plan.spec.p.expect("validated"))?,
        Min | Max => {
            let d = single()?;
            let n = count.round();
            if n < 1.0 {
                return Err(QueryError::EmptyResult(format!(
                    "estimated count {count} rounds below one row"
                )));
            }
            let r = if plan.spec.function == Min { 1.0 } else { n };
            d.order_statistic(r, n)?
        }
    };
    let subqueries = if parts.len() > 1 {
        parts
            .iter()
            .zip(&counts)
            .map(|((cell, e), &c)| SubQueryResult {
                cell: *cell,
                selectivity: e.log_selectivity.exp(),
                count: c,
                estimate: match plan.spec.function {
                    Count => Some(c),
                    Sum => e.conditional.map(|d| c * d.mean()),
                    Mean => e.conditional.map(|d| d.mean()),
                    Stddev => e.conditional.map(|d| d.stddev()),
                    _ => None,
                },
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(QueryResult {
        estimate,
        selectivity,
        log_selectivity,
        count,
        subqueries,
    })
}

/// Answers many queries with shared, batched forward passes. Results are
/// returned per query, in order.
pub fn evaluate_many(model: &DensityModel, queries: &[Query]) -> Vec<Result<QueryResult, QueryError>> {
    let mut planner = Planner::new(model);
    let staged: Vec<Result<(Plan, Vec<ConjunctionPasses>), QueryError>> = queries
        .iter()
        .map(|q| {
            let p = plan(model, q)?;
            let passes = p
                .conjunctions
                .iter()
                .map(|c| schedule(model, c, p.target, &mut planner))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((p, passes))
        })
        .collect();
    let outputs = match planner.run() {
        Ok(o) => o,
        Err(e) => {
            let msg = e.to_string();
            return queries
                .iter()
                .map(|_| Err(QueryError::Model(ModelError::Argument(msg.clone()))))
                .collect();
        }
    };
    staged
        .into_iter()
        .map(|s| {
            let (p, passes) = s?;
            let mut parts = Vec::with_capacity(passes.len());
            for (conj, cp) in p.conjunctions.iter().zip(&passes) {
                let evaluated = match &cp.reads {
                    None => Evaluated {
                        log_selectivity: f64::NEG_INFINITY,
                        conditional: None,
                    },
                    Some(reads) => {
                        let conditional = match (p.target, cp.target) {
                            (Some(attr), Some(pass)) => {
                                let block = model.indexing.attribute_block[attr].expect("continuous block");
                                Some(conditional(model, attr, &outputs.head(model, pass, block))?)
                            }
                            _ => None,
                        };
                        Evaluated {
                            log_selectivity: log_probability(model, &outputs, reads),
                            conditional,
                        }
                    }
                };
                parts.push((conj.cell, evaluated));
            }
            combine(model, &p, &parts)
        })
        .collect()
}

pub fn aggregate(model: &DensityModel, query: &Query) -> Result<QueryResult, QueryError> {
    evaluate_many(model, std::slice::from_ref(query))
        .pop()
        .expect("one result per query")
}

pub fn estimate_count(model: &DensityModel, predicates: &[Predicate]) -> Result<f64, QueryError> {
    Ok(aggregate(model, &Query::count(predicates.to_vec()))?.estimate)
}

/// Log-probability of a conjunction plus the conditional heads of every
/// non-conditioned non-geo attribute given all predicates.
#[derive(Debug, Clone, PartialEq)]
pub struct Selectivity {
    pub log_probability: f64,
    pub heads: Vec<(usize, HeadParams)>,
}

/// Selectivity of conjunctive `equals` / `cell_contains` predicates.
pub fn selectivity(model: &DensityModel, predicates: &[Predicate]) -> Result<Selectivity, QueryError> {
    if predicates
        .iter()
        .any(|p| matches!(p, Predicate::InSet { .. } | Predicate::InPolygon { .. }))
    {
        return Err(QueryError::Invalid(
            "selectivity takes conjunctive predicates; use aggregate for sets and polygons".into(),
        ));
    }
    let p = plan(model, &Query::count(predicates.to_vec()))?;
    let conj = &p.conjunctions[0];
    let mut planner = Planner::new(model);
    let cp = schedule(model, conj, None, &mut planner)?;
    let Some(reads) = cp.reads else {
        return Ok(Selectivity {
            log_probability: f64::NEG_INFINITY,
            heads: Vec::new(),
        });
    };
    let ix = &model.indexing;
    let mut flags = vec![false; model.schema.attributes.len()];
    let mut depth = 0;
    let mut row = vec![0.0; ix.input_width];
    for f in &conj.factors {
        match *f {
            Factor::Attr { attr, category } => {
                flags[attr] = true;
                let blk = &ix.blocks[ix.attribute_block[attr].expect("discrete")];
                row[blk.input_offset + category.expect("known") as usize] = 1.0;
            }
            Factor::Geo(cell) => {
                depth = cell.level();
                for l in 1..=depth {
                    let blk = &ix.blocks[ix.geo_blocks[l as usize - 1]];
                    row[blk.input_offset + cell.digit(l) as usize] = 1.0;
                }
            }
        }
    }
    let all_conditioned = flags
        .iter()
        .enumerate()
        .all(|(a, &f)| f || ix.attribute_block[a].is_none())
        && depth == ix.geo_levels();
    let final_pass = if all_conditioned {
        None
    } else {
        Some(planner.request(OrderingSample::new(ix, &flags, depth)?, &row))
    };
    let outputs = planner.run()?;
    let heads = match final_pass {
        Some(pass) => ix
            .attribute_block
            .iter()
            .enumerate()
            .filter_map(|(a, b)| b.filter(|_| !flags[a]).map(|b| (a, outputs.head(model, pass, b))))
            .collect(),
        None => Vec::new(),
    };
    Ok(Selectivity {
        log_probability: log_probability(model, &outputs, &reads),
        heads,
    })
}

/// `log P(predicates, attribute ∈ values)` by summing the joint over the values.
pub fn marginal_in_set(
    model: &DensityModel,
    predicates: &[Predicate],
    attribute: &str,
    values: &[serde_json::Value],
) -> Result<f64, QueryError> {
    let mut preds = predicates.to_vec();
    preds.push(Predicate::InSet {
        attribute: attribute.to_string(),
        values: values.to_vec(),
    });
    Ok(aggregate(model, &Query::count(preds))?.log_selectivity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub cell: Cell,
    pub bounds: Rect,
    pub estimate: f64,
}

/// One aggregate per level-`level` cell overlapping `bbox`, ordered by
/// curve index. COUNT cells below 0.5 are omitted.
pub fn heatmap(
    model: &DensityModel,
    level: u8,
    bbox: &Rect,
    filters: &[Predicate],
    spec: &AggregateSpec,
) -> Result<Vec<HeatCell>, QueryError> {
    let max = model.indexing.geo_levels();
    if level > max {
        return Err(QueryError::LevelTooDeep { level, max });
    }
    if filters.iter().any(Predicate::is_spatial) {
        return Err(QueryError::Invalid("heatmap filters must be non-spatial".into()));
    }
    let domain = &model.schema.domain;
    if !domain.rect().overlaps_interior(bbox) {
        return Err(QueryError::Invalid("bbox does not intersect the domain".into()));
    }
    let cells = cover_rect(bbox, level, domain)?;
    let queries: Vec<Query> = cells
        .iter()
        .map(|&cell| {
            let mut predicates = filters.to_vec();
            predicates.push(Predicate::CellContains { cell });
            Query {
                predicates,
                aggregate: spec.clone(),
            }
        })
        .collect();
    let mut out = Vec::with_capacity(cells.len());
    for (cell, result) in cells.iter().zip(evaluate_many(model, &queries)) {
        let estimate = match result {
            Ok(r) => r.estimate,
            Err(QueryError::EmptyResult(_)) => continue,
            Err(e) => return Err(e),
        };
        if spec.function == AggregateFunction::Count && estimate < 0.5 {
            continue;
        }
        out.push(HeatCell {
            cell: *cell,
            bounds: cell_bounds(cell, domain),
            estimate,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AttributeSchema, AttributeSpec, ContinuousStats, DatetimeField};
    use crate::geocell::Domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    fn schema(levels: u8, head: HeadKind) -> AttributeSchema {
        AttributeSchema::new(
            Domain::new(0.0, 0.0, 1.0, 1.0, levels).unwrap(),
            vec![
                AttributeSpec {
                    name: "color".into(),
                    kind: AttributeKind::Categorical {
                        categories: vec!["r".into(), "g".into(), "b".into(), "y".into()],
                    },
                },
                AttributeSpec {
                    name: "hour".into(),
                    kind: AttributeKind::Datetime {
                        field: DatetimeField::Hour,
                    },
                },
                AttributeSpec {
                    name: "loc".into(),
                    kind: AttributeKind::Geo { max_level: levels },
                },
                AttributeSpec {
                    name: "fare".into(),
                    kind: AttributeKind::Continuous { head },
                },
            ],
        )
        .unwrap()
    }

    fn model_with(head: HeadKind, seed: u64) -> DensityModel {
        let log = head.log_input();
        let stats = vec![
            None,
            None,
            None,
            Some(ContinuousStats {
                mean: 2.0,
                std: 0.5,
                log,
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DensityModel::new(schema(4, head), stats, 10_000, &[24, 24], &mut rng).unwrap().0
    }

    fn random_model(seed: u64) -> DensityModel {
        model_with(HeadKind::Gaussian { components: 1 }, seed)
    }

    fn zero_model() -> DensityModel {
        let mut m = random_model(1);
        let last = m.network.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
        m
    }

    fn eq(attr: &str, v: serde_json::Value) -> Predicate {
        Predicate::Equals {
            attribute: attr.into(),
            value: v,
        }
    }

    fn cell(s: &str) -> Predicate {
        Predicate::CellContains { cell: s.parse().unwrap() }
    }

    #[test]
    fn empty_query_is_everything() {
        let m = random_model(2);
        let s = selectivity(&m, &[]).unwrap();
        assert_eq!(s.log_probability, 0.0);
        assert_eq!(estimate_count(&m, &[]).unwrap(), 10_000.0);
    }

    #[test]
    fn zero_model_selectivities() {
        let m = zero_model();
        let s = selectivity(&m, &[eq("color", json!("g"))]).unwrap();
        assert!((s.log_probability.exp() - 0.25).abs() < 1e-15);
        let s = selectivity(&m, &[cell("123")]).unwrap();
        assert!((s.log_probability.exp() - 0.25f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn unknown_category_selects_nothing() {
        let m = random_model(3);
        let s = selectivity(&m, &[eq("color", json!("purple"))]).unwrap();
        assert_eq!(s.log_probability, f64::NEG_INFINITY);
        assert_eq!(estimate_count(&m, &[eq("color", json!("purple"))]).unwrap(), 0.0);
        assert!(matches!(
            selectivity(&m, &[eq("hour", json!(24))]),
            Err(QueryError::Invalid(_))
        ));
        assert!(matches!(selectivity(&m, &[eq("nope", json!(1))]), Err(QueryError::Invalid(_))));
    }

    #[test]
    fn chain_normalization_with_predicates() {
        let m = random_model(4);
        let base = vec![eq("hour", json!(7)), eq("color", json!("b"))];
        let parent: Cell = "21".parse().unwrap();
        let mut with_parent = base.clone();
        with_parent.push(Predicate::CellContains { cell: parent });
        let p = estimate_count(&m, &with_parent).unwrap();
        let mut sum = 0.0;
        for child in parent.children().unwrap() {
            let mut q = base.clone();
            q.push(Predicate::CellContains { cell: child });
            sum += estimate_count(&m, &q).unwrap();
        }
        assert!((sum - p).abs() <= 1e-6 * p, "{sum} vs {p}");
    }

    #[test]
    fn adding_predicates_never_increases_selectivity() {
        let m = random_model(5);
        let a = estimate_count(&m, &[cell("01")]).unwrap();
        let b = estimate_count(&m, &[cell("01"), eq("hour", json!(3))]).unwrap();
        let c = estimate_count(&m, &[cell("01"), eq("hour", json!(3)), eq("color", json!("r"))]).unwrap();
        assert!(b <= a && c <= b);
    }

    #[test]
    fn full_value_set_equals_no_predicate() {
        let m = random_model(6);
        let base = vec![cell("3"), eq("color", json!("y"))];
        let all: Vec<serde_json::Value> = (0..24).map(|h| json!(h)).collect();
        let lp = marginal_in_set(&m, &base, "hour", &all).unwrap();
        let plain = selectivity(&m, &base).unwrap().log_probability;
        assert!((lp.exp() - plain.exp()).abs() < 1e-9, "{lp} vs {plain}");
        let single = marginal_in_set(&m, &base, "hour", &[json!(5)]).unwrap();
        let mut with_eq = base.clone();
        with_eq.push(eq("hour", json!(5)));
        assert_eq!(single, selectivity(&m, &with_eq).unwrap().log_probability);
    }

    #[test]
    fn gaussian_aggregates_follow_the_head() {
        let m = random_model(7);
        let preds = vec![cell("20"), eq("hour", json!(12))];
        let s = selectivity(&m, &preds).unwrap();
        let fare = m.schema.index_of("fare").unwrap();
        let (_, head) = s.heads.iter().find(|(a, _)| *a == fare).unwrap();
        let d = conditional(&m, fare, head).unwrap();
        let Conditional::Normal { mu, sigma } = d else { panic!() };
        let q = |spec: AggregateSpec| {
            aggregate(
                &m,
                &Query {
                    predicates: preds.clone(),
                    aggregate: spec,
                },
            )
            .unwrap()
        };
        let mean = q(AggregateSpec::of(AggregateFunction::Mean, "fare"));
        assert_eq!(mean.estimate, mu);
        assert_eq!(q(AggregateSpec::of(AggregateFunction::Stddev, "fare")).estimate, sigma);
        assert_eq!(q(AggregateSpec::percentile("fare", 0.5)).estimate, mu);
        let p1 = q(AggregateSpec::percentile("fare", std_normal_cdf_one()));
        assert!((p1.estimate - (mu + sigma)).abs() < 1e-9);
        let sum = q(AggregateSpec::of(AggregateFunction::Sum, "fare"));
        assert_eq!(sum.estimate, mean.count * mean.estimate);
        let count = q(AggregateSpec::count());
        assert_eq!(count.estimate, mean.count);
    }

    fn std_normal_cdf_one() -> f64 {
        crate::nn::std_normal_cdf(1.0)
    }

    #[test]
    fn order_statistics() {
        let d = Conditional::Normal { mu: 10.0, sigma: 2.0 };
        let min1 = d.order_statistic(1.0, 1.0).unwrap();
        assert!((min1 - 10.0).abs() < 2.0 * 1e-4, "{min1}");
        // Φ⁻¹(0.993940) = 2.508631 (Python statistics.NormalDist).
        let max = d.order_statistic(100.0, 100.0).unwrap();
        assert!(((max - 10.0) / 2.0 - 2.508_631).abs() < 1e-5, "{max}");
    }

    #[test]
    fn lognormal_aggregates_use_lognormal_formulas() {
        let d = Conditional::LogNormal { mu: 1.0, sigma: 0.5 };
        assert!((d.mean() - (1.125f64).exp()).abs() < 1e-12);
        let var = (0.25f64.exp() - 1.0) * (2.25f64).exp();
        assert!((d.stddev() - var.sqrt()).abs() < 1e-12);
        assert_eq!(d.quantile(0.5).unwrap(), 1f64.exp());
        let m = model_with(HeadKind::Lognormal, 8);
        let r = aggregate(
            &m,
            &Query {
                predicates: vec![cell("1")],
                aggregate: AggregateSpec::of(AggregateFunction::Mean, "fare"),
            },
        )
        .unwrap();
        assert!(r.estimate > 0.0);
    }

    #[test]
    fn unsupported_heads_and_specs() {
        let m = model_with(HeadKind::Gaussian { components: 3 }, 9);
        let mean = Query {
            predicates: vec![],
            aggregate: AggregateSpec::of(AggregateFunction::Mean, "fare"),
        };
        assert!(matches!(aggregate(&m, &mean), Err(QueryError::Unsupported(_))));
        assert!(aggregate(&m, &Query::count(vec![])).is_ok());
        let m = random_model(9);
        let bad_p = Query {
            predicates: vec![],
            aggregate: AggregateSpec::percentile("fare", 1.0),
        };
        assert!(matches!(aggregate(&m, &bad_p), Err(QueryError::Invalid(_))));
        let no_attr = Query {
            predicates: vec![],
            aggregate: AggregateSpec {
                function: AggregateFunction::Sum,
                attribute: None,
                p: None,
            },
        };
        assert!(matches!(aggregate(&m, &no_attr), Err(QueryError::Invalid(_))));
        let deep = Query::count(vec![cell("01230")]);
        assert!(matches!(aggregate(&m, &deep), Err(QueryError::LevelTooDeep { max: 4, .. })));
        let two = Query::count(vec![cell("0"), cell("1")]);
        assert!(matches!(aggregate(&m, &two), Err(QueryError::Invalid(_))));
        let dup = Query::count(vec![eq("hour", json!(1)), eq("hour", json!(2))]);
        assert!(matches!(aggregate(&m, &dup), Err(QueryError::Invalid(_))));
    }

    fn square(x0: f64, y0: f64, x1: f64, y1: f64, level: u8) -> Predicate {
        Predicate::InPolygon {
            ring: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
            cover_level: level,
        }
    }

    #[test]
    fn polygon_queries() {
        let m = random_model(10);
        // Slightly shrunk bounds of cell "2" at level 1 → exactly that cell.
        let b = cell_bounds(&"2".parse().unwrap(), &m.schema.domain);
        let e = 1e-9;
        let poly = square(b.min_lon + e, b.min_lat + e, b.max_lon - e, b.max_lat - e, 1);
        let a = estimate_count(&m, &[poly]).unwrap();
        assert_eq!(a, estimate_count(&m, &[cell("2")]).unwrap());

        let whole = estimate_count(&m, &[square(0.0, 0.0, 1.0, 1.0, 3)]).unwrap();
        assert!((whole - 10_000.0).abs() < 1e-6 * 10_000.0, "{whole}");
        let left = estimate_count(&m, &[square(0.0, 0.0, 0.5 - e, 1.0, 3)]).unwrap();
        let right = estimate_count(&m, &[square(0.5 + e, 0.0, 1.0, 1.0, 3)]).unwrap();
        assert!(((left + right) - whole).abs() < 1e-9 * whole);

        let mean = aggregate(
            &m,
            &Query {
                predicates: vec![square(0.0, 0.0, 0.5 - e, 1.0, 2)],
                aggregate: AggregateSpec::of(AggregateFunction::Mean, "fare"),
            },
        )
        .unwrap();
        assert_eq!(mean.subqueries.len(), 8);
        let c: f64 = mean.subqueries.iter().map(|s| s.count).sum();
        let weighted: f64 = mean.subqueries.iter().map(|s| s.count * s.estimate.unwrap()).sum::<f64>() / c;
        assert!((weighted - mean.estimate).abs() < 1e-12);
        let pct = Query {
            predicates: vec![square(0.0, 0.0, 0.5 - e, 1.0, 2)],
            aggregate: AggregateSpec::percentile("fare", 0.3),
        };
        assert!(matches!(aggregate(&m, &pct), Err(QueryError::Unsupported(_))));
    }

    /// Law of total variance against a direct moment computation.
    #[test]
    fn polygon_stddev_combines_moments() {
        let m = random_model(11);
        let q = |f| Query {
            predicates: vec![square(0.0, 0.0, 1.0, 0.5 - 1e-9, 1)],
            aggregate: AggregateSpec::of(f, "fare"),
        };
        let sd = aggregate(&m, &q(AggregateFunction::Stddev)).unwrap();
        let means = aggregate(&m, &q(AggregateFunction::Mean)).unwrap();
        let n: f64 = sd.subqueries.iter().map(|s| s.count).sum();
        let mu = means.estimate;
        let var: f64 = sd
            .subqueries
            .iter()
            .zip(&means.subqueries)
            .map(|(s, mn)| s.count * (s.estimate.unwrap().powi(2) + (mn.estimate.unwrap() - mu).powi(2)))
            .sum::<f64>()
            / n;
        assert!((sd.estimate - var.sqrt()).abs() < 1e-9, "{} vs {}", sd.estimate, var.sqrt());
    }

    #[test]
    fn heatmap_cells_and_threshold() {
        let m = random_model(12);
        let all = heatmap(&m, 2, &m.schema.domain.rect(), &[], &AggregateSpec::count()).unwrap();
        let total: f64 = all.iter().map(|c| c.estimate).sum();
        assert_eq!(all.len(), 16);
        assert!((total - 10_000.0).abs() < 1e-6 * 10_000.0);
        assert!(all.windows(2).all(|w| w[0].cell.index() < w[1].cell.index()));
        let parent: Cell = "13".parse().unwrap();
        let sub = heatmap(&m, 3, &cell_bounds(&parent, &m.schema.domain), &[], &AggregateSpec::count()).unwrap();
        assert_eq!(sub.len(), 4);
        assert!(sub.iter().all(|c| parent.contains(&c.cell)));
        let parent_count = estimate_count(&m, &[Predicate::CellContains { cell: parent }]).unwrap();
        let sum: f64 = sub.iter().map(|c| c.estimate).sum();
        assert!((sum - parent_count).abs() < 1e-6 * parent_count);
        assert!(matches!(
            heatmap(&m, 5, &m.schema.domain.rect(), &[], &AggregateSpec::count()),
            Err(QueryError::LevelTooDeep { max: 4, .. })
        ));
    }

    #[test]
    fn batched_and_single_answers_agree() {
        let m = random_model(13);
        let queries: Vec<Query> = ["0", "01", "012", "3", "33"]
            .iter()
            .map(|c| Query::count(vec![cell(c), eq("hour", json!(9))]))
            .collect();
        let batched = evaluate_many(&m, &queries);
        for (q, b) in queries.iter().zip(batched) {
            let single = aggregate(&m, q).unwrap();
            let b = b.unwrap();
            assert!((single.estimate - b.estimate).abs() <= 1e-12 * single.estimate.max(1.0));
        }
    }

    #[test]
    fn query_json_shape() {
        let text = r#"{"predicates":[{"type":"equals","attribute":"hour","value":13},
            {"type":"cell_contains","cell":"0213"},
            {"type":"in_set","attribute":"color","values":["r","g"]}],
            "aggregate":{"function":"PERCENTILE","attribute":"fare","p":0.9}}"#;
        let q: Query = serde_json::from_str(text).unwrap();
        assert_eq!(q.predicates.len(), 3);
        assert_eq!(q.aggregate.function, AggregateFunction::Percentile);
        let back: Query = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
        assert_eq!(back, q);
        let q: Query = serde_json::from_str(r#"{"predicates":[]}"#).unwrap();
        assert_eq!(q.aggregate.function, AggregateFunction::Count);
        assert!(serde_json::from_str::<Query>(r#"{"predicates":[{"type":"bogus"}]}"#).is_err());
        assert!(serde_json::from_str::<Query>(r#"{"predicate":[]}"#).is_err());
    }
}
