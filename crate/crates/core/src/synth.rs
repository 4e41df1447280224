//! Seeded synthetic taxi-like pickups: a few spatial Gaussian clusters whose
//! intensity follows hour of day and weekday, over a uniform background.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    AttributeKind, AttributeSchema, AttributeSpec, Column, ColumnRef, DatasetError, DatetimeField, EncodedDataset,
    HeadKind, RawTable, SchemaConfig,
};
use crate::geocell::{encode, Domain, GeoPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rows: usize,
    pub seed: u64,
    /// 1 generates January 2016; 2 adds February with shifted intensities
    /// and a `month` attribute.
    pub months: u8,
    pub geo_levels: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 200_000,
            seed: 7,
            months: 1,
            geo_levels: 14,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Cluster {
    lon: f64,
    lat: f64,
    sigma_lon: f64,
    sigma_lat: f64,
    weight: f64,
    /// Hour of the intensity peak and its width in hours.
    peak: f64,
    width: f64,
    weekend: f64,
    fare: f64,
}

const CLUSTERS: [Cluster; 5] = [
    Cluster { lon: -73.985, lat: 40.755, sigma_lon: 0.012, sigma_lat: 0.018, weight: 0.34, peak: 18.5, width: 3.0, weekend: 0.7, fare: 11.0 },
    Cluster { lon: -74.008, lat: 40.712, sigma_lon: 0.008, sigma_lat: 0.008, weight: 0.18, peak: 8.5, width: 2.0, weekend: 0.35, fare: 14.0 },
    Cluster { lon: -73.958, lat: 40.775, sigma_lon: 0.010, sigma_lat: 0.014, weight: 0.16, peak: 13.0, width: 4.0, weekend: 1.3, fare: 9.0 },
    Cluster { lon: -73.870, lat: 40.772, sigma_lon: 0.006, sigma_lat: 0.004, weight: 0.10, peak: 16.0, width: 5.0, weekend: 1.1, fare: 32.0 },
    Cluster { lon: -73.955, lat: 40.715, sigma_lon: 0.015, sigma_lat: 0.012, weight: 0.12, peak: 23.0, width: 2.5, weekend: 2.0, fare: 13.0 },
];

const BACKGROUND: f64 = 0.11;
/// Background pickups are uniform over this box (lon, lat bounds).
const CITY: [f64; 4] = [-74.06, 40.62, -73.80, 40.88];

/// Relative pickups per hour of day.
const HOURLY: [f64; 24] = [
    3.0, 2.2, 1.6, 1.1, 0.9, 1.0, 2.0, 3.6, 4.6, 4.7, 4.3, 4.4, 4.7, 4.7, 4.8, 4.7, 4.6, 5.2, 6.0, 6.2, 5.8, 5.6, 5.2, 4.2,
];

/// An 8° square around the city, so levels 10 to 13 are cells of roughly
/// 800 m down to 100 m.
pub fn domain(levels: u8) -> Domain {
    Domain::new(-78.7, 37.3, -70.7, 45.3, levels).expect("static domain")
}

/// dom, dow, hour, [month], pickup, fare.
pub fn schema(config: &SynthConfig) -> Result<AttributeSchema, DatasetError> {
    AttributeSchema::new(domain(config.geo_levels), attributes(config))
}

fn attributes(config: &SynthConfig) -> Vec<AttributeSpec> {
    let dt = |name: &str, field| AttributeSpec {
        name: name.into(),
        kind: AttributeKind::Datetime { field },
    };
    let mut attrs = vec![
        dt("day_of_month", DatetimeField::DayOfMonth),
        dt("day_of_week", DatetimeField::DayOfWeek),
        dt("hour", DatetimeField::Hour),
    ];
    if config.months > 1 {
        attrs.push(dt("month", DatetimeField::Month));
    }
    attrs.push(AttributeSpec {
        name: "pickup".into(),
        kind: AttributeKind::Geo {
            max_level: config.geo_levels,
        },
    });
    attrs.push(AttributeSpec {
        name: "total_fare".into(),
        kind: AttributeKind::Continuous {
            head: HeadKind::Gaussian { components: 1 },
        },
    });
    attrs
}

/// Schema config matching the CSV written by [`write_csv`].
pub fn schema_config(config: &SynthConfig) -> SchemaConfig {
    let attributes = attributes(config);
    let mut columns = BTreeMap::new();
    for a in &attributes {
        let col = match a.kind {
            AttributeKind::Datetime { .. } => ColumnRef::Single("pickup_datetime".into()),
            AttributeKind::Geo { .. } => ColumnRef::LonLat {
                lon: "pickup_longitude".into(),
                lat: "pickup_latitude".into(),
            },
            _ => ColumnRef::Single(a.name.clone()),
        };
        columns.insert(a.name.clone(), col);
    }
    SchemaConfig {
        domain: domain(config.geo_levels),
        attributes,
        columns,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trip {
    pub time: NaiveDateTime,
    pub point: GeoPoint,
    pub fare: f64,
}

fn validate(config: &SynthConfig) -> Result<(), DatasetError> {
    if config.rows == 0 {
        return Err(DatasetError::Config("rows must be positive".into()));
    }
    if !(1..=2).contains(&config.months) {
        return Err(DatasetError::Config("months must be 1 or 2".into()));
    }
    if config.geo_levels == 0 || config.geo_levels > 30 {
        return Err(DatasetError::Config("geo_levels must be in 1..=30".into()));
    }
    Ok(())
}

pub fn trips(config: &SynthConfig) -> Result<Vec<Trip>, DatasetError> {
    validate(config)?;
    let dom = domain(config.geo_levels);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hours = WeightedIndex::new(HOURLY).expect("positive weights");
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let days: Vec<NaiveDate> = (1..=config.months as u32)
        .flat_map(|m| {
            let first = NaiveDate::from_ymd_opt(2016, m, 1).expect("valid date");
            (0..).map(move |d| first + Duration::days(d)).take_while(move |d| d.month() == m)
        })
        .collect();
    let mut out = Vec::with_capacity(config.rows);
    while out.len() < config.rows {
        let day = days[rng.random_range(0..days.len())];
        let hour = hours.sample(&mut rng) as u32;
        let weekend = day.weekday().number_from_monday() >= 6;
        let february = day.month() == 2;
        let mut weights: Vec<f64> = CLUSTERS
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let dh: f64 = ((hour as f64 + 0.5 - c.peak + 12.0).rem_euclid(24.0)) - 12.0;
                let bump = 0.3 + 1.7 * (-0.5 * (dh / c.width).powi(2_i32)).exp();
                let shift = if february && i % 2 == 1 { 1.35 } else { 1.0 };
                c.weight * bump * if weekend { c.weekend } else { 1.0 } * shift
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.push(BACKGROUND / (1.0 - BACKGROUND) * total);
        let pick = WeightedIndex::new(&weights).expect("positive weights").sample(&mut rng);
        let (point, base) = if pick < CLUSTERS.len() {
            let c = CLUSTERS[pick];
            let p = GeoPoint::new(
                c.lon + c.sigma_lon * noise.sample(&mut rng),
                c.lat + c.sigma_lat * noise.sample(&mut rng),
            );
            (p, c.fare)
        } else {
            let p = GeoPoint::new(
                rng.random_range(CITY[0]..CITY[2]),
                rng.random_range(CITY[1]..CITY[3]),
            );
            (p, 18.0)
        };
        if !dom.contains(point) {
            continue;
        }
        let night = if !(6..22).contains(&hour) { 2.5 } else { 0.0 };
        let fare = (base + night + 3.0 * noise.sample(&mut rng)).max(2.5);
        let time = day
            .and_hms_opt(hour, rng.random_range(0..60), rng.random_range(0..60))
            .expect("valid time");
        out.push(Trip { time, point, fare });
    }
    Ok(out)
}

/// Builds the dataset directly, skipping the CSV round trip.
pub fn generate(config: &SynthConfig) -> Result<EncodedDataset, DatasetError> {
    let schema = schema(config)?;
    let trips = trips(config)?;
    let mut columns = Vec::with_capacity(schema.attributes.len());
    for a in &schema.attributes {
        columns.push(match a.kind {
            AttributeKind::Datetime { field } => Column::Discrete(
                trips
                    .iter()
                    .map(|t| {
                        let v = match field {
                            DatetimeField::DayOfMonth => t.time.day(),
                            DatetimeField::DayOfWeek => t.time.weekday().number_from_monday(),
                            DatetimeField::Hour => t.time.hour(),
                            DatetimeField::Month => t.time.month(),
                        };
                        (v - field.offset()) as u16
                    })
                    .collect(),
            ),
            AttributeKind::Geo { .. } => Column::Geo {
                cells: trips
                    .iter()
                    .map(|t| encode(t.point, config.geo_levels, &schema.domain).map(|c| c.index()))
                    .collect::<Result<_, _>>()?,
                points: trips.iter().map(|t| t.point).collect(),
            },
            AttributeKind::Continuous { .. } => Column::Continuous(trips.iter().map(|t| t.fare).collect()),
            AttributeKind::Categorical { .. } => unreachable!("no categorical synthetic attributes"),
        });
    }
    EncodedDataset::from_table(schema, RawTable::new(columns)?)
}

pub fn write_csv(trips: &[Trip], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pickup_datetime", "pickup_longitude", "pickup_latitude", "total_fare"])?;
    for t in trips {
        w.write_record([
            t.time.format("%Y-%m-%dT%H:%M:%S").to_string(),
            format!("{:.7}", t.point.lon),
            format!("{:.7}", t.point.lat),
            format!("{:.2}", t.fare),
        ])?;
    }
    w.flush()?;
    Ok(())
}
