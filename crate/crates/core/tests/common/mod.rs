#![allow(dead_code)]

use geoaqp::dataset::{
    AttributeKind, AttributeSchema, AttributeSpec, Column, DatetimeField, EncodedDataset, HeadKind, RawTable,
};
use geoaqp::geocell::{encode, Domain, GeoPoint};
use geoaqp::model::{DensityModel, Observation, OrderingSample};
use geoaqp::trainer::{batch_loss, loss_weight};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn unit_domain(levels: u8) -> Domain {
    Domain::new(0.0, 0.0, 1.0, 1.0, levels).unwrap()
}

/// Categorical, optional day-of-week, geo and one continuous attribute with
/// a randomly chosen head.
pub fn random_schema<R: Rng>(rng: &mut R) -> AttributeSchema {
    let head = match rng.random_range(0..3) {
        0 => HeadKind::Gaussian {
            components: rng.random_range(1..=3),
        },
        1 => HeadKind::Lognormal,
        _ => HeadKind::Pareto { beta: 1.0 },
    };
    schema_with_head(rng, head)
}

pub fn schema_with_head<R: Rng>(rng: &mut R, head: HeadKind) -> AttributeSchema {
    let levels = rng.random_range(1..=3u8);
    let k = rng.random_range(2..=5usize);
    let mut attrs = vec![AttributeSpec {
        name: "kind".into(),
        kind: AttributeKind::Categorical {
            categories: (0..k).map(|i| format!("c{i}")).collect(),
        },
    }];
    if rng.random_bool(0.5) {
        attrs.push(AttributeSpec {
            name: "dow".into(),
            kind: AttributeKind::Datetime {
                field: DatetimeField::DayOfWeek,
            },
        });
    }
    attrs.push(AttributeSpec {
        name: "loc".into(),
        kind: AttributeKind::Geo { max_level: levels },
    });
    attrs.push(AttributeSpec {
        name: "amount".into(),
        kind: AttributeKind::Continuous { head },
    });
    AttributeSchema::new(unit_domain(levels), attrs).unwrap()
}

pub fn random_data<R: Rng>(schema: &AttributeSchema, rows: usize, rng: &mut R) -> EncodedDataset {
    let levels = schema.geo_levels();
    let columns = schema
        .attributes
        .iter()
        .map(|a| match &a.kind {
            AttributeKind::Geo { .. } => {
                let points: Vec<GeoPoint> = (0..rows)
                    .map(|_| GeoPoint::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
                    .collect();
                Column::Geo {
                    cells: points
                        .iter()
                        .map(|&p| encode(p, levels, &schema.domain).unwrap().index())
                        .collect(),
                    points,
                }
            }
            AttributeKind::Continuous { head } => Column::Continuous(
                (0..rows)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        match head {
                            HeadKind::Gaussian { .. } => 3.0 + 2.0 * z,
                            HeadKind::Lognormal => (0.5 * z).exp() * 4.0,
                            HeadKind::Pareto { beta } => beta * (1.0 + (0.7 * z).exp()),
                        }
                    })
                    .collect(),
            ),
            _ => {
                let k = a.cardinality().unwrap();
                Column::Discrete((0..rows).map(|_| rng.random_range(0..k) as u16).collect())
            }
        })
        .collect();
    EncodedDataset::from_table(schema.clone(), RawTable::new(columns).unwrap()).unwrap()
}

/// Model whose weights and biases are all random, so no output is trivially
/// constant.
pub fn random_model<R: Rng>(schema: &AttributeSchema, hidden: &[usize], data: &EncodedDataset, rng: &mut R) -> DensityModel {
    let (mut m, _) = DensityModel::new(schema.clone(), data.stats.clone(), data.n_total() as u64, hidden, rng).unwrap();
    for layer in &mut m.network.layers {
        for b in layer.bias.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        let mask = layer.mask.clone();
        for ((i, j), w) in layer.weights.indexed_iter_mut() {
            if mask[[i, j]] != 0.0 {
                *w = rng.random_range(-0.6..0.6);
            }
        }
    }
    m
}

pub fn encode_all(model: &DensityModel, data: &EncodedDataset) -> (Array2<f64>, Vec<Vec<Observation>>) {
    let n = data.n_total();
    let mut enc = Array2::zeros((n, model.indexing.input_width));
    let mut obs = Vec::with_capacity(n);
    for i in 0..n {
        data.encode_into(i, enc.row_mut(i).as_slice_mut().unwrap());
        obs.push(model.observations(data, i));
    }
    (enc, obs)
}

/// Largest relative difference between analytic and central-difference
/// gradients over every weight and bias. Gradients below `floor` in
/// magnitude are compared against `floor`.
pub fn gradient_check(model: &DensityModel, data: &EncodedDataset, ordering: &OrderingSample, step: f64, floor: f64) -> (f64, usize) {
    let (enc, obs) = encode_all(model, data);
    let rows = enc.nrows() as f64;
    let weight = loss_weight(ordering);
    let cache = model.forward_batch(enc.view(), ordering).unwrap();
    let (_, d_out) = model
        .target_nll(cache.output().view(), &obs, ordering, Some(weight / rows))
        .unwrap();
    let grads = model.network.backward(&cache, d_out.unwrap().view()).unwrap();

    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut compare = |analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
        checked += 1;
    };
    for k in 0..model.network.layers.len() {
        let (r, c) = model.network.layers[k].weights.dim();
        for i in 0..r {
            for j in 0..c {
                let w = model.network.layers[k].weights[[i, j]];
                probe.network.layers[k].weights[[i, j]] = w + step;
                let up = batch_loss(&probe, &enc, &obs, ordering).unwrap();
                probe.network.layers[k].weights[[i, j]] = w - step;
                let down = batch_loss(&probe, &enc, &obs, ordering).unwrap();
                probe.network.layers[k].weights[[i, j]] = w;
                compare(grads.weights[k][[i, j]], (up - down) / (2.0 * step));
            }
            let b = model.network.layers[k].bias[i];
            probe.network.layers[k].bias[i] = b + step;
            let up = batch_loss(&probe, &enc, &obs, ordering).unwrap();
            probe.network.layers[k].bias[i] = b - step;
            let down = batch_loss(&probe, &enc, &obs, ordering).unwrap();
            probe.network.layers[k].bias[i] = b;
            compare(grads.biases[k][i], (up - down) / (2.0 * step));
        }
    }
    (worst, checked)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PerturbationStats {
    pub violations: usize,
    /// Allowed dependencies that did move the target (guards against a
    /// vacuous check).
    pub live: usize,
    pub checks: usize,
}

/// Replaces each block's inputs (and only them) with random values and
/// checks which target heads move. A target may depend on conditioning
/// blocks and, for geo digits, on strictly coarser target digits.
pub fn perturbation_check<R: Rng>(model: &DensityModel, ordering: &OrderingSample, row: &[f64], rng: &mut R) -> PerturbationStats {
    let ix = &model.indexing;
    let enc = Array2::from_shape_vec((1, row.len()), row.to_vec()).unwrap();
    let (input, aux) = model.prepare_inputs(enc.view(), ordering);
    // Disconnected blocks must be cut by the masks alone, so their
    // (zeroed) inputs are refilled before the base pass.
    let mut base_input = input.clone();
    for blk in &ix.blocks {
        for j in blk.input_offset..blk.input_offset + blk.input_width {
            if base_input[[0, j]] == 0.0 && rng.random_bool(0.3) {
                base_input[[0, j]] = 1.0;
            }
        }
    }
    let base = model.forward_prepared(base_input.view(), aux.view(), ordering).unwrap();
    let base = base.output().row(0).to_owned();
    let targets: Vec<usize> = ordering.targets().collect();
    let mut stats = PerturbationStats::default();
    for (p, pblk) in ix.blocks.iter().enumerate() {
        let mut x = base_input.clone();
        for j in pblk.input_offset..pblk.input_offset + pblk.input_width {
            let z: f64 = StandardNormal.sample(rng);
            x[[0, j]] += 2.0 * z + 0.5;
        }
        let out = model.forward_prepared(x.view(), aux.view(), ordering).unwrap();
        let out = out.output().row(0);
        for &t in &targets {
            let tblk = &ix.blocks[t];
            let allowed = ordering.conditioned[p]
                || matches!((pblk.geo_level, tblk.geo_level), (Some(a), Some(b)) if a < b);
            let span = tblk.output_offset..tblk.output_offset + tblk.output_width();
            let moved = span.clone().any(|j| out[j].to_bits() != base[j].to_bits());
            stats.checks += 1;
            if moved && !allowed {
                stats.violations += 1;
            }
            if moved && allowed {
                stats.live += 1;
            }
        }
    }
    stats
}
