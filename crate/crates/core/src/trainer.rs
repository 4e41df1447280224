//! Order-agnostic maximum-likelihood training.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AttributeKind, EncodedDataset, HeadKind};
use crate::model::{BlockIndexing, DensityModel, ModelError, Observation, OrderingSample};
use crate::nn::{adam_step, AdamState, NnError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub probe_orderings: usize,
    pub probe_rows: usize,
    pub min_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![386, 386],
            learning_rate: 1e-4,
            batch_size: 1024,
            max_epochs: 300,
            patience: 20,
            seed: 0,
            probe_orderings: 64,
            probe_rows: 50_000,
            min_improvement: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must be non-empty and positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        if self.probe_orderings == 0 || self.probe_rows == 0 {
            return bad("probe_orderings and probe_rows must be positive");
        }
        if self.min_improvement.is_nan() || self.min_improvement < 0.0 {
            return bad("min_improvement must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean normalized minibatch loss over the epoch.
    pub nll: f64,
    /// Normalized NLL on the fixed probe set.
    pub probe_nll: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_probe_nll: f64,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("unusable training data: {0}")]
    Data(String),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (learning rate {learning_rate}, conditioned blocks {conditioned:?}, geo depth {geo_depth}): {detail}"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        learning_rate: f64,
        conditioned: Vec<usize>,
        geo_depth: u8,
        /// Dataset row indices of the failing batch.
        rows: Vec<usize>,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Geo prefix depth uniform in `0..=L`, each non-geo attribute conditioned
/// with probability ½; fully conditioned draws are rejected.
pub fn sample_ordering<R: Rng + ?Sized>(indexing: &BlockIndexing, rng: &mut R) -> OrderingSample {
    let attrs = indexing.attribute_block.len();
    loop {
        let depth = rng.random_range(0..=indexing.geo_levels());
        let flags: Vec<bool> = (0..attrs)
            .map(|a| indexing.attribute_block[a].is_some() && rng.random_bool(0.5))
            .collect();
        let conditioned = flags.iter().filter(|&&f| f).count() + depth as usize;
        if conditioned < indexing.block_count() {
            return OrderingSample::new(indexing, &flags, depth).expect("valid draw");
        }
    }
}

/// `B / (B - |S|)`.
pub fn loss_weight(ordering: &OrderingSample) -> f64 {
    let b = ordering.conditioned.len() as f64;
    b / (b - ordering.conditioned_count() as f64)
}

/// Normalized loss of one batch: `B/(B-|S|)` times the mean over rows of
/// the summed target NLLs.
pub fn batch_loss(
    model: &DensityModel,
    encoded: &Array2<f64>,
    observations: &[Vec<Observation>],
    ordering: &OrderingSample,
) -> Result<f64, ModelError> {
    let cache = model.forward_batch(encoded.view(), ordering)?;
    let (per_row, _) = model.target_nll(cache.output().view(), observations, ordering, None)?;
    Ok(loss_weight(ordering) * per_row.iter().sum::<f64>() / per_row.len().max(1) as f64)
}

fn encode_rows(data: &EncodedDataset, model: &DensityModel, rows: &[usize]) -> (Array2<f64>, Vec<Vec<Observation>>) {
    let width = model.indexing.input_width;
    let mut encoded = Array2::zeros((rows.len(), width));
    let mut obs = Vec::with_capacity(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        data.encode_into(i, encoded.row_mut(r).as_slice_mut().expect("standard layout"));
        obs.push(model.observations(data, i));
    }
    (encoded, obs)
}

struct Optimizer {
    weights: Vec<AdamState>,
    biases: Vec<AdamState>,
}

impl Optimizer {
    fn new(model: &DensityModel, lr: f64) -> Self {
        Self {
            weights: model.network.layers.iter().map(|l| AdamState::new(l.weights.len(), lr)).collect(),
            biases: model.network.layers.iter().map(|l| AdamState::new(l.bias.len(), lr)).collect(),
        }
    }
}

/// One gradient step; returns the normalized batch loss before the update.
fn train_step(
    model: &mut DensityModel,
    opt: &mut Optimizer,
    encoded: &Array2<f64>,
    observations: &[Vec<Observation>],
    ordering: &OrderingSample,
) -> Result<f64, ModelError> {
    let rows = encoded.nrows() as f64;
    let weight = loss_weight(ordering);
    let cache = model.forward_batch(encoded.view(), ordering)?;
    let (per_row, d_out) = model.target_nll(cache.output().view(), observations, ordering, Some(weight / rows))?;
    let loss = weight * per_row.iter().sum::<f64>() / rows;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("training loss").into());
    }
    let grads = model.network.backward(&cache, d_out.expect("gradient requested").view())?;
    for (k, layer) in model.network.layers.iter_mut().enumerate() {
        adam_step(
            layer.weights.as_slice_mut().expect("standard layout"),
            grads.weights[k].as_slice().expect("standard layout"),
            &mut opt.weights[k],
        )?;
        adam_step(
            layer.bias.as_slice_mut().expect("standard layout"),
            grads.biases[k].as_slice().expect("standard layout"),
            &mut opt.biases[k],
        )?;
    }
    Ok(loss)
}

/// Fixed rows and orderings for the early-stopping signal. Probe ordering
/// `i` is evaluated on the probe rows at positions `≡ i (mod count)`.
struct ProbeSet {
    batches: Vec<(OrderingSample, Array2<f64>, Vec<Vec<Observation>>)>,
    rows: usize,
}

impl ProbeSet {
    fn new(data: &EncodedDataset, model: &DensityModel, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5052_4f42_4553_4554);
        let n = data.n_total();
        let mut rows: Vec<usize> = (0..n).collect();
        let take = config.probe_rows.min(n);
        rows.partial_shuffle(&mut rng, take);
        rows.truncate(take);
        let orderings: Vec<OrderingSample> = (0..config.probe_orderings)
            .map(|_| sample_ordering(&model.indexing, &mut rng))
            .collect();
        let mut batches = Vec::new();
        for (i, ordering) in orderings.into_iter().enumerate() {
            let mine: Vec<usize> = rows.iter().skip(i).step_by(config.probe_orderings).copied().collect();
            for chunk in mine.chunks(config.batch_size.max(256)) {
                let (enc, obs) = encode_rows(data, model, chunk);
                batches.push((ordering.clone(), enc, obs));
            }
        }
        Self { batches, rows: take }
    }

    fn evaluate(&self, model: &DensityModel) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for (ordering, enc, obs) in &self.batches {
            total += batch_loss(model, enc, obs, ordering)? * enc.nrows() as f64;
        }
        Ok(total / self.rows as f64)
    }
}

fn check_data(data: &EncodedDataset) -> Result<(), TrainError> {
    if data.n_total() == 0 {
        return Err(TrainError::Data("dataset is empty".into()));
    }
    for (a, spec) in data.schema.attributes.iter().enumerate() {
        if let AttributeKind::Continuous {
            head: HeadKind::Pareto { beta },
        } = spec.kind
        {
            if let Some(x) = data.table.continuous(a).iter().find(|&&x| x < beta) {
                return Err(TrainError::Data(format!(
                    "{}: value {x} below the pareto scale {beta}",
                    spec.name
                )));
            }
        }
    }
    Ok(())
}

/// Trains a fresh model and returns the snapshot with the best probe NLL.
/// `progress` is called after every epoch.
pub fn train(
    data: &EncodedDataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(DensityModel, TrainReport), TrainError> {
    config.validate()?;
    check_data(data)?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut model, warnings) = DensityModel::new(
        data.schema.clone(),
        data.stats.clone(),
        data.n_total() as u64,
        &config.hidden_sizes,
        &mut rng,
    )?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let probe = ProbeSet::new(data, &model, config);
    let mut opt = Optimizer::new(&model, config.learning_rate);
    let mut order: Vec<usize> = (0..data.n_total()).collect();

    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut reference = f64::INFINITY;
    let mut stale = 0;
    let mut stopped = config.max_epochs;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (batch, rows) in order.chunks(config.batch_size).enumerate() {
            let ordering = sample_ordering(&model.indexing, &mut rng);
            let (enc, obs) = encode_rows(data, &model, rows);
            let loss = train_step(&mut model, &mut opt, &enc, &obs, &ordering).map_err(|e| match e {
                ModelError::Nn(NnError::NonFinite(what)) => TrainError::NonFinite {
                    epoch,
                    batch,
                    learning_rate: config.learning_rate,
                    conditioned: ordering
                        .conditioned
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c)
                        .map(|(b, _)| b)
                        .collect(),
                    geo_depth: ordering.geo_depth,
                    rows: rows.to_vec(),
                    detail: what.to_string(),
                },
                other => other.into(),
            })?;
            sum += loss * rows.len() as f64;
        }
        let probe_nll = probe.evaluate(&model)?;
        let record = EpochRecord {
            epoch,
            nll: sum / data.n_total() as f64,
            probe_nll,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        progress(&record);
        epochs.push(record);
        if probe_nll < best.0 {
            best = (probe_nll, epoch, model.clone());
        }
        if probe_nll < reference - config.min_improvement {
            reference = probe_nll;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stopped = epoch;
                break;
            }
        }
    }
    let (best_probe_nll, best_epoch, model) = best;
    Ok((
        model,
        TrainReport {
            epochs,
            stopped_epoch: stopped,
            best_epoch,
            best_probe_nll,
            wall_time_s: started.elapsed().as_secs_f64(),
            warnings,
        },
    ))
}
