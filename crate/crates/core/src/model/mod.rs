//! The masked autoregressive density model over attribute blocks.

pub mod heads;
pub mod io;
pub mod masks;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

pub use heads::{HeadLayout, HeadParams, Observation};
pub use masks::{assign_hidden_degrees, build_masks, Block, BlockIndexing, OrderingSample};

use crate::dataset::{AttributeKind, AttributeSchema, Column, ContinuousStats, DatasetError, EncodedDataset};
use crate::nn::{Activation, ForwardCache, MaskedLayer, Network, NnError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("model format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    pub schema: AttributeSchema,
    pub indexing: BlockIndexing,
    pub network: Network,
    /// Indexed like the schema; `Some` for continuous attributes.
    pub stats: Vec<Option<ContinuousStats>>,
    pub n_total: u64,
    pub hidden_sizes: Vec<usize>,
}

impl DensityModel {
    /// Fresh model with Glorot-initialized weights. Also returns
    /// configuration warnings (e.g. layers narrower than the degree range).
    pub fn new<R: Rng + ?Sized>(
        schema: AttributeSchema,
        stats: Vec<Option<ContinuousStats>>,
        n_total: u64,
        hidden_sizes: &[usize],
        rng: &mut R,
    ) -> Result<(Self, Vec<String>), ModelError> {
        schema.validate()?;
        if stats.len() != schema.attributes.len() {
            return Err(ModelError::Argument("one stats slot per attribute expected".into()));
        }
        for (a, s) in schema.attributes.iter().zip(&stats) {
            if matches!(a.kind, AttributeKind::Continuous { .. }) != s.is_some() {
                return Err(ModelError::Argument(format!("stats do not match attribute {}", a.name)));
            }
        }
        let (indexing, warnings) = BlockIndexing::new(&schema, hidden_sizes)?;
        let aux = indexing.block_count();
        let mut layers = Vec::with_capacity(hidden_sizes.len() + 1);
        let mut prev = indexing.input_width;
        for &h in hidden_sizes {
            layers.push(MaskedLayer::glorot(prev + aux, h, Activation::Elu, rng));
            prev = h;
        }
        layers.push(MaskedLayer::glorot(prev + aux, indexing.output_width, Activation::Identity, rng));
        for (k, pair) in indexing.hidden_degrees.windows(2).enumerate() {
            let mask = masks::hidden_mask(&pair[0], &pair[1], aux);
            let layer = &mut layers[k + 1];
            layer.weights *= &mask;
            layer.mask = mask;
        }
        let network = Network::new(layers, aux)?;
        Ok((
            Self {
                schema,
                indexing,
                network,
                stats,
                n_total,
                hidden_sizes: hidden_sizes.to_vec(),
            },
            warnings,
        ))
    }

    pub fn block_count(&self) -> usize {
        self.indexing.block_count()
    }

    pub fn parameter_count(&self) -> usize {
        self.network
            .layers
            .iter()
            .map(|l| l.mask.iter().filter(|&&m| m != 0.0).count() + l.bias.len())
            .sum()
    }

    /// Ordering built from attribute names and a geo prefix depth.
    pub fn ordering(&self, conditioned: &[&str], geo_depth: u8) -> Result<OrderingSample, ModelError> {
        let mut flags = vec![false; self.schema.attributes.len()];
        for name in conditioned {
            let a = self
                .schema
                .index_of(name)
                .ok_or_else(|| ModelError::Argument(format!("unknown attribute {name:?}")))?;
            flags[a] = true;
        }
        OrderingSample::new(&self.indexing, &flags, geo_depth)
    }

    /// Copies `encoded` and zeroes the inputs of blocks the ordering
    /// disconnects, plus the presence bits per row.
    pub fn prepare_inputs(&self, encoded: ArrayView2<f64>, ordering: &OrderingSample) -> (Array2<f64>, Array2<f64>) {
        let mut input = encoded.to_owned();
        for (b, blk) in self.indexing.blocks.iter().enumerate() {
            if !ordering.input_connected(b) {
                input
                    .slice_mut(ndarray::s![.., blk.input_offset..blk.input_offset + blk.input_width])
                    .fill(0.0);
            }
        }
        let presence = Array1::from(ordering.presence());
        let aux = Array2::from_shape_fn((encoded.nrows(), presence.len()), |(_, j)| presence[j]);
        (input, aux)
    }

    /// Forward pass on already prepared inputs (no zeroing).
    pub fn forward_prepared(
        &self,
        input: ArrayView2<f64>,
        aux: ArrayView2<f64>,
        ordering: &OrderingSample,
    ) -> Result<ForwardCache, ModelError> {
        self.check_shapes(input.ncols(), ordering)?;
        let masks = build_masks(&self.indexing, ordering);
        Ok(self.network.forward_with_masks(input, aux, masks)?)
    }

    fn check_shapes(&self, width: usize, ordering: &OrderingSample) -> Result<(), ModelError> {
        if width != self.indexing.input_width {
            return Err(ModelError::Argument(format!(
                "encoded width {width} but model expects {}",
                self.indexing.input_width
            )));
        }
        if ordering.conditioned.len() != self.block_count() {
            return Err(ModelError::Argument("ordering belongs to a different model".into()));
        }
        Ok(())
    }

    /// Batched forward pass over encoded rows under one ordering.
    pub fn forward_batch(&self, encoded: ArrayView2<f64>, ordering: &OrderingSample) -> Result<ForwardCache, ModelError> {
        self.check_shapes(encoded.ncols(), ordering)?;
        let (input, aux) = self.prepare_inputs(encoded, ordering);
        self.forward_prepared(input.view(), aux.view(), ordering)
    }

    /// Head parameters of `block` from one row of network output.
    pub fn head(&self, output: ArrayView1<f64>, block: usize) -> HeadParams {
        let blk = &self.indexing.blocks[block];
        let raw: Vec<f64> = output
            .slice(ndarray::s![blk.output_offset..blk.output_offset + blk.output_width()])
            .to_vec();
        HeadParams::from_raw(blk.layout, &raw)
    }

    /// One encoded row under `ordering`: head parameters of every target block.
    pub fn forward(&self, encoded: &[f64], ordering: &OrderingSample) -> Result<Vec<(usize, HeadParams)>, ModelError> {
        let row = ArrayView2::from_shape((1, encoded.len()), encoded)
            .map_err(|e| ModelError::Argument(e.to_string()))?;
        let cache = self.forward_batch(row, ordering)?;
        let out = cache.output().row(0);
        Ok(ordering.targets().map(|b| (b, self.head(out, b))).collect())
    }

    /// Observed value of every block for dataset row `row`.
    pub fn observations(&self, data: &EncodedDataset, row: usize) -> Vec<Observation> {
        let mut obs = Vec::with_capacity(self.block_count());
        for (a, (spec, col)) in self.schema.attributes.iter().zip(&data.table.columns).enumerate() {
            match col {
                Column::Discrete(v) => obs.push(Observation::Category(v[row] as usize)),
                Column::Geo { cells, .. } => {
                    let levels = self.indexing.geo_levels() as u32;
                    for l in 1..=levels {
                        let digit = (cells[row] >> (2 * (levels - l))) & 3;
                        obs.push(Observation::Category(digit as usize));
                    }
                }
                Column::Continuous(v) => {
                    let x = v[row];
                    obs.push(match spec.kind {
                        AttributeKind::Continuous {
                            head: crate::dataset::HeadKind::Pareto { .. },
                        } => Observation::Value(x),
                        _ => Observation::Value(self.stats[a].expect("continuous stats").standardize(x)),
                    });
                }
            }
        }
        obs
    }

    /// Per-row sum of target-head NLLs and, if requested, the gradient of
    /// `Σ_rows weight · nll_row` with respect to the network output.
    pub fn target_nll(
        &self,
        output: ArrayView2<f64>,
        observations: &[Vec<Observation>],
        ordering: &OrderingSample,
        grad_weight: Option<f64>,
    ) -> Result<(Vec<f64>, Option<Array2<f64>>), ModelError> {
        if output.nrows() != observations.len() {
            return Err(ModelError::Argument("one observation list per output row expected".into()));
        }
        let targets: Vec<usize> = ordering.targets().collect();
        let mut grad = grad_weight.map(|_| Array2::zeros(output.dim()));
        let mut per_row = Vec::with_capacity(output.nrows());
        for (r, obs) in observations.iter().enumerate() {
            let mut total = 0.0;
            for &b in &targets {
                let head = self.head(output.row(r), b);
                match (&mut grad, grad_weight) {
                    (Some(g), Some(w)) => {
                        let (nll, gb) = head.nll_grad(obs[b])?;
                        total += nll;
                        let off = self.indexing.blocks[b].output_offset;
                        for (j, v) in gb.into_iter().enumerate() {
                            g[[r, off + j]] = w * v;
                        }
                    }
                    _ => total += head.nll(obs[b])?,
                }
            }
            per_row.push(total);
        }
        Ok((per_row, grad))
    }

    /// Rounds every weight and bias to f32 precision, as stored on disk.
    pub fn quantize_f32(&mut self) {
        for layer in &mut self.network.layers {
            layer.weights.mapv_inplace(|v| v as f32 as f64);
            layer.bias.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Continuous statistics of attribute `attr`, if continuous.
    pub fn stats_of(&self, attr: usize) -> Option<ContinuousStats> {
        self.stats.get(attr).copied().flatten()
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_row(model: &DensityModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut row = vec![0.0; model.indexing.input_width];
        for blk in &model.indexing.blocks {
            if blk.input_width == 1 {
                row[blk.input_offset] = rng.random_range(-2.0..2.0);
            } else {
                row[blk.input_offset + rng.random_range(0..blk.input_width)] = 1.0;
            }
        }
        row
    }

    #[test]
    fn zero_output_layer_gives_uniform_categoricals() {
        let mut m = small_model(3, &[16, 16], 1);
        let last = m.network.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
        let o = m.ordering(&[], 0).unwrap();
        let row = vec![0.0; m.indexing.input_width];
        for (b, head) in m.forward(&row, &o).unwrap() {
            if let Some(p) = head.probabilities() {
                let k = p.len() as f64;
                assert!(p.iter().all(|&v| (v - 1.0 / k).abs() < 1e-15), "block {b}");
            }
        }
    }

    #[test]
    fn non_conditioned_inputs_do_not_matter() {
        let m = small_model(3, &[24, 24], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let o = m.ordering(&["dow"], 1).unwrap();
        let row = random_row(&m, &mut rng);
        let base = m.forward(&row, &o).unwrap();
        // Change color (not conditioned) and the continuous input.
        let mut other = row.clone();
        other[..4].fill(0.0);
        other[3] = 1.0;
        let fare = m.indexing.blocks[m.indexing.attribute_block[3].unwrap()].input_offset;
        other[fare] += 1.5;
        let moved = m.forward(&other, &o).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn geo_target_ignores_own_and_finer_digits() {
        let m = small_model(4, &[32, 32], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let o = m.ordering(&["color"], 1).unwrap();
        let row = random_row(&m, &mut rng);
        let base = m.forward(&row, &o).unwrap();
        // Perturb level-3 digit: levels 2 and 3 must be unaffected, level 4 may change.
        let blk3 = m.indexing.blocks[m.indexing.geo_blocks[2]];
        let mut other = row.clone();
        let cur = (0..4).find(|&d| row[blk3.input_offset + d] == 1.0).unwrap();
        other[blk3.input_offset + cur] = 0.0;
        other[blk3.input_offset + (cur + 1) % 4] = 1.0;
        let moved = m.forward(&other, &o).unwrap();
        for ((b, h0), (_, h1)) in base.iter().zip(&moved) {
            let level = m.indexing.blocks[*b].geo_level;
            match level {
                Some(2) | Some(3) => assert_eq!(h0, h1),
                Some(4) => assert_ne!(h0, h1),
                _ => assert_eq!(h0, h1),
            }
        }
    }

    #[test]
    fn categorical_heads_are_normalized() {
        let m = small_model(3, &[16], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let o = m.ordering(&[], 0).unwrap();
        let row = random_row(&m, &mut rng);
        for (_, head) in m.forward(&row, &o).unwrap() {
            let p = head.probabilities().or_else(|| head.mixture_weights()).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hidden_masks_are_fixed_in_layers() {
        let m = small_model(3, &[16, 16, 8], 6);
        for (k, pair) in m.indexing.hidden_degrees.windows(2).enumerate() {
            let layer = &m.network.layers[k + 1];
            assert_eq!(layer.mask, masks::hidden_mask(&pair[0], &pair[1], m.block_count()));
            assert!(layer.weights.iter().zip(layer.mask.iter()).all(|(&w, &mk)| mk == 1.0 || w == 0.0));
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = small_model(2, &[8], 7);
        let o = m.ordering(&[], 0).unwrap();
        assert!(m.forward(&[0.0; 3], &o).is_err());
        assert!(m.ordering(&["nope"], 0).is_err());
    }
}
