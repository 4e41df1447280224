//! Degree bookkeeping and autoregressive mask construction.
//!
//! Every attribute is one block, except the geo attribute which becomes
//! one block per level (coarse to fine). An [`OrderingSample`] splits the
//! blocks into a conditioning set `S` (the geo part of `S` is always a
//! prefix of levels) and targets. Degrees then follow the usual rules:
//!
//! * input block `b` → hidden `h` iff `degree(h) >= in_degree(b)`
//! * hidden `h1` → hidden `h2` iff `degree(h2) >= degree(h1)`
//! * hidden `h` → output block `b` iff `out_degree(b) > degree(h)`
//!
//! `S` blocks take degrees `1..=|S|` in block order. Non-geo targets all
//! read from degree `|S| + 1`; their inputs get [`PLACEHOLDER_HI`] and are
//! disconnected. Geo target levels form a chain: level `d + j` (for geo
//! prefix depth `d`) has input and output degree `|S| + j`, so it sees `S`
//! plus the coarser target levels. Outputs of `S` blocks get
//! [`PLACEHOLDER_LO`] and read nothing but bias and presence bits.
//!
//! The presence bits (one per block, 1 for blocks in `S`) are wired into
//! every layer without masking.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::heads::HeadLayout;
use super::ModelError;
use crate::dataset::{AttributeKind, AttributeSchema, HeadKind};

/// Input degree that connects to nothing; output degree that reads everything.
pub const PLACEHOLDER_HI: u32 = u32::MAX;
/// Output degree that reads no hidden unit.
pub const PLACEHOLDER_LO: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attribute: usize,
    /// 1-based level for geo blocks.
    pub geo_level: Option<u8>,
    pub input_offset: usize,
    pub input_width: usize,
    pub output_offset: usize,
    pub layout: HeadLayout,
}

impl Block {
    pub fn output_width(&self) -> usize {
        self.layout.width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockIndexing {
    pub blocks: Vec<Block>,
    pub hidden_degrees: Vec<Vec<u32>>,
    pub max_degree: u32,
    /// Block ids of geo levels 1..=L.
    pub geo_blocks: Vec<usize>,
    /// Block id of each non-geo attribute (`None` for the geo attribute).
    pub attribute_block: Vec<Option<usize>>,
    pub input_width: usize,
    pub output_width: usize,
}

pub fn head_layout(kind: &AttributeKind) -> HeadLayout {
    match kind {
        AttributeKind::Categorical { categories } => HeadLayout::Categorical(categories.len()),
        AttributeKind::Datetime { field } => HeadLayout::Categorical(field.cardinality()),
        AttributeKind::Geo { .. } => HeadLayout::Categorical(4),
        AttributeKind::Continuous { head } => match head {
            HeadKind::Gaussian { components } => HeadLayout::Mixture(*components),
            HeadKind::Lognormal => HeadLayout::Mixture(1),
            HeadKind::Pareto { beta } => HeadLayout::Pareto(*beta),
        },
    }
}

impl BlockIndexing {
    /// Lays out blocks in schema order and assigns hidden degrees.
    /// Returns configuration warnings alongside.
    pub fn new(schema: &AttributeSchema, hidden_sizes: &[usize]) -> Result<(Self, Vec<String>), ModelError> {
        if hidden_sizes.is_empty() || hidden_sizes.contains(&0) {
            return Err(ModelError::Argument("need at least one non-empty hidden layer".into()));
        }
        let mut blocks = Vec::new();
        let mut geo_blocks = Vec::new();
        let mut attribute_block = Vec::new();
        let (mut in_off, mut out_off) = (0, 0);
        for (a, spec) in schema.attributes.iter().enumerate() {
            let layout = head_layout(&spec.kind);
            match spec.kind {
                AttributeKind::Geo { max_level } => {
                    attribute_block.push(None);
                    for level in 1..=max_level {
                        geo_blocks.push(blocks.len());
                        blocks.push(Block {
                            attribute: a,
                            geo_level: Some(level),
                            input_offset: in_off,
                            input_width: 4,
                            output_offset: out_off,
                            layout,
                        });
                        in_off += 4;
                        out_off += 4;
                    }
                }
                _ => {
                    attribute_block.push(Some(blocks.len()));
                    let width = spec.input_width();
                    blocks.push(Block {
                        attribute: a,
                        geo_level: None,
                        input_offset: in_off,
                        input_width: width,
                        output_offset: out_off,
                        layout,
                    });
                    in_off += width;
                    out_off += layout.width();
                }
            }
        }
        let max_degree = (blocks.len() as u32).saturating_sub(1).max(1);
        let (hidden_degrees, warnings) = assign_hidden_degrees(hidden_sizes, max_degree)?;
        Ok((
            Self {
                blocks,
                hidden_degrees,
                max_degree,
                geo_blocks,
                attribute_block,
                input_width: in_off,
                output_width: out_off,
            },
            warnings,
        ))
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn geo_levels(&self) -> u8 {
        self.geo_blocks.len() as u8
    }

    /// Block owning each input column.
    pub fn input_block_of(&self) -> Vec<usize> {
        let mut v = vec![0; self.input_width];
        for (b, blk) in self.blocks.iter().enumerate() {
            v[blk.input_offset..blk.input_offset + blk.input_width].fill(b);
        }
        v
    }

    /// Block owning each output column.
    pub fn output_block_of(&self) -> Vec<usize> {
        let mut v = vec![0; self.output_width];
        for (b, blk) in self.blocks.iter().enumerate() {
            v[blk.output_offset..blk.output_offset + blk.output_width()].fill(b);
        }
        v
    }
}

/// Per layer, neuron counts with degree `i` proportional to `i` for
/// `i = 1..=max_degree`, rounded by largest remainder; neurons of equal
/// degree are contiguous.
pub fn assign_hidden_degrees(layer_sizes: &[usize], max_degree: u32) -> Result<(Vec<Vec<u32>>, Vec<String>), ModelError> {
    if max_degree == 0 {
        return Err(ModelError::Argument("max_degree must be at least 1".into()));
    }
    let mut warnings = Vec::new();
    let degrees = layer_sizes
        .iter()
        .enumerate()
        .map(|(layer, &size)| {
            if size < max_degree as usize {
                warnings.push(format!(
                    "hidden layer {layer} has {size} neurons for {max_degree} degrees; some degrees stay empty"
                ));
            }
            let counts = proportional_counts(size, max_degree);
            counts
                .iter()
                .enumerate()
                .flat_map(|(i, &c)| std::iter::repeat_n(i as u32 + 1, c))
                .collect()
        })
        .collect();
    Ok((degrees, warnings))
}

fn proportional_counts(size: usize, max_degree: u32) -> Vec<usize> {
    let total: u64 = (1..=max_degree as u64).sum();
    // Exact integer quotas: size * i / total, remainder size * i % total.
    let mut counts: Vec<usize> = Vec::with_capacity(max_degree as usize);
    let mut remainders: Vec<(u64, u32)> = Vec::with_capacity(max_degree as usize);
    for i in 1..=max_degree as u64 {
        let q = size as u64 * i;
        counts.push((q / total) as usize);
        remainders.push((q % total, i as u32));
    }
    let assigned: usize = counts.iter().sum();
    // Largest remainder first; ties go to the higher degree.
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)));
    for &(_, i) in remainders.iter().take(size - assigned) {
        counts[i as usize - 1] += 1;
    }
    counts
}

/// One conditioning/target split with its degrees.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrderingSample {
    pub conditioned: Vec<bool>,
    pub geo_depth: u8,
    pub input_degree: Vec<u32>,
    pub output_degree: Vec<u32>,
}

impl OrderingSample {
    /// `attribute_conditioned` is indexed by schema attribute; the geo
    /// attribute's entry is ignored in favour of `geo_depth`.
    pub fn new(indexing: &BlockIndexing, attribute_conditioned: &[bool], geo_depth: u8) -> Result<Self, ModelError> {
        if attribute_conditioned.len() != indexing.attribute_block.len() {
            return Err(ModelError::Argument(format!(
                "{} conditioning flags for {} attributes",
                attribute_conditioned.len(),
                indexing.attribute_block.len()
            )));
        }
        if geo_depth > indexing.geo_levels() {
            return Err(ModelError::Argument(format!(
                "geo depth {geo_depth} beyond {} levels",
                indexing.geo_levels()
            )));
        }
        let n = indexing.block_count();
        let mut conditioned = vec![false; n];
        for (a, blk) in indexing.attribute_block.iter().enumerate() {
            if let Some(b) = blk {
                conditioned[*b] = attribute_conditioned[a];
            }
        }
        for &b in &indexing.geo_blocks[..geo_depth as usize] {
            conditioned[b] = true;
        }
        Self::from_conditioned(indexing, conditioned, geo_depth)
    }

    fn from_conditioned(indexing: &BlockIndexing, conditioned: Vec<bool>, geo_depth: u8) -> Result<Self, ModelError> {
        let n = indexing.block_count();
        let s_count = conditioned.iter().filter(|&&c| c).count() as u32;
        if s_count as usize == n {
            return Err(ModelError::Argument("every block is conditioned; nothing to predict".into()));
        }
        let mut input_degree = vec![PLACEHOLDER_HI; n];
        let mut output_degree = vec![PLACEHOLDER_LO; n];
        let mut next = 1;
        for b in 0..n {
            if conditioned[b] {
                input_degree[b] = next;
                next += 1;
            } else {
                output_degree[b] = s_count + 1;
            }
        }
        for (j, &b) in indexing.geo_blocks[geo_depth as usize..].iter().enumerate() {
            let d = s_count + 1 + j as u32;
            input_degree[b] = d;
            output_degree[b] = d;
        }
        Ok(Self {
            conditioned,
            geo_depth,
            input_degree,
            output_degree,
        })
    }

    pub fn conditioned_count(&self) -> usize {
        self.conditioned.iter().filter(|&&c| c).count()
    }

    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.conditioned.iter().enumerate().filter(|(_, &c)| !c).map(|(b, _)| b)
    }

    pub fn is_target(&self, block: usize) -> bool {
        !self.conditioned[block]
    }

    /// Whether the input block feeds any hidden unit (S blocks and the geo
    /// target chain). Other inputs are zeroed before the pass.
    pub fn input_connected(&self, block: usize) -> bool {
        self.input_degree[block] != PLACEHOLDER_HI
    }

    /// Presence bits, one per block.
    pub fn presence(&self) -> Vec<f64> {
        self.conditioned.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }
}

/// Masks for `[input → hidden, hidden → hidden ..., hidden → output]`.
/// Each layer's columns are the previous layer's units followed by one
/// presence bit per block (always connected).
pub fn build_masks(indexing: &BlockIndexing, ordering: &OrderingSample) -> Vec<Array2<f64>> {
    let presence = indexing.block_count();
    let mut masks = Vec::with_capacity(indexing.hidden_degrees.len() + 1);
    let input_block = indexing.input_block_of();

    let first = &indexing.hidden_degrees[0];
    let mut m = Array2::zeros((first.len(), indexing.input_width + presence));
    for (h, &deg) in first.iter().enumerate() {
        for (f, &b) in input_block.iter().enumerate() {
            let din = ordering.input_degree[b];
            if din != PLACEHOLDER_HI && deg >= din {
                m[[h, f]] = 1.0;
            }
        }
        for p in 0..presence {
            m[[h, indexing.input_width + p]] = 1.0;
        }
    }
    masks.push(m);

    for pair in indexing.hidden_degrees.windows(2) {
        masks.push(hidden_mask(&pair[0], &pair[1], presence));
    }

    let last = indexing.hidden_degrees.last().expect("at least one hidden layer");
    let output_block = indexing.output_block_of();
    let mut m = Array2::zeros((indexing.output_width, last.len() + presence));
    for (o, &b) in output_block.iter().enumerate() {
        let dout = ordering.output_degree[b];
        for (h, &deg) in last.iter().enumerate() {
            if dout > deg {
                m[[o, h]] = 1.0;
            }
        }
        for p in 0..presence {
            m[[o, last.len() + p]] = 1.0;
        }
    }
    masks.push(m);
    masks
}

/// Ordering-independent mask between consecutive hidden layers.
pub fn hidden_mask(from: &[u32], to: &[u32], presence: usize) -> Array2<f64> {
    let mut m = Array2::zeros((to.len(), from.len() + presence));
    for (h2, &d2) in to.iter().enumerate() {
        for (h1, &d1) in from.iter().enumerate() {
            if d2 >= d1 {
                m[[h2, h1]] = 1.0;
            }
        }
        for p in 0..presence {
            m[[h2, from.len() + p]] = 1.0;
        }
    }
    m
}
