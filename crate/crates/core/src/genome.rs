//! Architecture genomes: a constrained grammar of convolution and max-pooling
//! layers, with validation, shape inference, random sampling, truncation, and a
//! JSON serialization that round-trips exactly.
//!
//! The grammar is a pure sequence (no branches). Convolution layers draw their
//! hyper-parameters from fixed ranges (kernel 3-11, stride 1-4, filters 64-512),
//! max-pooling kernels from 2-3 with stride equal to the kernel, and filter
//! counts must be non-decreasing across successive convolutions. A genome is
//! valid for a given input shape only if every layer's spatial output stays at
//! least 2x2.

use serde::{Deserialize, Serialize};

use crate::rng::SeedStream;

/// Convolution kernel range in pixels.
pub const CONV_KERNEL: (usize, usize) = (3, 11);
/// Convolution stride range.
pub const CONV_STRIDE: (usize, usize) = (1, 4);
/// Convolution filter-count range.
pub const CONV_FILTERS: (usize, usize) = (64, 512);
/// Max-pooling kernel range; pool stride equals the kernel.
pub const POOL_KERNEL: (usize, usize) = (2, 3);
/// Minimum spatial side at every layer output.
pub const MIN_SPATIAL: usize = 2;
/// Attempt budget for rejection sampling before giving up.
const SAMPLING_ATTEMPTS: usize = 1000;

/// Input tensor shape as (channels, height, width).
pub type InputShape = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    MaxPool,
}

/// One layer gene. `filters` is 0 for max-pooling layers (channel-preserving).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGene {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub filters: usize,
}

impl LayerGene {
    pub fn conv(kernel: usize, stride: usize, filters: usize) -> Self {
        Self { kind: LayerKind::Conv, kernel, stride, filters }
    }

    /// Non-overlapping pooling: stride equals kernel, filters sentinel 0.
    pub fn max_pool(kernel: usize) -> Self {
        Self { kind: LayerKind::MaxPool, kernel, stride: kernel, filters: 0 }
    }
}

/// Parent ids and the operator that produced a genome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub parents: Vec<u64>,
    pub operator: String,
}

/// An architecture genome: an ordered layer stack plus the index of the layer
/// whose (flattened) activations are read out as features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub id: u64,
    pub readout: usize,
    pub lineage: Option<Lineage>,
    pub layers: Vec<LayerGene>,
}

/// Per-layer output shapes for a genome applied to a concrete input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    /// (channels, height, width) after each layer.
    pub shapes: Vec<(usize, usize, usize)>,
    /// Flattened feature length at the readout layer.
    pub readout_len: usize,
}

/// A broken genome rule, naming the offending layer where one exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyGenome,
    KernelOutOfRange { layer: usize, kernel: usize },
    StrideOutOfRange { layer: usize, stride: usize },
    FiltersOutOfRange { layer: usize, filters: usize },
    PoolStrideMismatch { layer: usize },
    FiltersDecrease { layer: usize },
    ReadoutOutOfRange { readout: usize, depth: usize },
    SpatialCollapse { layer: usize, size: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::EmptyGenome => write!(f, "genome has no layers"),
            Violation::KernelOutOfRange { layer, kernel } => {
                write!(f, "layer {layer}: kernel {kernel} out of range")
            }
            Violation::StrideOutOfRange { layer, stride } => {
                write!(f, "layer {layer}: stride {stride} out of range")
            }
            Violation::FiltersOutOfRange { layer, filters } => {
                write!(f, "layer {layer}: filters {filters} out of range")
            }
            Violation::PoolStrideMismatch { layer } => {
                write!(f, "layer {layer}: pool stride must equal pool kernel")
            }
            Violation::FiltersDecrease { layer } => {
                write!(f, "layer {layer}: filter count decreases")
            }
            Violation::ReadoutOutOfRange { readout, depth } => {
                write!(f, "readout {readout} out of range for depth {depth}")
            }
            Violation::SpatialCollapse { layer, size } => {
                write!(f, "layer {layer}: spatial output {size} below {MIN_SPATIAL}")
            }
        }
    }
}

/// Outcome of validating a genome. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenomeError {
    #[error("sampling exhausted after {0} attempts; input shape too constrained")]
    SamplingExhausted(usize),
    #[error("layer index {index} out of range for depth {depth}")]
    IndexOutOfRange { index: usize, depth: usize },
    #[error("genome parse error: {0}")]
    Parse(String),
}

impl Genome {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Checks every genome invariant for the given input shape. Range and
    /// ordering rules are checked per layer; the spatial rule runs the shape
    /// arithmetic layer by layer.
    pub fn validate(&self, input_shape: InputShape) -> ValidationResult {
        let mut violations = Vec::new();
        if self.layers.is_empty() {
            violations.push(Violation::EmptyGenome);
            return ValidationResult { violations };
        }
        let mut prev_filters = 0usize;
        for (i, gene) in self.layers.iter().enumerate() {
            match gene.kind {
                LayerKind::Conv => {
                    if gene.kernel < CONV_KERNEL.0 || gene.kernel > CONV_KERNEL.1 {
                        violations.push(Violation::KernelOutOfRange { layer: i, kernel: gene.kernel });
                    }
                    if gene.stride < CONV_STRIDE.0 || gene.stride > CONV_STRIDE.1 {
                        violations.push(Violation::StrideOutOfRange { layer: i, stride: gene.stride });
                    }
                    if gene.filters < CONV_FILTERS.0 || gene.filters > CONV_FILTERS.1 {
                        violations.push(Violation::FiltersOutOfRange { layer: i, filters: gene.filters });
                    }
                    // Non-decreasing over Conv layers only; pooling preserves channels.
                    if gene.filters < prev_filters {
                        violations.push(Violation::FiltersDecrease { layer: i });
                    }
                    prev_filters = prev_filters.max(gene.filters);
                }
                LayerKind::MaxPool => {
                    if gene.kernel < POOL_KERNEL.0 || gene.kernel > POOL_KERNEL.1 {
                        violations.push(Violation::KernelOutOfRange { layer: i, kernel: gene.kernel });
                    }
                    if gene.stride != gene.kernel {
                        violations.push(Violation::PoolStrideMismatch { layer: i });
                    }
                }
            }
        }
        if self.readout >= self.layers.len() {
            violations.push(Violation::ReadoutOutOfRange { readout: self.readout, depth: self.layers.len() });
        }
        let trace = self.output_shape(input_shape);
        for (i, &(_, h, w)) in trace.shapes.iter().enumerate() {
            let side = h.min(w);
            if side < MIN_SPATIAL {
                violations.push(Violation::SpatialCollapse { layer: i, size: side });
            }
        }
        ValidationResult { violations }
    }

    /// Per-layer output shapes under valid (unpadded) convolution arithmetic:
    /// `out = floor((in - kernel) / stride) + 1`, zero once the kernel no
    /// longer fits. Collapse is reported by `validate`, not here.
    pub fn output_shape(&self, input_shape: InputShape) -> ShapeTrace {
        let (mut c, mut h, mut w) = input_shape;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for gene in &self.layers {
            h = slide(h, gene.kernel, gene.stride);
            w = slide(w, gene.kernel, gene.stride);
            if gene.kind == LayerKind::Conv {
                c = gene.filters;
            }
            shapes.push((c, h, w));
        }
        let readout_len = shapes
            .get(self.readout)
            .map(|&(c, h, w)| c * h * w)
            .unwrap_or(0);
        ShapeTrace { shapes, readout_len }
    }

    /// Keeps the layer prefix `[0..=layer_index]` and reads out at its end.
    /// Id and lineage are untouched, so truncating at the current readout is
    /// the identity.
    pub fn truncate(&self, layer_index: usize) -> Result<Genome, GenomeError> {
        if layer_index >= self.layers.len() {
            return Err(GenomeError::IndexOutOfRange { index: layer_index, depth: self.layers.len() });
        }
        Ok(Genome {
            id: self.id,
            readout: layer_index,
            lineage: self.lineage.clone(),
            layers: self.layers[..=layer_index].to_vec(),
        })
    }

    /// Trainable parameter count: per convolution, `filters * in_channels *
    /// kernel^2` weights plus `filters` biases (counted even though biases are
    /// initialized to zero). Pooling contributes nothing.
    pub fn param_count(&self, input_shape: InputShape) -> u64 {
        let mut channels = input_shape.0 as u64;
        let mut total = 0u64;
        for gene in &self.layers {
            if gene.kind == LayerKind::Conv {
                let f = gene.filters as u64;
                let k = gene.kernel as u64;
                total += f * channels * k * k + f;
                channels = f;
            }
        }
        total
    }

    /// Serializes to the genome text format (pretty JSON, stable field order).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genome serialization cannot fail")
    }

    /// Parses the genome text format and checks the static per-layer ranges.
    /// Shape-dependent rules are left to `validate`.
    pub fn from_json(text: &str) -> Result<Genome, GenomeError> {
        let genome: Genome =
            serde_json::from_str(text).map_err(|e| GenomeError::Parse(e.to_string()))?;
        for (i, gene) in genome.layers.iter().enumerate() {
            let (klo, khi) = match gene.kind {
                LayerKind::Conv => CONV_KERNEL,
                LayerKind::MaxPool => POOL_KERNEL,
            };
            if gene.kernel < klo || gene.kernel > khi {
                return Err(GenomeError::Parse(format!("layer {i}: kernel {} out of range [{klo}, {khi}]", gene.kernel)));
            }
            match gene.kind {
                LayerKind::Conv => {
                    if gene.stride < CONV_STRIDE.0 || gene.stride > CONV_STRIDE.1 {
                        return Err(GenomeError::Parse(format!("layer {i}: stride {} out of range", gene.stride)));
                    }
                    if gene.filters < CONV_FILTERS.0 || gene.filters > CONV_FILTERS.1 {
                        return Err(GenomeError::Parse(format!("layer {i}: filters {} out of range [{}, {}]", gene.filters, CONV_FILTERS.0, CONV_FILTERS.1)));
                    }
                }
                LayerKind::MaxPool => {
                    if gene.stride != gene.kernel {
                        return Err(GenomeError::Parse(format!("layer {i}: pool stride {} must equal kernel {}", gene.stride, gene.kernel)));
                    }
                }
            }
        }
        Ok(genome)
    }
}

#[inline]
fn slide(len: usize, kernel: usize, stride: usize) -> usize {
    if len < kernel {
        0
    } else {
        (len - kernel) / stride + 1
    }
}

/// Samples one layer gene that keeps the running spatial side at least
/// `MIN_SPATIAL`, respecting the filter progression. Returns the gene and the
/// new (side, channels) state, or None if no layer fits.
fn sample_layer(
    rng: &mut SeedStream,
    side: usize,
    min_filters: usize,
) -> Option<(LayerGene, usize)> {
    for _ in 0..50 {
        let conv = rng.chance(0.7);
        let gene = if conv {
            let kernel = rng.int_in(CONV_KERNEL.0 as u64, CONV_KERNEL.1 as u64) as usize;
            let stride = rng.int_in(CONV_STRIDE.0 as u64, CONV_STRIDE.1 as u64) as usize;
            // Resample filters upward from the running maximum to keep the
            // progression monotone.
            let filters = rng.int_in(min_filters.max(CONV_FILTERS.0) as u64, CONV_FILTERS.1 as u64) as usize;
            LayerGene::conv(kernel, stride, filters)
        } else {
            let kernel = rng.int_in(POOL_KERNEL.0 as u64, POOL_KERNEL.1 as u64) as usize;
            LayerGene::max_pool(kernel)
        };
        let out = slide(side, gene.kernel, gene.stride);
        if out >= MIN_SPATIAL {
            return Some((gene, out));
        }
    }
    None
}

/// Samples a random valid genome with depth drawn uniformly from
/// `depth_range` (inclusive). Rejection-based with per-layer repair; the
/// readout is the last layer. Fails with `SamplingExhausted` when the input
/// shape cannot support the requested depths.
pub fn random_genome(
    rng: &mut SeedStream,
    depth_range: (usize, usize),
    input_shape: InputShape,
) -> Result<Genome, GenomeError> {
    assert!(depth_range.0 >= 1 && depth_range.0 <= depth_range.1);
    for _ in 0..SAMPLING_ATTEMPTS {
        let depth = rng.int_in(depth_range.0 as u64, depth_range.1 as u64) as usize;
        let mut layers = Vec::with_capacity(depth);
        let mut side = input_shape.1.min(input_shape.2);
        let mut min_filters = 0usize;
        let mut ok = true;
        for _ in 0..depth {
            match sample_layer(rng, side, min_filters) {
                Some((gene, out)) => {
                    side = out;
                    if gene.kind == LayerKind::Conv {
                        min_filters = min_filters.max(gene.filters);
                    }
                    layers.push(gene);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let genome = Genome {
            id: rng.next_u64(),
            readout: layers.len() - 1,
            lineage: None,
            layers,
        };
        if genome.validate(input_shape).is_ok() {
            return Ok(genome);
        }
    }
    Err(GenomeError::SamplingExhausted(SAMPLING_ATTEMPTS))
}
