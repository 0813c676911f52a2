//! Deterministic random-weight networks: Kaiming-uniform initialization and
//! batched forward passes that produce flattened per-layer feature matrices.
//!
//! Everything here is a pure function of (genome, seed, stimuli). Weight
//! streams are derived per layer with [`crate::rng::stream_seed`], so the same
//! inputs give bit-identical outputs no matter how evaluation is batched or
//! parallelized.

use ndarray::{Array2, Array4, ArrayView4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::genome::{Genome, LayerKind};
use crate::rng::{stream_seed, SeedStream};

/// Rectifier gain squared; Kaiming bound is `sqrt(2) * sqrt(3 / fan_in)`.
const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Activation applied after every convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// No nonlinearity; for ablation runs.
    None,
}

/// Weights for one convolution layer, laid out (filters, in_channels, k, k).
#[derive(Debug, Clone)]
pub struct ConvWeights {
    pub weights: Array4<f32>,
    /// Always zero-initialized; kept as data so forward stays general.
    pub bias: Vec<f32>,
}

/// Per-layer random weights deterministically derived from a seed. Pooling
/// layers hold no weights.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub genome_id: u64,
    pub seed: u64,
    pub layers: Vec<Option<ConvWeights>>,
}

/// Flattened activations at one layer: rows are stimuli, columns the
/// (channel, row, col) raster of the layer output.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub genome_id: u64,
    pub seed: u64,
    pub layer: usize,
    pub data: Array2<f32>,
}

#[derive(Debug, thiserror::Error)]
pub enum RandnetError {
    #[error("requested layer {layer} exceeds genome depth {depth}")]
    LayerOutOfRange { layer: usize, depth: usize },
    #[error("stimulus shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch { got: (usize, usize, usize), expected: (usize, usize, usize) },
    #[error("layer {layer} output collapses below 1x1 for this input")]
    SpatialUnderflow { layer: usize },
}

/// Kaiming-uniform bound for a convolution with the given fan-in.
#[inline]
pub fn kaiming_bound(fan_in: usize) -> f64 {
    RELU_GAIN * (3.0 / fan_in as f64).sqrt()
}

/// Draws Kaiming-uniform weights for every convolution layer of `genome`,
/// given the stimulus channel count. Each layer uses an independent stream
/// seeded by `stream_seed(seed, genome.id, layer_index, 0)`; entries are drawn
/// in (filter, in_channel, row, col) order. Biases are exactly zero.
pub fn init_weights(genome: &Genome, seed: u64, input_channels: usize) -> WeightSet {
    let mut channels = input_channels;
    let mut layers = Vec::with_capacity(genome.depth());
    for (index, gene) in genome.layers.iter().enumerate() {
        match gene.kind {
            LayerKind::Conv => {
                let fan_in = channels * gene.kernel * gene.kernel;
                let bound = kaiming_bound(fan_in);
                let mut stream = SeedStream::new(stream_seed(seed, genome.id, index as u64, 0));
                let mut weights =
                    Array4::<f32>::zeros((gene.filters, channels, gene.kernel, gene.kernel));
                for w in weights.iter_mut() {
                    *w = stream.uniform(-bound, bound) as f32;
                }
                let bias = vec![0.0f32; gene.filters];
                layers.push(Some(ConvWeights { weights, bias }));
                channels = gene.filters;
            }
            LayerKind::MaxPool => layers.push(None),
        }
    }
    WeightSet { genome_id: genome.id, seed, layers }
}

#[inline]
fn slide(len: usize, kernel: usize, stride: usize) -> usize {
    if len < kernel {
        0
    } else {
        (len - kernel) / stride + 1
    }
}

/// Applies one convolution layer to a batch. Accumulation is in f64 via an
/// im2col matrix product; outputs are stored as f32 after bias and activation.
fn conv_layer(
    input: ArrayView4<f32>,
    conv: &ConvWeights,
    stride: usize,
    activation: Activation,
) -> Result<Array4<f32>, RandnetError> {
    let (n, in_c, in_h, in_w) = input.dim();
    let (filters, w_c, k, _) = conv.weights.dim();
    debug_assert_eq!(in_c, w_c);
    let out_h = slide(in_h, k, stride);
    let out_w = slide(in_w, k, stride);
    if out_h == 0 || out_w == 0 {
        return Err(RandnetError::SpatialUnderflow { layer: usize::MAX });
    }
    let fan = in_c * k * k;
    let out_pix = out_h * out_w;

    // Weight matrix (fan, filters) in f64, column order (in_channel, row, col)
    // matching the im2col layout.
    let mut wmat = Array2::<f64>::zeros((fan, filters));
    for f in 0..filters {
        let mut row = 0usize;
        for ic in 0..in_c {
            for kr in 0..k {
                for kc in 0..k {
                    wmat[[row, f]] = conv.weights[[f, ic, kr, kc]] as f64;
                    row += 1;
                }
            }
        }
    }

    let mut output = Array4::<f32>::zeros((n, filters, out_h, out_w));

    // Chunk images so the im2col buffer stays around 16 MB; chunking depends
    // only on shapes, so results are independent of thread count.
    let chunk = (16_000_000 / (8 * out_pix * fan)).clamp(1, 64);
    let input_chunks: Vec<_> = input.axis_chunks_iter(Axis(0), chunk).collect();
    let output_chunks: Vec<_> = output.axis_chunks_iter_mut(Axis(0), chunk).collect();

    input_chunks
        .into_par_iter()
        .zip(output_chunks)
        .for_each(|(inp, mut out)| {
            let m = inp.dim().0;
            let mut patches = Array2::<f64>::zeros((m * out_pix, fan));
            for img in 0..m {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let row = img * out_pix + oy * out_w + ox;
                        let mut col = 0usize;
                        for ic in 0..in_c {
                            for kr in 0..k {
                                let iy = oy * stride + kr;
                                let ix0 = ox * stride;
                                for kc in 0..k {
                                    patches[[row, col]] = inp[[img, ic, iy, ix0 + kc]] as f64;
                                    col += 1;
                                }
                            }
                        }
                    }
                }
            }
            let product = patches.dot(&wmat); // (m*out_pix, filters) f64
            for img in 0..m {
                for f in 0..filters {
                    let b = conv.bias[f] as f64;
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let mut v = product[[img * out_pix + oy * out_w + ox, f]] + b;
                            if activation == Activation::Relu && v < 0.0 {
                                v = 0.0;
                            }
                            out[[img, f, oy, ox]] = v as f32;
                        }
                    }
                }
            }
        });

    Ok(output)
}

/// Max over non-overlapping windows (stride equals kernel).
fn pool_layer(input: ArrayView4<f32>, kernel: usize) -> Result<Array4<f32>, RandnetError> {
    let (n, c, in_h, in_w) = input.dim();
    let out_h = slide(in_h, kernel, kernel);
    let out_w = slide(in_w, kernel, kernel);
    if out_h == 0 || out_w == 0 {
        return Err(RandnetError::SpatialUnderflow { layer: usize::MAX });
    }
    let mut output = Array4::<f32>::zeros((n, c, out_h, out_w));
    let input_chunks: Vec<_> = input.axis_chunks_iter(Axis(0), 16).collect();
    let output_chunks: Vec<_> = output.axis_chunks_iter_mut(Axis(0), 16).collect();
    input_chunks
        .into_par_iter()
        .zip(output_chunks)
        .for_each(|(inp, mut out)| {
            let m = inp.dim().0;
            for img in 0..m {
                for ch in 0..c {
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let mut best = f32::NEG_INFINITY;
                            for kr in 0..kernel {
                                for kc in 0..kernel {
                                    let v = inp[[img, ch, oy * kernel + kr, ox * kernel + kc]];
                                    if v > best {
                                        best = v;
                                    }
                                }
                            }
                            out[[img, ch, oy, ox]] = best;
                        }
                    }
                }
            }
        });
    Ok(output)
}

fn flatten_features(
    genome_id: u64,
    seed: u64,
    layer: usize,
    activations: &Array4<f32>,
) -> FeatureMatrix {
    let (n, c, h, w) = activations.dim();
    let data = activations
        .to_shape((n, c * h * w))
        .expect("activation layout is contiguous")
        .to_owned();
    FeatureMatrix { genome_id, seed, layer, data }
}

/// Runs the forward pass layer by layer, invoking `visit` with the flattened
/// feature matrix of every layer index in `layers` as it is produced. Only the
/// rolling activation tensor is kept in memory.
pub fn forward_each<F>(
    genome: &Genome,
    weights: &WeightSet,
    stimuli: &Array4<f32>,
    layers: &[usize],
    activation: Activation,
    mut visit: F,
) -> Result<(), RandnetError>
where
    F: FnMut(FeatureMatrix),
{
    let depth = genome.depth();
    if let Some(&bad) = layers.iter().find(|&&l| l >= depth) {
        return Err(RandnetError::LayerOutOfRange { layer: bad, depth });
    }
    let Some(&max_layer) = layers.iter().max() else {
        return Ok(());
    };
    let mut current = stimuli.clone();
    for index in 0..=max_layer {
        let gene = &genome.layers[index];
        let next = match gene.kind {
            LayerKind::Conv => {
                let conv = weights.layers[index]
                    .as_ref()
                    .expect("conv layer carries weights");
                let expected = (conv.weights.dim().1, current.dim().1);
                if expected.0 != expected.1 {
                    return Err(RandnetError::ShapeMismatch {
                        got: (current.dim().1, current.dim().2, current.dim().3),
                        expected: (expected.0, current.dim().2, current.dim().3),
                    });
                }
                conv_layer(current.view(), conv, gene.stride, activation)
            }
            LayerKind::MaxPool => pool_layer(current.view(), gene.kernel),
        }
        .map_err(|e| match e {
            RandnetError::SpatialUnderflow { .. } => RandnetError::SpatialUnderflow { layer: index },
            other => other,
        })?;
        current = next;
        if layers.contains(&index) {
            visit(flatten_features(weights.genome_id, weights.seed, index, &current));
        }
    }
    Ok(())
}

/// Forward pass returning the flattened feature matrix for each requested
/// layer index, keyed by layer.
pub fn forward(
    genome: &Genome,
    weights: &WeightSet,
    stimuli: &Array4<f32>,
    layers: &[usize],
    activation: Activation,
) -> Result<std::collections::BTreeMap<usize, FeatureMatrix>, RandnetError> {
    let mut out = std::collections::BTreeMap::new();
    forward_each(genome, weights, stimuli, layers, activation, |fm| {
        out.insert(fm.layer, fm);
    })?;
    Ok(out)
}

/// Features at a single layer for (genome, seed, stimuli): weight
/// initialization plus forward pass in one call.
pub fn extract_features(
    genome: &Genome,
    seed: u64,
    stimuli: &Array4<f32>,
    layer: usize,
    activation: Activation,
) -> Result<FeatureMatrix, RandnetError> {
    let weights = init_weights(genome, seed, stimuli.dim().1);
    let mut map = forward(genome, &weights, stimuli, &[layer], activation)?;
    Ok(map.remove(&layer).expect("requested layer was computed"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{random_genome, Genome, LayerGene};
    use crate::rng::SeedStream;

    fn single_conv(kernel: usize, stride: usize, filters: usize) -> Genome {
        Genome {
            id: 7,
            readout: 0,
            lineage: None,
            layers: vec![LayerGene::conv(kernel, stride, filters)],
        }
    }

    #[test]
    fn init_is_deterministic() {
        let genome = random_genome(&mut SeedStream::new(1), (2, 4), (3, 16, 16)).unwrap();
        let a = init_weights(&genome, 99, 3);
        let b = init_weights(&genome, 99, 3);
        for (x, y) in a.layers.iter().zip(&b.layers) {
            match (x, y) {
                (Some(cx), Some(cy)) => assert_eq!(cx.weights, cy.weights),
                (None, None) => {}
                _ => panic!("layer kind mismatch"),
            }
        }
    }

    #[test]
    fn biases_are_zero() {
        let genome = random_genome(&mut SeedStream::new(2), (2, 4), (3, 16, 16)).unwrap();
        let ws = init_weights(&genome, 5, 3);
        for conv in ws.layers.iter().flatten() {
            assert!(conv.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn weights_respect_kaiming_bound_and_moments() {
        // One wide layer gives over a million draws: 512 filters x 3200 fan.
        let genome = single_conv(5, 1, 512);
        let ws = init_weights(&genome, 31, 128);
        let conv = ws.layers[0].as_ref().unwrap();
        let fan_in = 128 * 5 * 5;
        let bound = kaiming_bound(fan_in);
        let n = conv.weights.len();
        assert!(n > 1_000_000, "need ~1e6 draws, got {n}");
        let mut sum = 0.0f64;
        let mut max_abs = 0.0f64;
        for &w in conv.weights.iter() {
            let w = w as f64;
            sum += w;
            max_abs = max_abs.max(w.abs());
        }
        assert!(max_abs <= bound * (1.0 + 1e-6), "max |w| {max_abs} > bound {bound}");
        // Uniform on [-b, b]: var = b^2/3, so the mean of n draws has
        // sigma = b / sqrt(3 n).
        let sigma_mean = bound / (3.0 * n as f64).sqrt();
        let mean = sum / n as f64;
        assert!(mean.abs() < 3.0 * sigma_mean, "mean {mean} outside 3 sigma {sigma_mean}");
    }

    #[test]
    fn constant_input_unit_kernel_sum() {
        // All-ones 4x4 input, 3x3 kernel of 1/9 everywhere: each output
        // activation is exactly 1 before and after ReLU.
        let genome = single_conv(3, 1, 64);
        let mut weights = init_weights(&genome, 0, 1);
        if let Some(conv) = weights.layers[0].as_mut() {
            conv.weights.fill(1.0 / 9.0);
        }
        let stimuli = Array4::<f32>::ones((2, 1, 4, 4));
        let out = forward(&genome, &weights, &stimuli, &[0], Activation::Relu).unwrap();
        let features = &out[&0].data;
        assert_eq!(features.dim(), (2, 64 * 2 * 2));
        for &v in features.iter() {
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn max_pool_takes_window_max() {
        let genome = Genome {
            id: 1,
            readout: 0,
            lineage: None,
            layers: vec![LayerGene::max_pool(2)],
        };
        let weights = init_weights(&genome, 0, 1);
        let mut stimuli = Array4::<f32>::zeros((1, 1, 2, 2));
        stimuli[[0, 0, 0, 0]] = 1.0;
        stimuli[[0, 0, 0, 1]] = 2.0;
        stimuli[[0, 0, 1, 0]] = 3.0;
        stimuli[[0, 0, 1, 1]] = 4.0;
        let out = forward(&genome, &weights, &stimuli, &[0], Activation::Relu).unwrap();
        assert_eq!(out[&0].data[[0, 0]], 4.0);
    }

    #[test]
    fn relu_conv_features_are_non_negative() {
        // Pooling over raw stimuli may stay negative; the guarantee is for
        // convolution outputs.
        let mut rng = SeedStream::new(8);
        for _ in 0..10 {
            let genome = random_genome(&mut rng, (2, 3), (3, 12, 12)).unwrap();
            let stimuli = random_stimuli(&mut rng, 4, (3, 12, 12));
            let weights = init_weights(&genome, 3, 3);
            let layers: Vec<usize> = (0..genome.depth()).collect();
            let out = forward(&genome, &weights, &stimuli, &layers, Activation::Relu).unwrap();
            for (layer, fm) in &out {
                if genome.layers[*layer].kind == LayerKind::Conv {
                    assert!(fm.data.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn feature_dims_match_shape_trace() {
        let mut rng = SeedStream::new(21);
        for _ in 0..20 {
            let genome = random_genome(&mut rng, (1, 4), (3, 16, 16)).unwrap();
            let stimuli = random_stimuli(&mut rng, 3, (3, 16, 16));
            let trace = genome.output_shape((3, 16, 16));
            let weights = init_weights(&genome, 11, 3);
            let layers: Vec<usize> = (0..genome.depth()).collect();
            let out = forward(&genome, &weights, &stimuli, &layers, Activation::Relu).unwrap();
            for (layer, fm) in &out {
                let (c, h, w) = trace.shapes[*layer];
                assert_eq!(fm.data.dim(), (3, c * h * w));
            }
            assert_eq!(out[&genome.readout].data.dim().1, trace.readout_len);
        }
    }

    #[test]
    fn extract_features_matches_forward_and_repeats() {
        let mut rng = SeedStream::new(33);
        let genome = random_genome(&mut rng, (2, 3), (3, 10, 10)).unwrap();
        let stimuli = random_stimuli(&mut rng, 5, (3, 10, 10));
        let a = extract_features(&genome, 17, &stimuli, genome.readout, Activation::Relu).unwrap();
        let b = extract_features(&genome, 17, &stimuli, genome.readout, Activation::Relu).unwrap();
        assert_eq!(a.data, b.data);
        let ws = init_weights(&genome, 17, 3);
        let direct = forward(&genome, &ws, &stimuli, &[genome.readout], Activation::Relu).unwrap();
        assert_eq!(a.data, direct[&genome.readout].data);
    }

    #[test]
    fn layer_request_out_of_range_errors() {
        let genome = single_conv(3, 1, 64);
        let weights = init_weights(&genome, 0, 3);
        let stimuli = Array4::<f32>::zeros((1, 3, 8, 8));
        let err = forward(&genome, &weights, &stimuli, &[1], Activation::Relu).unwrap_err();
        assert!(matches!(err, RandnetError::LayerOutOfRange { layer: 1, depth: 1 }));
    }

    pub(crate) fn random_stimuli(
        rng: &mut SeedStream,
        n: usize,
        shape: (usize, usize, usize),
    ) -> Array4<f32> {
        let mut arr = Array4::<f32>::zeros((n, shape.0, shape.1, shape.2));
        for v in arr.iter_mut() {
            *v = rng.uniform(-1.0, 1.0) as f32;
        }
        arr
    }
}
