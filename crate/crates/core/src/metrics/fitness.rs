//! Genome fitness: per-(subject, seed, layer) encoding correlations and their
//! aggregate, plus the per-layer, per-region profile used for sub-network
//! selection and hierarchy analysis.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::encoding::{EncodingDesign, SplitSpec};
use super::MetricsError;
use crate::data::Dataset;
use crate::genome::Genome;
use crate::randnet::{forward_each, init_weights, Activation};

/// Evaluation settings shared by every genome in a run. Seeds are the
/// consecutive block `master_seed .. master_seed + n_seeds`, identical for
/// every genome, so fitness differences reflect architecture rather than
/// draw luck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessParams {
    pub master_seed: u64,
    pub n_seeds: usize,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
    pub split: SplitSpec,
    pub activation: Activation,
}

impl Default for FitnessParams {
    fn default() -> Self {
        Self {
            master_seed: 1,
            n_seeds: 10,
            lambda: 1.0,
            lambda_grid: None,
            split: SplitSpec::default(),
            activation: Activation::Relu,
        }
    }
}

impl FitnessParams {
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_seeds as u64).map(move |t| self.master_seed.wrapping_add(t))
    }
}

/// One encoding evaluation: mean over voxels of the held-out Pearson r.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessEntry {
    pub subject: String,
    pub seed: u64,
    pub layer: usize,
    pub mean_r: f64,
}

/// Score breakdown for one genome at one layer and region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub genome_id: u64,
    pub entries: Vec<FitnessEntry>,
    /// Mean over subjects of the per-subject mean over seeds.
    pub aggregate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized: Option<f64>,
}

/// Raw scores for every requested (layer, region) pair of one genome.
#[derive(Debug, Clone)]
pub struct LayerScores {
    pub genome_id: u64,
    entries: BTreeMap<usize, BTreeMap<String, Vec<FitnessEntry>>>,
}

impl LayerScores {
    pub fn entries(&self, layer: usize, region: &str) -> &[FitnessEntry] {
        self.entries
            .get(&layer)
            .and_then(|m| m.get(region))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Mean over subjects of the per-subject mean over seeds.
    pub fn aggregate(&self, layer: usize, region: &str) -> f64 {
        aggregate_entries(self.entries(layer, region))
    }

    pub fn record(&self, layer: usize, region: &str) -> FitnessRecord {
        let entries = self.entries(layer, region).to_vec();
        let aggregate = aggregate_entries(&entries);
        FitnessRecord { genome_id: self.genome_id, entries, aggregate, normalized: None }
    }
}

fn aggregate_entries(entries: &[FitnessEntry]) -> f64 {
    let mut per_subject: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for e in entries {
        let slot = per_subject.entry(e.subject.as_str()).or_insert((0.0, 0));
        slot.0 += e.mean_r;
        slot.1 += 1;
    }
    if per_subject.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for (sum, count) in per_subject.values() {
        total += sum / *count as f64;
    }
    total / per_subject.len() as f64
}

fn region_targets<'d>(
    dataset: &'d Dataset,
    regions: &[String],
) -> Result<Vec<(String, Vec<(&'d str, Array2<f64>)>)>, MetricsError> {
    let mut out = Vec::with_capacity(regions.len());
    for region in regions {
        if !dataset.meta.regions.contains(region) {
            return Err(MetricsError::MissingRegion { region: region.clone() });
        }
        let mut per_subject = Vec::with_capacity(dataset.subjects.len());
        for subject in &dataset.subjects {
            let rm = subject
                .regions
                .get(region)
                .ok_or_else(|| MetricsError::MissingRegion { region: region.clone() })?;
            per_subject.push((subject.id.as_str(), rm.repeat_mean()));
        }
        out.push((region.clone(), per_subject));
    }
    Ok(out)
}

/// Evaluates `genome` at every requested layer against every requested
/// region. Features are extracted once per (seed, layer); the encoding design
/// is shared across regions and subjects since it depends only on features.
pub fn evaluate_layers(
    genome: &Genome,
    dataset: &Dataset,
    regions: &[String],
    layers: &[usize],
    params: &FitnessParams,
) -> Result<LayerScores, MetricsError> {
    let mut unique_layers: Vec<usize> = layers.to_vec();
    unique_layers.sort_unstable();
    unique_layers.dedup();
    let targets = region_targets(dataset, regions)?;

    let mut entries: BTreeMap<usize, BTreeMap<String, Vec<FitnessEntry>>> = BTreeMap::new();
    for seed in params.seeds() {
        let weights = init_weights(genome, seed, dataset.input_shape().0);
        let mut failure: Option<MetricsError> = None;
        forward_each(
            genome,
            &weights,
            &dataset.stimuli,
            &unique_layers,
            params.activation,
            |fm| {
                if failure.is_some() {
                    return;
                }
                let design = match EncodingDesign::with_grid(
                    fm.data.view(),
                    &params.split,
                    params.lambda,
                    params.lambda_grid.clone(),
                ) {
                    Ok(d) => d,
                    Err(e) => {
                        failure = Some(e);
                        return;
                    }
                };
                for (region, subjects) in &targets {
                    for (subject, target) in subjects {
                        match design.score(target.view()) {
                            Ok(score) => {
                                entries
                                    .entry(fm.layer)
                                    .or_default()
                                    .entry(region.clone())
                                    .or_default()
                                    .push(FitnessEntry {
                                        subject: subject.to_string(),
                                        seed,
                                        layer: fm.layer,
                                        mean_r: score.mean_r,
                                    });
                            }
                            Err(e) => {
                                failure = Some(e);
                                return;
                            }
                        }
                    }
                }
            },
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(LayerScores { genome_id: genome.id, entries })
}

/// Fitness of one genome for one region: encoding correlations averaged over
/// the consecutive seed block per subject, then over subjects. `layer`
/// defaults to the genome's readout.
pub fn fitness(
    genome: &Genome,
    dataset: &Dataset,
    region: &str,
    layer: Option<usize>,
    params: &FitnessParams,
) -> Result<FitnessRecord, MetricsError> {
    let layer = layer.unwrap_or(genome.readout);
    let scores = evaluate_layers(genome, dataset, &[region.to_string()], &[layer], params)?;
    Ok(scores.record(layer, region))
}

/// Per-layer x per-region score table with the best layer per region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub genome_id: u64,
    pub regions: Vec<String>,
    /// `scores[layer][region_index]` = aggregate fitness.
    pub scores: Vec<Vec<f64>>,
    /// Arg-max layer per region; ties resolve to the earliest layer.
    pub best_layer: Vec<usize>,
}

/// Evaluates every layer of `genome` against every region in `regions`.
pub fn layer_profile(
    genome: &Genome,
    dataset: &Dataset,
    regions: &[String],
    params: &FitnessParams,
) -> Result<LayerProfile, MetricsError> {
    let layers: Vec<usize> = (0..genome.depth()).collect();
    let scores = evaluate_layers(genome, dataset, regions, &layers, params)?;
    let mut table = Vec::with_capacity(layers.len());
    for &layer in &layers {
        let row: Vec<f64> = regions.iter().map(|r| scores.aggregate(layer, r)).collect();
        table.push(row);
    }
    let best_layer = (0..regions.len())
        .map(|r| {
            let mut best = 0usize;
            for layer in 1..layers.len() {
                if table[layer][r] > table[best][r] {
                    best = layer;
                }
            }
            best
        })
        .collect();
    Ok(LayerProfile {
        genome_id: genome.id,
        regions: regions.to_vec(),
        scores: table,
        best_layer,
    })
}

/// Per-subject, per-voxel held-out correlations at one (region, layer),
/// averaged over the seed block. Used for noise-ceiling-normalized reports.
pub fn region_voxel_scores(
    genome: &Genome,
    dataset: &Dataset,
    region: &str,
    layer: usize,
    params: &FitnessParams,
) -> Result<Vec<(String, Vec<f64>)>, MetricsError> {
    let targets = region_targets(dataset, &[region.to_string()])?;
    let subjects = &targets[0].1;
    let mut sums: Vec<Vec<f64>> = subjects
        .iter()
        .map(|(_, t)| vec![0.0; t.dim().1])
        .collect();
    let mut count = 0usize;
    for seed in params.seeds() {
        let weights = init_weights(genome, seed, dataset.input_shape().0);
        let mut failure: Option<MetricsError> = None;
        forward_each(
            genome,
            &weights,
            &dataset.stimuli,
            &[layer],
            params.activation,
            |fm| {
                let design = match EncodingDesign::with_grid(
                    fm.data.view(),
                    &params.split,
                    params.lambda,
                    params.lambda_grid.clone(),
                ) {
                    Ok(d) => d,
                    Err(e) => {
                        failure = Some(e);
                        return;
                    }
                };
                for ((_, target), sum) in subjects.iter().zip(&mut sums) {
                    match design.score(target.view()) {
                        Ok(score) => {
                            for (acc, r) in sum.iter_mut().zip(&score.per_voxel_r) {
                                *acc += r;
                            }
                        }
                        Err(e) => {
                            failure = Some(e);
                            return;
                        }
                    }
                }
            },
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        count += 1;
    }
    Ok(subjects
        .iter()
        .zip(sums)
        .map(|((id, _), sum)| {
            let mean: Vec<f64> = sum.into_iter().map(|v| v / count as f64).collect();
            (id.to_string(), mean)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, RegionTap, TeacherSpec};
    use crate::genome::{Genome, LayerGene};

    fn teacher() -> Genome {
        Genome {
            id: 808,
            readout: 2,
            lineage: None,
            layers: vec![
                LayerGene::conv(3, 1, 64),
                LayerGene::max_pool(2),
                LayerGene::conv(3, 1, 96),
            ],
        }
    }

    fn spec() -> TeacherSpec {
        TeacherSpec {
            teacher: teacher(),
            region_taps: vec![
                RegionTap { region: "V2".into(), layer: 0 },
                RegionTap { region: "IT".into(), layer: 2 },
            ],
            voxels_per_region: 20,
            projection_seed: 31,
            noise_sigma: 0.25,
            repeats: 2,
            subjects: 2,
            feature_seeds: 2,
            subject_jitter: 0.1,
            stimulus_smoothing: 2,
        }
    }

    fn params(n_seeds: usize) -> FitnessParams {
        FitnessParams {
            master_seed: 11,
            n_seeds,
            lambda: 1.0,
            lambda_grid: None,
            split: SplitSpec { train_fraction: 0.8, seed: 5 },
            activation: Activation::Relu,
        }
    }

    #[test]
    fn fitness_is_deterministic() {
        let dataset = generate_synthetic(&spec(), 40, (3, 12, 12), 2).unwrap();
        let g = teacher();
        let a = fitness(&g, &dataset, "IT", None, &params(1)).unwrap();
        let b = fitness(&g, &dataset, "IT", None, &params(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.entries.len(), 2); // 2 subjects x 1 seed
    }

    #[test]
    fn aggregate_is_mean_of_subject_means() {
        let dataset = generate_synthetic(&spec(), 40, (3, 12, 12), 2).unwrap();
        let record = fitness(&teacher(), &dataset, "IT", None, &params(3)).unwrap();
        assert_eq!(record.entries.len(), 6);
        let mut by_subject: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for e in &record.entries {
            by_subject.entry(e.subject.as_str()).or_default().push(e.mean_r);
        }
        let expected: f64 = by_subject
            .values()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .sum::<f64>()
            / by_subject.len() as f64;
        assert!((record.aggregate - expected).abs() < 1e-12);
    }

    #[test]
    fn aggregate_invariant_under_subject_reordering() {
        let dataset = generate_synthetic(&spec(), 40, (3, 12, 12), 2).unwrap();
        let base = fitness(&teacher(), &dataset, "IT", None, &params(2)).unwrap();
        let mut reversed = dataset.clone();
        reversed.subjects.reverse();
        reversed.meta.subjects.reverse();
        let flipped = fitness(&teacher(), &reversed, "IT", None, &params(2)).unwrap();
        assert!((base.aggregate - flipped.aggregate).abs() < 1e-10);
    }

    #[test]
    fn missing_region_is_reported() {
        let dataset = generate_synthetic(&spec(), 40, (3, 12, 12), 2).unwrap();
        let err = fitness(&teacher(), &dataset, "V9", None, &params(1)).unwrap_err();
        assert!(matches!(err, MetricsError::MissingRegion { ref region } if region == "V9"));
    }

    #[test]
    fn depth_profile_leans_the_right_way() {
        // At this tiny scale the absolute argmax is noisy, but the relative
        // depth profile is stable: deep layers retain far more of their score
        // on the late-tap region than on the early-tap region. Full argmax
        // ordering is exercised on the desk-scale dataset in the acceptance
        // suite.
        let dataset = generate_synthetic(&spec(), 60, (3, 12, 12), 9).unwrap();
        let regions = vec!["V2".to_string(), "IT".to_string()];
        let profile = layer_profile(&teacher(), &dataset, &regions, &params(2)).unwrap();
        assert_eq!(profile.scores.len(), 3);
        let retention = |region: usize| profile.scores[2][region] / profile.scores[0][region];
        assert!(
            retention(1) > retention(0),
            "late region should favor depth: {:?}",
            profile.scores
        );
    }

    #[test]
    fn single_layer_genome_profiles_trivially() {
        let mut spec1 = spec();
        spec1.teacher = Genome {
            id: 9,
            readout: 0,
            lineage: None,
            layers: vec![LayerGene::conv(3, 1, 64)],
        };
        spec1.region_taps = vec![RegionTap { region: "IT".into(), layer: 0 }];
        let dataset = generate_synthetic(&spec1, 40, (3, 12, 12), 4).unwrap();
        let profile =
            layer_profile(&spec1.teacher, &dataset, &["IT".to_string()], &params(1)).unwrap();
        assert_eq!(profile.best_layer, vec![0]);
        assert_eq!(profile.scores.len(), 1);
    }

    #[test]
    fn voxel_scores_match_record_means() {
        let dataset = generate_synthetic(&spec(), 40, (3, 12, 12), 2).unwrap();
        let g = teacher();
        let p = params(2);
        let voxel = region_voxel_scores(&g, &dataset, "IT", 2, &p).unwrap();
        let record = fitness(&g, &dataset, "IT", Some(2), &p).unwrap();
        for (subject, rs) in &voxel {
            let per_seed: Vec<f64> = record
                .entries
                .iter()
                .filter(|e| &e.subject == subject)
                .map(|e| e.mean_r)
                .collect();
            let expected = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            let got = rs.iter().sum::<f64>() / rs.len() as f64;
            assert!((got - expected).abs() < 1e-10, "{subject}: {got} vs {expected}");
        }
    }
}
