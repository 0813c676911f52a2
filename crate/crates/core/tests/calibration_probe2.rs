//! Ignored by default: unit-test-scale hierarchy calibration.

use evoalign_core::data::{generate_synthetic, RegionTap, TeacherSpec};
use evoalign_core::genome::{Genome, LayerGene};
use evoalign_core::metrics::{layer_profile, FitnessParams, SplitSpec};
use evoalign_core::randnet::Activation;

fn teacher4() -> Genome {
    Genome {
        id: 400,
        readout: 3,
        lineage: None,
        layers: vec![
            LayerGene::conv(3, 1, 64), // 14
            LayerGene::max_pool(2),    // 7
            LayerGene::conv(3, 1, 96), // 5
            LayerGene::conv(3, 1, 128), // 3
        ],
    }
}

#[test]
#[ignore]
fn probe_small() {
    for (label, taps, n, voxels) in [
        ("taps(0,3) n=80 v=40", (0usize, 3usize), 80usize, 40usize),
        ("taps(0,3) n=120 v=60", (0, 3), 120, 60),
    ] {
        let spec = TeacherSpec {
            teacher: teacher4(),
            region_taps: vec![
                RegionTap { region: "V2".into(), layer: taps.0 },
                RegionTap { region: "IT".into(), layer: taps.1 },
            ],
            voxels_per_region: voxels,
            projection_seed: 21,
            noise_sigma: 0.3,
            repeats: 3,
            subjects: 2,
            feature_seeds: 4,
            subject_jitter: 0.1,
            stimulus_smoothing: 2,
        };
        let t0 = std::time::Instant::now();
        let dataset = generate_synthetic(&spec, n, (3, 16, 16), 777).unwrap();
        let params = FitnessParams {
            master_seed: 50_000,
            n_seeds: 2,
            lambda: 1.0,
            lambda_grid: None,
            split: SplitSpec { train_fraction: 0.8, seed: 303 },
            activation: Activation::Relu,
        };
        let regions = vec!["V2".to_string(), "IT".to_string()];
        let profile = layer_profile(&teacher4(), &dataset, &regions, &params).unwrap();
        println!("== {label} ({:.1}s)", t0.elapsed().as_secs_f64());
        for (layer, row) in profile.scores.iter().enumerate() {
            println!("  {layer}   |  {:.3}  {:.3}", row[0], row[1]);
        }
        println!("argmax: {:?}", profile.best_layer);
    }
}
