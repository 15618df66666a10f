use combts::datasets::{apply_split, standardize, SplitPolicy};
use combts::embeddings::{EmbeddingKind, EmbeddingSpec};
use combts::encoders::{EncoderKind, EncoderSpec};
use combts::harness::synthetic::{generate, SyntheticSpec};
use combts::pipeline::{train, Model, PipelineConfig, TrainSettings};
use combts::transforms::{TransformKind, TransformSpec};

fn cycle_identity(lookback: usize, horizon: usize, n: usize) -> PipelineConfig {
    let mut transform = TransformSpec::new(TransformKind::Cycle);
    transform.cycle_len = 24;
    PipelineConfig {
        transform,
        embedding: EmbeddingSpec::new(EmbeddingKind::Identity, 1),
        encoder: EncoderSpec::new(EncoderKind::Identity, 1),
        lookback,
        horizon,
        variates: n,
    }
}

fn run(noise: f64, settings: TrainSettings) -> combts::pipeline::TrainOutcome {
    let spec = SyntheticSpec {
        amplitude: std::f64::consts::SQRT_2,
        noise,
        seed: 11,
        ..SyntheticSpec::new(4800, 2, 24)
    };
    let ds = generate("periodic", &spec).unwrap();
    let ds = apply_split(ds, SplitPolicy::Ratio { train: 0.7, val: 0.1 }).unwrap();
    let (ds, _) = standardize(&ds).unwrap();
    let mut model = Model::assemble(&cycle_identity(48, 24, 2), 1).unwrap();
    train(&mut model, &ds, &settings).unwrap()
}

#[test]
fn noise_free_cycle_is_recovered_within_200_steps() {
    let out = run(
        0.0,
        TrainSettings {
            learning_rate: 1e-2,
            max_steps: Some(200),
            epochs: 1000,
            patience: 1000,
            ..TrainSettings::default()
        },
    );
    println!("{out:?}");
    assert!(out.steps <= 200);
    assert!(out.test_mse < 1e-3, "test MSE {}", out.test_mse);
}

#[test]
fn noisy_cycle_reaches_the_noise_floor() {
    let out = run(
        0.1,
        TrainSettings {
            learning_rate: 3e-3,
            ..TrainSettings::default()
        },
    );
    println!("{out:?}");
    assert!((0.009..=0.013).contains(&out.test_mse), "test MSE {}", out.test_mse);
}
