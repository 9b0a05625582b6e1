use wsp_core::data::{generate_synthetic_dataset, GeneratorConfig, PrepConfig, PreparedDataset};
use wsp_core::encoders::EncoderConfig;
use wsp_core::evaluation::{random_checkpoint, Method};
use wsp_core::losses::LossKind;
use wsp_core::trainer::{initial_encoder, pretrain, OptimConfig};

fn small_set(seed: u64) -> PreparedDataset {
    let cfg = GeneratorConfig {
        n_volumes: 16,
        slices_per_volume: 10,
        ..GeneratorConfig::default()
    };
    PreparedDataset::new(&generate_synthetic_dataset(&cfg, seed).unwrap(), &PrepConfig::default()).unwrap()
}

#[test]
fn second_epoch_loss_is_lower_for_most_seeds() {
    let mut lower = 0;
    for seed in 0..5 {
        let ds = small_set(seed);
        let enc = EncoderConfig {
            seed,
            ..EncoderConfig::default()
        };
        let optim = OptimConfig {
            epochs: 2,
            batch_size: 8,
            seed,
            ..OptimConfig::default()
        };
        let out = pretrain(&ds, &enc, &optim).unwrap();
        assert_eq!(out.curve.len(), 2);
        if out.curve[1].mean_loss < out.curve[0].mean_loss {
            lower += 1;
        }
    }
    assert!(lower >= 3, "epoch 2 below epoch 1 for only {lower} of 5 seeds");
}

#[test]
fn random_baseline_is_the_training_start_point() {
    let ds = small_set(3);
    let enc = EncoderConfig::default();
    let ckpt = random_checkpoint(&ds, &enc).unwrap();
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.encoder, initial_encoder(&ds, &enc).unwrap());
    assert_eq!(Method::Random.name(), "random");
    assert_eq!(Method::Pretrained(LossKind::Wsp).name(), "wsp");
}

#[test]
fn small_cohort_trains_through_the_fallback_sampler() {
    let ds = small_set(4);
    let enc = EncoderConfig::default();
    let optim = OptimConfig {
        epochs: 1,
        batch_size: 32,
        fallback_steps: Some(1),
        ..OptimConfig::default()
    };
    let out = pretrain(&ds, &enc, &optim).unwrap();
    assert!(out.used_fallback);
    assert_eq!(out.checkpoint.step, 1);
}
