use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsp_core::autodiff::Tape;
use wsp_core::data::{generate_synthetic_dataset, GeneratorConfig};
use wsp_core::encoders::{init_encoder, EncoderConfig};
use wsp_core::exec;
use wsp_core::Tensor;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn conv_forward_backward(c: &mut Criterion) {
    let enc = init_encoder(&EncoderConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = Tensor::from_fn(&[32, 1, 32, 32], |_| rng.gen_range(0.0..1.0));
    let mut group = c.benchmark_group("encoder_step");
    group.sample_size(10);
    for (name, sequential) in modes() {
        group.bench_function(name, |b| {
            exec::force_sequential(sequential);
            b.iter(|| {
                let tape = Tape::new();
                let params = enc.bind(&tape, true);
                let x = tape.constant(batch.clone());
                let r = enc.encode_var(&tape, &params, x).unwrap();
                let z = enc.project_var(&tape, &params, r).unwrap();
                let s = tape.sum(z).unwrap();
                tape.backward(s).unwrap()
            });
        });
    }
    exec::force_sequential(false);
    group.finish();
}

fn generation(c: &mut Criterion) {
    let cfg = GeneratorConfig {
        n_volumes: 16,
        ..GeneratorConfig::default()
    };
    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    for (name, sequential) in modes() {
        group.bench_function(name, |b| {
            exec::force_sequential(sequential);
            b.iter_batched(|| cfg.clone(), |cfg| generate_synthetic_dataset(&cfg, 7).unwrap(), BatchSize::SmallInput);
        });
    }
    exec::force_sequential(false);
    group.finish();
}

criterion_group!(benches, conv_forward_backward, generation);
criterion_main!(benches);
