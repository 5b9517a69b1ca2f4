//! Parallel vs sequential throughput of the batch-level hot paths: the
//! per-image gradient fan-out used by training and the embedding fan-out used
//! by evaluation. Both paths produce bit-identical results; this suite
//! measures what the rayon fan-out buys.
//!
//! Run with `cargo bench -p zslt-core`. Built without the `parallel` feature
//! only the sequential path is benchmarked.

use criterion::{criterion_group, criterion_main, Criterion};

use zslt_core::config::RunConfig;
use zslt_core::data::{generate_synthetic, DatasetBundle, Split, SyntheticSpec};
use zslt_core::numerics::tensor::Tensor;
use zslt_core::train::{batch_gradients, embed_image, TrainContext};

fn bench_setup() -> (RunConfig, DatasetBundle<f64>) {
    let mut cfg = RunConfig::default();
    cfg.model.d = 32;
    cfg.synth = SyntheticSpec {
        images_per_class: 8,
        ..SyntheticSpec::default()
    };
    let bundle = generate_synthetic::<f64>(&cfg.synthetic_spec()).expect("bundle");
    (cfg, bundle)
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (cfg, bundle) = bench_setup();
    let ctx = TrainContext::new(&cfg, &bundle).expect("context");
    let state = ctx.init_state(&bundle).expect("state");
    let batch: Vec<(Tensor<f64>, usize)> = bundle
        .split_indices(Split::TrainSeen)
        .iter()
        .take(32)
        .map(|&i| (bundle.images[i].grid.clone(), bundle.images[i].class))
        .collect();

    let mut group = c.benchmark_group("batch_gradients");
    group.bench_function("seq", |b| {
        b.iter(|| batch_gradients(&state, &ctx, &bundle.bank, &batch, 1, 0, false).unwrap())
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par", |b| {
        b.iter(|| batch_gradients(&state, &ctx, &bundle.bank, &batch, 1, 0, true).unwrap())
    });
    group.finish();
}

fn bench_eval_embeddings(c: &mut Criterion) {
    let (cfg, bundle) = bench_setup();
    let ctx = TrainContext::new(&cfg, &bundle).expect("context");
    let state = ctx.init_state(&bundle).expect("state");
    let test = bundle.split_indices(Split::TestUnseen);

    let run = |parallel: bool| {
        let f = |i: usize| embed_image(&state, &ctx, &bundle.images[test[i]].grid).unwrap();
        if parallel {
            #[cfg(feature = "parallel")]
            {
                return zslt_core::par::map_indexed_par(test.len(), f).len();
            }
        }
        zslt_core::par::map_indexed_seq(test.len(), f).len()
    };

    let mut group = c.benchmark_group("eval_embeddings");
    group.bench_function("seq", |b| b.iter(|| run(false)));
    #[cfg(feature = "parallel")]
    group.bench_function("par", |b| b.iter(|| run(true)));
    group.finish();
}

criterion_group!(benches, bench_batch_gradients, bench_eval_embeddings);
criterion_main!(benches);
