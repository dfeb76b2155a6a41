use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use homonet::autograd::Graph;
use homonet::datagen::{generate_duals, DualSample, GenConfig, SourcePool};
use homonet::network::{DenoiserConfig, EstimatorConfig, ExtractorConfig, Model, ModelConfig, ModelVariant};
use homonet::parallel::force_sequential;
use homonet::training::{batch_losses, Batch, LossMode, LossWeights};
use std::hint::black_box;

fn toy_model() -> Model<f32> {
    let config = ModelConfig {
        variant: ModelVariant::FMRH,
        image_size: 64,
        extractor: ExtractorConfig::reduced(),
        denoiser: DenoiserConfig { base: Some(32), ..Default::default() },
        estimator: EstimatorConfig { hidden: 1024, pool_to: Some(8) },
    };
    Model::new(config, 0).unwrap()
}

/// Runs `f` once with the parallel backend and once forced sequential.
fn both(c: &mut Criterion, group: &str, mut f: impl FnMut()) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    for (name, sequential) in [("parallel", false), ("sequential", true)] {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            force_sequential(sequential);
            b.iter(&mut f);
            force_sequential(false);
        });
    }
    g.finish();
}

fn benches(c: &mut Criterion) {
    let cfg = GenConfig { image_size: 64, rho: 16.0, ..Default::default() };
    let pool = SourcePool::procedural(16, cfg.source_size(), 0);
    both(c, "generate_16_duals", || {
        black_box(generate_duals(&pool, &cfg, 0..16).unwrap());
    });

    let duals = generate_duals(&pool, &cfg, 0..16).unwrap();
    let refs: Vec<&DualSample> = duals.iter().collect();
    let batch = Batch::<f32>::from_duals(&refs).unwrap();
    let model = toy_model();
    both(c, "train_step_batch_16", || {
        let mut g = Graph::new();
        let (_, lv) = batch_losses(&model, &mut g, &batch, LossMode::Combined, LossWeights::default()).unwrap();
        black_box(g.backward(lv.l_f, model.params.len()));
    });

    let pairs: Vec<_> = duals.iter().map(|d| (&d.pair_ab.image_a, &d.pair_ab.image_b)).collect();
    both(c, "predict_16_pairs", || {
        black_box(model.predict(&pairs, 16).unwrap());
    });
}

criterion_group!(parallel_vs_sequential, benches);
criterion_main!(parallel_vs_sequential);
