use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mops_core::compression::{compress, CompressionSpec};
use mops_core::corpus::{generate_corpus, CorpusConfig};
use mops_core::mop::{forward_mop, MopOptions};
use mops_core::trainer::{backward_mop, next_token_targets, train_step, TrainMode, TrainSettings, TrainableState};
use mops_core::{Backbone, ModelConfig};
use std::hint::black_box;

fn setup(injection_layer: usize) -> (Backbone, TrainableState, Vec<usize>) {
    let config = ModelConfig { injection_layer, ..ModelConfig::toy() };
    let b = Backbone::init(&config, 1).unwrap();
    let state = TrainableState::init(&config, 2).unwrap();
    let tokens: Vec<usize> = (0..config.max_seq_len).map(|i| 32 + (i * 7) % 48).collect();
    (b, state, tokens)
}

fn forward_and_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("mop");
    for layer in [1, 3, 5, 7] {
        let (b, state, tokens) = setup(layer);
        let opts = MopOptions::default();
        group.bench_with_input(BenchmarkId::new("forward", layer), &layer, |bench, _| {
            bench.iter(|| {
                forward_mop(&b, &b.input_prompts, &state.injected, &state.gating, black_box(&tokens), opts).unwrap()
            })
        });
        let trace = forward_mop(&b, &b.input_prompts, &state.injected, &state.gating, &tokens, opts).unwrap();
        group.bench_with_input(BenchmarkId::new("backward", layer), &layer, |bench, _| {
            bench.iter(|| backward_mop(&b, black_box(&trace), next_token_targets(&tokens), &state).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut cc = CorpusConfig::toy_four();
    cc.samples_per_task = 20;
    let corpus = generate_corpus(&cc, 3).unwrap();
    let sample = corpus.train_owned().swap_remove(0);
    let (dense, state, _) = setup(3);
    let pruned = compress(&dense, &CompressionSpec::Unstructured { ratio: 0.75 }).unwrap();
    let settings = TrainSettings::default();
    let mut group = c.benchmark_group("train_step");
    for mode in [TrainMode::Baseline, TrainMode::Mop] {
        group.bench_function(format!("{mode:?}").to_lowercase(), |bench| {
            let mut s = state.clone();
            bench.iter(|| train_step(&pruned, &pruned.input_prompts, &mut s, &sample, &settings, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_and_backward, training_step);
criterion_main!(benches);
