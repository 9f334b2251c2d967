use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use mc_bench::{examples, score_map, scored_labels, stop_sign_world};
use mc_core::active_learning::{margin_sample, stratified_sample};
use mc_core::concept::PromptTemplates;
use mc_core::evaluation::{aupr, evaluate_scores};
use mc_core::trainer::{train, EarlyStop, TrainConfig};
use mc_core::{Annotator, AnnotatorConfig, Gateway};

fn retrieval(c: &mut Criterion) {
    let world = stop_sign_world(5000, 1);
    let query = world.embedder.embed_text("stop sign");
    c.bench_function("top_k 50 of 5000 (dim 64)", |b| b.iter(|| world.corpus.top_k(black_box(&query), 50).unwrap()));
}

fn samplers(c: &mut Criterion) {
    let scores = score_map(10_000, 2);
    c.bench_function("stratified_sample 100 of 10k", |b| b.iter(|| stratified_sample(black_box(&scores), 100, 10, 3).unwrap()));
    c.bench_function("margin_sample 100 of 10k", |b| b.iter(|| margin_sample(black_box(&scores), 100).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let (scores, labels) = scored_labels(10_000, 4);
    c.bench_function("aupr 10k", |b| b.iter(|| aupr(black_box(&scores), &labels).unwrap()));
    c.bench_function("evaluate_scores 10k", |b| b.iter(|| evaluate_scores(black_box(&scores), &labels).unwrap()));
}

fn trainer(c: &mut Criterion) {
    let world = stop_sign_world(1000, 5);
    let data = examples(&world, 500);
    let config = TrainConfig { max_epochs: 5, early_stop: None::<EarlyStop>, ..Default::default() };
    let mut group = c.benchmark_group("trainer");
    group.sample_size(10);
    group.bench_function("train 500 examples x 5 epochs", |b| b.iter(|| train(black_box(&data), &config).unwrap()));
    let (model, _) = train(&data, &config).unwrap();
    let xs: Vec<&[f32]> = data.iter().map(|e| e.embedding.as_slice()).collect();
    group.bench_function("predict_batch 500", |b| b.iter(|| model.predict_batch(black_box(&xs)).unwrap()));
    group.finish();
}

fn annotator(c: &mut Criterion) {
    let world = stop_sign_world(200, 6);
    let templates = PromptTemplates::default();
    let gateway = Gateway::mock(world.concept.llm(&templates, 6), 6, world.corpus.dim(), 8).unwrap();
    let annotator = Annotator::new(gateway, templates);
    let concept = world.concept.concept();
    let images = world.corpus.records().to_vec();
    let config = AnnotatorConfig::strategy(1).unwrap();
    let mut group = c.benchmark_group("annotator");
    group.sample_size(10);
    group.bench_function("annotate_batch 200 (mock backends)", |b| {
        b.iter_batched(|| images.clone(), |imgs| annotator.annotate_batch(&imgs, &concept, &config).unwrap(), BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, retrieval, samplers, metrics, trainer, annotator);
criterion_main!(benches);
