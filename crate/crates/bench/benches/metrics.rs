use criterion::{criterion_group, criterion_main, Criterion};
use mdug_core::metrics::{bleu1, boundary_score, cider, meteor_lite, random_responses, rouge_l, single_refs};
use mdug_core::{generate_corpus, GenConfig, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn text_metrics(c: &mut Criterion) {
    let corpus = generate_corpus(&GenConfig::default(), 7).expect("corpus");
    let refs: Vec<String> = corpus
        .split(Split::Test)
        .map(|e| e.utterances.last().map(|u| u.text.clone()).unwrap_or_default())
        .collect();
    let cands = random_responses(corpus.vocab(), refs.len(), 3);
    let refs = single_refs(&refs);

    let mut group = c.benchmark_group("text");
    group.bench_function("bleu1", |b| b.iter(|| bleu1(&cands, &refs).unwrap()));
    group.bench_function("rouge_l", |b| b.iter(|| rouge_l(&cands, &refs).unwrap()));
    group.bench_function("meteor_lite", |b| b.iter(|| meteor_lite(&cands, &refs).unwrap()));
    group.bench_function("cider", |b| b.iter(|| cider(&cands, &refs).unwrap()));
    group.finish();
}

fn boundary(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let preds: Vec<u8> = (0..100_000).map(|_| rng.random_range(0..2)).collect();
    let golds: Vec<u8> = (0..100_000).map(|_| rng.random_bool(0.1) as u8).collect();
    c.bench_function("boundary_score_100k", |b| b.iter(|| boundary_score(&preds, &golds).unwrap()));
}

criterion_group!(benches, text_metrics, boundary);
criterion_main!(benches);
