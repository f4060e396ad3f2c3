use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use kvfuse_core::data::{format_target, synth_generate, DistractorStyle, Tokenizer};
use kvfuse_core::fusion::{fused_forward, prefill, res_fuse, PassageBatch};
use kvfuse_core::model::{Model, ModelConfig};
use kvfuse_core::rng::Rng;
use kvfuse_core::tensor::{Graph, Tensor};

fn desk_models() -> (Model, Model) {
    let cfg = ModelConfig::desk_scale();
    let mut d_p = Model::init(cfg.clone(), 1).unwrap();
    d_p.freeze();
    let d_t = Model::init(cfg, 1).unwrap();
    (d_p, d_t)
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let a = Tensor::randn(vec![240, 128], 1.0, &mut rng);
    let b = Tensor::randn(vec![128, 128], 0.1, &mut rng);
    c.bench_function("matmul_240x128x128", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let an = g.constant(a.clone());
            let bn = g.constant(b.clone());
            g.matmul(an, bn).unwrap()
        })
    });
}

fn bench_prefill(c: &mut Criterion) {
    let (d_p, _) = desk_models();
    let tok = Tokenizer::new();
    let data = synth_generate(9, 1, 5, DistractorStyle::Confusable, 0.0).unwrap();
    let batch = PassageBatch::from_passages(&data[0].gold_first(), &tok, 64).unwrap();
    c.bench_function("prefill_5x64_desk", |bench| {
        bench.iter(|| prefill(&d_p, &batch).unwrap())
    });
}

fn bench_res_fuse(c: &mut Criterion) {
    let (d_p, _) = desk_models();
    let tok = Tokenizer::new();
    let data = synth_generate(9, 1, 5, DistractorStyle::Confusable, 0.0).unwrap();
    let batch = PassageBatch::from_passages(&data[0].gold_first(), &tok, 64).unwrap();
    let caches = prefill(&d_p, &batch).unwrap();
    let order = [4usize, 2, 0, 3, 1];
    c.bench_function("res_fuse_5x64_desk", |bench| {
        bench.iter(|| res_fuse(&caches, &order).unwrap())
    });
}

fn bench_fused_forward(c: &mut Criterion) {
    let (d_p, d_t) = desk_models();
    let tok = Tokenizer::new();
    let data = synth_generate(9, 1, 5, DistractorStyle::Confusable, 0.0).unwrap();
    let batch = PassageBatch::from_passages(&data[0].gold_first(), &tok, 64).unwrap();
    let caches = prefill(&d_p, &batch).unwrap();
    let order: Vec<usize> = (0..5).collect();
    let fused = res_fuse(&caches, &order).unwrap();
    let (q, _) = format_target(&data[0].question, &data[0].answer, None, &tok);
    c.bench_function("fused_forward_query_desk", |bench| {
        bench.iter_batched(
            || q.clone(),
            |q| fused_forward(&d_t, &fused, &q).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_prefill,
    bench_res_fuse,
    bench_fused_forward
);
criterion_main!(benches);
