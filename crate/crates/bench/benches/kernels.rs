use std::hint::black_box;

use cinefuse::alignfuse::ModelConfig;
use cinefuse::numcore::{Session, Tensor};
use cinefuse::sync::{lambda_per_sentence, e_step};
use cinefuse::trainer::build_scene_model;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&mut rng, 128, 128), random(&mut rng, 128, 128));
    c.bench_function("matmul_128", |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
}

fn forward_scene(c: &mut Criterion) {
    let dims = vec![12, 8];
    let (model, store) = build_scene_model(&ModelConfig::scene_desk(dims.clone()), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let window: Vec<Tensor> = dims.iter().map(|&d| random(&mut rng, 17, d)).collect();
    c.bench_function("forward_scene_desk", |bench| {
        bench.iter(|| {
            let mut s = Session::eval(&store);
            let y = model.forward_scene(&mut s, black_box(&window)).unwrap();
            s.tape.value(y).data()[0]
        })
    });
}

fn e_step_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sim = random(&mut rng, 3000, 60);
    let lambda = lambda_per_sentence(&sim, 0.99).unwrap();
    c.bench_function("e_step_3000x60", |bench| bench.iter(|| e_step(black_box(&sim), &lambda, 0.3).unwrap()));
}

criterion_group!(benches, matmul, forward_scene, e_step_bench);
criterion_main!(benches);
