use criterion::{black_box, criterion_group, criterion_main, Criterion};
use fairproto_core::pipeline::{classify, scan_weights, PrototypeParts};
use fairproto_core::{AxisId, ClassValue, Embedding, FusionWeight, Taxonomy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 768;

fn random(rng: &mut ChaCha8Rng) -> Embedding {
    Embedding::new((0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn parts(rng: &mut ChaCha8Rng, tax: &Taxonomy) -> Vec<PrototypeParts> {
    tax.axis(&"profession".into())
        .unwrap()
        .class_values()
        .map(|class_value| PrototypeParts {
            class_value,
            text_part: random(rng),
            image_part: Some(random(rng)),
            provenance: vec![],
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let tax = Taxonomy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let parts = parts(&mut rng, &tax);
    let classes: Vec<ClassValue> = parts.iter().map(|p| p.class_value.clone()).collect();
    let labeled: Vec<(Embedding, ClassValue)> = (0..2000)
        .map(|i| (random(&mut rng), classes[i % classes.len()].clone()))
        .collect();
    let protos: Vec<_> = parts.iter().map(|p| p.at(FusionWeight::from_percent(85)).unwrap()).collect();

    c.bench_function("scan_weights 2000 queries x 10 classes, dim 768", |b| {
        b.iter(|| scan_weights(black_box(&labeled), black_box(&parts)).unwrap())
    });
    c.bench_function("classify 10 classes, dim 768", |b| {
        b.iter(|| classify(black_box(&labeled[0].0), black_box(&protos)).unwrap())
    });
    let target: AxisId = "profession".into();
    c.bench_function("render_all profession x age", |b| {
        b.iter(|| tax.render_all(black_box(&target), &"age".into()).unwrap())
    });
}

criterion_group!(benches, bench);
criterion_main!(benches);
