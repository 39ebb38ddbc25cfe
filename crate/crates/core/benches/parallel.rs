use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ivtrust::datasets::{generate_synthetic, SyntheticConfig};
use ivtrust::explain::{attribute, ExplainConfig, Method};
use ivtrust::model::{ConvBlock, ModelConfig, ReferenceModel};
use ivtrust::par;
use ivtrust::robustness::{robustness_eval, AttackConfig, AttackItem, MaskSource, SetKind};
use ivtrust::triplet::ComponentCounts;
use ivtrust::Classifier;

const H: usize = 32;
const W: usize = 56;

fn setup(n: usize) -> (ReferenceModel, Vec<AttackItem>) {
    let counts = ComponentCounts::new(3, 3, 3);
    let scenes = SyntheticConfig { height: H, width: W, counts, n_triplets: 6, glyph_size: 12, texture_size: 16, multi_label_rate: 0.0, seed: 3, ..Default::default() };
    let data = generate_synthetic(&scenes, n).expect("scenes");
    let cfg = ModelConfig {
        height: H,
        width: W,
        channels: 3,
        backbone: vec![ConvBlock::strided(8), ConvBlock::strided(16)],
        counts,
        n_triplets: 6,
        branch_width: 8,
        seed: 5,
    };
    let model = ReferenceModel::init(cfg).expect("model");
    let items = data
        .examples
        .iter()
        .map(|e| AttackItem { id: e.id, label: model.predict(&e.image).expect("predict"), image: e.image.clone() })
        .collect();
    (model, items)
}

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", true), ("parallel", false)]
}

fn run<R>(seq: bool, f: impl FnOnce() -> R) -> R {
    if seq {
        par::sequential(f)
    } else {
        f()
    }
}

fn bench_ig(c: &mut Criterion) {
    let (model, items) = setup(8);
    let ecfg = ExplainConfig { ig_steps: 32, ..Default::default() };
    let mut g = c.benchmark_group("integrated_gradients");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::new(name, items.len()), |b| {
            b.iter(|| {
                run(seq, || par::map(&items, |it| attribute(&model, &it.image, it.label, Method::Ig, &ecfg).expect("ig")))
            })
        });
    }
    g.finish();
}

fn bench_attack(c: &mut Criterion) {
    let (model, items) = setup(8);
    let cfg = AttackConfig { restarts: 1, steps: 10, ..Default::default() };
    let ecfg = ExplainConfig::default();
    let mut g = c.benchmark_group("batch_attack");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::new(name, items.len()), |b| {
            b.iter(|| {
                run(seq, || {
                    robustness_eval(&model, black_box(&items), MaskSource::Explainer(Method::Grad), 0.25, SetKind::Relevant, &cfg, &ecfg).expect("attack")
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_ig, bench_attack);
criterion_main!(benches);
