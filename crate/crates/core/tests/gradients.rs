use ivtrust::explain::{integrated_gradients, Aggregation};
use ivtrust::gradcheck::{finite_diff_check, RandomGraph};
use ivtrust::model::{ConvBlock, ModelConfig, ReferenceModel};
use ivtrust::tensor::Tensor;
use ivtrust::triplet::ComponentCounts;
use ivtrust::Classifier;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(seed: u64) -> ReferenceModel {
    ReferenceModel::init(ModelConfig {
        height: 8,
        width: 12,
        channels: 3,
        backbone: vec![ConvBlock::strided(4), ConvBlock { pool: Some(2), ..ConvBlock::strided(6) }],
        counts: ComponentCounts::new(2, 3, 2),
        n_triplets: 4,
        branch_width: 5,
        seed,
    })
    .unwrap()
}

fn random_input(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![8, 12, 3], (0..8 * 12 * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn random_graphs_match_central_differences() {
    for seed in 100..160 {
        let g = RandomGraph::sample(seed);
        let rep = g.check(1e-5, 1e-4).unwrap();
        assert!(rep.passed, "seed {seed} ({}): {rep:?}", g.describe());
    }
}

#[test]
fn input_gradient_of_every_logit() {
    let model = small_model(3);
    for seed in 0..4 {
        let x = random_input(seed);
        for m in 0..model.n_classes() {
            let g = model.class_gradient(&x, m).unwrap();
            let rep = finite_diff_check(|t| Ok(model.logits(t)?[m]), &g, &x, 1e-6, 1e-4).unwrap();
            assert!(rep.passed, "input {seed}, class {m}: {:?} at {:?}", rep.max_rel_error, rep.worst);
        }
    }
}

#[test]
fn combined_coefficients_are_linear() {
    let model = small_model(4);
    let x = random_input(9);
    let k = model.n_classes();
    let c: Vec<f64> = (0..k).map(|i| i as f64 - 1.5).collect();
    let (_, g) = model.logits_and_grad(&x, &|_| c.clone()).unwrap();
    let mut want = Tensor::zeros(x.shape());
    for (m, &cm) in c.iter().enumerate() {
        want.axpy(cm, &model.class_gradient(&x, m).unwrap()).unwrap();
    }
    for (a, b) in g.data().iter().zip(want.data()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn ig_residual_shrinks_with_steps() {
    let model = small_model(5);
    let x = random_input(1);
    let base = Tensor::zeros(x.shape());
    let coarse = integrated_gradients(&model, &x, &base, 1, 4, Aggregation::SumAbs).unwrap();
    let fine = integrated_gradients(&model, &x, &base, 1, 256, Aggregation::SumAbs).unwrap();
    assert_eq!(coarse.delta_f, fine.delta_f);
    assert!(fine.completeness_residual() <= 1e-3 * fine.delta_f.abs() + 1e-5, "{}", fine.completeness_residual());
    assert!(fine.completeness_residual() <= coarse.completeness_residual() + 1e-12);
}
