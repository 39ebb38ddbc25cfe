use ivtrust::classifier::LinearClassifier;
use ivtrust::explain::{ExplainConfig, Method};
use ivtrust::metrics::{component_ap, PredictionMatrix};
use ivtrust::report::{curve_svg, parse_svg_points, top_k, verify_manifest, ReportWriter};
use ivtrust::robustness::{robustness_curve, AttackConfig, AttackItem, MaskSource};
use ivtrust::tensor::{Norm, Tensor};
use ivtrust::triplet::{ComponentCounts, ComponentId, TripletTable};
use ivtrust::Classifier;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn perfect_scores_give_unit_ap_for_every_component() {
    let table = TripletTable::random(ComponentCounts::new(3, 4, 3), 10, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pred = PredictionMatrix::new(10);
    for r in 0..60 {
        let mut labels = vec![0u8; 10];
        labels[r % 10] = 1;
        if rng.random::<f64>() < 0.3 {
            labels[rng.random_range(0..10)] = 1;
        }
        let scores: Vec<f64> = labels.iter().map(|&l| if l == 1 { 0.6 + 0.4 * rng.random::<f64>() } else { 0.4 * rng.random::<f64>() }).collect();
        pred.push(&scores, &labels).unwrap();
    }
    for d in ComponentId::ALL {
        let ap = component_ap(&pred, &table, d).unwrap();
        assert_eq!(ap.mean, Some(1.0), "{d:?}");
        assert!(ap.per_class.iter().flatten().all(|&v| v == 1.0));
    }
}

#[test]
fn top_five_skips_undefined_classes() {
    let aps = [Some(0.9), None, Some(0.1), Some(0.8), Some(0.8), Some(0.6), Some(0.5)];
    let got: Vec<usize> = top_k(&aps, 5).into_iter().map(|(c, _)| c).collect();
    assert_eq!(got, vec![0, 3, 4, 5, 6]);
}

fn linear_stub() -> (LinearClassifier, Vec<AttackItem>) {
    let w: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 - 2.0 + 0.1 * i as f64).collect();
    let model = LinearClassifier::binary([4, 4, 1], w, -0.4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let items = (0..6)
        .map(|id| {
            let x = Tensor::new(vec![4, 4, 1], (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
            AttackItem { id, label: model.predict(&x).unwrap(), image: x }
        })
        .collect();
    (model, items)
}

#[test]
fn curve_svg_points_follow_linear_closed_form() {
    let (model, items) = linear_stub();
    let cfg = AttackConfig { norm: Norm::L2, tolerance: 1e-4, ..Default::default() };
    let fractions = [0.25, 0.5, 1.0];
    let (curve, _) = robustness_curve(&model, &items, MaskSource::Explainer(Method::Grad), &fractions, &cfg, &ExplainConfig::default()).unwrap();
    let w = &model.weights()[1];
    let mut order: Vec<usize> = (0..16).collect();
    order.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
    for (k, &p) in fractions.iter().enumerate() {
        let top = &order[..(p * 16.0).round() as usize];
        let dual = top.iter().map(|&i| w[i] * w[i]).sum::<f64>().sqrt();
        let want = items.iter().map(|it| (it.image.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - 0.4).abs() / dual).sum::<f64>() / items.len() as f64;
        let got = curve.relevant[k].unwrap();
        assert!((got - want).abs() <= 2.0 * cfg.tolerance, "fraction {p}: {got} vs {want}");
    }
    assert_eq!(curve.irrelevant[2], None);

    let svg = curve_svg(std::slice::from_ref(&curve), "stub");
    let pts = parse_svg_points(&svg);
    assert_eq!(pts.len(), 5);
    for (explainer, set, f, e) in pts {
        assert_eq!(explainer, "grad");
        let k = fractions.iter().position(|&x| x == f).unwrap();
        let want = if set == "relevant" { curve.relevant[k] } else { curve.irrelevant[k] };
        assert_eq!(Some(e), want);
    }
}

#[test]
fn manifest_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = ReportWriter::new(dir.path()).unwrap();
    w.write("a.csv", b"x,y\n1,2\n").unwrap();
    w.write("sub/b.txt", b"hello").unwrap();
    w.finish(&serde_json::json!({"seed": 1})).unwrap();
    assert!(verify_manifest(dir.path()).unwrap().is_empty());

    let mut again = ReportWriter::open(dir.path()).unwrap();
    again.write("c.txt", b"more").unwrap();
    again.finish(&serde_json::json!({"seed": 1})).unwrap();
    assert!(verify_manifest(dir.path()).unwrap().is_empty());

    std::fs::write(dir.path().join("sub/b.txt"), b"HELLO").unwrap();
    assert_eq!(verify_manifest(dir.path()).unwrap(), vec!["sub/b.txt".to_string()]);
}
