use ivtrust::classifier::LinearClassifier;
use ivtrust::explain::{grad_saliency, integrated_gradients, top_fraction_mask, Aggregation, AttributionMap, Method};
use ivtrust::metrics::average_precision;
use ivtrust::robustness::{min_norm_attack, AttackConfig};
use ivtrust::tensor::{Norm, Tensor};
use ivtrust::{Classifier, FeatureMask};
use proptest::prelude::*;

/// AP from the rank of each positive, computed without sorting.
fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let rank = |i: usize| (0..scores.len()).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = rank(i);
            let hits = pos.iter().filter(|&&k| rank(k) <= r).count();
            hits as f64 / (r + 1) as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

fn attr_map(h: usize, w: usize, values: Vec<f64>) -> AttributionMap {
    AttributionMap { height: h, width: w, values, method: Method::Grad, class: 0, baseline: None }
}

fn shape_and(len: impl Fn(usize) -> BoxedStrategy<Vec<f64>>) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..7, 1usize..7).prop_flat_map(move |(h, w)| (Just(h), Just(w), len(h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_matches_rank_oracle(rows in prop::collection::vec((0u8..5, any::<bool>()), 1..40)) {
        let scores: Vec<f64> = rows.iter().map(|r| r.0 as f64 / 4.0).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let got = average_precision(&scores, &labels);
        let want = ap_oracle(&scores, &labels);
        match (got, want) {
            (Some(a), Some(b)) => {
                prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
                prop_assert!((0.0..=1.0).contains(&a));
            }
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn ap_is_one_when_positives_lead(n_pos in 1usize..10, n_neg in 0usize..10) {
        let scores: Vec<f64> = (0..n_pos + n_neg).map(|i| -(i as f64)).collect();
        let labels: Vec<bool> = (0..n_pos + n_neg).map(|i| i < n_pos).collect();
        prop_assert_eq!(average_precision(&scores, &labels), Some(1.0));
    }

    #[test]
    fn top_fraction_masks_nest_and_partition(
        (h, w, values) in shape_and(|n| prop::collection::vec(0.0f64..1.0, n).boxed()),
        p in 0.01f64..1.0,
        q in 0.01f64..1.0,
    ) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = attr_map(h, w, values);
        let (small, small_rest) = top_fraction_mask(&a, lo).unwrap();
        let (big, _) = top_fraction_mask(&a, hi).unwrap();
        let n = h * w;
        prop_assert_eq!(small.count(), (lo * n as f64).round() as usize);
        prop_assert!(small.is_subset_of(&big).unwrap());
        prop_assert!(small.is_disjoint(&small_rest).unwrap());
        prop_assert_eq!(small.union(&small_rest).unwrap().count(), n);
        let min_in = small.indices().iter().map(|&i| a.values[i]).fold(f64::INFINITY, f64::min);
        let max_out = small_rest.indices().iter().map(|&i| a.values[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(small.is_empty() || small_rest.is_empty() || min_in >= max_out);
    }

    #[test]
    fn complement_is_an_involution(bits in prop::collection::vec(any::<bool>(), 12)) {
        let m = FeatureMask::new(3, 4, bits).unwrap();
        let c = m.complement();
        prop_assert!(m.is_disjoint(&c).unwrap());
        let back = c.complement();
        prop_assert_eq!(back.bits(), m.bits());
    }

    #[test]
    fn saliency_of_linear_model_is_weight_magnitude(
        (h, w, weights) in shape_and(|n| prop::collection::vec(-2.0f64..2.0, 2 * n).boxed()),
        x in prop::collection::vec(0.0f64..1.0, 72),
    ) {
        let model = LinearClassifier::binary([h, w, 2], weights.clone(), 0.3).unwrap();
        let x = Tensor::new(vec![h, w, 2], x[..2 * h * w].to_vec()).unwrap();
        let s = grad_saliency(&model, &x, 1, Aggregation::SumAbs).unwrap();
        for (k, v) in s.values.iter().enumerate() {
            prop_assert!((v - weights[2 * k].abs() - weights[2 * k + 1].abs()).abs() <= 1e-12);
        }
        let g = model.class_gradient(&x, 1).unwrap();
        prop_assert_eq!(g.data(), &weights[..]);
    }

    #[test]
    fn ig_is_complete_on_linear_model(
        (h, w, weights) in shape_and(|n| prop::collection::vec(-2.0f64..2.0, n).boxed()),
        x in prop::collection::vec(0.0f64..1.0, 36),
        steps in 1usize..20,
    ) {
        let model = LinearClassifier::binary([h, w, 1], weights, -0.2).unwrap();
        let x = Tensor::new(vec![h, w, 1], x[..h * w].to_vec()).unwrap();
        let ig = integrated_gradients(&model, &x, &Tensor::zeros(&[h, w, 1]), 1, steps, Aggregation::SumAbs).unwrap();
        prop_assert!(ig.completeness_residual() <= 1e-9 * (1.0 + ig.delta_f.abs()), "{}", ig.completeness_residual());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn attack_matches_linear_closed_form(
        weights in prop::collection::vec(-2.0f64..2.0, 16),
        x in prop::collection::vec(0.0f64..1.0, 16),
        bits in prop::collection::vec(any::<bool>(), 16),
        bias in -1.0f64..1.0,
        linf in any::<bool>(),
    ) {
        let model = LinearClassifier::binary([4, 4, 1], weights.clone(), bias).unwrap();
        let x = Tensor::new(vec![4, 4, 1], x).unwrap();
        let f: f64 = weights.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>() + bias;
        let mask = FeatureMask::new(4, 4, bits.clone()).unwrap();
        let on: Vec<usize> = (0..16).filter(|&i| bits[i]).collect();
        let w_s: Vec<f64> = on.iter().map(|&i| weights[i]).collect();
        let norm = if linf { Norm::Linf } else { Norm::L2 };
        let dual = if linf { w_s.iter().map(|v| v.abs()).sum::<f64>() } else { w_s.iter().map(|v| v * v).sum::<f64>().sqrt() };
        prop_assume!(f.abs() > 0.05 && dual > 0.05);
        let y = model.predict(&x).unwrap();
        let truth = f.abs() / dual;
        let cfg = AttackConfig { norm, epsilon_max: 10.0 * truth, tolerance: 1e-4, ..Default::default() };
        let (eps, ok, delta, _) = min_norm_attack(&model, &x, y, &mask, &cfg, 0).unwrap();
        prop_assert!(ok);
        prop_assert!(eps >= truth * (1.0 - 1e-9), "{eps} below the minimum {truth}");
        prop_assert!(eps - truth <= 2.0 * cfg.tolerance, "{eps} vs {truth}");
        for i in (0..16).filter(|&i| !bits[i]) {
            prop_assert_eq!(delta.data()[i].to_bits(), 0.0f64.to_bits());
        }
        prop_assert_ne!(model.predict(&x.add(&delta).unwrap()).unwrap(), y);
    }
}
