use proptest::prelude::*;
use steerkit::model_io::{random_model, Checkpoint};
use steerkit::probing::{gradient, loss, train_probe, ProbeFeature, ProbeHyper};
use steerkit::{Error, ModelConfig};

/// Direct log-loss, valid for the moderate logits generated below.
fn naive_loss(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[u8], l2: f64) -> f64 {
    let n = xs.len() as f64;
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b;
        let p = 1.0 / (1.0 + (-z).exp());
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    total / n + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

fn batch() -> impl Strategy<Value = (Vec<f64>, f64, Vec<Vec<f64>>, Vec<u8>, f64)> {
    (1usize..6, 2usize..12).prop_flat_map(|(d, n)| {
        (
            prop::collection::vec(-1.0..1.0f64, d),
            -1.0..1.0f64,
            prop::collection::vec(prop::collection::vec(-2.0..2.0f64, d), n),
            prop::collection::vec(0u8..=1, n),
            0.0..0.1f64,
        )
    })
}

proptest! {
    #[test]
    fn loss_matches_direct_formula((w, b, xs, ys, l2) in batch()) {
        let got = loss(&w, b, &xs, &ys, l2);
        let want = naive_loss(&w, b, &xs, &ys, l2);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn gradient_matches_central_differences((w, b, xs, ys, l2) in batch()) {
        let (gw, gb) = gradient(&w, b, &xs, &ys, l2);
        let h = 1e-6;
        let mut fd = Vec::with_capacity(w.len() + 1);
        for i in 0..w.len() {
            let (mut up, mut dn) = (w.clone(), w.clone());
            up[i] += h;
            dn[i] -= h;
            fd.push((naive_loss(&up, b, &xs, &ys, l2) - naive_loss(&dn, b, &xs, &ys, l2)) / (2.0 * h));
        }
        fd.push((naive_loss(&w, b + h, &xs, &ys, l2) - naive_loss(&w, b - h, &xs, &ys, l2)) / (2.0 * h));
        let analytic: Vec<f64> = gw.iter().copied().chain([gb]).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
        prop_assert!(norm(&diff) <= 1e-4 * norm(&fd).max(1e-8), "{analytic:?} vs {fd:?}");
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), layers in 1usize..3, heads in 1usize..4, dh in 1usize..5) {
        let cfg = ModelConfig::new(layers, heads, heads * dh * 2, 13);
        let ck = random_model(&cfg, seed).unwrap().to_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, ck);
    }
}

fn feature(i: usize, v: Vec<f32>, label: u8) -> ProbeFeature {
    ProbeFeature {
        pair_index: i,
        vector: v,
        label,
    }
}

#[test]
fn separable_data_is_learned() {
    let feats: Vec<ProbeFeature> = (0..40)
        .map(|i| {
            let y = (i % 2) as u8;
            let s = if y == 1 { 1.0 } else { -1.0 };
            feature(i, vec![s * (1.0 + (i as f32) * 0.01), (i as f32).sin()], y)
        })
        .collect();
    let probe = train_probe(&feats, &ProbeHyper::default()).unwrap();
    assert_eq!(probe.accuracy(&feats), 1.0);
    assert!(probe.w[0] > 0.0);
}

#[test]
fn training_is_deterministic_and_descends() {
    let feats: Vec<ProbeFeature> = (0..30)
        .map(|i| {
            feature(
                i,
                vec![(i as f32 * 1.7).cos(), (i as f32 * 0.3).sin()],
                (i % 3 == 0) as u8,
            )
        })
        .collect();
    let h = ProbeHyper::default();
    let a = train_probe(&feats, &h).unwrap();
    assert_eq!(a, train_probe(&feats, &h).unwrap());
    let xs: Vec<Vec<f64>> = feats.iter().map(|f| a.standardize(&f.vector)).collect();
    let ys: Vec<u8> = feats.iter().map(|f| f.label).collect();
    let start = loss(&[0.0, 0.0], 0.0, &xs, &ys, h.l2);
    assert!(loss(&a.w, a.b, &xs, &ys, h.l2) < start);
}

#[test]
fn constant_feature_uses_the_floor() {
    let feats: Vec<ProbeFeature> = (0..10)
        .map(|i| feature(i, vec![2.0, i as f32], (i >= 5) as u8))
        .collect();
    let probe = train_probe(&feats, &ProbeHyper::default()).unwrap();
    assert_eq!(probe.std[0], 1e-6);
    assert!(probe.w.iter().all(|w| w.is_finite()));
}

#[test]
fn single_class_is_rejected() {
    let feats: Vec<ProbeFeature> = (0..4).map(|i| feature(i, vec![i as f32], 1)).collect();
    assert!(matches!(
        train_probe(&feats, &ProbeHyper::default()),
        Err(Error::DegenerateClass(_))
    ));
    assert!(matches!(
        train_probe(&[], &ProbeHyper::default()),
        Err(Error::DegenerateClass(_))
    ));
}
