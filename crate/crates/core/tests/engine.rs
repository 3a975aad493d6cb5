use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerkit::engine::{
    capture_last_token, forward, forward_traced, generate_greedy, generate_with_states, Injection,
    MlpKind, NormKind, PosKind, Session,
};
use steerkit::model_io::{random_model, Checkpoint, Tensor};
use steerkit::{ComponentId, Error, InjectionSet, Model, ModelConfig};

fn config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n_heads = rng.random_range(2..=4);
    let d_head = 2 * rng.random_range(4..=8);
    let mut c = ModelConfig::new(rng.random_range(2..=3), n_heads, n_heads * d_head, 37);
    c.norm_kind = if rng.random() {
        NormKind::LayerNorm
    } else {
        NormKind::RmsNorm
    };
    c.mlp_kind = if rng.random() {
        MlpKind::Gelu
    } else {
        MlpKind::SiluGated
    };
    c.pos_kind = if rng.random() {
        PosKind::Learned
    } else {
        PosKind::Rotary
    };
    c.max_seq_len = 24;
    c
}

fn prompt(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.random_range(0..vocab as u32))
        .collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn residual_decomposition_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in 0..6 {
        let cfg = config(&mut rng);
        let model = random_model(&cfg, s).unwrap();
        for _ in 0..5 {
            let len = rng.random_range(1..12);
            let ids = prompt(&mut rng, cfg.vocab_size, len);
            let (_, trace) = forward_traced(&model, &ids, &InjectionSet::empty(), &[]).unwrap();
            for layer in &trace {
                let rebuilt: Vec<f64> = (0..cfg.d_model)
                    .map(|i| {
                        f64::from(layer.x_in[i])
                            + layer.heads.iter().map(|h| f64::from(h[i])).sum::<f64>()
                    })
                    .collect();
                let diff: Vec<f64> = rebuilt
                    .iter()
                    .zip(&layer.attn_out)
                    .map(|(r, &a)| r - f64::from(a))
                    .collect();
                let a: Vec<f64> = layer.attn_out.iter().map(|&v| f64::from(v)).collect();
                assert!(l2(&diff) / l2(&a) <= 1e-5);
                for i in 0..cfg.d_model {
                    assert_eq!(layer.x_out[i], layer.attn_out[i] + layer.mlp[i]);
                }
            }
        }
    }
}

#[test]
fn attention_rows_are_causal_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = config(&mut rng);
    let model = random_model(&cfg, 9).unwrap();
    for len in 1..10 {
        let ids = prompt(&mut rng, cfg.vocab_size, len);
        let (_, trace) = forward_traced(&model, &ids, &InjectionSet::empty(), &[]).unwrap();
        for layer in &trace {
            for row in &layer.attn_weights {
                assert_eq!(row.len(), len);
                assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
                assert!(row.iter().all(|&w| w >= 0.0));
            }
        }
    }
}

#[test]
fn causality_prefix_logits_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = config(&mut rng);
    let model = random_model(&cfg, 4).unwrap();
    let ids = prompt(&mut rng, cfg.vocab_size, 12);
    let mut session = Session::new(&model, &InjectionSet::empty()).unwrap();
    for (i, &t) in ids.iter().enumerate() {
        let stepped = session.step(t, &[], false).unwrap();
        let prefix = forward(&model, &ids[..=i], &InjectionSet::empty(), &[]).unwrap();
        assert_eq!(stepped.logits, prefix.logits);
    }
}

#[test]
fn cached_generation_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in 0..4 {
        let cfg = config(&mut rng);
        let model = random_model(&cfg, s).unwrap();
        let ids = prompt(&mut rng, cfg.vocab_size, 5);
        let gen = generate_with_states(&model, &ids, &InjectionSet::empty(), 8, &[]).unwrap();
        let mut seq = ids.clone();
        for &t in &gen.tokens {
            let out = forward(&model, &seq, &InjectionSet::empty(), &[]).unwrap();
            let best = steerkit::engine::argmax(&out.logits);
            assert_eq!(best, t);
            seq.push(t);
        }
        assert_eq!(gen.tokens.len(), 8);
        assert_eq!(gen.states.len(), 8);
    }
}

#[test]
fn stop_token_is_excluded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = config(&mut rng);
    let model = random_model(&cfg, 5).unwrap();
    let ids = prompt(&mut rng, cfg.vocab_size, 4);
    let free = generate_greedy(&model, &ids, &InjectionSet::empty(), 6, &[]).unwrap();
    let stopped = generate_greedy(&model, &ids, &InjectionSet::empty(), 6, &[free[0]]).unwrap();
    assert!(stopped.is_empty());
    let g = generate_with_states(&model, &ids, &InjectionSet::empty(), 6, &[free[0]]).unwrap();
    assert_eq!(g.states.len(), 1);
}

#[test]
fn injection_is_additive_and_alpha_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = config(&mut rng);
    let model = random_model(&cfg, 6).unwrap();
    let comps = cfg.components();
    let ids = prompt(&mut rng, cfg.vocab_size, 7);
    for _ in 0..10 {
        let c = comps[rng.random_range(0..comps.len())];
        let bias: Vec<f32> = (0..cfg.d_model)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let alpha: f32 = rng.random_range(0.1..5.0);
        let before = capture_last_token(&model, &ids, &[c]).unwrap();
        let inj = InjectionSet::new(vec![Injection {
            component: c,
            bias: bias.clone(),
            alpha,
        }])
        .unwrap();
        let after = forward(&model, &ids, &inj, &[c]).unwrap();
        for (i, b) in bias.iter().enumerate() {
            let want = before[0].vector[i] + alpha * b;
            assert!((after.captured[0].vector[i] - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
        let zero = InjectionSet::new(vec![Injection {
            component: c,
            bias,
            alpha: 0.0,
        }])
        .unwrap();
        let plain = forward(&model, &ids, &InjectionSet::empty(), &[]).unwrap();
        assert_eq!(
            forward(&model, &ids, &zero, &[]).unwrap().logits,
            plain.logits
        );
    }
}

#[test]
fn capture_returns_every_requested_component() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = config(&mut rng);
    let model = random_model(&cfg, 7).unwrap();
    let ids = prompt(&mut rng, cfg.vocab_size, 3);
    let recs = capture_last_token(&model, &ids, &cfg.components()).unwrap();
    assert_eq!(recs.len(), cfg.n_components());
    for (r, c) in recs.iter().zip(cfg.components()) {
        assert_eq!(r.component, c);
        assert_eq!(r.vector.len(), cfg.d_model);
        assert_eq!(r.token_position, 2);
    }
}

#[test]
fn errors_for_bad_inputs() {
    let cfg = ModelConfig::new(1, 2, 8, 5);
    let model = random_model(&cfg, 0).unwrap();
    let none = InjectionSet::empty();
    assert!(matches!(
        forward(&model, &[9], &none, &[]),
        Err(Error::Vocab(_))
    ));
    let long = vec![0u32; cfg.max_seq_len + 1];
    assert!(matches!(
        forward(&model, &long, &none, &[]),
        Err(Error::Capacity(_))
    ));
    let near = vec![0u32; cfg.max_seq_len - 2];
    assert!(matches!(
        generate_greedy(&model, &near, &none, 3, &[]),
        Err(Error::Capacity(_))
    ));
    assert!(generate_greedy(&model, &[1], &none, 0, &[])
        .unwrap()
        .is_empty());
    let bad = InjectionSet::new(vec![Injection {
        component: ComponentId::head(0, 0),
        bias: vec![0.0; 3],
        alpha: 1.0,
    }])
    .unwrap();
    assert!(matches!(
        forward(&model, &[1], &bad, &[]),
        Err(Error::Shape(_))
    ));
}

/// One layer, one head, layernorm, learned positions; weights chosen at random.
fn single_head_model(rng: &mut ChaCha8Rng) -> (ModelConfig, Checkpoint) {
    let mut cfg = ModelConfig::new(1, 1, 6, 11);
    cfg.max_seq_len = 8;
    let mut ck = random_model(&cfg, 3).unwrap().to_checkpoint();
    for (name, t) in ck.tensors.iter_mut() {
        if name.ends_with(".gain") || name.ends_with(".shift") {
            for v in &mut t.data {
                *v = rng.random_range(0.5..1.5);
            }
        } else {
            for v in &mut t.data {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    (cfg, ck)
}

fn t64(t: &Tensor) -> Vec<f64> {
    t.data.iter().map(|&v| f64::from(v)).collect()
}

fn layer_norm64(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

fn vm(v: &[f64], m: &[f64], cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|c| v.iter().enumerate().map(|(r, x)| x * m[r * cols + c]).sum())
        .collect()
}

#[test]
fn single_head_matches_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (cfg, ck) = single_head_model(&mut rng);
    let model = Model::from_checkpoint(&ck).unwrap();
    let get = |n: &str| t64(&ck.tensors[n]);
    let d = cfg.d_model;
    let ids = [3u32, 7, 1, 4];
    let (emb, pos) = (get("tok_emb"), get("pos_emb"));
    let xs: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            (0..d)
                .map(|i| emb[t as usize * d + i] + pos[p * d + i])
                .collect()
        })
        .collect();
    let (g, b) = (get("blk.0.norm1.gain"), get("blk.0.norm1.shift"));
    let normed: Vec<Vec<f64>> = xs.iter().map(|x| layer_norm64(x, &g, &b)).collect();
    let q = vm(normed.last().unwrap(), &get("blk.0.attn.wq"), d);
    let ks: Vec<Vec<f64>> = normed
        .iter()
        .map(|x| vm(x, &get("blk.0.attn.wk"), d))
        .collect();
    let vs: Vec<Vec<f64>> = normed
        .iter()
        .map(|x| vm(x, &get("blk.0.attn.wv"), d))
        .collect();
    let scores: Vec<f64> = ks
        .iter()
        .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
        .collect();
    let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
    let mix: Vec<f64> = (0..d)
        .map(|i| {
            scores
                .iter()
                .zip(&vs)
                .map(|(s, v)| (s - mx).exp() / z * v[i])
                .sum()
        })
        .collect();
    let want = vm(&mix, &get("blk.0.attn.wo"), d);
    let got = capture_last_token(&model, &ids, &[ComponentId::head(0, 0)]).unwrap();
    for (g, w) in got[0].vector.iter().zip(&want) {
        assert!((f64::from(*g) - w).abs() <= 1e-5, "{g} vs {w}");
    }
}

#[test]
fn concurrent_forwards_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = config(&mut rng);
    let model = random_model(&cfg, 1).unwrap();
    let prompts: Vec<Vec<u32>> = (0..16)
        .map(|_| prompt(&mut rng, cfg.vocab_size, 6))
        .collect();
    let serial: Vec<Vec<f32>> = prompts
        .iter()
        .map(|p| {
            forward(&model, p, &InjectionSet::empty(), &[])
                .unwrap()
                .logits
        })
        .collect();
    let parallel = steerkit::par::map(&prompts, |_, p| {
        forward(&model, p, &InjectionSet::empty(), &[])
            .unwrap()
            .logits
    });
    assert_eq!(serial, parallel);
}
