use cotsat::compiler::{build_reglu_for_mul, build_reglu_for_relu, CompilerConfig, FloatWidth};
use cotsat::engine::{load_bundle, save_bundle, Dims, EngineError, Executor, ModelWeights};
use cotsat::vocab::Vocabulary;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: Dims = Dims {
    d_emb: 9,
    d_head: 3,
    d_mlp: 4,
    n_layers: 2,
    n_heads: 2,
    vocab_size: 11,
    context_len: 24,
};

/// Entries are zero about a third of the time so sparse paths get used.
fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.gen_bool(0.33) {
            0.0
        } else {
            rng.gen_range(-scale..scale)
        }
    })
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    random_matrix(rng, 1, n, scale).into_shape_with_order(n).unwrap()
}

fn random_model(seed: u64, width: FloatWidth) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = CompilerConfig {
        float_width: width,
        context_len: DIMS.context_len,
        ..CompilerConfig::default()
    };
    let mut w = ModelWeights::zeros(Vocabulary::sat(2), config, DIMS);
    w.position_lane = Some(DIMS.d_emb - 1);
    let (d, dh, dm) = (DIMS.d_emb, DIMS.d_head, DIMS.d_mlp);
    w.token_embedding = random_matrix(&mut rng, DIMS.vocab_size, d, 1.0);
    for layer in &mut w.layers {
        for h in &mut layer.heads {
            h.w_q = random_matrix(&mut rng, d, dh, 1.0);
            h.w_k = random_matrix(&mut rng, d, dh, 1.0);
            h.w_v = random_matrix(&mut rng, d, dh, 1.0);
        }
        layer.w_o = random_matrix(&mut rng, DIMS.n_heads * dh, d, 0.5);
        layer.mlp.w_1 = random_matrix(&mut rng, d, 2 * dm, 0.5);
        layer.mlp.b_1 = random_vector(&mut rng, 2 * dm, 0.5);
        layer.mlp.w_2 = random_matrix(&mut rng, dm, d, 0.5);
        layer.mlp.b_2 = random_vector(&mut rng, d, 0.5);
    }
    w.w_out = random_matrix(&mut rng, d, DIMS.vocab_size, 1.0);
    w.b_out = random_vector(&mut rng, DIMS.vocab_size, 1.0);
    if width == FloatWidth::F32 {
        round_all(&mut w);
    }
    w
}

fn round_all(w: &mut ModelWeights) {
    let r = |m: &mut Array2<f64>| m.mapv_inplace(|x| x as f32 as f64);
    let rv = |v: &mut Array1<f64>| v.mapv_inplace(|x| x as f32 as f64);
    r(&mut w.token_embedding);
    for layer in &mut w.layers {
        for h in &mut layer.heads {
            r(&mut h.w_q);
            r(&mut h.w_k);
            r(&mut h.w_v);
        }
        r(&mut layer.w_o);
        r(&mut layer.mlp.w_1);
        rv(&mut layer.mlp.b_1);
        r(&mut layer.mlp.w_2);
        rv(&mut layer.mlp.b_2);
    }
    r(&mut w.w_out);
    rv(&mut w.b_out);
}

/// Straightforward dense evaluation of the whole sequence, recomputed from
/// scratch: residual stream, causal softmax heads scaled by 1/sqrt(d_head),
/// gated MLP `(u1 * relu(u2))·W_2 + b_2`.
fn dense_logits(w: &ModelWeights, tokens: &[usize]) -> Vec<f64> {
    let n = tokens.len();
    let d = w.dims.d_emb;
    let dh = w.dims.d_head;
    let dm = w.dims.d_mlp;
    let mut x = Array2::<f64>::zeros((n, d));
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(i).assign(&w.token_embedding.row(t));
        if let Some(l) = w.position_lane {
            x[[i, l]] += i as f64;
        }
    }
    for layer in &w.layers {
        let mut concat = Array2::<f64>::zeros((n, w.dims.n_heads * dh));
        for (h, head) in layer.heads.iter().enumerate() {
            let q = x.dot(&head.w_q);
            let k = x.dot(&head.w_k);
            let v = x.dot(&head.w_v);
            for i in 0..n {
                let s: Vec<f64> = (0..=i).map(|j| q.row(i).dot(&k.row(j)) / (dh as f64).sqrt()).collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    for c in 0..dh {
                        concat[[i, h * dh + c]] += e[j] / z * v[[j, c]];
                    }
                }
            }
        }
        x = &x + &concat.dot(&layer.w_o);
        let u = x.dot(&layer.mlp.w_1) + &layer.mlp.b_1;
        let mut hidden = Array2::<f64>::zeros((n, dm));
        for i in 0..n {
            for c in 0..dm {
                hidden[[i, c]] = u[[i, c]] * u[[i, dm + c]].max(0.0);
            }
        }
        x = &x + &(hidden.dot(&layer.mlp.w_2) + &layer.mlp.b_2);
    }
    (x.row(n - 1).dot(&w.w_out) + &w.b_out).to_vec()
}

fn sequence(seed: u64, len: usize, w: &ModelWeights) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let bos = w.vocab.id("[BOS]").unwrap();
    std::iter::once(bos)
        .chain((1..len).map(|_| rng.gen_range(0..w.dims.vocab_size)))
        .collect()
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn executor_matches_dense_reference(seed in any::<u64>(), len in 1usize..=24) {
        let w = random_model(seed, FloatWidth::F64);
        let tokens = sequence(seed, len, &w);
        let exec = Executor::new(w.clone());
        let got = exec.forward(&tokens).unwrap();
        let want = dense_logits(&w, &tokens);
        prop_assert!(close(&got, &want), "{got:?} vs {want:?}");
    }

    #[test]
    fn incremental_logits_equal_prefix_recomputation(seed in any::<u64>(), len in 2usize..=24) {
        let w = random_model(seed, FloatWidth::F64);
        let tokens = sequence(seed, len, &w);
        let exec = Executor::new(w);
        let mut session = exec.session();
        for k in 0..len {
            session.push(tokens[k]).unwrap();
            let fresh = exec.forward(&tokens[..=k]).unwrap();
            prop_assert_eq!(session.last_logits(), fresh.as_slice());
        }
    }

    #[test]
    fn bundles_round_trip_bit_exactly(seed in any::<u64>(), wide in any::<bool>()) {
        let width = if wide { FloatWidth::F64 } else { FloatWidth::F32 };
        let mut w = random_model(seed, width);
        w.tags.insert("seed".into(), seed.to_string());
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&w, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        prop_assert_eq!(&back, &w);
        let tokens = sequence(seed, 10, &w);
        let a = Executor::new(w).forward(&tokens).unwrap();
        let b = Executor::new(back).forward(&tokens).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn zero_model_outputs_its_bias(seed in any::<u64>(), len in 1usize..=24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::zeros(Vocabulary::sat(2), CompilerConfig { context_len: 24, ..CompilerConfig::default() }, DIMS);
        w.b_out = random_vector(&mut rng, DIMS.vocab_size, 3.0);
        let tokens = sequence(seed, len, &w);
        prop_assert_eq!(Executor::new(w.clone()).forward(&tokens).unwrap(), w.b_out.to_vec());
    }

    #[test]
    fn relu_mlp_matches_direct_evaluation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, h, o) = (5, 7, 3);
        let w1 = random_matrix(&mut rng, n, h, 2.0);
        let b1 = random_vector(&mut rng, h, 2.0);
        let w2 = random_matrix(&mut rng, h, o, 2.0);
        let b2 = random_vector(&mut rng, o, 2.0);
        let mlp = build_reglu_for_relu(w1.clone(), b1.clone(), w2.clone(), b2.clone());
        for _ in 0..20 {
            let x = random_vector(&mut rng, n, 4.0);
            let want = (x.dot(&w1) + &b1).mapv(|v| v.max(0.0)).dot(&w2) + &b2;
            let got = mlp.eval(x.as_slice().unwrap());
            // Same terms, summed in a different order.
            prop_assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs())));
        }
    }

    #[test]
    fn mul_mlp_is_exact(seed in any::<u64>(), width in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = build_reglu_for_mul(width);
        for _ in 0..20 {
            let x = random_vector(&mut rng, 2 * width, 100.0);
            let want: Vec<f64> = (0..width).map(|i| x[i] * x[width + i]).collect();
            prop_assert_eq!(mlp.eval(x.as_slice().unwrap()), want);
        }
    }
}

#[test]
fn session_rejects_bad_sequences_without_changing_state() {
    let w = random_model(3, FloatWidth::F64);
    let bos = w.vocab.id("[BOS]").unwrap();
    let exec = Executor::new(w);
    let mut s = exec.session();
    assert!(matches!(s.push(0), Err(EngineError::MissingBos)));
    assert!(s.is_empty());
    s.push(bos).unwrap();
    let before = s.last_logits().to_vec();
    assert!(matches!(s.push(99), Err(EngineError::UnknownToken(99))));
    assert_eq!(s.len(), 1);
    assert_eq!(s.last_logits(), before.as_slice());
    for _ in 1..DIMS.context_len {
        s.push(0).unwrap();
    }
    assert!(matches!(
        s.push(0),
        Err(EngineError::ContextOverflow { context_len: 24 })
    ));
}

#[test]
fn unrepresentable_weights_are_refused_at_32_bits() {
    let mut w = random_model(5, FloatWidth::F32);
    w.b_out[0] = 0.1;
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(save_bundle(&w, dir.path()), Err(EngineError::Bundle(_))));
}
