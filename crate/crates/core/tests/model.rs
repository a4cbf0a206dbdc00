use phds_core::data::{eval_windows, make_mc_task, tokenize, McSpec};
use phds_core::eval::{evaluate, sweep, EvalSet};
use phds_core::model::flops::flops_per_token;
use phds_core::model::{soft_mask, Binder, Expert, Sparsity};
use phds_core::tensor::{cross_entropy, matmul, silu, softmax, Tensor};
use phds_core::trainer::checkpoint::{encode, CheckpointMeta};
use phds_core::{Graph, Model, ModelConfig, RouterNorm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(k_pre: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(k_pre);
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_experts = 6;
    c.d_expert = 12;
    c.context_len = 16;
    c
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], v).unwrap()
}

/// Expert FFN on every row, computed directly.
fn expert_dense(ex: &Expert<f64>, h: &Tensor<f64>) -> Tensor<f64> {
    let up = matmul(h, &ex.w_up).unwrap();
    let act: Vec<f64> = match &ex.w_gate {
        Some(wg) => {
            let g = matmul(h, wg).unwrap();
            g.data()
                .iter()
                .zip(up.data())
                .map(|(&a, &u)| silu(a) * u)
                .collect()
        }
        None => up.data().iter().map(|&u| silu(u)).collect(),
    };
    let a = Tensor::new(up.shape().to_vec(), act).unwrap();
    matmul(&a, &ex.w_down).unwrap()
}

fn run_moe(model: &Model<f64>, h: &Tensor<f64>, sp: Sparsity) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut b = Binder::frozen();
    let hv = g.constant(h.clone());
    let (out, ..) = model.moe_layer(&mut g, &mut b, 0, hv, sp).unwrap();
    g.value(out).clone()
}

#[test]
fn moe_layer_matches_dense_loop_over_all_experts() {
    for norm in [
        RouterNorm::UnnormalizedTopkSoftmax,
        RouterNorm::NormalizedSoftmaxK,
    ] {
        for (k, k_pre) in [(1, 1), (1, 3), (2, 3), (3, 3), (4, 6), (6, 6)] {
            let mut cfg = small(k_pre);
            cfg.router_norm = norm;
            cfg.epsilon = 1e-3;
            let model = Model::<f64>::init(cfg.clone(), 4).unwrap();
            let h = random(9, cfg.d_model, 10 + k as u64);
            let got = run_moe(&model, &h, Sparsity { k, k_pre, aux_k: k });

            let lw = &model.weights.layers[0];
            let probs = softmax(&matmul(&h, &lw.router).unwrap(), 1).unwrap();
            let gates = soft_mask(&probs, k_pre, k, cfg.epsilon, norm)
                .unwrap()
                .gates;
            let mut want = vec![0.0; 9 * cfg.d_model];
            for (j, ex) in lw.experts.iter().enumerate() {
                let y = expert_dense(ex, &h);
                for r in 0..9 {
                    let gj = gates.row(r)[j];
                    for c in 0..cfg.d_model {
                        want[r * cfg.d_model + c] += gj * y.row(r)[c];
                    }
                }
            }
            for (a, b) in got.data().iter().zip(&want) {
                assert!(
                    (a - b).abs() <= 1e-5,
                    "k={k} k_pre={k_pre} {norm:?}: {a} vs {b}"
                );
            }
        }
    }
}

#[test]
fn zero_epsilon_equals_hard_top_k_bitwise() {
    let mut cfg = small(5);
    cfg.epsilon = 0.0;
    let model = Model::<f32>::init(cfg.clone(), 8).unwrap();
    let h = random(11, cfg.d_model, 3).cast::<f32>();
    for k in 1..=5 {
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let hv = g.constant(h.clone());
        let soft = model
            .moe_layer(
                &mut g,
                &mut b,
                1,
                hv,
                Sparsity {
                    k,
                    k_pre: 5,
                    aux_k: k,
                },
            )
            .unwrap()
            .0;
        let hard = model
            .moe_layer(
                &mut g,
                &mut b,
                1,
                hv,
                Sparsity {
                    k,
                    k_pre: k,
                    aux_k: k,
                },
            )
            .unwrap()
            .0;
        assert!(g.value(soft).bitwise_eq(g.value(hard)), "k={k}");
    }
}

#[test]
fn one_hot_routing_returns_that_expert() {
    let mut cfg = small(1);
    cfg.router_norm = RouterNorm::NormalizedSoftmaxK;
    let mut model = Model::<f64>::init(cfg.clone(), 2).unwrap();
    let d = cfg.d_model;
    let mut router = vec![0.0; d * cfg.n_experts];
    for i in 0..d {
        router[i * cfg.n_experts + 3] = 1.0;
    }
    model.weights.layers[0].router = Tensor::new(vec![d, cfg.n_experts], router).unwrap();
    let h = Tensor::new(vec![1, d], (0..d).map(|i| 0.1 + i as f64 * 0.01).collect()).unwrap();
    let got = run_moe(
        &model,
        &h,
        Sparsity {
            k: 1,
            k_pre: 1,
            aux_k: 1,
        },
    );
    let want = expert_dense(&model.weights.layers[0].experts[3], &h);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn two_expert_mixture_weights() {
    // With E = 2 and k = k_pre = 2, gates are the softmax probabilities
    // themselves; a logit gap of ln(1.5) makes them [0.6, 0.4].
    let mut cfg = small(2);
    cfg.n_experts = 2;
    let mut model = Model::<f64>::init(cfg.clone(), 6).unwrap();
    let d = cfg.d_model;
    let mut router = vec![0.0; d * 2];
    router[0] = 1.5f64.ln();
    model.weights.layers[0].router = Tensor::new(vec![d, 2], router).unwrap();
    let mut hv = vec![0.3; d];
    hv[0] = 1.0;
    let h = Tensor::new(vec![1, d], hv).unwrap();
    let probs = softmax(&matmul(&h, &model.weights.layers[0].router).unwrap(), 1).unwrap();
    assert!((probs.data()[0] - 0.6).abs() < 1e-12);
    let got = run_moe(
        &model,
        &h,
        Sparsity {
            k: 2,
            k_pre: 2,
            aux_k: 2,
        },
    );
    let e1 = expert_dense(&model.weights.layers[0].experts[0], &h);
    let e2 = expert_dense(&model.weights.layers[0].experts[1], &h);
    for c in 0..d {
        let want = 0.6 * e1.data()[c] + 0.4 * e2.data()[c];
        assert!((got.data()[c] - want).abs() <= 1e-9);
    }
}

fn eval_set(text: &[u8], seq_len: usize) -> EvalSet {
    let corpus = tokenize(text).unwrap();
    let spec = McSpec {
        prompt_len: 6,
        continuation_len: 4,
        anchor: None,
    };
    EvalSet {
        windows: eval_windows(corpus.split(phds_core::data::Split::Val), seq_len, Some(6)).unwrap(),
        items: make_mc_task(&corpus, 12, 3, 1, spec).unwrap(),
        batch_size: 4,
    }
}

fn sample_text() -> Vec<u8> {
    (0..3000u32)
        .map(|i| b'a' + ((i * 7 + i / 13) % 23) as u8)
        .collect()
}

#[test]
fn uniform_output_has_perplexity_v() {
    let mut model = Model::<f32>::init(small(2), 1).unwrap();
    // A zero embedding table gives zero logits through the tied head.
    model.weights.embed = Tensor::zeros(model.weights.embed.shape());
    let set = eval_set(&sample_text(), 8);
    let r = evaluate(&model, &set, 2, false).unwrap();
    let v = model.config.vocab_size as f64;
    assert!((r.perplexity - v).abs() / v < 1e-5, "{}", r.perplexity);
}

#[test]
fn evaluation_is_pure_and_perplexity_is_exp_cross_entropy() {
    let model = Model::<f32>::init(small(3), 9).unwrap();
    let set = eval_set(&sample_text(), 8);
    let meta = CheckpointMeta::new(&model, 0, 9);
    let before = encode(&model, &meta);
    let a = evaluate(&model, &set, 2, false).unwrap();
    let b = evaluate(&model, &set, 2, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, encode(&model, &meta));

    let ids: Vec<usize> = set.windows.iter().flat_map(|w| w.0.clone()).collect();
    let targets: Vec<usize> = set.windows.iter().flat_map(|w| w.1.clone()).collect();
    let sp = Sparsity::resolve(&model, 2, false).unwrap();
    let logits = model
        .logits(&ids, set.windows.len(), 8, sp)
        .unwrap()
        .cast::<f64>();
    let ce = cross_entropy(&logits, &targets).unwrap();
    assert!((a.perplexity - ce.exp()).abs() / a.perplexity < 1e-6);
}

#[test]
fn sweep_agrees_with_evaluate_and_flops_rise() {
    let model = Model::<f32>::init(small(3), 5).unwrap();
    let set = eval_set(&sample_text(), 8);
    let one = sweep(&model, &set, &[3], false).unwrap();
    assert_eq!(one, vec![evaluate(&model, &set, 3, false).unwrap()]);
    let all = sweep(&model, &set, &[3, 1, 2], false).unwrap();
    assert_eq!(all.iter().map(|r| r.k_ev).collect::<Vec<_>>(), [1, 2, 3]);
    assert!(all
        .windows(2)
        .all(|w| w[1].flops_per_token > w[0].flops_per_token));
    assert_eq!(
        all[0].flops_per_token,
        flops_per_token(&model.config, 1).unwrap().flops_per_token
    );
    assert!(sweep(&model, &set, &[4], false).is_err());
    assert_eq!(sweep(&model, &set, &[5], true).unwrap()[0].k_ev, 5);
}
