//! Reverse-mode gradients against central finite differences in f64.

use phds_core::autodiff::{GateKind, Graph, Var};
use phds_core::model::{Binder, Model, ModelConfig, RouterNorm, Sparsity};
use phds_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 100;
const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;
/// Absolute floor below which both gradients count as zero.
const ABS_FLOOR: f64 = 1e-8;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

fn close(a: f64, n: f64) -> bool {
    let diff = (a - n).abs();
    diff <= ABS_FLOOR || diff <= REL_TOL * a.abs().max(n.abs())
}

/// Builds the op from leaves holding `inputs`, projects its output onto a
/// fixed random tensor, and compares every input gradient with central
/// differences of that projection.
fn check<F>(name: &str, rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>], w: &Tensor<f64>| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let leaves: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &leaves);
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let gs = leaves
            .iter()
            .map(|&l| grads.get(l).unwrap().clone())
            .collect();
        (g.value(loss).item(), gs)
    };
    let out_shape = {
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &leaves);
        g.value(out).shape().to_vec()
    };
    let w = rand_tensor(rng, &out_shape, 1.0);
    let (_, grads) = eval(&inputs, &w);
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[e] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[e] -= STEP;
            let fd = (eval(&plus, &w).0 - eval(&minus, &w).0) / (2.0 * STEP);
            let an = grads[i].data()[e];
            assert!(
                close(an, fd),
                "{name}: input {i} elem {e}: analytic {an} vs numeric {fd}"
            );
        }
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.gen_range(1..5),
        rng.gen_range(1..5),
        rng.gen_range(1..5),
    )
}

pub fn matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..TRIALS {
        let (m, k, n) = dims(&mut rng);
        let a = rand_tensor(&mut rng, &[m, k], 1.0);
        let b = rand_tensor(&mut rng, &[k, n], 1.0);
        check("matmul", &mut rng, vec![a.clone(), b], |g, v| {
            g.matmul(v[0], v[1]).unwrap()
        });
        let bt = rand_tensor(&mut rng, &[n, k], 1.0);
        check("matmul_bt", &mut rng, vec![a, bt], |g, v| {
            g.matmul_bt(v[0], v[1]).unwrap()
        });
    }
}

pub fn elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..TRIALS {
        let (m, n, _) = dims(&mut rng);
        let a = rand_tensor(&mut rng, &[m, n], 2.0);
        let b = rand_tensor(&mut rng, &[m, n], 2.0);
        let s: f64 = rng.gen_range(-3.0..3.0);
        check("add", &mut rng, vec![a.clone(), b.clone()], |g, v| {
            g.add(v[0], v[1]).unwrap()
        });
        check("mul", &mut rng, vec![a.clone(), b], |g, v| {
            g.mul(v[0], v[1]).unwrap()
        });
        check("scale", &mut rng, vec![a.clone()], move |g, v| {
            g.scale(v[0], s).unwrap()
        });
        check("silu", &mut rng, vec![a.clone()], |g, v| {
            g.silu(v[0]).unwrap()
        });
        check("sum", &mut rng, vec![a.clone()], |g, v| {
            g.sum(v[0]).unwrap()
        });
        check("mean", &mut rng, vec![a], |g, v| g.mean(v[0]).unwrap());
    }
}

pub fn softmax_and_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..TRIALS {
        let (m, n, _) = dims(&mut rng);
        let n = n + 1;
        let x = rand_tensor(&mut rng, &[m, n], 3.0);
        check("softmax_rows", &mut rng, vec![x.clone()], |g, v| {
            g.softmax_rows(v[0]).unwrap()
        });
        let scale = rand_tensor(&mut rng, &[n], 1.5);
        let offset = rand_tensor(&mut rng, &[n], 1.0);
        check(
            "layer_norm",
            &mut rng,
            vec![x.clone(), scale, offset],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        );
        let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        check("cross_entropy", &mut rng, vec![x.clone()], move |g, v| {
            g.cross_entropy(v[0], &targets).unwrap()
        });
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
        check("weighted_col_mean", &mut rng, vec![x], move |g, v| {
            g.weighted_col_mean(v[0], w.clone()).unwrap()
        });
    }
}

pub fn indexing_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..TRIALS {
        let (rows, d, n) = dims(&mut rng);
        let table = rand_tensor(&mut rng, &[rows, d], 1.0);
        let ids: Vec<usize> = (0..n + 1).map(|_| rng.gen_range(0..rows)).collect();
        let ids2 = ids.clone();
        check("embedding", &mut rng, vec![table.clone()], move |g, v| {
            g.embedding(v[0], &ids).unwrap()
        });
        check("gather_rows", &mut rng, vec![table.clone()], move |g, v| {
            g.gather_rows(v[0], &ids2).unwrap()
        });
        let col = rng.gen_range(0..d);
        let pick_rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..rows)).collect();
        check("pick", &mut rng, vec![table.clone()], move |g, v| {
            g.pick(v[0], &pick_rows, col).unwrap()
        });
        let s = rand_tensor(&mut rng, &[rows, 1], 2.0);
        check("mul_rows", &mut rng, vec![table.clone(), s], |g, v| {
            g.mul_rows(v[0], v[1]).unwrap()
        });
        let a = rand_tensor(&mut rng, &[n, d], 1.0);
        let b = rand_tensor(&mut rng, &[n, d], 1.0);
        let ra: Vec<usize> = (0..n).map(|_| rng.gen_range(0..rows)).collect();
        let rb: Vec<usize> = (0..n).map(|_| rng.gen_range(0..rows)).collect();
        check("combine_rows", &mut rng, vec![a, b], move |g, v| {
            g.combine_rows(rows, d, vec![(v[0], ra.clone()), (v[1], rb.clone())])
                .unwrap()
        });
    }
}

pub fn soft_mask_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kinds_of = [GateKind::Kept, GateKind::Epsilon, GateKind::Dropped];
    for trial in 0..TRIALS {
        let (rows, cols, _) = dims(&mut rng);
        let cols = cols + 1;
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.05..1.0)).collect();
        let p = Tensor::from_f64(vec![rows, cols], &data).unwrap();
        let mut kinds: Vec<GateKind> = (0..rows * cols)
            .map(|_| kinds_of[rng.gen_range(0..3)])
            .collect();
        for r in 0..rows {
            kinds[r * cols] = GateKind::Kept;
        }
        let normalize = trial % 2 == 1;
        check("soft_mask", &mut rng, vec![p], move |g, v| {
            g.soft_mask(v[0], kinds.clone(), 1e-3, normalize).unwrap()
        });
    }
}

pub fn causal_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..TRIALS {
        let batch = rng.gen_range(1..3);
        let seq = rng.gen_range(1..5);
        let heads = rng.gen_range(1..3);
        let dh = rng.gen_range(1..4);
        let qkv = rand_tensor(&mut rng, &[batch * seq, 3 * heads * dh], 1.5);
        check("causal_attention", &mut rng, vec![qkv], move |g, v| {
            g.causal_attention(v[0], batch, seq, heads).unwrap()
        });
    }
}

fn tiny_config(norm: RouterNorm) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        n_experts: 4,
        d_expert: 5,
        k_pre: 3,
        epsilon: 1e-2,
        router_norm: norm,
        vocab_size: 13,
        context_len: 6,
        ffn_matrices_per_expert: 3,
        learned_positions: true,
        tie_embeddings: true,
    }
}

/// Loss and the kept/ε pattern of every layer, for one router weight value.
fn model_loss(
    model: &Model<f64>,
    ids: &[usize],
    targets: &[usize],
    k: usize,
) -> (f64, Vec<Vec<Vec<usize>>>) {
    let sp = Sparsity::resolve(model, k, false).unwrap();
    let mut g = Graph::new();
    let mut b = Binder::frozen();
    let out = model.forward(&mut g, &mut b, ids, 2, 3, sp).unwrap();
    let ce = g.cross_entropy(out.logits, targets).unwrap();
    let lb = g.scale(out.lb_loss, 0.1).unwrap();
    let total = g.add(ce, lb).unwrap();
    (g.value(total).item(), out.topk)
}

pub fn end_to_end_router_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    let mut trial = 0u64;
    while checked < TRIALS {
        trial += 1;
        let norm = if trial % 2 == 0 {
            RouterNorm::NormalizedSoftmaxK
        } else {
            RouterNorm::UnnormalizedTopkSoftmax
        };
        let mut model = Model::<f32>::init(tiny_config(norm), trial)
            .unwrap()
            .cast::<f64>();
        // Larger router weights so the top-k sets are well separated.
        for layer in &mut model.weights.layers {
            for w in layer.router.data_mut() {
                *w *= 40.0;
            }
        }
        let ids: Vec<usize> = (0..6).map(|_| rng.gen_range(0..13)).collect();
        let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..13)).collect();
        let k = rng.gen_range(1..=3);
        let sp = Sparsity::resolve(&model, k, false).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(|n: &str| n.ends_with(".router"));
        let out = model.forward(&mut g, &mut b, &ids, 2, 3, sp).unwrap();
        let ce = g.cross_entropy(out.logits, &targets).unwrap();
        let lb = g.scale(out.lb_loss, 0.1).unwrap();
        let total = g.add(ce, lb).unwrap();
        let grads = g.backward(total).unwrap();
        let (_, base_sets) = model_loss(&model, &ids, &targets, k);
        let layer = rng.gen_range(0..2);
        let name = format!("layers.{layer}.router");
        let grad = grads.get(b.bound()[&name]).unwrap().clone();
        let e = rng.gen_range(0..grad.numel());
        let mut plus = model.clone();
        plus.weights.layers[layer].router.data_mut()[e] += STEP;
        let mut minus = model.clone();
        minus.weights.layers[layer].router.data_mut()[e] -= STEP;
        let (lp, sp_sets) = model_loss(&plus, &ids, &targets, k);
        let (lm, sm_sets) = model_loss(&minus, &ids, &targets, k);
        if sp_sets != base_sets || sm_sets != base_sets {
            continue;
        }
        let fd = (lp - lm) / (2.0 * STEP);
        let an = grad.data()[e];
        assert!(
            close(an, fd),
            "router {name}[{e}] k={k}: analytic {an} vs numeric {fd}"
        );
        checked += 1;
    }
}

/// Every check above; panics on the first mismatch.
pub fn all() {
    matmul_family();
    elementwise();
    softmax_and_norms();
    indexing_ops();
    soft_mask_both_modes();
    causal_attention();
    end_to_end_router_weights();
}
