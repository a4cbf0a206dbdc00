//! Decoder-only MoE transformer with a single shared router per layer and
//! normalization state banked per declared `k`.

mod aux;
mod config;
pub mod flops;
pub mod router;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

pub use aux::{KAux, KAuxBank, LoadBalanceStats};
pub use config::{ModelConfig, RouterNorm, LAYER_NORM_EPS};
pub use router::{check_sparsity, load_balance_loss, route, soft_mask, RouterDecision};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sparsity mis-specified: k={k} exceeds k_pre={k_pre}")]
    SparsityMisspecified { k: usize, k_pre: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no auxiliary state for k={0}")]
    MissingAuxEntry(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T = f32> {
    pub scale: Tensor<T>,
    pub offset: Tensor<T>,
}

impl<T: Scalar> Norm<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            scale: Tensor::full(&[d], T::one()),
            offset: Tensor::zeros(&[d]),
        }
    }

    fn map<U: Scalar>(&self, f: &impl Fn(&Tensor<T>) -> Tensor<U>) -> Norm<U> {
        Norm {
            scale: f(&self.scale),
            offset: f(&self.offset),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert<T = f32> {
    /// Gate projection `[d×d_expert]`; absent for two-matrix experts.
    pub w_gate: Option<Tensor<T>>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub attn_norm: Norm<T>,
    /// Packed query, key and value projections `[d×3d]`.
    pub wqkv: Tensor<T>,
    pub wo: Tensor<T>,
    pub moe_norm: Norm<T>,
    /// Router weights `W_r`, `[d×E]`, shared across every `k`.
    pub router: Tensor<T>,
    pub experts: Vec<Expert<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T = f32> {
    pub embed: Tensor<T>,
    pub positions: Option<Tensor<T>>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Norm<T>,
    /// Untied output projection `[V×d]`.
    pub head: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
    pub aux: KAuxBank<T>,
}

/// Resolved sparsity for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sparsity {
    /// Experts kept at full weight per token.
    pub k: usize,
    /// Size of the candidate set that receives ε.
    pub k_pre: usize,
    /// Which aux bank entry supplies the post-MoE norms.
    pub aux_k: usize,
}

impl Sparsity {
    /// Validates `k` against the model. With `override_bound`, `k` may exceed
    /// `k_pre` up to `E`; the candidate set then widens to `k` and the norms
    /// of the largest banked entry are reused.
    pub fn resolve<T: Scalar>(
        model: &Model<T>,
        k: usize,
        override_bound: bool,
    ) -> Result<Self, ModelError> {
        let cfg = &model.config;
        if k > cfg.k_pre && override_bound {
            check_sparsity(k, k, cfg.n_experts)?;
            let aux_k = if model.aux.contains(k) { k } else { cfg.k_pre };
            model.aux.get(aux_k)?;
            return Ok(Self { k, k_pre: k, aux_k });
        }
        check_sparsity(k, cfg.k_pre, cfg.n_experts)?;
        model.aux.get(k)?;
        Ok(Self {
            k,
            k_pre: cfg.k_pre,
            aux_k: k,
        })
    }
}

/// Binds named model tensors to graph leaves on first use, so a parameter
/// that the forward pass never touches gets no leaf at all.
pub struct Binder<'a> {
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            trainable: Box::new(trainable),
            bound: BTreeMap::new(),
        }
    }

    /// Every tensor becomes a constant.
    pub fn frozen() -> Self {
        Self::new(|_| false)
    }

    pub fn bind<T: Scalar>(&mut self, g: &mut Graph<T>, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = if (self.trainable)(name) {
            g.param(value.clone())
        } else {
            g.constant(value.clone())
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }
}

/// Per-layer `(f_i, P_i)` routing statistics of a batch.
pub type RoutingStats = Vec<(Vec<f64>, Vec<f64>)>;

pub struct Forward {
    /// `[B·L × V]`.
    pub logits: Var,
    /// Load-balance loss averaged over layers, `[1]`.
    pub lb_loss: Var,
    pub routing: RoutingStats,
    /// Per layer, each token's top-`k_pre` experts by descending probability.
    pub topk: Vec<Vec<Vec<usize>>>,
}

pub fn aux_name(k: usize, layer: usize, part: &str) -> String {
    format!("aux.k{k}.layers.{layer}.post_norm.{part}")
}

fn init_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ks = 1..=config.k_pre;
        Ok(Self::build(config, ks, |shape, std| {
            init_normal(&mut rng, shape, std)
        }))
    }

    /// All weight matrices zero, norms identity, aux entries for `ks`.
    pub fn zeros(
        config: ModelConfig,
        ks: impl IntoIterator<Item = usize>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self::build(config, ks, |shape, _| Tensor::zeros(shape)))
    }

    fn build(
        config: ModelConfig,
        ks: impl IntoIterator<Item = usize>,
        mut make: impl FnMut(&[usize], f64) -> Tensor<T>,
    ) -> Self {
        let d = config.d_model;
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let embed = make(&[config.vocab_size, d], std);
        let positions = config
            .learned_positions
            .then(|| make(&[config.context_len, d], std));
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wqkv = make(&[d, 3 * d], std);
            let wo = make(&[d, d], out_std);
            let router = make(&[d, config.n_experts], std);
            let experts = (0..config.n_experts)
                .map(|_| Expert {
                    w_gate: (config.ffn_matrices_per_expert == 3)
                        .then(|| make(&[d, config.d_expert], std)),
                    w_up: make(&[d, config.d_expert], std),
                    w_down: make(&[config.d_expert, d], out_std),
                })
                .collect();
            layers.push(LayerWeights {
                attn_norm: Norm::identity(d),
                wqkv,
                wo,
                moe_norm: Norm::identity(d),
                router,
                experts,
            });
        }
        let head = (!config.tie_embeddings).then(|| make(&[config.vocab_size, d], std));
        let aux = KAuxBank::new(&config, ks);
        Self {
            weights: Weights {
                embed,
                positions,
                layers,
                final_norm: Norm::identity(d),
                head,
            },
            aux,
            config,
        }
    }

    /// Visits every tensor with its stable name, in checkpoint order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        let w = &self.weights;
        f("embed", &w.embed);
        if let Some(p) = &w.positions {
            f("positions", p);
        }
        for (l, layer) in w.layers.iter().enumerate() {
            f(
                &format!("layers.{l}.attn_norm.scale"),
                &layer.attn_norm.scale,
            );
            f(
                &format!("layers.{l}.attn_norm.offset"),
                &layer.attn_norm.offset,
            );
            f(&format!("layers.{l}.wqkv"), &layer.wqkv);
            f(&format!("layers.{l}.wo"), &layer.wo);
            f(&format!("layers.{l}.moe_norm.scale"), &layer.moe_norm.scale);
            f(
                &format!("layers.{l}.moe_norm.offset"),
                &layer.moe_norm.offset,
            );
            f(&format!("layers.{l}.router"), &layer.router);
            for (j, e) in layer.experts.iter().enumerate() {
                if let Some(wg) = &e.w_gate {
                    f(&format!("layers.{l}.experts.{j}.w_gate"), wg);
                }
                f(&format!("layers.{l}.experts.{j}.w_up"), &e.w_up);
                f(&format!("layers.{l}.experts.{j}.w_down"), &e.w_down);
            }
        }
        f("final_norm.scale", &w.final_norm.scale);
        f("final_norm.offset", &w.final_norm.offset);
        if let Some(h) = &w.head {
            f("head", h);
        }
        for (k, entry) in self.aux.iter() {
            for (l, n) in entry.post_norms.iter().enumerate() {
                f(&aux_name(k, l, "scale"), &n.scale);
                f(&aux_name(k, l, "offset"), &n.offset);
            }
        }
    }

    /// Mutable counterpart of [`Model::visit`], same order and names.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        let w = &mut self.weights;
        f("embed", &mut w.embed);
        if let Some(p) = &mut w.positions {
            f("positions", p);
        }
        for (l, layer) in w.layers.iter_mut().enumerate() {
            f(
                &format!("layers.{l}.attn_norm.scale"),
                &mut layer.attn_norm.scale,
            );
            f(
                &format!("layers.{l}.attn_norm.offset"),
                &mut layer.attn_norm.offset,
            );
            f(&format!("layers.{l}.wqkv"), &mut layer.wqkv);
            f(&format!("layers.{l}.wo"), &mut layer.wo);
            f(
                &format!("layers.{l}.moe_norm.scale"),
                &mut layer.moe_norm.scale,
            );
            f(
                &format!("layers.{l}.moe_norm.offset"),
                &mut layer.moe_norm.offset,
            );
            f(&format!("layers.{l}.router"), &mut layer.router);
            for (j, e) in layer.experts.iter_mut().enumerate() {
                if let Some(wg) = &mut e.w_gate {
                    f(&format!("layers.{l}.experts.{j}.w_gate"), wg);
                }
                f(&format!("layers.{l}.experts.{j}.w_up"), &mut e.w_up);
                f(&format!("layers.{l}.experts.{j}.w_down"), &mut e.w_down);
            }
        }
        f("final_norm.scale", &mut w.final_norm.scale);
        f("final_norm.offset", &mut w.final_norm.offset);
        if let Some(h) = &mut w.head {
            f("head", h);
        }
        for (k, entry) in self.aux.iter_mut() {
            for (l, n) in entry.post_norms.iter_mut().enumerate() {
                f(&aux_name(k, l, "scale"), &mut n.scale);
                f(&aux_name(k, l, "offset"), &mut n.offset);
            }
        }
    }

    /// Total stored parameters, including every aux bank entry.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        let w = &self.weights;
        Model {
            config: self.config.clone(),
            weights: Weights {
                embed: c(&w.embed),
                positions: w.positions.as_ref().map(c),
                layers: w
                    .layers
                    .iter()
                    .map(|l| LayerWeights {
                        attn_norm: l.attn_norm.map(&c),
                        wqkv: c(&l.wqkv),
                        wo: c(&l.wo),
                        moe_norm: l.moe_norm.map(&c),
                        router: c(&l.router),
                        experts: l
                            .experts
                            .iter()
                            .map(|e| Expert {
                                w_gate: e.w_gate.as_ref().map(c),
                                w_up: c(&e.w_up),
                                w_down: c(&e.w_down),
                            })
                            .collect(),
                    })
                    .collect(),
                final_norm: w.final_norm.map(&c),
                head: w.head.as_ref().map(c),
            },
            aux: self.aux.map(&c),
        }
    }

    fn norm(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        x: Var,
        prefix: &str,
        n: &Norm<T>,
    ) -> Result<Var, ModelError> {
        let s = b.bind(g, &format!("{prefix}.scale"), &n.scale);
        let o = b.bind(g, &format!("{prefix}.offset"), &n.offset);
        Ok(g.layer_norm(x, s, o, LAYER_NORM_EPS)?)
    }

    /// Routed expert mixture for one layer on normalized input `h [T×d]`.
    /// Returns the mixture and the routing statistics of the batch.
    #[allow(clippy::type_complexity)]
    pub fn moe_layer(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        layer: usize,
        h: Var,
        sp: Sparsity,
    ) -> Result<(Var, Var, (Vec<f64>, Vec<f64>), Vec<Vec<usize>>), ModelError> {
        let lw = &self.weights.layers[layer];
        let cfg = &self.config;
        let e = cfg.n_experts;
        let (t, d) = g.value(h).dims2("moe")?;
        if t == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let w_r = b.bind(g, &format!("layers.{layer}.router"), &lw.router);
        let z = g.matmul(h, w_r)?;
        let probs = g.softmax_rows(z)?;
        let (kinds, topk_pre, topk_train) = router::gate_kinds(g.value(probs), sp.k_pre, sp.k)?;
        let f = router::assignment_fractions(&topk_train, e, sp.k)?;
        let p = router::mean_probs(g.value(probs))?;
        let lb_weights = f.iter().map(|&fi| T::of(fi * e as f64)).collect();
        let lb = g.weighted_col_mean(probs, lb_weights)?;
        let gates = g.soft_mask(
            probs,
            kinds,
            T::of(cfg.epsilon),
            cfg.router_norm == RouterNorm::NormalizedSoftmaxK,
        )?;
        let mut parts = Vec::new();
        for (j, ex) in lw.experts.iter().enumerate() {
            let gv = g.value(gates);
            let rows: Vec<usize> = (0..t)
                .filter(|&r| gv.data()[r * e + j] != T::zero())
                .collect();
            if rows.is_empty() {
                continue;
            }
            let prefix = format!("layers.{layer}.experts.{j}");
            let x = g.gather_rows(h, &rows)?;
            let up = b.bind(g, &format!("{prefix}.w_up"), &ex.w_up);
            let a = match &ex.w_gate {
                Some(wg) => {
                    let wg = b.bind(g, &format!("{prefix}.w_gate"), wg);
                    let gate = g.matmul(x, wg)?;
                    let gate = g.silu(gate)?;
                    let u = g.matmul(x, up)?;
                    g.mul(gate, u)?
                }
                None => {
                    let u = g.matmul(x, up)?;
                    g.silu(u)?
                }
            };
            let down = b.bind(g, &format!("{prefix}.w_down"), &ex.w_down);
            let y = g.matmul(a, down)?;
            let w = g.pick(gates, &rows, j)?;
            let y = g.mul_rows(y, w)?;
            parts.push((y, rows));
        }
        let out = g.combine_rows(t, d, parts)?;
        Ok((out, lb, (f, p), topk_pre))
    }

    /// Full forward pass over `batch` sequences of length `seq`, ids row-major.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        ids: &[usize],
        batch: usize,
        seq: usize,
        sp: Sparsity,
    ) -> Result<Forward, ModelError> {
        let cfg = &self.config;
        if ids.is_empty() || batch == 0 || seq == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if ids.len() != batch * seq {
            return Err(ModelError::Domain(format!(
                "{} ids for batch {batch} × seq {seq}",
                ids.len()
            )));
        }
        if seq > cfg.context_len {
            return Err(ModelError::Domain(format!(
                "seq {seq} exceeds context_len {}",
                cfg.context_len
            )));
        }
        let w = &self.weights;
        let embed = b.bind(g, "embed", &w.embed);
        let mut x = g.embedding(embed, ids)?;
        if let Some(p) = &w.positions {
            let pos = b.bind(g, "positions", p);
            let idx: Vec<usize> = (0..batch * seq).map(|i| i % seq).collect();
            let pe = g.embedding(pos, &idx)?;
            x = g.add(x, pe)?;
        }
        let aux = self.aux.get(sp.aux_k)?;
        let mut lb_total: Option<Var> = None;
        let mut routing = Vec::with_capacity(cfg.n_layers);
        let mut topk = Vec::with_capacity(cfg.n_layers);
        for (l, lw) in w.layers.iter().enumerate() {
            let h = self.norm(g, b, x, &format!("layers.{l}.attn_norm"), &lw.attn_norm)?;
            let wqkv = b.bind(g, &format!("layers.{l}.wqkv"), &lw.wqkv);
            let qkv = g.matmul(h, wqkv)?;
            let a = g.causal_attention(qkv, batch, seq, cfg.n_heads)?;
            let wo = b.bind(g, &format!("layers.{l}.wo"), &lw.wo);
            let a = g.matmul(a, wo)?;
            x = g.add(x, a)?;

            let h = self.norm(g, b, x, &format!("layers.{l}.moe_norm"), &lw.moe_norm)?;
            let (m, lb, stats, top) = self.moe_layer(g, b, l, h, sp)?;
            topk.push(top);
            let pn = &aux.post_norms[l];
            let s = b.bind(g, &aux_name(sp.aux_k, l, "scale"), &pn.scale);
            let o = b.bind(g, &aux_name(sp.aux_k, l, "offset"), &pn.offset);
            let m = g.layer_norm(m, s, o, LAYER_NORM_EPS)?;
            x = g.add(x, m)?;
            lb_total = Some(match lb_total {
                Some(acc) => g.add(acc, lb)?,
                None => lb,
            });
            routing.push(stats);
        }
        let lb_sum = lb_total.expect("at least one layer");
        let lb_loss = g.scale(lb_sum, T::of(1.0 / cfg.n_layers as f64))?;
        let x = self.norm(g, b, x, "final_norm", &w.final_norm)?;
        let logits = match &w.head {
            Some(hd) => {
                let hd = b.bind(g, "head", hd);
                g.matmul_bt(x, hd)?
            }
            None => g.matmul_bt(x, embed)?,
        };
        Ok(Forward {
            logits,
            lb_loss,
            routing,
            topk,
        })
    }

    /// Logits `[B·L × V]` with no gradient tracking.
    pub fn logits(
        &self,
        ids: &[usize],
        batch: usize,
        seq: usize,
        sp: Sparsity,
    ) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let out = self.forward(&mut g, &mut b, ids, batch, seq, sp)?;
        Ok(g.value(out.logits).clone())
    }
}
