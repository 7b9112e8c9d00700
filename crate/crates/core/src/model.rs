//! Toy decoder-only sparse mixture-of-experts transformer.
//!
//! Each block is single-head causal attention followed by a routed SwiGLU
//! expert layer, both wrapped in residual connections. There are no
//! normalization layers and no biases.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{matmul, softmax_rows, swiglu, top_k, Matrix};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Renormalized weights below this magnitude are left as-is instead of divided.
const RENORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model < 2 || self.d_ffn < 2 {
            return Err(Error::Config("d_model and d_ffn must be at least 2".into()));
        }
        if self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k = {} exceeds n_experts = {}",
                self.top_k, self.n_experts
            )));
        }
        Ok(())
    }

    /// Mixtral 8x7B dimensions, used for analytic profiling only.
    pub fn mixtral_8x7b() -> Self {
        Self {
            d_model: 4096,
            d_ffn: 14336,
            n_layers: 32,
            n_experts: 8,
            top_k: 2,
            vocab_size: 32000,
            max_seq_len: 32768,
        }
    }

    /// Small configuration used throughout the tests and examples.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            d_ffn: 32,
            n_layers: 2,
            n_experts: 4,
            top_k: 2,
            vocab_size: 32,
            max_seq_len: 16,
        }
    }
}

/// SwiGLU expert: `(silu(z·w1) ⊙ (z·w3)) · w2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeights {
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Matrix,
}

impl ExpertWeights {
    pub fn zeros(d_model: usize, d_ffn: usize) -> Self {
        Self {
            w1: Matrix::zeros(d_model, d_ffn),
            w2: Matrix::zeros(d_ffn, d_model),
            w3: Matrix::zeros(d_model, d_ffn),
        }
    }

    pub fn forward(&self, z: &Matrix) -> Result<Matrix> {
        matmul(&swiglu(z, &self.w1, &self.w3)?, &self.w2)
    }

    fn check_shape(&self, d_model: usize, d_ffn: usize) -> Result<()> {
        let ok = self.w1.shape() == (d_model, d_ffn)
            && self.w3.shape() == (d_model, d_ffn)
            && self.w2.shape() == (d_ffn, d_model);
        if ok {
            Ok(())
        } else {
            Err(Error::Parse(format!(
                "expert shapes w1 {:?} w2 {:?} w3 {:?} do not match d_model={d_model} d_ffn={d_ffn}",
                self.w1.shape(),
                self.w2.shape(),
                self.w3.shape()
            )))
        }
    }
}

/// Attention weights, router, and experts of one transformer block.
///
/// A compressed block keeps the original `E`-column router and stores the
/// `E'×E` router-mapping matrix in `router_map`; routing weights are then
/// `softmax(z·W_G) · W_RMᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SMoEBlock {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_router: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub router_map: Option<Matrix>,
    pub experts: Vec<ExpertWeights>,
}

/// One token's selected experts with their effective (renormalized) weights.
pub type TokenRoute = Vec<(usize, f64)>;

/// How experts are chosen per token.
#[derive(Clone, Copy, Debug)]
pub enum RoutingPolicy<'a> {
    /// Top-k selection with renormalization.
    TopK(usize),
    /// Top-2, dropping the runner-up when `second / first < threshold[layer]`.
    DynamicSkip(&'a [f64]),
}

/// Divides the selected weights by their sum so they add up to one.
pub fn renormalize(route: &mut TokenRoute) {
    let sum: f64 = route.iter().map(|(_, w)| w).sum();
    if sum.abs() > RENORM_EPS {
        for (_, w) in route.iter_mut() {
            *w /= sum;
        }
    }
}

/// Top-k selection over one routing row, renormalized.
pub fn select_top_k(gates: &[f64], k: usize) -> Result<TokenRoute> {
    let mut route: TokenRoute = top_k(gates, k)?
        .into_iter()
        .map(|i| (i, gates[i]))
        .collect();
    renormalize(&mut route);
    Ok(route)
}

/// Top-2 selection that drops the second expert when its weight ratio to the
/// first falls below `threshold`.
pub fn select_dynamic_skip(gates: &[f64], threshold: f64) -> Result<TokenRoute> {
    let idx = top_k(gates, 2)?;
    let (first, second) = (gates[idx[0]], gates[idx[1]]);
    let mut route: TokenRoute = if skip_ratio(first, second) < threshold {
        vec![(idx[0], first)]
    } else {
        vec![(idx[0], first), (idx[1], second)]
    };
    renormalize(&mut route);
    Ok(route)
}

/// Ratio of the runner-up weight to the top weight, in `[0, 1]` for
/// non-negative weights.
pub fn skip_ratio(first: f64, second: f64) -> f64 {
    if first > 0.0 {
        second / first
    } else {
        1.0
    }
}

impl SMoEBlock {
    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Copy of the attention and router weights with no experts attached.
    pub fn clone_attention(&self) -> SMoEBlock {
        SMoEBlock {
            wq: self.wq.clone(),
            wk: self.wk.clone(),
            wv: self.wv.clone(),
            wo: self.wo.clone(),
            w_router: self.w_router.clone(),
            router_map: self.router_map.clone(),
            experts: Vec::new(),
        }
    }

    fn check_input(&self, op: &'static str, x: &Matrix) -> Result<()> {
        if x.cols() != self.d_model() {
            return Err(Error::Shape {
                op,
                left: x.shape(),
                right: self.wq.shape(),
            });
        }
        Ok(())
    }

    /// Single-head causal self-attention, returning `Z = softmax(mask(QKᵀ/√d))·V·W_O`.
    pub fn attention(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input("attention", x)?;
        let q = matmul(x, &self.wq)?;
        let k = matmul(x, &self.wk)?;
        let v = matmul(x, &self.wv)?;
        let n = x.rows();
        let scale = 1.0 / (self.d_model() as f64).sqrt();
        let mut scores = matmul(&q, &k.transpose())?;
        for i in 0..n {
            let row = scores.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                *s = if j > i { f64::NEG_INFINITY } else { *s * scale };
            }
        }
        let probs = softmax_rows(&scores);
        matmul(&matmul(&probs, &v)?, &self.wo)
    }

    /// Routing weights over this block's experts, one row per token.
    pub fn route(&self, z: &Matrix) -> Result<Matrix> {
        self.check_input("route", z)?;
        let g = softmax_rows(&matmul(z, &self.w_router)?);
        match &self.router_map {
            None => Ok(g),
            Some(map) => matmul(&g, &map.transpose()),
        }
    }

    /// Expert layer output `H` given routing weights `g` and inputs `z`.
    pub fn moe(&self, g: &Matrix, z: &Matrix, k: usize) -> Result<Matrix> {
        Ok(self.moe_routed(g, z, RoutingPolicy::TopK(k), 0)?.0)
    }

    /// Expert layer output together with the per-token selections that produced it.
    pub fn moe_routed(
        &self,
        g: &Matrix,
        z: &Matrix,
        policy: RoutingPolicy<'_>,
        layer: usize,
    ) -> Result<(Matrix, Vec<TokenRoute>)> {
        if g.cols() != self.n_experts() || g.rows() != z.rows() {
            return Err(Error::Shape {
                op: "moe",
                left: g.shape(),
                right: (z.rows(), self.n_experts()),
            });
        }
        self.check_input("moe", z)?;
        let routes = (0..g.rows())
            .map(|j| match policy {
                RoutingPolicy::TopK(k) => select_top_k(g.row(j), k),
                RoutingPolicy::DynamicSkip(thresholds) => {
                    let t = thresholds.get(layer).copied().ok_or_else(|| {
                        Error::OutOfRange(format!("no skip threshold for layer {layer}"))
                    })?;
                    select_dynamic_skip(g.row(j), t)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let h = self.combine(z, &routes)?;
        Ok((h, routes))
    }

    /// `H_j = Σ w_ji · FFN_i(Z_j)` over each token's route, batching tokens per expert.
    pub fn combine(&self, z: &Matrix, routes: &[TokenRoute]) -> Result<Matrix> {
        let mut h = Matrix::zeros(z.rows(), self.d_model());
        let mut assigned: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n_experts()];
        for (token, route) in routes.iter().enumerate() {
            for &(expert, w) in route {
                assigned[expert].push((token, w));
            }
        }
        for (expert, tokens) in assigned.iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            let rows: Vec<usize> = tokens.iter().map(|t| t.0).collect();
            let out = self.experts[expert].forward(&z.gather_rows(&rows))?;
            for (r, &(token, w)) in tokens.iter().enumerate() {
                for (acc, v) in h.row_mut(token).iter_mut().zip(out.row(r)) {
                    *acc += w * v;
                }
            }
        }
        Ok(h)
    }

    /// `y = x + attn(x)`, `out = y + moe(route(y), y)`.
    pub fn forward(&self, x: &Matrix, k: usize) -> Result<Matrix> {
        let y = x.add(&self.attention(x)?)?;
        let g = self.route(&y)?;
        y.add(&self.moe(&g, &y, k)?)
    }

    fn check_shape(&self, cfg: &ModelConfig, index: usize) -> Result<()> {
        let d = cfg.d_model;
        let bad = |what: &str| Error::Parse(format!("block {index}: {what}"));
        for (name, m) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ] {
            if m.shape() != (d, d) {
                return Err(bad(&format!(
                    "{name} has shape {:?}, expected ({d}, {d})",
                    m.shape()
                )));
            }
        }
        if self.experts.len() != cfg.n_experts {
            return Err(bad(&format!(
                "{} experts but config says {}",
                self.experts.len(),
                cfg.n_experts
            )));
        }
        if self.w_router.rows() != d {
            return Err(bad("router row count differs from d_model"));
        }
        match &self.router_map {
            None if self.w_router.cols() != cfg.n_experts => {
                return Err(bad("router column count differs from expert count"));
            }
            Some(map) if map.shape() != (cfg.n_experts, self.w_router.cols()) => {
                return Err(bad("router map shape inconsistent with router and experts"));
            }
            _ => {}
        }
        for e in &self.experts {
            e.check_shape(d, cfg.d_ffn)
                .map_err(|err| bad(&err.to_string()))?;
        }
        Ok(())
    }
}

/// Per-layer record produced by [`SMoEModel::forward_traced`].
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Input to the expert layer (`y = x + attn(x)`).
    pub moe_input: Matrix,
    /// Routing weights before selection.
    pub gates: Matrix,
    pub routes: Vec<TokenRoute>,
    /// Expert layer output `H`.
    pub moe_output: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SMoEModel {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub blocks: Vec<SMoEBlock>,
    pub head: Matrix,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    #[serde(flatten)]
    model: SMoEModel,
}

impl SMoEModel {
    /// Gaussian init with std `1/√d_model` (`1/√d_ffn` for the expert down projection).
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ffn;
        let mut rng = rng::seeded(seed);
        let std_d = 1.0 / (d as f64).sqrt();
        let std_f = 1.0 / (f as f64).sqrt();
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
        };
        let embedding = gauss(config.vocab_size, d, std_d);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = gauss(d, d, std_d);
            let wk = gauss(d, d, std_d);
            let wv = gauss(d, d, std_d);
            let wo = gauss(d, d, std_d);
            let w_router = gauss(d, config.n_experts, std_d);
            let experts = (0..config.n_experts)
                .map(|_| ExpertWeights {
                    w1: gauss(d, f, std_d),
                    w2: gauss(f, d, std_f),
                    w3: gauss(d, f, std_d),
                })
                .collect();
            blocks.push(SMoEBlock {
                wq,
                wk,
                wv,
                wo,
                w_router,
                router_map: None,
                experts,
            });
        }
        let head = gauss(d, config.vocab_size, std_d);
        Ok(Self {
            config: config.clone(),
            embedding,
            blocks,
            head,
        })
    }

    /// Model with every weight set to zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let block = SMoEBlock {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            w_router: Matrix::zeros(d, config.n_experts),
            router_map: None,
            experts: vec![ExpertWeights::zeros(d, config.d_ffn); config.n_experts],
        };
        Ok(Self {
            config: config.clone(),
            embedding: Matrix::zeros(config.vocab_size, d),
            blocks: vec![block; config.n_layers],
            head: Matrix::zeros(d, config.vocab_size),
        })
    }

    /// Same weights with a different number of active experts per token.
    pub fn with_top_k(&self, k: usize) -> Result<Self> {
        let mut out = self.clone();
        out.config.top_k = k;
        out.config.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.embedding.shape() != (cfg.vocab_size, cfg.d_model) {
            return Err(Error::Parse(format!(
                "embedding shape {:?} does not match config",
                self.embedding.shape()
            )));
        }
        if self.head.shape() != (cfg.d_model, cfg.vocab_size) {
            return Err(Error::Parse(format!(
                "head shape {:?} does not match config",
                self.head.shape()
            )));
        }
        if self.blocks.len() != cfg.n_layers {
            return Err(Error::Parse(format!(
                "{} blocks but config says {}",
                self.blocks.len(),
                cfg.n_layers
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.check_shape(cfg, i)?;
        }
        Ok(())
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Error::OutOfRange("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::OutOfRange(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfRange(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(self.embedding.gather_rows(tokens))
    }

    /// Logits (`n × vocab`) for a token sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut x = self.embed(tokens)?;
        for block in &self.blocks {
            x = block.forward(&x, self.config.top_k)?;
        }
        matmul(&x, &self.head)
    }

    /// Forward pass that also records every layer's routing decisions.
    pub fn forward_traced(&self, tokens: &[usize]) -> Result<(Matrix, Vec<LayerTrace>)> {
        self.forward_with_policy(tokens, RoutingPolicy::TopK(self.config.top_k))
    }

    pub fn forward_with_policy(
        &self,
        tokens: &[usize],
        policy: RoutingPolicy<'_>,
    ) -> Result<(Matrix, Vec<LayerTrace>)> {
        let mut x = self.embed(tokens)?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            let y = x.add(&block.attention(&x)?)?;
            let gates = block.route(&y)?;
            let (h, routes) = block.moe_routed(&gates, &y, policy, layer)?;
            x = y.add(&h)?;
            traces.push(LayerTrace {
                moe_input: y,
                gates,
                routes,
                moe_output: h,
            });
        }
        Ok((matmul(&x, &self.head)?, traces))
    }

    /// Number of stored scalars, counting a router map when present.
    pub fn scalar_count(&self) -> usize {
        let mut n = self.embedding.data().len() + self.head.data().len();
        for b in &self.blocks {
            n += b.wq.data().len() + b.wk.data().len() + b.wv.data().len() + b.wo.data().len();
            n += b.w_router.data().len();
            n += b.router_map.as_ref().map_or(0, |m| m.data().len());
            for e in &b.experts {
                n += e.w1.data().len() + e.w2.data().len() + e.w3.data().len();
            }
        }
        n
    }

    /// FNV-1a over the bit patterns of every weight, in checkpoint order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |m: &Matrix| {
            for v in m.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        feed(&self.embedding);
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w_router] {
                feed(m);
            }
            if let Some(m) = &b.router_map {
                feed(m);
            }
            for e in &b.experts {
                feed(&e.w1);
                feed(&e.w2);
                feed(&e.w3);
            }
        }
        feed(&self.head);
        h
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = CheckpointRef {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self,
        };
        serde_json::to_string(&ckpt).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        ckpt.model.validate()?;
        Ok(ckpt.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format_version: u32,
    #[serde(flatten)]
    model: &'a SMoEModel,
}
