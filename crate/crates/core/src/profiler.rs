//! Analytic parameter, memory, and FLOP estimates.
//!
//! Counts follow the block layout of [`crate::model`]: four `d×d` attention
//! projections, a `d×E` router, `E` SwiGLU experts of `3·d·d_ffn` weights
//! each, and untied embedding/head matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub expert_params: u64,
    pub attention_params: u64,
    pub router_params: u64,
    pub embedding_params: u64,
    pub total_params: u64,
    pub expert_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub retained_experts: usize,
    pub active_experts: usize,
    pub params_before: u64,
    pub params_after: u64,
    pub param_reduction_fraction: f64,
    pub flops_per_token_prefill: u64,
    /// FLOP-ratio upper bound on the expert/attention speedup; not a wall-clock figure.
    pub estimated_moe_speedup: f64,
}

impl CostReport {
    /// Weight memory for the given element width in bytes.
    pub fn memory_bytes(&self, dtype_width: u64) -> u64 {
        self.params_after * dtype_width
    }
}

fn per_expert(cfg: &ModelConfig) -> u64 {
    3 * cfg.d_model as u64 * cfg.d_ffn as u64
}

pub fn count_params(cfg: &ModelConfig) -> ParamReport {
    let l = cfg.n_layers as u64;
    let d = cfg.d_model as u64;
    let e = cfg.n_experts as u64;
    let expert_params = l * e * per_expert(cfg);
    let attention_params = l * 4 * d * d;
    let router_params = l * d * e;
    let embedding_params = 2 * cfg.vocab_size as u64 * d;
    let total_params = expert_params + attention_params + router_params + embedding_params;
    ParamReport {
        expert_params,
        attention_params,
        router_params,
        embedding_params,
        total_params,
        expert_fraction: expert_params as f64 / total_params as f64,
    }
}

/// Per-token forward FLOPs (2 per multiply-add) of the attention projections.
fn attention_flops(cfg: &ModelConfig) -> u64 {
    2 * 4 * (cfg.d_model as u64).pow(2)
}

fn expert_flops(cfg: &ModelConfig) -> u64 {
    2 * per_expert(cfg)
}

/// Cost of keeping `retained` experts per layer with `active` experts per token.
pub fn compression_cost(cfg: &ModelConfig, retained: usize, active: usize) -> Result<CostReport> {
    if retained == 0 || retained > cfg.n_experts {
        return Err(Error::OutOfRange(format!(
            "retained = {retained} must lie in 1..={}",
            cfg.n_experts
        )));
    }
    if active == 0 || active > retained {
        return Err(Error::OutOfRange(format!(
            "active = {active} must lie in 1..={retained}"
        )));
    }
    let before = count_params(cfg).total_params;
    let removed = (cfg.n_experts - retained) as u64 * cfg.n_layers as u64 * per_expert(cfg);
    let after = before - removed;
    let l = cfg.n_layers as u64;
    let attn = attention_flops(cfg);
    let expert = expert_flops(cfg);
    let router = 2 * cfg.d_model as u64 * cfg.n_experts as u64;
    let head = 2 * cfg.d_model as u64 * cfg.vocab_size as u64;
    let flops = l * (attn + router + active as u64 * expert) + head;
    let speedup =
        (attn + cfg.top_k as u64 * expert) as f64 / (attn + active as u64 * expert) as f64;
    Ok(CostReport {
        retained_experts: retained,
        active_experts: active,
        params_before: before,
        params_after: after,
        param_reduction_fraction: removed as f64 / before as f64,
        flops_per_token_prefill: flops,
        estimated_moe_speedup: speedup,
    })
}

/// Fixed-width table of cost reports, bf16 weight memory in GB.
pub fn format_cost_table(reports: &[CostReport]) -> String {
    let mut out = format!(
        "{:>6} {:>7} {:>14} {:>10} {:>10} {:>10}\n",
        "Total", "Active", "Params", "Reduction", "Mem(GB)", "Speedup"
    );
    for r in reports {
        out.push_str(&format!(
            "{:>6} {:>7} {:>14} {:>9.1}% {:>10.1} {:>9.2}x\n",
            r.retained_experts,
            r.active_experts,
            r.params_after,
            100.0 * r.param_reduction_fraction,
            r.memory_bytes(2) as f64 / 1e9,
            r.estimated_moe_speedup,
        ));
    }
    out
}

impl ParamReport {
    pub fn csv_header() -> &'static str {
        "expert_params,attention_params,router_params,embedding_params,total_params,expert_fraction"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.expert_params,
            self.attention_params,
            self.router_params,
            self.embedding_params,
            self.total_params,
            self.expert_fraction
        )
    }
}

impl CostReport {
    pub fn csv_header() -> &'static str {
        "retained,active,params_after,param_reduction_fraction,memory_bytes_bf16,flops_per_token_prefill,estimated_moe_speedup"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.retained_experts,
            self.active_experts,
            self.params_after,
            self.param_reduction_fraction,
            self.memory_bytes(2),
            self.flops_per_token_prefill,
            self.estimated_moe_speedup
        )
    }
}
