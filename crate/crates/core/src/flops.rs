//! Inference FLOPs per token for dense, GQA, MLA and MoE transformers.
//!
//! Convention: every matrix product costs 2 FLOPs per multiply-accumulate,
//! attention scores and value mixing included. Embedding lookups are free,
//! the LM head is always counted (tied or not), and norms, residuals,
//! activations and MoE routers are not counted.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Multi-head or grouped-query attention.
    Standard,
    /// Multi-head latent attention, mapped to its effective projection sizes.
    Latent(LatentAttention),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentAttention {
    pub q_lora_rank: Option<u64>,
    pub kv_lora_rank: u64,
    pub qk_nope_head_dim: u64,
    pub qk_rope_head_dim: u64,
    pub v_head_dim: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: u64,
    pub experts_per_token: u64,
    pub expert_ffn_hidden: u64,
    /// Zero when the model has no shared expert.
    pub shared_expert_ffn_hidden: u64,
    /// Zero-based indices of layers whose FFN is a mixture of experts.
    pub moe_layers: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub hidden_size: u64,
    pub num_layers: u64,
    pub num_q_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub ffn_hidden: u64,
    /// 2 for a plain MLP, 3 for a gated one.
    pub ffn_matrices: u64,
    pub vocab_size: u64,
    pub tied_embeddings: bool,
    pub attention: AttentionKind,
    pub moe: Option<MoeConfig>,
}

impl ArchitectureDescriptor {
    /// A dense gated-MLP GQA descriptor.
    pub fn dense(
        hidden_size: u64,
        num_layers: u64,
        num_q_heads: u64,
        num_kv_heads: u64,
        head_dim: u64,
        ffn_hidden: u64,
        vocab_size: u64,
    ) -> Self {
        ArchitectureDescriptor {
            hidden_size,
            num_layers,
            num_q_heads,
            num_kv_heads,
            head_dim,
            ffn_hidden,
            ffn_matrices: 3,
            vocab_size,
            tied_embeddings: false,
            attention: AttentionKind::Standard,
            moe: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("ffn_matrices", self.ffn_matrices),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Descriptor(format!("{name} must be positive")));
            }
        }
        if self.num_q_heads % self.num_kv_heads != 0 {
            return Err(Error::Descriptor(format!(
                "num_q_heads ({}) must be a multiple of num_kv_heads ({})",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if let AttentionKind::Latent(mla) = &self.attention {
            if mla.kv_lora_rank == 0 || mla.v_head_dim == 0 || mla.qk_nope_head_dim + mla.qk_rope_head_dim == 0 {
                return Err(Error::Descriptor("latent attention dims must be positive".into()));
            }
            if mla.q_lora_rank == Some(0) {
                return Err(Error::Descriptor("q_lora_rank must be positive when set".into()));
            }
        }
        if let Some(moe) = &self.moe {
            if moe.num_experts == 0 || moe.experts_per_token == 0 || moe.expert_ffn_hidden == 0 {
                return Err(Error::Descriptor(
                    "num_experts, experts_per_token and expert_ffn_hidden must be positive".into(),
                ));
            }
            if moe.experts_per_token > moe.num_experts {
                return Err(Error::Descriptor(format!(
                    "experts_per_token ({}) exceeds num_experts ({})",
                    moe.experts_per_token, moe.num_experts
                )));
            }
            if let Some(&last) = moe.moe_layers.iter().next_back() {
                if last >= self.num_layers {
                    return Err(Error::Descriptor(format!(
                        "moe layer {last} is out of range for {} layers",
                        self.num_layers
                    )));
                }
            }
        }
        Ok(())
    }

    fn is_moe_layer(&self, layer: u64) -> bool {
        self.moe.as_ref().is_some_and(|m| m.moe_layers.contains(&layer))
    }

    fn attention_projection_params(&self) -> u64 {
        let h = self.hidden_size;
        match &self.attention {
            AttentionKind::Standard => {
                let q = self.num_q_heads * self.head_dim;
                let kv = self.num_kv_heads * self.head_dim;
                h * q + 2 * h * kv + q * h
            }
            AttentionKind::Latent(m) => {
                let heads = self.num_q_heads;
                let qk = m.qk_nope_head_dim + m.qk_rope_head_dim;
                let q = match m.q_lora_rank {
                    Some(r) => h * r + r * heads * qk,
                    None => h * heads * qk,
                };
                let kv_down = h * (m.kv_lora_rank + m.qk_rope_head_dim);
                let kv_up = m.kv_lora_rank * heads * (m.qk_nope_head_dim + m.v_head_dim);
                let o = heads * m.v_head_dim * h;
                q + kv_down + kv_up + o
            }
        }
    }

    /// Multiply-accumulates per context token per layer (scores plus value mixing).
    fn attention_macs_per_context(&self) -> u64 {
        match &self.attention {
            AttentionKind::Standard => 2 * self.num_q_heads * self.head_dim,
            AttentionKind::Latent(m) => {
                self.num_q_heads * (m.qk_nope_head_dim + m.qk_rope_head_dim + m.v_head_dim)
            }
        }
    }

    fn ffn_params(&self, layer: u64) -> u64 {
        let width = match (&self.moe, self.is_moe_layer(layer)) {
            (Some(m), true) => m.experts_per_token * m.expert_ffn_hidden + m.shared_expert_ffn_hidden,
            _ => self.ffn_hidden,
        };
        self.ffn_matrices * self.hidden_size * width
    }

    /// Parameters touched per token (excluding embeddings and routers).
    pub fn activated_params(&self) -> u64 {
        let layers: u64 = (0..self.num_layers)
            .map(|l| self.attention_projection_params() + self.ffn_params(l))
            .sum();
        layers + self.hidden_size * self.vocab_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub attention_projections: u64,
    pub ffn: u64,
    pub lm_head: u64,
    /// Attention score/value FLOPs per context token, summed over layers.
    pub attention_context: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub flops_per_token_linear: u64,
    pub flops_per_token_attn_coeff: u64,
    pub breakdown: FlopsBreakdown,
}

impl FlopsEstimate {
    pub fn new(linear: u64, attn_coeff: u64) -> Self {
        FlopsEstimate {
            flops_per_token_linear: linear,
            flops_per_token_attn_coeff: attn_coeff,
            breakdown: FlopsBreakdown {
                attention_projections: 0,
                ffn: linear,
                lm_head: 0,
                attention_context: attn_coeff,
            },
        }
    }

    /// FLOPs for one token that attends to `context` earlier tokens.
    pub fn at_context(&self, context: u64) -> f64 {
        self.flops_per_token_linear as f64 + (context as f64) * self.flops_per_token_attn_coeff as f64
    }

    /// Exact FLOPs over tokens `2..=seq_len`, token `i` attending to `i - 1` tokens.
    pub fn total_excluding_first(&self, seq_len: u64) -> Result<f64> {
        if seq_len < 2 {
            return Err(Error::Domain(format!("sequence length must be at least 2, got {seq_len}")));
        }
        let predicted = (seq_len - 1) as u128;
        let context_sum = predicted * seq_len as u128 / 2;
        let total = predicted * self.flops_per_token_linear as u128
            + context_sum * self.flops_per_token_attn_coeff as u128;
        Ok(total as f64)
    }
}

pub fn estimate_flops(arch: &ArchitectureDescriptor) -> Result<FlopsEstimate> {
    arch.validate()?;
    let attention_projections = 2 * arch.num_layers * arch.attention_projection_params();
    let ffn = 2 * (0..arch.num_layers).map(|l| arch.ffn_params(l)).sum::<u64>();
    let lm_head = 2 * arch.hidden_size * arch.vocab_size;
    let attention_context = 2 * arch.num_layers * arch.attention_macs_per_context();
    Ok(FlopsEstimate {
        flops_per_token_linear: attention_projections + ffn + lm_head,
        flops_per_token_attn_coeff: attention_context,
        breakdown: FlopsBreakdown {
            attention_projections,
            ffn,
            lm_head,
            attention_context,
        },
    })
}

/// Mean FLOPs per predicted token for a sample of `seq_len` tokens.
///
/// Tokens 2..=L attend to 1..=L-1 earlier tokens, so the mean context is L/2.
pub fn mean_flops_per_token(est: &FlopsEstimate, seq_len: u64) -> Result<f64> {
    if seq_len < 2 {
        return Err(Error::Domain(format!("sequence length must be at least 2, got {seq_len}")));
    }
    Ok(est.flops_per_token_linear as f64
        + est.flops_per_token_attn_coeff as f64 * (seq_len as f64 / 2.0))
}

/// A parsed descriptor plus the config keys that were not used.
#[derive(Debug, Clone)]
pub struct LoadedDescriptor {
    pub descriptor: ArchitectureDescriptor,
    pub ignored_fields: Vec<String>,
}

const PLAIN_MLP_MODEL_TYPES: &[&str] = &[
    "gpt2", "gpt_neox", "gptj", "opt", "bloom", "falcon", "phi", "gpt_bigcode", "starcoder2",
];

struct ConfigReader<'a> {
    primary: &'a Map<String, Value>,
    fallback: Option<&'a Map<String, Value>>,
    used: BTreeSet<String>,
}

impl<'a> ConfigReader<'a> {
    fn raw(&mut self, key: &str) -> Option<&'a Value> {
        let v = self
            .primary
            .get(key)
            .or_else(|| self.fallback.and_then(|f| f.get(key)))
            .filter(|v| !v.is_null());
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn uint(&mut self, keys: &[&str]) -> Result<Option<u64>> {
        for &key in keys {
            if let Some(v) = self.raw(key) {
                return match v.as_i64() {
                    Some(n) if n > 0 => Ok(Some(n as u64)),
                    Some(n) => Err(Error::Descriptor(format!("{key} must be positive, got {n}"))),
                    None => match v.as_u64() {
                        Some(n) if n > 0 => Ok(Some(n)),
                        _ => Err(Error::Descriptor(format!("{key} must be a positive integer, got {v}"))),
                    },
                };
            }
        }
        Ok(None)
    }

    fn uint_or_zero(&mut self, keys: &[&str]) -> Result<Option<u64>> {
        for &key in keys {
            if let Some(v) = self.raw(key) {
                return v
                    .as_u64()
                    .map(Some)
                    .ok_or_else(|| Error::Descriptor(format!("{key} must be a non-negative integer, got {v}")));
            }
        }
        Ok(None)
    }

    fn required(&mut self, keys: &[&str]) -> Result<u64> {
        self.uint(keys)?.ok_or_else(|| {
            Error::Descriptor(format!("missing required field {}", keys.join(" / ")))
        })
    }

    fn boolean(&mut self, key: &str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .as_bool()
                .map(Some)
                .ok_or_else(|| Error::Descriptor(format!("{key} must be a boolean"))),
        }
    }

    fn string(&mut self, key: &str) -> Option<&'a str> {
        self.raw(key).and_then(Value::as_str)
    }

    fn layer_list(&mut self, key: &str) -> Result<Option<Vec<u64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_u64()
                        .ok_or_else(|| Error::Descriptor(format!("{key} must list layer indices")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(_) => Err(Error::Descriptor(format!("{key} must be an array"))),
        }
    }
}

/// Reads a published-style model config (JSON) into a descriptor.
///
/// | descriptor field | config keys |
/// |---|---|
/// | hidden_size | `hidden_size`, `n_embd`, `d_model` |
/// | num_layers | `num_hidden_layers`, `n_layer`, `num_layers` |
/// | num_q_heads | `num_attention_heads`, `n_head` |
/// | num_kv_heads | `num_key_value_heads`, `num_kv_heads` (default: q heads; `multi_query` gives 1) |
/// | head_dim | `head_dim` (default: hidden_size / q heads) |
/// | ffn_hidden | `intermediate_size_mlp`, `intermediate_size`, `n_inner`, `ffn_dim` (GPT-2 style default 4 x hidden) |
/// | ffn_matrices | `ffn_matrices`, else 2 for plain-MLP `model_type`s and 3 otherwise |
/// | vocab_size | `vocab_size` |
/// | tied_embeddings | `tie_word_embeddings` (default false) |
/// | moe.num_experts | `num_experts`, `num_local_experts`, `n_routed_experts`, `moe_num_experts` |
/// | moe.experts_per_token | `num_experts_per_tok`, `experts_per_token`, `moe_topk` |
/// | moe.expert_ffn_hidden | `moe_intermediate_size`, `expert_ffn_hidden`, else `intermediate_size` |
/// | moe.shared_expert_ffn_hidden | `shared_expert_intermediate_size`, or `n_shared_experts` x expert hidden |
/// | moe.moe_layers | `moe_layers`, `first_k_dense_replace` + `moe_layer_freq`, `decoder_sparse_step` + `mlp_only_layers`, `interleave_moe_layer_step` (default: all) |
/// | latent attention | `kv_lora_rank`, `q_lora_rank`, `qk_nope_head_dim`, `qk_rope_head_dim`, `v_head_dim` |
///
/// A nested `text_config` object takes precedence over top-level keys.
pub fn load_descriptor(text: &str) -> Result<LoadedDescriptor> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| Error::Descriptor(format!("config is not valid JSON: {e}")))?;
    let root = root
        .as_object()
        .ok_or_else(|| Error::Descriptor("config must be a JSON object".into()))?;
    let (primary, fallback) = match root.get("text_config").and_then(Value::as_object) {
        Some(text_cfg) => (text_cfg, Some(root)),
        None => (root, None),
    };
    let mut r = ConfigReader {
        primary,
        fallback,
        used: BTreeSet::new(),
    };
    if fallback.is_some() {
        r.used.insert("text_config".into());
    }

    let model_type = r.string("model_type").unwrap_or("").to_string();
    let gpt2_style = primary.contains_key("n_embd");

    let hidden_size = r.required(&["hidden_size", "n_embd", "d_model"])?;
    let num_layers = r.required(&["num_hidden_layers", "n_layer", "num_layers"])?;
    let num_q_heads = r.required(&["num_attention_heads", "n_head"])?;
    let multi_query = r.boolean("multi_query")?.unwrap_or(false);
    let num_kv_heads = match r.uint(&["num_key_value_heads", "num_kv_heads"])? {
        Some(n) => n,
        None if multi_query => 1,
        None => num_q_heads,
    };
    let head_dim = match r.uint(&["head_dim"])? {
        Some(d) => d,
        None => {
            if hidden_size % num_q_heads != 0 {
                return Err(Error::Descriptor(format!(
                    "head_dim absent and hidden_size {hidden_size} is not divisible by {num_q_heads} heads"
                )));
            }
            hidden_size / num_q_heads
        }
    };
    let ffn_hidden = match r.uint(&["intermediate_size_mlp", "intermediate_size", "n_inner", "ffn_dim"])? {
        Some(f) => f,
        None if gpt2_style => 4 * hidden_size,
        None => {
            return Err(Error::Descriptor(
                "missing required field intermediate_size / n_inner / ffn_dim".into(),
            ))
        }
    };
    let ffn_matrices = match r.uint(&["ffn_matrices"])? {
        Some(m) => m,
        None if PLAIN_MLP_MODEL_TYPES.contains(&model_type.as_str()) => 2,
        None => 3,
    };
    let vocab_size = r.required(&["vocab_size"])?;
    let tied_embeddings = r.boolean("tie_word_embeddings")?.unwrap_or(false);

    let attention = match r.uint(&["kv_lora_rank"])? {
        Some(kv_lora_rank) => AttentionKind::Latent(LatentAttention {
            q_lora_rank: r.uint(&["q_lora_rank"])?,
            kv_lora_rank,
            qk_nope_head_dim: r.required(&["qk_nope_head_dim"])?,
            qk_rope_head_dim: r.uint_or_zero(&["qk_rope_head_dim"])?.unwrap_or(0),
            v_head_dim: r.required(&["v_head_dim"])?,
        }),
        None => AttentionKind::Standard,
    };

    let num_experts = r.uint(&["num_experts", "num_local_experts", "n_routed_experts", "moe_num_experts"])?;
    let moe = match num_experts {
        Some(num_experts) if num_experts > 1 => {
            let experts_per_token = r.required(&["num_experts_per_tok", "experts_per_token", "moe_topk"])?;
            let expert_ffn_hidden = match r.uint(&["moe_intermediate_size", "expert_ffn_hidden"])? {
                Some(h) => h,
                None => r.required(&["intermediate_size"])?,
            };
            let shared_expert_ffn_hidden = match r.uint_or_zero(&["shared_expert_intermediate_size"])? {
                Some(s) => s,
                None => match r.uint_or_zero(&["n_shared_experts", "num_shared_experts"])? {
                    Some(n) => n * expert_ffn_hidden,
                    None if model_type.starts_with("llama4") => expert_ffn_hidden,
                    None => 0,
                },
            };
            let moe_layers = moe_layer_set(&mut r, num_layers)?;
            Some(MoeConfig {
                num_experts,
                experts_per_token,
                expert_ffn_hidden,
                shared_expert_ffn_hidden,
                moe_layers,
            })
        }
        _ => None,
    };

    let descriptor = ArchitectureDescriptor {
        hidden_size,
        num_layers,
        num_q_heads,
        num_kv_heads,
        head_dim,
        ffn_hidden,
        ffn_matrices,
        vocab_size,
        tied_embeddings,
        attention,
        moe,
    };
    descriptor.validate()?;

    let ignored_fields: Vec<String> = primary
        .keys()
        .filter(|k| !r.used.contains(k.as_str()))
        .cloned()
        .collect();
    if !ignored_fields.is_empty() {
        log::warn!("ignoring config fields: {}", ignored_fields.join(", "));
    }
    Ok(LoadedDescriptor {
        descriptor,
        ignored_fields,
    })
}

fn moe_layer_set(r: &mut ConfigReader<'_>, num_layers: u64) -> Result<BTreeSet<u64>> {
    if let Some(list) = r.layer_list("moe_layers")? {
        return Ok(list.into_iter().collect());
    }
    let all = 0..num_layers;
    if let Some(k) = r.uint_or_zero(&["first_k_dense_replace"])? {
        let freq = r.uint(&["moe_layer_freq"])?.unwrap_or(1);
        return Ok(all.filter(|&i| i >= k && i % freq == 0).collect());
    }
    if let Some(step) = r.uint(&["decoder_sparse_step"])? {
        let dense: BTreeSet<u64> = r.layer_list("mlp_only_layers")?.unwrap_or_default().into_iter().collect();
        return Ok(all.filter(|&i| (i + 1) % step == 0 && !dense.contains(&i)).collect());
    }
    if let Some(step) = r.uint(&["interleave_moe_layer_step"])? {
        return Ok(all.filter(|&i| (i + 1) % step == 0).collect());
    }
    Ok(all.collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn toy_dense() -> ArchitectureDescriptor {
        ArchitectureDescriptor::dense(64, 2, 4, 4, 16, 256, 1000)
    }

    #[test]
    fn toy_dense_hand_count() {
        // attention projections: 4 x 64 x 64 per layer; gated FFN: 3 x 64 x 256 per layer;
        // LM head 64 x 1000; 2 FLOPs per MAC.
        let linear = 2 * (2 * (4 * 64 * 64 + 3 * 64 * 256) + 64 * 1000);
        assert_eq!(linear, 390_144);
        let est = estimate_flops(&toy_dense()).unwrap();
        assert_eq!(est.flops_per_token_linear, 390_144);
        // 4 x heads x head_dim per layer, 2 layers.
        assert_eq!(est.flops_per_token_attn_coeff, 512);
        assert_eq!(est.at_context(0) + 512.0 * 511.5, 652_032.0);
        let b = est.breakdown;
        assert_eq!(b.attention_projections + b.ffn + b.lm_head, est.flops_per_token_linear);
    }

    #[test]
    fn mean_flops_examples() {
        let est = FlopsEstimate::new(390_144, 512);
        assert_eq!(mean_flops_per_token(&est, 1024).unwrap(), 652_288.0);
        let flat = FlopsEstimate::new(1000, 0);
        assert_eq!(mean_flops_per_token(&flat, 2).unwrap(), 1000.0);
        assert_eq!(mean_flops_per_token(&flat, 4096).unwrap(), 1000.0);
        assert_eq!(mean_flops_per_token(&est, 2).unwrap(), 390_144.0 + 512.0);
        assert!(mean_flops_per_token(&est, 1).is_err());
    }

    #[test]
    fn total_matches_explicit_sum() {
        let est = FlopsEstimate::new(7, 3);
        for l in 2..50u64 {
            let explicit: f64 = (2..=l).map(|i| est.at_context(i - 1)).sum();
            assert_eq!(est.total_excluding_first(l).unwrap(), explicit);
            assert_eq!(est.total_excluding_first(l).unwrap() / (l - 1) as f64, mean_flops_per_token(&est, l).unwrap());
        }
        assert_eq!(FlopsEstimate::new(0, 1).total_excluding_first(3).unwrap(), 3.0);
    }

    #[test]
    fn tied_embeddings_still_pay_lm_head() {
        let mut tied = toy_dense();
        tied.tied_embeddings = true;
        assert_eq!(estimate_flops(&tied).unwrap(), estimate_flops(&toy_dense()).unwrap());
    }

    #[test]
    fn invalid_descriptors() {
        let mut d = toy_dense();
        d.num_kv_heads = 3;
        assert!(matches!(estimate_flops(&d), Err(Error::Descriptor(_))));
        let mut d = toy_dense();
        d.hidden_size = 0;
        assert!(estimate_flops(&d).is_err());
        let mut d = toy_dense();
        d.moe = Some(MoeConfig {
            num_experts: 2,
            experts_per_token: 4,
            expert_ffn_hidden: 8,
            shared_expert_ffn_hidden: 0,
            moe_layers: [0].into(),
        });
        assert!(estimate_flops(&d).is_err());
    }

    #[test]
    fn load_minimal_dense_config() {
        let cfg = r#"{"model_type": "qwen3", "hidden_size": 64, "num_hidden_layers": 2,
            "num_attention_heads": 4, "num_key_value_heads": 4, "head_dim": 16,
            "intermediate_size": 256, "vocab_size": 1000, "rope_theta": 1e6}"#;
        let loaded = load_descriptor(cfg).unwrap();
        assert_eq!(loaded.descriptor, toy_dense());
        assert_eq!(loaded.ignored_fields, vec!["rope_theta".to_string()]);
    }

    #[test]
    fn load_moe_configs() {
        let qwen_moe = r#"{"model_type": "qwen2_moe", "hidden_size": 64, "num_hidden_layers": 4,
            "num_attention_heads": 4, "num_key_value_heads": 2, "intermediate_size": 256,
            "moe_intermediate_size": 32, "shared_expert_intermediate_size": 128,
            "num_experts": 8, "num_experts_per_tok": 2, "decoder_sparse_step": 2,
            "mlp_only_layers": [3], "vocab_size": 1000, "tie_word_embeddings": true}"#;
        let d = load_descriptor(qwen_moe).unwrap().descriptor;
        let moe = d.moe.clone().unwrap();
        assert_eq!(moe.moe_layers, [1].into());
        assert_eq!(moe.shared_expert_ffn_hidden, 128);
        assert_eq!(d.head_dim, 16);
        assert!(d.tied_embeddings);

        let deepseek = r#"{"hidden_size": 64, "num_hidden_layers": 3, "num_attention_heads": 4,
            "intermediate_size": 256, "moe_intermediate_size": 16, "n_routed_experts": 16,
            "n_shared_experts": 2, "num_experts_per_tok": 4, "first_k_dense_replace": 1,
            "kv_lora_rank": 32, "q_lora_rank": null, "qk_nope_head_dim": 16,
            "qk_rope_head_dim": 8, "v_head_dim": 16, "vocab_size": 500}"#;
        let d = load_descriptor(deepseek).unwrap().descriptor;
        let moe = d.moe.clone().unwrap();
        assert_eq!(moe.moe_layers, [1, 2].into());
        assert_eq!(moe.shared_expert_ffn_hidden, 32);
        assert!(matches!(d.attention, AttentionKind::Latent(ref m) if m.q_lora_rank.is_none()));
        let est = estimate_flops(&d).unwrap();
        // q 64*4*24 + kv_down 64*40 + kv_up 32*4*32 + o 4*16*64 = 6144+2560+4096+4096
        assert_eq!(est.breakdown.attention_projections, 2 * 3 * 16_896);
        assert_eq!(est.flops_per_token_attn_coeff, 2 * 3 * 4 * (16 + 8 + 16));

        let llama4 = r#"{"model_type": "llama4", "text_config": {"model_type": "llama4_text",
            "hidden_size": 64, "num_hidden_layers": 2, "num_attention_heads": 4,
            "num_key_value_heads": 1, "head_dim": 16, "intermediate_size": 32,
            "intermediate_size_mlp": 128, "num_local_experts": 16, "num_experts_per_tok": 1,
            "interleave_moe_layer_step": 1, "vocab_size": 1000}}"#;
        let d = load_descriptor(llama4).unwrap().descriptor;
        let moe = d.moe.unwrap();
        assert_eq!((moe.num_experts, moe.expert_ffn_hidden, moe.shared_expert_ffn_hidden), (16, 32, 32));
        assert_eq!(d.ffn_hidden, 128);
    }

    #[test]
    fn gpt2_style_config() {
        let cfg = r#"{"model_type": "gpt2", "n_embd": 64, "n_layer": 2, "n_head": 4, "n_inner": null, "vocab_size": 1000}"#;
        let d = load_descriptor(cfg).unwrap().descriptor;
        assert_eq!((d.ffn_hidden, d.ffn_matrices, d.num_kv_heads), (256, 2, 4));
    }

    #[test]
    fn config_errors() {
        let err = load_descriptor(r#"{"hidden_size": -64, "num_hidden_layers": 2}"#).unwrap_err();
        assert!(err.to_string().contains("hidden_size"), "{err}");
        let err = load_descriptor(r#"{"hidden_size": 64, "num_hidden_layers": 2, "num_attention_heads": 4, "intermediate_size": 8}"#)
            .unwrap_err();
        assert!(err.to_string().contains("vocab_size"), "{err}");
        assert!(load_descriptor("[1,2]").is_err());
        assert!(load_descriptor("{").is_err());
    }

    fn small_dense() -> impl Strategy<Value = ArchitectureDescriptor> {
        (1u64..64, 1u64..6, 1u64..5, 1u64..4, 1u64..16, 1u64..128, 1u64..3, 1u64..500).prop_map(
            |(hidden, layers, groups, kv, hd, ffn, gated, vocab)| ArchitectureDescriptor {
                hidden_size: hidden,
                num_layers: layers,
                num_q_heads: groups * kv,
                num_kv_heads: kv,
                head_dim: hd,
                ffn_hidden: ffn,
                ffn_matrices: gated + 1,
                vocab_size: vocab,
                tied_embeddings: false,
                attention: AttentionKind::Standard,
                moe: None,
            },
        )
    }

    proptest! {
        #[test]
        fn degenerate_moe_equals_dense(base in small_dense(), k in 1u64..8, h in 1u64..64) {
            let mut moe = base.clone();
            moe.moe = Some(MoeConfig {
                num_experts: k,
                experts_per_token: k,
                expert_ffn_hidden: h,
                shared_expert_ffn_hidden: 0,
                moe_layers: (0..base.num_layers).collect(),
            });
            let mut dense = base;
            dense.ffn_hidden = k * h;
            prop_assert_eq!(estimate_flops(&moe).unwrap(), estimate_flops(&dense).unwrap());
        }

        #[test]
        fn expert_count_is_free(base in small_dense(), k in 1u64..4, extra in 0u64..200, h in 1u64..32, shared in 0u64..32) {
            let with = |n: u64| {
                let mut d = base.clone();
                d.moe = Some(MoeConfig {
                    num_experts: n,
                    experts_per_token: k,
                    expert_ffn_hidden: h,
                    shared_expert_ffn_hidden: shared,
                    moe_layers: (0..base.num_layers).step_by(2).collect(),
                });
                estimate_flops(&d).unwrap()
            };
            prop_assert_eq!(with(k), with(k + extra));
        }

        #[test]
        fn flops_strictly_increase_with_size(base in small_dense(), field in 0usize..7) {
            let before = estimate_flops(&base).unwrap();
            let mut bigger = base.clone();
            match field {
                0 => bigger.hidden_size += 1,
                1 => bigger.num_layers += 1,
                2 => bigger.num_q_heads += bigger.num_kv_heads,
                3 => { bigger.num_kv_heads *= 2; bigger.num_q_heads *= 2; }
                4 => bigger.head_dim += 1,
                5 => bigger.ffn_hidden += 1,
                _ => bigger.vocab_size += 1,
            }
            let after = estimate_flops(&bigger).unwrap();
            prop_assert!(after.at_context(100) > before.at_context(100));
        }

        #[test]
        fn mean_flops_is_affine_in_length(linear in 0u64..1_000_000, coeff in 0u64..10_000, l in 2u64..100_000) {
            let est = FlopsEstimate::new(linear, coeff);
            let a = mean_flops_per_token(&est, l).unwrap();
            let b = mean_flops_per_token(&est, l + 2).unwrap();
            prop_assert_eq!(b - a, coeff as f64);
            prop_assert_eq!(a, linear as f64 + coeff as f64 * l as f64 / 2.0);
        }
    }
}
