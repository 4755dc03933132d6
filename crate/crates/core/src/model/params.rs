//! Model configuration and parameter containers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of one Mixture-of-Experts layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoEConfig {
    /// Number of routed experts (N).
    pub n_routed: usize,
    /// Number of always-on shared experts (M).
    pub m_shared: usize,
    /// Experts selected per token (K).
    pub top_k: usize,
    pub d_model: usize,
    /// Expert hidden width as a multiple of `d_model`.
    pub mlp_ratio: usize,
}

impl Default for MoEConfig {
    fn default() -> Self {
        MoEConfig {
            n_routed: 4,
            m_shared: 1,
            top_k: 2,
            d_model: 256,
            mlp_ratio: 1,
        }
    }
}

impl MoEConfig {
    /// Expert hidden width.
    pub fn d_h(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_routed == 0 {
            return Err(Error::config("n_routed must be at least 1"));
        }
        if !(1 <= self.top_k && self.top_k <= self.n_routed) {
            return Err(Error::config(format!(
                "top_k must satisfy 1 <= K <= N, got K={} N={}",
                self.top_k, self.n_routed
            )));
        }
        if self.m_shared == 0 {
            return Err(Error::config("m_shared must be at least 1"));
        }
        if self.d_model == 0 || self.mlp_ratio == 0 {
            return Err(Error::config(format!(
                "d_model and mlp_ratio must be positive, got {} and {}",
                self.d_model, self.mlp_ratio
            )));
        }
        Ok(())
    }
}

/// Full decoder hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub dropout: f64,
    /// Channel count of the frozen-encoder features.
    pub feature_dim: usize,
    /// Token grid side; the sequence length is `grid * grid`.
    pub grid: usize,
    pub heatmap_size: usize,
    pub moe: MoEConfig,
    /// Replace the MoE with a single plain FFN of expert shape.
    pub ffn_only: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_blocks: 3,
            num_heads: 8,
            d_model: 256,
            dropout: 0.1,
            feature_dim: 1024,
            grid: 32,
            heatmap_size: 64,
            moe: MoEConfig::default(),
            ffn_only: false,
        }
    }
}

impl DecoderConfig {
    pub fn seq_len(&self) -> usize {
        self.grid * self.grid
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.num_heads == 0 {
            return Err(Error::config("need at least one block and one head"));
        }
        if self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.feature_dim == 0 || self.grid == 0 {
            return Err(Error::config("feature_dim and grid must be positive"));
        }
        if self.heatmap_size < self.grid {
            return Err(Error::config(format!(
                "heatmap_size {} must be at least the token grid {}",
                self.heatmap_size, self.grid
            )));
        }
        if self.moe.d_model != self.d_model {
            return Err(Error::config(format!(
                "moe.d_model {} disagrees with decoder d_model {}",
                self.moe.d_model, self.d_model
            )));
        }
        self.moe.validate()
    }

    /// Small config for gradient checking: full structure, tiny widths.
    pub fn toy() -> Self {
        DecoderConfig {
            num_blocks: 2,
            num_heads: 2,
            d_model: 16,
            dropout: 0.1,
            feature_dim: 8,
            grid: 4,
            heatmap_size: 8,
            moe: MoEConfig {
                n_routed: 4,
                m_shared: 1,
                top_k: 2,
                d_model: 16,
                mlp_ratio: 1,
            },
            ffn_only: false,
        }
    }

    /// Config for the overfit probe: enough spatial resolution that the
    /// upsampled heatmap can place its peak near any target cell, small
    /// enough to train in seconds.
    pub fn toy_overfit() -> Self {
        DecoderConfig {
            num_blocks: 2,
            num_heads: 2,
            d_model: 16,
            dropout: 0.0,
            feature_dim: 8,
            grid: 16,
            heatmap_size: 64,
            moe: MoEConfig {
                n_routed: 4,
                m_shared: 1,
                top_k: 2,
                d_model: 16,
                mlp_ratio: 1,
            },
            ffn_only: false,
        }
    }
}

/// Two-layer expert MLP weights: `GeLU(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Attention projections. Keys take no bias: a shared key offset shifts
/// every score in a row equally, which the softmax cancels exactly.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Feed-forward stage of one block: either the MoE or a single plain FFN.
#[derive(Debug, Clone)]
pub enum FeedForwardParams {
    Moe {
        /// Gate projection `[d_model, n_routed]`, no bias.
        gate: Tensor,
        shared: Vec<ExpertParams>,
        routed: Vec<ExpertParams>,
    },
    Plain(ExpertParams),
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attn: AttentionParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ffn: FeedForwardParams,
}

/// All learnable parameters of the decoder.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    /// 1x1-conv feature projection `[feature_dim, d_model]` plus bias.
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    /// Learned per-token positional embedding `[seq_len, d_model]`.
    pub pos_embed: Tensor,
    /// Learned head-prompt vector added inside the bbox mask.
    pub prompt: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    /// Per-token heatmap logit readout `[d_model, 1]` plus bias.
    pub heatmap_w: Tensor,
    pub heatmap_b: Tensor,
    /// Pooled in/out-of-frame logit readout `[d_model, 1]` plus bias.
    pub inout_w: Tensor,
    pub inout_b: Tensor,
}

/// Scale for the positional embedding and head prompt.
const EMBED_STD: f64 = 0.02;

impl DecoderParams {
    /// Random initialization: projection weights from N(0, 1/fan_in),
    /// embeddings from N(0, 0.02), biases and layer norm shifts zero,
    /// layer norm scales one.
    pub fn init<R: Rng>(config: &DecoderConfig, rng: &mut R) -> Result<Self> {
        Self::construct(config, &mut |shape, fan_in| {
            let std = match fan_in {
                0 => EMBED_STD,
                n => 1.0 / (n as f64).sqrt(),
            };
            Tensor::randn(shape, std, rng)
        })
    }

    /// All-zero weights (used as a shape template when loading checkpoints).
    pub fn zeros(config: &DecoderConfig) -> Result<Self> {
        Self::construct(config, &mut |shape, _| {
            Tensor::zeros(shape).with_requires_grad(true)
        })
    }

    fn construct(
        config: &DecoderConfig,
        weight: &mut dyn FnMut(Vec<usize>, usize) -> Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let d_h = config.moe.d_h();
        let seq = config.seq_len();
        let zeros = |shape: Vec<usize>| Tensor::zeros(shape).with_requires_grad(true);
        let ones = |shape: Vec<usize>| Tensor::full(shape, 1.0).with_requires_grad(true);

        fn expert(
            d: usize,
            d_h: usize,
            weight: &mut dyn FnMut(Vec<usize>, usize) -> Tensor,
        ) -> ExpertParams {
            let zeros = |shape: Vec<usize>| Tensor::zeros(shape).with_requires_grad(true);
            ExpertParams {
                w1: weight(vec![d, d_h], d),
                b1: zeros(vec![d_h]),
                w2: weight(vec![d_h, d], d_h),
                b2: zeros(vec![d]),
            }
        }

        let blocks = (0..config.num_blocks)
            .map(|_| BlockParams {
                ln1_gamma: ones(vec![d]),
                ln1_beta: zeros(vec![d]),
                attn: AttentionParams {
                    wq: weight(vec![d, d], d),
                    bq: zeros(vec![d]),
                    wk: weight(vec![d, d], d),
                    wv: weight(vec![d, d], d),
                    bv: zeros(vec![d]),
                    wo: weight(vec![d, d], d),
                    bo: zeros(vec![d]),
                },
                ln2_gamma: ones(vec![d]),
                ln2_beta: zeros(vec![d]),
                ffn: if config.ffn_only {
                    FeedForwardParams::Plain(expert(d, d_h, weight))
                } else {
                    FeedForwardParams::Moe {
                        gate: weight(vec![d, config.moe.n_routed], d),
                        shared: (0..config.moe.m_shared)
                            .map(|_| expert(d, d_h, weight))
                            .collect(),
                        routed: (0..config.moe.n_routed)
                            .map(|_| expert(d, d_h, weight))
                            .collect(),
                    }
                },
            })
            .collect();

        Ok(DecoderParams {
            config: *config,
            proj_w: weight(vec![config.feature_dim, d], config.feature_dim),
            proj_b: zeros(vec![d]),
            pos_embed: weight(vec![seq, d], 0),
            prompt: weight(vec![d], 0),
            blocks,
            final_ln_gamma: ones(vec![d]),
            final_ln_beta: zeros(vec![d]),
            heatmap_w: weight(vec![d, 1], d),
            heatmap_b: zeros(vec![1]),
            inout_w: weight(vec![d, 1], d),
            inout_b: zeros(vec![1]),
        })
    }

    /// Walks every parameter in a fixed order with its stable name.
    pub fn visit<'a, F: FnMut(String, &'a Tensor)>(&'a self, mut f: F) {
        let expert = |prefix: String, e: &'a ExpertParams, f: &mut F| {
            f(format!("{prefix}.w1"), &e.w1);
            f(format!("{prefix}.b1"), &e.b1);
            f(format!("{prefix}.w2"), &e.w2);
            f(format!("{prefix}.b2"), &e.b2);
        };
        f("proj.w".into(), &self.proj_w);
        f("proj.b".into(), &self.proj_b);
        f("pos_embed".into(), &self.pos_embed);
        f("prompt".into(), &self.prompt);
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("blocks.{i}.ln1.gamma"), &b.ln1_gamma);
            f(format!("blocks.{i}.ln1.beta"), &b.ln1_beta);
            f(format!("blocks.{i}.attn.wq"), &b.attn.wq);
            f(format!("blocks.{i}.attn.bq"), &b.attn.bq);
            f(format!("blocks.{i}.attn.wk"), &b.attn.wk);
            f(format!("blocks.{i}.attn.wv"), &b.attn.wv);
            f(format!("blocks.{i}.attn.bv"), &b.attn.bv);
            f(format!("blocks.{i}.attn.wo"), &b.attn.wo);
            f(format!("blocks.{i}.attn.bo"), &b.attn.bo);
            f(format!("blocks.{i}.ln2.gamma"), &b.ln2_gamma);
            f(format!("blocks.{i}.ln2.beta"), &b.ln2_beta);
            match &b.ffn {
                FeedForwardParams::Moe {
                    gate,
                    shared,
                    routed,
                } => {
                    f(format!("blocks.{i}.moe.gate"), gate);
                    for (j, e) in shared.iter().enumerate() {
                        expert(format!("blocks.{i}.moe.shared.{j}"), e, &mut f);
                    }
                    for (j, e) in routed.iter().enumerate() {
                        expert(format!("blocks.{i}.moe.routed.{j}"), e, &mut f);
                    }
                }
                FeedForwardParams::Plain(e) => {
                    expert(format!("blocks.{i}.ffn"), e, &mut f);
                }
            }
        }
        f("final_ln.gamma".into(), &self.final_ln_gamma);
        f("final_ln.beta".into(), &self.final_ln_beta);
        f("heatmap_head.w".into(), &self.heatmap_w);
        f("heatmap_head.b".into(), &self.heatmap_b);
        f("inout_head.w".into(), &self.inout_w);
        f("inout_head.b".into(), &self.inout_b);
    }

    /// Mutable twin of `visit`; must traverse in the identical order.
    pub fn visit_mut<F: FnMut(String, &mut Tensor)>(&mut self, mut f: F) {
        let expert = |prefix: String, e: &mut ExpertParams, f: &mut F| {
            f(format!("{prefix}.w1"), &mut e.w1);
            f(format!("{prefix}.b1"), &mut e.b1);
            f(format!("{prefix}.w2"), &mut e.w2);
            f(format!("{prefix}.b2"), &mut e.b2);
        };
        f("proj.w".into(), &mut self.proj_w);
        f("proj.b".into(), &mut self.proj_b);
        f("pos_embed".into(), &mut self.pos_embed);
        f("prompt".into(), &mut self.prompt);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("blocks.{i}.ln1.gamma"), &mut b.ln1_gamma);
            f(format!("blocks.{i}.ln1.beta"), &mut b.ln1_beta);
            f(format!("blocks.{i}.attn.wq"), &mut b.attn.wq);
            f(format!("blocks.{i}.attn.bq"), &mut b.attn.bq);
            f(format!("blocks.{i}.attn.wk"), &mut b.attn.wk);
            f(format!("blocks.{i}.attn.wv"), &mut b.attn.wv);
            f(format!("blocks.{i}.attn.bv"), &mut b.attn.bv);
            f(format!("blocks.{i}.attn.wo"), &mut b.attn.wo);
            f(format!("blocks.{i}.attn.bo"), &mut b.attn.bo);
            f(format!("blocks.{i}.ln2.gamma"), &mut b.ln2_gamma);
            f(format!("blocks.{i}.ln2.beta"), &mut b.ln2_beta);
            match &mut b.ffn {
                FeedForwardParams::Moe {
                    gate,
                    shared,
                    routed,
                } => {
                    f(format!("blocks.{i}.moe.gate"), gate);
                    for (j, e) in shared.iter_mut().enumerate() {
                        expert(format!("blocks.{i}.moe.shared.{j}"), e, &mut f);
                    }
                    for (j, e) in routed.iter_mut().enumerate() {
                        expert(format!("blocks.{i}.moe.routed.{j}"), e, &mut f);
                    }
                }
                FeedForwardParams::Plain(e) => {
                    expert(format!("blocks.{i}.ffn"), e, &mut f);
                }
            }
        }
        f("final_ln.gamma".into(), &mut self.final_ln_gamma);
        f("final_ln.beta".into(), &mut self.final_ln_beta);
        f("heatmap_head.w".into(), &mut self.heatmap_w);
        f("heatmap_head.b".into(), &mut self.heatmap_b);
        f("inout_head.w".into(), &mut self.inout_w);
        f("inout_head.b".into(), &mut self.inout_b);
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(|name, t| out.push((name, t)));
        out
    }

    pub fn count_learnable_params(&self) -> usize {
        let mut total = 0;
        self.visit(|_, t| total += t.numel());
        total
    }

    /// Names whose parameters belong to the in/out head; the finetune
    /// recipe gives these their own learning rate.
    pub fn is_inout_head_param(name: &str) -> bool {
        name.starts_with("inout_head.")
    }
}
