//! The decoder forward pass, built on the autodiff tape.

use rand::Rng;

use crate::data::{BBox, FeatureFile};
use crate::error::{Error, Result};
use crate::model::params::{
    DecoderConfig, DecoderParams, ExpertParams, FeedForwardParams, MoEConfig,
};
use crate::tensor::{Tape, Tensor, Var};

/// Routing decision for a single token.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingOutput {
    /// Softmax gate probabilities over all routed experts.
    pub gate_probs: Vec<f64>,
    /// Selected expert ids, highest probability first; ties prefer the
    /// lower index.
    pub topk_indices: Vec<usize>,
    /// Selected probabilities renormalized to sum to 1, aligned with
    /// `topk_indices`.
    pub topk_weights: Vec<f64>,
}

/// Counters filled during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MoeStats {
    /// Total expert MLP applications, counted per token.
    pub expert_token_evals: usize,
    /// Tokens that passed through feed-forward stages.
    pub tokens_processed: usize,
}

/// Model outputs for one sample.
#[derive(Debug, Clone)]
pub struct GazePrediction {
    /// Row-major `heatmap_size x heatmap_size` probabilities.
    pub heatmap: Vec<f64>,
    pub heatmap_size: usize,
    pub in_frame_prob: f64,
}

/// Tape handles of the two outputs, for composing losses.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[heatmap_size, heatmap_size]` probabilities.
    pub heatmap: Var,
    /// Single-element in-frame probability.
    pub in_prob: Var,
}

/// Indices of the `k` largest values, descending, ties to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Routes one token: gate probabilities, top-K selection, renormalized
/// weights. `w_g` has shape `[d_model, n_routed]`.
pub fn gate(x_token: &[f64], w_g: &Tensor, top_k: usize) -> Result<GatingOutput> {
    let shape = w_g.shape();
    if shape.len() != 2 || shape[0] != x_token.len() {
        return Err(Error::ShapeMismatch {
            op: "gate",
            lhs: vec![x_token.len()],
            rhs: shape.to_vec(),
        });
    }
    let n = shape[1];
    if !(1 <= top_k && top_k <= n) {
        return Err(Error::config(format!(
            "top_k {top_k} out of range for {n} experts"
        )));
    }
    if !x_token.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("gate input contains non-finite values"));
    }
    let w = w_g.data();
    let mut logits = vec![0.0; n];
    for (d, &xv) in x_token.iter().enumerate() {
        for (j, l) in logits.iter_mut().enumerate() {
            *l += xv * w[d * n + j];
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut gate_probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = gate_probs.iter().sum();
    for p in &mut gate_probs {
        *p /= sum;
    }
    let topk_indices = top_k_indices(&gate_probs, top_k);
    let picked: f64 = topk_indices.iter().map(|&i| gate_probs[i]).sum();
    let topk_weights = topk_indices.iter().map(|&i| gate_probs[i] / picked).collect();
    Ok(GatingOutput {
        gate_probs,
        topk_indices,
        topk_weights,
    })
}

// ── Bound parameters ────────────────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct BoundExpert {
    pub(crate) w1: Var,
    pub(crate) b1: Var,
    pub(crate) w2: Var,
    pub(crate) b2: Var,
}

impl BoundExpert {
    /// Groups four tape handles into one expert: `w1 [d, d_h]`, `b1 [d_h]`,
    /// `w2 [d_h, d]`, `b2 [d]`.
    pub fn new(w1: Var, b1: Var, w2: Var, b2: Var) -> Self {
        BoundExpert { w1, b1, w2, b2 }
    }
}

#[derive(Clone, Copy)]
pub struct BoundAttention {
    pub(crate) wq: Var,
    pub(crate) bq: Var,
    pub(crate) wk: Var,
    pub(crate) wv: Var,
    pub(crate) bv: Var,
    pub(crate) wo: Var,
    pub(crate) bo: Var,
}

pub enum BoundFfn {
    Moe {
        gate: Var,
        shared: Vec<BoundExpert>,
        routed: Vec<BoundExpert>,
    },
    Plain(BoundExpert),
}

pub struct BoundBlock {
    ln1_gamma: Var,
    ln1_beta: Var,
    attn: BoundAttention,
    ln2_gamma: Var,
    ln2_beta: Var,
    ffn: BoundFfn,
}

/// All parameters of one model instance as tape leaves, plus the same
/// handles in [`DecoderParams::visit`] order for the optimizer.
pub struct BoundDecoder {
    pub config: DecoderConfig,
    proj_w: Var,
    proj_b: Var,
    pos_embed: Var,
    prompt: Var,
    blocks: Vec<BoundBlock>,
    final_ln_gamma: Var,
    final_ln_beta: Var,
    heatmap_w: Var,
    heatmap_b: Var,
    inout_w: Var,
    inout_b: Var,
    ordered: Vec<(String, Var)>,
}

impl BoundDecoder {
    /// Parameter handles in visit order, paired with their stable names.
    pub fn ordered_vars(&self) -> &[(String, Var)] {
        &self.ordered
    }

    pub fn pos_embed_var(&self) -> Var {
        self.pos_embed
    }

    pub fn final_ln_vars(&self) -> (Var, Var) {
        (self.final_ln_gamma, self.final_ln_beta)
    }

    #[cfg(test)]
    pub(crate) fn block_attn(&self, i: usize) -> BoundAttention {
        self.blocks[i].attn
    }

    /// Runs one decoder block by index.
    pub fn run_block<R: Rng>(
        &self,
        tape: &mut Tape,
        x: Var,
        i: usize,
        training: bool,
        rng: &mut R,
        stats: &mut MoeStats,
    ) -> Result<Var> {
        decoder_block(tape, x, &self.blocks[i], &self.config, training, rng, stats)
    }

    /// Rebuilds the bound structure from leaves registered elsewhere (the
    /// finite-difference checker owns its own tape). `vars` must follow
    /// [`DecoderParams::visit`] order, which is also the `bind` order.
    pub fn from_vars(cfg: &DecoderConfig, vars: &[Var]) -> Result<BoundDecoder> {
        struct Feed<'a> {
            vars: &'a [Var],
            pos: usize,
            ordered: Vec<(String, Var)>,
        }
        impl Feed<'_> {
            fn next(&mut self, name: String) -> Result<Var> {
                let v = *self.vars.get(self.pos).ok_or_else(|| {
                    Error::config(format!(
                        "expected a var for {name}, got only {} vars",
                        self.pos
                    ))
                })?;
                self.pos += 1;
                self.ordered.push((name, v));
                Ok(v)
            }
            fn expert(&mut self, prefix: &str) -> Result<BoundExpert> {
                Ok(BoundExpert {
                    w1: self.next(format!("{prefix}.w1"))?,
                    b1: self.next(format!("{prefix}.b1"))?,
                    w2: self.next(format!("{prefix}.w2"))?,
                    b2: self.next(format!("{prefix}.b2"))?,
                })
            }
        }
        let mut f = Feed {
            vars,
            pos: 0,
            ordered: Vec::new(),
        };

        let proj_w = f.next("proj.w".into())?;
        let proj_b = f.next("proj.b".into())?;
        let pos_embed = f.next("pos_embed".into())?;
        let prompt = f.next("prompt".into())?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let ln1_gamma = f.next(format!("blocks.{i}.ln1.gamma"))?;
            let ln1_beta = f.next(format!("blocks.{i}.ln1.beta"))?;
            let attn = BoundAttention {
                wq: f.next(format!("blocks.{i}.attn.wq"))?,
                bq: f.next(format!("blocks.{i}.attn.bq"))?,
                wk: f.next(format!("blocks.{i}.attn.wk"))?,
                wv: f.next(format!("blocks.{i}.attn.wv"))?,
                bv: f.next(format!("blocks.{i}.attn.bv"))?,
                wo: f.next(format!("blocks.{i}.attn.wo"))?,
                bo: f.next(format!("blocks.{i}.attn.bo"))?,
            };
            let ln2_gamma = f.next(format!("blocks.{i}.ln2.gamma"))?;
            let ln2_beta = f.next(format!("blocks.{i}.ln2.beta"))?;
            let ffn = if cfg.ffn_only {
                BoundFfn::Plain(f.expert(&format!("blocks.{i}.ffn"))?)
            } else {
                let gate = f.next(format!("blocks.{i}.moe.gate"))?;
                let mut shared = Vec::with_capacity(cfg.moe.m_shared);
                for j in 0..cfg.moe.m_shared {
                    shared.push(f.expert(&format!("blocks.{i}.moe.shared.{j}"))?);
                }
                let mut routed = Vec::with_capacity(cfg.moe.n_routed);
                for j in 0..cfg.moe.n_routed {
                    routed.push(f.expert(&format!("blocks.{i}.moe.routed.{j}"))?);
                }
                BoundFfn::Moe {
                    gate,
                    shared,
                    routed,
                }
            };
            blocks.push(BoundBlock {
                ln1_gamma,
                ln1_beta,
                attn,
                ln2_gamma,
                ln2_beta,
                ffn,
            });
        }
        let final_ln_gamma = f.next("final_ln.gamma".into())?;
        let final_ln_beta = f.next("final_ln.beta".into())?;
        let heatmap_w = f.next("heatmap_head.w".into())?;
        let heatmap_b = f.next("heatmap_head.b".into())?;
        let inout_w = f.next("inout_head.w".into())?;
        let inout_b = f.next("inout_head.b".into())?;
        if f.pos != vars.len() {
            return Err(Error::config(format!(
                "{} vars supplied but the config uses {}",
                vars.len(),
                f.pos
            )));
        }

        Ok(BoundDecoder {
            config: *cfg,
            proj_w,
            proj_b,
            pos_embed,
            prompt,
            blocks,
            final_ln_gamma,
            final_ln_beta,
            heatmap_w,
            heatmap_b,
            inout_w,
            inout_b,
            ordered: f.ordered,
        })
    }
}

impl DecoderParams {
    /// Inserts every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundDecoder {
        let mut ordered = Vec::new();
        let mut leaf = |name: &str, t: &Tensor| {
            let v = tape.leaf(t);
            ordered.push((name.to_string(), v));
            v
        };
        let expert = |prefix: &str, e: &ExpertParams, leaf: &mut dyn FnMut(&str, &Tensor) -> Var| BoundExpert {
            w1: leaf(&format!("{prefix}.w1"), &e.w1),
            b1: leaf(&format!("{prefix}.b1"), &e.b1),
            w2: leaf(&format!("{prefix}.w2"), &e.w2),
            b2: leaf(&format!("{prefix}.b2"), &e.b2),
        };

        let proj_w = leaf("proj.w", &self.proj_w);
        let proj_b = leaf("proj.b", &self.proj_b);
        let pos_embed = leaf("pos_embed", &self.pos_embed);
        let prompt = leaf("prompt", &self.prompt);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| BoundBlock {
                ln1_gamma: leaf(&format!("blocks.{i}.ln1.gamma"), &b.ln1_gamma),
                ln1_beta: leaf(&format!("blocks.{i}.ln1.beta"), &b.ln1_beta),
                attn: BoundAttention {
                    wq: leaf(&format!("blocks.{i}.attn.wq"), &b.attn.wq),
                    bq: leaf(&format!("blocks.{i}.attn.bq"), &b.attn.bq),
                    wk: leaf(&format!("blocks.{i}.attn.wk"), &b.attn.wk),
                    wv: leaf(&format!("blocks.{i}.attn.wv"), &b.attn.wv),
                    bv: leaf(&format!("blocks.{i}.attn.bv"), &b.attn.bv),
                    wo: leaf(&format!("blocks.{i}.attn.wo"), &b.attn.wo),
                    bo: leaf(&format!("blocks.{i}.attn.bo"), &b.attn.bo),
                },
                ln2_gamma: leaf(&format!("blocks.{i}.ln2.gamma"), &b.ln2_gamma),
                ln2_beta: leaf(&format!("blocks.{i}.ln2.beta"), &b.ln2_beta),
                ffn: match &b.ffn {
                    FeedForwardParams::Moe {
                        gate,
                        shared,
                        routed,
                    } => BoundFfn::Moe {
                        gate: leaf(&format!("blocks.{i}.moe.gate"), gate),
                        shared: shared
                            .iter()
                            .enumerate()
                            .map(|(j, e)| {
                                expert(&format!("blocks.{i}.moe.shared.{j}"), e, &mut leaf)
                            })
                            .collect(),
                        routed: routed
                            .iter()
                            .enumerate()
                            .map(|(j, e)| {
                                expert(&format!("blocks.{i}.moe.routed.{j}"), e, &mut leaf)
                            })
                            .collect(),
                    },
                    FeedForwardParams::Plain(e) => {
                        BoundFfn::Plain(expert(&format!("blocks.{i}.ffn"), e, &mut leaf))
                    }
                },
            })
            .collect();
        let final_ln_gamma = leaf("final_ln.gamma", &self.final_ln_gamma);
        let final_ln_beta = leaf("final_ln.beta", &self.final_ln_beta);
        let heatmap_w = leaf("heatmap_head.w", &self.heatmap_w);
        let heatmap_b = leaf("heatmap_head.b", &self.heatmap_b);
        let inout_w = leaf("inout_head.w", &self.inout_w);
        let inout_b = leaf("inout_head.b", &self.inout_b);

        BoundDecoder {
            config: self.config,
            proj_w,
            proj_b,
            pos_embed,
            prompt,
            blocks,
            final_ln_gamma,
            final_ln_beta,
            heatmap_w,
            heatmap_b,
            inout_w,
            inout_b,
            ordered,
        }
    }
}

// ── Forward stages ──────────────────────────────────────────────────────

/// Rearranges `[channels, grid, grid]` feature data into a constant
/// `[seq_len, channels]` token matrix.
fn features_as_tokens(tape: &mut Tape, features: &FeatureFile, cfg: &DecoderConfig) -> Result<Var> {
    features.check_dims(cfg.feature_dim, cfg.grid)?;
    let (c, seq) = (cfg.feature_dim, cfg.seq_len());
    let mut data = vec![0.0; seq * c];
    for ch in 0..c {
        for t in 0..seq {
            data[t * c + ch] = features.data[ch * seq + t];
        }
    }
    tape.constant(vec![seq, c], data)
}

/// Per-position linear map `feature_dim -> d_model` (a 1x1 convolution).
pub fn project_features(
    tape: &mut Tape,
    bound: &BoundDecoder,
    features: &FeatureFile,
) -> Result<Var> {
    let tokens = features_as_tokens(tape, features, &bound.config)?;
    let projected = tape.matmul(tokens, bound.proj_w)?;
    tape.add_row_vec(projected, bound.proj_b)
}

/// Marks grid cells whose centers fall inside the bbox. Returns the mask
/// and whether the empty-mask guard snapped to the nearest cell.
pub fn rasterize_bbox_mask(bbox: &BBox, grid: usize) -> Result<(Vec<f64>, bool)> {
    let (x_min, y_min) = (bbox.x, bbox.y);
    let (x_max, y_max) = (bbox.x + bbox.w, bbox.y + bbox.h);
    if !(0.0 <= x_min && x_min < x_max && x_max <= 1.0 + 1e-9)
        || !(0.0 <= y_min && y_min < y_max && y_max <= 1.0 + 1e-9)
    {
        return Err(Error::config(format!(
            "bbox [{x_min}, {y_min}, {x_max}, {y_max}] is not a valid sub-rectangle of the unit square"
        )));
    }
    let mut mask = vec![0.0; grid * grid];
    let mut any = false;
    for r in 0..grid {
        let cy = (r as f64 + 0.5) / grid as f64;
        for c in 0..grid {
            let cx = (c as f64 + 0.5) / grid as f64;
            if cx >= x_min && cx < x_max && cy >= y_min && cy < y_max {
                mask[r * grid + c] = 1.0;
                any = true;
            }
        }
    }
    if any {
        return Ok((mask, false));
    }
    // The bbox fell between cell centers; snap to the nearest cell so the
    // prompt never vanishes.
    let (bx, by) = bbox.center();
    let nearest = |v: f64| ((v * grid as f64 - 0.5).round().max(0.0) as usize).min(grid - 1);
    mask[nearest(by) * grid + nearest(bx)] = 1.0;
    log::warn!(
        "bbox [{x_min:.4}, {y_min:.4}, {x_max:.4}, {y_max:.4}] rasterizes to no cell on a {grid}x{grid} grid; snapped to the nearest cell"
    );
    Ok((mask, true))
}

/// Adds the learned prompt vector to every token inside the bbox mask.
pub fn embed_head_prompt(
    tape: &mut Tape,
    bound: &BoundDecoder,
    tokens: Var,
    bbox: &BBox,
) -> Result<Var> {
    let grid = bound.config.grid;
    let (mask, _) = rasterize_bbox_mask(bbox, grid)?;
    let seq = grid * grid;
    let mask_col = tape.constant(vec![seq, 1], mask)?;
    let d = bound.config.d_model;
    let prompt_row = tape.reshape(bound.prompt, vec![1, d])?;
    let shift = tape.matmul(mask_col, prompt_row)?;
    tape.add(tokens, shift)
}

/// Two-layer expert MLP on a `[rows, d_model]` slab.
pub fn expert_mlp(tape: &mut Tape, x: Var, e: &BoundExpert) -> Result<Var> {
    let h = tape.matmul(x, e.w1)?;
    let h = tape.add_row_vec(h, e.b1)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, e.w2)?;
    tape.add_row_vec(y, e.b2)
}

/// Mixture of experts over flattened tokens: always-on shared experts plus
/// top-K routed experts with renormalized gate weights. Only selected
/// experts run; the counter in `stats` proves it.
pub fn moe_forward(
    tape: &mut Tape,
    x: Var,
    gate_w: Var,
    shared: &[BoundExpert],
    routed: &[BoundExpert],
    moe_cfg: &MoEConfig,
    stats: &mut MoeStats,
) -> Result<Var> {
    moe_cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != moe_cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "moe_forward",
            lhs: shape,
            rhs: vec![moe_cfg.d_model],
        });
    }
    let t_total = shape[0];
    let (n, k) = (moe_cfg.n_routed, moe_cfg.top_k);
    stats.tokens_processed += t_total;

    // Gate probabilities for every token.
    let logits = tape.matmul(x, gate_w)?;
    let probs = tape.softmax(logits, 1)?;
    let probs_data = tape.data(probs).to_vec();

    // Discrete selection happens outside the graph.
    let mut selected = vec![0usize; t_total * k];
    for t in 0..t_total {
        let row = &probs_data[t * n..(t + 1) * n];
        let picks = top_k_indices(row, k);
        selected[t * k..(t + 1) * k].copy_from_slice(&picks);
    }
    let flat: Vec<usize> = (0..t_total * k)
        .map(|i| (i / k) * n + selected[i])
        .collect();
    // Renormalized weights p_i / sum(selected p) come out of a softmax over
    // the selected logits alone; the full-row normalizer cancels. Built this
    // way, gradients flow only into the selected gate columns.
    let picked_logits = tape.gather_elems(logits, &flat)?;
    let picked_logits = tape.reshape(picked_logits, vec![t_total, k])?;
    let weights = tape.softmax(picked_logits, 1)?;

    // Shared path: every expert sees every token.
    let mut shared_acc: Option<Var> = None;
    for e in shared {
        let y = expert_mlp(tape, x, e)?;
        stats.expert_token_evals += t_total;
        shared_acc = Some(match shared_acc {
            Some(acc) => tape.add(acc, y)?,
            None => y,
        });
    }
    let x_shared = tape.mul_scalar(
        shared_acc.expect("m_shared >= 1 by validation"),
        1.0 / shared.len() as f64,
    );

    // Routed path: gather each expert's tokens, run once, scatter back.
    let mut x_routed = tape.constant(vec![t_total, moe_cfg.d_model], vec![0.0; t_total * moe_cfg.d_model])?;
    for (e_idx, e) in routed.iter().enumerate() {
        let mut token_ids = Vec::new();
        let mut weight_slots = Vec::new();
        for t in 0..t_total {
            for slot in 0..k {
                if selected[t * k + slot] == e_idx {
                    token_ids.push(t);
                    weight_slots.push(t * k + slot);
                }
            }
        }
        if token_ids.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, &token_ids)?;
        let ye = expert_mlp(tape, xe, e)?;
        stats.expert_token_evals += token_ids.len();
        let we = tape.gather_elems(weights, &weight_slots)?;
        let ye = tape.scale_rows(ye, we)?;
        let scattered = tape.scatter_rows(ye, &token_ids, t_total)?;
        x_routed = tape.add(x_routed, scattered)?;
    }

    tape.add(x_shared, x_routed)
}

/// Scaled dot-product multi-head self-attention.
pub fn attention(
    tape: &mut Tape,
    x: Var,
    p: &BoundAttention,
    num_heads: usize,
) -> Result<Var> {
    let d = tape.shape(x)[1];
    if d % num_heads != 0 {
        return Err(Error::config(format!(
            "d_model {d} not divisible by {num_heads} heads"
        )));
    }
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(x, p.wq)?;
    let q = tape.add_row_vec(q, p.bq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let v = tape.add_row_vec(v, p.bv)?;

    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let concat = tape.concat_cols(&heads)?;
    let out = tape.matmul(concat, p.wo)?;
    tape.add_row_vec(out, p.bo)
}

/// Pre-norm transformer block: attention then feed-forward, each with a
/// residual connection and dropout during training.
pub fn decoder_block<R: Rng>(
    tape: &mut Tape,
    x: Var,
    block: &BoundBlock,
    cfg: &DecoderConfig,
    training: bool,
    rng: &mut R,
    stats: &mut MoeStats,
) -> Result<Var> {
    let h = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta)?;
    let a = attention(tape, h, &block.attn, cfg.num_heads)?;
    let a = tape.dropout(a, cfg.dropout, training, rng)?;
    let x = tape.add(x, a)?;

    let h = tape.layer_norm(x, block.ln2_gamma, block.ln2_beta)?;
    let f = match &block.ffn {
        BoundFfn::Moe {
            gate,
            shared,
            routed,
        } => moe_forward(tape, h, *gate, shared, routed, &cfg.moe, stats)?,
        BoundFfn::Plain(e) => {
            let y = expert_mlp(tape, h, e)?;
            stats.expert_token_evals += tape.shape(h)[0];
            stats.tokens_processed += tape.shape(h)[0];
            y
        }
    };
    let f = tape.dropout(f, cfg.dropout, training, rng)?;
    tape.add(x, f)
}

/// Per-token logits on the grid, bilinear upsample, sigmoid.
pub fn heatmap_head(tape: &mut Tape, bound: &BoundDecoder, tokens: Var) -> Result<Var> {
    let g = bound.config.grid;
    let h = bound.config.heatmap_size;
    let logits = tape.matmul(tokens, bound.heatmap_w)?;
    let logits = tape.add_row_vec(logits, bound.heatmap_b)?;
    let grid_map = tape.reshape(logits, vec![g, g])?;
    let up = tape.bilinear_resize(grid_map, h, h)?;
    Ok(tape.sigmoid(up))
}

/// Mean-pool tokens, linear map, sigmoid.
pub fn inout_head(tape: &mut Tape, bound: &BoundDecoder, tokens: Var) -> Result<Var> {
    let pooled = tape.mean_rows(tokens)?;
    let pooled = tape.reshape(pooled, vec![1, bound.config.d_model])?;
    let logit = tape.matmul(pooled, bound.inout_w)?;
    let logit = tape.add_row_vec(logit, bound.inout_b)?;
    let p = tape.sigmoid(logit);
    tape.reshape(p, vec![1])
}

/// Full forward pass on the tape. Deterministic when `training` is false.
pub fn forward_on_tape<R: Rng>(
    tape: &mut Tape,
    bound: &BoundDecoder,
    features: &FeatureFile,
    bbox: &BBox,
    training: bool,
    rng: &mut R,
    stats: &mut MoeStats,
) -> Result<ForwardVars> {
    let cfg = &bound.config;
    let tokens = project_features(tape, bound, features)?;
    let tokens = tape.add(tokens, bound.pos_embed)?;
    let mut tokens = embed_head_prompt(tape, bound, tokens, bbox)?;
    for block in &bound.blocks {
        tokens = decoder_block(tape, tokens, block, cfg, training, rng, stats)?;
    }
    let tokens = tape.layer_norm(tokens, bound.final_ln_gamma, bound.final_ln_beta)?;
    let heatmap = heatmap_head(tape, bound, tokens)?;
    let in_prob = inout_head(tape, bound, tokens)?;
    Ok(ForwardVars { heatmap, in_prob })
}

impl DecoderParams {
    /// Inference in eval mode: builds a throwaway graph and extracts the
    /// outputs. Two calls on the same inputs are bitwise identical.
    pub fn forward(&self, features: &FeatureFile, bbox: &BBox) -> Result<GazePrediction> {
        use rand::SeedableRng;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut stats = MoeStats::default();
        let out = forward_on_tape(
            &mut tape, &bound, features, bbox, false, &mut rng, &mut stats,
        )?;
        Ok(GazePrediction {
            heatmap: tape.data(out.heatmap).to_vec(),
            heatmap_size: self.config.heatmap_size,
            in_frame_prob: tape.data(out.in_prob)[0],
        })
    }
}
