use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BBox, FeatureFile, FeatureHeader};
use crate::model::forward::BoundExpert;
use crate::model::*;
use crate::tensor::{Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_features(cfg: &DecoderConfig, seed: u64) -> FeatureFile {
    let mut r = rng(seed);
    let numel = cfg.feature_dim * cfg.seq_len();
    FeatureFile {
        header: FeatureHeader {
            dims: [cfg.feature_dim, cfg.grid, cfg.grid],
            dtype: "f32".to_string(),
            source: "test".to_string(),
        },
        data: (0..numel)
            .map(|_| rand::Rng::random_range(&mut r, -1.0..1.0))
            .collect(),
    }
}

fn center_bbox() -> BBox {
    BBox {
        x: 0.4,
        y: 0.4,
        w: 0.2,
        h: 0.2,
    }
}

/// Plain f64 matrix multiply for oracles, deliberately written with the
/// naive triple loop in a different order than the tape kernel.
fn oracle_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn oracle_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2.0f64.sqrt()))
}

/// Expert MLP in plain f64: GeLU(x W1 + b1) W2 + b2.
fn oracle_expert(x: &[f64], rows: usize, d: usize, d_h: usize, e: &ExpertParams) -> Vec<f64> {
    let mut h = oracle_matmul(x, e.w1.data(), rows, d, d_h);
    for r in 0..rows {
        for j in 0..d_h {
            h[r * d_h + j] = oracle_gelu(h[r * d_h + j] + e.b1.data()[j]);
        }
    }
    let mut y = oracle_matmul(&h, e.w2.data(), rows, d_h, d);
    for r in 0..rows {
        for j in 0..d {
            y[r * d + j] += e.b2.data()[j];
        }
    }
    y
}

// ── Gating ──────────────────────────────────────────────────────────────

#[test]
fn gate_equal_logits_splits_evenly_and_breaks_ties_low() {
    let w_g = Tensor::zeros(vec![8, 4]);
    let x = vec![0.3; 8];
    let g = gate(&x, &w_g, 2).unwrap();
    for &p in &g.gate_probs {
        assert!((p - 0.25).abs() < 1e-15);
    }
    assert_eq!(g.topk_indices, vec![0, 1]);
    assert_eq!(g.topk_weights, vec![0.5, 0.5]);
}

#[test]
fn gate_hand_arithmetic_case() {
    // Logits ln(0.4), ln(0.3), ln(0.2), ln(0.1) give exactly those
    // probabilities, so the top-2 weights are 4/7 and 3/7.
    let logits = [0.4f64, 0.3, 0.2, 0.1].map(f64::ln);
    let w_g = Tensor::from_vec(vec![1, 4], logits.to_vec()).unwrap();
    let g = gate(&[1.0], &w_g, 2).unwrap();
    assert_eq!(g.topk_indices, vec![0, 1]);
    assert!((g.topk_weights[0] - 4.0 / 7.0).abs() < 1e-12);
    assert!((g.topk_weights[1] - 3.0 / 7.0).abs() < 1e-12);
}

#[test]
fn gate_full_k_reproduces_probs() {
    let mut r = rng(1);
    let w_g = Tensor::randn(vec![8, 4], 1.0, &mut r);
    let x: Vec<f64> = (0..8).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    let g = gate(&x, &w_g, 4).unwrap();
    let sum: f64 = g.topk_weights.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
    for (idx, w) in g.topk_indices.iter().zip(&g.topk_weights) {
        assert!((g.gate_probs[*idx] - w).abs() < 1e-12);
    }
}

#[test]
fn gate_matches_full_sort_oracle() {
    let mut r = rng(7);
    for _ in 0..2000 {
        let n = rand::Rng::random_range(&mut r, 1..=6usize);
        let k = rand::Rng::random_range(&mut r, 1..=n);
        let d = 8;
        let w_g = Tensor::randn(vec![d, n], 1.0, &mut r);
        let x: Vec<f64> = (0..d).map(|_| rand::Rng::random_range(&mut r, -2.0..2.0)).collect();
        let g = gate(&x, &w_g, k).unwrap();

        // Oracle: full sort of (prob, index) pairs.
        let mut pairs: Vec<(f64, usize)> =
            g.gate_probs.iter().cloned().zip(0..n).collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let expect: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
        assert_eq!(g.topk_indices, expect);

        let picked: f64 = expect.iter().map(|&i| g.gate_probs[i]).sum();
        for (slot, &i) in expect.iter().enumerate() {
            assert!((g.topk_weights[slot] - g.gate_probs[i] / picked).abs() < 1e-9);
        }
        assert!((g.topk_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(g.gate_probs.iter().all(|&p| p > 0.0 && p <= 1.0));
        let psum: f64 = g.gate_probs.iter().sum();
        assert!((psum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gate_selection_invariant_under_positive_logit_scaling() {
    let mut r = rng(3);
    for _ in 0..100 {
        let w_g = Tensor::randn(vec![6, 5], 1.0, &mut r);
        let x: Vec<f64> = (0..6).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let base = gate(&x, &w_g, 3).unwrap();
        for c in [0.5, 2.0, 10.0] {
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            let g = gate(&scaled, &w_g, 3).unwrap();
            assert_eq!(g.topk_indices, base.topk_indices, "scale {c}");
        }
    }
}

#[test]
fn gate_rejects_bad_inputs() {
    let w_g = Tensor::zeros(vec![4, 4]);
    assert!(gate(&[1.0, 2.0], &w_g, 2).is_err());
    assert!(gate(&[1.0; 4], &w_g, 0).is_err());
    assert!(gate(&[1.0; 4], &w_g, 5).is_err());
    assert!(gate(&[f64::NAN, 0.0, 0.0, 0.0], &w_g, 2).is_err());
}

// ── MoE forward ─────────────────────────────────────────────────────────

struct MoeFixture {
    params: Vec<ExpertParams>,
    gate_w: Tensor,
    cfg: MoEConfig,
}

impl MoeFixture {
    fn new(d: usize, m: usize, n: usize, k: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut expert = || ExpertParams {
            w1: Tensor::randn(vec![d, d], 1.0, &mut r),
            b1: Tensor::randn(vec![d], 0.5, &mut r),
            w2: Tensor::randn(vec![d, d], 1.0, &mut r),
            b2: Tensor::randn(vec![d], 0.5, &mut r),
        };
        let params: Vec<ExpertParams> = (0..m + n).map(|_| expert()).collect();
        let gate_w = Tensor::randn(vec![d, n], 1.0, &mut r);
        MoeFixture {
            params,
            gate_w,
            cfg: MoEConfig {
                n_routed: n,
                m_shared: m,
                top_k: k,
                d_model: d,
                mlp_ratio: 1,
            },
        }
    }

    fn bind(&self, tape: &mut Tape) -> (Var, Vec<BoundExpert>, Vec<BoundExpert>) {
        let gate_v = tape.leaf(&self.gate_w);
        let bind_e = |tape: &mut Tape, e: &ExpertParams| BoundExpert {
            w1: tape.leaf(&e.w1),
            b1: tape.leaf(&e.b1),
            w2: tape.leaf(&e.w2),
            b2: tape.leaf(&e.b2),
        };
        let shared = self.params[..self.cfg.m_shared]
            .iter()
            .map(|e| bind_e(tape, e))
            .collect();
        let routed = self.params[self.cfg.m_shared..]
            .iter()
            .map(|e| bind_e(tape, e))
            .collect();
        (gate_v, shared, routed)
    }

    fn run(&self, x_data: &[f64], t: usize) -> (Vec<f64>, MoeStats) {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![t, self.cfg.d_model], x_data.to_vec())
            .unwrap();
        let (gate_v, shared, routed) = self.bind(&mut tape);
        let mut stats = MoeStats::default();
        let out = moe_forward(
            &mut tape, x, gate_v, &shared, &routed, &self.cfg, &mut stats,
        )
        .unwrap();
        (tape.data(out).to_vec(), stats)
    }
}

#[test]
fn moe_single_expert_each_is_plain_sum() {
    // M=1, K=N=1: no selection happens; x' = E_shared(x) + E_routed(x).
    let d = 6;
    let fx = MoeFixture::new(d, 1, 1, 1, 11);
    let mut r = rng(4);
    let t = 5;
    let x: Vec<f64> = (0..t * d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    let (got, stats) = fx.run(&x, t);
    let shared = oracle_expert(&x, t, d, d, &fx.params[0]);
    let routed = oracle_expert(&x, t, d, d, &fx.params[1]);
    for i in 0..t * d {
        assert!((got[i] - (shared[i] + routed[i])).abs() < 1e-10);
    }
    assert_eq!(stats.expert_token_evals, t * 2);
}

#[test]
fn moe_zeroed_routed_experts_leave_shared_path() {
    let d = 4;
    let mut fx = MoeFixture::new(d, 1, 3, 2, 12);
    for e in &mut fx.params[1..] {
        e.w2 = Tensor::zeros(vec![d, d]);
        e.b2 = Tensor::zeros(vec![d]);
    }
    let mut r = rng(5);
    let t = 7;
    let x: Vec<f64> = (0..t * d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    let (got, _) = fx.run(&x, t);
    let shared = oracle_expert(&x, t, d, d, &fx.params[0]);
    for i in 0..t * d {
        assert!((got[i] - shared[i]).abs() < 1e-12);
    }
}

#[test]
fn moe_dense_equivalence_with_equal_gate_logits() {
    // K=N and a zero gate: every expert selected with weight 1/N, so the
    // routed path must equal the unweighted mean of all routed experts.
    let d = 6;
    let (m, n) = (2, 4);
    let mut fx = MoeFixture::new(d, m, n, n, 13);
    fx.gate_w = Tensor::zeros(vec![d, n]);
    let mut r = rng(6);
    let t = 50;
    let x: Vec<f64> = (0..t * d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    let (got, stats) = fx.run(&x, t);

    let mut expect = vec![0.0; t * d];
    for e in &fx.params[..m] {
        let y = oracle_expert(&x, t, d, d, e);
        for i in 0..t * d {
            expect[i] += y[i] / m as f64;
        }
    }
    for e in &fx.params[m..] {
        let y = oracle_expert(&x, t, d, d, e);
        for i in 0..t * d {
            expect[i] += y[i] / n as f64;
        }
    }
    for i in 0..t * d {
        assert!(
            (got[i] - expect[i]).abs() < 1e-10,
            "at {i}: {} vs {}",
            got[i],
            expect[i]
        );
    }
    assert_eq!(stats.expert_token_evals, t * (m + n));
}

#[test]
fn moe_evaluates_exactly_m_plus_k_experts_per_token() {
    let d = 8;
    let t = 50;
    for m in [1usize, 2] {
        for n in 1..=6usize {
            for k in 1..=n {
                let fx = MoeFixture::new(d, m, n, k, (m * 100 + n * 10 + k) as u64);
                let mut r = rng(99);
                let x: Vec<f64> =
                    (0..t * d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
                let (_, stats) = fx.run(&x, t);
                assert_eq!(
                    stats.expert_token_evals,
                    t * (m + k),
                    "M={m} N={n} K={k}"
                );
            }
        }
    }
}

#[test]
fn moe_gradients_reach_gate_and_selected_experts_only() {
    let d = 4;
    let fx = MoeFixture::new(d, 1, 3, 1, 21);
    let mut tape = Tape::new();
    // One token, so exactly one routed expert is selected.
    let x_data: Vec<f64> = vec![0.4, -0.2, 0.9, 0.1];
    let x = tape.constant(vec![1, d], x_data.clone()).unwrap();
    let (gate_v, shared, routed) = fx.bind(&mut tape);
    let mut stats = MoeStats::default();
    let out = moe_forward(&mut tape, x, gate_v, &shared, &routed, &fx.cfg, &mut stats).unwrap();
    let loss = tape.sum(out);
    tape.backward(loss).unwrap();

    let g = gate(&x_data, &fx.gate_w, 1).unwrap();
    let picked = g.topk_indices[0];
    assert!(tape.grad(gate_v).is_some(), "gate weights receive gradients");
    for (i, e) in routed.iter().enumerate() {
        let got = tape.grad(e.w1).is_some();
        assert_eq!(got, i == picked, "routed expert {i} (picked {picked})");
    }
    assert!(tape.grad(shared[0].w1).is_some());
}

#[test]
fn moe_routing_is_permutation_equivariant() {
    let d = 6;
    let n = 4;
    let fx = MoeFixture::new(d, 1, n, 2, 31);
    let mut r = rng(8);
    let t = 40;
    let x: Vec<f64> = (0..t * d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    let (base, _) = fx.run(&x, t);

    let perm = [2usize, 0, 3, 1];
    let mut permuted = MoeFixture::new(d, 1, n, 2, 31);
    for (j, &src) in perm.iter().enumerate() {
        permuted.params[1 + j] = fx.params[1 + src].clone();
    }
    let old = fx.gate_w.data();
    let mut new_gate = vec![0.0; d * n];
    for row in 0..d {
        for (j, &src) in perm.iter().enumerate() {
            new_gate[row * n + j] = old[row * n + src];
        }
    }
    permuted.gate_w = Tensor::from_vec(vec![d, n], new_gate).unwrap();
    let (got, _) = permuted.run(&x, t);
    for i in 0..t * d {
        assert!((base[i] - got[i]).abs() < 1e-10);
    }
}

// ── Attention and blocks ────────────────────────────────────────────────

fn toy_params(seed: u64) -> DecoderParams {
    DecoderParams::init(&DecoderConfig::toy(), &mut rng(seed)).unwrap()
}

#[test]
fn attention_single_token_is_value_path() {
    let params = toy_params(41);
    let d = params.config.d_model;
    let mut r = rng(9);
    let x_data: Vec<f64> = (0..d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(vec![1, d], x_data.clone()).unwrap();
    let out = attention(&mut tape, x, &bound_attn(&bound, 0), params.config.num_heads).unwrap();

    // With one token the attention weights are exactly 1, so the output is
    // (x Wv + bv) Wo + bo.
    let a = &params.blocks[0].attn;
    let mut v = oracle_matmul(&x_data, a.wv.data(), 1, d, d);
    for j in 0..d {
        v[j] += a.bv.data()[j];
    }
    let mut expect = oracle_matmul(&v, a.wo.data(), 1, d, d);
    for j in 0..d {
        expect[j] += a.bo.data()[j];
    }
    let got = tape.data(out);
    for j in 0..d {
        assert!((got[j] - expect[j]).abs() < 1e-12);
    }
}

/// Borrows the bound attention of block `i` (helper because the bound
/// block fields are internal).
fn bound_attn(bound: &BoundDecoder, i: usize) -> crate::model::forward::BoundAttention {
    bound.block_attn(i)
}

#[test]
fn attention_two_tokens_match_hand_mha_oracle() {
    let params = toy_params(42);
    let cfg = params.config;
    let d = cfg.d_model;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let mut r = rng(10);
    let x_data: Vec<f64> = (0..2 * d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(vec![2, d], x_data.clone()).unwrap();
    let out = attention(&mut tape, x, &bound_attn(&bound, 0), heads).unwrap();
    let got = tape.data(out).to_vec();

    // Hand-composed oracle with explicit per-head arithmetic.
    let a = &params.blocks[0].attn;
    let lin = |w: &Tensor, b: &Tensor| {
        let mut y = oracle_matmul(&x_data, w.data(), 2, d, d);
        for row in 0..2 {
            for j in 0..d {
                y[row * d + j] += b.data()[j];
            }
        }
        y
    };
    let k = oracle_matmul(&x_data, a.wk.data(), 2, d, d);
    let (q, v) = (lin(&a.wq, &a.bq), lin(&a.wv, &a.bv));
    let mut concat = vec![0.0; 2 * d];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..2 {
            // Scores of token i against both keys.
            let mut s = [0.0f64; 2];
            for j in 0..2 {
                let mut dot = 0.0;
                for c in cols.clone() {
                    dot += q[i * d + c] * k[j * d + c];
                }
                s[j] = dot / (dh as f64).sqrt();
            }
            let m = s[0].max(s[1]);
            let e = [(s[0] - m).exp(), (s[1] - m).exp()];
            let z = e[0] + e[1];
            let w = [e[0] / z, e[1] / z];
            for (ci, c) in cols.clone().enumerate() {
                concat[i * d + h * dh + ci] = w[0] * v[c] + w[1] * v[d + c];
            }
        }
    }
    let mut expect = oracle_matmul(&concat, a.wo.data(), 2, d, d);
    for row in 0..2 {
        for j in 0..d {
            expect[row * d + j] += a.bo.data()[j];
        }
    }
    for i in 0..2 * d {
        assert!(
            (got[i] - expect[i]).abs() < 1e-10,
            "at {i}: {} vs {}",
            got[i],
            expect[i]
        );
    }
}

#[test]
fn block_with_zeroed_output_projections_is_identity() {
    let mut params = toy_params(43);
    let d = params.config.d_model;
    let d_h = params.config.moe.d_h();
    params.blocks[0].attn.wo = Tensor::zeros(vec![d, d]).with_requires_grad(true);
    params.blocks[0].attn.bo = Tensor::zeros(vec![d]).with_requires_grad(true);
    if let FeedForwardParams::Moe { shared, routed, .. } = &mut params.blocks[0].ffn {
        for e in shared.iter_mut().chain(routed.iter_mut()) {
            e.w2 = Tensor::zeros(vec![d_h, d]).with_requires_grad(true);
            e.b2 = Tensor::zeros(vec![d]).with_requires_grad(true);
        }
    }

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let seq = 5;
    let mut r = rng(11);
    let x_data: Vec<f64> = (0..seq * d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    let x = tape.constant(vec![seq, d], x_data.clone()).unwrap();
    let mut stats = MoeStats::default();
    let out = bound
        .run_block(&mut tape, x, 0, false, &mut rng(0), &mut stats)
        .unwrap();
    assert_eq!(tape.data(out), x_data.as_slice());
}

// ── Projection, prompt, heads ───────────────────────────────────────────

#[test]
fn project_zero_features_gives_bias_tokens() {
    let mut params = toy_params(44);
    let cfg = params.config;
    let mut r = rng(12);
    params.proj_b = Tensor::randn(vec![cfg.d_model], 1.0, &mut r);
    let features = FeatureFile {
        header: FeatureHeader {
            dims: [cfg.feature_dim, cfg.grid, cfg.grid],
            dtype: "f32".into(),
            source: "test".into(),
        },
        data: vec![0.0; cfg.feature_dim * cfg.seq_len()],
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = project_features(&mut tape, &bound, &features).unwrap();
    let data = tape.data(out);
    for t in 0..cfg.seq_len() {
        for j in 0..cfg.d_model {
            assert_eq!(data[t * cfg.d_model + j], params.proj_b.data()[j]);
        }
    }
}

#[test]
fn project_identity_weights_pass_features_through() {
    let mut cfg = DecoderConfig::toy();
    cfg.feature_dim = cfg.d_model;
    let mut params = DecoderParams::zeros(&cfg).unwrap();
    let d = cfg.d_model;
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    params.proj_w = Tensor::from_vec(vec![d, d], eye).unwrap().with_requires_grad(true);
    let features = random_features(&cfg, 21);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = project_features(&mut tape, &bound, &features).unwrap();
    let data = tape.data(out);
    let seq = cfg.seq_len();
    for t in 0..seq {
        for ch in 0..d {
            assert_eq!(data[t * d + ch], features.data[ch * seq + t]);
        }
    }
}

#[test]
fn project_matches_per_position_oracle() {
    let params = toy_params(45);
    let cfg = params.config;
    let features = random_features(&cfg, 22);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = project_features(&mut tape, &bound, &features).unwrap();
    let data = tape.data(out);

    let seq = cfg.seq_len();
    let (c, d) = (cfg.feature_dim, cfg.d_model);
    let mut r = rng(13);
    for _ in 0..10 {
        let t = rand::Rng::random_range(&mut r, 0..seq);
        for j in 0..d {
            let mut expect = params.proj_b.data()[j];
            for ch in 0..c {
                expect += features.data[ch * seq + t] * params.proj_w.data()[ch * d + j];
            }
            assert!((data[t * d + j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn project_rejects_mismatched_features() {
    let params = toy_params(46);
    let mut features = random_features(&params.config, 23);
    features.header.dims[0] += 1;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    assert!(project_features(&mut tape, &bound, &features).is_err());
}

#[test]
fn bbox_mask_full_frame_and_quadrant() {
    let full = BBox {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };
    let (mask, snapped) = rasterize_bbox_mask(&full, 32).unwrap();
    assert!(!snapped);
    assert!(mask.iter().all(|&v| v == 1.0));

    let quadrant = BBox {
        x: 0.0,
        y: 0.0,
        w: 0.5,
        h: 0.5,
    };
    let (mask, snapped) = rasterize_bbox_mask(&quadrant, 32).unwrap();
    assert!(!snapped);
    let count: f64 = mask.iter().sum();
    assert_eq!(count, 256.0, "exactly the 16x16 top-left cells");
    for r in 0..32 {
        for c in 0..32 {
            let expect = if r < 16 && c < 16 { 1.0 } else { 0.0 };
            assert_eq!(mask[r * 32 + c], expect, "cell ({r},{c})");
        }
    }
}

#[test]
fn bbox_mask_snaps_degenerate_to_single_cell() {
    // Narrower than a cell and positioned between cell centers on a 4x4
    // grid: centers are at 0.125, 0.375, 0.625, 0.875.
    let tiny = BBox {
        x: 0.19,
        y: 0.19,
        w: 0.02,
        h: 0.02,
    };
    let (mask, snapped) = rasterize_bbox_mask(&tiny, 4).unwrap();
    assert!(snapped);
    assert_eq!(mask.iter().filter(|&&v| v == 1.0).count(), 1);
    // Center (0.2, 0.2) is nearest to the cell with center 0.125 (index 0).
    assert_eq!(mask[0], 1.0);
}

#[test]
fn prompt_shifts_only_masked_tokens() {
    let params = toy_params(47);
    let cfg = params.config;
    let d = cfg.d_model;
    let seq = cfg.seq_len();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut r = rng(14);
    let tokens_data: Vec<f64> = (0..seq * d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    let tokens = tape.constant(vec![seq, d], tokens_data.clone()).unwrap();
    let bbox = BBox {
        x: 0.0,
        y: 0.0,
        w: 0.5,
        h: 0.5,
    };
    let out = embed_head_prompt(&mut tape, &bound, tokens, &bbox).unwrap();
    let data = tape.data(out);
    let (mask, _) = rasterize_bbox_mask(&bbox, cfg.grid).unwrap();
    for t in 0..seq {
        for j in 0..d {
            let expect = tokens_data[t * d + j] + mask[t] * params.prompt.data()[j];
            assert_eq!(data[t * d + j], expect);
        }
    }
}

#[test]
fn heatmap_head_zero_weights_give_half_everywhere() {
    let cfg = DecoderConfig::toy();
    let params = DecoderParams::zeros(&cfg).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let tokens = tape
        .constant(vec![cfg.seq_len(), cfg.d_model], vec![0.3; cfg.seq_len() * cfg.d_model])
        .unwrap();
    let hm = heatmap_head(&mut tape, &bound, tokens).unwrap();
    for &v in tape.data(hm) {
        assert_eq!(v, 0.5);
    }
    let io = inout_head(&mut tape, &bound, tokens).unwrap();
    assert_eq!(tape.data(io)[0], 0.5);
}

#[test]
fn heatmap_head_spike_upsamples_to_matching_cell() {
    let cfg = DecoderConfig::toy();
    let mut params = DecoderParams::zeros(&cfg).unwrap();
    // Read out channel 0 directly.
    let mut w = vec![0.0; cfg.d_model];
    w[0] = 1.0;
    params.heatmap_w = Tensor::from_vec(vec![cfg.d_model, 1], w).unwrap().with_requires_grad(true);

    let (spike_r, spike_c) = (1usize, 2usize);
    let mut tokens_data = vec![0.0; cfg.seq_len() * cfg.d_model];
    tokens_data[(spike_r * cfg.grid + spike_c) * cfg.d_model] = 5.0;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let tokens = tape
        .constant(vec![cfg.seq_len(), cfg.d_model], tokens_data)
        .unwrap();
    let hm = heatmap_head(&mut tape, &bound, tokens).unwrap();
    let data = tape.data(hm);
    let h = cfg.heatmap_size;
    // Factor-2 upsample: the spike at grid cell (r, c) spreads its peak over
    // the 2x2 output block at rows 2r..=2r+1, cols 2c..=2c+1 (a plateau of
    // four equal values), and everything outside the block is smaller.
    let peak = data[(2 * spike_r) * h + 2 * spike_c];
    for r in 0..h {
        for c in 0..h {
            let v = data[r * h + c];
            let in_block = (r / 2, c / 2) == (spike_r, spike_c);
            if in_block {
                assert_eq!(v, peak, "plateau at ({r},{c})");
            } else {
                assert!(v < peak, "({r},{c}) should sit below the plateau");
            }
        }
    }
}

#[test]
fn inout_head_matches_pool_linear_oracle() {
    let params = toy_params(48);
    let cfg = params.config;
    let mut r = rng(15);
    let tokens_data: Vec<f64> = (0..cfg.seq_len() * cfg.d_model)
        .map(|_| rand::Rng::random_range(&mut r, -1.0..1.0))
        .collect();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let tokens = tape
        .constant(vec![cfg.seq_len(), cfg.d_model], tokens_data.clone())
        .unwrap();
    let io = inout_head(&mut tape, &bound, tokens).unwrap();

    let mut logit = params.inout_b.data()[0];
    for j in 0..cfg.d_model {
        let mean: f64 = (0..cfg.seq_len())
            .map(|t| tokens_data[t * cfg.d_model + j])
            .sum::<f64>()
            / cfg.seq_len() as f64;
        logit += mean * params.inout_w.data()[j];
    }
    let expect = 1.0 / (1.0 + (-logit).exp());
    assert!((tape.data(io)[0] - expect).abs() < 1e-12);
}

// ── Full forward ────────────────────────────────────────────────────────

#[test]
fn eval_forward_is_deterministic() {
    let params = toy_params(49);
    let features = random_features(&params.config, 31);
    let bbox = center_bbox();
    let a = params.forward(&features, &bbox).unwrap();
    let b = params.forward(&features, &bbox).unwrap();
    assert_eq!(a.heatmap, b.heatmap);
    assert_eq!(a.in_frame_prob, b.in_frame_prob);
    assert!(a.heatmap.iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(a.in_frame_prob > 0.0 && a.in_frame_prob < 1.0);
}

#[test]
fn zero_model_predicts_half_everywhere() {
    let params = DecoderParams::zeros(&DecoderConfig::toy()).unwrap();
    let features = random_features(&params.config, 32);
    let pred = params.forward(&features, &center_bbox()).unwrap();
    assert!(pred.heatmap.iter().all(|&v| v == 0.5));
    assert_eq!(pred.in_frame_prob, 0.5);
}

#[test]
fn forward_matches_stage_by_stage_replay() {
    let params = toy_params(50);
    let cfg = params.config;
    let features = random_features(&cfg, 33);
    let bbox = center_bbox();

    let pred = params.forward(&features, &bbox).unwrap();

    // Replay the documented pipeline with the public stage functions.
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let tokens = project_features(&mut tape, &bound, &features).unwrap();
    let pos = bound.pos_embed_var();
    let tokens = tape.add(tokens, pos).unwrap();
    let mut tokens = embed_head_prompt(&mut tape, &bound, tokens, &bbox).unwrap();
    let mut stats = MoeStats::default();
    for i in 0..cfg.num_blocks {
        tokens = bound
            .run_block(&mut tape, tokens, i, false, &mut rng(0), &mut stats)
            .unwrap();
    }
    let (g, b) = bound.final_ln_vars();
    let tokens = tape.layer_norm(tokens, g, b).unwrap();
    let hm = heatmap_head(&mut tape, &bound, tokens).unwrap();
    let io = inout_head(&mut tape, &bound, tokens).unwrap();

    assert_eq!(tape.data(hm), pred.heatmap.as_slice());
    assert_eq!(tape.data(io)[0], pred.in_frame_prob);
}

#[test]
fn training_mode_dropout_changes_outputs() {
    let mut cfg = DecoderConfig::toy();
    cfg.dropout = 0.5;
    let params = DecoderParams::init(&cfg, &mut rng(51)).unwrap();
    let features = random_features(&cfg, 34);
    let bbox = center_bbox();

    let run = |training: bool, seed: u64| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut stats = MoeStats::default();
        let mut r = rng(seed);
        let out = forward_on_tape(&mut tape, &bound, &features, &bbox, training, &mut r, &mut stats)
            .unwrap();
        tape.data(out.heatmap).to_vec()
    };
    let eval = run(false, 0);
    let train_a = run(true, 1);
    let train_b = run(true, 1);
    assert_ne!(eval, train_a, "dropout must be active in training");
    assert_eq!(train_a, train_b, "same rng seed gives the same masks");
}

#[test]
fn bound_ordering_matches_visit() {
    let params = toy_params(52);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let bound_names: Vec<&str> = bound.ordered_vars().iter().map(|(n, _)| n.as_str()).collect();
    let mut visit_names = Vec::new();
    params.visit(|n, _| visit_names.push(n));
    assert_eq!(bound_names, visit_names);
}

#[test]
fn from_vars_reproduces_bind() {
    for ffn_only in [false, true] {
        let mut cfg = DecoderConfig::toy();
        cfg.ffn_only = ffn_only;
        let params = DecoderParams::init(&cfg, &mut rng(61)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let vars: Vec<Var> = bound.ordered_vars().iter().map(|&(_, v)| v).collect();
        let rebuilt = BoundDecoder::from_vars(&cfg, &vars).unwrap();
        assert_eq!(bound.ordered_vars().len(), rebuilt.ordered_vars().len());
        for (a, b) in bound.ordered_vars().iter().zip(rebuilt.ordered_vars()) {
            assert_eq!(a, b);
        }

        let features = random_features(&cfg, 62);
        let bbox = center_bbox();
        let mut stats = MoeStats::default();
        let out_a = forward_on_tape(
            &mut tape, &bound, &features, &bbox, false, &mut rng(0), &mut stats,
        )
        .unwrap();
        let out_b = forward_on_tape(
            &mut tape, &rebuilt, &features, &bbox, false, &mut rng(0), &mut stats,
        )
        .unwrap();
        assert_eq!(tape.data(out_a.heatmap), tape.data(out_b.heatmap));
        assert_eq!(tape.data(out_a.in_prob), tape.data(out_b.in_prob));

        assert!(BoundDecoder::from_vars(&cfg, &vars[..vars.len() - 1]).is_err());
        let mut extra = vars.clone();
        extra.push(*extra.last().unwrap());
        assert!(BoundDecoder::from_vars(&cfg, &extra).is_err());
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.gmoe");
    let params = toy_params(53);
    let ckpt = params.to_checkpoint(1234);
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.meta.step, 1234);
    assert_eq!(loaded.meta.config, params.config);

    let restored = DecoderParams::from_checkpoint(&loaded).unwrap();
    let a = params.named();
    let b = restored.named();
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "{na}");
        assert!(tb.requires_grad);
    }

    // Saving the restored model reproduces the same bytes.
    let first = std::fs::read(&path).unwrap();
    save_checkpoint(&path, &restored.to_checkpoint(1234)).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn checkpoint_detects_missing_and_misshapen_tensors() {
    let params = toy_params(54);
    let mut ckpt = params.to_checkpoint(0);
    let removed = ckpt.tensors.remove(3);
    let err = DecoderParams::from_checkpoint(&ckpt).unwrap_err().to_string();
    assert!(err.contains(&removed.0), "{err}");

    let mut ckpt = params.to_checkpoint(0);
    ckpt.tensors[0].1 = Tensor::zeros(vec![2, 2]);
    assert!(DecoderParams::from_checkpoint(&ckpt).is_err());
}

#[test]
fn checkpoint_rejects_foreign_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.gmoe");
    std::fs::write(&path, b"GARBAGE").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn checkpoint_keeps_extra_optimizer_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.gmoe");
    let params = toy_params(55);
    let mut ckpt = params.to_checkpoint(7);
    ckpt.tensors.push((
        "adam.m.proj.w".to_string(),
        Tensor::zeros(params.proj_w.shape().to_vec()),
    ));
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert!(loaded.tensors.iter().any(|(n, _)| n == "adam.m.proj.w"));
    // Model restore ignores the extra tensor.
    assert!(DecoderParams::from_checkpoint(&loaded).is_ok());
}
