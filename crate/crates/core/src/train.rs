//! Adam with bias correction, cosine learning-rate decay, a two-group
//! optimizer (in/out head vs everything else), the seeded training loop,
//! and the small-sample overfit probe used as a training smoke test.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_record, AugConfig};
use crate::data::{
    gaussian_target, synthetic_dataset, synthetic_encoder, AnnotationRecord, SyntheticConfig,
    DEFAULT_TARGET_SIGMA,
};
use crate::data::BBox;
use crate::data::FeatureFile;
use crate::losses::{total_loss_on_tape, LossConfig};
use crate::metrics::argmax_point;
use crate::model::{
    forward_on_tape, load_checkpoint, save_checkpoint, BoundDecoder, Checkpoint, DecoderParams,
    MoeStats,
};
use crate::tensor::{finite_difference_check, GradCheckReport, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for every parameter outside the in/out head.
    pub lr_main: f64,
    pub lr_inout_head: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub aug: AugConfig,
}

impl Default for TrainConfig {
    /// Fine-tune settings: a fast in/out head on top of a slow backbone.
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 36,
            lr_main: 1e-5,
            lr_inout_head: 1e-3,
            lr_min: 0.0,
            betas: [0.9, 0.999],
            eps: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            aug: AugConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Pre-training settings: one shared rate, no in/out term.
    pub fn pretrain() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 60,
            lr_main: 1e-3,
            lr_inout_head: 1e-3,
            loss: LossConfig {
                lambda: 0.0,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    /// Settings for the overfit probe: constant learning rate, full-batch
    /// friendly, augmentation off so memorization is actually possible.
    pub fn probe() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            lr_main: 1e-3,
            lr_inout_head: 1e-3,
            lr_min: 1e-3,
            aug: AugConfig::off(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        for (name, lr) in [
            ("lr_main", self.lr_main),
            ("lr_inout_head", self.lr_inout_head),
            ("lr_min", self.lr_min),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::config(format!("{name} must be >= 0, got {lr}")));
            }
        }
        for b in self.betas {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("betas must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be > 0, got {}", self.eps)));
        }
        self.loss.validate()?;
        self.aug.validate()
    }
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// Adam moment estimates, one pair per parameter in model visit order,
/// plus the shared update counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

impl AdamState {
    pub fn for_model(params: &DecoderParams) -> Self {
        let mut m = Vec::new();
        params.visit(|_, t| m.push(vec![0.0; t.data().len()]));
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update for a single tensor. `step` is the
/// 1-based count of updates including this one; the caller advances it once
/// per optimizer step, not per tensor.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    name: &str,
    param: &mut Tensor,
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    lr: f64,
    betas: [f64; 2],
    eps: f64,
) -> Result<()> {
    let n = param.data().len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![n],
            rhs: vec![grad.len(), m.len(), v.len()],
        });
    }
    if step == 0 {
        return Err(Error::config("adam step count is 1-based"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("non-finite gradient for {name}")));
    }
    let [b1, b2] = betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let data = param.data_mut();
    for i in 0..n {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("cosine schedule needs total_steps >= 1"));
    }
    if step > total_steps {
        return Err(Error::config(format!(
            "schedule step {step} beyond total {total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos()))
}

// ── Training loop ───────────────────────────────────────────────────────

/// One line of the training log, emitted per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub epoch: usize,
    pub step: usize,
    pub lr_main: f64,
    pub lr_head: f64,
    pub loss_total: f64,
    pub loss_heatmap: f64,
    pub loss_focal: f64,
}

/// splitmix64; mixes seeds for per-epoch shuffles and per-sample
/// augmentation streams.
fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn check_param_groups(params: &DecoderParams) -> Result<(usize, usize)> {
    let mut head = 0;
    let mut main = 0;
    params.visit(|name, _| {
        if DecoderParams::is_inout_head_param(&name) {
            head += 1;
        } else {
            main += 1;
        }
    });
    if head == 0 || main == 0 {
        return Err(Error::config(format!(
            "parameter groups must both be non-empty, got {head} head and {main} main tensors"
        )));
    }
    Ok((head, main))
}

/// Runs one sample through the model on a fresh tape, backpropagates the
/// combined loss, and adds the parameter gradients into `grad_acc` (visit
/// order) scaled by `weight`. Returns (total, heatmap, focal).
fn accumulate_sample_grads<R: rand::Rng>(
    params: &DecoderParams,
    record: &AnnotationRecord,
    encoder: &SyntheticConfig,
    cfg: &TrainConfig,
    dropout_rng: &mut R,
    grad_acc: &mut [Vec<f64>],
    weight: f64,
) -> Result<(f64, f64, f64)> {
    let features = synthetic_encoder(record, encoder)?;
    let size = params.config.heatmap_size;
    // Out-of-frame samples train the heatmap toward all zeros.
    let target = match record.gaze_point {
        Some([gx, gy]) => gaussian_target((gx, gy), size, DEFAULT_TARGET_SIGMA)?,
        None => vec![0.0; size * size],
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut stats = MoeStats::default();
    let out = forward_on_tape(
        &mut tape,
        &bound,
        &features,
        &record.bbox,
        true,
        dropout_rng,
        &mut stats,
    )?;
    let terms = total_loss_on_tape(
        &mut tape,
        out.heatmap,
        out.in_prob,
        &target,
        record.in_frame,
        &cfg.loss,
    )?;
    tape.backward(terms.total)?;

    for ((_, var), acc) in bound.ordered_vars().iter().zip(grad_acc.iter_mut()) {
        // Unselected routed experts have no gradient this sample.
        if let Some(g) = tape.grad(*var) {
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += weight * gi;
            }
        }
    }
    Ok((
        tape.data(terms.total)[0],
        tape.data(terms.heatmap)[0],
        tape.data(terms.focal)[0],
    ))
}

fn apply_adam(
    params: &mut DecoderParams,
    state: &mut AdamState,
    grads: &[Vec<f64>],
    lr_main: f64,
    lr_head: f64,
    betas: [f64; 2],
    eps: f64,
) -> Result<()> {
    state.step += 1;
    let mut idx = 0;
    let mut result = Ok(());
    let (step, m_all, v_all) = (state.step, &mut state.m, &mut state.v);
    params.visit_mut(|name, tensor| {
        if result.is_err() {
            return;
        }
        let lr = if DecoderParams::is_inout_head_param(&name) {
            lr_head
        } else {
            lr_main
        };
        result = adam_step(
            &name,
            tensor,
            &grads[idx],
            &mut m_all[idx],
            &mut v_all[idx],
            step,
            lr,
            betas,
            eps,
        );
        idx += 1;
    });
    result
}

/// Seeded mini-batch training over synthetic-encoder samples. Records are
/// re-augmented every epoch with per-sample derived seeds, features are
/// recomputed from the augmented annotations, and the two parameter groups
/// follow separate cosine schedules. Deterministic end to end for a fixed
/// config on one thread.
pub fn train_loop(
    params: &mut DecoderParams,
    records: &[AnnotationRecord],
    encoder: &SyntheticConfig,
    cfg: &TrainConfig,
    state: &mut AdamState,
) -> Result<Vec<LossLogEntry>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    check_param_groups(params)?;

    let n = records.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x1));
    let mut log = Vec::with_capacity(total_steps);
    let sizes: Vec<usize> = {
        let mut s = Vec::new();
        params.visit(|_, t| s.push(t.data().len()));
        s
    };

    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ mix_seed(epoch as u64)));
        order.shuffle(&mut shuffle_rng);

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
            let weight = 1.0 / batch.len() as f64;
            let (mut t_sum, mut h_sum, mut f_sum) = (0.0, 0.0, 0.0);
            for &sample_idx in batch {
                let aug_seed = mix_seed(
                    cfg.aug.rng_seed ^ mix_seed(epoch as u64) ^ mix_seed(sample_idx as u64),
                );
                let mut aug_rng = ChaCha8Rng::seed_from_u64(aug_seed);
                let record = augment_record(&records[sample_idx], &cfg.aug, &mut aug_rng)?;
                let (t, h, f) = accumulate_sample_grads(
                    params,
                    &record,
                    encoder,
                    cfg,
                    &mut dropout_rng,
                    &mut grads,
                    weight,
                )
                .map_err(|e| {
                    Error::numeric(format!("epoch {epoch} batch {batch_idx}: {e}"))
                })?;
                t_sum += t * weight;
                h_sum += h * weight;
                f_sum += f * weight;
            }
            if !t_sum.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {t_sum} at epoch {epoch} batch {batch_idx}"
                )));
            }

            let lr_main = cosine_lr(global_step, total_steps, cfg.lr_main, cfg.lr_min)?;
            let lr_head = cosine_lr(global_step, total_steps, cfg.lr_inout_head, cfg.lr_min)?;
            apply_adam(params, state, &grads, lr_main, lr_head, cfg.betas, cfg.eps)?;
            global_step += 1;

            log.push(LossLogEntry {
                epoch,
                step: global_step,
                lr_main,
                lr_head,
                loss_total: t_sum,
                loss_heatmap: h_sum,
                loss_focal: f_sum,
            });
        }
    }
    Ok(log)
}

// ── Checkpointing with optimizer state ──────────────────────────────────

/// Writes model weights plus Adam moments (`adam.m.*` / `adam.v.*`
/// tensors) so training can resume exactly.
pub fn save_training_state(
    path: &Path,
    params: &DecoderParams,
    state: &AdamState,
) -> Result<()> {
    let mut ckpt = params.to_checkpoint(state.step as u64);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (i, name) in names.iter().enumerate() {
        let shape = vec![state.m[i].len()];
        ckpt.tensors.push((
            format!("adam.m.{name}"),
            Tensor::from_vec(shape.clone(), state.m[i].clone())?,
        ));
        ckpt.tensors.push((
            format!("adam.v.{name}"),
            Tensor::from_vec(shape, state.v[i].clone())?,
        ));
    }
    save_checkpoint(path, &ckpt)
}

/// Restores weights and, when present, the Adam moments. A checkpoint
/// without optimizer tensors yields a fresh zeroed state.
pub fn load_training_state(path: &Path) -> Result<(DecoderParams, AdamState)> {
    let ckpt = load_checkpoint(path)?;
    let params = DecoderParams::from_checkpoint(&ckpt)?;
    let mut state = AdamState::for_model(&params);
    state.step = ckpt.meta.step as usize;
    let find = |ckpt: &Checkpoint, name: &str| -> Option<Vec<f64>> {
        ckpt.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.data().to_vec())
    };
    for (i, (name, _)) in params.named().iter().enumerate() {
        if let Some(m) = find(&ckpt, &format!("adam.m.{name}")) {
            if m.len() != state.m[i].len() {
                return Err(Error::format(format!(
                    "optimizer tensor adam.m.{name} has {} values, expected {}",
                    m.len(),
                    state.m[i].len()
                )));
            }
            state.m[i] = m;
        }
        if let Some(v) = find(&ckpt, &format!("adam.v.{name}")) {
            if v.len() != state.v[i].len() {
                return Err(Error::format(format!(
                    "optimizer tensor adam.v.{name} has {} values, expected {}",
                    v.len(),
                    state.v[i].len()
                )));
            }
            state.v[i] = v;
        }
    }
    Ok((params, state))
}

/// Finite-difference check of the combined loss against every decoder
/// parameter. The forward pass runs in eval mode so repeated probe
/// evaluations build an identical graph.
pub fn decoder_gradcheck(
    params: &DecoderParams,
    features: &FeatureFile,
    bbox: &BBox,
    target: &[f64],
    in_frame: bool,
    loss: &LossConfig,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let cfg = params.config;
    let named: Vec<(String, Tensor)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    finite_difference_check(&named, epsilon, move |tape, vars| {
        let bound = BoundDecoder::from_vars(&cfg, vars)?;
        let mut stats = MoeStats::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward_on_tape(tape, &bound, features, bbox, false, &mut rng, &mut stats)?;
        let terms = total_loss_on_tape(tape, out.heatmap, out.in_prob, target, in_frame, loss)?;
        Ok(terms.total)
    })
}

// ── Overfit probe ───────────────────────────────────────────────────────

/// Outcome of memorizing a handful of synthetic samples.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub final_loss: f64,
    pub steps_run: usize,
    pub converged: bool,
    /// Worst per-axis distance, in heatmap cells, between each predicted
    /// argmax and its target cell.
    pub max_cell_error: usize,
    pub inout_correct: usize,
    pub n_samples: usize,
    pub trajectory: Vec<f64>,
}

/// Trains on `k` balanced synthetic samples until the full-batch loss
/// drops under `threshold` or `max_steps` passes. Divergence (loss growing
/// past 10x its initial value) is an error describing the failure.
pub fn overfit_probe(
    params: &mut DecoderParams,
    k: usize,
    max_steps: usize,
    threshold: f64,
    cfg: &TrainConfig,
    encoder: &SyntheticConfig,
) -> Result<ProbeReport> {
    if k == 0 || k > 16 {
        return Err(Error::config(format!(
            "probe size {k} outside 1..=16"
        )));
    }
    cfg.validate()?;
    check_param_groups(params)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x2));
    let samples = synthetic_dataset(k, 0.5, encoder, &mut data_rng)?;
    let records: Vec<AnnotationRecord> = samples.into_iter().map(|(r, _)| r).collect();

    let sizes: Vec<usize> = {
        let mut s = Vec::new();
        params.visit(|_, t| s.push(t.data().len()));
        s
    };
    let mut state = AdamState::for_model(params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x3));
    let mut trajectory = Vec::new();
    let mut initial = f64::NAN;
    let mut converged = false;

    for step in 0..max_steps {
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let weight = 1.0 / k as f64;
        let mut loss = 0.0;
        for (i, base) in records.iter().enumerate() {
            let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(
                cfg.aug.rng_seed ^ mix_seed(step as u64) ^ mix_seed(i as u64),
            ));
            let record = augment_record(base, &cfg.aug, &mut aug_rng)?;
            let (t, _, _) = accumulate_sample_grads(
                params,
                &record,
                encoder,
                cfg,
                &mut dropout_rng,
                &mut grads,
                weight,
            )?;
            loss += t * weight;
        }
        trajectory.push(loss);
        if step == 0 {
            initial = loss;
        }
        if !loss.is_finite() || loss > 10.0 * initial.max(1e-3) {
            return Err(Error::numeric(format!(
                "probe diverged at step {step}: loss {loss} from initial {initial}"
            )));
        }
        // Constant rate when lr_min == lr_max, else cosine over max_steps.
        let lr_main = cosine_lr(step, max_steps, cfg.lr_main, cfg.lr_min)?;
        let lr_head = cosine_lr(step, max_steps, cfg.lr_inout_head, cfg.lr_min)?;
        apply_adam(params, &mut state, &grads, lr_main, lr_head, cfg.betas, cfg.eps)?;
        if loss < threshold {
            converged = true;
            break;
        }
    }

    // Memorization check against the un-augmented records.
    let size = params.config.heatmap_size;
    let mut max_cell_error = 0usize;
    let mut inout_correct = 0usize;
    for record in &records {
        let features = synthetic_encoder(record, encoder)?;
        let pred = params.forward(&features, &record.bbox)?;
        if (pred.in_frame_prob > 0.5) == record.in_frame {
            inout_correct += 1;
        }
        if let Some([gx, gy]) = record.gaze_point {
            let (px, py) = argmax_point(&pred.heatmap, size)?;
            let cell = |v: f64| ((v * size as f64 - 0.5).round().max(0.0) as usize).min(size - 1);
            let err = cell(px).abs_diff(cell(gx)).max(cell(py).abs_diff(cell(gy)));
            max_cell_error = max_cell_error.max(err);
        }
    }

    Ok(ProbeReport {
        final_loss: *trajectory.last().expect("max_steps >= 1"),
        steps_run: trajectory.len(),
        converged,
        max_cell_error,
        inout_correct,
        n_samples: k,
        trajectory,
    })
}
