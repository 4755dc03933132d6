//! Subcommand implementations. Each one takes the merged run configuration
//! plus any command-specific arguments and returns a library result; exit
//! codes are mapped in `main`.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use gazemoe::data::{
    gaussian_target, load_annotations, load_features, synthetic_dataset, synthetic_encoder,
    AnnotationRecord, BBox, FeatureFile,
};
use gazemoe::metrics::{argmax_point, evaluate, MetricsReport};
use gazemoe::model::{forward_on_tape, DecoderConfig, DecoderParams, MoEConfig, MoeStats};
use gazemoe::tensor::Tape;
use gazemoe::train::{
    decoder_gradcheck, load_training_state, save_training_state, train_loop, AdamState,
};
use gazemoe::{Error, Result};

use crate::config::RunConfig;

/// Loads the dataset named by the configuration: annotation records with
/// their features, or a seeded synthetic set when no annotations are given.
fn load_dataset(cfg: &RunConfig) -> Result<Vec<(AnnotationRecord, FeatureFile)>> {
    match &cfg.data.annotations {
        Some(path) => {
            let records = load_annotations(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let encoder = cfg.encoder();
            records
                .into_iter()
                .map(|rec| {
                    let features = match &rec.feature_path {
                        Some(rel) => {
                            let p = PathBuf::from(rel);
                            let p = if p.is_absolute() { p } else { base.join(p) };
                            load_features(&p)?
                        }
                        None => synthetic_encoder(&rec, &encoder)?,
                    };
                    Ok((rec, features))
                })
                .collect()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            synthetic_dataset(
                cfg.data.n_synthetic,
                cfg.data.class_balance,
                &cfg.encoder(),
                &mut rng,
            )
        }
    }
}

/// Trains a model and writes `checkpoint.gmoe` plus `loss_log.jsonl` under
/// the output directory. A starting checkpoint resumes the step counter.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let samples = load_dataset(cfg)?;
    let records: Vec<AnnotationRecord> = samples.into_iter().map(|(r, _)| r).collect();

    let (mut params, mut state) = match resume {
        Some(path) => {
            let (params, state) = load_training_state(path)?;
            if params.config != cfg.model {
                return Err(Error::config(format!(
                    "checkpoint model {:?} does not match configured model {:?}",
                    params.config, cfg.model
                )));
            }
            log::info!("resuming from {} at step {}", path.display(), state.step);
            (params, state)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let params = DecoderParams::init(&cfg.model, &mut rng)?;
            let state = AdamState::for_model(&params);
            (params, state)
        }
    };

    let log = train_loop(&mut params, &records, &cfg.encoder(), &cfg.train, &mut state)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt_path = cfg.out_dir.join("checkpoint.gmoe");
    save_training_state(&ckpt_path, &params, &state)?;

    let mut log_file = File::create(cfg.out_dir.join("loss_log.jsonl"))?;
    for entry in &log {
        serde_json::to_writer(&mut log_file, entry)?;
        log_file.write_all(b"\n")?;
    }

    if let Some(last) = log.last() {
        log::info!(
            "trained {} steps, final loss {:.6}",
            state.step,
            last.loss_total
        );
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

/// Runs evaluation and prints the metrics report as one JSON line on
/// stdout. Disabled metrics are reported as null.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let (params, _) = load_training_state(checkpoint)?;
    let samples = load_dataset(cfg)?;
    let mut report = evaluate(
        &params,
        &samples,
        cfg.data.target_sigma,
        cfg.metrics.workers,
    )?;
    if !cfg.metrics.auc {
        report.auc = None;
    }
    if !cfg.metrics.mean_l2 {
        report.mean_l2 = None;
    }
    if !cfg.metrics.ap_inout {
        report.ap_inout = None;
    }
    if !cfg.metrics.spherical {
        report.spherical_dist = None;
    }
    print_report(&report)
}

fn print_report(report: &MetricsReport) -> Result<()> {
    println!("{}", serde_json::to_string(report)?);
    Ok(())
}

#[derive(Serialize)]
struct InferOutput {
    in_frame_prob: f64,
    /// Peak of the heatmap as a normalized `[x, y]` point.
    argmax: [f64; 2],
}

/// Runs one sample through a checkpoint and writes `heatmap.pgm` plus
/// `prediction.json` under the output directory.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, features: &Path, bbox: &str) -> Result<()> {
    let (params, _) = load_training_state(checkpoint)?;
    let features = load_features(features)?;
    let bbox = parse_bbox(bbox)?;
    let pred = params.forward(&features, &bbox)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let pgm_path = cfg.out_dir.join("heatmap.pgm");
    write_pgm(&pgm_path, &pred.heatmap, pred.heatmap_size)?;

    let (ax, ay) = argmax_point(&pred.heatmap, pred.heatmap_size)?;
    let out = InferOutput {
        in_frame_prob: pred.in_frame_prob,
        argmax: [ax, ay],
    };
    let json_path = cfg.out_dir.join("prediction.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&out)? + "\n")?;

    println!(
        "wrote {} and {}",
        pgm_path.display(),
        json_path.display()
    );
    Ok(())
}

fn parse_bbox(text: &str) -> Result<BBox> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::config(format!(
            "bbox must be x,y,w,h with four fields, got {text:?}"
        )));
    }
    let mut vals = [0.0; 4];
    for (v, part) in vals.iter_mut().zip(&parts) {
        *v = part
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::config(format!("bad bbox field {part:?}: {e}")))?;
    }
    Ok(BBox {
        x: vals[0],
        y: vals[1],
        w: vals[2],
        h: vals[3],
    })
}

/// Binary PGM with one byte per cell, rows top to bottom. Probabilities map
/// linearly onto 0..=255.
fn write_pgm(path: &Path, heatmap: &[f64], size: usize) -> Result<()> {
    let mut bytes = format!("P5\n{size} {size}\n255\n").into_bytes();
    for &p in heatmap {
        bytes.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Compares tape gradients of the full training loss against central
/// differences on a small model, printing one line per parameter. Fails
/// when the worst relative error reaches the tolerance.
pub fn cmd_gradcheck(cfg: Option<&RunConfig>, tolerance: f64) -> Result<()> {
    // Without an explicit config, check a small model; the default-sized
    // model has millions of parameters and two passes per element.
    let model = match cfg {
        Some(c) => c.model,
        None => DecoderConfig::toy(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let params = DecoderParams::init(&model, &mut rng)?;

    // A fixed in-frame sample with moderate feature noise keeps every
    // gradient group away from the finite-difference noise floor.
    let encoder = gazemoe::data::SyntheticConfig {
        feature_dim: model.feature_dim,
        grid: model.grid,
        noise_std: 0.5,
        seed: 20,
    };
    let mut data_rng = ChaCha8Rng::seed_from_u64(22);
    let samples = synthetic_dataset(8, 0.5, &encoder, &mut data_rng)?;
    let (record, features) = samples
        .iter()
        .find(|(r, _)| r.in_frame)
        .expect("balanced dataset has an in-frame sample");

    let gaze = record.gaze_point.expect("in-frame record has a gaze point");
    let target = gaussian_target(
        (gaze[0], gaze[1]),
        model.heatmap_size,
        gazemoe::data::DEFAULT_TARGET_SIGMA,
    )?;
    let loss = gazemoe::losses::LossConfig::default();
    let report = decoder_gradcheck(
        &params,
        features,
        &record.bbox,
        &target,
        true,
        &loss,
        1e-5,
    )?;

    for (name, err) in &report.per_parameter_errors {
        println!("{name} {err:.3e}");
    }
    println!(
        "max_relative_error {:.3e} epsilon {:.1e}",
        report.max_relative_error, report.epsilon
    );
    if !report.passes(tolerance) {
        return Err(Error::numeric(format!(
            "gradient check failed: max relative error {:.3e} at tolerance {:.1e}",
            report.max_relative_error, tolerance
        )));
    }
    println!("gradient check passed");
    Ok(())
}

/// Prints the learnable parameter count of the configured model.
pub fn cmd_params(cfg: &RunConfig) -> Result<()> {
    let params = DecoderParams::zeros(&cfg.model)?;
    println!("{}", params.count_learnable_params());
    Ok(())
}

/// Times routing across an `(N, K)` grid on a one-block model and prints
/// the measured expert evaluations per token for each cell.
pub fn cmd_bench_routing(cfg: &RunConfig) -> Result<()> {
    let m_shared = cfg.model.moe.m_shared;
    for n_routed in 1..=6 {
        for top_k in 1..=n_routed {
            let model = DecoderConfig {
                num_blocks: 1,
                num_heads: 2,
                d_model: 32,
                dropout: 0.0,
                feature_dim: 16,
                grid: 8,
                heatmap_size: 8,
                moe: MoEConfig {
                    n_routed,
                    m_shared,
                    top_k,
                    d_model: 32,
                    mlp_ratio: 1,
                },
                ffn_only: false,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let params = DecoderParams::init(&model, &mut rng)?;
            let encoder = gazemoe::data::SyntheticConfig {
                feature_dim: model.feature_dim,
                grid: model.grid,
                noise_std: 1.0,
                seed: 3,
            };
            let mut data_rng = ChaCha8Rng::seed_from_u64(5);
            let samples = synthetic_dataset(2, 0.5, &encoder, &mut data_rng)?;

            let start = Instant::now();
            let mut stats = MoeStats::default();
            for (record, features) in &samples {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let mut fwd_rng = ChaCha8Rng::seed_from_u64(0);
                forward_on_tape(
                    &mut tape,
                    &bound,
                    features,
                    &record.bbox,
                    false,
                    &mut fwd_rng,
                    &mut stats,
                )?;
            }
            let elapsed = start.elapsed();
            let per_token = stats.expert_token_evals as f64 / stats.tokens_processed as f64;
            println!(
                "N={n_routed} K={top_k} evals_per_token={per_token:.3} tokens={} elapsed_ms={:.2}",
                stats.tokens_processed,
                elapsed.as_secs_f64() * 1e3
            );
        }
    }
    Ok(())
}
