//! Evaluation metrics: heatmap ROC AUC, mean L2 error in normalized
//! coordinates, in/out average precision, and great-circle distance for
//! gaze targets in equirectangular 360-degree frames.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::data::{gaussian_target, AnnotationRecord, FeatureFile};
use crate::model::{DecoderParams, GazePrediction};
use crate::{Error, Result};

/// Aggregate evaluation results. Fields whose metric is undefined on the
/// given dataset (no in-frame samples, degenerate masks) are `None` and
/// serialize as JSON null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub mean_l2: Option<f64>,
    pub ap_inout: Option<f64>,
    pub spherical_dist: Option<f64>,
    pub n_samples: usize,
}

/// Location of the largest heatmap cell as a normalized `(x, y)` point at
/// the cell center. Ties go to the lowest row-major index.
pub fn argmax_point(heatmap: &[f64], size: usize) -> Result<(f64, f64)> {
    if size == 0 || heatmap.len() != size * size {
        return Err(Error::ShapeMismatch {
            op: "argmax_point",
            lhs: vec![heatmap.len()],
            rhs: vec![size, size],
        });
    }
    let mut best = 0;
    for (i, &v) in heatmap.iter().enumerate() {
        if v > heatmap[best] {
            best = i;
        }
    }
    let (r, c) = (best / size, best % size);
    Ok((
        (c as f64 + 0.5) / size as f64,
        (r as f64 + 0.5) / size as f64,
    ))
}

/// Mean Euclidean distance between paired points in `[0,1]²` coordinates.
pub fn mean_l2(preds: &[(f64, f64)], gts: &[(f64, f64)]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            op: "mean_l2",
            lhs: vec![preds.len()],
            rhs: vec![gts.len()],
        });
    }
    if preds.is_empty() {
        return Err(Error::UndefinedMetric(
            "mean L2 over an empty sample set".to_string(),
        ));
    }
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt())
        .sum();
    Ok(total / preds.len() as f64)
}

/// ROC AUC of heatmap values scored against a binary target mask, computed
/// from the rank-sum form with midranks for tied scores.
pub fn heatmap_auc(heatmap: &[f64], gt_mask: &[bool]) -> Result<f64> {
    if heatmap.len() != gt_mask.len() {
        return Err(Error::ShapeMismatch {
            op: "heatmap_auc",
            lhs: vec![heatmap.len()],
            rhs: vec![gt_mask.len()],
        });
    }
    let pos = gt_mask.iter().filter(|&&m| m).count();
    let neg = gt_mask.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, mask has {pos} positive and {neg} negative cells"
        )));
    }

    let mut order: Vec<usize> = (0..heatmap.len()).collect();
    order.sort_by(|&a, &b| heatmap[a].total_cmp(&heatmap[b]));

    // Ranks are 1-based; a run of equal scores shares the mean of the ranks
    // it spans.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && heatmap[order[j]] == heatmap[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if gt_mask[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let pos = pos as f64;
    Ok((rank_sum_pos - pos * (pos + 1.0) / 2.0) / (pos * neg as f64))
}

/// Average precision with step interpolation: walk thresholds from the
/// highest score down and accumulate precision weighted by recall gained.
/// Tied scores form a single threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "average_precision",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision with no positive samples".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

fn to_sphere(p: (f64, f64)) -> (f64, f64) {
    (2.0 * PI * p.0 - PI, FRAC_PI_2 - PI * p.1)
}

/// Great-circle angle in radians between two normalized points of an
/// equirectangular frame (x spans longitude −π..π, y latitude π/2..−π/2),
/// via the haversine form, which stays accurate for nearby points.
pub fn spherical_distance(pred: (f64, f64), gt: (f64, f64)) -> f64 {
    let (lon1, lat1) = to_sphere(pred);
    let (lon2, lat2) = to_sphere(gt);
    let s_lat = ((lat2 - lat1) / 2.0).sin();
    let s_lon = ((lon2 - lon1) / 2.0).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    2.0 * h.max(0.0).sqrt().min(1.0).asin()
}

/// Binary ground truth for AUC: cells of the Gaussian target map at or
/// above half of its peak.
pub fn target_mask(gaze: (f64, f64), size: usize, sigma: f64) -> Result<Vec<bool>> {
    let map = gaussian_target(gaze, size, sigma)?;
    let peak = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(map.iter().map(|&v| v >= 0.5 * peak).collect())
}

/// Runs the model over a dataset and aggregates all metrics. AP covers
/// every sample via the in/out probability; the heatmap metrics cover the
/// in-frame subset. `workers > 1` fans inference out across threads with a
/// fixed-order reduction, so results do not depend on the thread count.
pub fn evaluate(
    params: &DecoderParams,
    samples: &[(AnnotationRecord, FeatureFile)],
    target_sigma: f64,
    workers: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::config("evaluate needs at least one sample"));
    }
    let preds: Vec<GazePrediction> = if workers <= 1 {
        samples
            .iter()
            .map(|(r, f)| params.forward(f, &r.bbox))
            .collect::<Result<_>>()?
    } else {
        let chunk = samples.len().div_ceil(workers);
        let per_chunk: Vec<Result<Vec<GazePrediction>>> = std::thread::scope(|s| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|c| {
                    s.spawn(move || {
                        c.iter()
                            .map(|(r, f)| params.forward(f, &r.bbox))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(samples.len());
        for r in per_chunk {
            all.extend(r?);
        }
        all
    };
    let pairs = samples.iter().map(|(r, _)| r).zip(preds.iter());
    reduce(pairs, samples.len(), target_sigma)
}

/// Aggregates metrics for precomputed predictions, in the same way as
/// [`evaluate`].
pub fn evaluate_predictions(
    records: &[AnnotationRecord],
    preds: &[GazePrediction],
    target_sigma: f64,
) -> Result<MetricsReport> {
    if records.len() != preds.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate_predictions",
            lhs: vec![records.len()],
            rhs: vec![preds.len()],
        });
    }
    if records.is_empty() {
        return Err(Error::config("evaluate needs at least one sample"));
    }
    reduce(records.iter().zip(preds.iter()), records.len(), target_sigma)
}

fn reduce<'a>(
    pairs: impl Iterator<Item = (&'a AnnotationRecord, &'a GazePrediction)>,
    n_samples: usize,
    target_sigma: f64,
) -> Result<MetricsReport> {
    let mut ap_scores = Vec::new();
    let mut ap_labels = Vec::new();
    let mut pred_points = Vec::new();
    let mut gt_points = Vec::new();
    let mut aucs = Vec::new();
    let mut auc_defined = true;
    let mut spherical = Vec::new();

    for (record, pred) in pairs {
        ap_scores.push(pred.in_frame_prob);
        ap_labels.push(record.in_frame);
        let Some([gx, gy]) = record.gaze_point else {
            continue;
        };
        let point = argmax_point(&pred.heatmap, pred.heatmap_size)?;
        pred_points.push(point);
        gt_points.push((gx, gy));
        spherical.push(spherical_distance(point, (gx, gy)));
        let mask = target_mask((gx, gy), pred.heatmap_size, target_sigma)?;
        match heatmap_auc(&pred.heatmap, &mask) {
            Ok(a) => aucs.push(a),
            Err(Error::UndefinedMetric(_)) => auc_defined = false,
            Err(e) => return Err(e),
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let auc = (auc_defined && !aucs.is_empty()).then(|| mean(&aucs));
    let mean_l2 = match mean_l2(&pred_points, &gt_points) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let ap_inout = match average_precision(&ap_scores, &ap_labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let spherical_dist = (!spherical.is_empty()).then(|| mean(&spherical));

    Ok(MetricsReport {
        auc,
        mean_l2,
        ap_inout,
        spherical_dist,
        n_samples,
    })
}
