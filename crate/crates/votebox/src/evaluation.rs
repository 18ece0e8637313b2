//! Detection metrics (per-class average precision, mAP at IoU 0.25/0.50)
//! and counting-by-detection metrics (RMSE, rRMSE, their non-zero
//! variants, and unweighted class means).
//!
//! Matching is the usual ranked greedy protocol: detections of one class
//! are sorted by objectness (ties broken by scene id, then input index)
//! and each one claims the unmatched ground-truth box with the highest
//! IoU at or above the threshold. Average precision is the area under
//! the envelope-interpolated precision-recall curve, so it depends on
//! the score ranking only. Classes with no ground-truth boxes anywhere
//! in the split are excluded from mAP and listed in the report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou3d, Box3, Detection};

/// Objectness threshold for counting by detection.
pub const DEFAULT_COUNT_CONFIDENCE: f64 = 0.95;

/// IoU thresholds the detection report is computed at.
pub const MAP_IOU_THRESHOLDS: [f64; 2] = [0.25, 0.50];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class id {class_id} out of range for {num_classes} classes")]
    BadClass { class_id: usize, num_classes: usize },
    #[error("confidence threshold {0} must lie in (0, 1)")]
    BadConfidence(f64),
    #[error("IoU threshold {0} must lie in (0, 1]")]
    BadIouThreshold(f64),
    #[error("count grids disagree: {0}")]
    GridMismatch(String),
}

/// Ground truth and predictions for one scene, already paired by id.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub scene_id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<(Box3, usize)>,
}

/// Ranked matching result for one class: `flags[k]` says whether the
/// k-th highest-scoring detection matched a ground-truth box.
#[derive(Debug, Clone)]
pub struct ClassMatches {
    pub flags: Vec<bool>,
    pub scores: Vec<f64>,
    pub gt_count: usize,
}

/// Greedy IoU matching for one class across all scenes.
pub fn match_detections(
    scenes: &[ScenePair],
    class_id: usize,
    iou_thresh: f64,
) -> Result<ClassMatches, EvalError> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(EvalError::BadIouThreshold(iou_thresh));
    }
    // (scene index, input index, score), ranked by score descending with
    // deterministic ties: scene id ascending, then input index ascending.
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    let mut gt_count = 0usize;
    for (si, scene) in scenes.iter().enumerate() {
        gt_count += scene
            .ground_truth
            .iter()
            .filter(|(_, c)| *c == class_id)
            .count();
        for (di, det) in scene.detections.iter().enumerate() {
            if det.class_id == class_id {
                ranked.push((si, di, det.objectness));
            }
        }
    }
    ranked.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("objectness is validated finite")
            .then_with(|| scenes[a.0].scene_id.cmp(&scenes[b.0].scene_id))
            .then_with(|| a.1.cmp(&b.1))
    });

    let mut matched: Vec<Vec<bool>> = scenes
        .iter()
        .map(|s| vec![false; s.ground_truth.len()])
        .collect();
    let mut flags = Vec::with_capacity(ranked.len());
    let mut scores = Vec::with_capacity(ranked.len());
    for &(si, di, score) in &ranked {
        let det = &scenes[si].detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gt_box, gt_class)) in scenes[si].ground_truth.iter().enumerate() {
            if *gt_class != class_id || matched[si][gi] {
                continue;
            }
            let iou = iou3d(&det.bbox, gt_box);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[si][gi] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
        scores.push(score);
    }
    Ok(ClassMatches {
        flags,
        scores,
        gt_count,
    })
}

/// Raw (recall, precision) points, one per rank.
pub fn pr_curve(flags: &[bool], gt_count: usize) -> Vec<(f64, f64)> {
    let mut points = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (rank, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        let recall = if gt_count == 0 {
            0.0
        } else {
            tp as f64 / gt_count as f64
        };
        let precision = tp as f64 / (rank + 1) as f64;
        points.push((recall, precision));
    }
    points
}

/// Area under the envelope-interpolated precision-recall curve.
///
/// Zero ground truth or zero detections give 0.0; such classes are
/// excluded from mAP by the caller.
pub fn average_precision(flags: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 || flags.is_empty() {
        return 0.0;
    }
    let points = pr_curve(flags, gt_count);
    let mut envelope: Vec<f64> = points.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        ap += (recall - prev_recall) * envelope[i];
        prev_recall = recall;
    }
    ap
}

/// Per-class detection quality at every reported IoU threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub gt_count: usize,
    /// Average precision, parallel to the report's `iou_thresholds`.
    pub ap: Vec<f64>,
    /// Raw (recall, precision) points, parallel to `iou_thresholds`.
    pub pr_curves: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    /// One entry per class that has ground truth in the split.
    pub classes: Vec<ClassEval>,
    /// Classes with zero ground truth anywhere, excluded from mAP.
    pub excluded_classes: Vec<usize>,
    pub map_25: f64,
    pub map_50: f64,
}

impl EvalReport {
    /// Aligned table: classes as columns, one row per IoU threshold.
    pub fn table(&self, class_names: &[String]) -> String {
        let name = |id: usize| -> String {
            class_names
                .get(id)
                .cloned()
                .unwrap_or_else(|| format!("class{id}"))
        };
        let mut out = String::new();
        let mut header = format!("{:<12}", "metric");
        for c in &self.classes {
            header.push_str(&format!("{:>12}", name(c.class_id)));
        }
        header.push_str(&format!("{:>12}\n", "mAP"));
        out.push_str(&header);
        for (ti, thresh) in self.iou_thresholds.iter().enumerate() {
            let mean = if ti == 0 { self.map_25 } else { self.map_50 };
            let mut row = format!("{:<12}", format!("AP@{thresh:.2}"));
            for c in &self.classes {
                row.push_str(&format!("{:>12.4}", c.ap[ti]));
            }
            row.push_str(&format!("{:>12.4}\n", mean));
            out.push_str(&row);
        }
        if !self.excluded_classes.is_empty() {
            let names: Vec<String> = self.excluded_classes.iter().map(|&c| name(c)).collect();
            out.push_str(&format!(
                "excluded (no ground truth): {}\n",
                names.join(", ")
            ));
        }
        out
    }
}

/// Full detection evaluation at the standard 0.25 / 0.50 thresholds.
pub fn evaluate_detections(
    scenes: &[ScenePair],
    num_classes: usize,
) -> Result<EvalReport, EvalError> {
    for scene in scenes {
        for det in &scene.detections {
            if det.class_id >= num_classes {
                return Err(EvalError::BadClass {
                    class_id: det.class_id,
                    num_classes,
                });
            }
        }
        for (_, class_id) in &scene.ground_truth {
            if *class_id >= num_classes {
                return Err(EvalError::BadClass {
                    class_id: *class_id,
                    num_classes,
                });
            }
        }
    }
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    for class_id in 0..num_classes {
        let mut ap = Vec::with_capacity(MAP_IOU_THRESHOLDS.len());
        let mut curves = Vec::with_capacity(MAP_IOU_THRESHOLDS.len());
        let mut gt_count = 0;
        for &thresh in &MAP_IOU_THRESHOLDS {
            let matches = match_detections(scenes, class_id, thresh)?;
            gt_count = matches.gt_count;
            ap.push(average_precision(&matches.flags, matches.gt_count));
            curves.push(pr_curve(&matches.flags, matches.gt_count));
        }
        if gt_count == 0 {
            excluded.push(class_id);
        } else {
            classes.push(ClassEval {
                class_id,
                gt_count,
                ap,
                pr_curves: curves,
            });
        }
    }
    let mean_at = |ti: usize| -> f64 {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(|c| c.ap[ti]).sum::<f64>() / classes.len() as f64
        }
    };
    Ok(EvalReport {
        iou_thresholds: MAP_IOU_THRESHOLDS.to_vec(),
        map_25: mean_at(0),
        map_50: mean_at(1),
        classes,
        excluded_classes: excluded,
    })
}

/// Counts the post-NMS detections of each class whose objectness reaches
/// the confidence threshold. Returns one count per class.
pub fn count_by_detection(
    detections: &[Detection],
    num_classes: usize,
    conf: f64,
) -> Result<Vec<usize>, EvalError> {
    if !(conf > 0.0 && conf < 1.0) {
        return Err(EvalError::BadConfidence(conf));
    }
    let mut counts = vec![0usize; num_classes];
    for det in detections {
        if det.class_id >= num_classes {
            return Err(EvalError::BadClass {
                class_id: det.class_id,
                num_classes,
            });
        }
        if det.objectness >= conf {
            counts[det.class_id] += 1;
        }
    }
    Ok(counts)
}

/// Ground-truth instance counts per class for one scene.
pub fn count_ground_truth(
    ground_truth: &[(Box3, usize)],
    num_classes: usize,
) -> Result<Vec<usize>, EvalError> {
    let mut counts = vec![0usize; num_classes];
    for (_, class_id) in ground_truth {
        if *class_id >= num_classes {
            return Err(EvalError::BadClass {
                class_id: *class_id,
                num_classes,
            });
        }
        counts[*class_id] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassCount {
    pub class_id: usize,
    pub rmse: f64,
    pub nz_rmse: f64,
    pub rrmse: f64,
    pub nz_rrmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountReport {
    pub per_class: Vec<ClassCount>,
    pub m_rmse: f64,
    pub m_nz_rmse: f64,
    pub m_rrmse: f64,
    pub m_nz_rrmse: f64,
}

impl CountReport {
    /// Aligned table: classes as columns, one row per error metric.
    pub fn table(&self, class_names: &[String]) -> String {
        let name = |id: usize| -> String {
            class_names
                .get(id)
                .cloned()
                .unwrap_or_else(|| format!("class{id}"))
        };
        let mut out = String::new();
        let mut header = format!("{:<12}", "metric");
        for c in &self.per_class {
            header.push_str(&format!("{:>12}", name(c.class_id)));
        }
        header.push_str(&format!("{:>12}\n", "mean"));
        out.push_str(&header);
        let rows: [(&str, fn(&ClassCount) -> f64, f64); 4] = [
            ("RMSE", |c| c.rmse, self.m_rmse),
            ("nz-RMSE", |c| c.nz_rmse, self.m_nz_rmse),
            ("rRMSE", |c| c.rrmse, self.m_rrmse),
            ("nz-rRMSE", |c| c.nz_rrmse, self.m_nz_rrmse),
        ];
        for (label, pick, mean) in rows {
            let mut row = format!("{label:<12}");
            for c in &self.per_class {
                row.push_str(&format!("{:>12.4}", pick(c)));
            }
            row.push_str(&format!("{mean:>12.4}\n"));
            out.push_str(&row);
        }
        out
    }
}

/// Counting errors over a scene-by-class grid of predicted and
/// ground-truth counts.
///
/// Per class: `rmse = sqrt(mean (p - g)^2)` and
/// `rrmse = sqrt(mean (p - g)^2 / (g + 1))` over all scenes; the nz-
/// variants restrict the mean to scenes whose ground-truth count is
/// positive and are 0 when no such scene exists. The `m_*` fields are
/// unweighted means over classes.
pub fn counting_metrics(
    predicted: &[Vec<usize>],
    truth: &[Vec<usize>],
) -> Result<CountReport, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::GridMismatch(format!(
            "{} predicted scenes vs {} ground-truth scenes",
            predicted.len(),
            truth.len()
        )));
    }
    let num_classes = predicted.first().map_or(0, |row| row.len());
    for (i, (p, g)) in predicted.iter().zip(truth).enumerate() {
        if p.len() != num_classes || g.len() != num_classes {
            return Err(EvalError::GridMismatch(format!(
                "scene {i} has {} predicted / {} ground-truth classes, expected {num_classes}",
                p.len(),
                g.len()
            )));
        }
    }
    let scenes = predicted.len();
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut sq = 0.0;
        let mut rel_sq = 0.0;
        let mut nz_sq = 0.0;
        let mut nz_rel_sq = 0.0;
        let mut nz_scenes = 0usize;
        for i in 0..scenes {
            let p = predicted[i][c] as f64;
            let g = truth[i][c] as f64;
            let err2 = (p - g) * (p - g);
            sq += err2;
            rel_sq += err2 / (g + 1.0);
            if truth[i][c] > 0 {
                nz_scenes += 1;
                nz_sq += err2;
                nz_rel_sq += err2 / (g + 1.0);
            }
        }
        let mean = |total: f64, n: usize| if n == 0 { 0.0 } else { total / n as f64 };
        per_class.push(ClassCount {
            class_id: c,
            rmse: mean(sq, scenes).sqrt(),
            rrmse: mean(rel_sq, scenes).sqrt(),
            nz_rmse: mean(nz_sq, nz_scenes).sqrt(),
            nz_rrmse: mean(nz_rel_sq, nz_scenes).sqrt(),
        });
    }
    let m = |pick: fn(&ClassCount) -> f64| -> f64 {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(pick).sum::<f64>() / per_class.len() as f64
        }
    };
    Ok(CountReport {
        m_rmse: m(|c| c.rmse),
        m_nz_rmse: m(|c| c.nz_rmse),
        m_rrmse: m(|c| c.rrmse),
        m_nz_rrmse: m(|c| c.nz_rrmse),
        per_class,
    })
}
