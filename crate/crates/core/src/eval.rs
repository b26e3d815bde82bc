//! Detection scoring: greedy matching, all-point interpolated average
//! precision, mAP at IoU 0.5 on genus and biological-class level, and
//! average classification accuracy (ACA).

use crate::data::{AnnotatedImage, Instance, Preprocessor};
use crate::geometry::{iou_unchecked, BoundingBox};
use crate::model::Detector;
use crate::taxonomy::Taxonomy;
use crate::util::argsort_desc;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One scored, labeled detection attributed to an image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub label: String,
    pub score: f64,
}

/// One labeled ground-truth box attributed to an image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub label: String,
}

/// Outcome of greedy matching at a fixed IoU threshold.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// In greedy order (descending score, ties by input order):
    /// (input detection index, matched GT input index or None for FP).
    pub decisions: Vec<(usize, Option<usize>)>,
    /// Per ground-truth flag: matched by some detection.
    pub gt_matched: Vec<bool>,
    pub iou_threshold: f64,
}

/// Greedy matcher. Detections are visited in descending score order; each
/// considers the ground-truth boxes of the same image and label with
/// IoU >= threshold, takes the one with maximum IoU (ties to the lowest GT
/// input index), and is a true positive iff that box is still unmatched.
///
/// With `match_labels = false` the label gate is dropped (localization-only
/// matching, used by ACA).
pub fn match_detections(
    dets: &[ScoredDetection],
    gts: &[GroundTruth],
    iou_threshold: f64,
    match_labels: bool,
) -> MatchResult {
    let order = argsort_desc(&dets.iter().map(|d| d.score).collect::<Vec<_>>());
    let mut gt_matched = vec![false; gts.len()];
    let mut decisions = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<usize> = None;
        let mut best_iou = 0.0f64;
        for (gi, g) in gts.iter().enumerate() {
            if g.image_id != d.image_id {
                continue;
            }
            if match_labels && g.label != d.label {
                continue;
            }
            let v = iou_unchecked(&d.bbox, &g.bbox);
            if v >= iou_threshold && v > best_iou {
                best_iou = v;
                best = Some(gi);
            }
        }
        match best {
            Some(gi) if !gt_matched[gi] => {
                gt_matched[gi] = true;
                decisions.push((di, Some(gi)));
            }
            _ => decisions.push((di, None)),
        }
    }
    MatchResult { decisions, gt_matched, iou_threshold }
}

/// All-point interpolated average precision from true-positive flags in
/// descending-score order.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::Validation("average_precision undefined with zero ground truth".into()));
    }
    if tp_flags.is_empty() {
        return Ok(0.0);
    }
    // precision at each prefix, then the monotone envelope from the right
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (j, &f) in tp_flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precisions.push(tp as f64 / (j + 1) as f64);
    }
    for j in (0..precisions.len() - 1).rev() {
        precisions[j] = precisions[j].max(precisions[j + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut tp = 0usize;
    for (j, &f) in tp_flags.iter().enumerate() {
        if f {
            tp += 1;
            let recall = tp as f64 / num_gt as f64;
            ap += (recall - prev_recall) * precisions[j];
            prev_recall = recall;
        }
    }
    Ok(ap.clamp(0.0, 1.0))
}

/// Per-label AP plus the unweighted mean over labels with ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapScores {
    /// Label -> (AP or None when the label has no ground truth, GT count).
    pub per_label: BTreeMap<String, (Option<f64>, u64)>,
    pub mean: f64,
}

/// Mean average precision at the given IoU threshold over the label set.
/// Labels without any ground truth are excluded from the mean.
pub fn map_at_iou(
    dets: &[ScoredDetection],
    gts: &[GroundTruth],
    labels: &[String],
    iou_threshold: f64,
) -> Result<MapScores> {
    if labels.is_empty() {
        return Err(Error::Validation("mAP needs a non-empty label set".into()));
    }
    let mut per_label = BTreeMap::new();
    let mut sum = 0.0;
    let mut n = 0usize;
    for label in labels {
        let lgts: Vec<GroundTruth> = gts.iter().filter(|g| &g.label == label).cloned().collect();
        if lgts.is_empty() {
            per_label.insert(label.clone(), (None, 0));
            continue;
        }
        let ldets: Vec<ScoredDetection> = dets.iter().filter(|d| &d.label == label).cloned().collect();
        let m = match_detections(&ldets, &lgts, iou_threshold, true);
        let flags: Vec<bool> = m.decisions.iter().map(|&(_, gt)| gt.is_some()).collect();
        let ap = average_precision(&flags, lgts.len())?;
        assert!((0.0..=1.0).contains(&ap));
        per_label.insert(label.clone(), (Some(ap), lgts.len() as u64));
        sum += ap;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Validation("no label in the set has ground truth".into()));
    }
    Ok(MapScores { per_label, mean: sum / n as f64 })
}

/// Genus-level mAP@50.
pub fn map_at_50(dets: &[ScoredDetection], gts: &[GroundTruth], labels: &[String]) -> Result<MapScores> {
    map_at_iou(dets, gts, labels, 0.5)
}

/// Roll both sides up to biological classes and score over the six classes.
pub fn class_level_scores(dets: &[ScoredDetection], gts: &[GroundTruth], taxonomy: &Taxonomy) -> Result<MapScores> {
    let rolled_dets: Vec<ScoredDetection> = dets
        .iter()
        .map(|d| {
            Ok(ScoredDetection {
                image_id: d.image_id.clone(),
                bbox: d.bbox,
                label: taxonomy.genus_to_class(&d.label)?.to_owned(),
                score: d.score,
            })
        })
        .collect::<Result<_>>()?;
    let rolled_gts: Vec<GroundTruth> = gts
        .iter()
        .map(|g| {
            Ok(GroundTruth {
                image_id: g.image_id.clone(),
                bbox: g.bbox,
                label: taxonomy.genus_to_class(&g.label)?.to_owned(),
            })
        })
        .collect::<Result<_>>()?;
    map_at_iou(&rolled_dets, &rolled_gts, &taxonomy.classes().to_vec(), 0.5)
}

/// Average classification accuracy: match by localization only, then take
/// the unweighted mean over ground-truth labels of the fraction of matched
/// pairs carrying the correct predicted label. `None` when nothing matched.
pub fn aca(dets: &[ScoredDetection], gts: &[GroundTruth], iou_threshold: f64) -> Option<f64> {
    let m = match_detections(dets, gts, iou_threshold, false);
    let mut per_label: BTreeMap<&str, (u64, u64)> = BTreeMap::new(); // (correct, total)
    for &(di, gt) in &m.decisions {
        if let Some(gi) = gt {
            let entry = per_label.entry(gts[gi].label.as_str()).or_default();
            entry.1 += 1;
            if dets[di].label == gts[gi].label {
                entry.0 += 1;
            }
        }
    }
    if per_label.is_empty() {
        return None;
    }
    let sum: f64 = per_label.values().map(|&(c, t)| c as f64 / t as f64).sum();
    let v = sum / per_label.len() as f64;
    assert!((0.0..=1.0).contains(&v));
    Some(v)
}

/// One row of the per-label tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub ap: Option<f64>,
    pub instance_pct: f64,
    pub support: u64,
}

/// Full evaluation summary at both taxonomy levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub genus_rows: Vec<LabelScore>,
    pub genus_map: f64,
    pub class_rows: Vec<LabelScore>,
    pub class_map: f64,
    pub genus_aca: Option<f64>,
    pub class_aca: Option<f64>,
}

fn rows_from(scores: &MapScores, total_gt: u64) -> Vec<LabelScore> {
    scores
        .per_label
        .iter()
        .map(|(label, &(ap, support))| LabelScore {
            label: label.clone(),
            ap,
            instance_pct: if total_gt > 0 { 100.0 * support as f64 / total_gt as f64 } else { 0.0 },
            support,
        })
        .collect()
}

/// Score detections against ground truth at genus and class level.
pub fn evaluate(dets: &[ScoredDetection], gts: &[GroundTruth], taxonomy: &Taxonomy) -> Result<EvalReport> {
    let genus_scores = map_at_50(dets, gts, &taxonomy.genera().to_vec())?;
    let class_scores = class_level_scores(dets, gts, taxonomy)?;
    let genus_aca = aca(dets, gts, 0.5);
    let class_dets: Vec<ScoredDetection> = dets
        .iter()
        .map(|d| {
            Ok(ScoredDetection {
                image_id: d.image_id.clone(),
                bbox: d.bbox,
                label: taxonomy.genus_to_class(&d.label)?.to_owned(),
                score: d.score,
            })
        })
        .collect::<Result<_>>()?;
    let class_gts: Vec<GroundTruth> = gts
        .iter()
        .map(|g| {
            Ok(GroundTruth {
                image_id: g.image_id.clone(),
                bbox: g.bbox,
                label: taxonomy.genus_to_class(&g.label)?.to_owned(),
            })
        })
        .collect::<Result<_>>()?;
    let class_aca = aca(&class_dets, &class_gts, 0.5);
    let total = gts.len() as u64;
    Ok(EvalReport {
        genus_rows: rows_from(&genus_scores, total),
        genus_map: genus_scores.mean,
        class_rows: rows_from(&class_scores, total),
        class_map: class_scores.mean,
        genus_aca,
        class_aca,
    })
}

/// Run the detector over a set of (already relabeled) images and collect
/// detections plus ground truth in working-resolution coordinates.
pub fn run_inference(
    detector: &Detector,
    preprocessor: &Preprocessor,
    taxonomy: &Taxonomy,
    images: &[&AnnotatedImage],
    score_floor: f64,
    nms_iou: f64,
) -> Result<(Vec<ScoredDetection>, Vec<GroundTruth>)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for img in images {
        let (tensor, instances) = preprocessor.eval_sample(img)?;
        for d in detector.predict(&tensor, score_floor, nms_iou)? {
            dets.push(ScoredDetection {
                image_id: img.image_id.clone(),
                bbox: d.bbox,
                label: taxonomy.genera()[d.genus_index()].clone(),
                score: d.confidence,
            });
        }
        for Instance { bbox, genus } in instances {
            gts.push(GroundTruth { image_id: img.image_id.clone(), bbox, label: genus });
        }
    }
    Ok((dets, gts))
}

/// Ground truth replayed as perfect unit-score detections (oracle fixture).
pub fn ground_truth_as_detections(gts: &[GroundTruth]) -> Vec<ScoredDetection> {
    gts.iter()
        .map(|g| ScoredDetection { image_id: g.image_id.clone(), bbox: g.bbox, label: g.label.clone(), score: 1.0 })
        .collect()
}
