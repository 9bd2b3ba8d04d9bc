//! Detection matching and COCO-style average precision.
//!
//! Predictions from all cases are pooled into one ranked list per category
//! (descending confidence, ties broken by case id then input order). AP is
//! the mean of 101-point interpolated precision over ten IoU thresholds.
//! Size-restricted APs follow the usual ignore protocol: ground truths outside
//! the area range are ignored, predictions matched to them are ignored, and
//! unmatched predictions outside the range are ignored.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CoherenceVerdict, Difference, EditCase, EditCommand, GroundTruthDifference, NormalizedBBox};

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Slack when comparing IoU against a threshold, so that an IoU that is
/// exactly the threshold in decimal still passes after float rounding.
pub const IOU_EPS: f64 = 1e-12;

pub const RECALL_POINTS: usize = 101;

/// Pixel-area ranges for the medium and large buckets.
pub const MEDIUM_AREA: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);
pub const LARGE_AREA: (f64, f64) = (96.0 * 96.0, f64::INFINITY);
const ALL_AREA: (f64, f64) = (0.0, f64::INFINITY);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredOutcome {
    TruePositive { gt: usize },
    FalsePositive,
    Ignored,
}

/// Result of matching one case's predictions at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub iou_threshold: f64,
    /// Prediction indices in evaluation order (non-increasing confidence).
    pub order: Vec<usize>,
    /// Confidence of each prediction in evaluation order.
    pub confidences: Vec<f64>,
    /// Outcome of each prediction in evaluation order.
    pub outcomes: Vec<PredOutcome>,
    /// For each ground truth, the prediction index that matched it.
    pub gt_matched: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, PredOutcome::TruePositive { .. }))
            .count()
    }

    pub fn false_positives(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, PredOutcome::FalsePositive))
            .count()
    }
}

/// Indices sorted by descending confidence, stable on ties.
fn confidence_order(conf: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
    order
}

struct MatchInput<'a> {
    pred_boxes: &'a [NormalizedBBox],
    pred_conf: &'a [f64],
    /// Whether an unmatched prediction is ignored (outside the area range).
    pred_out_of_range: &'a [bool],
    gt_boxes: &'a [NormalizedBBox],
    gt_ignore: &'a [bool],
}

/// Greedy matching: each prediction, in confidence order, takes the unmatched
/// non-ignored ground truth of highest IoU at or above the threshold, falling
/// back to an ignored one.
fn greedy_match(input: &MatchInput<'_>, threshold: f64) -> MatchResult {
    let order = confidence_order(input.pred_conf);
    let mut gt_matched = vec![None; input.gt_boxes.len()];
    let mut outcomes = Vec::with_capacity(order.len());

    for &p in &order {
        let pb = &input.pred_boxes[p];
        let mut best: Option<(usize, f64, bool)> = None;
        for (g, gb) in input.gt_boxes.iter().enumerate() {
            if gt_matched[g].is_some() {
                continue;
            }
            let v = pb.iou(gb);
            if v + IOU_EPS < threshold {
                continue;
            }
            let ignored = input.gt_ignore[g];
            let better = match best {
                None => true,
                // non-ignored ground truths always win over ignored ones
                Some((_, bv, bign)) => (bign && !ignored) || (bign == ignored && v > bv),
            };
            if better {
                best = Some((g, v, ignored));
            }
        }
        let outcome = match best {
            Some((g, _, ignored)) => {
                gt_matched[g] = Some(p);
                if ignored {
                    PredOutcome::Ignored
                } else {
                    PredOutcome::TruePositive { gt: g }
                }
            }
            None if input.pred_out_of_range[p] => PredOutcome::Ignored,
            None => PredOutcome::FalsePositive,
        };
        outcomes.push(outcome);
    }

    MatchResult {
        iou_threshold: threshold,
        confidences: order.iter().map(|&i| input.pred_conf[i]).collect(),
        order,
        outcomes,
        gt_matched,
    }
}

/// Matches one case's predictions against its ground truths.
///
/// With `class_aware`, a prediction may only match a ground truth with the
/// same command.
pub fn match_detections(
    preds: &[Difference],
    gts: &[GroundTruthDifference],
    iou_threshold: f64,
    class_aware: bool,
) -> MatchResult {
    if !class_aware {
        let pred_boxes: Vec<_> = preds.iter().map(|p| p.bbox).collect();
        let pred_conf: Vec<_> = preds.iter().map(|p| p.confidence).collect();
        let gt_boxes: Vec<_> = gts.iter().map(|g| g.bbox).collect();
        return greedy_match(
            &MatchInput {
                pred_boxes: &pred_boxes,
                pred_conf: &pred_conf,
                pred_out_of_range: &vec![false; preds.len()],
                gt_boxes: &gt_boxes,
                gt_ignore: &vec![false; gts.len()],
            },
            iou_threshold,
        );
    }

    // class-aware: match each command separately, then merge back
    let order = confidence_order(&preds.iter().map(|p| p.confidence).collect::<Vec<_>>());
    let mut outcome_of = vec![PredOutcome::FalsePositive; preds.len()];
    let mut gt_matched = vec![None; gts.len()];
    for cmd in EditCommand::ALL {
        let pi: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].command == cmd).collect();
        let gi: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].command == cmd).collect();
        let pred_boxes: Vec<_> = pi.iter().map(|&i| preds[i].bbox).collect();
        let pred_conf: Vec<_> = pi.iter().map(|&i| preds[i].confidence).collect();
        let gt_boxes: Vec<_> = gi.iter().map(|&i| gts[i].bbox).collect();
        let m = greedy_match(
            &MatchInput {
                pred_boxes: &pred_boxes,
                pred_conf: &pred_conf,
                pred_out_of_range: &vec![false; pi.len()],
                gt_boxes: &gt_boxes,
                gt_ignore: &vec![false; gi.len()],
            },
            iou_threshold,
        );
        for (local, outcome) in m.order.iter().zip(&m.outcomes) {
            outcome_of[pi[*local]] = match *outcome {
                PredOutcome::TruePositive { gt } => PredOutcome::TruePositive { gt: gi[gt] },
                o => o,
            };
        }
        for (local_g, mp) in m.gt_matched.iter().enumerate() {
            gt_matched[gi[local_g]] = mp.map(|lp| pi[lp]);
        }
    }
    MatchResult {
        iou_threshold,
        confidences: order.iter().map(|&i| preds[i].confidence).collect(),
        outcomes: order.iter().map(|&i| outcome_of[i]).collect(),
        order,
        gt_matched,
    }
}

/// 101-point interpolated AP over a ranked list of true/false positives.
///
/// `None` when there is neither a ground truth nor a ranked prediction.
pub fn interpolated_ap(ranked_tp: &[bool], num_gts: usize) -> Option<f64> {
    if num_gts == 0 {
        return if ranked_tp.is_empty() { None } else { Some(0.0) };
    }
    let n = ranked_tp.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in ranked_tp {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gts as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope, non-increasing in rank
    for i in (1..n).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&rc| rc < target);
        if idx < n {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// AP of a single matched case.
///
/// Returns 1.0 by convention when there are no ground truths and no
/// predictions; such cases are excluded from aggregation elsewhere.
pub fn average_precision(m: &MatchResult, num_gts: usize) -> f64 {
    let ranked: Vec<bool> = m
        .outcomes
        .iter()
        .filter(|o| !matches!(o, PredOutcome::Ignored))
        .map(|o| matches!(o, PredOutcome::TruePositive { .. }))
        .collect();
    interpolated_ap(&ranked, num_gts).unwrap_or(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    ClassAgnostic,
    ClassAware,
    Coherence,
}

/// AP suite for one evaluation setting. Size-bucket and per-class values are
/// `None` when undefined (no ground truth and no prediction in scope).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub mode: ApMode,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_add: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_rem: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_edit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_coherent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_non_coherent: Option<f64>,
}

impl APReport {
    pub fn per_class(&self) -> BTreeMap<EditCommand, f64> {
        [
            (EditCommand::Add, self.ap_add),
            (EditCommand::Remove, self.ap_rem),
            (EditCommand::Edit, self.ap_edit),
        ]
        .into_iter()
        .filter_map(|(c, v)| v.map(|v| (c, v)))
        .collect()
    }
}

/// One case in category-generic form.
#[derive(Debug, Clone)]
pub struct ScoredCase {
    pub case_id: String,
    pub width: u32,
    pub height: u32,
    /// (box, confidence, category)
    pub preds: Vec<(NormalizedBBox, f64, usize)>,
    /// (box, category)
    pub gts: Vec<(NormalizedBBox, usize)>,
}

/// Pixel area snapped to 1e-6 px² so boxes on a bucket edge land on the
/// same side regardless of rounding in the product.
fn bucket_area(b: &NormalizedBBox, width: u32, height: u32) -> f64 {
    (b.pixel_area(width, height) * 1e6).round() / 1e6
}

/// Pooled AP for one category, area range and threshold.
fn pooled_ap(cases: &[&ScoredCase], category: usize, area: (f64, f64), threshold: f64) -> Option<f64> {
    let in_range = |b: &NormalizedBBox, c: &ScoredCase| {
        let a = bucket_area(b, c.width, c.height);
        a >= area.0 && a < area.1
    };
    // (confidence, case rank, pred index, is_tp)
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut num_gts = 0usize;
    for (rank, c) in cases.iter().enumerate() {
        let pi: Vec<usize> = (0..c.preds.len()).filter(|&i| c.preds[i].2 == category).collect();
        let gi: Vec<usize> = (0..c.gts.len()).filter(|&i| c.gts[i].1 == category).collect();
        let pred_boxes: Vec<_> = pi.iter().map(|&i| c.preds[i].0).collect();
        let pred_conf: Vec<_> = pi.iter().map(|&i| c.preds[i].1).collect();
        let pred_oor: Vec<_> = pred_boxes.iter().map(|b| !in_range(b, c)).collect();
        let gt_boxes: Vec<_> = gi.iter().map(|&i| c.gts[i].0).collect();
        let gt_ignore: Vec<_> = gt_boxes.iter().map(|b| !in_range(b, c)).collect();
        num_gts += gt_ignore.iter().filter(|&&ig| !ig).count();
        let m = greedy_match(
            &MatchInput {
                pred_boxes: &pred_boxes,
                pred_conf: &pred_conf,
                pred_out_of_range: &pred_oor,
                gt_boxes: &gt_boxes,
                gt_ignore: &gt_ignore,
            },
            threshold,
        );
        for (&p, outcome) in m.order.iter().zip(&m.outcomes) {
            match outcome {
                PredOutcome::Ignored => {}
                o => ranked.push((pred_conf[p], rank, pi[p], matches!(o, PredOutcome::TruePositive { .. }))),
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let flags: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    interpolated_ap(&flags, num_gts)
}

/// Mean AP over thresholds, then over defined categories.
fn suite_value(
    cases: &[&ScoredCase],
    categories: usize,
    area: (f64, f64),
    thresholds: &[f64],
) -> (Option<f64>, Vec<Option<f64>>) {
    let per_cat: Vec<Option<f64>> = (0..categories)
        .map(|k| {
            let vals: Vec<f64> = thresholds
                .iter()
                .filter_map(|&t| pooled_ap(cases, k, area, t))
                .collect();
            // definedness does not depend on the threshold
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let defined: Vec<f64> = per_cat.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (mean, per_cat)
}

/// Full AP suite over category-generic cases.
pub fn evaluate_scored(cases: &[ScoredCase], categories: usize) -> ApSuite {
    let mut sorted: Vec<&ScoredCase> = cases.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    // cases with nothing to rank carry no PR information
    sorted.retain(|c| !(c.preds.is_empty() && c.gts.is_empty()));

    let (ap, per_category) = suite_value(&sorted, categories, ALL_AREA, &IOU_THRESHOLDS);
    let (ap50, _) = suite_value(&sorted, categories, ALL_AREA, &[0.50]);
    let (ap75, _) = suite_value(&sorted, categories, ALL_AREA, &[0.75]);
    let (ap_m, _) = suite_value(&sorted, categories, MEDIUM_AREA, &IOU_THRESHOLDS);
    let (ap_l, _) = suite_value(&sorted, categories, LARGE_AREA, &IOU_THRESHOLDS);
    ApSuite {
        ap: ap.unwrap_or(1.0),
        ap50: ap50.unwrap_or(1.0),
        ap75: ap75.unwrap_or(1.0),
        ap_m,
        ap_l,
        per_category,
    }
}

/// Category-generic AP values.
#[derive(Debug, Clone, PartialEq)]
pub struct ApSuite {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub per_category: Vec<Option<f64>>,
}

fn command_category(c: EditCommand) -> usize {
    match c {
        EditCommand::Add => 0,
        EditCommand::Remove => 1,
        EditCommand::Edit => 2,
    }
}

/// Predictions for one case paired with the case.
#[derive(Debug, Clone, Copy)]
pub struct DetectionCase<'a> {
    pub case: &'a EditCase,
    pub predictions: &'a [Difference],
}

fn ground_truth(case: &EditCase) -> Result<&[GroundTruthDifference]> {
    case.ground_truth
        .as_deref()
        .ok_or_else(|| Error::MissingGroundTruth(case.case_id.clone()))
}

/// Detection AP suite in class-agnostic or class-aware mode.
pub fn evaluate_detection(cases: &[DetectionCase<'_>], class_aware: bool) -> Result<APReport> {
    let category = |c: EditCommand| if class_aware { command_category(c) } else { 0 };
    let scored = cases
        .iter()
        .map(|dc| {
            let gts = ground_truth(dc.case)?;
            Ok(ScoredCase {
                case_id: dc.case.case_id.clone(),
                width: dc.case.width,
                height: dc.case.height,
                preds: dc
                    .predictions
                    .iter()
                    .map(|p| (p.bbox, p.confidence, category(p.command)))
                    .collect(),
                gts: gts.iter().map(|g| (g.bbox, category(g.command))).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let suite = evaluate_scored(&scored, if class_aware { 3 } else { 1 });
    let pc = |c: EditCommand| class_aware.then(|| suite.per_category[command_category(c)]).flatten();
    Ok(APReport {
        mode: if class_aware {
            ApMode::ClassAware
        } else {
            ApMode::ClassAgnostic
        },
        ap: suite.ap,
        ap50: suite.ap50,
        ap75: suite.ap75,
        ap_m: suite.ap_m,
        ap_l: suite.ap_l,
        ap_add: pc(EditCommand::Add),
        ap_rem: pc(EditCommand::Remove),
        ap_edit: pc(EditCommand::Edit),
        ap_coherent: None,
        ap_non_coherent: None,
    })
}

/// Fraction of verdicts that agree with the annotated coherence labels.
pub fn coherence_accuracy(gts: &[GroundTruthDifference], verdicts: &[CoherenceVerdict]) -> Result<f64> {
    if gts.len() != verdicts.len() {
        return Err(Error::LengthMismatch {
            what: "ground truths vs verdicts",
            left: gts.len(),
            right: verdicts.len(),
        });
    }
    if gts.is_empty() {
        return Err(Error::InvalidCase("no labeled differences to score".into()));
    }
    let mut correct = 0usize;
    for g in gts {
        if g.coherent.is_none() {
            return Err(Error::InvalidCase(format!(
                "ground truth {:?} lacks a coherence label",
                g.subject
            )));
        }
    }
    for (g, v) in gts.iter().zip(verdicts) {
        if g.coherent == Some(v.decision) {
            correct += 1;
        }
    }
    Ok(correct as f64 / gts.len() as f64)
}

/// Detected differences with their coherence verdicts for one case.
#[derive(Debug, Clone, Copy)]
pub struct CoherenceCase<'a> {
    pub case: &'a EditCase,
    pub predictions: &'a [Difference],
    pub verdicts: &'a [CoherenceVerdict],
}

const COHERENT: usize = 0;
const NON_COHERENT: usize = 1;

fn coherence_category(coherent: bool) -> usize {
    if coherent {
        COHERENT
    } else {
        NON_COHERENT
    }
}

/// Two-category AP where each box's category is its coherence label.
pub fn evaluate_coherence_ap(cases: &[CoherenceCase<'_>]) -> Result<APReport> {
    let scored = cases
        .iter()
        .map(|cc| {
            let gts = ground_truth(cc.case)?;
            if cc.predictions.len() != cc.verdicts.len() {
                return Err(Error::LengthMismatch {
                    what: "predictions vs verdicts",
                    left: cc.predictions.len(),
                    right: cc.verdicts.len(),
                });
            }
            let gts = gts
                .iter()
                .map(|g| {
                    let label = g.coherent.ok_or_else(|| {
                        Error::InvalidCase(format!("{}: ground truth lacks a coherence label", cc.case.case_id))
                    })?;
                    Ok((g.bbox, coherence_category(label)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ScoredCase {
                case_id: cc.case.case_id.clone(),
                width: cc.case.width,
                height: cc.case.height,
                preds: cc
                    .predictions
                    .iter()
                    .zip(cc.verdicts)
                    .map(|(p, v)| (p.bbox, p.confidence, coherence_category(v.decision)))
                    .collect(),
                gts,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let suite = evaluate_scored(&scored, 2);
    Ok(APReport {
        mode: ApMode::Coherence,
        ap: suite.ap,
        ap50: suite.ap50,
        ap75: suite.ap75,
        ap_m: suite.ap_m,
        ap_l: suite.ap_l,
        ap_add: None,
        ap_rem: None,
        ap_edit: None,
        ap_coherent: suite.per_category[COHERENT],
        ap_non_coherent: suite.per_category[NON_COHERENT],
    })
}
