//! Evaluation metrics for grasps, detections and manipulation relations.
//!
//! * Rectangle metric: a predicted grasp is correct when its rotated Jaccard
//!   index with some ground-truth grasp is strictly above 0.25 and the
//!   orientation differs by at most 30°.
//! * Detection mAP: all-points interpolated AP at IoU 0.5, averaged over the
//!   classes that appear in the ground truth.
//! * OR / OP / IA: object-based recall, macro precision over the three
//!   relation kinds, and whole-image accuracy.
//!
//! Relations are scored once per unordered pair in canonical (min id → max
//! id) direction of the ground-truth ids.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geometry::{aabb_iou, grasp_angle_diff, jaccard_rotated};
use crate::scene::{GraspRect, ObjectBox, ObjectId, Relation, RelationKind, SceneAnnotation};

pub const GRASP_JACCARD_THRESHOLD: f64 = 0.25;
pub const GRASP_ANGLE_THRESHOLD_DEG: f64 = 30.0;
pub const DETECTION_IOU_THRESHOLD: f64 = 0.5;

/// Rectangle metric against every ground-truth grasp of one object.
pub fn grasp_match(pred: &GraspRect, gts: &[GraspRect]) -> bool {
    gts.iter().any(|gt| {
        pred.cls == gt.cls
            && grasp_angle_diff(pred.theta_deg, gt.theta_deg) <= GRASP_ANGLE_THRESHOLD_DEG
            && jaccard_rotated(pred, gt) > GRASP_JACCARD_THRESHOLD
    })
}

/// Prediction order: descending score, then input position.
fn score_order(preds: &[ObjectBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    idx
}

/// Greedy matching: each prediction, by descending score, takes the
/// unmatched same-class ground truth with the highest IoU at or above
/// `iou_thresh`.
///
/// Returns `(prediction index, matched ground-truth index)` in prediction
/// input order.
pub fn match_detections(preds: &[ObjectBox], gts: &[ObjectBox], iou_thresh: f64) -> Vec<(usize, Option<usize>)> {
    let mut taken = vec![false; gts.len()];
    let mut result = vec![None; preds.len()];
    for p in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.cls != preds[p].cls {
                continue;
            }
            let iou = aabb_iou(&preds[p], gt);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            result[p] = Some(g);
        }
    }
    result.into_iter().enumerate().collect()
}

/// All-points interpolated average precision from score-ranked hits.
///
/// `ranked` holds `(score, is_true_positive)`; `n_gt` is the number of
/// ground-truth instances of the class.
pub fn average_precision(ranked: &mut [(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for (k, &(_, hit)) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Precision envelope, monotone non-increasing from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub per_class_ap: BTreeMap<u32, f64>,
}

/// Detection mAP at IoU 0.5 over `(predictions, ground truth)` per scene.
pub fn detection_map(scenes: &[(Vec<ObjectBox>, Vec<ObjectBox>)]) -> MapResult {
    let mut hits: BTreeMap<u32, Vec<(f64, bool)>> = BTreeMap::new();
    let mut n_gt: BTreeMap<u32, usize> = BTreeMap::new();
    for (preds, gts) in scenes {
        for gt in gts {
            *n_gt.entry(gt.cls).or_default() += 1;
        }
        for (p, m) in match_detections(preds, gts, DETECTION_IOU_THRESHOLD) {
            hits.entry(preds[p].cls).or_default().push((preds[p].score, m.is_some()));
        }
    }
    let per_class_ap: BTreeMap<u32, f64> = n_gt
        .iter()
        .map(|(&cls, &n)| {
            let mut ranked = hits.remove(&cls).unwrap_or_default();
            (cls, average_precision(&mut ranked, n))
        })
        .collect();
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    MapResult { map, per_class_ap }
}

/// Model output for one scene, in prediction ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenePrediction {
    pub objects: Vec<ObjectBox>,
    pub grasps: Vec<GraspRect>,
    /// Symmetrized relations between predicted objects (any direction).
    pub relations: Vec<Relation>,
}

impl ScenePrediction {
    /// Ground truth presented as a perfect prediction.
    pub fn from_ground_truth(scene: &SceneAnnotation) -> Self {
        Self {
            objects: scene.objects.clone(),
            grasps: scene.grasps.iter().map(|g| g.rect).collect(),
            relations: scene.relations.clone(),
        }
    }

    fn relation(&self, a: ObjectId, b: ObjectId) -> RelationKind {
        self.relations
            .iter()
            .find_map(|r| r.oriented(a, b))
            .unwrap_or(RelationKind::NoRel)
    }
}

#[derive(Debug, Clone)]
pub struct EvalScene<'a> {
    pub gt: &'a SceneAnnotation,
    pub pred: &'a ScenePrediction,
}

/// Per-scene relation bookkeeping shared by OR, OP and IA.
#[derive(Debug, Default, Clone)]
struct RelationTally {
    gt_pairs: usize,
    correct_pairs: usize,
    /// Per kind: (correct predictions, total predictions).
    predicted: [(usize, usize); 3],
    required: [bool; 3],
    all_objects_found: bool,
}

fn tally_scene(scene: &EvalScene<'_>) -> RelationTally {
    let gt = scene.gt;
    let pred = scene.pred;
    let matches = match_detections(&pred.objects, &gt.objects, DETECTION_IOU_THRESHOLD);
    // ground-truth id -> prediction id, and the reverse.
    let mut gt_to_pred: BTreeMap<ObjectId, ObjectId> = BTreeMap::new();
    let mut pred_to_gt: BTreeMap<ObjectId, ObjectId> = BTreeMap::new();
    for (p, g) in matches {
        if let Some(g) = g {
            gt_to_pred.insert(gt.objects[g].id, pred.objects[p].id);
            pred_to_gt.insert(pred.objects[p].id, gt.objects[g].id);
        }
    }

    let mut t = RelationTally {
        all_objects_found: gt.objects.iter().all(|o| gt_to_pred.contains_key(&o.id)),
        ..Default::default()
    };

    for (a, b) in gt.canonical_pairs() {
        let want = gt.relation_between(a, b).unwrap_or(RelationKind::NoRel);
        t.gt_pairs += 1;
        t.required[want.index()] = true;
        if let (Some(&pa), Some(&pb)) = (gt_to_pred.get(&a), gt_to_pred.get(&b)) {
            if pred.relation(pa, pb) == want {
                t.correct_pairs += 1;
            }
        }
    }

    // Each predicted unordered pair once, oriented by ground-truth ids when matched.
    let mut pred_ids: Vec<ObjectId> = pred.objects.iter().map(|o| o.id).collect();
    pred_ids.sort_unstable();
    pred_ids.dedup();
    for (k, &pa) in pred_ids.iter().enumerate() {
        for &pb in &pred_ids[k + 1..] {
            let (kind, truth) = match (pred_to_gt.get(&pa), pred_to_gt.get(&pb)) {
                (Some(&ga), Some(&gb)) => {
                    let (x, y, gx, gy) = if ga < gb { (pa, pb, ga, gb) } else { (pb, pa, gb, ga) };
                    (pred.relation(x, y), gt.relation_between(gx, gy))
                }
                _ => (pred.relation(pa, pb), None),
            };
            let slot = &mut t.predicted[kind.index()];
            slot.1 += 1;
            if truth == Some(kind) {
                slot.0 += 1;
            }
        }
    }
    t
}

/// Object-based recall over ground-truth pairs.
pub fn relation_or(scenes: &[EvalScene<'_>]) -> f64 {
    let (correct, total) = scenes.iter().map(tally_scene).fold((0, 0), |(c, n), t| (c + t.correct_pairs, n + t.gt_pairs));
    if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    }
}

/// Macro-averaged precision over {On, Under, NoRel}.
///
/// A kind that is never predicted scores 1 if the ground truth never needs
/// it and 0 otherwise.
pub fn relation_op(scenes: &[EvalScene<'_>]) -> f64 {
    let mut predicted = [(0usize, 0usize); 3];
    let mut required = [false; 3];
    for t in scenes.iter().map(tally_scene) {
        for k in 0..3 {
            predicted[k].0 += t.predicted[k].0;
            predicted[k].1 += t.predicted[k].1;
            required[k] |= t.required[k];
        }
    }
    let per_kind = (0..3).map(|k| match predicted[k] {
        (_, 0) if required[k] => 0.0,
        (_, 0) => 1.0,
        (c, n) => c as f64 / n as f64,
    });
    per_kind.sum::<f64>() / 3.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct IaResult {
    pub accuracy: f64,
    pub per_count: BTreeMap<usize, f64>,
}

/// Fraction of scenes where every object is found and every pair is right,
/// plus the same ratio bucketed by ground-truth object count.
pub fn relation_ia(scenes: &[EvalScene<'_>]) -> IaResult {
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for s in scenes {
        let t = tally_scene(s);
        let ok = t.all_objects_found && t.correct_pairs == t.gt_pairs;
        let b = buckets.entry(s.gt.objects.len()).or_default();
        b.1 += 1;
        if ok {
            b.0 += 1;
            correct += 1;
        }
    }
    IaResult {
        accuracy: if scenes.is_empty() { 0.0 } else { correct as f64 / scenes.len() as f64 },
        per_count: buckets.into_iter().map(|(n, (c, t))| (n, c as f64 / t as f64)).collect(),
    }
}

/// Fraction of ground-truth objects whose most confident predicted grasp
/// passes the rectangle metric.
///
/// Candidate grasps for an object share its class and have their center
/// inside its box.
pub fn grasp_accuracy(scenes: &[EvalScene<'_>]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for s in scenes {
        for obj in &s.gt.objects {
            let gts: Vec<GraspRect> = s.gt.grasps_of(obj.id).copied().collect();
            if gts.is_empty() {
                continue;
            }
            total += 1;
            let top = s
                .pred
                .grasps
                .iter()
                .filter(|g| g.cls == obj.cls && obj.contains_point(g.cx, g.cy))
                .max_by(|a, b| a.confidence.total_cmp(&b.confidence));
            if top.is_some_and(|g| grasp_match(g, &gts)) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub or_recall: f64,
    pub op_precision: f64,
    pub ia_accuracy: f64,
    pub grasp_accuracy: f64,
    pub per_class_ap: BTreeMap<u32, f64>,
    pub per_count_ia: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn compute(scenes: &[EvalScene<'_>]) -> Self {
        let det: Vec<_> = scenes.iter().map(|s| (s.pred.objects.clone(), s.gt.objects.clone())).collect();
        let m = detection_map(&det);
        let ia = relation_ia(scenes);
        Self {
            map: m.map,
            or_recall: relation_or(scenes),
            op_precision: relation_op(scenes),
            ia_accuracy: ia.accuracy,
            grasp_accuracy: grasp_accuracy(scenes),
            per_class_ap: m.per_class_ap,
            per_count_ia: ia.per_count,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Console table with mAP / OR / OP / IA columns and IA per object count.
    pub fn table(&self) -> String {
        let pct = |v: f64| format!("{:>6.1}", 100.0 * v);
        let mut s = String::new();
        s.push_str("| mAP (%) | OR (%) | OP (%) | IA (%) | Grasp (%) |\n");
        s.push_str("|---------|--------|--------|--------|-----------|\n");
        s.push_str(&format!(
            "| {}  | {} | {} | {} | {}    |\n",
            pct(self.map),
            pct(self.or_recall),
            pct(self.op_precision),
            pct(self.ia_accuracy),
            pct(self.grasp_accuracy)
        ));
        s.push_str("\nObject number per image\n");
        s.push_str("|   2    |   3    |   4    |   5    |\n");
        s.push_str("|--------|--------|--------|--------|\n");
        let cells: Vec<String> = (2..=5)
            .map(|n| self.per_count_ia.get(&n).map(|&v| pct(v)).unwrap_or_else(|| "   n/a".to_string()))
            .collect();
        s.push_str(&format!("| {} |\n", cells.join(" | ")));
        s
    }
}

/// Distinct classes in a set of boxes.
pub fn classes_of(boxes: &[ObjectBox]) -> BTreeSet<u32> {
    boxes.iter().map(|b| b.cls).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ImageRef, OwnedGrasp};

    fn bx(id: u32, cls: u32, x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> ObjectBox {
        ObjectBox::new(id, cls, x1, y1, x2, y2).with_score(score)
    }

    #[test]
    fn grasp_match_identity_and_class() {
        let g = GraspRect::new(10.0, 10.0, 20.0, 8.0, 15.0, 2);
        assert!(grasp_match(&g, &[g]));
        let other_cls = GraspRect { cls: 3, ..g };
        assert!(!grasp_match(&other_cls, &[g]));
    }

    #[test]
    fn grasp_match_angle_gate() {
        // Same center and shape, rotated by 31 degrees: Jaccard is still high.
        let gt = GraspRect::new(0.0, 0.0, 4.0, 4.0, 0.0, 0);
        let pred = GraspRect::new(0.0, 0.0, 4.0, 4.0, 31.0, 0);
        assert!(jaccard_rotated(&pred, &gt) > 0.5);
        assert!(!grasp_match(&pred, &[gt]));
        let pred = GraspRect::new(0.0, 0.0, 4.0, 4.0, 30.0, 0);
        assert!(grasp_match(&pred, &[gt]));
    }

    #[test]
    fn grasp_match_jaccard_boundary_is_strict() {
        // Two 2x1 rects shifted by 1.2 along x: overlap 0.8, union 3.2 -> exactly 0.25.
        let gt = GraspRect::new(0.0, 0.0, 2.0, 1.0, 0.0, 0);
        let pred = GraspRect::new(1.2, 0.0, 2.0, 1.0, 0.0, 0);
        assert!((jaccard_rotated(&pred, &gt) - 0.25).abs() < 1e-12);
        assert!(!grasp_match(&pred, &[gt]));
    }

    #[test]
    fn detection_matching_rules() {
        let gt = vec![bx(0, 1, 0.0, 0.0, 10.0, 10.0, 1.0)];
        // IoU 0.6: box (0,0,10,6) vs (0,0,10,10) = 60/100.
        let m = match_detections(&[bx(5, 1, 0.0, 0.0, 10.0, 6.0, 0.9)], &gt, 0.5);
        assert_eq!(m, vec![(0, Some(0))]);
        let m = match_detections(
            &[bx(5, 1, 0.0, 0.0, 10.0, 10.0, 0.4), bx(6, 1, 0.0, 0.0, 10.0, 10.0, 0.8)],
            &gt,
            0.5,
        );
        assert_eq!(m, vec![(0, None), (1, Some(0))]);
        // IoU 0.49
        let m = match_detections(&[bx(5, 1, 0.0, 0.0, 10.0, 4.9, 0.9)], &gt, 0.5);
        assert_eq!(m, vec![(0, None)]);
    }

    #[test]
    fn map_examples() {
        let gt = vec![bx(0, 1, 0.0, 0.0, 10.0, 10.0, 1.0)];
        assert_eq!(detection_map(&[(gt.clone(), gt.clone())]).map, 1.0);
        assert_eq!(detection_map(&[(vec![], gt.clone())]).map, 0.0);
        let preds = vec![bx(0, 1, 0.0, 0.0, 10.0, 10.0, 0.9), bx(1, 1, 50.0, 50.0, 60.0, 60.0, 0.8)];
        assert_eq!(detection_map(&[(preds, gt)]).map, 1.0);
    }

    #[test]
    fn ap_with_fp_before_tp() {
        // FP at 0.9, TP at 0.8, one gt: recall 1 reached at precision 0.5.
        let mut r = vec![(0.9, false), (0.8, true)];
        assert!((average_precision(&mut r, 1) - 0.5).abs() < 1e-12);
    }

    fn chain_scene() -> SceneAnnotation {
        SceneAnnotation {
            image: ImageRef::Path("x.png".into()),
            width: 100,
            height: 100,
            objects: vec![
                bx(0, 0, 0.0, 0.0, 20.0, 20.0, 1.0),
                bx(1, 1, 10.0, 10.0, 40.0, 40.0, 1.0),
                bx(2, 2, 30.0, 30.0, 60.0, 60.0, 1.0),
            ],
            grasps: vec![OwnedGrasp {
                owner: 0,
                rect: GraspRect::new(10.0, 10.0, 12.0, 4.0, 0.0, 0),
            }],
            relations: vec![
                Relation::new(0, 1, RelationKind::On),
                Relation::new(0, 2, RelationKind::NoRel),
                Relation::new(1, 2, RelationKind::Under),
            ],
        }
    }

    #[test]
    fn or_counts_pairs() {
        let gt = chain_scene();
        let mut pred = ScenePrediction::from_ground_truth(&gt);
        let s = [EvalScene { gt: &gt, pred: &pred }];
        assert_eq!(relation_or(&s), 1.0);
        assert_eq!(relation_op(&s), 1.0);
        assert_eq!(relation_ia(&s).accuracy, 1.0);
        assert_eq!(grasp_accuracy(&s), 1.0);

        pred.relations[2].kind = RelationKind::On;
        let s = [EvalScene { gt: &gt, pred: &pred }];
        assert!((relation_or(&s) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(relation_ia(&s).accuracy, 0.0);
    }

    #[test]
    fn undetected_object_zeroes_its_pairs() {
        let mut gt = chain_scene();
        gt.objects.truncate(2);
        gt.relations.truncate(1);
        let mut pred = ScenePrediction::from_ground_truth(&gt);
        pred.objects.remove(1);
        let s = [EvalScene { gt: &gt, pred: &pred }];
        assert_eq!(relation_or(&s), 0.0);
        assert_eq!(relation_ia(&s).accuracy, 0.0);
    }

    #[test]
    fn op_single_pair_and_degenerate() {
        let mut gt = chain_scene();
        gt.objects.truncate(2);
        gt.relations.truncate(1);
        let pred = ScenePrediction::from_ground_truth(&gt);
        assert_eq!(relation_op(&[EvalScene { gt: &gt, pred: &pred }]), 1.0);

        // Everything predicted NoRel on the three-object chain.
        let gt = chain_scene();
        let mut pred = ScenePrediction::from_ground_truth(&gt);
        for r in &mut pred.relations {
            r.kind = RelationKind::NoRel;
        }
        // Counting oracle: On required, never predicted -> 0; Under required,
        // never predicted -> 0; NoRel predicted 3 times, 1 correct -> 1/3.
        let op = relation_op(&[EvalScene { gt: &gt, pred: &pred }]);
        assert!((op - (0.0 + 0.0 + 1.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ia_batch_ratio_and_buckets() {
        let gt = chain_scene();
        let good = ScenePrediction::from_ground_truth(&gt);
        let mut bad = good.clone();
        bad.relations[0].kind = RelationKind::NoRel;
        let s = [
            EvalScene { gt: &gt, pred: &good },
            EvalScene { gt: &gt, pred: &good },
            EvalScene { gt: &gt, pred: &bad },
            EvalScene { gt: &gt, pred: &good },
        ];
        let ia = relation_ia(&s);
        assert_eq!(ia.accuracy, 0.75);
        assert_eq!(ia.per_count, BTreeMap::from([(3, 0.75)]));
    }

    #[test]
    fn report_json_keys() {
        let gt = chain_scene();
        let pred = ScenePrediction::from_ground_truth(&gt);
        let r = EvalReport::compute(&[EvalScene { gt: &gt, pred: &pred }]);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: BTreeSet<_> = v.as_object().unwrap().keys().cloned().collect();
        let expected: BTreeSet<String> = [
            "map",
            "or_recall",
            "op_precision",
            "ia_accuracy",
            "grasp_accuracy",
            "per_class_ap",
            "per_count_ia",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(keys, expected);
        assert!(r.table().contains("OR (%)"));
    }
}
