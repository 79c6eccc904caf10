//! Center-distance average precision and the toy mAP aggregate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DynafuseError, Result};
use crate::head::{BevBox, Instance};

pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
const RECALL_POINTS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApCell {
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// (class, threshold index) -> AP and counts; absent when the class has
    /// no ground truth anywhere
    pub cells: BTreeMap<usize, Vec<Option<ApCell>>>,
    pub map: f64,
}

/// Match events for one (class, threshold) across pooled scenes: score and
/// whether the prediction claimed a ground-truth box.
fn match_events(
    preds: &[Vec<Instance>],
    gts: &[Vec<BevBox>],
    class_id: usize,
    dist_thresh: f64,
) -> (Vec<(f64, bool)>, usize) {
    let mut events = Vec::new();
    let mut n_gt = 0;
    for (scene_preds, scene_gts) in preds.iter().zip(gts.iter()) {
        let gt: Vec<&BevBox> = scene_gts.iter().filter(|g| g.class_id == class_id).collect();
        n_gt += gt.len();
        let mut claimed = vec![false; gt.len()];
        let mut ordered: Vec<&Instance> = scene_preds
            .iter()
            .filter(|p| p.bbox.class_id == class_id)
            .collect();
        ordered.sort_by(|a, b| b.bbox.score.partial_cmp(&a.bbox.score).unwrap());
        for p in ordered {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gt.iter().enumerate() {
                if claimed[i] {
                    continue;
                }
                let d = ((p.bbox.cx - g.cx).powi(2) + (p.bbox.cy - g.cy).powi(2)).sqrt();
                if d <= dist_thresh && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            match best {
                Some((i, _)) => {
                    claimed[i] = true;
                    events.push((p.bbox.score, true));
                }
                None => events.push((p.bbox.score, false)),
            }
        }
    }
    (events, n_gt)
}

fn ap_from_events(mut events: Vec<(f64, bool)>, n_gt: usize) -> ApCell {
    events.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(events.len()); // (recall, precision)
    for (_, is_tp) in &events {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = tp as f64 / n_gt as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        curve.push((recall, precision));
    }
    // monotone envelope: precision at recall r is the max precision at any
    // recall >= r, sampled on an even 40-point recall grid
    let mut ap = 0.0;
    for i in 0..RECALL_POINTS {
        let r = (i + 1) as f64 / RECALL_POINTS as f64;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, prec)| *prec)
            .fold(0.0f64, f64::max);
        ap += p;
    }
    ApCell {
        ap: ap / RECALL_POINTS as f64,
        tp,
        fp,
        fn_: n_gt - tp,
    }
}

/// AP for one class at one center-distance threshold over a single scene.
/// Returns None when the scene has no ground truth of the class.
pub fn average_precision(
    preds: &[Instance],
    gts: &[BevBox],
    class_id: usize,
    dist_thresh: f64,
) -> Result<Option<f64>> {
    if dist_thresh <= 0.0 {
        return Err(DynafuseError::invalid("distance threshold must be positive"));
    }
    let (events, n_gt) = match_events(
        std::slice::from_ref(&preds.to_vec()),
        std::slice::from_ref(&gts.to_vec()),
        class_id,
        dist_thresh,
    );
    if n_gt == 0 {
        return Ok(None);
    }
    Ok(Some(ap_from_events(events, n_gt).ap))
}

/// Pooled AP per class per threshold over matched scene lists, plus the
/// mean over every defined cell.
pub fn toy_map(preds_by_scene: &[Vec<Instance>], gts_by_scene: &[Vec<BevBox>]) -> Result<EvalResult> {
    if preds_by_scene.len() != gts_by_scene.len() {
        return Err(DynafuseError::invalid(format!(
            "{} prediction scenes vs {} ground-truth scenes",
            preds_by_scene.len(),
            gts_by_scene.len()
        )));
    }
    let mut classes: Vec<usize> = gts_by_scene
        .iter()
        .flat_map(|s| s.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut cells = BTreeMap::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for &k in &classes {
        let mut row = Vec::with_capacity(DIST_THRESHOLDS.len());
        for &t in &DIST_THRESHOLDS {
            let (events, n_gt) = match_events(preds_by_scene, gts_by_scene, k, t);
            if n_gt == 0 {
                row.push(None);
            } else {
                let cell = ap_from_events(events, n_gt);
                sum += cell.ap;
                count += 1;
                row.push(Some(cell));
            }
        }
        cells.insert(k, row);
    }
    let map = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(EvalResult { cells, map })
}

impl EvalResult {
    /// CSV with one row per class, a column per distance threshold, and a
    /// trailing mAP summary row. Fixed 6-decimal formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,ap_0.5m,ap_1m,ap_2m,ap_4m\n");
        for (k, row) in &self.cells {
            out.push_str(&k.to_string());
            for cell in row {
                match cell {
                    Some(c) => out.push_str(&format!(",{:.6}", c.ap)),
                    None => out.push_str(",nan"),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("mAP,{:.6},,,\n", self.map));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(class_id: usize, cx: f64, cy: f64, score: f64) -> Instance {
        Instance {
            bbox: BevBox {
                class_id,
                cx,
                cy,
                length: 4.0,
                width: 2.0,
                yaw: 0.0,
                score,
            },
            class_scores: vec![],
            row: 0,
            col: 0,
            matched_gt: None,
            quality: 0.0,
            weight: 1.0,
        }
    }

    fn gt(class_id: usize, cx: f64, cy: f64) -> BevBox {
        BevBox {
            class_id,
            cx,
            cy,
            length: 4.0,
            width: 2.0,
            yaw: 0.0,
            score: 1.0,
        }
    }

    #[test]
    fn single_hit_is_perfect() {
        let preds = vec![inst(0, 1.0, 1.0, 0.9)];
        let gts = vec![gt(0, 1.2, 1.0)];
        let ap = average_precision(&preds, &gts, 0, 1.0).unwrap().unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_predictions_zero_ap() {
        let gts = vec![gt(1, 0.0, 0.0)];
        let ap = average_precision(&[], &gts, 1, 2.0).unwrap().unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn no_gt_is_undefined() {
        let preds = vec![inst(0, 0.0, 0.0, 0.5)];
        assert!(average_precision(&preds, &[], 0, 2.0).unwrap().is_none());
    }

    #[test]
    fn trailing_low_score_fp_keeps_ap_at_one() {
        // recall hits 1.0 before the false positive, so the monotone
        // envelope keeps precision 1.0 everywhere
        let preds = vec![inst(0, 0.0, 0.0, 0.9), inst(0, 9.0, 9.0, 0.1)];
        let gts = vec![gt(0, 0.1, 0.0)];
        let ap = average_precision(&preds, &gts, 0, 1.0).unwrap().unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn leading_fp_halves_precision_shape() {
        // FP at high score, TP after: precision at full recall is 1/2
        let preds = vec![inst(0, 9.0, 9.0, 0.9), inst(0, 0.0, 0.0, 0.5)];
        let gts = vec![gt(0, 0.0, 0.0)];
        let ap = average_precision(&preds, &gts, 0, 1.0).unwrap().unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn half_recall_hand_curve() {
        // two GT, one matched at precision 1: envelope gives 1.0 on the
        // first 20 recall points and 0 after -> AP 0.5
        let preds = vec![inst(0, 0.0, 0.0, 0.9)];
        let gts = vec![gt(0, 0.0, 0.0), gt(0, 5.0, 5.0)];
        let ap = average_precision(&preds, &gts, 0, 1.0).unwrap().unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_give_map_one() {
        let gts = vec![vec![gt(0, 0.0, 0.0), gt(1, 3.0, 3.0)], vec![gt(0, -2.0, 4.0)]];
        let preds: Vec<Vec<Instance>> = gts
            .iter()
            .map(|s| s.iter().map(|g| inst(g.class_id, g.cx, g.cy, 0.8)).collect())
            .collect();
        let r = toy_map(&preds, &gts).unwrap();
        assert!((r.map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_predictions_give_map_zero() {
        let gts = vec![vec![gt(0, 0.0, 0.0)]];
        let preds = vec![vec![]];
        let r = toy_map(&preds, &gts).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.cells[&0][0].unwrap().fn_, 1);
    }

    #[test]
    fn single_scene_map_decomposes_into_ap_cells() {
        let gts = vec![vec![gt(0, 0.0, 0.0), gt(1, 4.0, -2.0)]];
        let preds = vec![vec![inst(0, 0.6, 0.0, 0.9), inst(1, 4.0, -1.0, 0.7), inst(0, 8.0, 8.0, 0.2)]];
        let r = toy_map(&preds, &gts).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for k in [0usize, 1] {
            for &t in &DIST_THRESHOLDS {
                if let Some(ap) = average_precision(&preds[0], &gts[0], k, t).unwrap() {
                    sum += ap;
                    n += 1;
                }
            }
        }
        assert!((r.map - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn scene_count_mismatch_rejected() {
        assert!(toy_map(&[vec![]], &[]).is_err());
        assert!(average_precision(&[], &[], 0, 0.0).is_err());
    }

    #[test]
    fn score_order_only_dependence() {
        let gts = vec![vec![gt(0, 0.0, 0.0), gt(0, 6.0, 0.0)]];
        let preds = vec![vec![inst(0, 0.2, 0.0, 0.9), inst(0, 9.0, 9.0, 0.5), inst(0, 6.1, 0.0, 0.3)]];
        let squashed: Vec<Vec<Instance>> = preds
            .iter()
            .map(|s| {
                s.iter()
                    .map(|p| {
                        let mut q = p.clone();
                        q.bbox.score = (p.bbox.score * 3.0).exp(); // strictly monotone
                        q
                    })
                    .collect()
            })
            .collect();
        let a = toy_map(&preds, &gts).unwrap();
        let b = toy_map(&squashed, &gts).unwrap();
        assert!((a.map - b.map).abs() < 1e-12);
    }

    #[test]
    fn removing_a_false_positive_never_hurts() {
        let gts = vec![vec![gt(0, 0.0, 0.0)]];
        let with_fp = vec![vec![inst(0, 9.0, 9.0, 0.9), inst(0, 0.0, 0.0, 0.5)]];
        let without = vec![vec![inst(0, 0.0, 0.0, 0.5)]];
        let a = toy_map(&with_fp, &gts).unwrap();
        let b = toy_map(&without, &gts).unwrap();
        assert!(b.map >= a.map - 1e-12);
    }

    #[test]
    fn csv_shape_and_fixed_formatting() {
        let gts = vec![vec![gt(0, 0.0, 0.0)]];
        let preds = vec![vec![inst(0, 0.0, 0.0, 0.9)]];
        let r = toy_map(&preds, &gts).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], "class,ap_0.5m,ap_1m,ap_2m,ap_4m");
        assert_eq!(lines[1], "0,1.000000,1.000000,1.000000,1.000000");
        assert!(lines[2].starts_with("mAP,1.000000"));
    }
}
