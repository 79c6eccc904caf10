//! Toy detection head: box decoding from class/regression maps, BEV IoU,
//! greedy instance matching, and the instance-quality weighting.

use serde::{Deserialize, Serialize};

use crate::grid::GridSpec;
use crate::tensor::Tensor;

/// Normalization scale for center offsets, meters.
pub const D_MAX: f64 = 8.0;
/// Focal loss focusing exponent for classification.
pub const FOCAL_GAMMA: f64 = 2.0;
/// Default matching radius, meters.
pub const MATCH_RADIUS: f64 = 2.0;

/// Ground-truth or predicted BEV box. `length` extends along x, `width`
/// along y; yaw is stored but ignored by the axis-aligned IoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
    #[serde(default = "default_score")]
    pub score: f64,
}

fn default_score() -> f64 {
    1.0
}

/// Decoded prediction with its source cell and matching state.
#[derive(Debug, Clone)]
pub struct Instance {
    pub bbox: BevBox,
    pub class_scores: Vec<f64>,
    pub row: usize,
    pub col: usize,
    pub matched_gt: Option<usize>,
    pub quality: f64,
    pub weight: f64,
}

/// Adaptive-learning mode of the quality index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AltMode {
    None,
    Cls,
    Iou,
    Both,
}

/// Decode instances from a class-probability map [K,H,W] and a regression
/// map [4,H,W] (dcx, dcy in meters; log-length, log-width). Peaks are
/// strict 3x3 local maxima; output is ordered by score descending then
/// cell index.
pub fn decode_instances(
    cls_probs: &Tensor,
    reg: &Tensor,
    spec: &GridSpec,
    top_k: usize,
    score_thresh: f64,
) -> Vec<Instance> {
    let (k, h, w) = (cls_probs.shape[0], cls_probs.shape[1], cls_probs.shape[2]);
    let mut peaks: Vec<(f64, usize, usize, usize)> = Vec::new();
    for ki in 0..k {
        for r in 0..h {
            for c in 0..w {
                let v = cls_probs.at3(ki, r, c);
                if v <= score_thresh {
                    continue;
                }
                let mut is_peak = true;
                'nb: for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        if cls_probs.at3(ki, nr as usize, nc as usize) >= v {
                            is_peak = false;
                            break 'nb;
                        }
                    }
                }
                if is_peak {
                    peaks.push((v, ki, r, c));
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then((a.2 * w + a.3).cmp(&(b.2 * w + b.3)))
            .then(a.1.cmp(&b.1))
    });
    peaks.truncate(top_k);
    peaks
        .into_iter()
        .map(|(score, ki, r, c)| {
            let (x0, y0) = spec.cell_to_world(c as f64, r as f64);
            let bbox = BevBox {
                class_id: ki,
                cx: x0 + reg.at3(0, r, c),
                cy: y0 + reg.at3(1, r, c),
                length: reg.at3(2, r, c).exp(),
                width: reg.at3(3, r, c).exp(),
                yaw: 0.0,
                score,
            };
            Instance {
                bbox,
                class_scores: (0..k).map(|q| cls_probs.at3(q, r, c)).collect(),
                row: r,
                col: c,
                matched_gt: None,
                quality: 0.0,
                weight: 1.0,
            }
        })
        .collect()
}

/// Axis-aligned BEV IoU from centers and sizes; yaw is ignored.
pub fn bev_iou(a: &BevBox, b: &BevBox) -> f64 {
    let ix = overlap_1d(a.cx, a.length, b.cx, b.length);
    let iy = overlap_1d(a.cy, a.width, b.cy, b.width);
    let inter = ix * iy;
    let union = a.length * a.width + b.length * b.width - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn overlap_1d(c1: f64, e1: f64, c2: f64, e2: f64) -> f64 {
    let lo = (c1 - e1 / 2.0).max(c2 - e2 / 2.0);
    let hi = (c1 + e1 / 2.0).min(c2 + e2 / 2.0);
    (hi - lo).max(0.0)
}

/// Greedy one-to-one matching: predictions in score order claim the nearest
/// unclaimed same-class ground truth within `radius` meters. Sets
/// `matched_gt` on each instance.
pub fn match_instances(preds: &mut [Instance], gts: &[BevBox], radius: f64) {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .bbox
            .score
            .partial_cmp(&preds[a].bbox.score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; gts.len()];
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if claimed[gi] || g.class_id != p.bbox.class_id {
                continue;
            }
            let d = ((p.bbox.cx - g.cx).powi(2) + (p.bbox.cy - g.cy).powi(2)).sqrt();
            if d <= radius && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, gi));
            }
        }
        if let Some((_, gi)) = best {
            claimed[gi] = true;
            preds[pi].matched_gt = Some(gi);
        }
    }
}

/// Quality index phi = c * iou^eta and its exponential learning weight.
pub fn instance_quality(c: f64, iou: f64, eta: f64) -> (f64, f64) {
    let phi = c * iou.powf(eta);
    (phi, phi.exp())
}

/// Focal classification loss over the per-class score vector, mean over
/// classes; scores are clamped to (p_min, 1 - p_min).
pub fn focal_cls_loss(pred_scores: &[f64], target_class: usize, gamma: f64) -> f64 {
    let pmin = crate::heatmap::P_MIN;
    let mut total = 0.0;
    for (k, &p) in pred_scores.iter().enumerate() {
        let p = p.clamp(pmin, 1.0 - pmin);
        if k == target_class {
            total += -(1.0 - p).powf(gamma) * p.ln();
        } else {
            total += -p.powf(gamma) * (1.0 - p).ln();
        }
    }
    total / pred_scores.len() as f64
}

/// Mean absolute error over (cx, cy, length, width) in normalized units:
/// centers divided by D_MAX, sizes compared as log ratios.
pub fn l1_loc_loss(b: &BevBox, gt: &BevBox) -> f64 {
    let terms = [
        (b.cx - gt.cx).abs() / D_MAX,
        (b.cy - gt.cy).abs() / D_MAX,
        (b.length.ln() - gt.length.ln()).abs(),
        (b.width.ln() - gt.width.ln()).abs(),
    ];
    terms.iter().sum::<f64>() / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(class_id: usize, cx: f64, cy: f64, l: f64, w: f64, score: f64) -> BevBox {
        BevBox {
            class_id,
            cx,
            cy,
            length: l,
            width: w,
            yaw: 0.0,
            score,
        }
    }

    #[test]
    fn iou_identical_boxes() {
        let a = bx(0, 1.0, 2.0, 3.0, 2.0, 1.0);
        assert_eq!(bev_iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_boxes() {
        let a = bx(0, 0.0, 0.0, 2.0, 2.0, 1.0);
        let b = bx(0, 10.0, 0.0, 2.0, 2.0, 1.0);
        assert_eq!(bev_iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_hand_case_one_third() {
        // [0,2]^2 vs [1,3]x[0,2]: inter 2, union 6
        let a = bx(0, 1.0, 1.0, 2.0, 2.0, 1.0);
        let b = bx(0, 2.0, 1.0, 2.0, 2.0, 1.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn quality_hand_cases() {
        let (phi, w) = instance_quality(1.0, 1.0, 1.0);
        assert!((phi - 1.0).abs() < 1e-12 && (w - std::f64::consts::E).abs() < 1e-12);
        let (phi, w) = instance_quality(0.0, 0.7, 1.0);
        assert_eq!((phi, w), (0.0, 1.0));
        let (phi, w) = instance_quality(0.8, 0.5, 1.0);
        assert!((phi - 0.4).abs() < 1e-12);
        assert!((w - 0.4f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn focal_loss_hand_case() {
        let l = focal_cls_loss(&[0.5], 0, FOCAL_GAMMA);
        assert!((l - 0.25 * 2.0f64.ln()).abs() < 1e-12);
        // near-perfect confidence is near zero
        assert!(focal_cls_loss(&[1.0], 0, FOCAL_GAMMA) < 1e-3);
        // monotone decreasing in p_t
        assert!(focal_cls_loss(&[0.3], 0, FOCAL_GAMMA) > focal_cls_loss(&[0.6], 0, FOCAL_GAMMA));
    }

    #[test]
    fn loc_loss_hand_case() {
        let a = bx(0, 0.8, 0.0, 2.0, 2.0, 1.0);
        let b = bx(0, 0.0, 0.0, 2.0, 2.0, 1.0);
        assert!((l1_loc_loss(&a, &b) - 0.025).abs() < 1e-12);
        assert_eq!(l1_loc_loss(&a, &b), l1_loc_loss(&b, &a));
        assert_eq!(l1_loc_loss(&a, &a), 0.0);
    }

    #[test]
    fn greedy_match_higher_score_wins() {
        let gts = vec![bx(0, 0.0, 0.0, 2.0, 2.0, 1.0)];
        let mk = |score: f64| Instance {
            bbox: bx(0, 0.1, 0.0, 2.0, 2.0, score),
            class_scores: vec![score],
            row: 0,
            col: 0,
            matched_gt: None,
            quality: 0.0,
            weight: 1.0,
        };
        let mut preds = vec![mk(0.4), mk(0.9)];
        match_instances(&mut preds, &gts, MATCH_RADIUS);
        assert_eq!(preds[1].matched_gt, Some(0));
        assert_eq!(preds[0].matched_gt, None);
    }

    #[test]
    fn match_respects_radius_and_class() {
        let gts = vec![bx(1, 0.0, 0.0, 2.0, 2.0, 1.0), bx(0, 50.0, 0.0, 2.0, 2.0, 1.0)];
        let mut preds = vec![Instance {
            bbox: bx(0, 0.0, 0.0, 2.0, 2.0, 0.9),
            class_scores: vec![0.9, 0.1],
            row: 0,
            col: 0,
            matched_gt: None,
            quality: 0.0,
            weight: 1.0,
        }];
        match_instances(&mut preds, &gts, MATCH_RADIUS);
        assert_eq!(preds[0].matched_gt, None);
    }

    #[test]
    fn phi_ordering_follows_confidence_at_fixed_iou() {
        let iou = 0.63;
        let cs = [0.1, 0.4, 0.2, 0.9];
        let mut phis: Vec<f64> = cs.iter().map(|&c| instance_quality(c, iou, 1.0).0).collect();
        let mut order: Vec<usize> = (0..cs.len()).collect();
        order.sort_by(|&a, &b| phis[a].partial_cmp(&phis[b]).unwrap());
        let mut corder: Vec<usize> = (0..cs.len()).collect();
        corder.sort_by(|&a, &b| cs[a].partial_cmp(&cs[b]).unwrap());
        assert_eq!(order, corder);
        phis.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(phis.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn decode_respects_top_k_and_threshold() {
        let spec = GridSpec::desk_default();
        let mut cls = Tensor::zeros(&[1, spec.n_rows(), spec.n_cols()]);
        for v in cls.data.iter_mut() {
            *v = 0.5;
        }
        let reg = Tensor::zeros(&[4, spec.n_rows(), spec.n_cols()]);
        // flat map has no strict maxima; with threshold 0.6 it is empty anyway
        assert!(decode_instances(&cls, &reg, &spec, 10, 0.6).is_empty());
        // one synthetic peak
        *cls.at3_mut(0, 10, 12) = 0.9;
        let out = decode_instances(&cls, &reg, &spec, 10, 0.6);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].row, out[0].col), (10, 12));
        assert!(out.len() <= 10);
    }
}
