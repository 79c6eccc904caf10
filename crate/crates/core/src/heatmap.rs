//! Center-point heatmap rendering and the penalty-reduced Gaussian focal
//! loss used for heatmap supervision.

use serde::{Deserialize, Serialize};

use crate::error::{DynafuseError, Result};
use crate::grid::GridSpec;
use crate::head::BevBox;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Prediction clamp keeping log terms finite.
pub const P_MIN: f64 = 1e-4;
/// Radius-rule overlap used when rendering ground-truth heatmaps.
pub const MIN_OVERLAP: f64 = 0.1;
/// Floor on the Gaussian width in cells.
pub const SIGMA_MIN: f64 = 0.8;

/// Per-class K x H x W map with values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(classes: usize, height: usize, width: usize) -> Heatmap {
        Heatmap {
            classes,
            height,
            width,
            data: vec![0.0; classes * height * width],
        }
    }

    #[inline]
    pub fn get(&self, k: usize, h: usize, w: usize) -> f64 {
        self.data[(k * self.height + h) * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, k: usize, h: usize, w: usize, v: f64) {
        self.data[(k * self.height + h) * self.width + w] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.classes, self.height, self.width],
            data: self.data.clone(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Heatmap {
        Heatmap {
            classes: t.shape[0],
            height: t.shape[1],
            width: t.shape[2],
            data: t.data.clone(),
        }
    }
}

/// Smallest keypoint radius (in cells) keeping IoU >= `min_overlap` for the
/// three standard displacement cases, i.e. the CornerNet radius rule with
/// exact quadratic roots.
pub fn keypoint_radius(width_cells: f64, height_cells: f64, min_overlap: f64) -> f64 {
    let (w, h) = (width_cells, height_cells);
    let o = min_overlap;

    let a1 = 1.0;
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 - (b1 * b1 - 4.0 * a1 * c1).max(0.0).sqrt()) / (2.0 * a1);

    let a2 = 4.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 - (b2 * b2 - 4.0 * a2 * c2).max(0.0).sqrt()) / (2.0 * a2);

    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / (2.0 * a3);

    r1.min(r2).min(r3)
}

/// Gaussian width sigma_b (cells) for a box of the given metric dimensions.
pub fn gaussian_radius(box_l: f64, box_w: f64, spec: &GridSpec, min_overlap: f64) -> f64 {
    let wc = box_w / spec.cell_size;
    let hc = box_l / spec.cell_size;
    (keypoint_radius(wc, hc, min_overlap) / 3.0).max(SIGMA_MIN)
}

/// Render the ground-truth heatmap: a Gaussian bump per box, exactly 1 at
/// each center cell, overlaps combined by max. Returns the heatmap and the
/// number of out-of-range boxes that were skipped.
pub fn render_gt_heatmap(
    boxes: &[BevBox],
    spec: &GridSpec,
    classes: usize,
) -> Result<(Heatmap, usize)> {
    if classes == 0 {
        return Err(DynafuseError::invalid("heatmap needs at least one class"));
    }
    let (rows, cols) = (spec.n_rows(), spec.n_cols());
    let mut hm = Heatmap::zeros(classes, rows, cols);
    let mut skipped = 0usize;
    for b in boxes {
        if !spec.contains(b.cx, b.cy) || b.class_id >= classes {
            skipped += 1;
            continue;
        }
        let (cx, cy) = spec.world_to_cell(b.cx, b.cy);
        let sigma = gaussian_radius(b.length, b.width, spec, MIN_OVERLAP);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for r in 0..rows {
            for c in 0..cols {
                let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                let v = (-d2 * inv).exp();
                if v > hm.get(b.class_id, r, c) {
                    hm.set(b.class_id, r, c, v);
                }
            }
        }
        let cc = cx.round().clamp(0.0, (cols - 1) as f64) as usize;
        let cr = cy.round().clamp(0.0, (rows - 1) as f64) as usize;
        hm.set(b.class_id, cr, cc, 1.0);
    }
    Ok((hm, skipped))
}

/// Penalty-reduced focal loss for Gaussian heatmap targets:
/// L = -(1/N_pos) sum_i [ y=1: (1-p)^2 ln p ; else: (1-y)^4 p^2 ln(1-p) ].
pub fn gaussian_focal_loss(pred: &Heatmap, target: &Heatmap) -> Result<f64> {
    if (pred.classes, pred.height, pred.width) != (target.classes, target.height, target.width) {
        return Err(DynafuseError::ShapeMismatch {
            expected: format!("{}x{}x{}", target.classes, target.height, target.width),
            got: format!("{}x{}x{}", pred.classes, pred.height, pred.width),
        });
    }
    let mut tape = Tape::new();
    let p = tape.leaf(pred.to_tensor());
    let loss = gfl_on_tape(&mut tape, p, &target.to_tensor());
    Ok(tape.value(loss).item())
}

/// Tape-level Gaussian focal loss; `pred` holds raw probabilities (they are
/// clamped here), `target` is a constant.
pub fn gfl_on_tape(tape: &mut Tape, pred: Var, target: &Tensor) -> Var {
    let shape = target.shape.clone();
    assert_eq!(tape.value(pred).shape, shape, "gfl shape mismatch");
    let mut pos_mask = Tensor::zeros(&shape);
    let mut neg_weight = Tensor::zeros(&shape);
    let mut n_pos = 0usize;
    for (i, &y) in target.data.iter().enumerate() {
        if y >= 1.0 {
            pos_mask.data[i] = 1.0;
            n_pos += 1;
        } else {
            neg_weight.data[i] = (1.0 - y).powi(4);
        }
    }
    let n_pos = n_pos.max(1) as f64;

    let p = tape.clamp(pred, P_MIN, 1.0 - P_MIN);
    let ln_p = tape.ln(p);
    let neg_p = tape.neg(p);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let ln_1mp = tape.ln(one_minus_p);

    let omp2 = tape.square(one_minus_p);
    let pos = tape.mul(omp2, ln_p);
    let pos = tape.mul_const(pos, &pos_mask);

    let p2 = tape.square(p);
    let neg = tape.mul(p2, ln_1mp);
    let neg = tape.mul_const(neg, &neg_weight);

    let pos_sum = tape.sum(pos);
    let neg_sum = tape.sum(neg);
    let total = tape.add(pos_sum, neg_sum);
    tape.scale(total, -1.0 / n_pos)
}
