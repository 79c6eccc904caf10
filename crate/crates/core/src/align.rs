//! Triphase domain aligning: per-modality encoders, modal heatmap heads,
//! and the combined L1 + dual Gaussian-focal objective.

use serde::{Deserialize, Serialize};

use crate::error::{DynafuseError, Result};
use crate::params::{AlignEncoderParams, ConvParams, ParamRegistry};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for AlignLossWeights {
    fn default() -> Self {
        // modality-pair vs heatmap supervision weighted 1:10
        AlignLossWeights {
            lambda1: 0.1,
            lambda2: 1.0,
        }
    }
}

/// Stack of shape-preserving 3x3 convolutions; rectifier between layers,
/// last layer linear.
pub fn align_encode(
    tape: &mut Tape,
    reg: &mut ParamRegistry,
    name: &str,
    input: Var,
    params: &AlignEncoderParams,
) -> Result<Var> {
    let in_c = tape.value(input).shape[0];
    for l in &params.layers {
        if l.kernel.shape[1] != in_c {
            return Err(DynafuseError::invalid(format!(
                "align encoder expects {} channels, input has {in_c}",
                l.kernel.shape[1]
            )));
        }
    }
    let n = params.layers.len();
    let mut x = input;
    for (i, l) in params.layers.iter().enumerate() {
        let (k, b) = reg.leaf_conv(tape, &format!("{name}.{i}"), l);
        x = tape.conv2d(x, k, b);
        if i + 1 < n {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// 1x1 conv + logistic squashing into a per-class map in (0, 1).
pub fn modal_heatmap_head(
    tape: &mut Tape,
    reg: &mut ParamRegistry,
    name: &str,
    feat: Var,
    head: &ConvParams,
) -> Var {
    let (k, b) = reg.leaf_conv(tape, name, head);
    let logits = tape.conv2d(feat, k, b);
    tape.sigmoid(logits)
}

/// L_t = lambda1 * mean|Fx - Fy| + lambda2 * (GFL(Hx, Fg) + GFL(Hy, Fg)).
pub fn triphase_loss_on_tape(
    tape: &mut Tape,
    fx: Var,
    fy: Var,
    hx: Var,
    hy: Var,
    fg: &Tensor,
    w: &AlignLossWeights,
) -> Result<Var> {
    if tape.value(fx).shape != tape.value(fy).shape {
        return Err(DynafuseError::ShapeMismatch {
            expected: format!("{:?}", tape.value(fx).shape),
            got: format!("{:?}", tape.value(fy).shape),
        });
    }
    if tape.value(hx).shape != fg.shape || tape.value(hy).shape != fg.shape {
        return Err(DynafuseError::ShapeMismatch {
            expected: format!("{:?}", fg.shape),
            got: format!("{:?}", tape.value(hx).shape),
        });
    }
    let diff = tape.sub(fx, fy);
    let adiff = tape.abs(diff);
    let l1 = tape.mean(adiff);
    let l1 = tape.scale(l1, w.lambda1);
    let gx = crate::heatmap::gfl_on_tape(tape, hx, fg);
    let gy = crate::heatmap::gfl_on_tape(tape, hy, fg);
    let g = tape.add(gx, gy);
    let g = tape.scale(g, w.lambda2);
    Ok(tape.add(l1, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::AlignEncoderParams;
    use crate::rng::Rng;

    fn identity_layer(c: usize) -> ConvParams {
        let mut p = ConvParams::zeros(c, c, 3);
        for ci in 0..c {
            // center tap
            p.kernel.data[((ci * c + ci) * 3 + 1) * 3 + 1] = 1.0;
        }
        p
    }

    #[test]
    fn identity_kernels_pass_activation_of_input() {
        let c = 2;
        let params = AlignEncoderParams {
            layers: vec![identity_layer(c), identity_layer(c)],
        };
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::default();
        let mut input = Tensor::zeros(&[c, 3, 3]);
        let mut rng = Rng::new(3);
        for v in input.data.iter_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let x = tape.leaf(input.clone());
        let out = align_encode(&mut tape, &mut reg, "a", x, &params).unwrap();
        // relu after first layer, last linear: output = relu(input)
        let expect = input.map(|v| v.max(0.0));
        assert_eq!(tape.value(out).data, expect.data);
    }

    #[test]
    fn zero_kernels_annihilate() {
        let params = AlignEncoderParams {
            layers: vec![ConvParams::zeros(2, 2, 3)],
        };
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::default();
        let x = tape.leaf(Tensor::full(&[2, 4, 4], 1.3));
        let out = align_encode(&mut tape, &mut reg, "a", x, &params).unwrap();
        assert!(tape.value(out).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_preserved() {
        let mut rng = Rng::new(1);
        let params = AlignEncoderParams::init(&mut rng, 8, 3);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::default();
        let x = tape.leaf(Tensor::full(&[8, 16, 16], 0.2));
        let out = align_encode(&mut tape, &mut reg, "a", x, &params).unwrap();
        assert_eq!(tape.value(out).shape, vec![8, 16, 16]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = Rng::new(1);
        let params = AlignEncoderParams::init(&mut rng, 8, 1);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::default();
        let x = tape.leaf(Tensor::zeros(&[4, 4, 4]));
        assert!(align_encode(&mut tape, &mut reg, "a", x, &params).is_err());
    }

    #[test]
    fn heatmap_head_zero_params_give_half() {
        let head = ConvParams::zeros(2, 3, 1);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::default();
        let x = tape.leaf(Tensor::full(&[3, 2, 2], 0.7));
        let h = modal_heatmap_head(&mut tape, &mut reg, "h", x, &head);
        assert_eq!(tape.value(h).shape, vec![2, 2, 2]);
        assert!(tape.value(h).data.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn heatmap_head_large_bias_saturates() {
        let mut head = ConvParams::zeros(1, 2, 1);
        head.bias.data[0] = 50.0;
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::default();
        let x = tape.leaf(Tensor::zeros(&[2, 2, 2]));
        let h = modal_heatmap_head(&mut tape, &mut reg, "h", x, &head);
        assert!(tape.value(h).data.iter().all(|&v| v > 0.999999));
    }

    #[test]
    fn triphase_identical_features_kill_l1_term() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::full(&[2, 2, 2], 0.3));
        let h = tape.leaf(Tensor::full(&[1, 2, 2], 0.5));
        let fg = Tensor::zeros(&[1, 2, 2]);
        let w = AlignLossWeights::default();
        let total = triphase_loss_on_tape(&mut tape, f, f, h, h, &fg, &w).unwrap();
        let gfl_only = {
            let mut t2 = Tape::new();
            let h2 = t2.leaf(Tensor::full(&[1, 2, 2], 0.5));
            let g = crate::heatmap::gfl_on_tape(&mut t2, h2, &fg);
            2.0 * t2.value(g).item()
        };
        assert!((tape.value(total).item() - w.lambda2 * gfl_only).abs() < 1e-12);
    }

    #[test]
    fn triphase_floor_prediction_hand_value() {
        // Fg is a single y=1 pixel on a 1x1 map, both modal heatmaps at the
        // clamp floor: each GFL term is -(1 - 1e-4)^2 ln(1e-4)
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(&[1, 1, 1]));
        let h = tape.leaf(Tensor::full(&[1, 1, 1], 1e-4));
        let fg = Tensor::full(&[1, 1, 1], 1.0);
        let w = AlignLossWeights::default();
        let total = triphase_loss_on_tape(&mut tape, f, f, h, h, &fg, &w).unwrap();
        let per_term = -(1.0 - 1e-4f64).powi(2) * (1e-4f64).ln();
        assert!((per_term - 9.2085).abs() < 1e-3);
        assert!((tape.value(total).item() - 2.0 * per_term).abs() < 1e-9);
    }

    #[test]
    fn triphase_is_modality_symmetric() {
        let mut rng = Rng::new(11);
        let mk = |rng: &mut Rng, shape: &[usize], lo: f64, hi: f64| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
        };
        let fx_t = mk(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let fy_t = mk(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let hx_t = mk(&mut rng, &[1, 3, 3], 0.05, 0.95);
        let hy_t = mk(&mut rng, &[1, 3, 3], 0.05, 0.95);
        let fg = mk(&mut rng, &[1, 3, 3], 0.0, 0.9);
        let w = AlignLossWeights::default();
        let run = |a: &Tensor, b: &Tensor, ha: &Tensor, hb: &Tensor| {
            let mut t = Tape::new();
            let fa = t.leaf(a.clone());
            let fb = t.leaf(b.clone());
            let hha = t.leaf(ha.clone());
            let hhb = t.leaf(hb.clone());
            let l = triphase_loss_on_tape(&mut t, fa, fb, hha, hhb, &fg, &w).unwrap();
            t.value(l).item()
        };
        let a = run(&fx_t, &fy_t, &hx_t, &hy_t);
        let b = run(&fy_t, &fx_t, &hy_t, &hx_t);
        assert!((a - b).abs() < 1e-12);
    }
}
