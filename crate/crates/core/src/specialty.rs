//! Specialty enhancement: per-modality offset/uncertainty heads, the
//! Gaussian-like error-distribution map E = (1/eps) exp(-mu^2/eps^2), and
//! the uncertainty-regularized loss.

use crate::error::{DynafuseError, Result};
use crate::grid::GridSpec;
use crate::head::{BevBox, D_MAX};
use crate::params::{ParamRegistry, SpecialtyHeadParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor keeping the uncertainty strictly positive.
pub const EPS_MIN: f64 = 1e-3;
/// Loss-scale coefficient.
pub const ZETA: f64 = 2000.0;

/// Two small conv stacks producing the offset map mu >= 0 (softplus) and
/// the uncertainty map eps >= EPS_MIN (softplus + floor). Both are H x W.
pub fn predict_offset_uncertainty(
    tape: &mut Tape,
    reg: &mut ParamRegistry,
    name: &str,
    feat: Var,
    p: &SpecialtyHeadParams,
) -> Result<(Var, Var)> {
    let in_c = tape.value(feat).shape[0];
    if p.mu_head[0].kernel.shape[1] != in_c {
        return Err(DynafuseError::invalid(format!(
            "specialty head expects {} channels, input has {in_c}",
            p.mu_head[0].kernel.shape[1]
        )));
    }
    let run_head = |tape: &mut Tape, reg: &mut ParamRegistry, head: &[crate::params::ConvParams], sub: &str| {
        let (k0, b0) = reg.leaf_conv(tape, &format!("{name}.{sub}.0"), &head[0]);
        let h = tape.conv2d(feat, k0, b0);
        let h = tape.relu(h);
        let (k1, b1) = reg.leaf_conv(tape, &format!("{name}.{sub}.1"), &head[1]);
        tape.conv2d(h, k1, b1)
    };
    let mu_raw = run_head(tape, reg, &p.mu_head, "mu");
    let eps_raw = run_head(tape, reg, &p.eps_head, "eps");
    let mu = tape.softplus(mu_raw);
    let eps = tape.softplus(eps_raw);
    let eps = tape.add_scalar(eps, EPS_MIN);
    Ok((mu, eps))
}

/// E = (1/eps) * exp(-mu^2 / eps^2), pointwise on the tape.
pub fn error_distribution_on_tape(tape: &mut Tape, mu: Var, eps: Var) -> Var {
    let mu2 = tape.square(mu);
    let eps2 = tape.square(eps);
    let ratio = tape.div(mu2, eps2);
    let neg = tape.neg(ratio);
    let e = tape.exp(neg);
    let inv_eps = tape.recip(eps);
    tape.mul(e, inv_eps)
}

/// Plain evaluation of the error-distribution map; rejects eps <= 0.
pub fn error_distribution(mu: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.shape != eps.shape {
        return Err(DynafuseError::ShapeMismatch {
            expected: format!("{:?}", mu.shape),
            got: format!("{:?}", eps.shape),
        });
    }
    if eps.data.iter().any(|&e| e <= 0.0) {
        return Err(DynafuseError::invalid("error distribution requires eps > 0"));
    }
    let mut out = mu.clone();
    for (o, (&m, &e)) in out.data.iter_mut().zip(mu.data.iter().zip(eps.data.iter())) {
        *o = (1.0 / e) * (-(m * m) / (e * e)).exp();
    }
    Ok(out)
}

/// Per cell: distance in meters to the nearest ground-truth center, clipped
/// at D_MAX and normalized to [0, 1]. Empty scenes are all ones.
pub fn target_offsets(boxes: &[BevBox], spec: &GridSpec) -> Tensor {
    let (rows, cols) = (spec.n_rows(), spec.n_cols());
    let mut out = Tensor::full(&[rows, cols], 1.0);
    if boxes.is_empty() {
        return out;
    }
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = spec.cell_to_world(c as f64, r as f64);
            let mut best = f64::INFINITY;
            for b in boxes {
                let d = ((x - b.cx).powi(2) + (y - b.cy).powi(2)).sqrt();
                if d < best {
                    best = d;
                }
            }
            out.data[r * cols + c] = (best.min(D_MAX)) / D_MAX;
        }
    }
    out
}

/// L_s = (zeta/N) * sum_z ( sum_cells (mu_z - mu*)^2 + sum_cells eps_z^2 ).
pub fn specialty_loss_on_tape(
    tape: &mut Tape,
    mu_x: Var,
    eps_x: Var,
    mu_y: Var,
    eps_y: Var,
    mu_star: &Tensor,
    zeta: f64,
) -> Result<Var> {
    for v in [mu_x, eps_x, mu_y, eps_y] {
        if tape.value(v).numel() != mu_star.numel() {
            return Err(DynafuseError::ShapeMismatch {
                expected: format!("{:?}", mu_star.shape),
                got: format!("{:?}", tape.value(v).shape),
            });
        }
    }
    let n = mu_star.numel() as f64;
    // broadcast-free: reuse the prediction shape ([1, H, W] vs [H, W]) since
    // only numel has to agree
    let mut star_t = mu_star.clone();
    star_t.shape = tape.value(mu_x).shape.clone();
    let star = tape.leaf(star_t);
    let mut terms = Vec::new();
    for (mu, eps) in [(mu_x, eps_x), (mu_y, eps_y)] {
        let d = tape.sub(mu, star);
        let d2 = tape.square(d);
        let ds = tape.sum(d2);
        let e2 = tape.square(eps);
        let es = tape.sum(e2);
        terms.push(tape.add(ds, es));
    }
    let total = tape.add(terms[0], terms[1]);
    Ok(tape.scale(total, zeta / n))
}

/// Plain evaluation of the specialty loss.
pub fn specialty_loss(
    mu_x: &Tensor,
    eps_x: &Tensor,
    mu_y: &Tensor,
    eps_y: &Tensor,
    mu_star: &Tensor,
    zeta: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mx = tape.leaf(mu_x.clone());
    let ex = tape.leaf(eps_x.clone());
    let my = tape.leaf(mu_y.clone());
    let ey = tape.leaf(eps_y.clone());
    let l = specialty_loss_on_tape(&mut tape, mx, ex, my, ey, mu_star, zeta)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::softplus;

    #[test]
    fn zero_params_give_softplus_zero_maps() {
        let p = SpecialtyHeadParams {
            mu_head: vec![
                crate::params::ConvParams::zeros(2, 2, 3),
                crate::params::ConvParams::zeros(1, 2, 3),
            ],
            eps_head: vec![
                crate::params::ConvParams::zeros(2, 2, 3),
                crate::params::ConvParams::zeros(1, 2, 3),
            ],
        };
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::default();
        let f = tape.leaf(Tensor::full(&[2, 3, 3], 0.9));
        let (mu, eps) = predict_offset_uncertainty(&mut tape, &mut reg, "s", f, &p).unwrap();
        let sp0 = softplus(0.0);
        assert!(tape.value(mu).data.iter().all(|&v| (v - sp0).abs() < 1e-12));
        assert!(tape
            .value(eps)
            .data
            .iter()
            .all(|&v| (v - (sp0 + EPS_MIN)).abs() < 1e-12));
        assert!((sp0 - 0.6931471805599453).abs() < 1e-12);
        // shapes are [1, H, W] spatial maps
        assert_eq!(tape.value(mu).shape, vec![1, 3, 3]);
    }

    #[test]
    fn eps_floor_holds_for_random_params() {
        let mut rng = Rng::new(2);
        let p = SpecialtyHeadParams::init(&mut rng, 4);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::default();
        let mut f = Tensor::zeros(&[4, 5, 5]);
        for v in f.data.iter_mut() {
            *v = rng.uniform(-3.0, 3.0);
        }
        let fv = tape.leaf(f);
        let (_, eps) = predict_offset_uncertainty(&mut tape, &mut reg, "s", fv, &p).unwrap();
        assert!(tape.value(eps).data.iter().all(|&v| v >= EPS_MIN));
    }

    #[test]
    fn error_distribution_spot_values() {
        let mu = Tensor::from_vec(&[3], vec![0.0, 0.0, 1.0]).unwrap();
        let eps = Tensor::from_vec(&[3], vec![1.0, 2.0, 1.0]).unwrap();
        let e = error_distribution(&mu, &eps).unwrap();
        assert!((e.data[0] - 1.0).abs() < 1e-12);
        assert!((e.data[1] - 0.5).abs() < 1e-12);
        assert!((e.data[2] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn error_distribution_rejects_nonpositive_eps() {
        let mu = Tensor::zeros(&[2]);
        let eps = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        assert!(error_distribution(&mu, &eps).is_err());
    }

    #[test]
    fn error_distribution_even_in_mu() {
        let mu = Tensor::from_vec(&[2], vec![0.7, -0.7]).unwrap();
        let eps = Tensor::full(&[2], 0.9);
        let e = error_distribution(&mu, &eps).unwrap();
        assert!((e.data[0] - e.data[1]).abs() < 1e-15);
    }

    #[test]
    fn error_distribution_peak_is_stationary_and_decreasing_in_abs_mu() {
        let eps = Tensor::full(&[1], 1.3);
        let at = |m: f64| {
            error_distribution(&Tensor::full(&[1], m), &eps).unwrap().data[0]
        };
        let h = 1e-5;
        let fd = (at(h) - at(-h)) / (2.0 * h);
        assert!(fd.abs() < 1e-9, "dE/dmu at 0 should vanish, got {fd}");
        assert!(at(0.0) > at(0.5) && at(0.5) > at(1.0));
    }

    #[test]
    fn target_offsets_cases() {
        let spec = GridSpec::desk_default();
        let empty = target_offsets(&[], &spec);
        assert!(empty.data.iter().all(|&v| v == 1.0));

        let (x, y) = spec.cell_to_world(10.0, 20.0);
        let b = BevBox {
            class_id: 0,
            cx: x,
            cy: y,
            length: 2.0,
            width: 2.0,
            yaw: 0.0,
            score: 1.0,
        };
        let t = target_offsets(&[b], &spec);
        assert_eq!(t.data[20 * spec.n_cols() + 10], 0.0);
        // a cell 5 m away (10 cells at 0.5 m) reads 5/8
        assert!((t.data[20 * spec.n_cols() + 20] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn specialty_loss_hand_value_and_linearity_in_zeta() {
        // N=1: one modality contributes 2000*((0.5)^2 + (0.1)^2) = 520
        let mu_x = Tensor::full(&[1, 1], 0.5);
        let eps_x = Tensor::full(&[1, 1], 0.1);
        let mu_y = Tensor::zeros(&[1, 1]);
        let eps_y = Tensor::zeros(&[1, 1]);
        let star = Tensor::zeros(&[1, 1]);
        let l = specialty_loss(&mu_x, &eps_x, &mu_y, &eps_y, &star, ZETA).unwrap();
        assert!((l - 520.0).abs() < 1e-9);
        let l2 = specialty_loss(&mu_x, &eps_x, &mu_y, &eps_y, &star, 2.0 * ZETA).unwrap();
        assert!((l2 - 2.0 * l).abs() < 1e-9);
        // exact fit with vanishing uncertainty drives the loss to zero
        let l0 = specialty_loss(&star, &eps_y, &star, &eps_y, &star, ZETA).unwrap();
        assert_eq!(l0, 0.0);
    }

    #[test]
    fn minimizing_eps_is_the_floor() {
        // for fixed mu-error the eps term is strictly increasing in eps
        let star = Tensor::zeros(&[1, 1]);
        let mu = Tensor::full(&[1, 1], 0.3);
        let zero = Tensor::zeros(&[1, 1]);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..20 {
            let e = EPS_MIN + i as f64 * 0.05;
            let l = specialty_loss(&mu, &Tensor::full(&[1, 1], e), &zero, &zero, &star, ZETA).unwrap();
            assert!(l > prev);
            prev = l;
        }
    }
}
