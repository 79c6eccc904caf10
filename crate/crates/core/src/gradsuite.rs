//! Finite-difference verification suite covering every differentiable op
//! and every loss, plus the composed pipeline. Shared by the `gradcheck`
//! CLI command and the acceptance tests.

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::grid::GridSpec;
use crate::params::ParamRegistry;
use crate::rng::Rng;
use crate::synth::{generate_scene, SceneGenConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{forward_on_tape, grads_by_name, TrainConfig};

pub const SIMPLE_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;
const EPS: f64 = 1e-4;
const TRIALS: usize = 10;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// How leaf entries are sampled; kinked ops need values bounded away from
/// their non-smooth sets.
#[derive(Clone, Copy)]
enum Sample {
    /// uniform in [-1.5, 1.5]
    Any,
    /// uniform in [0.5, 2.0]
    Positive,
    /// |x| in [0.3, 1.5], random sign
    AwayFromZero,
    /// uniform in [0.1, 0.9] (probability-like, off the clamp edges)
    Prob,
    /// uniform in [-0.25, 0.25] (small attention offsets)
    Small,
}

fn sample(rng: &mut Rng, s: Sample) -> f64 {
    match s {
        Sample::Any => rng.uniform(-1.5, 1.5),
        Sample::Positive => rng.uniform(0.5, 2.0),
        Sample::AwayFromZero => {
            let m = rng.uniform(0.3, 1.5);
            if rng.next_f64() < 0.5 {
                -m
            } else {
                m
            }
        }
        Sample::Prob => rng.uniform(0.1, 0.9),
        Sample::Small => rng.uniform(-0.25, 0.25),
    }
}

fn make_inputs(rng: &mut Rng, shapes: &[(Vec<usize>, Sample)]) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|(shape, s)| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| sample(rng, *s)).collect()).unwrap()
        })
        .collect()
}

fn flatten(inputs: &[Tensor]) -> Vec<f64> {
    inputs.iter().flat_map(|t| t.data.iter().copied()).collect()
}

fn unflatten(x: &[f64], template: &[Tensor]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(template.len());
    let mut off = 0;
    for t in template {
        let n = t.numel();
        out.push(Tensor::from_vec(&t.shape, x[off..off + n].to_vec()).unwrap());
        off += n;
    }
    out
}

/// Check one op: rebuild leaves from a flat vector, run `build` to a node
/// (summed to a scalar if needed), and compare backward against central
/// differences over `TRIALS` random draws.
fn check_op<F>(
    rng: &mut Rng,
    name: &str,
    shapes: &[(Vec<usize>, Sample)],
    tol: f64,
    build: F,
) -> CheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let template = make_inputs(rng, shapes);
        let f = |x: &[f64]| -> (f64, Vec<f64>) {
            let tensors = unflatten(x, &template);
            let mut tape = Tape::new();
            let leaves: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let node = build(&mut tape, &leaves).expect("suite op must build");
            let loss = if tape.value(node).is_scalar() {
                node
            } else {
                tape.sum(node)
            };
            let grads = tape.backward(loss).expect("backward");
            let gvec: Vec<f64> = leaves
                .iter()
                .flat_map(|&v| grads.wrt(&tape, v).data)
                .collect();
            (tape.value(loss).item(), gvec)
        };
        worst = worst.max(grad_check(&f, &flatten(&template), EPS));
    }
    CheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tol,
    }
}

fn elementwise_checks(rng: &mut Rng, out: &mut Vec<CheckReport>) {
    let g = vec![2usize, 3, 3];
    let any = (g.clone(), Sample::Any);
    let pos = (g.clone(), Sample::Positive);
    let away = (g.clone(), Sample::AwayFromZero);
    let prob = (g.clone(), Sample::Prob);
    out.push(check_op(rng, "add", &[any.clone(), any.clone()], SIMPLE_TOL, |t, v| {
        Ok(t.add(v[0], v[1]))
    }));
    out.push(check_op(rng, "sub", &[any.clone(), any.clone()], SIMPLE_TOL, |t, v| {
        Ok(t.sub(v[0], v[1]))
    }));
    out.push(check_op(rng, "mul", &[any.clone(), any.clone()], SIMPLE_TOL, |t, v| {
        Ok(t.mul(v[0], v[1]))
    }));
    out.push(check_op(rng, "div", &[any.clone(), pos.clone()], SIMPLE_TOL, |t, v| {
        Ok(t.div(v[0], v[1]))
    }));
    out.push(check_op(rng, "neg_scale_add_scalar", &[any.clone()], SIMPLE_TOL, |t, v| {
        let n = t.neg(v[0]);
        let s = t.scale(n, 0.7);
        Ok(t.add_scalar(s, 0.3))
    }));
    out.push(check_op(rng, "exp", &[any.clone()], SIMPLE_TOL, |t, v| Ok(t.exp(v[0]))));
    out.push(check_op(rng, "ln", &[pos.clone()], SIMPLE_TOL, |t, v| Ok(t.ln(v[0]))));
    out.push(check_op(rng, "square", &[any.clone()], SIMPLE_TOL, |t, v| Ok(t.square(v[0]))));
    out.push(check_op(rng, "abs", &[away.clone()], SIMPLE_TOL, |t, v| Ok(t.abs(v[0]))));
    out.push(check_op(rng, "relu", &[away.clone()], SIMPLE_TOL, |t, v| Ok(t.relu(v[0]))));
    out.push(check_op(rng, "sigmoid", &[any.clone()], SIMPLE_TOL, |t, v| Ok(t.sigmoid(v[0]))));
    out.push(check_op(rng, "tanh", &[any.clone()], SIMPLE_TOL, |t, v| Ok(t.tanh(v[0]))));
    out.push(check_op(rng, "softplus", &[any.clone()], SIMPLE_TOL, |t, v| Ok(t.softplus(v[0]))));
    out.push(check_op(rng, "recip", &[pos.clone()], SIMPLE_TOL, |t, v| Ok(t.recip(v[0]))));
    out.push(check_op(rng, "clamp_interior", &[prob.clone()], SIMPLE_TOL, |t, v| {
        Ok(t.clamp(v[0], 1e-3, 1.0 - 1e-3))
    }));
    out.push(check_op(rng, "mean", &[any.clone()], SIMPLE_TOL, |t, v| Ok(t.mean(v[0]))));
    out.push(check_op(rng, "max_all", &[any.clone()], SIMPLE_TOL, |t, v| {
        Ok(t.max_all(v[0]))
    }));
    out.push(check_op(rng, "div_by_scalar_node", &[any.clone(), (vec![1], Sample::Positive)], SIMPLE_TOL, |t, v| {
        Ok(t.div_by_scalar_node(v[0], v[1]))
    }));
    out.push(check_op(rng, "mul_const", &[any], SIMPLE_TOL, |t, v| {
        let c = Tensor::from_vec(&[2, 3, 3], (0..18).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap();
        Ok(t.mul_const(v[0], &c))
    }));
}

fn structural_checks(rng: &mut Rng, out: &mut Vec<CheckReport>) {
    out.push(check_op(
        rng,
        "conv2d",
        &[
            (vec![2, 4, 4], Sample::Any),
            (vec![3, 2, 3, 3], Sample::Any),
            (vec![3], Sample::Any),
        ],
        SIMPLE_TOL,
        |t, v| Ok(t.conv2d(v[0], v[1], v[2])),
    ));
    out.push(check_op(
        rng,
        "concat_channels",
        &[(vec![2, 3, 3], Sample::Any), (vec![1, 3, 3], Sample::Any)],
        SIMPLE_TOL,
        |t, v| {
            let c = t.concat_channels(v[0], v[1]);
            Ok(t.square(c))
        },
    ));
    out.push(check_op(rng, "gap", &[(vec![3, 4, 4], Sample::Any)], SIMPLE_TOL, |t, v| {
        let g = t.gap(v[0]);
        Ok(t.square(g))
    }));
    out.push(check_op(
        rng,
        "matvec",
        &[(vec![3, 4], Sample::Any), (vec![4], Sample::Any)],
        SIMPLE_TOL,
        |t, v| {
            let y = t.matvec(v[0], v[1]);
            Ok(t.square(y))
        },
    ));
    out.push(check_op(rng, "softmax_vec", &[(vec![5], Sample::Any)], SIMPLE_TOL, |t, v| {
        let s = t.softmax_vec(v[0]);
        let c = Tensor::from_vec(&[5], vec![0.9, -0.3, 0.4, 0.2, -0.7]).unwrap();
        Ok(t.mul_const(s, &c))
    }));
    out.push(check_op(
        rng,
        "mul_spatial",
        &[(vec![2, 3, 3], Sample::Any), (vec![3, 3], Sample::Any)],
        SIMPLE_TOL,
        |t, v| Ok(t.mul_spatial(v[0], v[1])),
    ));
    out.push(check_op(
        rng,
        "mul_channel",
        &[(vec![3, 3, 3], Sample::Any), (vec![3], Sample::Any)],
        SIMPLE_TOL,
        |t, v| Ok(t.mul_channel(v[0], v[1])),
    ));
    out.push(check_op(rng, "gather_cell", &[(vec![3, 4, 4], Sample::Any)], SIMPLE_TOL, |t, v| {
        let c = t.gather_cell(v[0], 1, 2);
        Ok(t.square(c))
    }));
    out.push(check_op(
        rng,
        "bilinear_sample",
        &[
            (vec![2, 4, 4], Sample::Any),
            (vec![1], Sample::Prob),
            (vec![1], Sample::Prob),
        ],
        SIMPLE_TOL,
        |t, v| {
            // coordinates land in (1.2, 2.0): off-integer, interior
            let x = t.scale(v[1], 0.8);
            let x = t.add_scalar(x, 1.15);
            let y = t.scale(v[2], 0.8);
            let y = t.add_scalar(y, 1.15);
            let s = t.bilinear_sample(v[0], x, y);
            Ok(t.square(s))
        },
    ));
}

fn attention_checks(rng: &mut Rng, out: &mut Vec<CheckReport>) {
    let d = 3usize;
    let (m, k) = (2usize, 2usize);
    out.push(check_op(
        rng,
        "deform_attn",
        &[
            (vec![d, 4, 4], Sample::Any),          // query
            (vec![d, 4, 4], Sample::Any),          // value
            (vec![2 * m * k, d], Sample::Small),   // w_off
            (vec![2 * m * k], Sample::Small),      // b_off (jittered below)
            (vec![m * k, d], Sample::Any),         // w_attn
            (vec![m * k], Sample::Any),            // b_attn
            (vec![m, d, d], Sample::Any),          // w_val
            (vec![m, d, d], Sample::Any),          // w_out
        ],
        SIMPLE_TOL,
        move |t, v| {
            // keep sampling positions clear of integer coordinates: shift
            // the offset bias well off the lattice
            let b_off = t.add_scalar(v[3], 0.45);
            t.deform_attn(v[0], v[1], v[2], b_off, v[4], v[5], v[6], v[7], m, k)
        },
    ));
    out.push(check_op(
        rng,
        "local_attn",
        &[
            (vec![d, 4, 4], Sample::Any),
            (vec![d, 4, 4], Sample::Any),
            (vec![9], Sample::Any),
            (vec![1, d, d], Sample::Any),
            (vec![1, d, d], Sample::Any),
        ],
        SIMPLE_TOL,
        |t, v| Ok(t.local_attn(v[0], v[1], v[2], v[3], v[4])),
    ));
    out.push(check_op(
        rng,
        "global_attn",
        &[
            (vec![d, 3, 3], Sample::Any),
            (vec![d, 3, 3], Sample::Any),
            (vec![d, d], Sample::Any),
            (vec![1, d, d], Sample::Any),
            (vec![1, d, d], Sample::Any),
        ],
        SIMPLE_TOL,
        |t, v| Ok(t.global_attn(v[0], v[1], v[2], v[3], v[4])),
    ));
}

fn loss_checks(rng: &mut Rng, out: &mut Vec<CheckReport>) {
    // a fixed heatmap target with one positive center
    let mut target = Tensor::zeros(&[1, 4, 4]);
    for (i, v) in target.data.iter_mut().enumerate() {
        *v = 0.4 * ((i % 7) as f64 / 7.0);
    }
    target.data[5] = 1.0;
    let tgt = target.clone();
    out.push(check_op(
        rng,
        "gaussian_focal_loss",
        &[(vec![1, 4, 4], Sample::Prob)],
        SIMPLE_TOL,
        move |t, v| Ok(crate::heatmap::gfl_on_tape(t, v[0], &tgt)),
    ));

    let tgt = target.clone();
    out.push(check_op(
        rng,
        "triphase_loss",
        &[
            (vec![2, 4, 4], Sample::Any),
            (vec![2, 4, 4], Sample::Any),
            (vec![1, 4, 4], Sample::Prob),
            (vec![1, 4, 4], Sample::Prob),
        ],
        SIMPLE_TOL,
        move |t, v| {
            let w = crate::align::AlignLossWeights::default();
            crate::align::triphase_loss_on_tape(t, v[0], v[1], v[2], v[3], &tgt, &w)
        },
    ));

    let mu_star = Tensor::from_vec(&[4, 4], (0..16).map(|i| (i as f64) / 16.0).collect()).unwrap();
    out.push(check_op(
        rng,
        "specialty_loss",
        &[
            (vec![1, 4, 4], Sample::Any),
            (vec![1, 4, 4], Sample::Positive),
            (vec![1, 4, 4], Sample::Any),
            (vec![1, 4, 4], Sample::Positive),
        ],
        SIMPLE_TOL,
        move |t, v| crate::specialty::specialty_loss_on_tape(t, v[0], v[1], v[2], v[3], &mu_star, 2.0),
    ));

    out.push(check_op(
        rng,
        "error_distribution",
        &[(vec![1, 3, 3], Sample::Any), (vec![1, 3, 3], Sample::Positive)],
        SIMPLE_TOL,
        |t, v| Ok(crate::specialty::error_distribution_on_tape(t, v[0], v[1])),
    ));

    out.push(check_op(
        rng,
        "focal_cls_loss",
        &[(vec![4], Sample::Prob)],
        SIMPLE_TOL,
        |t, v| Ok(crate::train::focal_cell_on_tape(t, v[0], 2)),
    ));

    let loc_target = Tensor::from_vec(&[4], vec![0.5, -0.3, 1.2, 0.6]).unwrap();
    out.push(check_op(
        rng,
        "l1_loc_loss",
        &[(vec![4], Sample::Positive)],
        SIMPLE_TOL,
        move |t, v| {
            // keep predictions clear of the targets so |.| stays smooth
            let shifted = t.add_scalar(v[0], 2.0);
            Ok(crate::train::loc_cell_on_tape(t, shifted, &loc_target))
        },
    ));
}

/// The composed check: perturb a handful of pipeline parameters and
/// compare the end-to-end total-loss gradient against finite differences.
pub fn composed_pipeline_check(seed: u64) -> CheckReport {
    let mut cfg = TrainConfig::default();
    cfg.spec = GridSpec::new(-4.0, 4.0, -4.0, 4.0, 1.0).unwrap();
    cfg.scene = SceneGenConfig {
        n_boxes_min: 1,
        n_boxes_max: 2,
        drop_radius: 3.0,
        ..SceneGenConfig::default()
    };
    cfg.encoder_layers = 1;
    // instance weights are held constant through backward, so the weighted
    // branch is excluded from the finite-difference comparison
    cfg.alt = false;
    cfg.score_thresh = 0.05;
    cfg.seed = seed;

    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(seed).split(0x9_c0de);
    for trial in 0..TRIALS {
        let scene = generate_scene(seed.wrapping_add(trial as u64), &cfg.scene, &cfg.spec).unwrap();
        let mut params = cfg.init_params();
        // move the deformable sampling points off the integer lattice
        for (name, t) in params.tensors_mut() {
            if name.ends_with(".b_off") {
                for v in t.data.iter_mut() {
                    *v = rng.uniform(0.15, 0.4) * if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                }
            }
        }
        // random 5-coordinate subset of the parameter vector
        let slots: Vec<(String, usize)> = {
            let named: Vec<(String, usize)> = params
                .tensors_mut()
                .iter()
                .map(|(n, t)| (n.clone(), t.numel()))
                .collect();
            let mut picked: Vec<(String, usize)> = Vec::new();
            while picked.len() < 5 {
                let (name, n) = &named[rng.below(named.len())];
                let slot = (name.clone(), rng.below(*n));
                if !picked.contains(&slot) {
                    picked.push(slot);
                }
            }
            picked
        };
        let base = params.clone();
        let slots_ref = &slots;
        let cfg_ref = &cfg;
        let scene_ref = &scene;
        let f = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut p = base.clone();
            for ((name, idx), &v) in slots_ref.iter().zip(x.iter()) {
                for (n, t) in p.tensors_mut() {
                    if &n == name {
                        t.data[*idx] = v;
                    }
                }
            }
            let mut tape = Tape::new();
            let mut reg = ParamRegistry::default();
            let (loss, _) = forward_on_tape(&mut tape, &mut reg, scene_ref, &p, cfg_ref)
                .expect("composed forward");
            let gmap = grads_by_name(&tape, &reg, loss).expect("composed backward");
            let zero = Tensor::zeros(&[1]);
            let g: Vec<f64> = slots_ref
                .iter()
                .map(|(name, idx)| gmap.get(name).unwrap_or(&zero).data.get(*idx).copied().unwrap_or(0.0))
                .collect();
            (tape.value(loss).item(), g)
        };
        let at: Vec<f64> = {
            let mut p = base.clone();
            let mut vals = Vec::new();
            for (name, idx) in &slots {
                for (n, t) in p.tensors_mut() {
                    if &n == name {
                        vals.push(t.data[*idx]);
                    }
                }
            }
            vals
        };
        worst = worst.max(grad_check(&f, &at, EPS));
    }
    CheckReport {
        name: "forward_pipeline".to_string(),
        max_rel_err: worst,
        tol: COMPOSED_TOL,
    }
}

/// Run every check. `include_composed` adds the end-to-end pipeline check,
/// which dominates the runtime.
pub fn run_suite(seed: u64, include_composed: bool) -> Vec<CheckReport> {
    let mut rng = Rng::new(seed).split(0x6_ead);
    let mut out = Vec::new();
    elementwise_checks(&mut rng, &mut out);
    structural_checks(&mut rng, &mut out);
    attention_checks(&mut rng, &mut out);
    loss_checks(&mut rng, &mut out);
    if include_composed {
        out.push(composed_pipeline_check(seed));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_ops_and_losses_pass() {
        for r in run_suite(17, false) {
            assert!(r.passed(), "{} rel err {} >= {}", r.name, r.max_rel_err, r.tol);
        }
    }

    #[test]
    fn composed_pipeline_passes() {
        let r = composed_pipeline_check(23);
        assert!(r.passed(), "{} rel err {} >= {}", r.name, r.max_rel_err, r.tol);
    }
}
