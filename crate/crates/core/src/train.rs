//! End-to-end training over synthetic scenes and the ablation harness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::align::{align_encode, modal_heatmap_head, triphase_loss_on_tape, AlignLossWeights};
use crate::error::{DynafuseError, Result};
use crate::eval::{toy_map, EvalResult};
use crate::fusion::{dynamic_fuse, merge_conv, modulate, FusionOrder};
use crate::grid::GridSpec;
use crate::head::{decode_instances, match_instances, AltMode, Instance, MATCH_RADIUS};
use crate::heatmap::{gfl_on_tape, render_gt_heatmap};
use crate::interact::{cross_interaction, potential_energy_map, self_interaction};
use crate::params::{InteractionMode, ParamRegistry, PipelineDims, PipelineParams};
use crate::rng::Rng;
use crate::specialty::{
    error_distribution_on_tape, predict_offset_uncertainty, specialty_loss_on_tape,
    target_offsets, ZETA,
};
use crate::synth::{generate_scene, Scene, SceneGenConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which modality streams feed the pipeline; the absent one is zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipeModality {
    Both,
    CameraOnly,
    LidarOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    // module toggles
    pub tda: bool,
    pub mise: bool,
    pub alt: bool,
    // sub-toggles, consulted only when the parent module is on
    pub align_pair: bool,
    pub align_gt: bool,
    pub mi: bool,
    pub se: bool,
    pub alt_mode: AltMode,
    pub interaction_mode: InteractionMode,
    pub fusion_order: FusionOrder,
    pub encoder_layers: usize,
    pub specialty_weight_sharing: bool,
    pub modality: PipeModality,
    // loss coefficients
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub zeta: f64,
    // decoding
    pub top_k: usize,
    pub score_thresh: f64,
    pub scene: SceneGenConfig,
    pub spec: GridSpec,
    pub dims: PipelineDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // desk-scale training grid: 20x20 cells at 1 m keeps a full
        // ablation sweep within minutes on one core
        let spec = GridSpec::new(-10.0, 10.0, -10.0, 10.0, 1.0).unwrap();
        let mut scene = SceneGenConfig::default();
        scene.n_boxes_min = 2;
        scene.n_boxes_max = 4;
        scene.drop_radius = 6.0;
        TrainConfig {
            seed: 7,
            train_scenes: 20,
            val_scenes: 10,
            steps: 150,
            lr: 5e-3,
            clip_norm: 10.0,
            tda: true,
            mise: true,
            alt: true,
            align_pair: true,
            align_gt: true,
            mi: true,
            se: true,
            alt_mode: AltMode::Both,
            interaction_mode: InteractionMode::Deformable,
            fusion_order: FusionOrder::ChannelSpace,
            encoder_layers: 2,
            specialty_weight_sharing: false,
            modality: PipeModality::Both,
            alpha: 1.0,
            beta: 0.25,
            gamma: 1.0,
            eta: 1.0,
            zeta: ZETA,
            top_k: 8,
            score_thresh: 0.25,
            scene,
            spec,
            dims: PipelineDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| {
            Err(DynafuseError::Config {
                path: "train".into(),
                message: m.into(),
            })
        };
        if self.lr <= 0.0 || self.clip_norm <= 0.0 {
            return bad("lr and clip_norm must be positive");
        }
        if self.tda && self.encoder_layers == 0 {
            return bad("tda requires at least one encoder layer");
        }
        if self.alt && self.alt_mode == AltMode::None {
            return bad("alt enabled but alt_mode is none");
        }
        if self.scene.classes != self.dims.classes || self.scene.channels != self.dims.channels {
            return bad("scene channel/class counts must match pipeline dims");
        }
        self.scene.validate()?;
        Ok(())
    }

    fn dims_for(&self) -> PipelineDims {
        PipelineDims {
            encoder_layers: self.encoder_layers,
            ..self.dims
        }
    }

    pub fn init_params(&self) -> PipelineParams {
        PipelineParams::init(self.seed, &self.dims_for(), self.interaction_mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub heat: f64,
    pub cls: f64,
    pub loc: f64,
    pub tda: f64,
    pub spec: f64,
}

/// Intermediate spatial maps captured for plotting.
#[derive(Debug, Clone, Default)]
pub struct PipeMaps {
    pub gt_heatmap: Option<Tensor>,
    pub fx: Option<Tensor>,
    pub fy: Option<Tensor>,
    pub ex: Option<Tensor>,
    pub ey: Option<Tensor>,
    pub fused: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct PipeOutput {
    pub instances: Vec<Instance>,
    pub losses: LossBreakdown,
    pub maps: PipeMaps,
}

/// Focal classification loss at one decoded cell, mean over classes,
/// gamma fixed at 2 so the powers stay polynomial on the tape.
pub fn focal_cell_on_tape(tape: &mut Tape, probs: Var, target_class: usize) -> Var {
    let k = tape.value(probs).numel();
    let mut pos_mask = Tensor::zeros(&[k]);
    let mut neg_mask = Tensor::full(&[k], 1.0);
    pos_mask.data[target_class] = 1.0;
    neg_mask.data[target_class] = 0.0;
    let p = tape.clamp(probs, crate::heatmap::P_MIN, 1.0 - crate::heatmap::P_MIN);
    let ln_p = tape.ln(p);
    let neg_p = tape.neg(p);
    let omp = tape.add_scalar(neg_p, 1.0);
    let ln_omp = tape.ln(omp);
    let omp2 = tape.square(omp);
    let pos = tape.mul(omp2, ln_p);
    let pos = tape.mul_const(pos, &pos_mask);
    let p2 = tape.square(p);
    let neg = tape.mul(p2, ln_omp);
    let neg = tape.mul_const(neg, &neg_mask);
    let s = tape.add(pos, neg);
    let s = tape.sum(s);
    tape.scale(s, -1.0 / k as f64)
}

/// L1 location loss at one decoded cell: centers normalized by D_MAX,
/// sizes compared against log targets, mean over the four terms.
pub fn loc_cell_on_tape(tape: &mut Tape, reg_vec: Var, target: &Tensor) -> Var {
    let t = tape.leaf(target.clone());
    let d = tape.sub(reg_vec, t);
    let norm = Tensor::from_vec(
        &[4],
        vec![1.0 / crate::head::D_MAX, 1.0 / crate::head::D_MAX, 1.0, 1.0],
    )
    .unwrap();
    let d = tape.mul_const(d, &norm);
    let a = tape.abs(d);
    let s = tape.sum(a);
    tape.scale(s, 0.25)
}

/// Build the full forward computation on a caller-owned tape. Returns the
/// scalar total-loss node and the decoded instances with loss breakdown.
pub fn forward_on_tape(
    tape: &mut Tape,
    reg: &mut ParamRegistry,
    scene: &Scene,
    params: &PipelineParams,
    cfg: &TrainConfig,
) -> Result<(Var, PipeOutput)> {
    cfg.validate()?;
    let classes = cfg.dims.classes;
    let mut cam_t = scene.camera_feat.to_tensor();
    let mut lid_t = scene.lidar_feat.to_tensor();
    match cfg.modality {
        PipeModality::Both => {}
        PipeModality::CameraOnly => lid_t = Tensor::zeros(&lid_t.shape),
        PipeModality::LidarOnly => cam_t = Tensor::zeros(&cam_t.shape),
    }
    let x_in = tape.leaf(cam_t);
    let y_in = tape.leaf(lid_t);

    let (fg_hm, _) = render_gt_heatmap(&scene.gt_boxes, &scene.spec, classes)?;
    let fg = fg_hm.to_tensor();

    // triphase domain aligning; the modal heatmap heads are shared with
    // the interaction stage, so build them at most once
    let (fx, fy) = if cfg.tda {
        (
            align_encode(tape, reg, "align_cam", x_in, &params.align_cam)?,
            align_encode(tape, reg, "align_lidar", y_in, &params.align_lidar)?,
        )
    } else {
        (x_in, y_in)
    };
    let modal_heads = if cfg.tda || (cfg.mise && cfg.mi) {
        Some((
            modal_heatmap_head(tape, reg, "hm_head_cam", fx, &params.hm_head_cam),
            modal_heatmap_head(tape, reg, "hm_head_lidar", fy, &params.hm_head_lidar),
        ))
    } else {
        None
    };
    let l_tda = if cfg.tda {
        let (hx, hy) = modal_heads.unwrap();
        let w = AlignLossWeights {
            lambda1: if cfg.align_pair { AlignLossWeights::default().lambda1 } else { 0.0 },
            lambda2: if cfg.align_gt { AlignLossWeights::default().lambda2 } else { 0.0 },
        };
        triphase_loss_on_tape(tape, fx, fy, hx, hy, &fg, &w)?
    } else {
        tape.scalar(0.0)
    };

    // modal interaction, specialty enhancement, dynamic fusion
    let (fused, l_spec, e_maps) = if cfg.mise {
        let (px, py) = if cfg.mi {
            let (hx, hy) = modal_heads.unwrap();
            let (cx, cy) = cross_interaction(
                tape,
                reg,
                cfg.interaction_mode,
                hx,
                hy,
                &params.cross_cam,
                &params.cross_lidar,
            )?;
            let sx = self_interaction(tape, reg, "self_cam", cfg.interaction_mode, cx, &params.self_cam)?;
            let sy = self_interaction(tape, reg, "self_lidar", cfg.interaction_mode, cy, &params.self_lidar)?;
            let px = potential_energy_map(tape, reg, "pe_conv_cam", sx, hx, &params.pe_conv_cam)?;
            let py = potential_energy_map(tape, reg, "pe_conv_lidar", sy, hy, &params.pe_conv_lidar)?;
            (Some(px), Some(py))
        } else {
            (None, None)
        };
        let (ex, ey, l_spec) = if cfg.se {
            let spec_lid = if cfg.specialty_weight_sharing {
                &params.spec_cam
            } else {
                &params.spec_lidar
            };
            let lid_name = if cfg.specialty_weight_sharing { "spec_cam" } else { "spec_lidar" };
            let (mu_x, eps_x) = predict_offset_uncertainty(tape, reg, "spec_cam", fx, &params.spec_cam)?;
            let (mu_y, eps_y) = predict_offset_uncertainty(tape, reg, lid_name, fy, spec_lid)?;
            let ex = error_distribution_on_tape(tape, mu_x, eps_x);
            let ey = error_distribution_on_tape(tape, mu_y, eps_y);
            let mu_star = target_offsets(&scene.gt_boxes, &scene.spec);
            let l = specialty_loss_on_tape(tape, mu_x, eps_x, mu_y, eps_y, &mu_star, cfg.zeta)?;
            (Some(ex), Some(ey), l)
        } else {
            let z = tape.scalar(0.0);
            (None, None, z)
        };
        let fxp = modulate(tape, fx, px, ex);
        let fyp = modulate(tape, fy, py, ey);
        let fused = dynamic_fuse(tape, reg, fxp, fyp, &params.fusion, cfg.fusion_order)?;
        (fused, l_spec, (ex, ey))
    } else {
        let fused = merge_conv(tape, reg, fx, fy, &params.fusion);
        let z = tape.scalar(0.0);
        (fused, z, (None, None))
    };

    // detection head
    let (ck, cb) = reg.leaf_conv(tape, "head.cls", &params.head.cls);
    let cls_logits = tape.conv2d(fused, ck, cb);
    let cls_probs = tape.sigmoid(cls_logits);
    let (rk, rb) = reg.leaf_conv(tape, "head.reg", &params.head.reg);
    let reg_map = tape.conv2d(fused, rk, rb);

    let l_heat = gfl_on_tape(tape, cls_probs, &fg);

    let mut instances = decode_instances(
        tape.value(cls_probs),
        tape.value(reg_map),
        &scene.spec,
        cfg.top_k,
        cfg.score_thresh,
    );
    match_instances(&mut instances, &scene.gt_boxes, MATCH_RADIUS);

    // instance losses over matched queries, optionally quality-weighted;
    // weights are treated as constants (no gradient through the match)
    let mut cls_terms: Vec<Var> = Vec::new();
    let mut loc_terms: Vec<Var> = Vec::new();
    for inst in instances.iter_mut() {
        let gi = match inst.matched_gt {
            Some(gi) => gi,
            None => continue,
        };
        let gt = &scene.gt_boxes[gi];
        let weight = if cfg.alt {
            let iou = crate::head::bev_iou(&inst.bbox, gt);
            let phi = match cfg.alt_mode {
                AltMode::None => 0.0,
                AltMode::Cls => inst.bbox.score,
                AltMode::Iou => iou.powf(cfg.eta),
                AltMode::Both => inst.bbox.score * iou.powf(cfg.eta),
            };
            inst.quality = phi;
            inst.weight = phi.exp();
            inst.weight
        } else {
            1.0
        };
        let probs = tape.gather_cell(cls_probs, inst.row, inst.col);
        let lc = focal_cell_on_tape(tape, probs, gt.class_id);
        cls_terms.push(tape.scale(lc, weight));
        let (cell_x, cell_y) = scene.spec.cell_to_world(inst.col as f64, inst.row as f64);
        let target = Tensor::from_vec(
            &[4],
            vec![gt.cx - cell_x, gt.cy - cell_y, gt.length.ln(), gt.width.ln()],
        )
        .unwrap();
        let rv = tape.gather_cell(reg_map, inst.row, inst.col);
        let ll = loc_cell_on_tape(tape, rv, &target);
        loc_terms.push(tape.scale(ll, weight));
    }
    let mean_terms = |tape: &mut Tape, terms: &[Var]| -> Var {
        match terms.split_first() {
            None => tape.scalar(0.0),
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = tape.add(acc, t);
                }
                tape.scale(acc, 1.0 / terms.len() as f64)
            }
        }
    };
    let l_cls = mean_terms(tape, &cls_terms);
    let l_loc = mean_terms(tape, &loc_terms);

    let a = tape.scale(l_cls, cfg.alpha);
    let b = tape.scale(l_loc, cfg.beta);
    let g = tape.scale(l_heat, cfg.gamma);
    let det = tape.add(a, b);
    let det = tape.add(det, g);
    let with_spec = tape.add(det, l_spec);
    let total = tape.add(with_spec, l_tda);

    let losses = LossBreakdown {
        total: tape.value(total).item(),
        heat: tape.value(l_heat).item(),
        cls: tape.value(l_cls).item(),
        loc: tape.value(l_loc).item(),
        tda: tape.value(l_tda).item(),
        spec: tape.value(l_spec).item(),
    };
    let maps = PipeMaps {
        gt_heatmap: Some(fg.clone()),
        fx: Some(tape.value(fx).clone()),
        fy: Some(tape.value(fy).clone()),
        ex: e_maps.0.map(|v| tape.value(v).clone()),
        ey: e_maps.1.map(|v| tape.value(v).clone()),
        fused: Some(tape.value(fused).clone()),
    };
    Ok((total, PipeOutput { instances, losses, maps }))
}

/// One-shot forward on a private tape.
pub fn forward_pipeline(scene: &Scene, params: &PipelineParams, cfg: &TrainConfig) -> Result<PipeOutput> {
    let mut tape = Tape::new();
    let mut reg = ParamRegistry::default();
    let (_, out) = forward_on_tape(&mut tape, &mut reg, scene, params, cfg)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub config: TrainConfig,
    pub params: PipelineParams,
}

fn derived_seed(base: u64, stream: u64, index: u64) -> u64 {
    Rng::new(base).split(stream).split(index).next_u64()
}

pub fn train_scene_set(cfg: &TrainConfig) -> Result<Vec<Scene>> {
    (0..cfg.train_scenes)
        .map(|i| generate_scene(derived_seed(cfg.seed, 0x7261_17, i as u64), &cfg.scene, &cfg.spec))
        .collect()
}

pub fn val_scene_set(cfg: &TrainConfig) -> Result<Vec<Scene>> {
    (0..cfg.val_scenes)
        .map(|i| generate_scene(derived_seed(cfg.seed, 0x7a1_1d, i as u64), &cfg.scene, &cfg.spec))
        .collect()
}

/// Accumulate per-parameter gradients by name; duplicate registrations of
/// a shared tensor sum together.
pub fn grads_by_name(tape: &Tape, reg: &ParamRegistry, loss: Var) -> Result<BTreeMap<String, Tensor>> {
    let grads = tape.backward(loss)?;
    let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in &reg.entries {
        let g = grads.wrt(tape, *var);
        match map.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                    *a += b;
                }
            }
            None => {
                map.insert(name.clone(), g);
            }
        }
    }
    Ok(map)
}

fn sgd_step(params: &mut PipelineParams, gmap: &BTreeMap<String, Tensor>, lr: f64, clip: f64) {
    let mut sq = 0.0;
    for g in gmap.values() {
        sq += g.data.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    for (name, t) in params.tensors_mut() {
        if let Some(g) = gmap.get(&name) {
            for (p, gv) in t.data.iter_mut().zip(g.data.iter()) {
                *p -= lr * scale * gv;
            }
        }
    }
}

/// Evaluate a parameter set on a scene list, returning the toy mAP result.
pub fn evaluate(params: &PipelineParams, cfg: &TrainConfig, scenes: &[Scene]) -> Result<EvalResult> {
    let mut preds = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        let out = forward_pipeline(s, params, cfg)?;
        preds.push(out.instances);
        gts.push(s.gt_boxes.clone());
    }
    toy_map(&preds, &gts)
}

/// Plain gradient descent, one scene per step, fixed learning rate,
/// global gradient-norm clipping. Returns the checkpoint, the per-step
/// total-loss curve, and the validation metrics.
pub fn train_loop(cfg: &TrainConfig) -> Result<(Checkpoint, Vec<f64>, EvalResult)> {
    cfg.validate()?;
    let train_scenes = train_scene_set(cfg)?;
    let val_scenes = val_scene_set(cfg)?;
    let mut params = cfg.init_params();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let scene = &train_scenes[step % train_scenes.len()];
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::default();
        let (loss, out) = forward_on_tape(&mut tape, &mut reg, scene, &params, cfg)?;
        if !out.losses.total.is_finite() {
            return Err(DynafuseError::Diverged { step });
        }
        curve.push(out.losses.total);
        let gmap = grads_by_name(&tape, &reg, loss)?;
        sgd_step(&mut params, &gmap, cfg.lr, cfg.clip_norm);
    }
    let metrics = evaluate(&params, cfg, &val_scenes)?;
    let ckpt = Checkpoint {
        step: cfg.steps,
        config: cfg.clone(),
        params,
    };
    Ok((ckpt, curve, metrics))
}

/// Ablation tables mirrored from the published sweep. Letters follow the
/// sub-table order: modules, aligning terms, MI/SE, ALT mode, interaction
/// manner, specialty weight manner, fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub enum AblationTable {
    IVa,
    IVb,
    IVc,
    IVd,
    IVe,
    IVg,
    IVh,
}

impl std::str::FromStr for AblationTable {
    type Err = DynafuseError;
    fn from_str(s: &str) -> Result<AblationTable> {
        match s {
            "IVa" => Ok(AblationTable::IVa),
            "IVb" => Ok(AblationTable::IVb),
            "IVc" => Ok(AblationTable::IVc),
            "IVd" => Ok(AblationTable::IVd),
            "IVe" => Ok(AblationTable::IVe),
            "IVg" => Ok(AblationTable::IVg),
            "IVh" => Ok(AblationTable::IVh),
            other => Err(DynafuseError::invalid(format!("unknown ablation table `{other}`"))),
        }
    }
}

/// Row labels and their config edits for one ablation table.
pub fn ablation_rows(base: &TrainConfig, table: AblationTable) -> Vec<(String, TrainConfig)> {
    let mut rows = Vec::new();
    let mut push = |label: &str, edit: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        edit(&mut cfg);
        rows.push((label.to_string(), cfg));
    };
    match table {
        AblationTable::IVa => {
            push("baseline", &|c| {
                c.tda = false;
                c.mise = false;
                c.alt = false;
            });
            push("tda", &|c| {
                c.mise = false;
                c.alt = false;
            });
            push("tda_mise", &|c| c.alt = false);
            push("tda_mise_alt", &|_| {});
        }
        AblationTable::IVb => {
            push("neither", &|c| {
                c.align_pair = false;
                c.align_gt = false;
            });
            push("pair", &|c| c.align_gt = false);
            push("gt", &|c| c.align_pair = false);
            push("pair_gt", &|_| {});
        }
        AblationTable::IVc => {
            push("neither", &|c| {
                c.mi = false;
                c.se = false;
            });
            push("mi", &|c| c.se = false);
            push("se", &|c| c.mi = false);
            push("mi_se", &|_| {});
        }
        AblationTable::IVd => {
            push("none", &|c| {
                c.alt = false;
                c.alt_mode = AltMode::None;
            });
            push("cls", &|c| c.alt_mode = AltMode::Cls);
            push("iou", &|c| c.alt_mode = AltMode::Iou);
            push("both", &|c| c.alt_mode = AltMode::Both);
        }
        AblationTable::IVe => {
            push("global", &|c| c.interaction_mode = InteractionMode::Global);
            push("local", &|c| c.interaction_mode = InteractionMode::Local);
            push("deformable", &|c| c.interaction_mode = InteractionMode::Deformable);
        }
        AblationTable::IVg => {
            push("share_weight", &|c| c.specialty_weight_sharing = true);
            push("specific_weight", &|c| c.specialty_weight_sharing = false);
        }
        AblationTable::IVh => {
            push("space_channel", &|c| c.fusion_order = FusionOrder::SpaceChannel);
            push("channel_space", &|c| c.fusion_order = FusionOrder::ChannelSpace);
        }
    }
    rows
}

/// Train one model per row of the selected table and emit a CSV shaped
/// like the published sub-table: setting label plus toy mAP.
pub fn ablation_run(base: &TrainConfig, table: AblationTable) -> Result<String> {
    let mut csv = String::from("setting,map\n");
    for (label, cfg) in ablation_rows(base, table) {
        let (_, _, metrics) = train_loop(&cfg)?;
        csv.push_str(&format!("{label},{:.6}\n", metrics.map));
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.spec = GridSpec::new(-4.0, 4.0, -4.0, 4.0, 1.0).unwrap();
        cfg.scene.n_boxes_min = 1;
        cfg.scene.n_boxes_max = 2;
        cfg.scene.drop_radius = 3.0;
        cfg.train_scenes = 2;
        cfg.val_scenes = 2;
        cfg.steps = 3;
        cfg.encoder_layers = 1;
        cfg
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let params = cfg.init_params();
        let scene = generate_scene(1, &cfg.scene, &cfg.spec).unwrap();
        let a = forward_pipeline(&scene, &params, &cfg).unwrap();
        let b = forward_pipeline(&scene, &params, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.instances.len(), b.instances.len());
    }

    #[test]
    fn disabled_modules_zero_their_losses() {
        let mut cfg = tiny_cfg();
        cfg.tda = false;
        cfg.mise = false;
        cfg.alt = false;
        let params = cfg.init_params();
        let scene = generate_scene(2, &cfg.scene, &cfg.spec).unwrap();
        let out = forward_pipeline(&scene, &params, &cfg).unwrap();
        assert_eq!(out.losses.tda, 0.0);
        assert_eq!(out.losses.spec, 0.0);
        assert!(out.losses.heat > 0.0);
    }

    #[test]
    fn tda_contributes_when_enabled() {
        let mut cfg = tiny_cfg();
        cfg.mise = false;
        cfg.alt = false;
        let params = cfg.init_params();
        let scene = generate_scene(2, &cfg.scene, &cfg.spec).unwrap();
        let out = forward_pipeline(&scene, &params, &cfg).unwrap();
        assert!(out.losses.tda > 0.0);
    }

    #[test]
    fn invalid_lattice_rejected() {
        let mut cfg = tiny_cfg();
        cfg.alt = true;
        cfg.alt_mode = AltMode::None;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.tda = true;
        cfg.encoder_layers = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.dims.classes = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut cfg = tiny_cfg();
        cfg.steps = 0;
        let (ckpt, curve, _) = train_loop(&cfg).unwrap();
        assert!(curve.is_empty());
        assert_eq!(ckpt.params, cfg.init_params());
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny_cfg();
        let (a_ck, a_curve, a_m) = train_loop(&cfg).unwrap();
        let (b_ck, b_curve, b_m) = train_loop(&cfg).unwrap();
        assert_eq!(a_curve, b_curve);
        assert_eq!(a_ck.params, b_ck.params);
        assert_eq!(a_m.map, b_m.map);
    }

    #[test]
    fn loss_curve_is_finite_and_moves() {
        let mut cfg = tiny_cfg();
        cfg.steps = 6;
        let (_, curve, _) = train_loop(&cfg).unwrap();
        assert_eq!(curve.len(), 6);
        assert!(curve.iter().all(|l| l.is_finite()));
        assert_ne!(curve[0], curve[5]);
    }

    #[test]
    fn checkpoint_round_trips() {
        let mut cfg = tiny_cfg();
        cfg.steps = 1;
        let (ckpt, _, _) = train_loop(&cfg).unwrap();
        let text = serde_json::to_string(&ckpt).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn ablation_tables_have_expected_row_counts() {
        let base = tiny_cfg();
        assert_eq!(ablation_rows(&base, AblationTable::IVa).len(), 4);
        assert_eq!(ablation_rows(&base, AblationTable::IVb).len(), 4);
        assert_eq!(ablation_rows(&base, AblationTable::IVc).len(), 4);
        assert_eq!(ablation_rows(&base, AblationTable::IVd).len(), 4);
        assert_eq!(ablation_rows(&base, AblationTable::IVe).len(), 3);
        assert_eq!(ablation_rows(&base, AblationTable::IVg).len(), 2);
        assert_eq!(ablation_rows(&base, AblationTable::IVh).len(), 2);
        // first IVa row is the all-off baseline
        let (label, cfg) = &ablation_rows(&base, AblationTable::IVa)[0];
        assert_eq!(label, "baseline");
        assert!(!cfg.tda && !cfg.mise && !cfg.alt);
    }

    #[test]
    fn ablation_csv_is_shaped_like_the_table() {
        let mut base = tiny_cfg();
        base.steps = 1;
        base.val_scenes = 1;
        let csv = ablation_run(&base, AblationTable::IVh).unwrap();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "setting,map");
        assert!(lines[1].starts_with("space_channel,"));
        assert!(lines[2].starts_with("channel_space,"));
    }

    #[test]
    fn single_modality_configs_run() {
        for m in [PipeModality::CameraOnly, PipeModality::LidarOnly] {
            let mut cfg = tiny_cfg();
            cfg.modality = m;
            let params = cfg.init_params();
            let scene = generate_scene(4, &cfg.scene, &cfg.spec).unwrap();
            let out = forward_pipeline(&scene, &params, &cfg).unwrap();
            assert!(out.losses.total.is_finite());
        }
    }
}
