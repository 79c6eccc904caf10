//! Learnable parameters of the whole pipeline, their initialization, and
//! the registry used to route tape gradients back to named tensors.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel: Tensor, // [O, C, kh, kw]
    pub bias: Tensor,   // [O]
}

impl ConvParams {
    pub fn init(rng: &mut Rng, out_c: usize, in_c: usize, k: usize) -> ConvParams {
        let fan_in = (in_c * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = out_c * in_c * k * k;
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        // biases drawn like the kernels: an all-zero bias leaves every
        // dropped-out (all-zero) input cell exactly on the relu kink
        let bdata = (0..out_c).map(|_| rng.uniform(-bound, bound)).collect();
        ConvParams {
            kernel: Tensor::from_vec(&[out_c, in_c, k, k], data).unwrap(),
            bias: Tensor::from_vec(&[out_c], bdata).unwrap(),
        }
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize) -> ConvParams {
        ConvParams {
            kernel: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignEncoderParams {
    pub layers: Vec<ConvParams>,
}

impl AlignEncoderParams {
    pub fn init(rng: &mut Rng, channels: usize, n_layers: usize) -> AlignEncoderParams {
        AlignEncoderParams {
            layers: (0..n_layers).map(|_| ConvParams::init(rng, channels, channels, 3)).collect(),
        }
    }
}

/// Which attention form the modal-interaction stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    Global,
    Local,
    Deformable,
}

/// Parameters of one attention operator. All three modes carry the same
/// field set; unused fields stay at their initial values for the simpler
/// modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    pub heads: usize,
    pub points: usize,
    pub w_off: Tensor,  // [2MK, d]
    pub b_off: Tensor,  // [2MK]
    pub w_attn: Tensor, // [MK, d] (deformable) / [d, d] (global)
    pub b_attn: Tensor, // [MK] (deformable) / [9] (local)
    pub w_val: Tensor,  // [M, d, d]
    pub w_out: Tensor,  // [M, d, d]
}

impl AttnParams {
    pub fn init(mode: InteractionMode, d: usize, heads: usize, points: usize) -> AttnParams {
        let (heads, points) = match mode {
            InteractionMode::Deformable => (heads, points),
            InteractionMode::Local => (1, 9),
            InteractionMode::Global => (1, 1),
        };
        let mk = heads * points;
        let mut w_val = Tensor::zeros(&[heads, d, d]);
        let mut w_out = Tensor::zeros(&[heads, d, d]);
        for m in 0..heads {
            for i in 0..d {
                w_val.data[(m * d + i) * d + i] = 1.0;
                w_out.data[(m * d + i) * d + i] = 1.0 / heads as f64;
            }
        }
        let w_attn = match mode {
            InteractionMode::Global => Tensor::zeros(&[d, d]),
            _ => Tensor::zeros(&[mk, d]),
        };
        let b_attn = match mode {
            InteractionMode::Local => Tensor::zeros(&[9]),
            _ => Tensor::zeros(&[mk]),
        };
        AttnParams {
            heads,
            points,
            // zero-initialized offsets start as plain sampling
            w_off: Tensor::zeros(&[2 * mk, d]),
            b_off: Tensor::zeros(&[2 * mk]),
            w_attn,
            b_attn,
            w_val,
            w_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialtyHeadParams {
    pub mu_head: Vec<ConvParams>,  // C -> C -> 1, 3x3
    pub eps_head: Vec<ConvParams>, // C -> C -> 1, 3x3
}

impl SpecialtyHeadParams {
    pub fn init(rng: &mut Rng, channels: usize) -> SpecialtyHeadParams {
        SpecialtyHeadParams {
            mu_head: vec![
                ConvParams::init(rng, channels, channels, 3),
                ConvParams::init(rng, 1, channels, 3),
            ],
            eps_head: vec![
                ConvParams::init(rng, channels, channels, 3),
                ConvParams::init(rng, 1, channels, 3),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub sk_reduce: Tensor,   // [C/r, C]
    pub sk_reduce_b: Tensor, // [C/r]
    pub sk_expand_x: Tensor, // [C, C/r]
    pub sk_expand_x_b: Tensor,
    pub sk_expand_y: Tensor,
    pub sk_expand_y_b: Tensor,
    pub spatial: ConvParams, // 2C -> 1, 3x3
    pub merge: ConvParams,   // 2C -> C, 3x3
}

impl FusionParams {
    pub fn init(rng: &mut Rng, channels: usize, reduction: usize) -> FusionParams {
        let hidden = (channels / reduction).max(1);
        let lin = |rng: &mut Rng, o: usize, i: usize| {
            let bound = 1.0 / (i as f64).sqrt();
            Tensor::from_vec(
                &[o, i],
                (0..o * i).map(|_| rng.uniform(-bound, bound)).collect(),
            )
            .unwrap()
        };
        FusionParams {
            sk_reduce: lin(rng, hidden, channels),
            sk_reduce_b: Tensor::zeros(&[hidden]),
            sk_expand_x: lin(rng, channels, hidden),
            sk_expand_x_b: Tensor::zeros(&[channels]),
            sk_expand_y: lin(rng, channels, hidden),
            sk_expand_y_b: Tensor::zeros(&[channels]),
            spatial: ConvParams::init(rng, 1, 2 * channels, 3),
            merge: ConvParams::init(rng, channels, 2 * channels, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub cls: ConvParams, // C -> K, 1x1
    pub reg: ConvParams, // C -> 4, 1x1
}

impl HeadParams {
    pub fn init(rng: &mut Rng, channels: usize, classes: usize) -> HeadParams {
        let mut cls = ConvParams::init(rng, classes, channels, 1);
        // initial heatmap scores ~ 0.1
        for b in cls.bias.data.iter_mut() {
            *b = -2.19;
        }
        HeadParams {
            cls,
            reg: ConvParams::init(rng, 4, channels, 1),
        }
    }
}

/// Every learnable tensor of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub align_cam: AlignEncoderParams,
    pub align_lidar: AlignEncoderParams,
    pub hm_head_cam: ConvParams,
    pub hm_head_lidar: ConvParams,
    pub cross_cam: AttnParams,
    pub cross_lidar: AttnParams,
    pub self_cam: AttnParams,
    pub self_lidar: AttnParams,
    pub pe_conv_cam: ConvParams,
    pub pe_conv_lidar: ConvParams,
    pub spec_cam: SpecialtyHeadParams,
    pub spec_lidar: SpecialtyHeadParams,
    pub fusion: FusionParams,
    pub head: HeadParams,
}

/// Structural sizes the parameters were built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineDims {
    pub channels: usize,
    pub classes: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub sk_reduction: usize,
}

impl Default for PipelineDims {
    fn default() -> Self {
        PipelineDims {
            channels: 8,
            classes: 4,
            encoder_layers: 3,
            heads: 4,
            points: 4,
            sk_reduction: 4,
        }
    }
}

impl PipelineParams {
    pub fn init(seed: u64, dims: &PipelineDims, mode: InteractionMode) -> PipelineParams {
        let mut rng = Rng::new(seed).split(0x7061_7261_6d73);
        let (c, k) = (dims.channels, dims.classes);
        PipelineParams {
            align_cam: AlignEncoderParams::init(&mut rng, c, dims.encoder_layers),
            align_lidar: AlignEncoderParams::init(&mut rng, c, dims.encoder_layers),
            hm_head_cam: ConvParams::init(&mut rng, k, c, 1),
            hm_head_lidar: ConvParams::init(&mut rng, k, c, 1),
            cross_cam: AttnParams::init(mode, k, dims.heads, dims.points),
            cross_lidar: AttnParams::init(mode, k, dims.heads, dims.points),
            self_cam: AttnParams::init(mode, k, dims.heads, dims.points),
            self_lidar: AttnParams::init(mode, k, dims.heads, dims.points),
            // zero-initialized so the potential-energy gate starts as a no-op
            pe_conv_cam: ConvParams::zeros(c, 2 * k, 3),
            pe_conv_lidar: ConvParams::zeros(c, 2 * k, 3),
            spec_cam: SpecialtyHeadParams::init(&mut rng, c),
            spec_lidar: SpecialtyHeadParams::init(&mut rng, c),
            fusion: FusionParams::init(&mut rng, c, dims.sk_reduction),
            head: HeadParams::init(&mut rng, c, k),
        }
    }

    /// Named mutable references to every tensor, in a stable order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn push_conv<'a>(out: &mut Vec<(String, &'a mut Tensor)>, name: &str, c: &'a mut ConvParams) {
            out.push((format!("{name}.kernel"), &mut c.kernel));
            out.push((format!("{name}.bias"), &mut c.bias));
        }
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, l) in self.align_cam.layers.iter_mut().enumerate() {
            push_conv(&mut out, &format!("align_cam.{i}"), l);
        }
        for (i, l) in self.align_lidar.layers.iter_mut().enumerate() {
            push_conv(&mut out, &format!("align_lidar.{i}"), l);
        }
        push_conv(&mut out, "hm_head_cam", &mut self.hm_head_cam);
        push_conv(&mut out, "hm_head_lidar", &mut self.hm_head_lidar);
        for (name, a) in [
            ("cross_cam", &mut self.cross_cam),
            ("cross_lidar", &mut self.cross_lidar),
            ("self_cam", &mut self.self_cam),
            ("self_lidar", &mut self.self_lidar),
        ] {
            out.push((format!("{name}.w_off"), &mut a.w_off));
            out.push((format!("{name}.b_off"), &mut a.b_off));
            out.push((format!("{name}.w_attn"), &mut a.w_attn));
            out.push((format!("{name}.b_attn"), &mut a.b_attn));
            out.push((format!("{name}.w_val"), &mut a.w_val));
            out.push((format!("{name}.w_out"), &mut a.w_out));
        }
        push_conv(&mut out, "pe_conv_cam", &mut self.pe_conv_cam);
        push_conv(&mut out, "pe_conv_lidar", &mut self.pe_conv_lidar);
        for (name, s) in [("spec_cam", &mut self.spec_cam), ("spec_lidar", &mut self.spec_lidar)] {
            for (i, l) in s.mu_head.iter_mut().enumerate() {
                push_conv(&mut out, &format!("{name}.mu.{i}"), l);
            }
            for (i, l) in s.eps_head.iter_mut().enumerate() {
                push_conv(&mut out, &format!("{name}.eps.{i}"), l);
            }
        }
        let f = &mut self.fusion;
        out.push(("fusion.sk_reduce".into(), &mut f.sk_reduce));
        out.push(("fusion.sk_reduce_b".into(), &mut f.sk_reduce_b));
        out.push(("fusion.sk_expand_x".into(), &mut f.sk_expand_x));
        out.push(("fusion.sk_expand_x_b".into(), &mut f.sk_expand_x_b));
        out.push(("fusion.sk_expand_y".into(), &mut f.sk_expand_y));
        out.push(("fusion.sk_expand_y_b".into(), &mut f.sk_expand_y_b));
        push_conv(&mut out, "fusion.spatial", &mut f.spatial);
        push_conv(&mut out, "fusion.merge", &mut f.merge);
        push_conv(&mut out, "head.cls", &mut self.head.cls);
        push_conv(&mut out, "head.reg", &mut self.head.reg);
        out
    }
}

/// Maps parameter names to their leaf nodes on a tape so gradients can be
/// routed back after `backward`.
#[derive(Default)]
pub struct ParamRegistry {
    pub entries: Vec<(String, Var)>,
}

impl ParamRegistry {
    pub fn leaf(&mut self, tape: &mut Tape, name: &str, t: &Tensor) -> Var {
        let v = tape.leaf(t.clone());
        self.entries.push((name.to_string(), v));
        v
    }

    pub fn leaf_conv(&mut self, tape: &mut Tape, name: &str, c: &ConvParams) -> (Var, Var) {
        (
            self.leaf(tape, &format!("{name}.kernel"), &c.kernel),
            self.leaf(tape, &format!("{name}.bias"), &c.bias),
        )
    }
}
