//! Modal interaction: attention between modal heatmaps and construction of
//! the potential-energy maps that later modulate the features.

use crate::error::{DynafuseError, Result};
use crate::params::{AttnParams, ConvParams, InteractionMode, ParamRegistry};
use crate::tape::{Tape, Var};

/// One attention pass with `query` attending into `value`. Reference
/// points are the query grid's own cell centers.
pub fn attend(
    tape: &mut Tape,
    reg: &mut ParamRegistry,
    name: &str,
    mode: InteractionMode,
    query: Var,
    value: Var,
    p: &AttnParams,
) -> Result<Var> {
    if tape.value(query).shape != tape.value(value).shape {
        return Err(DynafuseError::ShapeMismatch {
            expected: format!("{:?}", tape.value(query).shape),
            got: format!("{:?}", tape.value(value).shape),
        });
    }
    match mode {
        InteractionMode::Deformable => {
            let w_off = reg.leaf(tape, &format!("{name}.w_off"), &p.w_off);
            let b_off = reg.leaf(tape, &format!("{name}.b_off"), &p.b_off);
            let w_attn = reg.leaf(tape, &format!("{name}.w_attn"), &p.w_attn);
            let b_attn = reg.leaf(tape, &format!("{name}.b_attn"), &p.b_attn);
            let w_val = reg.leaf(tape, &format!("{name}.w_val"), &p.w_val);
            let w_out = reg.leaf(tape, &format!("{name}.w_out"), &p.w_out);
            tape.deform_attn(
                query, value, w_off, b_off, w_attn, b_attn, w_val, w_out, p.heads, p.points,
            )
        }
        InteractionMode::Local => {
            let b_attn = reg.leaf(tape, &format!("{name}.b_attn"), &p.b_attn);
            let w_val = reg.leaf(tape, &format!("{name}.w_val"), &p.w_val);
            let w_out = reg.leaf(tape, &format!("{name}.w_out"), &p.w_out);
            Ok(tape.local_attn(query, value, b_attn, w_val, w_out))
        }
        InteractionMode::Global => {
            let w_attn = reg.leaf(tape, &format!("{name}.w_attn"), &p.w_attn);
            let w_val = reg.leaf(tape, &format!("{name}.w_val"), &p.w_val);
            let w_out = reg.leaf(tape, &format!("{name}.w_out"), &p.w_out);
            Ok(tape.global_attn(query, value, w_attn, w_val, w_out))
        }
    }
}

/// Cross interaction: Px* = attn(Fx*, Fy*), Py* = attn(Fy*, Fx*), with
/// separate parameter sets per direction.
#[allow(clippy::too_many_arguments)]
pub fn cross_interaction(
    tape: &mut Tape,
    reg: &mut ParamRegistry,
    mode: InteractionMode,
    fx_star: Var,
    fy_star: Var,
    p_cam: &AttnParams,
    p_lidar: &AttnParams,
) -> Result<(Var, Var)> {
    let px = attend(tape, reg, "cross_cam", mode, fx_star, fy_star, p_cam)?;
    let py = attend(tape, reg, "cross_lidar", mode, fy_star, fx_star, p_lidar)?;
    Ok((px, py))
}

/// Self interaction: the modality serves as both query and value.
pub fn self_interaction(
    tape: &mut Tape,
    reg: &mut ParamRegistry,
    name: &str,
    mode: InteractionMode,
    fz_star: Var,
    p: &AttnParams,
) -> Result<Var> {
    attend(tape, reg, name, mode, fz_star, fz_star, p)
}

/// P_z = Conv(Concat(P_z*, H_z*)), shape-preserving 3x3 conv to the modal
/// feature channel count.
pub fn potential_energy_map(
    tape: &mut Tape,
    reg: &mut ParamRegistry,
    name: &str,
    pz_star: Var,
    hz_star: Var,
    conv: &ConvParams,
) -> Result<Var> {
    if tape.value(pz_star).shape != tape.value(hz_star).shape {
        return Err(DynafuseError::ShapeMismatch {
            expected: format!("{:?}", tape.value(pz_star).shape),
            got: format!("{:?}", tape.value(hz_star).shape),
        });
    }
    let cat = tape.concat_channels(pz_star, hz_star);
    let (k, b) = reg.leaf_conv(tape, name, conv);
    Ok(tape.conv2d(cat, k, b))
}
