//! C ABI for the dynafuse engine: opaque handles, integer error codes,
//! and a thread-local last-error message.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};


use dynafuse::error::DynafuseError;
use dynafuse::synth::generate_scene;
use dynafuse::train::{evaluate, train_loop, val_scene_set, Checkpoint, TrainConfig};
use dynafuse::Scene;

/// Error codes returned by every fallible function.
pub const DF_OK: i32 = 0;
pub const DF_ERR_INVALID_ARGUMENT: i32 = 1;
pub const DF_ERR_SHAPE_MISMATCH: i32 = 2;
pub const DF_ERR_CONFIG: i32 = 3;
pub const DF_ERR_DIVERGED: i32 = 4;
pub const DF_ERR_IO: i32 = 5;
pub const DF_ERR_SERDE: i32 = 6;
pub const DF_ERR_NULL_POINTER: i32 = 7;
pub const DF_ERR_UTF8: i32 = 8;
pub const DF_ERR_PANIC: i32 = 99;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_of(e: &DynafuseError) -> i32 {
    match e {
        DynafuseError::InvalidArgument(_) => DF_ERR_INVALID_ARGUMENT,
        DynafuseError::ShapeMismatch { .. } => DF_ERR_SHAPE_MISMATCH,
        DynafuseError::Config { .. } => DF_ERR_CONFIG,
        DynafuseError::Diverged { .. } => DF_ERR_DIVERGED,
        DynafuseError::Io { .. } => DF_ERR_IO,
        DynafuseError::Serde(_) => DF_ERR_SERDE,
    }
}

fn guard<F: FnOnce() -> i32>(f: F) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("panic inside dynafuse");
            DF_ERR_PANIC
        }
    }
}

/// Opaque scene handle.
pub struct DfScene {
    inner: Scene,
}

/// Opaque trained-model handle.
pub struct DfModel {
    inner: Checkpoint,
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, i32> {
    if p.is_null() {
        set_error("null string argument");
        return Err(DF_ERR_NULL_POINTER);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        DF_ERR_UTF8
    })
}

/// Most recent error message for this thread; valid until the next call.
#[no_mangle]
pub extern "C" fn df_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generate a synthetic scene with the default desk-scale configuration.
///
/// # Safety
/// `out` must be a valid pointer to a `*mut DfScene` slot.
#[no_mangle]
pub unsafe extern "C" fn df_scene_generate(seed: u64, out: *mut *mut DfScene) -> i32 {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return DF_ERR_NULL_POINTER;
        }
        let cfg = TrainConfig::default();
        match generate_scene(seed, &cfg.scene, &cfg.spec) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(DfScene { inner: s }));
                DF_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                code_of(&e)
            }
        }
    })
}

/// Number of ground-truth boxes in a scene; -1 on a null handle.
///
/// # Safety
/// `scene` must be null or a live handle from `df_scene_generate`.
#[no_mangle]
pub unsafe extern "C" fn df_scene_box_count(scene: *const DfScene) -> i64 {
    if scene.is_null() {
        return -1;
    }
    (*scene).inner.gt_boxes.len() as i64
}

/// Serialize a scene to JSON; the returned string must be released with
/// `df_string_free`.
///
/// # Safety
/// `scene` must be a live handle; `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn df_scene_to_json(scene: *const DfScene, out: *mut *mut c_char) -> i32 {
    guard(|| {
        if scene.is_null() || out.is_null() {
            set_error("null pointer");
            return DF_ERR_NULL_POINTER;
        }
        match serde_json::to_string(&(*scene).inner) {
            Ok(text) => {
                *out = CString::new(text).unwrap().into_raw();
                DF_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                DF_ERR_SERDE
            }
        }
    })
}

/// Release a scene handle. Null is a no-op.
///
/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn df_scene_free(scene: *mut DfScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Train a model from a JSON training configuration (`"{}"` for the
/// defaults, or any subset of the `TrainConfig` fields).
///
/// # Safety
/// `config_json` must be a valid C string; `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn df_train(config_json: *const c_char, out: *mut *mut DfModel) -> i32 {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return DF_ERR_NULL_POINTER;
        }
        let text = match str_arg(config_json) {
            Ok(t) => t,
            Err(c) => return c,
        };
        let cfg: TrainConfig = if text.trim() == "{}" {
            TrainConfig::default()
        } else {
            match merge_train_config(text) {
                Ok(c) => c,
                Err(e) => {
                    set_error(&e.to_string());
                    return code_of(&e);
                }
            }
        };
        match train_loop(&cfg) {
            Ok((ckpt, _, _)) => {
                *out = Box::into_raw(Box::new(DfModel { inner: ckpt }));
                DF_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                code_of(&e)
            }
        }
    })
}

fn merge_train_config(text: &str) -> dynafuse::Result<TrainConfig> {
    let mut doc = serde_json::to_value(TrainConfig::default())?;
    let over: serde_json::Value = serde_json::from_str(text)?;
    if let (serde_json::Value::Object(d), serde_json::Value::Object(o)) = (&mut doc, over) {
        for (k, v) in o {
            d.insert(k, v);
        }
    }
    Ok(serde_json::from_value(doc)?)
}

/// Evaluate a model on its own validation scene set; writes toy mAP.
///
/// # Safety
/// `model` must be a live handle; `out_map` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn df_model_eval(model: *const DfModel, out_map: *mut f64) -> i32 {
    guard(|| {
        if model.is_null() || out_map.is_null() {
            set_error("null pointer");
            return DF_ERR_NULL_POINTER;
        }
        let ckpt = &(*model).inner;
        let scenes = match val_scene_set(&ckpt.config) {
            Ok(s) => s,
            Err(e) => {
                set_error(&e.to_string());
                return code_of(&e);
            }
        };
        match evaluate(&ckpt.params, &ckpt.config, &scenes) {
            Ok(m) => {
                *out_map = m.map;
                DF_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                code_of(&e)
            }
        }
    })
}

/// Serialize a model checkpoint to JSON; release with `df_string_free`.
///
/// # Safety
/// `model` must be a live handle; `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn df_model_to_json(model: *const DfModel, out: *mut *mut c_char) -> i32 {
    guard(|| {
        if model.is_null() || out.is_null() {
            set_error("null pointer");
            return DF_ERR_NULL_POINTER;
        }
        match serde_json::to_string(&(*model).inner) {
            Ok(text) => {
                *out = CString::new(text).unwrap().into_raw();
                DF_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                DF_ERR_SERDE
            }
        }
    })
}

/// Rebuild a model handle from checkpoint JSON.
///
/// # Safety
/// `json` must be a valid C string; `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn df_model_from_json(json: *const c_char, out: *mut *mut DfModel) -> i32 {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return DF_ERR_NULL_POINTER;
        }
        let text = match str_arg(json) {
            Ok(t) => t,
            Err(c) => return c,
        };
        match serde_json::from_str::<Checkpoint>(text) {
            Ok(ckpt) => {
                *out = Box::into_raw(Box::new(DfModel { inner: ckpt }));
                DF_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                DF_ERR_SERDE
            }
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn df_model_free(model: *mut DfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be null or a string produced by a `*_to_json` call.
#[no_mangle]
pub unsafe extern "C" fn df_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn scene_round_trip_through_the_c_abi() {
        unsafe {
            let mut scene: *mut DfScene = ptr::null_mut();
            assert_eq!(df_scene_generate(5, &mut scene), DF_OK);
            assert!(df_scene_box_count(scene) >= 1);
            let mut text: *mut c_char = ptr::null_mut();
            assert_eq!(df_scene_to_json(scene, &mut text), DF_OK);
            let parsed: Scene =
                serde_json::from_str(CStr::from_ptr(text).to_str().unwrap()).unwrap();
            assert_eq!(parsed.seed, 5);
            df_string_free(text);
            df_scene_free(scene);
        }
    }

    #[test]
    fn null_handles_are_reported() {
        unsafe {
            assert_eq!(df_scene_box_count(ptr::null()), -1);
            let mut out: *mut DfScene = ptr::null_mut();
            assert_eq!(df_scene_generate(1, ptr::null_mut()), DF_ERR_NULL_POINTER);
            assert_eq!(df_scene_to_json(ptr::null(), &mut (ptr::null_mut())), DF_ERR_NULL_POINTER);
            let msg = CStr::from_ptr(df_last_error_message());
            assert!(!msg.to_bytes().is_empty());
            let _ = out;
            df_scene_free(ptr::null_mut());
            df_model_free(ptr::null_mut());
            df_string_free(ptr::null_mut());
        }
    }

    #[test]
    fn train_eval_round_trip() {
        unsafe {
            let cfg = r#"{"steps": 2, "train_scenes": 2, "val_scenes": 2,
                "encoder_layers": 1,
                "spec": {"x_min": -4.0, "x_max": 4.0, "y_min": -4.0, "y_max": 4.0, "cell_size": 1.0},
                "scene": {"channels": 8, "classes": 4, "n_boxes_min": 1, "n_boxes_max": 2,
                          "sigma_cam": 0.05, "sigma_pos": 1.0, "drop_rate": 0.5,
                          "drop_radius": 3.0, "confusion": 0.35,
                          "amplitudes": [1.0, 0.9, 0.8, 0.7]}}"#;
            let ccfg = CString::new(cfg).unwrap();
            let mut model: *mut DfModel = ptr::null_mut();
            assert_eq!(df_train(ccfg.as_ptr(), &mut model), DF_OK, "{:?}",
                CStr::from_ptr(df_last_error_message()));
            let mut map = -1.0;
            assert_eq!(df_model_eval(model, &mut map), DF_OK);
            assert!((0.0..=1.0).contains(&map));

            let mut text: *mut c_char = ptr::null_mut();
            assert_eq!(df_model_to_json(model, &mut text), DF_OK);
            let mut back: *mut DfModel = ptr::null_mut();
            assert_eq!(df_model_from_json(CStr::from_ptr(text).as_ptr(), &mut back), DF_OK);
            let mut map2 = -1.0;
            assert_eq!(df_model_eval(back, &mut map2), DF_OK);
            assert_eq!(map, map2);
            df_string_free(text);
            df_model_free(model);
            df_model_free(back);
        }
    }

    #[test]
    fn bad_config_sets_error_code_and_message() {
        unsafe {
            let ccfg = CString::new("{\"steps\": -3}").unwrap();
            let mut model: *mut DfModel = ptr::null_mut();
            let code = df_train(ccfg.as_ptr(), &mut model);
            assert_eq!(code, DF_ERR_SERDE);
            let msg = CStr::from_ptr(df_last_error_message()).to_str().unwrap();
            assert!(!msg.is_empty());
        }
    }
}
