//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function returns a JSON string. The `*_json` functions hold
//! the logic and run natively as well.

use std::cell::RefCell;

use fpf_core::archgen::{build_architecture, ArchConfig};
use fpf_core::matcher::Matcher;
use fpf_core::metrics::nrmse;
use fpf_core::phantom::{corrupt, forward_simulate, generate_phantom};
use fpf_core::signal::{build_dictionary, simulate_fingerprint, Dictionary, DictionaryOptions, ParameterGrid, SequenceTrain, TissueParams};
use fpf_core::types::{MapKind, ParametricMaps};
use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const MAX_FRAMES: usize = 256;
const MAX_SIZE: usize = 128;

fn check_frames(frames: usize) -> Result<(), String> {
    if frames == 0 || frames > MAX_FRAMES {
        return Err(format!("frames must lie in [1, {MAX_FRAMES}]"));
    }
    Ok(())
}

#[derive(Serialize)]
struct Curve {
    frames: usize,
    flip_angle_deg: Vec<f64>,
    magnitude: Vec<f64>,
    real: Vec<f64>,
    imag: Vec<f64>,
}

/// Noise-free fingerprint of one tissue under the default sequence train.
pub fn fingerprint_json(ff: f64, t1_h2o: f64, t1_fat: f64, delta_f: f64, b1: f64, frames: usize) -> Result<String, String> {
    check_frames(frames)?;
    let seq = SequenceTrain::default_train(frames);
    let tissue = TissueParams { ff, t1_h2o, t1_fat, delta_f, b1 };
    let fp = simulate_fingerprint(&seq, &tissue).map_err(|e| e.to_string())?;
    let curve = Curve {
        frames,
        flip_angle_deg: seq.flip_angle_deg.clone(),
        magnitude: fp.iter().map(|c| c.norm()).collect(),
        real: fp.iter().map(|c| c.re).collect(),
        imag: fp.iter().map(|c| c.im).collect(),
    };
    serde_json::to_string(&curve).map_err(|e| e.to_string())
}

/// Realize an architecture from an `ArchConfig` JSON object.
pub fn build_arch_json(config: &str) -> Result<String, String> {
    let cfg: ArchConfig = serde_json::from_str(config).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    let spec = build_architecture(&cfg).map_err(|e| e.to_string())?;
    serde_json::to_string(&spec).map_err(|e| e.to_string())
}

thread_local! {
    static DICT: RefCell<Option<Dictionary>> = const { RefCell::new(None) };
}

fn with_dictionary<T>(frames: usize, f: impl FnOnce(&Dictionary) -> Result<T, String>) -> Result<T, String> {
    DICT.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.as_ref().is_none_or(|d| d.frames() != frames) {
            let seq = SequenceTrain::default_train(frames);
            let dict = build_dictionary(&seq, &ParameterGrid::desk_default(), DictionaryOptions::default())
                .map_err(|e| e.to_string())?;
            *slot = Some(dict);
        }
        f(slot.as_ref().expect("dictionary just built"))
    })
}

fn maps_value(maps: &ParametricMaps) -> Value {
    let mut obj = serde_json::Map::new();
    for k in MapKind::ALL {
        obj.insert(k.name().into(), json!(maps.map(k).iter().copied().collect::<Vec<f64>>()));
    }
    Value::Object(obj)
}

/// Forge an on-grid phantom, simulate and optionally corrupt it, then
/// dictionary-match it. `snr_db <= 0` or non-finite means noise-free and
/// `spokes == 0` means full sampling.
pub fn phantom_match_json(size: usize, frames: usize, seed: u64, snr_db: f64, spokes: usize) -> Result<String, String> {
    check_frames(frames)?;
    if !(8..=MAX_SIZE).contains(&size) {
        return Err(format!("size must lie in [8, {MAX_SIZE}]"));
    }
    let grid = ParameterGrid::desk_default();
    let seq = SequenceTrain::default_train(frames);
    let phantom = generate_phantom(size, size, 5, seed, &grid, true).map_err(|e| e.to_string())?;
    let clean = forward_simulate(&phantom, &seq).map_err(|e| e.to_string())?;
    let snr = if snr_db.is_finite() && snr_db > 0.0 { snr_db } else { f64::INFINITY };
    let spokes = (spokes > 0).then_some(spokes);
    let image = corrupt(&clean, snr, spokes, seed ^ 0x5eed).map_err(|e| e.to_string())?;
    let matched = with_dictionary(frames, |dict| {
        let m = Matcher::new(dict).map_err(|e| e.to_string())?;
        m.match_image(&image, Some(&phantom.foreground_mask)).map_err(|e| e.to_string())
    })?;
    let mut errors = serde_json::Map::new();
    let mut ranges = serde_json::Map::new();
    for k in MapKind::ALL {
        let e = nrmse(phantom.maps.map(k), matched.maps.map(k), Some(phantom.foreground_mask.view())).ok();
        errors.insert(k.name().into(), json!(e));
        ranges.insert(k.name().into(), json!([grid.min(k), grid.max(k)]));
    }
    let out = json!({
        "size": size,
        "frames": frames,
        "truth": maps_value(&phantom.maps),
        "matched": maps_value(&matched.maps),
        "foreground": phantom.foreground_mask.iter().map(|&m| m as u8).collect::<Vec<u8>>(),
        "nrmse": errors,
        "ranges": ranges,
    });
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn fingerprint(ff: f64, t1_h2o: f64, t1_fat: f64, delta_f: f64, b1: f64, frames: usize) -> Result<String, JsValue> {
    fingerprint_json(ff, t1_h2o, t1_fat, delta_f, b1, frames).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn build_arch(config: &str) -> Result<String, JsValue> {
    build_arch_json(config).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn phantom_match(size: usize, frames: usize, seed: u64, snr_db: f64, spokes: usize) -> Result<String, JsValue> {
    phantom_match_json(size, frames, seed, snr_db, spokes).map_err(|e| JsValue::from_str(&e))
}
