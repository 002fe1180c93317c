//! WebAssembly bindings for a static demo page. The `*_impl` functions
//! hold the logic so they can be tested natively.

use usleep::cohort::{age_group, AgeGroupScheme};
use usleep::preprocess::{robust_scale_clip, N_CLASSES};
use usleep::train::majority_vote;
use wasm_bindgen::prelude::*;

/// Median/IQR scaling with clipping. Empty output for a flat signal.
pub fn scale_impl(signal: &[f64]) -> Vec<f64> {
    robust_scale_clip(signal).map(|(s, _)| s).unwrap_or_default()
}

/// Votes `streams` flattened probability streams of equal length
/// (`epochs x 5` each); returns one class index per epoch.
pub fn vote_impl(probs: &[f64], streams: usize) -> Result<Vec<u8>, String> {
    if streams == 0 || probs.len() % streams != 0 {
        return Err(format!("{} values cannot be split into {streams} streams", probs.len()));
    }
    let len = probs.len() / streams;
    if len % N_CLASSES != 0 {
        return Err(format!("stream length {len} is not a multiple of {N_CLASSES}"));
    }
    let split: Vec<Vec<f64>> = probs.chunks(len).map(<[f64]>::to_vec).collect();
    let classes = majority_vote(&split).map_err(|e| e.to_string())?;
    Ok(classes.into_iter().map(|c| c.index() as u8).collect())
}

/// Age-group name of `age` under a scheme of `groups` groups (1, 2 or 7).
/// A negative age means unknown.
pub fn age_group_impl(age: f64, groups: usize) -> Result<String, String> {
    let scheme = AgeGroupScheme::new(groups).map_err(|e| e.to_string())?;
    let age = (age >= 0.0).then_some(age);
    let g = age_group(age, scheme, "input").map_err(|e| e.to_string())?;
    Ok(scheme.name(g).to_string())
}

#[wasm_bindgen]
pub fn robust_scale(signal: &[f64]) -> Vec<f64> {
    scale_impl(signal)
}

#[wasm_bindgen]
pub fn vote(probs: &[f64], streams: usize) -> Result<Vec<u8>, JsError> {
    vote_impl(probs, streams).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn group_of_age(age: f64, groups: usize) -> Result<String, JsError> {
    age_group_impl(age, groups).map_err(|e| JsError::new(&e))
}
