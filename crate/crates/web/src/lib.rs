//! Browser bindings for a small interactive demo.
//!
//! Each exported function takes plain numbers or JSON text and returns JSON
//! text. The `*_json` functions hold the logic so they can be tested natively.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use triad_core::cvm::{vote, ModelOpinion};
use triad_core::egroi::{run_egroi, EgroiConfig};
use triad_core::map_io::ImageMeta;
use triad_core::metrics::{normalize_map, pixel_auroc, threshold_sweep};
use triad_core::synth::random_fixture;
use triad_core::Label;

/// Largest synthetic map edge the demo accepts.
pub const MAX_SIDE: usize = 512;

#[derive(Debug, Serialize)]
pub struct FixtureView {
    pub width: usize,
    pub height: usize,
    /// Min-max normalized scores, row-major.
    pub scores: Vec<f64>,
    pub gt: Vec<bool>,
}

#[derive(Debug, Serialize)]
struct SweepView {
    pixel_auroc: Option<f64>,
    rows: Vec<SweepRow>,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    threshold: f64,
    tpr: f64,
    fpr: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionParams {
    pub threshold: f64,
    pub box_side: usize,
    pub iou_merge: f64,
    pub cap: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VoteInput {
    zero: ModelOpinion,
    one: ModelOpinion,
}

fn check_size(width: usize, height: usize) -> Result<(), String> {
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(format!("map size must lie in 1..={MAX_SIDE}, got {width}x{height}"));
    }
    Ok(())
}

pub fn fixture(width: usize, height: usize, seed: u64) -> Result<FixtureView, String> {
    check_size(width, height)?;
    let f = random_fixture(width, height, 3, seed);
    Ok(FixtureView {
        width,
        height,
        scores: normalize_map(&f.map).scores().to_vec(),
        gt: f.gt.bits().to_vec(),
    })
}

pub fn fixture_json(width: usize, height: usize, seed: u64) -> Result<String, String> {
    to_json(&fixture(width, height, seed)?)
}

/// Pooled TPR/FPR for comma-separated thresholds on one synthetic fixture.
pub fn sweep_json(width: usize, height: usize, seed: u64, thresholds: &str) -> Result<String, String> {
    check_size(width, height)?;
    let ts = thresholds
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("bad threshold {s:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if ts.is_empty() {
        return Err("no thresholds given".into());
    }
    let f = random_fixture(width, height, 3, seed);
    let map = normalize_map(&f.map);
    let pairs = [(&map, &f.gt)];
    let rows = threshold_sweep(&pairs, &ts).map_err(|e| e.to_string())?;
    let view = SweepView {
        pixel_auroc: pixel_auroc(&pairs).ok(),
        rows: rows
            .into_iter()
            .map(|r| SweepRow {
                threshold: r.threshold,
                tpr: r.rates.tpr,
                fpr: r.rates.fpr,
            })
            .collect(),
    };
    to_json(&view)
}

/// Region manifest for one synthetic fixture; `params` is a JSON object.
pub fn regions_json(width: usize, height: usize, seed: u64, params: &str) -> Result<String, String> {
    check_size(width, height)?;
    let p: RegionParams = serde_json::from_str(params).map_err(|e| e.to_string())?;
    let config = EgroiConfig {
        threshold: p.threshold,
        box_side: p.box_side,
        iou_merge: p.iou_merge,
        cap: p.cap,
        ..EgroiConfig::default()
    };
    let f = random_fixture(width, height, 3, seed);
    let meta = ImageMeta {
        width,
        height,
        product_class: "synthetic".into(),
        sample_id: format!("seed{seed}"),
        label: if f.gt.count_true() > 0 { Label::Abnormal } else { Label::Normal },
    };
    let out = run_egroi(&meta, None, &f.map, &config).map_err(|e| e.to_string())?;
    to_json(&out.manifest)
}

/// Confidence vote; `input` is `{"zero": opinion, "one": opinion}`.
pub fn vote_json(input: &str) -> Result<String, String> {
    let v: VoteInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    for o in [&v.zero, &v.one] {
        if !o.normal_score_query.is_finite() || !o.normal_score_reference.is_finite() {
            return Err("scores must be finite".into());
        }
    }
    to_json(&vote(&v.zero, &v.one))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn js<T>(r: Result<T, String>) -> Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn fixture_map(width: usize, height: usize, seed: u32) -> Result<String, JsValue> {
    js(fixture_json(width, height, seed.into()))
}

#[wasm_bindgen]
pub fn sweep(width: usize, height: usize, seed: u32, thresholds: &str) -> Result<String, JsValue> {
    js(sweep_json(width, height, seed.into(), thresholds))
}

#[wasm_bindgen]
pub fn regions(width: usize, height: usize, seed: u32, params: &str) -> Result<String, JsValue> {
    js(regions_json(width, height, seed.into(), params))
}

#[wasm_bindgen]
pub fn cvm_vote(input: &str) -> Result<String, JsValue> {
    js(vote_json(input))
}

