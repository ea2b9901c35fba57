//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string; errors come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use hman::geometry::{iou, positives_for, Source};
use hman::objective::{pool, Pooling};
use hman::{enumerate_candidates, DatasetProfile, MomentSpan};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct CandidateView {
    index: usize,
    /// Layer number, or `None` for the charades side branch.
    layer: Option<usize>,
    start: u32,
    end: u32,
    start_s: f64,
    end_s: f64,
}

#[derive(Serialize)]
struct GeometryView {
    profile: String,
    base_len: usize,
    unit_seconds: f64,
    candidates: Vec<CandidateView>,
}

#[derive(Serialize)]
struct RelevancePoint {
    beta: f64,
    lse: f64,
    upper_bound: f64,
}

#[derive(Serialize)]
struct RelevanceView {
    max: f64,
    average: f64,
    curve: Vec<RelevancePoint>,
}

#[derive(Serialize)]
struct PositiveView {
    index: usize,
    iou: f64,
    positive: bool,
}

fn profile(name: &str) -> Result<DatasetProfile, String> {
    DatasetProfile::by_name(name).ok_or_else(|| format!("unknown profile `{name}`"))
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn geometry(name: &str) -> Result<GeometryView, String> {
    let p = profile(name)?;
    let set = enumerate_candidates(&p).map_err(|e| e.to_string())?;
    let candidates = set
        .candidates
        .iter()
        .enumerate()
        .map(|(index, c)| CandidateView {
            index,
            layer: match c.source {
                Source::Layer(l) => Some(l),
                Source::Branch => None,
            },
            start: c.span.start_unit,
            end: c.span.end_unit,
            start_s: c.span.start_seconds(),
            end_s: c.span.end_seconds(),
        })
        .collect();
    Ok(GeometryView {
        profile: p.name.clone(),
        base_len: set.base_len,
        unit_seconds: p.unit_seconds(),
        candidates,
    })
}

fn relevance(sims: &[f64], betas: &[f64]) -> Result<RelevanceView, String> {
    if sims.is_empty() {
        return Err("enter at least one similarity".into());
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let average = pool(sims, Pooling::Average, None).map_err(|e| e.to_string())?;
    let ln_n = (sims.len() as f64).ln();
    let curve = betas
        .iter()
        .map(|&beta| {
            let lse = pool(sims, Pooling::LogSumExp { beta }, None).map_err(|e| e.to_string())?;
            Ok(RelevancePoint {
                beta,
                lse,
                upper_bound: max + ln_n / beta,
            })
        })
        .collect::<Result<_, String>>()?;
    Ok(RelevanceView { max, average, curve })
}

fn positives(name: &str, start: u32, end: u32, threshold: f64) -> Result<Vec<PositiveView>, String> {
    let p = profile(name)?;
    let set = enumerate_candidates(&p).map_err(|e| e.to_string())?;
    let gt = MomentSpan::new(start, end, p.unit_seconds()).map_err(|e| e.to_string())?;
    let chosen = positives_for(&gt, &set, threshold)
        .map_err(|e| e.to_string())?
        .unwrap_or_default();
    set.candidates
        .iter()
        .enumerate()
        .map(|(index, c)| {
            Ok(PositiveView {
                index,
                iou: iou(&c.span, &gt).map_err(|e| e.to_string())?,
                positive: chosen.contains(&index),
            })
        })
        .collect()
}

/// Candidate spans of a dataset profile.
#[wasm_bindgen]
pub fn candidate_geometry(profile: &str) -> String {
    to_json(geometry(profile))
}

/// LogSumExp relevance of `sims` at each β, with its bounds and the mean.
#[wasm_bindgen]
pub fn relevance_curve(sims: &[f64], betas: &[f64]) -> String {
    to_json(relevance(sims, betas))
}

/// IoU of every candidate against `[start, end)` and the positive set at
/// `threshold`.
#[wasm_bindgen]
pub fn positive_candidates(profile: &str, start: u32, end: u32, threshold: f64) -> String {
    to_json(positives(profile, start, end, threshold))
}
