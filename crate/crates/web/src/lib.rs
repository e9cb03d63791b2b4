//! Browser demo over the core library, compiled to WebAssembly.
//!
//! The plain functions return serializable structs and are what the tests
//! exercise; the `#[wasm_bindgen]` wrappers hand JSON strings to the page.

use chrono::NaiveDate;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use intervalrec::dataset::{sample_candidates_including, ItemCatalog, UserSequence, SECONDS_PER_DAY};
use intervalrec::embedders::{normalize_interval, IntervalEmbedder};
use intervalrec::interval_attention::{align, iia_forward, IiaParams};
use intervalrec::prompt::{build_prompt, Mode, PromptConfig};
use intervalrec::seed;
use intervalrec::synthetic::titles;
use intervalrec::tensor::Matrix;

pub const D_LLM: usize = 8;
pub const D_Q: usize = 4;
pub const HEADS: usize = 2;
pub const HIDDEN: usize = 16;
/// Intervals beyond this are rejected; the embedder input is ln(1 + t).
pub const MAX_DAYS: f64 = 36_500.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionMap {
    pub labels: Vec<String>,
    /// `heads[h][r][c]`: weight of item c in the output at position r.
    pub heads: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curve {
    pub days: Vec<f64>,
    pub normalized: Vec<f64>,
    /// `dims[k][i]`: coordinate k of the embedding of `days[i]`.
    pub dims: Vec<Vec<f64>>,
}

fn embedder(s: u64, d: usize) -> IntervalEmbedder {
    IntervalEmbedder::init(HIDDEN, d, &mut seed::rng(seed::derive(s, &["demo-embedder"])))
}

fn check_days(t: f64) -> Result<f64, String> {
    if t.is_finite() && (0.0..=MAX_DAYS).contains(&t) {
        Ok(t)
    } else {
        Err(format!("interval {t} is outside 0..={MAX_DAYS} days"))
    }
}

/// Comma- or whitespace-separated day counts.
pub fn parse_days(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("{s:?} is not a number")).and_then(check_days))
        .collect()
}

/// Attention of every head over a history whose gaps are `intervals`.
/// Item embeddings are random; only the intervals drive the queries.
pub fn attention_map(intervals: &[f64], s: u64) -> Result<AttentionMap, String> {
    if intervals.len() > 30 {
        return Err("at most 30 intervals".into());
    }
    for &t in intervals {
        check_days(t)?;
    }
    let n = intervals.len() + 1;
    let mut rng = seed::rng(seed::derive(s, &["demo-iia"]));
    let mut params = IiaParams::init(HEADS, D_LLM, D_Q, &mut rng);
    for (_, m) in params.named_mut() {
        *m = m.scale(3.0);
    }
    let x = Matrix::uniform(n, D_LLM, 1.0, &mut rng);
    let z = if intervals.is_empty() {
        Matrix::zeros(0, D_LLM)
    } else {
        embedder(s, D_LLM).embed(intervals).map_err(|e| e.to_string())?
    };
    let seq = align(&x, &z).map_err(|e| e.to_string())?;
    let (_, cache) = iia_forward(&seq, &params).map_err(|e| e.to_string())?;
    let mut labels = vec!["item 1".to_string()];
    labels.extend(intervals.iter().enumerate().map(|(k, t)| format!("item {} (+{t}d)", k + 2)));
    let heads = cache.heads.iter().map(|h| (0..n).map(|r| h.attn.row(r).to_vec()).collect()).collect();
    Ok(AttentionMap { labels, heads })
}

/// The interval embedding at `points` evenly spaced day counts in
/// `0..=max_days`, one curve per output coordinate.
pub fn interval_curve(max_days: f64, points: usize, dims: usize, s: u64) -> Result<Curve, String> {
    check_days(max_days)?;
    if !(2..=2000).contains(&points) || !(1..=16).contains(&dims) {
        return Err("points must be in 2..=2000 and dims in 1..=16".into());
    }
    let days: Vec<f64> = (0..points).map(|i| max_days * i as f64 / (points - 1) as f64).collect();
    let normalized = days.iter().map(|&t| normalize_interval(t)).collect::<intervalrec::Result<Vec<_>>>().map_err(|e| e.to_string())?;
    let out = embedder(s, dims).embed(&days).map_err(|e| e.to_string())?;
    let dims = (0..dims).map(|k| (0..points).map(|i| out.get(i, k)).collect()).collect();
    Ok(Curve { days, normalized, dims })
}

/// Lines of `YYYY-MM-DD title`, oldest first.
pub fn parse_history(text: &str) -> Result<Vec<(String, i64)>, String> {
    let mut out = Vec::new();
    for (k, line) in text.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let (date, title) = line.split_once(char::is_whitespace).ok_or_else(|| format!("line {}: expected a date and a title", k + 1))?;
        let day = NaiveDate::parse_from_str(date, "%Y-%m-%d").map_err(|e| format!("line {}: {date:?}: {e}", k + 1))?;
        let t = day.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp();
        if out.last().is_some_and(|&(_, prev)| t < prev) {
            return Err(format!("line {}: dates must not decrease", k + 1));
        }
        out.push((title.trim().to_string(), t));
    }
    if out.is_empty() {
        return Err("history is empty".into());
    }
    Ok(out)
}

/// The recommendation prompt for a typed history. Candidates are the
/// history-free filler catalog with the first filler as the answer.
pub fn render_prompt(history: &str, mode: &str, domain: &str, max_history: usize, s: u64) -> Result<String, String> {
    let mode = Mode::parse(mode).map_err(|e| e.to_string())?;
    let events = parse_history(history)?;
    let mut catalog = ItemCatalog::default();
    let mut ids = Vec::new();
    let events: Vec<(String, String, i64)> = events
        .into_iter()
        .enumerate()
        .map(|(k, (title, t))| {
            let id = format!("h{k}");
            catalog.insert(id.clone(), title.clone(), 1);
            ids.push(id.clone());
            (id, title, t)
        })
        .collect();
    for (k, title) in titles(25, s).into_iter().enumerate() {
        catalog.insert(format!("c{k:02}"), title, 1);
    }
    let seq = UserSequence::from_events("demo", events);
    let cands = sample_candidates_including("demo", "c00", &[], &catalog, &ids, s).map_err(|e| e.to_string())?;
    let config = PromptConfig { domain: domain.trim().to_string(), max_history: max_history.max(1) };
    let prompt = build_prompt(&seq, &cands, mode, &config).map_err(|e| e.to_string())?;
    Ok(prompt.render())
}

/// Days between consecutive history lines, for display next to the prompt.
pub fn history_gaps(history: &str) -> Result<Vec<i64>, String> {
    let events = parse_history(history)?;
    Ok(events.windows(2).map(|w| (w[1].1 - w[0].1) / SECONDS_PER_DAY).collect())
}

fn js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = attentionMap)]
pub fn attention_map_js(intervals: &str, seed: u32) -> Result<String, JsError> {
    js(parse_days(intervals).and_then(|d| attention_map(&d, seed.into())))
}

#[wasm_bindgen(js_name = intervalCurve)]
pub fn interval_curve_js(max_days: f64, points: u32, dims: u32, seed: u32) -> Result<String, JsError> {
    js(interval_curve(max_days, points as usize, dims as usize, seed.into()))
}

#[wasm_bindgen(js_name = renderPrompt)]
pub fn render_prompt_js(history: &str, mode: &str, domain: &str, max_history: u32, seed: u32) -> Result<String, JsError> {
    render_prompt(history, mode, domain, max_history as usize, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = modes)]
pub fn modes_js() -> Vec<String> {
    Mode::ALL.iter().map(|m| m.name().to_string()).collect()
}
