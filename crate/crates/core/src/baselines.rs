//! Item-id sequential rankers: a GRU encoder, causal self-attention, and
//! self-attention with learned pairwise-gap biases. All score the same 20
//! candidates by dot product with the final user vector.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::NamedTensors;
use crate::dataset::{CandidateSet, UserSequence, LETTERS, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::optim::{AdamHyper, AdamW};
use crate::seed;
use crate::tensor::Matrix;

pub const RANKER_FORMAT: &str = "intervalrec_ranker_v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Recurrent,
    SelfAttn,
    TimeAwareSelfAttn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Recurrent, Variant::SelfAttn, Variant::TimeAwareSelfAttn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Recurrent => "RECURRENT",
            Variant::SelfAttn => "SELF_ATTN",
            Variant::TimeAwareSelfAttn => "TIME_AWARE_SELF_ATTN",
        }
    }

    /// Method label used in prediction dumps and reports.
    pub fn method(self) -> &'static str {
        match self {
            Variant::Recurrent => "GRU4Rec",
            Variant::SelfAttn => "SASRec",
            Variant::TimeAwareSelfAttn => "TiSASRec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.method().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ranker variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerConfig {
    pub variant: Variant,
    pub d: usize,
    pub max_len: usize,
    /// Pairwise gaps above this many days share the last bucket.
    pub clip_days: usize,
    pub blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Sampled negatives per training position.
    pub negatives: usize,
    pub seed: u64,
    pub hyper: AdamHyper,
}

impl RankerConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            d: 64,
            max_len: 50,
            clip_days: 256,
            blocks: 1,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            negatives: 19,
            seed: 0,
            hyper: AdamHyper::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.max_len == 0 || self.batch_size == 0 || self.negatives == 0 {
            return Err(Error::Config(format!("ranker dimensions must be positive: {self:?}")));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerModel {
    pub config: RankerConfig,
    /// Item id → row of the `items` table, ascending id order.
    pub item_index: BTreeMap<String, usize>,
    pub names: Vec<String>,
    pub params: Vec<Matrix>,
}

const ITEMS: usize = 0;

fn gru_names() -> Vec<String> {
    ["Wz", "Wr", "Wn", "Uz", "Ur", "Un", "bz", "br", "bn"].iter().map(|n| format!("gru.{n}")).collect()
}

fn block_names(b: usize, time_aware: bool) -> Vec<String> {
    let mut v: Vec<String> = ["Wq", "Wk", "Wv", "ln1.g", "ln1.b", "W1", "b1", "W2", "b2", "ln2.g", "ln2.b"]
        .iter()
        .map(|n| format!("block{b}.{n}"))
        .collect();
    if time_aware {
        v.push(format!("block{b}.R"));
    }
    v
}

impl RankerModel {
    pub fn init<'a>(config: RankerConfig, item_ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        config.validate()?;
        let mut ids: Vec<&str> = item_ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::InvalidInput("ranker needs at least one item".into()));
        }
        let item_index: BTreeMap<String, usize> = ids.iter().enumerate().map(|(i, id)| (id.to_string(), i)).collect();
        let d = config.d;
        let mut rng = seed::rng(seed::derive(config.seed, &["ranker", config.variant.name()]));
        let std = 1.0 / (d as f64).sqrt();
        let mut names = vec!["items".to_string()];
        let mut params = vec![Matrix::randn(item_index.len(), d, std, &mut rng)];
        match config.variant {
            Variant::Recurrent => {
                for n in gru_names() {
                    let m = if n.contains(".b") { Matrix::zeros(1, d) } else { Matrix::randn(d, d, std, &mut rng) };
                    names.push(n);
                    params.push(m);
                }
            }
            Variant::SelfAttn | Variant::TimeAwareSelfAttn => {
                names.push("positions".into());
                params.push(Matrix::randn(config.max_len, d, std, &mut rng));
                let ta = config.variant == Variant::TimeAwareSelfAttn;
                for b in 0..config.blocks {
                    for n in block_names(b, ta) {
                        let m = match n.rsplit('.').next().unwrap() {
                            "g" => Matrix::filled(1, d, 1.0),
                            "b" | "b1" | "b2" => Matrix::zeros(1, d),
                            "R" => Matrix::randn(config.clip_days + 1, d, std, &mut rng),
                            _ => Matrix::randn(d, d, std, &mut rng),
                        };
                        names.push(n);
                        params.push(m);
                    }
                }
                names.push("final.g".into());
                params.push(Matrix::filled(1, d, 1.0));
                names.push("final.b".into());
                params.push(Matrix::zeros(1, d));
            }
        }
        Ok(Self { config, item_index, names, params })
    }

    fn index_of(&self, name: &str) -> usize {
        self.names.iter().position(|n| n == name).expect("known parameter name")
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn item_row(&self, item_id: &str) -> Result<usize> {
        self.item_index
            .get(item_id)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("item {item_id:?} is not in the ranker's item table")))
    }

    fn leaves(&self, tape: &mut Tape, train: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), train)).collect()
    }

    /// Encoder outputs at every position of `seq` (already truncated).
    fn encode_graph(&self, tape: &mut Tape, vars: &[Var], rows: &[usize], timestamps: &[i64]) -> Result<Var> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidInput("cannot encode an empty sequence".into()));
        }
        let d = self.config.d;
        let x = tape.gather(vars[ITEMS], rows);
        match self.config.variant {
            Variant::Recurrent => {
                let v = |name: &str| vars[self.index_of(&format!("gru.{name}"))];
                let (wz, wr, wn, uz, ur, un, bz, br, bn) = (v("Wz"), v("Wr"), v("Wn"), v("Uz"), v("Ur"), v("Un"), v("bz"), v("br"), v("bn"));
                let xz = tape.matmul(x, wz);
                let xz = tape.add_row(xz, bz);
                let xr = tape.matmul(x, wr);
                let xr = tape.add_row(xr, br);
                let xn = tape.matmul(x, wn);
                let xn = tape.add_row(xn, bn);
                let mut h = tape.constant(Matrix::zeros(1, d));
                let mut outs = Vec::with_capacity(n);
                for t in 0..n {
                    let xzt = tape.slice_rows(xz, t, 1);
                    let xrt = tape.slice_rows(xr, t, 1);
                    let xnt = tape.slice_rows(xn, t, 1);
                    let hz = tape.matmul(h, uz);
                    let z = tape.add(xzt, hz);
                    let z = tape.sigmoid(z);
                    let hr = tape.matmul(h, ur);
                    let r = tape.add(xrt, hr);
                    let r = tape.sigmoid(r);
                    let hn = tape.matmul(h, un);
                    let rh = tape.mul(r, hn);
                    let cand = tape.add(xnt, rh);
                    let cand = tape.tanh(cand);
                    // h' = (1 - z)·n + z·h = n + z·(h - n)
                    let neg = tape.scale(cand, -1.0);
                    let diff = tape.add(h, neg);
                    let zd = tape.mul(z, diff);
                    h = tape.add(cand, zd);
                    outs.push(h);
                }
                Ok(tape.concat_rows(&outs))
            }
            Variant::SelfAttn | Variant::TimeAwareSelfAttn => {
                if n > self.config.max_len {
                    return Err(Error::ContextOverflow { len: n, context: self.config.max_len });
                }
                let pos = tape.slice_rows(vars[self.index_of("positions")], 0, n);
                let xs = tape.scale(x, (d as f64).sqrt());
                let mut h = tape.add(xs, pos);
                let buckets = if self.config.variant == Variant::TimeAwareSelfAttn {
                    Some(gap_buckets(timestamps, self.config.clip_days))
                } else {
                    None
                };
                let inv = 1.0 / (d as f64).sqrt();
                for b in 0..self.config.blocks {
                    let v = |name: &str| vars[self.index_of(&format!("block{b}.{name}"))];
                    let a_in = tape.layer_norm(h, v("ln1.g"), v("ln1.b"));
                    let q = tape.matmul(a_in, v("Wq"));
                    let k = tape.matmul(a_in, v("Wk"));
                    let val = tape.matmul(a_in, v("Wv"));
                    let mut s = tape.matmul_t(q, k);
                    if let Some(bk) = &buckets {
                        let rel = tape.relative_scores(q, v("R"), bk);
                        s = tape.add(s, rel);
                    }
                    let s = tape.scale(s, inv);
                    let a = tape.causal_softmax(s);
                    let att = tape.matmul(a, val);
                    h = tape.add(h, att);
                    let f_in = tape.layer_norm(h, v("ln2.g"), v("ln2.b"));
                    let f = tape.matmul(f_in, v("W1"));
                    let f = tape.add_row(f, v("b1"));
                    let f = tape.gelu(f);
                    let f = tape.matmul(f, v("W2"));
                    let f = tape.add_row(f, v("b2"));
                    h = tape.add(h, f);
                }
                Ok(tape.layer_norm(h, vars[self.index_of("final.g")], vars[self.index_of("final.b")]))
            }
        }
    }

    fn rows_of(&self, seq: &UserSequence) -> Result<Vec<usize>> {
        seq.items.iter().map(|i| self.item_row(i)).collect()
    }

    /// Encoder outputs for every position of the most recent `max_len`
    /// items.
    pub fn encode_all(&self, seq: &UserSequence) -> Result<Matrix> {
        if seq.is_empty() {
            return Err(Error::InvalidInput(format!("user {}: empty sequence", seq.user_id)));
        }
        let seq = seq.truncate_recent(self.config.max_len);
        let rows = self.rows_of(&seq)?;
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, false);
        let out = self.encode_graph(&mut tape, &vars, &rows, &seq.timestamps)?;
        Ok(tape.value(out).clone())
    }

    /// User vector: the encoder output at the final position.
    pub fn encode(&self, seq: &UserSequence) -> Result<Vec<f64>> {
        let m = self.encode_all(seq)?;
        Ok(m.row(m.rows() - 1).to_vec())
    }

    pub fn score_candidates(&self, user: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        let items = &self.params[ITEMS];
        cands
            .options
            .iter()
            .map(|o| Ok(crate::tensor::dot(user, items.row(self.item_row(&o.item_id)?))))
            .collect()
    }

    /// Highest-scoring letter; ties go to the earliest letter.
    pub fn predict(&self, seq: &UserSequence, cands: &CandidateSet) -> Result<char> {
        let scores = self.score_candidates(&self.encode(seq)?, cands)?;
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        Ok(LETTERS[best])
    }

    /// Summed next-item loss over every position of one sequence against
    /// the target plus sampled negatives, with gradients.
    pub fn sequence_loss_and_grad(&self, seq: &UserSequence, negatives: &[Vec<usize>]) -> Result<(f64, usize, Vec<Matrix>)> {
        let seq = seq.truncate_recent(self.config.max_len + 1);
        let n = seq.len();
        if n < 2 {
            return Ok((0.0, 0, self.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect()));
        }
        let rows = self.rows_of(&seq)?;
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, true);
        let out = self.encode_graph(&mut tape, &vars, &rows[..n - 1], &seq.timestamps[..n - 1])?;
        let mut ids = Vec::new();
        for t in 0..n - 1 {
            ids.push(rows[t + 1]);
            ids.extend_from_slice(&negatives[t]);
        }
        let per = 1 + negatives.first().map_or(0, Vec::len);
        let cand = tape.gather(vars[ITEMS], &ids);
        let mut losses = Vec::with_capacity(n - 1);
        for t in 0..n - 1 {
            if negatives[t].len() + 1 != per {
                return Err(Error::InvalidInput("every position needs the same number of negatives".into()));
            }
            let u = tape.slice_rows(out, t, 1);
            let c = tape.slice_rows(cand, t * per, per);
            let logits = tape.matmul_t(u, c);
            losses.push(tape.nll(logits, 0));
        }
        let all = tape.concat_cols(&losses);
        let ones = tape.constant(Matrix::filled(losses.len(), 1, 1.0));
        let total = tape.matmul(all, ones);
        let value = tape.value(total).get(0, 0);
        let mut g = tape.backward(total);
        let grads = vars
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect();
        Ok((value, n - 1, grads))
    }

    pub fn to_tensors(&self) -> Result<NamedTensors> {
        let mut t = NamedTensors::new(RANKER_FORMAT);
        for (n, p) in self.names.iter().zip(&self.params) {
            t.insert(n.clone(), p.clone());
        }
        t.metadata = serde_json::json!({
            "config": self.config,
            "items": self.item_index.keys().collect::<Vec<_>>(),
        });
        Ok(t)
    }

    pub fn from_tensors(t: &NamedTensors) -> Result<Self> {
        t.require_format(RANKER_FORMAT)?;
        let config: RankerConfig = serde_json::from_value(t.metadata["config"].clone())?;
        let items: Vec<String> = serde_json::from_value(t.metadata["items"].clone())?;
        let mut m = Self::init(config, items.iter().map(String::as_str))?;
        for (n, p) in m.names.iter().zip(m.params.iter_mut()) {
            *p = t.expect(n, p.rows(), p.cols())?;
        }
        Ok(m)
    }
}

/// `min(|t_i − t_j| in whole days, clip)` for every pair, row-major.
pub fn gap_buckets(timestamps: &[i64], clip: usize) -> Vec<usize> {
    let n = timestamps.len();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let days = ((timestamps[i] - timestamps[j]).abs() / SECONDS_PER_DAY) as usize;
            out.push(days.min(clip));
        }
    }
    out
}

/// An evaluation instance: history plus the 20 lettered candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerExample {
    pub history: UserSequence,
    pub candidates: CandidateSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerState {
    pub model: RankerModel,
    pub best: RankerModel,
    pub best_val_hr1: Option<f64>,
    pub epochs: usize,
    pub log: Vec<(usize, f64, Option<f64>)>,
}

pub fn hit_rate(model: &RankerModel, examples: &[RankerExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::UndefinedMetric("HR@1 over zero examples".into()));
    }
    let preds: Vec<char> = examples.par_iter().map(|e| model.predict(&e.history, &e.candidates)).collect::<Result<_>>()?;
    let hits = preds.iter().zip(examples).filter(|(p, e)| **p == e.candidates.ground_truth_letter).count();
    Ok(hits as f64 / examples.len() as f64)
}

fn sample_negatives(model: &RankerModel, seq: &UserSequence, k: usize, s: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = seed::rng(s);
    let own: std::collections::HashSet<usize> = seq.items.iter().map(|i| model.item_row(i)).collect::<Result<_>>()?;
    let total = model.item_index.len();
    let pool: Vec<usize> = (0..total).filter(|r| !own.contains(r)).collect();
    let positions = seq.len().min(model.config.max_len + 1).saturating_sub(1);
    Ok((0..positions)
        .map(|_| {
            if pool.is_empty() {
                return vec![rng.gen_range(0..total); k];
            }
            (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        })
        .collect())
}

/// Next-item training over `sequences`, keeping the parameters with the
/// best validation HR@1. Sequences are consumed whole: every position
/// predicts its successor.
pub fn train_ranker(mut model: RankerModel, sequences: &[UserSequence], val: &[RankerExample], stop_at: Option<f64>) -> Result<RankerState> {
    let cfg = model.config.clone();
    cfg.validate()?;
    let mut opt = AdamW::new(&model.params);
    let mut state = RankerState { best: model.clone(), model: model.clone(), best_val_hr1: None, epochs: 0, log: Vec::new() };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &["ranker-epoch", &epoch.to_string()])));
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, usize, Vec<Matrix>)> = chunk
                .par_iter()
                .map(|&i| {
                    let seq = &sequences[i];
                    let negs = sample_negatives(&model, seq, cfg.negatives, seed::derive(cfg.seed, &["neg", &epoch.to_string(), &seq.user_id]))?;
                    model.sequence_loss_and_grad(seq, &negs)
                })
                .collect::<Result<_>>()?;
            let count: usize = parts.iter().map(|p| p.1).sum();
            if count == 0 {
                continue;
            }
            let mut grads: Vec<Matrix> = model.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            let mut loss = 0.0;
            for (l, _, g) in &parts {
                loss += l;
                for (a, b) in grads.iter_mut().zip(g) {
                    a.add_assign(b);
                }
            }
            for g in &mut grads {
                *g = g.scale(1.0 / count as f64);
            }
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "ranker {} loss diverged in epoch {epoch}; last finite epoch mean loss {:?}",
                    cfg.variant,
                    state.log.last().map(|r| r.1)
                )));
            }
            epoch_loss += loss;
            epoch_count += count;
            opt.step(model.params.iter_mut().collect(), &grads, cfg.lr, &cfg.hyper);
        }
        let hr = if val.is_empty() { None } else { Some(hit_rate(&model, val)?) };
        state.log.push((epoch, epoch_loss / epoch_count.max(1) as f64, hr));
        state.epochs = epoch + 1;
        if hr.is_none() || hr > state.best_val_hr1 {
            state.best = model.clone();
            state.best_val_hr1 = hr;
        }
        if hr.zip(stop_at).is_some_and(|(h, s)| h >= s) {
            break;
        }
    }
    state.model = model;
    Ok(state)
}
