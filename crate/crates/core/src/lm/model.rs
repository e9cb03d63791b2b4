//! Trainable parameters θ, the tape forward pass, the option-letter loss and
//! constrained decoding.

use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Gradients, Tape, Var};
use crate::checkpoint::NamedTensors;
use crate::dataset::{CandidateSet, UserSequence, LETTERS};
use crate::embedders::{normalize_interval, pool_rows, IntervalCache, IntervalEmbedder};
use crate::error::{Error, Result};
use crate::interval_attention::{align, iia_backward, iia_forward, AlignedSequences, IiaCache, IiaParams};
use crate::prompt::{build_prompt, tokenize_prompt, Mode, Piece, PromptConfig, TokenizedPrompt};
use crate::seed;
use crate::tensor::Matrix;
use crate::tokenizer::{Tokenizer, MARKERS};

use super::backbone::Backbone;

pub const THETA_FORMAT: &str = "intervalrec_theta_v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

impl AdapterConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IiaConfig {
    pub heads: usize,
    pub d_q: usize,
}

impl Default for IiaConfig {
    fn default() -> Self {
        Self { heads: 2, d_q: 256 }
    }
}

/// Low-rank factors on the query and value projections of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapters {
    pub aq: Matrix,
    pub bq: Matrix,
    pub av: Matrix,
    pub bv: Matrix,
}

/// Everything training may change: adapters, marker embeddings, the
/// interval embedder and the IIA layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub adapter: AdapterConfig,
    pub adapters: Vec<LayerAdapters>,
    /// Rows follow [`MARKERS`].
    pub markers: Matrix,
    pub embedder: IntervalEmbedder,
    pub iia: IiaParams,
}

impl Theta {
    /// A ~ N(0, 1/d), B = 0, markers copied from the frozen table.
    pub fn init(backbone: &Backbone, tokenizer: &Tokenizer, adapter: AdapterConfig, iia: IiaConfig, hidden: usize, seed: u64) -> Result<Self> {
        if adapter.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let d = backbone.config.d_model;
        let mut rng = seed::rng(seed::derive(seed, &["theta"]));
        let std = 1.0 / (d as f64).sqrt();
        let adapters = (0..backbone.config.layers)
            .map(|_| LayerAdapters {
                aq: Matrix::randn(d, adapter.rank, std, &mut rng),
                bq: Matrix::zeros(adapter.rank, d),
                av: Matrix::randn(d, adapter.rank, std, &mut rng),
                bv: Matrix::zeros(adapter.rank, d),
            })
            .collect();
        let mut markers = Matrix::zeros(MARKERS.len(), d);
        for (k, m) in MARKERS.iter().enumerate() {
            markers.row_mut(k).copy_from_slice(backbone.tokens.row(tokenizer.require(m)?));
        }
        let embedder = IntervalEmbedder::init(hidden, d, &mut rng);
        let iia = IiaParams::init(iia.heads, d, iia.d_q, &mut rng);
        Ok(Self { adapter, adapters, markers, embedder, iia })
    }

    /// All-zero θ of the given shape.
    pub fn zeros(layers: usize, d: usize, adapter: AdapterConfig, iia: IiaConfig, hidden: usize) -> Self {
        let r = adapter.rank;
        Self {
            adapter,
            adapters: (0..layers)
                .map(|_| LayerAdapters { aq: Matrix::zeros(d, r), bq: Matrix::zeros(r, d), av: Matrix::zeros(d, r), bv: Matrix::zeros(r, d) })
                .collect(),
            markers: Matrix::zeros(MARKERS.len(), d),
            embedder: IntervalEmbedder::zeros(hidden, d),
            iia: IiaParams::zeros(iia.heads, d, iia.d_q),
        }
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, a) in self.adapters.iter().enumerate() {
            for (n, m) in [("Aq", &a.aq), ("Bq", &a.bq), ("Av", &a.av), ("Bv", &a.bv)] {
                out.push((format!("lora.layer{l}.{n}"), m));
            }
        }
        out.push(("markers".to_string(), &self.markers));
        out.extend(self.embedder.named().into_iter().map(|(n, m)| (n.to_string(), m)));
        out.extend(self.iia.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (l, a) in self.adapters.iter_mut().enumerate() {
            for (n, m) in [("Aq", &mut a.aq), ("Bq", &mut a.bq), ("Av", &mut a.av), ("Bv", &mut a.bv)] {
                out.push((format!("lora.layer{l}.{n}"), m));
            }
        }
        out.push(("markers".to_string(), &mut self.markers));
        out.extend(self.embedder.named_mut().into_iter().map(|(n, m)| (n.to_string(), m)));
        out.extend(self.iia.named_mut());
        out
    }

    pub fn to_tensors(&self) -> NamedTensors {
        let mut t = NamedTensors::new(THETA_FORMAT);
        for (name, m) in self.named() {
            t.insert(name, m.clone());
        }
        t
    }

    /// Overwrites every tensor from `t`, checking shapes against `self`.
    pub fn load_tensors(&mut self, t: &NamedTensors) -> Result<()> {
        for (name, m) in self.named_mut() {
            *m = t.expect(&name, m.rows(), m.cols())?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.named().into_iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect()
    }
}

/// One prompt ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub user_id: String,
    pub prompt: TokenizedPrompt,
    /// Title token ids per history item, oldest first.
    pub titles: Vec<Vec<usize>>,
    /// Day gaps between consecutive history items.
    pub intervals: Vec<f64>,
}

pub fn encode_example(
    seq: &UserSequence,
    cands: &CandidateSet,
    mode: Mode,
    prompt: &PromptConfig,
    tokenizer: &Tokenizer,
) -> Result<EncodedExample> {
    let p = build_prompt(seq, cands, mode, prompt)?;
    let seq = seq.truncate_recent(prompt.max_history.max(1));
    Ok(EncodedExample {
        user_id: seq.user_id.clone(),
        prompt: tokenize_prompt(&p, tokenizer)?,
        titles: seq.titles.iter().map(|t| tokenizer.encode(t)).collect(),
        intervals: seq.intervals.iter().map(|&t| t as f64).collect(),
    })
}

/// Frozen backbone, tokenizer and mode: everything except θ.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub tokenizer: Tokenizer,
    pub mode: Mode,
    marker_ids: [usize; 4],
    letter_ids: Vec<usize>,
}

/// Tape handles of θ for one graph, in [`Theta::named`] order.
struct ThetaVars {
    all: Vec<Var>,
    layers: usize,
}

impl ThetaVars {
    fn adapter(&self, l: usize) -> [Var; 4] {
        let b = 4 * l;
        [self.all[b], self.all[b + 1], self.all[b + 2], self.all[b + 3]]
    }
    fn markers(&self) -> Var {
        self.all[4 * self.layers]
    }
    fn embedder(&self) -> [Var; 4] {
        let b = 4 * self.layers + 1;
        [self.all[b], self.all[b + 1], self.all[b + 2], self.all[b + 3]]
    }
    fn iia(&self) -> &[Var] {
        &self.all[4 * self.layers + 5..]
    }
}

struct EmbedderOp {
    embedder: IntervalEmbedder,
    cache: IntervalCache,
}

impl CustomOp for EmbedderOp {
    fn backward(&self, grad_out: &Matrix, _inputs: &[&Matrix], _needs: &[bool]) -> Vec<Option<Matrix>> {
        let g = self.embedder.backward(&self.cache, grad_out);
        vec![Some(g.w1), Some(g.b1), Some(g.w2), Some(g.b2)]
    }
}

struct IiaOp {
    seq: AlignedSequences,
    params: IiaParams,
    cache: IiaCache,
}

impl CustomOp for IiaOp {
    fn backward(&self, grad_out: &Matrix, _inputs: &[&Matrix], needs: &[bool]) -> Vec<Option<Matrix>> {
        let g = iia_backward(&self.seq, &self.params, &self.cache, grad_out).expect("shapes fixed at forward");
        let mut out = vec![needs[0].then_some(g.x), needs[1].then_some(g.z)];
        for h in g.heads {
            out.extend([Some(h.wq), Some(h.wk), Some(h.wv)]);
        }
        out.push(Some(g.wo));
        out
    }
}

impl Model {
    pub fn new(backbone: Backbone, tokenizer: Tokenizer, mode: Mode) -> Result<Self> {
        if tokenizer.len() != backbone.config.vocab {
            return Err(Error::Config(format!(
                "tokenizer has {} tokens but backbone vocabulary is {}",
                tokenizer.len(),
                backbone.config.vocab
            )));
        }
        let mut marker_ids = [0; 4];
        for (k, m) in MARKERS.iter().enumerate() {
            marker_ids[k] = tokenizer.require(m)?;
        }
        let letter_ids = tokenizer.letter_ids();
        Ok(Self { backbone, tokenizer, mode, marker_ids, letter_ids })
    }

    pub fn letter_ids(&self) -> &[usize] {
        &self.letter_ids
    }

    /// Pooled frozen title embeddings, one row per history item.
    pub fn item_matrix(&self, ex: &EncodedExample) -> Result<Matrix> {
        let d = self.backbone.config.d_model;
        let mut x = Matrix::zeros(ex.titles.len(), d);
        for (k, ids) in ex.titles.iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            let rows = Matrix::from_rows(&ids.iter().map(|&i| self.backbone.tokens.row(i).to_vec()).collect::<Vec<_>>())?;
            x.row_mut(k).copy_from_slice(&pool_rows(&rows));
        }
        Ok(x)
    }

    fn theta_vars(&self, tape: &mut Tape, theta: &Theta, train: bool) -> ThetaVars {
        let all = theta.named().into_iter().map(|(_, m)| tape.leaf(m.clone(), train)).collect();
        ThetaVars { all, layers: theta.adapters.len() }
    }

    /// Builds the graph up to the `1 × V` logits at the answer position.
    fn graph(&self, tape: &mut Tape, theta: &Theta, vars: &ThetaVars, ex: &EncodedExample) -> Result<Var> {
        let cfg = &self.backbone.config;
        let d = cfg.d_model;
        let len = ex.prompt.len();
        if len > cfg.context {
            return Err(Error::ContextOverflow { len, context: cfg.context });
        }
        if ex.prompt.interval_slots > 0 && !self.mode.interval_slots() || ex.prompt.item_slots > 0 && !self.mode.item_slots() {
            return Err(Error::Assembly(format!("prompt slots do not match mode {}", self.mode)));
        }

        // Interval embeddings, one row per gap.
        let z = if self.mode.interval_slots() && !ex.intervals.is_empty() {
            let inputs = ex.intervals.iter().map(|&t| normalize_interval(t)).collect::<Result<Vec<_>>>()?;
            let (value, cache) = theta.embedder.forward_normalized(&inputs)?;
            let op = EmbedderOp { embedder: theta.embedder.clone(), cache };
            Some(tape.custom(value, &vars.embedder(), Box::new(op)))
        } else {
            None
        };

        // Interval-infused item embeddings.
        let x_hat = if self.mode.item_slots() {
            let x = self.item_matrix(ex)?;
            let zero = tape.constant(Matrix::zeros(1, d));
            let z_al = match z {
                Some(z) => tape.concat_rows(&[zero, z]),
                None => zero,
            };
            let z_raw = match z {
                Some(z) => tape.value(z).clone(),
                None => Matrix::zeros(0, d),
            };
            let seq = align(&x, &z_raw)?;
            let (value, cache) = iia_forward(&seq, &theta.iia)?;
            let xv = tape.constant(x);
            let mut inputs = vec![xv, z_al];
            inputs.extend_from_slice(vars.iia());
            let op = IiaOp { seq, params: theta.iia.clone(), cache };
            Some(tape.custom(value, &inputs, Box::new(op)))
        } else {
            None
        };

        // Assembly: runs of plain tokens, marker rows and slot rows.
        let table = tape.constant(self.backbone.tokens.clone());
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        let flush = |tape: &mut Tape, run: &mut Vec<usize>, parts: &mut Vec<Var>| {
            if !run.is_empty() {
                parts.push(tape.gather(table, run));
                run.clear();
            }
        };
        for p in &ex.prompt.pieces {
            match *p {
                Piece::Token { id, .. } => {
                    if id >= cfg.vocab {
                        return Err(Error::Vocabulary(format!("token id {id} outside vocabulary of {}", cfg.vocab)));
                    }
                    if let Some(k) = self.marker_ids.iter().position(|&m| m == id) {
                        flush(tape, &mut run, &mut parts);
                        parts.push(tape.gather(vars.markers(), &[k]));
                    } else {
                        run.push(id);
                    }
                }
                Piece::ItemSlot(k) => {
                    flush(tape, &mut run, &mut parts);
                    let src = x_hat.ok_or_else(|| Error::Assembly(format!("item slot {k} has no embedding")))?;
                    if k >= tape.value(src).rows() {
                        return Err(Error::Assembly(format!("item slot {k} has no embedding")));
                    }
                    parts.push(tape.slice_rows(src, k, 1));
                }
                Piece::IntervalSlot(k) => {
                    flush(tape, &mut run, &mut parts);
                    let src = z.ok_or_else(|| Error::Assembly(format!("interval slot {k} has no embedding")))?;
                    if k >= tape.value(src).rows() {
                        return Err(Error::Assembly(format!("interval slot {k} has no embedding")));
                    }
                    parts.push(tape.slice_rows(src, k, 1));
                }
            }
        }
        flush(tape, &mut run, &mut parts);
        let emb = tape.concat_rows(&parts);
        let mut extra = self.backbone.positions.slice_rows(0, len);
        for (r, o) in ex.prompt.options().into_iter().enumerate() {
            if let Some(i) = o {
                for (e, s) in extra.row_mut(r).iter_mut().zip(self.backbone.segments.row(i as usize)) {
                    *e += s;
                }
            }
        }
        let extra = tape.constant(extra);
        let mut x = tape.add(emb, extra);

        let hd = cfg.head_dim();
        let inv = 1.0 / (hd as f64).sqrt();
        let s = theta.adapter.scaling();
        for (l, b) in self.backbone.blocks.iter().enumerate() {
            let last = l + 1 == self.backbone.blocks.len();
            let [aq, bq, av, bv] = vars.adapter(l);
            let xq = if last { tape.slice_rows(x, len - 1, 1) } else { x };
            let wq = tape.constant(b.wq.clone());
            let wk = tape.constant(b.wk.clone());
            let wv = tape.constant(b.wv.clone());
            let wo = tape.constant(b.wo.clone());
            let q0 = tape.matmul(xq, wq);
            let q1 = tape.matmul(xq, aq);
            let q1 = tape.matmul(q1, bq);
            let q1 = tape.scale(q1, s);
            let q = tape.add(q0, q1);
            let k = tape.matmul(x, wk);
            let v0 = tape.matmul(x, wv);
            let v1 = tape.matmul(x, av);
            let v1 = tape.matmul(v1, bv);
            let v1 = tape.scale(v1, s);
            let v = tape.add(v0, v1);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = tape.slice_cols(q, h * hd, hd);
                let kh = tape.slice_cols(k, h * hd, hd);
                let vh = tape.slice_cols(v, h * hd, hd);
                let sc = tape.matmul_t(qh, kh);
                let sc = tape.scale(sc, inv);
                let a = if last { tape.softmax_rows(sc) } else { tape.causal_softmax(sc) };
                heads.push(tape.matmul(a, vh));
            }
            let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let o = tape.matmul(o, wo);
            x = tape.add(xq, o);
            if cfg.ffn > 0 {
                let w1 = tape.constant(b.w1.clone());
                let b1 = tape.constant(b.b1.clone());
                let w2 = tape.constant(b.w2.clone());
                let b2 = tape.constant(b.b2.clone());
                let h = tape.matmul(x, w1);
                let h = tape.add_row(h, b1);
                let h = tape.gelu(h);
                let h = tape.matmul(h, w2);
                let h = tape.add_row(h, b2);
                x = tape.add(x, h);
            }
        }
        Ok(tape.matmul_t(x, table))
    }

    /// Next-token logits at the answer position.
    pub fn forward(&self, theta: &Theta, ex: &EncodedExample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.theta_vars(&mut tape, theta, false);
        let logits = self.graph(&mut tape, theta, &vars, ex)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// −log p(target letter) with the softmax over the full vocabulary.
    pub fn loss(&self, theta: &Theta, ex: &EncodedExample) -> Result<f64> {
        let logits = self.forward(theta, ex)?;
        Ok(-crate::autograd::log_softmax_at(&logits, self.target_token(ex)?))
    }

    fn target_token(&self, ex: &EncodedExample) -> Result<usize> {
        let t = ex.prompt.target_token;
        if !self.letter_ids.contains(&t) {
            return Err(Error::Config(format!("target token {t} is not an option letter")));
        }
        Ok(t)
    }

    /// Loss and θ gradients (in [`Theta::named`] order) for one example.
    pub fn loss_and_grad(&self, theta: &Theta, ex: &EncodedExample) -> Result<(f64, Vec<Matrix>)> {
        let target = self.target_token(ex)?;
        let mut tape = Tape::new();
        let vars = self.theta_vars(&mut tape, theta, true);
        let logits = self.graph(&mut tape, theta, &vars, ex)?;
        let loss = tape.nll(logits, target);
        let value = tape.value(loss).get(0, 0);
        let mut g: Gradients = tape.backward(loss);
        let grads = vars
            .all
            .iter()
            .map(|&v| g.take(v).unwrap_or_else(|| Matrix::zeros(tape.value(v).rows(), tape.value(v).cols())))
            .collect();
        Ok((value, grads))
    }

    pub fn predict(&self, theta: &Theta, ex: &EncodedExample) -> Result<char> {
        Ok(constrained_decode(&self.forward(theta, ex)?, &self.letter_ids))
    }
}

/// Argmax over the 20 option-letter ids; ties go to the earliest letter.
pub fn constrained_decode(logits: &[f64], letter_ids: &[usize]) -> char {
    let mut best = 0;
    for i in 1..letter_ids.len().min(LETTERS.len()) {
        if logits[letter_ids[i]] > logits[letter_ids[best]] {
            best = i;
        }
    }
    LETTERS[best]
}
