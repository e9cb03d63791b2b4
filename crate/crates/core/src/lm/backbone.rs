//! Frozen decoder backbone: token, position and option-segment tables plus
//! residual attention/MLP blocks with a tied unembedding.
//!
//! Two initialisations ship. `random` is a plain small-weight network.
//! `structured_prior` is a tiny hand-set checkpoint that already performs
//! the three-step lookup the task needs (mark slots, gather the most recent
//! item slot into the answer position, match it against the option lines)
//! so the frozen-backbone training regime has something to adapt.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::NamedTensors;
use crate::dataset::NUM_CANDIDATES;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;
use crate::tokenizer::{Tokenizer, INTERVAL_OPEN, ITEM_OPEN};

pub const BACKBONE_FORMAT: &str = "intervalrec_backbone_v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Feed-forward width; 0 drops the MLP sublayer.
    pub ffn: usize,
    pub context: usize,
    pub vocab: usize,
}

impl BackboneConfig {
    pub fn desk(vocab: usize) -> Self {
        Self { layers: 4, d_model: 128, heads: 4, ffn: 512, context: 1024, vocab }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.context == 0 || self.vocab == 0 {
            return Err(Error::Config(format!("backbone dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("width {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneInit {
    Random,
    StructuredPrior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Block {
    fn small<R: Rng + ?Sized>(d: usize, ffn: usize, std: f64, rng: &mut R) -> Self {
        Self {
            wq: Matrix::randn(d, d, std, rng),
            wk: Matrix::randn(d, d, std, rng),
            wv: Matrix::randn(d, d, std, rng),
            wo: Matrix::randn(d, d, std, rng),
            w1: Matrix::randn(d, ffn, std, rng),
            b1: Matrix::zeros(1, ffn),
            w2: Matrix::randn(ffn, d, std, rng),
            b2: Matrix::zeros(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub tokens: Matrix,
    pub positions: Matrix,
    /// Row i is added to every token of option line i.
    pub segments: Matrix,
    pub blocks: Vec<Block>,
}

/// Dimension layout of the structured prior for head width `hd`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    hd: usize,
}

impl Layout {
    const PLANES: usize = 6;
    const CONTENT_SCALE: f64 = 4.0;

    fn content(&self) -> usize {
        self.hd
    }
    fn plane(&self, f: usize) -> (usize, usize) {
        (self.hd + 2 * f, self.hd + 2 * f + 1)
    }
    fn letter(&self, i: usize) -> usize {
        self.hd + 2 * Self::PLANES + i
    }
    fn flag(&self, k: usize) -> usize {
        self.hd + 2 * Self::PLANES + NUM_CANDIDATES + k
    }
    fn opt(&self) -> usize {
        self.flag(0)
    }
    fn item_seen(&self) -> usize {
        self.flag(1)
    }
    fn interval_seen(&self) -> usize {
        self.flag(2)
    }
    fn constant(&self) -> usize {
        self.flag(3)
    }
    fn ramp(&self) -> usize {
        self.flag(4)
    }
    fn item_open(&self) -> usize {
        self.flag(5)
    }
    fn interval_open(&self) -> usize {
        self.flag(6)
    }
    fn answer(&self) -> usize {
        self.flag(7)
    }
    fn width(&self) -> usize {
        self.flag(8)
    }
    fn omega(f: usize) -> f64 {
        0.5f64.powi(f as i32)
    }
}

/// Token that closes every prompt; its row carries the answer flag.
pub const ANSWER_TOKEN: &str = "is";

// Gains of the structured prior: previous-token sharpness, gather
// sharpness, match sharpness, option bonus, gather write gain, letter
// write gain.
const B0: f64 = 20.0;
const B1: f64 = 13.0;
const B2: f64 = 30.0;
const BOPT: f64 = 80.0;
const G1: f64 = 3.0;
const G2: f64 = 8.0;
const RAMP_SPAN: f64 = 32.0;
const NUISANCE_STD: f64 = 0.005;

impl Backbone {
    pub fn new(config: BackboneConfig, init: BackboneInit, tokenizer: &Tokenizer, seed: u64) -> Result<Self> {
        match init {
            BackboneInit::Random => Self::random(config, seed),
            BackboneInit::StructuredPrior => Self::structured_prior(config, tokenizer, seed),
        }
    }

    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, &["backbone", "random"]));
        let d = config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let tokens = Matrix::randn(config.vocab, d, 1.0, &mut rng);
        let positions = Matrix::randn(config.context, d, 0.1, &mut rng);
        let segments = Matrix::randn(NUM_CANDIDATES, d, 0.1, &mut rng);
        let blocks = (0..config.layers).map(|_| Block::small(d, config.ffn, std, &mut rng)).collect();
        Ok(Self { config, tokens, positions, segments, blocks })
    }

    /// Hand-set lookup circuit. Needs at least 3 layers, head width ≥ 24
    /// and `head width + 40 ≤ d_model`.
    pub fn structured_prior(config: BackboneConfig, tokenizer: &Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let hd = config.head_dim();
        let lay = Layout { hd };
        if config.layers < 3 || hd < 24 || lay.width() > config.d_model {
            return Err(Error::Config(format!(
                "structured prior needs ≥ 3 layers, head width ≥ 24 and head width + 40 ≤ d_model; got {config:?}"
            )));
        }
        if tokenizer.len() != config.vocab {
            return Err(Error::Config(format!("vocabulary {} differs from config {}", tokenizer.len(), config.vocab)));
        }
        let d = config.d_model;
        let nc = lay.content();
        let mut rng = seed::rng(seed::derive(seed, &["backbone", "structured"]));

        let mut tokens = Matrix::zeros(config.vocab, d);
        let letters = tokenizer.letter_ids();
        let scale = Layout::CONTENT_SCALE / (nc as f64).sqrt();
        for id in 0..config.vocab {
            if let Some(i) = letters.iter().position(|&l| l == id) {
                tokens.set(id, lay.letter(i), 1.0);
                continue;
            }
            let content = Matrix::randn(1, nc, scale, &mut rng);
            tokens.row_mut(id)[..nc].copy_from_slice(content.data());
        }
        tokens.set(tokenizer.require(ITEM_OPEN)?, lay.item_open(), 1.0);
        tokens.set(tokenizer.require(INTERVAL_OPEN)?, lay.interval_open(), 1.0);
        tokens.set(tokenizer.require(ANSWER_TOKEN)?, lay.answer(), 1.0);

        let mut positions = Matrix::zeros(config.context, d);
        for p in 0..config.context {
            for f in 0..Layout::PLANES {
                let (a, b) = lay.plane(f);
                let angle = p as f64 * Layout::omega(f);
                positions.set(p, a, 2.0 * angle.cos());
                positions.set(p, b, 2.0 * angle.sin());
            }
            positions.set(p, lay.constant(), 1.0);
            positions.set(p, lay.ramp(), p as f64 / RAMP_SPAN);
        }
        let mut segments = Matrix::zeros(NUM_CANDIDATES, d);
        for i in 0..NUM_CANDIDATES {
            segments.set(i, lay.letter(i), 1.0);
            segments.set(i, lay.opt(), 1.0);
        }

        let sc = (hd as f64).sqrt();
        let mut blocks: Vec<Block> = (0..config.layers).map(|_| Block::small(d, config.ffn, NUISANCE_STD, &mut rng)).collect();
        for b in blocks.iter_mut().take(3) {
            for w in [&mut b.wq, &mut b.wk, &mut b.wv] {
                for r in 0..d {
                    w.row_mut(r)[..hd].fill(0.0);
                }
            }
            for r in 0..hd {
                b.wo.row_mut(r).fill(0.0);
            }
        }

        // Layer 0, head 0: each position attends to its predecessor and
        // marks it as following an item or interval opener.
        let b = &mut blocks[0];
        for f in 0..Layout::PLANES {
            let (pa, pb) = lay.plane(f);
            let (s, c) = Layout::omega(f).sin_cos();
            let g = B0 * sc / 4.0;
            b.wq.set(pa, 2 * f, c * g);
            b.wq.set(pb, 2 * f, s * g);
            b.wq.set(pa, 2 * f + 1, -s * g);
            b.wq.set(pb, 2 * f + 1, c * g);
            b.wk.set(pa, 2 * f, 1.0);
            b.wk.set(pb, 2 * f + 1, 1.0);
        }
        b.wv.set(lay.item_open(), 0, 1.0);
        b.wv.set(lay.interval_open(), 1, 1.0);
        b.wo.set(0, lay.item_seen(), 4.0);
        b.wo.set(1, lay.interval_seen(), 4.0);

        // Layer 1, head 0: the answer position gathers the content of the
        // latest slot.
        let b = &mut blocks[1];
        b.wq.set(lay.answer(), 0, B1 * sc);
        b.wq.set(lay.answer(), 1, 10.0 * sc);
        b.wk.set(lay.item_seen(), 0, 1.0);
        b.wk.set(lay.interval_seen(), 0, 1.0);
        b.wk.set(lay.ramp(), 1, 1.0);
        for j in 0..hd - 3 {
            b.wk.set(j, 3 + j, 1.0);
        }
        for j in 0..nc {
            b.wv.set(j, j, 1.0);
            b.wo.set(j, j, G1);
        }

        // Layer 2, head 0: match the gathered content against option lines
        // and copy the winning line's letter.
        let b = &mut blocks[2];
        let s2 = Layout::CONTENT_SCALE * Layout::CONTENT_SCALE;
        for j in 0..hd - 1 {
            b.wq.set(j, j, B2 * sc / G1 / s2);
            b.wk.set(j, j, 1.0);
        }
        b.wq.set(lay.constant(), hd - 1, BOPT * sc);
        b.wk.set(lay.opt(), hd - 1, 1.0);
        for j in 0..NUM_CANDIDATES {
            b.wv.set(lay.letter(j), j, 1.0);
            b.wo.set(j, lay.letter(j), G2);
        }

        Ok(Self { config, tokens, positions, segments, blocks })
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("backbone.tokens".to_string(), &self.tokens),
            ("backbone.positions".to_string(), &self.positions),
            ("backbone.segments".to_string(), &self.segments),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (n, m) in [
                ("Wq", &b.wq),
                ("Wk", &b.wk),
                ("Wv", &b.wv),
                ("Wo", &b.wo),
                ("W1", &b.w1),
                ("b1", &b.b1),
                ("W2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("backbone.layer{l}.{n}"), m));
            }
        }
        out
    }

    /// SHA-256 over every tensor's name, shape and bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.named() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn to_tensors(&self) -> Result<NamedTensors> {
        let mut t = NamedTensors::new(BACKBONE_FORMAT);
        for (name, m) in self.named() {
            t.insert(name, m.clone());
        }
        t.metadata = serde_json::to_value(&self.config)?;
        Ok(t)
    }

    pub fn from_tensors(t: &NamedTensors) -> Result<Self> {
        t.require_format(BACKBONE_FORMAT)?;
        let config: BackboneConfig = serde_json::from_value(t.metadata.clone())?;
        config.validate()?;
        let (d, f) = (config.d_model, config.ffn);
        let blocks = (0..config.layers)
            .map(|l| {
                let g = |n: &str, r, c| t.expect(&format!("backbone.layer{l}.{n}"), r, c);
                Ok(Block {
                    wq: g("Wq", d, d)?,
                    wk: g("Wk", d, d)?,
                    wv: g("Wv", d, d)?,
                    wo: g("Wo", d, d)?,
                    w1: g("W1", d, f)?,
                    b1: g("b1", 1, f)?,
                    w2: g("W2", f, d)?,
                    b2: g("b2", 1, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tokens: t.expect("backbone.tokens", config.vocab, d)?,
            positions: t.expect("backbone.positions", config.context, d)?,
            segments: t.expect("backbone.segments", NUM_CANDIDATES, d)?,
            blocks,
            config,
        })
    }
}
