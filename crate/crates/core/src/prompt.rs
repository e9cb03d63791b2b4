//! Optionalized next-item prompts: history text with optional interval
//! clauses and embedding slots, 20 lettered options, and the closing
//! instruction after which the model answers with one letter.

use std::fmt;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use crate::dataset::{letter_index, CandidateSet, UserSequence, LETTERS};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::tokenizer::{Tokenizer, INTERVAL_CLOSE, INTERVAL_OPEN, ITEM_CLOSE, ITEM_OPEN, MARKERS};

pub const INTRO: &str = "This user has purchased: ";
pub const CLOSING: &str = "The answer with the option's letter only is";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    NoInterval,
    TimestampText,
    IntervalText,
    IntervalEmb,
    FullIia,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::NoInterval, Mode::TimestampText, Mode::IntervalText, Mode::IntervalEmb, Mode::FullIia];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NoInterval => "NO_INTERVAL",
            Mode::TimestampText => "TIMESTAMP_TEXT",
            Mode::IntervalText => "INTERVAL_TEXT",
            Mode::IntervalEmb => "INTERVAL_EMB",
            Mode::FullIia => "FULL_IIA",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown prompt mode {s:?}")))
    }

    pub fn interval_text(self) -> bool {
        matches!(self, Mode::IntervalText | Mode::IntervalEmb | Mode::FullIia)
    }

    pub fn interval_slots(self) -> bool {
        matches!(self, Mode::IntervalEmb | Mode::FullIia)
    }

    pub fn item_slots(self) -> bool {
        self == Mode::FullIia
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text(String),
    ItemSlot(usize),
    IntervalSlot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionLine {
    pub letter: char,
    pub title: String,
}

impl OptionLine {
    pub fn render(&self) -> String {
        format!("{}: {}\n", self.letter, self.title)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Word in "the following twenty {domain} options".
    pub domain: String,
    /// Most recent interactions kept in the history.
    pub max_history: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { domain: "game".into(), max_history: 10 }
    }
}

impl PromptConfig {
    pub fn instruction(&self) -> String {
        format!(
            ". Based on this history, recommend the next product that the user is most likely to purchase from the following twenty {} options: ",
            self.domain
        )
    }

    /// Every fixed string a prompt can contain, for vocabulary building.
    pub fn fixed_texts(&self) -> Vec<String> {
        let mut v = vec![
            INTRO.to_string(),
            self.instruction(),
            CLOSING.to_string(),
            ", and purchased , and on purchased , and after days purchased".to_string(),
        ];
        v.extend(MARKERS.iter().map(|m| m.to_string()));
        v.extend(LETTERS.iter().map(|l| format!("{l}: ")));
        v.push("0123456789-".to_string());
        v
    }
}

/// History and instruction segments, then the option block, then [`CLOSING`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub segments: Vec<Segment>,
    pub candidate_block: Vec<OptionLine>,
    pub target_letter: char,
    pub mode: Mode,
}

pub fn iso_date(unix_seconds: i64) -> String {
    DateTime::from_timestamp(unix_seconds, 0).map_or_else(|| unix_seconds.to_string(), |d| d.format("%Y-%m-%d").to_string())
}

pub fn build_prompt(seq: &UserSequence, cands: &CandidateSet, mode: Mode, config: &PromptConfig) -> Result<PromptInstance> {
    if seq.is_empty() {
        return Err(Error::InvalidInput(format!("user {}: empty history", seq.user_id)));
    }
    letter_index(cands.ground_truth_letter)
        .ok_or_else(|| Error::InvalidInput(format!("ground-truth letter {:?}", cands.ground_truth_letter)))?;
    let seq = seq.truncate_recent(config.max_history.max(1));
    let mut segments = Vec::new();
    let mut text = String::from(INTRO);
    for k in 0..seq.len() {
        if k > 0 {
            match mode {
                Mode::NoInterval => text.push_str(", and purchased "),
                Mode::TimestampText => text.push_str(&format!(", and on {} purchased ", iso_date(seq.timestamps[k]))),
                Mode::IntervalText => text.push_str(&format!(", and after {} days purchased ", seq.intervals[k - 1])),
                Mode::IntervalEmb | Mode::FullIia => {
                    text.push_str(&format!(", and after {} {INTERVAL_OPEN}", seq.intervals[k - 1]));
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                    segments.push(Segment::IntervalSlot(k - 1));
                    text.push_str(&format!("{INTERVAL_CLOSE} days purchased "));
                }
            }
        }
        text.push_str(&seq.titles[k]);
        if mode == Mode::TimestampText && k == 0 {
            text.push_str(&format!(" on {}", iso_date(seq.timestamps[0])));
        }
        if mode.item_slots() {
            text.push_str(&format!(" {ITEM_OPEN}"));
            segments.push(Segment::Text(std::mem::take(&mut text)));
            segments.push(Segment::ItemSlot(k));
            text.push_str(ITEM_CLOSE);
        }
    }
    text.push_str(&config.instruction());
    segments.push(Segment::Text(text));
    let candidate_block = cands.options.iter().map(|o| OptionLine { letter: o.letter, title: o.title.clone() }).collect();
    Ok(PromptInstance { segments, candidate_block, target_letter: cands.ground_truth_letter, mode })
}

impl PromptInstance {
    pub fn item_slot_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::ItemSlot(_))).count()
    }

    pub fn interval_slot_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::IntervalSlot(_))).count()
    }

    pub fn render_block(&self) -> String {
        self.candidate_block.iter().map(OptionLine::render).collect::<Vec<_>>().join(" ")
    }

    /// Full prompt text with each slot rendered as nothing between its markers.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            if let Segment::Text(t) = s {
                out.push_str(t);
            }
        }
        out.push_str(&self.render_block());
        out.push(' ');
        out.push_str(CLOSING);
        out
    }
}

/// One line of the prompt dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub user_id: String,
    pub prompt: String,
    pub target_letter: char,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Piece {
    /// A text token; `option` is the index of the option line it belongs to.
    Token { id: usize, option: Option<u8> },
    ItemSlot(usize),
    IntervalSlot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    pub pieces: Vec<Piece>,
    pub target_token: usize,
    pub target_index: usize,
    pub item_slots: usize,
    pub interval_slots: usize,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn text_ids(&self) -> Vec<usize> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Token { id, .. } => Some(*id),
                _ => None,
            })
            .collect()
    }

    pub fn options(&self) -> Vec<Option<u8>> {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Token { option, .. } => *option,
                _ => None,
            })
            .collect()
    }
}

pub fn tokenize_prompt(p: &PromptInstance, tok: &Tokenizer) -> Result<TokenizedPrompt> {
    let mut pieces = Vec::new();
    let (mut items, mut intervals) = (0, 0);
    for s in &p.segments {
        match s {
            Segment::Text(t) => pieces.extend(tok.encode(t).into_iter().map(|id| Piece::Token { id, option: None })),
            Segment::ItemSlot(k) => {
                pieces.push(Piece::ItemSlot(*k));
                items += 1;
            }
            Segment::IntervalSlot(k) => {
                pieces.push(Piece::IntervalSlot(*k));
                intervals += 1;
            }
        }
    }
    for (i, line) in p.candidate_block.iter().enumerate() {
        let option = Some(i as u8);
        pieces.extend(tok.encode(&line.render()).into_iter().map(|id| Piece::Token { id, option }));
    }
    pieces.extend(tok.encode(CLOSING).into_iter().map(|id| Piece::Token { id, option: None }));
    let target_index = letter_index(p.target_letter)
        .ok_or_else(|| Error::Vocabulary(format!("target letter {:?} is not an option letter", p.target_letter)))?;
    Ok(TokenizedPrompt {
        pieces,
        target_token: tok.letter_id(p.target_letter)?,
        target_index,
        item_slots: items,
        interval_slots: intervals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInput {
    pub embedding_sequence: Matrix,
    pub options: Vec<Option<u8>>,
    pub target_token: usize,
}

/// Text tokens through `table` (marker rows from `markers` when given),
/// item slot k ← row k of `x_hat`, interval slot k ← row k of `z`.
pub fn assemble(
    prompt: &TokenizedPrompt,
    table: &Matrix,
    markers: Option<(&[usize; 4], &Matrix)>,
    x_hat: &Matrix,
    z: &Matrix,
) -> Result<AssembledInput> {
    let d = table.cols();
    if x_hat.rows() != prompt.item_slots || (prompt.item_slots > 0 && x_hat.cols() != d) {
        return Err(Error::Assembly(format!(
            "prompt has {} item slots but {} item vectors were supplied",
            prompt.item_slots,
            x_hat.rows()
        )));
    }
    if z.rows() < prompt.interval_slots || (prompt.interval_slots > 0 && z.cols() != d) {
        return Err(Error::Assembly(format!(
            "prompt has {} interval slots but {} interval vectors were supplied",
            prompt.interval_slots,
            z.rows()
        )));
    }
    let mut out = Matrix::zeros(prompt.len(), d);
    for (r, p) in prompt.pieces.iter().enumerate() {
        let src = match *p {
            Piece::Token { id, .. } => {
                if id >= table.rows() {
                    return Err(Error::Vocabulary(format!("token id {id} outside table of {} rows", table.rows())));
                }
                match markers.and_then(|(ids, m)| ids.iter().position(|&x| x == id).map(|k| m.row(k))) {
                    Some(row) => row,
                    None => table.row(id),
                }
            }
            Piece::ItemSlot(k) => x_hat.row(k),
            Piece::IntervalSlot(k) => {
                if k >= z.rows() {
                    return Err(Error::Assembly(format!("interval slot {k} has no embedding")));
                }
                z.row(k)
            }
        };
        out.row_mut(r).copy_from_slice(src);
    }
    Ok(AssembledInput { embedding_sequence: out, options: prompt.options(), target_token: prompt.target_token })
}
