//! Glue from a prepared dataset to model inputs: methods, per-split
//! examples for the LM path and the rankers, and prediction dumps.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{RankerExample, RankerModel, Variant};
use crate::benchmark::PredictionRecord;
use crate::dataset::{sample_candidates, CandidateSet, PreparedDataset, Split, SplitAssignment, UserSequence};
use crate::error::{Error, Result};
use crate::experiment::corpus_tokenizer;
use crate::lm::{encode_example, EncodedExample, Model, Theta};
use crate::prompt::{Mode, PromptConfig};
use crate::seed;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    IntervalLlm,
    LlmTextInterval,
    LlmPlain,
    Recurrent,
    SelfAttn,
    TimeAware,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::IntervalLlm, Method::LlmTextInterval, Method::LlmPlain, Method::Recurrent, Method::SelfAttn, Method::TimeAware];

    pub fn name(self) -> &'static str {
        match self {
            Method::IntervalLlm => "interval_llm",
            Method::LlmTextInterval => "llm_text_interval",
            Method::LlmPlain => "llm_plain",
            Method::Recurrent => "recurrent",
            Method::SelfAttn => "self_attn",
            Method::TimeAware => "time_aware",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown method {s:?}; valid methods: {}", names.join(", ")))
        })
    }

    /// Prompt mode used when none is given.
    pub fn default_mode(self) -> Option<Mode> {
        match self {
            Method::IntervalLlm => Some(Mode::FullIia),
            Method::LlmTextInterval => Some(Mode::IntervalText),
            Method::LlmPlain => Some(Mode::NoInterval),
            _ => None,
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Recurrent => Some(Variant::Recurrent),
            Method::SelfAttn => Some(Variant::SelfAttn),
            Method::TimeAware => Some(Variant::TimeAwareSelfAttn),
            _ => None,
        }
    }

    /// Row label in reports.
    pub fn label(self, mode: Option<Mode>) -> String {
        match (self, mode) {
            (Method::IntervalLlm, Some(m)) if m != Mode::FullIia => format!("IntervalLLM ({m})"),
            (Method::IntervalLlm, _) => "IntervalLLM".into(),
            (Method::LlmTextInterval, _) => "LLM + Interval".into(),
            (Method::LlmPlain, _) => "LLM".into(),
            (m, _) => m.variant().map(|v| v.method().to_string()).unwrap_or_default(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn dataset_tokenizer(data: &PreparedDataset, prompt: &PromptConfig) -> Tokenizer {
    let titles: Vec<String> = data.catalog.iter().map(|(_, e)| e.title.clone()).collect();
    corpus_tokenizer(&titles, prompt)
}

/// The training example of a user: the last training item predicted from
/// everything before it. Users whose training prefix is a single item have
/// none.
pub fn train_example(data: &PreparedDataset, a: &SplitAssignment) -> Result<Option<(UserSequence, CandidateSet)>> {
    let prefix = a.train_prefix();
    if prefix.len() < 2 {
        return Ok(None);
    }
    let k = prefix.len() - 1;
    let history = prefix.prefix(k);
    let s = seed::derive(data.config.seed, &["candidates", "train", a.user_id()]);
    let cands = sample_candidates(a.user_id(), &prefix.items[k], &data.catalog, &a.sequence().items, s)?;
    Ok(Some((history, cands)))
}

/// History and candidates of every user for `split`, in user order.
pub fn split_examples(data: &PreparedDataset, split: Split) -> Result<Vec<(UserSequence, CandidateSet)>> {
    data.splits
        .iter()
        .zip(&data.candidates)
        .map(|(a, c)| {
            if a.user_id() != c.user_id {
                return Err(Error::InvalidInput(format!("candidate order mismatch at user {}", a.user_id())));
            }
            Ok((a.example(split).0, c.get(split).clone()))
        })
        .collect()
}

pub fn train_examples(data: &PreparedDataset) -> Result<Vec<(UserSequence, CandidateSet)>> {
    Ok(data.splits.iter().map(|a| train_example(data, a)).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

pub fn encode_all(
    examples: &[(UserSequence, CandidateSet)],
    mode: Mode,
    prompt: &PromptConfig,
    tok: &Tokenizer,
) -> Result<Vec<EncodedExample>> {
    examples.par_iter().map(|(h, c)| encode_example(h, c, mode, prompt, tok)).collect()
}

/// Sequences for next-item ranker training: each user's training prefix.
pub fn ranker_sequences(data: &PreparedDataset) -> Vec<UserSequence> {
    data.splits.iter().map(|a| a.train_prefix()).collect()
}

pub fn ranker_examples(data: &PreparedDataset, split: Split) -> Result<Vec<RankerExample>> {
    Ok(split_examples(data, split)?.into_iter().map(|(history, candidates)| RankerExample { history, candidates }).collect())
}

pub fn lm_predictions(model: &Model, theta: &Theta, examples: &[EncodedExample], label: &str) -> Result<Vec<PredictionRecord>> {
    examples
        .par_iter()
        .map(|ex| {
            let p = model.predict(theta, ex)?;
            let target = crate::dataset::LETTERS[ex.prompt.target_index];
            Ok(PredictionRecord::new(ex.user_id.clone(), label, p.to_string(), target))
        })
        .collect()
}

pub fn ranker_predictions(model: &RankerModel, examples: &[RankerExample], label: &str) -> Result<Vec<PredictionRecord>> {
    examples
        .par_iter()
        .map(|ex| {
            let p = model.predict(&ex.history, &ex.candidates)?;
            Ok(PredictionRecord::new(ex.history.user_id.clone(), label, p.to_string(), ex.candidates.ground_truth_letter))
        })
        .collect()
}
