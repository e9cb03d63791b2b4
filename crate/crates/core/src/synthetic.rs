//! Generated corpora for directional experiments.
//!
//! In the interval corpus every user shares one 3-item history; the next
//! item is one of two fixed answers, chosen by whether the history's gaps
//! are short or long. Both answers always sit among the 20 options, so a
//! model blind to intervals is capped at one half.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_candidates_including, CandidateSet, ItemCatalog, UserSequence, SECONDS_PER_DAY};
use crate::error::Result;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub history_len: usize,
    /// Inclusive day range of a short gap.
    pub short_days: (u64, u64),
    pub long_days: (u64, u64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { users: 2000, items: 100, history_len: 3, short_days: (1, 7), long_days: (60, 365), seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub history: UserSequence,
    pub target: String,
    pub candidates: CandidateSet,
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub catalog: ItemCatalog,
    pub examples: Vec<SyntheticExample>,
}

const SYLLABLES: [&str; 16] = ["ka", "lo", "mi", "ne", "su", "ta", "ri", "po", "ve", "zu", "ba", "do", "fe", "gi", "hu", "ja"];

/// `n` two-word titles with no word shared between titles.
pub fn titles(n: usize, seed: u64) -> Vec<String> {
    let mut words: Vec<String> = SYLLABLES.iter().flat_map(|a| SYLLABLES.iter().map(move |b| format!("{a}{b}"))).collect();
    assert!(2 * n <= words.len(), "at most {} distinct titles", words.len() / 2);
    words.shuffle(&mut seed::rng(seed::derive(seed, &["titles"])));
    (0..n).map(|i| format!("{} {}", words[2 * i], words[2 * i + 1])).collect()
}

fn catalog(cfg: &SyntheticConfig) -> (ItemCatalog, Vec<String>) {
    let names = titles(cfg.items, cfg.seed);
    let mut cat = ItemCatalog::default();
    let ids: Vec<String> = (0..cfg.items).map(|i| format!("s{i:03}")).collect();
    for (id, t) in ids.iter().zip(&names) {
        cat.insert(id.clone(), t.clone(), 1);
    }
    (cat, ids)
}

/// Users alternate short and long; the list is then shuffled.
pub fn interval_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    let (cat, mut ids) = catalog(cfg);
    let mut rng = seed::rng(seed::derive(cfg.seed, &["interval-corpus"]));
    ids.shuffle(&mut rng);
    let history: Vec<String> = ids[..cfg.history_len].to_vec();
    let (short_item, long_item) = (ids[cfg.history_len].clone(), ids[cfg.history_len + 1].clone());
    let mut examples = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let short = u % 2 == 0;
        let (lo, hi) = if short { cfg.short_days } else { cfg.long_days };
        let mut t = 1_500_000_000 + rng.gen_range(0..1000) * SECONDS_PER_DAY;
        let events = history
            .iter()
            .enumerate()
            .map(|(k, id)| {
                if k > 0 {
                    t += rng.gen_range(lo..=hi) as i64 * SECONDS_PER_DAY;
                }
                (id.clone(), cat.title(id).unwrap().to_string(), t)
            })
            .collect();
        let user = format!("syn{u:05}");
        let seq = UserSequence::from_events(user.clone(), events);
        let (target, other) = if short { (&short_item, &long_item) } else { (&long_item, &short_item) };
        let cands = sample_candidates_including(&user, target, std::slice::from_ref(other), &cat, &history, rng.gen())?;
        examples.push(SyntheticExample { history: seq, target: target.clone(), candidates: cands, short });
    }
    examples.shuffle(&mut rng);
    Ok(SyntheticCorpus { catalog: cat, examples })
}

/// Every user has the same history, gaps and answer.
pub fn single_pattern_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    let (cat, mut ids) = catalog(cfg);
    let mut rng = seed::rng(seed::derive(cfg.seed, &["single-pattern"]));
    ids.shuffle(&mut rng);
    let history: Vec<String> = ids[..cfg.history_len].to_vec();
    let target = ids[cfg.history_len].clone();
    let mut examples = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let events = history
            .iter()
            .enumerate()
            .map(|(k, id)| (id.clone(), cat.title(id).unwrap().to_string(), 1_500_000_000 + k as i64 * 5 * SECONDS_PER_DAY))
            .collect();
        let user = format!("one{u:05}");
        let seq = UserSequence::from_events(user.clone(), events);
        let cands = sample_candidates_including(&user, &target, &[], &cat, &history, rng.gen())?;
        examples.push(SyntheticExample { history: seq, target: target.clone(), candidates: cands, short: true });
    }
    Ok(SyntheticCorpus { catalog: cat, examples })
}

impl SyntheticCorpus {
    /// Consecutive train/validation/test slices of the (already shuffled)
    /// users.
    pub fn split(&self, train: usize, val: usize) -> (&[SyntheticExample], &[SyntheticExample], &[SyntheticExample]) {
        let n = self.examples.len();
        let a = train.min(n);
        let b = (train + val).min(n);
        (&self.examples[..a], &self.examples[a..b], &self.examples[b..])
    }

    pub fn titles(&self) -> Vec<String> {
        self.catalog.iter().map(|(_, e)| e.title.clone()).collect()
    }
}

impl SyntheticExample {
    /// History followed by the target one day after the last event, for
    /// id-only next-item training.
    pub fn full_sequence(&self, catalog: &ItemCatalog) -> UserSequence {
        let h = &self.history;
        let mut events: Vec<(String, String, i64)> =
            (0..h.len()).map(|k| (h.items[k].clone(), h.titles[k].clone(), h.timestamps[k])).collect();
        let last = h.timestamps.last().copied().unwrap_or(0);
        events.push((self.target.clone(), catalog.title(&self.target).unwrap_or("").to_string(), last + SECONDS_PER_DAY));
        UserSequence::from_events(h.user_id.clone(), events)
    }
}
