use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::ingest::InteractionLog;
use crate::error::{Error, Result};
use crate::seed;

pub const NUM_CANDIDATES: usize = 20;
pub const LETTERS: [char; NUM_CANDIDATES] = [
    'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L', 'M', 'N', 'O', 'P', 'Q', 'R', 'S', 'T',
];

pub fn letter_index(letter: char) -> Option<usize> {
    LETTERS.iter().position(|&l| l == letter)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateOption {
    pub letter: char,
    pub item_id: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub options: Vec<CandidateOption>,
    pub ground_truth_letter: char,
}

impl CandidateSet {
    pub fn ground_truth_index(&self) -> usize {
        letter_index(self.ground_truth_letter).expect("letter validated at construction")
    }

    pub fn ground_truth(&self) -> &CandidateOption {
        &self.options[self.ground_truth_index()]
    }

    pub fn item_ids(&self) -> Vec<&str> {
        self.options.iter().map(|o| o.item_id.as_str()).collect()
    }

    /// Checks the structural contract: 20 options, letters A–T in order,
    /// distinct items, ground truth present once.
    pub fn validate(&self, target_item: &str) -> Result<()> {
        if self.options.len() != NUM_CANDIDATES {
            return Err(Error::InvalidInput(format!("{} candidates, expected {NUM_CANDIDATES}", self.options.len())));
        }
        if self.options.iter().zip(LETTERS).any(|(o, l)| o.letter != l) {
            return Err(Error::InvalidInput("candidate letters are not A..T in order".into()));
        }
        let distinct: HashSet<&str> = self.item_ids().into_iter().collect();
        if distinct.len() != NUM_CANDIDATES {
            return Err(Error::InvalidInput("candidate items are not distinct".into()));
        }
        let hits: Vec<_> = self.options.iter().filter(|o| o.item_id == target_item).collect();
        if hits.len() != 1 || hits[0].letter != self.ground_truth_letter {
            return Err(Error::InvalidInput("ground truth must appear exactly once under its letter".into()));
        }
        Ok(())
    }
}

/// The sampling pool: every item id with its title and global popularity,
/// in ascending id order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    items: BTreeMap<String, CatalogEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub title: String,
    pub interactions: usize,
}

impl ItemCatalog {
    /// The first title seen for an item is kept.
    pub fn from_log(log: &InteractionLog) -> Self {
        let mut items: BTreeMap<String, CatalogEntry> = BTreeMap::new();
        for r in log.interactions() {
            items
                .entry(r.item_id.clone())
                .or_insert_with(|| CatalogEntry { title: r.item_title.clone(), interactions: 0 })
                .interactions += 1;
        }
        Self { items }
    }

    pub fn insert(&mut self, item_id: impl Into<String>, title: impl Into<String>, interactions: usize) {
        self.items.insert(item_id.into(), CatalogEntry { title: title.into(), interactions });
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item_id: &str) -> Option<&CatalogEntry> {
        self.items.get(item_id)
    }

    pub fn title(&self, item_id: &str) -> Option<&str> {
        self.items.get(item_id).map(|e| e.title.as_str())
    }

    pub fn popularity(&self, item_id: &str) -> usize {
        self.items.get(item_id).map_or(0, |e| e.interactions)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CatalogEntry)> {
        self.items.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// 19 uniform negatives from the pool minus history and target, plus the
/// target, shuffled; letters follow final positions.
pub fn sample_candidates(
    user_id: &str,
    target: &str,
    pool: &ItemCatalog,
    history: &[String],
    seed: u64,
) -> Result<CandidateSet> {
    sample_candidates_including(user_id, target, &[], pool, history, seed)
}

/// As [`sample_candidates`], with `include` items placed in the set before
/// the remaining negatives are drawn.
pub fn sample_candidates_including(
    user_id: &str,
    target: &str,
    include: &[String],
    pool: &ItemCatalog,
    history: &[String],
    seed: u64,
) -> Result<CandidateSet> {
    let mut chosen: Vec<&str> = vec![target];
    for extra in include {
        if !chosen.contains(&extra.as_str()) {
            chosen.push(extra);
        }
    }
    if chosen.len() > NUM_CANDIDATES {
        return Err(Error::Config(format!("user {user_id}: more than {NUM_CANDIDATES} forced candidates")));
    }
    let excluded: HashSet<&str> = history.iter().map(String::as_str).chain(chosen.iter().copied()).collect();
    let eligible: Vec<&str> = pool.ids().filter(|id| !excluded.contains(id)).collect();
    let need = NUM_CANDIDATES - chosen.len();
    if eligible.len() < need {
        return Err(Error::Config(format!(
            "user {user_id}: only {} eligible negatives, need {need}",
            eligible.len()
        )));
    }
    let mut rng = seed::rng(seed);
    chosen.extend(index::sample(&mut rng, eligible.len(), need).into_iter().map(|k| eligible[k]));
    chosen.shuffle(&mut rng);

    let mut options = Vec::with_capacity(NUM_CANDIDATES);
    let mut truth = None;
    for (pos, id) in chosen.into_iter().enumerate() {
        let title = pool
            .title(id)
            .ok_or_else(|| Error::Vocabulary(format!("user {user_id}: item {id} missing from pool")))?;
        if id == target {
            truth = Some(LETTERS[pos]);
        }
        options.push(CandidateOption { letter: LETTERS[pos], item_id: id.to_string(), title: title.to_string() });
    }
    Ok(CandidateSet { options, ground_truth_letter: truth.expect("target inserted above") })
}
