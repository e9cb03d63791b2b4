use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ingest::InteractionLog;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<String>,
    pub titles: Vec<String>,
    pub timestamps: Vec<i64>,
    pub intervals: Vec<u64>,
}

pub fn interval_days(earlier: i64, later: i64) -> u64 {
    ((later - earlier).max(0) / SECONDS_PER_DAY) as u64
}

impl UserSequence {
    /// Builds a sequence from chronologically ordered events.
    pub fn from_events(user_id: impl Into<String>, events: Vec<(String, String, i64)>) -> Self {
        let mut items = Vec::with_capacity(events.len());
        let mut titles = Vec::with_capacity(events.len());
        let mut timestamps = Vec::with_capacity(events.len());
        for (item, title, ts) in events {
            items.push(item);
            titles.push(title);
            timestamps.push(ts);
        }
        let intervals = timestamps.windows(2).map(|w| interval_days(w[0], w[1])).collect();
        Self { user_id: user_id.into(), items, titles, timestamps, intervals }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items `range` with the intervals between them.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let intervals = if range.len() > 1 {
            self.intervals[range.start..range.end - 1].to_vec()
        } else {
            Vec::new()
        };
        Self {
            user_id: self.user_id.clone(),
            items: self.items[range.clone()].to_vec(),
            titles: self.titles[range.clone()].to_vec(),
            timestamps: self.timestamps[range].to_vec(),
            intervals,
        }
    }

    pub fn prefix(&self, n: usize) -> Self {
        self.slice(0..n.min(self.len()))
    }

    /// Keeps the `max_len` most recent interactions.
    pub fn truncate_recent(&self, max_len: usize) -> Self {
        let start = self.len().saturating_sub(max_len);
        self.slice(start..self.len())
    }

    pub fn mean_interval(&self) -> Option<f64> {
        if self.intervals.is_empty() {
            return None;
        }
        Some(self.intervals.iter().sum::<u64>() as f64 / self.intervals.len() as f64)
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.items.len();
        n >= 1
            && self.titles.len() == n
            && self.timestamps.len() == n
            && self.intervals.len() == n - 1
            && self.timestamps.windows(2).all(|w| w[0] <= w[1])
            && self
                .timestamps
                .windows(2)
                .zip(&self.intervals)
                .all(|(w, &d)| interval_days(w[0], w[1]) == d)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateTimestamp {
    pub user_id: String,
    pub timestamp: i64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub duplicate_timestamps: Vec<DuplicateTimestamp>,
}

/// One sequence per user, users in ascending id order. Events sharing a
/// timestamp keep their input order and are listed in the report.
pub fn build_sequences(log: &InteractionLog) -> (Vec<UserSequence>, SequenceReport) {
    let mut by_user: BTreeMap<&str, Vec<(String, String, i64)>> = BTreeMap::new();
    for r in log.interactions() {
        by_user
            .entry(&r.user_id)
            .or_default()
            .push((r.item_id.clone(), r.item_title.clone(), r.timestamp));
    }
    let mut report = SequenceReport::default();
    let sequences = by_user
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by_key(|e| e.2);
            let mut k = 0;
            while k < events.len() {
                let run = events[k..].iter().take_while(|e| e.2 == events[k].2).count();
                if run > 1 {
                    report.duplicate_timestamps.push(DuplicateTimestamp {
                        user_id: user.to_string(),
                        timestamp: events[k].2,
                        count: run,
                    });
                }
                k += run;
            }
            UserSequence::from_events(user, events)
        })
        .collect();
    (sequences, report)
}
