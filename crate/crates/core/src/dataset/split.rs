use serde::{Deserialize, Serialize};

use super::sequence::UserSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Validation => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "val" | "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRef {
    pub item_id: String,
    pub title: String,
    pub timestamp: i64,
}

/// Leave-one-out assignment over a full user sequence of length n ≥ 3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    sequence: UserSequence,
}

impl SplitAssignment {
    pub fn user_id(&self) -> &str {
        &self.sequence.user_id
    }

    pub fn sequence(&self) -> &UserSequence {
        &self.sequence
    }

    /// Items 1..n−2.
    pub fn train_prefix(&self) -> UserSequence {
        self.sequence.prefix(self.sequence.len() - 2)
    }

    /// Zero-based index of the validation target (item n−1).
    pub fn val_index(&self) -> usize {
        self.sequence.len() - 2
    }

    /// Zero-based index of the test target (item n).
    pub fn test_index(&self) -> usize {
        self.sequence.len() - 1
    }

    pub fn target_index(&self, split: Split) -> usize {
        match split {
            Split::Validation => self.val_index(),
            Split::Test => self.test_index(),
        }
    }

    pub fn item(&self, k: usize) -> ItemRef {
        ItemRef {
            item_id: self.sequence.items[k].clone(),
            title: self.sequence.titles[k].clone(),
            timestamp: self.sequence.timestamps[k],
        }
    }

    /// History preceding the split's target, and the target itself.
    pub fn example(&self, split: Split) -> (UserSequence, ItemRef) {
        let k = self.target_index(split);
        (self.sequence.prefix(k), self.item(k))
    }
}

pub fn leave_one_out_split(seq: &UserSequence) -> Option<SplitAssignment> {
    (seq.len() >= 3).then(|| SplitAssignment { sequence: seq.clone() })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub assigned: usize,
    pub excluded_users: Vec<String>,
}

pub fn split_all(sequences: &[UserSequence]) -> (Vec<SplitAssignment>, SplitReport) {
    let mut report = SplitReport::default();
    let mut out = Vec::with_capacity(sequences.len());
    for s in sequences {
        match leave_one_out_split(s) {
            Some(a) => out.push(a),
            None => report.excluded_users.push(s.user_id.clone()),
        }
    }
    report.assigned = out.len();
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(items: &[&str]) -> UserSequence {
        UserSequence::from_events(
            "u",
            items.iter().enumerate().map(|(k, i)| (i.to_string(), i.to_uppercase(), k as i64 * 86_400)).collect(),
        )
    }

    #[test]
    fn five_items() {
        let a = leave_one_out_split(&seq(&["a", "b", "c", "d", "e"])).unwrap();
        assert_eq!(a.train_prefix().items, vec!["a", "b", "c"]);
        assert_eq!(a.item(a.val_index()).item_id, "d");
        assert_eq!(a.item(a.test_index()).item_id, "e");
        let (hist, target) = a.example(Split::Test);
        assert_eq!(hist.items, vec!["a", "b", "c", "d"]);
        assert_eq!(target.item_id, "e");
    }

    #[test]
    fn minimal_and_excluded() {
        let a = leave_one_out_split(&seq(&["x", "y", "z"])).unwrap();
        assert_eq!(a.train_prefix().items, vec!["x"]);
        assert!(leave_one_out_split(&seq(&["x", "y"])).is_none());
        let (kept, report) = split_all(&[seq(&["x", "y"]), seq(&["p", "q", "r"])]);
        assert_eq!(kept.len(), 1);
        assert_eq!(report.excluded_users, vec!["u"]);
    }
}
