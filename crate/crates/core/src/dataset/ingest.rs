use std::collections::HashSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub item_title: String,
    pub timestamp: i64,
}

/// Interactions per user, kept as an exact ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Density {
    pub interactions: u64,
    pub users: u64,
}

impl Density {
    pub fn value(&self) -> Option<f64> {
        (self.users > 0).then(|| self.interactions as f64 / self.users as f64)
    }

    /// Two decimals, truncated toward zero (the convention of the dataset
    /// statistics tables: 814586 / 94762 = 8.596... is printed as 8.59).
    pub fn render(&self) -> String {
        if self.users == 0 {
            return "n/a".to_string();
        }
        let hundredths = (self.interactions as u128 * 100) / self.users as u128;
        format!("{}.{:02}", hundredths / 100, hundredths % 100)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    interactions: Vec<Interaction>,
    user_count: usize,
    item_count: usize,
}

impl InteractionLog {
    pub fn new(interactions: Vec<Interaction>) -> Self {
        let users: HashSet<&str> = interactions.iter().map(|i| i.user_id.as_str()).collect();
        let items: HashSet<&str> = interactions.iter().map(|i| i.item_id.as_str()).collect();
        let (user_count, item_count) = (users.len(), items.len());
        Self { interactions, user_count, item_count }
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn into_interactions(self) -> Vec<Interaction> {
        self.interactions
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn interaction_count(&self) -> usize {
        self.interactions.len()
    }

    pub fn density(&self) -> Density {
        Density { interactions: self.interactions.len() as u64, users: self.user_count as u64 }
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub lines: usize,
    pub comments: usize,
    pub blank: usize,
    pub accepted: usize,
    pub malformed: Vec<MalformedRow>,
}

/// Parses one tab-separated row. `Err` carries the reason the row is malformed.
pub fn parse_row(line: &str) -> Result<Interaction, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, found {}", fields.len()));
    }
    let user_id = fields[0].trim();
    let item_id = fields[1].trim();
    let title = fields[2].trim();
    if user_id.is_empty() {
        return Err("empty user_id".into());
    }
    if item_id.is_empty() {
        return Err("empty item_id".into());
    }
    if title.is_empty() {
        return Err("empty item_title".into());
    }
    let timestamp: i64 = fields[3]
        .trim()
        .parse()
        .map_err(|_| format!("timestamp {:?} is not an integer", fields[3].trim()))?;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    Ok(Interaction {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        item_title: title.to_string(),
        timestamp,
    })
}

/// Reads the raw interaction format. Rows that fail to parse are counted in
/// the report; bytes that are not UTF-8 make the whole file unparseable.
pub fn ingest<R: BufRead>(mut reader: R) -> Result<(InteractionLog, IngestReport)> {
    let mut report = IngestReport::default();
    let mut out = Vec::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let text = std::str::from_utf8(&buf).map_err(|e| Error::InputFormat {
            line: line_no,
            message: format!("invalid UTF-8: {e}"),
        })?;
        let text = text.trim_end_matches(['\n', '\r']);
        report.lines += 1;
        if text.starts_with('#') {
            report.comments += 1;
            continue;
        }
        if text.trim().is_empty() {
            report.blank += 1;
            continue;
        }
        match parse_row(text) {
            Ok(row) => out.push(row),
            Err(reason) => report.malformed.push(MalformedRow { line: line_no, reason }),
        }
    }
    report.accepted = out.len();
    Ok((InteractionLog::new(out), report))
}

pub fn render_row(i: &Interaction) -> String {
    format!("{}\t{}\t{}\t{}", i.user_id, i.item_id, i.item_title, i.timestamp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(u: &str, i: &str, t: i64) -> Interaction {
        Interaction { user_id: u.into(), item_id: i.into(), item_title: format!("title {i}"), timestamp: t }
    }

    #[test]
    fn empty_stream_gives_zero_counts() {
        let (log, report) = ingest("".as_bytes()).unwrap();
        assert_eq!((log.user_count(), log.item_count(), log.interaction_count()), (0, 0, 0));
        assert_eq!(report.lines, 0);
        assert_eq!(log.density().value(), None);
    }

    #[test]
    fn three_rows_two_users() {
        let log = InteractionLog::new(vec![row("u1", "a", 1), row("u1", "b", 2), row("u2", "a", 3)]);
        assert_eq!((log.user_count(), log.item_count(), log.interaction_count()), (2, 2, 3));
        assert_eq!(log.density().value(), Some(1.5));
        assert_eq!(log.density().render(), "1.50");
    }

    #[test]
    fn malformed_rows_are_reported() {
        let text = "# header\nu1\ta\tAlpha\t10\nu1\tb\t\t11\nbad line\nu2\tc\tGamma\t-4\n\nu2\ta\tAlpha\tx\n";
        let (log, report) = ingest(text.as_bytes()).unwrap();
        assert_eq!(log.interaction_count(), 1);
        assert_eq!(report.comments, 1);
        assert_eq!(report.blank, 1);
        let lines: Vec<usize> = report.malformed.iter().map(|m| m.line).collect();
        assert_eq!(lines, vec![3, 4, 5, 7]);
    }

    #[test]
    fn invalid_utf8_names_the_line() {
        let bytes = b"u1\ta\tA\t1\nu2\tb\t\xff\xfe\t2\n";
        match ingest(&bytes[..]) {
            Err(Error::InputFormat { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crlf_line_endings_are_accepted() {
        let (log, report) = ingest("u1\ta\tAlpha\t5\r\n".as_bytes()).unwrap();
        assert!(report.malformed.is_empty());
        assert_eq!(log.interactions()[0].timestamp, 5);
    }

    #[test]
    fn density_rendering_truncates() {
        let d = Density { interactions: 814_586, users: 94_762 };
        assert_eq!(d.render(), "8.59");
        assert_eq!(Density { interactions: 1_552_764, users: 123_876 }.render(), "12.53");
        assert_eq!(Density { interactions: 9_488_297, users: 776_370 }.render(), "12.22");
    }
}
