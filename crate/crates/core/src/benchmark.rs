//! HR@1, validity, warm/cold partitions and the rendered reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{letter_index, read_jsonl, write_jsonl, PreparedDataset, Split};
use crate::error::{Error, Result};

pub const WARM_COLD_FRACTION: f64 = 0.35;

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub user_id: String,
    pub method: String,
    /// Raw answer; anything other than a single option letter is invalid.
    pub predicted_letter: String,
    pub target_letter: char,
    pub valid: bool,
}

impl PredictionRecord {
    pub fn new(user_id: impl Into<String>, method: impl Into<String>, predicted: impl Into<String>, target: char) -> Self {
        let predicted_letter = predicted.into();
        let valid = is_option_letter(&predicted_letter);
        Self { user_id: user_id.into(), method: method.into(), predicted_letter, target_letter: target, valid }
    }

    pub fn hit(&self) -> bool {
        self.valid && self.predicted_letter.chars().next() == Some(self.target_letter)
    }
}

fn is_option_letter(s: &str) -> bool {
    let mut cs = s.chars();
    matches!((cs.next(), cs.next()), (Some(c), None) if letter_index(c).is_some())
}

pub fn write_dump(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Reads a dump and rejects records whose `valid` flag disagrees with the
/// predicted letter.
pub fn read_dump(path: &Path) -> Result<Vec<PredictionRecord>> {
    let records: Vec<PredictionRecord> = read_jsonl(path)?;
    for r in &records {
        if r.valid != is_option_letter(&r.predicted_letter) {
            return Err(Error::InvalidInput(format!(
                "{}: user {} has valid={} for prediction {:?}",
                path.display(),
                r.user_id,
                r.valid,
                r.predicted_letter
            )));
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Count {
    pub hits: usize,
    pub total: usize,
}

impl Count {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a PredictionRecord>) -> Self {
        let mut c = Count::default();
        for r in records {
            c.total += 1;
            c.hits += r.hit() as usize;
        }
        c
    }

    pub fn rate(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::UndefinedMetric("HR@1 over zero records".into()));
        }
        Ok(self.hits as f64 / self.total as f64)
    }

    /// Percentage in tenths, rounded half-up from the exact ratio.
    pub fn tenths(&self) -> Result<i64> {
        if self.total == 0 {
            return Err(Error::UndefinedMetric("HR@1 over zero records".into()));
        }
        let (h, t) = (self.hits as i128, self.total as i128);
        Ok(((2000 * h + t) / (2 * t)) as i64)
    }

    pub fn percent(&self) -> Result<String> {
        Ok(render_tenths(self.tenths()?, false))
    }
}

fn render_tenths(t: i64, signed: bool) -> String {
    let sign = if t < 0 {
        "-"
    } else if signed {
        "+"
    } else {
        ""
    };
    format!("{sign}{}.{}%", t.abs() / 10, t.abs() % 10)
}

/// Renders a fraction as a one-decimal percentage, half-up.
pub fn format_percent(x: f64) -> String {
    render_tenths(round_half_up_tenths(x * 100.0), false)
}

pub fn format_signed_percent(x: f64) -> String {
    render_tenths(round_half_up_tenths(x * 100.0), true)
}

/// `x` in tenths, halves rounded away from zero. The slack absorbs binary
/// representation error of values that are exact halves in decimal.
fn round_half_up_tenths(x: f64) -> i64 {
    let scaled = x * 10.0;
    let r = (scaled.abs() + 0.5 + 1e-9).floor();
    if scaled < 0.0 {
        -(r as i64)
    } else {
        r as i64
    }
}

pub fn hit_rate_at_1(records: &[PredictionRecord]) -> Result<f64> {
    Count::of(records).rate()
}

pub fn validity_ratio(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("validity ratio over zero records".into()));
    }
    Ok(records.iter().filter(|r| r.valid).count() as f64 / records.len() as f64)
}

/// `(cold − warm) / warm`.
pub fn diff_metric(warm: f64, cold: f64) -> Result<f64> {
    if !(warm > 0.0) {
        return Err(Error::UndefinedMetric(format!("diff with warm HR@1 {warm}")));
    }
    Ok((cold - warm) / warm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Perspective {
    User,
    Item,
    Interval,
}

impl Perspective {
    pub const ALL: [Perspective; 3] = [Perspective::User, Perspective::Item, Perspective::Interval];

    pub fn name(self) -> &'static str {
        match self {
            Perspective::User => "USER",
            Perspective::Item => "ITEM",
            Perspective::Interval => "INTERVAL",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Perspective::User => "User",
            Perspective::Item => "Item",
            Perspective::Interval => "Interval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Perspective::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown perspective {s:?}; expected one of USER, ITEM, INTERVAL")))
    }

    /// Whether a larger statistic is the warm end.
    pub fn high_is_warm(self) -> bool {
        !matches!(self, Perspective::Interval)
    }
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserStatistic {
    pub user_id: String,
    pub value: Option<f64>,
}

/// Per-user statistic of a perspective: interaction count (USER), global
/// interaction count of the test item (ITEM), or mean interval in days
/// (INTERVAL; absent for single-interaction users).
pub fn user_statistics(data: &PreparedDataset, perspective: Perspective) -> Vec<UserStatistic> {
    data.splits
        .iter()
        .map(|a| {
            let seq = a.sequence();
            let value = match perspective {
                Perspective::User => Some(seq.len() as f64),
                Perspective::Item => Some(data.catalog.popularity(&a.example(Split::Test).1.item_id) as f64),
                Perspective::Interval => seq.mean_interval(),
            };
            UserStatistic { user_id: seq.user_id.clone(), value }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmColdPartition {
    pub perspective: Perspective,
    pub warm: BTreeSet<String>,
    pub cold: BTreeSet<String>,
    /// Statistic at the inner edge of the warm and of the cold set.
    pub thresholds: (Option<f64>, Option<f64>),
    /// Users without a statistic under this perspective.
    pub excluded: Vec<String>,
    pub statistics: Vec<UserStatistic>,
}

/// `floor(q · n)`, tolerant of `q` not being exact in binary.
pub fn quantile_size(n: usize, q: f64) -> usize {
    (q * n as f64 + 1e-9).floor() as usize
}

/// Orders users from the warm extreme to the cold extreme (ties by
/// ascending user id) and takes `floor(q · N)` from each end.
pub fn partition_users(stats: &[UserStatistic], perspective: Perspective, q: f64) -> Result<WarmColdPartition> {
    if !(0.0..=0.5).contains(&q) {
        return Err(Error::Config(format!("warm/cold fraction {q} must lie in [0, 0.5]")));
    }
    let mut ranked: Vec<(&str, f64)> = Vec::new();
    let mut excluded = Vec::new();
    for s in stats {
        match s.value {
            Some(v) if v.is_finite() => ranked.push((&s.user_id, v)),
            Some(v) => return Err(Error::numeric(format!("user {}: statistic {v}", s.user_id))),
            None => excluded.push(s.user_id.clone()),
        }
    }
    let high = perspective.high_is_warm();
    ranked.sort_by(|a, b| {
        let by_value = if high { b.1.total_cmp(&a.1) } else { a.1.total_cmp(&b.1) };
        by_value.then_with(|| a.0.cmp(b.0))
    });
    let k = quantile_size(ranked.len(), q);
    let n = ranked.len();
    let warm = ranked[..k].iter().map(|(u, _)| u.to_string()).collect();
    let cold = ranked[n - k..].iter().map(|(u, _)| u.to_string()).collect();
    let thresholds = if k == 0 { (None, None) } else { (Some(ranked[k - 1].1), Some(ranked[n - k].1)) };
    excluded.sort();
    Ok(WarmColdPartition { perspective, warm, cold, thresholds, excluded, statistics: stats.to_vec() })
}

impl WarmColdPartition {
    pub fn bucket(&self, user_id: &str) -> &'static str {
        if self.warm.contains(user_id) {
            "warm"
        } else if self.cold.contains(user_id) {
            "cold"
        } else if self.excluded.iter().any(|u| u == user_id) {
            "excluded"
        } else {
            "middle"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmColdCells {
    pub perspective: Perspective,
    pub warm: Count,
    pub cold: Count,
    /// Computed from the rendered one-decimal warm and cold cells.
    pub diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub overall: Count,
    pub validity: f64,
    pub partitions: Vec<WarmColdCells>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_fingerprint: Option<String>,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodReport>,
}

/// Diff from the one-decimal percentages shown in the warm and cold cells.
pub fn cell_diff(warm: &Count, cold: &Count) -> Result<f64> {
    diff_metric(warm.tenths()? as f64 / 1000.0, cold.tenths()? as f64 / 1000.0)
}

/// Builds the report. Methods keep their order of first appearance; every
/// partition member must have a prediction from every method.
pub fn emit_report(
    records: &[PredictionRecord],
    partitions: &[WarmColdPartition],
    dataset_fingerprint: Option<String>,
    seeds: Vec<u64>,
) -> Result<EvalReport> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_method: HashMap<&str, BTreeMap<&str, &PredictionRecord>> = HashMap::new();
    for r in records {
        let m = by_method.entry(&r.method).or_insert_with(|| {
            order.push(&r.method);
            BTreeMap::new()
        });
        if m.insert(&r.user_id, r).is_some() {
            return Err(Error::InvalidInput(format!("method {} has two predictions for user {}", r.method, r.user_id)));
        }
    }
    let mut methods = Vec::new();
    for name in order {
        let preds = &by_method[name];
        let all: Vec<PredictionRecord> = preds.values().map(|r| (*r).clone()).collect();
        let mut cells = Vec::new();
        for p in partitions {
            let missing: Vec<String> =
                p.warm.iter().chain(&p.cold).filter(|u| !preds.contains_key(u.as_str())).cloned().collect();
            if !missing.is_empty() {
                let mut users = missing;
                users.sort();
                return Err(Error::IncompleteReport { method: name.to_string(), users });
            }
            let warm = Count::of(p.warm.iter().map(|u| preds[u.as_str()]));
            let cold = Count::of(p.cold.iter().map(|u| preds[u.as_str()]));
            let diff = if warm.total == 0 || cold.total == 0 || warm.hits == 0 { None } else { cell_diff(&warm, &cold).ok() };
            cells.push(WarmColdCells { perspective: p.perspective, warm, cold, diff });
        }
        methods.push(MethodReport {
            method: name.to_string(),
            overall: Count::of(&all),
            validity: validity_ratio(&all)?,
            partitions: cells,
        });
    }
    Ok(EvalReport { dataset_fingerprint, seeds, methods })
}

fn cell(c: &Count) -> String {
    match c.percent() {
        Ok(p) => format!("{p} (n={})", c.total),
        Err(_) => "n/a (n=0)".to_string(),
    }
}

impl EvalReport {
    /// Number of rendered metric cells: one overall per method plus warm,
    /// cold and diff per perspective.
    pub fn cell_count(&self) -> usize {
        self.methods.iter().map(|m| 1 + 3 * m.partitions.len()).sum()
    }

    pub fn render_markdown(&self) -> String {
        let mut s = String::from("# Evaluation report\n\n");
        s.push_str(&format!("Dataset fingerprint: {}\n", self.dataset_fingerprint.as_deref().unwrap_or("unknown")));
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        s.push_str(&format!("Seeds: {}\n\n", if seeds.is_empty() { "none".to_string() } else { seeds.join(", ") }));
        s.push_str("## Overall\n\n| Method | HR@1 | Validity |\n|---|---:|---:|\n");
        for m in &self.methods {
            s.push_str(&format!("| {} | {} | {} |\n", m.method, cell(&m.overall), format_percent(m.validity)));
        }
        let perspectives: BTreeSet<Perspective> =
            self.methods.iter().flat_map(|m| m.partitions.iter().map(|c| c.perspective)).collect();
        for p in perspectives {
            s.push_str(&format!(
                "\n## {} perspective\n\n| Method | Warm {} | Cold {} | Diff. |\n|---|---:|---:|---:|\n",
                p.label(),
                p.label().to_lowercase(),
                p.label().to_lowercase()
            ));
            for m in &self.methods {
                for c in m.partitions.iter().filter(|c| c.perspective == p) {
                    let diff = c.diff.map_or_else(|| "n/a".to_string(), format_signed_percent);
                    s.push_str(&format!("| {} | {} | {} | {} |\n", m.method, cell(&c.warm), cell(&c.cold), diff));
                }
            }
        }
        s
    }

    pub fn render_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "perspective", "bucket", "hits", "count", "value"]).map_err(csv_err)?;
        let rate = |c: &Count| c.percent().unwrap_or_else(|_| "n/a".into());
        for m in &self.methods {
            let (h, t) = (m.overall.hits.to_string(), m.overall.total.to_string());
            w.write_record([m.method.as_str(), "ALL", "overall", &h, &t, &rate(&m.overall)]).map_err(csv_err)?;
            for c in &m.partitions {
                for (bucket, cnt) in [("warm", &c.warm), ("cold", &c.cold)] {
                    let (h, t) = (cnt.hits.to_string(), cnt.total.to_string());
                    w.write_record([m.method.as_str(), c.perspective.name(), bucket, &h, &t, &rate(cnt)]).map_err(csv_err)?;
                }
                let diff = c.diff.map_or_else(|| "n/a".to_string(), format_signed_percent);
                w.write_record([m.method.as_str(), c.perspective.name(), "diff", "", "", &diff]).map_err(csv_err)?;
            }
        }
        into_string(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(format!("csv: {e}")))
}

/// `user_id, perspective, bucket, statistic` for every user of every
/// partition, sorted by perspective then user id.
pub fn render_partitions_csv(partitions: &[WarmColdPartition]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["user_id", "perspective", "bucket", "statistic"]).map_err(csv_err)?;
    for p in partitions {
        let mut stats: Vec<&UserStatistic> = p.statistics.iter().collect();
        stats.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        for s in stats {
            let value = s.value.map_or_else(String::new, |v| format!("{v}"));
            w.write_record([s.user_id.as_str(), p.perspective.name(), p.bucket(&s.user_id), &value]).map_err(csv_err)?;
        }
    }
    into_string(w)
}

/// Test-split targets of the dataset must match the dumps.
pub fn check_targets(data: &PreparedDataset, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        let c = data
            .candidates_for(&r.user_id)
            .ok_or_else(|| Error::InvalidInput(format!("dump user {} is not in the dataset", r.user_id)))?;
        if c.test.ground_truth_letter != r.target_letter {
            return Err(Error::InvalidInput(format!(
                "user {}: dump target {} but dataset test target {}",
                r.user_id, r.target_letter, c.test.ground_truth_letter
            )));
        }
    }
    Ok(())
}

/// The three report files as (name, contents).
pub fn report_files(report: &EvalReport, partitions: &[WarmColdPartition]) -> Result<Vec<(&'static str, String)>> {
    Ok(vec![
        ("report.md", report.render_markdown()),
        ("report.csv", report.render_csv()?),
        ("partitions.csv", render_partitions_csv(partitions)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tenths_round_half_up() {
        assert_eq!(Count { hits: 617, total: 1000 }.percent().unwrap(), "61.7%");
        assert_eq!(Count { hits: 1, total: 8 }.percent().unwrap(), "12.5%");
        assert_eq!(Count { hits: 1, total: 16 }.percent().unwrap(), "6.3%");
        assert_eq!(Count { hits: 2, total: 3 }.percent().unwrap(), "66.7%");
        assert_eq!(format_percent(0.0625), "6.3%");
        assert_eq!(format_signed_percent(-0.0625), "-6.3%");
        assert_eq!(format_signed_percent(0.0), "+0.0%");
    }

    #[test]
    fn option_letters() {
        assert!(is_option_letter("A") && is_option_letter("T"));
        assert!(!is_option_letter("U") && !is_option_letter("AB") && !is_option_letter("") && !is_option_letter("a"));
    }
}
