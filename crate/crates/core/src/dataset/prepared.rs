use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::candidates::{sample_candidates, CandidateSet, ItemCatalog};
use super::filter::k_core_filter;
use super::ingest::{Density, IngestReport, InteractionLog};
use super::sequence::{build_sequences, SequenceReport, UserSequence};
use super::split::{split_all, Split, SplitAssignment, SplitReport};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub seed: u64,
    pub core: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self { seed: 0, core: super::filter::CORE_THRESHOLD }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogCounts {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: Density,
}

impl LogCounts {
    pub fn of(log: &InteractionLog) -> Self {
        Self {
            users: log.user_count(),
            items: log.item_count(),
            interactions: log.interaction_count(),
            density: log.density(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub raw: LogCounts,
    pub filtered: LogCounts,
}

impl DatasetStats {
    pub fn render_markdown(&self, name: &str) -> String {
        let mut s = String::from("| Dataset | #User | #Item | #Interaction | Density |\n|---|---:|---:|---:|---:|\n");
        for (label, c) in [(format!("{name} (raw)"), &self.raw), (name.to_string(), &self.filtered)] {
            s.push_str(&format!(
                "| {label} | {} | {} | {} | {} |\n",
                thousands(c.users),
                thousands(c.items),
                thousands(c.interactions),
                c.density.render()
            ));
        }
        s
    }
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (k, ch) in digits.chars().enumerate() {
        if k > 0 && (digits.len() - k) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub ingest: Option<IngestReport>,
    pub sequences: SequenceReport,
    pub splits: SplitReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserCandidates {
    pub user_id: String,
    pub val: CandidateSet,
    pub test: CandidateSet,
}

impl UserCandidates {
    pub fn get(&self, split: Split) -> &CandidateSet {
        match split {
            Split::Validation => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub config: PrepareConfig,
    pub stats: DatasetStats,
    pub catalog: ItemCatalog,
    pub sequences: Vec<UserSequence>,
    pub splits: Vec<SplitAssignment>,
    pub candidates: Vec<UserCandidates>,
    pub report: PrepareReport,
}

pub fn candidate_seed(root: u64, split: Split, user_id: &str) -> u64 {
    seed::derive(root, &["candidates", split.name(), user_id])
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    user_id: String,
    train_items: Vec<String>,
    val_item: String,
    test_item: String,
}

const FILES: [&str; 5] = ["catalog.jsonl", "sequences.jsonl", "splits.jsonl", "candidates.jsonl", "config.json"];

impl PreparedDataset {
    /// Filter, sequence, split and sample candidates. Negatives exclude every
    /// item in the user's full sequence, so the test item can never appear as
    /// a validation negative.
    pub fn prepare(raw: &InteractionLog, config: PrepareConfig) -> Result<Self> {
        let filtered = k_core_filter(raw, config.core);
        let stats = DatasetStats { raw: LogCounts::of(raw), filtered: LogCounts::of(&filtered) };
        let catalog = ItemCatalog::from_log(&filtered);
        let (sequences, seq_report) = build_sequences(&filtered);
        let (splits, split_report) = split_all(&sequences);
        let candidates = splits
            .par_iter()
            .map(|a| {
                let user = a.user_id();
                let history = &a.sequence().items;
                let mk = |split: Split| {
                    let (_, target) = a.example(split);
                    sample_candidates(user, &target.item_id, &catalog, history, candidate_seed(config.seed, split, user))
                };
                Ok(UserCandidates { user_id: user.to_string(), val: mk(Split::Validation)?, test: mk(Split::Test)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            stats,
            catalog,
            sequences,
            splits,
            candidates,
            report: PrepareReport { ingest: None, sequences: seq_report, splits: split_report },
        })
    }

    /// The processed files as (name, bytes), in fingerprint order.
    pub fn render_files(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let catalog = jsonl_bytes(self.catalog.iter().map(|(id, e)| {
            serde_json::json!({"item_id": id, "title": e.title, "interactions": e.interactions})
        }))?;
        let splits = jsonl_bytes(self.splits.iter().map(|a| SplitRecord {
            user_id: a.user_id().to_string(),
            train_items: a.train_prefix().items,
            val_item: a.item(a.val_index()).item_id,
            test_item: a.item(a.test_index()).item_id,
        }))?;
        Ok(vec![
            (FILES[0], catalog),
            (FILES[1], jsonl_bytes(self.sequences.iter())?),
            (FILES[2], splits),
            (FILES[3], jsonl_bytes(self.candidates.iter())?),
            (FILES[4], (serde_json::to_string_pretty(&self.config)? + "\n").into_bytes()),
        ])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in self.render_files()? {
            fs::write(dir.join(name), bytes)?;
        }
        fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&self.stats)? + "\n")?;
        fs::write(dir.join("stats.md"), self.stats.render_markdown("dataset"))?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct CatalogRow {
            item_id: String,
            title: String,
            interactions: usize,
        }
        let mut catalog = ItemCatalog::default();
        for row in read_jsonl::<CatalogRow>(&dir.join("catalog.jsonl"))? {
            catalog.insert(row.item_id, row.title, row.interactions);
        }
        let sequences: Vec<UserSequence> = read_jsonl(&dir.join("sequences.jsonl"))?;
        let records: Vec<SplitRecord> = read_jsonl(&dir.join("splits.jsonl"))?;
        let (splits, split_report) = split_all(&sequences);
        if records.len() != splits.len()
            || records.iter().zip(&splits).any(|(r, a)| {
                r.user_id != a.user_id() || r.test_item != a.item(a.test_index()).item_id
            })
        {
            return Err(Error::InvalidInput(format!("{}: splits.jsonl disagrees with sequences.jsonl", dir.display())));
        }
        let candidates: Vec<UserCandidates> = read_jsonl(&dir.join("candidates.jsonl"))?;
        if candidates.len() != splits.len() {
            return Err(Error::InvalidInput(format!("{}: candidate count mismatch", dir.display())));
        }
        let config: PrepareConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        let stats: DatasetStats = serde_json::from_str(&fs::read_to_string(dir.join("stats.json"))?)?;
        let report = match fs::read_to_string(dir.join("report.json")) {
            Ok(s) => serde_json::from_str(&s)?,
            Err(_) => PrepareReport { splits: split_report, ..Default::default() },
        };
        Ok(Self { config, stats, catalog, sequences, splits, candidates, report })
    }

    /// SHA-256 over the processed files, in a fixed order.
    pub fn fingerprint_dir(dir: &Path) -> Result<String> {
        let mut h = Sha256::new();
        for f in FILES {
            h.update(f.as_bytes());
            h.update(fs::read(dir.join(f))?);
        }
        Ok(hex(&h.finalize()))
    }

    /// Fingerprint of the in-memory dataset; equals [`Self::fingerprint_dir`]
    /// after [`Self::save`].
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, bytes) in self.render_files()? {
            h.update(name.as_bytes());
            h.update(bytes);
        }
        Ok(hex(&h.finalize()))
    }

    pub fn candidates_for(&self, user_id: &str) -> Option<&UserCandidates> {
        self.candidates
            .binary_search_by(|c| c.user_id.as_str().cmp(user_id))
            .ok()
            .map(|k| &self.candidates[k])
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn jsonl_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(&jsonl_bytes(rows)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::InputFormat {
            line: k + 1,
            message: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}
