//! Crowd annotation records, vote counting and the two count-normalization
//! views, plus the majority-vote ("silver") baseline.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::distributions::{softmax_slice, Categorical};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Ordered set of label names; the order fixes vector coordinates everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        LabelSpace::new(labels)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(ls: LabelSpace) -> Self {
        ls.labels
    }
}

impl LabelSpace {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Config(format!(
                "label space needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    /// One label per line; blank lines are skipped.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut labels = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let l = line.trim();
            if !l.is_empty() {
                labels.push(l.to_string());
            }
        }
        Self::new(labels)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for l in &self.labels {
            writeln!(w, "{l}")?;
        }
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Record {
    pub item: usize,
    pub annotator: usize,
    pub label: usize,
}

/// Validated crowd annotations. Items and annotators are interned in order
/// of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    label_space: LabelSpace,
    items: Vec<String>,
    annotators: Vec<String>,
    records: Vec<Record>,
}

impl AnnotationSet {
    /// Builds a set from `(item_id, annotator_id, label_index)` triples.
    pub fn from_records<I, S1, S2>(label_space: LabelSpace, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S1, S2, usize)>,
        S1: AsRef<str>,
        S2: AsRef<str>,
    {
        let mut items = Vec::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut annotators = Vec::new();
        let mut annotator_index: HashMap<String, usize> = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        let k = label_space.k();

        for (item, annotator, label) in records {
            let (item, annotator) = (item.as_ref(), annotator.as_ref());
            if label >= k {
                return Err(Error::UnknownLabel(format!("index {label} with K = {k}")));
            }
            let i = *item_index.entry(item.to_string()).or_insert_with(|| {
                items.push(item.to_string());
                items.len() - 1
            });
            let a = *annotator_index
                .entry(annotator.to_string())
                .or_insert_with(|| {
                    annotators.push(annotator.to_string());
                    annotators.len() - 1
                });
            if !seen.insert((i, a)) {
                return Err(Error::DuplicateAnnotation {
                    item: item.to_string(),
                    annotator: annotator.to_string(),
                });
            }
            out.push(Record {
                item: i,
                annotator: a,
                label,
            });
        }
        if out.is_empty() {
            return Err(Error::EmptyInput("no annotation records".into()));
        }
        Ok(Self {
            label_space,
            items,
            annotators,
            records: out,
        })
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn k(&self) -> usize {
        self.label_space.k()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn annotators(&self) -> &[String] {
        &self.annotators
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_annotators(&self) -> usize {
        self.annotators.len()
    }

    /// Records grouped by item index.
    pub fn records_by_item(&self) -> Vec<Vec<Record>> {
        let mut out = vec![Vec::new(); self.n_items()];
        for r in &self.records {
            out[r.item].push(*r);
        }
        out
    }

    /// Drops items with fewer than `min` annotations.
    pub fn filter_min_annotations(&self, min: usize) -> Result<Self> {
        let counts = self.records_by_item();
        let keep = self
            .records
            .iter()
            .filter(|r| counts[r.item].len() >= min)
            .map(|r| {
                (
                    self.items[r.item].as_str(),
                    self.annotators[r.annotator].as_str(),
                    r.label,
                )
            });
        Self::from_records(self.label_space.clone(), keep)
    }

    /// Writes the `item_id,annotator_id,label` CSV form.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["item_id", "annotator_id", "label"])?;
        for r in &self.records {
            wtr.write_record([
                self.items[r.item].as_str(),
                self.annotators[r.annotator].as_str(),
                self.label_space.name(r.label),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Parses the `item_id,annotator_id,label` CSV.
///
/// Without an explicit `label_space` the labels are the sorted set of
/// distinct names in the file.
pub fn load_annotations<R: Read>(
    source: R,
    label_space: Option<&LabelSpace>,
) -> Result<AnnotationSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["item_id", "annotator_id", "label"] {
        return Err(Error::Parse(format!(
            "expected header item_id,annotator_id,label, got {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::Parse(format!(
                "row {}: expected 3 fields, got {}",
                line + 2,
                rec.len()
            )));
        }
        rows.push((rec[0].to_string(), rec[1].to_string(), rec[2].to_string()));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("annotation file has no rows".into()));
    }
    let space = match label_space {
        Some(ls) => ls.clone(),
        None => {
            let distinct: BTreeSet<&str> = rows.iter().map(|r| r.2.as_str()).collect();
            LabelSpace::new(distinct.into_iter().map(str::to_string).collect())?
        }
    };
    let mut triples = Vec::with_capacity(rows.len());
    for (item, annotator, label) in rows {
        let idx = space
            .index_of(&label)
            .ok_or_else(|| Error::UnknownLabel(label.clone()))?;
        triples.push((item, annotator, idx));
    }
    AnnotationSet::from_records(space, triples)
}

/// Per-item label vote counts, aligned with [`AnnotationSet::items`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteCounts {
    items: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl VoteCounts {
    pub fn new(items: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if items.len() != counts.len() {
            return Err(Error::LengthMismatch {
                left: items.len(),
                right: counts.len(),
            });
        }
        if let Some(k) = counts.first().map(Vec::len) {
            if let Some(bad) = counts.iter().find(|c| c.len() != k) {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: bad.len(),
                });
            }
        }
        Ok(Self { items, counts })
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn row(&self, item: usize) -> &[u64] {
        &self.counts[item]
    }
}

pub fn vote_counts(a: &AnnotationSet) -> VoteCounts {
    let mut counts = vec![vec![0u64; a.k()]; a.n_items()];
    for r in a.records() {
        counts[r.item][r.label] += 1;
    }
    VoteCounts {
        items: a.items().to_vec(),
        counts,
    }
}

/// `p(i, y) = c(i, y) / sum_y' c(i, y')`.
pub fn standard_normalize(c: &VoteCounts) -> Result<Vec<Categorical>> {
    c.counts
        .iter()
        .zip(&c.items)
        .map(|(row, item)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                return Err(Error::NoAnnotations(item.clone()));
            }
            let t = total as f64;
            Categorical::new(row.iter().map(|&n| n as f64 / t).collect())
        })
        .collect()
}

/// `p(i, y) = exp(c(i, y)) / sum_y' exp(c(i, y'))` on raw counts.
pub fn softmax_normalize(c: &VoteCounts) -> Vec<Categorical> {
    c.counts
        .iter()
        .map(|row| {
            let logits: Vec<f64> = row.iter().map(|&n| n as f64).collect();
            Categorical::from_vec_unchecked(softmax_slice(&logits))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    #[default]
    LowestIndex,
    Error,
    SeededRandom(u64),
}

/// Plurality label per item.
pub fn majority_vote(c: &VoteCounts, tie_rule: TieRule) -> Result<Vec<usize>> {
    let mut rng = match tie_rule {
        TieRule::SeededRandom(seed) => Some(SeededRng::new(seed)),
        _ => None,
    };
    let mut out = Vec::with_capacity(c.counts.len());
    for (row, item) in c.counts.iter().zip(&c.items) {
        let best = row.iter().copied().max().unwrap_or(0);
        if best == 0 {
            return Err(Error::NoAnnotations(item.clone()));
        }
        let tied: Vec<usize> = (0..row.len()).filter(|&j| row[j] == best).collect();
        let pick = if tied.len() == 1 {
            tied[0]
        } else {
            match tie_rule {
                TieRule::LowestIndex => {
                    log::warn!("item {item}: tie between labels {tied:?}, taking the lowest index");
                    tied[0]
                }
                TieRule::Error => {
                    return Err(Error::Tie {
                        item: item.clone(),
                        labels: tied,
                    })
                }
                TieRule::SeededRandom(_) => {
                    let r = rng.as_mut().expect("rng present for seeded ties");
                    tied[r.index(tied.len())]
                }
            }
        };
        out.push(pick);
    }
    Ok(out)
}
