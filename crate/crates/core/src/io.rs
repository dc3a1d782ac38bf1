//! File formats shared by the command-line tool and the bindings: ensemble
//! and aggregate JSONL, feature / target / gold CSVs.
//!
//! Floats are written in their shortest round-trip representation, so a
//! value read back is bit-identical to the value written.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::aggregation::{Aggregate, Ensemble};
use crate::distill::FeatureDataset;
use crate::distributions::Categorical;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct EnsembleLine {
    item_id: String,
    distributions: serde_json::Map<String, serde_json::Value>,
}

/// One JSON object per item: `{"item_id": .., "distributions": {method: [..]}}`.
pub fn write_ensemble_jsonl<W: Write>(mut w: W, e: &Ensemble) -> Result<()> {
    for (i, id) in e.item_ids().iter().enumerate() {
        let mut dists = serde_json::Map::new();
        for (name, p) in e.method_names().iter().zip(e.item(i)) {
            dists.insert(name.clone(), serde_json::to_value(p)?);
        }
        let line = EnsembleLine {
            item_id: id.clone(),
            distributions: dists,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("line {line}: {msg}"))
}

/// Reads an ensemble file. The method names and their order come from the
/// first line; every later line must carry exactly the same methods.
pub fn read_ensemble_jsonl<R: BufRead>(r: R) -> Result<Ensemble> {
    let mut names: Option<Vec<String>> = None;
    let mut ids = Vec::new();
    let mut members = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EnsembleLine = serde_json::from_str(&line).map_err(|e| parse_err(n + 1, e))?;
        let order = names.get_or_insert_with(|| rec.distributions.keys().cloned().collect());
        if rec.distributions.len() != order.len() {
            return Err(parse_err(
                n + 1,
                format!("item {:?} has {} methods, expected {}", rec.item_id, rec.distributions.len(), order.len()),
            ));
        }
        let row = order
            .iter()
            .map(|m| {
                let v = rec
                    .distributions
                    .get(m)
                    .ok_or_else(|| parse_err(n + 1, format!("item {:?} lacks method {m:?}", rec.item_id)))?;
                serde_json::from_value::<Categorical>(v.clone()).map_err(|e| parse_err(n + 1, e))
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(rec.item_id);
        members.push(row);
    }
    let names = names.ok_or_else(|| Error::EmptyInput("ensemble file has no items".into()))?;
    Ensemble::new(names, ids, members)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateLine {
    pub item_id: String,
    pub aggregator: String,
    pub probs: Categorical,
    pub converged: bool,
}

pub fn write_aggregate_jsonl<W: Write>(mut w: W, item_ids: &[String], a: &Aggregate) -> Result<()> {
    if item_ids.len() != a.probs.len() {
        return Err(Error::LengthMismatch {
            left: item_ids.len(),
            right: a.probs.len(),
        });
    }
    for ((id, p), &converged) in item_ids.iter().zip(&a.probs).zip(&a.converged) {
        let line = AggregateLine {
            item_id: id.clone(),
            aggregator: a.aggregator.name().to_string(),
            probs: p.clone(),
            converged,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct ProbsLine {
    item_id: String,
    probs: Categorical,
}

/// Reads `(item_id, probs)` from any JSONL whose lines carry those two
/// fields (aggregate outputs and prediction files). Other fields are ignored.
pub fn read_probs_jsonl<R: BufRead>(r: R) -> Result<Vec<(String, Categorical)>> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProbsLine = serde_json::from_str(&line).map_err(|e| parse_err(n + 1, e))?;
        if seen.insert(rec.item_id.clone(), n).is_some() {
            return Err(parse_err(n + 1, format!("duplicate item_id {:?}", rec.item_id)));
        }
        out.push((rec.item_id, rec.probs));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("probability file has no items".into()));
    }
    Ok(out)
}

pub fn write_probs_jsonl<W: Write>(mut w: W, rows: &[(String, Categorical)]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        item_id: &'a str,
        probs: &'a Categorical,
    }
    for (id, p) in rows {
        serde_json::to_writer(&mut w, &Line { item_id: id, probs: p })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn expect_header(headers: &csv::StringRecord, prefix: &str) -> Result<usize> {
    if headers.get(0) != Some("item_id") {
        return Err(Error::Parse("first column must be item_id".into()));
    }
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h != format!("{prefix}{j}") {
            return Err(Error::Parse(format!("column {} should be {prefix}{j}, found {h:?}", j + 2)));
        }
    }
    Ok(headers.len() - 1)
}

fn parse_f64(s: &str, row: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("row {row}: {s:?} is not a number")))
}

/// Features CSV: `item_id,f0,..,f{D-1}`.
pub fn read_features_csv<R: Read>(r: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let d = expect_header(rdr.headers()?, "f")?;
    if d == 0 {
        return Err(Error::Parse("features file has no feature columns".into()));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        rows.push(
            rec.iter()
                .skip(1)
                .map(|s| parse_f64(s, n + 2))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if ids.is_empty() {
        return Err(Error::EmptyInput("features file has no rows".into()));
    }
    Ok((ids, rows))
}

pub fn write_features_csv<W: Write>(w: W, ids: &[String], features: &[Vec<f64>]) -> Result<()> {
    let d = features.first().map_or(0, Vec::len);
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["item_id".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    wtr.write_record(&header)?;
    for (id, x) in ids.iter().zip(features) {
        let mut row = vec![id.clone()];
        row.extend(x.iter().map(f64::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Pairs features with soft targets by item id, in feature-file order.
/// Fails naming the first feature item without a target.
pub fn join_features_targets(
    ids: Vec<String>,
    features: Vec<Vec<f64>>,
    targets: Vec<(String, Categorical)>,
) -> Result<FeatureDataset> {
    let mut by_id: HashMap<String, Categorical> = targets.into_iter().collect();
    let aligned = ids
        .iter()
        .map(|id| {
            by_id
                .remove(id)
                .ok_or_else(|| Error::Parse(format!("item_id {id:?} has features but no target")))
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureDataset::new(ids, features, aligned)
}

/// Dataset CSV: `item_id,f0..f{D-1},t0..t{K-1}`.
pub fn write_feature_dataset_csv<W: Write>(w: W, ds: &FeatureDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["item_id".to_string()];
    header.extend((0..ds.dim()).map(|j| format!("f{j}")));
    header.extend((0..ds.k()).map(|j| format!("t{j}")));
    wtr.write_record(&header)?;
    for ((id, x), t) in ds.item_ids().iter().zip(ds.features()).zip(ds.targets()) {
        let mut row = vec![id.clone()];
        row.extend(x.iter().map(f64::to_string));
        row.extend(t.probs().iter().map(f64::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_feature_dataset_csv<R: Read>(r: R) -> Result<FeatureDataset> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("item_id") {
        return Err(Error::Parse("first column must be item_id".into()));
    }
    let d = headers.iter().skip(1).take_while(|h| h.starts_with('f')).count();
    let k = headers.len() - 1 - d;
    for (j, h) in headers.iter().skip(1).enumerate() {
        let want = if j < d { format!("f{j}") } else { format!("t{}", j - d) };
        if h != want {
            return Err(Error::Parse(format!("column {} should be {want}, found {h:?}", j + 2)));
        }
    }
    if d == 0 || k < 2 {
        return Err(Error::Parse(format!("need feature columns and at least 2 target columns, found {d} and {k}")));
    }
    let (mut ids, mut xs, mut ts) = (Vec::new(), Vec::new(), Vec::new());
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| parse_f64(s, n + 2))
            .collect::<Result<Vec<_>>>()?;
        ids.push(rec[0].to_string());
        xs.push(vals[..d].to_vec());
        ts.push(Categorical::new(vals[d..].to_vec())?);
    }
    if ids.is_empty() {
        return Err(Error::EmptyInput("dataset file has no rows".into()));
    }
    FeatureDataset::new(ids, xs, ts)
}

/// Gold / truth CSV: `item_id,label` with label names.
pub fn read_gold_csv<R: Read>(r: R) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?;
    if headers.iter().collect::<Vec<_>>() != ["item_id", "label"] {
        return Err(Error::Parse(format!(
            "gold header must be item_id,label, found {:?}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("gold file has no rows".into()));
    }
    Ok(out)
}

pub fn write_gold_csv<W: Write>(w: W, rows: &[(String, String)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["item_id", "label"])?;
    for (id, label) in rows {
        wtr.write_record([id, label])?;
    }
    wtr.flush()?;
    Ok(())
}
