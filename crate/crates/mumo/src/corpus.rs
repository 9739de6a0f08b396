//! JSONL molecule records and the bounded queue that turns them into
//! model samples off the training thread.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::thread;

use mumo_core::model::{ModelError, Sample, SampleBuilder};
use mumo_core::smiles::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 500-molecule corpus shipped with the crate.
pub const BUNDLED_CORPUS: &str = include_str!("../data/corpus.jsonl");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    One(f64),
    Many(Vec<f64>),
}

impl Label {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Label::One(v) => vec![*v],
            Label::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub smiles: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<Point3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

pub fn parse_jsonl(text: &str, origin: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::json(format!("{origin}:{}", i + 1), e)))
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?);
    }
    Ok(out)
}

/// Loads `path`, or the bundled corpus when `path` is `None`.
pub fn load(path: Option<&Path>) -> Result<Vec<Record>> {
    match path {
        Some(p) => read_jsonl(p),
        None => parse_jsonl(BUNDLED_CORPUS, "bundled corpus"),
    }
}

/// Builds samples on `workers` producer threads feeding a bounded channel of
/// `capacity` slots. Output order matches `records`.
pub fn prepare_samples(
    records: &[Record],
    builder: &SampleBuilder<'_>,
    workers: usize,
    capacity: usize,
) -> Result<Vec<Sample>> {
    let workers = workers.max(1);
    let mut slots: Vec<Option<std::result::Result<Sample, ModelError>>> = vec![None; records.len()];
    thread::scope(|scope| {
        let (tx, rx) = sync_channel(capacity.max(1));
        for w in 0..workers {
            let tx = tx.clone();
            scope.spawn(move || {
                for i in (w..records.len()).step_by(workers) {
                    let r = &records[i];
                    let label = r.label.as_ref().map(Label::to_vec).unwrap_or_default();
                    if tx.send((i, builder.build(&r.smiles, r.coords.clone(), label))).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);
        for (i, s) in rx {
            slots[i] = Some(s);
        }
    });
    slots
        .into_iter()
        .zip(records)
        .map(|(s, r)| match s {
            Some(Ok(s)) => Ok(s),
            Some(Err(e)) => Err(Error::Data(format!("{}: {e}", r.smiles))),
            None => Err(Error::Data(format!("{}: not processed", r.smiles))),
        })
        .collect()
}
