//! Canonical corpus format: line-delimited JSON, one record per line.
//!
//! The first record must be the corpus header; after it come event records
//! and optional per-thread horizon overrides, in any order:
//!
//! ```text
//! {"type":"header","num_labels":4,"embedding_dim":3,"label_names":["support","deny","question","comment"]}
//! {"type":"event","thread_id":"r1","t":0.0,"label":"support","embedding":[0.1,0.2,0.3]}
//! {"type":"horizon","thread_id":"r1","T":24.0}
//! ```
//!
//! Parsing is strict: unknown fields are rejected with the offending line
//! number. Event labels may be names from `label_names` or bare indices.
//! When the label names are exactly the four stance classes, indices are
//! canonicalized to the order support, deny, question, comment so influence
//! matrices from different exports line up.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Corpus, Event, Thread};

/// Identifier of a supported corpus file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusSchema {
    /// Line-delimited JSON records, version 1.
    #[default]
    JsonLinesV1,
}

impl std::str::FromStr for CorpusSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "jsonl-v1" => Ok(CorpusSchema::JsonLinesV1),
            other => Err(Error::UnknownSchema(other.to_string())),
        }
    }
}

pub const STANCE_LABELS: [&str; 4] = ["support", "deny", "question", "comment"];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    #[serde(rename = "type")]
    _type: String,
    num_labels: usize,
    embedding_dim: usize,
    #[serde(default)]
    label_names: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LabelRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventRecord {
    #[serde(rename = "type")]
    _type: String,
    thread_id: String,
    t: f64,
    label: LabelRef,
    embedding: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HorizonRecord {
    #[serde(rename = "type")]
    _type: String,
    thread_id: String,
    #[serde(rename = "T")]
    horizon: f64,
}

#[derive(Debug, Serialize)]
struct HeaderOut<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    num_labels: usize,
    embedding_dim: usize,
    label_names: &'a [String],
}

#[derive(Debug, Serialize)]
struct EventOut<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    thread_id: &'a str,
    t: f64,
    label: &'a str,
    embedding: &'a [f64],
}

#[derive(Debug, Serialize)]
struct HorizonOut<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    thread_id: &'a str,
    #[serde(rename = "T")]
    horizon: f64,
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Load and validate a corpus file.
pub fn load_corpus(path: impl AsRef<Path>, schema: CorpusSchema) -> Result<Corpus> {
    let corpus = load_corpus_raw(path, schema)?;
    let violations = corpus.validate();
    if !violations.is_empty() {
        let listed: Vec<String> = violations.iter().take(8).map(|v| v.to_string()).collect();
        return Err(Error::InvalidCorpus(format!(
            "{} invariant violation(s): {}",
            violations.len(),
            listed.join("; ")
        )));
    }
    Ok(corpus)
}

/// Parse a corpus file without the final invariant check, so callers can
/// inspect every violation via [`Corpus::validate`]. Records must still be
/// well formed.
pub fn load_corpus_raw(path: impl AsRef<Path>, schema: CorpusSchema) -> Result<Corpus> {
    let CorpusSchema::JsonLinesV1 = schema;
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut header: Option<HeaderRecord> = None;
    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut events: HashMap<String, Vec<Event>> = HashMap::new();
    let mut horizons: HashMap<String, (f64, usize)> = HashMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| malformed(path, lineno, e.to_string()))?;
        let kind = value
            .get("type")
            .and_then(|v| v.as_str())
            .ok_or_else(|| malformed(path, lineno, "record has no `type` field"))?
            .to_string();

        if header.is_none() {
            if kind != "header" {
                return Err(malformed(path, lineno, "first record must be the corpus header"));
            }
            let h: HeaderRecord = serde_json::from_value(value)
                .map_err(|e| malformed(path, lineno, e.to_string()))?;
            if let Some(names) = &h.label_names {
                if names.len() != h.num_labels {
                    return Err(malformed(
                        path,
                        lineno,
                        format!(
                            "label_names has {} entries but num_labels is {}",
                            names.len(),
                            h.num_labels
                        ),
                    ));
                }
            }
            let names = canonical_label_names(h.num_labels, h.label_names.clone());
            for (i, name) in names.iter().enumerate() {
                label_index.insert(name.to_ascii_lowercase(), i);
            }
            header = Some(HeaderRecord {
                label_names: Some(names),
                ..h
            });
            continue;
        }
        let head = header.as_ref().unwrap();

        match kind.as_str() {
            "header" => {
                return Err(malformed(path, lineno, "duplicate corpus header"));
            }
            "event" => {
                let rec: EventRecord = serde_json::from_value(value)
                    .map_err(|e| malformed(path, lineno, e.to_string()))?;
                if rec.embedding.len() != head.embedding_dim {
                    return Err(Error::Dimension(format!(
                        "{}:{}: embedding has {} entries, corpus declares {}",
                        path.display(),
                        lineno,
                        rec.embedding.len(),
                        head.embedding_dim
                    )));
                }
                let label = match rec.label {
                    LabelRef::Index(i) => i,
                    LabelRef::Name(name) => *label_index
                        .get(&name.to_ascii_lowercase())
                        .ok_or_else(|| Error::UnknownLabel {
                            label: name.clone(),
                            path: path.display().to_string(),
                            line: lineno,
                        })?,
                };
                if !events.contains_key(&rec.thread_id) {
                    order.push(rec.thread_id.clone());
                }
                events.entry(rec.thread_id).or_default().push(Event {
                    time: rec.t,
                    label,
                    mark: 0,
                    embedding: Array1::from_vec(rec.embedding),
                });
            }
            "horizon" => {
                let rec: HorizonRecord = serde_json::from_value(value)
                    .map_err(|e| malformed(path, lineno, e.to_string()))?;
                horizons.insert(rec.thread_id, (rec.horizon, lineno));
            }
            other => {
                return Err(malformed(path, lineno, format!("unknown record type `{other}`")));
            }
        }
    }

    let header = header.ok_or_else(|| Error::InvalidCorpus("no threads".into()))?;
    if order.is_empty() {
        return Err(Error::InvalidCorpus("no threads".into()));
    }

    let mut threads = Vec::with_capacity(order.len());
    let mut adjusted_total = 0usize;
    for (mark, id) in order.iter().enumerate() {
        let evs = events.remove(id).unwrap();
        let horizon = horizons.remove(id).map(|(t, _)| t);
        let (thread, adjusted) = Thread::from_events(id.clone(), mark, evs, horizon)?;
        adjusted_total += adjusted;
        threads.push(thread);
    }
    if let Some((id, (_, lineno))) = horizons.into_iter().next() {
        return Err(malformed(
            path,
            lineno,
            format!("horizon record references unknown thread `{id}`"),
        ));
    }
    if adjusted_total > 0 {
        log::warn!(
            "{}: spread {adjusted_total} tied timestamps by multiples of {} hours",
            path.display(),
            crate::types::TIE_EPSILON
        );
    }

    Ok(Corpus {
        threads,
        num_labels: header.num_labels,
        embedding_dim: header.embedding_dim,
        label_names: header.label_names.unwrap(),
    })
}

/// Resolve the label vocabulary: explicit names canonicalized to the stance
/// order when they are exactly the four stance classes, synthesized indices
/// otherwise.
fn canonical_label_names(num_labels: usize, names: Option<Vec<String>>) -> Vec<String> {
    match names {
        None => (0..num_labels).map(|i| i.to_string()).collect(),
        Some(names) => {
            let lowered: Vec<String> = names.iter().map(|n| n.to_ascii_lowercase()).collect();
            let mut sorted = lowered.clone();
            sorted.sort();
            let mut stance: Vec<String> = STANCE_LABELS.iter().map(|s| s.to_string()).collect();
            stance.sort();
            if sorted == stance {
                STANCE_LABELS
                    .iter()
                    .map(|want| {
                        let at = lowered.iter().position(|n| n == want).unwrap();
                        names[at].clone()
                    })
                    .collect()
            } else {
                names
            }
        }
    }
}

/// Serialize a corpus in the canonical line-delimited format.
pub fn save_corpus(corpus: &Corpus, mut out: impl Write) -> Result<()> {
    let io_err = |source: std::io::Error| Error::Io {
        path: "<writer>".into(),
        source,
    };
    let header = HeaderOut {
        kind: "header",
        num_labels: corpus.num_labels,
        embedding_dim: corpus.embedding_dim,
        label_names: &corpus.label_names,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header is serializable"))
        .map_err(io_err)?;
    for thread in &corpus.threads {
        let horizon = HorizonOut {
            kind: "horizon",
            thread_id: &thread.id,
            horizon: thread.horizon,
        };
        writeln!(out, "{}", serde_json::to_string(&horizon).expect("horizon is serializable"))
            .map_err(io_err)?;
        for ev in &thread.events {
            let rec = EventOut {
                kind: "event",
                thread_id: &thread.id,
                t: ev.time,
                label: &corpus.label_names[ev.label],
                embedding: ev.embedding.as_slice().expect("contiguous embedding"),
            };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("event is serializable"))
                .map_err(io_err)?;
        }
    }
    Ok(())
}

/// [`save_corpus`] to a file path.
pub fn save_corpus_to_path(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    save_corpus(corpus, std::io::BufWriter::new(file))
}
