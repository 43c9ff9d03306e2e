//! Image feature records and the `*.features.jsonl` format.
//!
//! Line 1 is a header `{"schema":"features-v1","dim":D}` (optionally with a
//! `provenance` string); every following non-blank line is one record with
//! keys `id`, `split`, `embedding`, `labels` and optionally `confidence`.
//! Unknown keys are rejected.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Number of criteria, in the fixed order C1, C2, C3.
pub const NUM_CRITERIA: usize = 3;

pub const FEATURES_SCHEMA: &str = "features-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Per-criterion presence flags.
pub type Labels = [bool; NUM_CRITERIA];

/// Annotator confidence rounds to a binary label; 0.5 rounds up.
pub fn round_confidence(c: f64) -> bool {
    c >= 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub split: Split,
    pub embedding: Vec<f64>,
    pub labels: Labels,
    pub confidence: Option<[f64; NUM_CRITERIA]>,
}

impl FeatureRecord {
    pub fn label(&self, criterion: usize) -> bool {
        self.labels[criterion]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
    pub provenance: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    dim: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    provenance: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    split: Split,
    #[serde(serialize_with = "io::serialize_f64_vec")]
    embedding: Vec<f64>,
    labels: Vec<u8>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "io::serialize_opt_f64_vec"
    )]
    confidence: Option<Vec<f64>>,
}

impl RawRecord {
    fn into_record(self, dim: usize) -> Result<FeatureRecord> {
        let id = self.id;
        if id.is_empty() {
            return Err(Error::Schema("record with empty id".into()));
        }
        if self.embedding.len() != dim {
            return Err(Error::Schema(format!(
                "record `{id}` has a {}-dim embedding, header declares {dim}",
                self.embedding.len()
            )));
        }
        if self.embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::Schema(format!("record `{id}` has a non-finite embedding value")));
        }
        if self.labels.len() != NUM_CRITERIA {
            return Err(Error::Schema(format!(
                "record `{id}` has {} labels, expected {NUM_CRITERIA}",
                self.labels.len()
            )));
        }
        let mut labels = [false; NUM_CRITERIA];
        for (slot, &l) in labels.iter_mut().zip(&self.labels) {
            *slot = match l {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::Schema(format!(
                        "record `{id}` has label {other}; labels must be 0 or 1"
                    )))
                }
            };
        }
        let confidence = match self.confidence {
            None => None,
            Some(c) => {
                if c.len() != NUM_CRITERIA {
                    return Err(Error::Schema(format!(
                        "record `{id}` has {} confidence values, expected {NUM_CRITERIA}",
                        c.len()
                    )));
                }
                for (i, (&ci, &li)) in c.iter().zip(&labels).enumerate() {
                    if !(0.0..=1.0).contains(&ci) {
                        return Err(Error::Schema(format!(
                            "record `{id}` confidence C{} = {ci} outside [0, 1]",
                            i + 1
                        )));
                    }
                    if round_confidence(ci) != li {
                        return Err(Error::Schema(format!(
                            "record `{id}` confidence C{} = {ci} does not round to its label",
                            i + 1
                        )));
                    }
                }
                Some([c[0], c[1], c[2]])
            }
        };
        Ok(FeatureRecord {
            id,
            split: self.split,
            embedding: self.embedding,
            labels,
            confidence,
        })
    }

    fn from_record(r: &FeatureRecord) -> Self {
        RawRecord {
            id: r.id.clone(),
            split: r.split,
            embedding: r.embedding.clone(),
            labels: r.labels.iter().map(|&b| u8::from(b)).collect(),
            confidence: r.confidence.map(|c| c.to_vec()),
        }
    }
}

impl Dataset {
    /// Checks every record against `dim` and id uniqueness.
    pub fn new(dim: usize, records: Vec<FeatureRecord>, provenance: impl Into<String>) -> Result<Self> {
        let d = Self {
            dim,
            records,
            provenance: provenance.into(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Schema("embedding dimension must be positive".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            RawRecord::from_record(r).into_record(self.dim)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Schema(format!("duplicate record id `{}`", r.id)));
            }
        }
        Ok(())
    }

    pub fn split_view(&self, split: Split) -> Vec<&FeatureRecord> {
        split_view(self, split)
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            schema: FEATURES_SCHEMA.into(),
            dim: self.dim,
            provenance: self.provenance.clone(),
        };
        let mut out = io::to_line(&header);
        out.push('\n');
        for r in &self.records {
            out.push_str(&io::to_line(&RawRecord::from_record(r)));
            out.push('\n');
        }
        out
    }
}

/// Records of one split, in file order.
pub fn split_view(d: &Dataset, split: Split) -> Vec<&FeatureRecord> {
    d.records.iter().filter(|r| r.split == split).collect()
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let lines = io::read_lines(path)?;
    let Some(((hline, htext), rest)) = lines.split_first() else {
        return Err(Error::Schema(format!("{}: empty features file", path.display())));
    };
    let header: Header = io::parse_line(path, *hline, htext)?;
    if header.schema != FEATURES_SCHEMA {
        return Err(Error::Schema(format!(
            "{}: expected schema `{FEATURES_SCHEMA}`, found `{}`",
            path.display(),
            header.schema
        )));
    }
    if header.dim == 0 {
        return Err(Error::Schema(format!("{}: dim must be positive", path.display())));
    }
    let mut records = Vec::with_capacity(rest.len());
    let mut seen = HashSet::new();
    for (line, text) in rest {
        let raw: RawRecord = io::parse_line(path, *line, text)?;
        let record = raw.into_record(header.dim).map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("{}:{line}: {msg}", path.display())),
            other => other,
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::Schema(format!(
                "{}:{line}: duplicate record id `{}`",
                path.display(),
                record.id
            )));
        }
        records.push(record);
    }
    Ok(Dataset {
        dim: header.dim,
        records,
        provenance: header.provenance,
    })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    io::write_text(path, &d.to_jsonl())
}
